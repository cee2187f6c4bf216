//! Adaptive moment estimation over named parameter sets.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of applied updates.
    pub t: u64,
    pub m: ParameterSet<S>,
    pub v: ParameterSet<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: ParameterSet::new(), v: ParameterSet::new() }
    }

    /// Apply one update to every parameter that has a gradient.
    ///
    /// Non-finite gradients leave parameters and moments untouched and return
    /// [`Error::NonFinite`].
    pub fn step(&mut self, params: &mut ParameterSet<S>, grads: &ParameterSet<S>) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let one = S::one();
        let bc1 = one - S::of(self.beta1.powi(self.t as i32));
        let bc2 = one - S::of(self.beta2.powi(self.t as i32));
        let lr = S::of(self.lr);
        let eps = S::of(self.eps);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = b1 * *mv + (one - b1) * gv;
            }
            let v = self.v.get_mut(name).expect("inserted");
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            }
            let m = self.m.get(name).expect("inserted");
            let v = self.v.get(name).expect("inserted");
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
