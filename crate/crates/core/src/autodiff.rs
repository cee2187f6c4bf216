//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Leaves are
//! either tracked (trainable parameters, inputs under test) or constants.
//! Nodes whose parents are all constants store no backward closure, so
//! evaluating a frozen network costs nothing at backward time.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// Marker for "no source element": gathers write a zero there.
pub const NONE: usize = usize::MAX;

type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    tracked: bool,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every tracked leaf it depends on.
pub struct Gradients<S: Scalar> {
    grads: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(&v.id)
    }

    /// Gradient for `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, S>) -> Tensor<S> {
        self.grads.get(&v.id).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor<S>, tracked: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: Vec::new(), backward: None, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Tracked leaf: gradients are reported for it.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(value, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(value, false)
    }

    fn record<F>(&self, value: Tensor<S>, parents: &[Var<'_, S>], backward: F) -> Var<'_, S>
    where
        F: Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let tracked = ids.iter().any(|&p| nodes[p].tracked);
        let backward: Option<BackwardFn<S>> = if tracked { Some(Box::new(backward)) } else { None };
        nodes.push(Node { value: Rc::new(value), parents: ids, backward, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                None => {
                    if node.tracked {
                        leaves.insert(i, g);
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
                    let pgrads = f(&g, &needs);
                    for ((&p, need), pg) in node.parents.iter().zip(&needs).zip(pgrads) {
                        if !need {
                            continue;
                        }
                        if let Some(pg) = pg {
                            match &mut grads[p] {
                                Some(acc) => acc.add_assign(&pg),
                                slot @ None => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Sparse linear map between row sets: output row `o` is
/// `Σ weight · input_row[src]` over the entries of `o`.
///
/// Bilinear resampling, adaptive average pooling and global pooling are all
/// instances of this.
#[derive(Clone, Debug)]
pub struct RowMix<S> {
    pub(crate) n_in: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, S)>,
}

impl<S: Scalar> RowMix<S> {
    pub fn from_rows(n_in: usize, rows: Vec<Vec<(usize, S)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for r in rows {
            debug_assert!(r.iter().all(|&(i, _)| i < n_in));
            entries.extend(r);
            offsets.push(entries.len());
        }
        RowMix { n_in, offsets, entries }
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub(crate) fn row(&self, o: usize) -> &[(usize, S)] {
        &self.entries[self.offsets[o]..self.offsets[o + 1]]
    }

    pub fn apply(&self, input: &[S], cols: usize) -> Vec<S> {
        let mut out = vec![S::zero(); self.n_out() * cols];
        for o in 0..self.n_out() {
            let dst = &mut out[o * cols..(o + 1) * cols];
            for &(i, w) in self.row(o) {
                let src = &input[i * cols..(i + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, grad: &[S], cols: usize) -> Vec<S> {
        let mut out = vec![S::zero(); self.n_in * cols];
        for o in 0..self.n_out() {
            let src = &grad[o * cols..(o + 1) * cols];
            for &(i, w) in self.row(o) {
                let dst = &mut out[i * cols..(i + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let one = S::one();
    let x3 = x * x * x;
    let inner = c * (x + k * x3);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dinner = c * (one + S::of(3.0) * k * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> S {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, S> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, S> {
        let old = self.shape();
        let value = (*self.value()).clone().reshaped(shape);
        self.tape.record(value, &[self], move |g, _| vec![Some(g.clone().reshaped(&old))])
    }

    pub fn add(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                need[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn div(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = a.zip_map(&b, |x, y| x / y);
        let out_rc = Rc::new(out.clone());
        self.tape.record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, bv| gv / bv)),
                need[1].then(|| {
                    let q = g.zip_map(&out_rc, |gv, ov| gv * ov);
                    q.zip_map(&b, |qv, bv| -qv / bv)
                }),
            ]
        })
    }

    pub fn neg(self) -> Var<'t, S> {
        self.scale(-S::one())
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        let out = self.value().map(|x| x * c);
        self.tape.record(out, &[self], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        let out = self.value().map(|x| x + c);
        self.tape.record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn exp(self) -> Var<'t, S> {
        let out = self.value().map(S::exp);
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| vec![Some(g.zip_map(&y, |gv, yv| gv * yv))])
    }

    pub fn ln(self) -> Var<'t, S> {
        let a = self.value();
        let out = a.map(S::ln);
        self.tape.record(out, &[self], move |g, _| vec![Some(g.zip_map(&a, |gv, av| gv / av))])
    }

    pub fn abs(self) -> Var<'t, S> {
        let a = self.value();
        let out = a.map(S::abs);
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&a, |gv, av| {
                if av > S::zero() {
                    gv
                } else if av < S::zero() {
                    -gv
                } else {
                    S::zero()
                }
            }))]
        })
    }

    pub fn relu(self) -> Var<'t, S> {
        let a = self.value();
        let out = a.map(|x| x.max(S::zero()));
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&a, |gv, av| if av > S::zero() { gv } else { S::zero() }))]
        })
    }

    pub fn gelu(self) -> Var<'t, S> {
        let a = self.value();
        let out = a.map(|x| gelu_parts(x).0);
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&a, |gv, av| gv * gelu_parts(av).1))]
        })
    }

    /// `x[..., n] + b[n]`
    pub fn add_bias(self, bias: Var<'t, S>) -> Var<'t, S> {
        let (x, b) = (self.value(), bias.value());
        let n = b.len();
        assert_eq!(*x.shape().last().unwrap(), n, "bias length mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let bshape = b.shape().to_vec();
        self.tape.record(out, &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![S::zero(); n];
                for row in g.data().chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_parts(&bshape, acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    pub fn sum(self) -> Var<'t, S> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.sum());
        self.tape.record(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.value().len();
        self.sum().scale(S::one() / S::of(n as f64))
    }

    /// Column mean of a `[m, n]` matrix, giving `[n]`.
    pub fn mean_rows(self) -> Var<'t, S> {
        let a = self.value();
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let inv = S::one() / S::of(m as f64);
        let mut acc = vec![S::zero(); n];
        for row in a.data().chunks(n) {
            for (c, &v) in acc.iter_mut().zip(row) {
                *c += v;
            }
        }
        for c in &mut acc {
            *c *= inv;
        }
        let out = Tensor::from_parts(&[n], acc);
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(m * n);
            for _ in 0..m {
                gx.extend(g.data().iter().map(|&v| v * inv));
            }
            vec![Some(Tensor::from_parts(&[m, n], gx))]
        })
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        assert_eq!(b.shape()[0], k, "matmul inner dimension mismatch");
        let n = b.shape()[1];
        let mut c = vec![S::zero(); m * n];
        gemm(a.data(), b.data(), &mut c, m, k, n, false, false);
        let out = Tensor::from_parts(&[m, n], c);
        self.tape.record(out, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![S::zero(); m * k];
                gemm(g.data(), b.data(), &mut ga, m, n, k, false, true);
                Tensor::from_parts(&[m, k], ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![S::zero(); k * n];
                gemm(a.data(), g.data(), &mut gb, k, m, n, true, false);
                Tensor::from_parts(&[k, n], gb)
            });
            vec![ga, gb]
        })
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]` when
    /// `transpose_rhs` is set.
    pub fn bmm(self, other: Var<'t, S>, transpose_rhs: bool) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], bs, "bmm batch mismatch");
        let n = if transpose_rhs {
            assert_eq!(b.shape()[2], k, "bmm inner dimension mismatch");
            b.shape()[1]
        } else {
            assert_eq!(b.shape()[1], k, "bmm inner dimension mismatch");
            b.shape()[2]
        };
        let mut c = vec![S::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                transpose_rhs,
            );
        }
        let out = Tensor::from_parts(&[bs, m, n], c);
        let bshape = b.shape().to_vec();
        self.tape.record(out, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![S::zero(); bs * m * k];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    // dA = dC · Bᵀ (B stored [k,n]) or dC · B (B stored [n,k])
                    gemm(gi, bi, &mut ga[i * m * k..(i + 1) * m * k], m, n, k, false, !transpose_rhs);
                }
                Tensor::from_parts(&[bs, m, k], ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![S::zero(); bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if transpose_rhs {
                        // dB[n,k] = dCᵀ · A
                        gemm(gi, ai, dst, n, m, k, true, false);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(ai, gi, dst, k, m, n, true, false);
                    }
                }
                Tensor::from_parts(&bshape, gb)
            });
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis of `self + mask` (mask is a constant of the same shape).
    pub fn softmax_last(self, mask: Option<Rc<Tensor<S>>>) -> Var<'t, S> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let mut out = (*a).clone();
        if let Some(mask) = &mask {
            assert_eq!(mask.shape(), a.shape(), "softmax mask shape mismatch");
            out.add_assign(mask);
        }
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            let inv = S::one() / z;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let s: S = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - s);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn log_softmax_last(self) -> Var<'t, S> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let s: S = grow.iter().copied().sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv -= yv.exp() * s;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, eps: f64) -> Var<'t, S> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let n = gm.len();
        assert_eq!(*x.shape().last().unwrap(), n, "layer_norm width mismatch");
        let rows = x.len() / n;
        let eps = S::of(eps);
        let inv_n = S::one() / S::of(n as f64);
        let mut xhat = vec![S::zero(); x.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let out = Tensor::from_parts(x.shape(), out);
        let xshape = x.shape().to_vec();
        self.tape.record(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut ggamma = vec![S::zero(); n];
            let mut gbeta = vec![S::zero(); n];
            let mut gx = vec![S::zero(); gd.len()];
            for r in 0..rows {
                let grow = &gd[r * n..(r + 1) * n];
                let hrow = &xhat[r * n..(r + 1) * n];
                let mut mean_gh = S::zero();
                let mut mean_ghh = S::zero();
                for j in 0..n {
                    ggamma[j] += grow[j] * hrow[j];
                    gbeta[j] += grow[j];
                    let gh = grow[j] * gm.data()[j];
                    mean_gh += gh;
                    mean_ghh += gh * hrow[j];
                }
                mean_gh *= inv_n;
                mean_ghh *= inv_n;
                for j in 0..n {
                    let gh = grow[j] * gm.data()[j];
                    gx[r * n + j] = rstd[r] * (gh - mean_gh - hrow[j] * mean_ghh);
                }
            }
            vec![
                need[0].then(|| Tensor::from_parts(&xshape, gx)),
                need[1].then(|| Tensor::from_parts(&[n], ggamma)),
                need[2].then(|| Tensor::from_parts(&[n], gbeta)),
            ]
        })
    }

    /// Elementwise gather: `out[i] = self[index[i]]` (zero for [`NONE`]).
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t, S> {
        let a = self.value();
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather index/shape mismatch");
        let src = a.data();
        let data = index.iter().map(|&i| if i == NONE { S::zero() } else { src[i] }).collect();
        let out = Tensor::from_parts(shape, data);
        let ashape = a.shape().to_vec();
        let n_in = a.len();
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = vec![S::zero(); n_in];
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != NONE {
                    gx[i] += gv;
                }
            }
            vec![Some(Tensor::from_parts(&ashape, gx))]
        })
    }

    /// Row gather on a `[n, C]` matrix: `out[r] = self[rows[r]]` (zero row for [`NONE`]).
    pub fn gather_rows(self, rows: Rc<Vec<usize>>) -> Var<'t, S> {
        let a = self.value();
        let (n, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![S::zero(); rows.len() * c];
        for (o, &r) in rows.iter().enumerate() {
            if r != NONE {
                data[o * c..(o + 1) * c].copy_from_slice(&a.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::from_parts(&[rows.len(), c], data);
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = vec![S::zero(); n * c];
            for (o, &r) in rows.iter().enumerate() {
                if r != NONE {
                    let dst = &mut gx[r * c..(r + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[o * c..(o + 1) * c]) {
                        *d += s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(&[n, c], gx))]
        })
    }

    /// Sparse row mixing of a `[n_in, C]` matrix into `[n_out, C]`.
    pub fn mix_rows(self, mix: Rc<RowMix<S>>) -> Var<'t, S> {
        let a = self.value();
        let (n, c) = (a.shape()[0], a.shape()[1]);
        assert_eq!(n, mix.n_in, "mix_rows input rows mismatch");
        let out = Tensor::from_parts(&[mix.n_out(), c], mix.apply(a.data(), c));
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(&[n, c], mix.apply_transpose(g.data(), c)))]
        })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Var<'t, S> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor<S>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), base.len(), "concat rank mismatch");
                assert!(
                    s.iter().enumerate().all(|(d, &x)| d == axis || x == base[d]),
                    "concat shape mismatch {:?} vs {:?}",
                    s,
                    base
                );
                s[axis] * inner
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total / inner;
        let out = Tensor::from_parts(&shape, data);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.record(out, parts, move |g, need| {
            let mut grads: Vec<Vec<S>> =
                widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &w) in grads.iter_mut().zip(&widths) {
                    gv.extend_from_slice(&g.data()[off..off + w]);
                    off += w;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(need)
                .map(|((gv, s), &nd)| nd.then(|| Tensor::from_parts(s, gv)))
                .collect()
        })
    }

    /// `x · W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t, S>, bias: Option<Var<'t, S>>) -> Var<'t, S> {
        let y = self.matmul(weight);
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }
}
