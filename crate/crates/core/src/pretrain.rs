//! Stage-1 twin-network trainer: a student learns by gradient descent, a
//! teacher tracks it by exponential moving average, and a reconstruction
//! branch rebuilds the student view from the student's feature pyramid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::autodiff::{Tape, Var};
use crate::encoder::{self, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::Adam;
use crate::params::{trunc_normal, Bound, ParameterSet};
use crate::recon::{self, DecoderConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LOG_EPS: f64 = 1e-12;
/// Projector weights are drawn with std `gain / sqrt(fan_in)`; a small gain
/// keeps logits near zero, where sharpening at `tau_t` has little to act on.
const PROJECTOR_INIT_GAIN: f64 = 1.0;
const S1: &str = "loss_weights.s1";
const S2: &str = "loss_weights.s2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub hidden_dim: usize,
    /// Number of output logits `K`.
    pub output_dim: usize,
    pub num_layers: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig { hidden_dim: 256, output_dim: 256, num_layers: 3 }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config(format!(
                "projector: hidden_dim {}, output_dim {} and num_layers {} must be positive",
                self.hidden_dim, self.output_dim, self.num_layers
            )));
        }
        Ok(())
    }

    fn layer_dims(&self, in_dim: usize) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|i| {
                let a = if i == 0 { in_dim } else { self.hidden_dim };
                let b = if i + 1 == self.num_layers { self.output_dim } else { self.hidden_dim };
                (a, b)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainHyper {
    pub tau_s: f64,
    pub tau_t: f64,
    pub lambda_base: f64,
    pub center_momentum: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            tau_s: 0.1,
            tau_t: 0.04,
            lambda_base: 0.996,
            center_momentum: 0.9,
            learning_rate: 1e-4,
            batch_size: 8,
        }
    }
}

impl PretrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("pretrain: {m}")));
        if !(self.tau_s > 0.0 && self.tau_t > 0.0) {
            return bad(format!("temperatures must be positive (tau_s {}, tau_t {})", self.tau_s, self.tau_t));
        }
        for (name, m) in [("lambda_base", self.lambda_base), ("center_momentum", self.center_momentum)] {
            if !(m > 0.0 && m < 1.0) {
                return bad(format!("{name} {m} outside (0, 1)"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Every configuration a pre-training step depends on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainSetup {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub projector: ProjectorConfig,
    pub decoder: DecoderConfig,
    pub hyper: PretrainHyper,
    /// Drop the reconstruction branch: `L2 ≡ 0`.
    pub disable_reconstruction: bool,
    /// Keep the center at zero.
    pub disable_centering: bool,
}

impl PretrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.projector.validate()?;
        self.decoder.validate(&self.encoder)?;
        self.hyper.validate()?;
        if self.augment.output_size != self.encoder.input_size {
            return Err(Error::Config(format!(
                "augment output_size {} != encoder input_size {}",
                self.augment.output_size, self.encoder.input_size
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// projector

pub fn projector_param_shapes(cfg: &ProjectorConfig, in_dim: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, (a, b)) in cfg.layer_dims(in_dim).into_iter().enumerate() {
        out.push((format!("projector.layers.{i}.weight"), vec![a, b]));
        out.push((format!("projector.layers.{i}.bias"), vec![b]));
    }
    out
}

pub fn init_projector<S: Scalar, R: Rng>(
    cfg: &ProjectorConfig,
    in_dim: usize,
    rng: &mut R,
) -> Result<ParameterSet<S>> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    for (name, shape) in projector_param_shapes(cfg, in_dim) {
        let t = if name.ends_with(".weight") {
            let std = PROJECTOR_INIT_GAIN / (shape[0] as f64).sqrt();
            trunc_normal(rng, &shape, std)
        } else {
            Tensor::zeros(&shape)
        };
        ps.insert(name, t);
    }
    Ok(ps)
}

/// Global average pool of a `[hw, C]` map followed by the projector MLP, giving `[K]`.
pub(crate) fn projector_forward<'t, S: Scalar>(
    p: &Bound<'t, S>,
    cfg: &ProjectorConfig,
    last_map: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let c = last_map.shape()[1];
    let mut x = last_map.mean_rows().reshape(&[1, c]);
    for i in 0..cfg.num_layers {
        let w = p.get(&format!("projector.layers.{i}.weight"))?;
        let expected = w.shape()[0];
        if expected != x.shape()[1] {
            return Err(Error::shape(
                "project",
                format!("projector layer {i} expects {expected} inputs, got {}", x.shape()[1]),
            ));
        }
        x = x.linear(w, Some(p.get(&format!("projector.layers.{i}.bias"))?));
        if i + 1 < cfg.num_layers {
            x = x.gelu();
        }
    }
    let k = x.shape()[1];
    Ok(x.reshape(&[k]))
}

/// Projector logits for a pyramid.
pub fn project<S: Scalar>(
    pyramid: &FeaturePyramid<S>,
    cfg: &ProjectorConfig,
    params: &ParameterSet<S>,
) -> Result<Vec<S>> {
    pyramid.validate()?;
    let last = pyramid.maps.last().ok_or_else(|| Error::shape("project", "empty pyramid"))?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let logits = projector_forward(&bound, cfg, tape.constant(last.to_rows()))?;
    let v = logits.value();
    Ok(v.data().to_vec())
}

// ---------------------------------------------------------------------------
// losses and schedules

/// `softmax((logits − center) / tau)`, stabilized by max subtraction.
pub fn sharpen<S: Scalar>(logits: &[S], tau: f64, center: Option<&[S]>) -> Result<Vec<S>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if let Some(c) = center {
        if c.len() != logits.len() {
            return Err(Error::shape("sharpen", format!("center length {} != logits length {}", c.len(), logits.len())));
        }
    }
    let inv = S::one() / S::of(tau);
    let z: Vec<S> = match center {
        Some(c) => logits.iter().zip(c).map(|(&l, &c)| (l - c) * inv).collect(),
        None => logits.iter().map(|&l| l * inv).collect(),
    };
    let mx = z.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = z.iter().map(|&v| (v - mx).exp()).collect();
    let total: S = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Shannon entropy in nats; `0 · ln 0 = 0`.
pub fn entropy<S: Scalar>(p: &[S]) -> S {
    -p.iter().filter(|&&v| v > S::zero()).map(|&v| v * v.ln()).sum::<S>()
}

fn check_simplex<S: Scalar>(p: &[S], name: &str) -> Result<()> {
    let total: f64 = p.iter().map(|v| v.as_f64()).sum();
    if (total - 1.0).abs() > 1e-5 || p.iter().any(|&v| v < S::zero() || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} is not a probability vector (sum {total})")));
    }
    Ok(())
}

/// `−Σ p_t · ln(p_s + 1e-12)`.
pub fn contrastive_loss<S: Scalar>(p_s: &[S], p_t: &[S]) -> Result<S> {
    if p_s.len() != p_t.len() {
        return Err(Error::shape("contrastive_loss", format!("{} vs {} entries", p_s.len(), p_t.len())));
    }
    check_simplex(p_s, "p_s")?;
    check_simplex(p_t, "p_t")?;
    let eps = S::of(LOG_EPS);
    Ok(-p_s.iter().zip(p_t).map(|(&s, &t)| t * (s + eps).ln()).sum::<S>())
}

/// Tape form: student logits in, constant teacher probabilities as target.
fn contrastive_loss_var<'t, S: Scalar>(student_logits: Var<'t, S>, tau_s: f64, p_t: Var<'t, S>) -> Var<'t, S> {
    let p_s = student_logits.scale(S::one() / S::of(tau_s)).softmax_last(None);
    p_s.add_scalar(S::of(LOG_EPS)).ln().mul(p_t).sum().neg()
}

/// `λ(t) = 1 − (1 − base)(cos(πt/T) + 1)/2`.
pub fn cosine_momentum(step: u64, total_steps: u64, lambda_base: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside [0, {total_steps}]")));
    }
    if !(lambda_base > 0.0 && lambda_base < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda_base {lambda_base} outside (0, 1)")));
    }
    let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    Ok(1.0 - (1.0 - lambda_base) * (c + 1.0) / 2.0)
}

/// `θt ← λθt + (1 − λ)θs`, elementwise.
pub fn ema_update_params<S: Scalar>(
    teacher: &ParameterSet<S>,
    student: &ParameterSet<S>,
    lam: f64,
) -> Result<ParameterSet<S>> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!("EMA momentum {lam} outside [0, 1]")));
    }
    teacher.check_compatible(student, "ema_update_params")?;
    let (a, b) = (S::of(lam), S::of(1.0 - lam));
    let mut out = teacher.clone();
    for (name, t) in out.iter_mut() {
        let s = student.get(name).expect("checked compatible");
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(out)
}

/// `C ← mC + (1 − m) · column_mean(outputs)` for `outputs: [batch, K]`.
pub fn update_center<S: Scalar>(center: &[S], outputs: &Tensor<S>, m: f64) -> Result<Vec<S>> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::InvalidArgument(format!("center momentum {m} outside (0, 1)")));
    }
    let shape = outputs.shape();
    if shape.len() != 2 || shape[1] != center.len() || shape[0] == 0 {
        return Err(Error::shape("update_center", format!("outputs {:?} vs center length {}", shape, center.len())));
    }
    let k = center.len();
    let inv = S::one() / S::of(shape[0] as f64);
    let mut mean = vec![S::zero(); k];
    for row in outputs.data().chunks(k) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let (a, b) = (S::of(m), S::of(1.0 - m));
    Ok(center.iter().zip(mean).map(|(&c, mu)| a * c + b * mu * inv).collect())
}

/// `exp(−s1)·L1 + s1 + exp(−s2)·L2 + s2`.
pub fn combine_losses<S: Scalar>(l1: S, l2: S, s1: S, s2: S) -> Result<S> {
    if !(l1.is_finite() && l2.is_finite() && s1.is_finite() && s2.is_finite()) {
        return Err(Error::NonFinite("combine_losses input"));
    }
    Ok((-s1).exp() * l1 + s1 + (-s2).exp() * l2 + s2)
}

fn weighted<'t, S: Scalar>(loss: Var<'t, S>, s: Var<'t, S>) -> Var<'t, S> {
    s.neg().exp().mul(loss).add(s)
}

// ---------------------------------------------------------------------------
// state and step

/// Full mutable state of stage-1 training.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinState<S> {
    /// `encoder.*` and `projector.*`.
    pub student: ParameterSet<S>,
    /// Same names and shapes as `student`; never touched by the optimizer.
    pub teacher: ParameterSet<S>,
    pub decoder: ParameterSet<S>,
    pub center: Vec<S>,
    /// `(s1, s2)` with loss weights `exp(−s_i)`.
    pub loss_weights: [S; 2],
    pub step: u64,
    pub total_steps: u64,
    pub optimizer: Adam<S>,
}

impl<S: Scalar> TwinState<S> {
    /// Fresh state; the teacher starts as an exact copy of the student.
    pub fn new(setup: &PretrainSetup, total_steps: u64, seed: u64) -> Result<Self> {
        setup.validate()?;
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &setup.encoder;
        let mut student = encoder::init_params(enc, &mut rng)?;
        let last_dim = *enc.stage_dims.last().expect("validated");
        student.extend(init_projector(&setup.projector, last_dim, &mut rng)?);
        let decoder = recon::init_params(&setup.decoder, enc, &mut rng)?;
        Ok(TwinState {
            teacher: student.clone(),
            student,
            decoder,
            center: vec![S::zero(); setup.projector.output_dim],
            loss_weights: [S::zero(); 2],
            step: 0,
            total_steps,
            optimizer: Adam::new(setup.hyper.learning_rate),
        })
    }

    pub fn validate(&self, setup: &PretrainSetup) -> Result<()> {
        self.student.check_compatible(&self.teacher, "twin state student/teacher")?;
        encoder::check_params(&setup.encoder, &self.student)?;
        if self.center.len() != setup.projector.output_dim {
            return Err(Error::shape(
                "twin state",
                format!("center length {} != output_dim {}", self.center.len(), setup.projector.output_dim),
            ));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("center"));
        }
        if self.step > self.total_steps {
            return Err(Error::InvalidArgument(format!("step {} beyond total {}", self.step, self.total_steps)));
        }
        Ok(())
    }
}

/// JSON writes non-finite numbers as `null`; read those back as NaN.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(deserialize_with = "nan_from_null")]
    pub l1: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub l2: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub total: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub lambda: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub entropy: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub s1: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub s2: f64,
    /// Set when the optimizer rejected a non-finite gradient.
    pub skipped: bool,
}

/// Loss and gradients of one sample under the current state.
#[derive(Clone, Debug)]
pub struct SampleEval<S> {
    pub l1: S,
    pub l2: S,
    pub total: S,
    /// Gradients of `total` w.r.t. every trainable tensor (student, decoder,
    /// `loss_weights.s1`, `loss_weights.s2`).
    pub grads: ParameterSet<S>,
    /// Gradients of `total` w.r.t. the teacher tensors.
    pub teacher_grads: ParameterSet<S>,
    /// Pre-softmax teacher logits.
    pub teacher_logits: Vec<S>,
    pub teacher_probs: Vec<S>,
}

/// Forward and backward pass for one `(student view, teacher view)` pair.
pub fn twin_objective<S: Scalar>(
    state: &TwinState<S>,
    setup: &PretrainSetup,
    xs: &Image<S>,
    xt: &Image<S>,
) -> Result<SampleEval<S>> {
    let enc = &setup.encoder;
    encoder::check_image(enc, xs)?;
    encoder::check_image(enc, xt)?;
    let tape = Tape::new();

    let tb = state.teacher.bind(&tape);
    let t_trace = encoder::forward(enc, &tb, tape.constant(xt.to_rows()))?;
    let t_last = *t_trace.maps.last().expect("validated encoder");
    let t_logits = projector_forward(&tb, &setup.projector, t_last)?.detach();
    let teacher_logits = t_logits.value().data().to_vec();
    let center = (!setup.disable_centering).then_some(state.center.as_slice());
    let teacher_probs = sharpen(&teacher_logits, setup.hyper.tau_t, center)?;
    let p_t = tape.constant(Tensor::from_parts(&[teacher_probs.len()], teacher_probs.clone()));

    let sb = state.student.bind(&tape);
    let xs_var = tape.constant(xs.to_rows());
    let s_trace = encoder::forward(enc, &sb, xs_var)?;
    let s_last = *s_trace.maps.last().expect("validated encoder");
    let s_logits = projector_forward(&sb, &setup.projector, s_last)?;
    let l1 = contrastive_loss_var(s_logits, setup.hyper.tau_s, p_t);

    let s1 = tape.param(Tensor::scalar(state.loss_weights[0]));
    let s2 = tape.param(Tensor::scalar(state.loss_weights[1]));
    let (total, l2, db) = if setup.disable_reconstruction {
        (weighted(l1, s1), None, None)
    } else {
        let db = state.decoder.bind(&tape);
        let sides: Vec<usize> = (0..enc.num_stages()).map(|s| enc.grid_side(s)).collect();
        let x_re = recon::forward(&db, &s_trace.maps, &sides, enc.input_size)?;
        let l2 = recon::reconstruction_loss_var(x_re, xs_var);
        (weighted(l1, s1).add(weighted(l2, s2)), Some(l2), Some(db))
    };

    let g = tape.backward(total);
    let mut grads = sb.gradients(&g);
    if let Some(db) = &db {
        grads.extend(db.gradients(&g));
        grads.insert(S2, g.wrt(s2));
    }
    grads.insert(S1, g.wrt(s1));
    Ok(SampleEval {
        l1: l1.item(),
        l2: l2.map_or(S::zero(), |v| v.item()),
        total: total.item(),
        grads,
        teacher_grads: tb.gradients(&g),
        teacher_logits,
        teacher_probs,
    })
}

/// What a pre-training step reports besides the updated state.
#[derive(Clone, Debug)]
pub struct StepOutcome<S> {
    pub log: StepLog,
    /// Batch mean of the teacher's sharpened distribution.
    pub teacher_mean_probs: Vec<S>,
    /// Largest absolute gradient reaching any teacher tensor.
    pub teacher_grad_max_abs: S,
}

/// View seed for the `index`-th image of the batch at `step`: the global seed
/// xor'd with the running sample index, so prefetching cannot change results.
pub fn view_seed(seed: u64, step: u64, batch_size: usize, index: usize) -> u64 {
    seed ^ (step * batch_size as u64 + index as u64)
}

/// One iteration: views, losses, optimizer step on the student side, then
/// EMA of the teacher and the center update.
pub fn pretrain_step<S: Scalar>(
    state: &mut TwinState<S>,
    batch: &[Image<S>],
    setup: &PretrainSetup,
    seed: u64,
) -> Result<StepOutcome<S>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if state.step >= state.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {} has reached total_steps {}",
            state.step, state.total_steps
        )));
    }
    let b = batch.len();
    let inv_b = S::one() / S::of(b as f64);
    let k = setup.projector.output_dim;

    let mut grads: Option<ParameterSet<S>> = None;
    let mut teacher_grad_max_abs = S::zero();
    let mut teacher_logits = Vec::with_capacity(b * k);
    let mut mean_probs = vec![S::zero(); k];
    let (mut l1, mut l2, mut ent) = (S::zero(), S::zero(), S::zero());
    for (i, x) in batch.iter().enumerate() {
        let (xs, xt) = make_views(x, &setup.augment, view_seed(seed, state.step, b, i))?;
        let eval = twin_objective(state, setup, &xs, &xt)?;
        l1 += eval.l1 * inv_b;
        l2 += eval.l2 * inv_b;
        ent += entropy(&eval.teacher_probs) * inv_b;
        for (m, &p) in mean_probs.iter_mut().zip(&eval.teacher_probs) {
            *m += p * inv_b;
        }
        teacher_grad_max_abs = eval
            .teacher_grads
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
            .fold(teacher_grad_max_abs, S::max);
        teacher_logits.extend_from_slice(&eval.teacher_logits);
        match &mut grads {
            None => grads = Some(eval.grads),
            Some(acc) => {
                for (name, g) in acc.iter_mut() {
                    g.add_assign(eval.grads.get(name).expect("same structure every sample"));
                }
            }
        }
    }
    let mut grads = grads.expect("nonempty batch");
    for (_, g) in grads.iter_mut() {
        g.scale_in_place(inv_b);
    }

    let [s1, s2] = state.loss_weights;
    let total = if setup.disable_reconstruction {
        (-s1).exp() * l1 + s1
    } else {
        combine_losses(l1, l2, s1, s2)?
    };
    let lambda = cosine_momentum(state.step, state.total_steps, setup.hyper.lambda_base)?;

    let mut trainable = state.student.clone();
    if !setup.disable_reconstruction {
        trainable.extend(state.decoder.clone());
    }
    trainable.insert(S1, Tensor::scalar(s1));
    trainable.insert(S2, Tensor::scalar(s2));
    state.optimizer.lr = setup.hyper.learning_rate;
    let skipped = match state.optimizer.step(&mut trainable, &grads) {
        Ok(()) => false,
        Err(Error::NonFinite(_)) => {
            log::warn!("step {}: non-finite gradient, update skipped", state.step);
            true
        }
        Err(e) => return Err(e),
    };
    if !skipped {
        state.loss_weights = [
            trainable.get(S1).expect("inserted").item(),
            trainable.get(S2).expect("inserted").item(),
        ];
        if !setup.disable_reconstruction {
            state.decoder = trainable.filter_prefix("decoder.");
        }
        let mut student = trainable.filter_prefix("encoder.");
        student.extend(trainable.filter_prefix("projector."));
        state.student = student;
        state.teacher = ema_update_params(&state.teacher, &state.student, lambda)?;
        if !setup.disable_centering {
            let outputs = Tensor::from_parts(&[b, k], teacher_logits);
            state.center = update_center(&state.center, &outputs, setup.hyper.center_momentum)?;
        }
    }

    let log = StepLog {
        step: state.step,
        l1: l1.as_f64(),
        l2: l2.as_f64(),
        total: total.as_f64(),
        lambda,
        entropy: ent.as_f64(),
        s1: s1.as_f64(),
        s2: s2.as_f64(),
        skipped,
    };
    state.step += 1;
    Ok(StepOutcome { log, teacher_mean_probs: mean_probs, teacher_grad_max_abs })
}
