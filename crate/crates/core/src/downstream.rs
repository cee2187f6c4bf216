//! Stage-2 siamese segmentation model.
//!
//! Pre- and post-event images go through one shared encoder; stage maps are
//! concatenated channelwise and fused by a pyramid-pooling, top-down head into
//! five per-pixel class scores (0 no building, 1 no damage, 2 minor, 3 major,
//! 4 destroyed).

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{self, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::image::{save_label_png, Image};
use crate::optim::Adam;
use crate::params::{he_normal, Bound, ParameterSet};
use crate::scalar::Scalar;
use crate::spatial::{adaptive_avg_pool_mix, conv3x3, resize};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;
const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegHeadConfig {
    pub fusion_dim: usize,
    pub ppm_bins: Vec<usize>,
    pub num_classes: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        SegHeadConfig { fusion_dim: 64, ppm_bins: vec![1, 2, 4], num_classes: NUM_CLASSES }
    }
}

impl SegHeadConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("head: {m}")));
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.fusion_dim == 0 {
            return bad("fusion_dim must be positive".into());
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.contains(&0) {
            return bad(format!("ppm_bins {:?} must be nonempty and positive", self.ppm_bins));
        }
        let deepest = enc.grid_side(enc.num_stages() - 1);
        if let Some(&b) = self.ppm_bins.iter().find(|&&b| b > deepest) {
            return bad(format!("ppm bin {b} exceeds deepest grid side {deepest}"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// masks and predictions

/// Per-pixel class scores, channel-first `(5, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap<S> {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<S>,
}

impl<S: Scalar> PredictionMap<S> {
    pub fn new(height: usize, width: usize, scores: Vec<S>) -> Result<Self> {
        if scores.len() != NUM_CLASSES * height * width {
            return Err(Error::shape(
                "PredictionMap",
                format!("{} scores for {NUM_CLASSES}x{height}x{width}", scores.len()),
            ));
        }
        if !scores.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prediction scores"));
        }
        Ok(PredictionMap { height, width, scores })
    }

    /// From channels-last rows `[H*W, 5]`.
    pub(crate) fn from_rows(height: usize, width: usize, rows: &Tensor<S>) -> Result<Self> {
        let hw = height * width;
        let mut scores = vec![S::zero(); NUM_CLASSES * hw];
        for (p, row) in rows.data().chunks(NUM_CLASSES).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                scores[c * hw + p] = v;
            }
        }
        PredictionMap::new(height, width, scores)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (NUM_CLASSES, self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> S {
        self.scores[(c * self.height + y) * self.width + x]
    }

    /// Channels-last rows `[H*W, 5]`.
    pub fn to_rows(&self) -> Tensor<S> {
        let hw = self.height * self.width;
        let mut rows = Vec::with_capacity(NUM_CLASSES * hw);
        for p in 0..hw {
            rows.extend((0..NUM_CLASSES).map(|c| self.scores[c * hw + p]));
        }
        Tensor::from_parts(&[hw, NUM_CLASSES], rows)
    }
}

/// Per-pixel damage labels in `0..=4`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DamageMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl DamageMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("DamageMask", format!("{} labels for {height}x{width}", labels.len())));
        }
        if let Some(&v) = labels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("damage label {v} outside 0..=4")));
        }
        Ok(DamageMask { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DamageMask { height, width, labels: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Building wherever the damage label is at least 1.
    pub fn localization(&self) -> LocalizationMask {
        LocalizationMask {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&v| u8::from(v >= 1)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_label_png(path, self.height, self.width, &self.labels)
    }
}

/// Per-pixel building flags in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LocalizationMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LocalizationMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_label_png(path, self.height, self.width, &self.labels)
    }
}

/// Argmax damage labels (ties to the lowest class) and the derived building mask.
pub fn predict_masks<S: Scalar>(pred: &PredictionMap<S>) -> (DamageMask, LocalizationMask) {
    let hw = pred.height * pred.width;
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if pred.scores[c * hw + p] > pred.scores[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let damage = DamageMask { height: pred.height, width: pred.width, labels };
    let loc = damage.localization();
    debug_assert!(damage.labels.iter().zip(&loc.labels).all(|(&d, &l)| (d >= 1) == (l == 1)));
    (damage, loc)
}

// ---------------------------------------------------------------------------
// head

/// Name and shape of every head tensor for an encoder with `stage_dims`.
pub fn head_param_shapes(cfg: &SegHeadConfig, stage_dims: &[usize]) -> Vec<(String, Vec<usize>)> {
    let f = cfg.fusion_dim;
    let s = stage_dims.len();
    let deep = 2 * stage_dims[s - 1];
    let mut out = Vec::new();
    let mut conv = |name: String, fan_in: usize, fan_out: usize| {
        out.push((format!("{name}.weight"), vec![fan_in, fan_out]));
        out.push((format!("{name}.bias"), vec![fan_out]));
    };
    for k in 0..cfg.ppm_bins.len() {
        conv(format!("head.ppm.{k}"), deep, f);
    }
    conv("head.bottleneck".into(), 9 * (deep + cfg.ppm_bins.len() * f), f);
    for (st, &d) in stage_dims.iter().enumerate().take(s - 1) {
        conv(format!("head.lateral.{st}"), 2 * d, f);
        conv(format!("head.fpn.{st}"), 9 * f, f);
    }
    conv("head.fuse".into(), 9 * s * f, f);
    conv("head.classifier".into(), f, cfg.num_classes);
    out
}

pub fn init_head<S: Scalar, R: Rng>(
    cfg: &SegHeadConfig,
    enc: &EncoderConfig,
    rng: &mut R,
) -> Result<ParameterSet<S>> {
    cfg.validate(enc)?;
    let mut ps = ParameterSet::new();
    for (name, shape) in head_param_shapes(cfg, &enc.stage_dims) {
        let t = if name.ends_with(".weight") { he_normal(rng, &shape) } else { Tensor::zeros(&shape) };
        ps.insert(name, t);
    }
    Ok(ps)
}

pub fn check_head_params<S: Scalar>(cfg: &SegHeadConfig, enc: &EncoderConfig, params: &ParameterSet<S>) -> Result<()> {
    let heads = params.filter_prefix("head.");
    if heads.is_empty() {
        return Err(Error::MissingHead("no head.* parameters present".into()));
    }
    let mut expected = ParameterSet::new();
    for (name, shape) in head_param_shapes(cfg, &enc.stage_dims) {
        expected.insert(name, Tensor::<S>::zeros(&shape));
    }
    expected.check_compatible(&heads, "head parameters")
}

fn conv1x1<'t, S: Scalar>(x: Var<'t, S>, p: &Bound<'t, S>, name: &str) -> Result<Var<'t, S>> {
    Ok(x.linear(p.get(&format!("{name}.weight"))?, Some(p.get(&format!("{name}.bias"))?)))
}

fn conv3<'t, S: Scalar>(x: Var<'t, S>, side: usize, p: &Bound<'t, S>, name: &str) -> Result<Var<'t, S>> {
    Ok(conv3x3(x, side, side, p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?))
}

/// Head over channels-last concatenated stage maps; returns `[size², 5]` rows.
pub(crate) fn head_forward<'t, S: Scalar>(
    cfg: &SegHeadConfig,
    p: &Bound<'t, S>,
    maps: &[Var<'t, S>],
    sides: &[usize],
    output_size: usize,
) -> Result<Var<'t, S>> {
    let s = maps.len();
    let top = s - 1;
    let g = sides[top];

    let mut branches = vec![maps[top]];
    for (k, &bin) in cfg.ppm_bins.iter().enumerate() {
        let pooled = maps[top].mix_rows(Rc::new(adaptive_avg_pool_mix(g, g, bin, bin)));
        let y = conv1x1(pooled, p, &format!("head.ppm.{k}"))?.relu();
        branches.push(resize(y, (bin, bin), (g, g)));
    }
    let ppm = Var::concat(&branches, 1);
    let mut fused = vec![conv3(ppm, g, p, "head.bottleneck")?.relu()];

    // top-down pathway: fused[0] is the deepest level
    let mut prev = fused[0];
    for st in (0..top).rev() {
        let lat = conv1x1(maps[st], p, &format!("head.lateral.{st}"))?.relu();
        let f = lat.add(resize(prev, (sides[st + 1], sides[st + 1]), (sides[st], sides[st])));
        prev = f;
        fused.push(conv3(f, sides[st], p, &format!("head.fpn.{st}"))?.relu());
    }
    fused.reverse();

    let g0 = sides[0];
    let levels: Vec<_> = fused
        .iter()
        .zip(sides)
        .map(|(&v, &side)| resize(v, (side, side), (g0, g0)))
        .collect();
    let x = conv3(Var::concat(&levels, 1), g0, p, "head.fuse")?.relu();
    let logits = conv1x1(x, p, "head.classifier")?;
    Ok(resize(logits, (g0, g0), (output_size, output_size)))
}

fn check_concat_pyramid<S: Scalar>(pyr: &FeaturePyramid<S>) -> Result<()> {
    if pyr.depth() < 2 {
        return Err(Error::shape("segmentation_head", format!("pyramid depth {} < 2", pyr.depth())));
    }
    pyr.validate()
}

/// Fuse an already concatenated pyramid into a prediction at `output_size`.
pub fn segmentation_head<S: Scalar>(
    concat_pyramid: &FeaturePyramid<S>,
    cfg: &SegHeadConfig,
    params: &ParameterSet<S>,
    output_size: usize,
) -> Result<PredictionMap<S>> {
    check_concat_pyramid(concat_pyramid)?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let maps: Vec<_> = concat_pyramid.maps.iter().map(|m| tape.constant(m.to_rows())).collect();
    let sides: Vec<_> = concat_pyramid.maps.iter().map(|m| m.height).collect();
    let out = head_forward(cfg, &bound, &maps, &sides, output_size)?;
    PredictionMap::from_rows(output_size, output_size, &out.value())
}

fn check_pair<S: Scalar>(pre: &Image<S>, post: &Image<S>) -> Result<()> {
    if (pre.height(), pre.width(), pre.channels()) != (post.height(), post.width(), post.channels()) {
        return Err(Error::shape(
            "siamese_forward",
            format!(
                "pre {}x{}x{} vs post {}x{}x{}",
                pre.height(),
                pre.width(),
                pre.channels(),
                post.height(),
                post.width(),
                post.channels()
            ),
        ));
    }
    Ok(())
}

/// Both images through the same encoder, stage maps concatenated (pre first).
pub(crate) fn siamese_pyramid<'t, S: Scalar>(
    enc: &EncoderConfig,
    eb: &Bound<'t, S>,
    pre: Var<'t, S>,
    post: Var<'t, S>,
) -> Result<Vec<Var<'t, S>>> {
    let a = encoder::forward(enc, eb, pre)?;
    let b = encoder::forward(enc, eb, post)?;
    Ok(a.maps.iter().zip(&b.maps).map(|(&x, &y)| Var::concat(&[x, y], 1)).collect())
}

fn stage_sides(enc: &EncoderConfig) -> Vec<usize> {
    (0..enc.num_stages()).map(|s| enc.grid_side(s)).collect()
}

/// Concatenated stage maps for a pre/post pair (stage `s` has `2·stage_dims[s]` channels).
pub fn siamese_features<S: Scalar>(
    pre: &Image<S>,
    post: &Image<S>,
    encoder_params: &ParameterSet<S>,
    enc: &EncoderConfig,
) -> Result<FeaturePyramid<S>> {
    check_pair(pre, post)?;
    enc.validate()?;
    encoder::check_image(enc, pre)?;
    encoder::check_image(enc, post)?;
    encoder::check_params(enc, encoder_params)?;
    let tape = Tape::new();
    let eb = encoder_params.bind_frozen(&tape);
    let maps = siamese_pyramid(enc, &eb, tape.constant(pre.to_rows()), tape.constant(post.to_rows()))?;
    let maps = maps
        .iter()
        .zip(stage_sides(enc))
        .map(|(m, side)| encoder::FeatureMap::from_rows(side, side, &m.value()))
        .collect();
    Ok(FeaturePyramid { maps })
}

pub fn siamese_forward<S: Scalar>(
    pre: &Image<S>,
    post: &Image<S>,
    encoder_params: &ParameterSet<S>,
    head_params: &ParameterSet<S>,
    enc: &EncoderConfig,
    head: &SegHeadConfig,
) -> Result<PredictionMap<S>> {
    check_pair(pre, post)?;
    enc.validate()?;
    head.validate(enc)?;
    encoder::check_image(enc, pre)?;
    encoder::check_image(enc, post)?;
    encoder::check_params(enc, encoder_params)?;
    check_head_params(head, enc, head_params)?;
    let tape = Tape::new();
    let eb = encoder_params.bind_frozen(&tape);
    let hb = head_params.bind_frozen(&tape);
    let maps = siamese_pyramid(enc, &eb, tape.constant(pre.to_rows()), tape.constant(post.to_rows()))?;
    let out = head_forward(head, &hb, &maps, &stage_sides(enc), enc.input_size)?;
    PredictionMap::from_rows(enc.input_size, enc.input_size, &out.value())
}

// ---------------------------------------------------------------------------
// loss

fn target_rows<S: Scalar>(target: &DamageMask) -> Tensor<S> {
    let mut t = vec![S::zero(); target.labels.len() * NUM_CLASSES];
    for (p, &c) in target.labels.iter().enumerate() {
        t[p * NUM_CLASSES + c as usize] = S::one();
    }
    Tensor::from_parts(&[target.labels.len(), NUM_CLASSES], t)
}

fn class_weight_vec<S: Scalar>(weights: Option<&[f64]>) -> Result<Vec<S>> {
    match weights {
        None => Ok(vec![S::one(); NUM_CLASSES]),
        Some(w) if w.len() == NUM_CLASSES && w.iter().all(|&v| v >= 0.0 && v.is_finite()) && w.iter().sum::<f64>() > 0.0 => {
            Ok(w.iter().map(|&v| S::of(v)).collect())
        }
        Some(w) => Err(Error::InvalidArgument(format!("class weights {w:?} must be 5 nonnegative values"))),
    }
}

/// Cross-entropy plus `1 − soft Dice` on the tape. `logits` is `[N, 5]`.
pub(crate) fn dice_ce_var<'t, S: Scalar>(
    logits: Var<'t, S>,
    target: &DamageMask,
    class_weights: Option<&[f64]>,
) -> Result<Var<'t, S>> {
    let n = target.labels.len();
    if logits.shape() != [n, NUM_CLASSES] {
        return Err(Error::shape("dice_ce_loss", format!("scores {:?} vs {n} target pixels", logits.shape())));
    }
    let tape = logits.tape();
    let w = class_weight_vec::<S>(class_weights)?;
    let onehot = target_rows::<S>(target);

    // per-pixel weight w[y_i]; weighted mean of −log p_{i, y_i}
    let mut weighted = onehot.clone();
    for row in weighted.data_mut().chunks_mut(NUM_CLASSES) {
        for (v, &wc) in row.iter_mut().zip(&w) {
            *v *= wc;
        }
    }
    let norm: S = weighted.sum();
    if norm <= S::zero() {
        return Err(Error::InvalidArgument("class weights give zero total weight for this target".into()));
    }
    let logp = logits.log_softmax_last();
    let ce = logp.mul(tape.constant(weighted)).sum().scale(-S::one() / norm);

    let p = logp.exp();
    let nn = S::of(n as f64);
    let t = tape.constant(onehot.clone());
    let inter = p.mul(t).mean_rows().scale(nn);
    let psum = p.mean_rows().scale(nn);
    let mut tsum = vec![S::zero(); NUM_CLASSES];
    for row in onehot.data().chunks(NUM_CLASSES) {
        for (acc, &v) in tsum.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let eps = S::of(DICE_EPS);
    let tsum = tape.constant(Tensor::from_parts(&[NUM_CLASSES], tsum));
    let dice = inter.scale(S::of(2.0)).add_scalar(eps).div(psum.add(tsum).add_scalar(eps));
    let wsum: S = w.iter().copied().sum();
    let wvar = tape.constant(Tensor::from_parts(&[NUM_CLASSES], w));
    let mean_dice = dice.mul(wvar).sum().scale(S::one() / wsum);
    Ok(ce.add(mean_dice.neg().add_scalar(S::one())))
}

/// `CE + (1 − mean soft Dice)` with Dice smoothing 1.
pub fn dice_ce_loss<S: Scalar>(pred: &PredictionMap<S>, target: &DamageMask, class_weights: Option<&[f64]>) -> Result<S> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::shape(
            "dice_ce_loss",
            format!("prediction {}x{} vs target {}x{}", pred.height, pred.width, target.height, target.width),
        ));
    }
    let tape = Tape::new();
    let logits = tape.constant(pred.to_rows());
    Ok(dice_ce_var(logits, target, class_weights)?.item())
}

// ---------------------------------------------------------------------------
// fine-tuning

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSetup {
    pub encoder: EncoderConfig,
    pub head: SegHeadConfig,
    pub learning_rate: f64,
    pub freeze_encoder: bool,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for FinetuneSetup {
    fn default() -> Self {
        FinetuneSetup {
            encoder: EncoderConfig::default(),
            head: SegHeadConfig::default(),
            learning_rate: 1e-4,
            freeze_encoder: false,
            class_weights: None,
        }
    }
}

impl FinetuneSetup {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate(&self.encoder)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("finetune: learning_rate {} must be nonnegative", self.learning_rate)));
        }
        class_weight_vec::<f64>(self.class_weights.as_deref()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneState<S> {
    /// `encoder.*` tensors.
    pub encoder: ParameterSet<S>,
    /// `head.*` tensors.
    pub head: ParameterSet<S>,
    pub optimizer: Adam<S>,
    pub step: u64,
}

impl<S: Scalar> FinetuneState<S> {
    /// Head always starts fresh; the encoder comes from `encoder_init` when
    /// given (stage-1 transfer) and is randomly initialized otherwise.
    pub fn new(setup: &FinetuneSetup, encoder_init: Option<&ParameterSet<S>>, seed: u64) -> Result<Self> {
        setup.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random_encoder = encoder::init_params(&setup.encoder, &mut rng)?;
        let encoder = match encoder_init {
            Some(p) => {
                let p = p.filter_prefix("encoder.");
                encoder::check_params(&setup.encoder, &p)?;
                p
            }
            None => random_encoder,
        };
        let head = init_head(&setup.head, &setup.encoder, &mut rng)?;
        Ok(FinetuneState { encoder, head, optimizer: Adam::new(setup.learning_rate), step: 0 })
    }

    pub fn params(&self) -> ParameterSet<S> {
        let mut all = self.encoder.clone();
        all.extend(self.head.clone());
        all
    }
}

/// One labeled training example.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a, S> {
    pub pre: &'a Image<S>,
    pub post: &'a Image<S>,
    pub target: &'a DamageMask,
}

/// Loss of one labeled pair and its gradients w.r.t. the trainable tensors
/// (the head, plus the encoder unless frozen).
pub fn siamese_objective<S: Scalar>(
    state: &FinetuneState<S>,
    setup: &FinetuneSetup,
    sample: Labeled<'_, S>,
) -> Result<(S, ParameterSet<S>)> {
    let enc = &setup.encoder;
    check_pair(sample.pre, sample.post)?;
    encoder::check_image(enc, sample.pre)?;
    if (sample.target.height, sample.target.width) != (enc.input_size, enc.input_size) {
        return Err(Error::shape(
            "finetune",
            format!("target {}x{} vs input {}", sample.target.height, sample.target.width, enc.input_size),
        ));
    }
    let tape = Tape::new();
    let eb = if setup.freeze_encoder { state.encoder.bind_frozen(&tape) } else { state.encoder.bind(&tape) };
    let hb = state.head.bind(&tape);
    let maps = siamese_pyramid(enc, &eb, tape.constant(sample.pre.to_rows()), tape.constant(sample.post.to_rows()))?;
    let logits = head_forward(&setup.head, &hb, &maps, &stage_sides(enc), enc.input_size)?;
    let loss = dice_ce_var(logits, sample.target, setup.class_weights.as_deref())?;
    let g = tape.backward(loss);
    let mut grads = hb.gradients(&g);
    if !setup.freeze_encoder {
        grads.extend(eb.gradients(&g));
    }
    Ok((loss.item(), grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub step: u64,
    pub loss: f64,
    pub skipped: bool,
}

/// One optimizer step on the batch-mean Dice+CE loss.
pub fn finetune_step<S: Scalar>(
    state: &mut FinetuneState<S>,
    batch: &[Labeled<'_, S>],
    setup: &FinetuneSetup,
) -> Result<FinetuneLog> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_b = S::one() / S::of(batch.len() as f64);
    let mut loss = S::zero();
    let mut grads: Option<ParameterSet<S>> = None;
    for &sample in batch {
        let (l, g) = siamese_objective(state, setup, sample)?;
        loss += l * inv_b;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (name, a) in acc.iter_mut() {
                    a.add_assign(g.get(name).expect("same structure every sample"));
                }
            }
        }
    }
    let mut grads = grads.expect("nonempty batch");
    for (_, g) in grads.iter_mut() {
        g.scale_in_place(inv_b);
    }
    let mut params = state.params();
    state.optimizer.lr = setup.learning_rate;
    let skipped = match state.optimizer.step(&mut params, &grads) {
        Ok(()) => false,
        Err(Error::NonFinite(_)) => {
            log::warn!("finetune step {}: non-finite gradient, update skipped", state.step);
            true
        }
        Err(e) => return Err(e),
    };
    if !skipped {
        state.encoder = params.filter_prefix("encoder.");
        state.head = params.filter_prefix("head.");
    }
    let log = FinetuneLog { step: state.step, loss: loss.as_f64(), skipped };
    state.step += 1;
    Ok(log)
}
