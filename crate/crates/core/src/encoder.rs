//! Hierarchical windowed-attention vision encoder.
//!
//! Layout of one stage: `depth` blocks of
//! `x += Proj(WindowAttention(LN(x)))`, `x += MLP(LN(x))`, operating on a
//! square token grid. Odd blocks use windows shifted by half a window with
//! attention masked across the wrap-around seams. Stages are joined by 2×2
//! patch merging, and every stage output passes through its own layer norm
//! before it is emitted as a pyramid level.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{trunc_normal, Bound, ParameterSet};
use crate::scalar::Scalar;
use crate::spatial::bilinear_mix;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e4;
const MLP_RATIO: usize = 2;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub window_size: usize,
    pub num_heads: Vec<usize>,
    pub shifted_windows: bool,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 4,
            stage_depths: vec![2, 2],
            stage_dims: vec![32, 64],
            window_size: 4,
            num_heads: vec![2, 4],
            shifted_windows: true,
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Token grid side of stage `s`.
    pub fn grid_side(&self, s: usize) -> usize {
        self.input_size / (self.patch_size << s)
    }

    /// Window side actually used at stage `s` (the whole grid when it is smaller).
    fn window_at(&self, s: usize) -> usize {
        self.window_size.min(self.grid_side(s))
    }

    fn shift_at(&self, s: usize, block: usize) -> usize {
        let ws = self.window_at(s);
        if self.shifted_windows && block % 2 == 1 && ws < self.grid_side(s) {
            ws / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_stages();
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if s < 2 {
            return bad(format!("need at least 2 stages, got {s}"));
        }
        if self.stage_dims.len() != s || self.num_heads.len() != s {
            return bad(format!(
                "stage_depths ({s}), stage_dims ({}) and num_heads ({}) must have equal length",
                self.stage_dims.len(),
                self.num_heads.len()
            ));
        }
        if self.patch_size == 0 || self.window_size == 0 {
            return bad("patch_size and window_size must be positive".into());
        }
        let unit = self.patch_size << (s - 1);
        if self.input_size == 0 || self.input_size % unit != 0 {
            return bad(format!(
                "input_size {} not divisible by patch_size*2^(S-1) = {unit}",
                self.input_size
            ));
        }
        for st in 0..s {
            let side = self.grid_side(st);
            if side % self.window_at(st) != 0 {
                return bad(format!(
                    "stage {st} grid side {side} not divisible by window_size {}",
                    self.window_size
                ));
            }
            if self.num_heads[st] == 0 || self.stage_dims[st] % self.num_heads[st] != 0 {
                return bad(format!(
                    "stage {st} dim {} not divisible by num_heads {}",
                    self.stage_dims[st], self.num_heads[st]
                ));
            }
            if self.stage_depths[st] == 0 {
                return bad(format!("stage {st} has zero depth"));
            }
        }
        if self.stage_dims.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("stage_dims {:?} must be strictly increasing", self.stage_dims));
        }
        Ok(())
    }
}

/// One pyramid level, channel-first `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> FeatureMap<S> {
    /// From a channels-last `[H*W, C]` matrix.
    pub fn from_rows(height: usize, width: usize, rows: &Tensor<S>) -> Self {
        let channels = rows.shape()[1];
        let mut data = vec![S::zero(); rows.len()];
        for p in 0..height * width {
            for c in 0..channels {
                data[c * height * width + p] = rows.data()[p * channels + c];
            }
        }
        FeatureMap { channels, height, width, data }
    }

    pub fn to_rows(&self) -> Tensor<S> {
        let hw = self.height * self.width;
        let mut data = vec![S::zero(); self.data.len()];
        for c in 0..self.channels {
            for p in 0..hw {
                data[p * self.channels + c] = self.data[c * hw + p];
            }
        }
        Tensor::from_parts(&[hw, self.channels], data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Stage outputs, shallowest first; each level halves the side of the previous.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<S> {
    pub maps: Vec<FeatureMap<S>>,
}

impl<S: Scalar> FeaturePyramid<S> {
    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.maps.iter().map(FeatureMap::shape).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (s, w) in self.maps.windows(2).enumerate() {
            if w[1].height * 2 != w[0].height || w[1].width * 2 != w[0].width {
                return Err(Error::shape(
                    "FeaturePyramid",
                    format!("level {} is {}x{}, level {} is {}x{}", s, w[0].height, w[0].width, s + 1, w[1].height, w[1].width),
                ));
            }
        }
        if self.maps.iter().any(|m| m.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("feature pyramid"));
        }
        Ok(())
    }
}

/// Attention weights of one block, `[windows, heads, T, T]` with `T = window²`.
#[derive(Clone, Debug)]
pub struct AttentionMatrix<S> {
    pub weights: Tensor<S>,
    /// Token grid `(rows, cols)`.
    pub grid_shape: (usize, usize),
    pub window_size: usize,
    pub shift: usize,
    pub num_heads: usize,
}

impl<S: Scalar> AttentionMatrix<S> {
    /// Grid row index (`y*cols + x`) of token `t` in window `w`.
    pub fn token_position(&self, w: usize, t: usize) -> usize {
        window_token_row(self.grid_shape.0, self.window_size, self.shift, w, t)
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> S {
        let t = self.window_size * self.window_size;
        self.weights
            .data()
            .chunks(t)
            .map(|row| (row.iter().copied().sum::<S>() - S::one()).abs())
            .fold(S::zero(), S::max)
    }
}

pub(crate) struct AttentionRecord<'t, S: Scalar> {
    weights: Var<'t, S>,
    grid: usize,
    window: usize,
    shift: usize,
    heads: usize,
}

impl<S: Scalar> AttentionRecord<'_, S> {
    fn to_matrix(&self) -> AttentionMatrix<S> {
        let t = self.window * self.window;
        let n_win = (self.grid / self.window).pow(2);
        let w = (*self.weights.value()).clone().reshaped(&[n_win, self.heads, t, t]);
        AttentionMatrix {
            weights: w,
            grid_shape: (self.grid, self.grid),
            window_size: self.window,
            shift: self.shift,
            num_heads: self.heads,
        }
    }
}

/// Output of a forward pass on a tape.
pub(crate) struct EncoderTrace<'t, S: Scalar> {
    /// Channels-last stage maps `[side², C_s]`.
    pub maps: Vec<Var<'t, S>>,
    pub attention: Vec<AttentionRecord<'t, S>>,
}

fn window_token_row(grid: usize, ws: usize, shift: usize, w: usize, t: usize) -> usize {
    let per_row = grid / ws;
    let (wy, wx) = (w / per_row, w % per_row);
    let (ty, tx) = (t / ws, t % ws);
    let sy = wy * ws + ty;
    let sx = wx * ws + tx;
    ((sy + shift) % grid) * grid + (sx + shift) % grid
}

/// Rows of the (cyclically shifted) grid in window-major order, and the inverse.
fn window_partition(grid: usize, ws: usize, shift: usize) -> (Vec<usize>, Vec<usize>) {
    let n_win = (grid / ws).pow(2);
    let t = ws * ws;
    let mut fwd = Vec::with_capacity(grid * grid);
    for w in 0..n_win {
        for k in 0..t {
            fwd.push(window_token_row(grid, ws, shift, w, k));
        }
    }
    let mut inv = vec![0; fwd.len()];
    for (i, &r) in fwd.iter().enumerate() {
        inv[r] = i;
    }
    (fwd, inv)
}

/// Additive mask `[n_win*heads, T, T]` blocking attention across shift seams.
fn shift_mask<S: Scalar>(grid: usize, ws: usize, shift: usize, heads: usize) -> Tensor<S> {
    let region = |v: usize| {
        if v < grid - ws {
            0
        } else if v < grid - shift {
            1
        } else {
            2
        }
    };
    let per_row = grid / ws;
    let n_win = per_row * per_row;
    let t = ws * ws;
    let mut data = Vec::with_capacity(n_win * heads * t * t);
    for w in 0..n_win {
        let (wy, wx) = (w / per_row, w % per_row);
        let ids: Vec<usize> = (0..t)
            .map(|k| region(wy * ws + k / ws) * 3 + region(wx * ws + k % ws))
            .collect();
        let mut block = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                block.push(if ids[i] == ids[j] { S::zero() } else { S::of(MASK_NEG) });
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&block);
        }
    }
    Tensor::from_parts(&[n_win * heads, t, t], data)
}

/// Element indices splitting `[n_win*T, 3C]` qkv rows into `[n_win*heads, T, hd]`.
fn head_split_index(n_win: usize, t: usize, c: usize, heads: usize, which: usize) -> Vec<usize> {
    let hd = c / heads;
    let mut idx = Vec::with_capacity(n_win * t * c);
    for w in 0..n_win {
        for h in 0..heads {
            for k in 0..t {
                for d in 0..hd {
                    idx.push((w * t + k) * 3 * c + which * c + h * hd + d);
                }
            }
        }
    }
    idx
}

/// Inverse of the head split for a `[n_win*heads, T, hd]` tensor, giving `[n_win*T, C]`.
fn head_merge_index(n_win: usize, t: usize, c: usize, heads: usize) -> Vec<usize> {
    let hd = c / heads;
    let mut idx = Vec::with_capacity(n_win * t * c);
    for w in 0..n_win {
        for k in 0..t {
            for h in 0..heads {
                for d in 0..hd {
                    idx.push(((w * heads + h) * t + k) * hd + d);
                }
            }
        }
    }
    idx
}

fn patch_embed_index(size: usize, patch: usize, channels: usize) -> Vec<usize> {
    let g = size / patch;
    let mut idx = Vec::with_capacity(size * size * channels);
    for py in 0..g {
        for px in 0..g {
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..channels {
                        idx.push(((py * patch + dy) * size + px * patch + dx) * channels + c);
                    }
                }
            }
        }
    }
    idx
}

/// Rows gathered for 2×2 merging: per output cell (0,0), (1,0), (0,1), (1,1).
fn patch_merge_rows(grid: usize) -> Vec<usize> {
    let half = grid / 2;
    let mut rows = Vec::with_capacity(grid * grid);
    for i in 0..half {
        for j in 0..half {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                rows.push((2 * i + dy) * grid + 2 * j + dx);
            }
        }
    }
    rows
}

fn layer_norm<'t, S: Scalar>(x: Var<'t, S>, p: &Bound<'t, S>, name: &str) -> Result<Var<'t, S>> {
    Ok(x.layer_norm(p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?, LN_EPS))
}

fn linear<'t, S: Scalar>(x: Var<'t, S>, p: &Bound<'t, S>, name: &str) -> Result<Var<'t, S>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(x.linear(w, Some(b)))
}

#[allow(clippy::too_many_arguments)]
fn block<'t, S: Scalar>(
    x: Var<'t, S>,
    p: &Bound<'t, S>,
    name: &str,
    grid: usize,
    ws: usize,
    shift: usize,
    heads: usize,
    records: &mut Vec<AttentionRecord<'t, S>>,
) -> Result<Var<'t, S>> {
    let c = x.shape()[1];
    let n_win = (grid / ws).pow(2);
    let t = ws * ws;
    let hd = c / heads;

    let y = layer_norm(x, p, &format!("{name}.norm1"))?;
    let (fwd, inv) = window_partition(grid, ws, shift);
    let windows = y.gather_rows(Rc::new(fwd));
    let qkv = linear(windows, p, &format!("{name}.attn.qkv"))?;
    let split = |which| qkv.gather(Rc::new(head_split_index(n_win, t, c, heads, which)), &[n_win * heads, t, hd]);
    let (q, k, v) = (split(0), split(1), split(2));
    let scores = q.bmm(k, true).scale(S::of((hd as f64).powf(-0.5)));
    let mask = (shift > 0).then(|| Rc::new(shift_mask::<S>(grid, ws, shift, heads)));
    let attn = scores.softmax_last(mask);
    records.push(AttentionRecord { weights: attn, grid, window: ws, shift, heads });
    let ctx = attn
        .bmm(v, false)
        .gather(Rc::new(head_merge_index(n_win, t, c, heads)), &[n_win * t, c]);
    let out = linear(ctx, p, &format!("{name}.attn.proj"))?.gather_rows(Rc::new(inv));
    let x = x.add(out);

    let y = layer_norm(x, p, &format!("{name}.norm2"))?;
    let y = linear(y, p, &format!("{name}.mlp.fc1"))?.gelu();
    let y = linear(y, p, &format!("{name}.mlp.fc2"))?;
    Ok(x.add(y))
}

/// Forward pass over an image already on the tape as `[H*W, 3]` rows.
pub(crate) fn forward<'t, S: Scalar>(
    cfg: &EncoderConfig,
    p: &Bound<'t, S>,
    image: Var<'t, S>,
) -> Result<EncoderTrace<'t, S>> {
    let size = cfg.input_size;
    let patch = cfg.patch_size;
    let g0 = cfg.grid_side(0);
    let mut x = image
        .gather(Rc::new(patch_embed_index(size, patch, 3)), &[g0 * g0, patch * patch * 3]);
    x = linear(x, p, "encoder.patch_embed")?;
    x = layer_norm(x, p, "encoder.patch_embed.norm")?;

    let mut maps = Vec::with_capacity(cfg.num_stages());
    let mut attention = Vec::new();
    for s in 0..cfg.num_stages() {
        let grid = cfg.grid_side(s);
        if s > 0 {
            let prev = cfg.grid_side(s - 1);
            let c = x.shape()[1];
            x = x.gather_rows(Rc::new(patch_merge_rows(prev))).reshape(&[grid * grid, 4 * c]);
            x = layer_norm(x, p, &format!("encoder.stages.{s}.merge.norm"))?;
            x = x.linear(p.get(&format!("encoder.stages.{s}.merge.reduction.weight"))?, None);
        }
        for b in 0..cfg.stage_depths[s] {
            x = block(
                x,
                p,
                &format!("encoder.stages.{s}.blocks.{b}"),
                grid,
                cfg.window_at(s),
                cfg.shift_at(s, b),
                cfg.num_heads[s],
                &mut attention,
            )?;
        }
        maps.push(layer_norm(x, p, &format!("encoder.stages.{s}.out_norm"))?);
    }
    Ok(EncoderTrace { maps, attention })
}

/// Name and shape of every encoder tensor, in a fixed order.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>)>, name: String, i: usize, o: usize, bias: bool| {
        out.push((format!("{name}.weight"), vec![i, o]));
        if bias {
            out.push((format!("{name}.bias"), vec![o]));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, name: String, w: usize| {
        out.push((format!("{name}.gamma"), vec![w]));
        out.push((format!("{name}.beta"), vec![w]));
    };
    let d0 = cfg.stage_dims[0];
    linear(&mut out, "encoder.patch_embed".into(), cfg.patch_size * cfg.patch_size * 3, d0, true);
    norm(&mut out, "encoder.patch_embed.norm".into(), d0);
    for s in 0..cfg.num_stages() {
        let d = cfg.stage_dims[s];
        if s > 0 {
            let prev = cfg.stage_dims[s - 1];
            norm(&mut out, format!("encoder.stages.{s}.merge.norm"), 4 * prev);
            linear(&mut out, format!("encoder.stages.{s}.merge.reduction"), 4 * prev, d, false);
        }
        for b in 0..cfg.stage_depths[s] {
            let n = format!("encoder.stages.{s}.blocks.{b}");
            norm(&mut out, format!("{n}.norm1"), d);
            linear(&mut out, format!("{n}.attn.qkv"), d, 3 * d, true);
            linear(&mut out, format!("{n}.attn.proj"), d, d, true);
            norm(&mut out, format!("{n}.norm2"), d);
            linear(&mut out, format!("{n}.mlp.fc1"), d, MLP_RATIO * d, true);
            linear(&mut out, format!("{n}.mlp.fc2"), MLP_RATIO * d, d, true);
        }
        norm(&mut out, format!("encoder.stages.{s}.out_norm"), d);
    }
    out
}

/// Fresh encoder parameters: truncated normal (σ = 0.02) projections, zero biases,
/// unit layer-norm gains.
pub fn init_params<S: Scalar, R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Result<ParameterSet<S>> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    for (name, shape) in param_shapes(cfg) {
        let t = if name.ends_with(".weight") {
            trunc_normal(rng, &shape, INIT_STD)
        } else if name.ends_with(".gamma") {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        ps.insert(name, t);
    }
    Ok(ps)
}

/// Check that the `encoder.*` tensors of `params` are exactly those `cfg` expects.
pub fn check_params<S: Scalar>(cfg: &EncoderConfig, params: &ParameterSet<S>) -> Result<()> {
    let mut expected = ParameterSet::new();
    for (name, shape) in param_shapes(cfg) {
        expected.insert(name, Tensor::<S>::zeros(&shape));
    }
    expected.check_compatible(&params.filter_prefix("encoder."), "encoder parameters")
}

pub(crate) fn check_image<S: Scalar>(cfg: &EncoderConfig, image: &Image<S>) -> Result<()> {
    if image.height() != cfg.input_size {
        return Err(Error::shape(
            "encode",
            format!("image height {} != input_size {}", image.height(), cfg.input_size),
        ));
    }
    if image.width() != cfg.input_size {
        return Err(Error::shape(
            "encode",
            format!("image width {} != input_size {}", image.width(), cfg.input_size),
        ));
    }
    if image.channels() != 3 {
        return Err(Error::shape("encode", format!("image channels {} != 3", image.channels())));
    }
    if !image.all_finite() {
        return Err(Error::NonFinite("encoder input image"));
    }
    Ok(())
}

fn run<S: Scalar, T>(
    image: &Image<S>,
    cfg: &EncoderConfig,
    params: &ParameterSet<S>,
    f: impl for<'t> FnOnce(EncoderTrace<'t, S>) -> T,
) -> Result<T> {
    cfg.validate()?;
    check_image(cfg, image)?;
    check_params(cfg, params)?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let x = tape.constant(image.to_rows());
    let trace = forward(cfg, &bound, x)?;
    Ok(f(trace))
}

/// Stage feature maps for one image.
pub fn encode<S: Scalar>(
    image: &Image<S>,
    cfg: &EncoderConfig,
    params: &ParameterSet<S>,
) -> Result<FeaturePyramid<S>> {
    let pyramid = run(image, cfg, params, |trace| {
        let maps = trace
            .maps
            .iter()
            .enumerate()
            .map(|(s, m)| {
                let side = cfg.grid_side(s);
                FeatureMap::from_rows(side, side, &m.value())
            })
            .collect();
        FeaturePyramid { maps }
    })?;
    pyramid.validate()?;
    Ok(pyramid)
}

/// Attention weights of every block, in execution order.
pub fn attention_matrices<S: Scalar>(
    image: &Image<S>,
    cfg: &EncoderConfig,
    params: &ParameterSet<S>,
) -> Result<Vec<AttentionMatrix<S>>> {
    run(image, cfg, params, |trace| trace.attention.iter().map(AttentionRecord::to_matrix).collect())
}

/// Mean attention received by each token of the final block, averaged over
/// heads and over all query rows of its window. Returned on the token grid
/// (`[side, side]`, row-major), before resizing or normalization.
pub fn attention_token_map<S: Scalar>(
    image: &Image<S>,
    cfg: &EncoderConfig,
    params: &ParameterSet<S>,
) -> Result<(usize, Vec<S>)> {
    let mats = attention_matrices(image, cfg, params)?;
    let last = mats.last().expect("validated encoder has blocks");
    let side = last.grid_shape.0;
    let t = last.window_size * last.window_size;
    let n_win = (side / last.window_size).pow(2);
    let norm = S::one() / S::of((last.num_heads * t) as f64);
    let mut grid = vec![S::zero(); side * side];
    let w = last.weights.data();
    for win in 0..n_win {
        for h in 0..last.num_heads {
            let base = (win * last.num_heads + h) * t * t;
            for i in 0..t {
                for j in 0..t {
                    grid[last.token_position(win, j)] += w[base + i * t + j] * norm;
                }
            }
        }
    }
    Ok((side, grid))
}

/// Single-channel heatmap at input resolution, min-max normalized to `[0, 1]`.
///
/// A spatially constant attention map normalizes to all zeros.
pub fn attention_rollup<S: Scalar>(
    image: &Image<S>,
    cfg: &EncoderConfig,
    params: &ParameterSet<S>,
) -> Result<Image<S>> {
    let (side, grid) = attention_token_map(image, cfg, params)?;
    let size = cfg.input_size;
    let up = bilinear_mix::<S>(side, side, size, size).apply(&grid, 1);
    let lo = up.iter().copied().fold(S::infinity(), S::min);
    let hi = up.iter().copied().fold(S::neg_infinity(), S::max);
    let range = hi - lo;
    let data = if range > S::epsilon() * hi.abs().max(S::one()) * S::of(16.0) {
        up.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![S::zero(); up.len()]
    };
    Image::new(size, size, 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Image<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.gen::<f32>()).collect();
        Image::new(size, size, 3, data).unwrap()
    }

    #[test]
    fn default_pyramid_shapes() {
        let cfg = EncoderConfig::default();
        let params = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pyr = encode(&random_image(64, 1), &cfg, &params).unwrap();
        assert_eq!(pyr.shapes(), vec![(32, 16, 16), (64, 8, 8)]);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::default();
        let params = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = random_image(64, 9);
        let a = encode(&img, &cfg, &params).unwrap();
        let b = encode(&img, &cfg, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_input_gives_spatially_constant_maps() {
        let cfg = EncoderConfig::default();
        let mut params = init_params::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (k, v) in params.iter_mut() {
            if k.ends_with("attn.proj.weight") {
                *v = Tensor::zeros(v.shape());
            }
        }
        let img = Image::filled(64, 64, 3, 0.0);
        let pyr = encode(&img, &cfg, &params).unwrap();
        for m in &pyr.maps {
            for c in 0..m.channels {
                let v0 = m.at(c, 0, 0);
                for y in 0..m.height {
                    for x in 0..m.width {
                        assert!((m.at(c, y, x) - v0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let cfg = EncoderConfig::default();
        let params = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Image::new(64, 32, 3, vec![0.0; 64 * 32 * 3]).unwrap();
        let err = encode(&img, &cfg, &params).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
        let mut bad = random_image(64, 0);
        bad.data_mut()[5] = f32::NAN;
        assert!(matches!(encode(&bad, &cfg, &params), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.stage_dims = vec![64, 32];
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.input_size = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.stage_depths = vec![2];
        cfg.stage_dims = vec![32];
        cfg.num_heads = vec![2];
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.window_size = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = EncoderConfig::default();
        let params = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mats = attention_matrices(&random_image(64, 2), &cfg, &params).unwrap();
        assert_eq!(mats.len(), 4);
        for m in &mats {
            // direct summation over every row
            let t = m.window_size * m.window_size;
            for row in m.weights.data().chunks(t) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        assert_eq!(mats[1].shift, 2);
        assert_eq!(mats[0].shift, 0);
    }

    #[test]
    fn rollup_normalized_and_constant_for_constant_input() {
        let cfg = EncoderConfig::default();
        let params = init_params::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let heat = attention_rollup(&random_image(64, 3), &cfg, &params).unwrap();
        assert_eq!((heat.channels(), heat.height(), heat.width()), (1, 64, 64));
        let lo = heat.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = heat.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));

        let (_, grid) = attention_token_map(&Image::filled(64, 64, 3, 0.3), &cfg, &params).unwrap();
        let g0 = grid[0];
        assert!(grid.iter().all(|&v| (v - g0).abs() < 1e-6), "{grid:?}");
    }

    #[test]
    fn shifted_partition_is_a_permutation() {
        let (fwd, inv) = window_partition(8, 4, 2);
        let mut sorted = fwd.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        for (i, &r) in fwd.iter().enumerate() {
            assert_eq!(inv[r], i);
        }
    }
}
