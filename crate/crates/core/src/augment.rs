//! Stochastic view generation for the student and teacher branches.
//!
//! Each view is a random resized square crop, independent horizontal and
//! vertical flips, brightness/contrast jitter and an optional Gaussian blur,
//! clamped back into `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::spatial::bilinear_mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Fraction of the source area kept by the crop, sampled uniformly.
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub blur_prob: f64,
    /// Side of the emitted views; tied to the encoder input size.
    #[serde(skip)]
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_range: (0.5, 1.0),
            flip_prob: 0.5,
            jitter_strength: 0.4,
            blur_prob: 0.5,
            output_size: 64,
        }
    }
}

impl AugmentConfig {
    /// All transforms disabled: views equal the resized source.
    pub fn identity(output_size: usize) -> Self {
        AugmentConfig {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_strength: 0.0,
            blur_prob: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "augment: crop_scale_range ({lo}, {hi}) must be ordered within (0, 1]"
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment: {name} {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!(
                "augment: jitter_strength {} outside [0, 1)",
                self.jitter_strength
            )));
        }
        if self.output_size == 0 {
            return Err(Error::Config("augment: output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which transforms fired for one view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewTrace {
    /// `(top, left, side)` of the crop in source pixels.
    pub crop: (usize, usize, usize),
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: Option<f64>,
}

/// Two independently sampled views of `image`.
///
/// The views draw from ChaCha streams 1 and 2 of `seed`, so they never share
/// random numbers and are reproducible from `seed` alone.
pub fn make_views<S: Scalar>(
    image: &Image<S>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Image<S>, Image<S>)> {
    let ((a, _), (b, _)) = make_views_traced(image, cfg, seed)?;
    Ok((a, b))
}

pub fn make_views_traced<S: Scalar>(
    image: &Image<S>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<((Image<S>, ViewTrace), (Image<S>, ViewTrace))> {
    cfg.validate()?;
    if image.height() < cfg.output_size || image.width() < cfg.output_size {
        return Err(Error::Data(format!(
            "image {}x{} smaller than view size {}",
            image.height(),
            image.width(),
            cfg.output_size
        )));
    }
    let mut r1 = ChaCha8Rng::seed_from_u64(seed);
    r1.set_stream(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(seed);
    r2.set_stream(2);
    Ok((sample_view(image, cfg, &mut r1), sample_view(image, cfg, &mut r2)))
}

/// One augmented view. Every random draw happens regardless of which
/// transforms fire, so the stream position is independent of the outcome.
pub fn sample_view<S: Scalar, R: Rng>(
    image: &Image<S>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Image<S>, ViewTrace) {
    let (lo, hi) = cfg.crop_scale_range;
    let min_side = image.height().min(image.width());
    let scale = lo + (hi - lo) * rng.gen::<f64>();
    let side = ((scale.sqrt() * min_side as f64).round() as usize).clamp(1, min_side);
    let top = rng.gen_range(0..=image.height() - side);
    let left = rng.gen_range(0..=image.width() - side);
    let hflip = rng.gen::<f64>() < cfg.flip_prob;
    let vflip = rng.gen::<f64>() < cfg.flip_prob;
    let j = cfg.jitter_strength;
    let brightness = 1.0 + j * (2.0 * rng.gen::<f64>() - 1.0);
    let contrast = 1.0 + j * (2.0 * rng.gen::<f64>() - 1.0);
    let blur_draw = rng.gen::<f64>();
    let sigma = 0.1 + 0.9 * rng.gen::<f64>();
    let blur_sigma = (blur_draw < cfg.blur_prob).then_some(sigma);

    let mut view = crop_resize(image, top, left, side, cfg.output_size);
    if hflip || vflip {
        view = flip(&view, hflip, vflip);
    }
    if j > 0.0 {
        jitter(&mut view, brightness, contrast);
    }
    if let Some(s) = blur_sigma {
        view = gaussian_blur(&view, s);
    }
    for v in view.data_mut() {
        *v = v.max(S::zero()).min(S::one());
    }
    let trace = ViewTrace { crop: (top, left, side), hflip, vflip, brightness, contrast, blur_sigma };
    (view, trace)
}

fn crop_resize<S: Scalar>(image: &Image<S>, top: usize, left: usize, side: usize, out: usize) -> Image<S> {
    let c = image.channels();
    let mut crop = Vec::with_capacity(side * side * c);
    for y in top..top + side {
        for x in left..left + side {
            crop.extend_from_slice(image.pixel(y, x));
        }
    }
    let data = if side == out { crop } else { bilinear_mix::<S>(side, side, out, out).apply(&crop, c) };
    Image::new(out, out, c, data).expect("sizes computed above")
}

fn flip<S: Scalar>(image: &Image<S>, h: bool, v: bool) -> Image<S> {
    let (hh, ww, c) = (image.height(), image.width(), image.channels());
    let mut out = Image::filled(hh, ww, c, S::zero());
    for y in 0..hh {
        let sy = if v { hh - 1 - y } else { y };
        for x in 0..ww {
            let sx = if h { ww - 1 - x } else { x };
            for ch in 0..c {
                out.set(y, x, ch, image.get(sy, sx, ch));
            }
        }
    }
    out
}

fn jitter<S: Scalar>(image: &mut Image<S>, brightness: f64, contrast: f64) {
    let n = image.data().len();
    let mean = image.data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
    let (b, c, m) = (S::of(brightness), S::of(contrast), S::of(mean));
    for v in image.data_mut() {
        *v = ((*v - m) * c + m) * b;
    }
}

fn gaussian_blur<S: Scalar>(image: &Image<S>, sigma: f64) -> Image<S> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = weights.iter().sum();
    let kernel: Vec<S> = weights.iter().map(|w| S::of(w / z)).collect();
    let (h, w, c) = (image.height() as isize, image.width() as isize, image.channels());
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = Image::filled(h as usize, w as usize, c, S::zero());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = S::zero();
                for (k, &kw) in kernel.iter().enumerate() {
                    acc += kw * image.get(y as usize, clamp(x + k as isize - radius, w), ch);
                }
                tmp.set(y as usize, x as usize, ch, acc);
            }
        }
    }
    let mut out = Image::filled(h as usize, w as usize, c, S::zero());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = S::zero();
                for (k, &kw) in kernel.iter().enumerate() {
                    acc += kw * tmp.get(clamp(y + k as isize - radius, h), x as usize, ch);
                }
                out.set(y as usize, x as usize, ch, acc);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(size: usize, seed: u64) -> Image<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size * 3).map(|_| rng.gen::<f32>()).collect();
        Image::new(size, size, 3, data).unwrap()
    }

    #[test]
    fn same_seed_same_views() {
        let img = textured(80, 1);
        let cfg = AugmentConfig { output_size: 64, ..Default::default() };
        let a = make_views(&img, &cfg, 42).unwrap();
        let b = make_views(&img, &cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1, "two streams should differ");
    }

    #[test]
    fn identity_config_returns_resized_original() {
        let img = textured(64, 2);
        let (a, b) = make_views(&img, &AugmentConfig::identity(64), 7).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = textured(32, 3);
        let cfg = AugmentConfig { output_size: 64, ..Default::default() };
        assert!(matches!(make_views(&img, &cfg, 0), Err(Error::Data(_))));
    }

    #[test]
    fn views_stay_in_unit_range() {
        let img = textured(64, 4);
        let cfg = AugmentConfig { jitter_strength: 0.9, output_size: 64, ..Default::default() };
        for seed in 0..20 {
            let (a, b) = make_views(&img, &cfg, seed).unwrap();
            assert!(a.data().iter().chain(b.data()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn transform_frequencies_match_configuration() {
        // Monte-Carlo frequency oracle over 1000 views
        let img = textured(64, 5);
        let cfg = AugmentConfig { output_size: 64, flip_prob: 0.5, blur_prob: 0.3, ..Default::default() };
        let (mut h, mut v, mut bl) = (0, 0, 0);
        for seed in 0..500 {
            let ((_, t1), (_, t2)) = make_views_traced(&img, &cfg, seed).unwrap();
            for t in [t1, t2] {
                h += t.hflip as usize;
                v += t.vflip as usize;
                bl += t.blur_sigma.is_some() as usize;
            }
        }
        for (count, p) in [(h, 0.5), (v, 0.5), (bl, 0.3)] {
            let f = count as f64 / 1000.0;
            assert!((f - p).abs() <= 0.05, "frequency {f} vs {p}");
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::<f64>::filled(16, 16, 3, 0.4);
        let out = gaussian_blur(&img, 0.8);
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
