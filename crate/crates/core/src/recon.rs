//! Lightweight decoder that rebuilds the student view from the feature pyramid.
//!
//! Fusion layer 0 convolves the deepest map on its own; every following layer
//! upsamples the running map ×2, concatenates the next shallower level and
//! convolves again (3×3 conv + ReLU each). A final 1×1 convolution maps to RGB
//! and the result is resized to the input resolution (the two commute, so the
//! projection runs first on the smaller grid).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{he_normal, Bound, ParameterSet};
use crate::scalar::Scalar;
use crate::spatial::{conv3x3, resize};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub fusion_channels: usize,
    /// Must equal the encoder's stage count.
    pub num_fusion_layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { fusion_channels: 8, num_fusion_layers: 2 }
    }
}

impl DecoderConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.fusion_channels == 0 {
            return Err(Error::Config("decoder: fusion_channels must be positive".into()));
        }
        if self.num_fusion_layers != enc.num_stages() {
            return Err(Error::Config(format!(
                "decoder: num_fusion_layers {} != encoder stage count {}",
                self.num_fusion_layers,
                enc.num_stages()
            )));
        }
        Ok(())
    }
}

/// Name and shape of every decoder tensor.
pub fn param_shapes(dec: &DecoderConfig, stage_dims: &[usize]) -> Vec<(String, Vec<usize>)> {
    let f = dec.fusion_channels;
    let s = stage_dims.len();
    let mut out = Vec::new();
    for i in 0..s {
        let level = s - 1 - i;
        let c_in = if i == 0 { stage_dims[level] } else { f + stage_dims[level] };
        out.push((format!("decoder.fuse.{i}.weight"), vec![9 * c_in, f]));
        out.push((format!("decoder.fuse.{i}.bias"), vec![f]));
    }
    out.push(("decoder.out.weight".into(), vec![f, 3]));
    out.push(("decoder.out.bias".into(), vec![3]));
    out
}

pub fn init_params<S: Scalar, R: Rng>(
    dec: &DecoderConfig,
    enc: &EncoderConfig,
    rng: &mut R,
) -> Result<ParameterSet<S>> {
    dec.validate(enc)?;
    let mut ps = ParameterSet::new();
    for (name, shape) in param_shapes(dec, &enc.stage_dims) {
        let t = if name.ends_with(".weight") { he_normal(rng, &shape) } else { Tensor::zeros(&shape) };
        ps.insert(name, t);
    }
    Ok(ps)
}

/// Decoder pass over channels-last stage maps, returning `[size², 3]` rows.
pub(crate) fn forward<'t, S: Scalar>(
    p: &Bound<'t, S>,
    maps: &[Var<'t, S>],
    sides: &[usize],
    output_size: usize,
) -> Result<Var<'t, S>> {
    let s = maps.len();
    let deepest = s - 1;
    let mut x = conv3x3(
        maps[deepest],
        sides[deepest],
        sides[deepest],
        p.get("decoder.fuse.0.weight")?,
        p.get("decoder.fuse.0.bias")?,
    )
    .relu();
    for i in 1..s {
        let level = s - 1 - i;
        let side = sides[level];
        x = resize(x, (sides[level + 1], sides[level + 1]), (side, side));
        x = Var::concat(&[x, maps[level]], 1);
        x = conv3x3(
            x,
            side,
            side,
            p.get(&format!("decoder.fuse.{i}.weight"))?,
            p.get(&format!("decoder.fuse.{i}.bias"))?,
        )
        .relu();
    }
    let rgb = x.linear(p.get("decoder.out.weight")?, Some(p.get("decoder.out.bias")?));
    Ok(resize(rgb, (sides[0], sides[0]), (output_size, output_size)))
}

fn check_pyramid<S: Scalar>(pyramid: &FeaturePyramid<S>, dec: &DecoderConfig) -> Result<()> {
    if pyramid.depth() != dec.num_fusion_layers {
        return Err(Error::shape(
            "decode_reconstruct",
            format!("pyramid depth {} != num_fusion_layers {}", pyramid.depth(), dec.num_fusion_layers),
        ));
    }
    for (s, w) in pyramid.maps.windows(2).enumerate() {
        if w[0].height != 2 * w[1].height || w[0].width != 2 * w[1].width {
            return Err(Error::shape(
                "decode_reconstruct",
                format!(
                    "level {s} is {}x{} but level {} is {}x{}",
                    w[0].height,
                    w[0].width,
                    s + 1,
                    w[1].height,
                    w[1].width
                ),
            ));
        }
    }
    Ok(())
}

/// Reconstruct an `output_size × output_size × 3` image from a pyramid.
pub fn decode_reconstruct<S: Scalar>(
    pyramid: &FeaturePyramid<S>,
    dec: &DecoderConfig,
    params: &ParameterSet<S>,
    output_size: usize,
) -> Result<Image<S>> {
    check_pyramid(pyramid, dec)?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let maps: Vec<_> = pyramid.maps.iter().map(|m| tape.constant(m.to_rows())).collect();
    let sides: Vec<_> = pyramid.maps.iter().map(|m| m.height).collect();
    let out = forward(&bound, &maps, &sides, output_size)?;
    Image::from_rows(output_size, output_size, &out.value())
}

/// Reconstruction loss of `target` from a fixed pyramid, with its gradient
/// w.r.t. the decoder parameters.
pub fn reconstruction_objective<S: Scalar>(
    pyramid: &FeaturePyramid<S>,
    target: &Image<S>,
    dec: &DecoderConfig,
    params: &ParameterSet<S>,
) -> Result<(S, ParameterSet<S>)> {
    check_pyramid(pyramid, dec)?;
    if target.height() != target.width() || target.channels() != 3 {
        return Err(Error::shape(
            "reconstruction_objective",
            format!("target {}x{}x{} is not a square RGB image", target.height(), target.width(), target.channels()),
        ));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let maps: Vec<_> = pyramid.maps.iter().map(|m| tape.constant(m.to_rows())).collect();
    let sides: Vec<_> = pyramid.maps.iter().map(|m| m.height).collect();
    let out = forward(&bound, &maps, &sides, target.height())?;
    let loss = reconstruction_loss_var(out, tape.constant(target.to_rows()));
    let g = tape.backward(loss);
    Ok((loss.item(), bound.gradients(&g)))
}

/// Mean absolute error over all pixels and channels.
pub fn reconstruction_loss<S: Scalar>(x: &Image<S>, x_re: &Image<S>) -> Result<S> {
    if (x.height(), x.width(), x.channels()) != (x_re.height(), x_re.width(), x_re.channels()) {
        return Err(Error::shape(
            "reconstruction_loss",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                x.height(),
                x.width(),
                x.channels(),
                x_re.height(),
                x_re.width(),
                x_re.channels()
            ),
        ));
    }
    let n = S::of(x.data().len() as f64);
    Ok(x.data().iter().zip(x_re.data()).map(|(&a, &b)| (a - b).abs()).sum::<S>() / n)
}

/// Tape form of [`reconstruction_loss`]; `target` is a constant.
pub(crate) fn reconstruction_loss_var<'t, S: Scalar>(x_re: Var<'t, S>, target: Var<'t, S>) -> Var<'t, S> {
    x_re.sub(target).abs().mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{self, FeatureMap};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_output_shape() {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = encoder::init_params::<f32, _>(&enc, &mut rng).unwrap();
        let dp = init_params::<f32, _>(&dec, &enc, &mut rng).unwrap();
        let img = Image::filled(64, 64, 3, 0.5f32);
        let pyr = encoder::encode(&img, &enc, &ep).unwrap();
        let out = decode_reconstruct(&pyr, &dec, &dp, 64).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (3, 64, 64));
    }

    #[test]
    fn zero_pyramid_zero_bias_gives_zero_image() {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let dp = init_params::<f64, _>(&dec, &enc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pyr = FeaturePyramid {
            maps: vec![
                FeatureMap { channels: 32, height: 16, width: 16, data: vec![0.0; 32 * 256] },
                FeatureMap { channels: 64, height: 8, width: 8, data: vec![0.0; 64 * 64] },
            ],
        };
        let out = decode_reconstruct(&pyr, &dec, &dp, 64).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_is_lightweight() {
        // parameter-count audit at default configs
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let count = |shapes: Vec<(String, Vec<usize>)>| -> usize {
            shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
        };
        let n_dec = count(param_shapes(&dec, &enc.stage_dims));
        let n_enc = count(encoder::param_shapes(&enc));
        assert!(10 * n_dec < n_enc, "decoder {n_dec} vs encoder {n_enc}");
    }

    #[test]
    fn depth_and_resolution_errors() {
        let dec = DecoderConfig::default();
        let dp = ParameterSet::<f32>::new();
        let one = FeaturePyramid {
            maps: vec![FeatureMap { channels: 2, height: 4, width: 4, data: vec![0.0; 32] }],
        };
        assert!(decode_reconstruct(&one, &dec, &dp, 16).is_err());
        let bad = FeaturePyramid {
            maps: vec![
                FeatureMap { channels: 2, height: 4, width: 4, data: vec![0.0; 32] },
                FeatureMap { channels: 4, height: 3, width: 3, data: vec![0.0; 36] },
            ],
        };
        let err = decode_reconstruct(&bad, &dec, &dp, 16).unwrap_err().to_string();
        assert!(err.contains("level"), "{err}");
    }

    #[test]
    fn loss_values() {
        let a = Image::new(1, 1, 1, vec![0.2f64]).unwrap();
        let b = Image::new(1, 1, 1, vec![0.5f64]).unwrap();
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&a, &b).unwrap(), reconstruction_loss(&b, &a).unwrap());
        let c = Image::new(1, 2, 1, vec![0.2f64, 0.1]).unwrap();
        assert!(reconstruction_loss(&a, &c).is_err());
    }

    #[test]
    fn objective_matches_decode_and_loss() {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = encoder::init_params::<f64, _>(&enc, &mut rng).unwrap();
        let dp = init_params::<f64, _>(&dec, &enc, &mut rng).unwrap();
        let data = (0..64 * 64 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let img = Image::new(64, 64, 3, data).unwrap();
        let pyr = encoder::encode(&img, &enc, &ep).unwrap();
        let (loss, grads) = reconstruction_objective(&pyr, &img, &dec, &dp).unwrap();
        let direct = reconstruction_loss(&img, &decode_reconstruct(&pyr, &dec, &dp, 64).unwrap()).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        grads.check_compatible(&dp, "grads").unwrap();
    }

    fn triple() -> impl proptest::strategy::Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        use proptest::prelude::*;
        (1usize..30).prop_flat_map(|n| {
            let v = || prop::collection::vec(0.0f64..1.0, 3 * n);
            (v(), v(), v())
        })
    }

    proptest::proptest! {
        #[test]
        fn loss_is_a_metric((a, b, c) in triple()) {
            let n = a.len() / 3;
            let img = |v: &Vec<f64>| Image::new(1, n, 3, v.clone()).unwrap();
            let (x, y, z) = (img(&a), img(&b), img(&c));
            let d = |p: &Image<f64>, q: &Image<f64>| reconstruction_loss(p, q).unwrap();
            proptest::prop_assert!(d(&x, &y) >= 0.0);
            proptest::prop_assert_eq!(d(&x, &y), d(&y, &x));
            proptest::prop_assert_eq!(d(&x, &x), 0.0);
            proptest::prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
            if a != b {
                proptest::prop_assert!(d(&x, &y) > 0.0);
            }
        }
    }
}
