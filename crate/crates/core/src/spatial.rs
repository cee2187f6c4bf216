//! Spatial building blocks over channels-last feature maps.
//!
//! A feature map of height `h`, width `w` and `c` channels lives on the tape
//! as a `[h*w, c]` matrix, row `y*w + x`.

use std::rc::Rc;

use crate::autodiff::{RowMix, Var, NONE};
use crate::scalar::Scalar;

/// Row indices for 3×3 "same" im2col: `9` source rows per output pixel.
pub fn im2col3x3_rows(h: usize, w: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(h * w * 9);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        rows.push(NONE);
                    } else {
                        rows.push(sy as usize * w + sx as usize);
                    }
                }
            }
        }
    }
    rows
}

/// 3×3 convolution with zero padding. `weight` is `[9*c_in, c_out]`, tap-major.
pub fn conv3x3<'t, S: Scalar>(
    x: Var<'t, S>,
    h: usize,
    w: usize,
    weight: Var<'t, S>,
    bias: Var<'t, S>,
) -> Var<'t, S> {
    let c = x.shape()[1];
    let cols = x.gather_rows(Rc::new(im2col3x3_rows(h, w))).reshape(&[h * w, 9 * c]);
    cols.linear(weight, Some(bias))
}

/// Bilinear resampling weights, half-pixel centers, edge clamped.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let f = src - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect()
}

/// Row mix for bilinear resizing of an `in_h×in_w` map to `out_h×out_w`.
pub fn bilinear_mix<S: Scalar>(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> RowMix<S> {
    let wy = axis_weights(in_h, out_h);
    let wx = axis_weights(in_w, out_w);
    let mut rows = Vec::with_capacity(out_h * out_w);
    for ay in &wy {
        for ax in &wx {
            let mut row: Vec<(usize, S)> = Vec::with_capacity(4);
            for &(iy, fy) in ay {
                for &(ix, fx) in ax {
                    let wgt = fy * fx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let src = iy * in_w + ix;
                    match row.iter_mut().find(|(s, _)| *s == src) {
                        Some(e) => e.1 += S::of(wgt),
                        None => row.push((src, S::of(wgt))),
                    }
                }
            }
            rows.push(row);
        }
    }
    RowMix::from_rows(in_h * in_w, rows)
}

/// Row mix for adaptive average pooling to an `out_h×out_w` grid.
pub fn adaptive_avg_pool_mix<S: Scalar>(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> RowMix<S> {
    let bounds = |i: usize, n_in: usize, n_out: usize| {
        let start = i * n_in / n_out;
        let end = ((i + 1) * n_in).div_ceil(n_out);
        (start, end)
    };
    let mut rows = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1) = bounds(oy, in_h, out_h);
        for ox in 0..out_w {
            let (x0, x1) = bounds(ox, in_w, out_w);
            let wgt = S::one() / S::of(((y1 - y0) * (x1 - x0)) as f64);
            let row = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y * in_w + x, wgt))).collect();
            rows.push(row);
        }
    }
    RowMix::from_rows(in_h * in_w, rows)
}

/// Bilinear resize of a channels-last map on the tape.
pub fn resize<'t, S: Scalar>(
    x: Var<'t, S>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Var<'t, S> {
    if in_hw == out_hw {
        return x;
    }
    x.mix_rows(Rc::new(bilinear_mix(in_hw.0, in_hw.1, out_hw.0, out_hw.1)))
}
