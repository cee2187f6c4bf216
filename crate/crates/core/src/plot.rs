//! Minimal raster output for training curves, masks and heatmaps.

use std::path::Path;

use crate::downstream::DamageMask;
use crate::error::Result;
use crate::image::Image;
use crate::scalar::Scalar;

const WIDTH: usize = 400;
const HEIGHT: usize = 240;
const MARGIN: usize = 20;
const PALETTE: [[f32; 3]; 4] = [[0.85, 0.2, 0.1], [0.1, 0.35, 0.85], [0.1, 0.6, 0.2], [0.6, 0.2, 0.7]];

/// Line chart of up to four series sharing one y range. Non-finite points are skipped.
pub fn line_chart(series: &[&[f64]]) -> Image<f32> {
    let mut img = Image::filled(HEIGHT, WIDTH, 3, 1.0f32);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    for x in x0..=x1 {
        set(&mut img, y1, x, [0.0; 3]);
    }
    for y in y0..=y1 {
        set(&mut img, y, x0, [0.0; 3]);
    }
    let finite = series.iter().flat_map(|s| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return img;
    }
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let n = s.len().max(2) - 1;
        let to_px = |i: usize, v: f64| {
            let px = x0 as f64 + (x1 - x0) as f64 * i as f64 / n as f64;
            let py = y1 as f64 - (y1 - y0) as f64 * (v - lo) / span;
            (px, py)
        };
        let mut prev: Option<(f64, f64)> = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = to_px(i, v);
            let a = prev.unwrap_or(p);
            let steps = ((p.0 - a.0).abs().max((p.1 - a.1).abs()).ceil() as usize).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let (x, y) = (a.0 + (p.0 - a.0) * f, a.1 + (p.1 - a.1) * f);
                set(&mut img, y.round() as usize, x.round() as usize, color);
            }
            prev = Some(p);
        }
    }
    img
}

pub fn save_line_chart(path: &Path, series: &[&[f64]]) -> Result<()> {
    line_chart(series).save_png(path)
}

fn set(img: &mut Image<f32>, y: usize, x: usize, rgb: [f32; 3]) {
    if y < img.height() && x < img.width() {
        for (c, v) in rgb.into_iter().enumerate() {
            img.set(y, x, c, v);
        }
    }
}

/// Black → red → yellow → white ramp for values in `[0, 1]`.
pub fn heat_color(v: f64) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let r = v.min(1.0);
    let g = (v - 1.0).clamp(0.0, 1.0);
    let b = (v - 2.0).clamp(0.0, 1.0);
    [r as f32, g as f32, b as f32]
}

/// Single-channel heatmap rendered as RGB.
pub fn colorize_heatmap<S: Scalar>(heat: &Image<S>) -> Image<f32> {
    let mut out = Image::filled(heat.height(), heat.width(), 3, 0.0f32);
    for y in 0..heat.height() {
        for x in 0..heat.width() {
            set(&mut out, y, x, heat_color(heat.get(y, x, 0).as_f64()));
        }
    }
    out
}

pub fn damage_color(class: u8) -> [f32; 3] {
    match class {
        0 => [0.0, 0.0, 0.0],
        1 => [0.2, 0.8, 0.2],
        2 => [0.95, 0.9, 0.2],
        3 => [0.95, 0.55, 0.1],
        _ => [0.9, 0.1, 0.1],
    }
}

pub fn colorize_mask(mask: &DamageMask) -> Image<f32> {
    let mut out = Image::filled(mask.height(), mask.width(), 3, 0.0f32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            set(&mut out, y, x, damage_color(mask.get(y, x)));
        }
    }
    out
}

/// Equal-height RGB tiles placed left to right.
pub fn hstack(tiles: &[Image<f32>]) -> Image<f32> {
    let h = tiles.iter().map(Image::height).max().unwrap_or(0);
    let w: usize = tiles.iter().map(Image::width).sum();
    let mut out = Image::filled(h, w, 3, 0.0f32);
    let mut x0 = 0;
    for t in tiles {
        for y in 0..t.height() {
            for x in 0..t.width() {
                for c in 0..3 {
                    out.set(y, x0 + x, c, t.get(y, x, c.min(t.channels() - 1)));
                }
            }
        }
        x0 += t.width();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_fixed_size_and_draws_something() {
        let img = line_chart(&[&[3.0, 2.0, 1.5, f64::NAN, 1.0], &[0.1, 0.2]]);
        assert_eq!((img.height(), img.width(), img.channels()), (HEIGHT, WIDTH, 3));
        let colored = img.data().chunks(3).filter(|p| p[0] != p[1] || p[1] != p[2]).count();
        assert!(colored > 50);
    }

    #[test]
    fn empty_chart_is_axes_only() {
        let img = line_chart(&[&[f64::NAN]]);
        assert!(img.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat_color(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(heat_color(1.0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn hstack_widths_add() {
        let a = Image::filled(4, 3, 3, 0.5f32);
        let b = Image::filled(4, 5, 1, 1.0f32);
        let s = hstack(&[a, b]);
        assert_eq!((s.height(), s.width()), (4, 8));
        assert_eq!(s.get(2, 4, 2), 1.0);
    }
}
