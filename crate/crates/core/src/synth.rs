//! Procedural grayscale test images.
//!
//! Images mix a smooth illumination field, overlapping flat-shaded shapes
//! with sharp edges and a few oriented stripe textures, which gives block
//! statistics closer to photographs than white noise does. Used for smoke
//! tests, demos and the acceptance suite when no photo corpus is at hand.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm::write_pgm;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    /// Signed distance proxy: negative inside, in pixels near the edge.
    fn edge_distance(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                (r - 1.0) * rx.min(ry)
            }
            Shape::Rect { y0, x0, y1, x1 } => (y0 - y).max(y - y1).max(x0 - x).max(x - x1),
        }
    }
}

/// Deterministic `height x width` image with values in `[0, 1]`.
pub fn synthetic_image<T: Scalar>(height: usize, width: usize, seed: u64) -> Tensor<T> {
    let mut rng = SeededRng::new(seed ^ 0x5EED_1A6E);
    let (hf, wf) = (height as f64, width as f64);

    // coarse random grid, bilinearly upsampled
    const GRID: usize = 5;
    let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.uniform_in(0.2, 0.8)).collect();
    let background = |y: f64, x: f64| {
        let gy = y / hf * (GRID - 1) as f64;
        let gx = x / wf * (GRID - 1) as f64;
        let (iy, ix) = ((gy as usize).min(GRID - 2), (gx as usize).min(GRID - 2));
        let (ty, tx) = (gy - iy as f64, gx - ix as f64);
        let at = |r: usize, c: usize| grid[r * GRID + c];
        (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
            + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1))
    };

    let shape_count = 6 + rng.below(9);
    let shapes: Vec<(Shape, f64, f64)> = (0..shape_count)
        .map(|_| {
            let scale = hf.min(wf);
            let shape = if rng.uniform() < 0.55 {
                let angle = rng.uniform_in(0.0, std::f64::consts::PI);
                Shape::Ellipse {
                    cy: rng.uniform_in(0.0, hf),
                    cx: rng.uniform_in(0.0, wf),
                    ry: rng.uniform_in(0.04, 0.25) * scale,
                    rx: rng.uniform_in(0.04, 0.25) * scale,
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            } else {
                let (y0, x0) = (rng.uniform_in(-0.1, 0.9) * hf, rng.uniform_in(-0.1, 0.9) * wf);
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.uniform_in(0.05, 0.4) * hf,
                    x1: x0 + rng.uniform_in(0.05, 0.4) * wf,
                }
            };
            let intensity = rng.uniform_in(0.0, 1.0);
            let opacity = rng.uniform_in(0.5, 1.0);
            (shape, intensity, opacity)
        })
        .collect();

    let stripes: Vec<(f64, f64, f64, f64)> = (0..1 + rng.below(3))
        .map(|_| {
            let angle = rng.uniform_in(0.0, std::f64::consts::PI);
            let period = rng.uniform_in(4.0, 24.0);
            let amplitude = rng.uniform_in(0.02, 0.08);
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            (angle, period, amplitude, phase)
        })
        .collect();

    let raw: Vec<f64> = (0..height * width)
        .map(|idx| {
            let (y, x) = ((idx / width) as f64 + 0.5, (idx % width) as f64 + 0.5);
            let mut v = background(y, x);
            for (shape, intensity, opacity) in &shapes {
                // one-pixel anti-aliased edge
                let coverage = (0.5 - shape.edge_distance(y, x)).clamp(0.0, 1.0) * opacity;
                v += coverage * (intensity - v);
            }
            for &(angle, period, amplitude, phase) in &stripes {
                let t = (x * angle.cos() + y * angle.sin()) / period;
                v += amplitude * (std::f64::consts::TAU * t + phase).sin();
            }
            v
        })
        .collect();

    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-9);
    Tensor::from_fn(&[height, width], |i| T::of(0.05 + 0.9 * (raw[i] - lo) / span))
}

/// Writes `count` synthetic PGM images named `synth_000.pgm`, ... into `dir`.
pub fn write_synthetic_corpus(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for k in 0..count {
        let img: Tensor<f64> = synthetic_image(height, width, seed.wrapping_add(k as u64));
        write_pgm(&dir.join(format!("synth_{k:03}.pgm")), &img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a: Tensor<f64> = synthetic_image(40, 56, 3);
        let b: Tensor<f64> = synthetic_image(40, 56, 3);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c: Tensor<f64> = synthetic_image(40, 56, 4);
        assert_ne!(a, c);
    }
}
