//! Image quality metrics: SSIM, masked SSIM and a keypoint re-detection
//! score for the synthetic figures.

use crate::data::{MARKER_PALETTE, MARKER_RADIUS, NUM_JOINTS};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Max-norm color distance (in `[0, 1]` units) for a pixel to count as a
/// marker candidate.
pub const MARKER_TOLERANCE: f64 = 0.15;
/// A re-detected joint is a hit when within this many pixels of the truth.
pub const HIT_DISTANCE: f64 = 2.0;

/// Map an image from `[-1, 1]` to `[0, 1]`.
pub fn to_unit<T: Scalar>(img: &Tensor<T>) -> Tensor<f64> {
    let data = img.data().iter().map(|v| (v.as_f64() + 1.0) / 2.0).collect();
    Tensor::new(img.shape(), data).expect("same length")
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Per-channel local SSIM maps over valid windows, `[c][oh * ow]`.
fn ssim_maps(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    if x.shape() != y.shape() {
        return shape_err("ssim", x.shape(), y.shape());
    }
    let &[c, h, w] = x.shape() else {
        return shape_err("ssim", x.shape(), &[0, 0, 0]);
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = h * w;
    let mut maps = Vec::with_capacity(c);
    for ch in 0..c {
        let xp = &x.data()[ch * n..(ch + 1) * n];
        let yp = &y.data()[ch * n..(ch + 1) * n];
        let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xp.iter().zip(yp).map(|(a, b)| a * b).collect();
        let (mx, my) = (filter(xp, h, w, &g), filter(yp, h, w, &g));
        let (exx, eyy, exy) = (filter(&xx, h, w, &g), filter(&yy, h, w, &g), filter(&xy, h, w, &g));
        let map = (0..mx.len())
            .map(|i| {
                let (a, b) = (mx[i], my[i]);
                let vx = exx[i] - a * a;
                let vy = eyy[i] - b * b;
                let cov = exy[i] - a * b;
                ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
            })
            .collect();
        maps.push(map);
    }
    Ok((maps, h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1))
}

/// Mean local SSIM of two `[c, h, w]` images with values in `[0, 1]`,
/// averaged over channels.
pub fn ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (maps, _, _) = ssim_maps(x, y)?;
    let per_channel: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64)
        .collect();
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

/// SSIM averaged over windows whose center pixel is foreground in the
/// `[1, h, w]` (or `[h, w]`) binary mask.
pub fn mask_ssim(x: &Tensor<f64>, y: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    let &[_, h, w] = x.shape() else {
        return shape_err("mask_ssim", x.shape(), &[0, 0, 0]);
    };
    if mask.numel() != h * w {
        return shape_err("mask_ssim", mask.shape(), &[1, h, w]);
    }
    let (maps, oh, ow) = ssim_maps(x, y)?;
    let half = SSIM_WINDOW / 2;
    let m = mask.data();
    let selected: Vec<usize> = (0..oh * ow)
        .filter(|&i| m[(i / ow + half) * w + i % ow + half] > 0.5)
        .collect();
    if selected.is_empty() {
        return Err(Error::UndefinedMetric("mask selects no SSIM window".into()));
    }
    let per_channel: Vec<f64> = maps
        .iter()
        .map(|map| selected.iter().map(|&i| map[i]).sum::<f64>() / selected.len() as f64)
        .collect();
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

/// Locate joint `k` in a `[3, h, w]` image with values in `[0, 1]`.
///
/// Candidates are pixels within [`MARKER_TOLERANCE`] of the joint's marker
/// color; each is scored by how many pixels of the plus-shaped marker
/// template centered on it are candidates too. The best score wins, ties
/// going to the first pixel in raster order.
pub fn detect_joint(img: &Tensor<f64>, k: usize) -> Option<[usize; 2]> {
    let &[3, h, w] = img.shape() else {
        return None;
    };
    let d = img.data();
    let target = MARKER_PALETTE[k];
    let hit: Vec<bool> = (0..h * w)
        .map(|i| (0..3).all(|c| (d[c * h * w + i] - target[c]).abs() <= MARKER_TOLERANCE))
        .collect();
    let m = MARKER_RADIUS as isize;
    let template = [(0, 0), (-m, 0), (m, 0), (0, -m), (0, m)];
    let mut best: Option<([usize; 2], usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if !hit[y * w + x] {
                continue;
            }
            let score = template
                .iter()
                .filter(|&&(dy, dx)| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && hit[yy as usize * w + xx as usize]
                })
                .count();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some(([y, x], score));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Fraction of the 18 joints re-detected within [`HIT_DISTANCE`] pixels of
/// their true `(row, col)` position in a `[3, h, w]` image in `[-1, 1]`.
/// A joint that cannot be found counts as a miss.
pub fn keypoint_error<T: Scalar>(img: &Tensor<T>, joints: &[[usize; 2]; NUM_JOINTS]) -> f64 {
    let unit = to_unit(img);
    let hits = joints
        .iter()
        .enumerate()
        .filter(|&(k, truth)| {
            detect_joint(&unit, k).is_some_and(|p| {
                let dy = p[0] as f64 - truth[0] as f64;
                let dx = p[1] as f64 - truth[1] as f64;
                dy.hypot(dx) <= HIT_DISTANCE
            })
        })
        .count();
    hits as f64 / NUM_JOINTS as f64
}
