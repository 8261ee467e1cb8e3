//! Rasterization of skeletons into images, masks and heatmaps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{proportions, Build, Skeleton, BONES, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background intensity in `[-1, 1]` image space (mid gray).
pub const BACKGROUND: f32 = 0.0;

/// Marker half-size: each joint is stamped as a plus of this radius.
pub const MARKER_RADIUS: usize = 1;

/// Saturated joint marker colors in `[0, 1]`. Every color has a channel
/// at 1, so each is at least 0.5 away (max-norm) from the muted body colors,
/// the background and each other.
pub const MARKER_PALETTE: [[f64; 3]; NUM_JOINTS] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [1.0, 0.0, 0.5],
    [0.5, 1.0, 0.0],
    [0.0, 1.0, 0.5],
    [0.5, 0.0, 1.0],
    [0.0, 0.5, 1.0],
    [1.0, 0.5, 0.5],
    [0.5, 1.0, 0.5],
    [0.5, 0.5, 1.0],
    [1.0, 1.0, 0.5],
    [1.0, 0.5, 1.0],
    [0.5, 1.0, 1.0],
];

const GROUPS: usize = 6;
const TORSO: usize = 0;
const HEAD: usize = 5;

/// Color group of each bone: torso, right arm, left arm, right leg,
/// left leg, head.
const BONE_GROUP: [usize; BONES.len()] = [0, 0, 1, 1, 2, 2, 0, 3, 3, 0, 4, 4, 5, 5, 5, 5, 5];

/// Appearance of one synthetic person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: u64,
    /// Muted RGB per body part in `[0, 1]`, channels within `[0.1, 0.4]`.
    pub colors: [[f64; 3]; GROUPS],
    pub build: Build,
}

impl Identity {
    pub fn sample<R: Rng>(id: u64, rng: &mut R) -> Self {
        let mut colors = [[0.0; 3]; GROUPS];
        for c in colors.iter_mut().flatten() {
            *c = rng.gen_range(0.1..=0.4);
        }
        let build = Build {
            scale: rng.gen_range(0.85..=1.0),
            limb_radius: rng.gen_range(1.0..=1.5),
        };
        Self { id, colors, build }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Draw `skeleton` in the colors of `identity` on an `h x w` gray canvas.
///
/// Limbs are capsules with anti-aliased edges (coverage
/// `clamp(r + 0.5 - d, 0, 1)` at pixel centers), the head is a disk at the
/// nose, and every joint is stamped with its marker color. Returns the
/// `[3, h, w]` image in `[-1, 1]` and the `[1, h, w]` mask of drawn pixels.
pub fn render_figure(skeleton: &Skeleton, identity: &Identity, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rgb = vec![[0.5f64; 3]; h * w];
    let mut mask = vec![0f32; h * w];
    let px = |p: [f64; 2]| [p[0] * w as f64, p[1] * h as f64];
    let radius = skeleton.limb_radius * h as f64;
    let head_radius = proportions::HEAD_RADIUS * h as f64 / proportions::REFERENCE_HEIGHT;

    let mut paint = |shape: &dyn Fn([f64; 2]) -> f64, r: f64, color: [f64; 3]| {
        for y in 0..h {
            for x in 0..w {
                let d = shape([x as f64 + 0.5, y as f64 + 0.5]);
                let cov = (r + 0.5 - d).clamp(0.0, 1.0);
                // slivers below this would round back to the background
                if cov > 1e-3 {
                    let i = y * w + x;
                    for (v, c) in rgb[i].iter_mut().zip(color) {
                        *v += cov * (c - *v);
                    }
                    mask[i] = 1.0;
                }
            }
        }
    };

    // torso first, then limbs over it, then the head
    let mut order: Vec<usize> = (0..BONES.len()).filter(|&b| BONE_GROUP[b] != HEAD).collect();
    order.sort_by_key(|&b| BONE_GROUP[b] != TORSO);
    for b in order {
        let (a, c) = BONES[b];
        let (pa, pc) = (px(skeleton.joints[a]), px(skeleton.joints[c]));
        paint(&|p| segment_distance(p, pa, pc), radius, identity.colors[BONE_GROUP[b]]);
    }
    let nose = px(skeleton.joints[super::joint::NOSE]);
    let neck = px(skeleton.joints[super::joint::NECK]);
    paint(&|p| segment_distance(p, neck, nose), radius, identity.colors[HEAD]);
    paint(&|p| (p[0] - nose[0]).hypot(p[1] - nose[1]), head_radius, identity.colors[HEAD]);

    let (pixels, _) = skeleton.pixels(h, w);
    let mut stamp = |r: usize, c: usize, color: [f64; 3]| {
        rgb[r * w + c] = color;
        mask[r * w + c] = 1.0;
    };
    for (k, &[r, c]) in pixels.iter().enumerate() {
        let m = MARKER_RADIUS as isize;
        for (dr, dc) in [(0, 0), (-m, 0), (m, 0), (0, -m), (0, m)] {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                stamp(rr as usize, cc as usize, MARKER_PALETTE[k]);
            }
        }
    }
    // centers last so overlapping markers never hide a joint
    for (k, &[r, c]) in pixels.iter().enumerate() {
        stamp(r, c, MARKER_PALETTE[k]);
    }

    let mut img = vec![0f32; 3 * h * w];
    for (i, p) in rgb.iter().enumerate() {
        for ch in 0..3 {
            img[ch * h * w + i] = (2.0 * p[ch] - 1.0) as f32;
        }
    }
    (
        Tensor::new(&[3, h, w], img).expect("sized above"),
        Tensor::new(&[1, h, w], mask).expect("sized above"),
    )
}

/// Binary-disk heatmaps: channel `k` is 1 at pixels within `radius` of
/// joint `k`'s pixel. The flag reports whether a joint was clamped into
/// the frame.
pub fn keypoints_to_heatmaps(skeleton: &Skeleton, h: usize, w: usize, radius: f64) -> Result<(Tensor<f32>, bool)> {
    if radius.is_nan() || radius < 1.0 {
        return Err(Error::Config(format!("heatmap radius {radius} is below one pixel")));
    }
    let (pixels, clamped) = skeleton.pixels(h, w);
    let mut out = Tensor::zeros(&[NUM_JOINTS, h, w]);
    let data = out.data_mut();
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    for (k, &[pr, pc]) in pixels.iter().enumerate() {
        for dr in -r..=r {
            for dc in -r..=r {
                let (y, x) = (pr as isize + dr, pc as isize + dc);
                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                    continue;
                }
                if ((dr * dr + dc * dc) as f64) <= r2 {
                    data[(k * h + y as usize) * w + x as usize] = 1.0;
                }
            }
        }
    }
    Ok((out, clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_pose, PoseConstraints};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn palette_is_separated() {
        for a in 0..NUM_JOINTS {
            for b in a + 1..NUM_JOINTS {
                let d = (0..3)
                    .map(|c| (MARKER_PALETTE[a][c] - MARKER_PALETTE[b][c]).abs())
                    .fold(0.0, f64::max);
                assert!(d >= 0.5);
            }
        }
    }

    #[test]
    fn radius_one_is_a_plus() {
        let mut s = Skeleton {
            joints: [[0.0; 2]; NUM_JOINTS],
            limb_radius: 0.02,
        };
        s.joints[0] = [0.5, 0.5];
        let (hm, clamped) = keypoints_to_heatmaps(&s, 32, 16, 1.0).unwrap();
        assert!(!clamped);
        let ch0 = &hm.data()[..32 * 16];
        let set: Vec<usize> = (0..ch0.len()).filter(|&i| ch0[i] == 1.0).collect();
        assert_eq!(set, vec![15 * 16 + 8, 16 * 16 + 7, 16 * 16 + 8, 16 * 16 + 9, 17 * 16 + 8]);
    }

    #[test]
    fn mask_is_exactly_the_drawn_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let id = Identity::sample(1, &mut rng);
        let s = sample_pose(&mut rng, &PoseConstraints::default(), &id.build).unwrap();
        let (img, mask) = render_figure(&s, &id, 64, 32);
        for i in 0..64 * 32 {
            let drawn = (0..3).any(|c| img.data()[c * 64 * 32 + i] != BACKGROUND);
            assert_eq!(drawn, mask.data()[i] == 1.0);
        }
    }
}
