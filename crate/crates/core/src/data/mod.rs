//! Synthetic stick-figure pose-transfer data.
//!
//! Every sample is a pair of poses of one identity: a source image and
//! heatmap `(I_a, P_a)` and a target `(I_b, P_b)` with its foreground mask.
//! Figures are planned in pixel space of the target frame and stored in
//! normalized `[0, 1]^2` coordinates, `x` to the right and `y` downwards.

mod dataset;
pub mod io;
mod render;

pub use dataset::{derive_seed, worker_threads, Batch, DataConfig, Dataset, PoseSample, SampleRecord, Split};
pub use render::{keypoints_to_heatmaps, render_figure, Identity, BACKGROUND, MARKER_PALETTE, MARKER_RADIUS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 18;

/// Joint order of the 18 heatmap channels.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist", "r_hip",
    "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
];

pub mod joint {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_EYE: usize = 14;
    pub const L_EYE: usize = 15;
    pub const R_EAR: usize = 16;
    pub const L_EAR: usize = 17;
}

/// Bones as joint pairs.
pub const BONES: [(usize, usize); 17] = {
    use joint::*;
    [
        (NECK, R_SHOULDER),
        (NECK, L_SHOULDER),
        (R_SHOULDER, R_ELBOW),
        (R_ELBOW, R_WRIST),
        (L_SHOULDER, L_ELBOW),
        (L_ELBOW, L_WRIST),
        (NECK, R_HIP),
        (R_HIP, R_KNEE),
        (R_KNEE, R_ANKLE),
        (NECK, L_HIP),
        (L_HIP, L_KNEE),
        (L_KNEE, L_ANKLE),
        (NECK, NOSE),
        (NOSE, R_EYE),
        (R_EYE, R_EAR),
        (NOSE, L_EYE),
        (L_EYE, L_EAR),
    ]
};

/// Body proportions in pixels of a 64-pixel-tall frame, before the
/// per-identity scale.
pub mod proportions {
    pub const REFERENCE_HEIGHT: f64 = 64.0;
    pub const TORSO: f64 = 14.0;
    pub const THIGH: f64 = 9.0;
    pub const SHIN: f64 = 9.0;
    pub const HEAD: f64 = 5.0;
    pub const UPPER_ARM: f64 = 6.0;
    pub const FOREARM: f64 = 5.0;
    pub const SHOULDER_HALF: f64 = 3.5;
    pub const HIP_HALF: f64 = 2.5;
    pub const HEAD_RADIUS: f64 = 2.5;
}

/// Per-identity body build.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Build {
    /// Multiplier on all bone lengths.
    pub scale: f64,
    /// Limb capsule radius in reference pixels.
    pub limb_radius: f64,
}

impl Default for Build {
    fn default() -> Self {
        Self {
            scale: 0.9,
            limb_radius: 1.25,
        }
    }
}

/// 18 joints in normalized image coordinates plus the limb thickness
/// (a fraction of the frame height) used when drawing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: [[f64; 2]; NUM_JOINTS],
    pub limb_radius: f64,
}

impl Skeleton {
    /// Pixel `(row, col)` of each joint in an `h x w` frame, and whether any
    /// joint had to be clamped into the frame.
    pub fn pixels(&self, h: usize, w: usize) -> ([[usize; 2]; NUM_JOINTS], bool) {
        let mut clamped = false;
        let mut out = [[0; 2]; NUM_JOINTS];
        for (o, j) in out.iter_mut().zip(&self.joints) {
            let mut cell = |v: f64, n: usize| {
                let p = (v * n as f64).floor();
                if p < 0.0 || p > (n - 1) as f64 || !p.is_finite() {
                    clamped = true;
                }
                p.clamp(0.0, (n - 1) as f64) as usize
            };
            *o = [cell(j[1], h), cell(j[0], w)];
        }
        (out, clamped)
    }

    pub fn bone_lengths(&self, h: usize, w: usize) -> [f64; BONES.len()] {
        let mut out = [0.0; BONES.len()];
        for (o, &(a, b)) in out.iter_mut().zip(&BONES) {
            let dx = (self.joints[a][0] - self.joints[b][0]) * w as f64;
            let dy = (self.joints[a][1] - self.joints[b][1]) * h as f64;
            *o = dx.hypot(dy);
        }
        out
    }
}

/// Sampling ranges for [`sample_pose`]. Angles are half-ranges in radians
/// around the T-pose; all zero yields the canonical T-pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseConstraints {
    pub height: usize,
    pub width: usize,
    pub lean: f64,
    pub shoulder: f64,
    pub elbow: f64,
    pub hip: f64,
    pub knee: f64,
    /// Root translation half-range in reference pixels.
    pub shift: f64,
    /// Minimum distance in pixels between any joint and the frame border.
    pub margin: f64,
    /// Minimum Chebyshev distance in pixels between two joints.
    pub min_separation: f64,
    pub max_attempts: usize,
}

impl Default for PoseConstraints {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            lean: 0.15,
            shoulder: 1.2,
            elbow: 1.2,
            hip: 0.45,
            knee: 0.9,
            shift: 3.0,
            margin: 1.0,
            min_separation: 1.0,
            max_attempts: 1000,
        }
    }
}

impl PoseConstraints {
    pub fn t_pose(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            lean: 0.0,
            shoulder: 0.0,
            elbow: 0.0,
            hip: 0.0,
            knee: 0.0,
            shift: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ranges = [self.lean, self.shoulder, self.elbow, self.hip, self.knee, self.shift];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("pose ranges must be finite and nonnegative".into()));
        }
        if self.height < 32 || self.width < 16 {
            return Err(Error::Config(format!(
                "frame {}x{} is smaller than 32x16",
                self.height, self.width
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

fn rotate(v: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn along(p: [f64; 2], d: [f64; 2], len: f64) -> [f64; 2] {
    [p[0] + d[0] * len, p[1] + d[1] * len]
}

fn symmetric<R: Rng>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

/// Joint positions in frame pixels for the given angle draws.
fn place_joints<R: Rng>(rng: &mut R, c: &PoseConstraints, build: &Build) -> [[f64; 2]; NUM_JOINTS] {
    use joint::*;
    use proportions::*;
    let u = c.height as f64 / REFERENCE_HEIGHT;
    let s = build.scale * u;
    // face offsets stay at least one pixel apart on small frames
    let f = u.max(1.0);

    let lean = symmetric(rng, c.lean);
    let up = [lean.sin(), -lean.cos()];
    let down = [-up[0], -up[1]];
    let right = [lean.cos(), lean.sin()];
    let left = [-right[0], -right[1]];

    let dx = symmetric(rng, c.shift) * u;
    let dy = symmetric(rng, c.shift) * u;
    let hip_mid = [
        c.width as f64 / 2.0 + dx,
        c.height as f64 / 2.0 + 1.75 * s + dy,
    ];

    let mut j = [[0.0; 2]; NUM_JOINTS];
    j[NECK] = along(hip_mid, up, TORSO * s);
    j[NOSE] = along(j[NECK], up, HEAD * s);
    // the figure faces the viewer: its right side is on the image left
    j[R_SHOULDER] = along(j[NECK], left, SHOULDER_HALF * s);
    j[L_SHOULDER] = along(j[NECK], right, SHOULDER_HALF * s);
    j[R_HIP] = along(hip_mid, left, HIP_HALF * s);
    j[L_HIP] = along(hip_mid, right, HIP_HALF * s);

    for (sho, elb, wri, out) in [(R_SHOULDER, R_ELBOW, R_WRIST, left), (L_SHOULDER, L_ELBOW, L_WRIST, right)] {
        let upper = rotate(out, symmetric(rng, c.shoulder));
        j[elb] = along(j[sho], upper, UPPER_ARM * s);
        let fore = rotate(upper, symmetric(rng, c.elbow));
        j[wri] = along(j[elb], fore, FOREARM * s);
    }
    for (hip, knee, ank) in [(R_HIP, R_KNEE, R_ANKLE), (L_HIP, L_KNEE, L_ANKLE)] {
        let thigh = rotate(down, symmetric(rng, c.hip));
        j[knee] = along(j[hip], thigh, THIGH * s);
        let shin = rotate(thigh, symmetric(rng, c.knee));
        j[ank] = along(j[knee], shin, SHIN * s);
    }

    let nose = j[NOSE];
    let face = |side: [f64; 2], a: f64, b: f64| along(along(nose, side, a * f), up, b * f);
    j[R_EYE] = face(left, 1.5, 1.5);
    j[L_EYE] = face(right, 1.5, 1.5);
    j[R_EAR] = face(left, 3.0, 0.0);
    j[L_EAR] = face(right, 3.0, 0.0);
    j
}

fn acceptable(j: &[[f64; 2]; NUM_JOINTS], c: &PoseConstraints) -> bool {
    let (w, h) = (c.width as f64, c.height as f64);
    let inside = j.iter().all(|p| {
        p[0] >= c.margin && p[0] <= w - c.margin && p[1] >= c.margin && p[1] <= h - c.margin
    });
    if !inside {
        return false;
    }
    for a in 0..NUM_JOINTS {
        for b in a + 1..NUM_JOINTS {
            let cheb = (j[a][0] - j[b][0]).abs().max((j[a][1] - j[b][1]).abs());
            let same_pixel = j[a][0].floor() == j[b][0].floor() && j[a][1].floor() == j[b][1].floor();
            if cheb < c.min_separation || same_pixel {
                return false;
            }
        }
    }
    true
}

/// Draw a pose by rejection sampling: joint angles uniform within the
/// configured ranges, kept only when every joint lies inside the frame
/// margin and no two joints share a pixel.
pub fn sample_pose<R: Rng>(rng: &mut R, constraints: &PoseConstraints, build: &Build) -> Result<Skeleton> {
    constraints.validate()?;
    let (w, h) = (constraints.width as f64, constraints.height as f64);
    for _ in 0..constraints.max_attempts {
        let j = place_joints(rng, constraints, build);
        if acceptable(&j, constraints) {
            return Ok(Skeleton {
                joints: j.map(|p| [p[0] / w, p[1] / h]),
                limb_radius: build.limb_radius / proportions::REFERENCE_HEIGHT,
            });
        }
    }
    Err(Error::Config(format!(
        "no pose satisfies the constraints within {} attempts",
        constraints.max_attempts
    )))
}
