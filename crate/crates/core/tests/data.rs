use bigraph_core::data::io::{read_record, read_rgb_png, write_sample_set, INDEX_FILE};
use bigraph_core::data::proportions::*;
use bigraph_core::data::{
    joint, keypoints_to_heatmaps, render_figure, sample_pose, Build, DataConfig, Dataset, Identity, PoseConstraints,
    Skeleton, Split, BONES, MARKER_PALETTE, NUM_JOINTS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Expected length of every bone, in pixels, for a frame `h` pixels tall.
fn bone_table(h: usize, build: &Build) -> [f64; 17] {
    let u = h as f64 / REFERENCE_HEIGHT;
    let s = build.scale * u;
    let f = u.max(1.0);
    let face = 1.5 * 2f64.sqrt() * f;
    let trunk = TORSO.hypot(HIP_HALF) * s;
    [
        SHOULDER_HALF * s,
        SHOULDER_HALF * s,
        UPPER_ARM * s,
        FOREARM * s,
        UPPER_ARM * s,
        FOREARM * s,
        trunk,
        THIGH * s,
        SHIN * s,
        trunk,
        THIGH * s,
        SHIN * s,
        HEAD * s,
        face,
        face,
        face,
        face,
    ]
}

fn pose(seed: u64, h: usize, w: usize, build: &Build) -> Skeleton {
    let c = PoseConstraints {
        height: h,
        width: w,
        ..PoseConstraints::default()
    };
    sample_pose(&mut ChaCha8Rng::seed_from_u64(seed), &c, build).unwrap()
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let d = Dataset::new(DataConfig::default()).unwrap();
    let again = Dataset::new(DataConfig::default()).unwrap();
    let other = Dataset::new(DataConfig {
        seed: 1,
        ..DataConfig::default()
    })
    .unwrap();
    for i in [0, 7, 199] {
        assert_eq!(d.sample(Split::Train, i).unwrap(), again.sample(Split::Train, i).unwrap());
        assert_ne!(d.sample(Split::Train, i).unwrap().i_b, other.sample(Split::Train, i).unwrap().i_b);
    }
}

#[test]
fn t_pose_matches_the_proportion_table() {
    let build = Build::default();
    let s = sample_pose(&mut ChaCha8Rng::seed_from_u64(0), &PoseConstraints::t_pose(64, 32), &build).unwrap();
    let px = |k: usize| [s.joints[k][0] * 32.0, s.joints[k][1] * 64.0];
    let sc = build.scale;
    let hip_mid = [16.0, 32.0 + 1.75 * sc];
    let neck = [16.0, hip_mid[1] - TORSO * sc];
    let close = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9;
    assert!(close(px(joint::NECK), neck));
    assert!(close(px(joint::R_WRIST), [16.0 - (SHOULDER_HALF + UPPER_ARM + FOREARM) * sc, neck[1]]));
    assert!(close(px(joint::L_WRIST), [16.0 + (SHOULDER_HALF + UPPER_ARM + FOREARM) * sc, neck[1]]));
    assert!(close(px(joint::L_ANKLE), [16.0 + HIP_HALF * sc, hip_mid[1] + (THIGH + SHIN) * sc]));
    assert!(close(px(joint::NOSE), [16.0, neck[1] - HEAD * sc]));
}

#[test]
fn ten_thousand_poses_stay_in_frame_and_on_distinct_pixels() {
    let c = PoseConstraints::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut id_rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..10_000 {
        let build = Identity::sample(0, &mut id_rng).build;
        let s = sample_pose(&mut rng, &c, &build).unwrap();
        let (px, clamped) = s.pixels(c.height, c.width);
        assert!(!clamped);
        for j in &s.joints {
            let (x, y) = (j[0] * c.width as f64, j[1] * c.height as f64);
            assert!(x >= c.margin && x <= c.width as f64 - c.margin);
            assert!(y >= c.margin && y <= c.height as f64 - c.margin);
        }
        for a in 0..NUM_JOINTS {
            for b in a + 1..NUM_JOINTS {
                assert_ne!(px[a], px[b]);
            }
        }
    }
}

#[test]
fn heatmap_disks_match_a_lattice_count() {
    let s = pose(5, 64, 32, &Build::default());
    let (px, _) = s.pixels(64, 32);
    for radius in [1.0, 2.0, 2.5, 3.0] {
        let (maps, _) = keypoints_to_heatmaps(&s, 64, 32, radius).unwrap();
        for (k, &[r, c]) in px.iter().enumerate() {
            let mut expect = 0;
            for y in 0..64i64 {
                for x in 0..32i64 {
                    let (dy, dx) = (y - r as i64, x - c as i64);
                    if ((dy * dy + dx * dx) as f64) <= radius * radius {
                        expect += 1;
                    }
                }
            }
            let plane = &maps.data()[k * 64 * 32..(k + 1) * 64 * 32];
            assert!(plane.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(plane.iter().filter(|&&v| v == 1.0).count(), expect, "joint {k} r {radius}");
            assert_eq!(plane[r * 32 + c], 1.0);
        }
    }
    assert!(keypoints_to_heatmaps(&s, 64, 32, 0.5).is_err());
}

#[test]
fn identity_changes_colors_but_not_the_silhouette() {
    let s = pose(6, 64, 32, &Build::default());
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (a, b) = (Identity::sample(1, &mut r), Identity::sample(2, &mut r));
    let (ia, ma) = render_figure(&s, &a, 64, 32);
    let (ib, mb) = render_figure(&s, &b, 64, 32);
    assert_eq!(ma, mb);
    assert_ne!(ia, ib);
    // background pixels are mid-gray and the joint centers carry the palette
    let plane = 64 * 32;
    for i in 0..plane {
        if ma.data()[i] == 0.0 {
            assert!((0..3).all(|c| ia.data()[c * plane + i] == 0.0));
        }
    }
    let (px, _) = s.pixels(64, 32);
    for (k, &[row, col]) in px.iter().enumerate() {
        for c in 0..3 {
            let v = ia.data()[c * plane + row * 32 + col] as f64;
            assert!((v - (2.0 * MARKER_PALETTE[k][c] - 1.0)).abs() < 1e-6);
        }
    }
}

#[test]
fn splits_use_disjoint_identities() {
    let d = Dataset::new(DataConfig {
        n_train: 5,
        n_test: 3,
        ..DataConfig::default()
    })
    .unwrap();
    let train: Vec<u64> = (0..20).map(|i| d.identity_of(Split::Train, i)).collect();
    let test: Vec<u64> = (0..20).map(|i| d.identity_of(Split::Test, i)).collect();
    assert!(train.iter().all(|id| *id < 5));
    assert!(test.iter().all(|id| (5..8).contains(id)));
    let s = d.sample(Split::Train, 6).unwrap();
    assert_eq!(s.identity, 1);
}

#[test]
fn invalid_data_configs_are_rejected() {
    for bad in [
        DataConfig { height: 30, ..DataConfig::default() },
        DataConfig { width: 18, ..DataConfig::default() },
        DataConfig { n_test: 0, ..DataConfig::default() },
        DataConfig { heatmap_radius: 0.0, ..DataConfig::default() },
    ] {
        assert!(Dataset::new(bad).is_err());
    }
}

#[test]
fn written_sample_set_re_renders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dataset::new(DataConfig::default()).unwrap();
    let index = write_sample_set(dir.path(), &d, Split::Test, 3).unwrap();
    assert_eq!(index.samples.len(), 3);
    assert!(dir.path().join(INDEX_FILE).exists());
    for e in &index.samples {
        let record = read_record(&dir.path().join(&e.record)).unwrap();
        let sample = record.render().unwrap();
        assert_eq!(sample, d.sample(Split::Test, e.index).unwrap());
        let png = read_rgb_png(&dir.path().join(&e.image_b)).unwrap();
        assert_eq!(png.shape(), sample.i_b.shape());
        // 8-bit quantization of [-1, 1]
        assert!(png.max_abs_diff(&sample.i_b) <= 1.0 / 255.0 + 1e-6);
        assert!(dir.path().join(&e.mask_b).exists() && dir.path().join(&e.image_a).exists());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bone_lengths_are_pose_invariant(seed in any::<u64>(), scale in 0.85f64..1.0, h in prop::sample::select(vec![64usize, 128])) {
        let build = Build { scale, limb_radius: 1.0 };
        let w = h / 2;
        let s = pose(seed, h, w, &build);
        let expect = bone_table(h, &build);
        for (k, (got, want)) in s.bone_lengths(h, w).iter().zip(expect).enumerate() {
            prop_assert!((got - want).abs() < 1e-9, "bone {:?}: {} vs {}", BONES[k], got, want);
        }
    }
}
