mod common;

use bigraph_core::gradcheck::check_store;
use bigraph_core::model::{discriminate, Ablation, Discriminators, Generator, GeneratorConfig, GeneratorState};
use bigraph_core::{ParamStore, Tape, Tensor};
use common::*;

fn config(stages: usize, channels: usize, ablation: Ablation) -> GeneratorConfig {
    GeneratorConfig {
        stages,
        channels,
        nodes_b2a: 3,
        nodes_a2b: 3,
        state_dim: 4,
        ablation,
    }
}

fn inputs(r: &mut rand_chacha::ChaCha8Rng, b: usize, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let img = uniform(r, &[b, 3, h, w], -1.0, 1.0);
    let pa = Tensor::from_fn(&[b, 18, h, w], |i| if (i * 7) % 13 == 0 { 1.0 } else { 0.0 });
    let pb = Tensor::from_fn(&[b, 18, h, w], |i| if (i * 5) % 11 == 0 { 1.0 } else { 0.0 });
    (img, pa, pb)
}

#[test]
fn same_pose_gives_identical_shape_codes() {
    let mut r = rng(300);
    let mut store = ParamStore::<f64>::new();
    let g = Generator::new(config(1, 8, Ablation::default()), &mut store, &mut r).unwrap();
    let (img, pa, _) = inputs(&mut r, 2, 16, 8);
    let mut t = Tape::new();
    let (iv, pv) = (t.constant(img), t.constant(pa.clone()));
    let pv2 = t.constant(pa);
    let s = g.encode(&mut t, &store, iv, pv, pv2).unwrap();
    assert_eq!(t.value(s.f_pa), t.value(s.f_pb));
    assert_eq!(t.shape(s.f_i), &[2, 8, 4, 2]);
    assert_eq!(t.shape(s.f_i), t.shape(s.f_pa));
}

#[test]
fn permuting_heatmap_channels_changes_the_code() {
    let mut r = rng(301);
    let mut store = ParamStore::<f64>::new();
    let g = Generator::new(config(1, 8, Ablation::default()), &mut store, &mut r).unwrap();
    let (img, pa, _) = inputs(&mut r, 1, 16, 8);
    let plane = 16 * 8;
    let mut swapped = pa.clone();
    let d = swapped.data_mut();
    for i in 0..plane {
        d.swap(i, plane + i);
    }
    let mut t = Tape::new();
    let iv = t.constant(img);
    let (p1, p2) = (t.constant(pa), t.constant(swapped));
    let s = g.encode(&mut t, &store, iv, p1, p2).unwrap();
    assert!(t.value(s.f_pa).max_abs_diff(t.value(s.f_pb)) > 1e-6);
}

#[test]
fn output_matches_input_size_for_every_baseline() {
    let mut r = rng(302);
    for k in 1..=6 {
        let ab = Ablation::baseline(k).unwrap();
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(config(2, 8, ab), &mut store, &mut r).unwrap();
        let (img, pa, pb) = inputs(&mut r, 2, 16, 8);
        let mut t = Tape::new();
        let (iv, av, bv) = (t.constant(img.cast()), t.constant(pa.cast()), t.constant(pb.cast()));
        let out = g.forward(&mut t, &store, iv, av, bv).unwrap();
        assert_eq!(t.shape(out.image), &[2, 3, 16, 8]);
        assert_eq!(out.mask.is_some(), ab.use_aif, "B{k}");
        if !ab.use_aif {
            assert_eq!(out.image, out.intermediate);
        }
    }
}

#[test]
fn baseline_one_never_reads_graph_parameters() {
    let mut r = rng(303);
    for (k, expect) in [(1, vec![]), (2, vec!["b2a"]), (3, vec!["a2b"]), (5, vec!["a2b", "b2a"])] {
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(config(2, 8, Ablation::baseline(k).unwrap()), &mut store, &mut r).unwrap();
        let (img, pa, pb) = inputs(&mut r, 1, 16, 8);
        let mut t = Tape::new();
        let (iv, av, bv) = (t.constant(img.cast()), t.constant(pa.cast()), t.constant(pb.cast()));
        g.forward(&mut t, &store, iv, av, bv).unwrap();
        let mut branches: Vec<&str> = t
            .params_used(&store)
            .into_iter()
            .map(|id| store.name(id))
            .filter(|n| n.starts_with("bgr."))
            .map(|n| n.split('.').nth(2).unwrap())
            .collect();
        branches.sort();
        branches.dedup();
        assert_eq!(branches, expect, "B{k}");
    }
}

#[test]
fn sharing_census_differs_by_stage_count_times_graph_size() {
    let mut r = rng(304);
    for (t, n, d) in [(1, 3, 4), (3, 16, 32), (2, 5, 2)] {
        let cfg = |k| GeneratorConfig {
            stages: t,
            channels: 8,
            nodes_b2a: n,
            nodes_a2b: n,
            state_dim: d,
            ablation: Ablation::baseline(k).unwrap(),
        };
        let (mut s4, mut s5) = (ParamStore::<f32>::new(), ParamStore::<f32>::new());
        Generator::new(cfg(4), &mut s4, &mut r).unwrap();
        Generator::new(cfg(5), &mut s5, &mut r).unwrap();
        assert_eq!(s5.num_scalars() - s4.num_scalars(), t * (n * n + d * d));
    }
}

#[test]
fn residual_degeneracy_freezes_shape_codes_after_the_first_stage() {
    let mut r = rng(305);
    let mut store = ParamStore::<f64>::new();
    let g = Generator::new(config(3, 8, Ablation::default()), &mut store, &mut r).unwrap();
    let zeroed: Vec<_> = store
        .ids()
        .filter(|&id| {
            let n = store.name(id);
            n.contains(".phi_back.") || n.contains(".update")
        })
        .collect();
    for id in zeroed {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let (img, pa, pb) = inputs(&mut r, 1, 16, 8);
    let mut t = Tape::new();
    let (iv, av, bv) = (t.constant(img), t.constant(pa), t.constant(pb));
    let mut s = g.encode(&mut t, &store, iv, av, bv).unwrap();
    s = g.step(&mut t, &store, s).unwrap();
    let first = (t.value(s.f_pa).clone(), t.value(s.f_pb).clone());
    while s.stage < 3 {
        s = g.step(&mut t, &store, s).unwrap();
        assert_eq!(t.value(s.f_pa), &first.0);
        assert_eq!(t.value(s.f_pb), &first.1);
    }
    assert!(g.step(&mut t, &store, s).is_err());
}

#[test]
fn full_size_configuration_runs() {
    let mut r = rng(306);
    let cfg = GeneratorConfig {
        stages: 9,
        channels: 128,
        nodes_b2a: 16,
        nodes_a2b: 16,
        state_dim: 32,
        ablation: Ablation::default(),
    };
    let mut store = ParamStore::<f32>::new();
    let g = Generator::new(cfg, &mut store, &mut r).unwrap();
    let (img, pa, pb) = inputs(&mut r, 1, 128, 64);
    let mut t = Tape::new();
    let (iv, av, bv) = (t.constant(img.cast()), t.constant(pa.cast()), t.constant(pb.cast()));
    let out = g.forward(&mut t, &store, iv, av, bv).unwrap();
    assert_eq!(t.shape(out.image), &[1, 3, 128, 64]);
    assert!(t.value(out.image).all_finite());
}

#[test]
fn discriminator_scores_are_deterministic_patch_maps() {
    let mut r = rng(307);
    let (mut a, mut s) = (ParamStore::<f64>::new(), ParamStore::<f64>::new());
    let d = Discriminators::new(&mut a, &mut s, 4, 2, &mut r).unwrap();
    let pair = uniform(&mut r, &[2, 6, 16, 8], -1.0, 1.0);
    let mut t = Tape::new();
    let p1 = t.constant(pair.clone());
    let p2 = t.constant(pair);
    let s1 = discriminate(&mut t, &a, p1, &d.appearance).unwrap();
    let s2 = discriminate(&mut t, &a, p2, &d.appearance).unwrap();
    assert_eq!(t.shape(s1), &[2, 1, 4, 2]);
    assert_eq!(t.value(s1), t.value(s2));
}

#[test]
fn fd_discriminator() {
    let mut r = rng(308);
    let (mut a, mut s) = (ParamStore::<f64>::new(), ParamStore::<f64>::new());
    let d = Discriminators::new(&mut a, &mut s, 4, 2, &mut r).unwrap();
    let x = s.insert("input.pair", uniform(&mut r, &[2, 21, 8, 4], -1.0, 1.0)).unwrap();
    let rep = check_store(&mut s, FD_EPS, 16, |t, st| {
        let v = t.param(st, x);
        let out = discriminate(t, st, v, &d.shape)?;
        probe_sum(t, out, 8)
    })
    .unwrap();
    assert_fd("shape discriminator", &rep);
}

#[test]
fn shared_shape_encoder_sums_both_pose_paths() {
    // Oracle: route each pose through its own copy of the encoder; the shared
    // gradient must equal the sum of the two copies' gradients.
    let mut r = rng(309);
    let mut store = ParamStore::<f64>::new();
    let g = Generator::new(config(1, 8, Ablation::default()), &mut store, &mut r).unwrap();
    let (img, pa, pb) = inputs(&mut r, 1, 16, 8);
    let enc: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("gen.shape_encoder")).collect();

    let mut t = Tape::new();
    let (iv, av, bv) = (t.constant(img.clone()), t.constant(pa.clone()), t.constant(pb.clone()));
    let out = g.forward(&mut t, &store, iv, av, bv).unwrap();
    let l = probe_sum(&mut t, out.image, 9).unwrap();
    t.backward(l).unwrap();
    store.accumulate_grads(&t);
    let shared: Vec<Vec<f64>> = enc.iter().map(|&id| store.grad(id).to_vec()).collect();

    let mut copy_a = store.clone();
    let mut copy_b = store.clone();
    copy_a.zero_grad();
    copy_b.zero_grad();
    let mut t = Tape::new();
    let (iv, av, bv) = (t.constant(img), t.constant(pa), t.constant(pb));
    let f_i = g.appearance_encoder.forward(&mut t, &store, iv).unwrap();
    let f_pa = g.shape_encoder.forward(&mut t, &copy_a, av).unwrap();
    let f_pb = g.shape_encoder.forward(&mut t, &copy_b, bv).unwrap();
    let mut state = GeneratorState { f_i, f_pa, f_pb, stage: 0 };
    state = g.step(&mut t, &store, state).unwrap();
    let out = g.aif.forward(&mut t, &store, state.f_i, iv).unwrap();
    let l = probe_sum(&mut t, out.fused, 9).unwrap();
    t.backward(l).unwrap();
    copy_a.accumulate_grads(&t);
    copy_b.accumulate_grads(&t);
    for (k, &id) in enc.iter().enumerate() {
        let (ga, gb) = (copy_a.grad(id), copy_b.grad(id));
        assert!(ga.iter().any(|v| *v != 0.0) && gb.iter().any(|v| *v != 0.0));
        for j in 0..ga.len() {
            assert!((shared[k][j] - (ga[j] + gb[j])).abs() < 1e-10, "{}", store.name(id));
        }
    }
}

#[test]
fn fd_full_pipeline_tiny() {
    let mut r = rng(310);
    let mut store = ParamStore::<f64>::new();
    let g = Generator::new(config(1, 8, Ablation::default()), &mut store, &mut r).unwrap();
    let (img, pa, pb) = inputs(&mut r, 1, 16, 8);
    let rep = check_store(&mut store, FD_EPS, 3, |t, s| {
        let (iv, av, bv) = (t.constant(img.clone()), t.constant(pa.clone()), t.constant(pb.clone()));
        let out = g.forward(t, s, iv, av, bv)?;
        probe_sum(t, out.image, 10)
    })
    .unwrap();
    assert!(rep.passes(1e-3), "{rep:?}");
}
