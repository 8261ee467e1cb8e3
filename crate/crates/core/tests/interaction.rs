mod common;

use bigraph_core::gradcheck::check_store;
use bigraph_core::interaction::{attention_fuse, ia_forward, pose_attention, Aif, IaBlock};
use bigraph_core::{ParamStore, Tape, Tensor};
use common::*;
use proptest::prelude::*;

#[test]
fn fuse_with_full_mask_returns_source_exactly() {
    let mut r = rng(200);
    let ia0 = uniform(&mut r, &[2, 3, 6, 4], -1.0, 1.0);
    let ib0 = uniform(&mut r, &[2, 3, 6, 4], -1.0, 1.0);
    let mut t = Tape::<f64>::new();
    let (ia, ib) = (t.constant(ia0.clone()), t.constant(ib0.clone()));
    let ones = t.constant(Tensor::ones(&[2, 1, 6, 4]));
    let zeros = t.constant(Tensor::zeros(&[2, 1, 6, 4]));
    let keep = attention_fuse(&mut t, ia, ib, ones).unwrap();
    let fill = attention_fuse(&mut t, ia, ib, zeros).unwrap();
    assert_eq!(t.value(keep), &ia0);
    assert_eq!(t.value(fill), &ib0);
}

#[test]
fn fuse_rejects_multi_channel_masks() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(attention_fuse(&mut t, x, x, x).is_err());
}

#[test]
fn attention_lies_strictly_inside_unit_interval() {
    let mut r = rng(201);
    let mut store = ParamStore::<f64>::new();
    let blk = IaBlock::new(&mut store, 0, 4, &mut r).unwrap();
    let mut t = Tape::new();
    let pa = t.constant(uniform(&mut r, &[2, 4, 3, 2], -3.0, 3.0));
    let pb = t.constant(uniform(&mut r, &[2, 4, 3, 2], -3.0, 3.0));
    let a = pose_attention(&mut t, &store, pa, pb, &blk).unwrap();
    assert!(t.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn ia_block_keeps_code_shapes() {
    let mut r = rng(202);
    let mut store = ParamStore::<f64>::new();
    let blk = IaBlock::new(&mut store, 3, 4, &mut r).unwrap();
    assert!(store.id("ia.3.attn0.conv.weight").is_some());
    let mut t = Tape::new();
    let fi = t.constant(uniform(&mut r, &[2, 4, 3, 2], -1.0, 1.0));
    let pa = t.constant(uniform(&mut r, &[2, 4, 3, 2], -1.0, 1.0));
    let pb = t.constant(uniform(&mut r, &[2, 4, 3, 2], -1.0, 1.0));
    let (a, b, c) = ia_forward(&mut t, &store, fi, pa, pb, &blk).unwrap();
    for v in [a, b, c] {
        assert_eq!(t.shape(v), &[2, 4, 3, 2]);
    }
    let wrong = t.constant(Tensor::zeros(&[2, 4, 2, 2]));
    assert!(ia_forward(&mut t, &store, fi, wrong, pb, &blk).is_err());
}

#[test]
fn fd_ia_block() {
    let mut r = rng(203);
    let mut store = ParamStore::<f64>::new();
    let blk = IaBlock::new(&mut store, 0, 4, &mut r).unwrap();
    let shape = [2, 4, 3, 2];
    let fi = store.insert("input.f_i", uniform(&mut r, &shape, -1.0, 1.0)).unwrap();
    let pa = store.insert("input.f_pa", uniform(&mut r, &shape, -1.0, 1.0)).unwrap();
    let pb = store.insert("input.f_pb", uniform(&mut r, &shape, -1.0, 1.0)).unwrap();
    let rep = check_store(&mut store, FD_EPS, 16, |t, s| {
        let (a, b, c) = (t.param(s, fi), t.param(s, pa), t.param(s, pb));
        let (x, y, z) = ia_forward(t, s, a, b, c, &blk)?;
        let all = t.concat(&[x, y, z])?;
        probe_sum(t, all, 5)
    })
    .unwrap();
    assert_fd("ia block", &rep);
}

#[test]
fn fd_aif_head() {
    let mut r = rng(204);
    let mut store = ParamStore::<f64>::new();
    let aif = Aif::new(&mut store, 8, 1, true, &mut r).unwrap();
    let f = store.insert("input.f_i", uniform(&mut r, &[2, 8, 3, 2], -1.0, 1.0)).unwrap();
    let ia = store.insert("input.i_a", uniform(&mut r, &[2, 3, 6, 4], -1.0, 1.0)).unwrap();
    let rep = check_store(&mut store, FD_EPS, 12, |t, s| {
        let (fv, iv) = (t.param(s, f), t.param(s, ia));
        let out = aif.forward(t, s, fv, iv)?;
        probe_sum(t, out.fused, 6)
    })
    .unwrap();
    assert_fd("aif", &rep);
}

#[test]
fn fd_attention_fuse() {
    let mut r = rng(205);
    let a = uniform(&mut r, &[2, 3, 4, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3, 4, 3], -1.0, 1.0);
    let m = uniform(&mut r, &[2, 1, 4, 3], 0.1, 0.9);
    assert_fd("attention_fuse", &check_inputs(vec![a, b, m], 48, |t, v| attention_fuse(t, v[0], v[1], v[2])));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_is_a_convex_blend(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[1, 3, 3, 2], -1.0, 1.0);
        let b = uniform(&mut r, &[1, 3, 3, 2], -1.0, 1.0);
        let m = uniform(&mut r, &[1, 1, 3, 2], 0.0, 1.0);
        let mut t = Tape::<f64>::new();
        let (av, bv, mv) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(m));
        let out = attention_fuse(&mut t, av, bv, mv).unwrap();
        for (i, &o) in t.value(out).data().iter().enumerate() {
            let (x, y) = (a.data()[i], b.data()[i]);
            prop_assert!(o >= x.min(y) - 1e-12 && o <= x.max(y) + 1e-12);
        }
    }
}
