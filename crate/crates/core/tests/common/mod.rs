//! Helpers shared by the integration tests.
#![allow(dead_code)]

use bigraph_core::gradcheck::{check_store, GradCheckReport};
use bigraph_core::graph_blocks::{BgrBlock, BgrBranch, BgrConfig};
use bigraph_core::{ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * probe)` with a fixed random probe, turning any output into
/// a scalar whose gradient exercises every output element.
pub fn probe_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xA5A5);
    let probe = uniform(&mut r, tape.shape(out), -1.0, 1.0);
    let p = tape.constant(probe);
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

/// Finite-difference check of `f` with respect to each tensor in `inputs`.
pub fn check_inputs<F>(inputs: Vec<Tensor<f64>>, per_input: usize, mut f: F) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("x{i}"), t).unwrap())
        .collect();
    check_store(&mut store, FD_EPS, per_input, |tape, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let out = f(tape, &vars)?;
        probe_sum(tape, out, 11)
    })
    .unwrap()
}

pub fn assert_fd(name: &str, r: &GradCheckReport) {
    assert!(
        r.passes(FD_TOL),
        "{name}: max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        r.max_rel_err,
        r.worst_param,
        r.worst_index,
        r.analytic,
        r.numeric
    );
    assert!(r.checked > 0, "{name}: nothing checked");
}

pub struct Case {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub d: usize,
}

pub fn random_case(r: &mut rand_chacha::ChaCha8Rng) -> Case {
    Case {
        b: r.gen_range(1..=2),
        c: r.gen_range(1..=6),
        h: r.gen_range(1..=4),
        w: r.gen_range(1..=4),
        n: r.gen_range(1..=5),
        d: r.gen_range(1..=5),
    }
}

pub fn block(store: &mut ParamStore<f64>, k: &Case, r: &mut rand_chacha::ChaCha8Rng) -> BgrBlock {
    let cfg = BgrConfig {
        channels: k.c,
        nodes_b2a: k.n,
        nodes_a2b: k.n,
        state_dim: k.d,
        use_b2a: true,
        use_a2b: true,
        share_gcn: false,
    };
    let blk = BgrBlock::new(store, 0, &cfg, r).unwrap();
    // widen the graph weights beyond their small init so they matter
    for br in [blk.b2a.as_ref().unwrap(), blk.a2b.as_ref().unwrap()] {
        for id in [br.adjacency, br.edge_weights] {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = uniform(r, &shape, -0.5, 0.5);
        }
    }
    blk
}

/// Index-level evaluation of one branch for sample `s`: projection,
/// graph convolution and residual back-projection written as plain loops.
pub fn oracle_branch(store: &ParamStore<f64>, br: &BgrBranch, own: &Tensor<f64>, other: &Tensor<f64>, s: usize) -> Vec<f64> {
    let [_, c, h, w] = own.shape().try_into().unwrap();
    let l = h * w;
    let (n, d) = (br.nodes, br.state_dim);
    let theta = store.value(br.theta.weight).data();
    let red = store.value(br.phi_reduce.weight).data();
    let adj = store.value(br.adjacency).data();
    let ew = store.value(br.edge_weights).data();
    let back = store.value(br.phi_back.weight).data();
    let own = &own.data()[s * c * l..(s + 1) * c * l];
    let other = &other.data()[s * c * l..(s + 1) * c * l];

    let mut hp = vec![0.0; n * l];
    for i in 0..n {
        for p in 0..l {
            for ch in 0..c {
                hp[i * l + p] += theta[i * c + ch] * other[ch * l + p];
            }
        }
    }
    let mut rd = vec![0.0; d * l];
    for j in 0..d {
        for p in 0..l {
            for ch in 0..c {
                rd[j * l + p] += red[j * c + ch] * own[ch * l + p];
            }
        }
    }
    let mut v = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            for p in 0..l {
                v[i * d + j] += hp[i * l + p] * rd[j * l + p];
            }
            v[i * d + j] /= l as f64;
        }
    }
    let mut m = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            for q in 0..n {
                let lap = if i == q { 1.0 } else { 0.0 } - adj[i * n + q];
                for e in 0..d {
                    m[i * d + j] += lap * v[q * d + e] * ew[e * d + j];
                }
            }
        }
    }
    let mut bk = vec![0.0; d * l];
    for j in 0..d {
        for p in 0..l {
            for i in 0..n {
                bk[j * l + p] += m[i * d + j] * hp[i * l + p];
            }
        }
    }
    let mut out = own.to_vec();
    for ch in 0..c {
        for p in 0..l {
            for j in 0..d {
                out[ch * l + p] += back[ch * d + j] * bk[j * l + p];
            }
        }
    }
    out
}
