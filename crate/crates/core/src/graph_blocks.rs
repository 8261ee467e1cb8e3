//! Bipartite graph reasoning between the source and target shape codes.
//!
//! Each branch projects its own pose features into a latent node space
//! defined by the *other* pose, reasons over the nodes with a graph
//! convolution, and maps the result back with a residual connection:
//!
//! ```text
//! H = theta(other)                  [N x L]   projection, L = h * w
//! V = H * phi_reduce(own)^T / L     [N x D]   node states
//! M = (I - A) V W                   [N x D]   A: N x N, W: D x D
//! own' = phi_back(reshape(M^T H)) + own
//! ```
//!
//! The B2A branch updates the source code `F_pa` using nodes defined by the
//! target code `F_pb`; A2B is the mirror image. Both read the block inputs,
//! so the two branches are independent given `(F_pa, F_pb)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian init of adjacency and edge weights.
pub const GRAPH_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BgrConfig {
    pub channels: usize,
    pub nodes_b2a: usize,
    pub nodes_a2b: usize,
    pub state_dim: usize,
    pub use_b2a: bool,
    pub use_a2b: bool,
    pub share_gcn: bool,
}

/// Parameters of one branch.
#[derive(Clone, Debug)]
pub struct BgrBranch {
    /// 1x1 projection `C -> N` applied to the other pose's code.
    pub theta: Conv,
    /// 1x1 reduction `C -> D` applied to the own code.
    pub phi_reduce: Conv,
    pub adjacency: ParamId,
    pub edge_weights: ParamId,
    /// 1x1 expansion `D -> C` back to coordinate space.
    pub phi_back: Conv,
    pub nodes: usize,
    pub state_dim: usize,
}

#[derive(Clone, Debug)]
pub struct BgrBlock {
    pub b2a: Option<BgrBranch>,
    pub a2b: Option<BgrBranch>,
    pub share_gcn: bool,
}

impl BgrBranch {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        nodes: usize,
        state_dim: usize,
        shared: Option<(ParamId, ParamId)>,
        rng: &mut R,
    ) -> Result<Self> {
        let theta = Conv::new(store, &format!("{prefix}.theta"), ConvSpec::pointwise(channels, nodes), rng)?;
        let phi_reduce = Conv::new(
            store,
            &format!("{prefix}.phi_reduce"),
            ConvSpec::pointwise(channels, state_dim),
            rng,
        )?;
        let (adjacency, edge_weights) = match shared {
            Some(pair) => pair,
            None => (
                store.insert_normal(format!("{prefix}.adjacency"), &[nodes, nodes], GRAPH_INIT_STD, rng)?,
                store.insert_normal(
                    format!("{prefix}.edge_weights"),
                    &[state_dim, state_dim],
                    GRAPH_INIT_STD,
                    rng,
                )?,
            ),
        };
        let phi_back = Conv::new(
            store,
            &format!("{prefix}.phi_back"),
            ConvSpec::pointwise(state_dim, channels),
            rng,
        )?;
        Ok(Self {
            theta,
            phi_reduce,
            adjacency,
            edge_weights,
            phi_back,
            nodes,
            state_dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.theta.params();
        p.extend(self.phi_reduce.params());
        p.push(self.adjacency);
        p.push(self.edge_weights);
        p.extend(self.phi_back.params());
        p
    }
}

impl BgrBlock {
    /// Register the parameters of block `index` under `bgr.{index}.*`.
    /// Disabled branches allocate nothing. With `share_gcn` the A2B branch
    /// reuses the B2A adjacency and edge weights.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        index: usize,
        cfg: &BgrConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let share = cfg.share_gcn && cfg.use_b2a && cfg.use_a2b;
        if share && cfg.nodes_b2a != cfg.nodes_a2b {
            return Err(Error::Config(format!(
                "share_gcn needs equal node counts, got {} and {}",
                cfg.nodes_b2a, cfg.nodes_a2b
            )));
        }
        let b2a = if cfg.use_b2a {
            Some(BgrBranch::new(
                store,
                &format!("bgr.{index}.b2a"),
                cfg.channels,
                cfg.nodes_b2a,
                cfg.state_dim,
                None,
                rng,
            )?)
        } else {
            None
        };
        let shared = match (&b2a, share) {
            (Some(b), true) => Some((b.adjacency, b.edge_weights)),
            _ => None,
        };
        let a2b = if cfg.use_a2b {
            Some(BgrBranch::new(
                store,
                &format!("bgr.{index}.a2b"),
                cfg.channels,
                cfg.nodes_a2b,
                cfg.state_dim,
                shared,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            b2a,
            a2b,
            share_gcn: share,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.b2a.iter().flat_map(|b| b.params()).collect();
        p.extend(self.a2b.iter().flat_map(|b| b.params()));
        p.sort();
        p.dedup();
        p
    }
}

/// Project `source` into the node space spanned by `theta(target)`.
///
/// Node states are the position average `H phi_reduce(source)^T / L`.
/// Returns `(node_states [b, N, D], projection [b, N, L])`.
pub fn project_to_graph<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    source: Var,
    target: Var,
    branch: &BgrBranch,
) -> Result<(Var, Var)> {
    let (b, _, h, w) = tape.value(source).dims4()?;
    let (bt, _, ht, wt) = tape.value(target).dims4()?;
    if (b, h, w) != (bt, ht, wt) {
        return shape_err("project_to_graph", tape.shape(source), tape.shape(target));
    }
    let l = h * w;
    let proj = branch.theta.forward(tape, store, target)?;
    let proj = tape.reshape(proj, &[b, branch.nodes, l])?;
    let reduced = branch.phi_reduce.forward(tape, store, source)?;
    let reduced = tape.reshape(reduced, &[b, branch.state_dim, l])?;
    let states = tape.bmm(proj, reduced, false, true)?;
    // averaging over positions keeps the node states, and with them the
    // residual update, independent of the code resolution
    let states = tape.scale(states, T::of(1.0 / l as f64));
    Ok((states, proj))
}

/// Graph convolution `M = (I - A) V W` applied per sample.
pub fn graph_reason<T: Scalar>(
    tape: &mut Tape<T>,
    node_states: Var,
    adjacency: Var,
    edge_weights: Var,
) -> Result<Var> {
    let a_shape = tape.shape(adjacency).to_vec();
    let w_shape = tape.shape(edge_weights).to_vec();
    let v_shape = tape.shape(node_states).to_vec();
    if a_shape.len() != 2 || a_shape[0] != a_shape[1] {
        return shape_err("graph_reason adjacency", &a_shape, &[a_shape[0], a_shape[0]]);
    }
    if w_shape.len() != 2 || w_shape[0] != w_shape[1] {
        return shape_err("graph_reason edge_weights", &w_shape, &[w_shape[0], w_shape[0]]);
    }
    if v_shape.len() != 3 || v_shape[1] != a_shape[0] || v_shape[2] != w_shape[0] {
        return shape_err("graph_reason node_states", &v_shape, &[a_shape[0], w_shape[0]]);
    }
    let eye = tape.constant(Tensor::eye(a_shape[0]));
    let laplacian = tape.sub(eye, adjacency)?;
    let smoothed = tape.bmm(laplacian, node_states, false, false)?;
    tape.bmm(smoothed, edge_weights, false, false)
}

/// Map reasoned node states back through the transpose of the same
/// projection, expand channels with `phi_back`, and add the residual.
pub fn project_back<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    reasoned: Var,
    projection: Var,
    residual_input: Var,
    branch: &BgrBranch,
) -> Result<Var> {
    let (b, _, h, w) = tape.value(residual_input).dims4()?;
    let p_shape = tape.shape(projection).to_vec();
    if p_shape.len() != 3 || p_shape[0] != b || p_shape[2] != h * w {
        return shape_err("project_back", &p_shape, tape.shape(residual_input));
    }
    // (H^T M)^T = M^T H, laid out channel-major as [b, D, L]
    let back = tape.bmm(reasoned, projection, true, false)?;
    let back = tape.reshape(back, &[b, branch.state_dim, h, w])?;
    let expanded = branch.phi_back.forward(tape, store, back)?;
    tape.add(expanded, residual_input)
}

fn branch_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    own: Var,
    other: Var,
    branch: &BgrBranch,
) -> Result<Var> {
    let (states, proj) = project_to_graph(tape, store, own, other, branch)?;
    let a = tape.param(store, branch.adjacency);
    let w = tape.param(store, branch.edge_weights);
    let reasoned = graph_reason(tape, states, a, w)?;
    project_back(tape, store, reasoned, proj, own, branch)
}

/// One BGR block. A disabled branch passes its code through unchanged.
pub fn bgr_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    f_pa: Var,
    f_pb: Var,
    block: &BgrBlock,
) -> Result<(Var, Var)> {
    if tape.shape(f_pa) != tape.shape(f_pb) {
        return shape_err("bgr_forward", tape.shape(f_pa), tape.shape(f_pb));
    }
    let pa = match &block.b2a {
        Some(br) => branch_forward(tape, store, f_pa, f_pb, br)?,
        None => f_pa,
    };
    let pb = match &block.a2b {
        Some(br) => branch_forward(tape, store, f_pb, f_pa, br)?,
        None => f_pb,
    };
    Ok((pa, pb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(share: bool) -> BgrConfig {
        BgrConfig {
            channels: 6,
            nodes_b2a: 3,
            nodes_a2b: 3,
            state_dim: 4,
            use_b2a: true,
            use_a2b: true,
            share_gcn: share,
        }
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn graph_reason_hand_example() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap());
        let a = t.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let w = t.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let m = graph_reason(&mut t, v, a, w).unwrap();
        assert_eq!(t.value(m).data(), &[-3.0, 6.0]);
    }

    #[test]
    fn graph_reason_identity_and_annihilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let v = t.constant(randn(&[2, 3, 4], &mut rng));
        let zero = t.constant(Tensor::zeros(&[3, 3]));
        let eye_w = t.constant(Tensor::eye(4));
        let m = graph_reason(&mut t, v, zero, eye_w).unwrap();
        assert_eq!(t.value(m), t.value(v));
        let eye_a = t.constant(Tensor::eye(3));
        let w = t.constant(randn(&[4, 4], &mut rng));
        let m = graph_reason(&mut t, v, eye_a, w).unwrap();
        assert!(t.value(m).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn graph_reason_rejects_non_square() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::zeros(&[1, 2, 2]));
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let w = t.constant(Tensor::eye(2));
        assert!(matches!(graph_reason(&mut t, v, a, w), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_theta_gives_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = BgrBlock::new(&mut store, 0, &cfg(false), &mut rng).unwrap();
        let br = block.b2a.as_ref().unwrap();
        store.value_mut(br.theta.weight).data_mut().fill(0.0);
        let mut t = Tape::new();
        let s = t.constant(randn(&[2, 6, 3, 2], &mut rng));
        let g = t.constant(randn(&[2, 6, 3, 2], &mut rng));
        let (v, _) = project_to_graph(&mut t, &store, s, g, br).unwrap();
        assert_eq!(t.shape(v), &[2, 3, 4]);
        assert!(t.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_spatial_sizes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = BgrBlock::new(&mut store, 0, &cfg(false), &mut rng).unwrap();
        let mut t = Tape::new();
        let s = t.constant(Tensor::zeros(&[1, 6, 3, 2]));
        let g = t.constant(Tensor::zeros(&[1, 6, 2, 3]));
        let err = project_to_graph(&mut t, &store, s, g, block.b2a.as_ref().unwrap());
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn single_pixel_hand_example() {
        // h = w = 1, N = D = 1, C = 2: theta = [a1 a2], phi = [b1 b2]
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let c = BgrConfig {
            channels: 2,
            nodes_b2a: 1,
            nodes_a2b: 1,
            state_dim: 1,
            ..cfg(false)
        };
        let block = BgrBlock::new(&mut store, 0, &c, &mut rng).unwrap();
        let br = block.b2a.as_ref().unwrap();
        store.value_mut(br.theta.weight).data_mut().copy_from_slice(&[1.0, 1.0]);
        store.value_mut(br.phi_reduce.weight).data_mut().copy_from_slice(&[1.0, 1.0]);
        let mut t = Tape::new();
        let s = t.constant(Tensor::new(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap());
        let g = t.constant(Tensor::new(&[1, 2, 1, 1], vec![4.0, -1.0]).unwrap());
        let (v, h) = project_to_graph(&mut t, &store, s, g, br).unwrap();
        // (4 - 1) * (2 + 3)
        assert_eq!(t.value(v).data(), &[15.0]);
        assert_eq!(t.value(h).data(), &[3.0]);
    }

    #[test]
    fn zero_back_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = BgrBlock::new(&mut store, 0, &cfg(false), &mut rng).unwrap();
        for br in [&block.b2a, &block.a2b].into_iter().flatten() {
            store.value_mut(br.phi_back.weight).data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let pa = t.constant(randn(&[2, 6, 4, 3], &mut rng));
        let pb = t.constant(randn(&[2, 6, 4, 3], &mut rng));
        let (na, nb) = bgr_forward(&mut t, &store, pa, pb, &block).unwrap();
        assert_eq!(t.value(na), t.value(pa));
        assert_eq!(t.value(nb), t.value(pb));
    }

    #[test]
    fn sharing_removes_one_graph_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s1 = ParamStore::<f64>::new();
        BgrBlock::new(&mut s1, 0, &cfg(false), &mut rng).unwrap();
        let mut s2 = ParamStore::<f64>::new();
        let shared = BgrBlock::new(&mut s2, 0, &cfg(true), &mut rng).unwrap();
        assert_eq!(s1.num_scalars() - s2.num_scalars(), 3 * 3 + 4 * 4);
        let (b2a, a2b) = (shared.b2a.unwrap(), shared.a2b.unwrap());
        assert_eq!(b2a.adjacency, a2b.adjacency);
        assert_eq!(b2a.edge_weights, a2b.edge_weights);
    }

    #[test]
    fn unequal_nodes_cannot_share() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::<f64>::new();
        let c = BgrConfig {
            nodes_a2b: 5,
            ..cfg(true)
        };
        assert!(matches!(BgrBlock::new(&mut s, 0, &c, &mut rng), Err(Error::Config(_))));
    }
}
