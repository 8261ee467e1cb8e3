//! End-to-end graph generator and the two patch discriminators.
//!
//! ```text
//! I_a --appearance encoder--> F_i ─┐
//! P_a --shape encoder-------> F_pa ├─ T x (BGR block -> IA block) ─> F_i^T ─> fusion head ─> I_b'
//! P_b --shape encoder-------> F_pb ┘
//! ```
//!
//! The shape encoder is a single set of weights applied to both poses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::graph_blocks::{bgr_forward, BgrBlock, BgrConfig};
use crate::interaction::{ia_forward, Aif, IaBlock};
use crate::layers::{Conv, ConvNormRelu, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const IMAGE_CHANNELS: usize = 3;
pub const POSE_CHANNELS: usize = 18;
/// Stride-2 stages in each encoder; codes are 1/4 of the image size.
pub const DOWNSAMPLES: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Switches spanning the six ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_b2a: bool,
    pub use_a2b: bool,
    pub share_gcn: bool,
    pub use_aif: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::baseline(6).expect("B6 exists")
    }
}

impl Ablation {
    /// Baselines `B1..=B6`: B1 no graph reasoning; B2 B2A only; B3 A2B only;
    /// B4 both with a shared GCN; B5 both, unshared; B6 = B5 plus fusion.
    pub fn baseline(index: usize) -> Result<Self> {
        let (use_b2a, use_a2b, share_gcn, use_aif) = match index {
            1 => (false, false, false, false),
            2 => (true, false, false, false),
            3 => (false, true, false, false),
            4 => (true, true, true, false),
            5 => (true, true, false, false),
            6 => (true, true, false, true),
            _ => return Err(Error::Config(format!("no baseline B{index}"))),
        };
        Ok(Self {
            use_b2a,
            use_a2b,
            share_gcn,
            use_aif,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Number of cascaded BGR + IA stages.
    pub stages: usize,
    pub channels: usize,
    pub nodes_b2a: usize,
    pub nodes_a2b: usize,
    pub state_dim: usize,
    pub ablation: Ablation,
}

impl GeneratorConfig {
    fn bgr(&self) -> BgrConfig {
        BgrConfig {
            channels: self.channels,
            nodes_b2a: self.nodes_b2a,
            nodes_a2b: self.nodes_a2b,
            state_dim: self.state_dim,
            use_b2a: self.ablation.use_b2a,
            use_a2b: self.ablation.use_a2b,
            share_gcn: self.ablation.share_gcn,
        }
    }
}

/// 7x7 stride-1 stem then two 4x4 stride-2 stages, each with instance
/// norm and ReLU; widths C/4, C/2, C.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<ConvNormRelu>,
    pub in_channels: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w0 = (channels / 4).max(1);
        let w1 = (channels / 2).max(1);
        let layers = vec![
            ConvNormRelu::new(store, &format!("{name}.stem"), ConvSpec::new(in_channels, w0, 7, 1, 3), false, rng)?,
            ConvNormRelu::new(store, &format!("{name}.down0"), ConvSpec::new(w0, w1, 4, 2, 1), false, rng)?,
            ConvNormRelu::new(store, &format!("{name}.down1"), ConvSpec::new(w1, channels, 4, 2, 1), false, rng)?,
        ];
        Ok(Self { layers, in_channels })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.in_channels {
            return shape_err("encoder", tape.shape(x), &[0, self.in_channels, 0, 0]);
        }
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// Appearance code and both shape codes after `stage` blocks.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorState {
    pub f_i: Var,
    pub f_pa: Var,
    pub f_pb: Var,
    pub stage: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// Final image `I_b'`.
    pub image: Var,
    /// Decoded intermediate image `I_b~`.
    pub intermediate: Var,
    /// Fusion mask `A_i`, when fusion is enabled.
    pub mask: Option<Var>,
    pub state: GeneratorState,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub appearance_encoder: Encoder,
    pub shape_encoder: Encoder,
    pub stages: Vec<(BgrBlock, IaBlock)>,
    pub aif: Aif,
}

impl Generator {
    pub fn new<T: Scalar, R: Rng>(
        config: GeneratorConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.stages == 0 {
            return Err(Error::Config("the generator needs at least one stage".into()));
        }
        if config.channels < 4 {
            return Err(Error::Config("channel width must be at least 4".into()));
        }
        let c = config.channels;
        let appearance_encoder = Encoder::new(store, "gen.appearance_encoder", IMAGE_CHANNELS, c, rng)?;
        let shape_encoder = Encoder::new(store, "gen.shape_encoder", POSE_CHANNELS, c, rng)?;
        let bgr = config.bgr();
        let stages = (0..config.stages)
            .map(|t| Ok((BgrBlock::new(store, t, &bgr, rng)?, IaBlock::new(store, t, c, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        let aif = Aif::new(store, c, DOWNSAMPLES, config.ablation.use_aif, rng)?;
        Ok(Self {
            config,
            appearance_encoder,
            shape_encoder,
            stages,
            aif,
        })
    }

    /// Codes at stage 0. `P_a` and `P_b` pass through the same encoder.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        i_a: Var,
        p_a: Var,
        p_b: Var,
    ) -> Result<GeneratorState> {
        let (b, _, h, w) = tape.value(i_a).dims4()?;
        for p in [p_a, p_b] {
            let (pb, pc, ph, pw) = tape.value(p).dims4()?;
            if (pb, pc, ph, pw) != (b, POSE_CHANNELS, h, w) {
                return shape_err("encode", tape.shape(p), &[b, POSE_CHANNELS, h, w]);
            }
        }
        let f_i = self.appearance_encoder.forward(tape, store, i_a)?;
        let f_pa = self.shape_encoder.forward(tape, store, p_a)?;
        let f_pb = self.shape_encoder.forward(tape, store, p_b)?;
        Ok(GeneratorState {
            f_i,
            f_pa,
            f_pb,
            stage: 0,
        })
    }

    /// One BGR + IA stage.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: GeneratorState,
    ) -> Result<GeneratorState> {
        let (bgr, ia) = self
            .stages
            .get(state.stage)
            .ok_or_else(|| Error::Contract(format!("stage {} beyond T = {}", state.stage, self.stages.len())))?;
        let (pa, pb) = bgr_forward(tape, store, state.f_pa, state.f_pb, bgr)?;
        let (f_i, f_pa, f_pb) = ia_forward(tape, store, state.f_i, pa, pb, ia)?;
        Ok(GeneratorState {
            f_i,
            f_pa,
            f_pb,
            stage: state.stage + 1,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        i_a: Var,
        p_a: Var,
        p_b: Var,
    ) -> Result<GeneratorOutput> {
        let mut state = self.encode(tape, store, i_a, p_a, p_b)?;
        while state.stage < self.stages.len() {
            state = self.step(tape, store, state)?;
        }
        let out = self.aif.forward(tape, store, state.f_i, i_a)?;
        Ok(GeneratorOutput {
            image: out.fused,
            intermediate: out.intermediate,
            mask: out.mask,
            state,
        })
    }

    /// Parameters belonging to the BGR blocks.
    pub fn bgr_params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|(b, _)| b.params()).collect()
    }
}

/// Strided patch classifier: `strided` 4x4 stride-2 convolutions with leaky
/// ReLU, then a 3x3 head producing one logit per patch.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub layers: Vec<Conv>,
    pub head: Conv,
    pub in_channels: usize,
}

impl PatchDiscriminator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        width: usize,
        strided: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = in_channels;
        for i in 0..strided {
            let out = width << i;
            layers.push(Conv::new(store, &format!("{name}.conv{i}"), ConvSpec::new(c, out, 4, 2, 1), rng)?);
            c = out;
        }
        let head = Conv::new(store, &format!("{name}.head"), ConvSpec::new(c, 1, 3, 1, 1), rng)?;
        Ok(Self {
            layers,
            head,
            in_channels,
        })
    }

    /// Patch logits `[b, 1, h / 2^strided, w / 2^strided]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pair: Var) -> Result<Var> {
        let c = tape.value(pair).dims4()?.1;
        if c != self.in_channels {
            return shape_err("discriminate", tape.shape(pair), &[0, self.in_channels, 0, 0]);
        }
        let mut h = pair;
        for l in &self.layers {
            h = l.forward(tape, store, h)?;
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE));
        }
        self.head.forward(tape, store, h)
    }
}

/// Appearance discriminator over `[I_a, I]` (6 channels) and shape
/// discriminator over `[P_b, I]` (21 channels).
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub appearance: PatchDiscriminator,
    pub shape: PatchDiscriminator,
}

impl Discriminators {
    pub fn new<T: Scalar, R: Rng>(
        app_store: &mut ParamStore<T>,
        shape_store: &mut ParamStore<T>,
        width: usize,
        strided: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            appearance: PatchDiscriminator::new(app_store, "disc.app", 2 * IMAGE_CHANNELS, width, strided, rng)?,
            shape: PatchDiscriminator::new(
                shape_store,
                "disc.shape",
                POSE_CHANNELS + IMAGE_CHANNELS,
                width,
                strided,
                rng,
            )?,
        })
    }
}

/// Score a concatenated pair with one discriminator.
pub fn discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pair: Var,
    disc: &PatchDiscriminator,
) -> Result<Var> {
    disc.forward(tape, store, pair)
}
