//! Pose-to-image interaction (IA block) and attention-based image fusion.
//!
//! The IA block gates the appearance code with a sigmoid attention map
//! computed from both shape codes, `F_i' = A_p * F_i + F_i`, then
//! re-derives both shape codes from the concatenation
//! `[F_i', F_pa, F_pb]`. The fusion head decodes the final appearance code
//! into an intermediate image and a one-channel mask and blends
//! `I_b' = I_a * A_i + I_b~ * (1 - A_i)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, ConvNormRelu, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct IaBlock {
    /// `2C -> C -> C`, sigmoid on the output.
    pub attn: (ConvNormRelu, Conv),
    /// `3C -> 2C -> 2C`, split into the two shape codes.
    pub update: (ConvNormRelu, Conv),
    pub channels: usize,
}

impl IaBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        index: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let p = format!("ia.{index}");
        Ok(Self {
            // the hidden layers are normalized so the shape codes handed to the
            // next stage stay at unit scale; the graph update is cubic in that
            // scale and otherwise compounds across stages
            attn: (
                ConvNormRelu::new(store, &format!("{p}.attn0"), ConvSpec::new(2 * c, c, 3, 1, 1), false, rng)?,
                Conv::new(store, &format!("{p}.attn1"), ConvSpec::new(c, c, 3, 1, 1), rng)?,
            ),
            update: (
                ConvNormRelu::new(store, &format!("{p}.update0"), ConvSpec::new(3 * c, 2 * c, 3, 1, 1), false, rng)?,
                Conv::new(store, &format!("{p}.update1"), ConvSpec::new(2 * c, 2 * c, 3, 1, 1), rng)?,
            ),
            channels,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.attn, &self.update]
            .into_iter()
            .flat_map(|(hidden, out)| hidden.params().into_iter().chain(out.params()))
            .collect()
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(op, tape.shape(a), tape.shape(b));
    }
    Ok(())
}

/// `A_p = sigmoid(conv(relu(norm(conv([F_pa, F_pb])))))`, strictly inside (0, 1).
pub fn pose_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    f_pa: Var,
    f_pb: Var,
    block: &IaBlock,
) -> Result<Var> {
    same_shape(tape, "pose_attention", f_pa, f_pb)?;
    let x = tape.concat(&[f_pa, f_pb])?;
    let h = block.attn.0.forward(tape, store, x)?;
    let logits = block.attn.1.forward(tape, store, h)?;
    Ok(tape.sigmoid(logits))
}

/// `F_i' = A_p * F_i + F_i`.
pub fn enhance_appearance<T: Scalar>(tape: &mut Tape<T>, f_i: Var, a_p: Var) -> Result<Var> {
    same_shape(tape, "enhance_appearance", f_i, a_p)?;
    let gated = tape.mul(a_p, f_i)?;
    tape.add(gated, f_i)
}

/// New shape codes from `[F_i', F_pa, F_pb]`, split in half along channels.
pub fn update_shape_codes<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    f_i_new: Var,
    f_pa: Var,
    f_pb: Var,
    block: &IaBlock,
) -> Result<(Var, Var)> {
    same_shape(tape, "update_shape_codes", f_i_new, f_pa)?;
    same_shape(tape, "update_shape_codes", f_pa, f_pb)?;
    let x = tape.concat(&[f_i_new, f_pa, f_pb])?;
    let h = block.update.0.forward(tape, store, x)?;
    let out = block.update.1.forward(tape, store, h)?;
    tape.split_half(out)
}

/// Full IA block: returns `(F_i_next, F_pa_next, F_pb_next)`.
pub fn ia_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    f_i: Var,
    f_pa: Var,
    f_pb: Var,
    block: &IaBlock,
) -> Result<(Var, Var, Var)> {
    let a_p = pose_attention(tape, store, f_pa, f_pb, block)?;
    let f_i_next = enhance_appearance(tape, f_i, a_p)?;
    let (pa, pb) = update_shape_codes(tape, store, f_i_next, f_pa, f_pb, block)?;
    Ok((f_i_next, pa, pb))
}

/// Upsampling decoder: stride-2 transposed convolutions with instance norm
/// and ReLU, then a stride-1 transposed 3x3 head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub up: Vec<ConvNormRelu>,
    pub head: Conv,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut up = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            up.push(ConvNormRelu::new(
                store,
                &format!("{name}.up{i}"),
                ConvSpec::new(pair[0], pair[1], 4, 2, 1),
                true,
                rng,
            )?);
        }
        let last = *widths.last().expect("decoder widths");
        let head = Conv::transposed(
            store,
            &format!("{name}.head"),
            ConvSpec::new(last, out_channels, 3, 1, 1),
            rng,
        )?;
        Ok(Self { up, head })
    }

    /// Pre-activation output.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.up {
            h = layer.forward(tape, store, h)?;
        }
        self.head.forward(tape, store, h)
    }
}

/// Decoders of the fusion head. The attention decoder is absent when fusion
/// is disabled, in which case the intermediate image is the output.
#[derive(Clone, Debug)]
pub struct Aif {
    pub image_decoder: Decoder,
    pub attention_decoder: Option<Decoder>,
}

/// Intermediate image, mask and fused output of the fusion head.
#[derive(Clone, Copy, Debug)]
pub struct AifOutput {
    pub fused: Var,
    pub intermediate: Var,
    pub mask: Option<Var>,
}

impl Aif {
    /// `upsamples` stride-2 stages from `channels` wide codes.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        channels: usize,
        upsamples: usize,
        use_aif: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let widths = |start: usize| -> Vec<usize> {
            (0..=upsamples).map(|i| (start >> i).max(2)).collect()
        };
        let image_decoder = Decoder::new(store, "aif.image_decoder", &widths(channels), 3, rng)?;
        let attention_decoder = if use_aif {
            let mut w = widths(channels / 2);
            w[0] = channels;
            Some(Decoder::new(store, "aif.attention_decoder", &w, 1, rng)?)
        } else {
            None
        };
        Ok(Self {
            image_decoder,
            attention_decoder,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_i: Var,
        i_a: Var,
    ) -> Result<AifOutput> {
        let raw = self.image_decoder.forward(tape, store, f_i)?;
        let intermediate = tape.tanh(raw);
        let Some(att) = &self.attention_decoder else {
            return Ok(AifOutput {
                fused: intermediate,
                intermediate,
                mask: None,
            });
        };
        let logits = att.forward(tape, store, f_i)?;
        let mask = tape.sigmoid(logits);
        let fused = attention_fuse(tape, i_a, intermediate, mask)?;
        Ok(AifOutput {
            fused,
            intermediate,
            mask: Some(mask),
        })
    }
}

/// `I_b' = I_a * A_i + I_b~ * (1 - A_i)` with a single-channel mask broadcast
/// over the image channels.
pub fn attention_fuse<T: Scalar>(tape: &mut Tape<T>, i_a: Var, i_b_tilde: Var, a_i: Var) -> Result<Var> {
    same_shape(tape, "attention_fuse", i_a, i_b_tilde)?;
    let (b, c, h, w) = tape.value(i_a).dims4()?;
    if tape.shape(a_i) != [b, 1, h, w] {
        return shape_err("attention_fuse mask", tape.shape(a_i), &[b, 1, h, w]);
    }
    if let Some(v) = tape
        .value(a_i)
        .data()
        .iter()
        .find(|v| !(**v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::Contract(format!("fusion mask value {v} outside [0, 1]")));
    }
    let mask = tape.broadcast_channels(a_i, c)?;
    let keep = tape.mul(i_a, mask)?;
    let inv = tape.one_minus(mask);
    let fill = tape.mul(i_b_tilde, inv)?;
    tape.add(keep, fill)
}
