//! Parameterised layers shared by the generator and discriminators.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution or transposed convolution with an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

/// Geometry of a [`Conv`] layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            bias: true,
        }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self {
            bias: false,
            ..Self::new(c_in, c_out, 1, 1, 0)
        }
    }

    pub fn no_bias(self) -> Self {
        Self { bias: false, ..self }
    }
}

impl Conv {
    /// Weight `[c_out, c_in, k, k]`, fan-in uniform init, zero bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let k = spec.kernel;
        let weight = store.insert_fan_in(
            format!("{name}.weight"),
            &[spec.c_out, spec.c_in, k, k],
            spec.c_in * k * k,
            rng,
        )?;
        Self::finish(store, name, spec, weight, false)
    }

    /// Weight `[c_in, c_out, k, k]`.
    pub fn transposed<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let k = spec.kernel;
        let weight = store.insert_fan_in(
            format!("{name}.weight"),
            &[spec.c_in, spec.c_out, k, k],
            spec.c_out * k * k,
            rng,
        )?;
        Self::finish(store, name, spec, weight, true)
    }

    fn finish<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        weight: ParamId,
        transposed: bool,
    ) -> Result<Self> {
        let bias = if spec.bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[spec.c_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
            transposed,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        if self.transposed {
            tape.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            tape.conv2d(x, w, b, self.stride, self.pad)
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Per-channel affine instance normalisation.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.instance_norm(x, g, b)
    }
}

/// Convolution followed by instance norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv,
    pub norm: InstanceNorm,
}

impl ConvNormRelu {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        transposed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        // the norm's shift makes a conv bias redundant
        let spec = spec.no_bias();
        let conv = if transposed {
            Conv::transposed(store, &format!("{name}.conv"), spec, rng)?
        } else {
            Conv::new(store, &format!("{name}.conv"), spec, rng)?
        };
        let norm = InstanceNorm::new(store, &format!("{name}.norm"), spec.c_out)?;
        Ok(Self { conv, norm })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.norm.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend([self.norm.gamma, self.norm.beta]);
        p
    }
}
