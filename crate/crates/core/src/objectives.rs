//! Training objective: adversarial, pixel L1 and perceptual terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, ConvSpec};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Which player the adversarial loss is computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Non-saturating cross-entropy on patch logits.
///
/// Generator side: `mean softplus(-fake)`, i.e. fakes labelled real.
/// Discriminator side: `(mean softplus(-real) + mean softplus(fake)) / 2`.
pub fn adversarial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    real: Option<Var>,
    fake: Var,
    side: Side,
) -> Result<Var> {
    if tape.value(fake).numel() == 0 || real.is_some_and(|r| tape.value(r).numel() == 0) {
        return Err(Error::Contract("empty score map".into()));
    }
    match side {
        Side::Generator => {
            let n = tape.neg(fake);
            let sp = tape.softplus(n);
            tape.mean(sp)
        }
        Side::Discriminator => {
            let real = real.ok_or_else(|| {
                Error::Contract("discriminator loss needs real scores".into())
            })?;
            let n = tape.neg(real);
            let sr = tape.softplus(n);
            let lr = tape.mean(sr)?;
            let sf = tape.softplus(fake);
            let lf = tape.mean(sf)?;
            let s = tape.add(lr, lf)?;
            Ok(tape.scale(s, T::of(0.5)))
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return shape_err("l1_loss", tape.shape(x), tape.shape(y));
    }
    let d = tape.sub(x, y)?;
    let a = tape.abs(d);
    tape.mean(a)
}

/// Frozen two-layer 3x3 conv + ReLU feature extractor with fixed random
/// weights. It owns its parameter store, which never receives updates.
#[derive(Debug)]
pub struct PerceptualExtractor<T> {
    store: ParamStore<T>,
    layers: [Conv; 2],
}

pub const PERCEPTUAL_WIDTH: usize = 16;

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = PERCEPTUAL_WIDTH;
        let layers = [
            Conv::new(&mut store, "perceptual.conv0", ConvSpec::new(3, w, 3, 1, 1), &mut rng)?,
            Conv::new(&mut store, "perceptual.conv1", ConvSpec::new(w, w, 3, 1, 1), &mut rng)?,
        ];
        Ok(Self { store, layers })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.freeze(&self.store);
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, &self.store, h)?;
            h = tape.relu(h);
        }
        Ok(h)
    }
}

/// Mean absolute difference of extractor features.
pub fn perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return shape_err("perceptual_loss", tape.shape(x), tape.shape(y));
    }
    let fx = extractor.features(tape, x)?;
    let fy = extractor.features(tape, y)?;
    l1_loss(tape, fx, fy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_l1: f64,
    pub lambda_per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 5.0,
            lambda_l1: 10.0,
            lambda_per: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_l1", self.lambda_l1),
            ("lambda_per", self.lambda_per),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the two discriminators' generator-side terms enter `L_gan`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanReduction {
    #[default]
    Average,
    Sum,
}

/// Scalar loss nodes feeding the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct Components {
    pub gan: Var,
    pub l1: Var,
    pub per: Var,
}

/// `lambda_gan L_gan + lambda_l1 L_l1 + lambda_per L_per`. Any non-finite
/// component aborts with an error naming it.
pub fn full_objective<T: Scalar>(
    tape: &mut Tape<T>,
    c: Components,
    weights: &LossWeights,
    step: usize,
) -> Result<Var> {
    weights.validate()?;
    for (name, v) in [("L_gan", c.gan), ("L_l1", c.l1), ("L_per", c.per)] {
        if !tape.value(v).all_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step,
            });
        }
    }
    let g = tape.scale(c.gan, T::of(weights.lambda_gan));
    let l = tape.scale(c.l1, T::of(weights.lambda_l1));
    let p = tape.scale(c.per, T::of(weights.lambda_per));
    let s = tape.add(g, l)?;
    tape.add(s, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_scores_give_ln2() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::zeros(&[2, 1, 3, 2]));
        let g = adversarial_loss(&mut t, None, z, Side::Generator).unwrap();
        let d = adversarial_loss(&mut t, Some(z), z, Side::Discriminator).unwrap();
        assert!((t.value(g).item() - 2f64.ln()).abs() < 1e-15);
        assert!((t.value(d).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn discriminator_needs_real_scores() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(adversarial_loss(&mut t, None, z, Side::Discriminator).is_err());
        let e = t.constant(Tensor::zeros(&[0]));
        assert!(adversarial_loss(&mut t, None, e, Side::Generator).is_err());
    }

    #[test]
    fn unit_components_weighted_sum() {
        let mut t = Tape::<f64>::new();
        let one = t.constant(Tensor::scalar(1.0));
        let c = Components { gan: one, l1: one, per: one };
        let f = full_objective(&mut t, c, &LossWeights::default(), 0).unwrap();
        assert_eq!(t.value(f).item(), 25.0);
    }

    #[test]
    fn nan_component_is_named() {
        let mut t = Tape::<f64>::new();
        let one = t.constant(Tensor::scalar(1.0));
        let nan = t.constant(Tensor::scalar(f64::NAN));
        let c = Components { gan: one, l1: one, per: nan };
        match full_objective(&mut t, c, &LossWeights::default(), 7) {
            Err(Error::NonFinite { component, step }) => {
                assert_eq!(component, "L_per");
                assert_eq!(step, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extractor_weights_receive_no_gradient() {
        let ex = PerceptualExtractor::<f64>::new(5).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.3).sin()), true);
        let y = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let l = perceptual_loss(&mut t, x, y, &ex).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(x).is_some());
        for id in t.params_used(ex.store()) {
            let v = t.param_var(ex.store(), id).unwrap();
            assert!(!t.requires_grad(v));
        }
    }
}
