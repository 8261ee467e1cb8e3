//! Adversarial training: one generator step, then one step for each
//! discriminator, every iteration.

mod adam;
mod config;
mod eval;
mod run;

pub use adam::{Adam, AdamConfig};
pub use config::TrainConfig;
pub use eval::{evaluate, generate, EvalReport, Generated, MaskStats, PairMetrics};
pub use run::{
    ablate, evaluate_checkpoint, infer, load_model, save_model, train, AblationEntry, CheckpointInfo,
    InferOutput, SampleSource, TrainOutcome, CHECKPOINT_DIR, CHECKPOINT_INFO, CONFIG_FILE, EVAL_FILE,
    LOSS_CSV,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{derive_seed, worker_threads, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{discriminate, Discriminators, Generator, PatchDiscriminator};
use crate::objectives::{
    adversarial_loss, full_objective, l1_loss, perceptual_loss, Components, GanReduction, PerceptualExtractor,
    Side,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GENERATOR_STREAM: u64 = 0x6E;
const DISCRIMINATOR_STREAM: u64 = 0xD1;

/// Generator, both discriminators and their parameter stores.
#[derive(Debug)]
pub struct Model<T> {
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub gen_store: ParamStore<T>,
    pub app_store: ParamStore<T>,
    pub shape_store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized networks, seeded from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut gen_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, GENERATOR_STREAM]));
        let generator = Generator::new(config.generator(), &mut gen_store, &mut rng)?;
        let (mut app_store, mut shape_store) = (ParamStore::new(), ParamStore::new());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, DISCRIMINATOR_STREAM]));
        let discriminators = Discriminators::new(
            &mut app_store,
            &mut shape_store,
            config.disc_width,
            config.disc_layers,
            &mut rng,
        )?;
        Ok(Self {
            generator,
            discriminators,
            gen_store,
            app_store,
            shape_store,
        })
    }

    /// Hash over all three stores.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}:{}:{}",
            self.gen_store.fingerprint(),
            self.app_store.fingerprint(),
            self.shape_store.fingerprint()
        )
    }
}

/// One CSV row of per-step losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub gan_g: f64,
    pub gan_d_app: f64,
    pub gan_d_shape: f64,
    pub l1: f64,
    pub per: f64,
    pub full: f64,
}

impl LossRow {
    pub const HEADER: &'static str = "step,L_gan_G,L_gan_D_app,L_gan_D_shape,L_l1,L_per,L_full";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.gan_g, self.gan_d_app, self.gan_d_shape, self.l1, self.per, self.full
        )
    }
}

/// Batch tensors placed on a tape as constants.
pub(crate) struct BatchVars {
    pub i_a: Var,
    pub p_a: Var,
    pub i_b: Var,
    pub p_b: Var,
}

pub(crate) fn batch_vars<T: Scalar>(tape: &mut Tape<T>, batch: &Batch) -> BatchVars {
    BatchVars {
        i_a: tape.constant(batch.i_a.cast()),
        p_a: tape.constant(batch.p_a.cast()),
        i_b: tape.constant(batch.i_b.cast()),
        p_b: tape.constant(batch.p_b.cast()),
    }
}

/// Mutable training state over a [`Model`].
#[derive(Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub model: Model<T>,
    pub extractor: PerceptualExtractor<T>,
    adam_gen: Adam<T>,
    adam_app: Adam<T>,
    adam_shape: Adam<T>,
    step: usize,
    threads: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = Model::new(&config)?;
        let dataset = Dataset::new(config.data())?;
        let extractor = PerceptualExtractor::new(config.perceptual_seed)?;
        let adam = AdamConfig {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
        };
        Ok(Self {
            adam_gen: Adam::new(adam, &model.gen_store),
            adam_app: Adam::new(adam, &model.app_store),
            adam_shape: Adam::new(adam, &model.shape_store),
            config,
            dataset,
            model,
            extractor,
            step: 0,
            threads: worker_threads(),
        })
    }

    /// Completed steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Training batch of step `s`: consecutive train indices, so identities
    /// cycle and every step sees fresh poses.
    pub fn batch_for(&self, s: usize) -> Result<Batch> {
        let b = self.config.batch_size;
        let idx: Vec<usize> = (s * b..(s + 1) * b).collect();
        self.dataset.batch(Split::Train, &idx, self.threads)
    }

    pub fn step(&mut self) -> Result<LossRow> {
        let batch = self.batch_for(self.step)?;
        self.step_on(&batch)
    }

    /// Generator update, then appearance and shape discriminator updates on
    /// the (detached) images the generator produced before its update.
    pub fn step_on(&mut self, batch: &Batch) -> Result<LossRow> {
        let g = self.generator_step(batch)?;
        let (gan_d_app, gan_d_shape) = self.discriminator_steps(batch, &g.fake)?;
        self.step += 1;
        Ok(LossRow {
            step: self.step,
            gan_g: g.gan,
            gan_d_app,
            gan_d_shape,
            l1: g.l1,
            per: g.per,
            full: g.full,
        })
    }

    /// Minimize the full objective over the generator parameters only; the
    /// discriminators are read but frozen.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<GeneratorStep<T>> {
        let step = self.step + 1;
        let m = &mut self.model;
        let mut tape = Tape::new();
        tape.freeze(&m.app_store);
        tape.freeze(&m.shape_store);
        let v = batch_vars(&mut tape, batch);
        let out = m.generator.forward(&mut tape, &m.gen_store, v.i_a, v.p_a, v.p_b)?;
        let fake = out.image;
        let pair_app = tape.concat(&[v.i_a, fake])?;
        let pair_shape = tape.concat(&[v.p_b, fake])?;
        let s_app = discriminate(&mut tape, &m.app_store, pair_app, &m.discriminators.appearance)?;
        let s_shape = discriminate(&mut tape, &m.shape_store, pair_shape, &m.discriminators.shape)?;
        let g_app = adversarial_loss(&mut tape, None, s_app, Side::Generator)?;
        let g_shape = adversarial_loss(&mut tape, None, s_shape, Side::Generator)?;
        let both = tape.add(g_app, g_shape)?;
        let gan = match self.config.gan_reduction {
            GanReduction::Average => tape.scale(both, T::of(0.5)),
            GanReduction::Sum => both,
        };
        let l1 = l1_loss(&mut tape, fake, v.i_b)?;
        let per = perceptual_loss(&mut tape, fake, v.i_b, &self.extractor)?;
        let full = full_objective(&mut tape, Components { gan, l1, per }, &self.config.loss_weights(), step)?;
        tape.backward(full)?;
        m.gen_store.zero_grad();
        m.gen_store.accumulate_grads(&tape);
        self.adam_gen.step(&mut m.gen_store);
        let scalar = |v: Var| tape.value(v).item().as_f64();
        Ok(GeneratorStep {
            gan: scalar(gan),
            l1: scalar(l1),
            per: scalar(per),
            full: scalar(full),
            fake: tape.value(fake).clone(),
        })
    }

    /// One update of each discriminator on real pairs against `fake`.
    /// Returns the appearance and shape discriminator losses.
    pub fn discriminator_steps(&mut self, batch: &Batch, fake: &Tensor<T>) -> Result<(f64, f64)> {
        let step = self.step + 1;
        let m = &mut self.model;
        let app = discriminator_step(
            &m.discriminators.appearance,
            &mut m.app_store,
            &mut self.adam_app,
            &batch.i_a,
            &batch.i_b,
            fake,
            "L_gan_D_app",
            step,
        )?;
        let shape = discriminator_step(
            &m.discriminators.shape,
            &mut m.shape_store,
            &mut self.adam_shape,
            &batch.p_b,
            &batch.i_b,
            fake,
            "L_gan_D_shape",
            step,
        )?;
        Ok((app, shape))
    }
}

/// Losses of a generator update and the images it was computed on.
#[derive(Clone, Debug)]
pub struct GeneratorStep<T> {
    pub gan: f64,
    pub l1: f64,
    pub per: f64,
    pub full: f64,
    pub fake: Tensor<T>,
}

/// One update of a discriminator on `[cond, real]` against `[cond, fake]`.
#[allow(clippy::too_many_arguments)]
fn discriminator_step<T: Scalar>(
    disc: &PatchDiscriminator,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    cond: &Tensor<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<T>,
    name: &str,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(cond.cast());
    let r = tape.constant(real.cast());
    let f = tape.constant(fake.clone());
    let pr = tape.concat(&[c, r])?;
    let pf = tape.concat(&[c, f])?;
    let sr = discriminate(&mut tape, store, pr, disc)?;
    let sf = discriminate(&mut tape, store, pf, disc)?;
    let loss = adversarial_loss(&mut tape, Some(sr), sf, Side::Discriminator)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            component: name.into(),
            step,
        });
    }
    tape.backward(loss)?;
    store.zero_grad();
    store.accumulate_grads(&tape);
    adam.step(store);
    Ok(value)
}
