//! On-disk runs: training with checkpoints and loss logs, evaluation and
//! inference from a checkpoint, and the ablation sweep.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, generate, EvalReport, LossRow, Model, TrainConfig, Trainer};
use crate::data::io::{read_record, write_gray_png, write_rgb_png};
use crate::data::{worker_threads, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::params::{load_checkpoint, save_checkpoint};

pub const LOSS_CSV: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_INFO: &str = "checkpoint.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub step: usize,
    pub config_hash: String,
}

/// Write all parameters, the configuration and the step into `dir`.
///
/// The new checkpoint is assembled next to `dir` and moved into place only
/// once complete, so a failure never leaves a half-written checkpoint.
pub fn save_model(dir: &Path, model: &Model<f32>, config: &TrainConfig, step: usize) -> Result<()> {
    let staging = dir.with_extension("tmp");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    save_checkpoint(&staging, &[&model.gen_store, &model.app_store, &model.shape_store])?;
    fs::write(staging.join(CONFIG_FILE), config.to_toml())?;
    let info = CheckpointInfo {
        step,
        config_hash: config.hash(),
    };
    fs::write(staging.join(CHECKPOINT_INFO), serde_json::to_vec_pretty(&info)?)?;
    let old = dir.with_extension("old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
    }
    fs::rename(&staging, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

/// Rebuild the networks described by the checkpoint's configuration and
/// fill them with its parameters.
pub fn load_model(dir: &Path) -> Result<(TrainConfig, Model<f32>)> {
    let config = TrainConfig::load(&dir.join(CONFIG_FILE))
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", dir.join(CONFIG_FILE).display())))?;
    let mut model = Model::new(&config)?;
    load_checkpoint(dir, &mut [&mut model.gen_store, &mut model.app_store, &mut model.shape_store])?;
    Ok((config, model))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<LossRow>,
    pub report: EvalReport,
    pub run_dir: PathBuf,
    pub generator_params: usize,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Train from scratch into `config.output_dir`:
///
/// ```text
/// config.toml   copy of the configuration
/// losses.csv    one row per step
/// checkpoint/   parameters (manifest.json + one .bin per tensor)
/// eval.json     held-out report after the last step
/// ```
///
/// A non-finite loss aborts the run with an error and leaves the last
/// saved checkpoint untouched.
pub fn train(config: &TrainConfig, mut on_row: impl FnMut(&LossRow)) -> Result<TrainOutcome> {
    config.validate()?;
    let run_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), config.to_toml())?;
    let checkpoint = run_dir.join(CHECKPOINT_DIR);
    let hash = config.hash();

    let mut trainer = Trainer::<f32>::new(config.clone())?;
    save_model(&checkpoint, &trainer.model, config, 0)?;
    let mut csv = BufWriter::new(File::create(run_dir.join(LOSS_CSV))?);
    writeln!(csv, "{}", LossRow::HEADER)?;

    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e) => {
                csv.flush()?;
                return Err(e);
            }
        };
        writeln!(csv, "{}", row.csv())?;
        on_row(&row);
        losses.push(row);
        let s = row.step;
        if config.checkpoint_every > 0 && s % config.checkpoint_every == 0 && s < config.steps {
            csv.flush()?;
            save_model(&checkpoint, &trainer.model, config, s)?;
        }
        if config.eval_every > 0 && s % config.eval_every == 0 && s < config.steps {
            let report = evaluate_model(&trainer.model, &trainer.dataset, config, &hash)?;
            write_json(&run_dir.join(format!("eval_step{s}.json")), &report)?;
        }
    }
    csv.flush()?;
    save_model(&checkpoint, &trainer.model, config, trainer.steps_done())?;
    let report = evaluate_model(&trainer.model, &trainer.dataset, config, &hash)?;
    write_json(&run_dir.join(EVAL_FILE), &report)?;
    Ok(TrainOutcome {
        losses,
        report,
        run_dir,
        generator_params: trainer.model.gen_store.num_scalars(),
    })
}

fn evaluate_model(model: &Model<f32>, data: &Dataset, config: &TrainConfig, hash: &str) -> Result<EvalReport> {
    evaluate(
        model,
        data,
        Split::Test,
        config.eval_samples,
        config.batch_size,
        worker_threads(),
        hash,
    )
}

/// Evaluate a saved checkpoint on `split`; the sample count defaults to the
/// configuration's `eval_samples`.
pub fn evaluate_checkpoint(dir: &Path, split: Split, n: Option<usize>) -> Result<EvalReport> {
    let (config, model) = load_model(dir)?;
    let data = Dataset::new(config.data())?;
    evaluate(
        &model,
        &data,
        split,
        n.unwrap_or(config.eval_samples),
        config.batch_size,
        worker_threads(),
        &config.hash(),
    )
}

/// Which sample `infer` should run on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SampleSource {
    /// Index into the checkpoint's held-out split.
    Index(usize),
    /// A per-sample JSON record as written by `datagen`.
    File(PathBuf),
}

impl FromStr for SampleSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.parse::<usize>() {
            Ok(i) => SampleSource::Index(i),
            Err(_) => SampleSource::File(PathBuf::from(s)),
        })
    }
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub output: PathBuf,
    pub intermediate: PathBuf,
    pub mask: Option<PathBuf>,
    pub source: PathBuf,
    pub target: PathBuf,
}

/// Generate one target image and write `output.png` (`I_b'`),
/// `intermediate.png` (`I_b~`), `mask.png` (`A_i`, with fusion only) and the
/// `source.png` / `target.png` references into `out`.
pub fn infer(checkpoint: &Path, sample: &SampleSource, out: &Path) -> Result<InferOutput> {
    let (config, model) = load_model(checkpoint)?;
    let s = match sample {
        SampleSource::Index(i) => Dataset::new(config.data())?.sample(Split::Test, *i)?,
        SampleSource::File(path) => {
            let record = read_record(path)?;
            if (record.height, record.width) != (config.height, config.width) {
                return Err(Error::Config(format!(
                    "sample is {}x{} but the model expects {}x{}",
                    record.height, record.width, config.height, config.width
                )));
            }
            record.render()?
        }
    };
    let batch = Batch::from_samples(std::slice::from_ref(&s))?;
    let g = generate(&model, &batch)?;
    fs::create_dir_all(out)?;
    let first = |t: &crate::tensor::Tensor<f32>| {
        let sh = t.shape()[1..].to_vec();
        t.sample(0).reshape(&sh)
    };
    let paths = InferOutput {
        output: out.join("output.png"),
        intermediate: out.join("intermediate.png"),
        mask: g.mask.as_ref().map(|_| out.join("mask.png")),
        source: out.join("source.png"),
        target: out.join("target.png"),
    };
    write_rgb_png(&paths.output, &first(&g.image)?)?;
    write_rgb_png(&paths.intermediate, &first(&g.intermediate)?)?;
    if let (Some(m), Some(p)) = (&g.mask, &paths.mask) {
        write_gray_png(p, &first(m)?)?;
    }
    write_rgb_png(&paths.source, &s.i_a)?;
    write_rgb_png(&paths.target, &s.i_b)?;
    Ok(paths)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    pub ablation: Ablation,
    pub generator_params: usize,
    pub report: EvalReport,
}

/// Train baselines B1..B6 from `base` with the same seed and data, each in
/// `<output_dir>/B<k>`, and write `ablation.json` and `ablation.csv`.
pub fn ablate(base: &TrainConfig, mut on_row: impl FnMut(&str, &LossRow)) -> Result<Vec<AblationEntry>> {
    base.validate()?;
    let root = PathBuf::from(&base.output_dir);
    let mut entries = Vec::new();
    for k in 1..=6 {
        let name = format!("B{k}");
        let ablation = Ablation::baseline(k)?;
        let mut config = base.clone().with_ablation(ablation);
        config.output_dir = root.join(&name).to_string_lossy().into_owned();
        let outcome = train(&config, |row| on_row(&name, row))?;
        entries.push(AblationEntry {
            name,
            ablation,
            generator_params: outcome.generator_params,
            report: outcome.report,
        });
    }
    write_json(&root.join("ablation.json"), &entries)?;
    let mut table = String::from("baseline,ssim,mask_ssim,keypoint_error,l1,generator_params\n");
    for e in &entries {
        table.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{}\n",
            e.name, e.report.ssim, e.report.mask_ssim, e.report.keypoint_error, e.report.l1, e.generator_params
        ));
    }
    fs::write(root.join("ablation.csv"), table)?;
    Ok(entries)
}
