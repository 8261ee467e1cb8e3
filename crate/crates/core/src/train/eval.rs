//! Held-out evaluation of a generator.

use serde::{Deserialize, Serialize};

use super::{batch_vars, Model};
use crate::autodiff::Tape;
use crate::data::{Batch, Dataset, Split};
use crate::error::Result;
use crate::metrics::{keypoint_error, mask_ssim, ssim, to_unit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Generator outputs for one batch.
#[derive(Clone, Debug)]
pub struct Generated<T> {
    /// `I_b'`, `[b, 3, h, w]`.
    pub image: Tensor<T>,
    /// `I_b~`, `[b, 3, h, w]`.
    pub intermediate: Tensor<T>,
    /// `A_i`, `[b, 1, h, w]`, when fusion is enabled.
    pub mask: Option<Tensor<T>>,
}

/// Forward pass without parameter updates.
pub fn generate<T: Scalar>(model: &Model<T>, batch: &Batch) -> Result<Generated<T>> {
    let mut tape = Tape::new();
    tape.freeze(&model.gen_store);
    let v = batch_vars(&mut tape, batch);
    let out = model
        .generator
        .forward(&mut tape, &model.gen_store, v.i_a, v.p_a, v.p_b)?;
    Ok(Generated {
        image: tape.value(out.image).clone(),
        intermediate: tape.value(out.intermediate).clone(),
        mask: out.mask.map(|m| tape.value(m).clone()),
    })
}

/// Quality of one candidate image against the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub ssim: f64,
    pub mask_ssim: f64,
    pub keypoint_error: f64,
    /// Mean absolute difference in `[-1, 1]` image units.
    pub l1: f64,
}

impl PairMetrics {
    fn of<T: Scalar>(candidate: &Tensor<T>, target: &Tensor<f32>, mask: &Tensor<f32>, joints: &[[usize; 2]; 18]) -> Result<Self> {
        let (x, y) = (to_unit(candidate), to_unit(target));
        let m = mask.cast::<f64>();
        let l1 = candidate
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a.as_f64() - *b as f64).abs())
            .sum::<f64>()
            / target.numel() as f64;
        Ok(Self {
            ssim: ssim(&x, &y)?,
            mask_ssim: mask_ssim(&x, &y, &m)?,
            keypoint_error: keypoint_error(candidate, joints),
            l1,
        })
    }

    fn add(&mut self, o: &Self) {
        self.ssim += o.ssim;
        self.mask_ssim += o.mask_ssim;
        self.keypoint_error += o.keypoint_error;
        self.l1 += o.l1;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            ssim: self.ssim * s,
            mask_ssim: self.mask_ssim * s,
            keypoint_error: self.keypoint_error * s,
            l1: self.l1 * s,
        }
    }
}

/// Statistics of the fusion mask `A_i` (the weight on the source image).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub mean: f64,
    /// Mean over pixels of the target figure.
    pub foreground_mean: f64,
    pub background_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ssim: f64,
    pub mask_ssim: f64,
    /// Fraction of joints re-detected within tolerance (higher is better).
    pub keypoint_error: f64,
    pub l1: f64,
    pub n_samples: usize,
    pub config_hash: String,
    /// The same metrics for the source image used as the prediction.
    pub copy_source: PairMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_stats: Option<MaskStats>,
}

#[derive(Default)]
struct Partial {
    generated: PairMetrics,
    copy: PairMetrics,
    mask_sum: f64,
    fg_sum: f64,
    fg_count: f64,
    bg_sum: f64,
    bg_count: f64,
}

fn evaluate_batch<T: Scalar>(model: &Model<T>, batch: &Batch) -> Result<Vec<Partial>> {
    let g = generate(model, batch)?;
    (0..batch.len())
        .map(|i| {
            let target = batch.i_b.sample(i).reshape_rank3();
            let mask = batch.mask_b.sample(i).reshape_rank3();
            let source = batch.i_a.sample(i).reshape_rank3();
            let mut p = Partial {
                generated: PairMetrics::of(&g.image.sample(i).reshape_rank3(), &target, &mask, &batch.joints_b[i])?,
                copy: PairMetrics::of(&source, &target, &mask, &batch.joints_b[i])?,
                ..Partial::default()
            };
            if let Some(a) = &g.mask {
                let a = a.sample(i);
                for (v, m) in a.data().iter().zip(mask.data()) {
                    let v = v.as_f64();
                    p.mask_sum += v;
                    if *m > 0.5 {
                        p.fg_sum += v;
                        p.fg_count += 1.0;
                    } else {
                        p.bg_sum += v;
                        p.bg_count += 1.0;
                    }
                }
            }
            Ok(p)
        })
        .collect()
}

trait Rank3 {
    fn reshape_rank3(self) -> Self;
}

impl<T: Scalar> Rank3 for Tensor<T> {
    fn reshape_rank3(self) -> Self {
        let s = self.shape()[1..].to_vec();
        self.reshape(&s).expect("dropping a unit axis")
    }
}

/// Metrics over samples `0..n` of `split`, in batches of `batch_size`
/// spread over up to `threads` workers. Sums are taken in sample order, so
/// the report does not depend on the thread count.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    split: Split,
    n: usize,
    batch_size: usize,
    threads: usize,
    config_hash: &str,
) -> Result<EvalReport> {
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    let threads = threads.clamp(1, chunks.len().max(1));
    let run = |c: &Vec<usize>| -> Result<Vec<Partial>> {
        let batch = data.batch(split, c, 1)?;
        evaluate_batch(model, &batch)
    };
    let results: Vec<Result<Vec<Partial>>> = if threads == 1 {
        chunks.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Partial>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let chunks = &chunks;
                    let run = &run;
                    s.spawn(move || {
                        (t..chunks.len())
                            .step_by(threads)
                            .map(|i| (i, run(&chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };

    let mut gen = PairMetrics::default();
    let mut copy = PairMetrics::default();
    let (mut ms, mut fs, mut fc, mut bs, mut bc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut count = 0usize;
    let mut pixels = 0.0;
    for r in results {
        for p in r? {
            gen.add(&p.generated);
            copy.add(&p.copy);
            ms += p.mask_sum;
            fs += p.fg_sum;
            fc += p.fg_count;
            bs += p.bg_sum;
            bc += p.bg_count;
            pixels += p.fg_count + p.bg_count;
            count += 1;
        }
    }
    let inv = 1.0 / count.max(1) as f64;
    let gen = gen.scaled(inv);
    let mask_stats = model.generator.config.ablation.use_aif.then(|| MaskStats {
        mean: ms / pixels.max(1.0),
        foreground_mean: fs / fc.max(1.0),
        background_mean: bs / bc.max(1.0),
    });
    Ok(EvalReport {
        ssim: gen.ssim,
        mask_ssim: gen.mask_ssim,
        keypoint_error: gen.keypoint_error,
        l1: gen.l1,
        n_samples: count,
        config_hash: config_hash.to_string(),
        copy_source: copy.scaled(inv),
        mask_stats,
    })
}
