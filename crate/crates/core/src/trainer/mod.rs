//! Pretraining loop: fresh block masks every step, cached frozen-teacher
//! targets, AdamW under warmup plus cosine decay, CSV metrics and
//! checkpoints.

mod cache;
mod objective;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::generate_mask;
use crate::model::{save_checkpoint, Bound, ModelParams};
use crate::rng;
use crate::teacher::FrozenTeacher;
use crate::tensor::{Scalar, Tape, Tensor};

pub use cache::TeacherCache;
pub use objective::{sample_loss, SampleLoss, StepPath};
pub use optim::{lr_at, scaled_lr, AdamW, AdamWConfig, ADAM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            batch_size: 4096,
            warmup_epochs: 40.0,
            total_epochs: 1600,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("train.{field}"), msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr", format!("{} must be positive", self.base_lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.total_epochs == 0 {
            return fail("total_epochs", "must be at least 1".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            return fail(
                "warmup_epochs",
                format!("{} must lie in [0, total_epochs)", self.warmup_epochs),
            );
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", format!("{} must be non-negative", self.weight_decay));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(field, format!("{b} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.base_lr, self.batch_size)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: ADAM_EPS,
            weight_decay: self.weight_decay,
        }
    }
}

/// Weight decay applies to matrices only; biases, norm gains and tokens are exempt.
pub fn decays<T: Scalar>(_name: &str, t: &Tensor<T>) -> bool {
    t.rank() >= 2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_patch: f64,
    pub l_global: f64,
    pub l_total: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,L_patch,L_global,L_total";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.l_patch, self.l_global, self.l_total
        )
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step}.bin"))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

struct StepResult {
    grads: std::collections::BTreeMap<String, Tensor>,
    patch: f64,
    global: f64,
    total: f64,
}

pub fn train(cfg: &RunConfig, images: &[(String, Tensor)], out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    train_with(cfg, images, out_dir, StepPath::Full)
}

/// Runs the whole schedule. Identical inputs give identical metrics and
/// checkpoints for any thread count: each image's gradient is computed on
/// its own tape and the batch sum runs in batch order.
pub fn train_with(
    cfg: &RunConfig,
    images: &[(String, Tensor)],
    out_dir: impl AsRef<Path>,
    path: StepPath,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    if images.is_empty() {
        return Err(Error::Format("no training images".into()));
    }
    let m = &cfg.model;
    let expected = [m.in_channels, m.image_side, m.image_side];
    if let Some((id, img)) = images.iter().find(|(_, img)| img.shape() != expected) {
        return Err(Error::Dimension(format!(
            "image `{id}` is {:?}, model expects {expected:?}",
            img.shape()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let teacher = FrozenTeacher::new(&cfg.teacher, m.in_channels)?;
    let (cache, keys) = TeacherCache::build(&teacher, images, m.patch_side)?;

    let t = &cfg.train;
    let mut params: ModelParams = ModelParams::init(m, t.seed)?;
    let mut opt = AdamW::new(t.adamw());
    let steps_per_epoch = images.len().div_ceil(t.batch_size);
    let total_steps = steps_per_epoch * t.total_epochs;
    let peak = t.peak_lr();

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let mut metrics = Vec::with_capacity(total_steps);
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for epoch in 0..t.total_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::derive(t.seed, &[epoch as u64]), "shuffle"));
        for batch in order.chunks(t.batch_size) {
            let lr = lr_at(
                step as f64 / steps_per_epoch as f64,
                peak,
                t.warmup_epochs,
                t.total_epochs as f64,
            );
            let scale = 1.0 / batch.len() as f32;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let spec = cfg
                        .mask
                        .with_seed(rng::derive(cfg.mask.seed, &[step as u64, slot as u64]));
                    let mask = generate_mask(&spec)?;
                    let targets = &cache.get(&keys[i]).expect("cached").tokens;
                    let tape = Tape::new();
                    let bound = Bound::new(&params, &tape)?;
                    let loss = sample_loss(&bound, &images[i].1, targets, &mask, &cfg.loss, path)?;
                    let grads = tape.backward(loss.total.scale(scale))?.into_params();
                    Ok(StepResult {
                        grads,
                        patch: loss.patch.item().as_f64(),
                        global: loss.global.map_or(0.0, |g| g.item().as_f64()),
                        total: loss.total.item().as_f64(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;

            let mut grads = results[0].grads.clone();
            for r in &results[1..] {
                for (name, g) in &r.grads {
                    let acc = grads.get_mut(name).expect("same parameter set");
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b);
                }
            }
            let n = results.len() as f64;
            let mean = |f: fn(&StepResult) -> f64| results.iter().map(f).sum::<f64>() / n;
            let row = MetricRow {
                step,
                epoch,
                lr,
                l_patch: mean(|r| r.patch),
                l_global: mean(|r| r.global),
                l_total: mean(|r| r.total),
            };
            if ![row.l_patch, row.l_global, row.l_total].iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            opt.step(params.iter_mut(), &grads, lr, decays)?;
            writeln!(csv, "{}", row.csv()).expect("string write");
            metrics.push(row);
            step += 1;
            if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
                let p = checkpoint_path(out_dir, step);
                save_checkpoint(&p, &params)?;
                checkpoints.push(p);
            }
        }
    }
    if checkpoints.last() != Some(&checkpoint_path(out_dir, step)) {
        let p = checkpoint_path(out_dir, step);
        save_checkpoint(&p, &params)?;
        checkpoints.push(p);
    }
    fs::write(&metrics_path, csv).map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainOutcome {
        params,
        metrics,
        checkpoints,
        metrics_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub lambda: f64,
    pub last: MetricRow,
}

pub const ABLATION_HEADER: &str = "lambda,L_patch,L_global,L_total";

/// Trains once per `λ` with the shared seed into `out/lambda_<i>/`, then
/// writes the final-step losses to `out/ablation.csv`.
pub fn ablate_lambda(
    cfg: &RunConfig,
    lambdas: &[f64],
    images: &[(String, Tensor)],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<AblationRow>> {
    if lambdas.len() < 2 {
        return Err(Error::config("lambdas", "a sweep needs at least two values"));
    }
    for &l in lambdas {
        crate::losses::LossConfig { lambda: l, ..cfg.loss }
            .validate()
            .map_err(|_| Error::config("lambdas", format!("{l} must be non-negative")))?;
    }
    let out_dir = out_dir.as_ref();
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut csv = format!("{ABLATION_HEADER}\n");
    for (i, &lambda) in lambdas.iter().enumerate() {
        let mut run = cfg.clone();
        run.loss.lambda = lambda;
        let outcome = train(&run, images, out_dir.join(format!("lambda_{i}")))?;
        let last = *outcome.metrics.last().expect("at least one step");
        writeln!(csv, "{lambda},{},{},{}", last.l_patch, last.l_global, last.l_total).expect("string write");
        rows.push(AblationRow { lambda, last });
    }
    let path = out_dir.join("ablation.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
