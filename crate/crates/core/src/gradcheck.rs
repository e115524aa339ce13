//! End-to-end gradient check of the training objective in `f64`.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::{generate_mask, PatchMask};
use crate::model::{Bound, ModelConfig, ModelParams};
use crate::rng;
use crate::teacher::{FrozenTeacher, TeacherSpec};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{sample_loss, StepPath};

pub const MAX_EMBED_DIM: usize = 16;
pub const STEP: f64 = 1e-5;
/// Gradient magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub per_param: BTreeMap<String, f64>,
}

/// A tiny run: 8×8 three-channel images, 4-pixel patches, two encoder
/// layers of width 8, one decoder layer, 16 teacher channels.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            image_side: 8,
            patch_side: 4,
            embed_dim: 8,
            enc_depth: 2,
            enc_heads: 2,
            dec_depth: 1,
            dec_width: 8,
            dec_heads: 2,
            target_dim: 16,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.mask.image_side = 8;
    cfg.mask.patch_side = 4;
    cfg.mask.block_side = 4;
    cfg.mask.mask_ratio = 0.5;
    cfg.teacher = TeacherSpec {
        downsample_rate: 4,
        target_dim: 16,
        ..TeacherSpec::default()
    };
    cfg
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Problem {
    image: Tensor<f64>,
    targets: Tensor<f64>,
    mask: PatchMask,
}

fn problem(cfg: &RunConfig) -> Result<Problem> {
    let m = &cfg.model;
    let mut rng = rng::stream(cfg.train.seed, "gradcheck/image");
    let n = m.in_channels * m.image_side * m.image_side;
    let image: Tensor = Tensor::new(
        vec![m.in_channels, m.image_side, m.image_side],
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )?;
    let teacher = FrozenTeacher::new(&cfg.teacher, m.in_channels)?;
    let targets = teacher.extract("gradcheck", &image, m.patch_side)?.tokens.cast();
    let mask = generate_mask(&cfg.mask.with_seed(cfg.train.seed))?;
    Ok(Problem {
        image: image.cast(),
        targets,
        mask,
    })
}

fn loss_value(cfg: &RunConfig, params: &ModelParams<f64>, p: &Problem) -> Result<f64> {
    let tape = Tape::new();
    let bound = Bound::new(params, &tape)?;
    Ok(
        sample_loss(&bound, &p.image, &p.targets, &p.mask, &cfg.loss, StepPath::Full)?
            .total
            .item(),
    )
}

pub fn grad_check(cfg: &RunConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, |_| {})
}

/// Like [`grad_check`], with `corrupt` applied to the analytic gradients
/// before comparison.
pub fn grad_check_with(
    cfg: &RunConfig,
    corrupt: impl Fn(&mut BTreeMap<String, Tensor<f64>>),
) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.model.embed_dim > MAX_EMBED_DIM {
        return Err(Error::config(
            "model.embed_dim",
            format!(
                "gradient checks need embed_dim <= {MAX_EMBED_DIM}, got {}",
                cfg.model.embed_dim
            ),
        ));
    }
    let p = problem(cfg)?;
    let params: ModelParams<f64> = ModelParams::init(&cfg.model, cfg.train.seed)?;

    let mut analytic = {
        let tape = Tape::new();
        let bound = Bound::new(&params, &tape)?;
        let loss = sample_loss(&bound, &p.image, &p.targets, &p.mask, &cfg.loss, StepPath::Full)?;
        tape.backward(loss.total)?.into_params()
    };
    corrupt(&mut analytic);

    let names: Vec<String> = params.names().cloned().collect();
    let per_tensor = names
        .par_iter()
        .map(|name| {
            let mut probe = params.clone();
            let grad = &analytic[name];
            let mut worst = (0.0f64, 0usize);
            for i in 0..grad.numel() {
                let original = probe.get(name).expect("known name").data()[i];
                probe.get_mut(name).expect("known name").data_mut()[i] = original + STEP;
                let up = loss_value(cfg, &probe, &p)?;
                probe.get_mut(name).expect("known name").data_mut()[i] = original - STEP;
                let down = loss_value(cfg, &probe, &p)?;
                probe.get_mut(name).expect("known name").data_mut()[i] = original;
                let err = relative_error(grad.data()[i], (up - down) / (2.0 * STEP));
                if err > worst.0 || err.is_nan() {
                    worst = (err, i);
                }
            }
            Ok((name.clone(), worst, grad.numel()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        per_param: BTreeMap::new(),
    };
    for (name, (err, idx), count) in per_tensor {
        report.checked += count;
        if err > report.max_rel_err || err.is_nan() || report.worst_param.is_empty() {
            report.max_rel_err = err;
            report.worst_param = name.clone();
            report.worst_index = idx;
        }
        report.per_param.insert(name, err);
    }
    Ok(report)
}
