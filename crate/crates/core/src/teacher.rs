//! Frozen reconstruction targets.
//!
//! Teachers run entirely outside the tape. A downsampling teacher sees its
//! input bilinearly resized so that it emits exactly one token per student
//! patch.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{io, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    File,
    #[default]
    Procedural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    /// Input pixels per output token side.
    pub downsample_rate: usize,
    pub target_dim: usize,
    /// Weight seed of the procedural teacher.
    pub seed: u64,
    /// Scale every token to unit length after extraction.
    pub l2_normalize: bool,
    /// Directory of `<id>.tvec` dumps, for the file teacher.
    pub features_dir: Option<PathBuf>,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Procedural,
            downsample_rate: 8,
            target_dim: 2048,
            seed: 0,
            l2_normalize: false,
            features_dir: None,
        }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_rate == 0 {
            return Err(Error::config("teacher.downsample_rate", "must be positive"));
        }
        if self.target_dim == 0 {
            return Err(Error::config("teacher.target_dim", "must be positive"));
        }
        match self.kind {
            TeacherKind::Procedural if !self.downsample_rate.is_power_of_two() || self.downsample_rate < 2 => {
                Err(Error::config(
                    "teacher.downsample_rate",
                    format!(
                        "procedural teacher needs a power of two >= 2, got {}",
                        self.downsample_rate
                    ),
                ))
            }
            TeacherKind::File if self.features_dir.is_none() => Err(Error::config(
                "teacher.features_dir",
                "file teacher needs a features directory",
            )),
            _ => Ok(()),
        }
    }

    /// Resize factor that aligns the teacher grid with `patch_side` patches.
    pub fn align_factor(&self, patch_side: usize) -> Result<usize> {
        align_factor(patch_side, self.downsample_rate)
    }
}

/// Target tokens for one image, `[K × D_t]` with `K = grid_side²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    pub tokens: Tensor,
    pub grid_side: usize,
    pub source_id: String,
}

impl TeacherFeatures {
    pub fn new(tokens: Tensor, grid_side: usize, source_id: impl Into<String>) -> Result<Self> {
        let (k, _) = tokens.dims2()?;
        if k != grid_side * grid_side {
            return Err(Error::Dimension(format!(
                "{k} tokens do not fill a {grid_side}x{grid_side} grid"
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::Numeric("teacher tokens are not finite".into()));
        }
        Ok(Self {
            tokens,
            grid_side,
            source_id: source_id.into(),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn align_factor(patch_side: usize, downsample: usize) -> Result<usize> {
    if patch_side == 0 || downsample == 0 || !downsample.is_multiple_of(patch_side) {
        return Err(Error::Alignment(format!(
            "teacher downsample {downsample} is not a multiple of patch side {patch_side}"
        )));
    }
    Ok(downsample / patch_side)
}

/// Resizes `[C × H × W]` by `downsample / patch_side`.
pub fn align_input(image: &Tensor, patch_side: usize, downsample: usize) -> Result<Tensor> {
    let factor = align_factor(patch_side, downsample)?;
    let &[_, h, w] = image.shape() else {
        return Err(Error::Dimension(format!(
            "image must be [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if factor == 1 {
        return Ok(image.clone());
    }
    resize_bilinear(image, h * factor, w * factor)
}

/// Bilinear resize with half-pixel centers: output pixel `d` samples source
/// coordinate `(d + 0.5) · in / out − 0.5`, clamped to the image.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Dimension(format!(
            "image must be [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("cannot resize an empty image".into()));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(out_h, h), taps(out_w, w));
    let px = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &px[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

struct ConvStage {
    /// `[out][in][3][3]`, flattened.
    weight: Vec<f32>,
    bias: Vec<f32>,
    c_in: usize,
    c_out: usize,
}

impl ConvStage {
    /// 3×3 convolution, stride 2, zero padding 1, followed by tanh.
    fn apply(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0f32; self.c_out * oh * ow];
        for o in 0..self.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.c_in {
                        let k = &self.weight[(o * self.c_in + i) * 9..][..9];
                        let plane = &x[i * h * w..(i + 1) * h * w];
                        for ky in 0..3 {
                            let Some(y) = (2 * oy + ky).checked_sub(1).filter(|&y| y < h) else {
                                continue;
                            };
                            for kx in 0..3 {
                                if let Some(xx) = (2 * ox + kx).checked_sub(1).filter(|&xx| xx < w) {
                                    acc += k[ky * 3 + kx] * plane[y * w + xx];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc.tanh();
                }
            }
        }
        (out, oh, ow)
    }
}

/// Small fixed-weight strided ConvNet; `log2(downsample_rate)` stages.
pub struct ProceduralTeacher {
    stages: Vec<ConvStage>,
    in_channels: usize,
    downsample: usize,
}

impl ProceduralTeacher {
    const MAX_HIDDEN: usize = 64;

    pub fn new(spec: &TeacherSpec, in_channels: usize) -> Result<Self> {
        spec.validate()?;
        let depth = spec.downsample_rate.trailing_zeros() as usize;
        let hidden = spec.target_dim.min(Self::MAX_HIDDEN);
        let mut c_in = in_channels;
        let stages = (0..depth)
            .map(|s| {
                let c_out = if s + 1 == depth { spec.target_dim } else { hidden };
                let mut rng = rng::stream(spec.seed, &format!("teacher/stage{s}"));
                let limit = (6.0 / (9 * c_in) as f64).sqrt() as f32;
                let weight = (0..c_out * c_in * 9).map(|_| rng.random_range(-limit..limit)).collect();
                let bias = (0..c_out).map(|_| rng.random_range(-0.1..0.1)).collect();
                let stage = ConvStage {
                    weight,
                    bias,
                    c_in,
                    c_out,
                };
                c_in = c_out;
                stage
            })
            .collect();
        Ok(Self {
            stages,
            in_channels,
            downsample: spec.downsample_rate,
        })
    }

    /// Runs on an already aligned image; returns `[K × D_t]` tokens in row-major grid order.
    pub fn run(&self, image: &Tensor) -> Result<(Tensor, usize)> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::Dimension(format!(
                "image must be [C, H, W], got {:?}",
                image.shape()
            )));
        };
        if c != self.in_channels || h != w || h % self.downsample != 0 {
            return Err(Error::Dimension(format!(
                "teacher expects square {}-channel input with side divisible by {}, got {:?}",
                self.in_channels,
                self.downsample,
                image.shape()
            )));
        }
        let (mut x, mut hh, mut ww) = (image.data().to_vec(), h, w);
        for stage in &self.stages {
            (x, hh, ww) = stage.apply(&x, hh, ww);
        }
        let d = self.stages.last().map_or(c, |s| s.c_out);
        let chw = Tensor::new(vec![d, hh * ww], x)?;
        Ok((chw.transpose()?, hh))
    }
}

pub enum Teacher {
    Procedural(ProceduralTeacher),
    File { dir: PathBuf, target_dim: usize },
}

/// A constructed teacher plus the extraction settings of its spec.
pub struct FrozenTeacher {
    teacher: Teacher,
    spec: TeacherSpec,
}

impl FrozenTeacher {
    pub fn new(spec: &TeacherSpec, in_channels: usize) -> Result<Self> {
        spec.validate()?;
        let teacher = match spec.kind {
            TeacherKind::Procedural => Teacher::Procedural(ProceduralTeacher::new(spec, in_channels)?),
            TeacherKind::File => Teacher::File {
                dir: spec.features_dir.clone().expect("validated"),
                target_dim: spec.target_dim,
            },
        };
        Ok(Self {
            teacher,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    /// Targets for `image` (id `id`) aligned to a `patch_side` student.
    pub fn extract(&self, id: &str, image: &Tensor, patch_side: usize) -> Result<TeacherFeatures> {
        let factor = self.spec.align_factor(patch_side)?;
        let &[_, h, w] = image.shape() else {
            return Err(Error::Dimension(format!(
                "image must be [C, H, W], got {:?}",
                image.shape()
            )));
        };
        if h != w || h % patch_side != 0 {
            return Err(Error::Dimension(format!(
                "{h}x{w} image does not tile into {patch_side}-pixel patches"
            )));
        }
        let grid = h / patch_side;
        let mut tokens = match &self.teacher {
            Teacher::Procedural(t) => {
                let aligned = align_input(image, patch_side, self.spec.downsample_rate)?;
                debug_assert_eq!(aligned.shape()[1], h * factor);
                t.run(&aligned)?.0
            }
            Teacher::File { dir, target_dim } => {
                let path = dir.join(format!("{id}.tvec"));
                let t: Tensor = io::load(&path)?;
                if t.shape() != [grid * grid, *target_dim] {
                    return Err(Error::Format(format!(
                        "{} has shape {:?}, expected [{}, {target_dim}]",
                        path.display(),
                        t.shape(),
                        grid * grid
                    )));
                }
                t
            }
        };
        if self.spec.l2_normalize {
            l2_normalize_rows(&mut tokens);
        }
        TeacherFeatures::new(tokens, grid, id)
    }
}

fn l2_normalize_rows(t: &mut Tensor) {
    let d = t.shape()[1];
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub grid_side: usize,
    pub dim: usize,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `<dir>/<id>.tvec` per image and `<dir>/manifest.json`.
pub fn dump_features(
    teacher: &FrozenTeacher,
    images: &[(String, Tensor)],
    patch_side: usize,
    dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let features = images
        .par_iter()
        .map(|(id, image)| teacher.extract(id, image, patch_side))
        .collect::<Result<Vec<_>>>()?;
    let manifest: Vec<ManifestEntry> = features
        .iter()
        .map(|f| {
            io::save(dir.join(format!("{}.tvec", f.source_id)), &f.tokens)?;
            Ok(ManifestEntry {
                id: f.source_id.clone(),
                grid_side: f.grid_side,
                dim: f.dim(),
            })
        })
        .collect::<Result<_>>()?;
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every feature file listed in `<dir>/manifest.json`, in manifest order.
pub fn read_features(dir: impl AsRef<Path>) -> Result<Vec<TeacherFeatures>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes)?;
    manifest
        .into_iter()
        .map(|entry| {
            let tokens: Tensor = io::load(dir.join(format!("{}.tvec", entry.id)))?;
            if tokens.shape() != [entry.grid_side * entry.grid_side, entry.dim] {
                return Err(Error::Format(format!(
                    "`{}` has shape {:?}, manifest says {}x{} grid of width {}",
                    entry.id,
                    tokens.shape(),
                    entry.grid_side,
                    entry.grid_side,
                    entry.dim
                )));
            }
            TeacherFeatures::new(tokens, entry.grid_side, entry.id)
        })
        .collect()
}
