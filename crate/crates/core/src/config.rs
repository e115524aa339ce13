//! One JSON document configuring a run, every section optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Normalization;
use crate::losses::LossConfig;
use crate::masking::MaskSpec;
use crate::model::ModelConfig;
use crate::teacher::TeacherSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub mask: MaskSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub teacher: TeacherSpec,
    pub data: Normalization,
}

impl Default for RunConfig {
    /// ViT-B/16 student against a ResNet-50-shaped teacher: downsample 32,
    /// 2048 channels, so the teacher sees a 2× upsampled input.
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            mask: MaskSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            teacher: TeacherSpec {
                downsample_rate: 32,
                ..TeacherSpec::default()
            },
            data: Normalization::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON; syntax and unknown-field problems surface as config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section, then the constraints that span sections.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.mask.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.teacher.validate()?;
        self.data.validate()?;
        if self.mask.image_side != self.model.image_side {
            return Err(Error::config(
                "mask.image_side",
                format!(
                    "{} differs from model.image_side {}",
                    self.mask.image_side, self.model.image_side
                ),
            ));
        }
        if self.mask.patch_side != self.model.patch_side {
            return Err(Error::config(
                "mask.patch_side",
                format!(
                    "{} differs from model.patch_side {}",
                    self.mask.patch_side, self.model.patch_side
                ),
            ));
        }
        let blocks = self.mask.masked_blocks();
        if blocks == 0 || blocks == self.mask.total_blocks() {
            return Err(Error::config(
                "mask.mask_ratio",
                format!(
                    "{} masks {blocks} of {} blocks; training needs both masked and visible patches",
                    self.mask.mask_ratio,
                    self.mask.total_blocks()
                ),
            ));
        }
        if self.teacher.target_dim != self.model.target_dim {
            return Err(Error::config(
                "teacher.target_dim",
                format!(
                    "{} differs from model.target_dim {}",
                    self.teacher.target_dim, self.model.target_dim
                ),
            ));
        }
        self.teacher
            .align_factor(self.model.patch_side)
            .map_err(|e| Error::config("teacher.downsample_rate", e.to_string()))?;
        let channels = self.data.mean.len();
        if channels != 1 && channels != self.model.in_channels {
            return Err(Error::config(
                "data.mean",
                format!("{channels} entries for {} input channels", self.model.in_channels),
            ));
        }
        Ok(())
    }
}
