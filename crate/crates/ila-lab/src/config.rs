//! Experiment configuration: one JSON file describing model, adapter,
//! training recipe, data source, seeds, and output directory. Unknown
//! keys are errors so sweep typos fail fast.

use std::fs;
use std::path::{Path, PathBuf};

use ila_core::ila::{IlaConfig, IlaVariant, RsdsMode};
use ila_core::vit::ViTConfig;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::train::TrainConfig;
use crate::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub variant: String,
    pub rsds: String,
    pub bottleneck_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub near_ones_std: f64,
    pub intra_adapter_dim: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let d = IlaConfig::default();
        AdapterSection {
            variant: "ila".into(),
            rsds: "dwc-near-ones".into(),
            bottleneck_dim: d.bottleneck_dim,
            kernel: d.kernel,
            stride: d.stride,
            near_ones_std: d.near_ones_std,
            intra_adapter_dim: d.intra_adapter_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Generated dataset spec; mutually exclusive with `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Directory of `class_name/image` files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Fraction of a directory dataset held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    #[serde(default)]
    pub training: TrainConfig,
    pub data: DataSection,
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

pub fn parse_variant(s: &str) -> Result<IlaVariant> {
    match s {
        "none" => Ok(IlaVariant::None),
        "ila" => Ok(IlaVariant::Ila),
        "ila+" => Ok(IlaVariant::IlaPlus),
        "ila++" => Ok(IlaVariant::IlaPlusPlus),
        other => Err(LabError::Config(format!(
            "unknown variant `{other}` (expected none, ila, ila+, ila++)"
        ))),
    }
}

pub fn variant_name(v: IlaVariant) -> &'static str {
    match v {
        IlaVariant::None => "none",
        IlaVariant::Ila => "ila",
        IlaVariant::IlaPlus => "ila+",
        IlaVariant::IlaPlusPlus => "ila++",
    }
}

pub fn parse_rsds(s: &str) -> Result<RsdsMode> {
    match s {
        "dwc-near-ones" => Ok(RsdsMode::DwcNearOnes),
        "dwc-normal" => Ok(RsdsMode::DwcNormal),
        "avgpool" => Ok(RsdsMode::AvgPool),
        "conv" => Ok(RsdsMode::FullConv),
        "none" => Ok(RsdsMode::None),
        other => Err(LabError::Config(format!(
            "unknown rsds mode `{other}` (expected dwc-near-ones, dwc-normal, avgpool, conv, none)"
        ))),
    }
}

pub fn rsds_name(m: RsdsMode) -> &'static str {
    match m {
        RsdsMode::DwcNearOnes => "dwc-near-ones",
        RsdsMode::DwcNormal => "dwc-normal",
        RsdsMode::AvgPool => "avgpool",
        RsdsMode::FullConv => "conv",
        RsdsMode::None => "none",
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.model.image_size,
            patch_size: self.model.patch_size,
            depth: self.model.depth,
            hidden_dim: self.model.hidden_dim,
            num_heads: self.model.num_heads,
            mlp_ratio: self.model.mlp_ratio,
            num_classes: self.model.num_classes,
        }
    }

    pub fn ila_config(&self) -> Result<IlaConfig> {
        Ok(IlaConfig {
            variant: parse_variant(&self.adapter.variant)?,
            rsds_mode: parse_rsds(&self.adapter.rsds)?,
            bottleneck_dim: self.adapter.bottleneck_dim,
            kernel: self.adapter.kernel,
            stride: self.adapter.stride,
            near_ones_std: self.adapter.near_ones_std,
            intra_adapter_dim: self.adapter.intra_adapter_dim,
        })
    }

    /// Cross-field feasibility, checked before any generation or model
    /// memory is allocated.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let vit = self.vit_config();
        vit.validate().map_err(LabError::from)?;
        let ila = self.ila_config()?;
        ila.validate().map_err(LabError::from)?;
        // grid chain feasibility without building the model
        ila_core::ila::build_adapter_plan(&vit, &ila).map_err(LabError::from)?;
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        if self.training.crop != self.model.image_size {
            return Err(LabError::Config(format!(
                "training.crop {} must equal model.image_size {}",
                self.training.crop, self.model.image_size
            )));
        }
        match (&self.data.synthetic, &self.data.path) {
            (None, None) => {
                return Err(LabError::Config(
                    "data needs either `synthetic` or `path`".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(LabError::Config(
                    "data `synthetic` and `path` are mutually exclusive".into(),
                ))
            }
            (Some(s), None) => {
                s.validate()?;
                if s.num_classes != self.model.num_classes {
                    return Err(LabError::Config(format!(
                        "synthetic num_classes {} != model num_classes {}",
                        s.num_classes, self.model.num_classes
                    )));
                }
            }
            (None, Some(_)) => {
                if !(0.0..1.0).contains(&self.data.eval_fraction) {
                    return Err(LabError::Config(
                        "eval_fraction must be in [0, 1)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
