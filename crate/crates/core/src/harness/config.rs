//! Declarative run configuration (TOML or JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::adapters::{AdapterConfig, Attachment, Connection, Form};
use crate::backbone::{BackboneSpec, PretrainConfig};
use crate::classifiers::HeadKind;
use crate::episodes::{Protocol, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSource {
    /// `resnet-s` or `resnet-18`.
    pub spec: String,
    /// Pretrained weights; when absent the backbone is pretrained on the
    /// seen synthetic domains before evaluation.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource {
            spec: "resnet-s".into(),
            weights: None,
        }
    }
}

impl BackboneSource {
    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        match self.spec.as_str() {
            "resnet-s" => Ok(BackboneSpec::resnet_s()),
            "resnet-18" => Ok(BackboneSpec::resnet18()),
            other => Err(Error::config(format!(
                "unknown backbone {other:?} (expected resnet-s or resnet-18)"
            ))),
        }
    }
}

/// The standard synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSuite {
    pub seen: usize,
    pub unseen: usize,
    /// Seeds both the domain parameters and the image generator.
    pub seed: u64,
}

impl Default for SyntheticSuite {
    fn default() -> Self {
        SyntheticSuite {
            seen: 3,
            unseen: 4,
            seed: 0,
        }
    }
}

/// An IDX dataset under `{root}/{name}/{file}-images.idx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdxSource {
    pub name: String,
    /// Defaults to `TSA_DATA_DIR`.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_idx_file")]
    pub file: String,
}

fn default_idx_file() -> String {
    "test".into()
}

/// Ablation axes; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationAxes {
    pub connection: Vec<Connection>,
    pub form: Vec<Form>,
    /// Attachment codes such as `block4` or `all`.
    pub attachment: Vec<String>,
    /// Decomposition divisors; `0` means no decomposition.
    pub divisor: Vec<usize>,
    pub iterations: Vec<usize>,
}

impl AblationAxes {
    pub fn attachments(&self) -> Result<Vec<Attachment>> {
        self.attachment.iter().map(|a| a.parse()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Label for reports and CSV rows; defaults to `{adapter}+{head}`.
    pub method: Option<String>,
    pub backbone: BackboneSource,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub head: HeadKind,
    pub adapt: AdaptConfig,
    /// Use learning rate 0.1 for `beta` on seen domains and 1.0 on unseen
    /// ones, overriding `adapt.lr_beta`.
    pub lr_preset: bool,
    pub protocol: Protocol,
    pub split: Split,
    pub synthetic: SyntheticSuite,
    pub idx: Vec<IdxSource>,
    /// Datasets to evaluate; empty means every loaded dataset.
    pub datasets: Vec<String>,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: Option<PathBuf>,
    /// Long-form CSV that grid and eval rows are appended to.
    pub csv: Option<PathBuf>,
    pub ablation: AblationAxes,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: None,
            backbone: BackboneSource::default(),
            pretrain: PretrainConfig::default(),
            adapter: "Ad-R-M-PA".parse().expect("valid code"),
            head: HeadKind::Ncc,
            adapt: AdaptConfig::default(),
            lr_preset: true,
            protocol: Protocol::Varying,
            split: Split::Test,
            synthetic: SyntheticSuite::default(),
            idx: Vec::new(),
            datasets: Vec::new(),
            episodes: 600,
            seed: 0,
            workers: 1,
            out: None,
            csv: None,
            ablation: AblationAxes::default(),
        }
    }
}

impl RunConfig {
    pub fn method_label(&self) -> String {
        self.method
            .clone()
            .unwrap_or_else(|| format!("{}+{}", self.adapter.code(), self.head))
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Ok(serde_json::from_str(text)?)
        } else {
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let spec = self.backbone.backbone_spec()?;
        self.adapter.selected_sites(&spec)?;
        self.adapt.validate()?;
        if self.episodes == 0 {
            return Err(Error::config("episodes must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        if self.synthetic.seen + self.synthetic.unseen == 0 && self.idx.is_empty() {
            return Err(Error::config("no datasets configured"));
        }
        if self.backbone.weights.is_none() && self.synthetic.seen == 0 {
            return Err(Error::config(
                "no backbone weights given and no seen domains to pretrain on",
            ));
        }
        Ok(())
    }
}
