//! Run configuration: a single JSON file describing the model, the SAE, the
//! concepts, prompts, steering parameters and output directory.
//!
//! All seeds are explicit and every referenced path must exist when the
//! config is validated. The config file's bytes hash into the run's config
//! hash, so editing the file between stages deliberately invalidates the run
//! directory.

use crate::CliError;
use biaslens_core::hash::fnv1a;
use biaslens_core::model::bridge::BridgeModel;
use biaslens_core::model::toy::ToyLm;
use biaslens_core::model::LayerwiseModel;
use biaslens_core::pipeline::{hex64, ConceptSpec, PipelineSpec};
use biaslens_core::sae::{generate_synthetic_sae, SaeEncoder};
use biaslens_core::steering::SteerConfig;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    pub model: ModelConfig,
    pub sae: SaeConfig,
    pub concepts: Vec<ConceptConfig>,
    pub targets: Vec<String>,
    pub ref_pairs: Vec<(String, String)>,
    pub prompts: Vec<PromptConfig>,
    #[serde(default)]
    pub steer: SteerSettings,
    pub out_dir: PathBuf,
}

fn default_n_per_class() -> usize {
    150
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Toy { seed: u64, layers: usize, dim: usize },
    Bridge { endpoint: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SaeConfig {
    Synthetic {
        seed: u64,
        features: usize,
        n_relevant: usize,
    },
    File {
        path: PathBuf,
        #[serde(default)]
        mask_path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptConfig {
    pub name: String,
    pub templates: Vec<String>,
    pub lexicon: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerSettings {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps_per_layer: usize,
}

fn default_tau() -> f64 {
    0.999
}
fn default_delta() -> f64 {
    1.0
}
fn default_max_steps() -> usize {
    10_000
}

impl Default for SteerSettings {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            delta: default_delta(),
            max_steps_per_layer: default_max_steps(),
        }
    }
}

/// A parsed config together with the raw bytes it came from; the bytes define
/// the run's config hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: Vec<u8>,
    pub hash: String,
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<LoadedConfig, CliError> {
        let raw = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read config {path:?}: {e}")))?;
        Self::parse(raw, &path.display().to_string())
    }

    pub fn parse(raw: Vec<u8>, origin: &str) -> Result<LoadedConfig, CliError> {
        let config: RunConfig = serde_json::from_slice(&raw)
            .map_err(|e| CliError::Config(format!("config {origin}: {e}")))?;
        config.validate()?;
        let hash = hex64(fnv1a(&raw));
        Ok(LoadedConfig { config, raw, hash })
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.model {
            ModelConfig::Toy { layers, dim, .. } => {
                if *layers == 0 {
                    return Err(CliError::Config("model.layers must be >= 1".into()));
                }
                if *dim < 2 {
                    return Err(CliError::Config("model.dim must be >= 2".into()));
                }
            }
            ModelConfig::Bridge { endpoint } => {
                endpoint
                    .parse::<biaslens_core::model::bridge::Endpoint>()
                    .map_err(|e| CliError::Config(format!("model.endpoint: {e}")))?;
            }
        }
        match &self.sae {
            SaeConfig::Synthetic {
                features,
                n_relevant,
                ..
            } => {
                if *n_relevant == 0 || n_relevant > features {
                    return Err(CliError::Config(
                        "sae.n_relevant must be in 1..=sae.features".into(),
                    ));
                }
            }
            SaeConfig::File { path, mask_path } => {
                if !path.exists() {
                    return Err(CliError::Config(format!(
                        "sae.path does not exist: {path:?}"
                    )));
                }
                if let Some(mask) = mask_path {
                    if !mask.exists() {
                        return Err(CliError::Config(format!(
                            "sae.mask_path does not exist: {mask:?}"
                        )));
                    }
                }
            }
        }
        // Delegate the structural checks to the pipeline spec.
        self.pipeline_spec()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn pipeline_spec(&self) -> PipelineSpec {
        PipelineSpec {
            seed: self.seed,
            n_per_class: self.n_per_class,
            concepts: self
                .concepts
                .iter()
                .map(|c| ConceptSpec {
                    name: c.name.clone(),
                    templates: c.templates.clone(),
                    lexicon: c.lexicon.clone(),
                })
                .collect(),
            targets: self.targets.clone(),
            ref_pairs: self.ref_pairs.clone(),
            prompts: self
                .prompts
                .iter()
                .map(|p| (p.id.clone(), p.text.clone()))
                .collect(),
            steer: SteerConfig {
                tau: self.steer.tau,
                delta: self.steer.delta,
                max_steps_per_layer: self.steer.max_steps_per_layer,
                record_confidences: false,
            },
        }
    }

    pub fn build_model(&self) -> Result<Box<dyn LayerwiseModel>, CliError> {
        match &self.model {
            ModelConfig::Toy { seed, layers, dim } => Ok(Box::new(
                ToyLm::new(*seed, *layers, *dim)
                    .map_err(|e| CliError::Config(format!("model: {e}")))?,
            )),
            ModelConfig::Bridge { endpoint } => Ok(Box::new(
                BridgeModel::connect(endpoint)
                    .map_err(|e| CliError::Stage(format!("bridge: {e}")))?,
            )),
        }
    }

    /// Build the SAE encoder and, when available, the ground-truth relevance
    /// mask. The synthetic generator derives its input dimension from the
    /// model.
    pub fn build_sae(
        &self,
        input_dim: usize,
    ) -> Result<(SaeEncoder, Option<Vec<bool>>), CliError> {
        match &self.sae {
            SaeConfig::Synthetic {
                seed,
                features,
                n_relevant,
            } => {
                let (encoder, mask, _) =
                    generate_synthetic_sae(*seed, *features, input_dim, *n_relevant)
                        .map_err(|e| CliError::Config(format!("sae: {e}")))?;
                Ok((encoder, Some(mask)))
            }
            SaeConfig::File { path, mask_path } => {
                let encoder = SaeEncoder::load(path)
                    .map_err(|e| CliError::Stage(format!("sae {path:?}: {e}")))?;
                if encoder.input_dim() != input_dim {
                    return Err(CliError::Provenance(format!(
                        "SAE at {path:?} expects {}-dim inputs but the model is {input_dim}-dim",
                        encoder.input_dim()
                    )));
                }
                let mask = match mask_path {
                    Some(p) => {
                        let mask = read_mask_file(p)?;
                        if mask.len() != encoder.feature_count() {
                            return Err(CliError::Config(format!(
                                "mask {p:?} has {} entries but the SAE has {} features",
                                mask.len(),
                                encoder.feature_count()
                            )));
                        }
                        Some(mask)
                    }
                    None => None,
                };
                Ok((encoder, mask))
            }
        }
    }
}

/// Relevance mask file: one `0` or `1` per line, one line per SAE feature.
pub fn read_mask_file(path: &Path) -> Result<Vec<bool>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read mask {path:?}: {e}")))?;
    let mut mask = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "" => continue,
            "0" => mask.push(false),
            "1" => mask.push(true),
            other => {
                return Err(CliError::Config(format!(
                    "mask {path:?} line {}: expected 0 or 1, got {other:?}",
                    i + 1
                )))
            }
        }
    }
    Ok(mask)
}
