//! Per-subcommand TOML configuration. Every key may also come from a flag;
//! flags take precedence. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use kcm_retrieval::backbone::Variant;
use kcm_retrieval::cbirnet::DEFAULT_DIM;
use kcm_retrieval::preprocessing::CropRect;
use kcm_retrieval::trainer::Hyperparams;
use kcm_retrieval::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
}

pub fn existing_file(path: &Path, key: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{key}`: {} is not a readable file", path.display())))
    }
}

pub fn existing_dir(path: &Path, key: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("`{key}`: {} is not a directory", path.display())))
    }
}

/// `left,top,width,height`.
pub fn parse_crop(s: &str) -> std::result::Result<CropRect, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad crop component {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [left, top, width, height] => Ok(CropRect { left, top, width, height }),
        _ => Err("crop must be left,top,width,height".into()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub annotations: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub test_fraction: f64,
    pub seed: u64,
    pub verify_frames: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { annotations: None, frames: None, test_fraction: 0.2, seed: 0, verify_frames: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCompositionConfig {
    /// KU-PCP style dataset root.
    pub data: Option<PathBuf>,
    /// Use the synthetic archetype generator with this many samples per class.
    pub synthetic_per_class: Option<usize>,
    pub synthetic_test_per_class: usize,
    pub variant: Variant,
    pub hyperparams: Hyperparams,
}

impl Default for TrainCompositionConfig {
    fn default() -> Self {
        Self {
            data: None,
            synthetic_per_class: None,
            synthetic_test_per_class: 20,
            variant: Variant::Tiny,
            hyperparams: Hyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRetrievalConfig {
    pub triplets: Option<PathBuf>,
    pub ccnet: Option<PathBuf>,
    pub dim: usize,
    /// Pre-trained checkpoint whose backbone tensors initialize the CBIRNet
    /// backbone, instead of the CCNet backbone.
    pub backbone_checkpoint: Option<PathBuf>,
    pub hyperparams: Hyperparams,
}

impl Default for TrainRetrievalConfig {
    fn default() -> Self {
        Self { triplets: None, ccnet: None, dim: DEFAULT_DIM, backbone_checkpoint: None, hyperparams: Hyperparams::default() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildIndexConfig {
    pub checkpoint: Option<PathBuf>,
    /// JSON lines of frame references, e.g. `central_frames.jsonl`.
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub k: usize,
    pub crop: Option<CropRect>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { index: None, checkpoint: None, image: None, k: 5, crop: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// JSON lines of shot groups, e.g. `test_shots.jsonl`.
    pub shots: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Precomputed embeddings to score instead of running a checkpoint.
    pub index: Option<PathBuf>,
    pub seed: u64,
    pub margin: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportKcmConfig {
    pub ccnet: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub crop: Option<CropRect>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCompositionConfig {
    pub per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthCompositionConfig {
    fn default() -> Self {
        Self { per_class: 30, test_per_class: 20, seed: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = toml::from_str::<PrepareConfig>("annotations = \"a.csv\"\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let c: TrainCompositionConfig = toml::from_str("synthetic_per_class = 3\n[hyperparams]\nepochs = 2\n").unwrap();
        assert_eq!(c.hyperparams.epochs, 2);
        assert_eq!(c.hyperparams.learning_rate, 1e-3);
        assert!(toml::from_str::<TrainCompositionConfig>("[hyperparams]\nepoch = 2\n").is_err());
    }

    #[test]
    fn crop_parsing() {
        assert_eq!(parse_crop("1, 2,3,4").unwrap(), CropRect { left: 1, top: 2, width: 3, height: 4 });
        assert!(parse_crop("1,2,3").is_err());
    }
}
