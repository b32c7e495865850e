//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraTarget;
use crate::model::{LoraConfig, ModelConfig};
use crate::psc::Placement;
use crate::rope::{FrequencySchedule, Layout};
use crate::train::{DiagnosticConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub layout: Layout,
    pub norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 4,
            mlp_hidden: 64,
            vocab_size: 258,
            max_context: 256,
            layout: Layout::HalfBlocks,
            norm_eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PscSection {
    pub enabled: bool,
    pub placement: Placement,
}

impl Default for PscSection {
    fn default() -> Self {
        Self { enabled: true, placement: Placement::Pre }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub enabled: bool,
    pub rank: usize,
    pub targets: Vec<LoraTarget>,
    pub scale: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self { enabled: false, rank: 4, targets: vec![LoraTarget::Q, LoraTarget::K], scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub windows: Vec<usize>,
    pub eval_lengths: Vec<usize>,
    pub stride: usize,
    pub passkey_lengths: Vec<usize>,
    pub passkey_trials: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            windows: vec![64, 128],
            eval_lengths: vec![128, 256],
            stride: 32,
            passkey_lengths: vec![256, 512],
            passkey_trials: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub pattern: String,
    pub total_len: usize,
    #[serde(default)]
    pub noise_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of training text, resolved against the config file's directory.
    pub train_dir: Option<PathBuf>,
    /// Directory of evaluation text; falls back to `train_dir`.
    pub eval_dir: Option<PathBuf>,
    pub min_len: usize,
    pub max_documents: Option<usize>,
    /// Used when no training directory is given.
    pub synthetic: Option<SynthSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub rank_head_dim: usize,
    pub rank_positions: Vec<usize>,
    pub shift_range: (f64, f64),
    pub rank_tol: f64,
    pub diagnostic: DiagnosticConfig,
    pub diagnostic_seeds: Vec<u64>,
    pub dist_layer: usize,
    pub dist_bins: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            rank_head_dim: 8,
            rank_positions: vec![1, 7, 1024],
            shift_range: (0.05, 0.5),
            rank_tol: crate::numerics::DEFAULT_RANK_TOL,
            diagnostic: DiagnosticConfig::default(),
            diagnostic_seeds: (0..10).collect(),
            dist_layer: 0,
            dist_bins: crate::phase::DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedule: FrequencySchedule,
    pub psc: PscSection,
    pub lora: LoraSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataSection,
    pub analysis: AnalysisSection,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelSection::default();
        let head_dim = model.d_model / model.n_heads;
        Self {
            model,
            schedule: FrequencySchedule::base(10_000.0, head_dim),
            psc: PscSection::default(),
            lora: LoraSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            data: DataSection::default(),
            analysis: AnalysisSection::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses and validates; parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its data paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        for dir in [&mut cfg.data.train_dir, &mut cfg.data.eval_dir].into_iter().flatten() {
            if dir.is_relative() {
                *dir = root.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.train.validate()?;
        if self.eval.stride == 0 || self.eval.passkey_trials == 0 {
            return Err(Error::Config("eval.stride and eval.passkey_trials must be ≥ 1".into()));
        }
        if self.analysis.rank_head_dim < 2 || !self.analysis.rank_head_dim.is_multiple_of(2) {
            return Err(Error::Config("analysis.rank_head_dim must be even and ≥ 2".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            layers: m.layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_kv_heads: m.n_kv_heads,
            mlp_hidden: m.mlp_hidden,
            vocab_size: m.vocab_size,
            max_context: m.max_context,
            schedule: self.schedule.clone(),
            layout: m.layout,
            psc: self.psc.enabled.then_some(self.psc.placement),
            lora: self.lora.enabled.then(|| LoraConfig {
                rank: self.lora.rank,
                targets: self.lora.targets.clone(),
                scale: self.lora.scale,
            }),
            norm_eps: m.norm_eps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_means_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = RunConfig::from_json("{\n  \"model\": {\"layerz\": 2}\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layerz") && msg.contains("line 2"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        assert!(RunConfig::from_json("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn schedule_must_match_head_dim() {
        let text = r#"{"schedule": {"kind": "base", "base": 10000.0, "head_dim": 16}}"#;
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn sections_map_onto_the_model() {
        let text = r#"{
            "psc": {"enabled": true, "placement": "post"},
            "lora": {"enabled": true, "rank": 2, "targets": ["q", "v"]}
        }"#;
        let mc = RunConfig::from_json(text).unwrap().model_config().unwrap();
        assert_eq!(mc.psc, Some(Placement::Post));
        assert_eq!(mc.lora.unwrap().targets, vec![LoraTarget::Q, LoraTarget::V]);
    }

    #[test]
    fn relative_data_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"data": {"train_dir": "corpus"}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train_dir.unwrap(), dir.path().join("corpus"));
    }
}
