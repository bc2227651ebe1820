use std::path::{Path, PathBuf};

use fairexpo::clicksim::ExaminationModel;
use fairexpo::dataset::{SynthConfig, Thresholds};
use fairexpo::eval::EvalMode;
use fairexpo::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Everything a pipeline run needs. Paths are relative to the working
/// directory unless absolute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream; see [`PipelineConfig::sub_seed`].
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub clicksim: ClicksimConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub logs: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: "data".into(), logs: "logs".into(), models: "models".into(), reports: "reports".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Used by `prepare --synth`. Its `seed` field is replaced by the
    /// derivation from the root seed.
    pub synth: SynthConfig,
    pub letor: LetorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LetorConfig {
    /// 1-based LETOR feature id of the group attribute.
    pub attribute_feature_id: Option<usize>,
    pub thresholds: Thresholds,
    pub candidates: usize,
    pub relevant: usize,
    pub train_queries: usize,
    pub validation_queries: usize,
    pub test_queries: usize,
    pub reuse_sources: bool,
    pub standardize: bool,
}

impl Default for LetorConfig {
    fn default() -> Self {
        Self {
            attribute_feature_id: None,
            thresholds: Thresholds::Percentiles(vec![40.0]),
            candidates: 20,
            relevant: 3,
            train_queries: 500,
            validation_queries: 500,
            test_queries: 500,
            reuse_sources: false,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClicksimConfig {
    pub eta: f64,
    pub eps_plus: f64,
    pub eps_minus: f64,
    /// Fraction of the training queries the logging policy is fitted on.
    pub log_fraction: f64,
    /// Target logged clicks per split (train and validation each).
    pub clicks: usize,
    /// Fixed impressions per query; overrides `clicks` when set.
    pub impressions: Option<usize>,
    pub planted_k: usize,
    pub intervention_impressions: usize,
    pub intervention_fraction: f64,
}

impl Default for ClicksimConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            eps_plus: 1.0,
            eps_minus: 0.0,
            log_fraction: 0.01,
            clicks: 50_000,
            impressions: None,
            planted_k: 2,
            intervention_impressions: 100_000,
            intervention_fraction: 1.0,
        }
    }
}

impl ClicksimConfig {
    pub fn exam(&self) -> ExaminationModel {
        ExaminationModel { eta: self.eta, eps_plus: self.eps_plus, eps_minus: self.eps_minus }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Argmax,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: ModeName,
    /// Rankings per query in stochastic mode.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: ModeName::Argmax, samples: 100 }
    }
}

impl EvalConfig {
    pub fn mode(&self) -> EvalMode {
        match self.mode {
            ModeName::Argmax => EvalMode::Argmax,
            ModeName::Stochastic => EvalMode::Stochastic { samples: self.samples },
        }
    }
}

impl PipelineConfig {
    /// Reads a config file. Unknown fields and type errors are reported with
    /// the path of the offending field.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Schema { field, message: e.into_inner().to_string() }
        })
    }

    /// Stable seed of a pipeline component: `seed::derive(root, component)`.
    pub fn sub_seed(&self, component: &str) -> u64 {
        fairexpo::seed::derive(self.seed, component)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let schema = |field: &str, message: String| Err(CliError::Schema { field: field.into(), message });
        if let Err(e) = self.clicksim.exam().validate() {
            return schema("clicksim", e.to_string());
        }
        let c = &self.clicksim;
        if !(c.log_fraction > 0.0 && c.log_fraction <= 1.0) {
            return schema("clicksim.log_fraction", format!("must lie in (0, 1], got {}", c.log_fraction));
        }
        if c.clicks == 0 {
            return schema("clicksim.clicks", "must be >= 1".into());
        }
        if c.impressions == Some(0) {
            return schema("clicksim.impressions", "must be >= 1".into());
        }
        if c.planted_k == 0 {
            return schema("clicksim.planted_k", "positions are 1-based".into());
        }
        if !(c.intervention_fraction > 0.0 && c.intervention_fraction <= 1.0) {
            return schema(
                "clicksim.intervention_fraction",
                format!("must lie in (0, 1], got {}", c.intervention_fraction),
            );
        }
        if let Err(e) = self.trainer.validate() {
            return schema("trainer", e.to_string());
        }
        if self.eval.mode == ModeName::Stochastic && self.eval.samples == 0 {
            return schema("eval.samples", "must be >= 1".into());
        }
        if let Err(e) = self.dataset.synth.validate() {
            return schema("dataset.synth", e.to_string());
        }
        let l = &self.dataset.letor;
        if l.attribute_feature_id == Some(0) {
            return schema("dataset.letor.attribute_feature_id", "LETOR feature ids are 1-based".into());
        }
        if l.relevant > l.candidates || l.candidates == 0 {
            return schema(
                "dataset.letor",
                format!("need 0 < relevant <= candidates, got {} of {}", l.relevant, l.candidates),
            );
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"seed": 7, "clicksim": {"eta": 2.0}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.clicksim.eta, 2.0);
        assert_eq!(c.clicksim.clicks, 50_000);
        assert_ne!(c.sub_seed("dataset"), c.sub_seed("trainer"));
    }

    #[test]
    fn schema_errors_carry_the_field_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"trainer": {"samples": "many"}}"#).unwrap();
        match PipelineConfig::load(&path) {
            Err(CliError::Schema { field, .. }) => assert_eq!(field, "trainer.samples"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, r#"{"clicksim": {"etta": 1}}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(CliError::Schema { .. })));
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let mut c = PipelineConfig::default();
        c.clicksim.eps_minus = 1.5;
        assert!(matches!(c.validate(), Err(CliError::Schema { field, .. }) if field == "clicksim"));
        let mut c = PipelineConfig::default();
        c.trainer.samples = 0;
        assert!(matches!(c.validate(), Err(CliError::Schema { field, .. }) if field == "trainer"));
    }
}
