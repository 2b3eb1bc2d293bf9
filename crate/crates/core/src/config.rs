//! Run configuration: one TOML file with nested sections, overridable by
//! `key.path=value` assignments. Precedence: built-in defaults, then the file,
//! then overrides in the order given.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cbm::{CbmConfig, ThresholdMode, ThresholdPolicy};
use crate::datagen::{DatasetSpec, GeneratorKind};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_SIM_THRESHOLD;
use crate::sap::{ClientConfig, SapConfig};
use crate::sas::{Provider, ProviderConfig, ShieldConfig, DEFAULT_LAMBDA};
use crate::seed::SeedTree;
use crate::vlm::{AdaptationMode, ModelConfig, PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub generator: GeneratorKind,
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub rho: f64,
    /// Per-class override of `rho` for the train split.
    pub class_rho: Option<Vec<f64>>,
    /// Correlation of the test split; 0 gives randomized attributes.
    pub test_rho: f64,
    /// Train on the base half of the categories and evaluate the new half too.
    pub base_new: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::ColoredMnist,
            classes: 10,
            shots: 16,
            test_per_class: 50,
            rho: 0.95,
            class_rho: None,
            test_rho: 0.0,
            base_new: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub temperature: f64,
    pub adaptation: AdaptationMode,
    /// Captioned images in the pre-training corpus; unset picks the
    /// generator's default.
    pub corpus_size: Option<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PretrainConfig::default();
        Self {
            embed_dim: m.embed_dim,
            temperature: m.temperature,
            adaptation: m.adaptation,
            corpus_size: None,
            pretrain_epochs: p.epochs,
            pretrain_lr: p.learning_rate,
            pretrain_batch: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceBackend {
    #[default]
    Oracle,
    Fixture,
    ExternalClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SapSection {
    pub source: SourceBackend,
    /// Recorded responses for the fixture backend.
    pub fixture_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub token_env: String,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub query_images: usize,
    pub policy: ThresholdMode,
    pub gamma: f64,
    pub dedup_threshold: f64,
    pub probe_l2: f64,
}

impl Default for SapSection {
    fn default() -> Self {
        let c = ClientConfig::default();
        let s = SapConfig::default();
        Self {
            source: SourceBackend::Oracle,
            fixture_path: None,
            endpoint: None,
            token_env: c.token_env,
            timeout_secs: c.timeout_secs,
            max_retries: c.max_retries,
            query_images: s.query_images,
            policy: s.policy.mode,
            gamma: s.policy.gamma,
            dedup_threshold: s.dedup_threshold,
            probe_l2: s.cbm.l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SasSection {
    pub enabled: bool,
    pub provider: Provider,
    pub corpus_dir: Option<PathBuf>,
    pub prompt_count: usize,
    pub candidates_per_prompt: usize,
    pub shots_per_pseudo: usize,
    pub lambda: f64,
    pub selective_fraction: Option<f64>,
}

impl Default for SasSection {
    fn default() -> Self {
        let p = ProviderConfig::default();
        Self {
            enabled: true,
            provider: p.provider,
            corpus_dir: None,
            prompt_count: p.prompt_count,
            candidates_per_prompt: p.candidates_per_prompt,
            shots_per_pseudo: 16,
            lambda: DEFAULT_LAMBDA,
            selective_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sim_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sim_threshold: DEFAULT_SIM_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where artifacts go. Not part of the config hash.
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sap: SapSection,
    pub sas: SasSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sap: SapSection::default(),
            sas: SasSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{raw}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("bad override key '{key}'")));
    }
    let value = value.trim();
    // Bare words that are not TOML literals are taken as strings.
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.split('.').map(String::from).collect(), parsed))
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = match cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(format!("'{p}' is not a section"))),
        };
    }
    // `lambda=4` should set a float field.
    let value = match (cur.get(last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Resolves defaults, an optional file's text, then overrides.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::config(e.to_string()))?;
        if let Some(text) = file_text {
            let file: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
            merge(&mut table, file);
        }
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::config(format!("config file {} not found", p.display())),
                _ => Error::io(p, e),
            })?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.policy().validate()?;
        if self.sap.query_images == 0 {
            return Err(Error::config("sap.query_images must be at least 1"));
        }
        if self.sap.source == SourceBackend::Fixture && self.sap.fixture_path.is_none() {
            return Err(Error::config("sap.source = \"fixture\" needs sap.fixture_path"));
        }
        if self.sap.source == SourceBackend::ExternalClient && self.sap.endpoint.is_none() {
            return Err(Error::config("sap.source = \"external_client\" needs sap.endpoint"));
        }
        if self.sas.lambda < 0.0 {
            return Err(Error::config("sas.lambda must be non-negative"));
        }
        if let Some(f) = self.sas.selective_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("sas.selective_fraction must be in (0, 1]"));
            }
        }
        if self.sas.provider == Provider::LocalRetrieval && self.sas.corpus_dir.is_none() {
            return Err(Error::config("sas.provider = \"local_retrieval\" needs sas.corpus_dir"));
        }
        if self.corpus_size() == 0 || self.model.pretrain_batch == 0 {
            return Err(Error::config("model.corpus_size and model.pretrain_batch must be positive"));
        }
        if self.dataset.base_new && self.dataset.classes < 2 {
            return Err(Error::config("a base-to-new split needs at least two classes"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// SHA-256 over the canonical JSON of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = PathBuf::new();
        let json = serde_json::to_string(&copy).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Pre-training corpus size after applying the generator default.
    pub fn corpus_size(&self) -> usize {
        self.model.corpus_size.unwrap_or(self.dataset.generator.default_corpus_size())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            generator: self.dataset.generator,
            classes: self.dataset.classes,
            shots: self.dataset.shots,
            test_per_class: self.dataset.test_per_class,
            rho: self.dataset.rho,
            test_rho: Some(self.dataset.test_rho),
            class_rho: self.dataset.class_rho.clone(),
            seed: self.seeds().derive("dataset"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            temperature: self.model.temperature,
            adaptation: self.model.adaptation,
            ..ModelConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            learning_rate: self.model.pretrain_lr,
            epochs: self.model.pretrain_epochs,
            batch_size: self.model.pretrain_batch,
            seed: self.seeds().derive("pretrain"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seeds().derive("shuffle"),
        }
    }

    pub fn policy(&self) -> ThresholdPolicy {
        ThresholdPolicy {
            mode: self.sap.policy,
            gamma: self.sap.gamma,
        }
    }

    pub fn sap_config(&self) -> SapConfig {
        SapConfig {
            query_images: self.sap.query_images,
            dedup_threshold: self.sap.dedup_threshold,
            policy: self.policy(),
            cbm: CbmConfig {
                l2: self.sap.probe_l2,
                ..CbmConfig::default()
            },
            ..SapConfig::default()
        }
    }

    pub fn client_config(&self) -> Option<ClientConfig> {
        self.sap.endpoint.as_ref().map(|endpoint| ClientConfig {
            endpoint: endpoint.clone(),
            token_env: self.sap.token_env.clone(),
            timeout_secs: self.sap.timeout_secs,
            max_retries: self.sap.max_retries,
            ..ClientConfig::default()
        })
    }

    pub fn shield_config(&self) -> ShieldConfig {
        ShieldConfig {
            provider: ProviderConfig {
                provider: self.sas.provider,
                prompt_count: self.sas.prompt_count,
                candidates_per_prompt: self.sas.candidates_per_prompt,
                corpus_dir: self.sas.corpus_dir.clone(),
                seed: self.seeds().derive("synthesis"),
            },
            shots_per_pseudo: self.sas.shots_per_pseudo,
            lambda: self.sas.lambda,
            selective_fraction: self.sas.selective_fraction,
            enabled: self.sas.enabled,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_defaults_file_overrides() {
        let file = "seed = 3\n[dataset]\nshots = 8\nrho = 0.5\n";
        let cfg = RunConfig::resolve(Some(file), &["dataset.rho=1".into(), "sas.provider=local_retrieval".into(), "sas.corpus_dir=\"c\"".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dataset.shots, 8);
        assert_eq!(cfg.dataset.rho, 1.0);
        assert_eq!(cfg.dataset.classes, 10);
        assert_eq!(cfg.sas.provider, Provider::LocalRetrieval);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(RunConfig::resolve(Some("[dataset]\nshotz = 1\n"), &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, &["nope".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.sas.selective_fraction = Some(0.1);
        let back = RunConfig::resolve(Some(&cfg.to_toml().unwrap()), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
