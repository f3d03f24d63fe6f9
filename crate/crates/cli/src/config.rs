//! Run configuration: one strict JSON document plus `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use xmzsr::ablation::AblationRow;
use xmzsr::dataio::{
    build_split, generate_synthetic, load_class_embeddings, load_feature_table, Dataset, Protocol, SyntheticConfig,
};
use xmzsr::trainer::TrainConfig;
use xmzsr::{Error, Result};

/// Where samples come from. Without file paths the synthetic generator runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub features: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    /// Seed of the generator and of the unseen-class draw.
    pub seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            features: None,
            classes: None,
            seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Defaults to `<out>/checkpoint.gtz`.
    pub checkpoint: Option<PathBuf>,
    pub protocols: Vec<Protocol>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            protocols: vec![Protocol::Zs, Protocol::Gzs],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Rows appended after the eight standard ones.
    pub extra_rows: Vec<AblationRow>,
    pub protocols: Vec<Protocol>,
    pub jobs: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            extra_rows: Vec::new(),
            protocols: vec![Protocol::Zs],
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Recursively overlays `patch` onto `base`. Keys absent from `base` are
/// kept so that strict deserialization reports them.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.key=value` override. The value is read as JSON
/// when it parses, else as a string.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {} is not an object", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("--set {key}: unknown key {part:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    Err(Error::Config("--set needs a non-empty key".into()))
}

/// Command-line overrides, applied after the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub protocol: Option<Protocol>,
    pub jobs: Option<usize>,
    pub set: Vec<String>,
}

impl RunConfig {
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut doc = serde_json::to_value(RunConfig::default()).map_err(config_err)?;
        if let Some(path) = path {
            if !path.exists() {
                return Err(Error::MissingInput(path.to_path_buf()));
            }
            let text = std::fs::read_to_string(path)?;
            let file: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if !file.is_object() {
                return Err(Error::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut doc, file);
        }
        for s in &overrides.set {
            apply_set(&mut doc, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(config_err)?;
        if let Some(seed) = overrides.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(p) = overrides.protocol {
            cfg.eval.protocols = vec![p];
            cfg.ablate.protocols = vec![p];
        }
        if let Some(j) = overrides.jobs {
            cfg.ablate.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if self.data.features.is_some() != self.data.classes.is_some() {
            return Err(Error::Config("data.features and data.classes must be given together".into()));
        }
        if self.eval.protocols.is_empty() || self.ablate.protocols.is_empty() {
            return Err(Error::Config("protocol lists must not be empty".into()));
        }
        if self.ablate.jobs == 0 {
            return Err(Error::Config("ablate.jobs must be >= 1".into()));
        }
        for row in &self.ablate.extra_rows {
            self.train_for(row).validate()?;
        }
        Ok(())
    }

    /// Training config for one ablation row.
    pub fn train_for(&self, row: &AblationRow) -> TrainConfig {
        TrainConfig {
            ablation_flags: row.flags.clone(),
            ..self.train.clone()
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.gtz"))
    }

    /// Loads the configured files, or generates synthetic data.
    pub fn dataset(&self) -> Result<Dataset> {
        let syn = &self.data.synthetic;
        match (&self.data.features, &self.data.classes) {
            (Some(features), Some(classes)) => {
                let samples = load_feature_table(features)?;
                let embeddings = load_class_embeddings(classes)?;
                let labels: Vec<String> = embeddings.keys().cloned().collect();
                let mut split = build_split(&labels, syn.n_unseen, self.data.seed, Protocol::Zs)?;
                split.holdout_fraction = syn.holdout_fraction;
                Dataset::new(samples, embeddings, split)
            }
            _ => generate_synthetic(syn, self.data.seed),
        }
    }
}
