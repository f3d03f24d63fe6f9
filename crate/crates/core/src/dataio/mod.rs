//! Feature tables, class embeddings, synthetic data and seen/unseen splits.

mod csvio;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csvio::{
    load_class_embeddings, load_feature_table, write_class_embeddings, write_feature_table,
};
pub use split::build_split;
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Width of a class semantic vector.
pub const SEMANTIC_DIM: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sketch,
    Photo,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Sketch => "sketch",
            Domain::Photo => "photo",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Domain::Sketch),
            "photo" => Ok(Domain::Photo),
            other => Err(Error::Data(format!("unknown domain {other:?}"))),
        }
    }
}

/// Retrieval protocol: zero-shot (unseen gallery) or generalized (seen ∪ unseen).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Zs,
    Gzs,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Zs => "zs",
            Protocol::Gzs => "gzs",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zs" => Ok(Protocol::Zs),
            "gzs" => Ok(Protocol::Gzs),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// One sketch or photo as an `rows × cols × channels` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub id: String,
    pub label: String,
    pub domain: Domain,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// Row-major over (row, col, channel).
    pub features: Vec<f64>,
}

impl FeatureSample {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.channels == 0 {
            return Err(Error::Data(format!("sample {} has an empty grid", self.id)));
        }
        if self.features.len() != self.rows * self.cols * self.channels {
            return Err(Error::Data(format!(
                "sample {} has {} features, grid needs {}",
                self.id,
                self.features.len(),
                self.rows * self.cols * self.channels
            )));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("sample {} has a non-finite feature", self.id)));
        }
        Ok(())
    }
}

/// Per-class semantic side information.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
}

impl ClassEmbedding {
    pub fn new(label: String, vector: Vec<f64>) -> Result<Self> {
        if vector.len() != SEMANTIC_DIM {
            return Err(Error::Schema(format!(
                "embedding for {label} has {} values, expected {SEMANTIC_DIM}",
                vector.len()
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("embedding for {label} is non-finite")));
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-9 {
            return Err(Error::Data(format!("embedding for {label} has zero norm")));
        }
        Ok(ClassEmbedding { label, vector })
    }
}

/// Disjoint seen/unseen class sets plus the per-class fraction of seen
/// samples held out for generalized evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: BTreeSet<String>,
    pub unseen_classes: BTreeSet<String>,
    pub protocol: Protocol,
    pub holdout_fraction: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seen_classes.is_empty() || self.unseen_classes.is_empty() {
            return Err(Error::Config("seen and unseen class sets must be nonempty".into()));
        }
        if let Some(c) = self.seen_classes.intersection(&self.unseen_classes).next() {
            return Err(Error::Config(format!("class {c} is both seen and unseen")));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in [0,1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }

    pub fn with_protocol(&self, protocol: Protocol) -> Self {
        SplitSpec {
            protocol,
            ..self.clone()
        }
    }
}

/// Samples, class embeddings and the split they are evaluated under.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<FeatureSample>,
    embeddings: BTreeMap<String, ClassEmbedding>,
    split: SplitSpec,
    holdout: BTreeSet<usize>,
}

impl Dataset {
    pub fn new(
        samples: Vec<FeatureSample>,
        embeddings: BTreeMap<String, ClassEmbedding>,
        split: SplitSpec,
    ) -> Result<Self> {
        split.validate()?;
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("dataset has no samples".into()))?;
        let grid = (first.rows, first.cols, first.channels);
        let mut ids = BTreeSet::new();
        for s in &samples {
            s.validate()?;
            if (s.rows, s.cols, s.channels) != grid {
                return Err(Error::Schema(format!("sample {} grid differs from {grid:?}", s.id)));
            }
            if !embeddings.contains_key(&s.label) {
                return Err(Error::Data(format!("label {} has no class embedding", s.label)));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
        }
        let classes: BTreeSet<&String> = split.seen_classes.iter().chain(&split.unseen_classes).collect();
        for label in embeddings.keys() {
            if !classes.contains(label) {
                return Err(Error::Data(format!("class {label} is in neither split partition")));
            }
        }
        for label in &classes {
            if !embeddings.contains_key(*label) {
                return Err(Error::Data(format!("split class {label} has no embedding")));
            }
        }

        // Held-out seen samples: the last `floor(f·n)` ids per (class, domain),
        // never the whole class.
        let mut groups: BTreeMap<(&str, Domain), Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry((s.label.as_str(), s.domain)).or_default().push(i);
        }
        let mut holdout = BTreeSet::new();
        for ((label, _), idx) in &mut groups {
            if !split.seen_classes.contains(*label) {
                continue;
            }
            idx.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
            let n_hold = ((idx.len() as f64) * split.holdout_fraction).floor() as usize;
            let n_hold = n_hold.min(idx.len() - 1);
            holdout.extend(idx[idx.len() - n_hold..].iter().copied());
        }

        for label in &classes {
            for domain in [Domain::Sketch, Domain::Photo] {
                let n_train = groups
                    .get(&(label.as_str(), domain))
                    .map(|v| v.iter().filter(|i| !holdout.contains(i)).count())
                    .unwrap_or(0);
                if n_train == 0 {
                    return Err(Error::Data(format!("class {label} has no {domain} samples")));
                }
            }
        }

        Ok(Dataset {
            samples,
            embeddings,
            split,
            holdout,
        })
    }

    pub fn samples(&self) -> &[FeatureSample] {
        &self.samples
    }

    pub fn embeddings(&self) -> &BTreeMap<String, ClassEmbedding> {
        &self.embeddings
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    /// Replaces the split, re-validating every invariant.
    pub fn with_split(self, split: SplitSpec) -> Result<Self> {
        Dataset::new(self.samples, self.embeddings, split)
    }

    /// `(rows, cols, channels)` shared by every sample.
    pub fn grid(&self) -> (usize, usize, usize) {
        let s = &self.samples[0];
        (s.rows, s.cols, s.channels)
    }

    /// All class labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        self.embeddings.keys().cloned().collect()
    }

    /// Seen class labels in sorted order; positions are classifier indices.
    pub fn seen_classes(&self) -> Vec<String> {
        self.split.seen_classes.iter().cloned().collect()
    }

    pub fn is_seen(&self, label: &str) -> bool {
        self.split.seen_classes.contains(label)
    }

    fn is_held_out(&self, index: usize) -> bool {
        self.holdout.contains(&index)
    }

    /// Seen-class samples used for training (held-out ones excluded).
    pub fn train_samples(&self, domain: Domain) -> Vec<&FeatureSample> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(i, s)| s.domain == domain && self.is_seen(&s.label) && !self.is_held_out(*i))
            .map(|(_, s)| s)
            .collect()
    }

    /// Samples available at test time under `protocol`: unseen classes for
    /// ZS, plus held-out seen samples for GZS.
    pub fn test_samples(&self, domain: Domain, protocol: Protocol) -> Vec<&FeatureSample> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                s.domain == domain
                    && (self.split.unseen_classes.contains(&s.label)
                        || (protocol == Protocol::Gzs && self.is_held_out(*i)))
            })
            .map(|(_, s)| s)
            .collect()
    }
}

#[cfg(test)]
mod tests;
