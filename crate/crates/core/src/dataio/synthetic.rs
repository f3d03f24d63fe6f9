use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_split, ClassEmbedding, Dataset, Domain, FeatureSample, Protocol, SEMANTIC_DIM};
use crate::error::{Error, Result};

/// Knobs for the synthetic generator.
///
/// Class semantic vectors are unit vectors in R^300 clustered around
/// `semantic_groups` random directions. Visual class means are a fixed random
/// linear map of those vectors scaled by `sigma_between`, so semantic
/// neighbours are visual neighbours. Photos are `mean + noise`; sketches add a
/// modality offset of scale `sigma_mod`, itself a second fixed linear map of
/// the class vector, so an unseen class's offset follows from its semantics.
/// The last
/// `background_cells` cells of every grid hold a shared background pattern
/// instead of the object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    pub sigma_mod: f64,
    pub semantic_groups: usize,
    pub group_strength: f64,
    pub background_cells: usize,
    pub n_unseen: usize,
    pub holdout_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 16,
            per_class: 20,
            channels: 16,
            rows: 2,
            cols: 2,
            sigma_between: 1.0,
            sigma_within: 0.25,
            sigma_mod: 0.25,
            semantic_groups: 4,
            group_strength: 0.5,
            background_cells: 1,
            n_unseen: 4,
            holdout_fraction: super::split::DEFAULT_HOLDOUT,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 4 {
            return Err(Error::Config(format!("n_classes must be >= 4, got {}", self.n_classes)));
        }
        for (name, v) in [
            ("per_class", self.per_class),
            ("channels", self.channels),
            ("rows", self.rows),
            ("cols", self.cols),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.background_cells >= self.rows * self.cols {
            return Err(Error::Config("background_cells must leave at least one object cell".into()));
        }
        for (name, v) in [
            ("sigma_between", self.sigma_between),
            ("sigma_within", self.sigma_within),
            ("sigma_mod", self.sigma_mod),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.group_strength) {
            return Err(Error::Config("group_strength must lie in [0,1]".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn class_label(k: usize) -> String {
    format!("class_{k:02}")
}

/// Generates a dataset deterministically from `(config, seed)`, with a
/// ZS split of `config.n_unseen` random unseen classes.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.channels;
    let cells = config.rows * config.cols;
    let object_cells = cells - config.background_cells;

    let centers: Vec<Vec<f64>> = (0..config.semantic_groups.max(1))
        .map(|_| normalize(gaussian(&mut rng, SEMANTIC_DIM)))
        .collect();
    let (a, b) = if config.semantic_groups == 0 {
        (0.0, 1.0)
    } else {
        (config.group_strength.sqrt(), (1.0 - config.group_strength).sqrt())
    };
    let semantics: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|k| {
            let own = normalize(gaussian(&mut rng, SEMANTIC_DIM));
            let c = &centers[k % centers.len()];
            normalize(c.iter().zip(&own).map(|(x, y)| a * x + b * y).collect())
        })
        .collect();

    // Visual map R^300 -> R^F with N(0,1) entries: unit semantics give
    // per-coordinate N(0, 1) means before scaling.
    let map: Vec<Vec<f64>> = (0..f).map(|_| gaussian(&mut rng, SEMANTIC_DIM)).collect();
    let means: Vec<Vec<f64>> = semantics
        .iter()
        .map(|z| {
            map.iter()
                .map(|row| config.sigma_between * row.iter().zip(z).map(|(m, x)| m * x).sum::<f64>())
                .collect()
        })
        .collect();
    let background: Vec<f64> = gaussian(&mut rng, f).iter().map(|x| x * config.sigma_between).collect();
    // Sketch offsets come from a second fixed map of the semantics, so the
    // domain gap of an unseen class is predictable from its class vector.
    let mod_map: Vec<Vec<f64>> = (0..f).map(|_| gaussian(&mut rng, SEMANTIC_DIM)).collect();
    let offsets: Vec<Vec<f64>> = semantics
        .iter()
        .map(|z| {
            mod_map
                .iter()
                .map(|row| config.sigma_mod * row.iter().zip(z).map(|(m, x)| m * x).sum::<f64>())
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(config.n_classes * config.per_class * 2);
    for k in 0..config.n_classes {
        for domain in [Domain::Photo, Domain::Sketch] {
            for i in 0..config.per_class {
                let mut features = Vec::with_capacity(cells * f);
                for c in 0..cells {
                    let noise = gaussian(&mut rng, f);
                    for j in 0..f {
                        let base = if c < object_cells {
                            let off = if domain == Domain::Sketch { offsets[k][j] } else { 0.0 };
                            means[k][j] + off
                        } else {
                            background[j]
                        };
                        features.push(base + config.sigma_within * noise[j]);
                    }
                }
                samples.push(FeatureSample {
                    id: format!("{}_{}_{i:03}", class_label(k), domain),
                    label: class_label(k),
                    domain,
                    rows: config.rows,
                    cols: config.cols,
                    channels: f,
                    features,
                });
            }
        }
    }

    let embeddings: BTreeMap<String, ClassEmbedding> = semantics
        .into_iter()
        .enumerate()
        .map(|(k, v)| ClassEmbedding::new(class_label(k), v).map(|e| (class_label(k), e)))
        .collect::<Result<_>>()?;
    let classes: Vec<String> = embeddings.keys().cloned().collect();
    let mut split = build_split(&classes, config.n_unseen, seed, Protocol::Zs)?;
    split.holdout_fraction = config.holdout_fraction;
    Dataset::new(samples, embeddings, split)
}
