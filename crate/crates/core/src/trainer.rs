//! Triplet mining, the optimization loop and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{Dataset, Domain, FeatureSample};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights, SinkhornConfig};
use crate::model::{
    batch_objective, AblationFlag, AblationFlags, CompatibilityMode, ModelConfig, ModelParams, ObjectiveConfig,
    ObjectiveContext, Triplet,
};
use crate::numcore::{adam_step, AdamConfig, AdamState, Tape, Tensor};

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};

/// Optimization settings. Defaults follow the reference protocol: batch 4,
/// learning rate 1e-4, 75 epochs, every λ = 0.25.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation_flags: AblationFlags,
    pub sinkhorn: SinkhornConfig,
    pub compatibility_mode: CompatibilityMode,
    pub gradient_reversal: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 4,
            epochs: 75,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            weight_decay: adam.weight_decay,
            weights: LossWeights::default(),
            seed: 0,
            ablation_flags: AblationFlags::new(),
            sinkhorn: SinkhornConfig::default(),
            compatibility_mode: CompatibilityMode::Pairwise,
            gradient_reversal: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam_epsilon must be > 0 and weight_decay >= 0".into()));
        }
        if !(self.sinkhorn.epsilon > 0.0) || self.sinkhorn.iters == 0 {
            return Err(Error::Config("sinkhorn needs epsilon > 0 and iters >= 1".into()));
        }
        self.model.validate()?;
        self.objective().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            sinkhorn: self.sinkhorn,
            compatibility_mode: self.compatibility_mode,
            gradient_reversal: self.gradient_reversal,
            flags: self.ablation_flags.clone(),
        }
    }

    /// Whether encoders pool with attention under these flags.
    pub fn attention(&self) -> bool {
        !self.ablation_flags.contains(&AblationFlag::Attention)
    }
}

/// Digest of the training config and every input the model depends on.
/// The evaluation protocol is excluded so one checkpoint serves both.
pub fn config_hash(config: &TrainConfig, dataset: &Dataset) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for s in dataset.samples() {
        h.update(s.id.as_bytes());
        h.update([0]);
        h.update(s.label.as_bytes());
        h.update([0, s.domain as u8]);
        for d in [s.rows, s.cols, s.channels] {
            h.update((d as u64).to_le_bytes());
        }
        for x in &s.features {
            h.update(x.to_le_bytes());
        }
    }
    for e in dataset.embeddings().values() {
        h.update(e.label.as_bytes());
        for x in &e.vector {
            h.update(x.to_le_bytes());
        }
    }
    let split = dataset.split();
    for c in split.seen_classes.iter().chain([&"|".to_string()]).chain(&split.unseen_classes) {
        h.update(c.as_bytes());
        h.update([0]);
    }
    h.update(split.holdout_fraction.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Train samples of one domain grouped by seen class, ordered by id.
fn by_class(dataset: &Dataset, domain: Domain) -> BTreeMap<String, Vec<&FeatureSample>> {
    let mut out: BTreeMap<String, Vec<&FeatureSample>> = dataset
        .seen_classes()
        .into_iter()
        .map(|c| (c, Vec::new()))
        .collect();
    for s in dataset.train_samples(domain) {
        out.get_mut(&s.label).expect("train samples are seen").push(s);
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    out
}

/// For each class, the other-class photo whose embedding is nearest (ℓ2)
/// to the class's photo-embedding centroid; ties go to the smallest id.
///
/// `embeddings` rows align with `photos`.
pub fn hard_negatives<'a>(photos: &[&'a FeatureSample], embeddings: &Tensor) -> Result<BTreeMap<String, &'a FeatureSample>> {
    if embeddings.rows() != photos.len() {
        return Err(Error::dim("hard_negatives", embeddings.shape(), &[photos.len()]));
    }
    let d = embeddings.cols();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, p) in photos.iter().enumerate() {
        let e = sums.entry(p.label.as_str()).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(embeddings.row(i)).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    if sums.len() < 2 {
        return Err(Error::Data("hard-negative mining needs photos from >= 2 classes".into()));
    }
    let mut out = BTreeMap::new();
    for (label, (sum, n)) in &sums {
        let centroid: Vec<f64> = sum.iter().map(|x| x / *n as f64).collect();
        let mut best: Option<(f64, &'a FeatureSample)> = None;
        for (i, p) in photos.iter().enumerate() {
            if p.label == *label {
                continue;
            }
            let dist: f64 = embeddings
                .row(i)
                .iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let better = match best {
                None => true,
                Some((bd, bp)) => dist < bd || (dist == bd && p.id < bp.id),
            };
            if better {
                best = Some((dist, *p));
            }
        }
        out.insert(label.to_string(), best.expect("another class exists").1);
    }
    Ok(out)
}

/// Builds one epoch of triplets: one per training sketch, anchors dealt
/// round-robin over classes (class order reshuffled each round), positives
/// drawn uniformly from the anchor's class, negatives hard-mined with the
/// current photo encoder.
pub fn mine_triplets<'d>(
    dataset: &'d Dataset,
    params: &ModelParams,
    attention: bool,
    epoch_seed: u64,
) -> Result<Vec<Triplet<'d>>> {
    let sketches = by_class(dataset, Domain::Sketch);
    let photos = by_class(dataset, Domain::Photo);
    if sketches.len() < 2 {
        return Err(Error::Data("training needs >= 2 seen classes".into()));
    }
    for (label, list) in photos.iter().chain(&sketches) {
        if list.is_empty() {
            return Err(Error::Data(format!("seen class {label} has no training samples in one domain")));
        }
    }
    let flat: Vec<&FeatureSample> = photos.values().flatten().copied().collect();
    let emb = params.embed(&flat, Domain::Photo, attention)?;
    let negatives = hard_negatives(&flat, &emb)?;

    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut pools: BTreeMap<&str, (Vec<&FeatureSample>, usize)> = sketches
        .iter()
        .map(|(l, v)| {
            let mut v = v.clone();
            v.shuffle(&mut rng);
            (l.as_str(), (v, 0))
        })
        .collect();
    let total: usize = sketches.values().map(Vec::len).sum();
    let mut classes: Vec<&str> = sketches.keys().map(String::as_str).collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        classes.shuffle(&mut rng);
        for &label in &classes {
            if out.len() == total {
                break;
            }
            let (pool, next) = pools.get_mut(label).expect("class pool");
            let anchor = pool[*next % pool.len()];
            *next += 1;
            let candidates = &photos[label];
            let positive = candidates[rng.gen_range(0..candidates.len())];
            out.push(Triplet {
                anchor,
                positive,
                negative: negatives[label],
            });
        }
    }
    Ok(out)
}

/// One optimizer step on `batch`; returns the loss report from before the
/// update.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &[Triplet<'_>],
    ctx: &ObjectiveContext,
    objective: &ObjectiveConfig,
) -> Result<LossReport> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (loss, report) = batch_objective(&tape, &bound, batch, ctx, objective)?;
    tape.backward(loss)?;
    let vars = bound.vars();
    let mut tensors = params.tensors_mut();
    for (t, v) in tensors.iter_mut().zip(vars) {
        let g = tape.grad(v).ok_or_else(|| Error::Contract("parameter lost its gradient flag".into()))?;
        if !g.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        t.set_grad(g.into_data())?;
    }
    adam_step(&mut tensors, adam)?;
    for t in tensors {
        t.clear_grad();
    }
    Ok(report)
}

/// Seed of the triplet stream for `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng.gen()
}

/// Fresh parameters and optimizer state for `dataset` under `config`.
pub fn initial_checkpoint(dataset: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, ObjectiveContext)> {
    config.validate()?;
    let ctx = ObjectiveContext::new(dataset, config.model.n_bands)?;
    let (_, _, channels) = dataset.grid();
    let params = ModelParams::init(&config.model, channels, ctx.seen.len(), ctx.graph.num_edge_types(), config.seed)?;
    let adam = AdamState::new(params.named().into_iter().map(|(_, t)| t), config.adam());
    let ckpt = Checkpoint {
        params,
        adam,
        epoch: 0,
        config_hash: config_hash(config, dataset),
        history: Vec::new(),
    };
    Ok((ckpt, ctx))
}

/// Trains for `config.epochs` epochs, calling `on_epoch` with each epoch's
/// mean report.
pub fn fit_with<F>(dataset: &Dataset, config: &TrainConfig, mut on_epoch: F) -> Result<Checkpoint>
where
    F: FnMut(usize, &LossReport),
{
    let (mut ckpt, ctx) = initial_checkpoint(dataset, config)?;
    let objective = config.objective();
    for epoch in 0..config.epochs {
        let triplets = mine_triplets(dataset, &ckpt.params, config.attention(), epoch_seed(config.seed, epoch))?;
        let mut reports = Vec::with_capacity(triplets.len().div_ceil(config.batch_size));
        for batch in triplets.chunks(config.batch_size) {
            reports.push(train_step(&mut ckpt.params, &mut ckpt.adam, batch, &ctx, &objective)?);
        }
        let mean = LossReport::mean(&reports);
        log::info!(
            "epoch {}/{}: total {:.5} W {:.5} comp {:.5} dom {:.5} cls {:.5} sem {:.5}",
            epoch + 1,
            config.epochs,
            mean.total,
            mean.wasserstein,
            mean.compatibility,
            mean.domain,
            mean.classification,
            mean.semantic
        );
        on_epoch(epoch, &mean);
        ckpt.history.push(mean);
        ckpt.epoch = epoch + 1;
    }
    Ok(ckpt)
}

pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    fit_with(dataset, config, |_, _| {})
}

/// Writes `epoch,W,comp,dom,cls,sem,total` rows.
pub fn write_history_csv(path: &Path, history: &[LossReport]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,W,comp,dom,cls,sem,total")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            i + 1,
            r.wasserstein,
            r.compatibility,
            r.domain,
            r.classification,
            r.semantic,
            r.total
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_history_csv`].
pub fn read_history_csv(path: &Path) -> Result<Vec<LossReport>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if vals.len() != 6 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 7 columns, found {}", rec.len()),
            });
        }
        out.push(LossReport {
            wasserstein: vals[0],
            compatibility: vals[1],
            domain: vals[2],
            classification: vals[3],
            semantic: vals[4],
            total: vals[5],
        });
    }
    Ok(out)
}
