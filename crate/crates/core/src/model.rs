//! Full parameter set, ablation switches and the batch objective.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Domain, FeatureSample, SEMANTIC_DIM};
use crate::encoder::{
    class_logits, decode_semantic, domain_logit, encode, BoundEncoder, BoundHeads, BoundLinear, EncoderParams, HeadParams,
    Linear,
};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, compatibility_loss, compatibility_loss_batch_all, domain_loss, semantic_loss, total_loss,
    wasserstein_sinkhorn, LossReport, LossTerms, LossWeights, SinkhornConfig,
};
use crate::numcore::{Tape, Tensor, Var};
use crate::semgraph::{refine_prototypes, AdjacencySource, ClassPrototypes, GCNLayerParams, GTLayerParams, SemanticGraph};

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub gcn_hidden: usize,
    pub gcn_layers: usize,
    pub gt_layers: usize,
    pub n_bands: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 256,
            encoder_layers: 3,
            decoder_layers: 1,
            gcn_hidden: 256,
            gcn_layers: 2,
            gt_layers: 1,
            n_bands: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("gcn_hidden", self.gcn_hidden),
            ("gcn_layers", self.gcn_layers),
            ("gt_layers", self.gt_layers),
            ("n_bands", self.n_bands),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// One switch per removable component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    /// Drop the compatibility loss.
    Comp,
    /// Drop the optimal-transport term.
    Wass,
    /// Drop the domain loss.
    Dom,
    /// Drop the classification loss.
    Cls,
    /// Drop the semantic reconstruction loss.
    Sem,
    /// Pool grid cells uniformly.
    Attention,
    /// Reconstruct raw class vectors instead of refined prototypes.
    Gt,
    /// Refine prototypes with the GCN over the raw similarity graph.
    GcnOnly,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 8] = [
        AblationFlag::Comp,
        AblationFlag::Wass,
        AblationFlag::Dom,
        AblationFlag::Cls,
        AblationFlag::Sem,
        AblationFlag::Attention,
        AblationFlag::Gt,
        AblationFlag::GcnOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationFlag::Comp => "comp",
            AblationFlag::Wass => "wass",
            AblationFlag::Dom => "dom",
            AblationFlag::Cls => "cls",
            AblationFlag::Sem => "sem",
            AblationFlag::Attention => "attention",
            AblationFlag::Gt => "gt",
            AblationFlag::GcnOnly => "gcn_only",
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationFlag::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation flag {s:?}")))
    }
}

pub type AblationFlags = BTreeSet<AblationFlag>;

/// How the compatibility loss normalizes each anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatibilityMode {
    /// Positive against the anchor's own negative.
    #[default]
    Pairwise,
    /// Positive against every photo in the batch.
    BatchAll,
}

/// Settings of the batch objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub sinkhorn: SinkhornConfig,
    pub compatibility_mode: CompatibilityMode,
    pub gradient_reversal: bool,
    pub flags: AblationFlags,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.flags.contains(&AblationFlag::Gt) && self.flags.contains(&AblationFlag::GcnOnly) {
            return Err(Error::Config("ablation flags gt and gcn_only are mutually exclusive".into()));
        }
        Ok(())
    }

    fn on(&self, f: AblationFlag) -> bool {
        !self.flags.contains(&f)
    }

    fn adjacency(&self) -> AdjacencySource {
        if self.flags.contains(&AblationFlag::GcnOnly) {
            AdjacencySource::Similarity
        } else {
            AdjacencySource::GraphTransformer
        }
    }
}

/// Every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub sketch: EncoderParams,
    pub photo: EncoderParams,
    pub heads: HeadParams,
    pub gt: Vec<GTLayerParams>,
    pub gcn: Vec<GCNLayerParams>,
}

impl ModelParams {
    /// Glorot-initialized parameters; attention logits of the graph layers
    /// start at zero (uniform over edge types).
    pub fn init(cfg: &ModelConfig, channels: usize, n_seen: usize, n_edge_types: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 || n_seen == 0 {
            return Err(Error::Config("model needs channels >= 1 and >= 1 seen class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sketch = EncoderParams::init(Domain::Sketch, channels, cfg.hidden_dim, cfg.embed_dim, cfg.encoder_layers, &mut rng);
        let photo = EncoderParams::init(Domain::Photo, channels, cfg.hidden_dim, cfg.embed_dim, cfg.encoder_layers, &mut rng);
        let heads = HeadParams::init(cfg.embed_dim, n_seen, cfg.hidden_dim, cfg.decoder_layers, &mut rng);
        let gt = (0..cfg.gt_layers).map(|_| GTLayerParams::uniform(n_edge_types)).collect();
        let mut dims = vec![SEMANTIC_DIM];
        dims.extend(std::iter::repeat(cfg.gcn_hidden).take(cfg.gcn_layers - 1));
        dims.push(SEMANTIC_DIM);
        let gcn = dims
            .windows(2)
            .map(|w| {
                let l = Linear::glorot(w[0], w[1], &mut rng);
                GCNLayerParams {
                    weight: l.weight,
                    bias: l.bias,
                }
            })
            .collect();
        Ok(ModelParams {
            sketch,
            photo,
            heads,
            gt,
            gcn,
        })
    }

    /// Parameters with their stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for enc in [&self.sketch, &self.photo] {
            let d = enc.domain;
            out.push((format!("{d}.attention.weight"), &enc.attention_weight));
            out.push((format!("{d}.attention.bias"), &enc.attention_bias));
            for (i, l) in enc.layers.iter().enumerate() {
                out.push((format!("{d}.layer{i}.weight"), &l.weight));
                out.push((format!("{d}.layer{i}.bias"), &l.bias));
            }
        }
        let h = &self.heads;
        out.push(("head.domain.weight".into(), &h.domain_head.weight));
        out.push(("head.domain.bias".into(), &h.domain_head.bias));
        out.push(("head.label.weight".into(), &h.label_head.weight));
        out.push(("head.label.bias".into(), &h.label_head.bias));
        for (i, l) in h.decoder.iter().enumerate() {
            out.push((format!("head.decoder{i}.weight"), &l.weight));
            out.push((format!("head.decoder{i}.bias"), &l.bias));
        }
        for (i, g) in self.gt.iter().enumerate() {
            out.push((format!("gt{i}.channel0"), &g.channel_logits[0]));
            out.push((format!("gt{i}.channel1"), &g.channel_logits[1]));
        }
        for (i, g) in self.gcn.iter().enumerate() {
            out.push((format!("gcn{i}.weight"), &g.weight));
            out.push((format!("gcn{i}.bias"), &g.bias));
        }
        out
    }

    /// Mutable view in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for enc in [&mut self.sketch, &mut self.photo] {
            out.push(&mut enc.attention_weight);
            out.push(&mut enc.attention_bias);
            for l in &mut enc.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        let h = &mut self.heads;
        out.push(&mut h.domain_head.weight);
        out.push(&mut h.domain_head.bias);
        out.push(&mut h.label_head.weight);
        out.push(&mut h.label_head.bias);
        for l in &mut h.decoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for g in &mut self.gt {
            let [a, b] = &mut g.channel_logits;
            out.push(a);
            out.push(b);
        }
        for g in &mut self.gcn {
            out.push(&mut g.weight);
            out.push(&mut g.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape) -> BoundModel {
        let vars: Vec<Var> = self.named().iter().map(|(_, t)| tape.leaf(t)).collect();
        self.bind_vars(&vars).expect("one var per tensor")
    }

    /// Assembles tape handles given in the order of [`ModelParams::named`].
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.named().len();
        if vars.len() != expected {
            return Err(Error::Contract(format!("expected {expected} parameter handles, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let linear = |n: &mut dyn FnMut() -> Var| BoundLinear {
            weight: n(),
            bias: n(),
        };
        let encoder = |e: &EncoderParams, n: &mut dyn FnMut() -> Var| BoundEncoder {
            domain: e.domain,
            attention_weight: n(),
            attention_bias: n(),
            layers: e.layers.iter().map(|_| linear(n)).collect(),
        };
        let sketch = encoder(&self.sketch, &mut next);
        let photo = encoder(&self.photo, &mut next);
        let heads = BoundHeads {
            domain_head: BoundLinear { weight: next(), bias: next() },
            label_head: BoundLinear { weight: next(), bias: next() },
            decoder: self.heads.decoder.iter().map(|_| BoundLinear { weight: next(), bias: next() }).collect(),
        };
        let gt = self.gt.iter().map(|_| (next(), next())).collect();
        let gcn = self.gcn.iter().map(|_| (next(), next())).collect();
        Ok(BoundModel {
            sketch,
            photo,
            heads,
            gt,
            gcn,
        })
    }

    pub fn encoder(&self, domain: Domain) -> &EncoderParams {
        match domain {
            Domain::Sketch => &self.sketch,
            Domain::Photo => &self.photo,
        }
    }

    /// Embeds samples of one modality with frozen parameters, `[N, D]`.
    pub fn embed(&self, samples: &[&FeatureSample], domain: Domain, attention: bool) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let enc = self.encoder(domain);
        let mut data = Vec::with_capacity(samples.len() * enc.embed_dim());
        for chunk in samples.chunks(CHUNK) {
            let tape = Tape::new();
            let bound = enc.bind(&tape);
            let e = encode(&tape, chunk, &bound, attention)?;
            data.extend(tape.data(e));
        }
        Tensor::new(vec![samples.len(), enc.embed_dim()], data)
    }

    /// Refined class prototypes with frozen parameters.
    pub fn prototypes(&self, graph: &SemanticGraph, source: AdjacencySource) -> Result<ClassPrototypes> {
        crate::semgraph::prototypes(graph, &self.gt, &self.gcn, source)
    }
}

/// Tape handles of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub sketch: BoundEncoder,
    pub photo: BoundEncoder,
    pub heads: BoundHeads,
    pub gt: Vec<(Var, Var)>,
    pub gcn: Vec<(Var, Var)>,
}

impl BoundModel {
    /// Handles in the order of [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for e in [&self.sketch, &self.photo] {
            v.push(e.attention_weight);
            v.push(e.attention_bias);
            for l in &e.layers {
                v.extend([l.weight, l.bias]);
            }
        }
        let h = &self.heads;
        v.extend([h.domain_head.weight, h.domain_head.bias, h.label_head.weight, h.label_head.bias]);
        for l in &h.decoder {
            v.extend([l.weight, l.bias]);
        }
        for &(a, b) in self.gt.iter().chain(&self.gcn) {
            v.extend([a, b]);
        }
        v
    }
}

/// Anchor sketch, positive photo and negative photo.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet<'a> {
    pub anchor: &'a FeatureSample,
    pub positive: &'a FeatureSample,
    pub negative: &'a FeatureSample,
}

/// Fixed inputs of the objective: class graph and label indexing.
#[derive(Clone, Debug)]
pub struct ObjectiveContext {
    pub graph: SemanticGraph,
    /// Sorted seen labels; positions are classifier indices.
    pub seen: Vec<String>,
}

impl ObjectiveContext {
    pub fn new(dataset: &Dataset, n_bands: usize) -> Result<Self> {
        Ok(ObjectiveContext {
            graph: SemanticGraph::build(dataset.embeddings(), n_bands)?,
            seen: dataset.seen_classes(),
        })
    }

    pub fn seen_index(&self, label: &str) -> Result<usize> {
        self.seen
            .binary_search_by(|l| l.as_str().cmp(label))
            .map_err(|_| Error::Contract(format!("class {label} is not a seen class")))
    }

    fn graph_index(&self, label: &str) -> Result<usize> {
        self.graph
            .index_of(label)
            .ok_or_else(|| Error::Contract(format!("class {label} is not in the semantic graph")))
    }
}

/// Per-row ℓ2 distance between equal-shape `[N, D]` matrices.
pub fn row_distances(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    tape.sqrt(tape.sum_last(tape.mul(diff, diff)?)?)
}

/// Builds the weighted objective for one batch on `tape`.
pub fn batch_objective(
    tape: &Tape,
    model: &BoundModel,
    batch: &[Triplet<'_>],
    ctx: &ObjectiveContext,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    let attention = cfg.on(AblationFlag::Attention);
    let anchors: Vec<&FeatureSample> = batch.iter().map(|t| t.anchor).collect();
    let positives: Vec<&FeatureSample> = batch.iter().map(|t| t.positive).collect();
    let negatives: Vec<&FeatureSample> = batch.iter().map(|t| t.negative).collect();
    let es = encode(tape, &anchors, &model.sketch, attention)?;
    let ep = encode(tape, &positives, &model.photo, attention)?;
    let en = encode(tape, &negatives, &model.photo, attention)?;

    let mut terms = LossTerms::default();
    if cfg.on(AblationFlag::Wass) {
        terms.wasserstein = Some(wasserstein_sinkhorn(tape, es, ep, cfg.sinkhorn.epsilon, cfg.sinkhorn.iters)?);
    }
    if cfg.on(AblationFlag::Comp) {
        terms.compatibility = Some(match cfg.compatibility_mode {
            CompatibilityMode::Pairwise => {
                compatibility_loss(tape, row_distances(tape, es, ep)?, row_distances(tape, es, en)?)?
            }
            CompatibilityMode::BatchAll => {
                let photos = tape.concat_rows(&[ep, en])?;
                let d = tape.sqrt(tape.pairwise_sq_dist(es, photos)?)?;
                let pos: Vec<usize> = (0..batch.len()).collect();
                compatibility_loss_batch_all(tape, d, &pos)?
            }
        });
    }
    let photos = tape.concat_rows(&[ep, en])?;
    if cfg.on(AblationFlag::Dom) {
        let zs = domain_logit(tape, es, &model.heads, cfg.gradient_reversal)?;
        let zp = domain_logit(tape, photos, &model.heads, cfg.gradient_reversal)?;
        terms.domain = Some(domain_loss(tape, zs, zp, cfg.weights.domain_target)?);
    }
    let all = tape.concat_rows(&[es, photos])?;
    let all_samples: Vec<&FeatureSample> = anchors.iter().chain(&positives).chain(&negatives).copied().collect();
    if cfg.on(AblationFlag::Cls) {
        let labels = all_samples
            .iter()
            .map(|s| ctx.seen_index(&s.label))
            .collect::<Result<Vec<_>>>()?;
        let logits = class_logits(tape, all, &model.heads)?;
        terms.classification = Some(classification_loss(tape, &[(logits, &labels)])?);
    }
    if cfg.on(AblationFlag::Sem) {
        let rows = all_samples
            .iter()
            .map(|s| ctx.graph_index(&s.label))
            .collect::<Result<Vec<_>>>()?;
        let table = if cfg.flags.contains(&AblationFlag::Gt) {
            tape.constant(&ctx.graph.node_features)
        } else {
            refine_prototypes(tape, &ctx.graph, &model.gt, &model.gcn, cfg.adjacency())?
        };
        let targets = tape.select_rows(table, &rows)?;
        let decoded = decode_semantic(tape, all, &model.heads)?;
        terms.semantic = Some(semantic_loss(tape, decoded, targets)?);
    }
    total_loss(tape, &terms, &cfg.weights)
}

#[cfg(test)]
mod tests;
