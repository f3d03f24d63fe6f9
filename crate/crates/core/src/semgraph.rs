//! Class-level semantic graph and its graph-transformer/GCN refinement.
//!
//! Nodes are classes with their 300-d semantic vectors. Edge weights are
//! clamped cosine similarities, split into similarity bands so that the
//! graph-transformer layer has several candidate edge types (plus the
//! identity) to compose into meta-path adjacencies.

use std::collections::BTreeMap;

use crate::dataio::{ClassEmbedding, SEMANTIC_DIM};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Class graph built from semantic vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGraph {
    pub labels: Vec<String>,
    /// `K × 300` node features.
    pub node_features: Tensor,
    /// `K × K` clamped cosine similarity with unit diagonal.
    pub similarity: Tensor,
    /// Banded adjacencies followed by the identity.
    pub edge_types: Vec<Tensor>,
}

impl SemanticGraph {
    /// Builds the graph over all classes in label order.
    pub fn build(embeddings: &BTreeMap<String, ClassEmbedding>, n_bands: usize) -> Result<Self> {
        let labels: Vec<String> = embeddings.keys().cloned().collect();
        let vectors: Vec<Vec<f64>> = embeddings.values().map(|e| e.vector.clone()).collect();
        let similarity = build_similarity(&vectors)?;
        let edge_types = band_edge_types(&similarity, n_bands)?;
        let node_features = Tensor::from_rows(&vectors)?;
        Ok(SemanticGraph {
            labels,
            node_features,
            similarity,
            edge_types,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_edge_types(&self) -> usize {
        self.edge_types.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// `S[i][j] = max(0, cos(z_i, z_j))` with the diagonal forced to 1.
pub fn build_similarity(vectors: &[Vec<f64>]) -> Result<Tensor> {
    let k = vectors.len();
    if k < 2 {
        return Err(Error::Data(format!("similarity graph needs >= 2 classes, got {k}")));
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::Data(format!("class vector {i} has zero norm")));
    }
    let mut s = Tensor::zeros(&[k, k]);
    for i in 0..k {
        s.data_mut()[i * k + i] = 1.0;
        for j in (i + 1)..k {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(0.0, 1.0);
            s.data_mut()[i * k + j] = c;
            s.data_mut()[j * k + i] = c;
        }
    }
    Ok(s)
}

/// Band index of a similarity value in `[0,1]` split into `n_bands` equal
/// intervals; 1.0 belongs to the last band.
pub fn band_of(value: f64, n_bands: usize) -> usize {
    ((value * n_bands as f64).floor() as usize).min(n_bands - 1)
}

/// Splits the off-diagonal similarities into `n_bands` adjacency matrices
/// and appends the identity, giving `n_bands + 1` edge types.
pub fn band_edge_types(similarity: &Tensor, n_bands: usize) -> Result<Vec<Tensor>> {
    if n_bands < 1 {
        return Err(Error::Config("n_bands must be >= 1".into()));
    }
    let k = similarity.rows();
    if similarity.shape() != [k, k] {
        return Err(Error::dim("band_edge_types", similarity.shape(), &[k, k]));
    }
    let mut bands = vec![Tensor::zeros(&[k, k]); n_bands];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let v = similarity.at(i, j);
            if v < 0.0 {
                return Err(Error::Contract("similarity entries must be nonnegative".into()));
            }
            bands[band_of(v, n_bands)].data_mut()[i * k + j] = v;
        }
    }
    bands.push(Tensor::eye(k));
    Ok(bands)
}

/// Attention logits of one graph-transformer layer, one vector per
/// selection channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GTLayerParams {
    pub channel_logits: [Tensor; 2],
}

impl GTLayerParams {
    /// Uniform attention over `num_edge_types` candidates.
    pub fn uniform(num_edge_types: usize) -> Self {
        let z = Tensor::zeros(&[num_edge_types]).with_grad();
        GTLayerParams {
            channel_logits: [z.clone(), z],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GCNLayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Refined class prototypes in label order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    pub labels: Vec<String>,
    pub vectors: Tensor,
}

/// Edge-type adjacencies stacked as a `[T, K·K]` tape constant.
#[derive(Clone, Copy, Debug)]
pub struct EdgeStack {
    pub stacked: Var,
    pub num_types: usize,
    pub num_nodes: usize,
}

impl EdgeStack {
    pub fn new(tape: &Tape, edge_types: &[Tensor]) -> Result<Self> {
        let first = edge_types
            .first()
            .ok_or_else(|| Error::Contract("edge type list is empty".into()))?;
        let k = first.rows();
        let mut data = Vec::with_capacity(edge_types.len() * k * k);
        for a in edge_types {
            if a.shape() != [k, k] {
                return Err(Error::dim("edge_types", first.shape(), a.shape()));
            }
            data.extend_from_slice(a.data());
        }
        let stacked = tape.constant_from(vec![edge_types.len(), k * k], data)?;
        Ok(EdgeStack {
            stacked,
            num_types: edge_types.len(),
            num_nodes: k,
        })
    }
}

/// `Σ_t scores[t]·A_t` for a length-`T` score vector.
pub fn soft_select(tape: &Tape, edges: &EdgeStack, scores: Var) -> Result<Var> {
    if tape.shape(scores) != [edges.num_types] {
        return Err(Error::dim("soft_select", &tape.shape(scores), &[edges.num_types]));
    }
    let row = tape.reshape(scores, &[1, edges.num_types])?;
    let mixed = tape.matmul(row, edges.stacked)?;
    tape.reshape(mixed, &[edges.num_nodes, edges.num_nodes])
}

/// One graph-transformer layer: `row_normalize(Q₂·Q₁·prev)` where
/// `Q_c = Σ_t softmax(logits_c)[t]·A_t`. With `prev = None` this is the
/// 2-hop meta-path adjacency `row_normalize(Q₂·Q₁)`.
pub fn gt_layer(tape: &Tape, edges: &EdgeStack, logits: (Var, Var), prev: Option<Var>) -> Result<Var> {
    let a1 = tape.softmax(logits.0)?;
    let a2 = tape.softmax(logits.1)?;
    gt_layer_scores(tape, edges, (a1, a2), prev)
}

/// [`gt_layer`] with attention scores given directly.
pub fn gt_layer_scores(tape: &Tape, edges: &EdgeStack, scores: (Var, Var), prev: Option<Var>) -> Result<Var> {
    let q1 = soft_select(tape, edges, scores.0)?;
    let q2 = soft_select(tape, edges, scores.1)?;
    let mut path = tape.matmul(q2, q1)?;
    if let Some(p) = prev {
        path = tape.matmul(path, p)?;
    }
    tape.row_normalize(path)
}

/// GCN propagation `act(D̃^{-1/2}(A + I)D̃^{-1/2}·H·W + b)` with `D̃` the
/// row sums of `A + I`; `act` is ReLU when `relu` is set.
pub fn gcn_layer(tape: &Tape, adjacency: Var, h: Var, weight: Var, bias: Var, relu: bool) -> Result<Var> {
    let shape = tape.shape(adjacency);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("gcn_layer", &shape, &shape));
    }
    if tape.data(adjacency).iter().any(|&x| x < 0.0) {
        return Err(Error::Contract("gcn adjacency has a negative entry".into()));
    }
    let k = shape[0];
    let eye = tape.constant(&Tensor::eye(k));
    let tilde = tape.add(adjacency, eye)?;
    let deg_sqrt = tape.sqrt(tape.sum_last(tilde)?)?;
    let cols_scaled = tape.div(tilde, deg_sqrt)?;
    let both = tape.transpose(tape.div(tape.transpose(cols_scaled)?, deg_sqrt)?)?;
    let propagated = tape.matmul(tape.matmul(both, h)?, weight)?;
    let out = tape.add(propagated, bias)?;
    if relu {
        tape.relu(out)
    } else {
        Ok(out)
    }
}

/// Where the GCN stack gets its adjacency from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencySource {
    /// Meta-path adjacency learned by the graph-transformer layers.
    GraphTransformer,
    /// Raw clamped cosine similarity.
    Similarity,
}

/// Runs the GCN stack over the learned (or raw) adjacency. Every layer but
/// the last applies ReLU; the last is linear.
pub fn refine_prototypes(
    tape: &Tape,
    graph: &SemanticGraph,
    gt: &[(Var, Var)],
    gcn: &[(Var, Var)],
    source: AdjacencySource,
) -> Result<Var> {
    if gcn.is_empty() {
        return Err(Error::Config("prototype refinement needs at least one GCN layer".into()));
    }
    let adjacency = match source {
        AdjacencySource::GraphTransformer => {
            if gt.is_empty() {
                return Err(Error::Config("graph-transformer adjacency needs >= 1 GT layer".into()));
            }
            let edges = EdgeStack::new(tape, &graph.edge_types)?;
            let mut adj = None;
            for &logits in gt {
                adj = Some(gt_layer(tape, &edges, logits, adj)?);
            }
            adj.expect("nonempty")
        }
        AdjacencySource::Similarity => tape.constant(&graph.similarity),
    };
    let mut h = tape.constant(&graph.node_features);
    for (i, &(w, b)) in gcn.iter().enumerate() {
        h = gcn_layer(tape, adjacency, h, w, b, i + 1 < gcn.len())?;
    }
    let shape = tape.shape(h);
    if shape[1] != SEMANTIC_DIM {
        return Err(Error::dim("refine_prototypes", &shape, &[graph.num_classes(), SEMANTIC_DIM]));
    }
    Ok(h)
}

/// Evaluates prototypes with frozen parameters.
pub fn prototypes(
    graph: &SemanticGraph,
    gt: &[GTLayerParams],
    gcn: &[GCNLayerParams],
    source: AdjacencySource,
) -> Result<ClassPrototypes> {
    let tape = Tape::new();
    let gt_vars: Vec<(Var, Var)> = gt
        .iter()
        .map(|p| (tape.constant(&p.channel_logits[0]), tape.constant(&p.channel_logits[1])))
        .collect();
    let gcn_vars: Vec<(Var, Var)> = gcn
        .iter()
        .map(|p| (tape.constant(&p.weight), tape.constant(&p.bias)))
        .collect();
    let out = refine_prototypes(&tape, graph, &gt_vars, &gcn_vars, source)?;
    Ok(ClassPrototypes {
        labels: graph.labels.clone(),
        vectors: tape.value(out),
    })
}
