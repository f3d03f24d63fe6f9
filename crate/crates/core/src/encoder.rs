//! Per-modality encoders with soft-attention pooling, and the shared heads.
//!
//! Sketch and photo encoders never share tensors. Each pools its feature
//! grid with a sigmoid mask from a 1×1 projection, then runs an MLP
//! (ReLU between layers, linear output). The heads sit on the embedding:
//! a domain classifier behind gradient reversal, a seen-class classifier
//! and a semantic decoder to the 300-d space.

use rand::Rng;

use crate::dataio::{Domain, FeatureSample};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Dense layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape matches").with_grad(),
            bias: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]).with_grad(),
            bias: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub domain: Domain,
    /// `[F, 1]` weights of the 1×1 attention projection.
    pub attention_weight: Tensor,
    /// `[1]` attention bias.
    pub attention_bias: Tensor,
    pub layers: Vec<Linear>,
}

impl EncoderParams {
    pub fn init<R: Rng>(domain: Domain, channels: usize, hidden: usize, out: usize, depth: usize, rng: &mut R) -> Self {
        let att = Linear::glorot(channels, 1, rng);
        let mut dims = vec![channels];
        dims.extend(std::iter::repeat(hidden).take(depth.saturating_sub(1)));
        dims.push(out);
        let layers = dims.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect();
        EncoderParams {
            domain,
            attention_weight: att.weight,
            attention_bias: att.bias,
            layers,
        }
    }

    pub fn channels(&self) -> usize {
        self.attention_weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map(Linear::out_dim).unwrap_or(0)
    }

    pub fn bind(&self, tape: &Tape) -> BoundEncoder {
        BoundEncoder {
            domain: self.domain,
            attention_weight: tape.leaf(&self.attention_weight),
            attention_bias: tape.leaf(&self.attention_bias),
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `D → 1`.
    pub domain_head: Linear,
    /// `D → |seen classes|`.
    pub label_head: Linear,
    /// `D → … → 300`, ReLU between layers.
    pub decoder: Vec<Linear>,
}

impl HeadParams {
    pub fn init<R: Rng>(embed: usize, n_seen: usize, hidden: usize, decoder_depth: usize, rng: &mut R) -> Self {
        let mut dims = vec![embed];
        dims.extend(std::iter::repeat(hidden).take(decoder_depth.saturating_sub(1)));
        dims.push(crate::dataio::SEMANTIC_DIM);
        HeadParams {
            domain_head: Linear::glorot(embed, 1, rng),
            label_head: Linear::glorot(embed, n_seen, rng),
            decoder: dims.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn bind(&self, tape: &Tape) -> BoundHeads {
        BoundHeads {
            domain_head: self.domain_head.bind(tape),
            label_head: self.label_head.bind(tape),
            decoder: self.decoder.iter().map(|l| l.bind(tape)).collect(),
        }
    }
}

/// Tape handles of a [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.add(tape.matmul(x, self.weight)?, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub domain: Domain,
    pub attention_weight: Var,
    pub attention_bias: Var,
    pub layers: Vec<BoundLinear>,
}

#[derive(Clone, Debug)]
pub struct BoundHeads {
    pub domain_head: BoundLinear,
    pub label_head: BoundLinear,
    pub decoder: Vec<BoundLinear>,
}

/// Stacks sample grids into a `[N, P, F]` constant.
pub fn grid_batch(tape: &Tape, samples: &[&FeatureSample]) -> Result<Var> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot encode an empty batch".into()))?;
    let (p, f) = (first.cells(), first.channels);
    let mut data = Vec::with_capacity(samples.len() * p * f);
    for s in samples {
        if s.cells() != p || s.channels != f {
            return Err(Error::dim(
                "grid_batch",
                &[first.rows, first.cols, f],
                &[s.rows, s.cols, s.channels],
            ));
        }
        data.extend_from_slice(&s.features);
    }
    tape.constant_from(vec![samples.len(), p, f], data)
}

/// Soft-attention pooling of `cells: [N, P, F]`. With `attention = None`
/// every cell gets the same weight.
pub fn attend_pool(tape: &Tape, cells: Var, attention: Option<(Var, Var)>) -> Result<Var> {
    let shape = tape.shape(cells);
    if shape.len() != 3 {
        return Err(Error::dim("attend_pool", &shape, &[0, 0, 0]));
    }
    let (n, p, f) = (shape[0], shape[1], shape[2]);
    let mask = match attention {
        Some((w, b)) => {
            if tape.shape(w) != [f, 1] {
                return Err(Error::dim("attend_pool", &shape, &tape.shape(w)));
            }
            let flat = tape.reshape(cells, &[n * p, f])?;
            let logits = tape.add(tape.matmul(flat, w)?, b)?;
            tape.reshape(tape.sigmoid(logits)?, &[n, p])?
        }
        None => tape.constant(&Tensor::full(&[n, p], 1.0)),
    };
    tape.weighted_pool(cells, mask)
}

/// Embeds a batch of same-modality samples into `[N, D]`.
pub fn encode(tape: &Tape, samples: &[&FeatureSample], enc: &BoundEncoder, attention: bool) -> Result<Var> {
    if let Some(s) = samples.iter().find(|s| s.domain != enc.domain) {
        return Err(Error::Contract(format!(
            "sample {} is a {} but the encoder is for {}",
            s.id, s.domain, enc.domain
        )));
    }
    let cells = grid_batch(tape, samples)?;
    let att = attention.then_some((enc.attention_weight, enc.attention_bias));
    let mut h = attend_pool(tape, cells, att)?;
    for (i, layer) in enc.layers.iter().enumerate() {
        h = layer.apply(tape, h)?;
        if i + 1 < enc.layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Domain-classifier logits `[N]`. When `reverse` is set the gradient
/// flowing back into `embedding` is negated.
pub fn domain_logit(tape: &Tape, embedding: Var, heads: &BoundHeads, reverse: bool) -> Result<Var> {
    let n = tape.shape(embedding)[0];
    let x = if reverse { tape.grad_reverse(embedding, 1.0)? } else { embedding };
    let logits = heads.domain_head.apply(tape, x)?;
    tape.reshape(logits, &[n])
}

/// Seen-class logits `[N, |seen|]`.
pub fn class_logits(tape: &Tape, embedding: Var, heads: &BoundHeads) -> Result<Var> {
    heads.label_head.apply(tape, embedding)
}

/// Semantic reconstruction `[N, 300]`.
pub fn decode_semantic(tape: &Tape, embedding: Var, heads: &BoundHeads) -> Result<Var> {
    let mut h = embedding;
    for (i, layer) in heads.decoder.iter().enumerate() {
        h = layer.apply(tape, h)?;
        if i + 1 < heads.decoder.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}
