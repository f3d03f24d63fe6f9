//! Training objectives and their weighted combination.
//!
//! All losses are built on a [`Tape`] so that each keeps its own gradient
//! path into the total. The optimal-transport term runs log-domain Sinkhorn
//! unrolled on the tape; [`exact_ot_oracle`] solves tiny uniform instances by
//! enumerating permutations and exists to check it.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Coupling between two uniform point clouds and its linear cost.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub cost: f64,
}

impl TransportPlan {
    /// Largest deviation of row and column sums from uniform weights.
    pub fn marginal_violation(&self) -> f64 {
        let (n, m) = (self.plan.rows(), self.plan.cols());
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let s: f64 = self.plan.row(i).iter().sum();
            worst = worst.max((s - 1.0 / n as f64).abs());
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| self.plan.at(i, j)).sum();
            worst = worst.max((s - 1.0 / m as f64).abs());
        }
        worst
    }
}

/// λ weights of the auxiliary terms and the domain-target margin `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub compatibility: f64,
    pub domain: f64,
    pub classification: f64,
    pub semantic: f64,
    pub domain_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            compatibility: 0.25,
            domain: 0.25,
            classification: 0.25,
            semantic: 0.25,
            domain_target: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("compatibility", self.compatibility),
            ("domain", self.domain),
            ("classification", self.classification),
            ("semantic", self.semantic),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        check_target(self.domain_target)
    }
}

fn check_target(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("domain target t must lie in (0,1), got {t}")))
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub wasserstein: f64,
    pub compatibility: f64,
    pub domain: f64,
    pub classification: f64,
    pub semantic: f64,
    pub total: f64,
}

impl LossReport {
    /// Component-wise mean; empty input gives the zero report.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            wasserstein: sum(|r| r.wasserstein),
            compatibility: sum(|r| r.compatibility),
            domain: sum(|r| r.domain),
            classification: sum(|r| r.classification),
            semantic: sum(|r| r.semantic),
            total: sum(|r| r.total),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig { epsilon: 0.05, iters: 100 }
    }
}

/// Regularization used at iteration `k`: geometric decay from
/// `max(1, ε)` to `ε` over the first half of the iterations, then `ε`.
/// The potentials carry over between levels, which makes small `ε`
/// converge in far fewer iterations than a cold start.
fn annealed_epsilon(epsilon: f64, k: usize, iters: usize) -> f64 {
    let start = epsilon.max(ANNEAL_START);
    let warm = iters / 2;
    if k >= warm || start == epsilon {
        return epsilon;
    }
    start * (epsilon / start).powf(k as f64 / warm as f64)
}

const ANNEAL_START: f64 = 1.0;

/// Unrolled log-domain Sinkhorn between uniform clouds. Returns the cost
/// matrix and the plan as tape nodes.
fn sinkhorn_graph(tape: &Tape, source: Var, target: Var, epsilon: f64, iters: usize) -> Result<(Var, Var)> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("sinkhorn epsilon must be > 0, got {epsilon}")));
    }
    if iters == 0 {
        return Err(Error::Config("sinkhorn needs at least one iteration".into()));
    }
    let cost = tape.sqrt(tape.pairwise_sq_dist(source, target)?)?;
    let (n, m) = {
        let s = tape.shape(cost);
        (s[0], s[1])
    };
    let cost_t = tape.transpose(cost)?;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut g = tape.constant(&Tensor::zeros(&[m]));
    let mut f = g;
    for k in 0..iters {
        let e = annealed_epsilon(epsilon, k, iters);
        // f_i = ε log a − ε LSE_j((g_j − C_ij)/ε)
        let lse = tape.logsumexp(tape.scale(tape.sub(cost, g)?, -1.0 / e)?)?;
        f = tape.add_scalar(tape.scale(lse, -e)?, e * log_a)?;
        // g_j = ε log b − ε LSE_i((f_i − C_ij)/ε)
        let lse = tape.logsumexp(tape.scale(tape.sub(cost_t, f)?, -1.0 / e)?)?;
        g = tape.add_scalar(tape.scale(lse, -e)?, e * log_b)?;
    }
    let reduced = tape.sub(tape.transpose(tape.sub(cost_t, f)?)?, g)?;
    let plan = tape.exp(tape.scale(reduced, -1.0 / epsilon)?)?;
    Ok((cost, plan))
}

/// Entropic OT cost `⟨γ, C⟩` with `C_ij = ‖source_i − target_j‖₂` and
/// uniform marginals, differentiable through the unrolled iterations.
pub fn wasserstein_sinkhorn(tape: &Tape, source: Var, target: Var, epsilon: f64, iters: usize) -> Result<Var> {
    let (cost, plan) = sinkhorn_graph(tape, source, target, epsilon, iters)?;
    let w = tape.sum(tape.mul(plan, cost)?)?;
    if !tape.item(w).is_finite() {
        return Err(Error::Numeric("wasserstein cost is non-finite".into()));
    }
    Ok(w)
}

/// Sinkhorn plan between two fixed clouds.
pub fn sinkhorn_plan(source: &Tensor, target: &Tensor, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    let tape = Tape::new();
    let (cost, plan) = sinkhorn_graph(&tape, tape.constant(source), tape.constant(target), epsilon, iters)?;
    let w = tape.sum(tape.mul(plan, cost)?)?;
    Ok(TransportPlan {
        plan: tape.value(plan),
        cost: tape.item(w),
    })
}

/// Exact OT between equal-size uniform clouds (`n ≤ 8`) by enumerating
/// every permutation plan.
pub fn exact_ot_oracle(source: &Tensor, target: &Tensor) -> Result<TransportPlan> {
    let (n, m) = (source.rows(), target.rows());
    if n != m || n > 8 {
        return Err(Error::Scope(format!("exact OT oracle handles n == m <= 8, got {n}x{m}")));
    }
    if source.cols() != target.cols() {
        return Err(Error::dim("exact_ot_oracle", source.shape(), target.shape()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        source
            .row(i)
            .iter()
            .zip(target.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let c: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(i, j)).collect()).collect();
    let best = (0..n)
        .permutations(n)
        .map(|p| {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
            (total, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("n >= 1");
    let mut plan = Tensor::zeros(&[n, n]);
    for (i, &j) in best.1.iter().enumerate() {
        plan.data_mut()[i * n + j] = 1.0 / n as f64;
    }
    Ok(TransportPlan {
        plan,
        cost: best.0 / n as f64,
    })
}

/// Mean of `e^{d⁺} / (e^{d⁺} + e^{d⁻})`, evaluated as `σ(d⁺ − d⁻)`.
pub fn compatibility_loss(tape: &Tape, d_pos: Var, d_neg: Var) -> Result<Var> {
    let (sp, sn) = (tape.shape(d_pos), tape.shape(d_neg));
    if sp.len() != 1 || sp != sn {
        return Err(Error::Contract(format!(
            "compatibility loss needs equal-length distance vectors, got {sp:?} and {sn:?}"
        )));
    }
    tape.mean(tape.sigmoid(tape.sub(d_pos, d_neg)?)?)
}

/// Variant normalizing over every photo in the batch: mean over anchors of
/// `e^{d(a, p_a)} / Σ_j e^{d(a, x_j)}` for `distances: [N, M]`.
pub fn compatibility_loss_batch_all(tape: &Tape, distances: Var, positive: &[usize]) -> Result<Var> {
    let lsm = tape.log_softmax(distances)?;
    tape.mean(tape.exp(tape.pick(lsm, positive)?)?)
}

/// Soft-target binary cross-entropy of the domain classifier: targets
/// `1 − t` for sketches and `t` for photos, averaged over every logit.
pub fn domain_loss(tape: &Tape, sketch_logits: Var, photo_logits: Var, t: f64) -> Result<Var> {
    check_target(t)?;
    let bce = |z: Var, y: f64| -> Result<Var> {
        // −[y·ln σ(z) + (1 − y)·ln(1 − σ(z))] = softplus(z) − y·z
        tape.sub(tape.softplus(z)?, tape.scale(z, y)?)
    };
    let terms = tape.concat_rows(&[bce(sketch_logits, 1.0 - t)?, bce(photo_logits, t)?])?;
    tape.mean(terms)
}

/// Mean negative log-likelihood of the true class over every stream.
pub fn classification_loss(tape: &Tape, streams: &[(Var, &[usize])]) -> Result<Var> {
    if streams.is_empty() {
        return Err(Error::Contract("classification loss needs at least one stream".into()));
    }
    let mut picked = Vec::with_capacity(streams.len());
    for &(logits, labels) in streams {
        let classes = tape.shape(logits).get(1).copied().unwrap_or(0);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {classes} seen classes")));
        }
        picked.push(tape.pick(tape.log_softmax(logits)?, labels)?);
    }
    tape.neg(tape.mean(tape.concat_rows(&picked)?)?)
}

/// Mean `1 − cos(decoded, target)` over rows. Zero-norm decoded rows score 1.
pub fn semantic_loss(tape: &Tape, decoded: Var, targets: Var) -> Result<Var> {
    let d = tape.shape(targets).get(1).copied().unwrap_or(0);
    if d > 0 {
        if let Some(i) = tape
            .data(targets)
            .chunks(d)
            .position(|r| r.iter().all(|&x| x == 0.0))
        {
            return Err(Error::Data(format!("semantic target row {i} has zero norm")));
        }
    }
    let cos = tape.cosine_rows(decoded, targets)?;
    tape.add_scalar(tape.neg(tape.mean(cos)?)?, 1.0)
}

/// Loss components as tape nodes; `None` marks a disabled term.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub wasserstein: Option<Var>,
    pub compatibility: Option<Var>,
    pub domain: Option<Var>,
    pub classification: Option<Var>,
    pub semantic: Option<Var>,
}

/// `W + λ1·comp + λ2·dom + λ3·cls + λ4·sem`. Disabled terms contribute and
/// report exactly 0.
pub fn total_loss(tape: &Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let named = [
        ("wasserstein", terms.wasserstein, 1.0),
        ("compatibility", terms.compatibility, weights.compatibility),
        ("domain", terms.domain, weights.domain),
        ("classification", terms.classification, weights.classification),
        ("semantic", terms.semantic, weights.semantic),
    ];
    let mut values = [0.0; 5];
    let mut total: Option<Var> = None;
    for (k, (name, var, lambda)) in named.into_iter().enumerate() {
        let Some(v) = var else { continue };
        if tape.shape(v).iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!("{name} loss is not a scalar")));
        }
        let value = tape.item(v);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is non-finite ({value})")));
        }
        values[k] = value;
        let weighted = if lambda == 1.0 { v } else { tape.scale(v, lambda)? };
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(&Tensor::scalar(0.0)),
    };
    let report = LossReport {
        wasserstein: values[0],
        compatibility: values[1],
        domain: values[2],
        classification: values[3],
        semantic: values[4],
        total: tape.item(total),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests;
