//! Sketch-to-photo ranking and retrieval metrics.
//!
//! Relevance is exact class-label match. Truncated AP normalizes by
//! `min(R, k)`; P@k divides by `k` even when the gallery is shorter; queries
//! without relevant gallery items score 0 and still count.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Domain, FeatureSample, Protocol};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numcore::Tensor;

pub const REPORT_KS: [usize; 2] = [100, 200];
pub const MAP_AT: usize = 200;

/// Embedded gallery photos.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub protocol: Protocol,
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    /// `[G, D]`, rows aligned with `ids`.
    pub embeddings: Tensor,
}

impl Gallery {
    pub fn new(protocol: Protocol, ids: Vec<String>, labels: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Protocol(format!("empty {protocol} gallery")));
        }
        if embeddings.shape().len() != 2 || embeddings.rows() != ids.len() || labels.len() != ids.len() {
            return Err(Error::dim("gallery", embeddings.shape(), &[ids.len(), labels.len()]));
        }
        Ok(Gallery {
            protocol,
            ids,
            labels,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embeds the protocol's test photos with the photo encoder.
pub fn build_gallery(dataset: &Dataset, params: &ModelParams, protocol: Protocol, attention: bool) -> Result<Gallery> {
    let photos = dataset.test_samples(Domain::Photo, protocol);
    if photos.is_empty() {
        return Err(Error::Protocol(format!("empty {protocol} gallery")));
    }
    let embeddings = params.embed(&photos, Domain::Photo, attention)?;
    Gallery::new(
        protocol,
        photos.iter().map(|p| p.id.clone()).collect(),
        photos.iter().map(|p| p.label.clone()).collect(),
        embeddings,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub label: String,
    pub distance: f64,
}

/// Gallery sorted by ℓ2 distance to one query, ties by ascending id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub query_label: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn relevance(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.label == self.query_label).collect()
    }
}

/// Ranks the whole gallery for one query embedding.
pub fn rank(query_id: &str, query_label: &str, query: &[f64], gallery: &Gallery) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    if query.len() != gallery.embeddings.cols() {
        return Err(Error::dim("rank", &[query.len()], gallery.embeddings.shape()));
    }
    // Sorting on the squared distance keeps ties exact.
    let mut order: Vec<(f64, usize)> = (0..gallery.len())
        .map(|i| {
            let d2 = gallery
                .embeddings
                .row(i)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            (d2, i)
        })
        .collect();
    if order.iter().any(|(d, _)| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite distance for query {query_id}")));
    }
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| gallery.ids[a.1].cmp(&gallery.ids[b.1]))
    });
    Ok(RankedList {
        query_id: query_id.to_string(),
        query_label: query_label.to_string(),
        entries: order
            .into_iter()
            .map(|(d2, i)| RankedEntry {
                id: gallery.ids[i].clone(),
                label: gallery.labels[i].clone(),
                distance: d2.sqrt(),
            })
            .collect(),
    })
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    Ok(())
}

/// AP over a relevance vector in rank order, optionally truncated at `k`.
pub fn average_precision_of(relevant: &[bool], k: Option<usize>) -> Result<f64> {
    if let Some(k) = k {
        check_k(k)?;
    }
    let total = relevant.iter().filter(|&&r| r).count();
    let cut = k.unwrap_or(relevant.len()).min(relevant.len());
    let denom = total.min(k.unwrap_or(usize::MAX));
    if denom == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevant[..cut].iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    Ok(sum / denom as f64)
}

pub fn average_precision(ranked: &RankedList, k: Option<usize>) -> Result<f64> {
    average_precision_of(&ranked.relevance(), k)
}

pub fn precision_at_k_of(relevant: &[bool], k: usize) -> Result<f64> {
    check_k(k)?;
    let hits = relevant.iter().take(k).filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}

pub fn precision_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    precision_at_k_of(&ranked.relevance(), k)
}

/// Metrics of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryScore {
    pub query_id: String,
    pub label: String,
    pub seen: bool,
    pub ap: f64,
    pub ap_at_200: f64,
    pub p_at_100: f64,
    pub p_at_200: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub map: f64,
    pub p_at_100: f64,
    pub p_at_200: f64,
    pub map_at_200: f64,
    pub num_queries: usize,
    pub gallery_size: usize,
    /// Under GZS, held-out seen-class sketches are queried too.
    pub queries_include_seen: bool,
    pub per_query: Vec<QueryScore>,
}

impl RetrievalReport {
    /// `(metric, value)` pairs in report order.
    pub fn metrics(&self) -> [(&'static str, f64); 4] {
        [
            ("mAP", self.map),
            ("P@100", self.p_at_100),
            ("P@200", self.p_at_200),
            ("mAP@200", self.map_at_200),
        ]
    }
}

fn score(ranked: &RankedList, seen: bool) -> Result<QueryScore> {
    let rel = ranked.relevance();
    Ok(QueryScore {
        query_id: ranked.query_id.clone(),
        label: ranked.query_label.clone(),
        seen,
        ap: average_precision_of(&rel, None)?,
        ap_at_200: average_precision_of(&rel, Some(MAP_AT))?,
        p_at_100: precision_at_k_of(&rel, REPORT_KS[0])?,
        p_at_200: precision_at_k_of(&rel, REPORT_KS[1])?,
    })
}

/// Aggregates ranked lists into a report; `seen` flags each query.
pub fn report_from_ranked(protocol: Protocol, ranked: &[RankedList], seen: &[bool], gallery_size: usize) -> Result<RetrievalReport> {
    if ranked.is_empty() {
        return Err(Error::Protocol(format!("no {protocol} queries")));
    }
    if seen.len() != ranked.len() {
        return Err(Error::dim("report_from_ranked", &[ranked.len()], &[seen.len()]));
    }
    let per_query = ranked
        .iter()
        .zip(seen)
        .map(|(r, &s)| score(r, s))
        .collect::<Result<Vec<_>>>()?;
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryScore) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(RetrievalReport {
        protocol,
        map: mean(|q| q.ap),
        p_at_100: mean(|q| q.p_at_100),
        p_at_200: mean(|q| q.p_at_200),
        map_at_200: mean(|q| q.ap_at_200),
        num_queries: per_query.len(),
        gallery_size,
        queries_include_seen: seen.iter().any(|&s| s),
        per_query,
    })
}

/// Ranks every query row against the gallery.
pub fn rank_all(queries: &[&FeatureSample], embeddings: &Tensor, gallery: &Gallery) -> Result<Vec<RankedList>> {
    if embeddings.rows() != queries.len() {
        return Err(Error::dim("rank_all", embeddings.shape(), &[queries.len()]));
    }
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| rank(&q.id, &q.label, embeddings.row(i), gallery))
        .collect()
}

/// Every protocol test sketch queries the protocol gallery.
pub fn evaluate(dataset: &Dataset, params: &ModelParams, protocol: Protocol, attention: bool) -> Result<RetrievalReport> {
    let (ranked, seen, gallery_size) = ranked_queries(dataset, params, protocol, attention)?;
    report_from_ranked(protocol, &ranked, &seen, gallery_size)
}

/// Ranked lists, per-query seen flags and gallery size for `protocol`.
pub fn ranked_queries(
    dataset: &Dataset,
    params: &ModelParams,
    protocol: Protocol,
    attention: bool,
) -> Result<(Vec<RankedList>, Vec<bool>, usize)> {
    let queries = dataset.test_samples(Domain::Sketch, protocol);
    if queries.is_empty() {
        return Err(Error::Protocol(format!("no {protocol} test sketches")));
    }
    let gallery = build_gallery(dataset, params, protocol, attention)?;
    let emb = params.embed(&queries, Domain::Sketch, attention)?;
    let ranked = rank_all(&queries, &emb, &gallery)?;
    let seen = queries.iter().map(|q| dataset.is_seen(&q.label)).collect();
    Ok((ranked, seen, gallery.len()))
}

/// mAP under the null of no class association, obtained by permuting
/// class labels over the fixed rankings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceLevel {
    pub mean: f64,
    pub std: f64,
    pub permutations: usize,
}

impl ChanceLevel {
    pub fn z_score(&self, map: f64) -> f64 {
        if self.std == 0.0 {
            if map == self.mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (map - self.mean) / self.std
        }
    }
}

/// Enumerates all label permutations when there are at most `max_exact`
/// classes, else samples `samples` of them.
pub fn chance_level(ranked: &[RankedList], max_exact: usize, samples: usize, seed: u64) -> Result<ChanceLevel> {
    if ranked.is_empty() {
        return Err(Error::Protocol("no queries".into()));
    }
    let classes: Vec<&str> = ranked
        .iter()
        .flat_map(|r| std::iter::once(r.query_label.as_str()).chain(r.entries.iter().map(|e| e.label.as_str())))
        .sorted()
        .dedup()
        .collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let coded: Vec<(usize, Vec<usize>)> = ranked
        .iter()
        .map(|r| (index[r.query_label.as_str()], r.entries.iter().map(|e| index[e.label.as_str()]).collect()))
        .collect();
    let map_under = |perm: &[usize]| -> f64 {
        let mut total = 0.0;
        for (q, gallery) in &coded {
            let rel: Vec<bool> = gallery.iter().map(|&g| perm[g] == *q).collect();
            total += average_precision_of(&rel, None).expect("untruncated");
        }
        total / coded.len() as f64
    };
    let k = classes.len();
    let values: Vec<f64> = if k <= max_exact {
        (0..k).permutations(k).map(|p| map_under(&p)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..k).collect();
        (0..samples.max(2))
            .map(|_| {
                perm.shuffle(&mut rng);
                map_under(&perm)
            })
            .collect()
    };
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(ChanceLevel {
        mean,
        std: var.sqrt(),
        permutations: values.len(),
    })
}

pub fn write_report_json(path: &Path, report: &RetrievalReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<RetrievalReport> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Writes `protocol,metric,value` rows.
pub fn write_metrics_csv(path: &Path, reports: &[RetrievalReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "protocol,metric,value")?;
    for r in reports {
        for (name, v) in r.metrics() {
            writeln!(w, "{},{},{}", r.protocol, name, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(Protocol, String, f64)>> {
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
        let bad = |msg: String| Error::Parse { line, msg };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", rec.len())));
        }
        let protocol: Protocol = rec[0].parse().map_err(|e: Error| bad(e.to_string()))?;
        let value: f64 = rec[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        out.push((protocol, rec[1].to_string(), value));
    }
    Ok(out)
}
