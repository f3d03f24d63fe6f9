use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ClassEmbedding, Domain, FeatureSample, SEMANTIC_DIM};
use crate::error::{Error, Result};

const FEATURE_FIXED: [&str; 6] = ["id", "label", "domain", "rows", "cols", "channels"];

fn open(path: &Path) -> Result<csv::Reader<File>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("{what}: {field:?} is not a number"),
    })
}

fn parse_usize(field: &str, line: u64, what: &str) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("{what}: {field:?} is not a positive integer"),
    })
}

/// Reads a feature table: `id,label,domain,rows,cols,channels,f0,...`.
pub fn load_feature_table(path: &Path) -> Result<Vec<FeatureSample>> {
    let mut rdr = open(path)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let n_feat = header.len().saturating_sub(FEATURE_FIXED.len());
    let fixed_ok = header.iter().zip(FEATURE_FIXED).all(|(h, want)| h == want);
    let feat_ok = header
        .iter()
        .skip(FEATURE_FIXED.len())
        .enumerate()
        .all(|(i, h)| h == format!("f{i}"));
    if header.len() <= FEATURE_FIXED.len() || !fixed_ok || !feat_ok {
        return Err(Error::Schema(format!(
            "{}: feature header must be id,label,domain,rows,cols,channels,f0,...",
            path.display()
        )));
    }

    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let domain: Domain = rec[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("domain {:?} must be sketch or photo", &rec[2]),
        })?;
        let rows = parse_usize(&rec[3], line, "rows")?;
        let cols = parse_usize(&rec[4], line, "cols")?;
        let channels = parse_usize(&rec[5], line, "channels")?;
        if rows * cols * channels != n_feat {
            return Err(Error::Schema(format!(
                "line {line}: grid {rows}x{cols}x{channels} does not match {n_feat} feature columns"
            )));
        }
        let features = rec
            .iter()
            .skip(FEATURE_FIXED.len())
            .map(|f| parse_f64(f, line, "feature"))
            .collect::<Result<Vec<_>>>()?;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("line {line}: non-finite feature value")));
        }
        samples.push(FeatureSample {
            id: rec[0].to_string(),
            label: rec[1].to_string(),
            domain,
            rows,
            cols,
            channels,
            features,
        });
    }
    Ok(samples)
}

/// Writes samples in the format read by [`load_feature_table`]. Values use
/// the shortest decimal form that parses back to the same `f64`.
pub fn write_feature_table(path: &Path, samples: &[FeatureSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot write an empty feature table".into()))?;
    let n_feat = first.features.len();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{}", FEATURE_FIXED.join(","))?;
    for i in 0..n_feat {
        write!(w, ",f{i}")?;
    }
    writeln!(w)?;
    for s in samples {
        if s.features.len() != n_feat {
            return Err(Error::Schema(format!("sample {} has a different feature count", s.id)));
        }
        write!(w, "{},{},{},{},{},{}", s.id, s.label, s.domain, s.rows, s.cols, s.channels)?;
        for x in &s.features {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `label,e0,...,e299` rows into a label-keyed map.
pub fn load_class_embeddings(path: &Path) -> Result<BTreeMap<String, ClassEmbedding>> {
    let mut rdr = open(path)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let dims_ok = header
        .iter()
        .skip(1)
        .enumerate()
        .all(|(i, h)| h == format!("e{i}"));
    if header.get(0) != Some("label") || !dims_ok {
        return Err(Error::Schema(format!("{}: embedding header must be label,e0,...", path.display())));
    }
    if header.len() - 1 != SEMANTIC_DIM {
        return Err(Error::Schema(format!(
            "{}: embeddings have {} dims, expected {SEMANTIC_DIM}",
            path.display(),
            header.len() - 1
        )));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Schema(format!(
                "line {line}: expected {SEMANTIC_DIM} values, found {}",
                rec.len().saturating_sub(1)
            )));
        }
        let label = rec[0].to_string();
        let vector = rec
            .iter()
            .skip(1)
            .map(|f| parse_f64(f, line, "embedding"))
            .collect::<Result<Vec<_>>>()?;
        let emb = ClassEmbedding::new(label.clone(), vector)?;
        if out.insert(label.clone(), emb).is_some() {
            return Err(Error::Data(format!("line {line}: duplicate class {label}")));
        }
    }
    Ok(out)
}

pub fn write_class_embeddings(path: &Path, embeddings: &BTreeMap<String, ClassEmbedding>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "label")?;
    for i in 0..SEMANTIC_DIM {
        write!(w, ",e{i}")?;
    }
    writeln!(w)?;
    for emb in embeddings.values() {
        write!(w, "{}", emb.label)?;
        for x in &emb.vector {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
