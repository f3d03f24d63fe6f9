//! Binary checkpoint container.
//!
//! Layout: the magic `GTZ1`, a little-endian `u32` section count, then per
//! section a `u32` name length, the UTF-8 name, a `u64` payload length in
//! bytes and the payload as little-endian `f64` values.

use std::collections::BTreeMap;
use std::path::Path;

use super::{initial_checkpoint, TrainConfig};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::ModelParams;
use crate::numcore::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTZ1";

/// Trained parameters together with everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: u64,
    pub history: Vec<LossReport>,
}

// 16-bit chunks survive the f64 round trip exactly.
fn hash_to_f64(h: u64) -> Vec<f64> {
    (0..4).map(|i| ((h >> (16 * i)) & 0xffff) as f64).collect()
}

fn hash_from_f64(v: &[f64]) -> Result<u64> {
    if v.len() != 4 || v.iter().any(|x| x.fract() != 0.0 || !(0.0..65536.0).contains(x)) {
        return Err(Error::Data("malformed config_hash section".into()));
    }
    Ok(v.iter().enumerate().fold(0u64, |acc, (i, &x)| acc | ((x as u64) << (16 * i))))
}

fn as_count(v: f64, what: &str) -> Result<u64> {
    if v < 0.0 || v.fract() != 0.0 || v > 2f64.powi(53) {
        return Err(Error::Data(format!("{what} is not a count: {v}")));
    }
    Ok(v as u64)
}

impl Checkpoint {
    fn sections(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let named = self.params.named();
        for (name, t) in &named {
            out.push((format!("param.{name}"), t.data().to_vec()));
            out.push((format!("shape.{name}"), t.shape().iter().map(|&d| d as f64).collect()));
        }
        for (i, (name, _)) in named.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.adam.first_moment[i].clone()));
            out.push((format!("adam.v.{name}"), self.adam.second_moment[i].clone()));
        }
        let a = &self.adam;
        out.push(("adam.step".into(), vec![a.step_count as f64]));
        out.push((
            "adam.hyper".into(),
            vec![a.learning_rate, a.beta1, a.beta2, a.epsilon, a.weight_decay],
        ));
        out.push(("epoch".into(), vec![self.epoch as f64]));
        out.push((
            "history".into(),
            self.history
                .iter()
                .flat_map(|r| [r.wasserstein, r.compatibility, r.domain, r.classification, r.semantic, r.total])
                .collect(),
        ));
        out.push(("config_hash".into(), hash_to_f64(self.config_hash)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sections = self.sections();
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in sections {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&((payload.len() * 8) as u64).to_le_bytes());
            for x in payload {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Splits a checkpoint file into named sections.
    pub fn parse_sections(bytes: &[u8]) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::Data("section name is not UTF-8".into()))?
                .to_string();
            let bytes_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            if bytes_len % 8 != 0 {
                return Err(Error::Data(format!("section {name} has a ragged payload")));
            }
            let payload = take(bytes_len as usize)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if out.insert(name.clone(), payload).is_some() {
                return Err(Error::Data(format!("duplicate section {name}")));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Data("trailing bytes after last section".into()));
        }
        Ok(out)
    }

    /// Reads the stored config hash without decoding anything else.
    pub fn peek_hash(bytes: &[u8]) -> Result<u64> {
        let sections = Self::parse_sections(bytes)?;
        hash_from_f64(
            sections
                .get("config_hash")
                .ok_or_else(|| Error::Data("checkpoint lacks config_hash".into()))?,
        )
    }

    /// Decodes `bytes` into the layout of `template`, which fixes parameter
    /// names and shapes.
    pub fn from_bytes(bytes: &[u8], template: &Checkpoint) -> Result<Checkpoint> {
        let mut sections = Self::parse_sections(bytes)?;
        let mut get = |name: &str| -> Result<Vec<f64>> {
            sections
                .remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks section {name}")))
        };
        let mut ckpt = template.clone();
        ckpt.config_hash = hash_from_f64(&get("config_hash")?)?;
        let names: Vec<String> = template.params.named().into_iter().map(|(n, _)| n).collect();
        for (i, (name, tensor)) in names.iter().zip(ckpt.params.tensors_mut()).enumerate() {
            let shape = get(&format!("shape.{name}"))?;
            let want: Vec<f64> = tensor.shape().iter().map(|&d| d as f64).collect();
            if shape != want {
                return Err(Error::Compatibility(format!(
                    "parameter {name}: checkpoint shape {shape:?}, model shape {want:?}"
                )));
            }
            let n = tensor.numel();
            for (section, dst) in [
                (format!("param.{name}"), tensor.data_mut()),
                (format!("adam.m.{name}"), &mut ckpt.adam.first_moment[i][..]),
                (format!("adam.v.{name}"), &mut ckpt.adam.second_moment[i][..]),
            ] {
                let v = get(&section)?;
                if v.len() != n {
                    return Err(Error::Data(format!("section {section} holds {} values, expected {n}", v.len())));
                }
                dst.copy_from_slice(&v);
            }
        }
        let step = get("adam.step")?;
        let hyper = get("adam.hyper")?;
        let epoch = get("epoch")?;
        let history = get("history")?;
        if step.len() != 1 || hyper.len() != 5 || epoch.len() != 1 || history.len() % 6 != 0 {
            return Err(Error::Data("malformed optimizer or history section".into()));
        }
        let a = &mut ckpt.adam;
        a.step_count = as_count(step[0], "adam.step")?;
        [a.learning_rate, a.beta1, a.beta2, a.epsilon, a.weight_decay] = hyper[..].try_into().expect("5 values");
        ckpt.epoch = as_count(epoch[0], "epoch")? as usize;
        ckpt.history = history
            .chunks_exact(6)
            .map(|c| LossReport {
                wasserstein: c[0],
                compatibility: c[1],
                domain: c[2],
                classification: c[3],
                semantic: c[4],
                total: c[5],
            })
            .collect();
        if let Some(extra) = sections.keys().next() {
            return Err(Error::Compatibility(format!("checkpoint has unknown section {extra}")));
        }
        Ok(ckpt)
    }

    /// Loads a checkpoint trained on `dataset` under `config`. A hash
    /// mismatch is a compatibility error.
    pub fn load(path: &Path, dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let (template, _) = initial_checkpoint(dataset, config)?;
        let stored = Self::peek_hash(&bytes)?;
        if stored != template.config_hash {
            return Err(Error::Compatibility(format!(
                "checkpoint config hash {stored:016x} does not match dataset/config hash {:016x}",
                template.config_hash
            )));
        }
        Self::from_bytes(&bytes, &template)
    }
}
