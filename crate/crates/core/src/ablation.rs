//! Named flag-sets for ablation sweeps.

use serde::{Deserialize, Serialize};

use crate::dataio::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::{AblationFlag, AblationFlags};

pub const FULL_MODEL: &str = "Full Model";
pub const WITHOUT_GT: &str = "W/o Graph Transformer";
pub const ONLY_GCN_COMP: &str = "Only GCN and L_comp";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
}

impl AblationRow {
    pub fn new(name: &str, flags: &[AblationFlag]) -> Self {
        AblationRow {
            name: name.to_string(),
            flags: flags.iter().copied().collect(),
        }
    }
}

/// The eight standard rows, in report order.
pub fn standard_rows() -> Vec<AblationRow> {
    use AblationFlag::*;
    vec![
        AblationRow::new("W/o L_comp", &[Comp]),
        AblationRow::new("W/o Wasserstein Distance", &[Wass]),
        AblationRow::new("W/o L_dom", &[Dom]),
        AblationRow::new("W/o L_cls", &[Cls]),
        AblationRow::new("W/o Attention", &[Attention]),
        AblationRow::new(WITHOUT_GT, &[Gt]),
        // the GCN path stays live through the semantic term
        AblationRow::new(ONLY_GCN_COMP, &[Wass, Dom, Cls, GcnOnly]),
        AblationRow::new(FULL_MODEL, &[]),
    ]
}

/// Standard rows followed by `extra`; names must stay unique.
pub fn matrix_rows(extra: &[AblationRow]) -> Result<Vec<AblationRow>> {
    let mut rows = standard_rows();
    for row in extra {
        if rows.iter().any(|r| r.name == row.name) {
            return Err(Error::Config(format!("duplicate ablation row {:?}", row.name)));
        }
        rows.push(row.clone());
    }
    Ok(rows)
}

/// Synthetic data with a large sketch/photo offset, used for ablation
/// comparisons where the default data is too easy to separate rows.
pub fn hard_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        sigma_within: 0.5,
        sigma_mod: 1.0,
        ..SyntheticConfig::default()
    }
}
