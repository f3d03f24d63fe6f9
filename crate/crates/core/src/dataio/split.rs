use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Protocol, SplitSpec};
use crate::error::{Error, Result};

/// Default share of each seen class held out for generalized evaluation.
pub const DEFAULT_HOLDOUT: f64 = 0.2;

/// Picks `n_unseen` classes uniformly at random (per `seed`) as unseen; the
/// rest are seen.
pub fn build_split(classes: &[String], n_unseen: usize, seed: u64, protocol: Protocol) -> Result<SplitSpec> {
    let k = classes.len();
    if n_unseen < 1 || n_unseen + 2 > k {
        return Err(Error::Config(format!(
            "n_unseen must lie in [1, K-2] = [1, {}], got {n_unseen}",
            k.saturating_sub(2)
        )));
    }
    let mut order: Vec<&String> = classes.iter().collect();
    order.sort();
    order.dedup();
    if order.len() != k {
        return Err(Error::Data("class list has duplicates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let unseen = order[..n_unseen].iter().map(|s| s.to_string()).collect();
    let seen = order[n_unseen..].iter().map(|s| s.to_string()).collect();
    Ok(SplitSpec {
        seen_classes: seen,
        unseen_classes: unseen,
        protocol,
        holdout_fraction: DEFAULT_HOLDOUT,
    })
}
