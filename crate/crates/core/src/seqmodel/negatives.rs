//! Negative sampling for the ID-level InfoNCE.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::index::PrefixBuckets;
use crate::ItemId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSample {
    pub items: Vec<ItemId>,
    /// Set when the target's bucket could not supply all `n` negatives.
    pub fallback: bool,
}

/// Uniform sample of `n` catalog items (ids `0..n_items`) outside `exclude`.
pub fn sample_global_negatives<R: Rng>(n_items: usize, exclude: &[ItemId], n: usize, rng: &mut R) -> Result<Vec<ItemId>> {
    let available = n_items.saturating_sub(exclude.iter().filter(|&&e| (e as usize) < n_items).count());
    if n > available {
        return Err(Error::invalid(format!("{n} negatives requested but only {available} items available")));
    }
    let mut out = Vec::with_capacity(n);
    // Rejection sampling; exclusion lists are short relative to the catalog.
    if exclude.len() * 4 < n_items {
        while out.len() < n {
            let c = rng.gen_range(0..n_items) as ItemId;
            if !exclude.contains(&c) && !out.contains(&c) {
                out.push(c);
            }
        }
        return Ok(out);
    }
    let pool: Vec<ItemId> = (0..n_items as ItemId).filter(|c| !exclude.contains(c)).collect();
    Ok(sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// `n` items from the target's prefix bucket, without replacement and
/// excluding the target. A short bucket is topped up from the whole catalog.
pub fn sample_hard_negatives<R: Rng>(buckets: &PrefixBuckets, target: ItemId, n: usize, rng: &mut R) -> Result<NegativeSample> {
    let prefix = buckets.prefix_of(target)?;
    let others: Vec<ItemId> = buckets.bucket(prefix).iter().copied().filter(|&i| i != target).collect();
    if others.len() >= n {
        let items = sample(rng, others.len(), n).into_iter().map(|i| others[i]).collect();
        return Ok(NegativeSample { items, fallback: false });
    }
    let mut exclude = others.clone();
    exclude.push(target);
    let n_items = buckets.items().map(|i| i as usize + 1).max().unwrap_or(0);
    let extra = sample_global_negatives(n_items, &exclude, n - others.len(), rng)?;
    let mut items = others;
    items.extend(extra);
    Ok(NegativeSample { items, fallback: true })
}
