use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TypingDataset, TypingExample};
use crate::error::{Error, Result};

/// Draws exactly `k` examples per schema type, uniformly without replacement.
///
/// Types are visited in schema order from a single seeded stream; within a
/// type the picks keep their original dataset order.
pub fn sample_fewshot(d: &TypingDataset, k: usize, seed: u64) -> Result<TypingDataset> {
    sample_excluding(d, k, seed, &HashSet::new(), "fewshot")
}

/// A k-shot training split and an equally sized dev split drawn from the
/// remaining pool with `seed + 1`.
pub fn sample_fewshot_split(
    d: &TypingDataset,
    k: usize,
    seed: u64,
) -> Result<(TypingDataset, TypingDataset)> {
    let train = sample_fewshot(d, k, seed)?;
    let used: HashSet<&str> = train.examples().iter().map(|x| x.id.as_str()).collect();
    let dev = sample_excluding(d, k, seed.wrapping_add(1), &used, "fewshot-dev")?;
    Ok((train, dev))
}

fn sample_excluding(
    d: &TypingDataset,
    k: usize,
    seed: u64,
    excluded: &HashSet<&str>,
    split: &str,
) -> Result<TypingDataset> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let schema = d.schema();
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); schema.len()];
    for (i, x) in d.examples().iter().enumerate() {
        if excluded.contains(x.id.as_str()) {
            continue;
        }
        let t = schema
            .index_of(&x.gold_type)
            .expect("dataset examples are in schema");
        by_type[t].push(i);
    }
    for (t, pool) in schema.types().iter().zip(&by_type) {
        if pool.len() < k {
            return Err(Error::Validation(format!(
                "type {t} has {} available examples, fewer than k = {k}",
                pool.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<TypingExample> = Vec::with_capacity(k * schema.len());
    for pool in &by_type {
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|i| d.examples()[i].clone()));
    }
    TypingDataset::new(picked, schema.clone(), split)
}
