use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LinkedSentence, SelfSupConfig, TypeDictionary};
use crate::error::{Error, Result};
use crate::templates::{apply_hiding, render_hard_span, HardTemplate, PromptedInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Two T3-rendered sides drawn from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub a: PromptedInput,
    pub b: PromptedInput,
    pub polarity: Polarity,
    /// Corpus indices of the two source sentences, when known.
    pub sources: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    a_text: String,
    a_mask_index: usize,
    b_text: String,
    b_mask_index: usize,
    polarity: Polarity,
    hidden_a: bool,
    hidden_b: bool,
}

// Sampling switches from rejection to enumeration when the requested count
// is at least this fraction of everything available.
const DENSE_FRACTION: usize = 4;

fn positive_groups(corpus: &[LinkedSentence]) -> Vec<Vec<usize>> {
    let mut by_key: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        by_key.entry(s.entity_key()).or_default().push(i);
    }
    by_key.into_values().filter(|g| g.len() >= 2).collect()
}

fn typed_sentences<'d>(
    corpus: &[LinkedSentence],
    dict: &'d TypeDictionary,
) -> Vec<(usize, &'d str)> {
    corpus
        .iter()
        .enumerate()
        .filter_map(|(i, s)| dict.lookup(s).map(|t| (i, t)))
        .collect()
}

fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn negative_total(typed: &[(usize, &str)]) -> usize {
    let mut per_type: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, t) in typed {
        *per_type.entry(t).or_default() += 1;
    }
    let n: usize = per_type.values().sum();
    let same: usize = per_type.values().map(|&k| pair_count(k)).sum();
    pair_count(n) - same
}

fn sample_positives(
    groups: &[Vec<usize>],
    total: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    if total <= DENSE_FRACTION * c {
        let all: Vec<(usize, usize)> = groups
            .iter()
            .flat_map(|g| {
                (0..g.len()).flat_map(move |i| (i + 1..g.len()).map(move |j| (g[i], g[j])))
            })
            .collect();
        return sample(rng, all.len(), c)
            .into_iter()
            .map(|k| all[k])
            .collect();
    }
    let weights = WeightedIndex::new(groups.iter().map(|g| pair_count(g.len()) as f64))
        .expect("at least one group with a pair");
    let mut seen = HashSet::with_capacity(c);
    let mut out = Vec::with_capacity(c);
    while out.len() < c {
        let g = &groups[weights.sample(rng)];
        let picked = sample(rng, g.len(), 2);
        let (a, b) = (g[picked.index(0)], g[picked.index(1)]);
        if seen.insert((a.min(b), a.max(b))) {
            out.push((a, b));
        }
    }
    out
}

fn sample_negatives(
    corpus: &[LinkedSentence],
    typed: &[(usize, &str)],
    total: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let eligible = |x: &(usize, &str), y: &(usize, &str)| {
        x.1 != y.1 && corpus[x.0].entity_key() != corpus[y.0].entity_key()
    };
    if total <= DENSE_FRACTION * c {
        let mut all = Vec::new();
        for (i, x) in typed.iter().enumerate() {
            for y in &typed[i + 1..] {
                if eligible(x, y) {
                    all.push((x.0, y.0));
                }
            }
        }
        let n = c.min(all.len());
        return sample(rng, all.len(), n)
            .into_iter()
            .map(|k| all[k])
            .collect();
    }
    let mut seen = HashSet::with_capacity(c);
    let mut out = Vec::with_capacity(c);
    while out.len() < c {
        let picked = sample(rng, typed.len(), 2);
        let (x, y) = (&typed[picked.index(0)], &typed[picked.index(1)]);
        if eligible(x, y) && seen.insert((x.0.min(y.0), x.0.max(y.0))) {
            out.push((x.0, y.0));
        }
    }
    out
}

fn render_side(s: &LinkedSentence, index: usize) -> Result<PromptedInput> {
    render_hard_span(
        HardTemplate::T3,
        &s.tokens,
        s.span(),
        &format!("corpus-{index}"),
    )
}

/// Per-pair hiding stream, a function of the base seed and the global pair
/// index only.
fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Samples `cfg.c` positive and `cfg.c` negative pairs, renders both sides
/// with T3, and hides each side's mention with probability `cfg.alpha`.
/// Positives come first, then negatives.
pub fn generate_pairs(
    corpus: &[LinkedSentence],
    dict: &TypeDictionary,
    cfg: &SelfSupConfig,
) -> Result<Vec<PairExample>> {
    cfg.validate()?;
    let groups = positive_groups(corpus);
    let pos_total: usize = groups.iter().map(|g| pair_count(g.len())).sum();
    let typed = typed_sentences(corpus, dict);
    let neg_total = negative_total(&typed);
    if pos_total < cfg.c || neg_total < cfg.c {
        return Err(Error::PairShortfall {
            requested: cfg.c,
            positives: pos_total,
            negatives: neg_total,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positives = sample_positives(&groups, pos_total, cfg.c, &mut rng);
    let negatives = sample_negatives(corpus, &typed, neg_total, cfg.c, &mut rng);
    if negatives.len() < cfg.c {
        return Err(Error::PairShortfall {
            requested: cfg.c,
            positives: pos_total,
            negatives: negatives.len(),
        });
    }
    let plan: Vec<(usize, usize, Polarity)> = positives
        .into_iter()
        .map(|(a, b)| (a, b, Polarity::Positive))
        .chain(
            negatives
                .into_iter()
                .map(|(a, b)| (a, b, Polarity::Negative)),
        )
        .collect();

    let shard_len = plan.len().div_ceil(cfg.shards).max(1);
    let shard_starts: Vec<usize> = (0..plan.len()).step_by(shard_len).collect();
    let shards = cfg.execution.try_map(&shard_starts, |&start| {
        let end = (start + shard_len).min(plan.len());
        (start..end)
            .map(|k| {
                let (ia, ib, polarity) = plan[k];
                let mut rng = pair_rng(cfg.seed, k);
                let a = apply_hiding(&render_side(&corpus[ia], ia)?, cfg.alpha, &mut rng)?;
                let b = apply_hiding(&render_side(&corpus[ib], ib)?, cfg.alpha, &mut rng)?;
                Ok(PairExample {
                    a,
                    b,
                    polarity,
                    sources: Some((ia, ib)),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(shards.into_iter().flatten().collect())
}

/// Writes pairs as JSONL; each side's text is its tokens joined by single
/// spaces.
pub fn write_pairs<W: Write>(pairs: &[PairExample], mut out: W) -> Result<()> {
    for p in pairs {
        let rec = PairRecord {
            a_text: p.a.tokens.join(" "),
            a_mask_index: p.a.mask_index,
            b_text: p.b.tokens.join(" "),
            b_mask_index: p.b.mask_index,
            polarity: p.polarity,
            hidden_a: p.a.hidden,
            hidden_b: p.b.hidden,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let at = |e: String| Error::data(path, format!("line {}: {e}", i + 1));
            let rec: PairRecord = serde_json::from_str(l).map_err(|e| at(e.to_string()))?;
            let side = |text: &str, mask: usize, hidden: bool| {
                let tokens = text.split(' ').map(String::from).collect();
                PromptedInput::from_t3_tokens(tokens, mask, hidden).map_err(|e| at(e.to_string()))
            };
            Ok(PairExample {
                a: side(&rec.a_text, rec.a_mask_index, rec.hidden_a)?,
                b: side(&rec.b_text, rec.b_mask_index, rec.hidden_b)?,
                polarity: rec.polarity,
                sources: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;

    fn sentence(text: &str, span: (usize, usize), id: Option<&str>) -> LinkedSentence {
        LinkedSentence::new(
            text.split(' ').map(String::from).collect(),
            span,
            id.map(String::from),
        )
        .unwrap()
    }

    fn small_corpus() -> (Vec<LinkedSentence>, TypeDictionary) {
        let corpus = vec![
            sentence("Obama spoke today", (0, 1), Some("Q76")),
            sentence("Yesterday Obama left", (1, 2), Some("Q76")),
            sentence("Paris is large", (0, 1), Some("Q90")),
            sentence("We saw Paris", (2, 3), Some("Q90")),
            sentence("Berlin is cold", (0, 1), Some("Q64")),
        ];
        let mut dict = TypeDictionary::default();
        dict.insert("Q76", "person");
        dict.insert("Q90", "location");
        dict.insert("Q64", "location");
        (corpus, dict)
    }

    #[test]
    fn pairs_respect_definitions() {
        let (corpus, dict) = small_corpus();
        let cfg = SelfSupConfig {
            c: 2,
            alpha: 0.0,
            ..Default::default()
        };
        let pairs = generate_pairs(&corpus, &dict, &cfg).unwrap();
        assert_eq!(pairs.len(), 4);
        for p in &pairs {
            let (a, b) = p.sources.unwrap();
            assert_ne!(a, b);
            let (ka, kb) = (corpus[a].entity_key(), corpus[b].entity_key());
            match p.polarity {
                Polarity::Positive => assert_eq!(ka, kb),
                Polarity::Negative => assert_ne!(dict.lookup(&corpus[a]), dict.lookup(&corpus[b])),
            }
            assert!(p.a.text().contains("In this sentence,"));
        }
    }

    #[test]
    fn shortfall_reports_achievable_counts() {
        let (corpus, dict) = small_corpus();
        let cfg = SelfSupConfig {
            c: 3,
            ..Default::default()
        };
        match generate_pairs(&corpus, &dict, &cfg) {
            Err(Error::PairShortfall {
                requested,
                positives,
                negatives,
            }) => assert_eq!((requested, positives, negatives), (3, 2, 6)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_mentions_give_no_positives() {
        let corpus = vec![
            sentence("A ran", (0, 1), None),
            sentence("B ran", (0, 1), None),
        ];
        let cfg = SelfSupConfig {
            c: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_pairs(&corpus, &TypeDictionary::default(), &cfg),
            Err(Error::PairShortfall { positives: 0, .. })
        ));
    }

    #[test]
    fn shard_count_does_not_change_output() {
        let (corpus, dict) = small_corpus();
        let base = SelfSupConfig {
            c: 2,
            alpha: 0.5,
            seed: 9,
            ..Default::default()
        };
        let one = generate_pairs(&corpus, &dict, &base).unwrap();
        for shards in [2, 3, 4] {
            let cfg = SelfSupConfig {
                shards,
                execution: Execution::Parallel,
                ..base.clone()
            };
            assert_eq!(generate_pairs(&corpus, &dict, &cfg).unwrap(), one);
        }
    }

    #[test]
    fn pair_file_round_trip() {
        let (corpus, dict) = small_corpus();
        let cfg = SelfSupConfig {
            c: 2,
            alpha: 0.5,
            seed: 3,
            ..Default::default()
        };
        let pairs = generate_pairs(&corpus, &dict, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let mut buf = Vec::new();
        write_pairs(&pairs, &mut buf).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(back.len(), pairs.len());
        for (x, y) in back.iter().zip(&pairs) {
            assert_eq!(x.a.tokens, y.a.tokens);
            assert_eq!(x.b.mask_index, y.b.mask_index);
            assert_eq!(x.a.mention_copy(), y.a.mention_copy());
            assert_eq!(
                (x.a.hidden, x.b.hidden, x.polarity),
                (y.a.hidden, y.b.hidden, y.polarity)
            );
        }
    }
}
