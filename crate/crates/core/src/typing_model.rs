//! From mask distributions (prompt path) or context vectors (fine-tuning path)
//! to per-type scores and predictions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::{MaskDistribution, MaskedLm, TokenId};
use crate::datasets::TypingExample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::schema::{EntityType, LabelSchema};
use crate::templates::TemplateSpec;
use crate::verbalizer::Verbalizer;

/// A verbalizer whose union vocabulary has been resolved to backend token ids.
#[derive(Debug, Clone)]
pub struct BoundVerbalizer<'v> {
    verbalizer: &'v Verbalizer,
    word_tokens: Vec<Vec<TokenId>>,
}

impl<'v> BoundVerbalizer<'v> {
    pub fn new(verbalizer: &'v Verbalizer, backend: &impl MaskedLm) -> Result<Self> {
        if verbalizer.union_vocabulary().is_empty() {
            return Err(Error::Config("label word vocabulary is empty".into()));
        }
        let word_tokens = verbalizer
            .union_vocabulary()
            .iter()
            .map(|w| {
                let ids = backend.resolve_word(w)?;
                if ids.is_empty() {
                    return Err(Error::Encode(format!(
                        "label word {w:?} resolves to no tokens"
                    )));
                }
                Ok(ids)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            verbalizer,
            word_tokens,
        })
    }

    pub fn verbalizer(&self) -> &'v Verbalizer {
        self.verbalizer
    }

    pub fn word_tokens(&self) -> &[Vec<TokenId>] {
        &self.word_tokens
    }

    /// Probability of each union word at the mask slot. A word spanning
    /// several sub-tokens gets the geometric mean of their probabilities.
    pub fn word_probs(&self, d: &MaskDistribution) -> Vec<f64> {
        self.word_tokens
            .iter()
            .map(|ids| match ids.as_slice() {
                [id] => d.prob(*id),
                many => {
                    let mean_log =
                        many.iter().map(|&id| d.prob(id).ln()).sum::<f64>() / many.len() as f64;
                    mean_log.exp()
                }
            })
            .collect()
    }

    pub fn type_index(&self, t: &EntityType) -> Option<usize> {
        self.verbalizer.types().position(|u| u == t)
    }
}

/// Per-type scores in verbalizer (canonical id) order.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeScores {
    pub types: Vec<EntityType>,
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl TypeScores {
    /// Highest-scoring type; ties go to the smaller canonical id.
    pub fn argmax(&self) -> &EntityType {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        &self.types[best]
    }

    pub fn get(&self, t: &EntityType) -> Option<f64> {
        self.types
            .iter()
            .position(|u| u == t)
            .map(|i| self.scores[i])
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.types
            .iter()
            .zip(&self.scores)
            .map(|(t, s)| (t.canonical_id(), *s))
            .collect()
    }
}

/// The mask distribution restricted to the union vocabulary and
/// renormalized; entries are aligned with `union_vocabulary()`.
pub fn project_distribution(d: &MaskDistribution, v: &BoundVerbalizer<'_>) -> Result<Vec<f64>> {
    project_word_probs(&v.word_probs(d))
}

pub(crate) fn project_word_probs(word_probs: &[f64]) -> Result<Vec<f64>> {
    if word_probs.is_empty() {
        return Err(Error::Config("label word vocabulary is empty".into()));
    }
    let total: f64 = word_probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "no probability mass on any label word".into(),
        ));
    }
    Ok(word_probs.iter().map(|p| p / total).collect())
}

/// Unnormalized per-type scores: the λ-weighted mean of the type's label word
/// probabilities.
pub fn raw_type_scores(word_probs: &[f64], v: &Verbalizer) -> Vec<f64> {
    v.entries()
        .iter()
        .zip(v.slots())
        .map(|((_, words), slots)| {
            let sum: f64 = words
                .iter()
                .zip(slots)
                .map(|(w, &s)| w.weight * word_probs[s])
                .sum();
            sum / words.len() as f64
        })
        .collect()
}

pub(crate) fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all type scores are zero".into()));
    }
    Ok(raw.iter().map(|s| s / total).collect())
}

/// Type scores from a mask distribution, normalized over types.
pub fn score_types(d: &MaskDistribution, v: &BoundVerbalizer<'_>) -> Result<TypeScores> {
    let raw = raw_type_scores(&v.word_probs(d), v.verbalizer());
    Ok(TypeScores {
        types: v.verbalizer().types().cloned().collect(),
        scores: normalize_scores(&raw)?,
        normalized: true,
    })
}

pub fn prompt_scores(
    x: &TypingExample,
    spec: &TemplateSpec,
    v: &BoundVerbalizer<'_>,
    backend: &impl MaskedLm,
) -> Result<TypeScores> {
    let p = spec.render(x)?;
    let d = backend.mask_distribution(&p)?;
    score_types(&d, v)
}

pub fn predict(
    x: &TypingExample,
    spec: &TemplateSpec,
    v: &BoundVerbalizer<'_>,
    backend: &impl MaskedLm,
) -> Result<EntityType> {
    prompt_scores(x, spec, v, backend).map(|s| s.argmax().clone())
}

/// Linear classification head over the backend's context vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneHead {
    pub types: Vec<EntityType>,
    pub width: usize,
    /// Row-major `|types| × width`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FineTuneHead {
    pub fn zeros(schema: &LabelSchema, width: usize) -> Self {
        Self {
            types: schema.types().to_vec(),
            width,
            weight: vec![0.0; schema.len() * width],
            bias: vec![0.0; schema.len()],
        }
    }

    pub fn random(schema: &LabelSchema, width: usize, seed: u64) -> Self {
        let mut head = Self::zeros(schema, width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        head.weight
            .iter_mut()
            .for_each(|w| *w = normal.sample(&mut rng));
        head
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.width
            || self.weight.len() != self.types.len() * self.width
            || self.bias.len() != self.types.len()
        {
            return Err(Error::Config(format!(
                "head shape {}x{} does not match context width {}",
                self.types.len(),
                self.width,
                hidden.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(self.width)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn ft_scores_from_hidden(hidden: &[f64], head: &FineTuneHead) -> Result<TypeScores> {
    Ok(TypeScores {
        types: head.types.clone(),
        scores: softmax(&head.logits(hidden)?),
        normalized: true,
    })
}

pub fn ft_scores(
    x: &TypingExample,
    head: &FineTuneHead,
    backend: &impl MaskedLm,
) -> Result<TypeScores> {
    if head.width != backend.hidden_width() {
        return Err(Error::Config(format!(
            "head width {} does not match backend width {}",
            head.width,
            backend.hidden_width()
        )));
    }
    ft_scores_from_hidden(&backend.cls_embedding(x)?, head)
}

/// Which scoring path a model uses.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a, 'v> {
    Prompt {
        template: &'a TemplateSpec,
        verbalizer: &'a BoundVerbalizer<'v>,
    },
    FineTune {
        head: &'a FineTuneHead,
    },
}

impl Scorer<'_, '_> {
    pub fn scores(&self, x: &TypingExample, backend: &impl MaskedLm) -> Result<TypeScores> {
        match self {
            Scorer::Prompt {
                template,
                verbalizer,
            } => prompt_scores(x, template, verbalizer, backend),
            Scorer::FineTune { head } => ft_scores(x, head, backend),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub predicted: EntityType,
    pub scores: TypeScores,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    predicted_type: String,
    normalized_scores: BTreeMap<String, f64>,
}

pub fn predict_all(
    xs: &[TypingExample],
    scorer: Scorer<'_, '_>,
    backend: &impl MaskedLm,
    exec: Execution,
) -> Result<Vec<Prediction>> {
    exec.try_map(xs, |x| {
        let scores = scorer.scores(x, backend)?;
        Ok(Prediction {
            id: x.id.clone(),
            predicted: scores.argmax().clone(),
            scores,
        })
    })
}

/// Writes predictions as JSONL `{id, predicted_type, normalized_scores}`.
pub fn write_predictions<W: Write>(preds: &[Prediction], mut out: W) -> Result<()> {
    for p in preds {
        let rec = PredictionRecord {
            id: p.id.clone(),
            predicted_type: p.predicted.canonical_id(),
            normalized_scores: p.scores.to_map(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

/// Reads `(id, predicted_type)` pairs from a prediction JSONL file.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<(String, EntityType)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: PredictionRecord = serde_json::from_str(l)
                .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
            let t = EntityType::parse(&rec.predicted_type)
                .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
            Ok((rec.id, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RuleTable, ToyConfig, ToyMlm, Trigger};
    use crate::schema::parse_label_schema;
    use crate::templates::HardTemplate;
    use crate::verbalizer::{build_verbalizer, LabelWord};
    use proptest::prelude::*;

    fn dist_over(words: &[&str], probs: &[f64]) -> (ToyMlm, MaskDistribution) {
        let m = ToyMlm::builder(ToyConfig::default())
            .words(words.iter().copied())
            .build()
            .unwrap();
        let mut full = vec![0.0; m.vocabulary().len()];
        let assigned: f64 = probs.iter().sum();
        let rest = m.vocabulary().len() - words.len();
        for (w, p) in words.iter().zip(probs) {
            full[m.vocabulary().id(w).unwrap()] = *p;
        }
        for (i, f) in full.iter_mut().enumerate() {
            if !words.contains(&m.vocabulary().word(i)) {
                *f = (1.0 - assigned) / rest as f64;
            }
        }
        (m, MaskDistribution::new(full).unwrap())
    }

    fn single(t: &str, words: &[(&str, f64)]) -> (EntityType, Vec<LabelWord>) {
        (
            EntityType::parse(t).unwrap(),
            words
                .iter()
                .map(|(w, l)| LabelWord {
                    word: w.to_string(),
                    weight: *l,
                })
                .collect(),
        )
    }

    #[test]
    fn projection_renormalizes() {
        let (m, d) = dist_over(&["city", "person"], &[0.6, 0.2]);
        let v = Verbalizer::from_entries(vec![
            single("a", &[("city", 1.0)]),
            single("b", &[("person", 1.0)]),
        ])
        .unwrap();
        let b = BoundVerbalizer::new(&v, &m).unwrap();
        let q = project_distribution(&d, &b).unwrap();
        assert!((q[0] - 0.75).abs() < 1e-12 && (q[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_projection() {
        let m = ToyMlm::builder(ToyConfig::default())
            .words(["w0", "w1"])
            .build()
            .unwrap();
        let n = m.vocabulary().len();
        let d = MaskDistribution::new(vec![1.0 / n as f64; n]).unwrap();
        let v = Verbalizer::from_entries(vec![
            single("a", &[("w0", 1.0)]),
            single("b", &[("w1", 1.0)]),
        ])
        .unwrap();
        let q = project_distribution(&d, &BoundVerbalizer::new(&v, &m).unwrap()).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eq3_weighted_mean() {
        let (m, d) = dist_over(&["w1", "w2", "w3"], &[0.2, 0.4, 0.1]);
        let v = Verbalizer::from_entries(vec![
            single("y", &[("w1", 1.0), ("w2", 1.0)]),
            single("z", &[("w3", 1.0)]),
        ])
        .unwrap();
        let b = BoundVerbalizer::new(&v, &m).unwrap();
        let raw = raw_type_scores(&b.word_probs(&d), &v);
        assert!((raw[0] - 0.3).abs() < 1e-12);
        let s = score_types(&d, &b).unwrap();
        assert!((s.scores[0] - 0.75).abs() < 1e-12 && (s.scores[1] - 0.25).abs() < 1e-12);

        let v = Verbalizer::from_entries(vec![single("y", &[("w1", 2.0), ("w2", 0.0)])]).unwrap();
        let b = BoundVerbalizer::new(&v, &m).unwrap();
        assert!((raw_type_scores(&b.word_probs(&d), &v)[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn all_zero_scores_are_degenerate() {
        let (m, d) = dist_over(&["w1", "w2"], &[0.0, 1.0]);
        let v = Verbalizer::from_entries(vec![single("y", &[("w1", 1.0)])]).unwrap();
        let b = BoundVerbalizer::new(&v, &m).unwrap();
        assert!(matches!(score_types(&d, &b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn predict_follows_rule_and_breaks_ties() {
        let mut rules = RuleTable::default();
        rules.push(Trigger::Mention("New York".into()), "city", 0.9);
        let m = ToyMlm::builder(ToyConfig::default())
            .words("He is from New York Bob".split(' '))
            .words(["person", "location", "city"])
            .rules(rules)
            .build()
            .unwrap();
        let schema = parse_label_schema(&["location/city", "person"], "/").unwrap();
        let v = build_verbalizer(&schema, None, 0).unwrap();
        let b = BoundVerbalizer::new(&v, &m).unwrap();
        let spec = TemplateSpec::hard(HardTemplate::T3);
        let x = TypingExample {
            id: "1".into(),
            tokens: "He is from New York".split(' ').map(String::from).collect(),
            mention_span: (3, 5),
            gold_type: EntityType::parse("person").unwrap(),
        };
        assert_eq!(
            predict(&x, &spec, &b, &m).unwrap().canonical_id(),
            "location/city"
        );
        assert_eq!(
            predict(&x, &spec, &b, &m).unwrap(),
            predict(&x, &spec, &b, &m).unwrap()
        );

        // uniform distribution, equal word counts: tie goes to the smaller id
        let v = Verbalizer::from_entries(vec![
            single("b", &[("person", 1.0)]),
            single("a", &[("location", 1.0)]),
        ])
        .unwrap();
        let b = BoundVerbalizer::new(&v, &m).unwrap();
        let y = TypingExample {
            mention_span: (0, 1),
            ..x.clone()
        };
        assert_eq!(predict(&y, &spec, &b, &m).unwrap().canonical_id(), "a");
    }

    #[test]
    fn ft_head_softmax() {
        let schema = parse_label_schema(&["a", "b", "c", "d"], "/").unwrap();
        let head = FineTuneHead::zeros(&schema, 8);
        let s = ft_scores_from_hidden(&[0.3; 8], &head).unwrap();
        assert!(s.scores.iter().all(|p| (p - 0.25).abs() < 1e-12));
        let mut head = head;
        head.bias[2] = 50.0;
        let s = ft_scores_from_hidden(&[0.3; 8], &head).unwrap();
        assert_eq!(s.argmax().canonical_id(), "c");
        assert!(s.scores[2] > 0.999_999);
        assert!(matches!(
            ft_scores_from_hidden(&[0.0; 3], &head),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn ft_scores_normalized(h in proptest::collection::vec(-3.0f64..3.0, 6), seed in 0u64..1000) {
            let schema = parse_label_schema(&["a", "b/c", "d"], "/").unwrap();
            let head = FineTuneHead::random(&schema, 6, seed);
            let s = ft_scores_from_hidden(&h, &head).unwrap();
            prop_assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn projection_sums_to_one(raw in proptest::collection::vec(0.001f64..1.0, 5)) {
            let total: f64 = raw.iter().sum();
            let q = project_word_probs(&raw.iter().map(|r| r / total * 0.3).collect::<Vec<_>>()).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
