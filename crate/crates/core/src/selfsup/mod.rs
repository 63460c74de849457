//! Self-supervised pre-training from an entity-linked corpus: pair sampling
//! with entity hiding, distribution-level similarity, and the contrastive
//! objective.

mod objective;
mod pairs;

pub use objective::{
    js_similarity, js_similarity_grad, pretrain, selfsup_loss, selfsup_loss_grad, PretrainReport,
    SelfSupGrad,
};
pub use pairs::{generate_pairs, read_pairs, write_pairs, PairExample, Polarity};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// One sentence with a linked entity mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSentence {
    pub tokens: Vec<String>,
    pub mention_span: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_id: Option<String>,
    #[serde(default)]
    pub surface: String,
}

impl LinkedSentence {
    pub fn new(
        tokens: Vec<String>,
        mention_span: (usize, usize),
        entity_id: Option<String>,
    ) -> Result<Self> {
        let mut s = Self {
            tokens,
            mention_span: [mention_span.0, mention_span.1],
            entity_id,
            surface: String::new(),
        };
        s.check_span().map_err(Error::Validation)?;
        s.surface = s.mention().join(" ");
        Ok(s)
    }

    pub fn span(&self) -> (usize, usize) {
        (self.mention_span[0], self.mention_span[1])
    }

    pub fn mention(&self) -> &[String] {
        &self.tokens[self.mention_span[0]..self.mention_span[1]]
    }

    /// Entity identity used for positive pairs: the link id, or the surface
    /// when the sentence carries no id.
    pub fn entity_key(&self) -> &str {
        self.entity_id.as_deref().unwrap_or(&self.surface)
    }

    fn check_span(&self) -> std::result::Result<(), String> {
        let [s, e] = self.mention_span;
        if s >= e || e > self.tokens.len() {
            return Err(format!(
                "invalid mention span [{s}, {e}) for {} tokens",
                self.tokens.len()
            ));
        }
        if let Some(t) = self
            .tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(format!("token {t:?} is empty or contains whitespace"));
        }
        Ok(())
    }

    fn validate(&mut self) -> std::result::Result<(), String> {
        self.check_span()?;
        let surface = self.mention().join(" ");
        if self.surface.is_empty() {
            self.surface = surface;
        } else if self.surface != surface {
            return Err(format!(
                "surface {:?} does not match mention {surface:?}",
                self.surface
            ));
        }
        Ok(())
    }
}

/// Reads a JSONL corpus of linked sentences.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<LinkedSentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut s: LinkedSentence = serde_json::from_str(l)
                .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
            s.validate()
                .map_err(|m| Error::data(path, format!("line {}: {m}", i + 1)))?;
            Ok(s)
        })
        .collect()
}

pub fn write_corpus<W: std::io::Write>(corpus: &[LinkedSentence], mut out: W) -> Result<()> {
    for s in corpus {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

/// Entity id or surface → coarse type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeDictionary {
    entries: BTreeMap<String, String>,
}

impl TypeDictionary {
    pub fn new(entries: BTreeMap<String, String>) -> Self {
        Self { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn insert(&mut self, key: impl Into<String>, ty: impl Into<String>) {
        self.entries.insert(key.into(), ty.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Looks the sentence up by entity id first, then by surface.
    pub fn lookup(&self, s: &LinkedSentence) -> Option<&str> {
        s.entity_id
            .as_deref()
            .and_then(|id| self.get(id))
            .or_else(|| self.get(&s.surface))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSupConfig {
    /// Pairs per polarity.
    pub c: usize,
    /// Probability of hiding the mention on each pair side.
    pub alpha: f64,
    /// Weight of the negative-pair term.
    pub gamma: f64,
    pub seed: u64,
    /// Shards used when rendering pairs; the output does not depend on it.
    pub shards: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        Self {
            c: 1000,
            alpha: 0.4,
            gamma: 0.5,
            seed: 0,
            shards: 1,
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 1,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            execution: Execution::default(),
        }
    }
}

impl SelfSupConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.c == 0 {
            return bad("pair count must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be positive");
        }
        if self.shards == 0 {
            return bad("shards must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("weight_decay must be non-negative and max_grad_norm positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn surface_and_key() {
        let s = LinkedSentence::new(toks("He visited New York ."), (2, 4), None).unwrap();
        assert_eq!(s.surface, "New York");
        assert_eq!(s.entity_key(), "New York");
        let t = LinkedSentence::new(toks("Paris is big"), (0, 1), Some("Q90".into())).unwrap();
        assert_eq!(t.entity_key(), "Q90");
        assert!(LinkedSentence::new(toks("a b"), (1, 1), None).is_err());
    }

    #[test]
    fn dictionary_prefers_ids() {
        let mut d = TypeDictionary::default();
        d.insert("Q90", "location");
        d.insert("Paris", "person");
        let with_id =
            LinkedSentence::new(toks("Paris is big"), (0, 1), Some("Q90".into())).unwrap();
        let without = LinkedSentence::new(toks("Paris is big"), (0, 1), None).unwrap();
        let unknown_id =
            LinkedSentence::new(toks("Paris is big"), (0, 1), Some("Q1".into())).unwrap();
        assert_eq!(d.lookup(&with_id), Some("location"));
        assert_eq!(d.lookup(&without), Some("person"));
        assert_eq!(d.lookup(&unknown_id), Some("person"));
    }

    #[test]
    fn corpus_round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = vec![
            LinkedSentence::new(toks("Paris is big"), (0, 1), Some("Q90".into())).unwrap(),
            LinkedSentence::new(toks("I like Rome"), (2, 3), None).unwrap(),
        ];
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);

        std::fs::write(&path, "{\"tokens\":[\"a\"],\"mention_span\":[0,1]}\n{\"tokens\":[\"a\"],\"mention_span\":[0,1],\"surface\":\"b\"}\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(SelfSupConfig::default().validate().is_ok());
        for bad in [
            SelfSupConfig {
                c: 0,
                ..Default::default()
            },
            SelfSupConfig {
                alpha: 1.5,
                ..Default::default()
            },
            SelfSupConfig {
                gamma: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
