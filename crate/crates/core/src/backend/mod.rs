//! Masked-language-model backends.
//!
//! [`MaskedLm`] is what scoring and prediction need; [`TrainableMlm`] adds the
//! explicit forward/backward passes the training loops drive. Any engine that
//! can tokenize, produce mask-slot probabilities, take gradient steps and
//! register new tokens can sit behind these traits. [`ToyMlm`] is a small,
//! fully deterministic implementation for running the whole pipeline on CPU.

mod params;
mod toy;

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::datasets::TypingExample;
use crate::error::{Error, Result};
use crate::templates::{PromptedInput, MASK_TOKEN};

pub use params::{sum_in_order, ParamSet, Tensor};
pub use toy::{Rule, RuleTable, ToyConfig, ToyMlm, ToyMlmBuilder, Trigger};

pub type TokenId = usize;

/// Word ↔ id mapping of a backend, including registered special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    special: Vec<bool>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// `specials` come first and are flagged as special tokens; the mask
    /// token must be among them.
    pub fn new<S: AsRef<str>>(
        specials: &[S],
        words: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let mut v = Self {
            words: Vec::new(),
            special: Vec::new(),
            index: HashMap::new(),
        };
        for s in specials {
            v.insert(s.as_ref().to_string(), true);
        }
        for w in words {
            v.insert(w, false);
        }
        if v.id(MASK_TOKEN).is_none() {
            return Err(Error::Config("vocabulary lacks the mask token".into()));
        }
        Ok(v)
    }

    fn insert(&mut self, word: String, special: bool) -> TokenId {
        if let Some(&id) = self.index.get(&word) {
            return id;
        }
        let id = self.words.len();
        self.index.insert(word.clone(), id);
        self.words.push(word);
        self.special.push(special);
        id
    }

    pub(crate) fn push_special(&mut self, name: &str) -> TokenId {
        self.insert(name.to_string(), true)
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special[id]
    }

    pub fn mask_id(&self) -> TokenId {
        self.id(MASK_TOKEN).expect("mask token present")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Hex SHA-256 over the ordered words and their special flags.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (w, s) in self.words.iter().zip(&self.special) {
            h.update(w.as_bytes());
            h.update(if *s { b"\x01" } else { b"\x00" });
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Probabilities over the full backend vocabulary at the mask slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDistribution {
    probs: Vec<f64>,
}

impl MaskDistribution {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Degenerate(
                "mask distribution has negative or non-finite entries".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Degenerate(format!(
                "mask distribution sums to {total}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Trainable parameters of an encoder plus an update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub version: u64,
    pub params: ParamSet,
}

/// Inference contract for a masked language model.
pub trait MaskedLm: Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Width of the context vector returned by [`MaskedLm::cls_embedding`].
    fn hidden_width(&self) -> usize;

    /// Adds new special tokens with freshly initialized embeddings. Names that
    /// are already registered return their existing ids.
    fn register_special_tokens(&mut self, names: &[String], seed: u64) -> Result<Vec<TokenId>> {
        let _ = (names, seed);
        Err(Error::Capability(
            "backend cannot register new tokens".into(),
        ))
    }

    fn mask_distribution(&self, p: &PromptedInput) -> Result<MaskDistribution>;

    /// Context vector for the fine-tuning baseline, with the mention marked.
    fn cls_embedding(&self, x: &TypingExample) -> Result<Vec<f64>>;

    /// Sub-token ids of a label word. Multi-token words are scored by the mean
    /// of their sub-token log-probabilities at the mask slot.
    fn resolve_word(&self, word: &str) -> Result<Vec<TokenId>> {
        self.vocabulary()
            .id(word)
            .map(|id| vec![id])
            .ok_or_else(|| Error::Encode(format!("label word {word:?} is not in the vocabulary")))
    }
}

/// Forward/backward passes over the encoder parameters.
pub trait TrainableMlm: MaskedLm {
    type MaskCache: Send;
    type ClsCache: Send;

    fn state(&self) -> &EncoderState;
    fn state_mut(&mut self) -> &mut EncoderState;

    fn forward_mask(&self, p: &PromptedInput) -> Result<(MaskDistribution, Self::MaskCache)>;

    /// Accumulates into `grads` the gradient of a scalar whose derivative with
    /// respect to the mask probabilities is `grad_probs`.
    fn backward_mask(&self, cache: &Self::MaskCache, grad_probs: &[f64], grads: &mut ParamSet);

    fn forward_cls(&self, x: &TypingExample) -> Result<(Vec<f64>, Self::ClsCache)>;

    fn backward_cls(&self, cache: &Self::ClsCache, grad_hidden: &[f64], grads: &mut ParamSet);

    fn params(&self) -> &ParamSet {
        &self.state().params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.state_mut().params
    }

    /// Makes every special token a prompt needs available, registering the
    /// missing ones.
    fn ensure_special_tokens(&mut self, names: &[String], seed: u64) -> Result<()> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| self.vocabulary().id(n).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            self.register_special_tokens(&missing, seed)?;
        }
        Ok(())
    }
}
