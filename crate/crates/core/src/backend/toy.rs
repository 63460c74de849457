//! A small deterministic masked language model.
//!
//! Token embeddings are pooled with a mild positional weighting, passed
//! through one `tanh` layer, and scored against output embeddings. The mask
//! logits add the log of a fixed prior built from a rule table: each rule
//! fires on a mention surface or on a keyword anywhere in the input and puts
//! mass on one word, with additive smoothing over the rest of the vocabulary.
//! With zero-initialized output embeddings the initial mask distribution is
//! exactly that prior, which plays the part of pre-trained knowledge.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    EncoderState, MaskDistribution, MaskedLm, ParamSet, Tensor, TokenId, TrainableMlm, Vocabulary,
};
use crate::datasets::TypingExample;
use crate::error::{Error, Result};
use crate::templates::{PromptedInput, HARD_TEMPLATE_WORDS, MASK_TOKEN};

pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MENTION_START: &str = "[E]";
pub const MENTION_END: &str = "[/E]";

const BASE_SPECIALS: [&str; 5] = [MASK_TOKEN, CLS_TOKEN, SEP_TOKEN, MENTION_START, MENTION_END];
const POSITION_SLOPE: f64 = 0.01;
const FORMAT: &str = "prompt-typing/toy-mlm";
const FORMAT_VERSION: u32 = 1;

const TOKEN_EMB: usize = 0;
const HIDDEN_W: usize = 1;
const HIDDEN_B: usize = 2;
const OUT_EMB: usize = 3;
const OUT_B: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dim: usize,
    pub seed: u64,
    /// Standard deviation of input embedding entries.
    pub embedding_scale: f64,
    /// Standard deviation of output embedding entries; zero keeps the initial
    /// mask distribution equal to the rule prior.
    pub output_scale: f64,
    pub smoothing: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 0,
            embedding_scale: 1.0,
            output_scale: 0.0,
            smoothing: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    /// Fires when the mention copy, joined by spaces, equals this string.
    Mention(String),
    /// Fires when this token occurs anywhere in the input.
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub trigger: Trigger,
    pub word: String,
    pub mass: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleTable {
    pub rules: Vec<Rule>,
}

impl RuleTable {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn push(&mut self, trigger: Trigger, word: impl Into<String>, mass: f64) {
        self.rules.push(Rule {
            trigger,
            word: word.into(),
            mass,
        });
    }
}

#[derive(Debug, Clone, Default)]
struct ResolvedRules {
    mention: HashMap<String, Vec<(TokenId, f64)>>,
    keyword: HashMap<String, Vec<(TokenId, f64)>>,
}

impl ResolvedRules {
    fn resolve(table: &RuleTable, vocab: &Vocabulary) -> Result<Self> {
        let mut out = Self::default();
        for r in &table.rules {
            if !r.mass.is_finite() || r.mass <= 0.0 {
                return Err(Error::Config(format!(
                    "rule mass must be positive, got {}",
                    r.mass
                )));
            }
            let id = vocab.id(&r.word).ok_or_else(|| {
                Error::Config(format!("rule target {:?} is not in the vocabulary", r.word))
            })?;
            let slot = match &r.trigger {
                Trigger::Mention(m) => out.mention.entry(m.clone()).or_default(),
                Trigger::Keyword(k) => out.keyword.entry(k.clone()).or_default(),
            };
            slot.push((id, r.mass));
        }
        Ok(out)
    }
}

fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn gaussian_row(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Builds a [`ToyMlm`] whose vocabulary covers the given words, the hard
/// template words and every rule target.
#[derive(Debug, Clone, Default)]
pub struct ToyMlmBuilder {
    config: ToyConfig,
    words: Vec<String>,
    seen: HashSet<String>,
    rules: RuleTable,
}

impl ToyMlmBuilder {
    pub fn new(config: ToyConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn word(mut self, w: impl Into<String>) -> Self {
        self.add(w.into());
        self
    }

    pub fn words<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for w in words {
            self.add(w.into());
        }
        self
    }

    pub fn examples<'a>(mut self, xs: impl IntoIterator<Item = &'a TypingExample>) -> Self {
        for x in xs {
            for t in &x.tokens {
                self.add(t.clone());
            }
        }
        self
    }

    pub fn rules(mut self, rules: RuleTable) -> Self {
        self.rules = rules;
        self
    }

    fn add(&mut self, w: String) {
        if !BASE_SPECIALS.contains(&w.as_str()) && self.seen.insert(w.clone()) {
            self.words.push(w);
        }
    }

    pub fn build(mut self) -> Result<ToyMlm> {
        if self.config.dim == 0 {
            return Err(Error::Config(
                "toy backend dimension must be positive".into(),
            ));
        }
        for w in HARD_TEMPLATE_WORDS {
            self.add(w.to_string());
        }
        let targets: Vec<String> = self.rules.rules.iter().map(|r| r.word.clone()).collect();
        for w in targets {
            self.add(w);
        }
        let vocab = Vocabulary::new(&BASE_SPECIALS, self.words)?;
        ToyMlm::initialize(self.config, vocab, self.rules)
    }
}

#[derive(Debug, Clone)]
pub struct ToyMlm {
    config: ToyConfig,
    vocab: Vocabulary,
    rules: RuleTable,
    resolved: ResolvedRules,
    state: EncoderState,
}

/// Saved intermediate values of one mask-slot forward pass.
#[derive(Debug, Clone)]
pub struct ToyMaskCache {
    backbone: BackboneCache,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    ids: Vec<TokenId>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: String,
    format_version: u32,
    state_version: u64,
    config: ToyConfig,
    vocab_hash: String,
    vocab: Vec<String>,
    special: Vec<bool>,
    rules: RuleTable,
    tensors: Vec<Tensor>,
}

impl ToyMlm {
    pub fn builder(config: ToyConfig) -> ToyMlmBuilder {
        ToyMlmBuilder::new(config)
    }

    fn initialize(config: ToyConfig, vocab: Vocabulary, rules: RuleTable) -> Result<Self> {
        let d = config.dim;
        let resolved = ResolvedRules::resolve(&rules, &vocab)?;
        let mut token_emb = Tensor::zeros("token_embeddings", 0, d);
        let mut out_emb = Tensor::zeros("output_embeddings", 0, d);
        let mut out_b = Tensor::zeros("output_bias", 0, 1);
        for w in vocab.words() {
            let mut rng = named_rng(config.seed, w);
            token_emb.push_row(&gaussian_row(&mut rng, d, config.embedding_scale));
            out_emb.push_row(&gaussian_row(&mut rng, d, config.output_scale));
            out_b.push_row(&[0.0]);
        }
        let mut hidden_w = Tensor::zeros("hidden_weight", d, d);
        hidden_w.data = gaussian_row(
            &mut named_rng(config.seed, "\0hidden"),
            d * d,
            1.0 / (d as f64).sqrt(),
        );
        let hidden_b = Tensor::zeros("hidden_bias", d, 1);
        let params = ParamSet {
            tensors: vec![token_emb, hidden_w, hidden_b, out_emb, out_b],
        };
        Ok(Self {
            config,
            vocab,
            rules,
            resolved,
            state: EncoderState { version: 0, params },
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn rules(&self) -> &RuleTable {
        &self.rules
    }

    fn encode(&self, tokens: &[String]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.vocab.id(t).ok_or_else(|| {
                    Error::Encode(format!("token {t:?} is not in the toy vocabulary"))
                })
            })
            .collect()
    }

    fn backbone(&self, ids: Vec<TokenId>) -> BackboneCache {
        let d = self.config.dim;
        let p = &self.state.params.tensors;
        let raw: Vec<f64> = (0..ids.len())
            .map(|i| 1.0 + POSITION_SLOPE * i as f64)
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut pooled = vec![0.0; d];
        for (&id, &w) in ids.iter().zip(&weights) {
            for (acc, e) in pooled.iter_mut().zip(p[TOKEN_EMB].row(id)) {
                *acc += w * e;
            }
        }
        let hidden = (0..d)
            .map(|i| {
                let a: f64 = p[HIDDEN_W]
                    .row(i)
                    .iter()
                    .zip(&pooled)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + p[HIDDEN_B].data[i];
                a.tanh()
            })
            .collect();
        BackboneCache {
            ids,
            weights,
            pooled,
            hidden,
        }
    }

    fn backbone_backward(&self, cache: &BackboneCache, grad_hidden: &[f64], grads: &mut ParamSet) {
        let d = self.config.dim;
        let w = &self.state.params.tensors[HIDDEN_W];
        let da: Vec<f64> = grad_hidden
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let mut dx = vec![0.0; d];
        {
            let gw = &mut grads.tensors[HIDDEN_W];
            for i in 0..d {
                let row = gw.row_mut(i);
                for j in 0..d {
                    row[j] += da[i] * cache.pooled[j];
                }
                for (acc, wij) in dx.iter_mut().zip(w.row(i)) {
                    *acc += da[i] * wij;
                }
            }
        }
        for (acc, g) in grads.tensors[HIDDEN_B].data.iter_mut().zip(&da) {
            *acc += g;
        }
        let ge = &mut grads.tensors[TOKEN_EMB];
        for (&id, &wt) in cache.ids.iter().zip(&cache.weights) {
            for (acc, g) in ge.row_mut(id).iter_mut().zip(&dx) {
                *acc += wt * g;
            }
        }
    }

    fn log_prior(&self, p: &PromptedInput) -> Vec<f64> {
        let v = self.vocab.len();
        let mut fired: Vec<(TokenId, f64)> = Vec::new();
        let mention = p.mention_copy().join(" ");
        if let Some(rs) = self.resolved.mention.get(&mention) {
            fired.extend_from_slice(rs);
        }
        let mut seen = HashSet::new();
        for t in &p.tokens {
            if seen.insert(t.as_str()) {
                if let Some(rs) = self.resolved.keyword.get(t) {
                    fired.extend_from_slice(rs);
                }
            }
        }
        if fired.is_empty() {
            return vec![-(v as f64).ln(); v];
        }
        let mut mass = vec![self.config.smoothing; v];
        for (id, m) in fired {
            mass[id] += m;
        }
        let total: f64 = mass.iter().sum();
        mass.iter().map(|m| (m / total).ln()).collect()
    }

    fn check_prompt(&self, p: &PromptedInput) -> Result<()> {
        if p.tokens.get(p.mask_index).map(String::as_str) != Some(MASK_TOKEN) || p.mask_count() != 1
        {
            return Err(Error::Encode(
                "prompted input must contain exactly one mask slot".into(),
            ));
        }
        Ok(())
    }

    fn cls_tokens(x: &TypingExample) -> Vec<String> {
        let (s, e) = x.mention_span;
        let mut out = Vec::with_capacity(x.tokens.len() + 4);
        out.push(CLS_TOKEN.to_string());
        out.extend_from_slice(&x.tokens[..s]);
        out.push(MENTION_START.to_string());
        out.extend_from_slice(&x.tokens[s..e]);
        out.push(MENTION_END.to_string());
        out.extend_from_slice(&x.tokens[e..]);
        out.push(SEP_TOKEN.to_string());
        out
    }

    /// Writes `metadata.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Metadata {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            state_version: self.state.version,
            config: self.config.clone(),
            vocab_hash: self.vocab.content_hash(),
            vocab: self.vocab.words().to_vec(),
            special: (0..self.vocab.len())
                .map(|i| self.vocab.is_special(i))
                .collect(),
            rules: self.rules.clone(),
            tensors: self.state.params.tensors.clone(),
        };
        let meta_path = dir.join("metadata.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&meta_path, e))?;
        let weights_path = dir.join("weights.bin");
        std::fs::write(&weights_path, self.state.params.to_le_bytes())
            .map_err(|e| Error::io(&weights_path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("metadata.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Metadata =
            serde_json::from_str(&text).map_err(|e| Error::data(&meta_path, e.to_string()))?;
        if meta.format != FORMAT || meta.format_version != FORMAT_VERSION {
            return Err(Error::data(
                &meta_path,
                format!(
                    "unsupported format {} v{}",
                    meta.format, meta.format_version
                ),
            ));
        }
        if meta.vocab.len() != meta.special.len() {
            return Err(Error::data(
                &meta_path,
                "vocabulary and special flags differ in length",
            ));
        }
        let mut vocab = Vocabulary::new(&[MASK_TOKEN], std::iter::empty())?;
        vocab.words.clear();
        vocab.special.clear();
        vocab.index.clear();
        for (w, s) in meta.vocab.into_iter().zip(meta.special) {
            vocab.insert(w, s);
        }
        if vocab.content_hash() != meta.vocab_hash {
            return Err(Error::data(&meta_path, "vocabulary hash mismatch"));
        }
        let resolved = ResolvedRules::resolve(&meta.rules, &vocab)?;
        let mut params = ParamSet {
            tensors: meta.tensors,
        };
        for t in &mut params.tensors {
            t.data = vec![0.0; t.rows * t.cols];
        }
        let weights_path = dir.join("weights.bin");
        let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        if !params.fill_from_le_bytes(&bytes) {
            return Err(Error::data(
                &weights_path,
                "weights blob does not match tensor shapes",
            ));
        }
        let v = vocab.len();
        let d = meta.config.dim;
        let t = &params.tensors;
        if t.len() != 5
            || t[TOKEN_EMB].rows != v
            || t[OUT_EMB].rows != v
            || t[OUT_B].rows != v
            || t[HIDDEN_W].cols != d
        {
            return Err(Error::data(
                &weights_path,
                "tensor shapes do not match the vocabulary",
            ));
        }
        Ok(Self {
            config: meta.config,
            vocab,
            rules: meta.rules,
            resolved,
            state: EncoderState {
                version: meta.state_version,
                params,
            },
        })
    }
}

impl MaskedLm for ToyMlm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn hidden_width(&self) -> usize {
        self.config.dim
    }

    fn register_special_tokens(&mut self, names: &[String], seed: u64) -> Result<Vec<TokenId>> {
        let mut ids = Vec::with_capacity(names.len());
        for name in names {
            if let Some(id) = self.vocab.id(name) {
                if !self.vocab.is_special(id) {
                    return Err(Error::Config(format!(
                        "{name:?} is already an ordinary vocabulary word"
                    )));
                }
                ids.push(id);
                continue;
            }
            let id = self.vocab.push_special(name);
            let d = self.config.dim;
            let mut rng = named_rng(seed, name);
            let tensors = &mut self.state.params.tensors;
            tensors[TOKEN_EMB].push_row(&gaussian_row(&mut rng, d, self.config.embedding_scale));
            tensors[OUT_EMB].push_row(&gaussian_row(&mut rng, d, self.config.output_scale));
            tensors[OUT_B].push_row(&[0.0]);
            ids.push(id);
        }
        Ok(ids)
    }

    fn mask_distribution(&self, p: &PromptedInput) -> Result<MaskDistribution> {
        self.forward_mask(p).map(|(d, _)| d)
    }

    fn cls_embedding(&self, x: &TypingExample) -> Result<Vec<f64>> {
        self.forward_cls(x).map(|(h, _)| h)
    }
}

impl TrainableMlm for ToyMlm {
    type MaskCache = ToyMaskCache;
    type ClsCache = BackboneCache;

    fn state(&self) -> &EncoderState {
        &self.state
    }

    fn state_mut(&mut self) -> &mut EncoderState {
        &mut self.state
    }

    fn forward_mask(&self, p: &PromptedInput) -> Result<(MaskDistribution, ToyMaskCache)> {
        self.check_prompt(p)?;
        let ids = self.encode(&p.tokens)?;
        let backbone = self.backbone(ids);
        let t = &self.state.params.tensors;
        let mut logits = self.log_prior(p);
        for (v, z) in logits.iter_mut().enumerate() {
            let dot: f64 = t[OUT_EMB]
                .row(v)
                .iter()
                .zip(&backbone.hidden)
                .map(|(a, b)| a * b)
                .sum();
            *z += dot + t[OUT_B].data[v];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let dist = MaskDistribution::new(probs.clone())?;
        Ok((dist, ToyMaskCache { backbone, probs }))
    }

    fn backward_mask(&self, cache: &ToyMaskCache, grad_probs: &[f64], grads: &mut ParamSet) {
        let d = self.config.dim;
        let probs = &cache.probs;
        let h = &cache.backbone.hidden;
        let inner: f64 = grad_probs.iter().zip(probs).map(|(g, p)| g * p).sum();
        let out_emb = &self.state.params.tensors[OUT_EMB];
        let mut dh = vec![0.0; d];
        for (v, (&g, &p)) in grad_probs.iter().zip(probs).enumerate() {
            let dz = p * (g - inner);
            if dz == 0.0 {
                continue;
            }
            grads.tensors[OUT_B].data[v] += dz;
            for (acc, hj) in grads.tensors[OUT_EMB].row_mut(v).iter_mut().zip(h) {
                *acc += dz * hj;
            }
            for (acc, u) in dh.iter_mut().zip(out_emb.row(v)) {
                *acc += dz * u;
            }
        }
        self.backbone_backward(&cache.backbone, &dh, grads);
    }

    fn forward_cls(&self, x: &TypingExample) -> Result<(Vec<f64>, BackboneCache)> {
        let ids = self.encode(&Self::cls_tokens(x))?;
        let cache = self.backbone(ids);
        Ok((cache.hidden.clone(), cache))
    }

    fn backward_cls(&self, cache: &BackboneCache, grad_hidden: &[f64], grads: &mut ParamSet) {
        self.backbone_backward(cache, grad_hidden, grads);
    }
}
