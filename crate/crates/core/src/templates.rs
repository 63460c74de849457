//! Cloze templates that append a single mask slot to a typing example.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::TypingExample;
use crate::error::{Error, Result};

pub const MASK_TOKEN: &str = "[MASK]";
pub const HIDE_TOKEN: &str = "[Hide]";
pub const SOFT_DELIMITER: &str = "[P]";
pub const MAX_SOFT_LENGTH: usize = 16;

/// Template words every hard template may emit; backends need them in their
/// vocabulary.
pub const HARD_TEMPLATE_WORDS: &[&str] = &["In", "this", "sentence", ",", "is", "a", "."];

const SENTENCE_END: &[&str] = &[".", "!", "?"];
const NO_SPACE_BEFORE: &[&str] = &[".", ",", ";", ":", "!", "?"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardTemplate {
    /// `x. [Ent] is [MASK].`
    T1,
    /// `x. [Ent] is a [MASK].`
    T2,
    /// `x. In this sentence, [Ent] is a [MASK].`
    T3,
    /// `x. In this sentence, [Ent] is [MASK].`
    T3b,
}

impl HardTemplate {
    fn prefix(self) -> &'static [&'static str] {
        match self {
            HardTemplate::T1 | HardTemplate::T2 => &[],
            HardTemplate::T3 | HardTemplate::T3b => &["In", "this", "sentence", ","],
        }
    }

    fn linker(self) -> &'static [&'static str] {
        match self {
            HardTemplate::T1 | HardTemplate::T3b => &["is"],
            HardTemplate::T2 | HardTemplate::T3 => &["is", "a"],
        }
    }
}

/// Which template to render with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TemplateSpec {
    Hard { template: HardTemplate },
    Soft { length: usize },
}

impl TemplateSpec {
    pub const fn hard(template: HardTemplate) -> Self {
        TemplateSpec::Hard { template }
    }

    pub fn soft(length: usize) -> Result<Self> {
        if !(1..=MAX_SOFT_LENGTH).contains(&length) {
            return Err(Error::Config(format!(
                "soft template length must be in [1, {MAX_SOFT_LENGTH}], got {length}"
            )));
        }
        Ok(TemplateSpec::Soft { length })
    }

    /// Parses a CLI template name (`t1`, `t2`, `t3`, `t3b`, `soft`).
    pub fn from_name(name: &str, soft_length: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "t1" => Ok(Self::hard(HardTemplate::T1)),
            "t2" => Ok(Self::hard(HardTemplate::T2)),
            "t3" => Ok(Self::hard(HardTemplate::T3)),
            "t3b" => Ok(Self::hard(HardTemplate::T3b)),
            "soft" => Self::soft(soft_length),
            other => Err(Error::Config(format!(
                "unknown template {other:?} (expected t1, t2, t3, t3b or soft)"
            ))),
        }
    }

    /// Special tokens this template introduces.
    pub fn special_tokens(&self) -> Vec<String> {
        match *self {
            TemplateSpec::Hard { .. } => Vec::new(),
            TemplateSpec::Soft { length } => soft_token_names(length),
        }
    }

    pub fn render(&self, x: &TypingExample) -> Result<PromptedInput> {
        match *self {
            TemplateSpec::Hard { template } => render_hard(template, x),
            TemplateSpec::Soft { length } => render_soft(length, x),
        }
    }
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self::hard(HardTemplate::T3)
    }
}

impl fmt::Display for TemplateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateSpec::Hard { template } => {
                write!(f, "{}", format!("{template:?}").to_lowercase())
            }
            TemplateSpec::Soft { length } => write!(f, "soft(l={length})"),
        }
    }
}

impl FromStr for TemplateSpec {
    type Err = Error;

    /// Accepts the CLI names, with `soft:L` for a soft template of length L.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((name, len)) => {
                let len = len
                    .parse()
                    .map_err(|_| Error::Config(format!("bad soft length in {s:?}")))?;
                Self::from_name(name, len)
            }
            None => Self::from_name(s, 2),
        }
    }
}

fn soft_token_names(length: usize) -> Vec<String> {
    std::iter::once(SOFT_DELIMITER.to_string())
        .chain((1..=length).map(|i| format!("[P{i}]")))
        .collect()
}

/// A template-rendered input with exactly one mask slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedInput {
    pub tokens: Vec<String>,
    pub mask_index: usize,
    /// Half-open span of the mention copy inside the appended template.
    pub mention_copy_span: (usize, usize),
    /// Number of leading tokens that belong to the original sentence.
    pub sentence_len: usize,
    pub special_token_names: Vec<String>,
    pub hidden: bool,
}

impl PromptedInput {
    pub fn mention_copy(&self) -> &[String] {
        &self.tokens[self.mention_copy_span.0..self.mention_copy_span.1]
    }

    pub fn sentence(&self) -> &[String] {
        &self.tokens[..self.sentence_len]
    }

    /// Detokenized text: tokens joined by spaces, without a space before
    /// sentence punctuation.
    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|t| *t == MASK_TOKEN).count()
    }

    /// Reconstructs a T3-rendered input from its token sequence and mask
    /// position, as stored in pair files.
    pub fn from_t3_tokens(tokens: Vec<String>, mask_index: usize, hidden: bool) -> Result<Self> {
        let bad = |msg: &str| Error::Validation(format!("not a T3 rendering: {msg}"));
        if tokens.get(mask_index).map(String::as_str) != Some(MASK_TOKEN) {
            return Err(bad("mask index does not point at the mask token"));
        }
        if tokens.iter().filter(|t| *t == MASK_TOKEN).count() != 1 {
            return Err(bad("expected exactly one mask token"));
        }
        if mask_index < 7 || tokens[mask_index - 2] != "is" || tokens[mask_index - 1] != "a" {
            return Err(bad("missing linker before the mask"));
        }
        let prefix = HardTemplate::T3.prefix();
        let copy_end = mask_index - 2;
        let start = (0..copy_end.saturating_sub(prefix.len()))
            .rev()
            .find(|&i| {
                tokens[i..i + prefix.len()]
                    .iter()
                    .zip(prefix)
                    .all(|(a, b)| a == b)
            })
            .ok_or_else(|| bad("template prefix not found"))?;
        let copy_start = start + prefix.len();
        if copy_start >= copy_end {
            return Err(bad("empty mention copy"));
        }
        let special_token_names = if hidden {
            vec![HIDE_TOKEN.to_string()]
        } else {
            Vec::new()
        };
        Ok(Self {
            tokens,
            mask_index,
            mention_copy_span: (copy_start, copy_end),
            sentence_len: start,
            special_token_names,
            hidden,
        })
    }
}

pub fn detokenize(tokens: &[impl AsRef<str>]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !NO_SPACE_BEFORE.contains(&t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

fn checked_mention<'a>(
    tokens: &'a [String],
    span: (usize, usize),
    id: &str,
) -> Result<&'a [String]> {
    let (start, end) = span;
    if start >= end || end > tokens.len() {
        return Err(Error::Render(format!(
            "example {id}: empty or invalid mention span"
        )));
    }
    let mention = &tokens[start..end];
    if mention.iter().all(|t| t.is_empty()) {
        return Err(Error::Render(format!("example {id}: empty mention")));
    }
    Ok(mention)
}

pub fn render_hard(template: HardTemplate, x: &TypingExample) -> Result<PromptedInput> {
    render_hard_span(template, &x.tokens, x.mention_span, &x.id)
}

/// [`render_hard`] over a bare token sequence and mention span.
pub fn render_hard_span(
    template: HardTemplate,
    sentence: &[String],
    span: (usize, usize),
    id: &str,
) -> Result<PromptedInput> {
    let mention = checked_mention(sentence, span, id)?;
    let mut tokens = sentence.to_vec();
    if !sentence
        .last()
        .is_some_and(|t| SENTENCE_END.contains(&t.as_str()))
    {
        tokens.push(".".into());
    }
    tokens.extend(template.prefix().iter().map(|s| s.to_string()));
    let copy_start = tokens.len();
    tokens.extend_from_slice(mention);
    let copy_end = tokens.len();
    tokens.extend(template.linker().iter().map(|s| s.to_string()));
    let mask_index = tokens.len();
    tokens.push(MASK_TOKEN.into());
    tokens.push(".".into());
    Ok(PromptedInput {
        tokens,
        mask_index,
        mention_copy_span: (copy_start, copy_end),
        sentence_len: sentence.len(),
        special_token_names: Vec::new(),
        hidden: false,
    })
}

pub fn render_soft(length: usize, x: &TypingExample) -> Result<PromptedInput> {
    let mention = checked_mention(&x.tokens, x.mention_span, &x.id)?;
    let names = soft_token_names(length);
    let mut tokens = x.tokens.clone();
    tokens.push(names[0].clone());
    let copy_start = tokens.len();
    tokens.extend_from_slice(mention);
    let copy_end = tokens.len();
    tokens.extend(names[1..].iter().cloned());
    let mask_index = tokens.len();
    tokens.push(MASK_TOKEN.into());
    Ok(PromptedInput {
        tokens,
        mask_index,
        mention_copy_span: (copy_start, copy_end),
        sentence_len: x.tokens.len(),
        special_token_names: names,
        hidden: false,
    })
}

/// Replaces the mention with [`HIDE_TOKEN`] in both the sentence and the
/// template copy.
pub fn hide_mention(p: &PromptedInput) -> PromptedInput {
    if p.hidden {
        return p.clone();
    }
    let mention = p.mention_copy().to_vec();
    let m = mention.len();
    let mut tokens = Vec::with_capacity(p.tokens.len());
    let mut i = 0;
    while i < p.sentence_len {
        if i + m <= p.sentence_len && p.tokens[i..i + m] == mention[..] {
            tokens.push(HIDE_TOKEN.to_string());
            i += m;
        } else {
            tokens.push(p.tokens[i].clone());
            i += 1;
        }
    }
    let sentence_len = tokens.len();
    tokens.extend_from_slice(&p.tokens[p.sentence_len..p.mention_copy_span.0]);
    let copy_start = tokens.len();
    tokens.push(HIDE_TOKEN.to_string());
    let shift = (p.mention_copy_span.1 - p.mention_copy_span.0) as isize - 1;
    tokens.extend_from_slice(&p.tokens[p.mention_copy_span.1..]);
    let drop_in_sentence = p.sentence_len as isize - sentence_len as isize;
    let mask_index = (p.mask_index as isize - shift - drop_in_sentence) as usize;
    let mut special_token_names = p.special_token_names.clone();
    special_token_names.push(HIDE_TOKEN.to_string());
    PromptedInput {
        tokens,
        mask_index,
        mention_copy_span: (copy_start, copy_start + 1),
        sentence_len,
        special_token_names,
        hidden: true,
    }
}

/// With probability `alpha` returns the hidden form of `p`, otherwise `p`
/// unchanged. Exactly one draw is taken from `rng` per call.
pub fn apply_hiding<R: Rng + ?Sized>(
    p: &PromptedInput,
    alpha: f64,
    rng: &mut R,
) -> Result<PromptedInput> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "hiding probability must be in [0, 1], got {alpha}"
        )));
    }
    let u: f64 = rng.random();
    Ok(if u < alpha {
        hide_mention(p)
    } else {
        p.clone()
    })
}
