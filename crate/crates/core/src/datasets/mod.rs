//! Typing datasets: canonical records, format adapters and k-shot sampling.

mod adapters;
mod fewshot;

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{EntityType, LabelSchema};

pub use adapters::{fewnerd_label_table, normalize_fewnerd_label, DatasetFormat};
pub use fewshot::{sample_fewshot, sample_fewshot_split};

/// One sentence with a marked mention and its gold type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypingExample {
    pub id: String,
    pub tokens: Vec<String>,
    /// Half-open token span `[start, end)`.
    pub mention_span: (usize, usize),
    pub gold_type: EntityType,
}

impl TypingExample {
    pub fn mention(&self) -> &[String] {
        &self.tokens[self.mention_span.0..self.mention_span.1]
    }

    fn check_span(&self) -> std::result::Result<(), String> {
        let (start, end) = self.mention_span;
        if start >= end {
            return Err(format!("empty mention [{start}, {end})"));
        }
        if end > self.tokens.len() {
            return Err(format!(
                "mention span [{start}, {end}) exceeds {} tokens",
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
}

/// The on-disk canonical record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CanonicalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub tokens: Vec<String>,
    pub mention_span: [usize; 2],
    pub label: String,
}

/// A split of typing examples, all labelled within one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct TypingDataset {
    examples: Vec<TypingExample>,
    schema: LabelSchema,
    split: String,
}

impl TypingDataset {
    pub fn new(
        examples: Vec<TypingExample>,
        schema: LabelSchema,
        split: impl Into<String>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(examples.len());
        for x in &examples {
            x.check_span()
                .map_err(|m| Error::Validation(format!("example {}: {m}", x.id)))?;
            if !schema.contains(&x.gold_type) {
                return Err(unknown_label(&x.gold_type.canonical_id(), &schema));
            }
            if !ids.insert(x.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate example id {:?}",
                    x.id
                )));
            }
        }
        Ok(Self {
            examples,
            schema,
            split: split.into(),
        })
    }

    /// Builds a dataset whose schema is exactly the set of gold types present.
    pub fn with_observed_schema(
        examples: Vec<TypingExample>,
        split: impl Into<String>,
    ) -> Result<Self> {
        let types: BTreeSet<EntityType> = examples.iter().map(|x| x.gold_type.clone()).collect();
        let schema = LabelSchema::from_types("observed", types.into_iter().collect())?;
        Self::new(examples, schema, split)
    }

    pub fn examples(&self) -> &[TypingExample] {
        &self.examples
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Drops examples whose gold type is in `excluded` and removes those types
    /// from the schema.
    pub fn without_types(&self, excluded: &[EntityType]) -> Result<Self> {
        let schema = self.schema.without(excluded)?;
        let examples = self
            .examples
            .iter()
            .filter(|x| !excluded.contains(&x.gold_type))
            .cloned()
            .collect();
        Self::new(examples, schema, self.split.clone())
    }

    /// Same examples under a wider schema (e.g. the training schema).
    pub fn with_schema(&self, schema: &LabelSchema) -> Result<Self> {
        Self::new(self.examples.clone(), schema.clone(), self.split.clone())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for x in &self.examples {
            let rec = CanonicalRecord {
                id: Some(x.id.clone()),
                tokens: x.tokens.clone(),
                mention_span: [x.mention_span.0, x.mention_span.1],
                label: x.gold_type.canonical_id(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn unknown_label(label: &str, schema: &LabelSchema) -> Error {
    match schema.nearest(label) {
        Some(near) => Error::Validation(format!(
            "unknown label {label:?} (nearest schema match: {near:?})"
        )),
        None => Error::Validation(format!("unknown label {label:?}")),
    }
}

/// Loads a dataset file through the given format adapter.
///
/// With `schema` set, every label must belong to it; otherwise the schema is
/// the set of labels observed in the file.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    schema: Option<&LabelSchema>,
) -> Result<TypingDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let examples = adapters::parse(&text, format, &split, schema).map_err(|e| match e {
        Error::Validation(m) => Error::data(path, m),
        other => other,
    })?;
    let ds = match schema {
        Some(s) => TypingDataset::new(examples, s.clone(), split),
        None => TypingDataset::with_observed_schema(examples, split),
    };
    ds.map_err(|e| match e {
        Error::Validation(m) => Error::data(path, m),
        other => other,
    })
}
