pub mod data;
pub mod eval;
pub mod model;
pub mod selfsup;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use prompt_typing::backend::{RuleTable, ToyConfig, ToyMlm};
use prompt_typing::datasets::{load_dataset, DatasetFormat, TypingDataset};
use prompt_typing::schema::{normalize_label, parse_label_schema};
use prompt_typing::verbalizer::{build_verbalizer, RelatedWordSource, Verbalizer};
use prompt_typing::{EntityType, Execution, LabelSchema};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::usage;
use crate::manifest::write_atomic;

/// State shared by a running subcommand.
pub struct Ctx {
    pub exec: Execution,
    pub outputs: Vec<PathBuf>,
}

impl Ctx {
    pub fn new(exec: Execution) -> Self {
        Self {
            exec,
            outputs: Vec::new(),
        }
    }

    pub fn write_file(&mut self, path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes to `path` when given, otherwise to standard output.
    pub fn emit(&mut self, path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
        match path {
            Some(p) => self.write_file(p, bytes),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(bytes)?;
                out.flush()?;
                Ok(())
            }
        }
    }

    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
        self.write_file(path, &json_line(value)?)
    }

    /// Saves a backend into a fresh directory and swaps it into place.
    pub fn save_backend(&mut self, backend: &ToyMlm, dir: &Path) -> anyhow::Result<()> {
        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
        let tmp = tempfile::TempDir::new_in(parent)?;
        backend.save(tmp.path())?;
        if dir.exists() {
            std::fs::remove_dir_all(dir).with_context(|| format!("replacing {}", dir.display()))?;
        }
        let staged = tmp.keep();
        std::fs::rename(&staged, dir)
            .with_context(|| format!("moving backend into {}", dir.display()))?;
        self.outputs.push(dir.to_path_buf());
        Ok(())
    }
}

pub fn json_line(value: &impl Serialize) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// One subcommand: its resolved settings and how to run them.
pub trait Command: Serialize + DeserializeOwned {
    const NAME: &'static str;

    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::new()
    }

    fn inputs(&self) -> Vec<PathBuf>;

    /// Files and directories the run will create or replace.
    fn outputs(&self) -> Vec<PathBuf>;

    fn out_dir(&self) -> Option<&Path> {
        None
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()>;
}

/// Refuses to run when an output would overwrite one of the inputs.
pub fn check_outputs_disjoint(inputs: &[PathBuf], outputs: &[PathBuf]) -> anyhow::Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    for o in outputs {
        let Some(co) = canon(o) else { continue };
        for i in inputs {
            if canon(i).is_some_and(|ci| ci.starts_with(&co)) {
                return Err(usage(format!(
                    "output {} would overwrite input {}",
                    o.display(),
                    i.display()
                )));
            }
        }
    }
    Ok(())
}

pub fn format(name: &str) -> anyhow::Result<DatasetFormat> {
    Ok(name.parse::<DatasetFormat>()?)
}

pub fn load(path: &Path, fmt: &str, schema: Option<&LabelSchema>) -> anyhow::Result<TypingDataset> {
    Ok(load_dataset(path, format(fmt)?, schema)?)
}

/// A label schema from a text file with one raw label per line. Blank lines
/// and lines starting with `#` are skipped.
pub fn schema_from_file(path: &Path, separator: &str) -> anyhow::Result<LabelSchema> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading schema {}", path.display()))?;
    let labels: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    parse_label_schema(&labels, separator).with_context(|| format!("schema {}", path.display()))
}

/// Types matching an excluded label, either exactly or as a descendant.
pub fn excluded_types(
    schema: &LabelSchema,
    excluded: &[String],
) -> anyhow::Result<Vec<EntityType>> {
    let ids = excluded
        .iter()
        .map(|e| normalize_label(e, "/").map(|t| t.canonical_id()))
        .collect::<prompt_typing::Result<Vec<_>>>()?;
    Ok(schema
        .types()
        .iter()
        .filter(|t| t.prefixes().any(|p| ids.contains(&p)))
        .cloned()
        .collect())
}

pub fn drop_types(ds: TypingDataset, excluded: &[String]) -> anyhow::Result<TypingDataset> {
    if excluded.is_empty() {
        return Ok(ds);
    }
    let types = excluded_types(ds.schema(), excluded)?;
    if types.is_empty() {
        log::warn!("no type in {} matches the excluded labels", ds.split());
        return Ok(ds);
    }
    Ok(ds.without_types(&types)?)
}

pub fn verbalizer_for(
    schema: &LabelSchema,
    file: Option<&Path>,
    related: Option<&Path>,
    expansion_k: usize,
) -> anyhow::Result<Verbalizer> {
    if let Some(path) = file {
        return Ok(Verbalizer::load(path)?);
    }
    let source = related.map(RelatedWordSource::load).transpose()?;
    Ok(build_verbalizer(schema, source.as_ref(), expansion_k)?)
}

/// Loads a saved backend, or builds a fresh toy backend over `words`.
pub fn backend_for<I>(
    saved: Option<&Path>,
    rules: Option<&Path>,
    dim: usize,
    seed: u64,
    words: I,
) -> anyhow::Result<ToyMlm>
where
    I: IntoIterator<Item = String>,
{
    if let Some(dir) = saved {
        if rules.is_some() {
            log::warn!("--rules is ignored when loading a saved backend");
        }
        return Ok(ToyMlm::load(dir)?);
    }
    let config = ToyConfig {
        dim,
        seed,
        ..ToyConfig::default()
    };
    let mut builder = ToyMlm::builder(config).words(words);
    if let Some(r) = rules {
        builder = builder.rules(RuleTable::load(r)?);
    }
    Ok(builder.build()?)
}

pub fn push_opt(v: &mut Vec<PathBuf>, p: &Option<PathBuf>) {
    if let Some(p) = p {
        v.push(p.clone());
    }
}

pub fn seed_map(seed: u64) -> BTreeMap<String, u64> {
    BTreeMap::from([("seed".to_string(), seed)])
}
