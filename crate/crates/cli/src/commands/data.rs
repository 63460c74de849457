use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use prompt_typing::datasets::{sample_fewshot, sample_fewshot_split};
use serde::{Deserialize, Serialize};

use super::{drop_types, load, push_opt, schema_from_file, seed_map, verbalizer_for, Command, Ctx};
use crate::config::usage;

fn canonical() -> String {
    "canonical".into()
}

fn slash() -> String {
    "/".into()
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareVerbalizerArgs {
    /// Label list, one raw label per line.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Dataset whose observed labels form the schema.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    /// Hierarchy separator used by the raw labels.
    #[arg(long)]
    pub separator: Option<String>,
    /// JSON object mapping a word to its related words.
    #[arg(long)]
    pub related: Option<PathBuf>,
    #[arg(long)]
    pub expansion_k: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareVerbalizer {
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    #[serde(default = "canonical")]
    pub format: String,
    #[serde(default = "slash")]
    pub separator: String,
    pub related: Option<PathBuf>,
    #[serde(default)]
    pub expansion_k: usize,
    pub out: Option<PathBuf>,
}

impl Command for PrepareVerbalizer {
    const NAME: &'static str = "prepare-verbalizer";

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        push_opt(&mut v, &self.schema);
        push_opt(&mut v, &self.data);
        push_opt(&mut v, &self.related);
        v
    }

    fn outputs(&self) -> Vec<PathBuf> {
        self.out.iter().cloned().collect()
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let schema = match (&self.schema, &self.data) {
            (Some(s), None) => schema_from_file(s, &self.separator)?,
            (None, Some(d)) => load(d, &self.format, None)?.schema().clone(),
            _ => return Err(usage("give exactly one of --schema or --data")),
        };
        let v = verbalizer_for(&schema, None, self.related.as_deref(), self.expansion_k)?;
        log::info!(
            "verbalizer over {} types, {} label words",
            v.len(),
            v.union_vocabulary().len()
        );
        let mut text = v.to_json()?;
        if !text.ends_with('\n') {
            text.push('\n');
        }
        ctx.emit(self.out.as_deref(), text.as_bytes())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleFewshotArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    /// Examples per type.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Types to drop before sampling, with their subtypes.
    #[arg(long = "exclude-type")]
    pub exclude_type: Vec<String>,
    /// Output file for the sampled split; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also draw an equally sized dev split from the remaining pool.
    #[arg(long)]
    pub dev_out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFewshot {
    pub data: PathBuf,
    #[serde(default = "canonical")]
    pub format: String,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exclude_type: Vec<String>,
    pub out: Option<PathBuf>,
    pub dev_out: Option<PathBuf>,
}

impl Command for SampleFewshot {
    const NAME: &'static str = "sample-fewshot";

    fn seeds(&self) -> BTreeMap<String, u64> {
        seed_map(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.data.clone()]
    }

    fn outputs(&self) -> Vec<PathBuf> {
        self.out.iter().chain(&self.dev_out).cloned().collect()
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let pool = drop_types(load(&self.data, &self.format, None)?, &self.exclude_type)?;
        let (train, dev) = match &self.dev_out {
            Some(_) => {
                let (t, d) = sample_fewshot_split(&pool, self.k, self.seed)?;
                (t, Some(d))
            }
            None => (sample_fewshot(&pool, self.k, self.seed)?, None),
        };
        log::info!(
            "sampled {} examples over {} types",
            train.len(),
            pool.schema().len()
        );
        let mut buf = Vec::new();
        train.write_jsonl(&mut buf)?;
        ctx.emit(self.out.as_deref(), &buf)?;
        if let (Some(d), Some(path)) = (dev, &self.dev_out) {
            write_split(ctx, &d, path)?;
        }
        Ok(())
    }
}

fn write_split(
    ctx: &mut Ctx,
    ds: &prompt_typing::datasets::TypingDataset,
    path: &Path,
) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf)?;
    ctx.write_file(path, &buf)
}
