use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use prompt_typing::selfsup::{
    generate_pairs, load_corpus, pretrain, read_pairs, write_pairs, SelfSupConfig, TypeDictionary,
};
use prompt_typing::templates::{HIDE_TOKEN, MASK_TOKEN};
use prompt_typing::verbalizer::Verbalizer;
use serde::{Deserialize, Serialize};

use super::{backend_for, push_opt, schema_from_file, seed_map, verbalizer_for, Command, Ctx};
use crate::config::usage;

#[derive(Debug, Args, Serialize)]
pub struct GeneratePairsArgs {
    /// JSONL corpus of entity-linked sentences.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON object mapping entity ids or surfaces to coarse types.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Pairs per polarity.
    #[arg(long)]
    pub count: Option<usize>,
    /// Probability of hiding the mention on each side.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratePairs {
    pub corpus: PathBuf,
    pub dict: PathBuf,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub shards: usize,
    pub out: Option<PathBuf>,
}

fn default_count() -> usize {
    SelfSupConfig::default().c
}

fn default_alpha() -> f64 {
    SelfSupConfig::default().alpha
}

fn one() -> usize {
    1
}

impl Command for GeneratePairs {
    const NAME: &'static str = "generate-pairs";

    fn seeds(&self) -> BTreeMap<String, u64> {
        seed_map(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.corpus.clone(), self.dict.clone()]
    }

    fn outputs(&self) -> Vec<PathBuf> {
        self.out.iter().cloned().collect()
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let corpus = load_corpus(&self.corpus)?;
        let dict = TypeDictionary::load(&self.dict)?;
        let cfg = SelfSupConfig {
            c: self.count,
            alpha: self.alpha,
            seed: self.seed,
            shards: self.shards,
            execution: ctx.exec,
            ..SelfSupConfig::default()
        };
        cfg.validate()?;
        let pairs = generate_pairs(&corpus, &dict, &cfg)?;
        log::info!(
            "generated {} pairs from {} sentences",
            pairs.len(),
            corpus.len()
        );
        let mut buf = Vec::new();
        write_pairs(&pairs, &mut buf)?;
        ctx.emit(self.out.as_deref(), &buf)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainSelfsupArgs {
    /// Pair file written by generate-pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Label list, one raw label per line; builds a verbalizer with base words.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    #[arg(long)]
    pub separator: Option<String>,
    /// Weight of the negative-pair term.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Saved backend directory to start from.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Rule table for a freshly built toy backend.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Hidden width of a freshly built toy backend.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSelfsup {
    pub pairs: PathBuf,
    pub schema: Option<PathBuf>,
    pub verbalizer: Option<PathBuf>,
    #[serde(default = "slash")]
    pub separator: String,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::max_grad_norm")]
    pub max_grad_norm: f64,
    pub backend: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    #[serde(default = "super::model::default_dim")]
    pub dim: usize,
    pub out_dir: PathBuf,
}

fn slash() -> String {
    "/".into()
}

mod defaults {
    use prompt_typing::selfsup::SelfSupConfig;

    pub fn gamma() -> f64 {
        SelfSupConfig::default().gamma
    }
    pub fn learning_rate() -> f64 {
        SelfSupConfig::default().learning_rate
    }
    pub fn batch_size() -> usize {
        SelfSupConfig::default().batch_size
    }
    pub fn epochs() -> usize {
        SelfSupConfig::default().epochs
    }
    pub fn weight_decay() -> f64 {
        SelfSupConfig::default().weight_decay
    }
    pub fn max_grad_norm() -> f64 {
        SelfSupConfig::default().max_grad_norm
    }
}

impl PretrainSelfsup {
    fn backend_dir(&self) -> PathBuf {
        self.out_dir.join("backend")
    }

    fn report_path(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }
}

impl Command for PretrainSelfsup {
    const NAME: &'static str = "pretrain-selfsup";

    fn seeds(&self) -> BTreeMap<String, u64> {
        seed_map(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.pairs.clone()];
        push_opt(&mut v, &self.schema);
        push_opt(&mut v, &self.verbalizer);
        push_opt(&mut v, &self.backend);
        push_opt(&mut v, &self.rules);
        v
    }

    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.backend_dir(), self.report_path()]
    }

    fn out_dir(&self) -> Option<&Path> {
        Some(&self.out_dir)
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let pairs = read_pairs(&self.pairs)?;
        let v = match (&self.schema, &self.verbalizer) {
            (Some(s), None) => {
                verbalizer_for(&schema_from_file(s, &self.separator)?, None, None, 0)?
            }
            (None, Some(f)) => Verbalizer::load(f)?,
            _ => return Err(usage("give exactly one of --schema or --verbalizer")),
        };
        let words = pairs
            .iter()
            .flat_map(|p| p.a.tokens.iter().chain(&p.b.tokens))
            .filter(|t| *t != MASK_TOKEN && *t != HIDE_TOKEN)
            .cloned()
            .chain(v.union_vocabulary().iter().cloned())
            .collect::<Vec<_>>();
        let mut backend = backend_for(
            self.backend.as_deref(),
            self.rules.as_deref(),
            self.dim,
            self.seed,
            words,
        )?;
        let cfg = SelfSupConfig {
            gamma: self.gamma,
            seed: self.seed,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            execution: ctx.exec,
            ..SelfSupConfig::default()
        };
        let report = pretrain(&cfg, &pairs, &v, &mut backend)?;
        log::info!("pretrained for {} steps", report.steps);
        ctx.save_backend(&backend, &self.backend_dir())?;
        ctx.write_json(&self.report_path(), &report)?;
        ctx.emit(None, &super::json_line(&report)?)
    }
}
