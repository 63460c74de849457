use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use prompt_typing::backend::TrainableMlm;
use prompt_typing::datasets::{sample_fewshot, sample_fewshot_split, TypingDataset};
use prompt_typing::templates::TemplateSpec;
use prompt_typing::training::{train, TrainConfig, TrainMode};
use prompt_typing::typing_model::{
    predict_all, write_predictions, BoundVerbalizer, FineTuneHead, Scorer,
};
use prompt_typing::verbalizer::Verbalizer;
use serde::{Deserialize, Serialize};

use super::{
    backend_for, drop_types, json_line, load, push_opt, schema_from_file, seed_map, verbalizer_for,
    Command, Ctx,
};
use crate::config::usage;

pub fn default_dim() -> usize {
    32
}

fn canonical() -> String {
    "canonical".into()
}

fn slash() -> String {
    "/".into()
}

fn t3() -> String {
    "t3".into()
}

fn prompt() -> String {
    "prompt".into()
}

fn soft_len() -> usize {
    2
}

mod defaults {
    use prompt_typing::training::TrainConfig;

    pub fn learning_rate() -> f64 {
        TrainConfig::default().learning_rate
    }
    pub fn batch_size() -> usize {
        TrainConfig::default().batch_size
    }
    pub fn epochs() -> usize {
        TrainConfig::default().epochs
    }
    pub fn eval_every_steps() -> usize {
        TrainConfig::default().eval_every_steps
    }
    pub fn weight_decay() -> f64 {
        TrainConfig::default().weight_decay
    }
    pub fn max_grad_norm() -> f64 {
        TrainConfig::default().max_grad_norm
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// ft or prompt.
    #[arg(long)]
    pub mode: Option<String>,
    /// t1, t2, t3, t3b or soft.
    #[arg(long)]
    pub template: Option<String>,
    /// Number of learnable tokens for the soft template.
    #[arg(long)]
    pub soft_len: Option<usize>,
    /// Sample this many training examples per type from the training pool.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training data, or the pool to sample from with --shots.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Dev data; with --shots and no dev file, a dev split is sampled from the pool.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    /// Label list fixing the type inventory; defaults to the labels seen in training data.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub separator: Option<String>,
    /// Types to drop from every split, with their subtypes.
    #[arg(long = "exclude-type")]
    pub exclude_type: Vec<String>,
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    #[arg(long)]
    pub related: Option<PathBuf>,
    #[arg(long)]
    pub expansion_k: Option<usize>,
    /// Saved backend directory to start from.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Rule table for a freshly built toy backend.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub eval_every_steps: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub lambda_learnable: Option<bool>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Train {
    #[serde(default = "prompt")]
    pub mode: String,
    #[serde(default = "t3")]
    pub template: String,
    #[serde(default = "soft_len")]
    pub soft_len: usize,
    pub shots: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    #[serde(default = "canonical")]
    pub format: String,
    pub schema: Option<PathBuf>,
    #[serde(default = "slash")]
    pub separator: String,
    #[serde(default)]
    pub exclude_type: Vec<String>,
    pub verbalizer: Option<PathBuf>,
    pub related: Option<PathBuf>,
    #[serde(default)]
    pub expansion_k: usize,
    pub backend: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::eval_every_steps")]
    pub eval_every_steps: usize,
    #[serde(default)]
    pub lambda_learnable: bool,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::max_grad_norm")]
    pub max_grad_norm: f64,
    pub out_dir: Option<PathBuf>,
}

struct Splits {
    train: TypingDataset,
    dev: TypingDataset,
    test: Option<TypingDataset>,
}

impl Train {
    fn splits(&self) -> anyhow::Result<Splits> {
        let schema = self
            .schema
            .as_ref()
            .map(|s| schema_from_file(s, &self.separator))
            .transpose()?;
        let pool = drop_types(
            load(&self.train, &self.format, schema.as_ref())?,
            &self.exclude_type,
        )?;
        let schema = pool.schema().clone();
        let other = |p: &Path| -> anyhow::Result<TypingDataset> {
            let ds = drop_types(load(p, &self.format, None)?, &self.exclude_type)?;
            Ok(ds.with_schema(&schema)?)
        };
        let dev = self.dev.as_deref().map(other).transpose()?;
        let test = self.test.as_deref().map(other).transpose()?;
        let (train, dev) = match (self.shots, dev) {
            (Some(k), Some(dev)) => (sample_fewshot(&pool, k, self.seed)?, dev),
            (Some(k), None) => sample_fewshot_split(&pool, k, self.seed)?,
            (None, Some(dev)) => (pool, dev),
            (None, None) => return Err(usage("a dev split is needed: pass --dev or --shots")),
        };
        Ok(Splits { train, dev, test })
    }

    fn config(&self, ctx: &Ctx) -> anyhow::Result<TrainConfig> {
        let cfg = TrainConfig {
            mode: self.mode.parse::<TrainMode>()?,
            template: TemplateSpec::from_name(&self.template, self.soft_len)?,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            eval_every_steps: self.eval_every_steps,
            seed: self.seed,
            lambda_learnable: self.lambda_learnable,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            execution: ctx.exec,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Command for Train {
    const NAME: &'static str = "train";

    fn seeds(&self) -> BTreeMap<String, u64> {
        seed_map(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.train.clone()];
        for p in [
            &self.dev,
            &self.test,
            &self.schema,
            &self.verbalizer,
            &self.related,
            &self.backend,
            &self.rules,
        ] {
            push_opt(&mut v, p);
        }
        v
    }

    fn outputs(&self) -> Vec<PathBuf> {
        let Some(dir) = &self.out_dir else {
            return Vec::new();
        };
        [
            "backend",
            "verbalizer.json",
            "head.json",
            "report.json",
            "train.jsonl",
            "dev.jsonl",
        ]
        .iter()
        .map(|f| dir.join(f))
        .collect()
    }

    fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let cfg = self.config(ctx)?;
        let s = self.splits()?;
        log::info!(
            "train {} / dev {} / test {} examples over {} types",
            s.train.len(),
            s.dev.len(),
            s.test.as_ref().map_or(0, |t| t.len()),
            s.train.schema().len()
        );
        let v = verbalizer_for(
            s.train.schema(),
            self.verbalizer.as_deref(),
            self.related.as_deref(),
            self.expansion_k,
        )?;
        let all = [Some(&s.train), Some(&s.dev), s.test.as_ref()];
        let words: Vec<String> = all
            .iter()
            .flatten()
            .flat_map(|d| d.examples())
            .flat_map(|x| x.tokens.iter().cloned())
            .chain(v.union_vocabulary().iter().cloned())
            .chain(
                prompt_typing::templates::HARD_TEMPLATE_WORDS
                    .iter()
                    .map(|w| w.to_string()),
            )
            .collect();
        let mut backend = backend_for(
            self.backend.as_deref(),
            self.rules.as_deref(),
            self.dim,
            self.seed,
            words,
        )?;
        let outcome = train(&cfg, &s.train, &s.dev, s.test.as_ref(), &v, &mut backend)?;
        if let Some(dir) = &self.out_dir {
            ctx.save_backend(&backend, &dir.join("backend"))?;
            ctx.write_file(
                &dir.join("verbalizer.json"),
                outcome.verbalizer.to_json()?.as_bytes(),
            )?;
            if let Some(head) = &outcome.head {
                ctx.write_json(&dir.join("head.json"), head)?;
            }
            ctx.write_json(&dir.join("report.json"), &outcome.report)?;
            if self.shots.is_some() {
                for (ds, name) in [(&s.train, "train.jsonl"), (&s.dev, "dev.jsonl")] {
                    let mut buf = Vec::new();
                    ds.write_jsonl(&mut buf)?;
                    ctx.write_file(&dir.join(name), &buf)?;
                }
            }
        }
        ctx.emit(None, &json_line(&outcome.report)?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    /// Saved backend directory.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Verbalizer for prompt scoring.
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    /// Classification head for fine-tuned scoring.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub soft_len: Option<usize>,
    /// Seeds the embeddings of soft tokens the backend does not know yet.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predict {
    pub data: PathBuf,
    #[serde(default = "canonical")]
    pub format: String,
    pub backend: PathBuf,
    pub verbalizer: Option<PathBuf>,
    pub head: Option<PathBuf>,
    #[serde(default = "t3")]
    pub template: String,
    #[serde(default = "soft_len")]
    pub soft_len: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Command for Predict {
    const NAME: &'static str = "predict";

    fn seeds(&self) -> BTreeMap<String, u64> {
        seed_map(self.seed)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.data.clone(), self.backend.clone()];
        push_opt(&mut v, &self.verbalizer);
        push_opt(&mut v, &self.head);
        v
    }

    fn outputs(&self) -> Vec<PathBuf> {
        self.out.iter().cloned().collect()
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let ds = load(&self.data, &self.format, None)?;
        let mut backend = backend_for(
            Some(&self.backend),
            None,
            default_dim(),
            self.seed,
            Vec::new(),
        )?;
        let preds = match (&self.verbalizer, &self.head) {
            (Some(vp), None) => {
                let template = TemplateSpec::from_name(&self.template, self.soft_len)?;
                backend.ensure_special_tokens(&template.special_tokens(), self.seed)?;
                let v = Verbalizer::load(vp)?;
                let bound = BoundVerbalizer::new(&v, &backend)?;
                let scorer = Scorer::Prompt {
                    template: &template,
                    verbalizer: &bound,
                };
                predict_all(ds.examples(), scorer, &backend, ctx.exec)?
            }
            (None, Some(hp)) => {
                let head = FineTuneHead::load(hp)?;
                predict_all(
                    ds.examples(),
                    Scorer::FineTune { head: &head },
                    &backend,
                    ctx.exec,
                )?
            }
            _ => return Err(usage("give exactly one of --verbalizer or --head")),
        };
        let mut buf = Vec::new();
        write_predictions(&preds, &mut buf)?;
        ctx.emit(self.out.as_deref(), &buf)
    }
}
