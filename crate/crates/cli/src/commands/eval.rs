use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use prompt_typing::metrics::{evaluate_with, per_type_report, write_report_csv, MacroAveraging};
use prompt_typing::typing_model::read_predictions;
use prompt_typing::{EntityType, Error};
use serde::{Deserialize, Serialize};

use super::{drop_types, json_line, load, Command, Ctx};

fn canonical() -> String {
    "canonical".into()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// F1 of the mean precision and mean recall.
    #[default]
    FromMeans,
    /// Mean of the per-example F1 scores.
    PerExampleF1,
}

impl From<Averaging> for MacroAveraging {
    fn from(a: Averaging) -> Self {
        match a {
            Averaging::FromMeans => MacroAveraging::FromMeans,
            Averaging::PerExampleF1 => MacroAveraging::PerExampleF1,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Prediction JSONL written by predict.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Gold dataset.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    /// Gold types to leave out of scoring, with their subtypes.
    #[arg(long = "exclude-type")]
    pub exclude_type: Vec<String>,
    #[arg(long, value_enum)]
    pub macro_averaging: Option<Averaging>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluate {
    pub pred: PathBuf,
    pub gold: PathBuf,
    #[serde(default = "canonical")]
    pub format: String,
    #[serde(default)]
    pub exclude_type: Vec<String>,
    #[serde(default)]
    pub macro_averaging: Averaging,
}

/// Predicted and gold types aligned by example id.
fn aligned(
    pred: &Path,
    gold: &Path,
    format: &str,
    excluded: &[String],
) -> anyhow::Result<(Vec<EntityType>, Vec<EntityType>)> {
    let preds = read_predictions(pred)?;
    let gold_ds = load(gold, format, None)?;
    if preds.len() != gold_ds.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} gold examples",
            preds.len(),
            gold_ds.len()
        ))
        .into());
    }
    let by_id: HashMap<&str, &EntityType> = preds.iter().map(|(id, t)| (id.as_str(), t)).collect();
    let gold_ds = drop_types(gold_ds, excluded)?;
    let mut p = Vec::with_capacity(gold_ds.len());
    let mut g = Vec::with_capacity(gold_ds.len());
    for x in gold_ds.examples() {
        let t = by_id.get(x.id.as_str()).ok_or_else(|| {
            anyhow::anyhow!(Error::Validation(format!(
                "no prediction for example {:?}",
                x.id
            )))
        })?;
        p.push((*t).clone());
        g.push(x.gold_type.clone());
    }
    Ok((p, g))
}

impl Command for Evaluate {
    const NAME: &'static str = "evaluate";

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.pred.clone(), self.gold.clone()]
    }

    fn outputs(&self) -> Vec<PathBuf> {
        Vec::new()
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let (p, g) = aligned(&self.pred, &self.gold, &self.format, &self.exclude_type)?;
        let result = evaluate_with(&p, &g, self.macro_averaging.into(), ctx.exec)?;
        ctx.emit(None, &json_line(&result)?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ReportTypesArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long = "exclude-type")]
    pub exclude_type: Vec<String>,
    /// CSV output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportTypes {
    pub pred: PathBuf,
    pub gold: PathBuf,
    #[serde(default = "canonical")]
    pub format: String,
    #[serde(default)]
    pub exclude_type: Vec<String>,
    pub out: Option<PathBuf>,
}

impl Command for ReportTypes {
    const NAME: &'static str = "report-types";

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.pred.clone(), self.gold.clone()]
    }

    fn outputs(&self) -> Vec<PathBuf> {
        self.out.iter().cloned().collect()
    }

    fn run(&self, ctx: &mut Ctx) -> anyhow::Result<()> {
        let (p, g) = aligned(&self.pred, &self.gold, &self.format, &self.exclude_type)?;
        let report = per_type_report(&p, &g)?;
        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf)?;
        ctx.emit(self.out.as_deref(), &buf)
    }
}
