//! Strict accuracy and loose (hierarchy-aware) micro/macro F1.
//!
//! Every label is expanded to the set of its path prefixes. Strict accuracy
//! counts exact set matches. Loose scores use per-example overlaps
//! `|pred ∩ gold|`: micro pools the counts over all examples, macro averages
//! per-example precision and recall and takes F1 of the two means.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::schema::EntityType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroAveraging {
    /// F1 of mean precision and mean recall.
    #[default]
    FromMeans,
    /// Mean of per-example F1.
    PerExampleF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub strict_acc: f64,
    pub loose_macro_p: f64,
    pub loose_macro_r: f64,
    pub loose_macro_f1: f64,
    pub loose_micro_p: f64,
    pub loose_micro_r: f64,
    pub loose_micro_f1: f64,
    pub n_examples: usize,
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy)]
struct Overlap {
    exact: bool,
    shared: usize,
    pred: usize,
    gold: usize,
}

fn overlap(pred: &EntityType, gold: &EntityType) -> Overlap {
    // prefix sets of single paths are chains, so the overlap is the common prefix
    let shared = pred
        .path()
        .iter()
        .zip(gold.path())
        .take_while(|(a, b)| a == b)
        .count();
    Overlap {
        exact: pred == gold,
        shared,
        pred: pred.depth(),
        gold: gold.depth(),
    }
}

pub fn evaluate(preds: &[EntityType], golds: &[EntityType]) -> Result<EvalResult> {
    evaluate_with(
        preds,
        golds,
        MacroAveraging::default(),
        Execution::default(),
    )
}

pub fn evaluate_with(
    preds: &[EntityType],
    golds: &[EntityType],
    averaging: MacroAveraging,
    exec: Execution,
) -> Result<EvalResult> {
    if preds.len() != golds.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let n = preds.len();
    let stats = exec.map_indexed(n, |i| overlap(&preds[i], &golds[i]));

    let (mut exact, mut shared, mut pred_total, mut gold_total) = (0usize, 0usize, 0usize, 0usize);
    let (mut sum_p, mut sum_r, mut sum_f1) = (0.0, 0.0, 0.0);
    for o in &stats {
        exact += o.exact as usize;
        shared += o.shared;
        pred_total += o.pred;
        gold_total += o.gold;
        let p = o.shared as f64 / o.pred as f64;
        let r = o.shared as f64 / o.gold as f64;
        sum_p += p;
        sum_r += r;
        sum_f1 += f1(p, r);
    }
    let nf = n as f64;
    let (macro_p, macro_r) = (sum_p / nf, sum_r / nf);
    let macro_f1 = match averaging {
        MacroAveraging::FromMeans => f1(macro_p, macro_r),
        MacroAveraging::PerExampleF1 => sum_f1 / nf,
    };
    let micro_p = shared as f64 / pred_total as f64;
    let micro_r = shared as f64 / gold_total as f64;
    Ok(EvalResult {
        strict_acc: exact as f64 / nf,
        loose_macro_p: macro_p,
        loose_macro_r: macro_r,
        loose_macro_f1: macro_f1,
        loose_micro_p: micro_p,
        loose_micro_r: micro_r,
        loose_micro_f1: f1(micro_p, micro_r),
        n_examples: n,
    })
}

/// Prediction breakdown for one gold type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub support: usize,
    pub correct: usize,
    pub wrong_fine_right_coarse: usize,
    pub wrong_coarse: usize,
    pub predicted: BTreeMap<String, usize>,
}

impl TypeReport {
    /// Most frequent predicted types, count descending then id ascending.
    pub fn top_predictions(&self, n: usize) -> Vec<(&str, usize)> {
        let mut v: Vec<(&str, usize)> = self
            .predicted
            .iter()
            .map(|(k, c)| (k.as_str(), *c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v.truncate(n);
        v
    }
}

pub fn per_type_report(
    preds: &[EntityType],
    golds: &[EntityType],
) -> Result<BTreeMap<String, TypeReport>> {
    if preds.len() != golds.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut out: BTreeMap<String, TypeReport> = BTreeMap::new();
    for (p, g) in preds.iter().zip(golds) {
        let r = out.entry(g.canonical_id()).or_default();
        r.support += 1;
        if p == g {
            r.correct += 1;
        } else if p.root() == g.root() {
            r.wrong_fine_right_coarse += 1;
        } else {
            r.wrong_coarse += 1;
        }
        *r.predicted.entry(p.canonical_id()).or_default() += 1;
    }
    Ok(out)
}

/// CSV with one row per gold type and the top five predicted types.
pub fn write_report_csv<W: Write>(report: &BTreeMap<String, TypeReport>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "type",
        "support",
        "correct",
        "wrong_fine_right_coarse",
        "wrong_coarse",
        "top_predictions",
    ])?;
    for (t, r) in report {
        let top = r
            .top_predictions(5)
            .iter()
            .map(|(p, c)| format!("{p}:{c}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            t.clone(),
            r.support.to_string(),
            r.correct.to_string(),
            r.wrong_fine_right_coarse.to_string(),
            r.wrong_coarse.to_string(),
            top,
        ])?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}
