//! Supervised and few-shot training for the prompt model and the fine-tuning
//! baseline.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    sum_in_order, MaskDistribution, MaskedLm, ParamSet, Tensor, TokenId, TrainableMlm,
};
use crate::datasets::{TypingDataset, TypingExample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{evaluate_with, EvalResult, MacroAveraging};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::schema::EntityType;
use crate::templates::{PromptedInput, TemplateSpec};
use crate::typing_model::{
    predict_all, raw_type_scores, softmax, BoundVerbalizer, FineTuneHead, Scorer,
};
use crate::verbalizer::Verbalizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Ft,
    #[default]
    Prompt,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ft" => Ok(TrainMode::Ft),
            "prompt" => Ok(TrainMode::Prompt),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected ft or prompt)"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Ft => "ft",
            TrainMode::Prompt => "prompt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub template: TemplateSpec,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every_steps: usize,
    pub seed: u64,
    pub lambda_learnable: bool,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Prompt,
            template: TemplateSpec::default(),
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 30,
            eval_every_steps: 25,
            seed: 0,
            lambda_learnable: false,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.eval_every_steps == 0 {
            return bad("eval_every_steps must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if let TemplateSpec::Soft { length } = self.template {
            TemplateSpec::soft(length)?;
        }
        Ok(())
    }

    pub(crate) fn optimizer(&self, weight_decay: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub dev: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub steps: usize,
    /// Mean batch loss per optimizer step.
    pub train_loss: Vec<f64>,
    pub history: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_dev: EvalResult,
    pub test: Option<EvalResult>,
}

/// What training produced besides the updated backend.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: Option<FineTuneHead>,
    pub verbalizer: Verbalizer,
    pub report: TrainReport,
}

/// A rendered prompt with its gold type.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPrompt {
    pub id: String,
    pub input: PromptedInput,
    pub gold: EntityType,
}

pub fn render_batch(xs: &[TypingExample], spec: &TemplateSpec) -> Result<Vec<LabeledPrompt>> {
    xs.iter()
        .map(|x| {
            Ok(LabeledPrompt {
                id: x.id.clone(),
                input: spec.render(x)?,
                gold: x.gold_type.clone(),
            })
        })
        .collect()
}

/// Loss and gradients for one batch of prompted examples.
#[derive(Debug, Clone)]
pub struct PromptGrad {
    pub loss: f64,
    pub encoder: ParamSet,
    /// Gradient with respect to the flattened verbalizer weights.
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FtGrad {
    pub loss: f64,
    pub encoder: ParamSet,
    /// Same shape as the head; holds gradients, not weights.
    pub head: FineTuneHead,
}

fn gold_index(v: &Verbalizer, gold: &EntityType) -> Result<usize> {
    v.types()
        .position(|t| t == gold)
        .ok_or_else(|| Error::Config(format!("gold type {gold} is not in the verbalizer")))
}

struct PromptTerm {
    loss: f64,
    /// dL/d(raw score) per type.
    d_scores: Vec<f64>,
}

fn prompt_term(word_probs: &[f64], v: &Verbalizer, gold: usize, id: &str) -> Result<PromptTerm> {
    let raw = raw_type_scores(word_probs, v);
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Training(format!(
            "all type scores are zero for example {id}"
        )));
    }
    if !(raw[gold] > 0.0) {
        return Err(Error::Training(format!(
            "gold type scores zero for example {id}"
        )));
    }
    let mut d_scores = vec![1.0 / total; raw.len()];
    d_scores[gold] -= 1.0 / raw[gold];
    Ok(PromptTerm {
        loss: (total / raw[gold]).ln(),
        d_scores,
    })
}

/// Mean negative log normalized gold score over the batch.
pub fn prompt_loss(
    batch: &[LabeledPrompt],
    v: &Verbalizer,
    backend: &impl MaskedLm,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let bound = BoundVerbalizer::new(v, backend)?;
    let mut sum = 0.0;
    for ex in batch {
        let gold = gold_index(v, &ex.gold)?;
        let d = backend.mask_distribution(&ex.input)?;
        sum += prompt_term(&bound.word_probs(&d), v, gold, &ex.id)?.loss;
    }
    Ok(sum / batch.len() as f64)
}

/// Chain rule from per-type score gradients down to the mask distribution
/// (and the verbalizer weights when `lambda` is given).
pub(crate) fn backprop_scores(
    d_scores: &[f64],
    word_probs: &[f64],
    v: &Verbalizer,
    mut lambda: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut d_words = vec![0.0; word_probs.len()];
    let mut flat = 0;
    for (((_, words), slots), ds) in v.entries().iter().zip(v.slots()).zip(d_scores) {
        let m = words.len() as f64;
        for (w, &s) in words.iter().zip(slots) {
            d_words[s] += ds * w.weight / m;
            if let Some(l) = lambda.as_deref_mut() {
                l[flat] += ds * word_probs[s] / m;
            }
            flat += 1;
        }
    }
    d_words
}

/// Spreads union-word gradients onto vocabulary ids.
pub(crate) fn word_grads_to_probs(
    d_words: &[f64],
    word_probs: &[f64],
    word_tokens: &[Vec<TokenId>],
    d: &MaskDistribution,
) -> Vec<f64> {
    let mut g = vec![0.0; d.len()];
    for ((dw, wp), ids) in d_words.iter().zip(word_probs).zip(word_tokens) {
        match ids.as_slice() {
            [id] => g[*id] += dw,
            many => {
                let n = many.len() as f64;
                for &id in many {
                    g[id] += dw * wp / (n * d.prob(id));
                }
            }
        }
    }
    g
}

pub fn prompt_loss_grad<B: TrainableMlm>(
    batch: &[LabeledPrompt],
    v: &Verbalizer,
    backend: &B,
    exec: Execution,
) -> Result<PromptGrad> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let bound = BoundVerbalizer::new(v, backend)?;
    let scale = 1.0 / batch.len() as f64;
    let parts = exec.try_map(batch, |ex| {
        let gold = gold_index(v, &ex.gold)?;
        let (d, cache) = backend.forward_mask(&ex.input)?;
        let wp = bound.word_probs(&d);
        let term = prompt_term(&wp, v, gold, &ex.id)?;
        let d_scores: Vec<f64> = term.d_scores.iter().map(|g| g * scale).collect();
        let mut lambda = vec![0.0; v.weight_count()];
        let d_words = backprop_scores(&d_scores, &wp, v, Some(&mut lambda));
        let d_probs = word_grads_to_probs(&d_words, &wp, bound.word_tokens(), &d);
        let mut grads = backend.params().zeros_like();
        backend.backward_mask(&cache, &d_probs, &mut grads);
        Ok::<_, Error>((term.loss, grads, lambda))
    })?;
    let mut loss = 0.0;
    let mut lambda = vec![0.0; v.weight_count()];
    let mut enc = Vec::with_capacity(parts.len());
    for (l, g, lg) in parts {
        loss += l;
        for (a, b) in lambda.iter_mut().zip(&lg) {
            *a += b;
        }
        enc.push(g);
    }
    Ok(PromptGrad {
        loss: loss * scale,
        encoder: sum_in_order(backend.params(), enc),
        lambda,
    })
}

/// Mean negative log softmax probability of the gold type under the head.
pub fn ft_loss(
    batch: &[TypingExample],
    head: &FineTuneHead,
    backend: &impl MaskedLm,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut sum = 0.0;
    for x in batch {
        let gold = head_index(head, &x.gold_type)?;
        let p = softmax(&head.logits(&backend.cls_embedding(x)?)?);
        sum += ft_term(&p, gold, &x.id)?;
    }
    Ok(sum / batch.len() as f64)
}

fn head_index(head: &FineTuneHead, gold: &EntityType) -> Result<usize> {
    head.types
        .iter()
        .position(|t| t == gold)
        .ok_or_else(|| Error::Config(format!("gold type {gold} is not in the head")))
}

fn ft_term(p: &[f64], gold: usize, id: &str) -> Result<f64> {
    if !(p[gold] > 0.0) {
        return Err(Error::Training(format!(
            "gold type probability underflows for example {id}"
        )));
    }
    Ok(-p[gold].ln())
}

pub fn ft_loss_grad<B: TrainableMlm>(
    batch: &[TypingExample],
    head: &FineTuneHead,
    backend: &B,
    exec: Execution,
) -> Result<FtGrad> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if head.width != backend.hidden_width() {
        return Err(Error::Config(format!(
            "head width {} does not match backend width {}",
            head.width,
            backend.hidden_width()
        )));
    }
    let scale = 1.0 / batch.len() as f64;
    let width = head.width;
    let parts = exec.try_map(batch, |x| {
        let gold = head_index(head, &x.gold_type)?;
        let (h, cache) = backend.forward_cls(x)?;
        let p = softmax(&head.logits(&h)?);
        let loss = ft_term(&p, gold, &x.id)?;
        let mut d_logits: Vec<f64> = p.iter().map(|q| q * scale).collect();
        d_logits[gold] -= scale;
        let mut d_weight = vec![0.0; head.weight.len()];
        let mut d_hidden = vec![0.0; width];
        for (k, dl) in d_logits.iter().enumerate() {
            let row = &head.weight[k * width..(k + 1) * width];
            for i in 0..width {
                d_weight[k * width + i] = dl * h[i];
                d_hidden[i] += dl * row[i];
            }
        }
        let mut grads = backend.params().zeros_like();
        backend.backward_cls(&cache, &d_hidden, &mut grads);
        Ok::<_, Error>((loss, grads, d_weight, d_logits))
    })?;
    let mut g_head = FineTuneHead {
        types: head.types.clone(),
        width,
        weight: vec![0.0; head.weight.len()],
        bias: vec![0.0; head.bias.len()],
    };
    let mut loss = 0.0;
    let mut enc = Vec::with_capacity(parts.len());
    for (l, g, dw, db) in parts {
        loss += l;
        for (a, b) in g_head.weight.iter_mut().zip(&dw) {
            *a += b;
        }
        for (a, b) in g_head.bias.iter_mut().zip(&db) {
            *a += b;
        }
        enc.push(g);
    }
    Ok(FtGrad {
        loss: loss * scale,
        encoder: sum_in_order(backend.params(), enc),
        head: g_head,
    })
}

/// Metrics of a scorer over a whole dataset.
pub fn evaluate_dataset(
    ds: &TypingDataset,
    scorer: Scorer<'_, '_>,
    backend: &impl MaskedLm,
    exec: Execution,
) -> Result<EvalResult> {
    let preds = predict_all(ds.examples(), scorer, backend, exec)?;
    let predicted: Vec<EntityType> = preds.into_iter().map(|p| p.predicted).collect();
    let golds: Vec<EntityType> = ds.examples().iter().map(|x| x.gold_type.clone()).collect();
    evaluate_with(&predicted, &golds, MacroAveraging::default(), exec)
}

fn as_params(name: &str, values: &[f64]) -> ParamSet {
    let mut t = Tensor::zeros(name, 1, values.len());
    t.data.copy_from_slice(values);
    ParamSet { tensors: vec![t] }
}

fn head_params(head: &FineTuneHead) -> ParamSet {
    let mut w = Tensor::zeros("head.weight", head.types.len(), head.width);
    w.data.copy_from_slice(&head.weight);
    let mut b = Tensor::zeros("head.bias", 1, head.bias.len());
    b.data.copy_from_slice(&head.bias);
    ParamSet {
        tensors: vec![w, b],
    }
}

fn check_schemas(train: &TypingDataset, others: &[&TypingDataset]) -> Result<()> {
    for ds in others {
        if ds.schema().types() != train.schema().types() {
            return Err(Error::Config(format!(
                "split {:?} does not share the training schema",
                ds.split()
            )));
        }
        if let Some(x) = ds
            .examples()
            .iter()
            .find(|x| train.examples().iter().any(|t| t.id == x.id))
        {
            return Err(Error::Config(format!(
                "example {} appears in both {:?} and {:?}",
                x.id,
                train.split(),
                ds.split()
            )));
        }
    }
    Ok(())
}

struct Checkpoint {
    step: usize,
    dev: EvalResult,
    params: ParamSet,
    head: Option<FineTuneHead>,
    verbalizer: Verbalizer,
}

/// Trains the backend in place. On return the backend holds the best-dev
/// checkpoint, and the report carries that checkpoint's test metrics.
pub fn train<B: TrainableMlm>(
    config: &TrainConfig,
    train: &TypingDataset,
    dev: &TypingDataset,
    test: Option<&TypingDataset>,
    verbalizer: &Verbalizer,
    backend: &mut B,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("dev set is empty".into()));
    }
    let mut splits = vec![dev];
    splits.extend(test);
    check_schemas(train, &splits)?;

    let exec = config.execution;
    let mut verbalizer = verbalizer.clone();
    let mut head = None;
    let mut extra = match config.mode {
        TrainMode::Prompt => {
            for t in train.schema().types() {
                if verbalizer.words(t).is_none() {
                    return Err(Error::Config(format!("type {t} has no label words")));
                }
            }
            backend.ensure_special_tokens(&config.template.special_tokens(), config.seed)?;
            as_params("lambda", &verbalizer.weights())
        }
        TrainMode::Ft => {
            let h = FineTuneHead::random(train.schema(), backend.hidden_width(), config.seed);
            let p = head_params(&h);
            head = Some(h);
            p
        }
    };
    let prompts = match config.mode {
        TrainMode::Prompt => render_batch(train.examples(), &config.template)?,
        TrainMode::Ft => Vec::new(),
    };

    let mut enc_opt = AdamW::new(config.optimizer(config.weight_decay), backend.params());
    let extra_decay = match config.mode {
        TrainMode::Prompt => 0.0,
        TrainMode::Ft => config.weight_decay,
    };
    let mut extra_opt = AdamW::new(config.optimizer(extra_decay), &extra);

    let evaluate_now =
        |backend: &B, head: &Option<FineTuneHead>, v: &Verbalizer| -> Result<EvalResult> {
            let bound;
            let scorer = match head {
                Some(h) => Scorer::FineTune { head: h },
                None => {
                    bound = BoundVerbalizer::new(v, backend)?;
                    Scorer::Prompt {
                        template: &config.template,
                        verbalizer: &bound,
                    }
                }
            };
            evaluate_dataset(dev, scorer, backend, exec)
        };

    let initial = evaluate_now(backend, &head, &verbalizer)?;
    let mut history = vec![EvalPoint {
        step: 0,
        dev: initial.clone(),
    }];
    let mut best = Checkpoint {
        step: 0,
        dev: initial,
        params: backend.params().clone(),
        head: head.clone(),
        verbalizer: verbalizer.clone(),
    };

    let n = train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_loss = Vec::with_capacity(total_steps);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let (loss, mut enc_grad, mut extra_grad) = match config.mode {
                TrainMode::Prompt => {
                    let batch: Vec<LabeledPrompt> =
                        chunk.iter().map(|&i| prompts[i].clone()).collect();
                    let g = prompt_loss_grad(&batch, &verbalizer, backend, exec)?;
                    let lambda = if config.lambda_learnable {
                        g.lambda
                    } else {
                        vec![0.0; g.lambda.len()]
                    };
                    (g.loss, g.encoder, as_params("lambda", &lambda))
                }
                TrainMode::Ft => {
                    let batch: Vec<TypingExample> =
                        chunk.iter().map(|&i| train.examples()[i].clone()).collect();
                    let g = ft_loss_grad(
                        &batch,
                        head.as_ref().expect("ft mode has a head"),
                        backend,
                        exec,
                    )?;
                    (g.loss, g.encoder, head_params(&g.head))
                }
            };
            clip_global_norm(&mut [&mut enc_grad, &mut extra_grad], config.max_grad_norm);
            enc_opt.step(backend.params_mut(), &enc_grad);
            backend.state_mut().version += 1;
            match config.mode {
                TrainMode::Prompt if config.lambda_learnable => {
                    extra_opt.step(&mut extra, &extra_grad);
                    verbalizer.set_weights(&extra.tensors[0].data)?;
                    extra.tensors[0].data = verbalizer.weights();
                }
                TrainMode::Prompt => {}
                TrainMode::Ft => {
                    extra_opt.step(&mut extra, &extra_grad);
                    let h = head.as_mut().expect("ft mode has a head");
                    h.weight.copy_from_slice(&extra.tensors[0].data);
                    h.bias.copy_from_slice(&extra.tensors[1].data);
                }
            }
            train_loss.push(loss);
            debug!("epoch {epoch} step {step} loss {loss:.6}");

            if step % config.eval_every_steps == 0 || step == total_steps {
                let dev_result = evaluate_now(backend, &head, &verbalizer)?;
                info!(
                    "step {step}: dev acc {:.4} micro-f1 {:.4} macro-f1 {:.4}",
                    dev_result.strict_acc, dev_result.loose_micro_f1, dev_result.loose_macro_f1
                );
                if dev_result.loose_micro_f1 > best.dev.loose_micro_f1 {
                    best = Checkpoint {
                        step,
                        dev: dev_result.clone(),
                        params: backend.params().clone(),
                        head: head.clone(),
                        verbalizer: verbalizer.clone(),
                    };
                }
                history.push(EvalPoint {
                    step,
                    dev: dev_result,
                });
            }
        }
    }

    *backend.params_mut() = best.params;
    let test_result = match test {
        Some(ds) if !ds.is_empty() => {
            let bound;
            let scorer = match &best.head {
                Some(h) => Scorer::FineTune { head: h },
                None => {
                    bound = BoundVerbalizer::new(&best.verbalizer, backend)?;
                    Scorer::Prompt {
                        template: &config.template,
                        verbalizer: &bound,
                    }
                }
            };
            Some(evaluate_dataset(ds, scorer, backend, exec)?)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        head: best.head,
        verbalizer: best.verbalizer,
        report: TrainReport {
            mode: config.mode,
            steps: step,
            train_loss,
            history,
            best_step: best.step,
            best_dev: best.dev,
            test: test_result,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyConfig, ToyMlm};
    use crate::synthetic::{SyntheticWorld, WorldConfig};
    use crate::templates::HardTemplate;
    use rand::Rng;

    fn world(types: usize) -> SyntheticWorld {
        SyntheticWorld::new(WorldConfig {
            types: crate::synthetic::DEFAULT_TYPES[..types]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn perturbed_backend(w: &SyntheticWorld) -> ToyMlm {
        w.backend(ToyConfig {
            output_scale: 0.3,
            dim: 8,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    /// Thirty random coordinates with a gradient large enough to measure.
    fn significant(g: &ParamSet, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::new();
        while out.len() < 30 {
            let i = rng.random_range(0..g.len());
            if g.flat(i).abs() > 1e-6 {
                out.push(i);
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn prompt_loss_simple_cases() {
        let w = world(4);
        let v = w.verbalizer().unwrap();
        // nothing fires: uniform over four types
        let x = TypingExample {
            id: "u".into(),
            tokens: vec!["zzz".into()],
            mention_span: (0, 1),
            gold_type: w.schema().types()[0].clone(),
        };
        let backend = ToyMlm::builder(ToyConfig::default())
            .words(w.vocabulary())
            .words(["zzz".to_string()])
            .words(v.union_vocabulary().iter().cloned())
            .build()
            .unwrap();
        let batch = render_batch(&[x], &TemplateSpec::default()).unwrap();
        let l = prompt_loss(&batch, &v, &backend).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let w = world(4);
        let mut backend = perturbed_backend(&w);
        let mut v = w.verbalizer().unwrap();
        let ws: Vec<f64> = (0..v.weight_count())
            .map(|i| 0.5 + 0.1 * i as f64)
            .collect();
        v.set_weights(&ws).unwrap();
        let ds = w.dataset(5, 3, "g").unwrap();
        let batch = render_batch(ds.examples(), &TemplateSpec::hard(HardTemplate::T3)).unwrap();
        let g = prompt_loss_grad(&batch, &v, &backend, Execution::Sequential).unwrap();
        assert!((g.loss - prompt_loss(&batch, &v, &backend).unwrap()).abs() < 1e-12);

        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in significant(&g.encoder, &mut rng) {
            let orig = backend.params().flat(i);
            *backend.params_mut().flat_mut(i) = orig + h;
            let up = prompt_loss(&batch, &v, &backend).unwrap();
            *backend.params_mut().flat_mut(i) = orig - h;
            let down = prompt_loss(&batch, &v, &backend).unwrap();
            *backend.params_mut().flat_mut(i) = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel_err(g.encoder.flat(i), fd) < 1e-4,
                "param {i}: {} vs {fd}",
                g.encoder.flat(i)
            );
        }
        for j in 0..v.weight_count() {
            let mut vp = v.clone();
            let mut wp = ws.clone();
            wp[j] += h;
            vp.set_weights(&wp).unwrap();
            let up = prompt_loss(&batch, &vp, &backend).unwrap();
            wp[j] -= 2.0 * h;
            vp.set_weights(&wp).unwrap();
            let down = prompt_loss(&batch, &vp, &backend).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel_err(g.lambda[j], fd) < 1e-4,
                "lambda {j}: {} vs {fd}",
                g.lambda[j]
            );
        }
    }

    #[test]
    fn ft_gradients_match_finite_differences() {
        let w = world(4);
        let mut backend = perturbed_backend(&w);
        let ds = w.dataset(5, 4, "g").unwrap();
        let mut head = FineTuneHead::random(w.schema(), backend.hidden_width(), 2);
        head.weight.iter_mut().for_each(|x| *x *= 20.0);
        let g = ft_loss_grad(ds.examples(), &head, &backend, Execution::Parallel).unwrap();
        assert!((g.loss - ft_loss(ds.examples(), &head, &backend).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in significant(&g.encoder, &mut rng) {
            let orig = backend.params().flat(i);
            *backend.params_mut().flat_mut(i) = orig + h;
            let up = ft_loss(ds.examples(), &head, &backend).unwrap();
            *backend.params_mut().flat_mut(i) = orig - h;
            let down = ft_loss(ds.examples(), &head, &backend).unwrap();
            *backend.params_mut().flat_mut(i) = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel_err(g.encoder.flat(i), fd) < 1e-4,
                "param {i}: {} vs {fd}",
                g.encoder.flat(i)
            );
        }
        for k in [0, 3, 7, 17] {
            let mut hp = head.clone();
            hp.weight[k] += h;
            let up = ft_loss(ds.examples(), &hp, &backend).unwrap();
            hp.weight[k] -= 2.0 * h;
            let down = ft_loss(ds.examples(), &hp, &backend).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(g.head.weight[k], fd) < 1e-4);
        }
    }

    #[test]
    fn ft_loss_is_mean_decomposable() {
        let w = world(4);
        let backend = perturbed_backend(&w);
        let ds = w.dataset(7, 5, "m").unwrap();
        let head = FineTuneHead::random(w.schema(), backend.hidden_width(), 1);
        let xs = ds.examples();
        let all = ft_loss(xs, &head, &backend).unwrap();
        let a = ft_loss(&xs[..3], &head, &backend).unwrap();
        let b = ft_loss(&xs[3..], &head, &backend).unwrap();
        assert!((all - (3.0 * a + 4.0 * b) / 7.0).abs() < 1e-12);
        let zero = FineTuneHead::zeros(w.schema(), backend.hidden_width());
        assert!((ft_loss(xs, &zero, &backend).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn parallel_and_sequential_gradients_agree() {
        let w = world(4);
        let backend = perturbed_backend(&w);
        let v = w.verbalizer().unwrap();
        let ds = w.dataset(20, 6, "p").unwrap();
        let batch = render_batch(ds.examples(), &TemplateSpec::default()).unwrap();
        let a = prompt_loss_grad(&batch, &v, &backend, Execution::Sequential).unwrap();
        let b = prompt_loss_grad(&batch, &v, &backend, Execution::Parallel).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let d = TrainConfig::default();
        assert_eq!((d.learning_rate, d.batch_size), (5e-5, 16));
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                eval_every_steps: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn separable_setup() -> (SyntheticWorld, TypingDataset, TypingDataset) {
        let w = world(4);
        let train = w.balanced_dataset(60, 1, "train").unwrap();
        let dev = w.dataset(200, 2, "dev").unwrap();
        (w, train, dev)
    }

    #[test]
    fn prompt_training_reduces_loss_and_separates() {
        let (w, train_ds, dev) = separable_setup();
        let v = w.verbalizer().unwrap();
        let mut backend = w.backend(ToyConfig::default()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.03,
            epochs: 30,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &train_ds, &dev, None, &v, &mut backend).unwrap();
        let r = &out.report;
        assert!(r.train_loss.last().unwrap() < r.train_loss.first().unwrap());
        assert!(r.best_dev.strict_acc >= 0.95, "{:?}", r.best_dev);
        let best = r
            .history
            .iter()
            .map(|p| p.dev.loose_micro_f1)
            .fold(f64::MIN, f64::max);
        assert_eq!(r.best_dev.loose_micro_f1, best);
    }

    #[test]
    fn ft_training_separates() {
        let (w, train_ds, dev) = separable_setup();
        let v = w.verbalizer().unwrap();
        let mut backend = w.backend(ToyConfig::default()).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Ft,
            learning_rate: 0.03,
            epochs: 30,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &train_ds, &dev, None, &v, &mut backend).unwrap();
        assert!(out.head.is_some());
        assert!(
            out.report.best_dev.strict_acc >= 0.95,
            "{:?}",
            out.report.best_dev
        );
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let (w, train_ds, dev) = separable_setup();
        let v = w.verbalizer().unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            seed: 5,
            lambda_learnable: true,
            template: TemplateSpec::soft(2).unwrap(),
            ..TrainConfig::default()
        };
        let run = || {
            let mut backend = w.backend(ToyConfig::default()).unwrap();
            let out = train(&cfg, &train_ds, &dev, Some(&dev), &v, &mut backend).unwrap();
            (out.report, out.verbalizer, backend.params().to_le_bytes())
        };
        let (r1, v1, p1) = run();
        let (r2, v2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(v1, v2);
        assert_eq!(p1, p2);
        assert_eq!(r1.test.as_ref().unwrap(), &r1.best_dev);
        assert!(v1.weights().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn empty_or_overlapping_splits_are_rejected() {
        let (w, train_ds, dev) = separable_setup();
        let v = w.verbalizer().unwrap();
        let mut backend = w.backend(ToyConfig::default()).unwrap();
        let empty = TypingDataset::new(vec![], w.schema().clone(), "empty").unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&cfg, &empty, &dev, None, &v, &mut backend),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(&cfg, &train_ds, &train_ds, None, &v, &mut backend),
            Err(Error::Config(_))
        ));
    }
}

#[cfg(test)]
mod degenerate_tests {
    use super::*;
    use crate::verbalizer::LabelWord;

    #[test]
    fn zero_scores_name_the_example() {
        let t = |s: &str| EntityType::parse(s).unwrap();
        let w = |s: &str| LabelWord {
            word: s.into(),
            weight: 1.0,
        };
        let v =
            Verbalizer::from_entries(vec![(t("a"), vec![w("a")]), (t("b"), vec![w("b")])]).unwrap();
        let err = prompt_term(&[0.0, 0.0], &v, 0, "ex-7").err().unwrap();
        assert!(
            matches!(&err, Error::Training(m) if m.contains("ex-7")),
            "{err}"
        );
        let term = prompt_term(&[0.3, 0.3], &v, 1, "ok").unwrap();
        assert!((term.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(prompt_term(&[0.0, 0.7], &v, 1, "ok").unwrap().loss, 0.0);
    }
}
