use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PairExample, Polarity, SelfSupConfig};
use crate::backend::{sum_in_order, MaskDistribution, MaskedLm, ParamSet, TrainableMlm};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::templates::HIDE_TOKEN;
use crate::training::word_grads_to_probs;
use crate::typing_model::{project_word_probs, BoundVerbalizer};
use crate::verbalizer::Verbalizer;

/// Floor applied to the similarity of negative pairs before taking its log.
const NEGATIVE_EPS: f64 = 1e-8;

fn check_supports(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Config(format!(
            "distributions have different supports ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

fn kl_term(x: f64, m: f64) -> f64 {
    if x > 0.0 {
        x * (x / m).ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence with natural logarithms, in `[0, ln 2]`.
pub fn js_similarity(p: &[f64], q: &[f64]) -> Result<f64> {
    check_supports(p, q)?;
    let s: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_term(a, m) + 0.5 * kl_term(b, m)
        })
        .sum();
    Ok(s.clamp(0.0, std::f64::consts::LN_2))
}

/// Partial derivatives of [`js_similarity`] with respect to `p` and `q`.
/// Zero entries get a zero derivative.
pub fn js_similarity_grad(p: &[f64], q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_supports(p, q)?;
    let half_log = |x: f64, m: f64| if x > 0.0 { 0.5 * (x / m).ln() } else { 0.0 };
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            (half_log(a, m), half_log(b, m))
        })
        .unzip())
}

struct Side {
    projected: Vec<f64>,
    word_probs: Vec<f64>,
    total: f64,
}

fn side(d: &MaskDistribution, bound: &BoundVerbalizer<'_>) -> Result<Side> {
    let word_probs = bound.word_probs(d);
    let projected = project_word_probs(&word_probs)?;
    Ok(Side {
        total: word_probs.iter().sum(),
        projected,
        word_probs,
    })
}

/// Gradient through the renormalization onto the label-word vocabulary.
fn unproject(g: &[f64], s: &Side) -> Vec<f64> {
    let dot: f64 = g.iter().zip(&s.projected).map(|(a, b)| a * b).sum();
    g.iter().map(|gi| (gi - dot) / s.total).collect()
}

fn term(s: f64, polarity: Polarity) -> (f64, f64) {
    match polarity {
        Polarity::Positive => (-(1.0 - s).ln(), 1.0 / (1.0 - s)),
        Polarity::Negative if s < NEGATIVE_EPS => {
            warn!("negative pair with similarity {s:e} clamped to {NEGATIVE_EPS:e}");
            (-NEGATIVE_EPS.ln(), 0.0)
        }
        Polarity::Negative => (-s.ln(), -1.0 / s),
    }
}

fn weights(pos: usize, neg: usize, gamma: f64) -> (f64, f64) {
    let w_pos = if pos > 0 { 1.0 / pos as f64 } else { 0.0 };
    let w_neg = if neg > 0 { gamma / neg as f64 } else { 0.0 };
    (w_pos, w_neg)
}

fn split(pairs: &[PairExample]) -> (usize, usize) {
    let pos = pairs
        .iter()
        .filter(|p| p.polarity == Polarity::Positive)
        .count();
    (pos, pairs.len() - pos)
}

/// Mean of `-ln(1 - s)` over positive pairs plus `gamma` times the mean of
/// `-ln(s)` over negative pairs, with `s` the divergence between the two
/// sides' label-word distributions. An empty group contributes nothing.
pub fn selfsup_loss(
    pos: &[PairExample],
    neg: &[PairExample],
    v: &Verbalizer,
    backend: &impl MaskedLm,
    gamma: f64,
) -> Result<f64> {
    let bound = BoundVerbalizer::new(v, backend)?;
    let (w_pos, w_neg) = weights(pos.len(), neg.len(), gamma);
    let mut loss = 0.0;
    for (group, w, polarity) in [
        (pos, w_pos, Polarity::Positive),
        (neg, w_neg, Polarity::Negative),
    ] {
        for p in group {
            let a = side(&backend.mask_distribution(&p.a)?, &bound)?;
            let b = side(&backend.mask_distribution(&p.b)?, &bound)?;
            let s = js_similarity(&a.projected, &b.projected)?;
            loss += w * term(s, polarity).0;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct SelfSupGrad {
    pub loss: f64,
    pub encoder: ParamSet,
}

/// Loss and encoder gradient for a mixed batch; polarity is read from each
/// pair.
pub fn selfsup_loss_grad<B: TrainableMlm>(
    pairs: &[PairExample],
    v: &Verbalizer,
    backend: &B,
    gamma: f64,
    exec: Execution,
) -> Result<SelfSupGrad> {
    if pairs.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let bound = BoundVerbalizer::new(v, backend)?;
    let (n_pos, n_neg) = split(pairs);
    let (w_pos, w_neg) = weights(n_pos, n_neg, gamma);
    let parts = exec.try_map(pairs, |p| {
        let (da, ca) = backend.forward_mask(&p.a)?;
        let (db, cb) = backend.forward_mask(&p.b)?;
        let a = side(&da, &bound)?;
        let b = side(&db, &bound)?;
        let s = js_similarity(&a.projected, &b.projected)?;
        let w = match p.polarity {
            Polarity::Positive => w_pos,
            Polarity::Negative => w_neg,
        };
        let (l, dl_ds) = term(s, p.polarity);
        let (gp, gq) = js_similarity_grad(&a.projected, &b.projected)?;
        let mut grads = backend.params().zeros_like();
        for (g, sd, d, cache) in [(gp, &a, &da, &ca), (gq, &b, &db, &cb)] {
            let g: Vec<f64> = g.iter().map(|x| x * w * dl_ds).collect();
            let d_words = unproject(&g, sd);
            let d_probs = word_grads_to_probs(&d_words, &sd.word_probs, bound.word_tokens(), d);
            backend.backward_mask(cache, &d_probs, &mut grads);
        }
        Ok::<_, Error>((w * l, grads))
    })?;
    let mut loss = 0.0;
    let mut enc = Vec::with_capacity(parts.len());
    for (l, g) in parts {
        loss += l;
        enc.push(g);
    }
    Ok(SelfSupGrad {
        loss,
        encoder: sum_in_order(backend.params(), enc),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Batch loss per optimizer step.
    pub loss: Vec<f64>,
}

/// Optimizes the backend on the pairs with the verbalizer weights frozen.
pub fn pretrain<B: TrainableMlm>(
    cfg: &SelfSupConfig,
    pairs: &[PairExample],
    v: &Verbalizer,
    backend: &mut B,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to train on".into()));
    }
    if pairs.iter().any(|p| p.a.hidden || p.b.hidden) {
        backend.ensure_special_tokens(&[HIDE_TOKEN.to_string()], cfg.seed)?;
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        backend.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PairExample> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let mut g = selfsup_loss_grad(&batch, v, backend, cfg.gamma, cfg.execution)?;
            clip_global_norm(&mut [&mut g.encoder], cfg.max_grad_norm);
            opt.step(backend.params_mut(), &g.encoder);
            backend.state_mut().version += 1;
            debug!("epoch {epoch} step {} loss {:.6}", losses.len() + 1, g.loss);
            losses.push(g.loss);
        }
        let tail = &losses[losses.len().saturating_sub(100)..];
        info!(
            "epoch {epoch}: trailing mean loss {:.6}",
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
    Ok(PretrainReport {
        steps: losses.len(),
        loss: losses,
    })
}
