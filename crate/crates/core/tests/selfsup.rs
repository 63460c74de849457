use prompt_typing::backend::{MaskedLm, ToyConfig, ToyMlm, TrainableMlm};
use prompt_typing::selfsup::{
    generate_pairs, js_similarity, pretrain, selfsup_loss, selfsup_loss_grad, PairExample,
    Polarity, SelfSupConfig,
};
use prompt_typing::synthetic::{SyntheticWorld, WorldConfig};
use prompt_typing::templates::{TemplateSpec, HIDE_TOKEN};
use prompt_typing::training::evaluate_dataset;
use prompt_typing::typing_model::{BoundVerbalizer, Scorer};
use prompt_typing::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world() -> SyntheticWorld {
    SyntheticWorld::new(WorldConfig::default()).unwrap()
}

fn pairs(w: &SyntheticWorld, c: usize, seed: u64) -> Vec<PairExample> {
    let corpus = w.linked_corpus(1500, seed).unwrap();
    let cfg = SelfSupConfig {
        c,
        seed,
        ..Default::default()
    };
    generate_pairs(&corpus, &w.dictionary(), &cfg).unwrap()
}

fn zero_shot_acc(w: &SyntheticWorld, backend: &ToyMlm) -> f64 {
    let v = w.verbalizer().unwrap();
    let bound = BoundVerbalizer::new(&v, backend).unwrap();
    let test = w.dataset(400, 77, "test").unwrap();
    let spec = TemplateSpec::default();
    let scorer = Scorer::Prompt {
        template: &spec,
        verbalizer: &bound,
    };
    evaluate_dataset(&test, scorer, backend, Execution::default())
        .unwrap()
        .strict_acc
}

#[test]
fn identical_positive_sides_cost_nothing() {
    let w = world();
    let mut backend = w.backend(ToyConfig::default()).unwrap();
    backend
        .ensure_special_tokens(&[HIDE_TOKEN.to_string()], 0)
        .unwrap();
    let v = w.verbalizer().unwrap();
    let mut ps = pairs(&w, 10, 1);
    ps.truncate(5);
    for p in &mut ps {
        p.b = p.a.clone();
        p.a.hidden = false;
    }
    let loss = selfsup_loss(&ps, &[], &v, &backend, 0.5).unwrap();
    assert!(loss.abs() < 1e-12, "{loss}");
}

#[test]
fn zero_gamma_ignores_negatives() {
    let w = world();
    let mut backend = w
        .backend(ToyConfig {
            output_scale: 0.2,
            ..Default::default()
        })
        .unwrap();
    backend
        .ensure_special_tokens(&[HIDE_TOKEN.to_string()], 0)
        .unwrap();
    let v = w.verbalizer().unwrap();
    let ps = pairs(&w, 20, 2);
    let (pos, neg): (Vec<_>, Vec<_>) = ps
        .into_iter()
        .partition(|p| p.polarity == Polarity::Positive);
    let base = selfsup_loss(&pos, &[], &v, &backend, 0.0).unwrap();
    assert_eq!(selfsup_loss(&pos, &neg, &v, &backend, 0.0).unwrap(), base);
    assert_eq!(
        selfsup_loss(&pos, &neg[..3], &v, &backend, 0.0).unwrap(),
        base
    );
    assert!(selfsup_loss(&pos, &neg, &v, &backend, 1.0).unwrap() > base);
}

#[test]
fn gradient_matches_finite_differences() {
    let w = world();
    let mut backend = w
        .backend(ToyConfig {
            output_scale: 0.3,
            dim: 8,
            ..Default::default()
        })
        .unwrap();
    let v = w.verbalizer().unwrap();
    let mut batch = pairs(&w, 20, 3);
    batch.retain(|p| !p.a.hidden && !p.b.hidden);
    batch.truncate(8);
    assert!(batch.iter().any(|p| p.polarity == Polarity::Negative));
    let gamma = 0.7;
    let loss_of = |b: &ToyMlm| {
        let (pos, neg): (Vec<_>, Vec<_>) = batch
            .iter()
            .cloned()
            .partition(|p| p.polarity == Polarity::Positive);
        selfsup_loss(&pos, &neg, &v, b, gamma).unwrap()
    };
    let g = selfsup_loss_grad(&batch, &v, &backend, gamma, Execution::Sequential).unwrap();
    assert!((g.loss - loss_of(&backend)).abs() < 1e-12);
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 40 {
        let i = rng.random_range(0..backend.params().len());
        if g.encoder.flat(i).abs() < 1e-6 {
            continue;
        }
        checked += 1;
        let orig = backend.params().flat(i);
        *backend.params_mut().flat_mut(i) = orig + h;
        let up = loss_of(&backend);
        *backend.params_mut().flat_mut(i) = orig - h;
        let down = loss_of(&backend);
        *backend.params_mut().flat_mut(i) = orig;
        let fd = (up - down) / (2.0 * h);
        let a = g.encoder.flat(i);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-4, "param {i}: {a} vs {fd}");
    }
}

#[test]
fn pretraining_helps_zero_shot_and_is_deterministic() {
    let w = world();
    let ps = pairs(&w, 500, 5);
    let v = w.verbalizer().unwrap();
    let cfg = SelfSupConfig {
        learning_rate: 0.02,
        epochs: 3,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut backend = w.backend(ToyConfig::default()).unwrap();
        let report = pretrain(&cfg, &ps, &v, &mut backend).unwrap();
        (backend, report)
    };
    let before = zero_shot_acc(&w, &w.backend(ToyConfig::default()).unwrap());
    let (b1, r1) = run();
    let (b2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(b1.params(), b2.params());
    assert!(b1.vocabulary().id(HIDE_TOKEN).is_some());
    let after = zero_shot_acc(&w, &b1);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn trailing_loss_decreases_over_first_thousand_steps() {
    let w = world();
    let ps = pairs(&w, 1000, 6);
    let v = w.verbalizer().unwrap();
    let cfg = SelfSupConfig {
        learning_rate: 0.01,
        epochs: 8,
        batch_size: 16,
        seed: 6,
        ..Default::default()
    };
    let mut backend = w.backend(ToyConfig::default()).unwrap();
    let r = pretrain(&cfg, &ps, &v, &mut backend).unwrap();
    assert!(r.steps >= 1000);
    let trailing: Vec<f64> = (100..=1000)
        .step_by(100)
        .map(|end| r.loss[end - 100..end].iter().sum::<f64>() / 100.0)
        .collect();
    assert!(trailing.last() < trailing.first(), "{trailing:?}");
    let falls = trailing.windows(2).filter(|p| p[1] < p[0]).count();
    assert!(falls >= trailing.len() - 2, "{trailing:?}");
}

#[test]
fn js_random_pairs_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..2000 {
        let n = rng.random_range(1..10);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut q: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|x| *x /= sp);
        q.iter_mut().for_each(|x| *x /= sq);
        let s = js_similarity(&p, &q).unwrap();
        assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&s));
        assert!((s - js_similarity(&q, &p).unwrap()).abs() <= 1e-12);
    }
}
