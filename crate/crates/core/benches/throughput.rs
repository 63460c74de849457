use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use prompt_typing::backend::ToyConfig;
use prompt_typing::metrics::{evaluate_with, MacroAveraging};
use prompt_typing::selfsup::{generate_pairs, SelfSupConfig};
use prompt_typing::synthetic::{SyntheticWorld, WorldConfig};
use prompt_typing::templates::TemplateSpec;
use prompt_typing::training::{prompt_loss_grad, render_batch, LabeledPrompt};
use prompt_typing::typing_model::{predict_all, BoundVerbalizer, Scorer};
use prompt_typing::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn world() -> SyntheticWorld {
    SyntheticWorld::new(WorldConfig {
        seed: 1,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn toy() -> ToyConfig {
    ToyConfig {
        output_scale: 0.1,
        ..ToyConfig::default()
    }
}

fn predict(c: &mut Criterion) {
    let w = world();
    let backend = w.backend(toy()).unwrap();
    let v = w.verbalizer().unwrap();
    let bound = BoundVerbalizer::new(&v, &backend).unwrap();
    let template = TemplateSpec::default();
    let data = w.dataset(2000, 3, "bench").unwrap();
    let mut g = c.benchmark_group("predict_all");
    g.throughput(Throughput::Elements(data.len() as u64));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            let scorer = Scorer::Prompt {
                template: &template,
                verbalizer: &bound,
            };
            b.iter(|| predict_all(black_box(data.examples()), scorer, &backend, exec).unwrap())
        });
    }
    g.finish();
}

fn loss_grad(c: &mut Criterion) {
    let w = world();
    let backend = w.backend(toy()).unwrap();
    let v = w.verbalizer().unwrap();
    let data = w.dataset(256, 4, "bench").unwrap();
    let batch: Vec<LabeledPrompt> =
        render_batch(data.examples(), &TemplateSpec::default()).unwrap();
    let mut g = c.benchmark_group("prompt_loss_grad");
    g.throughput(Throughput::Elements(batch.len() as u64));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| prompt_loss_grad(black_box(&batch), &v, &backend, exec).unwrap())
        });
    }
    g.finish();
}

fn pairs(c: &mut Criterion) {
    let w = world();
    let corpus = w.linked_corpus(10_000, 5).unwrap();
    let dict = w.dictionary();
    let mut g = c.benchmark_group("generate_pairs");
    g.sample_size(20);
    for (name, exec) in MODES {
        let cfg = SelfSupConfig {
            c: 2000,
            seed: 6,
            shards: 8,
            execution: exec,
            ..SelfSupConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| generate_pairs(black_box(&corpus), &dict, cfg).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let w = world();
    let gold = w.dataset(100_000, 7, "gold").unwrap();
    let pred = w.dataset(100_000, 8, "pred").unwrap();
    let golds: Vec<_> = gold
        .examples()
        .iter()
        .map(|x| x.gold_type.clone())
        .collect();
    let preds: Vec<_> = pred
        .examples()
        .iter()
        .map(|x| x.gold_type.clone())
        .collect();
    let mut g = c.benchmark_group("evaluate");
    g.throughput(Throughput::Elements(golds.len() as u64));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                evaluate_with(black_box(&preds), &golds, MacroAveraging::FromMeans, exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, predict, loss_grad, pairs, metrics);
criterion_main!(benches);
