//! Batched evaluation and gradient throughput. The `core` entries go through
//! the crate's data-parallel helpers, so they measure rayon under the default
//! features and the sequential fallback under `--no-default-features`; the
//! `sequential` entries are a plain-iterator baseline in both builds.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use obliviate::corpus::{gen_popev2, gen_scenes};
use obliviate::eval::{decide, eval_benchmark};
use obliviate::model::{loss_and_grads, sequence_loss_grad, yes_no_prob, Checkpoint, Example, ImagePrefix, ModelConfig, Trainable};
use obliviate::par;
use obliviate::scene::CooccurrenceSpec;

fn bench(c: &mut Criterion) {
    let spec = CooccurrenceSpec::default_biased();
    let vocab = spec.vocab();
    let ckpt = Checkpoint::init(ModelConfig::new(spec.grid_size, spec.class_count(), vocab.len(), 1)).unwrap();
    let scenes: Vec<Arc<_>> = gen_scenes(&spec, 400, 1, "bench").unwrap().into_iter().map(Arc::new).collect();
    let bench = gen_popev2(&scenes, &spec, 1, 100).unwrap();
    let examples: Vec<Example> = scenes
        .iter()
        .take(64)
        .map(|s| Example { scene: s.clone(), prompt: vocab.caption_instruction(), target: s.caption(&vocab) })
        .collect();
    let mode = if par::is_parallel() { "rayon" } else { "fallback" };

    let mut g = c.benchmark_group("eval_benchmark");
    g.sample_size(10);
    g.bench_function(format!("core/{mode}"), |b| b.iter(|| eval_benchmark(&ckpt, black_box(&bench)).unwrap()));
    g.bench_function("sequential", |b| {
        b.iter(|| {
            bench
                .items
                .iter()
                .map(|it| {
                    let (y, n) = yes_no_prob(bench.scene(it), &it.question, &ckpt).unwrap();
                    decide(y, n)
                })
                .filter(|&p| p)
                .count()
        })
    });
    g.finish();

    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(10);
    g.bench_function(format!("core/{mode}"), |b| b.iter(|| loss_and_grads(black_box(&examples), &ckpt, Trainable::ALL).unwrap()));
    g.bench_function("sequential", |b| {
        b.iter(|| {
            examples
                .iter()
                .map(|ex| {
                    let prefix = ImagePrefix::for_scene(&ex.scene, &ckpt).unwrap();
                    let (tokens, targets) = ex.sequence();
                    sequence_loss_grad(&ckpt, &prefix, &tokens, &targets, Trainable::ALL).unwrap().loss
                })
                .sum::<f64>()
        })
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
