//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use obliviate::corpus::gen_scenes;
use obliviate::harvest::{detect_hallucinated, InferenceRecord, SpanRecord};
use obliviate::model::{
    encode_visual, sequence_loss_grad, Checkpoint, Example, ImagePrefix, Matrix, ModelConfig, Pooling, TapId, TargetToken,
    Trainable,
};
use obliviate::probe::{probe_loss_grad, ProbeExample, ProbeParams, Split};
use obliviate::scene::{Cell, CooccurrenceSpec, Placement, Scene};
use obliviate::train::{train_base, unlearn_batch, TrainConfig, UnlearnItem};
use obliviate::vocab::{ClassId, Vocab, CLASS_OFFSET, COMMA, PERIOD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-8;

/// Straightforward re-derivation of the model: every position recomputes the
/// causal mean from scratch.
pub fn reference_logits(scene: &Scene, tokens: &[usize], ckpt: &Checkpoint) -> Vec<Vec<f64>> {
    let c = &ckpt.config;
    let feats = encode_visual(scene, ckpt).unwrap();
    let mut xs: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| (0..c.hidden_dim).map(|k| (0..c.visual_dim).map(|j| ckpt.backbone.projection.get(j, k) * f[j]).sum()).collect())
        .collect();
    for &t in tokens {
        xs.push(ckpt.head.embeddings.row(t).to_vec());
    }
    for a in &ckpt.backbone.mixing {
        let next: Vec<Vec<f64>> = (0..xs.len())
            .map(|t| {
                let mean: Vec<f64> =
                    (0..c.hidden_dim).map(|k| xs[..=t].iter().map(|x| x[k]).sum::<f64>() / (t + 1) as f64).collect();
                let u: Vec<f64> = xs[t].iter().zip(&mean).map(|(x, m)| x + m).collect();
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                (0..c.hidden_dim).map(|r| (0..c.hidden_dim).map(|k| a.get(r, k) * u[k] / (n + EPS)).sum::<f64>().tanh()).collect()
            })
            .collect();
        xs = next;
    }
    xs.iter()
        .map(|s| (0..c.vocab_size).map(|v| ckpt.head.bias[v] + (0..c.hidden_dim).map(|k| s[k] * ckpt.head.lm_head.get(k, v)).sum::<f64>()).collect())
        .collect()
}

pub fn reference_loss(scene: &Scene, tokens: &[usize], targets: &[TargetToken], ckpt: &Checkpoint) -> f64 {
    let z = reference_logits(scene, tokens, ckpt);
    let img = scene.cells.len();
    targets
        .iter()
        .map(|t| {
            let row = &z[img + t.index - 1];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            -t.weight * (row[tokens[t.index]] - lse)
        })
        .sum()
}

pub struct Instance {
    pub ckpt: Checkpoint,
    pub scene: Scene,
    pub tokens: Vec<usize>,
    pub targets: Vec<TargetToken>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=6);
    let grid = rng.random_range(2..=4);
    let vocab = rng.random_range(CLASS_OFFSET + classes..=32);
    let mut cfg = ModelConfig::new(grid, classes, vocab, seed);
    cfg.hidden_dim = rng.random_range(3..=16);
    cfg.visual_dim = rng.random_range(4..=12);
    cfg.layers = rng.random_range(1..=3);
    let mut ckpt = Checkpoint::init(cfg).unwrap();
    // a trained-looking head so the softmax is not flat
    for w in ckpt.head.lm_head.data.iter_mut() {
        *w = rng.random_range(-1.0..1.0);
    }
    for b in ckpt.head.bias.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let mut scene = Scene::empty("fd", grid, seed, if seed % 2 == 0 { 0.0 } else { 0.5 });
    for cell in scene.cells.iter_mut() {
        *cell = match rng.random_range(0..4) {
            0 => Cell::Object(ClassId(rng.random_range(0..classes))),
            1 => Cell::Mask,
            _ => Cell::Empty,
        };
    }
    let len = rng.random_range(2..=7);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
    let mut targets = Vec::new();
    for index in 1..len {
        if rng.random_bool(0.7) {
            let weight = if rng.random_bool(0.2) { -1.0 } else { rng.random_range(0.2..1.5) };
            targets.push(TargetToken { index, weight });
        }
    }
    let targets = if targets.is_empty() { vec![TargetToken { index: len - 1, weight: 1.0 }] } else { targets };
    Instance { ckpt, scene, tokens, targets }
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, floor)` over a block.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-10)
}

#[derive(Clone, Copy)]
pub enum Coord {
    Embedding(usize),
    Head(usize),
    Bias(usize),
}

impl Coord {
    pub fn slot(self, c: &mut Checkpoint) -> &mut f64 {
        match self {
            Coord::Embedding(i) => &mut c.head.embeddings.data[i],
            Coord::Head(i) => &mut c.head.lm_head.data[i],
            Coord::Bias(i) => &mut c.head.bias[i],
        }
    }
}

pub fn central<F: FnMut(f64) -> f64>(x: f64, h: f64, mut f: F) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}


/// Relative error of the analytic sequence gradient on one random instance,
/// over sampled embedding, head and bias coordinates.
pub fn sequence_fd_error(seed: u64) -> f64 {
    let h = 1e-5;
    let it = instance(seed);
    let prefix = ImagePrefix::for_scene(&it.scene, &it.ckpt).unwrap();
    let got = sequence_loss_grad(&it.ckpt, &prefix, &it.tokens, &it.targets, Trainable::ALL).unwrap();
    let base = reference_loss(&it.scene, &it.tokens, &it.targets, &it.ckpt);
    assert!((got.loss - base).abs() <= 1e-10 * (1.0 + base.abs()), "seed {seed}: loss {} vs {base}", got.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (v, m) = (it.ckpt.config.vocab_size, it.ckpt.config.hidden_dim);
    let numeric = |coord: Coord| {
        let mut c = it.ckpt.clone();
        let x = *coord.slot(&mut c);
        central(x, h, |y| {
            *coord.slot(&mut c) = y;
            reference_loss(&it.scene, &it.tokens, &it.targets, &c)
        })
    };
    let (mut an_e, mut nu_e, mut an_h, mut nu_h) = (vec![], vec![], vec![], vec![]);
    for _ in 0..12 {
        // embedding rows of input tokens, where gradients are non-zero
        let tok = it.tokens[rng.random_range(0..it.tokens.len() - 1)];
        let k = rng.random_range(0..m);
        an_e.push(got.grads.embeddings.get(tok, k));
        nu_e.push(numeric(Coord::Embedding(tok * m + k)));
        let (r, col) = (rng.random_range(0..m), rng.random_range(0..v));
        an_h.push(got.grads.lm_head.get(r, col));
        nu_h.push(numeric(Coord::Head(r * v + col)));
        let b = rng.random_range(0..v);
        an_h.push(got.grads.bias[b]);
        nu_h.push(numeric(Coord::Bias(b)));
    }
    rel_error(&an_e, &nu_e).max(rel_error(&an_h, &nu_h))
}

/// Relative error of the probe gradient on one random instance, over every
/// coordinate.
pub fn probe_fd_error(seed: u64) -> f64 {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.random_range(1..=16);
    let xs: Vec<ProbeExample> = (0..rng.random_range(3..20))
        .map(|_| ProbeExample {
            x: (0..width).map(|_| rng.random_range(-3.0..3.0)).collect(),
            label: rng.random_bool(0.5),
            split: Split::Train,
        })
        .collect();
    let refs: Vec<&ProbeExample> = xs.iter().collect();
    let mut p = ProbeParams::zeros(TapId::Layer(1), Pooling::Image, width);
    p.standardize_on(&refs);
    p.weights = Matrix::from_fn(2, width, |_, _| rng.random_range(-1.0..1.0));
    p.bias = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let l2 = rng.random_range(0.0..0.1);
    let (_, gw, gb) = probe_loss_grad(&p, &refs, l2);
    let (mut an, mut nu) = (vec![], vec![]);
    for i in 0..p.weights.data.len() {
        let mut q = p.clone();
        nu.push(central(p.weights.data[i], h, |y| {
            q.weights.data[i] = y;
            probe_loss_grad(&q, &refs, l2).0
        }));
        an.push(gw.data[i]);
    }
    for k in 0..2 {
        let mut q = p.clone();
        nu.push(central(p.bias[k], h, |y| {
            q.bias[k] = y;
            probe_loss_grad(&q, &refs, l2).0
        }));
        an.push(gb[k]);
    }
    rel_error(&an, &nu)
}

/// Lists every delimiter position, cuts the caption into the segments between
/// consecutive delimiters, then picks the segment holding each hallucinated
/// class's first occurrence.
pub fn brute_force(rec: &InferenceRecord, vocab: &Vocab) -> Vec<SpanRecord> {
    let y = &rec.prediction;
    let correct: BTreeSet<usize> = rec.correct_objects().iter().map(|&c| vocab.class_token(c)).collect();
    let mut cuts: Vec<isize> = vec![-1];
    cuts.extend((0..y.len()).filter(|&i| y[i] == COMMA || y[i] == PERIOD || correct.contains(&y[i])).map(|i| i as isize));
    cuts.push(y.len() as isize);
    let segments: Vec<(usize, usize)> = cuts.windows(2).map(|w| ((w[0] + 1) as usize, w[1] as usize)).filter(|(s, e)| s < e).collect();
    rec.hallucinated
        .iter()
        .filter_map(|&class| {
            let tok = vocab.class_token(class);
            let first = (0..y.len()).find(|&i| y[i] == tok)?;
            let &(start, end) = segments.iter().find(|(s, e)| (*s..*e).contains(&first))?;
            Some(SpanRecord { parent: rec.id, start, end, trigger: class })
        })
        .collect()
}

/// A random caption over the whole vocabulary, biased toward object and
/// delimiter tokens so that segments are short and varied, scored against a
/// random scene.
pub fn random_record(id: usize, spec: &CooccurrenceSpec, vocab: &Vocab, rng: &mut ChaCha8Rng) -> InferenceRecord {
    let mut scene = Scene::empty(format!("r{id}"), spec.grid_size, id as u64, 0.0);
    for k in 0..rng.random_range(0..5) {
        let class = ClassId(rng.random_range(0..spec.class_count()));
        let _ = scene.place(Placement { class, row: k, col: 0, height: 1, width: 1 });
    }
    let len = rng.random_range(0..20);
    let prediction: Vec<usize> = (0..len)
        .map(|_| match rng.random_range(0..4) {
            0 => [COMMA, PERIOD][rng.random_range(0..2)],
            1 | 2 => vocab.class_token(ClassId(rng.random_range(0..spec.class_count()))),
            _ => rng.random_range(0..vocab.len()),
        })
        .collect();
    let mut rec = InferenceRecord {
        id,
        scene_ref: scene.id.clone(),
        instruction: vocab.caption_instruction(),
        ground_truth: scene.caption(vocab),
        prediction,
        gt_objects: BTreeSet::new(),
        pred_objects: BTreeSet::new(),
        hallucinated: BTreeSet::new(),
    };
    detect_hallucinated(&mut rec, &scene, vocab);
    rec
}

/// A briefly trained small model with every caption's first object phrase
/// marked as a span.
pub struct Fixture {
    pub ckpt: Checkpoint,
    pub examples: Vec<Example>,
    pub items: Vec<UnlearnItem>,
}

pub fn fixture() -> Fixture {
    let spec = CooccurrenceSpec::default_biased();
    let vocab: Vocab = spec.vocab();
    let mut cfg = ModelConfig::new(spec.grid_size, spec.class_count(), vocab.len(), 5);
    cfg.hidden_dim = 12;
    let init = Checkpoint::init(cfg).unwrap();
    let scenes: Vec<Arc<_>> = gen_scenes(&spec, 48, 3, "mech").unwrap().into_iter().filter(|s| !s.placements.is_empty()).map(Arc::new).collect();
    let prompt = vocab.caption_instruction();
    let examples: Vec<Example> =
        scenes.iter().map(|s| Example { scene: s.clone(), prompt: prompt.clone(), target: s.caption(&vocab) }).collect();
    let ckpt = train_base(&init, &examples, &TrainConfig { batch_size: 8, ..TrainConfig::new(60, 1) }).unwrap().checkpoint;
    let items = scenes
        .iter()
        .map(|s| UnlearnItem::new(s.clone(), &prompt, &s.caption(&vocab), &[(0, 2)]).unwrap())
        .collect();
    Fixture { ckpt, examples, items }
}

pub fn mean_span_logp(ckpt: &Checkpoint, items: &[UnlearnItem]) -> f64 {
    let prefixes: HashMap<String, ImagePrefix> =
        items.iter().map(|it| (it.scene.id.clone(), ImagePrefix::for_scene(&it.scene, ckpt).unwrap())).collect();
    let batch: Vec<&UnlearnItem> = items.iter().collect();
    unlearn_batch(ckpt, &prefixes, &batch, Trainable::LM_HEAD).unwrap().0
}

