mod common;

use std::collections::HashMap;

use common::{fixture, mean_span_logp};
use obliviate::model::{loss_and_grads, Example, ImagePrefix, Trainable};
use obliviate::train::{obliviate, train_base, unlearn_batch, LossRow, TrainConfig, UnlearnItem};

#[test]
fn one_ascent_step_lowers_span_log_probability() {
    let f = fixture();
    let cfg = TrainConfig {
        alpha: 1.0,
        ar_weight: 0.0,
        learning_rate: 1e-3,
        batch_size: f.items.len(),
        ..TrainConfig::obliviate(1, 9)
    };
    let before = mean_span_logp(&f.ckpt, &f.items);
    let out = obliviate(&f.ckpt, &f.items, &[], &cfg).unwrap();
    assert_eq!(out.curve.len(), 1);
    let after = mean_span_logp(&out.checkpoint, &f.items);
    assert!(after < before, "span log-prob {before} -> {after}");
    assert_eq!(out.checkpoint.backbone_bytes(), f.ckpt.backbone_bytes());
    assert_eq!(out.checkpoint.embedding_bytes(), f.ckpt.embedding_bytes());
}

#[test]
fn zero_alpha_is_head_only_continued_training() {
    let f = fixture();
    let cfg = TrainConfig { alpha: 0.0, batch_size: 8, ..TrainConfig::obliviate(40, 17) };
    let unlearned = obliviate(&f.ckpt, &f.items, &f.examples, &cfg).unwrap();
    let continued = train_base(&f.ckpt, &f.examples, &TrainConfig { trainable: Trainable::LM_HEAD, ..cfg.clone() }).unwrap();
    assert_eq!(unlearned.checkpoint.lm_head_bytes(), continued.checkpoint.lm_head_bytes());
    assert_eq!(unlearned.checkpoint.embedding_bytes(), f.ckpt.embedding_bytes());
    assert_eq!(unlearned.checkpoint.backbone_bytes(), f.ckpt.backbone_bytes());
    let losses = |c: &[LossRow]| c.iter().map(|r| r.loss_ar.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&unlearned.curve), losses(&continued.curve));
    assert_ne!(unlearned.checkpoint.lm_head_bytes(), f.ckpt.lm_head_bytes());
}

#[test]
fn span_gradient_is_the_negated_autoregressive_gradient() {
    let f = fixture();
    let it = &f.items[0];
    let (s, e) = it.spans[0];
    let ex = Example { scene: it.scene.clone(), prompt: it.tokens[..s].to_vec(), target: it.tokens[s..e].to_vec() };
    let (l_ar, g_ar) = loss_and_grads(std::slice::from_ref(&ex), &f.ckpt, Trainable::LM_HEAD).unwrap();
    let single = UnlearnItem::new(it.scene.clone(), &it.tokens[..s], &it.tokens[s..e], &[(0, e - s)]).unwrap();
    let prefixes = HashMap::from([(it.scene.id.clone(), ImagePrefix::for_scene(&it.scene, &f.ckpt).unwrap())]);
    let (l_db, _, _, g_db) = unlearn_batch(&f.ckpt, &prefixes, &[&single], Trainable::LM_HEAD).unwrap();
    assert!((l_db + l_ar).abs() < 1e-12);
    for (a, b) in g_db.lm_head.data.iter().chain(&g_db.bias).zip(g_ar.lm_head.data.iter().chain(&g_ar.bias)) {
        assert!((a + b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn reported_total_is_weighted_sum_of_parts() {
    let f = fixture();
    let (alpha, ar_weight) = (0.3, 0.7);
    let cfg = TrainConfig {
        alpha,
        ar_weight,
        batch_size: f.examples.len(),
        unlearn_batch_size: Some(f.items.len()),
        ..TrainConfig::obliviate(1, 4)
    };
    let row = obliviate(&f.ckpt, &f.items, &f.examples, &cfg).unwrap().curve[0];
    // a batch as large as the set covers every example once, in some order
    let l_ar = loss_and_grads(&f.examples, &f.ckpt, Trainable::LM_HEAD).unwrap().0;
    let l_db = mean_span_logp(&f.ckpt, &f.items);
    assert!((row.loss_ar - l_ar).abs() < 1e-10);
    assert!((row.loss_db - l_db).abs() < 1e-10);
    assert!((row.total - (ar_weight * l_ar + alpha * l_db)).abs() < 1e-10);
}
