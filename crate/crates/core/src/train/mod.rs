//! Base training of the captioner and LM-head-only unlearning.
//!
//! Both stages share one loop. Each step draws an autoregressive batch from
//! its own seeded stream and, when an unlearning set is present, an
//! unlearning batch from a second stream, then minimizes
//! `ar_weight · L_AR + α · L_DB` where `L_AR` is the mean token NLL of the
//! targets and `L_DB` the mean token log-probability of the hallucinated
//! spans. With `α = 0` the loop consumes randomness exactly as continued base
//! training does.

mod optim;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{optimizer_step, MomentState, OptimizerKind};

use crate::corpus::{Corpus, InstructionRecord};
use crate::error::{Error, Result};
use crate::hash;
use crate::model::{sequence_loss_grad, Checkpoint, Example, Grads, ImagePrefix, TargetToken, Trainable};
use crate::par;
use crate::scene::Scene;
use crate::seeds;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Unlearning batch size; defaults to `batch_size`.
    #[serde(default)]
    pub unlearn_batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// Unlearning factor; only read by [`obliviate`].
    #[serde(default)]
    pub alpha: f64,
    /// Weight of the autoregressive term.
    #[serde(default = "one")]
    pub ar_weight: f64,
    #[serde(default = "all_blocks")]
    pub trainable: Trainable,
    /// Abort when the loss exceeds this multiple of the first step's loss.
    #[serde(default = "divergence")]
    pub divergence_factor: f64,
    /// Stop unlearning once the mean span-token probability drops below this.
    #[serde(default = "span_floor")]
    pub min_span_prob: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn one() -> f64 {
    1.0
}
fn all_blocks() -> Trainable {
    Trainable::ALL
}
fn divergence() -> f64 {
    10.0
}
fn span_floor() -> f64 {
    1e-6
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            learning_rate: default_lr(),
            steps,
            batch_size: default_batch(),
            unlearn_batch_size: None,
            optimizer: OptimizerKind::default(),
            seed,
            alpha: 0.0,
            ar_weight: 1.0,
            trainable: Trainable::ALL,
            divergence_factor: divergence(),
            min_span_prob: span_floor(),
        }
    }

    /// Head-only unlearning defaults: α = 0.02.
    pub fn obliviate(steps: usize, seed: u64) -> Self {
        Self { alpha: 0.02, trainable: Trainable::LM_HEAD, ..Self::new(steps, seed) }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.unlearn_batch_size == Some(0) {
            return Err(Error::Config("steps and batch sizes must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !self.trainable.embeddings && !self.trainable.lm_head {
            return Err(Error::Config("no trainable blocks".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash::hash_json(self)
    }
}

/// One unlearning item: a prediction `y′` with its hallucinated spans.
#[derive(Debug, Clone)]
pub struct UnlearnItem {
    pub scene: Arc<Scene>,
    /// `prompt ++ y′`
    pub tokens: Vec<TokenId>,
    /// Distinct half-open spans, as indices into `tokens`.
    pub spans: Vec<(usize, usize)>,
}

impl UnlearnItem {
    /// Builds an item from a prompt, a prediction and spans indexed into the
    /// prediction. Identical ranges are kept once.
    pub fn new(scene: Arc<Scene>, prompt: &[TokenId], prediction: &[TokenId], spans: &[(usize, usize)]) -> Result<Self> {
        let off = prompt.len();
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for &(s, e) in spans {
            if s >= e || e > prediction.len() {
                return Err(Error::Precondition(format!("span [{s}, {e}) outside prediction of {}", prediction.len())));
            }
            if !ranges.contains(&(s + off, e + off)) {
                ranges.push((s + off, e + off));
            }
        }
        if prompt.is_empty() {
            return Err(Error::Precondition("unlearning item needs a prompt".into()));
        }
        let tokens = prompt.iter().chain(prediction).copied().collect();
        Ok(Self { scene, tokens, spans: ranges })
    }

    pub fn span_tokens(&self) -> usize {
        self.spans.iter().map(|(s, e)| e - s).sum()
    }
}

/// Per-step losses, written as the loss-curve CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss_ar: f64,
    pub loss_db: f64,
    pub mean_span_logp: f64,
    pub total: f64,
}

pub fn curve_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,loss_ar,loss_db,mean_span_logp\n");
    for r in rows {
        writeln!(out, "{},{:.12e},{:.12e},{:.12e}", r.step, r.loss_ar, r.loss_db, r.mean_span_logp).unwrap();
    }
    out
}

pub fn write_curve(path: &Path, rows: &[LossRow]) -> Result<()> {
    crate::corpus::write_text(path, &curve_csv(rows))
}

/// Written as `train_manifest.json` beside a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Input name to git-style blob hash.
    pub inputs: std::collections::BTreeMap<String, String>,
    pub checkpoint_hash: String,
}

impl TrainManifest {
    pub fn new(cfg: &TrainConfig, ckpt: &Checkpoint, inputs: &[(&str, &Path)]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|(name, path)| Ok((name.to_string(), hash::file_hash(path)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            stage: ckpt.meta.stage.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs,
            checkpoint_hash: ckpt.content_hash(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::corpus::write_text(&dir.join("train_manifest.json"), &serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRow>,
    /// Step at which the span-probability guard stopped unlearning.
    pub stopped_early: Option<usize>,
}

/// Draws batches by walking seeded shuffles of `0..n`, reshuffling per epoch.
struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    fn new(n: usize, seed: u64, stream: &str) -> Self {
        Self { rng: seeds::rng(seed, stream, 0), order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn prefix_cache<'a>(scenes: impl Iterator<Item = &'a Arc<Scene>>, ckpt: &Checkpoint) -> Result<HashMap<String, ImagePrefix>> {
    let mut unique: Vec<&Arc<Scene>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for s in scenes {
        if seen.insert(s.id.as_str()) {
            unique.push(s);
        }
    }
    let prefixes = par::try_map(&unique, |s| ImagePrefix::for_scene(s, ckpt))?;
    Ok(unique.into_iter().map(|s| s.id.clone()).zip(prefixes).collect())
}

struct Optimizer {
    embeddings: MomentState,
    lm_head: MomentState,
    bias: MomentState,
}

impl Optimizer {
    fn apply(&mut self, ckpt: &mut Checkpoint, g: &Grads, cfg: &TrainConfig, step: usize) -> Result<()> {
        let (kind, lr) = (cfg.optimizer, cfg.learning_rate);
        if cfg.trainable.embeddings {
            optimizer_step(&mut ckpt.head.embeddings.data, &g.embeddings.data, &mut self.embeddings, kind, lr, step)?;
        }
        if cfg.trainable.lm_head {
            optimizer_step(&mut ckpt.head.lm_head.data, &g.lm_head.data, &mut self.lm_head, kind, lr, step)?;
            optimizer_step(&mut ckpt.head.bias, &g.bias, &mut self.bias, kind, lr, step)?;
        }
        Ok(())
    }
}

/// Mean per-token NLL and gradient of an autoregressive batch.
fn ar_batch(
    ckpt: &Checkpoint,
    prefixes: &HashMap<String, ImagePrefix>,
    batch: &[&Example],
    trainable: Trainable,
) -> Result<(f64, Grads)> {
    let parts = par::try_map(batch, |ex| {
        let (tokens, targets) = ex.sequence();
        sequence_loss_grad(ckpt, &prefixes[&ex.scene.id], &tokens, &targets, trainable)
    })?;
    let n: usize = batch.iter().map(|e| e.target.len()).sum();
    let mut grads = Grads::zeros(&ckpt.config);
    let mut loss = 0.0;
    for p in &parts {
        loss += p.loss;
        grads.add_scaled(&p.grads, 1.0);
    }
    grads.scale(1.0 / n as f64);
    Ok((loss / n as f64, grads))
}

/// Unlearning term of a batch: returns `L_DB` (mean span-token log-prob), the
/// mean per-span log-probability, the mean span-token probability, and the
/// gradient of `L_DB`.
pub fn unlearn_batch(
    ckpt: &Checkpoint,
    prefixes: &HashMap<String, ImagePrefix>,
    batch: &[&UnlearnItem],
    trainable: Trainable,
) -> Result<(f64, f64, f64, Grads)> {
    let parts = par::try_map(batch, |it| {
        let targets: Vec<TargetToken> = it
            .spans
            .iter()
            .flat_map(|&(s, e)| s..e)
            .map(|index| TargetToken { index, weight: -1.0 })
            .collect();
        sequence_loss_grad(ckpt, &prefixes[&it.scene.id], &it.tokens, &targets, trainable)
    })?;
    let n: usize = batch.iter().map(|it| it.span_tokens()).sum();
    let spans: usize = batch.iter().map(|it| it.spans.len()).sum();
    if n == 0 {
        return Err(Error::DegenerateBatch("unlearning batch has no span tokens".into()));
    }
    let mut grads = Grads::zeros(&ckpt.config);
    let (mut sum_logp, mut sum_p) = (0.0, 0.0);
    for p in &parts {
        // weights of -1 make `loss` the plain sum of log-probabilities
        sum_logp += p.loss;
        sum_p += p.log_probs.iter().map(|lp| lp.exp()).sum::<f64>();
        grads.add_scaled(&p.grads, 1.0);
    }
    grads.scale(1.0 / n as f64);
    Ok((sum_logp / n as f64, sum_logp / spans as f64, sum_p / n as f64, grads))
}

fn train_loop(
    init: &Checkpoint,
    ar: &[Example],
    unlearn: &[UnlearnItem],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ar.is_empty() && (unlearn.is_empty() || cfg.ar_weight != 0.0) {
        return Err(Error::Config(format!("{stage}: autoregressive set is empty")));
    }
    let mut ckpt = init.clone();
    let prefixes = prefix_cache(ar.iter().map(|e| &e.scene).chain(unlearn.iter().map(|u| &u.scene)), &ckpt)?;
    let use_db = cfg.alpha > 0.0 && !unlearn.is_empty();
    let use_ar = cfg.ar_weight != 0.0;
    let mut ar_stream = BatchStream::new(ar.len(), cfg.seed, "ar-batches");
    let mut db_stream = BatchStream::new(unlearn.len(), cfg.seed, "unlearn-batches");
    let mut opt = Optimizer {
        embeddings: MomentState::default(),
        lm_head: MomentState::default(),
        bias: MomentState::default(),
    };
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut first_loss: Option<f64> = None;
    let mut stopped_early = None;
    for step in 0..cfg.steps {
        let mut grads = Grads::zeros(&ckpt.config);
        let mut loss_ar = 0.0;
        if use_ar {
            let idx = ar_stream.next(cfg.batch_size);
            let batch: Vec<&Example> = idx.iter().map(|&i| &ar[i]).collect();
            let (l, g) = ar_batch(&ckpt, &prefixes, &batch, cfg.trainable)?;
            loss_ar = l;
            grads.add_scaled(&g, cfg.ar_weight);
        }
        let (mut loss_db, mut span_logp, mut span_p) = (0.0, 0.0, 1.0);
        if use_db {
            let idx = db_stream.next(cfg.unlearn_batch_size.unwrap_or(cfg.batch_size));
            let batch: Vec<&UnlearnItem> = idx.iter().map(|&i| &unlearn[i]).collect();
            let (l, lp, p, g) = unlearn_batch(&ckpt, &prefixes, &batch, cfg.trainable)?;
            (loss_db, span_logp, span_p) = (l, lp, p);
            grads.add_scaled(&g, cfg.alpha);
        }
        let total = cfg.ar_weight * loss_ar + cfg.alpha * loss_db;
        curve.push(LossRow { step, loss_ar, loss_db, mean_span_logp: span_logp, total });
        if use_ar {
            let base = *first_loss.get_or_insert(loss_ar);
            let limit = base * cfg.divergence_factor;
            if !loss_ar.is_finite() || loss_ar > limit {
                return Err(Error::Diverged { step, loss: loss_ar, limit });
            }
        }
        if use_db && span_p < cfg.min_span_prob {
            log::warn!("{stage}: mean span probability {span_p:.3e} below floor at step {step}; stopping");
            stopped_early = Some(step);
            break;
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient(step));
        }
        opt.apply(&mut ckpt, &grads, cfg, step)?;
        if !ckpt.head.is_finite() {
            return Err(Error::NonFiniteGradient(step));
        }
    }
    let parent = init.content_hash();
    ckpt.meta.stage = stage.to_string();
    ckpt.meta.steps = init.meta.steps + curve.len();
    ckpt.meta.train_config_hash = Some(cfg.hash());
    ckpt.meta.parent = Some(parent);
    Ok(TrainOutcome { checkpoint: ckpt, curve, stopped_early })
}

/// Supervised training on captions and QA starting from `init`.
pub fn train_base(init: &Checkpoint, examples: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let cfg = TrainConfig { alpha: 0.0, ..cfg.clone() };
    train_loop(init, examples, &[], &cfg, "base")
}

/// LM-head-only unlearning: minimizes `L_AR + α · L_DB` over the head.
pub fn obliviate(
    ckpt: &Checkpoint,
    unlearn: &[UnlearnItem],
    ar: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.trainable != Trainable::LM_HEAD {
        return Err(Error::Config("obliviate trains the LM head only".into()));
    }
    if unlearn.is_empty() {
        log::warn!("unlearning set is empty; obliviate is a no-op");
        return Ok(TrainOutcome { checkpoint: ckpt.clone(), curve: Vec::new(), stopped_early: None });
    }
    train_loop(ckpt, ar, unlearn, cfg, "obliviate")
}

/// Training examples from instruction records.
pub fn examples_from(corpus: &Corpus) -> Vec<Example> {
    corpus.records.iter().map(|r: &InstructionRecord| example(corpus, r)).collect()
}

pub fn example(corpus: &Corpus, r: &InstructionRecord) -> Example {
    Example { scene: corpus.scene(r).clone(), prompt: r.prompt.clone(), target: r.target.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::Placement;
    use crate::vocab::{ClassId, Vocab, DET, EOS, PERIOD};

    fn fixture() -> (Checkpoint, Vocab, Arc<Scene>) {
        let vocab = Vocab::new(&crate::scene::DEFAULT_CLASSES).unwrap();
        let ckpt = Checkpoint::init(ModelConfig::new(8, 16, vocab.len(), 1)).unwrap();
        let mut s = Scene::empty("m", 8, 4, 0.3);
        s.place(Placement { class: ClassId(5), row: 2, col: 2, height: 3, width: 2 }).unwrap();
        (ckpt, vocab, Arc::new(s))
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::from_toml("steps = 0").is_err());
        assert!(TrainConfig::from_toml("steps = 5\nalpha = -1.0").is_err());
        let c = TrainConfig::from_toml("steps = 5\n[optimizer]\nkind = \"sgd\"").unwrap();
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
        let c = TrainConfig::from_toml("steps = 5\n[trainable]\nembeddings = false\nlm_head = true").unwrap();
        assert_eq!(c.trainable, Trainable::LM_HEAD);
    }

    #[test]
    fn memorizes_single_example() {
        let (ckpt, vocab, scene) = fixture();
        let ex = Example { scene, prompt: vocab.caption_instruction(), target: vec![DET, vocab.class_token(ClassId(5)), PERIOD, EOS] };
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 1, ..TrainConfig::new(300, 3) };
        let out = train_base(&ckpt, std::slice::from_ref(&ex), &cfg).unwrap();
        let (loss, _) = crate::model::loss_and_grads(&[ex], &out.checkpoint, Trainable::ALL).unwrap();
        assert!(loss < 0.01, "loss {loss}");
        assert_eq!(out.checkpoint.backbone_bytes(), ckpt.backbone_bytes());
    }

    #[test]
    fn unlearn_item_deduplicates_identical_ranges() {
        let (_, vocab, scene) = fixture();
        let it = UnlearnItem::new(scene.clone(), &vocab.caption_instruction(), &[DET, 20, PERIOD], &[(0, 2), (0, 2)]).unwrap();
        assert_eq!(it.spans, vec![(3, 5)]);
        assert_eq!(it.span_tokens(), 2);
        assert!(UnlearnItem::new(scene, &[7], &[DET], &[(0, 2)]).is_err());
    }

    #[test]
    fn obliviate_rejects_embedding_training_and_handles_empty_set() {
        let (ckpt, vocab, scene) = fixture();
        let ex = Example { scene, prompt: vocab.caption_instruction(), target: vec![PERIOD, EOS] };
        let cfg = TrainConfig { trainable: Trainable::ALL, ..TrainConfig::obliviate(3, 0) };
        let it = UnlearnItem::new(ex.scene.clone(), &ex.prompt, &[PERIOD], &[(0, 1)]).unwrap();
        assert!(obliviate(&ckpt, &[it], &[ex.clone()], &cfg).is_err());
        let out = obliviate(&ckpt, &[], &[ex], &TrainConfig::obliviate(3, 0)).unwrap();
        assert_eq!(out.checkpoint, ckpt);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn curve_csv_header() {
        let rows = [LossRow { step: 0, loss_ar: 1.0, loss_db: -2.0, mean_span_logp: -4.0, total: 0.96 }];
        let csv = curve_csv(&rows);
        assert!(csv.starts_with("step,loss_ar,loss_db,mean_span_logp\n0,"));
    }
}
