//! Linear probes on hidden states: trained on normal scenes, tested on
//! counterfactual scenes with the target object masked.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus;
use crate::error::{Error, Result};
use crate::eval::decide;
use crate::model::{forward, yes_no_prob, Checkpoint, Matrix, Pooling, TapId};
use crate::par;
use crate::scene::{mask_object, CooccurrenceSpec, Scene};
use crate::svg::{self, Series};
use crate::train::{optimizer_step, MomentState, OptimizerKind};
use crate::vocab::{ClassId, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualSource {
    /// Scenes drawn from a stream the model never saw.
    #[default]
    Fresh,
    /// Masked copies of training scenes.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_target")]
    pub target: String,
    /// Defaults to every tap.
    #[serde(default)]
    pub taps: Option<Vec<TapId>>,
    #[serde(default = "default_poolings")]
    pub poolings: Vec<Pooling>,
    /// Normal scenes for train + validation, half with the target.
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    #[serde(default = "default_cf")]
    pub counterfactuals: usize,
    /// Train share of the normal scenes, as `train : val`.
    #[serde(default = "default_split")]
    pub split: (usize, usize),
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub source: CounterfactualSource,
    #[serde(default)]
    pub seed: u64,
}

fn default_target() -> String {
    "dog".into()
}
fn default_poolings() -> Vec<Pooling> {
    vec![Pooling::Image, Pooling::Text]
}
fn default_scenes() -> usize {
    800
}
fn default_cf() -> usize {
    177
}
fn default_split() -> (usize, usize) {
    (7, 1)
}
fn default_l2() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    0.05
}

impl Default for ProbeConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes < 4 || self.counterfactuals == 0 || self.epochs == 0 {
            return Err(Error::Config("probe needs >= 4 scenes, >= 1 counterfactual and >= 1 epoch".into()));
        }
        if self.split.0 == 0 || self.split.1 == 0 {
            return Err(Error::Config("probe split parts must be >= 1".into()));
        }
        if self.poolings.is_empty() {
            return Err(Error::Config("no poolings".into()));
        }
        Ok(())
    }

    pub fn taps(&self, layers: usize) -> Vec<TapId> {
        self.taps.clone().unwrap_or_else(|| TapId::all(layers))
    }

    pub fn target(&self, vocab: &Vocab) -> Result<ClassId> {
        vocab.class_by_name(&self.target).ok_or_else(|| Error::Config(format!("unknown probe target {:?}", self.target)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct ProbeScenes {
    pub target: ClassId,
    pub train: Vec<Arc<Scene>>,
    pub val: Vec<Arc<Scene>>,
    /// Counterfactual scenes of the target class.
    pub test: Vec<Arc<Scene>>,
}

/// Draws balanced normal scenes and counterfactuals for one target class.
/// With [`CounterfactualSource::Train`], counterfactuals are masked copies of
/// `train_pool` scenes that contain the target.
pub fn probe_scenes(
    spec: &CooccurrenceSpec,
    cfg: &ProbeConfig,
    target: ClassId,
    train_pool: Option<&[Arc<Scene>]>,
) -> Result<ProbeScenes> {
    cfg.validate()?;
    let half = cfg.scenes / 2;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let mut round = 0u64;
    while pos.len() < half || neg.len() < cfg.scenes - half {
        if round > 1000 {
            return Err(Error::Generation(format!("target {} too rare for a balanced probe set", target.0)));
        }
        let chunk = corpus::gen_scenes(spec, 4 * cfg.scenes, cfg.seed.wrapping_add(round), "probe")?;
        for s in chunk {
            let bucket = if s.contains(target) { &mut pos } else { &mut neg };
            bucket.push(Arc::new(s));
        }
        round += 1;
    }
    pos.truncate(half);
    neg.truncate(cfg.scenes - half);
    let n_train = |n: usize| n * cfg.split.0 / (cfg.split.0 + cfg.split.1);
    let (tp, tn) = (n_train(pos.len()), n_train(neg.len()));
    let mut train: Vec<Arc<Scene>> = pos[..tp].iter().chain(&neg[..tn]).cloned().collect();
    let mut val: Vec<Arc<Scene>> = pos[tp..].iter().chain(&neg[tn..]).cloned().collect();
    train.sort_by(|a, b| a.id.cmp(&b.id));
    val.sort_by(|a, b| a.id.cmp(&b.id));

    let mut test = Vec::new();
    match (cfg.source, train_pool) {
        (CounterfactualSource::Train, Some(pool)) => {
            for s in pool.iter().filter(|s| s.contains(target)).take(cfg.counterfactuals) {
                test.push(Arc::new(mask_object(s, target)?));
            }
        }
        (CounterfactualSource::Train, None) => {
            return Err(Error::Config("train-scene counterfactuals need the training scenes".into()))
        }
        (CounterfactualSource::Fresh, _) => {
            let mut round = 0u64;
            while test.len() < cfg.counterfactuals && round <= 1000 {
                let chunk = corpus::gen_scenes(spec, 4 * cfg.counterfactuals, cfg.seed.wrapping_add(round), "probe-cf")?;
                for s in chunk.iter().filter(|s| s.contains(target)) {
                    if test.len() < cfg.counterfactuals {
                        test.push(Arc::new(mask_object(s, target)?));
                    }
                }
                round += 1;
            }
        }
    }
    if test.is_empty() {
        return Err(Error::Generation("no counterfactual scenes".into()));
    }
    Ok(ProbeScenes { target, train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub x: Vec<f64>,
    pub label: bool,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub tap: TapId,
    pub pooling: Pooling,
    pub examples: Vec<ProbeExample>,
}

impl ProbeDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ProbeExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn width(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }
}

/// Pooled tap vectors for every scene, one dataset per valid (tap, pooling).
/// Image-only taps skip text poolings.
pub fn extract_taps(
    ckpt: &Checkpoint,
    scenes: &ProbeScenes,
    question: &[TokenId],
    taps: &[TapId],
    poolings: &[Pooling],
) -> Result<Vec<ProbeDataset>> {
    for t in taps {
        if let TapId::Layer(l) = t {
            if *l == 0 || *l > ckpt.config.layers {
                return Err(Error::Config(format!("unknown tap {t} for a {}-layer model", ckpt.config.layers)));
            }
        }
    }
    let combos: Vec<(TapId, Pooling)> = taps
        .iter()
        .flat_map(|&t| poolings.iter().map(move |&p| (t, p)))
        .filter(|(t, p)| !t.is_image_only() || *p == Pooling::Image)
        .collect();
    let all: Vec<(&Arc<Scene>, Split)> = scenes
        .train
        .iter()
        .map(|s| (s, Split::Train))
        .chain(scenes.val.iter().map(|s| (s, Split::Val)))
        .chain(scenes.test.iter().map(|s| (s, Split::Test)))
        .collect();
    let pooled = par::try_map(&all, |(scene, _)| {
        let out = forward(scene, question, ckpt)?;
        combos.iter().map(|&(t, p)| out.taps.pooled(t, p)).collect::<Result<Vec<_>>>()
    })?;
    Ok(combos
        .iter()
        .enumerate()
        .map(|(k, &(tap, pooling))| ProbeDataset {
            tap,
            pooling,
            examples: all
                .iter()
                .zip(&pooled)
                .map(|((scene, split), xs)| ProbeExample {
                    x: xs[k].clone(),
                    label: scene.contains(scenes.target),
                    split: *split,
                })
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub tap: TapId,
    pub pooling: Pooling,
    /// Row 0 scores "absent", row 1 "present".
    pub weights: Matrix,
    pub bias: [f64; 2],
    /// Inputs are standardized as `(x - shift) / scale` before the linear layer.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub epoch: usize,
    pub val_accuracy: f64,
}

impl ProbeParams {
    pub fn zeros(tap: TapId, pooling: Pooling, width: usize) -> Self {
        Self {
            tap,
            pooling,
            weights: Matrix::zeros(2, width),
            bias: [0.0; 2],
            shift: vec![0.0; width],
            scale: vec![1.0; width],
            epoch: 0,
            val_accuracy: 0.0,
        }
    }

    /// Per-feature mean and standard deviation of `xs`; constant features keep scale 1.
    pub fn standardize_on(&mut self, xs: &[&ProbeExample]) {
        let n = xs.len().max(1) as f64;
        let w = self.weights.cols;
        self.shift = (0..w).map(|j| xs.iter().map(|e| e.x[j]).sum::<f64>() / n).collect();
        self.scale = (0..w)
            .map(|j| {
                let var = xs.iter().map(|e| (e.x[j] - self.shift[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn logits(&self, x: &[f64]) -> [f64; 2] {
        let z = self.weights.matvec(&self.features(x));
        [z[0] + self.bias[0], z[1] + self.bias[1]]
    }

    /// "Present" iff its logit is strictly larger.
    pub fn predict(&self, x: &[f64]) -> bool {
        let z = self.logits(x);
        z[1] > z[0]
    }
}

/// Mean NLL plus `l2/2 · ‖W‖²`, with gradients for weights and bias.
pub fn probe_loss_grad(p: &ProbeParams, xs: &[&ProbeExample], l2: f64) -> (f64, Matrix, [f64; 2]) {
    let mut gw = Matrix::zeros(2, p.weights.cols);
    let mut gb = [0.0; 2];
    let mut loss = 0.0;
    let n = xs.len().max(1) as f64;
    for e in xs {
        let z = p.logits(&e.x);
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        let y = e.label as usize;
        loss -= z[y] - lse;
        let f = p.features(&e.x);
        for k in 0..2 {
            let g = ((z[k] - lse).exp() - (k == y) as u8 as f64) / n;
            gb[k] += g;
            crate::model::axpy(gw.row_mut(k), g, &f);
        }
    }
    loss /= n;
    let sq: f64 = p.weights.data.iter().map(|w| w * w).sum();
    loss += 0.5 * l2 * sq;
    for (g, w) in gw.data.iter_mut().zip(&p.weights.data) {
        *g += l2 * w;
    }
    (loss, gw, gb)
}

fn accuracy<'a>(p: &ProbeParams, xs: impl Iterator<Item = &'a ProbeExample>) -> Option<f64> {
    let (mut right, mut n) = (0usize, 0usize);
    for e in xs {
        n += 1;
        right += (p.predict(&e.x) == e.label) as usize;
    }
    (n > 0).then(|| 100.0 * right as f64 / n as f64)
}

/// Full-batch Adam on the standardized train split; returns the parameters of the epoch
/// with the best validation accuracy (earliest on ties).
pub fn train_probe(data: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeParams> {
    let train: Vec<&ProbeExample> = data.split(Split::Train).collect();
    if !train.iter().any(|e| e.label) || !train.iter().any(|e| !e.label) {
        return Err(Error::Precondition(format!("probe {}/{}: train split needs both labels", data.tap, data.pooling)));
    }
    let mut p = ProbeParams::zeros(data.tap, data.pooling, data.width());
    p.standardize_on(&train);
    let (mut sw, mut sb) = (MomentState::default(), MomentState::default());
    let mut best: Option<ProbeParams> = None;
    for epoch in 1..=cfg.epochs {
        let (_, gw, gb) = probe_loss_grad(&p, &train, cfg.l2);
        optimizer_step(&mut p.weights.data, &gw.data, &mut sw, OptimizerKind::default(), cfg.learning_rate, epoch)?;
        optimizer_step(&mut p.bias, &gb, &mut sb, OptimizerKind::default(), cfg.learning_rate, epoch)?;
        let val = accuracy(&p, data.split(Split::Val)).or_else(|| accuracy(&p, train.iter().copied())).unwrap_or(0.0);
        if best.as_ref().is_none_or(|b| val > b.val_accuracy) {
            best = Some(ProbeParams { epoch, val_accuracy: val, ..p.clone() });
        }
    }
    Ok(best.expect("epochs >= 1"))
}

/// Percentage of test examples classified "absent".
pub fn eval_probe(p: &ProbeParams, data: &ProbeDataset) -> Result<f64> {
    let test: Vec<&ProbeExample> = data.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Precondition("probe test split is empty".into()));
    }
    let absent = test.iter().filter(|e| !p.predict(&e.x)).count();
    if absent == 0 || absent == test.len() {
        log::warn!("probe {}/{} gives a constant answer on the test split", p.tap, p.pooling);
    }
    Ok(100.0 * absent as f64 / test.len() as f64)
}

/// Percentage of counterfactual scenes answered "no" by the model itself.
pub fn generation_accuracy(ckpt: &Checkpoint, scenes: &[Arc<Scene>], question: &[TokenId]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Precondition("no counterfactual scenes".into()));
    }
    let answers = par::try_map(scenes, |s| yes_no_prob(s, question, ckpt).map(|(y, n)| !decide(y, n)))?;
    Ok(100.0 * answers.iter().filter(|&&no| no).count() as f64 / scenes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub tap: TapId,
    pub pooling: Pooling,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: String,
    pub counterfactuals: usize,
    pub rows: Vec<ProbeRow>,
    pub generation_accuracy: f64,
}

impl ProbeReport {
    pub fn best_probe(&self) -> Option<&ProbeRow> {
        self.rows.iter().fold(None, |b: Option<&ProbeRow>, r| match b {
            Some(b) if b.test_accuracy >= r.test_accuracy => Some(b),
            _ => Some(r),
        })
    }

    pub fn gap(&self) -> Option<f64> {
        self.best_probe().map(|b| b.test_accuracy - self.generation_accuracy)
    }

    /// Accuracy per tap, one line per pooling, generation accuracy dashed.
    pub fn svg(&self) -> String {
        let mut taps: Vec<TapId> = self.rows.iter().map(|r| r.tap).collect();
        taps.sort();
        taps.dedup();
        let mut poolings: Vec<Pooling> = self.rows.iter().map(|r| r.pooling).collect();
        poolings.sort();
        poolings.dedup();
        let series: Vec<Series> = poolings
            .iter()
            .map(|&p| Series {
                name: format!("probe ({p})"),
                points: taps
                    .iter()
                    .map(|&t| self.rows.iter().find(|r| r.tap == t && r.pooling == p).map(|r| r.test_accuracy))
                    .collect(),
            })
            .collect();
        let labels: Vec<String> = taps.iter().map(|t| t.to_string()).collect();
        svg::line_chart(
            &format!("Counterfactual accuracy, target {}", self.target),
            "accuracy (%)",
            &labels,
            &series,
            Some(("generation", self.generation_accuracy)),
            Some((0.0, 100.0)),
        )
    }
}

/// Extracts, trains and evaluates every probe and the generation baseline.
pub fn run_probes(ckpt: &Checkpoint, scenes: &ProbeScenes, vocab: &Vocab, cfg: &ProbeConfig) -> Result<(ProbeReport, Vec<ProbeParams>)> {
    let question = vocab.question(scenes.target);
    let datasets = extract_taps(ckpt, scenes, &question, &cfg.taps(ckpt.config.layers), &cfg.poolings)?;
    let trained = par::try_map(&datasets, |d| {
        let p = train_probe(d, cfg)?;
        let acc = eval_probe(&p, d)?;
        Ok::<_, Error>((p, acc))
    })?;
    let rows = trained
        .iter()
        .map(|(p, acc)| ProbeRow { tap: p.tap, pooling: p.pooling, val_accuracy: p.val_accuracy, test_accuracy: *acc })
        .collect();
    let report = ProbeReport {
        target: vocab.class_name(scenes.target).to_string(),
        counterfactuals: scenes.test.len(),
        rows,
        generation_accuracy: generation_accuracy(ckpt, &scenes.test, &question)?,
    };
    Ok((report, trained.into_iter().map(|(p, _)| p).collect()))
}

pub fn write_datasets(path: &Path, datasets: &[ProbeDataset]) -> Result<()> {
    let mut out = String::new();
    for d in datasets {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    corpus::write_text(path, &out)
}

pub fn read_datasets(path: &Path) -> Result<Vec<ProbeDataset>> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(&origin, i + 1, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(x: Vec<f64>, label: bool, split: Split) -> ProbeExample {
        ProbeExample { x, label, split }
    }

    #[test]
    fn separable_pair_is_learned() {
        let d = ProbeDataset {
            tap: TapId::Projection,
            pooling: Pooling::Image,
            examples: vec![ex(vec![1.0, 0.0], true, Split::Train), ex(vec![-1.0, 0.0], false, Split::Train)],
        };
        let p = train_probe(&d, &ProbeConfig::default()).unwrap();
        assert_eq!(p.val_accuracy, 100.0);
        assert!(p.predict(&[1.0, 0.0]) && !p.predict(&[-1.0, 0.0]));
    }

    #[test]
    fn single_label_is_rejected() {
        let d = ProbeDataset {
            tap: TapId::Projection,
            pooling: Pooling::Image,
            examples: vec![ex(vec![1.0], true, Split::Train)],
        };
        assert!(train_probe(&d, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn constant_probes() {
        let d = ProbeDataset {
            tap: TapId::Layer(1),
            pooling: Pooling::Text,
            examples: vec![ex(vec![0.3], false, Split::Test), ex(vec![-2.0], false, Split::Test)],
        };
        let mut p = ProbeParams::zeros(TapId::Layer(1), Pooling::Text, 1);
        p.bias = [1.0, 0.0];
        assert_eq!(eval_probe(&p, &d).unwrap(), 100.0);
        p.bias = [0.0, 1.0];
        assert_eq!(eval_probe(&p, &d).unwrap(), 0.0);
    }

    #[test]
    fn default_config() {
        let c = ProbeConfig::default();
        assert_eq!((c.split, c.counterfactuals, c.epochs, c.target.as_str()), ((7, 1), 177, 200, "dog"));
    }
}
