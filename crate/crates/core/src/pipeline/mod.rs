//! End-to-end staging: corpus, base training, harvest, unlearning,
//! evaluation, probes, logit audit, sweeps and the report.
//!
//! Every stage is keyed by a hash of its config snapshot and input files.
//! With `resume`, a stage whose key matches an intact manifest entry is
//! skipped.

pub mod manifest;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audit::{logit_audit, AuditConfig};
use crate::corpus::{corpus_from_scenes, gen_corpus, gen_popev2, gen_scenes, write_text, Benchmark, Corpus, QaOptions};
use crate::error::{Error, Result};
use crate::eval::{eval_benchmark, EvalReport};
use crate::harvest::{build_unlearn_set, reinfer, InferenceRecord, UnlearnSet, DEFAULT_MAX_LEN};
use crate::hash;
use crate::metrics::{chair_metrics, ChairReport, ConfusionCounts, PopeMetrics};
use crate::model::{Checkpoint, Example, ModelConfig, Trainable};
use crate::par;
use crate::probe::{probe_scenes, run_probes, ProbeConfig};
use crate::scene::CooccurrenceSpec;
use crate::seeds;
use crate::train::{self, examples_from, write_curve, OptimizerKind, TrainConfig, TrainManifest, TrainOutcome};

pub use manifest::{Manifest, ManifestEntry, Status};
pub use report::{emit_report, Artifacts};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "OBLIVIATE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub scenes: usize,
    pub qa_per_scene: usize,
    pub positive_rate: f64,
    /// Held-out scenes the benchmark pairs are drawn from.
    pub bench_scenes: usize,
    pub bench_pairs: usize,
    /// Held-out captions for CHAIR-style scoring.
    pub heldout_captions: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let qa = QaOptions::default();
        Self {
            scenes: 2000,
            qa_per_scene: qa.per_scene,
            positive_rate: qa.positive_rate,
            bench_scenes: 1200,
            bench_pairs: 400,
            heldout_captions: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub visual_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub mixing_scale: f64,
    pub embedding_scale: f64,
    pub mask_offset: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 64, 0);
        Self {
            visual_dim: m.visual_dim,
            hidden_dim: m.hidden_dim,
            layers: m.layers,
            mixing_scale: m.mixing_scale,
            embedding_scale: m.embedding_scale,
            mask_offset: m.mask_offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for BaseSection {
    fn default() -> Self {
        Self { steps: 16_000, learning_rate: 1e-2, batch_size: 32, optimizer: OptimizerKind::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestSection {
    /// Training captions re-inferred for the unlearning set.
    pub captions: usize,
    pub max_len: usize,
}

impl Default for HarvestSection {
    fn default() -> Self {
        Self { captions: 1000, max_len: DEFAULT_MAX_LEN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObliviateSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub unlearn_batch_size: Option<usize>,
    pub alpha: f64,
    pub ar_weight: f64,
    /// AR examples per unlearning record.
    pub ratio: usize,
    pub min_span_prob: f64,
}

impl Default for ObliviateSection {
    fn default() -> Self {
        let t = TrainConfig::obliviate(1, 0);
        Self {
            steps: 1500,
            learning_rate: 5e-3,
            batch_size: t.batch_size,
            unlearn_batch_size: None,
            alpha: t.alpha,
            ar_weight: t.ar_weight,
            ratio: 4,
            min_span_prob: t.min_span_prob,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub ratios: Vec<usize>,
    /// Caption budgets for the harvest subset.
    pub caption_counts: Vec<usize>,
    /// Unlearning seeds per branch; empty means the global seed.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Co-occurrence spec file; the bundled biased spec when absent.
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub base: BaseSection,
    #[serde(default)]
    pub harvest: HarvestSection,
    #[serde(default)]
    pub obliviate: ObliviateSection,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_seed() -> u64 {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/desk")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    /// `desk` is the default; `full` runs 12k scenes with 1:3 caption to QA
    /// and 1:4 unlearning to AR data.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "desk" => {}
            "full" => {
                c.out_dir = PathBuf::from("runs/full");
                c.corpus.scenes = 12_000;
                c.corpus.qa_per_scene = 3;
                c.harvest.captions = 12_000;
                c.obliviate.ratio = 4;
                c.sweep.alphas = vec![0.01, 0.02, 0.05];
                c.sweep.ratios = vec![1, 4, 8];
            }
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        }
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; a relative spec path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        if let (Some(spec), Some(dir)) = (&c.spec, path.parent()) {
            if spec.is_relative() {
                c.spec = Some(dir.join(spec));
            }
        }
        Ok(c)
    }

    /// Applies the output-directory environment override.
    pub fn with_env_override(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.scenes == 0 || c.bench_pairs == 0 || c.heldout_captions == 0 || c.qa_per_scene == 0 {
            return Err(Error::Config("corpus counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&c.positive_rate) {
            return Err(Error::Config("positive_rate must lie in [0, 1]".into()));
        }
        if self.harvest.captions == 0 || self.harvest.max_len == 0 {
            return Err(Error::Config("harvest captions and max_len must be >= 1".into()));
        }
        if self.obliviate.ratio == 0 || self.sweep.ratios.contains(&0) {
            return Err(Error::Config("AR ratio must be >= 1".into()));
        }
        if self.sweep.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("sweep alphas must be >= 0".into()));
        }
        if self.sweep.caption_counts.contains(&0) {
            return Err(Error::Config("caption counts must be >= 1".into()));
        }
        self.base_train().validate()?;
        self.obliviate_train(self.obliviate.alpha, self.seed).validate()?;
        self.probe.validate()
    }

    pub fn load_spec(&self) -> Result<CooccurrenceSpec> {
        match &self.spec {
            Some(p) => CooccurrenceSpec::load(p),
            None => Ok(CooccurrenceSpec::default_biased()),
        }
    }

    pub fn qa_options(&self) -> QaOptions {
        QaOptions { per_scene: self.corpus.qa_per_scene, positive_rate: self.corpus.positive_rate }
    }

    pub fn model_config(&self, spec: &CooccurrenceSpec) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            visual_dim: m.visual_dim,
            hidden_dim: m.hidden_dim,
            layers: m.layers,
            mixing_scale: m.mixing_scale,
            embedding_scale: m.embedding_scale,
            mask_offset: m.mask_offset,
            ..ModelConfig::new(spec.grid_size, spec.class_count(), spec.vocab().len(), self.seed)
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        let b = &self.base;
        TrainConfig {
            learning_rate: b.learning_rate,
            batch_size: b.batch_size,
            optimizer: b.optimizer,
            ..TrainConfig::new(b.steps, self.seed)
        }
    }

    pub fn obliviate_train(&self, alpha: f64, seed: u64) -> TrainConfig {
        let o = &self.obliviate;
        TrainConfig {
            learning_rate: o.learning_rate,
            batch_size: o.batch_size,
            unlearn_batch_size: o.unlearn_batch_size,
            alpha,
            ar_weight: o.ar_weight,
            trainable: Trainable::LM_HEAD,
            min_span_prob: o.min_span_prob,
            ..TrainConfig::new(o.steps, seed)
        }
    }

    pub fn hash(&self) -> String {
        hash::hash_json(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Corpus,
    Base,
    Harvest,
    Obliviate,
    Eval,
    Probe,
    Audit,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Corpus,
        Stage::Base,
        Stage::Harvest,
        Stage::Obliviate,
        Stage::Eval,
        Stage::Probe,
        Stage::Audit,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Base => "base",
            Stage::Harvest => "harvest",
            Stage::Obliviate => "obliviate",
            Stage::Eval => "eval",
            Stage::Probe => "probe",
            Stage::Audit => "audit",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Corpus => &[],
            Stage::Base => &[Stage::Corpus],
            Stage::Harvest => &[Stage::Base],
            Stage::Obliviate => &[Stage::Harvest],
            Stage::Eval => &[Stage::Obliviate],
            Stage::Probe | Stage::Audit => &[Stage::Base],
            Stage::Sweep => &[Stage::Harvest],
            Stage::Report => &[Stage::Eval, Stage::Probe, Stage::Audit, Stage::Sweep],
        }
    }

    /// This stage and everything it depends on, in run order.
    pub fn closure(self) -> Vec<Stage> {
        let mut need = vec![self];
        let mut i = 0;
        while i < need.len() {
            for d in need[i].deps() {
                if !need.contains(d) {
                    need.push(*d);
                }
            }
            i += 1;
        }
        need.sort();
        need
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Run only this stage and its dependencies.
    pub stage: Option<Stage>,
    /// Skip stages whose key matches an intact manifest entry.
    pub resume: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Relative artifact paths.
pub mod paths {
    pub const CAPTIONS: &str = "corpus/captions.jsonl";
    pub const QA: &str = "corpus/qa.jsonl";
    pub const BENCH: &str = "corpus/bench.jsonl";
    pub const HELDOUT: &str = "corpus/heldout.jsonl";
    pub const BASE_CKPT: &str = "base/model.ckpt";
    pub const UNLEARN: &str = "harvest/unlearn.jsonl";
    pub const OBLIVIATE_CKPT: &str = "obliviate/model.ckpt";
    pub const PROBE: &str = "probe/report.json";
    pub const AUDIT: &str = "audit/audit.json";
    pub const SWEEP: &str = "sweep/results.json";
    pub const REPORT: &str = "report/report.md";
}

/// Benchmark and caption metrics of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub metrics: PopeMetrics,
    pub chair: ChairReport,
}

/// Runs the benchmark and held-out captioning for `ckpt`, writing
/// `report.json`, `items.jsonl`, `chair.json` and `captions.jsonl` to `dir`.
pub fn evaluate(ckpt: &Checkpoint, bench: &Benchmark, heldout: &Corpus, max_len: usize, dir: &Path) -> Result<Evaluation> {
    let report = eval_benchmark(ckpt, bench)?;
    report.write(dir)?;
    let inference = reinfer(ckpt, heldout, max_len)?;
    let chair = chair_metrics(&inference, &heldout.vocab()?)?;
    write_text(&dir.join("chair.json"), &serde_json::to_string_pretty(&chair)?)?;
    write_text(&dir.join("captions.jsonl"), &inference_jsonl(&inference)?)?;
    Ok(Evaluation { counts: report.counts, metrics: report.metrics, chair })
}

pub fn inference_jsonl(records: &[InferenceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// AR set of `ratio` examples per unlearning record: the ground-truth
/// captions of the unlearning records first, then a seeded draw from the
/// general instruction pool.
pub fn ar_subset(set: &UnlearnSet, examples: &[Example], ratio: usize, seed: u64) -> Vec<Example> {
    let total = (ratio * set.records.len()).max(1);
    let mut out: Vec<Example> = set
        .records
        .iter()
        .map(|r| Example {
            scene: set.scene(r).clone(),
            prompt: r.inference.instruction.clone(),
            target: r.inference.ground_truth.clone(),
        })
        .take(total)
        .collect();
    let mut pool = examples.to_vec();
    pool.shuffle(&mut seeds::rng(seed, "ar-pool", 0));
    out.extend(pool.into_iter().take(total - out.len()));
    out
}

/// Unlearning from `base` on `set` with its AR set drawn from `examples`.
pub fn run_obliviate(
    base: &Checkpoint,
    set: &UnlearnSet,
    examples: &[Example],
    ratio: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let ar = ar_subset(set, examples, ratio, cfg.seed);
    train::obliviate(base, &set.items()?, &ar, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub alpha: f64,
    pub ratio: usize,
    pub captions: usize,
    pub unlearn_records: usize,
    pub dir: String,
    pub checkpoint_hash: String,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Branch {
    axis: &'static str,
    value: f64,
    alpha: f64,
    ratio: usize,
    captions: usize,
    seed: u64,
}

impl Branch {
    fn dir(&self) -> String {
        format!("sweep/{}-{}-s{}", self.axis, self.value, self.seed)
    }
}

fn branches(cfg: &ExperimentConfig) -> Vec<Branch> {
    let o = &cfg.obliviate;
    let seeds = if cfg.sweep.seeds.is_empty() { vec![cfg.seed] } else { cfg.sweep.seeds.clone() };
    let base = Branch { axis: "", value: 0.0, alpha: o.alpha, ratio: o.ratio, captions: cfg.harvest.captions, seed: 0 };
    let mut out = Vec::new();
    for &seed in &seeds {
        for &alpha in &cfg.sweep.alphas {
            out.push(Branch { axis: "alpha", value: alpha, alpha, seed, ..base });
        }
        for &ratio in &cfg.sweep.ratios {
            out.push(Branch { axis: "ratio", value: ratio as f64, ratio, seed, ..base });
        }
        for &captions in &cfg.sweep.caption_counts {
            out.push(Branch { axis: "captions", value: captions as f64, captions, seed, ..base });
        }
    }
    out
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    root: PathBuf,
    spec: CooccurrenceSpec,
    manifest: Manifest,
    resume: bool,
    summary: RunSummary,
}

impl Runner<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn input_hashes(&self, inputs: &[&str]) -> Result<BTreeMap<String, String>> {
        inputs.iter().map(|rel| Ok((rel.to_string(), hash::file_hash(&self.path(rel))?))).collect()
    }

    /// Runs `body` unless a matching intact entry exists. `body` returns the
    /// relative paths it wrote.
    fn stage(
        &mut self,
        stage: Stage,
        inputs: &[&str],
        snapshot: serde_json::Value,
        body: impl FnOnce(&Self) -> Result<Vec<String>>,
    ) -> Result<()> {
        let name = stage.name();
        let input_hashes = self.input_hashes(inputs).map_err(|e| Error::Stage { stage: name.into(), source: Box::new(e) })?;
        let key = hash::hash_json(&(name, &snapshot, &input_hashes));
        if self.resume && self.manifest.reusable(&key, &self.root).is_some() {
            log::info!("stage {name}: up to date, skipped");
            self.summary.skipped.push(stage);
            return Ok(());
        }
        log::info!("stage {name}: running");
        let t0 = Instant::now();
        let result = body(self).and_then(|outs| {
            outs.iter().map(|rel| Ok((rel.clone(), hash::file_hash(&self.path(rel))?))).collect::<Result<BTreeMap<_, _>>>()
        });
        let wall_ms = t0.elapsed().as_millis() as u64;
        let (status, outputs, error) = match &result {
            Ok(outs) => (Status::Ok, outs.clone(), None),
            Err(e) => (Status::Failed, BTreeMap::new(), Some(e.to_string())),
        };
        self.manifest.append(ManifestEntry {
            stage: name.into(),
            key,
            status,
            inputs: input_hashes,
            outputs,
            wall_ms,
            config: snapshot,
            error,
        })?;
        match result {
            Ok(_) => {
                log::info!("stage {name}: done in {wall_ms} ms");
                self.summary.ran.push(stage);
                Ok(())
            }
            Err(e) => Err(Error::Stage { stage: name.into(), source: Box::new(e) }),
        }
    }

    fn examples(&self) -> Result<Vec<Example>> {
        let mut ex = examples_from(&Corpus::read(&self.path(paths::CAPTIONS))?);
        ex.extend(examples_from(&Corpus::read(&self.path(paths::QA))?));
        Ok(ex)
    }

    fn run(&mut self, stage: Stage) -> Result<()> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let spec_hash = self.spec.hash();
        match stage {
            Stage::Corpus => {
                let snap = snapshot(&(seed, &spec_hash, &cfg.corpus))?;
                self.stage(stage, &[], snap, |r| {
                    let (caps, qa) = gen_corpus(&r.spec, cfg.corpus.scenes, seed, &cfg.qa_options())?;
                    caps.write(&r.path(paths::CAPTIONS))?;
                    qa.write(&r.path(paths::QA))?;
                    let held: Vec<_> =
                        gen_scenes(&r.spec, cfg.corpus.bench_scenes, seed, "bench")?.into_iter().map(Into::into).collect();
                    gen_popev2(&held, &r.spec, seed, cfg.corpus.bench_pairs)?.write(&r.path(paths::BENCH))?;
                    let heldout = gen_scenes(&r.spec, cfg.corpus.heldout_captions, seed, "heldout")?;
                    corpus_from_scenes(&r.spec, heldout, seed, &QaOptions::default()).0.write(&r.path(paths::HELDOUT))?;
                    Ok(vec![paths::CAPTIONS.into(), paths::QA.into(), paths::BENCH.into(), paths::HELDOUT.into()])
                })
            }
            Stage::Base => {
                let model = cfg.model_config(&self.spec);
                let tc = cfg.base_train();
                let snap = snapshot(&(&model, &tc))?;
                self.stage(stage, &[paths::CAPTIONS, paths::QA], snap, |r| {
                    let init = Checkpoint::init(model)?;
                    let out = train::train_base(&init, &r.examples()?, &tc)?;
                    out.checkpoint.save(&r.path(paths::BASE_CKPT))?;
                    write_curve(&r.path("base/curve.csv"), &out.curve)?;
                    TrainManifest::new(&tc, &out.checkpoint, &[
                        ("captions", &r.path(paths::CAPTIONS)),
                        ("qa", &r.path(paths::QA)),
                    ])?
                    .write(&r.path("base"))?;
                    Ok(vec![paths::BASE_CKPT.into(), "base/curve.csv".into(), "base/train_manifest.json".into()])
                })
            }
            Stage::Harvest => {
                let snap = snapshot(&cfg.harvest)?;
                self.stage(stage, &[paths::BASE_CKPT, paths::CAPTIONS], snap, |r| {
                    let base = Checkpoint::load(&r.path(paths::BASE_CKPT))?;
                    let caps = Corpus::read(&r.path(paths::CAPTIONS))?;
                    let sub = caps.subset("captions", caps.records.iter().take(cfg.harvest.captions).cloned().collect());
                    let inference = reinfer(&base, &sub, cfg.harvest.max_len)?;
                    let set = build_unlearn_set(&inference, &sub)?;
                    log::info!("harvest: {:?}", set.stats);
                    set.write(&r.path(paths::UNLEARN))?;
                    Ok(vec![paths::UNLEARN.into(), format!("{}.stats.json", paths::UNLEARN)])
                })
            }
            Stage::Obliviate => {
                let tc = cfg.obliviate_train(cfg.obliviate.alpha, seed);
                let snap = snapshot(&(&tc, cfg.obliviate.ratio))?;
                let inputs = [paths::BASE_CKPT, paths::UNLEARN, paths::CAPTIONS, paths::QA];
                self.stage(stage, &inputs, snap, |r| {
                    let base = Checkpoint::load(&r.path(paths::BASE_CKPT))?;
                    let set = UnlearnSet::read(&r.path(paths::UNLEARN))?;
                    let out = run_obliviate(&base, &set, &r.examples()?, cfg.obliviate.ratio, &tc)?;
                    out.checkpoint.save(&r.path(paths::OBLIVIATE_CKPT))?;
                    write_curve(&r.path("obliviate/curve.csv"), &out.curve)?;
                    let named: Vec<(&str, PathBuf)> = inputs.iter().map(|p| (*p, r.path(p))).collect();
                    let named: Vec<(&str, &Path)> = named.iter().map(|(n, p)| (*n, p.as_path())).collect();
                    TrainManifest::new(&tc, &out.checkpoint, &named)?.write(&r.path("obliviate"))?;
                    Ok(vec![paths::OBLIVIATE_CKPT.into(), "obliviate/curve.csv".into(), "obliviate/train_manifest.json".into()])
                })
            }
            Stage::Eval => {
                let snap = snapshot(&cfg.harvest.max_len)?;
                let inputs = [paths::BASE_CKPT, paths::OBLIVIATE_CKPT, paths::BENCH, paths::HELDOUT];
                self.stage(stage, &inputs, snap, |r| {
                    let bench = Benchmark::read(&r.path(paths::BENCH))?;
                    let heldout = Corpus::read(&r.path(paths::HELDOUT))?;
                    let mut outs = Vec::new();
                    for (name, ckpt) in [("base", paths::BASE_CKPT), ("obliviate", paths::OBLIVIATE_CKPT)] {
                        let ck = Checkpoint::load(&r.path(ckpt))?;
                        evaluate(&ck, &bench, &heldout, cfg.harvest.max_len, &r.path(&format!("eval/{name}")))?;
                        for f in ["report.json", "items.jsonl", "chair.json", "captions.jsonl"] {
                            outs.push(format!("eval/{name}/{f}"));
                        }
                    }
                    Ok(outs)
                })
            }
            Stage::Probe => {
                let pc = ProbeConfig { seed, ..cfg.probe.clone() };
                let snap = snapshot(&(&spec_hash, &pc))?;
                self.stage(stage, &[paths::BASE_CKPT], snap, |r| {
                    let base = Checkpoint::load(&r.path(paths::BASE_CKPT))?;
                    let vocab = r.spec.vocab();
                    let scenes = probe_scenes(&r.spec, &pc, pc.target(&vocab)?, None)?;
                    let (report, params) = run_probes(&base, &scenes, &vocab, &pc)?;
                    write_text(&r.path(paths::PROBE), &serde_json::to_string_pretty(&report)?)?;
                    write_text(&r.path("probe/probes.json"), &serde_json::to_string(&params)?)?;
                    write_text(&r.path("probe/accuracy.svg"), &report.svg())?;
                    Ok(vec![paths::PROBE.into(), "probe/probes.json".into(), "probe/accuracy.svg".into()])
                })
            }
            Stage::Audit => {
                let snap = snapshot(&(&spec_hash, &cfg.audit, seed))?;
                self.stage(stage, &[paths::BASE_CKPT], snap, |r| {
                    let base = Checkpoint::load(&r.path(paths::BASE_CKPT))?;
                    logit_audit(&base, &r.spec, &cfg.audit, seed)?.write(&r.path("audit"))?;
                    Ok(vec![paths::AUDIT.into(), "audit/audit.svg".into()])
                })
            }
            Stage::Sweep => {
                let snap = snapshot(&(&cfg.sweep, &cfg.obliviate, cfg.harvest.max_len, cfg.harvest.captions))?;
                let inputs = [paths::BASE_CKPT, paths::UNLEARN, paths::CAPTIONS, paths::QA, paths::BENCH, paths::HELDOUT];
                self.stage(stage, &inputs, snap, |r| r.sweep())
            }
            Stage::Report => {
                let inputs: Vec<&str> = [paths::PROBE, paths::AUDIT, paths::SWEEP, "eval/base/report.json", "eval/obliviate/report.json"]
                    .into_iter()
                    .filter(|p| self.path(p).exists())
                    .collect();
                self.stage(stage, &inputs, snapshot(&())?, |r| {
                    let files = emit_report(&r.root)?;
                    Ok(files)
                })
            }
        }
    }

    fn sweep(&self) -> Result<Vec<String>> {
        let cfg = self.cfg;
        let base = Checkpoint::load(&self.path(paths::BASE_CKPT))?;
        let set = UnlearnSet::read(&self.path(paths::UNLEARN))?;
        let examples = self.examples()?;
        let bench = Benchmark::read(&self.path(paths::BENCH))?;
        let heldout = Corpus::read(&self.path(paths::HELDOUT))?;
        let rows = par::try_map(&branches(cfg), |b| {
            let subset = set.within_captions(b.captions);
            let tc = cfg.obliviate_train(b.alpha, b.seed);
            let out = run_obliviate(&base, &subset, &examples, b.ratio, &tc)?;
            let dir = b.dir();
            out.checkpoint.save(&self.path(&format!("{dir}/model.ckpt")))?;
            write_curve(&self.path(&format!("{dir}/curve.csv")), &out.curve)?;
            let eval = evaluate(&out.checkpoint, &bench, &heldout, cfg.harvest.max_len, &self.path(&dir))?;
            Ok::<_, Error>(SweepRow {
                axis: b.axis.into(),
                value: b.value,
                seed: b.seed,
                alpha: b.alpha,
                ratio: b.ratio,
                captions: b.captions,
                unlearn_records: subset.records.len(),
                checkpoint_hash: out.checkpoint.content_hash(),
                dir,
                eval,
            })
        })?;
        write_text(&self.path(paths::SWEEP), &serde_json::to_string_pretty(&rows)?)?;
        let mut outs = vec![paths::SWEEP.to_string()];
        for r in &rows {
            for f in ["model.ckpt", "curve.csv", "report.json", "items.jsonl", "chair.json", "captions.jsonl"] {
                outs.push(format!("{}/{f}", r.dir));
            }
        }
        Ok(outs)
    }
}

fn snapshot<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

/// Runs the requested stages in dependency order and returns what ran.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let spec = cfg.load_spec()?;
    let root = cfg.out_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    write_text(&root.join("config.toml"), &toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?)?;
    let manifest = Manifest::open(&root)?;
    let mut runner = Runner { cfg, root, spec, manifest, resume: opts.resume, summary: RunSummary::default() };
    let stages = match opts.stage {
        Some(s) => s.closure(),
        None => Stage::ALL.to_vec(),
    };
    for s in stages {
        runner.run(s)?;
    }
    Ok(runner.summary)
}

/// Reads an eval directory written by [`evaluate`].
pub fn read_evaluation(dir: &Path) -> Result<Evaluation> {
    let report = EvalReport::read(dir)?;
    let path = dir.join("chair.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Evaluation { counts: report.counts, metrics: report.metrics, chair: serde_json::from_str(&text)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[obliviate]\nratio = 0").is_err());
        ExperimentConfig::preset("full").unwrap().validate().unwrap();
    }

    #[test]
    fn stage_closure_is_ordered() {
        assert_eq!(Stage::Eval.closure(), vec![Stage::Corpus, Stage::Base, Stage::Harvest, Stage::Obliviate, Stage::Eval]);
        assert_eq!(Stage::Report.closure(), Stage::ALL.to_vec());
        assert_eq!("audit".parse::<Stage>().unwrap(), Stage::Audit);
    }

    #[test]
    fn branch_directories_are_distinct() {
        let mut c = ExperimentConfig::default();
        c.sweep = SweepSection { alphas: vec![0.01, 0.02], ratios: vec![1, 4], caption_counts: vec![125], seeds: vec![1, 2] };
        let b = branches(&c);
        assert_eq!(b.len(), 10);
        let mut dirs: Vec<String> = b.iter().map(|b| b.dir()).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), 10);
    }
}
