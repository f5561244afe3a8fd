use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use obliviate::audit::{logit_audit, AuditConfig};
use obliviate::corpus::{corpus_from_scenes, gen_corpus, gen_popev2, gen_scenes, write_text, Benchmark, Corpus, QaOptions};
use obliviate::harvest::{build_unlearn_set, reinfer, UnlearnSet, DEFAULT_MAX_LEN};
use obliviate::model::Checkpoint;
use obliviate::pipeline::{self, evaluate, run_pipeline, ExperimentConfig, RunOptions, Stage};
use obliviate::probe::{self, ProbeConfig, ProbeReport, ProbeRow};
use obliviate::scene::CooccurrenceSpec;
use obliviate::train::{self, examples_from, write_curve, TrainConfig, TrainManifest};
use obliviate::{Error, Result};

#[derive(Parser)]
#[command(name = "obliviate", version, about = "Biased toy captioner workbench with LM-head unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Caption and QA corpora.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Paired counterfactual benchmark.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Initialize or inspect checkpoints.
    Model {
        #[command(subcommand)]
        cmd: ModelCmd,
    },
    /// Base training and unlearning.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Re-infer captions and collect hallucinated spans.
    Harvest {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first N caption records.
        #[arg(long)]
        captions: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Benchmark metrics, plus CHAIR when held-out captions are given.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Linear probes on hidden states versus the model's own answers.
    Probe {
        #[command(subcommand)]
        cmd: ProbeCmd,
    },
    /// Caption logits of absent co-occurring vs unrelated classes.
    Audit {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline.
    Run {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset: desk or full.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Re-render the report of a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct SpecArg {
    /// Co-occurrence spec; the bundled biased spec by default.
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl SpecArg {
    fn load(&self) -> Result<CooccurrenceSpec> {
        match &self.spec {
            Some(p) => CooccurrenceSpec::load(p),
            None => Ok(CooccurrenceSpec::default_biased()),
        }
    }
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Writes `captions.jsonl` and `qa.jsonl` into the output directory.
    Gen {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        qa_per_scene: Option<usize>,
        #[arg(long)]
        positive_rate: Option<f64>,
        /// Scene stream name; use a distinct one for held-out data.
        #[arg(long, default_value = "corpus")]
        stream: String,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Draws `count` pairs from fresh held-out scenes.
    Gen {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Held-out scenes to draw from; defaults to three per pair.
        #[arg(long)]
        scenes: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    Init {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hidden_dim: Option<usize>,
    },
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Supervised training of embeddings and head.
    Base {
        #[arg(long)]
        config: PathBuf,
        /// Instruction corpora (captions, QA); repeatable.
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LM-head unlearning.
    Obliviate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        unlearn: PathBuf,
        /// AR corpora; repeatable.
        #[arg(long = "ar", required = true)]
        ar: Vec<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArg,
}

impl ProbeArgs {
    fn load(&self) -> Result<(ProbeConfig, CooccurrenceSpec)> {
        let cfg = match &self.config {
            Some(p) => toml::from_str(&read(p)?).map_err(|e| Error::Config(format!("probe config: {e}")))?,
            None => ProbeConfig::default(),
        };
        Ok((cfg, self.spec.load()?))
    }
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Hidden states at every tap for the probe scenes.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        args: ProbeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        args: ProbeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Counterfactual accuracy per probe plus the generation baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[command(flatten)]
        args: ProbeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy-per-tap chart from an eval report.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn run_training(ckpt: &Checkpoint, out: &train::TrainOutcome, cfg: &TrainConfig, inputs: &[PathBuf], dir: &Path) -> Result<()> {
    out.checkpoint.save(&dir.join("model.ckpt"))?;
    write_curve(&dir.join("curve.csv"), &out.curve)?;
    let names: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    let named: Vec<(&str, &Path)> = names.iter().zip(inputs).map(|(n, p)| (n.as_str(), p.as_path())).collect();
    TrainManifest::new(cfg, &out.checkpoint, &named)?.write(dir)?;
    println!("{} -> {} ({} steps)", ckpt.content_hash(), out.checkpoint.content_hash(), out.curve.len());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus { cmd: CorpusCmd::Gen { spec, count, seed, out, qa_per_scene, positive_rate, stream } } => {
            let spec = spec.load()?;
            let d = QaOptions::default();
            let qa = QaOptions { per_scene: qa_per_scene.unwrap_or(d.per_scene), positive_rate: positive_rate.unwrap_or(d.positive_rate) };
            let (caps, qa) = if stream == "corpus" {
                gen_corpus(&spec, count, seed, &qa)?
            } else {
                corpus_from_scenes(&spec, gen_scenes(&spec, count, seed, &stream)?, seed, &qa)
            };
            caps.write(&out.join("captions.jsonl"))?;
            qa.write(&out.join("qa.jsonl"))?;
            println!("{} captions, {} questions", caps.records.len(), qa.records.len());
        }
        Command::Bench { cmd: BenchCmd::Gen { spec, count, seed, out, scenes } } => {
            let spec = spec.load()?;
            let held: Vec<_> = gen_scenes(&spec, scenes.unwrap_or(3 * count), seed, "bench")?.into_iter().map(Into::into).collect();
            let bench = gen_popev2(&held, &spec, seed, count)?;
            bench.write(&out)?;
            println!("{} questions", bench.items.len());
        }
        Command::Model { cmd: ModelCmd::Init { spec, seed, out, hidden_dim } } => {
            let spec = spec.load()?;
            let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
            if let Some(m) = hidden_dim {
                cfg.model.hidden_dim = m;
            }
            let ckpt = Checkpoint::init(cfg.model_config(&spec))?;
            ckpt.save(&out)?;
            println!("{}", ckpt.content_hash());
        }
        Command::Model { cmd: ModelCmd::Info { ckpt } } => {
            let c = Checkpoint::load(&ckpt)?;
            println!("{}", json(&c.meta)?);
            println!("content hash {}", c.content_hash());
            println!("lm head fraction {:.4}", c.lm_head_fraction());
        }
        Command::Train { cmd: TrainCmd::Base { config, corpora, init, out } } => {
            let cfg = TrainConfig::from_toml(&read(&config)?)?;
            let mut examples = Vec::new();
            for p in &corpora {
                examples.extend(examples_from(&Corpus::read(p)?));
            }
            let init_ckpt = Checkpoint::load(&init)?;
            let res = train::train_base(&init_ckpt, &examples, &cfg)?;
            let mut inputs = corpora.clone();
            inputs.push(init);
            run_training(&init_ckpt, &res, &cfg, &inputs, &out)?;
        }
        Command::Train { cmd: TrainCmd::Obliviate { ckpt, unlearn, ar, alpha, config, ratio, out } } => {
            let defaults = ExperimentConfig::default();
            let mut cfg = match &config {
                Some(p) => TrainConfig::from_toml(&read(p)?)?,
                None => defaults.obliviate_train(defaults.obliviate.alpha, defaults.seed),
            };
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            let base = Checkpoint::load(&ckpt)?;
            let set = UnlearnSet::read(&unlearn)?;
            let mut examples = Vec::new();
            for p in &ar {
                examples.extend(examples_from(&Corpus::read(p)?));
            }
            let res = pipeline::run_obliviate(&base, &set, &examples, ratio, &cfg)?;
            let mut inputs = vec![ckpt, unlearn];
            inputs.extend(ar);
            run_training(&base, &res, &cfg, &inputs, &out)?;
        }
        Command::Harvest { ckpt, corpus, out, captions, max_len } => {
            let c = Checkpoint::load(&ckpt)?;
            let mut corpus = Corpus::read(&corpus)?;
            if let Some(n) = captions {
                corpus = corpus.subset("captions", corpus.records.iter().take(n).cloned().collect());
            }
            let set = build_unlearn_set(&reinfer(&c, &corpus, max_len)?, &corpus)?;
            set.write(&out)?;
            println!("{}", json(&set.stats)?);
        }
        Command::Eval { ckpt, bench, heldout, out, max_len } => {
            let c = Checkpoint::load(&ckpt)?;
            let bench = Benchmark::read(&bench)?;
            match heldout {
                Some(h) => {
                    let e = evaluate(&c, &bench, &Corpus::read(&h)?, max_len, &out)?;
                    println!("{}", json(&e)?);
                }
                None => {
                    let r = obliviate::eval::eval_benchmark(&c, &bench)?;
                    r.write(&out)?;
                    println!("{}", json(&r.metrics)?);
                }
            }
        }
        Command::Probe { cmd } => probe_cmd(cmd)?,
        Command::Audit { ckpt, spec, config, seed, out } => {
            let cfg: AuditConfig = match config {
                Some(p) => toml::from_str(&read(&p)?).map_err(|e| Error::Config(format!("audit config: {e}")))?,
                None => AuditConfig::default(),
            };
            let r = logit_audit(&Checkpoint::load(&ckpt)?, &spec.load()?, &cfg, seed)?;
            r.write(&out)?;
            println!(
                "{} vs {} given {}: {} wins, {} losses, p = {:.3e}",
                r.partner, r.control, r.anchor, r.wins, r.losses, r.p_value
            );
        }
        Command::Run { config, preset, stage, resume } => {
            let cfg = match (config, preset) {
                (Some(p), _) => ExperimentConfig::load(&p)?,
                (None, Some(name)) => ExperimentConfig::preset(&name)?,
                (None, None) => ExperimentConfig::default(),
            }
            .with_env_override();
            let stage = stage.map(|s| s.parse::<Stage>()).transpose()?;
            let summary = run_pipeline(&cfg, RunOptions { stage, resume })?;
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ");
            println!("ran: [{}] skipped: [{}]", names(&summary.ran), names(&summary.skipped));
            println!("output: {}", cfg.out_dir.display());
        }
        Command::Report { dir } => {
            for f in pipeline::emit_report(&dir)? {
                println!("{}", dir.join(f).display());
            }
        }
    }
    Ok(())
}

fn probe_cmd(cmd: ProbeCmd) -> Result<()> {
    match cmd {
        ProbeCmd::Extract { ckpt, args, out } => {
            let (cfg, spec) = args.load()?;
            let c = Checkpoint::load(&ckpt)?;
            let vocab = spec.vocab();
            let scenes = probe::probe_scenes(&spec, &cfg, cfg.target(&vocab)?, None)?;
            let data = probe::extract_taps(&c, &scenes, &vocab.question(scenes.target), &cfg.taps(c.config.layers), &cfg.poolings)?;
            probe::write_datasets(&out, &data)?;
            println!("{} datasets", data.len());
        }
        ProbeCmd::Train { data, args, out } => {
            let (cfg, _) = args.load()?;
            let data = probe::read_datasets(&data)?;
            let params = obliviate::par::try_map(&data, |d| probe::train_probe(d, &cfg))?;
            write_text(&out, &serde_json::to_string(&params)?)?;
            for p in &params {
                println!("{} {} val {:.2} (epoch {})", p.tap, p.pooling, p.val_accuracy, p.epoch);
            }
        }
        ProbeCmd::Eval { ckpt, data, probes, args, out } => {
            let (cfg, spec) = args.load()?;
            let c = Checkpoint::load(&ckpt)?;
            let vocab = spec.vocab();
            let data = probe::read_datasets(&data)?;
            let params: Vec<probe::ProbeParams> = serde_json::from_str(&read(&probes)?)?;
            let mut rows = Vec::new();
            for p in &params {
                let d = data
                    .iter()
                    .find(|d| d.tap == p.tap && d.pooling == p.pooling)
                    .ok_or_else(|| Error::Precondition(format!("no dataset for {} {}", p.tap, p.pooling)))?;
                rows.push(ProbeRow { tap: p.tap, pooling: p.pooling, val_accuracy: p.val_accuracy, test_accuracy: probe::eval_probe(p, d)? });
            }
            let scenes = probe::probe_scenes(&spec, &cfg, cfg.target(&vocab)?, None)?;
            let report = ProbeReport {
                target: vocab.class_name(scenes.target).to_string(),
                counterfactuals: scenes.test.len(),
                rows,
                generation_accuracy: probe::generation_accuracy(&c, &scenes.test, &vocab.question(scenes.target))?,
            };
            write_text(&out, &json(&report)?)?;
            println!("generation {:.2}, gap {:?}", report.generation_accuracy, report.gap());
        }
        ProbeCmd::Report { report, out } => {
            let r: ProbeReport = serde_json::from_str(&read(&report)?)?;
            write_text(&out, &r.svg())?;
            for row in &r.rows {
                println!("{:8} {:6} val {:6.2} test {:6.2}", row.tap.to_string(), row.pooling.to_string(), row.val_accuracy, row.test_accuracy);
            }
            println!("generation {:.2}", r.generation_accuracy);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Stage { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
