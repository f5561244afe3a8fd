//! Re-inference on caption instructions, hallucination detection and span
//! extraction for the unlearning set.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Header, RecordKind, SceneTable};
use crate::error::{Error, Result};
use crate::model::{decode_greedy, Checkpoint};
use crate::par;
use crate::scene::Scene;
use crate::train::UnlearnItem;
use crate::vocab::{ClassId, TokenId, Vocab, COMMA, PERIOD};

/// Generation budget for captions; the longest grammatical caption is 15 tokens.
pub const DEFAULT_MAX_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub id: usize,
    pub scene_ref: String,
    pub instruction: Vec<TokenId>,
    pub ground_truth: Vec<TokenId>,
    pub prediction: Vec<TokenId>,
    pub gt_objects: BTreeSet<ClassId>,
    pub pred_objects: BTreeSet<ClassId>,
    pub hallucinated: BTreeSet<ClassId>,
}

impl InferenceRecord {
    /// Classes mentioned in the prediction that are present in the scene.
    pub fn correct_objects(&self) -> BTreeSet<ClassId> {
        self.pred_objects.intersection(&self.gt_objects).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub parent: usize,
    pub start: usize,
    pub end: usize,
    pub trigger: ClassId,
}

/// Greedy re-inference over the caption records of `corpus`.
pub fn reinfer(ckpt: &Checkpoint, corpus: &Corpus, max_len: usize) -> Result<Vec<InferenceRecord>> {
    let vocab = corpus.vocab()?;
    let captions: Vec<_> = corpus.records.iter().filter(|r| r.kind == RecordKind::Caption).collect();
    par::try_map(&(0..captions.len()).collect::<Vec<_>>(), |&i| {
        let r = captions[i];
        let scene = corpus.scene(r);
        let prediction = decode_greedy(scene, &r.prompt, ckpt, max_len)?;
        let mut rec = InferenceRecord {
            id: i,
            scene_ref: r.scene_ref.clone(),
            instruction: r.prompt.clone(),
            ground_truth: r.target.clone(),
            prediction,
            gt_objects: BTreeSet::new(),
            pred_objects: BTreeSet::new(),
            hallucinated: BTreeSet::new(),
        };
        detect_hallucinated(&mut rec, scene, &vocab);
        Ok(rec)
    })
}

/// Fills the object sets of `rec` from its prediction and the scene.
pub fn detect_hallucinated(rec: &mut InferenceRecord, scene: &Scene, vocab: &Vocab) {
    rec.gt_objects = scene.present_classes().into_iter().collect();
    rec.pred_objects = rec.prediction.iter().filter_map(|&t| vocab.token_class(t)).collect();
    rec.hallucinated = rec.pred_objects.difference(&rec.gt_objects).copied().collect();
}

/// First-occurrence segment of each hallucinated class, with commas, periods
/// and correctly mentioned object tokens acting as delimiters.
pub fn split_spans(rec: &InferenceRecord, vocab: &Vocab) -> Vec<SpanRecord> {
    let correct: BTreeSet<TokenId> = rec.correct_objects().iter().map(|&c| vocab.class_token(c)).collect();
    let is_delim = |t: TokenId| t == COMMA || t == PERIOD || correct.contains(&t);
    let y = &rec.prediction;
    let mut out = Vec::new();
    for &class in &rec.hallucinated {
        let tok = vocab.class_token(class);
        let Some(at) = y.iter().position(|&t| t == tok) else { continue };
        let mut start = at;
        while start > 0 && !is_delim(y[start - 1]) {
            start -= 1;
        }
        let mut end = at + 1;
        while end < y.len() && !is_delim(y[end]) {
            end += 1;
        }
        out.push(SpanRecord { parent: rec.id, start, end, trigger: class });
    }
    out
}

/// A kept record of the unlearning set.
#[derive(Debug, Clone, PartialEq)]
pub struct HalluRecord {
    pub inference: InferenceRecord,
    pub spans: Vec<SpanRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestStats {
    pub records: usize,
    pub hallucinated_records: usize,
    /// Percentage of records with at least one hallucinated object.
    pub hallucination_rate: f64,
    pub spans: usize,
    pub spans_per_record: f64,
    pub span_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct UnlearnSet {
    pub header: Header,
    pub scenes: SceneTable,
    pub records: Vec<HalluRecord>,
    pub stats: HarvestStats,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(Header),
    Scene(Scene),
    Record {
        #[serde(flatten)]
        inference: InferenceRecord,
        caption: String,
        spans: Vec<SpanRecord>,
    },
}

/// Keeps the records with at least one span.
pub fn build_unlearn_set(inference: &[InferenceRecord], corpus: &Corpus) -> Result<UnlearnSet> {
    let vocab = corpus.vocab()?;
    let mut scenes = SceneTable::default();
    let mut records = Vec::new();
    for rec in inference {
        let spans = split_spans(rec, &vocab);
        if spans.is_empty() {
            continue;
        }
        let scene = corpus
            .scenes
            .get(&rec.scene_ref)
            .ok_or_else(|| Error::Precondition(format!("scene {} not in corpus", rec.scene_ref)))?;
        scenes.push(scene.as_ref().clone());
        records.push(HalluRecord { inference: rec.clone(), spans });
    }
    if records.is_empty() {
        log::warn!("no hallucinated records among {} inferences; unlearning set is empty", inference.len());
    }
    let spans: usize = records.iter().map(|r| r.spans.len()).sum();
    let stats = HarvestStats {
        records: inference.len(),
        hallucinated_records: records.len(),
        hallucination_rate: if inference.is_empty() { 0.0 } else { 100.0 * records.len() as f64 / inference.len() as f64 },
        spans,
        spans_per_record: if records.is_empty() { 0.0 } else { spans as f64 / records.len() as f64 },
        span_tokens: records.iter().flat_map(|r| &r.spans).map(|s| s.end - s.start).sum(),
    };
    let header = Header { format: "hallu".into(), count: records.len(), ..corpus.header.clone() };
    Ok(UnlearnSet { header, scenes, records, stats })
}

impl UnlearnSet {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.header.classes)
    }

    pub fn scene(&self, rec: &HalluRecord) -> &Arc<Scene> {
        self.scenes.get(&rec.inference.scene_ref).expect("scene references are checked on load")
    }

    /// Training items with identical ranges merged.
    pub fn items(&self) -> Result<Vec<UnlearnItem>> {
        self.records
            .iter()
            .map(|r| {
                let spans: Vec<(usize, usize)> = r.spans.iter().map(|s| (s.start, s.end)).collect();
                UnlearnItem::new(self.scene(r).clone(), &r.inference.instruction, &r.inference.prediction, &spans)
            })
            .collect()
    }

    /// First `n` records, for caption-count sweeps.
    pub fn truncated(&self, n: usize) -> UnlearnSet {
        let records: Vec<HalluRecord> = self.records.iter().take(n).cloned().collect();
        let mut scenes = SceneTable::default();
        for r in &records {
            scenes.push(self.scene(r).as_ref().clone());
        }
        let header = Header { count: records.len(), ..self.header.clone() };
        UnlearnSet { header, scenes, records, stats: self.stats.clone() }
    }

    /// Records harvested from the first `n` captions.
    pub fn within_captions(&self, n: usize) -> UnlearnSet {
        let keep = self.records.iter().take_while(|r| r.inference.id < n).count();
        self.truncated(keep)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let vocab = self.vocab()?;
        let mut out = String::new();
        let mut push = |line: &Line| -> Result<()> {
            writeln!(out, "{}", serde_json::to_string(line)?).unwrap();
            Ok(())
        };
        push(&Line::Header(self.header.clone()))?;
        for s in self.scenes.iter() {
            push(&Line::Scene(s.as_ref().clone()))?;
        }
        for r in &self.records {
            push(&Line::Record {
                inference: r.inference.clone(),
                caption: vocab.decode(&r.inference.prediction),
                spans: r.spans.clone(),
            })?;
        }
        Ok(out)
    }

    /// Writes the set and its `<path>.stats.json` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::corpus::write_text(path, &self.to_jsonl()?)?;
        crate::corpus::write_text(&stats_path(path), &serde_json::to_string_pretty(&self.stats)?)
    }

    pub fn read(path: &Path) -> Result<UnlearnSet> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats_file = stats_path(path);
        let stats_text = std::fs::read_to_string(&stats_file).map_err(|e| Error::io(&stats_file, e))?;
        let stats = serde_json::from_str(&stats_text)?;
        Self::parse(&text, &origin, stats)
    }

    pub fn parse(text: &str, origin: &str, stats: HarvestStats) -> Result<UnlearnSet> {
        let mut header = None;
        let mut scenes = SceneTable::default();
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| Error::data(origin, lineno, e.to_string()))?;
            match line {
                Line::Header(h) if header.is_none() && lineno == 1 => header = Some(h),
                Line::Header(_) => return Err(Error::data(origin, lineno, "unexpected header")),
                _ if header.is_none() => return Err(Error::data(origin, lineno, "missing header line")),
                Line::Scene(s) => scenes.push(s),
                Line::Record { inference, spans, .. } => {
                    if scenes.get(&inference.scene_ref).is_none() {
                        return Err(Error::data(origin, lineno, format!("unknown scene {}", inference.scene_ref)));
                    }
                    if spans.iter().any(|s| s.start >= s.end || s.end > inference.prediction.len()) {
                        return Err(Error::data(origin, lineno, "span outside prediction"));
                    }
                    records.push(HalluRecord { inference, spans });
                }
            }
        }
        let header = header.ok_or_else(|| Error::data(origin, 1, "empty file"))?;
        Ok(UnlearnSet { header, scenes, records, stats })
    }
}

pub fn stats_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".stats.json");
    s.into()
}
