//! Caption/QA corpora and the paired counterfactual benchmark, stored as
//! line-delimited JSON with a header line.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scene::{self, CooccurrenceSpec, Scene};
use crate::seeds;
use crate::vocab::{ClassId, TokenId, Vocab, NO, YES};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub spec_hash: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Caption,
    Qa,
}

/// One supervised example: the scene, an instruction, and its target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionRecord {
    pub kind: RecordKind,
    pub scene_ref: String,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// Queried class, for QA records.
    pub class: Option<ClassId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkItem {
    pub id: usize,
    pub scene_ref: String,
    pub question: Vec<TokenId>,
    pub label: bool,
    pub class: ClassId,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(Header),
    Scene(Scene),
    Caption {
        scene_ref: String,
        instruction: String,
        caption: String,
    },
    Qa {
        scene_ref: String,
        question: String,
        answer: String,
        class: ClassId,
    },
    Item {
        id: usize,
        scene_ref: String,
        question: String,
        label: bool,
        class: ClassId,
    },
}

/// Scenes keyed by id, in file order.
#[derive(Debug, Clone, Default)]
pub struct SceneTable {
    scenes: Vec<Arc<Scene>>,
    index: HashMap<String, usize>,
}

impl SceneTable {
    pub fn push(&mut self, scene: Scene) {
        if !self.index.contains_key(&scene.id) {
            self.index.insert(scene.id.clone(), self.scenes.len());
            self.scenes.push(Arc::new(scene));
        }
    }

    pub fn get(&self, id: &str) -> Option<&Arc<Scene>> {
        self.index.get(id).map(|&i| &self.scenes[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Scene>> {
        self.scenes.iter()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

impl FromIterator<Scene> for SceneTable {
    fn from_iter<I: IntoIterator<Item = Scene>>(iter: I) -> Self {
        let mut t = SceneTable::default();
        for s in iter {
            t.push(s);
        }
        t
    }
}

/// Instruction corpus: captions, QA, or a mixture of both.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub header: Header,
    pub scenes: SceneTable,
    pub records: Vec<InstructionRecord>,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub header: Header,
    pub scenes: SceneTable,
    pub items: Vec<BenchmarkItem>,
}

impl Corpus {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.header.classes)
    }

    pub fn scene(&self, record: &InstructionRecord) -> &Arc<Scene> {
        self.scenes.get(&record.scene_ref).expect("loader checks scene references")
    }

    /// Keeps the given records and only the scenes they reference.
    pub fn subset(&self, format: &str, records: Vec<InstructionRecord>) -> Corpus {
        let mut scenes = SceneTable::default();
        for r in &records {
            scenes.push(self.scene(r).as_ref().clone());
        }
        Corpus {
            header: Header { format: format.to_string(), count: records.len(), ..self.header.clone() },
            scenes,
            records,
        }
    }

    /// Concatenates corpora that share a class list.
    pub fn merge(format: &str, parts: &[&Corpus]) -> Result<Corpus> {
        let first = parts.first().ok_or_else(|| Error::Config("nothing to merge".into()))?;
        let mut scenes = SceneTable::default();
        let mut records = Vec::new();
        for p in parts {
            if p.header.classes != first.header.classes {
                return Err(Error::Config("cannot merge corpora with different classes".into()));
            }
            for s in p.scenes.iter() {
                scenes.push(s.as_ref().clone());
            }
            records.extend(p.records.iter().cloned());
        }
        Ok(Corpus {
            header: Header { format: format.to_string(), count: records.len(), ..first.header.clone() },
            scenes,
            records,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let vocab = self.vocab()?;
        let mut out = String::new();
        push_line(&mut out, &Line::Header(self.header.clone()))?;
        for s in self.scenes.iter() {
            push_line(&mut out, &Line::Scene(s.as_ref().clone()))?;
        }
        for r in &self.records {
            let line = match r.kind {
                RecordKind::Caption => Line::Caption {
                    scene_ref: r.scene_ref.clone(),
                    instruction: vocab.decode(&r.prompt),
                    caption: vocab.decode(&r.target),
                },
                RecordKind::Qa => Line::Qa {
                    scene_ref: r.scene_ref.clone(),
                    question: vocab.decode(&r.prompt),
                    answer: vocab.decode(&r.target),
                    class: r.class.expect("qa records carry their class"),
                },
            };
            push_line(&mut out, &line)?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_jsonl()?)
    }

    pub fn read(path: &Path) -> Result<Corpus> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Corpus> {
        let (header, lines) = parse_lines(text, origin)?;
        let vocab = Vocab::new(&header.classes)?;
        let mut scenes = SceneTable::default();
        let mut records = Vec::new();
        for (lineno, line) in lines {
            let enc = |s: &str| vocab.encode(s).map_err(|e| Error::data(origin, lineno, e.to_string()));
            match line {
                Line::Scene(s) => scenes.push(s),
                Line::Caption { scene_ref, instruction, caption } => {
                    check_ref(&scenes, &scene_ref, origin, lineno)?;
                    records.push(InstructionRecord {
                        kind: RecordKind::Caption,
                        scene_ref,
                        prompt: enc(&instruction)?,
                        target: enc(&caption)?,
                        class: None,
                    });
                }
                Line::Qa { scene_ref, question, answer, class } => {
                    check_ref(&scenes, &scene_ref, origin, lineno)?;
                    records.push(InstructionRecord {
                        kind: RecordKind::Qa,
                        scene_ref,
                        prompt: enc(&question)?,
                        target: enc(&answer)?,
                        class: Some(class),
                    });
                }
                _ => return Err(Error::data(origin, lineno, "unexpected record kind in corpus")),
            }
        }
        Ok(Corpus { header, scenes, records })
    }
}

impl Benchmark {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.header.classes)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let vocab = self.vocab()?;
        let mut out = String::new();
        push_line(&mut out, &Line::Header(self.header.clone()))?;
        for s in self.scenes.iter() {
            push_line(&mut out, &Line::Scene(s.as_ref().clone()))?;
        }
        for it in &self.items {
            push_line(
                &mut out,
                &Line::Item {
                    id: it.id,
                    scene_ref: it.scene_ref.clone(),
                    question: vocab.decode(&it.question),
                    label: it.label,
                    class: it.class,
                },
            )?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_jsonl()?)
    }

    pub fn read(path: &Path) -> Result<Benchmark> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Benchmark> {
        let (header, lines) = parse_lines(text, origin)?;
        let vocab = Vocab::new(&header.classes)?;
        let mut scenes = SceneTable::default();
        let mut items = Vec::new();
        for (lineno, line) in lines {
            match line {
                Line::Scene(s) => scenes.push(s),
                Line::Item { id, scene_ref, question, label, class } => {
                    check_ref(&scenes, &scene_ref, origin, lineno)?;
                    let question =
                        vocab.encode(&question).map_err(|e| Error::data(origin, lineno, e.to_string()))?;
                    items.push(BenchmarkItem { id, scene_ref, question, label, class });
                }
                _ => return Err(Error::data(origin, lineno, "unexpected record kind in benchmark")),
            }
        }
        Ok(Benchmark { header, scenes, items })
    }

    pub fn scene(&self, item: &BenchmarkItem) -> &Arc<Scene> {
        self.scenes.get(&item.scene_ref).expect("loader checks scene references")
    }
}

fn check_ref(scenes: &SceneTable, scene_ref: &str, origin: &str, lineno: usize) -> Result<()> {
    match scenes.get(scene_ref) {
        Some(_) => Ok(()),
        None => Err(Error::data(origin, lineno, format!("missing scene reference {scene_ref:?}"))),
    }
}

fn push_line<T: Serialize>(out: &mut String, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)?;
    writeln!(out, "{json}").expect("write to string");
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_lines(text: &str, origin: &str) -> Result<(Header, Vec<(usize, Line)>)> {
    let mut header = None;
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line =
            serde_json::from_str(raw).map_err(|e| Error::data(origin, lineno, e.to_string()))?;
        match line {
            Line::Header(h) if header.is_none() => header = Some(h),
            Line::Header(_) => return Err(Error::data(origin, lineno, "duplicate header")),
            other if header.is_some() => lines.push((lineno, other)),
            _ => return Err(Error::data(origin, lineno, "first line must be the header")),
        }
    }
    let header = header.ok_or_else(|| Error::data(origin, 0, "empty file"))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::data(origin, 1, format!("unsupported version {}", header.version)));
    }
    Ok((header, lines))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOptions {
    pub per_scene: usize,
    /// Probability that a question asks about a present object.
    pub positive_rate: f64,
}

impl Default for QaOptions {
    fn default() -> Self {
        Self { per_scene: 4, positive_rate: 0.9 }
    }
}

/// Generates `count` scenes in parallel; scene `i` uses a seed derived from
/// `(seed, stream, i)`.
pub fn gen_scenes(spec: &CooccurrenceSpec, count: usize, seed: u64, stream: &str) -> Result<Vec<Scene>> {
    par::map_range(count, |i| {
        let s = seeds::derive(seed, stream, i as u64);
        scene::gen_scene_with_id(spec, s, format!("{stream}-{seed}-{i:05}"))
    })
    .into_iter()
    .collect()
}

fn qa_for_scene(scene: &Scene, vocab: &Vocab, opts: &QaOptions, seed: u64, index: u64) -> Vec<InstructionRecord> {
    let mut rng = seeds::rng(seed, "qa", index);
    let present = scene.present_classes();
    let mut pos: Vec<ClassId> = present.iter().copied().collect();
    let mut neg: Vec<ClassId> =
        (0..vocab.class_count()).map(ClassId).filter(|c| !present.contains(c)).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out = Vec::with_capacity(opts.per_scene);
    for _ in 0..opts.per_scene {
        let want_pos = rng.random::<f64>() < opts.positive_rate;
        let (class, answer) = match (want_pos, pos.is_empty(), neg.is_empty()) {
            (true, false, _) | (false, false, true) => (pos.pop().unwrap(), YES),
            (_, _, false) => (neg.pop().unwrap(), NO),
            _ => break,
        };
        out.push(InstructionRecord {
            kind: RecordKind::Qa,
            scene_ref: scene.id.clone(),
            prompt: vocab.question(class),
            target: vec![answer],
            class: Some(class),
        });
    }
    out
}

/// Captions (exact by construction) and binary QA over `count` fresh scenes.
pub fn gen_corpus(
    spec: &CooccurrenceSpec,
    count: usize,
    seed: u64,
    qa: &QaOptions,
) -> Result<(Corpus, Corpus)> {
    if count == 0 {
        return Err(Error::Config("corpus count must be >= 1".into()));
    }
    let scenes = gen_scenes(spec, count, seed, "corpus")?;
    Ok(corpus_from_scenes(spec, scenes, seed, qa))
}

pub fn corpus_from_scenes(
    spec: &CooccurrenceSpec,
    scenes: Vec<Scene>,
    seed: u64,
    qa: &QaOptions,
) -> (Corpus, Corpus) {
    let vocab = spec.vocab();
    let header = |format: &str, count| Header {
        format: format.to_string(),
        version: FORMAT_VERSION,
        spec_hash: spec.hash(),
        seed,
        classes: spec.classes.clone(),
        count,
    };
    let captions: Vec<InstructionRecord> = scenes
        .iter()
        .map(|s| InstructionRecord {
            kind: RecordKind::Caption,
            scene_ref: s.id.clone(),
            prompt: vocab.caption_instruction(),
            target: s.caption(&vocab),
            class: None,
        })
        .collect();
    let qa_records: Vec<InstructionRecord> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| qa_for_scene(s, &vocab, qa, seed, i as u64))
        .collect();
    let table: SceneTable = scenes.into_iter().collect();
    (
        Corpus { header: header("captions", captions.len()), scenes: table.clone(), records: captions },
        Corpus { header: header("qa", qa_records.len()), scenes: table, records: qa_records },
    )
}

/// Per-class presence counts over a scene collection.
pub fn class_frequencies<'a>(scenes: impl IntoIterator<Item = &'a Scene>, class_count: usize) -> Vec<usize> {
    let mut freq = vec![0; class_count];
    for s in scenes {
        for c in s.present_classes() {
            freq[c.0] += 1;
        }
    }
    freq
}

/// Builds the paired benchmark from training-corpus scenes. Scenes are
/// visited in a seeded order; each one with a maskable target yields an
/// original (label yes) and a counterfactual (label no) question until
/// `count` pairs exist. Scenes without a target are skipped.
pub fn gen_popev2(
    corpus_scenes: &[Arc<Scene>],
    spec: &CooccurrenceSpec,
    seed: u64,
    count: usize,
) -> Result<Benchmark> {
    let vocab = spec.vocab();
    let freq = class_frequencies(corpus_scenes.iter().map(|s| s.as_ref()), spec.class_count());
    let mut order: Vec<usize> = (0..corpus_scenes.len()).collect();
    order.shuffle(&mut seeds::rng(seed, "popev2", 0));
    let mut scenes = SceneTable::default();
    let mut items = Vec::with_capacity(2 * count);
    let mut skipped = 0usize;
    for i in order {
        if items.len() >= 2 * count {
            break;
        }
        let original = corpus_scenes[i].as_ref();
        let target = match scene::select_target(original, &freq) {
            Ok(t) => t,
            Err(e @ Error::NoMaskableTarget(_)) => {
                log::debug!("skipping scene: {e}");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let cf = scene::mask_object(original, target)?;
        let question = vocab.question(target);
        for (s, label) in [(original, true), (&cf, false)] {
            items.push(BenchmarkItem {
                id: items.len(),
                scene_ref: s.id.clone(),
                question: question.clone(),
                label,
                class: target,
            });
        }
        scenes.push(original.clone());
        scenes.push(cf);
    }
    if items.len() < 2 * count {
        log::warn!("benchmark has {} pairs, {count} requested ({skipped} scenes skipped)", items.len() / 2);
    }
    Ok(Benchmark {
        header: Header {
            format: "popev2".to_string(),
            version: FORMAT_VERSION,
            spec_hash: spec.hash(),
            seed,
            classes: spec.classes.clone(),
            count: items.len(),
        },
        scenes,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Cell;

    fn spec() -> CooccurrenceSpec {
        CooccurrenceSpec::default_biased()
    }

    #[test]
    fn captions_only_name_present_objects() {
        let (caps, qa) = gen_corpus(&spec(), 200, 3, &QaOptions::default()).unwrap();
        let vocab = caps.vocab().unwrap();
        assert_eq!(caps.records.len(), 200);
        for r in &caps.records {
            let scene = caps.scene(r);
            assert_eq!(*r.target.last().unwrap(), crate::vocab::EOS);
            for &t in &r.target {
                if let Some(c) = vocab.token_class(t) {
                    assert!(scene.contains(c));
                }
            }
        }
        for r in &qa.records {
            let class = r.class.unwrap();
            assert_eq!(r.target, vec![if qa.scene(r).contains(class) { YES } else { NO }]);
        }
    }

    #[test]
    fn corpus_bytes_are_deterministic() {
        let a = gen_corpus(&spec(), 50, 11, &QaOptions::default()).unwrap();
        let b = gen_corpus(&spec(), 50, 11, &QaOptions::default()).unwrap();
        assert_eq!(a.0.to_jsonl().unwrap(), b.0.to_jsonl().unwrap());
        assert_eq!(a.1.to_jsonl().unwrap(), b.1.to_jsonl().unwrap());
        let c = gen_corpus(&spec(), 50, 12, &QaOptions::default()).unwrap();
        assert_ne!(a.0.to_jsonl().unwrap(), c.0.to_jsonl().unwrap());
    }

    #[test]
    fn corpus_file_roundtrip() {
        let (caps, qa) = gen_corpus(&spec(), 20, 5, &QaOptions::default()).unwrap();
        for c in [caps, qa] {
            let text = c.to_jsonl().unwrap();
            let back = Corpus::parse(&text, "mem").unwrap();
            assert_eq!(back.records, c.records);
            assert_eq!(back.to_jsonl().unwrap(), text);
        }
    }

    #[test]
    fn full_scale_ratio_is_one_to_three() {
        let qa = QaOptions { per_scene: 3, ..QaOptions::default() };
        let (caps, questions) = gen_corpus(&spec(), 120, 1, &qa).unwrap();
        assert_eq!(questions.records.len(), 3 * caps.records.len());
        // 12,000 captions at three questions per scene give 36,000 QA records.
        assert_eq!(12_000 * qa.per_scene, 36_000);
    }

    #[test]
    fn benchmark_pairs_are_sound_and_balanced() {
        let (caps, _) = gen_corpus(&spec(), 600, 9, &QaOptions::default()).unwrap();
        let scenes: Vec<_> = caps.scenes.iter().cloned().collect();
        let bench = gen_popev2(&scenes, &spec(), 4, 100).unwrap();
        assert_eq!(bench.items.len(), 200);
        assert_eq!(bench.items.iter().filter(|i| i.label).count(), 100);
        for pair in bench.items.chunks(2) {
            let (orig, cf) = (bench.scene(&pair[0]), bench.scene(&pair[1]));
            assert!(pair[0].label && !pair[1].label);
            assert_eq!(pair[0].class, pair[1].class);
            assert!(orig.contains(pair[0].class));
            assert!(!cf.contains(pair[0].class));
            assert_eq!(cf.masked_class, Some(pair[0].class));
            assert!(cf.cells.iter().any(|&c| c == Cell::Mask));
            let p = orig.placements.iter().find(|p| p.class == pair[0].class).unwrap();
            let f = p.area_fraction(orig.grid_size);
            assert!((0.05..=0.25).contains(&f));
        }
        let text = bench.to_jsonl().unwrap();
        assert_eq!(text, gen_popev2(&scenes, &spec(), 4, 100).unwrap().to_jsonl().unwrap());
        assert_eq!(Benchmark::parse(&text, "mem").unwrap().items, bench.items);
    }

    #[test]
    fn single_scene_gives_two_items() {
        let mut s = Scene::empty("one", 8, 0, 0.0);
        s.place(crate::scene::Placement { class: ClassId(5), row: 0, col: 0, height: 2, width: 2 }).unwrap();
        let bench = gen_popev2(&[Arc::new(s)], &spec(), 0, 1).unwrap();
        let labels: Vec<bool> = bench.items.iter().map(|i| i.label).collect();
        assert_eq!(labels, vec![true, false]);
    }

    #[test]
    fn dangling_scene_reference_names_the_line() {
        let (caps, _) = gen_corpus(&spec(), 2, 5, &QaOptions::default()).unwrap();
        let text = caps.to_jsonl().unwrap();
        let broken: String = text
            .lines()
            .filter(|l| !l.contains("\"kind\":\"scene\"") || !l.contains(&caps.records[1].scene_ref))
            .map(|l| format!("{l}\n"))
            .collect();
        match Corpus::parse(&broken, "bad.jsonl") {
            Err(Error::Data { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("missing scene"));
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
