//! Benchmark evaluation: yes/no answers, confusion counts and a per-item log.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Benchmark;
use crate::error::{Error, Result};
use crate::hash;
use crate::metrics::{popev2_metrics, ConfusionCounts, PopeMetrics};
use crate::model::{yes_no_prob, Checkpoint};
use crate::par;
use crate::scene::Scene;
use crate::vocab::TokenId;

/// Anything that scores a yes/no question about a scene.
pub trait Answerer: Sync {
    /// `(p_yes, p_no)`
    fn answer(&self, scene: &Scene, question: &[TokenId]) -> Result<(f64, f64)>;

    fn id(&self) -> Option<String> {
        None
    }
}

impl Answerer for Checkpoint {
    fn answer(&self, scene: &Scene, question: &[TokenId]) -> Result<(f64, f64)> {
        yes_no_prob(scene, question, self)
    }

    fn id(&self) -> Option<String> {
        Some(self.content_hash())
    }
}

/// Ties count as "no".
pub fn decide(p_yes: f64, p_no: f64) -> bool {
    p_yes > p_no
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLog {
    pub id: usize,
    pub scene_ref: String,
    pub class: crate::vocab::ClassId,
    pub label: bool,
    pub p_yes: f64,
    pub p_no: f64,
    pub predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark_hash: String,
    pub checkpoint_hash: Option<String>,
    pub tie_rule: String,
    pub counts: ConfusionCounts,
    pub metrics: PopeMetrics,
    #[serde(skip)]
    pub items: Vec<ItemLog>,
}

pub fn eval_benchmark(answerer: &dyn Answerer, bench: &Benchmark) -> Result<EvalReport> {
    let logs = par::try_map(&bench.items, |item| {
        let (p_yes, p_no) = answerer.answer(bench.scene(item), &item.question)?;
        Ok::<_, Error>(ItemLog {
            id: item.id,
            scene_ref: item.scene_ref.clone(),
            class: item.class,
            label: item.label,
            p_yes,
            p_no,
            predicted: decide(p_yes, p_no),
        })
    })?;
    let counts = recount(&logs);
    Ok(EvalReport {
        benchmark_hash: hash::sha256_hex(bench.to_jsonl()?.as_bytes()),
        checkpoint_hash: answerer.id(),
        tie_rule: "p_yes == p_no answers no".into(),
        counts,
        metrics: popev2_metrics(&counts),
        items: logs,
    })
}

pub fn recount(items: &[ItemLog]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for it in items {
        c.record(it.label, it.predicted);
    }
    c
}

impl EvalReport {
    pub fn items_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for it in &self.items {
            writeln!(out, "{}", serde_json::to_string(it)?).unwrap();
        }
        Ok(out)
    }

    /// Writes `report.json` and `items.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::corpus::write_text(&dir.join("report.json"), &serde_json::to_string_pretty(self)?)?;
        crate::corpus::write_text(&dir.join("items.jsonl"), &self.items_jsonl()?)
    }

    pub fn read(dir: &Path) -> Result<EvalReport> {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut report: EvalReport = serde_json::from_str(&text)?;
        let path = dir.join("items.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        report.items = read_items(&text, &path.display().to_string())?;
        Ok(report)
    }
}

pub fn read_items(text: &str, origin: &str) -> Result<Vec<ItemLog>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(origin, i + 1, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_answer_no() {
        assert!(!decide(0.5, 0.5));
        assert!(decide(0.5 + 1e-12, 0.5 - 1e-12));
    }
}
