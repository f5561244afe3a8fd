//! Markdown summary and SVG charts from a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;

use super::{paths, read_evaluation, Evaluation, Manifest, SweepRow};
use crate::audit::AuditReport;
use crate::corpus::write_text;
use crate::error::Result;
use crate::harvest::HarvestStats;
use crate::hash;
use crate::probe::ProbeReport;
use crate::svg::{line_chart, Series};

/// Whatever a run directory holds; absent pieces are `None`.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub base: Option<Evaluation>,
    pub obliviate: Option<Evaluation>,
    pub harvest: Option<HarvestStats>,
    pub probe: Option<ProbeReport>,
    pub audit: Option<AuditReport>,
    pub sweep: Option<Vec<SweepRow>>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("unreadable artifact {}: {e}", path.display());
            None
        }
    }
}

impl Artifacts {
    pub fn load(root: &Path) -> Self {
        Self {
            base: read_evaluation(&root.join("eval/base")).ok(),
            obliviate: read_evaluation(&root.join("eval/obliviate")).ok(),
            harvest: read_json(&root.join(format!("{}.stats.json", paths::UNLEARN))),
            probe: read_json(&root.join(paths::PROBE)),
            audit: read_json(&root.join(paths::AUDIT)),
            sweep: read_json(&root.join(paths::SWEEP)),
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median over seeds of `f`, per value of one sweep axis, in value order.
pub fn axis_medians(rows: &[SweepRow], axis: &str, f: impl Fn(&SweepRow) -> Option<f64>) -> Vec<(f64, Option<f64>)> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.axis == axis) {
        let e = groups.entry(r.value.to_bits()).or_insert((r.value, Vec::new()));
        e.1.extend(f(r));
    }
    let mut out: Vec<(f64, Option<f64>)> = groups.into_values().map(|(v, xs)| (v, median(&xs))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:+.2}"))
}

fn source(root: &Path, manifest: &Manifest, rel: &str) -> String {
    match hash::file_hash(&root.join(rel)) {
        Ok(h) => match manifest.producer(rel, &h) {
            Some(e) => format!("`{}` ({} {})", hash::short(&h), e.stage, hash::short(&e.key)),
            None => format!("`{}`", hash::short(&h)),
        },
        Err(_) => "missing".into(),
    }
}

fn eval_row(out: &mut String, name: &str, e: &Evaluation, src: &str) {
    let m = &e.metrics;
    writeln!(
        out,
        "| {name} | {} | {} | {} | {} | {} | {} | {:.2} | {} | {src} |",
        num(m.accuracy),
        num(m.precision),
        num(m.recall),
        num(m.f1),
        num(m.tnr),
        signed(m.pbo),
        e.chair.resp_rate,
        num(e.chair.mention_rate),
    )
    .unwrap();
}

const EVAL_HEADER: &str = "| model | Acc | Prec | Rec | F1 | TNR | PBO | Resp | Mention | source |\n|---|---|---|---|---|---|---|---|---|---|\n";

/// Writes `report/report.md` and the charts; returns the relative paths.
pub fn emit_report(root: &Path) -> Result<Vec<String>> {
    let a = Artifacts::load(root);
    let manifest = Manifest::open(root)?;
    let mut files = Vec::new();
    let svg = |name: &str, body: String, files: &mut Vec<String>| -> Result<String> {
        let rel = format!("report/{name}");
        write_text(&root.join(&rel), &body)?;
        files.push(rel);
        Ok(name.to_string())
    };
    let mut md = String::from("# Experiment report\n\n");
    if let Some(e) = manifest.latest("corpus") {
        writeln!(md, "Corpus stage key `{}`.\n", hash::short(&e.key)).unwrap();
    }

    md.push_str("## Before and after unlearning\n\n");
    if a.base.is_none() && a.obliviate.is_none() {
        md.push_str("_missing: eval/base, eval/obliviate_\n\n");
    } else {
        md.push_str(EVAL_HEADER);
        for (name, e) in [("base", &a.base), ("obliviate", &a.obliviate)] {
            match e {
                Some(e) => eval_row(&mut md, name, e, &source(root, &manifest, &format!("eval/{name}/report.json"))),
                None => writeln!(md, "| {name} | _missing_ |||||||||").unwrap(),
            }
        }
        md.push('\n');
    }

    md.push_str("## Harvest\n\n");
    match &a.harvest {
        Some(h) => writeln!(
            md,
            "{} captions re-inferred, {} hallucinated ({:.2}%), {} spans ({:.2} per record, {} tokens). Source {}.\n",
            h.records,
            h.hallucinated_records,
            h.hallucination_rate,
            h.spans,
            h.spans_per_record,
            h.span_tokens,
            source(root, &manifest, &format!("{}.stats.json", paths::UNLEARN)),
        )
        .unwrap(),
        None => md.push_str("_missing: harvest statistics_\n\n"),
    }

    md.push_str("## Probes\n\n");
    match &a.probe {
        Some(p) => {
            writeln!(md, "Target `{}`, {} counterfactuals. Source {}.\n", p.target, p.counterfactuals, source(root, &manifest, paths::PROBE)).unwrap();
            md.push_str("| tap | pooling | val | test |\n|---|---|---|---|\n");
            for r in &p.rows {
                writeln!(md, "| {} | {} | {:.2} | {:.2} |", r.tap, r.pooling, r.val_accuracy, r.test_accuracy).unwrap();
            }
            writeln!(md, "\nGeneration accuracy {:.2}, best probe gap {}.\n", p.generation_accuracy, signed(p.gap())).unwrap();
            let f = svg("probe_accuracy.svg", p.svg(), &mut files)?;
            writeln!(md, "![probe accuracy]({f})\n").unwrap();
        }
        None => md.push_str("_missing: probe report_\n\n"),
    }

    md.push_str("## Logit audit\n\n");
    match &a.audit {
        Some(x) => {
            writeln!(
                md,
                "With `{}` present: `{}` (lift {:.1}) mean logit {:.4}, `{}` (lift 1) mean logit {:.4} over {} scenes; \
                 {} wins, {} losses, sign-test p = {:.3e}. Source {}.\n",
                x.anchor,
                x.partner,
                x.partner_lift,
                x.mean_partner,
                x.control,
                x.mean_control,
                x.scenes,
                x.wins,
                x.losses,
                x.p_value,
                source(root, &manifest, paths::AUDIT),
            )
            .unwrap();
            let f = svg("audit.svg", x.svg(), &mut files)?;
            writeln!(md, "![logit audit]({f})\n").unwrap();
        }
        None => md.push_str("_missing: logit audit_\n\n"),
    }

    md.push_str("## Sweeps\n\n");
    match a.sweep.as_deref() {
        Some([]) | None => md.push_str("No sweep branches.\n\n"),
        Some(rows) => {
            for axis in ["alpha", "ratio", "captions"] {
                let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.axis == axis).collect();
                if sel.is_empty() {
                    continue;
                }
                writeln!(md, "### {axis}\n").unwrap();
                md.push_str("| value | seed | records | Acc | Prec | Rec | F1 | TNR | PBO | Resp | Mention | source |\n");
                md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|\n");
                for r in &sel {
                    let m = &r.eval.metrics;
                    writeln!(
                        md,
                        "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.2} | {} | {} |",
                        r.value,
                        r.seed,
                        r.unlearn_records,
                        num(m.accuracy),
                        num(m.precision),
                        num(m.recall),
                        num(m.f1),
                        num(m.tnr),
                        signed(m.pbo),
                        r.eval.chair.resp_rate,
                        num(r.eval.chair.mention_rate),
                        source(root, &manifest, &format!("{}/report.json", r.dir)),
                    )
                    .unwrap();
                }
                md.push('\n');
                let resp = axis_medians(rows, axis, |r| Some(r.eval.chair.resp_rate));
                let labels: Vec<String> = resp.iter().map(|(v, _)| format!("{v}")).collect();
                let (title, series) = if axis == "captions" {
                    let mention = axis_medians(rows, axis, |r| r.eval.chair.mention_rate);
                    (
                        "CHAIR after unlearning vs caption budget (median over seeds)",
                        vec![
                            Series { name: "Resp".into(), points: resp.iter().map(|p| p.1).collect() },
                            Series { name: "Mention".into(), points: mention.iter().map(|p| p.1).collect() },
                        ],
                    )
                } else {
                    let tnr = axis_medians(rows, axis, |r| r.eval.metrics.tnr);
                    let f1 = axis_medians(rows, axis, |r| r.eval.metrics.f1);
                    (
                        "Benchmark metrics after unlearning (median over seeds)",
                        vec![
                            Series { name: "TNR".into(), points: tnr.iter().map(|p| p.1).collect() },
                            Series { name: "F1".into(), points: f1.iter().map(|p| p.1).collect() },
                        ],
                    )
                };
                let f = svg(&format!("sweep_{axis}.svg"), line_chart(title, "%", &labels, &series, None, None), &mut files)?;
                writeln!(md, "![{axis} sweep]({f})\n").unwrap();
            }
        }
    }

    write_text(&root.join(paths::REPORT), &md)?;
    files.push(paths::REPORT.to_string());
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn empty_directory_gives_partial_report() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(dir.path()).unwrap();
        assert_eq!(files, vec![paths::REPORT.to_string()]);
        let md = std::fs::read_to_string(dir.path().join(paths::REPORT)).unwrap();
        assert!(md.contains("_missing: probe report_") && md.contains("No sweep branches."));
    }
}
