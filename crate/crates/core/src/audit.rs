//! Logit audit: do absent but co-occurring classes get higher caption logits
//! than absent unrelated ones?

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{class_frequencies, gen_scenes};
use crate::error::{Error, Result};
use crate::model::{token_logit_trace, Checkpoint, LogitTrace};
use crate::par;
use crate::scene::{CooccurrenceSpec, Scene};
use crate::svg::{bar_chart, Series};
use crate::vocab::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Anchor class present in every audited scene; defaults to the
    /// strongest lift pair.
    #[serde(default)]
    pub anchor: Option<String>,
    /// Absent class with a high lift to the anchor.
    #[serde(default)]
    pub partner: Option<String>,
    /// Absent class with lift 1 to the anchor; defaults to the unrelated
    /// class whose frequency is closest to the partner's.
    #[serde(default)]
    pub control: Option<String>,
    #[serde(default = "default_scenes")]
    pub scenes: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub steps: TraceSteps,
}

/// Which decoding steps the per-scene logit mean covers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSteps {
    All,
    /// Steps right after a determiner, where the head picks an object.
    #[default]
    ObjectSlots,
}

fn default_scenes() -> usize {
    200
}
fn default_max_len() -> usize {
    crate::harvest::DEFAULT_MAX_LEN
}

impl Default for AuditConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditClasses {
    pub anchor: ClassId,
    pub partner: ClassId,
    pub control: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub anchor: String,
    pub partner: String,
    pub control: String,
    pub partner_lift: f64,
    pub scenes: usize,
    pub steps: TraceSteps,
    /// Scenes drawn but dropped because their trace had no step of the
    /// requested kind.
    pub skipped: usize,
    /// `(partner, control)` mean logits per scene.
    pub pairs: Vec<(f64, f64)>,
    pub wins: usize,
    pub losses: usize,
    pub mean_partner: f64,
    pub mean_control: f64,
    /// One-sided sign test of partner > control, ties dropped.
    pub p_value: f64,
    /// Mean logit of each non-anchor class over the scenes that lack it.
    pub absent_means: Vec<(String, f64)>,
}

/// Upper tail `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut ln_choose = 0.0;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            total += (ln_choose - ln2n).exp();
        }
    }
    total.min(1.0)
}

pub fn resolve_classes(spec: &CooccurrenceSpec, cfg: &AuditConfig, seed: u64) -> Result<AuditClasses> {
    let vocab = spec.vocab();
    let named = |name: &Option<String>| -> Result<Option<ClassId>> {
        name.as_ref()
            .map(|n| vocab.class_by_name(n).ok_or_else(|| Error::Config(format!("unknown audit class {n:?}"))))
            .transpose()
    };
    let (anchor, partner) = match (named(&cfg.anchor)?, named(&cfg.partner)?) {
        (Some(a), Some(b)) => (a, b),
        (None, None) => {
            let (a, b, _) = spec.strongest_pair().ok_or_else(|| Error::Config("spec has no lifted pair".into()))?;
            (a, b)
        }
        _ => return Err(Error::Config("audit anchor and partner must be given together".into())),
    };
    if spec.lift[anchor.0][partner.0] <= 1.0 {
        return Err(Error::Config("audit partner must have lift > 1 with the anchor".into()));
    }
    let control = match named(&cfg.control)? {
        Some(c) => c,
        None => {
            let sample = gen_scenes(spec, 2000, seed, "audit-freq")?;
            let freq = class_frequencies(&sample, spec.class_count());
            (0..spec.class_count())
                .map(ClassId)
                .filter(|&c| c != anchor && spec.lift[anchor.0][c.0] == 1.0 && spec.lift[partner.0][c.0] == 1.0)
                .min_by_key(|c| (freq[c.0] as i64 - freq[partner.0] as i64).abs())
                .ok_or_else(|| Error::Config("no unrelated control class".into()))?
        }
    };
    if spec.lift[anchor.0][control.0] != 1.0 || control == anchor || control == partner {
        return Err(Error::Config("audit control must be unrelated to the anchor".into()));
    }
    Ok(AuditClasses { anchor, partner, control })
}

/// Traces caption logits on fresh scenes that contain the anchor and lack
/// both the partner and the control.
pub fn logit_audit(ckpt: &Checkpoint, spec: &CooccurrenceSpec, cfg: &AuditConfig, seed: u64) -> Result<AuditReport> {
    let vocab = spec.vocab();
    let k = resolve_classes(spec, cfg, seed)?;
    let watch: Vec<ClassId> = (0..spec.class_count()).map(ClassId).collect();
    let prompt = vocab.caption_instruction();
    let pick = |t: &LogitTrace| if cfg.steps == TraceSteps::All { t.mean_logits.clone() } else { t.slot_logits.clone() };
    // draw until `cfg.scenes` scenes have a non-empty trace
    let mut logits: Vec<(Scene, BTreeMap<ClassId, f64>)> = Vec::with_capacity(cfg.scenes);
    let mut skipped = 0;
    for round in 0..50u64 {
        if logits.len() >= cfg.scenes {
            break;
        }
        let chunk = gen_scenes(spec, 10 * cfg.scenes.max(1), seed.wrapping_add(round), "audit")?;
        let mut cands: Vec<_> =
            chunk.into_iter().filter(|s| s.contains(k.anchor) && !s.contains(k.partner) && !s.contains(k.control)).collect();
        cands.truncate(cfg.scenes - logits.len());
        let traces = par::try_map(&cands, |s| token_logit_trace(s, &prompt, ckpt, &vocab, &watch, cfg.max_len))?;
        for (s, t) in cands.into_iter().zip(&traces) {
            let m = pick(t);
            if m.is_empty() {
                skipped += 1;
            } else {
                logits.push((s, m));
            }
        }
    }
    if logits.len() < cfg.scenes {
        log::warn!("logit audit traced {} of {} scenes", logits.len(), cfg.scenes);
    }
    let pairs: Vec<(f64, f64)> = logits.iter().map(|(_, m)| (m[&k.partner], m[&k.control])).collect();
    let wins = pairs.iter().filter(|(b, c)| b > c).count();
    let losses = pairs.iter().filter(|(b, c)| b < c).count();
    let mean = |f: &dyn Fn(&(f64, f64)) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len().max(1) as f64;
    let absent_means = watch
        .iter()
        .filter(|&&c| c != k.anchor)
        .filter_map(|c| {
            let vals: Vec<f64> = logits.iter().filter(|(s, _)| !s.contains(*c)).map(|(_, m)| m[c]).collect();
            (!vals.is_empty()).then(|| (vocab.class_name(*c).to_string(), vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    Ok(AuditReport {
        anchor: vocab.class_name(k.anchor).into(),
        partner: vocab.class_name(k.partner).into(),
        control: vocab.class_name(k.control).into(),
        partner_lift: spec.lift[k.anchor.0][k.partner.0],
        scenes: pairs.len(),
        steps: cfg.steps,
        skipped,
        wins,
        losses,
        mean_partner: mean(&|p| p.0),
        mean_control: mean(&|p| p.1),
        p_value: sign_test_p(wins, wins + losses),
        pairs,
        absent_means,
    })
}

impl AuditReport {
    pub fn passes(&self, alpha: f64) -> bool {
        self.mean_partner > self.mean_control && self.p_value < alpha
    }

    /// Bars of the mean logit of each absent class.
    pub fn svg(&self) -> String {
        let labels: Vec<String> = self.absent_means.iter().map(|(n, _)| n.clone()).collect();
        let series = [Series {
            name: format!("given {}", self.anchor),
            points: self.absent_means.iter().map(|(_, v)| Some(*v)).collect(),
        }];
        bar_chart(&format!("Mean caption logit of absent objects, {} present", self.anchor), "logit", &labels, &series)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::corpus::write_text(&dir.join("audit.json"), &serde_json::to_string_pretty(self)?)?;
        crate::corpus::write_text(&dir.join("audit.svg"), &self.svg())
    }
}
