use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{axpy, dot, norm, BackboneParams, Checkpoint, HeadParams, NORM_EPS, RESERVED_CELL_KINDS};
use crate::error::{Error, Result};
use crate::scene::{Cell, Scene};
use crate::seeds;
use crate::vocab::TokenId;

/// Per-cell visual features `E_I`, one `d`-vector per grid cell in row-major
/// order. Noise is drawn from a stream keyed by `(scene.seed, cell)`, so a
/// counterfactual shares the noise of its original at every unmasked cell.
pub fn encode_visual(scene: &Scene, ckpt: &Checkpoint) -> Result<Vec<Vec<f64>>> {
    let cfg = &ckpt.config;
    let g = cfg.grid_size;
    if scene.grid_size != g || scene.cells.len() != g * g {
        return Err(Error::Config(format!(
            "scene {} is {}x{}, model expects {g}x{g}",
            scene.id, scene.grid_size, scene.grid_size
        )));
    }
    let enc = &ckpt.backbone.encoder;
    let kinds = cfg.class_count + RESERVED_CELL_KINDS;
    let noise = (scene.noise_sigma > 0.0).then(|| Normal::new(0.0, scene.noise_sigma).expect("finite sigma"));
    scene
        .cells
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            let kind = match cell {
                Cell::Empty => 0,
                Cell::Mask => 1,
                Cell::Object(c) if c.0 < cfg.class_count => RESERVED_CELL_KINDS + c.0,
                Cell::Object(c) => {
                    return Err(Error::Config(format!("class id {} outside model's {} classes", c.0, cfg.class_count)))
                }
            };
            let (row, col) = (i / g, i % g);
            let mut f: Vec<f64> = (0..cfg.visual_dim)
                .map(|j| enc.get(j, kind) + enc.get(j, kinds + row) + enc.get(j, kinds + g + col))
                .collect();
            if let Some(dist) = &noise {
                let mut rng = seeds::rng(scene.seed, "visual-noise", i as u64);
                f.iter_mut().for_each(|x| *x += dist.sample(&mut rng));
            }
            Ok(f)
        })
        .collect()
}

/// Intermediates of one mixing layer at one position.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub u: Vec<f64>,
    pub unorm: f64,
    pub s: Vec<f64>,
}

/// One mixing layer at sequence position `pos` (1-based), given the running
/// sum of this layer's inputs over positions `1..=pos`:
/// `s = φ(A · normalize(x + running / pos))`.
pub(crate) fn mix_step(backbone: &BackboneParams, layer: usize, x: &[f64], running: &[f64], pos: usize) -> LayerCache {
    let inv = 1.0 / pos as f64;
    let u: Vec<f64> = x.iter().zip(running).map(|(a, r)| a + r * inv).collect();
    let unorm = norm(&u);
    let scale = 1.0 / (unorm + NORM_EPS);
    let v: Vec<f64> = u.iter().map(|a| a * scale).collect();
    let a = &backbone.mixing[layer];
    let phi = backbone.nonlinearity;
    let s = (0..a.rows).map(|r| phi.apply(dot(a.row(r), &v))).collect();
    LayerCache { u, unorm, s }
}

/// Running state of the causal stack after some positions: per layer, the sum
/// of that layer's inputs so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrefix {
    pub sums: Vec<Vec<f64>>,
    pub count: usize,
}

impl ImagePrefix {
    fn empty(layers: usize, width: usize) -> Self {
        Self { sums: vec![vec![0.0; width]; layers], count: 0 }
    }

    /// Pushes one position through every layer and returns the per-layer caches.
    pub(crate) fn push(&mut self, backbone: &BackboneParams, x0: &[f64]) -> Vec<LayerCache> {
        self.count += 1;
        let mut caches = Vec::with_capacity(self.sums.len());
        let mut x = x0.to_vec();
        for (l, sum) in self.sums.iter_mut().enumerate() {
            axpy(sum, 1.0, &x);
            let c = mix_step(backbone, l, &x, sum, self.count);
            x = c.s.clone();
            caches.push(c);
        }
        caches
    }

    /// Runs the image tokens of `scene`.
    pub fn for_scene(scene: &Scene, ckpt: &Checkpoint) -> Result<Self> {
        Ok(image_pass(scene, ckpt, false)?.0)
    }

    pub(crate) fn push_token(&mut self, ckpt: &Checkpoint, token: TokenId) -> Vec<LayerCache> {
        self.push(&ckpt.backbone, ckpt.head.embeddings.row(token))
    }
}

fn image_pass(scene: &Scene, ckpt: &Checkpoint, keep: bool) -> Result<(ImagePrefix, Option<TapSet>)> {
    let cfg = &ckpt.config;
    let feats = encode_visual(scene, ckpt)?;
    let proj = &ckpt.backbone.projection;
    let h0: Vec<Vec<f64>> = feats.iter().map(|f| proj.matvec_t(f)).collect();
    let mut prefix = ImagePrefix::empty(cfg.layers, cfg.hidden_dim);
    let mut layers: Vec<LayerStates> = (0..cfg.layers).map(|_| LayerStates::default()).collect();
    for x in &h0 {
        let caches = prefix.push(&ckpt.backbone, x);
        if keep {
            for (l, c) in caches.into_iter().enumerate() {
                layers[l].image.push(c.s);
            }
        }
    }
    let taps = keep.then(|| TapSet { e_i: feats, h0, layers });
    Ok((prefix, taps))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerStates {
    pub image: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

/// Hidden states captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    pub e_i: Vec<Vec<f64>>,
    pub h0: Vec<Vec<f64>>,
    /// `layers[l - 1]` holds `H^l`.
    pub layers: Vec<LayerStates>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TapId {
    VisualFeatures,
    Projection,
    /// 1-based layer index.
    Layer(usize),
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapId::VisualFeatures => f.write_str("e_i"),
            TapId::Projection => f.write_str("h0"),
            TapId::Layer(l) => write!(f, "layer{l}"),
        }
    }
}

impl FromStr for TapId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e_i" => Ok(TapId::VisualFeatures),
            "h0" => Ok(TapId::Projection),
            _ => s
                .strip_prefix("layer")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(TapId::Layer)
                .ok_or_else(|| Error::Config(format!("unknown tap {s:?}"))),
        }
    }
}

impl From<TapId> for String {
    fn from(t: TapId) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for TapId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl TapId {
    /// Every tap of a model with `layers` mixing layers.
    pub fn all(layers: usize) -> Vec<TapId> {
        let mut v = vec![TapId::VisualFeatures, TapId::Projection];
        v.extend((1..=layers).map(TapId::Layer));
        v
    }

    pub fn is_image_only(self) -> bool {
        matches!(self, TapId::VisualFeatures | TapId::Projection)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over image positions.
    Image,
    /// Mean over text positions.
    Text,
    /// State at the final text position.
    LastToken,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Image => "image",
            Pooling::Text => "text",
            Pooling::LastToken => "last_token",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Pooling::Image),
            "text" => Ok(Pooling::Text),
            "last_token" | "last" => Ok(Pooling::LastToken),
            _ => Err(Error::Config(format!("unknown pooling {s:?}"))),
        }
    }
}

pub fn mean_pool(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, |r| r.len())];
    for r in rows {
        axpy(&mut out, 1.0, r);
    }
    let n = rows.len().max(1) as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

impl TapSet {
    pub fn rows(&self, tap: TapId, pooling: Pooling) -> Result<&[Vec<f64>]> {
        let states = match tap {
            TapId::VisualFeatures | TapId::Projection if pooling != Pooling::Image => {
                return Err(Error::Config(format!("tap {tap} only has image positions")))
            }
            TapId::VisualFeatures => &self.e_i,
            TapId::Projection => &self.h0,
            TapId::Layer(l) => {
                let layer = self
                    .layers
                    .get(l.wrapping_sub(1))
                    .ok_or_else(|| Error::Config(format!("tap {tap} beyond {} layers", self.layers.len())))?;
                match pooling {
                    Pooling::Image => &layer.image,
                    Pooling::Text | Pooling::LastToken => &layer.text,
                }
            }
        };
        Ok(states)
    }

    pub fn pooled(&self, tap: TapId, pooling: Pooling) -> Result<Vec<f64>> {
        let rows = self.rows(tap, pooling)?;
        match pooling {
            Pooling::LastToken => {
                rows.last().cloned().ok_or_else(|| Error::Config("no text positions".into()))
            }
            _ => Ok(mean_pool(rows)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Logits at every position, image tokens first.
    pub logits: Vec<Vec<f64>>,
    pub taps: TapSet,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.last().expect("non-empty prompt")
    }
}

/// Full forward pass over `image tokens ++ prompt`.
pub fn forward(scene: &Scene, prompt: &[TokenId], ckpt: &Checkpoint) -> Result<ForwardOutput> {
    if prompt.is_empty() {
        return Err(Error::Precondition("prompt must contain at least one token".into()));
    }
    ckpt.check_tokens(prompt)?;
    let (mut prefix, taps) = image_pass(scene, ckpt, true)?;
    let mut taps = taps.expect("taps kept");
    let head: &HeadParams = &ckpt.head;
    let mut logits: Vec<Vec<f64>> = taps.layers.last().expect("layers >= 1").image.iter().map(|h| head.logits(h)).collect();
    for &t in prompt {
        let caches = prefix.push_token(ckpt, t);
        logits.push(head.logits(&caches.last().expect("layers >= 1").s));
        for (l, c) in caches.into_iter().enumerate() {
            taps.layers[l].text.push(c.s);
        }
    }
    Ok(ForwardOutput { logits, taps })
}

/// Final-layer state at each prompt position, continuing from `prefix`.
pub(crate) fn text_states(prefix: &ImagePrefix, prompt: &[TokenId], ckpt: &Checkpoint) -> Vec<Vec<f64>> {
    let mut p = prefix.clone();
    prompt
        .iter()
        .map(|&t| p.push_token(ckpt, t).pop().expect("layers >= 1").s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::Placement;
    use crate::vocab::ClassId;

    fn ckpt() -> Checkpoint {
        Checkpoint::init(ModelConfig::new(8, 16, 31, 11)).unwrap()
    }

    fn scene(sigma: f64) -> Scene {
        let mut s = Scene::empty("x", 8, 5, sigma);
        s.place(Placement { class: ClassId(5), row: 1, col: 1, height: 2, width: 2 }).unwrap();
        s
    }

    #[test]
    fn visual_features_are_local_without_noise() {
        let c = ckpt();
        let a = scene(0.0);
        let mut b = a.clone();
        b.cells[63] = Cell::Object(ClassId(3));
        let (fa, fb) = (encode_visual(&a, &c).unwrap(), encode_visual(&b, &c).unwrap());
        for i in 0..64 {
            assert_eq!(fa[i] == fb[i], i != 63, "cell {i}");
        }
    }

    #[test]
    fn empty_scene_features_are_encoder_columns() {
        let c = ckpt();
        let s = Scene::empty("e", 8, 0, 0.0);
        let f = encode_visual(&s, &c).unwrap();
        let kinds = 18;
        let enc = &c.backbone.encoder;
        for (i, fi) in f.iter().enumerate() {
            for (j, &v) in fi.iter().enumerate() {
                let want = enc.get(j, 0) + enc.get(j, kinds + i / 8) + enc.get(j, kinds + 8 + i % 8);
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn noise_is_seeded() {
        let c = ckpt();
        let s = scene(0.7);
        assert_eq!(encode_visual(&s, &c).unwrap(), encode_visual(&s, &c).unwrap());
        assert_ne!(encode_visual(&s, &c).unwrap(), encode_visual(&scene(0.0), &c).unwrap());
    }

    #[test]
    fn grid_mismatch_is_config_error() {
        let s = Scene::empty("small", 4, 0, 0.0);
        assert!(matches!(encode_visual(&s, &ckpt()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut c = ckpt();
        c.head.lm_head.fill(0.0);
        c.head.bias.iter_mut().for_each(|b| *b = 0.0);
        let out = forward(&scene(0.3), &[1, 2, 3], &c).unwrap();
        for z in &out.logits {
            let p = crate::model::grad::softmax(z);
            for &pi in &p {
                assert!((pi - 1.0 / 31.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        assert!(matches!(forward(&scene(0.0), &[31], &ckpt()), Err(Error::Vocabulary { token: 31, .. })));
        assert!(forward(&scene(0.0), &[], &ckpt()).is_err());
    }

    #[test]
    fn tap_shapes() {
        let out = forward(&scene(0.1), &[7, 8, 9], &ckpt()).unwrap();
        let t = &out.taps;
        assert_eq!(t.pooled(TapId::VisualFeatures, Pooling::Image).unwrap().len(), 32);
        assert_eq!(t.pooled(TapId::Projection, Pooling::Image).unwrap().len(), 24);
        for l in 1..=3 {
            assert_eq!(t.layers[l - 1].image.len(), 64);
            assert_eq!(t.layers[l - 1].text.len(), 3);
            assert_eq!(t.pooled(TapId::Layer(l), Pooling::Text).unwrap().len(), 24);
        }
        assert!(t.pooled(TapId::Projection, Pooling::Text).is_err());
        assert!(t.pooled(TapId::Layer(4), Pooling::Image).is_err());
        assert_eq!(out.logits.len(), 67);
    }

    #[test]
    fn tap_names_roundtrip() {
        for tap in TapId::all(3) {
            assert_eq!(tap.to_string().parse::<TapId>().unwrap(), tap);
        }
        assert!("layer0".parse::<TapId>().is_err());
        assert!("bogus".parse::<TapId>().is_err());
    }
}
