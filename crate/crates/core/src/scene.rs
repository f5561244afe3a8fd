//! Symbolic grid scenes with engineered object co-occurrence, and the
//! counterfactual masking rules used to build the paired benchmark.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash;
use crate::vocab::{ClassId, TokenId, Vocab, AND, COMMA, DET, EOS, PERIOD};

/// Smallest and largest block area, as a fraction of the grid, that may be
/// chosen as a counterfactual target.
pub const MIN_TARGET_AREA: f64 = 0.05;
pub const MAX_TARGET_AREA: f64 = 0.25;

const PLACEMENT_RETRIES: usize = 256;

/// Class-presence model for scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceSpec {
    pub classes: Vec<String>,
    pub base_rate: Vec<f64>,
    /// `lift[a][b]` multiplies the presence probability of `b` once `a` is placed.
    pub lift: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub grid_size: usize,
    pub max_objects: usize,
    pub max_block_side: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RateSpec {
    Uniform(f64),
    PerClass(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LiftGroup {
    members: Vec<String>,
    lift: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LiftPair {
    pair: [String; 2],
    lift: f64,
}

/// On-disk form: lifts are given by symmetric groups and pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    classes: Vec<String>,
    base_rate: RateSpec,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default = "default_grid")]
    grid_size: usize,
    #[serde(default = "default_max_objects")]
    max_objects: usize,
    #[serde(default = "default_side")]
    max_block_side: usize,
    #[serde(default)]
    group: Vec<LiftGroup>,
    #[serde(default)]
    pair: Vec<LiftPair>,
}

fn default_grid() -> usize {
    8
}
fn default_max_objects() -> usize {
    5
}
fn default_side() -> usize {
    4
}

pub const DEFAULT_CLASSES: [&str; 16] = [
    "tv", "remote", "laptop", "keyboard", "mouse", "dog", "frisbee", "cat", "cup", "bottle", "fork",
    "pizza", "car", "bus", "umbrella", "clock",
];

impl CooccurrenceSpec {
    /// The shipped default: 16 classes, 8x8 grid, four co-occurrence clusters.
    pub fn default_biased() -> Self {
        let text = include_str!("../assets/default_spec.toml");
        Self::from_toml(text).expect("bundled spec is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SpecFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("corpus spec: {e}")))?;
        let c = file.classes.len();
        let base_rate = match file.base_rate {
            RateSpec::Uniform(r) => vec![r; c],
            RateSpec::PerClass(v) => v,
        };
        let mut lift = vec![vec![1.0; c]; c];
        let idx = |name: &str| {
            file.classes
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("lift names unknown class {name:?}")))
        };
        for g in &file.group {
            let ids = g.members.iter().map(|m| idx(m)).collect::<Result<Vec<_>>>()?;
            for &a in &ids {
                for &b in &ids {
                    if a != b {
                        lift[a][b] = g.lift;
                    }
                }
            }
        }
        for p in &file.pair {
            let (a, b) = (idx(&p.pair[0])?, idx(&p.pair[1])?);
            if a != b {
                lift[a][b] = p.lift;
                lift[b][a] = p.lift;
            }
        }
        let spec = Self {
            classes: file.classes,
            base_rate,
            lift,
            noise_sigma: file.noise_sigma,
            grid_size: file.grid_size,
            max_objects: file.max_objects,
            max_block_side: file.max_block_side,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        let bad = |m: String| Err(Error::Config(m));
        if c == 0 {
            return bad("spec has no classes".into());
        }
        if self.base_rate.len() != c {
            return bad(format!("base_rate has {} entries for {c} classes", self.base_rate.len()));
        }
        if self.base_rate.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("base_rate entries must lie in [0, 1]".into());
        }
        if self.lift.len() != c || self.lift.iter().any(|row| row.len() != c) {
            return bad("lift must be C x C".into());
        }
        for a in 0..c {
            if self.lift[a][a] != 1.0 {
                return bad(format!("lift diagonal for {} is not 1", self.classes[a]));
            }
            for b in 0..c {
                let l = self.lift[a][b];
                if !(l >= 0.0 && l.is_finite()) || l != self.lift[b][a] {
                    return bad("lift must be finite, non-negative and symmetric".into());
                }
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        if self.grid_size == 0 || self.max_block_side == 0 || self.max_block_side > self.grid_size {
            return bad("grid_size and max_block_side must satisfy 1 <= side <= grid".into());
        }
        Vocab::new(&self.classes)?;
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(&self.classes).expect("validated spec")
    }

    pub fn hash(&self) -> String {
        hash::hash_json(self)
    }

    /// Presence probability of `class` given the classes already placed.
    pub fn presence_probability(&self, class: ClassId, placed: &[ClassId]) -> f64 {
        let p = placed.iter().fold(self.base_rate[class.0], |p, a| p * self.lift[a.0][class.0]);
        p.clamp(0.0, 1.0)
    }

    /// Pair with the largest off-diagonal lift, lowest ids first on ties.
    pub fn strongest_pair(&self) -> Option<(ClassId, ClassId, f64)> {
        let c = self.class_count();
        let mut best: Option<(ClassId, ClassId, f64)> = None;
        for a in 0..c {
            for b in 0..c {
                if a != b && best.is_none_or(|(_, _, l)| self.lift[a][b] > l) {
                    best = Some((ClassId(a), ClassId(b), self.lift[a][b]));
                }
            }
        }
        best.filter(|&(_, _, l)| l > 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    /// Blacked-out patch left behind by counterfactual masking.
    Mask,
    Object(ClassId),
}

impl Cell {
    fn code(self) -> i32 {
        match self {
            Cell::Empty => -1,
            Cell::Mask => -2,
            Cell::Object(c) => c.0 as i32,
        }
    }

    fn from_code(code: i32) -> Option<Self> {
        match code {
            -1 => Some(Cell::Empty),
            -2 => Some(Cell::Mask),
            c if c >= 0 => Some(Cell::Object(ClassId(c as usize))),
            _ => None,
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i32(self.code())
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = i32::deserialize(d)?;
        Cell::from_code(code).ok_or_else(|| serde::de::Error::custom(format!("bad cell code {code}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub class: ClassId,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Placement {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn area_fraction(&self, grid_size: usize) -> f64 {
        self.area() as f64 / (grid_size * grid_size) as f64
    }

    pub fn cells(&self, grid_size: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row..self.row + self.height)
            .flat_map(move |r| (self.col..self.col + self.width).map(move |c| r * grid_size + c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub grid_size: usize,
    pub cells: Vec<Cell>,
    /// Blocks in placement order; captions mention objects in this order.
    pub placements: Vec<Placement>,
    pub seed: u64,
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_class: Option<ClassId>,
}

impl Scene {
    pub fn empty(id: impl Into<String>, grid_size: usize, seed: u64, noise_sigma: f64) -> Self {
        Self {
            id: id.into(),
            grid_size,
            cells: vec![Cell::Empty; grid_size * grid_size],
            placements: Vec::new(),
            seed,
            noise_sigma,
            masked_class: None,
        }
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.cells.iter().any(|&c| c == Cell::Object(class))
    }

    pub fn present_classes(&self) -> BTreeSet<ClassId> {
        self.cells
            .iter()
            .filter_map(|c| match c {
                Cell::Object(k) => Some(*k),
                _ => None,
            })
            .collect()
    }

    /// Present classes in placement order.
    pub fn ordered_objects(&self) -> Vec<ClassId> {
        self.placements.iter().map(|p| p.class).filter(|&c| self.contains(c)).collect()
    }

    pub fn is_counterfactual(&self) -> bool {
        self.masked_class.is_some()
    }

    /// Places `class` as a block; the block must fit on empty cells.
    pub fn place(&mut self, placement: Placement) -> Result<()> {
        let g = self.grid_size;
        if placement.height == 0
            || placement.width == 0
            || placement.row + placement.height > g
            || placement.col + placement.width > g
        {
            return Err(Error::Precondition("block outside grid".into()));
        }
        if placement.cells(g).any(|i| self.cells[i] != Cell::Empty) {
            return Err(Error::Precondition("block overlaps an occupied cell".into()));
        }
        for i in placement.cells(g).collect::<Vec<_>>() {
            self.cells[i] = Cell::Object(placement.class);
        }
        self.placements.push(placement);
        Ok(())
    }

    /// Fixed caption grammar: "a x , a y and a z ." followed by end-of-sequence.
    pub fn caption(&self, vocab: &Vocab) -> Vec<TokenId> {
        let objects = self.ordered_objects();
        let mut out = Vec::with_capacity(objects.len() * 3 + 2);
        for (i, &c) in objects.iter().enumerate() {
            if i > 0 {
                out.push(if i + 1 == objects.len() { AND } else { COMMA });
            }
            out.push(DET);
            out.push(vocab.class_token(c));
        }
        out.push(PERIOD);
        out.push(EOS);
        out
    }
}

/// Samples a scene. Classes are visited in a seeded random order; each is
/// placed with its base rate multiplied by the lifts of the classes already
/// placed, as a rectangular block on free cells.
pub fn gen_scene(spec: &CooccurrenceSpec, seed: u64) -> Result<Scene> {
    gen_scene_with_id(spec, seed, format!("s{seed}"))
}

pub fn gen_scene_with_id(spec: &CooccurrenceSpec, seed: u64, id: String) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = spec.grid_size;
    let mut scene = Scene::empty(id, g, seed, spec.noise_sigma);
    let mut order: Vec<ClassId> = (0..spec.class_count()).map(ClassId).collect();
    order.shuffle(&mut rng);
    let mut placed: Vec<ClassId> = Vec::new();
    for class in order {
        if placed.len() >= spec.max_objects {
            break;
        }
        let p = spec.presence_probability(class, &placed);
        if rng.random::<f64>() >= p {
            continue;
        }
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let height = rng.random_range(1..=spec.max_block_side);
            let width = rng.random_range(1..=spec.max_block_side);
            let row = rng.random_range(0..=g - height);
            let col = rng.random_range(0..=g - width);
            let block = Placement { class, row, col, height, width };
            if block.cells(g).all(|i| scene.cells[i] == Cell::Empty) {
                scene.place(block)?;
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place {} in scene {} after {PLACEMENT_RETRIES} attempts",
                spec.classes[class.0], scene.id
            )));
        }
        placed.push(class);
    }
    Ok(scene)
}

fn eligible(placement: &Placement, grid_size: usize) -> bool {
    let f = placement.area_fraction(grid_size);
    f >= MIN_TARGET_AREA - 1e-12 && f <= MAX_TARGET_AREA + 1e-12
}

/// Picks the counterfactual target: among present objects whose block covers
/// 5%-25% of the grid, the one with the smallest count in `class_freq`, ties
/// going to the lowest class id.
pub fn select_target(scene: &Scene, class_freq: &[usize]) -> Result<ClassId> {
    scene
        .placements
        .iter()
        .filter(|p| scene.contains(p.class) && eligible(p, scene.grid_size))
        .map(|p| p.class)
        .min_by_key(|c| (class_freq.get(c.0).copied().unwrap_or(0), c.0))
        .ok_or_else(|| Error::NoMaskableTarget(scene.id.clone()))
}

/// Replaces every cell of `target` with the mask value.
pub fn mask_object(scene: &Scene, target: ClassId) -> Result<Scene> {
    if !scene.contains(target) {
        return Err(Error::Precondition(format!(
            "class {} is not present in scene {}",
            target.0, scene.id
        )));
    }
    let mut out = scene.clone();
    for cell in &mut out.cells {
        if *cell == Cell::Object(target) {
            *cell = Cell::Mask;
        }
    }
    out.masked_class = Some(target);
    out.id = format!("{}-cf", scene.id);
    Ok(out)
}
