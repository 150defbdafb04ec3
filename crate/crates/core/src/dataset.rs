//! Dialogue corpus format, dihedral augmentation, the synthetic damage image
//! generator, and keyword-based category evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{split_pieces, Vocabulary};
use crate::error::{contract, Error, Result};
use crate::imageio;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One `{"img", "prompt", "label"}` training triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DamageRecord {
    pub img: String,
    pub prompt: String,
    pub label: String,
}

const FIELDS: [&str; 3] = ["img", "prompt", "label"];

/// Parses and validates a corpus: a JSON array of objects with exactly the
/// keys `img`, `prompt` and `label`, each a non-empty string, with no
/// repeated `(img, prompt)` pair.
pub fn parse_corpus(text: &str) -> Result<Vec<DamageRecord>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let items = value
        .as_array()
        .ok_or_else(|| Error::Data("corpus must be a JSON array".into()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let bad = |reason: String| Error::InvalidRecord { index, reason };
        let obj = item.as_object().ok_or_else(|| bad("record is not an object".into()))?;
        for key in obj.keys() {
            if !FIELDS.contains(&key.as_str()) {
                return Err(bad(format!("unexpected field {key:?}")));
            }
        }
        let mut vals = Vec::with_capacity(3);
        for field in FIELDS {
            let v = obj
                .get(field)
                .ok_or_else(|| bad(format!("missing field {field:?}")))?
                .as_str()
                .ok_or_else(|| bad(format!("field {field:?} is not a string")))?;
            if v.trim().is_empty() {
                return Err(bad(format!("field {field:?} is empty")));
            }
            vals.push(v.to_string());
        }
        let rec = DamageRecord {
            img: vals[0].clone(),
            prompt: vals[1].clone(),
            label: vals[2].clone(),
        };
        if !seen.insert((rec.img.clone(), rec.prompt.clone())) {
            return Err(bad(format!("duplicate img+prompt pair for {:?}", rec.img)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Normalized corpus text: pretty-printed JSON with a trailing newline.
pub fn corpus_to_string(records: &[DamageRecord]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(records)?;
    s.push('\n');
    Ok(s)
}

fn resolves_under(root: &Path, rel: &str) -> bool {
    let p = Path::new(rel);
    p.is_relative()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
        && root.join(p).is_file()
}

/// Loads `path` and checks that every `img` resolves to a file under the
/// corpus directory.
pub fn load_corpus(path: &Path) -> Result<Vec<DamageRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_corpus(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    for (index, r) in records.iter().enumerate() {
        if !resolves_under(root, &r.img) {
            return Err(Error::InvalidRecord {
                index,
                reason: format!("image {:?} does not resolve under {}", r.img, root.display()),
            });
        }
    }
    Ok(records)
}

pub fn save_corpus(records: &[DamageRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, corpus_to_string(records)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Question,
    Answer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Splits a prompt into its `Q:`/`A:` turns. Text before the first marker
/// (or a prompt with no markers) is a question.
pub fn split_turns(prompt: &str) -> Vec<Turn> {
    let chars: Vec<char> = prompt.chars().collect();
    let is_word = |c: char| c.is_alphanumeric();
    let mut marks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if (c == 'Q' || c == 'A')
            && (i == 0 || !is_word(chars[i - 1]))
            && (i + 1 == chars.len() || !is_word(chars[i + 1]))
        {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if j < chars.len() && chars[j] == ':' {
                let role = if c == 'Q' { Role::Question } else { Role::Answer };
                marks.push((i, j + 1, role));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    let text = |a: usize, b: usize| chars[a..b].iter().collect::<String>().trim().to_string();
    let mut turns = Vec::new();
    let first = marks.first().map_or(chars.len(), |m| m.0);
    if !text(0, first).is_empty() {
        turns.push(Turn {
            role: Role::Question,
            text: text(0, first),
        });
    }
    for (k, &(_, body, role)) in marks.iter().enumerate() {
        let end = marks.get(k + 1).map_or(chars.len(), |m| m.0);
        turns.push(Turn {
            role,
            text: text(body, end),
        });
    }
    turns
}

/// The seven damage categories, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DamageClass {
    RoadPothole,
    ConcreteCrack,
    ConcreteHole,
    ConcreteSpalling,
    SteelCrack,
    SteelCorrosion,
    Undamaged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Material {
    Concrete,
    Road,
    Steel,
}

impl DamageClass {
    pub const ALL: [DamageClass; 7] = [
        DamageClass::RoadPothole,
        DamageClass::ConcreteCrack,
        DamageClass::ConcreteHole,
        DamageClass::ConcreteSpalling,
        DamageClass::SteelCrack,
        DamageClass::SteelCorrosion,
        DamageClass::Undamaged,
    ];

    /// Row label in evaluation reports.
    pub fn display_name(self) -> &'static str {
        match self {
            DamageClass::RoadPothole => "Road potholes",
            DamageClass::ConcreteCrack => "Concrete cracks",
            DamageClass::ConcreteHole => "Concrete holes",
            DamageClass::ConcreteSpalling => "Concrete spalling and rebar exposure",
            DamageClass::SteelCrack => "Steel elements cracks",
            DamageClass::SteelCorrosion => "Steel elements spalling and corrosion",
            DamageClass::Undamaged => "undamaged",
        }
    }

    /// Word stems that must all begin some word of a rationale for it to
    /// name this class.
    pub fn keywords(self) -> &'static [&'static str] {
        match self {
            DamageClass::RoadPothole => &["pothole", "road"],
            DamageClass::ConcreteCrack => &["crack", "concrete"],
            DamageClass::ConcreteHole => &["hole", "concrete"],
            DamageClass::ConcreteSpalling => &["spall", "expos"],
            DamageClass::SteelCrack => &["crack", "steel"],
            DamageClass::SteelCorrosion => &["corro"],
            DamageClass::Undamaged => &["no", "damage"],
        }
    }

    /// Stage-1 answer naming the category.
    pub fn rationale(self) -> &'static str {
        match self {
            DamageClass::RoadPothole => "There is a pothole on the road in the picture.",
            DamageClass::ConcreteCrack => "There are cracks on the surface of the concrete in the picture.",
            DamageClass::ConcreteHole => "There are holes in the concrete surface.",
            DamageClass::ConcreteSpalling => "There are concrete spalling and exposed steel bars.",
            DamageClass::SteelCrack => "There is a crack on the steel components.",
            DamageClass::SteelCorrosion => "The components in the picture are corroded.",
            DamageClass::Undamaged => "There is no obvious damage.",
        }
    }

    /// Stage-2 feature descriptions. None depends on image orientation.
    pub fn descriptions(self) -> &'static [&'static str] {
        match self {
            DamageClass::RoadPothole => &[
                "There is a pothole on the surface of the road, and the materials around it have cracked and been crushed.",
                "A large pothole has formed in the road surface, and loose material is scattered around its edge.",
            ],
            DamageClass::ConcreteCrack => &[
                "A thin crack runs across the surface of the concrete, and its path shows an irregular curve.",
                "A long crack is visible on the concrete surface, and its width stays small along its length.",
            ],
            DamageClass::ConcreteHole => &[
                "Several small holes are scattered over the concrete surface, and their edges are clearly defined.",
                "The concrete surface contains multiple small holes of different sizes.",
            ],
            DamageClass::ConcreteSpalling => &[
                "A large amount of concrete on the surface of the structure has spalled off, causing the internal steel bars to be exposed.",
                "The concrete cover has spalled off in one area, and the exposed steel bars show signs of corrosion.",
            ],
            DamageClass::SteelCrack => &[
                "On the surface of the steel component, a tiny crack is revealed in the area adjacent to the weld.",
                "A crack was found on the surface of a steel element, immediately adjacent to the weld area.",
            ],
            DamageClass::SteelCorrosion => &[
                "The protective layer on the surface of the component has peeled off, causing the component to be exposed and suffer from serious corrosion damage.",
                "The protection surface of the component was peeling off, leaving it exposed and heavily rusted.",
            ],
            DamageClass::Undamaged => &[
                "The surface of the structure is intact, and no cracks, holes or corrosion can be found.",
                "No damage is visible on the structure in the picture.",
            ],
        }
    }

    pub fn material(self) -> Option<Material> {
        match self {
            DamageClass::RoadPothole => Some(Material::Road),
            DamageClass::ConcreteCrack | DamageClass::ConcreteHole | DamageClass::ConcreteSpalling => {
                Some(Material::Concrete)
            }
            DamageClass::SteelCrack | DamageClass::SteelCorrosion => Some(Material::Steel),
            DamageClass::Undamaged => None,
        }
    }
}

/// Whether `text` names `class`: every keyword stem begins some word.
pub fn mentions_class(text: &str, class: DamageClass) -> bool {
    let words = split_pieces(text);
    class.keywords().iter().all(|k| words.iter().any(|w| w.starts_with(k)))
}

/// Stage-1 question phrasings.
pub const STAGE1_QUESTIONS: [&str; 5] = [
    "Determine whether there is damage to the structure in the picture.",
    "Based on the picture, determine whether there is damage to the structure in the picture.",
    "Judge whether there is damage to the structure in the picture.",
    "Please find all structural damage in the picture.",
    "Please check if there is any damage to the structure shown in the picture.",
];

/// Stage-2 question phrasings.
pub const STAGE2_QUESTIONS: [&str; 3] = [
    "Please describe the characteristics of the damage in detail.",
    "Please describe the features of the damage based on the picture.",
    "Please describe the characteristics of the damage according to the picture.",
];

/// Vocabulary covering a corpus and every built-in phrasing.
pub fn corpus_vocabulary(records: &[DamageRecord]) -> Vocabulary {
    let builtin = STAGE1_QUESTIONS.iter().chain(STAGE2_QUESTIONS.iter()).copied().chain(
        DamageClass::ALL
            .iter()
            .flat_map(|c| std::iter::once(c.rationale()).chain(c.descriptions().iter().copied())),
    );
    Vocabulary::build(builtin.chain(records.iter().flat_map(|r| [r.prompt.as_str(), r.label.as_str()])))
}

// ---------------------------------------------------------------------------
// Augmentation

/// The eight rotations and reflections of a square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "id",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::FlipH => "fliph",
            Dihedral::FlipV => "flipv",
            Dihedral::Transpose => "transpose",
            Dihedral::AntiTranspose => "antitranspose",
        }
    }

    fn swaps_axes(self) -> bool {
        matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose
        )
    }

    /// Source pixel of output pixel `(y, x)` for an `h×w` input.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Dihedral::Identity => (y, x),
            // clockwise quarter turn: output is w×h
            Dihedral::Rot90 => (h - 1 - x, y),
            Dihedral::Rot180 => (h - 1 - y, w - 1 - x),
            Dihedral::Rot270 => (x, w - 1 - y),
            Dihedral::FlipH => (y, w - 1 - x),
            Dihedral::FlipV => (h - 1 - y, x),
            Dihedral::Transpose => (x, y),
            Dihedral::AntiTranspose => (h - 1 - x, w - 1 - y),
        }
    }

    /// Applies the transform to an `H×W×C` image or an `H×W` mask.
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        let (h, w, c) = match t.shape() {
            [h, w] => (*h, *w, 1),
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::Contract(format!("cannot transform shape {s:?}"))),
        };
        let (oh, ow) = if self.swaps_axes() { (w, h) } else { (h, w) };
        let mut shape = t.shape().to_vec();
        shape[0] = oh;
        shape[1] = ow;
        let src = t.data();
        Ok(Tensor::from_fn(&shape, |i| {
            let ch = i % c;
            let p = i / c;
            let (sy, sx) = self.source(p / ow, p % ow, h, w);
            src[(sy * w + sx) * c + ch]
        }))
    }

    /// `self` followed by `other`.
    pub fn then(self, other: Dihedral) -> Dihedral {
        let probe = Tensor::from_fn(&[2, 3], |i| i as f64);
        let out = other.apply(&self.apply(&probe).expect("2-d")).expect("2-d");
        *Dihedral::ALL
            .iter()
            .find(|d| d.apply(&probe).expect("2-d") == out)
            .expect("dihedral group is closed")
    }
}

/// Transforms emitted by [`augment`].
pub const AUGMENTATIONS: [Dihedral; 5] = [
    Dihedral::Rot90,
    Dihedral::Rot180,
    Dihedral::Rot270,
    Dihedral::FlipH,
    Dihedral::FlipV,
];

/// Rotated and flipped copies of a record. Text is unchanged (synthetic
/// labels carry no orientation phrases); the image path gains a transform
/// suffix.
pub fn augment(
    record: &DamageRecord,
    image: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Vec<(DamageRecord, Tensor, Option<Tensor>)>> {
    let (stem, ext) = match record.img.rsplit_once('.') {
        Some((s, e)) => (s.to_string(), format!(".{e}")),
        None => (record.img.clone(), String::new()),
    };
    AUGMENTATIONS
        .iter()
        .map(|d| {
            let rec = DamageRecord {
                img: format!("{stem}_{}{ext}", d.name()),
                ..record.clone()
            };
            Ok((rec, d.apply(image)?, mask.map(|m| d.apply(m)).transpose()?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub side: usize,
    pub per_class: usize,
    /// Upper bound of the per-record clutter level, in `[0, 1]`.
    pub clutter_level: f64,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            side: 32,
            per_class: 100,
            clutter_level: 1.0,
            eval_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Records with at least this clutter form the high-clutter subset.
pub const HIGH_CLUTTER: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

/// Per-record metadata stored next to the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub img: String,
    pub mask: String,
    pub class: DamageClass,
    pub clutter: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecord {
    pub record: DamageRecord,
    pub meta: RecordMeta,
    /// `H×W×3`, integer values in `0..=255`.
    pub image: Tensor,
    /// `H×W`, 0/1.
    pub mask: Tensor,
}

impl SyntheticRecord {
    pub fn class(&self) -> DamageClass {
        self.meta.class
    }

    /// Stage-1 question, rationale and stage-2 question recovered from the prompt.
    pub fn stages(&self) -> Result<(String, String, String)> {
        prompt_stages(&self.record.prompt)
    }
}

/// Extracts `(stage-1 question, rationale, stage-2 question)` from a
/// `Q: … A: … Q: …` prompt.
pub fn prompt_stages(prompt: &str) -> Result<(String, String, String)> {
    let turns = split_turns(prompt);
    match turns.as_slice() {
        [q1, a1, q2] if q1.role == Role::Question && a1.role == Role::Answer && q2.role == Role::Question => {
            Ok((q1.text.clone(), a1.text.clone(), q2.text.clone()))
        }
        _ => Err(Error::Data(format!("prompt is not a Q/A/Q dialogue: {prompt:?}"))),
    }
}

struct Canvas {
    side: usize,
    rgb: Vec<[f64; 3]>,
    mask: Vec<bool>,
}

impl Canvas {
    fn new(side: usize, base: [f64; 3]) -> Self {
        Self {
            side,
            rgb: vec![base; side * side],
            mask: vec![false; side * side],
        }
    }

    fn idx(&self, y: isize, x: isize) -> Option<usize> {
        let s = self.side as isize;
        (y >= 0 && x >= 0 && y < s && x < s).then(|| (y * s + x) as usize)
    }

    fn set(&mut self, y: isize, x: isize, color: [f64; 3], damage: bool) {
        if let Some(i) = self.idx(y, x) {
            self.rgb[i] = color;
            if damage {
                self.mask[i] = true;
            }
        }
    }

    fn shift(&mut self, y: isize, x: isize, delta: [f64; 3]) {
        if let Some(i) = self.idx(y, x) {
            for c in 0..3 {
                self.rgb[i][c] += delta[c];
            }
        }
    }

    /// Pixels inside a ragged disc `r(θ) = radius·(1 + ragged·wobble(θ))`.
    fn blob(&self, cy: f64, cx: f64, radius: f64, ragged: f64, rng: &mut RngStream) -> Vec<(isize, isize)> {
        let k = 3.0 + rng.below(3) as f64;
        let phase = rng.range(0.0, std::f64::consts::TAU);
        let phase2 = rng.range(0.0, std::f64::consts::TAU);
        let reach = (radius * (1.0 + ragged) + 1.0).ceil() as isize;
        let mut out = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let y = cy.round() as isize + dy;
                let x = cx.round() as isize + dx;
                let (fy, fx) = (y as f64 - cy, x as f64 - cx);
                let theta = fy.atan2(fx);
                let wobble = 0.6 * (k * theta + phase).sin() + 0.4 * ((k + 2.0) * theta + phase2).sin();
                let r = radius * (1.0 + ragged * wobble);
                if fy * fy + fx * fx <= r * r && self.idx(y, x).is_some() {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn ellipse(&self, cy: f64, cx: f64, ry: f64, rx: f64) -> Vec<(isize, isize)> {
        let mut out = Vec::new();
        for y in (cy - ry).floor() as isize..=(cy + ry).ceil() as isize {
            for x in (cx - rx).floor() as isize..=(cx + rx).ceil() as isize {
                let (fy, fx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                if fy * fy + fx * fx <= 1.0 && self.idx(y, x).is_some() {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// Pixels of a polyline sampled at half-pixel steps.
    fn polyline(&self, pts: &[(f64, f64)]) -> Vec<(isize, isize)> {
        let mut out = Vec::new();
        for w in pts.windows(2) {
            let ((y0, x0), (y1, x1)) = (w[0], w[1]);
            let steps = (((y1 - y0).abs().max((x1 - x0).abs())) * 2.0).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let p = (
                    (y0 + t * (y1 - y0)).round() as isize,
                    (x0 + t * (x1 - x0)).round() as isize,
                );
                if self.idx(p.0, p.1).is_some() && out.last() != Some(&p) {
                    out.push(p);
                }
            }
        }
        out
    }

    fn into_tensors(self) -> (Tensor, Tensor) {
        let s = self.side;
        let img = Tensor::from_fn(&[s, s, 3], |i| self.rgb[i / 3][i % 3].round().clamp(0.0, 255.0));
        let mask = Tensor::from_fn(&[s, s], |i| self.mask[i] as u8 as f64);
        (img, mask)
    }
}

fn gray(v: f64) -> [f64; 3] {
    [v, v, v]
}

/// Renders one image and its exact damage mask.
pub fn render_sample(class: DamageClass, side: usize, clutter: f64, rng: &mut RngStream) -> (Tensor, Tensor) {
    let material = class
        .material()
        .unwrap_or_else(|| *rng.pick(&[Material::Concrete, Material::Road, Material::Steel]));
    let s = side as f64;
    let base = match material {
        Material::Concrete => [168.0, 166.0, 160.0],
        Material::Road => [78.0, 78.0, 84.0],
        Material::Steel => [92.0, 112.0, 152.0],
    };
    let mut cv = Canvas::new(side, base);
    let grain = match material {
        Material::Road => 9.0,
        _ => 5.0,
    };
    for i in 0..side * side {
        let g = rng.normal() * grain;
        for c in 0..3 {
            cv.rgb[i][c] += g;
        }
    }

    // weld seam on steel
    let mut seam: Option<(bool, isize)> = None;
    if material == Material::Steel {
        let horizontal = rng.below(2) == 0;
        let at = (s * 0.3 + rng.range(0.0, s * 0.4)) as isize;
        seam = Some((horizontal, at));
        for t in 0..side as isize {
            for off in 0..2 {
                let (y, x) = if horizontal { (at + off, t) } else { (t, at + off) };
                cv.set(y, x, [150.0, 158.0, 178.0], false);
            }
        }
    }

    // clutter: illumination gradient, stains, faint joints
    let gy = rng.range(-1.0, 1.0) * 28.0 * clutter;
    let gx = rng.range(-1.0, 1.0) * 28.0 * clutter;
    for y in 0..side {
        for x in 0..side {
            let d = gy * (y as f64 / s - 0.5) + gx * (x as f64 / s - 0.5);
            cv.shift(y as isize, x as isize, gray(d));
        }
    }
    let stains = (clutter * 7.0).round() as usize;
    for _ in 0..stains {
        let cy = rng.range(0.0, s);
        let cx = rng.range(0.0, s);
        if rng.below(3) == 0 {
            let len = rng.range(s * 0.3, s * 0.8);
            let ang = rng.range(0.0, std::f64::consts::PI);
            let pts = [(cy, cx), (cy + len * ang.sin(), cx + len * ang.cos())];
            let d = rng.range(-30.0, -15.0);
            for (y, x) in cv.polyline(&pts) {
                cv.shift(y, x, gray(d));
            }
        } else {
            let r = rng.range(1.5, 5.0);
            let d = rng.range(-40.0, 30.0);
            let tint = [rng.range(-8.0, 8.0), rng.range(-8.0, 8.0), rng.range(-8.0, 8.0)];
            for (y, x) in cv.ellipse(cy, cx, r, r * rng.range(0.6, 1.4)) {
                cv.shift(y, x, [d + tint[0], d + tint[1], d + tint[2]]);
            }
        }
    }

    let margin = s * 0.2;
    let centre = |rng: &mut RngStream| (rng.range(margin, s - margin), rng.range(margin, s - margin));
    match class {
        DamageClass::ConcreteCrack => {
            let vertical = rng.below(2) == 0;
            let n = 4 + rng.below(3);
            let mut across = rng.range(s * 0.25, s * 0.75);
            let mut pts = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let along = (s - 1.0) * k as f64 / n as f64;
                pts.push(if vertical { (along, across) } else { (across, along) });
                across = (across + rng.range(-3.5, 3.5)).clamp(2.0, s - 3.0);
            }
            let wide = rng.below(2) == 0;
            for (y, x) in cv.polyline(&pts) {
                let v = rng.range(28.0, 48.0);
                cv.set(y, x, gray(v), true);
                if wide {
                    let (y2, x2) = if vertical { (y, x + 1) } else { (y + 1, x) };
                    cv.set(y2, x2, gray(v + 6.0), true);
                }
            }
        }
        DamageClass::ConcreteHole => {
            let n = 2 + rng.below(4);
            for _ in 0..n {
                let (cy, cx) = centre(rng);
                let r = rng.range(1.2, 2.6);
                for (y, x) in cv.ellipse(cy, cx, r, r * rng.range(0.8, 1.25)) {
                    cv.set(y, x, gray(rng.range(22.0, 40.0)), true);
                }
            }
        }
        DamageClass::RoadPothole => {
            let (cy, cx) = centre(rng);
            let r = rng.range(s * 0.2, s * 0.3);
            for (y, x) in cv.blob(cy, cx, r, 0.25, rng) {
                let v = rng.range(14.0, 32.0);
                cv.set(y, x, [v, v, v + 3.0], true);
            }
        }
        DamageClass::ConcreteSpalling => {
            let (cy, cx) = centre(rng);
            let r = rng.range(s * 0.18, s * 0.27);
            let patch = cv.blob(cy, cx, r, 0.3, rng);
            for &(y, x) in &patch {
                let v = rng.range(95.0, 120.0);
                cv.set(y, x, [v + 8.0, v, v - 10.0], true);
            }
            let horizontal = rng.below(2) == 0;
            let gap = 3 + rng.below(2) as isize;
            let first = -(gap * 2) / 2;
            for k in 0..3 {
                let off = first + k * gap;
                for &(y, x) in &patch {
                    let rel = if horizontal {
                        y - cy.round() as isize
                    } else {
                        x - cx.round() as isize
                    };
                    if rel == off {
                        cv.set(y, x, [150.0, 82.0, 48.0], true);
                    }
                }
            }
        }
        DamageClass::SteelCrack => {
            let (horizontal, at) = seam.expect("steel has a seam");
            let side_off = if rng.below(2) == 0 {
                -(2 + rng.below(3) as isize)
            } else {
                3 + rng.below(3) as isize
            };
            let len = rng.range(s * 0.4, s * 0.75);
            let start = rng.range(1.0, s - len - 1.0);
            let line = (at + side_off) as f64;
            let wiggle = rng.range(-1.5, 1.5);
            let pts = [
                if horizontal { (line, start) } else { (start, line) },
                if horizontal {
                    (line + wiggle, start + len)
                } else {
                    (start + len, line + wiggle)
                },
            ];
            for (y, x) in cv.polyline(&pts) {
                cv.set(y, x, gray(rng.range(20.0, 38.0)), true);
            }
        }
        DamageClass::SteelCorrosion => {
            let (cy, cx) = centre(rng);
            let r = rng.range(s * 0.16, s * 0.28);
            for (y, x) in cv.blob(cy, cx, r, 0.35, rng) {
                let heavy = rng.uniform() < 0.6;
                let c = if heavy {
                    [rng.range(150.0, 190.0), rng.range(70.0, 100.0), rng.range(25.0, 50.0)]
                } else {
                    [rng.range(110.0, 140.0), rng.range(60.0, 80.0), rng.range(35.0, 55.0)]
                };
                cv.set(y, x, c, true);
            }
        }
        DamageClass::Undamaged => {}
    }

    let noise = 2.0 + 6.0 * clutter;
    for i in 0..side * side {
        for c in 0..3 {
            cv.rgb[i][c] += rng.normal() * noise;
        }
    }
    cv.into_tensors()
}

/// Generates `per_class` records for each class in report order, with a
/// per-class stratified train/eval split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticRecord>> {
    contract!(spec.per_class > 0, "synthetic spec needs a positive per-class count");
    contract!(spec.side >= 8, "synthetic images need a side of at least 8");
    contract!(
        (0.0..=1.0).contains(&spec.clutter_level),
        "clutter level {} outside [0, 1]",
        spec.clutter_level
    );
    contract!(
        (0.0..1.0).contains(&spec.eval_fraction),
        "eval fraction must lie in [0, 1)"
    );
    let n_eval = (spec.per_class as f64 * spec.eval_fraction).round() as usize;
    let mut out = Vec::with_capacity(spec.per_class * 7);
    for (ci, &class) in DamageClass::ALL.iter().enumerate() {
        let mut split_rng = RngStream::derive(spec.seed, &format!("split-{ci}"));
        let order = split_rng.permutation(spec.per_class);
        let mut is_eval = vec![false; spec.per_class];
        for &k in &order[..n_eval] {
            is_eval[k] = true;
        }
        for k in 0..spec.per_class {
            let index = ci * spec.per_class + k;
            let mut rng = RngStream::derive(spec.seed, &format!("record-{index}"));
            let clutter = rng.range(0.0, spec.clutter_level);
            let (image, mask) = render_sample(class, spec.side, clutter, &mut rng);
            let s1 = *rng.pick(&STAGE1_QUESTIONS);
            let s2 = *rng.pick(&STAGE2_QUESTIONS);
            let label = *rng.pick(class.descriptions());
            let img = format!("images/{index:05}.ppm");
            let record = DamageRecord {
                img: img.clone(),
                prompt: format!("Q: {s1} A: {} Q: {s2}", class.rationale()),
                label: label.to_string(),
            };
            let meta = RecordMeta {
                img,
                mask: format!("masks/{index:05}.pgm"),
                class,
                clutter,
                split: if is_eval[k] { Split::Eval } else { Split::Train },
            };
            out.push(SyntheticRecord {
                record,
                meta,
                image,
                mask,
            });
        }
    }
    Ok(out)
}

pub const CORPUS_FILE: &str = "corpus.json";
pub const META_FILE: &str = "meta.json";

/// Writes `dir/{corpus.json, meta.json, images/*.ppm, masks/*.pgm}`.
pub fn write_synthetic(dir: &Path, records: &[SyntheticRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in records {
        imageio::write_pnm(&dir.join(&r.meta.img), &r.image)?;
        imageio::write_mask(&dir.join(&r.meta.mask), &r.mask)?;
    }
    let corpus: Vec<DamageRecord> = records.iter().map(|r| r.record.clone()).collect();
    save_corpus(&corpus, &dir.join(CORPUS_FILE))?;
    let meta: Vec<&RecordMeta> = records.iter().map(|r| &r.meta).collect();
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    let path = dir.join(META_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads a corpus directory written by [`write_synthetic`].
pub fn read_synthetic(dir: &Path) -> Result<Vec<SyntheticRecord>> {
    let corpus = load_corpus(&dir.join(CORPUS_FILE))?;
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Vec<RecordMeta> = serde_json::from_str(&text)?;
    if meta.len() != corpus.len() {
        return Err(Error::Data(format!(
            "{} has {} entries for {} records",
            META_FILE,
            meta.len(),
            corpus.len()
        )));
    }
    corpus
        .into_iter()
        .zip(meta)
        .enumerate()
        .map(|(index, (record, meta))| {
            if meta.img != record.img {
                return Err(Error::InvalidRecord {
                    index,
                    reason: format!("metadata names {:?}, corpus names {:?}", meta.img, record.img),
                });
            }
            let image = imageio::read_image(&dir.join(&record.img))?;
            let mask = imageio::read_mask(&dir.join(&meta.mask))?;
            Ok(SyntheticRecord {
                record,
                meta,
                image,
                mask,
            })
        })
        .collect()
}

pub fn corpus_dir_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if let Ok(entries) = fs::read_dir(&d) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
    }
    files.sort();
    files
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub correct: usize,
    pub total: usize,
}

/// Per-category correct counts in report order plus overall accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub rows: Vec<CategoryRow>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl CategoryReport {
    pub fn table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>12}", "category", title);
        for r in &self.rows {
            let _ = writeln!(s, "{:<40} {:>6}/{:<5}", r.category, r.correct, r.total);
        }
        let _ = writeln!(s, "{:<40} {:>11.2}%", "Accuracy", 100.0 * self.accuracy);
        s
    }
}

/// Scores `(gold class, stage-1 rationale)` pairs: a prediction is correct
/// when the rationale names the gold class.
pub fn evaluate_categories<S: AsRef<str>>(items: &[(DamageClass, S)]) -> Result<CategoryReport> {
    contract!(!items.is_empty(), "cannot evaluate an empty split");
    let mut rows: Vec<CategoryRow> = DamageClass::ALL
        .iter()
        .map(|c| CategoryRow {
            category: c.display_name().to_string(),
            correct: 0,
            total: 0,
        })
        .collect();
    for (class, text) in items {
        let row = &mut rows[*class as usize];
        row.total += 1;
        if mentions_class(text.as_ref(), *class) {
            row.correct += 1;
        }
    }
    let correct = rows.iter().map(|r| r.correct).sum();
    Ok(CategoryReport {
        rows,
        correct,
        total: items.len(),
        accuracy: correct as f64 / items.len() as f64,
    })
}
