//! Synthetic grid-world VQA data with a controllable question→answer bias.
//!
//! A [`Scene`] is an 8×8 grid of cells, each empty or holding one object
//! (building, water, road, tree). Scenes are rendered to 32×32 RGB images by
//! painting every occupied 4×4 cell with the object's color. Questions come
//! from a fixed set of [`Template`]s in four question types, and answers are
//! computed from the scene.
//!
//! The training split is biased: every template has a designated majority
//! answer and a fraction ρ of its samples are forced to it. The test split is
//! balanced: each template cycles through all of its feasible answers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const GRID_SIZE: usize = 8;
pub const IMAGE_SIZE: usize = 32;
pub const MAX_COUNT: usize = 10;
/// A scene is urban iff it holds at least this many buildings.
pub const URBAN_THRESHOLD: usize = 6;
pub const MAX_ATTEMPTS: usize = 10_000;
pub const ANSWER_COUNT: usize = 8;

pub const BACKGROUND: [u8; 3] = [210, 190, 150];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ObjectKind {
    Building,
    Water,
    Road,
    Tree,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [Self::Building, Self::Water, Self::Road, Self::Tree];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Building => "building",
            Self::Water => "water",
            Self::Road => "road",
            Self::Tree => "tree",
        }
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            Self::Building => [128, 128, 128],
            Self::Water => [0, 0, 255],
            Self::Road => [40, 40, 40],
            Self::Tree => [0, 160, 0],
        }
    }

    pub fn from_color(rgb: [u8; 3]) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.color() == rgb)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlacedObject {
    pub kind: ObjectKind,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scene {
    pub grid_size: usize,
    pub objects: Vec<PlacedObject>,
    /// Indexed by [`ObjectKind::index`].
    pub counts: [usize; 4],
}

impl Scene {
    pub fn empty(grid_size: usize) -> Self {
        Self {
            grid_size,
            objects: Vec::new(),
            counts: [0; 4],
        }
    }

    /// Builds a scene from an object list, recomputing the counts.
    pub fn from_objects(grid_size: usize, objects: Vec<PlacedObject>) -> Result<Self> {
        let mut counts = [0; 4];
        for o in &objects {
            counts[o.kind.index()] += 1;
        }
        let scene = Self {
            grid_size,
            objects,
            counts,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn count(&self, kind: ObjectKind) -> usize {
        self.counts[kind.index()]
    }

    pub fn is_urban(&self) -> bool {
        self.count(ObjectKind::Building) >= URBAN_THRESHOLD
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || !IMAGE_SIZE.is_multiple_of(self.grid_size) {
            return Err(Error::InvalidConfig(format!(
                "grid size {} does not divide image size {}",
                self.grid_size, IMAGE_SIZE
            )));
        }
        let mut occupied = vec![false; self.grid_size * self.grid_size];
        let mut counts = [0; 4];
        for o in &self.objects {
            if o.row >= self.grid_size || o.col >= self.grid_size {
                return Err(Error::InvalidConfig(format!(
                    "object at ({}, {}) outside a {}-cell grid",
                    o.row, o.col, self.grid_size
                )));
            }
            let cell = &mut occupied[o.row * self.grid_size + o.col];
            if *cell {
                return Err(Error::InvalidConfig(format!(
                    "two objects in cell ({}, {})",
                    o.row, o.col
                )));
            }
            *cell = true;
            counts[o.kind.index()] += 1;
        }
        if counts != self.counts || counts.iter().any(|&c| c > MAX_COUNT) {
            return Err(Error::InvalidConfig(format!(
                "scene counts {:?} disagree with objects {:?}",
                self.counts, counts
            )));
        }
        Ok(())
    }
}

/// An RGB image stored row-major, channels last.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self { height, width, pixels }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x3 image needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum QuestionType {
    Presence,
    Count,
    Comparison,
    RuralUrban,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [Self::Presence, Self::Count, Self::Comparison, Self::RuralUrban];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Presence => "presence",
            Self::Count => "count",
            Self::Comparison => "comparison",
            Self::RuralUrban => "rural_urban",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.name() == name)
    }

    /// Answers valid for this question type.
    pub fn answers(self) -> &'static [Answer] {
        match self {
            Self::Presence | Self::Comparison => &[Answer::Yes, Answer::No],
            Self::Count => &[Answer::Count0, Answer::Count1To3, Answer::Count4To6, Answer::Count7To10],
            Self::RuralUrban => &[Answer::Rural, Answer::Urban],
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The closed answer vocabulary. Discriminants are the class ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Answer {
    Yes = 0,
    No = 1,
    Rural = 2,
    Urban = 3,
    Count0 = 4,
    Count1To3 = 5,
    Count4To6 = 6,
    Count7To10 = 7,
}

impl Answer {
    pub const ALL: [Answer; ANSWER_COUNT] = [
        Self::Yes,
        Self::No,
        Self::Rural,
        Self::Urban,
        Self::Count0,
        Self::Count1To3,
        Self::Count4To6,
        Self::Count7To10,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Yes => "yes",
            Self::No => "no",
            Self::Rural => "rural",
            Self::Urban => "urban",
            Self::Count0 => "count_0",
            Self::Count1To3 => "count_1_3",
            Self::Count4To6 => "count_4_6",
            Self::Count7To10 => "count_7_10",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn count_bin(count: usize) -> Self {
        match count {
            0 => Self::Count0,
            1..=3 => Self::Count1To3,
            4..=6 => Self::Count4To6,
            _ => Self::Count7To10,
        }
    }

    /// Inclusive count range covered by a count answer.
    pub fn count_range(self) -> Option<(usize, usize)> {
        match self {
            Self::Count0 => Some((0, 0)),
            Self::Count1To3 => Some((1, 3)),
            Self::Count4To6 => Some((4, 6)),
            Self::Count7To10 => Some((7, 10)),
            _ => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Answer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Answer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        Answer::from_name(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown answer `{s}`")))
    }
}

/// A concrete question template instantiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Template {
    Presence(ObjectKind),
    Count(ObjectKind),
    /// "are there more A than B"
    Comparison(ObjectKind, ObjectKind),
    RuralUrban,
}

impl Template {
    /// All 21 instantiations, grouped by question type.
    pub fn all() -> Vec<Template> {
        QuestionType::ALL.into_iter().flat_map(Self::for_type).collect()
    }

    pub fn for_type(qtype: QuestionType) -> Vec<Template> {
        match qtype {
            QuestionType::Presence => ObjectKind::ALL.into_iter().map(Self::Presence).collect(),
            QuestionType::Count => ObjectKind::ALL.into_iter().map(Self::Count).collect(),
            QuestionType::Comparison => {
                let mut v = Vec::with_capacity(12);
                for a in ObjectKind::ALL {
                    for b in ObjectKind::ALL {
                        if a != b {
                            v.push(Self::Comparison(a, b));
                        }
                    }
                }
                v
            }
            QuestionType::RuralUrban => vec![Self::RuralUrban],
        }
    }

    pub fn question_type(self) -> QuestionType {
        match self {
            Self::Presence(_) => QuestionType::Presence,
            Self::Count(_) => QuestionType::Count,
            Self::Comparison(..) => QuestionType::Comparison,
            Self::RuralUrban => QuestionType::RuralUrban,
        }
    }

    pub fn text(self) -> String {
        match self {
            Self::Presence(t) => format!("is there a {} in the image", t.name()),
            Self::Count(t) => format!("how many {} are there", t.name()),
            Self::Comparison(a, b) => format!("are there more {} than {}", a.name(), b.name()),
            Self::RuralUrban => String::from("is it a rural or an urban area"),
        }
    }

    /// Inverse of [`Template::text`].
    pub fn parse(text: &str) -> Option<Template> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let kind = |w: &str| ObjectKind::from_name(w);
        match words.as_slice() {
            ["is", "there", "a", t, "in", "the", "image"] => kind(t).map(Self::Presence),
            ["how", "many", t, "are", "there"] => kind(t).map(Self::Count),
            ["are", "there", "more", a, "than", b] => match (kind(a), kind(b)) {
                (Some(a), Some(b)) if a != b => Some(Self::Comparison(a, b)),
                _ => None,
            },
            ["is", "it", "a", "rural", "or", "an", "urban", "area"] => Some(Self::RuralUrban),
            _ => None,
        }
    }

    pub fn answer(self, scene: &Scene) -> Answer {
        match self {
            Self::Presence(t) => {
                if scene.count(t) > 0 {
                    Answer::Yes
                } else {
                    Answer::No
                }
            }
            Self::Count(t) => Answer::count_bin(scene.count(t)),
            Self::Comparison(a, b) => {
                if scene.count(a) > scene.count(b) {
                    Answer::Yes
                } else {
                    Answer::No
                }
            }
            Self::RuralUrban => {
                if scene.is_urban() {
                    Answer::Urban
                } else {
                    Answer::Rural
                }
            }
        }
    }
}

/// Closed question vocabulary; token id = position.
pub const QUESTION_WORDS: [&str; 21] = [
    "is", "there", "a", "in", "the", "image", "how", "many", "are", "more", "than", "it", "rural", "or", "an", "urban",
    "area", "building", "water", "road", "tree",
];

pub fn question_vocab_size() -> usize {
    QUESTION_WORDS.len()
}

/// Whitespace tokenizer over [`QUESTION_WORDS`].
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            QUESTION_WORDS
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::InvalidConfig(format!("word `{w}` not in the question vocabulary")))
        })
        .collect()
}

pub fn detokenize(tokens: &[usize]) -> Result<String> {
    let mut out = String::new();
    for (i, &t) in tokens.iter().enumerate() {
        let w = QUESTION_WORDS.get(t).ok_or(Error::UnknownToken {
            id: t,
            vocab: QUESTION_WORDS.len(),
        })?;
        if i > 0 {
            out.push(' ');
        }
        out.push_str(w);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub question_text: String,
    pub question_tokens: Vec<usize>,
    pub question_type: QuestionType,
    pub answer_id: usize,
    pub template: Template,
    pub scene: Scene,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SplitKind {
    TrainBiased,
    TestBalanced,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::TrainBiased => "train_biased",
            Self::TestBalanced => "test_balanced",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::TrainBiased, Self::TestBalanced]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<Sample>,
    pub kind: SplitKind,
    pub rho: f64,
    pub seed: u64,
    /// Template text → designated majority answer. Empty for balanced splits.
    pub bias_manifest: BTreeMap<String, Answer>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Constraint for scene sampling: the scene must answer `template` with
/// `answer`.
pub type SceneConstraint = (Template, Answer);

/// Samples a scene on the default grid from a seed.
pub fn sample_scene(seed: u64, constraint: Option<SceneConstraint>) -> Result<Scene> {
    let mut rng = rng::stream(seed, rng::DOMAIN_SAMPLE, &[]);
    sample_scene_with(&mut rng, GRID_SIZE, constraint)
}

/// Rejection sampler. Per-type counts are uniform on `0..=MAX_COUNT`; draws
/// that overflow the grid or violate the constraint are rejected, up to
/// [`MAX_ATTEMPTS`] times.
pub fn sample_scene_with<R: Rng + ?Sized>(
    rng: &mut R,
    grid_size: usize,
    constraint: Option<SceneConstraint>,
) -> Result<Scene> {
    let capacity = grid_size * grid_size;
    for _ in 0..MAX_ATTEMPTS {
        let mut counts = [0usize; 4];
        for c in &mut counts {
            *c = rng.gen_range(0..=MAX_COUNT);
        }
        if counts.iter().sum::<usize>() > capacity {
            continue;
        }
        let probe = Scene {
            grid_size,
            objects: Vec::new(),
            counts,
        };
        if let Some((template, answer)) = constraint {
            if template.answer(&probe) != answer {
                continue;
            }
        }
        let mut cells: Vec<usize> = (0..capacity).collect();
        cells.shuffle(rng);
        let mut objects = Vec::with_capacity(counts.iter().sum());
        let mut next = cells.into_iter();
        for kind in ObjectKind::ALL {
            for _ in 0..counts[kind.index()] {
                let cell = next.next().expect("capacity checked");
                objects.push(PlacedObject {
                    kind,
                    row: cell / grid_size,
                    col: cell % grid_size,
                });
            }
        }
        return Ok(Scene {
            grid_size,
            objects,
            counts,
        });
    }
    let (template, answer) = constraint.expect("unconstrained sampling only fails on an empty grid");
    Err(Error::ConstraintInfeasible {
        template: template.text(),
        answer: String::from(answer.name()),
        attempts: MAX_ATTEMPTS,
    })
}

pub fn render(scene: &Scene) -> Image {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, BACKGROUND);
    let cell = IMAGE_SIZE / scene.grid_size;
    for o in &scene.objects {
        let rgb = o.kind.color();
        for y in o.row * cell..(o.row + 1) * cell {
            for x in o.col * cell..(o.col + 1) * cell {
                img.set_pixel(y, x, rgb);
            }
        }
    }
    img
}

/// Reads a rendered image back into a scene. Every cell must be uniformly
/// painted with the background or an object color.
pub fn decode_scene(image: &Image, grid_size: usize) -> Result<Scene> {
    if image.height != IMAGE_SIZE || image.width != IMAGE_SIZE || !IMAGE_SIZE.is_multiple_of(grid_size) {
        return Err(Error::ShapeMismatch(format!(
            "cannot decode a {}x{} image on a {}-cell grid",
            image.height, image.width, grid_size
        )));
    }
    let cell = IMAGE_SIZE / grid_size;
    let mut objects = Vec::new();
    for row in 0..grid_size {
        for col in 0..grid_size {
            let rgb = image.pixel(row * cell, col * cell);
            for y in row * cell..(row + 1) * cell {
                for x in col * cell..(col + 1) * cell {
                    if image.pixel(y, x) != rgb {
                        return Err(Error::InvalidConfig(format!(
                            "cell ({row}, {col}) is not uniformly painted"
                        )));
                    }
                }
            }
            if rgb == BACKGROUND {
                continue;
            }
            let kind = ObjectKind::from_color(rgb)
                .ok_or_else(|| Error::InvalidConfig(format!("cell ({row}, {col}) has unknown color {rgb:?}")))?;
            objects.push(PlacedObject { kind, row, col });
        }
    }
    Scene::from_objects(grid_size, objects)
}

/// Picks a template of `question_type` and answers it from the scene.
pub fn generate_qa(scene: &Scene, question_type: QuestionType, seed: u64) -> (String, Answer) {
    let mut rng = rng::stream(seed, rng::DOMAIN_SAMPLE, &[question_type.index() as u64]);
    let templates = Template::for_type(question_type);
    let t = templates[rng.gen_range(0..templates.len())];
    (t.text(), t.answer(scene))
}

fn build_sample(scene: Scene, template: Template) -> Result<Sample> {
    let question_text = template.text();
    let question_tokens = tokenize(&question_text)?;
    Ok(Sample {
        image: render(&scene),
        question_tokens,
        question_text,
        question_type: template.question_type(),
        answer_id: template.answer(&scene).id(),
        template,
        scene,
    })
}

/// Generates a dataset split as a pure function of its arguments.
///
/// Question types are drawn uniformly, then a template uniformly within the
/// type. Target answers are assigned per template:
///
/// - `TrainBiased`: the k-th occurrence of a template gets the template's
///   majority answer when `floor((k+1)ρ + u) > floor(kρ + u)` for a
///   per-template phase `u`, else a uniformly drawn other feasible answer.
///   The majority rate within each template is therefore ρ up to 1/n.
/// - `TestBalanced`: the k-th occurrence gets feasible answer
///   `(k + offset) mod m`.
///
/// The scene is then rejection-sampled to produce the target answer.
pub fn generate_split(n: usize, kind: SplitKind, rho: f64, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::InvalidConfig(String::from("split size must be at least 1")));
    }
    if !(0.5..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!(
            "bias strength rho={rho} outside [0.5, 1.0]"
        )));
    }
    let templates = Template::all();
    let mut split_rng = rng::stream(seed, rng::DOMAIN_SPLIT, &[kind as u64]);
    let mut majority = BTreeMap::new();
    let mut phase = BTreeMap::new();
    let mut offset = BTreeMap::new();
    for &t in &templates {
        let answers = t.question_type().answers();
        majority.insert(t, answers[split_rng.gen_range(0..answers.len())]);
        phase.insert(t, split_rng.gen::<f64>());
        offset.insert(t, split_rng.gen_range(0..answers.len()));
    }

    let mut seen: BTreeMap<Template, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::stream(seed, rng::DOMAIN_SAMPLE, &[kind as u64, i as u64]);
        let qtype = QuestionType::ALL[rng.gen_range(0..4)];
        let candidates = Template::for_type(qtype);
        let template = candidates[rng.gen_range(0..candidates.len())];
        let k = {
            let e = seen.entry(template).or_insert(0);
            *e += 1;
            *e - 1
        };
        let answers = qtype.answers();
        let target = match kind {
            SplitKind::TrainBiased => {
                let major = majority[&template];
                let u = phase[&template];
                let hits = |k: usize| Float::floor(k as f64 * rho + u);
                if hits(k + 1) > hits(k) {
                    major
                } else {
                    let others: Vec<Answer> = answers.iter().copied().filter(|&a| a != major).collect();
                    others[rng.gen_range(0..others.len())]
                }
            }
            SplitKind::TestBalanced => answers[(k + offset[&template]) % answers.len()],
        };
        let scene = sample_scene_with(&mut rng, GRID_SIZE, Some((template, target)))?;
        samples.push(build_sample(scene, template)?);
    }

    let bias_manifest = match kind {
        SplitKind::TrainBiased => majority.iter().map(|(t, a)| (t.text(), *a)).collect(),
        SplitKind::TestBalanced => BTreeMap::new(),
    };
    Ok(DatasetSplit {
        samples,
        kind,
        rho,
        seed,
        bias_manifest,
    })
}

/// Per-template answer histogram: template → (answer → count).
pub fn answer_histogram(split: &DatasetSplit) -> BTreeMap<Template, BTreeMap<Answer, usize>> {
    let mut h: BTreeMap<Template, BTreeMap<Answer, usize>> = BTreeMap::new();
    for s in &split.samples {
        let a = Answer::from_id(s.answer_id).expect("valid answer id");
        *h.entry(s.template).or_default().entry(a).or_insert(0) += 1;
    }
    h
}

/// Largest deviation from the split's bias target over templates with at
/// least `min_samples` samples: |majority rate − ρ| for biased splits, max
/// |answer rate − 1/m| for balanced ones.
pub fn bias_deviation(split: &DatasetSplit, min_samples: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (template, hist) in answer_histogram(split) {
        let total: usize = hist.values().sum();
        if total < min_samples {
            continue;
        }
        let answers = template.question_type().answers();
        match split.kind {
            SplitKind::TrainBiased => {
                let text = template.text();
                let Some(major) = split.bias_manifest.get(&text) else {
                    return f64::INFINITY;
                };
                let rate = hist.get(major).copied().unwrap_or(0) as f64 / total as f64;
                worst = worst.max(Float::abs(rate - split.rho));
            }
            SplitKind::TestBalanced => {
                let uniform = 1.0 / answers.len() as f64;
                for a in answers {
                    let rate = hist.get(a).copied().unwrap_or(0) as f64 / total as f64;
                    worst = worst.max(Float::abs(rate - uniform));
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(objects: &[(ObjectKind, usize, usize)]) -> Scene {
        Scene::from_objects(
            GRID_SIZE,
            objects
                .iter()
                .map(|&(kind, row, col)| PlacedObject { kind, row, col })
                .collect(),
        )
        .unwrap()
    }

    fn scene_with_counts(counts: [usize; 4]) -> Scene {
        let mut objs = Vec::new();
        let mut cell = 0;
        for k in ObjectKind::ALL {
            for _ in 0..counts[k.index()] {
                objs.push((k, cell / GRID_SIZE, cell % GRID_SIZE));
                cell += 1;
            }
        }
        scene_with(&objs)
    }

    #[test]
    fn unconstrained_scene_fits_grid() {
        for seed in 0..50 {
            let s = sample_scene(seed, None).unwrap();
            s.validate().unwrap();
            assert!(s.objects.len() <= GRID_SIZE * GRID_SIZE);
        }
    }

    #[test]
    fn constrained_absence() {
        let s = sample_scene(3, Some((Template::Presence(ObjectKind::Water), Answer::No))).unwrap();
        assert_eq!(s.count(ObjectKind::Water), 0);
    }

    #[test]
    fn constrained_urban_recount() {
        let s = sample_scene(42, Some((Template::RuralUrban, Answer::Urban))).unwrap();
        let buildings = s.objects.iter().filter(|o| o.kind == ObjectKind::Building).count();
        assert!(buildings >= 6);
    }

    #[test]
    fn over_full_grid_is_infeasible() {
        let mut rng = rng::stream(1, rng::DOMAIN_SAMPLE, &[]);
        let err = sample_scene_with(
            &mut rng,
            2,
            Some((Template::Count(ObjectKind::Tree), Answer::Count7To10)),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConstraintInfeasible { attempts: 10_000, .. }));
    }

    #[test]
    fn render_background_and_single_cell() {
        let img = render(&Scene::empty(GRID_SIZE));
        assert!(img.pixels.chunks(3).all(|p| p == BACKGROUND));

        let img = render(&scene_with(&[(ObjectKind::Water, 0, 0)]));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(img.pixel(y, x), [0, 0, 255]);
            }
        }
        assert_eq!(img.pixel(4, 4), BACKGROUND);
        assert_eq!(img.pixel(0, 4), BACKGROUND);
    }

    #[test]
    fn render_is_deterministic_and_decodable() {
        let s = sample_scene(9, None).unwrap();
        let a = render(&s);
        assert_eq!(a, render(&s));
        let back = decode_scene(&a, GRID_SIZE).unwrap();
        assert_eq!(back.counts, s.counts);
        assert_eq!(render(&back), a);
    }

    #[test]
    fn qa_examples() {
        let s = scene_with_counts([0, 5, 0, 0]);
        assert_eq!(Template::Presence(ObjectKind::Tree).answer(&s), Answer::No);
        assert_eq!(Template::Count(ObjectKind::Water).answer(&s), Answer::Count4To6);

        let s = scene_with_counts([7, 0, 2, 0]);
        assert_eq!(
            Template::Comparison(ObjectKind::Building, ObjectKind::Road).answer(&s),
            Answer::Yes
        );
        assert_eq!(Template::RuralUrban.answer(&s), Answer::Urban);
    }

    #[test]
    fn count_bin_boundaries() {
        let bins: Vec<Answer> = (0..=10).map(Answer::count_bin).collect();
        use Answer::*;
        assert_eq!(
            bins,
            [
                Count0, Count1To3, Count1To3, Count1To3, Count4To6, Count4To6, Count4To6, Count7To10, Count7To10,
                Count7To10, Count7To10
            ]
        );
    }

    #[test]
    fn generate_qa_answers_from_scene() {
        let s = scene_with_counts([2, 0, 3, 1]);
        for q in QuestionType::ALL {
            let (text, answer) = generate_qa(&s, q, 5);
            let t = Template::parse(&text).unwrap();
            assert_eq!(t.question_type(), q);
            assert_eq!(t.answer(&s), answer);
            assert!(q.answers().contains(&answer));
        }
    }

    #[test]
    fn templates_and_tokens_round_trip() {
        let all = Template::all();
        assert_eq!(all.len(), 21);
        for t in all {
            let text = t.text();
            assert_eq!(Template::parse(&text), Some(t));
            let tokens = tokenize(&text).unwrap();
            assert_eq!(detokenize(&tokens).unwrap(), text);
        }
        assert!(tokenize("is there a cat").is_err());
    }

    #[test]
    fn answer_subsets_share_only_yes_no() {
        let p = QuestionType::Presence.answers();
        let c = QuestionType::Count.answers();
        let r = QuestionType::RuralUrban.answers();
        assert_eq!(p, QuestionType::Comparison.answers());
        for a in p {
            assert!(!c.contains(a) && !r.contains(a));
        }
        for a in c {
            assert!(!r.contains(a));
        }
        for (i, a) in Answer::ALL.iter().enumerate() {
            assert_eq!(a.id(), i);
        }
    }

    #[test]
    fn split_validation() {
        assert!(generate_split(0, SplitKind::TrainBiased, 0.9, 1).is_err());
        assert!(generate_split(10, SplitKind::TrainBiased, 0.4, 1).is_err());
        assert!(generate_split(10, SplitKind::TrainBiased, 1.01, 1).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let a = generate_split(300, SplitKind::TrainBiased, 0.9, 11).unwrap();
        let b = generate_split(300, SplitKind::TrainBiased, 0.9, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_split(300, SplitKind::TrainBiased, 0.9, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn half_bias_on_binary_templates_is_chance() {
        let split = generate_split(2000, SplitKind::TrainBiased, 0.5, 4).unwrap();
        for (t, hist) in answer_histogram(&split) {
            if t.question_type().answers().len() != 2 {
                continue;
            }
            let total: usize = hist.values().sum();
            for c in hist.values() {
                assert!((*c as f64 / total as f64 - 0.5).abs() <= 1.0 / total as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn rho_one_is_fully_biased() {
        let split = generate_split(500, SplitKind::TrainBiased, 1.0, 8).unwrap();
        for s in &split.samples {
            let major = split.bias_manifest[&s.question_text];
            assert_eq!(s.answer_id, major.id());
        }
    }
}
