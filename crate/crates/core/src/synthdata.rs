//! Deterministic synthetic scene corpus.
//!
//! A scene is a handful of (noun, attribute) objects plus an optional
//! action. Its "image" is a grid of patch features: every patch covered by
//! an object carries that object's noun direction, a direction specific to
//! the (noun, attribute) pair and the scene's action direction; the rest
//! carry a shared background direction. Everything gets small Gaussian
//! noise. Captions come from a fixed grammar.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, Rng};
use crate::numerics::Matrix;
use crate::serial;

pub const NOUNS: [&str; 24] = [
    "cat", "dog", "horse", "bird", "cow", "sheep", "elephant", "giraffe", "man", "woman", "boy",
    "girl", "car", "bus", "truck", "bicycle", "boat", "train", "kite", "clock", "bench", "umbrella",
    "pizza", "laptop",
];

pub const ATTRIBUTES: [&str; 12] = [
    "black", "white", "brown", "red", "blue", "green", "yellow", "orange", "small", "large", "old",
    "young",
];

/// Action verb and the fixed phrase that completes it.
pub const ACTIONS: [(&str, &str); 10] = [
    ("sitting", "on the floor"),
    ("standing", "in the field"),
    ("running", "on the grass"),
    ("lying", "on the bed"),
    ("walking", "in the park"),
    ("parked", "near the road"),
    ("flying", "in the sky"),
    ("resting", "by the water"),
    ("waiting", "at the station"),
    ("playing", "on the beach"),
];

/// Phrase used when a scene has no action.
pub const STATIC_PHRASE: &str = "in the picture";

/// Number of caption variants the grammar can render.
pub const CAPTION_VARIANTS: usize = 5;

const NOUN_WEIGHT: f64 = 1.0;
const PAIR_WEIGHT: f64 = 2.0;
const ACTION_WEIGHT: f64 = 0.7;
const BACKGROUND_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub noun: usize,
    pub attribute: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub action: Option<usize>,
    /// Patch indices covered by each object; disjoint.
    pub layout: Vec<Vec<usize>>,
}

impl SceneSpec {
    pub fn nouns(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.objects.iter().map(|o| NOUNS[o.noun])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub n_patches: usize,
    pub d_vision: usize,
    pub d_feat: usize,
    pub noise: f64,
    pub n_nouns: usize,
    pub n_attributes: usize,
    pub n_actions: usize,
    pub captions_per_image: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
            n_patches: 16,
            d_vision: 64,
            d_feat: 64,
            noise: 0.05,
            n_nouns: NOUNS.len(),
            n_attributes: ATTRIBUTES.len(),
            n_actions: ACTIONS.len(),
            captions_per_image: CAPTION_VARIANTS,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nouns == 0 || self.n_attributes == 0 || self.n_actions == 0 {
            return Err(Error::Config("lexicon sizes must be positive".into()));
        }
        if self.n_nouns > NOUNS.len()
            || self.n_attributes > ATTRIBUTES.len()
            || self.n_actions > ACTIONS.len()
        {
            return Err(Error::Config(format!(
                "lexicon supports at most {} nouns, {} attributes, {} actions",
                NOUNS.len(),
                ATTRIBUTES.len(),
                ACTIONS.len()
            )));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one image".into()));
        }
        if self.n_patches < 3 || self.d_feat == 0 {
            return Err(Error::Config("need at least 3 patches and a positive feature dim".into()));
        }
        if self.d_vision <= self.n_nouns + self.n_actions {
            return Err(Error::Config(format!(
                "d_vision {} must exceed nouns + actions ({})",
                self.d_vision,
                self.n_nouns + self.n_actions
            )));
        }
        if !(1..=CAPTION_VARIANTS).contains(&self.captions_per_image) {
            return Err(Error::Config(format!(
                "captions_per_image must be in 1..={CAPTION_VARIANTS}"
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// The fixed random projections that turn scenes into features.
#[derive(Clone, Debug)]
pub struct World {
    cfg: GenConfig,
    noun_dirs: Vec<Vec<f64>>,
    action_dirs: Vec<Vec<f64>>,
    /// Indexed by `noun * (n_attributes + 1) + attribute_slot`, where slot
    /// `n_attributes` means "no attribute".
    pair_dirs: Vec<Vec<f64>>,
    /// Shared texture of patches not covered by any object.
    background_dir: Vec<f64>,
    /// `d_feat x d_vision` projection used for global features.
    feat_proj: Matrix,
}

impl World {
    pub fn new(seed: u64, cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "world");
        let dv = cfg.d_vision;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for _ in 0..cfg.n_nouns + cfg.n_actions {
            let mut v = rng::gaussian_vec(&mut r, dv, 1.0);
            project_out(&mut v, &basis);
            normalize(&mut v);
            basis.push(v);
        }
        let action_dirs = basis.split_off(cfg.n_nouns);
        let noun_dirs = basis;
        let span: Vec<Vec<f64>> = noun_dirs.iter().chain(&action_dirs).cloned().collect();
        let mut pair_dirs = Vec::with_capacity(cfg.n_nouns * (cfg.n_attributes + 1));
        for _ in 0..cfg.n_nouns * (cfg.n_attributes + 1) {
            let mut v = rng::gaussian_vec(&mut r, dv, 1.0);
            project_out(&mut v, &span);
            normalize(&mut v);
            pair_dirs.push(v);
        }
        let mut background_dir = rng::gaussian_vec(&mut r, dv, 1.0);
        project_out(&mut background_dir, &span);
        normalize(&mut background_dir);
        let feat_proj = rng::gaussian_matrix(&mut r, cfg.d_feat, dv, 1.0 / (dv as f64).sqrt());
        Ok(Self {
            cfg: cfg.clone(),
            noun_dirs,
            action_dirs,
            pair_dirs,
            background_dir,
            feat_proj,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn noun_direction(&self, noun: usize) -> &[f64] {
        &self.noun_dirs[noun]
    }

    pub fn action_direction(&self, action: usize) -> &[f64] {
        &self.action_dirs[action]
    }

    fn pair_direction(&self, obj: &SceneObject) -> &[f64] {
        let slot = obj.attribute.unwrap_or(self.cfg.n_attributes);
        &self.pair_dirs[obj.noun * (self.cfg.n_attributes + 1) + slot]
    }

    /// Projects a vision-space vector into the global feature space.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        (0..self.feat_proj.rows())
            .map(|r| self.feat_proj.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Global-feature-space direction a frozen caption encoder associates
    /// with `word`, or `None` for words it ignores. Nouns and action verbs
    /// are visible to it; attributes and function words are not.
    pub fn text_alignment(&self, word: &str) -> Option<Vec<f64>> {
        if let Some(n) = NOUNS[..self.cfg.n_nouns].iter().position(|w| *w == word) {
            return Some(self.project(&scaled(&self.noun_dirs[n], NOUN_WEIGHT)));
        }
        if let Some(a) = ACTIONS[..self.cfg.n_actions].iter().position(|(w, _)| *w == word) {
            return Some(self.project(&scaled(&self.action_dirs[a], ACTION_WEIGHT)));
        }
        None
    }

    pub fn sample_scene(&self, r: &mut Rng) -> SceneSpec {
        let n_obj = match rng::uniform(r) {
            u if u < 0.55 => 1,
            u if u < 0.90 => 2,
            _ => 3,
        }
        .min(self.cfg.n_nouns);
        let mut nouns: Vec<usize> = (0..self.cfg.n_nouns).collect();
        rng::shuffle(r, &mut nouns);
        let objects: Vec<SceneObject> = nouns[..n_obj]
            .iter()
            .map(|&noun| {
                let attribute = if rng::uniform(r) < 0.85 {
                    Some(rng::uniform_index(r, self.cfg.n_attributes))
                } else {
                    None
                };
                SceneObject { noun, attribute }
            })
            .collect();
        let action = if rng::uniform(r) < 0.85 {
            Some(rng::uniform_index(r, self.cfg.n_actions))
        } else {
            None
        };
        let mut patches: Vec<usize> = (0..self.cfg.n_patches).collect();
        rng::shuffle(r, &mut patches);
        let per_object_max = (self.cfg.n_patches / n_obj).clamp(1, 4);
        let mut layout = Vec::with_capacity(n_obj);
        let mut cursor = 0;
        for _ in 0..n_obj {
            let lo = 2.min(per_object_max);
            let size = lo + rng::uniform_index(r, per_object_max - lo + 1);
            let mut cells = patches[cursor..cursor + size].to_vec();
            cells.sort_unstable();
            layout.push(cells);
            cursor += size;
        }
        SceneSpec {
            objects,
            action,
            layout,
        }
    }

    /// Patch feature matrix (`n_patches x d_vision`) for a scene.
    pub fn patch_features(&self, scene: &SceneSpec, noise: f64, r: &mut Rng) -> Matrix {
        let dv = self.cfg.d_vision;
        let mut m = Matrix::zeros(self.cfg.n_patches, dv);
        let background = scaled(&self.background_dir, BACKGROUND_WEIGHT);
        for p in 0..self.cfg.n_patches {
            m.row_mut(p).copy_from_slice(&background);
        }
        for (obj, cells) in scene.objects.iter().zip(&scene.layout) {
            let mut content = scaled(&self.noun_dirs[obj.noun], NOUN_WEIGHT);
            axpy(&mut content, PAIR_WEIGHT, self.pair_direction(obj));
            if let Some(a) = scene.action {
                axpy(&mut content, ACTION_WEIGHT, &self.action_dirs[a]);
            }
            for &c in cells {
                m.row_mut(c).copy_from_slice(&content);
            }
        }
        if noise > 0.0 {
            for x in m.data_mut() {
                *x += noise * rng::gaussian(r);
            }
        }
        m
    }

    /// Unit-norm global feature: normalized projection of the mean patch.
    pub fn global_feature(&self, patches: &Matrix) -> Vec<f64> {
        let mean = patches.mean_rows();
        let mut g = self.project(mean.data());
        normalize(&mut g);
        g
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        axpy(v, -d, b);
    }
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn article_for(word: &str) -> &'static str {
    match word.as_bytes().first() {
        Some(b'a' | b'e' | b'i' | b'o' | b'u') => "an",
        _ => "a",
    }
}

fn indefinite_np(obj: &SceneObject) -> String {
    match obj.attribute {
        Some(a) => format!("{} {} {}", article_for(ATTRIBUTES[a]), ATTRIBUTES[a], NOUNS[obj.noun]),
        None => format!("{} {}", article_for(NOUNS[obj.noun]), NOUNS[obj.noun]),
    }
}

fn relative_np(obj: &SceneObject) -> String {
    let noun = NOUNS[obj.noun];
    match obj.attribute {
        Some(a) => format!("{} {} that is {}", article_for(noun), noun, ATTRIBUTES[a]),
        None => format!("{} {}", article_for(noun), noun),
    }
}

fn action_phrase(action: Option<usize>) -> String {
    match action {
        Some(a) => format!("{} {}", ACTIONS[a].0, ACTIONS[a].1),
        None => STATIC_PHRASE.to_string(),
    }
}

/// Renders one of the grammar's caption variants for a scene.
pub fn render_caption(scene: &SceneSpec, variant: usize) -> Result<String> {
    if variant >= CAPTION_VARIANTS {
        return Err(Error::Input(format!(
            "caption variant {variant} >= {CAPTION_VARIANTS}"
        )));
    }
    let join = |f: fn(&SceneObject) -> String| {
        scene
            .objects
            .iter()
            .map(f)
            .collect::<Vec<_>>()
            .join(" and ")
    };
    let act = action_phrase(scene.action);
    let caption = match variant {
        0 => format!("{} {}", join(indefinite_np), act),
        1 => format!("there is {} {}", join(indefinite_np), act),
        2 => {
            let verb = if scene.objects.len() == 1 { "is" } else { "are" };
            format!("{} {} {}", join(indefinite_np), verb, act)
        }
        3 => format!("a photo of {} {}", join(indefinite_np), act),
        _ => format!("{} {}", join(relative_np), act),
    };
    Ok(caption)
}

/// Every word the grammar can emit, deduplicated and sorted.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend(NOUNS);
    words.extend(ATTRIBUTES);
    for (verb, phrase) in ACTIONS {
        words.push(verb);
        words.extend(phrase.split(' '));
    }
    words.extend(STATIC_PHRASE.split(' '));
    words.extend(["a", "an", "and", "there", "is", "are", "photo", "of", "that"]);
    words.sort_unstable();
    words.dedup();
    words
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub global_feature: Vec<f64>,
    pub patch_features: Matrix,
    pub captions: Vec<String>,
    /// Generating scene; not persisted to corpus files.
    pub scene: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<ImageRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_records(&self, split: Split) -> Vec<ImageRecord> {
        self.split(split).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.records.first().map(|r| {
            (
                r.patch_features.rows(),
                r.patch_features.cols(),
                r.global_feature.len(),
            )
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str("{\"id\":");
            serial::write_str(&mut out, &r.id);
            out.push_str(",\"split\":");
            serial::write_str(&mut out, r.split.as_str());
            out.push_str(",\"global_feature\":");
            serial::write_f64_array(&mut out, &r.global_feature);
            out.push_str(",\"patch_features\":[");
            for p in 0..r.patch_features.rows() {
                if p > 0 {
                    out.push(',');
                }
                serial::write_f64_array(&mut out, r.patch_features.row(p));
            }
            out.push_str("],\"captions\":");
            serial::write_str_array(&mut out, &r.captions);
            out.push_str("}\n");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read(BufReader::new(text.as_bytes()))
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            id: String,
            split: Split,
            global_feature: Vec<f64>,
            patch_features: Vec<Vec<f64>>,
            captions: Vec<String>,
        }
        let mut records = Vec::new();
        for (no, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(format!("corpus line {}: {e}", no + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("corpus line {}: {e}", no + 1)))?;
            let patch_features = Matrix::from_rows(&l.patch_features)
                .map_err(|e| Error::Data(format!("corpus line {}: {e}", no + 1)))?;
            if l.captions.is_empty() || l.captions.len() > CAPTION_VARIANTS {
                return Err(Error::Data(format!(
                    "corpus line {}: expected 1-{CAPTION_VARIANTS} captions",
                    no + 1
                )));
            }
            records.push(ImageRecord {
                id: l.id,
                split: l.split,
                global_feature: l.global_feature,
                patch_features,
                captions: l.captions,
                scene: None,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }
}

/// Generates the full corpus. Each record draws from its own derived
/// stream, so the output is a pure function of `(seed, cfg)`.
pub fn gen_corpus(seed: u64, cfg: &GenConfig) -> Result<Corpus> {
    let world = World::new(seed, cfg)?;
    gen_corpus_in(&world, seed)
}

pub fn gen_corpus_in(world: &World, seed: u64) -> Result<Corpus> {
    let cfg = world.config();
    let mut records = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    for (split, count) in [
        (Split::Train, cfg.train),
        (Split::Val, cfg.val),
        (Split::Test, cfg.test),
    ] {
        for i in 0..count {
            let id = format!("{}-{:05}", split.as_str(), i);
            let mut r = rng::stream(seed, &format!("record/{id}"));
            let scene = world.sample_scene(&mut r);
            let patch_features = world.patch_features(&scene, cfg.noise, &mut r);
            let global_feature = world.global_feature(&patch_features);
            let captions = (0..cfg.captions_per_image)
                .map(|v| render_caption(&scene, v))
                .collect::<Result<Vec<_>>>()?;
            records.push(ImageRecord {
                id,
                split,
                global_feature,
                patch_features,
                captions,
                scene: Some(scene),
            });
        }
    }
    Ok(Corpus { records })
}
