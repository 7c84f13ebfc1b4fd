//! Seeded generator of tiny 3×32×32 images whose planted objects fully
//! determine the answer to every templated question.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde_json::json;

use super::{category_id, CategoryMap, FeatureStore, RawSample, SplitManifest, CATEGORIES};
use crate::error::{write_file, Error, Result};
use crate::text::tokenize;
use vqg_tensor::init::{seeded, Rng};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_WIDTH: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;

/// Pixels whose strongest channel exceeds this belong to an object.
const OBJECT_THRESHOLD: f64 = 0.7;
const SLOT: usize = 8;

/// Category order used when a synthetic corpus covers fewer than sixteen
/// categories: the first `n` entries are used.
pub const SYNTHETIC_ORDER: [&str; 16] = [
    "color", "count", "shape", "spatial", "binary", "attribute", "location", "stuff", "object", "material", "animal",
    "food", "activity", "predicate", "time", "other",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Cross,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Size {
    Small,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Dark,
    Bright,
}

const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
const SHAPES: [Shape; 3] = [Shape::Square, Shape::Cross, Shape::Bar];
const COLOR_WORDS: [&str; 3] = ["red", "green", "blue"];
const SHAPE_WORDS: [&str; 3] = ["square", "cross", "bar"];
const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

impl Color {
    pub fn word(self) -> &'static str {
        COLOR_WORDS[self as usize]
    }
}

impl Shape {
    pub fn word(self) -> &'static str {
        SHAPE_WORDS[self as usize]
    }
}

/// Everything a question can ask about; every field is recoverable from
/// the rendered pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attributes {
    pub color: Color,
    pub count: usize,
    pub shape: Shape,
    pub side: Side,
    pub size: Size,
    pub background: Background,
}

impl Attributes {
    pub fn random(rng: &mut Rng) -> Self {
        Self {
            color: COLORS[rng.gen_range(0..3)],
            count: rng.gen_range(1..=4),
            shape: SHAPES[rng.gen_range(0..3)],
            side: if rng.gen_bool(0.5) { Side::Left } else { Side::Right },
            size: if rng.gen_bool(0.5) { Size::Small } else { Size::Big },
            background: if rng.gen_bool(0.5) { Background::Dark } else { Background::Bright },
        }
    }

    fn extent(&self) -> usize {
        match self.size {
            Size::Small => 3,
            Size::Big => 5,
        }
    }
}

fn pixel_index(channel: usize, y: usize, x: usize) -> usize {
    (channel * IMAGE_SIDE + y) * IMAGE_SIDE + x
}

/// Draws the image: noisy background, then `count` identical blobs in
/// distinct 8×8 slots of the chosen half. Each blob stays inside the
/// first 7 rows/columns of its slot so blobs never touch.
pub fn render(attrs: &Attributes, rng: &mut Rng) -> Vec<f64> {
    let (lo, hi) = match attrs.background {
        Background::Dark => (0.0, 0.15),
        Background::Bright => (0.35, 0.5),
    };
    let mut px: Vec<f64> = (0..IMAGE_WIDTH).map(|_| rng.gen_range(lo..hi)).collect();

    let s = attrs.extent();
    let (w, h) = match attrs.shape {
        Shape::Bar => (s, 1),
        _ => (s, s),
    };
    let half = match attrs.side {
        Side::Left => 0,
        Side::Right => IMAGE_SIDE / 2,
    };
    let mut slots: Vec<usize> = (0..8).collect();
    for i in 0..attrs.count {
        let j = rng.gen_range(i..slots.len());
        slots.swap(i, j);
    }
    let dominant = attrs.color as usize;
    for &slot in &slots[..attrs.count] {
        let x0 = half + (slot % 2) * SLOT + rng.gen_range(0..=SLOT - 1 - w);
        let y0 = (slot / 2) * SLOT + rng.gen_range(0..=SLOT - 1 - h);
        for dy in 0..h {
            for dx in 0..w {
                let on = match attrs.shape {
                    Shape::Cross => dy == s / 2 || dx == s / 2,
                    _ => true,
                };
                if !on {
                    continue;
                }
                for c in 0..IMAGE_CHANNELS {
                    px[pixel_index(c, y0 + dy, x0 + dx)] = if c == dominant {
                        rng.gen_range(0.85..1.0)
                    } else {
                        rng.gen_range(0.0..0.2)
                    };
                }
            }
        }
    }
    px
}

/// Recovers the planted attributes from pixels alone.
pub fn derive_attributes(pixels: &[f64]) -> Result<Attributes> {
    if pixels.len() != IMAGE_WIDTH {
        return Err(Error::Format(format!(
            "expected {IMAGE_WIDTH} pixel values, found {}",
            pixels.len()
        )));
    }
    let n = IMAGE_SIDE;
    let is_object: Vec<bool> = (0..n * n)
        .map(|p| (0..IMAGE_CHANNELS).any(|c| pixels[c * n * n + p] > OBJECT_THRESHOLD))
        .collect();

    let mut label = vec![usize::MAX; n * n];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..n * n {
        if !is_object[start] || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = id;
        while let Some(p) = stack.pop() {
            members.push(p);
            let (y, x) = (p / n, p % n);
            let mut visit = |q: usize| {
                if is_object[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - n);
            }
            if y + 1 < n {
                visit(p + n);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < n {
                visit(p + 1);
            }
        }
        components.push(members);
    }
    if components.is_empty() || components.len() > 4 {
        return Err(Error::Format(format!("expected 1-4 objects, found {}", components.len())));
    }

    let first = &components[0];
    let ys = first.iter().map(|p| p / n);
    let xs = first.iter().map(|p| p % n);
    let height = ys.clone().max().unwrap() - ys.min().unwrap() + 1;
    let width = xs.clone().max().unwrap() - xs.min().unwrap() + 1;
    let shape = if height == 1 {
        Shape::Bar
    } else if first.len() == width * height {
        Shape::Square
    } else {
        Shape::Cross
    };
    let size = match width {
        3 => Size::Small,
        5 => Size::Big,
        w => return Err(Error::Format(format!("unexpected object width {w}"))),
    };

    let mut channel_sums = [0.0; IMAGE_CHANNELS];
    let (mut col_sum, mut obj_count) = (0usize, 0usize);
    let (mut bg_sum, mut bg_count) = (0.0, 0usize);
    for p in 0..n * n {
        if is_object[p] {
            for (c, sum) in channel_sums.iter_mut().enumerate() {
                *sum += pixels[c * n * n + p];
            }
            col_sum += p % n;
            obj_count += 1;
        } else {
            bg_sum += (0..IMAGE_CHANNELS).map(|c| pixels[c * n * n + p]).sum::<f64>();
            bg_count += IMAGE_CHANNELS;
        }
    }
    let dominant = (0..IMAGE_CHANNELS)
        .max_by(|&a, &b| channel_sums[a].total_cmp(&channel_sums[b]))
        .unwrap();
    Ok(Attributes {
        color: COLORS[dominant],
        count: components.len(),
        shape,
        side: if 2 * col_sum < obj_count * n { Side::Left } else { Side::Right },
        size,
        background: if bg_sum / bg_count as f64 > 0.25 { Background::Bright } else { Background::Dark },
    })
}

const TEMPLATES: [(&str, &str); 16] = [
    ("color", "what color is the {shape} ?"),
    ("count", "how many {shape} shapes are there ?"),
    ("shape", "what shape is the {color} object ?"),
    ("spatial", "which side is the {shape} on ?"),
    ("binary", "is there more than one {shape} ?"),
    ("attribute", "is the {color} {shape} big or small ?"),
    ("location", "where are the {color} shapes ?"),
    ("stuff", "what does the background look like ?"),
    ("object", "what object is in the picture ?"),
    ("material", "what is the {shape} made of ?"),
    ("animal", "what animal does the {color} shape look like ?"),
    ("food", "what food is the {color} {shape} ?"),
    ("activity", "what is the {shape} doing ?"),
    ("predicate", "what is the {shape} next to ?"),
    ("time", "what time of day is it ?"),
    ("other", "what is this picture ?"),
];

fn template(category: &str) -> Result<&'static str> {
    TEMPLATES
        .iter()
        .find(|(c, _)| *c == category)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::UnknownCategory(category.to_string()))
}

pub fn question_for(category: &str, attrs: &Attributes) -> Result<String> {
    Ok(template(category)?
        .replace("{shape}", attrs.shape.word())
        .replace("{color}", attrs.color.word()))
}

pub fn answer_for(category: &str, attrs: &Attributes) -> Result<String> {
    let side = |l: &'static str, r: &'static str| if attrs.side == Side::Left { l } else { r };
    let answer = match category {
        "color" => attrs.color.word().to_string(),
        "count" => COUNT_WORDS[attrs.count - 1].to_string(),
        "shape" => attrs.shape.word().to_string(),
        "spatial" => side("left", "right").to_string(),
        "binary" => if attrs.count > 1 { "yes" } else { "no" }.to_string(),
        "attribute" => if attrs.size == Size::Big { "big" } else { "small" }.to_string(),
        "location" => side("left half", "right half").to_string(),
        "stuff" => if attrs.background == Background::Dark { "dark" } else { "bright" }.to_string(),
        "object" => format!("{} {}", attrs.color.word(), attrs.shape.word()),
        "material" => ["clay", "glass", "metal"][attrs.color as usize].to_string(),
        "animal" => ["cat", "bird", "fish"][attrs.shape as usize].to_string(),
        "food" => ["apple", "lime", "berry"][attrs.color as usize].to_string(),
        "activity" => if attrs.size == Size::Big { "sitting" } else { "flying" }.to_string(),
        "predicate" => if attrs.count > 1 { "each other" } else { "nothing" }.to_string(),
        "time" => if attrs.background == Background::Dark { "night" } else { "day" }.to_string(),
        "other" => if attrs.background == Background::Dark { "a sketch" } else { "a painting" }.to_string(),
        other => return Err(Error::UnknownCategory(other.to_string())),
    };
    Ok(answer)
}

/// Which template a generated question instantiates, if any. Slots must
/// hold a valid shape or color word but need not be correct for the image.
pub fn classify_family(question: &str) -> Option<&'static str> {
    let tokens = tokenize(question);
    TEMPLATES.iter().find_map(|(category, t)| {
        let pattern: Vec<&str> = t.split_whitespace().collect();
        let matches = pattern.len() == tokens.len()
            && pattern.iter().zip(&tokens).all(|(&p, tok)| match p {
                "{shape}" => SHAPE_WORDS.contains(&tok.as_str()),
                "{color}" => COLOR_WORDS.contains(&tok.as_str()),
                _ => p == tok,
            });
        matches.then_some(*category)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub n_categories: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub samples: Vec<RawSample>,
    pub features: FeatureStore,
    pub categories: CategoryMap,
    pub attributes: Vec<(u64, Attributes)>,
}

/// Image ids run from 1; each image yields one sample per category with
/// question id `image_id * 100 + category_id`.
pub fn make_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.n_categories == 0 || config.n_categories > CATEGORIES.len() {
        return Err(Error::Config(format!(
            "n_categories must be in 1..=16, got {}",
            config.n_categories
        )));
    }
    let mut rng = seeded(config.seed);
    let mut features = FeatureStore::new(IMAGE_WIDTH);
    let mut categories = CategoryMap::new();
    let mut samples = Vec::new();
    let mut attributes = Vec::new();
    for i in 0..config.n_images {
        let image_id = i as u64 + 1;
        let attrs = Attributes::random(&mut rng);
        features.insert(image_id, render(&attrs, &mut rng))?;
        attributes.push((image_id, attrs));
        for &cat in &SYNTHETIC_ORDER[..config.n_categories] {
            let category_id = category_id(cat).expect("synthetic categories are canonical");
            let answer = answer_for(cat, &attrs)?;
            categories.insert(&answer, category_id);
            samples.push(RawSample {
                question_id: image_id * 100 + category_id as u64,
                image_id,
                question: question_for(cat, &attrs)?,
                answer,
                category_id,
            });
        }
    }
    Ok(SyntheticCorpus {
        samples,
        features,
        categories,
        attributes,
    })
}

fn write_split(dir: &Path, name: &str, samples: &[RawSample]) -> Result<PathBuf> {
    let questions: Vec<_> = samples
        .iter()
        .map(|s| json!({"image_id": s.image_id, "question_id": s.question_id, "question": s.question}))
        .collect();
    let annotations: Vec<_> = samples
        .iter()
        .map(|s| {
            json!({
                "question_id": s.question_id,
                "multiple_choice_answer": s.answer,
                "answers": [{"answer": s.answer, "answer_id": 1}],
            })
        })
        .collect();
    let q = format!("{name}_questions.json");
    let a = format!("{name}_annotations.json");
    write_file(&dir.join(&q), serde_json::to_string_pretty(&json!({ "questions": questions })).unwrap())?;
    write_file(&dir.join(&a), serde_json::to_string_pretty(&json!({ "annotations": annotations })).unwrap())?;
    let manifest = SplitManifest {
        questions: q.into(),
        annotations: a.into(),
        category_map: "categories.tsv".into(),
        features: Some("features.vqgf".into()),
    };
    let path = dir.join(format!("{name}.json"));
    write_file(&path, serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(path)
}

/// Writes the corpus as VQA-style files plus split manifests. The last
/// `held_out` images form the `eval` split; the rest form `train`.
/// Returns the manifest paths (train, then eval when `held_out > 0`).
pub fn write_synthetic(corpus: &SyntheticCorpus, dir: &Path, held_out: usize) -> Result<Vec<PathBuf>> {
    let images: BTreeSet<u64> = corpus.samples.iter().map(|s| s.image_id).collect();
    if held_out > images.len() {
        return Err(Error::Config(format!(
            "held_out ({held_out}) exceeds image count ({})",
            images.len()
        )));
    }
    let cutoff = images.iter().nth(images.len() - held_out).copied().unwrap_or(u64::MAX);
    let (eval, train): (Vec<RawSample>, Vec<RawSample>) =
        corpus.samples.iter().cloned().partition(|s| s.image_id >= cutoff);
    corpus.features.save(&dir.join("features.vqgf"))?;
    write_file(&dir.join("categories.tsv"), corpus.categories.to_tsv())?;
    let mut paths = vec![write_split(dir, "train", &train)?];
    if held_out > 0 {
        paths.push(write_split(dir, "eval", &eval)?);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SyntheticConfig {
            n_images: 6,
            n_categories: 16,
            seed: 7,
        };
        let a = make_synthetic(&cfg).unwrap();
        let b = make_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.to_bytes(), b.features.to_bytes());
        let c = make_synthetic(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn zero_images_is_empty() {
        let c = make_synthetic(&SyntheticConfig {
            n_images: 0,
            n_categories: 4,
            seed: 1,
        })
        .unwrap();
        assert!(c.samples.is_empty() && c.features.is_empty());
    }

    #[test]
    fn planted_answers_are_recoverable_from_pixels() {
        let c = make_synthetic(&SyntheticConfig {
            n_images: 200,
            n_categories: 16,
            seed: 3,
        })
        .unwrap();
        for (id, attrs) in &c.attributes {
            let derived = derive_attributes(c.features.get(*id).unwrap()).unwrap();
            assert_eq!(&derived, attrs, "image {id}");
        }
        for s in &c.samples {
            let derived = derive_attributes(c.features.get(s.image_id).unwrap()).unwrap();
            let cat = CATEGORIES[s.category_id];
            assert_eq!(s.answer, answer_for(cat, &derived).unwrap());
            assert_eq!(classify_family(&s.question), Some(cat));
            assert_eq!(c.categories.lookup(&s.answer), Some(s.category_id));
        }
    }

    #[test]
    fn family_classifier_rejects_non_templates() {
        assert_eq!(classify_family("what color is the cross ?"), Some("color"));
        assert_eq!(classify_family("what color is the red ?"), None);
        assert_eq!(classify_family("what color is the cross"), None);
        assert_eq!(classify_family(""), None);
    }
}
