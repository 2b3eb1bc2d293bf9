//! Synthetic datasets with planted spurious attributes: ColoredMNIST-style
//! digits on colored backgrounds, and shapes on colored, textured backgrounds.

mod export;
pub mod glyphs;
mod oracle;
pub mod palette;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{derive_seed, rng_from};
use crate::vlm::CaptionedImage;
use glyphs::{Placement, DIGIT_NAMES, SHAPE_NAMES};
use palette::{color_attribute, color_rgb, texture_attribute, texture_factor, TextureJitter, COLOR_NAMES, TEXTURE_NAMES};

pub use export::{export_dataset, load_dataset};
pub use oracle::{oracle_attribute_source, OracleSource};

pub const IMAGE_SIZE: usize = 32;

/// Peak opacity of digit strokes over the background. Faint strokes keep the
/// digit recognizable while making the background the easier cue.
pub const STROKE_CONTRAST: f64 = 0.3;

/// Share of the pretraining corpus showing a background with no object.
pub const BACKGROUND_ONLY_SHARE: f64 = 0.03;

/// Caption templates for object images, drawn uniformly.
const CAPTION_STYLES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    ColoredMnist,
    ShapesOnTextures,
}

impl GeneratorKind {
    pub fn max_classes(self) -> usize {
        match self {
            GeneratorKind::ColoredMnist => COLOR_NAMES.len(),
            GeneratorKind::ShapesOnTextures => 2 * SHAPE_NAMES.len(),
        }
    }

    /// Number of planted attributes per category.
    pub fn planted_count(self) -> usize {
        match self {
            GeneratorKind::ColoredMnist => 1,
            GeneratorKind::ShapesOnTextures => 2,
        }
    }

    /// Captioned images needed to ground every attribute phrase. Shapes carry
    /// two planted attributes, and textures need far more examples than
    /// colors before their phrases line up with the images.
    pub fn default_corpus_size(self) -> usize {
        match self {
            GeneratorKind::ColoredMnist => 3000,
            GeneratorKind::ShapesOnTextures => 12000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::ColoredMnist => "colored_mnist",
            GeneratorKind::ShapesOnTextures => "shapes_on_textures",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A category with its ground-truth attribute tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub core: Vec<String>,
    /// Planted attributes, in group-bit order.
    pub spurious: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    pub group: usize,
    pub split: Split,
    /// Which of the category's planted attributes the image shows.
    pub planted: Vec<bool>,
    /// Object pixels, known only for freshly generated samples.
    pub object_mask: Option<Vec<bool>>,
}

/// Generation parameters; together with the seed they determine a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub generator: GeneratorKind,
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub rho: f64,
    /// Correlation used for the test split; `None` draws backgrounds uniformly.
    pub test_rho: Option<f64>,
    /// Per-class override of `rho`.
    pub class_rho: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::ColoredMnist,
            classes: 10,
            shots: 16,
            test_per_class: 50,
            rho: 0.95,
            test_rho: None,
            class_rho: None,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("dataset needs at least one class"));
        }
        if self.classes > self.generator.max_classes() {
            return Err(Error::config(format!(
                "{} supports at most {} classes, got {}",
                self.generator.name(),
                self.generator.max_classes(),
                self.classes
            )));
        }
        let in_unit = |r: f64| (0.0..=1.0).contains(&r);
        if !in_unit(self.rho) || !self.test_rho.is_none_or(in_unit) {
            return Err(Error::config("correlation must lie in [0, 1]"));
        }
        if let Some(rhos) = &self.class_rho {
            if rhos.len() != self.classes || !rhos.iter().all(|&r| in_unit(r)) {
                return Err(Error::config("class_rho needs one value in [0, 1] per class"));
            }
        }
        Ok(())
    }

    fn rho_for(&self, class: usize) -> f64 {
        self.class_rho.as_ref().map_or(self.rho, |r| r[class])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub spec: DatasetSpec,
    pub categories: Vec<Category>,
    pub samples: Vec<Sample>,
    pub base: Option<Vec<usize>>,
    pub new: Option<Vec<usize>>,
}

impl GroupedDataset {
    pub fn correlation(&self) -> f64 {
        self.spec.rho
    }

    pub fn seed(&self) -> u64 {
        self.spec.seed
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Indices of `split` whose label lies in `categories`.
    pub fn indices_for(&self, split: Split, categories: &[usize]) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split && categories.contains(&self.samples[i].label))
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Test)
    }

    pub fn images(&self, indices: &[usize]) -> Vec<&Image> {
        indices.iter().map(|&i| &self.samples[i].image).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn groups(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].group).collect()
    }

    pub fn num_groups(&self) -> usize {
        self.categories.len() << self.spec.generator.planted_count()
    }
}

/// Group id for a label and its planted-attribute presence bits.
pub fn group_id(label: usize, planted: &[bool]) -> usize {
    let bits = planted.iter().enumerate().fold(0, |acc, (i, &p)| acc | ((p as usize) << i));
    (label << planted.len()) | bits
}

/// Inverse of [`group_id`].
pub fn decode_group(group: usize, planted_count: usize) -> (usize, Vec<bool>) {
    let label = group >> planted_count;
    (label, (0..planted_count).map(|i| group >> i & 1 == 1).collect())
}

pub fn categories_for(kind: GeneratorKind, classes: usize) -> Vec<Category> {
    (0..classes)
        .map(|c| match kind {
            GeneratorKind::ColoredMnist => Category {
                id: c,
                name: DIGIT_NAMES[c].to_string(),
                core: glyphs::digit_descriptors(c),
                spurious: vec![color_attribute(c)],
            },
            GeneratorKind::ShapesOnTextures => Category {
                id: c,
                name: shape_class_name(c),
                core: shape_class_core(c, classes),
                spurious: vec![color_attribute(c % 10), texture_attribute(shape_texture(c))],
            },
        })
        .collect()
}

fn shape_class_name(c: usize) -> String {
    if c < 10 {
        SHAPE_NAMES[c].to_string()
    } else {
        format!("hollow {}", SHAPE_NAMES[c - 10])
    }
}

/// Fill is only a distinguishing trait once hollow variants are present.
fn shape_class_core(c: usize, classes: usize) -> Vec<String> {
    let mut core = glyphs::shape_descriptors(c % 10);
    if classes > 10 {
        core.push(if c < 10 { "solid interior" } else { "empty interior" }.to_string());
    }
    core
}

fn shape_texture(c: usize) -> usize {
    (c + 3 * (c / 10)) % 10
}

/// Draws the planted value with probability `rho`, otherwise uniformly from `0..n`.
fn draw_correlated(rng: &mut impl Rng, planted: usize, rho: f64, n: usize) -> usize {
    if rng.random::<f64>() < rho {
        planted
    } else {
        rng.random_range(0..n)
    }
}

fn jitter_value(rng: &mut impl Rng) -> f64 {
    palette::VALUE + rng.random_range(-0.06..0.06)
}

/// Digit `d` drawn in white over a noisy background of palette color `color`.
pub fn render_digit(d: usize, color: usize, rng: &mut impl Rng) -> (Image, Vec<bool>) {
    let place = Placement::sample(rng, 10.0);
    let thickness = rng.random_range(0.055..0.08);
    let lines = glyphs::transform_lines(&glyphs::digit_strokes(d), &place);
    let cov = glyphs::stroke_coverage(&lines, thickness, IMAGE_SIZE);
    let bg = color_rgb(color, jitter_value(rng));
    let ink = rng.random_range(0.9..1.0);
    let mut img = Image::new(IMAGE_SIZE, IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let a = STROKE_CONTRAST * cov[y * IMAGE_SIZE + x];
            let n = rng.random_range(-0.04..0.04);
            img.set(y, x, std::array::from_fn(|k| (1.0 - a) * (bg[k] + n) + a * ink));
        }
    }
    (img, cov.iter().map(|&c| c > 0.5).collect())
}

/// Background only: palette color (or a random gray when `None`) modulated
/// by an optional texture.
pub fn render_background(color: Option<usize>, texture: Option<usize>, value: f64, noise: f64, rng: &mut impl Rng) -> Image {
    let base = match color {
        Some(c) => color_rgb(c, value),
        None => [value * 0.9; 3],
    };
    let jit = TextureJitter::sample(rng);
    let mut img = Image::new(IMAGE_SIZE, IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let f = texture.map_or(1.0, |t| texture_factor(t, y, x, IMAGE_SIZE, jit));
            let n = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            img.set(y, x, std::array::from_fn(|k| base[k] * f + n));
        }
    }
    img
}

/// Shape class `c` drawn dark over a textured, colored background.
pub fn render_shape(c: usize, color: usize, texture: usize, rng: &mut impl Rng) -> (Image, Vec<bool>) {
    let place = Placement::sample(rng, 8.0);
    let poly: Vec<_> = glyphs::shape_polygon(c % 10).into_iter().map(|p| place.apply(p)).collect();
    let cov = glyphs::polygon_coverage(&poly, c >= 10, rng.random_range(0.045..0.065), IMAGE_SIZE);
    let mut img = render_background(Some(color), Some(texture), jitter_value(rng), 0.03, rng);
    let ink = rng.random_range(0.02..0.1);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let a = cov[y * IMAGE_SIZE + x];
            let px = img.get(y, x);
            img.set(y, x, std::array::from_fn(|k| (1.0 - a) * px[k] + a * ink));
        }
    }
    (img, cov.iter().map(|&c| c > 0.5).collect())
}

pub fn generate_colored_mnist(classes: usize, shots: usize, test_per_class: usize, rho: f64, seed: u64) -> Result<GroupedDataset> {
    generate(&DatasetSpec {
        generator: GeneratorKind::ColoredMnist,
        classes,
        shots,
        test_per_class,
        rho,
        seed,
        ..DatasetSpec::default()
    })
}

pub fn generate_shapes_on_textures(classes: usize, shots: usize, test_per_class: usize, rho: f64, seed: u64) -> Result<GroupedDataset> {
    generate(&DatasetSpec {
        generator: GeneratorKind::ShapesOnTextures,
        classes,
        shots,
        test_per_class,
        rho,
        seed,
        ..DatasetSpec::default()
    })
}

/// Draws one sample's background attributes and renders it.
fn draw_sample(spec: &DatasetSpec, label: usize, rho: f64, rng: &mut impl Rng) -> (Image, Vec<bool>, Vec<bool>) {
    match spec.generator {
        GeneratorKind::ColoredMnist => {
            let color = draw_correlated(rng, label, rho, spec.classes);
            let (img, mask) = render_digit(label, color, rng);
            (img, vec![color == label], mask)
        }
        GeneratorKind::ShapesOnTextures => {
            let (pc, pt) = (label % 10, shape_texture(label));
            let color = draw_correlated(rng, pc, rho, COLOR_NAMES.len());
            let texture = draw_correlated(rng, pt, rho, TEXTURE_NAMES.len());
            let (img, mask) = render_shape(label, color, texture, rng);
            (img, vec![color == pc, texture == pt], mask)
        }
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<GroupedDataset> {
    spec.validate()?;
    let categories = categories_for(spec.generator, spec.classes);
    let mut samples = Vec::with_capacity(spec.classes * (spec.shots + spec.test_per_class));
    for (split, per_class) in [(Split::Train, spec.shots), (Split::Test, spec.test_per_class)] {
        let mut rng = rng_from(derive_seed(spec.seed, &format!("{}/{}", spec.generator.name(), split.name())));
        let mut n = 0;
        for label in 0..spec.classes {
            let rho = match split {
                Split::Train => spec.rho_for(label),
                Split::Test => spec.test_rho.unwrap_or(0.0),
            };
            for _ in 0..per_class {
                let (image, planted, mask) = draw_sample(spec, label, rho, &mut rng);
                samples.push(Sample {
                    id: format!("{}-{:05}", split.name(), n),
                    image,
                    label,
                    group: group_id(label, &planted),
                    split,
                    planted,
                    object_mask: Some(mask),
                });
                n += 1;
            }
        }
    }
    Ok(GroupedDataset {
        spec: spec.clone(),
        categories,
        samples,
        base: None,
        new: None,
    })
}

/// Shuffles categories by `seed` and splits them into base (first half,
/// taking the extra one when the count is odd) and new.
pub fn base_new_split(mut dataset: GroupedDataset, seed: u64) -> Result<GroupedDataset> {
    let n = dataset.categories.len();
    if n < 2 {
        return Err(Error::input(format!("base-to-new split needs at least 2 categories, got {n}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng_from(derive_seed(seed, "base-new")));
    let cut = n.div_ceil(2);
    let mut base = ids[..cut].to_vec();
    let mut new = ids[cut..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    dataset.base = Some(base);
    dataset.new = Some(new);
    Ok(dataset)
}

/// Every phrase the generators and prompt templates can produce, for building
/// a closed vocabulary.
pub fn vocabulary_texts(kind: GeneratorKind) -> Vec<String> {
    let mut texts: Vec<String> = vec![
        "a photo of a which has background pattern".into(),
        "a photo of an image showing".into(),
    ];
    texts.extend(categories_for(kind, kind.max_classes()).into_iter().flat_map(|c| {
        let mut v = vec![c.name];
        v.extend(c.core);
        v.extend(c.spurious);
        v
    }));
    texts.extend((0..COLOR_NAMES.len()).map(color_attribute));
    texts.extend((0..TEXTURE_NAMES.len()).map(texture_attribute));
    texts
}

/// Unbiased captioned corpus for contrastive pretraining: every category
/// appears with every background, and a share of images show the background
/// alone so that background phrases get grounded.
pub fn pretraining_corpus(kind: GeneratorKind, classes: usize, size: usize, seed: u64) -> Result<Vec<CaptionedImage>> {
    if classes == 0 || classes > kind.max_classes() {
        return Err(Error::config(format!("invalid class count {classes} for {}", kind.name())));
    }
    let cats = categories_for(kind, classes);
    let mut rng = rng_from(derive_seed(seed, &format!("{}/pretrain-corpus", kind.name())));
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let background_only = rng.random::<f64>() < BACKGROUND_ONLY_SHARE;
        let color = rng.random_range(0..COLOR_NAMES.len());
        let texture = rng.random_range(0..TEXTURE_NAMES.len());
        let color_text = color_attribute(color);
        let texture_text = texture_attribute(texture);
        if background_only {
            let tex = (kind == GeneratorKind::ShapesOnTextures).then_some(texture);
            let image = render_background(Some(color), tex, jitter_value(&mut rng), 0.04, &mut rng);
            let caption = match tex {
                Some(_) if rng.random::<bool>() => format!("a photo of a {texture_text}"),
                Some(_) => format!("a photo of a {color_text}, which has {texture_text}"),
                None => format!("a photo of a {color_text}"),
            };
            out.push(CaptionedImage { image, caption });
            continue;
        }
        let c = rng.random_range(0..classes);
        let cat = &cats[c];
        let image = match kind {
            GeneratorKind::ColoredMnist => render_digit(c, color, &mut rng).0,
            GeneratorKind::ShapesOnTextures => render_shape(c, color, texture, &mut rng).0,
        };
        let core = cat.core.join(", ");
        let mut extras = vec![color_text];
        if kind == GeneratorKind::ShapesOnTextures {
            extras.push(texture_text);
        }
        let caption = match rng.random_range(0..CAPTION_STYLES) {
            0 => format!("a photo of a {}", cat.name),
            1 => format!("a photo of a {}, which has {core}", cat.name),
            2 => format!("a photo of a {}, which has {}", cat.name, extras.join(", ")),
            3 => format!("a photo of a {}, which has {core}, {}", cat.name, extras.join(", ")),
            // Unnamed descriptions, so descriptor phrases are grounded on their own.
            4 => format!("an image showing {core}"),
            _ => format!("an image showing {core}, {}", extras.join(", ")),
        };
        out.push(CaptionedImage { image, caption });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{hue_distance, rgb_to_hsv};

    fn background_hue(img: &Image) -> f64 {
        let (h, _, _) = rgb_to_hsv(img.get(0, 0));
        h
    }

    #[test]
    fn rejects_too_many_classes() {
        assert!(matches!(generate_colored_mnist(11, 1, 1, 0.5, 0), Err(Error::Config(_))));
        assert!(matches!(generate_shapes_on_textures(21, 1, 1, 0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn full_correlation_colors_every_train_image() {
        let ds = generate_colored_mnist(10, 8, 4, 1.0, 3).unwrap();
        for s in ds.samples.iter().filter(|s| s.split == Split::Train) {
            assert!(s.planted[0]);
            assert!(hue_distance(background_hue(&s.image), palette::hue(s.label)) < 10.0);
        }
    }

    #[test]
    fn zero_correlation_is_uniform() {
        let ds = generate_colored_mnist(10, 120, 0, 0.0, 5).unwrap();
        let matched = ds.samples.iter().filter(|s| s.planted[0]).count() as f64;
        let rate = matched / ds.samples.len() as f64;
        assert!((rate - 0.1).abs() < 0.05, "{rate}");
    }

    #[test]
    fn groups_encode_label_and_presence() {
        let ds = generate_shapes_on_textures(4, 6, 3, 0.7, 1).unwrap();
        for s in &ds.samples {
            let (label, bits) = decode_group(s.group, 2);
            assert_eq!(label, s.label);
            assert_eq!(bits, s.planted);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_shapes_on_textures(3, 2, 2, 0.9, 11).unwrap();
        let b = generate_shapes_on_textures(3, 2, 2, 0.9, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_shapes_on_textures(3, 2, 2, 0.9, 12).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn split_counts() {
        let ds = generate_colored_mnist(10, 1, 1, 0.5, 0).unwrap();
        let s = base_new_split(ds.clone(), 4).unwrap();
        assert_eq!(s.base.as_ref().unwrap().len(), 5);
        assert_eq!(s.new.as_ref().unwrap().len(), 5);
        let s2 = base_new_split(ds, 4).unwrap();
        assert_eq!(s.base, s2.base);
        let odd = base_new_split(generate_shapes_on_textures(11, 1, 1, 0.5, 0).unwrap(), 9).unwrap();
        assert_eq!((odd.base.unwrap().len(), odd.new.unwrap().len()), (6, 5));
        let one = generate_colored_mnist(1, 1, 1, 0.5, 0).unwrap();
        assert!(matches!(base_new_split(one, 0), Err(Error::Input(_))));
    }

    #[test]
    fn corpus_captions_are_in_vocabulary() {
        for kind in [GeneratorKind::ColoredMnist, GeneratorKind::ShapesOnTextures] {
            let texts = vocabulary_texts(kind);
            let vocab = crate::vlm::Vocabulary::from_texts(texts.iter().map(String::as_str));
            for item in pretraining_corpus(kind, kind.max_classes(), 200, 1).unwrap() {
                assert!(vocab.covers(&item.caption), "{}", item.caption);
            }
        }
    }
}
