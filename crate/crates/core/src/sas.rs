//! Spurious-attribute shielding: pseudo categories that embody a flagged
//! attribute, the per-category subsidiary task built from them, and the
//! selective variant that shields only the highest-ratio categories.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{Attribute, SimilarityProvider};
use crate::datagen::palette::{parse_color_attribute, parse_texture_attribute, COLOR_NAMES};
use crate::datagen::render_background;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::cosine;
use crate::seed::{derive_seed, rng_from};
use crate::vlm::objective::{prompt_cross_entropy, ImageInput};
use crate::vlm::{ClassPrompt, DualEncoderModel, SubsidiaryGroup};

pub const DEFAULT_LAMBDA: f64 = 2.0;
pub const DEFAULT_SELECTIVE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    #[default]
    ProceduralSynthesis,
    LocalRetrieval,
}

impl Provider {
    pub fn name(self) -> &'static str {
        match self {
            Provider::ProceduralSynthesis => "procedural_synthesis",
            Provider::LocalRetrieval => "local_retrieval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub provider: Provider,
    pub prompt_count: usize,
    pub candidates_per_prompt: usize,
    /// Directory with `captions.tsv` and the images it names.
    pub corpus_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            provider: Provider::ProceduralSynthesis,
            prompt_count: 5,
            candidates_per_prompt: 8,
            corpus_dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image: Image,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCategory {
    pub id: usize,
    pub attribute: Attribute,
    pub images: Vec<Image>,
    pub prompt: ClassPrompt,
    pub provider: Provider,
    /// Purity score of each kept image.
    pub scores: Vec<f64>,
}

pub fn pseudo_prompt_text(attribute: &str) -> String {
    format!("a photo of a {attribute}")
}

/// Text variants used to describe an attribute during retrieval.
pub fn attribute_prompt_variants(attribute: &str, count: usize) -> Vec<String> {
    const TEMPLATES: [&str; 5] = ["a photo of a {}", "{}", "an image showing a {}", "a photo of {}", "a {}"];
    (0..count).map(|i| TEMPLATES[i % TEMPLATES.len()].replace("{}", attribute)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub path: PathBuf,
    pub caption: String,
}

/// Reads `captions.tsv` (image id, tab, caption) from a corpus directory.
pub fn load_corpus_index(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let tsv = dir.join("captions.tsv");
    if !tsv.exists() {
        return Err(Error::config(format!("retrieval corpus index {} not found", tsv.display())));
    }
    let text = std::fs::read_to_string(&tsv).map_err(|e| Error::io(&tsv, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(&tsv, format!("line {} has no tab", n + 1)))?;
        let rel = if Path::new(id).extension().is_some() {
            id.to_string()
        } else {
            format!("{id}.png")
        };
        out.push(CorpusEntry {
            id: id.to_string(),
            path: dir.join(rel),
            caption: caption.trim().to_string(),
        });
    }
    Ok(out)
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn rank_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// For each prompt variant, takes the `per_prompt` best-matching captions
/// not already chosen.
pub fn retrieve(
    corpus: &[CorpusEntry],
    attribute: &str,
    similarity: &dyn SimilarityProvider,
    prompt_count: usize,
    per_prompt: usize,
) -> Result<Vec<usize>> {
    let mut chosen: Vec<usize> = Vec::new();
    for variant in attribute_prompt_variants(attribute, prompt_count) {
        let scores: Vec<f64> = corpus
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if chosen.contains(&i) {
                    Ok(f64::NEG_INFINITY)
                } else {
                    similarity.similarity(&e.caption, &variant)
                }
            })
            .collect::<Result<_>>()?;
        let fresh = corpus.len() - chosen.len();
        chosen.extend(rank_top_k(&scores, per_prompt.min(fresh)));
    }
    Ok(chosen)
}

fn synthesize(attribute: &str, cfg: &ProviderConfig, seed: u64) -> Option<Vec<Candidate>> {
    let color = parse_color_attribute(attribute);
    let texture = parse_texture_attribute(attribute);
    if color.is_none() && texture.is_none() {
        return None;
    }
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(cfg.prompt_count * cfg.candidates_per_prompt);
    for p in 0..cfg.prompt_count {
        let t = if cfg.prompt_count > 1 { p as f64 / (cfg.prompt_count - 1) as f64 } else { 0.5 };
        let value = 0.68 + 0.24 * t;
        let noise = 0.02 + 0.04 * ((p % 3) as f64 / 2.0);
        for c in 0..cfg.candidates_per_prompt {
            let col = color.or_else(|| Some(rng.random_range(0..COLOR_NAMES.len())));
            let image = render_background(col, texture, value, noise, &mut rng);
            out.push(Candidate {
                image,
                provenance: format!("synthesis:style{p}:{c}"),
            });
        }
    }
    Some(out)
}

/// Candidate images depicting `attribute` alone.
pub fn build_pseudo_candidates(
    attribute: &Attribute,
    cfg: &ProviderConfig,
    similarity: &dyn SimilarityProvider,
    seed: u64,
) -> Result<Vec<Candidate>> {
    if cfg.prompt_count == 0 {
        return Err(Error::config("prompt_count must be at least 1"));
    }
    if cfg.provider == Provider::ProceduralSynthesis {
        if let Some(c) = synthesize(&attribute.text, cfg, seed) {
            return Ok(c);
        }
        if cfg.corpus_dir.is_none() {
            return Err(Error::config(format!(
                "no renderer for '{}' and no retrieval corpus configured",
                attribute.text
            )));
        }
        log::warn!("no renderer for '{}', falling back to retrieval", attribute.text);
    }
    let dir = cfg
        .corpus_dir
        .as_ref()
        .ok_or_else(|| Error::config("local retrieval needs corpus_dir"))?;
    let corpus = load_corpus_index(dir)?;
    retrieve(&corpus, &attribute.text, similarity, cfg.prompt_count, cfg.candidates_per_prompt)?
        .into_iter()
        .map(|i| {
            Ok(Candidate {
                image: Image::load_png(&corpus[i].path)?,
                provenance: format!("retrieval:{}", corpus[i].id),
            })
        })
        .collect()
}

/// Ranks candidates by image/attribute cosine similarity and returns the
/// best `k` as `(index, score)`, ties broken by candidate index.
pub fn select_topk_pure(
    candidates: &[Candidate],
    attribute_embedding: &[f64],
    k: usize,
    model: &DualEncoderModel,
) -> Result<Vec<(usize, f64)>> {
    if k > candidates.len() {
        return Err(Error::input(format!("asked for {k} pure images from {} candidates", candidates.len())));
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| Ok(cosine(&model.encode_image(&c.image)?, attribute_embedding)))
        .collect::<Result<_>>()?;
    Ok(rank_top_k(&scores, k).into_iter().map(|i| (i, scores[i])).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsidiaryEntry {
    pub category: usize,
    pub pseudo: Vec<PseudoCategory>,
}

impl SubsidiaryEntry {
    /// Label alphabet: the real category followed by its pseudo categories.
    pub fn labels(&self) -> Vec<usize> {
        std::iter::once(self.category).chain(self.pseudo.iter().map(|p| p.id)).collect()
    }

    /// Training view: real shots labeled 0, pseudo shots labeled by position.
    pub fn group<'a>(&'a self, real_prompt: &ClassPrompt, real_shots: &[&'a Image]) -> SubsidiaryGroup<'a> {
        let mut prompts = vec![real_prompt.clone()];
        let mut images: Vec<&Image> = real_shots.to_vec();
        let mut targets = vec![0; real_shots.len()];
        for (j, p) in self.pseudo.iter().enumerate() {
            prompts.push(p.prompt.clone());
            images.extend(p.images.iter());
            targets.extend(std::iter::repeat_n(j + 1, p.images.len()));
        }
        SubsidiaryGroup { prompts, images, targets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShieldConfig {
    pub provider: ProviderConfig,
    pub shots_per_pseudo: usize,
    pub lambda: f64,
    /// `Some(f)` shields only the top fraction `f` of categories by ratio.
    pub selective_fraction: Option<f64>,
    pub enabled: bool,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            provider: ProviderConfig::default(),
            shots_per_pseudo: 16,
            lambda: DEFAULT_LAMBDA,
            selective_fraction: None,
            enabled: true,
        }
    }
}

/// Builds one pseudo category per spurious attribute of `category`. Pseudo
/// ids are handed out from `next_id`. A pseudo category whose provider fails
/// is dropped with a warning.
#[allow(clippy::too_many_arguments)]
pub fn build_subsidiary_dataset(
    category: usize,
    spurious: &[Attribute],
    real_shots: usize,
    shots_per_pseudo: usize,
    cfg: &ProviderConfig,
    model: &DualEncoderModel,
    similarity: &dyn SimilarityProvider,
    next_id: &mut usize,
) -> Result<SubsidiaryEntry> {
    if real_shots == 0 {
        return Err(Error::input(format!("category {category} has no real shots")));
    }
    let mut pseudo = Vec::new();
    for attr in spurious {
        let seed = derive_seed(cfg.seed, &format!("synthesis/{category}/{}", attr.text));
        let built = build_pseudo_candidates(attr, cfg, similarity, seed).and_then(|cands| {
            let emb = model.encode_phrase(&attr.text)?;
            let top = select_topk_pure(&cands, &emb, shots_per_pseudo, model)?;
            Ok((cands, top))
        });
        match built {
            Ok((cands, top)) => {
                let id = *next_id;
                *next_id += 1;
                pseudo.push(PseudoCategory {
                    id,
                    attribute: attr.clone(),
                    images: top.iter().map(|&(i, _)| cands[i].image.clone()).collect(),
                    prompt: ClassPrompt::new(id, pseudo_prompt_text(&attr.text))?,
                    provider: cfg.provider,
                    scores: top.iter().map(|&(_, s)| s).collect(),
                });
            }
            Err(e) => log::warn!("dropping pseudo category for '{}': {e}", attr.text),
        }
    }
    Ok(SubsidiaryEntry { category, pseudo })
}

/// Mean cross-entropy of a category's subsidiary samples over its own label set.
pub fn subsidiary_loss(model: &DualEncoderModel, group: &SubsidiaryGroup<'_>) -> Result<f64> {
    if group.images.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<ImageInput<'_>> = group.images.iter().map(|im| ImageInput::Pixels(im)).collect();
    let w = vec![1.0 / group.images.len() as f64; group.images.len()];
    prompt_cross_entropy(model, &inputs, &group.targets, &w, &group.prompts, None)
}

/// Subsidiary loss averaged over categories.
pub fn pseudo_loss(model: &DualEncoderModel, groups: &[SubsidiaryGroup<'_>]) -> Result<f64> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for g in groups {
        total += subsidiary_loss(model, g)?;
    }
    Ok(total / groups.len() as f64)
}

pub fn combine_losses(l_ce: f64, l_pse: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda {lambda} is negative")));
    }
    Ok(l_ce + lambda * l_pse)
}

/// The `ceil(fraction * n)` categories with the highest ratio, ties broken by
/// lower id. Returned in ascending id order.
pub fn select_categories_by_scr(scr: &[(usize, f64)], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("selective fraction {fraction} outside (0, 1]")));
    }
    if scr.is_empty() {
        return Err(Error::input("no categories to select from"));
    }
    let count = ((fraction * scr.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<&(usize, f64)> = scr.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = order.into_iter().take(count).map(|p| p.0).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoManifest {
    pub attribute: String,
    pub provider: String,
    pub shots: usize,
    pub candidate_scores: Vec<f64>,
    #[serde(default)]
    pub id: usize,
    #[serde(default)]
    pub category: usize,
}

fn slug(text: &str) -> String {
    text.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

/// Writes each pseudo category to `<dir>/<category>-<attribute>/`.
pub fn save_pseudo_categories(entries: &[SubsidiaryEntry], dir: &Path) -> Result<()> {
    for e in entries {
        for p in &e.pseudo {
            let sub = dir.join(format!("{:03}-{}", e.category, slug(&p.attribute.text)));
            std::fs::create_dir_all(&sub).map_err(|err| Error::io(&sub, err))?;
            for (i, img) in p.images.iter().enumerate() {
                img.save_png(&sub.join(format!("{i:04}.png")))?;
            }
            let manifest = PseudoManifest {
                attribute: p.attribute.text.clone(),
                provider: p.provider.name().to_string(),
                shots: p.images.len(),
                candidate_scores: p.scores.clone(),
                id: p.id,
                category: e.category,
            };
            let path = sub.join("manifest.json");
            let text = serde_json::to_string_pretty(&manifest).map_err(|err| Error::input(err.to_string()))?;
            std::fs::write(&path, text + "\n").map_err(|err| Error::io(&path, err))?;
        }
    }
    Ok(())
}

/// Reads back [`save_pseudo_categories`] output, grouped per category in id order.
pub fn load_pseudo_categories(dir: &Path, pool_attribute: impl Fn(usize, &str) -> Option<Attribute>) -> Result<Vec<SubsidiaryEntry>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact {
            path: dir.to_path_buf(),
            hint: "run the shield stage first".into(),
        });
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    subdirs.sort();
    let mut entries: Vec<SubsidiaryEntry> = Vec::new();
    for sub in subdirs {
        let mpath = sub.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: PseudoManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let attribute = pool_attribute(m.category, &m.attribute)
            .ok_or_else(|| Error::format(&mpath, format!("attribute '{}' not in the pool", m.attribute)))?;
        let images = (0..m.shots)
            .map(|i| Image::load_png(&sub.join(format!("{i:04}.png"))))
            .collect::<Result<Vec<_>>>()?;
        let provider = match m.provider.as_str() {
            "local_retrieval" => Provider::LocalRetrieval,
            _ => Provider::ProceduralSynthesis,
        };
        let p = PseudoCategory {
            id: m.id,
            prompt: ClassPrompt::new(m.id, pseudo_prompt_text(&m.attribute))?,
            attribute,
            images,
            provider,
            scores: m.candidate_scores,
        };
        match entries.iter_mut().find(|e| e.category == m.category) {
            Some(e) => e.pseudo.push(p),
            None => entries.push(SubsidiaryEntry {
                category: m.category,
                pseudo: vec![p],
            }),
        }
    }
    entries.sort_by_key(|e| e.category);
    for e in &mut entries {
        e.pseudo.sort_by_key(|p| p.id);
    }
    Ok(entries)
}
