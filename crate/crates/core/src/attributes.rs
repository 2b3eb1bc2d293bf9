//! The attribute pool: per-category attribute lists, prompt assembly and
//! near-duplicate removal.

use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datagen::Category;
use crate::error::{Error, Result};
use crate::math::cosine;
use crate::vlm::{ClassPrompt, DualEncoderModel};

pub const POOL_VERSION: u32 = 1;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Core,
    NonCore,
    Spurious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeOrigin {
    Oracle,
    Fixture,
    ExternalClient,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub text: String,
    pub kind: AttributeKind,
    pub weight: Option<f64>,
    pub source: AttributeOrigin,
}

impl Attribute {
    pub fn new(text: impl Into<String>, kind: AttributeKind, source: AttributeOrigin) -> Result<Self> {
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(Error::input("attribute text is empty"));
        }
        Ok(Self {
            text,
            kind,
            weight: None,
            source,
        })
    }

    pub fn is_spurious(&self) -> bool {
        self.kind == AttributeKind::Spurious
    }

    /// Promotes a non-core attribute to spurious. Core attributes cannot be
    /// spurious.
    pub fn mark_spurious(&mut self) -> Result<()> {
        match self.kind {
            AttributeKind::NonCore | AttributeKind::Spurious => {
                self.kind = AttributeKind::Spurious;
                Ok(())
            }
            AttributeKind::Core => Err(Error::input(format!("core attribute '{}' cannot be spurious", self.text))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolEntry {
    pub category: String,
    pub attributes: Vec<Attribute>,
}

/// Attribute lists keyed by category name, kept in category order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributePool {
    entries: Vec<PoolEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptVariant {
    /// Category name only.
    NameOnly,
    /// Every attribute in the pool.
    Full,
    /// Every attribute except those flagged spurious.
    Filtered,
}

impl AttributePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty entries for each category, in id order.
    pub fn for_categories(categories: &[Category]) -> Self {
        Self {
            entries: categories
                .iter()
                .map(|c| PoolEntry {
                    category: c.name.clone(),
                    attributes: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_attributes(&self) -> usize {
        self.entries.iter().map(|e| e.attributes.len()).sum()
    }

    pub fn position(&self, category: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.category == category)
    }

    pub fn get(&self, category: &str) -> Option<&[Attribute]> {
        self.position(category).map(|i| self.entries[i].attributes.as_slice())
    }

    pub fn get_mut(&mut self, category: &str) -> Option<&mut Vec<Attribute>> {
        let i = self.position(category)?;
        Some(&mut self.entries[i].attributes)
    }

    /// Replaces the category's list, appending a new entry if it is unknown.
    pub fn set(&mut self, category: &str, attributes: Vec<Attribute>) {
        match self.position(category) {
            Some(i) => self.entries[i].attributes = attributes,
            None => self.entries.push(PoolEntry {
                category: category.to_string(),
                attributes,
            }),
        }
    }

    pub fn spurious(&self, category: &str) -> Vec<&Attribute> {
        self.get(category).unwrap_or_default().iter().filter(|a| a.is_spurious()).collect()
    }

    /// Copy with every spurious attribute removed.
    pub fn without_spurious(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| PoolEntry {
                    category: e.category.clone(),
                    attributes: e.attributes.iter().filter(|a| !a.is_spurious()).cloned().collect(),
                })
                .collect(),
        }
    }

    /// One prompt per category, in the order of `categories`.
    pub fn prompts(&self, categories: &[Category], variant: PromptVariant) -> Result<Vec<ClassPrompt>> {
        categories
            .iter()
            .map(|c| {
                let attrs: Vec<Attribute> = match variant {
                    PromptVariant::NameOnly => Vec::new(),
                    PromptVariant::Full => self.get(&c.name).unwrap_or_default().to_vec(),
                    PromptVariant::Filtered => self
                        .get(&c.name)
                        .unwrap_or_default()
                        .iter()
                        .filter(|a| !a.is_spurious())
                        .cloned()
                        .collect(),
                };
                build_prompt(c, &attrs)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::input(format!("cannot serialize pool: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::input(format!("malformed attribute pool: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run the probe stage first".into(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

struct OrderedCategories<'a>(&'a [PoolEntry]);

impl Serialize for OrderedCategories<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for e in self.0 {
            m.serialize_entry(&e.category, &e.attributes)?;
        }
        m.end()
    }
}

impl Serialize for AttributePool {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(2))?;
        m.serialize_entry("version", &POOL_VERSION)?;
        m.serialize_entry("categories", &OrderedCategories(&self.entries))?;
        m.end()
    }
}

struct Entries(Vec<PoolEntry>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from category name to attribute list")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Entries, A::Error> {
                let mut out: Vec<PoolEntry> = Vec::new();
                while let Some((category, attributes)) = map.next_entry::<String, Vec<Attribute>>()? {
                    if out.iter().any(|e| e.category == category) {
                        return Err(serde::de::Error::custom(format!("duplicate category '{category}'")));
                    }
                    out.push(PoolEntry { category, attributes });
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl<'de> Deserialize<'de> for AttributePool {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            version: u32,
            categories: Entries,
        }
        let raw = Raw::deserialize(d)?;
        if raw.version != POOL_VERSION {
            return Err(serde::de::Error::custom(format!("unsupported pool version {}", raw.version)));
        }
        Ok(AttributePool {
            entries: raw.categories.0,
        })
    }
}

/// Prompt text for a category name and attribute list.
pub fn prompt_text(name: &str, attributes: &[Attribute]) -> String {
    if attributes.is_empty() {
        format!("a photo of a {name}")
    } else {
        let list: Vec<&str> = attributes.iter().map(|a| a.text.as_str()).collect();
        format!("a photo of a {name}, which has {}", list.join(", "))
    }
}

pub fn build_prompt(category: &Category, attributes: &[Attribute]) -> Result<ClassPrompt> {
    ClassPrompt::new(category.id, prompt_text(&category.name, attributes))
}

/// Pairwise similarity between attribute texts.
pub trait SimilarityProvider {
    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

/// Cosine similarity of the model's text embeddings.
pub struct ModelSimilarity<'a> {
    pub model: &'a DualEncoderModel,
}

impl SimilarityProvider for ModelSimilarity<'_> {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(cosine(&self.model.encode_phrase(a)?, &self.model.encode_phrase(b)?))
    }
}

/// Explicit similarity table, symmetric by construction. Pairs that are not
/// listed have similarity 0.
#[derive(Debug, Clone, Default)]
pub struct FixtureSimilarity {
    pairs: Vec<(String, String, f64)>,
}

impl FixtureSimilarity {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, a: &str, b: &str, sim: f64) -> Self {
        self.pairs.push((a.to_string(), b.to_string(), sim));
        self
    }
}

impl SimilarityProvider for FixtureSimilarity {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        if a == b {
            return Ok(1.0);
        }
        Ok(self
            .pairs
            .iter()
            .find(|(x, y, _)| (x == a && y == b) || (x == b && y == a))
            .map_or(0.0, |p| p.2))
    }
}

/// Greedy first-wins scan: an attribute is dropped if it repeats the text of
/// a retained one or its similarity to a retained one reaches `threshold`.
pub fn dedup_attributes(attributes: &[Attribute], similarity: &dyn SimilarityProvider, threshold: f64) -> Result<Vec<Attribute>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("dedup threshold {threshold} outside [0, 1]")));
    }
    let mut kept: Vec<Attribute> = Vec::with_capacity(attributes.len());
    'scan: for a in attributes {
        let key = a.text.trim().to_lowercase();
        for k in &kept {
            if k.text.trim().to_lowercase() == key || similarity.similarity(&k.text, &a.text)? >= threshold {
                continue 'scan;
            }
        }
        kept.push(a.clone());
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(t: &str, kind: AttributeKind) -> Attribute {
        Attribute::new(t, kind, AttributeOrigin::Manual).unwrap()
    }

    fn cat(name: &str) -> Category {
        Category {
            id: 0,
            name: name.into(),
            core: vec![],
            spurious: vec![],
        }
    }

    #[test]
    fn prompts() {
        assert_eq!(build_prompt(&cat("dog"), &[]).unwrap().text, "a photo of a dog");
        let a = [attr("wheels", AttributeKind::Core), attr("handle", AttributeKind::Core)];
        assert_eq!(
            build_prompt(&cat("mountain bike"), &a).unwrap().text,
            "a photo of a mountain bike, which has wheels, handle"
        );
    }

    #[test]
    fn filtered_prompts_drop_spurious() {
        let mut pool = AttributePool::new();
        let mut s = attr("snow", AttributeKind::NonCore);
        s.mark_spurious().unwrap();
        pool.set("wolf", vec![attr("fur", AttributeKind::Core), s, attr("tree", AttributeKind::NonCore)]);
        let p = pool.prompts(&[cat("wolf")], PromptVariant::Filtered).unwrap();
        assert_eq!(p[0].text, "a photo of a wolf, which has fur, tree");
        let full = pool.prompts(&[cat("wolf")], PromptVariant::Full).unwrap();
        assert!(full[0].text.contains("snow"));
    }

    #[test]
    fn empty_text_and_core_promotion_rejected() {
        assert!(Attribute::new("  ", AttributeKind::Core, AttributeOrigin::Manual).is_err());
        assert!(attr("x", AttributeKind::Core).mark_spurious().is_err());
    }

    #[test]
    fn dedup_examples() {
        let list = [
            attr("ice surface", AttributeKind::NonCore),
            attr("glacier", AttributeKind::NonCore),
            attr("wheel", AttributeKind::Core),
        ];
        let sim = FixtureSimilarity::new()
            .with("ice surface", "glacier", 0.95)
            .with("ice surface", "wheel", 0.1)
            .with("glacier", "wheel", 0.1);
        let out = dedup_attributes(&list, &sim, 0.9).unwrap();
        let texts: Vec<_> = out.iter().map(|a| a.text.as_str()).collect();
        assert_eq!(texts, ["ice surface", "wheel"]);
        assert_eq!(dedup_attributes(&list, &sim, 1.0).unwrap(), list.to_vec());
        let dup = [attr("wheel", AttributeKind::Core), attr("wheel", AttributeKind::NonCore)];
        assert_eq!(dedup_attributes(&dup, &FixtureSimilarity::new(), 1.0).unwrap().len(), 1);
        assert!(matches!(dedup_attributes(&list, &sim, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_preserves_order() {
        let mut pool = AttributePool::new();
        pool.set("zebra", vec![attr("stripes", AttributeKind::Core)]);
        let mut w = attr("grass", AttributeKind::NonCore);
        w.weight = Some(0.25);
        pool.set("antelope", vec![w]);
        pool.set("empty", vec![]);
        let json = pool.to_json().unwrap();
        assert!(json.find("zebra").unwrap() < json.find("antelope").unwrap());
        assert_eq!(AttributePool::from_json(&json).unwrap(), pool);
        assert!(json.contains("\"non_core\""));
        assert!(AttributePool::from_json(r#"{"version":2,"categories":{}}"#).is_err());
    }
}
