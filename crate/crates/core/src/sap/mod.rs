//! Spurious-attribute probing: ask an attribute source what each category's
//! images show, split the answers into core and non-core attributes, then
//! let the concept-bottleneck probe decide which non-core ones the model
//! actually relies on.

mod client;
mod fixture;
mod source;

use serde::{Deserialize, Serialize};

use crate::attributes::{dedup_attributes, Attribute, AttributeKind, AttributePool, SimilarityProvider, DEFAULT_DEDUP_THRESHOLD};
use crate::cbm::{annotate_pool, build_bottleneck, fit_cbm, CategoryVerdict, CbmConfig, CbmProbe, ThresholdPolicy};
use crate::datagen::{GroupedDataset, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::vlm::DualEncoderModel;

pub use client::{ClientConfig, ExternalClient};
pub use fixture::{load_fixtures, save_fixtures, FixtureRecord, FixtureSource, Recorder};
pub use source::{parse_bullets, parse_confirmations, AttributeSource, Query, QueryTemplates, Question, MAX_ATTRIBUTE_WORDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SapConfig {
    pub query_images: usize,
    pub dedup_threshold: f64,
    pub policy: ThresholdPolicy,
    pub templates: QueryTemplates,
    pub cbm: CbmConfig,
}

impl Default for SapConfig {
    fn default() -> Self {
        Self {
            query_images: 16,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            policy: ThresholdPolicy::default(),
            templates: QueryTemplates::default(),
            cbm: CbmConfig::default(),
        }
    }
}

fn to_attributes(texts: &[String], kind: AttributeKind, source: &dyn AttributeSource) -> Result<Vec<Attribute>> {
    texts.iter().map(|t| Attribute::new(t.clone(), kind, source.origin())).collect()
}

fn push_unique(list: &mut Vec<String>, items: Vec<String>) {
    for i in items {
        if !list.contains(&i) {
            list.push(i);
        }
    }
}

/// Queries `source` about one category and returns `(core, non_core)`.
///
/// Q3 answers are core. Q1 answers are non-core unless Q2 confirms them as
/// parts or they already appear among the core answers.
#[allow(clippy::too_many_arguments)]
pub fn probe_attributes(
    source: &mut dyn AttributeSource,
    templates: &QueryTemplates,
    images: &[&Image],
    image_ids: &[String],
    category: &str,
    similarity: &dyn SimilarityProvider,
    dedup_threshold: f64,
) -> Result<(Vec<Attribute>, Vec<Attribute>)> {
    if images.is_empty() {
        return Err(Error::input(format!("no query images for category '{category}'")));
    }
    templates.validate()?;
    let mut seen: Vec<String> = Vec::new();
    let mut ask = |source: &mut dyn AttributeSource, q: source::Question, round: usize, items: &[String]| -> Result<String> {
        let prompt = templates.render(q, round, category, items);
        let query = Query {
            question: q,
            round,
            prompt,
            category,
            image_ids,
            images,
            items,
        };
        match source.ask(&query) {
            Ok(r) => {
                seen.push(r.clone());
                Ok(r)
            }
            Err(Error::Source { message, .. }) => Err(Error::Source {
                message,
                partial: seen.clone(),
            }),
            Err(e) => Err(e),
        }
    };
    let (mut visible, mut parts, mut core) = (Vec::new(), Vec::new(), Vec::new());
    for round in 0..templates.rounds() {
        let listed = parse_bullets(&ask(source, Question::Q1, round, &[])?);
        if !listed.is_empty() {
            push_unique(&mut parts, parse_confirmations(&ask(source, Question::Q2, round, &listed)?));
        }
        push_unique(&mut visible, listed);
        push_unique(&mut core, parse_bullets(&ask(source, Question::Q3, round, &[])?));
    }
    let non_core: Vec<String> = visible.into_iter().filter(|v| !parts.contains(v) && !core.contains(v)).collect();
    let core = dedup_attributes(&to_attributes(&core, AttributeKind::Core, source)?, similarity, dedup_threshold)?;
    // Scanning core first lets near-duplicates of core phrases drop out of the non-core list.
    let mut joint = core.clone();
    joint.extend(to_attributes(&non_core, AttributeKind::NonCore, source)?);
    let non_core = dedup_attributes(&joint, similarity, dedup_threshold)?
        .into_iter()
        .filter(|a| a.kind == AttributeKind::NonCore)
        .collect();
    Ok((core, non_core))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFailure {
    pub category: String,
    pub message: String,
    pub external: bool,
}

#[derive(Debug, Clone)]
pub struct SapOutcome {
    pub pool: AttributePool,
    pub verdicts: Vec<CategoryVerdict>,
    pub probe: CbmProbe,
    pub failures: Vec<CategoryFailure>,
}

/// Fits a fresh probe for `model` and flags the pool. `targets` are usually
/// the labels, but may be the model's own predictions.
pub fn probe_pool(
    pool: &AttributePool,
    model: &DualEncoderModel,
    images: &[&Image],
    targets: &[usize],
    policy: &ThresholdPolicy,
    cbm: &CbmConfig,
) -> Result<(AttributePool, Vec<CategoryVerdict>, CbmProbe)> {
    let mut probe = build_bottleneck(pool, model)?;
    fit_cbm(&mut probe, model, images, targets, cbm)?;
    let (flagged, verdicts) = annotate_pool(&probe, pool, policy)?;
    Ok((flagged, verdicts, probe))
}

/// Runs probing for every category, then flags spurious attributes with a
/// probe fitted on the training split. Per-category source failures are
/// collected in the outcome rather than aborting the run.
pub fn run_sap(
    dataset: &GroupedDataset,
    source: &mut dyn AttributeSource,
    model: &DualEncoderModel,
    similarity: &dyn SimilarityProvider,
    cfg: &SapConfig,
) -> Result<SapOutcome> {
    if cfg.query_images == 0 {
        return Err(Error::config("query_images must be at least 1"));
    }
    cfg.policy.validate()?;
    let mut pool = AttributePool::for_categories(&dataset.categories);
    let mut failures = Vec::new();
    for cat in &dataset.categories {
        let idx: Vec<usize> = dataset
            .indices_for(Split::Train, &[cat.id])
            .into_iter()
            .take(cfg.query_images)
            .collect();
        let images = dataset.images(&idx);
        let ids: Vec<String> = idx.iter().map(|&i| dataset.samples[i].id.clone()).collect();
        match probe_attributes(source, &cfg.templates, &images, &ids, &cat.name, similarity, cfg.dedup_threshold) {
            Ok((core, non_core)) => {
                let mut attrs: Vec<Attribute> = core.into_iter().chain(non_core).collect();
                attrs.retain(|a| {
                    let ok = model.vocab.covers(&a.text);
                    if !ok {
                        log::warn!("dropping '{}' for '{}': words outside the model vocabulary", a.text, cat.name);
                    }
                    ok
                });
                pool.set(&cat.name, attrs);
            }
            Err(e @ (Error::Source { .. } | Error::Input(_))) => {
                log::warn!("probing '{}' failed: {e}", cat.name);
                failures.push(CategoryFailure {
                    category: cat.name.clone(),
                    message: e.to_string(),
                    external: matches!(e, Error::Source { .. }),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if pool.total_attributes() == 0 {
        let msg = failures.first().map_or("no attributes were found".to_string(), |f| f.message.clone());
        return Err(if failures.iter().any(|f| f.external) {
            Error::Source {
                message: msg,
                partial: Vec::new(),
            }
        } else {
            Error::input(msg)
        });
    }
    let train = dataset.train_indices();
    let (pool, verdicts, probe) = probe_pool(
        &pool,
        model,
        &dataset.images(&train),
        &dataset.labels(&train),
        &cfg.policy,
        &cfg.cbm,
    )?;
    Ok(SapOutcome {
        pool,
        verdicts,
        probe,
        failures,
    })
}
