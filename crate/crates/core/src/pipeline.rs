//! End-to-end stages over a run directory. Each stage reads only its declared
//! inputs from the directory and writes only its own outputs, so stages can be
//! re-run independently. Layout:
//!
//! ```text
//! config.toml, config.sha256     resolved configuration and its hash
//! dataset/                       datagen export
//! checkpoints/base.ckpt          pretrain
//! pool.json, probe.json          probe
//! pseudo/                        shield
//! checkpoints/{baseline,shielded}.ckpt   train
//! eval/*.json, eval/summary.txt, eval/metrics.csv   eval
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributePool, ModelSimilarity, PromptVariant};
use crate::cbm::CategoryVerdict;
use crate::config::{RunConfig, SourceBackend};
use crate::datagen::{self, base_new_split, export_dataset, load_dataset, oracle_attribute_source, GroupedDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, CounterGroup, render_csv, render_table, zero_shot_eval, EvalReport, ZeroShotResult};
use crate::sap::{run_sap, AttributeSource, CategoryFailure, ExternalClient, FixtureSource};
use crate::sas::{build_subsidiary_dataset, load_pseudo_categories, save_pseudo_categories, select_categories_by_scr, SubsidiaryEntry};
use crate::vlm::{
    fit_main, load_checkpoint, pretrain, save_checkpoint, DualEncoderModel, SubsidiaryTask, TrainingSet, Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Datagen,
    Pretrain,
    Probe,
    Shield,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Datagen, Stage::Pretrain, Stage::Probe, Stage::Shield, Stage::Train, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Datagen => "datagen",
            Stage::Pretrain => "pretrain",
            Stage::Probe => "probe",
            Stage::Shield => "shield",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn config_hash(&self) -> PathBuf {
        self.root.join("config.sha256")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("base.ckpt")
    }
    pub fn checkpoint(&self, method: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{method}.ckpt"))
    }
    pub fn pool(&self) -> PathBuf {
        self.root.join("pool.json")
    }
    pub fn probe_summary(&self) -> PathBuf {
        self.root.join("probe.json")
    }
    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report(&self, method: &str, split: &str) -> PathBuf {
        self.eval_dir().join(format!("{method}-{split}.json"))
    }
}

pub const METHODS: [&str; 2] = ["baseline", "shielded"];

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("run the `{producer}` stage first"),
        })
    }
}

/// What the probe stage records besides the pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub config_hash: String,
    pub verdicts: Vec<CategoryVerdict>,
    pub failures: Vec<CategoryFailure>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub layout: RunLayout,
    hash: String,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        let layout = RunLayout::new(config.output_dir.clone());
        let hash = config.hash();
        Self { config, layout, hash }
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn record_config(&self) -> Result<()> {
        ensure_dir(&self.layout.root)?;
        write_text(&self.layout.config(), &self.config.to_toml()?)?;
        write_text(&self.layout.config_hash(), &format!("{}\n", self.hash))
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        self.record_config()?;
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Datagen => self.datagen(),
            Stage::Pretrain => self.pretrain(),
            Stage::Probe => self.probe(),
            Stage::Shield => self.shield(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval().map(|_| ()),
        }
    }

    pub fn run_all(&self) -> Result<Vec<(String, EvalReport)>> {
        for stage in &Stage::ALL[..5] {
            self.run(*stage)?;
        }
        self.record_config()?;
        self.eval()
    }

    pub fn generate_dataset(&self) -> Result<GroupedDataset> {
        let ds = datagen::generate(&self.config.dataset_spec())?;
        if self.config.dataset.base_new {
            base_new_split(ds, self.config.seeds().derive("base-new"))
        } else {
            Ok(ds)
        }
    }

    fn datagen(&self) -> Result<()> {
        let ds = self.generate_dataset()?;
        let dir = self.layout.dataset();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        export_dataset(&ds, &dir)
    }

    pub fn load_dataset(&self) -> Result<GroupedDataset> {
        load_dataset(&self.layout.dataset())
    }

    /// A freshly initialized and pre-trained model for this configuration.
    pub fn pretrained_model(&self) -> Result<DualEncoderModel> {
        let kind = self.config.dataset.generator;
        let classes = self.config.dataset.classes;
        let corpus = datagen::pretraining_corpus(kind, classes, self.config.corpus_size(), self.config.seeds().derive("corpus"))?;
        let texts = datagen::vocabulary_texts(kind);
        let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
        let mut model = DualEncoderModel::new(self.config.model_config(), vocab, classes, self.config.seeds().derive("init"))?;
        pretrain(&mut model, &corpus, &self.config.pretrain_config())?;
        Ok(model)
    }

    fn pretrain(&self) -> Result<()> {
        let model = self.pretrained_model()?;
        let path = self.layout.base_checkpoint();
        ensure_dir(path.parent().expect("checkpoint dir"))?;
        save_checkpoint(&model, &path)
    }

    fn load_model(&self, path: &Path, producer: &str) -> Result<DualEncoderModel> {
        require(path, producer)?;
        load_checkpoint(path)
    }

    fn source(&self, ds: &GroupedDataset) -> Result<Box<dyn AttributeSource>> {
        Ok(match self.config.sap.source {
            SourceBackend::Oracle => Box::new(oracle_attribute_source(ds)),
            SourceBackend::Fixture => {
                let path = self.config.sap.fixture_path.as_ref().expect("validated");
                require(path, "fixture recording")?;
                Box::new(FixtureSource::load(path)?)
            }
            SourceBackend::ExternalClient => Box::new(ExternalClient::new(self.config.client_config().expect("validated"))?),
        })
    }

    fn probe(&self) -> Result<()> {
        let model = self.load_model(&self.layout.base_checkpoint(), "pretrain")?;
        let ds = self.load_dataset()?;
        let sim = ModelSimilarity { model: &model };
        let mut source = self.source(&ds)?;
        let outcome = run_sap(&ds, source.as_mut(), &model, &sim, &self.config.sap_config())?;
        outcome.pool.save(&self.layout.pool())?;
        let summary = ProbeSummary {
            config_hash: self.hash.clone(),
            verdicts: outcome.verdicts,
            failures: outcome.failures,
        };
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::input(e.to_string()))?;
        write_text(&self.layout.probe_summary(), &(text + "\n"))
    }

    fn load_pool(&self) -> Result<AttributePool> {
        require(&self.layout.pool(), "probe")?;
        AttributePool::load(&self.layout.pool())
    }

    fn load_probe_summary(&self) -> Result<ProbeSummary> {
        let path = self.layout.probe_summary();
        require(&path, "probe")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Categories eligible for shielding: trained ones with at least one
    /// flagged attribute, narrowed by the selective fraction when set.
    pub fn shield_targets(&self, ds: &GroupedDataset, verdicts: &[CategoryVerdict]) -> Result<Vec<usize>> {
        let trained = trained_categories(ds);
        let flagged: Vec<(usize, f64)> = verdicts
            .iter()
            .filter(|v| !v.spurious.is_empty())
            .filter_map(|v| ds.categories.iter().find(|c| c.name == v.category).map(|c| (c.id, v.scr)))
            .filter(|(id, _)| trained.contains(id))
            .collect();
        match self.config.sas.selective_fraction {
            Some(f) => {
                let all: Vec<(usize, f64)> = trained
                    .iter()
                    .map(|&id| flagged.iter().find(|(c, _)| *c == id).copied().unwrap_or((id, 0.0)))
                    .collect();
                let picked = select_categories_by_scr(&all, f)?;
                Ok(picked.into_iter().filter(|id| flagged.iter().any(|(c, _)| c == id)).collect())
            }
            None => Ok(flagged.into_iter().map(|(id, _)| id).collect()),
        }
    }

    fn shield(&self) -> Result<()> {
        let model = self.load_model(&self.layout.base_checkpoint(), "pretrain")?;
        let ds = self.load_dataset()?;
        let pool = self.load_pool()?;
        let summary = self.load_probe_summary()?;
        let dir = self.layout.pseudo();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        ensure_dir(&dir)?;
        if !self.config.sas.enabled {
            log::info!("shielding disabled; no pseudo categories built");
            return Ok(());
        }
        let entries = self.build_subsidiary(&ds, &pool, &summary.verdicts, &model)?;
        save_pseudo_categories(&entries, &dir)
    }

    pub fn build_subsidiary(
        &self,
        ds: &GroupedDataset,
        pool: &AttributePool,
        verdicts: &[CategoryVerdict],
        model: &DualEncoderModel,
    ) -> Result<Vec<SubsidiaryEntry>> {
        let cfg = self.config.shield_config();
        let sim = ModelSimilarity { model };
        let mut next_id = ds.num_categories();
        let mut entries = Vec::new();
        for id in self.shield_targets(ds, verdicts)? {
            let cat = &ds.categories[id];
            let spurious: Vec<_> = pool.spurious(&cat.name).into_iter().cloned().collect();
            let shots = ds.indices_for(Split::Train, &[id]).len();
            entries.push(build_subsidiary_dataset(id, &spurious, shots, cfg.shots_per_pseudo, &cfg.provider, model, &sim, &mut next_id)?);
        }
        Ok(entries)
    }

    fn train(&self) -> Result<()> {
        let model = self.load_model(&self.layout.base_checkpoint(), "pretrain")?;
        let ds = self.load_dataset()?;
        let pool = self.load_pool()?;
        let entries = if self.config.sas.enabled {
            load_pseudo_categories(&self.layout.pseudo(), |cat, text| {
                ds.categories
                    .get(cat)
                    .and_then(|c| pool.get(&c.name))
                    .and_then(|attrs| attrs.iter().find(|a| a.text == text).cloned())
            })?
        } else {
            Vec::new()
        };
        let (baseline, shielded) = train_pair(&model, &ds, &pool, &entries, &self.config)?;
        save_checkpoint(&baseline, &self.layout.checkpoint("baseline"))?;
        save_checkpoint(&shielded, &self.layout.checkpoint("shielded"))
    }

    /// Writes one report per method and split, plus the text table and CSV.
    pub fn eval(&self) -> Result<Vec<(String, EvalReport)>> {
        let ds = self.load_dataset()?;
        let pool = self.load_pool()?;
        let base = self.load_model(&self.layout.base_checkpoint(), "pretrain")?;
        ensure_dir(&self.layout.eval_dir())?;
        let mut reports = Vec::new();
        for method in METHODS {
            let model = self.load_model(&self.layout.checkpoint(method), "train")?;
            for (split, cats) in eval_splits(&ds) {
                let idx = ds.indices_for(Split::Test, &cats);
                let prompts = prompts_for(&pool, &ds, &cats, PromptVariant::Filtered)?;
                let counter = CounterGroup::extract(&base, &ds, &idx, &pool, self.config.eval.sim_threshold)?;
                let report = evaluate_split(
                    &model,
                    &ds,
                    &idx,
                    &prompts,
                    &counter,
                    split,
                    self.config.seed,
                    &self.hash,
                )?;
                report.save(&self.layout.report(method, split))?;
                reports.push((format!("{method}-{split}"), report));
            }
        }
        let zs = zero_shot_eval(&base, &ds, &ds.test_indices(), &pool)?;
        write_json(&self.layout.eval_dir().join("zero_shot.json"), &ZeroShotRecord { config_hash: self.hash.clone(), result: zs })?;
        write_text(&self.layout.eval_dir().join("summary.txt"), &render_table(&reports))?;
        write_text(&self.layout.eval_dir().join("metrics.csv"), &render_csv(&reports))?;
        Ok(reports)
    }
}

#[derive(Serialize)]
struct ZeroShotRecord {
    config_hash: String,
    #[serde(flatten)]
    result: ZeroShotResult,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::input(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Everything one configuration produces, kept in memory. Used by
/// experiments that sweep a setting without going through a run directory.
pub struct Experiment {
    pub dataset: GroupedDataset,
    pub base: DualEncoderModel,
    pub pool: AttributePool,
    pub verdicts: Vec<CategoryVerdict>,
    pub entries: Vec<SubsidiaryEntry>,
    pub baseline: DualEncoderModel,
    pub shielded: DualEncoderModel,
}

impl Experiment {
    /// Filtered-prompt reports for both methods on every eval split, with
    /// one counter group per split taken from the base model.
    pub fn evaluate(&self, config: &RunConfig) -> Result<Vec<(String, EvalReport)>> {
        let hash = config.hash();
        let mut out = Vec::new();
        for (split, cats) in eval_splits(&self.dataset) {
            let idx = self.dataset.indices_for(Split::Test, &cats);
            let prompts = prompts_for(&self.pool, &self.dataset, &cats, PromptVariant::Filtered)?;
            let counter = CounterGroup::extract(&self.base, &self.dataset, &idx, &self.pool, config.eval.sim_threshold)?;
            for (method, model) in METHODS.iter().zip([&self.baseline, &self.shielded]) {
                let report = evaluate_split(model, &self.dataset, &idx, &prompts, &counter, split, config.seed, &hash)?;
                out.push((format!("{method}-{split}"), report));
            }
        }
        Ok(out)
    }
}

impl Pipeline {
    /// Runs datagen through train in memory. `base` skips pretraining when
    /// the caller already has the model this configuration would produce.
    pub fn experiment(&self, base: Option<DualEncoderModel>) -> Result<Experiment> {
        let dataset = self.generate_dataset()?;
        let base = match base {
            Some(m) => m,
            None => self.pretrained_model()?,
        };
        let sim = ModelSimilarity { model: &base };
        let mut source = self.source(&dataset)?;
        let outcome = run_sap(&dataset, source.as_mut(), &base, &sim, &self.config.sap_config())?;
        let entries = if self.config.sas.enabled {
            self.build_subsidiary(&dataset, &outcome.pool, &outcome.verdicts, &base)?
        } else {
            Vec::new()
        };
        let (baseline, shielded) = train_pair(&base, &dataset, &outcome.pool, &entries, &self.config)?;
        Ok(Experiment {
            dataset,
            base,
            pool: outcome.pool,
            verdicts: outcome.verdicts,
            entries,
            baseline,
            shielded,
        })
    }
}

/// Categories the adaptation trains on: the base half if split, else all.
pub fn trained_categories(ds: &GroupedDataset) -> Vec<usize> {
    ds.base.clone().unwrap_or_else(|| (0..ds.num_categories()).collect())
}

/// Named category sets to evaluate: `test`, or `base` and `new`.
pub fn eval_splits(ds: &GroupedDataset) -> Vec<(&'static str, Vec<usize>)> {
    match (&ds.base, &ds.new) {
        (Some(b), Some(n)) => vec![("base", b.clone()), ("new", n.clone())],
        _ => vec![("test", (0..ds.num_categories()).collect())],
    }
}

/// Prompts for a subset of categories.
pub fn prompts_for(pool: &AttributePool, ds: &GroupedDataset, cats: &[usize], variant: PromptVariant) -> Result<Vec<crate::vlm::ClassPrompt>> {
    let chosen: Vec<_> = cats.iter().map(|&c| ds.categories[c].clone()).collect();
    pool.prompts(&chosen, variant)
}

/// Fits the baseline (main loss only) and the shielded model (main plus
/// subsidiary loss) from the same starting point.
pub fn train_pair(
    model: &DualEncoderModel,
    ds: &GroupedDataset,
    pool: &AttributePool,
    entries: &[SubsidiaryEntry],
    config: &RunConfig,
) -> Result<(DualEncoderModel, DualEncoderModel)> {
    let cats = trained_categories(ds);
    let idx = ds.indices_for(Split::Train, &cats);
    let data = TrainingSet {
        images: ds.images(&idx),
        labels: ds.labels(&idx),
    };
    let prompts = prompts_for(pool, ds, &cats, PromptVariant::Filtered)?;
    let cfg = config.train_config();
    let baseline = fit_main(model, &data, &prompts, &cfg, None)?.model;
    if entries.is_empty() || config.sas.lambda == 0.0 {
        if config.sas.enabled {
            log::warn!("no pseudo categories to shield with; the shielded model equals the baseline");
        }
        return Ok((baseline.clone(), baseline));
    }
    let shots: Vec<Vec<&crate::image::Image>> = entries
        .iter()
        .map(|e| ds.images(&ds.indices_for(Split::Train, &[e.category])))
        .collect();
    let groups = entries
        .iter()
        .zip(&shots)
        .map(|(e, s)| {
            let prompt = prompts
                .iter()
                .find(|p| p.category_id == e.category)
                .ok_or_else(|| Error::input(format!("category {} has no prompt", e.category)))?;
            Ok(e.group(prompt, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let task = SubsidiaryTask {
        lambda: config.sas.lambda,
        groups,
    };
    let shielded = fit_main(model, &data, &prompts, &cfg, Some(&task))?.model;
    Ok((baseline, shielded))
}

/// Loads every report under a run's `eval/` directory, sorted by name.
pub fn load_run_reports(dir: &Path) -> Result<Vec<(String, EvalReport)>> {
    let eval = RunLayout::new(dir).eval_dir();
    require(&eval, "eval")?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(&eval)
        .map_err(|e| Error::io(&eval, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_stem().is_some_and(|s| s != "zero_shot"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().expect("json file").to_string_lossy().into_owned();
            Ok((stem, EvalReport::load(&p)?))
        })
        .collect()
}

/// Comparison tables. One run: its reports side by side. Several runs: one
/// table per report name shared by all runs, one column per run.
pub fn render_report(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::input("report needs at least one run directory"));
    }
    let runs = dirs.iter().map(|d| load_run_reports(d)).collect::<Result<Vec<_>>>()?;
    if runs.len() == 1 {
        return Ok(render_table(&runs[0]));
    }
    let mut out = String::new();
    for (name, _) in &runs[0] {
        let cols: Option<Vec<(String, EvalReport)>> = runs
            .iter()
            .zip(dirs)
            .map(|(r, d)| {
                r.iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, rep)| (d.display().to_string(), rep.clone()))
            })
            .collect();
        if let Some(cols) = cols {
            out.push_str(&format!("== {name}\n"));
            out.push_str(&render_table(&cols));
            out.push('\n');
        }
    }
    if out.is_empty() {
        return Err(Error::input("the runs share no report names"));
    }
    Ok(out)
}
