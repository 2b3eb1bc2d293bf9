//! Dataset export: PNG images, `labels.csv` and `ground_truth.json`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_group, Category, DatasetSpec, GroupedDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Serialize, Deserialize)]
struct GroundTruth {
    generator: String,
    seed: u64,
    rho: f64,
    spec: DatasetSpec,
    categories: Vec<Category>,
    base: Option<Vec<usize>>,
    new: Option<Vec<usize>>,
}

pub fn export_dataset(dataset: &GroupedDataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut csv = String::from("id,label,group,split\n");
    for s in &dataset.samples {
        s.image.save_png(&images.join(format!("{}.png", s.id)))?;
        writeln!(csv, "{},{},{},{}", s.id, s.label, s.group, s.split.name()).expect("string write");
    }
    let labels = dir.join("labels.csv");
    std::fs::write(&labels, csv).map_err(|e| Error::io(&labels, e))?;
    let gt = GroundTruth {
        generator: dataset.spec.generator.name().to_string(),
        seed: dataset.spec.seed,
        rho: dataset.spec.rho,
        spec: dataset.spec.clone(),
        categories: dataset.categories.clone(),
        base: dataset.base.clone(),
        new: dataset.new.clone(),
    };
    let path = dir.join("ground_truth.json");
    let text = serde_json::to_string_pretty(&gt).map_err(|e| Error::input(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads an export back. Object masks are not stored, so they come back as `None`.
pub fn load_dataset(dir: &Path) -> Result<GroupedDataset> {
    let gt_path = dir.join("ground_truth.json");
    if !gt_path.exists() {
        return Err(Error::MissingArtifact {
            path: gt_path,
            hint: "run the datagen stage first".into(),
        });
    }
    let text = std::fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gt: GroundTruth = serde_json::from_str(&text).map_err(|e| Error::format(&gt_path, e.to_string()))?;
    let labels_path = dir.join("labels.csv");
    let csv = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let planted_count = gt.spec.generator.planted_count();
    let mut samples = Vec::new();
    for (n, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::format(&labels_path, format!("line {}: {m}", n + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let label: usize = cols[1].parse().map_err(|_| bad("bad label"))?;
        let group: usize = cols[2].parse().map_err(|_| bad("bad group"))?;
        let split = Split::parse(cols[3]).ok_or_else(|| bad("bad split"))?;
        let (g_label, planted) = decode_group(group, planted_count);
        if g_label != label || label >= gt.categories.len() {
            return Err(bad("group does not match label"));
        }
        let image = Image::load_png(&dir.join("images").join(format!("{}.png", cols[0])))?;
        samples.push(Sample {
            id: cols[0].to_string(),
            image,
            label,
            group,
            split,
            planted,
            object_mask: None,
        });
    }
    Ok(GroupedDataset {
        spec: gt.spec,
        categories: gt.categories,
        samples,
        base: gt.base,
        new: gt.new,
    })
}
