//! On-disk dataset layout.
//!
//! ```text
//! <root>/pairs.jsonl          {"source": "<stem>", "target": "<stem>", "id": n} per line
//! <root>/images/<stem>.png    8-bit RGB
//! <root>/poses/<stem>.json    {"joints": [[x, y, v], ...x18]}
//! <root>/parses/<stem>.png    8-bit grayscale, pixel value = label
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageTensor, Keypoints, Sample, SemanticLabelMap, TrainingPair};
use crate::error::{bail_invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub source: String,
    pub target: String,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePaths {
    pub image: PathBuf,
    pub pose: PathBuf,
    pub parse: PathBuf,
}

pub fn sample_paths(root: &Path, stem: &str) -> SamplePaths {
    SamplePaths {
        image: root.join("images").join(format!("{stem}.png")),
        pose: root.join("poses").join(format!("{stem}.json")),
        parse: root.join("parses").join(format!("{stem}.png")),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_sample(root: &Path, stem: &str, sample: &Sample) -> Result<()> {
    let paths = sample_paths(root, stem);
    sample.image.to_rgb8().save(&paths.image)?;
    sample.labels.to_gray8().save(&paths.parse)?;
    fs::write(&paths.pose, sample.keypoints.to_json()?).map_err(|e| Error::io(&paths.pose, e))?;
    Ok(())
}

/// Writes `pairs` under `root`, returning the index entries in order.
pub fn write_dataset(root: &Path, pairs: &[TrainingPair]) -> Result<Vec<DatasetEntry>> {
    for sub in ["images", "poses", "parses"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(pairs.len());
    let mut index = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let entry = DatasetEntry {
            source: format!("{i:06}_s"),
            target: format!("{i:06}_t"),
            id: pair.identity_id,
        };
        write_sample(root, &entry.source, &pair.source)?;
        write_sample(root, &entry.target, &pair.target)?;
        index.push_str(&serde_json::to_string(&entry)?);
        index.push('\n');
        entries.push(entry);
    }
    let path = root.join("pairs.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(index.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

fn read_sample(paths: &SamplePaths) -> Result<Sample> {
    let image = ImageTensor::from_rgb8(&image::open(&paths.image)?.to_rgb8())?;
    let labels = SemanticLabelMap::from_gray8(&image::open(&paths.parse)?.to_luma8())?;
    let keypoints = Keypoints::from_json(&read_to_string(&paths.pose)?)?;
    if labels.height() != image.height() || labels.width() != image.width() {
        bail_invalid!("parse {} does not match image size", paths.parse.display());
    }
    keypoints.validate(image.height(), image.width())?;
    Ok(Sample { image, keypoints, labels })
}

/// Loads the sample whose image lives at `<root>/images/<stem>.png`.
pub fn load_sample(image_path: &Path) -> Result<Sample> {
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad image path {}", image_path.display())))?;
    let root = image_path
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| Error::invalid(format!("{} is not inside a dataset layout", image_path.display())))?;
    read_sample(&sample_paths(root, stem))
}

pub fn load_dataset(root: &Path) -> Result<Vec<TrainingPair>> {
    let index = read_to_string(&root.join("pairs.jsonl"))?;
    let mut pairs = Vec::new();
    for (line_no, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: DatasetEntry = serde_json::from_str(line)
            .map_err(|e| Error::invalid(format!("pairs.jsonl line {}: {e}", line_no + 1)))?;
        pairs.push(TrainingPair {
            source: read_sample(&sample_paths(root, &entry.source))?,
            target: read_sample(&sample_paths(root, &entry.target))?,
            identity_id: entry.id,
        });
    }
    if pairs.is_empty() {
        bail_invalid!("dataset at {} has no pairs", root.display());
    }
    Ok(pairs)
}
