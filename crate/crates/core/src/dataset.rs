//! JSON-Lines datasets: one `{id, image, latex?}` object per line.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latex::LatexDoc;
use crate::raster::RasterImage;

#[derive(Clone, Debug)]
pub struct Instance {
    pub id: String,
    pub image: RasterImage,
    pub ground_truth: Option<LatexDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latex: Option<String>,
}

/// A record whose image could not be loaded. Such records are skipped, not fatal.
#[derive(Debug)]
pub struct RecordError {
    pub line: usize,
    pub id: String,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub instances: Vec<Instance>,
    pub skipped: Vec<RecordError>,
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut out = LoadedDataset::default();

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| Error::DatasetLine {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: DatasetRecord =
            serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
        if !seen.insert(record.id.clone()) {
            return Err(line_err(format!("duplicate id {:?}", record.id)));
        }
        let image_path = resolve(&base, &record.image);
        match RasterImage::load(&image_path) {
            Ok(image) => out.instances.push(Instance {
                id: record.id,
                image,
                ground_truth: record.latex.map(LatexDoc::new),
            }),
            Err(error) => out.skipped.push(RecordError {
                line: line_no,
                id: record.id,
                error,
            }),
        }
    }
    Ok(out)
}

fn resolve(base: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes a dataset file plus one PNG per instance under `dir`.
pub fn write_dataset(dir: &Path, instances: &[Instance]) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut lines = String::new();
    for inst in instances {
        let rel = format!("images/{}.png", inst.id);
        inst.image.save_png(&dir.join(&rel))?;
        let record = DatasetRecord {
            id: inst.id.clone(),
            image: rel,
            latex: inst.ground_truth.as_ref().map(|d| d.source().to_string()),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    let path = dir.join("dataset.jsonl");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
