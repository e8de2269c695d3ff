//! Per-round and per-run records, and their on-disk artifact layout.
//!
//! One directory per instance:
//!
//! ```text
//! <id>/
//!   result.json          full RunResult
//!   round_<k>.json       IterationRecord of round k
//!   round_<k>.png        render of round k (absent on compile failure)
//!   round_<k>_region_a.png, round_<k>_region_b.png   crops used in round k
//!   region_a.png, region_b.png                      crops of the last localized round
//!   overlay_<k>.png      attention overlay (when enabled)
//!   input.png, final.tex, transcript.jsonl
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attnloc::BoundingBox;
use crate::backend::{DiffReport, TranscriptEntry};
use crate::error::{Error, Result};
use crate::latex::LatexDoc;
use crate::metrics::MetricSnapshot;
use crate::raster::{PixelRect, RasterImage};
use crate::render::RenderResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    NoDifferences,
    TMax,
    NoProgress,
    CompileDeadEnd,
    /// Baselines make exactly one pass.
    SinglePass,
    /// The backend failed; the records up to the failure are kept.
    Aborted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::NoDifferences => "no_differences",
            Termination::TMax => "t_max",
            Termination::NoProgress => "no_progress",
            Termination::CompileDeadEnd => "compile_dead_end",
            Termination::SinglePass => "single_pass",
            Termination::Aborted => "aborted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub ok: bool,
    pub source_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_excerpt: Option<String>,
}

impl RenderRecord {
    pub fn from_result(r: &RenderResult) -> Self {
        Self {
            ok: r.image().is_some(),
            source_hash: r.source_hash.clone(),
            width: r.image().map(|i| i.width()),
            height: r.image().map(|i| i.height()),
            log_excerpt: r.failure_log().map(str::to_string),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Localization {
    /// Crops came from the attention map.
    Attention,
    /// Whole images were used because attention was unavailable or empty.
    WholeImage,
    /// The round did not reach localization.
    NotRun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    Performed,
    /// Ablated runs and compile-failure rounds skip verification.
    Skipped,
    NotRun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    Updated,
    NoProgress,
    NotRun,
}

/// Images produced during a round. Written as artifacts, not serialized into the record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundImages {
    pub render: Option<Arc<RasterImage>>,
    pub regions: Option<(Arc<RasterImage>, Arc<RasterImage>)>,
    pub overlay: Option<image::RgbImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub round: usize,
    pub hypothesis: LatexDoc,
    pub render: RenderRecord,
    pub diff: DiffReport,
    pub verified_diff: DiffReport,
    pub localization: Localization,
    pub verification: Verification,
    pub refinement: Refinement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_rects: Option<(PixelRect, PixelRect)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSnapshot>,
    #[serde(skip)]
    pub images: RoundImages,
}

impl IterationRecord {
    pub fn new(round: usize, hypothesis: LatexDoc, render: &RenderResult) -> Self {
        Self {
            round,
            hypothesis,
            render: RenderRecord::from_result(render),
            diff: DiffReport::default(),
            verified_diff: DiffReport::default(),
            localization: Localization::NotRun,
            verification: Verification::NotRun,
            refinement: Refinement::NotRun,
            region_box: None,
            region_rects: None,
            metrics: None,
            images: RoundImages {
                render: render.image().cloned(),
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub hypothesis: LatexDoc,
    pub compiled: bool,
    /// Similarity to the input image used for selection.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub instance_id: String,
    pub strategy: String,
    #[serde(rename = "final")]
    pub final_doc: LatexDoc,
    pub rounds: Vec<IterationRecord>,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEntry>,
}

impl RunResult {
    /// Metrics of the final hypothesis, when ground truth was available.
    pub fn final_metrics(&self) -> Option<&MetricSnapshot> {
        self.rounds.last().and_then(|r| r.metrics.as_ref())
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// One line of the run summary: the digest of a [`RunResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub instance_id: String,
    pub strategy: String,
    pub termination: Termination,
    pub rounds: usize,
    #[serde(rename = "final")]
    pub final_source: String,
    /// Token-level edit distance from the final hypothesis to the ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunSummary {
    pub fn from_result(result: &RunResult, ground_truth: Option<&LatexDoc>) -> Self {
        Self {
            instance_id: result.instance_id.clone(),
            strategy: result.strategy.clone(),
            termination: result.termination,
            rounds: result.rounds.len(),
            final_source: result.final_doc.source().to_string(),
            residual_tokens: ground_truth
                .map(|gt| crate::metrics::levenshtein_seq(result.final_doc.tokens(), gt.tokens())),
            metrics: result.final_metrics().copied(),
            error: result.error.clone(),
        }
    }
}

/// Directory names are instance ids with path-hostile characters replaced.
pub fn instance_dir_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn save_rgb(path: &Path, img: &image::RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(Error::from)
}

/// Writes every artifact of one run into `root/<instance>/`, returning that directory.
pub fn write_run_artifacts(root: &Path, result: &RunResult, input: &RasterImage) -> Result<PathBuf> {
    let dir = root.join(instance_dir_name(&result.instance_id));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    input.save_png(&dir.join("input.png"))?;
    write_json(&dir.join("result.json"), result)?;
    let mut last_regions = None;
    for rec in &result.rounds {
        let k = rec.round;
        write_json(&dir.join(format!("round_{k}.json")), rec)?;
        if let Some(img) = &rec.images.render {
            img.save_png(&dir.join(format!("round_{k}.png")))?;
        }
        if let Some((a, b)) = &rec.images.regions {
            a.save_png(&dir.join(format!("round_{k}_region_a.png")))?;
            b.save_png(&dir.join(format!("round_{k}_region_b.png")))?;
            last_regions = Some((a, b));
        }
        if let Some(ov) = &rec.images.overlay {
            save_rgb(&dir.join(format!("overlay_{k}.png")), ov)?;
        }
    }
    if let Some((a, b)) = last_regions {
        a.save_png(&dir.join("region_a.png"))?;
        b.save_png(&dir.join("region_b.png"))?;
    }
    let tex = dir.join("final.tex");
    fs::write(&tex, format!("{}\n", result.final_doc.source())).map_err(|e| Error::io(&tex, e))?;
    let transcript = dir.join("transcript.jsonl");
    let mut f = fs::File::create(&transcript).map_err(|e| Error::io(&transcript, e))?;
    for entry in &result.transcript {
        let line = serde_json::to_string(entry)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&transcript, e))?;
    }
    Ok(dir)
}

/// Reads `result.json` back. Images and transcript are not restored.
pub fn load_run(dir: &Path) -> Result<RunResult> {
    let path = dir.join("result.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_names_are_safe() {
        assert_eq!(instance_dir_name("a/b c:1"), "a_b_c_1");
        assert_eq!(instance_dir_name("eq-001.x"), "eq-001.x");
    }

    #[test]
    fn termination_serializes_snake_case() {
        for t in [
            Termination::NoDifferences,
            Termination::TMax,
            Termination::NoProgress,
            Termination::CompileDeadEnd,
            Termination::SinglePass,
            Termination::Aborted,
        ] {
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.as_str()));
        }
    }
}
