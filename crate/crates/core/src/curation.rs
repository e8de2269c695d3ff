//! Difficulty scoring for benchmark curation.
//!
//! Each instance is transcribed by several models. Per model, textual overlap
//! (m-ROUGE, BLEU) and inverted normalized edit distance are blended into a
//! composite score, a judge's visual similarity score is added, and the
//! per-model finals are combined with capacity weights. Instances are then
//! ranked and the first `k` kept.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    /// m-ROUGE in [0, 1].
    pub rouge_m: f64,
    /// BLEU-4 in [0, 1].
    pub bleu: f64,
    /// Raw character edit distance.
    pub edit_raw: f64,
    /// Judge similarity in [0, 10].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub instance_id: String,
    pub models: BTreeMap<String, ModelScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub judge_coeff: f64,
    pub model_weights: BTreeMap<String, f64>,
}

impl Default for CurationWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.2,
            judge_coeff: 0.5,
            model_weights: [
                ("qwen2.5-vl-7b", 0.30),
                ("qwen2.5-vl-32b", 0.40),
                ("llama-3.2-11b-vision", 0.30),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        }
    }
}

const WEIGHT_TOLERANCE: f64 = 1e-9;

impl CurationWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.judge_coeff];
        if all.iter().chain(self.model_weights.values()).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("curation weights must be finite and non-negative".into()));
        }
        let abc = self.alpha + self.beta + self.gamma;
        if (abc - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::Config(format!("alpha + beta + gamma must be 1, got {abc}")));
        }
        if self.model_weights.is_empty() {
            return Err(Error::Config("model_weights is empty".into()));
        }
        let w: f64 = self.model_weights.values().sum();
        if (w - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::Config(format!("model weights must sum to 1, got {w}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Lowest score first: least similar, hardest instances.
    #[default]
    Ascending,
    Descending,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asc" | "ascending" => Ok(Direction::Ascending),
            "desc" | "descending" => Ok(Direction::Descending),
            other => Err(Error::Config(format!("unknown direction {other:?} (asc or desc)"))),
        }
    }
}

/// Normalized edit distances keyed like the records: `[record][model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedEdits {
    pub values: Vec<BTreeMap<String, f64>>,
    /// Set when every distance was equal and all were mapped to 0.
    pub degenerate: bool,
}

/// Min-max scales every raw edit distance into [0, 1] using the minimum and
/// maximum over all instances and models.
pub fn normalize_edit(records: &[CurationRecord]) -> NormalizedEdits {
    let all = records.iter().flat_map(|r| r.models.values().map(|m| m.edit_raw));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let degenerate = !(hi > lo);
    if degenerate && !records.is_empty() {
        log::warn!("all edit distances are equal; normalized edit distance set to 0");
    }
    let values = records
        .iter()
        .map(|r| {
            r.models
                .iter()
                .map(|(name, m)| {
                    let v = if degenerate { 0.0 } else { (m.edit_raw - lo) / (hi - lo) };
                    (name.clone(), v)
                })
                .collect()
        })
        .collect();
    NormalizedEdits { values, degenerate }
}

/// `alpha·R + beta·B + gamma·(1 − D̃)`.
pub fn composite_score(rouge_m: f64, bleu: f64, edit_norm: f64, w: &CurationWeights) -> f64 {
    w.alpha * rouge_m + w.beta * bleu + w.gamma * (1.0 - edit_norm)
}

/// Composite plus the judge term `judge_coeff · G / 10`.
pub fn model_final(composite: f64, judge: f64, w: &CurationWeights) -> f64 {
    composite + w.judge_coeff * (judge / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub instance_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinalScores {
    pub scores: BTreeMap<String, f64>,
    pub excluded: Vec<Exclusion>,
}

/// Capacity-weighted sum of per-model finals for every instance. Instances
/// missing a weighted model or a judge score are excluded, not imputed.
pub fn final_scores(records: &[CurationRecord], weights: &CurationWeights) -> Result<FinalScores> {
    weights.validate()?;
    let edits = normalize_edit(records);
    let mut out = FinalScores::default();
    for (record, edits) in records.iter().zip(&edits.values) {
        let mut total = 0.0;
        let mut problem = None;
        for (model, &wj) in &weights.model_weights {
            let Some(m) = record.models.get(model) else {
                problem = Some(format!("no scores for model {model}"));
                break;
            };
            let Some(judge) = m.judge else {
                problem = Some(format!("no judge score for model {model}"));
                break;
            };
            if !(0.0..=1.0).contains(&m.rouge_m) || !(0.0..=1.0).contains(&m.bleu) || !(0.0..=10.0).contains(&judge) {
                problem = Some(format!("scores for model {model} out of range"));
                break;
            }
            let s = composite_score(m.rouge_m, m.bleu, edits[model], weights);
            total += wj * model_final(s, judge, weights);
        }
        match problem {
            Some(reason) => {
                log::warn!("{}: excluded from curation: {reason}", record.instance_id);
                out.excluded.push(Exclusion {
                    instance_id: record.instance_id.clone(),
                    reason,
                });
            }
            None => {
                if out.scores.insert(record.instance_id.clone(), total).is_some() {
                    return Err(Error::Config(format!("duplicate instance id {:?}", record.instance_id)));
                }
            }
        }
    }
    Ok(out)
}

/// Orders ids by score in `direction` (ties by id) and returns the first `k`.
pub fn select_subset(scores: &BTreeMap<String, f64>, k: usize, direction: Direction) -> Result<Vec<String>> {
    if k > scores.len() {
        return Err(Error::Precondition(format!("asked for {k} ids but only {} are scored", scores.len())));
    }
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(id, s)| (id, *s)).collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        let by_score = match direction {
            Direction::Ascending => a.total_cmp(b),
            Direction::Descending => b.total_cmp(a),
        };
        by_score.then_with(|| ia.cmp(ib))
    });
    Ok(ranked.into_iter().take(k).map(|(id, _)| id.clone()).collect())
}

/// Record of how a subset was chosen, written next to the id list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub weights: CurationWeights,
    pub direction: Direction,
    pub k: usize,
    pub scored: usize,
    pub excluded: Vec<Exclusion>,
    pub degenerate_edit_normalization: bool,
    pub note: String,
}

pub const DIRECTION_NOTE: &str = "High final scores mean the models' transcriptions were close to the \
reference, i.e. easy instances. Ascending order keeps the hardest instances; descending order keeps \
the easiest. The ranking order used for the original benchmark is ambiguous, so both are supported.";

pub fn read_records(path: &Path) -> Result<Vec<CurationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::DatasetLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[CurationRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
