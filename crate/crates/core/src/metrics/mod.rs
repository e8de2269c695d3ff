//! Textual and visual evaluation metrics.

mod text;
mod visual;

pub use text::{bleu4, edit_distance, lcs_len, levenshtein, levenshtein_seq, m_rouge, rouge_l, rouge_n};
pub use visual::{
    cw_ssim, cw_ssim_windows, pixel_match, CanvasPair, GaborBank, BINARIZE_THRESHOLD, CW_MIN_SIZE, CW_STRIDE,
    CW_WINDOW,
};

use serde::{Deserialize, Serialize};

use crate::latex::LatexDoc;
use crate::raster::RasterImage;

/// Column names in report order.
pub const COLUMNS: [&str; 8] = [
    "rouge1",
    "rouge2",
    "rougeL",
    "m_rouge",
    "bleu4",
    "edit_distance",
    "match",
    "cw_ssim",
];

/// All scores on a 0..=100 scale. `edit_distance` is lower-is-better;
/// `edit_raw` carries the unnormalized character count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub m_rouge: f64,
    pub bleu4: f64,
    pub edit_distance: f64,
    pub edit_raw: usize,
    #[serde(rename = "match")]
    pub pixel_match: f64,
    pub cw_ssim: f64,
}

impl MetricSnapshot {
    /// Scores a hypothesis against a reference. `rendered` is `None` when the
    /// hypothesis failed to compile; both visual scores are 0 in that case.
    pub fn compute(
        hypothesis: &LatexDoc,
        reference: &LatexDoc,
        rendered: Option<&RasterImage>,
        reference_image: &RasterImage,
    ) -> Self {
        let (cand, refr) = (hypothesis.tokens(), reference.tokens());
        let rouge1 = rouge_n(cand, refr, 1);
        let rouge2 = rouge_n(cand, refr, 2);
        let rouge_l = rouge_l(cand, refr);
        let (hs, rs) = (hypothesis.source().trim(), reference.source().trim());
        let (pixel_match, cw_ssim) = match rendered {
            Some(img) => (pixel_match(img, reference_image), cw_ssim(img, reference_image)),
            None => (0.0, 0.0),
        };
        Self {
            rouge1,
            rouge2,
            rouge_l,
            m_rouge: (rouge1 + rouge2 + rouge_l) / 3.0,
            bleu4: bleu4(cand, refr),
            edit_distance: edit_distance(hs, rs),
            edit_raw: levenshtein(hs, rs),
            pixel_match,
            cw_ssim,
        }
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.m_rouge,
            self.bleu4,
            self.edit_distance,
            self.pixel_match,
            self.cw_ssim,
        ]
    }

    /// Column-wise mean; `None` for an empty slice.
    pub fn mean(snapshots: &[MetricSnapshot]) -> Option<MetricSnapshot> {
        if snapshots.is_empty() {
            return None;
        }
        let n = snapshots.len() as f64;
        let avg = |f: fn(&MetricSnapshot) -> f64| snapshots.iter().map(f).sum::<f64>() / n;
        Some(MetricSnapshot {
            rouge1: avg(|s| s.rouge1),
            rouge2: avg(|s| s.rouge2),
            rouge_l: avg(|s| s.rouge_l),
            m_rouge: avg(|s| s.m_rouge),
            bleu4: avg(|s| s.bleu4),
            edit_distance: avg(|s| s.edit_distance),
            edit_raw: (snapshots.iter().map(|s| s.edit_raw).sum::<usize>() as f64 / n).round() as usize,
            pixel_match: avg(|s| s.pixel_match),
            cw_ssim: avg(|s| s.cw_ssim),
        })
    }
}
