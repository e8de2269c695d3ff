//! Run parameters and prompt templates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix appended to the generation prompt for chain-of-thought prompting.
pub const COT_SUFFIX: &str =
    "Let's think step by step. End with the final answer in a ```latex fenced block.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    A2r2,
    Direct,
    Cot,
    BestOfN,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::A2r2 => "a2r2",
            Strategy::Direct => "direct",
            Strategy::Cot => "cot",
            Strategy::BestOfN => "best_of_n",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2r2" => Ok(Strategy::A2r2),
            "direct" => Ok(Strategy::Direct),
            "cot" => Ok(Strategy::Cot),
            "best_of_n" => Ok(Strategy::BestOfN),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// How the attention layer range is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    /// Use `layer_range` as given.
    #[default]
    Fixed,
    /// The ceil(L/8) layers centred on layer floor(L/2) of an L-layer host.
    CentralEighth,
    /// Every layer the host exposes.
    All,
}

impl LayerPolicy {
    /// Default policy and range for a model family name, if one is known.
    pub fn for_model_family(family: &str) -> Option<(LayerPolicy, [usize; 2])> {
        let family = family.to_ascii_lowercase();
        if family.contains("llama") {
            // cross-attention layer 13
            Some((LayerPolicy::Fixed, [13, 13]))
        } else if family.contains("qwen") {
            Some((LayerPolicy::CentralEighth, [0, 0]))
        } else {
            None
        }
    }
}

/// Resolves an inclusive layer range against a host with `total_layers` layers.
pub fn resolve_layer_range(policy: LayerPolicy, fixed: [usize; 2], total_layers: Option<usize>) -> Result<[usize; 2]> {
    match (policy, total_layers) {
        (LayerPolicy::Fixed, _) => Ok(fixed),
        (LayerPolicy::CentralEighth, Some(total)) if total > 0 => {
            let count = total.div_ceil(8);
            let start = (total / 2).saturating_sub(count / 2);
            let end = (start + count - 1).min(total - 1);
            Ok([start, end])
        }
        (LayerPolicy::All, Some(total)) if total > 0 => Ok([0, total - 1]),
        (policy, _) => Err(Error::Config(format!(
            "layer policy {policy:?} needs the host's layer count"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub t_max: usize,
    pub percentile: f64,
    pub dilation_kernel: usize,
    pub layer_range: [usize; 2],
    pub layer_policy: LayerPolicy,
    pub ablate_al_fv: bool,
    pub strategy: Strategy,
    pub n_samples: usize,
    pub parallel_workers: usize,
    /// Write attention overlay PNGs next to the round artifacts.
    pub overlays: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_max: 2,
            percentile: 75.0,
            dilation_kernel: 3,
            layer_range: [13, 13],
            layer_policy: LayerPolicy::Fixed,
            ablate_al_fv: false,
            strategy: Strategy::A2r2,
            n_samples: 8,
            parallel_workers: 4,
            overlays: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t_max < 1 {
            return fail("t_max must be at least 1".into());
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return fail(format!("percentile must be in (0, 100), got {}", self.percentile));
        }
        if self.dilation_kernel == 0 || self.dilation_kernel % 2 == 0 {
            return fail(format!("dilation_kernel must be odd and positive, got {}", self.dilation_kernel));
        }
        if self.layer_range[0] > self.layer_range[1] {
            return fail(format!("layer_range start exceeds end: {:?}", self.layer_range));
        }
        if self.parallel_workers == 0 {
            return fail("parallel_workers must be positive".into());
        }
        if self.strategy == Strategy::BestOfN && self.n_samples == 0 {
            return fail("best_of_n needs n_samples >= 1".into());
        }
        Ok(())
    }
}

/// Placeholder names a template may reference.
pub const PLACEHOLDERS: [&str; 5] = ["image", "image_a", "image_b", "latex", "diff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    Generation,
    Comparison,
    Verification,
    Refinement,
    Judge,
}

impl TemplateKind {
    /// (allowed, required) placeholders for each call site.
    fn placeholders(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            TemplateKind::Generation => (&["image"], &[]),
            TemplateKind::Comparison => (&["image_a", "image_b"], &[]),
            TemplateKind::Verification => (&["image_a", "image_b", "diff"], &["diff"]),
            TemplateKind::Refinement => (&["image_a", "image_b", "latex", "diff"], &["latex", "diff"]),
            TemplateKind::Judge => (&["image_a", "image_b"], &[]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub generation: String,
    pub comparison: String,
    pub verification: String,
    pub refinement: String,
    pub judge: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            generation: "{image}\nTranscribe the mathematical content of this image into LaTeX. \
Reply with the LaTeX source only, without surrounding $ delimiters."
                .into(),
            comparison: "{image_a} is the original formula image and {image_b} is a rendering of \
a LaTeX transcription of it. List every visual difference between them as a numbered list, one \
difference per line, for example:\n1. <difference>\n2. <difference>\nIf the images show the same \
content, reply with exactly this line:\nNO DIFFERENCES"
                .into(),
            verification: "{image_a} is a region of the original formula image and {image_b} is \
the same region of the rendered transcription. The following differences were reported:\n{diff}\n\
Check each reported difference against the two regions. Reply with a numbered list containing \
only the differences that are really visible, keeping their original numbers. If none of them is \
real, reply with exactly this line:\nNO DIFFERENCES"
                .into(),
            refinement: "{image_a} is a region of the original formula image and {image_b} is the \
same region of the rendering of the current transcription:\n{latex}\nThese differences were \
confirmed:\n{diff}\nCorrect only the parts of the transcription responsible for these \
differences and keep everything else unchanged. Reply with the full corrected LaTeX source only."
                .into(),
            judge: "{image_a} is a reference formula image and {image_b} is a rendering of a \
generated transcription. Rate how faithfully the second image reproduces the first on a scale \
from 0 to 10. Reply with the number only."
                .into(),
        }
    }
}

/// Values substituted into a template at its call site.
#[derive(Clone, Debug, Default)]
pub struct TemplateContext<'a> {
    pub latex: Option<&'a str>,
    pub diff: Option<&'a str>,
}

fn placeholder_at(s: &str) -> Option<&'static str> {
    PLACEHOLDERS.iter().copied().find(|name| {
        s.len() >= name.len() + 2
            && s.as_bytes()[0] == b'{'
            && s[1..].starts_with(name)
            && s.as_bytes()[name.len() + 1] == b'}'
    })
}

fn placeholders_in(template: &str) -> Vec<&'static str> {
    template
        .match_indices('{')
        .filter_map(|(i, _)| placeholder_at(&template[i..]))
        .collect()
}

impl PromptTemplates {
    pub fn get(&self, kind: TemplateKind) -> &str {
        match kind {
            TemplateKind::Generation => &self.generation,
            TemplateKind::Comparison => &self.comparison,
            TemplateKind::Verification => &self.verification,
            TemplateKind::Refinement => &self.refinement,
            TemplateKind::Judge => &self.judge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use TemplateKind::*;
        for kind in [Generation, Comparison, Verification, Refinement, Judge] {
            let (allowed, required) = kind.placeholders();
            let found = placeholders_in(self.get(kind));
            if let Some(bad) = found.iter().find(|p| !allowed.contains(p)) {
                return Err(Error::Config(format!(
                    "{kind:?} prompt uses {{{bad}}}, which is not available there"
                )));
            }
            if let Some(missing) = required.iter().find(|r| !found.contains(r)) {
                return Err(Error::Config(format!("{kind:?} prompt must contain {{{missing}}}")));
            }
        }
        Ok(())
    }

    /// Fills a template. Image placeholders become `<image>` markers; the
    /// images themselves travel alongside the prompt in request order.
    pub fn render(&self, kind: TemplateKind, ctx: &TemplateContext<'_>) -> String {
        let template = self.get(kind);
        let mut out = String::with_capacity(template.len() + 64);
        let mut rest = template;
        while let Some(i) = rest.find('{') {
            out.push_str(&rest[..i]);
            match placeholder_at(&rest[i..]) {
                Some(name) => {
                    let value = match name {
                        "image" | "image_a" | "image_b" => "<image>",
                        "latex" => ctx.latex.unwrap_or(""),
                        "diff" => ctx.diff.unwrap_or(""),
                        _ => unreachable!(),
                    };
                    out.push_str(value);
                    rest = &rest[i + name.len() + 2..];
                }
                None => {
                    out.push('{');
                    rest = &rest[i + 1..];
                }
            }
        }
        out.push_str(rest);
        out
    }
}
