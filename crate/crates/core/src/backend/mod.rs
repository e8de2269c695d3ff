//! Vision-language model access.
//!
//! A [`Backend`] opens one [`Transport`] session per instance. [`VlmClient`]
//! wraps a session with the role-specific calls the refinement loop makes
//! (generate, compare, verify, refine, attention, judge), prompt filling,
//! response parsing, and a call transcript.

mod http;
mod scripted;

use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use http::{encode_attention_data, HttpBackend, HttpSettings};
pub use scripted::{eligible_positions, ScriptedBackend, ScriptedParams};

use crate::attnloc::AttentionStack;
use crate::config::{PromptTemplates, TemplateContext, TemplateKind, COT_SUFFIX};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::latex::{extract_final_answer, tokenize_latex, LatexDoc};
use crate::raster::RasterImage;

/// Exact line a model emits when it finds no differences.
pub const NO_DIFFERENCES: &str = "NO DIFFERENCES";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generation,
    Comparison,
    Verification,
    Refinement,
    Judge,
    Attention,
}

#[derive(Clone, Debug)]
pub struct BackendRequest {
    pub role: Role,
    pub prompt: String,
    pub images: Vec<Arc<RasterImage>>,
    pub text_context: Option<String>,
    pub want_attention: bool,
    pub layer_range: Option<[usize; 2]>,
}

impl BackendRequest {
    fn new(role: Role, prompt: String, images: Vec<Arc<RasterImage>>) -> Self {
        Self {
            role,
            prompt,
            images,
            text_context: None,
            want_attention: false,
            layer_range: None,
        }
    }

    /// Checks the image count and context each role requires.
    pub fn check_arity(&self) -> Result<()> {
        let (images, needs_context) = match self.role {
            Role::Generation => (1, false),
            Role::Comparison => (2, false),
            Role::Verification => (2, true),
            Role::Refinement => (2, true),
            Role::Judge => (2, false),
            Role::Attention => (1, true),
        };
        if self.images.len() != images {
            return Err(Error::Protocol(format!(
                "{:?} request needs {images} image(s), got {}",
                self.role,
                self.images.len()
            )));
        }
        if needs_context && self.text_context.is_none() {
            return Err(Error::Protocol(format!("{:?} request needs text context", self.role)));
        }
        Ok(())
    }
}

/// Raw attention tensor as it travels over the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPayload {
    /// (tokens, layers, heads, grid rows, grid cols)
    pub dims: [usize; 5],
    pub data: Vec<f32>,
    pub tokens: Vec<String>,
}

impl AttentionPayload {
    pub fn into_stack(self, layer_range: [usize; 2]) -> Result<AttentionStack> {
        let [n, l, h, gh, gw] = self.dims;
        if self.data.len() != n * l * h * gh * gw {
            return Err(Error::Protocol(format!(
                "attention dims {:?} need {} values, got {}",
                self.dims,
                n * l * h * gh * gw,
                self.data.len()
            )));
        }
        let expected_layers = layer_range[1] - layer_range[0] + 1;
        if l != expected_layers {
            return Err(Error::Protocol(format!(
                "requested layers {layer_range:?} ({expected_layers}) but received {l}"
            )));
        }
        if self.tokens.len() != n {
            return Err(Error::Protocol(format!(
                "attention covers {n} tokens but {} token strings were sent",
                self.tokens.len()
            )));
        }
        AttentionStack::new(
            n,
            (layer_range[0]..=layer_range[1]).collect(),
            h,
            gh,
            gw,
            self.data.into_iter().map(f64::from).collect(),
        )
        .map_err(|e| Error::Protocol(e.to_string()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct InferResponse {
    pub text: String,
    pub attention: Option<AttentionPayload>,
    /// Ground-truth fabrication flags per reported difference. Only the
    /// scripted backend knows these; real models leave it empty.
    pub fabricated: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub attention: bool,
    #[serde(default)]
    pub layers: Option<usize>,
}

pub trait Transport: Send {
    fn infer(&mut self, request: &BackendRequest) -> Result<InferResponse>;
    fn capabilities(&mut self) -> Result<Capabilities>;
}

pub trait Backend: Send + Sync {
    /// Opens a session for one instance. Rounds within a session are sequential.
    fn open(&self, instance: &Instance) -> Result<Box<dyn Transport>>;
    fn describe(&self) -> String;
}

/// Builds a backend from an endpoint URI: `mock:?k=v&...` selects the scripted
/// backend, anything else is treated as an HTTP base URL.
pub fn backend_from_endpoint(endpoint: &str, http: HttpSettings, seed_override: Option<u64>) -> Result<Arc<dyn Backend>> {
    if let Some(query) = endpoint.strip_prefix("mock:") {
        let mut params = ScriptedParams::parse(query)?;
        if let Some(seed) = seed_override {
            params.seed = seed;
        }
        Ok(Arc::new(ScriptedBackend::new(params)))
    } else {
        Ok(Arc::new(HttpBackend::new(endpoint, http)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffItem {
    pub index: usize,
    pub description: String,
    /// Ground truth for hallucination audits, when the backend knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fabricated: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub items: Vec<DiffItem>,
    pub raw_text: String,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn single(description: String) -> Self {
        Self {
            raw_text: format!("1. {description}"),
            items: vec![DiffItem {
                index: 1,
                description,
                fabricated: None,
            }],
        }
    }

    /// Numbered list as it is shown to the model.
    pub fn to_prompt_text(&self) -> String {
        if self.items.is_empty() {
            return NO_DIFFERENCES.to_string();
        }
        self.items
            .iter()
            .map(|i| format!("{}. {}", i.index, i.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.index).collect()
    }
}

fn numbered_line() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*]\s*)?\(?(\d+)\s*[.):]\s*(.*?)\s*$").unwrap())
}

fn numbered_items(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .filter_map(|line| {
            let caps = numbered_line().captures(line)?;
            let n = caps[1].parse().ok()?;
            Some((n, caps[2].to_string()))
        })
        .collect()
}

fn is_sentinel(text: &str) -> bool {
    text.lines().any(|l| l.trim().trim_end_matches('.').eq_ignore_ascii_case(NO_DIFFERENCES))
}

/// Parses a comparison reply. Numbered lines become items renumbered from 1;
/// the sentinel alone means no differences; anything else becomes one item.
pub fn parse_diff(text: &str, fabricated: Option<&[bool]>) -> DiffReport {
    let numbered = numbered_items(text);
    let items: Vec<DiffItem> = if !numbered.is_empty() {
        numbered
            .into_iter()
            .enumerate()
            .map(|(i, (_, description))| DiffItem {
                index: i + 1,
                description,
                fabricated: fabricated.and_then(|f| f.get(i).copied()),
            })
            .collect()
    } else if is_sentinel(text) {
        Vec::new()
    } else {
        vec![DiffItem {
            index: 1,
            description: text.trim().to_string(),
            fabricated: fabricated.and_then(|f| f.first().copied()),
        }]
    };
    DiffReport {
        items,
        raw_text: text.to_string(),
    }
}

/// Parses a verification reply into the confirmed subset of `reported`.
/// Returns `None` when the reply is neither a numbered list nor the sentinel.
pub fn parse_verification(text: &str, reported: &DiffReport) -> Option<DiffReport> {
    let numbered = numbered_items(text);
    if numbered.is_empty() && !is_sentinel(text) {
        return None;
    }
    let mut items = Vec::new();
    for item in &reported.items {
        if let Some((_, desc)) = numbered.iter().find(|(n, _)| *n == item.index) {
            let mut kept = item.clone();
            if !desc.is_empty() {
                kept.description = desc.clone();
            }
            items.push(kept);
        }
    }
    Some(DiffReport {
        items,
        raw_text: text.to_string(),
    })
}

/// Pulls a 0..=10 score out of a judge reply. Returns the value and whether it was clamped.
pub fn parse_judge_score(text: &str) -> Result<(f64, bool)> {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());
    let m = re.find(text).ok_or_else(|| Error::JudgeParse(text.to_string()))?;
    let v: f64 = m.as_str().parse().map_err(|_| Error::JudgeParse(text.to_string()))?;
    let clamped = v.clamp(0.0, 10.0);
    Ok((clamped, clamped != v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationMode {
    Direct,
    ChainOfThought,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RefineOutcome {
    Updated(LatexDoc),
    /// The model returned the hypothesis unchanged.
    NoProgress,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TranscriptEntry {
    pub role: Role,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_context: Option<String>,
    pub images: usize,
    pub response: String,
}

pub struct VlmClient {
    transport: Box<dyn Transport>,
    prompts: PromptTemplates,
    capabilities: Option<Capabilities>,
    transcript: Vec<TranscriptEntry>,
}

impl VlmClient {
    pub fn new(transport: Box<dyn Transport>, prompts: PromptTemplates) -> Self {
        Self {
            transport,
            prompts,
            capabilities: None,
            transcript: Vec::new(),
        }
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEntry> {
        std::mem::take(&mut self.transcript)
    }

    pub fn capabilities(&mut self) -> Result<Capabilities> {
        if let Some(c) = self.capabilities {
            return Ok(c);
        }
        let c = self.transport.capabilities()?;
        self.capabilities = Some(c);
        Ok(c)
    }

    fn call(&mut self, request: BackendRequest) -> Result<InferResponse> {
        request.check_arity()?;
        let response = self.transport.infer(&request)?;
        self.transcript.push(TranscriptEntry {
            role: request.role,
            prompt: request.prompt,
            text_context: request.text_context,
            images: request.images.len(),
            response: response.text.clone(),
        });
        Ok(response)
    }

    pub fn generate(&mut self, image: &Arc<RasterImage>, mode: GenerationMode) -> Result<LatexDoc> {
        let mut prompt = self.prompts.render(TemplateKind::Generation, &TemplateContext::default());
        if mode == GenerationMode::ChainOfThought {
            prompt.push(' ');
            prompt.push_str(COT_SUFFIX);
        }
        let response = self.call(BackendRequest::new(Role::Generation, prompt, vec![image.clone()]))?;
        let doc = match mode {
            GenerationMode::Direct => LatexDoc::from_model_output(&response.text),
            GenerationMode::ChainOfThought => LatexDoc::new(extract_final_answer(&response.text)),
        };
        if doc.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        Ok(doc)
    }

    pub fn compare(&mut self, source: &Arc<RasterImage>, rendered: &Arc<RasterImage>) -> Result<DiffReport> {
        let prompt = self.prompts.render(TemplateKind::Comparison, &TemplateContext::default());
        let response = self.call(BackendRequest::new(
            Role::Comparison,
            prompt,
            vec![source.clone(), rendered.clone()],
        ))?;
        Ok(parse_diff(&response.text, response.fabricated.as_deref()))
    }

    /// Keeps the reported differences the model confirms on the cropped regions.
    /// An unparseable reply keeps every item.
    pub fn verify(
        &mut self,
        diff: &DiffReport,
        region_source: &Arc<RasterImage>,
        region_rendered: &Arc<RasterImage>,
    ) -> Result<DiffReport> {
        if diff.is_empty() {
            return Err(Error::Precondition("verification needs a non-empty diff".into()));
        }
        let diff_text = diff.to_prompt_text();
        let prompt = self.prompts.render(
            TemplateKind::Verification,
            &TemplateContext {
                diff: Some(&diff_text),
                ..Default::default()
            },
        );
        let mut request = BackendRequest::new(
            Role::Verification,
            prompt,
            vec![region_source.clone(), region_rendered.clone()],
        );
        request.text_context = Some(diff_text);
        let response = self.call(request)?;
        Ok(parse_verification(&response.text, diff).unwrap_or_else(|| {
            log::warn!("unparseable verification reply; keeping all {} item(s)", diff.len());
            DiffReport {
                items: diff.items.clone(),
                raw_text: response.text,
            }
        }))
    }

    pub fn refine(
        &mut self,
        hypothesis: &LatexDoc,
        region_source: &Arc<RasterImage>,
        region_rendered: &Arc<RasterImage>,
        verified: &DiffReport,
    ) -> Result<RefineOutcome> {
        if verified.is_empty() {
            return Err(Error::Precondition("refinement needs at least one confirmed difference".into()));
        }
        let diff_text = verified.to_prompt_text();
        let prompt = self.prompts.render(
            TemplateKind::Refinement,
            &TemplateContext {
                latex: Some(hypothesis.source()),
                diff: Some(&diff_text),
            },
        );
        let mut request = BackendRequest::new(
            Role::Refinement,
            prompt,
            vec![region_source.clone(), region_rendered.clone()],
        );
        request.text_context = Some(hypothesis.source().to_string());
        let response = self.call(request)?;
        let doc = LatexDoc::from_model_output(&response.text);
        if doc.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        if doc.same_tokens(hypothesis) {
            Ok(RefineOutcome::NoProgress)
        } else {
            Ok(RefineOutcome::Updated(doc))
        }
    }

    /// Attention of `token_text` over `image` for the given inclusive layer range.
    pub fn fetch_attention(
        &mut self,
        image: &Arc<RasterImage>,
        token_text: &str,
        layer_range: [usize; 2],
    ) -> Result<AttentionStack> {
        if !self.capabilities()?.attention {
            return Err(Error::AttentionUnavailable);
        }
        let mut request = BackendRequest::new(Role::Attention, String::new(), vec![image.clone()]);
        request.text_context = Some(token_text.to_string());
        request.want_attention = true;
        request.layer_range = Some(layer_range);
        let response = self.call(request)?;
        let payload = response
            .attention
            .ok_or_else(|| Error::Protocol("attention requested but none returned".into()))?;
        payload.into_stack(layer_range)
    }

    /// Asks the judge for a 0..=10 similarity score between a reference and a generated image.
    pub fn judge_similarity(&mut self, reference: &Arc<RasterImage>, generated: &Arc<RasterImage>) -> Result<f64> {
        let prompt = self.prompts.render(TemplateKind::Judge, &TemplateContext::default());
        let response = self.call(BackendRequest::new(
            Role::Judge,
            prompt,
            vec![reference.clone(), generated.clone()],
        ))?;
        let (score, clamped) = parse_judge_score(&response.text)?;
        if clamped {
            log::warn!("judge score {:?} outside 0..=10, clamped to {score}", response.text.trim());
        }
        Ok(score)
    }
}

/// Token strings an attention request covers, for hosts that echo them back.
pub fn attention_tokens(text: &str) -> Vec<String> {
    tokenize_latex(text)
}
