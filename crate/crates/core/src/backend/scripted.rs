//! Deterministic stand-in for a vision-language model.
//!
//! A session holds the instance's ground-truth tokens and a hypothesis that
//! differs from it only by single-token substitutions. The session answers
//! every role from that error ledger: comparison lists the live substitutions
//! (plus fabricated ones at the configured rate), verification confirms only
//! the genuine ones, and refinement applies whatever corrections it is told
//! about, up to `fix_per_round` per call.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{AttentionPayload, Backend, BackendRequest, Capabilities, InferResponse, Role, Transport, NO_DIFFERENCES};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::latex::{tokenize_latex, tokenize_spanned, SpannedToken};
use crate::metrics::pixel_match;

/// Appended to a hypothesis to make it fail to compile.
const BREAKER: &str = " \\frac{";

pub const ATTENTION_GRID_W: usize = 32;
const ATTENTION_HEADS: usize = 2;
const ATTENTION_SIGMA: f64 = 2.0;
const ATTENTION_NOISE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedParams {
    pub seed: u64,
    /// Substitutions injected into the first generation.
    pub errors: usize,
    /// Corrections applied per refinement call; `None` applies all.
    pub fix_per_round: Option<usize>,
    /// Probability of each fabricated-difference slot firing in a comparison.
    pub halluc_rate: f64,
    /// Exact number of fabricated items per comparison, overriding `halluc_rate`.
    pub fabricate: Option<usize>,
    /// Cap on genuine items reported per comparison.
    pub max_items: Option<usize>,
    /// Per-call error counts for repeated generations (best-of-n sampling).
    pub sample_errors: Vec<usize>,
    pub attention: bool,
    pub layers: usize,
    /// Fixed judge reply; otherwise the judge answers pixel agreement / 10.
    pub judge_reply: Option<String>,
    /// First generation does not compile.
    pub broken: bool,
}

impl Default for ScriptedParams {
    fn default() -> Self {
        Self {
            seed: 0,
            errors: 0,
            fix_per_round: None,
            halluc_rate: 0.0,
            fabricate: None,
            max_items: None,
            sample_errors: Vec::new(),
            attention: true,
            layers: 40,
            judge_reply: None,
            broken: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("mock parameter {key}={value:?} is not valid")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::Config(format!("mock parameter {key}={value:?} is not a boolean"))),
    }
}

impl ScriptedParams {
    /// Parses the query part of a `mock:` endpoint, e.g. `?seed=3&errors=1`.
    pub fn parse(query: &str) -> Result<Self> {
        let mut p = Self::default();
        let query = query.trim_start_matches("//").trim_start_matches('?');
        for pair in query.split('&').filter(|s| !s.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mock parameter {pair:?} has no value")))?;
            match key {
                "seed" => p.seed = parse_value(key, value)?,
                "errors" => p.errors = parse_value(key, value)?,
                "fix_per_round" => p.fix_per_round = Some(parse_value(key, value)?),
                "halluc_rate" => {
                    p.halluc_rate = parse_value(key, value)?;
                    if !(0.0..=1.0).contains(&p.halluc_rate) {
                        return Err(Error::Config(format!("halluc_rate must be in [0, 1], got {value}")));
                    }
                }
                "fabricate" => p.fabricate = Some(parse_value(key, value)?),
                "max_items" => p.max_items = Some(parse_value(key, value)?),
                "sample_errors" => {
                    p.sample_errors = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_value(key, s))
                        .collect::<Result<_>>()?
                }
                "attention" => p.attention = parse_bool(key, value)?,
                "layers" => p.layers = parse_value(key, value)?,
                "judge_reply" => p.judge_reply = Some(value.to_string()),
                "broken" => p.broken = parse_bool(key, value)?,
                other => return Err(Error::Config(format!("unknown mock parameter {other:?}"))),
            }
        }
        if p.layers == 0 {
            return Err(Error::Config("mock layers must be positive".into()));
        }
        Ok(p)
    }

    /// Canonical query string; `parse(to_query())` round-trips.
    pub fn to_query(&self) -> String {
        let mut parts = vec![format!("seed={}", self.seed), format!("errors={}", self.errors)];
        if let Some(f) = self.fix_per_round {
            parts.push(format!("fix_per_round={f}"));
        }
        parts.push(format!("halluc_rate={}", self.halluc_rate));
        if let Some(f) = self.fabricate {
            parts.push(format!("fabricate={f}"));
        }
        if let Some(m) = self.max_items {
            parts.push(format!("max_items={m}"));
        }
        if !self.sample_errors.is_empty() {
            let list: Vec<String> = self.sample_errors.iter().map(|n| n.to_string()).collect();
            parts.push(format!("sample_errors={}", list.join(",")));
        }
        parts.push(format!("attention={}", u8::from(self.attention)));
        parts.push(format!("layers={}", self.layers));
        if let Some(j) = &self.judge_reply {
            parts.push(format!("judge_reply={j}"));
        }
        if self.broken {
            parts.push("broken=1".into());
        }
        format!("mock:?{}", parts.join("&"))
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    params: ScriptedParams,
}

impl ScriptedBackend {
    pub fn new(params: ScriptedParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ScriptedParams {
        &self.params
    }
}

impl Backend for ScriptedBackend {
    fn open(&self, instance: &Instance) -> Result<Box<dyn Transport>> {
        let truth = instance.ground_truth.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "the scripted backend needs ground truth, instance {:?} has none",
                instance.id
            ))
        })?;
        Ok(Box::new(ScriptedSession::new(self.params.clone(), &instance.id, truth.source())))
    }

    fn describe(&self) -> String {
        self.params.to_query()
    }
}

/// Token positions the mock may substitute: single letters and digit runs,
/// excluding environment names and array column specs.
pub fn eligible_positions(tokens: &[String]) -> Vec<usize> {
    let mut excluded = vec![false; tokens.len()];
    let mut i = 0;
    while i < tokens.len() {
        if (tokens[i] == "\\begin" || tokens[i] == "\\end") && tokens.get(i + 1).is_some_and(|t| t == "{") {
            let close = group_end(tokens, i + 1);
            let name: String = tokens[i + 2..close].concat();
            excluded[i + 1..=close.min(tokens.len() - 1)].fill(true);
            let mut next = close + 1;
            if tokens[i] == "\\begin" && matches!(name.as_str(), "array" | "tabular") && tokens.get(next).is_some_and(|t| t == "{") {
                let spec_close = group_end(tokens, next);
                excluded[next..=spec_close.min(tokens.len() - 1)].fill(true);
                next = spec_close + 1;
            }
            i = next;
            continue;
        }
        i += 1;
    }
    tokens
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            !excluded[*i]
                && ((t.len() == 1 && t.as_bytes()[0].is_ascii_alphabetic()) || t.bytes().all(|b| b.is_ascii_digit()))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Index of the `}` closing the group opened at `open`, or the last index.
fn group_end(tokens: &[String], open: usize) -> usize {
    let mut depth = 0usize;
    for (k, t) in tokens.iter().enumerate().skip(open) {
        match t.as_str() {
            "{" => depth += 1,
            "}" => {
                depth -= 1;
                if depth == 0 {
                    return k;
                }
            }
            _ => {}
        }
    }
    tokens.len().saturating_sub(1)
}

fn substitute(rng: &mut ChaCha8Rng, token: &str) -> String {
    const LOWER: &[u8] = b"abcdefghkmnpqrstuvwxyz";
    const UPPER: &[u8] = b"ABCDEFGHKMNPQRSTUVWXYZ";
    const DIGITS: &[u8] = b"0123456789";
    let c = token.as_bytes()[0];
    let pool = if c.is_ascii_digit() {
        DIGITS
    } else if c.is_ascii_uppercase() {
        UPPER
    } else {
        LOWER
    };
    loop {
        let pick = (*pool.choose(rng).unwrap() as char).to_string();
        if pick != token {
            return pick;
        }
    }
}

fn session_seed(seed: u64, instance_id: &str) -> u64 {
    let digest = Sha256::digest(instance_id.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn claim_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"token (\d+): the original shows `([^`]*)`").unwrap())
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\.\s*(.*)$").unwrap())
}

struct ScriptedSession {
    params: ScriptedParams,
    rng: ChaCha8Rng,
    truth_source: String,
    truth_spans: Vec<SpannedToken>,
    truth: Vec<String>,
    eligible: Vec<usize>,
    hypothesis: Vec<String>,
    broken: bool,
    generations: usize,
}

impl ScriptedSession {
    fn new(params: ScriptedParams, instance_id: &str, truth_source: &str) -> Self {
        let truth_spans = tokenize_spanned(truth_source);
        let truth: Vec<String> = truth_spans.iter().map(|t| t.text.clone()).collect();
        let eligible = eligible_positions(&truth);
        Self {
            rng: ChaCha8Rng::seed_from_u64(session_seed(params.seed, instance_id)),
            params,
            truth_source: truth_source.to_string(),
            truth_spans,
            hypothesis: truth.clone(),
            truth,
            eligible,
            broken: false,
            generations: 0,
        }
    }

    fn live_errors(&self) -> Vec<usize> {
        (0..self.truth.len()).filter(|&i| self.hypothesis[i] != self.truth[i]).collect()
    }

    /// Ground-truth source with the hypothesis' substitutions spliced in.
    fn hypothesis_source(&self) -> String {
        let mut out = String::with_capacity(self.truth_source.len() + 8);
        let mut cursor = 0;
        for (tok, hyp) in self.truth_spans.iter().zip(&self.hypothesis) {
            if &tok.text != hyp {
                out.push_str(&self.truth_source[cursor..tok.span.start]);
                out.push_str(hyp);
                cursor = tok.span.end;
            }
        }
        out.push_str(&self.truth_source[cursor..]);
        if self.broken {
            out.push_str(BREAKER);
        }
        out
    }

    /// Adopts a hypothesis sent back by the caller when it lines up with the truth.
    fn sync_from(&mut self, source: &str) {
        let (body, broken) = match source.trim_end().strip_suffix(BREAKER.trim_start()) {
            Some(body) => (body, true),
            None => (source, false),
        };
        let tokens = tokenize_latex(body);
        if tokens.len() == self.truth.len() {
            self.hypothesis = tokens;
            self.broken = broken;
        }
    }

    fn generate(&mut self, request: &BackendRequest) -> String {
        let n_errors = self
            .params
            .sample_errors
            .get(self.generations)
            .copied()
            .unwrap_or(self.params.errors);
        self.generations += 1;
        self.hypothesis = self.truth.clone();
        let mut positions = self.eligible.clone();
        positions.shuffle(&mut self.rng);
        for &pos in positions.iter().take(n_errors) {
            self.hypothesis[pos] = substitute(&mut self.rng, &self.truth[pos]);
        }
        self.broken = self.params.broken && self.generations == 1;
        let source = self.hypothesis_source();
        if request.prompt.contains("step by step") {
            format!(
                "The image shows a formula; reading it symbol by symbol.\nFinal answer:\n```latex\n{source}\n```"
            )
        } else {
            source
        }
    }

    fn claim(pos: usize, expected: &str, found: &str) -> String {
        format!("token {pos}: the original shows `{expected}` but the rendering shows `{found}`")
    }

    fn compare(&mut self) -> (String, Vec<bool>) {
        let mut genuine = self.live_errors();
        if let Some(cap) = self.params.max_items {
            genuine.truncate(cap);
        }
        let n_fake = match self.params.fabricate {
            Some(n) => n,
            None => {
                let slots = genuine.len().max(1);
                (0..slots).filter(|_| self.rng.random::<f64>() < self.params.halluc_rate).count()
            }
        };

        let mut items: Vec<(usize, String, bool)> = genuine
            .iter()
            .map(|&p| (p, Self::claim(p, &self.truth[p], &self.hypothesis[p]), false))
            .collect();
        let correct: Vec<usize> = self
            .eligible
            .iter()
            .copied()
            .filter(|&p| self.hypothesis[p] == self.truth[p])
            .collect();
        let mut used = BTreeSet::new();
        for _ in 0..n_fake {
            let free: Vec<usize> = correct.iter().copied().filter(|p| !used.contains(p)).collect();
            let pool = if free.is_empty() { &correct } else { &free };
            let item = match pool.choose(&mut self.rng) {
                Some(&p) => {
                    used.insert(p);
                    let fake = substitute(&mut self.rng, &self.truth[p]);
                    (p, Self::claim(p, &fake, &self.hypothesis[p]), true)
                }
                None => (usize::MAX, "the spacing between symbols differs".to_string(), true),
            };
            items.push(item);
        }
        items.sort_by_key(|(p, _, fake)| (*p, *fake));

        if items.is_empty() {
            return (NO_DIFFERENCES.to_string(), Vec::new());
        }
        let text = items
            .iter()
            .enumerate()
            .map(|(i, (_, d, _))| format!("{}. {d}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        (text, items.iter().map(|(_, _, f)| *f).collect())
    }

    fn is_genuine(&self, description: &str) -> bool {
        if description.starts_with("compilation error") {
            return true;
        }
        match claim_line().captures(description) {
            Some(c) => {
                let pos: usize = match c[1].parse() {
                    Ok(p) => p,
                    Err(_) => return false,
                };
                pos < self.truth.len() && self.hypothesis[pos] != self.truth[pos] && c[2] == self.truth[pos]
            }
            None => false,
        }
    }

    fn verify(&self, diff_text: &str) -> String {
        let confirmed: Vec<String> = diff_text
            .lines()
            .filter_map(|line| {
                let c = numbered_line().captures(line)?;
                self.is_genuine(&c[2]).then(|| format!("{}. {}", &c[1], &c[2]))
            })
            .collect();
        if confirmed.is_empty() {
            NO_DIFFERENCES.to_string()
        } else {
            confirmed.join("\n")
        }
    }

    fn refine(&mut self, request: &BackendRequest) -> String {
        if let Some(current) = &request.text_context {
            self.sync_from(current);
        }
        let mut budget = self.params.fix_per_round.unwrap_or(usize::MAX);
        for line in request.prompt.lines() {
            if line.contains("compilation error") {
                self.broken = false;
                continue;
            }
            if budget == 0 {
                continue;
            }
            if let Some(c) = claim_line().captures(line) {
                if let Ok(pos) = c[1].parse::<usize>() {
                    if pos < self.truth.len() {
                        self.hypothesis[pos] = c[2].to_string();
                        budget -= 1;
                    }
                }
            }
        }
        self.hypothesis_source()
    }

    /// Gaussian bump over the first live error, placed proportionally along the grid.
    fn attention(&mut self, request: &BackendRequest) -> Result<AttentionPayload> {
        let image = &request.images[0];
        let grid_w = ATTENTION_GRID_W;
        let grid_h = ((grid_w as f64 * image.height() as f64 / image.width() as f64).round() as usize).clamp(2, 32);
        let layer_range = request.layer_range.unwrap_or([0, 0]);
        if layer_range[1] >= self.params.layers {
            return Err(Error::Protocol(format!(
                "layer range {layer_range:?} outside the host's {} layers",
                self.params.layers
            )));
        }
        let n_layers = layer_range[1] - layer_range[0] + 1;
        let tokens: Vec<String> = request
            .text_context
            .as_deref()
            .unwrap_or("")
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let tokens = if tokens.is_empty() { vec![String::new()] } else { tokens };

        let focus = self.live_errors().first().copied().unwrap_or(self.truth.len() / 2);
        let n = self.truth.len().max(1) as f64;
        let centre_col = (focus as f64 + 0.5) / n * grid_w as f64 - 0.5;
        let centre_row = (grid_h as f64 - 1.0) / 2.0;

        let cells = grid_h * grid_w;
        let mut data = Vec::with_capacity(tokens.len() * n_layers * ATTENTION_HEADS * cells);
        for _ in 0..tokens.len() * n_layers * ATTENTION_HEADS {
            for r in 0..grid_h {
                for c in 0..grid_w {
                    let (dr, dc) = (r as f64 - centre_row, c as f64 - centre_col);
                    let bump = (-(dr * dr + dc * dc) / (2.0 * ATTENTION_SIGMA * ATTENTION_SIGMA)).exp();
                    let noise = self.rng.random::<f64>() * ATTENTION_NOISE;
                    data.push((bump + noise) as f32);
                }
            }
        }
        Ok(AttentionPayload {
            dims: [tokens.len(), n_layers, ATTENTION_HEADS, grid_h, grid_w],
            data,
            tokens,
        })
    }

    fn judge(&self, request: &BackendRequest) -> String {
        match &self.params.judge_reply {
            Some(reply) => reply.clone(),
            None => format!("{:.1}", pixel_match(&request.images[0], &request.images[1]) / 10.0),
        }
    }
}

impl Transport for ScriptedSession {
    fn infer(&mut self, request: &BackendRequest) -> Result<InferResponse> {
        let mut response = InferResponse::default();
        match request.role {
            Role::Generation => response.text = self.generate(request),
            Role::Comparison => {
                let (text, flags) = self.compare();
                response.text = text;
                response.fabricated = Some(flags);
            }
            Role::Verification => response.text = self.verify(request.text_context.as_deref().unwrap_or("")),
            Role::Refinement => response.text = self.refine(request),
            Role::Attention => {
                if !self.params.attention {
                    return Err(Error::AttentionUnavailable);
                }
                response.attention = Some(self.attention(request)?);
            }
            Role::Judge => response.text = self.judge(request),
        }
        Ok(response)
    }

    fn capabilities(&mut self) -> Result<Capabilities> {
        Ok(Capabilities {
            attention: self.params.attention,
            layers: Some(self.params.layers),
        })
    }
}
