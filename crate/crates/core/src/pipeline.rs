//! The refinement loop, its single-pass baselines, and the hallucination audit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attnloc::{localize, overlay, LocalizeParams};
use crate::backend::{Backend, DiffItem, DiffReport, GenerationMode, RefineOutcome, VlmClient};
use crate::config::{resolve_layer_range, PromptTemplates, RunConfig, Strategy};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::latex::LatexDoc;
use crate::metrics::{cw_ssim, MetricSnapshot};
use crate::raster::RasterImage;
use crate::record::{Candidate, IterationRecord, Localization, Refinement, RunResult, Termination, Verification};
use crate::render::{blank_like, normalize_canvas, Renderer};

const COMPILE_EXCERPT_CHARS: usize = 400;

/// Everything a run needs besides the instance.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub config: &'a RunConfig,
    pub prompts: &'a PromptTemplates,
    pub renderer: &'a Renderer,
    pub backend: &'a dyn Backend,
}

struct Reference {
    truth: LatexDoc,
    image: Arc<RasterImage>,
}

/// Loop state carried across rounds; kept outside the round body so a backend
/// failure can still return the records gathered so far.
struct Progress {
    rounds: Vec<IterationRecord>,
    hypothesis: Option<LatexDoc>,
}

fn compile_excerpt(log: &str) -> String {
    let log = log.trim();
    let start = log
        .char_indices()
        .rev()
        .nth(COMPILE_EXCERPT_CHARS.saturating_sub(1))
        .map_or(0, |(i, _)| i);
    log[start..].replace('\n', " ")
}

impl<'a> Pipeline<'a> {
    /// Runs the strategy selected in the config.
    pub fn run(&self, instance: &Instance) -> RunResult {
        match self.config.strategy {
            Strategy::A2r2 => self.run_loop(instance, self.config.ablate_al_fv),
            other => self.run_baseline(instance, other),
        }
    }

    pub fn run_a2r2(&self, instance: &Instance) -> RunResult {
        self.run_loop(instance, false)
    }

    /// The loop with localization and verification removed.
    pub fn run_ablated(&self, instance: &Instance) -> RunResult {
        self.run_loop(instance, true)
    }

    fn reference(&self, instance: &Instance) -> Option<Reference> {
        let truth = instance.ground_truth.clone()?;
        let rendered = self.renderer.render(&truth);
        let image = match rendered.image() {
            Some(img) => img.clone(),
            None => {
                log::warn!(
                    "{}: ground truth does not render; scoring visual metrics against the input image",
                    instance.id
                );
                Arc::new(normalize_canvas(&instance.image))
            }
        };
        Some(Reference { truth, image })
    }

    fn score(reference: Option<&Reference>, hypothesis: &LatexDoc, rendered: Option<&Arc<RasterImage>>) -> Option<MetricSnapshot> {
        reference.map(|r| MetricSnapshot::compute(hypothesis, &r.truth, rendered.map(|i| i.as_ref()), &r.image))
    }

    fn open(&self, instance: &Instance) -> Result<VlmClient> {
        Ok(VlmClient::new(self.backend.open(instance)?, self.prompts.clone()))
    }

    fn strategy_name(ablated: bool) -> &'static str {
        if ablated {
            "a2r2_ablated"
        } else {
            Strategy::A2r2.as_str()
        }
    }

    fn run_loop(&self, instance: &Instance, ablated: bool) -> RunResult {
        let reference = self.reference(instance);
        let mut progress = Progress {
            rounds: Vec::new(),
            hypothesis: None,
        };
        let mut client = None;
        let outcome = self.open(instance).and_then(|c| {
            let c = client.insert(c);
            self.loop_rounds(instance, c, reference.as_ref(), ablated, &mut progress)
        });
        let transcript = client.map(|mut c| c.take_transcript()).unwrap_or_default();
        let (termination, error) = match outcome {
            Ok(t) => (t, None),
            Err(e) => {
                log::error!("{}: run aborted: {e}", instance.id);
                (Termination::Aborted, Some(e.to_string()))
            }
        };
        let final_doc = progress
            .rounds
            .last()
            .map(|r| r.hypothesis.clone())
            .or(progress.hypothesis)
            .unwrap_or_else(|| LatexDoc::new(""));
        RunResult {
            instance_id: instance.id.clone(),
            strategy: Self::strategy_name(ablated).to_string(),
            final_doc,
            rounds: progress.rounds,
            termination,
            candidates: Vec::new(),
            error,
            transcript,
        }
    }

    fn loop_rounds(
        &self,
        instance: &Instance,
        client: &mut VlmClient,
        reference: Option<&Reference>,
        ablated: bool,
        progress: &mut Progress,
    ) -> Result<Termination> {
        let cfg = self.config;
        let source = Arc::new(instance.image.clone());
        let mut hypothesis = client.generate(&source, GenerationMode::Direct)?;
        progress.hypothesis = Some(hypothesis.clone());
        let mut stalled = 0usize;

        for t in 0..=cfg.t_max {
            let render = self.renderer.render(&hypothesis);
            let mut rec = IterationRecord::new(t, hypothesis.clone(), &render);
            rec.metrics = Self::score(reference, &hypothesis, render.image());

            let Some(rendered) = render.image().cloned() else {
                let diff = DiffReport::single(format!(
                    "compilation error: {}",
                    compile_excerpt(render.failure_log().unwrap_or(""))
                ));
                rec.diff = diff.clone();
                rec.verification = Verification::Skipped;
                if t == cfg.t_max {
                    progress.rounds.push(rec);
                    return Ok(Termination::CompileDeadEnd);
                }
                let placeholder = Arc::new(blank_like(&source));
                let outcome = client.refine(&hypothesis, &source, &placeholder, &diff);
                match outcome {
                    Ok(RefineOutcome::Updated(doc)) => {
                        rec.refinement = Refinement::Updated;
                        progress.rounds.push(rec);
                        hypothesis = doc;
                        stalled = 0;
                        continue;
                    }
                    Ok(RefineOutcome::NoProgress) => {
                        rec.refinement = Refinement::NoProgress;
                        progress.rounds.push(rec);
                        return Ok(Termination::CompileDeadEnd);
                    }
                    Err(e) => {
                        progress.rounds.push(rec);
                        return Err(e);
                    }
                }
            };

            let result = self.localized_round(client, &source, &rendered, &hypothesis, t, ablated, &mut rec);
            progress.rounds.push(rec);
            match result? {
                RoundEnd::Stop(termination) => return Ok(termination),
                RoundEnd::Next(doc) => {
                    hypothesis = doc;
                    stalled = 0;
                }
                RoundEnd::Stalled => {
                    stalled += 1;
                    if stalled >= 2 {
                        return Ok(Termination::NoProgress);
                    }
                }
            }
        }
        unreachable!("the final round always terminates")
    }

    #[allow(clippy::too_many_arguments)]
    fn localized_round(
        &self,
        client: &mut VlmClient,
        source: &Arc<RasterImage>,
        rendered: &Arc<RasterImage>,
        hypothesis: &LatexDoc,
        t: usize,
        ablated: bool,
        rec: &mut IterationRecord,
    ) -> Result<RoundEnd> {
        let cfg = self.config;
        let diff = client.compare(source, rendered)?;
        rec.diff = diff.clone();
        if diff.is_empty() {
            return Ok(RoundEnd::Stop(Termination::NoDifferences));
        }
        if t == cfg.t_max {
            return Ok(RoundEnd::Stop(Termination::TMax));
        }

        let (region_a, region_b, feedback) = if ablated {
            rec.verification = Verification::Skipped;
            (source.clone(), rendered.clone(), diff)
        } else {
            let (a, b) = self.regions(client, source, rendered, &diff, rec)?;
            let verified = client.verify(&diff, &a, &b)?;
            rec.verification = Verification::Performed;
            rec.verified_diff = verified.clone();
            if verified.is_empty() {
                return Ok(RoundEnd::Stop(Termination::NoDifferences));
            }
            (a, b, verified)
        };

        match client.refine(hypothesis, &region_a, &region_b, &feedback)? {
            RefineOutcome::Updated(doc) => {
                rec.refinement = Refinement::Updated;
                Ok(RoundEnd::Next(doc))
            }
            RefineOutcome::NoProgress => {
                rec.refinement = Refinement::NoProgress;
                Ok(RoundEnd::Stalled)
            }
        }
    }

    /// Attention-guided crops, or the whole images when attention cannot be used.
    fn regions(
        &self,
        client: &mut VlmClient,
        source: &Arc<RasterImage>,
        rendered: &Arc<RasterImage>,
        diff: &DiffReport,
        rec: &mut IterationRecord,
    ) -> Result<(Arc<RasterImage>, Arc<RasterImage>)> {
        let cfg = self.config;
        let whole = |rec: &mut IterationRecord, why: &str| {
            log::debug!("round {}: whole-image regions ({why})", rec.round);
            rec.localization = Localization::WholeImage;
            rec.images.regions = Some((source.clone(), rendered.clone()));
            Ok((source.clone(), rendered.clone()))
        };

        let layers = match client.capabilities() {
            Ok(caps) if caps.attention => resolve_layer_range(cfg.layer_policy, cfg.layer_range, caps.layers),
            Ok(_) => return whole(rec, "attention not advertised"),
            Err(e @ Error::BackendUnavailable { .. }) => return Err(e),
            Err(e) => return whole(rec, &e.to_string()),
        };
        let layers = match layers {
            Ok(l) => l,
            Err(e) => return whole(rec, &e.to_string()),
        };
        let stack = match client.fetch_attention(source, &diff.to_prompt_text(), layers) {
            Ok(s) => s,
            Err(e @ Error::BackendUnavailable { .. }) => return Err(e),
            Err(e) => {
                if !matches!(e, Error::AttentionUnavailable) {
                    log::warn!("round {}: unusable attention ({e}); using whole images", rec.round);
                }
                return whole(rec, &e.to_string());
            }
        };
        let params = LocalizeParams {
            percentile: cfg.percentile,
            dilation_kernel: cfg.dilation_kernel,
        };
        match localize(source, rendered, &stack, params) {
            Ok(loc) => {
                rec.localization = Localization::Attention;
                rec.region_box = Some(loc.bbox);
                rec.region_rects = Some((loc.rect_source, loc.rect_rendered));
                if cfg.overlays {
                    rec.images.overlay = Some(overlay(source, &loc));
                }
                let a = Arc::new(loc.region_source);
                let b = Arc::new(loc.region_rendered);
                rec.images.regions = Some((a.clone(), b.clone()));
                Ok((a, b))
            }
            Err(e) => whole(rec, &e.to_string()),
        }
    }

    /// Single-pass strategies: direct prompting, chain-of-thought, best-of-n.
    pub fn run_baseline(&self, instance: &Instance, strategy: Strategy) -> RunResult {
        let reference = self.reference(instance);
        let mut client = None;
        let mut candidates = Vec::new();
        let outcome = self.open(instance).and_then(|c| {
            let c = client.insert(c);
            self.baseline_pass(instance, c, strategy, &mut candidates)
        });
        let transcript = client.map(|mut c| c.take_transcript()).unwrap_or_default();
        let (rounds, termination, error, final_doc) = match outcome {
            Ok(doc) => {
                let render = self.renderer.render(&doc);
                let mut rec = IterationRecord::new(0, doc.clone(), &render);
                rec.metrics = Self::score(reference.as_ref(), &doc, render.image());
                (vec![rec], Termination::SinglePass, None, doc)
            }
            Err(e) => {
                log::error!("{}: run aborted: {e}", instance.id);
                (Vec::new(), Termination::Aborted, Some(e.to_string()), LatexDoc::new(""))
            }
        };
        RunResult {
            instance_id: instance.id.clone(),
            strategy: strategy.as_str().to_string(),
            final_doc,
            rounds,
            termination,
            candidates,
            error,
            transcript,
        }
    }

    fn baseline_pass(
        &self,
        instance: &Instance,
        client: &mut VlmClient,
        strategy: Strategy,
        candidates: &mut Vec<Candidate>,
    ) -> Result<LatexDoc> {
        let source = Arc::new(instance.image.clone());
        match strategy {
            Strategy::Direct => client.generate(&source, GenerationMode::Direct),
            Strategy::Cot => client.generate(&source, GenerationMode::ChainOfThought),
            Strategy::BestOfN => {
                let target = normalize_canvas(&instance.image);
                for index in 0..self.config.n_samples {
                    let doc = client.generate(&source, GenerationMode::Direct)?;
                    let render = self.renderer.render(&doc);
                    let score = render.image().map_or(0.0, |img| cw_ssim(img, &target));
                    candidates.push(Candidate {
                        index,
                        hypothesis: doc,
                        compiled: render.image().is_some(),
                        score,
                    });
                }
                Ok(select_best(candidates).hypothesis.clone())
            }
            Strategy::A2r2 => Err(Error::Precondition("a2r2 is not a baseline strategy".into())),
        }
    }
}

enum RoundEnd {
    Stop(Termination),
    Next(LatexDoc),
    Stalled,
}

/// Highest score wins; ties go to the lowest index.
pub fn select_best(candidates: &[Candidate]) -> &Candidate {
    candidates
        .iter()
        .reduce(|best, c| if c.score > best.score { c } else { best })
        .expect("at least one candidate")
}

/// Hallucination rate of one audited round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    /// 1-based: round 1 is the first comparison.
    pub round: usize,
    pub items: usize,
    pub fabricated: usize,
    /// Items the judge could not classify; left out of the rate.
    pub excluded: usize,
    /// Percentage of classified items that were fabricated.
    pub rate: Option<f64>,
}

/// Decides whether a reported difference is fabricated when the backend
/// did not record it.
pub trait DiffJudge {
    fn is_fabricated(&mut self, run: &RunResult, round: &IterationRecord, item: &DiffItem) -> Result<bool>;
}

/// Per-round fabrication rates over the comparison diffs of `runs`.
/// Rows cover rounds `1..=rounds`. Recorded flags are used when present;
/// otherwise `judge` classifies the item. Compile-failure rounds carry no
/// comparison and are skipped.
pub fn audit_hallucinations(runs: &[RunResult], rounds: usize, mut judge: Option<&mut dyn DiffJudge>) -> Vec<AuditRow> {
    let mut rows: Vec<AuditRow> = (1..=rounds)
        .map(|round| AuditRow {
            round,
            items: 0,
            fabricated: 0,
            excluded: 0,
            rate: None,
        })
        .collect();
    for run in runs {
        for rec in run.rounds.iter().filter(|r| r.render.ok && r.round < rounds) {
            let row = &mut rows[rec.round];
            for item in &rec.diff.items {
                row.items += 1;
                let verdict = match (item.fabricated, judge.as_deref_mut()) {
                    (Some(flag), _) => Ok(flag),
                    (None, Some(j)) => j.is_fabricated(run, rec, item),
                    (None, None) => Err(Error::Precondition("no fabrication ledger and no judge".into())),
                };
                match verdict {
                    Ok(true) => row.fabricated += 1,
                    Ok(false) => {}
                    Err(e) => {
                        log::warn!("{} round {}: item {} excluded: {e}", run.instance_id, rec.round, item.index);
                        row.excluded += 1;
                    }
                }
            }
        }
    }
    for row in &mut rows {
        let classified = row.items - row.excluded;
        row.rate = (classified > 0).then(|| 100.0 * row.fabricated as f64 / classified as f64);
    }
    rows
}
