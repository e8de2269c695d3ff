//! One function per subcommand.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use a2r2::backend::{backend_from_endpoint, Backend};
use a2r2::config::RunConfig;
use a2r2::curation::{self, Provenance, DIRECTION_NOTE};
use a2r2::dataset::{load_dataset, Instance};
use a2r2::metrics::MetricSnapshot;
use a2r2::pipeline::{audit_hallucinations, AuditRow, Pipeline};
use a2r2::record::{load_run, write_run_artifacts, Localization, RunResult, RunSummary};
use a2r2::render::{normalize_canvas, Renderer};
use a2r2::{LatexDoc, RasterImage};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Deserialize;

use crate::settings::Settings;
use crate::tables::{self, AggregateRow};

/// How a command finished when it did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some instances failed; their failures are recorded in the outputs.
    Partial,
}

impl Outcome {
    fn from_failures(n: usize) -> Self {
        if n == 0 {
            Outcome::Success
        } else {
            Outcome::Partial
        }
    }
}

pub fn renderer(settings: &Settings) -> Result<Renderer> {
    let r = &settings.render;
    Renderer::from_env(&r.toolchain(), r.options(), r.cache_path(), r.max_concurrent).context("starting the renderer")
}

pub fn backend(settings: &Settings) -> Result<Arc<dyn Backend>> {
    backend_from_endpoint(settings.endpoint()?, settings.backend.http.clone(), settings.backend.seed)
        .context("configuring the backend")
}

fn load_instances(path: &Path) -> Result<(Vec<Instance>, usize)> {
    let loaded = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    for skip in &loaded.skipped {
        log::warn!("line {} ({}): skipped: {}", skip.line, skip.id, skip.error);
    }
    if loaded.instances.is_empty() {
        bail!("dataset {} has no loadable instances", path.display());
    }
    Ok((loaded.instances, loaded.skipped.len()))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub struct BatchOutput {
    pub summaries: Vec<RunSummary>,
    pub failures: usize,
}

/// Runs `config` over every instance with a bounded pool, writing
/// `runs/<id>/`, `summary.jsonl`, `metrics.csv` and `config.toml` under `out`.
fn run_batch(
    settings: &Settings,
    config: &RunConfig,
    renderer: &Renderer,
    backend: &dyn Backend,
    instances: &[Instance],
    out: &Path,
) -> Result<BatchOutput> {
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).with_context(|| format!("creating {}", runs_dir.display()))?;
    let mut effective = settings.clone();
    effective.run = config.clone();
    effective.persist(out)?;

    let pipeline = Pipeline {
        config,
        prompts: &settings.prompts,
        renderer,
        backend,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallel_workers)
        .build()
        .context("building the worker pool")?;
    let total = instances.len();
    let outcomes: Vec<(RunResult, bool)> = pool.install(|| {
        instances
            .par_iter()
            .map(|inst| {
                let result = pipeline.run(inst);
                let written = match write_run_artifacts(&runs_dir, &result, &inst.image) {
                    Ok(_) => true,
                    Err(e) => {
                        log::error!("{}: cannot write artifacts: {e}", inst.id);
                        false
                    }
                };
                match &result.error {
                    Some(e) => log::error!("{}: {} ({e})", inst.id, result.termination.as_str()),
                    None => log::info!("{}: {} after {} round(s)", inst.id, result.termination.as_str(), result.rounds.len()),
                }
                (result, written)
            })
            .collect()
    });

    let mut failures = 0;
    let mut summaries = Vec::with_capacity(total);
    for ((result, written), inst) in outcomes.iter().zip(instances) {
        if !result.succeeded() || !written {
            failures += 1;
        }
        summaries.push(RunSummary::from_result(result, inst.ground_truth.as_ref()));
    }
    let lines = summaries
        .iter()
        .map(serde_json::to_string)
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(&out.join("summary.jsonl"), lines)?;
    if summaries.iter().any(|s| s.metrics.is_some()) {
        tables::write_batch_csv(&out.join("metrics.csv"), &summaries)?;
    }
    log::info!("{total} instance(s), {failures} failure(s); outputs in {}", out.display());
    Ok(BatchOutput { summaries, failures })
}

pub fn batch(settings: &Settings, dataset: &Path, out: &Path) -> Result<Outcome> {
    let (instances, skipped) = load_instances(dataset)?;
    let renderer = renderer(settings)?;
    let backend = backend(settings)?;
    let res = run_batch(settings, &settings.run, &renderer, backend.as_ref(), &instances, out)?;
    let row = AggregateRow::from_summaries(settings.run.strategy.as_str().into(), &res.summaries);
    print!("{}", tables::aggregate_table("strategy", &[row]));
    Ok(Outcome::from_failures(res.failures + skipped))
}

fn read_latex_arg(arg: &str) -> Result<String> {
    let path = Path::new(arg);
    if path.is_file() {
        Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?.trim().to_string())
    } else {
        Ok(arg.to_string())
    }
}

pub fn infer(settings: &Settings, image: &Path, latex: Option<&str>, out: &Path) -> Result<Outcome> {
    let img = RasterImage::load(image).with_context(|| format!("loading {}", image.display()))?;
    let id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    let instance = Instance {
        id,
        image: img,
        ground_truth: latex.map(read_latex_arg).transpose()?.map(LatexDoc::new),
    };
    let renderer = renderer(settings)?;
    let backend = backend(settings)?;
    settings.persist(out)?;
    let result = Pipeline {
        config: &settings.run,
        prompts: &settings.prompts,
        renderer: &renderer,
        backend: backend.as_ref(),
    }
    .run(&instance);
    let dir = write_run_artifacts(&out.join("runs"), &result, &instance.image)?;
    println!("{}", result.final_doc.source());
    eprintln!(
        "{}: {} after {} round(s); artifacts in {}",
        instance.id,
        result.termination.as_str(),
        result.rounds.len(),
        dir.display()
    );
    if let Some(m) = result.final_metrics() {
        eprintln!("match {:.2}  cw_ssim {:.2}  bleu4 {:.2}", m.pixel_match, m.cw_ssim, m.bleu4);
    }
    if let Some(e) = &result.error {
        eprintln!("error: {e}");
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Success)
}

#[derive(Deserialize)]
struct Prediction {
    id: String,
    latex: String,
}

fn read_predictions(path: &Path) -> Result<HashMap<String, String>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if out.insert(p.id.clone(), p.latex).is_some() {
            bail!("{}: duplicate prediction for {:?}", path.display(), p.id);
        }
    }
    Ok(out)
}

pub fn metrics(settings: &Settings, predictions: &Path, dataset: &Path, out: Option<&Path>) -> Result<Outcome> {
    let preds = read_predictions(predictions)?;
    let (instances, skipped) = load_instances(dataset)?;
    let renderer = renderer(settings)?;
    let mut problems = skipped;
    let mut jobs = Vec::new();
    for inst in &instances {
        match (&inst.ground_truth, preds.get(&inst.id)) {
            (None, _) => {
                log::warn!("{}: no ground truth, not scored", inst.id);
                problems += 1;
            }
            (Some(_), None) => {
                log::warn!("{}: no prediction", inst.id);
                problems += 1;
            }
            (Some(gt), Some(pred)) => jobs.push((inst, gt, LatexDoc::new(pred.clone()))),
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.run.parallel_workers)
        .build()?;
    let rows: Vec<(String, MetricSnapshot)> = pool.install(|| {
        jobs.par_iter()
            .map(|(inst, gt, pred)| {
                let reference = renderer
                    .render(gt)
                    .image()
                    .cloned()
                    .unwrap_or_else(|| Arc::new(normalize_canvas(&inst.image)));
                let rendered = renderer.render(pred);
                let m = MetricSnapshot::compute(pred, gt, rendered.image().map(|i| i.as_ref()), &reference);
                (inst.id.clone(), m)
            })
            .collect()
    });
    match out {
        Some(path) => {
            let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            tables::write_metrics_csv(f, &rows)?;
        }
        None => tables::write_metrics_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(Outcome::from_failures(problems))
}

pub fn curate(settings: &Settings, scores: &Path, k: usize, direction: curation::Direction, out: &Path) -> Result<Outcome> {
    let records = curation::read_records(scores)?;
    let weights = &settings.curation.weights;
    let finals = curation::final_scores(&records, weights)?;
    let ids = curation::select_subset(&finals.scores, k, direction)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_lines(&out.join("subset.txt"), ids.iter().cloned())?;
    let provenance = Provenance {
        weights: weights.clone(),
        direction,
        k,
        scored: finals.scores.len(),
        excluded: finals.excluded.clone(),
        degenerate_edit_normalization: curation::normalize_edit(&records).degenerate,
        note: DIRECTION_NOTE.to_string(),
    };
    let path = out.join("provenance.json");
    fs::write(&path, serde_json::to_string_pretty(&provenance)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    eprintln!("note: {DIRECTION_NOTE}");
    eprintln!(
        "selected {} of {} scored instance(s) ({} excluded) into {}",
        ids.len(),
        finals.scores.len(),
        finals.excluded.len(),
        out.display()
    );
    Ok(Outcome::from_failures(finals.excluded.len()))
}

pub fn sweep(settings: &Settings, dataset: &Path, rounds: &[usize], out: &Path) -> Result<Outcome> {
    if rounds.is_empty() || rounds.contains(&0) {
        bail!("--rounds needs one or more limits, each at least 1");
    }
    let (instances, skipped) = load_instances(dataset)?;
    let renderer = renderer(settings)?;
    let backend = backend(settings)?;
    let mut rows = Vec::new();
    let mut failures = skipped;
    for &limit in rounds {
        let config = RunConfig {
            t_max: limit,
            ..settings.run.clone()
        };
        let res = run_batch(settings, &config, &renderer, backend.as_ref(), &instances, &out.join(format!("t_max_{limit}")))?;
        failures += res.failures;
        rows.push(AggregateRow::from_summaries(limit.to_string(), &res.summaries));
    }
    tables::write_aggregate_csv(&out.join("sweep.csv"), "round_limit", &rows)?;
    print!("{}", tables::aggregate_table("round_limit", &rows));
    Ok(Outcome::from_failures(failures))
}

pub fn ablate(settings: &Settings, dataset: &Path, out: &Path) -> Result<Outcome> {
    let (instances, skipped) = load_instances(dataset)?;
    let renderer = renderer(settings)?;
    let backend = backend(settings)?;
    let mut rows = Vec::new();
    let mut failures = skipped;
    for (label, ablated) in [("full", false), ("ablated", true)] {
        let config = RunConfig {
            ablate_al_fv: ablated,
            strategy: a2r2::config::Strategy::A2r2,
            ..settings.run.clone()
        };
        let res = run_batch(settings, &config, &renderer, backend.as_ref(), &instances, &out.join(label))?;
        failures += res.failures;
        rows.push(AggregateRow::from_summaries(label.into(), &res.summaries));
    }
    tables::write_aggregate_csv(&out.join("ablation.csv"), "variant", &rows)?;
    print!("{}", tables::aggregate_table("variant", &rows));
    Ok(Outcome::from_failures(failures))
}

/// Directories under `root` (itself included) holding a `result.json`, sorted.
pub fn find_runs(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) {
        if dir.join("result.json").is_file() {
            out.push(dir.to_path_buf());
            return;
        }
        if depth == 0 {
            return;
        }
        let Ok(entries) = fs::read_dir(dir) else { return };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for d in dirs {
            walk(&d, depth - 1, out);
        }
    }
    let mut out = Vec::new();
    walk(root, 4, &mut out);
    out
}

fn load_runs(root: &Path) -> Result<Vec<(PathBuf, RunResult)>> {
    if !root.is_dir() {
        bail!("run directory {} does not exist", root.display());
    }
    let dirs = find_runs(root);
    if dirs.is_empty() {
        bail!("no runs found in {}", root.display());
    }
    dirs.into_iter()
        .map(|d| {
            let r = load_run(&d).with_context(|| format!("reading {}", d.display()))?;
            Ok((d, r))
        })
        .collect()
}

pub fn audit_rows_table(rows: &[AuditRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                r.items.to_string(),
                r.fabricated.to_string(),
                r.excluded.to_string(),
                r.rate.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into()),
            ]
        })
        .collect();
    tables::render_table(&["round", "items", "fabricated", "excluded", "rate_pct"], &cells)
}

pub fn audit(run_dir: &Path, rounds: Option<usize>, out: Option<&Path>) -> Result<Outcome> {
    let runs: Vec<RunResult> = load_runs(run_dir)?.into_iter().map(|(_, r)| r).collect();
    let rounds = rounds.unwrap_or_else(|| runs.iter().map(|r| r.rounds.len().saturating_sub(1)).max().unwrap_or(1).max(1));
    let rows = audit_hallucinations(&runs, rounds, None);
    let excluded: usize = rows.iter().map(|r| r.excluded).sum();
    if excluded > 0 {
        log::warn!("{excluded} item(s) carry no fabrication label and were left out of the rates");
    }
    print!("{}", audit_rows_table(&rows));
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["round", "items", "fabricated", "excluded", "rate_pct"])?;
        for r in &rows {
            w.write_record([
                r.round.to_string(),
                r.items.to_string(),
                r.fabricated.to_string(),
                r.excluded.to_string(),
                r.rate.map(tables::fmt).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    Ok(Outcome::Success)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Human-readable timeline of one run, plus the artifacts it lacks.
pub fn describe_run(dir: &Path, run: &RunResult) -> (String, Vec<String>) {
    let mut s = String::new();
    let mut missing = Vec::new();
    let _ = writeln!(
        s,
        "== {} [{}]: {}, {} round(s)",
        run.instance_id,
        run.strategy,
        run.termination.as_str(),
        run.rounds.len()
    );
    if let Some(e) = &run.error {
        let _ = writeln!(s, "   error: {e}");
    }
    for c in &run.candidates {
        let _ = writeln!(s, "   candidate {}: score {:.2}, compiled {}: {}", c.index, c.score, c.compiled, one_line(c.hypothesis.source()));
    }
    for rec in &run.rounds {
        let k = rec.round;
        let loc = match rec.localization {
            Localization::Attention => match rec.region_box {
                Some(b) => format!("attention box ({}, {}, {}x{})", b.x, b.y, b.w, b.h),
                None => "attention".into(),
            },
            Localization::WholeImage => "whole image".into(),
            Localization::NotRun => "-".into(),
        };
        let metric = rec
            .metrics
            .map(|m| format!(", match {:.2}, cw_ssim {:.2}", m.pixel_match, m.cw_ssim))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "   round {k}: render {}, diff {}, verified {}, localization {loc}, refinement {:?}{metric}",
            if rec.render.ok { "ok" } else { "failed" },
            rec.diff.len(),
            rec.verified_diff.len(),
            rec.refinement,
        );
        let _ = writeln!(s, "      hypothesis: {}", one_line(rec.hypothesis.source()));
        for item in &rec.diff.items {
            let kept = rec.verified_diff.items.iter().any(|v| v.index == item.index);
            let _ = writeln!(s, "      {}{}. {}", if kept { "+" } else { "-" }, item.index, one_line(&item.description));
        }
        if !dir.join(format!("round_{k}.json")).is_file() {
            missing.push(format!("round_{k}.json"));
        }
        if rec.render.ok && !dir.join(format!("round_{k}.png")).is_file() {
            missing.push(format!("round_{k}.png"));
        }
        let overlay = dir.join(format!("overlay_{k}.png"));
        if overlay.is_file() {
            let _ = writeln!(s, "      overlay: {}", overlay.display());
        }
    }
    let _ = writeln!(s, "   final: {}", one_line(run.final_doc.source()));
    for name in ["input.png", "final.tex", "transcript.jsonl"] {
        if !dir.join(name).is_file() {
            missing.push(name.to_string());
        }
    }
    (s, missing)
}

pub fn report(run_dir: &Path) -> Result<Outcome> {
    let runs = load_runs(run_dir)?;
    let mut incomplete = 0;
    for (dir, run) in &runs {
        let (text, missing) = describe_run(dir, run);
        print!("{text}");
        if !missing.is_empty() {
            incomplete += 1;
            println!("   missing: {}", missing.join(", "));
        }
    }
    println!("{} run(s) in {}", runs.len(), run_dir.display());
    if incomplete > 0 {
        log::warn!("{incomplete} run(s) have missing artifacts");
    }
    Ok(Outcome::Success)
}

pub fn synth(settings: &Settings, n: usize, out: &Path) -> Result<Outcome> {
    let renderer = renderer(settings)?;
    let seed = settings.backend.seed.unwrap_or(0);
    let instances = a2r2::synth::instances(&renderer, n, seed)?;
    let path = a2r2::dataset::write_dataset(out, &instances)?;
    eprintln!("wrote {n} synthetic instance(s) to {}", path.display());
    Ok(Outcome::Success)
}

