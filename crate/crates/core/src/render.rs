//! LaTeX → raster rendering through an external toolchain.
//!
//! Two toolchains are supported:
//!
//! * `pdflatex` followed by a PDF rasterizer (ImageMagick `magick`/`convert`,
//!   `pdftoppm`, or Ghostscript). Every compile runs in its own temporary directory.
//! * matplotlib's mathtext engine, driven through long-lived `python3` worker
//!   processes. Used when no TeX installation is present.
//!
//! Successful renders are canvas-normalized (trimmed to ink, 4px white margin)
//! and cached by a digest of the source and render options, both in memory and
//! optionally on disk.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latex::{strip_model_output, LatexDoc};
use crate::raster::{RasterImage, WHITE};
use crate::sync::Semaphore;

pub const ENV_LATEX_BIN: &str = "A2R2_LATEX_BIN";
pub const ENV_RASTER_BIN: &str = "A2R2_RASTER_BIN";
pub const ENV_CACHE_DIR: &str = "A2R2_CACHE_DIR";

/// Pixels darker than this count as ink when trimming.
pub const INK_THRESHOLD: u8 = 250;
pub const CANVAS_MARGIN: usize = 4;
const LOG_TAIL_LINES: usize = 20;

/// Trims to the bounding box of ink pixels and adds a white margin.
/// An image without ink becomes an 8×8 white canvas.
pub fn normalize_canvas(img: &RasterImage) -> RasterImage {
    let h = img.height();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for row in 0..h {
        for (col, &v) in img.row(row).iter().enumerate() {
            if v < INK_THRESHOLD {
                bounds = Some(match bounds {
                    None => (row, row, col, col),
                    Some((t, b, l, r)) => (t.min(row), b.max(row), l.min(col), r.max(col)),
                });
            }
        }
    }
    let out = match bounds {
        None => RasterImage::white(2 * CANVAS_MARGIN, 2 * CANVAS_MARGIN).expect("non-empty canvas"),
        Some((top, bottom, left, right)) => img
            .crop(crate::raster::PixelRect {
                left,
                top,
                right: right + 1,
                bottom: bottom + 1,
            })
            .expect("ink bounds lie inside the image")
            .with_margin(CANVAS_MARGIN),
    };
    match img.dpi() {
        Some(dpi) => out.with_dpi(dpi),
        None => out,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub dpi: u32,
    pub timeout_secs: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            dpi: 200,
            timeout_secs: 30.0,
        }
    }
}

impl RenderOptions {
    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

#[derive(Clone, Debug)]
pub enum RenderOutcome {
    Success(Arc<RasterImage>),
    Failure { log_excerpt: String, timed_out: bool },
}

#[derive(Clone, Debug)]
pub struct RenderResult {
    pub outcome: RenderOutcome,
    pub source_hash: String,
    pub duration: Duration,
}

impl RenderResult {
    pub fn image(&self) -> Option<&Arc<RasterImage>> {
        match &self.outcome {
            RenderOutcome::Success(img) => Some(img),
            RenderOutcome::Failure { .. } => None,
        }
    }

    pub fn failure_log(&self) -> Option<&str> {
        match &self.outcome {
            RenderOutcome::Success(_) => None,
            RenderOutcome::Failure { log_excerpt, .. } => Some(log_excerpt),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterKind {
    Magick,
    Convert,
    Pdftoppm,
    Ghostscript,
}

impl RasterKind {
    fn from_path(path: &Path) -> Option<Self> {
        let name = path.file_stem()?.to_str()?.to_ascii_lowercase();
        match name.as_str() {
            "magick" => Some(RasterKind::Magick),
            "convert" => Some(RasterKind::Convert),
            "pdftoppm" => Some(RasterKind::Pdftoppm),
            "gs" | "gswin64c" | "gswin32c" => Some(RasterKind::Ghostscript),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Toolchain {
    Pdflatex {
        latex_bin: PathBuf,
        raster_bin: PathBuf,
        raster_kind: RasterKind,
    },
    Mathtext {
        python: PathBuf,
    },
}

/// Explicit toolchain settings; unset fields fall back to environment variables, then `PATH`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ToolchainSettings {
    pub latex_bin: Option<String>,
    pub raster_bin: Option<String>,
}

fn find_on_path(name: &str) -> Option<PathBuf> {
    let candidate = Path::new(name);
    if candidate.components().count() > 1 {
        return candidate.is_file().then(|| candidate.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(name))
            .find(|p| p.is_file())
    })
}

fn python_has_matplotlib(python: &Path) -> bool {
    Command::new(python)
        .args(["-c", "import matplotlib"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

impl Toolchain {
    /// Finds a usable toolchain. Explicit settings win over the environment.
    pub fn probe(settings: &ToolchainSettings) -> Result<Self> {
        let latex = settings
            .latex_bin
            .clone()
            .or_else(|| std::env::var(ENV_LATEX_BIN).ok())
            .filter(|s| !s.is_empty());
        let raster = settings
            .raster_bin
            .clone()
            .or_else(|| std::env::var(ENV_RASTER_BIN).ok())
            .filter(|s| !s.is_empty());

        match latex.as_deref() {
            Some("mathtext") => return Self::mathtext(None),
            Some(bin) if bin.contains("python") => return Self::mathtext(Some(bin)),
            Some(bin) => {
                let latex_bin = find_on_path(bin)
                    .ok_or_else(|| Error::ToolchainMissing(format!("LaTeX compiler {bin:?} not found")))?;
                return Self::pdflatex_with(latex_bin, raster.as_deref());
            }
            None => {}
        }
        if let Some(latex_bin) = find_on_path("pdflatex") {
            if let Ok(tc) = Self::pdflatex_with(latex_bin, raster.as_deref()) {
                return Ok(tc);
            }
        }
        Self::mathtext(None)
    }

    fn pdflatex_with(latex_bin: PathBuf, raster: Option<&str>) -> Result<Self> {
        let raster_bin = match raster {
            Some(bin) => find_on_path(bin)
                .ok_or_else(|| Error::ToolchainMissing(format!("rasterizer {bin:?} not found")))?,
            None => ["magick", "convert", "pdftoppm", "gs"]
                .iter()
                .find_map(|n| find_on_path(n))
                .ok_or_else(|| Error::ToolchainMissing("no PDF rasterizer (magick, convert, pdftoppm, gs) on PATH".into()))?,
        };
        let raster_kind = RasterKind::from_path(&raster_bin).ok_or_else(|| {
            Error::ToolchainMissing(format!("unrecognized rasterizer {}", raster_bin.display()))
        })?;
        Ok(Toolchain::Pdflatex {
            latex_bin,
            raster_bin,
            raster_kind,
        })
    }

    fn mathtext(python: Option<&str>) -> Result<Self> {
        let python = find_on_path(python.unwrap_or("python3"))
            .ok_or_else(|| Error::ToolchainMissing("no pdflatex and no python3 on PATH".into()))?;
        if !python_has_matplotlib(&python) {
            return Err(Error::ToolchainMissing(format!(
                "{} cannot import matplotlib and no pdflatex was found",
                python.display()
            )));
        }
        Ok(Toolchain::Mathtext { python })
    }

    /// Stable identifier mixed into cache digests.
    pub fn id(&self) -> &'static str {
        match self {
            Toolchain::Pdflatex { .. } => "pdflatex",
            Toolchain::Mathtext { .. } => "mathtext",
        }
    }
}

/// Standalone display-math document wrapped around a fragment.
pub fn wrap_document(source: &str) -> String {
    format!(
        "\\documentclass[preview,border=2pt]{{standalone}}\n\
\\usepackage{{amsmath}}\n\\usepackage{{amssymb}}\n\
\\begin{{document}}\n$\\displaystyle {source}$\n\\end{{document}}\n"
    )
}

pub fn source_hash(toolchain: &str, source: &str, opts: &RenderOptions) -> String {
    let mut h = Sha256::new();
    h.update(toolchain.as_bytes());
    h.update([0]);
    h.update(opts.dpi.to_le_bytes());
    h.update([0]);
    h.update(source.as_bytes());
    hex::encode(h.finalize())
}

enum Compiled {
    Png(Vec<u8>),
    Failed { log: String, timed_out: bool },
}

pub struct Renderer {
    toolchain: Toolchain,
    opts: RenderOptions,
    cache_dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, RenderResult>>,
    permits: Semaphore,
    workers: Mutex<Vec<MathtextWorker>>,
    compiles: AtomicUsize,
}

impl std::fmt::Debug for Renderer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Renderer")
            .field("toolchain", &self.toolchain)
            .field("opts", &self.opts)
            .field("cache_dir", &self.cache_dir)
            .finish_non_exhaustive()
    }
}

impl Renderer {
    pub fn new(toolchain: Toolchain, opts: RenderOptions, cache_dir: Option<PathBuf>, max_concurrent: usize) -> Result<Self> {
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            toolchain,
            opts,
            cache_dir,
            memory: Mutex::new(HashMap::new()),
            permits: Semaphore::new(max_concurrent),
            workers: Mutex::new(Vec::new()),
            compiles: AtomicUsize::new(0),
        })
    }

    /// Probes the toolchain and reads the cache directory from the environment when not given.
    pub fn from_env(settings: &ToolchainSettings, opts: RenderOptions, cache_dir: Option<PathBuf>, max_concurrent: usize) -> Result<Self> {
        let toolchain = Toolchain::probe(settings)?;
        let cache_dir = cache_dir.or_else(|| std::env::var_os(ENV_CACHE_DIR).map(PathBuf::from));
        Self::new(toolchain, opts, cache_dir, max_concurrent)
    }

    pub fn toolchain(&self) -> &Toolchain {
        &self.toolchain
    }

    pub fn options(&self) -> &RenderOptions {
        &self.opts
    }

    /// Number of compiles actually executed (cache hits excluded).
    pub fn compile_count(&self) -> usize {
        self.compiles.load(Ordering::SeqCst)
    }

    pub fn digest(&self, doc: &LatexDoc) -> String {
        source_hash(self.toolchain.id(), &strip_model_output(doc.source()), &self.opts)
    }

    pub fn render(&self, doc: &LatexDoc) -> RenderResult {
        let started = Instant::now();
        let source = strip_model_output(doc.source());
        let hash = source_hash(self.toolchain.id(), &source, &self.opts);

        if let Some(hit) = self.memory.lock().unwrap().get(&hash) {
            return hit.clone();
        }
        if let Some(outcome) = self.read_disk(&hash) {
            let result = RenderResult {
                outcome,
                source_hash: hash.clone(),
                duration: started.elapsed(),
            };
            self.memory.lock().unwrap().insert(hash, result.clone());
            return result;
        }

        let compiled = {
            let _permit = self.permits.acquire();
            self.compiles.fetch_add(1, Ordering::SeqCst);
            match &self.toolchain {
                Toolchain::Pdflatex {
                    latex_bin,
                    raster_bin,
                    raster_kind,
                } => compile_pdflatex(latex_bin, raster_bin, *raster_kind, &source, &self.opts),
                Toolchain::Mathtext { python } => self.compile_mathtext(python, &source),
            }
        };

        let outcome = match compiled {
            Compiled::Png(bytes) => match RasterImage::from_png_bytes(&bytes) {
                Ok(img) => RenderOutcome::Success(Arc::new(normalize_canvas(&img.with_dpi(self.opts.dpi)))),
                Err(e) => RenderOutcome::Failure {
                    log_excerpt: format!("rasterizer produced an unreadable image: {e}"),
                    timed_out: false,
                },
            },
            Compiled::Failed { log, timed_out } => RenderOutcome::Failure {
                log_excerpt: log,
                timed_out,
            },
        };
        let result = RenderResult {
            outcome,
            source_hash: hash.clone(),
            duration: started.elapsed(),
        };
        let transient = matches!(result.outcome, RenderOutcome::Failure { timed_out: true, .. });
        if !transient {
            self.write_disk(&hash, &result.outcome);
            self.memory.lock().unwrap().insert(hash, result.clone());
        }
        result
    }

    fn read_disk(&self, hash: &str) -> Option<RenderOutcome> {
        let dir = self.cache_dir.as_ref()?;
        let png = dir.join(format!("{hash}.png"));
        if let Ok(bytes) = std::fs::read(&png) {
            if let Ok(img) = RasterImage::from_png_bytes(&bytes) {
                return Some(RenderOutcome::Success(Arc::new(img.with_dpi(self.opts.dpi))));
            }
        }
        let fail = dir.join(format!("{hash}.fail"));
        std::fs::read_to_string(fail).ok().map(|log_excerpt| RenderOutcome::Failure {
            log_excerpt,
            timed_out: false,
        })
    }

    fn write_disk(&self, hash: &str, outcome: &RenderOutcome) {
        let Some(dir) = &self.cache_dir else { return };
        // write-then-rename so concurrent readers never see a partial file
        let (name, bytes) = match outcome {
            RenderOutcome::Success(img) => match img.to_png_bytes() {
                Ok(b) => (format!("{hash}.png"), b),
                Err(_) => return,
            },
            RenderOutcome::Failure { log_excerpt, .. } => (format!("{hash}.fail"), log_excerpt.clone().into_bytes()),
        };
        let Ok(mut tmp) = tempfile::NamedTempFile::new_in(dir) else { return };
        if tmp.write_all(&bytes).is_ok() {
            if let Err(e) = tmp.persist(dir.join(&name)) {
                log::warn!("could not persist render cache entry {name}: {e}");
            }
        }
    }

    fn compile_mathtext(&self, python: &Path, source: &str) -> Compiled {
        let worker = self.workers.lock().unwrap().pop();
        let mut worker = match worker {
            Some(w) => w,
            None => match MathtextWorker::spawn(python) {
                Ok(w) => w,
                Err(e) => {
                    return Compiled::Failed {
                        log: format!("could not start mathtext worker: {e}"),
                        timed_out: false,
                    }
                }
            },
        };
        match worker.render(source, self.opts.dpi, self.opts.timeout()) {
            WorkerReply::Done(compiled) => {
                self.workers.lock().unwrap().push(worker);
                compiled
            }
            WorkerReply::Dead(compiled) => compiled,
        }
    }
}

const MATHTEXT_WORKER: &str = r#"
import sys, json, io, base64, traceback
import matplotlib
matplotlib.use("Agg")
matplotlib.rcParams["mathtext.fontset"] = "cm"
matplotlib.rcParams["svg.hashsalt"] = "a2r2"
from matplotlib import mathtext
for line in sys.stdin:
    req = json.loads(line)
    src = " ".join(req["src"].split())
    try:
        if not src:
            raise ValueError("empty formula")
        buf = io.BytesIO()
        mathtext.math_to_image("$" + src + "$", buf, dpi=req["dpi"], format="png")
        reply = {"ok": True, "png": base64.b64encode(buf.getvalue()).decode("ascii")}
    except Exception as exc:
        reply = {"ok": False, "log": "".join(traceback.format_exception_only(type(exc), exc))}
    sys.stdout.write(json.dumps(reply) + "\n")
    sys.stdout.flush()
"#;

#[derive(Deserialize)]
struct WorkerMessage {
    ok: bool,
    #[serde(default)]
    png: Option<String>,
    #[serde(default)]
    log: Option<String>,
}

struct MathtextWorker {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<String>,
}

enum WorkerReply {
    Done(Compiled),
    Dead(Compiled),
}

impl MathtextWorker {
    fn spawn(python: &Path) -> std::io::Result<Self> {
        let mut child = Command::new(python)
            .args(["-u", "-c", MATHTEXT_WORKER])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, replies) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, replies })
    }

    fn render(&mut self, source: &str, dpi: u32, timeout: Duration) -> WorkerReply {
        let request = serde_json::json!({ "src": source, "dpi": dpi }).to_string();
        if writeln!(self.stdin, "{request}").and_then(|_| self.stdin.flush()).is_err() {
            return self.dead("mathtext worker closed its input".into(), false);
        }
        match self.replies.recv_timeout(timeout) {
            Ok(line) => match serde_json::from_str::<WorkerMessage>(&line) {
                Ok(msg) if msg.ok => match msg.png.as_deref().map(|p| base64::engine::general_purpose::STANDARD.decode(p)) {
                    Some(Ok(bytes)) => WorkerReply::Done(Compiled::Png(bytes)),
                    _ => WorkerReply::Done(Compiled::Failed {
                        log: "mathtext worker returned no image".into(),
                        timed_out: false,
                    }),
                },
                Ok(msg) => WorkerReply::Done(Compiled::Failed {
                    log: tail_lines(msg.log.as_deref().unwrap_or("mathtext error"), LOG_TAIL_LINES),
                    timed_out: false,
                }),
                Err(e) => self.dead(format!("malformed worker reply: {e}"), false),
            },
            Err(RecvTimeoutError::Timeout) => self.dead(format!("timeout after {:.1}s", timeout.as_secs_f64()), true),
            Err(RecvTimeoutError::Disconnected) => self.dead("mathtext worker exited".into(), false),
        }
    }

    fn dead(&mut self, log: String, timed_out: bool) -> WorkerReply {
        let _ = self.child.kill();
        let _ = self.child.wait();
        WorkerReply::Dead(Compiled::Failed { log, timed_out })
    }
}

impl Drop for MathtextWorker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn tail_lines(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

/// Runs a command with a deadline. Returns (success, combined output, timed out).
fn run_with_timeout(cmd: &mut Command, timeout: Duration) -> std::io::Result<(bool, String, bool)> {
    let out_file = tempfile::tempfile()?;
    let err_file = out_file.try_clone()?;
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::from(out_file.try_clone()?))
        .stderr(Stdio::from(err_file))
        .spawn()?;
    let deadline = Instant::now() + timeout;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let mut output = String::new();
    let mut f = out_file;
    use std::io::{Read, Seek, SeekFrom};
    f.seek(SeekFrom::Start(0))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    output.push_str(&String::from_utf8_lossy(&bytes));
    Ok(match status {
        Some(s) => (s.success(), output, false),
        None => (false, output, true),
    })
}

fn compile_pdflatex(latex_bin: &Path, raster_bin: &Path, kind: RasterKind, source: &str, opts: &RenderOptions) -> Compiled {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            return Compiled::Failed {
                log: format!("could not create build directory: {e}"),
                timed_out: false,
            }
        }
    };
    let tex = dir.path().join("doc.tex");
    if let Err(e) = std::fs::write(&tex, wrap_document(source)) {
        return Compiled::Failed {
            log: format!("could not write {}: {e}", tex.display()),
            timed_out: false,
        };
    }
    let started = Instant::now();
    let mut latex = Command::new(latex_bin);
    latex
        .args(["-interaction=nonstopmode", "-halt-on-error", "-no-shell-escape", "doc.tex"])
        .current_dir(dir.path());
    match run_with_timeout(&mut latex, opts.timeout()) {
        Err(e) => {
            return Compiled::Failed {
                log: format!("could not run {}: {e}", latex_bin.display()),
                timed_out: false,
            }
        }
        Ok((_, output, true)) => {
            return Compiled::Failed {
                log: format!("timeout after {:.1}s\n{}", opts.timeout_secs, tail_lines(&output, LOG_TAIL_LINES)),
                timed_out: true,
            }
        }
        Ok((false, output, false)) => {
            let log = std::fs::read_to_string(dir.path().join("doc.log")).unwrap_or(output);
            let mut excerpt = tail_lines(&log, LOG_TAIL_LINES);
            if excerpt.trim().is_empty() {
                excerpt = format!("{} exited with an error", latex_bin.display());
            }
            return Compiled::Failed {
                log: excerpt,
                timed_out: false,
            };
        }
        Ok((true, _, false)) => {}
    }

    let remaining = opts.timeout().saturating_sub(started.elapsed()).max(Duration::from_millis(1));
    let dpi = opts.dpi.to_string();
    let mut raster = Command::new(raster_bin);
    raster.current_dir(dir.path());
    match kind {
        RasterKind::Magick | RasterKind::Convert => {
            raster.args([
                "-density", &dpi, "doc.pdf[0]", "-background", "white", "-alpha", "remove", "-colorspace", "Gray",
                "out.png",
            ]);
        }
        RasterKind::Pdftoppm => {
            raster.args(["-r", &dpi, "-gray", "-png", "-singlefile", "doc.pdf", "out"]);
        }
        RasterKind::Ghostscript => {
            raster.args([
                "-q",
                "-dNOPAUSE",
                "-dBATCH",
                "-dSAFER",
                "-sDEVICE=pnggray",
                &format!("-r{dpi}"),
                "-sOutputFile=out.png",
                "doc.pdf",
            ]);
        }
    }
    match run_with_timeout(&mut raster, remaining) {
        Err(e) => Compiled::Failed {
            log: format!("could not run {}: {e}", raster_bin.display()),
            timed_out: false,
        },
        Ok((_, output, true)) => Compiled::Failed {
            log: format!("timeout after {:.1}s\n{}", opts.timeout_secs, tail_lines(&output, LOG_TAIL_LINES)),
            timed_out: true,
        },
        Ok((false, output, false)) => Compiled::Failed {
            log: tail_lines(&output, LOG_TAIL_LINES),
            timed_out: false,
        },
        Ok((true, output, false)) => match std::fs::read(dir.path().join("out.png")) {
            Ok(bytes) => Compiled::Png(bytes),
            Err(e) => Compiled::Failed {
                log: format!("rasterizer wrote no image ({e})\n{}", tail_lines(&output, LOG_TAIL_LINES)),
                timed_out: false,
            },
        },
    }
}

/// Background fill used for placeholder images when a render is unavailable.
pub fn blank_like(img: &RasterImage) -> RasterImage {
    RasterImage::filled(img.width(), img.height(), WHITE).expect("same dimensions as a valid image")
}
