//! The top-level config file: defaults < file < environment < `-o` overrides.

use std::path::{Path, PathBuf};

use a2r2::backend::HttpSettings;
use a2r2::config::{PromptTemplates, RunConfig};
use a2r2::curation::{CurationWeights, Direction};
use a2r2::render::{RenderOptions, ToolchainSettings, ENV_CACHE_DIR, ENV_LATEX_BIN, ENV_RASTER_BIN};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const ENV_BACKEND_URL: &str = "A2R2_BACKEND_URL";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub run: RunConfig,
    pub backend: BackendSection,
    pub render: RenderSection,
    pub prompts: PromptTemplates,
    pub curation: CurationSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// `mock:?k=v&...` or an http(s) base URL.
    pub endpoint: Option<String>,
    /// Replaces the scripted backend's seed; also seeds synthetic datasets.
    pub seed: Option<u64>,
    pub http: HttpSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub latex_bin: Option<String>,
    pub raster_bin: Option<String>,
    pub cache_dir: Option<String>,
    pub dpi: u32,
    pub timeout_secs: f64,
    pub max_concurrent: usize,
}

impl Default for RenderSection {
    fn default() -> Self {
        let opts = RenderOptions::default();
        Self {
            latex_bin: None,
            raster_bin: None,
            cache_dir: None,
            dpi: opts.dpi,
            timeout_secs: opts.timeout_secs,
            max_concurrent: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationSection {
    pub weights: CurationWeights,
    pub direction: Direction,
    pub k: usize,
}

impl Default for CurationSection {
    fn default() -> Self {
        Self {
            weights: CurationWeights::default(),
            direction: Direction::Ascending,
            k: 1100,
        }
    }
}

impl RenderSection {
    pub fn toolchain(&self) -> ToolchainSettings {
        ToolchainSettings {
            latex_bin: self.latex_bin.clone(),
            raster_bin: self.raster_bin.clone(),
        }
    }

    pub fn options(&self) -> RenderOptions {
        RenderOptions {
            dpi: self.dpi,
            timeout_secs: self.timeout_secs,
        }
    }

    pub fn cache_path(&self) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(PathBuf::from)
    }
}

/// Splits `key=value`, parsing the value as TOML and falling back to a bare string.
fn override_table(spec: &str) -> Result<toml::Table> {
    let (key, value) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        bail!("override {spec:?} has an empty key");
    }
    toml::from_str::<toml::Table>(&format!("{key} = {value}"))
        .or_else(|_| toml::from_str::<toml::Table>(&format!("{key} = {}", toml::Value::String(value.into()))))
        .with_context(|| format!("cannot parse override {spec:?}"))
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn env_nonempty(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|s| !s.is_empty())
}

impl Settings {
    /// Builds the effective settings. `seed` (from `--seed`) wins over everything.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        let env = [
            (ENV_BACKEND_URL, "backend.endpoint"),
            (ENV_LATEX_BIN, "render.latex_bin"),
            (ENV_RASTER_BIN, "render.raster_bin"),
            (ENV_CACHE_DIR, "render.cache_dir"),
        ];
        for (var, key) in env {
            if let Some(value) = env_nonempty(var) {
                merge(&mut table, override_table(&format!("{key}={}", toml::Value::String(value)))?);
            }
        }
        for spec in overrides {
            merge(&mut table, override_table(spec)?);
        }
        let mut settings: Settings = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        if seed.is_some() {
            settings.backend.seed = seed;
        }
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.prompts.validate()?;
        self.curation.weights.validate()?;
        if self.render.max_concurrent == 0 {
            bail!("render.max_concurrent must be positive");
        }
        if self.render.dpi == 0 {
            bail!("render.dpi must be positive");
        }
        Ok(())
    }

    pub fn endpoint(&self) -> Result<&str> {
        self.backend
            .endpoint
            .as_deref()
            .with_context(|| format!("no backend configured; set backend.endpoint or {ENV_BACKEND_URL}"))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the effective settings as `config.toml` in `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[run]\nt_max = 4\npercentile = 90.0\n").unwrap();
        let s = Settings::load(Some(&path), &["run.t_max=3".into()], None).unwrap();
        assert_eq!(s.run.t_max, 3);
        assert_eq!(s.run.percentile, 90.0);
    }

    #[test]
    fn override_values_parse_as_toml_or_string() {
        let s = Settings::load(
            None,
            &[
                "backend.endpoint=mock:?seed=1&errors=2".into(),
                "run.layer_range=[2, 5]".into(),
                "run.strategy=best_of_n".into(),
                "curation.k=50".into(),
            ],
            Some(7),
        )
        .unwrap();
        assert_eq!(s.backend.endpoint.as_deref(), Some("mock:?seed=1&errors=2"));
        assert_eq!(s.run.layer_range, [2, 5]);
        assert_eq!(s.run.strategy, a2r2::config::Strategy::BestOfN);
        assert_eq!(s.backend.seed, Some(7));
        assert_eq!(s.curation.k, 50);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Settings::load(None, &["run.t_maxx=3".into()], None).is_err());
        assert!(Settings::load(None, &["run.t_max=0".into()], None).is_err());
        assert!(Settings::load(None, &["noequals".into()], None).is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let s = Settings::load(None, &["run.overlays=true".into(), "backend.endpoint=mock:?errors=1".into()], Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.persist(dir.path()).unwrap();
        let back = Settings::load(Some(&dir.path().join("config.toml")), &[], None).unwrap();
        assert_eq!(back, s);
    }
}
