#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use a2r2::backend::{Backend, ScriptedBackend, ScriptedParams};
use a2r2::config::{PromptTemplates, RunConfig};
use a2r2::dataset::Instance;
use a2r2::pipeline::Pipeline;
use a2r2::record::RunResult;
use a2r2::render::{RenderOptions, Renderer, ToolchainSettings};

/// One renderer per test binary so compiles are shared through its cache.
pub fn renderer() -> &'static Renderer {
    static R: OnceLock<Renderer> = OnceLock::new();
    R.get_or_init(|| {
        Renderer::from_env(&ToolchainSettings::default(), RenderOptions { dpi: 100, ..Default::default() }, None, 4)
            .expect("a render toolchain")
    })
}

pub fn instances(n: usize, seed: u64) -> Vec<Instance> {
    a2r2::synth::instances(renderer(), n, seed).expect("synthetic formulas render")
}

pub fn mock(query: &str) -> Arc<dyn Backend> {
    Arc::new(ScriptedBackend::new(ScriptedParams::parse(query).unwrap()))
}

pub fn run(instance: &Instance, config: &RunConfig, query: &str) -> RunResult {
    let backend = mock(query);
    let prompts = PromptTemplates::default();
    Pipeline {
        config,
        prompts: &prompts,
        renderer: renderer(),
        backend: backend.as_ref(),
    }
    .run(instance)
}

pub fn residual(result: &RunResult, instance: &Instance) -> usize {
    let gt = instance.ground_truth.as_ref().unwrap();
    a2r2::metrics::levenshtein_seq(result.final_doc.tokens(), gt.tokens())
}
