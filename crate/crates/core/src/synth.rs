//! Synthetic formula datasets for smoke tests and scripted experiments.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::latex::LatexDoc;
use crate::render::Renderer;

/// `@` is replaced by a letter, `#` by a digit 1..=9.
const TEMPLATES: &[&str] = &[
    r"\frac{@+@}{@-@} = @^{#} + @_{#} - # @",
    r"\sum_{@=1}^{@} @_{@} @^{#} = @ + @ - #",
    r"\int_{0}^{@} @(@) d@ = @ @ - @^{#} + #",
    r"\sqrt{@^{#}+@^{#}} \leq @ + @ + @ @ - #^{@}",
    r"@_{#} + @_{#} = \frac{@ + #}{@} \cdot @^{@} - #",
    r"\alpha @ + \beta @ = \gamma (@ - @) + # @ - @^{#} + @_{#}",
    r"\left( # + \frac{@}{@} \right)^{@} = @ + @_{#} + # @ @",
    r"@^{#} - # @ @ + @^{#} = (@ - @)(@ + #)",
];

const LETTERS: &[u8] = b"abcdfghkmnpqrstuvwxyz";

pub fn formula(rng: &mut impl Rng) -> String {
    let template = TEMPLATES.choose(rng).expect("templates are non-empty");
    template
        .chars()
        .map(|c| match c {
            '@' => (*LETTERS.choose(rng).unwrap() as char).to_string(),
            '#' => rng.random_range(1..=9).to_string(),
            other => other.to_string(),
        })
        .collect()
}

/// `n` distinct formulas, deterministic in `seed`.
pub fn formulas(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let f = formula(&mut rng);
        if seen.insert(f.clone()) {
            out.push(f);
        }
    }
    out
}

/// Renders `n` synthetic formulas into instances whose image is the render
/// of their ground truth. Ids are `syn-0000`, `syn-0001`, ...
pub fn instances(renderer: &Renderer, n: usize, seed: u64) -> Result<Vec<Instance>> {
    formulas(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, src)| {
            let doc = LatexDoc::new(src);
            let rendered = renderer.render(&doc);
            let image = rendered.image().ok_or_else(|| {
                Error::ToolchainMissing(format!(
                    "synthetic formula {:?} failed to render: {}",
                    doc.source(),
                    rendered.failure_log().unwrap_or("")
                ))
            })?;
            Ok(Instance {
                id: format!("syn-{i:04}"),
                image: image.as_ref().clone(),
                ground_truth: Some(doc),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = formulas(30, 5);
        assert_eq!(a, formulas(30, 5));
        assert_ne!(a, formulas(30, 6));
        let unique: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(unique.len(), 30);
    }

    #[test]
    fn enough_substitutable_tokens() {
        for f in formulas(200, 1) {
            let toks = crate::latex::tokenize_latex(&f);
            assert!(crate::backend::eligible_positions(&toks).len() >= 10, "{f}");
        }
    }
}
