//! Style prompt templates and the frozen prompt-text encoder.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{label_hash, CounterRng};

/// Built-in templates, one per style id.
pub const DEFAULT_TEMPLATES: &str = include_str!("../resources/prompts.txt");

/// Ordered prompt templates; line `i` is the template of style `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates(Vec<String>);

impl PromptTemplates {
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if lines.is_empty() {
            return Err(Error::Data("prompt template file is empty".into()));
        }
        Ok(Self(lines))
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("built-in templates are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.0.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, style: usize) -> Option<&str> {
        self.0.get(style).map(String::as_str)
    }

    pub fn style_of(&self, prompt: &str) -> Option<usize> {
        let p = prompt.trim();
        self.0.iter().position(|t| t == p)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

const HASH_BUCKETS: usize = 1024;
const ENCODER_SEED: u64 = 0x5EED_7E47;

/// Frozen deterministic prompt-text encoder: hashed bag of words projected
/// by a fixed seeded Gaussian matrix and normalized to unit length.
#[derive(Debug, Clone)]
pub struct PromptTextEncoder {
    dim: usize,
    /// Row-major `[HASH_BUCKETS, dim]`.
    projection: Vec<f64>,
}

impl PromptTextEncoder {
    pub fn new(dim: usize) -> Self {
        let mut rng = CounterRng::new(ENCODER_SEED, "prompt-text-encoder");
        let projection = (0..HASH_BUCKETS * dim).map(|_| rng.normal()).collect();
        Self { dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm embedding of `prompt`. Total over all strings; a string
    /// without words maps to the embedding of a reserved empty token.
    pub fn embed(&self, prompt: &str) -> Vec<f64> {
        let lower = prompt.to_lowercase();
        let mut words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            words.push("<empty>");
        }
        let mut out = vec![0.0; self.dim];
        for w in words {
            let bucket = (label_hash(w) % HASH_BUCKETS as u64) as usize;
            let row = &self.projection[bucket * self.dim..(bucket + 1) * self.dim];
            for (o, r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter_mut().for_each(|v| *v /= norm);
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_eight_styles() {
        let t = PromptTemplates::builtin();
        assert_eq!(t.len(), 8);
        assert_eq!(t.style_of(t.get(3).unwrap()), Some(3));
        assert_eq!(t.style_of("sing opera"), None);
    }

    #[test]
    fn embeddings_are_deterministic_unit_norm() {
        let enc = PromptTextEncoder::new(128);
        let a = enc.embed("speak in a cheerful bright upbeat tone");
        let b = enc.embed("speak in a cheerful bright upbeat tone");
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let e = enc.embed("");
        assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn builtin_templates_are_mutually_dissimilar() {
        let enc = PromptTextEncoder::new(128);
        let t = PromptTemplates::builtin();
        let embs: Vec<Vec<f64>> = t.iter().map(|p| enc.embed(p)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let c = cosine(&embs[i], &embs[j]);
                assert!(c < 0.5, "templates {i} and {j}: cosine {c}");
            }
        }
    }
}
