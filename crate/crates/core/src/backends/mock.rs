//! Deterministic synthetic generator.
//!
//! Each request seed names a hidden "latent answer": an endless stream of
//! content words. Full answers are a prefix of that stream, sketches pick every
//! `expansion_factor`-th latent word, and expansions re-inflate sketch
//! sentences with filler words. Tokens are whitespace words.
//!
//! Token log-probabilities are `-(1 - quality) * E` with `E ~ Exp(1)`, so the
//! mean log-probability is `-(1 - quality)` and quality 1 yields probability 1
//! for every token.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::{Backend, GenerationRequest, GenerationResult, Role};
use crate::edge::{parse_expansion_prompt, split_sentences};
use crate::error::{Error, Result};
use crate::util::{fnv1a64, mix_seed};
use crate::Tokens;

const SKETCH_JITTER: i64 = 10;
const LATENT_TAG: u64 = 0x6c61_7465_6e74;
const SENTENCE_TAG: u64 = 0x7365_6e74;

const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "pa", "de", "gu", "fi", "ho", "ja", "bu"];
const FILLERS: [&str; 16] = ["the", "of", "and", "to", "a", "in", "is", "that", "for", "with", "as", "on", "by", "this", "it", "be"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModelSpec {
    pub model_id: String,
    pub tokens_per_second: f64,
    /// In [0, 1]; drives log-probabilities and how faithfully content is kept.
    pub quality: f64,
    /// Output tokens per sketch word.
    pub expansion_factor: f64,
    #[serde(default = "one")]
    pub samples_per_request: u32,
}

fn one() -> u32 {
    1
}

impl MockModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tokens_per_second.is_finite() && self.tokens_per_second > 0.0) {
            return Err(Error::Config(format!("{}: tokens_per_second must be > 0", self.model_id)));
        }
        if !(self.expansion_factor.is_finite() && self.expansion_factor > 0.0) {
            return Err(Error::Config(format!("{}: expansion_factor must be > 0", self.model_id)));
        }
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(Error::Config(format!("{}: quality must be in [0,1]", self.model_id)));
        }
        if self.samples_per_request == 0 {
            return Err(Error::Config(format!("{}: samples_per_request must be >= 1", self.model_id)));
        }
        Ok(())
    }

    /// Seconds per generated token.
    pub fn per_token_s(&self) -> f64 {
        1.0 / self.tokens_per_second
    }
}

fn content_word(index: u32) -> String {
    let i = index as usize;
    [SYLLABLES[i & 15], SYLLABLES[(i >> 4) & 15], SYLLABLES[(i >> 8) & 15]].concat()
}

fn latent_words(seed: u64, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, LATENT_TAG]));
    (0..count).map(|_| content_word(rng.random_range(0..4096))).collect()
}

/// Joins words into sentences of `min..=max` words, each ending with a period.
fn punctuate(words: &[String], rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < words.len() {
        let mut take = rng.random_range(min..=max);
        if words.len() - i - take.min(words.len() - i) < min / 2 {
            take = words.len() - i;
        }
        let end = (i + take).min(words.len());
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&words[i..end].join(" "));
        out.push('.');
        i = end;
    }
    out
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    FILLERS[rng.random_range(0..FILLERS.len())].to_string()
}

fn strip_word(w: &str) -> String {
    w.chars().filter(|c| c.is_alphanumeric()).collect()
}

/// Expands one sentence to `round(words * factor)` tokens.
fn expand_sentence(sentence: &str, factor: f64, keep_p: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let words: Vec<String> = sentence.split_whitespace().map(strip_word).filter(|w| !w.is_empty()).collect();
    let mut out = Vec::new();
    for (k, w) in words.iter().enumerate() {
        let target = ((k + 1) as f64 * factor).round() as usize;
        if out.len() >= target {
            continue;
        }
        out.push(if rng.random_bool(keep_p) { w.clone() } else { filler(rng) });
        while out.len() < target {
            out.push(filler(rng));
        }
    }
    out
}

fn sample_rng(req: &GenerationRequest, spec: &MockModelSpec, sample: u32) -> ChaCha8Rng {
    let role = match req.role {
        Role::Sketch => 1,
        Role::FullAnswer => 2,
        Role::Expansion => 3,
    };
    ChaCha8Rng::seed_from_u64(mix_seed(&[
        req.seed,
        fnv1a64(req.prompt.as_bytes()),
        fnv1a64(spec.model_id.as_bytes()),
        u64::from(sample),
        role,
    ]))
}

/// Generates `samples_per_request` results. Pure in (request, spec).
pub fn generate(req: &GenerationRequest, spec: &MockModelSpec) -> Vec<GenerationResult> {
    (0..spec.samples_per_request.max(1)).map(|s| generate_one(req, spec, s)).collect()
}

fn generate_one(req: &GenerationRequest, spec: &MockModelSpec, sample: u32) -> GenerationResult {
    let mut rng = sample_rng(req, spec, sample);
    let keep_p = (0.5 + 0.5 * spec.quality).clamp(0.0, 1.0);
    let text = match req.role {
        Role::Sketch => {
            let jitter = rng.random_range(-SKETCH_JITTER..=SKETCH_JITTER);
            let n = (i64::from(req.max_tokens) + jitter).max(1) as usize;
            let stride = spec.expansion_factor.max(1.0);
            let latent = latent_words(req.seed, ((n as f64) * stride).ceil() as usize + 1);
            let words: Vec<String> = (0..n).map(|j| latent[(j as f64 * stride).floor() as usize].clone()).collect();
            let mut srng = ChaCha8Rng::seed_from_u64(mix_seed(&[req.seed, SENTENCE_TAG, n as u64]));
            punctuate(&words, &mut srng, 6, 14)
        }
        Role::FullAnswer => {
            let n = req.max_tokens.max(1) as usize;
            let words: Vec<String> = latent_words(req.seed, n)
                .into_iter()
                .map(|w| if rng.random_bool(keep_p) { w } else { filler(&mut rng) })
                .collect();
            punctuate(&words, &mut rng, 10, 20)
        }
        Role::Expansion => {
            let body = parse_expansion_prompt(&req.prompt).unwrap_or(&req.prompt);
            let mut lines = Vec::new();
            for sentence in split_sentences(body) {
                let words = expand_sentence(&sentence, spec.expansion_factor, keep_p, &mut rng);
                if !words.is_empty() {
                    lines.push(format!("{}.", words.join(" ")));
                }
            }
            if lines.is_empty() {
                lines.push(format!("{}.", filler(&mut rng)));
            }
            lines.join("\n")
        }
    };
    let generated = text.split_whitespace().count();
    let token_logprobs: Vec<f64> = (0..generated)
        .map(|_| {
            let e: f64 = rng.sample(Exp1);
            -(1.0 - spec.quality) * e
        })
        .collect();
    GenerationResult {
        text,
        token_logprobs,
        generated_tokens: generated as Tokens,
        wall_time_s: generated as f64 / spec.tokens_per_second,
        degraded: false,
    }
}

/// Mock backend holding one spec per model id.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    models: BTreeMap<String, MockModelSpec>,
}

impl MockBackend {
    pub fn new(specs: impl IntoIterator<Item = MockModelSpec>) -> Result<Self> {
        let mut models = BTreeMap::new();
        for s in specs {
            s.validate()?;
            if models.insert(s.model_id.clone(), s).is_some() {
                return Err(Error::Config("duplicate mock model id".into()));
            }
        }
        Ok(MockBackend { models })
    }

    pub fn spec(&self, model_id: &str) -> Option<&MockModelSpec> {
        self.models.get(model_id)
    }
}

impl Backend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GenerationResult>> {
        let spec = self
            .models
            .get(&req.model_id)
            .ok_or_else(|| Error::Config(format!("unknown mock model {}", req.model_id)))?;
        Ok(generate(req, spec))
    }
}
