//! Sketch preference scoring and the reward/policy objectives used to build
//! fine-tuning datasets. Scores and rewards are plain scalars.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::edge::word_count;
use crate::ensemble::rouge_l;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceWeights {
    /// Weight on the inverse sketch length.
    pub beta1: f64,
    /// Weight on ROUGE-L of the expanded answer.
    pub beta2: f64,
}

impl PreferenceWeights {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        let w = PreferenceWeights { beta1, beta2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.beta1) || !ok(self.beta2) || (self.beta1 == 0.0 && self.beta2 == 0.0) {
            return Err(Error::Config(format!("invalid preference weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchPair {
    pub input_text: String,
    pub sketch_a: String,
    pub sketch_b: String,
    pub full_answer_a: String,
    pub full_answer_b: String,
    pub reference_answer: String,
}

/// One preference record, serialized with the dataset field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "winner")]
    pub winner_sketch: String,
    #[serde(rename = "loser")]
    pub loser_sketch: String,
    pub winner_score: f64,
    pub loser_score: f64,
}

/// `beta1 / words(sketch) + beta2 · ROUGE-L(reference, expanded)`.
pub fn sketch_score(sketch: &str, expanded: &str, reference: &str, w: &PreferenceWeights) -> Result<f64> {
    let len = word_count(sketch);
    if len == 0 {
        return Err(Error::InvalidInput("sketch is empty".into()));
    }
    Ok(w.beta1 / len as f64 + w.beta2 * rouge_l(reference, expanded))
}

/// Higher score wins; ties go to the shorter sketch, then to sketch A.
pub fn label_pair(pair: &SketchPair, w: &PreferenceWeights) -> Result<PreferenceTriplet> {
    let a = sketch_score(&pair.sketch_a, &pair.full_answer_a, &pair.reference_answer, w)?;
    let b = sketch_score(&pair.sketch_b, &pair.full_answer_b, &pair.reference_answer, w)?;
    let a_wins = a > b || (a == b && word_count(&pair.sketch_a) <= word_count(&pair.sketch_b));
    let (winner, loser, ws, ls) = if a_wins {
        (&pair.sketch_a, &pair.sketch_b, a, b)
    } else {
        (&pair.sketch_b, &pair.sketch_a, b, a)
    };
    Ok(PreferenceTriplet {
        input_text: pair.input_text.clone(),
        winner_sketch: winner.clone(),
        loser_sketch: loser.clone(),
        winner_score: ws,
        loser_score: ls,
    })
}

/// `-ln σ(winner - loser)`, computed as `softplus(loser - winner)`.
pub fn rm_pairwise_loss(reward_winner: f64, reward_loser: f64) -> f64 {
    let x = reward_loser - reward_winner;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(1-γ)·reward - γ·KL(policy ‖ sft)` with natural logs and `0·ln 0 = 0`.
pub fn kl_regularized_objective(reward_expectation: f64, policy: &[f64], sft: &[f64], gamma: f64) -> Result<f64> {
    if policy.len() != sft.len() || policy.is_empty() {
        return Err(Error::InvalidInput("distributions must share a non-empty support".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("gamma {gamma} outside [0,1]")));
    }
    for d in [policy, sft] {
        if d.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("not a probability distribution".into()));
        }
    }
    let mut kl = 0.0;
    for (&p, &q) in policy.iter().zip(sft) {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Err(Error::DivergenceUndefined("policy has mass outside the reference support".into()));
        }
        kl += p * (p / q).ln();
    }
    Ok((1.0 - gamma) * reward_expectation - gamma * kl)
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<SketchPair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SketchPair = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("line {}: {e}", i + 1)))?;
        if pair.sketch_a.trim().is_empty() || pair.sketch_b.trim().is_empty() {
            return Err(Error::InvalidInput(format!("line {}: empty sketch", i + 1)));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_triplets<W: Write>(mut writer: W, triplets: &[PreferenceTriplet]) -> Result<()> {
    for t in triplets {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
