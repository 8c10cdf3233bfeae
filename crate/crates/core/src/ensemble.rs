//! Candidate scoring and answer selection.
//!
//! Confidence blends three signals: the geometric-mean token probability
//! (inverse perplexity), the response length normalised within the job, and
//! the ROUGE-L agreement between the response and the sketch it expanded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An expanded answer with its per-token natural-log probabilities.
///
/// An empty `token_logprobs` means the backend did not report them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
    pub model_id: String,
    #[serde(default)]
    pub job_id: u64,
    /// Generated token count; defaults to the logprob count, else the word count.
    #[serde(default)]
    pub token_count: Option<usize>,
}

impl CandidateResponse {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>, model_id: impl Into<String>, job_id: u64) -> Self {
        CandidateResponse { text: text.into(), token_logprobs, model_id: model_id.into(), job_id, token_count: None }
    }

    pub fn len_tokens(&self) -> usize {
        self.token_count.unwrap_or_else(|| {
            if self.token_logprobs.is_empty() {
                self.text.split_whitespace().count()
            } else {
                self.token_logprobs.len()
            }
        })
    }

    pub fn has_logprobs(&self) -> bool {
        !self.token_logprobs.is_empty()
    }
}

/// Lowercased whitespace tokens with punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Longest common subsequence length, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over word tokens.
pub fn rouge_l(reference: &str, candidate: &str) -> f64 {
    rouge_l_tokens(&tokenize(reference), &tokenize(candidate))
}

pub fn rouge_l_tokens<T: PartialEq>(reference: &[T], candidate: &[T]) -> f64 {
    let lcs = lcs_len(reference, candidate);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// `exp(mean ln p)`, equal to `2^(mean log2 p)` and to `1 / perplexity`.
pub fn geo_prob(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::InvalidInput("geo_prob needs at least one token".into()));
    }
    if let Some(bad) = token_logprobs.iter().find(|&&lp| !(lp <= 0.0)) {
        return Err(Error::InvalidInput(format!("log-probability must be <= 0, got {bad}")));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(mean.exp())
}

/// `|ŷ| / max |ŷ|` within one job's candidate set.
pub fn length_norm(candidates: &[CandidateResponse]) -> Vec<f64> {
    let max = candidates.iter().map(CandidateResponse::len_tokens).max().unwrap_or(0);
    candidates
        .iter()
        .map(|c| if max == 0 { 1.0 } else { c.len_tokens() as f64 / max as f64 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for ConfidenceWeights {
    fn default() -> Self {
        ConfidenceWeights { alpha1: 0.4, alpha2: 0.2 }
    }
}

impl ConfidenceWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        let w = ConfidenceWeights { alpha1, alpha2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| (0.0..=1.0).contains(&a);
        if ok(self.alpha1) && ok(self.alpha2) && self.alpha1 + self.alpha2 <= 1.0 + 1e-12 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "weights need alpha1, alpha2 in [0,1] and alpha1 + alpha2 <= 1, got ({}, {})",
                self.alpha1, self.alpha2
            )))
        }
    }

    pub fn rouge_weight(&self) -> f64 {
        (1.0 - self.alpha1 - self.alpha2).max(0.0)
    }
}

/// Per-candidate score components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBreakdown {
    pub model_id: String,
    /// `None` when the backend reported no log-probabilities.
    pub geo_prob: Option<f64>,
    pub norm: f64,
    pub rouge: f64,
    pub confidence: f64,
}

/// `α1·geo + α2·norm + (1−α1−α2)·rouge`.
pub fn combine(geo: f64, norm: f64, rouge: f64, w: &ConfidenceWeights) -> f64 {
    w.alpha1 * geo + w.alpha2 * norm + w.rouge_weight() * rouge
}

/// Confidence of one candidate against the sketch it expanded.
pub fn confidence(candidate: &CandidateResponse, sketch: &str, norm: f64, w: &ConfidenceWeights) -> Result<f64> {
    Ok(Scorer::new(*w)?.breakdown(candidate, sketch, norm)?.confidence)
}

/// Confidence scoring with optional per-model geo-prob offsets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    pub weights: ConfidenceWeights,
    /// Added to a model's geo-prob before weighting (clamped to [0,1]). Empty by default.
    #[serde(default)]
    pub calibration: BTreeMap<String, f64>,
}

impl Scorer {
    pub fn new(weights: ConfidenceWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Scorer { weights, calibration: BTreeMap::new() })
    }

    pub fn breakdown(&self, candidate: &CandidateResponse, sketch: &str, norm: f64) -> Result<ConfidenceBreakdown> {
        let rouge = rouge_l(sketch, &candidate.text);
        let w = &self.weights;
        let (geo, conf) = if candidate.has_logprobs() {
            let offset = self.calibration.get(&candidate.model_id).copied().unwrap_or(0.0);
            let g = (geo_prob(&candidate.token_logprobs)? + offset).clamp(0.0, 1.0);
            (Some(g), combine(g, norm, rouge, w))
        } else {
            // no log-probabilities: spread alpha1 over the other two terms in proportion
            let rest = 1.0 - w.alpha1;
            let conf = if rest <= 0.0 {
                rouge
            } else {
                (w.alpha2 * norm + w.rouge_weight() * rouge) / rest
            };
            (None, conf)
        };
        Ok(ConfidenceBreakdown { model_id: candidate.model_id.clone(), geo_prob: geo, norm, rouge, confidence: conf })
    }

    /// Scores every candidate of one job and returns the winner's index.
    ///
    /// Ties go to the longer response, then to the lexicographically smaller
    /// model id, then to the earlier position.
    pub fn select_best(&self, candidates: &[CandidateResponse], sketch: &str) -> Result<(usize, Vec<ConfidenceBreakdown>)> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("no candidates to select from".into()));
        }
        let norms = length_norm(candidates);
        let scored = candidates
            .iter()
            .zip(&norms)
            .map(|(c, &n)| self.breakdown(c, sketch, n))
            .collect::<Result<Vec<_>>>()?;
        let best = (0..candidates.len())
            .max_by(|&a, &b| {
                scored[a]
                    .confidence
                    .total_cmp(&scored[b].confidence)
                    .then_with(|| candidates[a].len_tokens().cmp(&candidates[b].len_tokens()))
                    .then_with(|| candidates[b].model_id.cmp(&candidates[a].model_id))
                    .then_with(|| b.cmp(&a))
            })
            .expect("non-empty");
        Ok((best, scored))
    }
}

/// Highest-confidence candidate under the default (uncalibrated) scorer.
pub fn select_best<'a>(
    candidates: &'a [CandidateResponse],
    sketch: &str,
    w: &ConfidenceWeights,
) -> Result<&'a CandidateResponse> {
    let (i, _) = Scorer::new(*w)?.select_best(candidates, sketch)?;
    Ok(&candidates[i])
}

/// Per-job scoring report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringReport {
    pub job_id: u64,
    pub candidates: Vec<ConfidenceBreakdown>,
    pub winner: usize,
    pub winner_model: String,
}

impl ScoringReport {
    pub fn build(scorer: &Scorer, job_id: u64, candidates: &[CandidateResponse], sketch: &str) -> Result<Self> {
        let (winner, scored) = scorer.select_best(candidates, sketch)?;
        Ok(ScoringReport { job_id, winner_model: candidates[winner].model_id.clone(), candidates: scored, winner })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook full-table LCS, kept separate from the rolling-row version.
    fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
            }
        }
        t[a.len()][b.len()]
    }

    fn cand(text: &str, lp: Vec<f64>, model: &str) -> CandidateResponse {
        CandidateResponse::new(text, lp, model, 1)
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta"), 0.0);
        assert!((rouge_l("the cat sat", "the cat ran") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge_l("", "x"), 0.0);
        assert_eq!(rouge_l("The, CAT!", "the cat"), 1.0);
    }

    #[test]
    fn geo_prob_examples() {
        assert_eq!(geo_prob(&[0.0, 0.0]).unwrap(), 1.0);
        assert!((geo_prob(&[0.5f64.ln(); 7]).unwrap() - 0.5).abs() < 1e-12);
        assert!((geo_prob(&[0.25f64.ln(), 0.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(geo_prob(&[]).is_err());
        assert!(geo_prob(&[0.1]).is_err());
        assert!(geo_prob(&[f64::NAN]).is_err());
    }

    #[test]
    fn length_norm_examples() {
        let a = cand("x", vec![-0.1; 100], "a");
        let b = cand("y", vec![-0.1; 200], "b");
        assert_eq!(length_norm(&[a.clone(), b.clone()]), vec![0.5, 1.0]);
        assert_eq!(length_norm(std::slice::from_ref(&a)), vec![1.0]);
        assert_eq!(length_norm(&[a.clone(), a]), vec![1.0, 1.0]);
    }

    #[test]
    fn confidence_worked_example() {
        let w = ConfidenceWeights::new(0.4, 0.2).unwrap();
        // 0.4*0.5 + 0.2*1.0 + 0.4*0.6
        assert!((combine(0.5, 1.0, 0.6, &w) - 0.64).abs() < 1e-12);
        let only_geo = ConfidenceWeights::new(1.0, 0.0).unwrap();
        let c = cand("the dog", vec![0.5f64.ln(), 0.5f64.ln()], "m");
        assert!((confidence(&c, "a cat", 0.3, &only_geo).unwrap() - 0.5).abs() < 1e-12);
        for (a1, a2) in [(0.0, 0.0), (0.3, 0.3), (0.5, 0.5), (0.1, 0.9)] {
            let w = ConfidenceWeights::new(a1, a2).unwrap();
            assert!((combine(1.0, 1.0, 1.0, &w) - 1.0).abs() < 1e-12);
        }
        assert!(ConfidenceWeights::new(0.7, 0.4).is_err());
    }

    #[test]
    fn missing_logprobs_redistributes_alpha1() {
        let w = ConfidenceWeights::new(0.4, 0.2).unwrap();
        let s = Scorer::new(w).unwrap();
        let c = cand("a b c d", vec![], "remote");
        let b = s.breakdown(&c, "a b c d", 0.5).unwrap();
        assert_eq!(b.geo_prob, None);
        assert!((b.confidence - (0.2 * 0.5 + 0.4 * 1.0) / 0.6).abs() < 1e-12);
    }

    #[test]
    fn select_best_examples() {
        let w = ConfidenceWeights::default();
        let only = [cand("a", vec![-0.1], "m")];
        assert_eq!(select_best(&only, "a", &w).unwrap().model_id, "m");

        let good = cand("a b c", vec![0.0; 3], "good");
        let bad = cand("x", vec![-2.0], "bad");
        assert_eq!(select_best(&[bad, good], "a b c", &w).unwrap().model_id, "good");
    }

    #[test]
    fn select_best_hand_computed_three() {
        // components picked so the confidences are 0.64, 0.58, 0.61 under alpha (0.4, 0.2):
        //   0.2 + 0.2*1.0 + 0.4*0.6   = 0.64
        //   0.2 + 0.2*0.5 + 0.4*0.7   = 0.58
        //   0.2 + 0.2*0.5 + 0.4*0.775 = 0.61
        let w = ConfidenceWeights::default();
        let confs = [combine(0.5, 1.0, 0.6, &w), combine(0.5, 0.5, 0.7, &w), combine(0.5, 0.5, 0.775, &w)];
        assert!((confs[0] - 0.64).abs() < 1e-12);
        assert!((confs[1] - 0.58).abs() < 1e-12);
        assert!((confs[2] - 0.61).abs() < 1e-12);
        let argmax = (0..3).max_by(|&a, &b| confs[a].total_cmp(&confs[b])).unwrap();
        assert_eq!(argmax, 0);
    }

    #[test]
    fn tie_breaks() {
        let w = ConfidenceWeights::new(1.0, 0.0).unwrap();
        let short = cand("a", vec![-0.5], "z");
        let long = cand("a b", vec![-0.5, -0.5], "y");
        assert_eq!(select_best(&[short, long.clone()], "a", &w).unwrap().model_id, "y");
        let also_long = cand("c d", vec![-0.5, -0.5], "b");
        assert_eq!(select_best(&[long, also_long], "a", &w).unwrap().model_id, "b");
        assert!(select_best(&[], "a", &w).is_err());
    }

    #[test]
    fn calibration_offsets_shift_geo_prob() {
        let mut s = Scorer::new(ConfidenceWeights::new(1.0, 0.0).unwrap()).unwrap();
        s.calibration.insert("llama".into(), 0.2);
        let c = cand("a", vec![0.5f64.ln()], "llama");
        assert!((s.breakdown(&c, "a", 1.0).unwrap().confidence - 0.7).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 512, ..ProptestConfig::default() })]

        #[test]
        fn lcs_matches_oracle(a in prop::collection::vec(0u8..5, 0..12), b in prop::collection::vec(0u8..5, 0..12)) {
            prop_assert_eq!(lcs_len(&a, &b), lcs_oracle(&a, &b));
        }

        #[test]
        fn rouge_symmetric_for_equal_lengths(a in prop::collection::vec(0u8..4, 1..12), seed in prop::collection::vec(0u8..4, 12)) {
            let b: Vec<u8> = seed[..a.len()].to_vec();
            prop_assert_eq!(rouge_l_tokens(&a, &b), rouge_l_tokens(&b, &a));
        }

        #[test]
        fn confidence_monotone_in_components(
            a1 in 0.0f64..1.0, frac in 0.0f64..1.0,
            g in 0.0f64..1.0, n in 0.0f64..1.0, r in 0.0f64..1.0, d in 0.0f64..0.5,
        ) {
            let w = ConfidenceWeights { alpha1: a1, alpha2: (1.0 - a1) * frac };
            let base = combine(g, n, r, &w);
            prop_assert!(combine((g + d).min(1.0), n, r, &w) >= base - 1e-15);
            prop_assert!(combine(g, (n + d).min(1.0), r, &w) >= base - 1e-15);
            prop_assert!(combine(g, n, (r + d).min(1.0), &w) >= base - 1e-15);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
        }

        #[test]
        fn geo_prob_is_inverse_perplexity(ps in prop::collection::vec(0.001f64..1.0, 1..30)) {
            let lps: Vec<f64> = ps.iter().map(|p| p.ln()).collect();
            let n = ps.len() as f64;
            let perplexity = 2f64.powf(-ps.iter().map(|p| p.log2()).sum::<f64>() / n);
            prop_assert!((geo_prob(&lps).unwrap() - 1.0 / perplexity).abs() < 1e-12);
        }

        #[test]
        fn select_best_permutation_invariant(
            items in prop::collection::vec((1usize..8, -3.0f64..0.0, 0usize..6), 1..6),
            rot in 0usize..6,
        ) {
            let words = ["a", "b", "c", "d", "e", "f", "g", "h"];
            let cands: Vec<CandidateResponse> = items.iter().enumerate().map(|(i, &(len, lp, _))| {
                cand(&words[..len].join(" "), vec![lp; len], &format!("m{i}"))
            }).collect();
            let w = ConfidenceWeights::default();
            let a = select_best(&cands, "a c e", &w).unwrap().model_id.clone();
            let mut rotated = cands.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let b = select_best(&rotated, "a c e", &w).unwrap().model_id.clone();
            prop_assert_eq!(a, b);
        }
    }
}
