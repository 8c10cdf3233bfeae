//! Cloud-side per-query decisions: answer-length prediction, sketch length
//! selection under the end-to-end latency constraint, and lexicographic
//! ranking of whole configurations.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cost_model::{e2e_feasible, CostCoefficient, EdgePool, LatencyModel, NetworkModel};
use crate::error::{Error, Result};
use crate::profiler::RuntimeSnapshot;
use crate::util::mix_seed;
use crate::Tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub text: String,
    pub arrival_time_s: f64,
    #[serde(default = "generic")]
    pub category: String,
    /// Ground truth from the trace; the scheduler only sees a noisy prediction.
    pub true_answer_length: Tokens,
}

fn generic() -> String {
    "generic".into()
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::InvalidInput(format!("query {} has empty text", self.id)));
        }
        if self.true_answer_length == 0 {
            return Err(Error::InvalidInput(format!("query {} has zero answer length", self.id)));
        }
        Ok(())
    }
}

/// Multiplicative log-normal noise on the true answer length. The noise has
/// median 1, so `sigma = 0` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub enabled: bool,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { enabled: true, sigma: 0.1, seed: 0 }
    }
}

pub fn predict_answer_length(query: &Query, cfg: &PredictorConfig) -> Tokens {
    let truth = query.true_answer_length.max(1);
    if !cfg.enabled || cfg.sigma == 0.0 {
        return truth;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, query.id, 0x6c_656e]));
    let z: f64 = StandardNormal.sample(&mut rng);
    let predicted = f64::from(truth) * (cfg.sigma * z).exp();
    predicted.round().clamp(1.0, f64::from(Tokens::MAX)) as Tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullCloud,
    Progressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchDecision {
    pub mode: Mode,
    /// 1-based level; 0 for a full cloud answer.
    pub level_index: u32,
    pub target_sketch_len: Tokens,
    pub expected_answer_len: Tokens,
    /// Slack of the chosen level, or of the shortest level when falling back.
    pub slack_s: f64,
}

/// Minimum sketch fraction per edge model capability rank (0 = largest model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierPolicy {
    pub base_floor: f64,
    pub step: f64,
}

impl Default for TierPolicy {
    fn default() -> Self {
        TierPolicy { base_floor: 0.2, step: 0.1 }
    }
}

impl TierPolicy {
    pub fn floor_fraction(&self, rank: u32) -> f64 {
        (self.base_floor + self.step * f64::from(rank)).clamp(0.0, 1.0)
    }
}

/// Candidate sketch lengths `round(k·l/(L+1))` for `k = 1..=L`.
pub fn level_lengths(answer_len: Tokens, levels: u32) -> Vec<Tokens> {
    let l = f64::from(answer_len);
    let denom = f64::from(levels) + 1.0;
    (1..=levels).map(|k| (f64::from(k) * l / denom).round() as Tokens).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LevelContext<'a> {
    pub f: &'a LatencyModel,
    pub c: CostCoefficient,
    /// Pool used in the feasibility check; the scheduler passes `p = 1`.
    pub pool: EdgePool,
    pub net: &'a NetworkModel,
    pub tiers: TierPolicy,
}

/// Picks the shortest feasible level at or above the tier floor, or a full
/// cloud answer when there is none.
pub fn choose_sketch_level(
    answer_len: Tokens,
    levels: u32,
    snapshot: &RuntimeSnapshot,
    ctx: &LevelContext<'_>,
    tier_rank: u32,
) -> Result<SketchDecision> {
    if levels == 0 {
        return Err(Error::Config("sketch level count must be >= 1".into()));
    }
    let answer_len = answer_len.max(1);
    let floor = ctx.tiers.floor_fraction(tier_rank) * f64::from(answer_len);
    let mut fallback_slack = f64::NEG_INFINITY;
    for (i, target) in level_lengths(answer_len, levels).into_iter().enumerate() {
        if target == 0 {
            continue;
        }
        let feas = e2e_feasible(
            f64::from(target),
            f64::from(answer_len),
            &snapshot.queue_lengths,
            ctx.f,
            ctx.c,
            ctx.pool,
            ctx.net,
        );
        if fallback_slack == f64::NEG_INFINITY {
            fallback_slack = feas.slack_s;
        }
        if f64::from(target) + 1e-9 < floor {
            continue;
        }
        if feas.feasible {
            return Ok(SketchDecision {
                mode: Mode::Progressive,
                level_index: i as u32 + 1,
                target_sketch_len: target,
                expected_answer_len: answer_len,
                slack_s: feas.slack_s,
            });
        }
        // feasibility only worsens with longer sketches
        break;
    }
    Ok(SketchDecision {
        mode: Mode::FullCloud,
        level_index: 0,
        target_sketch_len: 0,
        expected_answer_len: answer_len,
        slack_s: if fallback_slack.is_finite() { fallback_slack } else { 0.0 },
    })
}

/// One line of the per-query decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub query_id: u64,
    pub mode: Mode,
    pub level_index: u32,
    pub target_sketch_len: Tokens,
    pub l_i: Tokens,
    pub slack_s: f64,
}

impl DecisionRecord {
    pub fn new(query_id: u64, d: &SketchDecision) -> Self {
        DecisionRecord {
            query_id,
            mode: d.mode,
            level_index: d.level_index,
            target_sketch_len: d.target_sketch_len,
            l_i: d.expected_answer_len,
            slack_s: d.slack_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Error,
    Throughput,
    Latency,
    ServerCost,
    EdgeCost,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Error, Metric::Throughput, Metric::Latency, Metric::ServerCost, Metric::EdgeCost];

    pub fn default_sense(self) -> Sense {
        match self {
            Metric::Throughput => Sense::Maximize,
            _ => Sense::Minimize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub error: f64,
    /// Queries per minute.
    pub throughput: f64,
    /// Mean end-to-end seconds.
    pub latency: f64,
    /// Tokens generated on the cloud.
    pub server_cost: f64,
    /// Tokens generated on edge devices.
    pub edge_cost: f64,
}

impl MetricVector {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Error => self.error,
            Metric::Throughput => self.throughput,
            Metric::Latency => self.latency,
            Metric::ServerCost => self.server_cost,
            Metric::EdgeCost => self.edge_cost,
        }
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Error => self.error = v,
            Metric::Throughput => self.throughput = v,
            Metric::Latency => self.latency = v,
            Metric::ServerCost => self.server_cost = v,
            Metric::EdgeCost => self.edge_cost = v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if Metric::ALL.iter().any(|&m| !self.get(m).is_finite()) {
            return Err(Error::UndefinedMetrics("non-finite metric".into()));
        }
        if !(0.0..=1.0).contains(&self.error) {
            return Err(Error::UndefinedMetrics(format!("error {} outside [0,1]", self.error)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexOrder {
    pub priority: Vec<Metric>,
    #[serde(default)]
    pub senses: BTreeMap<Metric, Sense>,
    #[serde(default = "default_slack")]
    pub slack_fraction: f64,
}

fn default_slack() -> f64 {
    0.01
}

impl Default for LexOrder {
    fn default() -> Self {
        LexOrder {
            priority: vec![Metric::Throughput, Metric::Error, Metric::Latency, Metric::ServerCost, Metric::EdgeCost],
            senses: BTreeMap::new(),
            slack_fraction: default_slack(),
        }
    }
}

impl LexOrder {
    pub fn new(priority: Vec<Metric>, slack_fraction: f64) -> Result<Self> {
        let order = LexOrder { priority, senses: BTreeMap::new(), slack_fraction };
        order.validate()?;
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.priority.clone();
        sorted.sort();
        if sorted != Metric::ALL {
            return Err(Error::Config(format!("priority must list every metric once: {:?}", self.priority)));
        }
        if !(self.slack_fraction.is_finite() && self.slack_fraction >= 0.0) {
            return Err(Error::Config("slack_fraction must be >= 0".into()));
        }
        Ok(())
    }

    pub fn sense(&self, m: Metric) -> Sense {
        self.senses.get(&m).copied().unwrap_or_else(|| m.default_sense())
    }
}

/// Index of the lexicographically best candidate. At each metric only
/// candidates within `slack_fraction` (relative) of the best survive; ties
/// after the last metric go to the lowest index.
pub fn lex_select_index(metrics: &[MetricVector], order: &LexOrder) -> Result<usize> {
    order.validate()?;
    if metrics.is_empty() {
        return Err(Error::InvalidInput("no candidates to rank".into()));
    }
    let mut alive: Vec<usize> = (0..metrics.len()).collect();
    for &m in &order.priority {
        let sense = order.sense(m);
        let values = alive.iter().map(|&i| metrics[i].get(m));
        let best = match sense {
            Sense::Minimize => values.fold(f64::INFINITY, f64::min),
            Sense::Maximize => values.fold(f64::NEG_INFINITY, f64::max),
        };
        let tol = order.slack_fraction * best.abs();
        alive.retain(|&i| {
            let v = metrics[i].get(m);
            match sense {
                Sense::Minimize => v <= best + tol,
                Sense::Maximize => v >= best - tol,
            }
        });
    }
    Ok(alive[0])
}

pub fn lex_optimize<'a, C>(candidates: &'a [(C, MetricVector)], order: &LexOrder) -> Result<&'a C> {
    let metrics: Vec<MetricVector> = candidates.iter().map(|(_, m)| *m).collect();
    Ok(&candidates[lex_select_index(&metrics, order)?].0)
}

/// Raw counters from a finished measurement window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub window_s: f64,
    pub completed_in_window: usize,
    /// End-to-end latency of every completed query.
    pub latencies_s: Vec<f64>,
    /// Per-query `1 - ROUGE-L` when references exist.
    pub errors: Vec<f64>,
    pub server_tokens: u64,
    pub edge_tokens: u64,
}

pub fn measure(summary: &RunSummary) -> Result<MetricVector> {
    if !(summary.window_s > 0.0) || summary.latencies_s.is_empty() {
        return Err(Error::UndefinedMetrics("empty measurement window".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mv = MetricVector {
        error: if summary.errors.is_empty() { 0.0 } else { mean(&summary.errors) },
        throughput: summary.completed_in_window as f64 / (summary.window_s / 60.0),
        latency: mean(&summary.latencies_s),
        server_cost: summary.server_tokens as f64,
        edge_cost: summary.edge_tokens as f64,
    };
    mv.validate()?;
    Ok(mv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub levels: u32,
    /// Parallelism assumed in the feasibility check.
    pub assumed_parallelism: u32,
    pub tiers: TierPolicy,
    pub predictor: PredictorConfig,
    pub lex_order: LexOrder,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            levels: 4,
            assumed_parallelism: 1,
            tiers: TierPolicy::default(),
            predictor: PredictorConfig::default(),
            lex_order: LexOrder::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn query(len: Tokens) -> Query {
        Query { id: 7, text: "why".into(), arrival_time_s: 0.0, category: "generic".into(), true_answer_length: len }
    }

    fn snap(queue: Vec<Tokens>) -> RuntimeSnapshot {
        RuntimeSnapshot { queue_lengths: queue, busy_devices: 0, device_count: 4, observed_rtt_s: 0.0, timestamp_s: 0.0 }
    }

    fn fast_net() -> NetworkModel {
        NetworkModel::new(1e-9, 1e12, 4.0).unwrap()
    }

    #[test]
    fn predictor_identity_cases() {
        let q = query(321);
        assert_eq!(predict_answer_length(&q, &PredictorConfig { enabled: false, sigma: 0.5, seed: 1 }), 321);
        assert_eq!(predict_answer_length(&q, &PredictorConfig { enabled: true, sigma: 0.0, seed: 1 }), 321);
        let cfg = PredictorConfig { enabled: true, sigma: 0.3, seed: 4 };
        assert_eq!(predict_answer_length(&q, &cfg), predict_answer_length(&q, &cfg));
        assert!(predict_answer_length(&query(1), &PredictorConfig { enabled: true, sigma: 3.0, seed: 9 }) >= 1);
    }

    #[test]
    fn levels_are_even_fractions() {
        assert_eq!(level_lengths(500, 4), vec![100, 200, 300, 400]);
        assert_eq!(level_lengths(10, 2), vec![3, 7]);
    }

    #[test]
    fn everything_feasible_picks_floor_level() {
        let f = LatencyModel::constant_rate(20.0).unwrap();
        let net = fast_net();
        let ctx = LevelContext { f: &f, c: CostCoefficient::new(0.1).unwrap(), pool: EdgePool::new(4, 1).unwrap(), net: &net, tiers: TierPolicy::default() };
        let d = choose_sketch_level(500, 4, &snap(vec![]), &ctx, 0).unwrap();
        assert_eq!((d.mode, d.level_index, d.target_sketch_len, d.expected_answer_len), (Mode::Progressive, 1, 100, 500));
        // rank 2 floor is 0.4 → 200
        assert_eq!(choose_sketch_level(500, 4, &snap(vec![]), &ctx, 2).unwrap().target_sketch_len, 200);
    }

    #[test]
    fn saturated_queue_falls_back() {
        let f = LatencyModel::constant_rate(20.0).unwrap();
        let net = fast_net();
        let ctx = LevelContext { f: &f, c: CostCoefficient::new(0.5).unwrap(), pool: EdgePool::new(1, 1).unwrap(), net: &net, tiers: TierPolicy::default() };
        let d = choose_sketch_level(500, 4, &snap(vec![500; 50]), &ctx, 0).unwrap();
        assert_eq!(d.mode, Mode::FullCloud);
        assert_eq!(d.level_index, 0);
        assert!(d.slack_s < 0.0);
    }

    #[test]
    fn worked_instance_matches_enumeration() {
        // f = l/20, c = 0.5, one device, queue of one 200-token job
        let f = LatencyModel::constant_rate(20.0).unwrap();
        let net = NetworkModel::new(0.1, 1e6, 4.0).unwrap();
        let c = CostCoefficient::new(0.5).unwrap();
        let pool = EdgePool::new(1, 1).unwrap();
        let s = snap(vec![200]);
        let ctx = LevelContext { f: &f, c, pool, net: &net, tiers: TierPolicy { base_floor: 0.0, step: 0.0 } };
        let d = choose_sketch_level(500, 4, &s, &ctx, 0).unwrap();
        let oracle = level_lengths(500, 4)
            .into_iter()
            .find(|&r| e2e_feasible(f64::from(r), 500.0, &s.queue_lengths, &f, c, pool, &net).feasible);
        assert_eq!(oracle, Some(100));
        assert_eq!(d.target_sketch_len, 100);
    }

    #[test]
    fn zero_levels_rejected() {
        let f = LatencyModel::constant_rate(20.0).unwrap();
        let net = fast_net();
        let ctx = LevelContext { f: &f, c: CostCoefficient::new(0.1).unwrap(), pool: EdgePool::new(1, 1).unwrap(), net: &net, tiers: TierPolicy::default() };
        assert!(choose_sketch_level(500, 0, &snap(vec![]), &ctx, 0).is_err());
    }

    fn mv(latency: f64, error: f64) -> MetricVector {
        MetricVector { error, throughput: 1.0, latency, server_cost: 0.0, edge_cost: 0.0 }
    }

    fn order(first: Metric, second: Metric) -> LexOrder {
        let mut p = vec![first, second];
        p.extend(Metric::ALL.into_iter().filter(|m| *m != first && *m != second));
        LexOrder::new(p, 0.0).unwrap()
    }

    #[test]
    fn lex_examples() {
        let o = order(Metric::Latency, Metric::Error);
        assert_eq!(lex_optimize(&[("only", mv(1.0, 1.0))], &o).unwrap(), &"only");
        assert_eq!(lex_optimize(&[("a", mv(11.0, 0.1)), ("b", mv(10.0, 0.1))], &o).unwrap(), &"b");
        let c = [("a", mv(10.0, 0.3)), ("b", mv(10.0, 0.1)), ("c", mv(12.0, 0.0))];
        assert_eq!(lex_optimize(&c, &o).unwrap(), &"b");
    }

    #[test]
    fn lex_slack_and_sense() {
        let mut o = order(Metric::Throughput, Metric::Latency);
        let hi = MetricVector { throughput: 100.0, latency: 9.0, ..mv(0.0, 0.0) };
        let near = MetricVector { throughput: 99.5, latency: 5.0, ..mv(0.0, 0.0) };
        assert_eq!(lex_select_index(&[hi, near], &o).unwrap(), 0);
        o.slack_fraction = 0.01;
        assert_eq!(lex_select_index(&[hi, near], &o).unwrap(), 1);
        o.senses.insert(Metric::Throughput, Sense::Minimize);
        o.slack_fraction = 0.0;
        assert_eq!(lex_select_index(&[hi, near], &o).unwrap(), 1);
    }

    #[test]
    fn lex_rejects_bad_order() {
        assert!(LexOrder::new(vec![Metric::Error], 0.0).is_err());
        assert!(lex_select_index(&[], &LexOrder::default()).is_err());
    }

    #[test]
    fn measure_examples() {
        let s = RunSummary { window_s: 120.0, completed_in_window: 30, latencies_s: vec![1.0; 30], errors: vec![0.0; 30], server_tokens: 10, edge_tokens: 0 };
        let m = measure(&s).unwrap();
        assert_eq!(m.throughput, 15.0);
        assert_eq!(m.error, 0.0);
        assert_eq!(m.edge_cost, 0.0);
        assert!(measure(&RunSummary::default()).is_err());
    }

    fn arb_mv() -> impl Strategy<Value = MetricVector> {
        (0u8..4, 0u8..4, 0u8..4, 0u8..4, 0u8..4).prop_map(|(a, b, c, d, e)| MetricVector {
            error: f64::from(a) / 4.0,
            throughput: f64::from(b),
            latency: f64::from(c),
            server_cost: f64::from(d),
            edge_cost: f64::from(e),
        })
    }

    fn arb_order() -> impl Strategy<Value = LexOrder> {
        (Just(Metric::ALL.to_vec()).prop_shuffle(), prop::collection::vec(any::<bool>(), 5)).prop_map(|(priority, flips)| {
            let senses = Metric::ALL.iter().zip(flips).map(|(&m, f)| (m, if f { Sense::Maximize } else { Sense::Minimize })).collect();
            LexOrder { priority, senses, slack_fraction: 0.0 }
        })
    }

    /// Oracle: sort by the key tuple with sense folded into the sign.
    fn brute_force(ms: &[MetricVector], o: &LexOrder) -> usize {
        let key = |m: &MetricVector| -> Vec<f64> {
            o.priority.iter().map(|&k| if o.sense(k) == Sense::Maximize { -m.get(k) } else { m.get(k) }).collect()
        };
        (0..ms.len())
            .min_by(|&a, &b| key(&ms[a]).partial_cmp(&key(&ms[b])).unwrap().then(a.cmp(&b)))
            .unwrap()
    }

    proptest! {
        #[test]
        fn lex_matches_brute_force(ms in prop::collection::vec(arb_mv(), 1..12), o in arb_order()) {
            prop_assert_eq!(lex_select_index(&ms, &o).unwrap(), brute_force(&ms, &o));
        }

        #[test]
        fn lex_affine_invariant(ms in prop::collection::vec(arb_mv(), 1..12), o in arb_order(),
                                 scale in 0.1f64..10.0, shift in -5.0f64..5.0, which in 0usize..5) {
            let m = Metric::ALL[which];
            let scaled: Vec<MetricVector> = ms.iter().map(|v| { let mut v = *v; v.set(m, scale * v.get(m) + shift); v }).collect();
            prop_assert_eq!(lex_select_index(&ms, &o).unwrap(), lex_select_index(&scaled, &o).unwrap());
        }

        #[test]
        fn decisions_are_self_consistent_and_monotone(
            answer in 20u32..1500, levels in 1u32..8, rank in 0u32..3,
            queue in prop::collection::vec(10u32..800, 0..12), extra in 10u32..800,
            c in 0.05f64..1.0, devices in 1u32..6, rate in 5.0f64..50.0,
        ) {
            let f = LatencyModel::constant_rate(rate).unwrap();
            let net = NetworkModel::new(0.05, 1e5, 4.0).unwrap();
            let ctx = LevelContext { f: &f, c: CostCoefficient::new(c).unwrap(), pool: EdgePool::new(devices, 1).unwrap(), net: &net, tiers: TierPolicy::default() };
            let s = snap(queue.clone());
            let d = choose_sketch_level(answer, levels, &s, &ctx, rank).unwrap();
            if d.mode == Mode::Progressive {
                prop_assert!(d.target_sketch_len > 0 && d.target_sketch_len <= answer);
                prop_assert!(e2e_feasible(f64::from(d.target_sketch_len), f64::from(answer), &queue, &f, ctx.c, ctx.pool, &net).feasible);
            } else {
                let mut more = queue.clone();
                more.push(extra);
                prop_assert_eq!(choose_sketch_level(answer, levels, &snap(more), &ctx, rank).unwrap().mode, Mode::FullCloud);
            }
        }
    }
}
