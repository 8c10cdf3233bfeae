//! Analytic latency and cost quantities used by the scheduler.
//!
//! `LatencyModel` is the cloud latency curve `f(l)`: seconds to generate an
//! `l`-token response. Edge cost is expressed relative to it through a
//! [`CostCoefficient`]; network transfer through [`NetworkModel`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear latency curve with a fixed startup overhead.
///
/// Between zero and the first sample the curve rises linearly from the
/// origin; beyond the last sample it continues with the final segment's slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatencyModelDoc", into = "LatencyModelDoc")]
pub struct LatencyModel {
    base_overhead_s: f64,
    samples: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct LatencyModelDoc {
    base_overhead_s: f64,
    samples: Vec<[f64; 2]>,
}

impl TryFrom<LatencyModelDoc> for LatencyModel {
    type Error = Error;

    fn try_from(doc: LatencyModelDoc) -> Result<Self> {
        LatencyModel::new(doc.base_overhead_s, doc.samples.into_iter().map(|[l, s]| (l, s)).collect())
    }
}

impl From<LatencyModel> for LatencyModelDoc {
    fn from(m: LatencyModel) -> Self {
        LatencyModelDoc {
            base_overhead_s: m.base_overhead_s,
            samples: m.samples.into_iter().map(|(l, s)| [l, s]).collect(),
        }
    }
}

impl LatencyModel {
    pub fn new(base_overhead_s: f64, samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidModel(format!("need at least two sample points, got {}", samples.len())));
        }
        if !base_overhead_s.is_finite() || base_overhead_s < 0.0 {
            return Err(Error::InvalidModel(format!("base overhead must be finite and >= 0, got {base_overhead_s}")));
        }
        let mut prev: Option<(f64, f64)> = None;
        for &(len, secs) in &samples {
            if !len.is_finite() || !secs.is_finite() {
                return Err(Error::InvalidModel("non-finite sample point".into()));
            }
            if len <= 0.0 {
                return Err(Error::InvalidModel(format!("sample lengths must be positive, got {len}")));
            }
            if secs < 0.0 {
                return Err(Error::InvalidModel(format!("negative latency {secs} at length {len}")));
            }
            if let Some((pl, ps)) = prev {
                if len <= pl {
                    return Err(Error::InvalidModel("sample lengths must be strictly increasing".into()));
                }
                if secs < ps {
                    return Err(Error::InvalidModel(format!("latency decreases between lengths {pl} and {len}")));
                }
            }
            prev = Some((len, secs));
        }
        Ok(LatencyModel { base_overhead_s, samples })
    }

    /// A model at a constant generation rate with no overhead: `f(l) = l / rate`.
    pub fn constant_rate(tokens_per_second: f64) -> Result<Self> {
        if !(tokens_per_second.is_finite() && tokens_per_second > 0.0) {
            return Err(Error::InvalidModel(format!("rate must be positive, got {tokens_per_second}")));
        }
        LatencyModel::new(0.0, vec![(1.0, 1.0 / tokens_per_second), (1000.0, 1000.0 / tokens_per_second)])
    }

    pub fn base_overhead_s(&self) -> f64 {
        self.base_overhead_s
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// `f(length)` in seconds. Negative lengths are treated as zero.
    pub fn eval(&self, length: f64) -> f64 {
        let l = length.max(0.0);
        let s = &self.samples;
        let (first_len, first_secs) = s[0];
        let variable = if l <= first_len {
            first_secs * l / first_len
        } else {
            // index of the segment [s[i], s[i+1]] holding l, or the last one for extrapolation
            let i = match s.iter().position(|&(len, _)| len >= l) {
                Some(j) => j - 1,
                None => s.len() - 2,
            };
            let (l0, t0) = s[i];
            let (l1, t1) = s[i + 1];
            t0 + (t1 - t0) * (l - l0) / (l1 - l0)
        };
        self.base_overhead_s + variable
    }

    /// Same curve with every latency multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        LatencyModel::new(
            self.base_overhead_s * factor,
            self.samples.iter().map(|&(l, t)| (l, t * factor)).collect(),
        )
    }
}

/// `f(length)` for a validated model.
pub fn eval_latency(model: &LatencyModel, length: f64) -> f64 {
    model.eval(length)
}

/// Edge-to-cloud execution time ratio `c`: an edge model needs `c * f(l)`
/// seconds for an `l`-token output.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CostCoefficient(f64);

impl CostCoefficient {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(CostCoefficient(value))
        } else {
            Err(Error::InvalidInput(format!("cost coefficient must be finite and > 0, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for CostCoefficient {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        CostCoefficient::new(v)
    }
}

impl From<CostCoefficient> for f64 {
    fn from(c: CostCoefficient) -> f64 {
        c.0
    }
}

/// Affine network transfer model between cloud and edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub base_rtt_s: f64,
    pub bandwidth_bytes_per_s: f64,
    pub bytes_per_token: f64,
}

impl NetworkModel {
    pub fn new(base_rtt_s: f64, bandwidth_bytes_per_s: f64, bytes_per_token: f64) -> Result<Self> {
        let net = NetworkModel { base_rtt_s, bandwidth_bytes_per_s, bytes_per_token };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_rtt_s", self.base_rtt_s),
            ("bandwidth_bytes_per_s", self.bandwidth_bytes_per_s),
            ("bytes_per_token", self.bytes_per_token),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("network {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// `Δ(payload)`: round trip plus serialization time of the payload.
    pub fn delay(&self, payload_tokens: f64) -> f64 {
        self.base_rtt_s + payload_tokens.max(0.0) * self.bytes_per_token / self.bandwidth_bytes_per_s
    }
}

pub fn network_delay(net: &NetworkModel, payload_tokens: f64) -> f64 {
    net.delay(payload_tokens)
}

/// Edge device count `N` and per-job expansion parallelism `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgePool {
    pub device_count: u32,
    pub parallelism: u32,
}

impl EdgePool {
    pub fn new(device_count: u32, parallelism: u32) -> Result<Self> {
        if device_count == 0 || parallelism == 0 {
            return Err(Error::Config("edge pool needs device_count >= 1 and parallelism >= 1".into()));
        }
        Ok(EdgePool { device_count, parallelism })
    }
}

/// Per-query steady-state pipeline period: the slowest of sketch generation,
/// transfer, and parallel edge expansion.
pub fn pipeline_throughput_bound(
    sketch_len: f64,
    answer_len: f64,
    f: &LatencyModel,
    c: CostCoefficient,
    p: u32,
    net: &NetworkModel,
) -> f64 {
    let p = f64::from(p.max(1));
    let sketch = f.eval(sketch_len);
    let transfer = net.delay(sketch_len);
    let edge = c.value() / p * f.eval(answer_len);
    sketch.max(transfer).max(edge)
}

/// Queries per minute for a pipeline period in seconds.
pub fn throughput_per_minute(period_s: f64) -> f64 {
    60.0 / period_s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// Right-hand side minus left-hand side; negative when infeasible.
    pub slack_s: f64,
}

/// End-to-end latency constraint for progressive mode: sketch generation,
/// transfer, edge expansion and the expected wait behind queued jobs must not
/// exceed the time the cloud would need to answer in full.
///
/// `f(|r|) + Δ(r) + c·f(l)/p + Σ_queue c·f(l_j)/(p·N) <= f(l)`
pub fn e2e_feasible(
    sketch_len: f64,
    answer_len: f64,
    queue_lengths: &[u32],
    f: &LatencyModel,
    c: CostCoefficient,
    pool: EdgePool,
    net: &NetworkModel,
) -> Feasibility {
    let p = f64::from(pool.parallelism.max(1));
    let n = f64::from(pool.device_count.max(1));
    let c = c.value();
    let full = f.eval(answer_len);
    let wait: f64 = queue_lengths.iter().map(|&l| c * f.eval(f64::from(l))).sum::<f64>() / (p * n);
    let lhs = f.eval(sketch_len) + net.delay(sketch_len) + c * full / p + wait;
    let slack_s = full - lhs;
    Feasibility { feasible: lhs <= full, slack_s }
}
