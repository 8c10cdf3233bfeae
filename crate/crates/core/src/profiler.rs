//! Offline latency profiling and runtime load snapshots.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::cost_model::{CostCoefficient, LatencyModel, NetworkModel};
use crate::dispatcher::BucketedQueue;
use crate::error::{Error, Result};
use crate::util::median;
use crate::Tokens;

/// One timed generation. Ingested from JSON lines:
/// `{"model_id": .., "device_id": .., "output_length": .., "wall_time_s": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub model_id: String,
    pub device_id: String,
    pub output_length: Tokens,
    pub wall_time_s: f64,
}

impl MeasurementSample {
    pub fn validate(&self) -> Result<()> {
        if self.output_length == 0 {
            return Err(Error::InvalidInput(format!("{}@{}: output_length must be > 0", self.model_id, self.device_id)));
        }
        if !(self.wall_time_s.is_finite() && self.wall_time_s > 0.0) {
            return Err(Error::InvalidInput(format!("{}@{}: wall_time_s must be > 0", self.model_id, self.device_id)));
        }
        Ok(())
    }
}

/// Reads line-delimited samples; blank lines are skipped.
pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<MeasurementSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MeasurementSample = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("line {}: {e}", i + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Fits `f` from samples of a single (model, device) pair.
///
/// Duplicate lengths are averaged first. The overhead is the least-squares
/// intercept, clamped to `[0, smallest mean latency]` so that every remaining
/// sample point is non-negative; a pool-adjacent-violators pass then makes the
/// points non-decreasing.
pub fn fit_latency_model(samples: &[MeasurementSample]) -> Result<LatencyModel> {
    for s in samples {
        s.validate()?;
    }
    let mut by_len: BTreeMap<Tokens, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let e = by_len.entry(s.output_length).or_insert((0.0, 0));
        e.0 += s.wall_time_s;
        e.1 += 1;
    }
    if by_len.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 distinct output lengths, got {}",
            by_len.len()
        )));
    }
    let points: Vec<(f64, f64)> = by_len.iter().map(|(&l, &(sum, n))| (f64::from(l), sum / n as f64)).collect();

    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let min_mean = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let base = intercept.clamp(0.0, min_mean);

    let residual: Vec<f64> = points.iter().map(|p| p.1 - base).collect();
    let monotone = isotonic_non_decreasing(&residual);
    let samples = points.iter().zip(monotone).map(|(p, t)| (p.0, t.max(0.0))).collect();
    LatencyModel::new(base, samples)
}

/// Fits one model per (model_id, device_id) pair.
pub fn fit_all(samples: &[MeasurementSample]) -> Result<BTreeMap<(String, String), LatencyModel>> {
    let mut groups: BTreeMap<(String, String), Vec<MeasurementSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.model_id.clone(), s.device_id.clone())).or_default().push(s.clone());
    }
    groups
        .into_iter()
        .map(|(key, group)| {
            let model = fit_latency_model(&group)
                .map_err(|e| Error::InsufficientData(format!("{}@{}: {e}", key.0, key.1)))?;
            Ok((key, model))
        })
        .collect()
}

/// Unweighted pool-adjacent-violators regression.
fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            if s0 / n0 as f64 > s1 / n1 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s0 + s1, n0 + n1);
            } else {
                break;
            }
        }
    }
    blocks.into_iter().flat_map(|(s, n)| std::iter::repeat_n(s / n as f64, n)).collect()
}

/// `c` as the median edge/cloud latency ratio over the probe lengths.
pub fn estimate_cost_coefficient(
    cloud: &LatencyModel,
    edge: &LatencyModel,
    probe_lengths: &[Tokens],
) -> Result<CostCoefficient> {
    let ratios = cost_ratios(cloud, edge, probe_lengths)?;
    CostCoefficient::new(median(&ratios).expect("non-empty"))
}

/// Per-probe edge/cloud latency ratios, in probe order.
pub fn cost_ratios(cloud: &LatencyModel, edge: &LatencyModel, probe_lengths: &[Tokens]) -> Result<Vec<f64>> {
    if probe_lengths.is_empty() {
        return Err(Error::InvalidInput("no probe lengths".into()));
    }
    probe_lengths
        .iter()
        .map(|&l| {
            let denom = cloud.eval(f64::from(l));
            if denom == 0.0 {
                Err(Error::DivisionByZero(format!("cloud latency is zero at length {l}")))
            } else {
                Ok(edge.eval(f64::from(l)) / denom)
            }
        })
        .collect()
}

/// Point-in-time view of the load the scheduler reasons about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSnapshot {
    /// Expected answer lengths of jobs still waiting in the dispatcher.
    pub queue_lengths: Vec<Tokens>,
    pub busy_devices: u32,
    pub device_count: u32,
    pub observed_rtt_s: f64,
    pub timestamp_s: f64,
}

/// Builds a snapshot from the dispatcher and device state. No congestion is
/// modelled, so the observed round trip is the network's base RTT.
pub fn snapshot(
    queue: &BucketedQueue,
    busy_devices: u32,
    device_count: u32,
    net: &NetworkModel,
    now_s: f64,
) -> RuntimeSnapshot {
    debug_assert!(busy_devices <= device_count);
    RuntimeSnapshot {
        queue_lengths: queue.queue_token_load(),
        busy_devices,
        device_count,
        observed_rtt_s: net.base_rtt_s,
        timestamp_s: now_s,
    }
}
