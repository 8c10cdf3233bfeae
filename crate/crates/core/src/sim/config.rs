//! Run configuration: cluster, workload, policy and scheduler knobs.

use serde::{Deserialize, Serialize};

use crate::backends::MockModelSpec;
use crate::cost_model::NetworkModel;
use crate::dispatcher::{DeviceProfile, DEFAULT_BUCKET_EDGES};
use crate::edge::EdgeExecModel;
use crate::ensemble::ConfidenceWeights;
use crate::error::{Error, Result};
use crate::scheduler::SchedulerConfig;
use crate::Tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Pice,
    CloudOnly,
    EdgeOnly,
    Routing,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Pice, Policy::CloudOnly, Policy::EdgeOnly, Policy::Routing];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Pice => "pice",
            Policy::CloudOnly => "cloud_only",
            Policy::EdgeOnly => "edge_only",
            Policy::Routing => "routing",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}; expected one of pice, cloud_only, edge_only, routing")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    Deterministic,
    Poisson,
}

/// True answer lengths, clamped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    Fixed { value: Tokens },
    Uniform { min: Tokens, max: Tokens },
    /// Log-normal with the given arithmetic mean.
    LogNormal { mean: f64, sigma: f64, min: Tokens, max: Tokens },
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LengthDistribution::Fixed { value } => value > 0,
            LengthDistribution::Uniform { min, max } => min > 0 && min <= max,
            LengthDistribution::LogNormal { mean, sigma, min, max } => mean > 0.0 && sigma >= 0.0 && min > 0 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid length distribution {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub rpm: f64,
    /// Arrivals happen in `[0, duration_s)`; the run then drains.
    pub duration_s: f64,
    /// Completions before this time are excluded from throughput.
    pub warmup_s: f64,
    pub length_distribution: LengthDistribution,
    pub category_mix: Vec<CategoryWeight>,
    pub arrival: Arrival,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rpm.is_finite() && self.rpm > 0.0) {
            return Err(Error::Config("rpm must be > 0".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Config("duration_s must be > 0".into()));
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return Err(Error::Config("warmup_s must be in [0, duration_s)".into()));
        }
        if self.category_mix.iter().any(|c| !(c.weight >= 0.0)) || self.category_mix.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("category weights must be >= 0 with a positive sum".into()));
        }
        self.length_distribution.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub model: MockModelSpec,
    pub max_batch: u32,
    /// Per-stream slowdown per extra concurrent generation; 0 keeps every
    /// stream at the model's single-stream rate.
    pub contention: f64,
}

impl CloudSpec {
    /// Per-stream tokens/s with `active` concurrent generations.
    pub fn stream_rate(&self, active: usize) -> f64 {
        self.model.tokens_per_second / (1.0 + self.contention * (active.max(1) as f64 - 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeModelSpec {
    pub model: MockModelSpec,
    /// 0 is the largest model.
    pub size_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock,
    Remote { endpoint: String, timeout_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub cloud: CloudSpec,
    pub devices: Vec<DeviceProfile>,
    /// Models every edge device can load.
    pub edge_models: Vec<EdgeModelSpec>,
    /// Model loaded on every device at start.
    pub initial_edge_model: String,
    pub switch_penalty_s: f64,
    pub net: NetworkModel,
    pub queue_capacity: usize,
    #[serde(default = "default_edges")]
    pub bucket_edges: Vec<Tokens>,
    pub edge_exec: EdgeExecModel,
    /// Output lengths used for offline profiling.
    pub probe_lengths: Vec<Tokens>,
}

fn default_edges() -> Vec<Tokens> {
    DEFAULT_BUCKET_EDGES.to_vec()
}

impl ClusterSpec {
    pub fn validate(&self, policy: Policy) -> Result<()> {
        self.cloud.model.validate()?;
        if self.cloud.max_batch == 0 || !(self.cloud.contention >= 0.0) {
            return Err(Error::Config("cloud needs max_batch >= 1 and contention >= 0".into()));
        }
        self.net.validate()?;
        self.edge_exec.validate()?;
        if policy != Policy::CloudOnly {
            if self.devices.is_empty() {
                return Err(Error::Config(format!("policy {} needs at least one edge device", policy.name())));
            }
            if self.edge_models.is_empty() {
                return Err(Error::Config("no edge models configured".into()));
            }
        }
        for m in &self.edge_models {
            m.model.validate()?;
        }
        if !self.edge_models.is_empty() && !self.edge_models.iter().any(|m| m.model.model_id == self.initial_edge_model) {
            return Err(Error::Config(format!("initial edge model {} is not configured", self.initial_edge_model)));
        }
        for d in &self.devices {
            if d.max_batch == 0 || d.max_streams == 0 {
                return Err(Error::Config(format!("device {} needs max_batch and max_streams >= 1", d.id)));
            }
        }
        if self.probe_lengths.len() < 2 {
            return Err(Error::Config("need at least two probe lengths".into()));
        }
        if !(self.switch_penalty_s >= 0.0) {
            return Err(Error::Config("switch_penalty_s must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub policy: Policy,
    pub workload: WorkloadSpec,
    pub cluster: ClusterSpec,
    pub scheduler: SchedulerConfig,
    pub ensemble: ConfidenceWeights,
    /// Predicted lengths below this go to the edge under the routing policy.
    pub routing_threshold: Tokens,
    /// Score answers against a reference to fill the error metric.
    pub compute_error: bool,
    /// Keep enqueue and dispatch logs in the report.
    pub record_trace: bool,
    pub backend: BackendConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        self.cluster.validate(self.policy)?;
        self.ensemble.validate()?;
        self.scheduler.lex_order.validate()?;
        if self.scheduler.levels == 0 || self.scheduler.assumed_parallelism == 0 {
            return Err(Error::Config("scheduler needs levels >= 1 and assumed_parallelism >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn mock(id: &str, tokens_per_second: f64, quality: f64, expansion_factor: f64, samples: u32) -> MockModelSpec {
    MockModelSpec { model_id: id.into(), tokens_per_second, quality, expansion_factor, samples_per_request: samples }
}

impl Default for RunConfig {
    /// A 70B-class cloud model serving 20 concurrent streams at 30 requests
    /// per minute, with four edge devices and three edge models.
    fn default() -> Self {
        let devices = (0..4)
            .map(|i| DeviceProfile { id: format!("edge-{i}"), max_batch: 2, max_streams: 4, memory_budget_tokens: 500 })
            .collect();
        RunConfig {
            policy: Policy::Pice,
            workload: WorkloadSpec {
                rpm: 30.0,
                duration_s: 480.0,
                warmup_s: 120.0,
                length_distribution: LengthDistribution::LogNormal { mean: 500.0, sigma: 0.35, min: 64, max: 1500 },
                category_mix: ["generic", "knowledge", "roleplay", "writing", "math", "coding"]
                    .iter()
                    .map(|n| CategoryWeight { name: n.to_string(), weight: 1.0 })
                    .collect(),
                arrival: Arrival::Deterministic,
                seed: 42,
            },
            cluster: ClusterSpec {
                cloud: CloudSpec { model: mock("llama3-70b", 18.82, 0.95, 2.5, 1), max_batch: 20, contention: 0.093 },
                devices,
                edge_models: vec![
                    EdgeModelSpec { model: mock("llama3-8b", 12.6, 0.666, 5.0, 1), size_rank: 0 },
                    EdgeModelSpec { model: mock("qwen2.5-7b", 13.9, 0.742, 3.3, 1), size_rank: 1 },
                    EdgeModelSpec { model: mock("qwen2.5-1.5b", 44.0, 0.609, 2.5, 1), size_rank: 2 },
                ],
                initial_edge_model: "qwen2.5-1.5b".into(),
                switch_penalty_s: 5.0,
                net: NetworkModel { base_rtt_s: 0.02, bandwidth_bytes_per_s: 10e6, bytes_per_token: 4.0 },
                queue_capacity: 4,
                bucket_edges: default_edges(),
                edge_exec: EdgeExecModel::default(),
                probe_lengths: vec![64, 128, 256, 512, 1024, 2048],
            },
            scheduler: SchedulerConfig::default(),
            ensemble: ConfidenceWeights::default(),
            routing_threshold: 300,
            compute_error: true,
            record_trace: false,
            backend: BackendConfig::Mock,
        }
    }
}
