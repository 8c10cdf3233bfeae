//! Run reports and per-query records.

use serde::{Deserialize, Serialize};

use super::config::Policy;
use crate::dispatcher::DispatchRecord;
use crate::scheduler::{DecisionRecord, MetricVector};
use crate::Tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Answered entirely by the cloud model.
    FullCloud,
    /// Sketch on the cloud, expansion on an edge device.
    Progressive,
    /// A sketch was produced but the answer came from the cloud after all.
    Fallback,
    /// Answered entirely by an edge model.
    Edge,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryMode::FullCloud => "full_cloud",
            QueryMode::Progressive => "progressive",
            QueryMode::Fallback => "fallback",
            QueryMode::Edge => "edge",
        }
    }
}

/// Time spent per stage; the fields sum to the end-to-end latency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub cloud_wait_s: f64,
    pub cloud_gen_s: f64,
    pub network_s: f64,
    pub edge_wait_s: f64,
    pub edge_exec_s: f64,
}

impl StageLatencies {
    pub fn total(&self) -> f64 {
        self.cloud_wait_s + self.cloud_gen_s + self.network_s + self.edge_wait_s + self.edge_exec_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub category: String,
    pub arrival_s: f64,
    pub mode: QueryMode,
    pub true_len: Tokens,
    pub l_i: Tokens,
    pub sketch_len: Tokens,
    pub device: Option<String>,
    pub winner_model: Option<String>,
    pub completion_s: Option<f64>,
    pub e2e_latency_s: Option<f64>,
    pub stages: StageLatencies,
    pub answer_tokens: Tokens,
    /// `1 - ROUGE-L` against the reference answer.
    pub error: Option<f64>,
    pub rejected: bool,
}

/// Flat per-query row for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub query_id: u64,
    pub arrival: f64,
    pub mode: String,
    pub sketch_len: Tokens,
    pub l_i: Tokens,
    pub device: String,
    pub e2e_latency_s: String,
    pub winner_model: String,
}

impl From<&QueryRecord> for CsvRow {
    fn from(r: &QueryRecord) -> Self {
        CsvRow {
            query_id: r.query_id,
            arrival: r.arrival_s,
            mode: r.mode.name().to_string(),
            sketch_len: r.sketch_len,
            l_i: r.l_i,
            device: r.device.clone().unwrap_or_default(),
            e2e_latency_s: r.e2e_latency_s.map(|v| v.to_string()).unwrap_or_default(),
            winner_model: r.winner_model.clone().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub arrived: usize,
    pub completed: usize,
    pub rejected: usize,
    pub in_flight: usize,
    pub progressive: usize,
    pub full_cloud: usize,
    pub fallback: usize,
    pub edge: usize,
    pub model_switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnqueueRecord {
    pub time_s: f64,
    pub query_id: u64,
    pub expected_len: Tokens,
    pub bucket_index: usize,
}

/// Dispatcher activity, kept when tracing is enabled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub enqueues: Vec<EnqueueRecord>,
    pub dispatches: Vec<DispatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    /// Cloud seconds per token under a full batch.
    pub cloud_s_per_token: f64,
    pub edge_cost: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: Policy,
    pub seed: u64,
    pub metrics: MetricVector,
    pub counts: Counts,
    pub window_s: (f64, f64),
    pub calibration: CalibrationSummary,
    pub records: Vec<QueryRecord>,
    pub decisions: Vec<DecisionRecord>,
    /// FNV-1a over every processed event, in hex.
    pub event_digest: String,
    pub trace: Option<Trace>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.records.iter().map(CsvRow::from).collect()
    }
}
