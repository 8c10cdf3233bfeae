//! Text generation backends used for sketches, full answers and expansions.

mod mock;
mod remote;

pub use mock::{generate, MockBackend, MockModelSpec};
pub use remote::{remote_complete, RemoteBackend};

use serde::{Deserialize, Serialize};

use crate::ensemble::CandidateResponse;
use crate::error::Result;
use crate::Tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sketch,
    FullAnswer,
    Expansion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Sketch target length for [`Role::Sketch`], answer length for
    /// [`Role::FullAnswer`], an upper bound otherwise.
    pub max_tokens: Tokens,
    pub role: Role,
    pub seed: u64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    /// Natural-log probability per generated token; empty when unavailable.
    pub token_logprobs: Vec<f64>,
    pub generated_tokens: Tokens,
    pub wall_time_s: f64,
    /// Set when the backend returned no log-probabilities.
    #[serde(default)]
    pub degraded: bool,
}

impl GenerationResult {
    pub fn into_candidate(self, model_id: &str, job_id: u64) -> CandidateResponse {
        CandidateResponse {
            text: self.text,
            token_logprobs: self.token_logprobs,
            model_id: model_id.to_string(),
            job_id,
            token_count: Some(self.generated_tokens as usize),
        }
    }
}

pub trait Backend: Send + Sync {
    /// One or more samples for a single request.
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GenerationResult>>;

    /// Requests submitted together; results come back in request order.
    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Result<Vec<Vec<GenerationResult>>> {
        reqs.iter().map(|r| self.generate(r)).collect()
    }
}
