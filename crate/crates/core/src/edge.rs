//! Edge-side execution: model selection per job, grouping of sketch sentences
//! into parallel expansion prompts, and assembling the expanded answers.

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, GenerationRequest, Role};
use crate::cost_model::{CostCoefficient, LatencyModel};
use crate::dispatcher::Job;
use crate::ensemble::CandidateResponse;
use crate::error::{Error, Result};
use crate::util::mix_seed;
use crate::Tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmEntry {
    pub model_id: String,
    /// 0 is the largest model.
    pub size_rank: u32,
    pub cost: CostCoefficient,
    pub quality: f64,
}

/// Edge models ordered from largest (rank 0) to smallest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmCatalog {
    models: Vec<SlmEntry>,
    pub switch_penalty_s: f64,
}

impl SlmCatalog {
    pub fn new(mut models: Vec<SlmEntry>, switch_penalty_s: f64) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("edge model catalog is empty".into()));
        }
        models.sort_by_key(|m| m.size_rank);
        if models.windows(2).any(|w| w[0].size_rank == w[1].size_rank) {
            return Err(Error::Config("edge model ranks must be distinct".into()));
        }
        for (i, m) in models.iter().enumerate() {
            if models[..i].iter().any(|o| o.model_id == m.model_id) {
                return Err(Error::Config(format!("duplicate edge model {}", m.model_id)));
            }
            if !(0.0..=1.0).contains(&m.quality) {
                return Err(Error::Config(format!("{}: quality must be in [0,1]", m.model_id)));
            }
        }
        if !(switch_penalty_s.is_finite() && switch_penalty_s >= 0.0) {
            return Err(Error::Config("switch penalty must be >= 0".into()));
        }
        Ok(SlmCatalog { models, switch_penalty_s })
    }

    pub fn models(&self) -> &[SlmEntry] {
        &self.models
    }

    pub fn position(&self, model_id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.model_id == model_id)
    }

    pub fn get(&self, model_id: &str) -> Option<&SlmEntry> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    pub fn largest(&self) -> &SlmEntry {
        &self.models[0]
    }

    pub fn smallest(&self) -> &SlmEntry {
        self.models.last().expect("catalog is non-empty")
    }
}

/// Seconds per output token for `model` on a job of expected length `l`:
/// `c·f(l)/l`.
pub fn per_token_time(model: &SlmEntry, f: &LatencyModel, answer_len: Tokens) -> f64 {
    let l = f64::from(answer_len.max(1));
    model.cost.value() * f.eval(l) / l
}

/// Tokens the job still needs after `produced` have been generated.
pub fn remaining_tokens(job: &Job, produced: Tokens) -> Tokens {
    job.expected_len.saturating_sub(produced)
}

/// `f(l) - f(|r|)`: the time left for the edge once the sketch exists.
pub fn expansion_budget(job: &Job, f: &LatencyModel) -> f64 {
    f.eval(f64::from(job.expected_len)) - f.eval(f64::from(job.sketch_len))
}

/// Picks the edge model for a job against [`expansion_budget`].
///
/// The remaining-time estimate is remaining tokens × per-token time ×
/// `slowdown`, where `slowdown >= 1` accounts for streams sharing the device.
/// If the current model's estimate exceeds the budget, the largest model that
/// fits is chosen (the smallest model if none fits). Otherwise, while the queue
/// has room, the largest larger model that fits strictly is chosen; when the
/// queue is full the current model stays.
#[allow(clippy::too_many_arguments)]
pub fn select_model<'a>(
    job: &Job,
    produced: Tokens,
    current: &str,
    catalog: &'a SlmCatalog,
    f: &LatencyModel,
    slowdown: f64,
    queue_size: usize,
    queue_capacity: usize,
) -> Result<&'a SlmEntry> {
    let budget = expansion_budget(job, f);
    select_model_within(budget, job, produced, current, catalog, f, slowdown, queue_size, queue_capacity)
}

/// [`select_model`] with an explicit time budget in seconds.
#[allow(clippy::too_many_arguments)]
pub fn select_model_within<'a>(
    budget_s: f64,
    job: &Job,
    produced: Tokens,
    current: &str,
    catalog: &'a SlmCatalog,
    f: &LatencyModel,
    slowdown: f64,
    queue_size: usize,
    queue_capacity: usize,
) -> Result<&'a SlmEntry> {
    let cur_pos = catalog
        .position(current)
        .ok_or_else(|| Error::Config(format!("current model {current} not in catalog")))?;
    let remaining = f64::from(remaining_tokens(job, produced));
    let slowdown = slowdown.max(1.0);
    let tau = |m: &SlmEntry| remaining * per_token_time(m, f, job.expected_len) * slowdown;
    let models = catalog.models();
    if tau(&models[cur_pos]) > budget_s {
        return Ok(models.iter().find(|m| tau(m) <= budget_s).unwrap_or_else(|| catalog.smallest()));
    }
    if queue_size < queue_capacity {
        if let Some(m) = models[..cur_pos].iter().find(|m| tau(m) < budget_s) {
            return Ok(m);
        }
    }
    Ok(&models[cur_pos])
}

const SENTENCE_TERMINATORS: [char; 5] = ['.', '!', '?', ';', '\n'];

/// Splits text after runs of `. ! ? ;` or newlines. Fragments without any
/// alphanumeric character are dropped; newlines are not kept.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch != '\n' {
            current.push(ch);
        }
        if SENTENCE_TERMINATORS.contains(&ch) {
            while let Some(&next) = chars.peek() {
                if !SENTENCE_TERMINATORS.contains(&next) {
                    break;
                }
                if next != '\n' {
                    current.push(next);
                }
                chars.next();
            }
            push_fragment(&mut out, &mut current);
        }
    }
    push_fragment(&mut out, &mut current);
    out
}

fn push_fragment(out: &mut Vec<String>, current: &mut String) {
    let trimmed = current.trim();
    if trimmed.chars().any(char::is_alphanumeric) {
        out.push(trimmed.to_string());
    }
    current.clear();
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    pub index: usize,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelGroup {
    /// Sorted by sentence index.
    pub members: Vec<GroupMember>,
    pub estimated_output: Tokens,
}

impl ParallelGroup {
    fn new(mut members: Vec<GroupMember>, expansion_factor: f64) -> Self {
        members.sort_by_key(|m| m.index);
        let words: usize = members.iter().map(|m| m.word_count).sum();
        let estimated_output = ((words as f64 * expansion_factor).round() as Tokens).max(1);
        ParallelGroup { members, estimated_output }
    }

    pub fn word_count(&self) -> usize {
        self.members.iter().map(|m| m.word_count).sum()
    }

    /// Member sentences joined in index order, as placed in the prompt.
    pub fn sentence_text(&self) -> String {
        self.members.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

pub fn singleton_groups(sentences: &[String], expansion_factor: f64) -> Vec<ParallelGroup> {
    sentences
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let member = GroupMember { index, text: s.clone(), word_count: word_count(s) };
            ParallelGroup::new(vec![member], expansion_factor)
        })
        .collect()
}

/// One merge pass: sort by word count and pair first with last, second with
/// second-to-last, and so on. An odd middle group stays alone.
pub fn merge_pass(groups: Vec<ParallelGroup>, expansion_factor: f64) -> Vec<ParallelGroup> {
    let mut sorted = groups;
    sorted.sort_by(|a, b| b.word_count().cmp(&a.word_count()).then(a.members[0].index.cmp(&b.members[0].index)));
    let k = sorted.len();
    let mut slots: Vec<Option<ParallelGroup>> = sorted.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(k.div_ceil(2));
    for i in 0..k.div_ceil(2) {
        let j = k - 1 - i;
        let mut members = slots[i].take().expect("slot used once").members;
        if j != i {
            members.extend(slots[j].take().expect("slot used once").members);
        }
        out.push(ParallelGroup::new(members, expansion_factor));
    }
    out
}

/// How an edge device turns groups into time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeExecModel {
    /// Output tokens per sketch word.
    pub expansion_factor: f64,
    /// Prompt processing cost per prompt token.
    pub prefill_s_per_token: f64,
    /// Concurrent decoding streams per device.
    pub streams: u32,
    /// Per-stream slowdown per extra concurrent stream.
    pub contention: f64,
}

impl Default for EdgeExecModel {
    fn default() -> Self {
        EdgeExecModel { expansion_factor: 2.5, prefill_s_per_token: 0.002, streams: 4, contention: 0.1 }
    }
}

impl EdgeExecModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.expansion_factor > 0.0 && self.prefill_s_per_token >= 0.0 && self.contention >= 0.0 && self.streams >= 1) {
            return Err(Error::Config("invalid edge execution model".into()));
        }
        Ok(())
    }
}

/// Finish times of tasks sharing `streams` decoding slots. Tasks are admitted
/// in order as slots free up; with `b` tasks running each progresses at
/// `1 / (1 + contention·(b-1))` of its solo speed.
pub fn parallel_makespan(solo_times: &[f64], streams: u32, contention: f64) -> Vec<f64> {
    let n = solo_times.len();
    let mut finish = vec![0.0; n];
    let mut remaining: Vec<f64> = solo_times.iter().map(|t| t.max(0.0)).collect();
    let mut next = 0usize;
    let mut active: Vec<usize> = Vec::new();
    let mut now = 0.0;
    let cap = streams.max(1) as usize;
    loop {
        while active.len() < cap && next < n {
            active.push(next);
            next += 1;
        }
        if active.is_empty() {
            break;
        }
        let rate = 1.0 / (1.0 + contention * (active.len() as f64 - 1.0));
        let step = active.iter().map(|&i| remaining[i]).fold(f64::INFINITY, f64::min) / rate;
        now += step;
        active.retain(|&i| {
            remaining[i] -= step * rate;
            if remaining[i] <= 1e-12 {
                finish[i] = now;
                false
            } else {
                true
            }
        });
    }
    finish
}

/// Prompt tokens shared by every group of a job: template, query and sketch.
pub fn base_prompt_tokens(query: &str, sketch: &str) -> Tokens {
    word_count(&render_expansion_prompt(query, sketch, "")) as Tokens
}

pub fn groups_prompt_tokens(groups: &[ParallelGroup], base_prompt: Tokens) -> Tokens {
    groups.iter().map(|g| base_prompt + g.word_count() as Tokens).sum()
}

/// Prompt tokens spent on repeating the shared context once per extra group.
pub fn duplicated_context_tokens(groups: &[ParallelGroup], base_prompt: Tokens) -> Tokens {
    base_prompt * (groups.len().max(1) as Tokens - 1)
}

/// Estimated edge time for one job's groups, `samples` streams per group.
pub fn estimate_job_time(
    groups: &[ParallelGroup],
    base_prompt: Tokens,
    samples: u32,
    f: &LatencyModel,
    c: CostCoefficient,
    exec: &EdgeExecModel,
) -> f64 {
    let solo: Vec<f64> = groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(c.value() * f.eval(f64::from(g.estimated_output)), samples.max(1) as usize))
        .collect();
    let decode = parallel_makespan(&solo, exec.streams, exec.contention).into_iter().fold(0.0, f64::max);
    exec.prefill_s_per_token * f64::from(groups_prompt_tokens(groups, base_prompt)) + decode
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeLimits {
    pub latency_budget_s: f64,
    /// Cap on [`duplicated_context_tokens`] for one job.
    pub memory_budget_tokens: Tokens,
    pub max_parallelism: u32,
}

/// Repeats merge passes while the merged layout still meets the latency and
/// memory budgets. Passes are forced while the layout exceeds the memory
/// budget or `max_parallelism`. Memory counts the query and sketch context
/// repeated in every group beyond the first.
#[allow(clippy::too_many_arguments)]
pub fn merge_groups(
    sentences: &[String],
    base_prompt: Tokens,
    samples: u32,
    limits: &MergeLimits,
    f: &LatencyModel,
    c: CostCoefficient,
    exec: &EdgeExecModel,
) -> Result<Vec<ParallelGroup>> {
    if sentences.is_empty() {
        return Err(Error::InvalidInput("no sentences to expand".into()));
    }
    let ef = exec.expansion_factor;
    let mut groups = singleton_groups(sentences, ef);
    while groups.len() > 1 {
        let forced = groups.len() > limits.max_parallelism.max(1) as usize
            || duplicated_context_tokens(&groups, base_prompt) > limits.memory_budget_tokens;
        let merged = merge_pass(groups.clone(), ef);
        let fits = estimate_job_time(&merged, base_prompt, samples, f, c, exec) <= limits.latency_budget_s
            && duplicated_context_tokens(&merged, base_prompt) <= limits.memory_budget_tokens;
        if forced || fits {
            groups = merged;
        } else {
            break;
        }
    }
    Ok(groups)
}

const PROMPT_HEAD: &str = "I have a question about ";
const PROMPT_SKETCH: &str = ". The simplification answer is as follows: ";
const PROMPT_SENTENCE: &str = ". Now, please help me complete and only complete the writing of a short sentence ";
const PROMPT_TAIL: &str = ". Do not continue with other sentences!";

pub fn render_expansion_prompt(query: &str, sketch: &str, sentence: &str) -> String {
    format!("{PROMPT_HEAD}{query}{PROMPT_SKETCH}{sketch}{PROMPT_SENTENCE}{sentence}{PROMPT_TAIL}")
}

/// The `{sentence}` slot of a rendered expansion prompt.
pub fn parse_expansion_prompt(prompt: &str) -> Option<&str> {
    let start = prompt.rfind(PROMPT_SENTENCE)? + PROMPT_SENTENCE.len();
    prompt[start..].strip_suffix(PROMPT_TAIL)
}

/// Expanded answers for one job, one per backend sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub candidates: Vec<CandidateResponse>,
    /// Tokens generated per group per sample, indexed `[group][sample]`.
    pub group_tokens: Vec<Vec<Tokens>>,
}

impl Expansion {
    pub fn total_tokens(&self) -> u64 {
        self.group_tokens.iter().flatten().map(|&t| u64::from(t)).sum()
    }
}

/// Renders one prompt per group, submits them as one batch and stitches each
/// sample's group outputs back into sentence order.
pub fn expand_job(job: &Job, groups: &[ParallelGroup], backend: &dyn Backend, model_id: &str, seed: u64) -> Result<Expansion> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("no groups to expand".into()));
    }
    let requests: Vec<GenerationRequest> = groups
        .iter()
        .enumerate()
        .map(|(gi, g)| GenerationRequest {
            prompt: render_expansion_prompt(&job.query_text, &job.sketch_text, &g.sentence_text()),
            max_tokens: g.estimated_output.saturating_mul(2),
            role: Role::Expansion,
            seed: mix_seed(&[seed, job.query_id, gi as u64]),
            model_id: model_id.to_string(),
        })
        .collect();
    let results = backend.generate_batch(&requests)?;
    let samples = results.iter().map(Vec::len).min().unwrap_or(0);
    if samples == 0 {
        return Err(Error::Protocol("backend returned no samples".into()));
    }
    let group_tokens = results.iter().map(|r| r.iter().map(|s| s.generated_tokens).collect()).collect();
    let mut candidates = Vec::with_capacity(samples);
    for s in 0..samples {
        // (sentence index, text, logprobs)
        let mut pieces: Vec<(usize, String, Vec<f64>)> = Vec::new();
        let mut all_lp = true;
        let mut tokens = 0usize;
        for (g, res) in groups.iter().zip(&results) {
            let out = &res[s];
            tokens += out.generated_tokens as usize;
            all_lp &= !out.token_logprobs.is_empty();
            let lines: Vec<&str> = out.text.lines().filter(|l| !l.trim().is_empty()).collect();
            let line_words: usize = lines.iter().map(|l| word_count(l)).sum();
            let per_line = lines.len() == g.members.len() && out.token_logprobs.len() == line_words;
            if per_line {
                let mut offset = 0;
                for (m, line) in g.members.iter().zip(&lines) {
                    let n = word_count(line);
                    pieces.push((m.index, line.trim().to_string(), out.token_logprobs[offset..offset + n].to_vec()));
                    offset += n;
                }
            } else {
                pieces.push((g.members[0].index, out.text.trim().to_string(), out.token_logprobs.clone()));
            }
        }
        pieces.sort_by_key(|p| p.0);
        let text = pieces.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join(" ");
        let logprobs = if all_lp { pieces.into_iter().flat_map(|p| p.2).collect() } else { Vec::new() };
        let mut cand = CandidateResponse::new(text, logprobs, model_id, job.query_id);
        cand.token_count = Some(tokens);
        candidates.push(cand);
    }
    Ok(Expansion { candidates, group_tokens })
}
