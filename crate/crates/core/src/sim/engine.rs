//! Event loop.
//!
//! The cloud serves up to `max_batch` generations at once and admits waiting
//! requests in FIFO order. Concurrent generations share the cloud: each
//! progresses at `rate / (1 + contention·(active-1))` tokens per second, so a
//! completion event is only valid for the set of active generations it was
//! scheduled under (tracked with an epoch counter).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};

use super::config::{Arrival, BackendConfig, ClusterSpec, LengthDistribution, Policy, RunConfig, WorkloadSpec};
use super::report::{
    CalibrationSummary, Counts, EnqueueRecord, QueryMode, QueryRecord, RunReport, StageLatencies, Trace,
};
use crate::backends::{generate, Backend, GenerationRequest, GenerationResult, MockBackend, MockModelSpec, RemoteBackend, Role};
use crate::cost_model::{CostCoefficient, EdgePool, LatencyModel};
use crate::dispatcher::{BucketedQueue, DispatchRecord, Job, QueueFull};
use crate::edge::{
    base_prompt_tokens, expand_job, expansion_budget, groups_prompt_tokens, merge_groups, parallel_makespan, select_model_within, split_sentences,
    word_count, MergeLimits, SlmCatalog, SlmEntry,
};
use crate::ensemble::{rouge_l, CandidateResponse, Scorer};
use crate::error::{Error, Result};
use crate::profiler::{estimate_cost_coefficient, fit_latency_model, snapshot, MeasurementSample};
use crate::scheduler::{choose_sketch_level, measure, predict_answer_length, DecisionRecord, LevelContext, Mode, Query, RunSummary};
use crate::util::{mix_seed, Fnv64};
use crate::Tokens;

/// Offline profiling results the online components work from.
#[derive(Debug, Clone)]
pub struct Calibration {
    /// Cloud latency per request under a full batch.
    pub cloud_f: LatencyModel,
    pub catalog: Option<SlmCatalog>,
}

fn profile_samples(spec: &MockModelSpec, rate: f64, device: &str, probes: &[Tokens]) -> Vec<MeasurementSample> {
    let timed = MockModelSpec { tokens_per_second: rate, samples_per_request: 1, ..spec.clone() };
    probes
        .iter()
        .map(|&len| {
            let req = GenerationRequest {
                prompt: format!("probe {len}"),
                max_tokens: len,
                role: Role::FullAnswer,
                seed: u64::from(len),
                model_id: spec.model_id.clone(),
            };
            let out = &generate(&req, &timed)[0];
            MeasurementSample {
                model_id: spec.model_id.clone(),
                device_id: device.to_string(),
                output_length: out.generated_tokens,
                wall_time_s: out.wall_time_s,
            }
        })
        .collect()
}

/// Profiles the cloud model at full batch and every edge model alone, and
/// derives each edge model's cost coefficient.
pub fn calibrate(cluster: &ClusterSpec) -> Result<Calibration> {
    let loaded = cluster.cloud.stream_rate(cluster.cloud.max_batch as usize);
    let cloud_f = fit_latency_model(&profile_samples(&cluster.cloud.model, loaded, "cloud", &cluster.probe_lengths))?;
    let mut entries = Vec::new();
    for m in &cluster.edge_models {
        let edge_f = fit_latency_model(&profile_samples(&m.model, m.model.tokens_per_second, "edge", &cluster.probe_lengths))?;
        entries.push(SlmEntry {
            model_id: m.model.model_id.clone(),
            size_rank: m.size_rank,
            cost: estimate_cost_coefficient(&cloud_f, &edge_f, &cluster.probe_lengths)?,
            quality: m.model.quality,
        });
    }
    let catalog = if entries.is_empty() { None } else { Some(SlmCatalog::new(entries, cluster.switch_penalty_s)?) };
    Ok(Calibration { cloud_f, catalog })
}

fn sample_length(dist: &LengthDistribution, rng: &mut ChaCha8Rng) -> Tokens {
    match *dist {
        LengthDistribution::Fixed { value } => value,
        LengthDistribution::Uniform { min, max } => rng.random_range(min..=max),
        LengthDistribution::LogNormal { mean, sigma, min, max } => {
            let v = if sigma == 0.0 {
                mean
            } else {
                let mu = mean.ln() - sigma * sigma / 2.0;
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            };
            (v.round() as Tokens).clamp(min, max)
        }
    }
}

/// Queries arriving in `[0, duration)`.
pub fn generate_workload(w: &WorkloadSpec) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[w.seed, 0x776f_726b]));
    let spacing = 60.0 / w.rpm;
    let gap = Exp::new(1.0 / spacing).expect("rpm > 0");
    let total_weight: f64 = w.category_mix.iter().map(|c| c.weight).sum();
    let mut out = Vec::new();
    let mut t = 0.0;
    for id in 0u64.. {
        let arrival = match w.arrival {
            Arrival::Deterministic => id as f64 * spacing,
            Arrival::Poisson => {
                t += gap.sample(&mut rng);
                t
            }
        };
        if arrival >= w.duration_s {
            break;
        }
        let len = sample_length(&w.length_distribution, &mut rng);
        let mut pick = rng.random::<f64>() * total_weight;
        let mut category = w.category_mix.last().map(|c| c.name.clone()).unwrap_or_else(|| "generic".into());
        for c in &w.category_mix {
            if pick < c.weight {
                category = c.name.clone();
                break;
            }
            pick -= c.weight;
        }
        out.push(Query {
            id,
            text: format!("{category} question number {id}"),
            arrival_time_s: arrival,
            category,
            true_answer_length: len,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteTarget {
    Cloud,
    Edge,
}

/// Short predicted answers go to the edge.
pub fn routing_baseline(predicted_len: Tokens, threshold: Tokens) -> RouteTarget {
    if predicted_len < threshold {
        RouteTarget::Edge
    } else {
        RouteTarget::Cloud
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Rpm,
    QueueCapacity,
    /// Bytes per second.
    Bandwidth,
    SketchLevelCount,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rpm" => Ok(SweepParam::Rpm),
            "queue_capacity" => Ok(SweepParam::QueueCapacity),
            "bandwidth" => Ok(SweepParam::Bandwidth),
            "sketch_level_count" => Ok(SweepParam::SketchLevelCount),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter {s:?}; expected rpm, queue_capacity, bandwidth or sketch_level_count"
            ))),
        }
    }
}

impl SweepParam {
    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<u64> {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(Error::Config(format!("{v} is not a whole number")))
            }
        };
        match self {
            SweepParam::Rpm => cfg.workload.rpm = value,
            SweepParam::QueueCapacity => cfg.cluster.queue_capacity = as_count(value)? as usize,
            SweepParam::Bandwidth => cfg.cluster.net.bandwidth_bytes_per_s = value,
            SweepParam::SketchLevelCount => cfg.scheduler.levels = as_count(value)? as u32,
        }
        cfg.validate()
    }
}

/// One run per value, in input order, all sharing the base seed.
pub fn run_sweep(base: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<RunReport>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, v)?;
            run(&cfg)
        })
        .collect()
}

pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    match &cfg.backend {
        BackendConfig::Mock => {
            let specs = std::iter::once(cfg.cluster.cloud.model.clone()).chain(cfg.cluster.edge_models.iter().map(|m| m.model.clone()));
            run_with_backend(cfg, &MockBackend::new(specs)?)
        }
        BackendConfig::Remote { endpoint, timeout_s } => run_with_backend(cfg, &RemoteBackend::new(endpoint.clone(), *timeout_s)?),
    }
}

pub fn run_with_backend(cfg: &RunConfig, backend: &dyn Backend) -> Result<RunReport> {
    cfg.validate()?;
    let cal = calibrate(&cfg.cluster)?;
    let mut engine = Engine::new(cfg, &cal, backend)?;
    engine.run()?;
    engine.finish()
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival(usize),
    CloudTick(u64),
    EdgeArrive(usize),
    JobDone(usize),
    DeviceFree(usize),
}

impl EventKind {
    fn code(self) -> (u64, u64) {
        match self {
            EventKind::Arrival(q) => (1, q as u64),
            EventKind::CloudTick(e) => (2, e),
            EventKind::EdgeArrive(q) => (3, q as u64),
            EventKind::JobDone(q) => (4, q as u64),
            EventKind::DeviceFree(d) => (5, d as u64),
        }
    }
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap pops the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CloudKind {
    Sketch,
    Full,
}

#[derive(Debug)]
struct CloudTask {
    query: usize,
    kind: CloudKind,
    remaining: f64,
    result: GenerationResult,
}

#[derive(Debug)]
struct QState {
    query: Query,
    seed: u64,
    predicted: Tokens,
    mode: QueryMode,
    sketch: Option<GenerationResult>,
    stages: StageLatencies,
    /// Start of the current stage.
    mark: f64,
    device: Option<usize>,
    winner_model: Option<String>,
    answer: Option<String>,
    answer_tokens: Tokens,
    completed_at: Option<f64>,
    rejected: bool,
    attempts: u32,
}

#[derive(Debug)]
struct DeviceState {
    model: String,
    busy: bool,
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    cal: &'a Calibration,
    backend: &'a dyn Backend,
    scorer: Scorer,
    queries: Vec<QState>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    digest: Fnv64,
    active: Vec<CloudTask>,
    waiting: VecDeque<CloudTask>,
    cloud_last: f64,
    cloud_epoch: u64,
    queue: BucketedQueue,
    devices: Vec<DeviceState>,
    server_tokens: u64,
    edge_tokens: u64,
    switches: usize,
    decisions: Vec<DecisionRecord>,
    trace: Option<Trace>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a RunConfig, cal: &'a Calibration, backend: &'a dyn Backend) -> Result<Self> {
        let cluster = &cfg.cluster;
        let capacity = match cfg.policy {
            Policy::Pice => cluster.queue_capacity,
            _ => usize::MAX,
        };
        let start_model = match (cfg.policy, &cal.catalog) {
            (Policy::EdgeOnly | Policy::Routing, Some(cat)) => cat.largest().model_id.clone(),
            _ => cluster.initial_edge_model.clone(),
        };
        let predictor = crate::scheduler::PredictorConfig { seed: cfg.workload.seed, ..cfg.scheduler.predictor };
        let queries = generate_workload(&cfg.workload)
            .into_iter()
            .map(|q| QState {
                seed: mix_seed(&[cfg.workload.seed, q.id]),
                predicted: predict_answer_length(&q, &predictor),
                query: q,
                mode: QueryMode::FullCloud,
                sketch: None,
                stages: StageLatencies::default(),
                mark: 0.0,
                device: None,
                winner_model: None,
                answer: None,
                answer_tokens: 0,
                completed_at: None,
                rejected: false,
                attempts: 0,
            })
            .collect();
        let mut engine = Engine {
            cfg,
            cal,
            backend,
            scorer: Scorer::new(cfg.ensemble)?,
            queries,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            digest: Fnv64::default(),
            active: Vec::new(),
            waiting: VecDeque::new(),
            cloud_last: 0.0,
            cloud_epoch: 0,
            queue: BucketedQueue::new(cluster.bucket_edges.clone(), capacity)?,
            devices: cluster.devices.iter().map(|_| DeviceState { model: start_model.clone(), busy: false }).collect(),
            server_tokens: 0,
            edge_tokens: 0,
            switches: 0,
            decisions: Vec::new(),
            trace: cfg.record_trace.then(Trace::default),
        };
        for i in 0..engine.queries.len() {
            let t = engine.queries[i].query.arrival_time_s;
            engine.push(t, EventKind::Arrival(i));
        }
        Ok(engine)
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn horizon(&self) -> f64 {
        let d = self.cfg.workload.duration_s;
        d + (10.0 * d).max(3600.0)
    }

    fn run(&mut self) -> Result<()> {
        let horizon = self.horizon();
        while let Some(ev) = self.heap.pop() {
            if ev.time > horizon {
                break;
            }
            self.now = ev.time;
            let (tag, id) = ev.kind.code();
            self.digest.write_u64(ev.time.to_bits());
            self.digest.write_u64(tag);
            self.digest.write_u64(id);
            match ev.kind {
                EventKind::Arrival(q) => self.on_arrival(q)?,
                EventKind::CloudTick(epoch) => self.on_cloud_tick(epoch)?,
                EventKind::EdgeArrive(q) => self.on_edge_arrive(q)?,
                EventKind::JobDone(q) => self.on_job_done(q),
                EventKind::DeviceFree(d) => {
                    self.devices[d].busy = false;
                    self.try_dispatch()?;
                }
            }
        }
        Ok(())
    }

    fn catalog(&self) -> Result<&'a SlmCatalog> {
        self.cal.catalog.as_ref().ok_or_else(|| Error::Config("no edge models configured".into()))
    }

    fn on_arrival(&mut self, q: usize) -> Result<()> {
        let predicted = self.queries[q].predicted;
        self.queries[q].mark = self.now;
        match self.cfg.policy {
            Policy::CloudOnly => self.submit_cloud(q, CloudKind::Full, 0),
            Policy::EdgeOnly => self.enqueue_edge_answer(q),
            Policy::Routing => match routing_baseline(predicted, self.cfg.routing_threshold) {
                RouteTarget::Edge => self.enqueue_edge_answer(q),
                RouteTarget::Cloud => self.submit_cloud(q, CloudKind::Full, 0),
            },
            Policy::Pice => {
                let (tier, c) = self.edge_reference()?;
                let n = self.devices.len() as u32;
                let busy = self.devices.iter().filter(|d| d.busy).count() as u32;
                let snap = snapshot(&self.queue, busy, n, &self.cfg.cluster.net, self.now);
                let ctx = LevelContext {
                    f: &self.cal.cloud_f,
                    c,
                    pool: EdgePool::new(n, self.cfg.scheduler.assumed_parallelism)?,
                    net: &self.cfg.cluster.net,
                    tiers: self.cfg.scheduler.tiers,
                };
                let decision = choose_sketch_level(predicted, self.cfg.scheduler.levels, &snap, &ctx, tier)?;
                self.decisions.push(DecisionRecord::new(self.queries[q].query.id, &decision));
                match decision.mode {
                    Mode::Progressive => {
                        self.queries[q].mode = QueryMode::Progressive;
                        self.submit_cloud(q, CloudKind::Sketch, decision.target_sketch_len)
                    }
                    Mode::FullCloud => self.submit_cloud(q, CloudKind::Full, 0),
                }
            }
        }
    }

    /// Capability rank of the model loaded on most devices (ties to the larger
    /// model) and the mean cost coefficient over devices.
    fn edge_reference(&self) -> Result<(u32, CostCoefficient)> {
        let cat = self.catalog()?;
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut c_sum = 0.0;
        for d in &self.devices {
            let entry = cat.get(&d.model).ok_or_else(|| Error::Config(format!("unknown model {}", d.model)))?;
            *counts.entry(entry.size_rank).or_default() += 1;
            c_sum += entry.cost.value();
        }
        let tier = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&r, _)| r).unwrap_or(0);
        Ok((tier, CostCoefficient::new(c_sum / self.devices.len().max(1) as f64)?))
    }

    fn submit_cloud(&mut self, q: usize, kind: CloudKind, sketch_target: Tokens) -> Result<()> {
        let qs = &self.queries[q];
        let req = match kind {
            CloudKind::Sketch => GenerationRequest {
                prompt: format!("Answer briefly as a sketch of short sentences: {}", qs.query.text),
                max_tokens: sketch_target,
                role: Role::Sketch,
                seed: qs.seed,
                model_id: self.cfg.cluster.cloud.model.model_id.clone(),
            },
            CloudKind::Full => GenerationRequest {
                prompt: qs.query.text.clone(),
                max_tokens: qs.query.true_answer_length,
                role: Role::FullAnswer,
                seed: qs.seed,
                model_id: self.cfg.cluster.cloud.model.model_id.clone(),
            },
        };
        let results = match self.backend.generate(&req) {
            Ok(r) if !r.is_empty() => r,
            _ => {
                self.queries[q].rejected = true;
                return Ok(());
            }
        };
        self.server_tokens += results.iter().map(|r| u64::from(r.generated_tokens)).sum::<u64>();
        let result = results.into_iter().next().expect("non-empty");
        self.cloud_advance();
        self.queries[q].mark = self.now;
        self.waiting.push_back(CloudTask { query: q, kind, remaining: f64::from(result.generated_tokens.max(1)), result });
        self.cloud_admit();
        self.cloud_reschedule();
        Ok(())
    }

    fn cloud_advance(&mut self) {
        let elapsed = self.now - self.cloud_last;
        if !self.active.is_empty() && elapsed > 0.0 {
            let rate = self.cfg.cluster.cloud.stream_rate(self.active.len());
            for t in &mut self.active {
                t.remaining -= elapsed * rate;
            }
        }
        self.cloud_last = self.now;
    }

    fn cloud_admit(&mut self) {
        while self.active.len() < self.cfg.cluster.cloud.max_batch as usize {
            let Some(task) = self.waiting.pop_front() else { break };
            let qs = &mut self.queries[task.query];
            qs.stages.cloud_wait_s += self.now - qs.mark;
            qs.mark = self.now;
            self.active.push(task);
        }
    }

    fn cloud_reschedule(&mut self) {
        self.cloud_epoch += 1;
        if self.active.is_empty() {
            return;
        }
        let rate = self.cfg.cluster.cloud.stream_rate(self.active.len());
        let min_remaining = self.active.iter().map(|t| t.remaining).fold(f64::INFINITY, f64::min).max(0.0);
        let epoch = self.cloud_epoch;
        self.push(self.now + min_remaining / rate, EventKind::CloudTick(epoch));
    }

    fn on_cloud_tick(&mut self, epoch: u64) -> Result<()> {
        if epoch != self.cloud_epoch {
            return Ok(());
        }
        self.cloud_advance();
        let (done, running): (Vec<CloudTask>, Vec<CloudTask>) = std::mem::take(&mut self.active).into_iter().partition(|t| t.remaining <= 1e-6);
        self.active = running;
        self.cloud_admit();
        self.cloud_reschedule();
        for task in done {
            let qs = &mut self.queries[task.query];
            qs.stages.cloud_gen_s += self.now - qs.mark;
            qs.mark = self.now;
            match task.kind {
                CloudKind::Full => {
                    qs.answer_tokens = task.result.generated_tokens;
                    qs.answer = Some(task.result.text);
                    qs.winner_model = Some(self.cfg.cluster.cloud.model.model_id.clone());
                    qs.completed_at = Some(self.now);
                }
                CloudKind::Sketch => {
                    let delay = self.cfg.cluster.net.delay(f64::from(task.result.generated_tokens));
                    qs.stages.network_s += delay;
                    qs.sketch = Some(task.result);
                    self.push(self.now + delay, EventKind::EdgeArrive(task.query));
                }
            }
        }
        Ok(())
    }

    fn fallback(&mut self, q: usize) -> Result<()> {
        self.queries[q].mode = QueryMode::Fallback;
        self.submit_cloud(q, CloudKind::Full, 0)
    }

    fn make_job(&self, q: usize) -> Job {
        let qs = &self.queries[q];
        let (sketch_text, sketch_len) = qs.sketch.as_ref().map(|s| (s.text.clone(), s.generated_tokens)).unwrap_or_default();
        Job {
            query_id: qs.query.id,
            query_text: qs.query.text.clone(),
            sentences: split_sentences(&sketch_text),
            sketch_text,
            expected_len: qs.predicted,
            sketch_len,
            enqueue_time_s: self.now,
            deadline_budget_s: self.cal.cloud_f.eval(f64::from(qs.predicted)),
            attempts: qs.attempts,
        }
    }

    fn enqueue(&mut self, q: usize, job: Job) -> std::result::Result<(), QueueFull> {
        let (id, len) = (job.query_id, job.expected_len);
        let bucket = self.queue.enqueue(job)?;
        self.queries[q].mark = self.now;
        if let Some(trace) = &mut self.trace {
            trace.enqueues.push(EnqueueRecord { time_s: self.now, query_id: id, expected_len: len, bucket_index: bucket });
        }
        Ok(())
    }

    fn on_edge_arrive(&mut self, q: usize) -> Result<()> {
        let job = self.make_job(q);
        if job.sentences.is_empty() || self.enqueue(q, job).is_err() {
            return self.fallback(q);
        }
        self.try_dispatch()
    }

    fn enqueue_edge_answer(&mut self, q: usize) -> Result<()> {
        self.queries[q].mode = QueryMode::Edge;
        let job = self.make_job(q);
        if self.enqueue(q, job).is_err() {
            self.queries[q].mode = QueryMode::FullCloud;
            return self.submit_cloud(q, CloudKind::Full, 0);
        }
        self.try_dispatch()
    }

    fn try_dispatch(&mut self) -> Result<()> {
        for d in 0..self.devices.len() {
            if self.queue.is_empty() {
                break;
            }
            if self.devices[d].busy {
                continue;
            }
            let profile = self.cfg.cluster.devices[d].clone();
            if let Some(batch) = self.queue.pull_batch(&profile) {
                if let Some(trace) = &mut self.trace {
                    trace.dispatches.push(DispatchRecord {
                        time_s: self.now,
                        device_id: profile.id.clone(),
                        bucket_index: batch.bucket_index,
                        job_ids: batch.jobs.iter().map(|j| j.query_id).collect(),
                        batch_size: batch.jobs.len(),
                    });
                }
                self.process_batch(d, batch.jobs)?;
            }
        }
        Ok(())
    }

    fn switch_to(&mut self, d: usize, model: &str) -> f64 {
        if self.devices[d].model == model {
            return 0.0;
        }
        self.devices[d].model = model.to_string();
        self.switches += 1;
        self.cfg.cluster.switch_penalty_s
    }

    /// Runs a batch on device `d`: model selection, expansion (or a direct
    /// answer), then one shared timeline for all decoding streams.
    fn process_batch(&mut self, d: usize, jobs: Vec<Job>) -> Result<()> {
        let cat = self.catalog()?;
        let profile = &self.cfg.cluster.devices[d];
        let exec = crate::edge::EdgeExecModel { streams: profile.max_streams, ..self.cfg.cluster.edge_exec };
        let f = &self.cal.cloud_f;
        let mut penalty = 0.0;
        let mut prompt_tokens: u64 = 0;
        let mut solo: Vec<f64> = Vec::new();
        let mut owner: Vec<usize> = Vec::new();
        let mut started: Vec<usize> = Vec::new();
        let batch_len = jobs.len();

        for job in jobs {
            let q = job.query_id as usize;
            {
                let qs = &mut self.queries[q];
                qs.stages.edge_wait_s += self.now - qs.mark;
                qs.mark = self.now;
            }
            let is_answer = self.queries[q].mode == QueryMode::Edge;
            let entry = if is_answer {
                cat.largest()
            } else {
                let samples = self.sample_count(&self.devices[d].model);
                let streams = (batch_len * samples).min(exec.streams as usize).max(1);
                let slowdown = 1.0 + exec.contention * (streams as f64 - 1.0);
                let elapsed = self.now - self.queries[q].query.arrival_time_s;
                let budget = expansion_budget(&job, f).min(job.deadline_budget_s - elapsed);
                select_model_within(budget, &job, 0, &self.devices[d].model, cat, f, slowdown, self.queue.len(), self.queue.capacity())?
            };
            penalty += self.switch_to(d, &entry.model_id);

            let candidates = if is_answer {
                let req = GenerationRequest {
                    prompt: job.query_text.clone(),
                    max_tokens: self.queries[q].query.true_answer_length,
                    role: Role::FullAnswer,
                    seed: self.queries[q].seed,
                    model_id: entry.model_id.clone(),
                };
                match self.backend.generate(&req) {
                    Ok(results) if !results.is_empty() => {
                        prompt_tokens += word_count(&job.query_text) as u64;
                        for r in &results {
                            solo.push(entry.cost.value() * f.eval(f64::from(r.generated_tokens)));
                            owner.push(q);
                            self.edge_tokens += u64::from(r.generated_tokens);
                        }
                        results.into_iter().map(|r| r.into_candidate(&entry.model_id, job.query_id)).collect::<Vec<_>>()
                    }
                    _ => {
                        self.queries[q].mode = QueryMode::FullCloud;
                        self.submit_cloud(q, CloudKind::Full, 0)?;
                        continue;
                    }
                }
            } else {
                let arrival = self.queries[q].query.arrival_time_s;
                let base = base_prompt_tokens(&job.query_text, &job.sketch_text);
                let samples = self.sample_count(&entry.model_id) as u32;
                let limits = MergeLimits {
                    latency_budget_s: (job.deadline_budget_s - (self.now - arrival)).max(0.0),
                    memory_budget_tokens: profile.memory_budget_tokens,
                    max_parallelism: exec.streams,
                };
                let groups = merge_groups(&job.sentences, base, samples, &limits, f, entry.cost, &exec)?;
                let seed = mix_seed(&[self.queries[q].seed, u64::from(job.attempts)]);
                match expand_job(&job, &groups, self.backend, &entry.model_id, seed) {
                    Ok(exp) => {
                        prompt_tokens += u64::from(groups_prompt_tokens(&groups, base));
                        for per_group in &exp.group_tokens {
                            for &t in per_group {
                                solo.push(entry.cost.value() * f.eval(f64::from(t)));
                                owner.push(q);
                            }
                        }
                        self.edge_tokens += exp.total_tokens();
                        exp.candidates
                    }
                    Err(_) => {
                        self.retry_or_fallback(q, job)?;
                        continue;
                    }
                }
            };
            self.pick_winner(q, &candidates)?;
            self.queries[q].device = Some(d);
            started.push(q);
        }

        let offset = penalty + exec.prefill_s_per_token * prompt_tokens as f64;
        let finish = parallel_makespan(&solo, exec.streams, exec.contention);
        let mut device_free = self.now + offset;
        for &q in &started {
            let end = owner.iter().zip(&finish).filter(|(o, _)| **o == q).map(|(_, t)| *t).fold(0.0, f64::max);
            let t = self.now + offset + end;
            device_free = device_free.max(t);
            self.push(t, EventKind::JobDone(q));
        }
        self.devices[d].busy = true;
        self.push(device_free, EventKind::DeviceFree(d));
        Ok(())
    }

    fn sample_count(&self, model_id: &str) -> usize {
        self.cfg
            .cluster
            .edge_models
            .iter()
            .find(|m| m.model.model_id == model_id)
            .map(|m| m.model.samples_per_request.max(1) as usize)
            .unwrap_or(1)
    }

    fn pick_winner(&mut self, q: usize, candidates: &[CandidateResponse]) -> Result<()> {
        let sketch = self.queries[q].sketch.as_ref().map(|s| s.text.clone()).unwrap_or_default();
        let (idx, _) = self.scorer.select_best(candidates, &sketch)?;
        let qs = &mut self.queries[q];
        qs.answer = Some(candidates[idx].text.clone());
        qs.answer_tokens = candidates[idx].len_tokens() as Tokens;
        qs.winner_model = Some(candidates[idx].model_id.clone());
        Ok(())
    }

    fn retry_or_fallback(&mut self, q: usize, mut job: Job) -> Result<()> {
        if job.attempts == 0 {
            job.attempts = 1;
            self.queries[q].attempts = 1;
            job.enqueue_time_s = self.now;
            if self.enqueue(q, job).is_ok() {
                return Ok(());
            }
        }
        self.fallback(q)
    }

    fn on_job_done(&mut self, q: usize) {
        let qs = &mut self.queries[q];
        qs.stages.edge_exec_s += self.now - qs.mark;
        qs.mark = self.now;
        qs.completed_at = Some(self.now);
    }

    fn finish(self) -> Result<RunReport> {
        let cfg = self.cfg;
        let w = &cfg.workload;
        let reference_spec = MockModelSpec { quality: 1.0, samples_per_request: 1, ..cfg.cluster.cloud.model.clone() };
        let mut counts = Counts { arrived: self.queries.len(), model_switches: self.switches, ..Counts::default() };
        let mut summary = RunSummary { window_s: w.duration_s - w.warmup_s, ..RunSummary::default() };
        let mut records = Vec::with_capacity(self.queries.len());
        for qs in self.queries {
            let e2e = qs.completed_at.map(|t| t - qs.query.arrival_time_s);
            let error = match (&qs.answer, qs.completed_at) {
                (Some(answer), Some(_)) if cfg.compute_error => {
                    let req = GenerationRequest {
                        prompt: qs.query.text.clone(),
                        max_tokens: qs.query.true_answer_length,
                        role: Role::FullAnswer,
                        seed: qs.seed,
                        model_id: reference_spec.model_id.clone(),
                    };
                    let reference = &generate(&req, &reference_spec)[0].text;
                    Some((1.0 - rouge_l(reference, answer)).clamp(0.0, 1.0))
                }
                _ => None,
            };
            if qs.rejected {
                counts.rejected += 1;
            } else if let (Some(t), Some(lat)) = (qs.completed_at, e2e) {
                counts.completed += 1;
                match qs.mode {
                    QueryMode::Progressive => counts.progressive += 1,
                    QueryMode::FullCloud => counts.full_cloud += 1,
                    QueryMode::Fallback => counts.fallback += 1,
                    QueryMode::Edge => counts.edge += 1,
                }
                if t >= w.warmup_s && t <= w.duration_s {
                    summary.completed_in_window += 1;
                }
                summary.latencies_s.push(lat);
                if let Some(e) = error {
                    summary.errors.push(e);
                }
            } else {
                counts.in_flight += 1;
            }
            records.push(QueryRecord {
                query_id: qs.query.id,
                category: qs.query.category.clone(),
                arrival_s: qs.query.arrival_time_s,
                mode: qs.mode,
                true_len: qs.query.true_answer_length,
                l_i: qs.predicted,
                sketch_len: qs.sketch.as_ref().map(|s| s.generated_tokens).unwrap_or(0),
                device: qs.device.map(|d| cfg.cluster.devices[d].id.clone()),
                winner_model: qs.winner_model.clone(),
                completion_s: qs.completed_at,
                e2e_latency_s: e2e,
                stages: qs.stages,
                answer_tokens: qs.answer_tokens,
                error,
                rejected: qs.rejected,
            });
        }
        summary.server_tokens = self.server_tokens;
        summary.edge_tokens = self.edge_tokens;
        let metrics = measure(&summary)?;
        let calibration = CalibrationSummary {
            cloud_s_per_token: self.cal.cloud_f.eval(1000.0) / 1000.0,
            edge_cost: self
                .cal
                .catalog
                .iter()
                .flat_map(|c| c.models().iter().map(|m| (m.model_id.clone(), m.cost.value())))
                .collect(),
        };
        Ok(RunReport {
            policy: cfg.policy,
            seed: w.seed,
            metrics,
            counts,
            window_s: (w.warmup_s, w.duration_s),
            calibration,
            records,
            decisions: self.decisions,
            event_digest: format!("{:016x}", self.digest.finish()),
            trace: self.trace,
        })
    }
}
