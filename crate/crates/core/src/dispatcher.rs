//! Cloud-side job queue with multi-list bucketing by expected answer length.
//!
//! Jobs go to the bucket whose half-open length range holds their expected
//! length. An idle device pulls a batch from the fullest bucket, so every batch
//! has jobs of similar length.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::Tokens;

/// A sketch-expansion task waiting for an edge device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub query_id: u64,
    pub query_text: String,
    pub sketch_text: String,
    pub sentences: Vec<String>,
    /// Expected answer length `l_i`.
    pub expected_len: Tokens,
    /// Sketch length `|r_i|`.
    pub sketch_len: Tokens,
    pub enqueue_time_s: f64,
    /// `f(l_i)`: the time the cloud alone would need.
    pub deadline_budget_s: f64,
    /// Failed expansion attempts so far.
    pub attempts: u32,
}

/// Edge device capabilities relevant to dispatch and execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    /// Jobs taken per pull.
    pub max_batch: usize,
    /// Concurrent decoding streams.
    pub max_streams: u32,
    /// Prompt tokens the device can hold for one job's parallel groups.
    pub memory_budget_tokens: Tokens,
}

/// Returned when the queue is full; hands the job back to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueFull(pub Job);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub bucket_index: usize,
    pub jobs: Vec<Job>,
}

/// One record per pull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub time_s: f64,
    pub device_id: String,
    pub bucket_index: usize,
    pub job_ids: Vec<u64>,
    pub batch_size: usize,
}

pub const DEFAULT_BUCKET_EDGES: [Tokens; 3] = [100, 250, 500];

#[derive(Debug, Clone, PartialEq)]
pub struct BucketedQueue {
    /// Upper bounds of every bucket but the last: bucket `i` covers
    /// `[edges[i-1], edges[i])`, the last covers `[edges.last(), ∞)`.
    edges: Vec<Tokens>,
    buckets: Vec<VecDeque<Job>>,
    capacity: usize,
    len: usize,
}

impl BucketedQueue {
    /// `edges` must be strictly increasing and positive; `n` edges give `n + 1` buckets.
    pub fn new(edges: Vec<Tokens>, capacity: usize) -> crate::Result<Self> {
        if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first() == Some(&0) {
            return Err(crate::Error::Config(format!("bucket edges must be positive and strictly increasing: {edges:?}")));
        }
        let buckets = vec![VecDeque::new(); edges.len() + 1];
        Ok(BucketedQueue { edges, buckets, capacity, len: 0 })
    }

    pub fn with_default_buckets(capacity: usize) -> Self {
        BucketedQueue::new(DEFAULT_BUCKET_EDGES.to_vec(), capacity).expect("default edges are valid")
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.capacity
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket_sizes(&self) -> Vec<usize> {
        self.buckets.iter().map(VecDeque::len).collect()
    }

    pub fn bucket(&self, index: usize) -> impl Iterator<Item = &Job> {
        self.buckets[index].iter()
    }

    /// Index of the bucket whose range holds `expected_len`.
    pub fn bucket_for(&self, expected_len: Tokens) -> usize {
        self.edges.partition_point(|&edge| edge <= expected_len)
    }

    /// Appends the job to its bucket's tail and returns the bucket index.
    pub fn enqueue(&mut self, job: Job) -> Result<usize, QueueFull> {
        if self.is_full() {
            return Err(QueueFull(job));
        }
        let idx = self.bucket_for(job.expected_len);
        self.buckets[idx].push_back(job);
        self.len += 1;
        Ok(idx)
    }

    /// Takes up to `device.max_batch` jobs from the head of the fullest bucket.
    ///
    /// Ties go to the bucket whose head job is oldest, then to the lowest index.
    pub fn pull_batch(&mut self, device: &DeviceProfile) -> Option<Batch> {
        let chosen = self
            .buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .min_by(|(ia, a), (ib, b)| {
                b.len()
                    .cmp(&a.len())
                    .then_with(|| a[0].enqueue_time_s.total_cmp(&b[0].enqueue_time_s))
                    .then_with(|| ia.cmp(ib))
            })
            .map(|(i, _)| i)?;
        let take = device.max_batch.max(1).min(self.buckets[chosen].len());
        let jobs: Vec<Job> = self.buckets[chosen].drain(..take).collect();
        self.len -= jobs.len();
        Some(Batch { bucket_index: chosen, jobs })
    }

    /// Expected lengths of every queued job, bucket by bucket in FIFO order.
    pub fn queue_token_load(&self) -> Vec<Tokens> {
        self.buckets.iter().flat_map(|b| b.iter().map(|j| j.expected_len)).collect()
    }
}

#[cfg(test)]
pub(crate) fn test_job(id: u64, expected_len: Tokens, enqueue_time_s: f64) -> Job {
    Job {
        query_id: id,
        query_text: format!("q{id}"),
        sketch_text: "a b.".into(),
        sentences: vec!["a b.".into()],
        expected_len,
        sketch_len: expected_len.min(2),
        enqueue_time_s,
        deadline_budget_s: 1.0,
        attempts: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn device(max_batch: usize) -> DeviceProfile {
        DeviceProfile { id: "d0".into(), max_batch, max_streams: 4, memory_budget_tokens: 500 }
    }

    #[test]
    fn bucket_membership() {
        let q = BucketedQueue::with_default_buckets(16);
        assert_eq!(q.bucket_for(120), 1);
        assert_eq!(q.bucket_for(250), 2);
        assert_eq!(q.bucket_for(0), 0);
        assert_eq!(q.bucket_for(99), 0);
        assert_eq!(q.bucket_for(100), 1);
        assert_eq!(q.bucket_for(10_000), 3);
    }

    #[test]
    fn enqueue_trace() {
        let mut q = BucketedQueue::with_default_buckets(16);
        for (i, l) in [80, 120, 300, 320, 90].into_iter().enumerate() {
            q.enqueue(test_job(i as u64, l, i as f64)).unwrap();
        }
        let contents: Vec<Vec<Tokens>> =
            (0..q.bucket_count()).map(|b| q.bucket(b).map(|j| j.expected_len).collect()).collect();
        assert_eq!(contents, vec![vec![80, 90], vec![120], vec![300, 320], vec![]]);
    }

    #[test]
    fn capacity_backpressure() {
        let mut q = BucketedQueue::with_default_buckets(1);
        q.enqueue(test_job(1, 10, 0.0)).unwrap();
        let QueueFull(job) = q.enqueue(test_job(2, 10, 0.0)).unwrap_err();
        assert_eq!(job.query_id, 2);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn tie_break_by_oldest_head() {
        // sizes (2, 1, 2, 0): bucket 0 head at t=1, bucket 2 head at t=3
        let mut q = BucketedQueue::with_default_buckets(16);
        q.enqueue(test_job(1, 300, 3.0)).unwrap();
        q.enqueue(test_job(2, 50, 1.0)).unwrap();
        q.enqueue(test_job(3, 150, 2.0)).unwrap();
        q.enqueue(test_job(4, 60, 4.0)).unwrap();
        q.enqueue(test_job(5, 310, 5.0)).unwrap();
        assert_eq!(q.bucket_sizes(), vec![2, 1, 2, 0]);
        let b = q.pull_batch(&device(2)).unwrap();
        assert_eq!(b.bucket_index, 0);
        assert_eq!(b.jobs.iter().map(|j| j.query_id).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn equal_heads_fall_back_to_lowest_index() {
        let mut q = BucketedQueue::with_default_buckets(16);
        q.enqueue(test_job(1, 300, 0.0)).unwrap();
        q.enqueue(test_job(2, 50, 0.0)).unwrap();
        assert_eq!(q.pull_batch(&device(4)).unwrap().bucket_index, 0);
    }

    #[test]
    fn small_pulls() {
        let mut q = BucketedQueue::with_default_buckets(16);
        assert!(q.pull_batch(&device(2)).is_none());
        q.enqueue(test_job(7, 700, 0.0)).unwrap();
        assert_eq!(q.pull_batch(&device(4)).unwrap().jobs.len(), 1);
        for i in 0..3 {
            q.enqueue(test_job(i, 200, i as f64)).unwrap();
        }
        let b = q.pull_batch(&device(1)).unwrap();
        assert_eq!(b.jobs[0].query_id, 0);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn token_load_tracks_contents() {
        let mut q = BucketedQueue::with_default_buckets(16);
        assert!(q.queue_token_load().is_empty());
        q.enqueue(test_job(1, 200, 0.0)).unwrap();
        q.enqueue(test_job(2, 300, 1.0)).unwrap();
        assert_eq!(q.queue_token_load(), vec![200, 300]);
        q.pull_batch(&device(1)).unwrap();
        assert_eq!(q.queue_token_load().len(), 1);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(BucketedQueue::new(vec![100, 100], 4).is_err());
        assert!(BucketedQueue::new(vec![0, 100], 4).is_err());
        assert_eq!(BucketedQueue::new(vec![], 4).unwrap().bucket_count(), 1);
    }

    proptest! {
        #[test]
        fn fifo_single_bucket_conservation(
            ops in prop::collection::vec(prop_oneof![(1u32..900).prop_map(Some), Just(None)], 1..200),
            max_batch in 1usize..5,
        ) {
            let mut q = BucketedQueue::with_default_buckets(usize::MAX);
            let mut next_id = 0u64;
            let mut pulled = Vec::new();
            for (t, op) in ops.into_iter().enumerate() {
                match op {
                    Some(l) => { q.enqueue(test_job(next_id, l, t as f64)).unwrap(); next_id += 1; }
                    None => if let Some(b) = q.pull_batch(&device(max_batch)) {
                        prop_assert!(b.jobs.len() <= max_batch);
                        prop_assert!(b.jobs.iter().all(|j| q.bucket_for(j.expected_len) == b.bucket_index));
                        pulled.extend(b.jobs);
                    }
                }
            }
            // ids are assigned in enqueue order, so FIFO per bucket means increasing ids per bucket
            for bucket in 0..q.bucket_count() {
                let ids: Vec<u64> = pulled.iter().filter(|j| q.bucket_for(j.expected_len) == bucket).map(|j| j.query_id).collect();
                prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
            }
            let mut all: Vec<u64> = pulled.iter().map(|j| j.query_id).collect();
            all.extend((0..q.bucket_count()).flat_map(|b| q.bucket(b).map(|j| j.query_id).collect::<Vec<_>>()));
            all.sort_unstable();
            prop_assert_eq!(all, (0..next_id).collect::<Vec<_>>());
        }
    }
}
