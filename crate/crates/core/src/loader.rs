//! Scored patch loader: producer threads load wells, extract and score
//! patches, drop those at or below the threshold, encode the rest and hand
//! them to a single consumer through a bounded queue.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{csv_err, extract_patches, io_err, load_well, normalize_well, CorpusError, Patch, WellLog};
use crate::nn::ParamStore;
use crate::tokenizer::{quantize, Tokenizer};

#[derive(Debug, Error)]
pub enum LoaderError {
    #[error("all channels of patch {well_id}@{start} are missing")]
    AllChannelsMissing { well_id: String, start: usize },
    #[error("invalid loader config: {0}")]
    InvalidConfig(String),
    #[error("consumer panicked: {0}")]
    ConsumerPanic(String),
    #[error("producer failed: {0}")]
    Producer(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub score_threshold: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            lambda1: 0.5,
            lambda2: 0.5,
            score_threshold: f64::NEG_INFINITY,
        }
    }
}

/// `λ1 · mean|Δ_depth| + λ2 · Var(channel means)` over present channels.
pub fn score_patch(p: &Patch, sp: &ScoreParams) -> Result<f64, LoaderError> {
    let present: Vec<usize> = p.present_channels().collect();
    if present.is_empty() {
        return Err(LoaderError::AllChannelsMissing {
            well_id: p.well_id.clone(),
            start: p.start_index,
        });
    }
    let l = p.len();
    let mut grad = 0.0;
    let mut means = Vec::with_capacity(present.len());
    for &c in &present {
        let row = p.values.row(c);
        if l > 1 {
            grad += (1..l).map(|t| (row[t] - row[t - 1]).abs()).sum::<f64>() / (l - 1) as f64;
        }
        means.push(row.sum() / l as f64);
    }
    grad /= present.len() as f64;
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64;
    Ok(sp.lambda1 * grad + sp.lambda2 * var)
}

/// Nearest-rank quantile of `scores` (q in [0,1]); −∞ for an empty slice.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> f64 {
    if scores.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

/// Blocking bounded FIFO for many producers and one consumer. Closes once
/// every registered producer has finished; a poisoned queue wakes everyone.
pub struct BoundedQueue<T> {
    inner: Mutex<QueueState<T>>,
    not_full: Condvar,
    not_empty: Condvar,
    capacity: usize,
}

struct QueueState<T> {
    items: VecDeque<T>,
    producers: usize,
    poisoned: bool,
    occupancy_sum: u64,
    pops: u64,
    max_occupancy: usize,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize, producers: usize) -> Self {
        assert!(capacity >= 1);
        BoundedQueue {
            inner: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                producers,
                poisoned: false,
                occupancy_sum: 0,
                pops: 0,
                max_occupancy: 0,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
            capacity,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueState<T>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Blocks while full. Returns false if the queue was poisoned.
    pub fn push(&self, item: T) -> bool {
        let mut st = self.lock();
        while st.items.len() >= self.capacity && !st.poisoned {
            st = self.not_full.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        if st.poisoned {
            return false;
        }
        st.items.push_back(item);
        assert!(st.items.len() <= self.capacity, "queue over capacity");
        st.max_occupancy = st.max_occupancy.max(st.items.len());
        drop(st);
        self.not_empty.notify_one();
        true
    }

    /// Blocks while empty and producers remain. `None` once closed and
    /// drained, or poisoned.
    pub fn pop(&self) -> Option<T> {
        let mut st = self.lock();
        loop {
            if st.poisoned {
                return None;
            }
            let occ = st.items.len();
            if let Some(item) = st.items.pop_front() {
                st.occupancy_sum += occ as u64;
                st.pops += 1;
                drop(st);
                self.not_full.notify_one();
                return Some(item);
            }
            if st.producers == 0 {
                return None;
            }
            st = self.not_empty.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn producer_done(&self) {
        let mut st = self.lock();
        st.producers = st.producers.saturating_sub(1);
        drop(st);
        self.not_empty.notify_all();
    }

    pub fn poison(&self) {
        self.lock().poisoned = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }

    /// Mean queue length observed at each successful pop.
    pub fn mean_occupancy(&self) -> f64 {
        let st = self.lock();
        if st.pops == 0 {
            0.0
        } else {
            st.occupancy_sum as f64 / st.pops as f64
        }
    }

    pub fn max_occupancy(&self) -> usize {
        self.lock().max_occupancy
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Where producers read wells from.
#[derive(Debug, Clone)]
pub enum WellSource {
    /// Already-loaded wells (normalized on demand).
    Memory(Vec<WellLog>),
    /// CSV files, read and normalized by the producer.
    Files(Vec<PathBuf>),
}

impl WellSource {
    pub fn len(&self) -> usize {
        match self {
            WellSource::Memory(w) => w.len(),
            WellSource::Files(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn load(&self, i: usize) -> Result<WellLog, CorpusError> {
        let well = match self {
            WellSource::Memory(w) => w[i].clone(),
            WellSource::Files(f) => load_well(&f[i])?,
        };
        normalize_well(&well)
    }
}

/// Producer-side encoder: tokenizer weights shared read-only by workers.
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    pub tokenizer: &'a Tokenizer,
    pub store: &'a ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatch {
    pub well_id: String,
    pub start_index: usize,
    pub rel_depth: f64,
    pub score: f64,
    pub token: Option<usize>,
    pub latent: Option<Vec<f64>>,
}

impl EncodedPatch {
    /// Total-order key used for multiset comparison.
    pub fn key(&self) -> (String, usize, u64, Option<usize>, Vec<u64>) {
        (
            self.well_id.clone(),
            self.start_index,
            self.score.to_bits(),
            self.token,
            self.latent.iter().flatten().map(|v| v.to_bits()).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoaderConfig {
    pub workers: usize,
    pub queue_capacity: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub score: ScoreParams,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        LoaderConfig {
            workers: 4,
            queue_capacity: 64,
            patch_len: 64,
            stride: 32,
            score: ScoreParams::default(),
        }
    }
}

impl LoaderConfig {
    pub fn validate(&self) -> Result<(), LoaderError> {
        if self.workers == 0 {
            return Err(LoaderError::InvalidConfig("workers must be at least 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(LoaderError::InvalidConfig("queue_capacity must be at least 1".into()));
        }
        if self.patch_len == 0 || self.stride == 0 {
            return Err(LoaderError::InvalidConfig("patch_len and stride must be positive".into()));
        }
        if self.score.lambda1 < 0.0 || self.score.lambda2 < 0.0 {
            return Err(LoaderError::InvalidConfig("score weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LoaderStats {
    pub produced: usize,
    pub scored: usize,
    pub filtered_out: usize,
    pub enqueued: usize,
    pub consumed: usize,
    pub wall_time_s: f64,
    pub throughput: f64,
    pub mean_occupancy: f64,
    pub max_occupancy: usize,
}

#[derive(Default)]
struct WorkerCounts {
    produced: usize,
    filtered_out: usize,
    enqueued: usize,
}

/// Processes one well: yields every patch above the threshold, encoded.
fn process_well(
    source: &WellSource,
    i: usize,
    cfg: &LoaderConfig,
    encoder: Option<Encoder<'_>>,
    counts: &mut WorkerCounts,
    mut emit: impl FnMut(EncodedPatch) -> bool,
) -> Result<bool, LoaderError> {
    let well = source.load(i)?;
    for p in extract_patches(&well, cfg.patch_len, cfg.stride) {
        counts.produced += 1;
        let score = score_patch(&p, &cfg.score)?;
        if score <= cfg.score.score_threshold {
            counts.filtered_out += 1;
            continue;
        }
        let (token, latent) = match encoder {
            Some(e) => {
                let z = e
                    .tokenizer
                    .encode_patch(e.store, &p)
                    .map_err(|err| LoaderError::Producer(err.to_string()))?;
                let (k, _) = quantize(&z, &e.tokenizer.codebook);
                (Some(k), Some(z))
            }
            None => (None, None),
        };
        counts.enqueued += 1;
        let item = EncodedPatch {
            well_id: p.well_id.clone(),
            start_index: p.start_index,
            rel_depth: p.rel_depth,
            score,
            token,
            latent,
        };
        if !emit(item) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Asynchronous loader. Producers claim wells from a shared counter; the
/// calling thread is the consumer.
pub fn run_loader(
    source: &WellSource,
    cfg: &LoaderConfig,
    encoder: Option<Encoder<'_>>,
    mut consumer: impl FnMut(EncodedPatch),
) -> Result<LoaderStats, LoaderError> {
    cfg.validate()?;
    let start = Instant::now();
    let queue = BoundedQueue::new(cfg.queue_capacity, cfg.workers);
    let next = AtomicUsize::new(0);
    let mut consumed = 0;
    let mut consumer_panic = None;

    let results: Vec<Result<WorkerCounts, LoaderError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|_| {
                let queue = &queue;
                let next = &next;
                s.spawn(move || {
                    let mut counts = WorkerCounts::default();
                    let mut run = || -> Result<(), LoaderError> {
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= source.len() {
                                return Ok(());
                            }
                            if !process_well(source, i, cfg, encoder, &mut counts, |item| queue.push(item))? {
                                return Ok(());
                            }
                        }
                    };
                    let res = run();
                    if res.is_err() {
                        queue.poison();
                    }
                    queue.producer_done();
                    res.map(|_| counts)
                })
            })
            .collect();

        while let Some(item) = queue.pop() {
            match catch_unwind(AssertUnwindSafe(|| consumer(item))) {
                Ok(()) => consumed += 1,
                Err(e) => {
                    consumer_panic = Some(panic_message(e));
                    queue.poison();
                    break;
                }
            }
        }
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| Err(LoaderError::Producer(panic_message(e)))))
            .collect()
    });

    if let Some(msg) = consumer_panic {
        return Err(LoaderError::ConsumerPanic(msg));
    }
    let mut stats = LoaderStats::default();
    for r in results {
        let c = r?;
        stats.produced += c.produced;
        stats.filtered_out += c.filtered_out;
        stats.enqueued += c.enqueued;
    }
    stats.scored = stats.produced;
    stats.consumed = consumed;
    stats.wall_time_s = start.elapsed().as_secs_f64();
    stats.throughput = throughput(consumed, stats.wall_time_s);
    stats.mean_occupancy = queue.mean_occupancy();
    stats.max_occupancy = queue.max_occupancy();
    Ok(stats)
}

fn throughput(n: usize, secs: f64) -> f64 {
    if secs > 0.0 {
        n as f64 / secs
    } else {
        0.0
    }
}

/// Single-threaded baseline: the same work, consumed inline.
pub fn run_sync(
    source: &WellSource,
    cfg: &LoaderConfig,
    encoder: Option<Encoder<'_>>,
    mut consumer: impl FnMut(EncodedPatch),
) -> Result<LoaderStats, LoaderError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut counts = WorkerCounts::default();
    let mut consumed = 0;
    for i in 0..source.len() {
        process_well(source, i, cfg, encoder, &mut counts, |item| {
            consumer(item);
            consumed += 1;
            true
        })?;
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(LoaderStats {
        produced: counts.produced,
        scored: counts.produced,
        filtered_out: counts.filtered_out,
        enqueued: counts.enqueued,
        consumed,
        wall_time_s: wall,
        throughput: throughput(consumed, wall),
        mean_occupancy: 0.0,
        max_occupancy: 0,
    })
}

/// Delivered items sorted into a canonical order.
pub fn collect_sorted(
    source: &WellSource,
    cfg: &LoaderConfig,
    encoder: Option<Encoder<'_>>,
    asynchronous: bool,
) -> Result<Vec<EncodedPatch>, LoaderError> {
    let mut items = Vec::new();
    if asynchronous {
        run_loader(source, cfg, encoder, |p| items.push(p))?;
    } else {
        run_sync(source, cfg, encoder, |p| items.push(p))?;
    }
    items.sort_by_key(|p| p.key());
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub workers: usize,
    pub queue_capacity: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_id: usize,
    pub workers: usize,
    pub queue_capacity: usize,
    pub threshold: f64,
    pub sync_throughput: f64,
    pub async_throughput: f64,
    pub speedup: f64,
    pub mean_occupancy: f64,
}

/// Runs the synchronous baseline and the asynchronous loader for each
/// configuration with the same scoring and a sleeping consumer.
pub fn loader_bench(
    source: &WellSource,
    base: &LoaderConfig,
    configs: &[BenchConfig],
    consumer_latency: Duration,
    encoder: Option<Encoder<'_>>,
) -> Result<Vec<BenchRow>, LoaderError> {
    if source.is_empty() {
        return Err(LoaderError::InvalidConfig("empty corpus".into()));
    }
    let consume = |_: EncodedPatch| {
        if !consumer_latency.is_zero() {
            std::thread::sleep(consumer_latency);
        }
    };
    configs
        .iter()
        .enumerate()
        .map(|(id, bc)| {
            let cfg = LoaderConfig {
                workers: bc.workers,
                queue_capacity: bc.queue_capacity,
                score: ScoreParams {
                    score_threshold: bc.threshold,
                    ..base.score
                },
                ..*base
            };
            let s = run_sync(source, &cfg, encoder, consume)?;
            let a = run_loader(source, &cfg, encoder, consume)?;
            Ok(BenchRow {
                config_id: id,
                workers: bc.workers,
                queue_capacity: bc.queue_capacity,
                threshold: bc.threshold,
                sync_throughput: s.throughput,
                async_throughput: a.throughput,
                speedup: if s.throughput > 0.0 { a.throughput / s.throughput } else { 0.0 },
                mean_occupancy: a.mean_occupancy,
            })
        })
        .collect()
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<(), LoaderError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CurveKind, SynthConfig};
    use ndarray::Array2;

    fn patch_of(rows: Vec<Vec<f64>>, missing: Vec<bool>) -> Patch {
        let l = rows[0].len();
        Patch {
            well_id: "w".into(),
            start_index: 0,
            values: Array2::from_shape_vec((5, l), rows.concat()).unwrap(),
            rel_depth: 0.0,
            curve_kinds: CurveKind::ALL.to_vec(),
            missing_mask: missing,
        }
    }

    #[test]
    fn score_examples() {
        let sp = ScoreParams::default();
        let c = patch_of(vec![vec![2.0; 4]; 5], vec![false; 5]);
        assert_eq!(score_patch(&c, &sp).unwrap(), 0.0);

        let mut rows = vec![vec![0.0; 4]; 5];
        rows[0] = vec![0.0, 0.0, 1.0, 1.0];
        let p = patch_of(rows, vec![false, true, true, true, true]);
        let only_grad = ScoreParams {
            lambda1: 1.0,
            lambda2: 0.0,
            ..sp
        };
        assert!((score_patch(&p, &only_grad).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let rows = vec![vec![1.0; 4], vec![3.0; 4], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]];
        let p = patch_of(rows, vec![false, false, true, true, true]);
        let only_var = ScoreParams {
            lambda1: 0.0,
            lambda2: 2.0,
            ..sp
        };
        assert!((score_patch(&p, &only_var).unwrap() - 2.0).abs() < 1e-15);

        let p = patch_of(vec![vec![0.0; 4]; 5], vec![true; 5]);
        assert!(matches!(score_patch(&p, &sp), Err(LoaderError::AllChannelsMissing { .. })));
    }

    fn source(n: usize) -> WellSource {
        let cfg = SynthConfig {
            n_wells: n,
            depth_range: (1000.0, 1040.0),
            ..Default::default()
        };
        WellSource::Memory(generate_synthetic_corpus(&cfg).unwrap().wells)
    }

    #[test]
    fn infinite_threshold_delivers_nothing() {
        let cfg = LoaderConfig {
            workers: 3,
            score: ScoreParams {
                score_threshold: f64::INFINITY,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut n = 0;
        let stats = run_loader(&source(4), &cfg, None, |_| n += 1).unwrap();
        assert_eq!(n, 0);
        assert_eq!(stats.consumed, 0);
        assert_eq!(stats.filtered_out, stats.produced);
    }

    #[test]
    fn async_matches_sync_for_any_worker_count() {
        let src = source(6);
        let mut cfg = LoaderConfig {
            queue_capacity: 2,
            ..Default::default()
        };
        let oracle = collect_sorted(&src, &cfg, None, false).unwrap();
        assert!(!oracle.is_empty());
        for w in [1, 2, 5] {
            cfg.workers = w;
            assert_eq!(collect_sorted(&src, &cfg, None, true).unwrap(), oracle);
        }
    }

    #[test]
    fn consumer_panic_propagates() {
        let cfg = LoaderConfig {
            workers: 2,
            queue_capacity: 1,
            ..Default::default()
        };
        let mut n = 0;
        let res = run_loader(&source(3), &cfg, None, |_| {
            n += 1;
            if n == 3 {
                panic!("boom");
            }
        });
        match res {
            Err(LoaderError::ConsumerPanic(m)) => assert!(m.contains("boom")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_aborts_cleanly() {
        let src = WellSource::Files(vec![PathBuf::from("/nonexistent/w.csv")]);
        let res = run_loader(&src, &LoaderConfig::default(), None, |_| {});
        assert!(matches!(res, Err(LoaderError::Corpus(_))));
    }

    #[test]
    fn queue_bounded_and_closes() {
        let q = BoundedQueue::new(2, 1);
        std::thread::scope(|s| {
            s.spawn(|| {
                for i in 0..50 {
                    assert!(q.push(i));
                }
                q.producer_done();
            });
            let mut got = Vec::new();
            while let Some(v) = q.pop() {
                got.push(v);
            }
            assert_eq!(got, (0..50).collect::<Vec<_>>());
        });
        assert!(q.max_occupancy() <= 2);
    }

    #[test]
    fn calibrate_examples() {
        assert_eq!(calibrate_threshold(&[5.0, 1.0, 3.0, 2.0, 4.0, 6.0, 7.0, 8.0, 9.0, 10.0], 0.3), 3.0);
        assert_eq!(calibrate_threshold(&[], 0.3), f64::NEG_INFINITY);
    }

    #[test]
    fn bench_rows_match_configs() {
        let src = source(2);
        let configs = [
            BenchConfig {
                workers: 1,
                queue_capacity: 4,
                threshold: f64::NEG_INFINITY,
            },
            BenchConfig {
                workers: 2,
                queue_capacity: 4,
                threshold: 0.1,
            },
        ];
        let rows = loader_bench(&src, &LoaderConfig::default(), &configs, Duration::ZERO, None).unwrap();
        assert_eq!(rows.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_bench_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with(
            "config_id,workers,queue_capacity,threshold,sync_throughput,async_throughput,speedup,mean_occupancy"
        ));
        assert_eq!(text.lines().count(), 3);
    }
}
