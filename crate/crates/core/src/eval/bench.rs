//! Closed-loop throughput benchmark for the generative engine and a
//! brute-force dot-product (dual-tower) baseline.

use std::time::{Duration, Instant};

use ace_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::BenchSettings;
use crate::decode::{constrained_beam_search, PrefixTree};
use crate::error::{CoreError, Result};
use crate::ids::SemanticIdentifier;
use crate::model::{FusionModel, ModelConfig, VocabLayout};

/// Exact top-`k` candidates by dot product with `query`: partial selection,
/// then a sort of the selected rows. Ties go to the lower index.
pub fn dual_tower_baseline(query: &[f32], candidates: &Tensor<f32>, k: usize) -> Result<Vec<(usize, f32)>> {
    if candidates.shape().len() != 2 || candidates.cols() != query.len() {
        return Err(CoreError::invalid(format!(
            "query of dim {} against candidates {:?}",
            query.len(),
            candidates.shape()
        )));
    }
    let d = query.len();
    let mut scored: Vec<(usize, f32)> = candidates
        .data()
        .chunks_exact(d.max(1))
        .enumerate()
        .map(|(i, row)| (i, row.iter().zip(query).map(|(a, b)| a * b).sum()))
        .collect();
    let cmp = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = k.min(scored.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored)
}

/// A read-only retrieval engine answering synthetic query number `i`.
pub trait Engine: Sync {
    fn name(&self) -> &'static str;
    fn n_candidates(&self) -> usize;
    /// Run query `i` and return the number of results.
    fn query(&self, i: usize) -> Result<usize>;
}

pub struct GenerativeEngine<'m> {
    pub model: &'m FusionModel<f32>,
    pub tree: PrefixTree,
    pub beam: usize,
    pub queries: Vec<Vec<u32>>,
}

impl Engine for GenerativeEngine<'_> {
    fn name(&self) -> &'static str {
        "generative"
    }

    fn n_candidates(&self) -> usize {
        self.tree.leaf_count()
    }

    fn query(&self, i: usize) -> Result<usize> {
        let q = &self.queries[i % self.queries.len()];
        Ok(constrained_beam_search(self.model, q, &self.tree, self.beam)?.len())
    }
}

pub struct DualTowerEngine {
    pub candidates: Tensor<f32>,
    pub queries: Tensor<f32>,
    pub k: usize,
}

impl DualTowerEngine {
    /// `n` random unit-variance candidates and 64 random queries of `dim`.
    pub fn random(n: usize, dim: usize, k: usize, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let mut r = root.substream(&[0]);
        let candidates = Tensor::new(vec![n, dim], (0..n * dim).map(|_| r.normal() as f32).collect())?;
        let mut r = root.substream(&[1]);
        let queries = Tensor::new(vec![64, dim], (0..64 * dim).map(|_| r.normal() as f32).collect())?;
        Ok(DualTowerEngine { candidates, queries, k })
    }
}

impl Engine for DualTowerEngine {
    fn name(&self) -> &'static str {
        "dual-tower"
    }

    fn n_candidates(&self) -> usize {
        self.candidates.rows()
    }

    fn query(&self, i: usize) -> Result<usize> {
        let q = self.queries.row(i % self.queries.rows());
        Ok(dual_tower_baseline(q, &self.candidates, self.k)?.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Logical concurrent clients.
    pub concurrency: usize,
    /// OS worker threads actually serving them.
    pub workers: usize,
    pub duration_s: f64,
    pub warmup_s: f64,
}

/// Worker threads: the available parallelism, capped by `ACE_THREADS` when
/// that holds a positive integer.
pub fn default_workers() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("ACE_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => avail.min(cap),
        _ => avail,
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            concurrency: 100,
            workers: default_workers(),
            duration_s: 5.0,
            warmup_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub engine: String,
    pub n_candidates: usize,
    pub device: String,
    pub concurrency: usize,
    pub workers: usize,
    pub completed: u64,
    pub elapsed_s: f64,
    pub throughput_qps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub methodology: String,
    pub notes: Vec<String>,
}

pub const BENCH_HEADER: [&str; 9] = ["engine", "n", "concurrency", "workers", "completed", "qps", "p50_ms", "p95_ms", "device"];

impl BenchReport {
    pub fn table_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.engine.clone(),
                    r.n_candidates.to_string(),
                    r.concurrency.to_string(),
                    r.workers.to_string(),
                    r.completed.to_string(),
                    format!("{:.1}", r.throughput_qps),
                    format!("{:.3}", r.p50_ms),
                    format!("{:.3}", r.p95_ms),
                    r.device.clone(),
                ]
            })
            .collect()
    }
}

pub fn methodology(cfg: &BenchConfig) -> String {
    format!(
        "closed loop: {} logical clients served by {} worker threads; each worker issues its next query as soon as the previous one returns; \
         {:.1}s warmup then {:.1}s measured wall clock; throughput = completed / elapsed; latency percentiles are per-query service times",
        cfg.concurrency, cfg.workers, cfg.warmup_s, cfg.duration_s
    )
}

pub fn device_string() -> String {
    format!(
        "cpu {} ({} threads available)",
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Measure one engine. Workers keep private counters merged at the end.
pub fn throughput_bench(engine: &dyn Engine, cfg: &BenchConfig) -> Result<BenchRow> {
    if cfg.concurrency == 0 || cfg.workers == 0 || !(cfg.duration_s > 0.0) {
        return Err(CoreError::invalid("bench needs concurrency, workers and duration > 0"));
    }
    let workers = cfg.workers.min(cfg.concurrency);
    let warm_end = Instant::now() + Duration::from_secs_f64(cfg.warmup_s.max(0.0));
    let mut i = 0;
    while Instant::now() < warm_end {
        engine.query(i)?;
        i += 1;
    }
    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64(cfg.duration_s);
    let per_worker: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || -> Result<Vec<f64>> {
                    let mut lat = Vec::new();
                    let mut q = w;
                    while Instant::now() < deadline {
                        let t = Instant::now();
                        engine.query(q)?;
                        lat.push(t.elapsed().as_secs_f64() * 1e3);
                        q += workers;
                    }
                    Ok(lat)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let elapsed = start.elapsed().as_secs_f64();
    let mut lat = Vec::new();
    for w in per_worker {
        lat.extend(w?);
    }
    lat.sort_by(f64::total_cmp);
    Ok(BenchRow {
        engine: engine.name().to_owned(),
        n_candidates: engine.n_candidates(),
        device: device_string(),
        concurrency: cfg.concurrency,
        workers,
        completed: lat.len() as u64,
        elapsed_s: elapsed,
        throughput_qps: lat.len() as f64 / elapsed,
        p50_ms: percentile(&lat, 0.5),
        p95_ms: percentile(&lat, 0.95),
    })
}

/// `n` distinct identifiers drawn uniformly from the grid `sizes`.
pub fn synthetic_identifiers(sizes: &[usize], n: usize, seed: u64) -> Result<Vec<SemanticIdentifier>> {
    let total = sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s)).unwrap_or(usize::MAX);
    if n > total || sizes.contains(&0) {
        return Err(CoreError::invalid(format!("{n} candidates do not fit the grid {sizes:?}")));
    }
    let mut rng = Rng::new(seed);
    let codes: Vec<usize> = if total <= 1 << 24 {
        let mut all: Vec<usize> = (0..total).collect();
        rng.shuffle(&mut all);
        all.truncate(n);
        all
    } else {
        let mut seen = std::collections::HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let c = rng.below(total);
            if seen.insert(c) {
                out.push(c);
            }
        }
        out
    };
    Ok(codes
        .into_iter()
        .map(|mut c| {
            let mut t = vec![0u32; sizes.len()];
            for (slot, &s) in t.iter_mut().zip(sizes).rev() {
                *slot = (c % s) as u32;
                c /= s;
            }
            SemanticIdentifier(t)
        })
        .collect())
}

pub const ENGINES: [&str; 2] = ["generative", "dual-tower"];

/// Throughput of the selected engines at every candidate count. The
/// generative engine is a freshly initialized `model_cfg` over synthetic
/// identifiers on the `settings.prefix_sizes` grid; the dual tower scans
/// random `dim`-wide candidate vectors. Neither needs trained weights: the
/// cost of a query does not depend on them.
pub fn candidate_sweep(
    settings: &BenchSettings,
    model_cfg: &ModelConfig,
    dim: usize,
    cfg: &BenchConfig,
    seed: u64,
    mut progress: impl FnMut(&BenchRow),
) -> Result<BenchReport> {
    if let Some(bad) = settings.engines.iter().find(|e| !ENGINES.contains(&e.as_str())) {
        return Err(CoreError::invalid(format!("unknown engine {bad:?}, expected one of {ENGINES:?}")));
    }
    let run = |name: &str| settings.engines.iter().any(|e| e == name);
    let root = Rng::new(seed);
    let layout = VocabLayout::new(settings.prefix_sizes.clone())?;
    let model: FusionModel<f32> = FusionModel::new(model_cfg.clone(), layout.clone(), &mut root.substream(&[0]))?;
    let mut qr = root.substream(&[1]);
    let queries: Vec<Vec<u32>> = (0..64)
        .map(|_| (0..4 + qr.below(8)).map(|_| qr.below(model_cfg.query_vocab_size) as u32).collect())
        .collect();
    let mut rows = Vec::new();
    for (i, &n) in settings.candidates.iter().enumerate() {
        if run("generative") {
            let ids = synthetic_identifiers(&settings.prefix_sizes, n, root.substream(&[2, i as u64]).seed())?;
            let engine = GenerativeEngine {
                model: &model,
                tree: PrefixTree::build(&ids, &layout)?,
                beam: settings.beam,
                queries: queries.clone(),
            };
            drop(ids);
            rows.push(throughput_bench(&engine, cfg)?);
            progress(rows.last().expect("just pushed"));
        }
        if run("dual-tower") {
            let engine = DualTowerEngine::random(n, dim, settings.beam, root.substream(&[3, i as u64]).seed())?;
            rows.push(throughput_bench(&engine, cfg)?);
            progress(rows.last().expect("just pushed"));
        }
    }
    Ok(BenchReport {
        rows,
        methodology: methodology(cfg),
        notes: vec![
            format!("generative: untrained model over synthetic identifiers on the grid {:?}, beam {}", settings.prefix_sizes, settings.beam),
            format!("dual-tower: exact top-{} dot product over random {dim}-dim candidates", settings.beam),
        ],
    })
}
