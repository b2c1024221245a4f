use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stats::{mean, std_dev};
use super::EvalError;
use crate::distgeo::IkProblem;
use crate::model::{sample_solutions_with, ModelParams, SamplingOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub count: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub per_sample_ms: f64,
}

pub fn bench_sampling(
    params: &ModelParams,
    problem: &IkProblem,
    counts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<TimingRow>, EvalError> {
    bench_sampling_with(params, problem, counts, repeats, seed, &SamplingOptions::default())
}

/// Wall time of drawing and reconstructing `count` samples, for each count,
/// on a single worker so runs do not contend with each other.
pub fn bench_sampling_with(
    params: &ModelParams,
    problem: &IkProblem,
    counts: &[usize],
    repeats: usize,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<Vec<TimingRow>, EvalError> {
    if repeats == 0 {
        return Err(EvalError::Config("repeats must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;
    pool.install(|| {
        // Warm caches and allocator before timing.
        sample_solutions_with(params, problem, 1, seed, opts)?;
        counts
            .iter()
            .map(|&count| {
                let times: Vec<f64> = (0..repeats)
                    .map(|r| {
                        let start = Instant::now();
                        sample_solutions_with(params, problem, count, seed + r as u64, opts)?;
                        Ok(start.elapsed().as_secs_f64() * 1e3)
                    })
                    .collect::<Result<_, EvalError>>()?;
                let mean_ms = mean(&times);
                Ok(TimingRow {
                    count,
                    repeats,
                    mean_ms,
                    std_ms: std_dev(&times),
                    per_sample_ms: mean_ms / count.max(1) as f64,
                })
            })
            .collect()
    })
}

pub fn write_timing_csv(rows: &[TimingRow], path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(io)
}
