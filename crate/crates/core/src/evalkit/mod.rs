//! Metrics and experiment harness: pose-error statistics, success rates,
//! MMD against rejection-sampled references and sampling benchmarks.

mod bench;
pub mod experiment;
pub mod mmd;
pub mod reference;
pub mod stats;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distgeo::{complete_graph_from_config, points_to_config, DistGeoError, IkProblem};
use crate::kinematics::{pose_error, Configuration, KinematicsError};
use crate::model::{sample_solutions_with, ModelError, ModelParams, SamplingOptions};
use crate::training::TrainError;

pub use bench::{bench_sampling, bench_sampling_with, write_timing_csv, TimingRow};
pub use mmd::{mmd, permutation_test, PermutationTest};
pub use reference::{rejection_sample_reference, RejectionOptions, RejectionResult};
pub use stats::{quantile, success_pct, ErrorSummary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Geometry(#[from] DistGeoError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("configuration dimension {got} differs from {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} samples per set, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledConfig {
    pub config: Configuration,
    /// The point set could not be turned into a configuration within
    /// tolerance; scored as an infinite error.
    pub diverged: bool,
}

/// Anything that proposes IK solutions for a problem.
pub trait IkSampler: Sync {
    /// `index` is the position of `problem` in the evaluated list.
    fn sample(
        &self,
        index: usize,
        problem: &IkProblem,
        count: usize,
        seed: u64,
    ) -> Result<Vec<SampledConfig>, EvalError>;
}

pub struct ModelSampler<'a> {
    pub params: &'a ModelParams,
    pub options: SamplingOptions,
}

impl<'a> ModelSampler<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            options: SamplingOptions::default(),
        }
    }
}

impl IkSampler for ModelSampler<'_> {
    fn sample(
        &self,
        _index: usize,
        problem: &IkProblem,
        count: usize,
        seed: u64,
    ) -> Result<Vec<SampledConfig>, EvalError> {
        Ok(
            sample_solutions_with(self.params, problem, count, seed, &self.options)?
                .into_iter()
                .map(|s| SampledConfig {
                    diverged: s.diverged(),
                    config: s.config,
                })
                .collect(),
        )
    }
}

impl IkSampler for ModelParams {
    fn sample(
        &self,
        index: usize,
        problem: &IkProblem,
        count: usize,
        seed: u64,
    ) -> Result<Vec<SampledConfig>, EvalError> {
        ModelSampler::new(self).sample(index, problem, count, seed)
    }
}

/// Returns the known solution of every problem, routed through the same
/// point-set reconstruction as learned samples. Used to check plumbing.
pub struct OracleSampler {
    pub solutions: Vec<Configuration>,
}

impl IkSampler for OracleSampler {
    fn sample(
        &self,
        index: usize,
        problem: &IkProblem,
        count: usize,
        _seed: u64,
    ) -> Result<Vec<SampledConfig>, EvalError> {
        let q = self.solutions.get(index).ok_or_else(|| {
            EvalError::Config(format!("oracle has no solution for problem {index}"))
        })?;
        let g = complete_graph_from_config(&problem.chain, q, false)?;
        let config = points_to_config(&problem.chain, &g.positions, Some(&problem.goal))?;
        Ok(vec![
            SampledConfig {
                config,
                diverged: false
            };
            count
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmdOptions {
    /// Model samples per problem compared against the reference.
    pub samples: usize,
    pub reference: RejectionOptions,
}

impl Default for MmdOptions {
    fn default() -> Self {
        Self {
            samples: 50,
            reference: RejectionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub samples_per_goal: usize,
    /// Success thresholds applied to the best sample of each problem.
    pub success_pos_mm: f64,
    pub success_rot_deg: f64,
    pub seed: u64,
    pub mmd: Option<MmdOptions>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples_per_goal: 32,
            success_pos_mm: 10.0,
            success_rot_deg: 1.0,
            seed: 0,
            mmd: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemReport {
    pub robot: String,
    /// Statistics over the non-diverged samples; infinite when all diverged.
    pub pos_mm: ErrorSummary,
    pub rot_deg: ErrorSummary,
    /// Errors of the sample with the smallest position error.
    pub best_pos_mm: f64,
    pub best_rot_deg: f64,
    pub success: bool,
    pub samples: usize,
    pub diverged: usize,
    pub time_ms: f64,
    pub mmd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkReport {
    pub problems: Vec<ProblemReport>,
    /// Per-problem summaries averaged over problems.
    pub pos_mm: ErrorSummary,
    pub rot_deg: ErrorSummary,
    pub success_pct: f64,
    pub divergence_pct: f64,
    pub mmd_mean: Option<f64>,
    pub time_ms_mean: f64,
    pub time_ms_std: f64,
}

impl IkReport {
    pub fn from_problems(problems: Vec<ProblemReport>) -> Self {
        let pos: Vec<_> = problems.iter().map(|p| p.pos_mm).collect();
        let rot: Vec<_> = problems.iter().map(|p| p.rot_deg).collect();
        let total: usize = problems.iter().map(|p| p.samples).sum();
        let diverged: usize = problems.iter().map(|p| p.diverged).sum();
        let mmds: Vec<f64> = problems.iter().filter_map(|p| p.mmd).collect();
        let times: Vec<f64> = problems.iter().map(|p| p.time_ms).collect();
        let successes = problems.iter().filter(|p| p.success).count();
        let n = problems.len().max(1) as f64;
        Self {
            pos_mm: ErrorSummary::average(&pos),
            rot_deg: ErrorSummary::average(&rot),
            success_pct: 100.0 * successes as f64 / n,
            divergence_pct: 100.0 * diverged as f64 / total.max(1) as f64,
            mmd_mean: (!mmds.is_empty()).then(|| stats::mean(&mmds)),
            time_ms_mean: if times.is_empty() { 0.0 } else { stats::mean(&times) },
            time_ms_std: stats::std_dev(&times),
            problems,
        }
    }

    /// Mean over problems of the best-sample position error in mm.
    pub fn best_pos_mean_mm(&self) -> f64 {
        stats::mean(&self.problems.iter().map(|p| p.best_pos_mm).collect::<Vec<_>>())
    }

    pub fn best_rot_mean_deg(&self) -> f64 {
        stats::mean(&self.problems.iter().map(|p| p.best_rot_deg).collect::<Vec<_>>())
    }
}

/// Seed for problem `index` derived from the run seed.
pub fn problem_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// Scores `samples` against `problem.goal`.
pub fn score_samples(
    problem: &IkProblem,
    samples: &[SampledConfig],
    opts: &EvalOptions,
) -> Result<ProblemReport, EvalError> {
    let mut pos = Vec::with_capacity(samples.len());
    let mut rot = Vec::with_capacity(samples.len());
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in samples.iter().filter(|s| !s.diverged) {
        let (p, r) = pose_error(&problem.chain.end_effector_pose(&s.config)?, &problem.goal);
        let (p, r) = (p * 1e3, r);
        pos.push(p);
        rot.push(r);
        if p < best.0 {
            best = (p, r);
        }
    }
    Ok(ProblemReport {
        robot: problem.chain.name.clone(),
        pos_mm: ErrorSummary::of(&pos),
        rot_deg: ErrorSummary::of(&rot),
        best_pos_mm: best.0,
        best_rot_deg: best.1,
        success: best.0 < opts.success_pos_mm && best.1 < opts.success_rot_deg,
        samples: samples.len(),
        diverged: samples.iter().filter(|s| s.diverged).count(),
        time_ms: 0.0,
        mmd: None,
    })
}

/// Samples every problem, scores the samples against its goal and
/// aggregates. Problems are processed in parallel; the report does not
/// depend on the worker count apart from timings.
pub fn evaluate<S: IkSampler + ?Sized>(
    sampler: &S,
    problems: &[IkProblem],
    opts: &EvalOptions,
) -> Result<IkReport, EvalError> {
    if opts.samples_per_goal == 0 {
        return Err(EvalError::Config("samples_per_goal must be positive".into()));
    }
    let reports: Vec<ProblemReport> = problems
        .par_iter()
        .enumerate()
        .map(|(i, problem)| {
            let seed = problem_seed(opts.seed, i);
            let start = Instant::now();
            let samples = sampler.sample(i, problem, opts.samples_per_goal, seed)?;
            let time_ms = start.elapsed().as_secs_f64() * 1e3;
            let mut report = score_samples(problem, &samples, opts)?;
            report.time_ms = time_ms;
            if let Some(m) = &opts.mmd {
                report.mmd = problem_mmd(sampler, i, problem, m, seed)?;
            }
            Ok(report)
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(IkReport::from_problems(reports))
}

fn problem_mmd<S: IkSampler + ?Sized>(
    sampler: &S,
    index: usize,
    problem: &IkProblem,
    opts: &MmdOptions,
    seed: u64,
) -> Result<Option<f64>, EvalError> {
    let model: Vec<Configuration> = sampler
        .sample(index, problem, opts.samples, seed ^ 0x4D4D_44)?
        .into_iter()
        .filter(|s| !s.diverged)
        .map(|s| s.config)
        .collect();
    let reference = RejectionOptions {
        max_accept: opts.samples,
        ..opts.reference
    };
    let refs = rejection_sample_reference(&problem.chain, &problem.goal, &reference, seed)?;
    if model.len() < 2 || refs.samples.len() < 2 {
        return Ok(None);
    }
    Ok(Some(mmd(&model, &refs.samples)?))
}
