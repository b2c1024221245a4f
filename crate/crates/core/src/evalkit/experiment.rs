//! Orchestration of complete runs: data generation, training (or loading a
//! checkpoint), evaluation and report export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::mean;
use super::{evaluate, EvalError, EvalOptions, IkReport, ModelSampler};
use crate::distgeo::IkProblem;
use crate::kinematics::{random_chain, robots, Configuration, KinematicChain};
use crate::localsolve::{random_inits, solve_multistart, RefineOptions};
use crate::model::{
    sample_solutions, Architecture, Checkpoint, ModelConfig, ModelParams, TrainingMetadata,
};
use crate::training::{dataset_elbo, generate_dataset, train, Dataset, TrainConfig};

/// Salt separating held-out problem streams from training data streams.
const TEST_SALT: u64 = 0x7E57_0000_0000_0001;

/// Resolves a bundled robot name or a path to a JSON robot description.
pub fn load_robot(spec: &str) -> Result<KinematicChain, EvalError> {
    if let Some(c) = robots::load(spec) {
        return Ok(c);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(EvalError::Io {
            path: spec.to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "neither a bundled robot nor an existing file",
            ),
        });
    }
    Ok(KinematicChain::load(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    /// One model over all robots, evaluated per robot.
    MultiRobot,
    /// Local refinement from random versus learned initial configurations.
    InitComparison {
        #[serde(default = "default_inits")]
        inits: usize,
    },
    /// Equivariant versus plain message passing under the same budget.
    Ablation,
    /// Train on link-length randomized variants of the robots, test on
    /// `test_robots` (the unmodified robots when empty).
    Generalization {
        scale: (f64, f64),
        instances: usize,
        #[serde(default)]
        test_robots: Vec<String>,
    },
}

fn default_inits() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ExperimentKind,
    /// Bundled robot names or JSON description paths.
    pub robots: Vec<String>,
    #[serde(default = "default_records")]
    pub records_per_robot: usize,
    #[serde(default = "default_problems")]
    pub test_problems: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub refine: RefineOptions,
    /// Use this model instead of training one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Use this training set instead of generating one.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Where reports and checkpoints are written.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_records() -> usize {
    1000
}

fn default_problems() -> usize {
    50
}

impl ExperimentSpec {
    /// Reads a JSON or (by `.toml` extension) TOML file.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let fmt = |message: String| EvalError::Format {
            path: path.display().to_string(),
            message,
        };
        let spec: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| fmt(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| fmt(e.to_string()))?
        };
        Ok(spec)
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.robots.is_empty() {
            return Err(EvalError::Config("experiment lists no robots".into()));
        }
        if self.test_problems == 0 {
            return Err(EvalError::Config("test_problems must be positive".into()));
        }
        if let Some(p) = self.checkpoint.as_ref().filter(|p| !p.exists()) {
            return Err(EvalError::Io {
                path: p.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            });
        }
        if let Some(p) = self.dataset.as_ref().filter(|p| !p.exists()) {
            return Err(EvalError::Io {
                path: p.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
            });
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// One line of an experiment report. Column names are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub label: String,
    pub robot: String,
    pub problems: usize,
    pub err_pos_mean_mm: f64,
    pub err_pos_min_mm: f64,
    pub err_pos_max_mm: f64,
    pub err_pos_q1_mm: f64,
    pub err_pos_q3_mm: f64,
    pub err_rot_mean_deg: f64,
    pub err_rot_min_deg: f64,
    pub err_rot_max_deg: f64,
    pub err_rot_q1_deg: f64,
    pub err_rot_q3_deg: f64,
    pub success_pct: f64,
    pub divergence_pct: f64,
    pub mmd_mean: Option<f64>,
    pub iters_mean: Option<f64>,
    pub time_ms_mean: f64,
    pub test_elbo: Option<f64>,
}

impl ReportRow {
    pub fn from_report(experiment: &str, label: &str, robot: &str, r: &IkReport) -> Self {
        Self {
            experiment: experiment.into(),
            label: label.into(),
            robot: robot.into(),
            problems: r.problems.len(),
            err_pos_mean_mm: r.pos_mm.mean,
            err_pos_min_mm: r.pos_mm.min,
            err_pos_max_mm: r.pos_mm.max,
            err_pos_q1_mm: r.pos_mm.q1,
            err_pos_q3_mm: r.pos_mm.q3,
            err_rot_mean_deg: r.rot_deg.mean,
            err_rot_min_deg: r.rot_deg.min,
            err_rot_max_deg: r.rot_deg.max,
            err_rot_q1_deg: r.rot_deg.q1,
            err_rot_q3_deg: r.rot_deg.q3,
            success_pct: r.success_pct,
            divergence_pct: r.divergence_pct,
            mmd_mean: r.mmd_mean,
            iters_mean: None,
            time_ms_mean: r.time_ms_mean,
            test_elbo: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let fmt = |e: csv::Error| EvalError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(fmt)?;
        for row in &self.rows {
            w.serialize(row).map_err(fmt)?;
        }
        w.flush().map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Iteration and success statistics of multistart refinement over a set of
/// problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitStats {
    /// Mean LM iterations over every refine call.
    pub iters_mean: f64,
    /// Mean iterations of the winning start.
    pub best_iters_mean: f64,
    pub success_pct: f64,
    pub best_pos_mean_mm: f64,
    pub best_rot_mean_deg: f64,
    /// Mean wall time of a multistart solve.
    pub time_ms_mean: f64,
}

fn init_stats(
    problems: &[IkProblem],
    inits: &[Vec<Configuration>],
    opts: &RefineOptions,
    eval: &EvalOptions,
) -> Result<InitStats, EvalError> {
    let per: Vec<(f64, f64, f64, f64, f64)> = problems
        .par_iter()
        .zip(inits)
        .map(|(p, qs)| {
            let start = Instant::now();
            let r = solve_multistart(&p.chain, &p.goal, qs, opts)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let iters = mean(&r.results.iter().map(|x| x.iterations as f64).collect::<Vec<_>>());
            let b = r.best();
            Ok((iters, b.iterations as f64, b.pos_error * 1e3, b.rot_error_deg, ms))
        })
        .collect::<Result<_, EvalError>>()?;
    let col = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| mean(&per.iter().map(f).collect::<Vec<_>>());
    let hits = per
        .iter()
        .filter(|x| x.2 < eval.success_pos_mm && x.3 < eval.success_rot_deg)
        .count();
    Ok(InitStats {
        iters_mean: col(|x| x.0),
        best_iters_mean: col(|x| x.1),
        success_pct: 100.0 * hits as f64 / per.len().max(1) as f64,
        best_pos_mean_mm: col(|x| x.2),
        best_rot_mean_deg: col(|x| x.3),
        time_ms_mean: col(|x| x.4),
    })
}

/// Multistart refinement from `k` uniform random configurations and from
/// `k` model samples (diverged samples contribute their best-effort fit).
/// Returns `(random, learned)`.
pub fn compare_inits(
    params: &ModelParams,
    problems: &[IkProblem],
    k: usize,
    opts: &RefineOptions,
    eval: &EvalOptions,
) -> Result<(InitStats, InitStats), EvalError> {
    if k == 0 {
        return Err(EvalError::Config("need at least one initial configuration".into()));
    }
    let random: Vec<Vec<Configuration>> = problems
        .iter()
        .enumerate()
        .map(|(i, p)| random_inits(&p.chain, k, super::problem_seed(eval.seed, i)))
        .collect();
    let learned: Vec<Vec<Configuration>> = problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(sample_solutions(params, p, k, super::problem_seed(eval.seed, i))?
                .into_iter()
                .map(|s| s.config)
                .collect())
        })
        .collect::<Result<_, EvalError>>()?;
    Ok((
        init_stats(problems, &random, opts, eval)?,
        init_stats(problems, &learned, opts, eval)?,
    ))
}

/// Held-out problems for `chains`: goals are forward kinematics of uniform
/// configurations drawn from a stream disjoint from training data.
pub fn test_set(chains: &[KinematicChain], per_chain: usize, seed: u64) -> Result<Dataset, EvalError> {
    Ok(generate_dataset(chains, per_chain, seed ^ TEST_SALT)?)
}

pub fn problems_of(data: &Dataset) -> Result<Vec<IkProblem>, EvalError> {
    data.records
        .iter()
        .map(|r| {
            let goal = r.partial.goal.expect("dataset partial graphs carry their goal");
            Ok(IkProblem::new(data.robots[r.robot].clone(), goal)?)
        })
        .collect()
}

pub fn robot_problems(data: &Dataset, robot: usize) -> Result<Vec<IkProblem>, EvalError> {
    data.records
        .iter()
        .filter(|r| r.robot == robot)
        .map(|r| {
            let goal = r.partial.goal.expect("dataset partial graphs carry their goal");
            Ok(IkProblem::new(data.robots[robot].clone(), goal)?)
        })
        .collect()
}

fn obtain_model(
    spec: &ExperimentSpec,
    chains: &[KinematicChain],
    model_cfg: ModelConfig,
    label: &str,
) -> Result<ModelParams, EvalError> {
    if let Some(p) = &spec.checkpoint {
        return Ok(Checkpoint::load(p)?.model);
    }
    let data = match &spec.dataset {
        Some(p) => Dataset::load(p)?.0,
        None => generate_dataset(chains, spec.records_per_robot, spec.seed)?,
    };
    let init = ModelParams::init(model_cfg, spec.seed)?;
    let outcome = train(&spec.train, &data, init)?;
    if let Some(dir) = &spec.out_dir {
        let metadata = TrainingMetadata {
            seed: spec.seed,
            dataset_hash: data.hash(),
            epochs: outcome.trace.len(),
            final_loss: outcome.trace.last().map(|s| s.loss),
            robots: data.robots.iter().map(|c| c.name.clone()).collect(),
        };
        let path = dir.join(format!("{}-{label}.ckpt", spec.name));
        Checkpoint::new(outcome.model.clone(), metadata).save(&path)?;
    }
    Ok(outcome.model)
}

fn eval_rows(
    spec: &ExperimentSpec,
    label: &str,
    params: &ModelParams,
    test: &Dataset,
) -> Result<Vec<ReportRow>, EvalError> {
    let sampler = ModelSampler::new(params);
    (0..test.robots.len())
        .map(|r| {
            let problems = robot_problems(test, r)?;
            let report = evaluate(&sampler, &problems, &spec.eval)?;
            Ok(ReportRow::from_report(&spec.name, label, &test.robots[r].name, &report))
        })
        .collect()
}

/// Runs the experiment and writes `<name>.csv` and `<name>.json` into
/// `out_dir` when set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, EvalError> {
    spec.validate()?;
    if let Some(dir) = &spec.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let chains: Vec<KinematicChain> = spec
        .robots
        .iter()
        .map(|r| load_robot(r))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    match &spec.kind {
        ExperimentKind::MultiRobot => {
            let params = obtain_model(spec, &chains, spec.model, "model")?;
            let test = test_set(&chains, spec.test_problems, spec.seed)?;
            rows = eval_rows(spec, "model", &params, &test)?;
        }
        ExperimentKind::InitComparison { inits } => {
            let params = obtain_model(spec, &chains, spec.model, "model")?;
            let test = test_set(&chains, spec.test_problems, spec.seed)?;
            rows = eval_rows(spec, "model", &params, &test)?;
            for (r, chain) in chains.iter().enumerate() {
                let problems = robot_problems(&test, r)?;
                let (random, learned) =
                    compare_inits(&params, &problems, *inits, &spec.refine, &spec.eval)?;
                for (label, s) in [("random_init", random), ("learned_init", learned)] {
                    rows.push(init_row(spec, label, &chain.name, problems.len(), &s));
                }
            }
        }
        ExperimentKind::Ablation => {
            if spec.checkpoint.is_some() {
                return Err(EvalError::Config(
                    "ablation trains both architectures; drop the checkpoint".into(),
                ));
            }
            let test = test_set(&chains, spec.test_problems, spec.seed)?;
            for (label, arch) in [("egnn", Architecture::Egnn), ("mpnn", Architecture::Mpnn)] {
                let cfg = ModelConfig { arch, ..spec.model };
                let params = obtain_model(spec, &chains, cfg, label)?;
                let elbo = dataset_elbo(&params, &test.records, spec.seed, 1, spec.train.chunk)?;
                for mut row in eval_rows(spec, label, &params, &test)? {
                    row.test_elbo = Some(elbo.elbo());
                    rows.push(row);
                }
            }
        }
        ExperimentKind::Generalization {
            scale,
            instances,
            test_robots,
        } => {
            let mut train_chains = Vec::with_capacity(chains.len() * instances);
            for (t, template) in chains.iter().enumerate() {
                for i in 0..*instances {
                    let seed = spec.seed ^ ((t as u64) << 32 | i as u64);
                    train_chains.push(random_chain(template, *scale, seed)?);
                }
            }
            let params = obtain_model(spec, &train_chains, spec.model, "model")?;
            let test_chains = if test_robots.is_empty() {
                chains.clone()
            } else {
                test_robots
                    .iter()
                    .map(|r| load_robot(r))
                    .collect::<Result<_, _>>()?
            };
            let test = test_set(&test_chains, spec.test_problems, spec.seed)?;
            rows = eval_rows(spec, "held_out", &params, &test)?;
        }
    }
    let report = ExperimentReport {
        name: spec.name.clone(),
        rows,
    };
    if let Some(dir) = &spec.out_dir {
        report.write_csv(&dir.join(format!("{}.csv", spec.name)))?;
        report.write_json(&dir.join(format!("{}.json", spec.name)))?;
    }
    Ok(report)
}

fn init_row(spec: &ExperimentSpec, label: &str, robot: &str, n: usize, s: &InitStats) -> ReportRow {
    let nan = f64::NAN;
    ReportRow {
        experiment: spec.name.clone(),
        label: label.into(),
        robot: robot.into(),
        problems: n,
        err_pos_mean_mm: s.best_pos_mean_mm,
        err_pos_min_mm: nan,
        err_pos_max_mm: nan,
        err_pos_q1_mm: nan,
        err_pos_q3_mm: nan,
        err_rot_mean_deg: s.best_rot_mean_deg,
        err_rot_min_deg: nan,
        err_rot_max_deg: nan,
        err_rot_q1_deg: nan,
        err_rot_q3_deg: nan,
        success_pct: s.success_pct,
        divergence_pct: 0.0,
        mmd_mean: None,
        iters_mean: Some(s.iters_mean),
        time_ms_mean: s.time_ms_mean,
        test_elbo: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(name: &str, kind: ExperimentKind, dir: &Path) -> ExperimentSpec {
        ExperimentSpec {
            name: name.into(),
            kind,
            robots: vec!["planar3".into()],
            records_per_robot: 16,
            test_problems: 3,
            seed: 1,
            model: ModelConfig {
                hidden: 8,
                latent: 4,
                components: 2,
                layers: 1,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..Default::default()
            },
            eval: EvalOptions {
                samples_per_goal: 4,
                ..Default::default()
            },
            refine: RefineOptions::default(),
            checkpoint: None,
            dataset: None,
            out_dir: Some(dir.to_path_buf()),
        }
    }

    fn tmp(tag: &str) -> PathBuf {
        std::env::temp_dir().join(format!("gengik-exp-{tag}-{}", std::process::id()))
    }

    #[test]
    fn init_comparison_emits_paired_rows() {
        let dir = tmp("init");
        let spec = tiny("init", ExperimentKind::InitComparison { inits: 4 }, &dir);
        let report = run_experiment(&spec).unwrap();
        let labels: Vec<_> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["model", "random_init", "learned_init"]);
        assert!(report.rows[1].iters_mean.is_some() && report.rows[2].iters_mean.is_some());
        let csv = std::fs::read_to_string(dir.join("init.csv")).unwrap();
        let header = csv.lines().next().unwrap();
        for col in ["err_pos_mean_mm", "err_rot_q3_deg", "success_pct", "mmd_mean", "iters_mean", "time_ms_mean"] {
            assert!(header.split(',').any(|c| c == col), "{col}");
        }
        assert!(dir.join("init.json").exists());
        assert!(dir.join("init-model.ckpt").exists());
    }

    #[test]
    fn ablation_reports_both_architectures_with_elbo() {
        let dir = tmp("abl");
        let report = run_experiment(&tiny("abl", ExperimentKind::Ablation, &dir)).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].label, "egnn");
        assert_eq!(report.rows[1].label, "mpnn");
        assert!(report.rows.iter().all(|r| r.test_elbo.is_some_and(f64::is_finite)));
    }

    #[test]
    fn degenerate_randomization_tests_in_distribution() {
        let dir = tmp("gen");
        let kind = ExperimentKind::Generalization {
            scale: (1.0, 1.0),
            instances: 2,
            test_robots: vec![],
        };
        let report = run_experiment(&tiny("gen", kind, &dir)).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].robot, "planar3");
    }

    #[test]
    fn missing_inputs_are_reported_with_path() {
        let dir = tmp("missing");
        let mut spec = tiny("m", ExperimentKind::MultiRobot, &dir);
        spec.checkpoint = Some(dir.join("nope.ckpt"));
        let err = run_experiment(&spec).unwrap_err().to_string();
        assert!(err.contains("nope.ckpt"), "{err}");
        let mut spec = tiny("m", ExperimentKind::MultiRobot, &dir);
        spec.robots = vec!["no-such-robot".into()];
        assert!(run_experiment(&spec).unwrap_err().to_string().contains("no-such-robot"));
    }

    #[test]
    fn spec_parses_from_json() {
        let text = r#"{"name":"t1","kind":"multi_robot","robots":["toy4","toy6"],"train":{"epochs":3}}"#;
        let spec: ExperimentSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.kind, ExperimentKind::MultiRobot);
        assert_eq!(spec.train.epochs, 3);
        assert_eq!(spec.records_per_robot, 1000);
    }
}
