use std::path::Path;
use std::time::Instant;

use gengik::distgeo::IkProblem;
use gengik::evalkit::experiment::{
    load_robot, robot_problems, run_experiment, test_set, ExperimentReport, ExperimentSpec,
    ReportRow,
};
use gengik::evalkit::{
    bench_sampling, evaluate, problem_seed, write_timing_csv, EvalOptions, IkReport, MmdOptions,
    ModelSampler, RejectionOptions,
};
use gengik::kinematics::{pose_error, random_chain, KinematicChain, RigidTransform};
use gengik::localsolve::{random_inits, solve_multistart, RefineOptions};
use gengik::model::{
    sample_solutions, Architecture, Checkpoint, EdgeSet, ModelConfig, ModelParams, SampleStatus,
    TrainingMetadata,
};
use gengik::training::{generate_dataset, train_with, CheckpointSink, Dataset, TrainConfig, TrainError};
use serde::Serialize;

use crate::goal::{goal_to_values, parse_goal, read_goal_file};
use crate::{
    ArchFlag, BenchArgs, CliError, EdgeFlag, EvalArgs, ExperimentArgs, GenArgs, GoalArgs,
    RefineArgs, SampleArgs, TrainArgs,
};

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{}: no such file", path.display())))
    }
}

fn robot(spec: &str) -> Result<KinematicChain, CliError> {
    load_robot(spec).map_err(input)
}

fn checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require_file(path)?;
    Checkpoint::load(path).map_err(input)
}

fn goals(args: &GoalArgs) -> Result<Vec<RigidTransform>, CliError> {
    match (&args.goal, &args.goal_file) {
        (Some(g), None) => Ok(vec![parse_goal(g)?]),
        (None, Some(p)) => read_goal_file(p),
        _ => Err(CliError::Input("give exactly one of --goal or --goal-file".into())),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let templates: Vec<KinematicChain> = a.robots.iter().map(|r| robot(r)).collect::<Result<_, _>>()?;
    if a.samples_per_robot == 0 {
        return Err(CliError::Input("--samples-per-robot must be positive".into()));
    }
    let chains = match a.randomize {
        None => templates,
        Some(f) => {
            if !(0.0..1.0).contains(&f) || a.instances == 0 {
                return Err(CliError::Input(
                    "--randomize must lie in [0, 1) and --instances be positive".into(),
                ));
            }
            let mut out = Vec::with_capacity(templates.len() * a.instances);
            for (t, template) in templates.iter().enumerate() {
                for i in 0..a.instances {
                    let seed = a.seed ^ ((t as u64) << 32 | i as u64);
                    out.push(random_chain(template, (1.0 - f, 1.0 + f), seed).map_err(input)?);
                }
            }
            out
        }
    };
    let data = generate_dataset(&chains, a.samples_per_robot, a.seed).map_err(runtime)?;
    let hash = data.save(&a.out).map_err(runtime)?;
    for (chain, n) in data.robots.iter().zip(data.counts()) {
        println!("{:<24} {n:>8} records", chain.name);
    }
    println!("total {} records -> {}", data.len(), a.out.display());
    println!("sha256 {hash}");
    Ok(())
}

fn model_config(a: &TrainArgs) -> Result<ModelConfig, CliError> {
    let mut cfg = match &a.model_config {
        None => ModelConfig::default(),
        Some(p) => {
            require_file(p)?;
            let text = std::fs::read_to_string(p).map_err(input)?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
            } else {
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
            }
        }
    };
    if let Some(arch) = a.arch {
        cfg.arch = match arch {
            ArchFlag::Egnn => Architecture::Egnn,
            ArchFlag::Mpnn => Architecture::Mpnn,
        };
    }
    if let Some(e) = a.edges {
        cfg.edges = match e {
            EdgeFlag::AllPairs => EdgeSet::AllPairs,
            EdgeFlag::GraphEdges => EdgeSet::GraphEdges,
        };
    }
    cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
    cfg.latent = a.latent.unwrap_or(cfg.latent);
    cfg.components = a.components.unwrap_or(cfg.components);
    cfg.layers = a.layers.unwrap_or(cfg.layers);
    cfg.validate().map_err(input)?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    require_file(&a.dataset)?;
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            TrainConfig::load(p).map_err(input)?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.kl_weight = a.kl_weight.unwrap_or(cfg.kl_weight);
    if a.time_limit.is_some() {
        cfg.time_limit_secs = a.time_limit;
    }
    cfg.validate().map_err(input)?;
    let model_cfg = model_config(&a)?;
    let (data, hash) = Dataset::load(&a.dataset).map_err(input)?;
    let init = ModelParams::init(model_cfg, a.seed).map_err(runtime)?;
    let metadata = TrainingMetadata {
        seed: a.seed,
        dataset_hash: hash,
        epochs: 0,
        final_loss: None,
        robots: data.robots.iter().map(|c| c.name.clone()).collect(),
    };
    let sink = CheckpointSink {
        path: Some(a.out.clone()),
        metadata: metadata.clone(),
    };
    let start = Instant::now();
    match train_with(&cfg, &data, init, &sink) {
        Ok(outcome) => {
            for s in &outcome.trace {
                println!(
                    "epoch {:>4}  loss {:>10.4}  recon {:>10.4}  kl {:>9.4}  lr {:.2e}  {:.1}s",
                    s.epoch, s.loss, s.recon, s.kl, s.learning_rate, s.seconds
                );
            }
            let metadata = TrainingMetadata {
                epochs: outcome.trace.len(),
                final_loss: outcome.trace.last().map(|s| s.loss),
                ..metadata
            };
            Checkpoint::new(outcome.model, metadata)
                .save(&a.out)
                .map_err(runtime)?;
            println!(
                "trained {} epochs in {:.1}s -> {}",
                outcome.trace.len(),
                start.elapsed().as_secs_f64(),
                a.out.display()
            );
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            Checkpoint::new(*last_good, metadata)
                .save(&a.out)
                .map_err(runtime)?;
            Err(CliError::Runtime(format!(
                "training diverged in epoch {epoch} ({reason}); last good parameters saved to {}",
                a.out.display()
            )))
        }
        Err(e) => Err(runtime(e)),
    }
}

#[derive(Serialize)]
struct SampleEntry {
    angles: Vec<f64>,
    pos_err_mm: f64,
    rot_err_deg: f64,
    status: SampleStatus,
}

#[derive(Serialize)]
struct GoalSamples {
    goal: [f64; 7],
    samples: Vec<SampleEntry>,
}

pub fn sample(a: SampleArgs) -> Result<(), CliError> {
    let ckpt = checkpoint(&a.checkpoint)?;
    let chain = robot(&a.robot)?;
    let goals = goals(&a.goal)?;
    let mut out = Vec::with_capacity(goals.len());
    for (i, goal) in goals.iter().enumerate() {
        let problem = IkProblem::new(chain.clone(), *goal).map_err(runtime)?;
        let samples =
            sample_solutions(&ckpt.model, &problem, a.count, problem_seed(a.seed, i)).map_err(runtime)?;
        let entries = samples
            .into_iter()
            .map(|s| {
                let pose = chain.end_effector_pose(&s.config).map_err(runtime)?;
                let (p, r) = pose_error(&pose, goal);
                Ok(SampleEntry {
                    angles: s.config.0,
                    pos_err_mm: p * 1e3,
                    rot_err_deg: r,
                    status: s.status,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        out.push(GoalSamples {
            goal: goal_to_values(goal),
            samples: entries,
        });
    }
    if a.goal.goal.is_some() {
        write_json(&out.remove(0).samples, a.out.as_deref())
    } else {
        write_json(&out, a.out.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitKind {
    Random,
    Checkpoint,
}

fn parse_init(s: &str) -> Result<(InitKind, usize), CliError> {
    let bad = || CliError::Input(format!("--init `{s}`: expected random:K or checkpoint:K"));
    let (kind, k) = s.split_once(':').ok_or_else(bad)?;
    let k: usize = k.parse().map_err(|_| bad())?;
    if k == 0 {
        return Err(bad());
    }
    match kind {
        "random" => Ok((InitKind::Random, k)),
        "checkpoint" => Ok((InitKind::Checkpoint, k)),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct RefineRow {
    goal: usize,
    init: String,
    k: usize,
    iters_mean: f64,
    best_iterations: usize,
    converged: bool,
    pos_err_mm: f64,
    rot_err_deg: f64,
    success: bool,
    time_ms: f64,
    angles: String,
}

pub fn refine(a: RefineArgs) -> Result<(), CliError> {
    let (kind, k) = parse_init(&a.init)?;
    let model = match kind {
        InitKind::Checkpoint => {
            let p = a.checkpoint.as_ref().ok_or_else(|| {
                CliError::Input("--init checkpoint:K needs --checkpoint".into())
            })?;
            Some(checkpoint(p)?.model)
        }
        InitKind::Random => None,
    };
    let chain = robot(&a.robot)?;
    let goals = goals(&a.goal)?;
    let opts = RefineOptions {
        max_iterations: a.max_iterations,
        ..RefineOptions::default()
    };
    let mut rows = Vec::with_capacity(goals.len());
    for (i, goal) in goals.iter().enumerate() {
        let seed = problem_seed(a.seed, i);
        let inits = match &model {
            None => random_inits(&chain, k, seed),
            Some(m) => {
                let problem = IkProblem::new(chain.clone(), *goal).map_err(runtime)?;
                sample_solutions(m, &problem, k, seed)
                    .map_err(runtime)?
                    .into_iter()
                    .map(|s| s.config)
                    .collect()
            }
        };
        let start = Instant::now();
        let r = solve_multistart(&chain, goal, &inits, &opts).map_err(runtime)?;
        let time_ms = start.elapsed().as_secs_f64() * 1e3;
        let best = r.best();
        let iters_mean =
            r.results.iter().map(|x| x.iterations as f64).sum::<f64>() / r.results.len() as f64;
        rows.push(RefineRow {
            goal: i,
            init: a.init.clone(),
            k,
            iters_mean,
            best_iterations: best.iterations,
            converged: best.converged,
            pos_err_mm: best.pos_error * 1e3,
            rot_err_deg: best.rot_error_deg,
            success: best.pos_error < 0.01 && best.rot_error_deg < 1.0,
            time_ms,
            angles: best
                .q_final
                .0
                .iter()
                .map(|v| format!("{v:.12}"))
                .collect::<Vec<_>>()
                .join(" "),
        });
    }
    match &a.out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => {
            let mut w = csv::Writer::from_path(p)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            for r in &rows {
                w.serialize(r).map_err(runtime)?;
            }
            w.flush().map_err(runtime)
        }
        out => write_json(&rows, out.as_deref()),
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    rows: &'a [ReportRow],
    reports: &'a [IkReport],
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = checkpoint(&a.checkpoint)?;
    let chains: Vec<KinematicChain> = a.robots.iter().map(|r| robot(r)).collect::<Result<_, _>>()?;
    if a.problems == 0 || a.samples == 0 {
        return Err(CliError::Input("--problems and --samples must be positive".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    let opts = EvalOptions {
        samples_per_goal: a.samples,
        seed: a.seed,
        mmd: a.mmd.then_some(MmdOptions {
            samples: a.mmd_samples,
            reference: RejectionOptions {
                budget: a.mmd_budget,
                ..RejectionOptions::default()
            },
        }),
        ..EvalOptions::default()
    };
    let test = test_set(&chains, a.problems, a.seed).map_err(runtime)?;
    let sampler = ModelSampler::new(&ckpt.model);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (r, chain) in chains.iter().enumerate() {
        let problems = robot_problems(&test, r).map_err(runtime)?;
        let report = evaluate(&sampler, &problems, &opts).map_err(runtime)?;
        let row = ReportRow::from_report("eval", "model", &chain.name, &report);
        println!(
            "{:<16} pos mean {:>9.2} mm  best {:>9.2} mm  rot q3 {:>7.2} deg  success {:>5.1}%  diverged {:>5.1}%",
            chain.name,
            row.err_pos_mean_mm,
            report.best_pos_mean_mm(),
            row.err_rot_q3_deg,
            row.success_pct,
            row.divergence_pct
        );
        rows.push(row);
        reports.push(report);
    }
    ExperimentReport {
        name: "eval".into(),
        rows: rows.clone(),
    }
    .write_csv(&a.out.join("eval.csv"))
    .map_err(runtime)?;
    write_json(
        &EvalOutput {
            rows: &rows,
            reports: &reports,
        },
        Some(&a.out.join("eval.json")),
    )
}

pub fn bench(a: BenchArgs) -> Result<(), CliError> {
    let ckpt = checkpoint(&a.checkpoint)?;
    let chain = robot(&a.robot)?;
    if a.counts.is_empty() || a.repeats == 0 {
        return Err(CliError::Input("need at least one count and one repeat".into()));
    }
    let mut counts = a.counts.clone();
    counts.sort_unstable();
    let goal = chain
        .end_effector_pose(&chain.sample_configuration(a.seed))
        .map_err(runtime)?;
    let problem = IkProblem::new(chain, goal).map_err(runtime)?;
    let rows = bench_sampling(&ckpt.model, &problem, &counts, a.repeats, a.seed).map_err(runtime)?;
    println!("{:>8} {:>12} {:>10} {:>14}", "count", "mean_ms", "std_ms", "per_sample_ms");
    for r in &rows {
        println!(
            "{:>8} {:>12.3} {:>10.3} {:>14.4}",
            r.count, r.mean_ms, r.std_ms, r.per_sample_ms
        );
    }
    write_timing_csv(&rows, &a.out).map_err(runtime)?;
    Ok(())
}

pub fn experiment(a: ExperimentArgs) -> Result<(), CliError> {
    require_file(&a.spec)?;
    let mut spec = ExperimentSpec::load(&a.spec).map_err(input)?;
    if a.out.is_some() {
        spec.out_dir = a.out;
    }
    let report = run_experiment(&spec).map_err(|e| match e {
        gengik::evalkit::EvalError::Io { .. } | gengik::evalkit::EvalError::Config(_) => input(e),
        e => runtime(e),
    })?;
    for r in &report.rows {
        println!(
            "{:<14} {:<16} pos {:>9.2} mm  success {:>5.1}%  diverged {:>5.1}%  iters {:>6}  elbo {:>9}",
            r.label,
            r.robot,
            r.err_pos_mean_mm,
            r.success_pct,
            r.divergence_pct,
            r.iters_mean.map_or("-".into(), |v| format!("{v:.1}")),
            r.test_elbo.map_or("-".into(), |v| format!("{v:.3}")),
        );
    }
    Ok(())
}
