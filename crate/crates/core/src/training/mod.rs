//! Dataset generation, the evidence lower bound, and the optimization loop.

mod dataset;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{adam_step, AdamConfig, AdamState, DiffError, ParamSet, Tape, Tensor, Var};
use crate::distgeo::DistGeoError;
use crate::kinematics::KinematicsError;
use crate::model::net::{self, GraphBatch, Weights};
use crate::model::{
    sample_rng, Checkpoint, GaussianNodeParams, GmmNodeParams, ModelError, ModelParams,
    TrainingMetadata,
};

pub use dataset::{generate_dataset, hash_bytes, Dataset, DatasetHeader, DatasetRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] DistGeoError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset format: {0}")]
    Format(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss (recon {recon}, kl {kl})")]
    NonFiniteLoss { recon: f64, kl: f64 },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Parameters after the last completed epoch.
        last_good: Box<ModelParams>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier applied on a plateau.
    pub lr_decay: f64,
    /// Epochs without a relative improvement of `min_improvement` before
    /// the learning rate decays.
    pub patience: usize,
    pub min_improvement: f64,
    pub kl_weight: f64,
    /// Latent samples in the Monte Carlo KL estimate.
    pub kl_samples: usize,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Restrict training to these robot names; empty means all.
    pub robots: Vec<String>,
    /// Stop after the epoch during which this wall-clock budget ran out.
    pub time_limit_secs: Option<f64>,
    /// Records per tape inside a mini-batch.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            patience: 10,
            min_improvement: 0.01,
            kl_weight: 1.0,
            kl_samples: 1,
            grad_clip: None,
            seed: 0,
            robots: Vec::new(),
            time_limit_secs: None,
            chunk: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.chunk == 0 || self.kl_samples == 0 {
            return bad("batch_size, chunk and kl_samples must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning_rate must be positive and lr_decay in (0, 1]");
        }
        if !(self.kl_weight >= 0.0) {
            return bad("kl_weight must be non-negative");
        }
        Ok(())
    }

    /// Reads a JSON or (by `.toml` extension) TOML file.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-node Monte Carlo KL sample `log q(z) - log p(z)` with
/// `z = mu_q + exp(logstd_q) * eps`. Returns `(kl, z)`, kl as nodes × 1.
#[allow(clippy::too_many_arguments)]
pub fn kl_sample_vars(
    t: &Tape,
    mu_q: Var,
    logstd_q: Var,
    eps: Var,
    mu_p: Var,
    logstd_p: Var,
    logits: Var,
    components: usize,
    latent: usize,
) -> Result<(Var, Var), DiffError> {
    let sd = t.exp(logstd_q);
    let noise = t.mul(sd, eps)?;
    let z = t.add(mu_q, noise)?;

    let e2 = t.square(eps);
    let e2 = t.sum_rows(e2)?;
    let ls = t.sum_rows(logstd_q)?;
    let log_q = t.add(e2, t.scale(ls, 2.0))?;
    let log_q = t.scale(log_q, -0.5);
    let log_q = t.add_scalar(log_q, -(latent as f64) * HALF_LOG_2PI);

    let zk = if components == 1 {
        z
    } else {
        t.concat(&vec![z; components], 1)?
    };
    let centered = t.sub(zk, mu_p)?;
    let inv = t.exp(t.neg(logstd_p));
    let u = t.mul(centered, inv)?;
    let u2 = t.square(u);
    let mut block = vec![0.0; components * latent * components];
    for k in 0..components {
        for l in 0..latent {
            block[(k * latent + l) * components + k] = 1.0;
        }
    }
    let block = t.constant(Tensor::matrix(components * latent, components, block)?);
    let sq = t.matmul(u2, block)?;
    let lsum = t.matmul(logstd_p, block)?;
    let log_n = t.add(sq, t.scale(lsum, 2.0))?;
    let log_n = t.scale(log_n, -0.5);
    let log_n = t.add_scalar(log_n, -(latent as f64) * HALF_LOG_2PI);
    let log_pi = t.log_softmax_rows(logits)?;
    let joint = t.add(log_n, log_pi)?;
    let log_p = t.logsumexp_rows(joint)?;
    Ok((t.sub(log_q, log_p)?, z))
}

/// Monte Carlo estimate of `KL(q || p)` summed over nodes, from `samples`
/// draws. Returns `(mean, standard error)`.
pub fn mc_kl(
    q: &GaussianNodeParams,
    p: &GmmNodeParams,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    let (n, l) = (q.mean.rows(), q.mean.cols());
    let ln = |t: &Tensor| {
        let mut o = t.clone();
        o.data_mut().iter_mut().for_each(|x| *x = x.ln());
        o
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let t = Tape::new();
        let eps = Tensor::matrix(
            n,
            l,
            (0..n * l).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )?;
        let (kl, _) = kl_sample_vars(
            &t,
            t.constant(q.mean.clone()),
            t.constant(ln(&q.std)),
            t.constant(eps),
            t.constant(p.means.clone()),
            t.constant(ln(&p.stds)),
            t.constant(ln(&p.weights)),
            p.components,
            p.latent,
        )?;
        let s = t.sum(kl);
        vals.push(t.item(s));
    }
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    Ok((mean, (var / m).sqrt()))
}

/// Per-record averages of one ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `-(recon - kl_weight * kl)`.
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

impl ElboTerms {
    /// The evidence lower bound itself, `recon - kl`.
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl
    }
}

/// `Σ_i log N(target_i | pred_i, I)` over the rows of two nodes × 3
/// matrices.
pub fn recon_vars(t: &Tape, pred: Var, target: Var) -> Result<Var, DiffError> {
    let rows = t.value(target).rows();
    let err = t.sub(pred, target)?;
    let sq = t.square(err);
    let sq = t.sum(sq);
    Ok(t.add_scalar(t.scale(sq, -0.5), -3.0 * HALF_LOG_2PI * rows as f64))
}

/// Standard normal noise for record `index`: `samples` matrices of
/// nodes × latent.
fn record_noise(seed: u64, index: u64, nodes: usize, latent: usize, samples: usize) -> Vec<Vec<f64>> {
    let mut rng = sample_rng(seed, index);
    (0..samples)
        .map(|_| {
            (0..nodes * latent)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Builds the ELBO for `records` on `w`'s tape. The returned loss is the
/// sum of per-record losses divided by `denom`. Record `i` uses the noise
/// stream `(noise_seed, indices[i])`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_vars(
    w: &Weights,
    model: &ModelParams,
    records: &[&DatasetRecord],
    indices: &[u64],
    noise_seed: u64,
    kl_weight: f64,
    kl_samples: usize,
    denom: f64,
) -> Result<(Var, f64, f64), TrainError> {
    let t = w.tape();
    let cfg = &model.config;
    let complete: Vec<_> = records.iter().map(|r| &r.complete).collect();
    let partial: Vec<_> = records.iter().map(|r| &r.partial).collect();
    let cb = GraphBatch::new(&complete, cfg.edges);
    let pb = GraphBatch::new(&partial, cfg.edges);
    let s = kl_samples.max(1);
    let noise: Vec<Vec<Vec<f64>>> = records
        .iter()
        .zip(indices)
        .map(|(r, &i)| record_noise(noise_seed, i, r.complete.vertex_count(), cfg.latent, s))
        .collect();

    let (mu_q, logstd_q) = net::encoder_vars(w, cfg, &cb)?;
    let (mu_p, logstd_p, logits) = net::prior_vars(w, cfg, &pb)?;

    let mut kl_total: Option<Var> = None;
    let mut z0 = None;
    for k in 0..s {
        let eps: Vec<f64> = noise.iter().flat_map(|n| n[k].iter().copied()).collect();
        let eps = t.constant(Tensor::matrix(cb.node_count, cfg.latent, eps)?);
        let (kl, z) = kl_sample_vars(
            t,
            mu_q,
            logstd_q,
            eps,
            mu_p,
            logstd_p,
            logits,
            cfg.components,
            cfg.latent,
        )?;
        let kl = t.sum(kl);
        kl_total = Some(match kl_total {
            None => kl,
            Some(acc) => t.add(acc, kl)?,
        });
        if k == 0 {
            z0 = Some(z);
        }
    }
    let kl = t.scale(kl_total.expect("at least one sample"), 1.0 / s as f64);

    let decoded = net::decoder_vars(w, cfg, &pb, z0.expect("at least one sample"))?;
    let target = t.constant(cb.positions.clone());
    let recon = recon_vars(t, decoded, target)?;

    let neg = t.sub(t.scale(kl, kl_weight), recon)?;
    let loss = t.scale(neg, 1.0 / denom);
    let (r, k) = (t.item(recon), t.item(kl));
    if !t.item(loss).is_finite() {
        return Err(TrainError::NonFiniteLoss { recon: r, kl: k });
    }
    Ok((loss, r, k))
}

/// ELBO terms averaged over `records`, without gradients.
pub fn elbo(
    model: &ModelParams,
    records: &[&DatasetRecord],
    noise_seed: u64,
    kl_weight: f64,
    kl_samples: usize,
) -> Result<ElboTerms, TrainError> {
    let tape = Tape::new();
    let w = Weights::frozen(&tape, &model.params);
    let idx: Vec<u64> = (0..records.len() as u64).collect();
    let n = records.len().max(1) as f64;
    let (loss, r, k) = elbo_vars(&w, model, records, &idx, noise_seed, kl_weight, kl_samples, n)?;
    Ok(ElboTerms {
        loss: tape.item(loss),
        recon: r / n,
        kl: k / n,
    })
}

/// Mean ELBO terms over a dataset, evaluated in chunks.
pub fn dataset_elbo(
    model: &ModelParams,
    records: &[DatasetRecord],
    noise_seed: u64,
    kl_samples: usize,
    chunk: usize,
) -> Result<ElboTerms, TrainError> {
    let parts: Vec<(f64, f64, usize)> = records
        .par_chunks(chunk.max(1))
        .enumerate()
        .map(|(c, recs)| {
            let refs: Vec<_> = recs.iter().collect();
            let tape = Tape::new();
            let w = Weights::frozen(&tape, &model.params);
            let idx: Vec<u64> = (0..recs.len()).map(|i| (c * chunk + i) as u64).collect();
            let (_, r, k) = elbo_vars(&w, model, &refs, &idx, noise_seed, 1.0, kl_samples, 1.0)?;
            Ok((r, k, recs.len()))
        })
        .collect::<Result<_, TrainError>>()?;
    let n: usize = parts.iter().map(|p| p.2).sum();
    let n = n.max(1) as f64;
    let recon = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let kl = parts.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(ElboTerms {
        loss: kl - recon,
        recon,
        kl,
    })
}

/// Gradient of the mean loss over `records` with respect to all parameters.
pub fn elbo_gradient(
    model: &ModelParams,
    records: &[&DatasetRecord],
    indices: &[u64],
    noise_seed: u64,
    kl_weight: f64,
    kl_samples: usize,
) -> Result<(ElboTerms, ParamSet), TrainError> {
    let tape = Tape::new();
    let w = Weights::trainable(&tape, &model.params);
    let n = records.len().max(1) as f64;
    let (loss, r, k) = elbo_vars(&w, model, records, indices, noise_seed, kl_weight, kl_samples, n)?;
    tape.backward(loss)?;
    Ok((
        ElboTerms {
            loss: tape.item(loss),
            recon: r / n,
            kl: k / n,
        },
        w.gradients(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub trace: Vec<EpochStats>,
}

/// Where and how to checkpoint during training.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    /// Checkpoint written (overwritten) after every epoch.
    pub path: Option<PathBuf>,
    pub metadata: TrainingMetadata,
}

/// Learning rate schedule that decays on loss plateaus.
#[derive(Debug, Clone)]
struct Plateau {
    best: f64,
    wait: usize,
}

impl Plateau {
    fn update(&mut self, loss: f64, cfg: &TrainConfig, lr: &mut f64) {
        if !self.best.is_finite() || loss < self.best - cfg.min_improvement * self.best.abs() {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= cfg.patience {
                *lr *= cfg.lr_decay;
                self.wait = 0;
            }
        }
    }
}

pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    init: ModelParams,
) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, data, init, &CheckpointSink::default())
}

/// Adam over shuffled mini-batches. Gradients of a batch are computed on
/// independent tapes of `cfg.chunk` records each and summed.
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    init: ModelParams,
    sink: &CheckpointSink,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let selected: Vec<usize> = data
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            cfg.robots.is_empty() || cfg.robots.iter().any(|n| *n == data.robots[r.robot].name)
        })
        .map(|(i, _)| i)
        .collect();
    if selected.is_empty() {
        return Err(TrainError::Config("no training records selected".into()));
    }
    let mut model = init;
    let mut state = AdamState::new(&model.params);
    let mut lr = cfg.learning_rate;
    let mut plateau = Plateau {
        best: f64::INFINITY,
        wait: 0,
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order = selected.clone();
        order.shuffle(&mut rng);
        let noise_seed = cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (mut sum_loss, mut sum_recon, mut sum_kl) = (0.0, 0.0, 0.0);

        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            let parts: Vec<(f64, f64, f64, ParamSet)> = batch
                .par_chunks(cfg.chunk)
                .map(|ids| {
                    let recs: Vec<_> = ids.iter().map(|&i| &data.records[i]).collect();
                    let idx: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
                    let tape = Tape::new();
                    let w = Weights::trainable(&tape, &model.params);
                    let (loss, r, k) = elbo_vars(
                        &w,
                        &model,
                        &recs,
                        &idx,
                        noise_seed,
                        cfg.kl_weight,
                        cfg.kl_samples,
                        b,
                    )?;
                    tape.backward(loss)?;
                    Ok((tape.item(loss), r, k, w.gradients()))
                })
                .collect::<Result<_, TrainError>>()
                .map_err(|e| diverged(epoch, e, &model))?;
            let mut grads = model.params.zeros_like();
            for (l, r, k, g) in &parts {
                sum_loss += l * b;
                sum_recon += r;
                sum_kl += k;
                grads.add_scaled(g, 1.0)?;
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            let adam = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            let mut next = model.params.clone();
            adam_step(&mut next, &grads, &mut state, &adam)
                .map_err(|e| diverged(epoch, e.into(), &model))?;
            model.params = next;
        }

        let n = order.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: sum_loss / n,
            recon: sum_recon / n,
            kl: sum_kl / n,
            learning_rate: lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if !stats.loss.is_finite() {
            return Err(diverged(
                epoch,
                TrainError::NonFiniteLoss {
                    recon: stats.recon,
                    kl: stats.kl,
                },
                &model,
            ));
        }
        plateau.update(stats.loss, cfg, &mut lr);
        trace.push(stats);
        if let Some(path) = &sink.path {
            let mut meta = sink.metadata.clone();
            meta.epochs = epoch + 1;
            meta.final_loss = trace.last().map(|s| s.loss);
            Checkpoint::new(model.clone(), meta).save(path)?;
        }
        if cfg
            .time_limit_secs
            .is_some_and(|lim| start.elapsed().as_secs_f64() >= lim)
        {
            break;
        }
    }
    Ok(TrainOutcome { model, trace })
}

fn diverged(epoch: usize, e: TrainError, model: &ModelParams) -> TrainError {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Diff(DiffError::NonFiniteGradient(_)) => {
            TrainError::Diverged {
                epoch: epoch + 1,
                reason: e.to_string(),
                last_good: Box::new(model.clone()),
            }
        }
        other => other,
    }
}

/// Centered moving average of the loss trace with the given window.
pub fn smoothed(trace: &[EpochStats], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = i.saturating_sub(w / 2);
            let hi = (i + w / 2 + 1).min(trace.len());
            trace[lo..hi].iter().map(|s| s.loss).sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
