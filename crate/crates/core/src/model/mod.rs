//! Conditional generative model over solution graphs.
//!
//! Three message-passing stacks share one architecture: an encoder reading a
//! complete graph and producing a per-node Gaussian over latents, a prior
//! reading the partial (problem) graph and producing a per-node Gaussian
//! mixture, and a decoder mapping partial graph plus latents to per-node
//! position means.

mod checkpoint;
pub mod net;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, ParamSet, Tape, Tensor};
use crate::distgeo::{
    points_to_config_with, DgGraph, DistGeoError, Edge, IkProblem, ReconstructionOptions,
};
use crate::kinematics::{Configuration, KinematicChain};

pub use checkpoint::{Checkpoint, TrainingMetadata};
use net::{GraphBatch, Weights};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] DistGeoError),
    #[error("non-finite values in {0} output")]
    NonFinite(&'static str),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("latent has {got} rows, graph has {expected} vertices")]
    LatentShape { expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Equivariant layers with a separate coordinate channel.
    Egnn,
    /// Plain message passing with positions concatenated into the features.
    Mpnn,
}

/// Vertex pairs along which messages are exchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSet {
    /// Every ordered vertex pair; absent graph edges carry a zero attribute.
    AllPairs,
    /// Only the graph's own edges.
    GraphEdges,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub hidden: usize,
    pub latent: usize,
    pub components: usize,
    pub layers: usize,
    pub edges: EdgeSet,
    /// Coordinate updates are divided by `sqrt(|x_i - x_j|² + norm_eps) + norm_constant`.
    pub norm_eps: f64,
    pub norm_constant: f64,
    /// Initialization gain of the coordinate gate weights.
    pub coord_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Egnn,
            hidden: 64,
            latent: 64,
            components: 16,
            layers: 5,
            edges: EdgeSet::AllPairs,
            norm_eps: 1e-8,
            norm_constant: 1.0,
            coord_init_gain: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.latent == 0 || self.components == 0 {
            return Err(ModelError::Config(
                "hidden, latent and components must be positive".into(),
            ));
        }
        if !(self.norm_eps >= 0.0 && self.norm_constant >= 0.0)
            || self.norm_eps + self.norm_constant <= 0.0
        {
            return Err(ModelError::Config(
                "coordinate normalization must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// All learnable weights together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            params: net::init_params(&config, &mut rng),
        })
    }
}

/// Per-node latent vectors, vertices × latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    pub z: Tensor,
}

/// Per-node diagonal Gaussian, vertices × latent.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNodeParams {
    pub mean: Tensor,
    pub std: Tensor,
}

/// Per-node Gaussian mixture. `means` and `stds` are vertices × (K·latent)
/// with component `k` in columns `k·latent .. (k+1)·latent`; `weights` is
/// vertices × K.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmNodeParams {
    pub components: usize,
    pub latent: usize,
    pub means: Tensor,
    pub stds: Tensor,
    pub weights: Tensor,
}

impl GmmNodeParams {
    pub fn node_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn mean(&self, node: usize, k: usize) -> &[f64] {
        &self.means.row(node)[k * self.latent..(k + 1) * self.latent]
    }

    pub fn std(&self, node: usize, k: usize) -> &[f64] {
        &self.stds.row(node)[k * self.latent..(k + 1) * self.latent]
    }

    /// Ancestral draw: a component per node by inverse CDF on its weights,
    /// then a Gaussian sample from that component.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentGraph {
        let n = self.node_count();
        let mut z = Vec::with_capacity(n * self.latent);
        for i in 0..n {
            let u: f64 = rng.gen();
            let w = self.weights.row(i);
            let mut acc = 0.0;
            let mut k = self.components - 1;
            for (j, wj) in w.iter().enumerate() {
                acc += wj;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let (mu, sd) = (self.mean(i, k), self.std(i, k));
            for l in 0..self.latent {
                let e: f64 = rng.sample(StandardNormal);
                z.push(mu[l] + sd[l] * e);
            }
        }
        LatentGraph {
            z: Tensor::matrix(n, self.latent, z).expect("sized"),
        }
    }
}

fn finite(t: &Tensor, stage: &'static str) -> Result<(), ModelError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite(stage))
    }
}

fn exp_tensor(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|x| *x = x.exp());
    out
}

/// Posterior over latents given a complete graph.
pub fn encode(params: &ModelParams, g: &DgGraph) -> Result<GaussianNodeParams, ModelError> {
    let tape = Tape::new();
    let w = Weights::frozen(&tape, &params.params);
    let batch = GraphBatch::new(&[g], params.config.edges);
    let (mu, logstd) = net::encoder_vars(&w, &params.config, &batch)?;
    let mean = tape.value(mu).clone();
    let std = exp_tensor(&tape.value(logstd));
    finite(&mean, "encoder")?;
    finite(&std, "encoder")?;
    Ok(GaussianNodeParams { mean, std })
}

/// Mixture prior over latents given a partial graph.
pub fn prior(params: &ModelParams, g: &DgGraph) -> Result<GmmNodeParams, ModelError> {
    let tape = Tape::new();
    let w = Weights::frozen(&tape, &params.params);
    let batch = GraphBatch::new(&[g], params.config.edges);
    let (mu, logstd, logits) = net::prior_vars(&w, &params.config, &batch)?;
    let weights = tape.softmax_rows(logits)?;
    let out = GmmNodeParams {
        components: params.config.components,
        latent: params.config.latent,
        means: tape.value(mu).clone(),
        stds: exp_tensor(&tape.value(logstd)),
        weights: tape.value(weights).clone(),
    };
    finite(&out.means, "prior")?;
    finite(&out.stds, "prior")?;
    finite(&out.weights, "prior")?;
    Ok(out)
}

/// Decoded per-node position means for one partial graph and latent.
pub fn decode(
    params: &ModelParams,
    g: &DgGraph,
    z: &LatentGraph,
) -> Result<Vec<Vector3<f64>>, ModelError> {
    let mut out = decode_many(params, g, std::slice::from_ref(z))?;
    Ok(out.pop().expect("one latent in, one point set out"))
}

/// Decodes several latents for the same partial graph on one tape.
pub fn decode_many(
    params: &ModelParams,
    g: &DgGraph,
    zs: &[LatentGraph],
) -> Result<Vec<Vec<Vector3<f64>>>, ModelError> {
    let n = g.vertex_count();
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    for z in zs {
        if z.z.rows() != n || z.z.cols() != params.config.latent {
            return Err(ModelError::LatentShape {
                expected: n,
                got: z.z.rows(),
            });
        }
    }
    let tape = Tape::new();
    let w = Weights::frozen(&tape, &params.params);
    let graphs = vec![g; zs.len()];
    let batch = GraphBatch::new(&graphs, params.config.edges);
    let mut zdata = Vec::with_capacity(zs.len() * n * params.config.latent);
    for z in zs {
        zdata.extend_from_slice(z.z.data());
    }
    let zt = Tensor::matrix(zs.len() * n, params.config.latent, zdata)?;
    let zv = tape.constant(zt);
    let pos = net::decoder_vars(&w, &params.config, &batch, zv)?;
    let pos = tape.value(pos);
    finite(&pos, "decoder")?;
    Ok((0..zs.len())
        .map(|s| net::rows_to_points(&pos, s * n, n))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    /// The decoded points were too far from any realizable configuration.
    ReconstructionDiverged { max_deviation: f64 },
}

#[derive(Debug, Clone)]
pub struct SolutionSample {
    /// Recovered configuration; a best-effort fit when reconstruction
    /// diverged.
    pub config: Configuration,
    /// Complete graph over the decoded points.
    pub graph: DgGraph,
    pub status: SampleStatus,
}

impl SolutionSample {
    pub fn diverged(&self) -> bool {
        self.status != SampleStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingOptions {
    /// Samples decoded per tape.
    pub chunk: usize,
    pub reconstruction: ReconstructionOptions,
    /// Replace decoded positions of known vertices by their given positions
    /// before reconstruction.
    pub pin_known: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            chunk: 32,
            reconstruction: ReconstructionOptions::default(),
            pin_known: true,
        }
    }
}

/// Random stream for sample `index` under `seed`; samples are independent
/// of how many others are drawn alongside them.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_solutions(
    params: &ModelParams,
    problem: &IkProblem,
    count: usize,
    seed: u64,
) -> Result<Vec<SolutionSample>, ModelError> {
    sample_solutions_with(params, problem, count, seed, &SamplingOptions::default())
}

/// Draws `count` latents from the prior of the problem's partial graph,
/// decodes them and reconstructs a configuration from each point set.
pub fn sample_solutions_with(
    params: &ModelParams,
    problem: &IkProblem,
    count: usize,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<Vec<SolutionSample>, ModelError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let g = &problem.partial_graph;
    let mixture = prior(params, g)?;
    let latents: Vec<LatentGraph> = (0..count)
        .map(|s| mixture.sample(&mut sample_rng(seed, s as u64)))
        .collect();
    let chunk = opts.chunk.max(1);
    let decoded: Vec<Vec<Vec<Vector3<f64>>>> = latents
        .par_chunks(chunk)
        .map(|zs| decode_many(params, g, zs))
        .collect::<Result<_, _>>()?;
    Ok(decoded
        .into_iter()
        .flatten()
        .map(|points| reconstruct(&problem.chain, g, points, opts))
        .collect())
}

fn reconstruct(
    chain: &KinematicChain,
    partial: &DgGraph,
    mut points: Vec<Vector3<f64>>,
    opts: &SamplingOptions,
) -> SolutionSample {
    if opts.pin_known {
        for (p, (known, given)) in points
            .iter_mut()
            .zip(partial.known.iter().zip(&partial.positions))
        {
            if *known {
                *p = *given;
            }
        }
    }
    let (config, status) = match points_to_config_with(
        chain,
        &points,
        partial.goal.as_ref(),
        &opts.reconstruction,
    ) {
        Ok(q) => (q, SampleStatus::Ok),
        Err(DistGeoError::Diverged {
            max_deviation,
            best_effort,
            ..
        }) => (
            best_effort.unwrap_or_else(|| Configuration::zeros(chain.dof())),
            SampleStatus::ReconstructionDiverged { max_deviation },
        ),
        Err(_) => (
            Configuration::zeros(chain.dof()),
            SampleStatus::ReconstructionDiverged {
                max_deviation: f64::INFINITY,
            },
        ),
    };
    SolutionSample {
        config,
        graph: graph_from_points(partial, points),
        status,
    }
}

/// Complete graph over `points` with the partial graph's roles and goal.
pub fn graph_from_points(partial: &DgGraph, points: Vec<Vector3<f64>>) -> DgGraph {
    let n = points.len();
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in u + 1..n {
            edges.push(Edge {
                u,
                v,
                weight: (points[u] - points[v]).norm(),
            });
        }
    }
    DgGraph {
        dof: partial.dof,
        roles: partial.roles.clone(),
        positions: points,
        known: vec![true; n],
        edges,
        has_base_frame: partial.has_base_frame,
        goal: partial.goal,
    }
}

#[cfg(test)]
mod tests;
