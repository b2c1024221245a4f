//! Batched message passing over a disjoint union of graphs on one tape.

use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::Vector3;
use rand::Rng;

use super::{Architecture, EdgeSet, ModelConfig, ModelError};
use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::distgeo::DgGraph;

/// Disjoint union of graphs with fixed per-graph node ordering.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub node_count: usize,
    /// Start offset of each graph's nodes.
    pub offsets: Vec<usize>,
    pub roles: Tensor,
    pub positions: Tensor,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// `[weight, present]` per directed edge.
    pub edge_attr: Tensor,
    /// `1 / in-degree` per node (0 for isolated nodes).
    pub inv_degree: Tensor,
}

impl GraphBatch {
    /// Builds the batch. Messages flow along every ordered vertex pair for
    /// [`EdgeSet::AllPairs`], or along the graph's own edges otherwise;
    /// edge attributes always come from the graph's weighted edges.
    pub fn new(graphs: &[&DgGraph], edges: EdgeSet) -> Self {
        let node_count: usize = graphs.iter().map(|g| g.vertex_count()).sum();
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut roles = Vec::with_capacity(node_count * 3);
        let mut positions = Vec::with_capacity(node_count * 3);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut attr = Vec::new();
        let mut degree = vec![0usize; node_count];
        let mut base = 0;
        for g in graphs {
            let n = g.vertex_count();
            offsets.push(base);
            for v in 0..n {
                roles.extend_from_slice(&g.roles[v].one_hot());
                positions.extend_from_slice(g.positions[v].as_slice());
            }
            let mut weight = vec![None; n * n];
            for e in &g.edges {
                weight[e.u * n + e.v] = Some(e.weight);
                weight[e.v * n + e.u] = Some(e.weight);
            }
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = weight[i * n + j];
                    if edges == EdgeSet::GraphEdges && w.is_none() {
                        continue;
                    }
                    dst.push(base + i);
                    src.push(base + j);
                    attr.push(w.unwrap_or(0.0));
                    attr.push(if w.is_some() { 1.0 } else { 0.0 });
                    degree[base + i] += 1;
                }
            }
            base += n;
        }
        let e = dst.len();
        Self {
            node_count,
            offsets,
            roles: Tensor::matrix(node_count, 3, roles).expect("sized above"),
            positions: Tensor::matrix(node_count, 3, positions).expect("sized above"),
            src: src.into(),
            dst: dst.into(),
            edge_attr: Tensor::matrix(e, 2, attr).expect("sized above"),
            inv_degree: Tensor::matrix(
                node_count,
                1,
                degree
                    .iter()
                    .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
                    .collect(),
            )
            .expect("sized above"),
        }
    }

    pub fn graph_count(&self) -> usize {
        self.offsets.len()
    }

    pub fn edge_count(&self) -> usize {
        self.dst.len()
    }

    /// Node count of graph `g`.
    pub fn graph_len(&self, g: usize) -> usize {
        let end = self.offsets.get(g + 1).copied().unwrap_or(self.node_count);
        end - self.offsets[g]
    }

    pub fn with_positions(mut self, positions: Tensor) -> Self {
        self.positions = positions;
        self
    }
}

/// Parameter leaves bound to one tape.
pub struct Weights<'t> {
    tape: &'t Tape,
    vars: HashMap<String, Var>,
}

impl<'t> Weights<'t> {
    /// Binds every parameter as a differentiable leaf.
    pub fn trainable(tape: &'t Tape, params: &ParamSet) -> Self {
        Self::bind(tape, params, true)
    }

    /// Binds every parameter as a constant.
    pub fn frozen(tape: &'t Tape, params: &ParamSet) -> Self {
        Self::bind(tape, params, false)
    }

    fn bind(tape: &'t Tape, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    /// Gradients of all bound parameters, zero where none reached them.
    pub fn gradients(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, &v) in &self.vars {
            let g = self
                .tape
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(&self.tape.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Which of the three networks a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Prior,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "enc",
            Stack::Prior => "prior",
            Stack::Decoder => "dec",
        }
    }

    fn input_width(self, cfg: &ModelConfig) -> usize {
        let base = match self {
            Stack::Decoder => 3 + cfg.latent,
            _ => 3,
        };
        match cfg.arch {
            Architecture::Egnn => base,
            Architecture::Mpnn => base + 3,
        }
    }

    fn heads(self, cfg: &ModelConfig) -> Vec<(&'static str, usize)> {
        let kl = cfg.components * cfg.latent;
        match self {
            Stack::Encoder => vec![("mu", cfg.latent), ("logstd", cfg.latent)],
            Stack::Prior => vec![("mu", kl), ("logstd", kl), ("logits", cfg.components)],
            Stack::Decoder => match cfg.arch {
                Architecture::Egnn => vec![],
                Architecture::Mpnn => vec![("pos", 3)],
            },
        }
    }
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

fn bias(n: usize) -> Tensor {
    Tensor::zeros(&[1, n])
}

/// Freshly initialized parameters for all three stacks.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    let h = cfg.hidden;
    for stack in [Stack::Encoder, Stack::Prior, Stack::Decoder] {
        let pre = stack.prefix();
        p.insert(
            format!("{pre}.embed.w"),
            xavier(rng, stack.input_width(cfg), h, 1.0),
        );
        p.insert(format!("{pre}.embed.b"), bias(h));
        for l in 0..cfg.layers {
            let lp = format!("{pre}.l{l}");
            p.insert(format!("{lp}.msg1.wd"), xavier(rng, h, h, 1.0));
            p.insert(format!("{lp}.msg1.ws"), xavier(rng, h, h, 1.0));
            p.insert(format!("{lp}.msg1.we"), xavier(rng, 2, h, 1.0));
            if cfg.arch == Architecture::Egnn {
                p.insert(format!("{lp}.msg1.wr"), xavier(rng, 1, h, 1.0));
            }
            p.insert(format!("{lp}.msg1.b"), bias(h));
            p.insert(format!("{lp}.msg2.w"), xavier(rng, h, h, 1.0));
            p.insert(format!("{lp}.msg2.b"), bias(h));
            if cfg.arch == Architecture::Egnn {
                p.insert(format!("{lp}.coord.w"), xavier(rng, h, 1, cfg.coord_init_gain));
            }
            p.insert(format!("{lp}.node1.wh"), xavier(rng, h, h, 1.0));
            p.insert(format!("{lp}.node1.wm"), xavier(rng, h, h, 1.0));
            p.insert(format!("{lp}.node1.b"), bias(h));
            p.insert(format!("{lp}.node2.w"), xavier(rng, h, h, 1.0));
            p.insert(format!("{lp}.node2.b"), bias(h));
        }
        for (name, width) in stack.heads(cfg) {
            p.insert(format!("{pre}.{name}.w"), xavier(rng, h, width, 1.0));
            p.insert(format!("{pre}.{name}.b"), bias(width));
        }
    }
    p
}

/// Applies `layers` message-passing layers of stack `prefix` to node
/// features `h` (nodes × hidden) and coordinates `x` (nodes × 3).
///
/// With [`Architecture::Egnn`] the coordinate update is a learned scalar per
/// edge times the relative position, so `x` transforms with any rigid motion
/// of the input while `h` stays unchanged. The plain variant leaves `x`
/// untouched.
#[allow(clippy::too_many_arguments)]
pub fn egnn_forward(
    w: &Weights,
    cfg: &ModelConfig,
    prefix: &str,
    layers: usize,
    batch: &GraphBatch,
    mut h: Var,
    mut x: Var,
) -> Result<(Var, Var), ModelError> {
    let t = w.tape();
    let attr = t.constant(batch.edge_attr.clone());
    let inv_deg = t.constant(batch.inv_degree.clone());
    let n = batch.node_count;
    for l in 0..layers {
        let lp = format!("{prefix}.l{l}");
        let pd = t.matmul(h, w.get(&format!("{lp}.msg1.wd"))?)?;
        let ps = t.matmul(h, w.get(&format!("{lp}.msg1.ws"))?)?;
        let md = t.gather_rows(pd, batch.dst.clone())?;
        let ms = t.gather_rows(ps, batch.src.clone())?;
        let mut pre = t.add(md, ms)?;
        let ea = t.matmul(attr, w.get(&format!("{lp}.msg1.we"))?)?;
        pre = t.add(pre, ea)?;
        let diff = if cfg.arch == Architecture::Egnn {
            let xd = t.gather_rows(x, batch.dst.clone())?;
            let xs = t.gather_rows(x, batch.src.clone())?;
            let diff = t.sub(xd, xs)?;
            let sq = t.square(diff);
            let radial = t.sum_rows(sq)?;
            let r = t.matmul(radial, w.get(&format!("{lp}.msg1.wr"))?)?;
            pre = t.add(pre, r)?;
            Some((diff, radial))
        } else {
            None
        };
        pre = t.add_row(pre, w.get(&format!("{lp}.msg1.b"))?)?;
        let m1 = t.silu(pre);
        let m2 = t.linear(
            m1,
            w.get(&format!("{lp}.msg2.w"))?,
            w.get(&format!("{lp}.msg2.b"))?,
        )?;
        let m = t.silu(m2);

        if let Some((diff, radial)) = diff {
            let s = t.matmul(m, w.get(&format!("{lp}.coord.w"))?)?;
            let dist = t.add_scalar(radial, cfg.norm_eps);
            let dist = t.sqrt(dist);
            let denom = t.add_scalar(dist, cfg.norm_constant);
            let gate = t.div(s, denom)?;
            let upd = t.mul_col(diff, gate)?;
            let agg = t.scatter_add_rows(upd, batch.dst.clone(), n)?;
            let agg = t.mul_col(agg, inv_deg)?;
            x = t.add(x, agg)?;
        }

        let magg = t.scatter_add_rows(m, batch.dst.clone(), n)?;
        let magg = t.mul_col(magg, inv_deg)?;
        let a = t.matmul(h, w.get(&format!("{lp}.node1.wh"))?)?;
        let b = t.matmul(magg, w.get(&format!("{lp}.node1.wm"))?)?;
        let u = t.add(a, b)?;
        let u = t.add_row(u, w.get(&format!("{lp}.node1.b"))?)?;
        let u = t.silu(u);
        let u = t.linear(
            u,
            w.get(&format!("{lp}.node2.w"))?,
            w.get(&format!("{lp}.node2.b"))?,
        )?;
        h = t.add(h, u)?;
    }
    Ok((h, x))
}

/// Embeds the input features and runs a full stack. `extra` is appended to
/// the role one-hot (the decoder's latents).
pub fn run_stack(
    w: &Weights,
    cfg: &ModelConfig,
    stack: Stack,
    batch: &GraphBatch,
    extra: Option<Var>,
) -> Result<(Var, Var), ModelError> {
    let t = w.tape();
    let roles = t.constant(batch.roles.clone());
    let x = t.constant(batch.positions.clone());
    let mut parts = vec![roles];
    if let Some(e) = extra {
        parts.push(e);
    }
    if cfg.arch == Architecture::Mpnn {
        parts.push(x);
    }
    let input = if parts.len() == 1 {
        roles
    } else {
        t.concat(&parts, 1)?
    };
    let pre = stack.prefix();
    let h = t.linear(
        input,
        w.get(&format!("{pre}.embed.w"))?,
        w.get(&format!("{pre}.embed.b"))?,
    )?;
    egnn_forward(w, cfg, pre, cfg.layers, batch, h, x)
}

pub fn head(w: &Weights, prefix: &str, name: &str, h: Var) -> Result<Var, ModelError> {
    let t = w.tape();
    Ok(t.linear(
        h,
        w.get(&format!("{prefix}.{name}.w"))?,
        w.get(&format!("{prefix}.{name}.b"))?,
    )?)
}

/// Encoder outputs `(mu, logstd)`, both nodes × latent.
pub fn encoder_vars(
    w: &Weights,
    cfg: &ModelConfig,
    complete: &GraphBatch,
) -> Result<(Var, Var), ModelError> {
    let (h, _) = run_stack(w, cfg, Stack::Encoder, complete, None)?;
    Ok((head(w, "enc", "mu", h)?, head(w, "enc", "logstd", h)?))
}

/// Prior outputs `(mu, logstd, logits)`: nodes × (K·latent) twice, then
/// nodes × K. Component `k` occupies columns `k·latent .. (k+1)·latent`.
pub fn prior_vars(
    w: &Weights,
    cfg: &ModelConfig,
    partial: &GraphBatch,
) -> Result<(Var, Var, Var), ModelError> {
    let (h, _) = run_stack(w, cfg, Stack::Prior, partial, None)?;
    Ok((
        head(w, "prior", "mu", h)?,
        head(w, "prior", "logstd", h)?,
        head(w, "prior", "logits", h)?,
    ))
}

/// Decoded position means, nodes × 3.
pub fn decoder_vars(
    w: &Weights,
    cfg: &ModelConfig,
    partial: &GraphBatch,
    z: Var,
) -> Result<Var, ModelError> {
    let (h, x) = run_stack(w, cfg, Stack::Decoder, partial, Some(z))?;
    match cfg.arch {
        Architecture::Egnn => Ok(x),
        Architecture::Mpnn => head(w, "dec", "pos", h),
    }
}

pub(crate) fn rows_to_points(t: &Tensor, start: usize, len: usize) -> Vec<Vector3<f64>> {
    (start..start + len)
        .map(|r| {
            let row = t.row(r);
            Vector3::new(row[0], row[1], row[2])
        })
        .collect()
}
