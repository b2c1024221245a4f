//! Training records and their on-disk format.
//!
//! File layout: magic, format version, a JSON header (robot descriptions,
//! counts, seed), then one length-prefixed binary record per sample.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::distgeo::{assemble_partial_graph, complete_graph_from_config, DgGraph, Edge, VertexLayout};
use crate::kinematics::{pose_error, Configuration, KinematicChain, RigidTransform, RobotDescription};
use crate::model::{graph_from_points, sample_rng};

const MAGIC: &[u8; 8] = b"GGIKDATA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// Index into [`Dataset::robots`].
    pub robot: usize,
    pub complete: DgGraph,
    pub partial: DgGraph,
    /// Source configuration, kept for diagnostics.
    pub config: Configuration,
}

impl DatasetRecord {
    pub fn from_config(
        robot: usize,
        chain: &KinematicChain,
        q: Configuration,
    ) -> Result<Self, TrainError> {
        let complete = complete_graph_from_config(chain, &q, true)?;
        let goal = complete.goal.expect("goal attached from forward kinematics");
        let partial = assemble_partial_graph(chain, &goal)?;
        Ok(Self {
            robot,
            complete,
            partial,
            config: q,
        })
    }

    /// Checks that the partial graph agrees with the complete one on shared
    /// edges and that its goal is the forward kinematics of the source
    /// configuration.
    pub fn check(&self, chain: &KinematicChain) -> Result<(), String> {
        for e in &self.partial.edges {
            let w = self
                .complete
                .edge_weight(e.u, e.v)
                .ok_or_else(|| format!("edge ({}, {}) missing from complete graph", e.u, e.v))?;
            if (w - e.weight).abs() > 1e-9 {
                return Err(format!(
                    "edge ({}, {}) weights differ: {} vs {}",
                    e.u, e.v, w, e.weight
                ));
            }
        }
        let goal = self.partial.goal.ok_or("partial graph has no goal")?;
        let fk = chain
            .end_effector_pose(&self.config)
            .map_err(|e| e.to_string())?;
        let (dp, dr) = pose_error(&goal, &fk);
        if dp > 1e-9 || dr > 1e-7 {
            return Err(format!("goal differs from FK(q) by {dp} m, {dr} deg"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub robots: Vec<RobotDescription>,
    pub samples_per_chain: usize,
    pub seed: u64,
    pub record_count: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub robots: Vec<KinematicChain>,
    pub samples_per_chain: usize,
    pub seed: u64,
    pub records: Vec<DatasetRecord>,
}

/// Uniform configuration samples for every chain, interleaved round-robin
/// across chains. Record `r` draws from its own random stream, so output
/// does not depend on thread count.
pub fn generate_dataset(
    chains: &[KinematicChain],
    samples_per_chain: usize,
    seed: u64,
) -> Result<Dataset, TrainError> {
    for c in chains {
        c.validate()?;
    }
    let m = chains.len();
    let records = (0..samples_per_chain * m)
        .into_par_iter()
        .map(|r| {
            let robot = r % m;
            let q = chains[robot].sample_configuration_with(&mut sample_rng(seed, r as u64));
            DatasetRecord::from_config(robot, &chains[robot], q)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        robots: chains.to_vec(),
        samples_per_chain,
        seed,
        records,
    })
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| TrainError::Format("truncated record".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn encode_record(rec: &DatasetRecord) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(rec.robot as u32).to_le_bytes());
    out.extend_from_slice(&(rec.config.len() as u32).to_le_bytes());
    for a in rec.config.angles() {
        put_f64(&mut out, *a);
    }
    let goal = rec.partial.goal.unwrap_or_else(RigidTransform::identity);
    for x in goal.rotation.iter().chain(goal.translation.iter()) {
        put_f64(&mut out, *x);
    }
    for p in &rec.complete.positions {
        for x in p.iter() {
            put_f64(&mut out, *x);
        }
    }
    out.extend_from_slice(&(rec.partial.edges.len() as u32).to_le_bytes());
    for e in &rec.partial.edges {
        out.extend_from_slice(&(e.u as u32).to_le_bytes());
        out.extend_from_slice(&(e.v as u32).to_le_bytes());
        put_f64(&mut out, e.weight);
    }
    out
}

fn decode_record(bytes: &[u8], robots: &[KinematicChain]) -> Result<DatasetRecord, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    let robot = r.u32()? as usize;
    let chain = robots
        .get(robot)
        .ok_or_else(|| TrainError::Format(format!("robot index {robot} out of range")))?;
    let n = r.u32()? as usize;
    if n != chain.dof() {
        return Err(TrainError::Format(format!(
            "record has {n} angles, robot has {} joints",
            chain.dof()
        )));
    }
    let config = Configuration((0..n).map(|_| r.f64()).collect::<Result<_, _>>()?);
    let mut g = [0.0; 12];
    for x in g.iter_mut() {
        *x = r.f64()?;
    }
    let goal = RigidTransform::new(
        Matrix3::from_column_slice(&g[..9]),
        Vector3::new(g[9], g[10], g[11]),
    );
    let layout = VertexLayout::new(n);
    let mut points = Vec::with_capacity(layout.vertex_count());
    for _ in 0..layout.vertex_count() {
        points.push(Vector3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    let edge_count = r.u32()? as usize;
    let mut edges = Vec::with_capacity(edge_count);
    for _ in 0..edge_count {
        let u = r.u32()? as usize;
        let v = r.u32()? as usize;
        let weight = r.f64()?;
        if u >= v || v >= layout.vertex_count() {
            return Err(TrainError::Format(format!("bad edge ({u}, {v})")));
        }
        edges.push(Edge { u, v, weight });
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Format("trailing bytes in record".into()));
    }
    let roles: Vec<_> = (0..layout.vertex_count()).map(|v| layout.role(v)).collect();
    let mut known = vec![false; layout.vertex_count()];
    for v in layout.base().into_iter().chain(layout.end_effector()) {
        known[v] = true;
    }
    let partial = DgGraph {
        dof: n,
        roles: roles.clone(),
        positions: points
            .iter()
            .zip(&known)
            .map(|(p, k)| if *k { *p } else { Vector3::zeros() })
            .collect(),
        known,
        edges,
        has_base_frame: true,
        goal: Some(goal),
    };
    let complete = graph_from_points(&partial, points);
    Ok(DatasetRecord {
        robot,
        complete,
        partial,
        config,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records per robot, in robot order.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.robots.len()];
        for r in &self.records {
            c[r.robot] += 1;
        }
        c
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            robots: self.robots.iter().map(|c| c.to_description()).collect(),
            samples_per_chain: self.samples_per_chain,
            seed: self.seed,
            record_count: self.records.len(),
        }
    }

    /// Splits off the last `n` records (a held-out set).
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let tail = self.records.split_off(self.records.len().saturating_sub(n));
        let held = Dataset {
            robots: self.robots.clone(),
            samples_per_chain: self.samples_per_chain,
            seed: self.seed,
            records: tail,
        };
        (self, held)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for rec in &self.records {
            let body = encode_record(rec);
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(TrainError::Format("not a dataset file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TrainError::Format(format!("unsupported version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: DatasetHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| TrainError::Format(format!("header: {e}")))?;
        let robots = header
            .robots
            .into_iter()
            .map(|d| d.into_chain())
            .collect::<Result<Vec<_>, _>>()?;
        let mut records = Vec::with_capacity(header.record_count);
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            records.push(decode_record(r.take(len)?, &robots)?);
        }
        if records.len() != header.record_count {
            return Err(TrainError::Format(format!(
                "header declares {} records, file holds {}",
                header.record_count,
                records.len()
            )));
        }
        Ok(Self {
            robots,
            samples_per_chain: header.samples_per_chain,
            seed: header.seed,
            records,
        })
    }

    /// Writes the dataset and returns its SHA-256 hex digest.
    pub fn save(&self, path: &Path) -> Result<String, TrainError> {
        let bytes = self.to_bytes();
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        Ok(hash_bytes(&bytes))
    }

    /// Loads a dataset and returns it with its SHA-256 hex digest.
    pub fn load(path: &Path) -> Result<(Self, String), TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok((Self::from_bytes(&bytes)?, hash_bytes(&bytes)))
    }

    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
