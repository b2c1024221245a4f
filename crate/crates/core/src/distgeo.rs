//! Distance-geometric graphs of serial manipulators.
//!
//! Every joint axis is represented by two points: one on the axis and one at
//! unit distance along it. The end-effector frame contributes a final pair on
//! the last joint's axis direction. Distances inside each neighbouring
//! quadruple of points depend only on link geometry, which gives the
//! structure graph. Two extra vertices `x` and `y` complete an orthonormal
//! base frame with the first joint's pair `o`, `z`.
//!
//! Vertex order is fixed: joint pairs base to tip (on-axis point first), the
//! end-effector pair, then `x`, `y`. All positions live in the graph frame,
//! whose origin is `o` with `z - o` along the first joint axis.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    wrap_angle, Configuration, KinematicChain, KinematicsError, RigidTransform,
};

pub const DEFAULT_DIVERGENCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DistGeoError {
    #[error("base frame already attached")]
    BaseFrameAttached,
    #[error("base frame must be attached before the goal")]
    BaseFrameMissing,
    #[error("expected {expected} points, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error(
        "configuration reconstruction diverged: max distance deviation {max_deviation:.4} m \
         (tolerance {tolerance} m)"
    )]
    Diverged {
        max_deviation: f64,
        tolerance: f64,
        /// Angles recovered while ignoring the tolerance, if the point set
        /// still determined them.
        best_effort: Option<Configuration>,
    },
    #[error("joint {joint} angle is not determined by the point set")]
    Underdetermined { joint: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VertexRole {
    Base,
    General,
    EndEffector,
}

impl VertexRole {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            VertexRole::Base => [1.0, 0.0, 0.0],
            VertexRole::General => [0.0, 1.0, 0.0],
            VertexRole::EndEffector => [0.0, 0.0, 1.0],
        }
    }

    pub fn index(self) -> u8 {
        match self {
            VertexRole::Base => 0,
            VertexRole::General => 1,
            VertexRole::EndEffector => 2,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(VertexRole::Base),
            1 => Some(VertexRole::General),
            2 => Some(VertexRole::EndEffector),
            _ => None,
        }
    }
}

/// Undirected weighted edge, `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Index arithmetic for a chain with `dof` joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VertexLayout {
    pub dof: usize,
}

impl VertexLayout {
    pub fn new(dof: usize) -> Self {
        Self { dof }
    }

    /// Vertices of the structure graph alone.
    pub fn structure_count(&self) -> usize {
        2 * (self.dof + 1)
    }

    /// Vertices once the base frame is attached.
    pub fn vertex_count(&self) -> usize {
        2 * self.dof + 4
    }

    /// On-axis vertex of pair `k` (`k == dof` is the end effector).
    pub fn axis_point(&self, k: usize) -> usize {
        2 * k
    }

    pub fn axis_offset(&self, k: usize) -> usize {
        2 * k + 1
    }

    pub fn origin(&self) -> usize {
        0
    }

    pub fn base_z(&self) -> usize {
        1
    }

    pub fn base_x(&self) -> usize {
        2 * self.dof + 2
    }

    pub fn base_y(&self) -> usize {
        2 * self.dof + 3
    }

    pub fn end_effector(&self) -> [usize; 2] {
        [2 * self.dof, 2 * self.dof + 1]
    }

    pub fn base(&self) -> [usize; 4] {
        [self.origin(), self.base_x(), self.base_y(), self.base_z()]
    }

    pub fn role(&self, v: usize) -> VertexRole {
        if v < 2 || v >= 2 * self.dof + 2 {
            VertexRole::Base
        } else if v >= 2 * self.dof {
            VertexRole::EndEffector
        } else {
            VertexRole::General
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgGraph {
    pub dof: usize,
    pub roles: Vec<VertexRole>,
    /// Unknown vertices hold the zero vector.
    pub positions: Vec<Vector3<f64>>,
    pub known: Vec<bool>,
    pub edges: Vec<Edge>,
    pub has_base_frame: bool,
    /// Goal pose in the chain's base frame, when the graph encodes one.
    pub goal: Option<RigidTransform>,
}

impl DgGraph {
    pub fn layout(&self) -> VertexLayout {
        VertexLayout::new(self.dof)
    }

    pub fn vertex_count(&self) -> usize {
        self.roles.len()
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|k| **k).count()
    }

    pub fn edge_weight(&self, u: usize, v: usize) -> Option<f64> {
        let (u, v) = if u < v { (u, v) } else { (v, u) };
        self.edges
            .iter()
            .find(|e| e.u == u && e.v == v)
            .map(|e| e.weight)
    }

    /// Largest `| |p_u - p_v| - d_uv |` over edges whose endpoints are both known.
    pub fn max_edge_violation(&self) -> f64 {
        self.edges
            .iter()
            .filter(|e| self.known[e.u] && self.known[e.v])
            .map(|e| ((self.positions[e.u] - self.positions[e.v]).norm() - e.weight).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_complete(&self) -> bool {
        let n = self.vertex_count();
        self.known.iter().all(|k| *k) && self.edges.len() == n * (n - 1) / 2
    }

    fn set_edges(&mut self, map: BTreeMap<(usize, usize), f64>) {
        self.edges = map
            .into_iter()
            .map(|((u, v), weight)| Edge { u, v, weight })
            .collect();
    }

    fn edge_map(&self) -> BTreeMap<(usize, usize), f64> {
        self.edges.iter().map(|e| ((e.u, e.v), e.weight)).collect()
    }
}

fn insert_edge(map: &mut BTreeMap<(usize, usize), f64>, u: usize, v: usize, w: f64) {
    debug_assert_ne!(u, v);
    let key = if u < v { (u, v) } else { (v, u) };
    map.entry(key).or_insert(w);
}

/// Frame in which graph positions are expressed: origin on the first joint,
/// z along its axis, x from the first joint's own x direction.
pub fn graph_frame(chain: &KinematicChain) -> RigidTransform {
    let first = &chain.joints[0];
    let z = first.origin.rotation * first.axis.into_inner();
    let mut seed = first.origin.rotation * Vector3::x();
    if seed.cross(&z).norm() < 1e-6 {
        seed = first.origin.rotation * Vector3::y();
    }
    let x = (seed - z * z.dot(&seed)).normalize();
    let y = z.cross(&x);
    RigidTransform::new(
        Matrix3::from_columns(&[x, y, z]),
        first.origin.translation,
    )
}

/// Unit direction of the last joint axis in the end-effector frame.
fn end_effector_axis(chain: &KinematicChain) -> Vector3<f64> {
    let last = chain.joints.last().expect("validated chain has joints");
    chain.end_effector.rotation.transpose() * last.axis.into_inner()
}

/// End-effector vertex pair for a tool pose given in the base frame.
fn end_effector_points(chain: &KinematicChain, pose: &RigidTransform) -> [Vector3<f64>; 2] {
    let dir = pose.rotation * end_effector_axis(chain);
    [pose.translation, pose.translation + dir]
}

/// The `2(n+1)` structure points of configuration `q`, in the base frame.
fn structure_points_world(
    chain: &KinematicChain,
    q: &Configuration,
) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    let frames = chain.forward_kinematics(q)?;
    let mut pts = Vec::with_capacity(2 * (chain.dof() + 1));
    for (joint, frame) in chain.joints.iter().zip(&frames) {
        let w = frame.rotation * joint.axis.into_inner();
        pts.push(frame.translation);
        pts.push(frame.translation + w);
    }
    let ee = end_effector_points(chain, &frames[chain.dof()]);
    pts.extend_from_slice(&ee);
    Ok(pts)
}

/// All `2n + 4` vertex positions of configuration `q`, in the graph frame.
pub fn config_points(
    chain: &KinematicChain,
    q: &Configuration,
) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    let to_graph = graph_frame(chain).inverse();
    let mut pts: Vec<_> = structure_points_world(chain, q)?
        .iter()
        .map(|p| to_graph.transform_point(p))
        .collect();
    pts.push(Vector3::x());
    pts.push(Vector3::y());
    Ok(pts)
}

fn structure_edges(chain: &KinematicChain) -> BTreeMap<(usize, usize), f64> {
    let n = chain.dof();
    let pts = structure_points_world(chain, &Configuration::zeros(n))
        .expect("zero configuration matches dof");
    let mut map = BTreeMap::new();
    for k in 0..n {
        let quad = [2 * k, 2 * k + 1, 2 * k + 2, 2 * k + 3];
        for a in 0..4 {
            for b in (a + 1)..4 {
                let (u, v) = (quad[a], quad[b]);
                insert_edge(&mut map, u, v, (pts[u] - pts[v]).norm());
            }
        }
    }
    map
}

fn base_edges(layout: VertexLayout) -> [(usize, usize, f64); 6] {
    let (o, x, y, z) = (
        layout.origin(),
        layout.base_x(),
        layout.base_y(),
        layout.base_z(),
    );
    let s = std::f64::consts::SQRT_2;
    [
        (o, x, 1.0),
        (o, y, 1.0),
        (o, z, 1.0),
        (x, y, s),
        (x, z, s),
        (y, z, s),
    ]
}

pub fn build_structure_graph(chain: &KinematicChain) -> DgGraph {
    let layout = VertexLayout::new(chain.dof());
    let count = layout.structure_count();
    let mut g = DgGraph {
        dof: chain.dof(),
        roles: (0..count).map(|v| layout.role(v)).collect(),
        positions: vec![Vector3::zeros(); count],
        known: vec![false; count],
        edges: Vec::new(),
        has_base_frame: false,
        goal: None,
    };
    g.set_edges(structure_edges(chain));
    g
}

pub fn attach_base_frame(mut g: DgGraph) -> Result<DgGraph, DistGeoError> {
    if g.has_base_frame {
        return Err(DistGeoError::BaseFrameAttached);
    }
    let layout = g.layout();
    g.roles.extend([VertexRole::Base, VertexRole::Base]);
    g.positions.extend([Vector3::x(), Vector3::y()]);
    g.known.extend([true, true]);
    g.positions[layout.origin()] = Vector3::zeros();
    g.positions[layout.base_z()] = Vector3::z();
    g.known[layout.origin()] = true;
    g.known[layout.base_z()] = true;
    let mut map = g.edge_map();
    for (u, v, w) in base_edges(layout) {
        insert_edge(&mut map, u, v, w);
    }
    g.set_edges(map);
    g.has_base_frame = true;
    Ok(g)
}

/// Fixes the end-effector pair from `goal` (a tool pose in the base frame)
/// and connects both of its vertices to all four base vertices.
pub fn attach_goal(
    chain: &KinematicChain,
    mut g: DgGraph,
    goal: &RigidTransform,
) -> Result<DgGraph, DistGeoError> {
    if !g.has_base_frame {
        return Err(DistGeoError::BaseFrameMissing);
    }
    let layout = g.layout();
    let to_graph = graph_frame(chain).inverse();
    let ee = end_effector_points(chain, goal).map(|p| to_graph.transform_point(&p));
    let mut map = g.edge_map();
    for (k, &v) in layout.end_effector().iter().enumerate() {
        g.positions[v] = ee[k];
        g.known[v] = true;
        for b in layout.base() {
            insert_edge(&mut map, v, b, (ee[k] - g.positions[b]).norm());
        }
    }
    g.set_edges(map);
    g.goal = Some(*goal);
    Ok(g)
}

pub fn assemble_partial_graph(
    chain: &KinematicChain,
    goal: &RigidTransform,
) -> Result<DgGraph, DistGeoError> {
    let g = attach_base_frame(build_structure_graph(chain))?;
    attach_goal(chain, g, goal)
}

/// Complete graph realized by configuration `q`. With `goal_from_fk` the
/// graph records `FK(q)` as its goal.
pub fn complete_graph_from_config(
    chain: &KinematicChain,
    q: &Configuration,
    goal_from_fk: bool,
) -> Result<DgGraph, DistGeoError> {
    let layout = VertexLayout::new(chain.dof());
    let positions = config_points(chain, q)?;
    let n = positions.len();
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            edges.push(Edge {
                u,
                v,
                weight: (positions[u] - positions[v]).norm(),
            });
        }
    }
    let goal = if goal_from_fk {
        Some(chain.end_effector_pose(q)?)
    } else {
        None
    };
    Ok(DgGraph {
        dof: chain.dof(),
        roles: (0..n).map(|v| layout.role(v)).collect(),
        positions,
        known: vec![true; n],
        edges,
        has_base_frame: true,
        goal,
    })
}

/// An IK problem instance: chain, goal, and the partial graph encoding both.
#[derive(Debug, Clone)]
pub struct IkProblem {
    pub chain: KinematicChain,
    pub goal: RigidTransform,
    pub partial_graph: DgGraph,
}

impl IkProblem {
    pub fn new(chain: KinematicChain, goal: RigidTransform) -> Result<Self, DistGeoError> {
        let partial_graph = assemble_partial_graph(&chain, &goal)?;
        Ok(Self {
            chain,
            goal,
            partial_graph,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionOptions {
    /// Largest tolerated deviation between an implied structure distance and
    /// its graph weight, in meters.
    pub tolerance: f64,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_DIVERGENCE_TOLERANCE,
        }
    }
}

/// Best orthogonal map (possibly improper) taking `src` onto `dst` in the
/// least-squares sense. Returns `(R, t)` with `dst ≈ R src + t`.
fn orthogonal_procrustes(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> (Matrix3<f64>, Vector3<f64>) {
    let k = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / k;
    let cd = dst.iter().sum::<Vector3<f64>>() / k;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let r = v_t.transpose() * u.transpose();
    (r, cd - r * cs)
}

/// Angle about unit axis `w` (through `p`) that best rotates the predicted
/// points onto the observed ones. `None` when the predicted points all lie
/// on the axis.
fn fit_axis_angle(
    p: &Vector3<f64>,
    w: &Vector3<f64>,
    predicted: &[Vector3<f64>; 2],
    observed: &[Vector3<f64>; 2],
) -> Option<f64> {
    let mut s = 0.0;
    let mut c = 0.0;
    let mut lever = 0.0;
    for (a, o) in predicted.iter().zip(observed) {
        let va = a - p;
        let vo = o - p;
        let va = va - w * w.dot(&va);
        let vo = vo - w * w.dot(&vo);
        lever += va.norm_squared();
        s += w.dot(&va.cross(&vo));
        c += va.dot(&vo);
    }
    (lever > 1e-16).then(|| s.atan2(c))
}

/// Angle about the local `axis` that best matches `rel ≈ Rot(axis, θ)`.
fn angle_from_rotation(rel: &Matrix3<f64>, axis: &Vector3<f64>) -> f64 {
    let skew = rel - rel.transpose();
    let vee = Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]) / 2.0;
    let sin = axis.dot(&vee);
    let cos = (rel.trace() - axis.dot(&(rel * axis))) / 2.0;
    sin.atan2(cos)
}

pub fn points_to_config(
    chain: &KinematicChain,
    points: &[Vector3<f64>],
    goal: Option<&RigidTransform>,
) -> Result<Configuration, DistGeoError> {
    points_to_config_with(chain, points, goal, &ReconstructionOptions::default())
}

/// Recovers joint angles from a point set indexed like the chain's graph.
///
/// The point set is first aligned to the canonical base frame with an
/// orthogonal Procrustes fit on `o, x, y, z` (reflecting it when an improper
/// map fits better). Each joint angle is then the rotation about that joint's
/// axis that best carries the next vertex pair onto its observed position.
/// When the end effector sits on the last axis, its angle comes from `goal`.
pub fn points_to_config_with(
    chain: &KinematicChain,
    points: &[Vector3<f64>],
    goal: Option<&RigidTransform>,
    opts: &ReconstructionOptions,
) -> Result<Configuration, DistGeoError> {
    let layout = VertexLayout::new(chain.dof());
    if points.len() != layout.vertex_count() {
        return Err(DistGeoError::VertexCount {
            expected: layout.vertex_count(),
            got: points.len(),
        });
    }
    let mut max_deviation: f64 = 0.0;
    for ((u, v), w) in structure_edges(chain) {
        max_deviation = max_deviation.max(((points[u] - points[v]).norm() - w).abs());
    }
    for (u, v, w) in base_edges(layout) {
        max_deviation = max_deviation.max(((points[u] - points[v]).norm() - w).abs());
    }
    if !max_deviation.is_finite() {
        return Err(DistGeoError::Diverged {
            max_deviation,
            tolerance: opts.tolerance,
            best_effort: None,
        });
    }

    let recovered = recover_angles(chain, points, goal);
    if max_deviation > opts.tolerance {
        return Err(DistGeoError::Diverged {
            max_deviation,
            tolerance: opts.tolerance,
            best_effort: recovered.ok(),
        });
    }
    recovered
}

fn recover_angles(
    chain: &KinematicChain,
    points: &[Vector3<f64>],
    goal: Option<&RigidTransform>,
) -> Result<Configuration, DistGeoError> {
    let layout = VertexLayout::new(chain.dof());
    let src: Vec<_> = layout.base().iter().map(|&i| points[i]).collect();
    let dst: [Vector3<f64>; 4] = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
    let (r, t) = orthogonal_procrustes(&src, &dst);
    let frame = graph_frame(chain);
    let world: Vec<Vector3<f64>> = points
        .iter()
        .map(|p| frame.transform_point(&(r * p + t)))
        .collect();

    let n = chain.dof();
    let mut angles = Vec::with_capacity(n);
    let mut parent = RigidTransform::identity();
    for i in 0..n {
        let joint = &chain.joints[i];
        let at = parent * joint.origin;
        let w = at.rotation * joint.axis.into_inner();
        let predicted = if i + 1 < n {
            let next = &chain.joints[i + 1];
            let f = at * next.origin;
            [f.translation, f.translation + f.rotation * next.axis.into_inner()]
        } else {
            let f = at * chain.end_effector;
            [f.translation, f.translation + w]
        };
        let observed = [
            world[layout.axis_point(i + 1)],
            world[layout.axis_offset(i + 1)],
        ];
        let angle = match fit_axis_angle(&at.translation, &w, &predicted, &observed) {
            Some(a) => a,
            None if i + 1 == n => {
                let goal = goal.ok_or(DistGeoError::Underdetermined { joint: i })?;
                let rel = at.rotation.transpose()
                    * goal.rotation
                    * chain.end_effector.rotation.transpose();
                angle_from_rotation(&rel, &joint.axis.into_inner())
            }
            None => {
                return Err(DistGeoError::Diverged {
                    max_deviation: 0.0,
                    tolerance: 0.0,
                    best_effort: None,
                })
            }
        };
        let angle = wrap_angle(angle);
        angles.push(angle);
        parent = at * RigidTransform::rotation_about(&joint.axis, angle);
    }
    Ok(Configuration(angles))
}

/// Reconstruction using the graph's own positions and goal.
pub fn graph_to_config(
    chain: &KinematicChain,
    g: &DgGraph,
    opts: &ReconstructionOptions,
) -> Result<Configuration, DistGeoError> {
    points_to_config_with(chain, &g.positions, g.goal.as_ref(), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::robots;
    use std::f64::consts::SQRT_2;

    #[test]
    fn structure_vertex_count_and_unit_pairs() {
        for name in robots::names() {
            let chain = robots::load(name).unwrap();
            let g = build_structure_graph(&chain);
            assert_eq!(g.vertex_count(), 2 * (chain.dof() + 1));
            for k in 0..=chain.dof() {
                let w = g.edge_weight(2 * k, 2 * k + 1).unwrap();
                assert!((w - 1.0).abs() < 1e-12, "{name} pair {k}: {w}");
            }
            assert!(g.edges.iter().all(|e| e.u < e.v && e.weight >= 0.0));
        }
    }

    #[test]
    fn structure_weights_do_not_depend_on_configuration() {
        let chain = robots::load("kuka").unwrap();
        let s = build_structure_graph(&chain);
        for seed in 0..20 {
            let q = chain.sample_configuration(seed);
            let c = complete_graph_from_config(&chain, &q, true).unwrap();
            for e in &s.edges {
                assert!((c.edge_weight(e.u, e.v).unwrap() - e.weight).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn base_frame_geometry() {
        let chain = robots::load("ur10").unwrap();
        let g = attach_base_frame(build_structure_graph(&chain)).unwrap();
        let l = g.layout();
        let base = l.base();
        assert!(base.iter().all(|&v| g.roles[v] == VertexRole::Base));
        assert_eq!(
            g.roles.iter().filter(|r| **r == VertexRole::Base).count(),
            4
        );
        let mut d: Vec<f64> = Vec::new();
        for a in 0..4 {
            for b in (a + 1)..4 {
                d.push(g.edge_weight(base[a], base[b]).unwrap());
            }
        }
        d.sort_by(f64::total_cmp);
        let expected = [1.0, 1.0, 1.0, SQRT_2, SQRT_2, SQRT_2];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            attach_base_frame(g),
            Err(DistGeoError::BaseFrameAttached)
        ));
    }

    #[test]
    fn goal_requires_base_frame() {
        let chain = robots::load("planar2").unwrap();
        let g = build_structure_graph(&chain);
        assert!(matches!(
            attach_goal(&chain, g, &RigidTransform::identity()),
            Err(DistGeoError::BaseFrameMissing)
        ));
    }

    #[test]
    fn goal_at_base_mirrors_base_distances() {
        // Tool frame coincides with the base frame and the end-effector axis
        // is the base z axis, so the end-effector pair lands on `o` and `z`.
        let chain = robots::load("toy6").unwrap();
        let mut tilted = RigidTransform::identity();
        tilted.rotation = chain.end_effector.rotation;
        let g = assemble_partial_graph(&chain, &tilted).unwrap();
        let l = g.layout();
        let [e0, e1] = l.end_effector();
        for b in l.base() {
            let w0 = g.edge_weight(e0, b).unwrap();
            let w1 = g.edge_weight(e1, b).unwrap();
            assert!((w0 - g.positions[b].norm()).abs() < 1e-12);
            assert!((w1 - (g.positions[b] - Vector3::z()).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn translated_goal_distance_to_origin() {
        let chain = robots::load("ur10").unwrap();
        let t = Vector3::new(0.3, -0.4, 0.5);
        let goal = RigidTransform::from_translation(t);
        let g = assemble_partial_graph(&chain, &goal).unwrap();
        let [e0, _] = g.layout().end_effector();
        assert!((g.edge_weight(0, e0).unwrap() - t.norm()).abs() < 1e-12);
    }

    #[test]
    fn partial_graph_accounting() {
        let chain = robots::load("toy6").unwrap();
        let q = chain.sample_configuration(5);
        let goal = chain.end_effector_pose(&q).unwrap();
        let g = assemble_partial_graph(&chain, &goal).unwrap();
        assert_eq!(g.vertex_count(), 16);
        assert_eq!(g.known_count(), 6);
        for v in 0..16 {
            if !g.known[v] {
                assert_eq!(g.positions[v], Vector3::zeros());
            }
        }
        let count = |r| g.roles.iter().filter(|x| **x == r).count();
        assert_eq!(count(VertexRole::Base), 4);
        assert_eq!(count(VertexRole::EndEffector), 2);
        assert_eq!(count(VertexRole::General), 10);
        // 8 goal edges, all realized by the known points.
        let l = g.layout();
        for e in l.end_effector() {
            for b in l.base() {
                let w = g.edge_weight(e, b).unwrap();
                assert!((w - (g.positions[e] - g.positions[b]).norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_is_subgraph_of_complete() {
        let chain = robots::load("panda").unwrap();
        let q = chain.sample_configuration(11);
        let c = complete_graph_from_config(&chain, &q, true).unwrap();
        assert!(c.is_complete());
        assert!(c.max_edge_violation() < 1e-9);
        let p = assemble_partial_graph(&chain, c.goal.as_ref().unwrap()).unwrap();
        for e in &p.edges {
            let w = c.edge_weight(e.u, e.v).unwrap();
            assert!((w - e.weight).abs() < 1e-9, "edge {:?}", e);
        }
        for v in 0..p.vertex_count() {
            if p.known[v] {
                assert!((p.positions[v] - c.positions[v]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn round_trip_bundled() {
        for name in robots::names() {
            let chain = robots::load(name).unwrap();
            for seed in 0..25 {
                let q = chain.sample_configuration(seed);
                let g = complete_graph_from_config(&chain, &q, true).unwrap();
                let back = graph_to_config(&chain, &g, &Default::default()).unwrap();
                let a = chain.end_effector_pose(&q).unwrap();
                let b = chain.end_effector_pose(&back).unwrap();
                let (dp, dr) = crate::kinematics::pose_error(&a, &b);
                assert!(dp < 1e-9 && dr < 1e-6, "{name} seed {seed}: {dp} {dr}");
                assert!(q.max_wrapped_diff(&back) < 1e-6, "{name} seed {seed}");
            }
        }
    }

    #[test]
    fn noisy_vertex_diverges() {
        let chain = robots::load("kuka").unwrap();
        let q = chain.sample_configuration(3);
        let mut g = complete_graph_from_config(&chain, &q, true).unwrap();
        g.positions[6] += Vector3::new(0.5, 0.0, 0.0);
        let err = graph_to_config(&chain, &g, &Default::default()).unwrap_err();
        match err {
            DistGeoError::Diverged { max_deviation, .. } => assert!(max_deviation > 0.05),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_vertex_count() {
        let chain = robots::load("planar2").unwrap();
        let err = points_to_config(&chain, &[Vector3::zeros(); 3], None).unwrap_err();
        assert!(matches!(err, DistGeoError::VertexCount { expected: 8, got: 3 }));
    }

    #[test]
    fn on_axis_tool_needs_goal() {
        let chain = robots::load("ur10").unwrap();
        let q = chain.sample_configuration(1);
        let g = complete_graph_from_config(&chain, &q, false).unwrap();
        assert!(matches!(
            points_to_config(&chain, &g.positions, None),
            Err(DistGeoError::Underdetermined { joint: 5 })
        ));
    }

    #[test]
    fn procrustes_recovers_reflection() {
        let src: [Vector3<f64>; 4] = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        let mirrored: Vec<_> = src.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
        let (r, t) = orthogonal_procrustes(&mirrored, &src);
        assert!(r.determinant() < 0.0);
        for (m, s) in mirrored.iter().zip(&src) {
            assert!((r * m + t - s).norm() < 1e-12);
        }
    }
}
