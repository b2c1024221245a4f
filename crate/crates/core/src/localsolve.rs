//! Local refinement of joint angles towards a goal pose by damped
//! Gauss-Newton (Levenberg-Marquardt) on the stacked position and
//! rotation-log residual.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kinematics::{
    pose_error, rotation_log, Configuration, KinematicChain, KinematicsError, RigidTransform,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub max_iterations: usize,
    /// Position tolerance in meters.
    pub pos_tol: f64,
    /// Rotation tolerance in radians.
    pub rot_tol: f64,
    pub initial_damping: f64,
    /// Weight of the rotation residual relative to position (m/rad).
    pub rotation_weight: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            pos_tol: 1e-6,
            rot_tol: 1e-6,
            initial_damping: 1e-3,
            rotation_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub q_final: Configuration,
    pub iterations: usize,
    pub converged: bool,
    /// Final position error in meters.
    pub pos_error: f64,
    /// Final rotation error in degrees.
    pub rot_error_deg: f64,
    pub wall_ms: f64,
    /// Objective `½|r|²` after the initial evaluation and every accepted step.
    pub objective: Vec<f64>,
}

/// Inverse of the left Jacobian of SO(3) at rotation vector `phi`.
fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = phi.cross_matrix();
    if theta < 1e-8 {
        return Matrix3::identity() - 0.5 * k + k * k / 12.0;
    }
    let c = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - 0.5 * k + c * k * k
}

struct Residual {
    r: DVector<f64>,
    pos: f64,
    rot: f64,
    phi: Vector3<f64>,
}

fn residual(
    chain: &KinematicChain,
    goal: &RigidTransform,
    q: &Configuration,
    w: f64,
) -> Result<Residual, KinematicsError> {
    let pose = chain.end_effector_pose(q)?;
    let dp = pose.translation - goal.translation;
    let phi = rotation_log(&(pose.rotation * goal.rotation.transpose()));
    let mut r = DVector::zeros(6);
    r.fixed_rows_mut::<3>(0).copy_from(&dp);
    r.fixed_rows_mut::<3>(3).copy_from(&(phi * w));
    Ok(Residual {
        r,
        pos: dp.norm(),
        rot: phi.norm(),
        phi,
    })
}

/// Jacobian of the stacked residual with respect to the joint angles.
pub fn residual_jacobian(
    chain: &KinematicChain,
    goal: &RigidTransform,
    q: &Configuration,
    rotation_weight: f64,
) -> Result<DMatrix<f64>, KinematicsError> {
    let res = residual(chain, goal, q, rotation_weight)?;
    let geo = chain.jacobian(q)?;
    let jinv = left_jacobian_inv(&res.phi) * rotation_weight;
    let n = q.len();
    let mut j = DMatrix::zeros(6, n);
    j.view_mut((0, 0), (3, n)).copy_from(&geo.view((0, 0), (3, n)));
    let rot = jinv * geo.view((3, 0), (3, n));
    j.view_mut((3, 0), (3, n)).copy_from(&rot);
    Ok(j)
}

/// Stacked residual `[p - p_goal; w · log(R R_goalᵀ)]`.
pub fn pose_residual(
    chain: &KinematicChain,
    goal: &RigidTransform,
    q: &Configuration,
    rotation_weight: f64,
) -> Result<DVector<f64>, KinematicsError> {
    Ok(residual(chain, goal, q, rotation_weight)?.r)
}

pub fn refine(
    chain: &KinematicChain,
    goal: &RigidTransform,
    q_init: &Configuration,
    opts: &RefineOptions,
) -> Result<RefineResult, KinematicsError> {
    let start = Instant::now();
    chain.check_dim(q_init)?;
    let w = opts.rotation_weight;
    let mut q = q_init.clone();
    chain.project_to_limits(&mut q);
    let mut res = residual(chain, goal, &q, w)?;
    let mut f = 0.5 * res.r.norm_squared();
    let mut objective = vec![f];
    let mut lambda = opts.initial_damping;
    let done = |r: &Residual| r.pos <= opts.pos_tol && r.rot <= opts.rot_tol;
    let mut converged = done(&res);
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let j = residual_jacobian(chain, goal, &q, w)?;
        let jt = j.transpose();
        let g = &jt * &res.r;
        let mut a = &jt * &j;
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let Some(step) = a.cholesky().map(|c| c.solve(&(-g))) else {
            lambda *= 10.0;
            continue;
        };
        let mut trial = Configuration(q.0.iter().zip(step.iter()).map(|(a, b)| a + b).collect());
        chain.project_to_limits(&mut trial);
        let trial_res = residual(chain, goal, &trial, w)?;
        let trial_f = 0.5 * trial_res.r.norm_squared();
        if trial_f < f {
            q = trial;
            res = trial_res;
            f = trial_f;
            objective.push(f);
            lambda = (lambda / 10.0).max(1e-12);
            converged = done(&res);
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }

    let (pos_error, rot_error_deg) = pose_error(&chain.end_effector_pose(&q)?, goal);
    Ok(RefineResult {
        q_final: q,
        iterations,
        converged,
        pos_error,
        rot_error_deg,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        objective,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStartResult {
    /// Index of the best result in `results`.
    pub best: usize,
    pub results: Vec<RefineResult>,
}

impl MultiStartResult {
    pub fn best(&self) -> &RefineResult {
        &self.results[self.best]
    }
}

/// Refines every initial configuration and picks the lowest position
/// error, then rotation error, breaking ties by index.
pub fn solve_multistart(
    chain: &KinematicChain,
    goal: &RigidTransform,
    inits: &[Configuration],
    opts: &RefineOptions,
) -> Result<MultiStartResult, KinematicsError> {
    if inits.is_empty() {
        return Err(KinematicsError::InvalidChain(
            "multistart needs at least one initial configuration".into(),
        ));
    }
    let results: Vec<RefineResult> = inits
        .par_iter()
        .map(|q| refine(chain, goal, q, opts))
        .collect::<Result<_, _>>()?;
    let mut best = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        let b = &results[best];
        if (r.pos_error, r.rot_error_deg) < (b.pos_error, b.rot_error_deg) {
            best = i;
        }
    }
    Ok(MultiStartResult { best, results })
}

/// `k` independent uniform configurations.
pub fn random_inits(chain: &KinematicChain, k: usize, seed: u64) -> Vec<Configuration> {
    (0..k)
        .map(|i| chain.sample_configuration_with(&mut crate::model::sample_rng(seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::robots;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_init_converges_immediately() {
        let chain = robots::load("toy6").unwrap();
        let q = chain.sample_configuration(1);
        let goal = chain.end_effector_pose(&q).unwrap();
        let r = refine(&chain, &goal, &q, &RefineOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert!(r.pos_error < 1e-12 && r.rot_error_deg < 1e-9);
    }

    #[test]
    fn residual_jacobian_matches_finite_differences() {
        let chain = robots::load("kuka").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in 0..100 {
            let q = chain.sample_configuration(s);
            let goal = chain
                .end_effector_pose(&chain.sample_configuration(1000 + s))
                .unwrap();
            let w = rng.gen_range(0.5..2.0);
            let j = residual_jacobian(&chain, &goal, &q, w).unwrap();
            let h = 1e-6;
            for c in 0..chain.dof() {
                let mut qp = q.clone();
                qp.0[c] += h;
                let mut qm = q.clone();
                qm.0[c] -= h;
                let rp = pose_residual(&chain, &goal, &qp, w).unwrap();
                let rm = pose_residual(&chain, &goal, &qm, w).unwrap();
                let fd = (rp - rm) / (2.0 * h);
                let col = j.column(c);
                let err = (&fd - col).norm() / col.norm().max(1e-3);
                assert!(err < 1e-6, "sample {s} joint {c}: {err}");
            }
        }
    }

    #[test]
    fn objective_never_increases_and_is_deterministic() {
        let chain = robots::load("toy6").unwrap();
        let goal = chain
            .end_effector_pose(&chain.sample_configuration(3))
            .unwrap();
        let init = chain.sample_configuration(4);
        let a = refine(&chain, &goal, &init, &RefineOptions::default()).unwrap();
        for w in a.objective.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let b = refine(&chain, &goal, &init, &RefineOptions::default()).unwrap();
        assert_eq!(a.q_final, b.q_final);
        assert_eq!(a.iterations, b.iterations);
        assert!(a.iterations <= 100);
    }

    #[test]
    fn multistart_picks_best_and_is_stable() {
        let chain = robots::load("toy6").unwrap();
        let q = chain.sample_configuration(5);
        let goal = chain.end_effector_pose(&q).unwrap();
        let opts = RefineOptions::default();
        let single = solve_multistart(&chain, &goal, &[q.clone()], &opts).unwrap();
        assert_eq!(single.best, 0);
        assert_eq!(single.best().iterations, 0);
        let inits = random_inits(&chain, 6, 9);
        let once = solve_multistart(&chain, &goal, &inits, &opts).unwrap();
        let mut twice_inits = inits.clone();
        twice_inits.extend(inits.iter().cloned());
        let twice = solve_multistart(&chain, &goal, &twice_inits, &opts).unwrap();
        assert_eq!(once.best, twice.best);
        assert_eq!(once.best().q_final, twice.best().q_final);
        assert_eq!(once.best().objective, twice.best().objective);
        for r in &once.results {
            assert!(once.best().pos_error <= r.pos_error);
        }
        assert!(solve_multistart(&chain, &goal, &[], &opts).is_err());
    }

    #[test]
    fn wrong_dimension_rejected() {
        let chain = robots::load("toy6").unwrap();
        let goal = RigidTransform::identity();
        assert!(refine(&chain, &goal, &Configuration::zeros(3), &RefineOptions::default()).is_err());
    }
}
