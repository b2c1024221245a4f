use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::kinematics::{pose_error, Configuration, KinematicChain, RigidTransform};
use crate::model::sample_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RejectionOptions {
    /// Position tolerance in meters.
    pub pos_tol: f64,
    /// Rotation tolerance in degrees.
    pub rot_tol_deg: f64,
    /// Maximum number of uniform draws.
    pub budget: usize,
    /// Stop once this many samples were accepted.
    pub max_accept: usize,
}

impl Default for RejectionOptions {
    fn default() -> Self {
        Self {
            pos_tol: 0.08,
            rot_tol_deg: 8.0,
            budget: 1_000_000,
            max_accept: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionResult {
    pub samples: Vec<Configuration>,
    pub drawn: usize,
    pub acceptance_rate: f64,
    /// Set when nothing was accepted within the budget.
    pub diagnostic: Option<String>,
}

const BLOCK: usize = 4096;

/// Uniform configuration draws kept when their end-effector pose lies within
/// the tolerances of `goal`. Draw `i` uses its own stream, so the result does
/// not depend on the worker count.
pub fn rejection_sample_reference(
    chain: &KinematicChain,
    goal: &RigidTransform,
    opts: &RejectionOptions,
    seed: u64,
) -> Result<RejectionResult, EvalError> {
    if opts.budget == 0 {
        return Err(EvalError::Config("rejection budget must be positive".into()));
    }
    let mut samples = Vec::new();
    let mut drawn = 0;
    let mut accepted_total = 0;
    while drawn < opts.budget && samples.len() < opts.max_accept {
        let end = (drawn + BLOCK).min(opts.budget);
        let block: Vec<Option<Configuration>> = (drawn..end)
            .into_par_iter()
            .map(|i| {
                let q = chain.sample_configuration_with(&mut sample_rng(seed, i as u64));
                let pose = chain.end_effector_pose(&q).ok()?;
                let (p, r) = pose_error(&pose, goal);
                (p <= opts.pos_tol && r <= opts.rot_tol_deg).then_some(q)
            })
            .collect();
        for (offset, q) in block.into_iter().enumerate() {
            let Some(q) = q else { continue };
            accepted_total += 1;
            if samples.len() < opts.max_accept {
                samples.push(q);
                if samples.len() == opts.max_accept {
                    drawn += offset + 1;
                    return Ok(finish(samples, drawn, accepted_total));
                }
            }
        }
        drawn = end;
    }
    Ok(finish(samples, drawn, accepted_total))
}

fn finish(samples: Vec<Configuration>, drawn: usize, accepted: usize) -> RejectionResult {
    let diagnostic = samples
        .is_empty()
        .then(|| format!("no configuration within tolerance after {drawn} draws"));
    RejectionResult {
        acceptance_rate: accepted as f64 / drawn.max(1) as f64,
        samples,
        drawn,
        diagnostic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::robots;

    #[test]
    fn infinite_tolerance_accepts_everything() {
        let chain = robots::load("toy4").unwrap();
        let opts = RejectionOptions {
            pos_tol: f64::INFINITY,
            rot_tol_deg: f64::INFINITY,
            budget: 500,
            max_accept: usize::MAX,
        };
        let r = rejection_sample_reference(&chain, &RigidTransform::identity(), &opts, 1).unwrap();
        assert_eq!(r.acceptance_rate, 1.0);
        assert_eq!(r.samples.len(), 500);
        assert!(r.diagnostic.is_none());
    }

    #[test]
    fn accepted_planar_samples_respect_tolerance() {
        let chain = robots::load("planar2").unwrap();
        let goal = chain
            .end_effector_pose(&chain.sample_configuration(7))
            .unwrap();
        let opts = RejectionOptions {
            pos_tol: 0.005,
            rot_tol_deg: f64::INFINITY,
            budget: 200_000,
            max_accept: 100,
        };
        let r = rejection_sample_reference(&chain, &goal, &opts, 2).unwrap();
        assert!(!r.samples.is_empty());
        for q in &r.samples {
            let (p, _) = pose_error(&chain.end_effector_pose(q).unwrap(), &goal);
            assert!(p <= 0.005);
        }
    }

    #[test]
    fn acceptance_decreases_with_tolerance() {
        let chain = robots::load("planar2").unwrap();
        let goal = chain
            .end_effector_pose(&chain.sample_configuration(8))
            .unwrap();
        let n = 100_000;
        let rates: Vec<f64> = [0.2, 0.1, 0.05, 0.02]
            .iter()
            .map(|&tol| {
                let opts = RejectionOptions {
                    pos_tol: tol,
                    rot_tol_deg: f64::INFINITY,
                    budget: n,
                    max_accept: usize::MAX,
                };
                rejection_sample_reference(&chain, &goal, &opts, 3)
                    .unwrap()
                    .acceptance_rate
            })
            .collect();
        for w in rates.windows(2) {
            // Binomial standard error of the difference, three sigma.
            let se = ((w[0] * (1.0 - w[0]) + w[1] * (1.0 - w[1])) / n as f64).sqrt();
            assert!(w[1] < w[0] + 3.0 * se, "{rates:?}");
            assert!(w[0] - w[1] > 3.0 * se, "{rates:?}");
        }
    }

    #[test]
    fn empty_result_has_diagnostic() {
        let chain = robots::load("toy6").unwrap();
        let far = RigidTransform::from_translation(nalgebra::Vector3::new(50.0, 0.0, 0.0));
        let opts = RejectionOptions {
            budget: 100,
            ..RejectionOptions::default()
        };
        let r = rejection_sample_reference(&chain, &far, &opts, 1).unwrap();
        assert!(r.samples.is_empty());
        assert!(r.diagnostic.is_some());
        let zero = RejectionOptions { budget: 0, ..opts };
        assert!(rejection_sample_reference(&chain, &far, &zero, 1).is_err());
    }
}
