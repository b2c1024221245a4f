use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{egnn_forward, GraphBatch, Weights};
use super::*;
use crate::distgeo::{complete_graph_from_config, IkProblem};
use crate::kinematics::robots;

fn small(arch: Architecture) -> ModelConfig {
    ModelConfig {
        arch,
        hidden: 8,
        latent: 4,
        components: 3,
        layers: 2,
        ..ModelConfig::default()
    }
}

fn problem(seed: u64) -> (IkProblem, DgGraph) {
    let chain = robots::load("toy6").unwrap();
    let q = chain.sample_configuration(seed);
    let complete = complete_graph_from_config(&chain, &q, true).unwrap();
    let goal = chain.end_effector_pose(&q).unwrap();
    (IkProblem::new(chain, goal).unwrap(), complete)
}

fn random_orthogonal(rng: &mut ChaCha8Rng, reflect: bool) -> (Matrix3<f64>, Vector3<f64>) {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let r = Rotation3::new(axis * rng.gen_range(0.0..3.0)).into_inner();
    let r = if reflect {
        r * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))
    } else {
        r
    };
    let t = Vector3::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
    );
    (r, t)
}

fn moved(g: &DgGraph, r: &Matrix3<f64>, t: &Vector3<f64>) -> DgGraph {
    let mut out = g.clone();
    for p in out.positions.iter_mut() {
        *p = r * *p + t;
    }
    out
}

fn random_latent(rng: &mut ChaCha8Rng, n: usize, l: usize) -> LatentGraph {
    LatentGraph {
        z: Tensor::matrix(n, l, (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap(),
    }
}

#[test]
fn decoder_is_equivariant() {
    let params = ModelParams::init(small(Architecture::Egnn), 1).unwrap();
    let (prob, _) = problem(2);
    let g = &prob.partial_graph;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random_latent(&mut rng, g.vertex_count(), 4);
    let base = decode(&params, g, &z).unwrap();
    for i in 0..20 {
        let (r, t) = random_orthogonal(&mut rng, i % 2 == 1);
        let out = decode(&params, &moved(g, &r, &t), &z).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((r * a + t - b).norm() < 1e-8);
        }
    }
}

#[test]
fn encoder_is_invariant() {
    let params = ModelParams::init(small(Architecture::Egnn), 4).unwrap();
    let (_, complete) = problem(5);
    let base = encode(&params, &complete).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let (r, t) = random_orthogonal(&mut rng, false);
        let out = encode(&params, &moved(&complete, &r, &t)).unwrap();
        for (a, b) in base.mean.data().iter().zip(out.mean.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in base.std.data().iter().zip(out.std.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }
    assert_eq!(base.mean.rows(), complete.vertex_count());
    assert!(base.std.data().iter().all(|s| *s > 0.0));
}

#[test]
fn plain_variant_is_not_equivariant() {
    let params = ModelParams::init(small(Architecture::Mpnn), 1).unwrap();
    let (prob, _) = problem(2);
    let g = &prob.partial_graph;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random_latent(&mut rng, g.vertex_count(), 4);
    let base = decode(&params, g, &z).unwrap();
    let (r, t) = random_orthogonal(&mut rng, false);
    let out = decode(&params, &moved(g, &r, &t), &z).unwrap();
    let err: f64 = base
        .iter()
        .zip(&out)
        .map(|(a, b)| (r * a + t - b).norm())
        .sum();
    assert!(err > 1e-3);
}

fn permuted(g: &DgGraph, perm: &[usize]) -> DgGraph {
    // vertex v of `g` becomes vertex perm[v]
    let n = g.vertex_count();
    let mut out = g.clone();
    for v in 0..n {
        out.roles[perm[v]] = g.roles[v];
        out.positions[perm[v]] = g.positions[v];
        out.known[perm[v]] = g.known[v];
    }
    out.edges = g
        .edges
        .iter()
        .map(|e| {
            let (u, v) = (perm[e.u], perm[e.v]);
            Edge {
                u: u.min(v),
                v: u.max(v),
                weight: e.weight,
            }
        })
        .collect();
    out
}

#[test]
fn relabeling_permutes_outputs() {
    let params = ModelParams::init(small(Architecture::Egnn), 7).unwrap();
    let (prob, _) = problem(8);
    let g = &prob.partial_graph;
    let n = g.vertex_count();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let z = random_latent(&mut rng, n, 4);
    let mut zp = z.clone();
    for v in 0..n {
        zp.z.data_mut()[perm[v] * 4..perm[v] * 4 + 4].copy_from_slice(z.z.row(v));
    }
    let gp = permuted(g, &perm);
    let base = decode(&params, g, &z).unwrap();
    let out = decode(&params, &gp, &zp).unwrap();
    for v in 0..n {
        assert!((base[v] - out[perm[v]]).norm() < 1e-10);
    }
    let pa = prior(&params, g).unwrap();
    let pb = prior(&params, &gp).unwrap();
    for v in 0..n {
        for (a, b) in pa.weights.row(v).iter().zip(pb.weights.row(perm[v])) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_layers_is_identity() {
    let cfg = small(Architecture::Egnn);
    let params = ModelParams::init(cfg, 1).unwrap();
    let (prob, _) = problem(2);
    let batch = GraphBatch::new(&[&prob.partial_graph], cfg.edges);
    let tape = Tape::new();
    let w = Weights::frozen(&tape, &params.params);
    let h0 = Tensor::matrix(batch.node_count, 8, vec![0.25; batch.node_count * 8]).unwrap();
    let h = tape.constant(h0.clone());
    let x = tape.constant(batch.positions.clone());
    let (ho, xo) = egnn_forward(&w, &cfg, "dec", 0, &batch, h, x).unwrap();
    assert_eq!(*tape.value(ho), h0);
    assert_eq!(*tape.value(xo), batch.positions);
}

#[test]
fn prior_weights_normalized_and_deterministic() {
    let params = ModelParams::init(small(Architecture::Egnn), 11).unwrap();
    let (prob, _) = problem(12);
    let a = prior(&params, &prob.partial_graph).unwrap();
    let b = prior(&params, &prob.partial_graph).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.node_count(), prob.partial_graph.vertex_count());
    for i in 0..a.node_count() {
        let s: f64 = a.weights.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(a.stds.data().iter().all(|s| *s > 0.0));
}

#[test]
fn single_component_sampling_moments() {
    let n = 2;
    let gmm = GmmNodeParams {
        components: 1,
        latent: 2,
        means: Tensor::matrix(n, 2, vec![1.0, -2.0, 0.5, 0.0]).unwrap(),
        stds: Tensor::matrix(n, 2, vec![0.5, 2.0, 1.0, 0.1]).unwrap(),
        weights: Tensor::matrix(n, 1, vec![1.0, 1.0]).unwrap(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = 20000;
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for _ in 0..m {
        let z = gmm.sample(&mut rng);
        for (j, v) in z.z.data().iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    for j in 0..4 {
        let mean = sum[j] / m as f64;
        let var = sq[j] / m as f64 - mean * mean;
        let (mu, sd) = (gmm.means.data()[j], gmm.stds.data()[j]);
        assert!((mean - mu).abs() < 4.0 * sd / (m as f64).sqrt());
        assert!((var.sqrt() - sd).abs() < 0.03 * sd);
    }
}

#[test]
fn mixture_sampling_follows_weights() {
    let gmm = GmmNodeParams {
        components: 2,
        latent: 1,
        means: Tensor::matrix(1, 2, vec![-10.0, 10.0]).unwrap(),
        stds: Tensor::matrix(1, 2, vec![0.1, 0.1]).unwrap(),
        weights: Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = 10000;
    let hits = (0..m)
        .filter(|_| gmm.sample(&mut rng).z.item() > 0.0)
        .count() as f64
        / m as f64;
    let se = (0.7f64 * 0.3 / m as f64).sqrt();
    assert!((hits - 0.7).abs() < 4.0 * se);
}

#[test]
fn sampling_counts_and_stream_independence() {
    let params = ModelParams::init(small(Architecture::Egnn), 13).unwrap();
    let (prob, _) = problem(14);
    assert!(sample_solutions(&params, &prob, 0, 1).unwrap().is_empty());
    let few = sample_solutions(&params, &prob, 5, 99).unwrap();
    let many = sample_solutions(&params, &prob, 40, 99).unwrap();
    assert_eq!(few.len(), 5);
    assert_eq!(many.len(), 40);
    for (a, b) in few.iter().zip(&many) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.status, b.status);
    }
    for s in &many {
        assert_eq!(s.config.len(), 6);
        assert!(s.graph.is_complete());
    }
}

#[test]
fn checkpoint_round_trip() {
    let params = ModelParams::init(small(Architecture::Mpnn), 15).unwrap();
    let ck = Checkpoint::new(
        params,
        TrainingMetadata {
            seed: 3,
            dataset_hash: "abc".into(),
            epochs: 2,
            final_loss: Some(1.5),
            robots: vec!["toy6".into()],
        },
    );
    let bytes = ck.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
}

#[test]
fn latent_shape_checked() {
    let params = ModelParams::init(small(Architecture::Egnn), 1).unwrap();
    let (prob, _) = problem(2);
    let z = LatentGraph {
        z: Tensor::zeros(&[3, 4]),
    };
    assert!(matches!(
        decode(&params, &prob.partial_graph, &z),
        Err(ModelError::LatentShape { .. })
    ));
}
