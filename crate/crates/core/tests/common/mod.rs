//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fdrhs::genlasso::GenLassoProblem;
use fdrhs::voxelgrid::{DiffOperator, LatticeGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Oracle solution of a generalized lasso problem.
pub struct OracleSolution {
    pub beta: Vec<f64>,
    pub primal: f64,
    pub gap: f64,
}

fn primal_value(p: &GenLassoProblem, beta: &[f64]) -> f64 {
    let fit: f64 = p
        .y_tilde
        .iter()
        .zip(&p.x_diag)
        .zip(beta)
        .map(|((y, x), b)| 0.5 * (y - x * b).powi(2))
        .sum();
    let d = p.op.apply(beta);
    fit + p.lambda * d.iter().map(|v| v.abs()).sum::<f64>()
}

/// Accelerated projected gradient on the box-constrained dual
/// `max_{|u| <= lambda} -1/2 (b - D'u)' W^-1 (b - D'u)`, with `W = X'X` and
/// `b = X'y`. Stops once the primal-dual gap is below `gap_tol` and returns
/// the primal point `W^-1 (b - D'u)`.
pub fn dual_fista(p: &GenLassoProblem, gap_tol: f64, max_iter: usize) -> OracleSolution {
    let n = p.dim();
    let m = p.op.n_rows();
    let w: Vec<f64> = p.x_diag.iter().map(|x| x * x).collect();
    let b: Vec<f64> = p.x_diag.iter().zip(&p.y_tilde).map(|(x, y)| x * y).collect();
    let y_sq: f64 = p.y_tilde.iter().map(|y| y * y).sum();
    let primal_of = |u: &[f64]| -> Vec<f64> {
        let dtu = p.op.apply_transpose(u);
        (0..n).map(|i| (b[i] - dtu[i]) / w[i]).collect()
    };
    let dual_of = |u: &[f64]| -> f64 {
        let dtu = p.op.apply_transpose(u);
        let q: f64 = (0..n).map(|i| (b[i] - dtu[i]).powi(2) / w[i]).sum();
        0.5 * y_sq - 0.5 * q
    };
    if m == 0 || p.lambda == 0.0 {
        let beta: Vec<f64> = (0..n).map(|i| b[i] / w[i]).collect();
        let primal = primal_value(p, &beta);
        return OracleSolution { beta, primal, gap: 0.0 };
    }
    // Lipschitz constant of the dual gradient by power iteration, padded.
    let mut v = vec![1.0; m];
    let mut lip = 0.0;
    for _ in 0..200 {
        let dtv = p.op.apply_transpose(&v);
        let scaled: Vec<f64> = (0..n).map(|i| dtv[i] / w[i]).collect();
        let next = p.op.apply(&scaled);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lip = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next.iter().map(|x| x / norm).collect();
    }
    let step = 1.0 / (1.05 * lip.max(1e-12));
    let lambda = p.lambda;
    let project = |x: f64| x.clamp(-lambda, lambda);
    let mut u = vec![0.0; m];
    let mut z = u.clone();
    let mut t = 1.0f64;
    let mut best = OracleSolution {
        beta: primal_of(&u),
        primal: f64::INFINITY,
        gap: f64::INFINITY,
    };
    for it in 0..max_iter {
        // Gradient of the negated dual at z is -D W^-1 (b - D'z).
        let beta_z = primal_of(&z);
        let g = p.op.apply(&beta_z);
        let u_next: Vec<f64> = (0..m).map(|r| project(z[r] + step * g[r])).collect();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        for r in 0..m {
            z[r] = u_next[r] + (t - 1.0) / t_next * (u_next[r] - u[r]);
        }
        u = u_next;
        t = t_next;
        if it % 50 == 0 || it + 1 == max_iter {
            let beta = primal_of(&u);
            let primal = primal_value(p, &beta);
            let gap = primal - dual_of(&u);
            if primal < best.primal {
                best = OracleSolution { beta, primal, gap };
            }
            if gap <= gap_tol {
                return best;
            }
        }
    }
    best
}

/// Random connected graph with `n` vertices and at most `max_edges` edges:
/// a random spanning tree plus extra random pairs.
pub fn random_graph(n: usize, max_edges: usize, rng: &mut ChaCha8Rng) -> LatticeGraph {
    let mut edges = std::collections::BTreeSet::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.insert((u, v));
    }
    let target = rng.random_range(edges.len()..=max_edges.max(edges.len()));
    let mut guard = 0;
    while edges.len() < target && guard < 10_000 {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
        guard += 1;
    }
    LatticeGraph::from_edges(n, edges, Default::default()).expect("valid edges")
}

/// Seeded instance with `p <= 30` and `|E| <= 60`.
pub fn random_instance(seed: u64) -> GenLassoProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(5..=30);
    let g = random_graph(n, 60, &mut rng);
    let rows = g.edges().to_vec();
    let weights: Vec<f64> = rows.iter().map(|_| rng.random_range(0.5..2.0)).collect();
    let op = DiffOperator::new(n, rows, weights).expect("operator");
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05f64..1.0).sqrt()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lambda = rng.random_range(0.01..1.5);
    GenLassoProblem::new(y, x, op, lambda).expect("problem")
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Step-up rejections straight from the definition: `i` is rejected when
/// some `p_j >= p_i` satisfies `p_j <= q #{l : p_l <= p_j} / m`.
pub fn bh_oracle(p: &[f64], q: f64) -> Vec<usize> {
    let m = p.len() as f64;
    let qualifies: Vec<bool> = p
        .iter()
        .map(|&pj| {
            let rank = p.iter().filter(|&&pl| pl <= pj).count() as f64;
            pj <= q * rank / m
        })
        .collect();
    (0..p.len())
        .filter(|&i| (0..p.len()).any(|j| qualifies[j] && p[j] >= p[i]))
        .collect()
}
