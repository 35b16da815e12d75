//! Heterogeneously smoothed two-groups fit: objectives, the EM loop with a
//! generalized-lasso M-step, posteriors and feature selection.

use crate::error::{Error, Result};
use crate::genlasso::{AdmmConfig, AdmmSolver, GenLassoProblem, WarmStart};
use crate::stats::TwoGroupsModel;
use crate::voxelgrid::{stacked_operator, DiffOperator, SubgraphSplit};

/// Hyper-parameters and numerics of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct HsParams {
    /// Penalty on edges inside `z <= 0`.
    pub lambda_pro: f64,
    /// Penalty on edges inside `z > 0`.
    pub lambda_les: f64,
    /// Penalty on edges bridging the two sides.
    pub lambda_proles: f64,
    /// Selection threshold on the posterior null probability.
    pub gamma: f64,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub beta_clamp: f64,
    pub w_floor: f64,
    pub max_halvings: usize,
    /// Skip EM and keep the prior at `logit(cbar)` everywhere.
    pub constant_prior: bool,
    pub admm: AdmmConfig,
}

impl Default for HsParams {
    fn default() -> Self {
        Self {
            lambda_pro: 1.0,
            lambda_les: 0.5,
            lambda_proles: 2.0,
            gamma: 0.2,
            em_max_iter: 200,
            em_tol: 1e-6,
            beta_clamp: 15.0,
            w_floor: 1e-4,
            max_halvings: 20,
            constant_prior: false,
            admm: AdmmConfig::default(),
        }
    }
}

impl HsParams {
    pub fn new(lambda_pro: f64, lambda_les: f64, lambda_proles: f64) -> Self {
        Self {
            lambda_pro,
            lambda_les,
            lambda_proles,
            ..Self::default()
        }
    }

    pub fn penalty_active(&self) -> bool {
        self.lambda_pro > 0.0 || self.lambda_les > 0.0 || self.lambda_proles > 0.0
    }

    /// `lambda_les <= lambda_pro <= lambda_proles`.
    pub fn ordering_respected(&self) -> bool {
        self.lambda_les <= self.lambda_pro && self.lambda_pro <= self.lambda_proles
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_pro", self.lambda_pro),
            ("lambda_les", self.lambda_les),
            ("lambda_proles", self.lambda_proles),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.penalty_active() && !(self.lambda_pro > 0.0) {
            return Err(Error::UndefinedWeightRatio);
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.em_tol >= 0.0) || !(self.beta_clamp > 0.0) || !(self.w_floor > 0.0) {
            return Err(Error::InvalidParameter(
                "em_tol must be >= 0, beta_clamp and w_floor > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Null and non-null densities evaluated at each voxel's z.
#[derive(Debug, Clone, PartialEq)]
pub struct Likelihoods {
    pub f1: Vec<f64>,
    pub f0: Vec<f64>,
}

impl Likelihoods {
    pub fn new(z: &[f64], model: &TwoGroupsModel) -> Self {
        Self {
            f1: z.iter().map(|&v| model.f1(v)).collect(),
            f0: z.iter().map(|&v| model.f0(v)).collect(),
        }
    }

    pub fn from_values(f1: Vec<f64>, f0: Vec<f64>) -> Result<Self> {
        if f1.len() != f0.len() {
            return Err(Error::Dimension {
                context: "likelihood vectors",
                expected: f1.len(),
                actual: f0.len(),
            });
        }
        if f1.iter().chain(&f0).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("densities must be positive and finite".into()));
        }
        Ok(Self { f1, f0 })
    }

    pub fn len(&self) -> usize {
        self.f1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f1.is_empty()
    }
}

pub fn sigmoid(beta: f64) -> f64 {
    if beta >= 0.0 {
        1.0 / (1.0 + (-beta).exp())
    } else {
        let e = beta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(c: f64) -> f64 {
    (c / (1.0 - c)).ln()
}

/// `log(1 + e^beta)` without overflow.
fn softplus(beta: f64) -> f64 {
    if beta > 0.0 {
        beta + (-beta).exp().ln_1p()
    } else {
        beta.exp().ln_1p()
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// `-sum_i log(c_i f1_i + (1 - c_i) f0_i)` with `c = sigmoid(beta)`.
pub fn marginal_nll(beta: &[f64], lik: &Likelihoods) -> Result<f64> {
    check_len("marginal_nll beta", lik.len(), beta.len())?;
    Ok(beta
        .iter()
        .zip(lik.f1.iter().zip(&lik.f0))
        .map(|(&b, (&f1, &f0))| {
            let c = sigmoid(b);
            -(c * f1 + (1.0 - c) * f0).ln()
        })
        .sum())
}

/// Per-subgraph total variation `(|D1 beta|_1, |D2 beta|_1, |D3 beta|_1)`.
pub fn subgraph_variation(beta: &[f64], split: &SubgraphSplit) -> [f64; 3] {
    let tv = |edges: &[(usize, usize)]| edges.iter().map(|&(a, b)| (beta[a] - beta[b]).abs()).sum();
    [tv(&split.e1), tv(&split.e2), tv(&split.e3)]
}

/// Marginal likelihood plus the three weighted fused penalties.
pub fn penalized_objective(
    beta: &[f64],
    lik: &Likelihoods,
    split: &SubgraphSplit,
    params: &HsParams,
) -> Result<f64> {
    check_len("penalized_objective split", beta.len(), split.n_vertices())?;
    let nll = marginal_nll(beta, lik)?;
    let [t1, t2, t3] = subgraph_variation(beta, split);
    let mut penalty = 0.0;
    for (lambda, tv) in [(params.lambda_pro, t1), (params.lambda_les, t2), (params.lambda_proles, t3)] {
        if lambda > 0.0 {
            penalty += lambda * tv;
        }
    }
    Ok(nll + penalty)
}

/// Complete-data negative log-likelihood `sum log(1 + e^beta_i) - s_i beta_i`.
pub fn surrogate_nll(beta: &[f64], s: &[f64]) -> Result<f64> {
    check_len("surrogate_nll s", beta.len(), s.len())?;
    Ok(beta.iter().zip(s).map(|(&b, &si)| softplus(b) - si * b).sum())
}

pub fn surrogate_gradient(beta: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    check_len("surrogate_gradient s", beta.len(), s.len())?;
    Ok(beta.iter().zip(s).map(|(&b, &si)| sigmoid(b) - si).collect())
}

/// Responsibilities `c f1 / (c f1 + (1 - c) f0)`.
pub fn e_step(beta: &[f64], lik: &Likelihoods) -> Result<Vec<f64>> {
    check_len("e_step beta", lik.len(), beta.len())?;
    let c: Vec<f64> = beta.iter().map(|&b| sigmoid(b)).collect();
    Ok(responsibilities(&c, lik))
}

fn responsibilities(c: &[f64], lik: &Likelihoods) -> Vec<f64> {
    c.iter()
        .zip(lik.f1.iter().zip(&lik.f0))
        .map(|(&ci, (&f1, &f0))| {
            let num = ci * f1;
            num / (num + (1.0 - ci) * f0)
        })
        .collect()
}

/// Posterior null probabilities; exactly `1 - e_step`.
pub fn posterior_null(beta: &[f64], lik: &Likelihoods) -> Result<Vec<f64>> {
    Ok(e_step(beta, lik)?.into_iter().map(|s| 1.0 - s).collect())
}

/// Posterior null probabilities under explicit priors `c`.
pub fn posterior_null_with_prior(c: &[f64], lik: &Likelihoods) -> Result<Vec<f64>> {
    check_len("posterior prior", lik.len(), c.len())?;
    Ok(responsibilities(c, lik).into_iter().map(|s| 1.0 - s).collect())
}

/// Operator and penalty level of the M-step; both vanish when no penalty
/// is active.
pub fn mstep_operator(split: &SubgraphSplit, params: &HsParams) -> Result<(DiffOperator, f64)> {
    if !params.penalty_active() {
        return Ok((DiffOperator::empty(split.n_vertices()), 0.0));
    }
    Ok((stacked_operator(split, params)?, params.lambda_pro))
}

/// Quadratic expansion of the surrogate at `beta_k` as a generalized lasso:
/// `w = max(c (1 - c), w_floor)`, `y = sqrt(w) (beta_k - (c - s) / w)`.
pub fn assemble_mstep(
    beta_k: &[f64],
    s_tilde: &[f64],
    split: &SubgraphSplit,
    params: &HsParams,
) -> Result<GenLassoProblem> {
    check_len("assemble_mstep s_tilde", beta_k.len(), s_tilde.len())?;
    let (op, lambda) = mstep_operator(split, params)?;
    let (y, x) = taylor_terms(beta_k, s_tilde, params.w_floor);
    GenLassoProblem::new(y, x, op, lambda)
}

fn taylor_terms(beta_k: &[f64], s_tilde: &[f64], w_floor: f64) -> (Vec<f64>, Vec<f64>) {
    beta_k
        .iter()
        .zip(s_tilde)
        .map(|(&b, &s)| {
            let c = sigmoid(b);
            let w = (c * (1.0 - c)).max(w_floor);
            let sw = w.sqrt();
            (sw * (b - (c - s) / w), sw)
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub beta: Vec<f64>,
    pub c: Vec<f64>,
    pub s_tilde: Vec<f64>,
    pub lfdr: Vec<f64>,
    /// Penalized objective at the initial point and after every accepted step.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: FitState,
    pub selected: Vec<usize>,
    /// Selected voxels with `z <= 0`.
    pub group_bias: Vec<usize>,
    /// Selected voxels with `z > 0`.
    pub group_lesion: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    /// Total ADMM iterations over all M-steps.
    pub admm_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub group_bias: Vec<usize>,
    pub group_lesion: Vec<usize>,
}

/// `{i : lfdr_i < gamma}` split by the sign of `z`.
pub fn select_features(lfdr: &[f64], z: &[f64], gamma: f64) -> Result<Selection> {
    check_len("select_features z", lfdr.len(), z.len())?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let mut out = Selection::default();
    for (i, (&l, &zi)) in lfdr.iter().zip(z).enumerate() {
        if l < gamma {
            out.selected.push(i);
            if zi <= 0.0 {
                out.group_bias.push(i);
            } else {
                out.group_lesion.push(i);
            }
        }
    }
    Ok(out)
}

/// Runs EM from `beta_init` (default `logit(cbar)` everywhere). Each M-step
/// solves the expanded problem, clamps to `[-beta_clamp, beta_clamp]` and
/// backtracks toward the current iterate until the penalized objective does
/// not increase.
pub fn fit_em(
    z: &[f64],
    model: &TwoGroupsModel,
    split: &SubgraphSplit,
    params: &HsParams,
    beta_init: Option<&[f64]>,
) -> Result<FitResult> {
    let lik = Likelihoods::new(z, model);
    fit_em_with(z, &lik, model.cbar, split, params, beta_init)
}

/// [`fit_em`] on precomputed likelihoods.
pub fn fit_em_with(
    z: &[f64],
    lik: &Likelihoods,
    cbar: f64,
    split: &SubgraphSplit,
    params: &HsParams,
    beta_init: Option<&[f64]>,
) -> Result<FitResult> {
    params.validate()?;
    let p = z.len();
    check_len("fit_em likelihoods", p, lik.len())?;
    check_len("fit_em split", p, split.n_vertices())?;
    if !params.ordering_respected() {
        log::warn!(
            "penalty ordering lambda_les <= lambda_pro <= lambda_proles not respected ({}, {}, {})",
            params.lambda_les,
            params.lambda_pro,
            params.lambda_proles
        );
    }
    let clamp = params.beta_clamp;
    let mut beta: Vec<f64> = match beta_init {
        Some(b) => {
            check_len("fit_em beta_init", p, b.len())?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("beta_init"));
            }
            b.iter().map(|v| v.clamp(-clamp, clamp)).collect()
        }
        None => vec![logit(cbar).clamp(-clamp, clamp); p],
    };

    let mut objective = penalized_objective(&beta, lik, split, params)?;
    let mut trace = vec![objective];
    let mut converged = params.constant_prior;
    let mut iterations = 0;
    let mut admm_iterations = 0;

    if !params.constant_prior {
        let (op, lambda) = mstep_operator(split, params)?;
        let mut solver = AdmmSolver::new(&op, params.admm.clone());
        let mut warm: Option<WarmStart> = None;
        let mut trial = vec![0.0; p];

        for it in 1..=params.em_max_iter {
            iterations = it;
            let s_tilde = e_step(&beta, lik)?;
            let (y, x) = taylor_terms(&beta, &s_tilde, params.w_floor);
            let problem = GenLassoProblem::new(y, x, op.clone(), lambda)?;
            let report = solver.solve(&problem, warm.as_ref())?;
            admm_iterations += report.iterations;
            if !report.converged {
                log::debug!(
                    "EM iteration {it}: M-step stopped after {} ADMM iterations (r={:.3e}, s={:.3e})",
                    report.iterations,
                    report.primal_residual,
                    report.dual_residual
                );
            }
            let target: Vec<f64> = report.beta.iter().map(|v| v.clamp(-clamp, clamp)).collect();
            warm = Some(report.warm_start());

            let mut eta = 1.0;
            let mut accepted = None;
            let mut first_change = None;
            for _ in 0..=params.max_halvings {
                for i in 0..p {
                    trial[i] = beta[i] + eta * (target[i] - beta[i]);
                }
                let value = penalized_objective(&trial, lik, split, params)?;
                first_change.get_or_insert(value - objective);
                if value <= objective {
                    accepted = Some(value);
                    break;
                }
                eta *= 0.5;
            }

            let scale = objective.abs().max(f64::MIN_POSITIVE);
            match accepted {
                Some(value) => {
                    let rel = (objective - value) / scale;
                    beta.copy_from_slice(&trial);
                    objective = value;
                    trace.push(value);
                    if rel <= params.em_tol {
                        converged = true;
                        break;
                    }
                }
                None => {
                    // Even the full step only moves the objective within tolerance.
                    converged = first_change.is_some_and(|d| d / scale <= params.em_tol);
                    if !converged {
                        log::warn!("EM iteration {it}: step-halving exhausted without descent");
                    }
                    break;
                }
            }
        }
    }

    let c: Vec<f64> = beta.iter().map(|&b| sigmoid(b)).collect();
    let s_tilde = responsibilities(&c, lik);
    let lfdr: Vec<f64> = s_tilde.iter().map(|s| 1.0 - s).collect();
    let selection = select_features(&lfdr, z, params.gamma)?;
    Ok(FitResult {
        state: FitState {
            beta,
            c,
            s_tilde,
            lfdr,
            objective_trace: trace,
        },
        selected: selection.selected,
        group_bias: selection.group_bias,
        group_lesion: selection.group_lesion,
        converged,
        iterations,
        admm_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelgrid::{split_subgraphs, LatticeGraph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lik(f1: &[f64], f0: &[f64]) -> Likelihoods {
        Likelihoods::from_values(f1.to_vec(), f0.to_vec()).unwrap()
    }

    #[test]
    fn marginal_examples() {
        let l = lik(&[0.2], &[0.1]);
        assert!((marginal_nll(&[0.0], &l).unwrap() - (-(0.15f64).ln())).abs() < 1e-12);
        assert!((marginal_nll(&[0.0], &l).unwrap() - 1.8971).abs() < 1e-4);

        let same = lik(&[0.3, 0.1], &[0.3, 0.1]);
        let expected = -(0.3f64.ln() + 0.1f64.ln());
        for beta in [[0.0, 0.0], [4.0, -7.0]] {
            assert!((marginal_nll(&beta, &same).unwrap() - expected).abs() < 1e-12);
        }
        let l = lik(&[0.2, 0.05], &[0.1, 0.3]);
        let at_clamp = marginal_nll(&[15.0, 15.0], &l).unwrap();
        assert!((at_clamp + 0.2f64.ln() + 0.05f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn penalized_examples() {
        let split = split_subgraphs(&LatticeGraph::chain(2), &[-1.0, -2.0]).unwrap();
        let l = lik(&[0.2, 0.4], &[0.1, 0.2]);
        let params = HsParams::new(0.5, 0.0, 0.0);
        let beta = [1.0, 0.0];
        let base = marginal_nll(&beta, &l).unwrap();
        assert!((penalized_objective(&beta, &l, &split, &params).unwrap() - (base + 0.5)).abs() < 1e-12);
        let constant = [0.7, 0.7];
        assert_eq!(
            penalized_objective(&constant, &l, &split, &params).unwrap(),
            marginal_nll(&constant, &l).unwrap()
        );
        let off = HsParams::new(0.0, 0.0, 0.0);
        assert_eq!(
            penalized_objective(&beta, &l, &split, &off).unwrap(),
            marginal_nll(&beta, &l).unwrap()
        );
    }

    #[test]
    fn surrogate_examples() {
        assert!((surrogate_nll(&[0.0; 3], &[0.0; 3]).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
        let v = surrogate_nll(&[15.0; 2], &[1.0; 2]).unwrap();
        assert!((v - 2.0 * (-15f64).exp().ln_1p()).abs() < 1e-15 && v < 1e-6);
    }

    proptest! {
        #[test]
        fn surrogate_gradient_matches_finite_differences(
            beta in proptest::collection::vec(-8.0..8.0f64, 1..6),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = beta.iter().map(|_| rng.random::<f64>()).collect();
            let g = surrogate_gradient(&beta, &s).unwrap();
            let h = 1e-5;
            for i in 0..beta.len() {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (surrogate_nll(&up, &s).unwrap() - surrogate_nll(&dn, &s).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0));
            }
        }

        #[test]
        fn e_step_and_posterior_complementary(
            beta in proptest::collection::vec(-15.0..15.0f64, 1..8),
            f1 in 1e-6..5.0f64,
            f0 in 1e-6..5.0f64,
        ) {
            let n = beta.len();
            let l = lik(&vec![f1; n], &vec![f0; n]);
            let s = e_step(&beta, &l).unwrap();
            let q = posterior_null(&beta, &l).unwrap();
            for (a, b) in s.iter().zip(&q) {
                prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
                prop_assert_eq!(*b, 1.0 - *a);
            }
        }

        #[test]
        fn selection_nested_in_gamma(
            lfdr in proptest::collection::vec(0.0..1.0f64, 1..30),
            g1 in 0.01..0.99f64,
            g2 in 0.01..0.99f64,
        ) {
            let z: Vec<f64> = (0..lfdr.len()).map(|i| i as f64 - 10.0).collect();
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            let a = select_features(&lfdr, &z, lo).unwrap();
            let b = select_features(&lfdr, &z, hi).unwrap();
            prop_assert!(a.selected.iter().all(|i| b.selected.contains(i)));
            let mut merged = [a.group_bias.clone(), a.group_lesion.clone()].concat();
            merged.sort_unstable();
            prop_assert_eq!(merged, a.selected);
        }
    }

    #[test]
    fn e_step_examples() {
        let l = lik(&[0.2, 0.2], &[0.2, 0.1]);
        let s = e_step(&[0.0, logit(0.3)], &l).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!((s[1] - 0.06 / 0.13).abs() < 1e-12);
        let s = e_step(&[15.0], &lik(&[0.01], &[0.4])).unwrap();
        assert!(s[0] > 0.99);
    }

    #[test]
    fn posterior_examples() {
        let q = posterior_null(&[logit(0.2)], &lik(&[0.6], &[0.3])).unwrap();
        assert!((q[0] - 0.24 / 0.36).abs() < 1e-12);
        let q = posterior_null(&[-15.0], &lik(&[0.6], &[0.3])).unwrap();
        assert!(q[0] > 1.0 - 1e-6);
        let q = posterior_null(&[logit(0.35)], &lik(&[0.5], &[0.5])).unwrap();
        assert!((q[0] - 0.65).abs() < 1e-12);
    }

    #[test]
    fn select_examples() {
        let s = select_features(&[0.1, 0.3], &[-2.0, 3.0], 0.2).unwrap();
        assert_eq!(s.selected, vec![0]);
        assert_eq!(s.group_bias, vec![0]);
        assert!(s.group_lesion.is_empty());
        let none = select_features(&[1.0; 4], &[1.0; 4], 0.9).unwrap();
        assert!(none.selected.is_empty());
        // Strict threshold.
        assert!(select_features(&[0.2], &[1.0], 0.2).unwrap().selected.is_empty());
        assert!(select_features(&[0.2], &[1.0], 1.0).is_err());
    }

    #[test]
    fn mstep_examples() {
        let split = split_subgraphs(&LatticeGraph::chain(3), &[1.0, 2.0, 3.0]).unwrap();
        let params = HsParams::new(1.0, 1.0, 1.0);
        let prob = assemble_mstep(&[0.0; 3], &[0.5; 3], &split, &params).unwrap();
        assert_eq!(prob.y_tilde, vec![0.0; 3]);
        assert_eq!(prob.x_diag, vec![0.5; 3]);
        let rep = crate::genlasso::solve(&prob, &params.admm, None).unwrap();
        assert!(rep.beta.iter().all(|b| b.abs() < 1e-12));

        let prob = assemble_mstep(&[0.0], &[1.0], &split_subgraphs(&LatticeGraph::chain(1), &[1.0]).unwrap(), &params)
            .unwrap();
        assert!((prob.y_tilde[0] - 1.0).abs() < 1e-15);

        let prob = assemble_mstep(&[15.0, -15.0, 15.0], &[0.0, 1.0, 0.5], &split, &params).unwrap();
        assert!(prob.x_diag.iter().all(|&x| x * x >= params.w_floor * (1.0 - 1e-12)));
        assert!(prob.y_tilde.iter().all(|y| y.is_finite()));
        assert_eq!(prob.lambda, 1.0);
    }

    #[test]
    fn params_validation() {
        assert!(HsParams::new(0.0, 0.5, 0.0).validate().is_err());
        assert!(HsParams::new(0.0, 0.0, 0.0).validate().is_ok());
        let mut p = HsParams::new(1.0, 0.5, 2.0);
        p.gamma = 0.0;
        assert!(p.validate().is_err());
        assert!(HsParams::new(1.0, 0.5, 2.0).ordering_respected());
        assert!(!HsParams::new(1.0, 2.0, 0.5).ordering_respected());
        assert!(HsParams::new(-1.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn uninformative_voxel_keeps_prior() {
        let split = split_subgraphs(&LatticeGraph::chain(1), &[0.5]).unwrap();
        let l = lik(&[0.3], &[0.3]);
        let params = HsParams::new(0.0, 0.0, 0.0);
        let fit = fit_em_with(&[0.5], &l, 0.2, &split, &params, None).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!((fit.state.c[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn scalar_em_map_increases_prior() {
        let split = split_subgraphs(&LatticeGraph::chain(1), &[1.0]).unwrap();
        let l = lik(&[0.3], &[0.1]);
        let mut params = HsParams::new(0.0, 0.0, 0.0);
        params.em_max_iter = 40;
        params.em_tol = 0.0;
        let fit = fit_em_with(&[1.0], &l, 0.5, &split, &params, None).unwrap();
        let trace = &fit.state.objective_trace;
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        // The objective falls as c rises, so a non-increasing trace means c
        // rises monotonically, as does the scalar EM map c <- 3c / (2c + 1).
        let mut c_em = 0.5f64;
        for _ in 0..20 {
            let next = 3.0 * c_em / (2.0 * c_em + 1.0);
            assert!(next > c_em);
            c_em = next;
        }
        assert!(c_em > 0.999);
        assert!(fit.state.c[0] > 0.999);
        assert!(fit.state.beta[0] <= params.beta_clamp);
    }

    #[test]
    fn constant_prior_flag_matches_localfdr() {
        let z = [-1.0, 0.5, 2.0];
        let split = split_subgraphs(&LatticeGraph::chain(3), &z).unwrap();
        let l = lik(&[0.05, 0.2, 0.6], &[0.3, 0.35, 0.05]);
        let mut params = HsParams::new(1.0, 0.5, 2.0);
        params.constant_prior = true;
        let fit = fit_em_with(&z, &l, 0.1, &split, &params, None).unwrap();
        let expected = posterior_null_with_prior(&[0.1; 3], &l).unwrap();
        for (a, b) in fit.state.lfdr.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn damped_descent_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let p = 25;
            let z: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f1: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..1.0)).collect();
            let f0: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..1.0)).collect();
            let l = lik(&f1, &f0);
            let split = split_subgraphs(&LatticeGraph::chain(p), &z).unwrap();
            let params = HsParams::new(0.3, 0.1, 0.6);
            let fit = fit_em_with(&z, &l, 0.2, &split, &params, None).unwrap();
            let t = &fit.state.objective_trace;
            assert!(t.windows(2).all(|w| w[1] <= w[0] + 1e-10));
            assert!(t.last().unwrap() <= &t[0]);
            assert!(fit.state.beta.iter().all(|b| b.abs() <= 15.0));
        }
    }
}
