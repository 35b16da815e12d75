//! Weighted generalized lasso with a diagonal design,
//!
//! `min_beta 1/2 ||y - diag(x) beta||^2 + lambda ||D beta||_1`,
//!
//! solved by ADMM on the split `alpha = D beta` with a scaled dual variable.
//! The beta-update system `diag(x^2) + rho D^T D` is factored once per
//! [`AdmmSolver::solve`] call and reused across the ADMM iterations.

use crate::error::{Error, Result};
use crate::sparse::{norm2, GramSolver, SolverKind};
use crate::voxelgrid::DiffOperator;

/// One M-step instance: data `y_tilde`, design diagonal `x_diag`, operator
/// `op` and penalty level `lambda`.
#[derive(Debug, Clone)]
pub struct GenLassoProblem {
    pub y_tilde: Vec<f64>,
    pub x_diag: Vec<f64>,
    pub op: DiffOperator,
    pub lambda: f64,
}

impl GenLassoProblem {
    pub fn new(y_tilde: Vec<f64>, x_diag: Vec<f64>, op: DiffOperator, lambda: f64) -> Result<Self> {
        let p = op.n_cols();
        for (context, len) in [("y_tilde", y_tilde.len()), ("x_diag", x_diag.len())] {
            if len != p {
                return Err(Error::Dimension {
                    context,
                    expected: p,
                    actual: len,
                });
            }
        }
        if y_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("y_tilde"));
        }
        if x_diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "design diagonal entries must be positive and finite".into(),
            ));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self {
            y_tilde,
            x_diag,
            op,
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.y_tilde.len()
    }

    /// Unpenalized minimizer `y_i / x_i`.
    pub fn least_squares(&self) -> Vec<f64> {
        self.y_tilde
            .iter()
            .zip(&self.x_diag)
            .map(|(y, x)| y / x)
            .collect()
    }
}

/// `1/2 sum (y_i - x_i beta_i)^2 + lambda sum_r |w_r (beta_a - beta_b)|`.
pub fn gl_objective(problem: &GenLassoProblem, beta: &[f64]) -> Result<f64> {
    if beta.len() != problem.dim() {
        return Err(Error::Dimension {
            context: "gl_objective beta",
            expected: problem.dim(),
            actual: beta.len(),
        });
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("beta"));
    }
    let loss: f64 = problem
        .y_tilde
        .iter()
        .zip(&problem.x_diag)
        .zip(beta)
        .map(|((y, x), b)| {
            let r = y - x * b;
            0.5 * r * r
        })
        .sum();
    let penalty = if problem.lambda == 0.0 {
        0.0
    } else {
        problem.lambda * problem.op.l1_norm(beta)
    };
    Ok(loss + penalty)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    /// Augmented Lagrangian parameter; `None` means `max(lambda, 1)`.
    pub rho: Option<f64>,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Largest LDL^T factor (bytes) before falling back to conjugate gradients.
    pub factor_mem_cap: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: None,
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 5000,
            factor_mem_cap: 1 << 30,
        }
    }
}

/// ADMM iterate used to warm-start a subsequent solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Scaled dual variable.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub primal_tolerance: f64,
    pub dual_tolerance: f64,
    pub objective: f64,
    pub converged: bool,
    pub rho: f64,
    pub solver: SolverKind,
    /// Final split and dual variables, for warm starts.
    pub alpha: Vec<f64>,
    pub u: Vec<f64>,
}

impl SolveReport {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            beta: self.beta.clone(),
            alpha: self.alpha.clone(),
            u: self.u.clone(),
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// ADMM solver bound to one operator; the fill-reducing ordering and
/// elimination tree are shared by every solve.
#[derive(Debug, Clone)]
pub struct AdmmSolver {
    gram: GramSolver,
    n_rows: usize,
    n_cols: usize,
    config: AdmmConfig,
}

impl AdmmSolver {
    pub fn new(op: &DiffOperator, config: AdmmConfig) -> Self {
        Self {
            gram: GramSolver::new(op, config.factor_mem_cap),
            n_rows: op.n_rows(),
            n_cols: op.n_cols(),
            config,
        }
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.config
    }

    pub fn solve(&mut self, problem: &GenLassoProblem, warm: Option<&WarmStart>) -> Result<SolveReport> {
        if problem.op.n_rows() != self.n_rows || problem.op.n_cols() != self.n_cols {
            return Err(Error::Dimension {
                context: "AdmmSolver operator rows",
                expected: self.n_rows,
                actual: problem.op.n_rows(),
            });
        }
        let p = problem.dim();
        let m = self.n_rows;
        let op = &problem.op;
        let lambda = problem.lambda;
        let rho = self.config.rho.unwrap_or(lambda.max(1.0));
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
        }

        if lambda == 0.0 || m == 0 {
            let beta = problem.least_squares();
            let alpha = op.apply(&beta);
            let objective = gl_objective(problem, &beta)?;
            return Ok(SolveReport {
                beta,
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                primal_tolerance: self.config.eps_abs,
                dual_tolerance: self.config.eps_abs,
                objective,
                converged: true,
                rho,
                solver: self.gram.kind(),
                alpha,
                u: vec![0.0; m],
            });
        }

        let w: Vec<f64> = problem.x_diag.iter().map(|x| x * x).collect();
        let xty: Vec<f64> = problem
            .x_diag
            .iter()
            .zip(&problem.y_tilde)
            .map(|(x, y)| x * y)
            .collect();
        self.gram.refactor(&w, rho)?;

        let (mut beta, mut alpha, mut u) = match warm {
            Some(ws) if ws.beta.len() == p && ws.alpha.len() == m && ws.u.len() == m => {
                (ws.beta.clone(), ws.alpha.clone(), ws.u.clone())
            }
            _ => {
                let beta = problem.least_squares();
                let alpha = op.apply(&beta);
                (beta, alpha, vec![0.0; m])
            }
        };

        let threshold = lambda / rho;
        let sqrt_m = (m as f64).sqrt();
        let sqrt_p = (p as f64).sqrt();
        let mut d_beta = vec![0.0; m];
        let mut diff = vec![0.0; m];
        let mut rhs = vec![0.0; p];
        let mut s_vec = vec![0.0; p];
        let mut alpha_old = vec![0.0; m];
        let mut report_r = f64::INFINITY;
        let mut report_s = f64::INFINITY;
        let mut tol_pri = 0.0;
        let mut tol_dual = 0.0;
        let mut converged = false;
        let mut iterations = 0;

        for it in 1..=self.config.max_iter {
            iterations = it;
            for r in 0..m {
                diff[r] = alpha[r] - u[r];
            }
            op.apply_transpose_into(&diff, &mut rhs);
            for i in 0..p {
                rhs[i] = xty[i] + rho * rhs[i];
            }
            self.gram.solve(&rhs, &mut beta)?;

            op.apply_into(&beta, &mut d_beta);
            alpha_old.copy_from_slice(&alpha);
            for r in 0..m {
                alpha[r] = soft_threshold(d_beta[r] + u[r], threshold);
            }
            let mut r_sq = 0.0;
            for r in 0..m {
                let res = d_beta[r] - alpha[r];
                u[r] += res;
                r_sq += res * res;
                diff[r] = alpha[r] - alpha_old[r];
            }
            op.apply_transpose_into(&diff, &mut s_vec);
            let s_norm = rho * norm2(&s_vec);
            let r_norm = r_sq.sqrt();

            op.apply_transpose_into(&u, &mut s_vec);
            let dual_scale = rho * norm2(&s_vec);
            tol_pri = sqrt_m * self.config.eps_abs
                + self.config.eps_rel * norm2(&d_beta).max(norm2(&alpha));
            tol_dual = sqrt_p * self.config.eps_abs + self.config.eps_rel * dual_scale;
            report_r = r_norm;
            report_s = s_norm;
            if r_norm <= tol_pri && s_norm <= tol_dual {
                converged = true;
                break;
            }
        }

        let objective = gl_objective(problem, &beta)?;
        Ok(SolveReport {
            beta,
            iterations,
            primal_residual: report_r,
            dual_residual: report_s,
            primal_tolerance: tol_pri,
            dual_tolerance: tol_dual,
            objective,
            converged,
            rho,
            solver: self.gram.kind(),
            alpha,
            u,
        })
    }
}

/// One-shot solve; builds a fresh [`AdmmSolver`] for the problem's operator.
pub fn solve(problem: &GenLassoProblem, config: &AdmmConfig, warm: Option<&WarmStart>) -> Result<SolveReport> {
    AdmmSolver::new(&problem.op, config.clone()).solve(problem, warm)
}
