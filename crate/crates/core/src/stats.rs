//! Voxelwise test statistics and the two-groups density model.
//!
//! The pipeline is: pooled two-sample t per voxel, probit transform to z,
//! Gaussian kernel density estimate of the marginal on a grid, central
//! matching for the empirical null `N(delta0, sigma0^2)` and the non-null
//! proportion, and finally the non-null density `f1` by inverting the mixture.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const CDF_CLAMP: f64 = 1e-12;
pub const F1_FLOOR: f64 = 1e-8;
pub const KDE_GRID_POINTS: usize = 512;
pub const CENTRAL_WINDOW: f64 = 1.0;
const CBAR_MIN: f64 = 0.001;
const CBAR_MAX: f64 = 0.999;
const F0_FLOOR: f64 = 1e-300;

/// Subjects by voxels intensity matrix with `+1` / `-1` labels (`-1` marks
/// the disease class).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_subjects: usize,
    n_voxels: usize,
    /// Row-major, one row per subject.
    x: Vec<f64>,
    y: Vec<i8>,
}

impl Dataset {
    pub fn new(n_subjects: usize, n_voxels: usize, x: Vec<f64>, y: Vec<i8>) -> Result<Self> {
        if x.len() != n_subjects * n_voxels {
            return Err(Error::Dimension {
                context: "dataset matrix",
                expected: n_subjects * n_voxels,
                actual: x.len(),
            });
        }
        if y.len() != n_subjects {
            return Err(Error::Dimension {
                context: "dataset labels",
                expected: n_subjects,
                actual: y.len(),
            });
        }
        if n_subjects < 4 {
            return Err(Error::InvalidDataset(format!(
                "need at least 4 subjects, got {n_subjects}"
            )));
        }
        if let Some(bad) = y.iter().find(|&&l| l != 1 && l != -1) {
            return Err(Error::InvalidDataset(format!("label {bad} is not +1 or -1")));
        }
        if !y.contains(&1) || !y.contains(&-1) {
            return Err(Error::InvalidDataset("both label classes must be present".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset intensities"));
        }
        Ok(Self {
            n_subjects,
            n_voxels,
            x,
            y,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn labels(&self) -> &[i8] {
        &self.y
    }

    pub fn row(&self, subject: usize) -> &[f64] {
        &self.x[subject * self.n_voxels..(subject + 1) * self.n_voxels]
    }

    pub fn values(&self) -> &[f64] {
        &self.x
    }

    /// Dataset restricted to the given subjects, in the given order.
    pub fn subset(&self, subjects: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(subjects.len() * self.n_voxels);
        let mut y = Vec::with_capacity(subjects.len());
        for &s in subjects {
            x.extend_from_slice(self.row(s));
            y.push(self.y[s]);
        }
        Self::new(subjects.len(), self.n_voxels, x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZScores {
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub df: usize,
}

/// Pooled-variance two-sample t per voxel, oriented as
/// `mean(+1 class) - mean(-1 class)`. Returns the statistics and `df = N - 2`.
pub fn two_sample_t(data: &Dataset) -> Result<(Vec<f64>, usize)> {
    let p = data.n_voxels();
    let n_pos = data.labels().iter().filter(|&&l| l == 1).count();
    let n_neg = data.n_subjects() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::InvalidDataset(format!(
            "each class needs at least 2 subjects (got {n_pos} and {n_neg})"
        )));
    }
    let mut sum_pos = vec![0.0; p];
    let mut sum_neg = vec![0.0; p];
    for s in 0..data.n_subjects() {
        let acc = if data.labels()[s] == 1 { &mut sum_pos } else { &mut sum_neg };
        for (a, v) in acc.iter_mut().zip(data.row(s)) {
            *a += v;
        }
    }
    let mean_pos: Vec<f64> = sum_pos.iter().map(|s| s / n_pos as f64).collect();
    let mean_neg: Vec<f64> = sum_neg.iter().map(|s| s / n_neg as f64).collect();
    let mut ss = vec![0.0; p];
    for s in 0..data.n_subjects() {
        let mean = if data.labels()[s] == 1 { &mean_pos } else { &mean_neg };
        for ((a, v), m) in ss.iter_mut().zip(data.row(s)).zip(mean) {
            let d = v - m;
            *a += d * d;
        }
    }
    let df = data.n_subjects() - 2;
    let scale = (1.0 / n_pos as f64 + 1.0 / n_neg as f64).sqrt();
    let t = (0..p)
        .map(|i| {
            let pooled = (ss[i] / df as f64).max(VARIANCE_FLOOR);
            (mean_pos[i] - mean_neg[i]) / (pooled.sqrt() * scale)
        })
        .collect();
    Ok((t, df))
}

/// `z = Phi^-1(F_df(t))`, evaluated through the lower tail of `-|t|` so that
/// `z(-t) = -z(t)` holds exactly. Tail probabilities are clamped to
/// `[CDF_CLAMP, 1 - CDF_CLAMP]`.
pub fn z_transform(t: &[f64], df: usize) -> Result<Vec<f64>> {
    if df < 1 {
        return Err(Error::InvalidParameter("degrees of freedom must be >= 1".into()));
    }
    let student = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::InvalidParameter(format!("t distribution: {e}")))?;
    let normal = Normal::standard();
    t.iter()
        .map(|&ti| {
            if !ti.is_finite() {
                return Err(Error::NonFinite("t statistics"));
            }
            if ti == 0.0 {
                return Ok(0.0);
            }
            let tail = student.cdf(-ti.abs()).clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
            let z = -normal.inverse_cdf(tail);
            Ok(if ti > 0.0 { z } else { -z })
        })
        .collect()
}

pub fn z_scores(data: &Dataset) -> Result<ZScores> {
    let (t, df) = two_sample_t(data)?;
    let z = z_transform(&t, df)?;
    Ok(ZScores { t, z, df })
}

fn mean_sd(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// `1.06 * sd * n^(-1/5)`.
pub fn silverman_bandwidth(z: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::InvalidParameter("bandwidth needs at least 2 points".into()));
    }
    let (_, sd) = mean_sd(z);
    if !(sd > 0.0) {
        return Err(Error::InvalidParameter("bandwidth undefined for constant data".into()));
    }
    Ok(1.06 * sd * (z.len() as f64).powf(-0.2))
}

/// `KDE_GRID_POINTS` equispaced points on `[min z - 1, max z + 1]`.
pub fn default_grid(z: &[f64]) -> Vec<f64> {
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    linspace(lo, hi, KDE_GRID_POINTS)
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidParameter("density grid needs at least 2 points".into()));
    }
    if grid.iter().any(|g| !g.is_finite()) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("density grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Gaussian kernel density estimate of `z` tabulated on `grid`.
pub fn kernel_density(z: &[f64], grid: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidParameter("kernel density needs data".into()));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    check_grid(grid)?;
    let norm = 1.0 / (z.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let inv_h = 1.0 / bandwidth;
    Ok(grid
        .iter()
        .map(|&g| {
            let s: f64 = z
                .iter()
                .map(|&zi| {
                    let u = (g - zi) * inv_h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            s * norm
        })
        .collect())
}

/// Trapezoid rule over a tabulated function.
pub fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    grid.windows(2)
        .zip(f.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

/// Linear interpolation of a tabulated function; `None` outside the grid.
fn interpolate(grid: &[f64], f: &[f64], x: f64) -> Option<f64> {
    let n = grid.len();
    if !(x >= grid[0] && x <= grid[n - 1]) {
        return None;
    }
    let hi = grid.partition_point(|&g| g < x).clamp(1, n - 1);
    let lo = hi - 1;
    let t = (x - grid[lo]) / (grid[hi] - grid[lo]);
    Some(f[lo] + t * (f[hi] - f[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalNull {
    pub delta0: f64,
    pub sigma0: f64,
    /// Non-null proportion.
    pub cbar: f64,
}

/// Null density choice for [`TwoGroupsModel::fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NullKind {
    /// Central matching with the window half-width.
    Empirical { window: f64 },
    /// `delta0 = 0`, `sigma0 = 1`; only the proportion is matched.
    Theoretical { window: f64 },
}

impl Default for NullKind {
    fn default() -> Self {
        NullKind::Empirical {
            window: CENTRAL_WINDOW,
        }
    }
}

fn window_points(grid: &[f64], f: &[f64], window: f64) -> Result<Vec<(f64, f64)>> {
    if !(grid[0] <= -window && grid[grid.len() - 1] >= window) {
        return Err(Error::EmpiricalNullFit(format!(
            "grid [{:.3}, {:.3}] does not cover the central window |z| <= {window}",
            grid[0],
            grid[grid.len() - 1]
        )));
    }
    let pts: Vec<(f64, f64)> = grid
        .iter()
        .zip(f)
        .filter(|(g, v)| g.abs() <= window && **v > 0.0)
        .map(|(&g, &v)| (g, v))
        .collect();
    if pts.len() < 3 {
        return Err(Error::EmpiricalNullFit(
            "fewer than 3 positive density points in the central window".into(),
        ));
    }
    Ok(pts)
}

/// Fits `log f ~ a + b z + c z^2` by weighted least squares (weights `f`) on
/// `|z| <= window` and reads off the null parameters.
pub fn central_matching(grid: &[f64], f_grid: &[f64], window: f64) -> Result<EmpiricalNull> {
    check_grid(grid)?;
    if grid.len() != f_grid.len() {
        return Err(Error::Dimension {
            context: "central_matching density",
            expected: grid.len(),
            actual: f_grid.len(),
        });
    }
    let pts = window_points(grid, f_grid, window)?;
    // Normal equations of the weighted quadratic fit.
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for &(z, f) in &pts {
        let basis = [1.0, z, z * z];
        let target = f.ln();
        for r in 0..3 {
            rhs[r] += f * basis[r] * target;
            for c in 0..3 {
                m[r][c] += f * basis[r] * basis[c];
            }
        }
    }
    let [a, b, c] = solve3(m, rhs).ok_or_else(|| {
        Error::EmpiricalNullFit("singular normal equations in the central window".into())
    })?;
    if !(c < 0.0) {
        return Err(Error::EmpiricalNullFit(format!(
            "no central peak (quadratic coefficient {c:.4e} >= 0)"
        )));
    }
    let delta0 = -b / (2.0 * c);
    let sigma0 = (-1.0 / (2.0 * c)).sqrt();
    let pi0 = (a - b * b / (4.0 * c)).exp() * sigma0 * (2.0 * std::f64::consts::PI).sqrt();
    if !pi0.is_finite() || !delta0.is_finite() {
        return Err(Error::EmpiricalNullFit("non-finite null parameters".into()));
    }
    Ok(EmpiricalNull {
        delta0,
        sigma0,
        cbar: (1.0 - pi0).clamp(CBAR_MIN, CBAR_MAX),
    })
}

/// Theoretical `N(0, 1)` null; the null proportion is the weighted geometric
/// mean of `f / phi` over the window.
pub fn theoretical_matching(grid: &[f64], f_grid: &[f64], window: f64) -> Result<EmpiricalNull> {
    check_grid(grid)?;
    let pts = window_points(grid, f_grid, window)?;
    let (mut num, mut den) = (0.0, 0.0);
    for &(z, f) in &pts {
        num += f * (f.ln() - normal_pdf(z, 0.0, 1.0).ln());
        den += f;
    }
    let pi0 = (num / den).exp();
    Ok(EmpiricalNull {
        delta0: 0.0,
        sigma0: 1.0,
        cbar: (1.0 - pi0).clamp(CBAR_MIN, CBAR_MAX),
    })
}

fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= factor * m[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in (row + 1)..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

pub fn normal_pdf(z: f64, mean: f64, sd: f64) -> f64 {
    let u = (z - mean) / sd;
    (-0.5 * u * u).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    pub null: NullKind,
    /// `None` selects the Silverman bandwidth.
    pub bandwidth: Option<f64>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            null: NullKind::default(),
            bandwidth: None,
        }
    }
}

/// Two-groups model `f = cbar f1 + (1 - cbar) f0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoGroupsModel {
    pub delta0: f64,
    pub sigma0: f64,
    pub cbar: f64,
    pub grid: Vec<f64>,
    /// Marginal density on `grid`.
    pub f_grid: Vec<f64>,
    /// Normalized non-null density on `grid`.
    pub f1_grid: Vec<f64>,
    /// Trapezoid mass of the floored non-null density before normalization.
    pub f1_mass: f64,
}

impl TwoGroupsModel {
    /// Inverts the mixture on the grid:
    /// `f1 = max((f - (1 - cbar) f0) / cbar, F1_FLOOR)`, renormalized.
    pub fn from_marginal(grid: Vec<f64>, f_grid: Vec<f64>, null: EmpiricalNull) -> Result<Self> {
        check_grid(&grid)?;
        if grid.len() != f_grid.len() {
            return Err(Error::Dimension {
                context: "marginal density",
                expected: grid.len(),
                actual: f_grid.len(),
            });
        }
        if !(null.sigma0 > 0.0) || !(null.cbar > 0.0 && null.cbar < 1.0) {
            return Err(Error::InvalidParameter(format!("invalid null parameters {null:?}")));
        }
        let EmpiricalNull {
            delta0,
            sigma0,
            cbar,
        } = null;
        let raw: Vec<f64> = grid
            .iter()
            .zip(&f_grid)
            .map(|(&g, &f)| ((f - (1.0 - cbar) * normal_pdf(g, delta0, sigma0)) / cbar).max(F1_FLOOR))
            .collect();
        let f1_mass = trapezoid(&grid, &raw);
        let f1_grid = raw.iter().map(|v| v / f1_mass).collect();
        Ok(Self {
            delta0,
            sigma0,
            cbar,
            grid,
            f_grid,
            f1_grid,
            f1_mass,
        })
    }

    /// Kernel density on the default grid, null by central matching (or the
    /// theoretical null), then mixture inversion.
    pub fn fit(z: &[f64], options: &ModelOptions) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("z-scores"));
        }
        let h = match options.bandwidth {
            Some(h) => h,
            None => silverman_bandwidth(z)?,
        };
        let grid = default_grid(z);
        let f_grid = kernel_density(z, &grid, h)?;
        let null = match options.null {
            NullKind::Empirical { window } => central_matching(&grid, &f_grid, window)?,
            NullKind::Theoretical { window } => theoretical_matching(&grid, &f_grid, window)?,
        };
        Self::from_marginal(grid, f_grid, null)
    }

    pub fn f0(&self, z: f64) -> f64 {
        normal_pdf(z, self.delta0, self.sigma0).max(F0_FLOOR)
    }

    /// Linear interpolation inside the grid, `F1_FLOOR` outside.
    pub fn f1(&self, z: f64) -> f64 {
        interpolate(&self.grid, &self.f1_grid, z).unwrap_or(F1_FLOOR)
    }

    pub fn marginal(&self, z: f64) -> f64 {
        self.cbar * self.f1(z) + (1.0 - self.cbar) * self.f0(z)
    }
}

/// Kernel density + central matching + mixture inversion with defaults.
pub fn make_two_groups_model(z: &[f64]) -> Result<TwoGroupsModel> {
    TwoGroupsModel::fit(z, &ModelOptions::default())
}
