//! Univariate reference selectors: t-test threshold, BH step-up, LocalFDR.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::fdrhs::{posterior_null_with_prior, Likelihoods};
use crate::stats::TwoGroupsModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ttest,
    Bh,
    LocalFdr,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ttest => "ttest",
            Method::Bh => "bh",
            Method::LocalFdr => "localfdr",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ttest" | "t" => Ok(Method::Ttest),
            "bh" => Ok(Method::Bh),
            "localfdr" | "lfdr" => Ok(Method::LocalFdr),
            other => Err(Error::InvalidParameter(format!("unknown baseline method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub method: Method,
    /// Ascending voxel indices.
    pub selected: Vec<usize>,
    /// p-values for `ttest` and `bh`, posterior null probabilities for `localfdr`.
    pub scores: Vec<f64>,
}

fn check_unit_open(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// Two-sided p-values `2 (1 - F_df(|t|))`, computed from the lower tail.
pub fn two_sided_p(t: &[f64], df: usize) -> Result<Vec<f64>> {
    if df < 1 {
        return Err(Error::InvalidParameter("degrees of freedom must be >= 1".into()));
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::InvalidParameter(format!("t distribution: {e}")))?;
    t.iter()
        .map(|&ti| {
            if ti.is_nan() {
                return Err(Error::NonFinite("t statistics"));
            }
            Ok((2.0 * dist.cdf(-ti.abs())).min(1.0))
        })
        .collect()
}

pub fn ttest_select(t: &[f64], df: usize, p_threshold: f64) -> Result<BaselineResult> {
    check_unit_open("p_threshold", p_threshold)?;
    let scores = two_sided_p(t, df)?;
    let selected = (0..scores.len()).filter(|&i| scores[i] < p_threshold).collect();
    Ok(BaselineResult {
        method: Method::Ttest,
        selected,
        scores,
    })
}

/// Benjamini-Hochberg step-up at level `q`. Every p-value not above the
/// largest qualifying order statistic is rejected, ties included.
pub fn bh_select(p_values: &[f64], q: f64) -> Result<BaselineResult> {
    check_unit_open("q", q)?;
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("p-values must lie in [0, 1]".into()));
    }
    let m = p_values.len();
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = (1..=m)
        .rev()
        .find(|&k| sorted[k - 1] <= k as f64 * q / m as f64)
        .map(|k| sorted[k - 1]);
    let selected = match cutoff {
        Some(c) => (0..m).filter(|&i| p_values[i] <= c).collect(),
        None => Vec::new(),
    };
    Ok(BaselineResult {
        method: Method::Bh,
        selected,
        scores: p_values.to_vec(),
    })
}

/// LocalFDR with the model's constant prior `cbar`.
pub fn localfdr_select(z: &[f64], model: &TwoGroupsModel, gamma: f64) -> Result<BaselineResult> {
    check_unit_open("gamma", gamma)?;
    let lik = Likelihoods::new(z, model);
    localfdr_select_with(&lik, model.cbar, gamma)
}

pub fn localfdr_select_with(lik: &Likelihoods, cbar: f64, gamma: f64) -> Result<BaselineResult> {
    check_unit_open("gamma", gamma)?;
    let scores = posterior_null_with_prior(&vec![cbar; lik.len()], lik)?;
    let selected = (0..scores.len()).filter(|&i| scores[i] < gamma).collect();
    Ok(BaselineResult {
        method: Method::LocalFdr,
        selected,
        scores,
    })
}
