//! Rank estimation for covariance submatrices: singular-value thresholding
//! for exact or Monte Carlo covariances, and a sequential
//! canonical-correlation test (Bartlett's chi-square) for finite samples.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::sample::{sample_covariance, DataMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    SingularValueThreshold,
    CanonicalCorrelationTest,
}

/// How to turn data into a rank decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTestSpec {
    pub method: RankMethod,
    /// Significance level for the test-based method.
    pub alpha: f64,
    /// Relative singular-value gap for the threshold method.
    pub rel_tol: f64,
}

impl RankTestSpec {
    /// Threshold method tuned for exact-arithmetic covariances.
    pub fn exact() -> Self {
        RankTestSpec {
            method: RankMethod::SingularValueThreshold,
            alpha: 0.05,
            rel_tol: 1e-6,
        }
    }

    /// Threshold method tuned for Monte Carlo covariances.
    pub fn monte_carlo() -> Self {
        RankTestSpec {
            method: RankMethod::SingularValueThreshold,
            alpha: 0.05,
            rel_tol: 0.05,
        }
    }

    pub fn cca(alpha: f64) -> Self {
        RankTestSpec {
            method: RankMethod::CanonicalCorrelationTest,
            alpha,
            rel_tol: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::invalid(format!(
                "rel_tol must be in (0, 1), got {}",
                self.rel_tol
            )));
        }
        Ok(())
    }
}

impl Default for RankTestSpec {
    fn default() -> Self {
        RankTestSpec::cca(0.05)
    }
}

/// Number of singular values above `rel_tol` times the largest one.
pub fn svd_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let top = sv[0];
    if top <= 0.0 {
        return 0;
    }
    sv.iter().take_while(|&&s| s > rel_tol * top).count()
}

/// [`svd_rank`] for submatrices of an exact covariance with a known overall
/// scale: a block whose largest entry is floating-point dust relative to
/// `scale` (entries that cancel to zero in exact arithmetic) is read as rank
/// zero instead of being rescaled up by the relative threshold.
pub fn svd_rank_with_scale(m: &DMatrix<f64>, rel_tol: f64, scale: f64) -> usize {
    if m.is_empty() || m.amax() <= 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return 0;
    }
    svd_rank(m, rel_tol)
}

/// Outcome of a sequential canonical-correlation rank test.
#[derive(Debug, Clone)]
pub struct CcaOutcome {
    /// First hypothesized rank the data failed to reject.
    pub rank: usize,
    /// Sample canonical correlations, descending.
    pub correlations: Vec<f64>,
    /// Bartlett statistic per tested rank r = 0, 1, ...
    pub statistics: Vec<f64>,
    /// Chi-square p-value per tested rank.
    pub p_values: Vec<f64>,
    /// Whether a ridge had to be added to an ill-conditioned within-set
    /// covariance block.
    pub regularized: bool,
}

fn cholesky_with_ridge(m: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, bool)> {
    if let Some(c) = m.clone().cholesky() {
        return Ok((c, false));
    }
    let scale = m.diagonal().amax().max(1e-300);
    let mut ridge = 1e-10 * scale;
    for _ in 0..6 {
        let jittered = m + DMatrix::identity(m.nrows(), m.ncols()) * ridge;
        if let Some(c) = jittered.cholesky() {
            return Ok((c, true));
        }
        ridge *= 100.0;
    }
    Err(Error::Numerical(
        "within-set covariance is not positive definite even after regularization".to_string(),
    ))
}

/// Sequential rank test on the columns `a` versus `b` of a data matrix:
/// for r = 0, 1, ... test H0 "rank <= r" with Bartlett's statistic
/// `-(n - (|a|+|b|+3)/2) * sum_{i>r} ln(1 - rho_i^2)` against chi-square with
/// `(|a|-r)(|b|-r)` degrees of freedom, returning the first non-rejected r.
/// The column sets must be disjoint.
pub fn cca_rank(data: &DataMatrix, a: &[usize], b: &[usize], alpha: f64) -> Result<CcaOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("rank query sets must be nonempty".to_string()));
    }
    if a.iter().any(|v| b.contains(v)) {
        return Err(Error::invalid(
            "cca_rank requires disjoint column sets; use svd_rank on the \
             sample covariance for overlapping queries"
                .to_string(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let n = data.n_rows();
    let (p1, p2) = (a.len(), b.len());
    if n <= p1 + p2 + 2 {
        return Err(Error::invalid(format!(
            "need more than {} samples for a {p1}x{p2} rank test, got {n}",
            p1 + p2 + 2
        )));
    }

    let cov = sample_covariance(data)?;
    let saa = cov.submatrix(a, a);
    let sbb = cov.submatrix(b, b);
    let sab = cov.submatrix(a, b);

    let (ca, ra) = cholesky_with_ridge(&saa)?;
    let (cb, rb) = cholesky_with_ridge(&sbb)?;
    let regularized = ra || rb;

    // Whitened cross-covariance La^-1 Sab Lb^-T; its singular values are the
    // sample canonical correlations.
    let half = ca
        .l()
        .solve_lower_triangular(&sab)
        .ok_or_else(|| Error::Numerical("triangular solve failed".to_string()))?;
    let whitened_t = cb
        .l()
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve failed".to_string()))?;
    let mut rho: Vec<f64> = whitened_t
        .svd(false, false)
        .singular_values
        .iter()
        .map(|&s| s.clamp(0.0, 1.0 - 1e-12))
        .collect();
    rho.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let m = p1.min(p2);
    rho.truncate(m);

    let factor = n as f64 - (p1 + p2 + 3) as f64 / 2.0;
    let mut statistics = Vec::new();
    let mut p_values = Vec::new();
    let mut rank = m;
    for r in 0..m {
        let tail: f64 = rho[r..].iter().map(|&x| (1.0 - x * x).ln()).sum();
        let stat = -factor * tail;
        let df = ((p1 - r) * (p2 - r)) as f64;
        let chi = ChiSquared::new(df)
            .map_err(|e| Error::Numerical(format!("chi-square with df {df}: {e}")))?;
        let p = 1.0 - chi.cdf(stat.max(0.0));
        statistics.push(stat);
        p_values.push(p);
        if p > alpha {
            rank = r;
            break;
        }
    }

    Ok(CcaOutcome {
        rank,
        correlations: rho,
        statistics,
        p_values,
        regularized,
    })
}

/// A rank decision with enough context to report.
#[derive(Debug, Clone, Serialize)]
pub struct RankDecision {
    pub rank: usize,
    pub method: RankMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    pub p_values: Vec<f64>,
    pub regularized: bool,
}

/// Routes to the configured method; overlapping column sets force the
/// singular-value threshold on the sample covariance.
pub fn estimate_rank(
    data: &DataMatrix,
    a: &[usize],
    b: &[usize],
    spec: &RankTestSpec,
) -> Result<RankDecision> {
    spec.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("rank query sets must be nonempty".to_string()));
    }
    for &c in a.iter().chain(b) {
        if c >= data.n_cols() {
            return Err(Error::invalid(format!(
                "column index {c} out of range ({} columns)",
                data.n_cols()
            )));
        }
    }
    let overlap = a.iter().any(|v| b.contains(v));
    match spec.method {
        RankMethod::CanonicalCorrelationTest if !overlap => {
            let out = cca_rank(data, a, b, spec.alpha)?;
            Ok(RankDecision {
                rank: out.rank,
                method: RankMethod::CanonicalCorrelationTest,
                statistic: out.statistics.last().copied(),
                p_values: out.p_values,
                regularized: out.regularized,
            })
        }
        _ => {
            let cov = sample_covariance(data)?;
            let rank = svd_rank(&cov.submatrix(a, b), spec.rel_tol);
            Ok(RankDecision {
                rank,
                method: RankMethod::SingularValueThreshold,
                statistic: None,
                p_values: Vec::new(),
                regularized: false,
            })
        }
    }
}
