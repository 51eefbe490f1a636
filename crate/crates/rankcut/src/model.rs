//! Linear-Gaussian structural equation models and linear selection
//! mechanisms: population covariance, per-condition selection
//! probabilities, and the closed-form covariances used as oracles for the
//! graphical rank criterion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::graph::Dag;

/// Distribution of a selection noise term.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    /// Degenerate at zero (hard truncation).
    Constant,
    Gaussian { variance: f64 },
    Logistic { scale: f64 },
    /// A named distribution; currently `"exponential"` (mean-centered) with
    /// params `[rate]`. Selection probabilities for custom noise go through
    /// adaptive quadrature rather than a closed-form CDF.
    Custom { name: String, params: Vec<f64> },
}

impl NoiseSpec {
    pub fn gaussian(variance: f64) -> Self {
        NoiseSpec::Gaussian { variance }
    }

    pub fn logistic(scale: f64) -> Self {
        NoiseSpec::Logistic { scale }
    }

    pub fn exponential(rate: f64) -> Self {
        NoiseSpec::Custom {
            name: "exponential".into(),
            params: vec![rate],
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, NoiseSpec::Constant)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Constant => Ok(()),
            NoiseSpec::Gaussian { variance } => {
                if *variance > 0.0 && variance.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "gaussian noise variance must be positive, got {variance}"
                    )))
                }
            }
            NoiseSpec::Logistic { scale } => {
                if *scale > 0.0 && scale.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "logistic noise scale must be positive, got {scale}"
                    )))
                }
            }
            NoiseSpec::Custom { name, params } => match name.as_str() {
                "exponential" => {
                    if params.len() == 1 && params[0] > 0.0 && params[0].is_finite() {
                        Ok(())
                    } else {
                        Err(Error::config(format!(
                            "exponential noise expects one positive rate, got {params:?}"
                        )))
                    }
                }
                other => Err(Error::config(format!(
                    "unsupported custom noise distribution '{other}'"
                ))),
            },
        }
    }

    /// Variance of the noise term (Constant counts as variance 0).
    pub fn variance(&self) -> Result<f64> {
        self.validate()?;
        Ok(match self {
            NoiseSpec::Constant => 0.0,
            NoiseSpec::Gaussian { variance } => *variance,
            NoiseSpec::Logistic { scale } => {
                scale * scale * std::f64::consts::PI * std::f64::consts::PI / 3.0
            }
            NoiseSpec::Custom { params, .. } => 1.0 / (params[0] * params[0]),
        })
    }

    /// Density at `u`; only defined for stochastic noise.
    pub(crate) fn density(&self, u: f64) -> Result<f64> {
        self.validate()?;
        match self {
            NoiseSpec::Constant => Err(Error::config(
                "constant noise has no density".to_string(),
            )),
            NoiseSpec::Gaussian { variance } => {
                let s2 = *variance;
                Ok((-u * u / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt())
            }
            NoiseSpec::Logistic { scale } => {
                let z = (-(u / scale).abs()).exp();
                Ok(z / (scale * (1.0 + z) * (1.0 + z)))
            }
            NoiseSpec::Custom { params, .. } => {
                // Centered exponential: support [-1/rate, inf).
                let rate = params[0];
                let shifted = u + 1.0 / rate;
                Ok(if shifted < 0.0 {
                    0.0
                } else {
                    rate * (-rate * shifted).exp()
                })
            }
        }
    }

    /// Supremum of the density, used to bound acceptance probabilities when
    /// conditioning on exact point values.
    pub(crate) fn sup_density(&self) -> Result<f64> {
        self.validate()?;
        match self {
            NoiseSpec::Constant => Err(Error::config(
                "constant noise has no density".to_string(),
            )),
            NoiseSpec::Gaussian { variance } => {
                Ok(1.0 / (2.0 * std::f64::consts::PI * variance).sqrt())
            }
            NoiseSpec::Logistic { scale } => Ok(1.0 / (4.0 * scale)),
            NoiseSpec::Custom { params, .. } => Ok(params[0]),
        }
    }

    /// P(lo < eps < hi), closed form where available, quadrature otherwise.
    pub(crate) fn interval_probability(&self, lo: f64, hi: f64) -> Result<f64> {
        if hi <= lo {
            return Ok(0.0);
        }
        match self {
            NoiseSpec::Constant => Ok(if lo < 0.0 && 0.0 < hi { 1.0 } else { 0.0 }),
            NoiseSpec::Gaussian { variance } => {
                let normal = Normal::new(0.0, variance.sqrt())
                    .map_err(|e| Error::config(format!("gaussian noise: {e}")))?;
                let upper = if hi == f64::INFINITY { 1.0 } else { normal.cdf(hi) };
                let lower = if lo == f64::NEG_INFINITY {
                    0.0
                } else {
                    normal.cdf(lo)
                };
                Ok((upper - lower).max(0.0))
            }
            NoiseSpec::Logistic { scale } => {
                let sigmoid = |x: f64| {
                    if x == f64::INFINITY {
                        1.0
                    } else if x == f64::NEG_INFINITY {
                        0.0
                    } else {
                        1.0 / (1.0 + (-x / scale).exp())
                    }
                };
                Ok((sigmoid(hi) - sigmoid(lo)).max(0.0))
            }
            NoiseSpec::Custom { params, .. } => {
                self.validate()?;
                let rate = params[0];
                // Clip to the support and a far-tail cutoff before quadrature.
                let support_lo = -1.0 / rate;
                let cutoff_hi = support_lo + 60.0 / rate;
                let a = lo.max(support_lo);
                let b = hi.min(cutoff_hi);
                if b <= a {
                    return Ok(if lo <= support_lo && hi >= cutoff_hi { 1.0 } else { 0.0 });
                }
                let f = |u: f64| self.density(u).unwrap_or(0.0);
                Ok(adaptive_simpson(&f, a, b, 1e-10).clamp(0.0, 1.0))
            }
        }
    }
}

/// Adaptive Simpson quadrature with an absolute tolerance.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// One piece of an admissible set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdmissiblePiece {
    /// Open interval (lo, hi); either bound may be infinite.
    Interval { lo: f64, hi: f64 },
    Point(f64),
}

/// A union of disjoint open intervals and singletons: the admissible values
/// of a selection response. Must be nonempty and a proper subset of the reals.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleSet {
    pieces: Vec<AdmissiblePiece>,
}

impl AdmissibleSet {
    pub fn new(mut pieces: Vec<AdmissiblePiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::config("admissible set must be nonempty".to_string()));
        }
        for p in &pieces {
            match *p {
                AdmissiblePiece::Interval { lo, hi } => {
                    if lo.is_nan() || hi.is_nan() || lo >= hi {
                        return Err(Error::config(format!(
                            "admissible interval ({lo}, {hi}) is empty or malformed"
                        )));
                    }
                }
                AdmissiblePiece::Point(v) => {
                    if !v.is_finite() {
                        return Err(Error::config(format!(
                            "admissible point {v} must be finite"
                        )));
                    }
                }
            }
        }
        pieces.sort_by(|x, y| {
            let key = |p: &AdmissiblePiece| match *p {
                AdmissiblePiece::Interval { lo, .. } => lo,
                AdmissiblePiece::Point(v) => v,
            };
            key(x).partial_cmp(&key(y)).unwrap()
        });

        // Merge overlapping intervals, absorb covered points, drop duplicates.
        let mut merged: Vec<AdmissiblePiece> = Vec::new();
        for p in pieces {
            match (merged.last_mut(), p) {
                (
                    Some(AdmissiblePiece::Interval { hi, .. }),
                    AdmissiblePiece::Interval { lo: plo, hi: phi },
                ) if plo <= *hi => {
                    *hi = hi.max(phi);
                }
                (Some(AdmissiblePiece::Interval { lo, hi }), AdmissiblePiece::Point(v))
                    if *lo < v && v < *hi => {}
                (Some(AdmissiblePiece::Point(prev)), AdmissiblePiece::Point(v))
                    if *prev == v => {}
                _ => merged.push(p),
            }
        }
        let whole_line = merged.iter().any(|p| {
            matches!(p, AdmissiblePiece::Interval { lo, hi }
                if *lo == f64::NEG_INFINITY && *hi == f64::INFINITY)
        });
        if whole_line {
            return Err(Error::config(
                "admissible set must be a proper subset of the reals".to_string(),
            ));
        }
        Ok(AdmissibleSet { pieces: merged })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![AdmissiblePiece::Interval { lo, hi }])
    }

    pub fn point(v: f64) -> Result<Self> {
        Self::new(vec![AdmissiblePiece::Point(v)])
    }

    pub fn pieces(&self) -> &[AdmissiblePiece] {
        &self.pieces
    }

    pub fn contains(&self, x: f64) -> bool {
        self.pieces.iter().any(|p| match *p {
            AdmissiblePiece::Interval { lo, hi } => lo < x && x < hi,
            AdmissiblePiece::Point(v) => v == x,
        })
    }

    pub fn has_interval(&self) -> bool {
        self.pieces
            .iter()
            .any(|p| matches!(p, AdmissiblePiece::Interval { .. }))
    }

    pub fn points(&self) -> Vec<f64> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                AdmissiblePiece::Point(v) => Some(*v),
                _ => None,
            })
            .collect()
    }
}

/// A single selection condition (V, beta, eps, Y-set): the response is
/// `Y = beta' V + eps` and a sample survives iff Y lands in the admissible set.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCondition {
    targets: Vec<String>,
    coeffs: Vec<f64>,
    noise: NoiseSpec,
    admissible: AdmissibleSet,
}

impl SelectionCondition {
    pub fn new(
        targets: Vec<String>,
        coeffs: Vec<f64>,
        noise: NoiseSpec,
        admissible: AdmissibleSet,
    ) -> Self {
        SelectionCondition {
            targets,
            coeffs,
            noise,
            admissible,
        }
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn admissible(&self) -> &AdmissibleSet {
        &self.admissible
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::config("selection condition has no targets".to_string()));
        }
        if self.coeffs.len() != self.targets.len() {
            return Err(Error::config(format!(
                "{} coefficients for {} targets",
                self.coeffs.len(),
                self.targets.len()
            )));
        }
        for (t, &c) in self.targets.iter().zip(&self.coeffs) {
            if !c.is_finite() || c == 0.0 {
                return Err(Error::config(format!(
                    "coefficient of '{t}' must be finite and nonzero, got {c}"
                )));
            }
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(Error::config(format!("duplicate target '{t}'")));
            }
        }
        self.noise.validate()
    }

    /// beta' v for a value vector aligned with `targets`.
    pub fn linear_term(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.targets.len() {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                self.targets.len(),
                v.len()
            )));
        }
        Ok(self.coeffs.iter().zip(v).map(|(c, x)| c * x).sum())
    }
}

/// A linear selection mechanism: zero or more conditions that must all hold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionConfig {
    conditions: Vec<SelectionCondition>,
}

impl SelectionConfig {
    pub fn new(conditions: Vec<SelectionCondition>) -> Self {
        SelectionConfig { conditions }
    }

    pub fn empty() -> Self {
        SelectionConfig { conditions: Vec::new() }
    }

    pub fn conditions(&self) -> &[SelectionCondition] {
        &self.conditions
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn validate_against(&self, g: &Dag) -> Result<()> {
        for (i, cond) in self.conditions.iter().enumerate() {
            cond.validate()
                .map_err(|e| Error::config(format!("selections[{i}]: {e}")))?;
            for t in cond.targets() {
                if g.index_of(t).is_none() {
                    return Err(Error::config(format!(
                        "selections[{i}]: unknown variable '{t}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Probability that one condition admits a sample whose targeted variables
/// take the values `v`: the noise mass of the shifted admissible set.
pub fn selection_probability(cond: &SelectionCondition, v: &[f64]) -> Result<f64> {
    cond.validate()?;
    let m = cond.linear_term(v)?;
    match cond.noise() {
        NoiseSpec::Constant => Ok(if cond.admissible().contains(m) { 1.0 } else { 0.0 }),
        noise => {
            let mut p = 0.0;
            for piece in cond.admissible().pieces() {
                if let AdmissiblePiece::Interval { lo, hi } = *piece {
                    p += noise.interval_probability(lo - m, hi - m)?;
                }
                // Points carry zero mass under a continuous noise density.
            }
            Ok(p.clamp(0.0, 1.0))
        }
    }
}

/// Whether samples are counted or the matrix is an exact population quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleCount {
    Population,
    Samples(usize),
}

/// A labeled symmetric positive-semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    labels: Vec<String>,
    values: DMatrix<f64>,
    sample_count: SampleCount,
}

impl CovarianceMatrix {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>, sample_count: SampleCount) -> Result<Self> {
        let n = labels.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::invalid(format!(
                "covariance is {}x{} but there are {n} labels",
                values.nrows(),
                values.ncols()
            )));
        }
        let scale = values.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
        let tol = 1e-12 * scale;
        for i in 0..n {
            if values[(i, i)] < -tol {
                return Err(Error::Numerical(format!(
                    "negative variance {} for '{}'",
                    values[(i, i)],
                    labels[i]
                )));
            }
            for j in (i + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > tol {
                    return Err(Error::Numerical(format!(
                        "asymmetric covariance at ('{}', '{}')",
                        labels[i], labels[j]
                    )));
                }
            }
        }
        // Exact symmetrization after the tolerance check.
        let sym = 0.5 * (&values + values.transpose());
        Ok(CovarianceMatrix {
            labels,
            values: sym,
            sample_count,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn sample_count(&self) -> SampleCount {
        self.sample_count
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn indices_of(&self, labels: &[String]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.index_of(l)
                    .ok_or_else(|| Error::invalid(format!("unknown variable '{l}'")))
            })
            .collect()
    }

    /// Rectangular submatrix with the given row and column indices.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            self.values[(rows[i], cols[j])]
        })
    }
}

/// A linear-Gaussian SEM: `X = Lambda X + E` over the nodes of a DAG, with
/// diagonal noise covariance Phi and mean vector mu. The sparsity pattern of
/// Lambda is exactly the edge set of the graph.
#[derive(Debug, Clone)]
pub struct LinearSem {
    graph: Dag,
    lambda: DMatrix<f64>,
    phi: DVector<f64>,
    mu: DVector<f64>,
}

impl LinearSem {
    pub fn new(graph: Dag, phi: Vec<f64>, mu: Option<Vec<f64>>) -> Result<Self> {
        let n = graph.node_count();
        if phi.len() != n {
            return Err(Error::invalid(format!(
                "phi has {} entries for {n} nodes",
                phi.len()
            )));
        }
        for (v, &p) in phi.iter().enumerate() {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::invalid(format!(
                    "noise variance of '{}' must be positive, got {p}",
                    graph.name(v)
                )));
            }
        }
        let mu = mu.unwrap_or_else(|| vec![0.0; n]);
        if mu.len() != n {
            return Err(Error::invalid(format!(
                "mu has {} entries for {n} nodes",
                mu.len()
            )));
        }
        if let Some(bad) = mu.iter().find(|m| !m.is_finite()) {
            return Err(Error::invalid(format!("non-finite mean {bad}")));
        }
        let mut lambda = DMatrix::zeros(n, n);
        for e in graph.edges() {
            lambda[(e.to, e.from)] = e.weight;
        }
        Ok(LinearSem {
            graph,
            lambda,
            phi: DVector::from_vec(phi),
            mu: DVector::from_vec(mu),
        })
    }

    /// Unit noise variances and zero means.
    pub fn with_unit_noise(graph: Dag) -> Result<Self> {
        let n = graph.node_count();
        Self::new(graph, vec![1.0; n], None)
    }

    pub fn graph(&self) -> &Dag {
        &self.graph
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn var_count(&self) -> usize {
        self.graph.node_count()
    }
}

/// Population covariance of the SEM: `(I - Lambda)^-1 Phi (I - Lambda)^-T`.
pub fn population_covariance(sem: &LinearSem) -> Result<CovarianceMatrix> {
    let n = sem.var_count();
    let ima = DMatrix::identity(n, n) - sem.lambda();
    let inv = ima.try_inverse().ok_or_else(|| {
        Error::Numerical("(I - Lambda) is numerically singular".to_string())
    })?;
    let phi = DMatrix::from_diagonal(sem.phi());
    let sigma = &inv * phi * inv.transpose();
    let sym = 0.5 * (&sigma + sigma.transpose());
    CovarianceMatrix::new(sem.graph().names(), sym, SampleCount::Population)
}

/// Names given to the response nodes appended after the base variables;
/// `Y1..Yk`, prefixed with underscores if a base node already uses the name.
pub(crate) fn response_names(base_names: &[String], k: usize) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(k);
    for i in 0..k {
        let mut name = format!("Y{}", i + 1);
        while base_names.contains(&name) || names.contains(&name) {
            name.insert(0, '_');
        }
        names.push(name);
    }
    names
}

/// Pre-selection joint covariance of (X, Y): the block matrix
/// `[Sigma, Sigma b'; b Sigma, b Sigma b' + diag(var eps)]` where `b` is the
/// k-by-|X| loading matrix assembled from the selection conditions.
pub fn joint_covariance_with_responses(
    sem: &LinearSem,
    config: &SelectionConfig,
) -> Result<CovarianceMatrix> {
    config.validate_against(sem.graph())?;
    let sigma = population_covariance(sem)?;
    let n = sem.var_count();
    let k = config.len();
    if k == 0 {
        return Ok(sigma);
    }

    let mut beta = DMatrix::zeros(k, n);
    let mut noise_var = DVector::zeros(k);
    for (i, cond) in config.conditions().iter().enumerate() {
        for (t, &c) in cond.targets().iter().zip(cond.coeffs()) {
            let v = sem.graph().index_of(t).expect("validated target");
            beta[(i, v)] = c;
        }
        noise_var[i] = cond.noise().variance()?;
    }

    let sxx = sigma.values();
    let sxy = sxx * beta.transpose();
    let syy = &beta * &sxy + DMatrix::from_diagonal(&noise_var);

    let mut joint = DMatrix::zeros(n + k, n + k);
    joint.view_mut((0, 0), (n, n)).copy_from(sxx);
    joint.view_mut((0, n), (n, k)).copy_from(&sxy);
    joint.view_mut((n, 0), (k, n)).copy_from(&sxy.transpose());
    joint.view_mut((n, n), (k, k)).copy_from(&syy);

    let mut labels = sem.graph().names();
    labels.extend(response_names(&sem.graph().names(), k));
    CovarianceMatrix::new(labels, joint, SampleCount::Population)
}

/// Conditional covariance of the `x_idx` variables given exact values of the
/// `y_idx` variables: the Schur complement
/// `Sigma_XX - Sigma_XY Sigma_YY^-1 Sigma_YX`. For jointly Gaussian
/// variables this does not depend on the conditioning values, which is what
/// makes it the exact post-selection covariance under pointwise selection.
pub fn pointwise_conditional_covariance(
    sigma: &CovarianceMatrix,
    x_idx: &[usize],
    y_idx: &[usize],
) -> Result<CovarianceMatrix> {
    let p = sigma.labels().len();
    for &v in x_idx.iter().chain(y_idx) {
        if v >= p {
            return Err(Error::invalid(format!(
                "index {v} out of range ({p} variables)"
            )));
        }
    }
    if x_idx.iter().any(|v| y_idx.contains(v)) {
        return Err(Error::invalid(
            "conditioning set overlaps the retained variables".to_string(),
        ));
    }
    let labels: Vec<String> = x_idx
        .iter()
        .map(|&v| sigma.labels()[v].clone())
        .collect();
    let sxx = sigma.submatrix(x_idx, x_idx);
    if y_idx.is_empty() {
        return CovarianceMatrix::new(labels, sxx, sigma.sample_count());
    }
    let sxy = sigma.submatrix(x_idx, y_idx);
    let syy = sigma.submatrix(y_idx, y_idx);
    let chol = syy.cholesky().ok_or_else(|| {
        Error::DegenerateSelection(
            "response covariance Sigma_YY is singular; cannot condition on these responses"
                .to_string(),
        )
    })?;
    let solved = chol.solve(&sxy.transpose());
    let cond = &sxx - &sxy * solved;
    let sym = 0.5 * (&cond + cond.transpose());
    CovarianceMatrix::new(labels, sym, sigma.sample_count())
}

// ---------------------------------------------------------------------------
// Model JSON format: the graph format plus phi, mu, and selections.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NoiseJson {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    param: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SelectionJson {
    targets: Vec<String>,
    coeffs: Vec<f64>,
    noise: NoiseJson,
    admissible: Vec<Vec<serde_json::Value>>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    #[serde(flatten)]
    graph: crate::graph::GraphJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    phi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    selections: Vec<SelectionJson>,
}

fn noise_from_json(j: &NoiseJson) -> Result<NoiseSpec> {
    let single = || {
        j.param
            .or_else(|| j.params.as_ref().and_then(|p| p.first().copied()))
            .ok_or_else(|| Error::config(format!("noise '{}' requires a param", j.kind)))
    };
    let spec = match j.kind.as_str() {
        "constant" => NoiseSpec::Constant,
        "gaussian" => NoiseSpec::Gaussian { variance: single()? },
        "logistic" => NoiseSpec::Logistic { scale: single()? },
        other => NoiseSpec::Custom {
            name: other.to_string(),
            params: j
                .params
                .clone()
                .or_else(|| j.param.map(|p| vec![p]))
                .unwrap_or_default(),
        },
    };
    spec.validate()?;
    Ok(spec)
}

fn noise_to_json(spec: &NoiseSpec) -> NoiseJson {
    match spec {
        NoiseSpec::Constant => NoiseJson {
            kind: "constant".into(),
            param: None,
            params: None,
        },
        NoiseSpec::Gaussian { variance } => NoiseJson {
            kind: "gaussian".into(),
            param: Some(*variance),
            params: None,
        },
        NoiseSpec::Logistic { scale } => NoiseJson {
            kind: "logistic".into(),
            param: Some(*scale),
            params: None,
        },
        NoiseSpec::Custom { name, params } => NoiseJson {
            kind: name.clone(),
            param: None,
            params: Some(params.clone()),
        },
    }
}

fn bound_from_json(v: &serde_json::Value, default_inf: f64) -> Result<f64> {
    match v {
        serde_json::Value::Null => Ok(default_inf),
        serde_json::Value::Number(x) => x
            .as_f64()
            .ok_or_else(|| Error::config(format!("bad interval bound {x}"))),
        serde_json::Value::String(s) => match s.as_str() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(Error::config(format!("bad interval bound '{other}'"))),
        },
        other => Err(Error::config(format!("bad interval bound {other}"))),
    }
}

fn bound_to_json(x: f64) -> serde_json::Value {
    if x == f64::INFINITY {
        serde_json::Value::String("inf".into())
    } else if x == f64::NEG_INFINITY {
        serde_json::Value::String("-inf".into())
    } else {
        serde_json::json!(x)
    }
}

fn admissible_from_json(pieces: &[Vec<serde_json::Value>]) -> Result<AdmissibleSet> {
    let mut out = Vec::with_capacity(pieces.len());
    for piece in pieces {
        let tag = piece
            .first()
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::config("admissible piece must start with a tag".to_string()))?;
        match tag {
            "interval" if piece.len() == 3 => out.push(AdmissiblePiece::Interval {
                lo: bound_from_json(&piece[1], f64::NEG_INFINITY)?,
                hi: bound_from_json(&piece[2], f64::INFINITY)?,
            }),
            "point" if piece.len() == 2 => {
                let v = piece[1]
                    .as_f64()
                    .ok_or_else(|| Error::config("admissible point must be a number".to_string()))?;
                out.push(AdmissiblePiece::Point(v));
            }
            other => {
                return Err(Error::config(format!(
                    "admissible piece must be [\"interval\", lo, hi] or [\"point\", v], got '{other}'"
                )))
            }
        }
    }
    AdmissibleSet::new(out)
}

fn admissible_to_json(set: &AdmissibleSet) -> Vec<Vec<serde_json::Value>> {
    set.pieces()
        .iter()
        .map(|p| match *p {
            AdmissiblePiece::Interval { lo, hi } => vec![
                serde_json::Value::String("interval".into()),
                bound_to_json(lo),
                bound_to_json(hi),
            ],
            AdmissiblePiece::Point(v) => {
                vec![serde_json::Value::String("point".into()), serde_json::json!(v)]
            }
        })
        .collect()
}

/// Parses the model JSON format into a SEM plus its selection configuration.
pub fn model_from_json(src: &str) -> Result<(LinearSem, SelectionConfig)> {
    let parsed: ModelJson = serde_json::from_str(src)
        .map_err(|e| Error::parse_at(Some(e.line()), format!("model JSON: {e}")))?;
    let dag = parsed.graph.into_dag(src)?;
    let n = dag.node_count();
    let phi = parsed.phi.unwrap_or_else(|| vec![1.0; n]);
    let sem = LinearSem::new(dag, phi, parsed.mu)?;
    let mut conditions = Vec::with_capacity(parsed.selections.len());
    for (i, s) in parsed.selections.iter().enumerate() {
        let cond = SelectionCondition::new(
            s.targets.clone(),
            s.coeffs.clone(),
            noise_from_json(&s.noise).map_err(|e| Error::config(format!("selections[{i}]: {e}")))?,
            admissible_from_json(&s.admissible)
                .map_err(|e| Error::config(format!("selections[{i}]: {e}")))?,
        );
        cond.validate()
            .map_err(|e| Error::config(format!("selections[{i}]: {e}")))?;
        conditions.push(cond);
    }
    let config = SelectionConfig::new(conditions);
    config.validate_against(sem.graph())?;
    Ok((sem, config))
}

pub fn model_to_json(sem: &LinearSem, config: &SelectionConfig) -> String {
    let model = ModelJson {
        graph: crate::graph::GraphJson::from_dag(sem.graph()),
        phi: Some(sem.phi().iter().copied().collect()),
        mu: if sem.mu().iter().all(|&m| m == 0.0) {
            None
        } else {
            Some(sem.mu().iter().copied().collect())
        },
        selections: config
            .conditions()
            .iter()
            .map(|c| SelectionJson {
                targets: c.targets().to_vec(),
                coeffs: c.coeffs().to_vec(),
                noise: noise_to_json(c.noise()),
                admissible: admissible_to_json(c.admissible()),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&model).expect("model serialization")
}
