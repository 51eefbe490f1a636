//! Rejection sampling from the post-selection distribution, sample
//! covariances, and the CSV data format.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{
    CovarianceMatrix, LinearSem, NoiseSpec, SampleCount, SelectionCondition, SelectionConfig,
};

/// An n-by-p data matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    labels: Vec<String>,
    values: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if labels.len() != values.ncols() {
            return Err(Error::invalid(format!(
                "{} labels for {} columns",
                labels.len(),
                values.ncols()
            )));
        }
        Ok(DataMatrix { labels, values })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn indices_of(&self, labels: &[String]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.index_of(l)
                    .ok_or_else(|| Error::invalid(format!("unknown column '{l}'")))
            })
            .collect()
    }

    /// Copy of the selected columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Result<DataMatrix> {
        for &c in idx {
            if c >= self.n_cols() {
                return Err(Error::invalid(format!(
                    "column index {c} out of range ({} columns)",
                    self.n_cols()
                )));
            }
        }
        let values = DMatrix::from_fn(self.n_rows(), idx.len(), |i, j| self.values[(i, idx[j])]);
        DataMatrix::new(idx.iter().map(|&c| self.labels[c].clone()).collect(), values)
    }

    /// Writes the CSV format: a header of column names, then one sample per
    /// line with shortest round-trip decimal formatting.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.labels)
            .map_err(|e| Error::parse_at(None, format!("csv write: {e}")))?;
        let mut field = String::new();
        for i in 0..self.n_rows() {
            let record: Vec<String> = (0..self.n_cols())
                .map(|j| {
                    field.clear();
                    use std::fmt::Write as _;
                    let _ = write!(field, "{}", self.values[(i, j)]);
                    field.clone()
                })
                .collect();
            wtr.write_record(&record)
                .map_err(|e| Error::parse_at(None, format!("csv write: {e}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<DataMatrix> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let labels: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse_at(Some(1), format!("csv header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        if labels.is_empty() {
            return Err(Error::parse_at(Some(1), "empty csv header".to_string()));
        }
        let mut rows: Vec<f64> = Vec::new();
        let mut n_rows = 0;
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::parse_at(Some(line), format!("csv: {e}")))?;
            if record.len() != labels.len() {
                return Err(Error::parse_at(
                    Some(line),
                    format!("expected {} fields, got {}", labels.len(), record.len()),
                ));
            }
            for field in record.iter() {
                rows.push(field.trim().parse::<f64>().map_err(|_| {
                    Error::parse_at(Some(line), format!("not a number: '{field}'"))
                })?);
            }
            n_rows += 1;
        }
        let values = DMatrix::from_row_slice(n_rows, labels.len(), &rows);
        DataMatrix::new(labels, values)
    }
}

/// Knobs for the rejection sampler.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    /// Minimum tolerated acceptance rate once enough proposals accumulate.
    pub acceptance_floor: f64,
    /// Number of proposals before the floor is enforced.
    pub floor_check_after: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            acceptance_floor: 1e-4,
            floor_check_after: 1_000_000,
        }
    }
}

/// How a condition is applied to a proposal.
enum CondMode {
    /// Draw the noise, realize the response, test membership.
    Realize,
    /// Pure-point admissible set with stochastic noise: accept with
    /// probability proportional to the noise density at the points.
    DensityWeight { points: Vec<f64>, bound: f64 },
}

struct PreparedCondition<'a> {
    cond: &'a SelectionCondition,
    target_idx: Vec<usize>,
    mode: CondMode,
}

fn prepare_conditions<'a>(
    sem: &LinearSem,
    config: &'a SelectionConfig,
) -> Result<Vec<PreparedCondition<'a>>> {
    config.validate_against(sem.graph())?;
    config
        .conditions()
        .iter()
        .enumerate()
        .map(|(i, cond)| {
            let target_idx = sem.graph().indices_of(&cond.targets().to_vec())?;
            let mode = if cond.admissible().has_interval() {
                CondMode::Realize
            } else if cond.noise().is_stochastic() {
                let points = cond.admissible().points();
                let bound = cond.noise().sup_density()? * points.len() as f64;
                CondMode::DensityWeight { points, bound }
            } else {
                // Exact-hit acceptance has measure zero under constant noise.
                return Err(Error::config(format!(
                    "selections[{i}]: point-valued admissible set with constant noise \
                     has measure-zero acceptance"
                )));
            };
            Ok(PreparedCondition {
                cond,
                target_idx,
                mode,
            })
        })
        .collect()
}

pub(crate) fn draw_noise(spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> f64 {
    match spec {
        NoiseSpec::Constant => 0.0,
        NoiseSpec::Gaussian { variance } => {
            let z: f64 = rng.sample(StandardNormal);
            z * variance.sqrt()
        }
        NoiseSpec::Logistic { scale } => {
            // Inverse-CDF transform; resample the measure-zero endpoints.
            let mut u: f64 = rng.gen();
            while u <= 0.0 || u >= 1.0 {
                u = rng.gen();
            }
            scale * (u / (1.0 - u)).ln()
        }
        NoiseSpec::Custom { params, .. } => {
            let rate = params[0];
            Exp::new(rate).expect("validated rate").sample(rng) - 1.0 / rate
        }
    }
}

/// Draws `n` i.i.d. samples from the post-selection distribution: ancestral
/// sampling of the SEM plus rejection on every selection condition.
/// Deterministic for a fixed seed.
pub fn sample(
    sem: &LinearSem,
    config: &SelectionConfig,
    n: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<DataMatrix> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1".to_string()));
    }
    let prepared = prepare_conditions(sem, config)?;
    let p = sem.var_count();
    let topo = sem.graph().topo_order().to_vec();
    let sd: Vec<f64> = sem.phi().iter().map(|v| v.sqrt()).collect();
    let lambda = sem.lambda();
    let mu = sem.mu();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, p);
    let mut x = vec![0.0f64; p];
    let mut accepted = 0usize;
    let mut proposals = 0u64;

    while accepted < n {
        proposals += 1;
        if proposals % 8192 == 0 && proposals >= opts.floor_check_after {
            let rate = accepted as f64 / proposals as f64;
            if rate < opts.acceptance_floor {
                return Err(Error::InfeasibleSelection {
                    proposals,
                    accepted: accepted as u64,
                    rate,
                    floor: opts.acceptance_floor,
                });
            }
        }

        for &v in &topo {
            let z: f64 = rng.sample(StandardNormal);
            let mut val = z * sd[v];
            for &parent in sem.graph().parents_of(v) {
                val += lambda[(v, parent)] * x[parent];
            }
            x[v] = val;
        }
        for v in 0..p {
            x[v] += mu[v];
        }

        let mut keep = true;
        for pc in &prepared {
            let m: f64 = pc
                .target_idx
                .iter()
                .zip(pc.cond.coeffs())
                .map(|(&v, &c)| c * x[v])
                .sum();
            match &pc.mode {
                CondMode::Realize => {
                    let y = m + draw_noise(pc.cond.noise(), &mut rng);
                    if !pc.cond.admissible().contains(y) {
                        keep = false;
                        break;
                    }
                }
                CondMode::DensityWeight { points, bound } => {
                    let mass: f64 = points
                        .iter()
                        .map(|&a| pc.cond.noise().density(a - m).unwrap_or(0.0))
                        .sum();
                    let u: f64 = rng.gen();
                    if u * bound >= mass {
                        keep = false;
                        break;
                    }
                }
            }
        }
        if keep {
            for v in 0..p {
                out[(accepted, v)] = x[v];
            }
            accepted += 1;
        }
    }

    DataMatrix::new(sem.graph().names(), out)
}

/// Sample covariance (denominator n-1) of a data matrix.
pub fn sample_covariance(data: &DataMatrix) -> Result<CovarianceMatrix> {
    let n = data.n_rows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples for a covariance, got {n}"
        )));
    }
    let p = data.n_cols();
    let values = data.values();
    let means: Vec<f64> = (0..p).map(|j| values.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let mut acc = 0.0;
            for r in 0..n {
                acc += (values[(r, i)] - means[i]) * (values[(r, j)] - means[j]);
            }
            let c = acc / (n - 1) as f64;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    CovarianceMatrix::new(data.labels().to_vec(), cov, SampleCount::Samples(n))
}

/// Monte Carlo estimate of the post-selection covariance: the sample
/// covariance of `n` accepted draws.
pub fn mc_post_selection_covariance(
    sem: &LinearSem,
    config: &SelectionConfig,
    n: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<CovarianceMatrix> {
    let data = sample(sem, config, n, seed, opts)?;
    sample_covariance(&data)
}
