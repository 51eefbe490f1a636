//! Synthetic experiment harness: random one-factor models under truncated
//! selection, rank-oracle FCI versus a single-representative baseline, and
//! PAG comparison metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fci::{
    dsep_ci_oracle, fci, CiOracle, FciOptions, MeasurementClustering, RankCiOracle, RankSource,
};
use crate::graph::{augment, Dag, NodeRole};
use crate::model::{
    population_covariance, selection_probability, AdmissibleSet, LinearSem, NoiseSpec,
    SelectionCondition, SelectionConfig,
};
use crate::pag::Pag;
use crate::rank::RankTestSpec;
use crate::sample::{sample, sample_covariance, DataMatrix, SampleOptions};

/// Selection noise choices exposed to experiment configs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SelectionNoise {
    Constant,
    Gaussian { variance: f64 },
    Exponential { rate: f64 },
}

impl SelectionNoise {
    fn to_spec(self) -> NoiseSpec {
        match self {
            SelectionNoise::Constant => NoiseSpec::Constant,
            SelectionNoise::Gaussian { variance } => NoiseSpec::Gaussian { variance },
            SelectionNoise::Exponential { rate } => NoiseSpec::exponential(rate),
        }
    }

    fn is_gaussian_or_constant(self) -> bool {
        !matches!(self, SelectionNoise::Exponential { .. })
    }
}

/// How the truncation window is located on the response's pre-selection
/// marginal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum PercentileMode {
    /// Analytic Gaussian quantiles when the response is Gaussian, empirical
    /// quantiles from pre-selection draws otherwise.
    #[default]
    Auto,
    Analytic,
    Empirical,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub n_latents: usize,
    #[serde(default = "default_avg_degree")]
    pub avg_degree: f64,
    /// Inclusive range for the number of pure measurement children per latent.
    #[serde(default = "default_measurements")]
    pub measurements_per_latent: (usize, usize),
    /// Coefficient magnitudes are uniform on this range, signs fair coin.
    #[serde(default = "default_coeff_range")]
    pub coeff_range: (f64, f64),
    /// Number of selection conditions; defaults to max(1, round(n/5)).
    #[serde(default)]
    pub n_selections: Option<usize>,
    /// Expected number of latent parents per selection; defaults to
    /// ceil(0.3 n).
    #[serde(default)]
    pub selection_parent_count: Option<usize>,
    /// Percentile window (lo, hi) of the response's pre-selection marginal.
    #[serde(default = "default_percentile_window")]
    pub percentile_window: (f64, f64),
    #[serde(default = "default_noise")]
    pub noise: SelectionNoise,
    #[serde(default)]
    pub percentile_mode: PercentileMode,
    /// Accepted samples per dataset.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub max_cond_size: Option<usize>,
    /// Skip sampling and report only the ground-truth PAGs.
    #[serde(default)]
    pub dry_run: bool,
}

fn default_avg_degree() -> f64 {
    2.0
}
fn default_measurements() -> (usize, usize) {
    (2, 3)
}
fn default_coeff_range() -> (f64, f64) {
    (0.5, 2.0)
}
fn default_percentile_window() -> (f64, f64) {
    (40.0, 60.0)
}
fn default_noise() -> SelectionNoise {
    SelectionNoise::Gaussian { variance: 1.0 }
}
fn default_samples() -> usize {
    10_000
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_alpha() -> f64 {
    0.05
}

impl ExperimentConfig {
    pub fn with_defaults(n_latents: usize) -> Self {
        ExperimentConfig {
            n_latents,
            avg_degree: default_avg_degree(),
            measurements_per_latent: default_measurements(),
            coeff_range: default_coeff_range(),
            n_selections: None,
            selection_parent_count: None,
            percentile_window: default_percentile_window(),
            noise: default_noise(),
            percentile_mode: PercentileMode::Auto,
            samples: default_samples(),
            seeds: default_seeds(),
            alpha: default_alpha(),
            max_cond_size: None,
            dry_run: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_latents == 0 {
            return Err(Error::invalid("n_latents must be positive".to_string()));
        }
        if self.avg_degree < 0.0 {
            return Err(Error::invalid("avg_degree must be nonnegative".to_string()));
        }
        let (m_lo, m_hi) = self.measurements_per_latent;
        if m_lo < 2 || m_hi < m_lo {
            return Err(Error::invalid(
                "measurements_per_latent must satisfy 2 <= lo <= hi".to_string(),
            ));
        }
        let (c_lo, c_hi) = self.coeff_range;
        if !(c_lo > 0.0 && c_hi >= c_lo) {
            return Err(Error::invalid(
                "coeff_range must satisfy 0 < lo <= hi".to_string(),
            ));
        }
        let (p_lo, p_hi) = self.percentile_window;
        if !(0.0 < p_lo && p_lo < p_hi && p_hi < 100.0) {
            return Err(Error::invalid(
                "percentile_window must lie strictly inside (0, 100)".to_string(),
            ));
        }
        if self.samples == 0 && !self.dry_run {
            return Err(Error::invalid("samples must be positive".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed required".to_string()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must be in (0, 1)".to_string()));
        }
        self.noise.to_spec().validate()
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(src)
            .map_err(|e| Error::parse_at(Some(e.line()), format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn effective_n_selections(&self) -> usize {
        self.n_selections
            .unwrap_or_else(|| ((self.n_latents as f64 / 5.0).round() as usize).max(1))
    }

    pub fn effective_parent_count(&self) -> usize {
        self.selection_parent_count
            .unwrap_or_else(|| (0.3 * self.n_latents as f64).ceil() as usize)
            .max(1)
    }
}

/// One sampled experiment instance.
#[derive(Debug, Clone)]
pub struct RandomModel {
    pub sem: LinearSem,
    pub config: SelectionConfig,
    pub clustering: MeasurementClustering,
    pub truth: Pag,
}

fn subseed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over seed xor stream-salt.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_coeff(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    let magnitude = rng.gen_range(range.0..=range.1);
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

fn latent_name(i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("L{:0width$}", i + 1)
}

/// Generates a random one-factor model with truncation selection on latent
/// subsets: an Erdos-Renyi DAG over the latents (uniform order, forward
/// edges with probability degree/(n-1)), 2-3 pure measurement children per
/// latent, coefficients from the two-sided uniform range, and per-response
/// admissible windows at the configured percentiles of the pre-selection
/// marginal. Infeasible draws (estimated acceptance below 3e-4) regenerate
/// with an incremented sub-seed, up to 20 retries.
pub fn random_model(cfg: &ExperimentConfig, seed: u64) -> Result<RandomModel> {
    cfg.validate()?;
    let mut last_err = None;
    for attempt in 0..20u64 {
        match try_random_model(cfg, subseed(seed, attempt)) {
            Ok(Some(model)) => return Ok(model),
            Ok(None) => {
                last_err = Some(Error::config(format!(
                    "attempt {attempt}: estimated acceptance below floor"
                )));
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::config("model generation failed".to_string())))
}

fn try_random_model(cfg: &ExperimentConfig, rng_seed: u64) -> Result<Option<RandomModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = cfg.n_latents;

    // Uniform topological order, forward edges with p = degree / (n - 1).
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let edge_p = if n > 1 {
        (cfg.avg_degree / (n - 1) as f64).min(1.0)
    } else {
        0.0
    };
    let mut nodes: Vec<(String, NodeRole)> =
        (0..n).map(|i| (latent_name(i, n), NodeRole::Latent)).collect();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(edge_p) {
                edges.push((order[i], order[j], draw_coeff(&mut rng, cfg.coeff_range)));
            }
        }
    }

    // Pure measurement children.
    let mut clustering_map = BTreeMap::new();
    let (m_lo, m_hi) = cfg.measurements_per_latent;
    for l in 0..n {
        let count = rng.gen_range(m_lo..=m_hi);
        let mut ms = Vec::with_capacity(count);
        for m in 0..count {
            let name = format!("{}_x{}", latent_name(l, n), m + 1);
            let idx = nodes.len();
            nodes.push((name.clone(), NodeRole::Observed));
            edges.push((l, idx, draw_coeff(&mut rng, cfg.coeff_range)));
            ms.push(name);
        }
        clustering_map.insert(latent_name(l, n), ms);
    }
    let graph = Dag::new(nodes, edges)?;
    let sem = LinearSem::with_unit_noise(graph)?;
    let clustering = MeasurementClustering::new(clustering_map)?;

    // Selection conditions on random latent subsets.
    let k = cfg.effective_n_selections();
    let parent_p = (cfg.effective_parent_count() as f64 / n as f64).min(1.0);
    let sigma = population_covariance(&sem)?;
    let noise = cfg.noise.to_spec();
    let mut conditions = Vec::with_capacity(k);
    for _ in 0..k {
        let mut parents: Vec<usize> = Vec::new();
        for _ in 0..100 {
            parents = (0..n).filter(|_| rng.gen_bool(parent_p)).collect();
            if !parents.is_empty() {
                break;
            }
        }
        if parents.is_empty() {
            parents.push(rng.gen_range(0..n));
        }
        let targets: Vec<String> = parents.iter().map(|&l| latent_name(l, n)).collect();
        let coeffs: Vec<f64> = parents
            .iter()
            .map(|_| draw_coeff(&mut rng, cfg.coeff_range))
            .collect();

        let use_analytic = match cfg.percentile_mode {
            PercentileMode::Analytic => true,
            PercentileMode::Empirical => false,
            PercentileMode::Auto => cfg.noise.is_gaussian_or_constant(),
        };
        let (lo, hi) = if use_analytic {
            let mut var_y = noise.variance()?;
            for (i, &pi) in parents.iter().enumerate() {
                for (j, &pj) in parents.iter().enumerate() {
                    var_y += coeffs[i] * coeffs[j] * sigma.values()[(pi, pj)];
                }
            }
            let normal = Normal::new(0.0, var_y.sqrt())
                .map_err(|e| Error::Numerical(format!("response marginal: {e}")))?;
            (
                normal.inverse_cdf(cfg.percentile_window.0 / 100.0),
                normal.inverse_cdf(cfg.percentile_window.1 / 100.0),
            )
        } else {
            empirical_window(
                &sem,
                &parents,
                &coeffs,
                &noise,
                cfg.percentile_window,
                subseed(rng_seed, 0xEC),
            )?
        };
        conditions.push(SelectionCondition::new(
            targets,
            coeffs,
            noise.clone(),
            AdmissibleSet::interval(lo, hi)?,
        ));
    }
    let config = SelectionConfig::new(conditions);

    // Quick feasibility probe: mean over pre-selection draws of the product
    // of per-condition selection probabilities.
    if !config.is_empty() {
        let probe = sample(&sem, &SelectionConfig::empty(), 2000, subseed(rng_seed, 0xFE), SampleOptions::default())?;
        let mut total = 0.0;
        for row in 0..probe.n_rows() {
            let mut p = 1.0;
            for cond in config.conditions() {
                let v: Vec<f64> = cond
                    .targets()
                    .iter()
                    .map(|t| probe.values()[(row, probe.index_of(t).unwrap())])
                    .collect();
                p *= selection_probability(cond, &v)?;
            }
            total += p;
        }
        let estimated = total / probe.n_rows() as f64;
        if estimated < 3e-4 {
            return Ok(None);
        }
    }

    let aug = augment(sem.graph(), &config)?;
    let latents = clustering.latents();
    let oracle = dsep_ci_oracle(&aug, &latents)?;
    let truth = fci(
        &oracle,
        latents,
        &FciOptions {
            max_cond_size: cfg.max_cond_size,
            use_possible_dsep: true,
        },
    )?;

    Ok(Some(RandomModel {
        sem,
        config,
        clustering,
        truth,
    }))
}

/// Empirical percentile window from pre-selection draws of the response.
fn empirical_window(
    sem: &LinearSem,
    parents: &[usize],
    coeffs: &[f64],
    noise: &NoiseSpec,
    window: (f64, f64),
    seed: u64,
) -> Result<(f64, f64)> {
    const DRAWS: usize = 100_000;
    let data = sample(sem, &SelectionConfig::empty(), DRAWS, seed, SampleOptions::default())?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(subseed(seed, 1));
    let mut ys: Vec<f64> = (0..DRAWS)
        .map(|row| {
            let mut y = crate::sample::draw_noise(noise, &mut noise_rng);
            for (&p, &c) in parents.iter().zip(coeffs) {
                y += c * data.values()[(row, p)];
            }
            y
        })
        .collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |pct: f64| {
        let idx = ((pct / 100.0) * (DRAWS - 1) as f64).round() as usize;
        ys[idx]
    };
    Ok((at(window.0), at(window.1)))
}

/// Count of ordered endpoint-mark disagreements between two PAGs on the same
/// labels.
pub fn edge_mark_diff(p1: &Pag, p2: &Pag) -> Result<usize> {
    if p1.labels() != p2.labels() {
        return Err(Error::invalid(
            "edge_mark_diff requires identical labels".to_string(),
        ));
    }
    let n = p1.var_count();
    let mut diff = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && p1.mark(i, j) != p2.mark(i, j) {
                diff += 1;
            }
        }
    }
    Ok(diff)
}

/// Structural Hamming distance of the skeletons: unordered pairs whose
/// adjacency differs.
pub fn skeleton_shd(p1: &Pag, p2: &Pag) -> Result<usize> {
    if p1.labels() != p2.labels() {
        return Err(Error::invalid(
            "skeleton_shd requires identical labels".to_string(),
        ));
    }
    let n = p1.var_count();
    let mut diff = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            if p1.adjacent(i, j) != p2.adjacent(i, j) {
                diff += 1;
            }
        }
    }
    Ok(diff)
}

/// Fisher-z partial-correlation CI oracle over data columns.
pub struct FisherZOracle {
    corr: DMatrix<f64>,
    n: usize,
    threshold: f64,
}

impl FisherZOracle {
    pub fn new(data: &DataMatrix, columns: &[usize], alpha: f64) -> Result<Self> {
        let cov = sample_covariance(&data.select_columns(columns)?)?;
        let p = columns.len();
        let mut corr = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                let denom = (cov.values()[(i, i)] * cov.values()[(j, j)]).sqrt();
                corr[(i, j)] = if denom > 0.0 {
                    cov.values()[(i, j)] / denom
                } else {
                    0.0
                };
            }
        }
        let normal = Normal::new(0.0, 1.0).unwrap();
        Ok(FisherZOracle {
            corr,
            n: data.n_rows(),
            threshold: normal.inverse_cdf(1.0 - alpha / 2.0),
        })
    }
}

impl CiOracle for FisherZOracle {
    fn independent(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<bool> {
        if a.len() != 1 || b.len() != 1 {
            return Err(Error::invalid(
                "partial-correlation oracle expects singleton queries".to_string(),
            ));
        }
        if self.n <= c.len() + 3 {
            return Err(Error::invalid(format!(
                "too few samples ({}) for conditioning set of size {}",
                self.n,
                c.len()
            )));
        }
        let mut idx = vec![a[0], b[0]];
        idx.extend_from_slice(c);
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.corr[(idx[i], idx[j])]);
        let precision = sub.try_inverse().ok_or_else(|| {
            Error::Numerical("singular correlation submatrix in partial correlation".to_string())
        })?;
        let r = -precision[(0, 1)] / (precision[(0, 0)] * precision[(1, 1)]).sqrt();
        let r = r.clamp(-0.999_999_999, 0.999_999_999);
        let z = 0.5 * ((1.0 + r) / (1.0 - r)).ln();
        let stat = ((self.n - c.len()) as f64 - 3.0).sqrt() * z.abs();
        Ok(stat <= self.threshold)
    }
}

/// Baseline: pick one random measurement as the representative of each
/// latent (seeded) and run FCI with the partial-correlation oracle over the
/// representatives. Output labels are the latent names.
pub fn representative_baseline(
    data: &DataMatrix,
    clustering: &MeasurementClustering,
    alpha: f64,
    seed: u64,
    opts: &FciOptions,
) -> Result<Pag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = Vec::with_capacity(clustering.latent_count());
    for l in 0..clustering.latent_count() {
        let ms = clustering.measurements_of(l);
        let pick = &ms[rng.gen_range(0..ms.len())];
        columns.push(
            data.index_of(pick)
                .ok_or_else(|| Error::invalid(format!("unknown column '{pick}'")))?,
        );
    }
    let oracle = FisherZOracle::new(data, &columns, alpha)?;
    fci(&oracle, clustering.latents(), opts)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedRow {
    pub seed: u64,
    pub method: String,
    pub edge_mark_diff: usize,
    pub skeleton_shd: usize,
    pub n_accepted_samples: usize,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub n_seeds: usize,
    pub mean_edge_mark_diff: f64,
    pub sd_edge_mark_diff: f64,
    pub mean_skeleton_shd: f64,
    pub sd_skeleton_shd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruthEntry {
    pub seed: u64,
    pub labels: Vec<String>,
    pub marks: Vec<Vec<u8>>,
}

/// Full experiment report. File outputs are byte-reproducible for a fixed
/// config: wall-clock timings are logged, not serialized (the wall_time_ms
/// column is kept in the schema but zeroed).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub config: ExperimentConfig,
    pub rows: Vec<SeedRow>,
    pub summary: Vec<MethodSummary>,
    pub failures: Vec<SeedFailure>,
    pub ground_truth: Vec<GroundTruthEntry>,
}

fn truth_entry(seed: u64, pag: &Pag) -> GroundTruthEntry {
    let n = pag.var_count();
    GroundTruthEntry {
        seed,
        labels: pag.labels().to_vec(),
        marks: (0..n)
            .map(|i| (0..n).map(|j| pag.mark(i, j) as u8).collect())
            .collect(),
    }
}

const METHOD_RANK: &str = "rank_fci";
const METHOD_BASELINE: &str = "representative_fci";

/// Runs the full protocol: per seed, generate a model, draw selected data,
/// run rank-oracle FCI and the representative baseline, and score both
/// against the ground-truth PAG. Per-seed failures are recorded, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut ground_truth = Vec::new();
    let opts = FciOptions {
        max_cond_size: cfg.max_cond_size,
        use_possible_dsep: true,
    };

    for &seed in &cfg.seeds {
        let started = Instant::now();
        match run_seed(cfg, seed, &opts) {
            Ok((truth, seed_rows)) => {
                ground_truth.push(truth_entry(seed, &truth));
                rows.extend(seed_rows);
            }
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
        log::info!("seed {seed}: {} ms", started.elapsed().as_millis());
    }

    rows.sort_by(|a, b| (a.seed, &a.method).cmp(&(b.seed, &b.method)));
    let mut summary = Vec::new();
    for method in [METHOD_RANK, METHOD_BASELINE] {
        let selected: Vec<&SeedRow> = rows.iter().filter(|r| r.method == method).collect();
        if selected.is_empty() {
            continue;
        }
        let mean_sd = |get: &dyn Fn(&SeedRow) -> f64| {
            let n = selected.len() as f64;
            let mean = selected.iter().map(|r| get(r)).sum::<f64>() / n;
            let var = if selected.len() > 1 {
                selected.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let (mean_diff, sd_diff) = mean_sd(&|r| r.edge_mark_diff as f64);
        let (mean_shd, sd_shd) = mean_sd(&|r| r.skeleton_shd as f64);
        summary.push(MethodSummary {
            method: method.to_string(),
            n_seeds: selected.len(),
            mean_edge_mark_diff: mean_diff,
            sd_edge_mark_diff: sd_diff,
            mean_skeleton_shd: mean_shd,
            sd_skeleton_shd: sd_shd,
        });
    }

    Ok(Report {
        config: cfg.clone(),
        rows,
        summary,
        failures,
        ground_truth,
    })
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: &FciOptions) -> Result<(Pag, Vec<SeedRow>)> {
    let model = random_model(cfg, seed)?;
    if cfg.dry_run {
        return Ok((model.truth, Vec::new()));
    }
    let data = sample(
        &model.sem,
        &model.config,
        cfg.samples,
        subseed(seed, 2),
        SampleOptions::default(),
    )?;

    let rank_oracle = RankCiOracle::new(
        RankSource::Data(&data),
        &model.clustering,
        RankTestSpec::cca(cfg.alpha),
    );
    let rank_pag = fci(&rank_oracle, model.clustering.latents(), opts)?;
    let baseline_pag =
        representative_baseline(&data, &model.clustering, cfg.alpha, subseed(seed, 3), opts)?;

    let rows = vec![
        SeedRow {
            seed,
            method: METHOD_RANK.to_string(),
            edge_mark_diff: edge_mark_diff(&rank_pag, &model.truth)?,
            skeleton_shd: skeleton_shd(&rank_pag, &model.truth)?,
            n_accepted_samples: data.n_rows(),
            wall_time_ms: 0,
        },
        SeedRow {
            seed,
            method: METHOD_BASELINE.to_string(),
            edge_mark_diff: edge_mark_diff(&baseline_pag, &model.truth)?,
            skeleton_shd: skeleton_shd(&baseline_pag, &model.truth)?,
            n_accepted_samples: data.n_rows(),
            wall_time_ms: 0,
        },
    ];
    Ok((model.truth, rows))
}

/// Writes `report.json` and `summary.csv` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).expect("report serialization");
    std::fs::write(dir.join("report.json"), json + "\n")?;

    let mut csv = String::from("seed,method,edge_mark_diff,skeleton_shd,n_accepted_samples,wall_time_ms\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seed, r.method, r.edge_mark_diff, r.skeleton_shd, r.n_accepted_samples, r.wall_time_ms
        ));
    }
    let mut f = std::fs::File::create(dir.join("summary.csv"))?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pag::Mark;

    #[test]
    fn metric_examples() {
        let p1 = Pag::empty(vec!["A".into(), "B".into()]);
        let mut p2 = p1.clone();
        assert_eq!(edge_mark_diff(&p1, &p2).unwrap(), 0);
        assert_eq!(skeleton_shd(&p1, &p2).unwrap(), 0);

        // A o-o B versus A -> B: both endpoint marks differ.
        let mut c1 = p1.clone();
        c1.set_mark(0, 1, Mark::Circle);
        c1.set_mark(1, 0, Mark::Circle);
        let mut c2 = p1.clone();
        c2.set_mark(0, 1, Mark::Arrow);
        c2.set_mark(1, 0, Mark::Tail);
        assert_eq!(edge_mark_diff(&c1, &c2).unwrap(), 2);
        assert_eq!(skeleton_shd(&c1, &c2).unwrap(), 0);

        // One extra edge.
        p2.set_mark(0, 1, Mark::Circle);
        p2.set_mark(1, 0, Mark::Circle);
        assert_eq!(skeleton_shd(&p1, &p2).unwrap(), 1);
        assert_eq!(edge_mark_diff(&p1, &p2).unwrap(), 2);

        let other = Pag::empty(vec!["A".into(), "C".into()]);
        assert!(edge_mark_diff(&p1, &other).is_err());
    }

    fn random_pag(rng: &mut ChaCha8Rng, labels: &[String]) -> Pag {
        let n = labels.len();
        let mut pag = Pag::empty(labels.to_vec());
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.6) {
                    let pick = |r: &mut ChaCha8Rng| match r.gen_range(0..3) {
                        0 => Mark::Circle,
                        1 => Mark::Arrow,
                        _ => Mark::Tail,
                    };
                    let mi = pick(rng);
                    let mj = pick(rng);
                    pag.set_mark(i, j, mj);
                    pag.set_mark(j, i, mi);
                }
            }
        }
        pag
    }

    #[test]
    fn metrics_are_pseudometrics() {
        let labels: Vec<String> = (0..5).map(|i| format!("v{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let x = random_pag(&mut rng, &labels);
            let y = random_pag(&mut rng, &labels);
            let z = random_pag(&mut rng, &labels);
            for metric in [edge_mark_diff, skeleton_shd] {
                assert_eq!(metric(&x, &x).unwrap(), 0);
                assert_eq!(metric(&x, &y).unwrap(), metric(&y, &x).unwrap());
                assert!(
                    metric(&x, &z).unwrap() <= metric(&x, &y).unwrap() + metric(&y, &z).unwrap()
                );
            }
            // An adjacency disagreement forces two mark disagreements.
            assert!(edge_mark_diff(&x, &y).unwrap() >= 2 * skeleton_shd(&x, &y).unwrap());
        }
    }

    #[test]
    fn random_model_is_deterministic() {
        let cfg = ExperimentConfig::with_defaults(5);
        let m1 = random_model(&cfg, 3).unwrap();
        let m2 = random_model(&cfg, 3).unwrap();
        assert_eq!(
            crate::model::model_to_json(&m1.sem, &m1.config),
            crate::model::model_to_json(&m2.sem, &m2.config)
        );
        assert_eq!(m1.truth, m2.truth);
        let m3 = random_model(&cfg, 4).unwrap();
        assert_ne!(
            crate::model::model_to_json(&m1.sem, &m1.config),
            crate::model::model_to_json(&m3.sem, &m3.config)
        );
    }

    #[test]
    fn random_model_respects_degree_zero() {
        let mut cfg = ExperimentConfig::with_defaults(4);
        cfg.avg_degree = 0.0;
        let model = random_model(&cfg, 1).unwrap();
        // No latent-latent edges; the ground truth has no latent adjacency
        // unless selection introduces one.
        let latents: Vec<usize> = model
            .sem
            .graph()
            .indices_with_role(NodeRole::Latent);
        for e in model.sem.graph().edges() {
            assert!(
                !(latents.contains(&e.from) && latents.contains(&e.to)),
                "unexpected latent edge"
            );
        }
    }

    #[test]
    fn selection_counts_follow_defaults() {
        let cfg = ExperimentConfig::with_defaults(5);
        assert_eq!(cfg.effective_n_selections(), 1);
        assert_eq!(cfg.effective_parent_count(), 2);
        let cfg20 = ExperimentConfig::with_defaults(20);
        assert_eq!(cfg20.effective_n_selections(), 4);
        assert_eq!(cfg20.effective_parent_count(), 6);
        let model = random_model(&cfg, 0).unwrap();
        assert_eq!(model.config.len(), 1);
    }

    #[test]
    fn baseline_equals_rank_method_without_selection_or_confounding() {
        // Two-latent chain, no selection: both methods recover the truth at
        // a comfortable sample size.
        let mut cfg = ExperimentConfig::with_defaults(2);
        cfg.n_selections = Some(0);
        cfg.samples = 30_000;
        let model = random_model(&cfg, 11).unwrap();
        assert!(model.config.is_empty());
        let data = sample(
            &model.sem,
            &model.config,
            cfg.samples,
            77,
            SampleOptions::default(),
        )
        .unwrap();
        let opts = FciOptions::default();
        let rank_oracle = RankCiOracle::new(
            RankSource::Data(&data),
            &model.clustering,
            RankTestSpec::cca(cfg.alpha),
        );
        let rank_pag = fci(&rank_oracle, model.clustering.latents(), &opts).unwrap();
        let base_pag = representative_baseline(&data, &model.clustering, cfg.alpha, 5, &opts).unwrap();
        assert_eq!(edge_mark_diff(&rank_pag, &model.truth).unwrap(), 0);
        assert_eq!(edge_mark_diff(&base_pag, &model.truth).unwrap(), 0);
    }

    #[test]
    fn one_latent_model_gives_single_node_pag() {
        let mut cfg = ExperimentConfig::with_defaults(1);
        cfg.n_selections = Some(0);
        cfg.samples = 500;
        let model = random_model(&cfg, 2).unwrap();
        assert_eq!(model.truth.var_count(), 1);
        assert_eq!(model.truth.edge_count(), 0);
    }

    #[test]
    fn dry_run_reports_ground_truth_only() {
        let mut cfg = ExperimentConfig::with_defaults(3);
        cfg.dry_run = true;
        cfg.seeds = vec![0, 1];
        let report = run_experiment(&cfg).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.ground_truth.len(), 2);
        assert!(report.failures.is_empty());
    }

    #[test]
    fn reports_are_reproducible() {
        let mut cfg = ExperimentConfig::with_defaults(3);
        cfg.samples = 2000;
        cfg.seeds = vec![0, 1];
        let r1 = run_experiment(&cfg).unwrap();
        let r2 = run_experiment(&cfg).unwrap();
        assert_eq!(r1, r2);
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_report(&r1, dir1.path()).unwrap();
        write_report(&r2, dir2.path()).unwrap();
        for file in ["report.json", "summary.csv"] {
            let a = std::fs::read(dir1.path().join(file)).unwrap();
            let b = std::fs::read(dir2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs");
        }
    }

    #[test]
    fn exponential_noise_config_runs() {
        let mut cfg = ExperimentConfig::with_defaults(3);
        cfg.noise = SelectionNoise::Exponential { rate: 1.0 };
        cfg.samples = 1500;
        cfg.seeds = vec![0];
        let report = run_experiment(&cfg).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn config_json_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"n_latents": 5}"#).unwrap();
        assert_eq!(cfg.avg_degree, 2.0);
        assert_eq!(cfg.percentile_window, (40.0, 60.0));
        assert_eq!(cfg.noise, SelectionNoise::Gaussian { variance: 1.0 });
        assert!(ExperimentConfig::from_json(r#"{"n_latents": 0}"#).is_err());
    }
}
