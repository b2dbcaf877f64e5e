//! Simulation harness: smooth low-rank truth, Gaussian noise, random and
//! structured (device non-wear) missingness, loss metrics, and a replicated
//! study driver comparing CV-tuned, oracle-tuned and unpenalized fits.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposer::{fit_missing_full, FitOptions, WarmStart};
use crate::error::{Error, Result};
use crate::io::{LongRecord, NormalizationInfo};
use crate::linalg::{orthonormality_defect, orthonormalize, symmetric_function};
use crate::tensor::{MaskedTensor, Tensor3};
use crate::tuning::{grid_search, make_folds, GridSpec};

/// Ground-truth factors and the score distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub l: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Mean of `vec(G_i)` in `g_11, g_12, ..., g_{r1 r2}` order.
    pub core_mean: DVector<f64>,
    pub core_covariance: DMatrix<f64>,
}

impl Truth {
    pub fn ranks(&self) -> (usize, usize) {
        (self.l.ncols(), self.r.ncols())
    }
}

/// Smooth orthonormal temporal factor on an `a`-point daily grid.
///
/// Column 1 is a level shift, columns 2 and 3 a 24-hour rhythm with some
/// 12-hour content, so the truth is smooth without being an exact
/// eigenvector set of the roughness penalty.
pub fn default_temporal_factor(a: usize, r1: usize) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(a, r1, |t, k| {
        let w = 2.0 * PI * (t as f64 - 3.0 * a as f64 / 24.0) / a as f64;
        match k {
            0 => 1.0 + 0.15 * w.cos(),
            1 => w.cos() + 0.35 * (2.0 * w).cos(),
            2 => w.sin() - 0.3 * (2.0 * w).sin(),
            _ => {
                let h = k.div_ceil(2) as f64;
                if k % 2 == 1 {
                    (h * w).cos()
                } else {
                    (h * w).sin()
                }
            }
        }
    });
    orthonormalize(&raw)
}

/// Orthonormal measure loadings; for three measures and two components
/// these are a common "pressure" and a "pressure vs heart rate" contrast.
pub fn default_measure_factor(b: usize, r2: usize) -> DMatrix<f64> {
    let raw = if b == 3 && r2 <= 2 {
        DMatrix::from_row_slice(3, 2, &[0.6, 0.4, 0.6, -0.4, 0.5, 0.8])
            .columns(0, r2)
            .into_owned()
    } else {
        DMatrix::from_fn(b, r2, |j, l| {
            (PI * (j as f64 + 0.5) * l as f64 / b as f64).cos()
                + if l == 0 { 0.0 } else { 0.1 * j as f64 }
        })
    };
    orthonormalize(&raw)
}

/// Default generator: distinct score variances (needed for the rotation
/// to be identifiable) and a few nonzero score means.
pub fn default_truth(a: usize, b: usize, r1: usize, r2: usize) -> Truth {
    let (sds, means) = if (r1, r2) == (3, 2) {
        (
            vec![6.0, 3.0, 4.0, 2.0, 2.5, 1.5],
            vec![0.0, 0.0, 2.0, 1.0, 0.0, 0.5],
        )
    } else {
        let sds = (0..r1 * r2)
            .map(|q| 6.0 / (1.0 + (q / r2) as f64) / (1.0 + 0.5 * (q % r2) as f64))
            .collect();
        (sds, vec![0.0; r1 * r2])
    };
    Truth {
        l: default_temporal_factor(a, r1),
        r: default_measure_factor(b, r2),
        core_mean: DVector::from_vec(means),
        core_covariance: DMatrix::from_diagonal(&DVector::from_iterator(
            r1 * r2,
            sds.iter().map(|s: &f64| s * s),
        )),
    }
}

fn check_truth(truth: &Truth) -> Result<()> {
    let (r1, r2) = truth.ranks();
    if orthonormality_defect(&truth.l) > 1e-8 || orthonormality_defect(&truth.r) > 1e-8 {
        return Err(Error::InvalidParameter(
            "truth factors must have orthonormal columns".into(),
        ));
    }
    let q = r1 * r2;
    if truth.core_mean.len() != q || truth.core_covariance.shape() != (q, q) {
        return Err(Error::ShapeMismatch(format!(
            "score mean/covariance must have size {q}"
        )));
    }
    Ok(())
}

/// `M_i = L G_i R^T` with `vec(G_i)` drawn i.i.d. from the configured
/// normal distribution.
pub fn generate_truth(truth: &Truth, n: usize, seed: u64) -> Result<Tensor3> {
    check_truth(truth)?;
    let (r1, r2) = truth.ranks();
    let cov = &truth.core_covariance;
    if (cov - cov.transpose()).norm() > 1e-10 * cov.norm().max(1.0) {
        return Err(Error::InvalidParameter(
            "score covariance must be symmetric".into(),
        ));
    }
    let min_eig = cov.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-10 * cov.norm().max(1.0) {
        return Err(Error::InvalidParameter(
            "score covariance must be positive semidefinite".into(),
        ));
    }
    let root = symmetric_function(cov, |v| v.max(0.0).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slices: Vec<DMatrix<f64>> = (0..n)
        .map(|_| {
            let z = DVector::from_fn(r1 * r2, |_, _| StandardNormal.sample(&mut rng));
            let g = &truth.core_mean + &root * z;
            let g = DMatrix::from_fn(r1, r2, |k, l| g[k * r2 + l]);
            &truth.l * g * truth.r.transpose()
        })
        .collect();
    if slices.is_empty() {
        return Err(Error::EmptyData);
    }
    Tensor3::from_slices(&slices)
}

/// Adds i.i.d. `N(0, sigma_sq)` noise to every entry.
pub fn add_noise(t: &Tensor3, sigma_sq: f64, seed: u64) -> Result<Tensor3> {
    if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise variance {sigma_sq}"
        )));
    }
    let sd = sigma_sq.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = t.clone();
    for v in out.as_mut_slice() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += sd * e;
    }
    Ok(out)
}

const MAX_MASK_ATTEMPTS: usize = 100;

/// Removes exactly `round(rate * a * b * n)` entries uniformly at random,
/// redrawing if a time row or measure column ends up empty.
pub fn apply_random_missing(t: &Tensor3, rate: f64, seed: u64) -> Result<MaskedTensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "missing rate {rate} outside [0, 1)"
        )));
    }
    let len = t.dims().len();
    let count = (rate * len as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_MASK_ATTEMPTS {
        let mut mask = vec![true; len];
        for idx in index::sample(&mut rng, len, count) {
            mask[idx] = false;
        }
        let m = MaskedTensor::new(t.clone(), mask)?;
        let (rows, cols) = m.empty_fibers();
        if rows.is_empty() && cols.is_empty() {
            return Ok(m);
        }
    }
    Err(Error::UnidentifiableFiber(format!(
        "missing rate {rate} kept emptying a fiber after {MAX_MASK_ATTEMPTS} attempts"
    )))
}

/// Per subject, draws a count uniformly from `0..=max_missing_hours`, picks
/// that many time points, and masks every measure there.
pub fn apply_structured_missing(
    t: &Tensor3,
    max_missing_hours: usize,
    seed: u64,
) -> Result<MaskedTensor> {
    let d = t.dims();
    if max_missing_hours >= d.a {
        return Err(Error::InvalidParameter(format!(
            "max_missing_hours {max_missing_hours} must be below the grid length {}",
            d.a
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![true; d.len()];
    for i in 0..d.n {
        let h = rng.random_range(0..=max_missing_hours);
        for tt in index::sample(&mut rng, d.a, h) {
            for m in 0..d.b {
                mask[d.index(tt, m, i)] = false;
            }
        }
    }
    MaskedTensor::new(t.clone(), mask)
}

/// Mean squared error over all entries, observed or not.
pub fn loss_reconstruction(truth: &Tensor3, fitted: &Tensor3) -> Result<f64> {
    if truth.dims() != fitted.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            truth.dims(),
            fitted.dims()
        )));
    }
    if truth.dims().is_empty() {
        return Err(Error::EmptyData);
    }
    let ss: f64 = truth
        .as_slice()
        .iter()
        .zip(fitted.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(ss / truth.dims().len() as f64)
}

/// Chordal distance `||P - P_hat||_F / sqrt(2)` between column spaces.
pub fn loss_subspace(l_true: &DMatrix<f64>, l_hat: &DMatrix<f64>) -> Result<f64> {
    if l_true.shape() != l_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "subspaces of shape {:?} and {:?}",
            l_true.shape(),
            l_hat.shape()
        )));
    }
    for m in [l_true, l_hat] {
        if orthonormality_defect(m) > 1e-8 {
            return Err(Error::InvalidParameter(
                "bases must have orthonormal columns".into(),
            ));
        }
    }
    let p = l_true * l_true.transpose();
    let q = l_hat * l_hat.transpose();
    Ok((p - q).norm() / 2f64.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Missingness {
    Random { rate: f64 },
    Structured { max_missing_hours: usize },
}

impl Missingness {
    pub fn apply(&self, t: &Tensor3, seed: u64) -> Result<MaskedTensor> {
        match *self {
            Missingness::Random { rate } => apply_random_missing(t, rate, seed),
            Missingness::Structured { max_missing_hours } => {
                apply_structured_missing(t, max_missing_hours, seed)
            }
        }
    }

    fn label(&self) -> String {
        match self {
            Missingness::Random { rate } => format!("random={rate}"),
            Missingness::Structured { max_missing_hours } => {
                format!("structured={max_missing_hours}")
            }
        }
    }
}

/// Fitting strategies compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// True ranks, lambda chosen by cross-validation.
    Cv,
    /// True ranks, lambda minimizing the true reconstruction loss.
    Oracle,
    /// True ranks, no smoothing.
    Lambda0,
    /// Ranks and lambda chosen by cross-validation.
    CvFlexible,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Cv => "cv",
            Method::Oracle => "oracle",
            Method::Lambda0 => "lambda0",
            Method::CvFlexible => "cv_flexible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub a: usize,
    pub b: usize,
    pub n: usize,
    pub truth_ranks: (usize, usize),
    /// Multiple of `noise_base_variance`.
    pub noise_level: f64,
    pub noise_base_variance: f64,
    pub missing: Missingness,
    pub replications: usize,
    pub seed: u64,
    /// Overrides the default score mean (length `r1 * r2`).
    pub core_mean: Option<Vec<f64>>,
    /// Overrides the default score covariance (`r1 r2 x r1 r2`).
    pub core_covariance: Option<Vec<Vec<f64>>>,
    pub methods: Vec<Method>,
    pub k: usize,
    /// Lambda search; rank ranges are ignored for the fixed-rank methods.
    pub grid: GridSpec,
    pub flexible_r1_range: (usize, usize),
    pub flexible_r2_range: (usize, usize),
    pub fit: FitOptions,
    /// Fill the `seconds` column. Off by default so output is reproducible.
    pub record_timing: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            a: 24,
            b: 3,
            n: 200,
            truth_ranks: (3, 2),
            noise_level: 1.0,
            noise_base_variance: 1.0,
            missing: Missingness::Random { rate: 0.2 },
            replications: 20,
            seed: 7,
            core_mean: None,
            core_covariance: None,
            methods: vec![
                Method::Cv,
                Method::Oracle,
                Method::Lambda0,
                Method::CvFlexible,
            ],
            k: 5,
            grid: GridSpec::default(),
            flexible_r1_range: (2, 6),
            flexible_r2_range: (2, 3),
            fit: FitOptions::default(),
            record_timing: false,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let (r1, r2) = self.truth_ranks;
        if self.a < 3 || self.b == 0 || self.n == 0 {
            return Err(Error::InvalidParameter("dimensions too small".into()));
        }
        if r1 == 0 || r1 > self.a || r2 == 0 || r2 > self.b {
            return Err(Error::InvalidParameter("truth ranks out of range".into()));
        }
        if !(self.noise_level >= 0.0) || !(self.noise_base_variance >= 0.0) {
            return Err(Error::InvalidParameter("noise must be non-negative".into()));
        }
        match self.missing {
            Missingness::Random { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Error::InvalidParameter(format!("missing rate {rate}")))
            }
            Missingness::Structured { max_missing_hours } if max_missing_hours >= self.a => {
                return Err(Error::InvalidParameter(
                    "max_missing_hours must be below a".into(),
                ))
            }
            _ => {}
        }
        if self.replications == 0 {
            return Err(Error::InvalidParameter(
                "need at least one replication".into(),
            ));
        }
        Ok(())
    }

    pub fn truth(&self) -> Result<Truth> {
        let (r1, r2) = self.truth_ranks;
        let mut t = default_truth(self.a, self.b, r1, r2);
        if let Some(mu) = &self.core_mean {
            t.core_mean = DVector::from_column_slice(mu);
        }
        if let Some(cov) = &self.core_covariance {
            t.core_covariance =
                crate::serde_matrix::from_rows(cov).map_err(Error::InvalidParameter)?;
        }
        check_truth(&t)?;
        Ok(t)
    }

    pub fn setting_label(&self) -> String {
        format!(
            "n={},noise={},{}",
            self.n,
            self.noise_level,
            self.missing.label()
        )
    }
}

/// Deterministic per-replication seed stream (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub replication: usize,
    pub setting: String,
    pub method: String,
    pub loss_m: Option<f64>,
    pub loss_l: Option<f64>,
    pub r1_hat: Option<usize>,
    pub r2_hat: Option<usize>,
    pub lambda_hat: Option<f64>,
    pub seconds: Option<f64>,
    /// Worst relative inner-objective increase over every fit behind this
    /// row. Diagnostic only; not part of the CSV.
    #[serde(default)]
    pub max_objective_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub setting: String,
    pub method: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub rows: Vec<SimulationRow>,
    /// Replications whose data generation or fit failed.
    pub failures: Vec<(usize, String)>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl SimulationResult {
    pub fn losses(&self, method: Method) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.method == method.as_str())
            .map(|r| r.loss_m)
            .collect()
    }

    pub fn row(&self, replication: usize, method: Method) -> Option<&SimulationRow> {
        self.rows
            .iter()
            .find(|r| r.replication == replication && r.method == method.as_str())
    }

    /// Five-number summaries of `loss_M` per setting and method.
    pub fn summary(&self) -> Vec<LossSummary> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.setting.clone(), r.method.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .filter_map(|(setting, method)| {
                let mut v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.setting == setting && r.method == method)
                    .filter_map(|r| r.loss_m)
                    .collect();
                if v.is_empty() {
                    return None;
                }
                v.sort_by(f64::total_cmp);
                Some(LossSummary {
                    setting,
                    method,
                    count: v.len(),
                    min: v[0],
                    q1: quantile(&v, 0.25),
                    median: quantile(&v, 0.5),
                    q3: quantile(&v, 0.75),
                    max: v[v.len() - 1],
                })
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "replication",
            "setting",
            "method",
            "loss_M",
            "loss_L",
            "r1_hat",
            "r2_hat",
            "lambda_hat",
            "seconds",
        ])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.replication.to_string(),
                r.setting.clone(),
                r.method.clone(),
                f(r.loss_m),
                f(r.loss_l),
                u(r.r1_hat),
                u(r.r2_hat),
                f(r.lambda_hat),
                f(r.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One corrupted data set with its noiseless truth.
pub struct Replicate {
    pub truth: Tensor3,
    pub observed: MaskedTensor,
    pub fold_seed: u64,
}

pub fn make_replicate(
    config: &SimulationConfig,
    truth: &Truth,
    replication: usize,
) -> Result<Replicate> {
    let base = replication as u64 * 4;
    let signal = generate_truth(truth, config.n, derive_seed(config.seed, base))?;
    let noisy = add_noise(
        &signal,
        config.noise_level * config.noise_base_variance,
        derive_seed(config.seed, base + 1),
    )?;
    let observed = config
        .missing
        .apply(&noisy, derive_seed(config.seed, base + 2))?;
    Ok(Replicate {
        truth: signal,
        observed,
        fold_seed: derive_seed(config.seed, base + 3),
    })
}

/// `(lambda, loss, L, warm start)` for one oracle grid point.
type OracleFit = (f64, f64, DMatrix<f64>, WarmStart);

/// Lambda minimizing the true loss over the coarse grid, then over linear
/// refinements between its neighbours, at the true ranks.
fn oracle_fit(
    config: &SimulationConfig,
    rep: &Replicate,
    r1: usize,
    r2: usize,
) -> Result<(f64, f64, DMatrix<f64>, f64)> {
    let coarse = config.grid.coarse_lambdas();
    let increase = std::cell::Cell::new(0.0f64);
    let sweep = |lambdas: &[f64], start: Option<WarmStart>| -> Result<Vec<OracleFit>> {
        let mut prev = start;
        let mut out = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let o = FitOptions {
                r1,
                r2,
                lambda,
                ..config.fit.clone()
            };
            let warm = if config.grid.warm_start {
                prev.as_ref()
            } else {
                None
            };
            let fit = fit_missing_full(&rep.observed, &o, warm)?;
            let loss = loss_reconstruction(&rep.truth, &fit.decomposition.reconstruct())?;
            increase.set(
                increase
                    .get()
                    .max(fit.decomposition.max_objective_increase()),
            );
            let ws = fit.warm_start();
            prev = Some(ws.clone());
            out.push((lambda, loss, fit.decomposition.l_factor, ws));
        }
        Ok(out)
    };
    let mut all = sweep(&coarse, None)?;
    let best = (0..all.len()).fold(0, |b, k| if all[k].1 < all[b].1 { k } else { b });
    if config.grid.fine_points > 0 && coarse.len() > 1 {
        let lo_idx = best.saturating_sub(1);
        let hi_idx = (best + 1).min(coarse.len() - 1);
        let (lo, hi) = (coarse[lo_idx], coarse[hi_idx]);
        let m = config.grid.fine_points;
        let fine: Vec<f64> = (1..=m)
            .map(|j| lo + (hi - lo) * j as f64 / (m + 1) as f64)
            .filter(|l| !coarse.contains(l))
            .collect();
        let start = all[lo_idx].3.clone();
        all.extend(sweep(&fine, Some(start))?);
    }
    let best = (0..all.len()).fold(0, |b, k| if all[k].1 < all[b].1 { k } else { b });
    let (lambda, loss, l, _) = all.swap_remove(best);
    Ok((lambda, loss, l, increase.get()))
}

fn refit(
    config: &SimulationConfig,
    rep: &Replicate,
    r1: usize,
    r2: usize,
    lambda: f64,
) -> Result<(f64, DMatrix<f64>, f64)> {
    let o = FitOptions {
        r1,
        r2,
        lambda,
        ..config.fit.clone()
    };
    let fit = fit_missing_full(&rep.observed, &o, None)?;
    let loss = loss_reconstruction(&rep.truth, &fit.decomposition.reconstruct())?;
    let increase = fit.decomposition.max_objective_increase();
    Ok((loss, fit.decomposition.l_factor, increase))
}

/// Rows for all configured methods on one replication.
pub fn run_replication(
    config: &SimulationConfig,
    truth: &Truth,
    replication: usize,
) -> Result<Vec<SimulationRow>> {
    let rep = make_replicate(config, truth, replication)?;
    let (r1, r2) = config.truth_ranks;
    let setting = config.setting_label();
    let mut rows = Vec::new();
    for &method in &config.methods {
        let started = Instant::now();
        let (loss_m, l_hat, ranks, lambda, increase) = match method {
            Method::Lambda0 => {
                let (loss, l, inc) = refit(config, &rep, r1, r2, 0.0)?;
                (loss, l, (r1, r2), 0.0, inc)
            }
            Method::Oracle => {
                let (lambda, loss, l, inc) = oracle_fit(config, &rep, r1, r2)?;
                (loss, l, (r1, r2), lambda, inc)
            }
            Method::Cv | Method::CvFlexible => {
                let spec = GridSpec {
                    r1_range: if method == Method::Cv {
                        (r1, r1)
                    } else {
                        config.flexible_r1_range
                    },
                    r2_range: if method == Method::Cv {
                        (r2, r2)
                    } else {
                        config.flexible_r2_range
                    },
                    ..config.grid.clone()
                };
                let folds = make_folds(&rep.observed, config.k, rep.fold_seed)?;
                let report = grid_search(&rep.observed, &folds, &spec, &config.fit)?;
                let sel = report.selected_entry();
                let (loss, l, inc) = refit(config, &rep, sel.r1, sel.r2, sel.lambda)?;
                (
                    loss,
                    l,
                    (sel.r1, sel.r2),
                    sel.lambda,
                    inc.max(report.max_objective_increase()),
                )
            }
        };
        let loss_l = if ranks.0 == r1 {
            Some(loss_subspace(&truth.l, &l_hat)?)
        } else {
            None
        };
        rows.push(SimulationRow {
            replication,
            setting: setting.clone(),
            method: method.as_str().to_string(),
            loss_m: Some(loss_m),
            loss_l,
            r1_hat: Some(ranks.0),
            r2_hat: Some(ranks.1),
            lambda_hat: Some(lambda),
            seconds: config
                .record_timing
                .then(|| started.elapsed().as_secs_f64()),
            max_objective_increase: increase,
        });
    }
    Ok(rows)
}

/// Runs all replications (in parallel) and collects rows in replication
/// order. A failing replication is recorded, not fatal.
pub fn run_study(config: &SimulationConfig) -> Result<SimulationResult> {
    config.validate()?;
    let truth = config.truth()?;
    let outcomes: Vec<Result<Vec<SimulationRow>>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| run_replication(config, &truth, rep))
        .collect();
    let mut result = SimulationResult {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(rows) => result.rows.extend(rows),
            Err(e) => result.failures.push((rep, e.to_string())),
        }
    }
    Ok(result)
}

/// Original-unit scale used for the packaged example dataset.
pub fn abpm_scale() -> NormalizationInfo {
    NormalizationInfo {
        measures: vec!["SBP".into(), "DBP".into(), "HR".into()],
        means: vec![128.0, 76.0, 74.0],
        sds: vec![15.0, 10.0, 11.0],
        grid_start_hour: 12,
    }
}

/// Long-format synthetic ABPM recordings: default truth at ranks (3, 2),
/// noise scaled by `noise_variance` in normalized units, structured
/// non-wear gaps, mapped to mmHg / bpm.
///
/// A few readings are duplicated within an hour and a handful are replaced
/// by implausible values, so the file exercises averaging and the quality
/// filter.
pub fn synthetic_abpm_records(
    n: usize,
    noise_variance: f64,
    max_missing_hours: usize,
    seed: u64,
) -> Result<Vec<LongRecord>> {
    let scale = abpm_scale();
    let truth = default_truth(24, 3, 3, 2);
    let signal = generate_truth(&truth, n, derive_seed(seed, 0))?;
    let noisy = add_noise(&signal, noise_variance, derive_seed(seed, 1))?;
    let masked = apply_structured_missing(&noisy, max_missing_hours, derive_seed(seed, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let d = masked.dims();
    let width = n.to_string().len().max(3);
    let mut out = Vec::new();
    for i in 0..d.n {
        let subject_id = format!("S{:0width$}", i + 1);
        for t in 0..d.a {
            let hour = scale.hour_at(t);
            for (j, name) in scale.measures.iter().enumerate() {
                if !masked.is_observed(t, j, i) {
                    out.push(LongRecord {
                        subject_id: subject_id.clone(),
                        hour,
                        measure: name.clone(),
                        value: None,
                    });
                    continue;
                }
                let v = masked.values().get(t, j, i) * scale.sds[j] + scale.means[j];
                let roll: f64 = rng.random();
                if roll < 0.002 {
                    // Artifact reading, removed by the quality filter.
                    let bad = if j == 2 { 250.0 } else { 20.0 };
                    out.push(LongRecord {
                        subject_id: subject_id.clone(),
                        hour,
                        measure: name.clone(),
                        value: Some(bad),
                    });
                } else if roll < 0.05 {
                    // Manual re-reading in the same hour; averages back to v.
                    let delta = (rng.random::<f64>() - 0.5) * 4.0;
                    for x in [v - delta, v + delta] {
                        out.push(LongRecord {
                            subject_id: subject_id.clone(),
                            hour,
                            measure: name.clone(),
                            value: Some(round2(x)),
                        });
                    }
                } else {
                    out.push(LongRecord {
                        subject_id: subject_id.clone(),
                        hour,
                        measure: name.clone(),
                        value: Some(round2(v)),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
