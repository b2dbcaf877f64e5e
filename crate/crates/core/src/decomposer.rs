//! Smoothness-penalized Tucker (GLRAM-form) decomposition.
//!
//! Each frontal slice is approximated as `M_i ~ L G_i R^T` with orthonormal
//! temporal factor `L` (`a x r1`), orthonormal measure factor `R` (`b x r2`)
//! and per-subject cores `G_i` (`r1 x r2`). The fitted objective is
//!
//! ```text
//! sum_i ||M_i - L G_i R^T||^2_{Omega_i} + lambda ||D L G_i R^T||_F^2
//! ```
//!
//! For complete data the cores have a closed form given `L` and `R`, and
//! after reparametrizing `L` through `U` (with `col(L) = col(A^{-1/2} U)`)
//! both `U` and `R` are leading eigenvectors of small symmetric matrices.
//! Missing entries are handled by an outer imputation loop around the
//! complete-data solver.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, SortedEigen};
use crate::serde_matrix;
use crate::smoothing::{Boundary, SmoothingOperator};
use crate::tensor::{unfold, Dims, MaskedTensor, Tensor3};

/// Which penalty is attached to the low-rank fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Roughness penalty on the reconstruction `L G_i R^T`.
    #[default]
    SmoothFit,
    /// Roughness penalty on the temporal components, `lambda ||D L||_F^2`.
    /// Kept to demonstrate how orthogonality and component smoothing clash.
    PenalizeComponents,
    /// Plain GLRAM; `lambda` is ignored.
    None,
}

/// Starting temporal factor when none is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Initializer {
    /// `[I_{r1}, 0]^T`.
    #[default]
    Canonical,
    /// Orthonormalized Gaussian matrix from a seeded generator.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub lambda: f64,
    pub r1: usize,
    pub r2: usize,
    pub max_inner_iterations: usize,
    pub max_outer_iterations: usize,
    /// Relative objective change that stops the inner solver.
    pub inner_tolerance: f64,
    /// Relative Frobenius change of the imputed entries that stops the
    /// imputation loop.
    pub outer_tolerance: f64,
    #[serde(with = "serde_matrix::option")]
    pub initial_l: Option<DMatrix<f64>>,
    pub initializer: Initializer,
    pub initial_fill: f64,
    pub variant: Variant,
    pub boundary: Boundary,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            r1: 1,
            r2: 1,
            max_inner_iterations: 200,
            max_outer_iterations: 500,
            inner_tolerance: 1e-6,
            outer_tolerance: 1e-4,
            initial_l: None,
            initializer: Initializer::Canonical,
            initial_fill: 0.0,
            variant: Variant::SmoothFit,
            boundary: Boundary::Periodic,
        }
    }
}

impl FitOptions {
    pub fn new(r1: usize, r2: usize, lambda: f64) -> Self {
        Self {
            r1,
            r2,
            lambda,
            ..Self::default()
        }
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        if self.r1 == 0 || self.r1 > dims.a {
            return Err(Error::InvalidParameter(format!(
                "r1 = {} outside 1..={}",
                self.r1, dims.a
            )));
        }
        if self.r2 == 0 || self.r2 > dims.b {
            return Err(Error::InvalidParameter(format!(
                "r2 = {} outside 1..={}",
                self.r2, dims.b
            )));
        }
        if !(self.inner_tolerance > 0.0) || !(self.outer_tolerance > 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_inner_iterations == 0 || self.max_outer_iterations == 0 {
            return Err(Error::InvalidParameter(
                "iteration budgets must be positive".into(),
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(l) = &self.initial_l {
            if l.shape() != (dims.a, self.r1) {
                return Err(Error::ShapeMismatch(format!(
                    "initial L of shape {:?}, expected {:?}",
                    l.shape(),
                    (dims.a, self.r1)
                )));
            }
        }
        Ok(())
    }

    /// Penalty weight actually used by the solver.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::None => 0.0,
            _ => self.lambda,
        }
    }

    pub fn operator(&self, a: usize) -> Result<SmoothingOperator> {
        SmoothingOperator::build(a, self.boundary, self.effective_lambda())
    }

    fn initial_factor(&self, a: usize) -> DMatrix<f64> {
        if let Some(l) = &self.initial_l {
            return l.clone();
        }
        match self.initializer {
            Initializer::Canonical => DMatrix::identity(a, self.r1),
            Initializer::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = DMatrix::from_fn(a, self.r1, |_, _| StandardNormal.sample(&mut rng));
                orthonormalize(&g)
            }
        }
    }
}

/// Fitted factors and cores plus solver metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub l_factor: DMatrix<f64>,
    pub r_factor: DMatrix<f64>,
    pub cores: Vec<DMatrix<f64>>,
    pub lambda: f64,
    pub ranks: (usize, usize),
    pub variant: Variant,
    pub boundary: Boundary,
    /// Complete-data objective after every inner iteration, across all
    /// imputation rounds.
    pub objective_trace: Vec<f64>,
    /// Masked objective after every imputation round.
    pub outer_objective_trace: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub warnings: Vec<String>,
}

impl Decomposition {
    pub fn dims(&self) -> Dims {
        Dims::new(
            self.l_factor.nrows(),
            self.r_factor.nrows(),
            self.cores.len(),
        )
    }

    /// `L G_i R^T`.
    pub fn reconstruct_slice(&self, i: usize) -> DMatrix<f64> {
        &self.l_factor * &self.cores[i] * self.r_factor.transpose()
    }

    pub fn reconstruct(&self) -> Tensor3 {
        let slices: Vec<_> = (0..self.cores.len())
            .map(|i| self.reconstruct_slice(i))
            .collect();
        Tensor3::from_slices(&slices).expect("cores are non-empty and equally shaped")
    }

    /// Largest relative increase between consecutive entries of the
    /// inner objective trace; 0 for a non-increasing trace.
    pub fn max_objective_increase(&self) -> f64 {
        max_relative_increase(&self.objective_trace)
    }

    fn push_warning(&mut self, w: &str) {
        if !self.warnings.iter().any(|x| x == w) {
            self.warnings.push(w.to_string());
        }
    }
}

pub fn max_relative_increase(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Starting point carried between neighbouring fits.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub l: DMatrix<f64>,
    pub imputed: Tensor3,
}

/// Decomposition together with the final imputed tensor.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub decomposition: Decomposition,
    pub imputed: Tensor3,
}

impl FitOutput {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            l: self.decomposition.l_factor.clone(),
            imputed: self.imputed.clone(),
        }
    }
}

const TIE_WARNING_R: &str = "near-tied eigenvalues at the measure rank cut; R is not identifiable";
const TIE_WARNING_U: &str = "near-tied eigenvalues at the temporal rank cut; L is not identifiable";

/// Masked, penalized objective for a smooth-fit decomposition.
pub fn objective(t: &MaskedTensor, dec: &Decomposition, op: &SmoothingOperator) -> Result<f64> {
    let d = t.dims();
    check_shapes(d, dec)?;
    if op.grid_len() != d.a {
        return Err(Error::ShapeMismatch(format!(
            "operator on grid {} for tensor with {} time points",
            op.grid_len(),
            d.a
        )));
    }
    let lambda = op.lambda();
    let mut total = 0.0;
    for i in 0..d.n {
        let fit = dec.reconstruct_slice(i);
        total += masked_residual_sq(t, i, &fit);
        if lambda > 0.0 {
            total += lambda * (op.d() * &fit).norm_squared();
        }
    }
    Ok(total)
}

/// Masked objective of the component-penalized variant,
/// `sum_i ||M_i - L G_i R^T||^2_{Omega_i} + lambda ||D L||_F^2`.
pub fn objective_penalized_components(
    t: &MaskedTensor,
    dec: &Decomposition,
    op: &SmoothingOperator,
) -> Result<f64> {
    let d = t.dims();
    check_shapes(d, dec)?;
    let mut total = op.lambda() * (op.d() * &dec.l_factor).norm_squared();
    for i in 0..d.n {
        total += masked_residual_sq(t, i, &dec.reconstruct_slice(i));
    }
    Ok(total)
}

fn masked_residual_sq(t: &MaskedTensor, i: usize, fit: &DMatrix<f64>) -> f64 {
    let d = t.dims();
    let ab = d.a * d.b;
    let vals = &t.values().as_slice()[i * ab..(i + 1) * ab];
    let mask = &t.mask()[i * ab..(i + 1) * ab];
    vals.iter()
        .zip(mask)
        .zip(fit.as_slice())
        .filter(|((_, &o), _)| o)
        .map(|((v, _), f)| (v - f) * (v - f))
        .sum()
}

fn check_shapes(d: Dims, dec: &Decomposition) -> Result<()> {
    let dd = dec.dims();
    if dd != d {
        return Err(Error::ShapeMismatch(format!(
            "decomposition of shape {}x{}x{} for tensor {}x{}x{}",
            dd.a, dd.b, dd.n, d.a, d.b, d.n
        )));
    }
    Ok(())
}

/// Optimal core for fixed `L` and `R` on a fully observed slice:
/// `G_i = (I + lambda L^T D^T D L)^{-1} L^T M_i R`.
pub fn solve_core(
    m_i: &DMatrix<f64>,
    l: &DMatrix<f64>,
    r: &DMatrix<f64>,
    op: &SmoothingOperator,
) -> Result<DMatrix<f64>> {
    if m_i.nrows() != l.nrows() || m_i.ncols() != r.nrows() || op.grid_len() != l.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "slice {:?}, L {:?}, R {:?}",
            m_i.shape(),
            l.shape(),
            r.shape()
        )));
    }
    let chol = core_system(l, op)?;
    Ok(chol.solve(&(l.tr_mul(m_i) * r)))
}

fn core_system(
    l: &DMatrix<f64>,
    op: &SmoothingOperator,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let dl = op.d() * l;
    let system = DMatrix::identity(l.ncols(), l.ncols()) + dl.tr_mul(&dl) * op.lambda();
    system
        .cholesky()
        .ok_or_else(|| Error::Numerical("core system is not positive definite".into()))
}

/// `A^{-1/2}` applied to the mode-1 unfolding, i.e. `[A^{-1/2} M_1, ...]`.
fn whiten(x: &Tensor3, op: &SmoothingOperator) -> DMatrix<f64> {
    let x1 = unfold(x, 1).expect("mode 1 is valid");
    if op.lambda() == 0.0 {
        x1
    } else {
        op.a_inv_sqrt() * x1
    }
}

/// `sum_i Y_i^T Y_i` over the `n` column blocks of width `b` of `y`.
fn block_gram_t(y: &DMatrix<f64>, b: usize) -> DMatrix<f64> {
    let n = y.ncols() / b;
    let mut acc = DMatrix::zeros(b, b);
    for i in 0..n {
        let yi = y.columns(i * b, b);
        acc += yi.tr_mul(&yi);
    }
    acc
}

/// `[Y_1 R, ..., Y_n R]` for column blocks `Y_i` of width `b`.
fn block_times(y: &DMatrix<f64>, r: &DMatrix<f64>, b: usize) -> DMatrix<f64> {
    let n = y.ncols() / b;
    let k = r.ncols();
    let mut out = DMatrix::zeros(y.nrows(), k * n);
    for i in 0..n {
        out.columns_mut(i * k, k)
            .copy_from(&(y.columns(i * b, b) * r));
    }
    out
}

fn measure_update(w: &DMatrix<f64>, u: &DMatrix<f64>, b: usize, r2: usize) -> (DMatrix<f64>, bool) {
    let p = u.tr_mul(w);
    let eig = SortedEigen::new(&block_gram_t(&p, b));
    (eig.top(r2), eig.near_tie_at(r2))
}

fn temporal_update(
    w: &DMatrix<f64>,
    r: &DMatrix<f64>,
    b: usize,
    r1: usize,
) -> (DMatrix<f64>, bool) {
    let q = block_times(w, r, b);
    let eig = SortedEigen::new(&(&q * q.transpose()));
    (eig.top(r1), eig.near_tie_at(r1))
}

fn check_slices(slices: &[DMatrix<f64>], op: &SmoothingOperator) -> Result<(usize, usize)> {
    let first = slices.first().ok_or(Error::EmptyData)?;
    let (a, b) = first.shape();
    if op.grid_len() != a || slices.iter().any(|s| s.shape() != (a, b)) {
        return Err(Error::ShapeMismatch("inconsistent slice shapes".into()));
    }
    Ok((a, b))
}

/// Measure factor update: top-`r2` eigenvectors of
/// `M_R = sum_i M_i^T A^{-1/2} U U^T A^{-1/2} M_i`.
pub fn update_r(
    slices: &[DMatrix<f64>],
    u: &DMatrix<f64>,
    op: &SmoothingOperator,
    r2: usize,
) -> Result<DMatrix<f64>> {
    let (a, b) = check_slices(slices, op)?;
    if r2 == 0 || r2 > b {
        return Err(Error::InvalidParameter(format!(
            "r2 = {r2} outside 1..={b}"
        )));
    }
    if u.nrows() != a {
        return Err(Error::ShapeMismatch(format!(
            "U has {} rows, expected {a}",
            u.nrows()
        )));
    }
    let w = whiten(&Tensor3::from_slices(slices)?, op);
    Ok(measure_update(&w, u, b, r2).0)
}

/// Reparametrized temporal update: top-`r1` eigenvectors of
/// `M_U = sum_i A^{-1/2} M_i R R^T M_i^T A^{-1/2}`.
pub fn update_u(
    slices: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    op: &SmoothingOperator,
    r1: usize,
) -> Result<DMatrix<f64>> {
    let (a, b) = check_slices(slices, op)?;
    if r1 == 0 || r1 > a {
        return Err(Error::InvalidParameter(format!(
            "r1 = {r1} outside 1..={a}"
        )));
    }
    if r.nrows() != b {
        return Err(Error::ShapeMismatch(format!(
            "R has {} rows, expected {b}",
            r.nrows()
        )));
    }
    let w = whiten(&Tensor3::from_slices(slices)?, op);
    Ok(temporal_update(&w, r, b, r1).0)
}

/// Orthonormal `L` spanning `col(A^{-1/2} U)`: the top-`r1` eigenvectors of
/// `A^{-1/2} U U^T A^{-1/2}`.
pub fn recover_l(u: &DMatrix<f64>, op: &SmoothingOperator, r1: usize) -> Result<DMatrix<f64>> {
    if u.nrows() != op.grid_len() || r1 == 0 || r1 > u.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "U of shape {:?} with r1 = {r1}",
            u.shape()
        )));
    }
    if op.lambda() == 0.0 {
        let eig = SortedEigen::new(&(u * u.transpose()));
        return Ok(eig.top(r1));
    }
    let v = op.a_inv_sqrt() * u;
    let eig = SortedEigen::new(&(&v * v.transpose()));
    let floor = 1e-14 * eig.values[0].abs().max(1.0);
    if eig.values[r1 - 1] <= floor {
        return Err(Error::Numerical(
            "A^{-1/2} U is rank deficient; cannot recover L".into(),
        ));
    }
    Ok(eig.top(r1))
}

/// Writes `L` onto the column space of `A^{1/2} L` (the `U` parametrization).
fn reparametrize(l: &DMatrix<f64>, op: &SmoothingOperator) -> DMatrix<f64> {
    if op.lambda() == 0.0 {
        orthonormalize(l)
    } else {
        orthonormalize(&(op.a_sqrt() * l))
    }
}

/// Cores for all subjects plus the complete-data objective.
fn cores_and_objective(
    x1: &DMatrix<f64>,
    l: &DMatrix<f64>,
    r: &DMatrix<f64>,
    op: &SmoothingOperator,
    b: usize,
) -> Result<(Vec<DMatrix<f64>>, f64)> {
    let chol = core_system(l, op)?;
    let lt_x = l.tr_mul(x1);
    let n = x1.ncols() / b;
    let r1 = l.ncols();
    let mut cores = Vec::with_capacity(n);
    let mut h = DMatrix::zeros(r1, x1.ncols());
    for i in 0..n {
        let g = chol.solve(&(lt_x.columns(i * b, b) * r));
        h.columns_mut(i * b, b).copy_from(&(&g * r.transpose()));
        cores.push(g);
    }
    let residual = x1 - l * &h;
    let mut f = residual.norm_squared();
    if op.lambda() > 0.0 {
        f += op.lambda() * ((op.d() * l) * &h).norm_squared();
    }
    Ok((cores, f))
}

struct InnerResult {
    l: DMatrix<f64>,
    r: DMatrix<f64>,
    cores: Vec<DMatrix<f64>>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    tie_r: bool,
    tie_u: bool,
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    if prev == cur {
        0.0
    } else {
        (prev - cur).abs() / prev.abs().max(f64::MIN_POSITIVE)
    }
}

/// Complete-data block-coordinate solver for the smooth-fit objective.
fn inner_smooth(
    x: &Tensor3,
    l0: &DMatrix<f64>,
    op: &SmoothingOperator,
    opts: &FitOptions,
) -> Result<InnerResult> {
    let d = x.dims();
    let x1 = unfold(x, 1)?;
    let w = whiten(x, op);
    let mut u = reparametrize(l0, op);
    let mut out = InnerResult {
        l: l0.clone(),
        r: DMatrix::zeros(d.b, opts.r2),
        cores: Vec::new(),
        trace: Vec::new(),
        iterations: 0,
        converged: false,
        tie_r: false,
        tie_u: false,
    };
    for _ in 0..opts.max_inner_iterations {
        let (r, tie_r) = measure_update(&w, &u, d.b, opts.r2);
        let (u_new, tie_u) = temporal_update(&w, &r, d.b, opts.r1);
        u = u_new;
        let l = recover_l(&u, op, opts.r1)?;
        let (cores, f) = cores_and_objective(&x1, &l, &r, op, d.b)?;
        out.iterations += 1;
        out.tie_r = tie_r;
        out.tie_u = tie_u;
        let prev = out.trace.last().copied();
        out.trace.push(f);
        out.l = l;
        out.r = r;
        out.cores = cores;
        if let Some(p) = prev {
            if relative_change(p, f) < opts.inner_tolerance {
                out.converged = true;
                break;
            }
        }
        if f == 0.0 {
            out.converged = true;
            break;
        }
    }
    Ok(out)
}

/// Complete-data HOOI solver with the penalty on the components themselves.
fn inner_penalized_components(
    x: &Tensor3,
    l0: &DMatrix<f64>,
    op: &SmoothingOperator,
    opts: &FitOptions,
) -> Result<InnerResult> {
    let d = x.dims();
    let x1 = unfold(x, 1)?;
    let penalty = op.dtd() * op.lambda();
    let mut l = l0.clone();
    let mut out = InnerResult {
        l: l0.clone(),
        r: DMatrix::zeros(d.b, opts.r2),
        cores: Vec::new(),
        trace: Vec::new(),
        iterations: 0,
        converged: false,
        tie_r: false,
        tie_u: false,
    };
    for _ in 0..opts.max_inner_iterations {
        let (r, tie_r) = measure_update(&x1, &l, d.b, opts.r2);
        let q = block_times(&x1, &r, d.b);
        let eig = SortedEigen::new(&(&q * q.transpose() - &penalty));
        l = eig.top(opts.r1);
        let lt_x = l.tr_mul(&x1);
        let mut h = DMatrix::zeros(opts.r1, x1.ncols());
        let mut cores = Vec::with_capacity(d.n);
        for i in 0..d.n {
            let g = lt_x.columns(i * d.b, d.b) * &r;
            h.columns_mut(i * d.b, d.b).copy_from(&(&g * r.transpose()));
            cores.push(g);
        }
        let f = (&x1 - &l * &h).norm_squared() + op.lambda() * (op.d() * &l).norm_squared();
        out.iterations += 1;
        out.tie_r = tie_r;
        out.tie_u = eig.near_tie_at(opts.r1);
        let prev = out.trace.last().copied();
        out.trace.push(f);
        out.l = l.clone();
        out.r = r;
        out.cores = cores;
        if let Some(p) = prev {
            if relative_change(p, f) < opts.inner_tolerance {
                out.converged = true;
                break;
            }
        }
    }
    Ok(out)
}

fn validate_input(t: &MaskedTensor, opts: &FitOptions) -> Result<()> {
    let d = t.dims();
    if d.is_empty() {
        return Err(Error::EmptyData);
    }
    opts.validate(d)?;
    if d.a < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 time points, got {}",
            d.a
        )));
    }
    if t.observed_count() == 0 {
        return Err(Error::EmptyData);
    }
    for (idx, (v, &o)) in t.values().as_slice().iter().zip(t.mask()).enumerate() {
        if o && !v.is_finite() {
            let (tt, m, i) = d.coords(idx);
            return Err(Error::NonFinite(format!(
                "(time {tt}, measure {m}, subject {i})"
            )));
        }
    }
    let (rows, cols) = t.empty_fibers();
    if !rows.is_empty() || !cols.is_empty() {
        return Err(Error::UnidentifiableFiber(format!(
            "time rows {rows:?} and measure columns {cols:?} have no observations"
        )));
    }
    Ok(())
}

fn run(t: &MaskedTensor, opts: &FitOptions, warm: Option<&WarmStart>) -> Result<FitOutput> {
    validate_input(t, opts)?;
    let d = t.dims();
    let op = opts.operator(d.a)?;
    let mut x = match warm {
        Some(ws) => {
            if ws.imputed.dims() != d || ws.l.shape() != (d.a, opts.r1) {
                return Err(Error::ShapeMismatch(
                    "warm start does not match the data".into(),
                ));
            }
            let mut x = ws.imputed.clone();
            for ((xv, &v), &o) in x
                .as_mut_slice()
                .iter_mut()
                .zip(t.values().as_slice())
                .zip(t.mask())
            {
                if o {
                    *xv = v;
                }
            }
            x
        }
        None => t.filled(opts.initial_fill),
    };
    let mut l_start = match warm {
        Some(ws) => ws.l.clone(),
        None => opts.initial_factor(d.a),
    };
    let missing: Vec<usize> = t
        .mask()
        .iter()
        .enumerate()
        .filter(|(_, &o)| !o)
        .map(|(k, _)| k)
        .collect();

    let mut dec = Decomposition {
        l_factor: l_start.clone(),
        r_factor: DMatrix::zeros(d.b, opts.r2),
        cores: Vec::new(),
        lambda: opts.effective_lambda(),
        ranks: (opts.r1, opts.r2),
        variant: opts.variant,
        boundary: opts.boundary,
        objective_trace: Vec::new(),
        outer_objective_trace: Vec::new(),
        converged: false,
        outer_iterations: 0,
        inner_iterations: 0,
        warnings: Vec::new(),
    };

    for _ in 0..opts.max_outer_iterations {
        let inner = match opts.variant {
            Variant::PenalizeComponents => inner_penalized_components(&x, &l_start, &op, opts)?,
            _ => inner_smooth(&x, &l_start, &op, opts)?,
        };
        dec.outer_iterations += 1;
        dec.inner_iterations += inner.iterations;
        dec.objective_trace.extend_from_slice(&inner.trace);
        dec.l_factor = inner.l;
        dec.r_factor = inner.r;
        dec.cores = inner.cores;
        if inner.tie_r {
            dec.push_warning(TIE_WARNING_R);
        }
        if inner.tie_u {
            dec.push_warning(TIE_WARNING_U);
        }
        let masked = match opts.variant {
            Variant::PenalizeComponents => objective_penalized_components(t, &dec, &op)?,
            _ => objective(t, &dec, &op)?,
        };
        dec.outer_objective_trace.push(masked);

        if missing.is_empty() {
            dec.converged = inner.converged;
            break;
        }
        let recon = dec.reconstruct();
        let mut diff = 0.0;
        let mut old = 0.0;
        for &k in &missing {
            let new = recon.as_slice()[k];
            let prev = x.as_slice()[k];
            diff += (new - prev) * (new - prev);
            old += prev * prev;
            x.as_mut_slice()[k] = new;
        }
        let change = if diff == 0.0 {
            0.0
        } else {
            (diff / old.max(f64::MIN_POSITIVE)).sqrt()
        };
        l_start = dec.l_factor.clone();
        if change < opts.outer_tolerance {
            dec.converged = inner.converged;
            break;
        }
    }
    if !dec.converged {
        dec.push_warning("iteration budget exhausted before convergence");
    }
    Ok(FitOutput {
        decomposition: dec,
        imputed: x,
    })
}

/// Block-coordinate fit on a fully observed tensor.
pub fn fit_complete(t: &MaskedTensor, opts: &FitOptions) -> Result<Decomposition> {
    if !t.is_complete() {
        return Err(Error::InvalidParameter(
            "fit_complete needs a fully observed tensor".into(),
        ));
    }
    if opts.variant == Variant::PenalizeComponents {
        return Err(Error::InvalidParameter(
            "fit_complete solves the smooth-fit objective".into(),
        ));
    }
    Ok(run(t, opts, None)?.decomposition)
}

/// One imputation update: observed entries are kept, the rest are replaced
/// by the reconstruction.
pub fn impute_step(t: &MaskedTensor, dec: &Decomposition) -> Result<Tensor3> {
    check_shapes(t.dims(), dec)?;
    let mut out = dec.reconstruct();
    for ((o, &v), &obs) in out
        .as_mut_slice()
        .iter_mut()
        .zip(t.values().as_slice())
        .zip(t.mask())
    {
        if obs {
            *o = v;
        }
    }
    Ok(out)
}

/// Fit with missing entries by alternating the complete-data solver and
/// imputation.
pub fn fit_missing(t: &MaskedTensor, opts: &FitOptions) -> Result<Decomposition> {
    Ok(fit_missing_full(t, opts, None)?.decomposition)
}

/// Like [`fit_missing`], optionally starting from a previous solution, and
/// also returning the final imputed tensor.
pub fn fit_missing_full(
    t: &MaskedTensor,
    opts: &FitOptions,
    warm: Option<&WarmStart>,
) -> Result<FitOutput> {
    if opts.variant == Variant::PenalizeComponents {
        return Err(Error::InvalidParameter(
            "use fit_penalized_components for the component-penalty variant".into(),
        ));
    }
    run(t, opts, warm)
}

/// Fit of the component-penalized objective
/// `sum_i ||M_i - L G_i R^T||^2_{Omega_i} + lambda ||D L||_F^2`.
pub fn fit_penalized_components(t: &MaskedTensor, opts: &FitOptions) -> Result<Decomposition> {
    Ok(fit_penalized_components_full(t, opts)?.decomposition)
}

pub fn fit_penalized_components_full(t: &MaskedTensor, opts: &FitOptions) -> Result<FitOutput> {
    let opts = FitOptions {
        variant: Variant::PenalizeComponents,
        ..opts.clone()
    };
    run(t, &opts, None)
}
