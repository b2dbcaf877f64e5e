//! Entry-wise k-fold cross-validation over `(r1, r2, lambda)` and a
//! coarse-to-fine grid search.
//!
//! Observed entries are split into `k` folds. For each fold the held-out
//! entries join the missing set, the model is refit, and the squared error
//! on the held-out entries is recorded. The CV score is the mean of these
//! per-fold sums over the folds that could be fitted.
//!
//! Within one fold and rank pair, lambdas are visited in increasing order
//! and each fit starts from the previous one's `L` and imputed tensor.
//! Folds and rank pairs are independent and run on the rayon pool; results
//! are always collected in fold / grid order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposer::{fit_missing_full, FitOptions, FitOutput, WarmStart};
use crate::error::{Error, Result};
use crate::postprocess::{component_variance_profile, IdentifiedDecomposition};
use crate::tensor::MaskedTensor;

/// Fold label for every tensor entry; `None` for unobserved entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<Option<usize>>,
}

impl FoldAssignment {
    /// Flat indices of the entries in fold `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, f)| **f == Some(j))
            .map(|(idx, _)| idx)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.k];
        for f in self.assignment.iter().flatten() {
            out[*f] += 1;
        }
        out
    }

    /// Training mask for fold `j`: observed and not in the fold.
    pub fn training_mask(&self, j: usize) -> Vec<bool> {
        self.assignment
            .iter()
            .map(|f| matches!(f, Some(x) if *x != j))
            .collect()
    }
}

/// Random partition of the observed entries into `k` folds whose sizes
/// differ by at most one.
pub fn make_folds(t: &MaskedTensor, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut observed: Vec<usize> = t
        .mask()
        .iter()
        .enumerate()
        .filter(|(_, &o)| o)
        .map(|(idx, _)| idx)
        .collect();
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if k > observed.len() {
        return Err(Error::InvalidParameter(format!(
            "{k} folds requested but only {} observed entries",
            observed.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    observed.shuffle(&mut rng);
    let mut assignment = vec![None; t.mask().len()];
    for (pos, idx) in observed.into_iter().enumerate() {
        assignment[idx] = Some(pos % k);
    }
    Ok(FoldAssignment {
        k,
        seed,
        assignment,
    })
}

/// Result of one fold at one grid point.
#[derive(Debug, Clone)]
pub struct FoldFit {
    /// Sum of squared held-out residuals; `None` when the fold was skipped.
    pub error: Option<f64>,
    pub fit: Option<FitOutput>,
}

/// Cross-validation outcome at one `(r1, r2, lambda)`.
#[derive(Debug, Clone)]
pub struct CvDetail {
    pub r1: usize,
    pub r2: usize,
    pub lambda: f64,
    pub error: f64,
    pub folds: Vec<FoldFit>,
    pub inner_iterations: usize,
    /// Worst relative inner-objective increase over the fold fits.
    pub max_objective_increase: f64,
    pub warnings: Vec<String>,
}

impl CvDetail {
    pub fn valid_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.error.is_some()).count()
    }

    pub fn fold_errors(&self) -> Vec<Option<f64>> {
        self.folds.iter().map(|f| f.error).collect()
    }
}

fn check_folds(t: &MaskedTensor, folds: &FoldAssignment) -> Result<()> {
    if folds.assignment.len() != t.mask().len() {
        return Err(Error::ShapeMismatch(
            "fold assignment does not match tensor".into(),
        ));
    }
    for (f, &o) in folds.assignment.iter().zip(t.mask()) {
        match f {
            Some(j) if !o || *j >= folds.k => {
                return Err(Error::InvalidParameter(
                    "fold assignment covers unobserved entries or bad fold labels".into(),
                ))
            }
            None if o => {
                return Err(Error::InvalidParameter(
                    "fold assignment misses observed entries".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

fn held_out_error(t: &MaskedTensor, fit: &FitOutput, members: &[usize]) -> f64 {
    let d = t.dims();
    let dec = &fit.decomposition;
    members
        .iter()
        .map(|&idx| {
            let (tt, m, i) = d.coords(idx);
            let pred = dec.l_factor.row(tt) * &dec.cores[i] * dec.r_factor.row(m).transpose();
            let r = t.values().as_slice()[idx] - pred[(0, 0)];
            r * r
        })
        .sum()
}

/// Runs one fold across increasing lambdas, chaining warm starts when
/// `warm` is set. `start` seeds the first fit of the chain.
#[allow(clippy::too_many_arguments)]
fn fold_chain(
    t: &MaskedTensor,
    folds: &FoldAssignment,
    j: usize,
    r1: usize,
    r2: usize,
    lambdas: &[f64],
    opts: &FitOptions,
    warm: bool,
    start: Option<&WarmStart>,
) -> Result<Vec<FoldFit>> {
    let train = t.with_mask(folds.training_mask(j))?;
    let (rows, cols) = train.empty_fibers();
    if !rows.is_empty() || !cols.is_empty() {
        return Ok(lambdas
            .iter()
            .map(|_| FoldFit {
                error: None,
                fit: None,
            })
            .collect());
    }
    let members = folds.members(j);
    let mut prev: Option<WarmStart> = start.cloned();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let o = FitOptions {
            r1,
            r2,
            lambda,
            ..opts.clone()
        };
        let fit = fit_missing_full(&train, &o, if warm { prev.as_ref() } else { None })?;
        let error = held_out_error(t, &fit, &members);
        if warm {
            prev = Some(fit.warm_start());
        }
        out.push(FoldFit {
            error: Some(error),
            fit: Some(fit),
        });
    }
    Ok(out)
}

/// Cross-validation along a lambda chain for one rank pair. `starts`, if
/// given, holds a per-fold warm start for the first lambda.
#[allow(clippy::too_many_arguments)]
fn cv_chain(
    t: &MaskedTensor,
    folds: &FoldAssignment,
    r1: usize,
    r2: usize,
    lambdas: &[f64],
    opts: &FitOptions,
    warm: bool,
    starts: Option<&[Option<WarmStart>]>,
) -> Result<Vec<CvDetail>> {
    let per_fold: Vec<Vec<FoldFit>> = (0..folds.k)
        .into_par_iter()
        .map(|j| {
            let start = starts.and_then(|s| s[j].as_ref());
            fold_chain(t, folds, j, r1, r2, lambdas, opts, warm, start)
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(lambdas.len());
    for (p, &lambda) in lambdas.iter().enumerate() {
        let fold_fits: Vec<FoldFit> = per_fold.iter().map(|chain| chain[p].clone()).collect();
        let mut warnings = Vec::new();
        let mut sum = 0.0;
        let mut valid = 0usize;
        let mut inner = 0usize;
        let mut increase = 0.0f64;
        for (j, ff) in fold_fits.iter().enumerate() {
            match (&ff.error, &ff.fit) {
                (Some(e), Some(fit)) => {
                    sum += e;
                    valid += 1;
                    inner += fit.decomposition.inner_iterations;
                    increase = increase.max(fit.decomposition.max_objective_increase());
                }
                _ => warnings.push(format!(
                    "fold {j} leaves a time row or measure column without observations; excluded"
                )),
            }
        }
        if valid == 0 {
            return Err(Error::UnidentifiableFiber(
                "every fold empties a fiber; cross-validation is undefined".into(),
            ));
        }
        out.push(CvDetail {
            r1,
            r2,
            lambda,
            error: sum / valid as f64,
            folds: fold_fits,
            inner_iterations: inner,
            max_objective_increase: increase,
            warnings,
        });
    }
    Ok(out)
}

/// CV error with per-fold fits retained.
pub fn cv_error_detailed(
    t: &MaskedTensor,
    folds: &FoldAssignment,
    r1: usize,
    r2: usize,
    lambda: f64,
    opts: &FitOptions,
) -> Result<CvDetail> {
    check_folds(t, folds)?;
    Ok(cv_chain(t, folds, r1, r2, &[lambda], opts, false, None)?
        .pop()
        .expect("one lambda"))
}

/// Mean over valid folds of the held-out squared error.
pub fn cv_error(
    t: &MaskedTensor,
    folds: &FoldAssignment,
    r1: usize,
    r2: usize,
    lambda: f64,
    opts: &FitOptions,
) -> Result<f64> {
    Ok(cv_error_detailed(t, folds, r1, r2, lambda, opts)?.error)
}

/// Search space and budget for [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Inclusive rank ranges.
    pub r1_range: (usize, usize),
    pub r2_range: (usize, usize),
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Log-spaced lambdas in the first stage.
    pub coarse_points: usize,
    /// Linearly spaced lambdas strictly between the coarse neighbours of
    /// the first-stage minimizer; 0 disables refinement.
    pub fine_points: usize,
    pub warm_start: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            r1_range: (2, 6),
            r2_range: (2, 3),
            lambda_min: 1.0,
            lambda_max: 50.0,
            coarse_points: 8,
            fine_points: 7,
            warm_start: true,
        }
    }
}

impl GridSpec {
    /// A grid with one rank pair and one lambda.
    pub fn single(r1: usize, r2: usize, lambda: f64) -> Self {
        Self {
            r1_range: (r1, r1),
            r2_range: (r2, r2),
            lambda_min: lambda,
            lambda_max: lambda,
            coarse_points: 1,
            fine_points: 0,
            warm_start: false,
        }
    }

    pub fn rank_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r1 in self.r1_range.0..=self.r1_range.1 {
            for r2 in self.r2_range.0..=self.r2_range.1 {
                out.push((r1, r2));
            }
        }
        out
    }

    pub fn coarse_lambdas(&self) -> Vec<f64> {
        let n = self.coarse_points;
        if n == 1 || self.lambda_min == self.lambda_max {
            return vec![self.lambda_min];
        }
        let (lo, hi) = (self.lambda_min.ln(), self.lambda_max.ln());
        let mut out: Vec<f64> = (0..n)
            .map(|k| (lo + (hi - lo) * k as f64 / (n - 1) as f64).exp())
            .collect();
        out[0] = self.lambda_min;
        out[n - 1] = self.lambda_max;
        out
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.r1_range.0 == 0 || self.r2_range.0 == 0 {
            return bad("ranks must be positive");
        }
        if self.r1_range.0 > self.r1_range.1 || self.r2_range.0 > self.r2_range.1 {
            return bad("empty rank range");
        }
        if self.coarse_points == 0 {
            return bad("empty lambda grid");
        }
        if !self.lambda_min.is_finite()
            || !self.lambda_max.is_finite()
            || self.lambda_min > self.lambda_max
        {
            return bad("invalid lambda range");
        }
        if self.lambda_min < 0.0 {
            return bad("lambda must be non-negative");
        }
        let multi = self.coarse_points > 1 && self.lambda_min < self.lambda_max;
        if multi && self.lambda_min == 0.0 {
            return bad("log-spaced lambda grid needs lambda_min > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub r1: usize,
    pub r2: usize,
    pub lambda: f64,
    pub stage: Stage,
    pub error: f64,
    pub fold_errors: Vec<Option<f64>>,
    pub valid_folds: usize,
    pub inner_iterations: usize,
    pub max_objective_increase: f64,
    /// Entry whose per-fold solutions seeded this point.
    pub warm_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Evaluation history in search order.
    pub entries: Vec<CvEntry>,
    /// Index into `entries` of the minimum CV error (first on ties).
    pub selected: usize,
    pub k: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl CvReport {
    pub fn selected_entry(&self) -> &CvEntry {
        &self.entries[self.selected]
    }

    pub fn stage(&self) -> Stage {
        self.selected_entry().stage
    }

    pub fn total_inner_iterations(&self) -> usize {
        self.entries.iter().map(|e| e.inner_iterations).sum()
    }

    pub fn max_objective_increase(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_objective_increase)
            .fold(0.0, f64::max)
    }
}

fn argmin(entries: &[CvEntry]) -> usize {
    let mut best = 0;
    for (k, e) in entries.iter().enumerate() {
        if e.error < entries[best].error {
            best = k;
        }
    }
    best
}

fn push_details(
    entries: &mut Vec<CvEntry>,
    warnings: &mut Vec<String>,
    details: &[CvDetail],
    stage: Stage,
    warm: bool,
    chain_seed: Option<usize>,
) {
    for (p, d) in details.iter().enumerate() {
        let warm_from = if !warm {
            None
        } else if p == 0 {
            chain_seed
        } else {
            Some(entries.len() - 1)
        };
        for w in &d.warnings {
            let w = format!("(r1={}, r2={}, lambda={}): {w}", d.r1, d.r2, d.lambda);
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        entries.push(CvEntry {
            r1: d.r1,
            r2: d.r2,
            lambda: d.lambda,
            stage,
            error: d.error,
            fold_errors: d.fold_errors(),
            valid_folds: d.valid_folds(),
            inner_iterations: d.inner_iterations,
            max_objective_increase: d.max_objective_increase,
            warm_from,
        });
    }
}

/// Coarse log-spaced lambda sweep over every rank pair, then a linear
/// refinement of lambda at the best rank pair.
pub fn grid_search(
    t: &MaskedTensor,
    folds: &FoldAssignment,
    spec: &GridSpec,
    opts: &FitOptions,
) -> Result<CvReport> {
    spec.validate()?;
    check_folds(t, folds)?;
    let pairs = spec.rank_pairs();
    let lambdas = spec.coarse_lambdas();

    let chains: Vec<Vec<CvDetail>> = pairs
        .par_iter()
        .map(|&(r1, r2)| cv_chain(t, folds, r1, r2, &lambdas, opts, spec.warm_start, None))
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for chain in &chains {
        push_details(
            &mut entries,
            &mut warnings,
            chain,
            Stage::Coarse,
            spec.warm_start,
            None,
        );
    }
    let best = argmin(&entries);

    if spec.fine_points > 0 && lambdas.len() > 1 {
        let pair_idx = best / lambdas.len();
        let lam_idx = best % lambdas.len();
        let lo_idx = lam_idx.saturating_sub(1);
        let hi_idx = (lam_idx + 1).min(lambdas.len() - 1);
        let (lo, hi) = (lambdas[lo_idx], lambdas[hi_idx]);
        let m = spec.fine_points;
        let fine: Vec<f64> = (1..=m)
            .map(|j| lo + (hi - lo) * j as f64 / (m + 1) as f64)
            .filter(|l| !lambdas.contains(l))
            .collect();
        if !fine.is_empty() {
            let (r1, r2) = pairs[pair_idx];
            let seed_entry = pair_idx * lambdas.len() + lo_idx;
            let starts: Option<Vec<Option<WarmStart>>> = spec.warm_start.then(|| {
                chains[pair_idx][lo_idx]
                    .folds
                    .iter()
                    .map(|f| f.fit.as_ref().map(FitOutput::warm_start))
                    .collect()
            });
            let details = cv_chain(
                t,
                folds,
                r1,
                r2,
                &fine,
                opts,
                spec.warm_start,
                starts.as_deref(),
            )?;
            push_details(
                &mut entries,
                &mut warnings,
                &details,
                Stage::Fine,
                spec.warm_start,
                Some(seed_entry),
            );
        }
    }

    let selected = argmin(&entries);
    if entries.iter().any(|e| !e.error.is_finite()) {
        return Err(Error::Numerical("non-finite cross-validation error".into()));
    }
    Ok(CvReport {
        entries,
        selected,
        k: folds.k,
        seed: folds.seed,
        warnings,
    })
}

/// Component shares and the smallest ranks that keep a given fraction of
/// the model's explained variance. Advisory: the caller refits at the
/// suggested ranks and re-tunes lambda.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParsimonyReport {
    pub threshold: f64,
    pub mode1_shares: Vec<f64>,
    pub mode2_shares: Vec<f64>,
    pub suggested_r1: usize,
    pub suggested_r2: usize,
}

pub const DEFAULT_PARSIMONY_THRESHOLD: f64 = 0.95;

/// Smallest number of components, taken in decreasing share order, whose
/// shares reach `threshold` of the summed shares.
fn components_needed(shares: &[f64], threshold: f64) -> usize {
    let total: f64 = shares.iter().sum();
    if total <= 0.0 {
        return shares.len().min(1);
    }
    let mut sorted = shares.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let target = threshold * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        acc += s;
        if acc >= target {
            return k + 1;
        }
    }
    shares.len()
}

pub fn parsimony_report(
    identified: &IdentifiedDecomposition,
    t: &MaskedTensor,
    threshold: f64,
) -> Result<ParsimonyReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "share threshold must be in (0, 1], got {threshold}"
        )));
    }
    let profile = component_variance_profile(identified, t)?;
    Ok(parsimony_from_shares(
        profile.mode1,
        profile.mode2,
        threshold,
    ))
}

pub fn parsimony_from_shares(mode1: Vec<f64>, mode2: Vec<f64>, threshold: f64) -> ParsimonyReport {
    ParsimonyReport {
        threshold,
        suggested_r1: components_needed(&mode1, threshold),
        suggested_r2: components_needed(&mode2, threshold),
        mode1_shares: mode1,
        mode2_shares: mode2,
    }
}
