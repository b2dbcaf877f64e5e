//! Identifiability rotations and reporting quantities.
//!
//! The Tucker form is invariant under `L -> L U_L`, `R -> R U_R`,
//! `G_i -> U_L^T G_i U_R`. [`identify`] fixes `U_L` and `U_R` as the left
//! singular vectors of the mode-1 and mode-2 core unfoldings, which makes
//! the rotated scores mutually orthogonal and orders components by strength.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::decomposer::Decomposition;
use crate::error::{Error, Result};
use crate::io::NormalizationInfo;
use crate::linalg::SortedEigen;
use crate::tensor::MaskedTensor;

/// A decomposition after the identifiability rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiedDecomposition {
    pub l_tilde: DMatrix<f64>,
    pub r_tilde: DMatrix<f64>,
    pub cores_tilde: Vec<DMatrix<f64>>,
    pub mode1_singular_values: Vec<f64>,
    pub mode2_singular_values: Vec<f64>,
    /// Rotation applied to `L` (`l_tilde = L * u_l`).
    pub u_l: DMatrix<f64>,
    /// Rotation applied to `R` (`r_tilde = R * u_r`).
    pub u_r: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl IdentifiedDecomposition {
    pub fn reconstruct_slice(&self, i: usize) -> DMatrix<f64> {
        &self.l_tilde * &self.cores_tilde[i] * self.r_tilde.transpose()
    }

    pub fn n_subjects(&self) -> usize {
        self.cores_tilde.len()
    }

    /// As a plain decomposition, e.g. to feed [`explained_variance`].
    pub fn to_decomposition(&self, template: &Decomposition) -> Decomposition {
        Decomposition {
            l_factor: self.l_tilde.clone(),
            r_factor: self.r_tilde.clone(),
            cores: self.cores_tilde.clone(),
            ..template.clone()
        }
    }
}

/// Rotation that diagonalizes `gram`, with singular values and columns
/// oriented so that `factor * rotation` has sign-fixed columns.
fn canonical_rotation(
    gram: &DMatrix<f64>,
    factor: &DMatrix<f64>,
    label: &str,
    warnings: &mut Vec<String>,
) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SortedEigen::new(gram);
    let k = gram.nrows();
    let mut rot = eig.vectors.clone();
    let rotated = factor * &rot;
    for c in 0..k {
        let col = rotated.column(c);
        let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            let pivot = col
                .iter()
                .position(|v| v.abs() >= max * (1.0 - 1e-9))
                .unwrap_or(0);
            if col[pivot] < 0.0 {
                rot.column_mut(c).neg_mut();
            }
        }
    }
    let sv = eig.values.iter().map(|v| v.max(0.0).sqrt()).collect();
    if (1..k).any(|j| eig.near_tie_at(j)) {
        warnings.push(format!(
            "non-identifiable rotation: repeated {label} singular values"
        ));
    }
    (rot, sv)
}

/// MLSVD-style rotation of the factors and cores.
pub fn identify(dec: &Decomposition) -> IdentifiedDecomposition {
    let (r1, r2) = (dec.l_factor.ncols(), dec.r_factor.ncols());
    let mut g1 = DMatrix::zeros(r1, r1);
    let mut g2 = DMatrix::zeros(r2, r2);
    for g in &dec.cores {
        g1 += g * g.transpose();
        g2 += g.tr_mul(g);
    }
    let mut warnings = Vec::new();
    let (u_l, sv1) = canonical_rotation(&g1, &dec.l_factor, "mode-1", &mut warnings);
    let (u_r, sv2) = canonical_rotation(&g2, &dec.r_factor, "mode-2", &mut warnings);
    IdentifiedDecomposition {
        l_tilde: &dec.l_factor * &u_l,
        r_tilde: &dec.r_factor * &u_r,
        cores_tilde: dec.cores.iter().map(|g| u_l.tr_mul(g) * &u_r).collect(),
        mode1_singular_values: sv1,
        mode2_singular_values: sv2,
        u_l,
        u_r,
        warnings,
    }
}

fn observed_sq(t: &MaskedTensor, i: usize, m: &DMatrix<f64>) -> f64 {
    let d = t.dims();
    let ab = d.a * d.b;
    m.as_slice()
        .iter()
        .zip(&t.mask()[i * ab..(i + 1) * ab])
        .filter(|(_, &o)| o)
        .map(|(v, _)| v * v)
        .sum()
}

fn check_dims(t: &MaskedTensor, dec: &Decomposition) -> Result<()> {
    if dec.dims() != t.dims() {
        return Err(Error::ShapeMismatch(
            "decomposition does not match tensor".into(),
        ));
    }
    Ok(())
}

/// `sum_i ||L G_i R^T||^2_{Omega_i} / sum_i ||M_i||^2_{Omega_i}`.
pub fn explained_variance(t: &MaskedTensor, dec: &Decomposition) -> Result<f64> {
    check_dims(t, dec)?;
    let total = t.observed_norm_sq();
    if total == 0.0 {
        return Err(Error::InvalidParameter(
            "explained variance of zero-norm data".into(),
        ));
    }
    let fitted: f64 = (0..t.dims().n)
        .map(|i| observed_sq(t, i, &dec.reconstruct_slice(i)))
        .sum();
    Ok(fitted / total)
}

/// Explained-variance share of each rotated component, per mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceProfile {
    pub mode1: Vec<f64>,
    pub mode2: Vec<f64>,
    /// Explained variance of the whole model.
    pub total: f64,
}

pub fn component_variance_profile(
    identified: &IdentifiedDecomposition,
    t: &MaskedTensor,
) -> Result<VarianceProfile> {
    let d = t.dims();
    if identified.l_tilde.nrows() != d.a
        || identified.r_tilde.nrows() != d.b
        || identified.n_subjects() != d.n
    {
        return Err(Error::ShapeMismatch(
            "identified decomposition does not match tensor".into(),
        ));
    }
    let denom = t.observed_norm_sq();
    if denom == 0.0 {
        return Err(Error::InvalidParameter(
            "variance profile of zero-norm data".into(),
        ));
    }
    let (r1, r2) = (identified.l_tilde.ncols(), identified.r_tilde.ncols());
    let mut mode1 = vec![0.0; r1];
    let mut mode2 = vec![0.0; r2];
    let mut total = 0.0;
    for i in 0..d.n {
        let g = &identified.cores_tilde[i];
        for (k, share) in mode1.iter_mut().enumerate() {
            let part = identified.l_tilde.column(k) * (g.row(k) * identified.r_tilde.transpose());
            *share += observed_sq(t, i, &part);
        }
        let lg = &identified.l_tilde * g;
        for (l, share) in mode2.iter_mut().enumerate() {
            let part = lg.column(l) * identified.r_tilde.column(l).transpose();
            *share += observed_sq(t, i, &part);
        }
        total += observed_sq(t, i, &identified.reconstruct_slice(i));
    }
    mode1
        .iter_mut()
        .chain(mode2.iter_mut())
        .for_each(|v| *v /= denom);
    Ok(VarianceProfile {
        mode1,
        mode2,
        total: total / denom,
    })
}

/// One row of an effect-curve table, in original units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectPoint {
    pub time: usize,
    pub measure: usize,
    pub mean: f64,
    pub plus_1sd: f64,
    pub minus_1sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectCurves {
    pub component: usize,
    /// Across-subject SD of the component's score per measure, normalized units.
    pub sd: Vec<f64>,
    pub points: Vec<EffectPoint>,
}

/// Mean reconstruction shifted by +-1 SD along temporal component
/// `component`, per measure, mapped back to original units.
///
/// For measure `j` the component's contribution to subject `i` is
/// `L_k * s_ij` with `s_ij = sum_l g_{kl,i} R_{jl}`; the shift is
/// `sd_i(s_ij) * L_k`.
pub fn component_effect_curves(
    identified: &IdentifiedDecomposition,
    component: usize,
    scale: &NormalizationInfo,
) -> Result<EffectCurves> {
    let (a, r1) = identified.l_tilde.shape();
    let b = identified.r_tilde.nrows();
    if component >= r1 {
        return Err(Error::IndexOutOfRange {
            index: component,
            len: r1,
        });
    }
    if scale.means.len() != b || scale.sds.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "normalization for {} measures, decomposition has {b}",
            scale.means.len()
        )));
    }
    let n = identified.n_subjects();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut mean = DMatrix::zeros(a, b);
    for i in 0..n {
        mean += identified.reconstruct_slice(i);
    }
    mean /= n as f64;

    // scores[i, j] = sum_l g_{kl,i} R_{jl}
    let scores = DMatrix::from_fn(n, b, |i, j| {
        identified.cores_tilde[i]
            .row(component)
            .dot(&identified.r_tilde.row(j))
    });
    let sd: Vec<f64> = (0..b)
        .map(|j| {
            if n < 2 {
                return 0.0;
            }
            let col = scores.column(j);
            let mu = col.mean();
            let ss: f64 = col.iter().map(|v| (v - mu) * (v - mu)).sum();
            (ss / (n - 1) as f64).sqrt()
        })
        .collect();

    let lk = identified.l_tilde.column(component);
    let mut points = Vec::with_capacity(a * b);
    for j in 0..b {
        let (mu, s) = (scale.means[j], scale.sds[j]);
        for t in 0..a {
            let m = mean[(t, j)];
            let shift = sd[j] * lk[t];
            points.push(EffectPoint {
                time: t,
                measure: j,
                mean: m * s + mu,
                plus_1sd: (m + shift) * s + mu,
                minus_1sd: (m - shift) * s + mu,
            });
        }
    }
    Ok(EffectCurves {
        component,
        sd,
        points,
    })
}
