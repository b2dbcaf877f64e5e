//! Independent reference implementations used as test oracles. Nothing here
//! calls the solver internals; only plain nalgebra and explicit loops.

#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use smoothhooi::{Dims, MaskedTensor, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(d: Dims, seed: u64) -> Tensor3 {
    let mut r = rng(seed);
    Tensor3::from_fn(d, |_, _, _| r.random_range(-1.0..1.0))
}

pub fn random_mask(d: Dims, missing: f64, seed: u64) -> Vec<bool> {
    let mut r = rng(seed);
    (0..d.len()).map(|_| r.random::<f64>() >= missing).collect()
}

/// Gram-Schmidt on a Gaussian matrix.
pub fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r));
    gram_schmidt(&g)
}

pub fn gram_schmidt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = m.clone();
    for k in 0..q.ncols() {
        for _ in 0..2 {
            for j in 0..k {
                let p = q.column(j).dot(&q.column(k));
                let qj = q.column(j).into_owned();
                q.column_mut(k).axpy(-p, &qj, 1.0);
            }
        }
        let n = q.column(k).norm();
        q.column_mut(k).scale_mut(1.0 / n);
    }
    q
}

/// Periodic second-difference matrix written out from its stencil.
pub fn periodic_d(a: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a, a);
    for i in 0..a {
        d[(i, i)] = 2.0;
        d[(i, (i + 1) % a)] = -1.0;
        d[(i, (i + a - 1) % a)] = -1.0;
    }
    d
}

/// Masked residual plus full penalty, by explicit loops over entries.
pub fn objective_by_loops(
    t: &MaskedTensor,
    l: &DMatrix<f64>,
    cores: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    d: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    let dims = t.dims();
    let mut total = 0.0;
    for (i, g) in cores.iter().enumerate() {
        let fit = DMatrix::from_fn(dims.a, dims.b, |tt, m| {
            let mut s = 0.0;
            for k in 0..l.ncols() {
                for q in 0..r.ncols() {
                    s += l[(tt, k)] * g[(k, q)] * r[(m, q)];
                }
            }
            s
        });
        for tt in 0..dims.a {
            for m in 0..dims.b {
                if t.is_observed(tt, m, i) {
                    let e = t.values().get(tt, m, i) - fit[(tt, m)];
                    total += e * e;
                }
            }
        }
        for row in 0..d.nrows() {
            for m in 0..dims.b {
                let mut s = 0.0;
                for tt in 0..dims.a {
                    s += d[(row, tt)] * fit[(tt, m)];
                }
                total += lambda * s * s;
            }
        }
    }
    total
}

/// Central finite-difference gradient of a scalar function of a matrix.
pub fn fd_gradient(f: impl Fn(&DMatrix<f64>) -> f64, x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            let mut p = x.clone();
            let mut m = x.clone();
            p[(i, j)] += h;
            m[(i, j)] -= h;
            g[(i, j)] = (f(&p) - f(&m)) / (2.0 * h);
        }
    }
    g
}

/// Eigenvectors of a symmetric matrix for the `k` largest eigenvalues.
fn leading_eigenvectors(s: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((s + s.transpose()) * 0.5);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    DMatrix::from_fn(s.nrows(), k, |r, c| eig.eigenvectors[(r, idx[c])])
}

/// Plain GLRAM by alternating eigen-updates from a given `L`.
/// Returns `(L, R, objective)` with objective `sum ||M_i - L L^T M_i R R^T||^2`.
pub fn glram(
    slices: &[DMatrix<f64>],
    l0: &DMatrix<f64>,
    r2: usize,
    iterations: usize,
) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let (a, b) = slices[0].shape();
    let r1 = l0.ncols();
    let total: f64 = slices.iter().map(|m| m.norm_squared()).sum();
    let mut l = l0.clone();
    let mut r = DMatrix::zeros(b, r2);
    let mut prev = f64::INFINITY;
    for _ in 0..iterations {
        let mut sr = DMatrix::zeros(b, b);
        for m in slices {
            let p = l.transpose() * m;
            sr += p.transpose() * p;
        }
        r = leading_eigenvectors(&sr, r2);
        let mut sl = DMatrix::zeros(a, a);
        for m in slices {
            let p = m * &r;
            sl += &p * p.transpose();
        }
        l = leading_eigenvectors(&sl, r1);
        let captured: f64 = slices
            .iter()
            .map(|m| (l.transpose() * m * &r).norm_squared())
            .sum();
        let f = total - captured;
        if (prev - f).abs() <= 1e-15 * total {
            prev = f;
            break;
        }
        prev = f;
    }
    (l, r, prev)
}

/// Objective with the cores eliminated, `f(L, R) = min_G F(L, G, R)`, plus
/// its Euclidean gradients in `L` and `R` (envelope theorem: the partial
/// gradients at the optimal cores).
pub fn eliminated_objective(
    slices: &[DMatrix<f64>],
    l: &DMatrix<f64>,
    r: &DMatrix<f64>,
    d: &DMatrix<f64>,
    lambda: f64,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let dtd = d.transpose() * d;
    let r1 = l.ncols();
    let k = DMatrix::identity(r1, r1) + l.transpose() * &dtd * l * lambda;
    let k_inv = k
        .try_inverse()
        .expect("I + lambda L'D'DL is positive definite");
    let rtr = r.transpose() * r;
    let mut f = 0.0;
    let mut gl = DMatrix::zeros(l.nrows(), l.ncols());
    let mut gr = DMatrix::zeros(r.nrows(), r.ncols());
    for m in slices {
        let g = &k_inv * l.transpose() * m * r;
        let fit = l * &g * r.transpose();
        let e = m - &fit;
        f += e.norm_squared() + lambda * (d * &fit).norm_squared();
        gl += -2.0 * &e * r * g.transpose() + 2.0 * lambda * &dtd * l * &g * &rtr * g.transpose();
        gr += -2.0 * e.transpose() * l * &g
            + 2.0 * lambda * r * g.transpose() * l.transpose() * &dtd * l * &g;
    }
    (f, gl, gr)
}

fn stiefel_project(x: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let xtg = x.transpose() * g;
    g - x * ((&xtg + xtg.transpose()) * 0.5)
}

fn retract(x: &DMatrix<f64>) -> DMatrix<f64> {
    gram_schmidt(x)
}

/// Riemannian gradient descent with Armijo backtracking on the product of
/// two Stiefel manifolds, from one starting point.
pub fn projected_gradient_descent(
    slices: &[DMatrix<f64>],
    l0: DMatrix<f64>,
    r0: DMatrix<f64>,
    d: &DMatrix<f64>,
    lambda: f64,
    max_iter: usize,
) -> f64 {
    let (mut l, mut r) = (l0, r0);
    let (mut f, gl, gr) = eliminated_objective(slices, &l, &r, d, lambda);
    let (mut xl, mut xr) = (stiefel_project(&l, &gl), stiefel_project(&r, &gr));
    let mut step = 0.1 / (1.0 + f);
    for _ in 0..max_iter {
        let gnorm2 = xl.norm_squared() + xr.norm_squared();
        if gnorm2.sqrt() <= 1e-11 * (1.0 + f) {
            break;
        }
        let mut t = step * 4.0;
        let mut accepted = None;
        for _ in 0..60 {
            let nl = retract(&(&l - &xl * t));
            let nr = retract(&(&r - &xr * t));
            let (nf, ngl, ngr) = eliminated_objective(slices, &nl, &nr, d, lambda);
            if nf <= f - 1e-4 * t * gnorm2 {
                accepted = Some((nl, nr, nf, ngl, ngr));
                break;
            }
            t *= 0.5;
        }
        let Some((nl, nr, nf, ngl, ngr)) = accepted else {
            break;
        };
        step = t;
        let done = (f - nf) <= 1e-16 * f.abs().max(1e-300);
        xl = stiefel_project(&nl, &ngl);
        xr = stiefel_project(&nr, &ngr);
        l = nl;
        r = nr;
        f = nf;
        if done {
            break;
        }
    }
    f
}

/// Best objective over `restarts` random starting points.
pub fn multistart_oracle(
    slices: &[DMatrix<f64>],
    r1: usize,
    r2: usize,
    d: &DMatrix<f64>,
    lambda: f64,
    restarts: usize,
    seed: u64,
) -> f64 {
    let (a, b) = slices[0].shape();
    (0..restarts)
        .map(|k| {
            let l0 = random_orthonormal(a, r1, seed.wrapping_mul(1000).wrapping_add(2 * k as u64));
            let r0 = random_orthonormal(
                b,
                r2,
                seed.wrapping_mul(1000).wrapping_add(2 * k as u64 + 1),
            );
            projected_gradient_descent(slices, l0, r0, d, lambda, 5000)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Orthogonal projector onto a column space via a fresh Gram-Schmidt.
pub fn projector_of(m: &DMatrix<f64>) -> DMatrix<f64> {
    let q = gram_schmidt(m);
    &q * q.transpose()
}
