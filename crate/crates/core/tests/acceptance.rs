//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so the per-criterion verdicts are always printed. Set `ACCEPTANCE_ONLY`
//! to a comma-separated list of criterion numbers to run a subset.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use common::*;
use smoothhooi::io::{
    gridify, quality_filter, read_long_csv_path, LongRecord, DEFAULT_GRID_START_HOUR,
};
use smoothhooi::postprocess::identify;
use smoothhooi::sim::{
    apply_structured_missing, loss_subspace, run_study, Method, SimulationConfig,
};
use smoothhooi::{
    fit_complete, fit_missing, fit_penalized_components, solve_core, Decomposition, Dims,
    FitOptions, MaskedTensor, SmoothingOperator, Tensor3,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Largest relative step-to-step increase of an objective trace.
fn worst_increase(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn complete(t: Tensor3) -> MaskedTensor {
    MaskedTensor::fully_observed(t)
}

// ---------------------------------------------------------------------------

fn criterion_1(increases: &mut Vec<f64>) -> Verdict {
    let start = Instant::now();
    let shapes = [
        (Dims::new(4, 2, 2), [(2, 1), (2, 2)]),
        (Dims::new(5, 3, 3), [(2, 1), (2, 2)]),
    ];
    let lambdas = [0.0, 0.5, 2.0];
    let mut worst: f64 = 0.0;
    let mut worst_default: f64 = 0.0;
    let mut failures = Vec::new();
    for k in 0..25u64 {
        let (dims, ranks) = shapes[(k % 2) as usize];
        let (r1, r2) = ranks[((k / 2) % 2) as usize];
        let lambda = lambdas[((k / 4) % 3) as usize];
        let t = complete(random_tensor(dims, 100 + k));
        let d = periodic_d(dims.a);
        let oracle = multistart_oracle(&t.values().slices(), r1, r2, &d, lambda, 200, k);
        let excess = |opts: &FitOptions, increases: &mut Vec<f64>| {
            let dec = fit_complete(&t, opts).expect("fit");
            increases.push(worst_increase(&dec.objective_trace));
            let ours = objective_by_loops(&t, &dec.l_factor, &dec.cores, &dec.r_factor, &d, lambda);
            (ours - oracle) / oracle.abs().max(1e-300)
        };
        // The default stopping rule bounds the per-iteration change, not the
        // distance to the optimum, so the comparison runs the solver tighter.
        let tight = FitOptions {
            inner_tolerance: 1e-10,
            ..FitOptions::new(r1, r2, lambda)
        };
        worst_default = worst_default.max(excess(&FitOptions::new(r1, r2, lambda), increases));
        let gap = excess(&tight, increases);
        worst = worst.max(gap);
        if gap > 1e-6 {
            failures.push(format!(
                "#{k} {dims:?} ({r1},{r2}) lambda={lambda}: gap {gap:.2e}"
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    verdict(
        pass,
        format!(
            "25 instances, worst relative excess over oracle {worst:.2e} \
             (inner tolerance 1e-10; {worst_default:.2e} at the default), {secs:.1}s{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; {}", failures.join("; "))
            }
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = rng(2);
    let mut worst: f64 = 0.0;
    for k in 0..50u64 {
        let a = rng.random_range(4..12usize);
        let b = rng.random_range(2..5usize);
        let r1 = rng.random_range(1..=a.min(4));
        let r2 = rng.random_range(1..=b);
        let lambda = if k % 5 == 0 {
            0.0
        } else {
            rng.random_range(0.0..10.0)
        };
        let m = DMatrix::from_fn(a, b, |_, _| rng.random_range(-2.0..2.0));
        let l = random_orthonormal(a, r1, 1000 + 2 * k);
        let r = random_orthonormal(b, r2, 1001 + 2 * k);
        let op = SmoothingOperator::build(a, smoothhooi::Boundary::Periodic, lambda).unwrap();
        let g = solve_core(&m, &l, &r, &op).unwrap();
        let d = periodic_d(a);
        let f = |g: &DMatrix<f64>| {
            let fit = &l * g * r.transpose();
            (&m - &fit).norm_squared() + lambda * (&d * &fit).norm_squared()
        };
        worst = worst.max(fd_gradient(f, &g, 1e-4).norm());
    }
    verdict(
        worst <= 1e-8,
        format!("50 instances, max FD gradient norm {worst:.2e}"),
    )
}

fn criterion_3(increases: &[f64], study_increases: &[f64]) -> Verdict {
    let w1 = increases.iter().copied().fold(0.0, f64::max);
    let w5 = study_increases.iter().copied().fold(0.0, f64::max);
    let pass = !increases.is_empty() && !study_increases.is_empty() && w1 <= 1e-10 && w5 <= 1e-10;
    verdict(
        pass,
        format!(
            "max relative increase {w1:.2e} over {} oracle-comparison fits, {w5:.2e} over {} study rows",
            increases.len(),
            study_increases.len()
        ),
    )
}

/// `max_k sum_i ||L^T M_i R||^2` style GLRAM objective of given factors.
fn glram_objective(slices: &[DMatrix<f64>], l: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    slices
        .iter()
        .map(|m| (m - l * (l.transpose() * m * r) * r.transpose()).norm_squared())
        .sum()
}

fn criterion_4() -> Verdict {
    let dims = Dims::new(24, 3, 30);
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let (r1, r2) = [(3, 2), (2, 1), (4, 2), (5, 3)][(k % 4) as usize];
        let t = complete(random_tensor(dims, 400 + k));
        let slices = t.values().slices();
        let opts = FitOptions {
            inner_tolerance: 1e-14,
            max_inner_iterations: 20_000,
            ..FitOptions::new(r1, r2, 0.0)
        };
        let dec = fit_complete(&t, &opts).unwrap();
        let ours = glram_objective(&slices, &dec.l_factor, &dec.r_factor);
        let (_, _, reference) = glram(&slices, &DMatrix::identity(24, r1), r2, 20_000);
        worst = worst.max((ours - reference).abs() / reference);
    }
    verdict(
        worst <= 1e-8,
        format!("20 tensors 24x3x30, max relative objective gap {worst:.2e}"),
    )
}

fn criterion_5(study_increases: &mut Vec<f64>) -> Verdict {
    let start = Instant::now();
    let config = SimulationConfig::default();
    let result = run_study(&config).expect("study runs");
    for row in &result.rows {
        study_increases.push(row.max_objective_increase);
    }
    let median = |v: Vec<f64>| {
        let mut v = v;
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let reps = config.replications;
    let collect = |m: Method| -> Vec<Option<f64>> {
        (0..reps)
            .map(|r| result.row(r, m).and_then(|row| row.loss_m))
            .collect()
    };
    let (cv, oracle, l0) = (
        collect(Method::Cv),
        collect(Method::Oracle),
        collect(Method::Lambda0),
    );
    let all_present = cv.iter().chain(&oracle).chain(&l0).all(Option::is_some);
    let cv_v: Vec<f64> = cv.iter().flatten().copied().collect();
    let or_v: Vec<f64> = oracle.iter().flatten().copied().collect();
    let ratio = median(cv_v) / median(or_v);
    let wins = cv
        .iter()
        .zip(&l0)
        .filter(|(c, z)| matches!((c, z), (Some(c), Some(z)) if c < z))
        .count();
    let win_rate = wins as f64 / reps as f64;
    let recovered = (0..reps)
        .filter(|&r| {
            result
                .row(r, Method::CvFlexible)
                .is_some_and(|row| row.r1_hat == Some(3) && row.r2_hat == Some(2))
        })
        .count();
    let rec_rate = recovered as f64 / reps as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = all_present
        && result.failures.is_empty()
        && ratio <= 1.25
        && win_rate >= 0.8
        && rec_rate >= 0.5;
    verdict(
        pass,
        format!(
            "{reps} replications: CV/oracle median loss_M {ratio:.3}, CV beats lambda=0 in {wins}/{reps}, \
             rank (3,2) recovered in {recovered}/{reps}, {} failures, {secs:.0}s",
            result.failures.len()
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 0.0;
    let mut bad = Vec::new();
    let mut tested = 0;
    for n in [100usize, 200, 500] {
        let t = Tensor3::zeros(Dims::new(24, 3, n));
        for seed in 0..30u64 {
            let m = apply_structured_missing(&t, 20, seed).unwrap();
            let rate = 1.0 - m.observed_count() as f64 / m.dims().len() as f64;
            lo = lo.min(rate);
            hi = hi.max(rate);
            tested += 1;
            if !(0.37..=0.49).contains(&rate) {
                bad.push(format!("n={n} seed={seed}: {:.1}%", 100.0 * rate));
            }
        }
    }
    verdict(
        bad.is_empty(),
        format!(
            "{tested} draws (n in 100/200/500, seeds 0..30): realized rate {:.1}%..{:.1}%{}",
            100.0 * lo,
            100.0 * hi,
            if bad.is_empty() {
                String::new()
            } else {
                format!("; outside: {}", bad.join(", "))
            }
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut rng = rng(7);
    let mut recon: f64 = 0.0;
    let mut offdiag: f64 = 0.0;
    let mut ordered = true;
    let mut idem: f64 = 0.0;
    for k in 0..50u64 {
        let a = rng.random_range(6..14usize);
        let b = rng.random_range(3..6usize);
        let n = rng.random_range(5..15usize);
        let r1 = rng.random_range(1..=4usize);
        let r2 = rng.random_range(1..=b.min(3));
        let lambda = [0.0, 0.3, 3.0][(k % 3) as usize];
        let t = complete(random_tensor(Dims::new(a, b, n), 700 + k));
        let dec = fit_complete(&t, &FitOptions::new(r1, r2, lambda)).unwrap();
        let id = identify(&dec);
        for i in 0..n {
            let before = dec.reconstruct_slice(i);
            let diff = (&before - id.reconstruct_slice(i)).norm() / before.norm().max(1.0);
            recon = recon.max(diff);
        }
        let mut g1 = DMatrix::<f64>::zeros(r1, r1);
        let mut g2 = DMatrix::<f64>::zeros(r2, r2);
        for g in &id.cores_tilde {
            g1 += g * g.transpose();
            g2 += g.transpose() * g;
        }
        for gram in [&g1, &g2] {
            let scale = gram.diagonal().max().max(1.0);
            for i in 0..gram.nrows() {
                for j in 0..gram.ncols() {
                    if i != j {
                        offdiag = offdiag.max(gram[(i, j)].abs() / scale);
                    }
                }
                if i > 0 && gram[(i, i)] > gram[(i - 1, i - 1)] * (1.0 + 1e-12) {
                    ordered = false;
                }
            }
        }
        let again = identify(&id.to_decomposition(&dec));
        let up_to_signs = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            (0..x.ncols())
                .map(|c| {
                    let (u, v) = (x.column(c), y.column(c));
                    (u - v).amax().min((u + v).amax())
                })
                .fold(0.0, f64::max)
        };
        idem = idem
            .max(up_to_signs(&id.l_tilde, &again.l_tilde))
            .max(up_to_signs(&id.r_tilde, &again.r_tilde));
    }
    let pass = recon <= 1e-10 && offdiag <= 1e-8 && ordered && idem <= 1e-8;
    verdict(
        pass,
        format!(
            "50 fits: reconstruction change {recon:.1e}, off-diagonal {offdiag:.1e}, \
             diagonals non-increasing {ordered}, idempotence gap {idem:.1e}"
        ),
    )
}

fn criterion_8() -> Verdict {
    let mut rot: f64 = 0.0;
    let mut orth: f64 = 0.0;
    let mut sym: f64 = 0.0;
    let mut rng = rng(8);
    for k in 0..20u64 {
        let a = rng.random_range(6..30usize);
        let r = rng.random_range(1..=a / 2);
        let q = random_orthonormal(a, 2 * r, 800 + k);
        let (p1, p2) = (q.columns(0, r).into_owned(), q.columns(r, r).into_owned());
        let o = random_orthonormal(r, r, 900 + k);
        rot = rot.max(loss_subspace(&p1, &(&p1 * o)).unwrap());
        orth = orth.max((loss_subspace(&p1, &p2).unwrap() - (r as f64).sqrt()).abs());
        let g = DMatrix::from_fn(a, r, |_, _| StandardNormal.sample(&mut rng));
        let p3 = gram_schmidt(&g);
        sym = sym.max((loss_subspace(&p1, &p3).unwrap() - loss_subspace(&p3, &p1).unwrap()).abs());
    }
    let pass = rot <= 1e-12 && orth <= 1e-12 && sym <= 1e-12;
    verdict(
        pass,
        format!(
            "rotated copies {rot:.1e}, orthogonal |d - sqrt(r)| {orth:.1e}, asymmetry {sym:.1e}"
        ),
    )
}

fn packaged_tensor() -> MaskedTensor {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic_abpm.csv");
    let records = read_long_csv_path(&path).expect("packaged dataset");
    let (kept, _) = quality_filter(&records).unwrap();
    gridify(&kept, DEFAULT_GRID_START_HOUR).unwrap().tensor
}

/// Orthonormal constant plus cos/sin pairs up to `max_freq` on a grid of `a`.
fn fourier_basis(a: usize, max_freq: usize) -> DMatrix<f64> {
    let mut cols = vec![vec![1.0 / (a as f64).sqrt(); a]];
    let c = (2.0 / a as f64).sqrt();
    for f in 1..=max_freq {
        let w = |t: usize| 2.0 * std::f64::consts::PI * (f * t) as f64 / a as f64;
        cols.push((0..a).map(|t| c * w(t).cos()).collect());
        cols.push((0..a).map(|t| c * w(t).sin()).collect());
    }
    DMatrix::from_fn(a, cols.len(), |i, j| cols[j][i])
}

fn max_angle_deg(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let s = (p.transpose() * q).singular_values();
    let smin = s
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .clamp(-1.0, 1.0);
    smin.acos().to_degrees()
}

/// `sum ||(D X_i)[t, :]||^2` over time points where subject `i` has no
/// observation at all.
fn curvature_on_missing_blocks(t: &MaskedTensor, dec: &Decomposition, d: &DMatrix<f64>) -> f64 {
    let dims = t.dims();
    let mut total = 0.0;
    for i in 0..dims.n {
        let curv = d * dec.reconstruct_slice(i);
        for tt in 0..dims.a {
            if (0..dims.b).all(|m| !t.is_observed(tt, m, i)) {
                total += curv.row(tt).norm_squared();
            }
        }
    }
    total.sqrt()
}

fn criterion_9() -> Verdict {
    let t = packaged_tensor();
    let a = t.dims().a;
    let lambda = 2.5e4;
    let opts = FitOptions::new(5, 2, lambda);
    let pc = fit_penalized_components(&t, &opts).unwrap();
    let angle = max_angle_deg(&pc.l_factor, &fourier_basis(a, 2));
    let smooth = fit_missing(&t, &opts).unwrap();
    let d = periodic_d(a);
    let blocks = (0..t.dims().n)
        .map(|i| {
            (0..a)
                .filter(|&tt| (0..t.dims().b).all(|m| !t.is_observed(tt, m, i)))
                .count()
        })
        .sum::<usize>();
    let c_pc = curvature_on_missing_blocks(&t, &pc, &d);
    let c_smooth = curvature_on_missing_blocks(&t, &smooth, &d);
    let ratio = c_pc / c_smooth;
    verdict(
        angle < 5.0 && ratio >= 5.0 && blocks > 0,
        format!(
            "ranks (5,2), lambda {lambda:e}: max angle to low-frequency basis {angle:.2} deg; \
             curvature on {blocks} missing blocks {c_pc:.3e} vs {c_smooth:.3e} (ratio {ratio:.0})"
        ),
    )
}

fn rec(s: &str, h: u32, m: &str, v: f64) -> LongRecord {
    LongRecord {
        subject_id: s.into(),
        hour: h,
        measure: m.into(),
        value: Some(v),
    }
}

fn criterion_10() -> Verdict {
    let mut problems = Vec::new();
    // Bounds: inclusive at the thresholds, set to missing just past them.
    let cases = [
        ("SBP", 240.0, true),
        ("SBP", 50.0, true),
        ("SBP", 240.01, false),
        ("SBP", 49.99, false),
        ("DBP", 140.0, true),
        ("DBP", 40.0, true),
        ("DBP", 140.01, false),
        ("DBP", 39.99, false),
        ("HR", 220.0, true),
        ("HR", 27.0, true),
        ("HR", 220.01, false),
        ("HR", 26.99, false),
    ];
    let records: Vec<LongRecord> = cases
        .iter()
        .enumerate()
        .map(|(k, (m, v, _))| rec("s", k as u32, m, *v))
        .collect();
    let (kept, rejected) = quality_filter(&records).unwrap();
    for (k, (m, v, keep)) in cases.iter().enumerate() {
        let is_kept = kept[k].value.is_some();
        let is_rejected = rejected.iter().any(|r| r.index == k);
        if is_kept != *keep || is_rejected == *keep {
            problems.push(format!("{m}={v} kept={is_kept}"));
        }
    }

    // Three subjects on a 24-hour grid starting at noon.
    let fixture = vec![
        rec("a", 12, "SBP", 120.0),
        rec("a", 12, "SBP", 130.0),
        rec("a", 12, "DBP", 80.0),
        rec("a", 12, "HR", 70.0),
        rec("a", 13, "SBP", 110.0),
        rec("a", 13, "DBP", 70.0),
        rec("a", 13, "HR", 60.0),
        rec("b", 0, "SBP", 140.0),
        rec("b", 0, "DBP", 90.0),
        rec("b", 0, "HR", 80.0),
        rec("b", 12, "SBP", 100.0),
        rec("b", 12, "DBP", 60.0),
        rec("b", 12, "HR", 66.0),
        rec("c", 13, "SBP", 150.0),
        rec("c", 13, "DBP", 100.0),
        rec("c", 13, "DBP", 96.0),
        rec("c", 13, "HR", 90.0),
        rec("c", 11, "SBP", 125.0),
    ];
    let g = gridify(&fixture, 12).unwrap();
    let expect = |s: &str| -> Vec<(usize, usize, f64)> {
        // (grid position, measure, raw cell value)
        match s {
            "a" => vec![
                (0, 0, 125.0),
                (0, 1, 80.0),
                (0, 2, 70.0),
                (1, 0, 110.0),
                (1, 1, 70.0),
                (1, 2, 60.0),
            ],
            "b" => vec![
                (12, 0, 140.0),
                (12, 1, 90.0),
                (12, 2, 80.0),
                (0, 0, 100.0),
                (0, 1, 60.0),
                (0, 2, 66.0),
            ],
            _ => vec![(1, 0, 150.0), (1, 1, 98.0), (1, 2, 90.0), (23, 0, 125.0)],
        }
    };
    if g.subjects != ["a", "b", "c"] || g.normalization.measures != ["SBP", "DBP", "HR"] {
        problems.push(format!(
            "order {:?} {:?}",
            g.subjects, g.normalization.measures
        ));
    }
    let dims = g.tensor.dims();
    if dims != Dims::new(24, 3, 3) {
        problems.push(format!("dims {dims:?}"));
    }
    let all: Vec<(usize, usize, usize, f64)> = ["a", "b", "c"]
        .iter()
        .enumerate()
        .flat_map(|(i, s)| expect(s).into_iter().map(move |(t, m, v)| (t, m, i, v)))
        .collect();
    for m in 0..3 {
        let vals: Vec<f64> = all.iter().filter(|c| c.1 == m).map(|c| c.3).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd =
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        let norm = &g.normalization;
        if (norm.means[m] - mean).abs() > 1e-12 || (norm.sds[m] - sd).abs() > 1e-12 {
            problems.push(format!(
                "measure {m}: mean/sd {}/{} vs {mean}/{sd}",
                norm.means[m], norm.sds[m]
            ));
        }
        for &(t, mm, i, v) in all.iter().filter(|c| c.1 == m) {
            let z = (v - mean) / sd;
            if !g.tensor.is_observed(t, mm, i)
                || (g.tensor.values().get(t, mm, i) - z).abs() > 1e-12
            {
                problems.push(format!("cell ({t},{mm},{i})"));
            }
        }
    }
    let observed = g.tensor.observed_count();
    if observed != all.len() {
        problems.push(format!("{observed} observed cells, expected {}", all.len()));
    }
    for t in 0..24 {
        for m in 0..3 {
            for i in 0..3 {
                let listed = all.iter().any(|c| c.0 == t && c.1 == m && c.2 == i);
                if !listed
                    && (g.tensor.is_observed(t, m, i) || g.tensor.values().get(t, m, i) != 0.0)
                {
                    problems.push(format!("unlisted cell ({t},{m},{i}) not masked to zero"));
                }
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "12 threshold probes and 3-subject gridding fixture match".into()
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|s| s.contains(&k));

    let mut increases = Vec::new();
    let mut study_increases = Vec::new();
    let mut results: Vec<(u32, Option<Verdict>)> = Vec::new();
    let mut run = |k: u32, f: &mut dyn FnMut() -> Verdict| {
        let v = wanted(k).then(|| {
            let v = f();
            println!(
                "criterion {k}: {} {}",
                if v.pass { "PASS" } else { "FAIL" },
                v.detail
            );
            v
        });
        results.push((k, v));
    };
    run(1, &mut || criterion_1(&mut increases));
    run(2, &mut criterion_2);
    run(4, &mut criterion_4);
    run(5, &mut || criterion_5(&mut study_increases));
    run(3, &mut || criterion_3(&increases, &study_increases));
    run(6, &mut criterion_6);
    run(7, &mut criterion_7);
    run(8, &mut criterion_8);
    run(9, &mut criterion_9);
    run(10, &mut criterion_10);

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    let mut failed = 0;
    for (k, v) in &results {
        let status = match v {
            None => "SKIP",
            Some(v) if v.pass => "PASS",
            Some(_) => {
                failed += 1;
                "FAIL"
            }
        };
        println!("criterion {k}: {status}");
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
