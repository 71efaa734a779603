//! Independent reference implementations and the checks comparing them
//! with the library. Each check returns the first mismatch as an error.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

use tdlbm::lbm::{col_conditionals, complete_loglik, row_conditionals, CoPartition, MarginalCache};
use tdlbm::metrics::{ari, cari};
use tdlbm::nlme_fit::{fit_block, init_block, BlockData, CellRef, NlmeOptions};
use tdlbm::rng::stream;
use tdlbm::selection::icl_value;
use tdlbm::sim_model::{conditional_loglik, marginal_loglik_mc_estimate, BlockParams, CellCurve, RandomEffectConfig};
use tdlbm::splines::{eval_shape, make_basis, SplineSpec};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------- splines ----------

fn clamped_knots(degree: usize, interior: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut k = vec![lo; degree + 1];
    for i in 1..=interior {
        k.push(lo + (hi - lo) * i as f64 / (interior + 1) as f64);
    }
    k.extend(std::iter::repeat_n(hi, degree + 1));
    k
}

/// Textbook recursion, half-open spans; `t` must be below the upper bound.
fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64) -> f64 {
    if p == 0 {
        return if knots[i] <= t && t < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let left = knots[i + p] - knots[i];
    if left > 0.0 {
        v += (t - knots[i]) / left * cox_de_boor(knots, i, p - 1, t);
    }
    let right = knots[i + p + 1] - knots[i + 1];
    if right > 0.0 {
        v += (knots[i + p + 1] - t) / right * cox_de_boor(knots, i + 1, p - 1, t);
    }
    v
}

pub fn basis_matches_recursive_de_boor() -> Check {
    let mut rng = stream(2024, &[1]);
    for _ in 0..100 {
        let degree = rng.random_range(0..=5);
        let interior = rng.random_range(0..=8);
        let lo = rng.random_range(-3.0..1.0);
        let hi = lo + rng.random_range(0.5..4.0);
        let t = lo + (hi - lo) * rng.random_range(0.0..0.999_999);
        let spec = SplineSpec::new(degree, interior, lo, hi).unwrap();
        let knots = clamped_knots(degree, interior, lo, hi);
        let row = make_basis(&spec, &[t]).unwrap();
        ensure!(row.cols() == interior + degree + 1, "basis width {}", row.cols());
        for b in 0..row.cols() {
            let want = cox_de_boor(&knots, b, degree, t);
            ensure!((row.get(0, b) - want).abs() < 1e-10, "deg {degree} knots {interior} t {t} basis {b}");
        }
    }
    Ok(())
}

pub fn quadratic_example_row() -> Check {
    let spec = SplineSpec::new(2, 1, 0.0, 1.0).unwrap();
    let knots = clamped_knots(2, 1, 0.0, 1.0);
    let row = make_basis(&spec, &[0.25]).unwrap();
    for b in 0..4 {
        ensure!((row.get(0, b) - cox_de_boor(&knots, b, 2, 0.25)).abs() < 1e-12, "quadratic example basis {b}");
    }
    Ok(())
}

pub fn shape_values_match_pointwise_oracle() -> Check {
    let mut rng = stream(7, &[]);
    let spec = SplineSpec::cubic(4, 0.0, 1.0).unwrap();
    let knots = clamped_knots(3, 4, 0.0, 1.0);
    let beta: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let times: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..0.9999)).collect();
    let got = eval_shape(&make_basis(&spec, &times).unwrap(), &beta).unwrap();
    for (t, g) in times.iter().zip(got) {
        let want: f64 = (0..8).map(|b| beta[b] * cox_de_boor(&knots, b, 3, *t)).sum();
        ensure!((g - want).abs() < 1e-10, "shape at {t}: {g} vs {want}");
    }
    Ok(())
}

// ---------- Monte Carlo marginal ----------

pub fn amplitude_marginal_matches_quadrature() -> Check {
    let spec = SplineSpec::cubic(4, 0.0, 1.0).unwrap();
    let tff = RandomEffectConfig::new(true, false, false);
    let mut rng = stream(99, &[]);
    for case in 0..20u64 {
        let beta: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let var_a = rng.random_range(0.05..1.5);
        let params = BlockParams {
            mu_alpha: [0.0; 3],
            sigma_alpha: [var_a, 0.0, 0.0],
            sigma_eps: rng.random_range(0.4..1.2),
            beta,
        };
        let times: Vec<f64> = (0..rng.random_range(3..9)).map(|i| i as f64 / 8.0).collect();
        let values: Vec<f64> = times.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let curve = CellCurve::full(times, values);

        // midpoint rule in the amplitude over +-10 sd, with the max factored out
        let sd = var_a.sqrt();
        let nq = 2000;
        let h = 20.0 * sd / nq as f64;
        let logs: Vec<f64> = (0..nq)
            .map(|q| {
                let a = -10.0 * sd + (q as f64 + 0.5) * h;
                let log_prior = -0.5 * (2.0 * std::f64::consts::PI * var_a).ln() - a * a / (2.0 * var_a);
                conditional_loglik(&curve, [a, 0.0, 0.0], &params, &spec).unwrap() + log_prior
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let quad = max + (logs.iter().map(|l| (l - max).exp()).sum::<f64>() * h).ln();

        let est = marginal_loglik_mc_estimate(&curve, &params, tff, &spec, 5000, &mut stream(5, &[case])).unwrap();
        ensure!(
            (est.log_mean - quad).abs() <= 3.0 * est.std_error,
            "case {case}: mc {} +- {} vs quadrature {quad}",
            est.log_mean,
            est.std_error
        );
    }
    Ok(())
}

// ---------- latent block model ----------

fn labelings(len: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..k).map(move |c| {
                    let mut v = v.clone();
                    v.push(c);
                    v
                })
            })
            .collect();
    }
    out
}

fn random_cache(seed: u64) -> MarginalCache {
    let mut rng = stream(seed, &[]);
    let data: Vec<f64> = (0..16).map(|_| -rng.random_range(0.0..6.0)).collect();
    MarginalCache::from_vec(2, 2, 2, 2, data).unwrap()
}

fn direct_loglik(c: &MarginalCache, z: &[usize], w: &[usize], pi: &[f64], rho: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..2 {
        s += pi[z[i]].ln();
    }
    for j in 0..2 {
        s += rho[w[j]].ln();
    }
    for i in 0..2 {
        for j in 0..2 {
            s += c.get(i, j, z[i], w[j]);
        }
    }
    s
}

pub fn complete_loglik_matches_direct_sum_exhaustively() -> Check {
    let (pi, rho) = (vec![0.3, 0.7], vec![0.55, 0.45]);
    for seed in 0..5 {
        let cache = random_cache(seed);
        for z in labelings(2, 2) {
            for w in labelings(2, 2) {
                let part = CoPartition {
                    z: z.clone(),
                    w: w.clone(),
                    pi: pi.clone(),
                    rho: rho.clone(),
                };
                let got = complete_loglik(&cache, &part).unwrap();
                ensure!((got - direct_loglik(&cache, &z, &w, &pi, &rho)).abs() < 1e-12, "loglik at {z:?} {w:?}");
            }
        }
    }
    Ok(())
}

pub fn conditionals_match_normalized_joint() -> Check {
    let (pi, rho) = (vec![0.3, 0.7], vec![0.55, 0.45]);
    for seed in 0..5 {
        let cache = random_cache(10 + seed);
        for w in labelings(2, 2) {
            let rows = row_conditionals(&cache, &w, &pi).unwrap();
            let joint: Vec<(Vec<usize>, f64)> = labelings(2, 2)
                .into_iter()
                .map(|z| {
                    let p = direct_loglik(&cache, &z, &w, &pi, &rho).exp();
                    (z, p)
                })
                .collect();
            let total: f64 = joint.iter().map(|(_, p)| p).sum();
            for i in 0..2 {
                for k in 0..2 {
                    let p: f64 = joint.iter().filter(|(z, _)| z[i] == k).map(|(_, p)| p).sum::<f64>() / total;
                    ensure!((rows[i][k] - p).abs() < 1e-12, "row {i} cluster {k}");
                }
            }
        }
        for z in labelings(2, 2) {
            let cols = col_conditionals(&cache, &z, &rho).unwrap();
            let joint: Vec<(Vec<usize>, f64)> = labelings(2, 2)
                .into_iter()
                .map(|w| {
                    let p = direct_loglik(&cache, &z, &w, &pi, &rho).exp();
                    (w, p)
                })
                .collect();
            let total: f64 = joint.iter().map(|(_, p)| p).sum();
            for j in 0..2 {
                for l in 0..2 {
                    let p: f64 = joint.iter().filter(|(w, _)| w[j] == l).map(|(_, p)| p).sum::<f64>() / total;
                    ensure!((cols[j][l] - p).abs() < 1e-12, "column {j} cluster {l}");
                }
            }
        }
    }
    Ok(())
}

// ---------- ARI / CARI ----------

fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut n_pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            n_pairs += 1.0;
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                _ => {}
            }
        }
    }
    if n_pairs == 0.0 {
        return 1.0;
    }
    let (sa, sb) = (both + only_a, both + only_b);
    let expected = sa * sb / n_pairs;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return if sa == sb { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

pub fn ari_matches_pair_enumeration_exhaustively() -> Check {
    for len in 1..=6 {
        let all = labelings(len, 3);
        for a in &all {
            for b in &all {
                let got = ari(a, b).unwrap();
                let want = ari_by_pairs(a, b);
                ensure!((got - want).abs() < 1e-12, "{a:?} {b:?}: {got} vs {want}");
            }
        }
    }
    Ok(())
}

pub fn cari_matches_materialized_cells_exhaustively() -> Check {
    let cells = |z: &[usize], w: &[usize]| -> Vec<usize> {
        z.iter().flat_map(|&zi| w.iter().map(move |&wj| zi * 10 + wj)).collect()
    };
    for (n, d) in [(3, 2), (2, 3), (1, 6), (6, 1)] {
        let zs = labelings(n, n.min(3));
        let ws = labelings(d, d.min(3));
        for z1 in &zs {
            for w1 in &ws {
                for z2 in &zs {
                    for w2 in &ws {
                        let got = cari(z1, w1, z2, w2).unwrap();
                        let want = ari_by_pairs(&cells(z1, w1), &cells(z2, w2));
                        ensure!((got - want).abs() < 1e-12, "{z1:?} {w1:?} {z2:?} {w2:?}");
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn cari_hand_case() -> Check {
    let (z1, w1) = (vec![0, 0, 1], vec![0, 1]);
    let (z2, w2) = (vec![0, 1, 1], vec![1, 1]);
    let m1 = vec![0, 1, 0, 1, 2, 3];
    let m2 = vec![0, 0, 1, 1, 1, 1];
    ensure!((cari(&z1, &w1, &z2, &w2).unwrap() - ari(&m1, &m2).unwrap()).abs() < 1e-15, "hand case");
    Ok(())
}

// ---------- block fit vs least squares ----------

/// Solves the normal equations by Gaussian elimination with partial
/// pivoting; returns the solution and the inverse's diagonal.
fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = x[0].len();
    let mut a = vec![vec![0.0; 2 * p + 1]; p];
    for (row, &yv) in x.iter().zip(y) {
        for r in 0..p {
            for c in 0..p {
                a[r][c] += row[r] * row[c];
            }
            a[r][2 * p] += row[r] * yv;
        }
    }
    for (r, ar) in a.iter_mut().enumerate() {
        ar[p + r] = 1.0;
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..p {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    let beta = a.iter().map(|r| r[2 * p]).collect();
    let diag = (0..p).map(|r| a[r][p + r]).collect();
    (beta, diag)
}

pub fn fff_block_fit_matches_ols() -> Check {
    let spec = SplineSpec::cubic(4, 0.0, 1.0).unwrap();
    let off = RandomEffectConfig::new(false, false, false);
    let times: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
    let basis = make_basis(&spec, &times).unwrap();
    let truth: Vec<f64> = vec![0.4, -1.0, 0.8, 1.3, -0.2, 0.5, -0.9, 0.1];
    let mean = eval_shape(&basis, &truth).unwrap();
    let sigma = 0.3;
    for seed in 0..5 {
        let mut rng = stream(seed, &[42]);
        let curves: Vec<CellCurve> = (0..12)
            .map(|_| {
                let v = mean.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                CellCurve::full(times.clone(), v)
            })
            .collect();
        let data = BlockData::new(
            curves
                .iter()
                .enumerate()
                .map(|(c, curve)| CellRef { i: c, j: 0, curve })
                .collect(),
        );
        let mut x = vec![];
        let mut y = vec![];
        for c in &curves {
            for (r, v) in c.values.iter().enumerate() {
                x.push(basis.row(r).to_vec());
                y.push(v.unwrap());
            }
        }
        let (ols, inv_diag) = normal_equations(&x, &y);

        let init = init_block(&data, &spec, off).unwrap();
        for (a, b) in init.beta.iter().zip(&ols) {
            ensure!((a - b).abs() < 1e-8, "seed {seed}: pooled start {a} vs {b}");
        }
        let (fit, _) = fit_block(&data, off, &spec, &init, NlmeOptions::default()).unwrap();
        for b in 0..8 {
            let se = sigma * inv_diag[b].sqrt();
            ensure!((fit.beta[b] - ols[b]).abs() <= 2.0 * se, "seed {seed} coef {b}");
        }
    }
    Ok(())
}

// ---------- ICL ----------

/// ICL at complete log-likelihood 0 for n = 100, d = 20, K = 4, L = 3,
/// nu = 11, with the closed form it should equal.
pub fn icl_example() -> (f64, f64) {
    let want = -(1.5 * 100f64.ln() + 20f64.ln() + 66.0 * 2000f64.ln());
    (icl_value(0.0, 100, 20, 4, 3, 11), want)
}
