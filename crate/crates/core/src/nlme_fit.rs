//! Approximate maximum likelihood for one block of the shape invariant
//! model, treated as a nonlinear mixed-effects model.
//!
//! Each outer iteration alternates two sub-steps:
//!
//! * penalized nonlinear least squares: the shape coefficients and the
//!   per-cell random effects are updated jointly by Gauss-Newton with step
//!   halving, the random effects being penalized by the current variances.
//!   The per-cell blocks are eliminated with a Schur complement so each
//!   iteration costs `O(cells)`.
//! * variance update: the conditional mean is linearized in the random
//!   effects around their modes, giving a linear mixed model whose Gaussian
//!   marginal likelihood is maximized over the residual and random-effect
//!   variances by EM.
//!
//! The random-effect means are held at zero; a free mean would be
//! confounded with the shape coefficients.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sim_model::{BlockParams, CellCurve, RandomEffectConfig};
use crate::splines::{sparse_row, ShapeFn, SplineSpec};

pub const VAR_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const PNLS_MAX_ITER: usize = 7;
const MAX_HALVINGS: usize = 8;
const PNLS_TOL: f64 = 1e-6;
const EM_MAX_ITER: usize = 100;
/// Outer iterations without a new best objective before giving up.
const STALL_LIMIT: usize = 5;
/// Relative stability of the penalized objective required to stop.
const PENALIZED_TOL: f64 = 1e-4;

/// A cell assigned to the block, tagged with its grid coordinates.
#[derive(Debug, Clone, Copy)]
pub struct CellRef<'a> {
    pub i: usize,
    pub j: usize,
    pub curve: &'a CellCurve,
}

#[derive(Debug, Clone, Default)]
pub struct BlockData<'a> {
    pub cells: Vec<CellRef<'a>>,
}

impl<'a> BlockData<'a> {
    pub fn new(cells: Vec<CellRef<'a>>) -> Self {
        BlockData { cells }
    }

    pub fn n_observed(&self) -> usize {
        self.cells.iter().map(|c| c.curve.n_observed()).sum()
    }

    /// Checks the minimum size needed to identify the block parameters.
    pub fn check_size(&self, config: RandomEffectConfig, spec: &SplineSpec) -> Result<()> {
        let needed = spec.dim() + config.n_active() + 1;
        if self.cells.is_empty() || self.n_observed() < needed {
            return Err(Error::Numeric(format!(
                "block has {} observed points in {} cells, needs at least {needed}",
                self.n_observed(),
                self.cells.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlmeOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NlmeOptions {
    fn default() -> Self {
        NlmeOptions {
            tol: 1e-6,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// Linearized marginal log-likelihood at the returned parameters.
    pub objective: f64,
    /// Posterior modes of the random effects, one per cell, in input order.
    pub re_modes: Vec<[f64; 3]>,
    /// Whether a Gauss-Newton system needed a diagonal boost.
    pub regularized: bool,
}

struct Obs {
    t: Vec<f64>,
    x: Vec<f64>,
}

fn observed(data: &BlockData<'_>) -> Vec<Obs> {
    data.cells
        .iter()
        .map(|c| {
            let (t, x) = c.curve.observed().unzip();
            Obs { t, x }
        })
        .collect()
}

/// Starting parameters from a pooled least-squares spline fit.
pub fn init_block(
    data: &BlockData<'_>,
    spec: &SplineSpec,
    config: RandomEffectConfig,
) -> Result<BlockParams> {
    if data.cells.is_empty() || data.n_observed() == 0 {
        return Err(Error::Numeric("cannot initialize an empty block".into()));
    }
    let obs = observed(data);
    let (t, x): (Vec<f64>, Vec<f64>) = obs
        .iter()
        .flat_map(|o| o.t.iter().copied().zip(o.x.iter().copied()))
        .unzip();
    let beta = pooled_spline_fit(spec, &t, &x)?;
    let shape = ShapeFn::new(spec, &beta)?;
    let n = x.len() as f64;
    let rss: f64 = t
        .iter()
        .zip(&x)
        .map(|(&ti, &xi)| (xi - shape.value(ti)).powi(2))
        .sum();
    let mean = x.iter().sum::<f64>() / n;
    let pooled_var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let re_var = (0.1 * pooled_var).max(VAR_FLOOR);
    let mut params = BlockParams {
        mu_alpha: [0.0; 3],
        sigma_alpha: [re_var; 3],
        sigma_eps: (rss / n).max(VAR_FLOOR).sqrt(),
        beta,
    };
    params.restrict(config);
    Ok(params)
}

/// Least-squares spline coefficients from the normal equations, falling
/// back to a ridge fit when the system is rank deficient.
pub fn pooled_spline_fit(spec: &SplineSpec, t: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let p = spec.dim();
    let knots = spec.knots();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; spec.degree + 1];
    for (&ti, &xi) in t.iter().zip(x) {
        let first = sparse_row(spec, &knots, ti, &mut row);
        for (a, &ba) in row.iter().enumerate() {
            xty[first + a] += ba * xi;
            for (b, &bb) in row.iter().enumerate() {
                xtx[(first + a, first + b)] += ba * bb;
            }
        }
    }
    if t.len() >= p {
        if let Some(ch) = xtx.clone().cholesky() {
            let sol = ch.solve(&xty);
            if sol.iter().all(|v| v.is_finite()) {
                return Ok(sol.iter().copied().collect());
            }
        }
    }
    let scale = (xtx.trace() / p as f64).max(1.0);
    let mut lambda = 1e-6 * scale;
    while lambda <= 1e2 * scale {
        let mut reg = xtx.clone();
        for d in 0..p {
            reg[(d, d)] += lambda;
        }
        if let Some(ch) = reg.cholesky() {
            return Ok(ch.solve(&xty).iter().copied().collect());
        }
        lambda *= 10.0;
    }
    Err(Error::Numeric("spline least-squares system is singular".into()))
}

/// Current state of the penalized least-squares problem.
struct State<'s> {
    spec: &'s SplineSpec,
    knots: Vec<f64>,
    active: Vec<usize>,
    var_eps: f64,
    re_var: [f64; 3],
}

impl State<'_> {
    fn objective(&self, obs: &[Obs], beta: &[f64], modes: &[[f64; 3]]) -> Result<f64> {
        let shape = ShapeFn::new(self.spec, beta)?;
        let mut total = 0.0;
        for (o, alpha) in obs.iter().zip(modes) {
            let s = alpha[1].exp();
            let rss: f64 = o
                .t
                .iter()
                .zip(&o.x)
                .map(|(&t, &x)| (x - alpha[0] - s * shape.value(t - alpha[2])).powi(2))
                .sum();
            total += rss / self.var_eps;
            for &a in &self.active {
                total += alpha[a] * alpha[a] / self.re_var[a];
            }
        }
        Ok(total)
    }

    /// Residuals and the Jacobian of the conditional mean with respect to
    /// beta (dense, `T x p`) and the active random effects (`T x q`).
    fn linearize(
        &self,
        o: &Obs,
        shape: &ShapeFn,
        beta_len: usize,
        alpha: &[f64; 3],
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = o.t.len();
        let q = self.active.len();
        let s = alpha[1].exp();
        let mut e = DVector::zeros(n);
        let mut jb = DMatrix::zeros(n, beta_len);
        let mut ja = DMatrix::zeros(n, q);
        let mut row = vec![0.0; self.spec.degree + 1];
        for (r, (&t, &x)) in o.t.iter().zip(&o.x).enumerate() {
            let u = t - alpha[2];
            let m = shape.value(u);
            e[r] = x - alpha[0] - s * m;
            let first = sparse_row(self.spec, &self.knots, u, &mut row);
            for (c, &b) in row.iter().enumerate() {
                jb[(r, first + c)] = s * b;
            }
            for (c, &a) in self.active.iter().enumerate() {
                ja[(r, c)] = match a {
                    0 => 1.0,
                    1 => s * m,
                    _ => -s * shape.slope(u),
                };
            }
        }
        (e, jb, ja)
    }
}

/// Fits one block starting from `init`, with random-effect modes starting
/// at zero.
pub fn fit_block(
    data: &BlockData<'_>,
    config: RandomEffectConfig,
    spec: &SplineSpec,
    init: &BlockParams,
    opts: NlmeOptions,
) -> Result<(BlockParams, FitDiagnostics)> {
    fit_block_from(data, config, spec, init, opts, None)
}

/// As [`fit_block`], optionally starting from given random-effect modes.
pub fn fit_block_from(
    data: &BlockData<'_>,
    config: RandomEffectConfig,
    spec: &SplineSpec,
    init: &BlockParams,
    opts: NlmeOptions,
    start_modes: Option<&[[f64; 3]]>,
) -> Result<(BlockParams, FitDiagnostics)> {
    data.check_size(config, spec)?;
    let mut init = init.clone();
    init.mu_alpha = [0.0; 3];
    init.restrict(config);
    init.validate(config, spec)?;

    let obs = observed(data);
    let active = config.active();
    let mut modes: Vec<[f64; 3]> = match start_modes {
        Some(m) if m.len() == obs.len() => m
            .iter()
            .map(|a| {
                let mut a = *a;
                for (idx, &on) in config.flags().iter().enumerate() {
                    if !on {
                        a[idx] = 0.0;
                    }
                }
                a
            })
            .collect(),
        Some(_) => return Err(Error::Shape("start modes do not match block cells".into())),
        None => vec![[0.0; 3]; obs.len()],
    };

    let mut state = State {
        spec,
        knots: spec.knots(),
        active: active.clone(),
        var_eps: (init.sigma_eps * init.sigma_eps).max(VAR_FLOOR),
        re_var: init.sigma_alpha.map(|v| v.max(VAR_FLOOR)),
    };
    let mut beta = init.beta.clone();
    let mut regularized = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut prev: Option<(f64, f64)> = None;
    let mut stalled = 0;
    // best iterate so far, replaced by the final one on convergence:
    // (objective, beta, modes, var_eps, re_var)
    let mut best: Option<(f64, Vec<f64>, Vec<[f64; 3]>, f64, [f64; 3])> = None;

    for it in 1..=opts.max_iter.max(1) {
        iterations = it;
        let (boosted, penalized) = pnls(&state, &obs, &mut beta, &mut modes)?;
        regularized |= boosted;
        let objective = variance_step(&mut state, &obs, &beta, &modes)?;
        let improved = match &best {
            Some((b, ..)) => objective > *b + opts.tol * b.abs().max(1.0),
            None => true,
        };
        if best.as_ref().is_none_or(|(b, ..)| objective > *b) {
            best = Some((objective, beta.clone(), modes.clone(), state.var_eps, state.re_var));
        }
        if let Some((p, q)) = prev {
            if (objective - p).abs() <= opts.tol * p.abs().max(1.0)
                && (penalized - q).abs() <= PENALIZED_TOL * q.abs().max(1.0)
            {
                converged = true;
                best = Some((objective, beta.clone(), modes.clone(), state.var_eps, state.re_var));
                break;
            }
        }
        prev = Some((objective, penalized));
        stalled = if improved { 0 } else { stalled + 1 };
        if stalled >= STALL_LIMIT {
            break;
        }
    }

    let (objective, beta, modes, var_eps, re_var) =
        best.ok_or_else(|| Error::Numeric("block fit produced no iterate".into()))?;
    let mut sigma_alpha = [0.0; 3];
    for &a in &active {
        sigma_alpha[a] = re_var[a];
    }
    let params = BlockParams {
        mu_alpha: [0.0; 3],
        sigma_alpha,
        sigma_eps: var_eps.sqrt(),
        beta,
    };
    Ok((
        params,
        FitDiagnostics {
            converged: converged && objective.is_finite(),
            iterations,
            objective,
            re_modes: modes,
            regularized,
        },
    ))
}

/// Penalized Gauss-Newton over beta and the modes. Returns whether a
/// diagonal boost was needed and the final penalized objective.
fn pnls(state: &State<'_>, obs: &[Obs], beta: &mut Vec<f64>, modes: &mut [[f64; 3]]) -> Result<(bool, f64)> {
    let p = beta.len();
    let q = state.active.len();
    let mut regularized = false;
    phase_search(state, obs, &ShapeFn::new(state.spec, beta)?, modes);
    let mut current = state.objective(obs, beta, modes)?;

    for _ in 0..PNLS_MAX_ITER {
        let shape = ShapeFn::new(state.spec, beta)?;
        let w = 1.0 / state.var_eps;
        let mut schur = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        // per cell: (H_cc^{-1}, H_c_beta as p rows of q, g_c)
        let mut per_cell: Vec<(Matrix3<f64>, Vec<Vector3<f64>>, Vector3<f64>)> = Vec::with_capacity(obs.len());
        let mut row = vec![0.0; state.spec.degree + 1];

        for (o, alpha) in obs.iter().zip(modes.iter()) {
            let s = alpha[1].exp();
            let mut hcc = Matrix3::<f64>::zeros();
            let mut gc = Vector3::<f64>::zeros();
            let mut hcb = vec![Vector3::<f64>::zeros(); if q > 0 { p } else { 0 }];
            for (&t, &x) in o.t.iter().zip(&o.x) {
                let u = t - alpha[2];
                let m = shape.value(u);
                let e = x - alpha[0] - s * m;
                let first = sparse_row(state.spec, &state.knots, u, &mut row);
                for (a, &ba) in row.iter().enumerate() {
                    let ja = s * ba * w;
                    rhs[first + a] += ja * e;
                    let base = (first + a) * p + first;
                    for (b, &bb) in row.iter().enumerate() {
                        schur[base + b] += ja * s * bb;
                    }
                }
                if q == 0 {
                    continue;
                }
                let mut za = Vector3::<f64>::zeros();
                for (c, &a) in state.active.iter().enumerate() {
                    za[c] = match a {
                        0 => 1.0,
                        1 => s * m,
                        _ => -s * shape.slope(u),
                    };
                }
                gc += za * (e * w);
                hcc += za * za.transpose() * w;
                for (a, &ba) in row.iter().enumerate() {
                    hcb[first + a] += za * (s * ba * w);
                }
            }
            if q == 0 {
                continue;
            }
            for (c, &a) in state.active.iter().enumerate() {
                hcc[(c, c)] += 1.0 / state.re_var[a];
                gc[c] -= alpha[a] / state.re_var[a];
            }
            // padding for inactive slots; their gradient entries stay zero
            for c in q..3 {
                hcc[(c, c)] = 1.0;
            }
            let hcc_inv = hcc
                .cholesky()
                .ok_or_else(|| Error::Numeric("random-effect block is not positive definite".into()))?
                .inverse();
            let tmp: Vec<Vector3<f64>> = hcb.iter().map(|h| hcc_inv * h).collect();
            for (i, ti) in tmp.iter().enumerate() {
                rhs[i] -= ti.dot(&gc);
                for (j, hj) in hcb.iter().enumerate() {
                    schur[i * p + j] -= ti.dot(hj);
                }
            }
            per_cell.push((hcc_inv, hcb, gc));
        }

        let schur = DMatrix::from_row_slice(p, p, &schur);
        let rhs = DVector::from_vec(rhs);
        let (delta_beta, boosted) = solve_boosted(schur, &rhs)?;
        regularized |= boosted;
        let deltas: Vec<Vector3<f64>> = per_cell
            .iter()
            .map(|(hinv, hcb, gc)| {
                let mut v = *gc;
                for (h, d) in hcb.iter().zip(delta_beta.iter()) {
                    v -= h * *d;
                }
                hinv * v
            })
            .collect();

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial_beta: Vec<f64> = beta
                .iter()
                .zip(delta_beta.iter())
                .map(|(b, d)| b + step * d)
                .collect();
            let trial_modes: Vec<[f64; 3]> = modes
                .iter()
                .enumerate()
                .map(|(c, a)| {
                    let mut a = *a;
                    if q > 0 {
                        for (k, &idx) in state.active.iter().enumerate() {
                            a[idx] += step * deltas[c][k];
                        }
                    }
                    a
                })
                .collect();
            let mut trial_modes = trial_modes;
            let (_, value) = refine_modes(state, obs, &ShapeFn::new(state.spec, &trial_beta)?, &mut trial_modes);
            if value.is_finite() && value < current {
                accepted = Some((trial_beta, trial_modes, value));
                break;
            }
            step *= 0.5;
        }
        let start = current;
        match accepted {
            Some((b, m, value)) => {
                *beta = b;
                modes.copy_from_slice(&m);
                current = value;
            }
            None => {
                // block-coordinate fallback: exact beta given the modes, then
                // modes given beta; both only ever lower the objective
                if let Some(b) = conditional_beta(state, obs, modes) {
                    let value = state.objective(obs, &b, modes)?;
                    if value.is_finite() && value < current {
                        *beta = b;
                        current = value;
                    }
                }
                current -= refine_modes(state, obs, &ShapeFn::new(state.spec, beta)?, modes).0;
            }
        }
        if start - current <= PNLS_TOL * (1.0 + current) {
            break;
        }
    }
    Ok((regularized, current))
}

/// Least-squares beta with the random effects held fixed.
fn conditional_beta(state: &State<'_>, obs: &[Obs], modes: &[[f64; 3]]) -> Option<Vec<f64>> {
    let p = state.spec.dim();
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut row = vec![0.0; state.spec.degree + 1];
    for (o, alpha) in obs.iter().zip(modes) {
        let s = alpha[1].exp();
        for (&t, &x) in o.t.iter().zip(&o.x) {
            let first = sparse_row(state.spec, &state.knots, t - alpha[2], &mut row);
            for (a, &ba) in row.iter().enumerate() {
                xty[first + a] += s * ba * (x - alpha[0]);
                for (b, &bb) in row.iter().enumerate() {
                    xtx[(first + a) * p + first + b] += s * s * ba * bb;
                }
            }
        }
    }
    let sol = DMatrix::from_row_slice(p, p, &xtx)
        .cholesky()?
        .solve(&DVector::from_vec(xty));
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

const PHASE_GRID: usize = 24;

/// Coarse global search over each cell's phase and then its log-scale,
/// with the amplitude shift profiled out in closed form. Gauss-Newton alone
/// stalls in flat or multimodal profiles (steps, narrow peaks). A candidate
/// replaces the current mode only if it lowers the cell objective.
fn phase_search(state: &State<'_>, obs: &[Obs], shape: &ShapeFn, modes: &mut [[f64; 3]]) {
    let width = state.spec.t_max - state.spec.t_min;
    for (effect, floor) in [(2, 0.05 * width), (1, 0.05)] {
        if !state.active.contains(&effect) {
            continue;
        }
        let reach = 3.0 * state.re_var[effect].sqrt().max(floor);
        for (o, alpha) in obs.iter().zip(modes.iter_mut()) {
            let mut best = cell_objective(state, o, shape, alpha);
            for g in 0..=PHASE_GRID {
                let mut trial = *alpha;
                trial[effect] = -reach + 2.0 * reach * g as f64 / PHASE_GRID as f64;
                profile_amplitude(state, o, shape, &mut trial);
                let value = cell_objective(state, o, shape, &trial);
                if value < best {
                    best = value;
                    *alpha = trial;
                }
            }
        }
    }
}

/// Sets the amplitude shift to its minimizer given the other effects.
fn profile_amplitude(state: &State<'_>, o: &Obs, shape: &ShapeFn, alpha: &mut [f64; 3]) {
    if !state.active.contains(&0) {
        return;
    }
    // minimizer of sum (r - a)^2 / var_eps + a^2 / d_1
    let s = alpha[1].exp();
    let r: f64 = o
        .t
        .iter()
        .zip(&o.x)
        .map(|(&t, &x)| x - s * shape.value(t - alpha[2]))
        .sum();
    alpha[0] = r / (o.t.len() as f64 + state.var_eps / state.re_var[0]);
}

const REFINE_ITER: usize = 3;
const REFINE_HALVINGS: usize = 10;

/// Penalized residual sum of one cell at the given effects.
fn cell_objective(state: &State<'_>, o: &Obs, shape: &ShapeFn, alpha: &[f64; 3]) -> f64 {
    let s = alpha[1].exp();
    let rss: f64 = o
        .t
        .iter()
        .zip(&o.x)
        .map(|(&t, &x)| (x - alpha[0] - s * shape.value(t - alpha[2])).powi(2))
        .sum();
    let mut total = rss / state.var_eps;
    for &a in &state.active {
        total += alpha[a] * alpha[a] / state.re_var[a];
    }
    total
}

/// Per-cell Gauss-Newton on the random effects with beta held fixed.
/// Returns the total decrease of the objective and its final value.
fn refine_modes(state: &State<'_>, obs: &[Obs], shape: &ShapeFn, modes: &mut [[f64; 3]]) -> (f64, f64) {
    let q = state.active.len();
    let w = 1.0 / state.var_eps;
    let mut decrease = 0.0;
    let mut total = 0.0;
    for (o, alpha) in obs.iter().zip(modes.iter_mut()) {
        let mut current = cell_objective(state, o, shape, alpha);
        for _ in 0..if q == 0 { 0 } else { REFINE_ITER } {
            let s = alpha[1].exp();
            let mut h = Matrix3::<f64>::zeros();
            let mut g = Vector3::<f64>::zeros();
            for (&t, &x) in o.t.iter().zip(&o.x) {
                let (m, slope) = shape.value_and_slope(t - alpha[2]);
                let e = x - alpha[0] - s * m;
                let mut za = Vector3::<f64>::zeros();
                for (c, &a) in state.active.iter().enumerate() {
                    za[c] = match a {
                        0 => 1.0,
                        1 => s * m,
                        _ => -s * slope,
                    };
                }
                g += za * (e * w);
                h += za * za.transpose() * w;
            }
            for (c, &a) in state.active.iter().enumerate() {
                h[(c, c)] += 1.0 / state.re_var[a];
                g[c] -= alpha[a] / state.re_var[a];
            }
            for c in q..3 {
                h[(c, c)] = 1.0;
            }
            let Some(ch) = h.cholesky() else { break };
            let delta = ch.solve(&g);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..REFINE_HALVINGS {
                let mut trial = *alpha;
                for (c, &a) in state.active.iter().enumerate() {
                    trial[a] += step * delta[c];
                }
                let value = cell_objective(state, o, shape, &trial);
                if value.is_finite() && value < current {
                    decrease += current - value;
                    let gain = current - value;
                    current = value;
                    *alpha = trial;
                    accepted = gain > 1e-10 * (1.0 + value);
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        total += current;
    }
    (decrease, total)
}

/// Cholesky solve, adding `lambda * I` (1e-6 up to 1e2) when the system is
/// not positive definite.
fn solve_boosted(a: DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, false));
        }
    }
    let mut lambda = 1e-6;
    while lambda <= 1e2 {
        let mut reg = a.clone();
        for d in 0..reg.nrows() {
            reg[(d, d)] += lambda;
        }
        if let Some(ch) = reg.cholesky() {
            return Ok((ch.solve(b), true));
        }
        lambda *= 10.0;
    }
    Err(Error::Numeric("Gauss-Newton system is singular".into()))
}

/// Per-cell sufficient statistics of the linearized model.
struct LinCell {
    n: f64,
    ztz: DMatrix<f64>,
    ztr: DVector<f64>,
    rtr: f64,
}

/// Maximizes the linearized marginal likelihood over the variances by EM.
/// Returns the log-likelihood at the updated variances.
fn variance_step(state: &mut State<'_>, obs: &[Obs], beta: &[f64], modes: &[[f64; 3]]) -> Result<f64> {
    let shape = ShapeFn::new(state.spec, beta)?;
    let q = state.active.len();
    let cells: Vec<LinCell> = obs
        .iter()
        .zip(modes)
        .map(|(o, alpha)| {
            let (e, _, ja) = state.linearize(o, &shape, beta.len(), alpha);
            // working response r = y - f(alpha) + Z alpha
            let mut r = e;
            if q > 0 {
                let a: DVector<f64> =
                    DVector::from_iterator(q, state.active.iter().map(|&idx| alpha[idx]));
                r += &ja * a;
            }
            LinCell {
                n: o.t.len() as f64,
                ztz: ja.tr_mul(&ja),
                ztr: ja.tr_mul(&r),
                rtr: r.dot(&r),
            }
        })
        .collect();
    let total_n: f64 = cells.iter().map(|c| c.n).sum();

    if q == 0 {
        let rss: f64 = cells.iter().map(|c| c.rtr).sum();
        state.var_eps = (rss / total_n).max(VAR_FLOOR);
        return Ok(lin_loglik(&cells, state.var_eps, &[]));
    }

    let mut var_eps = state.var_eps;
    let mut d: Vec<f64> = state.active.iter().map(|&a| state.re_var[a]).collect();
    let mut ll = lin_loglik(&cells, var_eps, &d);
    for _ in 0..EM_MAX_ITER {
        let mut d_acc = vec![0.0; q];
        let mut resid_acc = 0.0;
        for c in &cells {
            let (cov, b) = posterior(c, var_eps, &d)?;
            for k in 0..q {
                d_acc[k] += b[k] * b[k] + cov[(k, k)];
            }
            let zb = &c.ztz * &b;
            resid_acc += c.rtr - 2.0 * b.dot(&c.ztr) + b.dot(&zb) + (&cov * &c.ztz).trace();
        }
        let m = cells.len() as f64;
        let new_d: Vec<f64> = d_acc.iter().map(|v| (v / m).max(VAR_FLOOR)).collect();
        let new_var = (resid_acc / total_n).max(VAR_FLOOR);
        let new_ll = lin_loglik(&cells, new_var, &new_d);
        let done = (new_ll - ll).abs() <= 1e-10 * ll.abs().max(1.0);
        var_eps = new_var;
        d = new_d;
        ll = new_ll;
        if done {
            break;
        }
    }
    state.var_eps = var_eps;
    for (k, &a) in state.active.iter().enumerate() {
        state.re_var[a] = d[k];
    }
    Ok(ll)
}

/// Posterior covariance and mean of the random effects of one linearized cell.
fn posterior(c: &LinCell, var_eps: f64, d: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut prec = &c.ztz / var_eps;
    for (k, &dk) in d.iter().enumerate() {
        prec[(k, k)] += 1.0 / dk;
    }
    let cov = prec
        .cholesky()
        .ok_or_else(|| Error::Numeric("posterior precision is not positive definite".into()))?
        .inverse();
    let b = &cov * &c.ztr / var_eps;
    Ok((cov, b))
}

fn lin_loglik(cells: &[LinCell], var_eps: f64, d: &[f64]) -> f64 {
    let log_det_d: f64 = d.iter().map(|v| v.ln()).sum();
    cells
        .iter()
        .map(|c| {
            if d.is_empty() {
                return -0.5 * (c.n * (LN_2PI + var_eps.ln()) + c.rtr / var_eps);
            }
            let mut prec = &c.ztz / var_eps;
            for (k, &dk) in d.iter().enumerate() {
                prec[(k, k)] += 1.0 / dk;
            }
            let Some(ch) = prec.cholesky() else {
                return f64::NEG_INFINITY;
            };
            let log_det_p: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let b = ch.solve(&c.ztr) / var_eps;
            let quad = (c.rtr - b.dot(&c.ztr)) / var_eps;
            -0.5 * (c.n * (LN_2PI + var_eps.ln()) + log_det_d + log_det_p + quad)
        })
        .sum()
}

/// Number of free parameters estimated per block: basis coefficients,
/// active random-effect variances and the residual variance.
pub fn free_parameter_count(config: RandomEffectConfig, spec: &SplineSpec) -> usize {
    spec.dim() + config.n_active() + 1
}
