//! Marginalized SEM-Gibbs estimation of the time-dependent latent block
//! model.
//!
//! Each iteration runs three steps:
//!
//! 1. marginalization: every cell's log-density under every block is
//!    estimated by Monte Carlo integration over the random effects;
//! 2. SE step: row and column labels are resampled by a few Gibbs sweeps
//!    from their conditional distributions given the cached densities;
//! 3. M step: mixture weights are set to label frequencies and each block
//!    is refitted as a nonlinear mixed-effects model twice, from the
//!    previous parameters and modes and from a fresh pooled fit, keeping
//!    the fit with the larger marginal log-likelihood.
//!
//! After burn-in the parameter draws are averaged, and a final Gibbs run at
//! the averaged parameters gives label frequencies whose modes are the
//! reported partition. Several independent chains can be run; the one with
//! the highest mean post-burn-in complete-data log-likelihood is kept.
//!
//! All randomness comes from substreams keyed by chain, iteration and cell
//! indices, so results do not depend on the number of worker threads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::CurveGrid;
use crate::kmeans;
use crate::lbm::{self, complete_loglik, proportions, CoPartition, MarginalCache};
use crate::nlme_fit::{fit_block_from, init_block, BlockData, CellRef, NlmeOptions};
use crate::rng::{derive_seed, stream, Stream, TAG_CHAIN, TAG_FINAL, TAG_GIBBS, TAG_INIT, TAG_MARGINAL};
use crate::sim_model::{BlockKernel, BlockParams, ObservedCurve, RandomEffectConfig};
use crate::splines::SplineSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    Random,
    Kmeans,
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::Random => "random",
            InitStrategy::Kmeans => "kmeans",
        })
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(InitStrategy::Random),
            "kmeans" => Ok(InitStrategy::Kmeans),
            other => Err(Error::Config(format!("init must be random or kmeans, got '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsemConfig {
    pub k: usize,
    pub l: usize,
    pub re_config: RandomEffectConfig,
    pub mc_samples: usize,
    pub gibbs_sweeps: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub init: InitStrategy,
    pub n_starts: usize,
    pub seed: u64,
    pub degree: usize,
    pub knots: usize,
    pub nlme: NlmeOptions,
    /// Gibbs sweeps of the final sampling pass at the averaged parameters.
    pub final_sweeps: usize,
    /// Worker threads; 0 uses all available cores. Never affects results.
    pub threads: usize,
}

impl MsemConfig {
    pub fn new(k: usize, l: usize, re_config: RandomEffectConfig) -> Self {
        MsemConfig {
            k,
            l,
            re_config,
            mc_samples: 100,
            gibbs_sweeps: 3,
            iterations: 100,
            burn_in: 50,
            init: InitStrategy::Kmeans,
            n_starts: 1,
            seed: 0,
            degree: 3,
            knots: 4,
            nlme: NlmeOptions::default(),
            final_sweeps: 200,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 || self.l == 0 {
            return fail("K and L must be >= 1");
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be >= 1");
        }
        if self.gibbs_sweeps == 0 {
            return fail("gibbs_sweeps must be >= 1");
        }
        if self.burn_in >= self.iterations {
            return fail("burn_in must be smaller than iterations");
        }
        if self.n_starts == 0 {
            return fail("n_starts must be >= 1");
        }
        if self.final_sweeps == 0 {
            return fail("final sweeps must be >= 1");
        }
        if !(self.nlme.tol > 0.0) || self.nlme.max_iter == 0 {
            return fail("nlme_tol must be positive and nlme_max_iter >= 1");
        }
        Ok(())
    }

    /// Spline basis spanning the grid's time range.
    pub fn spline_spec(&self, grid: &CurveGrid) -> Result<SplineSpec> {
        let (lo, hi) = grid.time_range();
        SplineSpec::new(self.degree, self.knots, lo, hi).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Full parameter set: block parameters indexed `k * L + l` plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub blocks: Vec<BlockParams>,
    pub pi: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Theta {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn l(&self) -> usize {
        self.rho.len()
    }

    pub fn block(&self, k: usize, l: usize) -> &BlockParams {
        &self.blocks[k * self.l() + l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub seed: u64,
    /// Mean post-burn-in complete-data log-likelihood, or the failure.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Theta,
    pub z: Vec<usize>,
    pub w: Vec<usize>,
    pub loglik_trace: Vec<f64>,
    /// Label counts over the final sampling pass, `n x K`.
    pub row_frequencies: Vec<Vec<usize>>,
    /// Label counts over the final sampling pass, `d x L`.
    pub col_frequencies: Vec<Vec<usize>>,
    pub spline: SplineSpec,
    pub re_config: RandomEffectConfig,
    pub chain: usize,
    pub chain_seed: u64,
    pub chains: Vec<ChainSummary>,
    /// Block refits that did not converge or were carried over.
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn partition(&self) -> CoPartition {
        CoPartition {
            z: self.z.clone(),
            w: self.w.clone(),
            pi: self.theta.pi.clone(),
            rho: self.theta.rho.clone(),
        }
    }

    pub fn mean_post_burn_in(&self) -> Option<f64> {
        self.chains[self.chain].outcome.as_ref().ok().copied()
    }
}

/// Observed points of every cell, prepared once per run.
pub(crate) struct Prepared {
    n: usize,
    d: usize,
    obs: Vec<ObservedCurve>,
}

impl Prepared {
    pub fn new(grid: &CurveGrid) -> Self {
        Prepared {
            n: grid.n(),
            d: grid.d(),
            obs: grid.cells.iter().map(ObservedCurve::from_curve).collect(),
        }
    }
}

/// Initial labels and parameters. The parameters come from an M step on the
/// initial partition, each block starting from a pooled spline fit.
pub fn initialize(
    grid: &CurveGrid,
    cfg: &MsemConfig,
    spec: &SplineSpec,
    rng: &mut Stream,
) -> Result<(Vec<usize>, Vec<usize>, Theta)> {
    let (n, d) = (grid.n(), grid.d());
    if cfg.k > n || cfg.l > d {
        return Err(Error::Config(format!(
            "cannot form {}x{} blocks from a {n}x{d} grid",
            cfg.k, cfg.l
        )));
    }
    let (z, w) = match cfg.init {
        InitStrategy::Random => (random_labels(n, cfg.k, rng), random_labels(d, cfg.l, rng)),
        InitStrategy::Kmeans => kmeans::double_kmeans(grid, cfg.k, cfg.l, rng)?,
    };
    let mut blocks = Vec::with_capacity(cfg.k * cfg.l);
    for k in 0..cfg.k {
        for l in 0..cfg.l {
            let data = block_data(grid, &z, &w, k, l);
            blocks.push(init_block(&data, spec, cfg.re_config)?);
        }
    }
    let start = Theta {
        blocks,
        pi: proportions(&z, cfg.k),
        rho: proportions(&w, cfg.l),
    };
    let part = CoPartition {
        z: z.clone(),
        w: w.clone(),
        pi: start.pi.clone(),
        rho: start.rho.clone(),
    };
    let (theta, _) = m_step(grid, &part, cfg, spec, &start)?;
    Ok((z, w, theta))
}

/// Uniform labels, redrawn until every cluster is used.
fn random_labels(n: usize, k: usize, rng: &mut Stream) -> Vec<usize> {
    for _ in 0..1000 {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut used = vec![false; k];
        labels.iter().for_each(|&c| used[c] = true);
        if used.iter().all(|&u| u) {
            return labels;
        }
    }
    // near-degenerate n ~ k: seed each cluster once, rest uniform
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    for (c, slot) in labels.iter_mut().take(k).enumerate() {
        *slot = c;
    }
    labels
}

fn block_data<'g>(grid: &'g CurveGrid, z: &[usize], w: &[usize], k: usize, l: usize) -> BlockData<'g> {
    let mut cells = Vec::new();
    for (i, &zi) in z.iter().enumerate() {
        if zi != k {
            continue;
        }
        for (j, &wj) in w.iter().enumerate() {
            if wj == l {
                cells.push(CellRef {
                    i,
                    j,
                    curve: grid.cell(i, j),
                });
            }
        }
    }
    BlockData::new(cells)
}

/// Monte Carlo log-densities of every cell under every block, using
/// substreams keyed by `(iteration, i, j, k, l)` under `seed`.
pub fn marginalization_step(
    grid: &CurveGrid,
    theta: &Theta,
    cfg: &MsemConfig,
    spec: &SplineSpec,
    seed: u64,
    iteration: u64,
) -> Result<MarginalCache> {
    marginalize(&Prepared::new(grid), theta, cfg.re_config, spec, cfg.mc_samples, seed, TAG_MARGINAL, iteration)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn marginalize(
    prep: &Prepared,
    theta: &Theta,
    re_config: RandomEffectConfig,
    spec: &SplineSpec,
    mc_samples: usize,
    seed: u64,
    tag: u64,
    iteration: u64,
) -> Result<MarginalCache> {
    let (k, l) = (theta.k(), theta.l());
    let kernels: Vec<BlockKernel> = theta
        .blocks
        .iter()
        .map(|b| BlockKernel::new(b, re_config, spec))
        .collect::<Result<_>>()?;
    let d = prep.d;
    let rows: Vec<Vec<f64>> = (0..prep.n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(d * k * l);
            for j in 0..d {
                let obs = &prep.obs[i * d + j];
                for kk in 0..k {
                    for ll in 0..l {
                        let key = [tag, iteration, i as u64, j as u64, kk as u64, ll as u64];
                        let mut rng = stream(seed, &key);
                        let est = kernels[kk * l + ll]
                            .marginal_rb(obs, mc_samples, &mut rng)
                            .map_err(|e| {
                                Error::Numeric(format!("cell ({i}, {j}), block ({kk}, {ll}): {e}"))
                            })?;
                        row.push(est.log_mean);
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    MarginalCache::from_vec(prep.n, d, k, l, rows.concat())
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (c, &p) in probs.iter().enumerate() {
        if u < p {
            return c;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Reassigns, for each empty cluster, the member of a non-singleton cluster
/// with the lowest conditional probability of its current label.
fn fill_empty(labels: &mut [usize], n_clusters: usize, probs: impl Fn(usize, &[usize]) -> Vec<f64>) {
    loop {
        let mut counts = vec![0usize; n_clusters];
        labels.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let snapshot = labels.to_vec();
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, probs(i, &snapshot)[labels[i]]))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
        match donor {
            Some(i) => labels[i] = empty,
            None => return,
        }
    }
}

fn gibbs_sweep<R: Rng + ?Sized>(cache: &MarginalCache, part: &mut CoPartition, rng: &mut R) {
    let (n, d, k, l) = cache.dims();
    for i in 0..n {
        let p = lbm::row_probs(cache, i, &part.w, &part.pi);
        part.z[i] = sample_categorical(&p, rng);
    }
    if n >= k {
        let w = part.w.clone();
        fill_empty(&mut part.z, k, |i, _| lbm::row_probs(cache, i, &w, &part.pi));
    }
    for j in 0..d {
        let p = lbm::col_probs(cache, j, &part.z, &part.rho);
        part.w[j] = sample_categorical(&p, rng);
    }
    if d >= l {
        let z = part.z.clone();
        fill_empty(&mut part.w, l, |j, _| lbm::col_probs(cache, j, &z, &part.rho));
    }
}

/// Runs `sweeps` Gibbs sweeps (rows given columns, then columns given the
/// fresh rows) and returns the final labels. Weights are left unchanged.
pub fn se_step<R: Rng + ?Sized>(
    cache: &MarginalCache,
    part: &CoPartition,
    sweeps: usize,
    rng: &mut R,
) -> Result<CoPartition> {
    let (n, d, k, l) = cache.dims();
    if part.z.len() != n || part.w.len() != d || part.k() != k || part.l() != l {
        return Err(Error::Shape("partition does not match the cache".into()));
    }
    let mut next = part.clone();
    for _ in 0..sweeps {
        gibbs_sweep(cache, &mut next, rng);
    }
    Ok(next)
}

/// Diagnostics of one M step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MStepReport {
    pub carried_over: Vec<(usize, usize, String)>,
    pub not_converged: Vec<(usize, usize)>,
}

/// Weights from label frequencies and a warm-started refit of every block.
pub fn m_step(
    grid: &CurveGrid,
    part: &CoPartition,
    cfg: &MsemConfig,
    spec: &SplineSpec,
    prev: &Theta,
) -> Result<(Theta, MStepReport)> {
    let mut modes = vec![[0.0; 3]; grid.n() * grid.d()];
    m_step_with_modes(grid, part, cfg, spec, prev, &mut modes)
}

/// As [`m_step`], starting each cell's random effects at `modes` (indexed
/// `i * d + j`) and overwriting them with the fitted modes.
pub(crate) fn m_step_with_modes(
    grid: &CurveGrid,
    part: &CoPartition,
    cfg: &MsemConfig,
    spec: &SplineSpec,
    prev: &Theta,
    modes: &mut [[f64; 3]],
) -> Result<(Theta, MStepReport)> {
    let (k, l) = (prev.k(), prev.l());
    let d = grid.d();
    let shared: &[[f64; 3]] = modes;
    let fits: Vec<BlockFit> = (0..k * l)
        .into_par_iter()
        .map(|b| {
            let (kk, ll) = (b / l, b % l);
            let data = block_data(grid, &part.z, &part.w, kk, ll);
            let start: Vec<[f64; 3]> = data.cells.iter().map(|c| shared[c.i * d + c.j]).collect();
            let cells: Vec<usize> = data.cells.iter().map(|c| c.i * d + c.j).collect();
            let warm = fit_block_from(&data, cfg.re_config, spec, &prev.blocks[b], cfg.nlme, Some(&start));
            let cold = init_block(&data, spec, cfg.re_config)
                .and_then(|init| fit_block_from(&data, cfg.re_config, spec, &init, cfg.nlme, None));
            let chosen = match (warm, cold) {
                (Ok(w), Ok(c)) => Ok(if c.1.objective > w.1.objective { c } else { w }),
                (Ok(w), Err(_)) => Ok(w),
                (Err(_), Ok(c)) => Ok(c),
                (Err(e), Err(_)) => Err(e),
            };
            match chosen {
                Ok((params, diag)) => BlockFit {
                    params,
                    error: None,
                    converged: diag.converged,
                    modes: cells.into_iter().zip(diag.re_modes).collect(),
                },
                Err(e) => BlockFit {
                    params: prev.blocks[b].clone(),
                    error: Some(e.to_string()),
                    converged: true,
                    modes: Vec::new(),
                },
            }
        })
        .collect();
    let mut report = MStepReport::default();
    let mut blocks = Vec::with_capacity(k * l);
    for (b, fit) in fits.into_iter().enumerate() {
        if let Some(e) = fit.error {
            report.carried_over.push((b / l, b % l, e));
        }
        if !fit.converged {
            report.not_converged.push((b / l, b % l));
        }
        for (cell, m) in fit.modes {
            modes[cell] = m;
        }
        blocks.push(fit.params);
    }
    Ok((
        Theta {
            blocks,
            pi: proportions(&part.z, k),
            rho: proportions(&part.w, l),
        },
        report,
    ))
}

struct BlockFit {
    params: BlockParams,
    error: Option<String>,
    converged: bool,
    modes: Vec<(usize, [f64; 3])>,
}

/// Permutation `perm` with `perm[new_label] = matched_old_label`, chosen by
/// repeatedly pairing the labels that share the most items.
pub fn greedy_match(prev: &[usize], next: &[usize], n_clusters: usize) -> Vec<usize> {
    let mut table = vec![vec![0usize; n_clusters]; n_clusters];
    for (&a, &b) in prev.iter().zip(next) {
        table[b][a] += 1;
    }
    let mut perm = vec![usize::MAX; n_clusters];
    let mut taken = vec![false; n_clusters];
    for _ in 0..n_clusters {
        let mut best: Option<(usize, usize, usize)> = None;
        for (b, row) in table.iter().enumerate() {
            if perm[b] != usize::MAX {
                continue;
            }
            for (a, &count) in row.iter().enumerate() {
                if taken[a] {
                    continue;
                }
                if best.is_none_or(|(_, _, c)| count > c) {
                    best = Some((b, a, count));
                }
            }
        }
        let (b, a, _) = best.expect("unmatched labels remain");
        perm[b] = a;
        taken[a] = true;
    }
    perm
}

fn relabel(part: &mut CoPartition, theta: &mut Theta, perm_z: &[usize], perm_w: &[usize]) {
    let (k, l) = (theta.k(), theta.l());
    part.z.iter_mut().for_each(|z| *z = perm_z[*z]);
    part.w.iter_mut().for_each(|w| *w = perm_w[*w]);
    let mut pi = vec![0.0; k];
    let mut rho = vec![0.0; l];
    let mut blocks = theta.blocks.clone();
    for kk in 0..k {
        pi[perm_z[kk]] = theta.pi[kk];
        for ll in 0..l {
            blocks[perm_z[kk] * l + perm_w[ll]] = theta.blocks[kk * l + ll].clone();
        }
    }
    for ll in 0..l {
        rho[perm_w[ll]] = theta.rho[ll];
    }
    theta.pi = pi;
    theta.rho = rho;
    theta.blocks = blocks;
    part.pi = theta.pi.clone();
    part.rho = theta.rho.clone();
}

/// Componentwise mean of parameter draws.
fn average(draws: &[Theta]) -> Theta {
    let m = draws.len() as f64;
    let first = &draws[0];
    let mean_vec = |f: &dyn Fn(&Theta) -> &Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; f(first).len()];
        for t in draws {
            for (a, v) in acc.iter_mut().zip(f(t)) {
                *a += v;
            }
        }
        acc.into_iter().map(|a| a / m).collect()
    };
    let blocks = (0..first.blocks.len())
        .map(|b| {
            let mut out = BlockParams {
                mu_alpha: [0.0; 3],
                sigma_alpha: [0.0; 3],
                sigma_eps: 0.0,
                beta: vec![0.0; first.blocks[b].beta.len()],
            };
            for t in draws {
                let p = &t.blocks[b];
                for a in 0..3 {
                    out.mu_alpha[a] += p.mu_alpha[a] / m;
                    out.sigma_alpha[a] += p.sigma_alpha[a] / m;
                }
                out.sigma_eps += p.sigma_eps / m;
                for (o, v) in out.beta.iter_mut().zip(&p.beta) {
                    *o += v / m;
                }
            }
            out
        })
        .collect();
    let normalize = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    };
    Theta {
        blocks,
        pi: normalize(mean_vec(&|t| &t.pi)),
        rho: normalize(mean_vec(&|t| &t.rho)),
    }
}

const STOP_WINDOW: usize = 10;
const STOP_TOL: f64 = 1e-6;

/// True once the running mean over the last window of post-burn-in values
/// moves by less than the relative tolerance.
fn should_stop(post: &[f64]) -> bool {
    if post.len() <= STOP_WINDOW {
        return false;
    }
    let n = post.len();
    let cur = post[n - STOP_WINDOW..].iter().sum::<f64>() / STOP_WINDOW as f64;
    let prev = post[n - STOP_WINDOW - 1..n - 1].iter().sum::<f64>() / STOP_WINDOW as f64;
    (cur - prev).abs() <= STOP_TOL * prev.abs().max(1e-300)
}

struct ChainOutput {
    theta: Theta,
    part: CoPartition,
    trace: Vec<f64>,
    mean_post: f64,
    row_freq: Vec<Vec<usize>>,
    col_freq: Vec<Vec<usize>>,
    warnings: Vec<String>,
}

fn run_chain(grid: &CurveGrid, prep: &Prepared, cfg: &MsemConfig, spec: &SplineSpec, seed: u64) -> Result<ChainOutput> {
    let (z, w, mut theta) = initialize(grid, cfg, spec, &mut stream(seed, &[TAG_INIT]))?;
    let mut re_modes = vec![[0.0; 3]; grid.n() * grid.d()];
    let mut part = CoPartition {
        z,
        w,
        pi: theta.pi.clone(),
        rho: theta.rho.clone(),
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut draws: Vec<Theta> = Vec::new();
    let mut carried = 0usize;
    let mut not_converged = 0usize;

    for h in 1..=cfg.iterations {
        let cache = marginalize(prep, &theta, cfg.re_config, spec, cfg.mc_samples, seed, TAG_MARGINAL, h as u64)?;
        let sampled = se_step(&cache, &part, cfg.gibbs_sweeps, &mut stream(seed, &[TAG_GIBBS, h as u64]))?;
        let (mut next, report) = m_step_with_modes(grid, &sampled, cfg, spec, &theta, &mut re_modes)?;
        carried += report.carried_over.len();
        not_converged += report.not_converged.len();

        let mut next_part = CoPartition {
            pi: next.pi.clone(),
            rho: next.rho.clone(),
            ..sampled
        };
        trace.push(complete_loglik(&cache, &next_part)?);

        let perm_z = greedy_match(&part.z, &next_part.z, cfg.k);
        let perm_w = greedy_match(&part.w, &next_part.w, cfg.l);
        relabel(&mut next_part, &mut next, &perm_z, &perm_w);
        theta = next;
        part = next_part;

        if h > cfg.burn_in {
            draws.push(theta.clone());
            if should_stop(&trace[cfg.burn_in..]) {
                break;
            }
        }
    }

    let post = &trace[cfg.burn_in.min(trace.len())..];
    let mean_post = post.iter().sum::<f64>() / post.len() as f64;
    let theta_hat = average(&draws);

    // final sampling pass at the averaged parameters
    let cache = marginalize(prep, &theta_hat, cfg.re_config, spec, cfg.mc_samples, seed, TAG_FINAL, 0)?;
    let mut state = CoPartition {
        pi: theta_hat.pi.clone(),
        rho: theta_hat.rho.clone(),
        ..part
    };
    let mut row_freq = vec![vec![0usize; cfg.k]; grid.n()];
    let mut col_freq = vec![vec![0usize; cfg.l]; grid.d()];
    let mut rng = stream(seed, &[TAG_FINAL, 1]);
    for _ in 0..cfg.final_sweeps {
        gibbs_sweep(&cache, &mut state, &mut rng);
        state.z.iter().enumerate().for_each(|(i, &c)| row_freq[i][c] += 1);
        state.w.iter().enumerate().for_each(|(j, &c)| col_freq[j][c] += 1);
    }
    let z_hat = modes(&row_freq);
    let w_hat = modes(&col_freq);

    let mut warnings = Vec::new();
    if carried > 0 {
        warnings.push(format!("{carried} block refits were carried over from the previous iterate"));
    }
    if not_converged > 0 {
        warnings.push(format!("{not_converged} block refits stopped before convergence"));
    }
    Ok(ChainOutput {
        part: CoPartition {
            z: z_hat,
            w: w_hat,
            pi: theta_hat.pi.clone(),
            rho: theta_hat.rho.clone(),
        },
        theta: theta_hat,
        trace,
        mean_post,
        row_freq,
        col_freq,
        warnings,
    })
}

fn modes(freq: &[Vec<usize>]) -> Vec<usize> {
    freq.iter()
        .map(|row| {
            // first maximal label wins ties
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Builds the worker pool for a run.
pub(crate) fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

/// Fits the model with `cfg.n_starts` independent chains and keeps the best.
pub fn run(grid: &CurveGrid, cfg: &MsemConfig) -> Result<FitResult> {
    cfg.validate()?;
    grid.validate()?;
    let spec = cfg.spline_spec(grid)?;
    if cfg.k > grid.n() || cfg.l > grid.d() {
        return Err(Error::Config(format!(
            "cannot form {}x{} blocks from a {}x{} grid",
            cfg.k,
            cfg.l,
            grid.n(),
            grid.d()
        )));
    }
    pool(cfg.threads)?.install(|| run_in_pool(grid, cfg, &spec))
}

fn run_in_pool(grid: &CurveGrid, cfg: &MsemConfig, spec: &SplineSpec) -> Result<FitResult> {
    let prep = Prepared::new(grid);
    let seeds: Vec<u64> = (0..cfg.n_starts)
        .map(|c| derive_seed(cfg.seed, &[TAG_CHAIN, c as u64]))
        .collect();
    let outputs: Vec<Result<ChainOutput>> = seeds
        .par_iter()
        .map(|&s| run_chain(grid, &prep, cfg, spec, s))
        .collect();

    let chains: Vec<ChainSummary> = seeds
        .iter()
        .zip(&outputs)
        .map(|(&seed, o)| ChainSummary {
            seed,
            outcome: o.as_ref().map(|c| c.mean_post).map_err(|e| e.to_string()),
        })
        .collect();
    let best = outputs
        .iter()
        .enumerate()
        .filter_map(|(c, o)| o.as_ref().ok().map(|o| (c, o.mean_post)))
        .filter(|(_, m)| m.is_finite())
        .fold(None::<(usize, f64)>, |acc, (c, m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((c, m)),
        });
    let Some((chain, _)) = best else {
        return Err(Error::AllFailed(
            chains
                .iter()
                .enumerate()
                .map(|(c, s)| format!("chain {c}: {}", s.outcome.as_ref().err().cloned().unwrap_or_default()))
                .collect(),
        ));
    };
    let out = outputs.into_iter().nth(chain).unwrap().unwrap();
    Ok(FitResult {
        theta: out.theta,
        z: out.part.z,
        w: out.part.w,
        loglik_trace: out.trace,
        row_frequencies: out.row_freq,
        col_frequencies: out.col_freq,
        spline: *spec,
        re_config: cfg.re_config,
        chain,
        chain_seed: seeds[chain],
        chains,
        warnings: out.warnings,
    })
}
