//! Command-line front end: `fit`, `select`, `simulate` and `score`.
//!
//! All outputs are plain files (CSV, a key-value text report and a JSON
//! report) and are byte-identical for identical inputs and settings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::config::{ResolvedSettings, Settings};
use crate::datagen::{generate, ScenarioSpec};
use crate::error::{Error, Result};
use crate::grid::{load_csv, save_csv, CurveGrid};
use crate::metrics::cari;
use crate::msem::{run, FitResult};
use crate::preprocess::{parse_steps, preprocess, Step};
use crate::selection::{block_param_count, model_search, score_loglik, icl_value, ModelGrid, ICL_BIAS_WARNING, SCORE_MC_FACTOR};
use crate::sim_model::RandomEffectConfig;
use crate::splines::ShapeFn;

/// Points per block-mean curve in the plotting export.
const CURVE_POINTS: usize = 101;

#[derive(Debug, Parser)]
#[command(name = "tdlbm", version, about = "Co-clustering of time-dependent data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and write partitions, reports and plotting data.
    Fit(FitArgs),
    /// Fit a grid of models and rank them by ICL.
    Select(SelectArgs),
    /// Write a simulated dataset and its true partitions.
    Simulate(SimulateArgs),
    /// Print the co-clustering ARI between two co-partitions.
    Score(ScoreArgs),
}

/// Overrides for configuration keys; unset flags fall back to the file.
#[derive(Debug, Clone, Default, Args)]
pub struct SettingFlags {
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "L")]
    pub l: Option<usize>,
    #[arg(long = "re_config", alias = "re-config")]
    pub re_config: Option<String>,
    #[arg(long = "mc_samples", alias = "mc-samples")]
    pub mc_samples: Option<usize>,
    #[arg(long = "gibbs_sweeps", alias = "gibbs-sweeps")]
    pub gibbs_sweeps: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long = "burn_in", alias = "burn-in")]
    pub burn_in: Option<usize>,
    #[arg(long = "n_starts", alias = "n-starts")]
    pub n_starts: Option<usize>,
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub knots: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long = "nlme_tol", alias = "nlme-tol")]
    pub nlme_tol: Option<f64>,
    #[arg(long = "nlme_max_iter", alias = "nlme-max-iter")]
    pub nlme_max_iter: Option<usize>,
}

impl SettingFlags {
    fn settings(&self) -> Settings {
        Settings {
            k: self.k,
            l: self.l,
            re_config: self.re_config.clone(),
            mc_samples: self.mc_samples,
            gibbs_sweeps: self.gibbs_sweeps,
            iterations: self.iterations,
            burn_in: self.burn_in,
            n_starts: self.n_starts,
            init: self.init.clone(),
            seed: self.seed,
            knots: self.knots,
            degree: self.degree,
            threads: self.threads,
            nlme_tol: self.nlme_tol,
            nlme_max_iter: self.nlme_max_iter,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Long-format CSV with header row_id,col_id,t,value.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated steps, e.g. `log1p,standardize,aggregate(7)`.
    #[arg(long)]
    pub preprocess: Option<String>,
    #[command(flatten)]
    pub settings: SettingFlags,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preprocess: Option<String>,
    /// Row cluster counts to try, e.g. `3,4,5`.
    #[arg(long = "k_values", alias = "k-values", value_delimiter = ',', required = true)]
    pub k_values: Vec<usize>,
    /// Column cluster counts to try.
    #[arg(long = "l_values", alias = "l-values", value_delimiter = ',', required = true)]
    pub l_values: Vec<usize>,
    /// Random-effect configurations to try; defaults to the configured one.
    #[arg(long = "re_configs", alias = "re-configs", value_delimiter = ',')]
    pub re_configs: Vec<String>,
    #[command(flatten)]
    pub settings: SettingFlags,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub d: usize,
    #[arg(long = "t_points", alias = "t-points", default_value_t = 15)]
    pub t_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// First row partition (`row_id,cluster`).
    #[arg(long = "rows_a", alias = "rows-a")]
    pub rows_a: PathBuf,
    /// First column partition (`col_id,cluster`).
    #[arg(long = "cols_a", alias = "cols-a")]
    pub cols_a: PathBuf,
    #[arg(long = "rows_b", alias = "rows-b")]
    pub rows_b: PathBuf,
    #[arg(long = "cols_b", alias = "cols-b")]
    pub cols_b: PathBuf,
}

/// Parses process arguments, runs the command and returns the exit status.
pub fn main_from_env() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Score(a) => {
            let v = cmd_score(a)?;
            println!("{v:?}");
            Ok(())
        }
    }
}

fn settings(config: Option<&Path>, flags: &SettingFlags) -> Result<Settings> {
    let file = match config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    Ok(file.overlay(&flags.settings()))
}

fn load_data(path: &Path, steps: Option<&str>) -> Result<(CurveGrid, Vec<Step>)> {
    let grid = load_csv(path)?;
    let steps = match steps {
        Some(s) => parse_steps(s)?,
        None => Vec::new(),
    };
    let grid = if steps.is_empty() { grid } else { preprocess(&grid, &steps)? };
    Ok((grid, steps))
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

pub fn write_partition(path: &Path, header: &str, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut s = format!("{header},cluster\n");
    for (id, &c) in ids.iter().zip(labels) {
        let _ = writeln!(s, "{id},{}", c + 1);
    }
    write_file(path, &s)
}

/// Reads a `<id>,cluster` file into ids and cluster names in file order.
pub fn read_partition(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.len() != 2 || &headers[1] != "cluster" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{}: header must be <id>,cluster", path.display()),
        });
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != 2 {
            return Err(Error::Parse { line, msg: "expected 2 fields".into() });
        }
        if seen.insert(rec[0].to_string(), ()).is_some() {
            return Err(Error::Data { line, msg: format!("duplicate id '{}'", &rec[0]) });
        }
        ids.push(rec[0].to_string());
        labels.push(rec[1].to_string());
    }
    Ok((ids, labels))
}

/// Labels of `b` reordered to the ids of `a`, both encoded as integers.
fn aligned_labels(a: &(Vec<String>, Vec<String>), b: &(Vec<String>, Vec<String>), what: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let encode = |labels: &[String]| -> Vec<usize> {
        let mut map = HashMap::new();
        labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(l.clone()).or_insert(next)
            })
            .collect()
    };
    let index: HashMap<&String, usize> = b.0.iter().enumerate().map(|(i, id)| (id, i)).collect();
    if a.0.len() != b.0.len() {
        return Err(Error::Data {
            line: 0,
            msg: format!("{what} partitions have {} and {} ids", a.0.len(), b.0.len()),
        });
    }
    let mut b_labels = Vec::with_capacity(a.0.len());
    for id in &a.0 {
        let &i = index.get(id).ok_or_else(|| Error::Data {
            line: 0,
            msg: format!("{what} id '{id}' missing from the second partition"),
        })?;
        b_labels.push(b.1[i].clone());
    }
    Ok((encode(&a.1), encode(&b_labels)))
}

pub fn cmd_score(a: &ScoreArgs) -> Result<f64> {
    let (za, zb) = aligned_labels(&read_partition(&a.rows_a)?, &read_partition(&a.rows_b)?, "row")?;
    let (wa, wb) = aligned_labels(&read_partition(&a.cols_a)?, &read_partition(&a.cols_b)?, "column")?;
    cari(&za, &wa, &zb, &wb)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut spec = ScenarioSpec::scenario1(a.seed).with_size(a.n, a.d);
    spec.t_points = a.t_points;
    let sim = generate(&spec)?;
    create_dir(&a.out)?;
    save_csv(&sim.grid, a.out.join("data.csv"))?;
    write_partition(&a.out.join("truth_rows.csv"), "row_id", &sim.grid.row_ids, &sim.z)?;
    write_partition(&a.out.join("truth_cols.csv"), "col_id", &sim.grid.col_ids, &sim.w)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ChainReport {
    seed: u64,
    mean_post_burn_in_loglik: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct BlockReport {
    k: usize,
    l: usize,
    sigma_eps: f64,
    /// Random-effect variances (amplitude, scale, phase).
    re_variances: [f64; 3],
    beta: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    selected_chain: usize,
    chains: Vec<ChainReport>,
    iterations_run: usize,
    final_complete_loglik: f64,
    spline_domain: [f64; 2],
    basis_dim: usize,
    nu: usize,
    score_mc_samples: usize,
    complete_loglik_at_estimates: f64,
    icl: f64,
    row_cluster_sizes: Vec<usize>,
    col_cluster_sizes: Vec<usize>,
    pi: Vec<f64>,
    rho: Vec<f64>,
    blocks: Vec<BlockReport>,
}

#[derive(Debug, Serialize)]
struct FitReport {
    command: &'static str,
    data: String,
    preprocess: Vec<String>,
    n_rows: usize,
    n_cols: usize,
    n_observed: usize,
    settings: ResolvedSettings,
    fit: FitSummary,
    warnings: Vec<String>,
}

fn sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut out = vec![0; k];
    labels.iter().for_each(|&c| out[c] += 1);
    out
}

fn summarize(grid: &CurveGrid, fit: &FitResult, mc_samples: usize) -> Result<FitSummary> {
    let score_mc = mc_samples * SCORE_MC_FACTOR;
    let loglik = score_loglik(grid, fit, score_mc, fit.chain_seed)?;
    let nu = block_param_count(fit.re_config, fit.spline.dim());
    let (k, l) = (fit.theta.k(), fit.theta.l());
    let blocks = (0..k)
        .flat_map(|kk| (0..l).map(move |ll| (kk, ll)))
        .map(|(kk, ll)| {
            let b = fit.theta.block(kk, ll);
            BlockReport {
                k: kk + 1,
                l: ll + 1,
                sigma_eps: b.sigma_eps,
                re_variances: b.sigma_alpha,
                beta: b.beta.clone(),
            }
        })
        .collect();
    Ok(FitSummary {
        selected_chain: fit.chain + 1,
        chains: fit
            .chains
            .iter()
            .map(|c| ChainReport {
                seed: c.seed,
                mean_post_burn_in_loglik: c.outcome.as_ref().ok().copied(),
                error: c.outcome.as_ref().err().cloned(),
            })
            .collect(),
        iterations_run: fit.loglik_trace.len(),
        final_complete_loglik: *fit.loglik_trace.last().unwrap_or(&f64::NAN),
        spline_domain: [fit.spline.t_min, fit.spline.t_max],
        basis_dim: fit.spline.dim(),
        nu,
        score_mc_samples: score_mc,
        complete_loglik_at_estimates: loglik,
        icl: icl_value(loglik, grid.n(), grid.d(), k, l, nu),
        row_cluster_sizes: sizes(&fit.z, k),
        col_cluster_sizes: sizes(&fit.w, l),
        pi: fit.theta.pi.clone(),
        rho: fit.theta.rho.clone(),
        blocks,
    })
}

/// Flattens a JSON value into sorted-by-structure `key = value` lines.
fn key_values(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                key_values(&key, v, out);
            }
        }
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            let parts: Vec<String> = items.iter().map(scalar).collect();
            let _ = writeln!(out, "{prefix} = {}", parts.join(","));
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                key_values(&format!("{prefix}.{}", i + 1), item, out);
            }
        }
        other => {
            let _ = writeln!(out, "{prefix} = {}", scalar(other));
        }
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "NA".into(),
        other => other.to_string(),
    }
}

fn write_reports<T: Serialize>(out: &Path, report: &T) -> Result<()> {
    let value = serde_json::to_value(report).map_err(|e| Error::Io(e.to_string()))?;
    let mut json = serde_json::to_string_pretty(&value).map_err(|e| Error::Io(e.to_string()))?;
    json.push('\n');
    write_file(&out.join("report.json"), &json)?;
    let mut text = String::new();
    key_values("", &value, &mut text);
    write_file(&out.join("report.txt"), &text)
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,complete_loglik\n");
    for (h, v) in trace.iter().enumerate() {
        let _ = writeln!(s, "{},{v}", h + 1);
    }
    write_file(path, &s)
}

/// Block shape curves on a dense grid over the spline domain.
fn write_curves(path: &Path, fit: &FitResult) -> Result<()> {
    let spec = &fit.spline;
    let mut s = String::from("k,l,t,mean_value\n");
    for k in 0..fit.theta.k() {
        for l in 0..fit.theta.l() {
            let shape = ShapeFn::new(spec, &fit.theta.block(k, l).beta)?;
            for g in 0..CURVE_POINTS {
                let t = spec.t_min + (spec.t_max - spec.t_min) * g as f64 / (CURVE_POINTS - 1) as f64;
                let _ = writeln!(s, "{},{},{t},{}", k + 1, l + 1, shape.value(t));
            }
        }
    }
    write_file(path, &s)
}

fn fit_warnings(fit: &FitResult) -> Vec<String> {
    let mut w = vec![ICL_BIAS_WARNING.to_string()];
    w.extend(fit.warnings.iter().cloned());
    w
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let cfg = settings(a.config.as_deref(), &a.settings)?.resolve()?;
    let (grid, steps) = load_data(&a.data, a.preprocess.as_deref())?;
    let fit = run(&grid, &cfg)?;
    let report = FitReport {
        command: "fit",
        data: a.data.display().to_string(),
        preprocess: steps.iter().map(|s| s.to_string()).collect(),
        n_rows: grid.n(),
        n_cols: grid.d(),
        n_observed: grid.n_observed(),
        settings: ResolvedSettings::from(&cfg),
        fit: summarize(&grid, &fit, cfg.mc_samples)?,
        warnings: fit_warnings(&fit),
    };
    create_dir(&a.out)?;
    write_partition(&a.out.join("rows.csv"), "row_id", &grid.row_ids, &fit.z)?;
    write_partition(&a.out.join("cols.csv"), "col_id", &grid.col_ids, &fit.w)?;
    write_trace(&a.out.join("trace.csv"), &fit.loglik_trace)?;
    write_curves(&a.out.join("curves.csv"), &fit)?;
    write_reports(&a.out, &report)
}

#[derive(Debug, Serialize)]
struct RankedReport {
    rank: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "L")]
    l: usize,
    re_config: String,
    nu: usize,
    complete_loglik: f64,
    icl: f64,
}

#[derive(Debug, Serialize)]
struct SelectReport {
    command: &'static str,
    data: String,
    preprocess: Vec<String>,
    n_rows: usize,
    n_cols: usize,
    n_observed: usize,
    settings: ResolvedSettings,
    k_values: Vec<usize>,
    l_values: Vec<usize>,
    re_configs: Vec<String>,
    /// `fixed` when a single configuration was used, else `searched`.
    re_config_mode: &'static str,
    ranking: Vec<RankedReport>,
    failures: Vec<String>,
    best: FitSummary,
    warnings: Vec<String>,
}

pub fn cmd_select(a: &SelectArgs) -> Result<()> {
    let s = settings(a.config.as_deref(), &a.settings)?;
    let template = s.resolve_with(1, 1)?;
    let re_configs: Vec<RandomEffectConfig> = if a.re_configs.is_empty() {
        vec![template.re_config]
    } else {
        a.re_configs.iter().map(|c| c.parse()).collect::<Result<_>>()?
    };
    let models = ModelGrid {
        k_values: a.k_values.clone(),
        l_values: a.l_values.clone(),
        re_configs,
        template: template.clone(),
    };
    models.validate()?;
    let (grid, steps) = load_data(&a.data, a.preprocess.as_deref())?;
    let sel = model_search(&grid, &models)?;
    let best = sel.best();

    create_dir(&a.out)?;
    let mut table = String::from("rank,K,L,re_config,nu,complete_loglik,icl\n");
    for (r, m) in sel.ranking.iter().enumerate() {
        let _ = writeln!(table, "{},{},{},{},{},{},{}", r + 1, m.k, m.l, m.re_config, m.nu, m.loglik, m.icl);
    }
    write_file(&a.out.join("icl.csv"), &table)?;
    write_partition(&a.out.join("rows.csv"), "row_id", &grid.row_ids, &best.fit.z)?;
    write_partition(&a.out.join("cols.csv"), "col_id", &grid.col_ids, &best.fit.w)?;

    let mut settings = ResolvedSettings::from(&template);
    settings.k = best.k;
    settings.l = best.l;
    settings.re_config = best.re_config.to_string();
    settings.seed = template.seed;
    let mut warnings = sel.warnings.clone();
    warnings.extend(best.fit.warnings.iter().cloned());
    let report = SelectReport {
        command: "select",
        data: a.data.display().to_string(),
        preprocess: steps.iter().map(|s| s.to_string()).collect(),
        n_rows: grid.n(),
        n_cols: grid.d(),
        n_observed: grid.n_observed(),
        settings,
        k_values: models.k_values.clone(),
        l_values: models.l_values.clone(),
        re_configs: models.re_configs.iter().map(|c| c.to_string()).collect(),
        re_config_mode: if sel.configs_searched { "searched" } else { "fixed" },
        ranking: sel
            .ranking
            .iter()
            .enumerate()
            .map(|(r, m)| RankedReport {
                rank: r + 1,
                k: m.k,
                l: m.l,
                re_config: m.re_config.to_string(),
                nu: m.nu,
                complete_loglik: m.loglik,
                icl: m.icl,
            })
            .collect(),
        failures: sel
            .failures
            .iter()
            .map(|f| format!("K={} L={} {}: {}", f.k, f.l, f.re_config, f.error))
            .collect(),
        best: summarize(&grid, &best.fit, template.mc_samples)?,
        warnings,
    };
    write_reports(&a.out, &report)
}
