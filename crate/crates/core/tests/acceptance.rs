//! Acceptance gate: one PASS/FAIL line per criterion. Failures are reported,
//! never raised, so the target always exits successfully.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use tdlbm::datagen::{generate, ScenarioSpec};
use tdlbm::kmeans::double_kmeans;
use tdlbm::metrics::cari;
use tdlbm::msem::{run, MsemConfig};
use tdlbm::rng::stream;
use tdlbm::selection::{model_search, ModelGrid};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Chain length for the accuracy criteria.
const ITERATIONS: usize = 60;
const BURN_IN: usize = 30;
/// Chain length for each candidate of the selection criterion.
const SELECT_ITERATIONS: usize = 20;
const SELECT_BURN_IN: usize = 10;
const SELECT_STARTS: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "{} {name}: {} [{:.1} s]",
        if result.pass { "PASS" } else { "FAIL" },
        result.detail,
        start.elapsed().as_secs_f64()
    );
}

fn scenario(seed: u64, n: usize, d: usize) -> tdlbm::datagen::SimulatedData {
    generate(&ScenarioSpec::scenario1(seed).with_size(n, d)).expect("scenario generates")
}

fn fit_config(seed: u64) -> MsemConfig {
    let mut cfg = MsemConfig::new(4, 3, "TFT".parse().unwrap());
    cfg.n_starts = 3;
    cfg.iterations = ITERATIONS;
    cfg.burn_in = BURN_IN;
    cfg.seed = seed;
    cfg
}

/// CARI of the M-SEM fit and of the double k-means baseline for each seed.
fn accuracy(n: usize, d: usize) -> Vec<(f64, f64)> {
    SEEDS
        .iter()
        .map(|&seed| {
            let sim = scenario(seed, n, d);
            let fit = run(&sim.grid, &fit_config(seed)).expect("fit succeeds");
            let (kz, kw) = double_kmeans(&sim.grid, 4, 3, &mut stream(seed, &[0xBA5E])).expect("k-means runs");
            (
                cari(&sim.z, &sim.w, &fit.z, &fit.w).unwrap(),
                cari(&sim.z, &sim.w, &kz, &kw).unwrap(),
            )
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(v: impl Iterator<Item = f64>) -> String {
    v.map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn selection() -> Outcome {
    let start = Instant::now();
    let mut picked = Vec::new();
    let mut beats = 0;
    for &seed in &SEEDS {
        let sim = scenario(seed, 100, 20);
        let mut template = MsemConfig::new(4, 3, "TFT".parse().unwrap());
        template.n_starts = SELECT_STARTS;
        template.iterations = SELECT_ITERATIONS;
        template.burn_in = SELECT_BURN_IN;
        template.seed = seed;
        let models = ModelGrid {
            k_values: vec![3, 4, 5],
            l_values: vec![3, 4, 5],
            re_configs: vec![template.re_config],
            template,
        };
        let sel = model_search(&sim.grid, &models).expect("model search succeeds");
        let icl = |k, l| sel.ranking.iter().find(|m| m.k == k && m.l == l).map(|m| m.icl);
        if let (Some(a), Some(b)) = (icl(4, 3), icl(3, 3)) {
            beats += usize::from(a > b);
        }
        picked.push((sel.best().k, sel.best().l));
    }
    let hits = picked.iter().filter(|&&p| p == (4, 3)).count();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let in_time = minutes <= 120.0;
    let list = picked.iter().map(|(k, l)| format!("({k},{l})")).collect::<Vec<_>>().join(" ");
    if hits >= 3 {
        outcome(in_time, format!("(4,3) selected {hits}/5 >= 3 [{list}], {minutes:.1} min <= 120"))
    } else if hits == 2 {
        outcome(
            beats >= 4 && in_time,
            format!(
                "(4,3) selected {hits}/5 < 3 [{list}]; fallback ICL(4,3) > ICL(3,3) on {beats}/5 (need >= 4), {minutes:.1} min"
            ),
        )
    } else {
        outcome(false, format!("(4,3) selected {hits}/5 < 3 [{list}]; ICL(4,3) > ICL(3,3) on {beats}/5"))
    }
}

fn oracles() -> Outcome {
    let suites: [(&str, fn() -> common::Check); 10] = [
        ("de Boor recursion", common::basis_matches_recursive_de_boor),
        ("quadratic basis example", common::quadratic_example_row),
        ("shape pointwise", common::shape_values_match_pointwise_oracle),
        ("amplitude marginal vs quadrature", common::amplitude_marginal_matches_quadrature),
        ("complete loglik direct sum", common::complete_loglik_matches_direct_sum_exhaustively),
        ("conditionals vs joint", common::conditionals_match_normalized_joint),
        ("ARI pair enumeration", common::ari_matches_pair_enumeration_exhaustively),
        ("CARI materialized cells", common::cari_matches_materialized_cells_exhaustively),
        ("CARI hand case", common::cari_hand_case),
        ("FFF block fit vs OLS", common::fff_block_fit_matches_ols),
    ];
    let mut failed = Vec::new();
    for (name, check) in suites {
        let result = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        if let Err(e) = result {
            failed.push(format!("{name}: {e}"));
        }
    }
    let (icl, closed_form) = common::icl_example();
    let literal_ok = (icl - -512.05).abs() <= 0.01;
    if !literal_ok {
        failed.push(format!(
            "ICL example {icl:.3} is not -512.05 +- 0.01 (the closed form of the same expression is {closed_form:.3}; the stated value is off by 0.49)"
        ));
    }
    let total = suites.len() + 1;
    let detail = if failed.is_empty() {
        format!("{total}/{total} checks pass")
    } else {
        format!("{}/{total} checks pass; {}", total - failed.len(), failed.join("; "))
    };
    outcome(failed.is_empty(), detail)
}

fn cli_fit(data: &Path, out: &Path, config: &Path, threads: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tdlbm"))
        .args(["fit", "--data"])
        .arg(data)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .args(["--threads", threads])
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let sim = scenario(11, 40, 12);
    let data = dir.path().join("data.csv");
    tdlbm::grid::save_csv(&sim.grid, &data).expect("data written");
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "K = 4\nL = 3\nre_config = \"TFT\"\nseed = 2024\nn_starts = 2\niterations = 12\nburn_in = 6\nmc_samples = 50\n",
    )
    .expect("config written");
    let threads = ["1", "1", "2", "4"];
    let mut outs = Vec::new();
    for (r, t) in threads.iter().enumerate() {
        let out = dir.path().join(format!("run{r}"));
        if !cli_fit(&data, &out, &config, t) {
            return outcome(false, format!("fit with threads={t} failed"));
        }
        outs.push(out);
    }
    let files = ["rows.csv", "cols.csv", "trace.csv", "curves.csv", "report.json", "report.txt"];
    let mut differing = Vec::new();
    for f in files {
        let first = fs::read(outs[0].join(f)).unwrap_or_default();
        for (r, other) in outs.iter().enumerate().skip(1) {
            if fs::read(other.join(f)).unwrap_or_default() != first {
                differing.push(format!("{f} (threads={})", threads[r]));
            }
        }
    }
    if differing.is_empty() {
        outcome(true, format!("{} output files byte-identical over threads 1, 1, 2, 4", files.len()))
    } else {
        outcome(false, format!("differs: {}", differing.join(", ")))
    }
}

fn main() {
    // the harness-less target still receives test-runner flags; listing must stay empty
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    println!("acceptance: {ITERATIONS} iterations ({BURN_IN} burn-in) per chain, selection {SELECT_STARTS} x {SELECT_ITERATIONS} ({SELECT_BURN_IN})");

    let mut full: Option<Vec<(f64, f64)>> = None;
    let start = Instant::now();
    report("C1 scenario-1 accuracy (n=100, d=20, TFT, 3 starts)", || {
        let scores = accuracy(100, 20);
        let m = mean(scores.iter().map(|s| s.0));
        let minutes = start.elapsed().as_secs_f64() / 60.0;
        full = Some(scores.clone());
        outcome(
            m >= 0.90,
            format!(
                "mean CARI {m:.3} >= 0.90 required [{}], {minutes:.1} min (30 min guide)",
                fmt_list(scores.iter().map(|s| s.0))
            ),
        )
    });

    report("C2 desk-scale accuracy (n=50, d=10)", || {
        let start = Instant::now();
        let scores = accuracy(50, 10);
        let m = mean(scores.iter().map(|s| s.0));
        let minutes = start.elapsed().as_secs_f64() / 60.0;
        outcome(
            m >= 0.85 && minutes <= 5.0,
            format!(
                "mean CARI {m:.3} >= 0.85 required [{}], {minutes:.1} min <= 5 required",
                fmt_list(scores.iter().map(|s| s.0))
            ),
        )
    });

    report("C3 ICL selects (4,3) over K, L in {3,4,5}", selection);

    report("C4 double k-means baseline below M-SEM", || match &full {
        Some(scores) => {
            let msem = mean(scores.iter().map(|s| s.0));
            let km = mean(scores.iter().map(|s| s.1));
            outcome(
                km < msem,
                format!("k-means mean CARI {km:.3} < M-SEM {msem:.3} [{}]", fmt_list(scores.iter().map(|s| s.1))),
            )
        }
        None => outcome(false, "no scenario-1 fits to compare (C1 did not finish)".into()),
    });

    report("C5 oracle suites", oracles);

    report("C6 CLI fit determinism", determinism);
}
