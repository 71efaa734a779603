use tdlbm::datagen::{generate, ScenarioSpec};
use tdlbm::error::Error;
use tdlbm::msem::MsemConfig;
use tdlbm::selection::{icl_value, model_search, ModelGrid, ICL_BIAS_WARNING};
use tdlbm::sim_model::RandomEffectConfig;

fn cfg(s: &str) -> RandomEffectConfig {
    s.parse().unwrap()
}

fn template() -> MsemConfig {
    let mut t = MsemConfig::new(1, 1, cfg("TFF"));
    t.iterations = 6;
    t.burn_in = 3;
    t.mc_samples = 20;
    t.final_sweeps = 20;
    t.threads = 1;
    t
}

fn grid() -> tdlbm::grid::CurveGrid {
    let mut spec = ScenarioSpec::scenario1(4).with_size(16, 6);
    spec.sigma_alpha = [0.1, 0.0, 0.0];
    spec.sigma_eps = 0.2;
    generate(&spec).unwrap().grid
}

#[test]
fn ranking_is_sorted_and_consistent() {
    let data = grid();
    let models = ModelGrid {
        k_values: vec![1, 4],
        l_values: vec![1, 3],
        re_configs: vec![cfg("TFF")],
        template: template(),
    };
    let sel = model_search(&data, &models).unwrap();
    assert_eq!(sel.ranking.len(), 4);
    assert!(sel.failures.is_empty());
    assert!(!sel.configs_searched);
    assert_eq!(sel.warnings, vec![ICL_BIAS_WARNING.to_string()]);
    assert!(sel.ranking.windows(2).all(|p| p[0].icl >= p[1].icl));
    for m in &sel.ranking {
        assert_eq!(m.nu, 8 + 1 + 1);
        let want = icl_value(m.loglik, 16, 6, m.k, m.l, m.nu);
        assert_eq!(m.icl.to_bits(), want.to_bits());
    }
    assert_eq!((sel.best().k, sel.best().l), (4, 3));
}

#[test]
fn failed_candidates_are_reported() {
    let data = grid();
    let models = ModelGrid {
        k_values: vec![1, 40],
        l_values: vec![1],
        re_configs: vec![cfg("TFF")],
        template: template(),
    };
    let sel = model_search(&data, &models).unwrap();
    assert_eq!(sel.ranking.len(), 1);
    assert_eq!(sel.failures.len(), 1);
    assert_eq!(sel.failures[0].k, 40);
    assert!(sel.warnings.iter().any(|w| w.contains("K=40")));
}

#[test]
fn all_failures_are_an_error() {
    let data = grid();
    let models = ModelGrid {
        k_values: vec![40],
        l_values: vec![1, 2],
        re_configs: vec![cfg("TFF")],
        template: template(),
    };
    match model_search(&data, &models) {
        Err(Error::AllFailed(msgs)) => assert_eq!(msgs.len(), 2),
        other => panic!("expected AllFailed, got {other:?}"),
    }
}

#[test]
fn configuration_search_covers_every_point() {
    let data = grid();
    let models = ModelGrid {
        k_values: vec![2],
        l_values: vec![1],
        re_configs: vec![cfg("FFF"), cfg("TFF")],
        template: template(),
    };
    let sel = model_search(&data, &models).unwrap();
    assert!(sel.configs_searched);
    let mut seen: Vec<String> = sel.ranking.iter().map(|m| m.re_config.to_string()).collect();
    seen.sort();
    assert_eq!(seen, vec!["FFF", "TFF"]);
}

#[test]
fn empty_grid_is_a_config_error() {
    let models = ModelGrid {
        k_values: vec![],
        l_values: vec![1],
        re_configs: vec![cfg("TFF")],
        template: template(),
    };
    assert!(matches!(model_search(&grid(), &models), Err(Error::Config(_))));
}
