use tdlbm::datagen::{default_layout, equispaced, generate, ScenarioSpec, Shapes, K_TRUE, L_TRUE};
use tdlbm::error::Error;

#[test]
fn labels_are_balanced_round_robin() {
    let sim = generate(&ScenarioSpec::scenario1(1).with_size(10, 7)).unwrap();
    assert_eq!(sim.z, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
    assert_eq!(sim.w, vec![0, 1, 2, 0, 1, 2, 0]);
    assert_eq!((sim.grid.n(), sim.grid.d()), (10, 7));
    assert_eq!(sim.grid.row_ids[0], "r1");
    assert_eq!(sim.grid.col_ids[6], "v7");
}

#[test]
fn same_seed_same_grid() {
    let a = generate(&ScenarioSpec::scenario1(5).with_size(8, 6)).unwrap();
    let b = generate(&ScenarioSpec::scenario1(5).with_size(8, 6)).unwrap();
    let c = generate(&ScenarioSpec::scenario1(6).with_size(8, 6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.grid, c.grid);
}

#[test]
fn block_means_follow_standardized_shapes() {
    let mut spec = ScenarioSpec::scenario1(2).with_size(4 * 1700, 3);
    spec.sigma_alpha = [1.0, 0.0, 0.0];
    let sim = generate(&spec).unwrap();
    let times = equispaced(15);
    let shapes = Shapes::on_grid(&times).unwrap();
    let layout = default_layout();
    let se = ((1.0 + 0.09) / 1700.0f64).sqrt();
    for k in 0..K_TRUE {
        for l in 0..L_TRUE {
            for (p, &t) in times.iter().enumerate() {
                let vals: Vec<f64> = (0..sim.grid.n())
                    .filter(|&i| sim.z[i] == k)
                    .map(|i| sim.grid.cell(i, l).values[p].unwrap())
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let want = shapes.value(layout[k][l], t).unwrap();
                assert!((mean - want).abs() < 4.0 * se, "block ({k},{l}) t={t}: {mean} vs {want}");
            }
        }
    }
}

/// Argument `u` with `shape(u) = v` for a monotone shape, by bisection.
fn invert(shapes: &Shapes, id: u8, v: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if shapes.clamped(id, mid) < v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn phase_shifts_have_the_given_variance() {
    let mut spec = ScenarioSpec::scenario1(3).with_size(4 * 2000, 3);
    spec.sigma_alpha = [0.0, 0.0, 0.01];
    spec.sigma_eps = 1e-9;
    let sim = generate(&spec).unwrap();
    let shapes = Shapes::on_grid(&equispaced(15)).unwrap();
    // block (1, 1) carries the monotone shape 4; t = 0.5 is grid point 7
    assert_eq!(default_layout()[1][1], 4);
    let shifts: Vec<f64> = (0..sim.grid.n())
        .filter(|&i| sim.z[i] == 1)
        .map(|i| 0.5 - invert(&shapes, 4, sim.grid.cell(i, 1).values[7].unwrap()))
        .collect();
    let n = shifts.len() as f64;
    let mean = shifts.iter().sum::<f64>() / n;
    let var = shifts.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 4.0 * (0.01 / n).sqrt(), "mean {mean}");
    assert!((var - 0.01).abs() < 4.0 * 0.01 * (2.0 / (n - 1.0)).sqrt(), "variance {var}");
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut spec = ScenarioSpec::scenario1(1);
    spec.layout[1] = spec.layout[0];
    assert!(matches!(generate(&spec), Err(Error::Config(_))));
    let spec = ScenarioSpec::scenario1(1).with_size(3, 20);
    assert!(matches!(generate(&spec), Err(Error::Config(_))));
    let mut spec = ScenarioSpec::scenario1(1);
    spec.sigma_eps = 0.0;
    assert!(matches!(generate(&spec), Err(Error::Config(_))));
    let mut spec = ScenarioSpec::scenario1(1);
    spec.layout[0][0] = 7;
    assert!(matches!(generate(&spec), Err(Error::Config(_))));
}
