//! Transformations applied to a grid before fitting.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::CurveGrid;
use crate::sim_model::CellCurve;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    Log1p,
    Log,
    /// Global standardization over all observed values.
    Standardize,
    /// Averages consecutive windows of time points.
    Aggregate(usize),
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Log1p => f.write_str("log1p"),
            Step::Log => f.write_str("log"),
            Step::Standardize => f.write_str("standardize"),
            Step::Aggregate(w) => write!(f, "aggregate({w})"),
        }
    }
}

impl FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "log1p" => return Ok(Step::Log1p),
            "log" => return Ok(Step::Log),
            "standardize" => return Ok(Step::Standardize),
            _ => {}
        }
        let window = s
            .strip_prefix("aggregate(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("aggregate:"))
            .ok_or_else(|| Error::Config(format!("unknown preprocessing step '{s}'")))?;
        let w: usize = window
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad aggregation window in '{s}'")))?;
        if w == 0 {
            return Err(Error::Config("aggregation window must be >= 1".into()));
        }
        Ok(Step::Aggregate(w))
    }
}

/// Parses a comma-separated step list such as `log1p,standardize,aggregate(7)`.
pub fn parse_steps(list: &str) -> Result<Vec<Step>> {
    let mut steps = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (idx, ch) in list.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                steps.push(list[start..idx].parse()?);
                start = idx + 1;
            }
            _ => {}
        }
    }
    if !list[start..].trim().is_empty() {
        steps.push(list[start..].parse()?);
    }
    Ok(steps)
}

pub fn preprocess(grid: &CurveGrid, steps: &[Step]) -> Result<CurveGrid> {
    let mut out = grid.clone();
    for step in steps {
        out = apply(&out, *step)?;
    }
    out.validate()?;
    Ok(out)
}

fn map_values(
    grid: &CurveGrid,
    f: impl Fn(f64) -> Option<f64>,
    what: &str,
) -> Result<CurveGrid> {
    let mut out = grid.clone();
    for i in 0..grid.n() {
        for j in 0..grid.d() {
            let cell = out.cell_mut(i, j);
            for (t, v) in cell.times.iter().zip(cell.values.iter_mut()) {
                if let Some(x) = v {
                    *x = f(*x).ok_or_else(|| {
                        Error::Preprocess(format!(
                            "{what} undefined for value {x} in cell ({}, {}) at t = {t}",
                            grid.row_ids[i], grid.col_ids[j]
                        ))
                    })?;
                }
            }
        }
    }
    Ok(out)
}

fn apply(grid: &CurveGrid, step: Step) -> Result<CurveGrid> {
    match step {
        Step::Log => map_values(grid, |x| (x > 0.0).then(|| x.ln()), "log"),
        Step::Log1p => map_values(grid, |x| (x > -1.0).then(|| x.ln_1p()), "log1p"),
        Step::Standardize => {
            let values: Vec<f64> = grid
                .cells
                .iter()
                .flat_map(|c| c.values.iter().flatten().copied())
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(Error::Preprocess(
                    "cannot standardize: observed values are constant".into(),
                ));
            }
            let sd = var.sqrt();
            map_values(grid, |x| Some((x - mean) / sd), "standardize")
        }
        Step::Aggregate(window) => {
            let mut out = grid.clone();
            for cell in out.cells.iter_mut() {
                *cell = aggregate_cell(cell, window);
            }
            Ok(out)
        }
    }
}

fn aggregate_cell(cell: &CellCurve, window: usize) -> CellCurve {
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (ts, vs) in cell.times.chunks(window).zip(cell.values.chunks(window)) {
        times.push(ts.iter().sum::<f64>() / ts.len() as f64);
        let obs: Vec<f64> = vs.iter().flatten().copied().collect();
        values.push((!obs.is_empty()).then(|| obs.iter().sum::<f64>() / obs.len() as f64));
    }
    CellCurve { times, values }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<Vec<f64>>) -> CurveGrid {
        let times: Vec<f64> = (0..values[0].len()).map(|t| t as f64).collect();
        let n = values.len();
        CurveGrid::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            vec!["c".into()],
            values
                .into_iter()
                .map(|v| CellCurve::full(times.clone(), v))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn standardize_is_idempotent() {
        let g = grid(vec![vec![1.0, 5.0, 2.0], vec![-3.0, 0.5, 8.0]]);
        let once = preprocess(&g, &[Step::Standardize]).unwrap();
        let twice = preprocess(&once, &[Step::Standardize]).unwrap();
        for (a, b) in once.cells.iter().zip(&twice.cells) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x.unwrap() - y.unwrap()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weekly_aggregation() {
        let daily: Vec<f64> = (0..28).map(|t| t as f64).collect();
        let g = grid(vec![daily]);
        let weekly = preprocess(&g, &[Step::Aggregate(7)]).unwrap();
        let c = weekly.cell(0, 0);
        assert_eq!(c.times, vec![3.0, 10.0, 17.0, 24.0]);
        assert_eq!(c.values, vec![Some(3.0), Some(10.0), Some(17.0), Some(24.0)]);
    }

    #[test]
    fn aggregation_uses_available_cases() {
        let c = CellCurve {
            times: vec![0.0, 1.0, 2.0, 3.0],
            values: vec![Some(1.0), None, None, None],
        };
        let a = aggregate_cell(&c, 2);
        assert_eq!(a.values, vec![Some(1.0), None]);
    }

    #[test]
    fn log_of_zero_names_cell() {
        let g = grid(vec![vec![1.0, 0.0]]);
        match preprocess(&g, &[Step::Log]) {
            Err(Error::Preprocess(msg)) => assert!(msg.contains("(r0, c)")),
            other => panic!("expected preprocessing error, got {other:?}"),
        }
        assert!(preprocess(&g, &[Step::Log1p]).is_ok());
    }

    #[test]
    fn parse_step_lists() {
        assert_eq!(
            parse_steps("log1p, standardize,aggregate(7)").unwrap(),
            vec![Step::Log1p, Step::Standardize, Step::Aggregate(7)]
        );
        assert!(parse_steps("smooth").is_err());
        assert!(parse_steps("aggregate(0)").is_err());
    }
}
