//! The observed `n x d` grid of curves and its long-format CSV encoding.
//!
//! The CSV header is `row_id,col_id,t,value`. Each row id has its own time
//! grid, the sorted union of the times it appears with; triples absent from
//! the file and `NA` values are both missing entries. Writing emits every
//! `(row, col, t)` of the grid in row, column, time order with `NA` for
//! missing values, which is the canonical form read back byte-identically.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim_model::CellCurve;

#[derive(Debug, Clone, PartialEq)]
pub struct CurveGrid {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    /// Row-major, `cells[i * d + j]`.
    pub cells: Vec<CellCurve>,
}

impl CurveGrid {
    pub fn new(row_ids: Vec<String>, col_ids: Vec<String>, cells: Vec<CellCurve>) -> Result<Self> {
        let grid = CurveGrid {
            row_ids,
            col_ids,
            cells,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn n(&self) -> usize {
        self.row_ids.len()
    }

    pub fn d(&self) -> usize {
        self.col_ids.len()
    }

    pub fn cell(&self, i: usize, j: usize) -> &CellCurve {
        &self.cells[i * self.d() + j]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut CellCurve {
        let d = self.d();
        &mut self.cells[i * d + j]
    }

    pub fn n_observed(&self) -> usize {
        self.cells.iter().map(|c| c.n_observed()).sum()
    }

    /// Smallest and largest time over all cells.
    pub fn time_range(&self) -> (f64, f64) {
        self.cells
            .iter()
            .flat_map(|c| c.times.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t), hi.max(t))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n(), self.d());
        if n == 0 || d == 0 {
            return Err(Error::Data {
                line: 0,
                msg: "grid has no rows or no columns".into(),
            });
        }
        if self.cells.len() != n * d {
            return Err(Error::Shape(format!(
                "grid has {} cells, expected {}",
                self.cells.len(),
                n * d
            )));
        }
        for (kind, ids) in [("row", &self.row_ids), ("column", &self.col_ids)] {
            let unique: BTreeSet<&String> = ids.iter().collect();
            if unique.len() != ids.len() {
                return Err(Error::Data {
                    line: 0,
                    msg: format!("duplicate {kind} id"),
                });
            }
        }
        for c in &self.cells {
            if c.times.len() != c.values.len() || c.times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data {
                    line: 0,
                    msg: "cell times must be strictly increasing and match values".into(),
                });
            }
        }
        for i in 0..n {
            if (0..d).all(|j| self.cell(i, j).n_observed() == 0) {
                return Err(Error::Data {
                    line: 0,
                    msg: format!("row '{}' has no observations", self.row_ids[i]),
                });
            }
        }
        for j in 0..d {
            if (0..n).all(|i| self.cell(i, j).n_observed() == 0) {
                return Err(Error::Data {
                    line: 0,
                    msg: format!("column '{}' has no observations", self.col_ids[j]),
                });
            }
        }
        Ok(())
    }
}

fn parse_num(field: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} '{field}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{what} '{field}' is not finite"),
        });
    }
    Ok(v)
}

/// Reads a long-format grid from a file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<CurveGrid> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<CurveGrid> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let expected = ["row_id", "col_id", "t", "value"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be row_id,col_id,t,value, found {:?}", headers),
        });
    }

    let mut row_index: HashMap<String, usize> = HashMap::new();
    let mut col_index: HashMap<String, usize> = HashMap::new();
    let mut row_ids = Vec::new();
    let mut col_ids = Vec::new();
    let mut entries: HashMap<(usize, usize, u64), Option<f64>> = HashMap::new();
    let mut row_times: Vec<BTreeSet<u64>> = Vec::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let row = record[0].to_string();
        let col = record[1].to_string();
        let t = parse_num(&record[2], "time", line)?;
        let value = match &record[3] {
            "NA" => None,
            other => Some(parse_num(other, "value", line)?),
        };
        let i = *row_index.entry(row.clone()).or_insert_with(|| {
            row_ids.push(row);
            row_times.push(BTreeSet::new());
            row_ids.len() - 1
        });
        let j = *col_index.entry(col.clone()).or_insert_with(|| {
            col_ids.push(col);
            col_ids.len() - 1
        });
        // normalize -0.0 so it sorts with 0.0
        let t = if t == 0.0 { 0.0 } else { t };
        let key = ordered_bits(t);
        if entries.insert((i, j, key), value).is_some() {
            return Err(Error::Data {
                line,
                msg: format!(
                    "duplicate entry for row '{}', column '{}', t = {t}",
                    row_ids[i], col_ids[j]
                ),
            });
        }
        row_times[i].insert(key);
    }

    let d = col_ids.len();
    let mut cells = Vec::with_capacity(row_ids.len() * d);
    for (i, times) in row_times.iter().enumerate() {
        let grid: Vec<u64> = times.iter().copied().collect();
        let t: Vec<f64> = grid.iter().map(|&k| from_ordered_bits(k)).collect();
        for j in 0..d {
            let values = grid
                .iter()
                .map(|&k| entries.get(&(i, j, k)).copied().flatten())
                .collect();
            cells.push(CellCurve {
                times: t.clone(),
                values,
            });
        }
    }
    CurveGrid::new(row_ids, col_ids, cells)
}

// Order-preserving map from finite f64 to u64 so times can key ordered sets.
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn from_ordered_bits(k: u64) -> f64 {
    if k >> 63 == 1 {
        f64::from_bits(k & !(1 << 63))
    } else {
        f64::from_bits(!k)
    }
}

/// Writes the grid in canonical long format.
pub fn write_csv<W: Write>(grid: &CurveGrid, mut out: W) -> Result<()> {
    writeln!(out, "row_id,col_id,t,value")?;
    for i in 0..grid.n() {
        for j in 0..grid.d() {
            let cell = grid.cell(i, j);
            for (t, v) in cell.times.iter().zip(&cell.values) {
                match v {
                    Some(x) => writeln!(out, "{},{},{},{}", grid.row_ids[i], grid.col_ids[j], t, x)?,
                    None => writeln!(out, "{},{},{},NA", grid.row_ids[i], grid.col_ids[j], t)?,
                }
            }
        }
    }
    Ok(())
}

pub fn save_csv(grid: &CurveGrid, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(grid, &mut w)?;
    w.flush()?;
    Ok(())
}
