//! B-spline bases for the common shape functions.
//!
//! Knot vectors are clamped: the boundary knots are repeated `degree + 1`
//! times and the interior knots sit at equispaced quantiles of the domain.
//! Basis values are computed with the triangular Cox-de Boor scheme, which
//! only touches the `degree + 1` functions that are nonzero on a span.

use crate::error::{Error, Result};

/// Degree, interior knot count and domain of a clamped B-spline basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSpec {
    pub degree: usize,
    pub interior_knots: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl SplineSpec {
    pub fn new(degree: usize, interior_knots: usize, t_min: f64, t_max: f64) -> Result<Self> {
        let spec = SplineSpec {
            degree,
            interior_knots,
            t_min,
            t_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Cubic basis with the given number of interior knots.
    pub fn cubic(interior_knots: usize, t_min: f64, t_max: f64) -> Result<Self> {
        Self::new(3, interior_knots, t_min, t_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min.is_finite() && self.t_max.is_finite()) {
            return Err(Error::Spec("domain bounds must be finite".into()));
        }
        if self.t_min >= self.t_max {
            return Err(Error::Spec(format!(
                "empty domain [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.degree > 20 {
            return Err(Error::Spec(format!("degree {} is too large", self.degree)));
        }
        Ok(())
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.interior_knots + self.degree + 1
    }

    /// Full clamped knot vector of length `dim + degree + 1`.
    pub fn knots(&self) -> Vec<f64> {
        let p = self.degree;
        let width = self.t_max - self.t_min;
        let m = self.interior_knots;
        let mut knots = Vec::with_capacity(self.dim() + p + 1);
        knots.extend(std::iter::repeat_n(self.t_min, p + 1));
        for i in 1..=m {
            knots.push(self.t_min + width * i as f64 / (m + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(self.t_max, p + 1));
        knots
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }
}

/// Dense row-major matrix of basis values, one row per evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl BasisMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Index `s` of the knot span with `knots[s] <= t < knots[s + 1]`,
/// restricted to `degree..n_basis`. The right endpoint belongs to the last
/// nonempty span.
pub(crate) fn find_span(knots: &[f64], degree: usize, n_basis: usize, t: f64) -> usize {
    if t >= knots[n_basis] {
        return n_basis - 1;
    }
    if t <= knots[degree] {
        return degree;
    }
    // first index with knots[idx] > t, minus one
    let upper = knots[degree..=n_basis].partition_point(|&k| k <= t) + degree;
    (upper - 1).clamp(degree, n_basis - 1)
}

/// Values of the `degree + 1` basis functions nonzero on span `span`,
/// written into `out` (which must have length `degree + 1`).
pub(crate) fn basis_funs(knots: &[f64], degree: usize, span: usize, t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), degree + 1);
    let mut left = [0.0f64; 24];
    let mut right = [0.0f64; 24];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

fn fill_row(spec: &SplineSpec, knots: &[f64], t: f64, row: &mut [f64]) {
    let p = spec.degree;
    let n = spec.dim();
    let span = find_span(knots, p, n, t);
    let mut local = vec![0.0; p + 1];
    basis_funs(knots, p, span, t, &mut local);
    row.iter_mut().for_each(|v| *v = 0.0);
    for (r, v) in local.into_iter().enumerate() {
        row[span - p + r] = v;
    }
}

/// Evaluates every basis function at every time. Times must lie in the
/// spline domain.
pub fn make_basis(spec: &SplineSpec, times: &[f64]) -> Result<BasisMatrix> {
    spec.validate()?;
    if let Some(&bad) = times.iter().find(|&&t| !spec.contains(t)) {
        return Err(Error::Domain {
            value: bad,
            lo: spec.t_min,
            hi: spec.t_max,
        });
    }
    Ok(build(spec, times.iter().copied()))
}

/// Basis evaluated at `times - shift`; shifted times leaving the domain are
/// clamped to the nearest endpoint.
pub fn shifted_basis(spec: &SplineSpec, times: &[f64], shift: f64) -> Result<BasisMatrix> {
    spec.validate()?;
    Ok(build(spec, times.iter().map(|&t| spec.clamp(t - shift))))
}

fn build(spec: &SplineSpec, times: impl ExactSizeIterator<Item = f64>) -> BasisMatrix {
    let knots = spec.knots();
    let cols = spec.dim();
    let rows = times.len();
    let mut data = vec![0.0; rows * cols];
    for (i, t) in times.enumerate() {
        fill_row(spec, &knots, t, &mut data[i * cols..(i + 1) * cols]);
    }
    BasisMatrix { rows, cols, data }
}

/// Matrix-vector product `basis * beta`.
pub fn eval_shape(basis: &BasisMatrix, beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != basis.cols {
        return Err(Error::Shape(format!(
            "coefficient vector has length {}, basis has {} columns",
            beta.len(),
            basis.cols
        )));
    }
    Ok((0..basis.rows)
        .map(|i| basis.row(i).iter().zip(beta).map(|(b, c)| b * c).sum())
        .collect())
}

/// A spline curve compiled to piecewise-polynomial form for fast repeated
/// evaluation. Arguments outside the domain are clamped, so the curve is
/// extended by constants and its slope there is zero.
#[derive(Debug, Clone)]
pub struct ShapeFn {
    breaks: Vec<f64>,
    // per interval, Taylor coefficients at the left breakpoint
    coefs: Vec<f64>,
    order: usize,
    t_min: f64,
    t_max: f64,
}

impl ShapeFn {
    pub fn new(spec: &SplineSpec, beta: &[f64]) -> Result<Self> {
        spec.validate()?;
        if beta.len() != spec.dim() {
            return Err(Error::Shape(format!(
                "coefficient vector has length {}, basis dimension is {}",
                beta.len(),
                spec.dim()
            )));
        }
        let knots = spec.knots();
        let p = spec.degree;
        let n = spec.dim();
        let breaks: Vec<f64> = knots[p..=n].to_vec();

        // successive derivative splines: (knots, degree, coefs)
        let mut derivs = vec![(knots.clone(), p, beta.to_vec())];
        for _ in 0..p {
            let (k, deg, c) = derivs.last().unwrap();
            derivs.push(differentiate(k, *deg, c));
        }

        let order = p + 1;
        let intervals = breaks.len() - 1;
        let mut coefs = vec![0.0; intervals * order];
        let mut factorial = 1.0;
        for (r, (k, deg, c)) in derivs.iter().enumerate() {
            if r > 0 {
                factorial *= r as f64;
            }
            for s in 0..intervals {
                coefs[s * order + r] = eval_raw(k, *deg, c, breaks[s]) / factorial;
            }
        }
        Ok(ShapeFn {
            breaks,
            coefs,
            order,
            t_min: spec.t_min,
            t_max: spec.t_max,
        })
    }

    #[inline]
    fn locate(&self, t: f64) -> usize {
        let last = self.breaks.len() - 2;
        if self.breaks.len() == 2 {
            return 0;
        }
        (self.breaks[1..=last].partition_point(|&b| b <= t)).min(last)
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let t = t.clamp(self.t_min, self.t_max);
        let s = self.locate(t);
        let u = t - self.breaks[s];
        let c = &self.coefs[s * self.order..(s + 1) * self.order];
        c.iter().rev().fold(0.0, |acc, &a| acc * u + a)
    }

    /// Value (clamped) and slope (zero outside the domain) in one lookup.
    #[inline]
    pub fn value_and_slope(&self, t: f64) -> (f64, f64) {
        let inside = t >= self.t_min && t <= self.t_max;
        let t = t.clamp(self.t_min, self.t_max);
        let s = self.locate(t);
        let u = t - self.breaks[s];
        let c = &self.coefs[s * self.order..(s + 1) * self.order];
        let mut v = 0.0;
        let mut d = 0.0;
        for r in (0..self.order).rev() {
            d = d * u + v;
            v = v * u + c[r];
        }
        (v, if inside { d } else { 0.0 })
    }

    /// First derivative with respect to the argument; zero outside the domain.
    #[inline]
    pub fn slope(&self, t: f64) -> f64 {
        if t < self.t_min || t > self.t_max {
            return 0.0;
        }
        let s = self.locate(t);
        let u = t - self.breaks[s];
        let c = &self.coefs[s * self.order..(s + 1) * self.order];
        let mut acc = 0.0;
        for r in (1..self.order).rev() {
            acc = acc * u + r as f64 * c[r];
        }
        acc
    }
}

/// Derivative of a B-spline curve as a B-spline of one lower degree.
fn differentiate(knots: &[f64], degree: usize, coefs: &[f64]) -> (Vec<f64>, usize, Vec<f64>) {
    let n = coefs.len();
    let p = degree as f64;
    let new_coefs: Vec<f64> = (0..n - 1)
        .map(|i| {
            let denom = knots[i + degree + 1] - knots[i + 1];
            if denom == 0.0 {
                0.0
            } else {
                p * (coefs[i + 1] - coefs[i]) / denom
            }
        })
        .collect();
    (knots[1..knots.len() - 1].to_vec(), degree - 1, new_coefs)
}

fn eval_raw(knots: &[f64], degree: usize, coefs: &[f64], t: f64) -> f64 {
    let n = coefs.len();
    let span = find_span(knots, degree, n, t);
    let mut local = vec![0.0; degree + 1];
    basis_funs(knots, degree, span, t, &mut local);
    local
        .iter()
        .enumerate()
        .map(|(r, b)| b * coefs[span - degree + r])
        .sum()
}

/// Sparse basis row: index of the first nonzero column and the
/// `degree + 1` values starting there. Times are clamped to the domain.
pub(crate) fn sparse_row(spec: &SplineSpec, knots: &[f64], t: f64, out: &mut [f64]) -> usize {
    let t = spec.clamp(t);
    let span = find_span(knots, spec.degree, spec.dim(), t);
    basis_funs(knots, spec.degree, span, t, out);
    span - spec.degree
}
