//! Grids, quadrature, boundary traces and the bordered tridiagonal solver.
//!
//! Every solver in the crate works on uniform grids. The nonlocal boundary
//! couplings show up as one dense row and one dense column attached to an
//! otherwise tridiagonal matrix, which [`solve_bordered`] handles with a
//! Thomas sweep plus a rank-one correction.

use crate::error::{Error, Result, StepTag};

/// Uniform grid on `[a, b]` with `n` nodes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpaceGrid {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub dx: f64,
}

impl SpaceGrid {
    pub fn new(a: f64, b: f64, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Grid(format!("need at least 3 nodes, got {n}")));
        }
        if !(a.is_finite() && b.is_finite()) || b <= a {
            return Err(Error::Grid(format!("endpoints must satisfy a < b, got [{a}, {b}]")));
        }
        Ok(Self {
            a,
            b,
            n,
            dx: (b - a) / (n - 1) as f64,
        })
    }

    /// The symmetric grid on `[-1, 1]` used by the extended system.
    pub fn symmetric(n: usize) -> Result<Self> {
        Self::new(-1.0, 1.0, n)
    }

    /// The unit grid on `[0, 1]` used by the cylinder formulation.
    pub fn unit(n: usize) -> Result<Self> {
        Self::new(0.0, 1.0, n)
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.n {
            self.b
        } else {
            self.a + j as f64 * self.dx
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Composite trapezoid weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.dx; self.n];
        w[0] = 0.5 * self.dx;
        w[self.n - 1] = 0.5 * self.dx;
        w
    }

    /// Index of the node closest to `x`.
    pub fn nearest(&self, x: f64) -> usize {
        let j = ((x - self.a) / self.dx).round();
        j.clamp(0.0, (self.n - 1) as f64) as usize
    }
}

/// Uniform time grid `t_k = k * dt`, `k = 0..=m`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub m: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, m: usize) -> Result<Self> {
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::Grid(format!("horizon must be positive, got {t_final}")));
        }
        if m < 2 {
            return Err(Error::Grid(format!("need at least 2 time steps, got {m}")));
        }
        Ok(Self {
            t_final,
            m,
            dt: t_final / m as f64,
        })
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        if k == self.m {
            self.t_final
        } else {
            k as f64 * self.dt
        }
    }

    pub fn levels(&self) -> usize {
        self.m + 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.m).map(|k| self.t(k)).collect()
    }
}

/// Values on every (time level, node) pair, stored level by level.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    n: usize,
    levels: usize,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(n: usize, levels: usize) -> Self {
        Self {
            n,
            levels,
            data: vec![0.0; n * levels],
        }
    }

    pub fn from_fn(n: usize, levels: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * levels);
        for k in 0..levels {
            for j in 0..n {
                data.push(f(k, j));
            }
        }
        Self { n, levels, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let levels = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * levels);
        for r in rows {
            if r.len() != n {
                return Err(Error::Dimension {
                    what: "space-time rows",
                    expected: n,
                    got: r.len(),
                });
            }
            data.extend(r);
        }
        Ok(Self { n, levels, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.levels
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.data[k * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        self.data[k * self.n + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n: self.n,
            levels: self.levels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn axpy(&mut self, c: f64, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], grid: &SpaceGrid) -> Result<f64> {
    if values.len() != grid.n {
        return Err(Error::Dimension {
            what: "trapezoid integrand",
            expected: grid.n,
            got: values.len(),
        });
    }
    Ok(trapezoid_unchecked(values, grid.dx))
}

#[inline]
pub(crate) fn trapezoid_unchecked(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    let inner: f64 = values[1..n - 1].iter().sum();
    dx * (inner + 0.5 * (values[0] + values[n - 1]))
}

/// Trapezoid inner product `(f, g)` on a uniform grid.
#[inline]
pub fn inner(f: &[f64], g: &[f64], dx: f64) -> f64 {
    let n = f.len();
    let inner: f64 = (1..n - 1).map(|j| f[j] * g[j]).sum();
    dx * (inner + 0.5 * (f[0] * g[0] + f[n - 1] * g[n - 1]))
}

/// `1` at nodes strictly inside `(lo, hi)`, `0` elsewhere.
pub fn indicator(grid: &SpaceGrid, interval: (f64, f64)) -> Vec<f64> {
    grid.nodes()
        .into_iter()
        .map(|x| if x > interval.0 && x < interval.1 { 1.0 } else { 0.0 })
        .collect()
}

/// Sum of positive terms `Σ vᵢ e^{lᵢ}` kept as `(shift, mantissa)` so that
/// terms with exponents in the thousands neither overflow nor vanish.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSum {
    shift: f64,
    sum: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }
}

impl LogSum {
    /// Add `value · e^{log_weight}`. Non-positive values are ignored.
    pub fn add(&mut self, log_weight: f64, value: f64) {
        if !(value > 0.0) || log_weight == f64::NEG_INFINITY {
            return;
        }
        let lv = log_weight + value.ln();
        if lv > self.shift {
            self.sum = self.sum * (self.shift - lv).exp() + 1.0;
            self.shift = lv;
        } else {
            self.sum += (lv - self.shift).exp();
        }
    }

    pub fn merge(&mut self, other: &LogSum) {
        if other.sum > 0.0 {
            self.add(other.shift, other.sum);
        }
    }

    /// Natural log of the total; `−∞` when empty.
    pub fn ln(&self) -> f64 {
        if self.sum > 0.0 { self.shift + self.sum.ln() } else { f64::NEG_INFINITY }
    }

    pub fn value(&self) -> f64 {
        self.ln().exp()
    }
}

/// Trapezoid rule in time over levels `k = 0..=m`.
pub fn time_trapezoid(values: &[f64], dt: f64) -> f64 {
    trapezoid_unchecked(values, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Stencil weights of the second-order one-sided first derivative at the
/// right endpoint, applied to nodes `n-3, n-2, n-1`.
#[inline]
pub fn right_trace_weights(dx: f64) -> [f64; 3] {
    [0.5 / dx, -2.0 / dx, 1.5 / dx]
}

/// Second-order three-point one-sided derivative at an endpoint.
pub fn one_sided_trace_derivative(field: &[f64], grid: &SpaceGrid, side: Side) -> Result<f64> {
    if grid.n < 3 {
        return Err(Error::InsufficientStencil(grid.n));
    }
    if field.len() != grid.n {
        return Err(Error::Dimension {
            what: "trace field",
            expected: grid.n,
            got: field.len(),
        });
    }
    Ok(trace_unchecked(field, grid.dx, side))
}

#[inline]
pub(crate) fn trace_unchecked(field: &[f64], dx: f64, side: Side) -> f64 {
    let n = field.len();
    match side {
        Side::Right => (3.0 * field[n - 1] - 4.0 * field[n - 2] + field[n - 3]) / (2.0 * dx),
        Side::Left => (-3.0 * field[0] + 4.0 * field[1] - field[2]) / (2.0 * dx),
    }
}

/// Centered first difference at interior nodes, one-sided second-order at the ends.
pub fn gradient(field: &[f64], dx: f64) -> Vec<f64> {
    let n = field.len();
    let mut g = vec![0.0; n];
    for j in 1..n - 1 {
        g[j] = (field[j + 1] - field[j - 1]) / (2.0 * dx);
    }
    g[0] = trace_unchecked(field, dx, Side::Left);
    g[n - 1] = trace_unchecked(field, dx, Side::Right);
    g
}

/// Tridiagonal matrix: row `i` reads `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1]`.
/// `sub[0]` and `sup[n-1]` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![0.0; n],
            diag: vec![0.0; n],
            sup: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut t = Self::zeros(n);
        t.diag.copy_from_slice(&self.diag);
        for i in 0..n.saturating_sub(1) {
            t.sup[i] = self.sub[i + 1];
            t.sub[i + 1] = self.sup[i];
        }
        t
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * x[i + 1];
                }
                v
            })
            .collect()
    }

    fn norm_inf(&self) -> f64 {
        (0..self.len())
            .map(|i| self.sub[i].abs() + self.diag[i].abs() + self.sup[i].abs())
            .fold(0.0, f64::max)
    }

    /// Thomas factorization without pivoting.
    pub fn factor(&self) -> Result<TridiagonalLu> {
        let n = self.len();
        let scale = self.norm_inf().max(f64::MIN_POSITIVE);
        let mut pivot = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            let w = if i == 0 {
                self.diag[0]
            } else {
                self.diag[i] - self.sub[i] * upper[i - 1]
            };
            if !w.is_finite() || w.abs() <= 1e-14 * scale {
                return Err(Error::Singular {
                    step: StepTag(None),
                    detail: format!("zero pivot in tridiagonal elimination at row {i}"),
                });
            }
            pivot[i] = w;
            if i + 1 < n {
                upper[i] = self.sup[i] / w;
            }
        }
        Ok(TridiagonalLu {
            sub: self.sub.clone(),
            pivot,
            upper,
        })
    }
}

/// Factored tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    sub: Vec<f64>,
    pivot: Vec<f64>,
    upper: Vec<f64>,
}

impl TridiagonalLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.pivot.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let prev = if i == 0 { 0.0 } else { self.sub[i] * y[i - 1] };
            y[i] = (rhs[i] - prev) / self.pivot[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            y[i] -= self.upper[i] * y[i + 1];
        }
        y
    }
}

/// `(n+1) x (n+1)` system
/// ```text
/// [ T    col    ] [x]   [f]
/// [ row  corner ] [y] = [g]
/// ```
/// with `T` tridiagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderedTridiagonal {
    pub tri: Tridiagonal,
    pub col: Vec<f64>,
    pub row: Vec<f64>,
    pub corner: f64,
}

impl BorderedTridiagonal {
    pub fn size(&self) -> usize {
        self.tri.len() + 1
    }

    pub fn transpose(&self) -> Self {
        Self {
            tri: self.tri.transpose(),
            col: self.row.clone(),
            row: self.col.clone(),
            corner: self.corner,
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.tri.len();
        for (what, len) in [
            ("bordered sub-diagonal", self.tri.sub.len()),
            ("bordered super-diagonal", self.tri.sup.len()),
            ("bordered column", self.col.len()),
            ("bordered row", self.row.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.tri.len();
        let (x, y) = (&v[..n], v[n]);
        let mut out = self.tri.apply(x);
        for i in 0..n {
            out[i] += self.col[i] * y;
        }
        out.push(dot(&self.row, x) + self.corner * y);
        out
    }

    /// Dense copy, for oracles and diagnostics.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.tri.len();
        let mut a = vec![vec![0.0; n + 1]; n + 1];
        for i in 0..n {
            a[i][i] = self.tri.diag[i];
            if i > 0 {
                a[i][i - 1] = self.tri.sub[i];
            }
            if i + 1 < n {
                a[i][i + 1] = self.tri.sup[i];
            }
            a[i][n] = self.col[i];
            a[n][i] = self.row[i];
        }
        a[n][n] = self.corner;
        a
    }

    fn norm_inf(&self) -> f64 {
        let n = self.tri.len();
        let mut best = self.row.iter().map(|v| v.abs()).sum::<f64>() + self.corner.abs();
        for i in 0..n {
            let r = self.tri.sub[i].abs()
                + self.tri.diag[i].abs()
                + self.tri.sup[i].abs()
                + self.col[i].abs();
            best = best.max(r);
        }
        best
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve a bordered tridiagonal system by Thomas elimination on the
/// tridiagonal block and a scalar Schur-complement update for the border.
pub fn solve_bordered(system: &BorderedTridiagonal, rhs: &[f64]) -> Result<Vec<f64>> {
    system.check()?;
    let n = system.tri.len();
    if rhs.len() != n + 1 {
        return Err(Error::Dimension {
            what: "bordered right-hand side",
            expected: n + 1,
            got: rhs.len(),
        });
    }
    let lu = system.tri.factor()?;
    let u = lu.solve(&rhs[..n]);
    let v = lu.solve(&system.col);
    let complement = system.corner - dot(&system.row, &v);
    let scale = system.norm_inf().max(f64::MIN_POSITIVE);
    if !complement.is_finite() || complement.abs() <= 1e-14 * scale {
        return Err(Error::Singular {
            step: StepTag(None),
            detail: format!("border Schur complement vanishes ({complement:.3e})"),
        });
    }
    let y = (rhs[n] - dot(&system.row, &u)) / complement;
    let mut x: Vec<f64> = u.iter().zip(&v).map(|(ui, vi)| ui - vi * y).collect();
    x.push(y);
    Ok(x)
}

/// Four-point Lagrange interpolation of nodal values at an arbitrary point.
/// Falls back to the nearest in-range stencil near the endpoints.
pub fn interpolate_cubic(grid: &SpaceGrid, values: &[f64], x: f64) -> f64 {
    let n = grid.n;
    let s = (x - grid.a) / grid.dx;
    let base = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let nodes: [f64; 4] = std::array::from_fn(|i| (base + i) as f64);
    let mut acc = 0.0;
    for i in 0..4 {
        let mut l = 1.0;
        for k in 0..4 {
            if k != i {
                l *= (s - nodes[k]) / (nodes[i] - nodes[k]);
            }
        }
        acc += l * values[base + i];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_on_quadratic() {
        let g = SpaceGrid::symmetric(101).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| x * x).collect();
        let i = trapezoid(&v, &g).unwrap();
        assert!((i - 2.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn cubic_interpolation_reproduces_cubics() {
        let g = SpaceGrid::unit(9).unwrap();
        let f = |x: f64| 2.0 * x * x * x - x + 0.5;
        let v: Vec<f64> = g.nodes().iter().map(|&x| f(x)).collect();
        for &x in &[0.0, 0.03, 0.5, 0.77, 0.99, 1.0] {
            assert!((interpolate_cubic(&g, &v, x) - f(x)).abs() < 1e-13);
        }
    }

    #[test]
    fn transpose_of_bordered_matches_dense() {
        let sys = BorderedTridiagonal {
            tri: Tridiagonal {
                sub: vec![0.0, 1.0, 2.0],
                diag: vec![5.0, 6.0, 7.0],
                sup: vec![0.5, 0.25, 0.0],
            },
            col: vec![0.0, 0.0, 1.5],
            row: vec![1.0, 2.0, 3.0],
            corner: 4.0,
        };
        let a = sys.to_dense();
        let at = sys.transpose().to_dense();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a[i][j], at[j][i]);
            }
        }
    }

    #[test]
    fn one_sided_trace_is_second_order() {
        let err = |n: usize, side: Side| {
            let g = SpaceGrid::unit(n).unwrap();
            let v: Vec<f64> = g.nodes().iter().map(|x| (2.0 * x).sin() + x.exp()).collect();
            let exact = match side {
                Side::Left => 3.0,
                Side::Right => 2.0 * 2f64.cos() + 1f64.exp(),
            };
            (one_sided_trace_derivative(&v, &g, side).unwrap() - exact).abs()
        };
        for side in [Side::Left, Side::Right] {
            for n in [11, 21, 41] {
                let ratio = err(n, side) / err(2 * n - 1, side);
                assert!((3.5..=4.5).contains(&ratio), "{side:?} n={n}: {ratio}");
            }
        }
    }

    #[test]
    fn short_or_mismatched_input_is_rejected() {
        assert!(SpaceGrid::new(0.0, 1.0, 2).is_err());
        assert!(SpaceGrid::new(1.0, 1.0, 5).is_err());
        let g = SpaceGrid::unit(5).unwrap();
        assert!(one_sided_trace_derivative(&[0.0, 1.0, 2.0], &g, Side::Right).is_err());
    }

    #[test]
    fn log_sum_survives_huge_exponents() {
        let mut s = LogSum::default();
        s.add(5000.0, 2.0);
        s.add(5000.0, 3.0);
        s.add(-5000.0, 1.0);
        assert!((s.ln() - (5000.0 + 5f64.ln())).abs() < 1e-12);
        assert_eq!(LogSum::default().ln(), f64::NEG_INFINITY);
    }

    #[test]
    fn tridiagonal_solve_inverts_apply() {
        let t = Tridiagonal {
            sub: vec![0.0, -1.0, 0.5, -0.25],
            diag: vec![4.0, 3.0, 5.0, 2.0],
            sup: vec![1.0, -0.5, 0.75, 0.0],
        };
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let y = t.factor().unwrap().solve(&t.apply(&x));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
