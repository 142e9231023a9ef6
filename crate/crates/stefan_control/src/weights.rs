//! Carleman weight families.
//!
//! The exponential weights span hundreds or thousands of orders of magnitude
//! at desk-scale parameters, so the table keeps them in logarithmic form.
//! Anything that needs actual values exponentiates differences of logs.

use crate::error::{Error, Result};
use crate::numerics::{SpaceGrid, SpaceTimeField, TimeGrid};

/// Piecewise-cubic `η`: rising cubic on `[-1, c1]`, plateau on `[c1, c2]`,
/// falling cubic on `[c2, 1]`. `C²` at the joints.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EtaFunction {
    pub c1: f64,
    pub c2: f64,
    pub eta_min: f64,
    pub height: f64,
}

impl EtaFunction {
    #[inline]
    fn left_width(&self) -> f64 {
        self.c1 + 1.0
    }

    #[inline]
    fn right_width(&self) -> f64 {
        1.0 - self.c2
    }

    pub fn value(&self, x: f64) -> f64 {
        let ramp = |s: f64| 1.0 - (1.0 - s).powi(3);
        if x <= self.c1 {
            self.eta_min + self.height * ramp((x + 1.0) / self.left_width())
        } else if x >= self.c2 {
            self.eta_min + self.height * ramp((1.0 - x) / self.right_width())
        } else {
            self.eta_min + self.height
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        if x <= self.c1 {
            let s = (x + 1.0) / self.left_width();
            3.0 * self.height * (1.0 - s).powi(2) / self.left_width()
        } else if x >= self.c2 {
            let s = (1.0 - x) / self.right_width();
            -3.0 * self.height * (1.0 - s).powi(2) / self.right_width()
        } else {
            0.0
        }
    }

    pub fn deriv2(&self, x: f64) -> f64 {
        if x <= self.c1 {
            let s = (x + 1.0) / self.left_width();
            -6.0 * self.height * (1.0 - s) / self.left_width().powi(2)
        } else if x >= self.c2 {
            let s = (1.0 - x) / self.right_width();
            -6.0 * self.height * (1.0 - s) / self.right_width().powi(2)
        } else {
            0.0
        }
    }

    /// `‖η‖∞`, attained on the plateau.
    pub fn sup_norm(&self) -> f64 {
        self.eta_min + self.height
    }
}

/// Outcome of probing `η` on a fine grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EtaProbe {
    pub min_value: f64,
    pub endpoint_is_min: bool,
    /// Smallest `|η_x|` over probe points outside `[c1, c2]`.
    pub min_slope_outside: f64,
    /// Largest mismatch of one-sided second derivatives at `c1` and `c2`.
    pub second_derivative_jump: f64,
}

impl EtaProbe {
    pub fn holds(&self) -> bool {
        self.min_value > 0.0
            && self.endpoint_is_min
            && self.min_slope_outside > 0.0
            && self.second_derivative_jump <= 1e-6
    }
}

pub fn probe_eta(eta: &EtaFunction, points: usize) -> EtaProbe {
    let mut min_value = f64::INFINITY;
    let mut min_slope = f64::INFINITY;
    for i in 0..points {
        let x = -1.0 + 2.0 * i as f64 / (points - 1) as f64;
        min_value = min_value.min(eta.value(x));
        if x < eta.c1 || x > eta.c2 {
            min_slope = min_slope.min(eta.deriv(x).abs());
        }
    }
    let h = 1e-9;
    let scale = 1.0 + eta.height / (eta.c1 + 1.0).min(1.0 - eta.c2).powi(2);
    let jump = |c: f64| (eta.deriv2(c - h) - eta.deriv2(c + h)).abs() / scale;
    let end = eta.value(-1.0).max(eta.value(1.0));
    EtaProbe {
        min_value,
        endpoint_is_min: end <= min_value + 1e-14 && (eta.value(-1.0) - eta.value(1.0)).abs() < 1e-14,
        min_slope_outside: min_slope,
        second_derivative_jump: jump(eta.c1).max(jump(eta.c2)).max(
            // first derivatives must also match
            (eta.deriv(eta.c1 - h) - eta.deriv(eta.c1 + h)).abs(),
        ),
    }
}

/// Build `η` with its plateau on `[ω₀.0, ω₀.1]` and check the required
/// properties on a `10⁴`-point probe grid.
pub fn build_eta(omega0: (f64, f64), height: f64, eta_min: f64) -> Result<EtaFunction> {
    let (c1, c2) = omega0;
    if !(-1.0 < c1 && c1 < c2 && c2 < 0.0) {
        return Err(Error::Geometry(format!(
            "inner interval ({c1}, {c2}) must lie strictly inside (-1, 0)"
        )));
    }
    if !(height > 0.0 && height.is_finite()) {
        return Err(Error::Geometry(format!("plateau height must be positive, got {height}")));
    }
    if !(eta_min > 0.0 && eta_min.is_finite()) {
        return Err(Error::Geometry(format!("endpoint value must be positive, got {eta_min}")));
    }
    let eta = EtaFunction {
        c1,
        c2,
        eta_min,
        height,
    };
    let probe = probe_eta(&eta, 10_000);
    if !probe.holds() {
        return Err(Error::Geometry(format!("constructed eta fails its probe: {probe:?}")));
    }
    Ok(eta)
}

/// Carleman parameters and their admissibility thresholds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CarlemanParams {
    /// Exponent factor `m > 1`.
    pub m: f64,
    pub lambda: f64,
    pub s: f64,
    pub omega: (f64, f64),
    pub omega0: (f64, f64),
    pub lambda0: f64,
    pub s0: f64,
}

impl CarlemanParams {
    /// `max(1, ln 2 / (‖η‖∞ (m - 1)))`.
    pub fn lambda_threshold(eta: &EtaFunction, m: f64) -> f64 {
        (std::f64::consts::LN_2 / (eta.sup_norm() * (m - 1.0))).max(1.0)
    }

    /// Smallest admissible `s` for horizon `T`.
    pub fn s_threshold(&self, t_final: f64) -> f64 {
        self.s0 * (t_final + t_final * t_final)
    }

    /// Thresholds at their minimal admissible values.
    pub fn minimal(
        eta: &EtaFunction,
        m: f64,
        omega: (f64, f64),
        omega0: (f64, f64),
        s0: f64,
        t_final: f64,
    ) -> Self {
        let lambda0 = Self::lambda_threshold(eta, m);
        Self {
            m,
            lambda: lambda0,
            s: s0 * (t_final + t_final * t_final),
            omega,
            omega0,
            lambda0,
            s0,
        }
    }

    pub fn with_s_lambda(&self, s: f64, lambda: f64) -> Self {
        Self { s, lambda, ..*self }
    }

    pub fn validate(&self, eta: &EtaFunction, t_final: f64) -> Result<()> {
        if !(self.m > 1.0) {
            return Err(Error::Threshold(format!("m must exceed 1, got {}", self.m)));
        }
        let (a, b) = self.omega;
        let (a0, b0) = self.omega0;
        if !(-1.0 < a && a < a0 && a0 < b0 && b0 < b && b < 0.0) {
            return Err(Error::Geometry(format!(
                "need ω₀ = ({a0}, {b0}) compactly inside ω = ({a}, {b}) compactly inside (-1, 0)"
            )));
        }
        let floor = Self::lambda_threshold(eta, self.m);
        if self.lambda0 < floor * (1.0 - 1e-15) {
            return Err(Error::Threshold(format!(
                "λ₀ = {} is below ln2/(‖η‖∞(m-1)) floor {floor}",
                self.lambda0
            )));
        }
        if self.lambda < self.lambda0 * (1.0 - 1e-15) {
            return Err(Error::Threshold(format!("λ = {} < λ₀ = {}", self.lambda, self.lambda0)));
        }
        let s_min = self.s_threshold(t_final);
        if self.s < s_min * (1.0 - 1e-15) {
            return Err(Error::Threshold(format!("s = {} < s₀(T+T²) = {s_min}", self.s)));
        }
        Ok(())
    }

    /// Sign quantity `e^{λm‖η‖∞} − 2e^{λ‖η‖∞} + e^{λη(1)}`.
    pub fn positivity_margin(&self, eta: &EtaFunction) -> f64 {
        positivity_margin(eta, self.m, self.lambda)
    }
}

pub fn positivity_margin(eta: &EtaFunction, m: f64, lambda: f64) -> f64 {
    let n = eta.sup_norm();
    (lambda * m * n).exp() - 2.0 * (lambda * n).exp() + (lambda * eta.value(1.0)).exp()
}

/// Denominator of the modified weights: `T²/4` on the first half, `t(T−t)` after.
#[inline]
pub fn r_of_t(t: f64, t_final: f64) -> f64 {
    if t <= 0.5 * t_final {
        0.25 * t_final * t_final
    } else {
        t * (t_final - t)
    }
}

/// Spatial factors of the weights for fixed `(η, m, λ)`.
#[derive(Debug, Clone, Copy)]
pub struct WeightShape {
    pub eta: EtaFunction,
    pub m: f64,
    pub lambda: f64,
}

impl WeightShape {
    /// Numerator of `α`: `e^{2λm‖η‖∞} − e^{λ(m‖η‖∞+η)}`.
    #[inline]
    pub fn alpha_num(&self, x: f64) -> f64 {
        let n = self.eta.sup_norm();
        (2.0 * self.lambda * self.m * n).exp() - self.xi_num(x)
    }

    /// Numerator of `ξ`: `e^{λ(m‖η‖∞+η)}`.
    #[inline]
    pub fn xi_num(&self, x: f64) -> f64 {
        (self.lambda * (self.m * self.eta.sup_norm() + self.eta.value(x))).exp()
    }

    pub fn alpha(&self, x: f64, t: f64, t_final: f64) -> f64 {
        self.alpha_num(x) / (t * (t_final - t))
    }

    pub fn xi(&self, x: f64, t: f64, t_final: f64) -> f64 {
        self.xi_num(x) / (t * (t_final - t))
    }

    /// `α_x = −λ ξ η_x`.
    pub fn alpha_x(&self, x: f64, t: f64, t_final: f64) -> f64 {
        -self.lambda * self.xi(x, t, t_final) * self.eta.deriv(x)
    }

    /// `α_xx = −λ² ξ η_x² − λ ξ η_xx`.
    pub fn alpha_xx(&self, x: f64, t: f64, t_final: f64) -> f64 {
        let xi = self.xi(x, t, t_final);
        let ex = self.eta.deriv(x);
        -self.lambda * self.lambda * xi * ex * ex - self.lambda * xi * self.eta.deriv2(x)
    }

    /// `α_xt = λ η_x e^{λ(m‖η‖∞+η)} (T − 2t) / (t(T−t))²`.
    pub fn alpha_xt(&self, x: f64, t: f64, t_final: f64) -> f64 {
        let den = t * (t_final - t);
        self.lambda * self.eta.deriv(x) * self.xi_num(x) * (t_final - 2.0 * t) / (den * den)
    }

    /// `α_tt = A(x) (2(T−2t)²/(t(T−t))³ + 2/(t(T−t))²)`.
    pub fn alpha_tt(&self, x: f64, t: f64, t_final: f64) -> f64 {
        let den = t * (t_final - t);
        let dp = t_final - 2.0 * t;
        self.alpha_num(x) * (2.0 * dp * dp / den.powi(3) + 2.0 / (den * den))
    }

    /// `α_t = −A(x)(T − 2t) / (t(T−t))²`.
    pub fn alpha_t(&self, x: f64, t: f64, t_final: f64) -> f64 {
        let den = t * (t_final - t);
        -self.alpha_num(x) * (t_final - 2.0 * t) / (den * den)
    }
}

/// Tabulated weights. `α`, `ξ` are `+∞` at `t ∈ {0, T}`; `ζ`, `μ` are finite
/// at `t = 0` and `+∞` at `t = T`. `ρᵢ` are stored as natural logarithms.
#[derive(Debug, Clone)]
pub struct WeightTable {
    pub space: SpaceGrid,
    pub time: TimeGrid,
    pub eta: EtaFunction,
    pub params: CarlemanParams,
    pub alpha: SpaceTimeField,
    pub xi: SpaceTimeField,
    pub zeta: SpaceTimeField,
    pub mu: SpaceTimeField,
    pub alpha_hat: Vec<f64>,
    pub xi_hat: Vec<f64>,
    pub zeta_star: Vec<f64>,
    pub zeta_hat: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub mu_star: Vec<f64>,
    pub r: Vec<f64>,
    /// `ln ρ₀ … ln ρ₄` per time level.
    pub ln_rho: [Vec<f64>; 5],
}

impl WeightTable {
    pub fn shape(&self) -> WeightShape {
        WeightShape {
            eta: self.eta,
            m: self.params.m,
            lambda: self.params.lambda,
        }
    }

    pub fn rho(&self, i: usize, k: usize) -> f64 {
        self.ln_rho[i][k].exp()
    }

    /// Reference level for normalizing `ρ`-weighted quantities: `s ζ*(0)`.
    pub fn ln_scale(&self) -> f64 {
        self.ln_rho[0][0]
    }

    /// Closed-form `ρ₄'` from the `ζ̂`, `μ̂` derivatives, as `ln|ρ₄'|` with sign.
    pub fn rho4_derivative_closed(&self, k: usize) -> (f64, f64) {
        let t = self.time.t(k);
        let tf = self.time.t_final;
        let s = self.params.s;
        let shape = self.shape();
        let a_hat = shape.alpha_num(1.0);
        let m_num = shape.xi_num(1.0);
        let (r, r_t) = if t <= 0.5 * tf {
            (0.25 * tf * tf, 0.0)
        } else {
            (t * (tf - t), tf - 2.0 * t)
        };
        let zeta_hat = a_hat / r;
        let zeta_hat_t = -a_hat * r_t / (r * r);
        let mu_hat = m_num / r;
        let mu_hat_t = -m_num * r_t / (r * r);
        let core = 0.5 * s * mu_hat.powf(-0.75) * zeta_hat_t - 0.75 * mu_hat.powf(-1.75) * mu_hat_t;
        let ln_mag = 0.5 * s * zeta_hat + core.abs().ln();
        (core.signum(), ln_mag)
    }
}

/// Tabulate every weight family on the given grids.
pub fn tabulate_weights(
    eta: &EtaFunction,
    params: &CarlemanParams,
    space: &SpaceGrid,
    time: &TimeGrid,
) -> Result<WeightTable> {
    params.validate(eta, time.t_final)?;
    let shape = WeightShape {
        eta: *eta,
        m: params.m,
        lambda: params.lambda,
    };
    let tf = time.t_final;
    let levels = time.levels();
    let xs = space.nodes();
    let a_num: Vec<f64> = xs.iter().map(|&x| shape.alpha_num(x)).collect();
    let x_num: Vec<f64> = xs.iter().map(|&x| shape.xi_num(x)).collect();
    let interior = |k: usize| k > 0 && k < time.m;
    let alpha = SpaceTimeField::from_fn(space.n, levels, |k, j| {
        if interior(k) {
            let t = time.t(k);
            a_num[j] / (t * (tf - t))
        } else {
            f64::INFINITY
        }
    });
    let xi = SpaceTimeField::from_fn(space.n, levels, |k, j| {
        if interior(k) {
            let t = time.t(k);
            x_num[j] / (t * (tf - t))
        } else {
            f64::INFINITY
        }
    });
    let rk: Vec<f64> = (0..levels).map(|k| r_of_t(time.t(k), tf)).collect();
    let zeta = SpaceTimeField::from_fn(space.n, levels, |k, j| {
        if k < time.m {
            a_num[j] / rk[k]
        } else {
            f64::INFINITY
        }
    });
    let mu = SpaceTimeField::from_fn(space.n, levels, |k, j| {
        if k < time.m {
            x_num[j] / rk[k]
        } else {
            f64::INFINITY
        }
    });

    // Extremal spatial factors. `η` is minimal at ±1 and maximal on the plateau.
    let a_max = shape.alpha_num(1.0);
    let a_min = shape.alpha_num(0.5 * (eta.c1 + eta.c2));
    let x_min = shape.xi_num(1.0);
    let x_max = shape.xi_num(0.5 * (eta.c1 + eta.c2));

    let per_level = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..levels).map(f).collect() };
    let alpha_hat = per_level(&|k| if interior(k) { a_max / (time.t(k) * (tf - time.t(k))) } else { f64::INFINITY });
    let xi_hat = per_level(&|k| if interior(k) { x_min / (time.t(k) * (tf - time.t(k))) } else { f64::INFINITY });
    let finite_before_end = |num: f64, k: usize| if k < time.m { num / rk[k] } else { f64::INFINITY };
    let zeta_hat = per_level(&|k| finite_before_end(a_max, k));
    let zeta_star = per_level(&|k| finite_before_end(a_min, k));
    let mu_hat = per_level(&|k| finite_before_end(x_min, k));
    let mu_star = per_level(&|k| finite_before_end(x_max, k));

    let s = params.s;
    let ln0: Vec<f64> = zeta_star.iter().map(|z| s * z).collect();
    let ln1: Vec<f64> = zeta_hat.iter().map(|z| s * z).collect();
    let ln2: Vec<f64> = (0..levels)
        .map(|k| {
            if k < time.m {
                -1.5 * mu_star[k].ln() + s * zeta_star[k]
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let ln3: Vec<f64> = (0..levels)
        .map(|k| {
            if k < time.m {
                s * zeta_hat[k] - 1.5 * mu_hat[k].ln()
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let ln4: Vec<f64> = ln3.iter().map(|v| 0.5 * v).collect();

    Ok(WeightTable {
        space: *space,
        time: *time,
        eta: *eta,
        params: *params,
        alpha,
        xi,
        zeta,
        mu,
        alpha_hat,
        xi_hat,
        zeta_star,
        zeta_hat,
        mu_hat,
        mu_star,
        r: rk,
        ln_rho: [ln0, ln1, ln2, ln3, ln4],
    })
}

/// Suprema of the weight ratios used to pass from the auxiliary system to
/// the weighted spaces, plus the sign condition on `λ`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BoundReport {
    pub sup_rho4_over_rho3: f64,
    pub sup_rho4_over_rho2: f64,
    pub sup_rho4_dot_over_rho0: f64,
    pub positivity_margin: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.sup_rho4_over_rho3.is_finite()
            && self.sup_rho4_over_rho2.is_finite()
            && self.sup_rho4_dot_over_rho0.is_finite()
            && self.positivity_margin > 0.0
    }
}

pub fn check_weight_bounds(table: &WeightTable) -> BoundReport {
    let m = table.time.m;
    let [_, _, l2, l3, l4] = &table.ln_rho;
    let l0 = &table.ln_rho[0];
    let mut s43 = 0.0f64;
    let mut s42 = 0.0f64;
    for k in 0..m {
        s43 = s43.max((l4[k] - l3[k]).exp());
        s42 = s42.max((l4[k] - l2[k]).exp());
    }
    let dt = table.time.dt;
    let mut s4d = 0.0f64;
    // ρ₄' = ρ₄ (ln ρ₄)': differencing ρ₄ itself overflows near T, where
    // it grows by many orders of magnitude per step.
    for k in 1..m.saturating_sub(1) {
        let slope = (l4[k + 1] - l4[k - 1]) / (2.0 * dt);
        s4d = s4d.max((l4[k] - l0[k]).exp() * slope.abs());
    }
    BoundReport {
        sup_rho4_over_rho3: s43,
        sup_rho4_over_rho2: s42,
        sup_rho4_dot_over_rho0: s4d,
        positivity_margin: table.params.positivity_margin(&table.eta),
    }
}

/// Write the table as CSV rows `t, x, α, ξ, ζ, μ, ρ₀..ρ₄, ln ρ₀..ln ρ₄`.
pub fn write_weight_csv<W: std::io::Write>(table: &WeightTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t", "x", "alpha", "xi", "zeta", "mu", "rho0", "rho1", "rho2", "rho3", "rho4", "ln_rho0",
        "ln_rho1", "ln_rho2", "ln_rho3", "ln_rho4",
    ])?;
    let xs = table.space.nodes();
    for k in 0..table.time.levels() {
        let t = table.time.t(k);
        for (j, &x) in xs.iter().enumerate() {
            let mut rec: Vec<String> = vec![
                fmt_num(t),
                fmt_num(x),
                fmt_num(table.alpha.get(k, j)),
                fmt_num(table.xi.get(k, j)),
                fmt_num(table.zeta.get(k, j)),
                fmt_num(table.mu.get(k, j)),
            ];
            for i in 0..5 {
                rec.push(fmt_num(table.rho(i, k)));
            }
            for i in 0..5 {
                rec.push(fmt_num(table.ln_rho[i][k]));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Deterministic number formatting shared by every CSV writer.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.15e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_example_values() {
        let eta = build_eta((-0.6, -0.4), 1.0, 1.0).unwrap();
        assert_eq!(eta.value(-1.0), 1.0);
        assert!((eta.value(-0.5) - 2.0).abs() < 1e-15);
        assert!((eta.deriv(-1.0) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn positivity_margin_example() {
        let eta = build_eta((-0.6, -0.4), 1.0, 1.0).unwrap();
        let v = positivity_margin(&eta, 2.0, 1.0);
        let expect = 4f64.exp() - 2.0 * 2f64.exp() + 1f64.exp();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 42.5).abs() < 0.2);
    }

    #[test]
    fn rho4_is_root_of_rho3() {
        let eta = build_eta((-0.6, -0.4), 1.0, 1.0).unwrap();
        let p = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
        let t = tabulate_weights(&eta, &p, &SpaceGrid::symmetric(11).unwrap(), &TimeGrid::new(1.0, 40).unwrap())
            .unwrap();
        for k in 0..40 {
            assert!((2.0 * t.ln_rho[4][k] - t.ln_rho[3][k]).abs() <= 1e-12 * t.ln_rho[3][k].abs());
        }
    }

    #[test]
    fn rho4_log_slope_matches_closed_form() {
        let eta = build_eta((-0.6, -0.4), 0.01, 1.0).unwrap();
        let p = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
        let time = TimeGrid::new(1.0, 4000).unwrap();
        let t = tabulate_weights(&eta, &p, &SpaceGrid::symmetric(5).unwrap(), &time).unwrap();
        let l4 = &t.ln_rho[4];
        // On the rising half, away from the kink at T/2 and the blow-up at T.
        for k in (2200..3600).step_by(100) {
            let slope = (l4[k + 1] - l4[k - 1]) / (2.0 * time.dt);
            let (sign, ln_mag) = t.rho4_derivative_closed(k);
            let fd = l4[k] + slope.abs().ln();
            assert_eq!(sign, slope.signum());
            assert!((fd - ln_mag).abs() < 1e-3, "k={k}: {fd} vs {ln_mag}");
        }
    }

    #[test]
    fn bounds_are_finite_for_default_weights() {
        let eta = build_eta((-0.6, -0.4), 1.0, 1.0).unwrap();
        let p = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
        let t = tabulate_weights(&eta, &p, &SpaceGrid::symmetric(21).unwrap(), &TimeGrid::new(1.0, 100).unwrap())
            .unwrap();
        assert!(check_weight_bounds(&t).holds());
    }

    #[test]
    fn eta_is_rejected_outside_the_interval() {
        assert!(build_eta((-1.2, -0.4), 1.0, 1.0).is_err());
        assert!(build_eta((-0.4, -0.6), 1.0, 1.0).is_err());
    }
}
