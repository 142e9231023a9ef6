//! Batch front end: run configuration, subcommands and run bundles.
//!
//! A run reads a TOML configuration (every key optional, see
//! [`RunConfig::default_toml`]), applies `--override key=value` pairs,
//! validates the result and writes a bundle directory
//! `<out>/<subcommand>-<timestamp>-<hash8>` holding
//!
//! * `config.toml`: the resolved configuration,
//! * one or more CSV files,
//! * `summary.json`: residuals, ratios and flags, tagged with the SHA-256
//!   of the resolved configuration.
//!
//! Only the directory name carries a timestamp, so repeated runs with the
//! same configuration produce byte-identical files.
//!
//! Exit codes: `0` success, `2` configuration error, `3` solver error,
//! `4` non-convergence or a failed verification check.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adjoint::{
    solve_adjoint, stefan_adjoint_coefficients, transposition_check, AdjointData, PairingMode,
};
use crate::carleman_verify::{
    carleman_sweep, decomposition_identity, realize_basic_dataset, write_sweep_csv, BasicDatasetSpec,
};
use crate::error::{Error, Result};
use crate::hum::{write_control_csv, write_front_csv, HumOptions};
use crate::linear_system::{
    discrete_energy_report, solve_linearized, stefan_coefficients, LinearDataSpec,
};
use crate::nonlinear_control::{
    check_positivity, control_to_trajectory, scaled_initial_state, verify_targets, write_boundary_csv,
    write_iterations_csv, write_state_csv, ControlParams, ControlProblem,
};
use crate::numerics::{inner, SpaceGrid, SpaceTimeField, TimeGrid};
use crate::stefan_forward::{
    discrete_shadow, solve_cylinder_stefan, CylinderOptions, Extension, NeumannSolution, QRule,
    ReferenceKind, ReferenceSpec, ReferenceTrajectory,
};
use crate::weights::{
    build_eta, check_weight_bounds, fmt_num, tabulate_weights, write_weight_csv, CarlemanParams,
    EtaFunction,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Nodes on `[0, 1]`; the extended grid on `(−1, 1)` has `2·nodes − 1`.
    pub nodes: usize,
    pub steps: usize,
    pub t_final: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nodes: 21,
            steps: 200,
            t_final: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub beta: f64,
    pub ell_star: f64,
    pub boundary_value: f64,
    pub t0: f64,
    pub extension: Extension,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            ell_star: 0.1,
            boundary_value: 1.0,
            t0: 0.25,
            extension: Extension::Reflection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarlemanConfig {
    pub m: f64,
    /// Defaults to the threshold `λ₀`.
    pub lambda: Option<f64>,
    /// Defaults to `s₀(T + T²)`.
    pub s: Option<f64>,
    pub omega: [f64; 2],
    pub omega0: [f64; 2],
    pub height: f64,
    pub eta_min: f64,
    pub s0: f64,
}

impl Default for CarlemanConfig {
    fn default() -> Self {
        Self {
            m: 2.0,
            lambda: None,
            s: None,
            omega: [-0.7, -0.3],
            omega0: [-0.6, -0.4],
            height: 1.0,
            eta_min: 1.0,
            s0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub delta: f64,
    pub tol: f64,
    pub k_max: usize,
    pub delta_max: f64,
    pub terminal_tol: f64,
    /// Plateau height of the weight profile used for control synthesis.
    pub eta_height: f64,
    pub ln_weight_cap: Option<f64>,
    pub svd_cut: f64,
    pub verify_tol: f64,
    /// Random data sets for `control-linear`.
    pub draws: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let p = ControlParams::default();
        let h = HumOptions::default();
        Self {
            delta: 1e-2,
            tol: p.tol,
            k_max: p.k_max,
            delta_max: p.delta_max,
            terminal_tol: p.terminal_tol,
            eta_height: 0.01,
            ln_weight_cap: h.ln_weight_cap,
            svd_cut: h.svd_cut,
            verify_tol: h.verify_tol,
            draws: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    /// Coefficient of `γ_T` in the terminal compatibility condition.
    pub compat: f64,
    pub pairing: PairingMode,
    pub reference: ReferenceKind,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            compat: 1.0,
            pairing: PairingMode::Matched,
            reference: ReferenceKind::Neumann,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub seed: u64,
    /// Random data sets for `duality` and `carleman-sweep`.
    pub datasets: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            seed: 0,
            datasets: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub physics: PhysicsConfig,
    pub carleman: CarlemanConfig,
    pub control: ControlConfig,
    pub modes: ModeConfig,
    pub output: OutputConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parse the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, pair: &str) -> Result<()> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{pair}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// The default configuration as TOML, i.e. the schema with its values.
    pub fn default_toml() -> String {
        toml::to_string(&Self::default()).expect("default config serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (defaults when absent), apply overrides, validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| config_err(e.to_string().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table).map_err(|e| config_err(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Re-check every module-level constraint, reporting each offending field.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut need = |ok: bool, field: &str, what: &str, got: String| {
            if !ok {
                bad.push(format!("{field}: {what} (got {got})"));
            }
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let g = &self.grid;
        need(g.nodes >= 5, "grid.nodes", "must be at least 5", g.nodes.to_string());
        need(g.steps >= 4, "grid.steps", "must be at least 4", g.steps.to_string());
        need(positive(g.t_final), "grid.t_final", "must be positive", g.t_final.to_string());

        let p = &self.physics;
        need(positive(p.beta), "physics.beta", "must be positive", p.beta.to_string());
        need(positive(p.ell_star), "physics.ell_star", "must be positive", p.ell_star.to_string());
        need(positive(p.boundary_value), "physics.boundary_value", "must be positive", p.boundary_value.to_string());
        need(positive(p.t0), "physics.t0", "must be positive", p.t0.to_string());
        if positive(p.beta) && positive(p.boundary_value) && positive(p.t0) {
            match NeumannSolution::new(p.boundary_value, p.beta, p.t0) {
                Ok(sol) => need(
                    sol.front(0.0) > p.ell_star,
                    "physics.ell_star",
                    "must lie below the initial front",
                    format!("{} vs front {}", p.ell_star, sol.front(0.0)),
                ),
                Err(e) => need(false, "physics", "no similarity solution", e.to_string()),
            }
        }

        let c = &self.carleman;
        need(c.m.is_finite() && c.m > 1.0, "carleman.m", "must exceed 1", c.m.to_string());
        need(positive(c.height), "carleman.height", "must be positive", c.height.to_string());
        need(positive(c.eta_min), "carleman.eta_min", "must be positive", c.eta_min.to_string());
        need(positive(c.s0), "carleman.s0", "must be positive", c.s0.to_string());
        let [a, b] = c.omega;
        let [a0, b0] = c.omega0;
        need(
            -1.0 < a && a < a0 && a0 < b0 && b0 < b && b < 0.0,
            "carleman.omega0",
            "must sit compactly inside carleman.omega, itself compactly inside (-1, 0)",
            format!("{:?} in {:?}", c.omega0, c.omega),
        );

        let k = &self.control;
        need(k.delta.is_finite() && k.delta >= 0.0, "control.delta", "must be non-negative", k.delta.to_string());
        need(k.delta <= k.delta_max, "control.delta", "must not exceed control.delta_max", k.delta.to_string());
        need(positive(k.tol), "control.tol", "must be positive", k.tol.to_string());
        need(k.k_max >= 1, "control.k_max", "must be at least 1", k.k_max.to_string());
        need(positive(k.delta_max), "control.delta_max", "must be positive", k.delta_max.to_string());
        need(positive(k.terminal_tol), "control.terminal_tol", "must be positive", k.terminal_tol.to_string());
        need(positive(k.eta_height), "control.eta_height", "must be positive", k.eta_height.to_string());
        if let Some(cap) = k.ln_weight_cap {
            need(positive(cap), "control.ln_weight_cap", "must be positive", cap.to_string());
        }
        need(k.svd_cut > 0.0 && k.svd_cut < 1.0, "control.svd_cut", "must lie in (0, 1)", k.svd_cut.to_string());
        need(positive(k.verify_tol), "control.verify_tol", "must be positive", k.verify_tol.to_string());
        need(k.draws >= 1, "control.draws", "must be at least 1", k.draws.to_string());

        need(positive(self.modes.compat), "modes.compat", "must be positive", self.modes.compat.to_string());
        need(self.output.datasets >= 1, "output.datasets", "must be at least 1", self.output.datasets.to_string());

        if bad.is_empty() {
            // Thresholds depend on η, so check them once the shape is valid.
            let eta = self.eta().map_err(|e| config_err(format!("carleman: {e}")))?;
            let params = self.carleman_params(&eta);
            if let Err(e) = params.validate(&eta, g.t_final) {
                let field = match &e {
                    Error::Threshold(m) if m.starts_with("s ") => "carleman.s",
                    Error::Threshold(_) => "carleman.lambda",
                    _ => "carleman",
                };
                bad.push(format!("{field}: {e}"));
            }
            if let Err(e) = self.control_eta() {
                bad.push(format!("control.eta_height: {e}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(config_err(bad.join("; ")))
        }
    }

    pub fn time(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t_final, self.grid.steps)
    }

    pub fn unit_grid(&self) -> Result<SpaceGrid> {
        SpaceGrid::unit(self.grid.nodes)
    }

    pub fn extended_grid(&self) -> Result<SpaceGrid> {
        SpaceGrid::symmetric(2 * self.grid.nodes - 1)
    }

    pub fn reference_spec(&self) -> ReferenceSpec {
        ReferenceSpec {
            kind: self.modes.reference,
            beta: self.physics.beta,
            boundary_value: self.physics.boundary_value,
            t0: self.physics.t0,
            ell_star: self.physics.ell_star,
            extension: self.physics.extension,
        }
    }

    fn omega(&self) -> ((f64, f64), (f64, f64)) {
        let c = &self.carleman;
        ((c.omega[0], c.omega[1]), (c.omega0[0], c.omega0[1]))
    }

    pub fn eta(&self) -> Result<EtaFunction> {
        build_eta(self.omega().1, self.carleman.height, self.carleman.eta_min)
    }

    pub fn carleman_params(&self, eta: &EtaFunction) -> CarlemanParams {
        let c = &self.carleman;
        let (omega, omega0) = self.omega();
        let base = CarlemanParams::minimal(eta, c.m, omega, omega0, c.s0, self.grid.t_final);
        base.with_s_lambda(c.s.unwrap_or(base.s), c.lambda.unwrap_or(base.lambda))
    }

    /// Weight profile for control synthesis; `λ`, `s` at their thresholds.
    pub fn control_eta(&self) -> Result<EtaFunction> {
        build_eta(self.omega().1, self.control.eta_height, self.carleman.eta_min)
    }

    pub fn control_weights(&self, eta: &EtaFunction) -> CarlemanParams {
        let (omega, omega0) = self.omega();
        CarlemanParams::minimal(eta, self.carleman.m, omega, omega0, self.carleman.s0, self.grid.t_final)
    }

    pub fn hum_options(&self) -> HumOptions {
        HumOptions {
            svd_cut: self.control.svd_cut,
            verify_tol: self.control.verify_tol,
            ln_weight_cap: self.control.ln_weight_cap,
        }
    }

    pub fn control_params(&self) -> ControlParams {
        ControlParams {
            tol: self.control.tol,
            k_max: self.control.k_max,
            delta_max: self.control.delta_max,
            terminal_tol: self.control.terminal_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Cylinder solver against the similarity solution.
    Forward,
    /// Linearized system on random smooth data, with its energy report.
    Linear,
    /// Adjoint system on random smooth data.
    Adjoint,
    /// Transposition identity between the linearized and adjoint solvers.
    Duality,
    /// Both sides of the Carleman estimate over the parameter sweep.
    CarlemanSweep,
    /// Weight tables and their bound checks.
    Weights,
    /// Weighted null control of the linearized system on random data.
    ControlLinear,
    /// Control of the free-boundary problem onto the reference trajectory.
    ControlNonlinear,
    /// Every subcommand above, with pass/fail checks.
    VerifyAll,
    /// Print the default configuration and exit.
    Defaults,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Linear => "linear",
            Command::Adjoint => "adjoint",
            Command::Duality => "duality",
            Command::CarlemanSweep => "carleman-sweep",
            Command::Weights => "weights",
            Command::ControlLinear => "control-linear",
            Command::ControlNonlinear => "control-nonlinear",
            Command::VerifyAll => "verify-all",
            Command::Defaults => "defaults",
        }
    }

    const STUDIES: [Command; 8] = [
        Command::Forward,
        Command::Linear,
        Command::Adjoint,
        Command::Duality,
        Command::CarlemanSweep,
        Command::Weights,
        Command::ControlLinear,
        Command::ControlNonlinear,
    ];
}

#[derive(Debug, Parser)]
#[command(name = "stefan-control", version, about = "Fixed-domain Stefan solvers and control synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent directory for run bundles (overrides output.dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for random data (overrides output.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("output.dir={}", toml::Value::String(out.display().to_string())));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("output.seed={seed}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Result of one subcommand: its summary record and whether every check passed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Value,
    pub ok: bool,
}

fn create_csv(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn l2(row: &[f64], dx: f64) -> f64 {
    inner(row, row, dx).sqrt()
}

fn reference(cfg: &RunConfig) -> Result<ReferenceTrajectory> {
    discrete_shadow(&cfg.reference_spec(), &cfg.extended_grid()?, &cfg.time()?)
}

fn run_forward(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let (grid, time) = (cfg.unit_grid()?, cfg.time()?);
    let p = &cfg.physics;
    let sol = NeumannSolution::new(p.boundary_value, p.beta, p.t0)?;
    let p0: Vec<f64> = grid.nodes().iter().map(|&y| sol.p(y)).collect();
    let opts = CylinderOptions {
        q_star: cfg.reference_spec().q_star(),
        q_rule: QRule::Trapezoid,
        ..CylinderOptions::default()
    };
    let v = vec![p.boundary_value; time.levels()];
    let hist = solve_cylinder_stefan(&p0, sol.q(0.0), &v, &grid, &time, p.beta, &opts).map_err(|e| e.context("stefan_forward"))?;
    let exact: Vec<f64> = grid.nodes().iter().map(|&y| sol.p(y)).collect();
    let mut w = csv::Writer::from_writer(create_csv(dir, "front.csv")?);
    w.write_record(["t", "front", "front_exact", "front_error", "profile_error"])?;
    let (mut max_front, mut max_profile) = (0.0f64, 0.0f64);
    for k in 0..time.levels() {
        let t = time.t(k);
        let (ell, ell_exact) = (hist.q[k].sqrt(), sol.front(t));
        let pe = hist.p.row(k).iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        max_front = max_front.max((ell - ell_exact).abs());
        max_profile = max_profile.max(pe);
        w.write_record([fmt_num(t), fmt_num(ell), fmt_num(ell_exact), fmt_num(ell - ell_exact), fmt_num(pe)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create_csv(dir, "profile.csv")?);
    w.write_record(["y", "p", "p_exact"])?;
    for (j, &y) in grid.nodes().iter().enumerate() {
        w.write_record([fmt_num(y), fmt_num(hist.p.get(time.m, j)), fmt_num(exact[j])])?;
    }
    w.flush()?;
    let max_error = max_front.max(max_profile);
    Ok(Outcome {
        summary: json!({
            "max_error": max_error,
            "max_front_error": max_front,
            "max_profile_error": max_profile,
            "min_p": hist.min_p,
            "max_corrections": hist.corrections.iter().copied().max().unwrap_or(0),
            "max_update": hist.max_update,
        }),
        ok: max_error.is_finite(),
    })
}

fn run_linear(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let r = reference(cfg).map_err(|e| e.context("stefan_forward"))?;
    let coeffs = stefan_coefficients(&r)?;
    let (grid, time) = (coeffs.grid, coeffs.time);
    let data = LinearDataSpec::draw_many(cfg.output.seed, 1, None)[0];
    let (src, z0, h0) = data.realize(&grid, &time);
    let hist = solve_linearized(&coeffs, &src, &z0, h0).map_err(|e| e.context("linear_system"))?;
    let energy = discrete_energy_report(&hist, &grid, &time, &src);
    let mut w = csv::Writer::from_writer(create_csv(dir, "history.csv")?);
    w.write_record(["t", "h", "trace", "z_l2"])?;
    for k in 0..time.levels() {
        w.write_record([
            fmt_num(time.t(k)),
            fmt_num(hist.h[k]),
            fmt_num(hist.trace[k]),
            fmt_num(l2(hist.z.row(k), grid.dx)),
        ])?;
    }
    w.flush()?;
    write_field_csv(dir, "state.csv", "z", &hist.z, &grid, &time)?;
    Ok(Outcome {
        summary: json!({
            "data": to_json(&data),
            "energy": to_json(&energy),
            "terminal_z": l2(hist.z.row(time.m), grid.dx),
            "terminal_h": hist.h[time.m].abs(),
        }),
        ok: energy.ratio.is_finite(),
    })
}

fn write_field_csv(dir: &Path, name: &str, label: &str, f: &SpaceTimeField, grid: &SpaceGrid, time: &TimeGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_csv(dir, name)?);
    w.write_record(["t", "x", label])?;
    for k in 0..time.levels() {
        for j in 0..grid.n {
            w.write_record([fmt_num(time.t(k)), fmt_num(grid.x(j)), fmt_num(f.get(k, j))])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_adjoint(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    use std::f64::consts::PI;
    let r = reference(cfg).map_err(|e| e.context("stefan_forward"))?;
    let coeffs = stefan_adjoint_coefficients(&r)?;
    let (grid, time) = (coeffs.grid, coeffs.time);
    let spec = LinearDataSpec::draw_many(cfg.output.seed.wrapping_add(1), 1, None)[0];
    let (src, _, _) = spec.realize(&grid, &time);
    let phi_t: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| spec.initial_modes[0] * (PI * (x + 1.0) / 2.0).sin() + spec.initial_modes[1] * (PI * (x + 1.0)).sin())
        .collect();
    let compat = cfg.modes.compat;
    let gamma_t = (phi_t[grid.n - 1] - inner(coeffs.n_kernel.row(time.m), &phi_t, grid.dx)) / compat;
    let data = AdjointData {
        f: src.f,
        g: src.g,
        phi_terminal: phi_t,
        gamma_terminal: gamma_t,
    };
    let state = solve_adjoint(&coeffs, &data, compat).map_err(|e| e.context("adjoint"))?;
    let mut w = csv::Writer::from_writer(create_csv(dir, "adjoint.csv")?);
    w.write_record(["t", "gamma", "phi_l2", "boundary_residual"])?;
    for k in 0..time.levels() {
        let row = state.phi.row(k);
        let res = row[grid.n - 1] - state.gamma[k] - inner(coeffs.n_kernel.row(k), row, grid.dx);
        w.write_record([fmt_num(time.t(k)), fmt_num(state.gamma[k]), fmt_num(l2(row, grid.dx)), fmt_num(res)])?;
    }
    w.flush()?;
    write_field_csv(dir, "state.csv", "phi", &state.phi, &grid, &time)?;
    Ok(Outcome {
        summary: json!({
            "compat": compat,
            "coupling": to_json(&state.report),
            "gamma_0": state.gamma[0],
            "phi_0_l2": l2(state.phi.row(0), grid.dx),
        }),
        ok: state.phi.is_finite(),
    })
}

/// Gap accepted for the matched pairing.
pub const MATCHED_GAP_TOL: f64 = 1e-9;

fn run_duality(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let r = reference(cfg).map_err(|e| e.context("stefan_forward"))?;
    let coeffs = stefan_coefficients(&r)?;
    let (grid, time) = (coeffs.grid, coeffs.time);
    let count = cfg.output.datasets;
    let specs = LinearDataSpec::draw_many(cfg.output.seed, 2 * count, None);
    let mode = cfg.modes.pairing;
    let mut w = csv::Writer::from_writer(create_csv(dir, "duality.csv")?);
    w.write_record(["dataset", "lhs", "rhs", "gap"])?;
    let mut max_gap = 0.0f64;
    for d in 0..count {
        let (src, z0, h0) = specs[2 * d].realize(&grid, &time);
        let (pairing, _, _) = specs[2 * d + 1].realize(&grid, &time);
        let rep = transposition_check(&coeffs, &src, &z0, h0, &pairing, mode).map_err(|e| e.context("adjoint"))?;
        max_gap = max_gap.max(rep.gap);
        w.write_record([d.to_string(), fmt_num(rep.lhs), fmt_num(rep.rhs), fmt_num(rep.gap)])?;
    }
    w.flush()?;
    let ok = match mode {
        PairingMode::Matched => max_gap <= MATCHED_GAP_TOL,
        PairingMode::Continuous => max_gap.is_finite(),
    };
    Ok(Outcome {
        summary: json!({ "mode": to_json(&mode), "datasets": count, "max_gap": max_gap }),
        ok,
    })
}

/// Identity gap accepted for the conjugated-operator splitting.
pub const IDENTITY_GAP_TOL: f64 = 1e-12;

fn run_carleman(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let (grid, time) = (cfg.extended_grid()?, cfg.time()?);
    let eta = cfg.eta()?;
    let base = cfg.carleman_params(&eta);
    let datasets = BasicDatasetSpec::draw_many(cfg.output.seed, cfg.output.datasets)
        .iter()
        .map(|s| realize_basic_dataset(s, &grid, &time))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.context("carleman_verify"))?;
    let rows = carleman_sweep(&eta, &base, &datasets).map_err(|e| e.context("carleman_verify"))?;
    write_sweep_csv(&rows, create_csv(dir, "sweep.csv")?)?;
    let table = tabulate_weights(&eta, &base, &grid, &time)?;
    let mut w = csv::Writer::from_writer(create_csv(dir, "identity.csv")?);
    w.write_record(["dataset", "gap", "consistency", "by_parts_gap"])?;
    let mut id_gap = 0.0f64;
    for (d, ds) in datasets.iter().enumerate() {
        let id = decomposition_identity(&ds.state.phi, &ds.f, &table, &ds.d).map_err(|e| e.context("carleman_verify"))?;
        id_gap = id_gap.max(id.gap);
        w.write_record([d.to_string(), fmt_num(id.gap), fmt_num(id.consistency), fmt_num(id.by_parts_gap)])?;
    }
    w.flush()?;
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(Outcome {
        summary: json!({
            "points": rows.len(),
            "max_ratio": max_ratio,
            "identity_gap": id_gap,
            "s": base.s,
            "lambda": base.lambda,
        }),
        ok: max_ratio.is_finite() && id_gap <= IDENTITY_GAP_TOL,
    })
}

fn run_weights(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let (grid, time) = (cfg.extended_grid()?, cfg.time()?);
    let eta = cfg.eta()?;
    let params = cfg.carleman_params(&eta);
    let table = tabulate_weights(&eta, &params, &grid, &time).map_err(|e| e.context("weights"))?;
    write_weight_csv(&table, create_csv(dir, "weights.csv")?)?;
    let bounds = check_weight_bounds(&table);
    let rho_gap = (0..time.m)
        .map(|k| (2.0 * table.ln_rho[4][k] - table.ln_rho[3][k]).abs())
        .fold(0.0, f64::max);
    let square_ok = rho_gap <= 1e-12 * table.ln_rho[3].iter().take(time.m).fold(1.0f64, |a, b| a.max(b.abs()));
    Ok(Outcome {
        summary: json!({
            "bounds": to_json(&bounds),
            "rho4_squared_gap": rho_gap,
            "rho4_squared_matches_rho3": square_ok,
            "lambda": params.lambda,
            "s": params.s,
        }),
        ok: bounds.holds() && square_ok,
    })
}

fn control_problem(cfg: &RunConfig) -> Result<ControlProblem> {
    let eta = cfg.control_eta()?;
    let weights = cfg.control_weights(&eta);
    ControlProblem::new(
        &cfg.reference_spec(),
        cfg.grid.nodes,
        &cfg.time()?,
        &eta,
        &weights,
        cfg.hum_options(),
    )
    .map_err(|e| e.context("hum"))
}

fn run_control_linear(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let problem = control_problem(cfg)?;
    let (grid, time) = (problem.grid(), problem.time());
    let specs = LinearDataSpec::draw_many(cfg.output.seed, cfg.control.draws, Some(0.5));
    let mut w = csv::Writer::from_writer(create_csv(dir, "draws.csv")?);
    w.write_record(["draw", "terminal_z", "terminal_h", "terminal_relative", "cost_ratio", "consistency"])?;
    let (mut worst, mut ratios) = (0.0f64, Vec::new());
    for (d, spec) in specs.iter().enumerate() {
        let (src, z0, h0) = spec.realize(&grid, &time);
        let sol = problem.solver.solve(&src, &z0, h0).map_err(|e| e.context("hum"))?;
        let r = sol.report;
        worst = worst.max(r.terminal_relative());
        ratios.push(r.cost_ratio);
        w.write_record([
            d.to_string(),
            fmt_num(r.terminal_z),
            fmt_num(r.terminal_h),
            fmt_num(r.terminal_relative()),
            fmt_num(r.cost_ratio),
            fmt_num(r.consistency),
        ])?;
        if d == 0 {
            write_control_csv(&sol, &problem.coeffs, create_csv(dir, "control.csv")?)?;
            write_front_csv(&sol, &problem.coeffs, create_csv(dir, "front.csv")?)?;
        }
    }
    w.flush()?;
    Ok(Outcome {
        summary: json!({
            "draws": specs.len(),
            "max_terminal_relative": worst,
            "cost_ratios": ratios,
            "null_controlled": worst <= cfg.control.verify_tol,
        }),
        ok: worst <= cfg.control.verify_tol,
    })
}

/// Front and temperature gaps accepted after re-simulation.
pub const TARGET_TOL: f64 = 1e-6;

fn run_control_nonlinear(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let problem = control_problem(cfg)?;
    let (grid, time) = (problem.grid(), problem.time());
    let initial = scaled_initial_state(&problem, cfg.control.delta, 4 * (cfg.grid.nodes - 1) + 1)?;
    let result = control_to_trajectory(&problem, &initial, &cfg.control_params()).map_err(|e| e.context("nonlinear_control"))?;
    let targets = verify_targets(&problem, &result).map_err(|e| e.context("nonlinear_control"))?;
    let positivity = check_positivity(&result);
    write_iterations_csv(&result, create_csv(dir, "iterations.csv")?)?;
    write_boundary_csv(&result, &time, create_csv(dir, "boundary.csv")?)?;
    write_state_csv(&result, &grid, &time, create_csv(dir, "state.csv")?)?;
    let matched = targets.matched(TARGET_TOL);
    Ok(Outcome {
        summary: json!({
            "delta": cfg.control.delta,
            "relative_distance": result.initial.relative_distance,
            "iterations": result.iterations,
            "converged": result.converged,
            "terminal_z": result.terminal_residuals.0,
            "terminal_h": result.terminal_residuals.1,
            "targets": to_json(&targets),
            "matched": matched,
            "positivity": to_json(&positivity),
            "hum": to_json(&result.hum),
        }),
        ok: result.converged && matched && positivity.nonneg,
    })
}

fn run_study(cmd: Command, cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    match cmd {
        Command::Forward => run_forward(cfg, dir),
        Command::Linear => run_linear(cfg, dir),
        Command::Adjoint => run_adjoint(cfg, dir),
        Command::Duality => run_duality(cfg, dir),
        Command::CarlemanSweep => run_carleman(cfg, dir),
        Command::Weights => run_weights(cfg, dir),
        Command::ControlLinear => run_control_linear(cfg, dir),
        Command::ControlNonlinear => run_control_nonlinear(cfg, dir),
        Command::VerifyAll | Command::Defaults => unreachable!("not a single study"),
    }
}

fn record(cmd: Command, hash: &str, outcome: &Result<Outcome>) -> (Value, i32) {
    let mut v = json!({ "subcommand": cmd.name(), "config_hash": hash });
    let code = match outcome {
        Ok(o) => {
            v["status"] = json!(if o.ok { "ok" } else { "failed" });
            v["ok"] = json!(o.ok);
            v["results"] = o.summary.clone();
            if o.ok { 0 } else { 4 }
        }
        Err(e) => {
            v["status"] = json!("error");
            v["ok"] = json!(false);
            v["error"] = json!(e.to_string());
            e.exit_code()
        }
    };
    (v, code)
}

/// Write a bundle for `cmd` into `dir` (which must exist) and return the
/// exit status with the summary record.
pub fn run_into(cmd: Command, cfg: &RunConfig, dir: &Path) -> Result<(i32, Value)> {
    let hash = cfg.hash();
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let (summary, code) = if cmd == Command::VerifyAll {
        let mut checks = serde_json::Map::new();
        let mut code = 0;
        for study in Command::STUDIES {
            let sub = dir.join(study.name());
            fs::create_dir_all(&sub)?;
            let outcome = run_study(study, cfg, &sub);
            let (v, c) = record(study, &hash, &outcome);
            write_json(&sub.join("summary.json"), &v)?;
            checks.insert(study.name().into(), json!({ "status": v["status"], "ok": v["ok"] }));
            if c != 0 && code == 0 {
                code = c;
            }
        }
        let all = checks.values().all(|v| v["ok"] == json!(true));
        let v = json!({
            "subcommand": cmd.name(),
            "config_hash": hash,
            "status": if all { "ok" } else { "failed" },
            "ok": all,
            "checks": Value::Object(checks),
        });
        (v, code)
    } else {
        let outcome = run_study(cmd, cfg, dir);
        record(cmd, &hash, &outcome)
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((code, summary))
}

/// Create `<out>/<subcommand>-<timestamp>-<hash8>`, suffixed on collision.
pub fn bundle_dir(cfg: &RunConfig, cmd: Command) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let hash = cfg.hash();
    let base = format!("{}-{stamp}-{}", cmd.name(), &hash[..8]);
    fs::create_dir_all(&cfg.output.dir)?;
    let mut dir = cfg.output.dir.join(&base);
    let mut i = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                i += 1;
                dir = cfg.output.dir.join(format!("{base}-{i}"));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Entry point of the binary; returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match cli.resolve_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if cli.command == Command::Defaults {
        print!("{}", cfg.to_toml());
        return 0;
    }
    let outcome = bundle_dir(&cfg, cli.command).and_then(|dir| run_into(cli.command, &cfg, &dir).map(|r| (dir, r)));
    match outcome {
        Ok((dir, (code, summary))) => {
            println!("{}", dir.display());
            if let Some(err) = summary.get("error") {
                eprintln!("error: {}", err.as_str().unwrap_or_default());
            } else if code != 0 {
                eprintln!("{}: checks failed, see {}", cli.command.name(), dir.join("summary.json").display());
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = RunConfig::default_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
        assert_eq!(back.hash(), RunConfig::default().hash());
        assert_eq!(back.hash().len(), 64);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::load(
            None,
            &["control.delta=0.02".into(), "modes.pairing=continuous".into(), "grid.nodes=31".into()],
        )
        .unwrap();
        assert_eq!(cfg.control.delta, 0.02);
        assert_eq!(cfg.modes.pairing, PairingMode::Continuous);
        assert_eq!(cfg.grid.nodes, 31);
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = RunConfig::load(None, &["grid.nodes=3".into(), "carleman.m=0.5".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid.nodes") && msg.contains("carleman.m"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::load(None, &["grid.nodez=3".into()]).unwrap_err();
        assert!(err.to_string().contains("nodez"), "{err}");
        let err = RunConfig::load(None, &["carleman.lambda=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("carleman.lambda"), "{err}");
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
    }

    #[test]
    fn weights_bundle_passes_on_defaults() {
        let dir = std::env::temp_dir().join(format!("stefan-cli-weights-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let cfg = RunConfig::load(None, &["grid.steps=40".into()]).unwrap();
        let (code, summary) = run_into(Command::Weights, &cfg, &dir).unwrap();
        assert_eq!(code, 0, "{summary}");
        assert_eq!(summary["config_hash"], json!(cfg.hash()));
        assert!(dir.join("weights.csv").exists() && dir.join("config.toml").exists());
        fs::remove_dir_all(&dir).unwrap();
    }
}
