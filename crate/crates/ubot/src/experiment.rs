//! Problem assembly from a config, ladder runs and the emitted artifacts.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{debug, info};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use ubot_core::analytic::{epsilon_regularize, wfr_dirac_cost, wfr_static_value, RegularizationDiagnostics, Source};
use ubot_core::measure::AtomicMeasure;
use ubot_core::mesh::{generate_box_mesh, Mesh, Point};
use ubot_core::operators::{
    check_consistency_adjoint, check_consistency_sampling, fit_order, sample_state, sample_state_atomic, ContinuousOperatorSpec, RateReport,
    SmoothFields,
};
use ubot_core::quadrature::SimplexRule;
use ubot_core::solver::{hellinger_upper_bound, solve, summarize_sweep, ProblemSpec, SolveReport, SweepRow};
use ubot_core::spaces::{DiscreteState, WeightPair};
use ubot_core::tensor::{RectMatrix, SymMatrix};

use crate::config::{EndpointSpec, ExperimentConfig, ModelKind, OracleMode, OracleSpec, Overrides};
use crate::error::{Result, UbotError};
use crate::expr::DensityExpr;
use crate::io::{read_field, write_text, FieldJson, PathJson};

/// Column order of `rows.csv`.
pub const ROW_COLUMNS: [&str; 8] = ["sigma", "tau", "objective", "ce_residual", "iterations", "wall_ms", "oracle_value", "rel_error"];

/// Fitted orders at or above this pass `check`.
pub const MIN_ORDER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub sigma: f64,
    pub tau: f64,
    pub objective: f64,
    pub ce_residual: f64,
    pub iterations: usize,
    pub wall_ms: Option<f64>,
    pub oracle_value: Option<f64>,
    pub rel_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LevelOutcome {
    pub level: usize,
    pub cells: usize,
    pub steps: usize,
    pub sigma: f64,
    pub report: SolveReport,
    pub hellinger_bound: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRow {
    pub quantity: &'static str,
    pub sigma: f64,
    pub error: f64,
    pub order: f64,
}

#[derive(Clone, Debug)]
pub struct RegularizationRun {
    pub diagnostics: RegularizationDiagnostics,
    pub main_mass: f64,
    pub field: DiscreteState,
    /// Solver estimate of `WFR^2(rho, rho_eps)` when measured.
    pub wfr2: Option<f64>,
    pub converged: Option<bool>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    base: PathBuf,
    spec: ContinuousOperatorSpec,
    weights: WeightPair,
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Shortest round-trip decimal; empty for `None`.
fn num(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_infinite() => if v > 0.0 { "inf" } else { "-inf" }.to_string(),
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

impl Experiment {
    /// `base` resolves relative field paths.
    pub fn new(config: ExperimentConfig, base: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let spec = config.operator()?;
        let weights = config.weights()?;
        let hash = config.hash();
        Ok(Experiment { config, hash, base: base.into(), spec, weights })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut config = ExperimentConfig::load(path)?;
        config.apply(overrides)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, base)
    }

    pub fn spec(&self) -> &ContinuousOperatorSpec {
        &self.spec
    }

    pub fn weights(&self) -> &WeightPair {
        &self.weights
    }

    pub fn mesh(&self, cells: usize) -> Result<Mesh> {
        let d = self.config.domain.dim;
        Ok(generate_box_mesh(d, &self.config.domain.lengths, &vec![cells; d])?)
    }

    fn endpoint_spec(&self, which: usize) -> &EndpointSpec {
        if which == 0 {
            &self.config.endpoints.g0
        } else {
            &self.config.endpoints.g1
        }
    }

    fn atomic(&self, which: usize) -> Result<Option<AtomicMeasure>> {
        match self.endpoint_spec(which) {
            EndpointSpec::Atomic(a) => Ok(Some(a.to_measure(self.config.domain.dim, &format!("endpoints.g{which}.atomic"))?)),
            _ => Ok(None),
        }
    }

    /// Endpoint `which` (0 or 1) sampled on `mesh`.
    pub fn endpoint(&self, which: usize, mesh: &Mesh) -> Result<DiscreteState> {
        let field = format!("endpoints.g{which}");
        let n = self.spec.n;
        let nv = mesh.num_vertices();
        match self.endpoint_spec(which) {
            EndpointSpec::Atomic(_) => {
                let mu = self.atomic(which)?.expect("atomic endpoint");
                if mu.atoms().is_empty() {
                    return Ok(DiscreteState::zeros(nv, n));
                }
                sample_state_atomic(mesh, &mu).map_err(|e| UbotError::config(format!("{field}.atomic"), e.to_string()))
            }
            EndpointSpec::Density(src) => {
                let e = DensityExpr::parse(src).map_err(|m| UbotError::config(format!("{field}.density"), m))?;
                let g = sample_state(mesh, &SimplexRule::composite(mesh.dim(), 2), |x| SymMatrix::scalar(n, e.eval(x)))?;
                if g.values().iter().any(|m| m.get(0, 0) < 0.0) {
                    return Err(UbotError::config(format!("{field}.density"), "density is negative somewhere on the mesh"));
                }
                Ok(g)
            }
            EndpointSpec::Field(p) => {
                let path = self.base.join(p);
                let g = read_field(&path).and_then(|f| f.to_state()).map_err(|e| UbotError::config(format!("{field}.field"), e.to_string()))?;
                if g.len() != nv || g.n() != n {
                    return Err(UbotError::config(
                        format!("{field}.field"),
                        format!("expected {nv} sites of size {n}, found {} of size {}", g.len(), g.n()),
                    ));
                }
                Ok(g)
            }
            EndpointSpec::Random(r) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(which as u64);
                let values = (0..nv)
                    .map(|_| {
                        if n == 1 {
                            SymMatrix::scalar(1, r.scale * unit(&mut rng))
                        } else {
                            RectMatrix::from_fn(n, n, |_, _| 2.0 * unit(&mut rng) - 1.0).gram().scale(r.scale)
                        }
                    })
                    .collect();
                Ok(DiscreteState::new(values)?)
            }
        }
    }

    pub fn problem(&self, level: usize) -> Result<ProblemSpec> {
        let e = self.config.ladder.get(level).ok_or_else(|| UbotError::config("ladder", format!("no level {level}")))?;
        let mesh = self.mesh(e.cells)?;
        let g0 = self.endpoint(0, &mesh)?;
        let g1 = self.endpoint(1, &mesh)?;
        Ok(ProblemSpec::new(mesh, self.spec, self.weights, e.steps, g0, g1, self.config.solver_config())?)
    }

    /// Reference value of the continuous problem, when one is known.
    pub fn oracle(&self) -> Result<Option<f64>> {
        match self.config.oracle {
            OracleSpec::Value(v) => Ok(Some(v)),
            OracleSpec::Mode(OracleMode::None) => Ok(None),
            OracleSpec::Mode(OracleMode::Auto) => {
                if self.config.endpoints.g0 == self.config.endpoints.g1 {
                    return Ok(Some(0.0));
                }
                let plain = self.config.model.kind == ModelKind::Wfr && self.weights == WeightPair::identity(self.spec.n, self.spec.k);
                let (Some(a), Some(b)) = (self.atomic(0)?, self.atomic(1)?) else {
                    return Ok(None);
                };
                if !plain || !a.is_scalar() || !b.is_scalar() {
                    return Ok(None);
                }
                match (a.atoms(), b.atoms()) {
                    ([p], [q]) => Ok(Some(wfr_dirac_cost(&p.x, p.m.get(0, 0), &q.x, q.m.get(0, 0))?)),
                    _ => Ok(Some(wfr_static_value(&a, &b)?)),
                }
            }
        }
    }

    fn run_level(&self, level: usize) -> Result<LevelOutcome> {
        let e = self.config.ladder[level];
        let p = self.problem(level)?;
        info!("level {level}: {} cells per axis, {} steps, {} vertices", e.cells, e.steps, p.mesh.num_vertices());
        let bound = hellinger_upper_bound(&p.mesh, &p.g0, &p.g1, self.weights.lambda2())?;
        let t = Instant::now();
        let report = solve(&p)?;
        let wall_ms = t.elapsed().as_secs_f64() * 1e3;
        for tp in &report.trace {
            debug!("level {level} it {} obj {:.10} res {:.3e}", tp.iteration, tp.objective, tp.ce_residual);
        }
        info!(
            "level {level}: objective {:.8} residual {:.2e} iterations {} converged {}",
            report.objective, report.ce_residual, report.iterations, report.converged
        );
        Ok(LevelOutcome { level, cells: e.cells, steps: e.steps, sigma: p.mesh.size().sigma, report, hellinger_bound: bound, wall_ms })
    }

    /// Solves the given ladder levels on up to `jobs` threads; results keep the order of `levels`.
    pub fn run_levels(&self, levels: &[usize], jobs: usize) -> Result<Vec<LevelOutcome>> {
        let jobs = jobs.clamp(1, levels.len().max(1));
        if jobs == 1 {
            return levels.iter().map(|&l| self.run_level(l)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<LevelOutcome>>>> = levels.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= levels.len() {
                        break;
                    }
                    let r = self.run_level(levels[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every level ran")).collect()
    }

    pub fn rows(&self, outcomes: &[LevelOutcome], oracle: Option<f64>) -> Vec<ResultRow> {
        outcomes
            .iter()
            .map(|o| ResultRow {
                sigma: o.sigma,
                tau: 1.0 / o.steps as f64,
                objective: o.report.objective,
                ce_residual: o.report.ce_residual,
                iterations: o.report.iterations,
                wall_ms: self.config.record_wall_ms.then_some(o.wall_ms),
                oracle_value: oracle,
                rel_error: oracle.map(|v| (o.report.objective - v).abs() / v.abs().max(f64::MIN_POSITIVE)),
            })
            .collect()
    }

    fn csv_text(&self, header: &[&str], records: &[Vec<String>]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in records {
            w.write_record(r)?;
        }
        let body = w.into_inner().map_err(|e| UbotError::io("csv buffer", e.into_error()))?;
        Ok(format!("# config_hash: {}\n{}", self.hash, String::from_utf8_lossy(&body)))
    }

    pub fn rows_csv(&self, rows: &[ResultRow]) -> Result<String> {
        let records: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    num(Some(r.sigma)),
                    num(Some(r.tau)),
                    num(Some(r.objective)),
                    num(Some(r.ce_residual)),
                    r.iterations.to_string(),
                    num(r.wall_ms),
                    num(r.oracle_value),
                    num(r.rel_error),
                ]
            })
            .collect();
        self.csv_text(&ROW_COLUMNS, &records)
    }

    /// `report.json`, `path.json` (last outcome) and `rows.csv` under `out`.
    pub fn write_solve_artifacts(&self, out: &Path, command: &str, outcomes: &[LevelOutcome], oracle: Option<f64>) -> Result<()> {
        let rows = self.rows(outcomes, oracle);
        write_text(&out.join("rows.csv"), &self.rows_csv(&rows)?)?;
        let levels: Vec<_> = outcomes
            .iter()
            .map(|o| {
                let r = &o.report;
                json!({
                    "level": o.level,
                    "cells": o.cells,
                    "steps": o.steps,
                    "sigma": o.sigma,
                    "tau": 1.0 / o.steps as f64,
                    "objective": r.objective,
                    "ce_residual": r.ce_residual,
                    "iterations": r.iterations,
                    "converged": r.converged,
                    "dual_bound": r.dual_bound,
                    "gap": r.gap,
                    "psd_repairs": r.psd_repairs,
                    "range_repairs": r.range_repairs,
                    "projection_fallbacks": r.projection_fallbacks,
                    "hellinger_bound": o.hellinger_bound,
                    "wall_ms": o.wall_ms,
                    "trace": r.trace.iter().map(|t| json!({"iteration": t.iteration, "objective": t.objective, "ce_residual": t.ce_residual})).collect::<Vec<_>>(),
                })
            })
            .collect();
        let mut report = json!({
            "config_hash": self.hash,
            "command": command,
            "converged": outcomes.iter().all(|o| o.report.converged),
            "oracle_value": oracle,
            "levels": levels,
        });
        if outcomes.len() > 1 {
            let sweep = summarize_sweep(
                outcomes
                    .iter()
                    .zip(&rows)
                    .map(|(o, r)| SweepRow {
                        sigma: r.sigma,
                        tau: r.tau,
                        objective: r.objective,
                        ce_residual: r.ce_residual,
                        iterations: r.iterations,
                        converged: o.report.converged,
                        rel_error: r.rel_error,
                    })
                    .collect(),
            );
            report["sweep"] = json!({"decreasing_steps": sweep.decreasing_steps, "extrapolated": sweep.extrapolated});
        }
        write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        if let Some(last) = outcomes.last() {
            #[derive(Serialize)]
            struct Tagged<'a> {
                config_hash: &'a str,
                cells: usize,
                #[serde(flatten)]
                path: PathJson,
            }
            let t = Tagged { config_hash: &self.hash, cells: last.cells, path: PathJson::from_path(&last.report.path) };
            write_text(&out.join("path.json"), &serde_json::to_string(&t)?)?;
        }
        Ok(())
    }

    /// Rate checks of the discrete operators and action on the ladder meshes.
    pub fn consistency(&self) -> Result<Vec<ConsistencyRow>> {
        if self.config.ladder.len() < 3 {
            return Err(UbotError::config("ladder", "consistency checks need at least three levels"));
        }
        let ladder: Vec<Mesh> = self.config.ladder.iter().map(|e| self.mesh(e.cells)).collect::<Result<_>>()?;
        let sm = Smooth::new(self.spec, &self.config.domain.lengths);
        let lmax = self.config.domain.lengths.iter().fold(1.0f64, |m, &l| m.max(l));
        let norm = 4.0 * self.spec.n as f64 * (1.0 + lmax) * (1.0 + lmax);
        let adj = check_consistency_adjoint(&ladder, &self.spec, &|x| sm.phi(x), &|x| sm.dstar_phi(x), norm)?;
        let fields = SmoothFields { g: &|x| sm.g(x), q: &|x| sm.q(x), r: &|x| sm.r(x), dq: &|x| sm.dq(x) };
        let samp = check_consistency_sampling(&ladder, &self.spec, &self.weights, &fields)?;
        let n = self.spec.n;
        let ident =
            check_consistency_adjoint(&ladder, &self.spec, &|_| SymMatrix::identity(n), &|_| RectMatrix::zeros(self.spec.n, self.spec.k), 1.0)?;
        let mut rows = Vec::new();
        for (name, rep) in [("adjoint", &adj), ("derivation", &samp.derivation), ("energy", &samp.energy), ("identity", &ident)] {
            push_rate(&mut rows, name, rep);
        }
        Ok(rows)
    }

    pub fn consistency_csv(&self, rows: &[ConsistencyRow]) -> Result<String> {
        let records: Vec<Vec<String>> =
            rows.iter().map(|r| vec![r.quantity.to_string(), num(Some(r.sigma)), num(Some(r.error)), num(Some(r.order))]).collect();
        self.csv_text(&["quantity", "sigma", "error", "order"], &records)
    }

    /// Regularizes endpoint `g0` for each `eps` on the finest ladder mesh and,
    /// with `measure`, solves for `WFR^2(rho, rho_eps)`.
    pub fn regularize(&self, eps: &[f64], measure: bool, jobs: usize) -> Result<Vec<RegularizationRun>> {
        if self.spec.n != 1 {
            return Err(UbotError::config("model.kind", "regularization needs scalar states"));
        }
        let finest = *self.config.ladder.last().expect("validated ladder");
        let mesh = self.mesh(finest.cells)?;
        let lengths = &self.config.domain.lengths;
        let atomic = self.atomic(0)?;
        let dens = match &self.config.endpoints.g0 {
            EndpointSpec::Density(src) => Some(DensityExpr::parse(src).map_err(|m| UbotError::config("endpoints.g0.density", m))?),
            _ => None,
        };
        let density_fn = |x: &Point| dens.as_ref().map_or(0.0, |e| e.eval(x));
        let g0 = self.endpoint(0, &mesh)?;
        let rule = SimplexRule::composite(mesh.dim(), 2);
        let mut runs = Vec::with_capacity(eps.len());
        for &e in eps {
            let source = match (&atomic, &dens) {
                (Some(mu), _) => Source::Atomic(mu),
                (None, Some(_)) => Source::Density(&density_fn),
                _ => return Err(UbotError::config("endpoints.g0", "regularization needs an atomic or density endpoint")),
            };
            let reg = epsilon_regularize(source, lengths, e).map_err(|err| UbotError::config("eps", err.to_string()))?;
            let field = sample_state(&mesh, &rule, |x| SymMatrix::scalar(1, reg.density(x)))?;
            info!("eps {e}: main mass {:.6}", reg.main_mass());
            runs.push(RegularizationRun { diagnostics: reg.diagnostics(), main_mass: reg.main_mass(), field, wfr2: None, converged: None });
        }
        if measure {
            let problems: Vec<ProblemSpec> = runs
                .iter()
                .map(|r| {
                    ProblemSpec::new(mesh.clone(), self.spec, self.weights, finest.steps, g0.clone(), r.field.clone(), self.config.solver_config())
                })
                .collect::<std::result::Result<_, _>>()?;
            let reports = run_parallel(&problems, jobs)?;
            for (run, rep) in runs.iter_mut().zip(reports) {
                info!("eps {}: WFR^2 {:.8} converged {}", run.diagnostics.eps, rep.objective, rep.converged);
                run.wfr2 = Some(rep.objective);
                run.converged = Some(rep.converged);
            }
        }
        Ok(runs)
    }
}

/// Log-log slope of `WFR^2` against `eps`.
pub fn regularization_slope(runs: &[RegularizationRun]) -> Option<f64> {
    let (e, w): (Vec<f64>, Vec<f64>) = runs.iter().filter_map(|r| r.wfr2.map(|w| (r.diagnostics.eps, w))).unzip();
    (e.len() >= 2).then(|| fit_order(&e, &w))
}

/// `solve` over independent problems on up to `jobs` threads, in input order.
pub fn run_parallel(problems: &[ProblemSpec], jobs: usize) -> Result<Vec<SolveReport>> {
    let jobs = jobs.clamp(1, problems.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<ubot_core::Result<SolveReport>>>> = problems.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= problems.len() {
                    break;
                }
                let r = solve(&problems[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| Ok(m.into_inner().expect("slot lock").expect("every problem ran")?)).collect()
}

fn push_rate(rows: &mut Vec<ConsistencyRow>, quantity: &'static str, rep: &RateReport) {
    for (&sigma, &error) in rep.sigmas.iter().zip(&rep.errors) {
        rows.push(ConsistencyRow { quantity, sigma, error, order: rep.order });
    }
}

pub fn all_orders_pass(rows: &[ConsistencyRow]) -> bool {
    rows.iter().all(|r| r.order >= MIN_ORDER)
}

/// Smooth test fields on `[0, L]^d` with exact derivatives; `q` vanishes on the boundary.
struct Smooth {
    spec: ContinuousOperatorSpec,
    len: [f64; 3],
}

impl Smooth {
    fn new(spec: ContinuousOperatorSpec, lengths: &[f64]) -> Self {
        let mut len = [1.0; 3];
        len[..lengths.len()].copy_from_slice(lengths);
        Smooth { spec, len }
    }

    fn last(&self) -> usize {
        self.spec.d - 1
    }

    fn phi(&self, x: &Point) -> SymMatrix {
        let l = self.last();
        SymMatrix::from_fn(self.spec.n, |p, r| (1 + p + r) as f64 * x[0] * x[0] + if p == r { x[0] * x[l] } else { 0.0 })
    }

    fn dstar_phi(&self, x: &Point) -> RectMatrix {
        let (d, l) = (self.spec.d, self.last());
        let grad: Vec<SymMatrix> = (0..d)
            .map(|c| {
                let cross = match (d, c) {
                    (1, _) => 2.0 * x[0],
                    (_, 0) => x[l],
                    (_, c) if c == l => x[0],
                    _ => 0.0,
                };
                SymMatrix::from_fn(self.spec.n, |p, r| {
                    (if c == 0 { 2.0 * (1 + p + r) as f64 * x[0] } else { 0.0 }) + if p == r { cross } else { 0.0 }
                })
            })
            .collect();
        self.spec.apply_adjoint_symbol(&grad)
    }

    fn bubble(&self, x: &Point) -> (f64, [f64; 3]) {
        let d = self.spec.d;
        let pi = std::f64::consts::PI;
        let s: Vec<f64> = (0..d).map(|c| (pi * x[c] / self.len[c]).sin()).collect();
        let mut grad = [0.0; 3];
        for (c, g) in grad.iter_mut().enumerate().take(d) {
            *g = pi / self.len[c] * (pi * x[c] / self.len[c]).cos() * (0..d).filter(|&o| o != c).map(|o| s[o]).product::<f64>();
        }
        (s.iter().product(), grad)
    }

    fn q(&self, x: &Point) -> RectMatrix {
        let (b, _) = self.bubble(x);
        RectMatrix::from_fn(self.spec.n, self.spec.k, |i, j| b * (1.0 + i as f64 + 2.0 * j as f64 + x[0]))
    }

    fn dq(&self, x: &Point) -> SymMatrix {
        let (b, gb) = self.bubble(x);
        let grad: Vec<RectMatrix> = (0..self.spec.d)
            .map(|c| {
                RectMatrix::from_fn(self.spec.n, self.spec.k, |i, j| gb[c] * (1.0 + i as f64 + 2.0 * j as f64 + x[0]) + if c == 0 { b } else { 0.0 })
            })
            .collect();
        self.spec.apply_symbol(&grad)
    }

    fn g(&self, x: &Point) -> SymMatrix {
        let l = self.last();
        SymMatrix::from_fn(self.spec.n, |p, r| {
            if p == r {
                1.5 + x[0] / self.len[0] + 0.1 * p as f64
            } else {
                0.2 * x[l] / self.len[l] / (1 + p + r) as f64
            }
        })
    }

    fn r(&self, x: &Point) -> RectMatrix {
        let l = self.last();
        let (u, v) = (x[0] / self.len[0], x[l] / self.len[l]);
        RectMatrix::from_fn(self.spec.n, self.spec.n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => u - 0.3,
            std::cmp::Ordering::Less => 0.1,
            std::cmp::Ordering::Greater => 0.2 * u * v,
        })
    }
}

/// JSON summary of regularization runs.
pub fn regularization_json(hash: &str, runs: &[RegularizationRun]) -> serde_json::Value {
    json!({
        "config_hash": hash,
        "runs": runs.iter().map(|r| json!({
            "eps": r.diagnostics.eps,
            "lipschitz": r.diagnostics.lipschitz,
            "compression": r.diagnostics.compression,
            "normalization": r.diagnostics.normalization,
            "main_mass": r.main_mass,
            "wfr2": r.wfr2,
            "converged": r.converged,
        })).collect::<Vec<_>>(),
        "slope": regularization_slope(runs),
    })
}

/// Field JSON of one regularized density, tagged with the config hash.
pub fn tagged_field_json(hash: &str, field: &DiscreteState) -> Result<String> {
    #[derive(Serialize)]
    struct Tagged<'a> {
        config_hash: &'a str,
        #[serde(flatten)]
        field: FieldJson,
    }
    Ok(serde_json::to_string(&Tagged { config_hash: hash, field: FieldJson::from_state(field) })?)
}
