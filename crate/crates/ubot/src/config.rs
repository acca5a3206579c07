//! Experiment configuration (JSON).
//!
//! ```json
//! {
//!   "domain":    {"dim": 1, "lengths": [1.0]},
//!   "model":     {"kind": "wfr"},
//!   "endpoints": {"g0": {"atomic": {"atoms": [{"x": [0.25], "m": 1}]}},
//!                 "g1": {"density": "0.1 + gauss(0.75, 0.05)"}},
//!   "ladder":    [{"cells": 16, "steps": 8}, {"cells": 32, "steps": 16}],
//!   "solver":    {"tol_feas": 1e-6, "max_iter": 50000},
//!   "oracle":    "auto",
//!   "output":    "out",
//!   "seed":      0
//! }
//! ```
//!
//! `model.kind` is `wfr` (scalar states, divergence), `kantorovich-bures`
//! (`d x d` states, symmetric divergence) or `general` (then `model.operator`
//! is `divergence` or `symmetric-divergence`). `lambda1` (`k x k`) and
//! `lambda2` (`n x n`) default to identities and accept a number or rows.
//!
//! Endpoints are one of `atomic` (atom list), `density` (see [`crate::expr`]),
//! `field` (state JSON path, relative to the config file) or
//! `random` (`{"scale": s}`; i.i.d. per vertex, drawn from `seed`).
//!
//! `cells` is the number of cells per axis. `oracle` is `"auto"`, `"none"` or
//! a number. `record_wall_ms` puts timings in `rows.csv`, which then stops
//! being reproducible byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ubot_core::operators::{ContinuousOperatorSpec, OperatorKind};
use ubot_core::solver::SolverConfig;
use ubot_core::spaces::WeightPair;
use ubot_core::tensor::SymMatrix;

use crate::error::{Result, UbotError};
use crate::expr::DensityExpr;
use crate::io::{read_text, AtomicJson};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: Domain,
    pub model: Model,
    pub endpoints: Endpoints,
    pub ladder: Vec<LadderEntry>,
    #[serde(default)]
    pub solver: SolverOverrides,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_wall_ms: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub dim: usize,
    pub lengths: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Wfr,
    KantorovichBures,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorName {
    Divergence,
    SymmetricDivergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixJson {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixJson {
    fn to_sym(&self, n: usize, field: &str) -> Result<SymMatrix> {
        match self {
            MatrixJson::Scalar(a) => Ok(SymMatrix::scalar(n, *a)),
            MatrixJson::Rows(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(UbotError::config(field, format!("expected a {n} x {n} matrix")));
                }
                let flat: Vec<f64> = rows.concat();
                SymMatrix::from_full(n, &flat).map_err(|e| UbotError::config(field, e.to_string()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<MatrixJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<MatrixJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub g0: EndpointSpec,
    pub g1: EndpointSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointSpec {
    Atomic(AtomicJson),
    Density(String),
    Field(PathBuf),
    Random(RandomSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpec {
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderEntry {
    pub cells: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_feas: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_obj: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primal_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive_weight: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Auto,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OracleSpec {
    Value(f64),
    Mode(OracleMode),
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Mode(OracleMode::Auto)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tol_feas: Option<f64>,
    pub output: Option<PathBuf>,
}

/// Pulls the offending field name out of a serde message when there is one.
fn serde_field(msg: &str) -> String {
    for pat in ["missing field `", "unknown field `", "duplicate field `"] {
        if let Some(i) = msg.find(pat) {
            let rest = &msg[i + pat.len()..];
            if let Some(j) = rest.find('`') {
                return rest[..j].to_string();
            }
        }
    }
    "config".to_string()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            UbotError::config(serde_field(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.tol_feas {
            self.solver.tol_feas = Some(t);
        }
        if let Some(out) = &o.output {
            self.output.clone_from(out);
        }
        self.validate()
    }

    /// SHA-256 of the canonical serialization without the output directory, in hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn operator(&self) -> Result<ContinuousOperatorSpec> {
        let kind = match (self.model.kind, self.model.operator) {
            (ModelKind::Wfr, None | Some(OperatorName::Divergence)) => OperatorKind::Divergence,
            (ModelKind::KantorovichBures, None | Some(OperatorName::SymmetricDivergence)) => OperatorKind::SymmetricDivergence,
            (ModelKind::General, Some(OperatorName::Divergence)) => OperatorKind::Divergence,
            (ModelKind::General, Some(OperatorName::SymmetricDivergence)) => OperatorKind::SymmetricDivergence,
            (ModelKind::General, None) => return Err(UbotError::config("model.operator", "required when model.kind is general")),
            (k, Some(op)) => return Err(UbotError::config("model.operator", format!("{op:?} does not fit model {k:?}"))),
        };
        ContinuousOperatorSpec::new(kind, self.domain.dim).map_err(|e| UbotError::config("domain.dim", e.to_string()))
    }

    pub fn weights(&self) -> Result<WeightPair> {
        let spec = self.operator()?;
        let l1 = match &self.model.lambda1 {
            Some(m) => m.to_sym(spec.k, "model.lambda1")?,
            None => SymMatrix::identity(spec.k),
        };
        let l2 = match &self.model.lambda2 {
            Some(m) => m.to_sym(spec.n, "model.lambda2")?,
            None => SymMatrix::identity(spec.n),
        };
        WeightPair::new(l1, l2).map_err(|e| UbotError::config("model", e.to_string()))
    }

    pub fn solver_config(&self) -> SolverConfig {
        let mut c = SolverConfig::default();
        let o = &self.solver;
        c.max_iter = o.max_iter.unwrap_or(c.max_iter);
        c.tol_feas = o.tol_feas.unwrap_or(c.tol_feas);
        c.tol_obj = o.tol_obj.unwrap_or(c.tol_obj);
        c.check_every = o.check_every.unwrap_or(c.check_every);
        c.dual_every = o.dual_every.unwrap_or(c.dual_every);
        c.primal_weight = o.primal_weight.unwrap_or(c.primal_weight);
        c.adaptive_weight = o.adaptive_weight.unwrap_or(c.adaptive_weight);
        c
    }

    /// Everything that can be checked without touching other files.
    pub fn validate(&self) -> Result<()> {
        let d = self.domain.dim;
        if !(1..=3).contains(&d) {
            return Err(UbotError::config("domain.dim", format!("{d} is not 1, 2 or 3")));
        }
        if self.domain.lengths.len() != d {
            return Err(UbotError::config("domain.lengths", format!("expected {d} entries, found {}", self.domain.lengths.len())));
        }
        if self.domain.lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(UbotError::config("domain.lengths", "lengths must be positive"));
        }
        if self.ladder.is_empty() {
            return Err(UbotError::config("ladder", "needs at least one entry"));
        }
        for (i, e) in self.ladder.iter().enumerate() {
            if e.cells == 0 {
                return Err(UbotError::config(format!("ladder[{i}].cells"), "must be at least 1"));
            }
            if e.steps == 0 {
                return Err(UbotError::config(format!("ladder[{i}].steps"), "must be at least 1"));
            }
        }
        let spec = self.operator()?;
        self.weights()?;
        for (name, ep) in [("g0", &self.endpoints.g0), ("g1", &self.endpoints.g1)] {
            let field = format!("endpoints.{name}");
            match ep {
                EndpointSpec::Atomic(a) => {
                    let mu = a.to_measure(d, &format!("{field}.atomic"))?;
                    if !mu.atoms().is_empty() && mu.n() != spec.n {
                        return Err(UbotError::config(format!("{field}.atomic"), format!("masses must be {0} x {0}", spec.n)));
                    }
                }
                EndpointSpec::Density(src) => {
                    let e = DensityExpr::parse(src).map_err(|m| UbotError::config(format!("{field}.density"), m))?;
                    if e.dim() > d {
                        return Err(UbotError::config(format!("{field}.density"), format!("gauss centers have more than {d} coordinates")));
                    }
                }
                EndpointSpec::Field(_) => {}
                EndpointSpec::Random(r) => {
                    if !(r.scale > 0.0 && r.scale.is_finite()) {
                        return Err(UbotError::config(format!("{field}.random.scale"), "must be positive"));
                    }
                }
            }
        }
        let s = &self.solver;
        let pos = |v: Option<f64>| v.is_none_or(|x| x > 0.0 && x.is_finite());
        for (name, ok) in [
            ("solver.tol_feas", pos(s.tol_feas)),
            ("solver.tol_obj", pos(s.tol_obj)),
            ("solver.primal_weight", pos(s.primal_weight)),
            ("solver.max_iter", s.max_iter != Some(0)),
            ("solver.check_every", s.check_every != Some(0)),
            ("solver.dual_every", s.dual_every != Some(0)),
        ] {
            if !ok {
                return Err(UbotError::config(name, "must be positive"));
            }
        }
        if let OracleSpec::Value(v) = self.oracle {
            if !v.is_finite() {
                return Err(UbotError::config("oracle", "must be finite"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "domain": {"dim": 1, "lengths": [1.0]},
        "model": {"kind": "wfr"},
        "endpoints": {"g0": {"atomic": {"atoms": [{"x": [0.25], "m": 1}]}}, "g1": {"density": "1"}},
        "ladder": [{"cells": 4, "steps": 2}]
    }"#;

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_json(text).unwrap_err() {
            UbotError::Config { field, .. } => field,
            e => panic!("{e}"),
        }
    }

    #[test]
    fn defaults_and_hash() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.oracle, OracleSpec::Mode(OracleMode::Auto));
        assert_eq!(c.seed, 0);
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.apply(&Overrides { seed: Some(3), ..Default::default() }).unwrap();
        assert_ne!(c.hash(), d.hash());
        let mut e = c.clone();
        e.apply(&Overrides { output: Some("elsewhere".into()), ..Default::default() }).unwrap();
        assert_eq!(c.hash(), e.hash());
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(&BASE.replace(r#""ladder": [{"cells": 4, "steps": 2}]"#, r#""seed": 1"#)), "ladder");
        assert_eq!(field_of(&BASE.replace(r#""cells": 4"#, r#""cells": 0"#)), "ladder[0].cells");
        assert_eq!(field_of(&BASE.replace("[1.0]", "[1.0, 2.0]")), "domain.lengths");
        assert_eq!(field_of(&BASE.replace(r#""density": "1""#, r#""density": "gauss(1""#)), "endpoints.g1.density");
        assert_eq!(field_of(&BASE.replace(r#""kind": "wfr""#, r#""kind": "general""#)), "model.operator");
        assert_eq!(field_of(&BASE.replace(r#""m": 1"#, r#""m": -1"#)), "endpoints.g0.atomic.atoms");
        assert_eq!(field_of(&BASE.replace("]\n    }", "], \"sed\": 1\n    }")), "sed");
    }
}
