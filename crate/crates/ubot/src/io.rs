//! Text and JSON formats for meshes, fields, atomic measures and sparse maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ubot_core::measure::{Atom, AtomicMeasure};
use ubot_core::mesh::{Cell, Mesh, Point};
use ubot_core::operators::SparseMap;
use ubot_core::spaces::{DiscreteMomentum, DiscreteSource, DiscreteState, StaggeredPath};
use ubot_core::tensor::{RectMatrix, SymMatrix};

use crate::error::{Result, UbotError};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| UbotError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| UbotError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| UbotError::io(path, e))
}

/// `dim V T`, then the vertices, then the simplices (zero-based).
///
/// Coordinates use the shortest decimal form that reads back to the same bits.
pub fn mesh_to_text(mesh: &Mesh) -> String {
    let d = mesh.dim();
    let mut s = String::new();
    let _ = writeln!(s, "{} {} {}", d, mesh.num_vertices(), mesh.num_simplices());
    for p in mesh.vertices() {
        let line: Vec<String> = p[..d].iter().map(|x| format!("{x:e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    for k in 0..mesh.num_simplices() {
        let line: Vec<String> = mesh.simplex(k).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn parse_mesh(text: &str, origin: &str) -> Result<Mesh> {
    let err = |line: usize, message: String| UbotError::Parse { path: origin.to_string(), line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim())).filter(|(_, l)| !l.is_empty());
    let (hl, header) = lines.next().ok_or_else(|| err(1, "empty mesh file".into()))?;
    let head: Vec<usize> =
        header.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| err(hl, format!("header `dim V T`: {e}")))?;
    let [d, nv, nt] = head[..] else {
        return Err(err(hl, "header must be `dim V T`".into()));
    };
    if !(1..=3).contains(&d) {
        return Err(err(hl, format!("dimension {d} not in 1..=3")));
    }
    let mut vertices = Vec::with_capacity(nv);
    let mut simplices = Vec::with_capacity(nt);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| err(0, format!("expected {nv} vertex lines")))?;
        let xs: Vec<f64> =
            l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| err(ln, format!("coordinate: {e}")))?;
        if xs.len() != d {
            return Err(err(ln, format!("expected {d} coordinates, found {}", xs.len())));
        }
        let mut p: Point = [0.0; 3];
        p[..d].copy_from_slice(&xs);
        vertices.push(p);
    }
    for _ in 0..nt {
        let (ln, l) = lines.next().ok_or_else(|| err(0, format!("expected {nt} simplex lines")))?;
        let ix: Vec<usize> =
            l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| err(ln, format!("vertex index: {e}")))?;
        if ix.len() != d + 1 {
            return Err(err(ln, format!("expected {} indices, found {}", d + 1, ix.len())));
        }
        let mut c: Cell = [0; 4];
        c[..=d].copy_from_slice(&ix);
        simplices.push(c);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, "trailing data after the last simplex".into()));
    }
    Ok(Mesh::new(d, vertices, simplices)?)
}

pub fn read_mesh(path: &Path) -> Result<Mesh> {
    parse_mesh(&read_text(path)?, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    State,
    Momentum,
    Source,
}

/// One field, one row-major matrix per site. Extra keys (such as a config hash) are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldJson {
    pub kind: FieldKind,
    pub n: usize,
    pub k: usize,
    pub values: Vec<Vec<f64>>,
}

fn sym_row_major(m: &SymMatrix) -> Vec<f64> {
    let n = m.dim();
    (0..n * n).map(|i| m.get(i / n, i % n)).collect()
}

impl FieldJson {
    pub fn from_state(g: &DiscreteState) -> Self {
        FieldJson { kind: FieldKind::State, n: g.n(), k: g.n(), values: g.values().iter().map(sym_row_major).collect() }
    }

    pub fn from_momentum(q: &DiscreteMomentum) -> Self {
        FieldJson { kind: FieldKind::Momentum, n: q.n(), k: q.k(), values: q.values().iter().map(|m| m.as_slice().to_vec()).collect() }
    }

    pub fn from_source(r: &DiscreteSource) -> Self {
        FieldJson { kind: FieldKind::Source, n: r.n(), k: r.n(), values: r.values().iter().map(|m| m.as_slice().to_vec()).collect() }
    }

    fn expect(&self, kind: FieldKind) -> Result<()> {
        if self.kind != kind {
            return Err(UbotError::config("kind", format!("expected a {kind:?} field, found {:?}", self.kind)));
        }
        Ok(())
    }

    fn rects(&self, rows: usize, cols: usize) -> Result<Vec<RectMatrix>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| RectMatrix::from_row_major(rows, cols, v).map_err(|e| UbotError::config(format!("values[{i}]"), e.to_string())))
            .collect()
    }

    pub fn to_state(&self) -> Result<DiscreteState> {
        self.expect(FieldKind::State)?;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| SymMatrix::from_full(self.n, v).map_err(|e| UbotError::config(format!("values[{i}]"), e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscreteState::new(values)?)
    }

    pub fn to_momentum(&self) -> Result<DiscreteMomentum> {
        self.expect(FieldKind::Momentum)?;
        Ok(DiscreteMomentum::new(self.n, self.k, self.rects(self.n, self.k)?)?)
    }

    pub fn to_source(&self) -> Result<DiscreteSource> {
        self.expect(FieldKind::Source)?;
        Ok(DiscreteSource::new(self.n, self.rects(self.n, self.n)?)?)
    }
}

pub fn read_field(path: &Path) -> Result<FieldJson> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathJson {
    pub steps: usize,
    pub tau: f64,
    pub states: Vec<FieldJson>,
    pub momenta: Vec<FieldJson>,
    pub sources: Vec<FieldJson>,
}

impl PathJson {
    pub fn from_path(p: &StaggeredPath) -> Self {
        PathJson {
            steps: p.steps(),
            tau: p.tau(),
            states: p.states.iter().map(FieldJson::from_state).collect(),
            momenta: p.momenta.iter().map(FieldJson::from_momentum).collect(),
            sources: p.sources.iter().map(FieldJson::from_source).collect(),
        }
    }

    pub fn to_path(&self) -> Result<StaggeredPath> {
        Ok(StaggeredPath::new(
            self.states.iter().map(FieldJson::to_state).collect::<Result<_>>()?,
            self.momenta.iter().map(FieldJson::to_momentum).collect::<Result<_>>()?,
            self.sources.iter().map(FieldJson::to_source).collect::<Result<_>>()?,
        )?)
    }
}

/// A scalar mass or a row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MassJson {
    Scalar(f64),
    Matrix(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomJson {
    pub x: Vec<f64>,
    pub m: MassJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomicJson {
    pub atoms: Vec<AtomJson>,
}

impl AtomicJson {
    pub fn from_measure(mu: &AtomicMeasure) -> Self {
        let d = mu.dim();
        AtomicJson {
            atoms: mu
                .atoms()
                .iter()
                .map(|a| AtomJson {
                    x: a.x[..d].to_vec(),
                    m: if a.m.dim() == 1 { MassJson::Scalar(a.m.get(0, 0)) } else { MassJson::Matrix(sym_row_major(&a.m)) },
                })
                .collect(),
        }
    }

    /// `field` names this object in error messages.
    pub fn to_measure(&self, dim: usize, field: &str) -> Result<AtomicMeasure> {
        let mut atoms = Vec::with_capacity(self.atoms.len());
        for (i, a) in self.atoms.iter().enumerate() {
            let here = |what: &str| format!("{field}.atoms[{i}].{what}");
            if a.x.len() != dim {
                return Err(UbotError::config(here("x"), format!("expected {dim} coordinates, found {}", a.x.len())));
            }
            let mut x: Point = [0.0; 3];
            x[..dim].copy_from_slice(&a.x);
            let m = match &a.m {
                MassJson::Scalar(v) => SymMatrix::scalar(1, *v),
                MassJson::Matrix(v) => {
                    let n = (v.len() as f64).sqrt().round() as usize;
                    SymMatrix::from_full(n, v).map_err(|e| UbotError::config(here("m"), e.to_string()))?
                }
            };
            atoms.push(Atom { x, m });
        }
        AtomicMeasure::new(dim, atoms).map_err(|e| UbotError::config(format!("{field}.atoms"), e.to_string()))
    }
}

pub fn write_matrix_market(path: &Path, map: &SparseMap) -> Result<()> {
    write_text(path, &map.to_matrix_market())
}

pub fn read_matrix_market(path: &Path) -> Result<SparseMap> {
    Ok(SparseMap::from_matrix_market(&read_text(path)?)?)
}
