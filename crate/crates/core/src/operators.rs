//! Reconstructions, sampling, the assembled discrete derivation and its
//! negative adjoint, and empirical consistency rates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

#[allow(unused_imports)]
use num_traits::Float;

use crate::action::{element_average, ActionWeights, RangePolicy};
use crate::error::{Error, Result};
use crate::measure::{Atom, AtomicMeasure};
use crate::mesh::{Mesh, Point};
use crate::quadrature::SimplexRule;
use crate::spaces::{DiscreteMomentum, DiscreteSource, DiscreteState, WeightPair};
use crate::tensor::{RectMatrix, SymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    /// Scalar states, `D = div`, `D* = grad`.
    Divergence,
    /// `d x d` states, `D = sym grad` on vector momenta, `D*` the row-wise divergence.
    SymmetricDivergence,
}

/// First-order operator together with the sizes it acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContinuousOperatorSpec {
    pub kind: OperatorKind,
    pub n: usize,
    pub k: usize,
    pub d: usize,
}

impl ContinuousOperatorSpec {
    pub fn new(kind: OperatorKind, d: usize) -> Result<Self> {
        if d == 0 || d > 3 {
            return Err(Error::Unsupported("spatial dimension must be 1, 2 or 3"));
        }
        Ok(match kind {
            OperatorKind::Divergence => ContinuousOperatorSpec { kind, n: 1, k: d, d },
            OperatorKind::SymmetricDivergence => ContinuousOperatorSpec { kind, n: d, k: 1, d },
        })
    }

    pub fn divergence(d: usize) -> Result<Self> {
        Self::new(OperatorKind::Divergence, d)
    }

    pub fn symmetric_divergence(d: usize) -> Result<Self> {
        Self::new(OperatorKind::SymmetricDivergence, d)
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        let ok = self.d == mesh.dim()
            && match self.kind {
                OperatorKind::Divergence => self.n == 1 && self.k == self.d,
                OperatorKind::SymmetricDivergence => self.n == self.d && self.k == 1,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape { expected: "operator sizes matching the mesh dimension", found: mesh.dim() })
        }
    }

    /// `D*` applied to a matrix field whose value is `g` and gradient is `grad` (`grad[c] = d g / d x_c`).
    pub fn apply_adjoint_symbol(&self, grad: &[SymMatrix]) -> RectMatrix {
        match self.kind {
            OperatorKind::Divergence => RectMatrix::from_fn(1, self.d, |_, j| grad[j].get(0, 0)),
            OperatorKind::SymmetricDivergence => RectMatrix::from_fn(self.d, 1, |p, _| (0..self.d).map(|r| grad[r].get(p, r)).sum()),
        }
    }

    /// `D` applied to a momentum field with gradient `grad` (`grad[c] = d q / d x_c`).
    pub fn apply_symbol(&self, grad: &[RectMatrix]) -> SymMatrix {
        match self.kind {
            OperatorKind::Divergence => SymMatrix::scalar(1, (0..self.d).map(|j| grad[j].get(0, j)).sum()),
            OperatorKind::SymmetricDivergence => SymMatrix::from_fn(self.d, |p, r| 0.5 * (grad[r].get(p, 0) + grad[p].get(r, 0))),
        }
    }
}

/// Compressed sparse row matrix assembled from triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMap {
    /// Sorts the triplets and sums duplicates.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows {
                return Err(Error::IndexOutOfRange { index: r, len: rows });
            }
            if c >= cols {
                return Err(Error::IndexOutOfRange { index: c, len: cols });
            }
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite triplet value"));
            }
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().expect("previous entry") += v;
            } else {
                col_idx.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMap { rows, cols, row_ptr, col_idx, vals })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Entries in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |i| (r, self.col_idx[i], self.vals[i])))
    }

    /// Entries of row `r` as `(column, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |i| (self.col_idx[i], self.vals[i]))
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.apply_into(x, &mut y);
        y
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[i] * x[self.col_idx[i]];
            }
            *yr = s;
        }
    }

    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[i]] += self.vals[i] * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> SparseMap {
        let t = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        SparseMap::from_triplets(self.cols, self.rows, t).expect("indices already validated")
    }

    /// MatrixMarket coordinate text with one-based indices.
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::from("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "{} {} {}", self.rows, self.cols, self.nnz());
        for (r, c, v) in self.triplets() {
            let _ = writeln!(s, "{} {} {:.17e}", r + 1, c + 1, v);
        }
        s
    }

    pub fn from_matrix_market(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('%'));
        let header = lines.next().ok_or(Error::InvalidProblem("empty MatrixMarket input"))?;
        let dims: Vec<usize> =
            header.split_whitespace().map(|t| t.parse().map_err(|_| Error::InvalidProblem("bad MatrixMarket size line"))).collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::InvalidProblem("bad MatrixMarket size line"));
        }
        let mut triplets = Vec::with_capacity(dims[2]);
        for l in lines {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 3 {
                return Err(Error::InvalidProblem("bad MatrixMarket entry"));
            }
            let r: usize = t[0].parse().map_err(|_| Error::InvalidProblem("bad MatrixMarket entry"))?;
            let c: usize = t[1].parse().map_err(|_| Error::InvalidProblem("bad MatrixMarket entry"))?;
            let v: f64 = t[2].parse().map_err(|_| Error::InvalidProblem("bad MatrixMarket entry"))?;
            if r == 0 || c == 0 {
                return Err(Error::InvalidProblem("MatrixMarket indices are one-based"));
            }
            triplets.push((r - 1, c - 1, v));
        }
        if triplets.len() != dims[2] {
            return Err(Error::InvalidProblem("MatrixMarket entry count mismatch"));
        }
        Self::from_triplets(dims[0], dims[1], triplets)
    }
}

/// Full `n x n` row-major blocks per vertex.
pub fn flatten_state(g: &DiscreteState) -> Vec<f64> {
    let n = g.n();
    let mut out = Vec::with_capacity(g.len() * n * n);
    for m in g.values() {
        for p in 0..n {
            for r in 0..n {
                out.push(m.get(p, r));
            }
        }
    }
    out
}

/// Inverse of `flatten_state`, symmetrizing each block.
pub fn unflatten_state(n: usize, x: &[f64]) -> Result<DiscreteState> {
    let b = n * n;
    DiscreteState::new(x.chunks(b).map(|c| SymMatrix::from_fn(n, |p, r| 0.5 * (c[p * n + r] + c[r * n + p]))).collect())
}

pub fn flatten_rect(values: &[RectMatrix]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in values {
        out.extend_from_slice(m.as_slice());
    }
    out
}

pub fn unflatten_momentum(n: usize, k: usize, x: &[f64]) -> Result<DiscreteMomentum> {
    DiscreteMomentum::new(n, k, x.chunks(n * k).map(|c| RectMatrix::from_row_major(n, k, c)).collect::<Result<_>>()?)
}

/// `D*_sigma` (vertex states to element momenta) and `D_sigma` (its negative weighted adjoint).
#[derive(Clone, Debug)]
pub struct DiscreteDerivation {
    spec: ContinuousOperatorSpec,
    dstar: SparseMap,
    d: SparseMap,
}

impl DiscreteDerivation {
    pub fn spec(&self) -> &ContinuousOperatorSpec {
        &self.spec
    }

    /// Rows `(K, p, j)`, columns `(v, p, r)`.
    pub fn dstar(&self) -> &SparseMap {
        &self.dstar
    }

    /// Rows `(v, p, r)`, columns `(K, p, j)`.
    pub fn d(&self) -> &SparseMap {
        &self.d
    }

    pub fn apply_dstar(&self, g: &DiscreteState) -> Result<DiscreteMomentum> {
        if g.n() != self.spec.n || g.len() * self.spec.n * self.spec.n != self.dstar.cols() {
            return Err(Error::Shape { expected: "state sized to the derivation", found: g.len() });
        }
        unflatten_momentum(self.spec.n, self.spec.k, &self.dstar.apply(&flatten_state(g)))
    }

    pub fn apply_d(&self, q: &DiscreteMomentum) -> Result<DiscreteState> {
        if q.n() != self.spec.n || q.k() != self.spec.k || q.len() * self.spec.n * self.spec.k != self.d.cols() {
            return Err(Error::Shape { expected: "momentum sized to the derivation", found: q.len() });
        }
        unflatten_state(self.spec.n, &self.d.apply(&flatten_rect(q.values())))
    }
}

/// Assembles `D*_sigma` exactly from hat-function gradients and `D_sigma` as its negative
/// adjoint under the `|K|` and `|T_v|` weighted pairings.
pub fn assemble_discrete_divergence(mesh: &Mesh, spec: &ContinuousOperatorSpec) -> Result<DiscreteDerivation> {
    spec.check_mesh(mesh)?;
    let (n, k) = (spec.n, spec.k);
    let nv = mesh.num_vertices();
    let nt = mesh.num_simplices();
    let mut trip = Vec::new();
    for e in 0..nt {
        let grads = mesh.hat_gradients(e);
        for (i, &v) in mesh.simplex(e).iter().enumerate() {
            let g = &grads[i];
            match spec.kind {
                OperatorKind::Divergence => {
                    for j in 0..k {
                        trip.push((e * k + j, v, g[j]));
                    }
                }
                OperatorKind::SymmetricDivergence => {
                    // split over (p, r) and (r, p) so that the transpose lands on symmetric states
                    for p in 0..n {
                        for r in 0..n {
                            let col = v * n * n + p * n + r;
                            trip.push((e * n + p, col, 0.5 * g[r]));
                            trip.push((e * n + r, col, 0.5 * g[p]));
                        }
                    }
                }
            }
        }
    }
    let dstar = SparseMap::from_triplets(nt * n * k, nv * n * n, trip)?;
    let vols = mesh.element_volumes();
    let patches = mesh.patch_volumes();
    let (bt, bv) = (n * k, n * n);
    let dt = dstar.triplets().map(|(r, c, val)| (c, r, -val * vols[r / bt] / patches[c / bv])).collect();
    let d = SparseMap::from_triplets(nv * n * n, nt * n * k, dt)?;
    Ok(DiscreteDerivation { spec: *spec, dstar, d })
}

/// Piecewise-constant field on simplices.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseField {
    pub values: Vec<RectMatrix>,
    pub volumes: Vec<f64>,
}

impl PiecewiseField {
    pub fn total_variation(&self) -> f64 {
        self.values.iter().zip(&self.volumes).map(|(v, w)| w * v.norm_fro()).sum()
    }
}

/// Continuous piecewise-linear field `sum_v c_v phi_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField {
    pub coefficients: Vec<RectMatrix>,
}

impl NodalField {
    pub fn evaluate_in(&self, mesh: &Mesh, k: usize, lambda: &[f64]) -> RectMatrix {
        let vs = mesh.simplex(k);
        let c0 = &self.coefficients[vs[0]];
        let mut acc = RectMatrix::zeros(c0.rows(), c0.cols());
        for (i, &v) in vs.iter().enumerate() {
            acc = acc.add(&self.coefficients[v].scale(lambda[i]));
        }
        acc
    }

    /// Total variation by composite quadrature.
    pub fn total_variation(&self, mesh: &Mesh, rule: &SimplexRule) -> f64 {
        (0..mesh.num_simplices()).map(|k| rule.integrate(mesh, k, |_, lam| self.evaluate_in(mesh, k, lam).norm_fro())).sum()
    }
}

/// Atoms at the vertices with masses `|T_v| G_v`.
pub fn reconstruct_atomic(mesh: &Mesh, g: &DiscreteState) -> Result<AtomicMeasure> {
    check_vertex_len(mesh, g.len())?;
    let atoms = g.values().iter().enumerate().map(|(v, m)| Atom { x: *mesh.vertex(v), m: m.scale(mesh.patch_volumes()[v]) }).collect();
    Ok(AtomicMeasure::new_unchecked(mesh.dim(), atoms))
}

pub fn reconstruct_pwconstant(mesh: &Mesh, q: &DiscreteMomentum) -> Result<PiecewiseField> {
    if q.len() != mesh.num_simplices() {
        return Err(Error::Shape { expected: "one value per simplex", found: q.len() });
    }
    Ok(PiecewiseField { values: q.values().to_vec(), volumes: mesh.element_volumes().to_vec() })
}

pub fn reconstruct_linear(mesh: &Mesh, values: &[RectMatrix]) -> Result<NodalField> {
    check_vertex_len(mesh, values.len())?;
    Ok(NodalField { coefficients: values.to_vec() })
}

pub fn reconstruct_linear_state(mesh: &Mesh, g: &DiscreteState) -> Result<NodalField> {
    reconstruct_linear(mesh, &g.values().iter().map(|m| m.to_rect()).collect::<Vec<_>>())
}

fn check_vertex_len(mesh: &Mesh, len: usize) -> Result<()> {
    if len != mesh.num_vertices() {
        return Err(Error::Shape { expected: "one value per vertex", found: len });
    }
    Ok(())
}

/// `(1/|T_v|) int f phi_v` by the given rule.
pub fn sample_state(mesh: &Mesh, rule: &SimplexRule, f: impl Fn(&Point) -> SymMatrix) -> Result<DiscreteState> {
    let nv = mesh.num_vertices();
    let mut acc: Vec<Option<SymMatrix>> = vec![None; nv];
    let d = mesh.dim();
    for k in 0..mesh.num_simplices() {
        let vol = mesh.element_volumes()[k];
        let vs = mesh.simplex(k);
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            let x = mesh.point_from_barycentric(k, &p[..=d]);
            let fx = f(&x);
            if !fx.is_finite() {
                return Err(Error::Numerical("sampled function is not finite"));
            }
            for (i, &v) in vs.iter().enumerate() {
                let c = w * vol * p[i];
                acc[v] = Some(match acc[v] {
                    Some(a) => a.axpy(c, &fx),
                    None => fx.scale(c),
                });
            }
        }
    }
    let values = acc.into_iter().enumerate().map(|(v, a)| a.expect("every vertex lies in a simplex").scale(1.0 / mesh.patch_volumes()[v])).collect();
    DiscreteState::new(values)
}

/// Same as `sample_state` for square non-symmetric fields.
pub fn sample_source(mesh: &Mesh, rule: &SimplexRule, f: impl Fn(&Point) -> RectMatrix) -> Result<DiscreteSource> {
    let nv = mesh.num_vertices();
    let d = mesh.dim();
    let mut acc: Vec<Option<RectMatrix>> = vec![None; nv];
    for k in 0..mesh.num_simplices() {
        let vol = mesh.element_volumes()[k];
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            let fx = f(&mesh.point_from_barycentric(k, &p[..=d]));
            if !fx.is_finite() {
                return Err(Error::Numerical("sampled function is not finite"));
            }
            for (i, &v) in mesh.simplex(k).iter().enumerate() {
                let c = w * vol * p[i];
                acc[v] = Some(match acc[v] {
                    Some(a) => a.add(&fx.scale(c)),
                    None => fx.scale(c),
                });
            }
        }
    }
    let n = acc[0].map_or(1, |a| a.rows());
    DiscreteSource::new(
        n,
        acc.into_iter().enumerate().map(|(v, a)| a.expect("every vertex lies in a simplex").scale(1.0 / mesh.patch_volumes()[v])).collect(),
    )
}

/// Element averages of `f`.
pub fn sample_momentum(mesh: &Mesh, rule: &SimplexRule, f: impl Fn(&Point) -> RectMatrix) -> Result<DiscreteMomentum> {
    let d = mesh.dim();
    let mut values = Vec::with_capacity(mesh.num_simplices());
    for k in 0..mesh.num_simplices() {
        let mut acc: Option<RectMatrix> = None;
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            let fx = f(&mesh.point_from_barycentric(k, &p[..=d]));
            if !fx.is_finite() {
                return Err(Error::Numerical("sampled function is not finite"));
            }
            acc = Some(match acc {
                Some(a) => a.add(&fx.scale(w)),
                None => fx.scale(w),
            });
        }
        values.push(acc.expect("nonempty rule"));
    }
    let (n, kk) = values.first().map_or((1, 1), |m| (m.rows(), m.cols()));
    DiscreteMomentum::new(n, kk, values)
}

/// Exact sampling of a measure: each atom contributes `m phi_v(x) / |T_v|`.
pub fn sample_state_atomic(mesh: &Mesh, mu: &AtomicMeasure) -> Result<DiscreteState> {
    if mu.dim() != mesh.dim() {
        return Err(Error::Shape { expected: "atoms in the mesh dimension", found: mu.dim() });
    }
    let n = mu.n();
    let mut values = vec![SymMatrix::zeros(n); mesh.num_vertices()];
    for a in mu.atoms() {
        let (k, lam) = mesh.locate(&a.x).ok_or(Error::InvalidProblem("atom outside the mesh"))?;
        for (i, &v) in mesh.simplex(k).iter().enumerate() {
            let l = lam[i].clamp(0.0, 1.0);
            if l > 0.0 {
                values[v] = values[v].axpy(l / mesh.patch_volumes()[v], &a.m);
            }
        }
    }
    let (s, _) = DiscreteState::new_psd(values)?;
    Ok(s)
}

/// Measured errors on a refinement ladder and their least-squares order.
#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub sigmas: Vec<f64>,
    pub errors: Vec<f64>,
    /// `f64::INFINITY` when every error is at round-off level.
    pub order: f64,
}

/// Errors at or below this are treated as exact.
pub const EXACT_TOL: f64 = 1e-12;

impl RateReport {
    pub fn new(sigmas: Vec<f64>, errors: Vec<f64>) -> Self {
        let order = fit_order(&sigmas, &errors);
        RateReport { sigmas, errors, order }
    }

    pub fn passes(&self, min_order: f64) -> bool {
        self.order >= min_order
    }
}

/// Slope of `log e` against `log sigma`.
pub fn fit_order(sigmas: &[f64], errors: &[f64]) -> f64 {
    if errors.iter().all(|&e| e.abs() <= EXACT_TOL) {
        return f64::INFINITY;
    }
    let pts: Vec<(f64, f64)> = sigmas.iter().zip(errors).filter(|(_, e)| e.abs() > 0.0).map(|(s, e)| (s.ln(), e.abs().ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let sy: f64 = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let num: f64 = pts.iter().map(|p| (p.0 - sx) * (p.1 - sy)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - sx) * (p.0 - sx)).sum();
    num / den
}

fn check_ladder(ladder: &[Mesh], spec: &ContinuousOperatorSpec) -> Result<()> {
    if ladder.len() < 3 {
        return Err(Error::InvalidProblem("a consistency ladder needs at least three meshes"));
    }
    ladder.iter().try_for_each(|m| spec.check_mesh(m))
}

/// Adjoint consistency: `max_K |avg_K D* phi - (D*_sigma phi(v))_K| / norm`.
///
/// `dstar_phi` is the exact `D* phi` and `norm` a bound on `phi` and its first two derivatives.
pub fn check_consistency_adjoint(
    ladder: &[Mesh],
    spec: &ContinuousOperatorSpec,
    phi: &dyn Fn(&Point) -> SymMatrix,
    dstar_phi: &dyn Fn(&Point) -> RectMatrix,
    norm: f64,
) -> Result<RateReport> {
    check_ladder(ladder, spec)?;
    let mut sigmas = Vec::new();
    let mut errors = Vec::new();
    for mesh in ladder {
        let dd = assemble_discrete_divergence(mesh, spec)?;
        let rule = SimplexRule::composite(mesh.dim(), 1);
        let nodal = DiscreteState::new(mesh.vertices().iter().map(phi).collect())?;
        let disc = dd.apply_dstar(&nodal)?;
        let exact = sample_momentum(mesh, &rule, dstar_phi)?;
        let err = disc.values().iter().zip(exact.values()).fold(0.0f64, |m, (a, b)| m.max(a.sub(b).norm_fro()));
        sigmas.push(mesh.size().sigma);
        errors.push(err / norm);
    }
    Ok(RateReport::new(sigmas, errors))
}

/// Smooth test data for the sampling checks; `dq` must be the exact `D q`.
pub struct SmoothFields<'a> {
    pub g: &'a dyn Fn(&Point) -> SymMatrix,
    pub q: &'a dyn Fn(&Point) -> RectMatrix,
    pub r: &'a dyn Fn(&Point) -> RectMatrix,
    pub dq: &'a dyn Fn(&Point) -> SymMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingReport {
    /// `max_v |D_sigma S_Y q - S_X D q|`
    pub derivation: RateReport,
    /// `|J_sigma(S G, S q, S R + e) - J(G, q, R)|`
    pub energy: RateReport,
}

pub fn check_consistency_sampling(
    ladder: &[Mesh],
    spec: &ContinuousOperatorSpec,
    weights: &WeightPair,
    fields: &SmoothFields<'_>,
) -> Result<SamplingReport> {
    check_ladder(ladder, spec)?;
    let aw = ActionWeights::new(weights);
    let policy = RangePolicy::default();
    let mut sigmas = Vec::new();
    let mut derr = Vec::new();
    let mut eerr = Vec::new();
    for mesh in ladder {
        let rule = SimplexRule::composite(mesh.dim(), 1);
        let dd = assemble_discrete_divergence(mesh, spec)?;
        let sq = sample_momentum(mesh, &rule, fields.q)?;
        let sdq = sample_state(mesh, &rule, fields.dq)?;
        let e = dd.apply_d(&sq)?.combine(1.0, &sdq, -1.0);
        derr.push(e.values().iter().fold(0.0f64, |m, x| m.max(x.norm_fro())));

        let sg = sample_state(mesh, &rule, fields.g)?;
        let mut sr = sample_source(mesh, &rule, fields.r)?;
        for (rv, ev) in sr.values_mut().iter_mut().zip(e.values()) {
            *rv = rv.add(&ev.to_rect());
        }
        let discrete = crate::action::j_sigma_with(mesh, &sg, &sq, &sr, &aw, &policy)?.value;
        let fine = SimplexRule::composite(mesh.dim(), 2);
        let mut continuous = 0.0;
        for k in 0..mesh.num_simplices() {
            continuous += fine.integrate(mesh, k, |x, _| aw.pointwise(&(fields.g)(x), &(fields.q)(x), &(fields.r)(x), &policy).value);
        }
        eerr.push((discrete - continuous).abs());
        sigmas.push(mesh.size().sigma);
    }
    Ok(SamplingReport { derivation: RateReport::new(sigmas.clone(), derr), energy: RateReport::new(sigmas, eerr) })
}

/// Element averages of a state, for callers that need the momentum-site view.
pub fn element_averages(mesh: &Mesh, g: &DiscreteState) -> Vec<SymMatrix> {
    (0..mesh.num_simplices()).map(|k| element_average(mesh, g, k)).collect()
}

/// Human-readable one-line summary of a rate report.
pub fn describe(report: &RateReport) -> String {
    format!("order {:.3} over sigmas {:?}", report.order, report.sigmas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_box_mesh, refine_uniform};
    use crate::spaces::inner;
    use core::f64::consts::PI;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unif(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn random_state(rng: &mut ChaCha8Rng, mesh: &Mesh, n: usize) -> DiscreteState {
        DiscreteState::new((0..mesh.num_vertices()).map(|_| SymMatrix::from_fn(n, |_, _| unif(rng))).collect()).unwrap()
    }

    fn random_momentum(rng: &mut ChaCha8Rng, mesh: &Mesh, n: usize, k: usize) -> DiscreteMomentum {
        DiscreteMomentum::new(n, k, (0..mesh.num_simplices()).map(|_| RectMatrix::from_fn(n, k, |_, _| unif(rng))).collect()).unwrap()
    }

    fn box_mesh(d: usize, cells: usize) -> Mesh {
        generate_box_mesh(d, &[1.0; 3][..d], &[cells; 3][..d]).unwrap()
    }

    #[test]
    fn adjoint_identity_all_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=3 {
            let mesh = box_mesh(d, if d == 3 { 2 } else { 4 });
            for spec in [ContinuousOperatorSpec::divergence(d).unwrap(), ContinuousOperatorSpec::symmetric_divergence(d).unwrap()] {
                let dd = assemble_discrete_divergence(&mesh, &spec).unwrap();
                for _ in 0..10 {
                    let g = random_state(&mut rng, &mesh, spec.n);
                    let q = random_momentum(&mut rng, &mesh, spec.n, spec.k);
                    let lhs = inner(&mesh, &g, &dd.apply_d(&q).unwrap()).unwrap();
                    let rhs = inner(&mesh, &dd.apply_dstar(&g).unwrap(), &q).unwrap();
                    assert!((lhs + rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "d={d} {spec:?}");
                }
            }
        }
    }

    #[test]
    fn derivation_examples() {
        let mesh = box_mesh(1, 4);
        let spec = ContinuousOperatorSpec::divergence(1).unwrap();
        let dd = assemble_discrete_divergence(&mesh, &spec).unwrap();
        let x = DiscreteState::new(mesh.vertices().iter().map(|p| SymMatrix::scalar(1, p[0])).collect()).unwrap();
        for v in dd.apply_dstar(&x).unwrap().values() {
            assert!((v.get(0, 0) - 1.0).abs() < 1e-14);
        }
        let m2 = box_mesh(2, 3);
        for spec in [ContinuousOperatorSpec::divergence(2).unwrap(), ContinuousOperatorSpec::symmetric_divergence(2).unwrap()] {
            let dd = assemble_discrete_divergence(&m2, &spec).unwrap();
            let c = DiscreteState::constant(&m2, SymMatrix::from_fn(spec.n, |i, j| 1.0 + (i + 2 * j) as f64));
            for v in dd.apply_dstar(&c).unwrap().values() {
                assert!(v.norm_fro() < 1e-13);
            }
        }
        assert!(assemble_discrete_divergence(&mesh, &ContinuousOperatorSpec::divergence(2).unwrap()).is_err());
    }

    #[test]
    fn sparse_map_roundtrip_and_duplicates() {
        let m = SparseMap::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 0, 2.0), (1, 2, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.apply(&[1.0, 0.0, 2.0]), vec![2.0, 3.0]);
        assert_eq!(m.apply_transpose(&[1.0, 1.0]), vec![2.0, 0.0, 1.5]);
        let back = SparseMap::from_matrix_market(&m.to_matrix_market()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.transpose().transpose(), m);
        assert!(SparseMap::from_triplets(1, 1, vec![(1, 0, 1.0)]).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let mesh = box_mesh(1, 2);
        let g = DiscreteState::constant(&mesh, SymMatrix::scalar(1, 1.0));
        let mu = reconstruct_atomic(&mesh, &g).unwrap();
        let got: Vec<(f64, f64)> = mu.atoms().iter().map(|a| (a.x[0], a.m.get(0, 0))).collect();
        assert_eq!(got, vec![(0.0, 0.25), (0.5, 0.5), (1.0, 0.25)]);
        assert!((mu.total_variation() - 1.0).abs() < 1e-15);
        let z = reconstruct_atomic(&mesh, &DiscreteState::zeros(3, 1)).unwrap();
        assert_eq!(z.total_variation(), 0.0);
    }

    #[test]
    fn total_variation_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mesh = box_mesh(2, 4);
        let rule = SimplexRule::composite(2, 2);
        for _ in 0..10 {
            let g = random_state(&mut rng, &mesh, 2);
            let q = random_momentum(&mut rng, &mesh, 2, 1);
            let tv = reconstruct_atomic(&mesh, &g).unwrap().total_variation();
            assert!((tv - crate::spaces::norm_l1(&mesh, &g)).abs() < 1e-12);
            let tq = reconstruct_pwconstant(&mesh, &q).unwrap().total_variation();
            assert!((tq - crate::spaces::norm_l1(&mesh, &q)).abs() < 1e-12);
            let lin = reconstruct_linear_state(&mesh, &g).unwrap().total_variation(&mesh, &rule);
            assert!(lin <= crate::spaces::norm_l1(&mesh, &g) + 1e-12);
        }
    }

    #[test]
    fn sampling_examples() {
        let mesh = box_mesh(2, 3);
        let rule = SimplexRule::degree2(2);
        let c = SymMatrix::from_full(2, &[2.0, 0.5, 0.5, 1.0]).unwrap();
        for v in sample_state(&mesh, &rule, |_| c).unwrap().values() {
            assert!(v.sub(&c).norm_fro() < 1e-13);
        }
        let m1 = box_mesh(1, 2);
        let q = sample_momentum(&m1, &SimplexRule::degree2(1), |x| RectMatrix::from_row_major(1, 1, &[x[0]]).unwrap()).unwrap();
        assert!((q.values()[0].get(0, 0) - 0.25).abs() < 1e-15);
        let v0 = mesh.find_vertex(&[1.0 / 3.0, 2.0 / 3.0, 0.0], 1e-12).unwrap();
        let dirac = AtomicMeasure::scalar(2, &[([1.0 / 3.0, 2.0 / 3.0, 0.0], 3.0)]).unwrap();
        let s = sample_state_atomic(&mesh, &dirac).unwrap();
        for (v, val) in s.values().iter().enumerate() {
            let expect = if v == v0 { 3.0 / mesh.patch_volumes()[v] } else { 0.0 };
            assert!((val.get(0, 0) - expect).abs() < 1e-12);
        }
        // mass is preserved for atoms anywhere
        let off = AtomicMeasure::scalar(2, &[([0.21, 0.77, 0.0], 2.0)]).unwrap();
        let s = sample_state_atomic(&mesh, &off).unwrap();
        let mass: f64 = s.values().iter().zip(mesh.patch_volumes()).map(|(v, w)| v.get(0, 0) * w).sum();
        assert!((mass - 2.0).abs() < 1e-13);
    }

    #[test]
    fn reconstruction_sampling_adjoint_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mesh = box_mesh(2, 4);
        let rule = SimplexRule::degree2(2);
        let phi = |x: &Point| SymMatrix::from_fn(2, |i, j| (x[0] + 2.0 * x[1] * (i + j) as f64).sin());
        let g = random_state(&mut rng, &mesh, 2);
        let lin = reconstruct_linear_state(&mesh, &g).unwrap();
        let mut lhs = 0.0;
        for k in 0..mesh.num_simplices() {
            lhs += rule.integrate(&mesh, k, |x, lam| lin.evaluate_in(&mesh, k, lam).dot(&phi(x).to_rect()));
        }
        let rhs = inner(&mesh, &g, &sample_state(&mesh, &rule, phi).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        let q = random_momentum(&mut rng, &mesh, 2, 1);
        let psi = |x: &Point| RectMatrix::from_row_major(2, 1, &[x[0] * x[1], (3.0 * x[0]).cos()]).unwrap();
        let pw = reconstruct_pwconstant(&mesh, &q).unwrap();
        let mut lhs = 0.0;
        for k in 0..mesh.num_simplices() {
            lhs += rule.integrate(&mesh, k, |x, _| pw.values[k].dot(&psi(x)));
        }
        let rhs = inner(&mesh, &q, &sample_momentum(&mesh, &rule, psi).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_and_atomic_adjoints_are_close() {
        // |int Phi phi_v - |T_v| Phi(x_v)| <= C sigma |grad Phi| |T_v| with C stable
        let rule = SimplexRule::composite(2, 1);
        let mut ratios = Vec::new();
        let mut mesh = box_mesh(2, 2);
        for _ in 0..3 {
            mesh = refine_uniform(&mesh);
            let s = sample_state(&mesh, &rule, |x| SymMatrix::scalar(1, (2.0 * x[0] + x[1]).sin())).unwrap();
            let worst = (0..mesh.num_vertices())
                .map(|v| {
                    let x = mesh.vertex(v);
                    (s.values()[v].get(0, 0) - (2.0 * x[0] + x[1]).sin()).abs()
                })
                .fold(0.0f64, f64::max);
            ratios.push(worst / mesh.size().sigma);
        }
        assert!(ratios[2] <= ratios[0] * 1.5);
    }

    #[test]
    fn consistency_rates_1d_and_2d() {
        for d in 1..=2 {
            let ladder: Vec<Mesh> = [8, 16, 32].iter().map(|&c| box_mesh(d, c)).collect();
            // scalar potential with vanishing normal flux for the divergence check
            let spec = ContinuousOperatorSpec::divergence(d).unwrap();
            let phi = |x: &Point| SymMatrix::scalar(1, x[0] * x[0] + if d == 2 { x[0] * x[1] } else { 0.0 });
            let grad = |x: &Point| RectMatrix::from_fn(1, d, |_, j| if j == 0 { 2.0 * x[0] + if d == 2 { x[1] } else { 0.0 } } else { x[0] });
            let r = check_consistency_adjoint(&ladder, &spec, &phi, &grad, 4.0).unwrap();
            assert!(r.passes(0.9), "d={d} {r:?}");

            let q = |x: &Point| {
                RectMatrix::from_fn(1, d, |_, j| {
                    if d == 1 {
                        (PI * x[0]).sin()
                    } else if j == 0 {
                        (PI * x[0]).sin() * (1.0 + x[1] * x[1])
                    } else {
                        (PI * x[1]).sin() * (2.0 + x[0])
                    }
                })
            };
            let dq = |x: &Point| {
                let v = if d == 1 {
                    PI * (PI * x[0]).cos()
                } else {
                    PI * (PI * x[0]).cos() * (1.0 + x[1] * x[1]) + PI * (PI * x[1]).cos() * (2.0 + x[0])
                };
                SymMatrix::scalar(1, v)
            };
            let g = |x: &Point| SymMatrix::scalar(1, 1.5 + x[0]);
            let rsrc = |x: &Point| RectMatrix::from_row_major(1, 1, &[x[0] - 0.3]).unwrap();
            let fields = SmoothFields { g: &g, q: &q, r: &rsrc, dq: &dq };
            let rep = check_consistency_sampling(&ladder, &spec, &WeightPair::identity(1, d), &fields).unwrap();
            assert!(rep.derivation.passes(0.9), "d={d} {:?}", rep.derivation);
            assert!(rep.energy.passes(0.9), "d={d} {:?}", rep.energy);
        }
    }

    #[test]
    fn identity_potential_is_exact() {
        let ladder: Vec<Mesh> = [4, 8, 16].iter().map(|&c| box_mesh(2, c)).collect();
        let spec = ContinuousOperatorSpec::symmetric_divergence(2).unwrap();
        let r = check_consistency_adjoint(&ladder, &spec, &|_| SymMatrix::identity(2), &|_| RectMatrix::zeros(2, 1), 1.0).unwrap();
        assert!(r.errors.iter().all(|&e| e == 0.0));
        assert_eq!(r.order, f64::INFINITY);
    }

    #[test]
    fn linear_potential_gradient_has_no_defect() {
        // q = grad of a linear potential is constant, so D_sigma S_Y q matches S_X D q = 0 in the interior
        let mesh = box_mesh(2, 4);
        let spec = ContinuousOperatorSpec::divergence(2).unwrap();
        let dd = assemble_discrete_divergence(&mesh, &spec).unwrap();
        let q = sample_momentum(&mesh, &SimplexRule::degree2(2), |_| RectMatrix::from_row_major(1, 2, &[2.0, -1.0]).unwrap()).unwrap();
        let e = dd.apply_d(&q).unwrap();
        for (v, val) in e.values().iter().enumerate() {
            if !mesh.boundary_vertices().contains(&v) {
                assert!(val.norm_fro() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_divergence_rates_2d() {
        let ladder: Vec<Mesh> = [8, 16, 32].iter().map(|&c| box_mesh(2, c)).collect();
        let spec = ContinuousOperatorSpec::symmetric_divergence(2).unwrap();
        let phi = |x: &Point| SymMatrix::from_full(2, &[x[0] * x[0], x[0] * x[1], x[0] * x[1], x[1].sin()]).unwrap();
        let div = |x: &Point| RectMatrix::from_row_major(2, 1, &[3.0 * x[0], x[1] + x[1].cos()]).unwrap();
        let r = check_consistency_adjoint(&ladder, &spec, &phi, &div, 4.0).unwrap();
        assert!(r.passes(0.9), "{r:?}");

        // q vanishes on the whole boundary
        let s = |x: &Point| (PI * x[0]).sin() * (PI * x[1]).sin();
        let sx = |x: &Point| PI * (PI * x[0]).cos() * (PI * x[1]).sin();
        let sy = |x: &Point| PI * (PI * x[0]).sin() * (PI * x[1]).cos();
        let q = |x: &Point| RectMatrix::from_row_major(2, 1, &[s(x) * (1.0 + x[1]), s(x) * (2.0 + x[0])]).unwrap();
        let dq = |x: &Point| {
            let a = sx(x) * (1.0 + x[1]);
            let b = sy(x) * (2.0 + x[0]);
            let c = 0.5 * (sy(x) * (1.0 + x[1]) + s(x) + sx(x) * (2.0 + x[0]) + s(x));
            SymMatrix::from_full(2, &[a, c, c, b]).unwrap()
        };
        let g = |x: &Point| SymMatrix::from_full(2, &[1.5 + x[0], 0.2 * x[1], 0.2 * x[1], 1.0 + x[1] * x[1]]).unwrap();
        let rsrc = |x: &Point| RectMatrix::from_row_major(2, 2, &[x[0] - 0.3, 0.1, 0.2 * x[0] * x[1], 0.5]).unwrap();
        let fields = SmoothFields { g: &g, q: &q, r: &rsrc, dq: &dq };
        let rep = check_consistency_sampling(&ladder, &spec, &WeightPair::identity(2, 1), &fields).unwrap();
        assert!(rep.derivation.passes(0.9), "{:?}", rep.derivation);
        assert!(rep.energy.passes(0.9), "{:?}", rep.energy);
    }
}
