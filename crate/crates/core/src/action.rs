//! The perspective cost `J`, the discrete actions built from it, their
//! conjugates, and the Euclidean projection onto the paraboloid set
//! `{(A, B, C) : A + B L1^2 B^T / 2 + C L2^2 C^T / 2 <= 0}`.

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::spaces::{DiscreteMomentum, DiscreteSource, DiscreteState, StaggeredPath, WeightPair};
use crate::tensor::{pseudoinverse, PsdMatrix, RectMatrix, SymMatrix, DEFAULT_RANK_TOL, MAX_DIM, PSD_TOL};

/// How numerically rank-deficient arguments are treated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangePolicy {
    /// Relative eigenvalue cut for the pseudoinverse.
    pub rank_tol: f64,
    /// Out-of-range components up to this fraction of the component norm are dropped.
    pub repair_rel: f64,
    /// Out-of-range components up to this absolute size are dropped.
    pub repair_abs: f64,
}

impl Default for RangePolicy {
    fn default() -> Self {
        RangePolicy { rank_tol: DEFAULT_RANK_TOL, repair_rel: 1e-8, repair_abs: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionValue {
    /// Finite and nonnegative, or `f64::INFINITY`.
    pub value: f64,
    pub range_violation: bool,
    /// Number of near-range components dropped before evaluation.
    pub repairs: usize,
}

impl ActionValue {
    const ZERO: ActionValue = ActionValue { value: 0.0, range_violation: false, repairs: 0 };

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }

    fn add(self, o: ActionValue) -> ActionValue {
        ActionValue { value: self.value + o.value, range_violation: self.range_violation || o.range_violation, repairs: self.repairs + o.repairs }
    }

    fn scale(self, c: f64) -> ActionValue {
        ActionValue { value: self.value * c, ..self }
    }

    const INFINITE: ActionValue = ActionValue { value: f64::INFINITY, range_violation: true, repairs: 0 };
}

/// Value of `tr(Y^T X^+ Y) / 2`, with the range test `Ran(Y) in Ran(X)`.
fn perspective(x: &SymMatrix, y: &RectMatrix, policy: &RangePolicy) -> ActionValue {
    let ynorm = y.norm_fro();
    if ynorm == 0.0 {
        return ActionValue::ZERO;
    }
    let allowed = policy.repair_rel * ynorm + policy.repair_abs;
    let n = x.dim();
    if n == 1 {
        let xv = x.get(0, 0);
        return if xv > 0.0 {
            ActionValue { value: 0.5 * ynorm * ynorm / xv, range_violation: false, repairs: 0 }
        } else if ynorm <= allowed {
            ActionValue { value: 0.0, range_violation: false, repairs: 1 }
        } else {
            ActionValue::INFINITE
        };
    }
    let e = x.eigen();
    let lmax = e.values[..n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if e.values[0] < -(PSD_TOL * lmax + policy.repair_abs) {
        return ActionValue::INFINITE;
    }
    let cut = policy.rank_tol * lmax;
    let mut value = 0.0;
    let mut outside = 0.0;
    for i in 0..n {
        let mut c2 = 0.0;
        for j in 0..y.cols() {
            let c: f64 = (0..n).map(|r| e.vectors.get(r, i) * y.get(r, j)).sum();
            c2 += c * c;
        }
        let l = e.values[i];
        if l > cut && l > 0.0 {
            value += 0.5 * c2 / l;
        } else {
            outside += c2;
        }
    }
    let outside = outside.sqrt();
    if outside == 0.0 {
        ActionValue { value, range_violation: false, repairs: 0 }
    } else if outside <= allowed {
        ActionValue { value, range_violation: false, repairs: 1 }
    } else {
        ActionValue::INFINITE
    }
}

/// `Y L^+` with the test `Ran(Y^T) in Ran(L)`. Returns `None` on a range violation.
fn weight_columns(y: &RectMatrix, l_pinv: &SymMatrix, l: &SymMatrix, policy: &RangePolicy) -> Option<RectMatrix> {
    let yw = y.mul_sym(l_pinv);
    let back = yw.mul_sym(l);
    let miss = back.sub(y).norm_fro();
    if miss <= policy.repair_rel * y.norm_fro() + policy.repair_abs + 1e-12 * y.norm_fro() {
        Some(yw)
    } else {
        None
    }
}

/// Precomputed pseudoinverses of a weight pair.
#[derive(Clone, Copy, Debug)]
pub struct ActionWeights {
    pair: WeightPair,
    l1_pinv: SymMatrix,
    l2_pinv: SymMatrix,
    identity: bool,
}

impl ActionWeights {
    pub fn new(pair: &WeightPair) -> Self {
        let l1_pinv = pseudoinverse(pair.lambda1(), DEFAULT_RANK_TOL).expect("finite weights");
        let l2_pinv = pseudoinverse(pair.lambda2(), DEFAULT_RANK_TOL).expect("finite weights");
        let identity = *pair.lambda1() == SymMatrix::identity(pair.lambda1().dim()) && *pair.lambda2() == SymMatrix::identity(pair.lambda2().dim());
        ActionWeights { pair: *pair, l1_pinv, l2_pinv, identity }
    }

    pub fn pair(&self) -> &WeightPair {
        &self.pair
    }

    /// Pointwise cost `J(x, y, z)` for these weights.
    pub fn pointwise(&self, x: &SymMatrix, y: &RectMatrix, z: &RectMatrix, policy: &RangePolicy) -> ActionValue {
        self.momentum_term(x, y, policy).add(self.source_term(x, z, policy))
    }

    fn momentum_term(&self, x: &SymMatrix, y: &RectMatrix, policy: &RangePolicy) -> ActionValue {
        if self.identity {
            return perspective(x, y, policy);
        }
        match weight_columns(y, &self.l1_pinv, self.pair.lambda1(), policy) {
            Some(yw) => perspective(x, &yw, policy),
            None => ActionValue::INFINITE,
        }
    }

    fn source_term(&self, x: &SymMatrix, z: &RectMatrix, policy: &RangePolicy) -> ActionValue {
        if self.identity {
            return perspective(x, z, policy);
        }
        match weight_columns(z, &self.l2_pinv, self.pair.lambda2(), policy) {
            Some(zw) => perspective(x, &zw, policy),
            None => ActionValue::INFINITE,
        }
    }
}

/// The pointwise cost `J(X, Y, Z)` with the default range policy.
pub fn j_lambda(x: &PsdMatrix, y: &RectMatrix, z: &RectMatrix, w: &WeightPair) -> Result<ActionValue> {
    j_lambda_with(x, y, z, w, &RangePolicy::default())
}

pub fn j_lambda_with(x: &PsdMatrix, y: &RectMatrix, z: &RectMatrix, w: &WeightPair, policy: &RangePolicy) -> Result<ActionValue> {
    let n = x.dim();
    if y.rows() != n || z.rows() != n || z.cols() != n || y.cols() != w.lambda1().dim() || w.lambda2().dim() != n {
        return Err(Error::Shape { expected: "X n x n, Y n x k, Z n x n, weights k x k and n x n", found: y.cols() });
    }
    let aw = ActionWeights::new(w);
    // Both terms share the range condition on X; combining them keeps repairs consistent.
    let m = aw.momentum_term(x.as_sym(), y, policy);
    let s = aw.source_term(x.as_sym(), z, policy);
    Ok(m.add(s))
}

fn check_fields(mesh: &Mesh, g: &DiscreteState, q: &DiscreteMomentum, r: &DiscreteSource, w: &WeightPair) -> Result<()> {
    if g.len() != mesh.num_vertices() || r.len() != mesh.num_vertices() || q.len() != mesh.num_simplices() {
        return Err(Error::Shape { expected: "fields sized to the mesh", found: g.len() });
    }
    let n = g.n();
    if q.n() != n || r.n() != n || q.k() != w.lambda1().dim() || w.lambda2().dim() != n {
        return Err(Error::Shape { expected: "consistent n and k", found: q.k() });
    }
    Ok(())
}

/// Average of the vertex values over simplex `k`.
pub fn element_average(mesh: &Mesh, g: &DiscreteState, k: usize) -> SymMatrix {
    let vs = mesh.simplex(k);
    let mut acc = SymMatrix::zeros(g.n());
    for &v in vs {
        acc = acc.add(&g.values()[v]);
    }
    acc.scale(1.0 / vs.len() as f64)
}

/// Spatial discrete action.
pub fn j_sigma(mesh: &Mesh, g: &DiscreteState, q: &DiscreteMomentum, r: &DiscreteSource, w: &WeightPair) -> Result<ActionValue> {
    j_sigma_with(mesh, g, q, r, &ActionWeights::new(w), &RangePolicy::default())
}

pub fn j_sigma_with(
    mesh: &Mesh,
    g: &DiscreteState,
    q: &DiscreteMomentum,
    r: &DiscreteSource,
    aw: &ActionWeights,
    policy: &RangePolicy,
) -> Result<ActionValue> {
    check_fields(mesh, g, q, r, aw.pair())?;
    let mut total = ActionValue::ZERO;
    for (k, qk) in q.values().iter().enumerate() {
        let avg = element_average(mesh, g, k);
        total = total.add(aw.momentum_term(&avg, qk, policy).scale(mesh.element_volumes()[k]));
    }
    for (v, rv) in r.values().iter().enumerate() {
        total = total.add(aw.source_term(&g.values()[v], rv, policy).scale(mesh.patch_volumes()[v]));
    }
    Ok(total)
}

/// Time-aggregated action over a staggered path.
pub fn j_tau_sigma(mesh: &Mesh, path: &StaggeredPath, w: &WeightPair) -> Result<ActionValue> {
    j_tau_sigma_with(mesh, path, &ActionWeights::new(w), &RangePolicy::default())
}

pub fn j_tau_sigma_with(mesh: &Mesh, path: &StaggeredPath, aw: &ActionWeights, policy: &RangePolicy) -> Result<ActionValue> {
    let tau = path.tau();
    let mut total = ActionValue::ZERO;
    for k in 1..=path.steps() {
        let mid = path.midpoint_state(k);
        let v = j_sigma_with(mesh, &mid, &path.momenta[k - 1], &path.sources[k - 1], aw, policy)?;
        total = total.add(v.scale(tau));
    }
    Ok(total)
}

/// Conjugate of the spatial action in the momentum and source arguments.
pub fn j_sigma_conjugate(mesh: &Mesh, g: &DiscreteState, u: &DiscreteMomentum, wsrc: &DiscreteSource, w: &WeightPair) -> Result<f64> {
    check_fields(mesh, g, u, wsrc, w)?;
    let mut total = 0.0;
    for (k, uk) in u.values().iter().enumerate() {
        let avg = element_average(mesh, g, k);
        let ul = uk.mul_sym(w.lambda1());
        total += 0.5 * mesh.element_volumes()[k] * ul.dot(&avg.mul_rect(&ul));
    }
    for (v, wv) in wsrc.values().iter().enumerate() {
        let wl = wv.mul_sym(w.lambda2());
        total += 0.5 * mesh.patch_volumes()[v] * wl.dot(&g.values()[v].mul_rect(&wl));
    }
    Ok(total)
}

/// A point `(A, B, C)` of the product space on which the paraboloid set lives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParaboloidPoint {
    pub a: SymMatrix,
    pub b: RectMatrix,
    pub c: RectMatrix,
}

impl ParaboloidPoint {
    pub fn distance(&self, o: &Self) -> f64 {
        let da = self.a.sub(&o.a);
        let db = self.b.sub(&o.b);
        let dc = self.c.sub(&o.c);
        (da.dot(&da) + db.dot(&db) + dc.dot(&dc)).sqrt()
    }
}

/// Largest eigenvalue of `A + B L1^2 B^T / 2 + C L2^2 C^T / 2`; nonpositive iff the point is in the set.
pub fn membership_residual(p: &ParaboloidPoint, w: &WeightPair) -> f64 {
    let m1 = w.lambda1().to_rect().matmul(&w.lambda1().to_rect());
    let m2 = w.lambda2().to_rect().matmul(&w.lambda2().to_rect());
    let bm = p.b.matmul(&m1).matmul(&p.b.transpose());
    let cm = p.c.matmul(&m2).matmul(&p.c.transpose());
    let s = p.a.to_rect().add(&bm.scale(0.5)).add(&cm.scale(0.5));
    crate::tensor::symmetric_part(&s).expect("square").max_eigenvalue()
}

pub(crate) const MAX_COLS: usize = 2 * MAX_DIM;

/// Columns `w_j` with metric weights `mu_j`, expressed in the eigenbasis of the metric.
#[derive(Clone, Copy, Debug)]
pub struct Columns {
    pub n: usize,
    pub m: usize,
    pub w: [[f64; MAX_DIM]; MAX_COLS],
    pub mu: [f64; MAX_COLS],
}

/// Outcome counters of one projection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionStats {
    pub iterations: usize,
    pub fallback: bool,
    pub interior: bool,
}

/// Solves the projection of `(a0, cols)` onto `{a + sum_j mu_j w_j w_j^T / 2 <= 0}`.
///
/// `z` carries a warm start for the internal fixed-point variable and receives the final one.
pub fn project_columns(a0: &SymMatrix, cols: &Columns, z: &mut SymMatrix) -> Result<(SymMatrix, Columns, ProjectionStats)> {
    let n = cols.n;
    let s0 = paraboloid_value(a0, cols);
    let scale = 1.0 + a0.norm_fro() + col_energy(cols);
    if n == 1 {
        let s = s0.get(0, 0);
        if s <= 0.0 {
            *z = s0;
            return Ok((*a0, *cols, ProjectionStats { interior: true, ..Default::default() }));
        }
        return Ok(project_scalar(a0.get(0, 0), cols, z, scale));
    }
    if is_nsd(&s0) {
        *z = s0;
        return Ok((*a0, *cols, ProjectionStats { interior: true, ..Default::default() }));
    }
    let tol = 1e-12 * scale;
    let mut stats = ProjectionStats::default();
    let start = if z.dim() == n && z.is_finite() && z.max_eigenvalue() > 0.0 { *z } else { s0 };
    match newton_matrix(a0, cols, start, tol, &mut stats) {
        Some(zn) => {
            *z = zn;
        }
        None => {
            stats.fallback = true;
            let zf = dual_ascent(a0, cols, tol, &mut stats).ok_or(Error::Projection { residual: f64::NAN })?;
            *z = zf;
        }
    }
    let (p, eig) = positive_part(z);
    let mut out = apply_resolvent(cols, &eig);
    let mut a = a0.sub(&p);
    // Exact membership: shift by whatever positive curvature round-off left behind.
    let viol = paraboloid_value(&a, &out).max_eigenvalue();
    if viol > 0.0 {
        a = a.sub(&SymMatrix::scalar(n, viol));
        if viol > 1e-6 * scale {
            return Err(Error::Projection { residual: viol });
        }
    }
    out.n = n;
    Ok((a, out, stats))
}

fn col_energy(cols: &Columns) -> f64 {
    (0..cols.m).map(|j| cols.mu[j] * cols.w[j][..cols.n].iter().map(|x| x * x).sum::<f64>()).sum()
}

/// `a + sum_j mu_j w_j w_j^T / 2`
fn paraboloid_value(a: &SymMatrix, cols: &Columns) -> SymMatrix {
    let n = cols.n;
    let mut s = *a;
    for j in 0..cols.m {
        let c = 0.5 * cols.mu[j];
        if c == 0.0 {
            continue;
        }
        let w = &cols.w[j];
        for r in 0..n {
            for q in r..n {
                s.set(r, q, s.get(r, q) + c * w[r] * w[q]);
            }
        }
    }
    s
}

fn is_nsd(s: &SymMatrix) -> bool {
    match s.dim() {
        1 => s.get(0, 0) <= 0.0,
        2 => {
            let (p, q, r) = (s.get(0, 0), s.get(0, 1), s.get(1, 1));
            p <= 0.0 && r <= 0.0 && p * r - q * q >= 0.0
        }
        _ => s.max_eigenvalue() <= 0.0,
    }
}

fn project_scalar(a0: f64, cols: &Columns, z: &mut SymMatrix, scale: f64) -> (SymMatrix, Columns, ProjectionStats) {
    let m = cols.m;
    let phi = |p: f64| -> (f64, f64) {
        let mut f = a0 - p;
        let mut df = -1.0;
        for j in 0..m {
            let mu = cols.mu[j];
            let w2 = cols.w[j][0] * cols.w[j][0];
            let den = 1.0 + mu * p;
            f += 0.5 * mu * w2 / (den * den);
            df -= mu * mu * w2 / (den * den * den);
        }
        (f, df)
    };
    let (f0, _) = phi(0.0);
    let mut lo = 0.0;
    let mut hi = f0;
    let mut p = if z.dim() == 1 && z.get(0, 0) > 0.0 && z.get(0, 0) < hi { z.get(0, 0) } else { 0.0 };
    let tol = 1e-15 * scale;
    let mut stats = ProjectionStats::default();
    for it in 0..200 {
        stats.iterations = it + 1;
        let (f, df) = phi(p);
        if f > 0.0 {
            lo = p;
        } else {
            hi = p;
        }
        if f.abs() <= tol || hi - lo <= 1e-16 * (1.0 + hi) {
            break;
        }
        let step = p - f / df;
        p = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
    }
    *z = SymMatrix::scalar(1, p);
    let mut out = *cols;
    for j in 0..m {
        out.w[j][0] = cols.w[j][0] / (1.0 + cols.mu[j] * p);
    }
    let mut a = a0 - p;
    let s = paraboloid_value(&SymMatrix::scalar(1, a), &out).get(0, 0);
    if s > 0.0 {
        a -= s;
    }
    (SymMatrix::scalar(1, a), out, stats)
}

/// Positive part `[z]_+` together with the eigendecomposition of `z`.
fn positive_part(z: &SymMatrix) -> (SymMatrix, crate::tensor::Eigen) {
    let e = z.eigen();
    let n = z.dim();
    let mut vals = [0.0; MAX_DIM];
    for i in 0..n {
        vals[i] = e.values[i].max(0.0);
    }
    (e.recompose(&vals[..n]), e)
}

/// `b_j = (I + mu_j P)^{-1} w_j` with `P = [z]_+` given through the eigenpairs of `z`.
fn apply_resolvent(cols: &Columns, eig: &crate::tensor::Eigen) -> Columns {
    let n = cols.n;
    let mut out = *cols;
    for j in 0..cols.m {
        let mu = cols.mu[j];
        let w = &cols.w[j];
        let mut b = [0.0; MAX_DIM];
        for i in 0..n {
            let pi = eig.values[i].max(0.0);
            let c: f64 = (0..n).map(|r| eig.vectors.get(r, i) * w[r]).sum::<f64>() / (1.0 + mu * pi);
            for r in 0..n {
                b[r] += c * eig.vectors.get(r, i);
            }
        }
        out.w[j] = b;
    }
    out
}

/// Fixed-point map `z -> a0 + sum_j mu_j b_j b_j^T / 2` with `b_j` from `[z]_+`.
fn fixed_point_map(a0: &SymMatrix, cols: &Columns, z: &SymMatrix) -> SymMatrix {
    let n = cols.n;
    let e = z.eigen();
    let v = &e.vectors;
    let mut out = *a0;
    for j in 0..cols.m {
        let mu = cols.mu[j];
        if mu == 0.0 {
            continue;
        }
        let w = &cols.w[j];
        let mut b = [0.0; MAX_DIM];
        for i in 0..n {
            let c: f64 = (0..n).map(|r| v.get(r, i) * w[r]).sum::<f64>() / (1.0 + mu * e.values[i].max(0.0));
            for (r, br) in b.iter_mut().enumerate().take(n) {
                *br += c * v.get(r, i);
            }
        }
        for r in 0..n {
            for q in r..n {
                out.set(r, q, out.get(r, q) + 0.5 * mu * b[r] * b[q]);
            }
        }
    }
    out
}

/// Newton direction for `T(z) - z = 0` together with the residual norm at `z`.
///
/// Everything is formed in the eigenbasis of `z`, where the derivative of the
/// positive part acts entrywise through divided differences of the spectrum.
fn newton_direction(a0: &SymMatrix, cols: &Columns, z: &SymMatrix) -> (f64, Option<SymMatrix>) {
    let n = cols.n;
    let s = n * (n + 1) / 2;
    let e = z.eigen();
    let v = &e.vectors;
    let lam = e.values;
    let mut vm = [[0.0; MAX_DIM]; MAX_DIM];
    for (r, row) in vm.iter_mut().enumerate().take(n) {
        for (i, x) in row.iter_mut().enumerate().take(n) {
            *x = v.get(r, i);
        }
    }
    let mut gamma = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..n {
        for k in 0..n {
            let (a, b) = (lam[i], lam[k]);
            gamma[i][k] = if a != b {
                (a.max(0.0) - b.max(0.0)) / (a - b)
            } else if a > 0.0 {
                1.0
            } else {
                0.0
            };
        }
    }
    let mut bt = [[0.0; MAX_DIM]; MAX_COLS];
    let mut rt = [[0.0; MAX_DIM]; MAX_COLS];
    for j in 0..cols.m {
        for i in 0..n {
            rt[j][i] = 1.0 / (1.0 + cols.mu[j] * lam[i].max(0.0));
            bt[j][i] = rt[j][i] * (0..n).map(|r| vm[r][i] * cols.w[j][r]).sum::<f64>();
        }
    }
    // F = V^T a0 V + sum_j mu_j bt bt^T / 2 - diag(lam)
    let mut av = [[0.0; MAX_DIM]; MAX_DIM];
    for r in 0..n {
        for k in 0..n {
            av[r][k] = (0..n).map(|c| a0.get(r, c) * vm[c][k]).sum();
        }
    }
    let mut f = SymMatrix::zeros(n);
    for i in 0..n {
        for k in i..n {
            let mut x: f64 = (0..n).map(|r| vm[r][i] * av[r][k]).sum();
            for j in 0..cols.m {
                x += 0.5 * cols.mu[j] * bt[j][i] * bt[j][k];
            }
            if i == k {
                x -= lam[i];
            }
            f.set(i, k, x);
        }
    }
    let rn = f.norm_fro();
    let mut jac = [[0.0; 10]; 10];
    let mut p = 0;
    for a in 0..n {
        for b in a..n {
            let c = if a == b { 1.0 } else { core::f64::consts::FRAC_1_SQRT_2 };
            let mut dt = SymMatrix::zeros(n);
            for j in 0..cols.m {
                let mu = cols.mu[j];
                if mu == 0.0 {
                    continue;
                }
                // dP bt, with dP = gamma_ab c (e_a e_b^T + e_b e_a^T) (halved on the diagonal)
                let mut db = [0.0; MAX_DIM];
                if a == b {
                    db[a] = -mu * rt[j][a] * gamma[a][a] * bt[j][a];
                } else {
                    db[a] = -mu * rt[j][a] * gamma[a][b] * c * bt[j][b];
                    db[b] = -mu * rt[j][b] * gamma[a][b] * c * bt[j][a];
                }
                for i in 0..n {
                    for k in i..n {
                        dt.set(i, k, dt.get(i, k) + 0.5 * mu * (db[i] * bt[j][k] + bt[j][i] * db[k]));
                    }
                }
            }
            dt.set(a, b, dt.get(a, b) - c);
            let col = svec(&dt);
            for (q, row) in jac.iter_mut().enumerate().take(s) {
                row[p] = col[q];
            }
            p += 1;
        }
    }
    let mut rhs = svec(&f);
    for x in rhs.iter_mut() {
        *x = -*x;
    }
    if !solve_dense(s, &mut jac, &mut rhs) {
        return (rn, None);
    }
    let dzt = unsvec(n, &rhs[..s]);
    let dz = SymMatrix::from_fn(n, |r, q| {
        let mut acc = 0.0;
        for i in 0..n {
            let t: f64 = (0..n).map(|k| dzt.get(i, k) * vm[q][k]).sum();
            acc += vm[r][i] * t;
        }
        acc
    });
    (rn, Some(dz))
}

pub(crate) fn svec(m: &SymMatrix) -> [f64; 10] {
    let n = m.dim();
    let mut out = [0.0; 10];
    let mut c = 0;
    for i in 0..n {
        for j in i..n {
            out[c] = if i == j { m.get(i, i) } else { core::f64::consts::SQRT_2 * m.get(i, j) };
            c += 1;
        }
    }
    out
}

pub(crate) fn unsvec(n: usize, v: &[f64]) -> SymMatrix {
    let mut m = SymMatrix::zeros(n);
    let mut c = 0;
    for i in 0..n {
        for j in i..n {
            m.set(i, j, if i == j { v[c] } else { v[c] * core::f64::consts::FRAC_1_SQRT_2 });
            c += 1;
        }
    }
    m
}

/// Gaussian elimination with partial pivoting on a small dense system.
pub(crate) fn solve_dense(s: usize, a: &mut [[f64; 10]; 10], b: &mut [f64; 10]) -> bool {
    for col in 0..s {
        let piv = (col..s).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        if a[piv][col].abs() < 1e-300 {
            return false;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..s {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..s {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    for col in (0..s).rev() {
        let mut v = b[col];
        for c in col + 1..s {
            v -= a[col][c] * b[c];
        }
        b[col] = v / a[col][col];
    }
    b[..s].iter().all(|x| x.is_finite())
}

fn newton_matrix(a0: &SymMatrix, cols: &Columns, start: SymMatrix, tol: f64, stats: &mut ProjectionStats) -> Option<SymMatrix> {
    let mut z = start;
    let (mut rn, mut dir) = newton_direction(a0, cols, &z);
    for it in 0..60 {
        stats.iterations = it + 1;
        if rn <= tol {
            return Some(z);
        }
        let dz = dir?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let zt = z.axpy(alpha, &dz);
            let rtn = fixed_point_map(a0, cols, &zt).sub(&zt).norm_fro();
            if rtn <= (1.0 - 1e-4 * alpha) * rn || rtn <= tol {
                z = zt;
                rn = rtn;
                if rn > tol {
                    (rn, dir) = newton_direction(a0, cols, &z);
                }
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    (rn <= tol * 1e3).then_some(z)
}

/// Accelerated projected gradient ascent on the dual variable `P >= 0`.
fn dual_ascent(a0: &SymMatrix, cols: &Columns, tol: f64, stats: &mut ProjectionStats) -> Option<SymMatrix> {
    let n = cols.n;
    let lip = 1.0 + (0..cols.m).map(|j| cols.mu[j] * cols.mu[j] * cols.w[j][..n].iter().map(|x| x * x).sum::<f64>()).sum::<f64>();
    let step = 1.0 / lip;
    let grad = |p: &SymMatrix| -> SymMatrix {
        // P is PSD here, so it equals its own positive part.
        fixed_point_map(a0, cols, p).sub(p)
    };
    let mut p = crate::tensor::project_psd(&paraboloid_value(a0, cols)).0.into_sym().scale(0.5);
    let mut y = p;
    let mut t = 1.0f64;
    for it in 0..200_000 {
        stats.iterations += 1;
        let g = grad(&y);
        let pn = crate::tensor::project_psd(&y.axpy(step, &g)).0.into_sym();
        let change = pn.sub(&p).norm_fro();
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = pn.axpy((t - 1.0) / tn, &pn.sub(&p));
        p = pn;
        t = tn;
        if it % 50 == 49 {
            // restart the momentum periodically; the problem is strongly concave
            y = p;
            t = 1.0;
        }
        if change <= tol * step {
            // z with [z]_+ = P and the right negative part: z = fixed point value
            let zf = fixed_point_map(a0, cols, &p);
            let (pp, _) = positive_part(&zf);
            if pp.sub(&p).norm_fro() <= 1e3 * tol {
                return Some(zf);
            }
        }
    }
    None
}

/// Euclidean projection engine for one weight pair.
#[derive(Clone, Copy, Debug)]
pub struct ParaboloidProjector {
    n: usize,
    k: usize,
    u1: RectMatrix,
    mu1: [f64; MAX_DIM],
    u2: RectMatrix,
    mu2: [f64; MAX_DIM],
}

impl ParaboloidProjector {
    pub fn new(w: &WeightPair) -> Self {
        let e1 = w.lambda1().eigen();
        let e2 = w.lambda2().eigen();
        let mut mu1 = [0.0; MAX_DIM];
        let mut mu2 = [0.0; MAX_DIM];
        for i in 0..w.lambda1().dim() {
            mu1[i] = e1.values[i] * e1.values[i];
        }
        for i in 0..w.lambda2().dim() {
            mu2[i] = e2.values[i] * e2.values[i];
        }
        ParaboloidProjector { n: w.lambda2().dim(), k: w.lambda1().dim(), u1: e1.vectors, mu1, u2: e2.vectors, mu2 }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Columns of `B U1` with weights from `L1^2`.
    pub fn momentum_columns(&self, b: &RectMatrix) -> Columns {
        Self::columns(self.n, b, &self.u1, &self.mu1, self.k)
    }

    /// Columns of `C U2` with weights from `L2^2`.
    pub fn source_columns(&self, c: &RectMatrix) -> Columns {
        Self::columns(self.n, c, &self.u2, &self.mu2, self.n)
    }

    fn columns(n: usize, b: &RectMatrix, u: &RectMatrix, mu: &[f64; MAX_DIM], m: usize) -> Columns {
        let bu = b.matmul(u);
        let mut w = [[0.0; MAX_DIM]; MAX_COLS];
        let mut mus = [0.0; MAX_COLS];
        for j in 0..m {
            for r in 0..n {
                w[j][r] = bu.get(r, j);
            }
            mus[j] = mu[j];
        }
        Columns { n, m, w, mu: mus }
    }

    /// Maps projected columns back from the eigenbasis.
    pub fn momentum_from_columns(&self, cols: &Columns) -> RectMatrix {
        Self::uncolumns(self.n, cols, &self.u1, 0, self.k)
    }

    pub fn source_from_columns(&self, cols: &Columns, offset: usize) -> RectMatrix {
        Self::uncolumns(self.n, cols, &self.u2, offset, self.n)
    }

    fn uncolumns(n: usize, cols: &Columns, u: &RectMatrix, offset: usize, m: usize) -> RectMatrix {
        let bu = RectMatrix::from_fn(n, m, |r, j| cols.w[offset + j][r]);
        bu.matmul(&u.transpose())
    }

    /// Projection of a full point `(A, B, C)`.
    pub fn project(&self, p: &ParaboloidPoint) -> Result<ParaboloidPoint> {
        if p.a.dim() != self.n || p.b.rows() != self.n || p.b.cols() != self.k || p.c.rows() != self.n || p.c.cols() != self.n {
            return Err(Error::Shape { expected: "A n x n, B n x k, C n x n", found: p.b.cols() });
        }
        if !(p.a.is_finite() && p.b.is_finite() && p.c.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        let cb = self.momentum_columns(&p.b);
        let cc = self.source_columns(&p.c);
        let mut cols = cb;
        for j in 0..cc.m {
            cols.w[cb.m + j] = cc.w[j];
            cols.mu[cb.m + j] = cc.mu[j];
        }
        cols.m = cb.m + cc.m;
        let mut z = SymMatrix::zeros(self.n);
        let (a, out, _) = project_columns(&p.a, &cols, &mut z)?;
        Ok(ParaboloidPoint { a, b: self.momentum_from_columns(&out), c: self.source_from_columns(&out, cb.m) })
    }
}

/// Euclidean projection onto the paraboloid set of the weight pair `w`.
pub fn project_onto_paraboloid(p: &ParaboloidPoint, w: &WeightPair) -> Result<ParaboloidPoint> {
    ParaboloidProjector::new(w).project(p)
}

/// Proximal map of `gamma J` through the Moreau identity.
pub fn prox_j(p: &ParaboloidPoint, gamma: f64, w: &WeightPair) -> Result<ParaboloidPoint> {
    let inv = 1.0 / gamma;
    let scaled = ParaboloidPoint { a: p.a.scale(inv), b: p.b.scale(inv), c: p.c.scale(inv) };
    let pr = project_onto_paraboloid(&scaled, w)?;
    if pr == scaled {
        let n = p.a.dim();
        return Ok(ParaboloidPoint { a: SymMatrix::zeros(n), b: RectMatrix::zeros(n, p.b.cols()), c: RectMatrix::zeros(n, n) });
    }
    Ok(ParaboloidPoint { a: p.a.sub(&pr.a.scale(gamma)), b: p.b.sub(&pr.b.scale(gamma)), c: p.c.sub(&pr.c.scale(gamma)) })
}
