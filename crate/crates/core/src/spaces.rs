//! Vertex- and element-indexed fields, their weighted norms and pairings,
//! and time-staggered paths.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::tensor::{self, PsdMatrix, RectMatrix, SymMatrix};

/// Symmetric matrix per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteState {
    n: usize,
    values: Vec<SymMatrix>,
    psd: bool,
}

/// `n x k` matrix per simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMomentum {
    n: usize,
    k: usize,
    values: Vec<RectMatrix>,
}

/// Square (not necessarily symmetric) `n x n` matrix per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSource {
    n: usize,
    values: Vec<RectMatrix>,
}

impl DiscreteState {
    pub fn new(values: Vec<SymMatrix>) -> Result<Self> {
        let n = values.first().map_or(1, |m| m.dim());
        if values.iter().any(|m| m.dim() != n) {
            return Err(Error::Shape { expected: "uniform matrix dimension", found: n });
        }
        if values.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        Ok(DiscreteState { n, values, psd: false })
    }

    /// Validates every value as PSD (clamping round-off), returning the number of repairs.
    pub fn new_psd(values: Vec<SymMatrix>) -> Result<(Self, usize)> {
        let mut s = Self::new(values)?;
        let mut repairs = 0;
        for v in s.values.iter_mut() {
            let (p, fixed) = PsdMatrix::with_repair(*v)?;
            repairs += fixed as usize;
            *v = p.into_sym();
        }
        s.psd = true;
        Ok((s, repairs))
    }

    pub fn constant(mesh: &Mesh, value: SymMatrix) -> Self {
        DiscreteState { n: value.dim(), values: vec![value; mesh.num_vertices()], psd: false }
    }

    pub fn zeros(len: usize, n: usize) -> Self {
        DiscreteState { n, values: vec![SymMatrix::zeros(n); len], psd: true }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[SymMatrix] {
        &self.values
    }

    pub fn is_psd(&self) -> bool {
        self.psd
    }

    /// Marks the state PSD after checking it.
    pub fn certify_psd(&mut self) -> Result<usize> {
        let (s, repairs) = Self::new_psd(core::mem::take(&mut self.values))?;
        *self = s;
        Ok(repairs)
    }

    pub fn scale(&self, c: f64) -> Self {
        DiscreteState { n: self.n, values: self.values.iter().map(|m| m.scale(c)).collect(), psd: self.psd && c >= 0.0 }
    }

    /// `a * self + b * other`
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        DiscreteState {
            n: self.n,
            values: self.values.iter().zip(&other.values).map(|(x, y)| x.scale(a).axpy(b, y)).collect(),
            psd: self.psd && other.psd && a >= 0.0 && b >= 0.0,
        }
    }
}

impl DiscreteMomentum {
    pub fn new(n: usize, k: usize, values: Vec<RectMatrix>) -> Result<Self> {
        if values.iter().any(|m| m.rows() != n || m.cols() != k) {
            return Err(Error::Shape { expected: "n x k momentum values", found: n });
        }
        if values.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        Ok(DiscreteMomentum { n, k, values })
    }

    pub fn zeros(len: usize, n: usize, k: usize) -> Self {
        DiscreteMomentum { n, k, values: vec![RectMatrix::zeros(n, k); len] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[RectMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [RectMatrix] {
        &mut self.values
    }

    pub fn scale(&self, c: f64) -> Self {
        DiscreteMomentum { n: self.n, k: self.k, values: self.values.iter().map(|m| m.scale(c)).collect() }
    }

    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        DiscreteMomentum { n: self.n, k: self.k, values: self.values.iter().zip(&other.values).map(|(x, y)| x.scale(a).add(&y.scale(b))).collect() }
    }
}

impl DiscreteSource {
    pub fn new(n: usize, values: Vec<RectMatrix>) -> Result<Self> {
        if values.iter().any(|m| m.rows() != n || m.cols() != n) {
            return Err(Error::Shape { expected: "n x n source values", found: n });
        }
        if values.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        Ok(DiscreteSource { n, values })
    }

    pub fn zeros(len: usize, n: usize) -> Self {
        DiscreteSource { n, values: vec![RectMatrix::zeros(n, n); len] }
    }

    pub fn from_state(state: &DiscreteState) -> Self {
        DiscreteSource { n: state.n, values: state.values.iter().map(|m| m.to_rect()).collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[RectMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [RectMatrix] {
        &mut self.values
    }

    pub fn scale(&self, c: f64) -> Self {
        DiscreteSource { n: self.n, values: self.values.iter().map(|m| m.scale(c)).collect() }
    }

    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        DiscreteSource { n: self.n, values: self.values.iter().zip(&other.values).map(|(x, y)| x.scale(a).add(&y.scale(b))).collect() }
    }
}

/// A field whose sites carry a mesh weight (`|T_v|` or `|K|`).
pub trait Field {
    /// Site weights of this field's kind on `mesh`.
    fn weights<'m>(&self, mesh: &'m Mesh) -> &'m [f64];
    fn site_count(&self) -> usize;
    fn site_norm(&self, i: usize) -> f64;
    fn site_dot(&self, other: &Self, i: usize) -> f64;
    fn same_shape(&self, other: &Self) -> bool;
}

impl Field for DiscreteState {
    fn weights<'m>(&self, mesh: &'m Mesh) -> &'m [f64] {
        mesh.patch_volumes()
    }
    fn site_count(&self) -> usize {
        self.values.len()
    }
    fn site_norm(&self, i: usize) -> f64 {
        self.values[i].norm_fro()
    }
    fn site_dot(&self, other: &Self, i: usize) -> f64 {
        self.values[i].dot(&other.values[i])
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.values.len() == other.values.len()
    }
}

impl Field for DiscreteSource {
    fn weights<'m>(&self, mesh: &'m Mesh) -> &'m [f64] {
        mesh.patch_volumes()
    }
    fn site_count(&self) -> usize {
        self.values.len()
    }
    fn site_norm(&self, i: usize) -> f64 {
        self.values[i].norm_fro()
    }
    fn site_dot(&self, other: &Self, i: usize) -> f64 {
        self.values[i].dot(&other.values[i])
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.values.len() == other.values.len()
    }
}

impl Field for DiscreteMomentum {
    fn weights<'m>(&self, mesh: &'m Mesh) -> &'m [f64] {
        mesh.element_volumes()
    }
    fn site_count(&self) -> usize {
        self.values.len()
    }
    fn site_norm(&self, i: usize) -> f64 {
        self.values[i].norm_fro()
    }
    fn site_dot(&self, other: &Self, i: usize) -> f64 {
        self.values[i].dot(&other.values[i])
    }
    fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.k == other.k && self.values.len() == other.values.len()
    }
}

/// Weighted sum of site Frobenius norms.
pub fn norm_l1<F: Field>(mesh: &Mesh, field: &F) -> f64 {
    let w = field.weights(mesh);
    (0..field.site_count()).map(|i| w[i] * field.site_norm(i)).sum()
}

/// Largest site Frobenius norm.
pub fn norm_dual<F: Field>(field: &F) -> f64 {
    (0..field.site_count()).fold(0.0, |m, i| m.max(field.site_norm(i)))
}

/// Weighted Frobenius pairing.
pub fn inner<F: Field>(mesh: &Mesh, a: &F, b: &F) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape { expected: "fields of equal shape", found: b.site_count() });
    }
    let w = a.weights(mesh);
    if w.len() != a.site_count() {
        return Err(Error::Shape { expected: "one value per mesh site", found: a.site_count() });
    }
    Ok((0..a.site_count()).map(|i| w[i] * a.site_dot(b, i)).sum())
}

/// Orthogonal projection onto symmetric-valued fields.
pub fn project_sym(r: &DiscreteSource) -> DiscreteState {
    let values = r.values.iter().map(|m| tensor::symmetric_part(m).expect("source values are square")).collect();
    DiscreteState { n: r.n, values, psd: false }
}

/// The complementary antisymmetric part of a source field.
pub fn project_antisym(r: &DiscreteSource) -> DiscreteSource {
    let values = r.values.iter().map(|m| tensor::antisymmetric_part(m).expect("source values are square")).collect();
    DiscreteSource { n: r.n, values }
}

/// States at `t = i tau` (i = 0..=N), momenta and sources at `t = (i - 1/2) tau` (i = 1..=N).
#[derive(Clone, Debug, PartialEq)]
pub struct StaggeredPath {
    pub states: Vec<DiscreteState>,
    pub momenta: Vec<DiscreteMomentum>,
    pub sources: Vec<DiscreteSource>,
}

impl StaggeredPath {
    pub fn new(states: Vec<DiscreteState>, momenta: Vec<DiscreteMomentum>, sources: Vec<DiscreteSource>) -> Result<Self> {
        let steps = momenta.len();
        if steps == 0 || states.len() != steps + 1 || sources.len() != steps {
            return Err(Error::InvalidProblem("path needs N+1 states and N momenta and sources, N >= 1"));
        }
        Ok(StaggeredPath { states, momenta, sources })
    }

    pub fn steps(&self) -> usize {
        self.momenta.len()
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    /// `(G_{k-1} + G_k) / 2` for `k` in `1..=N`.
    pub fn midpoint_state(&self, k: usize) -> DiscreteState {
        self.states[k - 1].combine(0.5, &self.states[k], 0.5)
    }

    /// Time-reversed path: swaps endpoints and negates momenta and sources.
    pub fn reversed(&self) -> Self {
        StaggeredPath {
            states: self.states.iter().rev().cloned().collect(),
            momenta: self.momenta.iter().rev().map(|q| q.scale(-1.0)).collect(),
            sources: self.sources.iter().rev().map(|r| r.scale(-1.0)).collect(),
        }
    }
}

/// Weight matrices scaling the momentum (`lambda1`, `k x k`) and source (`lambda2`, `n x n`) terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightPair {
    lambda1: SymMatrix,
    lambda2: SymMatrix,
}

impl WeightPair {
    pub fn new(lambda1: SymMatrix, lambda2: SymMatrix) -> Result<Self> {
        let (l1, _) = PsdMatrix::with_repair(lambda1)?;
        let e2 = lambda2.eigen();
        if !lambda2.is_finite() || e2.values[0] < 1e-10 {
            return Err(Error::NotPsd { min_eig: e2.values[0], tol: 1e-10 });
        }
        Ok(WeightPair { lambda1: l1.into_sym(), lambda2 })
    }

    pub fn identity(n: usize, k: usize) -> Self {
        WeightPair { lambda1: SymMatrix::identity(k), lambda2: SymMatrix::identity(n) }
    }

    /// Scalar weights `lambda1 = a I_k`, `lambda2 = b I_n`.
    pub fn scalar(n: usize, k: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(SymMatrix::scalar(k, a), SymMatrix::scalar(n, b))
    }

    pub fn lambda1(&self) -> &SymMatrix {
        &self.lambda1
    }

    pub fn lambda2(&self) -> &SymMatrix {
        &self.lambda2
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.lambda1.scale(c), self.lambda2.scale(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_box_mesh;
    use proptest::prelude::*;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unif(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn random_source(rng: &mut ChaCha8Rng, len: usize, n: usize) -> DiscreteSource {
        let vals = (0..len).map(|_| RectMatrix::from_fn(n, n, |_, _| unif(rng))).collect();
        DiscreteSource::new(n, vals).unwrap()
    }

    #[test]
    fn norm_examples() {
        let m = generate_box_mesh(1, &[1.0], &[2]).unwrap();
        let z = DiscreteState::zeros(3, 2);
        assert_eq!(norm_l1(&m, &z), 0.0);
        assert_eq!(norm_dual(&z), 0.0);
        let id = DiscreteState::constant(&m, SymMatrix::identity(2));
        assert!((norm_l1(&m, &id) - 2f64.sqrt()).abs() < 1e-15);
        assert!((norm_l1(&m, &id.scale(-3.0)) - 3.0 * norm_l1(&m, &id)).abs() < 1e-14);
        let s = DiscreteState::new(vec![SymMatrix::scalar(1, 1.0), SymMatrix::scalar(1, -3.0), SymMatrix::scalar(1, 2.0)]).unwrap();
        assert_eq!(norm_dual(&s), 3.0);
        let one = DiscreteState::constant(&m, SymMatrix::identity(1));
        assert!((inner(&m, &one, &one).unwrap() - 1.0).abs() < 1e-15);
        assert!(inner(&m, &one, &id).is_err());
    }

    #[test]
    fn project_sym_examples() {
        let r = DiscreteSource::new(2, vec![RectMatrix::from_row_major(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap()]).unwrap();
        let p = project_sym(&r);
        assert_eq!(p.values()[0], SymMatrix::from_full(2, &[0.0, 0.5, 0.5, 0.0]).unwrap());
        let s = DiscreteSource::from_state(&p);
        assert_eq!(project_sym(&s), p);
    }

    #[test]
    fn dual_norm_attained_by_one_site_field() {
        let m = generate_box_mesh(2, &[1.0, 1.0], &[3, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_source(&mut rng, m.num_vertices(), 2);
        let (arg, best) = (0..b.len()).map(|i| (i, b.values()[i].norm_fro())).fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert_eq!(best, norm_dual(&b));
        let mut vals = vec![RectMatrix::zeros(2, 2); b.len()];
        vals[arg] = b.values()[arg].scale(1.0 / (best * m.patch_volumes()[arg]));
        let a = DiscreteSource::new(2, vals).unwrap();
        assert!((norm_l1(&m, &a) - 1.0).abs() < 1e-14);
        assert!((inner(&m, &a, &b).unwrap() - norm_dual(&b)).abs() < 1e-14);
    }

    #[test]
    fn staggered_path_shape() {
        let s = DiscreteState::zeros(3, 1);
        let q = DiscreteMomentum::zeros(2, 1, 1);
        let r = DiscreteSource::zeros(3, 1);
        assert!(StaggeredPath::new(vec![s.clone(); 3], vec![q.clone(); 2], vec![r.clone(); 2]).is_ok());
        assert!(StaggeredPath::new(vec![s; 2], vec![q; 2], vec![r; 2]).is_err());
    }

    #[test]
    fn weight_pair_requires_definite_lambda2() {
        assert!(WeightPair::scalar(2, 1, 1.0, 0.0).is_err());
        assert!(WeightPair::scalar(2, 1, 0.0, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn field_properties(seed in any::<u64>(), n in 1usize..=3, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let m = generate_box_mesh(2, &[1.0, 2.0], &[3, 2]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nv = m.num_vertices();
            let x = random_source(&mut rng, nv, n);
            let y = random_source(&mut rng, nv, n);
            let z = random_source(&mut rng, nv, n);
            // duality pairing bound
            let p = inner(&m, &x, &y).unwrap();
            prop_assert!(p.abs() <= norm_l1(&m, &x) * norm_dual(&y) + 1e-14);
            // bilinearity
            let lhs = inner(&m, &x.combine(a, &y, b), &z).unwrap();
            let rhs = a * inner(&m, &x, &z).unwrap() + b * inner(&m, &y, &z).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            // symmetric/antisymmetric parts are orthogonal and reconstruct the input
            let s = DiscreteSource::from_state(&project_sym(&x));
            let t = project_antisym(&x);
            prop_assert!(inner(&m, &s, &t).unwrap().abs() <= 1e-12);
            prop_assert!(norm_dual(&s.combine(1.0, &t, 1.0).combine(1.0, &x, -1.0)) <= 1e-15);
            // self-adjointness against symmetric fields
            let sym_y = DiscreteSource::from_state(&project_sym(&y));
            let lhs = inner(&m, &s, &sym_y).unwrap();
            let rhs = inner(&m, &x, &sym_y).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            // idempotence
            prop_assert_eq!(project_sym(&s), project_sym(&x));
        }
    }
}
