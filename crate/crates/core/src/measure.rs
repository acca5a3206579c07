//! Finite sums of weighted Dirac masses.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::tensor::SymMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub x: Point,
    /// `1 x 1` for scalar measures.
    pub m: SymMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtomicMeasure {
    dim: usize,
    atoms: Vec<Atom>,
}

impl AtomicMeasure {
    /// Validates that every mass is PSD and all masses share a size.
    pub fn new(dim: usize, atoms: Vec<Atom>) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::Unsupported("positions must have 1 to 3 coordinates"));
        }
        let n = atoms.first().map_or(1, |a| a.m.dim());
        for a in &atoms {
            if a.m.dim() != n {
                return Err(Error::Shape { expected: "uniform mass size", found: a.m.dim() });
            }
            if !a.m.is_finite() || a.x.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMatrix);
            }
            let lo = a.m.min_eigenvalue();
            if lo < -1e-12 * (1.0 + a.m.norm_fro()) {
                return Err(Error::InvalidMass(lo));
            }
        }
        Ok(AtomicMeasure { dim, atoms })
    }

    /// Scalar atoms from `(position, mass)` pairs.
    pub fn scalar(dim: usize, atoms: &[(Point, f64)]) -> Result<Self> {
        Self::new(dim, atoms.iter().map(|&(x, m)| Atom { x, m: SymMatrix::scalar(1, m) }).collect())
    }

    pub(crate) fn new_unchecked(dim: usize, atoms: Vec<Atom>) -> Self {
        AtomicMeasure { dim, atoms }
    }

    pub fn empty(dim: usize) -> Self {
        AtomicMeasure { dim, atoms: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Size of the mass matrices (1 when empty).
    pub fn n(&self) -> usize {
        self.atoms.first().map_or(1, |a| a.m.dim())
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_scalar(&self) -> bool {
        self.n() == 1
    }

    /// Scalar masses; only meaningful when `is_scalar`.
    pub fn scalar_masses(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.m.get(0, 0)).collect()
    }

    /// Sum of Frobenius norms of the masses.
    pub fn total_variation(&self) -> f64 {
        self.atoms.iter().map(|a| a.m.norm_fro()).sum()
    }

    /// Sum of traces of the masses.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.m.trace()).sum()
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        if c < 0.0 {
            return Err(Error::InvalidMass(c));
        }
        Ok(AtomicMeasure { dim: self.dim, atoms: self.atoms.iter().map(|a| Atom { x: a.x, m: a.m.scale(c) }).collect() })
    }
}
