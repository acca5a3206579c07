//! Simplex quadrature in barycentric coordinates.

use alloc::vec::Vec;

use crate::mesh::{generate_box_mesh, refine_uniform, Mesh, Point};

/// Quadrature rule on a reference simplex. Points are barycentric
/// coordinates, weights sum to one (multiply by `|K|`).
#[derive(Clone, Debug)]
pub struct SimplexRule {
    pub dim: usize,
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

impl SimplexRule {
    /// Vertices plus barycenter; exact for polynomials of degree two.
    pub fn degree2(dim: usize) -> Self {
        let d = dim as f64;
        let wv = 1.0 / ((d + 1.0) * (d + 2.0));
        let wb = (d + 1.0) / (d + 2.0);
        let mut points = Vec::with_capacity(dim + 2);
        let mut weights = Vec::with_capacity(dim + 2);
        for i in 0..=dim {
            let mut p = [0.0; 4];
            p[i] = 1.0;
            points.push(p);
            weights.push(wv);
        }
        let mut c = [0.0; 4];
        for ci in c.iter_mut().take(dim + 1) {
            *ci = 1.0 / (d + 1.0);
        }
        points.push(c);
        weights.push(wb);
        SimplexRule { dim, points, weights }
    }

    /// The degree-two rule applied on each child of `levels` red refinements.
    pub fn composite(dim: usize, levels: usize) -> Self {
        if levels == 0 {
            return Self::degree2(dim);
        }
        let mut reference = reference_simplex(dim);
        for _ in 0..levels {
            reference = refine_uniform(&reference);
        }
        let base = Self::degree2(dim);
        let total = reference.volume();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for k in 0..reference.num_simplices() {
            let share = reference.element_volumes()[k] / total;
            for (bp, &bw) in base.points.iter().zip(&base.weights) {
                let x = reference.point_from_barycentric(k, &bp[..=dim]);
                let mut lam = [0.0; 4];
                let mut s = 0.0;
                for i in 0..dim {
                    lam[i + 1] = x[i];
                    s += x[i];
                }
                lam[0] = 1.0 - s;
                points.push(lam);
                weights.push(share * bw);
            }
        }
        SimplexRule { dim, points, weights }
    }

    /// Integral of `f` over simplex `k` of `mesh`; `f` receives the point and barycentric coordinates.
    pub fn integrate(&self, mesh: &Mesh, k: usize, mut f: impl FnMut(&Point, &[f64]) -> f64) -> f64 {
        let vol = mesh.element_volumes()[k];
        let mut s = 0.0;
        for (p, &w) in self.points.iter().zip(&self.weights) {
            let x = mesh.point_from_barycentric(k, &p[..=self.dim]);
            s += w * f(&x, &p[..=self.dim]);
        }
        s * vol
    }
}

fn reference_simplex(dim: usize) -> Mesh {
    let mut vertices = Vec::with_capacity(dim + 1);
    vertices.push([0.0; 3]);
    let mut cell = [0usize; 4];
    for i in 0..dim {
        let mut p = [0.0; 3];
        p[i] = 1.0;
        vertices.push(p);
        cell[i + 1] = i + 1;
    }
    match Mesh::new(dim, vertices, alloc::vec![cell]) {
        Ok(m) => m,
        Err(_) => generate_box_mesh(dim, &[1.0; 3][..dim], &[1; 3][..dim]).expect("reference"),
    }
}
