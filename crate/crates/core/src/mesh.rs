//! Conforming simplicial meshes of intervals, rectangles and boxes.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Coordinates are padded to three components; unused ones are zero.
pub type Point = [f64; 3];

/// Simplex vertex indices; only the first `dim + 1` entries are meaningful.
pub type Cell = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    dim: usize,
    vertices: Vec<Point>,
    simplices: Vec<Cell>,
    boundary_vertices: Vec<usize>,
    element_volumes: Vec<f64>,
    patch_volumes: Vec<f64>,
    gradients: Vec<[Point; 4]>,
    vertex_elements: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshSize {
    pub sigma: f64,
    pub shape_ratio: f64,
}

fn factorial(d: usize) -> f64 {
    (1..=d).map(|i| i as f64).product()
}

/// Inverse of a `d x d` matrix (row-major in `m`), together with its determinant.
fn small_inverse(d: usize, m: &[[f64; 3]; 3]) -> ([[f64; 3]; 3], f64) {
    let mut inv = [[0.0; 3]; 3];
    match d {
        1 => {
            let det = m[0][0];
            inv[0][0] = 1.0 / det;
            (inv, det)
        }
        2 => {
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            inv[0][0] = m[1][1] / det;
            inv[0][1] = -m[0][1] / det;
            inv[1][0] = -m[1][0] / det;
            inv[1][1] = m[0][0] / det;
            (inv, det)
        }
        _ => {
            let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
            let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
            let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
            let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
            inv[0][0] = c00 / det;
            inv[1][0] = c01 / det;
            inv[2][0] = c02 / det;
            inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
            inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
            inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
            inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
            inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
            inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
            (inv, det)
        }
    }
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl Mesh {
    /// Builds a mesh and its geometric data. Fails on degenerate simplices or bad indices.
    pub fn new(dim: usize, vertices: Vec<Point>, simplices: Vec<Cell>) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Unsupported("mesh dimension must be 1, 2 or 3"));
        }
        if simplices.is_empty() {
            return Err(Error::InvalidProblem("mesh has no simplices"));
        }
        let nv = vertices.len();
        if vertices.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numerical("non-finite vertex coordinate"));
        }
        let mut element_volumes = Vec::with_capacity(simplices.len());
        let mut gradients = Vec::with_capacity(simplices.len());
        let mut patch_volumes = vec![0.0; nv];
        let mut vertex_elements = vec![Vec::new(); nv];
        for (k, cell) in simplices.iter().enumerate() {
            for &v in &cell[..=dim] {
                if v >= nv {
                    return Err(Error::IndexOutOfRange { index: v, len: nv });
                }
            }
            let p0 = vertices[cell[0]];
            let mut e = [[0.0; 3]; 3];
            for c in 0..dim {
                let pc = vertices[cell[c + 1]];
                for r in 0..dim {
                    e[r][c] = pc[r] - p0[r];
                }
            }
            let (inv, det) = small_inverse(dim, &e);
            let vol = det.abs() / factorial(dim);
            let diam = Self::cell_diameter(dim, &vertices, cell);
            // NaN coordinates land here too
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(vol > 1e-14 * diam.powi(dim as i32)) {
                return Err(Error::DegenerateSimplex(k));
            }
            let mut g = [[0.0; 3]; 4];
            for i in 0..dim {
                for j in 0..dim {
                    g[i + 1][j] = inv[i][j];
                    g[0][j] -= inv[i][j];
                }
            }
            element_volumes.push(vol);
            gradients.push(g);
            for &v in &cell[..=dim] {
                patch_volumes[v] += vol;
                vertex_elements[v].push(k);
            }
        }
        let share = 1.0 / (dim as f64 + 1.0);
        for p in patch_volumes.iter_mut() {
            *p *= share;
        }
        let boundary_vertices = Self::find_boundary(dim, nv, &simplices);
        Ok(Mesh { dim, vertices, simplices, boundary_vertices, element_volumes, patch_volumes, gradients, vertex_elements })
    }

    fn cell_diameter(dim: usize, vertices: &[Point], cell: &Cell) -> f64 {
        let mut d = 0.0f64;
        for a in 0..=dim {
            for b in a + 1..=dim {
                d = d.max(dist(&vertices[cell[a]], &vertices[cell[b]]));
            }
        }
        d
    }

    fn find_boundary(dim: usize, nv: usize, simplices: &[Cell]) -> Vec<usize> {
        let mut faces: BTreeMap<[usize; 3], usize> = BTreeMap::new();
        for cell in simplices {
            for skip in 0..=dim {
                let mut f = [usize::MAX; 3];
                let mut c = 0;
                for (i, &v) in cell[..=dim].iter().enumerate() {
                    if i != skip {
                        f[c] = v;
                        c += 1;
                    }
                }
                f[..dim].sort_unstable();
                *faces.entry(f).or_insert(0) += 1;
            }
        }
        let mut on = vec![false; nv];
        for (f, count) in faces {
            if count == 1 {
                for &v in &f[..dim] {
                    on[v] = true;
                }
            }
        }
        (0..nv).filter(|&v| on[v]).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_simplices(&self) -> usize {
        self.simplices.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> &Point {
        &self.vertices[v]
    }

    pub fn simplices(&self) -> &[Cell] {
        &self.simplices
    }

    /// The `dim + 1` vertex indices of simplex `k`.
    pub fn simplex(&self, k: usize) -> &[usize] {
        &self.simplices[k][..=self.dim]
    }

    pub fn boundary_vertices(&self) -> &[usize] {
        &self.boundary_vertices
    }

    pub fn element_volumes(&self) -> &[f64] {
        &self.element_volumes
    }

    pub fn patch_volumes(&self) -> &[f64] {
        &self.patch_volumes
    }

    /// Gradients of the hat functions of the vertices of simplex `k`, in local order.
    pub fn hat_gradients(&self, k: usize) -> &[Point] {
        &self.gradients[k][..=self.dim]
    }

    /// Simplices containing vertex `v`.
    pub fn vertex_elements(&self, v: usize) -> &[usize] {
        &self.vertex_elements[v]
    }

    pub fn volume(&self) -> f64 {
        self.element_volumes.iter().sum()
    }

    pub fn diameter(&self, k: usize) -> f64 {
        Self::cell_diameter(self.dim, &self.vertices, &self.simplices[k])
    }

    pub fn size(&self) -> MeshSize {
        let mut sigma = 0.0f64;
        let mut shape_ratio = 0.0f64;
        for k in 0..self.num_simplices() {
            let h = self.diameter(k);
            sigma = sigma.max(h);
            shape_ratio = shape_ratio.max(h.powi(self.dim as i32) / self.element_volumes[k]);
        }
        MeshSize { sigma, shape_ratio }
    }

    pub fn barycenter(&self, k: usize) -> Point {
        let mut c = [0.0; 3];
        let w = 1.0 / (self.dim as f64 + 1.0);
        for &v in self.simplex(k) {
            for (ci, xi) in c.iter_mut().zip(self.vertices[v].iter()) {
                *ci += w * xi;
            }
        }
        c
    }

    /// Cartesian point with barycentric coordinates `lambda` in simplex `k`.
    pub fn point_from_barycentric(&self, k: usize, lambda: &[f64]) -> Point {
        let mut p = [0.0; 3];
        for (&v, &l) in self.simplex(k).iter().zip(lambda) {
            for (pi, xi) in p.iter_mut().zip(self.vertices[v].iter()) {
                *pi += l * xi;
            }
        }
        p
    }

    /// Barycentric coordinates of `x` relative to simplex `k`.
    pub fn barycentric(&self, k: usize, x: &Point) -> [f64; 4] {
        let cell = self.simplex(k);
        let g = &self.gradients[k];
        let p0 = &self.vertices[cell[0]];
        let mut lam = [0.0; 4];
        let mut s = 0.0;
        for i in 1..=self.dim {
            let mut l = 0.0;
            for j in 0..self.dim {
                l += g[i][j] * (x[j] - p0[j]);
            }
            lam[i] = l;
            s += l;
        }
        lam[0] = 1.0 - s;
        lam
    }

    /// First simplex containing `x` (with a small tolerance) and its barycentric coordinates.
    pub fn locate(&self, x: &Point) -> Option<(usize, [f64; 4])> {
        (0..self.num_simplices()).find_map(|k| {
            let l = self.barycentric(k, x);
            l[..=self.dim].iter().all(|&li| li >= -1e-12).then_some((k, l))
        })
    }

    /// Index of a vertex at `x` (within `tol`), if any.
    pub fn find_vertex(&self, x: &Point, tol: f64) -> Option<usize> {
        self.vertices.iter().position(|p| dist(p, x) <= tol)
    }

    /// Value of the hat function of `v` at `x`.
    pub fn hat_value(&self, v: usize, x: &Point) -> f64 {
        match self.locate(x) {
            Some((k, lam)) => self.simplex(k).iter().position(|&w| w == v).map_or(0.0, |i| lam[i].clamp(0.0, 1.0)),
            None => 0.0,
        }
    }
}

/// Structured mesh of `[0, L_1] x ... x [0, L_d]`.
///
/// Cells of the tensor grid are split along the main diagonal (Kuhn split):
/// two triangles per square, six tetrahedra per cube.
pub fn generate_box_mesh(d: usize, lengths: &[f64], cells_per_axis: &[usize]) -> Result<Mesh> {
    if !(1..=3).contains(&d) {
        return Err(Error::Unsupported("box meshes exist for d = 1, 2, 3"));
    }
    if lengths.len() != d || cells_per_axis.len() != d {
        return Err(Error::Shape { expected: "one length and cell count per axis", found: lengths.len() });
    }
    if lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) || cells_per_axis.contains(&0) {
        return Err(Error::InvalidProblem("box lengths must be positive and cell counts at least 1"));
    }
    let mut n = [1usize; 3];
    let mut h = [0.0; 3];
    for a in 0..d {
        n[a] = cells_per_axis[a];
        h[a] = lengths[a] / n[a] as f64;
    }
    let stride = [1, n[0] + 1, (n[0] + 1) * (n[1] + 1)];
    let counts = [n[0] + 1, if d > 1 { n[1] + 1 } else { 1 }, if d > 2 { n[2] + 1 } else { 1 }];
    let mut vertices = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let coord = |a: usize, idx: usize| {
                    if idx == n[a] {
                        lengths[a]
                    } else {
                        idx as f64 * h[a]
                    }
                };
                let mut p = [0.0; 3];
                p[0] = coord(0, i);
                if d > 1 {
                    p[1] = coord(1, j);
                }
                if d > 2 {
                    p[2] = coord(2, k);
                }
                vertices.push(p);
            }
        }
    }
    let perms: &[&[usize]] = match d {
        1 => &[&[0]],
        2 => &[&[0, 1], &[1, 0]],
        _ => &[&[0, 1, 2], &[0, 2, 1], &[1, 0, 2], &[1, 2, 0], &[2, 0, 1], &[2, 1, 0]],
    };
    let mut simplices = Vec::new();
    let cells = [n[0], if d > 1 { n[1] } else { 1 }, if d > 2 { n[2] } else { 1 }];
    for k in 0..cells[2] {
        for j in 0..cells[1] {
            for i in 0..cells[0] {
                let base = i * stride[0] + j * stride[1] + k * stride[2];
                for perm in perms {
                    // Walk from the lower corner to the upper one, one axis at a time;
                    // indices increase along the walk.
                    let mut cell = [0usize; 4];
                    let mut cur = base;
                    cell[0] = cur;
                    for (step, &axis) in perm.iter().enumerate() {
                        cur += stride[axis];
                        cell[step + 1] = cur;
                    }
                    simplices.push(cell);
                }
            }
        }
    }
    Mesh::new(d, vertices, simplices)
}

/// Red refinement: each simplex is split into `2^d` children through edge midpoints.
///
/// In 3D the children follow Bey's ordered scheme, so Kuhn simplices produce Kuhn
/// simplices and diameters halve exactly.
pub fn refine_uniform(mesh: &Mesh) -> Mesh {
    let d = mesh.dim();
    let mut vertices = mesh.vertices.clone();
    let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point>| -> usize {
        let key = if a < b { (a, b) } else { (b, a) };
        *midpoints.entry(key).or_insert_with(|| {
            let (pa, pb) = (vertices[a], vertices[b]);
            vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]), 0.5 * (pa[2] + pb[2])]);
            vertices.len() - 1
        })
    };
    let mut simplices = Vec::with_capacity(mesh.num_simplices() << d);
    for cell in mesh.simplices() {
        match d {
            1 => {
                let m = mid(cell[0], cell[1], &mut vertices);
                simplices.push([cell[0], m, 0, 0]);
                simplices.push([m, cell[1], 0, 0]);
            }
            2 => {
                let [x0, x1, x2, _] = *cell;
                let m01 = mid(x0, x1, &mut vertices);
                let m02 = mid(x0, x2, &mut vertices);
                let m12 = mid(x1, x2, &mut vertices);
                for mut c in [[x0, m01, m02, 0], [m01, x1, m12, 0], [m02, m12, x2, 0], [m01, m12, m02, 0]] {
                    c[..3].sort_unstable();
                    simplices.push(c);
                }
            }
            _ => {
                let [x0, x1, x2, x3] = *cell;
                let x01 = mid(x0, x1, &mut vertices);
                let x02 = mid(x0, x2, &mut vertices);
                let x03 = mid(x0, x3, &mut vertices);
                let x12 = mid(x1, x2, &mut vertices);
                let x13 = mid(x1, x3, &mut vertices);
                let x23 = mid(x2, x3, &mut vertices);
                simplices.extend_from_slice(&[
                    [x0, x01, x02, x03],
                    [x01, x1, x12, x13],
                    [x02, x12, x2, x23],
                    [x03, x13, x23, x3],
                    [x01, x02, x03, x13],
                    [x01, x02, x12, x13],
                    [x02, x03, x13, x23],
                    [x02, x12, x13, x23],
                ]);
            }
        }
    }
    Mesh::new(d, vertices, simplices).expect("refinement of a valid mesh is valid")
}

/// `|T_v|`, the integral of the hat function of `v`.
pub fn nodal_basis_integral(mesh: &Mesh, v: usize) -> Result<f64> {
    mesh.patch_volumes.get(v).copied().ok_or(Error::IndexOutOfRange { index: v, len: mesh.num_vertices() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn interval_two_cells() {
        let m = generate_box_mesh(1, &[1.0], &[2]).unwrap();
        assert_eq!(m.num_vertices(), 3);
        let xs: Vec<f64> = m.vertices().iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0]);
        assert_eq!(m.element_volumes(), &[0.5, 0.5]);
        assert_eq!(m.patch_volumes(), &[0.25, 0.5, 0.25]);
        assert_eq!(nodal_basis_integral(&m, 1).unwrap(), 0.5);
        assert_eq!(nodal_basis_integral(&m, 0).unwrap(), 0.25);
        assert!(nodal_basis_integral(&m, 3).is_err());
        assert_eq!(m.boundary_vertices(), &[0, 2]);
    }

    #[test]
    fn interval_one_cell_symmetric() {
        let m = generate_box_mesh(1, &[1.0], &[1]).unwrap();
        assert_eq!(m.patch_volumes(), &[0.5, 0.5]);
    }

    #[test]
    fn unit_square_one_cell() {
        let m = generate_box_mesh(2, &[1.0, 1.0], &[1, 1]).unwrap();
        assert_eq!(m.num_simplices(), 2);
        assert!(m.element_volumes().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let total: f64 = m.patch_volumes().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
        let r = refine_uniform(&m);
        assert_eq!(r.num_simplices(), 8);
        assert!((r.volume() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unsupported_dimension() {
        assert!(matches!(generate_box_mesh(4, &[1.0; 4], &[1; 4]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn degenerate_simplex_rejected() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(matches!(Mesh::new(2, v, vec![[0, 1, 2, 0]]), Err(Error::DegenerateSimplex(0))));
    }

    #[test]
    fn partition_of_unity_and_patch_identity() {
        for (d, cells) in [(1, vec![5]), (2, vec![3, 4]), (3, vec![2, 2, 3])] {
            let lengths: Vec<f64> = (0..d).map(|a| 1.0 + 0.5 * a as f64).collect();
            let m = generate_box_mesh(d, &lengths, &cells).unwrap();
            let omega: f64 = lengths.iter().product();
            let total: f64 = m.patch_volumes().iter().sum();
            assert!(rel(total, omega) < 1e-12);
            for k in 0..m.num_simplices() {
                let g = m.hat_gradients(k);
                for c in 0..3 {
                    let s: f64 = g.iter().map(|gi| gi[c]).sum();
                    assert!(s.abs() < 1e-12);
                }
                let b = m.barycenter(k);
                let lam = m.barycentric(k, &b);
                let s: f64 = lam[..=d].iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
                // gradient of each hat function reproduces its nodal values
                for (i, &v) in m.simplex(k).iter().enumerate() {
                    for (j, &w) in m.simplex(k).iter().enumerate() {
                        let p = m.vertex(w);
                        let q = m.vertex(m.simplex(k)[0]);
                        let mut val = if i == 0 { 1.0 } else { 0.0 };
                        for c in 0..d {
                            val += g[i][c] * (p[c] - q[c]);
                        }
                        let expect = if v == w { 1.0 } else { 0.0 };
                        assert!((val - expect).abs() < 1e-12, "{i} {j}");
                    }
                }
            }
            for v in 0..m.num_vertices() {
                let s: f64 = m.vertex_elements(v).iter().map(|&k| m.element_volumes()[k]).sum();
                assert_eq!(m.patch_volumes()[v], s * (1.0 / (d as f64 + 1.0)));
            }
        }
    }

    #[test]
    fn refinement_halves_diameter_and_keeps_shape() {
        for (d, cells) in [(1, vec![2]), (2, vec![2, 3]), (3, vec![1, 2, 1])] {
            let lengths = vec![1.0; d];
            let mut m = generate_box_mesh(d, &lengths, &cells).unwrap();
            let s0 = m.size();
            for k in 1..=3 {
                m = refine_uniform(&m);
                let s = m.size();
                let expect = s0.sigma / f64::powi(2.0, k);
                assert!(rel(s.sigma, expect) < 1e-12, "d={d} k={k}: {} vs {}", s.sigma, expect);
                assert!(s.shape_ratio <= s0.shape_ratio * 1.01);
                assert!(rel(m.volume(), 1.0) < 1e-12);
                let total: f64 = m.patch_volumes().iter().sum();
                assert!(rel(total, 1.0) < 1e-12);
                // conformity: every interior face is shared by exactly two simplices,
                // so boundary vertices lie on the box boundary
                for &v in m.boundary_vertices() {
                    let p = m.vertex(v);
                    assert!((0..d).any(|a| p[a].abs() < 1e-12 || (p[a] - 1.0).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn refined_square_matches_fresh_grid_counts() {
        let m = refine_uniform(&generate_box_mesh(2, &[1.0, 1.0], &[4, 4]).unwrap());
        let g = generate_box_mesh(2, &[1.0, 1.0], &[8, 8]).unwrap();
        assert_eq!(m.num_vertices(), g.num_vertices());
        assert_eq!(m.num_simplices(), g.num_simplices());
        assert_eq!(m.boundary_vertices().len(), g.boundary_vertices().len());
    }

    #[test]
    fn locate_and_hat_values() {
        let m = generate_box_mesh(2, &[1.0, 1.0], &[2, 2]).unwrap();
        let x = [0.3, 0.6, 0.0];
        let mut s = 0.0;
        for v in 0..m.num_vertices() {
            s += m.hat_value(v, &x);
        }
        assert!((s - 1.0).abs() < 1e-14);
        let v = m.find_vertex(&[0.5, 0.5, 0.0], 1e-12).unwrap();
        assert_eq!(m.hat_value(v, &[0.5, 0.5, 0.0]), 1.0);
    }
}
