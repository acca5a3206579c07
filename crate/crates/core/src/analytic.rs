//! Closed-form and small-instance reference values for the scalar
//! Wasserstein-Fisher-Rao metric, and the epsilon-regularization of measures
//! on a box.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

#[allow(unused_imports)]
use num_traits::Float;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::measure::AtomicMeasure;
use crate::mesh::Point;

fn check_mass(m: f64) -> Result<()> {
    if m.is_finite() && m >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidMass(m))
    }
}

fn dist(x: &Point, y: &Point) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `cos(min(t, pi/2))`.
pub fn cos_trunc(t: f64) -> f64 {
    t.min(FRAC_PI_2).cos()
}

/// `WFR^2(m0 delta_x, m1 delta_y)`.
pub fn wfr_dirac_cost(x: &Point, m0: f64, y: &Point, m1: f64) -> Result<f64> {
    check_mass(m0)?;
    check_mass(m1)?;
    let c = cos_trunc(dist(x, y) / 2.0);
    Ok((2.0 * (m0 + m1 - 2.0 * (m0 * m1).sqrt() * c)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeodesicSample {
    /// A single atom moving along the segment.
    Transport { s: f64, mass: f64, position: Point },
    /// `(1-s)^2 m0` at `x` and `s^2 m1` at `y`.
    Reaction { s: f64, atoms: [(Point, f64); 2] },
    /// `|x - y| = pi`: both families are geodesics.
    NonUnique { s: f64, transport: (Point, f64), atoms: [(Point, f64); 2] },
}

impl GeodesicSample {
    pub fn s(&self) -> f64 {
        match *self {
            GeodesicSample::Transport { s, .. } | GeodesicSample::Reaction { s, .. } | GeodesicSample::NonUnique { s, .. } => s,
        }
    }

    /// Total mass; for `NonUnique` that of the transport family.
    pub fn total_mass(&self) -> f64 {
        match *self {
            GeodesicSample::Transport { mass, .. } => mass,
            GeodesicSample::Reaction { atoms, .. } => atoms[0].1 + atoms[1].1,
            GeodesicSample::NonUnique { transport, .. } => transport.1,
        }
    }
}

/// Mass of the transported atom, `(1-s)^2 m0 + s^2 m1 + 2 s (1-s) sqrt(m0 m1) cos(|x-y|/2)`.
pub fn geodesic_mass(m0: f64, m1: f64, d: f64, s: f64) -> f64 {
    (1.0 - s) * (1.0 - s) * m0 + s * s * m1 + 2.0 * s * (1.0 - s) * (m0 * m1).sqrt() * (d / 2.0).cos()
}

fn simpson_step<F: FnMut(f64) -> f64>(f: &mut F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: FnMut(f64) -> f64>(f: &mut F, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let (lm, flm, left) = simpson_step(f, a, fa, m, fm);
    let (rm, frm, right) = simpson_step(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || (depth < 46 && delta.abs() <= 15.0 * tol) {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1) + simpson_rec(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
///
/// The first few levels are always subdivided so that narrow features are
/// not skipped.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    const FORCED: u32 = 3;
    let pieces = 1usize << FORCED;
    let h = (b - a) / pieces as f64;
    let mut total = 0.0;
    let mut fl = f(a);
    for i in 0..pieces {
        let l = a + h * i as f64;
        let r = if i + 1 == pieces { b } else { l + h };
        let fr = f(r);
        let (m, fm, whole) = simpson_step(&mut f, l, fl, r, fr);
        total += simpson_rec(&mut f, l, fl, r, fr, m, fm, whole, tol / pieces as f64, 50);
        fl = fr;
    }
    total
}

/// `H = (int_0^1 ds / m(s))^{-1}` for the transported mass.
fn speed_constant(m0: f64, m1: f64, d: f64) -> f64 {
    1.0 / adaptive_simpson(|s| 1.0 / geodesic_mass(m0, m1, d, s), 0.0, 1.0, 1e-12)
}

fn lerp(x: &Point, y: &Point, t: f64) -> Point {
    [x[0] + t * (y[0] - x[0]), x[1] + t * (y[1] - x[1]), x[2] + t * (y[2] - x[2])]
}

fn transport_point(x: &Point, m0: f64, y: &Point, m1: f64, d: f64, s: f64) -> (Point, f64) {
    let mass = geodesic_mass(m0, m1, d, s);
    if m0 == 0.0 {
        return (*y, mass);
    }
    if m1 == 0.0 || d == 0.0 {
        return (*x, mass);
    }
    let h = speed_constant(m0, m1, d);
    let t = if s >= 1.0 { 1.0 } else { h * adaptive_simpson(|u| 1.0 / geodesic_mass(m0, m1, d, u), 0.0, s, 1e-12) };
    (lerp(x, y, t.clamp(0.0, 1.0)), mass)
}

/// Point `s` of the geodesic from `m0 delta_x` to `m1 delta_y`.
pub fn wfr_dirac_geodesic(x: &Point, m0: f64, y: &Point, m1: f64, s: f64) -> Result<GeodesicSample> {
    check_mass(m0)?;
    check_mass(m1)?;
    if !s.is_finite() {
        return Err(Error::Numerical("geodesic parameter is not finite"));
    }
    let s = s.clamp(0.0, 1.0);
    let d = dist(x, y);
    let atoms = [(*x, (1.0 - s) * (1.0 - s) * m0), (*y, s * s * m1)];
    if d > PI {
        return Ok(GeodesicSample::Reaction { s, atoms });
    }
    let (position, mass) = transport_point(x, m0, y, m1, d, s);
    if d == PI && m0 > 0.0 && m1 > 0.0 {
        return Ok(GeodesicSample::NonUnique { s, transport: (position, mass), atoms });
    }
    Ok(GeodesicSample::Transport { s, mass, position })
}

/// `int_0^1 (|gamma'|^2 + |m'/m|^2) m ds` along the transport family.
pub fn geodesic_action(x: &Point, m0: f64, y: &Point, m1: f64) -> Result<f64> {
    check_mass(m0)?;
    check_mass(m1)?;
    let d = dist(x, y);
    if d >= PI {
        return Err(Error::Unsupported("no single-atom geodesic beyond distance pi"));
    }
    let c = (d / 2.0).cos();
    let g = (m0 * m1).sqrt();
    let h = if m0 > 0.0 && m1 > 0.0 { speed_constant(m0, m1, d) } else { 0.0 };
    let integrand = |s: f64| {
        let m = geodesic_mass(m0, m1, d, s);
        if m <= 0.0 {
            // m'^2 / m stays bounded at a vanishing endpoint.
            return 4.0 * (m0 + m1);
        }
        let dm = -2.0 * (1.0 - s) * m0 + 2.0 * s * m1 + 2.0 * (1.0 - 2.0 * s) * g * c;
        d * d * h * h / m + dm * dm / m
    };
    Ok(adaptive_simpson(integrand, 0.0, 1.0, 1e-12))
}

fn scalar_atoms(mu: &AtomicMeasure) -> Result<(Vec<Point>, Vec<f64>)> {
    if !mu.is_scalar() {
        return Err(Error::Unsupported("static value is scalar only"));
    }
    Ok((mu.atoms().iter().map(|a| a.x).collect(), mu.scalar_masses()))
}

/// Coupling problem `sup sum_ij c_ij sqrt(g0_ij g1_ij)` with row sums of `g0`
/// equal to `a` and column sums of `g1` equal to `b`.
struct SemiCoupling {
    c: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl SemiCoupling {
    fn ni(&self) -> usize {
        self.a.len()
    }

    fn nj(&self) -> usize {
        self.b.len()
    }

    fn value(&self, g0: &[f64], g1: &[f64]) -> f64 {
        self.c.iter().zip(g0.iter().zip(g1)).map(|(c, (p, q))| c * (p * q).sqrt()).sum()
    }

    /// Optimal `g0` for fixed `g1`, row by row.
    fn fill_rows(&self, g1: &[f64], g0: &mut [f64]) {
        let nj = self.nj();
        for i in 0..self.ni() {
            let row = i * nj..(i + 1) * nj;
            let norm: f64 = row.clone().map(|e| self.c[e] * self.c[e] * g1[e]).sum();
            for e in row {
                g0[e] = if norm > 0.0 { self.a[i] * self.c[e] * self.c[e] * g1[e] / norm } else { self.a[i] / nj as f64 };
            }
        }
    }

    fn fill_cols(&self, g0: &[f64], g1: &mut [f64]) {
        let (ni, nj) = (self.ni(), self.nj());
        for j in 0..nj {
            let norm: f64 = (0..ni).map(|i| self.c[i * nj + j] * self.c[i * nj + j] * g0[i * nj + j]).sum();
            for i in 0..ni {
                let e = i * nj + j;
                g1[e] = if norm > 0.0 { self.b[j] * self.c[e] * self.c[e] * g0[e] / norm } else { self.b[j] / ni as f64 };
            }
        }
    }

    fn alternate(&self, g0: &mut [f64], g1: &mut [f64]) -> f64 {
        let mut last = f64::NEG_INFINITY;
        for _ in 0..200_000 {
            self.fill_rows(g1, g0);
            self.fill_cols(g0, g1);
            let v = self.value(g0, g1);
            if v - last <= 1e-9 * v.abs().max(1e-300) {
                return v;
            }
            last = v;
        }
        last
    }

    /// Projected gradient ascent in `(g0, g1)` with backtracking.
    fn polish(&self, g0: &mut [f64], g1: &mut [f64]) -> f64 {
        let (ni, nj) = (self.ni(), self.nj());
        let scale = self.a.iter().chain(&self.b).fold(0.0f64, |m, &v| m.max(v)).max(1e-300);
        let floor = 1e-14 * scale;
        let mut v = self.value(g0, g1);
        let mut step = scale;
        let mut t0 = vec![0.0; g0.len()];
        let mut t1 = vec![0.0; g1.len()];
        let mut buf = Vec::new();
        for _ in 0..500 {
            let grad0: Vec<f64> = (0..g0.len()).map(|e| 0.5 * self.c[e] * ((g1[e] + floor) / (g0[e] + floor)).sqrt()).collect();
            let grad1: Vec<f64> = (0..g1.len()).map(|e| 0.5 * self.c[e] * ((g0[e] + floor) / (g1[e] + floor)).sqrt()).collect();
            let mut improved = false;
            while step > 1e-16 * scale {
                for i in 0..ni {
                    buf.clear();
                    buf.extend((0..nj).map(|j| g0[i * nj + j] + step * grad0[i * nj + j]));
                    project_simplex(&mut buf, self.a[i]);
                    t0[i * nj..(i + 1) * nj].copy_from_slice(&buf);
                }
                for j in 0..nj {
                    buf.clear();
                    buf.extend((0..ni).map(|i| g1[i * nj + j] + step * grad1[i * nj + j]));
                    project_simplex(&mut buf, self.b[j]);
                    for i in 0..ni {
                        t1[i * nj + j] = buf[i];
                    }
                }
                let w = self.value(&t0, &t1);
                if w > v {
                    g0.copy_from_slice(&t0);
                    g1.copy_from_slice(&t1);
                    let gain = w - v;
                    v = w;
                    step *= 2.0;
                    improved = gain > 1e-15 * v.abs();
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        v
    }
}

/// Euclidean projection onto `{x >= 0, sum x = total}`.
fn project_simplex(x: &mut [f64], total: f64) {
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        acc += u;
        let t = (acc - total) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
}

/// Number of random starts used by `wfr_static_value`.
pub const STATIC_STARTS: usize = 5;

/// Static semi-coupling value of `WFR^2(rho0, rho1)` for scalar atomic measures.
pub fn wfr_static_value(rho0: &AtomicMeasure, rho1: &AtomicMeasure) -> Result<f64> {
    let (xs, a) = scalar_atoms(rho0)?;
    let (ys, b) = scalar_atoms(rho1)?;
    let total = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    if xs.is_empty() || ys.is_empty() {
        return Ok(2.0 * total);
    }
    let c: Vec<f64> = xs.iter().flat_map(|x| ys.iter().map(move |y| cos_trunc(dist(x, y) / 2.0))).collect();
    let prob = SemiCoupling { c, a, b };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..STATIC_STARTS {
        let mut g1: Vec<f64> = (0..prob.c.len()).map(|_| 0.05 + (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64).collect();
        let mut g0 = vec![0.0; g1.len()];
        // Normalise the random start column-wise.
        prob.fill_cols(&vec![1.0; g1.len()], &mut g0);
        for (q, w) in g1.iter_mut().zip(&g0) {
            *q *= w;
        }
        let nj = prob.nj();
        for j in 0..nj {
            let s: f64 = (0..prob.ni()).map(|i| g1[i * nj + j]).sum();
            for i in 0..prob.ni() {
                g1[i * nj + j] *= if s > 0.0 { prob.b[j] / s } else { 0.0 };
            }
        }
        prob.alternate(&mut g0, &mut g1);
        let v = prob.polish(&mut g0, &mut g1);
        if v > best {
            best = v;
        }
    }
    Ok((2.0 * total - 4.0 * best).clamp(0.0, 2.0 * total))
}

/// Largest admissible regularization parameter.
pub const EPS_MAX: f64 = 0.25;

fn bump(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 / (r2 - 1.0) + 1.0).exp()
    }
}

/// `int f` over the part of the unit ball in `R^d` inside the box `[lo, hi]`.
fn ball_integral(d: usize, lo: &[f64; 3], hi: &[f64; 3], tol: f64, f: &mut dyn FnMut(&[f64; 3]) -> f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(d: usize, i: usize, z: &mut [f64; 3], r2: f64, lo: &[f64; 3], hi: &[f64; 3], tol: f64, f: &mut dyn FnMut(&[f64; 3]) -> f64) -> f64 {
        let r = (1.0 - r2).max(0.0).sqrt();
        let a = (-r).max(lo[i]);
        let b = r.min(hi[i]);
        if b <= a {
            return 0.0;
        }
        adaptive_simpson(
            |t| {
                z[i] = t;
                if i + 1 == d {
                    f(z)
                } else {
                    rec(d, i + 1, z, r2 + t * t, lo, hi, tol, f)
                }
            },
            a,
            b,
            tol,
        )
    }
    let mut z = [0.0; 3];
    rec(d, 0, &mut z, 0.0, lo, hi, tol, f)
}

/// Scalar input measure for `epsilon_regularize`.
pub enum Source<'a> {
    Atomic(&'a AtomicMeasure),
    /// Density with respect to Lebesgue measure on the box.
    Density(&'a dyn Fn(&Point) -> f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizationDiagnostics {
    pub eps: f64,
    /// Lipschitz constant of the box gauge, `1 / min half-width`.
    pub lipschitz: f64,
    /// `1 + L eps`.
    pub compression: f64,
    /// Integral of the unnormalized bump over the unit ball.
    pub normalization: f64,
}

/// `(1 - eps) T_#(theta_eps * rho) + eps T_#((theta_eps * rho_bar)|_{Omega_eps})`
/// on the box `[0, lengths]`, with `T` the contraction about the centre by
/// `1 / (1 + L eps)`.
pub struct Regularization<'a> {
    source: Source<'a>,
    dim: usize,
    lengths: [f64; 3],
    diag: RegularizationDiagnostics,
    tol: f64,
}

pub fn epsilon_regularize<'a>(source: Source<'a>, lengths: &[f64], eps: f64) -> Result<Regularization<'a>> {
    let dim = lengths.len();
    if dim == 0 || dim > 3 {
        return Err(Error::Unsupported("box dimension must be 1 to 3"));
    }
    if lengths.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
        return Err(Error::InvalidProblem("box lengths must be positive"));
    }
    if !(eps > 0.0 && eps < EPS_MAX) {
        return Err(Error::InvalidEpsilon { eps, max: EPS_MAX });
    }
    if let Source::Atomic(mu) = &source {
        if mu.dim() != dim || !mu.is_scalar() {
            return Err(Error::Shape { expected: "scalar atoms in the box dimension", found: mu.dim() });
        }
    }
    let mut l = [1.0; 3];
    l[..dim].copy_from_slice(lengths);
    let half = l[..dim].iter().fold(f64::INFINITY, |m, &v| m.min(v / 2.0));
    let lipschitz = 1.0 / half;
    let tol = if dim == 1 { 1e-13 } else { 1e-10 };
    let normalization = ball_integral(dim, &[-1.0; 3], &[1.0; 3], tol, &mut |z| bump(z[..dim].iter().map(|t| t * t).sum()));
    Ok(Regularization {
        source,
        dim,
        lengths: l,
        diag: RegularizationDiagnostics { eps, lipschitz, compression: 1.0 + lipschitz * eps, normalization },
        tol,
    })
}

impl Regularization<'_> {
    pub fn diagnostics(&self) -> RegularizationDiagnostics {
        self.diag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn centre(&self) -> Point {
        let mut c = [0.0; 3];
        for i in 0..self.dim {
            c[i] = self.lengths[i] / 2.0;
        }
        c
    }

    /// Preimage of `x` under the contraction.
    fn expand(&self, x: &Point) -> Point {
        let c = self.centre();
        let mut y = [0.0; 3];
        for i in 0..self.dim {
            y[i] = c[i] + (x[i] - c[i]) * self.diag.compression;
        }
        y
    }

    fn box_distance(&self, y: &Point) -> f64 {
        (0..self.dim)
            .map(|i| {
                let o = (-y[i]).max(y[i] - self.lengths[i]).max(0.0);
                o * o
            })
            .sum::<f64>()
            .sqrt()
    }

    fn inside(&self, y: &Point) -> bool {
        (0..self.dim).all(|i| y[i] >= 0.0 && y[i] <= self.lengths[i])
    }

    /// `theta_eps * rho` at `y`, before compression.
    fn mollified(&self, y: &Point) -> f64 {
        let eps = self.diag.eps;
        let d = self.dim;
        let ed = eps.powi(d as i32);
        match &self.source {
            Source::Atomic(mu) => {
                mu.atoms()
                    .iter()
                    .map(|a| {
                        let r2: f64 = (0..d).map(|i| ((y[i] - a.x[i]) / eps).powi(2)).sum();
                        a.m.get(0, 0) * bump(r2)
                    })
                    .sum::<f64>()
                    / (self.diag.normalization * ed)
            }
            Source::Density(f) => {
                // z ranges over the ball with y - eps z inside the box.
                let mut lo = [-1.0; 3];
                let mut hi = [1.0; 3];
                for i in 0..d {
                    lo[i] = (y[i] - self.lengths[i]) / eps;
                    hi[i] = y[i] / eps;
                }
                let mut g = |z: &[f64; 3]| {
                    let mut p = [0.0; 3];
                    for i in 0..d {
                        p[i] = y[i] - eps * z[i];
                    }
                    bump(z[..d].iter().map(|t| t * t).sum()) * f(&p)
                };
                ball_integral(d, &lo, &hi, self.tol, &mut g) / self.diag.normalization
            }
        }
    }

    /// Density of `T_#(theta_eps * rho)` at `x`.
    pub fn main_density(&self, x: &Point) -> f64 {
        let y = self.expand(x);
        self.diag.compression.powi(self.dim as i32) * self.mollified(&y)
    }

    /// Density of `T_#((theta_eps * rho_bar)|_{Omega_eps})` at `x`.
    ///
    /// `rho_bar` equals 1 on the `1/2`-neighbourhood of the box, so its
    /// mollification is 1 on `Omega_eps` whenever `eps < 1/4`.
    pub fn floor_density(&self, x: &Point) -> f64 {
        let y = self.expand(x);
        if self.box_distance(&y) <= self.diag.eps {
            self.diag.compression.powi(self.dim as i32)
        } else {
            0.0
        }
    }

    pub fn density(&self, x: &Point) -> f64 {
        let eps = self.diag.eps;
        (1.0 - eps) * self.main_density(x) + eps * self.floor_density(x)
    }

    /// Whether `x` lies in the box.
    pub fn contains(&self, x: &Point) -> bool {
        self.inside(x)
    }

    /// Mass of the compressed main term by nested quadrature over the box.
    pub fn main_mass(&self) -> f64 {
        self.box_integral(&|x| self.main_density(x))
    }

    fn box_integral(&self, f: &dyn Fn(&Point) -> f64) -> f64 {
        fn rec(r: &Regularization<'_>, i: usize, x: &mut Point, f: &dyn Fn(&Point) -> f64) -> f64 {
            let tol = if i == 0 { r.tol * 10.0 } else { r.tol };
            adaptive_simpson(
                |t| {
                    x[i] = t;
                    if i + 1 == r.dim {
                        f(x)
                    } else {
                        rec(r, i + 1, x, f)
                    }
                },
                0.0,
                r.lengths[i],
                tol,
            )
        }
        let mut x = [0.0; 3];
        rec(self, 0, &mut x, f)
    }

    /// Values of `density` on the `cells + 1` points per axis of a uniform grid,
    /// first axis fastest.
    pub fn sample_grid(&self, cells: usize) -> Vec<f64> {
        let cells = cells.max(1);
        let per = cells + 1;
        let total = per.pow(self.dim as u32);
        (0..total)
            .map(|mut idx| {
                let mut x = [0.0; 3];
                for i in 0..self.dim {
                    x[i] = self.lengths[i] * (idx % per) as f64 / cells as f64;
                    idx /= per;
                }
                self.density(&x)
            })
            .collect()
    }
}
