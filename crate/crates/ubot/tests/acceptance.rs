//! Acceptance checks, one PASS/FAIL line each.
//!
//! `cargo test -p ubot --test acceptance -- 4 9` runs a subset. Criteria listed
//! in `KNOWN_RED` are reported but do not fail the target; see the notes in
//! the README.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ubot::config::{ExperimentConfig, Overrides};
use ubot::experiment::{regularization_slope, Experiment};
use ubot_core::action::{j_tau_sigma, membership_residual, project_onto_paraboloid, ParaboloidPoint};
use ubot_core::analytic::wfr_static_value;
use ubot_core::measure::AtomicMeasure;
use ubot_core::mesh::{generate_box_mesh, Mesh};
use ubot_core::operators::{assemble_discrete_divergence, ContinuousOperatorSpec};
use ubot_core::solver::{ce_residual_absolute, feasible_init, hellinger_upper_bound, solve, ProblemSpec, SolverConfig};
use ubot_core::spaces::{inner, DiscreteMomentum, DiscreteState, WeightPair};
use ubot_core::tensor::{RectMatrix, SymMatrix};

const KNOWN_RED: &[usize] = &[4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn sym(rng: &mut ChaCha8Rng) -> f64 {
    2.0 * unit(rng) - 1.0
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str, o: &Overrides) -> Experiment {
    Experiment::load(&configs().join(name), o).unwrap()
}

fn inline(json: &str) -> Experiment {
    Experiment::new(ExperimentConfig::from_json(json).unwrap(), ".").unwrap()
}

fn box_mesh(d: usize, cells: usize) -> Mesh {
    generate_box_mesh(d, &vec![1.0; d], &vec![cells; d]).unwrap()
}

fn norm<F: ubot_core::spaces::Field>(mesh: &Mesh, f: &F) -> f64 {
    inner(mesh, f, f).unwrap().sqrt()
}

fn adjoint_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: [(usize, &[usize]); 3] = [(1, &[8, 16, 32]), (2, &[8, 16, 32]), (3, &[2, 4])];
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for (d, cells) in cases {
        for &c in cells {
            let mesh = box_mesh(d, c);
            for spec in [ContinuousOperatorSpec::divergence(d).unwrap(), ContinuousOperatorSpec::symmetric_divergence(d).unwrap()] {
                let dd = assemble_discrete_divergence(&mesh, &spec).unwrap();
                for _ in 0..100 {
                    let g = DiscreteState::new((0..mesh.num_vertices()).map(|_| SymMatrix::from_fn(spec.n, |_, _| sym(&mut rng))).collect()).unwrap();
                    let q = DiscreteMomentum::new(
                        spec.n,
                        spec.k,
                        (0..mesh.num_simplices()).map(|_| RectMatrix::from_fn(spec.n, spec.k, |_, _| sym(&mut rng))).collect(),
                    )
                    .unwrap();
                    let lhs = inner(&mesh, &g, &dd.apply_d(&q).unwrap()).unwrap();
                    let rhs = inner(&mesh, &dd.apply_dstar(&g).unwrap(), &q).unwrap();
                    worst = worst.max((lhs + rhs).abs() / (norm(&mesh, &g) * norm(&mesh, &q)));
                    pairs += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("{pairs} pairs, worst |<G,Dq> + <D*G,q>| / |G||q| = {worst:.2e}"))
}

fn hellinger_curve() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_res, mut worst_excess) = (0.0f64, f64::NEG_INFINITY);
    for trial in 0..50 {
        let n = 1 + trial % 2;
        let d = 1 + (trial / 2) % 2;
        let mesh = box_mesh(d, 4);
        let spec = if n == 1 { ContinuousOperatorSpec::divergence(d).unwrap() } else { ContinuousOperatorSpec::symmetric_divergence(2).unwrap() };
        let mesh = if spec.d == d { mesh } else { box_mesh(spec.d, 4) };
        let rand = |rng: &mut ChaCha8Rng| {
            DiscreteState::new((0..mesh.num_vertices()).map(|_| RectMatrix::from_fn(n, n, |_, _| sym(rng)).gram()).collect()).unwrap()
        };
        let (g0, g1) = (rand(&mut rng), rand(&mut rng));
        let w = WeightPair::identity(n, spec.k);
        let steps = 2 + trial % 7;
        let p = ProblemSpec::new(mesh.clone(), spec, w, steps, g0.clone(), g1.clone(), SolverConfig::default()).unwrap();
        let path = feasible_init(&p);
        worst_res = worst_res.max(ce_residual_absolute(&mesh, &spec, &path).unwrap());
        let obj = j_tau_sigma(&mesh, &path, &w).unwrap().value;
        let bound = hellinger_upper_bound(&mesh, &g0, &g1, &SymMatrix::identity(n)).unwrap();
        worst_excess = worst_excess.max(obj - bound);
    }
    outcome(worst_res <= 1e-10 && worst_excess <= 1e-10, format!("50 pairs, max residual {worst_res:.2e}, max objective - bound {worst_excess:.2e}"))
}

/// Eigenvalues of a symmetric 2 x 2 matrix in closed form.
fn eig2(a: f64, b: f64, d: f64) -> [f64; 2] {
    let m = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    [m - r, m + r]
}

fn paraboloid_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_member = 0.0f64;
    for trial in 0..300 {
        let (n, k) = (1 + trial % 3, 1 + (trial / 3) % 3);
        let s = 0.1 + 5.0 * unit(&mut rng);
        let w = WeightPair::new(
            RectMatrix::from_fn(k, k, |_, _| sym(&mut rng)).gram().add(&SymMatrix::scalar(k, 0.2)),
            RectMatrix::from_fn(n, n, |_, _| sym(&mut rng)).gram().add(&SymMatrix::scalar(n, 0.2)),
        )
        .unwrap();
        let p = ParaboloidPoint {
            a: SymMatrix::from_fn(n, |_, _| s * sym(&mut rng)),
            b: RectMatrix::from_fn(n, k, |_, _| s * sym(&mut rng)),
            c: RectMatrix::from_fn(n, n, |_, _| s * sym(&mut rng)),
        };
        worst_member = worst_member.max(membership_residual(&project_onto_paraboloid(&p, &w).unwrap(), &w));
    }

    let w1 = WeightPair::identity(1, 1);
    let r1 = |x: f64| RectMatrix::from_row_major(1, 1, &[x]).unwrap();
    let cubic = project_onto_paraboloid(&ParaboloidPoint { a: SymMatrix::scalar(1, -1.0), b: r1(2.0), c: r1(0.0) }, &w1).unwrap();
    let expect = [-(2f64.powf(1.0 / 3.0)), 2f64.powf(2.0 / 3.0), 0.0];
    let cubic_err = (cubic.a.get(0, 0) - expect[0]).abs().max((cubic.b.get(0, 0) - expect[1]).abs()).max(cubic.c.get(0, 0).abs());

    // n = 2, k = 1, C0 = 0: the optimal C is 0 and A = A0 - [A0 + B B^T / 2]_+,
    // so a grid over B in R^2 is exhaustive.
    let w2 = WeightPair::identity(2, 1);
    let mut worst_grid = 0.0f64;
    for _ in 0..3 {
        let (a00, a01, a11) = (sym(&mut rng), sym(&mut rng), sym(&mut rng));
        let (b0, b1) = (1.5 * sym(&mut rng), 1.5 * sym(&mut rng));
        let p = project_onto_paraboloid(
            &ParaboloidPoint {
                a: SymMatrix::from_full(2, &[a00, a01, a01, a11]).unwrap(),
                b: RectMatrix::from_row_major(2, 1, &[b0, b1]).unwrap(),
                c: RectMatrix::zeros(2, 2),
            },
            &w2,
        )
        .unwrap();
        let dist = |x: f64, y: f64| {
            let ev = eig2(a00 + 0.5 * x * x, a01 + 0.5 * x * y, a11 + 0.5 * y * y);
            ev.iter().map(|e| e.max(0.0).powi(2)).sum::<f64>() + (x - b0).powi(2) + (y - b1).powi(2)
        };
        let step = 1e-3;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in -1500..=1500 {
            for j in -1500..=1500 {
                let (x, y) = (b0 + i as f64 * step, b1 + j as f64 * step);
                let v = dist(x, y);
                if v < best.0 {
                    best = (v, x, y);
                }
            }
        }
        worst_grid = worst_grid.max((p.b.get(0, 0) - best.1).abs()).max((p.b.get(1, 0) - best.2).abs());
    }
    outcome(
        worst_member <= 1e-10 && cubic_err <= 1e-8 && worst_grid <= 2e-3,
        format!("membership {worst_member:.2e}, cubic case {cubic_err:.2e}, n=2 grid {worst_grid:.2e}"),
    )
}

fn dirac_convergence() -> Outcome {
    let exp = load("dirac_pair_1d.json", &Overrides::default());
    let oracle = exp.oracle().unwrap().expect("closed form");
    let levels: Vec<usize> = (0..exp.config.ladder.len()).collect();
    let out = exp.run_levels(&levels, 1).unwrap();
    let rel: Vec<f64> = out.iter().map(|o| (o.report.objective - oracle).abs() / oracle).collect();
    let decreasing = rel.windows(2).filter(|w| w[1] < w[0]).count();
    let finest = *rel.last().unwrap();
    let objs: Vec<String> = out.iter().map(|o| format!("{:.6}", o.report.objective)).collect();
    outcome(
        finest <= 0.05 && decreasing >= 2 && out.iter().all(|o| o.report.converged),
        format!(
            "oracle {oracle:.6}, objectives [{}], rel errors [{}], finest {:.2}% (limit 5%)",
            objs.join(", "),
            rel.iter().map(|r| format!("{:.4}", r)).collect::<Vec<_>>().join(", "),
            100.0 * finest
        ),
    )
}

fn pure_reaction() -> Outcome {
    let exp = load("pure_reaction_1d.json", &Overrides::default());
    let o = &exp.run_levels(&[0], 1).unwrap()[0];
    let err = (o.report.objective - 2.0).abs();
    outcome(o.steps >= 64 && err <= 1e-3, format!("N = {}, objective {:.6}, |objective - 2| = {err:.2e}", o.steps, o.report.objective))
}

fn atoms_json(atoms: &[(usize, f64)], cells: usize) -> String {
    let list: Vec<String> = atoms.iter().map(|&(v, m)| format!(r#"{{"x": [{}], "m": {m}}}"#, v as f64 / cells as f64)).collect();
    format!(r#"{{"atomic": {{"atoms": [{}]}}}}"#, list.join(", "))
}

fn static_dynamic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cells = 64;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for _ in 0..3 {
        let mut side = || -> Vec<(usize, f64)> {
            let count = 1 + (rng.next_u64() % 3) as usize;
            let mut verts: Vec<usize> = Vec::new();
            while verts.len() < count {
                let v = 8 + (rng.next_u64() % (cells as u64 - 15)) as usize;
                if !verts.contains(&v) {
                    verts.push(v);
                }
            }
            verts.into_iter().map(|v| (v, 0.5 + 1.5 * unit(&mut rng))).collect()
        };
        let (a, b) = (side(), side());
        let json = format!(
            r#"{{"domain": {{"dim": 1, "lengths": [1.0]}}, "model": {{"kind": "wfr"}},
                "endpoints": {{"g0": {}, "g1": {}}},
                "ladder": [{{"cells": {cells}, "steps": 32}}],
                "solver": {{"tol_feas": 1e-6, "tol_obj": 1e-8}}}}"#,
            atoms_json(&a, cells),
            atoms_json(&b, cells)
        );
        let exp = inline(&json);
        let measure = |s: &[(usize, f64)]| {
            AtomicMeasure::scalar(1, &s.iter().map(|&(v, m)| ([v as f64 / cells as f64, 0.0, 0.0], m)).collect::<Vec<_>>()).unwrap()
        };
        let stat = wfr_static_value(&measure(&a), &measure(&b)).unwrap();
        let o = &exp.run_levels(&[0], 1).unwrap()[0];
        let rel = (o.report.objective - stat).abs() / stat;
        worst = worst.max(rel);
        let status = if o.report.converged { "converged" } else { "iteration cap" };
        let lower = o.report.dual_bound.map_or("none".to_string(), |b| format!("{b:.5}"));
        parts.push(format!(
            "{}->{} atoms static {stat:.5} dynamic {:.5} ({:.2}%, {status} after {}, dual bound {lower})",
            a.len(),
            b.len(),
            o.report.objective,
            100.0 * rel,
            o.report.iterations
        ));
    }
    outcome(worst <= 0.05, parts.join("; "))
}

fn consistency_rates() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for d in 1..=2 {
        for kind in ["wfr", "kantorovich-bures"] {
            let lengths = vec!["1.0"; d].join(", ");
            let json = format!(
                r#"{{"domain": {{"dim": {d}, "lengths": [{lengths}]}}, "model": {{"kind": "{kind}"}},
                    "endpoints": {{"g0": {{"random": {{}}}}, "g1": {{"random": {{}}}}}},
                    "ladder": [{{"cells": 8, "steps": 1}}, {{"cells": 16, "steps": 1}}, {{"cells": 32, "steps": 1}}]}}"#
            );
            let rows = inline(&json).consistency().unwrap();
            let mut orders = Vec::new();
            for q in ["adjoint", "derivation", "energy"] {
                let order = rows.iter().find(|r| r.quantity == q).unwrap().order;
                pass &= order >= 0.9;
                orders.push(format!("{q} {order:.2}"));
            }
            parts.push(format!("d={d} {kind}: {}", orders.join(" ")));
        }
    }
    outcome(pass, parts.join("; "))
}

fn regularization_rate() -> Outcome {
    let exp = load("regularize_dirac_1d.json", &Overrides::default());
    let runs = exp.regularize(&[0.2, 0.1, 0.05], true, 1).unwrap();
    let slope = regularization_slope(&runs).unwrap();
    let vals: Vec<String> = runs.iter().map(|r| format!("eps {} -> {:.3e}", r.diagnostics.eps, r.wfr2.unwrap())).collect();
    let converged = runs.iter().all(|r| r.converged == Some(true));
    outcome((0.7..=1.3).contains(&slope) && converged, format!("{}, slope {slope:.3}", vals.join(", ")))
}

fn matrix_sanity() -> Outcome {
    let mut ok = 0;
    let (mut worst_ratio, mut worst_res) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let exp = load("kb_random_2d.json", &Overrides { seed: Some(seed), ..Default::default() });
        let o = &exp.run_levels(&[0], 1).unwrap()[0];
        worst_ratio = worst_ratio.max(o.report.objective / o.hellinger_bound);
        worst_res = worst_res.max(o.report.ce_residual);
        if o.report.objective <= o.hellinger_bound && o.report.ce_residual <= 1e-5 {
            ok += 1;
        }
    }
    outcome(ok == 20, format!("{ok}/20 trials, max objective / bound {worst_ratio:.3}, max relative residual {worst_res:.2e}"))
}

fn sublinearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mesh = box_mesh(1, 16);
    let spec = ContinuousOperatorSpec::divergence(1).unwrap();
    let w = WeightPair::identity(1, 1);
    let cfg = SolverConfig { tol_feas: 1e-9, tol_obj: 1e-9, ..SolverConfig::default() };
    let tol = cfg.tol_obj;
    let mut worst = f64::NEG_INFINITY;
    let mut pass = true;
    for _ in 0..5 {
        let mut field = || {
            let (c, h, x0) = (0.2 + unit(&mut rng), 2.0 * unit(&mut rng), unit(&mut rng));
            DiscreteState::new(mesh.vertices().iter().map(|p| SymMatrix::scalar(1, c + h * (-((p[0] - x0) / 0.15).powi(2)).exp())).collect()).unwrap()
        };
        let (g0, g1, h0, h1) = (field(), field(), field(), field());
        let (alpha, beta) = (0.2 + unit(&mut rng), 0.2 + unit(&mut rng));
        let mut obj = |a: &DiscreteState, b: &DiscreteState| {
            let r = solve(&ProblemSpec::new(mesh.clone(), spec, w, 16, a.clone(), b.clone(), cfg).unwrap()).unwrap();
            pass &= r.converged;
            r.objective
        };
        let (oa, ob) = (obj(&g0, &g1), obj(&h0, &h1));
        let oc = obj(&g0.combine(alpha, &h0, beta), &g1.combine(alpha, &h1, beta));
        let rhs = alpha * oa + beta * ob;
        // tolerance is relative, so it is scaled by the objective size
        let slack = 3.0 * tol * rhs;
        pass &= oc <= rhs + slack;
        worst = worst.max((oc - rhs) / rhs);
    }
    outcome(pass, format!("5 instances, max (combined - weighted sum) / weighted sum = {worst:.2e}, allowed {:.0e}", 3.0 * tol))
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(usize, &str, Duration, Check); 10] = [
        (1, "adjoint exactness", Duration::from_secs(10), adjoint_exactness),
        (2, "Hellinger curve contract", Duration::from_secs(10), hellinger_curve),
        (3, "paraboloid projection", Duration::from_secs(60), paraboloid_projection),
        (4, "Dirac pair convergence", Duration::from_secs(600), dirac_convergence),
        (5, "pure reaction", Duration::from_secs(60), pure_reaction),
        (6, "static vs dynamic", Duration::from_secs(900), static_dynamic),
        (7, "consistency rates", Duration::from_secs(120), consistency_rates),
        (8, "regularization rate", Duration::from_secs(900), regularization_rate),
        (9, "matrix case sanity", Duration::from_secs(600), matrix_sanity),
        (10, "sublinearity", Duration::from_secs(600), sublinearity),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name}: {} [{:.1}s of {}s]", o.detail, took.as_secs_f64(), budget.as_secs());
        if !pass && !KNOWN_RED.contains(&id) {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {failed:?}");
        ExitCode::FAILURE
    }
}
