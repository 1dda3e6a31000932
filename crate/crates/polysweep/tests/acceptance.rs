//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! with the measured quantities and exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use polysweep::certify::{
    check_continuous_conditions, check_discrete_conditions, maximization_residual, CheckOptions, ConditionReport,
    Implications, Status,
};
use polysweep::discrete_ocp::{convergence_study, solve_grid, DiscreteProblem, GridSpec};
use polysweep::dynamics::{halton, simulate, Mesh};
use polysweep::polyhedra::{CqMode, Polyhedron};
use polysweep::robot::{
    analytic_state, build_robot_scenario, case_control, contact_time, paper_certificate, Convention, RobotParams,
};

const GRID_DELTA: f64 = 1.0 / 140.0;
const CASE1_COST: f64 = 4541.4;
const CASE2_COST: f64 = 6055.9;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

type Verdict = (bool, String);

fn within_rel(x: f64, reference: f64, rel: f64) -> bool {
    (x - reference).abs() <= rel * reference.abs()
}

fn criterion_1_grid_optimum_on_the_segment() -> Verdict {
    let params = RobotParams::default();
    let s = build_robot_scenario(&params).unwrap();
    let mesh = Mesh::power_of_two(12, s.horizon).unwrap();
    let start = Instant::now();
    let sol = solve_grid(&DiscreteProblem::raw(&s, mesh), GridSpec::constant(GRID_DELTA)).unwrap();
    let elapsed = start.elapsed();
    let argmin = &sol.controls[0];
    let expected = case_control(1).unwrap();
    let ok = *argmin == expected && within_rel(sol.cost, CASE1_COST, 0.01) && elapsed < Duration::from_secs(60);
    (
        ok,
        format!(
            "argmin ({}, {}), cost {:.4}, expected (3, 1.5) with cost within 1% of {CASE1_COST}, {:.2?}",
            argmin[0], argmin[1], sol.cost, elapsed
        ),
    )
}

fn criterion_2_contact_times() -> Verdict {
    let params = RobotParams::default();
    let t1 = contact_time(&params, &case_control(1).unwrap()).unwrap_or(f64::NAN);
    let t2 = contact_time(&params, &case_control(2).unwrap()).unwrap_or(f64::NAN);
    let ok = (t1 - 0.37712).abs() <= 1e-5 && (t2 - 0.28284).abs() <= 1e-5;
    (ok, format!("t1 = {t1:.7}, t2 = {t2:.7}"))
}

fn criterion_3_trajectory_fidelity() -> Verdict {
    let params = RobotParams::default();
    let s = build_robot_scenario(&params).unwrap();
    let powers: Vec<u32> = (8..=13).collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for case in [1u8, 2] {
        let u = case_control(case).unwrap();
        let uc = u.clone();
        let exact = |t: f64| analytic_state(&params, &u, t);
        let rows = convergence_study(&s, &move |_| uc.clone(), &powers, Some(&exact)).unwrap();
        let at12 = rows.iter().find(|r| r.power == 12).unwrap();
        ok &= at12.node_error <= 0.05 && at12.hold_error <= 0.05;
        let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].hold_error / w[0].hold_error).collect();
        ok &= ratios.iter().all(|r| (0.35..=0.65).contains(r));
        detail.push(format!(
            "case {case}: node {:.2e}, sup {:.2e} at m=12, ratios {:?}",
            at12.node_error,
            at12.hold_error,
            ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ));
    }
    (ok, detail.join("; "))
}

fn criterion_4_literal_certificate_values() -> Verdict {
    let mesh = Mesh::power_of_two(12, 6.0).unwrap();
    let case = paper_certificate(1, mesh).unwrap();
    let cert = case.certificate.expect("first case carries a certificate");
    let n = mesh.steps;
    let p_spread = (0..=n).map(|i| (&cert.p[i] - &cert.p[0]).amax()).fold(0.0, f64::max);
    let p_ref = dv(&[55.92, 55.92, 38.60, 38.60]);
    let jump_ref = dv(&[56.92, 56.92, 40.01, 40.01]);
    let s2 = 2f64.sqrt();
    let q_ref = dv(&[-1.0, -1.0, -s2, -s2]);
    let t1 = case.contact_time.unwrap();
    let q_err = (0..=n)
        .filter(|&i| mesh.node(i) < t1)
        .map(|i| (&cert.q[i] - &q_ref).amax())
        .fold(0.0, f64::max);
    let p_err = (&cert.p[n] - &p_ref).amax();
    let jump_err = (cert.jump_total() - &jump_ref).amax();
    let ok = p_spread <= 1e-8 && p_err <= 0.1 && jump_err <= 0.1 && q_err <= 1e-9 && cert.lambda == 1.0;
    (ok, format!(
            "p spread {p_spread:.1e}, |p(T) - ref| {p_err:.3}, |jump - ref| {jump_err:.3}, |q - ref| {q_err:.1e}, lambda {}",
            cert.lambda
        ),
    )
}

fn offenders(r: &ConditionReport) -> Vec<String> {
    r.conditions
        .iter()
        .filter(|(_, e)| e.status == Status::Violated || e.residual >= 1e-6)
        .map(|(k, e)| format!("{k} {:.2e}", e.residual))
        .collect()
}

fn criterion_5_condition_suite_on_the_literal_certificate() -> Verdict {
    let params = RobotParams::with_convention(Convention::PaperLiteral);
    let s = build_robot_scenario(&params).unwrap();
    let mesh = Mesh::power_of_two(12, s.horizon).unwrap();
    let case = paper_certificate(1, mesh).unwrap();
    let cert = case.certificate.unwrap();
    let opts = CheckOptions {
        offset_form: true,
        ..CheckOptions::default()
    };
    let pr = DiscreteProblem::raw(&s, mesh);
    let discrete = check_discrete_conditions(&pr, &case.trajectory, &cert, &opts).unwrap();
    let continuous = check_continuous_conditions(&s, &case.trajectory, &cert, &opts).unwrap();
    let ubar = case_control(1).unwrap();
    let max_res = maximization_residual(&s.control_set, &ubar, &ubar).unwrap();
    let bad_d = offenders(&discrete);
    let bad_c = offenders(&continuous);
    let ok = bad_d.is_empty() && bad_c.is_empty() && max_res <= 1e-12;
    (
        ok,
        format!("maximization residual {max_res:.1e}; discrete offenders {bad_d:?}; continuous offenders {bad_c:?}"),
    )
}

fn criterion_6_cost_ordering() -> Verdict {
    let params = RobotParams::default();
    let s = build_robot_scenario(&params).unwrap();
    let mesh = Mesh::power_of_two(12, s.horizon).unwrap();
    let cost = |case: u8| {
        let u = case_control(case).unwrap();
        let analytic = s.cost.value(&analytic_state(&params, &u, s.horizon));
        let traj = simulate(&s, &vec![u; mesh.steps], mesh).unwrap();
        (analytic, s.cost.value(traj.final_state()))
    };
    let (a1, r1) = cost(1);
    let (a2, r2) = cost(2);
    let ok = a1 < a2
        && r1 < r2
        && within_rel(a1, CASE1_COST, 0.01)
        && within_rel(r1, CASE1_COST, 0.01)
        && within_rel(a2, CASE2_COST, 0.01)
        && within_rel(r2, CASE2_COST, 0.01);
    (
        ok,
        format!("J(3,1.5) = {r1:.3} (analytic {a1:.3}), J(-4,-2) = {r2:.3} (analytic {a2:.3})"),
    )
}

fn sample_polyhedron(index: usize, n: usize, s: usize) -> Option<Polyhedron> {
    let h = halton(index, n * s + s);
    let mut gens = Vec::with_capacity(s);
    for j in 0..s {
        let a = DVector::from_iterator(n, (0..n).map(|k| 2.0 * h[j * n + k] - 1.0));
        if a.norm() < 0.1 {
            return None;
        }
        gens.push(a);
    }
    let offsets = (0..s).map(|j| 0.05 + h[n * s + j]).collect();
    Polyhedron::new(n, gens, offsets).ok()
}

fn projection_suite() -> (usize, usize) {
    let mut checked = 0;
    let mut failed = 0;
    let mut index = 0;
    while checked < 1000 {
        index += 1;
        let n = 2 + index % 4;
        let s = 1 + index % 8;
        let Some(poly) = sample_polyhedron(index, n, s) else {
            continue;
        };
        let hz = halton(index + 50_000, 2 * n);
        let z = DVector::from_iterator(n, (0..n).map(|k| 10.0 * hz[k] - 5.0));
        let w = DVector::from_iterator(n, (0..n).map(|k| 10.0 * hz[n + k] - 5.0));
        let pz = poly.project(&z).unwrap();
        let pw = poly.project(&w).unwrap();
        let scale = 1.0 + z.norm();
        let again = poly.project(&pz.point).unwrap();
        let mut ok = (&again.point - &pz.point).amax() <= 1e-8 * scale;
        ok &= (&pz.point - &pw.point).norm() <= (&z - &w).norm() + 1e-8;
        let residual = &z - &pz.point - poly.combine(&pz.multipliers);
        ok &= residual.amax() <= 1e-8 * scale;
        for (j, (a, &c)) in poly.generators().iter().zip(poly.offsets()).enumerate() {
            let slack = c - a.dot(&pz.point);
            let eta = pz.multipliers[j];
            ok &= slack >= -1e-8 * scale && eta >= 0.0 && (eta * slack).abs() <= 1e-8 * scale;
        }
        checked += 1;
        failed += usize::from(!ok);
    }
    (checked, failed)
}

fn planar_suite() -> (usize, f64) {
    let mut worst = 0.0f64;
    let mut count = 0;
    for index in 1..=4 {
        let s = 4 + index;
        let h = halton(index + 900, s + 2);
        let mut gens = Vec::new();
        let mut offs = Vec::new();
        for k in 0..s {
            let (sin, cos) = (std::f64::consts::TAU * (k as f64 + 0.3 * h[k]) / s as f64).sin_cos();
            gens.push(dv(&[cos, sin]));
            offs.push(0.5 + h[k]);
        }
        for a in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
            gens.push(dv(&a));
            offs.push(2.0);
        }
        let poly = Polyhedron::new(2, gens, offs).unwrap();
        let z = dv(&[8.0 * h[s] - 4.0, 8.0 * h[s + 1] - 4.0]);
        let d = (&z - poly.project(&z).unwrap().point).norm();
        let step = 1e-3;
        let mut best = f64::INFINITY;
        for i in 0..=4000 {
            for k in 0..=4000 {
                let (x, y) = (-2.0 + i as f64 * step, -2.0 + k as f64 * step);
                if poly
                    .generators()
                    .iter()
                    .zip(poly.offsets())
                    .all(|(a, &c)| a[0] * x + a[1] * y <= c)
                {
                    best = best.min((z[0] - x).hypot(z[1] - y));
                }
            }
        }
        worst = worst.max((best - d).abs());
        count += 1;
    }
    (count, worst)
}

fn multiplier_suite() -> (usize, f64) {
    let mut worst = 0.0f64;
    let mut count = 0;
    for index in 1..=400 {
        let n = 2 + index % 4;
        let k = 1 + index % n;
        let h = halton(index + 7000, n * k + n + k);
        let gens: Vec<DVector<f64>> = (0..k)
            .map(|j| DVector::from_iterator(n, (0..n).map(|c| 2.0 * h[j * n + c] - 1.0)))
            .collect();
        let sv = DMatrix::from_columns(&gens).singular_values();
        if sv.min() <= 0.05 * sv.max() {
            continue;
        }
        let xbar = DVector::from_iterator(n, (0..n).map(|c| 4.0 * h[n * k + c] - 2.0));
        let eta = DVector::from_iterator(k, (0..k).map(|j| 0.1 + 1.9 * h[n * k + n + j]));
        let offsets = gens.iter().map(|a| a.dot(&xbar)).collect();
        let poly = Polyhedron::new(n, gens, offsets).unwrap();
        assert!(poly.check_cq(&xbar, CqMode::Licq, 1e-9).unwrap().holds);
        let z = &xbar + poly.combine(&eta);
        let p = poly.project(&z).unwrap();
        worst = worst.max((&p.multipliers - &eta).amax() / (1.0 + eta.norm()));
        count += 1;
    }
    (count, worst)
}

fn implication_suite() -> bool {
    let cases: [(&[(bool, f64)], Status); 5] = [
        (&[], Status::Vacuous),
        (&[(false, 1.0), (false, 5.0)], Status::Vacuous),
        (&[(true, 1e-9), (false, 1.0)], Status::Satisfied),
        (&[(true, 1e-9), (true, 1e-3)], Status::Violated),
        (&[(true, f64::NAN)], Status::Violated),
    ];
    cases.iter().all(|(items, status)| {
        let mut imp = Implications::new(1e-6);
        for (a, r) in items.iter() {
            imp.add(*a, *r, String::new);
        }
        imp.finish().status == *status
    })
}

fn criterion_7_property_suites() -> Verdict {
    let (proj_n, proj_bad) = projection_suite();
    let (plane_n, plane_gap) = planar_suite();
    let (mult_n, mult_err) = multiplier_suite();
    let implications = implication_suite();
    let ok = proj_bad == 0 && plane_gap <= 2e-3 && mult_err <= 1e-9 && mult_n > 0 && implications;
    (
        ok,
        format!(
            "projection {proj_bad}/{proj_n} failures, planar grid gap {plane_gap:.2e} over {plane_n}, \
             multiplier error {mult_err:.1e} over {mult_n}, implication semantics {implications}"
        ),
    )
}

fn criterion_8_grid_argmin_is_stable_under_refinement() -> Verdict {
    let params = RobotParams::default();
    let s = build_robot_scenario(&params).unwrap();
    let argmins: Vec<DVector<f64>> = (10..=13)
        .map(|m| {
            let mesh = Mesh::power_of_two(m, s.horizon).unwrap();
            solve_grid(&DiscreteProblem::raw(&s, mesh), GridSpec::constant(GRID_DELTA))
                .unwrap()
                .controls[0]
                .clone()
        })
        .collect();
    let ok = argmins.windows(2).all(|w| w[0] == w[1]);
    let shown: Vec<String> = argmins.iter().map(|u| format!("({}, {})", u[0], u[1])).collect();
    (ok, format!("argmin for mesh powers 10..=13: {}", shown.join(", ")))
}

fn main() {
    let criteria: [(u32, fn() -> Verdict); 8] = [
        (1, criterion_1_grid_optimum_on_the_segment),
        (2, criterion_2_contact_times),
        (3, criterion_3_trajectory_fidelity),
        (4, criterion_4_literal_certificate_values),
        (5, criterion_5_condition_suite_on_the_literal_certificate),
        (6, criterion_6_cost_ordering),
        (7, criterion_7_property_suites),
        (8, criterion_8_grid_argmin_is_stable_under_refinement),
    ];
    let mut failed = 0;
    for (id, run) in criteria {
        let (ok, detail) = std::panic::catch_unwind(run).unwrap_or_else(|_| (false, "panicked".to_string()));
        println!("criterion {id}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
