//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sode_geometry::constrained::{
    christoffel_from_metric, constrained_connection_components, shape_constrained,
    ConstrainedGeometry, ConstrainedPoint, ConstrainedSystem,
};
use sode_geometry::nonholonomic::{NonholonomicProblem, ReducedDynamics};
use sode_geometry::sode::{EvolutionPoint, SodeGeometry, SodeSystem};
use sode_geometry::verify::{self, sample_points};
use std::sync::Arc;

fn conclude(num: u32, what: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {num}: {what} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {num} failed: {detail}");
}

fn sample_for_sode(
    geo: &Arc<SodeGeometry>,
    ranges: &[(f64, f64)],
    count: usize,
    seed: u64,
) -> Vec<EvolutionPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_points(ranges, |p| geo.tensors_at(p, 3).is_ok(), count, &mut rng)
        .unwrap()
        .iter()
        .map(|p| EvolutionPoint::from_slots(p))
        .collect()
}

fn sample_for_constrained(
    geo: &Arc<ConstrainedGeometry>,
    ranges: &[(f64, f64)],
    count: usize,
    seed: u64,
) -> Vec<ConstrainedPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_points(ranges, |p| geo.tensors_at(p, 3).is_ok(), count, &mut rng)
        .unwrap()
        .iter()
        .map(|p| ConstrainedPoint::from_slots(geo.m(), geo.k(), p))
        .collect()
}

fn unit_ranges(dim: usize) -> Vec<(f64, f64)> {
    vec![(-1.0, 1.0); dim]
}

// -- fixtures ----------------------------------------------------------------

fn free_particle_n3() -> Arc<SodeGeometry> {
    SodeGeometry::new(SodeSystem::parse(&["x", "y", "z"], &["0", "0", "0"]).unwrap())
}

fn damped_oscillator() -> Arc<SodeGeometry> {
    SodeGeometry::new(SodeSystem::parse(&["q"], &["-0.6*u_q - q"]).unwrap())
}

fn tan_2dof() -> Arc<SodeGeometry> {
    SodeGeometry::new(SodeSystem::parse(&["phi", "x"], &["0", "-u_phi*u_x*tan(phi)"]).unwrap())
}

fn tan_2dof_ranges() -> Vec<(f64, f64)> {
    let mut r = unit_ranges(5);
    r[1] = (-1.1, 1.1); // phi
    r
}

fn knife_edge_closed() -> Arc<ConstrainedGeometry> {
    ConstrainedGeometry::from_system(
        &ConstrainedSystem::parse(
            &["phi", "x"],
            &["y"],
            &["0", "-u_phi*u_x*tan(phi)"],
            &["tan(phi)*u_x"],
            None,
        )
        .unwrap(),
    )
}

fn knife_edge_ranges() -> Vec<(f64, f64)> {
    // (t, phi, x, y, u_phi, u_x); u kept away from zero so the shape
    // spectrum stays nondegenerate
    vec![
        (0.0, 1.0),
        (-1.1, 1.1),
        (-1.0, 1.0),
        (-1.0, 1.0),
        (0.2, 1.3),
        (0.2, 1.3),
    ]
}

fn knife_edge_reduced() -> Arc<ReducedDynamics> {
    ReducedDynamics::new(
        NonholonomicProblem::parse(
            &["phi", "x"],
            &["y"],
            "1/2*(u_phi^2 + u_x^2 + u_y^2)",
            &["tan(phi)*u_x"],
        )
        .unwrap(),
    )
}

const BALL_L: &str = "(u_alpha^2 + sin(alpha)^2*u_beta^2) + 0.05*(u_psi^2 + u_theta^2 + u_varphi^2 + 2*u_psi*u_varphi*cos(theta)) - 19.6 - 19.6*cos(alpha)";
const BALL_PSI4: &str = "0.25*(u_theta*sin(beta - varphi) + u_psi*sin(theta)*cos(varphi - beta))";
const BALL_PSI5: &str = "-0.25*(u_varphi + u_psi*(cos(theta) + cot(alpha)*sin(theta)*sin(beta - varphi)) - u_theta*cot(alpha)*cos(varphi - beta))";
const R_OVER_BIG_R: f64 = 0.25;
const BALL_MR: f64 = 2.0; // m * R
const BALL_I: f64 = 0.1;
const BALL_MGR: f64 = 19.6; // m * g * R

fn rolling_ball() -> Arc<ReducedDynamics> {
    let prob = NonholonomicProblem::parse(
        &["varphi", "psi", "theta"],
        &["alpha", "beta"],
        BALL_L,
        &[BALL_PSI4, BALL_PSI5],
    )
    .unwrap()
    .with_upsilon(vec![
        vec![
            vec![
                sode_geometry::expr::parse("0").unwrap(),
                sode_geometry::expr::parse("0").unwrap(),
            ],
            vec![
                sode_geometry::expr::parse("0").unwrap(),
                sode_geometry::expr::parse("-sin(alpha)*cos(alpha)").unwrap(),
            ],
        ],
        vec![
            vec![
                sode_geometry::expr::parse("0").unwrap(),
                sode_geometry::expr::parse("cot(alpha)").unwrap(),
            ],
            vec![
                sode_geometry::expr::parse("cot(alpha)").unwrap(),
                sode_geometry::expr::parse("0").unwrap(),
            ],
        ],
    ]);
    ReducedDynamics::new(prob)
}

fn rolling_ball_ranges() -> Vec<(f64, f64)> {
    // (t, varphi, psi, theta, alpha, beta, u_varphi, u_psi, u_theta)
    vec![
        (0.0, 1.0),
        (-2.5, 2.5),
        (-2.5, 2.5),
        (0.4, 2.7),
        (0.5, 2.6),
        (-2.5, 2.5),
        (-1.0, 1.0),
        (-1.0, 1.0),
        (-1.0, 1.0),
    ]
}

// -- criteria ----------------------------------------------------------------

#[test]
fn criterion_1_glueing_axioms() {
    let report = verify::glue_toy_suite(20250810, 20, 50).unwrap();
    let tol = 1e-8;
    let failing = report.failing(tol);
    conclude(
        1,
        "glueing axioms on 20 random decompositions, 50 draws each, with the parallelism equivalence in both directions",
        failing.is_empty(),
        &format!(
            "max residual {:.3e} over {} identities{}",
            report.max_residual(),
            report.entries().count(),
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing: {failing:?}")
            }
        ),
    );
}

#[test]
fn criterion_2_linear_connection_characterisation() {
    let tol = 1e-8;
    let fixtures: Vec<(&str, Arc<SodeGeometry>, Vec<(f64, f64)>)> = vec![
        ("free particle n=3", free_particle_n3(), unit_ranges(7)),
        ("damped oscillator", damped_oscillator(), unit_ranges(3)),
        ("2-dof tangent system", tan_2dof(), tan_2dof_ranges()),
    ];
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut pass = true;
    for (name, geo, ranges) in fixtures {
        let points = sample_for_sode(&geo, &ranges, 50, 42);
        let report = verify::mp_suite(&geo, &points, 1042).unwrap();
        let failing = report.failing(tol);
        worst = worst.max(report.max_residual());
        if !failing.is_empty() {
            pass = false;
            detail.push_str(&format!(" {name}: {failing:?};"));
        }
    }
    conclude(
        2,
        "eight characterising properties and intrinsic-vs-components agreement on three fixtures at 50 points",
        pass,
        &format!("max residual {worst:.3e}{detail}"),
    );
}

#[test]
fn criterion_3_curvature_identities() {
    let tol = 1e-8;
    let mut worst = 0.0f64;
    for (geo, ranges) in [
        (free_particle_n3(), unit_ranges(7)),
        (damped_oscillator(), unit_ranges(3)),
        (tan_2dof(), tan_2dof_ranges()),
    ] {
        for pt in sample_for_sode(&geo, &ranges, 50, 77) {
            worst = worst.max(
                geo.phi_curvature_identity_residual(&pt.slots())
                    .unwrap(),
            );
        }
    }
    let ke = knife_edge_closed();
    let mut worst_hat = 0.0f64;
    let mut worst_check = 0.0f64;
    for pt in sample_for_constrained(&ke, &knife_edge_ranges(), 50, 78) {
        let (a, b) = ke.vertical_identity_residuals(&pt.slots()).unwrap();
        worst_hat = worst_hat.max(a);
        worst_check = worst_check.max(b);
    }
    conclude(
        3,
        "vertical curvature identities (3R, order-3 jets) on the unconstrained fixtures and their constrained analogues (3R-hat, 2R-check) on the knife edge",
        worst <= tol && worst_hat <= tol && worst_check <= tol,
        &format!("residuals {worst:.3e} / {worst_hat:.3e} / {worst_check:.3e}"),
    );
}

#[test]
fn criterion_4_knife_edge_pipeline() {
    let dynamics = knife_edge_reduced();
    let geo = dynamics.as_constrained_geometry();
    let points = sample_for_constrained(&geo, &knife_edge_ranges(), 100, 4001);

    // reduced forces against the analytic law
    let mut worst_f = 0.0f64;
    for pt in &points {
        let red = dynamics.reduce(pt).unwrap();
        let expect = -pt.ua[0] * pt.ua[1] * pt.xa[0].tan();
        worst_f = worst_f.max(red.f[0].abs() / (1.0 + expect.abs()));
        worst_f = worst_f.max((red.f[1] - expect).abs() / (1.0 + expect.abs()));
    }

    // closed forms for the curvature blocks, CAS-verified beforehand
    let mut worst_t = 0.0f64;
    for pt in &points {
        let t = geo.tensors_at(&pt.slots(), 2).unwrap();
        let (phi0, u1, u2) = (pt.xa[0], pt.ua[0], pt.ua[1]);
        let sec2 = 1.0 / phi0.cos().powi(2);
        let tan = phi0.tan();
        let cases = [
            (t.phi[1][0], u1 * u2 * (3.0 * tan * tan + 2.0) / 4.0),
            (t.phi[1][1], u1 * u1 * (1.0 - 3.0 * sec2) / 4.0),
            (t.phi[0][0], 0.0),
            (t.phi[0][1], 0.0),
            (t.kk[0][0], -sec2 * u2),
            (t.kk[0][1], sec2 * u1),
        ];
        for (got, expect) in cases {
            worst_t = worst_t.max((got - expect).abs() / (1.0 + expect.abs()));
        }
    }

    // shape spectrum {0 (3-dim eigenspace with the system field and the
    // constraint field), ±sqrt(-Phi^2_2)} and the eigenvector structure
    let mut worst_gap = 0.0f64;
    let mut worst_vec = 0.0f64;
    let mut spectrum_ok = true;
    for pt in points.iter().take(25) {
        let t = geo.tensors_at(&pt.slots(), 2).unwrap();
        let mu = (-t.phi[1][1]).sqrt();
        assert!(mu.is_finite() && mu > 0.0);
        let shape = shape_constrained(&geo, pt).unwrap();
        let mut found = [false; 3];
        for root in &shape.real_roots {
            if root.mu.abs() < 1e-7 {
                found[0] = true;
                // kernel is 3-dimensional and contains Γ̃ (adapted e0) and
                // the constraint field (adapted e1)
                spectrum_ok &= root.eigenvectors_adapted.len() == 3;
                for target in [0usize, 1usize] {
                    let mut residual = vec![0.0; 6];
                    residual[target] = 1.0;
                    for q in &root.eigenvectors_adapted {
                        let norm2: f64 = q.iter().map(|v| v * v).sum();
                        let dot: f64 = q[target] / norm2;
                        for (r, qi) in residual.iter_mut().zip(q) {
                            *r -= dot * qi;
                        }
                    }
                    let miss = residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    worst_vec = worst_vec.max(miss);
                }
            } else if (root.mu - mu).abs() < 1e-7 || (root.mu + mu).abs() < 1e-7 {
                let idx = if root.mu > 0.0 { 1 } else { 2 };
                found[idx] = true;
                worst_gap = worst_gap.max((root.mu.abs() - mu).abs());
                // eigenvector structure −K^3_2 ∂y + μ H̃_2 + μ^2 Ṽ_2 in the
                // adapted order [Γ̃, ∂y, Ṽ1, Ṽ2, H̃1, H̃2]
                let m_ = root.mu;
                let predicted = [0.0, -t.kk[0][1], 0.0, m_ * m_, 0.0, m_];
                let pn: f64 = predicted.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert_eq!(root.eigenvectors_adapted.len(), 1);
                let v = &root.eigenvectors_adapted[0];
                let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut best = f64::INFINITY;
                for sign in [1.0, -1.0] {
                    let diff = predicted
                        .iter()
                        .zip(v)
                        .fold(0.0f64, |mx, (p, x)| mx.max((p / pn - sign * x / vn).abs()));
                    best = best.min(diff);
                }
                worst_vec = worst_vec.max(best);
            } else {
                spectrum_ok = false;
            }
        }
        spectrum_ok &= found.iter().all(|&f| f);
    }

    let pass = worst_f <= 1e-10 && worst_t <= 1e-8 && spectrum_ok && worst_vec <= 1e-7;
    conclude(
        4,
        "knife edge: reduced forces at 100 points, curvature-block closed forms, and the shape spectrum with eigenvector structure",
        pass,
        &format!(
            "force residual {worst_f:.3e}, closed-form residual {worst_t:.3e}, root gap {worst_gap:.3e}, eigenvector residual {worst_vec:.3e}"
        ),
    );
}

#[test]
fn criterion_5_rolling_ball() {
    // auxiliary connection from the sphere metric R^2 dα^2 + R^2 sin^2α dβ^2
    let names = vec!["alpha".to_string(), "beta".to_string()];
    let metric = vec![
        vec![
            sode_geometry::expr::parse("4").unwrap(),
            sode_geometry::expr::parse("0").unwrap(),
        ],
        vec![
            sode_geometry::expr::parse("0").unwrap(),
            sode_geometry::expr::parse("4*sin(alpha)^2").unwrap(),
        ],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let alpha_points = sample_points(&[(0.5, 2.6), (-2.5, 2.5)], |_| true, 50, &mut rng).unwrap();
    let mut worst_upsilon = 0.0f64;
    for p in &alpha_points {
        let ups = christoffel_from_metric(&names, &metric, p).unwrap();
        let al = p[0];
        let cases = [
            (ups[0][1][1], -al.sin() * al.cos()),
            (ups[1][0][1], al.cos() / al.sin()),
            (ups[1][1][0], al.cos() / al.sin()),
            (ups[0][0][0], 0.0),
            (ups[0][0][1], 0.0),
            (ups[0][1][0], 0.0),
            (ups[1][0][0], 0.0),
            (ups[1][1][1], 0.0),
        ];
        for (got, expect) in cases {
            worst_upsilon = worst_upsilon.max((got - expect).abs());
        }
    }

    let dynamics = rolling_ball();
    let geo = dynamics.as_constrained_geometry();
    let points = sample_for_constrained(&geo, &rolling_ball_ranges(), 50, 5005);

    // the constraint-field rows of the connection against the analytic
    // forms (CAS-verified against the component table beforehand)
    let rr = R_OVER_BIG_R;
    let mut worst_conn = 0.0f64;
    for pt in &points {
        let comps = constrained_connection_components(&geo, pt).unwrap();
        let (vphi, _psi, th, al, be) = (pt.xa[0], pt.xa[1], pt.xa[2], pt.xalpha[0], pt.xalpha[1]);
        let (u2, u3) = (pt.ua[1], pt.ua[2]);
        let csc2 = 1.0 / al.sin().powi(2);
        let cot = al.cos() / al.sin();
        // ∇_Γ ∂α = −(∂Ψ^β/∂x^α) ∂β
        let g_da_db = rr * csc2 * (u2 * th.sin() * (vphi - be).sin() + u3 * (vphi - be).cos());
        let g_db_da = -rr * (u3 * (vphi - be).cos() + u2 * th.sin() * (vphi - be).sin());
        let g_db_db = rr * (u3 * cot * (be - vphi).sin() + u2 * cot * th.sin() * (vphi - be).cos());
        let cases_gamma = [
            (-comps.dpsi_dxalpha[0][0], 0.0),
            (-comps.dpsi_dxalpha[1][0], g_da_db),
            (-comps.dpsi_dxalpha[0][1], g_db_da),
            (-comps.dpsi_dxalpha[1][1], g_db_db),
        ];
        // ∇_{H_a} ∂α = (∂Ψ^β_a/∂x^α) ∂β
        let h2_da_db = rr * csc2 * th.sin() * (vphi - be).sin();
        let h2_db_da = -rr * th.sin() * (vphi - be).sin();
        let h2_db_db = rr * cot * th.sin() * (vphi - be).cos();
        let h3_da_db = rr * csc2 * (vphi - be).cos();
        let h3_db_da = -rr * (vphi - be).cos();
        let h3_db_db = rr * cot * (be - vphi).sin();
        let cases_h = [
            (comps.dpsiab_dxalpha[0][0][0], 0.0),
            (comps.dpsiab_dxalpha[1][0][0], 0.0),
            (comps.dpsiab_dxalpha[0][0][1], 0.0),
            (comps.dpsiab_dxalpha[1][0][1], 0.0),
            (comps.dpsiab_dxalpha[1][1][0], h2_da_db),
            (comps.dpsiab_dxalpha[0][1][1], h2_db_da),
            (comps.dpsiab_dxalpha[1][1][1], h2_db_db),
            (comps.dpsiab_dxalpha[1][2][0], h3_da_db),
            (comps.dpsiab_dxalpha[0][2][1], h3_db_da),
            (comps.dpsiab_dxalpha[1][2][1], h3_db_db),
            (comps.dpsiab_dxalpha[0][1][0], 0.0),
            (comps.dpsiab_dxalpha[0][2][0], 0.0),
        ];
        for (got, expect) in cases_gamma.iter().chain(cases_h.iter()) {
            worst_conn = worst_conn.max((got - expect).abs() / (1.0 + expect.abs()));
        }
    }

    // the reduced (F, λ) satisfy the seven nonholonomic equations
    let mut worst_eq = 0.0f64;
    for pt in &points {
        let red = dynamics.reduce(pt).unwrap();
        let residual = ball_equation_residual(&dynamics, pt, &red.f, &red.lambda);
        worst_eq = worst_eq.max(residual);
    }

    let pass = worst_upsilon <= 1e-12 && worst_conn <= 1e-8 && worst_eq <= 1e-6;
    conclude(
        5,
        "rolling ball: metric-derived auxiliary connection, constraint-row connection components, and the seven nonholonomic equations",
        pass,
        &format!(
            "upsilon {worst_upsilon:.3e}, connection rows {worst_conn:.3e}, equations {worst_eq:.3e}"
        ),
    );
}

/// Residual of the seven displayed equations of the rolling ball, with the
/// second derivatives of the constrained coordinates expanded through the
/// constraint's total derivative.
fn ball_equation_residual(
    dynamics: &Arc<ReducedDynamics>,
    pt: &ConstrainedPoint,
    f: &[f64],
    lambda: &[f64],
) -> f64 {
    use sode_geometry::expr::{parse, JetEnv};
    use sode_geometry::jet::Jet;
    let p = pt.slots();
    let names: Vec<String> = [
        "t", "varphi", "psi", "theta", "alpha", "beta", "u_varphi", "u_psi", "u_theta",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let dim = p.len();
    let seeds: Vec<Jet> = (0..dim)
        .map(|v| Jet::seed(v, p[v], dim, 1).unwrap())
        .collect();
    let env = JetEnv::new(names, seeds);
    let psi4 = parse(BALL_PSI4).unwrap().eval(&env).unwrap();
    let psi5 = parse(BALL_PSI5).unwrap().eval(&env).unwrap();
    // total derivatives along solutions: slot order (t, x^a, x^α, u^a)
    let total = |j: &Jet| -> f64 {
        let mut acc = j.grad(0);
        for a in 0..3 {
            acc += p[6 + a] * j.grad(1 + a);
        }
        acc += psi4.value() * j.grad(4);
        acc += psi5.value() * j.grad(5);
        for b in 0..3 {
            acc += f[b] * j.grad(6 + b);
        }
        acc
    };
    let (vphi, _psi_c, th, al, be) = (p[1], p[2], p[3], p[4], p[5]);
    let (u1, u2, u3) = (p[6], p[7], p[8]);
    let (ad, bd) = (psi4.value(), psi5.value());
    let (add, bdd) = (total(&psi4), total(&psi5));
    let (l4, l5) = (lambda[0], lambda[1]);
    let rr = R_OVER_BIG_R;
    let eq = [
        BALL_MR * add - BALL_MR * bd * bd * al.sin() * al.cos() - BALL_MGR * al.sin() - l4,
        2.0 * BALL_MR * ad * bd * al.sin() * al.cos() + BALL_MR * bdd * al.sin().powi(2) - l5,
        BALL_I * f[0] - BALL_I * u3 * u2 * th.sin() + BALL_I * f[1] * th.cos() - rr * l5,
        BALL_I * f[1] - BALL_I * u3 * u1 * th.sin() + BALL_I * f[0] * th.cos()
            + rr * (th.sin() * (be - vphi).cos() * l4
                - (th.cos() + (al.cos() / al.sin()) * th.sin() * (be - vphi).sin()) * l5),
        BALL_I * f[2] + BALL_I * u2 * u1 * th.sin()
            + rr * ((be - vphi).sin() * l4 + (be - vphi).cos() * (al.cos() / al.sin()) * l5),
        ad - psi4.value(),
        bd - psi5.value(),
    ];
    let _ = dynamics;
    let scale = 1.0 + eq.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        .max(l4.abs())
        .max(l5.abs());
    eq.iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale
}

#[test]
fn criterion_6_constrained_connection_properties() {
    let tol = 1e-8;
    let ke = knife_edge_closed();
    let ke_points = sample_for_constrained(&ke, &knife_edge_ranges(), 50, 6006);
    let ke_report = verify::constrained_suite(&ke, &ke_points, 66).unwrap();

    let ball = rolling_ball().as_constrained_geometry();
    let ball_points = sample_for_constrained(&ball, &rolling_ball_ranges(), 50, 6007);
    let ball_report = verify::constrained_suite(&ball, &ball_points, 67).unwrap();

    let eleven = [
        "thm41_nabla_gamma",
        "thm41_nabla_dt",
        "thm41_nabla_s",
        "thm41_nabla_q",
        "thm41_vertical_flat",
        "thm41_ph_from_torsion",
        "thm41_pv_from_torsion",
        "thm41_curvature_gamma_v",
        "thm41_nabla_n",
        "thm41_upsilon_components",
        "thm41_mixed_torsion",
    ];
    let mut worst = 0.0f64;
    for name in eleven {
        worst = worst.max(ke_report.get(name).unwrap());
        worst = worst.max(ball_report.get(name).unwrap());
    }

    // with no constrained coordinates the pipeline reproduces the
    // unconstrained connection exactly
    let full = ConstrainedGeometry::from_system(
        &ConstrainedSystem::parse(
            &["phi", "x"],
            &[],
            &["0", "-u_phi*u_x*tan(phi)"],
            &[],
            None,
        )
        .unwrap(),
    );
    let plain = tan_2dof();
    let mut worst_reduction = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(913);
    let pts = sample_points(&tan_2dof_ranges(), |p| plain.tensors_at(p, 3).is_ok(), 20, &mut rng)
        .unwrap();
    for p in &pts {
        let a = full.tensors_at(p, 3).unwrap();
        let b = plain.tensors_at(p, 3).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                worst_reduction = worst_reduction.max((a.gamma[i][j] - b.gamma[i][j]).abs());
                worst_reduction = worst_reduction.max((a.phi[i][j] - b.phi[i][j]).abs());
                for kk in 0..2 {
                    worst_reduction =
                        worst_reduction.max((a.r_hat[i][j][kk] - b.r[i][j][kk]).abs());
                }
            }
        }
        // covariant derivatives agree on random fields
        let x = verify::random_vector_field(&mut rng, 5);
        let y = verify::random_vector_field(&mut rng, 5);
        let cpt = ConstrainedPoint::from_slots(2, 0, p);
        let ept = EvolutionPoint::from_slots(p);
        let da = sode_geometry::constrained::constrained_covderiv(&full, &x, &y, &cpt).unwrap();
        let db = sode_geometry::sode::mp_covderiv(&plain, &x, &y, &ept).unwrap();
        for (u, v) in da.iter().zip(&db) {
            worst_reduction = worst_reduction.max((u - v).abs());
        }
    }

    let pass = worst <= tol
        && ke_report.passes(tol)
        && ball_report.passes(tol)
        && worst_reduction <= 1e-12;
    conclude(
        6,
        "eleven constrained-connection properties on knife edge and rolling ball, and exact reduction to the unconstrained case",
        pass,
        &format!(
            "properties {worst:.3e}, suites max {:.3e}/{:.3e}, reduction gap {worst_reduction:.3e}",
            ke_report.max_residual(),
            ball_report.max_residual()
        ),
    );
}

#[test]
fn criterion_7_torsion_and_bracket_tables() {
    let tol = 1e-8;
    // unconstrained tables on two fixtures
    let mut worst = 0.0f64;
    for (geo, ranges) in [
        (damped_oscillator(), unit_ranges(3)),
        (tan_2dof(), tan_2dof_ranges()),
    ] {
        let points = sample_for_sode(&geo, &ranges, 25, 710);
        let report = verify::mp_suite(&geo, &points, 71).unwrap();
        worst = worst.max(report.get("torsion_table").unwrap());
        worst = worst.max(report.get("bracket_table").unwrap());
    }
    // constrained tables on the knife edge
    let ke = knife_edge_closed();
    let points = sample_for_constrained(&ke, &knife_edge_ranges(), 50, 711);
    let report = verify::constrained_suite(&ke, &points, 72).unwrap();
    let t = report.get("torsion_table").unwrap();
    let b = report.get("bracket_table_eq20").unwrap();
    worst = worst.max(t).max(b);
    conclude(
        7,
        "every torsion-table and basis-bracket entry matches the generic glue computations",
        worst <= tol,
        &format!("max residual {worst:.3e}"),
    );
}

#[test]
fn criterion_8_cli_determinism_and_robustness() {
    let bin = env!("CARGO_BIN_EXE_sode-geometry");
    let fixture = |name: &str| {
        format!(
            "{}/fixtures/{name}",
            env!("CARGO_MANIFEST_DIR")
        )
    };
    let run = |args: &[&str]| {
        std::process::Command::new(bin)
            .args(args)
            .output()
            .expect("binary runs")
    };

    // determinism: identical file + seed => byte-identical report
    let ke = fixture("knife_edge_constrained.json");
    let a = run(&["inspect", &ke, "--npoints", "5"]);
    let b = run(&["inspect", &ke, "--npoints", "5"]);
    assert!(a.status.success());
    let deterministic = a.stdout == b.stdout && !a.stdout.is_empty();

    // exit-code contract: clean verify passes with exit code 0
    let ok = run(&["verify", &fixture("damped_oscillator.json"), "--npoints", "10"]);
    let clean_pass = ok.status.code() == Some(0);

    // perturbed connection fails with residuals within one order of the
    // perturbation
    let out_path = std::env::temp_dir().join("sode_geometry_perturbed.json");
    let bad = run(&[
        "verify",
        &ke,
        "--npoints",
        "10",
        "--perturb",
        "1e-3",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    let perturbed_fails = bad.status.code() == Some(1);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let max_res = parsed["residuals"]
        .as_object()
        .unwrap()
        .values()
        .fold(0.0f64, |m, v| m.max(v.as_f64().unwrap()));
    let magnitude_ok = max_res >= 1e-4 && max_res <= 1e-2;

    // degenerate mass matrix reports a condition estimate and exits nonzero
    let sing = run(&["reduce", &fixture("singular_c.json")]);
    let singular_rejected = sing.status.code() == Some(2)
        && String::from_utf8_lossy(&sing.stderr).contains("condition");

    let pass =
        deterministic && clean_pass && perturbed_fails && magnitude_ok && singular_rejected;
    conclude(
        8,
        "CLI determinism, verify exit-code contract, perturbation sensitivity and singular-mass rejection",
        pass,
        &format!(
            "deterministic={deterministic}, clean_pass={clean_pass}, perturbed_fails={perturbed_fails}, perturbed residual {max_res:.3e}, singular_rejected={singular_rejected}"
        ),
    );
}

#[test]
#[ignore]
fn profile_mp_suite_scaling() {
    for (name, geo, ranges) in [
        ("free3", free_particle_n3(), unit_ranges(7)),
        ("osc", damped_oscillator(), unit_ranges(3)),
        ("tan2", tan_2dof(), tan_2dof_ranges()),
    ] {
        for n in [1usize, 3] {
            let points = sample_for_sode(&geo, &ranges, n, 42);
            let t0 = std::time::Instant::now();
            let _ = verify::mp_suite(&geo, &points, 1042).unwrap();
            println!("{name}: {n} points in {:.2?}", t0.elapsed());
        }
    }
}

#[test]
#[ignore]
fn profile_mp_sections() {
    let geo = free_particle_n3();
    let points = sample_for_sode(&geo, &unit_ranges(7), 1, 42);
    let p = points[0].slots();
    use sode_geometry::glue::{self, Connection};
    use sode_geometry::sode::MpConnection;
    use std::sync::Arc;
    use std::time::Instant;
    let conn = MpConnection { geo: geo.clone() };
    let conn_dyn: Arc<dyn Connection> = Arc::new(MpConnection { geo: geo.clone() });
    let gamma = geo.gamma_field();
    let x = {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        verify::random_vector_field(&mut rng, 7)
    };
    let t0 = Instant::now();
    let _ = conn.covderiv(&gamma, &x, &p, 0).unwrap();
    println!("covderiv order 0: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = conn.covderiv(&gamma, &x, &p, 1).unwrap();
    println!("covderiv order 1: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = glue::torsion(&conn, &gamma, &geo.v_field(0), &p).unwrap();
    println!("torsion: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = glue::curvature(&conn_dyn, &gamma, &geo.v_field(0), &geo.h_field(1), &p).unwrap();
    println!("curvature: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = sode_geometry::sode::mp_covderiv_from_table(&geo, &gamma, &x, &points[0]).unwrap();
    println!("table route: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let glued = sode_geometry::sode::mp_glued_connection(&geo);
    let _ = glued.covderiv(&gamma, &x, &p, 0).unwrap();
    println!("glued covderiv: {:.2?}", t0.elapsed());
}

#[test]
#[ignore]
fn profile_mp_sections2() {
    let geo = free_particle_n3();
    let points = sample_for_sode(&geo, &unit_ranges(7), 1, 42);
    let p = points[0].slots();
    use sode_geometry::glue;
    use std::time::Instant;
    let gamma = geo.gamma_field();
    let s = geo.s_tensor();
    let q = geo.q_tensor();
    let t0 = Instant::now();
    let lgs = glue::lie_derivative_matrix(&gamma, &s);
    let _ = lgs.values(&p).unwrap();
    println!("lgs values: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let lgq = glue::lie_derivative_matrix(&gamma, &q);
    let _ = lgq.values(&p).unwrap();
    println!("lgq values: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = lgq.compose(&s).values(&p).unwrap();
    println!("lgq compose s: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = geo.phi_tensor().values(&p).unwrap();
    println!("phi tensor: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = geo.phi_curvature_identity_residual(&p).unwrap();
    println!("phi-R identity: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let _ = sode_geometry::sode::mp_shape_and_torsion(&geo, &points[0]).unwrap();
    println!("shape: {:.2?}", t0.elapsed());
    let t0 = Instant::now();
    let rep = verify::mp_suite(&geo, &points[..1], 1042).unwrap();
    println!("full mp_suite 1pt: {:.2?} max {:.3e}", t0.elapsed(), rep.max_residual());
}
