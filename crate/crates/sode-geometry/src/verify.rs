//! Seeded residual suites for the defining identities.
//!
//! Each suite evaluates a family of identities numerically at supplied
//! points (or on randomly generated toy decompositions) and reports the
//! worst relative residual per identity. The CLI `verify` command and the
//! acceptance tests are both built on these runners.

use crate::constrained::{
    a_gamma_adapted_matrix, constrained_covderiv, eigen_equation_residual, shape_constrained,
    ConstrainedConnection, ConstrainedGeometry, ConstrainedPoint,
};
use crate::error::{GeomError, Result};
use crate::glue::{
    self, jet_values, lie_derivative_matrix, scale_of, Connection, MappedBracketDerivative,
    MatrixField, ScalarField, SubmoduleDerivative, VectorField,
};
use crate::jet::Jet;
use crate::nonholonomic::ReducedDynamics;
use crate::sode::{
    a_gamma_tensor_apply, curvature_tensor_apply, mp_components, mp_covderiv_from_table,
    mp_glued_connection, EvolutionPoint, MpConnection, SodeGeometry,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Worst residual per named identity.
#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    residuals: BTreeMap<String, f64>,
}

impl SuiteReport {
    pub fn new() -> SuiteReport {
        SuiteReport::default()
    }

    pub fn record(&mut self, name: &str, residual: f64) {
        let entry = self.residuals.entry(name.to_string()).or_insert(0.0);
        if residual > *entry {
            *entry = residual;
        }
    }

    pub fn merge(&mut self, other: SuiteReport) {
        for (name, value) in other.residuals {
            self.record(&name, value);
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.values().fold(0.0f64, |m, v| m.max(*v))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.residuals.values().all(|v| v.is_finite() && *v <= tol)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.residuals.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn failing(&self, tol: f64) -> Vec<(String, f64)> {
        self.residuals
            .iter()
            .filter(|(_, v)| !v.is_finite() || **v > tol)
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    pub fn into_map(self) -> BTreeMap<String, f64> {
        self.residuals
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.residuals.get(name).copied()
    }
}

fn diff_scaled(a: &[f64], b: &[f64]) -> f64 {
    let scale = scale_of([a, b]);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn norm_scaled(a: &[f64], context: &[f64]) -> f64 {
    let scale = scale_of([a, context]);
    a.iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale
}

// ---------------------------------------------------------------------------
// Random fields
// ---------------------------------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

/// Random polynomial of total degree <= 2 over the slot variables, as a
/// scalar field.
pub fn random_scalar_field(rng: &mut ChaCha8Rng, dim: usize) -> ScalarField {
    let constant = uniform(rng);
    let linear: Vec<f64> = (0..dim).map(|_| uniform(rng)).collect();
    let quad: Vec<(usize, usize, f64)> = (0..dim)
        .map(|_| {
            (
                rng.gen_range(0..dim),
                rng.gen_range(0..dim),
                0.5 * uniform(rng),
            )
        })
        .collect();
    ScalarField::new(dim, move |p, order| {
        let mut acc = Jet::constant(constant, dim, order);
        for (v, &c) in linear.iter().enumerate() {
            acc = acc.add(&Jet::coordinate(v, p[v], dim, order)?.scale(c));
        }
        for &(i, j, c) in &quad {
            let a = Jet::coordinate(i, p[i], dim, order)?;
            let b = Jet::coordinate(j, p[j], dim, order)?;
            acc = acc.add(&a.mul(&b).scale(c));
        }
        Ok(acc)
    })
}

/// Random vector field with degree-<=2 polynomial components.
pub fn random_vector_field(rng: &mut ChaCha8Rng, dim: usize) -> VectorField {
    let comps: Vec<ScalarField> = (0..dim).map(|_| random_scalar_field(rng, dim)).collect();
    VectorField::new(dim, move |p, order| {
        comps.iter().map(|c| c.eval(p, order)).collect()
    })
}

// ---------------------------------------------------------------------------
// Toy decompositions for the glueing axioms
// ---------------------------------------------------------------------------

/// Smooth invertible frame `T(p) = I + A + Σ_k p_k B_k` with entries small
/// enough to keep `T` invertible on [-1, 1]^dim.
fn random_frame(rng: &mut ChaCha8Rng, dim: usize) -> (MatrixField, MatrixField) {
    let ca = 0.3 / dim as f64;
    let cb = 0.3 / (dim * dim) as f64;
    let a: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| ca * uniform(rng)).collect())
        .collect();
    let b: Vec<Vec<Vec<f64>>> = (0..dim)
        .map(|_| {
            (0..dim)
                .map(|_| (0..dim).map(|_| cb * uniform(rng)).collect())
                .collect()
        })
        .collect();
    let t = MatrixField::new(dim, move |p, order| {
        let mut m = vec![vec![Jet::constant(0.0, dim, order); dim]; dim];
        for r in 0..dim {
            for c in 0..dim {
                let mut e = Jet::constant(if r == c { 1.0 } else { 0.0 } + a[r][c], dim, order);
                for k in 0..dim {
                    e = e.add(&Jet::coordinate(k, p[k], dim, order)?.scale(b[k][r][c]));
                }
                m[r][c] = e;
            }
        }
        Ok(m)
    });
    let t2 = t.clone();
    let tinv = MatrixField::new(dim, move |p, order| {
        crate::linalg::jet_invert(&t2.eval(p, order)?)
    });
    (t, tinv)
}

/// `T (Σ e_row e_col^T) T^{-1}` as a tensor field.
fn sandwich(t: &MatrixField, tinv: &MatrixField, pairs: Vec<(usize, usize)>) -> MatrixField {
    let dim = t.dim();
    let (t, tinv) = (t.clone(), tinv.clone());
    MatrixField::new(dim, move |p, order| {
        let tj = t.eval(p, order)?;
        let ti = tinv.eval(p, order)?;
        let mut m = vec![vec![Jet::constant(0.0, dim, order); dim]; dim];
        for &(row, col) in &pairs {
            for r in 0..dim {
                for c in 0..dim {
                    m[r][c] = m[r][c].add(&tj[r][row].mul(&ti[col][c]));
                }
            }
        }
        Ok(m)
    })
}

/// Coefficient-table submodule derivative on a frame block:
/// `∇_X (Σ y^i E_i) = Σ X(y^i) E_i + Σ y^i ω^j_i(X) E_j`, with random
/// degree-1 connection coefficients. `out` may exceed `block` to build
/// instances that leak outside their image and violate parallelism.
struct CoefficientDerivative {
    t: MatrixField,
    tinv: MatrixField,
    block: Vec<usize>,
    out: Vec<usize>,
    /// omega[j][i][k]: (constant, linear-in-p) coefficient against the
    /// direction slot k
    omega: Vec<Vec<Vec<(f64, Vec<f64>)>>>,
}

impl CoefficientDerivative {
    fn random(
        rng: &mut ChaCha8Rng,
        t: &MatrixField,
        tinv: &MatrixField,
        block: Vec<usize>,
        out: Vec<usize>,
    ) -> CoefficientDerivative {
        let dim = t.dim();
        let omega = out
            .iter()
            .map(|_| {
                block
                    .iter()
                    .map(|_| {
                        (0..dim)
                            .map(|_| {
                                (
                                    0.5 * uniform(rng),
                                    (0..dim).map(|_| 0.3 * uniform(rng)).collect(),
                                )
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        CoefficientDerivative {
            t: t.clone(),
            tinv: tinv.clone(),
            block,
            out,
            omega,
        }
    }
}

impl SubmoduleDerivative for CoefficientDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let dim = self.t.dim();
        let tj = self.t.eval(p, order)?;
        let xj = x.eval(p, order)?;
        let mut out_jets = vec![Jet::constant(0.0, dim, order); dim];
        for (bi, &i) in self.block.iter().enumerate() {
            let (tinv_f, yy) = (self.tinv.clone(), y.clone());
            let coeff = ScalarField::new(dim, move |q, ord| {
                let ti = tinv_f.eval(q, ord)?;
                let yv = yy.eval(q, ord)?;
                let mut acc = Jet::constant(0.0, ti.len(), ord);
                for (m, v) in ti[i].iter().zip(&yv) {
                    acc = acc.add(&m.mul(v));
                }
                Ok(acc)
            });
            let xc = x.derive_scalar(&coeff, p, order)?;
            let yi = coeff.eval(p, order)?;
            for r in 0..dim {
                out_jets[r] = out_jets[r].add(&xc.mul(&tj[r][i]));
            }
            for (ji, &j) in self.out.iter().enumerate() {
                let mut w = Jet::constant(0.0, dim, order);
                for (kslot, xk) in xj.iter().enumerate() {
                    let (c0, lin) = &self.omega[ji][bi][kslot];
                    let mut coef = Jet::constant(*c0, dim, order);
                    for (l, &cl) in lin.iter().enumerate() {
                        coef = coef.add(&Jet::coordinate(l, p[l], dim, order)?.scale(cl));
                    }
                    w = w.add(&coef.mul(xk));
                }
                let term = yi.mul(&w);
                for r in 0..dim {
                    out_jets[r] = out_jets[r].add(&term.mul(&tj[r][j]));
                }
            }
        }
        Ok(out_jets)
    }
}

/// One random toy decomposition and its glued connection.
pub struct ToyDecomposition {
    pub dim: usize,
    pub blocks: Vec<Vec<usize>>,
    pub projectors: Vec<MatrixField>,
    pub connection: Arc<glue::GluedConnection>,
    parts: Vec<Arc<dyn SubmoduleDerivative>>,
}

/// Build a random decomposition of dimension 3..=6 with 2–3 blocks. The
/// parts are bracket-shaped derivatives on a pair of equal-size blocks and
/// coefficient tables elsewhere. With `leak`, one coefficient part outputs
/// outside its block, violating the projector-parallelism condition.
pub fn random_toy(rng: &mut ChaCha8Rng, leak: bool) -> ToyDecomposition {
    let templates: Vec<Vec<Vec<usize>>> = vec![
        vec![vec![0], vec![1], vec![2]],
        vec![vec![0, 1], vec![2, 3]],
        vec![vec![0], vec![1], vec![2, 3]],
        vec![vec![0, 1], vec![2, 3], vec![4]],
        vec![vec![0, 1, 2], vec![3, 4, 5]],
        vec![vec![0, 1], vec![2, 3], vec![4, 5]],
    ];
    let blocks = templates[rng.gen_range(0..templates.len())].clone();
    let dim = blocks.iter().map(|b| b.len()).sum();
    let (t, tinv) = random_frame(rng, dim);
    let projectors: Vec<MatrixField> = blocks
        .iter()
        .map(|b| sandwich(&t, &tinv, b.iter().map(|&i| (i, i)).collect()))
        .collect();
    // the first pair of equal-size blocks hosts the bracket-form parts
    let mut paired: Option<(usize, usize)> = None;
    'outer: for i in 0..blocks.len() {
        for j in (i + 1)..blocks.len() {
            if blocks[i].len() == blocks[j].len() {
                paired = Some((i, j));
                break 'outer;
            }
        }
    }
    let leak_block = if leak {
        let candidates: Vec<usize> = (0..blocks.len())
            .filter(|idx| paired.map_or(true, |(a, b)| *idx != a && *idx != b))
            .collect();
        if candidates.is_empty() {
            paired = None;
            Some(rng.gen_range(0..blocks.len()))
        } else {
            Some(candidates[rng.gen_range(0..candidates.len())])
        }
    } else {
        None
    };
    let mut parts: Vec<Arc<dyn SubmoduleDerivative>> = Vec::new();
    for (idx, block) in blocks.iter().enumerate() {
        let in_pair = paired.map_or(false, |(a, b)| idx == a || idx == b);
        if in_pair {
            let (a, b) = paired.unwrap();
            let partner = if idx == a { b } else { a };
            let to = sandwich(
                &t,
                &tinv,
                blocks[partner]
                    .iter()
                    .zip(block.iter())
                    .map(|(&pr, &br)| (pr, br))
                    .collect(),
            );
            let from = sandwich(
                &t,
                &tinv,
                block
                    .iter()
                    .zip(blocks[partner].iter())
                    .map(|(&br, &pr)| (br, pr))
                    .collect(),
            );
            parts.push(Arc::new(MappedBracketDerivative {
                to_partner: to,
                from_partner: from,
            }));
        } else {
            let mut out = block.clone();
            if leak_block == Some(idx) {
                let other = (idx + 1) % blocks.len();
                out.push(blocks[other][0]);
            }
            parts.push(Arc::new(CoefficientDerivative::random(
                rng,
                &t,
                &tinv,
                block.clone(),
                out,
            )));
        }
    }
    let conn_parts: Vec<(MatrixField, Arc<dyn SubmoduleDerivative>)> = projectors
        .iter()
        .cloned()
        .zip(parts.iter().cloned())
        .collect();
    ToyDecomposition {
        dim,
        blocks,
        projectors,
        connection: Arc::new(glue::GluedConnection::new(dim, conn_parts)),
        parts,
    }
}

/// The two covariant-derivative axioms plus additivity and R-linearity for
/// one (f, X, Y, p) draw.
fn axiom_residuals(
    conn: &dyn Connection,
    f: &ScalarField,
    x: &VectorField,
    x2: &VectorField,
    y: &VectorField,
    p: &[f64],
    report: &mut SuiteReport,
) -> Result<()> {
    let base = jet_values(&conn.covderiv(x, y, p, 0)?);
    let fval = f.eval(p, 0)?.value();
    let xf = x.derive_scalar(f, p, 0)?.value();
    let yv = y.values(p)?;
    let fx = x.scale_fn(f);
    let lhs = jet_values(&conn.covderiv(&fx, y, p, 0)?);
    let expect: Vec<f64> = base.iter().map(|b| fval * b).collect();
    report.record("thm22_direction_linearity", diff_scaled(&lhs, &expect));
    let fy = y.scale_fn(f);
    let lhs = jet_values(&conn.covderiv(x, &fy, p, 0)?);
    let expect: Vec<f64> = base
        .iter()
        .zip(&yv)
        .map(|(b, yc)| xf * yc + fval * b)
        .collect();
    report.record("thm22_leibniz", diff_scaled(&lhs, &expect));
    let base2 = jet_values(&conn.covderiv(x2, y, p, 0)?);
    let lhs = jet_values(&conn.covderiv(&x.add(x2), y, p, 0)?);
    let expect: Vec<f64> = base.iter().zip(&base2).map(|(a, b)| a + b).collect();
    report.record("additivity_direction", diff_scaled(&lhs, &expect));
    let lhs = jet_values(&conn.covderiv(x, &y.scale(-1.75), p, 0)?);
    let expect: Vec<f64> = base.iter().map(|b| -1.75 * b).collect();
    report.record("r_linearity_argument", diff_scaled(&lhs, &expect));
    Ok(())
}

/// The §2 suite over random toy decompositions: covariant-derivative axioms
/// of the glued connection, projector parallelism in both directions, the
/// same-/cross-submodule case formulas and the agreement of the two shape
/// map representations.
pub fn glue_toy_suite(seed: u64, ndecomp: usize, ntuples: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new();
    for _ in 0..ndecomp {
        let toy = random_toy(&mut rng, false);
        let dim = toy.dim;
        for _ in 0..ntuples {
            let p: Vec<f64> = (0..dim).map(|_| uniform(&mut rng)).collect();
            let f = random_scalar_field(&mut rng, dim);
            let x = random_vector_field(&mut rng, dim);
            let x2 = random_vector_field(&mut rng, dim);
            let y = random_vector_field(&mut rng, dim);
            axiom_residuals(toy.connection.as_ref(), &f, &x, &x2, &y, &p, &mut report)?;
        }
        for _ in 0..5 {
            let p: Vec<f64> = (0..dim).map(|_| uniform(&mut rng)).collect();
            for pf in &toy.projectors {
                report.record("projector_idempotent", glue::projector_residual(pf, &p)?);
            }
            report.record(
                "decomposition_sum",
                glue::decomposition_residual(&toy.projectors, &p)?,
            );
            let x = random_vector_field(&mut rng, dim);
            let y = random_vector_field(&mut rng, dim);
            // every part maps into its image, so ∇P_B = 0 must hold
            for pf in &toy.projectors {
                report.record(
                    "cor23_projector_parallel",
                    glue::projector_parallel_residual(toy.connection.as_ref(), pf, &x, &y, &p)?,
                );
            }
            // same-submodule case: glue equals the part
            let b = rng.gen_range(0..toy.blocks.len());
            let xb = toy.projectors[b].apply(&x);
            let yb = toy.projectors[b].apply(&y);
            let same = jet_values(&toy.connection.covderiv(&xb, &yb, &p, 0)?);
            let part = jet_values(&toy.parts[b].eval(&xb, &yb, &p, 0)?);
            report.record("cor25_same_submodule", diff_scaled(&same, &part));
            // cross case: ∇, T and A against the projected brackets
            let c = (b + 1) % toy.blocks.len();
            let yc = toy.projectors[c].apply(&y);
            let br = glue::lie_bracket(&xb, &yc, &p)?;
            let nabla = jet_values(&toy.connection.covderiv(&xb, &yc, &p, 0)?);
            let pc = toy.projectors[c].values(&p)?;
            let expect: Vec<f64> = (0..dim)
                .map(|r| pc[r].iter().zip(&br).map(|(m, v)| m * v).sum())
                .collect();
            report.record("cor25_cross_derivative", diff_scaled(&nabla, &expect));
            let tor = glue::torsion(toy.connection.as_ref(), &xb, &yc, &p)?;
            let mut expect = vec![0.0; dim];
            for (d, pf) in toy.projectors.iter().enumerate() {
                if d == b || d == c {
                    continue;
                }
                let pd = pf.values(&p)?;
                for r in 0..dim {
                    expect[r] -= pd[r].iter().zip(&br).map(|(m, v)| m * v).sum::<f64>();
                }
            }
            report.record("cor25_cross_torsion", diff_scaled(&tor, &expect));
            let conn_dyn: Arc<dyn Connection> = toy.connection.clone();
            let shape = glue::shape_map(&conn_dyn, &xb, &yc, &p, glue::ShapeMode::Bracket)?;
            let mut expect = vec![0.0; dim];
            for (d, pf) in toy.projectors.iter().enumerate() {
                if d == c {
                    continue;
                }
                let pd = pf.values(&p)?;
                for r in 0..dim {
                    expect[r] -= pd[r].iter().zip(&br).map(|(m, v)| m * v).sum::<f64>();
                }
            }
            report.record("cor25_cross_shape", diff_scaled(&shape, &expect));
            let s2 = glue::shape_map(&conn_dyn, &xb, &yc, &p, glue::ShapeMode::Torsion)?;
            report.record("shape_representations", diff_scaled(&shape, &s2));
        }
    }
    // the converse direction: a part leaking outside its image must surface
    // as a nonzero ∇P residual
    let mut worst_leak = 0.0f64;
    for _ in 0..4 {
        let toy = random_toy(&mut rng, true);
        let dim = toy.dim;
        for _ in 0..10 {
            let p: Vec<f64> = (0..dim).map(|_| uniform(&mut rng)).collect();
            let x = random_vector_field(&mut rng, dim);
            let y = random_vector_field(&mut rng, dim);
            for pf in &toy.projectors {
                worst_leak = worst_leak.max(glue::projector_parallel_residual(
                    toy.connection.as_ref(),
                    pf,
                    &x,
                    &y,
                    &p,
                )?);
            }
        }
    }
    report.record(
        "cor23_violation_detected",
        if worst_leak > 1e-4 { 0.0 } else { 1.0 },
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// Unconstrained suite
// ---------------------------------------------------------------------------

fn apply_matrix(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// The §3 suite at given points: frame duality, the eigenstructure of
/// `L_Γ S`, the eight characterising properties of the connection, the
/// curvature identity, `(L_Γ Q)∘S = Φ`, the component table against the
/// intrinsic formula, the bracket relations and the torsion table.
pub fn mp_suite(
    geo: &Arc<SodeGeometry>,
    points: &[EvolutionPoint],
    seed: u64,
) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new();
    let n = geo.n();
    let dim = geo.dim();
    let conn = MpConnection { geo: geo.clone() };
    let conn_dyn: Arc<dyn Connection> = Arc::new(MpConnection { geo: geo.clone() });
    let glued = mp_glued_connection(geo);
    let gamma = geo.gamma_field();
    let s = geo.s_tensor();
    let q = geo.q_tensor();
    let p_h = geo.p_h();
    let p_v = geo.p_v();

    for point in points {
        let p = point.slots();
        let t = geo.tensors_at(&p, 2)?;
        let frame = geo.frame_rows(&p, 0)?;
        let co = geo.coframe_rows(&p, 0)?;
        let mut duality = 0.0f64;
        for (i, row) in co.iter().enumerate() {
            for (j, vecr) in frame.iter().enumerate() {
                let pairing: f64 =
                    row.iter().zip(vecr).map(|(a, b)| a.value() * b.value()).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                duality = duality.max((pairing - expect).abs());
            }
        }
        report.record("duality", duality);

        let lgs_m = lie_derivative_matrix(&gamma, &s).values(&p)?;
        let gv = gamma.values(&p)?;
        report.record("lgs_on_gamma", norm_scaled(&apply_matrix(&lgs_m, &gv), &gv));
        for i in 0..n {
            let vv = geo.v_field(i).values(&p)?;
            report.record("lgs_on_vertical", diff_scaled(&apply_matrix(&lgs_m, &vv), &vv));
            let hv = geo.h_field(i).values(&p)?;
            let expect: Vec<f64> = hv.iter().map(|x| -x).collect();
            report.record(
                "lgs_on_horizontal",
                diff_scaled(&apply_matrix(&lgs_m, &hv), &expect),
            );
        }

        let lgq = lie_derivative_matrix(&gamma, &q);
        let lgq_s = lgq.compose(&s).values(&p)?;
        let phi_t = geo.phi_tensor().values(&p)?;
        let mut worst = 0.0f64;
        let mut scale = 1.0f64;
        for r in 0..dim {
            for c in 0..dim {
                worst = worst.max((lgq_s[r][c] - phi_t[r][c]).abs());
                scale = scale.max(phi_t[r][c].abs());
            }
        }
        report.record("lgq_compose_s_is_phi", worst / scale);
        let lgq_m = lgq.values(&p)?;
        let qm = q.values(&p)?;
        let mut worst = 0.0f64;
        for r in 0..dim {
            for c in 0..dim {
                let mut comm = 0.0;
                for kk in 0..dim {
                    comm += phi_t[r][kk] * qm[kk][c] - qm[r][kk] * phi_t[kk][c];
                }
                worst = worst.max((lgq_m[r][c] - comm).abs());
            }
        }
        report.record("lgq_is_phi_q_commutator", worst / scale);
        report.record(
            "phi_curvature_identity",
            geo.phi_curvature_identity_residual(&p)?,
        );

        let x = random_vector_field(&mut rng, dim);
        let y = random_vector_field(&mut rng, dim);
        let xv = x.values(&p)?;
        let dg = jet_values(&conn.covderiv(&x, &gamma, &p, 0)?);
        report.record("prop33_nabla_gamma", norm_scaled(&dg, &xv));
        let dxy = jet_values(&conn.covderiv(&x, &y, &p, 0)?);
        let yy = y.clone();
        let dty = ScalarField::new(dim, move |pt, ord| Ok(yy.eval(pt, ord)?[0].clone()));
        let lhs = x.derive_scalar(&dty, &p, 0)?.value();
        report.record(
            "prop33_nabla_dt",
            (lhs - dxy[0]).abs() / scale_of([dxy.as_slice()]),
        );
        for (name, tensor) in [("prop33_nabla_s", &s), ("prop33_nabla_q", &q)] {
            let ty = tensor.apply(&y);
            let lhs = jet_values(&conn.covderiv(&x, &ty, &p, 0)?);
            let tm = tensor.values(&p)?;
            let expect = apply_matrix(&tm, &dxy);
            report.record(name, diff_scaled(&lhs, &expect));
        }
        let tor = glue::torsion(&conn, &gamma, &s.apply(&x), &p)?;
        let phx = apply_matrix(&p_h.values(&p)?, &xv);
        report.record("prop33_ph_from_torsion", diff_scaled(&tor, &phx));
        let tgx = glue::torsion(&conn, &gamma, &x, &p)?;
        let stgx = apply_matrix(&s.values(&p)?, &tgx);
        let pvx = apply_matrix(&p_v.values(&p)?, &xv);
        report.record("prop33_pv_from_torsion", diff_scaled(&stgx, &pvx));
        for i in 0..n {
            for z in [geo.h_field(i), geo.v_field((i + 1) % n)] {
                let r = glue::curvature(&conn_dyn, &gamma, &geo.v_field(i), &z, &p)?;
                report.record("prop33_curvature_gamma_v", norm_scaled(&r, &[1.0]));
            }
        }
        // vertical lift: components independent of the fibre coordinates
        let coeffs: Vec<(f64, Vec<f64>)> = (0..n)
            .map(|_| {
                (
                    uniform(&mut rng),
                    (0..=n).map(|_| uniform(&mut rng)).collect(),
                )
            })
            .collect();
        let geo_lift = geo.clone();
        let lift = VectorField::new(dim, move |pt, ord| {
            let d = geo_lift.dim();
            let mut out = vec![Jet::constant(0.0, d, ord); d];
            for (i, (c0, cl)) in coeffs.iter().enumerate() {
                let mut acc = Jet::constant(*c0, d, ord);
                for (idx, &c) in cl.iter().enumerate() {
                    acc = acc.add(&Jet::coordinate(idx, pt[idx], d, ord)?.scale(c));
                }
                out[geo_lift.u_slot(i)] = acc;
            }
            Ok(out)
        });
        let vdir = p_v.apply(&x);
        let dvu = jet_values(&conn.covderiv(&vdir, &lift, &p, 0)?);
        report.record("prop33_vertical_lift", norm_scaled(&dvu, &xv));

        let table = mp_covderiv_from_table(geo, &x, &y, point)?;
        report.record("intrinsic_vs_components", diff_scaled(&dxy, &table));
        let gl = jet_values(&glued.covderiv(&x, &y, &p, 0)?);
        report.record("glued_vs_intrinsic", diff_scaled(&dxy, &gl));

        // commutator relations with V/H-valued fields
        let xv_f = p_v.apply(&x);
        let yv_f = p_v.apply(&y);
        let xh_f = p_h.apply(&x);
        let yh_f = p_h.apply(&y);
        let lhs = glue::lie_bracket(&gamma, &xv_f, &p)?;
        let d = jet_values(&conn.covderiv(&gamma, &xv_f, &p, 0)?);
        let a = a_gamma_tensor_apply(geo, &p, &xv_f.values(&p)?)?;
        let expect: Vec<f64> = d.iter().zip(&a).map(|(u, v)| u - v).collect();
        report.record("commutator_gamma_vertical", diff_scaled(&lhs, &expect));
        let lhs = glue::lie_bracket(&gamma, &xh_f, &p)?;
        let d = jet_values(&conn.covderiv(&gamma, &xh_f, &p, 0)?);
        let a = a_gamma_tensor_apply(geo, &p, &xh_f.values(&p)?)?;
        let expect: Vec<f64> = d.iter().zip(&a).map(|(u, v)| u - v).collect();
        report.record("commutator_gamma_horizontal", diff_scaled(&lhs, &expect));
        let lhs = glue::lie_bracket(&xv_f, &yv_f, &p)?;
        let d1 = jet_values(&conn.covderiv(&xv_f, &yv_f, &p, 0)?);
        let d2 = jet_values(&conn.covderiv(&yv_f, &xv_f, &p, 0)?);
        let expect: Vec<f64> = d1.iter().zip(&d2).map(|(u, v)| u - v).collect();
        report.record("commutator_vertical_vertical", diff_scaled(&lhs, &expect));
        let lhs = glue::lie_bracket(&xv_f, &yh_f, &p)?;
        let d1 = jet_values(&conn.covderiv(&xv_f, &yh_f, &p, 0)?);
        let d2 = jet_values(&conn.covderiv(&yh_f, &xv_f, &p, 0)?);
        let expect: Vec<f64> = d1.iter().zip(&d2).map(|(u, v)| u - v).collect();
        report.record("commutator_vertical_horizontal", diff_scaled(&lhs, &expect));
        let lhs = glue::lie_bracket(&xh_f, &yh_f, &p)?;
        let d1 = jet_values(&conn.covderiv(&xh_f, &yh_f, &p, 0)?);
        let d2 = jet_values(&conn.covderiv(&yh_f, &xh_f, &p, 0)?);
        let rr = curvature_tensor_apply(geo, &p, &xh_f.values(&p)?, &yh_f.values(&p)?)?;
        let expect: Vec<f64> = (0..dim).map(|i| d1[i] - d2[i] + rr[i]).collect();
        report.record(
            "commutator_horizontal_horizontal",
            diff_scaled(&lhs, &expect),
        );

        // torsion and bracket tables on every basis pair
        let comps = mp_components(geo, point)?;
        let h_rows: Vec<Vec<f64>> = (0..n)
            .map(|i| geo.h_field(i).values(&p))
            .collect::<Result<_>>()?;
        let basis: Vec<(usize, VectorField)> = std::iter::once((0usize, gamma.clone()))
            .chain((0..n).map(|i| (1 + i, geo.v_field(i))))
            .chain((0..n).map(|i| (1 + n + i, geo.h_field(i))))
            .collect();
        for (ia, fa) in &basis {
            for (ib, fb) in &basis {
                if ib <= ia {
                    continue;
                }
                let tor = glue::torsion(&conn, fa, fb, &p)?;
                let mut expect = vec![0.0; dim];
                if *ia == 0 && (1..=n).contains(ib) {
                    expect.copy_from_slice(&h_rows[ib - 1]);
                } else if *ia == 0 && *ib > n {
                    let i = ib - 1 - n;
                    for j in 0..n {
                        expect[geo.u_slot(j)] -= t.phi[j][i];
                    }
                } else if *ia > n && *ib > n {
                    let i = ia - 1 - n;
                    let j = ib - 1 - n;
                    for kk in 0..n {
                        expect[geo.u_slot(kk)] -= t.r[kk][i][j];
                    }
                }
                report.record("torsion_table", diff_scaled(&tor, &expect));

                let br = glue::lie_bracket(fa, fb, &p)?;
                let mut expect = vec![0.0; dim];
                if *ia == 0 && (1..=n).contains(ib) {
                    // [Γ, V_i] = −H_i + Γ^j_i V_j
                    let i = ib - 1;
                    for (c, h) in h_rows[i].iter().enumerate() {
                        expect[c] -= h;
                    }
                    for j in 0..n {
                        expect[geo.u_slot(j)] += t.gamma[j][i];
                    }
                } else if *ia == 0 && *ib > n {
                    // [Γ, H_i] = Γ^j_i H_j + Φ^j_i V_j
                    let i = ib - 1 - n;
                    for j in 0..n {
                        for c in 0..dim {
                            expect[c] += t.gamma[j][i] * h_rows[j][c];
                        }
                        expect[geo.u_slot(j)] += t.phi[j][i];
                    }
                } else if (1..=n).contains(ia) && *ib > n {
                    // [V_i, H_j] = −V_j(Γ^k_i)... ordered pair gives the sign
                    let i = ia - 1;
                    let j = ib - 1 - n;
                    for kk in 0..n {
                        expect[geo.u_slot(kk)] -= comps.dgamma_du[kk][j][i];
                    }
                } else if *ia > n && *ib > n {
                    // [H_i, H_j] = R^k_{ij} V_k
                    let i = ia - 1 - n;
                    let j = ib - 1 - n;
                    for kk in 0..n {
                        expect[geo.u_slot(kk)] += t.r[kk][i][j];
                    }
                }
                report.record("bracket_table", diff_scaled(&br, &expect));
            }
        }

        let s1 = glue::shape_map(&conn_dyn, &gamma, &x, &p, glue::ShapeMode::Bracket)?;
        let s2 = glue::shape_map(&conn_dyn, &gamma, &x, &p, glue::ShapeMode::Torsion)?;
        report.record("shape_representations", diff_scaled(&s1, &s2));
        let s3 = a_gamma_tensor_apply(geo, &p, &xv)?;
        report.record("shape_tensor_form", diff_scaled(&s1, &s3));
        let shape = crate::sode::mp_shape_and_torsion(geo, point)?;
        for pair in &shape.real_eigenpairs {
            let av = a_gamma_tensor_apply(geo, &p, &pair.vector_coords)?;
            let expect: Vec<f64> = pair.vector_coords.iter().map(|v| pair.mu * v).collect();
            report.record("shape_eigen_equations", diff_scaled(&av, &expect));
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Constrained suite
// ---------------------------------------------------------------------------

/// The §4 suite at given points: duality, eigenstructure, the eleven
/// characterising properties of the constrained connection, the two
/// vertical-derivative identities, the basis bracket table, the torsion
/// table and the shape-map eigenvalue condition.
pub fn constrained_suite(
    geo: &Arc<ConstrainedGeometry>,
    points: &[ConstrainedPoint],
    seed: u64,
) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new();
    let (m, k) = (geo.m(), geo.k());
    let dim = geo.dim();
    let conn = ConstrainedConnection { geo: geo.clone() };
    let conn_dyn: Arc<dyn Connection> = Arc::new(ConstrainedConnection { geo: geo.clone() });
    let glued = crate::constrained::constrained_glued_connection(geo);
    let gamma = geo.gamma_field();
    let s = geo.s_tensor();
    let q = geo.q_tensor();
    let p_h = geo.p_h();
    let p_v = geo.p_v();
    let n_t = geo.n_tensor();

    for point in points {
        let p = point.slots();
        let t = geo.tensors_at(&p, 2)?;
        let frame = geo.frame_rows(&p, 0)?;
        let co = geo.coframe_rows(&p, 0)?;
        let mut duality = 0.0f64;
        for (i, row) in co.iter().enumerate() {
            for (j, vecr) in frame.iter().enumerate() {
                let pairing: f64 =
                    row.iter().zip(vecr).map(|(a, b)| a.value() * b.value()).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                duality = duality.max((pairing - expect).abs());
            }
        }
        report.record("duality", duality);

        let lgs_m = lie_derivative_matrix(&gamma, &s).values(&p)?;
        let gv = gamma.values(&p)?;
        report.record("lgs_on_gamma", norm_scaled(&apply_matrix(&lgs_m, &gv), &gv));
        for al in 0..k {
            let dv = geo.dalpha_field(al).values(&p)?;
            report.record(
                "lgs_on_constraint",
                norm_scaled(&apply_matrix(&lgs_m, &dv), &dv),
            );
        }
        for a in 0..m {
            let vv = geo.v_field(a).values(&p)?;
            report.record("lgs_on_vertical", diff_scaled(&apply_matrix(&lgs_m, &vv), &vv));
            let hv = geo.h_field(a).values(&p)?;
            let expect: Vec<f64> = hv.iter().map(|x| -x).collect();
            report.record(
                "lgs_on_horizontal",
                diff_scaled(&apply_matrix(&lgs_m, &hv), &expect),
            );
        }

        let (r_phi, r_k) = geo.vertical_identity_residuals(&p)?;
        report.record("phi_rhat_identity", r_phi);
        report.record("k_rcheck_identity", r_k);

        let x = random_vector_field(&mut rng, dim);
        let y = random_vector_field(&mut rng, dim);
        let xval = x.values(&p)?;
        let dg = jet_values(&conn.covderiv(&x, &gamma, &p, 0)?);
        report.record("thm41_nabla_gamma", norm_scaled(&dg, &xval));
        let dxy = jet_values(&conn.covderiv(&x, &y, &p, 0)?);
        let yy = y.clone();
        let dty = ScalarField::new(dim, move |pt, ord| Ok(yy.eval(pt, ord)?[0].clone()));
        let lhs = x.derive_scalar(&dty, &p, 0)?.value();
        report.record(
            "thm41_nabla_dt",
            (lhs - dxy[0]).abs() / scale_of([dxy.as_slice()]),
        );
        for (name, tensor) in [
            ("thm41_nabla_s", &s),
            ("thm41_nabla_q", &q),
            ("thm41_nabla_n", &n_t),
        ] {
            let ty = tensor.apply(&y);
            let lhs = jet_values(&conn.covderiv(&x, &ty, &p, 0)?);
            let tm = tensor.values(&p)?;
            let expect = apply_matrix(&tm, &dxy);
            report.record(name, diff_scaled(&lhs, &expect));
        }
        for a in 0..m {
            for b in 0..m {
                let d = jet_values(&conn.covderiv(&geo.v_field(a), &geo.v_field(b), &p, 0)?);
                report.record("thm41_vertical_flat", norm_scaled(&d, &[1.0]));
            }
        }
        let tor = glue::torsion(&conn, &gamma, &s.apply(&x), &p)?;
        let phx = apply_matrix(&p_h.values(&p)?, &xval);
        report.record("thm41_ph_from_torsion", diff_scaled(&tor, &phx));
        let tgx = glue::torsion(&conn, &gamma, &x, &p)?;
        let stgx = apply_matrix(&s.values(&p)?, &tgx);
        let pvm = p_v.values(&p)?;
        let pvx = apply_matrix(&pvm, &xval);
        report.record("thm41_pv_from_torsion", diff_scaled(&stgx, &pvx));
        for a in 0..m {
            for z in 0..m {
                let r = glue::curvature(&conn_dyn, &gamma, &geo.v_field(a), &geo.h_field(z), &p)?;
                report.record("thm41_curvature_gamma_v", norm_scaled(&r, &[1.0]));
            }
        }
        for al in 0..k {
            for be in 0..k {
                let d = jet_values(&conn.covderiv(
                    &geo.dalpha_field(al),
                    &geo.dalpha_field(be),
                    &p,
                    0,
                )?);
                let mut expect = vec![0.0; dim];
                for ga in 0..k {
                    expect[geo.xalpha_slot(ga)] = t.upsilon[ga][al][be];
                }
                report.record("thm41_upsilon_components", diff_scaled(&d, &expect));
            }
        }
        let nx = n_t.apply(&x);
        let rest = x.sub(&nx);
        let ny = n_t.apply(&y);
        let tcross = glue::torsion(&conn, &rest, &ny, &p)?;
        let projected: Vec<f64> = (0..dim)
            .map(|r| {
                let pv_row: f64 = pvm[r].iter().zip(&tcross).map(|(a, b)| a * b).sum();
                tcross[r] - pv_row
            })
            .collect();
        report.record("thm41_mixed_torsion", norm_scaled(&projected, &tcross));

        let gl = jet_values(&glued.covderiv(&x, &y, &p, 0)?);
        report.record("glued_vs_intrinsic", diff_scaled(&dxy, &gl));
        let comps = crate::constrained::constrained_connection_components(geo, point)?;
        let h_rows: Vec<Vec<f64>> = (0..m)
            .map(|a| geo.h_field(a).values(&p))
            .collect::<Result<_>>()?;
        for a in 0..m {
            let got = constrained_covderiv(geo, &gamma, &geo.h_field(a), point)?;
            let mut expect = vec![0.0; dim];
            for b in 0..m {
                for c in 0..dim {
                    expect[c] += comps.gamma[b][a] * h_rows[b][c];
                }
            }
            report.record("components_vs_intrinsic", diff_scaled(&got, &expect));
            for b in 0..m {
                let got = constrained_covderiv(geo, &geo.h_field(a), &geo.v_field(b), point)?;
                let mut expect = vec![0.0; dim];
                for c in 0..m {
                    expect[geo.ua_slot(c)] += comps.dgamma_du[c][a][b];
                }
                report.record("components_vs_intrinsic", diff_scaled(&got, &expect));
            }
        }
        for al in 0..k {
            let got = constrained_covderiv(geo, &gamma, &geo.dalpha_field(al), point)?;
            let mut expect = vec![0.0; dim];
            for be in 0..k {
                expect[geo.xalpha_slot(be)] -= comps.dpsi_dxalpha[be][al];
            }
            report.record("components_vs_intrinsic", diff_scaled(&got, &expect));
            for a in 0..m {
                let got =
                    constrained_covderiv(geo, &geo.h_field(a), &geo.dalpha_field(al), point)?;
                let mut expect = vec![0.0; dim];
                for be in 0..k {
                    expect[geo.xalpha_slot(be)] += comps.dpsiab_dxalpha[be][a][al];
                }
                report.record("components_vs_intrinsic", diff_scaled(&got, &expect));
            }
        }

        // basis bracket and torsion tables, every pair
        let basis: Vec<(&str, usize, VectorField)> = {
            let mut v: Vec<(&str, usize, VectorField)> = vec![("gamma", 0, gamma.clone())];
            for al in 0..k {
                v.push(("alpha", al, geo.dalpha_field(al)));
            }
            for a in 0..m {
                v.push(("v", a, geo.v_field(a)));
            }
            for a in 0..m {
                v.push(("h", a, geo.h_field(a)));
            }
            v
        };
        for (pa_idx, (ka, ia, fa)) in basis.iter().enumerate() {
            for (pb_idx, (kb, ib, fb)) in basis.iter().enumerate() {
                if pb_idx <= pa_idx {
                    continue;
                }
                let br = glue::lie_bracket(fa, fb, &p)?;
                let mut expect = vec![0.0; dim];
                match (*ka, *kb) {
                    ("gamma", "h") => {
                        let a = *ib;
                        for b in 0..m {
                            expect[geo.ua_slot(b)] += t.phi[b][a];
                            for c in 0..dim {
                                expect[c] += t.gamma[b][a] * h_rows[b][c];
                            }
                        }
                        for al in 0..k {
                            expect[geo.xalpha_slot(al)] += t.kk[al][a];
                        }
                    }
                    ("gamma", "v") => {
                        let a = *ib;
                        for (c, h) in h_rows[a].iter().enumerate() {
                            expect[c] -= h;
                        }
                        for b in 0..m {
                            expect[geo.ua_slot(b)] += t.gamma[b][a];
                        }
                    }
                    ("gamma", "alpha") => {
                        let al = *ib;
                        for be in 0..k {
                            expect[geo.xalpha_slot(be)] -= t.dpsi_dxalpha[be][al];
                        }
                        for c in 0..m {
                            expect[geo.ua_slot(c)] -= t.df_dxalpha[c][al];
                        }
                    }
                    ("alpha", "v") => {}
                    ("alpha", "h") => {
                        // pair ordered (∂α, H̃_a): −[H̃_a, ∂α]
                        let (al, a) = (*ia, *ib);
                        for b in 0..m {
                            expect[geo.ua_slot(b)] -= t.dgamma_dxalpha[b][a][al];
                        }
                        for be in 0..k {
                            expect[geo.xalpha_slot(be)] -= t.dpsiab_dxalpha[be][a][al];
                        }
                    }
                    ("v", "h") => {
                        // pair ordered (Ṽ_a, H̃_b): −[H̃_b, Ṽ_a]
                        let (a, b) = (*ia, *ib);
                        for c in 0..m {
                            expect[geo.ua_slot(c)] -= t.dgamma_du[c][b][a];
                        }
                        for al in 0..k {
                            expect[geo.xalpha_slot(al)] -= t.dpsiab_du[al][b][a];
                        }
                    }
                    ("h", "h") => {
                        let (a, b) = (*ia, *ib);
                        for c in 0..m {
                            expect[geo.ua_slot(c)] += t.r_hat[c][a][b];
                        }
                        for be in 0..k {
                            expect[geo.xalpha_slot(be)] += t.r_check[be][a][b];
                        }
                    }
                    _ => {}
                }
                report.record("bracket_table_eq20", diff_scaled(&br, &expect));

                let tor = glue::torsion(&conn, fa, fb, &p)?;
                let mut expect = vec![0.0; dim];
                match (*ka, *kb) {
                    ("gamma", "v") => {
                        let a = *ib;
                        expect.copy_from_slice(&h_rows[a]);
                    }
                    ("gamma", "h") => {
                        let a = *ib;
                        for b in 0..m {
                            expect[geo.ua_slot(b)] -= t.phi[b][a];
                        }
                        for al in 0..k {
                            expect[geo.xalpha_slot(al)] -= t.kk[al][a];
                        }
                    }
                    ("gamma", "alpha") => {
                        let al = *ib;
                        for c in 0..m {
                            expect[geo.ua_slot(c)] += t.df_dxalpha[c][al];
                        }
                    }
                    ("v", "h") => {
                        // T(Ṽ_a, H̃_b) = (∂Ψ^α_b/∂u^a) ∂α
                        let (a, b) = (*ia, *ib);
                        for al in 0..k {
                            expect[geo.xalpha_slot(al)] += t.dpsiab_du[al][b][a];
                        }
                    }
                    ("h", "h") => {
                        let (a, b) = (*ia, *ib);
                        for c in 0..m {
                            expect[geo.ua_slot(c)] -= t.r_hat[c][a][b];
                        }
                        for be in 0..k {
                            expect[geo.xalpha_slot(be)] -= t.r_check[be][a][b];
                        }
                    }
                    ("alpha", "h") => {
                        // T(H̃_a, ∂α) = −(∂Γ̃^b_a/∂x^α) Ṽ_b, ordered (∂α, H̃_a)
                        let (al, a) = (*ia, *ib);
                        for b in 0..m {
                            expect[geo.ua_slot(b)] += t.dgamma_dxalpha[b][a][al];
                        }
                    }
                    ("alpha", "alpha") => {
                        let (al, be) = (*ia, *ib);
                        for ga in 0..k {
                            expect[geo.xalpha_slot(ga)] =
                                t.upsilon[ga][al][be] - t.upsilon[ga][be][al];
                        }
                    }
                    _ => {}
                }
                report.record("torsion_table", diff_scaled(&tor, &expect));
            }
        }

        let shape = shape_constrained(geo, point)?;
        report.record(
            "lambda_poly_monic",
            (shape.lambda_poly[3 * m] - 1.0).abs(),
        );
        for pair in &shape.real_roots {
            for v in &pair.eigenvectors_adapted {
                report.record(
                    "shape_eigen_equations",
                    eigen_equation_residual(geo, &t, pair.mu, v),
                );
            }
        }
        let a_mat = a_gamma_adapted_matrix(geo, &t);
        for (col, (_, _, fb)) in basis.iter().enumerate() {
            let got = glue::shape_map(&conn_dyn, &gamma, fb, &p, glue::ShapeMode::Bracket)?;
            let mut expect = vec![0.0; dim];
            for (row_idx, row) in frame.iter().enumerate() {
                for c in 0..dim {
                    expect[c] += a_mat[row_idx][col] * row[c].value();
                }
            }
            report.record("shape_table_vs_generic", diff_scaled(&got, &expect));
        }
        let s1 = glue::shape_map(&conn_dyn, &gamma, &x, &p, glue::ShapeMode::Bracket)?;
        let s2 = glue::shape_map(&conn_dyn, &gamma, &x, &p, glue::ShapeMode::Torsion)?;
        report.record("shape_representations", diff_scaled(&s1, &s2));
        for al in 0..k {
            let act = &shape.constraint_action;
            let a_norm = act.on_gamma[al]
                .iter()
                .fold(0.0f64, |mm, v| mm.max(v.abs()));
            let sides = act.dpsi_norm[al].max(act.df_norm[al]);
            report.record(
                "decoupling_equivalence",
                (a_norm - sides).abs() / (1.0 + sides),
            );
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Nonholonomic suite
// ---------------------------------------------------------------------------

/// Reduction-specific residuals at given points; the constrained suite on
/// the induced geometry is run separately by the caller.
pub fn nonholonomic_suite(
    dynamics: &Arc<ReducedDynamics>,
    points: &[ConstrainedPoint],
) -> Result<SuiteReport> {
    let mut report = SuiteReport::new();
    for point in points {
        let red = dynamics.reduce(point)?;
        report.record("linear_part_equals_mass", red.linear_part_residual);
        let w = dynamics
            .problem()
            .hessian_w(&dynamics.problem().full_point(&point.slots())?)?;
        let msize = red.c.len();
        let c = nalgebra::DMatrix::from_fn(msize, msize, |a, b| red.c[a][b]);
        let spd_ok = !crate::linalg::is_spd(&w) || crate::linalg::is_spd(&c);
        report.record("spd_inheritance", if spd_ok { 0.0 } else { 1.0 });
        report.record(
            "multiplier_consistency",
            dynamics.multiplier_consistency_residual(point)?,
        );
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Point sampling
// ---------------------------------------------------------------------------

/// Draw `count` points uniformly from per-slot ranges, rejecting points the
/// validity check refuses (up to 100 attempts each).
pub fn sample_points(
    ranges: &[(f64, f64)],
    valid: impl Fn(&[f64]) -> bool,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..100 {
            let p: Vec<f64> = ranges
                .iter()
                .map(|&(lo, hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) })
                .collect();
            if valid(&p) {
                accepted = Some(p);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            GeomError::Invalid("no in-domain point found in 100 attempts".into())
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_suite_passes_at_small_scale() {
        let report = glue_toy_suite(7, 3, 8).unwrap();
        assert!(
            report.passes(1e-8),
            "glue toy suite: {:?}",
            report.failing(1e-8)
        );
    }

    #[test]
    fn mp_suite_on_damped_oscillator() {
        let geo = SodeGeometry::new(
            crate::sode::SodeSystem::parse(&["q"], &["-0.6*u_q - q"]).unwrap(),
        );
        let points = vec![
            EvolutionPoint {
                t: 0.0,
                x: vec![0.4],
                u: vec![-0.3],
            },
            EvolutionPoint {
                t: 1.2,
                x: vec![-0.8],
                u: vec![0.5],
            },
        ];
        let report = mp_suite(&geo, &points, 11).unwrap();
        assert!(report.passes(1e-8), "mp suite: {:?}", report.failing(1e-8));
    }

    #[test]
    fn constrained_suite_on_knife_edge() {
        let sys = crate::constrained::ConstrainedSystem::parse(
            &["phi", "x"],
            &["y"],
            &["0", "-u_phi*u_x*tan(phi)"],
            &["tan(phi)*u_x"],
            None,
        )
        .unwrap();
        let geo = ConstrainedGeometry::from_system(&sys);
        let points = vec![ConstrainedPoint {
            t: 0.1,
            xa: vec![0.5, 0.8],
            xalpha: vec![-0.2],
            ua: vec![0.7, -0.9],
        }];
        let report = constrained_suite(&geo, &points, 23).unwrap();
        assert!(
            report.passes(1e-8),
            "constrained suite: {:?}",
            report.failing(1e-8)
        );
    }

    #[test]
    fn suite_detects_perturbed_connection() {
        let sys = crate::constrained::ConstrainedSystem::parse(
            &["phi", "x"],
            &["y"],
            &["0", "-u_phi*u_x*tan(phi)"],
            &["tan(phi)*u_x"],
            None,
        )
        .unwrap();
        let geo = ConstrainedGeometry::from_system_perturbed(&sys, 1e-3);
        let points = vec![ConstrainedPoint {
            t: 0.1,
            xa: vec![0.5, 0.8],
            xalpha: vec![-0.2],
            ua: vec![0.7, -0.9],
        }];
        let report = constrained_suite(&geo, &points, 23).unwrap();
        let max = report.max_residual();
        assert!(
            max > 1e-4 && max < 1e-2,
            "perturbation 1e-3 should surface within one order: {max}"
        );
    }
}
