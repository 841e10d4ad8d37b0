//! Nonholonomic reduction: from a Lagrangian and first-order constraints to
//! a constrained second-order system.
//!
//! Variations restricted by `δx^α = (∂Ψ^α/∂ẋ^a) δx^a` turn the
//! Euler–Lagrange expressions into
//! `EL_a = d/dt(∂L/∂ẋ^a) − ∂L/∂x^a + [d/dt(∂L/∂ẋ^α) − ∂L/∂x^α] ∂Ψ^α/∂ẋ^a`,
//! with `ẋ^α`, `ẍ^α` eliminated through `Ψ` and its total derivative and the
//! free accelerations `ẍ^b` kept as explicit symbols. `EL_a` is affine in
//! `ẍ^b`; its value at `ẍ = 0` is `G_a`, its linear part is the constrained
//! mass matrix `C_ab`, and solving `C ẍ = −G` yields the reduced force law
//! `F^a` together with the multipliers `λ_α`. Running the same pipeline in
//! jet arithmetic (jets flow through the linear solve) makes `F^a`
//! differentiable, so the reduced system feeds the constrained-frame
//! machinery directly.

use crate::constrained::{ConstrainedGeometry, ConstrainedPoint, ForceProvider};
use crate::error::{GeomError, Result};
use crate::expr::{Expr, JetEnv};
use crate::glue::jet_values;
use crate::jet::Jet;
use crate::linalg;
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// A Lagrangian with first-order constraints on the trailing coordinate
/// block. `upsilon` is carried through to the constrained geometry built
/// from the reduction.
#[derive(Clone)]
pub struct NonholonomicProblem {
    coords_a: Vec<String>,
    coords_alpha: Vec<String>,
    lagrangian: Expr,
    psi: Vec<Expr>,
    upsilon: Option<Vec<Vec<Vec<Expr>>>>,
}

impl NonholonomicProblem {
    pub fn new(
        coords_a: Vec<String>,
        coords_alpha: Vec<String>,
        lagrangian: Expr,
        psi: Vec<Expr>,
        upsilon: Option<Vec<Vec<Vec<Expr>>>>,
    ) -> Result<NonholonomicProblem> {
        let mut all = coords_a.clone();
        all.extend(coords_alpha.iter().cloned());
        crate::sode::check_names(&all)?;
        if psi.len() != coords_alpha.len() {
            return Err(GeomError::Dimension(format!(
                "{} constraints for {} constraint coordinates",
                psi.len(),
                coords_alpha.len()
            )));
        }
        // L sees every velocity; Ψ sees only the free ones
        let mut full = vec!["t".to_string()];
        full.extend(all.iter().cloned());
        full.extend(all.iter().map(|c| format!("u_{c}")));
        lagrangian
            .check_bound(&full)
            .map_err(|err| GeomError::Component {
                name: "L".into(),
                source: err,
            })?;
        let mut reduced = vec!["t".to_string()];
        reduced.extend(all.iter().cloned());
        reduced.extend(coords_a.iter().map(|c| format!("u_{c}")));
        for (i, e) in psi.iter().enumerate() {
            e.check_bound(&reduced)
                .map_err(|err| GeomError::Component {
                    name: format!("Psi[{i}]"),
                    source: err,
                })?;
        }
        Ok(NonholonomicProblem {
            coords_a,
            coords_alpha,
            lagrangian,
            psi,
            upsilon,
        })
    }

    pub fn parse(
        coords_a: &[&str],
        coords_alpha: &[&str],
        lagrangian: &str,
        psi: &[&str],
    ) -> Result<NonholonomicProblem> {
        NonholonomicProblem::new(
            coords_a.iter().map(|s| s.to_string()).collect(),
            coords_alpha.iter().map(|s| s.to_string()).collect(),
            crate::expr::parse(lagrangian)?,
            psi.iter()
                .map(|s| crate::expr::parse(s).map_err(GeomError::from))
                .collect::<Result<Vec<_>>>()?,
            None,
        )
    }

    pub fn with_upsilon(mut self, upsilon: Vec<Vec<Vec<Expr>>>) -> NonholonomicProblem {
        self.upsilon = Some(upsilon);
        self
    }

    pub fn m(&self) -> usize {
        self.coords_a.len()
    }

    pub fn k(&self) -> usize {
        self.coords_alpha.len()
    }

    pub fn n(&self) -> usize {
        self.m() + self.k()
    }

    /// Ẽ slot count, `n + m + 1`.
    fn dim(&self) -> usize {
        1 + self.n() + self.m()
    }

    fn full_dim(&self) -> usize {
        2 * self.n() + 1
    }

    fn xa_slot(&self, a: usize) -> usize {
        1 + a
    }

    fn xalpha_slot(&self, al: usize) -> usize {
        1 + self.m() + al
    }

    fn ua_slot(&self, a: usize) -> usize {
        1 + self.n() + a
    }

    fn full_x_slot(&self, i: usize) -> usize {
        1 + i
    }

    fn full_u_slot(&self, i: usize) -> usize {
        1 + self.n() + i
    }

    fn all_coords(&self) -> Vec<String> {
        let mut all = self.coords_a.clone();
        all.extend(self.coords_alpha.iter().cloned());
        all
    }

    fn full_slot_names(&self) -> Vec<String> {
        let all = self.all_coords();
        let mut names = vec!["t".to_string()];
        names.extend(all.iter().cloned());
        names.extend(all.iter().map(|c| format!("u_{c}")));
        names
    }

    fn reduced_slot_names(&self) -> Vec<String> {
        let mut names = vec!["t".to_string()];
        names.extend(self.all_coords());
        names.extend(self.coords_a.iter().map(|c| format!("u_{c}")));
        names
    }

    /// `W_ij = ∂²L/∂u^i∂u^j` at a full-space point `(t, x^i, u^i)`.
    pub fn hessian_w(&self, p_full: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.n();
        let dim = self.full_dim();
        let seeds = (0..dim)
            .map(|v| Jet::coordinate(v, p_full[v], dim, 2).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        let env = JetEnv::new(self.full_slot_names(), seeds);
        let l = self.lagrangian.eval(&env).map_err(|err| GeomError::Component {
            name: "L".into(),
            source: err,
        })?;
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            let di = l.partial_jet(self.full_u_slot(i));
            for j in 0..n {
                w[(i, j)] = di.partial_jet(self.full_u_slot(j)).value();
            }
        }
        Ok(w)
    }

    fn psi_values(&self, p: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        let seeds = (0..dim)
            .map(|v| Jet::coordinate(v, p[v], dim, 1).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        let env = JetEnv::new(self.reduced_slot_names(), seeds);
        self.psi
            .iter()
            .map(|e| Ok(e.eval(&env).map_err(GeomError::from)?.value()))
            .collect()
    }

    /// Embed a constrained point into the full evolution space, with the
    /// eliminated velocities substituted through Ψ.
    pub fn full_point(&self, p: &[f64]) -> Result<Vec<f64>> {
        let psi = self.psi_values(p)?;
        let mut full = vec![0.0; self.full_dim()];
        full[0] = p[0];
        for i in 0..self.n() {
            full[self.full_x_slot(i)] = p[1 + i];
        }
        for a in 0..self.m() {
            full[self.full_u_slot(a)] = p[self.ua_slot(a)];
        }
        for al in 0..self.k() {
            full[self.full_u_slot(self.m() + al)] = psi[al];
        }
        Ok(full)
    }

    /// The constrained mass matrix
    /// `C_ab = W_ab + W_aα Ψ'^α_b + W_bα Ψ'^α_a + W_αβ Ψ'^α_a Ψ'^β_b`
    /// with `Ψ'^α_a = ∂Ψ^α/∂u^a`, at a constrained point (the eliminated
    /// velocities are substituted before `W` is read).
    pub fn constrained_mass_c(&self, point: &ConstrainedPoint) -> Result<DMatrix<f64>> {
        let p = point.slots();
        let w = self.hessian_w(&self.full_point(&p)?)?;
        let psi_prime = self.psi_prime_values(&p)?;
        Ok(restrict_mass(&w, &psi_prime, self.m()))
    }

    /// `Ψ'^α_a = ∂Ψ^α/∂u^a` values, indexed `[alpha][a]`.
    fn psi_prime_values(&self, p: &[f64]) -> Result<Vec<Vec<f64>>> {
        let dim = self.dim();
        let seeds = (0..dim)
            .map(|v| Jet::coordinate(v, p[v], dim, 1).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        let env = JetEnv::new(self.reduced_slot_names(), seeds);
        self.psi
            .iter()
            .map(|e| {
                let j = e.eval(&env).map_err(GeomError::from)?;
                Ok((0..self.m()).map(|a| j.grad(self.ua_slot(a))).collect())
            })
            .collect()
    }
}

/// Restriction of the quadratic form `w` to the span of the constrained
/// velocity directions `(δ^a_b ; ∂Ψ^α/∂u^b)`.
pub fn restrict_mass(w: &DMatrix<f64>, psi_prime: &[Vec<f64>], m: usize) -> DMatrix<f64> {
    let k = psi_prime.len();
    DMatrix::from_fn(m, m, |a, b| {
        let mut v = w[(a, b)];
        for al in 0..k {
            v += w[(a, m + al)] * psi_prime[al][b];
            v += w[(b, m + al)] * psi_prime[al][a];
            for be in 0..k {
                v += w[(m + al, m + be)] * psi_prime[al][a] * psi_prime[be][b];
            }
        }
        v
    })
}

// ---------------------------------------------------------------------------
// Jet assembly of the reduced dynamics
// ---------------------------------------------------------------------------

struct AssembledJets {
    /// reduced forces F^a as Ẽ-jets
    f: Vec<Jet>,
    g: Vec<Jet>,
    lambda: Vec<Jet>,
}

type PointKey = (Vec<u64>, usize);

/// The reduced dynamics evaluator: `F^a`, `C_ab`, `G_a`, `λ_α` at points of
/// `Ẽ`, with jet evaluation to the requested order.
pub struct ReducedDynamics {
    prob: NonholonomicProblem,
    cache: Mutex<HashMap<PointKey, Arc<AssembledJets>>>,
}

/// Value-level output of the reduction at one point.
#[derive(Debug, Clone)]
pub struct ReducedPoint {
    pub f: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub lambda: Vec<f64>,
    pub condition: f64,
    /// relative gap between the jet-extracted linear part of `EL_a` and the
    /// mass-matrix formula
    pub linear_part_residual: f64,
}

impl ReducedDynamics {
    pub fn new(prob: NonholonomicProblem) -> Arc<ReducedDynamics> {
        Arc::new(ReducedDynamics {
            prob,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn problem(&self) -> &NonholonomicProblem {
        &self.prob
    }

    /// Composed second partials of L over the reduced space. Returns the
    /// pieces `(L_{u^i z}∘φ)` for every full slot `z`, `(L_{x^i}∘φ)`, the Ψ
    /// jets (order+1) and `Ψ'` jets, all over Ẽ variables at `order`.
    fn pieces(&self, p: &[f64], order: usize) -> Result<Pieces> {
        let prob = &self.prob;
        let (n, m, k) = (prob.n(), prob.m(), prob.k());
        let dim = prob.dim();
        let full_dim = prob.full_dim();
        // reduced-space seeds and Ψ jets one order deeper for the
        // derivative extractions below
        let seeds_hi = (0..dim)
            .map(|v| Jet::coordinate(v, p[v], dim, order + 1).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        let env_hi = JetEnv::new(prob.reduced_slot_names(), seeds_hi.clone());
        let psi_hi: Vec<Jet> = prob
            .psi
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval(&env_hi).map_err(|err| GeomError::Component {
                    name: format!("Psi[{i}]"),
                    source: err,
                })
            })
            .collect::<Result<_>>()?;
        // full-space Lagrangian jet at the substituted point
        let full_p = prob.full_point(p)?;
        let seeds_full = (0..full_dim)
            .map(|v| Jet::coordinate(v, full_p[v], full_dim, order + 2).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        let env_full = JetEnv::new(prob.full_slot_names(), seeds_full);
        let l = prob
            .lagrangian
            .eval(&env_full)
            .map_err(|err| GeomError::Component {
                name: "L".into(),
                source: err,
            })?;
        // composition arguments: the full coordinates as Ẽ-jets
        let mut args = Vec::with_capacity(full_dim);
        args.push(seeds_hi[0].truncate(order));
        for i in 0..n {
            args.push(seeds_hi[1 + i].truncate(order));
        }
        for a in 0..m {
            args.push(seeds_hi[prob.ua_slot(a)].truncate(order));
        }
        for al in 0..k {
            args.push(psi_hi[al].truncate(order));
        }
        let compose = |j: &Jet| j.compose(&args);
        let mut d2 = vec![Vec::with_capacity(full_dim); n];
        let mut dx = Vec::with_capacity(n);
        for i in 0..n {
            let di = l.partial_jet(prob.full_u_slot(i));
            for z in 0..full_dim {
                d2[i].push(compose(&di.partial_jet(z)));
            }
            dx.push(compose(&l.partial_jet(prob.full_x_slot(i)).truncate(order)));
        }
        let psi_prime: Vec<Vec<Jet>> = (0..k)
            .map(|al| {
                (0..m)
                    .map(|a| psi_hi[al].partial_jet(prob.ua_slot(a)))
                    .collect()
            })
            .collect();
        Ok(Pieces {
            d2,
            dx,
            psi: psi_hi,
            psi_prime,
        })
    }

    fn assemble(&self, p: &[f64], order: usize) -> Result<Arc<AssembledJets>> {
        let key: PointKey = (p.iter().map(|v| v.to_bits()).collect(), order);
        if let Some(a) = self.cache.lock().unwrap().get(&key) {
            return Ok(a.clone());
        }
        let out = Arc::new(self.assemble_uncached(p, order)?);
        self.cache.lock().unwrap().insert(key, out.clone());
        Ok(out)
    }

    fn assemble_uncached(&self, p: &[f64], order: usize) -> Result<AssembledJets> {
        let prob = &self.prob;
        let (n, m, k) = (prob.n(), prob.m(), prob.k());
        let dim = prob.dim();
        let pieces = self.pieces(p, order)?;
        let Pieces {
            d2,
            dx,
            psi,
            psi_prime,
        } = &pieces;
        let u_jet = |a: usize| -> Result<Jet> {
            Jet::coordinate(prob.ua_slot(a), p[prob.ua_slot(a)], dim, order).map_err(Into::into)
        };
        // Ψ̇^β at ẍ = 0: ∂Ψ/∂t + u^a ∂Ψ/∂x^a + Ψ^γ ∂Ψ/∂x^γ
        let mut psidot0 = Vec::with_capacity(k);
        for be in 0..k {
            let mut acc = psi[be].partial_jet(0);
            for a in 0..m {
                acc = acc.add(&u_jet(a)?.mul(&psi[be].partial_jet(prob.xa_slot(a))));
            }
            for ga in 0..k {
                acc = acc.add(
                    &psi[ga]
                        .truncate(order)
                        .mul(&psi[be].partial_jet(prob.xalpha_slot(ga))),
                );
            }
            psidot0.push(acc);
        }
        // T_i at ẍ = 0: the total-derivative expansion with ẋ^α = Ψ^α,
        // ẍ^α = Ψ̇^α|_0 and the free accelerations dropped
        let t_at_zero = |i: usize| -> Result<Jet> {
            let mut acc = d2[i][0].clone();
            for a in 0..m {
                acc = acc.add(&u_jet(a)?.mul(&d2[i][prob.full_x_slot(a)]));
            }
            for ga in 0..k {
                acc = acc.add(
                    &psi[ga]
                        .truncate(order)
                        .mul(&d2[i][prob.full_x_slot(m + ga)]),
                );
            }
            for be in 0..k {
                acc = acc.add(&psidot0[be].mul(&d2[i][prob.full_u_slot(m + be)]));
            }
            Ok(acc.sub(&dx[i]))
        };
        // G_a = T_a|_0 + Ψ'^α_a T_α|_0
        let t0: Vec<Jet> = (0..n).map(t_at_zero).collect::<Result<_>>()?;
        let mut g = Vec::with_capacity(m);
        for a in 0..m {
            let mut acc = t0[a].clone();
            for al in 0..k {
                acc = acc.add(&psi_prime[al][a].mul(&t0[m + al]));
            }
            g.push(acc);
        }
        // C_ab from the restricted Hessian, in jets
        let mut c = vec![vec![Jet::constant(0.0, dim, order); m]; m];
        for a in 0..m {
            for b in 0..m {
                let mut acc = d2[a][prob.full_u_slot(b)].clone();
                for al in 0..k {
                    acc = acc.add(&d2[a][prob.full_u_slot(m + al)].mul(&psi_prime[al][b]));
                    acc = acc.add(&d2[b][prob.full_u_slot(m + al)].mul(&psi_prime[al][a]));
                    for be in 0..k {
                        let term = d2[m + al][prob.full_u_slot(m + be)]
                            .mul(&psi_prime[al][a])
                            .mul(&psi_prime[be][b]);
                        acc = acc.add(&term);
                    }
                }
                c[a][b] = acc;
            }
        }
        // the jets flow through the linear solve: C F = −G
        let minus_g: Vec<Jet> = g.iter().map(Jet::neg).collect();
        let f = linalg::jet_solve(&c, &minus_g)?;
        // multipliers: λ_α = T_α with ẍ^b = F^b substituted
        let mut lambda = Vec::with_capacity(k);
        for al in 0..k {
            let i = m + al;
            let mut acc = t0[i].clone();
            for b in 0..m {
                acc = acc.add(&f[b].mul(&d2[i][prob.full_u_slot(b)]));
                // Ψ̇ gains F^b ∂Ψ/∂u^b beyond its ẍ=0 part
                for be in 0..k {
                    let extra = f[b]
                        .mul(&psi[be].partial_jet(prob.ua_slot(b)))
                        .mul(&d2[i][prob.full_u_slot(m + be)]);
                    acc = acc.add(&extra);
                }
            }
            lambda.push(acc);
        }
        Ok(AssembledJets { f, g, lambda })
    }

    /// Reduce at one point: forces, mass matrix, inhomogeneity and
    /// multipliers, with the extended-jet linear-part check.
    pub fn reduce(&self, point: &ConstrainedPoint) -> Result<ReducedPoint> {
        let prob = &self.prob;
        let p = point.slots();
        let m = prob.m();
        let c_mat = prob.constrained_mass_c(point)?;
        let cond = linalg::condition_estimate(&c_mat);
        if !cond.is_finite() || cond > 1e12 {
            return Err(GeomError::SingularMatrix { cond });
        }
        let w = prob.hessian_w(&prob.full_point(&p)?)?;
        if !linalg::is_spd(&w) {
            return Err(GeomError::Invalid(
                "Lagrangian Hessian is not positive definite at the point".into(),
            ));
        }
        // the defining route: EL_a over the extended space with the free
        // accelerations as jet variables; value = G, gradient = C
        let (g_ext, c_ext) = self.extended_el(&p)?;
        let mut linear_part_residual = 0.0f64;
        let mut scale = 1.0f64;
        for a in 0..m {
            for b in 0..m {
                scale = scale.max(c_mat[(a, b)].abs());
                linear_part_residual =
                    linear_part_residual.max((c_ext[a][b] - c_mat[(a, b)]).abs());
            }
        }
        linear_part_residual /= scale;
        if linear_part_residual > 1e-8 {
            return Err(GeomError::Invalid(format!(
                "acceleration-linear part of EL disagrees with the mass matrix \
                 (residual {linear_part_residual:.3e})"
            )));
        }
        let assembled = self.assemble(&p, 1)?;
        // cross-check the production G against the extended-jet route
        for a in 0..m {
            let gap = (assembled.g[a].value() - g_ext[a]).abs();
            if gap > 1e-8 * (1.0 + g_ext[a].abs()) {
                return Err(GeomError::Invalid(format!(
                    "inhomogeneity mismatch between jet routes ({gap:.3e})"
                )));
            }
        }
        Ok(ReducedPoint {
            f: jet_values(&assembled.f),
            c: (0..m)
                .map(|a| (0..m).map(|b| c_mat[(a, b)]).collect())
                .collect(),
            g: jet_values(&assembled.g),
            lambda: jet_values(&assembled.lambda),
            condition: cond,
            linear_part_residual,
        })
    }

    /// `EL_a` on the extended space `(Ẽ, w^b)` with order-1 jets: returns
    /// `(G_a, ∂EL_a/∂w^b)`.
    fn extended_el(&self, p: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let prob = &self.prob;
        let (n, m, k) = (prob.n(), prob.m(), prob.k());
        let dim_ep = prob.dim() + m;
        let full_dim = prob.full_dim();
        let w_slot = |b: usize| prob.dim() + b;
        // extended seeds: Ẽ coordinates at the point, accelerations at zero
        let seed = |v: usize, val: f64, order: usize| -> Result<Jet> {
            Jet::coordinate(v, val, dim_ep, order).map_err(Into::into)
        };
        let seeds2: Vec<Jet> = (0..prob.dim())
            .map(|v| seed(v, p[v], 2))
            .collect::<Result<_>>()?;
        let env = JetEnv::new(prob.reduced_slot_names(), seeds2.clone());
        let psi: Vec<Jet> = prob
            .psi
            .iter()
            .map(|e| e.eval(&env).map_err(GeomError::from))
            .collect::<Result<_>>()?;
        let full_p = prob.full_point(p)?;
        let seeds_full = (0..full_dim)
            .map(|v| Jet::coordinate(v, full_p[v], full_dim, 3).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        let env_full = JetEnv::new(prob.full_slot_names(), seeds_full);
        let l = prob.lagrangian.eval(&env_full).map_err(GeomError::from)?;
        // compose the full-space derivative jets over extended arguments
        let mut args = Vec::with_capacity(full_dim);
        args.push(seeds2[0].truncate(1));
        for i in 0..n {
            args.push(seeds2[1 + i].truncate(1));
        }
        for a in 0..m {
            args.push(seeds2[prob.ua_slot(a)].truncate(1));
        }
        for al in 0..k {
            args.push(psi[al].truncate(1));
        }
        let compose = |j: &Jet| j.compose(&args);
        // Ψ̇^β(w) over the extended space
        let mut psidot = Vec::with_capacity(k);
        for be in 0..k {
            let mut acc = psi[be].partial_jet(0);
            for a in 0..m {
                acc = acc.add(&seeds2[prob.ua_slot(a)].truncate(1).mul(&psi[be].partial_jet(prob.xa_slot(a))));
            }
            for ga in 0..k {
                acc = acc.add(&psi[ga].truncate(1).mul(&psi[be].partial_jet(prob.xalpha_slot(ga))));
            }
            for b in 0..m {
                acc = acc.add(&seed(w_slot(b), 0.0, 1)?.mul(&psi[be].partial_jet(prob.ua_slot(b))));
            }
            psidot.push(acc);
        }
        let t_full = |i: usize| -> Result<Jet> {
            let di = l.partial_jet(prob.full_u_slot(i));
            let mut acc = compose(&di.partial_jet(0));
            for a in 0..m {
                acc = acc.add(&seeds2[prob.ua_slot(a)].truncate(1).mul(&compose(&di.partial_jet(prob.full_x_slot(a)))));
            }
            for ga in 0..k {
                acc = acc.add(&psi[ga].truncate(1).mul(&compose(&di.partial_jet(prob.full_x_slot(m + ga)))));
            }
            for b in 0..m {
                acc = acc.add(&seed(w_slot(b), 0.0, 1)?.mul(&compose(&di.partial_jet(prob.full_u_slot(b)))));
            }
            for be in 0..k {
                acc = acc.add(&psidot[be].mul(&compose(&di.partial_jet(prob.full_u_slot(m + be)))));
            }
            Ok(acc.sub(&compose(&l.partial_jet(prob.full_x_slot(i)).truncate(1))))
        };
        let mut g = Vec::with_capacity(m);
        let mut c = vec![vec![0.0; m]; m];
        for a in 0..m {
            let mut el = t_full(a)?;
            for al in 0..k {
                el = el.add(&psi[al].partial_jet(prob.ua_slot(a)).mul(&t_full(m + al)?));
            }
            g.push(el.value());
            for b in 0..m {
                c[a][b] = el.grad(w_slot(b));
            }
        }
        Ok((g, c))
    }

    /// Residual of the nonholonomic equations with the produced `(F, λ)`
    /// substituted back: max over
    /// `T_a(F) + λ_α Ψ'^α_a = 0` and `λ_α − T_α(F) = 0`, relative to scale.
    pub fn multiplier_consistency_residual(&self, point: &ConstrainedPoint) -> Result<f64> {
        let prob = &self.prob;
        let (m, k) = (prob.m(), prob.k());
        let p = point.slots();
        let a = self.assemble(&p, 1)?;
        let pieces = self.pieces(&p, 1)?;
        // T_i(F) reassembled directly
        let u_jet = |idx: usize| -> Result<Jet> {
            Jet::coordinate(prob.ua_slot(idx), p[prob.ua_slot(idx)], prob.dim(), 1)
                .map_err(Into::into)
        };
        let mut psidot_f = Vec::with_capacity(k);
        for be in 0..k {
            let mut acc = pieces.psi[be].partial_jet(0);
            for ai in 0..m {
                acc = acc.add(&u_jet(ai)?.mul(&pieces.psi[be].partial_jet(prob.xa_slot(ai))));
            }
            for ga in 0..k {
                acc = acc.add(&pieces.psi[ga].truncate(1).mul(&pieces.psi[be].partial_jet(prob.xalpha_slot(ga))));
            }
            for b in 0..m {
                acc = acc.add(&a.f[b].mul(&pieces.psi[be].partial_jet(prob.ua_slot(b))));
            }
            psidot_f.push(acc);
        }
        let t_of_f = |i: usize| -> Result<Jet> {
            let mut acc = pieces.d2[i][0].clone();
            for ai in 0..m {
                acc = acc.add(&u_jet(ai)?.mul(&pieces.d2[i][prob.full_x_slot(ai)]));
            }
            for ga in 0..k {
                acc = acc.add(&pieces.psi[ga].truncate(1).mul(&pieces.d2[i][prob.full_x_slot(m + ga)]));
            }
            for b in 0..m {
                acc = acc.add(&a.f[b].mul(&pieces.d2[i][prob.full_u_slot(b)]));
            }
            for be in 0..k {
                acc = acc.add(&psidot_f[be].mul(&pieces.d2[i][prob.full_u_slot(m + be)]));
            }
            Ok(acc.sub(&pieces.dx[i]))
        };
        let mut worst = 0.0f64;
        let mut scale = 1.0f64;
        for ai in 0..m {
            let mut line1 = t_of_f(ai)?.value();
            for al in 0..k {
                line1 += a.lambda[al].value() * pieces.psi_prime[al][ai].value();
            }
            worst = worst.max(line1.abs());
        }
        for al in 0..k {
            let t = t_of_f(m + al)?.value();
            scale = scale.max(t.abs());
            worst = worst.max((a.lambda[al].value() - t).abs());
        }
        for f in &a.f {
            scale = scale.max(f.value().abs());
        }
        Ok(worst / scale)
    }

    /// Wrap the reduction as a constrained geometry (`F^a` jets run the
    /// whole pipeline in jet arithmetic).
    pub fn as_constrained_geometry(self: &Arc<Self>) -> Arc<ConstrainedGeometry> {
        self.as_constrained_geometry_perturbed(0.0)
    }

    pub fn as_constrained_geometry_perturbed(
        self: &Arc<Self>,
        perturb_gamma: f64,
    ) -> Arc<ConstrainedGeometry> {
        ConstrainedGeometry::with_forces(
            self.prob.coords_a.clone(),
            self.prob.coords_alpha.clone(),
            self.prob.psi.clone(),
            self.prob.upsilon.clone(),
            Arc::new(ReducedForces { dyn_: self.clone() }),
            perturb_gamma,
        )
    }
}

struct Pieces {
    /// `(L_{u^i z}) ∘ φ` over Ẽ, indexed [i][full slot z]
    d2: Vec<Vec<Jet>>,
    /// `(L_{x^i}) ∘ φ`
    dx: Vec<Jet>,
    /// Ψ jets at order+1
    psi: Vec<Jet>,
    /// `∂Ψ^α/∂u^a` jets
    psi_prime: Vec<Vec<Jet>>,
}

struct ReducedForces {
    dyn_: Arc<ReducedDynamics>,
}

impl ForceProvider for ReducedForces {
    fn eval_f(&self, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        Ok(self.dyn_.assemble(p, order)?.f.clone())
    }

    fn count(&self) -> usize {
        self.dyn_.prob.m()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn knife_edge_problem() -> Arc<ReducedDynamics> {
        ReducedDynamics::new(
            NonholonomicProblem::parse(
                &["phi", "x"],
                &["y"],
                "1/2*(u_x^2 + u_y^2 + u_phi^2)",
                &["tan(phi)*u_x"],
            )
            .unwrap(),
        )
    }

    fn ke_point() -> ConstrainedPoint {
        ConstrainedPoint {
            t: 0.2,
            xa: vec![0.6, -0.3],
            xalpha: vec![0.9],
            ua: vec![0.8, 1.1],
        }
    }

    #[test]
    fn knife_edge_hessian_is_identity() {
        let dynamics = knife_edge_problem();
        let w = dynamics
            .problem()
            .hessian_w(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
            .unwrap();
        assert_eq!(w, DMatrix::identity(3, 3));
    }

    #[test]
    fn knife_edge_mass_matrix() {
        let dynamics = knife_edge_problem();
        let pt = ke_point();
        let c = dynamics.problem().constrained_mass_c(&pt).unwrap();
        let sec2 = 1.0 / pt.xa[0].cos().powi(2);
        assert_relative_eq!(c[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(c[(1, 1)], sec2, max_relative = 1e-12);
        assert!(c[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn knife_edge_reduction() {
        let dynamics = knife_edge_problem();
        let pt = ke_point();
        let red = dynamics.reduce(&pt).unwrap();
        let expect_fx = -pt.ua[0] * pt.ua[1] * pt.xa[0].tan();
        assert!(red.f[0].abs() < 1e-12, "F^phi = 0");
        assert_relative_eq!(red.f[1], expect_fx, max_relative = 1e-10);
        assert!(red.linear_part_residual < 1e-10);
        // multipliers satisfy the equations they came from
        let res = dynamics.multiplier_consistency_residual(&pt).unwrap();
        assert!(res < 1e-10, "multiplier residual {res}");
    }

    #[test]
    fn reduced_jets_match_closed_form() {
        // jets of the reduced F^x agree with the expression route
        let dynamics = knife_edge_problem();
        let geo = dynamics.as_constrained_geometry();
        let closed = crate::constrained::ConstrainedSystem::parse(
            &["phi", "x"],
            &["y"],
            &["0", "-u_phi*u_x*tan(phi)"],
            &["tan(phi)*u_x"],
            None,
        )
        .unwrap();
        let closed_geo = crate::constrained::ConstrainedGeometry::from_system(&closed);
        let pt = ke_point();
        let p = pt.slots();
        let a = geo.tensors_at(&p, 2).unwrap();
        let b = closed_geo.tensors_at(&p, 2).unwrap();
        for (ra, rb) in a.phi.iter().zip(&b.phi) {
            for (x, y) in ra.iter().zip(rb) {
                assert_relative_eq!(x, y, max_relative = 1e-9, epsilon = 1e-11);
            }
        }
        for (ra, rb) in a.kk.iter().zip(&b.kk) {
            for (x, y) in ra.iter().zip(rb) {
                assert_relative_eq!(x, y, max_relative = 1e-9, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn free_lagrangian_reduces_to_zero() {
        let dynamics = ReducedDynamics::new(
            NonholonomicProblem::parse(&["x"], &["y"], "1/2*(u_x^2 + u_y^2)", &["0"]).unwrap(),
        );
        let red = dynamics
            .reduce(&ConstrainedPoint {
                t: 0.0,
                xa: vec![0.4],
                xalpha: vec![0.5],
                ua: vec![0.7],
            })
            .unwrap();
        assert!(red.f[0].abs() < 1e-13);
        assert!(red.lambda[0].abs() < 1e-13);
    }

    #[test]
    fn unconstrained_harmonic_oscillator() {
        // no constraint coordinates at all: plain Euler–Lagrange, F = −x
        let dynamics = ReducedDynamics::new(
            NonholonomicProblem::parse(&["x"], &[], "1/2*u_x^2 - 1/2*x^2", &[]).unwrap(),
        );
        let red = dynamics
            .reduce(&ConstrainedPoint {
                t: 0.0,
                xa: vec![0.9],
                xalpha: vec![],
                ua: vec![0.2],
            })
            .unwrap();
        assert_relative_eq!(red.f[0], -0.9, max_relative = 1e-12);
        assert!(red.lambda.is_empty());
    }

    #[test]
    fn non_spd_hessian_is_rejected() {
        let dynamics = ReducedDynamics::new(
            NonholonomicProblem::parse(&["x"], &["y"], "1/2*u_x^2 - 1/2*u_y^2", &["0"]).unwrap(),
        );
        let err = dynamics.reduce(&ConstrainedPoint {
            t: 0.0,
            xa: vec![0.0],
            xalpha: vec![0.0],
            ua: vec![0.0],
        });
        assert!(err.is_err());
    }

    #[test]
    fn restricted_mass_stays_spd() {
        // restriction of an SPD form is SPD: random SPD W and random slopes
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..50 {
            let n = 4;
            let m = 2;
            let a = DMatrix::from_fn(n, n, |_, _| next());
            let w = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
            assert!(linalg::is_spd(&w));
            let psi_prime: Vec<Vec<f64>> = (0..n - m)
                .map(|_| (0..m).map(|_| 2.0 * next()).collect())
                .collect();
            let c = restrict_mass(&w, &psi_prime, m);
            assert!(linalg::is_spd(&c), "restricted form lost definiteness");
        }
    }
}
