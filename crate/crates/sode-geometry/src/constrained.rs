//! Geometry of a second-order system with first-order constraints:
//! `ẍ^a = F^a(t, x, ẋ^b)`, `ẋ^α = Ψ^α(t, x, ẋ^b)`.
//!
//! The constraint manifold `Ẽ` carries coordinates `(t, x^a, x^α, u^a)`.
//! The system field splits the tangent spaces into `span{Γ̃, ∂/∂x^α}`,
//! `span{Ṽ_a}` and `span{H̃_a}`; together with an auxiliary linear
//! connection `Υ` on the constraint base this induces a unique linear
//! connection on `Ẽ`. This module builds the adapted frame, the tensors
//! `Φ̃`, `K`, `R̂`, `Ř`, the connection (component table and intrinsic
//! formula), its torsion, the shape maps with the degree-3m eigenvalue
//! condition, and the auxiliary nonlinear connection carried by the
//! constraints themselves.

use crate::error::{GeomError, Result};
use crate::expr::{Expr, JetEnv};
use crate::glue::{
    jet_values, mat_vec, Connection, MatrixField, ScalarField, SubmoduleDerivative, VectorField,
};
use crate::jet::Jet;
use crate::linalg;
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// A constrained system: `m` free coordinates, `n−m` constraint coordinates,
/// component expressions for `F^a` and `Ψ^α`, and optional auxiliary
/// connection coefficients `Υ^γ_{αβ}` on the constraint base (zero when
/// absent).
#[derive(Clone)]
pub struct ConstrainedSystem {
    coords_a: Vec<String>,
    coords_alpha: Vec<String>,
    f: Vec<Expr>,
    psi: Vec<Expr>,
    upsilon: Option<Vec<Vec<Vec<Expr>>>>,
}

/// A point of the constrained evolution space `Ẽ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedPoint {
    pub t: f64,
    pub xa: Vec<f64>,
    pub xalpha: Vec<f64>,
    pub ua: Vec<f64>,
}

impl ConstrainedPoint {
    pub fn slots(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(1 + 2 * self.xa.len() + self.xalpha.len());
        s.push(self.t);
        s.extend_from_slice(&self.xa);
        s.extend_from_slice(&self.xalpha);
        s.extend_from_slice(&self.ua);
        s
    }

    pub fn from_slots(m: usize, k: usize, slots: &[f64]) -> ConstrainedPoint {
        ConstrainedPoint {
            t: slots[0],
            xa: slots[1..=m].to_vec(),
            xalpha: slots[m + 1..=m + k].to_vec(),
            ua: slots[m + k + 1..].to_vec(),
        }
    }
}

impl ConstrainedSystem {
    pub fn new(
        coords_a: Vec<String>,
        coords_alpha: Vec<String>,
        f: Vec<Expr>,
        psi: Vec<Expr>,
        upsilon: Option<Vec<Vec<Vec<Expr>>>>,
    ) -> Result<ConstrainedSystem> {
        let mut all = coords_a.clone();
        all.extend(coords_alpha.iter().cloned());
        crate::sode::check_names(&all)?;
        let m = coords_a.len();
        let k = coords_alpha.len();
        if f.len() != m {
            return Err(GeomError::Dimension(format!(
                "{} force components for {m} free coordinates",
                f.len()
            )));
        }
        if psi.len() != k {
            return Err(GeomError::Dimension(format!(
                "{} constraint components for {k} constraint coordinates",
                psi.len()
            )));
        }
        // F and Ψ may not reference the eliminated velocities u_<alpha>
        let mut names = vec!["t".to_string()];
        names.extend(all.iter().cloned());
        names.extend(coords_a.iter().map(|c| format!("u_{c}")));
        for (i, e) in f.iter().enumerate() {
            e.check_bound(&names).map_err(|err| GeomError::Component {
                name: format!("F[{i}]"),
                source: err,
            })?;
        }
        for (i, e) in psi.iter().enumerate() {
            e.check_bound(&names).map_err(|err| GeomError::Component {
                name: format!("Psi[{i}]"),
                source: err,
            })?;
        }
        if let Some(u) = &upsilon {
            if u.len() != k || u.iter().any(|a| a.len() != k || a.iter().any(|b| b.len() != k)) {
                return Err(GeomError::Dimension(
                    "Upsilon must be a (n-m)^3 expression array".into(),
                ));
            }
            for (g, block) in u.iter().enumerate() {
                for (a, row) in block.iter().enumerate() {
                    for (b, e) in row.iter().enumerate() {
                        e.check_bound(&coords_alpha)
                            .map_err(|err| GeomError::Component {
                                name: format!("Upsilon[{g}][{a}][{b}]"),
                                source: err,
                            })?;
                    }
                }
            }
        }
        Ok(ConstrainedSystem {
            coords_a,
            coords_alpha,
            f,
            psi,
            upsilon,
        })
    }

    pub fn parse(
        coords_a: &[&str],
        coords_alpha: &[&str],
        f: &[&str],
        psi: &[&str],
        upsilon: Option<&[Vec<Vec<&str>>]>,
    ) -> Result<ConstrainedSystem> {
        let parse_all = |srcs: &[&str]| -> Result<Vec<Expr>> {
            srcs.iter()
                .map(|s| crate::expr::parse(s).map_err(GeomError::from))
                .collect()
        };
        let ups = match upsilon {
            None => None,
            Some(blocks) => Some(
                blocks
                    .iter()
                    .map(|block| {
                        block
                            .iter()
                            .map(|row| parse_all(&row.iter().map(|s| &**s).collect::<Vec<_>>()))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        ConstrainedSystem::new(
            coords_a.iter().map(|s| s.to_string()).collect(),
            coords_alpha.iter().map(|s| s.to_string()).collect(),
            parse_all(f)?,
            parse_all(psi)?,
            ups,
        )
    }

    pub fn m(&self) -> usize {
        self.coords_a.len()
    }

    pub fn k(&self) -> usize {
        self.coords_alpha.len()
    }

    pub fn coords_a(&self) -> &[String] {
        &self.coords_a
    }

    pub fn coords_alpha(&self) -> &[String] {
        &self.coords_alpha
    }

    pub fn f_exprs(&self) -> &[Expr] {
        &self.f
    }

    pub fn psi_exprs(&self) -> &[Expr] {
        &self.psi
    }
}

// ---------------------------------------------------------------------------
// Force providers
// ---------------------------------------------------------------------------

/// Source of the jets of `F^a` over the constrained slot space. Closed-form
/// systems evaluate expressions; reduced nonholonomic dynamics run their
/// whole pipeline in jet arithmetic.
pub trait ForceProvider: Send + Sync {
    fn eval_f(&self, p: &[f64], order: usize) -> Result<Vec<Jet>>;
    fn count(&self) -> usize;
}

struct ExprForces {
    exprs: Vec<Expr>,
    slot_names: Vec<String>,
}

impl ForceProvider for ExprForces {
    fn eval_f(&self, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let dim = self.slot_names.len();
        let seeds = (0..dim)
            .map(|v| Jet::coordinate(v, p[v], dim, order).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        let env = JetEnv::new(self.slot_names.clone(), seeds);
        self.exprs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval(&env).map_err(|err| GeomError::Component {
                    name: format!("F[{i}]"),
                    source: err,
                })
            })
            .collect()
    }

    fn count(&self) -> usize {
        self.exprs.len()
    }
}

// ---------------------------------------------------------------------------
// Cached jet bundles
// ---------------------------------------------------------------------------

type PointKey = (Vec<u64>, usize);

pub(crate) struct CFrameJets {
    pub f: Vec<Jet>,
    pub psi: Vec<Jet>,
    /// Γ̃^b_a at order q-1, indexed [b][a]
    pub gamma: Option<Vec<Vec<Jet>>>,
    /// Ψ^β_a = −∂Ψ^β/∂u^a at order q-1, indexed [beta][a]
    pub psi_ab: Option<Vec<Vec<Jet>>>,
    /// Υ^γ_{αβ} at order q
    pub upsilon: Vec<Vec<Vec<Jet>>>,
    /// Φ̃^b_a at order q-2, indexed [b][a]
    pub phi: Option<Vec<Vec<Jet>>>,
    /// K^α_a at order q-2, indexed [alpha][a]
    pub kk: Option<Vec<Vec<Jet>>>,
    /// R̂^c_{ab} at order q-2
    pub r_hat: Option<Vec<Vec<Vec<Jet>>>>,
    /// Ř^β_{ab} at order q-2
    pub r_check: Option<Vec<Vec<Vec<Jet>>>>,
}

type MatCacheKey = (Vec<u64>, usize, u8);

/// Evaluator for one constrained system, with per-point jet caching.
pub struct ConstrainedGeometry {
    coords_a: Vec<String>,
    coords_alpha: Vec<String>,
    psi: Vec<Expr>,
    upsilon: Option<Vec<Vec<Vec<Expr>>>>,
    forces: Arc<dyn ForceProvider>,
    perturb_gamma: f64,
    cache: Mutex<HashMap<PointKey, Arc<CFrameJets>>>,
    mat_cache: Mutex<HashMap<MatCacheKey, Arc<Vec<Vec<Jet>>>>>,
}

impl ConstrainedGeometry {
    pub fn from_system(sys: &ConstrainedSystem) -> Arc<ConstrainedGeometry> {
        Self::from_system_perturbed(sys, 0.0)
    }

    pub fn from_system_perturbed(
        sys: &ConstrainedSystem,
        perturb_gamma: f64,
    ) -> Arc<ConstrainedGeometry> {
        let slot_names = slot_names(&sys.coords_a, &sys.coords_alpha);
        Arc::new(ConstrainedGeometry {
            coords_a: sys.coords_a.clone(),
            coords_alpha: sys.coords_alpha.clone(),
            psi: sys.psi.clone(),
            upsilon: sys.upsilon.clone(),
            forces: Arc::new(ExprForces {
                exprs: sys.f.clone(),
                slot_names,
            }),
            perturb_gamma,
            cache: Mutex::new(HashMap::new()),
            mat_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Same frame machinery over an arbitrary force provider (used by the
    /// nonholonomic reduction).
    pub fn with_forces(
        coords_a: Vec<String>,
        coords_alpha: Vec<String>,
        psi: Vec<Expr>,
        upsilon: Option<Vec<Vec<Vec<Expr>>>>,
        forces: Arc<dyn ForceProvider>,
        perturb_gamma: f64,
    ) -> Arc<ConstrainedGeometry> {
        assert_eq!(forces.count(), coords_a.len());
        Arc::new(ConstrainedGeometry {
            coords_a,
            coords_alpha,
            psi,
            upsilon,
            forces,
            perturb_gamma,
            cache: Mutex::new(HashMap::new()),
            mat_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn m(&self) -> usize {
        self.coords_a.len()
    }

    pub fn k(&self) -> usize {
        self.coords_alpha.len()
    }

    /// Dimension of `Ẽ`, `n + m + 1`.
    pub fn dim(&self) -> usize {
        1 + 2 * self.m() + self.k()
    }

    pub fn xa_slot(&self, a: usize) -> usize {
        1 + a
    }

    pub fn xalpha_slot(&self, al: usize) -> usize {
        1 + self.m() + al
    }

    pub fn ua_slot(&self, a: usize) -> usize {
        1 + self.m() + self.k() + a
    }

    pub fn coords_a(&self) -> &[String] {
        &self.coords_a
    }

    pub fn coords_alpha(&self) -> &[String] {
        &self.coords_alpha
    }

    fn slot_names(&self) -> Vec<String> {
        slot_names(&self.coords_a, &self.coords_alpha)
    }

    fn seeds(&self, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let dim = self.dim();
        (0..dim)
            .map(|v| Jet::coordinate(v, p[v], dim, order).map_err(GeomError::from))
            .collect()
    }

    pub(crate) fn bundle(&self, p: &[f64], q: usize) -> Result<Arc<CFrameJets>> {
        let key: PointKey = (p.iter().map(|v| v.to_bits()).collect(), q);
        if let Some(b) = self.cache.lock().unwrap().get(&key) {
            return Ok(b.clone());
        }
        let b = Arc::new(self.build_bundle(p, q)?);
        self.cache.lock().unwrap().insert(key, b.clone());
        Ok(b)
    }

    fn cached_matrix(
        &self,
        p: &[f64],
        order: usize,
        tag: u8,
        build: impl FnOnce() -> Result<Vec<Vec<Jet>>>,
    ) -> Result<Vec<Vec<Jet>>> {
        let key: MatCacheKey = (p.iter().map(|v| v.to_bits()).collect(), order, tag);
        if let Some(hit) = self.mat_cache.lock().unwrap().get(&key) {
            return Ok((**hit).clone());
        }
        let rows = build()?;
        self.mat_cache
            .lock()
            .unwrap()
            .insert(key, Arc::new(rows.clone()));
        Ok(rows)
    }

    fn build_bundle(&self, p: &[f64], q: usize) -> Result<CFrameJets> {
        let (m, k) = (self.m(), self.k());
        let dim = self.dim();
        let seeds = self.seeds(p, q)?;
        let env = JetEnv::new(self.slot_names(), seeds);
        let f = self.forces.eval_f(p, q)?;
        let psi: Vec<Jet> = self
            .psi
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval(&env).map_err(|err| GeomError::Component {
                    name: format!("Psi[{i}]"),
                    source: err,
                })
            })
            .collect::<Result<_>>()?;
        let upsilon = match &self.upsilon {
            None => vec![vec![vec![Jet::constant(0.0, dim, q); k]; k]; k],
            Some(blocks) => {
                let mut out = vec![vec![vec![Jet::constant(0.0, dim, q); k]; k]; k];
                for (g, block) in blocks.iter().enumerate() {
                    for (a, row) in block.iter().enumerate() {
                        for (b, e) in row.iter().enumerate() {
                            out[g][a][b] =
                                e.eval(&env).map_err(|err| GeomError::Component {
                                    name: format!("Upsilon[{g}][{a}][{b}]"),
                                    source: err,
                                })?;
                        }
                    }
                }
                out
            }
        };
        let (gamma, psi_ab) = if q >= 1 {
            let mut g = vec![vec![Jet::constant(0.0, dim, q - 1); m]; m];
            for b in 0..m {
                for a in 0..m {
                    g[b][a] = f[b]
                        .partial_jet(self.ua_slot(a))
                        .scale(-0.5)
                        .add_scalar(self.perturb_gamma);
                }
            }
            let mut pa = vec![vec![Jet::constant(0.0, dim, q - 1); m]; k];
            for be in 0..k {
                for a in 0..m {
                    pa[be][a] = psi[be].partial_jet(self.ua_slot(a)).neg();
                }
            }
            (Some(g), Some(pa))
        } else {
            (None, None)
        };
        let (phi, kk, r_hat, r_check) = if q >= 2 {
            let g = gamma.as_ref().unwrap();
            let pa = psi_ab.as_ref().unwrap();
            // Φ̃^b_a = −∂F^b/∂x^a − Γ̃(Γ̃^b_a) − Γ̃^c_a Γ̃^b_c + Ψ^α_a ∂F^b/∂x^α
            let mut phi = vec![vec![Jet::constant(0.0, dim, q - 2); m]; m];
            for b in 0..m {
                for a in 0..m {
                    let mut acc = f[b].partial_jet(self.xa_slot(a)).truncate(q - 2).neg();
                    acc = acc.sub(&self.sode_derivative(&g[b][a], &f, &psi, p)?);
                    for c in 0..m {
                        acc = acc.sub(&g[c][a].truncate(q - 2).mul(&g[b][c].truncate(q - 2)));
                    }
                    for al in 0..k {
                        acc = acc.add(
                            &pa[al][a]
                                .truncate(q - 2)
                                .mul(&f[b].partial_jet(self.xalpha_slot(al)).truncate(q - 2)),
                        );
                    }
                    phi[b][a] = acc;
                }
            }
            // K^α_a = −Γ̃(Ψ^α_a) − H̃_a(Ψ^α) + Γ̃^b_a Ψ^α_b
            let mut kk = vec![vec![Jet::constant(0.0, dim, q - 2); m]; k];
            for al in 0..k {
                for a in 0..m {
                    let mut acc = self.sode_derivative(&pa[al][a], &f, &psi, p)?.neg();
                    acc = acc.sub(&self.h_derivative(a, &psi[al].truncate(q - 1), g, pa)?);
                    for b in 0..m {
                        acc = acc.add(&g[b][a].truncate(q - 2).mul(&pa[al][b].truncate(q - 2)));
                    }
                    kk[al][a] = acc;
                }
            }
            // R^d_{ab} with the a-indices only, then the hatted and checked forms
            let mut r_hat = vec![vec![vec![Jet::constant(0.0, dim, q - 2); m]; m]; m];
            for d in 0..m {
                for a in 0..m {
                    for b in 0..m {
                        let mut acc = f[d]
                            .partial_jet(self.xa_slot(a))
                            .partial_jet(self.ua_slot(b))
                            .sub(
                                &f[d].partial_jet(self.xa_slot(b)).partial_jet(self.ua_slot(a)),
                            );
                        let mut inner = Jet::constant(0.0, dim, q - 2);
                        for c in 0..m {
                            let dc_a = f[c].partial_jet(self.ua_slot(a)).truncate(q - 2);
                            let dc_b = f[c].partial_jet(self.ua_slot(b)).truncate(q - 2);
                            let d2_cb = f[d].partial_jet(self.ua_slot(c)).partial_jet(self.ua_slot(b));
                            let d2_ca = f[d].partial_jet(self.ua_slot(c)).partial_jet(self.ua_slot(a));
                            inner = inner.add(&dc_a.mul(&d2_cb)).sub(&dc_b.mul(&d2_ca));
                        }
                        let r_plain = acc.add(&inner.scale(0.5)).scale(0.5);
                        // R̂^d_{ab} = R^d_{ab} − Ψ^β_b ∂Γ̃^d_a/∂x^β + Ψ^β_a ∂Γ̃^d_b/∂x^β
                        acc = r_plain;
                        for be in 0..k {
                            let dg_a = g[d][a].partial_jet(self.xalpha_slot(be));
                            let dg_b = g[d][b].partial_jet(self.xalpha_slot(be));
                            acc = acc
                                .sub(&pa[be][b].truncate(q - 2).mul(&dg_a))
                                .add(&pa[be][a].truncate(q - 2).mul(&dg_b));
                        }
                        r_hat[d][a][b] = acc;
                    }
                }
            }
            // Ř^β_{ab} = (∂Ψ^β_a/∂x^b − ∂Ψ^β_b/∂x^a)
            //          + (Γ̃^c_a ∂Ψ^β_b/∂u^c − Γ̃^c_b ∂Ψ^β_a/∂u^c)
            //          + (Ψ^α_a ∂Ψ^β_b/∂x^α − Ψ^α_b ∂Ψ^β_a/∂x^α)
            let mut r_check = vec![vec![vec![Jet::constant(0.0, dim, q - 2); m]; m]; k];
            for be in 0..k {
                for a in 0..m {
                    for b in 0..m {
                        let mut acc = pa[be][a]
                            .partial_jet(self.xa_slot(b))
                            .sub(&pa[be][b].partial_jet(self.xa_slot(a)));
                        for c in 0..m {
                            acc = acc
                                .add(&g[c][a].truncate(q - 2).mul(&pa[be][b].partial_jet(self.ua_slot(c))))
                                .sub(&g[c][b].truncate(q - 2).mul(&pa[be][a].partial_jet(self.ua_slot(c))));
                        }
                        for al in 0..k {
                            acc = acc
                                .add(
                                    &pa[al][a]
                                        .truncate(q - 2)
                                        .mul(&pa[be][b].partial_jet(self.xalpha_slot(al))),
                                )
                                .sub(
                                    &pa[al][b]
                                        .truncate(q - 2)
                                        .mul(&pa[be][a].partial_jet(self.xalpha_slot(al))),
                                );
                        }
                        r_check[be][a][b] = acc;
                    }
                }
            }
            (Some(phi), Some(kk), Some(r_hat), Some(r_check))
        } else {
            (None, None, None, None)
        };
        Ok(CFrameJets {
            f,
            psi,
            gamma,
            psi_ab,
            upsilon,
            phi,
            kk,
            r_hat,
            r_check,
        })
    }

    /// `Γ̃(g) = g_t + u^a g_{x^a} + Ψ^β g_{x^β} + F^b g_{u^b}`.
    fn sode_derivative(&self, g: &Jet, f: &[Jet], psi: &[Jet], p: &[f64]) -> Result<Jet> {
        let out_order = g.order() - 1;
        let mut acc = g.partial_jet(0);
        for a in 0..self.m() {
            let u = Jet::coordinate(self.ua_slot(a), p[self.ua_slot(a)], self.dim(), out_order)?;
            acc = acc.add(&u.mul(&g.partial_jet(self.xa_slot(a))));
            acc = acc.add(&f[a].truncate(out_order).mul(&g.partial_jet(self.ua_slot(a))));
        }
        for be in 0..self.k() {
            acc = acc.add(
                &psi[be]
                    .truncate(out_order)
                    .mul(&g.partial_jet(self.xalpha_slot(be))),
            );
        }
        Ok(acc)
    }

    /// `H̃_a(g) = g_{x^a} − Γ̃^b_a g_{u^b} − Ψ^β_a g_{x^β}`.
    fn h_derivative(
        &self,
        a: usize,
        g: &Jet,
        gamma: &[Vec<Jet>],
        psi_ab: &[Vec<Jet>],
    ) -> Result<Jet> {
        let out_order = g.order() - 1;
        let mut acc = g.partial_jet(self.xa_slot(a));
        for b in 0..self.m() {
            acc = acc.sub(&gamma[b][a].truncate(out_order).mul(&g.partial_jet(self.ua_slot(b))));
        }
        for be in 0..self.k() {
            acc = acc.sub(
                &psi_ab[be][a]
                    .truncate(out_order)
                    .mul(&g.partial_jet(self.xalpha_slot(be))),
            );
        }
        Ok(acc)
    }

    // -- frame fields -------------------------------------------------------

    /// `Γ̃ = ∂_t + u^a ∂_{x^a} + Ψ^β ∂_{x^β} + F^b ∂_{u^b}`.
    pub fn gamma_field(self: &Arc<Self>) -> VectorField {
        let geo = self.clone();
        VectorField::new(self.dim(), move |p, order| {
            let b = geo.bundle(p, order)?;
            let mut out = Vec::with_capacity(geo.dim());
            out.push(Jet::constant(1.0, geo.dim(), order));
            for a in 0..geo.m() {
                out.push(Jet::coordinate(
                    geo.ua_slot(a),
                    p[geo.ua_slot(a)],
                    geo.dim(),
                    order,
                )?);
            }
            for be in 0..geo.k() {
                out.push(b.psi[be].truncate(order));
            }
            for a in 0..geo.m() {
                out.push(b.f[a].truncate(order));
            }
            Ok(out)
        })
    }

    pub fn dalpha_field(&self, al: usize) -> VectorField {
        VectorField::coordinate_axis(self.dim(), self.xalpha_slot(al))
    }

    pub fn v_field(&self, a: usize) -> VectorField {
        VectorField::coordinate_axis(self.dim(), self.ua_slot(a))
    }

    /// `H̃_a = ∂_{x^a} − Γ̃^b_a ∂_{u^b} − Ψ^β_a ∂_{x^β}`.
    pub fn h_field(self: &Arc<Self>, a: usize) -> VectorField {
        let geo = self.clone();
        VectorField::new(self.dim(), move |p, order| {
            let b = geo.bundle(p, order + 1)?;
            let g = b.gamma.as_ref().unwrap();
            let pa = b.psi_ab.as_ref().unwrap();
            let mut out = vec![Jet::constant(0.0, geo.dim(), order); geo.dim()];
            out[geo.xa_slot(a)] = Jet::constant(1.0, geo.dim(), order);
            for j in 0..geo.m() {
                out[geo.ua_slot(j)] = g[j][a].truncate(order).neg();
            }
            for be in 0..geo.k() {
                out[geo.xalpha_slot(be)] = pa[be][a].truncate(order).neg();
            }
            Ok(out)
        })
    }

    /// Frame vectors as rows in the order `[Γ̃, ∂/∂x^α, Ṽ_a, H̃_a]`.
    pub fn frame_rows(self: &Arc<Self>, p: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        self.cached_matrix(p, order, 10, || {
            let mut rows = Vec::with_capacity(self.dim());
            rows.push(self.gamma_field().eval(p, order)?);
            for al in 0..self.k() {
                rows.push(self.dalpha_field(al).eval(p, order)?);
            }
            for a in 0..self.m() {
                rows.push(self.v_field(a).eval(p, order)?);
            }
            for a in 0..self.m() {
                rows.push(self.h_field(a).eval(p, order)?);
            }
            Ok(rows)
        })
    }

    /// Dual covectors as rows in the order `[dt, η^α, ψ̃^a, θ^b]`
    /// (pairing with `frame_rows` is the identity).
    pub fn coframe_rows(self: &Arc<Self>, p: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        self.cached_matrix(p, order, 11, || self.coframe_rows_uncached(p, order))
    }

    fn coframe_rows_uncached(&self, p: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        let (m, k) = (self.m(), self.k());
        let dim = self.dim();
        let b = self.bundle(p, order + 1)?;
        let g = b.gamma.as_ref().unwrap();
        let pa = b.psi_ab.as_ref().unwrap();
        let zero = || Jet::constant(0.0, dim, order);
        let mut rows = vec![vec![zero(); dim]; dim];
        rows[0][0] = Jet::constant(1.0, dim, order);
        let u_jet = |a: usize| Jet::coordinate(self.ua_slot(a), p[self.ua_slot(a)], dim, order);
        for al in 0..k {
            // η^α = (dx^α − Ψ^α dt) + Ψ^α_b (dx^b − u^b dt)
            let row = 1 + al;
            let mut t_part = b.psi[al].truncate(order).neg();
            for a in 0..m {
                let pab = pa[al][a].truncate(order);
                t_part = t_part.sub(&pab.mul(&u_jet(a)?));
                rows[row][self.xa_slot(a)] = pab;
            }
            rows[row][0] = t_part;
            rows[row][self.xalpha_slot(al)] = Jet::constant(1.0, dim, order);
        }
        for a in 0..m {
            // ψ̃^a = du^a − F^a dt + Γ̃^a_b (dx^b − u^b dt)
            let row = 1 + k + a;
            let mut t_part = b.f[a].truncate(order).neg();
            for c in 0..m {
                let gac = g[a][c].truncate(order);
                t_part = t_part.sub(&gac.mul(&u_jet(c)?));
                rows[row][self.xa_slot(c)] = gac;
            }
            rows[row][0] = t_part;
            rows[row][self.ua_slot(a)] = Jet::constant(1.0, dim, order);
            // θ^a = dx^a − u^a dt
            let row = 1 + k + m + a;
            rows[row][0] = u_jet(a)?.neg();
            rows[row][self.xa_slot(a)] = Jet::constant(1.0, dim, order);
        }
        Ok(rows)
    }

    fn outer_tensor(
        self: &Arc<Self>,
        tag: u8,
        vector_range: std::ops::Range<usize>,
        covector_range: std::ops::Range<usize>,
    ) -> MatrixField {
        let geo = self.clone();
        MatrixField::new(self.dim(), move |p, order| {
            geo.cached_matrix(p, order, tag, || {
                let frame = geo.frame_rows(p, order)?;
                let co = geo.coframe_rows(p, order)?;
                let dim = geo.dim();
                let mut mat = vec![vec![Jet::constant(0.0, dim, order); dim]; dim];
                for (v_idx, c_idx) in vector_range.clone().zip(covector_range.clone()) {
                    for r in 0..dim {
                        for c in 0..dim {
                            mat[r][c] = mat[r][c].add(&frame[v_idx][r].mul(&co[c_idx][c]));
                        }
                    }
                }
                Ok(mat)
            })
        })
    }

    pub fn p_gamma(self: &Arc<Self>) -> MatrixField {
        self.outer_tensor(0, 0..1, 0..1)
    }

    /// `N = η^α ⊗ ∂/∂x^α`.
    pub fn n_tensor(self: &Arc<Self>) -> MatrixField {
        self.outer_tensor(1, 1..1 + self.k(), 1..1 + self.k())
    }

    pub fn p_v(self: &Arc<Self>) -> MatrixField {
        let (m, k) = (self.m(), self.k());
        self.outer_tensor(2, 1 + k..1 + k + m, 1 + k..1 + k + m)
    }

    pub fn p_h(self: &Arc<Self>) -> MatrixField {
        let (m, k) = (self.m(), self.k());
        self.outer_tensor(3, 1 + k + m..1 + k + 2 * m, 1 + k + m..1 + k + 2 * m)
    }

    /// `S = θ^a ⊗ Ṽ_a`.
    pub fn s_tensor(self: &Arc<Self>) -> MatrixField {
        let (m, k) = (self.m(), self.k());
        self.outer_tensor(4, 1 + k..1 + k + m, 1 + k + m..1 + k + 2 * m)
    }

    /// `Q = ψ̃^a ⊗ H̃_a`.
    pub fn q_tensor(self: &Arc<Self>) -> MatrixField {
        let (m, k) = (self.m(), self.k());
        self.outer_tensor(5, 1 + k + m..1 + k + 2 * m, 1 + k..1 + k + m)
    }

    /// Value-level tensors at a point; requires order >= 2.
    pub fn tensors_at(&self, p: &[f64], order: usize) -> Result<ConstrainedTensors> {
        if order < 2 {
            return Err(GeomError::OrderTooLow {
                order,
                needed: "Φ̃, K, R̂ and Ř",
                min: 2,
            });
        }
        let b = self.bundle(p, order)?;
        let (m, k) = (self.m(), self.k());
        let g = b.gamma.as_ref().unwrap();
        let pa = b.psi_ab.as_ref().unwrap();
        let phi = b.phi.as_ref().unwrap();
        let kk = b.kk.as_ref().unwrap();
        let r_hat = b.r_hat.as_ref().unwrap();
        let r_check = b.r_check.as_ref().unwrap();
        let to2 = |t: &Vec<Vec<Jet>>| -> Vec<Vec<f64>> {
            t.iter().map(|row| jet_values(row)).collect()
        };
        let to3 = |t: &Vec<Vec<Vec<Jet>>>| -> Vec<Vec<Vec<f64>>> {
            t.iter().map(|b| b.iter().map(|row| jet_values(row)).collect()).collect()
        };
        // derivative blocks entering the component/torsion tables
        let mut df_dxalpha = vec![vec![0.0; k]; m];
        for c in 0..m {
            for al in 0..k {
                df_dxalpha[c][al] = b.f[c].partial_jet(self.xalpha_slot(al)).value();
            }
        }
        let mut dpsi_dxalpha = vec![vec![0.0; k]; k];
        for be in 0..k {
            for al in 0..k {
                dpsi_dxalpha[be][al] = b.psi[be].partial_jet(self.xalpha_slot(al)).value();
            }
        }
        let mut dpsiab_dxalpha = vec![vec![vec![0.0; k]; m]; k];
        let mut dpsiab_du = vec![vec![vec![0.0; m]; m]; k];
        for be in 0..k {
            for a in 0..m {
                for al in 0..k {
                    dpsiab_dxalpha[be][a][al] =
                        pa[be][a].partial_jet(self.xalpha_slot(al)).value();
                }
                for c in 0..m {
                    dpsiab_du[be][a][c] = pa[be][a].partial_jet(self.ua_slot(c)).value();
                }
            }
        }
        let mut dgamma_du = vec![vec![vec![0.0; m]; m]; m];
        let mut dgamma_dxalpha = vec![vec![vec![0.0; k]; m]; m];
        for c in 0..m {
            for a in 0..m {
                for j in 0..m {
                    dgamma_du[c][a][j] = g[c][a].partial_jet(self.ua_slot(j)).value();
                }
                for al in 0..k {
                    dgamma_dxalpha[c][a][al] = g[c][a].partial_jet(self.xalpha_slot(al)).value();
                }
            }
        }
        Ok(ConstrainedTensors {
            f: jet_values(&b.f),
            psi: jet_values(&b.psi),
            gamma: to2(g),
            psi_ab: to2(pa),
            phi: to2(phi),
            kk: to2(kk),
            r_hat: to3(r_hat),
            r_check: to3(r_check),
            upsilon: to3(&b.upsilon),
            df_dxalpha,
            dpsi_dxalpha,
            dpsiab_dxalpha,
            dpsiab_du,
            dgamma_du,
            dgamma_dxalpha,
        })
    }

    /// Residuals of the two vertical-derivative identities
    /// `Ṽ_a(Φ̃^c_b) − Ṽ_b(Φ̃^c_a) = 3 R̂^c_{ab}` and
    /// `Ṽ_a(K^α_b) − Ṽ_b(K^α_a) = 2 Ř^α_{ab}`, relative to local scale.
    pub fn vertical_identity_residuals(&self, p: &[f64]) -> Result<(f64, f64)> {
        let b = self.bundle(p, 3)?;
        let (m, k) = (self.m(), self.k());
        let phi = b.phi.as_ref().unwrap();
        let kk = b.kk.as_ref().unwrap();
        let r_hat = b.r_hat.as_ref().unwrap();
        let r_check = b.r_check.as_ref().unwrap();
        let mut worst_phi = 0.0f64;
        let mut scale_phi = 1.0f64;
        for c in 0..m {
            for a in 0..m {
                for bb in 0..m {
                    let lhs = phi[c][bb].partial_jet(self.ua_slot(a)).value()
                        - phi[c][a].partial_jet(self.ua_slot(bb)).value();
                    let rhs = 3.0 * r_hat[c][a][bb].value();
                    worst_phi = worst_phi.max((lhs - rhs).abs());
                    scale_phi = scale_phi.max(lhs.abs()).max(rhs.abs());
                }
            }
        }
        let mut worst_k = 0.0f64;
        let mut scale_k = 1.0f64;
        for al in 0..k {
            for a in 0..m {
                for bb in 0..m {
                    let lhs = kk[al][bb].partial_jet(self.ua_slot(a)).value()
                        - kk[al][a].partial_jet(self.ua_slot(bb)).value();
                    let rhs = 2.0 * r_check[al][a][bb].value();
                    worst_k = worst_k.max((lhs - rhs).abs());
                    scale_k = scale_k.max(lhs.abs()).max(rhs.abs());
                }
            }
        }
        Ok((worst_phi / scale_phi, worst_k / scale_k))
    }
}

fn slot_names(coords_a: &[String], coords_alpha: &[String]) -> Vec<String> {
    let mut names = vec!["t".to_string()];
    names.extend(coords_a.iter().cloned());
    names.extend(coords_alpha.iter().cloned());
    names.extend(coords_a.iter().map(|c| format!("u_{c}")));
    names
}

/// Value-level tensors of a constrained system at a point.
#[derive(Debug, Clone)]
pub struct ConstrainedTensors {
    pub f: Vec<f64>,
    pub psi: Vec<f64>,
    /// Γ̃^b_a, indexed [b][a]
    pub gamma: Vec<Vec<f64>>,
    /// Ψ^β_a = −∂Ψ^β/∂u^a, indexed [beta][a]
    pub psi_ab: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub kk: Vec<Vec<f64>>,
    pub r_hat: Vec<Vec<Vec<f64>>>,
    pub r_check: Vec<Vec<Vec<f64>>>,
    pub upsilon: Vec<Vec<Vec<f64>>>,
    /// ∂F^c/∂x^α, indexed [c][alpha]
    pub df_dxalpha: Vec<Vec<f64>>,
    /// ∂Ψ^β/∂x^α, indexed [beta][alpha]
    pub dpsi_dxalpha: Vec<Vec<f64>>,
    /// ∂Ψ^β_a/∂x^α, indexed [beta][a][alpha]
    pub dpsiab_dxalpha: Vec<Vec<Vec<f64>>>,
    /// ∂Ψ^α_b/∂u^a, indexed [alpha][b][a]
    pub dpsiab_du: Vec<Vec<Vec<f64>>>,
    /// ∂Γ̃^c_a/∂u^b, indexed [c][a][b]
    pub dgamma_du: Vec<Vec<Vec<f64>>>,
    /// ∂Γ̃^b_a/∂x^α, indexed [b][a][alpha]
    pub dgamma_dxalpha: Vec<Vec<Vec<f64>>>,
}

// ---------------------------------------------------------------------------
// The constrained linear connection
// ---------------------------------------------------------------------------

/// The auxiliary-connection derivative on `Img(N)`:
/// `∇^N_X Y = (X(Y^γ) + Υ^γ_{αβ} X^α Y^β) ∂/∂x^γ`.
pub struct NPartDerivative {
    pub geo: Arc<ConstrainedGeometry>,
}

impl SubmoduleDerivative for NPartDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let geo = &self.geo;
        let (k, dim) = (geo.k(), geo.dim());
        let b = geo.bundle(p, order)?;
        let xj = x.eval(p, order)?;
        let mut out = vec![Jet::constant(0.0, dim, order); dim];
        for g in 0..k {
            let yy = y.clone();
            let slot = geo.xalpha_slot(g);
            let comp = ScalarField::new(dim, move |q, ord| Ok(yy.eval(q, ord)?[slot].clone()));
            let mut acc = x.derive_scalar(&comp, p, order)?;
            let yj = y.eval(p, order)?;
            for al in 0..k {
                for be in 0..k {
                    let term = b.upsilon[g][al][be]
                        .truncate(order)
                        .mul(&xj[geo.xalpha_slot(al)])
                        .mul(&yj[geo.xalpha_slot(be)]);
                    acc = acc.add(&term);
                }
            }
            out[slot] = acc;
        }
        Ok(out)
    }
}

/// `∇^Γ̃_X Y = X(dt(Y)) Γ̃` on `span{Γ̃}`.
pub struct CGammaPartDerivative {
    pub geo: Arc<ConstrainedGeometry>,
}

impl SubmoduleDerivative for CGammaPartDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let dim = self.geo.dim();
        let yy = y.clone();
        let dty = ScalarField::new(dim, move |q, ord| Ok(yy.eval(q, ord)?[0].clone()));
        let xdty = x.derive_scalar(&dty, p, order)?;
        let gamma = self.geo.gamma_field().eval(p, order)?;
        Ok(gamma.iter().map(|g| g.mul(&xdty)).collect())
    }
}

/// `∇^H_X Y = Q([X, S(Y)])` on the horizontal block.
pub struct CHorizontalPartDerivative {
    pub geo: Arc<ConstrainedGeometry>,
}

impl SubmoduleDerivative for CHorizontalPartDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let sy = self.geo.s_tensor().apply(y);
        let br = x.bracket(&sy).eval(p, order)?;
        Ok(mat_vec(&self.geo.q_tensor().eval(p, order)?, &br))
    }
}

/// `∇^V_X Y = S([X, Q(Y)])` on the vertical block.
pub struct CVerticalPartDerivative {
    pub geo: Arc<ConstrainedGeometry>,
}

impl SubmoduleDerivative for CVerticalPartDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let qy = self.geo.q_tensor().apply(y);
        let br = x.bracket(&qy).eval(p, order)?;
        Ok(mat_vec(&self.geo.s_tensor().eval(p, order)?, &br))
    }
}

/// Glued form of the constrained connection from its four submodule parts.
pub fn constrained_glued_connection(geo: &Arc<ConstrainedGeometry>) -> crate::glue::GluedConnection {
    let parts: Vec<(MatrixField, Arc<dyn SubmoduleDerivative>)> = vec![
        (
            geo.p_gamma(),
            Arc::new(CGammaPartDerivative { geo: geo.clone() }) as Arc<dyn SubmoduleDerivative>,
        ),
        (geo.n_tensor(), Arc::new(NPartDerivative { geo: geo.clone() })),
        (
            geo.p_h(),
            Arc::new(CHorizontalPartDerivative { geo: geo.clone() }),
        ),
        (
            geo.p_v(),
            Arc::new(CVerticalPartDerivative { geo: geo.clone() }),
        ),
    ];
    crate::glue::GluedConnection::new(geo.dim(), parts)
}

/// The constrained connection in explicit form:
/// `∇̃_X Y = X(dt(Y))Γ̃ + ∇^N_{N X}(N Y) + Q([P_H X, S Y]) + S([P_V X, Q Y])
///  + N([X − N X, N Y]) + P_H([X − P_H X, P_H Y]) + P_V([X − P_V X, P_V Y])`.
pub struct ConstrainedConnection {
    pub geo: Arc<ConstrainedGeometry>,
}

impl Connection for ConstrainedConnection {
    fn dim(&self) -> usize {
        self.geo.dim()
    }

    fn covderiv(
        &self,
        x: &VectorField,
        y: &VectorField,
        p: &[f64],
        order: usize,
    ) -> Result<Vec<Jet>> {
        let geo = &self.geo;
        let dim = geo.dim();
        let s = geo.s_tensor();
        let q = geo.q_tensor();
        let p_h = geo.p_h();
        let p_v = geo.p_v();
        let n = geo.n_tensor();

        let yy = y.clone();
        let dty = ScalarField::new(dim, move |pt, ord| Ok(yy.eval(pt, ord)?[0].clone()));
        let xdty = x.derive_scalar(&dty, p, order)?;
        let gamma = geo.gamma_field().eval(p, order)?;
        let mut total: Vec<Jet> = gamma.iter().map(|g| g.mul(&xdty)).collect();

        let nx = n.apply(x);
        let ny = n.apply(y);
        let nabla_n = NPartDerivative { geo: geo.clone() };
        let tn = nabla_n.eval(&nx, &ny, p, order)?;

        let phx = p_h.apply(x);
        let pvx = p_v.apply(x);
        let t2 = mat_vec(&q.eval(p, order)?, &phx.bracket(&s.apply(y)).eval(p, order)?);
        let t3 = mat_vec(&s.eval(p, order)?, &pvx.bracket(&q.apply(y)).eval(p, order)?);
        let tn2 = mat_vec(&n.eval(p, order)?, &x.sub(&nx).bracket(&ny).eval(p, order)?);
        let t4 = mat_vec(
            &p_h.eval(p, order)?,
            &x.sub(&phx).bracket(&p_h.apply(y)).eval(p, order)?,
        );
        let t5 = mat_vec(
            &p_v.eval(p, order)?,
            &x.sub(&pvx).bracket(&p_v.apply(y)).eval(p, order)?,
        );
        for i in 0..dim {
            total[i] = total[i]
                .add(&tn[i])
                .add(&t2[i])
                .add(&t3[i])
                .add(&tn2[i])
                .add(&t4[i])
                .add(&t5[i]);
        }
        Ok(total)
    }
}

/// `∇̃_X Y` values at a point through the intrinsic formula.
pub fn constrained_covderiv(
    geo: &Arc<ConstrainedGeometry>,
    x: &VectorField,
    y: &VectorField,
    point: &ConstrainedPoint,
) -> Result<Vec<f64>> {
    let conn = ConstrainedConnection { geo: geo.clone() };
    Ok(jet_values(&conn.covderiv(x, y, &point.slots(), 0)?))
}

/// Nonzero adapted-basis components of the constrained connection:
/// `∇̃_Γ̃ H̃_a = Γ̃^b_a H̃_b`, `∇̃_Γ̃ Ṽ_a = Γ̃^b_a Ṽ_b`,
/// `∇̃_{H̃_a} H̃_b = (∂Γ̃^c_a/∂u^b) H̃_c`, `∇̃_{H̃_a} Ṽ_b = (∂Γ̃^c_a/∂u^b) Ṽ_c`,
/// `∇̃_Γ̃ ∂_α = −(∂Ψ^β/∂x^α) ∂_β`, `∇̃_{H̃_a} ∂_α = (∂Ψ^β_a/∂x^α) ∂_β`,
/// `∇̃_{∂_α} ∂_β = Υ^γ_{αβ} ∂_γ`.
#[derive(Debug, Clone)]
pub struct ConstrainedComponents {
    pub gamma: Vec<Vec<f64>>,
    /// [c][a][b] = ∂Γ̃^c_a/∂u^b
    pub dgamma_du: Vec<Vec<Vec<f64>>>,
    /// [beta][alpha] = ∂Ψ^β/∂x^α
    pub dpsi_dxalpha: Vec<Vec<f64>>,
    /// [beta][a][alpha] = ∂Ψ^β_a/∂x^α
    pub dpsiab_dxalpha: Vec<Vec<Vec<f64>>>,
    /// [gamma][alpha][beta]
    pub upsilon: Vec<Vec<Vec<f64>>>,
}

pub fn constrained_connection_components(
    geo: &Arc<ConstrainedGeometry>,
    point: &ConstrainedPoint,
) -> Result<ConstrainedComponents> {
    let t = geo.tensors_at(&point.slots(), 2)?;
    Ok(ConstrainedComponents {
        gamma: t.gamma,
        dgamma_du: t.dgamma_du,
        dpsi_dxalpha: t.dpsi_dxalpha,
        dpsiab_dxalpha: t.dpsiab_dxalpha,
        upsilon: t.upsilon,
    })
}

/// Torsion table data. All entries are determined by the returned tensors:
/// `T(Γ̃,Ṽ_a) = H̃_a`, `T(Γ̃,H̃_a) = −Φ̃^b_a Ṽ_b − K^α_a ∂_α`,
/// `T(Γ̃,∂_α) = (∂F^c/∂x^α) Ṽ_c`, `T(Ṽ_a,H̃_b) = (∂Ψ^α_b/∂u^a) ∂_α`,
/// `T(H̃_a,H̃_b) = −R̂^c_{ab} Ṽ_c − Ř^β_{ab} ∂_β`,
/// `T(H̃_a,∂_α) = −(∂Γ̃^b_a/∂x^α) Ṽ_b`,
/// `T(∂_α,∂_β) = (Υ^γ_{αβ} − Υ^γ_{βα}) ∂_γ`, all others zero.
pub fn constrained_torsion_table(
    geo: &Arc<ConstrainedGeometry>,
    point: &ConstrainedPoint,
) -> Result<ConstrainedTensors> {
    geo.tensors_at(&point.slots(), 2)
}

// ---------------------------------------------------------------------------
// Shape maps and the eigenvalue condition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConstrainedEigenpair {
    pub mu: f64,
    pub multiplicity: usize,
    /// null-space basis of `A_Γ̃ − μI` in the adapted frame `[Γ̃, ∂α, Ṽ, H̃]`
    pub eigenvectors_adapted: Vec<Vec<f64>>,
    pub eigenvectors_coords: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ConstraintShapeAction {
    /// coordinate components of `A_{∂/∂x^α}(Γ̃)` per α
    pub on_gamma: Vec<Vec<f64>>,
    /// max |A_{∂α}(H̃_a)| per α
    pub on_h_norm: Vec<f64>,
    /// max |∂Ψ^β/∂x^α| and max |∂F^c/∂x^α| per α — the two sides of the
    /// decoupling equivalence
    pub dpsi_norm: Vec<f64>,
    pub df_norm: Vec<f64>,
    pub decoupled: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ConstrainedShapeReport {
    /// `A_Γ̃` in the adapted frame `[Γ̃, ∂α, Ṽ, H̃]`
    pub a_gamma_adapted: Vec<Vec<f64>>,
    /// coefficients of `det(μ^3 I + Λ_μ)`, low to high, degree 3m
    pub lambda_poly: Vec<f64>,
    pub real_roots: Vec<ConstrainedEigenpair>,
    pub constraint_action: ConstraintShapeAction,
}

/// The matrix `(Λ_μ)^a_b = K^α_b ∂F^a/∂x^α + μ Φ̃^a_b` at fixed μ.
fn lambda_matrix(t: &ConstrainedTensors, mu: f64) -> DMatrix<f64> {
    let m = t.gamma.len();
    let k = t.kk.len();
    DMatrix::from_fn(m, m, |a, b| {
        let mut v = mu * t.phi[a][b];
        for al in 0..k {
            v += t.kk[al][b] * t.df_dxalpha[a][al];
        }
        v
    })
}

/// Adapted-frame matrix of `A_Γ̃`:
/// `A(Γ̃)=0`, `A(∂α) = (∂F^c/∂x^α) Ṽ_c`, `A(Ṽ_a) = H̃_a`,
/// `A(H̃_a) = −Φ̃^b_a Ṽ_b − K^α_a ∂α`.
pub fn a_gamma_adapted_matrix(geo: &ConstrainedGeometry, t: &ConstrainedTensors) -> Vec<Vec<f64>> {
    let (m, k) = (geo.m(), geo.k());
    let dim = geo.dim();
    let mut a = vec![vec![0.0; dim]; dim];
    for al in 0..k {
        for c in 0..m {
            a[1 + k + c][1 + al] = t.df_dxalpha[c][al];
        }
    }
    for i in 0..m {
        a[1 + k + m + i][1 + k + i] = 1.0;
        for b in 0..m {
            a[1 + k + b][1 + k + m + i] = -t.phi[b][i];
        }
        for al in 0..k {
            a[1 + al][1 + k + m + i] = -t.kk[al][i];
        }
    }
    a
}

pub fn shape_constrained(
    geo: &Arc<ConstrainedGeometry>,
    point: &ConstrainedPoint,
) -> Result<ConstrainedShapeReport> {
    let p = point.slots();
    let (m, k) = (geo.m(), geo.k());
    let dim = geo.dim();
    let t = geo.tensors_at(&p, 2)?;
    let a = a_gamma_adapted_matrix(geo, &t);

    // det(μ^3 I + Λ_μ) recovered from 3m+1 samples; monic of degree 3m
    let degree = 3 * m;
    let tref = &t;
    let coeffs = linalg::interpolate_polynomial(degree, |mu| {
        let mut mat = lambda_matrix(tref, mu);
        for i in 0..m {
            mat[(i, i)] += mu.powi(3);
        }
        Ok(mat.determinant())
    })?;
    let lead = coeffs[degree];
    if (lead - 1.0).abs() > 1e-6 {
        return Err(GeomError::Invalid(format!(
            "eigencondition polynomial is not monic (leading coefficient {lead})"
        )));
    }
    let roots = linalg::real_roots(&coeffs, 1e-8, 1e-6);

    let frame = geo.frame_rows(&p, 0)?;
    let a_mat = DMatrix::from_fn(dim, dim, |r, c| a[r][c]);
    let mut real_roots = Vec::new();
    for (mu, multiplicity) in roots {
        let shifted = &a_mat - DMatrix::identity(dim, dim) * mu;
        let kernel = linalg::null_space(&shifted, 1e-8);
        let mut adapted = Vec::new();
        let mut coords = Vec::new();
        for w in kernel {
            let wv: Vec<f64> = w.iter().copied().collect();
            let mut cv = vec![0.0; dim];
            for (j, row) in frame.iter().enumerate() {
                for c in 0..dim {
                    cv[c] += wv[j] * row[c].value();
                }
            }
            adapted.push(wv);
            coords.push(cv);
        }
        real_roots.push(ConstrainedEigenpair {
            mu,
            multiplicity,
            eigenvectors_adapted: adapted,
            eigenvectors_coords: coords,
        });
    }

    // shape maps of the constraint fields: A_{∂α}(Γ̃) = [Γ̃, ∂α] (since
    // ∇̃Γ̃ = 0), zero iff ∂Ψ/∂x^α = 0 = ∂F/∂x^α
    let mut on_gamma = Vec::new();
    let mut on_h_norm = Vec::new();
    let mut dpsi_norm = Vec::new();
    let mut df_norm = Vec::new();
    let mut decoupled = Vec::new();
    for al in 0..k {
        let mut v = vec![0.0; dim];
        for be in 0..k {
            v[geo.xalpha_slot(be)] = -t.dpsi_dxalpha[be][al];
        }
        for c in 0..m {
            v[geo.ua_slot(c)] = -t.df_dxalpha[c][al];
        }
        on_gamma.push(v);
        let mut hn = 0.0f64;
        for a_idx in 0..m {
            // A_{∂α}(H̃_a) = [H̃_a, ∂α] = (∂Γ̃^b_a/∂x^α) Ṽ_b + (∂Ψ^β_a/∂x^α) ∂β
            for b in 0..m {
                hn = hn.max(t.dgamma_dxalpha[b][a_idx][al].abs());
            }
            for be in 0..k {
                hn = hn.max(t.dpsiab_dxalpha[be][a_idx][al].abs());
            }
        }
        on_h_norm.push(hn);
        let dp = (0..k).fold(0.0f64, |acc, be| acc.max(t.dpsi_dxalpha[be][al].abs()));
        let df = (0..m).fold(0.0f64, |acc, c| acc.max(t.df_dxalpha[c][al].abs()));
        dpsi_norm.push(dp);
        df_norm.push(df);
        decoupled.push(dp < 1e-9 && df < 1e-9);
    }

    Ok(ConstrainedShapeReport {
        a_gamma_adapted: a,
        lambda_poly: coeffs,
        real_roots,
        constraint_action: ConstraintShapeAction {
            on_gamma,
            on_h_norm,
            dpsi_norm,
            df_norm,
            decoupled,
        },
    })
}

/// Residuals of the three eigenvector component equations for a reported
/// root μ and adapted eigenvector `X = X^0 Γ̃ + X^α ∂α + X̂^a Ṽ_a + X̄^a H̃_a`:
/// `μ X^α = −X̄^a K^α_a`, `μ X̄^a = X̂^a`,
/// `μ X̂^b = X^α ∂F^b/∂x^α − Φ̃^b_a X̄^a` (and `μ X^0 = 0`).
pub fn eigen_equation_residual(
    geo: &ConstrainedGeometry,
    t: &ConstrainedTensors,
    mu: f64,
    adapted: &[f64],
) -> f64 {
    let (m, k) = (geo.m(), geo.k());
    let x0 = adapted[0];
    let xal = &adapted[1..1 + k];
    let xhat = &adapted[1 + k..1 + k + m];
    let xbar = &adapted[1 + k + m..1 + k + 2 * m];
    let mut worst = (mu * x0).abs();
    for al in 0..k {
        let rhs: f64 = -(0..m).map(|a| xbar[a] * t.kk[al][a]).sum::<f64>();
        worst = worst.max((mu * xal[al] - rhs).abs());
    }
    for a in 0..m {
        worst = worst.max((mu * xbar[a] - xhat[a]).abs());
    }
    for b in 0..m {
        let mut rhs: f64 = (0..k).map(|al| xal[al] * t.df_dxalpha[b][al]).sum();
        rhs -= (0..m).map(|a| t.phi[b][a] * xbar[a]).sum::<f64>();
        worst = worst.max((mu * xhat[b] - rhs).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// The auxiliary (Chetaev-bundle) nonlinear connection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChetaevReport {
    /// `σ^α = Ψ^α + u^b Ψ^α_b`
    pub sigma: Vec<f64>,
    /// `σ^α_b = −Ψ^α_b`
    pub sigma_b: Vec<Vec<f64>>,
    /// horizontal fields in coordinates: time family, base families, fibre
    /// families
    pub h_time: Vec<f64>,
    pub h_base: Vec<Vec<f64>>,
    pub h_fibre: Vec<Vec<f64>>,
    /// true when σ^α and σ^α_b are u-independent at the point (affine
    /// constraints; the connection projects to the configuration space)
    pub affine: bool,
}

pub fn chetaev_connection(
    geo: &Arc<ConstrainedGeometry>,
    point: &ConstrainedPoint,
) -> Result<ChetaevReport> {
    let p = point.slots();
    let (m, k) = (geo.m(), geo.k());
    let dim = geo.dim();
    let b = geo.bundle(&p, 2)?;
    let pa = b.psi_ab.as_ref().unwrap();
    let mut sigma_jets = Vec::with_capacity(k);
    for al in 0..k {
        let mut acc = b.psi[al].truncate(1);
        for a in 0..m {
            let u = Jet::coordinate(geo.ua_slot(a), p[geo.ua_slot(a)], dim, 1)?;
            acc = acc.add(&u.mul(&pa[al][a].truncate(1)));
        }
        sigma_jets.push(acc);
    }
    let sigma: Vec<f64> = sigma_jets.iter().map(Jet::value).collect();
    let sigma_b: Vec<Vec<f64>> = (0..k)
        .map(|al| (0..m).map(|a| -pa[al][a].value()).collect())
        .collect();
    let mut u_dependence = 0.0f64;
    for al in 0..k {
        for a in 0..m {
            u_dependence = u_dependence.max(sigma_jets[al].grad(geo.ua_slot(a)).abs());
            for c in 0..m {
                u_dependence =
                    u_dependence.max(pa[al][c].partial_jet(geo.ua_slot(a)).value().abs());
            }
        }
    }
    // Eq-style horizontal fields: ∂t + σ^α ∂α, ∂x^b − Ψ^α_b ∂α, ∂u^a
    let mut h_time = vec![0.0; dim];
    h_time[0] = 1.0;
    for al in 0..k {
        h_time[geo.xalpha_slot(al)] = sigma[al];
    }
    let mut h_base = Vec::with_capacity(m);
    for bb in 0..m {
        let mut v = vec![0.0; dim];
        v[geo.xa_slot(bb)] = 1.0;
        for al in 0..k {
            v[geo.xalpha_slot(al)] = -pa[al][bb].value();
        }
        h_base.push(v);
    }
    let mut h_fibre = Vec::with_capacity(m);
    for a in 0..m {
        let mut v = vec![0.0; dim];
        v[geo.ua_slot(a)] = 1.0;
        h_fibre.push(v);
    }
    Ok(ChetaevReport {
        sigma,
        sigma_b,
        h_time,
        h_base,
        h_fibre,
        affine: u_dependence < 1e-9,
    })
}

// ---------------------------------------------------------------------------
// Christoffel symbols from a metric on the constraint base
// ---------------------------------------------------------------------------

/// Levi-Civita coefficients `Υ^γ_{αβ}` of a metric on the constraint base,
/// evaluated at a point of that base. `metric[i][j]` are expressions over
/// the constraint coordinate names.
pub fn christoffel_from_metric(
    names: &[String],
    metric: &[Vec<Expr>],
    point: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = names.len();
    let seeds = (0..k)
        .map(|v| Jet::coordinate(v, point[v], k, 1).map_err(GeomError::from))
        .collect::<Result<Vec<_>>>()?;
    let env = JetEnv::new(names.to_vec(), seeds);
    let mut g = vec![vec![Jet::constant(0.0, k, 1); k]; k];
    for i in 0..k {
        for j in 0..k {
            g[i][j] = metric[i][j].eval(&env).map_err(GeomError::from)?;
        }
    }
    let gv = DMatrix::from_fn(k, k, |i, j| g[i][j].value());
    let ginv = gv
        .clone()
        .try_inverse()
        .ok_or(GeomError::SingularMatrix {
            cond: linalg::condition_estimate(&gv),
        })?;
    let mut out = vec![vec![vec![0.0; k]; k]; k];
    for gm in 0..k {
        for al in 0..k {
            for be in 0..k {
                let mut acc = 0.0;
                for d in 0..k {
                    let term = g[d][al].grad(be) + g[d][be].grad(al) - g[al][be].grad(d);
                    acc += 0.5 * ginv[(gm, d)] * term;
                }
                out[gm][al][be] = acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn knife_edge() -> Arc<ConstrainedGeometry> {
        let sys = ConstrainedSystem::parse(
            &["phi", "x"],
            &["y"],
            &["0", "-u_phi*u_x*tan(phi)"],
            &["tan(phi)*u_x"],
            None,
        )
        .unwrap();
        ConstrainedGeometry::from_system(&sys)
    }

    fn ke_point() -> ConstrainedPoint {
        ConstrainedPoint {
            t: 0.3,
            xa: vec![0.5, 1.2],
            xalpha: vec![-0.4],
            ua: vec![0.7, -0.9],
        }
    }

    #[test]
    fn knife_edge_closed_forms() {
        // CAS-verified closed forms under Γ̃^b_a = −(1/2) ∂F^b/∂u^a:
        // Φ̃^2_1 = u_φ u_x (3 tan² + 2)/4, Φ̃^2_2 = u_φ² (1 − 3 sec²)/4,
        // K^3_1 = −sec² u_x, K^3_2 = sec² u_φ, Φ̃^1_i = 0
        let geo = knife_edge();
        let pt = ke_point();
        let t = geo.tensors_at(&pt.slots(), 2).unwrap();
        let (phi, u1, u2) = (pt.xa[0], pt.ua[0], pt.ua[1]);
        let sec2 = 1.0 / phi.cos().powi(2);
        let tan = phi.tan();
        assert_relative_eq!(t.phi[1][0], u1 * u2 * (3.0 * tan * tan + 2.0) / 4.0, max_relative = 1e-12);
        assert_relative_eq!(t.phi[1][1], u1 * u1 * (1.0 - 3.0 * sec2) / 4.0, max_relative = 1e-12);
        assert_relative_eq!(t.phi[0][0], 0.0, epsilon = 1e-13);
        assert_relative_eq!(t.phi[0][1], 0.0, epsilon = 1e-13);
        assert_relative_eq!(t.kk[0][0], -sec2 * u2, max_relative = 1e-12);
        assert_relative_eq!(t.kk[0][1], sec2 * u1, max_relative = 1e-12);
        // Γ̃^2_1 = +(1/2) u_x tan(φ) under the definition
        assert_relative_eq!(t.gamma[1][0], 0.5 * u2 * tan, max_relative = 1e-12);
        assert_relative_eq!(t.gamma[1][1], 0.5 * u1 * tan, max_relative = 1e-12);
    }

    #[test]
    fn duality_of_constrained_frame() {
        let geo = knife_edge();
        let p = ke_point().slots();
        let frame = geo.frame_rows(&p, 0).unwrap();
        let co = geo.coframe_rows(&p, 0).unwrap();
        for (i, row) in co.iter().enumerate() {
            for (j, vecr) in frame.iter().enumerate() {
                let pairing: f64 = row.iter().zip(vecr).map(|(a, b)| a.value() * b.value()).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (pairing - expect).abs() < 1e-10,
                    "pairing ({i},{j}) = {pairing}"
                );
            }
        }
    }

    #[test]
    fn connection_components_reproduce_eq22_entries() {
        let geo = knife_edge();
        let pt = ke_point();
        let comps = constrained_connection_components(&geo, &pt).unwrap();
        // all ∂/∂y components vanish on the knife edge
        assert!(comps.dpsi_dxalpha[0][0].abs() < 1e-13);
        assert!(comps.dpsiab_dxalpha[0][0][0].abs() < 1e-13);
        assert!(comps.dpsiab_dxalpha[0][1][0].abs() < 1e-13);
        assert!(comps.upsilon[0][0][0].abs() < 1e-13);
        // intrinsic formula reproduces ∇̃_Γ̃ H̃_a = Γ̃^b_a H̃_b
        let p = pt.slots();
        let gamma = geo.gamma_field();
        for a in 0..2 {
            let got = constrained_covderiv(&geo, &gamma, &geo.h_field(a), &pt).unwrap();
            let mut expect = vec![0.0; geo.dim()];
            for b in 0..2 {
                let hb = geo.h_field(b).values(&p).unwrap();
                for c in 0..geo.dim() {
                    expect[c] += comps.gamma[b][a] * hb[c];
                }
            }
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-9, "∇̃_Γ̃ H̃_{a}: {got:?} vs {expect:?}");
            }
        }
        // ∇̃_Γ̃ ∂y = 0, ∇̃_{H̃_a} ∂y = 0, ∇̃_{∂y} ∂y = 0
        let dy = geo.dalpha_field(0);
        for x in [geo.gamma_field(), geo.h_field(0), geo.h_field(1), dy.clone()] {
            let got = constrained_covderiv(&geo, &x, &dy, &pt).unwrap();
            assert!(got.iter().all(|v| v.abs() < 1e-10), "{got:?}");
        }
    }

    #[test]
    fn vertical_identities_hold() {
        let geo = knife_edge();
        let (r_phi, r_k) = geo.vertical_identity_residuals(&ke_point().slots()).unwrap();
        assert!(r_phi < 1e-10, "3R̂ identity residual {r_phi}");
        assert!(r_k < 1e-10, "2Ř identity residual {r_k}");
    }

    #[test]
    fn knife_edge_shape_spectrum() {
        let geo = knife_edge();
        let pt = ke_point();
        let report = shape_constrained(&geo, &pt).unwrap();
        let t = geo.tensors_at(&pt.slots(), 2).unwrap();
        let mu2 = -t.phi[1][1];
        assert!(mu2 > 0.0);
        let mu = mu2.sqrt();
        // roots {0 (quadruple), ±sqrt(−Φ̃²₂)}
        let mut seen = vec![false; 3];
        for pair in &report.real_roots {
            if pair.mu.abs() < 1e-7 {
                seen[0] = true;
                assert_eq!(pair.eigenvectors_adapted.len(), 3, "3-dim kernel");
            } else if (pair.mu - mu).abs() < 1e-7 {
                seen[1] = true;
            } else if (pair.mu + mu).abs() < 1e-7 {
                seen[2] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "roots: {:?}", report.real_roots.iter().map(|r| r.mu).collect::<Vec<_>>());
        // eigen equations hold for every reported eigenvector
        for pair in &report.real_roots {
            for v in &pair.eigenvectors_adapted {
                let res = eigen_equation_residual(&geo, &t, pair.mu, v);
                assert!(res < 1e-7, "mu {} residual {res}", pair.mu);
            }
        }
    }

    #[test]
    fn knife_edge_chetaev_connection() {
        let geo = knife_edge();
        let pt = ke_point();
        let rep = chetaev_connection(&geo, &pt).unwrap();
        // Ψ³ = tan(φ) u_x: σ³ = 0, σ³_1 = 0, σ³_2 = tan(φ)
        assert!(rep.sigma[0].abs() < 1e-12);
        assert!(rep.sigma_b[0][0].abs() < 1e-12);
        assert_relative_eq!(rep.sigma_b[0][1], pt.xa[0].tan(), max_relative = 1e-12);
        assert!(rep.affine, "linear-in-velocity constraints are affine");
        // constant constraints are affine with σ = Ψ
        let sys = ConstrainedSystem::parse(&["x"], &["y"], &["0"], &["2"], None).unwrap();
        let geo = ConstrainedGeometry::from_system(&sys);
        let rep = chetaev_connection(
            &geo,
            &ConstrainedPoint {
                t: 0.0,
                xa: vec![0.1],
                xalpha: vec![0.2],
                ua: vec![0.3],
            },
        )
        .unwrap();
        assert!(rep.affine);
        assert_relative_eq!(rep.sigma[0], 2.0, max_relative = 1e-14);
        assert!(rep.sigma_b[0][0].abs() < 1e-14);
    }

    #[test]
    fn affine_flag_for_linear_constraints() {
        // Ψ affine in u with x-dependent coefficients stays affine
        let sys = ConstrainedSystem::parse(
            &["x"],
            &["y"],
            &["0"],
            &["sin(x)*u_x + 0.5"],
            None,
        )
        .unwrap();
        let geo = ConstrainedGeometry::from_system(&sys);
        let rep = chetaev_connection(
            &geo,
            &ConstrainedPoint {
                t: 0.0,
                xa: vec![0.4],
                xalpha: vec![0.0],
                ua: vec![1.3],
            },
        )
        .unwrap();
        assert!(rep.affine);
        // σ^α = Ψ^α + u Ψ^α_u = 0.5 (the u-linear part cancels)
        assert_relative_eq!(rep.sigma[0], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn u_independent_constraints_reduce_frame() {
        // Ψ = Ψ(x^α): Ψ^β_a = 0, H̃ reduces, Ř = 0
        let sys = ConstrainedSystem::parse(
            &["x"],
            &["y"],
            &["-x"],
            &["0.3*y"],
            None,
        )
        .unwrap();
        let geo = ConstrainedGeometry::from_system(&sys);
        let pt = ConstrainedPoint {
            t: 0.1,
            xa: vec![0.4],
            xalpha: vec![0.8],
            ua: vec![-0.2],
        };
        let t = geo.tensors_at(&pt.slots(), 2).unwrap();
        assert!(t.psi_ab[0][0].abs() < 1e-14);
        assert!(t.r_check[0][0][0].abs() < 1e-14);
        assert!(t.kk[0][0].abs() < 1e-14, "K = −H̃_a(Ψ) = 0 with no x^a dependence");
        let h = geo.h_field(0).values(&pt.slots()).unwrap();
        assert_eq!(h[geo.xalpha_slot(0)], 0.0);
    }

    #[test]
    fn sphere_metric_christoffels() {
        let names = vec!["alpha".to_string(), "beta".to_string()];
        let r2 = 4.0; // R = 2
        let metric = vec![
            vec![
                crate::expr::parse(&format!("{r2}")).unwrap(),
                crate::expr::parse("0").unwrap(),
            ],
            vec![
                crate::expr::parse("0").unwrap(),
                crate::expr::parse(&format!("{r2}*sin(alpha)^2")).unwrap(),
            ],
        ];
        let al = 0.9;
        let ups = christoffel_from_metric(&names, &metric, &[al, 1.4]).unwrap();
        assert_relative_eq!(ups[0][1][1], -al.sin() * al.cos(), max_relative = 1e-12);
        assert_relative_eq!(ups[1][0][1], al.cos() / al.sin(), max_relative = 1e-12);
        assert_relative_eq!(ups[1][1][0], al.cos() / al.sin(), max_relative = 1e-12);
        assert!(ups[0][0][0].abs() < 1e-13);
    }
}
