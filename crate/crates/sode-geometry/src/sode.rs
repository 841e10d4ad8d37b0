//! Geometry of an unconstrained second-order system `ẍ^i = F^i(t, x, ẋ)`.
//!
//! The evolution space carries coordinates `(t, x^i, u^i)`; the system field
//! `Γ = ∂_t + u^i ∂_{x^i} + F^i ∂_{u^i}` splits the tangent spaces into
//! `span{Γ}`, the vertical distribution `span{V_i}` and the horizontal
//! distribution `span{H_i}` via the eigenstructure of `L_Γ S`. This module
//! builds the adapted frame, its duals, the nonlinear-connection
//! coefficients, the Jacobi endomorphism, the curvature coefficients and the
//! associated linear connection, both as a component table and as the
//! intrinsic covariant-derivative formula.

use crate::error::{GeomError, Result};
use crate::expr::{Expr, JetEnv};
use crate::glue::{
    jet_values, mat_vec, Connection, MatrixField, ScalarField, SubmoduleDerivative, VectorField,
};
use crate::jet::Jet;
use crate::linalg;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// An unconstrained second-order system: base coordinate names and the n
/// component expressions `F^i` over `(t, x^i, u_<name>)`.
#[derive(Clone)]
pub struct SodeSystem {
    coords: Vec<String>,
    f: Vec<Expr>,
}

/// A point of the evolution space.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl EvolutionPoint {
    pub fn slots(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(1 + 2 * self.x.len());
        s.push(self.t);
        s.extend_from_slice(&self.x);
        s.extend_from_slice(&self.u);
        s
    }

    pub fn from_slots(slots: &[f64]) -> EvolutionPoint {
        let n = (slots.len() - 1) / 2;
        EvolutionPoint {
            t: slots[0],
            x: slots[1..=n].to_vec(),
            u: slots[n + 1..].to_vec(),
        }
    }
}

pub(crate) fn check_names(coords: &[String]) -> Result<()> {
    if coords.is_empty() {
        return Err(GeomError::Invalid("at least one coordinate required".into()));
    }
    for (i, name) in coords.iter().enumerate() {
        if name.is_empty() || name == "t" || name.starts_with("u_") {
            return Err(GeomError::Invalid(format!(
                "coordinate name `{name}` is reserved or malformed"
            )));
        }
        if coords[..i].contains(name) {
            return Err(GeomError::Invalid(format!("duplicate coordinate `{name}`")));
        }
    }
    Ok(())
}

impl SodeSystem {
    pub fn new(coords: Vec<String>, f: Vec<Expr>) -> Result<SodeSystem> {
        check_names(&coords)?;
        if f.len() != coords.len() {
            return Err(GeomError::Dimension(format!(
                "{} force components for {} coordinates",
                f.len(),
                coords.len()
            )));
        }
        let mut names = vec!["t".to_string()];
        names.extend(coords.iter().cloned());
        names.extend(coords.iter().map(|c| format!("u_{c}")));
        for (i, e) in f.iter().enumerate() {
            e.check_bound(&names)
                .map_err(|err| GeomError::Component {
                    name: format!("F[{i}]"),
                    source: err,
                })?;
        }
        Ok(SodeSystem { coords, f })
    }

    pub fn parse(coords: &[&str], f: &[&str]) -> Result<SodeSystem> {
        let parsed = f
            .iter()
            .map(|s| crate::expr::parse(s).map_err(GeomError::from))
            .collect::<Result<Vec<_>>>()?;
        SodeSystem::new(coords.iter().map(|s| s.to_string()).collect(), parsed)
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn f_exprs(&self) -> &[Expr] {
        &self.f
    }

    /// All 2n+1 slot names in evolution-space order.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names = vec!["t".to_string()];
        names.extend(self.coords.iter().cloned());
        names.extend(self.coords.iter().map(|c| format!("u_{c}")));
        names
    }
}

// ---------------------------------------------------------------------------
// Cached jet bundles
// ---------------------------------------------------------------------------

type PointKey = (Vec<u64>, usize);

pub(crate) struct FrameJets {
    /// F components at order q
    pub f: Vec<Jet>,
    /// Γ^i_j = -1/2 ∂F^i/∂u^j at order q-1 (q >= 1)
    pub gamma: Option<Vec<Vec<Jet>>>,
    /// Jacobi endomorphism at order q-2 (q >= 2)
    pub phi: Option<Vec<Vec<Jet>>>,
    /// curvature coefficients R^k_{ij} at order q-2 (q >= 2)
    pub r: Option<Vec<Vec<Vec<Jet>>>>,
}

/// Evaluator for one system, with per-point jet caching. Shared through an
/// `Arc`; all evaluation is pure.
type MatCacheKey = (Vec<u64>, usize, u8);

pub struct SodeGeometry {
    sys: SodeSystem,
    /// Optional uniform offset added to every Γ^i_j; the test-only
    /// perturbation hook behind `--perturb`.
    perturb_gamma: f64,
    cache: Mutex<HashMap<PointKey, Arc<FrameJets>>>,
    mat_cache: Mutex<HashMap<MatCacheKey, Arc<Vec<Vec<Jet>>>>>,
}

impl SodeGeometry {
    pub fn new(sys: SodeSystem) -> Arc<SodeGeometry> {
        Self::with_perturbation(sys, 0.0)
    }

    pub fn with_perturbation(sys: SodeSystem, perturb_gamma: f64) -> Arc<SodeGeometry> {
        Arc::new(SodeGeometry {
            sys,
            perturb_gamma,
            cache: Mutex::new(HashMap::new()),
            mat_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn system(&self) -> &SodeSystem {
        &self.sys
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    /// Dimension of the evolution space, 2n+1.
    pub fn dim(&self) -> usize {
        2 * self.sys.n() + 1
    }

    pub fn x_slot(&self, i: usize) -> usize {
        1 + i
    }

    pub fn u_slot(&self, i: usize) -> usize {
        1 + self.sys.n() + i
    }

    pub(crate) fn seeds(&self, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let dim = self.dim();
        (0..dim)
            .map(|v| Jet::coordinate(v, p[v], dim, order).map_err(GeomError::from))
            .collect()
    }

    fn bundle(&self, p: &[f64], q: usize) -> Result<Arc<FrameJets>> {
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

    fn build_bundle(&self, p: &[f64], q: usize) -> Result<FrameJets> {
        let n = self.sys.n();
        let seeds = self.seeds(p, q)?;
        let env = JetEnv::new(self.sys.slot_names(), seeds);
        let f: Vec<Jet> = self
            .sys
            .f
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval(&env).map_err(|err| GeomError::Component {
                    name: format!("F[{i}]"),
                    source: err,
                })
            })
            .collect::<Result<_>>()?;
        let gamma = if q >= 1 {
            let mut g = vec![vec![Jet::constant(0.0, self.dim(), q - 1); n]; n];
            for i in 0..n {
                for j in 0..n {
                    g[i][j] = f[i]
                        .partial_jet(self.u_slot(j))
                        .scale(-0.5)
                        .add_scalar(self.perturb_gamma);
                }
            }
            Some(g)
        } else {
            None
        };
        let (phi, r) = if q >= 2 {
            let g = gamma.as_ref().unwrap();
            let mut phi = vec![vec![Jet::constant(0.0, self.dim(), q - 2); n]; n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = f[i].partial_jet(self.x_slot(j)).truncate(q - 2).neg();
                    for k in 0..n {
                        let prod = g[k][j].truncate(q - 2).mul(&g[i][k].truncate(q - 2));
                        acc = acc.sub(&prod);
                    }
                    acc = acc.sub(&self.sode_derivative(&g[i][j], &f, p)?);
                    phi[i][j] = acc;
                }
            }
            let mut rt = vec![vec![vec![Jet::constant(0.0, self.dim(), q - 2); n]; n]; n];
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = f[k]
                            .partial_jet(self.x_slot(i))
                            .partial_jet(self.u_slot(j))
                            .sub(&f[k].partial_jet(self.x_slot(j)).partial_jet(self.u_slot(i)));
                        let mut inner = Jet::constant(0.0, self.dim(), q - 2);
                        for l in 0..n {
                            let dfl_ui = f[l].partial_jet(self.u_slot(i)).truncate(q - 2);
                            let dfl_uj = f[l].partial_jet(self.u_slot(j)).truncate(q - 2);
                            let d2_lj = f[k].partial_jet(self.u_slot(l)).partial_jet(self.u_slot(j));
                            let d2_li = f[k].partial_jet(self.u_slot(l)).partial_jet(self.u_slot(i));
                            inner = inner.add(&dfl_ui.mul(&d2_lj)).sub(&dfl_uj.mul(&d2_li));
                        }
                        acc = acc.add(&inner.scale(0.5));
                        rt[k][i][j] = acc.scale(0.5);
                    }
                }
            }
            (Some(phi), Some(rt))
        } else {
            (None, None)
        };
        Ok(FrameJets { f, gamma, phi, r })
    }

    /// Directional derivative of a jet-valued function along Γ:
    /// `Γ(g) = g_t + u^i g_{x^i} + F^i g_{u^i}`, one order lower than `g`.
    fn sode_derivative(&self, g: &Jet, f: &[Jet], p: &[f64]) -> Result<Jet> {
        let n = self.sys.n();
        let out_order = g.order() - 1;
        let mut acc = g.partial_jet(0);
        for i in 0..n {
            let u = Jet::coordinate(self.u_slot(i), p[self.u_slot(i)], self.dim(), out_order)?;
            acc = acc.add(&u.mul(&g.partial_jet(self.x_slot(i))));
            acc = acc.add(&f[i].truncate(out_order).mul(&g.partial_jet(self.u_slot(i))));
        }
        Ok(acc)
    }

    // -- frame fields -------------------------------------------------------

    /// The system field `Γ = ∂_t + u^i ∂_{x^i} + F^i ∂_{u^i}`.
    pub fn gamma_field(self: &Arc<Self>) -> VectorField {
        let geo = self.clone();
        VectorField::new(self.dim(), move |p, order| {
            let b = geo.bundle(p, order)?;
            let n = geo.n();
            let mut out = Vec::with_capacity(geo.dim());
            out.push(Jet::constant(1.0, geo.dim(), order));
            for i in 0..n {
                out.push(Jet::coordinate(
                    geo.u_slot(i),
                    p[geo.u_slot(i)],
                    geo.dim(),
                    order,
                )?);
            }
            for i in 0..n {
                out.push(b.f[i].truncate(order));
            }
            Ok(out)
        })
    }

    /// Vertical frame field `V_i = ∂/∂u^i`.
    pub fn v_field(&self, i: usize) -> VectorField {
        VectorField::coordinate_axis(self.dim(), self.u_slot(i))
    }

    /// Horizontal frame field `H_i = ∂/∂x^i − Γ^j_i ∂/∂u^j`.
    pub fn h_field(self: &Arc<Self>, i: usize) -> VectorField {
        let geo = self.clone();
        VectorField::new(self.dim(), move |p, order| {
            let b = geo.bundle(p, order + 1)?;
            let g = b.gamma.as_ref().unwrap();
            let n = geo.n();
            let mut out = vec![Jet::constant(0.0, geo.dim(), order); geo.dim()];
            out[geo.x_slot(i)] = Jet::constant(1.0, geo.dim(), order);
            for j in 0..n {
                out[geo.u_slot(j)] = g[j][i].truncate(order).neg();
            }
            Ok(out)
        })
    }

    /// All frame vectors as rows, ordered `[Γ, V_1..V_n, H_1..H_n]`.
    pub fn frame_rows(self: &Arc<Self>, p: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        self.cached_matrix(p, order, 10, || {
            let n = self.n();
            let mut rows = Vec::with_capacity(self.dim());
            rows.push(self.gamma_field().eval(p, order)?);
            for i in 0..n {
                rows.push(self.v_field(i).eval(p, order)?);
            }
            for i in 0..n {
                rows.push(self.h_field(i).eval(p, order)?);
            }
            Ok(rows)
        })
    }

    /// All dual covectors as rows, ordered `[dt, ψ^1..ψ^n, θ^1..θ^n]`
    /// (pairing with `frame_rows` is the identity).
    pub fn coframe_rows(self: &Arc<Self>, p: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        self.cached_matrix(p, order, 11, || self.coframe_rows_uncached(p, order))
    }

    fn coframe_rows_uncached(&self, p: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        let n = self.n();
        let dim = self.dim();
        let b = self.bundle(p, order + 1)?;
        let g = b.gamma.as_ref().unwrap();
        let zero = || Jet::constant(0.0, dim, order);
        let mut rows = vec![vec![zero(); dim]; dim];
        // dt
        rows[0][0] = Jet::constant(1.0, dim, order);
        for i in 0..n {
            // ψ^i = du^i − F^i dt + Γ^i_j (dx^j − u^j dt)
            let mut t_part = b.f[i].truncate(order).neg();
            for j in 0..n {
                let u = Jet::coordinate(self.u_slot(j), p[self.u_slot(j)], dim, order)?;
                t_part = t_part.sub(&g[i][j].truncate(order).mul(&u));
                rows[1 + i][self.x_slot(j)] = g[i][j].truncate(order);
            }
            rows[1 + i][0] = t_part;
            rows[1 + i][self.u_slot(i)] = Jet::constant(1.0, dim, order);
            // θ^i = dx^i − u^i dt
            rows[1 + n + i][0] = Jet::coordinate(self.u_slot(i), p[self.u_slot(i)], dim, order)?.neg();
            rows[1 + n + i][self.x_slot(i)] = Jet::constant(1.0, dim, order);
        }
        Ok(rows)
    }

    fn outer_tensor(
        self: &Arc<Self>,
        tag: u8,
        vectors: impl Fn(&Arc<Self>, &[f64], usize) -> Result<Vec<Vec<Jet>>> + Send + Sync + 'static,
        covectors: impl Fn(&Arc<Self>, &[f64], usize) -> Result<Vec<Vec<Jet>>> + Send + Sync + 'static,
    ) -> MatrixField {
        let geo = self.clone();
        MatrixField::new(self.dim(), move |p, order| {
            geo.cached_matrix(p, order, tag, || {
                let vs = vectors(&geo, p, order)?;
                let cs = covectors(&geo, p, order)?;
                let dim = geo.dim();
                let mut m = vec![vec![Jet::constant(0.0, dim, order); dim]; dim];
                for (v, c) in vs.iter().zip(&cs) {
                    for r in 0..dim {
                        for col in 0..dim {
                            m[r][col] = m[r][col].add(&v[r].mul(&c[col]));
                        }
                    }
                }
                Ok(m)
            })
        })
    }

    /// Vertical endomorphism `S = θ^i ⊗ V_i`.
    pub fn s_tensor(self: &Arc<Self>) -> MatrixField {
        self.outer_tensor(
            4,
            |geo, p, order| (0..geo.n()).map(|i| geo.v_field(i).eval(p, order)).collect(),
            |geo, p, order| {
                let rows = geo.coframe_rows(p, order)?;
                Ok(rows[1 + geo.n()..].to_vec())
            },
        )
    }

    /// Horizontal counterpart `Q = ψ^i ⊗ H_i`.
    pub fn q_tensor(self: &Arc<Self>) -> MatrixField {
        self.outer_tensor(
            5,
            |geo, p, order| (0..geo.n()).map(|i| geo.h_field(i).eval(p, order)).collect(),
            |geo, p, order| {
                let rows = geo.coframe_rows(p, order)?;
                Ok(rows[1..=geo.n()].to_vec())
            },
        )
    }

    pub fn p_gamma(self: &Arc<Self>) -> MatrixField {
        self.outer_tensor(
            0,
            |geo, p, order| Ok(vec![geo.gamma_field().eval(p, order)?]),
            |geo, p, order| Ok(vec![geo.coframe_rows(p, order)?[0].clone()]),
        )
    }

    pub fn p_v(self: &Arc<Self>) -> MatrixField {
        self.outer_tensor(
            2,
            |geo, p, order| (0..geo.n()).map(|i| geo.v_field(i).eval(p, order)).collect(),
            |geo, p, order| {
                let rows = geo.coframe_rows(p, order)?;
                Ok(rows[1..=geo.n()].to_vec())
            },
        )
    }

    pub fn p_h(self: &Arc<Self>) -> MatrixField {
        self.outer_tensor(
            3,
            |geo, p, order| (0..geo.n()).map(|i| geo.h_field(i).eval(p, order)).collect(),
            |geo, p, order| {
                let rows = geo.coframe_rows(p, order)?;
                Ok(rows[1 + geo.n()..].to_vec())
            },
        )
    }

    /// The Jacobi endomorphism as a coordinate-frame (1,1) tensor,
    /// `Φ = Φ^i_j θ^j ⊗ V_i`.
    pub fn phi_tensor(self: &Arc<Self>) -> MatrixField {
        let geo = self.clone();
        MatrixField::new(self.dim(), move |p, order| {
            let b = geo.bundle(p, order + 2)?;
            let phi = b.phi.as_ref().unwrap();
            let co = geo.coframe_rows(p, order)?;
            let dim = geo.dim();
            let n = geo.n();
            let mut m = vec![vec![Jet::constant(0.0, dim, order); dim]; dim];
            for i in 0..n {
                for j in 0..n {
                    let pij = phi[i][j].truncate(order);
                    for c in 0..dim {
                        let add = pij.mul(&co[1 + n + j][c]);
                        m[geo.u_slot(i)][c] = m[geo.u_slot(i)][c].add(&add);
                    }
                }
            }
            Ok(m)
        })
    }

    /// Γ^i_j, Φ^i_j and R^k_{ij} values at a point (order picks the depth of
    /// F-differentiation and must be at least 2 for Φ and R).
    pub fn tensors_at(&self, p: &[f64], order: usize) -> Result<SodeTensors> {
        if order < 2 {
            return Err(GeomError::OrderTooLow {
                order,
                needed: "Jacobi endomorphism and curvature",
                min: 2,
            });
        }
        let b = self.bundle(p, order)?;
        let n = self.n();
        let g = b.gamma.as_ref().unwrap();
        let phi = b.phi.as_ref().unwrap();
        let r = b.r.as_ref().unwrap();
        Ok(SodeTensors {
            f: jet_values(&b.f),
            gamma: (0..n)
                .map(|i| (0..n).map(|j| g[i][j].value()).collect())
                .collect(),
            phi: (0..n)
                .map(|i| (0..n).map(|j| phi[i][j].value()).collect())
                .collect(),
            r: (0..n)
                .map(|k| {
                    (0..n)
                        .map(|i| (0..n).map(|j| r[k][i][j].value()).collect())
                        .collect()
                })
                .collect(),
        })
    }

    /// Max residual of `V_i(Φ^k_j) − V_j(Φ^k_i) = 3 R^k_{ij}` at a point,
    /// relative to local scale. Requires order-3 jets of F.
    pub fn phi_curvature_identity_residual(&self, p: &[f64]) -> Result<f64> {
        let b = self.bundle(p, 3)?;
        let n = self.n();
        let phi = b.phi.as_ref().unwrap();
        let r = b.r.as_ref().unwrap();
        let mut worst = 0.0f64;
        let mut scale = 1.0f64;
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let lhs = phi[k][j].partial_jet(self.u_slot(i)).value()
                        - phi[k][i].partial_jet(self.u_slot(j)).value();
                    let rhs = 3.0 * r[k][i][j].value();
                    worst = worst.max((lhs - rhs).abs());
                    scale = scale.max(lhs.abs()).max(rhs.abs());
                }
            }
        }
        Ok(worst / scale)
    }
}

/// Value-level tensors of a system at a point.
#[derive(Debug, Clone)]
pub struct SodeTensors {
    pub f: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub r: Vec<Vec<Vec<f64>>>,
}

// ---------------------------------------------------------------------------
// Frame evaluation (value-level report)
// ---------------------------------------------------------------------------

/// Adapted frame data at one point, in plain numbers. Frame rows are ordered
/// `[Γ, V_1..V_n, H_1..H_n]` and coframe rows `[dt, ψ^1..ψ^n, θ^1..θ^n]`.
#[derive(Debug, Clone)]
pub struct UnconstrainedFrame {
    pub order: usize,
    pub frame: Vec<Vec<f64>>,
    pub coframe: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub phi: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<Vec<f64>>>>,
}

/// Evaluate the adapted frame at a point. Φ and R are present when
/// `order >= 2`.
pub fn build_frame(
    geo: &Arc<SodeGeometry>,
    point: &EvolutionPoint,
    order: usize,
) -> Result<UnconstrainedFrame> {
    if order < 1 {
        return Err(GeomError::OrderTooLow {
            order,
            needed: "frame construction",
            min: 1,
        });
    }
    let p = point.slots();
    let frame = geo
        .frame_rows(&p, 0)?
        .iter()
        .map(|row| jet_values(row))
        .collect();
    let coframe = geo
        .coframe_rows(&p, 0)?
        .iter()
        .map(|row| jet_values(row))
        .collect();
    let b = geo.bundle(&p, order)?;
    let n = geo.n();
    let g = b.gamma.as_ref().unwrap();
    let gamma = (0..n)
        .map(|i| (0..n).map(|j| g[i][j].value()).collect())
        .collect();
    let (phi, r) = if order >= 2 {
        let t = geo.tensors_at(&p, order)?;
        (Some(t.phi), Some(t.r))
    } else {
        (None, None)
    };
    Ok(UnconstrainedFrame {
        order,
        frame,
        coframe,
        gamma,
        phi,
        r,
    })
}

/// Convert an adapted-frame (1,1) tensor matrix to coordinate components:
/// `M_coord = B · M_adapted · B^{-1}` with B the frame-vector columns.
pub fn adapted_to_coordinate_matrix(
    frame_rows: &[Vec<f64>],
    coframe_rows: &[Vec<f64>],
    adapted: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let dim = frame_rows.len();
    let mut out = vec![vec![0.0; dim]; dim];
    for r in 0..dim {
        for c in 0..dim {
            let mut acc = 0.0;
            for a in 0..dim {
                for b in 0..dim {
                    acc += frame_rows[a][r] * adapted[a][b] * coframe_rows[b][c];
                }
            }
            out[r][c] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// The linear connection
// ---------------------------------------------------------------------------

/// Submodule derivative `∇^Γ_X Y = X(dt(Y)) Γ` on `span{Γ}`.
pub struct GammaPartDerivative {
    pub geo: Arc<SodeGeometry>,
}

impl SubmoduleDerivative for GammaPartDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let dim = self.geo.dim();
        let yy = y.clone();
        let dty = ScalarField::new(dim, move |q, ord| Ok(yy.eval(q, ord)?[0].clone()));
        let xdty = x.derive_scalar(&dty, p, order)?;
        let gamma = self.geo.gamma_field().eval(p, order)?;
        Ok(gamma.iter().map(|g| g.mul(&xdty)).collect())
    }
}

/// Submodule derivative `∇^H_X Y = Q([X, S(Y)])` on the horizontal block.
pub struct HorizontalPartDerivative {
    pub geo: Arc<SodeGeometry>,
}

impl SubmoduleDerivative for HorizontalPartDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let sy = self.geo.s_tensor().apply(y);
        let br = x.bracket(&sy).eval(p, order)?;
        Ok(mat_vec(&self.geo.q_tensor().eval(p, order)?, &br))
    }
}

/// Submodule derivative `∇^V_X Y = S([X, Q(Y)])` on the vertical block.
pub struct VerticalPartDerivative {
    pub geo: Arc<SodeGeometry>,
}

impl SubmoduleDerivative for VerticalPartDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let qy = self.geo.q_tensor().apply(y);
        let br = x.bracket(&qy).eval(p, order)?;
        Ok(mat_vec(&self.geo.s_tensor().eval(p, order)?, &br))
    }
}

/// The glued form of the linear connection: the three eigendistribution
/// derivatives extended and summed. Numerically identical to
/// [`MpConnection`]; kept as an independent route for cross-checks.
pub fn mp_glued_connection(geo: &Arc<SodeGeometry>) -> crate::glue::GluedConnection {
    let parts: Vec<(MatrixField, Arc<dyn SubmoduleDerivative>)> = vec![
        (
            geo.p_gamma(),
            Arc::new(GammaPartDerivative { geo: geo.clone() }) as Arc<dyn SubmoduleDerivative>,
        ),
        (
            geo.p_h(),
            Arc::new(HorizontalPartDerivative { geo: geo.clone() }),
        ),
        (
            geo.p_v(),
            Arc::new(VerticalPartDerivative { geo: geo.clone() }),
        ),
    ];
    crate::glue::GluedConnection::new(geo.dim(), parts)
}

/// The linear connection in explicit form:
/// `∇_X Y = X(dt(Y))Γ + Q([P_H X, S Y]) + S([P_V X, Q Y])
///  + P_H([X − P_H X, P_H Y]) + P_V([X − P_V X, P_V Y])`.
pub struct MpConnection {
    pub geo: Arc<SodeGeometry>,
}

impl Connection for MpConnection {
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

        let yy = y.clone();
        let dty = ScalarField::new(dim, move |pt, ord| Ok(yy.eval(pt, ord)?[0].clone()));
        let xdty = x.derive_scalar(&dty, p, order)?;
        let gamma = geo.gamma_field().eval(p, order)?;
        let mut total: Vec<Jet> = gamma.iter().map(|g| g.mul(&xdty)).collect();

        let phx = p_h.apply(x);
        let pvx = p_v.apply(x);

        let t2 = mat_vec(
            &q.eval(p, order)?,
            &phx.bracket(&s.apply(y)).eval(p, order)?,
        );
        let t3 = mat_vec(
            &s.eval(p, order)?,
            &pvx.bracket(&q.apply(y)).eval(p, order)?,
        );
        let t4 = mat_vec(
            &p_h.eval(p, order)?,
            &x.sub(&phx).bracket(&p_h.apply(y)).eval(p, order)?,
        );
        let t5 = mat_vec(
            &p_v.eval(p, order)?,
            &x.sub(&pvx).bracket(&p_v.apply(y)).eval(p, order)?,
        );
        for i in 0..dim {
            total[i] = total[i].add(&t2[i]).add(&t3[i]).add(&t4[i]).add(&t5[i]);
        }
        Ok(total)
    }
}

/// `∇_X Y` values at a point through the intrinsic formula.
pub fn mp_covderiv(
    geo: &Arc<SodeGeometry>,
    x: &VectorField,
    y: &VectorField,
    point: &EvolutionPoint,
) -> Result<Vec<f64>> {
    let conn = MpConnection { geo: geo.clone() };
    Ok(jet_values(&conn.covderiv(x, y, &point.slots(), 0)?))
}

/// Nonzero adapted-basis components of the connection:
/// `∇_Γ H_i = Γ^j_i H_j`, `∇_Γ V_i = Γ^j_i V_j`,
/// `∇_{H_i} H_j = (∂Γ^k_i/∂u^j) H_k`, `∇_{H_i} V_j = (∂Γ^k_i/∂u^j) V_k`.
#[derive(Debug, Clone)]
pub struct MpComponents {
    pub gamma: Vec<Vec<f64>>,
    /// `dgamma_du[k][i][j] = ∂Γ^k_i / ∂u^j`
    pub dgamma_du: Vec<Vec<Vec<f64>>>,
}

pub fn mp_components(geo: &Arc<SodeGeometry>, point: &EvolutionPoint) -> Result<MpComponents> {
    let p = point.slots();
    let b = geo.bundle(&p, 2)?;
    let g = b.gamma.as_ref().unwrap();
    let n = geo.n();
    let gamma = (0..n)
        .map(|i| (0..n).map(|j| g[i][j].value()).collect())
        .collect();
    let dgamma_du = (0..n)
        .map(|k| {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| g[k][i].partial_jet(geo.u_slot(j)).value())
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(MpComponents { gamma, dgamma_du })
}

/// Independent component-table route for `∇_X Y`: expand `Y` in the adapted
/// frame, differentiate the coefficients along `X`, and apply the basis
/// component table with the Leibniz rule.
pub fn mp_covderiv_from_table(
    geo: &Arc<SodeGeometry>,
    x: &VectorField,
    y: &VectorField,
    point: &EvolutionPoint,
) -> Result<Vec<f64>> {
    let p = point.slots();
    let n = geo.n();
    let dim = geo.dim();
    let comps = mp_components(geo, point)?;
    let frame = geo.frame_rows(&p, 0)?;
    let co0 = geo.coframe_rows(&p, 0)?;
    let xv = x.values(&p)?;
    // adapted coefficients of X and Y at the point
    let pair = |rows: &[Vec<Jet>], v: &[f64]| -> Vec<f64> {
        rows.iter()
            .map(|row| row.iter().zip(v).map(|(r, c)| r.value() * c).sum())
            .collect()
    };
    let x_ad = pair(&co0, &xv);
    let y_ad = pair(&co0, &y.values(&p)?);
    // X(c^j) for each adapted coefficient function of Y
    let mut xc = Vec::with_capacity(dim);
    for j in 0..dim {
        let geo2 = geo.clone();
        let yy = y.clone();
        let cj = ScalarField::new(dim, move |q, ord| {
            let rows = geo2.coframe_rows(q, ord)?;
            let yj = yy.eval(q, ord)?;
            let mut acc = Jet::constant(0.0, geo2.dim(), ord);
            for (r, yv) in rows[j].iter().zip(&yj) {
                acc = acc.add(&r.mul(yv));
            }
            Ok(acc)
        });
        xc.push(x.derive_scalar(&cj, &p, 0)?.value());
    }
    // ∇_X E_j in adapted coefficients, from the component table:
    // direction X = dt(X) Γ + ψ^a(X) V_a + θ^a(X) H_a
    let mut nabla_e = vec![vec![0.0; dim]; dim]; // [j][target]
    for i in 0..n {
        // E_{1+i} = V_i: ∇_Γ V_i = Γ^j_i V_j, ∇_{H_a} V_i = (∂Γ^k_a/∂u^i) V_k
        for j in 0..n {
            nabla_e[1 + i][1 + j] += x_ad[0] * comps.gamma[j][i];
        }
        for a in 0..n {
            for k in 0..n {
                nabla_e[1 + i][1 + k] += x_ad[1 + n + a] * comps.dgamma_du[k][a][i];
            }
        }
        // E_{1+n+i} = H_i
        for j in 0..n {
            nabla_e[1 + n + i][1 + n + j] += x_ad[0] * comps.gamma[j][i];
        }
        for a in 0..n {
            for k in 0..n {
                nabla_e[1 + n + i][1 + n + k] += x_ad[1 + n + a] * comps.dgamma_du[k][a][i];
            }
        }
    }
    // assemble in adapted frame then convert to coordinates
    let mut out_ad = vec![0.0; dim];
    for j in 0..dim {
        out_ad[j] += xc[j];
        for tgt in 0..dim {
            out_ad[tgt] += y_ad[j] * nabla_e[j][tgt];
        }
    }
    let mut out = vec![0.0; dim];
    for (j, row) in frame.iter().enumerate() {
        for c in 0..dim {
            out[c] += out_ad[j] * row[c].value();
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shape map and torsion
// ---------------------------------------------------------------------------

/// A real eigenpair of the shape map `A_Γ`, with the eigenvector in both the
/// adapted frame `[Γ, V, H]` and coordinates.
#[derive(Debug, Clone)]
pub struct RealShapeEigenpair {
    pub mu: f64,
    pub vector_adapted: Vec<f64>,
    pub vector_coords: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ShapeTorsionReport {
    /// `A_Γ` in the adapted frame `[Γ, V, H]`
    pub a_gamma_adapted: Vec<Vec<f64>>,
    /// eigenvalues of `(−Φ^i_j)` as (re, im) pairs
    pub minus_phi_eigenvalues: Vec<(f64, f64)>,
    pub real_eigenpairs: Vec<RealShapeEigenpair>,
    /// Φ-eigenvalues that produce no real shape eigenvalue
    pub no_real_mu: Vec<(f64, f64)>,
    /// torsion table data: `T(Γ,V_i) = H_i`, `T(Γ,H_i) = −Φ^j_i V_j`,
    /// `T(H_i,H_j) = −R^k_{ij} V_k`, all other entries zero
    pub phi: Vec<Vec<f64>>,
    pub r: Vec<Vec<Vec<f64>>>,
}

const EIGEN_ZERO_TOL: f64 = 1e-9;

/// Eigen-structure of the shape map from the real eigenvalues of `−Φ`
/// through the lift `ψ(X) = μ θ(X)`, `μ^2 θ(X) = −Φ θ(X)`.
pub(crate) fn shape_eigen_from_minus_phi(
    minus_phi: &nalgebra::DMatrix<f64>,
) -> (Vec<(f64, f64)>, Vec<(f64, Vec<f64>)>, Vec<(f64, f64)>) {
    let n = minus_phi.nrows();
    let eigs = linalg::eigenvalues(minus_phi);
    let mut lambda_pairs = Vec::new();
    let mut real_mus: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut rejected = Vec::new();
    for z in &eigs {
        lambda_pairs.push((z.re, z.im));
        let scale = z.norm().max(1.0);
        if z.im.abs() > EIGEN_ZERO_TOL * scale {
            rejected.push((z.re, z.im));
            continue;
        }
        let lambda = z.re;
        if lambda < -EIGEN_ZERO_TOL * scale {
            rejected.push((z.re, z.im));
            continue;
        }
        let lam = if lambda.abs() <= EIGEN_ZERO_TOL * scale {
            0.0
        } else {
            lambda
        };
        let shifted = minus_phi - nalgebra::DMatrix::identity(n, n) * lam;
        let kernel = linalg::null_space(&shifted, 1e-7);
        for w in kernel {
            let wv: Vec<f64> = w.iter().copied().collect();
            if lam == 0.0 {
                real_mus.push((0.0, wv));
            } else {
                let mu = lam.sqrt();
                real_mus.push((mu, wv.clone()));
                real_mus.push((-mu, wv));
            }
        }
    }
    (lambda_pairs, real_mus, rejected)
}

pub fn mp_shape_and_torsion(
    geo: &Arc<SodeGeometry>,
    point: &EvolutionPoint,
) -> Result<ShapeTorsionReport> {
    let p = point.slots();
    let n = geo.n();
    let dim = geo.dim();
    let t = geo.tensors_at(&p, 2)?;
    // A_Γ in adapted frame [Γ, V, H]: A(Γ)=0, A(V_i)=H_i, A(H_i) = −Φ^j_i V_j
    let mut a = vec![vec![0.0; dim]; dim];
    for i in 0..n {
        a[1 + n + i][1 + i] = 1.0;
        for j in 0..n {
            a[1 + j][1 + n + i] = -t.phi[j][i];
        }
    }
    let minus_phi = nalgebra::DMatrix::from_fn(n, n, |r, c| -t.phi[r][c]);
    let (lambda_pairs, real_mus, rejected) = shape_eigen_from_minus_phi(&minus_phi);
    let frame = geo.frame_rows(&p, 0)?;
    let mut real_eigenpairs = Vec::new();
    for (mu, w) in real_mus {
        // lift: θ-components w, ψ-components μw, dt-component 0
        let mut adapted = vec![0.0; dim];
        for i in 0..n {
            adapted[1 + n + i] = w[i];
            adapted[1 + i] = mu * w[i];
        }
        let mut coords = vec![0.0; dim];
        for (j, row) in frame.iter().enumerate() {
            for c in 0..dim {
                coords[c] += adapted[j] * row[c].value();
            }
        }
        real_eigenpairs.push(RealShapeEigenpair {
            mu,
            vector_adapted: adapted,
            vector_coords: coords,
        });
    }
    Ok(ShapeTorsionReport {
        a_gamma_adapted: a,
        minus_phi_eigenvalues: lambda_pairs,
        real_eigenpairs,
        no_real_mu: rejected,
        phi: t.phi,
        r: t.r,
    })
}

/// Apply the curvature tensor `R = R^k_{ij} θ^i ∧ θ^j ⊗ V_k` to two fields
/// (in coordinates), used when checking the bracket identities.
pub fn curvature_tensor_apply(
    geo: &Arc<SodeGeometry>,
    p: &[f64],
    xv: &[f64],
    yv: &[f64],
) -> Result<Vec<f64>> {
    let n = geo.n();
    let dim = geo.dim();
    let t = geo.tensors_at(p, 2)?;
    let co = geo.coframe_rows(p, 0)?;
    let theta = |i: usize, v: &[f64]| -> f64 {
        co[1 + n + i].iter().zip(v).map(|(r, c)| r.value() * c).sum()
    };
    // convention fixed by [H_i, H_j] = R^k_{ij} V_k: no antisymmetrisation factor
    let mut out = vec![0.0; dim];
    for k in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += t.r[k][i][j] * theta(i, xv) * theta(j, yv);
            }
        }
        out[geo.u_slot(k)] = acc;
    }
    Ok(out)
}

/// Shape map `A_Γ` applied through the tensor form `A_Γ = −Φ + Q`.
pub fn a_gamma_tensor_apply(geo: &Arc<SodeGeometry>, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let dim = geo.dim();
    let phi = geo.phi_tensor().values(p)?;
    let q = geo.q_tensor().values(p)?;
    let mut out = vec![0.0; dim];
    for r in 0..dim {
        for c in 0..dim {
            out[r] += (q[r][c] - phi[r][c]) * v[c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glue;
    use approx::assert_relative_eq;

    fn free_particle(n: usize) -> Arc<SodeGeometry> {
        let coords: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let coord_refs: Vec<&str> = coords.iter().map(|s| s.as_str()).collect();
        let zeros: Vec<&str> = (0..n).map(|_| "0").collect();
        SodeGeometry::new(SodeSystem::parse(&coord_refs, &zeros).unwrap())
    }

    fn linear_drag(k: f64) -> Arc<SodeGeometry> {
        let f = format!("-{}*u_q", 2.0 * k);
        SodeGeometry::new(SodeSystem::parse(&["q"], &[&f]).unwrap())
    }

    #[test]
    fn free_particle_frame_is_flat() {
        let geo = free_particle(2);
        let pt = EvolutionPoint {
            t: 0.3,
            x: vec![1.0, -0.5],
            u: vec![0.2, 0.9],
        };
        let fr = build_frame(&geo, &pt, 2).unwrap();
        assert!(fr.gamma.iter().flatten().all(|v| v.abs() < 1e-14));
        assert!(fr.phi.unwrap().iter().flatten().all(|v| v.abs() < 1e-14));
        assert!(fr
            .r
            .unwrap()
            .iter()
            .flatten()
            .flatten()
            .all(|v| v.abs() < 1e-14));
        // H_i = ∂/∂x^i
        assert_eq!(fr.frame[3][1], 1.0);
        assert_eq!(fr.frame[3][3], 0.0);
    }

    #[test]
    fn frame_coframe_duality() {
        let geo = SodeGeometry::new(
            SodeSystem::parse(&["phi", "x"], &["0", "-u_phi*u_x*tan(phi)"]).unwrap(),
        );
        let p = [0.1, 0.4, 0.7, 0.3, -0.8];
        let frame = geo.frame_rows(&p, 0).unwrap();
        let co = geo.coframe_rows(&p, 0).unwrap();
        for (i, row) in co.iter().enumerate() {
            for (j, vec) in frame.iter().enumerate() {
                let pairing: f64 = row.iter().zip(vec).map(|(a, b)| a.value() * b.value()).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (pairing - expect).abs() < 1e-10,
                    "pairing ({i},{j}) = {pairing}"
                );
            }
        }
        // θ^i(Γ) = 0 and ψ^i(Γ) = 0 are the i != 0 rows against the Γ vector
    }

    #[test]
    fn inverted_oscillator_tensors() {
        // F = x: Γ = 0, Φ = −1, R = 0
        let geo = SodeGeometry::new(SodeSystem::parse(&["x"], &["x"]).unwrap());
        let t = geo.tensors_at(&[0.0, 0.7, 0.2], 2).unwrap();
        assert_relative_eq!(t.gamma[0][0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(t.phi[0][0], -1.0, epsilon = 1e-13);
        assert_relative_eq!(t.r[0][0][0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn linear_drag_tensors_and_eigenvalues() {
        // F = -2k u: Γ = k, Φ = -k^2, shape eigenvalues ±k
        let k = 0.7;
        let geo = linear_drag(k);
        let pt = EvolutionPoint {
            t: 0.0,
            x: vec![0.4],
            u: vec![-0.3],
        };
        let t = geo.tensors_at(&pt.slots(), 2).unwrap();
        assert_relative_eq!(t.gamma[0][0], k, epsilon = 1e-13);
        assert_relative_eq!(t.phi[0][0], -k * k, epsilon = 1e-13);
        let report = mp_shape_and_torsion(&geo, &pt).unwrap();
        let mut mus: Vec<f64> = report.real_eigenpairs.iter().map(|e| e.mu).collect();
        mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(mus.len(), 2);
        assert_relative_eq!(mus[0], -k, epsilon = 1e-10);
        assert_relative_eq!(mus[1], k, epsilon = 1e-10);
        // eigenvector satisfies A_Γ X = μ X through the tensor form
        for pair in &report.real_eigenpairs {
            let ax = a_gamma_tensor_apply(&geo, &pt.slots(), &pair.vector_coords).unwrap();
            for (a, v) in ax.iter().zip(&pair.vector_coords) {
                assert!((a - pair.mu * v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn harmonic_oscillator_has_no_real_eigenvalues() {
        let geo = SodeGeometry::new(SodeSystem::parse(&["x"], &["-x"]).unwrap());
        let pt = EvolutionPoint {
            t: 0.0,
            x: vec![0.2],
            u: vec![0.1],
        };
        let report = mp_shape_and_torsion(&geo, &pt).unwrap();
        assert!(report.real_eigenpairs.is_empty());
        assert_eq!(report.no_real_mu.len(), 1);
    }

    #[test]
    fn free_particle_shape_map_is_nilpotent() {
        let geo = free_particle(2);
        let pt = EvolutionPoint {
            t: 0.1,
            x: vec![0.3, 0.4],
            u: vec![0.5, -0.2],
        };
        let report = mp_shape_and_torsion(&geo, &pt).unwrap();
        let a = &report.a_gamma_adapted;
        let dim = a.len();
        // A(V_i) = H_i, A(H_i) = 0, A^2 = 0
        for r in 0..dim {
            for c in 0..dim {
                let sq: f64 = (0..dim).map(|k| a[r][k] * a[k][c]).sum();
                assert!(sq.abs() < 1e-13);
            }
        }
        assert_eq!(a[3][1], 1.0);
    }

    #[test]
    fn quadratic_drag_components() {
        // F = -u^2: Γ = u, ∂Γ/∂u = 1
        let geo = SodeGeometry::new(SodeSystem::parse(&["x"], &["-u_x^2"]).unwrap());
        let pt = EvolutionPoint {
            t: 0.0,
            x: vec![0.1],
            u: vec![0.8],
        };
        let comps = mp_components(&geo, &pt).unwrap();
        assert_relative_eq!(comps.gamma[0][0], 0.8, epsilon = 1e-13);
        assert_relative_eq!(comps.dgamma_du[0][0][0], 1.0, epsilon = 1e-13);
    }

    #[test]
    fn covderiv_on_basis_matches_component_table() {
        let geo = SodeGeometry::new(
            SodeSystem::parse(&["phi", "x"], &["0", "-u_phi*u_x*tan(phi)"]).unwrap(),
        );
        let pt = EvolutionPoint {
            t: 0.2,
            x: vec![0.5, 1.1],
            u: vec![0.4, -0.7],
        };
        let p = pt.slots();
        let comps = mp_components(&geo, &pt).unwrap();
        let n = geo.n();
        // ∇_Γ V_i = Γ^j_i V_j and ∇_{V_i} H_j = 0
        let gamma = geo.gamma_field();
        for i in 0..n {
            let got = mp_covderiv(&geo, &gamma, &geo.v_field(i), &pt).unwrap();
            let mut expect = vec![0.0; geo.dim()];
            for j in 0..n {
                expect[geo.u_slot(j)] += comps.gamma[j][i];
            }
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-9, "∇_Γ V_{i}");
            }
            let hv = mp_covderiv(&geo, &geo.v_field(i), &geo.h_field(0), &pt).unwrap();
            assert!(hv.iter().all(|v| v.abs() < 1e-9), "∇_V H = 0");
        }
        // glued route agrees with the explicit formula
        let glued = mp_glued_connection(&geo);
        let conn = MpConnection { geo: geo.clone() };
        let x = geo.h_field(1);
        let y = geo.v_field(0);
        let a = jet_values(&glued.covderiv(&x, &y, &p, 0).unwrap());
        let b = jet_values(&conn.covderiv(&x, &y, &p, 0).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn mp_torsion_through_generic_machinery() {
        let geo = linear_drag(0.5);
        let pt = EvolutionPoint {
            t: 0.1,
            x: vec![0.2],
            u: vec![0.6],
        };
        let p = pt.slots();
        let conn = MpConnection { geo: geo.clone() };
        // T(Γ, V_0) = H_0
        let t = glue::torsion(&conn, &geo.gamma_field(), &geo.v_field(0), &p).unwrap();
        let h = geo.h_field(0).values(&p).unwrap();
        for (a, b) in t.iter().zip(&h) {
            assert!((a - b).abs() < 1e-9);
        }
        // R(Γ, V_0) H_0 = 0
        let conn: Arc<dyn Connection> = Arc::new(MpConnection { geo: geo.clone() });
        let r = glue::curvature(&conn, &geo.gamma_field(), &geo.v_field(0), &geo.h_field(0), &p)
            .unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-8), "{r:?}");
    }

    #[test]
    fn phi_curvature_identity_on_tan_system() {
        let geo = SodeGeometry::new(
            SodeSystem::parse(&["phi", "x"], &["0", "-u_phi*u_x*tan(phi)"]).unwrap(),
        );
        let res = geo
            .phi_curvature_identity_residual(&[0.0, 0.5, 1.1, 0.4, -0.7])
            .unwrap();
        assert!(res < 1e-10, "residual {res}");
    }
}
