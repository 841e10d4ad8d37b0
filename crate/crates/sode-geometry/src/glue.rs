//! Covariant derivatives from glued submodule derivatives.
//!
//! Everything here is operational: a vector field is an evaluation procedure
//! returning its components as jets, a projector is a jet-valued matrix
//! function, and a submodule derivative is any procedure satisfying the two
//! covariant-derivative axioms on the image of its projector. Extension and
//! glueing then produce a full covariant derivative, and torsion, curvature
//! and shape maps are computed generically from it. The same code therefore
//! serves toy decompositions, the unconstrained connection and the
//! constrained connection.

use crate::error::{GeomError, Result};
use crate::jet::Jet;
use std::sync::Arc;

/// Residual threshold for image-membership and decomposition checks.
pub const PROJECTOR_TOL: f64 = 1e-9;

/// `1 + max |entry|` over value slices; the scale used in relative residuals.
pub fn scale_of<'a, I: IntoIterator<Item = &'a [f64]>>(parts: I) -> f64 {
    let mut m = 0.0f64;
    for s in parts {
        for v in s {
            m = m.max(v.abs());
        }
    }
    1.0 + m
}

pub fn jet_values(jets: &[Jet]) -> Vec<f64> {
    jets.iter().map(Jet::value).collect()
}

// ---------------------------------------------------------------------------
// Fields
// ---------------------------------------------------------------------------

type VecEval = dyn Fn(&[f64], usize) -> Result<Vec<Jet>> + Send + Sync;
type ScalarEval = dyn Fn(&[f64], usize) -> Result<Jet> + Send + Sync;
type MatEval = dyn Fn(&[f64], usize) -> Result<Vec<Vec<Jet>>> + Send + Sync;

/// A vector field given by its coordinate components as jets at a point.
/// `order` is the derivative depth carried by the returned jets.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: Arc<VecEval>,
}

/// A scalar function with jet evaluation (multipliers in the axiom tests).
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    eval: Arc<ScalarEval>,
}

/// A (1,1) tensor field as a dense jet-valued matrix (projectors, S, Q, ...).
#[derive(Clone)]
pub struct MatrixField {
    dim: usize,
    eval: Arc<MatEval>,
}

impl VectorField {
    pub fn new(
        dim: usize,
        eval: impl Fn(&[f64], usize) -> Result<Vec<Jet>> + Send + Sync + 'static,
    ) -> Self {
        VectorField {
            dim,
            eval: Arc::new(eval),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let jets = (self.eval)(p, order)?;
        debug_assert_eq!(jets.len(), self.dim);
        Ok(jets)
    }

    pub fn values(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(jet_values(&self.eval(p, 0)?))
    }

    /// Constant coordinate field `∂/∂v_k`.
    pub fn coordinate_axis(dim: usize, k: usize) -> Self {
        let mut c = vec![0.0; dim];
        c[k] = 1.0;
        Self::constant(dim, c)
    }

    pub fn constant(dim: usize, components: Vec<f64>) -> Self {
        assert_eq!(components.len(), dim);
        VectorField::new(dim, move |_p, order| {
            Ok(components
                .iter()
                .map(|&c| Jet::constant(c, dim, order))
                .collect())
        })
    }

    pub fn add(&self, other: &VectorField) -> VectorField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        VectorField::new(self.dim, move |p, order| {
            let (x, y) = (a.eval(p, order)?, b.eval(p, order)?);
            Ok(x.iter().zip(&y).map(|(u, v)| u.add(v)).collect())
        })
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        VectorField::new(self.dim, move |p, order| {
            let (x, y) = (a.eval(p, order)?, b.eval(p, order)?);
            Ok(x.iter().zip(&y).map(|(u, v)| u.sub(v)).collect())
        })
    }

    pub fn scale(&self, s: f64) -> VectorField {
        let a = self.clone();
        VectorField::new(self.dim, move |p, order| {
            Ok(a.eval(p, order)?.iter().map(|j| j.scale(s)).collect())
        })
    }

    /// Pointwise multiplication by a scalar field.
    pub fn scale_fn(&self, f: &ScalarField) -> VectorField {
        assert_eq!(self.dim, f.dim);
        let (a, g) = (self.clone(), f.clone());
        VectorField::new(self.dim, move |p, order| {
            let fj = g.eval(p, order)?;
            Ok(a.eval(p, order)?.iter().map(|j| j.mul(&fj)).collect())
        })
    }

    /// Memoize evaluations per (point, order). Worth wrapping around
    /// expensive derived fields that get re-evaluated at the same point by
    /// nested bracket arithmetic.
    pub fn memoized(&self) -> VectorField {
        let inner = self.clone();
        let cache: Arc<std::sync::Mutex<std::collections::HashMap<(Vec<u64>, usize), Vec<Jet>>>> =
            Arc::new(std::sync::Mutex::new(std::collections::HashMap::new()));
        VectorField::new(self.dim, move |p, order| {
            let key = (p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>(), order);
            if let Some(hit) = cache.lock().unwrap().get(&key) {
                return Ok(hit.clone());
            }
            let jets = inner.eval(p, order)?;
            cache.lock().unwrap().insert(key, jets.clone());
            Ok(jets)
        })
    }

    /// Lie bracket `[self, other]` as a field: `[X,Y]^k = X(Y^k) − Y(X^k)`.
    pub fn bracket(&self, other: &VectorField) -> VectorField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        VectorField::new(self.dim, move |p, order| {
            let x = a.eval(p, order + 1)?;
            let y = b.eval(p, order + 1)?;
            let dim = x.len();
            let mut out = Vec::with_capacity(dim);
            for k in 0..dim {
                let mut c = Jet::constant(0.0, dim, order);
                for i in 0..dim {
                    let xi = x[i].truncate(order);
                    let yi = y[i].truncate(order);
                    c = c
                        .add(&xi.mul(&y[k].partial_jet(i)))
                        .sub(&yi.mul(&x[k].partial_jet(i)));
                }
                out.push(c);
            }
            Ok(out)
        })
    }

    /// Directional derivative of a scalar field along this field, as a jet.
    pub fn derive_scalar(&self, f: &ScalarField, p: &[f64], order: usize) -> Result<Jet> {
        let x = self.eval(p, order)?;
        let fj = f.eval(p, order + 1)?;
        let mut out = Jet::constant(0.0, self.dim, order);
        for (i, xi) in x.iter().enumerate() {
            out = out.add(&xi.mul(&fj.partial_jet(i)));
        }
        Ok(out)
    }
}

impl ScalarField {
    pub fn new(
        dim: usize,
        eval: impl Fn(&[f64], usize) -> Result<Jet> + Send + Sync + 'static,
    ) -> Self {
        ScalarField {
            dim,
            eval: Arc::new(eval),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, p: &[f64], order: usize) -> Result<Jet> {
        (self.eval)(p, order)
    }

    pub fn constant(dim: usize, v: f64) -> Self {
        ScalarField::new(dim, move |_p, order| Ok(Jet::constant(v, dim, order)))
    }
}

impl MatrixField {
    pub fn new(
        dim: usize,
        eval: impl Fn(&[f64], usize) -> Result<Vec<Vec<Jet>>> + Send + Sync + 'static,
    ) -> Self {
        MatrixField {
            dim,
            eval: Arc::new(eval),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, p: &[f64], order: usize) -> Result<Vec<Vec<Jet>>> {
        (self.eval)(p, order)
    }

    pub fn values(&self, p: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .eval(p, 0)?
            .iter()
            .map(|row| jet_values(row))
            .collect())
    }

    pub fn identity(dim: usize) -> Self {
        MatrixField::new(dim, move |_p, order| {
            Ok((0..dim)
                .map(|r| {
                    (0..dim)
                        .map(|c| Jet::constant(if r == c { 1.0 } else { 0.0 }, dim, order))
                        .collect()
                })
                .collect())
        })
    }

    /// Apply the tensor to a vector field, producing the mapped field.
    pub fn apply(&self, x: &VectorField) -> VectorField {
        assert_eq!(self.dim, x.dim());
        let (m, f) = (self.clone(), x.clone());
        VectorField::new(self.dim, move |p, order| {
            let mat = m.eval(p, order)?;
            let v = f.eval(p, order)?;
            Ok(mat_vec(&mat, &v))
        })
    }

    pub fn add(&self, other: &MatrixField) -> MatrixField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        MatrixField::new(self.dim, move |p, order| {
            let (x, y) = (a.eval(p, order)?, b.eval(p, order)?);
            Ok(x.iter()
                .zip(&y)
                .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u.add(v)).collect())
                .collect())
        })
    }

    pub fn sub(&self, other: &MatrixField) -> MatrixField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        MatrixField::new(self.dim, move |p, order| {
            let (x, y) = (a.eval(p, order)?, b.eval(p, order)?);
            Ok(x.iter()
                .zip(&y)
                .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u.sub(v)).collect())
                .collect())
        })
    }

    /// Matrix product `self · other` as a tensor field.
    pub fn compose(&self, other: &MatrixField) -> MatrixField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        MatrixField::new(self.dim, move |p, order| {
            let (x, y) = (a.eval(p, order)?, b.eval(p, order)?);
            let n = x.len();
            let mut out = vec![vec![Jet::constant(0.0, n, order); n]; n];
            for r in 0..n {
                for c in 0..n {
                    let mut acc = Jet::constant(0.0, n, order);
                    for k in 0..n {
                        acc = acc.add(&x[r][k].mul(&y[k][c]));
                    }
                    out[r][c] = acc;
                }
            }
            Ok(out)
        })
    }
}

pub fn mat_vec(mat: &[Vec<Jet>], v: &[Jet]) -> Vec<Jet> {
    mat.iter()
        .map(|row| {
            let mut acc = row[0].mul(&v[0]);
            for (m, x) in row.iter().zip(v).skip(1) {
                acc = acc.add(&m.mul(x));
            }
            acc
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Projector checks
// ---------------------------------------------------------------------------

/// Max-norm residual of `P·P − P` at a point.
pub fn projector_residual(p_field: &MatrixField, p: &[f64]) -> Result<f64> {
    let m = p_field.values(p)?;
    let n = m.len();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let mut pp = 0.0;
            for k in 0..n {
                pp += m[r][k] * m[k][c];
            }
            worst = worst.max((pp - m[r][c]).abs());
        }
    }
    Ok(worst)
}

/// Checks `Σ P_A = I` and `P_A P_B ≈ 0` for `A ≠ B` at a point.
pub fn decomposition_residual(parts: &[MatrixField], p: &[f64]) -> Result<f64> {
    let mats: Vec<Vec<Vec<f64>>> = parts
        .iter()
        .map(|f| f.values(p))
        .collect::<Result<_>>()?;
    let n = mats[0].len();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let total: f64 = mats.iter().map(|m| m[r][c]).sum();
            let id = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((total - id).abs());
        }
    }
    for (a, ma) in mats.iter().enumerate() {
        for (b, mb) in mats.iter().enumerate() {
            if a == b {
                continue;
            }
            for r in 0..n {
                for c in 0..n {
                    let mut prod = 0.0;
                    for k in 0..n {
                        prod += ma[r][k] * mb[k][c];
                    }
                    worst = worst.max(prod.abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Relative residual of `P(Y) − Y` at a point (membership in `Img(P)`).
pub fn image_residual(projector: &MatrixField, y: &VectorField, p: &[f64]) -> Result<f64> {
    let mat = projector.values(p)?;
    let v = y.values(p)?;
    let mut worst = 0.0f64;
    for (r, row) in mat.iter().enumerate() {
        let py: f64 = row.iter().zip(&v).map(|(m, x)| m * x).sum();
        worst = worst.max((py - v[r]).abs());
    }
    Ok(worst / scale_of([v.as_slice()]))
}

// ---------------------------------------------------------------------------
// Submodule derivatives, extension and glueing
// ---------------------------------------------------------------------------

/// A covariant derivative defined for directions and arguments in one
/// submodule, returning coordinate components as jets of the given order.
pub trait SubmoduleDerivative: Send + Sync {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>>;
}

/// The bracket-shaped derivative `∇_X Y = from([X, to(Y)])`.
///
/// This is a covariant derivative on a submodule precisely when `to` maps
/// the submodule isomorphically somewhere else, `from` inverts it, and
/// `from` annihilates the submodule itself; the vertical/horizontal
/// derivative pair with `to = S`, `from = Q` (and its swap) is the model.
pub struct MappedBracketDerivative {
    pub to_partner: MatrixField,
    pub from_partner: MatrixField,
}

impl SubmoduleDerivative for MappedBracketDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let br = x.bracket(&self.to_partner.apply(y)).eval(p, order)?;
        Ok(mat_vec(&self.from_partner.eval(p, order)?, &br))
    }
}

/// The flat derivative on a coordinate-slot block:
/// `∇_X Y = Σ_{i ∈ block} X(Y^i) ∂_i` (the zero-coefficient table).
pub struct FlatBlockDerivative {
    pub dim: usize,
    pub block: Vec<usize>,
}

impl SubmoduleDerivative for FlatBlockDerivative {
    fn eval(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize) -> Result<Vec<Jet>> {
        let mut out = vec![Jet::constant(0.0, self.dim, order); self.dim];
        for &i in &self.block {
            let yy = y.clone();
            let comp = ScalarField::new(self.dim, move |q, ord| Ok(yy.eval(q, ord)?[i].clone()));
            out[i] = x.derive_scalar(&comp, p, order)?;
        }
        Ok(out)
    }
}

/// Extension of a submodule derivative to arbitrary directions:
/// `∇̄_X Y = ∇_{P(X)} Y + P([X − P(X), Y])` for `Y ∈ Img(P)`.
pub fn extend_derivative(
    projector: &MatrixField,
    nabla: &dyn SubmoduleDerivative,
    x: &VectorField,
    y: &VectorField,
    p: &[f64],
    order: usize,
) -> Result<Vec<Jet>> {
    let residual = image_residual(projector, y, p)?;
    if residual > PROJECTOR_TOL {
        return Err(GeomError::NotInSubmodule { residual });
    }
    let px = projector.apply(x);
    let rest = x.sub(&px);
    let mut out = nabla.eval(&px, y, p, order)?;
    let br = rest.bracket(y).eval(p, order)?;
    let corr = mat_vec(&projector.eval(p, order)?, &br);
    for (o, c) in out.iter_mut().zip(&corr) {
        *o = o.add(c);
    }
    Ok(out)
}

/// A covariant derivative on the whole module, built from per-submodule
/// pieces over a direct-sum decomposition.
pub struct GluedConnection {
    dim: usize,
    parts: Vec<(MatrixField, Arc<dyn SubmoduleDerivative>)>,
}

impl GluedConnection {
    pub fn new(dim: usize, parts: Vec<(MatrixField, Arc<dyn SubmoduleDerivative>)>) -> Self {
        GluedConnection { dim, parts }
    }

    pub fn projectors(&self) -> Vec<MatrixField> {
        self.parts.iter().map(|(p, _)| p.clone()).collect()
    }
}

/// Any covariant derivative usable by the generic tensor computations.
pub trait Connection: Send + Sync {
    fn dim(&self) -> usize;
    /// Components of `∇_X Y` at `p` as jets of the requested order.
    fn covderiv(&self, x: &VectorField, y: &VectorField, p: &[f64], order: usize)
        -> Result<Vec<Jet>>;
}

impl Connection for GluedConnection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn covderiv(
        &self,
        x: &VectorField,
        y: &VectorField,
        p: &[f64],
        order: usize,
    ) -> Result<Vec<Jet>> {
        let projectors: Vec<MatrixField> = self.parts.iter().map(|(pf, _)| pf.clone()).collect();
        let worst = decomposition_residual(&projectors, p)?;
        if worst > PROJECTOR_TOL {
            return Err(GeomError::NotDecomposition {
                detail: format!("residual {worst:.3e} at the evaluation point"),
            });
        }
        let mut total = vec![Jet::constant(0.0, self.dim, order); self.dim];
        for (pf, nabla) in &self.parts {
            // the inner argument is the projected field: projection applied
            // before differentiation
            let projected = pf.apply(y);
            let term = extend_derivative(pf, nabla.as_ref(), x, &projected, p, order)?;
            for (t, v) in total.iter_mut().zip(&term) {
                *t = t.add(v);
            }
        }
        Ok(total)
    }
}

/// One-shot glued derivative evaluation.
pub fn glue_derivative(
    parts: &[(MatrixField, Arc<dyn SubmoduleDerivative>)],
    x: &VectorField,
    y: &VectorField,
    p: &[f64],
    order: usize,
) -> Result<Vec<Jet>> {
    let dim = x.dim();
    let conn = GluedConnection::new(dim, parts.to_vec());
    conn.covderiv(x, y, p, order)
}

// ---------------------------------------------------------------------------
// Derived tensors
// ---------------------------------------------------------------------------

/// Lie bracket values `[X,Y]` at a point.
pub fn lie_bracket(x: &VectorField, y: &VectorField, p: &[f64]) -> Result<Vec<f64>> {
    x.bracket(y).values(p)
}

/// `∇_X Y` wrapped back up as a vector field for nested differentiation.
/// Memoized: outer derivatives re-evaluate it repeatedly at one point.
pub fn derive_field(conn: Arc<dyn Connection>, x: &VectorField, y: &VectorField) -> VectorField {
    let (x, y) = (x.clone(), y.clone());
    let dim = conn.dim();
    VectorField::new(dim, move |p, order| conn.covderiv(&x, &y, p, order)).memoized()
}

/// Torsion `T(X,Y) = ∇_X Y − ∇_Y X − [X,Y]` at a point.
pub fn torsion(conn: &dyn Connection, x: &VectorField, y: &VectorField, p: &[f64]) -> Result<Vec<f64>> {
    let a = jet_values(&conn.covderiv(x, y, p, 0)?);
    let b = jet_values(&conn.covderiv(y, x, p, 0)?);
    let br = lie_bracket(x, y, p)?;
    Ok((0..a.len()).map(|i| a[i] - b[i] - br[i]).collect())
}

/// Curvature `R(X,Y)Z = ∇_X ∇_Y Z − ∇_Y ∇_X Z − ∇_{[X,Y]} Z` at a point.
pub fn curvature(
    conn: &Arc<dyn Connection>,
    x: &VectorField,
    y: &VectorField,
    z: &VectorField,
    p: &[f64],
) -> Result<Vec<f64>> {
    let dyz = derive_field(conn.clone(), y, z);
    let dxz = derive_field(conn.clone(), x, z);
    let t1 = jet_values(&conn.covderiv(x, &dyz, p, 0)?);
    let t2 = jet_values(&conn.covderiv(y, &dxz, p, 0)?);
    let t3 = jet_values(&conn.covderiv(&x.bracket(y), z, p, 0)?);
    Ok((0..t1.len()).map(|i| t1[i] - t2[i] - t3[i]).collect())
}

/// Which representation of the shape map to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeMode {
    /// `A_X(Y) = ∇_X Y − [X, Y]`
    Bracket,
    /// `A_X(Y) = ∇_Y X + T(X, Y)`
    Torsion,
}

/// Shape map `A_Z(ξ)` at a point, in either representation.
pub fn shape_map(
    conn: &Arc<dyn Connection>,
    z: &VectorField,
    xi: &VectorField,
    p: &[f64],
    mode: ShapeMode,
) -> Result<Vec<f64>> {
    match mode {
        ShapeMode::Bracket => {
            let d = jet_values(&conn.covderiv(z, xi, p, 0)?);
            let br = lie_bracket(z, xi, p)?;
            Ok((0..d.len()).map(|i| d[i] - br[i]).collect())
        }
        ShapeMode::Torsion => {
            let d = jet_values(&conn.covderiv(xi, z, p, 0)?);
            let t = torsion(conn.as_ref(), z, xi, p)?;
            Ok((0..d.len()).map(|i| d[i] + t[i]).collect())
        }
    }
}

/// Lie derivative of a (1,1) tensor along a field, as a tensor field:
/// column `c` is `[X, T ∂_c] − T([X, ∂_c])`.
pub fn lie_derivative_matrix(x: &VectorField, t: &MatrixField) -> MatrixField {
    let dim = t.dim();
    let (x, t) = (x.clone(), t.clone());
    MatrixField::new(dim, move |p, order| {
        let mut cols = Vec::with_capacity(dim);
        for c in 0..dim {
            let axis = VectorField::coordinate_axis(dim, c);
            let t_axis = t.apply(&axis);
            let first = x.bracket(&t_axis).eval(p, order)?;
            let second_arg = x.bracket(&axis).eval(p, order)?;
            let tm = t.eval(p, order)?;
            let second = mat_vec(&tm, &second_arg);
            cols.push(
                first
                    .iter()
                    .zip(&second)
                    .map(|(a, b)| a.sub(b))
                    .collect::<Vec<_>>(),
            );
        }
        // columns to row-major
        Ok((0..dim)
            .map(|r| (0..dim).map(|c| cols[c][r].clone()).collect())
            .collect())
    })
}

/// Residual of `(∇_X P)(Y) = ∇_X(P(Y)) − P(∇_X Y)` at a point, relative to
/// the local scale; zero iff the glued derivative parallelises `P`.
pub fn projector_parallel_residual(
    conn: &dyn Connection,
    projector: &MatrixField,
    x: &VectorField,
    y: &VectorField,
    p: &[f64],
) -> Result<f64> {
    let py = projector.apply(y);
    let a = jet_values(&conn.covderiv(x, &py, p, 0)?);
    let dxy = conn.covderiv(x, y, p, 1)?;
    let mat = projector.values(p)?;
    let dv = jet_values(&dxy);
    let n = dv.len();
    let mut worst = 0.0f64;
    for r in 0..n {
        let pd: f64 = mat[r].iter().zip(&dv).map(|(m, v)| m * v).sum();
        worst = worst.max((a[r] - pd).abs());
    }
    Ok(worst / scale_of([a.as_slice(), dv.as_slice()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::Jet;

    /// `X = ∂/∂v0`, `Y = v0 ∂/∂v1` on R^3.
    fn linear_field(dim: usize) -> VectorField {
        VectorField::new(dim, move |p, order| {
            let v0 = Jet::coordinate(0, p[0], dim, order)?;
            let mut out = vec![Jet::constant(0.0, dim, order); dim];
            out[1] = v0;
            Ok(out)
        })
    }

    #[test]
    fn coordinate_bracket() {
        let x = VectorField::coordinate_axis(3, 0);
        let y = linear_field(3);
        let br = lie_bracket(&x, &y, &[0.4, -1.0, 2.0]).unwrap();
        assert_eq!(br, vec![0.0, 1.0, 0.0]);
        let self_br = lie_bracket(&y, &y, &[0.4, -1.0, 2.0]).unwrap();
        assert!(self_br.iter().all(|v| v.abs() < 1e-14));
    }

    fn coordinate_projector(dim: usize, block: Vec<usize>) -> MatrixField {
        MatrixField::new(dim, move |_p, order| {
            Ok((0..dim)
                .map(|r| {
                    (0..dim)
                        .map(|c| {
                            let v = if r == c && block.contains(&r) { 1.0 } else { 0.0 };
                            Jet::constant(v, dim, order)
                        })
                        .collect()
                })
                .collect())
        })
    }

    #[test]
    fn extension_reduces_when_direction_is_in_image() {
        let p_block = coordinate_projector(3, vec![0, 1]);
        let nabla = FlatBlockDerivative {
            dim: 3,
            block: vec![0, 1],
        };
        let x = VectorField::coordinate_axis(3, 0);
        let y = linear_field(3);
        let py = p_block.apply(&y);
        let pt = [0.3, 0.7, -0.2];
        let ext = extend_derivative(&p_block, &nabla, &x, &py, &pt, 0).unwrap();
        let plain = nabla.eval(&x, &py, &pt, 0).unwrap();
        for (a, b) in ext.iter().zip(&plain) {
            assert!((a.value() - b.value()).abs() < 1e-12);
        }

        // P = identity also reduces to the bare derivative
        let id = MatrixField::identity(3);
        let nabla_id = FlatBlockDerivative {
            dim: 3,
            block: vec![0, 1, 2],
        };
        let ext = extend_derivative(&id, &nabla_id, &x, &y, &pt, 0).unwrap();
        let plain = nabla_id.eval(&x, &y, &pt, 0).unwrap();
        for (a, b) in ext.iter().zip(&plain) {
            assert!((a.value() - b.value()).abs() < 1e-12);
        }
    }

    #[test]
    fn membership_check_rejects_outside_fields() {
        let p_block = coordinate_projector(3, vec![0, 1]);
        let nabla = FlatBlockDerivative {
            dim: 3,
            block: vec![0, 1],
        };
        let x = VectorField::coordinate_axis(3, 0);
        let z = VectorField::coordinate_axis(3, 2);
        let err = extend_derivative(&p_block, &nabla, &x, &z, &[0.0; 3], 0);
        assert!(matches!(err, Err(GeomError::NotInSubmodule { .. })));
    }

    fn toy_connection(dim: usize, blocks: Vec<Vec<usize>>) -> GluedConnection {
        let parts = blocks
            .into_iter()
            .map(|b| {
                let pf = coordinate_projector(dim, b.clone());
                let nabla: Arc<dyn SubmoduleDerivative> =
                    Arc::new(FlatBlockDerivative { dim, block: b });
                (pf, nabla)
            })
            .collect();
        GluedConnection::new(dim, parts)
    }

    #[test]
    fn mapped_bracket_derivative_is_function_linear() {
        // two paired blocks of equal size on R^4, to/from shuffling between
        // them: the vertical/horizontal pattern
        let dim = 4;
        let to = MatrixField::new(dim, move |_p, order| {
            let mut m = vec![vec![Jet::constant(0.0, dim, order); dim]; dim];
            m[2][0] = Jet::constant(1.0, dim, order);
            m[3][1] = Jet::constant(1.0, dim, order);
            Ok(m)
        });
        let from = MatrixField::new(dim, move |_p, order| {
            let mut m = vec![vec![Jet::constant(0.0, dim, order); dim]; dim];
            m[0][2] = Jet::constant(1.0, dim, order);
            m[1][3] = Jet::constant(1.0, dim, order);
            Ok(m)
        });
        let nabla = MappedBracketDerivative {
            to_partner: to,
            from_partner: from,
        };
        let f = ScalarField::new(dim, |p, order| {
            let v1 = Jet::coordinate(1, p[1], 4, order)?;
            let v3 = Jet::coordinate(3, p[3], 4, order)?;
            Ok(v1.mul(&v3).add_scalar(1.2))
        });
        // X, Y in the block {0,1} with position-dependent components
        let x = VectorField::new(dim, |p, order| {
            let v2 = Jet::coordinate(2, p[2], 4, order)?;
            Ok(vec![
                v2.clone(),
                v2.mul(&v2).add_scalar(0.4),
                Jet::constant(0.0, 4, order),
                Jet::constant(0.0, 4, order),
            ])
        });
        let y = VectorField::new(dim, |p, order| {
            let v0 = Jet::coordinate(0, p[0], 4, order)?;
            let v3 = Jet::coordinate(3, p[3], 4, order)?;
            Ok(vec![
                v0.mul(&v3),
                v3.add_scalar(-0.3),
                Jet::constant(0.0, 4, order),
                Jet::constant(0.0, 4, order),
            ])
        });
        let p = [0.3, -0.2, 0.8, 0.5];
        let fx = x.scale_fn(&f);
        let lhs = jet_values(&nabla.eval(&fx, &y, &p, 0).unwrap());
        let f0 = f.eval(&p, 0).unwrap().value();
        let base = jet_values(&nabla.eval(&x, &y, &p, 0).unwrap());
        for (a, b) in lhs.iter().zip(&base) {
            assert!((a - f0 * b).abs() < 1e-10, "direction linearity");
        }
        // Leibniz in the argument: ∇_X(fY) = X(f)Y + f ∇_X Y
        let fy = y.scale_fn(&f);
        let got = jet_values(&nabla.eval(&x, &fy, &p, 0).unwrap());
        let xf = x.derive_scalar(&f, &p, 0).unwrap().value();
        let yv = y.values(&p).unwrap();
        for i in 0..dim {
            let expect = xf * yv[i] + f0 * base[i];
            assert!((got[i] - expect).abs() < 1e-10, "Leibniz rule");
        }
    }

    #[test]
    fn flat_glued_derivative_of_constant_is_zero() {
        let conn = toy_connection(3, vec![vec![0, 1], vec![2]]);
        let x = linear_field(3);
        let y = VectorField::constant(3, vec![1.0, 2.0, -1.0]);
        let d = jet_values(&conn.covderiv(&x, &y, &[0.1, 0.2, 0.3], 0).unwrap());
        assert!(d.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn function_linearity_in_direction() {
        // F-linearity of the glued derivative in X with a smooth multiplier
        let conn = toy_connection(3, vec![vec![0], vec![1, 2]]);
        let f = ScalarField::new(3, |p, order| {
            let v0 = Jet::coordinate(0, p[0], 3, order)?;
            let v2 = Jet::coordinate(2, p[2], 3, order)?;
            Ok(v0.mul(&v2).add_scalar(0.5))
        });
        let x = linear_field(3);
        let y = VectorField::new(3, |p, order| {
            let v1 = Jet::coordinate(1, p[1], 3, order)?;
            Ok(vec![
                v1.mul(&v1),
                Jet::constant(0.3, 3, order),
                v1.scale(2.0),
            ])
        });
        let p = [0.4, -0.6, 1.1];
        let fx = x.scale_fn(&f);
        let lhs = jet_values(&conn.covderiv(&fx, &y, &p, 0).unwrap());
        let fval = f.eval(&p, 0).unwrap().value();
        let rhs = jet_values(&conn.covderiv(&x, &y, &p, 0).unwrap());
        let scale = scale_of([lhs.as_slice(), rhs.as_slice()]);
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - fval * b).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn torsion_and_curvature_vanish_on_flat_toys() {
        let conn = toy_connection(4, vec![vec![0, 1], vec![2, 3]]);
        let x = VectorField::coordinate_axis(4, 1);
        let y = VectorField::coordinate_axis(4, 2);
        let z = VectorField::coordinate_axis(4, 3);
        let p = [0.1, 0.2, 0.3, 0.4];
        let t = torsion(&conn, &x, &y, &p).unwrap();
        assert!(t.iter().all(|v| v.abs() < 1e-12));
        let conn: Arc<dyn Connection> = Arc::new(conn);
        let r = curvature(&conn, &x, &y, &z, &p).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let a = shape_map(&conn, &x, &y, &p, ShapeMode::Bracket).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cross_submodule_torsion_case() {
        // X in Img(P_B), Y in Img(P_C), B != C: T(X,Y) = -Σ_{D != B,C} P_D([X,Y])
        let dim = 4;
        let blocks = vec![vec![0], vec![1, 2], vec![3]];
        let conn = toy_connection(dim, blocks.clone());
        let x = VectorField::coordinate_axis(dim, 0);
        // Y in block 1 with position-dependent components
        let y = VectorField::new(dim, move |p, order| {
            let v0 = Jet::coordinate(0, p[0], dim, order)?;
            let v3 = Jet::coordinate(3, p[3], dim, order)?;
            let mut out = vec![Jet::constant(0.0, dim, order); dim];
            out[1] = v0.mul(&v3);
            out[2] = v0.add(&v3);
            Ok(out)
        });
        let p = [0.5, -0.3, 0.9, 0.2];
        let t = torsion(&conn, &x, &y, &p).unwrap();
        let br = lie_bracket(&x, &y, &p).unwrap();
        let p_d = coordinate_projector(dim, vec![3]).values(&p).unwrap();
        for r in 0..dim {
            let expected: f64 = -p_d[r].iter().zip(&br).map(|(m, v)| m * v).sum::<f64>();
            assert!((t[r] - expected).abs() < 1e-10, "row {r}");
        }
        // same-submodule case matches the part derivative exactly
        let y1 = coordinate_projector(dim, vec![1, 2]).apply(&y);
        let x1 = VectorField::coordinate_axis(dim, 1);
        let same = jet_values(&conn.covderiv(&x1, &y1, &p, 0).unwrap());
        let nabla = FlatBlockDerivative {
            dim,
            block: vec![1, 2],
        };
        let part = jet_values(&nabla.eval(&x1, &y1, &p, 0).unwrap());
        for (a, b) in same.iter().zip(&part) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn shape_map_representations_agree() {
        let conn: Arc<dyn Connection> =
            Arc::new(toy_connection(3, vec![vec![0], vec![1, 2]]));
        let z = linear_field(3);
        let xi = VectorField::new(3, |p, order| {
            let v2 = Jet::coordinate(2, p[2], 3, order)?;
            Ok(vec![v2.clone(), v2.mul(&v2), Jet::constant(1.0, 3, order)])
        });
        let p = [0.2, 0.4, 0.6];
        let a = shape_map(&conn, &z, &xi, &p, ShapeMode::Bracket).unwrap();
        let b = shape_map(&conn, &z, &xi, &p, ShapeMode::Torsion).unwrap();
        let scale = scale_of([a.as_slice(), b.as_slice()]);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-8 * scale);
        }
    }
}
