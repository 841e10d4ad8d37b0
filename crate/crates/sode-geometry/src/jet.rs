//! Truncated multivariate Taylor (jet) arithmetic.
//!
//! A [`Jet`] stores the Taylor coefficients `∂^α f / α!` of a scalar function
//! at a point, for every multi-index `α` with `|α| <= order`, in graded
//! lexicographic order. The Taylor convention keeps multiplication and
//! composition free of binomial factors; [`Jet::partial`] multiplies the
//! factorial back out to return raw partial derivatives. Mixed partials are
//! symmetric exactly, by storage.
//!
//! The supported contract is orders 1–3; higher orders (up to
//! [`MAX_ORDER`]) exist so that pipelines which differentiate *through*
//! derived quantities (e.g. jets of a reduced force law) can propagate
//! enough depth internally.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Hard cap on the jet order; index tables grow combinatorially past this.
pub const MAX_ORDER: usize = 6;

const POLE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, thiserror::Error)]
pub enum JetError {
    #[error("variable index {index} out of range for {nvars} variables")]
    VarIndex { index: usize, nvars: usize },
    #[error("jet order {order} outside supported range 1..={max}", max = MAX_ORDER)]
    Order { order: usize },
    #[error("multi-index of order {requested} exceeds jet order {order}")]
    PartialOrder { requested: usize, order: usize },
    #[error("multi-index has {len} entries, jet has {nvars} variables")]
    PartialLen { len: usize, nvars: usize },
    #[error("domain error in {func}: {detail}")]
    Domain { func: &'static str, detail: String },
}

fn domain(func: &'static str, detail: impl Into<String>) -> JetError {
    JetError::Domain {
        func,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Multi-index tables
// ---------------------------------------------------------------------------

/// Precomputed multi-index bookkeeping for a fixed (nvars, order) pair.
///
/// Indices are graded-lex ordered, so a lower-order table is a prefix of a
/// higher-order one with the same variable count; truncation and partial
/// extraction are plain slice operations.
struct IndexTable {
    indices: Vec<Vec<u8>>,
    /// number of indices with degree <= d, for d = 0..=order
    degree_offsets: Vec<usize>,
    /// α! per index
    factorials: Vec<f64>,
    /// (lhs, rhs, out) triples covering every coefficient product in `mul`
    mul_pairs: Vec<(u32, u32, u32)>,
    /// shift[v][rank(β)] = rank(β + e_v), for |β| < order
    shift: Vec<Vec<u32>>,
}

fn enumerate_indices(nvars: usize, order: usize) -> Vec<Vec<u8>> {
    let mut all = Vec::new();
    for degree in 0..=order {
        let mut idx = vec![0u8; nvars];
        fn rec(idx: &mut Vec<u8>, pos: usize, left: u8, out: &mut Vec<Vec<u8>>) {
            if pos + 1 == idx.len() {
                idx[pos] = left;
                out.push(idx.clone());
                return;
            }
            for v in 0..=left {
                idx[pos] = v;
                rec(idx, pos + 1, left - v, out);
            }
        }
        rec(&mut idx, 0, degree as u8, &mut all);
    }
    all
}

impl IndexTable {
    fn build(nvars: usize, order: usize) -> Self {
        let indices = enumerate_indices(nvars, order);
        let mut rank = HashMap::with_capacity(indices.len());
        for (r, a) in indices.iter().enumerate() {
            rank.insert(a.clone(), r);
        }
        let mut degree_offsets = vec![0usize; order + 2];
        for a in &indices {
            let d = a.iter().map(|&x| x as usize).sum::<usize>();
            degree_offsets[d + 1] += 1;
        }
        for d in 0..=order {
            degree_offsets[d + 1] += degree_offsets[d];
        }
        let factorials = indices
            .iter()
            .map(|a| {
                a.iter()
                    .map(|&x| (1..=x as u64).product::<u64>() as f64)
                    .product()
            })
            .collect();
        let mut mul_pairs = Vec::new();
        let mut sum = vec![0u8; nvars];
        for (i, a) in indices.iter().enumerate() {
            let da: usize = a.iter().map(|&x| x as usize).sum();
            for (j, b) in indices.iter().enumerate() {
                let db: usize = b.iter().map(|&x| x as usize).sum();
                if da + db > order {
                    continue;
                }
                for v in 0..nvars {
                    sum[v] = a[v] + b[v];
                }
                mul_pairs.push((i as u32, j as u32, rank[&sum] as u32));
            }
        }
        let below = degree_offsets[order];
        let mut shift = vec![vec![0u32; below]; nvars];
        for v in 0..nvars {
            for (r, a) in indices.iter().enumerate().take(below) {
                let mut s = a.clone();
                s[v] += 1;
                shift[v][r] = rank[&s] as u32;
            }
        }
        IndexTable {
            indices,
            degree_offsets,
            factorials,
            mul_pairs,
            shift,
        }
    }
}

fn table(nvars: usize, order: usize) -> Arc<IndexTable> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<IndexTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((nvars, order))
        .or_insert_with(|| Arc::new(IndexTable::build(nvars, order)))
        .clone()
}

// ---------------------------------------------------------------------------
// Jet
// ---------------------------------------------------------------------------

/// Truncated Taylor expansion of a scalar function at a point.
#[derive(Clone)]
pub struct Jet {
    nvars: usize,
    order: usize,
    coeffs: Vec<f64>,
}

impl std::fmt::Debug for Jet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Jet")
            .field("nvars", &self.nvars)
            .field("order", &self.order)
            .field("value", &self.coeffs[0])
            .finish()
    }
}

impl Jet {
    fn zero_like(nvars: usize, order: usize) -> Jet {
        let len = table(nvars, order).indices.len();
        Jet {
            nvars,
            order,
            coeffs: vec![0.0; len],
        }
    }

    /// Jet of the constant function `value`.
    pub fn constant(value: f64, nvars: usize, order: usize) -> Jet {
        let mut j = Jet::zero_like(nvars, order);
        j.coeffs[0] = value;
        j
    }

    /// Jet of the coordinate function `v_{var}` at `value`: unit first partial
    /// with respect to itself, all other coefficients zero.
    pub fn seed(var: usize, value: f64, nvars: usize, order: usize) -> Result<Jet, JetError> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(JetError::Order { order });
        }
        if var >= nvars {
            return Err(JetError::VarIndex { index: var, nvars });
        }
        let mut j = Jet::zero_like(nvars, order);
        j.coeffs[0] = value;
        // rank of e_var within the degree-1 block: lex order puts higher
        // variable indices first
        j.coeffs[1 + (nvars - 1 - var)] = 1.0;
        Ok(j)
    }

    /// Like [`Jet::seed`], but order 0 is allowed and yields the constant
    /// jet (a coordinate function carries no derivative data at order 0).
    /// Field evaluation at plain values is built on this.
    pub fn coordinate(var: usize, value: f64, nvars: usize, order: usize) -> Result<Jet, JetError> {
        if order == 0 {
            if var >= nvars {
                return Err(JetError::VarIndex { index: var, nvars });
            }
            Ok(Jet::constant(value, nvars, 0))
        } else {
            Jet::seed(var, value, nvars, order)
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Raw partial derivative `∂^α f` for a multi-index `alpha`.
    pub fn partial(&self, alpha: &[usize]) -> Result<f64, JetError> {
        if alpha.len() != self.nvars {
            return Err(JetError::PartialLen {
                len: alpha.len(),
                nvars: self.nvars,
            });
        }
        let degree: usize = alpha.iter().sum();
        if degree > self.order {
            return Err(JetError::PartialOrder {
                requested: degree,
                order: self.order,
            });
        }
        let t = table(self.nvars, self.order);
        let key: Vec<u8> = alpha.iter().map(|&x| x as u8).collect();
        let rank = t
            .indices
            .iter()
            .position(|a| *a == key)
            .expect("index in range");
        Ok(self.coeffs[rank] * t.factorials[rank])
    }

    /// First partial `∂f/∂v_{var}` as a plain number.
    pub fn grad(&self, var: usize) -> f64 {
        debug_assert!(var < self.nvars && self.order >= 1);
        self.coeffs[1 + (self.nvars - 1 - var)]
    }

    /// The jet of `∂f/∂v_{var}`, one order lower.
    pub fn partial_jet(&self, var: usize) -> Jet {
        assert!(self.order >= 1, "cannot differentiate an order-0 jet");
        assert!(var < self.nvars);
        let t = table(self.nvars, self.order);
        let below = t.degree_offsets[self.order];
        let mut out = Jet::zero_like(self.nvars, self.order - 1);
        for r in 0..below {
            let src = t.shift[var][r] as usize;
            // Taylor convention: coefficient picks up (β_v + 1)
            out.coeffs[r] = self.coeffs[src] * (t.indices[r][var] as f64 + 1.0);
        }
        out
    }

    /// Copy truncated to a lower (or equal) order.
    pub fn truncate(&self, order: usize) -> Jet {
        assert!(order <= self.order);
        let t = table(self.nvars, self.order);
        Jet {
            nvars: self.nvars,
            order,
            coeffs: self.coeffs[..t.degree_offsets[order + 1]].to_vec(),
        }
    }

    fn assert_same_shape(&self, other: &Jet) {
        assert_eq!(self.nvars, other.nvars, "jet variable counts differ");
        assert_eq!(self.order, other.order, "jet orders differ");
    }

    pub fn add(&self, other: &Jet) -> Jet {
        self.assert_same_shape(other);
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        self.assert_same_shape(other);
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a -= b;
        }
        out
    }

    pub fn neg(&self) -> Jet {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Jet {
        let mut out = self.clone();
        for a in out.coeffs.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut out = self.clone();
        out.coeffs[0] += s;
        out
    }

    pub fn mul(&self, other: &Jet) -> Jet {
        self.assert_same_shape(other);
        let t = table(self.nvars, self.order);
        let mut out = Jet::zero_like(self.nvars, self.order);
        for &(i, j, k) in &t.mul_pairs {
            out.coeffs[k as usize] += self.coeffs[i as usize] * other.coeffs[j as usize];
        }
        out
    }

    pub fn div(&self, other: &Jet) -> Result<Jet, JetError> {
        if other.value() == 0.0 {
            return Err(domain("div", "division by zero at the point"));
        }
        Ok(self.mul(&other.compose_unary(&recip_taylor(other.value(), other.order))))
    }

    /// Integer power; negative exponents require a nonzero base value.
    pub fn powi(&self, exp: i32) -> Result<Jet, JetError> {
        match exp {
            0 => Ok(Jet::constant(1.0, self.nvars, self.order)),
            1 => Ok(self.clone()),
            _ => {
                let v = self.value();
                if exp < 0 && v == 0.0 {
                    return Err(domain("pow_int", "negative power of zero at the point"));
                }
                let mut derivs = vec![0.0f64; self.order + 1];
                let mut fact = 1.0f64;
                for (j, d) in derivs.iter_mut().enumerate() {
                    // falling factorial exp*(exp-1)*...; a zero factor kills
                    // the whole term regardless of v^negative
                    let mut c = 1.0f64;
                    for i in 0..j {
                        c *= exp as f64 - i as f64;
                    }
                    if j > 0 {
                        fact *= j as f64;
                    }
                    *d = if c == 0.0 {
                        0.0
                    } else {
                        c * v.powi(exp - j as i32) / fact
                    };
                }
                Ok(self.compose_unary(&derivs))
            }
        }
    }

    pub fn sqrt(&self) -> Result<Jet, JetError> {
        let v = self.value();
        if v <= 0.0 {
            return Err(domain("sqrt", "square root of a non-positive value"));
        }
        let mut derivs = vec![0.0f64; self.order + 1];
        let mut coef = 1.0f64;
        let mut fact = 1.0f64;
        for (j, d) in derivs.iter_mut().enumerate() {
            if j > 0 {
                coef *= 0.5 - (j as f64 - 1.0);
                fact *= j as f64;
            }
            *d = coef * v.powf(0.5 - j as f64) / fact;
        }
        Ok(self.compose_unary(&derivs))
    }

    pub fn exp(&self) -> Jet {
        let e = self.value().exp();
        let mut fact = 1.0f64;
        let derivs: Vec<f64> = (0..=self.order)
            .map(|j| {
                if j > 0 {
                    fact *= j as f64;
                }
                e / fact
            })
            .collect();
        self.compose_unary(&derivs)
    }

    pub fn ln(&self) -> Result<Jet, JetError> {
        let v = self.value();
        if v <= 0.0 {
            return Err(domain("log", "logarithm of a non-positive value"));
        }
        let mut derivs = vec![0.0f64; self.order + 1];
        derivs[0] = v.ln();
        for (j, d) in derivs.iter_mut().enumerate().skip(1) {
            // d^j ln = (-1)^{j-1} (j-1)! v^{-j}; divide by j! for Taylor form
            *d = if j % 2 == 1 { 1.0 } else { -1.0 } / (j as f64 * v.powi(j as i32));
        }
        Ok(self.compose_unary(&derivs))
    }

    pub fn sin(&self) -> Jet {
        self.compose_unary(&sin_cos_taylor(self.value(), self.order, false))
    }

    pub fn cos(&self) -> Jet {
        self.compose_unary(&sin_cos_taylor(self.value(), self.order, true))
    }

    pub fn tan(&self) -> Result<Jet, JetError> {
        let v = self.value();
        if v.cos().abs() < POLE_EPS {
            return Err(domain("tan", "pole: cosine vanishes at the point"));
        }
        Ok(self.compose_unary(&tan_cot_taylor(v.tan(), self.order, false)))
    }

    pub fn cot(&self) -> Result<Jet, JetError> {
        let v = self.value();
        if v.sin().abs() < POLE_EPS {
            return Err(domain("cot", "pole: sine vanishes at the point"));
        }
        Ok(self.compose_unary(&tan_cot_taylor(v.tan().recip(), self.order, true)))
    }

    pub fn sec(&self) -> Result<Jet, JetError> {
        let v = self.value();
        if v.cos().abs() < POLE_EPS {
            return Err(domain("sec", "pole: cosine vanishes at the point"));
        }
        Ok(self.compose_unary(&sec_csc_taylor(v.cos().recip(), v.tan(), self.order, false)))
    }

    pub fn csc(&self) -> Result<Jet, JetError> {
        let v = self.value();
        if v.sin().abs() < POLE_EPS {
            return Err(domain("csc", "pole: sine vanishes at the point"));
        }
        Ok(self.compose_unary(&sec_csc_taylor(
            v.sin().recip(),
            v.tan().recip(),
            self.order,
            true,
        )))
    }

    pub fn atan(&self) -> Jet {
        self.compose_unary(&atan_taylor(self.value(), self.order))
    }

    /// Composition with a unary function given by its Taylor coefficients
    /// `taylor[j] = f^{(j)}(value)/j!` at this jet's value.
    fn compose_unary(&self, taylor: &[f64]) -> Jet {
        debug_assert_eq!(taylor.len(), self.order + 1);
        let mut delta = self.clone();
        delta.coeffs[0] = 0.0;
        let mut out = Jet::constant(taylor[self.order], self.nvars, self.order);
        for j in (0..self.order).rev() {
            out = out.mul(&delta);
            out.coeffs[0] += taylor[j];
        }
        out
    }

    /// Substitute `args` (jets over a common inner variable space) into this
    /// jet's truncated Taylor polynomial. `args[i]` is the expansion of the
    /// i-th outer coordinate; the result is the composed function's jet over
    /// the inner space, exact to `min(self.order, args order)`.
    pub fn compose(&self, args: &[Jet]) -> Jet {
        assert_eq!(args.len(), self.nvars, "one argument jet per outer variable");
        let n_in = args[0].nvars;
        let out_order = self.order.min(args[0].order);
        for a in args {
            assert_eq!(a.nvars, n_in);
            assert_eq!(a.order, args[0].order);
        }
        // centered arguments; a degree-d outer monomial only reaches output
        // orders >= d, so outer coefficients beyond out_order are dropped
        let deltas: Vec<Jet> = args
            .iter()
            .map(|a| {
                let mut d = a.truncate(out_order);
                d.coeffs[0] = 0.0;
                d
            })
            .collect();
        let mut powers: Vec<Vec<Jet>> = Vec::with_capacity(self.nvars);
        for d in &deltas {
            let mut p = vec![Jet::constant(1.0, n_in, out_order)];
            for e in 1..=out_order {
                p.push(p[e - 1].mul(d));
            }
            powers.push(p);
        }
        let t = table(self.nvars, self.order);
        let mut acc = Jet::constant(self.coeffs[0], n_in, out_order);
        let limit = t.degree_offsets[out_order + 1];
        for rank in 1..limit {
            let c = self.coeffs[rank];
            if c == 0.0 {
                continue;
            }
            let alpha = &t.indices[rank];
            let mut mono: Option<Jet> = None;
            for (i, &e) in alpha.iter().enumerate() {
                if e > 0 {
                    let p = &powers[i][e as usize];
                    mono = Some(match mono {
                        None => p.clone(),
                        Some(m) => m.mul(p),
                    });
                }
            }
            acc = acc.add(&mono.expect("nonzero degree").scale(c));
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Scalar derivative tables (Taylor coefficients f^{(j)}(v)/j!)
// ---------------------------------------------------------------------------

fn recip_taylor(v: f64, order: usize) -> Vec<f64> {
    // d^j (1/v) / j! = (-1)^j v^{-(j+1)}
    let mut out = Vec::with_capacity(order + 1);
    let mut c = 1.0 / v;
    for _ in 0..=order {
        out.push(c);
        c *= -1.0 / v;
    }
    out
}

fn sin_cos_taylor(v: f64, order: usize, cosine: bool) -> Vec<f64> {
    let (s, c) = v.sin_cos();
    let cycle = if cosine {
        [c, -s, -c, s]
    } else {
        [s, c, -s, -c]
    };
    let mut fact = 1.0f64;
    (0..=order)
        .map(|j| {
            if j > 0 {
                fact *= j as f64;
            }
            cycle[j % 4] / fact
        })
        .collect()
}

/// Evaluate `p(x)` for a dense coefficient slice (lowest power first).
fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// `p'(x) * (1 + x^2) * sign`, the derivative step shared by tan and cot.
fn poly_step(p: &[f64], sign: f64) -> Vec<f64> {
    let mut d = vec![0.0; p.len().max(2) - 1];
    for (i, &c) in p.iter().enumerate().skip(1) {
        d[i - 1] = c * i as f64;
    }
    let mut out = vec![0.0; d.len() + 2];
    for (i, &c) in d.iter().enumerate() {
        out[i] += sign * c;
        out[i + 2] += sign * c;
    }
    out
}

fn tan_cot_taylor(x: f64, order: usize, cot: bool) -> Vec<f64> {
    // derivatives of tan are polynomials in t = tan v via t' = 1 + t^2;
    // cot uses c' = -(1 + c^2) with x = cot v
    let sign = if cot { -1.0 } else { 1.0 };
    let mut p = vec![0.0, 1.0];
    let mut fact = 1.0f64;
    let mut out = Vec::with_capacity(order + 1);
    for j in 0..=order {
        if j > 0 {
            fact *= j as f64;
        }
        out.push(poly_eval(&p, x) / fact);
        p = poly_step(&p, sign);
    }
    out
}

fn sec_csc_taylor(f0: f64, x: f64, order: usize, csc: bool) -> Vec<f64> {
    // d^j sec = sec * Q_j(tan), Q_{j+1} = t Q_j + (1+t^2) Q_j'
    // d^j csc = csc * Q_j(cot), Q_{j+1} = -(c Q_j + (1+c^2) Q_j')
    let sign = if csc { -1.0 } else { 1.0 };
    let mut q = vec![1.0];
    let mut fact = 1.0f64;
    let mut out = Vec::with_capacity(order + 1);
    for j in 0..=order {
        if j > 0 {
            fact *= j as f64;
        }
        out.push(f0 * poly_eval(&q, x) / fact);
        let shifted: Vec<f64> = std::iter::once(0.0).chain(q.iter().copied()).collect();
        let step = poly_step(&q, 1.0);
        let len = shifted.len().max(step.len());
        let mut next = vec![0.0; len];
        for i in 0..len {
            let a = shifted.get(i).copied().unwrap_or(0.0);
            let b = step.get(i).copied().unwrap_or(0.0);
            next[i] = sign * (a + b);
        }
        q = next;
    }
    out
}

fn atan_taylor(v: f64, order: usize) -> Vec<f64> {
    // d^j atan = d^{j-1} [1/(1+v^2)]; with r_j = R_j(v)/(1+v^2)^{j+1},
    // R_{j+1} = R_j'(1+v^2) - 2(j+1) v R_j
    let mut out = Vec::with_capacity(order + 1);
    out.push(v.atan());
    let w = 1.0 + v * v;
    let mut r = vec![1.0f64];
    let mut fact = 1.0f64;
    for j in 1..=order {
        fact *= j as f64;
        out.push(poly_eval(&r, v) / (w.powi(j as i32) * fact));
        let mut next = vec![0.0; r.len() + 1];
        for (i, &c) in r.iter().enumerate() {
            if i >= 1 {
                next[i - 1] += c * i as f64;
            }
            next[i + 1] += c * i as f64 - 2.0 * j as f64 * c;
        }
        r = next;
    }
    out
}
