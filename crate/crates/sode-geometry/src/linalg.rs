//! Small dense linear algebra helpers: jet-valued elimination, null spaces,
//! eigenvalues and polynomial root extraction. Everything here wraps
//! nalgebra; dimensions are tiny (at most a dozen).

use crate::error::{GeomError, Result};
use crate::jet::Jet;
use nalgebra::{Complex, DMatrix, DVector};

/// Solve `A x = b` where the entries are jets, by Gaussian elimination with
/// partial pivoting on the value parts. Derivative information flows through
/// the solve, so the solution components are jets of the inputs' order.
pub fn jet_solve(a: &[Vec<Jet>], b: &[Jet]) -> Result<Vec<Jet>> {
    let n = b.len();
    let mut m: Vec<Vec<Jet>> = a.iter().map(|row| row.to_vec()).collect();
    let mut rhs: Vec<Jet> = b.to_vec();
    let cond = condition_estimate(&value_matrix(a));
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                m[i][col]
                    .value()
                    .abs()
                    .partial_cmp(&m[j][col].value().abs())
                    .unwrap()
            })
            .unwrap();
        if m[pivot_row][col].value().abs() < 1e-13 {
            return Err(GeomError::SingularMatrix { cond });
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = m[row][col].div(&m[col][col])?;
            for k in col..n {
                let t = factor.mul(&m[col][k]);
                m[row][k] = m[row][k].sub(&t);
            }
            let t = factor.mul(&rhs[col]);
            rhs[row] = rhs[row].sub(&t);
        }
    }
    let mut x = rhs;
    for col in (0..n).rev() {
        for k in (col + 1)..n {
            let t = m[col][k].mul(&x[k]);
            x[col] = x[col].sub(&t);
        }
        x[col] = x[col].div(&m[col][col])?;
    }
    Ok(x)
}

/// Invert a jet-valued matrix column by column.
pub fn jet_invert(a: &[Vec<Jet>]) -> Result<Vec<Vec<Jet>>> {
    let n = a.len();
    let nvars = a[0][0].nvars();
    let order = a[0][0].order();
    let mut cols = Vec::with_capacity(n);
    for c in 0..n {
        let e: Vec<Jet> = (0..n)
            .map(|r| Jet::constant(if r == c { 1.0 } else { 0.0 }, nvars, order))
            .collect();
        cols.push(jet_solve(a, &e)?);
    }
    // transpose columns into rows
    Ok((0..n)
        .map(|r| (0..n).map(|c| cols[c][r].clone()).collect())
        .collect())
}

pub fn value_matrix(a: &[Vec<Jet>]) -> DMatrix<f64> {
    let n = a.len();
    let m = a[0].len();
    DMatrix::from_fn(n, m, |r, c| a[r][c].value())
}

/// 2-norm condition estimate via singular values.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let svd = a.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Orthonormal basis of the null space of `a`, using singular vectors whose
/// singular value is below `rel_tol` times the largest one.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> Vec<DVector<f64>> {
    let n = a.ncols();
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let smax = svd.singular_values.max().max(1e-300);
    let mut out = Vec::new();
    for i in 0..n {
        let s = if i < svd.singular_values.len() {
            svd.singular_values[i]
        } else {
            0.0
        };
        if s <= rel_tol * smax.max(1.0) {
            out.push(v_t.row(i).transpose());
        }
    }
    out
}

/// All eigenvalues of a real matrix, as complex numbers.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    a.clone().complex_eigenvalues().iter().copied().collect()
}

/// Monic-polynomial roots via the companion matrix. `coeffs` are low-to-high
/// with `coeffs[deg]` the leading coefficient.
pub fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg] == 0.0 {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let comp = DMatrix::from_fn(deg, deg, |r, c| {
        if c == deg - 1 {
            -coeffs[r] / lead
        } else if r == c + 1 {
            1.0
        } else {
            0.0
        }
    });
    eigenvalues(&comp)
}

/// Real roots of a polynomial, clustered by proximity: eigenvalues with
/// relative imaginary part below `imag_tol`, merged when within
/// `cluster_tol`, with multiplicities. Trailing coefficients below 1e-10 of
/// the largest one are deflated into exact zero roots first; a multiple
/// zero root would otherwise splinter under companion-matrix rounding.
pub fn real_roots(coeffs: &[f64], imag_tol: f64, cluster_tol: f64) -> Vec<(f64, usize)> {
    let max_c = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut zero_mult = 0usize;
    while zero_mult + 1 < coeffs.len() && coeffs[zero_mult].abs() <= 1e-10 * max_c {
        zero_mult += 1;
    }
    let deflated = &coeffs[zero_mult..];
    let mut reals: Vec<f64> = polynomial_roots(deflated)
        .into_iter()
        .filter(|z| z.im.abs() <= imag_tol * z.norm().max(1.0))
        .map(|z| z.re)
        .collect();
    reals.extend(std::iter::repeat(0.0).take(zero_mult));
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in reals {
        match out.last_mut() {
            Some((v, count)) if (r - *v).abs() <= cluster_tol => {
                // running mean keeps the cluster centre stable
                *v = (*v * *count as f64 + r) / (*count as f64 + 1.0);
                *count += 1;
            }
            _ => out.push((r, 1)),
        }
    }
    out
}

/// Recover polynomial coefficients of known degree from samples at the
/// integer-ish nodes `0, 1, -1, 2, -2, ...` by solving the Vandermonde
/// system.
pub fn interpolate_polynomial(degree: usize, sample: impl Fn(f64) -> Result<f64>) -> Result<Vec<f64>> {
    let n = degree + 1;
    let nodes: Vec<f64> = (0..n)
        .map(|i| {
            let k = i.div_ceil(2) as f64;
            if i % 2 == 1 {
                k
            } else {
                -k
            }
        })
        .collect();
    let mut rhs = DVector::zeros(n);
    for (i, &x) in nodes.iter().enumerate() {
        rhs[i] = sample(x)?;
    }
    let vand = DMatrix::from_fn(n, n, |r, c| nodes[r].powi(c as i32));
    let lu = vand.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or(GeomError::SingularMatrix { cond: f64::INFINITY })?;
    Ok(sol.iter().copied().collect())
}

/// Whether a symmetric matrix admits a Cholesky factorisation.
pub fn is_spd(a: &DMatrix<f64>) -> bool {
    nalgebra::Cholesky::new(a.clone()).is_some()
}
