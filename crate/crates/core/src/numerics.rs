//! Dense matrix kernels: exponentials of subgenerators, their integrals, and
//! stationary vectors of stochastic matrices.
//!
//! Distributions are row vectors throughout, so `v * P` advances a
//! distribution one step and `e^{Ft}` acts on the right.
//!
//! Matrix exponentials use uniformization: with `q = max |diag(F)|` and
//! `P = I + F/q`, `e^{Ft} = sum_n pois(n; qt) P^n`. For a subgenerator `P` is
//! substochastic, so every term is nonnegative and the truncated sum is a
//! lower bound with error equal to the Poisson tail. Large `qt` is handled by
//! splitting `t` (squaring for matrices, sequential chunks for vectors).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerance used when checking the structural role of an input matrix.
pub const ROLE_TOL: f64 = 1e-9;

/// Truncation target for uniformization series.
const SERIES_TAIL: f64 = 1e-16;

/// Largest `q*t` handled by a single series; beyond this the time step is split.
const MAX_SERIES_ARG: f64 = 64.0;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not a subgenerator (off-diagonal >= 0, diagonal <= 0, row sums <= 0)")]
    NotSubgenerator,
    #[error("matrix is not row stochastic")]
    NotStochastic,
    #[error("time argument must be finite and nonnegative, got {0}")]
    BadTime(f64),
    #[error("-F is singular; the process does not reach absorption")]
    Singular,
    #[error("stationary solve did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
}

/// Checks the subgenerator role tag: off-diagonal entries nonnegative,
/// diagonal nonpositive, row sums nonpositive.
pub fn is_subgenerator(f: &DMatrix<f64>, tol: f64) -> bool {
    if f.nrows() != f.ncols() {
        return false;
    }
    let n = f.nrows();
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            let v = f[(i, j)];
            if !v.is_finite() {
                return false;
            }
            if i == j {
                if v > tol {
                    return false;
                }
            } else if v < -tol {
                return false;
            }
            row_sum += v;
        }
        if row_sum > tol {
            return false;
        }
    }
    true
}

/// Checks the stochastic role tag: nonnegative entries, row sums equal to one.
pub fn is_stochastic(p: &DMatrix<f64>, tol: f64) -> bool {
    if p.nrows() != p.ncols() {
        return false;
    }
    for i in 0..p.nrows() {
        let mut row_sum = 0.0;
        for j in 0..p.ncols() {
            let v = p[(i, j)];
            if !v.is_finite() || v < -tol {
                return false;
            }
            row_sum += v;
        }
        if (row_sum - 1.0).abs() > tol {
            return false;
        }
    }
    true
}

fn check_square(f: &DMatrix<f64>) -> Result<usize, NumericsError> {
    if f.nrows() != f.ncols() {
        return Err(NumericsError::NotSquare {
            rows: f.nrows(),
            cols: f.ncols(),
        });
    }
    Ok(f.nrows())
}

fn check_time(t: f64) -> Result<(), NumericsError> {
    if !t.is_finite() || t < 0.0 {
        return Err(NumericsError::BadTime(t));
    }
    Ok(())
}

/// `I + F/q` with tiny negative round-off clamped to zero.
fn probabilized(f: &DMatrix<f64>, q: f64) -> DMatrix<f64> {
    let n = f.nrows();
    let mut p = f / q;
    for i in 0..n {
        p[(i, i)] += 1.0;
    }
    p.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    p
}

/// `e^{Ft}` for a subgenerator `F` and `t >= 0`.
///
/// The result is nonnegative with row sums at most one.
pub fn expm_sub(f: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, NumericsError> {
    let n = check_square(f)?;
    check_time(t)?;
    if !is_subgenerator(f, ROLE_TOL) {
        return Err(NumericsError::NotSubgenerator);
    }
    let q = f.diagonal().iter().fold(0.0f64, |a, &d| a.max(-d));
    if q == 0.0 || t == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }

    let mut tau = t;
    let mut squarings = 0u32;
    while q * tau > MAX_SERIES_ARG {
        tau *= 0.5;
        squarings += 1;
    }

    let p = probabilized(f, q);
    let a = q * tau;
    let mut weight = (-a).exp();
    let mut cum = weight;
    let mut term = DMatrix::identity(n, n);
    let mut acc = &term * weight;
    let mut k = 1usize;
    let cap = (a + 12.0 * a.sqrt() + 60.0) as usize;
    while 1.0 - cum > SERIES_TAIL && k <= cap {
        term = &term * &p;
        weight *= a / k as f64;
        acc += &term * weight;
        cum += weight;
        k += 1;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    Ok(acc)
}

/// `int_0^t e^{F s} ds` for a subgenerator `F`.
///
/// Finite `t` uses `(I - e^{Ft}) (-F)^{-1}`; `t = inf` returns `(-F)^{-1}`,
/// which requires `-F` nonsingular (absorption certain from every state).
pub fn integral_exp(f: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, NumericsError> {
    let n = check_square(f)?;
    if !is_subgenerator(f, ROLE_TOL) {
        return Err(NumericsError::NotSubgenerator);
    }
    if t == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let neg_f_inv = (-f).try_inverse().ok_or(NumericsError::Singular)?;
    let mut out = if t.is_infinite() && t > 0.0 {
        neg_f_inv
    } else {
        check_time(t)?;
        let lam = expm_sub(f, t)?;
        let i_minus = DMatrix::identity(n, n) - lam;
        i_minus * neg_f_inv
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::Singular);
    }
    // round-off can leave entries at -1e-18 or so
    out.iter_mut().for_each(|v| {
        if *v < 0.0 && *v > -1e-10 {
            *v = 0.0;
        }
    });
    Ok(out)
}

/// l1 norm of `v P - v`.
pub fn stationary_residual(v: &DVector<f64>, p: &DMatrix<f64>) -> f64 {
    let vp = p.tr_mul(v);
    (vp - v).abs().sum()
}

const STATIONARY_TOL: f64 = 1e-12;
const DIRECT_SOLVE_MAX_ORDER: usize = 2000;
const POWER_ITER_CAP: usize = 2_000_000;

fn clamp_normalize(v: &mut DVector<f64>) {
    v.iter_mut().for_each(|x| {
        if !x.is_finite() || *x < 0.0 {
            *x = 0.0;
        }
    });
    let s = v.sum();
    if s > 0.0 {
        *v /= s;
    }
}

/// Stationary probability vector of a row-stochastic matrix: `v P = v`,
/// `v >= 0`, `sum v = 1`, with `||vP - v||_1 < 1e-12`.
///
/// Orders up to 2000 use a direct solve of `(I - P^T + 11^T) v = 1`; larger
/// matrices (or a failed direct solve) fall back to power iteration.
pub fn stationary(p: &DMatrix<f64>) -> Result<DVector<f64>, NumericsError> {
    let n = check_square(p)?;
    if !is_stochastic(p, ROLE_TOL) {
        return Err(NumericsError::NotStochastic);
    }
    if n == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }

    if n <= DIRECT_SOLVE_MAX_ORDER {
        let mut a = DMatrix::from_element(n, n, 1.0);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] += if i == j { 1.0 } else { 0.0 } - p[(j, i)];
            }
        }
        let rhs = DVector::from_element(n, 1.0);
        if let Some(mut v) = a.lu().solve(&rhs) {
            clamp_normalize(&mut v);
            let res = stationary_residual(&v, p);
            if res < STATIONARY_TOL {
                return Ok(v);
            }
        }
    }

    // power iteration fallback
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    let mut res = f64::INFINITY;
    for it in 0..POWER_ITER_CAP {
        let mut next = p.tr_mul(&v);
        clamp_normalize(&mut next);
        if it % 64 == 0 {
            res = stationary_residual(&next, p);
            if res < STATIONARY_TOL {
                return Ok(next);
            }
        }
        v = next;
    }
    Err(NumericsError::NonConvergence {
        residual: res,
        iterations: POWER_ITER_CAP,
    })
}

/// `v e^{Ft}` for a row vector `v`, without forming the matrix exponential.
///
/// Sequential chunking keeps each uniformization series short, so this stays
/// stable for arbitrarily large `q t`.
pub fn expm_apply_row(
    v: &DVector<f64>,
    f: &DMatrix<f64>,
    t: f64,
) -> Result<DVector<f64>, NumericsError> {
    let n = check_square(f)?;
    check_time(t)?;
    if v.len() != n {
        return Err(NumericsError::NotSquare {
            rows: v.len(),
            cols: n,
        });
    }
    let q = f.diagonal().iter().fold(0.0f64, |a, &d| a.max(-d));
    if q == 0.0 || t == 0.0 {
        return Ok(v.clone());
    }
    let chunks = (q * t / MAX_SERIES_ARG).ceil().max(1.0) as usize;
    let tau = t / chunks as f64;
    let p = probabilized(f, q);
    let a = q * tau;
    let cap = (a + 12.0 * a.sqrt() + 60.0) as usize;

    let mut cur = v.clone();
    for _ in 0..chunks {
        let mut weight = (-a).exp();
        let mut cum = weight;
        let mut term = cur.clone();
        let mut acc = &term * weight;
        let mut k = 1usize;
        while 1.0 - cum > SERIES_TAIL && k <= cap {
            term = p.tr_mul(&term);
            weight *= a / k as f64;
            acc.axpy(weight, &term, 1.0);
            cum += weight;
            k += 1;
        }
        cur = acc;
    }
    Ok(cur)
}
