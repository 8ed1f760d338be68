//! Phase-type job-size distributions.
//!
//! A distribution of order `m` is given by an initial probability row vector
//! `alpha` and an `m x m` subgenerator `A`; the exit-rate vector is
//! `mu = -A 1`. Job size is the time to absorption of the underlying Markov
//! chain. The survival function is `alpha e^{Ax} 1`.
//!
//! The mixed-Erlang family used throughout fixes an Erlang phase count `k`
//! per branch and matches three quantities: unit mean, a target squared
//! coefficient of variation, and the fraction `f` of total work brought by
//! the short-job branch.

use crate::numerics::{self, NumericsError};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

/// Default cap on the order of an explicit convolution representation.
pub const DEFAULT_CONVOLUTION_CAP: usize = 4096;

const VALIDATE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PhaseTypeError {
    #[error("initial vector and subgenerator dimensions disagree")]
    DimensionMismatch,
    #[error("initial probabilities must be nonnegative and sum to one")]
    BadInitialVector,
    #[error("subgenerator must have nonnegative off-diagonal, negative diagonal, row sums <= 0")]
    BadSubgenerator,
    #[error("absorption is not certain (-A is singular)")]
    NotAbsorbing,
    #[error("workload fraction f must lie strictly inside (0, 1), got {0}")]
    BadWorkloadFraction(f64),
    #[error("phase count k must be at least 1")]
    BadPhaseCount,
    #[error("no mixed-Erlang fit exists: adjusted scv {scv_adj:.6} below 1 (scv must be >= 1/k)")]
    InfeasibleFit { scv_adj: f64 },
    #[error("survival underflows to zero at {at}; residual undefined")]
    VanishingSurvival { at: f64 },
    #[error("phase index {index} out of range for order {order}")]
    BadPhase { index: usize, order: usize },
    #[error("convolution order {requested} exceeds cap {cap}")]
    ConvolutionTooLarge { requested: usize, cap: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Phase-type distribution `(alpha, A)` with exit rates `mu = -A 1`.
#[derive(Debug, Clone)]
pub struct PhaseTypeDist {
    alpha: DVector<f64>,
    subgen: DMatrix<f64>,
    exit: DVector<f64>,
}

impl PhaseTypeDist {
    pub fn new(alpha: DVector<f64>, subgen: DMatrix<f64>) -> Result<Self, PhaseTypeError> {
        if subgen.nrows() != subgen.ncols() || alpha.len() != subgen.nrows() || alpha.is_empty() {
            return Err(PhaseTypeError::DimensionMismatch);
        }
        if alpha.iter().any(|&a| a < -VALIDATE_TOL || !a.is_finite())
            || (alpha.sum() - 1.0).abs() > VALIDATE_TOL
        {
            return Err(PhaseTypeError::BadInitialVector);
        }
        if !numerics::is_subgenerator(&subgen, VALIDATE_TOL) {
            return Err(PhaseTypeError::BadSubgenerator);
        }
        if subgen.diagonal().iter().any(|&d| d >= -VALIDATE_TOL) {
            return Err(PhaseTypeError::BadSubgenerator);
        }
        let exit = -(&subgen * DVector::from_element(subgen.nrows(), 1.0));
        let dist = Self {
            alpha,
            subgen,
            exit,
        };
        // absorption must be certain
        dist.mean_vector()?;
        Ok(dist)
    }

    pub fn exponential(rate: f64) -> Self {
        assert!(rate > 0.0);
        Self::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, -rate),
        )
        .expect("exponential is a valid phase-type distribution")
    }

    /// Erlang distribution with `k` phases of rate `rate` each (mean `k/rate`).
    pub fn erlang(k: usize, rate: f64) -> Self {
        assert!(k >= 1 && rate > 0.0);
        let mut a = DMatrix::zeros(k, k);
        for i in 0..k {
            a[(i, i)] = -rate;
            if i + 1 < k {
                a[(i, i + 1)] = rate;
            }
        }
        let mut alpha = DVector::zeros(k);
        alpha[0] = 1.0;
        Self::new(alpha, a).expect("erlang is a valid phase-type distribution")
    }

    pub fn order(&self) -> usize {
        self.alpha.len()
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn subgenerator(&self) -> &DMatrix<f64> {
        &self.subgen
    }

    /// Exit rates `mu = -A 1`.
    pub fn exit_rates(&self) -> &DVector<f64> {
        &self.exit
    }

    /// Expected time to absorption from each phase: `(-A)^{-1} 1`.
    pub fn mean_vector(&self) -> Result<DVector<f64>, PhaseTypeError> {
        let ones = DVector::from_element(self.order(), 1.0);
        (-&self.subgen)
            .lu()
            .solve(&ones)
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .ok_or(PhaseTypeError::NotAbsorbing)
    }

    /// `(mean, scv)` where `mean = alpha (-A)^{-1} 1` and
    /// `scv = 2 alpha (-A)^{-2} 1 / mean^2 - 1`.
    pub fn moments(&self) -> Result<(f64, f64), PhaseTypeError> {
        let m1_vec = self.mean_vector()?;
        let mean = self.alpha.dot(&m1_vec);
        let m2_vec = (-&self.subgen)
            .lu()
            .solve(&m1_vec)
            .ok_or(PhaseTypeError::NotAbsorbing)?;
        let second = 2.0 * self.alpha.dot(&m2_vec);
        let scv = second / (mean * mean) - 1.0;
        Ok((mean, scv))
    }

    pub fn mean(&self) -> f64 {
        let (mean, _) = self.moments().expect("validated at construction");
        mean
    }

    /// `P(X > x) = alpha e^{Ax} 1`.
    pub fn survival(&self, x: f64) -> f64 {
        assert!(x >= 0.0 && x.is_finite(), "survival needs x >= 0, got {x}");
        let row = numerics::expm_apply_row(&self.alpha, &self.subgen, x)
            .expect("validated at construction");
        row.sum().clamp(0.0, 1.0)
    }

    /// Mean residual life `E[X - c | X >= c]`.
    pub fn residual_mean(&self, c: f64) -> Result<f64, PhaseTypeError> {
        assert!(c >= 0.0 && c.is_finite());
        let beta = numerics::expm_apply_row(&self.alpha, &self.subgen, c)?;
        let total = beta.sum();
        if total <= 0.0 {
            return Err(PhaseTypeError::VanishingSurvival { at: c });
        }
        let m1_vec = self.mean_vector()?;
        Ok(beta.dot(&m1_vec) / total)
    }

    /// Representation of `X_j + X_1 + ... + X_copies`: the remaining service
    /// started in phase `start_phase` (0-based) followed by `copies` full
    /// independent draws.
    ///
    /// Block bidiagonal of order `(copies + 1) * m`: diagonal blocks `A`,
    /// superdiagonal blocks `mu alpha`.
    pub fn convolution_rep(
        &self,
        start_phase: usize,
        copies: usize,
    ) -> Result<PhaseTypeDist, PhaseTypeError> {
        self.convolution_rep_capped(start_phase, copies, DEFAULT_CONVOLUTION_CAP)
    }

    pub fn convolution_rep_capped(
        &self,
        start_phase: usize,
        copies: usize,
        cap: usize,
    ) -> Result<PhaseTypeDist, PhaseTypeError> {
        let m = self.order();
        if start_phase >= m {
            return Err(PhaseTypeError::BadPhase {
                index: start_phase,
                order: m,
            });
        }
        let blocks = copies + 1;
        let n = blocks * m;
        if n > cap {
            return Err(PhaseTypeError::ConvolutionTooLarge { requested: n, cap });
        }
        let mut a = DMatrix::zeros(n, n);
        for b in 0..blocks {
            let off = b * m;
            for i in 0..m {
                for j in 0..m {
                    a[(off + i, off + j)] = self.subgen[(i, j)];
                }
                if b + 1 < blocks {
                    for j in 0..m {
                        a[(off + i, off + m + j)] = self.exit[i] * self.alpha[j];
                    }
                }
            }
        }
        let mut alpha = DVector::zeros(n);
        alpha[start_phase] = 1.0;
        PhaseTypeDist::new(alpha, a)
    }

    /// One draw by simulating the phase process.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = self.order();
        // initial phase ~ alpha
        let mut u: f64 = rng.gen::<f64>() * self.alpha.sum();
        let mut phase = m - 1;
        for j in 0..m {
            u -= self.alpha[j];
            if u <= 0.0 {
                phase = j;
                break;
            }
        }
        let mut total = 0.0;
        loop {
            let hold = -self.subgen[(phase, phase)];
            total -= rng.gen::<f64>().ln() / hold;
            let mut pick: f64 = rng.gen::<f64>() * hold;
            pick -= self.exit[phase];
            if pick <= 0.0 {
                return total;
            }
            let mut next = phase;
            for j in 0..m {
                if j == phase {
                    continue;
                }
                pick -= self.subgen[(phase, j)];
                if pick <= 0.0 {
                    next = j;
                    break;
                }
            }
            phase = next;
        }
    }
}

/// Mixed-Erlang parameters matched to `(mean 1, scv, f)` for a fixed per-branch
/// phase count `k`.
///
/// With probability `p` a job is Erlang(`k`, `k mu1`), otherwise
/// Erlang(`k`, `k mu2`); `f = p / mu1` is the fraction of work brought by the
/// short branch. `k = 1` is the hyperexponential case.
#[derive(Debug, Clone, Copy)]
pub struct MErlangSpec {
    pub scv: f64,
    pub f: f64,
    pub k: usize,
    pub p: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl MErlangSpec {
    pub fn fit(scv: f64, f: f64, k: usize) -> Result<Self, PhaseTypeError> {
        if !(f > 0.0 && f < 1.0) || !f.is_finite() {
            return Err(PhaseTypeError::BadWorkloadFraction(f));
        }
        if k < 1 {
            return Err(PhaseTypeError::BadPhaseCount);
        }
        // reduce to a hyperexponential fit at the k-adjusted scv
        let scv_adj = 2.0 * (scv + 1.0) / (1.0 + 1.0 / k as f64) - 1.0;
        if scv_adj < 1.0 - 1e-12 {
            return Err(PhaseTypeError::InfeasibleFit { scv_adj });
        }
        let disc = (scv_adj - 1.0) * (scv_adj - 1.0 + 8.0 * f * (1.0 - f));
        if disc < 0.0 {
            return Err(PhaseTypeError::InfeasibleFit { scv_adj });
        }
        let mu1 = (scv_adj + 4.0 * f - 1.0 + disc.sqrt()) / (2.0 * f * (scv_adj + 1.0));
        let p = mu1 * f;
        // the mean and workload constraints pin mu2 once (p, mu1) are fixed
        let mu2 = (1.0 - p) / (1.0 - f);
        Ok(Self {
            scv,
            f,
            k,
            p,
            mu1,
            mu2,
        })
    }

    /// Mean size of a short-branch job, `1 / mu1`.
    pub fn small_job_mean(&self) -> f64 {
        1.0 / self.mu1
    }

    /// Order `2k` representation: short branch in phases `0..k`, long branch
    /// in phases `k..2k`.
    pub fn to_phase_type(&self) -> PhaseTypeDist {
        let k = self.k;
        let n = 2 * k;
        let mut a = DMatrix::zeros(n, n);
        let r1 = k as f64 * self.mu1;
        let r2 = k as f64 * self.mu2;
        for i in 0..k {
            a[(i, i)] = -r1;
            if i + 1 < k {
                a[(i, i + 1)] = r1;
            }
            a[(k + i, k + i)] = -r2;
            if i + 1 < k {
                a[(k + i, k + i + 1)] = r2;
            }
        }
        let mut alpha = DVector::zeros(n);
        alpha[0] = self.p;
        alpha[k] = 1.0 - self.p;
        PhaseTypeDist::new(alpha, a).expect("fitted representation is valid")
    }
}

/// Fits a mixed-Erlang job-size law with unit mean, the given `scv`, and
/// short-branch workload fraction `f`, using `k` Erlang phases per branch.
pub fn fit_merlang(scv: f64, f: f64, k: usize) -> Result<PhaseTypeDist, PhaseTypeError> {
    Ok(MErlangSpec::fit(scv, f, k)?.to_phase_type())
}
