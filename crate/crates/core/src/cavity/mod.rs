//! The large-system fixed point of the cavity map.
//!
//! A tagged queue receives Poisson arrivals at a rate that depends on its
//! queue length and the attained-service layer of the job in process, because
//! every potential arrival compares the tagged server's aversion score with
//! `d - 1` independent copies drawn from the tagged queue's own stationary
//! law. The `T` map computes the stationary law of the tagged queue from an
//! arrival-rate table; the `H` map computes the arrival rates back from the
//! stationary law. The solver iterates `pi <- T(H(pi))` to the fixed point.
//!
//! The stationary law comes from a discrete-time chain embedded at service
//! starts and layer crossings, with busy-state probabilities recovered from
//! expected sojourn times between observation points.

mod blocks;
mod engine;
mod fixed_point;
mod rates;

pub use blocks::{assemble, build_blocks, busy_censor, dtmc_steady, BusyDistribution, DtmcBlocks};
pub use fixed_point::{fixed_point, solver_view, FixedPointOptions, FixedPointResult};
pub use rates::{arrival_rates, order_stats, OrderStats};

pub(crate) use rates::potential_share;

use crate::numerics::NumericsError;
use crate::phasetype::PhaseTypeError;
use crate::policies::PolicyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CavityError {
    #[error("offered load must satisfy 0 <= lambda < 1, got {0}")]
    UnstableLoad(f64),
    #[error("the solver requires a unit-mean job-size law, got mean {0}")]
    NonUnitMean(f64),
    #[error("buffer size must be at least 2, got {0}")]
    BufferTooSmall(usize),
    #[error("rate table shaped for r = {table_r}, B = {table_b}; expected r = {r}, B = {b}")]
    ShapeMismatch {
        table_r: usize,
        table_b: usize,
        r: usize,
        b: usize,
    },
    #[error(
        "fixed point not reached after {iterations} iterations, last residual {residual:.3e}"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        residuals: Vec<f64>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    PhaseType(#[from] PhaseTypeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// State-dependent Poisson arrival rates `lambda_{k, ell}` for layers
/// `k = 1..=r+1` and queue lengths `ell = 1..=B`, with `lambda_{k, B} = 0`,
/// plus the idle rate `lambda_0` (not used by the busy-state chain).
#[derive(Debug, Clone)]
pub struct ArrivalRateTable {
    rates: Vec<f64>, // (r + 1) * b, row k-1, column ell-1
    idle_rate: f64,
    r: usize,
    b: usize,
}

impl ArrivalRateTable {
    pub(crate) fn zeros(r: usize, b: usize) -> Self {
        Self {
            rates: vec![0.0; (r + 1) * b],
            idle_rate: 0.0,
            r,
            b,
        }
    }

    /// Explicit table from a rate function over `(k, ell)`; the buffer column
    /// is forced to zero.
    pub fn from_rows(r: usize, b: usize, rate: impl Fn(usize, usize) -> f64) -> Self {
        let mut table = Self::zeros(r, b);
        for k in 1..=r + 1 {
            for ell in 1..=b - 1 {
                table.set_rate(k, ell, rate(k, ell));
            }
        }
        table
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn buffer(&self) -> usize {
        self.b
    }

    /// `lambda_{k, ell}`, `k` in `1..=r+1`, `ell` in `1..=B`.
    #[inline]
    pub fn rate(&self, k: usize, ell: usize) -> f64 {
        self.rates[(k - 1) * self.b + (ell - 1)]
    }

    pub(crate) fn set_rate(&mut self, k: usize, ell: usize, value: f64) {
        self.rates[(k - 1) * self.b + (ell - 1)] = value;
    }

    pub(crate) fn set_idle_rate(&mut self, value: f64) {
        self.idle_rate = value;
    }

    pub fn idle_rate(&self) -> f64 {
        self.idle_rate
    }

    /// Row `k` as a slice over queue lengths `1..=B`.
    pub(crate) fn row(&self, k: usize) -> &[f64] {
        &self.rates[(k - 1) * self.b..k * self.b]
    }

    pub fn max_rate(&self) -> f64 {
        self.rates.iter().fold(0.0f64, |a, &x| a.max(x))
    }

    /// True when every layer's rate is constant across queue lengths
    /// `1..=B-1`, as happens for policies that never read the queue length.
    pub fn level_independent(&self) -> bool {
        (1..=self.r + 1).all(|k| {
            let row = self.row(k);
            row[1..self.b - 1].iter().all(|&x| x == row[0])
        })
    }
}

/// Stationary law of the tagged queue: idle mass plus busy probabilities
/// `pi_{k, ell, j}` over layer, queue length, and service phase.
#[derive(Debug, Clone)]
pub struct CavityDistribution {
    idle: f64,
    busy: Vec<f64>, // ((k-1) * b + (ell-1)) * m + j
    r: usize,
    b: usize,
    m: usize,
}

impl CavityDistribution {
    pub fn all_idle(r: usize, b: usize, m: usize) -> Self {
        Self {
            idle: 1.0,
            busy: vec![0.0; (r + 1) * b * m],
            r,
            b,
            m,
        }
    }

    pub(crate) fn from_parts(idle: f64, busy: Vec<f64>, r: usize, b: usize, m: usize) -> Self {
        debug_assert_eq!(busy.len(), (r + 1) * b * m);
        Self { idle, busy, r, b, m }
    }

    pub fn idle(&self) -> f64 {
        self.idle
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn buffer(&self) -> usize {
        self.b
    }

    pub fn phases(&self) -> usize {
        self.m
    }

    /// `pi_{k, ell, j}` with `k` in `1..=r+1`, `ell` in `1..=B`, `j` in `0..m`.
    #[inline]
    pub fn busy_prob(&self, k: usize, ell: usize, j: usize) -> f64 {
        self.busy[((k - 1) * self.b + (ell - 1)) * self.m + j]
    }

    /// Marginal `x_{k, ell}` over phases.
    pub fn x(&self, k: usize, ell: usize) -> f64 {
        let base = ((k - 1) * self.b + (ell - 1)) * self.m;
        self.busy[base..base + self.m].iter().sum()
    }

    /// Probability of queue length `ell` regardless of layer (`ell >= 1`).
    pub fn level_mass(&self, ell: usize) -> f64 {
        (1..=self.r + 1).map(|k| self.x(k, ell)).sum()
    }

    /// `P(queue length >= ell)`; `ell = 1` gives the busy probability.
    pub fn queue_tail(&self, ell: usize) -> f64 {
        (ell..=self.b).map(|l| self.level_mass(l)).sum()
    }

    pub fn total(&self) -> f64 {
        self.idle + self.busy.iter().sum::<f64>()
    }

    /// `E[Q] = sum ell pi_{k, ell, j}`.
    pub fn expected_queue(&self) -> f64 {
        (1..=self.b)
            .map(|ell| ell as f64 * self.level_mass(ell))
            .sum()
    }

    /// l1 distance, treating levels beyond either buffer as zero mass.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.r, other.r);
        debug_assert_eq!(self.m, other.m);
        let mut total = (self.idle - other.idle).abs();
        for k in 1..=self.r + 1 {
            for ell in 1..=self.b.max(other.b) {
                for j in 0..self.m {
                    let a = if ell <= self.b {
                        self.busy_prob(k, ell, j)
                    } else {
                        0.0
                    };
                    let b = if ell <= other.b {
                        other.busy_prob(k, ell, j)
                    } else {
                        0.0
                    };
                    total += (a - b).abs();
                }
            }
        }
        total
    }

    /// Same distribution with the buffer extended to `new_b` levels.
    pub(crate) fn pad_levels(&self, new_b: usize) -> Self {
        assert!(new_b >= self.b);
        let mut busy = vec![0.0; (self.r + 1) * new_b * self.m];
        for k in 1..=self.r + 1 {
            for ell in 1..=self.b {
                for j in 0..self.m {
                    busy[((k - 1) * new_b + (ell - 1)) * self.m + j] =
                        self.busy_prob(k, ell, j);
                }
            }
        }
        Self {
            idle: self.idle,
            busy,
            r: self.r,
            b: new_b,
            m: self.m,
        }
    }

    pub(crate) fn blend(&self, other: &Self, weight_other: f64) -> Self {
        debug_assert_eq!(self.b, other.b);
        let busy = self
            .busy
            .iter()
            .zip(other.busy.iter())
            .map(|(a, b)| a * (1.0 - weight_other) + b * weight_other)
            .collect();
        Self {
            idle: self.idle * (1.0 - weight_other) + other.idle * weight_other,
            busy,
            r: self.r,
            b: self.b,
            m: self.m,
        }
    }
}
