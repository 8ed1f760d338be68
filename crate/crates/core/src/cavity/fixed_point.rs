//! Successive substitution on the cavity map `pi <- T(H(pi))`.

use super::blocks::assemble;
use super::engine::censored_stationary;
use super::rates::arrival_rates;
use super::{ArrivalRateTable, CavityDistribution, CavityError};
use crate::phasetype::PhaseTypeDist;
use crate::policies::{LayerGrid, Policy, PreparedPolicy};

#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    /// Convergence threshold on the l1 distance between iterates.
    pub tol: f64,
    pub max_iterations: usize,
    /// Starting buffer when adaptive.
    pub initial_buffer: usize,
    pub buffer_cap: usize,
    /// Pin the buffer and skip adaptation.
    pub fixed_buffer: Option<usize>,
    /// After the buffer grew mid-run, rerun once at the final size so the
    /// reported residual history reflects a fixed state space.
    pub clean_history: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 500,
            initial_buffer: 10,
            buffer_cap: 400,
            fixed_buffer: None,
            clean_history: true,
        }
    }
}

impl FixedPointOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_fixed_buffer(mut self, b: usize) -> Self {
        self.fixed_buffer = Some(b);
        self
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub pi: CavityDistribution,
    /// Rate table evaluated at the returned distribution.
    pub rates: ArrivalRateTable,
    pub iterations: usize,
    /// `||pi^(n) - pi^(n-1)||_1` per iteration.
    pub residuals: Vec<f64>,
    pub buffer: usize,
    /// Averaging damping was engaged after oscillation.
    pub damped: bool,
    /// Buffer cap reached while the tail conditions still failed.
    pub buffer_warning: bool,
    /// Grid the solver actually used (coarsened for layer-blind policies).
    pub grid: LayerGrid,
    solver_policy: Policy,
}

impl FixedPointResult {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }

    /// Policy resolved against the solver grid, for metric computations on
    /// `self.pi`.
    pub fn prepared(&self) -> PreparedPolicy {
        self.solver_policy
            .prepare(&self.grid)
            .expect("was prepared during the solve")
    }
}

/// Grid and policy the solver works with. Policies that read the layer only
/// through a single threshold (or not at all) are solved on the equivalent
/// coarse grid; scores, and therefore rates and marginal metrics, are
/// unchanged.
pub fn solver_view(policy: &Policy, grid: &LayerGrid) -> Result<(LayerGrid, Policy), CavityError> {
    Ok(match policy {
        Policy::Random => (LayerGrid::single_layer(), Policy::Random),
        Policy::Sq => (LayerGrid::single_layer(), Policy::Sq),
        Policy::Re { s } => (
            LayerGrid::from_thresholds(vec![grid.threshold(*s)])?,
            Policy::Re { s: 1 },
        ),
        Policy::SqRe { s } => (
            LayerGrid::from_thresholds(vec![grid.threshold(*s)])?,
            Policy::SqRe { s: 1 },
        ),
        other => (grid.clone(), other.clone()),
    })
}

const TAIL_MASS_LIMIT: f64 = 1e-12;
const TAIL_FLOW_FACTOR: f64 = 1e-11;

/// The buffer is adequate when the mass parked at the last level is
/// negligible and so is the probability flow that the truncation suppresses
/// (mass times arrival rate at the edge). A plain rate threshold does not
/// work here: a short-queue state keeps a non-vanishing rate at every level
/// because it wins whenever all other samples are in a worse class.
fn tail_too_heavy(
    pi: &CavityDistribution,
    rates: &ArrivalRateTable,
    lambda: f64,
    _d: usize,
) -> bool {
    if lambda == 0.0 {
        return false;
    }
    let b = pi.buffer();
    if pi.level_mass(b) >= TAIL_MASS_LIMIT {
        return true;
    }
    let truncated_flow: f64 = (1..=rates.r() + 1)
        .map(|k| pi.x(k, b - 1) * rates.rate(k, b - 1))
        .sum();
    truncated_flow >= TAIL_FLOW_FACTOR * lambda
}

fn grown(b: usize, cap: usize) -> usize {
    (b + 4).max(b * 3 / 2).min(cap)
}

/// Solves `pi = T(H(pi))` by plain successive substitution from the all-idle
/// start, adapting the queue-length buffer until the truncated tail is
/// negligible. Falls back to 0.5-averaged steps if the residual grows five
/// iterations in a row.
pub fn fixed_point(
    policy: &Policy,
    lambda: f64,
    ph: &PhaseTypeDist,
    grid: &LayerGrid,
    d: usize,
    opts: &FixedPointOptions,
) -> Result<FixedPointResult, CavityError> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(CavityError::UnstableLoad(lambda));
    }
    let (mean, _) = ph.moments()?;
    if (mean - 1.0).abs() > 1e-8 {
        return Err(CavityError::NonUnitMean(mean));
    }
    assert!(d >= 1, "need at least one choice");

    let (solver_grid, solver_policy) = solver_view(policy, grid)?;
    let prepared = solver_policy.prepare(&solver_grid)?;
    run(
        solver_policy.clone(),
        solver_grid,
        prepared,
        lambda,
        ph,
        d,
        opts,
    )
}

fn run(
    solver_policy: Policy,
    solver_grid: LayerGrid,
    prepared: PreparedPolicy,
    lambda: f64,
    ph: &PhaseTypeDist,
    d: usize,
    opts: &FixedPointOptions,
) -> Result<FixedPointResult, CavityError> {
    let m = ph.order();
    let r = solver_grid.r();
    let cap = opts.buffer_cap.max(2);
    let adaptive = opts.fixed_buffer.is_none();
    let mut b = opts
        .fixed_buffer
        .unwrap_or(opts.initial_buffer)
        .clamp(2, cap);

    let mut pi = CavityDistribution::all_idle(r, b, m);
    let mut residuals: Vec<f64> = Vec::new();
    let mut damped = false;
    let mut grew = false;
    let mut rises = 0usize;
    let mut prev_res = f64::INFINITY;

    let mut iteration = 0usize;
    while iteration < opts.max_iterations {
        iteration += 1;
        let rates = arrival_rates(&pi, &prepared, d, lambda);
        let solve = censored_stationary(ph, &solver_grid, &rates)?;
        let mut next = assemble(&solve.busy, lambda)?;
        if damped {
            next = pi.blend(&next, 0.5);
        }
        let res = next.l1_distance(&pi);
        residuals.push(res);
        pi = next;

        if res > prev_res {
            rises += 1;
            if rises >= 5 && !damped {
                damped = true;
                rises = 0;
            }
        } else {
            rises = 0;
        }
        prev_res = res;

        if adaptive && b < cap {
            let check_rates = arrival_rates(&pi, &prepared, d, lambda);
            if tail_too_heavy(&pi, &check_rates, lambda, d) {
                b = grown(b, cap);
                grew = true;
                pi = pi.pad_levels(b);
                prev_res = f64::INFINITY;
                continue;
            }
        }

        if res < opts.tol {
            let rates = arrival_rates(&pi, &prepared, d, lambda);
            let buffer_warning = tail_too_heavy(&pi, &rates, lambda, d);
            if grew && opts.clean_history {
                // rerun once at the final buffer for a history free of
                // resize jumps
                let mut fixed = opts.clone();
                fixed.fixed_buffer = Some(b);
                fixed.clean_history = false;
                return run(
                    solver_policy,
                    solver_grid,
                    prepared,
                    lambda,
                    ph,
                    d,
                    &fixed,
                );
            }
            return Ok(FixedPointResult {
                pi,
                rates,
                iterations: iteration,
                residuals,
                buffer: b,
                damped,
                buffer_warning,
                grid: solver_grid,
                solver_policy,
            });
        }
    }

    Err(CavityError::NonConvergence {
        iterations: opts.max_iterations,
        residual: prev_res,
        residuals,
    })
}
