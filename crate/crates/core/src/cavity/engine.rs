//! Structure-exploiting evaluation of the `T` map.
//!
//! Three observations keep this cheap without changing the mathematics of
//! the dense blocks:
//!
//! * `F^{(k)} = I_B (x) A + L_k (x) I_m` with `L_k` bidiagonal, so applying
//!   `e^{F t}` or its integral to a row vector needs only per-level `m x m`
//!   products inside a uniformization series; nothing of size `(mB)^2` is
//!   ever formed.
//! * Every service start draws its phase fresh from `alpha`, so the
//!   stationary layer-0 vector is `c (x) alpha` for some queue-length
//!   distribution `c`, and the balance equation collapses to a `B x B`
//!   stochastic system: one sweep per start level builds its matrix.
//! * When the rate table does not depend on the queue length, the number of
//!   admitted arrivals during one service has the same law from every start
//!   level, so a single sweep yields the whole matrix.
//!
//! The open top layer uses the block-bidiagonal solve
//! `x (-F^{(r+1)}) = w` instead of a series.

use super::blocks::BusyDistribution;
use super::{ArrivalRateTable, CavityError};
use crate::numerics;
use crate::phasetype::PhaseTypeDist;
use crate::policies::LayerGrid;
use nalgebra::{DMatrix, DVector};

const SERIES_TAIL: f64 = 1e-17;
const MAX_CHUNK_ARG: f64 = 256.0;

pub(crate) struct CensoredSolve {
    pub busy: BusyDistribution,
    /// Queue-length distribution at service starts.
    #[allow(dead_code)] // exercised by the cross-check tests
    pub start_levels: DVector<f64>,
}

/// Busy-conditional stationary law for a fixed rate table.
pub(crate) fn censored_stationary(
    ph: &PhaseTypeDist,
    grid: &LayerGrid,
    rates: &ArrivalRateTable,
) -> Result<CensoredSolve, CavityError> {
    let engine = Engine::new(ph, grid, rates)?;
    let m_matrix = if rates.level_independent() {
        engine.return_map_from_count_law()
    } else {
        engine.return_map_from_sweeps()
    };
    let start_levels = numerics::stationary(&m_matrix)?;

    // final pass: censored sojourn masses from pi_hat^(0) = c (x) alpha
    let mb = engine.m * engine.b;
    let mut start = vec![0.0; mb];
    for ell in 0..engine.b {
        for j in 0..engine.m {
            start[ell * engine.m + j] = start_levels[ell] * engine.alpha[j];
        }
    }
    let out = engine.sweep(start, 1, true);
    let busy = BusyDistribution::from_unnormalized(
        out.censored.expect("requested"),
        engine.r,
        engine.b,
        engine.m,
    );
    Ok(CensoredSolve { busy, start_levels })
}

struct SweepOutput {
    /// Completion-level mass per column: `[col * b + level]`.
    completion: Vec<f64>,
    /// Censored sojourn masses `(k, ell, j)`; only kept for single-column sweeps.
    censored: Option<Vec<f64>>,
}

struct Engine<'a> {
    m: usize,
    b: usize,
    r: usize,
    /// `A` transposed, row-major: `at[j' * m + j] = A[j][j']`.
    at: Vec<f64>,
    alpha: Vec<f64>,
    exit: Vec<f64>,
    widths: Vec<f64>,
    max_service_rate: f64,
    rates: &'a ArrivalRateTable,
}

impl<'a> Engine<'a> {
    fn new(
        ph: &PhaseTypeDist,
        grid: &LayerGrid,
        rates: &'a ArrivalRateTable,
    ) -> Result<Self, CavityError> {
        let m = ph.order();
        let r = grid.r();
        let b = rates.buffer();
        if b < 2 {
            return Err(CavityError::BufferTooSmall(b));
        }
        if rates.r() != r {
            return Err(CavityError::ShapeMismatch {
                table_r: rates.r(),
                table_b: rates.buffer(),
                r,
                b,
            });
        }
        let a = ph.subgenerator();
        let mut at = vec![0.0; m * m];
        for jp in 0..m {
            for j in 0..m {
                at[jp * m + j] = a[(j, jp)];
            }
        }
        let max_service_rate = a.diagonal().iter().fold(0.0f64, |acc, &d| acc.max(-d));
        Ok(Self {
            m,
            b,
            r,
            at,
            alpha: ph.initial().as_slice().to_vec(),
            exit: ph.exit_rates().as_slice().to_vec(),
            widths: (1..=r).map(|k| grid.width(k)).collect(),
            max_service_rate,
            rates,
        })
    }

    /// `out = (I + F^T / q) z` per column, with `F = I (x) A + L (x) I`.
    fn apply_uniformized(&self, lam: &[f64], q: f64, z: &[f64], out: &mut [f64], ncols: usize) {
        let (m, b) = (self.m, self.b);
        let mb = m * b;
        let inv_q = 1.0 / q;
        for c in 0..ncols {
            let col = &z[c * mb..(c + 1) * mb];
            let out_col = &mut out[c * mb..(c + 1) * mb];
            for ell in 0..b {
                let blk = &col[ell * m..(ell + 1) * m];
                let keep = 1.0 - lam[ell] * inv_q;
                let prev_rate = if ell > 0 { lam[ell - 1] * inv_q } else { 0.0 };
                for jp in 0..m {
                    let mut acc = 0.0;
                    let row = &self.at[jp * m..(jp + 1) * m];
                    for j in 0..m {
                        acc += row[j] * blk[j];
                    }
                    let mut v = blk[jp] * keep + acc * inv_q;
                    if ell > 0 {
                        v += prev_rate * col[(ell - 1) * m + jp];
                    }
                    out_col[ell * m + jp] = v;
                }
            }
        }
    }

    /// Propagates a stack of row vectors through every layer, accumulating
    /// the expected sojourn masses (`w Psi^{(k)}`) and the completion-level
    /// distribution; the stack itself advances by `w <- w Lambda^{(k)}`.
    fn sweep(&self, stack: Vec<f64>, ncols: usize, keep_censored: bool) -> SweepOutput {
        let (m, b) = (self.m, self.b);
        let mb = m * b;
        let mut z = stack;
        let mut completion = vec![0.0; b * ncols];
        let mut censored = keep_censored.then(|| vec![0.0; (self.r + 1) * mb]);

        let mut term = vec![0.0; mb * ncols];
        let mut term_next = vec![0.0; mb * ncols];
        let mut expm_acc = vec![0.0; mb * ncols];
        let mut psi_acc = vec![0.0; mb * ncols];

        for k in 1..=self.r {
            let lam = self.rates.row(k);
            let q = self.max_service_rate
                + lam.iter().fold(0.0f64, |a, &x| a.max(x))
                + 1e-9;
            let width = self.widths[k - 1];
            let chunks = ((q * width / MAX_CHUNK_ARG).ceil() as usize).max(1);
            let tau = width / chunks as f64;
            let arg = q * tau;
            let cap = (arg + 12.0 * arg.sqrt() + 60.0) as usize;

            psi_acc.iter_mut().for_each(|v| *v = 0.0);
            for _ in 0..chunks {
                term.copy_from_slice(&z);
                let mut weight = (-arg).exp();
                let mut tail = (1.0 - weight).max(0.0);
                for (e, (&t, p)) in expm_acc
                    .iter_mut()
                    .zip(term.iter().zip(psi_acc.iter_mut()))
                {
                    *e = weight * t;
                    *p += tail / q * t;
                }
                let mut n = 1usize;
                while tail > SERIES_TAIL && n <= cap {
                    self.apply_uniformized(lam, q, &term, &mut term_next, ncols);
                    std::mem::swap(&mut term, &mut term_next);
                    weight *= arg / n as f64;
                    tail = (tail - weight).max(0.0);
                    for (e, (&t, p)) in expm_acc
                        .iter_mut()
                        .zip(term.iter().zip(psi_acc.iter_mut()))
                    {
                        *e += weight * t;
                        *p += tail / q * t;
                    }
                    n += 1;
                }
                z.copy_from_slice(&expm_acc);
            }

            self.accumulate_completions(&psi_acc, ncols, &mut completion);
            if let Some(store) = censored.as_mut() {
                store[(k - 1) * mb..k * mb].copy_from_slice(&psi_acc);
            }
        }

        // open top layer: w (-F)^{-1} by forward block substitution
        let top = self.solve_top_layer(&z, ncols);
        self.accumulate_completions(&top, ncols, &mut completion);
        if let Some(store) = censored.as_mut() {
            store[self.r * mb..(self.r + 1) * mb].copy_from_slice(&top);
        }

        SweepOutput {
            completion,
            censored,
        }
    }

    fn accumulate_completions(&self, masses: &[f64], ncols: usize, completion: &mut [f64]) {
        let (m, b) = (self.m, self.b);
        let mb = m * b;
        for c in 0..ncols {
            for ell in 0..b {
                let blk = &masses[c * mb + ell * m..c * mb + (ell + 1) * m];
                let mut acc = 0.0;
                for j in 0..m {
                    acc += blk[j] * self.exit[j];
                }
                completion[c * b + ell] += acc;
            }
        }
    }

    /// Solves `x (-F^{(r+1)}) = w` per column: level by level,
    /// `(-A^T + lam_l I) x_l = w_l + lam_{l-1} x_{l-1}`.
    fn solve_top_layer(&self, z: &[f64], ncols: usize) -> Vec<f64> {
        let (m, b) = (self.m, self.b);
        let mb = m * b;
        let lam = self.rates.row(self.r + 1);
        let factors: Vec<_> = (0..b)
            .map(|ell| {
                let mut mat = DMatrix::zeros(m, m);
                for jp in 0..m {
                    for j in 0..m {
                        mat[(jp, j)] = -self.at[jp * m + j];
                    }
                    mat[(jp, jp)] += lam[ell];
                }
                mat.lu()
            })
            .collect();

        let mut out = vec![0.0; mb * ncols];
        let mut rhs = DVector::zeros(m);
        for c in 0..ncols {
            for ell in 0..b {
                for j in 0..m {
                    rhs[j] = z[c * mb + ell * m + j];
                    if ell > 0 {
                        rhs[j] += lam[ell - 1] * out[c * mb + (ell - 1) * m + j];
                    }
                }
                let solved = factors[ell].solve_mut(&mut rhs);
                debug_assert!(solved, "top layer factor must be nonsingular");
                for j in 0..m {
                    out[c * mb + ell * m + j] = rhs[j].max(0.0);
                }
            }
        }
        out
    }

    /// Return map between consecutive service starts, one sweep per start
    /// level.
    fn return_map_from_sweeps(&self) -> DMatrix<f64> {
        let (m, b) = (self.m, self.b);
        let mb = m * b;
        let mut stack = vec![0.0; mb * b];
        for level in 0..b {
            for j in 0..m {
                stack[level * mb + level * m + j] = self.alpha[j];
            }
        }
        let out = self.sweep(stack, b, false);
        let mut map = DMatrix::zeros(b, b);
        for start in 0..b {
            for ell in 0..b {
                let next = if ell == 0 { 0 } else { ell - 1 };
                map[(start, next)] += out.completion[start * b + ell];
            }
        }
        map
    }

    /// Return map when arrival rates ignore the queue length: the admitted
    /// arrival count during one service is level-independent, so the law
    /// from start level 1 determines every row after shifting and capping at
    /// the buffer.
    fn return_map_from_count_law(&self) -> DMatrix<f64> {
        let (m, b) = (self.m, self.b);
        let mb = m * b;
        let mut start = vec![0.0; mb];
        start[..m].copy_from_slice(&self.alpha);
        let out = self.sweep(start, 1, false);
        // arrivals[i] = P(i admitted arrivals), exact for i <= b - 2
        let arrivals = &out.completion;

        let mut map = DMatrix::zeros(b, b);
        for start_level in 0..b {
            let free = b - 1 - start_level; // admitted arrivals before the buffer fills
            let mut rest = 1.0;
            for i in 0..free {
                let next = if start_level == 0 && i == 0 {
                    0
                } else {
                    start_level + i - 1
                };
                map[(start_level, next)] += arrivals[i];
                rest -= arrivals[i];
            }
            map[(start_level, b - 2)] += rest.max(0.0);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavity::blocks::{build_blocks, busy_censor, dtmc_steady};
    use crate::cavity::{arrival_rates, CavityDistribution};
    use crate::phasetype::fit_merlang;
    use crate::policies::Policy;
    use approx::assert_abs_diff_eq;

    fn engine_vs_blocks(
        ph: &PhaseTypeDist,
        grid: &LayerGrid,
        rates: &ArrivalRateTable,
        b: usize,
    ) {
        let solve = censored_stationary(ph, grid, rates).unwrap();
        let blocks = build_blocks(rates, ph, grid, b).unwrap();
        let pihat = dtmc_steady(&blocks).unwrap();
        let busy = busy_censor(&pihat, &blocks);
        for k in 1..=grid.r() + 1 {
            for ell in 1..=b {
                for j in 0..ph.order() {
                    assert_abs_diff_eq!(
                        solve.busy.prob(k, ell, j),
                        busy.prob(k, ell, j),
                        epsilon = 1e-11
                    );
                }
            }
        }
        // layer-0 stationary vector factorizes as c (x) alpha
        let total = pihat[0].sum();
        for ell in 0..b {
            for j in 0..ph.order() {
                assert_abs_diff_eq!(
                    pihat[0][ell * ph.order() + j] / total,
                    solve.start_levels[ell] * ph.initial()[j],
                    epsilon = 1e-11
                );
            }
        }
    }

    #[test]
    fn matches_dense_blocks_on_level_dependent_rates() {
        let ph = fit_merlang(8.0, 0.4, 2).unwrap();
        let grid = LayerGrid::uniform(0.6, 3).unwrap();
        let b = 5;
        let prepared = Policy::SqRtb.prepare(&grid).unwrap();
        let mut pi = CavityDistribution::all_idle(3, b, ph.order());
        pi.idle = 0.35;
        let n = pi.busy.len();
        for (i, v) in pi.busy.iter_mut().enumerate() {
            *v = 0.65 * 2.0 * (n - i) as f64 / (n * (n + 1)) as f64;
        }
        let rates = arrival_rates(&pi, &prepared, 4, 0.75);
        assert!(!rates.level_independent());
        engine_vs_blocks(&ph, &grid, &rates, b);
    }

    #[test]
    fn matches_dense_blocks_on_level_independent_rates() {
        let ph = fit_merlang(10.0, 0.5, 1).unwrap();
        let grid = LayerGrid::uniform(0.8, 2).unwrap();
        let b = 6;
        let prepared = Policy::Las.prepare(&grid).unwrap();
        let mut pi = CavityDistribution::all_idle(2, b, ph.order());
        pi.idle = 0.3;
        let n = pi.busy.len();
        for (i, v) in pi.busy.iter_mut().enumerate() {
            *v = 0.7 * 2.0 * (i + 1) as f64 / (n * (n + 1)) as f64;
        }
        let rates = arrival_rates(&pi, &prepared, 3, 0.6);
        assert!(rates.level_independent());
        engine_vs_blocks(&ph, &grid, &rates, b);

        // the generic sweep path must agree with the count-law shortcut
        let engine = Engine::new(&ph, &grid, &rates).unwrap();
        let a = engine.return_map_from_count_law();
        let b_map = engine.return_map_from_sweeps();
        for (x, y) in a.iter().zip(b_map.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-11);
        }
    }

    #[test]
    fn single_infinite_layer_birth_death() {
        // the hand-checked two-state example again, through the fast path
        let lam = 0.6;
        let ph = PhaseTypeDist::exponential(1.0);
        let grid = LayerGrid::single_layer();
        let mut rates = ArrivalRateTable::zeros(0, 2);
        rates.set_rate(1, 1, lam);
        let solve = censored_stationary(&ph, &grid, &rates).unwrap();
        assert_abs_diff_eq!(solve.start_levels[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(solve.busy.prob(1, 1, 0), 1.0 / (1.0 + lam), epsilon = 1e-12);
        assert_abs_diff_eq!(solve.busy.prob(1, 2, 0), lam / (1.0 + lam), epsilon = 1e-12);
    }

    #[test]
    fn wide_layers_need_chunked_series() {
        // layer width pushes q*t well past one chunk
        let ph = fit_merlang(15.0, 0.3, 1).unwrap();
        let grid = LayerGrid::from_thresholds(vec![90.0]).unwrap();
        let b = 4;
        let mut rates = ArrivalRateTable::zeros(1, b);
        for k in 1..=2 {
            for ell in 1..=b - 1 {
                rates.set_rate(k, ell, 0.9);
            }
        }
        engine_vs_blocks(&ph, &grid, &rates, b);
    }
}
