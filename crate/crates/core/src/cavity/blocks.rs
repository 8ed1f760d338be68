//! Explicit block matrices of the embedded chain.
//!
//! States `(k, ell, j)` are observed whenever the attained service time
//! crosses a threshold `c_k` (with `k = 0` at service starts). Ordered
//! lexicographically, the transition matrix has first block column
//! `Xi^{(k)} = Psi^{(k)} G` (completion before the next threshold) and
//! superdiagonal blocks `Lambda^{(k)}` (service continues into the next
//! layer). The first balance equation reduces to a single stochastic matrix
//! `Omega^{(1)}` via the backward recursion
//! `Omega^{(k)} = Psi^{(k)} G + Lambda^{(k)} Omega^{(k+1)}`.
//!
//! This module materializes everything densely; it is the reference
//! implementation that the solver's structured path is checked against, and
//! it is what small-scale tests and oracles use.

use super::{ArrivalRateTable, CavityDistribution, CavityError};
use crate::numerics;
use crate::phasetype::PhaseTypeDist;
use crate::policies::LayerGrid;
use nalgebra::{DMatrix, DVector};

/// Dense blocks of the embedded chain, plus the collapsed return map.
#[derive(Debug, Clone)]
pub struct DtmcBlocks {
    /// Completion map `G = (I_B (x) mu)(S (x) alpha)`.
    pub g: DMatrix<f64>,
    /// Layer generators `F^{(k)}`, `k = 1..=r+1`.
    pub f: Vec<DMatrix<f64>>,
    /// `Lambda^{(k)} = e^{F^{(k)} width_k}`; the open layer `r+1` has
    /// `Lambda^{(r+1)} = 0`.
    pub lambda: Vec<DMatrix<f64>>,
    /// `Psi^{(k)} = int_0^{width_k} e^{F^{(k)} s} ds`; layer `r+1` integrates
    /// to infinity.
    pub psi: Vec<DMatrix<f64>>,
    /// Return map to layer 0; stochastic.
    pub omega1: DMatrix<f64>,
    pub m: usize,
    pub b: usize,
    pub r: usize,
}

/// Queue-decrement map `ell -> max(ell - 1, 1)` as a `B x B` matrix.
fn decrement_matrix(b: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(b, b);
    s[(0, 0)] = 1.0;
    for ell in 1..b {
        s[(ell, ell - 1)] = 1.0;
    }
    s
}

fn birth_matrix(rates: &ArrivalRateTable, k: usize) -> DMatrix<f64> {
    let b = rates.buffer();
    let mut l = DMatrix::zeros(b, b);
    for ell in 0..b {
        let rate = rates.rate(k, ell + 1);
        l[(ell, ell)] = -rate;
        if ell + 1 < b {
            l[(ell, ell + 1)] = rate;
        }
    }
    l
}

/// Builds every block of the embedded chain for a given rate table.
pub fn build_blocks(
    rates: &ArrivalRateTable,
    ph: &PhaseTypeDist,
    grid: &LayerGrid,
    b: usize,
) -> Result<DtmcBlocks, CavityError> {
    let m = ph.order();
    let r = grid.r();
    if b < 2 {
        return Err(CavityError::BufferTooSmall(b));
    }
    if rates.r() != r || rates.buffer() != b {
        return Err(CavityError::ShapeMismatch {
            table_r: rates.r(),
            table_b: rates.buffer(),
            r,
            b,
        });
    }
    if rates.row(r + 1).last().copied().unwrap_or(0.0) != 0.0 {
        // the chain is only finite because arrivals stop at the buffer
        return Err(CavityError::ShapeMismatch {
            table_r: rates.r(),
            table_b: rates.buffer(),
            r,
            b,
        });
    }

    let alpha_row = DMatrix::from_fn(1, m, |_, j| ph.initial()[j]);
    let mu_col = DMatrix::from_fn(m, 1, |j, _| ph.exit_rates()[j]);
    let s = decrement_matrix(b);
    let g = DMatrix::identity(b, b).kronecker(&mu_col) * s.kronecker(&alpha_row);

    let identity_b = DMatrix::<f64>::identity(b, b);
    let identity_m = DMatrix::<f64>::identity(m, m);
    let mut f = Vec::with_capacity(r + 1);
    let mut lambda = Vec::with_capacity(r + 1);
    let mut psi = Vec::with_capacity(r + 1);
    for k in 1..=r + 1 {
        let fk = identity_b.kronecker(ph.subgenerator()) + birth_matrix(rates, k).kronecker(&identity_m);
        let (lam, ps) = if k <= r {
            let width = grid.width(k);
            (
                numerics::expm_sub(&fk, width)?,
                numerics::integral_exp(&fk, width)?,
            )
        } else {
            (
                DMatrix::zeros(m * b, m * b),
                numerics::integral_exp(&fk, f64::INFINITY)?,
            )
        };
        f.push(fk);
        lambda.push(lam);
        psi.push(ps);
    }

    let mut omega = &psi[r] * &g;
    for k in (0..r).rev() {
        omega = &psi[k] * &g + &lambda[k] * omega;
    }

    Ok(DtmcBlocks {
        g,
        f,
        lambda,
        psi,
        omega1: omega,
        m,
        b,
        r,
    })
}

/// Stationary layer vectors of the embedded chain, normalized to total mass
/// one across layers `0..=r`.
pub fn dtmc_steady(blocks: &DtmcBlocks) -> Result<Vec<DVector<f64>>, CavityError> {
    let pi0 = numerics::stationary(&blocks.omega1)?;
    let mut layers = Vec::with_capacity(blocks.r + 1);
    layers.push(pi0);
    for k in 0..blocks.r {
        let next = blocks.lambda[k].tr_mul(&layers[k]);
        layers.push(next);
    }
    let total: f64 = layers.iter().map(|v| v.sum()).sum();
    for v in &mut layers {
        *v /= total;
    }
    Ok(layers)
}

/// Busy-state probabilities conditioned on the server being busy, summing
/// to one over `(k, ell, j)`.
#[derive(Debug, Clone)]
pub struct BusyDistribution {
    pub(crate) probs: Vec<f64>, // same layout as CavityDistribution::busy
    pub(crate) r: usize,
    pub(crate) b: usize,
    pub(crate) m: usize,
}

impl BusyDistribution {
    pub fn prob(&self, k: usize, ell: usize, j: usize) -> f64 {
        self.probs[((k - 1) * self.b + (ell - 1)) * self.m + j]
    }

    pub(crate) fn from_unnormalized(raw: Vec<f64>, r: usize, b: usize, m: usize) -> Self {
        let total: f64 = raw.iter().sum();
        let probs = if total > 0.0 {
            raw.into_iter().map(|v| v / total).collect()
        } else {
            raw
        };
        Self { probs, r, b, m }
    }
}

/// Time-censored busy probabilities from the embedded chain's stationary
/// layer vectors: entry `((ell, j), (ell', j'))` of `Psi^{(k)}` is the
/// expected time spent at `(ell', j')` during one transition out of
/// `(k-1, ell, j)`.
pub fn busy_censor(pihat: &[DVector<f64>], blocks: &DtmcBlocks) -> BusyDistribution {
    let (m, b, r) = (blocks.m, blocks.b, blocks.r);
    let mut raw = vec![0.0; (r + 1) * b * m];
    for k in 1..=r + 1 {
        let y = blocks.psi[k - 1].tr_mul(&pihat[k - 1]);
        raw[(k - 1) * b * m..k * b * m].copy_from_slice(y.as_slice());
    }
    BusyDistribution::from_unnormalized(raw, r, b, m)
}

/// Combines the busy-conditional law with the idle mass `1 - lambda` forced
/// by work conservation at unit mean job size.
pub fn assemble(busy: &BusyDistribution, lambda: f64) -> Result<CavityDistribution, CavityError> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(CavityError::UnstableLoad(lambda));
    }
    let scaled = busy.probs.iter().map(|v| v * lambda).collect();
    Ok(CavityDistribution::from_parts(
        1.0 - lambda,
        scaled,
        busy.r,
        busy.b,
        busy.m,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavity::arrival_rates;
    use crate::policies::Policy;
    use approx::assert_abs_diff_eq;

    fn constant_rate_table(r: usize, b: usize, rate: f64) -> ArrivalRateTable {
        let mut t = ArrivalRateTable::zeros(r, b);
        for k in 1..=r + 1 {
            for ell in 1..=b - 1 {
                t.set_rate(k, ell, rate);
            }
        }
        t.set_idle_rate(rate);
        t
    }

    /// m = 1, B = 2, exponential service, single infinite layer: everything
    /// is small enough to check by hand against the birth-death chain.
    #[test]
    fn two_state_hand_example() {
        let lam = 0.6;
        let ph = PhaseTypeDist::exponential(1.0);
        let grid = LayerGrid::single_layer();
        let rates = constant_rate_table(0, 2, lam);
        let blocks = build_blocks(&rates, &ph, &grid, 2).unwrap();

        let psi = &blocks.psi[0];
        assert_abs_diff_eq!(psi[(0, 0)], 1.0 / (1.0 + lam), epsilon = 1e-12);
        assert_abs_diff_eq!(psi[(0, 1)], lam / (1.0 + lam), epsilon = 1e-12);
        assert_abs_diff_eq!(psi[(1, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(psi[(1, 1)], 1.0, epsilon = 1e-12);

        let omega = &blocks.omega1;
        assert_abs_diff_eq!(omega[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(omega[(0, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(omega[(1, 0)], 1.0, epsilon = 1e-12);

        let pihat = dtmc_steady(&blocks).unwrap();
        assert_abs_diff_eq!(pihat[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pihat[0][1], 0.0, epsilon = 1e-12);

        // birth-death oracle: births lam only at length 1, deaths at rate 1
        let busy = busy_censor(&pihat, &blocks);
        assert_abs_diff_eq!(busy.prob(1, 1, 0), 1.0 / (1.0 + lam), epsilon = 1e-12);
        assert_abs_diff_eq!(busy.prob(1, 2, 0), lam / (1.0 + lam), epsilon = 1e-12);
    }

    #[test]
    fn omega_rows_are_stochastic() {
        let ph = crate::phasetype::fit_merlang(10.0, 0.5, 1).unwrap();
        let grid = LayerGrid::uniform(0.5, 3).unwrap();
        let mut rates = ArrivalRateTable::zeros(3, 4);
        for k in 1..=4 {
            for ell in 1..=3 {
                rates.set_rate(k, ell, 0.3 / (k as f64 + ell as f64));
            }
        }
        let blocks = build_blocks(&rates, &ph, &grid, 4).unwrap();
        for i in 0..blocks.omega1.nrows() {
            let s: f64 = blocks.omega1.row(i).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-10);
        }
        // open layer: no continuation, integral over the whole remaining life
        let top = blocks.lambda.last().unwrap();
        assert!(top.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rates_make_layers_block_diagonal() {
        let ph = crate::phasetype::fit_merlang(10.0, 0.5, 1).unwrap();
        let grid = LayerGrid::uniform(0.5, 2).unwrap();
        let rates = ArrivalRateTable::zeros(2, 3);
        let blocks = build_blocks(&rates, &ph, &grid, 3).unwrap();
        let m = blocks.m;
        let lam = &blocks.lambda[0];
        for i in 0..3 * m {
            for j in 0..3 * m {
                if i / m != j / m {
                    assert_eq!(lam[(i, j)], 0.0, "block off-diagonal at ({i},{j})");
                }
            }
        }
        // empty-system renewal: every layer keeps all its mass at length 1
        let pihat = dtmc_steady(&blocks).unwrap();
        for (k, layer) in pihat.iter().enumerate() {
            let above: f64 = layer.as_slice()[m..].iter().sum();
            assert_abs_diff_eq!(above, 0.0, epsilon = 1e-14);
            if k == 0 {
                // service starts draw the phase fresh
                let total = layer.sum();
                for j in 0..m {
                    assert_abs_diff_eq!(
                        layer[j] / total,
                        ph.initial()[j],
                        epsilon = 1e-12
                    );
                }
            }
        }
        let busy = busy_censor(&pihat, &blocks);
        let mass_above: f64 = (1..=3)
            .flat_map(|k| (2..=3).map(move |ell| (k, ell)))
            .map(|(k, ell)| (0..m).map(|j| busy.prob(k, ell, j)).sum::<f64>())
            .sum();
        assert_abs_diff_eq!(mass_above, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn renewal_phase_marginal_approaches_alpha_in_thin_first_layer() {
        let ph = crate::phasetype::fit_merlang(10.0, 0.5, 2).unwrap();
        let grid = LayerGrid::uniform(0.01, 3).unwrap();
        let rates = constant_rate_table(3, 3, 1e-6);
        let blocks = build_blocks(&rates, &ph, &grid, 3).unwrap();
        let pihat = dtmc_steady(&blocks).unwrap();
        let busy = busy_censor(&pihat, &blocks);
        let m = blocks.m;
        let total: f64 = (0..m).map(|j| busy.prob(1, 1, j)).sum();
        for j in 0..m {
            assert_abs_diff_eq!(
                busy.prob(1, 1, j) / total,
                ph.initial()[j],
                epsilon = 0.02
            );
        }
    }

    /// Assembles the full transition matrix over layers 0..=r and checks the
    /// computed stationary vector against it.
    #[test]
    fn stationary_satisfies_full_transition_matrix() {
        let ph = crate::phasetype::fit_merlang(5.0, 0.4, 1).unwrap();
        let grid = LayerGrid::uniform(0.7, 2).unwrap();
        let b = 3;
        let prepared = Policy::SqRtb.prepare(&grid).unwrap();
        // arbitrary but valid distribution to generate a nontrivial table
        let mut pi = CavityDistribution::all_idle(2, b, ph.order());
        pi.idle = 0.4;
        let n = pi.busy.len();
        for (i, v) in pi.busy.iter_mut().enumerate() {
            *v = 0.6 * 2.0 * (i + 1) as f64 / (n * (n + 1)) as f64;
        }
        let rates = arrival_rates(&pi, &prepared, 3, 0.5);
        let blocks = build_blocks(&rates, &ph, &grid, b).unwrap();
        let pihat = dtmc_steady(&blocks).unwrap();

        let mb = blocks.m * b;
        let layers = blocks.r + 1; // layers 0..=r
        let mut full = DMatrix::zeros(layers * mb, layers * mb);
        for k in 0..layers {
            let xi = &blocks.psi[k] * &blocks.g;
            for i in 0..mb {
                for j in 0..mb {
                    full[(k * mb + i, j)] = xi[(i, j)];
                    if k + 1 < layers {
                        full[(k * mb + i, (k + 1) * mb + j)] = blocks.lambda[k][(i, j)];
                    }
                }
            }
        }
        let mut flat = DVector::zeros(layers * mb);
        for (k, layer) in pihat.iter().enumerate() {
            flat.rows_mut(k * mb, mb).copy_from(layer);
        }
        let moved = full.tr_mul(&flat);
        let residual: f64 = (moved - &flat).abs().sum();
        assert!(residual < 1e-9, "residual {residual}");
    }

    #[test]
    fn assemble_splits_idle_and_busy_mass() {
        let busy = BusyDistribution::from_unnormalized(vec![2.0, 1.0, 1.0, 0.0], 0, 2, 2);
        let pi = assemble(&busy, 0.8).unwrap();
        assert_abs_diff_eq!(pi.idle(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.total(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pi.queue_tail(1), 0.8, epsilon = 1e-15);

        let empty = assemble(&busy, 0.0).unwrap();
        assert_abs_diff_eq!(empty.idle(), 1.0, epsilon = 1e-15);

        assert!(assemble(&busy, 1.0).is_err());
        assert!(assemble(&busy, -0.1).is_err());
    }
}
