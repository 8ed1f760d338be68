//! The `H` map: state-dependent arrival rates from a stationary law.
//!
//! For each state, `u` is the stationary mass of states with aversion score
//! at least as large, `v` the mass with strictly larger score, and
//! `w = u - v` the mass of the tie class. A potential arrival (rate
//! `lambda d`) joins the tagged server with probability `1/(j+1)` when `j`
//! of the other `d - 1` samples tie with it and the rest score strictly
//! higher, giving
//! `lambda_act = lambda d sum_j C(d-1, j)/(j+1) w^j v^{d-1-j}`,
//! the numerically stable form of `lambda (u^d - v^d) / w`.

use super::{ArrivalRateTable, CavityDistribution};
use crate::policies::PreparedPolicy;
use std::cmp::Ordering;

/// `sum_{j=0}^{d-1} C(d-1, j)/(j+1) w^j v^{d-1-j}`.
///
/// Terms are accumulated from the side of the larger argument so the running
/// term never underflows before the dominant contributions are in.
pub(crate) fn potential_share(w: f64, v: f64, d: usize) -> f64 {
    debug_assert!(d >= 1);
    if d == 1 {
        return 1.0;
    }
    let s = w.max(v);
    if s <= 0.0 {
        return 0.0;
    }
    let wr = w / s;
    let vr = v / s;
    let mut total;
    if vr >= wr {
        // j = 0 term is the largest scale: C(d-1,0)/1 * v^{d-1}
        let mut t = 1.0;
        total = t;
        for j in 0..d - 1 {
            t *= (d - 1 - j) as f64 * wr / ((j + 2) as f64 * vr);
            total += t;
            if t < 1e-18 * total {
                break;
            }
        }
    } else {
        // march down from j = d-1: C(d-1,d-1)/d * w^{d-1}
        let mut t = 1.0 / d as f64;
        total = t;
        let mut j = d - 1;
        while j > 0 {
            t *= (j + 1) as f64 * vr / ((d - j) as f64 * wr);
            total += t;
            if t < 1e-18 * total {
                break;
            }
            j -= 1;
        }
    }
    total * s.powi(d as i32 - 1)
}

/// Tail masses `u`, `v` and tie mass `w` per state, indexed like the flat
/// state id: 0 for idle, then `1 + (k-1) B + (ell-1)`.
#[derive(Debug, Clone)]
pub struct OrderStats {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    b: usize,
}

impl OrderStats {
    #[inline]
    fn id(&self, k: usize, ell: usize) -> usize {
        1 + (k - 1) * self.b + (ell - 1)
    }

    /// `(u, v, w)` of busy state `(k, ell)`.
    pub fn busy(&self, k: usize, ell: usize) -> (f64, f64, f64) {
        let i = self.id(k, ell);
        (self.u[i], self.v[i], self.w[i])
    }

    pub fn idle(&self) -> (f64, f64, f64) {
        (self.u[0], self.v[0], self.w[0])
    }
}

/// Scores every state of `pi` under the policy and accumulates the
/// mass-above/tie decomposition by one sorted suffix pass.
pub fn order_stats(pi: &CavityDistribution, policy: &PreparedPolicy) -> OrderStats {
    let (r, b) = (pi.r(), pi.buffer());
    let n_states = 1 + (r + 1) * b;
    let mut mass = vec![0.0f64; n_states];
    mass[0] = pi.idle();
    for k in 1..=r + 1 {
        for ell in 1..=b {
            mass[1 + (k - 1) * b + (ell - 1)] = pi.x(k, ell);
        }
    }

    let score_of = |state: usize| {
        if state == 0 {
            policy.score(0, 0)
        } else {
            let k = (state - 1) / b + 1;
            let ell = ((state - 1) % b + 1) as u32;
            policy.score(k, ell)
        }
    };
    let mut order: Vec<usize> = (0..n_states).collect();
    order.sort_by(|&a, &bi| score_of(a).cmp_same_arity(&score_of(bi)));

    let mut u = vec![0.0f64; n_states];
    let mut v = vec![0.0f64; n_states];
    let mut w = vec![0.0f64; n_states];
    // walk tie groups from the top score down
    let mut above = 0.0f64;
    let mut hi = n_states;
    while hi > 0 {
        let mut lo = hi - 1;
        let top_score = score_of(order[hi - 1]);
        while lo > 0
            && score_of(order[lo - 1]).cmp_same_arity(&top_score) == Ordering::Equal
        {
            lo -= 1;
        }
        let group_mass: f64 = order[lo..hi].iter().map(|&s| mass[s]).sum();
        for &s in &order[lo..hi] {
            v[s] = above;
            u[s] = above + group_mass;
            w[s] = group_mass;
        }
        above += group_mass;
        hi = lo;
    }
    OrderStats { u, v, w, b }
}

/// The `H` map: the arrival-rate table induced by a stationary law under a
/// policy with `d` choices at offered load `lambda`.
pub fn arrival_rates(
    pi: &CavityDistribution,
    policy: &PreparedPolicy,
    d: usize,
    lambda: f64,
) -> ArrivalRateTable {
    let (r, b) = (pi.r(), pi.buffer());
    let stats = order_stats(pi, policy);
    let mut table = ArrivalRateTable::zeros(r, b);
    let scale = lambda * d as f64;
    for k in 1..=r + 1 {
        for ell in 1..=b - 1 {
            let (_, v, w) = stats.busy(k, ell);
            table.set_rate(k, ell, scale * potential_share(w, v, d));
        }
        // no arrivals once the buffer is full
        table.set_rate(k, b, 0.0);
    }
    let (_, v0, w0) = stats.idle();
    table.set_idle_rate(scale * potential_share(w0, v0, d));
    table
}
