//! Performance measures derived from a cavity fixed point: means, the join
//! law of an arriving job, waiting- and response-time tails, relative
//! improvement, and the tie-multiplicity diagnostic.

use crate::cavity::{order_stats, potential_share, CavityDistribution};
use crate::phasetype::PhaseTypeDist;
use crate::policies::PreparedPolicy;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("join law holds mass {mass:.3e} at the buffer edge; tail truncation unreliable")]
    TruncatedTail { mass: f64 },
    #[error("tail integration ran past w = {0} without decaying")]
    NoDecay(f64),
}

/// Mean queue length, response time, and waiting time.
#[derive(Debug, Clone, Copy)]
pub struct MeanMetrics {
    pub eq: f64,
    pub er: f64,
    pub ew: f64,
}

/// `E[Q] = sum ell pi`, `E[R] = E[Q] / lambda` (Little), `E[W] = E[R] - 1`.
/// At zero load the response time is one mean job and the wait is zero.
pub fn mean_metrics(pi: &CavityDistribution, lambda: f64) -> MeanMetrics {
    let eq = pi.expected_queue();
    if lambda == 0.0 {
        return MeanMetrics {
            eq,
            er: 1.0,
            ew: 0.0,
        };
    }
    let er = eq / lambda;
    MeanMetrics {
        eq,
        er,
        ew: er - 1.0,
    }
}

/// `(E[W_baseline] - E[W_policy]) / E[W_baseline]`.
pub fn relative_improvement(ew_baseline: f64, ew_policy: f64) -> f64 {
    debug_assert!(ew_baseline > 0.0);
    (ew_baseline - ew_policy) / ew_baseline
}

/// Law of the server state seen by an arriving job: probability
/// `J_{k, ell, j}` of joining a busy server in state `(k, ell, j)`, plus the
/// mass of joining an idle server.
#[derive(Debug, Clone)]
pub struct JoinLaw {
    busy: Vec<f64>,        // (k, ell, j) layout as in CavityDistribution
    level_phase: Vec<f64>, // aggregated over layers: (ell-1) * m + j
    idle: f64,
    b: usize,
    m: usize,
}

impl JoinLaw {
    pub fn busy_prob(&self, k: usize, ell: usize, j: usize) -> f64 {
        self.busy[((k - 1) * self.b + (ell - 1)) * self.m + j]
    }

    /// `J_{ell, j} = sum_k J_{k, ell, j}`.
    pub fn level_phase(&self, ell: usize, j: usize) -> f64 {
        self.level_phase[(ell - 1) * self.m + j]
    }

    pub fn idle_join(&self) -> f64 {
        self.idle
    }

    pub fn busy_join(&self) -> f64 {
        self.level_phase.iter().sum()
    }

    pub fn buffer(&self) -> usize {
        self.b
    }

    /// Join mass at the last kept queue length; nonzero values signal that
    /// tail metrics would be truncated.
    pub fn edge_mass(&self) -> f64 {
        (0..self.m)
            .map(|j| self.level_phase(self.b, j))
            .sum::<f64>()
    }
}

/// Join law under a policy with `d` choices: each busy state is joined with
/// probability `pi_{k,ell,j} d sum_s C(d-1,s)/(s+1) w^s v^{d-1-s}`, the
/// stable form of `pi (u^d - v^d) / w`.
pub fn join_law(pi: &CavityDistribution, policy: &PreparedPolicy, d: usize) -> JoinLaw {
    let (r, b, m) = (pi.r(), pi.buffer(), pi.phases());
    let stats = order_stats(pi, policy);
    let mut busy = vec![0.0; (r + 1) * b * m];
    let mut level_phase = vec![0.0; b * m];
    for k in 1..=r + 1 {
        for ell in 1..=b {
            let (_, v, w) = stats.busy(k, ell);
            let factor = d as f64 * potential_share(w, v, d);
            for j in 0..m {
                let val = pi.busy_prob(k, ell, j) * factor;
                busy[((k - 1) * b + (ell - 1)) * m + j] = val;
                level_phase[(ell - 1) * m + j] += val;
            }
        }
    }
    let (_, v0, w0) = stats.idle();
    let idle = pi.idle() * d as f64 * potential_share(w0, v0, d);
    JoinLaw {
        busy,
        level_phase,
        idle,
        b,
        m,
    }
}

/// Evolves the workload-ahead distribution of an arriving job.
///
/// A job that joins a queue of length `ell` behind a job in phase `j` waits
/// for one partial service from phase `j` plus `ell - 1` full services. All
/// starting states share one absorbing chain: start `ell` services before
/// the end of a `levels`-deep chain, and the survival at time `w` is the
/// unabsorbed mass.
#[derive(Clone)]
struct TailEvaluator {
    state: Vec<f64>, // levels * m, current unabsorbed distribution
    levels: usize,
    m: usize,
    a: Vec<f64>,    // subgenerator, row-major
    exit: Vec<f64>, // exit rates
    alpha: Vec<f64>,
    q: f64,
    time: f64,
    scratch: Vec<f64>,
    term: Vec<f64>,
}

impl TailEvaluator {
    fn waiting(join: &JoinLaw, ph: &PhaseTypeDist) -> Self {
        let mut ev = Self::empty(join.b, ph);
        for ell in 1..=join.b {
            let pos = join.b - ell; // ell services before absorption
            for j in 0..ev.m {
                ev.state[pos * ev.m + j] += join.level_phase(ell, j);
            }
        }
        ev
    }

    fn response(join: &JoinLaw, ph: &PhaseTypeDist) -> Self {
        let mut ev = Self::empty(join.b + 1, ph);
        for ell in 1..=join.b {
            let pos = ev.levels - (ell + 1); // own service too
            for j in 0..ev.m {
                ev.state[pos * ev.m + j] += join.level_phase(ell, j);
            }
        }
        // joining an idle server leaves exactly the job's own service
        let top = ev.levels - 1;
        for j in 0..ev.m {
            ev.state[top * ev.m + j] += join.idle_join() * ev.alpha[j];
        }
        ev
    }

    fn empty(levels: usize, ph: &PhaseTypeDist) -> Self {
        let m = ph.order();
        let mut a = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                a[i * m + j] = ph.subgenerator()[(i, j)];
            }
        }
        let q = ph
            .subgenerator()
            .diagonal()
            .iter()
            .fold(0.0f64, |acc, &d| acc.max(-d));
        Self {
            state: vec![0.0; levels * m],
            levels,
            m,
            a,
            exit: ph.exit_rates().as_slice().to_vec(),
            alpha: ph.initial().as_slice().to_vec(),
            q,
            time: 0.0,
            scratch: vec![0.0; levels * m],
            term: vec![0.0; levels * m],
        }
    }

    fn survival(&self) -> f64 {
        self.state.iter().sum()
    }

    fn advance_to(&mut self, w: f64) {
        debug_assert!(w >= self.time);
        let dt = w - self.time;
        self.time = w;
        if dt == 0.0 || self.q == 0.0 {
            return;
        }
        let chunks = ((self.q * dt / 256.0).ceil() as usize).max(1);
        let tau = dt / chunks as f64;
        let arg = self.q * tau;
        let cap = (arg + 12.0 * arg.sqrt() + 60.0) as usize;
        for _ in 0..chunks {
            self.term.copy_from_slice(&self.state);
            let mut weight = (-arg).exp();
            let mut cum = weight;
            for (s, &t) in self.state.iter_mut().zip(self.term.iter()) {
                *s = weight * t;
            }
            let mut n = 1usize;
            while 1.0 - cum > 1e-16 && n <= cap {
                apply_chain_step(
                    &self.a,
                    &self.exit,
                    &self.alpha,
                    self.m,
                    self.levels,
                    self.q,
                    &self.term,
                    &mut self.scratch,
                );
                std::mem::swap(&mut self.term, &mut self.scratch);
                weight *= arg / n as f64;
                cum += weight;
                for (s, &t) in self.state.iter_mut().zip(self.term.iter()) {
                    *s += weight * t;
                }
                n += 1;
            }
        }
    }
}

/// One application of `I + G^T/q` where `G` is the chain generator: phase
/// moves by `A` inside a level, completion feeds the next level through
/// `mu alpha`, and completing the last level absorbs.
#[allow(clippy::too_many_arguments)]
fn apply_chain_step(
    a: &[f64],
    exit: &[f64],
    alpha: &[f64],
    m: usize,
    levels: usize,
    q: f64,
    z: &[f64],
    out: &mut [f64],
) {
    let inv_q = 1.0 / q;
    for lev in 0..levels {
        let blk = &z[lev * m..(lev + 1) * m];
        let fed = if lev > 0 {
            let prev = &z[(lev - 1) * m..lev * m];
            let mut c = 0.0;
            for j in 0..m {
                c += prev[j] * exit[j];
            }
            c * inv_q
        } else {
            0.0
        };
        for jp in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += a[j * m + jp] * blk[j];
            }
            out[lev * m + jp] = blk[jp] + acc * inv_q + fed * alpha[jp];
        }
    }
}

const EDGE_MASS_LIMIT: f64 = 1e-8;

fn check_edge(join: &JoinLaw) -> Result<(), MetricsError> {
    let mass = join.edge_mass();
    if mass > EDGE_MASS_LIMIT {
        return Err(MetricsError::TruncatedTail { mass });
    }
    Ok(())
}

/// `P(W > w)`: the arriving job finds more than `w` of work it must wait for.
pub fn waiting_survival(
    join: &JoinLaw,
    ph: &PhaseTypeDist,
    w: f64,
) -> Result<f64, MetricsError> {
    check_edge(join)?;
    let mut ev = TailEvaluator::waiting(join, ph);
    ev.advance_to(w);
    Ok(ev.survival())
}

/// `P(R > w)` including the job's own service; `P(R > 0) = 1`.
pub fn response_survival(
    join: &JoinLaw,
    ph: &PhaseTypeDist,
    w: f64,
) -> Result<f64, MetricsError> {
    check_edge(join)?;
    let mut ev = TailEvaluator::response(join, ph);
    ev.advance_to(w);
    Ok(ev.survival())
}

/// Evaluates a survival curve on a grid of points in one pass.
fn curve(mut ev: TailEvaluator, points: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    for &w in points {
        ev.advance_to(w);
        out.push(ev.survival());
    }
    out
}

pub fn waiting_survival_curve(
    join: &JoinLaw,
    ph: &PhaseTypeDist,
    points: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    check_edge(join)?;
    Ok(curve(TailEvaluator::waiting(join, ph), points))
}

const TAIL_CUTOFF: f64 = 1e-8;
const W_HARD_CAP: f64 = 50_000.0;

fn integrate_tail(mut ev: TailEvaluator) -> Result<f64, MetricsError> {
    if ev.survival() <= 0.0 {
        return Ok(0.0);
    }
    // locate the integration horizon first
    let mut probe = ev.clone();
    let mut w_max = 1.0;
    loop {
        probe.advance_to(w_max);
        if probe.survival() < TAIL_CUTOFF {
            break;
        }
        w_max *= 2.0;
        if w_max > W_HARD_CAP {
            return Err(MetricsError::NoDecay(W_HARD_CAP));
        }
    }
    // composite Simpson
    let panels = 4096usize;
    let h = w_max / panels as f64;
    let mut total = ev.survival(); // w = 0 endpoint
    for i in 1..=panels {
        ev.advance_to(i as f64 * h);
        let weight = if i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += weight * ev.survival();
    }
    Ok(total * h / 3.0)
}

/// `int_0^inf P(W > w) dw`, an independent route to the mean wait.
pub fn mean_wait_from_tail(join: &JoinLaw, ph: &PhaseTypeDist) -> Result<f64, MetricsError> {
    check_edge(join)?;
    integrate_tail(TailEvaluator::waiting(join, ph))
}

/// `int_0^inf P(R > w) dw`, an independent route to the mean response time.
pub fn mean_response_from_tail(join: &JoinLaw, ph: &PhaseTypeDist) -> Result<f64, MetricsError> {
    check_edge(join)?;
    integrate_tail(TailEvaluator::response(join, ph))
}

/// Expected number of sampled servers sharing the minimum queue length among
/// `d` busy samples, given the queue-length tail `u` (`u[0] = P(len >= 1)`).
pub fn tie_expectation(u: &[f64], d: usize) -> f64 {
    debug_assert!(d >= 1);
    debug_assert!(!u.is_empty() && u[0] > 0.0);
    debug_assert!(u.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    if d == 1 {
        return 1.0;
    }
    let tail = |i: usize| -> f64 {
        if i < u.len() {
            u[i]
        } else {
            0.0
        }
    };
    // binomial coefficients C(d, k)
    let mut binom = vec![1.0f64; d + 1];
    for k in 1..=d {
        binom[k] = binom[k - 1] * (d - k + 1) as f64 / k as f64;
    }
    let mut numerator = 0.0;
    for ell in 0.. {
        let here = tail(ell);
        let above = tail(ell + 1);
        if here <= 0.0 {
            break;
        }
        let gap = (here - above).max(0.0);
        for k in 1..=d {
            numerator +=
                k as f64 * binom[k] * gap.powi(k as i32) * above.powi((d - k) as i32);
        }
        if above <= 0.0 {
            break;
        }
    }
    numerator / u[0].powi(d as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavity::{fixed_point, FixedPointOptions};
    use crate::phasetype::fit_merlang;
    use crate::policies::{LayerGrid, Policy};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn mean_metrics_zero_load() {
        let pi = CavityDistribution::all_idle(0, 4, 1);
        let m = mean_metrics(&pi, 0.0);
        assert_eq!(m.ew, 0.0);
        assert_eq!(m.er, 1.0);
    }

    #[test]
    fn relative_improvement_basics() {
        assert_abs_diff_eq!(relative_improvement(2.0, 2.0), 0.0);
        assert_abs_diff_eq!(relative_improvement(2.0, 1.0), 0.5);
        assert!(relative_improvement(2.0, 3.0) < 0.0);
    }

    fn solved(
        policy: &Policy,
        lambda: f64,
        d: usize,
    ) -> (crate::cavity::FixedPointResult, PhaseTypeDist) {
        let ph = fit_merlang(10.0, 0.5, 1).unwrap();
        let grid = LayerGrid::uniform(0.5, 8).unwrap();
        let res = fixed_point(policy, lambda, &ph, &grid, d, &FixedPointOptions::default())
            .unwrap();
        (res, ph)
    }

    #[test]
    fn single_choice_join_law_is_the_stationary_law() {
        let (res, _) = solved(&Policy::Sq, 0.6, 1);
        let join = join_law(&res.pi, &res.prepared(), 1);
        for ell in 1..=res.buffer {
            for j in 0..res.pi.phases() {
                let want: f64 = (1..=res.grid.r() + 1)
                    .map(|k| res.pi.busy_prob(k, ell, j))
                    .sum();
                assert_abs_diff_eq!(join.level_phase(ell, j), want, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(join.idle_join(), res.pi.idle(), epsilon = 1e-12);
    }

    #[test]
    fn random_policy_join_law_is_the_stationary_law() {
        let (res, _) = solved(&Policy::Random, 0.5, 3);
        let join = join_law(&res.pi, &res.prepared(), 3);
        assert_abs_diff_eq!(join.busy_join(), 1.0 - res.pi.idle(), epsilon = 1e-10);
        assert_abs_diff_eq!(join.idle_join(), res.pi.idle(), epsilon = 1e-10);
    }

    #[test]
    fn busy_join_mass_is_all_sampled_busy() {
        let lambda = 0.7;
        let d = 3;
        let (res, _) = solved(&Policy::SqRtb, lambda, d);
        let join = join_law(&res.pi, &res.prepared(), d);
        assert_abs_diff_eq!(join.busy_join(), lambda.powi(d as i32), epsilon = 1e-8);
        assert_abs_diff_eq!(
            join.idle_join(),
            1.0 - lambda.powi(d as i32),
            epsilon = 1e-8
        );
    }

    #[test]
    fn waiting_tail_boundary_values() {
        let lambda = 0.7;
        let d = 3;
        let (res, ph) = solved(&Policy::SqRtb, lambda, d);
        let join = join_law(&res.pi, &res.prepared(), d);
        let at_zero = waiting_survival(&join, &ph, 0.0).unwrap();
        assert_abs_diff_eq!(at_zero, lambda.powi(d as i32), epsilon = 1e-8);
        let far = waiting_survival(&join, &ph, 200.0).unwrap();
        assert!(far < 1e-6);
        let r0 = response_survival(&join, &ph, 0.0).unwrap();
        assert_abs_diff_eq!(r0, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn mg1_waiting_tail_closed_form() {
        // d = 1 with exponential jobs is an M/M/1 queue:
        // P(W > w) = lambda e^{-(1 - lambda) w}
        let ph = PhaseTypeDist::exponential(1.0);
        let grid = LayerGrid::single_layer();
        let lambda = 0.6;
        let res = fixed_point(
            &Policy::Random,
            lambda,
            &ph,
            &grid,
            1,
            &FixedPointOptions::default().with_tol(1e-12),
        )
        .unwrap();
        let join = join_law(&res.pi, &res.prepared(), 1);
        for &w in &[0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let want = lambda * (-(1.0 - lambda) * w).exp();
            let got = waiting_survival(&join, &ph, w).unwrap();
            assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn response_tail_at_zero_load_is_the_job_size() {
        let ph = fit_merlang(10.0, 0.5, 1).unwrap();
        let grid = LayerGrid::uniform(0.5, 4).unwrap();
        let res = fixed_point(
            &Policy::SqRtb,
            0.01,
            &ph,
            &grid,
            2,
            &FixedPointOptions::default(),
        )
        .unwrap();
        let join = join_law(&res.pi, &res.prepared(), 2);
        for &w in &[0.5, 1.0, 3.0] {
            let got = response_survival(&join, &ph, w).unwrap();
            assert_abs_diff_eq!(got, ph.survival(w), epsilon = 1e-3);
        }
    }

    #[test]
    fn tail_integrals_match_means() {
        let lambda = 0.7;
        let d = 3;
        let (res, ph) = solved(&Policy::SqRtb, lambda, d);
        let means = mean_metrics(&res.pi, lambda);
        let join = join_law(&res.pi, &res.prepared(), d);
        let ew = mean_wait_from_tail(&join, &ph).unwrap();
        assert_abs_diff_eq!(ew, means.ew, epsilon = 1e-4);
        let er = mean_response_from_tail(&join, &ph).unwrap();
        assert_abs_diff_eq!(er, means.er, epsilon = 1e-4);
    }

    #[test]
    fn tie_expectation_degenerate_cases() {
        assert_abs_diff_eq!(tie_expectation(&[0.8, 0.1], 1), 1.0);
        // every busy server has exactly one job: all d samples tie
        assert_abs_diff_eq!(tie_expectation(&[0.5], 4), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn tie_expectation_matches_monte_carlo() {
        let u = [0.9, 0.5, 0.2, 0.05, 0.01];
        let d = 3;
        let analytic = tie_expectation(&u, d);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let draw_len = |rng: &mut rand_chacha::ChaCha8Rng| -> usize {
            // queue length conditioned on >= 1: P(len >= l) = u[l-1]/u[0]
            let p: f64 = rng.gen::<f64>() * u[0];
            let mut len = 1;
            while len < u.len() && p < u[len] {
                len += 1;
            }
            len
        };
        let trials = 1_000_000usize;
        let mut total = 0usize;
        for _ in 0..trials {
            let lens: Vec<usize> = (0..d).map(|_| draw_len(&mut rng)).collect();
            let min = *lens.iter().min().unwrap();
            total += lens.iter().filter(|&&l| l == min).count();
        }
        let mc = total as f64 / trials as f64;
        assert!(
            (analytic - mc).abs() < 0.01,
            "analytic {analytic} vs monte carlo {mc}"
        );
        assert!((1.0..=d as f64).contains(&analytic));
    }
}
