//! Event-driven simulation of the finite system: `N` FCFS servers, Poisson
//! arrivals at rate `lambda N`, and a dispatcher that samples `d` servers per
//! arrival and joins the one with the smallest aversion score.
//!
//! Each replication owns four named random streams (arrivals, service draws,
//! server sampling, tie breaks) derived from `(seed, run, purpose)`, so runs
//! are reproducible and job-size sequences stay aligned across policies.

use crate::phasetype::PhaseTypeDist;
use crate::policies::{LayerGrid, Policy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n: usize,
    pub lambda: f64,
    pub d: usize,
    pub policy: Policy,
    pub grid: LayerGrid,
    pub ph: PhaseTypeDist,
    /// Simulated time; the reference protocol uses `1e7 / n`.
    pub horizon: f64,
    /// Fraction of the horizon discarded before collecting statistics.
    pub warmup_fraction: f64,
    pub runs: usize,
    pub seed: u64,
    /// Sample the `d` servers with replacement instead of distinct.
    pub with_replacement: bool,
}

impl SimConfig {
    pub fn new(
        n: usize,
        lambda: f64,
        d: usize,
        policy: Policy,
        grid: LayerGrid,
        ph: PhaseTypeDist,
    ) -> Self {
        assert!(n >= 1 && d >= 1 && d <= n);
        assert!(lambda >= 0.0);
        Self {
            n,
            lambda,
            d,
            policy,
            grid,
            ph,
            horizon: 1e7 / n as f64,
            warmup_fraction: 0.3,
            runs: 40,
            seed: 0x5eed,
            with_replacement: false,
        }
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_runs(mut self, runs: usize) -> Self {
        self.runs = runs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Statistics from a single replication.
#[derive(Debug, Clone, Copy)]
pub struct RunStats {
    pub mean_wait: f64,
    pub mean_response: f64,
    /// Time-average jobs in system per server.
    pub mean_queue: f64,
    pub utilization: f64,
    pub jobs: u64,
}

/// Aggregate over replications: means plus sample standard deviations.
#[derive(Debug, Clone)]
pub struct SimStats {
    pub per_run: Vec<RunStats>,
    pub mean_wait: f64,
    pub sd_wait: f64,
    pub mean_response: f64,
    pub sd_response: f64,
    pub mean_queue: f64,
    pub utilization: f64,
    pub total_jobs: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream(seed: u64, run: usize, purpose: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    let mut state = seed ^ splitmix(run as u64).rotate_left(17) ^ splitmix(purpose ^ 0xa5a5);
    for chunk in bytes.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

#[derive(Clone, Copy)]
struct Completion {
    time: f64,
    server: u32,
}

impl PartialEq for Completion {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.server == other.server
    }
}
impl Eq for Completion {}
impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Completion {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on time, server id as a deterministic tie break
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.server.cmp(&self.server))
    }
}

#[derive(Clone, Copy)]
struct QueuedJob {
    size: f64,
    arrival: f64,
}

struct Server {
    queue: VecDeque<QueuedJob>,
    service_start: f64,
}

struct Sampler {
    perm: Vec<u32>,
    picks: Vec<u32>,
    swaps: Vec<u32>,
}

impl Sampler {
    fn new(n: usize, d: usize) -> Self {
        Self {
            perm: (0..n as u32).collect(),
            picks: Vec::with_capacity(d),
            swaps: Vec::with_capacity(d),
        }
    }

    /// `d` distinct servers by a partial Fisher-Yates pass, undone afterwards
    /// so the permutation buffer stays the identity.
    fn distinct(&mut self, d: usize, rng: &mut ChaCha8Rng) -> &[u32] {
        let n = self.perm.len();
        self.picks.clear();
        self.swaps.clear();
        for i in 0..d {
            let j = i + rng.gen_range(0..n - i);
            self.perm.swap(i, j);
            self.swaps.push(j as u32);
            self.picks.push(self.perm[i]);
        }
        for i in (0..d).rev() {
            self.perm.swap(i, self.swaps[i] as usize);
        }
        &self.picks
    }

    fn with_replacement(&mut self, d: usize, rng: &mut ChaCha8Rng) -> &[u32] {
        let n = self.perm.len();
        self.picks.clear();
        for _ in 0..d {
            self.picks.push(rng.gen_range(0..n) as u32);
        }
        &self.picks
    }
}

/// One replication, deterministic given `(cfg.seed, run)`.
pub fn run_replication(cfg: &SimConfig, run: usize) -> RunStats {
    let prepared = cfg
        .policy
        .prepare(&cfg.grid)
        .expect("policy must be valid for the grid");
    let mut arrivals_rng = stream(cfg.seed, run, 0);
    let mut service_rng = stream(cfg.seed, run, 1);
    let mut sampling_rng = stream(cfg.seed, run, 2);
    let mut tie_rng = stream(cfg.seed, run, 3);

    let n = cfg.n;
    let horizon = cfg.horizon;
    let warmup = cfg.warmup_fraction * horizon;
    let total_rate = cfg.lambda * n as f64;

    let mut servers: Vec<Server> = (0..n)
        .map(|_| Server {
            queue: VecDeque::with_capacity(8),
            service_start: 0.0,
        })
        .collect();
    let mut heap: BinaryHeap<Completion> = BinaryHeap::with_capacity(n + 1);
    let mut sampler = Sampler::new(n, cfg.d);

    let mut next_arrival = if total_rate > 0.0 {
        -arrivals_rng.gen::<f64>().ln() / total_rate
    } else {
        f64::INFINITY
    };

    // time averages over [warmup, horizon]
    let mut last_time = 0.0f64;
    let mut jobs_in_system = 0u64;
    let mut busy_servers = 0u64;
    let mut area_jobs = 0.0f64;
    let mut area_busy = 0.0f64;

    let mut sum_wait = 0.0f64;
    let mut sum_response = 0.0f64;
    let mut counted = 0u64;

    let mut scores: Vec<crate::policies::AversionScore> = Vec::with_capacity(cfg.d);

    loop {
        let next_completion = heap.peek().map(|c| c.time).unwrap_or(f64::INFINITY);
        let now = next_completion.min(next_arrival);
        if now > horizon {
            break;
        }
        // accumulate time averages on the segment [last_time, now]
        if now > warmup {
            let from = last_time.max(warmup);
            let dt = now - from;
            area_jobs += jobs_in_system as f64 * dt;
            area_busy += busy_servers as f64 * dt;
        }
        last_time = now;

        if next_completion <= next_arrival {
            let completion = heap.pop().unwrap();
            let s = &mut servers[completion.server as usize];
            s.queue.pop_front();
            jobs_in_system -= 1;
            if let Some(job) = s.queue.front().copied() {
                s.service_start = now;
                if job.arrival >= warmup {
                    counted += 1;
                    sum_wait += now - job.arrival;
                    sum_response += now - job.arrival + job.size;
                }
                heap.push(Completion {
                    time: now + job.size,
                    server: completion.server,
                });
            } else {
                busy_servers -= 1;
            }
        } else {
            next_arrival = now - arrivals_rng.gen::<f64>().ln() / total_rate;
            let size = cfg.ph.sample(&mut service_rng);

            let candidates = if cfg.with_replacement {
                sampler.with_replacement(cfg.d, &mut sampling_rng)
            } else {
                sampler.distinct(cfg.d, &mut sampling_rng)
            };
            scores.clear();
            let mut best = 0usize;
            let mut ties = 1u32;
            for (i, &sid) in candidates.iter().enumerate() {
                let srv = &servers[sid as usize];
                let (layer, queue) = if srv.queue.is_empty() {
                    (0, 0)
                } else {
                    (
                        cfg.grid.layer_of(now - srv.service_start, true),
                        srv.queue.len() as u32,
                    )
                };
                let score = prepared.score(layer, queue);
                if i == 0 {
                    scores.push(score);
                    continue;
                }
                match score.cmp_same_arity(&scores[best]) {
                    std::cmp::Ordering::Less => {
                        best = i;
                        ties = 1;
                    }
                    std::cmp::Ordering::Equal => ties += 1,
                    std::cmp::Ordering::Greater => {}
                }
                scores.push(score);
            }
            if ties > 1 {
                let mut pick = tie_rng.gen_range(0..ties);
                for (i, score) in scores.iter().enumerate() {
                    if score.cmp_same_arity(&scores[best]) == std::cmp::Ordering::Equal {
                        if pick == 0 {
                            best = i;
                            break;
                        }
                        pick -= 1;
                    }
                }
            }
            let sid = candidates[best];
            let srv = &mut servers[sid as usize];
            let was_idle = srv.queue.is_empty();
            srv.queue.push_back(QueuedJob { size, arrival: now });
            jobs_in_system += 1;
            if was_idle {
                busy_servers += 1;
                srv.service_start = now;
                if now >= warmup {
                    counted += 1;
                    sum_response += size;
                }
                heap.push(Completion {
                    time: now + size,
                    server: sid,
                });
            }
        }
    }
    // close the measurement window at the horizon
    if horizon > warmup {
        let from = last_time.max(warmup);
        area_jobs += jobs_in_system as f64 * (horizon - from);
        area_busy += busy_servers as f64 * (horizon - from);
    }

    let window = (horizon - warmup).max(f64::MIN_POSITIVE);
    RunStats {
        mean_wait: if counted > 0 {
            sum_wait / counted as f64
        } else {
            0.0
        },
        mean_response: if counted > 0 {
            sum_response / counted as f64
        } else {
            0.0
        },
        mean_queue: area_jobs / window / n as f64,
        utilization: area_busy / window / n as f64,
        jobs: counted,
    }
}

/// Runs the replications (in parallel when cores allow) and aggregates.
pub fn run_experiment(cfg: &SimConfig) -> SimStats {
    let per_run: Vec<RunStats> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| run_replication(cfg, run))
        .collect();
    aggregate(per_run)
}

fn aggregate(per_run: Vec<RunStats>) -> SimStats {
    let n = per_run.len().max(1) as f64;
    let mean = |f: fn(&RunStats) -> f64| per_run.iter().map(f).sum::<f64>() / n;
    let sd = |f: fn(&RunStats) -> f64, mu: f64| {
        if per_run.len() < 2 {
            0.0
        } else {
            (per_run.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }
    };
    let mean_wait = mean(|r| r.mean_wait);
    let mean_response = mean(|r| r.mean_response);
    SimStats {
        mean_wait,
        sd_wait: sd(|r| r.mean_wait, mean_wait),
        mean_response,
        sd_response: sd(|r| r.mean_response, mean_response),
        mean_queue: mean(|r| r.mean_queue),
        utilization: mean(|r| r.utilization),
        total_jobs: per_run.iter().map(|r| r.jobs).sum(),
        per_run,
    }
}
