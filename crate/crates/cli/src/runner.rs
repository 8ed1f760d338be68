//! Executes experiments and produces result rows.

use crate::config::{resolve_grid, resolve_policy, JobSizeSpec, PolicySpec};
use crate::output::Row;
use crate::presets::{reference_rows, ReferenceRow};
use anyhow::{anyhow, bail, Result};
use astlb_core::cavity::{fixed_point, CavityError, FixedPointOptions, FixedPointResult};
use astlb_core::metrics::mean_metrics;
use astlb_core::phasetype::PhaseTypeDist;
use astlb_core::policies::LayerGrid;
use astlb_core::simulator::{run_experiment, SimConfig};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct SolveSettings {
    pub tol: f64,
    pub max_iterations: usize,
    pub buffer: Option<usize>,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 500,
            buffer: None,
        }
    }
}

impl SolveSettings {
    pub fn options(&self) -> FixedPointOptions {
        let mut opts = FixedPointOptions {
            tol: self.tol,
            max_iterations: self.max_iterations,
            ..FixedPointOptions::default()
        };
        opts.fixed_buffer = self.buffer;
        opts
    }
}

#[derive(Debug, Clone)]
pub struct SimSettings {
    pub n: usize,
    pub runs: usize,
    pub horizon: Option<f64>,
    pub warmup: f64,
    pub seed: u64,
    pub with_replacement: bool,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            n: 100,
            runs: 40,
            horizon: None,
            warmup: 0.3,
            seed: 0x5eed,
            with_replacement: false,
        }
    }
}

pub struct SolveOutcome {
    pub row: Row,
    pub result: FixedPointResult,
    pub ph: PhaseTypeDist,
    pub grid: LayerGrid,
}

fn non_convergence_report(e: &CavityError) -> anyhow::Error {
    if let CavityError::NonConvergence {
        iterations,
        residual,
        residuals,
    } = e
    {
        let tail: Vec<String> = residuals
            .iter()
            .rev()
            .take(10)
            .rev()
            .map(|r| format!("{r:.3e}"))
            .collect();
        anyhow!(
            "no fixed point after {iterations} iterations (residual {residual:.3e}; last: {})",
            tail.join(" ")
        )
    } else {
        anyhow!("{e}")
    }
}

/// Solves one point and assembles its row; `ew_rel_vs_sq` is left for the
/// caller since it needs the matching baseline.
pub fn solve_point(
    spec: &PolicySpec,
    lambda: f64,
    d: usize,
    delta: Option<f64>,
    r: Option<usize>,
    job: &JobSizeSpec,
    settings: &SolveSettings,
) -> Result<SolveOutcome> {
    let ph = job.build()?;
    let grid = resolve_grid(spec, delta, r, &ph)?;
    let policy = resolve_policy(spec, &grid, &ph)?;
    let result = fixed_point(&policy, lambda, &ph, &grid, d, &settings.options())
        .map_err(|e| non_convergence_report(&e))?;
    let means = mean_metrics(&result.pi, lambda);
    let row = Row {
        mode: "solve".into(),
        policy: spec.to_string(),
        d,
        lambda,
        delta: grid.delta(),
        r: Some(grid.r()),
        scv: job.scv,
        f: job.f,
        k: job.k,
        threshold: spec.threshold,
        n: None,
        ew: means.ew,
        eq: means.eq,
        er: means.er,
        ew_rel_vs_sq: None,
        iters: Some(result.iterations),
        residual: Some(result.final_residual()),
        runs: None,
        sd: None,
    };
    Ok(SolveOutcome {
        row,
        result,
        ph,
        grid,
    })
}

pub fn simulate_point(
    spec: &PolicySpec,
    lambda: f64,
    d: usize,
    delta: Option<f64>,
    r: Option<usize>,
    job: &JobSizeSpec,
    sim: &SimSettings,
) -> Result<Row> {
    let ph = job.build()?;
    let grid = resolve_grid(spec, delta, r, &ph)?;
    let policy = resolve_policy(spec, &grid, &ph)?;
    if d > sim.n {
        bail!("d = {d} exceeds the number of servers {}", sim.n);
    }
    let mut cfg = SimConfig::new(sim.n, lambda, d, policy, grid.clone(), ph);
    if let Some(h) = sim.horizon {
        cfg.horizon = h;
    }
    cfg.warmup_fraction = sim.warmup;
    cfg.runs = sim.runs;
    cfg.seed = sim.seed;
    cfg.with_replacement = sim.with_replacement;
    let stats = run_experiment(&cfg);
    Ok(Row {
        mode: "simulate".into(),
        policy: spec.to_string(),
        d,
        lambda,
        delta: grid.delta(),
        r: Some(grid.r()),
        scv: job.scv,
        f: job.f,
        k: job.k,
        threshold: spec.threshold,
        n: Some(sim.n),
        ew: stats.mean_wait,
        eq: stats.mean_queue,
        er: stats.mean_response,
        ew_rel_vs_sq: None,
        iters: None,
        residual: None,
        runs: Some(sim.runs),
        sd: Some(stats.sd_wait),
    })
}

/// Sweep: the policy list crossed with the load grid, plus a shortest-queue
/// baseline per load for the relative-improvement column. Points run in
/// parallel; rows come back in (policy, load) order regardless.
pub fn sweep(
    policies: &[PolicySpec],
    lambdas: &[f64],
    d: usize,
    delta: Option<f64>,
    r: Option<usize>,
    job: &JobSizeSpec,
    settings: &SolveSettings,
    jobs_limit: Option<usize>,
) -> Result<Vec<Row>> {
    let run_all = || -> Result<Vec<Row>> {
        let baseline_spec = PolicySpec::parse("sq").expect("sq parses");
        let baselines: Vec<f64> = lambdas
            .par_iter()
            .map(|&lambda| {
                solve_point(&baseline_spec, lambda, d, delta, r, job, settings)
                    .map(|o| o.row.ew)
            })
            .collect::<Result<_>>()?;
        let points: Vec<(usize, usize)> = (0..policies.len())
            .flat_map(|p| (0..lambdas.len()).map(move |l| (p, l)))
            .collect();
        let mut rows: Vec<Row> = points
            .par_iter()
            .map(|&(p, l)| {
                let mut out =
                    solve_point(&policies[p], lambdas[l], d, delta, r, job, settings)?.row;
                let base = baselines[l];
                if base > 0.0 {
                    out.ew_rel_vs_sq = Some((base - out.ew) / base);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        // deterministic order: policy first, then load
        rows.sort_by(|a, b| {
            let pa = policies.iter().position(|s| s.to_string() == a.policy);
            let pb = policies.iter().position(|s| s.to_string() == b.policy);
            pa.cmp(&pb).then(a.lambda.total_cmp(&b.lambda))
        });
        Ok(rows)
    };
    match jobs_limit {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| anyhow!("cannot build thread pool: {e}"))?
            .install(run_all),
        None => run_all(),
    }
}

/// Solves one built-in reference row.
pub fn solve_reference(row: &ReferenceRow, settings: &SolveSettings) -> Result<SolveOutcome> {
    solve_point(
        &row.policy_spec(),
        row.lambda,
        row.d,
        row.delta,
        row.r,
        &row.job,
        settings,
    )
}

/// Simulation settings matching the reference protocol: horizon `1e7 / N`,
/// 30% warm-up, 40 runs, servers sampled with replacement.
pub fn reference_sim_settings(n: usize, seed: u64) -> SimSettings {
    SimSettings {
        n,
        runs: 40,
        horizon: None,
        warmup: 0.3,
        seed,
        with_replacement: true,
    }
}

/// `table1` mode: every reference row solved, plus simulated rows when a
/// system size is given.
pub fn table1(simulate_n: Option<usize>, runs: Option<usize>, seed: u64) -> Result<Vec<Row>> {
    let settings = SolveSettings::default();
    let mut rows = Vec::new();
    for preset in reference_rows() {
        let mut outcome = solve_reference(&preset, &settings)?;
        outcome.row.mode = "table1".into();
        rows.push(outcome.row);
        if let Some(n) = simulate_n {
            let mut sim = reference_sim_settings(n, seed);
            if let Some(runs) = runs {
                sim.runs = runs;
            }
            let mut sim_row = simulate_point(
                &preset.policy_spec(),
                preset.lambda,
                preset.d,
                preset.delta,
                preset.r,
                &preset.job,
                &sim,
            )?;
            sim_row.mode = "table1".into();
            rows.push(sim_row);
        }
    }
    Ok(rows)
}
