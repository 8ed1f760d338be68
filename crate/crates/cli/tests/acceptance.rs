//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! per check (run with `cargo test --test acceptance -- --nocapture` to see
//! them as they complete).
//!
//! Two reference mean waits (LAS(2) and RE(6,2)) are asserted faithfully and
//! are expected to fail: the solver and the independent simulator agree with
//! each other (and, for LAS(2), with the published finite-system columns)
//! but not with those two published infinite-system entries. The checks are
//! kept red rather than loosened.

use astlb_cli::config::{JobSizeSpec, PolicySpec};
use astlb_cli::presets::reference_rows;
use astlb_cli::runner::{
    reference_sim_settings, simulate_point, solve_reference, sweep, SolveSettings,
};
use astlb_core::cavity::{fixed_point, FixedPointOptions, FixedPointResult};
use astlb_core::metrics::{join_law, mean_metrics, mean_wait_from_tail, relative_improvement};
use astlb_core::phasetype::{fit_merlang, MErlangSpec, PhaseTypeDist};
use astlb_core::policies::{LayerGrid, Policy};
use std::time::Instant;

struct Gate {
    name: &'static str,
    failures: Vec<String>,
}

impl Gate {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, label: &str, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {label} - {detail}", self.name);
        if !ok {
            self.failures.push(format!("{label}: {detail}"));
        }
    }

    fn finish(self) {
        if self.failures.is_empty() {
            println!("PASS {}", self.name);
        } else {
            panic!(
                "{} failed {} check(s):\n  {}",
                self.name,
                self.failures.len(),
                self.failures.join("\n  ")
            );
        }
    }
}

fn figure_settings() -> (PhaseTypeDist, LayerGrid) {
    let ph = fit_merlang(10.0, 0.5, 1).unwrap();
    let grid = LayerGrid::uniform(0.1, 400).unwrap();
    (ph, grid)
}

fn figure_policies() -> Vec<(&'static str, Policy)> {
    let (ph, _) = figure_settings();
    vec![
        ("sq-rtb", Policy::SqRtb),
        ("sq-re:2", Policy::SqRe { s: 20 }),
        ("sq-rtb-re:2", Policy::SqRtbRe { s: 20 }),
        ("las", Policy::Las),
        ("las-qtb", Policy::LasQtb),
        ("re:2", Policy::Re { s: 20 }),
        ("lew", Policy::Lew { ph }),
    ]
}

#[test]
fn criterion_1_reference_mean_waits() {
    let mut gate = Gate::new("criterion 1 (reference mean waits, +-2e-3, <60s each)");
    let settings = SolveSettings::default();
    for row in reference_rows() {
        let started = Instant::now();
        let outcome = solve_reference(&row, &settings).expect("reference row must solve");
        let elapsed = started.elapsed();
        let diff = outcome.row.ew - row.expected_ew;
        let note = if row.known_discrepant {
            " [known discrepancy, see ledger: solver and simulator agree with each other]"
        } else {
            ""
        };
        gate.check(
            row.label,
            diff.abs() <= 2e-3 && elapsed.as_secs() < 60,
            format!(
                "ew {:.6} vs {:.4} (diff {:+.2e}) in {:.1?}{note}",
                outcome.row.ew, row.expected_ew, diff, elapsed
            ),
        );
    }
    gate.finish();
}

#[test]
fn criterion_2_reference_simulations() {
    let mut gate = Gate::new("criterion 2 (N=1000 simulation vs published, 3 sample sd)");
    for row in reference_rows() {
        let Some(paper) = row.n1000_ew else { continue };
        let sim = reference_sim_settings(1000, 0x7ab1e);
        let out = simulate_point(
            &row.policy_spec(),
            row.lambda,
            row.d,
            row.delta,
            row.r,
            &row.job,
            &sim,
        )
        .expect("simulation runs");
        let sd = out.sd.unwrap();
        let diff = out.ew - paper;
        let note = if row.known_discrepant {
            " [known discrepancy, see ledger]"
        } else {
            ""
        };
        gate.check(
            row.label,
            diff.abs() <= 3.0 * sd,
            format!(
                "sim {:.4} (sd {:.4}) vs {:.4} (diff {:+.4}){note}",
                out.ew, sd, paper, diff
            ),
        );
    }
    gate.finish();
}

#[test]
fn criterion_3_shortest_queue_exponential_oracle() {
    let mut gate = Gate::new("criterion 3 (SQ(d) exponential tails vs closed form, 1e-8)");
    let ph = PhaseTypeDist::exponential(1.0);
    let grid = LayerGrid::single_layer();
    let opts = FixedPointOptions::default().with_tol(1e-12);
    for &d in &[2usize, 3, 5] {
        for &lambda in &[0.5f64, 0.8, 0.95] {
            let res = fixed_point(&Policy::Sq, lambda, &ph, &grid, d, &opts).unwrap();
            let mut worst = 0.0f64;
            for ell in 1..=8usize {
                let want = lambda.powf(((d as f64).powi(ell as i32) - 1.0) / (d as f64 - 1.0));
                worst = worst.max((res.pi.queue_tail(ell) - want).abs());
            }
            gate.check(
                &format!("d={d} lambda={lambda}"),
                worst <= 1e-8,
                format!("max tail error {worst:.2e}"),
            );
        }
    }
    gate.finish();
}

#[test]
fn criterion_4_mg1_pollaczek_khinchine() {
    let mut gate = Gate::new("criterion 4 (M/G/1 simulation vs P-K mean wait, 2%)");
    let job = JobSizeSpec {
        scv: 10.0,
        f: 0.5,
        k: 1,
    };
    let spec = PolicySpec::parse("random").unwrap();
    for &lambda in &[0.3f64, 0.5, 0.7] {
        let sim = astlb_cli::runner::SimSettings {
            n: 1,
            runs: 40,
            horizon: Some(1e6),
            warmup: 0.3,
            seed: 0x9e1,
            with_replacement: false,
        };
        let out = simulate_point(&spec, lambda, 1, None, None, &job, &sim).unwrap();
        // E[X^2] = scv + 1 at unit mean
        let want = lambda * 11.0 / (2.0 * (1.0 - lambda));
        let rel = (out.ew - want).abs() / want;
        gate.check(
            &format!("lambda={lambda}"),
            rel < 0.02,
            format!(
                "sim {:.4} vs P-K {:.4} (rel {:.2}%)",
                out.ew,
                want,
                rel * 100.0
            ),
        );
    }
    gate.finish();
}

#[test]
fn criterion_5_convergence_behavior() {
    let mut gate = Gate::new("criterion 5 (residual 1e-10 in <50 iterations, monotone after 5)");
    let (ph, grid) = figure_settings();
    for (name, policy) in figure_policies() {
        let res = fixed_point(&policy, 0.8, &ph, &grid, 5, &FixedPointOptions::default())
            .unwrap();
        let iters = res.iterations;
        let monotone = res
            .residuals
            .windows(2)
            .skip(5)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-9));
        gate.check(
            name,
            iters < 50 && res.final_residual() < 1e-10 && monotone && !res.damped,
            format!(
                "{iters} iterations, final residual {:.2e}, monotone-after-5 {monotone}",
                res.final_residual()
            ),
        );
    }
    gate.finish();
}

fn identity_violations(
    label: &str,
    res: &FixedPointResult,
    ph: &PhaseTypeDist,
    lambda: f64,
    d: usize,
    gate: &mut Gate,
) {
    let pi = &res.pi;
    gate.check(
        &format!("{label}: idle mass"),
        (pi.idle() - (1.0 - lambda)).abs() <= 1e-8,
        format!("pi0 {:.10} vs {:.10}", pi.idle(), 1.0 - lambda),
    );
    gate.check(
        &format!("{label}: total mass"),
        (pi.total() - 1.0).abs() <= 1e-10,
        format!("sum {:.12}", pi.total()),
    );
    let prepared = res.prepared();
    let join = join_law(pi, &prepared, d);
    gate.check(
        &format!("{label}: busy-join mass"),
        (join.busy_join() - lambda.powi(d as i32)).abs() <= 1e-8,
        format!(
            "{:.10} vs lambda^d {:.10}",
            join.busy_join(),
            lambda.powi(d as i32)
        ),
    );
    let mut flow = pi.idle() * res.rates.idle_rate();
    for k in 1..=res.grid.r() + 1 {
        for ell in 1..=pi.buffer() {
            flow += pi.x(k, ell) * res.rates.rate(k, ell);
        }
    }
    gate.check(
        &format!("{label}: flow conservation"),
        (flow - lambda).abs() <= 1e-8,
        format!("offered {:.10} vs {lambda}", flow),
    );
    let means = mean_metrics(pi, lambda);
    let via_tail = mean_wait_from_tail(&join, ph).unwrap();
    gate.check(
        &format!("{label}: E[W] two routes"),
        (means.ew - via_tail).abs() <= 1e-4,
        format!("moments {:.8} vs tail integral {:.8}", means.ew, via_tail),
    );
}

#[test]
fn criterion_6_identity_suite() {
    let mut gate = Gate::new("criterion 6 (fixed-point identities)");
    let settings = SolveSettings::default();
    for row in reference_rows() {
        let outcome = solve_reference(&row, &settings).unwrap();
        let ph = row.job.build().unwrap();
        identity_violations(row.label, &outcome.result, &ph, row.lambda, row.d, &mut gate);
    }
    let (ph, grid) = figure_settings();
    for (name, policy) in figure_policies() {
        let res =
            fixed_point(&policy, 0.8, &ph, &grid, 5, &FixedPointOptions::default()).unwrap();
        identity_violations(name, &res, &ph, 0.8, 5, &mut gate);
    }
    gate.finish();
}

#[test]
fn criterion_7_qualitative_claims() {
    let mut gate = Gate::new("criterion 7 (relative-improvement signs and fitted small-job means)");
    let (ph, grid) = figure_settings();
    let opts = FixedPointOptions::default();
    let d = 5;
    let ew_of = |policy: &Policy, lambda: f64| -> f64 {
        let res = fixed_point(policy, lambda, &ph, &grid, d, &opts).unwrap();
        mean_metrics(&res.pi, lambda).ew
    };

    // (a) queue-length-focused policies improve at every load
    let loads: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let baselines: Vec<f64> = loads.iter().map(|&l| ew_of(&Policy::Sq, l)).collect();
    for (name, policy) in [
        ("sq-rtb", Policy::SqRtb),
        ("sq-re:2", Policy::SqRe { s: 20 }),
        ("sq-rtb-re:2", Policy::SqRtbRe { s: 20 }),
    ] {
        let min_rel = loads
            .iter()
            .zip(&baselines)
            .map(|(&l, &base)| relative_improvement(base, ew_of(&policy, l)))
            .fold(f64::INFINITY, f64::min);
        gate.check(
            &format!("(a) {name} improves for all loads"),
            min_rel > 0.0,
            format!("min relative improvement {min_rel:.4}"),
        );
    }

    // (b) attained-service-only policies cross from better to worse
    let mut loads_ext = loads.clone();
    loads_ext.push(0.95);
    let mut baselines_ext = baselines.clone();
    baselines_ext.push(ew_of(&Policy::Sq, 0.95));
    for (name, policy) in [("las", Policy::Las), ("re:2", Policy::Re { s: 20 })] {
        let rels: Vec<f64> = loads_ext
            .iter()
            .zip(&baselines_ext)
            .map(|(&l, &base)| relative_improvement(base, ew_of(&policy, l)))
            .collect();
        let crosses = rels.first().copied().unwrap_or(0.0) > 0.0
            && rels.iter().any(|&r| r < 0.0);
        gate.check(
            &format!("(b) {name} has a crossing load"),
            crosses,
            format!(
                "rel at 0.1: {:.3}, min over grid: {:.3}",
                rels[0],
                rels.iter().fold(f64::INFINITY, |a, &b| a.min(b))
            ),
        );
    }

    // (c) fitted short-branch means
    let half = MErlangSpec::fit(10.0, 0.5, 1).unwrap().small_job_mean();
    let tenth = MErlangSpec::fit(10.0, 0.1, 1).unwrap().small_job_mean();
    gate.check(
        "(c) small-job mean at f=1/2",
        (half - 0.53).abs() <= 0.01,
        format!("{half:.4}"),
    );
    gate.check(
        "(c) small-job mean at f=1/10",
        (tenth - 0.12).abs() <= 0.01,
        format!("{tenth:.4}"),
    );
    gate.finish();
}

#[test]
fn criterion_8_sweep_budget_and_shapes() {
    let mut gate = Gate::new("criterion 8 (full sweep under 15 minutes, plateau-then-decline)");
    let policies: Vec<PolicySpec> = [
        "sq", "sq-rtb", "sq-re:2", "sq-rtb-re:2", "las", "las-qtb", "re:2", "lew",
    ]
    .iter()
    .map(|s| PolicySpec::parse(s).unwrap())
    .collect();
    let lambdas: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    let job = JobSizeSpec {
        scv: 10.0,
        f: 0.5,
        k: 1,
    };
    let started = Instant::now();
    let rows = sweep(
        &policies,
        &lambdas,
        5,
        Some(0.1),
        None,
        &job,
        &SolveSettings::default(),
        None,
    )
    .unwrap();
    let elapsed = started.elapsed();
    gate.check(
        "sweep completes in time",
        elapsed.as_secs() < 15 * 60,
        format!("{} points in {:.1?}", rows.len(), elapsed),
    );
    assert_eq!(rows.len(), policies.len() * lambdas.len());

    // figure-level curve shape: an early plateau, then decline toward
    // saturation, for every policy that uses attained service time
    for spec in policies.iter().skip(1) {
        let name = spec.to_string();
        let rels: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.policy == name)
            .map(|r| (r.lambda, r.ew_rel_vs_sq.unwrap()))
            .collect();
        let (peak_load, peak) = rels
            .iter()
            .copied()
            .fold((0.0, f64::NEG_INFINITY), |acc, (l, r)| {
                if r > acc.1 {
                    (l, r)
                } else {
                    acc
                }
            });
        let last = rels.last().unwrap().1;
        gate.check(
            &format!("{name} peaks early and declines"),
            peak_load <= 0.75 && last < peak - 0.02,
            format!("peak {peak:.3} at load {peak_load:.2}, value at 0.95: {last:.3}"),
        );
    }
    gate.finish();
}
