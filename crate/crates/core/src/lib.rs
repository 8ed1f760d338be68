//! Solver and simulator for size-blind load balancing over FCFS servers that
//! report queue length together with the attained service time of the job in
//! process, measured on a coarse layer grid.
//!
//! * [`phasetype`] — phase-type job-size laws and the mixed-Erlang fitting
//!   used throughout.
//! * [`policies`] — the aversion-score policies and layer grids.
//! * [`numerics`] — subgenerator exponentials, integrals, stationary vectors.
//! * [`cavity`] — the large-system fixed point: embedded-chain steady state,
//!   state-dependent arrival rates, and the iterative solver.
//! * [`metrics`] — means, join law, waiting/response tails, diagnostics.
//! * [`simulator`] — finite-`N` discrete-event validation runs.

pub mod cavity;
pub mod metrics;
pub mod numerics;
pub mod phasetype;
pub mod policies;
pub mod simulator;

pub use cavity::{fixed_point, CavityDistribution, FixedPointOptions, FixedPointResult};
pub use metrics::{join_law, mean_metrics, MeanMetrics};
pub use phasetype::{fit_merlang, MErlangSpec, PhaseTypeDist};
pub use policies::{AversionScore, LayerGrid, Policy, ServerObservation};
pub use simulator::{run_experiment, run_replication, SimConfig, SimStats};
