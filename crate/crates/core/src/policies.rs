//! Aversion-score policies over `(layer, queue length)` server reports.
//!
//! A server reports its queue length `ell` and the layer `k` holding the
//! attained service time of the job in process (layer 0 means idle). A policy
//! maps each report to a tuple of reals, compared lexicographically; an
//! arriving job joins the sampled server with the smallest score, ties broken
//! uniformly at random.

use crate::phasetype::{PhaseTypeDist, PhaseTypeError};
use std::cmp::Ordering;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("layer thresholds must be strictly increasing and positive")]
    BadThresholds,
    #[error("layer width must be positive and finite, got {0}")]
    BadWidth(f64),
    #[error("threshold index {s} out of range (grid has r = {r})")]
    ThresholdOutOfRange { s: usize, r: usize },
    #[error("observation ({k}, {ell}) inconsistent: layer 0 means idle")]
    InconsistentObservation { k: usize, ell: u32 },
    #[error("layer {k} out of range for grid with r = {r}")]
    LayerOutOfRange { k: usize, r: usize },
    #[error("scores of different arity are not comparable ({0} vs {1})")]
    ArityMismatch(usize, usize),
    #[error(transparent)]
    PhaseType(#[from] PhaseTypeError),
}

/// Attained-service thresholds `c_0 = 0 < c_1 < ... < c_r`, with
/// `c_{r+1} = inf` implicit. The uniform grid has `c_k = k * delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrid {
    delta: Option<f64>,
    thresholds: Vec<f64>,
}

impl LayerGrid {
    pub fn uniform(delta: f64, r: usize) -> Result<Self, PolicyError> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(PolicyError::BadWidth(delta));
        }
        Ok(Self {
            delta: Some(delta),
            thresholds: (1..=r).map(|k| k as f64 * delta).collect(),
        })
    }

    /// Arbitrary strictly increasing thresholds.
    pub fn from_thresholds(thresholds: Vec<f64>) -> Result<Self, PolicyError> {
        if thresholds
            .iter()
            .any(|&c| !(c > 0.0) || !c.is_finite())
            || thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(PolicyError::BadThresholds);
        }
        Ok(Self {
            delta: None,
            thresholds,
        })
    }

    /// No finite thresholds: a busy server is always in layer 1.
    pub fn single_layer() -> Self {
        Self {
            delta: None,
            thresholds: Vec::new(),
        }
    }

    /// Number of finite thresholds.
    pub fn r(&self) -> usize {
        self.thresholds.len()
    }

    pub fn delta(&self) -> Option<f64> {
        self.delta
    }

    /// `c_k` for `k` in `1..=r`.
    pub fn threshold(&self, k: usize) -> f64 {
        self.thresholds[k - 1]
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Width `c_k - c_{k-1}` of finite layer `k` in `1..=r`.
    pub fn width(&self, k: usize) -> f64 {
        if k == 1 {
            self.thresholds[0]
        } else {
            self.thresholds[k - 1] - self.thresholds[k - 2]
        }
    }

    /// Index `s` with `c_s == t`, if the threshold lies on the grid.
    pub fn threshold_index(&self, t: f64) -> Option<usize> {
        self.thresholds
            .iter()
            .position(|&c| (c - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|i| i + 1)
    }

    /// Layer of a job with attained service time `age`: idle maps to 0, a
    /// busy server with `age <= c_1` (including 0) to 1, `age in (c_{k-1}, c_k]`
    /// to `k`, and `age > c_r` to `r + 1`.
    pub fn layer_of(&self, age: f64, busy: bool) -> usize {
        if !busy {
            return 0;
        }
        debug_assert!(age >= 0.0);
        let r = self.r();
        if r == 0 {
            return 1;
        }
        if let Some(delta) = self.delta {
            let k = (age / delta).ceil() as usize;
            return k.clamp(1, r + 1);
        }
        self.thresholds.partition_point(|&c| c < age) + 1
    }
}

/// `(k, ell)` as reported by a server; `k = 0` if and only if `ell = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerObservation {
    pub layer: usize,
    pub queue: u32,
}

impl ServerObservation {
    pub fn idle() -> Self {
        Self { layer: 0, queue: 0 }
    }

    pub fn busy(layer: usize, queue: u32) -> Self {
        debug_assert!(layer >= 1 && queue >= 1);
        Self { layer, queue }
    }
}

const MAX_ARITY: usize = 3;

/// A point of `[0, inf)^n`, compared lexicographically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AversionScore {
    vals: [f64; MAX_ARITY],
    len: u8,
}

impl AversionScore {
    pub fn scalar(a: f64) -> Self {
        Self {
            vals: [a, 0.0, 0.0],
            len: 1,
        }
    }

    pub fn pair(a: f64, b: f64) -> Self {
        Self {
            vals: [a, b, 0.0],
            len: 2,
        }
    }

    pub fn triple(a: f64, b: f64, c: f64) -> Self {
        Self {
            vals: [a, b, c],
            len: 3,
        }
    }

    pub fn zero(arity: usize) -> Self {
        debug_assert!((1..=MAX_ARITY).contains(&arity));
        Self {
            vals: [0.0; MAX_ARITY],
            len: arity as u8,
        }
    }

    pub fn components(&self) -> &[f64] {
        &self.vals[..self.len as usize]
    }

    pub fn arity(&self) -> usize {
        self.len as usize
    }

    pub fn is_zero(&self) -> bool {
        self.components().iter().all(|&v| v == 0.0)
    }

    /// Lexicographic comparison assuming equal arity (hot path; the public
    /// entry point is [`compare`]).
    #[inline]
    pub fn cmp_same_arity(&self, other: &Self) -> Ordering {
        debug_assert_eq!(self.len, other.len);
        for i in 0..self.len as usize {
            match self.vals[i].partial_cmp(&other.vals[i]).unwrap() {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        Ordering::Equal
    }
}

/// Lexicographic order on scores of equal arity.
pub fn compare(a: &AversionScore, b: &AversionScore) -> Result<Ordering, PolicyError> {
    if a.arity() != b.arity() {
        return Err(PolicyError::ArityMismatch(a.arity(), b.arity()));
    }
    Ok(a.cmp_same_arity(b))
}

/// The policies under study. Threshold variants carry the index `s` of the
/// grid threshold acting as the exclusion time `T = c_s`; LEW carries the
/// job-size law it uses to estimate residual work.
#[derive(Debug, Clone)]
pub enum Policy {
    Random,
    Sq,
    SqRtb,
    SqRe { s: usize },
    SqRtbRe { s: usize },
    Las,
    LasQtb,
    Re { s: usize },
    Lew { ph: PhaseTypeDist },
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Random => write!(f, "random"),
            Policy::Sq => write!(f, "sq"),
            Policy::SqRtb => write!(f, "sq-rtb"),
            Policy::SqRe { .. } => write!(f, "sq-re"),
            Policy::SqRtbRe { .. } => write!(f, "sq-rtb-re"),
            Policy::Las => write!(f, "las"),
            Policy::LasQtb => write!(f, "las-qtb"),
            Policy::Re { .. } => write!(f, "re"),
            Policy::Lew { .. } => write!(f, "lew"),
        }
    }
}

impl Policy {
    pub fn threshold_index(&self) -> Option<usize> {
        match self {
            Policy::SqRe { s } | Policy::SqRtbRe { s } | Policy::Re { s } => Some(*s),
            _ => None,
        }
    }

    /// Score of one observation. `prepare` amortizes the LEW residual table;
    /// this entry point recomputes it per call.
    pub fn aversion(
        &self,
        obs: ServerObservation,
        grid: &LayerGrid,
    ) -> Result<AversionScore, PolicyError> {
        self.prepare(grid)?.score_checked(obs, grid)
    }

    /// Resolves the policy against a grid, precomputing whatever the score
    /// needs (the LEW residual means per layer).
    pub fn prepare(&self, grid: &LayerGrid) -> Result<PreparedPolicy, PolicyError> {
        let r = grid.r();
        if let Some(s) = self.threshold_index() {
            if s < 1 || s > r {
                return Err(PolicyError::ThresholdOutOfRange { s, r });
            }
        }
        let kind = match self {
            Policy::Random => PreparedKind::Random,
            Policy::Sq => PreparedKind::Sq,
            Policy::SqRtb => PreparedKind::SqRtb,
            Policy::SqRe { s } => PreparedKind::SqRe { s: *s },
            Policy::SqRtbRe { s } => PreparedKind::SqRtbRe { s: *s },
            Policy::Las => PreparedKind::Las,
            Policy::LasQtb => PreparedKind::LasQtb,
            Policy::Re { s } => PreparedKind::Re { s: *s },
            Policy::Lew { ph } => {
                // expected remaining work of the job in service, evaluated at
                // the layer's upper edge; the open top layer falls back to
                // c_r, the finest information available
                let mut residual = Vec::with_capacity(r + 2);
                residual.push(0.0); // layer 0 unused
                for k in 1..=r {
                    residual.push(ph.residual_mean(grid.threshold(k))?);
                }
                let top = if r == 0 { 0.0 } else { grid.threshold(r) };
                residual.push(ph.residual_mean(top)?);
                PreparedKind::Lew { residual }
            }
        };
        Ok(PreparedPolicy { kind })
    }
}

#[derive(Debug, Clone)]
enum PreparedKind {
    Random,
    Sq,
    SqRtb,
    SqRe { s: usize },
    SqRtbRe { s: usize },
    Las,
    LasQtb,
    Re { s: usize },
    Lew { residual: Vec<f64> },
}

/// A policy resolved against a grid; `score` is cheap enough for the
/// simulator's per-arrival hot path.
#[derive(Debug, Clone)]
pub struct PreparedPolicy {
    kind: PreparedKind,
}

impl PreparedPolicy {
    pub fn arity(&self) -> usize {
        match self.kind {
            PreparedKind::Random
            | PreparedKind::Sq
            | PreparedKind::Las
            | PreparedKind::Re { .. }
            | PreparedKind::Lew { .. } => 1,
            PreparedKind::SqRtb | PreparedKind::SqRe { .. } | PreparedKind::LasQtb => 2,
            PreparedKind::SqRtbRe { .. } => 3,
        }
    }

    /// True when the score never reads the queue length, which makes the
    /// state-dependent arrival rates constant across queue lengths.
    pub fn queue_length_blind(&self) -> bool {
        matches!(
            self.kind,
            PreparedKind::Random | PreparedKind::Las | PreparedKind::Re { .. }
        )
    }

    #[inline]
    pub fn score(&self, k: usize, ell: u32) -> AversionScore {
        let kf = k as f64;
        let lf = ell as f64;
        match &self.kind {
            PreparedKind::Random => AversionScore::scalar(0.0),
            PreparedKind::Sq => AversionScore::scalar(lf),
            PreparedKind::SqRtb => AversionScore::pair(lf, kf),
            PreparedKind::SqRe { s } => {
                if ell == 0 {
                    AversionScore::zero(2)
                } else {
                    AversionScore::pair(1.0 + f64::from(k > *s), lf)
                }
            }
            PreparedKind::SqRtbRe { s } => AversionScore::triple(f64::from(k > *s), lf, kf),
            PreparedKind::Las => AversionScore::scalar(kf),
            PreparedKind::LasQtb => AversionScore::pair(kf, lf),
            PreparedKind::Re { s } => {
                if ell == 0 {
                    AversionScore::scalar(0.0)
                } else {
                    AversionScore::scalar(1.0 + f64::from(k > *s))
                }
            }
            PreparedKind::Lew { residual } => {
                if ell == 0 {
                    AversionScore::scalar(0.0)
                } else {
                    AversionScore::scalar((lf - 1.0) + residual[k.min(residual.len() - 1)])
                }
            }
        }
    }

    fn score_checked(
        &self,
        obs: ServerObservation,
        grid: &LayerGrid,
    ) -> Result<AversionScore, PolicyError> {
        if (obs.layer == 0) != (obs.queue == 0) {
            return Err(PolicyError::InconsistentObservation {
                k: obs.layer,
                ell: obs.queue,
            });
        }
        if obs.layer > grid.r() + 1 {
            return Err(PolicyError::LayerOutOfRange {
                k: obs.layer,
                r: grid.r(),
            });
        }
        Ok(self.score(obs.layer, obs.queue))
    }
}
