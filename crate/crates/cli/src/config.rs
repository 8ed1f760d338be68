//! Experiment configuration: policy grammar, job-size spec, grids, and the
//! flag/file merge.
//!
//! Policies are named `random`, `sq`, `sq-rtb`, `sq-re:T`, `sq-rtb-re:T`,
//! `las`, `las-qtb`, `re:T`, `lew`, with `T` a threshold time. Load grids are
//! written `start:step:end`, inclusive of both ends.

use anyhow::{anyhow, bail, Context, Result};
use astlb_core::phasetype::{fit_merlang, PhaseTypeDist};
use astlb_core::policies::{LayerGrid, Policy};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyName {
    Random,
    Sq,
    SqRtb,
    SqRe,
    SqRtbRe,
    Las,
    LasQtb,
    Re,
    Lew,
}

/// A parsed policy string; thresholds stay in time units until a grid exists.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub name: PolicyName,
    pub threshold: Option<f64>,
}

impl PolicySpec {
    pub fn parse(text: &str) -> Result<Self> {
        let (head, thresh) = match text.split_once(':') {
            Some((h, t)) => {
                let value: f64 = t
                    .parse()
                    .with_context(|| format!("bad threshold in policy `{text}`"))?;
                if !(value > 0.0) || !value.is_finite() {
                    bail!("threshold in policy `{text}` must be positive");
                }
                (h, Some(value))
            }
            None => (text, None),
        };
        let name = match head {
            "random" => PolicyName::Random,
            "sq" => PolicyName::Sq,
            "sq-rtb" => PolicyName::SqRtb,
            "sq-re" => PolicyName::SqRe,
            "sq-rtb-re" => PolicyName::SqRtbRe,
            "las" => PolicyName::Las,
            "las-qtb" => PolicyName::LasQtb,
            "re" => PolicyName::Re,
            "lew" => PolicyName::Lew,
            other => bail!(
                "unknown policy `{other}` (expected one of random, sq, sq-rtb, sq-re:T, \
                 sq-rtb-re:T, las, las-qtb, re:T, lew)"
            ),
        };
        let needs_threshold = matches!(name, PolicyName::SqRe | PolicyName::SqRtbRe | PolicyName::Re);
        if needs_threshold && thresh.is_none() {
            bail!("policy `{text}` needs a threshold, e.g. `{text}:2`");
        }
        if !needs_threshold && thresh.is_some() {
            bail!("policy `{head}` does not take a threshold");
        }
        Ok(Self {
            name,
            threshold: thresh,
        })
    }

    pub fn uses_layers(&self) -> bool {
        !matches!(self.name, PolicyName::Random | PolicyName::Sq)
    }

    /// Threshold-only policies can run without a layer width: the grid is
    /// just their threshold.
    pub fn threshold_only(&self) -> bool {
        matches!(self.name, PolicyName::SqRe | PolicyName::Re)
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = match self.name {
            PolicyName::Random => "random",
            PolicyName::Sq => "sq",
            PolicyName::SqRtb => "sq-rtb",
            PolicyName::SqRe => "sq-re",
            PolicyName::SqRtbRe => "sq-rtb-re",
            PolicyName::Las => "las",
            PolicyName::LasQtb => "las-qtb",
            PolicyName::Re => "re",
            PolicyName::Lew => "lew",
        };
        match self.threshold {
            Some(t) => write!(f, "{head}:{t}"),
            None => write!(f, "{head}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JobSizeSpec {
    pub scv: f64,
    pub f: f64,
    pub k: usize,
}

impl JobSizeSpec {
    pub fn build(&self) -> Result<PhaseTypeDist> {
        fit_merlang(self.scv, self.f, self.k)
            .map_err(|e| anyhow!("cannot fit job-size law (scv={}, f={}, k={}): {e}", self.scv, self.f, self.k))
    }
}

/// Default layer count: enough thresholds that only a 1e-3 fraction of job
/// sizes fall past the last one, capped at 400. Exposed as `--r`.
pub const DEFAULT_R_CAP: usize = 400;

pub fn default_layer_count(ph: &PhaseTypeDist, delta: f64) -> usize {
    let mut r = 1;
    while r < DEFAULT_R_CAP && ph.survival(r as f64 * delta) > 1e-3 {
        r += 1;
    }
    r
}

/// Resolves the layer grid for one policy.
pub fn resolve_grid(
    spec: &PolicySpec,
    delta: Option<f64>,
    r: Option<usize>,
    ph: &PhaseTypeDist,
) -> Result<LayerGrid> {
    if !spec.uses_layers() {
        return Ok(LayerGrid::single_layer());
    }
    match delta {
        None if spec.threshold_only() => {
            let t = spec.threshold.expect("threshold-only policies carry one");
            Ok(LayerGrid::from_thresholds(vec![t])?)
        }
        None => bail!("policy `{spec}` needs --delta"),
        Some(width) => {
            let r = r.unwrap_or_else(|| default_layer_count(ph, width));
            let grid = LayerGrid::uniform(width, r)?;
            if let Some(t) = spec.threshold {
                if grid.threshold_index(t).is_none() {
                    bail!(
                        "threshold {t} of `{spec}` is not a multiple of delta {width} within the grid"
                    );
                }
            }
            Ok(grid)
        }
    }
}

/// Instantiates the core policy against a resolved grid.
pub fn resolve_policy(spec: &PolicySpec, grid: &LayerGrid, ph: &PhaseTypeDist) -> Result<Policy> {
    let s_index = |t: f64| -> Result<usize> {
        grid.threshold_index(t)
            .ok_or_else(|| anyhow!("threshold {t} not on the layer grid"))
    };
    Ok(match spec.name {
        PolicyName::Random => Policy::Random,
        PolicyName::Sq => Policy::Sq,
        PolicyName::SqRtb => Policy::SqRtb,
        PolicyName::SqRe => Policy::SqRe {
            s: s_index(spec.threshold.unwrap())?,
        },
        PolicyName::SqRtbRe => Policy::SqRtbRe {
            s: s_index(spec.threshold.unwrap())?,
        },
        PolicyName::Las => Policy::Las,
        PolicyName::LasQtb => Policy::LasQtb,
        PolicyName::Re => Policy::Re {
            s: s_index(spec.threshold.unwrap())?,
        },
        PolicyName::Lew => Policy::Lew { ph: ph.clone() },
    })
}

/// Inclusive `start:step:end` grid; a bare number is a one-point grid.
pub fn parse_lambda_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let grid = match parts.as_slice() {
        [single] => vec![single
            .parse::<f64>()
            .with_context(|| format!("bad load `{single}`"))?],
        [start, step, end] => {
            let start: f64 = start.parse().context("bad grid start")?;
            let step: f64 = step.parse().context("bad grid step")?;
            let end: f64 = end.parse().context("bad grid end")?;
            if !(step > 0.0) {
                bail!("grid step must be positive");
            }
            let count = ((end - start) / step + 1.0 + 1e-9).floor() as i64;
            (0..count.max(0)).map(|i| start + i as f64 * step).collect()
        }
        _ => bail!("load grid must be a number or start:step:end, got `{text}`"),
    };
    for &lambda in &grid {
        if !(0.0..1.0).contains(&lambda) {
            bail!("offered load must lie in [0, 1), got {lambda}");
        }
    }
    Ok(grid)
}

pub fn parse_policy_list(text: &str) -> Result<Vec<PolicySpec>> {
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(PolicySpec::parse)
        .collect()
}

/// `key=value` lines; `#` starts a comment. Keys mirror the long flag names.
#[derive(Debug, Default, Clone)]
pub struct FileConfig(HashMap<String, String>);

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut map = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected key=value, got `{raw}`",
                    path.display(),
                    lineno + 1
                )
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("config key `{key}`: {e}")),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.as_str())
    }
}
