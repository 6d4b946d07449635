//! Synthetic AR(3) trajectories with heterogeneous noise, and dataset splits.
//!
//! Each trajectory is drawn from its own RNG stream keyed by `(seed, id)`,
//! so generation is independent of thread count. Within a stream the
//! hardness draw comes first and the Gaussian innovations follow, which
//! makes sets generated with different hard fractions share their
//! underlying randomness.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Label, Role, Trajectory, TrajectorySet};

pub const AR_COEFFICIENTS: [f64; 3] = [0.9, 0.1, -0.2];
pub const DEFAULT_HARDNESS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseProfile {
    /// Variance `t * k` (hard) or `t` (easy).
    Dynamic,
    /// Variance `k` (hard) or `1` (easy).
    Static,
}

impl NoiseProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dynamic => "dynamic",
            Self::Static => "static",
        }
    }
}

impl std::str::FromStr for NoiseProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Self::Dynamic),
            "static" => Ok(Self::Static),
            _ => Err(Error::Config(format!(
                "unknown noise profile '{s}' (expected dynamic or static)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub profile: NoiseProfile,
    /// Hard fraction of training and calibration trajectories.
    pub delta: f64,
    pub k: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub d: usize,
    pub seed: u64,
    /// Hard fraction of test trajectories; `delta` when absent.
    pub delta_test: Option<f64>,
    /// Multiplies every noise variance.
    pub noise_scale: f64,
    pub coefficients: Vec<f64>,
    /// `X_0, X_{-1}, ...`; missing lags are zero.
    pub initial_lags: Vec<f64>,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            profile: NoiseProfile::Dynamic,
            delta: 0.1,
            k: DEFAULT_HARDNESS,
            horizon: 100,
            d: 1,
            seed: 0,
            delta_test: None,
            noise_scale: 1.0,
            coefficients: AR_COEFFICIENTS.to_vec(),
            initial_lags: Vec::new(),
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.delta) || !self.delta_test.is_none_or(unit) {
            return Err(Error::Config("hard fractions must lie in [0, 1]".into()));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!(
                "hardness multiplier must be positive, got {}",
                self.k
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise scale must be non-negative".into()));
        }
        if self.horizon == 0 || self.d == 0 {
            return Err(Error::Config("T and d must be at least 1".into()));
        }
        if self.coefficients.is_empty() || self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config(
                "AR coefficients must be finite and non-empty".into(),
            ));
        }
        if self.initial_lags.len() > self.coefficients.len() {
            return Err(Error::Config(
                "more initial lags than AR coefficients".into(),
            ));
        }
        Ok(())
    }

    pub fn test_delta(&self) -> f64 {
        self.delta_test.unwrap_or(self.delta)
    }

    fn variance(&self, hard: bool, t: usize) -> f64 {
        let base = if hard { self.k } else { 1.0 };
        let time = match self.profile {
            NoiseProfile::Dynamic => t as f64,
            NoiseProfile::Static => 1.0,
        };
        base * time * self.noise_scale
    }

    /// Trajectory `id` with hard fraction `delta`.
    pub fn trajectory(&self, id: usize, delta: f64) -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64);
        let hard = rng.gen::<f64>() < delta;
        let p = self.coefficients.len();
        let init: Vec<f64> = (0..p)
            .map(|i| self.initial_lags.get(i).copied().unwrap_or(0.0))
            .collect();
        // history[j][i] = X_{t-1-i} for dimension j
        let mut history = vec![init.clone(); self.d];
        let mut values = Vec::with_capacity(self.horizon + 1);
        values.push(vec![init[0]; self.d]);
        for t in 1..=self.horizon {
            let sd = self.variance(hard, t).sqrt();
            let mut row = Vec::with_capacity(self.d);
            for h in history.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = self
                    .coefficients
                    .iter()
                    .zip(h.iter())
                    .map(|(c, v)| c * v)
                    .sum::<f64>()
                    + sd * z;
                h.rotate_right(1);
                h[0] = x;
                row.push(x);
            }
            values.push(row);
        }
        Trajectory::new(id, values, if hard { Label::Hard } else { Label::Easy })
    }
}

/// `n` trajectories with ids `0..n` and hard fraction `cfg.delta`.
pub fn generate_ar(cfg: &ArConfig, n: usize) -> Result<TrajectorySet> {
    generate_ar_range(cfg, 0..n, cfg.delta, Role::Unassigned)
}

/// Trajectories for the given ids, e.g. a test set disjoint from training.
pub fn generate_ar_range(
    cfg: &ArConfig,
    ids: std::ops::Range<usize>,
    delta: f64,
    role: Role,
) -> Result<TrajectorySet> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(Error::Config("cannot generate an empty set".into()));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!(
            "hard fraction must lie in [0, 1], got {delta}"
        )));
    }
    let trajs = ids
        .into_par_iter()
        .map(|id| cfg.trajectory(id, delta))
        .collect::<Result<Vec<_>>>()?;
    TrajectorySet::new(trajs, role)
}

/// Fractions used by [`split_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_frac: f64,
    /// Share of the calibration trajectories used for rate selection.
    pub cal1_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.75,
            cal1_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: TrajectorySet,
    pub cal1: TrajectorySet,
    pub cal2: TrajectorySet,
}

impl Split {
    pub fn cal(&self) -> TrajectorySet {
        self.cal1
            .union(&self.cal2, Role::Cal)
            .expect("calibration halves share a shape")
    }
}

/// Uniformly random partition into train / cal1 / cal2, sized
/// `floor(train_frac n)` and `floor(cal1_frac * rest)`.
pub fn split_dataset(ds: &TrajectorySet, split: SplitConfig, seed: u64) -> Result<Split> {
    let frac_ok = |f: f64| f > 0.0 && f < 1.0;
    if !frac_ok(split.train_frac) || !frac_ok(split.cal1_frac) {
        return Err(Error::Config("split fractions must lie in (0, 1)".into()));
    }
    let n = ds.len();
    let n_train = (split.train_frac * n as f64).floor() as usize;
    let n_cal = n - n_train;
    let n_cal1 = (split.cal1_frac * n_cal as f64).floor() as usize;
    if n_train == 0 || n_cal1 == 0 || n_cal1 == n_cal {
        return Err(Error::Config(format!(
            "dataset of {n} trajectories is too small to split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>, role| {
        let mut picked = idx[range].to_vec();
        picked.sort_unstable();
        TrajectorySet::new(
            picked
                .into_iter()
                .map(|i| ds.trajectories()[i].clone())
                .collect(),
            role,
        )
    };
    Ok(Split {
        train: take(0..n_train, Role::Train)?,
        cal1: take(n_train..n_train + n_cal1, Role::Cal1)?,
        cal2: take(n_train + n_cal1..n, Role::Cal2)?,
    })
}
