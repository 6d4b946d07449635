//! Trajectories, intervals and prediction bands.
//!
//! A trajectory holds `T + 1` observations `Y_0, ..., Y_T` of a
//! `d`-dimensional process. Bands cover the steps `1..=T`; `Y_0` is the
//! initial position and is never predicted.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width reported for an interval with an infinite endpoint. Data are
/// normalized into `[-1, 1]`, so an uninformative interval clips to width 2.
pub const CLIPPED_INFINITE_WIDTH: f64 = 2.0;

/// Difficulty tag carried for evaluation only. Methods never read it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Hard,
    Easy,
    #[default]
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hard => "hard",
            Label::Easy => "easy",
            Label::Unlabeled => "",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    id: usize,
    values: Vec<Vec<f64>>,
    label: Label,
}

impl Trajectory {
    /// Builds a trajectory from `values[t][j]`, `t = 0..=T`.
    pub fn new(id: usize, values: Vec<Vec<f64>>, label: Label) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "trajectory {id} needs at least two steps, got {}",
                values.len()
            )));
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(Error::InvalidTrajectory(format!(
                "trajectory {id} has zero dimensions"
            )));
        }
        for (t, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::InvalidTrajectory(format!(
                    "trajectory {id} step {t} has dimension {} (expected {dim})",
                    v.len()
                )));
            }
            if let Some(x) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::InvalidTrajectory(format!(
                    "trajectory {id} step {t} has non-finite value {x}"
                )));
            }
        }
        Ok(Self { id, values, label })
    }

    /// One-dimensional convenience constructor.
    pub fn from_scalars(id: usize, values: &[f64], label: Label) -> Result<Self> {
        Self::new(id, values.iter().map(|&v| vec![v]).collect(), label)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    /// Number of predicted steps `T`.
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t]
    }

    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t][j]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Observations `Y_0..=Y_t`.
    pub fn prefix(&self, t: usize) -> &[Vec<f64>] {
        &self.values[..=t]
    }

    pub(crate) fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let values = self
            .values
            .iter()
            .map(|v| v.iter().enumerate().map(|(j, &x)| f(j, x)).collect())
            .collect();
        Self {
            id: self.id,
            values,
            label: self.label,
        }
    }
}

/// Closed interval on the extended real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        debug_assert!(lower <= upper, "interval [{lower}, {upper}] is inverted");
        Self { lower, upper }
    }

    pub fn centered(center: f64, radius: f64) -> Self {
        if radius.is_infinite() {
            return Self::unbounded();
        }
        Self::new(center - radius, center + radius)
    }

    pub fn unbounded() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }

    /// Raw width, possibly infinite.
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Width with infinite intervals reported as [`CLIPPED_INFINITE_WIDTH`].
    pub fn reported_width(&self) -> f64 {
        if self.is_finite() {
            self.width()
        } else {
            CLIPPED_INFINITE_WIDTH
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    /// Positive-part distance from `y` to the interval.
    pub fn excess(&self, y: f64) -> f64 {
        (self.lower - y).max(y - self.upper).max(0.0)
    }

    /// Widens both endpoints by `margin >= 0`.
    pub fn expand(&self, margin: f64) -> Self {
        if margin.is_infinite() || !self.is_finite() {
            return Self::unbounded();
        }
        Self::new(self.lower - margin, self.upper + margin)
    }
}

/// Per-step, per-dimension intervals for steps `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBand {
    steps: Vec<Vec<Interval>>,
}

impl PredictionBand {
    pub fn new(steps: Vec<Vec<Interval>>) -> Result<Self> {
        let Some(first) = steps.first() else {
            return Err(Error::Shape("band has no steps".into()));
        };
        let dim = first.len();
        if dim == 0 || steps.iter().any(|s| s.len() != dim) {
            return Err(Error::Shape(
                "band steps have inconsistent dimension".into(),
            ));
        }
        Ok(Self { steps })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].len()
    }

    /// Intervals for step `t` (1-based, matching trajectory time).
    pub fn at(&self, t: usize) -> &[Interval] {
        &self.steps[t - 1]
    }

    pub fn steps(&self) -> &[Vec<Interval>] {
        &self.steps
    }

    pub fn intervals(&self) -> impl Iterator<Item = &Interval> {
        self.steps.iter().flatten()
    }

    pub fn map(&self, mut f: impl FnMut(&Interval) -> Interval) -> Self {
        Self {
            steps: self
                .steps
                .iter()
                .map(|s| s.iter().map(&mut f).collect())
                .collect(),
        }
    }

    pub(crate) fn check_matches(&self, traj: &Trajectory) -> Result<()> {
        if self.horizon() != traj.horizon() || self.dim() != traj.dim() {
            return Err(Error::Shape(format!(
                "band is {}x{} but trajectory {} is {}x{}",
                self.horizon(),
                self.dim(),
                traj.id(),
                traj.horizon(),
                traj.dim()
            )));
        }
        Ok(())
    }
}

/// Mean reported width over every `(t, j)` cell of the band.
pub fn band_width_stats(band: &PredictionBand) -> f64 {
    let (sum, n) = band
        .intervals()
        .fold((0.0, 0usize), |(s, n), iv| (s + iv.reported_width(), n + 1));
    sum / n as f64
}

/// True iff every `Y_{t,j}`, `t = 1..=T`, lies in its closed interval.
pub fn covers_simultaneously(band: &PredictionBand, traj: &Trajectory) -> Result<bool> {
    band.check_matches(traj)?;
    Ok(band.steps().iter().enumerate().all(|(i, step)| {
        let y = traj.step(i + 1);
        step.iter().zip(y).all(|(iv, &v)| iv.contains(v))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Cal1,
    Cal2,
    Cal,
    Test,
    Unassigned,
}

/// Homogeneous, non-empty collection of trajectories.
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    trajectories: Vec<Trajectory>,
    role: Role,
}

impl TrajectorySet {
    pub fn new(trajectories: Vec<Trajectory>, role: Role) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return Err(Error::InvalidTrajectory("trajectory set is empty".into()));
        };
        let (horizon, dim) = (first.horizon(), first.dim());
        if let Some(bad) = trajectories
            .iter()
            .find(|tr| tr.horizon() != horizon || tr.dim() != dim)
        {
            return Err(Error::InvalidTrajectory(format!(
                "trajectory {} has shape T={} d={} but the set has T={horizon} d={dim}",
                bad.id(),
                bad.horizon(),
                bad.dim()
            )));
        }
        Ok(Self { trajectories, role })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].horizon()
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    /// Concatenates two sets with the same shape.
    pub fn union(&self, other: &TrajectorySet, role: Role) -> Result<Self> {
        let mut all = self.trajectories.clone();
        all.extend(other.trajectories.iter().cloned());
        Self::new(all, role)
    }
}

impl<'a> IntoIterator for &'a TrajectorySet {
    type Item = &'a Trajectory;
    type IntoIter = std::slice::Iter<'a, Trajectory>;

    fn into_iter(self) -> Self::IntoIter {
        self.trajectories.iter()
    }
}
