//! Conformalization of adaptive bands over exchangeable trajectories.
//!
//! Each calibration trajectory is run through the adaptive tracker and
//! reduced to a single conformity score: the largest margin by which its
//! raw band must be widened to contain the whole trajectory (additive), or
//! the same margin measured in units of the local band width
//! (multiplicative). The `ceil((1 - alpha)(m + 1))`-th smallest score widens
//! every future band, which yields simultaneous coverage of an entire
//! exchangeable test trajectory with probability at least `1 - alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{run_aci_band, Tracker, TrackerConfig, TrackerKind, WarmStart};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, Forecasts};
use crate::quantile::empirical_quantile;
use crate::trajectory::{Interval, PredictionBand, Trajectory};

/// Floor applied to band widths in multiplicative scores.
pub const MIN_WIDTH: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Additive,
    Multiplicative,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Additive => "additive",
            ScoreKind::Multiplicative => "multiplicative",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "multiplicative" => Ok(Self::Multiplicative),
            _ => Err(Error::Config(format!(
                "unknown score `{s}` (expected additive or multiplicative)"
            ))),
        }
    }
}

/// How per-dimension scores collapse to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    LInf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CafhtConfig {
    /// Target simultaneous miscoverage.
    pub alpha: f64,
    /// Level the inner tracker aims for; usually equal to `alpha`.
    pub alpha_aci: f64,
    pub score: ScoreKind,
    pub aggregation: Aggregation,
    pub tracker: TrackerKind,
}

impl CafhtConfig {
    pub fn new(alpha: f64, score: ScoreKind, tracker: TrackerKind) -> Self {
        Self {
            alpha,
            alpha_aci: alpha,
            score,
            aggregation: Aggregation::LInf,
            tracker,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.alpha_aci > 0.0 && self.alpha_aci < 1.0) {
            return Err(Error::Config(format!(
                "alpha_aci must be in (0, 1), got {}",
                self.alpha_aci
            )));
        }
        if self.aggregation == Aggregation::L2 && self.score == ScoreKind::Multiplicative {
            return Err(Error::Config(
                "l2 aggregation is only available with additive scores".into(),
            ));
        }
        Ok(())
    }

    pub fn tracker_config(&self, gamma: f64) -> TrackerConfig {
        TrackerConfig {
            kind: self.tracker,
            gamma,
            alpha: self.alpha_aci,
        }
    }
}

fn aggregate(per_dim: &[f64], agg: Aggregation) -> f64 {
    match agg {
        Aggregation::LInf => per_dim.iter().copied().fold(0.0, f64::max),
        Aggregation::L2 => per_dim.iter().map(|s| s * s).sum::<f64>().sqrt(),
    }
}

/// Per-dimension additive scores `max_t [l_t - Y_t]_+ v [Y_t - u_t]_+`.
pub fn additive_scores_per_dim(band: &PredictionBand, traj: &Trajectory) -> Result<Vec<f64>> {
    band.check_matches(traj)?;
    let mut out = vec![0.0f64; traj.dim()];
    for (i, step) in band.steps().iter().enumerate() {
        for (j, iv) in step.iter().enumerate() {
            out[j] = out[j].max(iv.excess(traj.value(i + 1, j)));
        }
    }
    Ok(out)
}

/// Additive conformity score; zero iff the band covers the trajectory.
pub fn additive_score(band: &PredictionBand, traj: &Trajectory, agg: Aggregation) -> Result<f64> {
    Ok(aggregate(&additive_scores_per_dim(band, traj)?, agg))
}

/// Width-normalized margin of `y` outside `iv`.
pub(crate) fn relative_excess(iv: &Interval, y: f64) -> f64 {
    let excess = iv.excess(y);
    if excess == 0.0 {
        0.0
    } else {
        excess / iv.width().max(MIN_WIDTH)
    }
}

/// Multiplicative conformity score (max over steps and dimensions).
pub fn multiplicative_score(band: &PredictionBand, traj: &Trajectory) -> Result<f64> {
    band.check_matches(traj)?;
    let mut score = 0.0f64;
    for (i, step) in band.steps().iter().enumerate() {
        for (j, iv) in step.iter().enumerate() {
            score = score.max(relative_excess(iv, traj.value(i + 1, j)));
        }
    }
    Ok(score)
}

pub fn conformity_score(
    band: &PredictionBand,
    traj: &Trajectory,
    kind: ScoreKind,
    agg: Aggregation,
) -> Result<f64> {
    match kind {
        ScoreKind::Additive => additive_score(band, traj, agg),
        ScoreKind::Multiplicative => multiplicative_score(band, traj),
    }
}

fn step_score(iv: &Interval, y: f64, kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::Additive => iv.excess(y),
        ScoreKind::Multiplicative => relative_excess(iv, y),
    }
}

/// Widens one raw interval by the conformal margin. The endpoints are the
/// extreme floats whose step score stays within `margin`, so `y` lies in
/// the result exactly when its score against `iv` is at most `margin`.
pub fn expand_interval(iv: &Interval, margin: f64, kind: ScoreKind) -> Interval {
    if margin == 0.0 {
        return *iv;
    }
    if margin.is_infinite() || !iv.is_finite() {
        return Interval::unbounded();
    }
    let radius = match kind {
        ScoreKind::Additive => margin,
        ScoreKind::Multiplicative => margin * iv.width().max(MIN_WIDTH),
    };
    let (mut lo, mut hi) = (iv.lower - radius, iv.upper + radius);
    if !lo.is_finite() || !hi.is_finite() {
        return Interval::unbounded();
    }
    let within = |y: f64| step_score(iv, y, kind) <= margin;
    while !within(hi) {
        hi = hi.next_down();
    }
    while within(hi.next_up()) {
        hi = hi.next_up();
    }
    while !within(lo) {
        lo = lo.next_up();
    }
    while within(lo.next_down()) {
        lo = lo.next_down();
    }
    Interval::new(lo, hi)
}

pub fn expand_band(band: &PredictionBand, margin: f64, kind: ScoreKind) -> PredictionBand {
    band.map(|iv| expand_interval(iv, margin, kind))
}

/// Raw bands for a batch of trajectories.
pub fn raw_bands(
    trajs: &[Trajectory],
    forecasts: &[Forecasts],
    tracker: &TrackerConfig,
    warm: &WarmStart,
) -> Result<Vec<PredictionBand>> {
    trajs
        .par_iter()
        .zip(forecasts)
        .map(|(tr, fc)| run_aci_band(fc, tr, tracker, warm))
        .collect()
}

/// Conformity scores of `trajs`, in order.
pub fn calibration_scores(
    trajs: &[Trajectory],
    forecasts: &[Forecasts],
    gamma: f64,
    config: &CafhtConfig,
    warm: &WarmStart,
) -> Result<Vec<f64>> {
    let tracker = config.tracker_config(gamma);
    trajs
        .par_iter()
        .zip(forecasts)
        .map(|(tr, fc)| {
            let band = run_aci_band(fc, tr, &tracker, warm)?;
            conformity_score(&band, tr, config.score, config.aggregation)
        })
        .collect()
}

/// A fitted conformal margin around the adaptive tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPredictor {
    pub gamma: f64,
    /// Conformal margin; `+inf` when the rank exceeds the calibration size.
    pub margin: f64,
    /// Quantile level the margin was computed at (`1 - alpha` or `1 - alpha'`).
    pub level: f64,
    pub calibration_size: usize,
    pub config: CafhtConfig,
    pub warm: WarmStart,
}

/// Scores the calibration trajectories at `gamma` and takes the
/// conformal `1 - alpha` quantile.
pub fn calibrate(
    cal: &[Trajectory],
    forecasts: &[Forecasts],
    gamma: f64,
    config: &CafhtConfig,
    warm: &WarmStart,
) -> Result<CalibratedPredictor> {
    calibrate_at_level(cal, forecasts, gamma, config, warm, 1.0 - config.alpha)
}

pub fn calibrate_at_level(
    cal: &[Trajectory],
    forecasts: &[Forecasts],
    gamma: f64,
    config: &CafhtConfig,
    warm: &WarmStart,
    level: f64,
) -> Result<CalibratedPredictor> {
    config.validate()?;
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let scores = calibration_scores(cal, forecasts, gamma, config, warm)?;
    Ok(CalibratedPredictor {
        gamma,
        margin: empirical_quantile(&scores, level)?,
        level,
        calibration_size: cal.len(),
        config: *config,
        warm: warm.clone(),
    })
}

impl CalibratedPredictor {
    pub fn tracker_config(&self) -> TrackerConfig {
        self.config.tracker_config(self.gamma)
    }

    /// Conformalizes a raw band produced with this predictor's tracker.
    pub fn expand(&self, raw: &PredictionBand) -> PredictionBand {
        expand_band(raw, self.margin, self.config.score)
    }

    /// Full band for a trajectory whose forecasts are known. Each interval
    /// depends only on the prefix before its step.
    pub fn predict_band(&self, forecasts: &Forecasts, traj: &Trajectory) -> Result<PredictionBand> {
        Ok(self.expand(&self.raw_band(forecasts, traj)?))
    }

    pub fn raw_band(&self, forecasts: &Forecasts, traj: &Trajectory) -> Result<PredictionBand> {
        run_aci_band(forecasts, traj, &self.tracker_config(), &self.warm)
    }

    /// Streaming interface starting from the initial position `y0`.
    pub fn session<'a>(
        &'a self,
        forecaster: &'a dyn Forecaster,
        y0: Vec<f64>,
    ) -> OnlineSession<'a> {
        let dim = y0.len();
        let cfg = self.tracker_config();
        OnlineSession {
            predictor: self,
            forecaster,
            trackers: (0..dim)
                .map(|j| Tracker::new(&cfg, &self.warm, j))
                .collect(),
            observed: vec![y0],
            issued: false,
        }
    }
}

/// Online loop: alternate [`OnlineSession::next_interval`] and
/// [`OnlineSession::observe`].
pub struct OnlineSession<'a> {
    predictor: &'a CalibratedPredictor,
    forecaster: &'a dyn Forecaster,
    trackers: Vec<Tracker>,
    observed: Vec<Vec<f64>>,
    issued: bool,
}

impl OnlineSession<'_> {
    /// Step index of the next interval.
    pub fn next_step(&self) -> usize {
        self.observed.len()
    }

    /// Issues the conformal intervals for the next step from the observed
    /// prefix alone.
    pub fn next_interval(&mut self) -> Result<Vec<Interval>> {
        if self.issued {
            return Err(Error::Config(
                "observe the current step before issuing the next".into(),
            ));
        }
        let t = self.next_step();
        let pred = self.forecaster.predict(&self.observed, 1)?.remove(0);
        if pred.len() != self.trackers.len() {
            return Err(Error::Shape("forecaster dimension mismatch".into()));
        }
        self.issued = true;
        Ok(self
            .trackers
            .iter_mut()
            .zip(pred)
            .map(|(tr, p)| self.predictor.expand_one(&tr.issue(t, p)))
            .collect())
    }

    pub fn observe(&mut self, y: Vec<f64>) -> Result<()> {
        if y.len() != self.trackers.len() {
            return Err(Error::Shape("observation dimension mismatch".into()));
        }
        if let Some(x) = y.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidTrajectory(format!(
                "non-finite observation {x}"
            )));
        }
        let t = self.next_step();
        for (tr, &v) in self.trackers.iter_mut().zip(&y) {
            tr.observe(t, v);
        }
        self.observed.push(y);
        self.issued = false;
        Ok(())
    }
}

impl CalibratedPredictor {
    fn expand_one(&self, iv: &Interval) -> Interval {
        expand_interval(iv, self.margin, self.config.score)
    }
}
