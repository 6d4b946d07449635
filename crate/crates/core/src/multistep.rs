//! Multiple-step-ahead bands.
//!
//! After observing `Y_s` (`s = 0, ..., T-1`) one tracker per lag `tau`
//! issues an interval for `Y_{s+tau}`, as long as `s + tau <= T`. Track
//! `tau` learns from its own interval once the target is revealed, so it
//! sees its first miss indicator at time `tau`. The conformity score of a
//! trajectory is the largest excess of any realized value over any interval
//! issued for it, i.e. the excess over the intersection of the historical
//! regions covering that step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{Tracker, TrackerKind, WarmStart};
use crate::conformal::{expand_interval, relative_excess, Aggregation, CafhtConfig, ScoreKind};
use crate::error::{Error, Result};
use crate::forecaster::Forecasts;
use crate::quantile::empirical_quantile;
use crate::trajectory::{Interval, Trajectory, CLIPPED_INFINITE_WIDTH};
use crate::tuning::{GammaGrid, TuningOutcome, TuningRow};

/// Intervals indexed by emission time `s` and lag `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepBand {
    lags: usize,
    // rows[s][tau - 1][j] targets Y_{s + tau}.
    rows: Vec<Vec<Vec<Interval>>>,
}

impl MultiStepBand {
    pub fn new(rows: Vec<Vec<Vec<Interval>>>, lags: usize) -> Result<Self> {
        let horizon = rows.len();
        if horizon == 0 || lags == 0 {
            return Err(Error::Shape("multi-step band is empty".into()));
        }
        let dim = rows[0].first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Shape("multi-step band has no dimensions".into()));
        }
        for (s, row) in rows.iter().enumerate() {
            if row.len() != lags.min(horizon - s) || row.iter().any(|ivs| ivs.len() != dim) {
                return Err(Error::Shape(format!(
                    "multi-step band row {s} is malformed"
                )));
            }
        }
        Ok(Self { lags, rows })
    }

    /// Number of steps `T` of the underlying trajectory.
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn dim(&self) -> usize {
        self.rows[0][0].len()
    }

    /// Intervals for `Y_{s+tau}` emitted at time `s`; `None` past the horizon.
    pub fn get(&self, s: usize, tau: usize) -> Option<&[Interval]> {
        self.rows
            .get(s)?
            .get(tau.checked_sub(1)?)
            .map(Vec::as_slice)
    }

    /// `(s, tau, intervals)` in emission order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &[Interval])> {
        self.rows.iter().enumerate().flat_map(|(s, row)| {
            row.iter()
                .enumerate()
                .map(move |(k, ivs)| (s, k + 1, ivs.as_slice()))
        })
    }

    pub fn map(&self, mut f: impl FnMut(&Interval) -> Interval) -> Self {
        Self {
            lags: self.lags,
            rows: self
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|ivs| ivs.iter().map(&mut f).collect())
                        .collect()
                })
                .collect(),
        }
    }

    /// Mean reported width over every emitted interval.
    pub fn mean_width(&self) -> f64 {
        let (sum, count) = self
            .entries()
            .flat_map(|(_, _, ivs)| ivs.iter())
            .fold((0.0, 0usize), |(s, c), iv| (s + iv.reported_width(), c + 1));
        sum / count as f64
    }

    fn check_matches(&self, traj: &Trajectory) -> Result<()> {
        if self.horizon() != traj.horizon() || self.dim() != traj.dim() {
            return Err(Error::Shape(format!(
                "multi-step band is {}x{} but trajectory {} is {}x{}",
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

/// Whether every emitted interval contains its realized target.
pub fn covers_multistep(band: &MultiStepBand, traj: &Trajectory) -> Result<bool> {
    band.check_matches(traj)?;
    Ok(band.entries().all(|(s, tau, ivs)| {
        ivs.iter()
            .enumerate()
            .all(|(j, iv)| iv.contains(traj.value(s + tau, j)))
    }))
}

/// Multi-step settings layered on a single-step configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiStepConfig {
    pub base: CafhtConfig,
    /// Number of lags `H`.
    pub lags: usize,
    /// Learning rate of lag `tau` is `gamma * decay^(tau - 1)`.
    pub decay: f64,
}

impl MultiStepConfig {
    pub fn new(base: CafhtConfig, lags: usize) -> Self {
        Self {
            base,
            lags,
            decay: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.lags == 0 {
            return Err(Error::Config("number of lags must be at least 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "gamma decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if self.base.aggregation != Aggregation::LInf {
            return Err(Error::Config(
                "multi-step scores support only l-infinity aggregation".into(),
            ));
        }
        Ok(())
    }

    pub fn gamma_for_lag(&self, gamma: f64, tau: usize) -> f64 {
        gamma * self.decay.powi(tau as i32 - 1)
    }
}

/// Lag-`tau` absolute residuals `|Y_{s+tau} - Yhat|`, grouped by dimension.
pub fn lagged_residuals(
    trajs: &[Trajectory],
    forecasts: &[Forecasts],
    tau: usize,
) -> Vec<Vec<f64>> {
    let dim = trajs[0].dim();
    let mut out = vec![Vec::new(); dim];
    for (tr, fc) in trajs.iter().zip(forecasts) {
        for s in 0..tr.horizon() {
            if let Some(pred) = fc.lagged(s, tau) {
                for (j, res) in out.iter_mut().enumerate() {
                    res.push((tr.value(s + tau, j) - pred[j]).abs());
                }
            }
        }
    }
    out
}

/// One warm start per lag, each from that lag's training residuals. Lag 1
/// uses `seed` itself, so `H = 1` matches the single-step warm start.
pub fn multistep_warm_start(
    trajs: &[Trajectory],
    forecasts: &[Forecasts],
    lags: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<WarmStart>> {
    (1..=lags)
        .map(|tau| {
            let res = lagged_residuals(trajs, forecasts, tau);
            WarmStart::standard(&res, alpha, seed.wrapping_add(tau as u64 - 1))
        })
        .collect()
}

/// Raw multi-step band from `H` parallel lagged trackers per dimension.
pub fn run_multistep_aci(
    forecasts: &Forecasts,
    traj: &Trajectory,
    kind: TrackerKind,
    gamma: f64,
    config: &MultiStepConfig,
    warm: &[WarmStart],
) -> Result<MultiStepBand> {
    forecasts.check_matches(traj)?;
    let lags = config.lags;
    if forecasts.lags() < lags {
        return Err(Error::Shape(format!(
            "forecasts cover {} lags, {} requested",
            forecasts.lags(),
            lags
        )));
    }
    if warm.len() < lags || warm.iter().any(|w| w.dim() != traj.dim()) {
        return Err(Error::Shape(
            "warm starts do not match lags and dimension".into(),
        ));
    }
    let horizon = traj.horizon();
    let dim = traj.dim();
    let mut rows: Vec<Vec<Vec<Interval>>> = (0..horizon)
        .map(|s| vec![Vec::with_capacity(dim); lags.min(horizon - s)])
        .collect();
    for j in 0..dim {
        for tau in 1..=lags {
            let mut tracker = Tracker::with_gamma(
                kind,
                config.gamma_for_lag(gamma, tau),
                config.base.alpha_aci,
                &warm[tau - 1],
                j,
            );
            for s in 0..horizon {
                if s >= tau {
                    tracker.observe(s, traj.value(s, j));
                }
                if let Some(pred) = forecasts.lagged(s, tau) {
                    rows[s][tau - 1].push(tracker.issue(s + tau, pred[j]));
                }
            }
        }
    }
    MultiStepBand::new(rows, lags)
}

/// Largest (additive or width-relative) excess of any realized value over
/// any interval issued for it.
pub fn multistep_score(band: &MultiStepBand, traj: &Trajectory, kind: ScoreKind) -> Result<f64> {
    band.check_matches(traj)?;
    let mut score = 0.0f64;
    for (s, tau, ivs) in band.entries() {
        for (j, iv) in ivs.iter().enumerate() {
            let y = traj.value(s + tau, j);
            let e = match kind {
                ScoreKind::Additive => iv.excess(y),
                ScoreKind::Multiplicative => relative_excess(iv, y),
            };
            score = score.max(e);
        }
    }
    Ok(score)
}

pub fn expand_multistep(band: &MultiStepBand, margin: f64, kind: ScoreKind) -> MultiStepBand {
    band.map(|iv| expand_interval(iv, margin, kind))
}

fn raw_multistep_bands(
    trajs: &[Trajectory],
    forecasts: &[Forecasts],
    gamma: f64,
    config: &MultiStepConfig,
    warm: &[WarmStart],
) -> Result<Vec<MultiStepBand>> {
    trajs
        .par_iter()
        .zip(forecasts)
        .map(|(tr, fc)| run_multistep_aci(fc, tr, config.base.tracker, gamma, config, warm))
        .collect()
}

fn scores_of(bands: &[MultiStepBand], trajs: &[Trajectory], kind: ScoreKind) -> Result<Vec<f64>> {
    bands
        .iter()
        .zip(trajs)
        .map(|(b, tr)| multistep_score(b, tr, kind))
        .collect()
}

/// Calibrated multi-step predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepPredictor {
    pub gamma: f64,
    pub margin: f64,
    pub level: f64,
    pub calibration_size: usize,
    pub config: MultiStepConfig,
    pub warm: Vec<WarmStart>,
}

pub fn calibrate_multistep(
    cal: &[Trajectory],
    forecasts: &[Forecasts],
    gamma: f64,
    config: &MultiStepConfig,
    warm: &[WarmStart],
) -> Result<MultiStepPredictor> {
    calibrate_multistep_at_level(cal, forecasts, gamma, config, warm, 1.0 - config.base.alpha)
}

pub fn calibrate_multistep_at_level(
    cal: &[Trajectory],
    forecasts: &[Forecasts],
    gamma: f64,
    config: &MultiStepConfig,
    warm: &[WarmStart],
    level: f64,
) -> Result<MultiStepPredictor> {
    config.validate()?;
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let bands = raw_multistep_bands(cal, forecasts, gamma, config, warm)?;
    let scores = scores_of(&bands, cal, config.base.score)?;
    Ok(MultiStepPredictor {
        gamma,
        margin: empirical_quantile(&scores, level)?,
        level,
        calibration_size: cal.len(),
        config: *config,
        warm: warm.to_vec(),
    })
}

impl MultiStepPredictor {
    pub fn raw_band(&self, forecasts: &Forecasts, traj: &Trajectory) -> Result<MultiStepBand> {
        run_multistep_aci(
            forecasts,
            traj,
            self.config.base.tracker,
            self.gamma,
            &self.config,
            &self.warm,
        )
    }

    pub fn predict_multistep(
        &self,
        forecasts: &Forecasts,
        traj: &Trajectory,
    ) -> Result<MultiStepBand> {
        Ok(expand_multistep(
            &self.raw_band(forecasts, traj)?,
            self.margin,
            self.config.base.score,
        ))
    }
}

/// Width-minimizing rate for multi-step bands at quantile `level`.
pub fn select_gamma_multistep(
    trajs: &[Trajectory],
    forecasts: &[Forecasts],
    grid: &GammaGrid,
    config: &MultiStepConfig,
    warm: &[WarmStart],
    level: f64,
) -> Result<TuningOutcome> {
    config.validate()?;
    if trajs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut rows = grid
        .values()
        .par_iter()
        .map(|&gamma| {
            let bands = raw_multistep_bands(trajs, forecasts, gamma, config, warm)?;
            let scores = scores_of(&bands, trajs, config.base.score)?;
            let margin = empirical_quantile(&scores, level)?;
            let avg_width = if margin.is_finite() {
                bands
                    .iter()
                    .map(|b| expand_multistep(b, margin, config.base.score).mean_width())
                    .sum::<f64>()
                    / bands.len() as f64
            } else {
                CLIPPED_INFINITE_WIDTH
            };
            Ok(TuningRow {
                gamma,
                avg_width,
                quantile: margin,
                selected: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.quantile.is_finite())
        .fold(None, |best: Option<usize>, (i, r)| match best {
            Some(b) if rows[b].avg_width <= r.avg_width => Some(b),
            _ => Some(i),
        });
    let idx = best.unwrap_or(0);
    rows[idx].selected = true;
    Ok(TuningOutcome {
        gamma: rows[idx].gamma,
        rows,
        all_infinite: best.is_none(),
    })
}

/// Select on `cal1`, calibrate on `cal2`.
pub fn calibrate_multistep_split(
    cal1: (&[Trajectory], &[Forecasts]),
    cal2: (&[Trajectory], &[Forecasts]),
    grid: &GammaGrid,
    config: &MultiStepConfig,
    warm: &[WarmStart],
) -> Result<(MultiStepPredictor, TuningOutcome)> {
    let tuning =
        select_gamma_multistep(cal1.0, cal1.1, grid, config, warm, 1.0 - config.base.alpha)?;
    let p = calibrate_multistep(cal2.0, cal2.1, tuning.gamma, config, warm)?;
    Ok((p, tuning))
}
