//! Data-driven selection of the tracker learning rate.
//!
//! Two routes are provided. [`select_gamma_split`] picks the width-minimizing
//! rate on a held-out half of the calibration data, leaving the other half
//! for calibration. [`calibrate_theory`] selects and calibrates on the same
//! trajectories, compensating for the selection step with a corrected level
//! `alpha' = max(alpha'_Markov, alpha'_DKW) <= alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::WarmStart;
use crate::conformal::{
    calibrate, calibrate_at_level, conformity_score, expand_band, raw_bands, CafhtConfig,
    CalibratedPredictor,
};
use crate::error::{Error, Result};
use crate::forecaster::Forecasts;
use crate::quantile::empirical_quantile;
use crate::special::inverse_beta_cdf;
use crate::trajectory::{band_width_stats, Trajectory};

pub const DEFAULT_MARKOV_B: f64 = 100.0;
/// Resolution of the candidate-level grid searched by the Markov inversion.
pub const MARKOV_LEVEL_STEP: f64 = 1e-4;

/// Strictly increasing list of positive learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GammaGrid(Vec<f64>);

impl GammaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("gamma grid is empty".into()));
        }
        if values.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::Config(
                "gamma grid values must be positive and finite".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "gamma grid must be strictly increasing".into(),
            ));
        }
        Ok(Self(values))
    }

    /// `0.001, 0.011, ..., 0.091, 0.1` followed by `0.2, ..., 0.9`.
    pub fn standard() -> Self {
        let mut v: Vec<f64> = (0..10).map(|k| (1 + 10 * k) as f64 / 1000.0).collect();
        v.push(0.1);
        v.extend((2..=9).map(|k| k as f64 / 10.0));
        Self(v)
    }

    /// `0.001, 0.01, 0.02, ..., 0.1` followed by `0.2, ..., 0.9`.
    pub fn standard_decimal() -> Self {
        let mut v = vec![0.001];
        v.extend((1..=10).map(|k| k as f64 / 100.0));
        v.extend((2..=9).map(|k| k as f64 / 10.0));
        Self(v)
    }

    pub fn single(gamma: f64) -> Result<Self> {
        Self::new(vec![gamma])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for GammaGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GammaGrid> for Vec<f64> {
    fn from(g: GammaGrid) -> Self {
        g.0
    }
}

/// One row of the tuning report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub gamma: f64,
    pub avg_width: f64,
    pub quantile: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningOutcome {
    pub gamma: f64,
    pub rows: Vec<TuningRow>,
    /// Every candidate produced an infinite margin; the smallest rate was
    /// returned.
    pub all_infinite: bool,
}

/// Picks the candidate with the narrowest conformalized bands on `trajs`,
/// with margins computed at `level` on the same trajectories.
///
/// Candidates with a finite margin always beat those without; remaining
/// ties go to the smaller rate.
pub fn select_gamma_at_level(
    trajs: &[Trajectory],
    forecasts: &[Forecasts],
    grid: &GammaGrid,
    config: &CafhtConfig,
    warm: &WarmStart,
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
            let bands = raw_bands(trajs, forecasts, &config.tracker_config(gamma), warm)?;
            let scores = bands
                .iter()
                .zip(trajs)
                .map(|(b, tr)| conformity_score(b, tr, config.score, config.aggregation))
                .collect::<Result<Vec<_>>>()?;
            let margin = empirical_quantile(&scores, level)?;
            let avg_width = bands
                .iter()
                .map(|b| band_width_stats(&expand_band(b, margin, config.score)))
                .sum::<f64>()
                / bands.len() as f64;
            Ok(TuningRow {
                gamma,
                avg_width,
                quantile: margin,
                selected: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        if !row.quantile.is_finite() {
            continue;
        }
        if best.is_none_or(|b| row.avg_width < rows[b].avg_width) {
            best = Some(i);
        }
    }
    let all_infinite = best.is_none();
    let idx = best.unwrap_or(0);
    rows[idx].selected = true;
    Ok(TuningOutcome {
        gamma: rows[idx].gamma,
        rows,
        all_infinite,
    })
}

/// Width-minimizing rate on the selection split at level `1 - alpha`.
pub fn select_gamma_split(
    cal1: &[Trajectory],
    forecasts: &[Forecasts],
    grid: &GammaGrid,
    config: &CafhtConfig,
    warm: &WarmStart,
) -> Result<TuningOutcome> {
    select_gamma_at_level(cal1, forecasts, grid, config, warm, 1.0 - config.alpha)
}

/// Select on `cal1`, calibrate on the disjoint `cal2`.
pub fn calibrate_split(
    cal1: (&[Trajectory], &[Forecasts]),
    cal2: (&[Trajectory], &[Forecasts]),
    grid: &GammaGrid,
    config: &CafhtConfig,
    warm: &WarmStart,
) -> Result<(CalibratedPredictor, TuningOutcome)> {
    let tuning = select_gamma_split(cal1.0, cal1.1, grid, config, warm)?;
    let cp = calibrate(cal2.0, cal2.1, tuning.gamma, config, warm)?;
    Ok((cp, tuning))
}

/// `c(L) = sqrt(2) L e^{-log 2L} / (sqrt(log 2L) + sqrt(log 2L + 4/pi))`.
pub fn dkw_constant(grid_size: usize) -> f64 {
    let l = grid_size as f64;
    let log2l = (2.0 * l).ln();
    let num = std::f64::consts::SQRT_2 * l * (-log2l).exp();
    num / (log2l.sqrt() + (log2l + 4.0 / std::f64::consts::PI).sqrt())
}

/// Level correcting for selection among `grid_size` candidates via the DKW
/// inequality, clamped into `(0, alpha]`.
pub fn dkw_corrected_level(m: usize, grid_size: usize, alpha: f64) -> Result<f64> {
    if m == 0 || grid_size == 0 {
        return Err(Error::Config("m and L must be positive".into()));
    }
    let mf = m as f64;
    let err = (((2.0 * grid_size as f64).ln() / 2.0).sqrt() + dkw_constant(grid_size)) / mf.sqrt();
    let corrected = 1.0 - (1.0 - alpha + err) / (1.0 + 1.0 / mf);
    if corrected <= 0.0 {
        return Err(Error::CalibrationTooSmall);
    }
    Ok(corrected.min(alpha))
}

/// `floor(level * (m + 1))`, the count of scores above the calibrated rank.
pub fn markov_rank(m: usize, level: f64) -> usize {
    (level * (m as f64 + 1.0) + 1e-9).floor() as usize
}

/// Markov lower bound on coverage when calibrating at miscoverage `ahat`:
/// `I^{-1}(1/(bL); m + 1 - l, l) * (1 - 1/b)` with `l = floor(ahat (m+1))`.
/// `None` when `l = 0`.
pub fn markov_bound(m: usize, grid_size: usize, ahat: f64, b: f64) -> Result<Option<f64>> {
    let l = markov_rank(m, ahat);
    if l == 0 {
        return Ok(None);
    }
    markov_bound_for_rank(m, grid_size, l, b).map(Some)
}

fn markov_bound_for_rank(m: usize, grid_size: usize, l: usize, b: f64) -> Result<f64> {
    let x = inverse_beta_cdf(1.0 / (b * grid_size as f64), (m + 1 - l) as f64, l as f64)?;
    Ok(x * (1.0 - 1.0 / b))
}

/// Largest candidate `ahat` in `{alpha, alpha - 1e-4, ...}` whose Markov
/// bound reaches `1 - alpha`.
pub fn markov_corrected_level(m: usize, grid_size: usize, alpha: f64, b: f64) -> Result<f64> {
    if m == 0 || grid_size == 0 {
        return Err(Error::Config("m and L must be positive".into()));
    }
    if !(b > 1.0) {
        return Err(Error::Config(format!(
            "Markov constant b must exceed 1, got {b}"
        )));
    }
    let mut cache: Option<(usize, f64)> = None;
    let mut k = 0usize;
    loop {
        let ahat = alpha - k as f64 * MARKOV_LEVEL_STEP;
        if ahat <= 0.0 {
            return Err(Error::NoMarkovCandidate);
        }
        let l = markov_rank(m, ahat);
        if l > 0 {
            let bound = match cache {
                Some((cl, v)) if cl == l => v,
                _ => {
                    let v = markov_bound_for_rank(m, grid_size, l, b)?;
                    cache = Some((l, v));
                    v
                }
            };
            if bound >= 1.0 - alpha {
                return Ok(ahat);
            }
        }
        k += 1;
    }
}

/// Both corrections and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionParams {
    pub grid_size: usize,
    pub m: usize,
    pub alpha: f64,
    pub b: f64,
    pub markov: Option<f64>,
    pub dkw: Option<f64>,
    /// `max(markov, dkw)` over the available corrections.
    pub corrected: f64,
}

pub fn corrected_level(m: usize, grid_size: usize, alpha: f64, b: f64) -> Result<CorrectionParams> {
    let markov = match markov_corrected_level(m, grid_size, alpha, b) {
        Ok(v) => Some(v),
        Err(Error::NoMarkovCandidate) => None,
        Err(e) => return Err(e),
    };
    let dkw = match dkw_corrected_level(m, grid_size, alpha) {
        Ok(v) => Some(v),
        Err(Error::CalibrationTooSmall) => None,
        Err(e) => return Err(e),
    };
    let corrected = match (markov, dkw) {
        (Some(a), Some(b)) => a.max(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::CalibrationTooSmall),
    };
    Ok(CorrectionParams {
        grid_size,
        m,
        alpha,
        b,
        markov,
        dkw,
        corrected,
    })
}

/// Selects the rate and calibrates the margin on the same trajectories at
/// the corrected level `1 - alpha'`.
pub fn calibrate_theory(
    cal: &[Trajectory],
    forecasts: &[Forecasts],
    grid: &GammaGrid,
    config: &CafhtConfig,
    warm: &WarmStart,
    b: f64,
) -> Result<(CalibratedPredictor, TuningOutcome, CorrectionParams)> {
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let corr = corrected_level(cal.len(), grid.len(), config.alpha, b)?;
    let level = 1.0 - corr.corrected;
    let tuning = select_gamma_at_level(cal, forecasts, grid, config, warm, level)?;
    let cp = calibrate_at_level(cal, forecasts, tuning.gamma, config, warm, level)?;
    Ok((cp, tuning, corr))
}
