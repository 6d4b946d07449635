//! Comparison methods with simultaneous coverage: CFRNN (per-step conformal
//! intervals at the Bonferroni level `alpha / T`) and NCTP (one conformal
//! multiplier on residuals normalized by training-residual spreads).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::Forecasts;
use crate::multistep::MultiStepBand;
use crate::quantile::empirical_quantile;
use crate::trajectory::{Interval, PredictionBand, Trajectory};

/// Lower bound on the NCTP normalization constants.
pub const SIGMA_MIN: f64 = 1e-8;

fn check_inputs(trajs: &[Trajectory], forecasts: &[Forecasts]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if trajs.len() != forecasts.len() {
        return Err(Error::Shape(format!(
            "{} trajectories but {} forecast tables",
            trajs.len(),
            forecasts.len()
        )));
    }
    for (tr, fc) in trajs.iter().zip(forecasts) {
        fc.check_matches(tr)?;
        if tr.horizon() != trajs[0].horizon() || tr.dim() != trajs[0].dim() {
            return Err(Error::Shape("trajectories differ in shape".into()));
        }
    }
    Ok(())
}

/// Per-step radii shared across dimensions (square regions for `d > 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfrnnModel {
    pub alpha: f64,
    /// `radii[t - 1]`, possibly `+inf`.
    pub radii: Vec<f64>,
}

impl CfrnnModel {
    /// Radius of step `t` is the conformal `1 - alpha / T` quantile of the
    /// calibration residuals `max_j |Y_{t,j} - Yhat_{t,j}|`.
    pub fn fit(cal: &[Trajectory], forecasts: &[Forecasts], alpha: f64) -> Result<Self> {
        check_inputs(cal, forecasts)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1), got {alpha}"
            )));
        }
        let horizon = cal[0].horizon();
        let level = 1.0 - alpha / horizon as f64;
        let radii = (1..=horizon)
            .map(|t| {
                let residuals: Vec<f64> = cal
                    .iter()
                    .zip(forecasts)
                    .map(|(tr, fc)| {
                        tr.step(t)
                            .iter()
                            .zip(fc.one_step(t))
                            .map(|(y, p)| (y - p).abs())
                            .fold(0.0, f64::max)
                    })
                    .collect();
                empirical_quantile(&residuals, level)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { alpha, radii })
    }

    pub fn predict(&self, forecasts: &Forecasts) -> Result<PredictionBand> {
        if forecasts.horizon() != self.radii.len() {
            return Err(Error::Shape(format!(
                "model horizon {} differs from forecasts horizon {}",
                self.radii.len(),
                forecasts.horizon()
            )));
        }
        PredictionBand::new(
            self.radii
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    forecasts
                        .one_step(i + 1)
                        .iter()
                        .map(|&p| Interval::centered(p, r))
                        .collect()
                })
                .collect(),
        )
    }
}

/// Normalized max-residual method, optionally over several lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NctpModel {
    pub alpha: f64,
    pub lags: usize,
    /// `sigma[tau - 1][t - 1][j]` scales the lag-`tau` residual of `Y_{t,j}`.
    pub sigma: Vec<Vec<Vec<f64>>>,
    pub margin: f64,
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

impl NctpModel {
    /// Single-step model.
    pub fn fit(
        train: (&[Trajectory], &[Forecasts]),
        cal: (&[Trajectory], &[Forecasts]),
        alpha: f64,
    ) -> Result<Self> {
        Self::fit_multistep(train, cal, alpha, 1)
    }

    /// Spreads from signed training residuals per `(tau, t, j)`, then the
    /// conformal quantile of `max |residual| / sigma` over calibration.
    pub fn fit_multistep(
        train: (&[Trajectory], &[Forecasts]),
        cal: (&[Trajectory], &[Forecasts]),
        alpha: f64,
        lags: usize,
    ) -> Result<Self> {
        check_inputs(train.0, train.1)?;
        check_inputs(cal.0, cal.1)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1), got {alpha}"
            )));
        }
        if lags == 0 || train.1.iter().chain(cal.1).any(|fc| fc.lags() < lags) {
            return Err(Error::Shape(format!("forecasts do not cover {lags} lags")));
        }
        let horizon = train.0[0].horizon();
        let dim = train.0[0].dim();
        if cal.0[0].horizon() != horizon || cal.0[0].dim() != dim {
            return Err(Error::Shape(
                "training and calibration shapes differ".into(),
            ));
        }
        let mut sigma = vec![vec![vec![SIGMA_MIN; dim]; horizon]; lags];
        for (tau, per_t) in sigma.iter_mut().enumerate() {
            let tau = tau + 1;
            for t in tau..=horizon {
                for j in 0..dim {
                    let res: Vec<f64> = train
                        .0
                        .iter()
                        .zip(train.1)
                        .map(|(tr, fc)| tr.value(t, j) - fc.lagged(t - tau, tau).unwrap()[j])
                        .collect();
                    per_t[t - 1][j] = sample_sd(&res).max(SIGMA_MIN);
                }
            }
        }
        let mut model = Self {
            alpha,
            lags,
            sigma,
            margin: 0.0,
        };
        let scores: Vec<f64> = cal
            .0
            .iter()
            .zip(cal.1)
            .map(|(tr, fc)| model.score(tr, fc))
            .collect();
        model.margin = empirical_quantile(&scores, 1.0 - alpha)?;
        Ok(model)
    }

    fn score(&self, traj: &Trajectory, forecasts: &Forecasts) -> f64 {
        let mut score = 0.0f64;
        for s in 0..traj.horizon() {
            for tau in 1..=self.lags {
                if let Some(pred) = forecasts.lagged(s, tau) {
                    let t = s + tau;
                    for (j, p) in pred.iter().enumerate() {
                        score =
                            score.max((traj.value(t, j) - p).abs() / self.sigma[tau - 1][t - 1][j]);
                    }
                }
            }
        }
        score
    }

    fn check_horizon(&self, forecasts: &Forecasts) -> Result<()> {
        if forecasts.horizon() != self.sigma[0].len() || forecasts.lags() < self.lags {
            return Err(Error::Shape(
                "forecasts do not match the fitted NCTP model".into(),
            ));
        }
        Ok(())
    }

    /// Single-step band `Yhat_{t,j} +- margin * sigma_{t,j}`.
    pub fn predict(&self, forecasts: &Forecasts) -> Result<PredictionBand> {
        self.check_horizon(forecasts)?;
        PredictionBand::new(
            (1..=forecasts.horizon())
                .map(|t| {
                    forecasts
                        .one_step(t)
                        .iter()
                        .enumerate()
                        .map(|(j, &p)| Interval::centered(p, self.margin * self.sigma[0][t - 1][j]))
                        .collect()
                })
                .collect(),
        )
    }

    pub fn predict_multistep(&self, forecasts: &Forecasts) -> Result<MultiStepBand> {
        self.check_horizon(forecasts)?;
        let horizon = forecasts.horizon();
        let rows = (0..horizon)
            .map(|s| {
                (1..=self.lags.min(horizon - s))
                    .map(|tau| {
                        forecasts
                            .lagged(s, tau)
                            .unwrap()
                            .iter()
                            .enumerate()
                            .map(|(j, &p)| {
                                Interval::centered(
                                    p,
                                    self.margin * self.sigma[tau - 1][s + tau - 1][j],
                                )
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        MultiStepBand::new(rows, self.lags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{band_width_stats, covers_simultaneously, Label};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise_set(
        n: usize,
        horizon: usize,
        sd: f64,
        seed: u64,
    ) -> (Vec<Trajectory>, Vec<Forecasts>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sd).unwrap();
        let trajs: Vec<Trajectory> = (0..n)
            .map(|i| {
                let ys: Vec<f64> = (0..=horizon).map(|_| normal.sample(&mut rng)).collect();
                Trajectory::from_scalars(i, &ys, Label::Unlabeled).unwrap()
            })
            .collect();
        let fcs = (0..n)
            .map(|_| Forecasts::new(vec![vec![vec![0.0]]; horizon], 1).unwrap())
            .collect();
        (trajs, fcs)
    }

    #[test]
    fn cfrnn_rank_overflow_gives_width_two() {
        let (cal, fc) = noise_set(500, 100, 0.1, 1);
        let m = CfrnnModel::fit(&cal, &fc, 0.1).unwrap();
        assert!(m.radii.iter().all(|r| r.is_infinite()));
        let band = m.predict(&fc[0]).unwrap();
        assert_eq!(band_width_stats(&band), 2.0);
    }

    #[test]
    fn cfrnn_short_horizon_is_finite() {
        let (cal, fc) = noise_set(500, 5, 0.1, 2);
        let m = CfrnnModel::fit(&cal, &fc, 0.1).unwrap();
        assert!(m.radii.iter().all(|r| r.is_finite()));
        // Rank 491 of 500 at every step.
        let res: Vec<f64> = cal.iter().map(|tr| tr.value(3, 0).abs()).collect();
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(m.radii[2], sorted[490]);
        assert!(band_width_stats(&m.predict(&fc[0]).unwrap()) < 2.0);
    }

    #[test]
    fn cfrnn_zero_residuals() {
        let trajs: Vec<Trajectory> = (0..50)
            .map(|i| Trajectory::from_scalars(i, &[0.0; 4], Label::Unlabeled).unwrap())
            .collect();
        let fc: Vec<Forecasts> = (0..50)
            .map(|_| Forecasts::new(vec![vec![vec![0.0]]; 3], 1).unwrap())
            .collect();
        let m = CfrnnModel::fit(&trajs, &fc, 0.5).unwrap();
        assert!(m.radii.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn nctp_band_invariant_to_sigma_scaling() {
        let (train, tf) = noise_set(200, 20, 0.3, 3);
        let (cal, cf) = noise_set(99, 20, 0.3, 4);
        let m = NctpModel::fit((&train, &tf), (&cal, &cf), 0.1).unwrap();
        let mut scaled = m.clone();
        for per_t in scaled.sigma.iter_mut() {
            for row in per_t.iter_mut() {
                for s in row.iter_mut() {
                    *s *= 8.0;
                }
            }
        }
        let scores: Vec<f64> = cal
            .iter()
            .zip(&cf)
            .map(|(tr, fc)| scaled.score(tr, fc))
            .collect();
        scaled.margin = empirical_quantile(&scores, 0.9).unwrap();
        let a = m.predict(&cf[0]).unwrap();
        let b = scaled.predict(&cf[0]).unwrap();
        for (x, y) in a.intervals().zip(b.intervals()) {
            assert!((x.lower - y.lower).abs() < 1e-12 && (x.upper - y.upper).abs() < 1e-12);
        }
    }

    #[test]
    fn nctp_narrower_than_cfrnn_on_long_horizon() {
        let (train, tf) = noise_set(500, 100, 0.2, 5);
        let (cal, cf) = noise_set(2000, 100, 0.2, 6);
        let (test, sf) = noise_set(300, 100, 0.2, 7);
        let n = NctpModel::fit((&train, &tf), (&cal, &cf), 0.1).unwrap();
        let c = CfrnnModel::fit(&cal, &cf, 0.1).unwrap();
        let mut cov = (0, 0);
        let mut width = (0.0, 0.0);
        for (tr, fc) in test.iter().zip(&sf) {
            let nb = n.predict(fc).unwrap();
            let cb = c.predict(fc).unwrap();
            cov.0 += covers_simultaneously(&nb, tr).unwrap() as usize;
            cov.1 += covers_simultaneously(&cb, tr).unwrap() as usize;
            width.0 += band_width_stats(&nb);
            width.1 += band_width_stats(&cb);
        }
        assert!(cov.0 as f64 / 300.0 > 0.85 && cov.1 as f64 / 300.0 > 0.85);
        assert!(width.0 < width.1);
    }

    #[test]
    fn nctp_multistep_with_one_lag_matches_single() {
        let (train, tf) = noise_set(100, 10, 0.3, 8);
        let (cal, cf) = noise_set(50, 10, 0.3, 9);
        let m = NctpModel::fit((&train, &tf), (&cal, &cf), 0.1).unwrap();
        let single = m.predict(&cf[0]).unwrap();
        let multi = m.predict_multistep(&cf[0]).unwrap();
        for t in 1..=10 {
            assert_eq!(multi.get(t - 1, 1).unwrap(), single.at(t));
        }
    }
}
