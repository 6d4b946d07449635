//! Point forecasters and the min-max normalization applied before fitting.
//!
//! Conformal calibration only needs point predictions made from the
//! observed prefix of a trajectory, so any model can sit behind
//! [`Forecaster`]. The crate ships a ridge-regularized autoregressive model;
//! predictions from external models can be supplied as [`Forecasts`] tables
//! instead (see [`crate::io::read_forecasts`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, TrajectorySet};

pub const DEFAULT_AR_ORDER: usize = 3;
pub const DEFAULT_RIDGE: f64 = 1e-6;

pub trait Forecaster: Send + Sync {
    fn dim(&self) -> usize;

    /// Predicts the next `horizon` values given `prefix = (Y_0, ..., Y_s)`.
    fn predict(&self, prefix: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>>;
}

/// Table of point predictions for one trajectory.
///
/// Row `s` (for `s = 0..T`) holds the predictions of `Y_{s+1}, ..., Y_{s+h}`
/// issued after observing `Y_0..=Y_s`, truncated at `Y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecasts {
    lags: usize,
    rows: Vec<Vec<Vec<f64>>>,
}

impl Forecasts {
    pub fn new(rows: Vec<Vec<Vec<f64>>>, lags: usize) -> Result<Self> {
        let horizon = rows.len();
        if horizon == 0 || lags == 0 {
            return Err(Error::Shape("forecast table is empty".into()));
        }
        let dim = rows[0].first().map_or(0, Vec::len);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != lags.min(horizon - s) {
                return Err(Error::Shape(format!(
                    "forecast row {s} has {} lags, expected {}",
                    row.len(),
                    lags.min(horizon - s)
                )));
            }
            if row.iter().any(|v| v.len() != dim) {
                return Err(Error::Shape(format!(
                    "forecast row {s} has inconsistent dimension"
                )));
            }
        }
        Ok(Self { lags, rows })
    }

    /// Runs `forecaster` on every prefix of `traj`.
    pub fn compute(forecaster: &dyn Forecaster, traj: &Trajectory, lags: usize) -> Result<Self> {
        let horizon = traj.horizon();
        let rows = (0..horizon)
            .map(|s| forecaster.predict(traj.prefix(s), lags.min(horizon - s)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, lags)
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn dim(&self) -> usize {
        self.rows[0][0].len()
    }

    /// One-step prediction of `Y_t`, `t = 1..=T`.
    pub fn one_step(&self, t: usize) -> &[f64] {
        &self.rows[t - 1][0]
    }

    /// Prediction of `Y_{s+tau}` issued at time `s`.
    pub fn lagged(&self, s: usize, tau: usize) -> Option<&[f64]> {
        self.rows
            .get(s)?
            .get(tau.checked_sub(1)?)
            .map(Vec::as_slice)
    }

    pub(crate) fn check_matches(&self, traj: &Trajectory) -> Result<()> {
        if self.horizon() != traj.horizon() || self.dim() != traj.dim() {
            return Err(Error::Shape(format!(
                "forecasts are {}x{} but trajectory {} is {}x{}",
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

/// Forecasts for every trajectory of a set, in set order.
pub fn forecast_set(
    forecaster: &dyn Forecaster,
    set: &TrajectorySet,
    lags: usize,
) -> Result<Vec<Forecasts>> {
    use rayon::prelude::*;
    set.trajectories()
        .par_iter()
        .map(|tr| Forecasts::compute(forecaster, tr, lags))
        .collect()
}

/// Absolute one-step residuals `|Y_{t,j} - Yhat_{t,j}|`, grouped by dimension.
pub fn one_step_residuals(trajs: &[Trajectory], forecasts: &[Forecasts]) -> Vec<Vec<f64>> {
    let dim = trajs[0].dim();
    let mut out = vec![Vec::new(); dim];
    for (tr, fc) in trajs.iter().zip(forecasts) {
        for t in 1..=tr.horizon() {
            for (j, res) in out.iter_mut().enumerate() {
                res.push((tr.value(t, j) - fc.one_step(t)[j]).abs());
            }
        }
    }
    out
}

/// Per-dimension affine map sending training values into `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &TrajectorySet) -> Self {
        let dim = train.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for tr in train {
            for v in tr.values() {
                for j in 0..dim {
                    lo[j] = lo[j].min(v[j]);
                    hi[j] = hi[j].max(v[j]);
                }
            }
        }
        let shift = lo.iter().zip(&hi).map(|(l, h)| (h + l) / 2.0).collect();
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { (h - l) / 2.0 } else { 1.0 })
            .collect();
        Self { shift, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn map(&self, j: usize, v: f64) -> f64 {
        (v - self.shift[j]) / self.scale[j]
    }

    pub fn unmap(&self, j: usize, v: f64) -> f64 {
        v * self.scale[j] + self.shift[j]
    }

    pub fn map_trajectory(&self, traj: &Trajectory) -> Trajectory {
        traj.map_values(|j, v| self.map(j, v))
    }

    pub fn unmap_trajectory(&self, traj: &Trajectory) -> Trajectory {
        traj.map_values(|j, v| self.unmap(j, v))
    }

    pub fn map_set(&self, set: &TrajectorySet) -> TrajectorySet {
        let trajs = set.iter().map(|t| self.map_trajectory(t)).collect();
        TrajectorySet::new(trajs, set.role()).expect("mapping preserves shape")
    }
}

/// Ridge-regularized AR(p) coefficients for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArCoefficients {
    /// `coefficients[k]` multiplies `Y_{t-1-k}`.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Per-dimension autoregressive forecaster. Windows reaching before `Y_0`
/// are zero-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArForecaster {
    pub order: usize,
    pub ridge: f64,
    pub fitted: Option<Vec<ArCoefficients>>,
}

impl ArForecaster {
    pub fn unfitted(order: usize, ridge: f64) -> Self {
        Self {
            order,
            ridge,
            fitted: None,
        }
    }

    pub fn from_coefficients(coefs: Vec<ArCoefficients>) -> Self {
        let order = coefs[0].coefficients.len();
        Self {
            order,
            ridge: 0.0,
            fitted: Some(coefs),
        }
    }

    /// Fits on every (window -> next value) pair pooled across `train`.
    pub fn fit(train: &TrajectorySet, order: usize, ridge: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("AR order must be positive".into()));
        }
        if !(ridge >= 0.0) {
            return Err(Error::Config(format!(
                "ridge penalty must be >= 0, got {ridge}"
            )));
        }
        if train.horizon() < order {
            return Err(Error::Config(format!(
                "horizon {} is shorter than AR order {order}",
                train.horizon()
            )));
        }
        let n = order + 1;
        let mut coefs = Vec::with_capacity(train.dim());
        for j in 0..train.dim() {
            let mut gram = vec![0.0; n * n];
            let mut rhs = vec![0.0; n];
            let mut x = vec![0.0; n];
            for tr in train {
                for t in 1..=tr.horizon() {
                    for (k, xk) in x.iter_mut().take(order).enumerate() {
                        *xk = lag_value(tr.values(), t, k + 1, j);
                    }
                    x[order] = 1.0;
                    let y = tr.value(t, j);
                    for a in 0..n {
                        rhs[a] += x[a] * y;
                        for b in 0..n {
                            gram[a * n + b] += x[a] * x[b];
                        }
                    }
                }
            }
            for k in 0..order {
                gram[k * n + k] += ridge;
            }
            let beta = solve_dense(&mut gram, &mut rhs, n)?;
            coefs.push(ArCoefficients {
                coefficients: beta[..order].to_vec(),
                intercept: beta[order],
            });
        }
        Ok(Self {
            order,
            ridge,
            fitted: Some(coefs),
        })
    }

    pub fn coefficients(&self) -> Result<&[ArCoefficients]> {
        self.fitted.as_deref().ok_or(Error::Unfitted)
    }
}

fn lag_value(values: &[Vec<f64>], t: usize, lag: usize, j: usize) -> f64 {
    t.checked_sub(lag).map_or(0.0, |i| values[i][j])
}

impl Forecaster for ArForecaster {
    fn dim(&self) -> usize {
        self.fitted.as_ref().map_or(0, Vec::len)
    }

    fn predict(&self, prefix: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
        let coefs = self.coefficients()?;
        if prefix.is_empty() {
            return Err(Error::Shape("empty prefix".into()));
        }
        let mut out = vec![vec![0.0; coefs.len()]; horizon];
        let mut hist = Vec::with_capacity(self.order + horizon);
        for (j, c) in coefs.iter().enumerate() {
            hist.clear();
            let start = prefix.len().saturating_sub(self.order);
            hist.extend(prefix[start..].iter().map(|v| v[j]));
            for row in out.iter_mut() {
                let next = c.intercept
                    + c.coefficients
                        .iter()
                        .enumerate()
                        .map(|(k, a)| hist.len().checked_sub(k + 1).map_or(0.0, |i| a * hist[i]))
                        .sum::<f64>();
                row[j] = next;
                hist.push(next);
            }
        }
        Ok(out)
    }
}

// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .unwrap();
        if a[piv * n + col].abs() <= 1e-12 * scale {
            return Err(Error::Singular);
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Label, Role};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TRUE_AR: [f64; 3] = [0.9, 0.1, -0.2];

    fn roll(y0: f64, len: usize) -> Vec<f64> {
        let mut ys = vec![y0];
        for t in 1..len {
            let lag = |k: usize| if t >= k { ys[t - k] } else { 0.0 };
            ys.push(TRUE_AR[0] * lag(1) + TRUE_AR[1] * lag(2) + TRUE_AR[2] * lag(3));
        }
        ys
    }

    fn noiseless_set() -> TrajectorySet {
        let trajs = [1.0, -0.5, 2.0, 0.3]
            .iter()
            .enumerate()
            .map(|(i, &y0)| Trajectory::from_scalars(i, &roll(y0, 21), Label::Easy).unwrap())
            .collect();
        TrajectorySet::new(trajs, Role::Train).unwrap()
    }

    #[test]
    fn normalizer_span_and_degenerate_dimension() {
        let trajs = vec![
            Trajectory::new(0, vec![vec![0.0, 3.0], vec![10.0, 3.0]], Label::Easy).unwrap(),
            Trajectory::new(1, vec![vec![4.0, 3.0], vec![6.0, 3.0]], Label::Easy).unwrap(),
        ];
        let norm = Normalizer::fit(&TrajectorySet::new(trajs, Role::Train).unwrap());
        assert_eq!(norm.shift, vec![5.0, 3.0]);
        assert_eq!(norm.scale, vec![5.0, 1.0]);
        assert_eq!(norm.map(0, 10.0), 1.0);
        assert_eq!(norm.map(1, 3.0), 0.0);
        // Out-of-range values are not clipped.
        assert_eq!(norm.map(0, 20.0), 3.0);
        assert!((norm.unmap(0, norm.map(0, 7.3)) - 7.3).abs() < 1e-12);
    }

    #[test]
    fn normalized_training_values_within_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trajs: Vec<_> = (0..20)
            .map(|i| {
                let ys: Vec<f64> = (0..15).map(|_| rng.gen_range(-40.0..90.0)).collect();
                Trajectory::from_scalars(i, &ys, Label::Easy).unwrap()
            })
            .collect();
        let set = TrajectorySet::new(trajs, Role::Train).unwrap();
        let norm = Normalizer::fit(&set);
        let mapped = norm.map_set(&set);
        for tr in &mapped {
            for v in tr.values() {
                assert!(v[0].abs() <= 1.0 + 1e-12);
            }
        }
        // Monotone affine map.
        let xs: Vec<f64> = (0..50).map(|_| rng.gen_range(-200.0..200.0)).collect();
        for w in xs.windows(2) {
            let (a, b) = (norm.map(0, w[0]), norm.map(0, w[1]));
            assert_eq!(w[0] < w[1], a < b);
        }
    }

    #[test]
    fn recovers_noiseless_ar3() {
        let f = ArForecaster::fit(&noiseless_set(), 3, 0.0).unwrap();
        let c = &f.coefficients().unwrap()[0];
        for (got, want) in c.coefficients.iter().zip(TRUE_AR) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(c.intercept.abs() < 1e-6);
    }

    #[test]
    fn multi_step_prediction_rolls_true_recursion() {
        let f = ArForecaster::fit(&noiseless_set(), 3, 0.0).unwrap();
        let ys = roll(0.7, 12);
        let prefix: Vec<Vec<f64>> = ys[..6].iter().map(|&v| vec![v]).collect();
        let pred = f.predict(&prefix, 3).unwrap();
        for (k, p) in pred.iter().enumerate() {
            assert!((p[0] - ys[6 + k]).abs() < 1e-6);
        }
    }

    #[test]
    fn one_step_is_linear_combination_of_last_values() {
        let f = ArForecaster::from_coefficients(vec![ArCoefficients {
            coefficients: vec![0.5, -0.25, 2.0],
            intercept: 0.1,
        }]);
        let prefix = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let p = f.predict(&prefix, 1).unwrap();
        assert!((p[0][0] - (0.1 + 0.5 * 4.0 - 0.25 * 3.0 + 2.0 * 2.0)).abs() < 1e-15);
        // Zero padding before Y_0.
        let p0 = f.predict(&prefix[..1], 1).unwrap();
        assert!((p0[0][0] - (0.1 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_model_predicts_intercept() {
        let f = ArForecaster::from_coefficients(vec![ArCoefficients {
            coefficients: vec![0.0; 3],
            intercept: 0.42,
        }]);
        let p = f.predict(&[vec![5.0], vec![-3.0]], 4).unwrap();
        assert!(p.iter().all(|v| v[0] == 0.42));
    }

    #[test]
    fn constant_series_fit_predicts_constant() {
        let trajs = (0..3)
            .map(|i| Trajectory::from_scalars(i, &[2.5; 12], Label::Easy).unwrap())
            .collect();
        let set = TrajectorySet::new(trajs, Role::Train).unwrap();
        let f = ArForecaster::fit(&set, 3, 1e-6).unwrap();
        let p = f.predict(&vec![vec![2.5]; 6], 1).unwrap();
        assert!((p[0][0] - 2.5).abs() < 1e-4);
    }

    #[test]
    fn singular_without_ridge_is_reported() {
        let trajs = (0..3)
            .map(|i| Trajectory::from_scalars(i, &[0.0; 12], Label::Easy).unwrap())
            .collect();
        let set = TrajectorySet::new(trajs, Role::Train).unwrap();
        assert!(matches!(
            ArForecaster::fit(&set, 3, 0.0),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn large_ridge_shrinks_coefficients_to_intercept_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trajs: Vec<_> = (0..10)
            .map(|i| {
                let ys: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0) + 0.3).collect();
                Trajectory::from_scalars(i, &ys, Label::Easy).unwrap()
            })
            .collect();
        let set = TrajectorySet::new(trajs, Role::Train).unwrap();
        let f = ArForecaster::fit(&set, 3, 1e12).unwrap();
        let c = &f.coefficients().unwrap()[0];
        assert!(c.coefficients.iter().all(|a| a.abs() < 1e-8));
        // Closed form: with all slopes zero the intercept is the mean target.
        let targets: Vec<f64> = set
            .iter()
            .flat_map(|t| t.values()[1..].iter().map(|v| v[0]))
            .collect();
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        assert!((c.intercept - mean).abs() < 1e-6);
    }

    #[test]
    fn residuals_orthogonal_to_regressors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trajs: Vec<_> = (0..8)
            .map(|i| {
                let ys: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Trajectory::from_scalars(i, &ys, Label::Easy).unwrap()
            })
            .collect();
        let set = TrajectorySet::new(trajs, Role::Train).unwrap();
        let f = ArForecaster::fit(&set, 3, 0.0).unwrap();
        let mut dots = [0.0; 4];
        for tr in &set {
            for t in 1..=tr.horizon() {
                let pred = f.predict(tr.prefix(t - 1), 1).unwrap()[0][0];
                let r = tr.value(t, 0) - pred;
                for k in 0..3 {
                    dots[k] += r * lag_value(tr.values(), t, k + 1, 0);
                }
                dots[3] += r;
            }
        }
        assert!(dots.iter().all(|d| d.abs() < 1e-8), "{dots:?}");
    }

    #[test]
    fn unfitted_forecaster_errors() {
        let f = ArForecaster::unfitted(3, 1e-6);
        assert!(matches!(f.predict(&[vec![0.0]], 1), Err(Error::Unfitted)));
    }

    #[test]
    fn prediction_is_deterministic() {
        let f = ArForecaster::fit(&noiseless_set(), 3, 1e-6).unwrap();
        let prefix = vec![vec![0.1], vec![0.4], vec![-0.2]];
        assert_eq!(
            f.predict(&prefix, 5).unwrap(),
            f.predict(&prefix, 5).unwrap()
        );
    }

    #[test]
    fn forecast_table_indexing() {
        let f = ArForecaster::fit(&noiseless_set(), 3, 0.0).unwrap();
        let traj = Trajectory::from_scalars(9, &roll(1.3, 8), Label::Easy).unwrap();
        let fc = Forecasts::compute(&f, &traj, 3).unwrap();
        assert_eq!(fc.horizon(), 7);
        assert!(fc.lagged(6, 2).is_none());
        assert!(fc.lagged(5, 2).is_some());
        for t in 1..=7 {
            assert!((fc.one_step(t)[0] - traj.value(t, 0)).abs() < 1e-6);
        }
    }
}
