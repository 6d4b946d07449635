//! End-to-end fit / calibrate / predict on trajectories in original units,
//! backing the command-line tool.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptive::WarmStart;
use crate::conformal::CafhtConfig;
use crate::error::{Error, Result};
use crate::experiments::TuningMode;
use crate::forecaster::{forecast_set, one_step_residuals, ArForecaster, Forecasts, Normalizer};
use crate::io::{ModelArtifact, ARTIFACT_FORMAT, VERSION};
use crate::trajectory::{Interval, PredictionBand, Role, Trajectory, TrajectorySet};
use crate::tuning::{calibrate_split, calibrate_theory, GammaGrid, TuningOutcome};

/// Fits the normalizer and AR forecaster on `train` and derives the warm
/// start from its one-step residuals.
pub fn fit_model(
    train: &TrajectorySet,
    order: usize,
    ridge: f64,
    alpha: f64,
    seed: u64,
) -> Result<ModelArtifact> {
    let normalizer = Normalizer::fit(train);
    let norm = normalizer.map_set(train);
    let forecaster = ArForecaster::fit(&norm, order, ridge)?;
    let fc = forecast_set(&forecaster, &norm, 1)?;
    let warm = WarmStart::standard(&one_step_residuals(norm.trajectories(), &fc), alpha, seed)?;
    Ok(ModelArtifact {
        format: ARTIFACT_FORMAT,
        tool_version: VERSION.to_string(),
        normalizer,
        forecaster,
        warm,
        predictor: None,
    })
}

/// Random halves of a calibration set: `floor(frac * n)` for selection,
/// the rest for calibration.
pub fn halve(set: &TrajectorySet, frac: f64, seed: u64) -> Result<(TrajectorySet, TrajectorySet)> {
    let n = set.len();
    let k = (frac * n as f64).floor() as usize;
    if k == 0 || k == n {
        return Err(Error::Config(format!(
            "cannot split {n} calibration trajectories with fraction {frac}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ids: &[usize], role| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        TrajectorySet::new(
            ids.into_iter()
                .map(|i| set.trajectories()[i].clone())
                .collect(),
            role,
        )
    };
    Ok((pick(&idx[..k], Role::Cal1)?, pick(&idx[k..], Role::Cal2)?))
}

/// Calibration options of [`calibrate_model`].
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub config: CafhtConfig,
    pub tuning: TuningMode,
    pub grid: GammaGrid,
    pub cal1_frac: f64,
    pub seed: u64,
    pub markov_b: f64,
}

/// Selects the rate and fits the conformal margin on `cal`.
pub fn calibrate_model(
    model: &ModelArtifact,
    cal: &TrajectorySet,
    opts: &CalibrationOptions,
) -> Result<(ModelArtifact, TuningOutcome)> {
    check_dim(model, cal)?;
    let norm = model.normalizer.map_set(cal);
    let (predictor, outcome) = match opts.tuning {
        TuningMode::Split => {
            let (c1, c2) = halve(&norm, opts.cal1_frac, opts.seed)?;
            let f1 = forecast_set(&model.forecaster, &c1, 1)?;
            let f2 = forecast_set(&model.forecaster, &c2, 1)?;
            calibrate_split(
                (c1.trajectories(), &f1),
                (c2.trajectories(), &f2),
                &opts.grid,
                &opts.config,
                &model.warm,
            )?
        }
        TuningMode::Theory => {
            let fc = forecast_set(&model.forecaster, &norm, 1)?;
            let (p, o, _) = calibrate_theory(
                norm.trajectories(),
                &fc,
                &opts.grid,
                &opts.config,
                &model.warm,
                opts.markov_b,
            )?;
            (p, o)
        }
    };
    let mut out = model.clone();
    out.predictor = Some(predictor);
    Ok((out, outcome))
}

fn check_dim(model: &ModelArtifact, set: &TrajectorySet) -> Result<()> {
    if model.normalizer.shift.len() != set.dim() {
        return Err(Error::Shape(format!(
            "model expects {} dimensions, data has {}",
            model.normalizer.shift.len(),
            set.dim()
        )));
    }
    Ok(())
}

fn unmap_interval(n: &Normalizer, j: usize, iv: &Interval) -> Interval {
    Interval::new(n.unmap(j, iv.lower), n.unmap(j, iv.upper))
}

fn predictor(model: &ModelArtifact) -> Result<&crate::conformal::CalibratedPredictor> {
    model
        .predictor
        .as_ref()
        .ok_or_else(|| Error::Config("model is not calibrated; run calibrate first".into()))
}

/// Replays the online loop: the interval for step `t` is issued from
/// `Y_0..Y_{t-1}` before `Y_t` is revealed. Bands are in original units.
pub fn predict_online(model: &ModelArtifact, traj: &Trajectory) -> Result<PredictionBand> {
    let cp = predictor(model)?;
    if traj.dim() != model.normalizer.shift.len() {
        return Err(Error::Shape(
            "trajectory dimension does not match the model".into(),
        ));
    }
    let n = &model.normalizer;
    let norm = n.map_trajectory(traj);
    let mut session = cp.session(&model.forecaster, norm.step(0).to_vec());
    let mut steps = Vec::with_capacity(traj.horizon());
    for t in 1..=traj.horizon() {
        let ivs = session.next_interval()?;
        steps.push(
            ivs.iter()
                .enumerate()
                .map(|(j, iv)| unmap_interval(n, j, iv))
                .collect(),
        );
        session.observe(norm.step(t).to_vec())?;
    }
    PredictionBand::new(steps)
}

/// Same bands as [`predict_online`], computed from the whole trajectory at
/// once.
pub fn predict_offline(model: &ModelArtifact, traj: &Trajectory) -> Result<PredictionBand> {
    let cp = predictor(model)?;
    let n = &model.normalizer;
    let norm = n.map_trajectory(traj);
    let fc = Forecasts::compute(&model.forecaster, &norm, 1)?;
    let band = cp.predict_band(&fc, &norm)?;
    let steps = band
        .steps()
        .iter()
        .map(|step| {
            step.iter()
                .enumerate()
                .map(|(j, iv)| unmap_interval(n, j, iv))
                .collect()
        })
        .collect();
    PredictionBand::new(steps)
}
