//! Repeated train / calibrate / test cycles over methods and sweeps.
//!
//! Every repetition draws fresh data from `(seed, repetition)`, normalizes
//! it with the training split, fits the AR forecaster and evaluates each
//! method on a held-out test set. A method that fails in one repetition is
//! recorded as a failed cell; the others carry on.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{TrackerKind, WarmStart};
use crate::baselines::{CfrnnModel, NctpModel};
use crate::conformal::{CafhtConfig, ScoreKind};
use crate::error::{Error, Result};
use crate::forecaster::{forecast_set, one_step_residuals, ArForecaster, Forecasts, Normalizer};
use crate::multistep::{
    calibrate_multistep_at_level, calibrate_multistep_split, covers_multistep,
    multistep_warm_start, run_multistep_aci, select_gamma_multistep, MultiStepBand,
    MultiStepConfig,
};
use crate::simdata::{generate_ar_range, split_dataset, ArConfig, SplitConfig};
use crate::trajectory::{
    band_width_stats, covers_simultaneously, Interval, Label, PredictionBand, Role, Trajectory,
    TrajectorySet,
};
use crate::tuning::{
    calibrate_split, calibrate_theory, corrected_level, GammaGrid, TuningRow, DEFAULT_MARKOV_B,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    /// Select the rate on one calibration half, calibrate on the other.
    Split,
    /// Select and calibrate on all calibration data at a corrected level.
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodSpec {
    Cafht {
        score: ScoreKind,
        tracker: TrackerKind,
        tuning: TuningMode,
    },
    Cfrnn,
    Nctp,
    /// Uncalibrated adaptive band at a fixed rate.
    RawAci {
        tracker: TrackerKind,
        gamma: f64,
    },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            Self::Cafht {
                score,
                tracker,
                tuning,
            } => format!(
                "cafht-{}-{}-{}",
                score.as_str(),
                tracker.as_str(),
                match tuning {
                    TuningMode::Split => "split",
                    TuningMode::Theory => "theory",
                }
            ),
            Self::Cfrnn => "cfrnn".into(),
            Self::Nctp => "nctp".into(),
            Self::RawAci { tracker, gamma } => format!("raw-{}-{gamma}", tracker.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridReading {
    /// `0.001, 0.011, ..., 0.091, 0.1, 0.2, ..., 0.9`.
    Standard,
    /// `0.001, 0.01, 0.02, ..., 0.1, 0.2, ..., 0.9`.
    Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningSettings {
    /// Explicit grid; overrides `grid_reading`.
    pub grid: Option<Vec<f64>>,
    pub grid_reading: GridReading,
    pub markov_b: f64,
    /// Multi-step rate decay per additional lag.
    pub decay: f64,
}

impl Default for TuningSettings {
    fn default() -> Self {
        Self {
            grid: None,
            grid_reading: GridReading::Standard,
            markov_b: DEFAULT_MARKOV_B,
            decay: 1.0,
        }
    }
}

impl TuningSettings {
    pub fn grid(&self) -> Result<GammaGrid> {
        match &self.grid {
            Some(v) => GammaGrid::new(v.clone()),
            None => Ok(match self.grid_reading {
                GridReading::Standard => GammaGrid::standard(),
                GridReading::Decimal => GammaGrid::standard_decimal(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecasterConfig {
    pub order: usize,
    pub ridge: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            order: crate::forecaster::DEFAULT_AR_ORDER,
            ridge: crate::forecaster::DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Number of train + calibration trajectories.
    N,
    Horizon,
    Dim,
    Delta,
    DeltaTest,
    NoiseScale,
    Lags,
}

impl SweepVariable {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::N => "n",
            Self::Horizon => "horizon",
            Self::Dim => "dim",
            Self::Delta => "delta",
            Self::DeltaTest => "delta_test",
            Self::NoiseScale => "noise_scale",
            Self::Lags => "lags",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root seed; repetition `r` derives every random choice from
    /// `(seed, r)`. The generator seed `ar.seed` is replaced per repetition.
    pub seed: u64,
    pub alpha: f64,
    pub repetitions: usize,
    /// Train plus calibration trajectories.
    pub n: usize,
    pub n_test: usize,
    /// Forecast lags `H`; above 1 the multi-step methods are used.
    pub lags: usize,
    /// Test trajectories exported per method in the band sample.
    pub bands_sample: usize,
    pub ar: ArConfig,
    pub split: SplitConfig,
    pub forecaster: ForecasterConfig,
    pub tuning: TuningSettings,
    pub methods: Vec<MethodSpec>,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            alpha: 0.1,
            repetitions: 20,
            n: 2000,
            n_test: 200,
            lags: 1,
            bands_sample: 2,
            ar: ArConfig::default(),
            split: SplitConfig::default(),
            forecaster: ForecasterConfig::default(),
            tuning: TuningSettings::default(),
            methods: vec![
                MethodSpec::Cafht {
                    score: ScoreKind::Multiplicative,
                    tracker: TrackerKind::Aci,
                    tuning: TuningMode::Split,
                },
                MethodSpec::Cafht {
                    score: ScoreKind::Additive,
                    tracker: TrackerKind::Aci,
                    tuning: TuningMode::Split,
                },
                MethodSpec::Cfrnn,
                MethodSpec::Nctp,
            ],
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha: must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions: must be at least 1".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test: must be at least 1".into()));
        }
        if self.lags == 0 {
            return Err(Error::Config("lags: must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config(
                "methods: at least one method is required".into(),
            ));
        }
        self.ar
            .validate()
            .map_err(|e| Error::Config(format!("ar: {e}")))?;
        self.tuning
            .grid()
            .map_err(|e| Error::Config(format!("tuning.grid: {e}")))?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values: must not be empty".into()));
            }
            for &v in &s.values {
                self.at_point(Some(v))
                    .map_err(|e| Error::Config(format!("sweep.values: {e}")))?;
            }
        }
        Ok(())
    }

    /// Sweep points, or a single unnamed point.
    pub fn points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }

    /// The configuration with the sweep variable set to `value`.
    pub fn at_point(&self, value: Option<f64>) -> Result<Self> {
        let mut cfg = self.clone();
        let (Some(sweep), Some(v)) = (&self.sweep, value) else {
            return Ok(cfg);
        };
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!(
                    "{} must be a positive integer, got {v}",
                    sweep.variable.as_str()
                )))
            }
        };
        match sweep.variable {
            SweepVariable::N => cfg.n = count(v)?,
            SweepVariable::Horizon => cfg.ar.horizon = count(v)?,
            SweepVariable::Dim => cfg.ar.d = count(v)?,
            SweepVariable::Lags => cfg.lags = count(v)?,
            SweepVariable::Delta => cfg.ar.delta = v,
            SweepVariable::DeltaTest => cfg.ar.delta_test = Some(v),
            SweepVariable::NoiseScale => cfg.ar.noise_scale = v,
        }
        cfg.ar.validate()?;
        Ok(cfg)
    }
}

/// Seed of repetition `rep`.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng.next_u64()
}

/// Normalized data, fitted forecaster and forecasts of one repetition.
pub struct Prepared {
    pub train: TrajectorySet,
    pub cal1: TrajectorySet,
    pub cal2: TrajectorySet,
    pub test: TrajectorySet,
    pub normalizer: Normalizer,
    pub forecaster: ArForecaster,
    pub fc_train: Vec<Forecasts>,
    pub fc_cal1: Vec<Forecasts>,
    pub fc_cal2: Vec<Forecasts>,
    pub fc_test: Vec<Forecasts>,
    /// Single-step warm start.
    pub warm: WarmStart,
    /// One warm start per lag (the first equals `warm`).
    pub warm_lags: Vec<WarmStart>,
}

impl Prepared {
    pub fn cal(&self) -> (Vec<Trajectory>, Vec<Forecasts>) {
        let trajs = self.cal1.iter().chain(self.cal2.iter()).cloned().collect();
        let fcs = self.fc_cal1.iter().chain(&self.fc_cal2).cloned().collect();
        (trajs, fcs)
    }
}

/// Generates, splits, normalizes and forecasts repetition `rep`.
pub fn prepare(cfg: &ExperimentConfig, rep: usize) -> Result<Prepared> {
    let rep_seed = repetition_seed(cfg.seed, rep);
    let ar = ArConfig {
        seed: rep_seed,
        ..cfg.ar.clone()
    };
    let pool = generate_ar_range(&ar, 0..cfg.n, ar.delta, Role::Unassigned)?;
    let test = generate_ar_range(&ar, cfg.n..cfg.n + cfg.n_test, ar.test_delta(), Role::Test)?;
    let split = split_dataset(&pool, cfg.split, rep_seed.wrapping_add(1))?;
    let normalizer = Normalizer::fit(&split.train);
    let train = normalizer.map_set(&split.train);
    let cal1 = normalizer.map_set(&split.cal1);
    let cal2 = normalizer.map_set(&split.cal2);
    let test = normalizer.map_set(&test);
    let forecaster = ArForecaster::fit(&train, cfg.forecaster.order, cfg.forecaster.ridge)?;
    let fc_train = forecast_set(&forecaster, &train, cfg.lags)?;
    let fc_cal1 = forecast_set(&forecaster, &cal1, cfg.lags)?;
    let fc_cal2 = forecast_set(&forecaster, &cal2, cfg.lags)?;
    let fc_test = forecast_set(&forecaster, &test, cfg.lags)?;
    let warm_seed = rep_seed.wrapping_add(2);
    let warm = WarmStart::standard(
        &one_step_residuals(train.trajectories(), &fc_train),
        cfg.alpha,
        warm_seed,
    )?;
    let warm_lags = multistep_warm_start(
        train.trajectories(),
        &fc_train,
        cfg.lags,
        cfg.alpha,
        warm_seed,
    )?;
    Ok(Prepared {
        train,
        cal1,
        cal2,
        test,
        normalizer,
        forecaster,
        fc_train,
        fc_cal1,
        fc_cal2,
        fc_test,
        warm,
        warm_lags,
    })
}

/// Test-time bands of one method.
pub enum TestBands {
    Single(Vec<PredictionBand>),
    Multi(Vec<MultiStepBand>),
}

impl TestBands {
    fn covered_and_width(&self, trajs: &[Trajectory]) -> Result<Vec<(bool, f64)>> {
        match self {
            Self::Single(bands) => bands
                .iter()
                .zip(trajs)
                .map(|(b, tr)| Ok((covers_simultaneously(b, tr)?, band_width_stats(b))))
                .collect(),
            Self::Multi(bands) => bands
                .iter()
                .zip(trajs)
                .map(|(b, tr)| Ok((covers_multistep(b, tr)?, b.mean_width())))
                .collect(),
        }
    }

    /// Single-step view: the lag-1 intervals of a multi-step band.
    pub fn one_step(&self, i: usize) -> PredictionBand {
        match self {
            Self::Single(bands) => bands[i].clone(),
            Self::Multi(bands) => {
                let b = &bands[i];
                let steps: Vec<Vec<Interval>> = (0..b.horizon())
                    .map(|s| b.get(s, 1).unwrap().to_vec())
                    .collect();
                PredictionBand::new(steps).expect("lag-1 intervals form a band")
            }
        }
    }
}

/// Result of one method in one repetition.
pub struct MethodRun {
    pub bands: TestBands,
    pub tuning: Option<Vec<TuningRow>>,
    pub gamma: Option<f64>,
    pub margin: Option<f64>,
}

/// Fits `method` on the prepared data and builds its test bands.
pub fn run_method(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    method: &MethodSpec,
) -> Result<MethodRun> {
    let test = prep.test.trajectories();
    let cal1 = (prep.cal1.trajectories(), prep.fc_cal1.as_slice());
    let cal2 = (prep.cal2.trajectories(), prep.fc_cal2.as_slice());
    let multi = cfg.lags > 1;
    let grid = cfg.tuning.grid()?;
    match *method {
        MethodSpec::Cafht {
            score,
            tracker,
            tuning,
        } => {
            let base = CafhtConfig::new(cfg.alpha, score, tracker);
            if multi {
                let ms = MultiStepConfig {
                    base,
                    lags: cfg.lags,
                    decay: cfg.tuning.decay,
                };
                let (pred, outcome) = match tuning {
                    TuningMode::Split => {
                        calibrate_multistep_split(cal1, cal2, &grid, &ms, &prep.warm_lags)?
                    }
                    TuningMode::Theory => {
                        let (ct, cf) = prep.cal();
                        let corr =
                            corrected_level(ct.len(), grid.len(), cfg.alpha, cfg.tuning.markov_b)?;
                        let level = 1.0 - corr.corrected;
                        let outcome =
                            select_gamma_multistep(&ct, &cf, &grid, &ms, &prep.warm_lags, level)?;
                        let pred = calibrate_multistep_at_level(
                            &ct,
                            &cf,
                            outcome.gamma,
                            &ms,
                            &prep.warm_lags,
                            level,
                        )?;
                        (pred, outcome)
                    }
                };
                let bands = test
                    .par_iter()
                    .zip(&prep.fc_test)
                    .map(|(tr, fc)| pred.predict_multistep(fc, tr))
                    .collect::<Result<Vec<_>>>()?;
                Ok(MethodRun {
                    bands: TestBands::Multi(bands),
                    tuning: Some(outcome.rows),
                    gamma: Some(pred.gamma),
                    margin: Some(pred.margin),
                })
            } else {
                let (pred, outcome) = match tuning {
                    TuningMode::Split => calibrate_split(cal1, cal2, &grid, &base, &prep.warm)?,
                    TuningMode::Theory => {
                        let (ct, cf) = prep.cal();
                        let (p, o, _) = calibrate_theory(
                            &ct,
                            &cf,
                            &grid,
                            &base,
                            &prep.warm,
                            cfg.tuning.markov_b,
                        )?;
                        (p, o)
                    }
                };
                let bands = test
                    .par_iter()
                    .zip(&prep.fc_test)
                    .map(|(tr, fc)| pred.predict_band(fc, tr))
                    .collect::<Result<Vec<_>>>()?;
                Ok(MethodRun {
                    bands: TestBands::Single(bands),
                    tuning: Some(outcome.rows),
                    gamma: Some(pred.gamma),
                    margin: Some(pred.margin),
                })
            }
        }
        MethodSpec::Cfrnn => {
            if multi {
                return Err(Error::Config(
                    "CFRNN produces single-step bands only".into(),
                ));
            }
            let (ct, cf) = prep.cal();
            let model = CfrnnModel::fit(&ct, &cf, cfg.alpha)?;
            let bands = prep
                .fc_test
                .iter()
                .map(|fc| model.predict(fc))
                .collect::<Result<Vec<_>>>()?;
            Ok(MethodRun {
                bands: TestBands::Single(bands),
                tuning: None,
                gamma: None,
                margin: None,
            })
        }
        MethodSpec::Nctp => {
            let (ct, cf) = prep.cal();
            let model = NctpModel::fit_multistep(
                (prep.train.trajectories(), &prep.fc_train),
                (&ct, &cf),
                cfg.alpha,
                cfg.lags,
            )?;
            let bands = if multi {
                TestBands::Multi(
                    prep.fc_test
                        .iter()
                        .map(|fc| model.predict_multistep(fc))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                TestBands::Single(
                    prep.fc_test
                        .iter()
                        .map(|fc| model.predict(fc))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            Ok(MethodRun {
                bands,
                tuning: None,
                gamma: None,
                margin: Some(model.margin),
            })
        }
        MethodSpec::RawAci { tracker, gamma } => {
            let base = CafhtConfig::new(cfg.alpha, ScoreKind::Additive, tracker);
            let bands = if multi {
                let ms = MultiStepConfig {
                    base,
                    lags: cfg.lags,
                    decay: cfg.tuning.decay,
                };
                TestBands::Multi(
                    test.iter()
                        .zip(&prep.fc_test)
                        .map(|(tr, fc)| {
                            run_multistep_aci(fc, tr, tracker, gamma, &ms, &prep.warm_lags)
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                let tc = base.tracker_config(gamma);
                TestBands::Single(
                    test.iter()
                        .zip(&prep.fc_test)
                        .map(|(tr, fc)| crate::adaptive::run_aci_band(fc, tr, &tc, &prep.warm))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            Ok(MethodRun {
                bands,
                tuning: None,
                gamma: Some(gamma),
                margin: None,
            })
        }
    }
}

/// Fraction of `label` trajectories fully covered; `None` when there are
/// none.
pub fn conditional_coverage(results: &[(Label, bool)], label: Label) -> Option<f64> {
    let (n, covered) = results
        .iter()
        .filter(|(l, _)| *l == label)
        .fold((0usize, 0usize), |(n, c), (_, cov)| {
            (n + 1, c + *cov as usize)
        });
    (n > 0).then(|| covered as f64 / n as f64)
}

/// Metrics of one method in one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub marginal: f64,
    pub width: f64,
    pub cond_hard: Option<f64>,
    pub cond_easy: Option<f64>,
    pub n_test: usize,
    pub n_hard: usize,
    pub covered: usize,
    pub covered_hard: usize,
    pub gamma: Option<f64>,
    pub margin: Option<f64>,
}

pub fn evaluate(run: &MethodRun, test: &[Trajectory]) -> Result<RepMetrics> {
    let cw = run.bands.covered_and_width(test)?;
    let pairs: Vec<(Label, bool)> = test
        .iter()
        .zip(&cw)
        .map(|(tr, (c, _))| (tr.label(), *c))
        .collect();
    let n = test.len();
    let covered = pairs.iter().filter(|(_, c)| *c).count();
    let n_hard = pairs.iter().filter(|(l, _)| *l == Label::Hard).count();
    let covered_hard = pairs
        .iter()
        .filter(|(l, c)| *l == Label::Hard && *c)
        .count();
    Ok(RepMetrics {
        marginal: covered as f64 / n as f64,
        width: cw.iter().map(|(_, w)| w).sum::<f64>() / n as f64,
        cond_hard: conditional_coverage(&pairs, Label::Hard),
        cond_easy: conditional_coverage(&pairs, Label::Easy),
        n_test: n,
        n_hard,
        covered,
        covered_hard,
        gamma: run.gamma,
        margin: run.margin,
    })
}

/// All repetitions of one method at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: String,
    pub sweep_value: Option<f64>,
    /// Indexed by repetition.
    pub outcomes: Vec<std::result::Result<RepMetrics, String>>,
}

impl Cell {
    pub fn successes(&self) -> impl Iterator<Item = &RepMetrics> {
        self.outcomes.iter().filter_map(|o| o.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_err()).count()
    }
}

/// Tuning table of the first repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningRecord {
    pub method: String,
    pub sweep_value: Option<f64>,
    pub rows: Vec<TuningRow>,
}

/// Example band from the first repetition, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRecord {
    pub method: String,
    pub sweep_value: Option<f64>,
    pub trajectory: Trajectory,
    pub band: PredictionBand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub sweep_variable: Option<SweepVariable>,
    pub config_text: String,
    pub cells: Vec<Cell>,
    pub tuning: Vec<TuningRecord>,
    pub bands: Vec<BandRecord>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().map(Cell::failures).sum()
    }

    pub fn cell(&self, method: &str, sweep_value: Option<f64>) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.sweep_value == sweep_value)
    }
}

struct RepOutput {
    outcomes: Vec<std::result::Result<RepMetrics, String>>,
    tuning: Vec<TuningRecord>,
    bands: Vec<BandRecord>,
}

fn run_repetition(point_cfg: &ExperimentConfig, point: Option<f64>, rep: usize) -> RepOutput {
    let capture = rep == 0;
    let mut out = RepOutput {
        outcomes: Vec::with_capacity(point_cfg.methods.len()),
        tuning: Vec::new(),
        bands: Vec::new(),
    };
    let prep = match prepare(point_cfg, rep) {
        Ok(p) => p,
        Err(e) => {
            let msg = format!("data preparation failed: {e}");
            out.outcomes = point_cfg.methods.iter().map(|_| Err(msg.clone())).collect();
            return out;
        }
    };
    for method in &point_cfg.methods {
        let label = method.label();
        let result = run_method(point_cfg, &prep, method).and_then(|run| {
            let m = evaluate(&run, prep.test.trajectories())?;
            Ok((run, m))
        });
        match result {
            Ok((run, m)) => {
                if capture {
                    if let Some(rows) = run.tuning.clone() {
                        out.tuning.push(TuningRecord {
                            method: label.clone(),
                            sweep_value: point,
                            rows,
                        });
                    }
                    for i in 0..point_cfg.bands_sample.min(prep.test.len()) {
                        out.bands.push(BandRecord {
                            method: label.clone(),
                            sweep_value: point,
                            trajectory: prep.test.trajectories()[i].clone(),
                            band: run.bands.one_step(i),
                        });
                    }
                }
                out.outcomes.push(Ok(m));
            }
            Err(e) => out.outcomes.push(Err(e.to_string())),
        }
    }
    out
}

/// Runs every repetition of every sweep point. Deterministic in the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let points = cfg.points();
    let point_cfgs = points
        .iter()
        .map(|&p| cfg.at_point(p))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.repetitions).map(move |r| (p, r)))
        .collect();
    let outputs: Vec<RepOutput> = jobs
        .par_iter()
        .map(|&(p, r)| run_repetition(&point_cfgs[p], points[p], r))
        .collect();
    let mut cells = Vec::new();
    let mut tuning = Vec::new();
    let mut bands = Vec::new();
    for (p, &point) in points.iter().enumerate() {
        let reps = &outputs[p * cfg.repetitions..(p + 1) * cfg.repetitions];
        for (k, method) in cfg.methods.iter().enumerate() {
            cells.push(Cell {
                method: method.label(),
                sweep_value: point,
                outcomes: reps.iter().map(|o| o.outcomes[k].clone()).collect(),
            });
        }
        tuning.extend(reps[0].tuning.iter().cloned());
        bands.extend(reps[0].bands.iter().cloned());
    }
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        sweep_variable: cfg.sweep.as_ref().map(|s| s.variable),
        config_text: cfg.to_toml()?,
        cells,
        tuning,
        bands,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditional_coverage_counts() {
        let r = [
            (Label::Hard, true),
            (Label::Easy, true),
            (Label::Hard, false),
            (Label::Easy, true),
        ];
        assert_eq!(conditional_coverage(&r, Label::Hard), Some(0.5));
        assert_eq!(conditional_coverage(&r, Label::Easy), Some(1.0));
        assert_eq!(conditional_coverage(&r, Label::Unlabeled), None);
        assert_eq!(
            conditional_coverage(&[(Label::Easy, true)], Label::Easy),
            Some(1.0)
        );
    }

    #[test]
    fn config_parses_with_defaults_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 4
            repetitions = 2
            [ar]
            T = 20
            delta = 0.2
            [[methods]]
            kind = "cafht"
            score = "additive"
            tracker = "pid"
            tuning = "theory"
            [[methods]]
            kind = "raw-aci"
            tracker = "aci"
            gamma = 0.01
            [sweep]
            variable = "delta_test"
            values = [0.2, 0.5]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.ar.horizon, 20);
        assert_eq!(cfg.methods[0].label(), "cafht-additive-pid-theory");
        assert_eq!(cfg.methods[1].label(), "raw-aci-0.01");
        assert_eq!(cfg.points(), vec![Some(0.2), Some(0.5)]);
        assert_eq!(cfg.at_point(Some(0.5)).unwrap().ar.test_delta(), 0.5);
        let err = ExperimentConfig::from_toml("seeed = 3")
            .unwrap_err()
            .to_string();
        assert!(err.contains("seeed"), "{err}");
        assert!(ExperimentConfig::from_toml("[ar]\nT = 5\nbogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("alpha = 1.5").is_err());
    }

    #[test]
    fn repetition_seeds_are_distinct() {
        let s: std::collections::HashSet<u64> = (0..100).map(|r| repetition_seed(7, r)).collect();
        assert_eq!(s.len(), 100);
    }

    #[test]
    fn tiny_experiment_runs() {
        let cfg = ExperimentConfig {
            repetitions: 2,
            n: 120,
            n_test: 30,
            ar: ArConfig {
                horizon: 15,
                ..ArConfig::default()
            },
            tuning: TuningSettings {
                grid: Some(vec![0.01, 0.1]),
                ..TuningSettings::default()
            },
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert_eq!(report.failures(), 0);
        for cell in &report.cells {
            for m in cell.successes() {
                assert!((0.0..=1.0).contains(&m.marginal));
                let hard = m.cond_hard.unwrap_or(0.0) * m.n_hard as f64;
                let easy = m.cond_easy.unwrap_or(0.0) * (m.n_test - m.n_hard) as f64;
                assert!((hard + easy - m.covered as f64).abs() < 1e-9);
            }
        }
        assert_eq!(run_experiment(&cfg).unwrap().cells, report.cells);
    }
}
