//! Online adaptive trackers producing per-trajectory bands.
//!
//! Two trackers are provided:
//!
//! * ACI tracks a miscoverage level, `alpha_{t+1} = alpha_t + gamma (alpha - err_t)`,
//!   and reads the radius off the empirical `1 - alpha_t` quantile of the
//!   trajectory's own absolute residuals (seeded with warm-start scores).
//! * The quantile-tracking simplification of conformal PID updates the
//!   radius directly, `q_{t+1} = max(0, q_t + gamma (err_t - alpha))`.
//!
//! A tracker may run at lag `tau`: it issues an interval for `Y_{s+tau}`
//! at time `s` and is scored once that value is revealed. The one-step
//! band is lag 1.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::Forecasts;
use crate::quantile::{empirical_quantile, SortedScores};
use crate::trajectory::{Interval, PredictionBand, Trajectory};

pub const WARM_START_COUNT: usize = 5;
pub const WARM_START_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerKind {
    Aci,
    Pid,
}

impl TrackerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackerKind::Aci => "aci",
            TrackerKind::Pid => "pid",
        }
    }
}

impl std::str::FromStr for TrackerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aci" => Ok(Self::Aci),
            "pid" => Ok(Self::Pid),
            _ => Err(Error::Config(format!(
                "unknown tracker `{s}` (expected aci or pid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub kind: TrackerKind,
    pub gamma: f64,
    /// Nominal miscoverage the tracker aims for.
    pub alpha: f64,
}

/// Initial tracker state derived from training residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    /// Artificial ACI scores, per dimension.
    pub aci_scores: Vec<Vec<f64>>,
    pub initial_alpha: f64,
    /// Initial PID radius, per dimension.
    pub pid_q0: Vec<f64>,
    pub seed: u64,
}

impl WarmStart {
    /// `count` uniform draws on `[min, max]` of each dimension's residuals
    /// for ACI, and the empirical `1 - alpha` residual quantile for PID.
    pub fn from_residuals(
        residuals: &[Vec<f64>],
        alpha: f64,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        if residuals.is_empty() || residuals.iter().any(Vec::is_empty) {
            return Err(Error::Config("warm start needs training residuals".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut aci_scores = Vec::with_capacity(residuals.len());
        let mut pid_q0 = Vec::with_capacity(residuals.len());
        for res in residuals {
            let lo = res.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = res.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            aci_scores.push(
                (0..count)
                    .map(|_| lo + (hi - lo) * rng.gen::<f64>())
                    .collect(),
            );
            let q = empirical_quantile(res, 1.0 - alpha)?;
            pid_q0.push(if q.is_finite() { q } else { hi });
        }
        Ok(Self {
            aci_scores,
            initial_alpha: WARM_START_ALPHA,
            pid_q0,
            seed,
        })
    }

    /// Default warm start: five scores, `alpha_init = 0.1`.
    pub fn standard(residuals: &[Vec<f64>], alpha: f64, seed: u64) -> Result<Self> {
        Self::from_residuals(residuals, alpha, WARM_START_COUNT, seed)
    }

    /// Every warm score and `q_0` equal to `value`.
    pub fn constant(dim: usize, value: f64, count: usize) -> Self {
        Self {
            aci_scores: vec![vec![value; count]; dim],
            initial_alpha: WARM_START_ALPHA,
            pid_q0: vec![value; dim],
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.pid_q0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Issued {
    target: usize,
    prediction: f64,
    interval: Interval,
}

/// ACI level tracker for one dimension at one lag.
#[derive(Debug, Clone)]
pub struct AciTracker {
    gamma: f64,
    alpha: f64,
    alpha_t: f64,
    history: SortedScores,
}

impl AciTracker {
    pub fn new(gamma: f64, alpha: f64, initial_alpha: f64, warm_scores: &[f64]) -> Self {
        Self {
            gamma,
            alpha,
            alpha_t: initial_alpha,
            history: SortedScores::new(warm_scores),
        }
    }

    pub fn alpha_t(&self) -> f64 {
        self.alpha_t
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Radius at the current level. `alpha_t <= 0` gives an unbounded
    /// interval, `alpha_t >= 1` a degenerate one.
    pub fn radius(&self) -> f64 {
        radius_at(&self.history, self.alpha_t)
    }

    fn record(&mut self, score: f64, err: bool) {
        self.history.insert(score);
        self.alpha_t += self.gamma * (self.alpha - if err { 1.0 } else { 0.0 });
    }
}

/// ACI radius for `history` at level `alpha_t`.
pub fn radius_at(history: &SortedScores, alpha_t: f64) -> f64 {
    if alpha_t <= 0.0 || history.is_empty() {
        f64::INFINITY
    } else if alpha_t >= 1.0 {
        0.0
    } else {
        history.plain_quantile(1.0 - alpha_t)
    }
}

/// Quantile-tracking tracker for one dimension at one lag.
#[derive(Debug, Clone)]
pub struct PidTracker {
    gamma: f64,
    alpha: f64,
    q: f64,
}

impl PidTracker {
    pub fn new(gamma: f64, alpha: f64, q0: f64) -> Self {
        Self {
            gamma,
            alpha,
            q: q0.max(0.0),
        }
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    fn record(&mut self, err: bool) {
        let e = if err { 1.0 } else { 0.0 };
        self.q = (self.q + self.gamma * (e - self.alpha)).max(0.0);
    }
}

#[derive(Debug, Clone)]
enum Engine {
    Aci(AciTracker),
    Pid(PidTracker),
}

/// One row of a tracker trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    /// `alpha_t` for ACI, `q_t` for PID, at the time the interval was issued.
    pub state: f64,
    pub radius: f64,
    /// Whether the interval issued for step `t` missed `Y_t`; `None` while
    /// unrevealed.
    pub err: Option<bool>,
}

/// A single-dimension tracker that issues intervals and learns from misses.
#[derive(Debug, Clone)]
pub struct Tracker {
    engine: Engine,
    pending: VecDeque<Issued>,
    errors: usize,
    observed: usize,
}

impl Tracker {
    pub fn new(cfg: &TrackerConfig, warm: &WarmStart, dim: usize) -> Self {
        Self::with_gamma(cfg.kind, cfg.gamma, cfg.alpha, warm, dim)
    }

    pub fn with_gamma(
        kind: TrackerKind,
        gamma: f64,
        alpha: f64,
        warm: &WarmStart,
        dim: usize,
    ) -> Self {
        let engine = match kind {
            TrackerKind::Aci => Engine::Aci(AciTracker::new(
                gamma,
                alpha,
                warm.initial_alpha,
                &warm.aci_scores[dim],
            )),
            TrackerKind::Pid => Engine::Pid(PidTracker::new(gamma, alpha, warm.pid_q0[dim])),
        };
        Self {
            engine,
            pending: VecDeque::new(),
            errors: 0,
            observed: 0,
        }
    }

    pub fn state(&self) -> f64 {
        match &self.engine {
            Engine::Aci(a) => a.alpha_t(),
            Engine::Pid(p) => p.q(),
        }
    }

    pub fn radius(&self) -> f64 {
        match &self.engine {
            Engine::Aci(a) => a.radius(),
            Engine::Pid(p) => p.q(),
        }
    }

    /// Number of scored intervals that missed.
    pub fn errors(&self) -> usize {
        self.errors
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    /// Reveals `Y_t`. If an interval targeted step `t`, scores it and
    /// returns whether it missed.
    pub fn observe(&mut self, t: usize, y: f64) -> Option<bool> {
        match self.pending.front() {
            Some(iss) if iss.target == t => {}
            _ => return None,
        }
        let iss = self.pending.pop_front().unwrap();
        let err = !iss.interval.contains(y);
        match &mut self.engine {
            Engine::Aci(a) => a.record((y - iss.prediction).abs(), err),
            Engine::Pid(p) => p.record(err),
        }
        self.errors += err as usize;
        self.observed += 1;
        Some(err)
    }

    /// Issues the interval for step `target` around `prediction`.
    pub fn issue(&mut self, target: usize, prediction: f64) -> Interval {
        let interval = Interval::centered(prediction, self.radius());
        self.pending.push_back(Issued {
            target,
            prediction,
            interval,
        });
        interval
    }

    /// One-step update: score the previous interval against
    /// `observed_prev` (if any), then issue the next one.
    pub fn step(&mut self, t: usize, prediction: f64, observed_prev: Option<f64>) -> Interval {
        if let Some(y) = observed_prev {
            self.observe(t - 1, y);
        }
        self.issue(t, prediction)
    }
}

/// Raw adaptive band: one tracker per dimension, fed the one-step forecasts.
pub fn run_aci_band(
    forecasts: &Forecasts,
    traj: &Trajectory,
    cfg: &TrackerConfig,
    warm: &WarmStart,
) -> Result<PredictionBand> {
    Ok(run_aci_band_traced(forecasts, traj, cfg, warm)?.0)
}

/// Like [`run_aci_band`], also returning the per-dimension traces.
pub fn run_aci_band_traced(
    forecasts: &Forecasts,
    traj: &Trajectory,
    cfg: &TrackerConfig,
    warm: &WarmStart,
) -> Result<(PredictionBand, Vec<Vec<TraceRow>>)> {
    forecasts.check_matches(traj)?;
    if warm.dim() != traj.dim() {
        return Err(Error::Shape(format!(
            "warm start has {} dimensions, trajectory has {}",
            warm.dim(),
            traj.dim()
        )));
    }
    let horizon = traj.horizon();
    let mut steps = vec![Vec::with_capacity(traj.dim()); horizon];
    let mut traces = Vec::with_capacity(traj.dim());
    for j in 0..traj.dim() {
        let mut tracker = Tracker::new(cfg, warm, j);
        let mut trace = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            if t > 1 {
                let err = tracker.observe(t - 1, traj.value(t - 1, j));
                if let Some(row) = trace.last_mut() {
                    let row: &mut TraceRow = row;
                    row.err = err;
                }
            }
            let state = tracker.state();
            let iv = tracker.issue(t, forecasts.one_step(t)[j]);
            steps[t - 1].push(iv);
            trace.push(TraceRow {
                t,
                state,
                radius: (iv.upper - iv.lower) / 2.0,
                err: None,
            });
        }
        if let Some(row) = trace.last_mut() {
            row.err = Some(!steps[horizon - 1][j].contains(traj.value(horizon, j)));
        }
        traces.push(trace);
    }
    Ok((PredictionBand::new(steps)?, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{covers_simultaneously, Label};
    use rand_distr::{Distribution, StandardNormal};

    fn zero_forecasts(horizon: usize, dim: usize) -> Forecasts {
        Forecasts::new((0..horizon).map(|_| vec![vec![0.0; dim]]).collect(), 1).unwrap()
    }

    fn noise_traj(id: usize, horizon: usize, seed: u64, sd: f64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = (0..=horizon)
            .map(|t| {
                if t == 0 {
                    0.0
                } else {
                    {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sd * z
                    }
                }
            })
            .collect();
        Trajectory::from_scalars(id, &ys, Label::Unlabeled).unwrap()
    }

    #[test]
    fn aci_level_update_examples() {
        let mut a = AciTracker::new(0.01, 0.1, 0.1, &[1.0]);
        a.record(0.5, true);
        assert!((a.alpha_t() - 0.091).abs() < 1e-15);
        let mut b = AciTracker::new(0.01, 0.1, 0.1, &[1.0]);
        b.record(0.5, false);
        assert!((b.alpha_t() - 0.101).abs() < 1e-15);
    }

    #[test]
    fn pid_update_examples() {
        let mut p = PidTracker::new(0.1, 0.1, 0.5);
        p.record(true);
        assert!((p.q() - 0.59).abs() < 1e-15);
        let mut p = PidTracker::new(0.1, 0.1, 0.5);
        p.record(false);
        assert!((p.q() - 0.49).abs() < 1e-15);
        let mut p = PidTracker::new(0.9, 0.1, 0.01);
        p.record(false);
        assert_eq!(p.q(), 0.0);
    }

    #[test]
    fn level_extremes() {
        let h = SortedScores::new(&[0.1, 0.2, 0.3]);
        assert_eq!(radius_at(&h, 0.0), f64::INFINITY);
        assert_eq!(radius_at(&h, -0.2), f64::INFINITY);
        assert_eq!(radius_at(&h, 1.0), 0.0);
        assert_eq!(radius_at(&h, 1.3), 0.0);
        assert_eq!(radius_at(&h, 0.5), 0.2);
    }

    #[test]
    fn warm_start_degenerate_range() {
        let w = WarmStart::standard(&[vec![0.3; 40]], 0.1, 1).unwrap();
        assert_eq!(w.aci_scores[0], vec![0.3; 5]);
        assert_eq!(w.pid_q0[0], 0.3);
        assert_eq!(w.initial_alpha, 0.1);
    }

    #[test]
    fn warm_start_pid_rank() {
        let res: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let w = WarmStart::standard(&[res], 0.1, 1).unwrap();
        assert_eq!(w.pid_q0[0], 1.0);
    }

    #[test]
    fn warm_start_requires_residuals() {
        assert!(WarmStart::standard(&[vec![]], 0.1, 1).is_err());
        assert!(WarmStart::standard(&[], 0.1, 1).is_err());
    }

    #[test]
    fn warm_scores_uniform_on_residual_range() {
        let res = vec![0.2, 0.9, 0.5, 1.7];
        let n = 10_000;
        let w = WarmStart::from_residuals(&[res], 0.1, n, 42).unwrap();
        let mut xs = w.aci_scores[0].clone();
        assert!(xs.iter().all(|&x| (0.2..=1.7).contains(&x)));
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x - 0.2) / 1.5;
                (f - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value of the Kolmogorov distribution.
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn perfect_forecaster_gives_degenerate_band() {
        let traj = noise_traj(0, 30, 1, 1.0);
        let rows = (0..30).map(|s| vec![traj.step(s + 1).to_vec()]).collect();
        let fc = Forecasts::new(rows, 1).unwrap();
        let warm = WarmStart::constant(1, 0.0, 5);
        for kind in [TrackerKind::Aci, TrackerKind::Pid] {
            let cfg = TrackerConfig {
                kind,
                gamma: 0.05,
                alpha: 0.1,
            };
            let band = run_aci_band(&fc, &traj, &cfg, &warm).unwrap();
            for t in 1..=30 {
                let iv = band.at(t)[0];
                assert_eq!(iv.lower, traj.value(t, 0));
                assert_eq!(iv.upper, traj.value(t, 0));
            }
            assert!(covers_simultaneously(&band, &traj).unwrap());
        }
    }

    #[test]
    fn long_run_miss_rate_within_aci_bound() {
        let horizon = 10_000;
        let traj = noise_traj(0, horizon, 9, 1.0);
        let fc = zero_forecasts(horizon, 1);
        let warm = WarmStart::from_residuals(&[vec![0.0, 3.0]], 0.1, 5, 3).unwrap();
        for gamma in [0.005, 0.01, 0.05] {
            let cfg = TrackerConfig {
                kind: TrackerKind::Aci,
                gamma,
                alpha: 0.1,
            };
            let band = run_aci_band(&fc, &traj, &cfg, &warm).unwrap();
            let misses = (1..=horizon)
                .filter(|&t| !band.at(t)[0].contains(traj.value(t, 0)))
                .count();
            let rate = misses as f64 / horizon as f64;
            let a1: f64 = 0.1;
            let bound = (a1.max(1.0 - a1) + gamma) / (horizon as f64 * gamma);
            assert!(
                (rate - 0.1).abs() <= bound,
                "gamma={gamma}: rate {rate}, bound {bound}"
            );
        }
    }

    #[test]
    fn pid_long_run_miss_rate() {
        let horizon = 10_000;
        let traj = noise_traj(0, horizon, 21, 1.0);
        let fc = zero_forecasts(horizon, 1);
        let warm = WarmStart::constant(1, 1.0, 5);
        let cfg = TrackerConfig {
            kind: TrackerKind::Pid,
            gamma: 0.05,
            alpha: 0.1,
        };
        let band = run_aci_band(&fc, &traj, &cfg, &warm).unwrap();
        let misses = (1..=horizon)
            .filter(|&t| !band.at(t)[0].contains(traj.value(t, 0)))
            .count();
        let rate = misses as f64 / horizon as f64;
        // Quantile tracking: |rate - alpha| <= (q_max + gamma) / (gamma T).
        assert!((rate - 0.1).abs() < 0.02, "rate {rate}");
        assert!(band.intervals().all(|iv| iv.width() >= 0.0));
    }

    #[test]
    fn telescoping_level_identity() {
        let horizon = 500;
        let traj = noise_traj(0, horizon, 4, 1.0);
        let fc = zero_forecasts(horizon, 1);
        let warm = WarmStart::from_residuals(&[vec![0.0, 2.0]], 0.1, 5, 1).unwrap();
        let gamma = 0.03;
        let mut tr = Tracker::with_gamma(TrackerKind::Aci, gamma, 0.1, &warm, 0);
        let a1 = tr.state();
        for t in 1..=horizon {
            tr.step(t, fc.one_step(t)[0], (t > 1).then(|| traj.value(t - 1, 0)));
        }
        tr.observe(horizon, traj.value(horizon, 0));
        let lhs = tr.state() - a1;
        let rhs = gamma * (horizon as f64 * 0.1 - tr.errors() as f64);
        assert_eq!(tr.observed(), horizon);
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn radius_non_increasing_in_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..60).map(|_| rng.gen::<f64>()).collect();
        let h = SortedScores::new(&scores);
        let mut prev = f64::INFINITY;
        for i in 0..=120 {
            let a = -0.1 + i as f64 * 0.01;
            let r = radius_at(&h, a);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn dimensions_evolve_independently() {
        let a = noise_traj(0, 40, 1, 1.0);
        let b = noise_traj(0, 40, 2, 3.0);
        let joint = Trajectory::new(
            0,
            (0..=40)
                .map(|t| vec![a.value(t, 0), b.value(t, 0)])
                .collect(),
            Label::Unlabeled,
        )
        .unwrap();
        let swapped = Trajectory::new(
            0,
            joint.values().iter().map(|v| vec![v[1], v[0]]).collect(),
            Label::Unlabeled,
        )
        .unwrap();
        let warm = WarmStart::from_residuals(&[vec![0.0, 1.0], vec![0.0, 4.0]], 0.1, 5, 7).unwrap();
        let warm_swapped = WarmStart {
            aci_scores: vec![warm.aci_scores[1].clone(), warm.aci_scores[0].clone()],
            pid_q0: vec![warm.pid_q0[1], warm.pid_q0[0]],
            ..warm.clone()
        };
        let cfg = TrackerConfig {
            kind: TrackerKind::Aci,
            gamma: 0.05,
            alpha: 0.1,
        };
        let fc = zero_forecasts(40, 2);
        let band = run_aci_band(&fc, &joint, &cfg, &warm).unwrap();
        let band_sw = run_aci_band(&fc, &swapped, &cfg, &warm_swapped).unwrap();
        for t in 1..=40 {
            assert_eq!(band.at(t)[0], band_sw.at(t)[1]);
            assert_eq!(band.at(t)[1], band_sw.at(t)[0]);
        }
        // Each dimension matches its own one-dimensional run.
        let warm_b = WarmStart {
            aci_scores: vec![warm.aci_scores[1].clone()],
            pid_q0: vec![warm.pid_q0[1]],
            ..warm.clone()
        };
        let solo = run_aci_band(&zero_forecasts(40, 1), &b, &cfg, &warm_b).unwrap();
        for t in 1..=40 {
            assert_eq!(band.at(t)[1], solo.at(t)[0]);
        }
    }

    #[test]
    fn trace_records_misses() {
        let traj = noise_traj(0, 50, 5, 1.0);
        let warm = WarmStart::constant(1, 0.5, 5);
        let cfg = TrackerConfig {
            kind: TrackerKind::Aci,
            gamma: 0.05,
            alpha: 0.1,
        };
        let (band, traces) =
            run_aci_band_traced(&zero_forecasts(50, 1), &traj, &cfg, &warm).unwrap();
        for row in &traces[0] {
            let miss = !band.at(row.t)[0].contains(traj.value(row.t, 0));
            assert_eq!(row.err, Some(miss));
        }
    }
}
