use cafht::adaptive::TrackerKind;
use cafht::conformal::{CafhtConfig, ScoreKind};
use cafht::experiments::{
    conditional_coverage, prepare, run_experiment, ExperimentConfig, MethodSpec, TuningMode,
};
use cafht::forecaster::Normalizer;
use cafht::pipeline::{
    calibrate_model, fit_model, predict_offline, predict_online, CalibrationOptions,
};
use cafht::simdata::{generate_ar, generate_ar_range, split_dataset, ArConfig, SplitConfig};
use cafht::trajectory::{
    band_width_stats, covers_simultaneously, Interval, Label, PredictionBand, Role, Trajectory,
};
use cafht::tuning::{select_gamma_split, GammaGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_band(rng: &mut ChaCha8Rng, horizon: usize, dim: usize) -> (PredictionBand, Trajectory) {
    let mut steps = Vec::new();
    let mut values = vec![vec![0.0; dim]];
    for _ in 0..horizon {
        let mut row = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..dim {
            let c: f64 = rng.gen_range(-1.0..1.0);
            row.push(if rng.gen::<f64>() < 0.1 {
                Interval::unbounded()
            } else {
                let h = rng.gen_range(0.0..0.6);
                Interval::new(c - h, c + h)
            });
            ys.push(c + rng.gen_range(-0.7..0.7));
        }
        steps.push(row);
        values.push(ys);
    }
    (
        PredictionBand::new(steps).unwrap(),
        Trajectory::new(0, values, Label::Unlabeled).unwrap(),
    )
}

#[test]
fn width_and_coverage_match_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (horizon, dim) = (rng.gen_range(1..12), rng.gen_range(1..4));
        let (band, traj) = random_band(&mut rng, horizon, dim);
        let mut sum = 0.0;
        let mut count = 0.0;
        let mut all_in = true;
        for t in 1..=traj.horizon() {
            for j in 0..traj.dim() {
                let iv = band.at(t)[j];
                sum += if iv.lower.is_finite() && iv.upper.is_finite() {
                    iv.upper - iv.lower
                } else {
                    2.0
                };
                count += 1.0;
                let y = traj.value(t, j);
                all_in &= iv.lower <= y && y <= iv.upper;
            }
        }
        assert!((band_width_stats(&band) - sum / count).abs() < 1e-12);
        assert_eq!(covers_simultaneously(&band, &traj).unwrap(), all_in);
    }
}

#[test]
fn conditional_coverage_matches_direct_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(0..40);
        let results: Vec<(Label, bool)> = (0..n)
            .map(|_| {
                (
                    if rng.gen::<f64>() < 0.3 {
                        Label::Hard
                    } else {
                        Label::Easy
                    },
                    rng.gen::<bool>(),
                )
            })
            .collect();
        for label in [Label::Hard, Label::Easy] {
            let group: Vec<bool> = results
                .iter()
                .filter(|(l, _)| *l == label)
                .map(|(_, c)| *c)
                .collect();
            let expect = (!group.is_empty())
                .then(|| group.iter().filter(|c| **c).count() as f64 / group.len() as f64);
            assert_eq!(conditional_coverage(&results, label), expect);
        }
    }
}

#[test]
fn normalizer_is_monotone_and_unclipped() {
    let cfg = ArConfig {
        horizon: 30,
        ..ArConfig::default()
    };
    let train = generate_ar(&cfg, 50).unwrap();
    let norm = Normalizer::fit(&train);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut xs: Vec<f64> = (0..500).map(|_| rng.gen_range(-500.0..500.0)).collect();
    xs.sort_by(f64::total_cmp);
    let mapped: Vec<f64> = xs.iter().map(|&v| norm.map(0, v)).collect();
    assert!(mapped.windows(2).all(|w| w[0] <= w[1]));
    assert!(
        mapped.iter().any(|v| v.abs() > 1.0),
        "far values must map outside the unit box"
    );
    for (&v, &m) in xs.iter().zip(&mapped) {
        assert!((norm.unmap(0, m) - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

fn noise_at(tr: &Trajectory, t: usize) -> f64 {
    tr.value(t, 0)
        - (0.9 * tr.value(t - 1, 0) + 0.1 * tr.value(t - 2, 0) - 0.2 * tr.value(t - 3, 0))
}

#[test]
fn dynamic_hard_noise_has_variance_t_times_k_and_is_gaussian() {
    let cfg = ArConfig {
        horizon: 50,
        delta: 1.0,
        k: 10.0,
        seed: 11,
        ..ArConfig::default()
    };
    let set = generate_ar(&cfg, 100_000).unwrap();
    let eps: Vec<f64> = set.iter().map(|tr| noise_at(tr, 50)).collect();
    let n = eps.len() as f64;
    let mean = eps.iter().sum::<f64>() / n;
    let var = eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
    assert!((var - 500.0).abs() <= 25.0, "variance {var}");

    // Jarque-Bera against the 1% critical value of chi-square(2).
    let m2 = eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let m3 = eps.iter().map(|e| (e - mean).powi(3)).sum::<f64>() / n;
    let m4 = eps.iter().map(|e| (e - mean).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let jb = n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
    assert!(jb < 9.21, "Jarque-Bera {jb}");
}

#[test]
fn static_noise_variance_is_constant() {
    let cfg = ArConfig {
        horizon: 40,
        profile: "static".parse().unwrap(),
        delta: 0.0,
        seed: 12,
        ..ArConfig::default()
    };
    let set = generate_ar(&cfg, 20_000).unwrap();
    for t in [5, 40] {
        let eps: Vec<f64> = set.iter().map(|tr| noise_at(tr, t)).collect();
        let var = eps.iter().map(|e| e * e).sum::<f64>() / eps.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "t={t}: {var}");
    }
}

#[test]
fn split_is_seeded_partition() {
    let set = generate_ar(
        &ArConfig {
            horizon: 5,
            ..ArConfig::default()
        },
        2000,
    )
    .unwrap();
    let a = split_dataset(&set, SplitConfig::default(), 4).unwrap();
    let b = split_dataset(&set, SplitConfig::default(), 4).unwrap();
    assert_eq!(
        (a.train.len(), a.cal1.len(), a.cal2.len()),
        (1500, 250, 250)
    );
    let ids = |s: &cafht::trajectory::TrajectorySet| s.iter().map(|t| t.id()).collect::<Vec<_>>();
    assert_eq!(ids(&a.cal2), ids(&b.cal2));
    let mut all: Vec<usize> = ids(&a.train)
        .into_iter()
        .chain(ids(&a.cal1))
        .chain(ids(&a.cal2))
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..2000).collect::<Vec<_>>());
}

#[test]
fn selected_rate_matches_independent_rerun() {
    let cfg = ExperimentConfig {
        n: 300,
        n_test: 10,
        ar: ArConfig {
            horizon: 40,
            ..ArConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let prep = prepare(&cfg, 0).unwrap();
    let grid = GammaGrid::standard();
    for (score, tracker) in [
        (ScoreKind::Multiplicative, TrackerKind::Aci),
        (ScoreKind::Additive, TrackerKind::Pid),
    ] {
        let base = CafhtConfig::new(0.1, score, tracker);
        let trajs = prep.cal1.trajectories();
        let chosen = select_gamma_split(trajs, &prep.fc_cal1, &grid, &base, &prep.warm).unwrap();
        let mut best: Option<(f64, f64)> = None;
        for &g in grid.values() {
            let one = select_gamma_split(
                trajs,
                &prep.fc_cal1,
                &GammaGrid::single(g).unwrap(),
                &base,
                &prep.warm,
            )
            .unwrap();
            let row = &one.rows[0];
            if row.quantile.is_finite() && best.is_none_or(|(_, w)| row.avg_width < w) {
                best = Some((g, row.avg_width));
            }
        }
        assert_eq!(chosen.gamma, best.unwrap().0);
    }
}

#[test]
fn two_dimensional_coverage_monte_carlo() {
    let cfg = ExperimentConfig {
        seed: 21,
        repetitions: 100,
        n: 400,
        n_test: 50,
        ar: ArConfig {
            horizon: 20,
            d: 2,
            ..ArConfig::default()
        },
        methods: vec![
            MethodSpec::Cafht {
                score: ScoreKind::Additive,
                tracker: TrackerKind::Aci,
                tuning: TuningMode::Split,
            },
            MethodSpec::Cafht {
                score: ScoreKind::Multiplicative,
                tracker: TrackerKind::Pid,
                tuning: TuningMode::Split,
            },
        ],
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.failures(), 0);
    for cell in &report.cells {
        let xs: Vec<f64> = cell.successes().map(|m| m.marginal).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!(mean >= 0.9 - 3.0 * se, "{}: {mean} ± {se}", cell.method);
    }
}

#[test]
fn online_and_offline_prediction_agree() {
    let cfg = ArConfig {
        horizon: 30,
        seed: 5,
        ..ArConfig::default()
    };
    let train = generate_ar_range(&cfg, 0..300, 0.1, Role::Train).unwrap();
    let cal = generate_ar_range(&cfg, 300..400, 0.1, Role::Cal).unwrap();
    let test = generate_ar_range(&cfg, 400..410, 0.5, Role::Test).unwrap();
    let model = fit_model(&train, 3, 1e-6, 0.1, 9).unwrap();
    for (score, tracker, tuning) in [
        (
            ScoreKind::Multiplicative,
            TrackerKind::Aci,
            TuningMode::Split,
        ),
        (ScoreKind::Additive, TrackerKind::Pid, TuningMode::Theory),
    ] {
        let opts = CalibrationOptions {
            config: CafhtConfig::new(0.1, score, tracker),
            tuning,
            grid: GammaGrid::new(vec![0.01, 0.1]).unwrap(),
            cal1_frac: 0.5,
            seed: 1,
            markov_b: 100.0,
        };
        let (calibrated, _) = calibrate_model(&model, &cal, &opts).unwrap();
        for tr in &test {
            assert_eq!(
                predict_online(&calibrated, tr).unwrap(),
                predict_offline(&calibrated, tr).unwrap()
            );
        }
    }
    assert!(predict_online(&model, test.trajectories().first().unwrap()).is_err());
}
