//! `cafht` command-line tool.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cafht::adaptive::TrackerKind;
use cafht::conformal::{CafhtConfig, ScoreKind};
use cafht::experiments::{ExperimentConfig, TuningMode};
use cafht::forecaster::{DEFAULT_AR_ORDER, DEFAULT_RIDGE};
use cafht::io::{self, ModelArtifact};
use cafht::pipeline::{self, CalibrationOptions};
use cafht::report;
use cafht::simdata::{generate_ar, ArConfig, NoiseProfile};
use cafht::trajectory::Role;
use cafht::tuning::{GammaGrid, DEFAULT_MARKOV_B};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cafht",
    version,
    about = "Conformal prediction bands for trajectories"
)]
struct Cli {
    /// Maximum worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Dynamic,
    Static,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Additive,
    Multiplicative,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tracker {
    Aci,
    Pid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tuning {
    Split,
    Theory,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate AR trajectories.
    Generate {
        /// TOML file with generator settings; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "T")]
        horizon: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fit the normalizer and forecaster on training trajectories.
    Fit {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = DEFAULT_AR_ORDER)]
        order: usize,
        #[arg(long, default_value_t = DEFAULT_RIDGE)]
        ridge: f64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Select the rate and calibrate a fitted model.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cal: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "multiplicative")]
        score: Score,
        #[arg(long, value_enum, default_value = "aci")]
        tracker: Tracker,
        #[arg(long, value_enum, default_value = "split")]
        tuning: Tuning,
        /// Comma-separated rates; the standard grid when absent.
        #[arg(long, value_delimiter = ',')]
        gamma_grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.5)]
        cal1_frac: f64,
        #[arg(long, default_value_t = DEFAULT_MARKOV_B)]
        markov_b: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the rate-selection table.
        #[arg(long)]
        tuning_csv: Option<PathBuf>,
    },
    /// Replay the online loop over every trajectory of a file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run a repeated experiment described by a TOML file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; `results/<name>` when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Re-render charts from a report CSV.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

enum Outcome {
    Ok,
    CellFailures(usize),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.cmd) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CellFailures(n)) => {
            eprintln!("warning: {n} repetition(s) failed; report written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn read_text(path: &Path) -> AnyResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn run(cmd: Command) -> AnyResult<Outcome> {
    match cmd {
        Command::Generate {
            config,
            profile,
            n,
            horizon,
            d,
            delta,
            k,
            seed,
            output,
        } => {
            let mut cfg = match &config {
                Some(p) => toml::from_str::<ArConfig>(&read_text(p)?)
                    .map_err(|e| format!("{}: {e}", p.display()))?,
                None => ArConfig::default(),
            };
            if let Some(p) = profile {
                cfg.profile = match p {
                    Profile::Dynamic => NoiseProfile::Dynamic,
                    Profile::Static => NoiseProfile::Static,
                };
            }
            if let Some(v) = horizon {
                cfg.horizon = v;
            }
            if let Some(v) = d {
                cfg.d = v;
            }
            if let Some(v) = delta {
                cfg.delta = v;
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let n = n.unwrap_or(1000);
            let set = generate_ar(&cfg, n)?;
            let text = format!("n = {n}\n{}", toml::to_string(&cfg)?);
            io::save_trajectories(&output, &set, Some(&io::provenance_line(&text, cfg.seed)))?;
        }
        Command::Fit {
            train,
            order,
            ridge,
            alpha,
            seed,
            output,
        } => {
            let set = io::read_trajectories(&train, Role::Train)?;
            pipeline::fit_model(&set, order, ridge, alpha, seed)?.save(&output)?;
        }
        Command::Calibrate {
            model,
            cal,
            alpha,
            score,
            tracker,
            tuning,
            gamma_grid,
            cal1_frac,
            markov_b,
            seed,
            output,
            tuning_csv,
        } => {
            let artifact = ModelArtifact::load(&model)?;
            let set = io::read_trajectories(&cal, Role::Cal)?;
            let score = match score {
                Score::Additive => ScoreKind::Additive,
                Score::Multiplicative => ScoreKind::Multiplicative,
            };
            let tracker = match tracker {
                Tracker::Aci => TrackerKind::Aci,
                Tracker::Pid => TrackerKind::Pid,
            };
            let config = CafhtConfig::new(alpha, score, tracker);
            config.validate()?;
            let opts = CalibrationOptions {
                config,
                tuning: match tuning {
                    Tuning::Split => TuningMode::Split,
                    Tuning::Theory => TuningMode::Theory,
                },
                grid: match gamma_grid {
                    Some(v) => GammaGrid::new(v)?,
                    None => GammaGrid::standard(),
                },
                cal1_frac,
                seed,
                markov_b,
            };
            let (calibrated, outcome) = pipeline::calibrate_model(&artifact, &set, &opts)?;
            if outcome.all_infinite {
                eprintln!("warning: every rate in the grid gave an infinite margin");
            }
            calibrated.save(&output)?;
            if let Some(path) = tuning_csv {
                let mut w = BufWriter::new(fs::File::create(&path)?);
                io::write_tuning(&mut w, &outcome.rows)?;
                w.flush()?;
            }
        }
        Command::Predict {
            model,
            input,
            output,
        } => {
            let text = read_text(&model)?;
            let artifact = ModelArtifact::from_toml(&text)?;
            let set = io::read_trajectories(&input, Role::Test)?;
            let mut w = BufWriter::new(fs::File::create(&output)?);
            writeln!(w, "{}", io::provenance_line(&text, artifact.warm.seed))?;
            io::write_band_header(&mut w)?;
            for tr in &set {
                let band = pipeline::predict_online(&artifact, tr)?;
                io::write_band_rows(&mut w, tr.id(), &band)?;
            }
            w.flush()?;
        }
        Command::Experiment {
            config,
            seed,
            output,
        } => {
            let mut cfg = ExperimentConfig::from_toml(&read_text(&config)?)
                .map_err(|e| format!("{}: {e}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = output.unwrap_or_else(|| Path::new("results").join(&cfg.name));
            let rep = cafht::experiments::run_experiment(&cfg)?;
            report::write_outputs(&rep, &dir)?;
            println!("wrote {}", dir.display());
            let failures = rep.failures();
            if failures > 0 {
                return Ok(Outcome::CellFailures(failures));
            }
        }
        Command::Plot {
            report: path,
            output,
        } => {
            let rows =
                report::parse_report_csv(fs::File::open(&path)?, &path.display().to_string())?;
            fs::create_dir_all(&output)?;
            report::write_svgs(&rows, &output)?;
        }
    }
    Ok(Outcome::Ok)
}
