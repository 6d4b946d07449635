//! CSV formats and the calibration artifact.
//!
//! Trajectories: `traj_id,t,dim_0,...,dim_{d-1}[,label]`, one row per step
//! with `t = 0..=T`. Bands: `traj_id,t,dim,lower,upper`. Multi-step bands:
//! `traj_id,t,tau,dim,lower,upper` where `t` is the emission time. Lines
//! starting with `#` are comments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::{TraceRow, WarmStart};
use crate::conformal::CalibratedPredictor;
use crate::error::{Error, Result};
use crate::forecaster::{ArForecaster, Forecasts, Normalizer};
use crate::multistep::MultiStepBand;
use crate::trajectory::{Label, PredictionBand, Role, Trajectory, TrajectorySet};
use crate::tuning::TuningRow;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ARTIFACT_FORMAT: u32 = 1;

/// 64-bit FNV-1a, used to fingerprint configs in output headers.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Provenance comment line heading every CSV output.
pub fn provenance_line(config_text: &str, seed: u64) -> String {
    format!(
        "# cafht {VERSION} config={:016x} seed={seed}",
        fingerprint(config_text.as_bytes())
    )
}

fn parse_error(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(rdr)
}

fn parse_f64(s: &str, path: &str, line: u64, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| parse_error(path, line, format!("invalid {what} '{s}'")))
}

fn parse_usize(s: &str, path: &str, line: u64, what: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| parse_error(path, line, format!("invalid {what} '{s}'")))
}

fn parse_label(s: &str, path: &str, line: u64) -> Result<Label> {
    match s {
        "hard" => Ok(Label::Hard),
        "easy" => Ok(Label::Easy),
        "" | "unlabeled" => Ok(Label::Unlabeled),
        _ => Err(parse_error(path, line, format!("unknown label '{s}'"))),
    }
}

/// Parses the trajectory CSV format. `name` appears in diagnostics.
pub fn parse_trajectories<R: Read>(rdr: R, name: &str, role: Role) -> Result<TrajectorySet> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(name, 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "traj_id" || cols[1] != "t" {
        return Err(parse_error(
            name,
            1,
            "header must start with traj_id,t,dim_0",
        ));
    }
    let has_label = cols.last() == Some(&"label");
    let dim = cols.len() - 2 - has_label as usize;
    for (j, c) in cols[2..2 + dim].iter().enumerate() {
        if *c != format!("dim_{j}") {
            return Err(parse_error(
                name,
                1,
                format!("expected column dim_{j}, found '{c}'"),
            ));
        }
    }
    // id -> (label, rows, first line)
    let mut by_id: BTreeMap<usize, (Label, Vec<Vec<f64>>, u64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(name, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(parse_error(
                name,
                line,
                format!("expected {} fields, found {}", cols.len(), rec.len()),
            ));
        }
        let id = parse_usize(&rec[0], name, line, "traj_id")?;
        let t = parse_usize(&rec[1], name, line, "step")?;
        let values = (0..dim)
            .map(|j| {
                let v = parse_f64(&rec[2 + j], name, line, "value")?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_error(
                        name,
                        line,
                        format!("non-finite value '{}'", &rec[2 + j]),
                    ))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let label = if has_label {
            parse_label(&rec[2 + dim], name, line)?
        } else {
            Label::Unlabeled
        };
        let entry = by_id.entry(id).or_insert((label, Vec::new(), line));
        if entry.1.len() != t {
            return Err(parse_error(
                name,
                line,
                format!(
                    "trajectory {id}: expected step {}, found {t}",
                    entry.1.len()
                ),
            ));
        }
        if entry.0 != label {
            return Err(parse_error(
                name,
                line,
                format!("trajectory {id}: label changes mid-trajectory"),
            ));
        }
        entry.1.push(values);
    }
    if by_id.is_empty() {
        return Err(parse_error(name, 1, "no trajectories"));
    }
    let mut horizon = None;
    let mut trajs = Vec::with_capacity(by_id.len());
    for (id, (label, rows, line)) in by_id {
        let h = rows.len().saturating_sub(1);
        if *horizon.get_or_insert(h) != h {
            return Err(parse_error(
                name,
                line,
                format!(
                    "trajectory {id} has T = {h}, others have T = {}",
                    horizon.unwrap()
                ),
            ));
        }
        trajs.push(
            Trajectory::new(id, rows, label).map_err(|e| parse_error(name, line, e.to_string()))?,
        );
    }
    TrajectorySet::new(trajs, role)
}

pub fn read_trajectories(path: &Path, role: Role) -> Result<TrajectorySet> {
    parse_trajectories(File::open(path)?, &path.display().to_string(), role)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_trajectories<W: Write>(
    w: &mut W,
    set: &TrajectorySet,
    header: Option<&str>,
) -> Result<()> {
    if let Some(h) = header {
        writeln!(w, "{h}")?;
    }
    let labeled = set.iter().any(|t| t.label() != Label::Unlabeled);
    let mut cols = vec!["traj_id".to_string(), "t".to_string()];
    cols.extend((0..set.dim()).map(|j| format!("dim_{j}")));
    if labeled {
        cols.push("label".into());
    }
    writeln!(w, "{}", cols.join(","))?;
    for tr in set {
        for (t, row) in tr.values().iter().enumerate() {
            let mut line = format!("{},{}", tr.id(), t);
            for v in row {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
            if labeled {
                line.push(',');
                line.push_str(tr.label().as_str());
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn save_trajectories(path: &Path, set: &TrajectorySet, header: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectories(&mut w, set, header)?;
    w.flush()?;
    Ok(())
}

/// Reads external forecasts `traj_id,t,tau,dim_0,...` and aligns them with
/// `set`. Every trajectory needs rows for `t = 0..T-1` and
/// `tau = 1..=min(lags, T - t)`.
pub fn parse_forecasts<R: Read>(
    rdr: R,
    name: &str,
    set: &TrajectorySet,
    lags: usize,
) -> Result<Vec<Forecasts>> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(name, 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[..3] != ["traj_id", "t", "tau"] {
        return Err(parse_error(
            name,
            1,
            "header must start with traj_id,t,tau,dim_0",
        ));
    }
    let dim = cols.len() - 3;
    if dim != set.dim() {
        return Err(parse_error(
            name,
            1,
            format!(
                "forecasts have {dim} dimensions, trajectories {}",
                set.dim()
            ),
        ));
    }
    let horizon = set.horizon();
    let mut tables: BTreeMap<usize, Vec<Vec<Option<Vec<f64>>>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec
            .map_err(|e| parse_error(name, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(parse_error(
                name,
                line,
                format!("expected {} fields, found {}", cols.len(), rec.len()),
            ));
        }
        let id = parse_usize(&rec[0], name, line, "traj_id")?;
        let t = parse_usize(&rec[1], name, line, "t")?;
        let tau = parse_usize(&rec[2], name, line, "tau")?;
        if t >= horizon || tau == 0 || tau > lags.min(horizon - t) {
            continue;
        }
        let values = (0..dim)
            .map(|j| parse_f64(&rec[3 + j], name, line, "forecast"))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_error(name, line, "non-finite forecast"));
        }
        let table = tables.entry(id).or_insert_with(|| {
            (0..horizon)
                .map(|s| vec![None; lags.min(horizon - s)])
                .collect()
        });
        table[t][tau - 1] = Some(values);
    }
    set.iter()
        .map(|tr| {
            let table = tables.remove(&tr.id()).ok_or_else(|| {
                parse_error(name, 0, format!("no forecasts for trajectory {}", tr.id()))
            })?;
            let rows = table
                .into_iter()
                .enumerate()
                .map(|(s, row)| {
                    row.into_iter()
                        .enumerate()
                        .map(|(k, v)| {
                            v.ok_or_else(|| {
                                parse_error(
                                    name,
                                    0,
                                    format!(
                                        "trajectory {}: missing forecast t={s} tau={}",
                                        tr.id(),
                                        k + 1
                                    ),
                                )
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Forecasts::new(rows, lags)
        })
        .collect()
}

pub fn read_forecasts(path: &Path, set: &TrajectorySet, lags: usize) -> Result<Vec<Forecasts>> {
    parse_forecasts(File::open(path)?, &path.display().to_string(), set, lags)
}

pub fn write_band_header<W: Write>(w: &mut W) -> Result<()> {
    writeln!(w, "traj_id,t,dim,lower,upper")?;
    Ok(())
}

pub fn write_band_rows<W: Write>(w: &mut W, traj_id: usize, band: &PredictionBand) -> Result<()> {
    for (i, step) in band.steps().iter().enumerate() {
        for (j, iv) in step.iter().enumerate() {
            writeln!(
                w,
                "{traj_id},{},{j},{},{}",
                i + 1,
                fmt_f64(iv.lower),
                fmt_f64(iv.upper)
            )?;
        }
    }
    Ok(())
}

pub fn write_multistep_band_header<W: Write>(w: &mut W) -> Result<()> {
    writeln!(w, "traj_id,t,tau,dim,lower,upper")?;
    Ok(())
}

pub fn write_multistep_band_rows<W: Write>(
    w: &mut W,
    traj_id: usize,
    band: &MultiStepBand,
) -> Result<()> {
    for (s, tau, ivs) in band.entries() {
        for (j, iv) in ivs.iter().enumerate() {
            writeln!(
                w,
                "{traj_id},{s},{tau},{j},{},{}",
                fmt_f64(iv.lower),
                fmt_f64(iv.upper)
            )?;
        }
    }
    Ok(())
}

/// Tracker trace `t,alpha_t_or_q_t,radius,err` (err empty while unrevealed).
pub fn write_trace<W: Write>(w: &mut W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "t,alpha_t_or_q_t,radius,err")?;
    for row in trace {
        let err = row.err.map_or(String::new(), |e| (e as u8).to_string());
        writeln!(
            w,
            "{},{},{},{err}",
            row.t,
            fmt_f64(row.state),
            fmt_f64(row.radius)
        )?;
    }
    Ok(())
}

pub fn write_tuning<W: Write>(w: &mut W, rows: &[TuningRow]) -> Result<()> {
    writeln!(w, "gamma,avg_width,quantile,selected")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            fmt_f64(r.gamma),
            fmt_f64(r.avg_width),
            fmt_f64(r.quantile),
            r.selected
        )?;
    }
    Ok(())
}

/// Everything needed to replay the online loop on new trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub format: u32,
    pub tool_version: String,
    pub normalizer: Normalizer,
    pub forecaster: ArForecaster,
    /// Warm start derived from the training residuals.
    pub warm: WarmStart,
    /// Absent until calibrated.
    pub predictor: Option<CalibratedPredictor>,
}

impl ModelArtifact {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize artifact: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let a: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid artifact: {e}")))?;
        if a.format != ARTIFACT_FORMAT {
            return Err(Error::Config(format!(
                "artifact format {} is not supported (expected {ARTIFACT_FORMAT})",
                a.format
            )));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
