//! Summaries, CSV tables and SVG charts of experiment results.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::{ExperimentReport, RepMetrics};
use crate::io::provenance_line;

/// Mean and standard error (sample SD over `sqrt(R)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    /// `None` for an empty sample; the SE of a single value is 0.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(Self { mean, se })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Marginal,
    Width,
    CondHard,
    CondEasy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Marginal,
        Metric::Width,
        Metric::CondHard,
        Metric::CondEasy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Marginal => "marginal",
            Self::Width => "width",
            Self::CondHard => "cond_hard",
            Self::CondEasy => "cond_easy",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Self::Marginal => "Simultaneous marginal coverage",
            Self::Width => "Average width",
            Self::CondHard => "Conditional coverage (hard)",
            Self::CondEasy => "Conditional coverage (easy)",
        }
    }

    fn value(self, m: &RepMetrics) -> Option<f64> {
        match self {
            Self::Marginal => Some(m.marginal),
            Self::Width => Some(m.width),
            Self::CondHard => m.cond_hard,
            Self::CondEasy => m.cond_easy,
        }
    }
}

/// One line of the report table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub sweep_variable: String,
    pub sweep_value: Option<f64>,
    pub repetitions: usize,
    pub failures: usize,
    pub marginal: Option<Stat>,
    pub width: Option<Stat>,
    pub cond_hard: Option<Stat>,
    pub cond_easy: Option<Stat>,
}

impl SummaryRow {
    pub fn stat(&self, metric: Metric) -> Option<Stat> {
        match metric {
            Metric::Marginal => self.marginal,
            Metric::Width => self.width,
            Metric::CondHard => self.cond_hard,
            Metric::CondEasy => self.cond_easy,
        }
    }
}

pub fn summarize(report: &ExperimentReport) -> Vec<SummaryRow> {
    let variable = report.sweep_variable.map_or("", |v| v.as_str()).to_string();
    report
        .cells
        .iter()
        .map(|cell| {
            let ok: Vec<&RepMetrics> = cell.successes().collect();
            let stat = |metric: Metric| {
                let xs: Vec<f64> = ok.iter().filter_map(|m| metric.value(m)).collect();
                Stat::of(&xs)
            };
            SummaryRow {
                method: cell.method.clone(),
                sweep_variable: variable.clone(),
                sweep_value: cell.sweep_value,
                repetitions: cell.outcomes.len(),
                failures: cell.failures(),
                marginal: stat(Metric::Marginal),
                width: stat(Metric::Width),
                cond_hard: stat(Metric::CondHard),
                cond_easy: stat(Metric::CondEasy),
            }
        })
        .collect()
}

const REPORT_HEADER: &str = "method,sweep_variable,sweep_value,repetitions,failures,\
marginal,marginal_se,width,width_se,cond_hard,cond_hard_se,cond_easy,cond_easy_se";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn write_report_csv<W: Write>(w: &mut W, rows: &[SummaryRow], provenance: &str) -> Result<()> {
    writeln!(w, "{provenance}")?;
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        let mut line = format!(
            "{},{},{},{},{}",
            r.method,
            r.sweep_variable,
            opt(r.sweep_value),
            r.repetitions,
            r.failures
        );
        for m in Metric::ALL {
            let s = r.stat(m);
            let _ = write!(line, ",{},{}", opt(s.map(|s| s.mean)), opt(s.map(|s| s.se)));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn parse_report_csv<R: Read>(rdr: R, name: &str) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(rdr);
    let err = |line: u64, msg: String| Error::Parse {
        path: name.to_string(),
        line,
        msg,
    };
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
        return Err(err(1, "unexpected report header".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<Option<f64>> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| err(line, format!("invalid number '{s}'")))
            }
        };
        let count = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| err(line, format!("invalid count '{}'", &rec[i])))
        };
        let stat = |i: usize| -> Result<Option<Stat>> {
            Ok(match (num(i)?, num(i + 1)?) {
                (Some(mean), Some(se)) => Some(Stat { mean, se }),
                _ => None,
            })
        };
        rows.push(SummaryRow {
            method: rec[0].to_string(),
            sweep_variable: rec[1].to_string(),
            sweep_value: num(2)?,
            repetitions: count(3)?,
            failures: count(4)?,
            marginal: stat(5)?,
            width: stat(7)?,
            cond_hard: stat(9)?,
            cond_easy: stat(11)?,
        });
    }
    Ok(rows)
}

/// Pixel geometry of a chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartLayout {
    pub y_min: f64,
    pub y_max: f64,
    /// Pixels per unit of the metric.
    pub scale: f64,
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 420.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 190.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn chart_layout(rows: &[SummaryRow], metric: Metric) -> ChartLayout {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in rows.iter().filter_map(|r| r.stat(metric)) {
        lo = lo.min(s.mean - 2.0 * s.se);
        hi = hi.max(s.mean + 2.0 * s.se);
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (y_min, y_max) = (lo - pad, hi + pad);
    ChartLayout {
        y_min,
        y_max,
        scale: (SVG_H - PAD_T - PAD_B) / (y_max - y_min),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Line chart of `metric` against the sweep value, one series per method,
/// error bars of two standard errors.
pub fn render_svg(rows: &[SummaryRow], metric: Metric) -> String {
    let layout = chart_layout(rows, metric);
    let mut xs: Vec<Option<f64>> = Vec::new();
    for r in rows {
        if !xs.contains(&r.sweep_value) {
            xs.push(r.sweep_value);
        }
    }
    xs.sort_by(|a, b| a.unwrap_or(0.0).total_cmp(&b.unwrap_or(0.0)));
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let plot_w = SVG_W - PAD_L - PAD_R;
    let px = |x: &Option<f64>| {
        let i = xs.iter().position(|v| v == x).unwrap_or(0) as f64;
        PAD_L + plot_w * (i + 0.5) / xs.len() as f64
    };
    let py = |v: f64| PAD_T + (layout.y_max - v) * layout.scale;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_W} {SVG_H}" width="{SVG_W}" height="{SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        PAD_L + plot_w / 2.0,
        metric.title()
    );
    let (x0, x1, y0, y1) = (PAD_L, PAD_L + plot_w, PAD_T, SVG_H - PAD_B);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = layout.y_min + (layout.y_max - layout.y_min) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.3}" x2="{x0}" y2="{y:.3}" stroke="black"/><text x="{}" y="{:.3}" text-anchor="end">{v:.3}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let xlabel = rows.first().map_or("", |r| r.sweep_variable.as_str());
    for x in &xs {
        let label = x.map_or("all".to_string(), |v| format!("{v}"));
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{}" text-anchor="middle">{label}</text>"#,
            px(x),
            y1 + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        PAD_L + plot_w / 2.0,
        SVG_H - 10.0,
        escape(xlabel)
    );
    for (k, method) in methods.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, Stat)> = xs
            .iter()
            .filter_map(|x| {
                rows.iter()
                    .find(|r| r.method == *method && r.sweep_value == *x)
                    .and_then(|r| r.stat(metric))
                    .map(|st| (px(x), st))
            })
            .collect();
        let _ = writeln!(s, r#"<g data-series="{}">"#, escape(method));
        if pts.len() > 1 {
            let d: Vec<String> = pts
                .iter()
                .enumerate()
                .map(|(i, (x, st))| {
                    format!(
                        "{}{x:.3} {:.3}",
                        if i == 0 { 'M' } else { 'L' },
                        py(st.mean)
                    )
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                d.join(" ")
            );
        }
        for (x, st) in &pts {
            let _ = writeln!(
                s,
                r#"<line class="errorbar" x1="{x:.3}" y1="{:.6}" x2="{x:.3}" y2="{:.6}" stroke="{color}"/>"#,
                py(st.mean - 2.0 * st.se),
                py(st.mean + 2.0 * st.se)
            );
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.3}" cy="{:.6}" r="3" fill="{color}"/>"#,
                py(st.mean)
            );
        }
        let ly = PAD_T + 10.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            x1 + 15.0,
            ly - 10.0,
            x1 + 32.0,
            ly,
            escape(method)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv`, `report_<metric>.svg`, `tuning.csv` and
/// `bands_sample.csv` into `dir`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let provenance = provenance_line(&report.config_text, report.seed);
    let rows = summarize(report);
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &rows, &provenance)?;
    std::fs::write(dir.join("report.csv"), buf)?;
    write_svgs(&rows, dir)?;

    let mut t = String::new();
    let _ = writeln!(t, "{provenance}");
    let _ = writeln!(t, "method,sweep_value,gamma,avg_width,quantile,selected");
    for rec in &report.tuning {
        for r in &rec.rows {
            let _ = writeln!(
                t,
                "{},{},{},{},{},{}",
                rec.method,
                opt(rec.sweep_value),
                r.gamma,
                r.avg_width,
                r.quantile,
                r.selected
            );
        }
    }
    std::fs::write(dir.join("tuning.csv"), t)?;

    let mut b = String::new();
    let _ = writeln!(b, "{provenance}");
    let _ = writeln!(b, "method,sweep_value,traj_id,label,t,dim,y,lower,upper");
    for rec in &report.bands {
        for (i, step) in rec.band.steps().iter().enumerate() {
            for (j, iv) in step.iter().enumerate() {
                let _ = writeln!(
                    b,
                    "{},{},{},{},{},{j},{},{},{}",
                    rec.method,
                    opt(rec.sweep_value),
                    rec.trajectory.id(),
                    rec.trajectory.label(),
                    i + 1,
                    rec.trajectory.value(i + 1, j),
                    iv.lower,
                    iv.upper
                );
            }
        }
    }
    std::fs::write(dir.join("bands_sample.csv"), b)?;
    Ok(())
}

pub fn write_svgs(rows: &[SummaryRow], dir: &Path) -> Result<()> {
    for m in Metric::ALL {
        std::fs::write(
            dir.join(format!("report_{}.svg", m.as_str())),
            render_svg(rows, m),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, x: f64, mean: f64, se: f64) -> SummaryRow {
        let s = Some(Stat { mean, se });
        SummaryRow {
            method: method.into(),
            sweep_variable: "delta_test".into(),
            sweep_value: Some(x),
            repetitions: 3,
            failures: 0,
            marginal: s,
            width: s,
            cond_hard: None,
            cond_easy: s,
        }
    }

    #[test]
    fn standard_error_hand_example() {
        // mean 0.9, deviations -0.1, 0, 0.1 -> var 0.01, se 0.1 / sqrt(3)
        let s = Stat::of(&[0.8, 0.9, 1.0]).unwrap();
        assert!((s.mean - 0.9).abs() < 1e-15);
        assert!((s.se - 0.1 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.5]).unwrap().se, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("a", 0.2, 0.91, 0.01), row("b", 0.5, 1.0 / 3.0, 0.0)];
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &rows, "# test").unwrap();
        let back = parse_report_csv(&buf[..], "mem").unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn svg_well_formed_with_scaled_error_bars() {
        let rows = vec![
            row("a", 0.2, 0.9, 0.02),
            row("a", 0.5, 0.8, 0.01),
            row("b", 0.2, 0.7, 0.05),
        ];
        let svg = render_svg(&rows, Metric::Marginal);
        assert!(svg.starts_with("<svg ") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<svg").count(), 1);
        assert!(svg.contains("viewBox="));
        let layout = chart_layout(&rows, Metric::Marginal);
        let mut halves = Vec::new();
        for line in svg.lines().filter(|l| l.contains("class=\"errorbar\"")) {
            let attr = |name: &str| -> f64 {
                let start = line.find(&format!(" {name}=\"")).unwrap() + name.len() + 3;
                let end = start + line[start..].find('"').unwrap();
                line[start..end].parse().unwrap()
            };
            halves.push((attr("y1") - attr("y2")) / 2.0);
        }
        let want = [0.02, 0.01, 0.05].map(|se| 2.0 * se * layout.scale);
        assert_eq!(halves.len(), 3);
        for (h, w) in halves.iter().zip(want) {
            assert!((h - w).abs() < 1e-5, "{h} vs {w}");
        }
    }
}
