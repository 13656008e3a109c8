//! Learning curves from metrics files: reward against environment steps and
//! against planning wall-clock, one line per config with a standard-error band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use transzero_core::training::METRICS_HEADER;

use crate::config::{RunConfig, SNAPSHOT_NAME};
use crate::{mean_stderr, CliError};

/// One metrics row, reduced to what the plot needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub episodes: usize,
    pub env_steps: f64,
    pub mean_reward: f64,
    pub plan_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub env_steps: f64,
    /// Cumulative planning time in seconds, when every run recorded it.
    pub wall_s: Option<f64>,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub label: String,
    pub files: Vec<PathBuf>,
    pub curve: Vec<CurvePoint>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let bad = |line: u64, msg: String| CliError::Usage(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| bad(1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != METRICS_HEADER {
        return Err(bad(1, format!("expected header `{METRICS_HEADER}`")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            bad(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64, CliError> {
            record[i]
                .parse::<f64>()
                .map_err(|_| bad(line, format!("{name} `{}` is not a number", &record[i])))
        };
        let episodes = record[1]
            .parse::<usize>()
            .map_err(|_| bad(line, format!("episodes `{}` is not an integer", &record[1])))?;
        let plan_ms = if record[8].is_empty() {
            None
        } else {
            Some(field(8, "plan_ms")?)
        };
        rows.push(MetricsRow {
            episodes,
            env_steps: field(2, "env_steps")?,
            mean_reward: field(3, "mean_reward")?,
            plan_ms,
        });
    }
    if rows.is_empty() {
        return Err(bad(1, "no data rows".into()));
    }
    Ok(rows)
}

/// Groups files by the experiment hash of the `config.toml` beside them;
/// files without one form their own group.
pub fn load_groups(paths: &[PathBuf]) -> Result<Vec<Group>, CliError> {
    let mut groups: BTreeMap<String, Vec<(PathBuf, Vec<MetricsRow>)>> = BTreeMap::new();
    for p in paths {
        let rows = read_metrics(p)?;
        let snapshot = p.parent().map(|d| d.join(SNAPSHOT_NAME));
        let key = match snapshot.filter(|s| s.exists()) {
            Some(s) => {
                let text = fs::read_to_string(&s)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", s.display())))?;
                let cfg: RunConfig = toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", s.display())))?;
                format!("config {}", cfg.experiment_hash())
            }
            None => p.display().to_string(),
        };
        groups.entry(key).or_default().push((p.clone(), rows));
    }
    Ok(groups
        .into_iter()
        .map(|(label, runs)| {
            let curve = aggregate(&runs.iter().map(|(_, r)| r.as_slice()).collect::<Vec<_>>());
            Group {
                label,
                files: runs.into_iter().map(|(p, _)| p).collect(),
                curve,
            }
        })
        .collect())
}

/// Row-by-row mean and standard error across runs, truncated to the
/// shortest run.
pub fn aggregate(runs: &[&[MetricsRow]]) -> Vec<CurvePoint> {
    let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut wall: Vec<f64> = vec![0.0; runs.len()];
    let has_wall = runs
        .iter()
        .all(|r| r[..len].iter().all(|m| m.plan_ms.is_some()));
    (0..len)
        .map(|i| {
            let rewards: Vec<f64> = runs.iter().map(|r| r[i].mean_reward).collect();
            let (mean, stderr) = mean_stderr(&rewards);
            let steps = runs.iter().map(|r| r[i].env_steps).sum::<f64>() / runs.len() as f64;
            let wall_s = has_wall.then(|| {
                for (w, r) in wall.iter_mut().zip(runs) {
                    *w += r[i].plan_ms.unwrap_or(0.0) / 1e3;
                }
                wall.iter().sum::<f64>() / runs.len() as f64
            });
            CurvePoint {
                env_steps: steps,
                wall_s,
                mean,
                stderr,
            }
        })
        .collect()
}

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 50.0;

struct Panel {
    x0: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.x0 + MARGIN + x / self.xmax.max(1e-12) * (PANEL_W - 1.5 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.ymax - self.ymin).max(1e-12);
        MARGIN + (1.0 - (y - self.ymin) / span) * (PANEL_H - 2.0 * MARGIN)
    }
}

fn draw_panel(
    svg: &mut String,
    groups: &[Group],
    x0: f64,
    title: &str,
    x_label: &str,
    x_of: impl Fn(&CurvePoint) -> Option<f64>,
) {
    let points: Vec<(f64, &CurvePoint)> = groups
        .iter()
        .flat_map(|g| g.curve.iter())
        .filter_map(|p| x_of(p).map(|x| (x, p)))
        .collect();
    let _ = write!(
        svg,
        r#"<text x="{:.1}" y="25" font-size="14" text-anchor="middle">{title}</text>"#,
        x0 + PANEL_W / 2.0
    );
    if points.is_empty() {
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">no data (enable training.record_wall_clock)</text>"#,
            x0 + PANEL_W / 2.0,
            PANEL_H / 2.0
        );
        return;
    }
    let xmax = points.iter().map(|(x, _)| *x).fold(0.0, f64::max);
    let ymin = points
        .iter()
        .map(|(_, p)| p.mean - p.stderr)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let ymax = points
        .iter()
        .map(|(_, p)| p.mean + p.stderr)
        .fold(f64::NEG_INFINITY, f64::max);
    let panel = Panel {
        x0,
        xmax,
        ymin,
        ymax,
    };
    let (left, right) = (panel.px(0.0), panel.px(xmax));
    let (top, bottom) = (panel.py(ymax), panel.py(ymin));
    let _ = write!(
        svg,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        right - left,
        bottom - top
    );
    let _ = write!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{x_label}</text>"#,
        (left + right) / 2.0,
        bottom + 30.0
    );
    for (v, y) in [(ymin, bottom), (ymax, top)] {
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.2}</text>"#,
            left - 4.0,
            y + 4.0
        );
    }
    let _ = write!(
        svg,
        r#"<text x="{right:.1}" y="{:.1}" font-size="10" text-anchor="end">{xmax:.0}</text>"#,
        bottom + 14.0
    );
    for (gi, g) in groups.iter().enumerate() {
        let color = COLORS[gi % COLORS.len()];
        let pts: Vec<(f64, &CurvePoint)> = g
            .curve
            .iter()
            .filter_map(|p| x_of(p).map(|x| (x, p)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        if g.files.len() > 1 {
            let upper = pts.iter().map(|(x, p)| (*x, p.mean + p.stderr));
            let lower = pts.iter().rev().map(|(x, p)| (*x, p.mean - p.stderr));
            let poly: Vec<String> = upper
                .chain(lower)
                .map(|(x, y)| format!("{:.2},{:.2}", panel.px(x), panel.py(y)))
                .collect();
            let _ = write!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                poly.join(" ")
            );
        }
        let line: Vec<String> = pts
            .iter()
            .map(|(x, p)| format!("{:.2},{:.2}", panel.px(*x), panel.py(p.mean)))
            .collect();
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
    }
}

pub fn render_svg(groups: &[Group]) -> String {
    let width = 2.0 * PANEL_W;
    let legend_h = 18.0 * groups.len() as f64;
    let height = PANEL_H + legend_h + 10.0;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif">"#
    );
    draw_panel(
        &mut svg,
        groups,
        0.0,
        "Reward vs environment steps",
        "environment steps",
        |p| Some(p.env_steps),
    );
    draw_panel(
        &mut svg,
        groups,
        PANEL_W,
        "Reward vs planning time",
        "planning time (s)",
        |p| p.wall_s,
    );
    for (gi, g) in groups.iter().enumerate() {
        let y = PANEL_H + 14.0 + 18.0 * gi as f64;
        let _ = write!(
            svg,
            r#"<rect x="{MARGIN}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="12">{} ({} run{})</text>"#,
            y - 10.0,
            COLORS[gi % COLORS.len()],
            MARGIN + 18.0,
            y,
            escape(&g.label),
            g.files.len(),
            if g.files.len() == 1 { "" } else { "s" }
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn cmd_plot(metrics: &[PathBuf], output: &Path) -> Result<(), CliError> {
    let groups = load_groups(metrics)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))?;
    }
    fs::write(output, render_svg(&groups))
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("writing {}: {e}", output.display())))
}
