//! Self-contained SVG line and scatter plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};

use crate::record::RunRecord;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    ValAcc,
    Total,
    Ce,
    Cm,
    Base,
}

impl FromStr for Metric {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "val_acc" => Self::ValAcc,
            "total" => Self::Total,
            "ce" => Self::Ce,
            "cm" => Self::Cm,
            "base" => Self::Base,
            other => bail!("unknown metric `{other}`"),
        })
    }
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Self::ValAcc => "validation accuracy",
            Self::Total => "total loss",
            Self::Ce => "cross-entropy",
            Self::Cm => "clustering loss",
            Self::Base => "base loss",
        }
    }

    fn series(self, r: &RunRecord) -> Vec<(f64, f64)> {
        match self {
            Self::ValAcc => r.val_curve.iter().map(|p| (p.step as f64, p.val_acc)).collect(),
            _ => r
                .losses
                .iter()
                .map(|p| {
                    let v = match self {
                        Self::Total => p.total,
                        Self::Ce => p.ce,
                        Self::Cm => p.cm,
                        _ => p.base,
                    };
                    (p.step as f64, v)
                })
                .collect(),
        }
    }
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, s: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, r - l, b - t).unwrap();
        writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 14.0, escape(xlabel)).unwrap();
        writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        )
        .unwrap();
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x0 + f * (self.x1 - self.x0);
            let yv = self.y0 + f * (self.y1 - self.y0);
            writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#, self.px(xv), b + 14.0, tick(xv)).unwrap();
            writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#, l - 4.0, self.py(yv) + 3.0, tick(yv)).unwrap();
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn header() -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// One curve per config hash: the mean over seeds, with a min–max band when
/// the group has more than one run.
pub fn curve_svg(records: &[RunRecord], metric: Metric) -> Result<String> {
    ensure!(!records.is_empty(), "nothing to plot");
    let first = &records[0];
    for r in records {
        ensure!(
            r.schema_version == first.schema_version && r.task == first.task,
            "mixed records: schema {} / task {} vs schema {} / task {}",
            r.schema_version,
            r.task,
            first.schema_version,
            first.task
        );
    }
    let mut groups: BTreeMap<&str, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.config_hash).or_default().push(metric.series(r));
    }
    let mut curves = Vec::new();
    for (hash, runs) in &groups {
        let steps: Vec<f64> = runs[0].iter().map(|p| p.0).collect();
        ensure!(!steps.is_empty(), "config {hash} has no {} points", metric.label());
        for run in runs {
            ensure!(
                run.iter().map(|p| p.0).eq(steps.iter().copied()),
                "config {hash}: runs log {} at different steps",
                metric.label()
            );
        }
        let stats: Vec<(f64, f64, f64, f64)> = (0..steps.len())
            .map(|i| {
                let vals: Vec<f64> = runs.iter().map(|r| r[i].1).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (steps[i], mean, lo, hi)
            })
            .collect();
        curves.push((*hash, runs.len(), stats));
    }
    let all = curves.iter().flat_map(|c| c.2.iter());
    let frame = Frame::new(all.clone().map(|p| p.0), all.flat_map(|p| [p.2, p.3]));
    let mut s = header();
    frame.axes(&mut s, &format!("{} vs iteration", metric.label()), "iteration", metric.label());
    for (ci, (hash, n, stats)) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        if *n > 1 {
            let mut pts: Vec<String> = stats.iter().map(|p| format!("{:.2},{:.2}", frame.px(p.0), frame.py(p.3))).collect();
            pts.extend(stats.iter().rev().map(|p| format!("{:.2},{:.2}", frame.px(p.0), frame.py(p.2))));
            writeln!(s, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" ")).unwrap();
        }
        let line: Vec<String> = stats.iter().map(|p| format!("{:.2},{:.2}", frame.px(p.0), frame.py(p.1))).collect();
        writeln!(s, r#"<polyline class="curve" points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#, line.join(" ")).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{} (n={n})</text>"#,
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * ci as f64,
            escape(hash)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    /// 0 for source (circles), 1 for target (squares).
    pub domain: u8,
}

/// Points colored by class; target-domain points drawn as squares.
pub fn scatter_svg(points: &[ScatterPoint], title: &str) -> Result<String> {
    ensure!(!points.is_empty(), "nothing to plot");
    ensure!(points.iter().all(|p| p.x.is_finite() && p.y.is_finite()), "non-finite coordinates");
    let frame = Frame::new(points.iter().map(|p| p.x), points.iter().map(|p| p.y));
    let mut s = header();
    frame.axes(&mut s, title, "component 1", "component 2");
    for p in points {
        let color = PALETTE[p.class % PALETTE.len()];
        let (x, y) = (frame.px(p.x), frame.py(p.y));
        if p.domain == 0 {
            writeln!(s, r#"<circle class="c{}" cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}"/>"#, p.class).unwrap();
        } else {
            writeln!(
                s,
                r#"<rect class="c{}" x="{:.2}" y="{:.2}" width="5" height="5" fill="{color}"/>"#,
                p.class,
                x - 2.5,
                y - 2.5
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads `x,y,class[,domain]` rows with a header line.
pub fn read_scatter_csv(text: &str) -> Result<Vec<ScatterPoint>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        ensure!(f.len() == 3 || f.len() == 4, "line {}: expected 3 or 4 fields", i + 1);
        let ctx = || format!("line {}", i + 1);
        out.push(ScatterPoint {
            x: f[0].parse().with_context(ctx)?,
            y: f[1].parse().with_context(ctx)?,
            class: f[2].parse().with_context(ctx)?,
            domain: if f.len() == 4 { f[3].parse().with_context(ctx)? } else { 0 },
        });
    }
    Ok(out)
}

pub fn write_svg(path: impl AsRef<Path>, svg: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}
