//! CSV, SVG and manifest output for a [`ReportBundle`].
//!
//! Files written to the output directory:
//!
//! * `config.toml`: the canonical spec (not written for a dry run).
//! * `convergence.csv`: `iter, subopt, mf_mean, mf_min, mf_max, rep_0, ...`.
//!   `subopt` is the model-based run; the `mf_*` columns summarise the
//!   model-free repetitions and are `NA` in model-based mode.
//! * `pg_run.csv`: the full record of the model-based run.
//! * `mesh_sweep.csv`: `m, mesh, c_star_pi, n_scaled, n_unscaled, n_continuous`.
//! * `convergence.svg`, `mesh_sweep.svg`: the two figure panels.
//! * `manifest.toml`: written last, lists the other files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lqpg_core::pg::MeshSweepTable;
use thiserror::Error;

use crate::run::ReportBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    Csv,
    Svg,
    #[default]
    Both,
}

impl Format {
    fn csv(self) -> bool {
        self != Format::Svg
    }
    fn svg(self) -> bool {
        self != Format::Csv
    }
}

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct ReportError {
    pub path: String,
    pub source: std::io::Error,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("NA".to_string(), |v| format!("{v:.17e}"))
}

/// Per-iteration mean, min and max across traces; iterations missing from
/// a shorter trace are ignored.
pub fn band(traces: &[Vec<f64>]) -> Vec<(f64, f64, f64)> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.get(i).copied()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        })
        .collect()
}

pub fn convergence_csv(bundle: &ReportBundle) -> String {
    let main = bundle.convergence.as_ref().map(|r| r.subopts()).unwrap_or_default();
    let reps = &bundle.model_free;
    let stats = band(reps);
    let mut out = String::from("iter,subopt,mf_mean,mf_min,mf_max");
    for r in 0..reps.len() {
        let _ = write!(out, ",rep_{r}");
    }
    out.push('\n');
    for i in 0..main.len().max(stats.len()) {
        let s = stats.get(i);
        let _ = write!(
            out,
            "{i},{},{},{},{}",
            fmt_opt(main.get(i).copied()),
            fmt_opt(s.map(|s| s.0)),
            fmt_opt(s.map(|s| s.1)),
            fmt_opt(s.map(|s| s.2)),
        );
        for t in reps {
            let _ = write!(out, ",{}", fmt_opt(t.get(i).copied()));
        }
        out.push('\n');
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }
    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn svg_open(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{ylabel}</text>"#,
        (TOP + H - BOTTOM) / 2.0
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
}

fn x_tick(out: &mut String, f: &Frame, x: f64, label: &str) {
    let px = f.px(x);
    let _ = writeln!(
        out,
        r#"<line x1="{px:.2}" y1="{0:.2}" x2="{px:.2}" y2="{1:.2}" stroke="black"/><text x="{px:.2}" y="{2:.2}" text-anchor="middle">{label}</text>"#,
        H - BOTTOM,
        H - BOTTOM + 5.0,
        H - BOTTOM + 18.0
    );
}

fn y_tick(out: &mut String, f: &Frame, y: f64, label: &str) {
    let py = f.py(y);
    let _ = writeln!(
        out,
        r##"<line x1="{0:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><line x1="{LEFT}" y1="{py:.2}" x2="{1:.2}" y2="{py:.2}" stroke="#dddddd"/><text x="{2:.2}" y="{3:.2}" text-anchor="end">{label}</text>"##,
        LEFT - 5.0,
        W - RIGHT,
        LEFT - 8.0,
        py + 4.0
    );
}

fn points(f: &Frame, pts: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.2},{:.2}", f.px(*x), f.py(*y));
    }
    s
}

fn polyline(out: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, dash: bool) {
    if pts.is_empty() {
        return;
    }
    let dash = if dash { r#" stroke-dasharray="6,4""# } else { "" };
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
        points(f, pts)
    );
}

fn legend(out: &mut String, entries: &[(&str, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = TOP + 15.0 + 16.0 * i as f64;
        let x = W - RIGHT - 150.0;
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{label}</text>"#,
            x + 20.0,
            x + 26.0,
            y + 4.0
        );
    }
}

/// Convergence panel on a log₁₀ suboptimality axis. Values at or below
/// zero are drawn on the lower edge.
pub fn convergence_svg(bundle: &ReportBundle) -> String {
    let main = bundle.convergence.as_ref().map(|r| r.subopts()).unwrap_or_default();
    let stats = band(&bundle.model_free);
    let mut all = main.clone();
    for s in &stats {
        all.extend([s.0, s.1, s.2]);
    }
    let positive: Vec<f64> = all.into_iter().filter(|v| *v > 0.0 && v.is_finite()).collect();
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if positive.is_empty() {
        (-6.0, 0.0)
    } else {
        let (a, b) = (lo.log10().floor(), hi.log10().ceil());
        (a, if b > a { b } else { a + 1.0 })
    };
    let n = main.len().max(stats.len()).max(2) - 1;
    let f = Frame {
        x0: 0.0,
        x1: n as f64,
        y0,
        y1,
    };
    let ly = |v: f64| if v > 0.0 { v.log10().max(y0) } else { y0 };
    let mut out = String::new();
    svg_open(&mut out, "Convergence", "iteration", "suboptimality (log10)");
    for d in (y0 as i64)..=(y1 as i64) {
        y_tick(&mut out, &f, d as f64, &format!("1e{d}"));
    }
    let step = nice_step(n as f64);
    let mut x = 0.0;
    while x <= n as f64 + 1e-9 {
        x_tick(&mut out, &f, x, &format!("{x}"));
        x += step;
    }
    if !stats.is_empty() {
        let mut poly: Vec<(f64, f64)> = stats.iter().enumerate().map(|(i, s)| (i as f64, ly(s.2))).collect();
        poly.extend(stats.iter().enumerate().rev().map(|(i, s)| (i as f64, ly(s.1))));
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="#f4a582" fill-opacity="0.4" stroke="none"/>"##,
            points(&f, &poly)
        );
        let mean: Vec<(f64, f64)> = stats.iter().enumerate().map(|(i, s)| (i as f64, ly(s.0))).collect();
        polyline(&mut out, &f, &mean, "#ca0020", false);
    }
    let mb: Vec<(f64, f64)> = main.iter().enumerate().map(|(i, v)| (i as f64, ly(*v))).collect();
    polyline(&mut out, &f, &mb, "#0571b0", !stats.is_empty());
    let mut entries = vec![("model-based", "#0571b0")];
    if !stats.is_empty() {
        entries.push(("model-free mean", "#ca0020"));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

fn nice_step(span: f64) -> f64 {
    let raw = (span / 6.0).max(1.0);
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Iteration counts against the number of mesh intervals (log₂ axis).
pub fn mesh_sweep_svg(table: &MeshSweepTable) -> String {
    let xs: Vec<f64> = table.rows.iter().map(|r| (r.intervals as f64).log2()).collect();
    let counts = table
        .rows
        .iter()
        .flat_map(|r| [r.n_scaled, r.n_unscaled])
        .chain([table.n_continuous])
        .flatten();
    let top = counts.max().unwrap_or(1).max(1) as f64 * 1.1;
    let (x0, x1) = match (xs.first(), xs.last()) {
        (Some(a), Some(b)) if b > a => (a - 0.5, b + 0.5),
        (Some(a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let f = Frame { x0, x1, y0: 0.0, y1: top };
    let mut out = String::new();
    svg_open(&mut out, "Iterations to tolerance", "mesh intervals", "iterations");
    for (r, x) in table.rows.iter().zip(&xs) {
        x_tick(&mut out, &f, *x, &r.intervals.to_string());
    }
    let step = nice_step(top);
    let mut y = 0.0;
    while y <= top {
        y_tick(&mut out, &f, y, &format!("{y}"));
        y += step;
    }
    let series = |pick: fn(&lqpg_core::pg::MeshSweepRow) -> Option<usize>| -> Vec<(f64, f64)> {
        table
            .rows
            .iter()
            .zip(&xs)
            .filter_map(|(r, x)| pick(r).map(|n| (*x, n as f64)))
            .collect()
    };
    for (pts, color) in [(series(|r| r.n_scaled), "#0571b0"), (series(|r| r.n_unscaled), "#ca0020")] {
        polyline(&mut out, &f, &pts, color, false);
        for p in &pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                f.px(p.0),
                f.py(p.1)
            );
        }
    }
    let mut entries = vec![("scaled", "#0571b0"), ("unscaled", "#ca0020")];
    if let Some(n) = table.n_continuous {
        polyline(&mut out, &f, &[(x0, n as f64), (x1, n as f64)], "#404040", true);
        entries.push(("continuous", "#404040"));
    }
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

/// Write the bundle into `dir` (created if needed) and return the paths in
/// write order. The manifest comes last.
pub fn emit_report(bundle: &ReportBundle, dir: &Path, format: Format) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError {
        path: dir.display().to_string(),
        source,
    })?;
    let mut files: Vec<(&str, String)> = bundle.config.iter().map(|c| ("config.toml", c.clone())).collect();
    if format.csv() {
        if bundle.convergence.is_some() || !bundle.model_free.is_empty() {
            files.push(("convergence.csv", convergence_csv(bundle)));
        }
        if let Some(rec) = &bundle.convergence {
            files.push(("pg_run.csv", rec.to_csv()));
        }
        if let Some(t) = &bundle.sweep {
            files.push(("mesh_sweep.csv", t.to_csv()));
        }
    }
    if format.svg() {
        if bundle.convergence.is_some() || !bundle.model_free.is_empty() {
            files.push(("convergence.svg", convergence_svg(bundle)));
        }
        if let Some(t) = &bundle.sweep {
            files.push(("mesh_sweep.svg", mesh_sweep_svg(t)));
        }
    }
    let mut manifest = bundle.manifest.clone();
    manifest.files = files.iter().map(|(n, _)| n.to_string()).collect();
    files.push(("manifest.toml", toml::to_string(&manifest).expect("manifest serialises")));
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| ReportError {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
