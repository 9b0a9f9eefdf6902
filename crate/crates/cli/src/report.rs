//! `bldc report`: success curves as SVG and a markdown summary table.
//!
//! Accepts either a training curve file (`run_id,seed,epoch,split,success,loss`)
//! or per-episode evaluation rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bldc_core::evalsuite::{mean_std, EvalRow};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub success: f64,
    pub loss: f64,
}

/// Per-episode extras, only available from evaluation rows.
#[derive(Debug, Default, Clone)]
struct Extras {
    steps: Vec<f64>,
    coverage: Vec<f64>,
    entropy: Vec<f64>,
}

#[derive(Debug, Default)]
struct Data {
    /// (run, split, epoch) -> per-seed success.
    points: BTreeMap<(String, String, usize), Vec<f64>>,
    /// (run, split) at the run's last epoch.
    extras: BTreeMap<(String, String), Extras>,
}

fn load(path: &Path) -> CliResult<Data> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut data = Data::default();
    if headers.iter().any(|h| h == "loss") {
        for row in reader.deserialize::<CurveRow>() {
            let r = row?;
            data.points.entry((r.run_id, r.split, r.epoch)).or_default().push(r.success);
        }
    } else if headers.iter().any(|h| h == "task_seed") {
        let rows: Vec<EvalRow> = reader.deserialize().collect::<Result<_, _>>()?;
        let mut per_seed: BTreeMap<(String, String, usize, u64), (usize, usize)> = BTreeMap::new();
        let mut last: BTreeMap<String, usize> = BTreeMap::new();
        for r in &rows {
            let e = per_seed.entry((r.run_id.clone(), r.split.clone(), r.epoch, r.seed)).or_default();
            e.0 += r.success as usize;
            e.1 += 1;
            let l = last.entry(r.run_id.clone()).or_default();
            *l = (*l).max(r.epoch);
        }
        for ((run, split, epoch, _), (wins, n)) in per_seed {
            data.points.entry((run, split, epoch)).or_default().push(wins as f64 / n as f64);
        }
        for r in rows.iter().filter(|r| last[&r.run_id] == r.epoch) {
            let x = data.extras.entry((r.run_id.clone(), r.split.clone())).or_default();
            x.steps.push(r.steps as f64);
            x.coverage.push(r.coverage);
            x.entropy.push(r.entropy);
        }
    } else if !headers.is_empty() {
        return Err(CliError::User(format!(
            "{}: unrecognized columns (expected a curve or evaluation CSV)",
            path.display()
        )));
    }
    if data.points.is_empty() {
        return Err(CliError::User(format!("no data in {}", path.display())));
    }
    Ok(data)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PANEL_W: f64 = 400.0;
const PANEL_H: f64 = 280.0;
const MARGIN: f64 = 50.0;

fn runs(data: &Data) -> Vec<String> {
    let mut out: Vec<String> = data.points.keys().map(|k| k.0.clone()).collect();
    out.dedup();
    out
}

fn render_svg(data: &Data) -> String {
    let runs = runs(data);
    let (lo, hi) = data
        .points
        .keys()
        .fold((usize::MAX, 0), |(lo, hi), k| (lo.min(k.2), hi.max(k.2)));
    let span = (hi - lo).max(1) as f64;
    let width = 2.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 20.0 * runs.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, split) in ["train", "test"].iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let px = |epoch: usize| x0 + (epoch - lo) as f64 / span * PANEL_W;
        let py = |v: f64| y0 + (1.0 - v.clamp(0.0, 1.0)) * PANEL_H;
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{split} success</text>"#, x0 + PANEL_W / 2.0, y0 - 10.0);
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let y = py(tick);
            let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, x0 + PANEL_W);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#, x0 - 5.0, y + 4.0);
        }
        for e in [lo, hi] {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{e}</text>"#, px(e), y0 + PANEL_H + 15.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, x0 + PANEL_W / 2.0, y0 + PANEL_H + 30.0);
        for (i, run) in runs.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(usize, f64, f64)> = data
                .points
                .iter()
                .filter(|(k, _)| &k.0 == run && k.1 == *split)
                .map(|(k, v)| {
                    let (m, sd) = mean_std(v);
                    (k.2, m, sd)
                })
                .collect();
            if pts.is_empty() {
                continue;
            }
            let upper = pts.iter().map(|(e, m, sd)| format!("{:.1},{:.1}", px(*e), py(m + sd)));
            let lower = pts.iter().rev().map(|(e, m, sd)| format!("{:.1},{:.1}", px(*e), py(m - sd)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, band.join(" "));
            let line: Vec<String> =
                pts.iter().map(|(e, m, _)| format!("{:.1},{:.1}", px(*e), py(*m))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
            for (e, m, _) in &pts {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(*e), py(*m));
            }
        }
    }
    for (i, run) in runs.iter().enumerate() {
        let y = MARGIN + PANEL_H + 50.0 + 20.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{MARGIN}" y="{}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, MARGIN + 18.0, xml_escape(run));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_table(data: &Data) -> String {
    let mut s = String::from("| run | epoch | seeds | train success | test success | gap |\n|---|---|---|---|---|---|\n");
    for run in runs(data) {
        let last = data.points.keys().filter(|k| k.0 == run).map(|k| k.2).max().unwrap_or(0);
        let stat = |split: &str| data.points.get(&(run.clone(), split.to_string(), last)).map(|v| (mean_std(v), v.len()));
        let tr = stat("train");
        let te = stat("test");
        let fmt = |x: Option<((f64, f64), usize)>| x.map_or("–".to_string(), |((m, sd), _)| format!("{m:.3} ± {sd:.3}"));
        let gap = match (tr, te) {
            (Some(((a, _), _)), Some(((b, _), _))) => format!("{:.3}", a - b),
            _ => "–".into(),
        };
        let seeds = tr.or(te).map_or(0, |x| x.1);
        let _ = writeln!(s, "| {run} | {last} | {seeds} | {} | {} | {gap} |", fmt(tr), fmt(te));
    }
    if !data.extras.is_empty() {
        s.push_str("\n| run | split | mean steps | coverage | state entropy |\n|---|---|---|---|---|\n");
        for ((run, split), x) in &data.extras {
            let (st, st_sd) = mean_std(&x.steps);
            let (cv, cv_sd) = mean_std(&x.coverage);
            let (en, en_sd) = mean_std(&x.entropy);
            let _ = writeln!(
                s,
                "| {run} | {split} | {st:.1} ± {st_sd:.1} | {cv:.3} ± {cv_sd:.3} | {en:.3} ± {en_sd:.3} |"
            );
        }
    }
    s
}

/// Writes `curves.svg` and `table.md` into `out` and returns their paths.
pub fn report(input: &Path, out: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let data = load(input)?;
    fs::create_dir_all(out)?;
    let svg = out.join("curves.svg");
    let table = out.join("table.md");
    fs::write(&svg, render_svg(&data))?;
    fs::write(&table, render_table(&data))?;
    Ok((svg, table))
}
