//! Text tables, CSV twins and SVG plots of run results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::analysis::{AblationCurve, CcaResult};
use crate::error::{Error, Result};
use crate::train::MetricRecord;

/// A run's metrics, labelled by baseline and whether AL2 was on.
#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub baseline: String,
    pub al2: bool,
    pub records: Vec<MetricRecord>,
}

/// A run's ablation AUC per epoch.
#[derive(Clone, Debug)]
pub struct RunAblation {
    pub baseline: String,
    pub al2: bool,
    pub auc: BTreeMap<u64, f64>,
}

/// Rendered table plus the number of cells with no data.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub text: String,
    pub csv: String,
    pub missing: usize,
}

struct Grid {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    missing: usize,
}

impl Grid {
    fn render(self) -> Table {
        let ncol = self.header.len();
        let mut widths = vec![0; ncol];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut text = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            text.push_str(cells.join("  ").trim_end());
            text.push('\n');
        }
        let mut csv = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        Table {
            text,
            csv,
            missing: self.missing,
        }
    }
}

/// Groups runs into (baseline, [without, with]) in first-appearance order.
fn pair<T>(runs: &[T], key: impl Fn(&T) -> (&str, bool)) -> Vec<(String, [Option<&T>; 2])> {
    let mut out: Vec<(String, [Option<&T>; 2])> = Vec::new();
    for r in runs {
        let (name, al2) = key(r);
        let slot = match out.iter_mut().find(|(n, _)| n == name) {
            Some(s) => s,
            None => {
                out.push((name.to_string(), [None, None]));
                out.last_mut().expect("just pushed")
            }
        };
        slot.1[al2 as usize] = Some(r);
    }
    out
}

fn cell(values: [Option<Option<f64>>; 2], decimals: usize, missing: &mut usize) -> String {
    let fmt = |v: Option<f64>, missing: &mut usize| match v {
        Some(x) if x.is_finite() => format!("{x:.decimals$}"),
        _ => {
            *missing += 1;
            "-".to_string()
        }
    };
    match values {
        [Some(a), Some(b)] => format!("{}/{}", fmt(a, missing), fmt(b, missing)),
        [Some(a), None] | [None, Some(a)] => fmt(a, missing),
        [None, None] => unreachable!("pairs hold at least one run"),
    }
}

/// Test accuracy, `L_c` and `L_r` per baseline at the given epochs, as
/// "without/with AL2" cells. `L_r` of AL2 runs is multiplied by 100.
pub fn metrics_table(runs: &[RunMetrics], epochs: &[u64]) -> Table {
    let mut header = vec!["baseline".to_string(), "metric".to_string()];
    header.extend(epochs.iter().map(|e| e.to_string()));
    let mut rows = Vec::new();
    let mut missing = 0;
    for (name, pair) in pair(runs, |r| (r.baseline.as_str(), r.al2)) {
        for (mi, metric) in ["TA", "L_c", "L_r"].into_iter().enumerate() {
            let mut row = vec![if mi == 0 { name.clone() } else { String::new() }, metric.to_string()];
            for &epoch in epochs {
                let values = pair.map(|run| {
                    run.map(|r| {
                        r.records.iter().find(|m| m.epoch == epoch).map(|m| match mi {
                            0 => m.test_accuracy,
                            1 => m.loss_c,
                            _ if r.al2 => m.loss_r * 100.0,
                            _ => m.loss_r,
                        })
                    })
                });
                row.push(cell(values, 2, &mut missing));
            }
            rows.push(row);
        }
    }
    Grid { header, rows, missing }.render()
}

/// Ablation AUC per baseline per epoch, "without/with AL2".
pub fn auc_table(runs: &[RunAblation], epochs: &[u64]) -> Table {
    let mut header = vec!["baseline".to_string(), "metric".to_string()];
    header.extend(epochs.iter().map(|e| e.to_string()));
    let mut rows = Vec::new();
    let mut missing = 0;
    for (name, pair) in pair(runs, |r| (r.baseline.as_str(), r.al2)) {
        let mut row = vec![name, "AUC".to_string()];
        for &epoch in epochs {
            let values = pair.map(|run| run.map(|r| r.auc.get(&epoch).copied()));
            row.push(cell(values, 2, &mut missing));
        }
        rows.push(row);
    }
    Grid { header, rows, missing }.render()
}

/// `epoch,auc,acc_0.0,…,acc_1.0`.
pub fn ablation_csv(curves: &[(u64, AblationCurve)]) -> String {
    let mut out = String::from("epoch,auc");
    if let Some((_, c)) = curves.first() {
        for r in &c.rates {
            let _ = write!(out, ",acc_{r:.1}");
        }
    }
    out.push('\n');
    for (epoch, c) in curves {
        let _ = write!(out, "{epoch},{}", c.auc);
        for a in &c.accuracy {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_ablation_csv(text: &str) -> Result<BTreeMap<u64, f64>> {
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let mut f = line.split(',');
        let bad = || Error::InvalidArgument(format!("bad ablation row '{line}'"));
        let epoch = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let auc = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.insert(epoch, auc);
    }
    Ok(out)
}

/// One ρ-sequence of a CCA trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct CcaRow {
    pub run: String,
    pub dataset: String,
    pub epoch: u64,
    pub rho: Vec<f64>,
}

/// `run,dataset,epoch,mean_rho,rho_1,…,rho_k`.
pub fn cca_csv(rows: &[CcaRow]) -> String {
    let k = rows.first().map_or(0, |r| r.rho.len());
    let mut out = String::from("run,dataset,epoch,mean_rho");
    for i in 1..=k {
        let _ = write!(out, ",rho_{i}");
    }
    out.push('\n');
    for r in rows {
        let mean = CcaResult { rho: r.rho.clone() }.mean();
        let _ = write!(out, "{},{},{},{mean}", r.run, r.dataset, r.epoch);
        for v in &r.rho {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_cca_csv(text: &str) -> Result<Vec<CcaRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidArgument(format!("bad CCA row '{line}'"));
            if f.len() < 5 {
                return Err(bad());
            }
            Ok(CcaRow {
                run: f[0].to_string(),
                dataset: f[1].to_string(),
                epoch: f[2].parse().map_err(|_| bad())?,
                rho: f[4..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?,
            })
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Fill opacity ramp: earliest curve faint, latest opaque.
pub fn opacity_ramp(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![1.0],
        n => (0..n).map(|i| 0.2 + 0.8 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// ρ against neuron dimension, one polyline per epoch (increasing
/// intensity), one panel per (dataset, run) in order of appearance.
pub fn cca_svg(rows: &[CcaRow]) -> Result<String> {
    let Some(first) = rows.first() else {
        return Err(Error::InvalidArgument("no CCA rows to plot".into()));
    };
    let k = first.rho.len();
    if let Some(r) = rows.iter().find(|r| r.rho.len() != k) {
        return Err(Error::InvalidArgument(format!(
            "mismatched coefficient counts: {} has {} values, expected {k}",
            r.run,
            r.rho.len()
        )));
    }
    let mut panels: Vec<((&str, &str), Vec<&CcaRow>)> = Vec::new();
    for r in rows {
        let key = (r.dataset.as_str(), r.run.as_str());
        match panels.iter_mut().find(|(p, _)| *p == key) {
            Some((_, v)) => v.push(r),
            None => panels.push((key, vec![r])),
        }
    }

    let (pw, ph) = (360.0, 280.0);
    let (ml, mr, mt, mb) = (48.0, 16.0, 28.0, 40.0);
    let width = pw * panels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{ph}" viewBox="0 0 {width} {ph}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{ph}" fill="white"/>"#);
    for (pi, ((dataset, run), curves)) in panels.iter().enumerate() {
        let ox = pi as f64 * pw;
        let (x0, x1, y0, y1) = (ox + ml, ox + pw - mr, ph - mb, mt);
        let px = |d: usize| {
            if k > 1 {
                x0 + (x1 - x0) * (d - 1) as f64 / (k - 1) as f64
            } else {
                (x0 + x1) / 2.0
            }
        };
        let py = |v: f64| y0 + (y1 - y0) * v.clamp(0.0, 1.0);
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="18" font-size="12" text-anchor="middle" font-family="sans-serif">{} {}</text>"#,
            (x0 + x1) / 2.0,
            escape(dataset),
            escape(run)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black" stroke-width="1"/>"#
        );
        for t in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end" font-family="sans-serif">{t:.1}</text>"#,
                x0 - 4.0,
                py(t) + 3.0
            );
        }
        for d in [1, k.div_ceil(2), k] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle" font-family="sans-serif">{d}</text>"#,
                px(d),
                y0 + 14.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" font-family="sans-serif">neuron dimension</text>"#,
            (x0 + x1) / 2.0,
            ph - 8.0
        );
        let mut ordered = curves.clone();
        ordered.sort_by_key(|r| r.epoch);
        for (r, alpha) in ordered.iter().zip(opacity_ramp(ordered.len())) {
            let points: Vec<String> = r
                .rho
                .iter()
                .enumerate()
                .map(|(i, &v)| format!("{:.2},{:.2}", px(i + 1), py(v)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline data-epoch="{}" points="{}" fill="none" stroke="rgb(31,119,180)" stroke-opacity="{alpha:.3}" stroke-width="1.5"/>"#,
                r.epoch,
                points.join(" ")
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
