//! Plot data from per-cell CSVs.
//!
//! Produces two gnuplot-friendly files, one data block per series (blocks
//! separated by two blank lines, usable with `index`):
//!
//! * `acc_vs_round.dat`: `round mean std` per (strategy, κ, α), averaged over seeds.
//! * `acc_vs_sparsity.dat`: `sparsity mean std` per (strategy, α), using the
//!   final accuracy of each cell.
//!
//! A minimal SVG line chart of each is written next to them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{write_atomic, FINAL_WINDOW};
use crate::metrics::{final_accuracy, CsvRow};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(x, mean, std)`, sorted by x.
    pub points: Vec<(f64, f64, f64)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// All `*.csv` files directly under `dir`, or `dir/cells` if that exists.
pub fn find_csvs(dir: &Path) -> Result<Vec<PathBuf>> {
    let cells = dir.join("cells");
    let root = if cells.is_dir() {
        cells
    } else {
        dir.to_path_buf()
    };
    let mut out: Vec<PathBuf> = fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}

type RunKey = (String, String, String, u64);
/// Final accuracies per κ label, with the sparsity they were measured at.
type SparsityCells = BTreeMap<String, (f64, Vec<f64>)>;

fn group_runs(rows: Vec<CsvRow>) -> BTreeMap<RunKey, Vec<CsvRow>> {
    let mut runs: BTreeMap<RunKey, Vec<CsvRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.strategy.clone(),
            format!("{}", r.kappa),
            r.alpha.clone(),
            r.seed,
        );
        runs.entry(key).or_default().push(r);
    }
    for v in runs.values_mut() {
        v.sort_by_key(|r| r.round);
    }
    runs
}

pub fn accuracy_vs_round(rows: Vec<CsvRow>) -> Vec<Series> {
    let mut by_series: BTreeMap<(String, String, String), BTreeMap<usize, Vec<f64>>> =
        BTreeMap::new();
    for ((s, k, a, _), run) in group_runs(rows) {
        let e = by_series.entry((s, k, a)).or_default();
        for r in run {
            e.entry(r.round).or_default().push(r.accuracy);
        }
    }
    by_series
        .into_iter()
        .map(|((s, k, a), rounds)| Series {
            label: format!("{s} kappa={k} alpha={a}"),
            points: rounds
                .into_iter()
                .map(|(round, v)| {
                    let (m, sd) = mean_std(&v);
                    (round as f64, m, sd)
                })
                .collect(),
        })
        .collect()
}

pub fn accuracy_vs_sparsity(rows: Vec<CsvRow>) -> Vec<Series> {
    let mut by_series: BTreeMap<(String, String), SparsityCells> = BTreeMap::new();
    for ((s, k, a, _), run) in group_runs(rows) {
        let acc: Vec<f64> = run.iter().map(|r| r.accuracy).collect();
        let Some(fin) = final_accuracy(&acc, FINAL_WINDOW) else {
            continue;
        };
        let sparsity = run.last().map(|r| r.sparsity).unwrap_or(0.0);
        let e = by_series
            .entry((s, a))
            .or_default()
            .entry(k)
            .or_insert((sparsity, Vec::new()));
        e.1.push(fin);
    }
    by_series
        .into_iter()
        .map(|((s, a), cells)| {
            let mut points: Vec<(f64, f64, f64)> = cells
                .into_values()
                .map(|(x, v)| {
                    let (m, sd) = mean_std(&v);
                    (x, m, sd)
                })
                .collect();
            points.sort_by(|p, q| p.0.total_cmp(&q.0));
            Series {
                label: format!("{s} alpha={a}"),
                points,
            }
        })
        .collect()
}

pub fn to_dat(series: &[Series], x_name: &str) -> String {
    let mut out = String::new();
    for (i, s) in series.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# {}", s.label);
        let _ = writeln!(out, "# {x_name} mean std");
        for (x, m, sd) in &s.points {
            let _ = writeln!(out, "{x} {m:.6} {sd:.6}");
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn to_svg(series: &[Series], x_name: &str, y_name: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="100%" height="100%" fill="white"/><path d="M{pad} {pad}V{b}H{r}" fill="none" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_name}</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        out,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{y_name}</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (x, label) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            sx(x),
            h - pad + 14.0
        );
    }
    for y in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{y}</text>"#,
            pad - 4.0,
            sy(y) + 4.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            pad + 8.0,
            pad + 14.0 * (i as f64 + 1.0),
            s.label
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Reads every CSV under `input` and writes plot files into `out`.
pub fn write_curves(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let files = if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        find_csvs(input)?
    };
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no CSV files under {}",
            input.display()
        )));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_rows(f)?);
    }
    fs::create_dir_all(out)?;
    let by_round = accuracy_vs_round(rows.clone());
    let by_sparsity = accuracy_vs_sparsity(rows);
    let outputs = [
        ("acc_vs_round.dat", to_dat(&by_round, "round")),
        (
            "acc_vs_round.svg",
            to_svg(&by_round, "round", "test accuracy"),
        ),
        ("acc_vs_sparsity.dat", to_dat(&by_sparsity, "sparsity")),
        (
            "acc_vs_sparsity.svg",
            to_svg(&by_sparsity, "sparsity", "final accuracy"),
        ),
    ];
    let mut written = Vec::new();
    for (name, body) in outputs {
        let p = out.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, kappa: f64, seed: u64, round: usize, acc: f64) -> CsvRow {
        CsvRow {
            round,
            strategy: strategy.into(),
            kappa,
            alpha: "0.5".into(),
            seed,
            accuracy: acc,
            loss: 0.0,
            bytes_up: 0,
            bytes_down: 0,
            sparsity: 1.0 - kappa,
            flops: 0,
            wallclock_ms: 0,
        }
    }

    #[test]
    fn seeds_are_averaged_per_round() {
        let rows = vec![
            row("a", 1.0, 0, 0, 0.2),
            row("a", 1.0, 1, 0, 0.4),
            row("a", 1.0, 0, 1, 0.6),
            row("a", 1.0, 1, 1, 0.6),
        ];
        let s = accuracy_vs_round(rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].points[0].1 - 0.3).abs() < 1e-12);
        assert!((s[0].points[0].2 - 0.1).abs() < 1e-12);
        assert_eq!(s[0].points[1].2, 0.0);
    }

    #[test]
    fn sparsity_series_sorted() {
        let rows = vec![
            row("a", 0.1, 0, 0, 0.5),
            row("a", 0.5, 0, 0, 0.8),
            row("b", 0.5, 0, 0, 0.7),
        ];
        let s = accuracy_vs_sparsity(rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].points.len(), 2);
        assert!(s[0].points[0].0 < s[0].points[1].0);
        let dat = to_dat(&s, "sparsity");
        assert_eq!(dat.matches("# sparsity").count(), 2);
        assert!(to_svg(&s, "sparsity", "acc").contains("<polyline"));
    }

    #[test]
    fn csv_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let mut w = csv::Writer::from_path(&p).unwrap();
        w.serialize(row("a", 1.0, 0, 0, 0.5)).unwrap();
        w.flush().unwrap();
        let files = write_curves(dir.path(), &dir.path().join("plots")).unwrap();
        assert_eq!(files.len(), 4);
        assert!(fs::read_to_string(&files[0])
            .unwrap()
            .contains("0 0.500000"));
    }
}
