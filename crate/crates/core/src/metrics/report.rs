//! CSV tables and static SVG charts for a training run: panel (a) loss per
//! iteration, (b) mean loss per epoch, (c) test mean and best Dice.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::metrics::series::MetricSeries;

pub const ITERATION_CSV: &str = "iteration_loss.csv";
pub const EPOCH_CSV: &str = "epoch_loss.csv";
pub const DICE_CSV: &str = "test_dice.csv";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

struct Line<'a> {
    label: &'a str,
    points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Minimal SVG 1.1 line chart. Axis ranges cover all points; a flat range is
/// widened by one unit.
fn svg_chart(title: &str, x_label: &str, y_label: &str, lines: &[Line]) -> String {
    let all = lines.iter().flat_map(|l| l.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>"#,
        WIDTH / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" fill="none" stroke="black" stroke-width="1"/>"#,
        l = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for (v, anchor, x, y) in [
        (x0, "start", MARGIN, HEIGHT - MARGIN + 16.0),
        (x1, "end", WIDTH - MARGIN, HEIGHT - MARGIN + 16.0),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
            fmt_tick(v)
        );
    }
    for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN + 4.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{x_label}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, line) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = line
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN + 4.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="11" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN - 4.0,
            line.label
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(())
}

/// Writes the three CSVs and three SVG panels into `dir` and returns their
/// paths.
pub fn emit_reports(series: &MetricSeries, dir: &Path) -> Result<Vec<PathBuf>> {
    if series.per_iteration_loss.is_empty() || series.per_epoch_loss.is_empty() {
        return Err(invalid!("cannot emit reports for an empty metric series"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();

    let mut csv = String::from("iteration,loss\n");
    for (i, v) in &series.per_iteration_loss {
        let _ = writeln!(csv, "{i},{v}");
    }
    write(dir, ITERATION_CSV, &csv, &mut out)?;

    let mut csv = String::from("epoch,mean_loss\n");
    for (e, v) in &series.per_epoch_loss {
        let _ = writeln!(csv, "{e},{v}");
    }
    write(dir, EPOCH_CSV, &csv, &mut out)?;

    let mut csv = String::from("epoch,mean_dice,best_dice\n");
    for ((e, m), (_, b)) in series.test_mean_dice.iter().zip(&series.test_best_dice) {
        let _ = writeln!(csv, "{e},{m},{b}");
    }
    write(dir, DICE_CSV, &csv, &mut out)?;

    let pts = |v: &[(u64, f64)]| v.iter().map(|&(x, y)| (x as f64, y)).collect::<Vec<_>>();
    let epts = |v: &[(usize, f64)]| v.iter().map(|&(x, y)| (x as f64, y)).collect::<Vec<_>>();
    let a = svg_chart(
        "(a) Per-iteration training loss",
        "iteration",
        "loss",
        &[Line {
            label: "loss",
            points: pts(&series.per_iteration_loss),
        }],
    );
    write(dir, "panel_a_iteration_loss.svg", &a, &mut out)?;
    let b = svg_chart(
        "(b) Average training loss per epoch",
        "epoch",
        "mean loss",
        &[Line {
            label: "mean loss",
            points: epts(&series.per_epoch_loss),
        }],
    );
    write(dir, "panel_b_epoch_loss.svg", &b, &mut out)?;
    let c = svg_chart(
        "(c) Test Dice",
        "epoch",
        "Dice",
        &[
            Line {
                label: "mean Dice",
                points: epts(&series.test_mean_dice),
            },
            Line {
                label: "best Dice",
                points: epts(&series.test_best_dice),
            },
        ],
    );
    write(dir, "panel_c_test_dice.svg", &c, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(epochs: usize) -> MetricSeries {
        let mut s = MetricSeries::default();
        let mut it = 0;
        for e in 1..=epochs {
            for _ in 0..4 {
                it += 1;
                s.push_iteration(it, 10.0 / it as f64);
            }
            s.push_epoch(e, 5.0 / e as f64, [0.3, 0.2, 0.5][(e - 1) % 3]).unwrap();
        }
        s
    }

    #[test]
    fn three_epochs_give_six_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_reports(&series(3), dir.path()).unwrap();
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "csv").count(), 3);
        assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "svg").count(), 3);
        let it = fs::read_to_string(dir.path().join(ITERATION_CSV)).unwrap();
        assert_eq!(it.lines().count(), 12 + 1);
        let dice = fs::read_to_string(dir.path().join(DICE_CSV)).unwrap();
        assert_eq!(dice.lines().count(), 3 + 1);
        let best: Vec<f64> = dice
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert!(best.windows(2).all(|w| w[1] >= w[0]));
        let svg = fs::read_to_string(dir.path().join("panel_c_test_dice.svg")).unwrap();
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn empty_series_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_reports(&MetricSeries::default(), dir.path()).is_err());
    }

    #[test]
    fn unwritable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        assert!(emit_reports(&series(1), &file.join("sub")).is_err());
    }
}
