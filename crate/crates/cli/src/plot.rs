//! Static SVG overlay of true and predicted trajectories.

use std::fmt::Write;

use anyhow::{bail, Context, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Columns of a predictions CSV: `step`, `true_*`, `pred_*`.
pub struct Trajectories {
    pub steps: Vec<f64>,
    pub truth: Vec<Vec<f64>>,
    pub pred: Vec<Vec<f64>>,
}

pub fn read_predictions(text: &str) -> Result<Trajectories> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let step_col = headers
        .iter()
        .position(|h| h == "step")
        .context("predictions CSV has no step column")?;
    let cols = |prefix: &str| -> Vec<usize> {
        headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    };
    let (true_cols, pred_cols) = (cols("true_"), cols("pred_"));
    if true_cols.is_empty() || true_cols.len() != pred_cols.len() {
        bail!("predictions CSV needs matching true_* and pred_* columns");
    }
    let mut out = Trajectories {
        steps: Vec::new(),
        truth: vec![Vec::new(); true_cols.len()],
        pred: vec![Vec::new(); pred_cols.len()],
    };
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .with_context(|| format!("row {}: {:?} is not a number", line + 2, &record[i]))
        };
        out.steps.push(num(step_col)?);
        for (k, &c) in true_cols.iter().enumerate() {
            out.truth[k].push(num(c)?);
        }
        for (k, &c) in pred_cols.iter().enumerate() {
            out.pred[k].push(num(c)?);
        }
    }
    if out.steps.is_empty() {
        bail!("predictions CSV has no rows");
    }
    Ok(out)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Truth is dashed, prediction solid; one colour per dimension.
pub fn render_svg(t: &Trajectories) -> String {
    let (x0, x1) = bounds(t.steps.iter().copied());
    let (y0, y1) = bounds(t.truth.iter().chain(&t.pred).flatten().copied());
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r##"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#888888"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    )
    .unwrap();
    for (role, series, dash) in [("true", &t.truth, Some("6 4")), ("pred", &t.pred, None)] {
        for (dim, ys) in series.iter().enumerate() {
            let points: Vec<String> = t
                .steps
                .iter()
                .zip(ys)
                .filter(|(_, y)| y.is_finite())
                .map(|(&x, &y)| format!("{:.3},{:.3}", sx(x), sy(y)))
                .collect();
            let dash = dash.map_or(String::new(), |d| format!(r#" stroke-dasharray="{d}""#));
            writeln!(
                svg,
                r##"<polyline class="{role}" data-dim="{dim}" fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"##,
                PALETTE[dim % PALETTE.len()],
                points.join(" ")
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}
