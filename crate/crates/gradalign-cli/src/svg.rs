//! Dependency-free SVG rendering of training traces: loss, training error,
//! and the misalignment counter against the step axis. Output bytes are a
//! pure function of the input trace.

use gradalign::error::{Error, Result};
use gradalign::training::TrainTrace;
use std::fmt::Write as _;

const W: f64 = 800.0;
const H: f64 = 500.0;
const MARGIN: f64 = 60.0;

fn xmap(step: f64, max_step: f64) -> f64 {
    MARGIN + (W - 2.0 * MARGIN) * step / max_step.max(1.0)
}

fn ymap(v: f64, max_v: f64) -> f64 {
    let max_v = if max_v > 0.0 { max_v } else { 1.0 };
    H - MARGIN - (H - 2.0 * MARGIN) * (v / max_v).clamp(0.0, 1.0)
}

fn polyline(points: &[(f64, f64)], color: &str, dash: Option<&str>) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        let _ = write!(d, "{}{x:.2},{y:.2}", if i == 0 { "" } else { " " });
    }
    let dash_attr = dash.map_or(String::new(), |p| format!(" stroke-dasharray=\"{p}\""));
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash_attr} points=\"{d}\"/>\n"
    )
}

/// Renders one trace as a fixed-size SVG document.
pub fn render_trace(trace: &TrainTrace) -> Result<String> {
    if trace.records.is_empty() {
        return Err(Error::Contract {
            op: "render_trace",
            msg: "empty trace".into(),
        });
    }
    let max_step = trace.records.last().unwrap().step as f64;
    let max_loss = trace
        .records
        .iter()
        .map(|r| r.loss)
        .fold(0.0f64, f64::max);
    let max_q = trace
        .records
        .iter()
        .filter_map(|r| r.q_t)
        .max()
        .unwrap_or(0) as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"12\">step (max {max_step:.0})</text>\n",
        x = W / 2.0 - 40.0,
        y = H - MARGIN / 2.0
    ));

    let err_points: Vec<(f64, f64)> = trace
        .records
        .iter()
        .map(|r| (xmap(r.step as f64, max_step), ymap(r.train_error, 1.0)))
        .collect();
    svg.push_str(&polyline(&err_points, "#d62728", None));

    let loss_points: Vec<(f64, f64)> = trace
        .records
        .iter()
        .map(|r| (xmap(r.step as f64, max_step), ymap(r.loss, max_loss)))
        .collect();
    svg.push_str(&polyline(&loss_points, "#1f77b4", Some("4 2")));

    let q_points: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter(|r| r.q_t.is_some())
        .map(|r| {
            (
                xmap(r.step as f64, max_step),
                ymap(r.q_t.unwrap() as f64, max_q.max(1.0)),
            )
        })
        .collect();
    if !q_points.is_empty() {
        svg.push_str(&polyline(&q_points, "#2ca02c", Some("1 3")));
    }

    // Phase switch marker, when present.
    if let Some(tau) = trace.summary.tau {
        if (tau as f64) <= max_step {
            let x = xmap(tau as f64, max_step);
            svg.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{t}\" x2=\"{x:.2}\" y2=\"{b}\" stroke=\"#999999\" stroke-dasharray=\"2 2\"/>\n",
                t = MARGIN,
                b = H - MARGIN
            ));
        }
    }

    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{y}\" font-size=\"12\" fill=\"#d62728\">train error (0..1)</text>\n",
        m = MARGIN,
        y = MARGIN - 30.0
    ));
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{y}\" font-size=\"12\" fill=\"#1f77b4\">loss (max {max_loss:.4})</text>\n",
        m = MARGIN,
        y = MARGIN - 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{y}\" font-size=\"12\" fill=\"#2ca02c\">misaligned-step count (max {max_q:.0})</text>\n",
        m = MARGIN,
        y = MARGIN - 2.0
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}
