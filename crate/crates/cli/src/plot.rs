//! Two-panel SVG of a baseline and an optional regularized trajectory:
//! effective rank on a linear axis (left) and perplexity on a log axis
//! (right). The output is a pure function of the input points.

use std::fmt::Write as _;

use anyhow::{bail, Result};

use crate::trajectory::TrajectoryPoint;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 400.0;
const PANEL_W: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
pub const BASELINE_COLOR: &str = "#d62728";
pub const MNCIS_COLOR: &str = "#1f77b4";

/// Tick positions for a log axis covering `[lo, hi]`: every power of ten
/// from the one at or below `lo` to the one at or above `hi`.
pub fn log_decade_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let a = lo.log10().floor() as i32;
    let b = hi.log10().ceil().max(a as f64 + 1.0) as i32;
    (a..=b).map(|e| 10f64.powi(e)).collect()
}

/// Roughly `target` evenly spaced ticks with a 1/2/5 × 10ᵏ step that
/// enclose `[lo, hi]`.
pub fn linear_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).floor() as i64;
    let last = (hi / step).ceil() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
    ticks: Vec<f64>,
}

impl Axis {
    fn linear(values: &[f64]) -> Self {
        let (lo, hi) = min_max(values);
        let ticks = linear_ticks(lo, hi, 5);
        Axis {
            lo: ticks[0],
            hi: *ticks.last().expect("at least one tick"),
            log: false,
            ticks,
        }
    }

    fn log(values: &[f64]) -> Self {
        let (lo, hi) = min_max(values);
        let ticks = log_decade_ticks(lo, hi);
        Axis {
            lo: ticks[0].log10(),
            hi: ticks.last().expect("at least one tick").log10(),
            log: true,
            ticks,
        }
    }

    /// Fraction of the axis height, 0 at the bottom.
    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

struct Series<'a> {
    name: &'static str,
    id: &'static str,
    color: &'static str,
    triangle: bool,
    points: &'a [TrajectoryPoint],
}

/// Renders the comparison figure. Each trajectory needs at least 2 points.
pub fn render_plot(baseline: &[TrajectoryPoint], mncis: Option<&[TrajectoryPoint]>) -> Result<String> {
    let mut series = vec![Series {
        name: "Baseline",
        id: "baseline",
        color: BASELINE_COLOR,
        triangle: false,
        points: baseline,
    }];
    if let Some(m) = mncis {
        series.push(Series {
            name: "MNCIS (ASNC)",
            id: "mncis",
            color: MNCIS_COLOR,
            triangle: true,
            points: m,
        });
    }
    for s in &series {
        if s.points.len() < 2 {
            bail!("{} trajectory has {} point(s); at least 2 are needed", s.id, s.points.len());
        }
    }
    let all = || series.iter().flat_map(|s| s.points.iter());
    let ranks: Vec<f64> = all().map(|p| p.effective_rank).collect();
    let ppls: Vec<f64> = all().map(|p| p.perplexity).collect();
    if ranks.iter().chain(&ppls).any(|v| !v.is_finite()) {
        bail!("cannot plot non-finite values");
    }
    if ppls.iter().any(|&p| p <= 0.0) {
        bail!("perplexity must be positive for a log axis");
    }
    let max_gen = all().map(|p| p.generation).max().unwrap_or(1).max(1);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#)?;
    let panels = [
        ("rank", "Global Spectral Topology", "Effective rank", Axis::linear(&ranks)),
        ("ppl", "Semantic Coherence (PPL)", "Perplexity (log)", Axis::log(&ppls)),
    ];
    for (i, (key, title, ylabel, axis)) in panels.iter().enumerate() {
        let x0 = i as f64 * PANEL_W + MARGIN_L;
        let x1 = (i + 1) as f64 * PANEL_W - MARGIN_R;
        let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
        let px = |g: usize| x0 + (x1 - x0) * g as f64 / max_gen as f64;
        let py = |v: f64| y0 - (y0 - y1) * axis.frac(v);
        writeln!(svg, r#"<g id="panel-{key}">"#)?;
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14" font-weight="bold">{title}</text>"#,
            (x0 + x1) / 2.0,
            MARGIN_T - 15.0
        )?;
        for &t in &axis.ticks {
            let y = py(t);
            writeln!(
                svg,
                r##"<line class="ytick" x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#dddddd"/>"##
            )?;
            writeln!(
                svg,
                r#"<text class="ytick-label" x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                y + 4.0,
                fmt_tick(t)
            )?;
        }
        let xstep = max_gen.div_ceil(10).max(1);
        for g in (0..=max_gen).step_by(xstep) {
            let x = px(g);
            writeln!(
                svg,
                r##"<line class="xtick" x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000000"/>"##,
                y0 + 5.0
            )?;
            writeln!(
                svg,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{g}</text>"#,
                y0 + 18.0
            )?;
        }
        writeln!(
            svg,
            r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000000"/>"##,
            x1 - x0,
            y0 - y1
        )?;
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Generation</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 15.0
        )?;
        let (lx, ly) = (i as f64 * PANEL_W + 18.0, (y0 + y1) / 2.0);
        writeln!(
            svg,
            r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{ylabel}</text>"#
        )?;
        for s in &series {
            let value = |p: &TrajectoryPoint| if *key == "rank" { p.effective_rank } else { p.perplexity };
            let coords: Vec<String> = s
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", px(p.generation), py(value(p))))
                .collect();
            writeln!(
                svg,
                r#"<polyline id="{key}-{}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                s.id,
                coords.join(" "),
                s.color
            )?;
            for p in s.points {
                let (x, y) = (px(p.generation), py(value(p)));
                marker(&mut svg, s, x, y)?;
            }
        }
        writeln!(svg, "</g>")?;
    }
    // Legend, top right of the left panel.
    let (lx, mut ly) = (PANEL_W - MARGIN_R - 130.0, MARGIN_T + 16.0);
    writeln!(svg, r#"<g id="legend">"#)?;
    for s in &series {
        writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"/>"#,
            lx + 24.0,
            s.color
        )?;
        marker(&mut svg, s, lx + 12.0, ly)?;
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 30.0, ly + 4.0, s.name)?;
        ly += 18.0;
    }
    writeln!(svg, "</g>")?;
    writeln!(svg, "</svg>")?;
    Ok(svg)
}

fn marker(svg: &mut String, s: &Series, x: f64, y: f64) -> Result<()> {
    if s.triangle {
        writeln!(
            svg,
            r#"<polygon class="marker-{}" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{}"/>"#,
            s.id,
            x,
            y - 5.0,
            x - 4.5,
            y + 4.0,
            x + 4.5,
            y + 4.0,
            s.color
        )?;
    } else {
        writeln!(
            svg,
            r#"<circle class="marker-{}" cx="{x:.2}" cy="{y:.2}" r="4" fill="{}"/>"#,
            s.id, s.color
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(ranks: &[f64], ppls: &[f64]) -> Vec<TrajectoryPoint> {
        ranks
            .iter()
            .zip(ppls)
            .enumerate()
            .map(|(g, (&r, &p))| TrajectoryPoint {
                generation: g,
                effective_rank: r,
                perplexity: p,
                mean_lm_loss: 1.0,
                mean_asnc_loss: 0.0,
                distinct_2: 0.5,
            })
            .collect()
    }

    fn polyline_ys(svg: &str, id: &str) -> Vec<f64> {
        let doc = roxmltree::Document::parse(svg).unwrap();
        let node = doc
            .descendants()
            .find(|n| n.attribute("id") == Some(id))
            .unwrap_or_else(|| panic!("no element {id}"));
        node.attribute("points")
            .unwrap()
            .split(' ')
            .map(|xy| xy.split(',').nth(1).unwrap().parse().unwrap())
            .collect()
    }

    #[test]
    fn ticks() {
        assert_eq!(log_decade_ticks(10.0, 1000.0), vec![10.0, 100.0, 1000.0]);
        assert_eq!(log_decade_ticks(15.0, 700.0), vec![10.0, 100.0, 1000.0]);
        assert_eq!(log_decade_ticks(50.0, 50.0), vec![10.0, 100.0]);
        let t = linear_ticks(1.2, 3.7, 5);
        assert!(t[0] <= 1.2 && *t.last().unwrap() >= 3.7);
        assert!(t.len() >= 3 && t.len() <= 8, "{t:?}");
    }

    #[test]
    fn decreasing_rank_moves_down_the_page() {
        let b = traj(&[5.0, 4.0, 3.0, 2.5], &[10.0, 30.0, 100.0, 900.0]);
        let m = traj(&[5.0, 4.5, 5.5, 6.0], &[10.0, 20.0, 25.0, 30.0]);
        let svg = render_plot(&b, Some(&m)).unwrap();
        let ys = polyline_ys(&svg, "rank-baseline");
        assert!(ys.windows(2).all(|w| w[1] > w[0]), "{ys:?}");
        let ys = polyline_ys(&svg, "ppl-baseline");
        assert!(ys.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(polyline_ys(&svg, "rank-mncis").len(), 4);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let labels: Vec<&str> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("ytick-label"))
            .filter_map(|n| n.text())
            .collect();
        for want in ["10", "100", "1000"] {
            assert!(labels.contains(&want), "{labels:?}");
        }
        assert_eq!(svg, render_plot(&b, Some(&m)).unwrap());
    }

    #[test]
    fn needs_two_points() {
        assert!(render_plot(&traj(&[1.0], &[2.0]), None).is_err());
        assert!(render_plot(&traj(&[1.0, 1.0], &[2.0, 2.0]), None).is_ok());
    }
}
