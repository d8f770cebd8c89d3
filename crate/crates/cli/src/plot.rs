//! Static SVG line plots of the experiment results.
//!
//! One line per method; the y value at each case index is the mean over
//! seeds of the selected min-across-users metric.  Missing cases leave a
//! gap in the line rather than interpolating.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};

use crate::csvio::ResultRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 200.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 60.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Which per-row metric drives the y axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    MinSimilarity,
    MinBleu(usize),
}

impl Metric {
    fn label(&self) -> String {
        match self {
            Metric::MinSimilarity => "minimal semantic similarity".to_string(),
            Metric::MinBleu(n) => format!("minimal BLEU ({n}-gram)"),
        }
    }

    fn value(&self, row: &ResultRow) -> f64 {
        match self {
            Metric::MinSimilarity => row.min_similarity,
            Metric::MinBleu(n) => row.min_bleu[n - 1],
        }
    }
}

/// Per-method case means over seeds; only user-1 rows are consulted since
/// the min metrics repeat across a group's rows.
fn series(rows: &[ResultRow], metric: Metric) -> BTreeMap<String, BTreeMap<usize, f64>> {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.user == 1) {
        let e = acc
            .entry(row.method.clone())
            .or_default()
            .entry(row.case)
            .or_insert((0.0, 0));
        e.0 += metric.value(row);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(m, cases)| {
            (
                m,
                cases
                    .into_iter()
                    .map(|(c, (sum, n))| (c, sum / n as f64))
                    .collect(),
            )
        })
        .collect()
}

fn x_of(case: usize, cases: &[usize]) -> f64 {
    let i = cases.iter().position(|&c| c == case).unwrap() as f64;
    let span = (cases.len().max(2) - 1) as f64;
    MARGIN_L + i * (WIDTH - MARGIN_L - MARGIN_R) / span
}

fn y_of(v: f64) -> f64 {
    // y axis fixed to [0, 1] (both metrics live there).
    HEIGHT - MARGIN_B - v.clamp(0.0, 1.0) * (HEIGHT - MARGIN_T - MARGIN_B)
}

/// Renders one metric across cases to an SVG file.  `config_hashes` of the
/// source CSVs are embedded as a leading comment for traceability.
pub fn plot_metric_traced(
    rows: &[ResultRow],
    metric: Metric,
    title: &str,
    out: &Path,
    config_hashes: &[String],
) -> Result<()> {
    if rows.is_empty() {
        bail!("no rows to plot");
    }
    let trace = config_hashes.join(",");
    let mut cases: Vec<usize> = rows.iter().map(|r| r.case).collect();
    cases.sort_unstable();
    cases.dedup();
    let data = series(rows, metric);

    let mut svg = String::new();
    svg.push_str(&format!("<!-- config_hash={} -->\n", xml_escape(&trace)));
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    ));
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push_str(&format!(
        r#"<text x="{}" y="28" font-size="16" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        xml_escape(title)
    ));

    // Axes and grid.
    for tick in 0..=10 {
        let v = tick as f64 / 10.0;
        let y = y_of(v);
        svg.push_str(&format!(
            r##"<line x1="{MARGIN_L}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd" stroke-width="1"/>"##,
            WIDTH - MARGIN_R
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end" font-family="sans-serif">{v:.1}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    for &c in &cases {
        let x = x_of(c, &cases);
        svg.push_str(&format!(
            r#"<text x="{x}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{c}</text>"#,
            HEIGHT - MARGIN_B + 20.0
        ));
    }
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1.5"/>"#,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black" stroke-width="1.5"/>"#,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle" font-family="sans-serif">channel case index</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 14.0
    ));
    svg.push_str(&format!(
        r#"<text x="20" y="{}" font-size="13" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 20 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        xml_escape(&metric.label())
    ));

    // Lines, split at gaps.
    for (mi, (method, points)) in data.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let mut segment: Vec<(f64, f64)> = Vec::new();
        let mut segments: Vec<Vec<(f64, f64)>> = Vec::new();
        for &c in &cases {
            match points.get(&c) {
                Some(&v) => segment.push((x_of(c, &cases), y_of(v))),
                None => {
                    if !segment.is_empty() {
                        segments.push(std::mem::take(&mut segment));
                    }
                }
            }
        }
        if !segment.is_empty() {
            segments.push(segment);
        }
        for seg in &segments {
            if seg.len() > 1 {
                let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                svg.push_str(&format!(
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    pts.join(" ")
                ));
            }
            for (x, y) in seg {
                svg.push_str(&format!(
                    r#"<circle cx="{x:.1}" cy="{y:.1}" r="3.5" fill="{color}"/>"#
                ));
            }
        }
        // Legend.
        let ly = MARGIN_T + 18.0 * mi as f64;
        let lx = WIDTH - MARGIN_R + 16.0;
        svg.push_str(&format!(
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 22.0
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            xml_escape(method)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg)?;
    Ok(())
}

/// [`plot_metric_traced`] without provenance (tests, ad-hoc plots).
pub fn plot_metric(rows: &[ResultRow], metric: Metric, title: &str, out: &Path) -> Result<()> {
    plot_metric_traced(rows, metric, title, out, &[])
}

/// Loss-versus-epoch curves (used by the pretraining comparison figure).
pub fn plot_loss_curves(series: &[(String, Vec<(usize, f64)>)], title: &str, out: &Path) -> Result<()> {
    if series.is_empty() || series.iter().all(|(_, v)| v.is_empty()) {
        bail!("no loss curves to plot");
    }
    let max_epoch = series
        .iter()
        .flat_map(|(_, v)| v.iter().map(|(e, _)| *e))
        .max()
        .unwrap_or(1) as f64;
    let max_loss = series
        .iter()
        .flat_map(|(_, v)| v.iter().map(|(_, l)| *l))
        .fold(0.0f64, f64::max)
        .max(1e-9);

    let x_of = |e: f64| MARGIN_L + (e / max_epoch.max(1.0)) * (WIDTH - MARGIN_L - MARGIN_R);
    let y_of = |l: f64| HEIGHT - MARGIN_B - (l / max_loss) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    ));
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push_str(&format!(
        r#"<text x="{}" y="28" font-size="16" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        xml_escape(title)
    ));
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1.5"/>"#,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black" stroke-width="1.5"/>"#,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle" font-family="sans-serif">epoch</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 14.0
    ));
    svg.push_str(&format!(
        r#"<text x="20" y="{}" font-size="13" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 20 {})">training loss</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    for (si, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(e, l)| format!("{:.1},{:.1}", x_of(*e as f64), y_of(*l)))
            .collect();
        svg.push_str(&format!(
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        ));
        let ly = MARGIN_T + 18.0 * si as f64;
        let lx = WIDTH - MARGIN_R + 16.0;
        svg.push_str(&format!(
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 22.0
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            xml_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
