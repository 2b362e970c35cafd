//! Static SVG plot emission: CMC curves and λ-sweep bar charts. Hand-rolled
//! markup, no plotting dependency; files are self-contained.

use crate::evaluation::RetrievalReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n",
        x = WIDTH / 2.0
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN;
    let y0 = HEIGHT - MARGIN;
    let x1 = WIDTH - MARGIN / 2.0;
    let y1 = MARGIN / 1.5;
    let mut out = String::new();
    out.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));
    // y gridlines at 0, 0.25, 0.5, 0.75, 1.0
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = y0 - frac * (y0 - y1);
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{frac:.2}</text>\n",
            x0 - 6.0,
            y + 3.0
        ));
    }
    out
}

fn plot_x(i: usize, n: usize) -> f64 {
    let x0 = MARGIN;
    let x1 = WIDTH - MARGIN / 2.0;
    if n <= 1 {
        x0
    } else {
        x0 + (x1 - x0) * i as f64 / (n - 1) as f64
    }
}

fn plot_y(v: f64) -> f64 {
    let y0 = HEIGHT - MARGIN;
    let y1 = MARGIN / 1.5;
    y0 - v.clamp(0.0, 1.0) * (y0 - y1)
}

/// CMC curve over gallery ranks, one polyline per report.
pub fn cmc_curve_svg(reports: &[(&str, &RetrievalReport)]) -> String {
    let mut out = svg_header("Cumulative matching characteristics");
    out.push_str(&axes("rank", "match rate"));
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (k, (label, report)) in reports.iter().enumerate() {
        let n = report.cmc.len();
        let points: Vec<String> = report
            .cmc
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", plot_x(i, n), plot_y(v)))
            .collect();
        let color = colors[k % colors.len()];
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{label} (mAP {:.3})</text>\n",
            MARGIN + 8.0,
            MARGIN / 1.5 + 14.0 * (k + 1) as f64,
            report.map
        ));
    }
    // rank tick labels at 1, 5, 10, 15, 20
    let n = reports.first().map(|(_, r)| r.cmc.len()).unwrap_or(20);
    for rank in [1usize, 5, 10, 15, 20] {
        if rank <= n {
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{rank}</text>\n",
                plot_x(rank - 1, n),
                HEIGHT - MARGIN + 14.0
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart for a hyper-parameter sweep: per value, Rank-1 and mAP.
pub fn sweep_bars_svg(param: &str, rows: &[(f64, f64, f64)]) -> String {
    let mut out = svg_header(&format!("{param} sweep: Rank-1 and mAP"));
    out.push_str(&axes(param, "metric"));
    let n = rows.len().max(1);
    let x0 = MARGIN;
    let x1 = WIDTH - MARGIN / 2.0;
    let slot = (x1 - x0) / n as f64;
    let bar = (slot * 0.3).min(28.0);
    for (i, &(value, r1, map)) in rows.iter().enumerate() {
        let cx = x0 + slot * (i as f64 + 0.5);
        let y_base = HEIGHT - MARGIN;
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"#1f77b4\"/>\n",
            cx - bar - 1.0,
            plot_y(r1),
            y_base - plot_y(r1)
        ));
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"#d62728\"/>\n",
            cx + 1.0,
            plot_y(map),
            y_base - plot_y(map)
        ));
        out.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{value}</text>\n",
            HEIGHT - MARGIN + 14.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#1f77b4\">Rank-1</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#d62728\">mAP</text>\n",
        MARGIN + 8.0,
        MARGIN / 1.5 + 14.0,
        MARGIN + 8.0,
        MARGIN / 1.5 + 28.0
    ));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Direction, GalleryMode, ProtocolSpec, SearchMode};

    #[test]
    fn emits_wellformed_svg() {
        let report = RetrievalReport {
            protocol: ProtocolSpec {
                search_mode: SearchMode::All,
                gallery_mode: GalleryMode::SingleShot,
                direction: Direction::InfraredToVisible,
                trial_seed: 0,
            },
            cmc: (0..20).map(|i| (i as f64 + 1.0) / 20.0).collect(),
            map: 0.5,
            num_queries: 10,
            num_gallery: 16,
            num_trials: 1,
            trials: vec![],
        };
        let svg = cmc_curve_svg(&[("demo", &report)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("polyline"));

        let bars = sweep_bars_svg("lambda1", &[(0.0, 0.4, 0.3), (0.15, 0.9, 0.8)]);
        assert!(bars.contains("rect"));
        assert!(bars.matches("<rect").count() >= 5);
    }
}
