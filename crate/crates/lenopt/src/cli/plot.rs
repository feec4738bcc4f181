//! Pareto chart rendering: hand-rolled SVG polylines plus a markdown summary
//! table. Consumes exactly the CSV schema the search command writes (any CSV
//! with `f1` and `speedup` columns works).

use std::fmt::Write as _;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub name: String,
    /// (speedup, f1), sorted by speedup ascending.
    pub points: Vec<(f64, f64)>,
}

pub fn parse_pareto_csv(name: &str, text: &str) -> Result<Series, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format!("{name}: empty CSV"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let f1_col = cols
        .iter()
        .position(|&c| c == "f1")
        .ok_or_else(|| format!("{name}: no f1 column in header {header:?}"))?;
    let sp_col = cols
        .iter()
        .position(|&c| c == "speedup")
        .ok_or_else(|| format!("{name}: no speedup column in header {header:?}"))?;
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(format!(
                "{name} line {}: {} fields, header has {}",
                i + 2,
                fields.len(),
                cols.len()
            ));
        }
        let f1: f64 = fields[f1_col]
            .parse()
            .map_err(|_| format!("{name} line {}: bad f1 {:?}", i + 2, fields[f1_col]))?;
        let sp: f64 = fields[sp_col]
            .parse()
            .map_err(|_| format!("{name} line {}: bad speedup {:?}", i + 2, fields[sp_col]))?;
        points.push((sp, f1));
    }
    if points.is_empty() {
        return Err(format!("{name}: no data rows"));
    }
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite plot values"));
    Ok(Series { name: name.to_string(), points })
}

/// One absolute F1 point is 1.0 on a percent scale and 0.01 on a fraction
/// scale; fractions never exceed 1, so the scale is unambiguous.
pub fn loss_point(full_f1: f64) -> f64 {
    if full_f1 > 1.5 {
        1.0
    } else {
        0.01
    }
}

/// Largest speedup whose f1 stays at or above the floor.
pub fn best_speedup_within(points: &[(f64, f64)], floor: f64) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.1 >= floor)
        .map(|p| p.0)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
}

fn ranges(series: &[Series], full_f1: f64, floor: f64) -> ((f64, f64), (f64, f64)) {
    let mut x_min = 1.0f64;
    let mut x_max = 1.0f64;
    let mut y_min = floor;
    let mut y_max = full_f1;
    for s in series {
        for &(sp, f1) in &s.points {
            x_min = x_min.min(sp);
            x_max = x_max.max(sp);
            y_min = y_min.min(f1);
            y_max = y_max.max(f1);
        }
    }
    let x_pad = (0.05 * (x_max - x_min)).max(0.1);
    let y_pad = (0.08 * (y_max - y_min)).max(0.01);
    ((x_min - x_pad, x_max + x_pad), (y_min - y_pad, y_max + y_pad))
}

pub fn render_svg(series: &[Series], full_f1: f64) -> String {
    let floor = full_f1 - loss_point(full_f1);
    let ((x_lo, x_hi), (y_lo, y_hi)) = ranges(series, full_f1, floor);
    let (left, right, top, bottom) = (60.0, 620.0, 20.0, 360.0);
    let px = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * (right - left);
    let py = |y: f64| bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top);

    let mut s = String::new();
    s.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" \
         viewBox=\"0 0 640 420\">\n",
    );
    s.push_str("<rect width=\"640\" height=\"420\" fill=\"white\"/>\n");
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#333\"/>",
        right - left,
        bottom - top
    );

    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<line x1=\"{0:.1}\" y1=\"{bottom}\" x2=\"{0:.1}\" y2=\"{1}\" stroke=\"#333\"/>",
            px(fx),
            bottom + 4.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{fx:.2}</text>",
            px(fx),
            bottom + 18.0
        );
        let _ = writeln!(
            s,
            "<line x1=\"{0}\" y1=\"{1:.1}\" x2=\"{2}\" y2=\"{1:.1}\" stroke=\"#333\"/>",
            left - 4.0,
            py(fy),
            left
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"end\">{fy:.3}</text>",
            left - 8.0,
            py(fy) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"400\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\">speedup</text>",
        (left + right) / 2.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 14 {0:.1})\">f1</text>",
        (top + bottom) / 2.0
    );

    // reference lines: full-model f1 and the one-point-loss floor
    for (y, label) in [(full_f1, "full"), (floor, "-1pt")] {
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{0:.1}\" x2=\"{right}\" y2=\"{0:.1}\" stroke=\"#888\" \
             stroke-dasharray=\"6 3\"/>",
            py(y)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"10\" \
             fill=\"#888\">{label} {y:.3}</text>",
            right + 2.0,
            py(y) + 3.0
        );
    }

    for (si, ser) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if ser.points.len() > 1 {
            let pts: Vec<String> =
                ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                pts.join(" ")
            );
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                px(x),
                py(y)
            );
        }
        let ly = top + 14.0 + 16.0 * si as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>",
            left + 8.0,
            ly - 9.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly:.1}\" font-family=\"monospace\" font-size=\"11\">{}</text>",
            left + 22.0,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn summary_markdown(series: &[Series], full_f1: f64) -> String {
    let floor = full_f1 - loss_point(full_f1);
    let mut s = String::new();
    let _ = writeln!(s, "full-model f1: {full_f1:.4} (1-point floor {floor:.4})");
    s.push('\n');
    s.push_str("| model | max f1 | best speedup within 1 point |\n");
    s.push_str("| --- | ---: | ---: |\n");
    for ser in series {
        let max_f1 =
            ser.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let best = best_speedup_within(&ser.points, floor)
            .map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "| {} | {max_f1:.4} | {best} |", ser.name);
    }
    s
}
