//! Plain-text tables, CSV and SVG renderings of evaluation results.

use std::fmt::Write;

use crate::trainer::EvalReport;

/// One row of a sweep or ablation table.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub sensing: f64,
}

impl ResultRow {
    pub fn from_report(label: impl Into<String>, r: &EvalReport) -> Self {
        Self {
            label: label.into(),
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            sensing: r.sensing,
        }
    }
}

pub fn rows_csv(first_column: &str, rows: &[ResultRow]) -> String {
    let mut s = format!("{first_column},accuracy,macro_f1,sensing\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", r.label, r.accuracy, r.macro_f1, r.sensing);
    }
    s
}

pub fn rows_markdown(first_column: &str, rows: &[ResultRow]) -> String {
    let mut s = format!("| {first_column} | Acc. (%) | F1 (%) | Sensing (%) |\n|---|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {:.2} | {:.2} | {:.2} |", r.label, r.accuracy, r.macro_f1, r.sensing);
    }
    s
}

/// `[modality × patch]` activation frequencies with a header row.
pub fn heatmap_csv(names: &[String], heat: &[Vec<f64>]) -> String {
    let l = heat.first().map_or(0, Vec::len);
    let mut s = String::from("modality");
    for i in 0..l {
        let _ = write!(s, ",p{i}");
    }
    s.push('\n');
    for (name, row) in names.iter().zip(heat) {
        s.push_str(name);
        for v in row {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// Grey-to-blue cell grid with the value printed in each cell.
pub fn heatmap_svg(names: &[String], heat: &[Vec<f64>]) -> String {
    let (cell, left, top) = (48usize, 90usize, 30usize);
    let l = heat.first().map_or(0, Vec::len);
    let width = left + cell * l + 10;
    let height = top + cell * heat.len() + 10;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for i in 0..l {
        let x = left + i * cell + cell / 2;
        let _ = writeln!(s, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">p{i}</text>", top - 8);
    }
    for (m, (name, row)) in names.iter().zip(heat).enumerate() {
        let y = top + m * cell;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            left - 6,
            y + cell / 2 + 4,
            escape(name)
        );
        for (i, &v) in row.iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(240.0, 33.0), shade(240.0, 102.0), shade(240.0, 172.0));
            let ink = if v > 0.55 { "#ffffff" } else { "#000000" };
            let x = left + i * cell;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"#ffffff\"/>\
                 <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{v:.2}</text>",
                x + cell / 2,
                y + cell / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Short human-readable summary of one evaluation.
pub fn summary(r: &EvalReport) -> String {
    format!(
        "windows {}  accuracy {:.2}%  macro-F1 {:.2}%  modality sensing {:.2}%  patch sensing {:.2}%",
        r.windows, r.accuracy, r.macro_f1, r.modality_sensing, r.patch_sensing
    )
}
