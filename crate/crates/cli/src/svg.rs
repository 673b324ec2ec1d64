//! Minimal SVG heat map.

use std::fmt::Write as _;

const CELL: usize = 28;
const LEFT: usize = 40;
const TOP: usize = 90;

/// One column per entry of `columns`, one row per layer (layer 0 at the
/// bottom). Cells are shaded by value relative to the largest value.
pub fn heatmap(columns: &[(String, Vec<f64>)]) -> String {
    let rows = columns.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let max = columns
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max);
    let width = LEFT + CELL * columns.len() + 10;
    let height = TOP + CELL * rows + 10;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    )
    .unwrap();
    for (c, (label, values)) in columns.iter().enumerate() {
        let x = LEFT + c * CELL;
        writeln!(
            out,
            r#"<text x="{}" y="{}" transform="rotate(-60 {} {})">{}</text>"#,
            x + CELL / 2,
            TOP - 4,
            x + CELL / 2,
            TOP - 4,
            escape(label)
        )
        .unwrap();
        for (layer, v) in values.iter().enumerate() {
            let y = TOP + (rows - 1 - layer) * CELL;
            let t = if max > 0.0 { v / max } else { 0.0 };
            let shade = (255.0 * (1.0 - t)).round() as u8;
            writeln!(
                out,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb(255,{shade},{shade})"/>"#
            )
            .unwrap();
        }
    }
    for layer in 0..rows {
        let y = TOP + (rows - 1 - layer) * CELL + CELL / 2 + 3;
        writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end">{layer}</text>"#, LEFT - 4).unwrap();
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_cell() {
        let svg = heatmap(&[("a".into(), vec![0.0, 1.0]), ("b<".into(), vec![2.0, 0.5])]);
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("b&lt;"));
        assert!(svg.contains("rgb(255,0,0)"));
    }
}
