//! Allocation reporting: CSV emission lives on `AllocationReport`; this
//! module adds the optional single-file SVG heatmap (layers x six kinds,
//! cell intensity = active count).

use std::path::Path;

use crate::allocator::AllocationReport;
use crate::dora::MatrixKind;
use crate::error::Result;

const CELL: usize = 56;
const LEFT: usize = 64;
const TOP: usize = 40;

/// Renders the report as a self-contained SVG heatmap.
pub fn to_svg(report: &AllocationReport) -> String {
    let layers: usize = report
        .rows
        .iter()
        .map(|r| r.layer + 1)
        .max()
        .unwrap_or(0);
    let kinds = MatrixKind::ALL.len();
    let max_active = report.rows.iter().map(|r| r.active).max().unwrap_or(0).max(1);

    let width = LEFT + kinds * CELL + 16;
    let height = TOP + layers * CELL + 16;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"12\">\n"
    );
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"16\">active components at step {}</text>\n",
        report.step
    ));
    for (k, kind) in MatrixKind::ALL.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{kind}</text>\n",
            LEFT + k * CELL + CELL / 2,
            TOP - 6
        ));
    }
    for layer in 0..layers {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">L{layer}</text>\n",
            LEFT - 8,
            TOP + layer * CELL + CELL / 2 + 4
        ));
        for (k, kind) in MatrixKind::ALL.iter().enumerate() {
            let cell = report.cell(layer, *kind);
            let active = cell.map_or(0, |c| c.active);
            let eligible = cell.map_or(0, |c| c.eligible);
            // Dark blue at the maximum count, near-white at zero.
            let t = active as f64 / max_active as f64;
            let r = (235.0 - 185.0 * t) as u8;
            let g = (240.0 - 160.0 * t) as u8;
            let b = 250u8;
            let x = LEFT + k * CELL;
            let y = TOP + layer * CELL;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"rgb({r},{g},{b})\" stroke=\"#888\"/>\n"
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{active}/{eligible}</text>\n",
                x + CELL / 2,
                y + CELL / 2 + 4
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(report: &AllocationReport, path: &Path) -> Result<()> {
    std::fs::write(path, to_svg(report))?;
    Ok(())
}

pub fn write_csv(report: &AllocationReport, run_id: &str, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_csv(run_id))?;
    Ok(())
}
