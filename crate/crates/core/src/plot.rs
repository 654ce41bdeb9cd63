//! Plain-text artifacts for sweep results: a fixed 6-decimal CSV that
//! round-trips exactly as printed, and hand-rolled SVG vector fields.
//!
//! Arrow lengths in the SVG share one uniform scale chosen so the longest
//! planar displacement spans [`ARROW_SPAN`] block lengths; the raw
//! magnitudes live in the CSV and in each arrow's tooltip. Depth and
//! rotation components are annotated, not drawn.

use crate::analysis::{InterpolationResult, SweepProbe, SweepResult};
use std::fmt;
use std::fmt::Write as _;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum PlotError {
    Csv { line: usize, detail: String },
}

impl fmt::Display for PlotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlotError::Csv { line, detail } => {
                write!(f, "csv line {line}: {detail}")
            }
        }
    }
}

impl std::error::Error for PlotError {}

// ── CSV ─────────────────────────────────────────────────────────────────

const CSV_HEADER: &str = "x,y,dx,dy,dz,dtheta";

/// Render a sweep as CSV with a fixed 6-decimal encoding.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in &result.probes {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.x, p.y, p.dx, p.dy, p.dz, p.dtheta
        );
    }
    out
}

/// Parse a sweep CSV back into probes. Values equal the printed decimals
/// exactly, so `sweep_csv ∘ parse_sweep_csv` is the identity on the text.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepProbe>, PlotError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(PlotError::Csv {
                line: 1,
                detail: format!("expected header \"{CSV_HEADER}\", found \"{header}\""),
            })
        }
        None => {
            return Err(PlotError::Csv {
                line: 1,
                detail: "empty file".to_string(),
            })
        }
    }
    let mut probes = Vec::new();
    for (idx, row) in lines {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 6 {
            return Err(PlotError::Csv {
                line,
                detail: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let mut values = [0.0f64; 6];
        for (slot, raw) in values.iter_mut().zip(&fields) {
            *slot = raw.trim().parse::<f64>().map_err(|e| PlotError::Csv {
                line,
                detail: format!("\"{raw}\": {e}"),
            })?;
        }
        probes.push(SweepProbe {
            x: values[0],
            y: values[1],
            dx: values[2],
            dy: values[3],
            dz: values[4],
            dtheta: values[5],
        });
    }
    Ok(probes)
}

// ── SVG ─────────────────────────────────────────────────────────────────

/// Pixels per block length.
const CELL: f64 = 40.0;
const MARGIN: f64 = 40.0;
/// The longest planar arrow is drawn this many block lengths long.
const ARROW_SPAN: f64 = 1.8;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Canvas {
    svg: String,
    /// World extent in block lengths (the probe grid side).
    extent: f64,
}

impl Canvas {
    fn open(extent: f64, legend_lines: usize) -> Canvas {
        let side = 2.0 * MARGIN + extent * CELL;
        let height = side + legend_lines as f64 * 16.0;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {side} {height}\" \
             width=\"{side}\" height=\"{height}\">"
        );
        let _ = writeln!(
            svg,
            "<defs><marker id=\"tip\" viewBox=\"0 0 10 10\" refX=\"8\" refY=\"5\" \
             markerWidth=\"5\" markerHeight=\"5\" orient=\"auto-start-reverse\">\
             <path d=\"M 0 0 L 10 5 L 0 10 z\" fill=\"context-stroke\"/></marker></defs>"
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{0}\" height=\"{0}\" \
             fill=\"#fbfbfb\" stroke=\"#999\"/>",
            extent * CELL
        );
        let mut canvas = Canvas { svg, extent };
        for i in 1..extent as usize {
            let offset = MARGIN + i as f64 * CELL;
            let far = MARGIN + extent * CELL;
            let _ = writeln!(
                canvas.svg,
                "<line x1=\"{offset}\" y1=\"{MARGIN}\" x2=\"{offset}\" y2=\"{far}\" \
                 stroke=\"#eee\"/>"
            );
            let _ = writeln!(
                canvas.svg,
                "<line x1=\"{MARGIN}\" y1=\"{offset}\" x2=\"{far}\" y2=\"{offset}\" \
                 stroke=\"#eee\"/>"
            );
        }
        canvas
    }

    /// World coordinates (x east, y north) to pixel coordinates (y down).
    fn pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (MARGIN + x * CELL, MARGIN + (self.extent - y) * CELL)
    }

    fn field(&mut self, field: &SweepResult, scale: f64, color: &str) {
        for p in &field.probes {
            let (x1, y1) = self.pixel(p.x, p.y);
            let (x2, y2) = self.pixel(p.x + p.dx * scale, p.y + p.dy * scale);
            let _ = writeln!(
                self.svg,
                "<circle cx=\"{x1:.2}\" cy=\"{y1:.2}\" r=\"2\" fill=\"{color}\" \
                 opacity=\"0.6\"/>"
            );
            let _ = writeln!(
                self.svg,
                "<line class=\"arrow\" x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" \
                 y2=\"{y2:.2}\" stroke=\"{color}\" stroke-width=\"1.5\" \
                 marker-end=\"url(#tip)\"><title>dx={dx:.6} dy={dy:.6} dz={dz:.6} \
                 dtheta={dt:.6}</title></line>",
                dx = p.dx,
                dy = p.dy,
                dz = p.dz,
                dt = p.dtheta
            );
        }
    }

    fn legend(&mut self, index: usize, color: &str, text: &str) {
        let y = 2.0 * MARGIN + self.extent * CELL - 14.0 + index as f64 * 16.0;
        let _ = writeln!(
            self.svg,
            "<text x=\"{MARGIN}\" y=\"{y:.2}\" font-family=\"monospace\" \
             font-size=\"12\" fill=\"{color}\">{text}</text>"
        );
    }

    fn close(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn max_planar_magnitude<'a>(fields: impl IntoIterator<Item = &'a SweepResult>) -> f64 {
    fields
        .into_iter()
        .flat_map(|f| f.probes.iter())
        .map(|p| (p.dx * p.dx + p.dy * p.dy).sqrt())
        .fold(0.0, f64::max)
}

fn display_scale(max_magnitude: f64) -> f64 {
    if max_magnitude > 1e-12 {
        ARROW_SPAN / max_magnitude
    } else {
        1.0
    }
}

/// Render one operation's vector field. Every arrow shares the same
/// display scale, stated in the legend; raw values stay in the tooltips
/// and the CSV.
pub fn sweep_svg(result: &SweepResult) -> String {
    let scale = display_scale(max_planar_magnitude([result]));
    let mut canvas = Canvas::open(result.grid as f64, 2);
    canvas.field(result, scale, PALETTE[0]);
    canvas.legend(0, "#333", &format!("operation {}", result.op_index));
    canvas.legend(
        1,
        "#333",
        &format!("uniform arrow scale x{scale:.4} (raw magnitudes in CSV)"),
    );
    canvas.close()
}

/// Render the interpolation family as overlaid fields, one color per
/// alpha, all sharing a single display scale.
pub fn interpolation_svg(result: &InterpolationResult) -> String {
    let scale = display_scale(max_planar_magnitude(
        result.fields.iter().map(|(_, f)| f),
    ));
    let grid = result
        .fields
        .first()
        .map(|(_, f)| f.grid)
        .unwrap_or(1);
    let mut canvas = Canvas::open(grid as f64, result.fields.len() + 2);
    for (i, (alpha, field)) in result.fields.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        canvas.field(field, scale, color);
        canvas.legend(i, color, &format!("alpha={alpha:.3}"));
    }
    canvas.legend(
        result.fields.len(),
        "#333",
        &format!(
            "mix of operations {} (alpha=1) and {} (alpha=0)",
            result.k1, result.k2
        ),
    );
    canvas.legend(
        result.fields.len() + 1,
        "#333",
        &format!("uniform arrow scale x{scale:.4} (raw magnitudes in CSV)"),
    );
    canvas.close()
}

// ── Tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_field(grid: usize, tilt: f64) -> SweepResult {
        let probes = (0..grid * grid)
            .map(|n| {
                let x = (n % grid) as f64 + 0.5;
                let y = (n / grid) as f64 + 0.5;
                SweepProbe {
                    x,
                    y,
                    dx: 0.3 + tilt * x,
                    dy: -0.7 + 0.01 * y,
                    dz: 0.123456789,
                    dtheta: -0.25 + tilt,
                }
            })
            .collect();
        SweepResult {
            op_index: 3,
            grid,
            probes,
        }
    }

    #[test]
    fn csv_round_trips_exactly_as_printed() {
        let field = toy_field(4, 0.05);
        let text = sweep_csv(&field);
        let parsed = parse_sweep_csv(&text).unwrap();
        assert_eq!(parsed.len(), 16);
        let again = sweep_csv(&SweepResult {
            op_index: field.op_index,
            grid: field.grid,
            probes: parsed,
        });
        assert_eq!(again, text);
    }

    #[test]
    fn csv_uses_fixed_six_decimals() {
        let field = toy_field(2, 0.0);
        let text = sweep_csv(&field);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,y,dx,dy,dz,dtheta");
        let row = lines.next().unwrap();
        assert_eq!(row, "0.500000,0.500000,0.300000,-0.695000,0.123457,-0.250000");
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match parse_sweep_csv("bogus\n").unwrap_err() {
            PlotError::Csv { line, .. } => assert_eq!(line, 1),
        }
        let field = toy_field(2, 0.0);
        let bad = sweep_csv(&field).replace("0.300000", "zero");
        match parse_sweep_csv(&bad).unwrap_err() {
            PlotError::Csv { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("zero"));
            }
        }
        let short = "x,y,dx,dy,dz,dtheta\n1.0,2.0\n";
        match parse_sweep_csv(short).unwrap_err() {
            PlotError::Csv { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("6 fields"));
            }
        }
    }

    #[test]
    fn sweep_svg_draws_one_arrow_per_probe() {
        let field = toy_field(5, 0.02);
        let svg = sweep_svg(&field);
        assert_eq!(svg.matches("class=\"arrow\"").count(), 25);
        assert!(svg.contains("viewBox"));
        assert!(svg.contains("uniform arrow scale"));
        assert!(svg.contains("operation 3"));
        assert!(svg.contains("</svg>"));
    }

    #[test]
    fn interpolation_svg_overlays_every_field_with_legends() {
        let fields = vec![
            (0.0, toy_field(3, 0.0)),
            (0.5, toy_field(3, 0.1)),
            (1.0, toy_field(3, 0.2)),
        ];
        let result = InterpolationResult {
            k1: 7,
            k2: 2,
            fields,
            rotation_violations: 0,
            rotation_checked: 1,
        };
        let svg = interpolation_svg(&result);
        assert_eq!(svg.matches("class=\"arrow\"").count(), 27);
        assert_eq!(svg.matches(">alpha=").count(), 3);
        assert!(svg.contains("operations 7 (alpha=1) and 2 (alpha=0)"));
    }

    #[test]
    fn display_scale_fits_the_longest_arrow() {
        let field = toy_field(4, 0.05);
        let max = max_planar_magnitude([&field]);
        let scale = display_scale(max);
        assert!((max * scale - ARROW_SPAN).abs() < 1e-12);
        // A degenerate all-zero field falls back to unit scale.
        assert_eq!(display_scale(0.0), 1.0);
    }
}
