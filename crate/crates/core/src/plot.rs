//! Minimal SVG emission for the CSV families a run produces. Purely
//! presentational: no analysis logic, deterministic bytes for identical
//! inputs.
//!
//! Line plots draw one polyline per series (per numeric column, or per
//! group for long-format files); scatter plots draw one circle per row,
//! colored by label. Each series is normalized to the plot box with its
//! data range printed in the legend.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("missing or empty input: {0}")]
    MissingInput(String),
    #[error("{file}: {message}")]
    BadCsv { file: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN: f64 = 60.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Csv, PlotError> {
    let name = path.display().to_string();
    if !path.exists() {
        return Err(PlotError::MissingInput(name));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) if !h.trim().is_empty() => h.split(',').map(|s| s.trim().to_string()).collect(),
        _ => return Err(PlotError::MissingInput(name)),
    };
    let rows: Vec<Vec<String>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
        .collect();
    if rows.is_empty() {
        return Err(PlotError::MissingInput(name));
    }
    Ok(Csv { header, rows })
}

fn col_index(csv: &Csv, name: &str, file: &str) -> Result<usize, PlotError> {
    csv.header.iter().position(|h| h == name).ok_or_else(|| PlotError::BadCsv {
        file: file.to_string(),
        message: format!("missing column {name}"),
    })
}

fn parse_float(s: &str) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    v.is_finite().then_some(v)
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"24\" font-family=\"monospace\" font-size=\"16\">{title}</text>\n\
         <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#444\"/>\n",
        x = MARGIN,
        w = WIDTH - 2.0 * MARGIN,
        h = HEIGHT - 2.0 * MARGIN,
    )
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

fn line_svg(title: &str, series: &[Series]) -> String {
    let mut out = svg_header(title);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    for (si, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let y_lo = s.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y_hi = s.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let color = PALETTE[si % PALETTE.len()];
        let mut path = String::new();
        for &(x, y) in &s.points {
            let px = MARGIN + scale(x, x_lo, x_hi) * plot_w;
            let py = HEIGHT - MARGIN - scale(y, y_lo, y_hi) * plot_h;
            let _ = write!(path, "{px:.2},{py:.2} ");
        }
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.trim_end()
        );
        let _ = writeln!(
            out,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{label} [{lo:.3e}, {hi:.3e}]</text>",
            x = MARGIN + 8.0,
            y = MARGIN + 16.0 + 14.0 * si as f64,
            label = s.label,
            lo = y_lo,
            hi = y_hi,
        );
    }
    out.push_str("</svg>\n");
    out
}

fn scatter_svg(title: &str, points: &[(f64, f64, usize)]) -> String {
    let mut out = svg_header(title);
    let x_lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    for &(x, y, label) in points {
        let px = MARGIN + scale(x, x_lo, x_hi) * plot_w;
        let py = HEIGHT - MARGIN - scale(y, y_lo, y_hi) * plot_h;
        let color = PALETTE[label % PALETTE.len()];
        let _ = writeln!(out, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"{color}\"/>");
    }
    out.push_str("</svg>\n");
    out
}

/// Series per numeric column against the first column (metrics.csv style).
fn plot_wide(csv: &Csv, file: &str, title: &str) -> Result<String, PlotError> {
    let x_col = 0usize;
    let mut series = Vec::new();
    for c in 1..csv.header.len() {
        let mut points = Vec::new();
        for row in &csv.rows {
            if let (Some(x), Some(y)) = (parse_float(&row[x_col]), row.get(c).and_then(|v| parse_float(v))) {
                points.push((x, y));
            }
        }
        if !points.is_empty() {
            series.push(Series { label: csv.header[c].clone(), points });
        }
    }
    if series.is_empty() {
        return Err(PlotError::BadCsv { file: file.into(), message: "no numeric series".into() });
    }
    Ok(line_svg(title, &series))
}

/// Long format: one polyline per distinct value of the group columns.
fn plot_grouped(
    csv: &Csv,
    file: &str,
    title: &str,
    group_cols: &[&str],
    x_col: &str,
    y_col: &str,
) -> Result<String, PlotError> {
    let gi: Vec<usize> =
        group_cols.iter().map(|g| col_index(csv, g, file)).collect::<Result<_, _>>()?;
    let xi = col_index(csv, x_col, file)?;
    let yi = col_index(csv, y_col, file)?;
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in &csv.rows {
        let key: Vec<&str> = gi.iter().map(|&i| row[i].as_str()).collect();
        let key = key.join("/");
        if let (Some(x), Some(y)) = (parse_float(&row[xi]), parse_float(&row[yi])) {
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, pts)) => pts.push((x, y)),
                None => groups.push((key, vec![(x, y)])),
            }
        }
    }
    if groups.is_empty() {
        return Err(PlotError::BadCsv { file: file.into(), message: "no plottable rows".into() });
    }
    let series: Vec<Series> =
        groups.into_iter().map(|(label, points)| Series { label, points }).collect();
    Ok(line_svg(title, &series))
}

fn plot_scatter(csv: &Csv, file: &str, title: &str) -> Result<String, PlotError> {
    let li = col_index(csv, "label", file)?;
    let xi = col_index(csv, "c1", file)?;
    let yi = col_index(csv, "c2", file)?;
    let mut points = Vec::new();
    for row in &csv.rows {
        if let (Some(x), Some(y), Ok(l)) =
            (parse_float(&row[xi]), parse_float(&row[yi]), row[li].parse::<usize>())
        {
            points.push((x, y, l));
        }
    }
    if points.is_empty() {
        return Err(PlotError::BadCsv { file: file.into(), message: "no plottable rows".into() });
    }
    Ok(scatter_svg(title, &points))
}

/// Render one CSV into SVG bytes, dispatching on its file name.
pub fn plot_file(path: &Path) -> Result<String, PlotError> {
    let csv = read_csv(path)?;
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let file = path.display().to_string();
    match name.as_str() {
        "metrics.csv" => plot_wide(&csv, &file, "training metrics"),
        "rpd.csv" => plot_grouped(&csv, &file, "rank probability distributions", &["layer", "class"], "bin_center", "density"),
        "rpd_grad.csv" => plot_grouped(&csv, &file, "final steepness by layer", &[], "layer", "steepness"),
        "rpd_grad_trace.csv" => {
            plot_grouped(&csv, &file, "steepness over training", &["layer"], "step", "steepness")
        }
        "basin.csv" => {
            plot_grouped(&csv, &file, "accuracy vs noise amplitude", &["space", "scope"], "amplitude", "accuracy")
        }
        "basin_trace.csv" => {
            plot_grouped(&csv, &file, "basin size over training", &["space", "scope"], "step", "size")
        }
        "prune.csv" => plot_grouped(&csv, &file, "pruning accuracy by start layer", &[], "from_layer", "accuracy"),
        "phase.csv" => plot_grouped(&csv, &file, "phase diagnostics", &[], "step", "rho"),
        "proj.csv" | "proj_test.csv" => plot_scatter(&csv, &file, "bottleneck projection"),
        _ => plot_wide(&csv, &file, &name),
    }
}

const PLOTTABLE: &[&str] = &[
    "metrics.csv",
    "rpd.csv",
    "rpd_grad.csv",
    "rpd_grad_trace.csv",
    "basin.csv",
    "basin_trace.csv",
    "prune.csv",
    "phase.csv",
    "proj.csv",
    "proj_test.csv",
];

/// Render every known CSV family present in `dir` to `<name>.svg`.
/// Errors if nothing was plottable, or if a present file is empty.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let mut written = Vec::new();
    for name in PLOTTABLE {
        let csv_path = dir.join(name);
        if !csv_path.exists() {
            continue;
        }
        let svg = plot_file(&csv_path)?;
        let out = dir.join(format!("{}.svg", name.trim_end_matches(".csv")));
        fs::write(&out, svg)?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(PlotError::MissingInput(format!("{}: no plottable CSV files", dir.display())));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("netdyn-plot-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn metrics_plot_has_one_polyline_per_column() {
        let dir = temp_dir("wide");
        let mut csv = String::from("step,a,b\n");
        for i in 0..100 {
            csv.push_str(&format!("{i},{},{}\n", i as f64 * 0.5, 100.0 - i as f64));
        }
        let path = dir.join("metrics.csv");
        fs::write(&path, csv).unwrap();
        let svg = plot_file(&path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn empty_csv_is_missing_input() {
        let dir = temp_dir("empty");
        let path = dir.join("metrics.csv");
        fs::write(&path, "").unwrap();
        assert!(matches!(plot_file(&path), Err(PlotError::MissingInput(_))));
        let header_only = dir.join("prune.csv");
        fs::write(&header_only, "from_layer,accuracy\n").unwrap();
        assert!(matches!(plot_file(&header_only), Err(PlotError::MissingInput(_))));
        assert!(matches!(plot_file(&dir.join("absent.csv")), Err(PlotError::MissingInput(_))));
    }

    #[test]
    fn identical_input_produces_identical_bytes() {
        let dir = temp_dir("det");
        let path = dir.join("prune.csv");
        fs::write(&path, "from_layer,accuracy\n2,0.91\n3,0.95\n4,0.96\n").unwrap();
        let a = plot_file(&path).unwrap();
        let b = plot_file(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn emit_plots_writes_svgs_for_present_families() {
        let dir = temp_dir("emit");
        fs::write(dir.join("metrics.csv"), "step,acc\n0,0.1\n1,0.9\n").unwrap();
        fs::write(dir.join("proj.csv"), "sample_id,label,c1,c2\n0,3,0.1,0.2\n1,7,-1.0,0.8\n").unwrap();
        let written = emit_plots(&dir).unwrap();
        assert_eq!(written.len(), 2);
        assert!(dir.join("metrics.svg").exists());
        assert!(dir.join("proj.svg").exists());
        // A directory with nothing plottable errors.
        let empty = temp_dir("emit-none");
        assert!(matches!(emit_plots(&empty), Err(PlotError::MissingInput(_))));
    }
}
