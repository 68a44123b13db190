//! Win-rate learning curves as a standalone SVG document.

use std::fmt::Write as _;
use std::path::Path;

use ices_core::stats::median;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, PartialEq)]
pub enum PlotError {
    Io(String),
    MissingColumn { file: String, column: String },
    Malformed { file: String, line: u64, message: String },
    Empty,
}

impl std::fmt::Display for PlotError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlotError::Io(m) => write!(f, "{m}"),
            PlotError::MissingColumn { file, column } => write!(f, "{file}: missing column `{column}`"),
            PlotError::Malformed { file, line, message } => write!(f, "{file}: line {line}: {message}"),
            PlotError::Empty => write!(f, "no metrics files given"),
        }
    }
}

/// Reads `step` and `test_win_rate` from a metrics CSV.
pub fn read_series(path: &Path) -> Result<Series, PlotError> {
    let text = std::fs::read_to_string(path).map_err(|e| PlotError::Io(format!("{}: {e}", path.display())))?;
    parse_series(&path.display().to_string(), &text)
}

pub fn parse_series(label: &str, text: &str) -> Result<Series, PlotError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| PlotError::Malformed { file: label.into(), line: 1, message: e.to_string() })?
        .clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| PlotError::MissingColumn { file: label.into(), column: name.into() })
    };
    let (step_col, win_col) = (column("step")?, column("test_win_rate")?);
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| PlotError::Malformed {
            file: label.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| -> Result<f64, PlotError> {
            let raw = record.get(k).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| PlotError::Malformed {
                file: label.into(),
                line,
                message: format!("`{raw}` is not a number"),
            })
        };
        points.push((field(step_col)?, field(win_col)?));
    }
    let label = Path::new(label)
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| label.to_string());
    Ok(Series { label, points })
}

/// Point-wise median over the steps shared by every series.
pub fn median_series(series: &[Series]) -> Series {
    let Some(first) = series.first() else {
        return Series { label: "median".into(), points: Vec::new() };
    };
    let points = first
        .points
        .iter()
        .filter_map(|(step, _)| {
            let ys: Option<Vec<f64>> = series
                .iter()
                .map(|s| s.points.iter().find(|(x, _)| x == step).map(|(_, y)| *y))
                .collect();
            ys.map(|ys| (*step, median(&ys)))
        })
        .collect();
    Series { label: "median".into(), points }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Renders the series (plus a median line when there are several).
pub fn render_svg(series: &[Series]) -> Result<String, PlotError> {
    if series.is_empty() {
        return Err(PlotError::Empty);
    }
    let mut all: Vec<Series> = series.to_vec();
    if series.len() > 1 {
        all.push(median_series(series));
    }
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 180.0, 20.0, 50.0);
    let x_max = all
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let px = |x: f64| left + x / x_max * (w - left - right);
    let py = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * (h - top - bottom);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{y:.2}</text>"#, left - 6.0, py(y) + 4.0);
        let x = x_max * k as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{x:.0}</text>"#, px(x), h - bottom + 16.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">step</text>"#, (left + w - right) / 2.0, h - 12.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">test win rate</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    );
    for (k, s) in all.iter().enumerate() {
        let is_median = series.len() > 1 && k == all.len() - 1;
        let color = if is_median { "black" } else { PALETTE[k % PALETTE.len()] };
        let width = if is_median { 2.5 } else { 1.5 };
        let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#, pts.join(" "));
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="{width}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "step,episodes,test_return_mean,test_win_rate,loss_td,loss_elbo,loss_actor,loss_value,mean_r_int,actor_entropy,alpha,epsilon";

    #[test]
    fn two_rows_make_one_polyline() {
        let text = format!("{HEADER}\n0,0,0,0,nan,nan,nan,nan,nan,nan,0.2,1\n100,3,1,0.5,1,1,1,1,1,1,0.1,0.5\n");
        let s = parse_series("run/metrics.csv", &text).unwrap();
        assert_eq!(s.points, vec![(0.0, 0.0), (100.0, 0.5)]);
        let svg = render_svg(&[s]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn missing_column_is_named() {
        let err = parse_series("m.csv", "step,episodes\n1,2\n").unwrap_err();
        assert_eq!(err, PlotError::MissingColumn { file: "m.csv".into(), column: "test_win_rate".into() });
    }

    #[test]
    fn bad_row_reports_its_line() {
        let text = format!("{HEADER}\n0,0,0,0,0,0,0,0,0,0,0,0\n5,1,0,oops,0,0,0,0,0,0,0,0\n");
        match parse_series("m.csv", &text).unwrap_err() {
            PlotError::Malformed { line, .. } => assert_eq!(line, 3),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn several_series_get_a_median() {
        let series: Vec<Series> = (0..5)
            .map(|k| Series { label: format!("s{k}"), points: vec![(0.0, 0.0), (10.0, k as f64 / 4.0)] })
            .collect();
        let m = median_series(&series);
        assert_eq!(m.points, vec![(0.0, 0.0), (10.0, 0.5)]);
        let svg = render_svg(&series).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 6);
    }
}
