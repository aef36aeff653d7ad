//! Artifact output: `report.json`, CSV tables and self-contained SVG line
//! charts. Charts are described by [`ChartSpec`]s saved next to the tables,
//! so they can be regenerated from the CSV files alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DfpsError, Result};

/// A CSV table held as strings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(&self.header).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| DfpsError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect());
        }
        Ok(Table { header, rows })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> DfpsError {
    DfpsError::io(path, std::io::Error::other(e.to_string()))
}

/// Formats a number for CSV output; missing values are empty cells.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

/// Pretty JSON with a trailing newline. Field order follows the struct
/// definitions, so output is stable.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| DfpsError::io(path, e))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut s = String::new();
    for v in values {
        s.push_str(&serde_json::to_string(v)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| DfpsError::io(path, e))
}

/// How to draw one chart from a CSV table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    /// Output file name, e.g. `violations.svg`.
    pub file: String,
    /// Source CSV file name in the same directory.
    pub table: String,
    pub title: String,
    pub x: String,
    pub y: Vec<String>,
    /// Column whose values split rows into separate series.
    pub group: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
}

/// A named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Extract the series of `spec` from `table`; non-numeric cells are skipped.
pub fn series_of(spec: &ChartSpec, table: &Table) -> Result<Vec<Series>> {
    let col = |name: &str| {
        table
            .column(name)
            .ok_or_else(|| DfpsError::Config(format!("chart {}: no column `{name}` in {}", spec.file, spec.table)))
    };
    let xc = col(&spec.x)?;
    let gc = spec.group.as_deref().map(col).transpose()?;
    let mut out: Vec<Series> = Vec::new();
    for yname in &spec.y {
        let yc = col(yname)?;
        for row in &table.rows {
            let (Ok(x), Ok(y)) = (row[xc].parse::<f64>(), row[yc].parse::<f64>()) else {
                continue;
            };
            let name = match gc {
                Some(g) if spec.y.len() > 1 => format!("{} {}", row[g], yname),
                Some(g) => row[g].clone(),
                None => yname.clone(),
            };
            match out.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push((x, y)),
                None => out.push(Series { name, points: vec![(x, y)] }),
            }
        }
    }
    Ok(out)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64, log: bool) -> String {
    let v = if log { 10f64.powf(v) } else { v };
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Render a line chart as standalone SVG. Points that cannot be drawn on a
/// log axis are dropped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool, log_y: bool) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let drawable: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|s| {
            let pts = s
                .points
                .iter()
                .map(|&(x, y)| (tx(x), ty(y)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            (s.name.clone(), pts)
        })
        .collect();
    let all: Vec<(f64, f64)> = drawable.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    s.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        left + pw / 2.0,
        escape(title)
    ));
    s.push_str(&format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>\n"
    ));
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        s.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"#444\"/>\n",
            top + ph,
            top + ph + 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            top + ph + 16.0,
            tick_label(xv, log_x)
        ));
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{left}\" y2=\"{py:.2}\" stroke=\"#444\"/>\n",
            left - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            left - 6.0,
            py + 4.0,
            tick_label(yv, log_y)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    ));
    for (i, (name, pts)) in drawable.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if pts.len() > 1 {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                coords.join(" ")
            ));
        }
        for &(x, y) in pts {
            s.push_str(&format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>\n", sx(x), sy(y)));
        }
        let ly = top + 12.0 + 16.0 * i as f64;
        let lx = left + pw + 12.0;
        s.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 18.0
        ));
        s.push_str(&format!("<text x=\"{}\" y=\"{}\">{}</text>\n", lx + 22.0, ly + 4.0, escape(name)));
    }
    s.push_str("</svg>\n");
    s
}

/// Draw `spec` from the tables in `dir`.
pub fn render(dir: &Path, spec: &ChartSpec) -> Result<()> {
    let table = Table::read(&dir.join(&spec.table))?;
    let series = series_of(spec, &table)?;
    let y_label = if spec.y.len() == 1 { spec.y[0].as_str() } else { "value" };
    let svg = line_chart(&spec.title, &spec.x, y_label, &series, spec.log_x, spec.log_y);
    let path = dir.join(&spec.file);
    fs::write(&path, svg).map_err(|e| DfpsError::io(&path, e))
}

pub const CHARTS_FILE: &str = "charts.json";

/// Save the chart specs and render them.
pub fn write_charts(dir: &Path, specs: &[ChartSpec]) -> Result<()> {
    write_json(&dir.join(CHARTS_FILE), &specs)?;
    specs.iter().try_for_each(|s| render(dir, s))
}

/// Regenerate every chart listed in `dir/charts.json`; returns the count.
pub fn replot(dir: &Path) -> Result<usize> {
    let path = dir.join(CHARTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DfpsError::io(&path, e))?;
    let specs: Vec<ChartSpec> = serde_json::from_str(&text)?;
    specs.iter().try_for_each(|s| render(dir, s))?;
    Ok(specs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(group: Option<&str>) -> ChartSpec {
        ChartSpec {
            file: "c.svg".into(),
            table: "t.csv".into(),
            title: "t".into(),
            x: "x".into(),
            y: vec!["y".into()],
            group: group.map(str::to_string),
            log_x: false,
            log_y: true,
        }
    }

    fn table() -> Table {
        let mut t = Table::new(&["g", "x", "y"]);
        t.push(vec!["a".into(), "1".into(), "0.5".into()]);
        t.push(vec!["a".into(), "2".into(), "".into()]);
        t.push(vec!["b".into(), "1".into(), "2".into()]);
        t
    }

    #[test]
    fn series_are_grouped_and_blanks_skipped() {
        let s = series_of(&spec(Some("g")), &table()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].points, vec![(1.0, 0.5)]);
        assert_eq!(s[1].name, "b");
    }

    #[test]
    fn csv_round_trip_and_replot() {
        let dir = tempfile::tempdir().unwrap();
        table().write(&dir.path().join("t.csv")).unwrap();
        assert_eq!(Table::read(&dir.path().join("t.csv")).unwrap(), table());
        write_charts(dir.path(), &[spec(None)]).unwrap();
        let first = fs::read_to_string(dir.path().join("c.svg")).unwrap();
        assert!(first.starts_with("<svg") && first.contains("<polyline"));
        fs::remove_file(dir.path().join("c.svg")).unwrap();
        assert_eq!(replot(dir.path()).unwrap(), 1);
        assert_eq!(fs::read_to_string(dir.path().join("c.svg")).unwrap(), first);
    }

    #[test]
    fn log_axis_drops_nonpositive_points() {
        let s = [Series {
            name: "s".into(),
            points: vec![(1.0, 0.0), (2.0, 1.0), (3.0, 10.0)],
        }];
        let svg = line_chart("t", "x", "y", &s, false, true);
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn missing_value_cells_are_empty() {
        assert_eq!(num(f64::NAN), "");
        assert_eq!(opt(None), "");
        assert_eq!(num(0.5), "0.5");
    }
}
