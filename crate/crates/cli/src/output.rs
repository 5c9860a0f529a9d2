//! Output directory handling: CSV tables with a metadata comment row and
//! hand-drawn SVG line charts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::CliError;

/// Full-precision, round-trippable float formatting.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub struct Output {
    dir: PathBuf,
    meta: String,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn create(dir: &Path, sha256: &str, seed: u64, tolerances: &[(&str, f64)]) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        let tol = tolerances
            .iter()
            .map(|(k, v)| format!("{k}:{}", num(*v)))
            .collect::<Vec<_>>()
            .join("|");
        let meta = format!(
            "# scenario_sha256={sha256}; rlf-core={}; rlf-lab={}; seed={seed}; tolerances={tol}",
            rlf_core::VERSION,
            env!("CARGO_PKG_VERSION"),
        );
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn open(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(rlf_core::Error::from)?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    /// Writes the metadata row and hands the file to `body`.
    pub fn csv_with(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> rlf_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut w = self.open(name)?;
        writeln!(w, "{}", self.meta).map_err(rlf_core::Error::from)?;
        body(&mut w)?;
        w.flush().map_err(rlf_core::Error::from)?;
        Ok(())
    }

    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        self.csv_with(name, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(header)?;
            for r in rows {
                c.write_record(r)?;
            }
            c.flush()?;
            Ok(())
        })
    }

    pub fn svg(&mut self, name: &str, chart: &Chart) -> Result<(), CliError> {
        let mut w = self.open(name)?;
        w.write_all(chart.render().as_bytes()).map_err(rlf_core::Error::from)?;
        w.flush().map_err(rlf_core::Error::from)?;
        Ok(())
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            series: Vec::new(),
        }
    }

    pub fn log_x(mut self) -> Self {
        self.log_x = true;
        self
    }

    pub fn line(mut self, label: &str, points: Vec<(f64, f64)>) -> Self {
        self.series.push(Series {
            label: label.into(),
            points,
        });
        self
    }

    fn fx(&self, x: f64) -> f64 {
        if self.log_x {
            x.log10()
        } else {
            x
        }
    }

    pub fn render(&self) -> String {
        let pts = || {
            self.series
                .iter()
                .flat_map(|s| s.points.iter())
                .filter(|(x, y)| self.fx(*x).is_finite() && y.is_finite())
        };
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts() {
            let x = self.fx(x);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (self.fx(x) - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            LEFT + pw / 2.0,
            escape(&self.title)
        ));
        s.push_str(&format!(
            "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"
        ));
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let px = LEFT + f * pw;
            let py = TOP + (1.0 - f) * ph;
            let xl = if self.log_x { 10f64.powf(xv) } else { xv };
            s.push_str(&format!(
                "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 20.0,
                tick(xl)
            ));
            s.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{LEFT}\" y2=\"{py:.2}\" stroke=\"black\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
                LEFT - 5.0,
                LEFT - 8.0,
                py + 4.0,
                tick(yv)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            LEFT + pw / 2.0,
            H - 15.0,
            escape(&self.x_label)
        ));
        s.push_str(&format!(
            "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">{}</text>\n",
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        ));
        for (k, series) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|(x, y)| self.fx(*x).is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                path.join(" ")
            ));
            for p in &path {
                let (cx, cy) = p.split_once(',').unwrap();
                s.push_str(&format!("<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"{color}\"/>\n"));
            }
            let ly = TOP + 15.0 + 18.0 * k as f64;
            s.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
                W - RIGHT + 10.0,
                W - RIGHT + 30.0,
                W - RIGHT + 35.0,
                ly + 4.0,
                escape(&series.label)
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e-2 && v.abs() < 1e4 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_well_formed() {
        let c = Chart::new("a < b", "x", "y")
            .log_x()
            .line("one", vec![(0.1, 1.0), (0.05, 0.5), (0.025, 0.25)])
            .line("flat", vec![(0.1, 0.3), (0.025, 0.3)]);
        let a = c.render();
        assert_eq!(a, c.render());
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("a &lt; b"));
    }

    #[test]
    fn empty_chart_renders() {
        let c = Chart::new("empty", "x", "y");
        assert!(c.render().contains("</svg>"));
    }
}
