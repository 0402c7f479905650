use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::PredictionSet;
use crate::error::{arg_err, Error, Result};

pub const SCATTER_HEADER: &str = "dish_id,true_kcal,pred_kcal";

const SIDE: f64 = 520.0;
const MARGIN: f64 = 70.0;

/// One row per dish under [`SCATTER_HEADER`].
pub fn scatter_csv(ps: &PredictionSet) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCATTER_HEADER.split(',')).expect("in-memory write");
    for ((id, t), p) in ps.dish_ids.iter().zip(&ps.y_true).zip(&ps.y_pred) {
        w.write_record([id.as_str(), &t.to_string(), &p.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Smallest "round" value (1, 2 or 5 times a power of ten) that is at
/// least `x / 5`, used as the tick spacing.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// Shared axis range so that `y = x` is the plot diagonal.
fn axis_range(ps: &PredictionSet) -> (f64, f64, f64) {
    let all = ps.y_true.iter().chain(&ps.y_pred).copied();
    let (lo, hi) = all.fold((0.0f64, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let hi = if hi <= lo { lo + 1.0 } else { hi };
    let step = tick_step(hi - lo);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

/// Predicted-vs-true plot with the identity line, as standalone SVG.
pub fn scatter_svg(ps: &PredictionSet) -> String {
    let (lo, hi, step) = axis_range(ps);
    let plot = SIDE - 2.0 * MARGIN;
    let sx = |v: f64| MARGIN + (v - lo) / (hi - lo) * plot;
    let sy = |v: f64| SIDE - MARGIN - (v - lo) / (hi - lo) * plot;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIDE}" height="{SIDE}" viewBox="0 0 {SIDE} {SIDE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIDE}" height="{SIDE}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (sx(lo), sy(lo), sx(hi), sy(hi));
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1"><line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/><line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/></g>"#
    );
    let ticks = ((hi - lo) / step).round() as usize;
    for k in 0..=ticks {
        let v = lo + k as f64 * step;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{4}</text>"#,
            sx(v),
            y0,
            y0 + 5.0,
            y0 + 19.0,
            v
        );
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="black"/><text x="{3:.2}" y="{4:.2}" text-anchor="end">{5}</text>"#,
            x0,
            sy(v),
            x0 - 5.0,
            x0 - 8.0,
            sy(v) + 4.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">true calories (kcal)</text>"#,
        SIDE / 2.0,
        SIDE - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{0:.2}" text-anchor="middle" transform="rotate(-90 20 {0:.2})">predicted calories (kcal)</text>"#,
        SIDE / 2.0
    );
    let _ = writeln!(
        s,
        r##"<line id="identity" x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="#c0392b" stroke-dasharray="6 4"/>"##
    );
    let _ = writeln!(s, r##"<g fill="#2c6fbb" fill-opacity="0.6">"##);
    for (t, p) in ps.y_true.iter().zip(&ps.y_pred) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, sx(*t), sy(*p));
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Writes `<prefix>.csv` and `<prefix>.svg`; returns both paths.
pub fn scatter_emit(ps: &PredictionSet, path_prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    if ps.is_empty() {
        return Err(arg_err!("nothing to plot: the prediction set is empty"));
    }
    let with_ext = |ext: &str| {
        let mut name = path_prefix.as_os_str().to_os_string();
        name.push(ext);
        PathBuf::from(name)
    };
    let (csv_path, svg_path) = (with_ext(".csv"), with_ext(".svg"));
    fs::write(&csv_path, scatter_csv(ps)).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&svg_path, scatter_svg(ps)).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(tag: &str, name: &str) -> f64 {
        let key = format!(" {name}=\"");
        let start = tag.find(&key).unwrap() + key.len();
        let end = start + tag[start..].find('"').unwrap();
        tag[start..end].parse().unwrap()
    }

    fn one(t: f64, p: f64) -> PredictionSet {
        PredictionSet::new(vec!["a".into()], vec![t], vec![p]).unwrap()
    }

    #[test]
    fn exact_prediction_lies_on_identity_line() {
        let svg = scatter_svg(&one(100.0, 100.0));
        let line = svg.lines().find(|l| l.contains("id=\"identity\"")).unwrap();
        let circle = svg.lines().find(|l| l.starts_with("<circle")).unwrap();
        let (x1, y1, x2, y2) = (attr(line, "x1"), attr(line, "y1"), attr(line, "x2"), attr(line, "y2"));
        let (cx, cy) = (attr(circle, "cx"), attr(circle, "cy"));
        let cross = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1);
        assert!(cross.abs() / (x2 - x1).hypot(y2 - y1) < 0.01, "distance from line");
        assert!(svg.contains("(kcal)"));
    }

    #[test]
    fn off_line_prediction_is_not_on_it() {
        let svg = scatter_svg(&one(100.0, 300.0));
        let line = svg.lines().find(|l| l.contains("id=\"identity\"")).unwrap();
        let circle = svg.lines().find(|l| l.starts_with("<circle")).unwrap();
        let (x1, y1) = (attr(line, "x1"), attr(line, "y1"));
        let (cx, cy) = (attr(circle, "cx"), attr(circle, "cy"));
        // the identity line has slope −1 in screen space
        assert!(((cx - x1) + (cy - y1)).abs() > 10.0);
    }

    #[test]
    fn emit_writes_deterministic_files() {
        let ps = PredictionSet::new(
            vec!["x".into(), "y".into(), "z".into()],
            vec![120.0, 480.0, 950.5],
            vec![150.0, 410.25, 1000.0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c1, s1) = scatter_emit(&ps, &dir.path().join("a")).unwrap();
        let (c2, s2) = scatter_emit(&ps, &dir.path().join("b")).unwrap();
        let text = fs::read_to_string(&c1).unwrap();
        assert_eq!(text.lines().count(), ps.len() + 1);
        assert_eq!(text.lines().next(), Some(SCATTER_HEADER));
        assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
        assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
        let missing = dir.path().join("no/such/dir/p");
        assert!(matches!(scatter_emit(&ps, &missing), Err(Error::Io { .. })));
    }

    #[test]
    fn ticks_are_round() {
        assert_eq!(tick_step(1000.0), 200.0);
        assert_eq!(tick_step(3.0), 1.0);
        assert_eq!(tick_step(2400.0), 500.0);
    }
}
