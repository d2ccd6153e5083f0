//! Static SVG line charts. No rendering dependency: the chart is a string
//! of shapes, so output bytes depend only on the input numbers and fixed
//! formatting choices, which keeps figures diffable in tests.

pub struct Series {
    pub label: String,
    pub y: Vec<f64>,
}

pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x: Vec<f64>,
    pub series: Vec<Series>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum PlotError {
    /// No row has a finite x together with a finite y in any series.
    EmptyData,
}

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 76.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 46.0;
const MARGIN_BOTTOM: f64 = 58.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Nice tick spacing for roughly `target` intervals across `span`,
/// returned as an integer mantissa in {1, 2, 5} and a power of ten so
/// labels can be formed exactly.
fn nice_step(span: f64, target: usize) -> (i64, i32) {
    let raw = span / target as f64;
    let p = raw.log10().floor() as i32;
    let m = raw / 10f64.powi(p);
    // Nearest nice mantissa, not the ceiling: a span just past a boundary
    // should not halve its tick count.
    if m < 1.5 {
        (1, p)
    } else if m < 3.5 {
        (2, p)
    } else if m < 7.5 {
        (5, p)
    } else {
        (1, p + 1)
    }
}

/// Tick positions inside [lo, hi] as integer multiples of the step.
fn ticks(lo: f64, hi: f64, m: i64, p: i32) -> Vec<i64> {
    let step = m as f64 * 10f64.powi(p);
    let j0 = (lo / step - 1e-9).ceil() as i64;
    let j1 = (hi / step + 1e-9).floor() as i64;
    (j0..=j1).collect()
}

/// Exact decimal label of `j * m * 10^p`. The mantissa is an integer, so
/// every branch prints without float round-off artifacts.
fn tick_label(j: i64, m: i64, p: i32) -> String {
    let n = j * m;
    if (0..=4).contains(&p) {
        format!("{}", n as i128 * 10i128.pow(p as u32))
    } else if (-4..0).contains(&p) {
        format!("{:.prec$}", n as f64 * 10f64.powi(p), prec = (-p) as usize)
    } else {
        format!("{n}e{p}")
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut range: Option<(f64, f64)> = None;
    for v in values.filter(|v| v.is_finite()) {
        range = Some(match range {
            None => (v, v),
            Some((lo, hi)) => (lo.min(v), hi.max(v)),
        });
    }
    range
}

/// Widen a degenerate or tight range so the data does not sit on the
/// frame: 5% padding, or an absolute window for a constant series.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        let w = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - w, hi + w);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(spec: &PlotSpec) -> Result<String, PlotError> {
    let plottable = |k: usize| {
        spec.x[k].is_finite() && spec.series.iter().any(|s| s.y[k].is_finite())
    };
    let usable: Vec<usize> = (0..spec.x.len()).filter(|&k| plottable(k)).collect();
    let (x_lo, x_hi) = finite_range(usable.iter().map(|&k| spec.x[k])).ok_or(PlotError::EmptyData)?;
    let (y_lo, y_hi) = finite_range(
        spec.series.iter().flat_map(|s| usable.iter().map(move |&k| s.y[k])),
    )
    .ok_or(PlotError::EmptyData)?;
    let (x_lo, x_hi) = padded(x_lo, x_hi);
    let (y_lo, y_hi) = padded(y_lo, y_hi);

    let px = |x: f64| {
        MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    };
    let py = |y: f64| {
        HEIGHT - MARGIN_BOTTOM - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    };

    let mut svg = String::with_capacity(16 * 1024);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<g font-family=\"sans-serif\" font-size=\"12\">\n");
    svg.push_str(&format!(
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333\"/>\n",
        MARGIN_LEFT,
        MARGIN_TOP,
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    ));

    let (xm, xp) = nice_step(x_hi - x_lo, 6);
    for j in ticks(x_lo, x_hi, xm, xp) {
        let v = j as f64 * xm as f64 * 10f64.powi(xp);
        let x = px(v);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ccc\" stroke-dasharray=\"2,4\"/>\n",
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM
        ));
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#333\"/>\n",
            HEIGHT - MARGIN_BOTTOM,
            HEIGHT - MARGIN_BOTTOM + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_BOTTOM + 18.0,
            tick_label(j, xm, xp)
        ));
    }
    let (ym, yp) = nice_step(y_hi - y_lo, 6);
    for j in ticks(y_lo, y_hi, ym, yp) {
        let v = j as f64 * ym as f64 * 10f64.powi(yp);
        let y = py(v);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ccc\" stroke-dasharray=\"2,4\"/>\n",
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#333\"/>\n",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 9.0,
            y + 4.0,
            tick_label(j, ym, yp)
        ));
    }

    for (i, s) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for k in 0..spec.x.len() {
            if spec.x[k].is_finite() && s.y[k].is_finite() {
                points.push_str(&format!("{:.2},{:.2} ", px(spec.x[k]), py(s.y[k])));
            }
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.trim_end()
        ));
    }

    for (i, s) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_TOP + 14.0 + 17.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT - 150.0;
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            x + 22.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            x + 28.0,
            y + 4.0,
            xml_escape(&s.label)
        ));
    }

    if !spec.title.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
            xml_escape(&spec.title)
        ));
    }
    if !spec.x_label.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
            HEIGHT - 16.0,
            xml_escape(&spec.x_label)
        ));
    }
    if !spec.y_label.is_empty() {
        svg.push_str(&format!(
            "<text transform=\"translate(18,{:.2}) rotate(-90)\" text-anchor=\"middle\">{}</text>\n",
            (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0,
            xml_escape(&spec.y_label)
        ));
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(series: Vec<Series>) -> PlotSpec {
        let n = series.first().map_or(0, |s| s.y.len());
        PlotSpec {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x: (0..n).map(|k| k as f64).collect(),
            series,
        }
    }

    #[test]
    fn one_polyline_per_series() {
        let s = spec(vec![
            Series { label: "a".into(), y: vec![0.0, 1.0, 0.5] },
            Series { label: "b".into(), y: vec![1.0, -1.0, 2.0] },
        ]);
        let svg = render(&s).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">a</text>") && svg.contains(">b</text>"));
    }

    #[test]
    fn renders_are_byte_identical() {
        let s = spec(vec![Series { label: "a".into(), y: vec![0.25, 0.5, 0.125] }]);
        assert_eq!(render(&s).unwrap(), render(&s).unwrap());
    }

    #[test]
    fn all_nan_input_is_empty() {
        let s = spec(vec![Series { label: "a".into(), y: vec![f64::NAN, f64::NAN] }]);
        assert_eq!(render(&s).unwrap_err(), PlotError::EmptyData);
    }

    #[test]
    fn no_rows_is_empty() {
        let s = spec(vec![Series { label: "a".into(), y: vec![] }]);
        assert_eq!(render(&s).unwrap_err(), PlotError::EmptyData);
    }

    #[test]
    fn nan_samples_are_dropped_from_the_polyline() {
        let s = spec(vec![Series { label: "a".into(), y: vec![0.0, f64::NAN, 1.0] }]);
        let svg = render(&s).unwrap();
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split_whitespace().count(), 2);
    }

    #[test]
    fn tick_labels_are_exact_decimals() {
        assert_eq!(tick_label(3, 2, -3), "0.006");
        assert_eq!(tick_label(-7, 5, -1), "-3.5");
        assert_eq!(tick_label(4, 2, 2), "800");
        assert_eq!(tick_label(12, 1, 0), "12");
        assert_eq!(tick_label(3, 2, -7), "6e-7");
        assert_eq!(tick_label(9, 5, 6), "45e6");
    }

    #[test]
    fn nice_steps_cover_the_span_with_few_ticks() {
        for span in [0.013, 0.9, 1.0, 7.3, 42.0, 1234.0] {
            let (m, p) = nice_step(span, 6);
            let step = m as f64 * 10f64.powi(p);
            let n = (span / step).floor();
            assert!(n >= 3.0 && n <= 13.0, "span {span}: step {step}, {n} intervals");
        }
    }

    #[test]
    fn constant_series_still_renders() {
        let s = spec(vec![Series { label: "flat".into(), y: vec![2.0, 2.0, 2.0] }]);
        let svg = render(&s).unwrap();
        assert!(svg.contains("<polyline"));
    }
}
