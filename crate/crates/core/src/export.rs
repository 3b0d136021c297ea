//! Region artifacts: boundary CSV, volume JSON and SVG drawings.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::conformal::RegionBoundary;
use crate::error::{Error, Result};
use crate::geometry::VolumeEstimate;

/// Boundary points, one per row in sweep order, with columns `y1..yq`.
pub fn write_boundary_csv<W: Write>(writer: W, boundary: &RegionBoundary) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let q = boundary.points.ncols();
    w.write_record((1..=q).map(|j| format!("y{j}")))?;
    for r in boundary.points.rows() {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// A volume estimate with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub x: Vec<f64>,
    pub r: f64,
    pub alpha: f64,
    pub estimate: f64,
    pub stderr: f64,
    #[serde(rename = "B")]
    pub samples: usize,
    pub seed: u64,
}

impl VolumeRecord {
    pub fn new(x: &[f64], r: f64, alpha: f64, v: &VolumeEstimate, seed: u64) -> Self {
        VolumeRecord {
            x: x.to_vec(),
            r,
            alpha,
            estimate: v.estimate,
            stderr: v.std_error,
            samples: v.samples,
            seed,
        }
    }
}

/// One region outline to draw.
#[derive(Debug, Clone)]
pub struct SvgLayer<'a> {
    pub label: String,
    pub boundary: &'a RegionBoundary,
}

const SVG_SIZE: f64 = 480.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// An SVG with one closed path per layer over an optional point scatter.
/// The view box fits all points with a 10% margin on each side.
pub fn region_svg(layers: &[SvgLayer<'_>], scatter: Option<ArrayView2<f64>>) -> Result<String> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("nothing to draw".into()));
    }
    for l in layers {
        if l.boundary.points.ncols() != 2 {
            return Err(Error::shape("SVG output dimension", 2, l.boundary.points.ncols()));
        }
    }
    if let Some(s) = &scatter {
        if s.ncols() != 2 {
            return Err(Error::shape("scatter dimension", 2, s.ncols()));
        }
    }
    let all = layers
        .iter()
        .flat_map(|l| l.boundary.points.rows().into_iter().map(|r| (r[0], r[1])))
        .chain(scatter.iter().flat_map(|s| s.rows().into_iter().map(|r| (r[0], r[1]))).collect::<Vec<_>>())
        .filter(|(a, b)| a.is_finite() && b.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (a, b) in all {
        x0 = x0.min(a);
        x1 = x1.max(a);
        y0 = y0.min(b);
        y1 = y1.max(b);
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("SVG coordinates".into()));
    }
    let (w, h) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let (x0, y0, w, h) = (x0 - 0.1 * w, y0 - 0.1 * h, 1.2 * w, 1.2 * h);
    let px = |a: f64| (a - x0) / w * SVG_SIZE;
    let py = |b: f64| SVG_SIZE - (b - y0) / h * SVG_SIZE;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">"#,
        s = SVG_SIZE
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(s) = scatter {
        let _ = writeln!(out, r##"<g fill="#888888" fill-opacity="0.5">"##);
        for r in s.rows() {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, px(r[0]), py(r[1]));
        }
        let _ = writeln!(out, "</g>");
    }
    for (i, l) in layers.iter().enumerate() {
        let mut d = String::new();
        for (k, r) in l.boundary.points.rows().into_iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, px(r[0]), py(r[1]));
        }
        d.push('Z');
        let _ = writeln!(
            out,
            r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"><title>{}</title></path>"#,
            PALETTE[i % PALETTE.len()],
            l.label
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn square(scale: f64) -> RegionBoundary {
        RegionBoundary {
            x: vec![0.0],
            points: array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]] * scale,
            closed: true,
        }
    }

    #[test]
    fn one_closed_path_per_layer() {
        let a = square(1.0);
        let b = square(2.0);
        let c = square(3.0);
        let layers: Vec<SvgLayer> = [(&a, "50%"), (&b, "70%"), (&c, "90%")]
            .into_iter()
            .map(|(boundary, l)| SvgLayer {
                label: l.into(),
                boundary,
            })
            .collect();
        let svg = region_svg(&layers, Some(array![[0.5, 0.5]].view())).unwrap();
        assert_eq!(svg.matches("<path").count(), 3);
        assert_eq!(svg.matches("Z\"").count(), 3);
        assert_eq!(svg.matches("<circle").count(), 1);
    }

    #[test]
    fn boundary_csv_layout() {
        let mut buf = Vec::new();
        write_boundary_csv(&mut buf, &square(1.0)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "y1,y2");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "0,1");
    }

    #[test]
    fn volume_record_keys() {
        let v = VolumeEstimate {
            estimate: 3.0,
            std_error: 0.1,
            samples: 100,
        };
        let j = serde_json::to_value(VolumeRecord::new(&[1.0], 2.0, 0.1, &v, 7)).unwrap();
        for k in ["x", "r", "alpha", "estimate", "stderr", "B", "seed"] {
            assert!(j.get(k).is_some(), "{k}");
        }
    }
}
