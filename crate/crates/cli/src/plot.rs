//! Static plot emission: SVG line charts for metrics/sweeps and PNG heatmaps
//! for connectivity matrices.

use std::path::Path;

use rpnt_core::error::{Error, Result};
use rpnt_core::tensor::Tensor;

/// Simple line chart; NaN points are skipped. `series` pairs a label with
/// (x, y) points.
pub fn line_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (62.0, 18.0, 34.0, 46.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, p)| p.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Err(Error::Usage("nothing to plot".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.06;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb
    ));
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n\
             <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.2}</text>\n",
            ml - 6.0,
            sy(yv) + 4.0,
            yv,
            sy(yv),
            w - mr,
            sy(yv),
            sx(xv),
            h - mb + 16.0,
            xv
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
        (ml + w - mr) / 2.0,
        h - 10.0,
        xml_escape(x_label),
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    ));
    for (si, (label, points)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let path_pts: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        if path_pts.is_empty() {
            continue;
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            path_pts.join(" ")
        ));
        for p in &path_pts {
            let xy: Vec<&str> = p.split(',').collect();
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                xy[0], xy[1]
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            w - mr - 150.0,
            mt + 16.0 * si as f64 + 4.0,
            xml_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue-white-red colormap over [lo, hi].
fn colormap(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t) as u8;
    if t < 0.5 {
        let u = t * 2.0;
        [
            (59.0 + (255.0 - 59.0) * u) as u8,
            (76.0 + (255.0 - 76.0) * u) as u8,
            (192.0 + (255.0 - 192.0) * u) as u8,
        ]
    } else {
        let u = (t - 0.5) * 2.0;
        let _ = lerp;
        [
            (255.0 - (255.0 - 180.0) * u) as u8,
            (255.0 - (255.0 - 4.0) * u) as u8,
            (255.0 - (255.0 - 38.0) * u) as u8,
        ]
    }
}

/// Render one `[S, S]` matrix as an upscaled PNG heatmap.
pub fn heatmap_png(path: &Path, matrix: &Tensor, cell: u32) -> Result<()> {
    if matrix.shape.len() != 2 {
        return Err(Error::Shape(format!("heatmap expects [S,S], got {:?}", matrix.shape)));
    }
    let (rows, cols) = (matrix.shape[0] as u32, matrix.shape[1] as u32);
    let lo = matrix.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = matrix.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut img = image::RgbImage::new(cols * cell, rows * cell);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let r = (y / cell) as usize;
        let c = (x / cell) as usize;
        let v = matrix.data[r * matrix.shape[1] + c];
        *px = image::Rgb(colormap(v, lo, hi));
    }
    img.save(path).map_err(|e| Error::Data(format!("writing {}: {}", path.display(), e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("t.svg");
        line_svg(
            &svg,
            "loss",
            "epoch",
            "value",
            &[("train".into(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.4)])],
        )
        .unwrap();
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.contains("<polyline"));

        let png = dir.path().join("t.png");
        let m = Tensor::new(vec![2, 2], vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        heatmap_png(&png, &m, 8).unwrap();
        assert!(png.exists());
    }
}
