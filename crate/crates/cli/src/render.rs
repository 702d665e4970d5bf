//! Raster and vector renderings of heatmaps and trajectories.

use std::fmt::Write as _;

use fsaf_core::affordance_net::HeatmapStack;
use fsaf_core::tensorkit::{bilinear_resize, Tensor};
use fsaf_core::tracker::TrajectoryStep;
use fsaf_core::{Error, Result};

pub const FINGER_COLORS: [[u8; 3]; 5] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

/// Opacity of a fully saturated heatmap over the depth image.
const MAX_ALPHA: f64 = 0.75;

/// Row-major RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Grayscale depth (near is bright, missing is black) with each pixel tinted
/// by the finger of strongest response.
pub fn heatmap_overlay(depth: &Tensor, heatmaps: &HeatmapStack) -> Result<Rgb> {
    let (h, w) = match depth.dims() {
        [h, w] | [1, h, w] => (*h, *w),
        d => return Err(Error::shape(format!("depth must be [H, W], got {d:?}"))),
    };
    if heatmaps.fingers() > FINGER_COLORS.len() {
        return Err(Error::shape("at most five heatmap channels can be colored"));
    }
    let d = depth.data();
    let valid = || d.iter().copied().filter(|v| *v > 0.0 && v.is_finite());
    let lo = valid().fold(f32::INFINITY, f32::min);
    let hi = valid().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let heat = bilinear_resize(heatmaps.tensor(), (h, w))?;
    let plane = h * w;
    let pixels = (0..plane)
        .map(|i| {
            let gray = if d[i] > 0.0 && d[i].is_finite() {
                40.0 + 200.0 * (1.0 - (d[i] - lo) as f64 / span)
            } else {
                0.0
            };
            let (best, strength) = (0..heatmaps.fingers())
                .map(|k| (k, heat.data()[k * plane + i] as f64))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            let alpha = MAX_ALPHA * strength.clamp(0.0, 1.0);
            let c = FINGER_COLORS[best];
            [0, 1, 2].map(|ch| (gray * (1.0 - alpha) + c[ch] as f64 * alpha).round() as u8)
        })
        .collect();
    Ok(Rgb {
        height: h,
        width: w,
        pixels,
    })
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Same picture as an SVG, one rectangle per run of equal color.
pub fn overlay_svg(img: &Rgb) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" shape-rendering=\"crispEdges\">\n",
        w = img.width,
        h = img.height
    );
    for r in 0..img.height {
        let row = &img.pixels[r * img.width..(r + 1) * img.width];
        let mut c = 0;
        while c < img.width {
            let mut end = c + 1;
            while end < img.width && row[end] == row[c] {
                end += 1;
            }
            let _ = writeln!(
                s,
                "<rect x=\"{c}\" y=\"{r}\" width=\"{}\" height=\"1\" fill=\"{}\"/>",
                end - c,
                hex(row[c])
            );
            c = end;
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Per-finger residual norms over time, log-scaled, with phase boundaries.
pub fn trajectory_svg(steps: &[TrajectoryStep]) -> Result<String> {
    if steps.is_empty() {
        return Err(Error::invalid("trajectory has no steps"));
    }
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let fingers = steps[0].residuals.len();
    let all = steps.iter().flat_map(|s| s.residuals.iter().copied()).filter(|r| *r > 0.0);
    let lo = all.clone().fold(f64::INFINITY, f64::min).max(1e-6).log10().floor();
    let hi = all.fold(f64::NEG_INFINITY, f64::max).max(1e-5).log10().ceil().max(lo + 1.0);
    let n = steps.len().max(2) - 1;
    let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / n as f64;
    let y = |r: f64| {
        let v = r.max(10f64.powf(lo)).log10();
        h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo)
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for e in lo as i32..=hi as i32 {
        let yy = y(10f64.powi(e));
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{yy:.2}\" x2=\"{:.2}\" y2=\"{yy:.2}\" stroke=\"#dddddd\"/>\
             <text x=\"4\" y=\"{:.2}\" font-size=\"10\">1e{e}</text>",
            w - pad,
            yy + 3.0
        );
    }
    for (t, pair) in steps.windows(2).enumerate() {
        if pair[0].phase != pair[1].phase {
            let xx = x(t + 1);
            let _ = writeln!(
                s,
                "<line x1=\"{xx:.2}\" y1=\"{pad}\" x2=\"{xx:.2}\" y2=\"{:.2}\" stroke=\"#888888\" stroke-dasharray=\"4 3\"/>\
                 <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>",
                h - pad,
                xx + 3.0,
                pad - 4.0,
                pair[1].phase
            );
        }
    }
    for k in 0..fingers {
        let pts: Vec<String> = steps
            .iter()
            .enumerate()
            .filter_map(|(t, st)| st.residuals.get(k).map(|r| format!("{:.2},{:.2}", x(t), y(*r))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            hex(FINGER_COLORS[k % FINGER_COLORS.len()]),
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
