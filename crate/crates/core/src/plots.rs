//! Standalone SVG figures: scatter, histogram, line, quiver, and heatmap,
//! plus the full per-configuration figure inventory.
//!
//! Rendering is deliberately hand-rolled: the figure set is small and fixed,
//! and byte-stable output matters more than generality. Layout constants
//! (margins, fonts, tick policy) live at the top of this file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::diffusion::{LossCurve, TrajectoryBundle};
use crate::driftfield::{AlignmentCurve, DriftField, FieldKind};
use crate::trajmetrics::{DisplacementResult, VelocityCurve};
use crate::{Error, Point, Result};

const MARGIN_LEFT: f64 = 58.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 46.0;
const TICK_TARGET: usize = 5;
const FONT: &str = "font-family=\"sans-serif\"";

/// Category palette; label k uses entry k mod 10.
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Heatmap luminance ramp endpoints (light for low values, dark for high).
const RAMP_LIGHT: (f64, f64, f64) = (230.0, 238.0, 248.0);
const RAMP_DARK: (f64, f64, f64) = (8.0, 48.0, 107.0);

#[derive(Debug, Clone)]
pub struct LineSeries {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub label: String,
}

#[derive(Debug, Clone)]
pub enum PlotKind {
    Scatter {
        points: Vec<Point>,
        /// Optional per-point category labels for palette coloring.
        categories: Option<Vec<usize>>,
    },
    Histogram {
        values: Vec<f64>,
        bins: usize,
    },
    Line {
        series: Vec<LineSeries>,
    },
    Quiver {
        origins: Vec<Point>,
        vectors: Vec<Point>,
    },
    Heatmap {
        /// Row-major values, y as the outer loop (matching grid node order).
        values: Vec<f64>,
        nx: usize,
        ny: usize,
        extent: (f64, f64, f64, f64),
    },
}

#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: u32,
    pub height: u32,
}

impl PlotSpec {
    pub fn new(kind: PlotKind, title: impl Into<String>) -> Self {
        PlotSpec {
            kind,
            title: title.into(),
            x_label: String::new(),
            y_label: String::new(),
            width: 640,
            height: 480,
        }
    }

    pub fn labels(mut self, x: impl Into<String>, y: impl Into<String>) -> Self {
        self.x_label = x.into();
        self.y_label = y.into();
        self
    }
}

/// Affine map between data space and SVG screen space (y flipped).
#[derive(Debug, Clone, Copy)]
pub struct Transform {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

impl Transform {
    fn new(extent: (f64, f64, f64, f64), width: f64, height: f64) -> Self {
        let (mut x_min, mut x_max, mut y_min, mut y_max) = extent;
        // Degenerate ranges still need a drawable span.
        if x_max - x_min <= 0.0 {
            x_min -= 0.5;
            x_max += 0.5;
        }
        if y_max - y_min <= 0.0 {
            y_min -= 0.5;
            y_max += 0.5;
        }
        Transform {
            x_min,
            x_max,
            y_min,
            y_max,
            left: MARGIN_LEFT,
            right: width - MARGIN_RIGHT,
            top: MARGIN_TOP,
            bottom: height - MARGIN_BOTTOM,
        }
    }

    pub fn to_screen(&self, p: Point) -> (f64, f64) {
        let sx = self.left + (p.x - self.x_min) / (self.x_max - self.x_min) * (self.right - self.left);
        let sy = self.bottom - (p.y - self.y_min) / (self.y_max - self.y_min) * (self.bottom - self.top);
        (sx, sy)
    }

    pub fn from_screen(&self, sx: f64, sy: f64) -> Point {
        Point::new(
            self.x_min + (sx - self.left) / (self.right - self.left) * (self.x_max - self.x_min),
            self.y_min + (self.bottom - sy) / (self.bottom - self.top) * (self.y_max - self.y_min),
        )
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick positions at 1/2/5 x 10^k steps covering [min, max], and the decimal
/// places needed to print them exactly. Picks the step whose tick count lands
/// nearest `target` (ties go to the coarser step).
fn nice_ticks(min: f64, max: f64, target: usize) -> (Vec<f64>, usize) {
    let range = max - min;
    let k = range.log10().floor() as i32;
    let mut best: Option<(usize, f64, i32)> = None;
    for e in [k - 2, k - 1, k] {
        for m in [1.0, 2.0, 5.0] {
            let step = m * 10f64.powi(e);
            let first = ((min - step * 1e-9) / step).ceil();
            let last = ((max + step * 1e-9) / step).floor();
            let count = (last - first + 1.0).max(0.0) as usize;
            if count < 2 || count > 4 * target {
                continue;
            }
            let score = count.abs_diff(target);
            let better = match best {
                None => true,
                Some((bs, bstep, _)) => score < bs || (score == bs && step > bstep),
            };
            if better {
                best = Some((score, step, e));
            }
        }
    }
    let (_, step, e) = best.unwrap_or((0, 10f64.powi(k), k));
    let decimals = (-e).max(0) as usize;
    let mut ticks = Vec::new();
    let mut v = ((min - step * 1e-9) / step).ceil() * step;
    while v <= max + step * 1e-9 {
        // Snap near-zero ticks so labels do not read "-0".
        ticks.push(if v.abs() < step * 1e-9 { 0.0 } else { v });
        v += step;
    }
    (ticks, decimals)
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("plot payload contains non-finite values".into()));
    }
    Ok(())
}

fn point_extent(points: &[Point]) -> (f64, f64, f64, f64) {
    let mut e = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        e.0 = e.0.min(p.x);
        e.1 = e.1.max(p.x);
        e.2 = e.2.min(p.y);
        e.3 = e.3.max(p.y);
    }
    pad_extent(e)
}

fn pad_extent((x_min, x_max, y_min, y_max): (f64, f64, f64, f64)) -> (f64, f64, f64, f64) {
    let px = (x_max - x_min).max(1e-9) * 0.05;
    let py = (y_max - y_min).max(1e-9) * 0.05;
    (x_min - px, x_max + px, y_min - py, y_max + py)
}

fn ramp_color(u: f64) -> String {
    let lerp = |a: f64, b: f64| a + (b - a) * u;
    format!(
        "rgb({},{},{})",
        lerp(RAMP_LIGHT.0, RAMP_DARK.0).round() as u8,
        lerp(RAMP_LIGHT.1, RAMP_DARK.1).round() as u8,
        lerp(RAMP_LIGHT.2, RAMP_DARK.2).round() as u8
    )
}

fn validate(spec: &PlotSpec) -> Result<()> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidArgument("plot dimensions must be positive".into()));
    }
    match &spec.kind {
        PlotKind::Scatter { points, categories } => {
            if points.is_empty() {
                return Err(Error::InvalidArgument("scatter payload is empty".into()));
            }
            if let Some(c) = categories {
                if c.len() != points.len() {
                    return Err(Error::InvalidArgument("one category per scatter point required".into()));
                }
            }
            check_finite(points.iter().flat_map(|p| [&p.x, &p.y]))?;
        }
        PlotKind::Histogram { values, bins } => {
            if values.is_empty() || *bins == 0 {
                return Err(Error::InvalidArgument("histogram needs values and a positive bin count".into()));
            }
            check_finite(values)?;
        }
        PlotKind::Line { series } => {
            if series.is_empty() || series.iter().all(|s| s.xs.is_empty()) {
                return Err(Error::InvalidArgument("line plot has no points".into()));
            }
            for s in series {
                if s.xs.len() != s.ys.len() {
                    return Err(Error::InvalidArgument("line series x/y lengths differ".into()));
                }
                check_finite(s.xs.iter().chain(&s.ys))?;
            }
        }
        PlotKind::Quiver { origins, vectors } => {
            if origins.is_empty() || origins.len() != vectors.len() {
                return Err(Error::InvalidArgument("quiver needs matching non-empty origins and vectors".into()));
            }
            check_finite(origins.iter().chain(vectors).flat_map(|p| [&p.x, &p.y]))?;
        }
        PlotKind::Heatmap { values, nx, ny, extent } => {
            if values.len() != nx * ny || values.is_empty() {
                return Err(Error::InvalidArgument("heatmap values must fill nx x ny".into()));
            }
            if !(extent.0 < extent.1 && extent.2 < extent.3) {
                return Err(Error::InvalidArgument("heatmap extent must be ordered".into()));
            }
            check_finite(values)?;
        }
    }
    Ok(())
}

/// Render the spec to a standalone SVG document. Identical specs yield
/// byte-identical output.
pub fn render(spec: &PlotSpec) -> Result<String> {
    validate(spec)?;
    let w = spec.width as f64;
    let h = spec.height as f64;
    let extent = match &spec.kind {
        PlotKind::Scatter { points, .. } => point_extent(points),
        PlotKind::Histogram { values, bins } => {
            let (lo, hi) = value_range(values);
            let counts = bin_counts(values, *bins, lo, hi);
            let top = *counts.iter().max().unwrap() as f64;
            (lo, if hi > lo { hi } else { lo + 1.0 }, 0.0, top.max(1.0) * 1.05)
        }
        PlotKind::Line { series } => {
            let mut e = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for s in series {
                for (&x, &y) in s.xs.iter().zip(&s.ys) {
                    e.0 = e.0.min(x);
                    e.1 = e.1.max(x);
                    e.2 = e.2.min(y);
                    e.3 = e.3.max(y);
                }
            }
            pad_extent(e)
        }
        PlotKind::Quiver { origins, vectors } => {
            let tips: Vec<Point> = origins.iter().zip(vectors).map(|(o, v)| *o + *v).collect();
            let mut all = origins.clone();
            all.extend(tips);
            point_extent(&all)
        }
        PlotKind::Heatmap { extent, .. } => *extent,
    };
    let tf = Transform::new(extent, w, h);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">",
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(svg, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", spec.width, spec.height);

    draw_marks(&mut svg, spec, &tf);
    draw_frame(&mut svg, spec, &tf, w, h);

    svg.push_str("</svg>\n");
    Ok(svg)
}

fn value_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Uniform binning over [lo, hi]; the maximum value lands in the last bin.
fn bin_counts(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    let span = hi - lo;
    for &v in values {
        let idx = if span > 0.0 {
            (((v - lo) / span * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    counts
}

fn draw_marks(svg: &mut String, spec: &PlotSpec, tf: &Transform) {
    match &spec.kind {
        PlotKind::Scatter { points, categories } => {
            for (i, p) in points.iter().enumerate() {
                let (sx, sy) = tf.to_screen(*p);
                let color = match categories {
                    Some(c) => PALETTE[c[i] % PALETTE.len()],
                    None => PALETTE[0],
                };
                let _ = writeln!(
                    svg,
                    "<circle cx=\"{sx:.6}\" cy=\"{sy:.6}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.75\"/>"
                );
            }
        }
        PlotKind::Histogram { values, bins } => {
            let (lo, hi) = value_range(values);
            let counts = bin_counts(values, *bins, lo, hi);
            let span = if hi > lo { hi - lo } else { 1.0 };
            for (i, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let x0 = lo + span * i as f64 / *bins as f64;
                let x1 = lo + span * (i + 1) as f64 / *bins as f64;
                let (sx0, sy0) = tf.to_screen(Point::new(x0, 0.0));
                let (sx1, sy1) = tf.to_screen(Point::new(x1, c as f64));
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.6}\" y=\"{:.6}\" width=\"{:.6}\" height=\"{:.6}\" fill=\"{}\" stroke=\"white\" stroke-width=\"0.5\"/>",
                    sx0,
                    sy1,
                    sx1 - sx0,
                    sy0 - sy1,
                    PALETTE[0]
                );
            }
        }
        PlotKind::Line { series } => {
            for (k, s) in series.iter().enumerate() {
                if s.xs.is_empty() {
                    continue;
                }
                let color = PALETTE[k % PALETTE.len()];
                let pts: Vec<String> = s
                    .xs
                    .iter()
                    .zip(&s.ys)
                    .map(|(&x, &y)| {
                        let (sx, sy) = tf.to_screen(Point::new(x, y));
                        format!("{sx:.6},{sy:.6}")
                    })
                    .collect();
                let _ = writeln!(
                    svg,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"/>",
                    pts.join(" "),
                    color
                );
            }
        }
        PlotKind::Quiver { origins, vectors } => {
            for (o, v) in origins.iter().zip(vectors) {
                let (x1, y1) = tf.to_screen(*o);
                let (x2, y2) = tf.to_screen(*o + *v);
                let _ = writeln!(
                    svg,
                    "<line x1=\"{x1:.6}\" y1=\"{y1:.6}\" x2=\"{x2:.6}\" y2=\"{y2:.6}\" stroke=\"{}\" stroke-width=\"1\"/>",
                    PALETTE[0]
                );
                // Arrow head: small triangle at the tip, aligned to the
                // screen-space direction; skipped for zero-length arrows.
                let dx = x2 - x1;
                let dy = y2 - y1;
                let len = (dx * dx + dy * dy).sqrt();
                if len > 1e-9 {
                    let ux = dx / len;
                    let uy = dy / len;
                    let (px, py) = (-uy, ux);
                    let size = 3.5;
                    let bx = x2 - ux * size;
                    let by = y2 - uy * size;
                    let _ = writeln!(
                        svg,
                        "<polygon points=\"{x2:.6},{y2:.6} {:.6},{:.6} {:.6},{:.6}\" fill=\"{}\"/>",
                        bx + px * size * 0.5,
                        by + py * size * 0.5,
                        bx - px * size * 0.5,
                        by - py * size * 0.5,
                        PALETTE[0]
                    );
                }
            }
        }
        PlotKind::Heatmap { values, nx, ny, extent } => {
            let (lo, hi) = value_range(values);
            let cw = (extent.1 - extent.0) / *nx as f64;
            let ch = (extent.3 - extent.2) / *ny as f64;
            for row in 0..*ny {
                for col in 0..*nx {
                    let v = values[row * nx + col];
                    let u = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    let x0 = extent.0 + col as f64 * cw;
                    let y0 = extent.2 + row as f64 * ch;
                    let (sx0, sy0) = tf.to_screen(Point::new(x0, y0));
                    let (sx1, sy1) = tf.to_screen(Point::new(x0 + cw, y0 + ch));
                    let _ = writeln!(
                        svg,
                        "<rect x=\"{:.6}\" y=\"{:.6}\" width=\"{:.6}\" height=\"{:.6}\" fill=\"{}\"/>",
                        sx0,
                        sy1,
                        sx1 - sx0,
                        sy0 - sy1,
                        ramp_color(u)
                    );
                }
            }
        }
    }
}

fn draw_frame(svg: &mut String, spec: &PlotSpec, tf: &Transform, w: f64, h: f64) {
    let axis = "stroke=\"#333333\" stroke-width=\"1\"";
    let _ = writeln!(
        svg,
        "<line x1=\"{l:.6}\" y1=\"{b:.6}\" x2=\"{r:.6}\" y2=\"{b:.6}\" {axis}/>\n<line x1=\"{l:.6}\" y1=\"{t:.6}\" x2=\"{l:.6}\" y2=\"{b:.6}\" {axis}/>",
        l = tf.left,
        r = tf.right,
        t = tf.top,
        b = tf.bottom,
    );
    let (xticks, xdec) = nice_ticks(tf.x_min, tf.x_max, TICK_TARGET);
    for v in xticks {
        let (sx, _) = tf.to_screen(Point::new(v, tf.y_min));
        let _ = writeln!(
            svg,
            "<line x1=\"{sx:.6}\" y1=\"{b:.6}\" x2=\"{sx:.6}\" y2=\"{b2:.6}\" {axis}/>\n<text x=\"{sx:.6}\" y=\"{ty:.6}\" {FONT} font-size=\"11\" text-anchor=\"middle\">{label}</text>",
            b = tf.bottom,
            b2 = tf.bottom + 4.0,
            ty = tf.bottom + 16.0,
            label = format_args!("{v:.xdec$}"),
        );
    }
    let (yticks, ydec) = nice_ticks(tf.y_min, tf.y_max, TICK_TARGET);
    for v in yticks {
        let (_, sy) = tf.to_screen(Point::new(tf.x_min, v));
        let _ = writeln!(
            svg,
            "<line x1=\"{l2:.6}\" y1=\"{sy:.6}\" x2=\"{l:.6}\" y2=\"{sy:.6}\" {axis}/>\n<text x=\"{tx:.6}\" y=\"{typos:.6}\" {FONT} font-size=\"11\" text-anchor=\"end\">{label}</text>",
            l = tf.left,
            l2 = tf.left - 4.0,
            tx = tf.left - 7.0,
            typos = sy + 3.5,
            label = format_args!("{v:.ydec$}"),
        );
    }
    if !spec.title.is_empty() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.6}\" y=\"19\" {FONT} font-size=\"14\" text-anchor=\"middle\">{}</text>",
            (tf.left + tf.right) / 2.0,
            esc(&spec.title)
        );
    }
    if !spec.x_label.is_empty() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.6}\" y=\"{:.6}\" {FONT} font-size=\"12\" text-anchor=\"middle\">{}</text>",
            (tf.left + tf.right) / 2.0,
            h - 10.0,
            esc(&spec.x_label)
        );
    }
    if !spec.y_label.is_empty() {
        let cy = (tf.top + tf.bottom) / 2.0;
        let _ = writeln!(
            svg,
            "<text x=\"16\" y=\"{cy:.6}\" {FONT} font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy:.6})\">{}</text>",
            esc(&spec.y_label)
        );
    }
    let _ = w;
}

/// Everything the per-configuration figure set needs.
pub struct FigureInputs<'a> {
    pub dataset: &'a str,
    pub config: &'a str,
    pub bundle: &'a TrajectoryBundle,
    pub cluster_labels: &'a [usize],
    pub alignment: &'a AlignmentCurve,
    pub displacement: &'a DisplacementResult,
    pub velocity: &'a VelocityCurve,
    pub forward_fields: &'a [DriftField],
    pub backward_fields: &'a [DriftField],
    pub loss: &'a LossCurve,
}

/// Denoising steps at which formation snapshots are taken: k*T/5 rounded,
/// for k = 1..=5, deduplicated.
pub fn snapshot_steps(t_max: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (1..=5)
        .map(|k| ((k * t_max) as f64 / 5.0).round() as usize)
        .filter(|&s| s >= 1 && s <= t_max)
        .collect();
    steps.dedup();
    steps
}

/// Render the full figure set for one dataset/configuration pair under
/// `<out_root>/<dataset>/<config>/`. Returns the written paths in a fixed
/// order. Empty loss histories skip their figures (a zero-epoch run has
/// nothing to draw); all other inputs are mandatory and verified up front.
pub fn figure_bundle(inputs: &FigureInputs<'_>, out_root: &Path) -> Result<Vec<PathBuf>> {
    let mut missing = Vec::new();
    let recorded = inputs.bundle.n_steps() == inputs.bundle.t_max + 1 && inputs.bundle.n_samples() > 0;
    if !recorded {
        missing.push("recorded trajectory bundle");
    }
    if inputs.cluster_labels.len() != inputs.bundle.n_samples() {
        missing.push("cluster labels (one per sample)");
    }
    if inputs.alignment.mean_cs.is_empty() {
        missing.push("alignment curve");
    }
    if inputs.displacement.per_sample.is_empty() {
        missing.push("displacement result");
    }
    if inputs.velocity.per_step.is_empty() {
        missing.push("velocity curve");
    }
    if inputs.forward_fields.is_empty() {
        missing.push("forward drift fields");
    }
    if inputs.backward_fields.is_empty() {
        missing.push("backward drift fields");
    }
    if !missing.is_empty() {
        return Err(Error::MissingInput(format!("figure inputs missing: {}", missing.join(", "))));
    }

    let dir = out_root.join(inputs.dataset).join(inputs.config);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    fn emit_text(dir: &Path, written: &mut Vec<PathBuf>, name: String, svg: String) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    }
    let emit = |written: &mut Vec<PathBuf>, name: String, spec: &PlotSpec| -> Result<()> {
        emit_text(&dir, written, name, render(spec)?)
    };

    for field in inputs.backward_fields.iter().chain(inputs.forward_fields) {
        let kind_tag = match field.kind {
            FieldKind::Backward => "backward",
            FieldKind::Forward => "forward",
        };
        let g = field.grid;
        let spec = PlotSpec::new(
            PlotKind::Heatmap {
                values: field.magnitudes.clone(),
                nx: g.nx,
                ny: g.ny,
                extent: (g.x_min, g.x_max, g.y_min, g.y_max),
            },
            format!("{kind_tag} drift magnitude, t={}", field.t),
        )
        .labels("x", "y");
        emit(&mut written, format!("drift_magnitude_{kind_tag}_t{}.svg", field.t), &spec)?;
    }

    // Quiver of the backward field nearest the middle timestep.
    let mid_target = inputs.bundle.t_max / 2;
    let mid = inputs
        .backward_fields
        .iter()
        .min_by_key(|f| f.t.abs_diff(mid_target))
        .unwrap();
    let spec = PlotSpec::new(
        PlotKind::Quiver { origins: mid.grid.nodes(), vectors: mid.vectors.clone() },
        format!("backward drift, t={}", mid.t),
    )
    .labels("x", "y");
    emit(&mut written, format!("drift_quiver_t{}.svg", mid.t), &spec)?;

    let steps: Vec<f64> = (1..=inputs.alignment.mean_cs.len()).map(|s| s as f64).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = steps
        .iter()
        .zip(&inputs.alignment.mean_cs)
        .filter_map(|(&s, cs)| cs.map(|v| (s, v)))
        .unzip();
    let spec = PlotSpec::new(
        PlotKind::Line { series: vec![LineSeries { xs, ys, label: "mean cosine".into() }] },
        "drift alignment along trajectories",
    )
    .labels("denoising step", "mean cosine similarity");
    emit(&mut written, "alignment.svg".into(), &spec)?;

    let spec = PlotSpec::new(
        PlotKind::Histogram {
            values: inputs.displacement.per_sample.clone(),
            bins: inputs.displacement.histogram_bins,
        },
        "total displacement per sample",
    )
    .labels("path length", "count");
    emit(&mut written, "displacement_hist.svg".into(), &spec)?;

    let finals = inputs.bundle.final_points();
    let spec = PlotSpec::new(
        PlotKind::Scatter { points: finals, categories: Some(inputs.cluster_labels.to_vec()) },
        "final points by trajectory cluster",
    )
    .labels("x", "y");
    emit(&mut written, "clusters_final.svg".into(), &spec)?;

    // Trajectory overlay, subsampled to at most 200 polylines, colored by
    // cluster.
    let s_total = inputs.bundle.n_samples();
    let keep = 200usize.min(s_total);
    let series: Vec<LineSeries> = (0..keep)
        .map(|k| {
            let i = k * s_total / keep;
            let traj = &inputs.bundle.positions[i];
            LineSeries {
                xs: traj.iter().map(|p| p.x).collect(),
                ys: traj.iter().map(|p| p.y).collect(),
                label: format!("cluster {}", inputs.cluster_labels[i]),
            }
        })
        .collect();
    let mut spec = PlotSpec::new(PlotKind::Line { series }, "denoising trajectories");
    spec = spec.labels("x", "y");
    // Recolor polylines by cluster rather than by series index.
    let svg = render_trajectories(&spec, inputs, keep, s_total)?;
    emit_text(&dir, &mut written, "trajectories.svg".into(), svg)?;

    let spec = PlotSpec::new(
        PlotKind::Line {
            series: vec![LineSeries {
                xs: (0..inputs.velocity.per_step.len()).map(|i| i as f64).collect(),
                ys: inputs.velocity.per_step.clone(),
                label: "mean step displacement".into(),
            }],
        },
        "mean displacement per transition",
    )
    .labels("denoising step", "mean displacement");
    emit(&mut written, "velocity.svg".into(), &spec)?;

    for tau in snapshot_steps(inputs.bundle.t_max) {
        let spec = PlotSpec::new(
            PlotKind::Scatter { points: inputs.bundle.state_at(tau), categories: None },
            format!("formation after {tau} denoising steps"),
        )
        .labels("x", "y");
        emit(&mut written, format!("formation_t{tau}.svg"), &spec)?;
    }

    if !inputs.loss.mse_per_timestep.is_empty() {
        let spec = PlotSpec::new(
            PlotKind::Line {
                series: vec![LineSeries {
                    xs: (1..=inputs.loss.mse_per_timestep.len()).map(|t| t as f64).collect(),
                    ys: inputs.loss.mse_per_timestep.clone(),
                    label: "test MSE".into(),
                }],
            },
            "noise prediction error by timestep",
        )
        .labels("timestep", "MSE");
        emit(&mut written, "mse_per_timestep.svg".into(), &spec)?;
    }

    if !inputs.loss.epoch_loss.is_empty() {
        let spec = PlotSpec::new(
            PlotKind::Line {
                series: vec![LineSeries {
                    xs: (0..inputs.loss.epoch_loss.len()).map(|e| e as f64).collect(),
                    ys: inputs.loss.epoch_loss.clone(),
                    label: "train loss".into(),
                }],
            },
            "training loss by epoch",
        )
        .labels("epoch", "mean loss");
        emit(&mut written, "loss_epoch.svg".into(), &spec)?;
    }

    Ok(written)
}

/// The trajectory overlay needs per-polyline colors tied to cluster labels,
/// which the generic line renderer does not do; render it directly.
fn render_trajectories(
    spec: &PlotSpec,
    inputs: &FigureInputs<'_>,
    keep: usize,
    s_total: usize,
) -> Result<String> {
    validate(spec)?;
    let w = spec.width as f64;
    let h = spec.height as f64;
    let mut e = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..keep {
        let i = k * s_total / keep;
        for p in &inputs.bundle.positions[i] {
            e.0 = e.0.min(p.x);
            e.1 = e.1.max(p.x);
            e.2 = e.2.min(p.y);
            e.3 = e.3.max(p.y);
        }
    }
    let tf = Transform::new(pad_extent(e), w, h);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">",
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(svg, "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>", spec.width, spec.height);
    for k in 0..keep {
        let i = k * s_total / keep;
        let color = PALETTE[inputs.cluster_labels[i] % PALETTE.len()];
        let pts: Vec<String> = inputs.bundle.positions[i]
            .iter()
            .map(|p| {
                let (sx, sy) = tf.to_screen(*p);
                format!("{sx:.6},{sy:.6}")
            })
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"0.8\" stroke-opacity=\"0.55\"/>",
            pts.join(" "),
            color
        );
    }
    draw_frame(&mut svg, spec, &tf, w, h);
    svg.push_str("</svg>\n");
    Ok(svg)
}
