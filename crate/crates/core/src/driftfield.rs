//! Forward-posterior and learned-backward drift fields on spatial grids, and
//! cosine alignment of drift directions along sampled trajectories.

use ndarray::Array2;

use crate::diffusion::{NoiseSchedule, TrajectoryBundle};
use crate::model::DenoiserModel;
use crate::{Error, Point, Result};

/// Regular 2D node grid. Nodes are ordered row-major with y as the outer
/// loop: index = row * nx + col, where col scans x and row scans y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument("grid needs at least 2 nodes per axis".into()));
        }
        if !(x_min < x_max && y_min < y_max) || ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid bounds must be finite and ordered, got x [{x_min}, {x_max}] y [{y_min}, {y_max}]"
            )));
        }
        Ok(Grid2D { x_min, x_max, y_min, y_max, nx, ny })
    }

    /// Grid spanning the bounding box of `points` expanded by `margin` on
    /// every side.
    pub fn covering(points: &[Point], margin: f64, nx: usize, ny: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateData("cannot cover an empty point set".into()));
        }
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for p in points {
            x_min = x_min.min(p.x);
            x_max = x_max.max(p.x);
            y_min = y_min.min(p.y);
            y_max = y_max.max(p.y);
        }
        Grid2D::new(x_min - margin, x_max + margin, y_min - margin, y_max + margin, nx, ny)
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn step_x(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn step_y(&self) -> f64 {
        (self.y_max - self.y_min) / (self.ny - 1) as f64
    }

    pub fn node(&self, idx: usize) -> Point {
        let col = idx % self.nx;
        let row = idx / self.nx;
        Point::new(
            self.x_min + col as f64 * self.step_x(),
            self.y_min + row as f64 * self.step_y(),
        )
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Forward,
    Backward,
}

/// Drift vectors (mean displacement of the process) sampled on a grid.
#[derive(Debug, Clone)]
pub struct DriftField {
    pub grid: Grid2D,
    pub t: usize,
    pub vectors: Vec<Point>,
    pub magnitudes: Vec<f64>,
    pub kind: FieldKind,
}

/// Mean cosine similarity between drift and direction-to-final, one entry per
/// reverse transition in denoising order (entry 0 = the step taken from pure
/// noise). `None` where every sample was excluded.
#[derive(Debug, Clone)]
pub struct AlignmentCurve {
    pub mean_cs: Vec<Option<f64>>,
    pub included: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// Posterior likelihood weights of each data point for a noisy state at
/// timestep `t`: softmax of -|x_t - sqrt(alpha_bar_t) x0|^2 / (2(1-alpha_bar_t)),
/// computed with max subtraction so early small-variance steps do not
/// underflow.
pub fn posterior_weights(
    node: Point,
    t: usize,
    data: &[Point],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_field_timestep(t, schedule)?;
    let alpha_bar_t = schedule.alpha_bar[t];
    let scale = alpha_bar_t.sqrt();
    let denom = 2.0 * (1.0 - alpha_bar_t);
    let exponents: Vec<f64> = data
        .iter()
        .map(|x0| {
            let dx = node.x - scale * x0.x;
            let dy = node.y - scale * x0.y;
            -(dx * dx + dy * dy) / denom
        })
        .collect();
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = exponents.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

fn check_field_timestep(t: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t < 1 || t > schedule.t_max {
        return Err(Error::InvalidArgument(format!(
            "drift timestep {t} outside 1..={}",
            schedule.t_max
        )));
    }
    if schedule.alpha_bar[t] >= 1.0 {
        return Err(Error::DegenerateData(format!(
            "schedule carries no noise at timestep {t}; posterior weights are undefined"
        )));
    }
    Ok(())
}

/// Expected denoising drift of the forward posterior at each grid node: the
/// kernel-weighted posterior mean over the data, minus the node itself.
///
/// The posterior mean is linear in x0, so the weighted sum collapses to one
/// evaluation at the weighted data centroid.
pub fn forward_drift(
    grid: &Grid2D,
    t: usize,
    data: &[Point],
    schedule: &NoiseSchedule,
) -> Result<DriftField> {
    if data.is_empty() {
        return Err(Error::DegenerateData("forward drift needs a non-empty data set".into()));
    }
    check_field_timestep(t, schedule)?;
    let alpha_t = schedule.alpha[t - 1];
    let alpha_bar_t = schedule.alpha_bar[t];
    let alpha_bar_prev = schedule.alpha_bar[t - 1];
    let denom = 1.0 - alpha_bar_t;
    let c_node = alpha_t.sqrt() * (1.0 - alpha_bar_prev) / denom;
    let c_data = alpha_bar_prev.sqrt() * (1.0 - alpha_t) / denom;

    let mut vectors = Vec::with_capacity(grid.n_nodes());
    let mut magnitudes = Vec::with_capacity(grid.n_nodes());
    for idx in 0..grid.n_nodes() {
        let node = grid.node(idx);
        let weights = posterior_weights(node, t, data, schedule)?;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for (w, x0) in weights.iter().zip(data) {
            cx += w * x0.x;
            cy += w * x0.y;
        }
        let mean = Point::new(c_node * node.x + c_data * cx, c_node * node.y + c_data * cy);
        let v = mean - node;
        magnitudes.push(v.norm());
        vectors.push(v);
    }
    Ok(DriftField { grid: *grid, t, vectors, magnitudes, kind: FieldKind::Forward })
}

/// Drift of the learned reverse process at each grid node: the reverse-step
/// mean under the model's noise prediction, minus the node.
pub fn backward_drift(
    grid: &Grid2D,
    t: usize,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<DriftField> {
    if t < 1 || t > schedule.t_max {
        return Err(Error::InvalidArgument(format!(
            "drift timestep {t} outside 1..={}",
            schedule.t_max
        )));
    }
    let n = grid.n_nodes();
    let mut xs = Array2::zeros((n, 2));
    for idx in 0..n {
        let node = grid.node(idx);
        xs[(idx, 0)] = node.x;
        xs[(idx, 1)] = node.y;
    }
    let ts = vec![t; n];
    let eps_hat = model.predict_noise(xs.view(), &ts, schedule.t_max);
    let mut vectors = Vec::with_capacity(n);
    let mut magnitudes = Vec::with_capacity(n);
    for idx in 0..n {
        let node = grid.node(idx);
        let mean = schedule.reverse_mean(node, Point::new(eps_hat[(idx, 0)], eps_hat[(idx, 1)]), t);
        let v = mean - node;
        magnitudes.push(v.norm());
        vectors.push(v);
    }
    Ok(DriftField { grid: *grid, t, vectors, magnitudes, kind: FieldKind::Backward })
}

/// Bilinear interpolation of the field's vectors at `p`; positions outside
/// the grid clamp to the boundary.
pub fn interpolate_field(field: &DriftField, p: Point) -> Point {
    let grid = &field.grid;
    let fx = ((p.x - grid.x_min) / grid.step_x()).clamp(0.0, (grid.nx - 1) as f64);
    let fy = ((p.y - grid.y_min) / grid.step_y()).clamp(0.0, (grid.ny - 1) as f64);
    let col = (fx.floor() as usize).min(grid.nx - 2);
    let row = (fy.floor() as usize).min(grid.ny - 2);
    let ux = fx - col as f64;
    let uy = fy - row as f64;
    let at = |c: usize, r: usize| field.vectors[r * grid.nx + c];
    let v00 = at(col, row);
    let v10 = at(col + 1, row);
    let v01 = at(col, row + 1);
    let v11 = at(col + 1, row + 1);
    let lerp = |a: f64, b: f64, u: f64| a + (b - a) * u;
    Point::new(
        lerp(lerp(v00.x, v10.x, ux), lerp(v01.x, v11.x, ux), uy),
        lerp(lerp(v00.y, v10.y, ux), lerp(v01.y, v11.y, ux), uy),
    )
}

/// Cosine similarity between the interpolated backward drift at each recorded
/// state and the direction from that state to the sample's own final point.
///
/// `fields[i]` must be the backward field for the i-th reverse transition,
/// i.e. diffusion timestep `t_max - i`. Samples whose drift or direction
/// vector is shorter than 1e-12 are excluded and counted, never zero-filled.
pub fn drift_alignment(bundle: &TrajectoryBundle, fields: &[DriftField]) -> Result<AlignmentCurve> {
    let steps = bundle.n_steps();
    if steps < 2 {
        return Err(Error::InvalidArgument("bundle must record full trajectories".into()));
    }
    let transitions = steps - 1;
    if fields.len() != transitions {
        return Err(Error::InvalidArgument(format!(
            "need one field per transition: {} transitions but {} fields",
            transitions,
            fields.len()
        )));
    }
    for (i, field) in fields.iter().enumerate() {
        let expect = bundle.t_max - i;
        if field.t != expect {
            return Err(Error::InvalidArgument(format!(
                "field {i} is for timestep {} but transition {i} denoises timestep {expect}",
                field.t
            )));
        }
    }
    let finals = bundle.final_points();
    let mut curve = AlignmentCurve {
        mean_cs: Vec::with_capacity(transitions),
        included: Vec::with_capacity(transitions),
        excluded: Vec::with_capacity(transitions),
    };
    for (i, field) in fields.iter().enumerate() {
        let mut sum = 0.0;
        let mut included = 0usize;
        let mut excluded = 0usize;
        for (sample, traj) in bundle.positions.iter().enumerate() {
            let cur = traj[i];
            let a = interpolate_field(field, cur);
            let b = finals[sample] - cur;
            let na = a.norm();
            let nb = b.norm();
            if na < 1e-12 || nb < 1e-12 {
                excluded += 1;
                continue;
            }
            sum += (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
            included += 1;
        }
        curve.mean_cs.push(if included > 0 { Some(sum / included as f64) } else { None });
        curve.included.push(included);
        curve.excluded.push(excluded);
    }
    Ok(curve)
}
