//! Python bindings for the injected core library.
//!
//! The surface mirrors the library one to one: free functions for dataset
//! handling and trajectory metrics, plus a `Denoiser` class that owns a model
//! together with the noise schedule it was configured for. Points cross the
//! boundary as `(x, y)` tuples and trajectories as lists of point lists
//! ordered from initial noise to final output.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use injected_core::cli::{ConfigName, ALPHA_MAX};
use injected_core::dataset::{self, DataSplit, NormStats, PointCloud, RawPointCloud};
use injected_core::diffusion::{self, NoiseSchedule, TrainConfig, TrajectoryBundle};
use injected_core::driftfield::{self, DriftField, Grid2D};
use injected_core::model::{load_model, save_model, DenoiserModel, EmbeddingConfig};
use injected_core::trajmetrics;
use injected_core::{derive_seed as derive_seed_impl, stages, Error, Point};

type Xy = (f64, f64);
/// Per-axis statistics `(mean_x, mean_y, std_x, std_y)`.
type AxisStats = (f64, f64, f64, f64);
/// Alignment output `(per_step_cosine, included_counts, excluded_counts)`.
type AlignmentParts = (Vec<Option<f64>>, Vec<usize>, Vec<usize>);
type FieldRow = (f64, f64, f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    match &e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::MissingInput(_) => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn val_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_points(points: Vec<Xy>) -> Vec<Point> {
    points.into_iter().map(|(x, y)| Point::new(x, y)).collect()
}

fn from_points(points: &[Point]) -> Vec<Xy> {
    points.iter().map(|p| (p.x, p.y)).collect()
}

/// Wrap already-normalized coordinates so library operations can consume them.
fn unit_cloud(points: Vec<Xy>) -> PointCloud {
    PointCloud {
        points: to_points(points),
        stats: NormStats { mean_x: 0.0, mean_y: 0.0, std_x: 1.0, std_y: 1.0 },
    }
}

fn to_bundle(trajectories: Vec<Vec<Xy>>) -> PyResult<TrajectoryBundle> {
    let steps = trajectories.first().map_or(0, Vec::len);
    if steps < 2 || trajectories.iter().any(|t| t.len() != steps) {
        return Err(PyValueError::new_err(
            "trajectories must be non-empty and share one length of at least two states",
        ));
    }
    Ok(TrajectoryBundle {
        positions: trajectories.into_iter().map(to_points).collect(),
        t_max: steps - 1,
        config_tag: String::new(),
    })
}

fn grid_from(bounds: (f64, f64, f64, f64), nx: usize, ny: usize) -> PyResult<Grid2D> {
    Grid2D::new(bounds.0, bounds.1, bounds.2, bounds.3, nx, ny).map_err(py_err)
}

fn field_rows(field: &DriftField) -> Vec<FieldRow> {
    (0..field.grid.n_nodes())
        .map(|i| {
            let node = field.grid.node(i);
            (node.x, node.y, field.vectors[i].x, field.vectors[i].y, field.magnitudes[i])
        })
        .collect()
}

/// Load a two-column point CSV, returning the raw coordinates.
#[pyfunction]
fn load_csv(path: PathBuf) -> PyResult<Vec<Xy>> {
    dataset::load_csv(&path).map(|c| from_points(&c.points)).map_err(py_err)
}

/// Normalize points to zero mean and unit standard deviation per axis.
/// Returns the normalized points and `(mean_x, mean_y, std_x, std_y)`.
#[pyfunction]
fn normalize(points: Vec<Xy>) -> PyResult<(Vec<Xy>, AxisStats)> {
    let raw = RawPointCloud { points: to_points(points), name: String::new() };
    let (cloud, stats) = dataset::normalize(&raw).map_err(py_err)?;
    Ok((from_points(&cloud.points), (stats.mean_x, stats.mean_y, stats.std_x, stats.std_y)))
}

/// Replicate normalized points and split them into disjoint train/test sets.
#[pyfunction]
#[pyo3(signature = (points, copies=6, train_fraction=0.9, seed=0))]
fn replicate_and_split(
    points: Vec<Xy>,
    copies: usize,
    train_fraction: f64,
    seed: u64,
) -> PyResult<(Vec<Xy>, Vec<Xy>)> {
    let split = dataset::replicate_and_split(&unit_cloud(points), copies, train_fraction, seed)
        .map_err(py_err)?;
    Ok((from_points(&split.train.points), from_points(&split.test.points)))
}

/// Cumulative noise products of the linear schedule: `t_max + 1` entries
/// starting at 1.
#[pyfunction]
fn alpha_bar(t_max: usize, alpha_min: f64) -> PyResult<Vec<f64>> {
    diffusion::build_schedule(t_max, alpha_min, ALPHA_MAX)
        .map(|s| s.alpha_bar)
        .map_err(py_err)
}

/// Resolve a named configuration to `(input_mode, time_mode, alpha_min)`.
#[pyfunction]
fn config_modes(name: &str) -> PyResult<(String, String, f64)> {
    let config: ConfigName = name.parse().map_err(PyValueError::new_err)?;
    let (input, time, alpha_min) = config.modes();
    Ok((input.to_string(), time.to_string(), alpha_min))
}

/// Per-stage RNG seed derivation used by the pipeline (see the STAGE_*
/// constants).
#[pyfunction]
fn derive_seed(root: u64, stage: u64) -> u64 {
    derive_seed_impl(root, stage)
}

/// Total path length of each trajectory.
#[pyfunction]
fn displacement(trajectories: Vec<Vec<Xy>>) -> PyResult<Vec<f64>> {
    trajmetrics::displacement(&to_bundle(trajectories)?)
        .map(|d| d.per_sample)
        .map_err(py_err)
}

/// Mean step length across samples, one entry per transition in denoising
/// order.
#[pyfunction]
fn velocity(trajectories: Vec<Vec<Xy>>) -> PyResult<Vec<f64>> {
    trajmetrics::velocity(&to_bundle(trajectories)?)
        .map(|v| v.per_step)
        .map_err(py_err)
}

/// K-means over flattened trajectories. Returns `(labels, inertia)`.
#[pyfunction]
fn cluster_trajectories(
    trajectories: Vec<Vec<Xy>>,
    k: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, f64)> {
    trajmetrics::cluster_trajectories(&to_bundle(trajectories)?, k, seed)
        .map(|c| (c.labels, c.inertia))
        .map_err(py_err)
}

/// Sliced 1D Wasserstein fidelity between two point sets:
/// `(w1_x, w1_y, combined)`.
#[pyfunction]
fn wasserstein(original: Vec<Xy>, generated: Vec<Xy>) -> PyResult<(f64, f64, f64)> {
    trajmetrics::wasserstein_fidelity(&to_points(original), &to_points(generated))
        .map(|f| (f.w1_x, f.w1_y, f.combined))
        .map_err(py_err)
}

/// Bounding box of `points` expanded by `margin` on every side.
#[pyfunction]
#[pyo3(signature = (points, margin=0.5))]
fn grid_bounds(points: Vec<Xy>, margin: f64) -> PyResult<(f64, f64, f64, f64)> {
    let grid = Grid2D::covering(&to_points(points), margin, 2, 2).map_err(py_err)?;
    Ok((grid.x_min, grid.x_max, grid.y_min, grid.y_max))
}

/// Forward-posterior drift field at timestep `t` on an `nx` x `ny` grid.
/// Rows are `(node_x, node_y, vec_x, vec_y, magnitude)` in row-major order.
#[pyfunction]
#[pyo3(signature = (points, t, t_max, alpha_min, bounds, nx=20, ny=20))]
fn forward_drift(
    points: Vec<Xy>,
    t: usize,
    t_max: usize,
    alpha_min: f64,
    bounds: (f64, f64, f64, f64),
    nx: usize,
    ny: usize,
) -> PyResult<Vec<FieldRow>> {
    let schedule = diffusion::build_schedule(t_max, alpha_min, ALPHA_MAX).map_err(py_err)?;
    let grid = grid_from(bounds, nx, ny)?;
    driftfield::forward_drift(&grid, t, &to_points(points), &schedule)
        .map(|f| field_rows(&f))
        .map_err(py_err)
}

/// A noise-prediction MLP bound to the schedule it was configured for.
#[pyclass]
struct Denoiser {
    model: DenoiserModel,
    schedule: NoiseSchedule,
}

#[pymethods]
impl Denoiser {
    /// `input_mode` is "identity" or "fourier"; `time_mode` is "zero",
    /// "linear", or "fourier".
    #[new]
    #[pyo3(signature = (input_mode, time_mode, t_max=50, alpha_min=0.95, seed=0))]
    fn new(
        input_mode: &str,
        time_mode: &str,
        t_max: usize,
        alpha_min: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let embed = EmbeddingConfig::new(
            input_mode.parse().map_err(val_err)?,
            time_mode.parse().map_err(val_err)?,
        );
        let schedule = diffusion::build_schedule(t_max, alpha_min, ALPHA_MAX).map_err(py_err)?;
        Ok(Denoiser { model: DenoiserModel::new(embed, seed), schedule })
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.schedule.t_max
    }

    #[getter]
    fn alpha_min(&self) -> f64 {
        self.schedule.alpha_min
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    #[getter]
    fn input_mode(&self) -> String {
        self.model.embed.input_mode.to_string()
    }

    #[getter]
    fn time_mode(&self) -> String {
        self.model.embed.time_mode.to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Denoiser(input_mode='{}', time_mode='{}', t_max={}, alpha_min={}, params={})",
            self.model.embed.input_mode,
            self.model.embed.time_mode,
            self.schedule.t_max,
            self.schedule.alpha_min,
            self.model.param_count(),
        )
    }

    /// Predicted noise for one point at timestep `t` (1-based).
    fn predict_noise(&self, x: f64, y: f64, t: usize) -> PyResult<Xy> {
        if t < 1 || t > self.schedule.t_max {
            return Err(PyValueError::new_err(format!(
                "timestep {t} outside 1..={}",
                self.schedule.t_max
            )));
        }
        let p = self.model.predict_noise_point(Point::new(x, y), t, self.schedule.t_max);
        Ok((p.x, p.y))
    }

    /// Train in place on normalized points. Returns
    /// `(epoch_loss, mse_per_timestep)`; the second list is empty when
    /// `test_points` is.
    #[pyo3(signature = (train_points, test_points, epochs, batch_size=32, learning_rate=4e-4, clip_norm=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        train_points: Vec<Xy>,
        test_points: Vec<Xy>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        clip_norm: f64,
        seed: u64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let split = DataSplit {
            train: unit_cloud(train_points),
            test: unit_cloud(test_points),
            split_fraction: 1.0,
            seed,
        };
        let config = TrainConfig { epochs, batch_size, learning_rate, clip_norm, seed };
        diffusion::train(&mut self.model, &split, &self.schedule, &config)
            .map(|c| (c.epoch_loss, c.mse_per_timestep))
            .map_err(py_err)
    }

    /// Run the reverse process for `n` samples. With `record` each trajectory
    /// holds `t_max + 1` states from initial noise to final output; without it
    /// only the final state.
    #[pyo3(signature = (n, seed=0, record=true))]
    fn sample(&self, n: usize, seed: u64, record: bool) -> PyResult<Vec<Vec<Xy>>> {
        diffusion::sample(&self.model, &self.schedule, n, seed, record)
            .map(|b| b.positions.iter().map(|t| from_points(t)).collect())
            .map_err(py_err)
    }

    /// Learned reverse-process drift at timestep `t` on an `nx` x `ny` grid.
    /// Rows are `(node_x, node_y, vec_x, vec_y, magnitude)` in row-major
    /// order.
    #[pyo3(signature = (t, bounds, nx=20, ny=20))]
    fn backward_drift(
        &self,
        t: usize,
        bounds: (f64, f64, f64, f64),
        nx: usize,
        ny: usize,
    ) -> PyResult<Vec<FieldRow>> {
        let grid = grid_from(bounds, nx, ny)?;
        driftfield::backward_drift(&grid, t, &self.model, &self.schedule)
            .map(|f| field_rows(&f))
            .map_err(py_err)
    }

    /// Mean cosine similarity between the interpolated backward drift and each
    /// sample's direction to its final point, one entry per transition in
    /// denoising order. Returns `(mean_cs, included, excluded)`; entries of
    /// `mean_cs` are None where every sample was excluded.
    #[pyo3(signature = (trajectories, bounds, nx=20, ny=20))]
    fn drift_alignment(
        &self,
        trajectories: Vec<Vec<Xy>>,
        bounds: (f64, f64, f64, f64),
        nx: usize,
        ny: usize,
    ) -> PyResult<AlignmentParts> {
        let bundle = to_bundle(trajectories)?;
        if bundle.t_max != self.schedule.t_max {
            return Err(PyValueError::new_err(format!(
                "trajectories record {} transitions but the schedule has {}",
                bundle.t_max, self.schedule.t_max
            )));
        }
        let grid = grid_from(bounds, nx, ny)?;
        let fields = (1..=self.schedule.t_max)
            .rev()
            .map(|t| driftfield::backward_drift(&grid, t, &self.model, &self.schedule))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        let curve = driftfield::drift_alignment(&bundle, &fields).map_err(py_err)?;
        Ok((curve.mean_cs, curve.included, curve.excluded))
    }

    /// Write the model with its schedule parameters to a text file.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.model, self.schedule.t_max, self.schedule.alpha_min, &path)
            .map_err(py_err)
    }

    /// Load a model saved by `save`, restoring its schedule.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, t_max, alpha_min) = load_model(&path).map_err(py_err)?;
        let schedule = diffusion::build_schedule(t_max, alpha_min, ALPHA_MAX).map_err(py_err)?;
        Ok(Denoiser { model, schedule })
    }
}

#[pymodule]
fn injected(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Denoiser>()?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(replicate_and_split, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bar, m)?)?;
    m.add_function(wrap_pyfunction!(config_modes, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(displacement, m)?)?;
    m.add_function(wrap_pyfunction!(velocity, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(grid_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(forward_drift, m)?)?;
    m.add("CONFIG_NAMES", ConfigName::ALL.iter().map(|c| c.as_str()).collect::<Vec<_>>())?;
    m.add("STAGE_MODEL_INIT", stages::MODEL_INIT)?;
    m.add("STAGE_TRAIN", stages::TRAIN)?;
    m.add("STAGE_SPLIT", stages::SPLIT)?;
    m.add("STAGE_SAMPLE", stages::SAMPLE)?;
    m.add("STAGE_CLUSTER", stages::CLUSTER)?;
    Ok(())
}
