//! Training and analysis of a small denoising diffusion model on 2D point clouds.
//!
//! The pipeline: load a point-cloud CSV, normalize it, train an MLP noise
//! predictor under a linear noise schedule, sample reverse-process trajectories,
//! then quantify the denoising dynamics (displacement, velocity, clustering,
//! Wasserstein fidelity, drift fields, drift-direction alignment) and render
//! the figures as standalone SVG files.

pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod driftfield;
pub mod model;
pub mod plots;
pub mod trajmetrics;

mod error;

pub use error::{Error, Result};

/// A 2D point. Used for both data coordinates and drift vectors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(&self, other: &Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// Derive a per-stage seed from the root seed.
///
/// Every source of randomness in the pipeline draws from a stage seed produced
/// here, so individual stages are reproducible on their own. The mixer is the
/// splitmix64 finalizer applied to `root + stage * golden`, which decorrelates
/// nearby roots and stages.
pub fn derive_seed(root: u64, stage: u64) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = root.wrapping_add(stage.wrapping_mul(GOLDEN)).wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage tags for [`derive_seed`].
pub mod stages {
    pub const MODEL_INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const CLUSTER: u64 = 5;
}
