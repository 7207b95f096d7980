//! Noise schedule, forward noising, the training loop, and reverse-process
//! sampling with full trajectory recording.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::DataSplit;
use crate::model::{adam_step, AdamState, DenoiserModel};
use crate::{Error, Point, Result};

/// Linear noise schedule over `t_max` diffusion steps.
///
/// Indexing: `alpha[i]`, `beta[i]`, `sigma[i]` belong to diffusion timestep
/// `t = i + 1` (so `alpha[0]` is the mild step next to the data and
/// `alpha[t_max-1]` the strongest). `alpha_bar` has `t_max + 1` entries with
/// `alpha_bar[0] = 1` and `alpha_bar[t]` the product of the first `t` alphas.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl NoiseSchedule {
    /// Coefficient on the predicted noise in the reverse mean for state `t`.
    /// Defined as 0 when beta is 0 so a constant alpha=1 schedule steps by
    /// the identity instead of 0/0.
    pub fn noise_coeff(&self, t: usize) -> f64 {
        let beta = self.beta[t - 1];
        if beta == 0.0 {
            0.0
        } else {
            beta / (1.0 - self.alpha_bar[t]).sqrt()
        }
    }

    /// Mean of the reverse transition from state `t` given predicted noise.
    pub fn reverse_mean(&self, x: Point, eps_hat: Point, t: usize) -> Point {
        let inv_sqrt_alpha = 1.0 / self.alpha[t - 1].sqrt();
        let c = self.noise_coeff(t);
        Point::new(
            inv_sqrt_alpha * (x.x - c * eps_hat.x),
            inv_sqrt_alpha * (x.y - c * eps_hat.y),
        )
    }
}

/// Build the linear schedule: alpha runs from `alpha_max` at t=1 down to
/// `alpha_min` at t=t_max. A single-step schedule uses `alpha_max` alone.
pub fn build_schedule(t_max: usize, alpha_min: f64, alpha_max: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(alpha_min > 0.0 && alpha_min <= alpha_max && alpha_max <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule bounds must satisfy 0 < alpha_min <= alpha_max <= 1, got {alpha_min} and {alpha_max}"
        )));
    }
    let alpha: Vec<f64> = if t_max == 1 {
        vec![alpha_max]
    } else {
        (0..t_max)
            .map(|i| alpha_max + (alpha_min - alpha_max) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
    let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for (t, a) in alpha.iter().enumerate() {
        alpha_bar.push(alpha_bar[t] * a);
    }
    Ok(NoiseSchedule { t_max, alpha, beta, alpha_bar, sigma, alpha_min, alpha_max })
}

/// Closed-form noising of a single point with a given noise draw.
pub fn closed_form_noising(x0: Point, eps: Point, alpha_bar_t: f64) -> Point {
    let signal = alpha_bar_t.sqrt();
    let noise = (1.0 - alpha_bar_t).sqrt();
    Point::new(signal * x0.x + noise * eps.x, signal * x0.y + noise * eps.y)
}

/// Draw standard-normal noise and jump straight to timestep `t`. Returns the
/// noised points and the noise itself (the regression target). `t = 0` is
/// allowed and returns the input unchanged.
pub fn forward_noise(
    x0: &[Point],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> (Vec<Point>, Vec<Point>) {
    assert!(t <= schedule.t_max, "timestep beyond schedule");
    let alpha_bar_t = schedule.alpha_bar[t];
    let mut noised = Vec::with_capacity(x0.len());
    let mut eps = Vec::with_capacity(x0.len());
    for &p in x0 {
        let e = Point::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        noised.push(closed_form_noising(p, e, alpha_bar_t));
        eps.push(e);
    }
    (noised, eps)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 2000, batch_size: 32, learning_rate: 4e-4, clip_norm: 1.0, seed: 0 }
    }
}

/// Training history: mean loss per epoch, and after training the mean squared
/// prediction error on the test set for every timestep 1..=t_max.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub epoch_loss: Vec<f64>,
    /// Entry `i` is the test MSE at timestep `i + 1`. Empty when the test set
    /// is empty or no training happened.
    pub mse_per_timestep: Vec<f64>,
}

/// Train the model in place with seeded shuffling and per-batch timesteps.
///
/// Per epoch: shuffle the training points, walk minibatches (the final
/// partial batch is kept), and for each batch draw one timestep uniformly
/// from 1..=t_max, noise the batch, and take an optimizer step on the noise
/// prediction MSE. The recorded epoch loss weights batches by entry count.
pub fn train(
    model: &mut DenoiserModel,
    split: &DataSplit,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<LossCurve> {
    if split.train.points.is_empty() {
        return Err(Error::DegenerateData("training set is empty".into()));
    }
    if config.batch_size == 0 || config.learning_rate <= 0.0 || config.clip_norm <= 0.0 {
        return Err(Error::InvalidArgument("batch size, learning rate, and clip norm must be positive".into()));
    }
    if split.train.points.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "training set of {} is smaller than one batch of {}",
            split.train.points.len(),
            config.batch_size
        )));
    }
    let mut curve = LossCurve::default();
    if config.epochs == 0 {
        return Ok(curve);
    }

    let t_max = schedule.t_max;
    let n = split.train.points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(model, config.learning_rate, config.clip_norm);
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let t = rng.random_range(1..=t_max);
            let signal = schedule.alpha_bar[t].sqrt();
            let noise = (1.0 - schedule.alpha_bar[t]).sqrt();
            let mut xt = Array2::zeros((b, 2));
            let mut eps = Array2::zeros((b, 2));
            for (row, &idx) in chunk.iter().enumerate() {
                let p = split.train.points[idx];
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                eps[(row, 0)] = ex;
                eps[(row, 1)] = ey;
                xt[(row, 0)] = signal * p.x + noise * ex;
                xt[(row, 1)] = signal * p.y + noise * ey;
            }
            let ts = vec![t; b];
            let (loss, grads) = model.loss_and_gradients(xt.view(), &ts, t_max, eps.view());
            adam_step(model, &grads, &mut state);
            loss_sum += loss * b as f64;
        }
        curve.epoch_loss.push(loss_sum / n as f64);
    }

    if !split.test.points.is_empty() {
        let m = split.test.points.len();
        for t in 1..=t_max {
            let signal = schedule.alpha_bar[t].sqrt();
            let noise = (1.0 - schedule.alpha_bar[t]).sqrt();
            let mut xt = Array2::zeros((m, 2));
            let mut eps = Array2::zeros((m, 2));
            for (row, p) in split.test.points.iter().enumerate() {
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                eps[(row, 0)] = ex;
                eps[(row, 1)] = ey;
                xt[(row, 0)] = signal * p.x + noise * ex;
                xt[(row, 1)] = signal * p.y + noise * ey;
            }
            let ts = vec![t; m];
            let pred = model.predict_noise(xt.view(), &ts, t_max);
            let mse = pred
                .iter()
                .zip(eps.iter())
                .map(|(p, e)| (p - e) * (p - e))
                .sum::<f64>()
                / (m * 2) as f64;
            curve.mse_per_timestep.push(mse);
        }
    }
    Ok(curve)
}

/// Reverse-process states for a batch of samples.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    /// `positions[i][j]` is sample `i` at reverse index `j`: index 0 is the
    /// initial noise (diffusion state t_max) and the last index the final
    /// output (state 0). Without recording each sample keeps only its final
    /// state.
    pub positions: Vec<Vec<Point>>,
    pub t_max: usize,
    pub config_tag: String,
}

impl TrajectoryBundle {
    pub fn n_samples(&self) -> usize {
        self.positions.len()
    }

    /// States stored per sample: `t_max + 1` when recorded, 1 otherwise.
    pub fn n_steps(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn final_points(&self) -> Vec<Point> {
        self.positions.iter().map(|traj| *traj.last().unwrap()).collect()
    }

    /// All samples at reverse index `j`.
    pub fn state_at(&self, j: usize) -> Vec<Point> {
        self.positions.iter().map(|traj| traj[j]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().flatten().all(Point::is_finite)
    }
}

/// Run the reverse process from pure noise.
///
/// Each sample draws from its own RNG stream (`seed` fixed, stream = sample
/// index), in the order: initial x then y, then one z pair per reverse step.
/// The final step adds no noise. With `record` set, all `t_max + 1` states
/// are kept per sample.
pub fn sample(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
    record: bool,
) -> Result<TrajectoryBundle> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let t_max = schedule.t_max;
    let mut rngs: Vec<ChaCha8Rng> = (0..n_samples)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();

    let mut x = Array2::zeros((n_samples, 2));
    for (i, rng) in rngs.iter_mut().enumerate() {
        x[(i, 0)] = rng.sample(StandardNormal);
        x[(i, 1)] = rng.sample(StandardNormal);
    }
    let mut positions: Vec<Vec<Point>> = (0..n_samples)
        .map(|i| {
            let mut traj = Vec::with_capacity(if record { t_max + 1 } else { 1 });
            if record {
                traj.push(Point::new(x[(i, 0)], x[(i, 1)]));
            }
            traj
        })
        .collect();

    for t in (1..=t_max).rev() {
        let ts = vec![t; n_samples];
        let eps_hat = model.predict_noise(x.view(), &ts, t_max);
        let inv_sqrt_alpha = 1.0 / schedule.alpha[t - 1].sqrt();
        let c = schedule.noise_coeff(t);
        let sigma = schedule.sigma[t - 1];
        for (i, rng) in rngs.iter_mut().enumerate() {
            let mut nx = inv_sqrt_alpha * (x[(i, 0)] - c * eps_hat[(i, 0)]);
            let mut ny = inv_sqrt_alpha * (x[(i, 1)] - c * eps_hat[(i, 1)]);
            if t > 1 {
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                nx += sigma * zx;
                ny += sigma * zy;
            }
            x[(i, 0)] = nx;
            x[(i, 1)] = ny;
            if record || t == 1 {
                positions[i].push(Point::new(nx, ny));
            }
        }
    }
    Ok(TrajectoryBundle { positions, t_max, config_tag: String::new() })
}
