//! The noise-prediction network: frozen Fourier feature projections, a five
//! layer ReLU MLP, analytic backpropagation, and Adam with global-norm
//! gradient clipping.
//!
//! The network maps an embedded noisy point (plus a time embedding) to a
//! predicted 2D noise vector. All forward and gradient computations are
//! deterministic given the parameters; training drives the whole thing from a
//! single seed.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Point, Result};

pub const HIDDEN_WIDTH: usize = 64;
pub const HIDDEN_LAYERS: usize = 4;
pub const OUT_DIM: usize = 2;
/// Rows of the input projection; the input embedding is twice this (sin + cos).
pub const INPUT_FEATURES: usize = 32;
/// Rows of the time projection; the time embedding is twice this.
pub const TIME_FEATURES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Identity,
    Fourier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    Zero,
    Linear,
    Fourier,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Identity => "identity",
            InputMode::Fourier => "fourier",
        })
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(InputMode::Identity),
            "fourier" => Ok(InputMode::Fourier),
            other => Err(Error::InvalidArgument(format!("unknown input mode '{other}'"))),
        }
    }
}

impl fmt::Display for TimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeMode::Zero => "zero",
            TimeMode::Linear => "linear",
            TimeMode::Fourier => "fourier",
        })
    }
}

impl std::str::FromStr for TimeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(TimeMode::Zero),
            "linear" => Ok(TimeMode::Linear),
            "fourier" => Ok(TimeMode::Fourier),
            other => Err(Error::InvalidArgument(format!("unknown time mode '{other}'"))),
        }
    }
}

/// Which embeddings feed the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub input_mode: InputMode,
    pub time_mode: TimeMode,
}

impl EmbeddingConfig {
    pub fn new(input_mode: InputMode, time_mode: TimeMode) -> Self {
        Self { input_mode, time_mode }
    }

    pub fn input_dim(&self) -> usize {
        match self.input_mode {
            InputMode::Identity => 2,
            InputMode::Fourier => 2 * INPUT_FEATURES,
        }
    }

    pub fn time_dim(&self) -> usize {
        match self.time_mode {
            TimeMode::Zero => 0,
            TimeMode::Linear => 1,
            TimeMode::Fourier => 2 * TIME_FEATURES,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.input_dim() + self.time_dim()
    }
}

/// Random projection matrices, drawn from a standard normal once at model
/// creation and frozen thereafter. Serialized alongside the weights.
#[derive(Debug, Clone)]
pub struct FourierBases {
    /// 32x2 projection applied to the 2D input.
    pub input_proj: Array2<f64>,
    /// 16x1 projection applied to the normalized timestep.
    pub time_proj: Array2<f64>,
    pub seed: u64,
}

impl FourierBases {
    fn sample(rng: &mut ChaCha8Rng, seed: u64) -> Self {
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
        };
        let input_proj = draw(INPUT_FEATURES, 2);
        let time_proj = draw(TIME_FEATURES, 1);
        FourierBases { input_proj, time_proj, seed }
    }
}

/// One affine layer, stored as (in x out) weight plus bias.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// The noise predictor: 4 hidden ReLU layers of width 64, linear 2D output.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub layers: Vec<Layer>,
    pub embed: EmbeddingConfig,
    pub bases: FourierBases,
    pub in_dim: usize,
}

/// Widths of the affine layers for a given input dimension.
fn layer_dims(in_dim: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(HIDDEN_LAYERS + 1);
    let mut prev = in_dim;
    for _ in 0..HIDDEN_LAYERS {
        dims.push((prev, HIDDEN_WIDTH));
        prev = HIDDEN_WIDTH;
    }
    dims.push((prev, OUT_DIM));
    dims
}

impl DenoiserModel {
    /// Create a model with seeded fan-in uniform weights and zero biases.
    ///
    /// Draw order is fixed (projections first, then layer weights in order) so
    /// an identical seed reproduces the parameters bit for bit.
    pub fn new(embed: EmbeddingConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases = FourierBases::sample(&mut rng, seed);
        let in_dim = embed.total_dim();
        let layers = layer_dims(in_dim)
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    (rng.random::<f64>() * 2.0 - 1.0) * bound
                });
                Layer { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        DenoiserModel { layers, embed, bases, in_dim }
    }

    /// A model whose weights and biases are all zero (the bases are still
    /// sampled from the seed). Predicts zero noise everywhere.
    pub fn zeroed(embed: EmbeddingConfig, seed: u64) -> Self {
        let mut model = Self::new(embed, seed);
        for layer in &mut model.layers {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        model
    }

    /// Build the embedded input matrix for a batch: per row, the input
    /// embedding followed by the time embedding.
    pub fn embed_batch(&self, xs: ArrayView2<f64>, ts: &[usize], t_max: usize) -> Array2<f64> {
        let b = xs.nrows();
        assert_eq!(xs.ncols(), 2, "expected a Bx2 batch");
        assert_eq!(ts.len(), b, "one timestep per batch row");
        let mut emb = Array2::zeros((b, self.in_dim));
        let split = self.embed.input_dim();
        match self.embed.input_mode {
            InputMode::Identity => {
                emb.slice_mut(ndarray::s![.., 0..2]).assign(&xs);
            }
            InputMode::Fourier => {
                // z = x . proj^T, then [sin(z); cos(z)] per row.
                let z = xs.dot(&self.bases.input_proj.t());
                for i in 0..b {
                    for k in 0..INPUT_FEATURES {
                        let v = z[(i, k)];
                        emb[(i, k)] = v.sin();
                        emb[(i, INPUT_FEATURES + k)] = v.cos();
                    }
                }
            }
        }
        match self.embed.time_mode {
            TimeMode::Zero => {}
            TimeMode::Linear => {
                for i in 0..b {
                    emb[(i, split)] = ts[i] as f64 / t_max as f64 - 0.5;
                }
            }
            TimeMode::Fourier => {
                for i in 0..b {
                    let s = ts[i] as f64 / t_max as f64 - 0.5;
                    for k in 0..TIME_FEATURES {
                        let v = self.bases.time_proj[(k, 0)] * s;
                        emb[(i, split + k)] = v.sin();
                        emb[(i, split + TIME_FEATURES + k)] = v.cos();
                    }
                }
            }
        }
        emb
    }

    fn forward_from_embedded(&self, emb: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(emb);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.weight) + &layer.bias;
            if l < self.layers.len() - 1 {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Predicted noise for a batch of noisy points at the given timesteps.
    pub fn predict_noise(&self, xs: ArrayView2<f64>, ts: &[usize], t_max: usize) -> Array2<f64> {
        let emb = self.embed_batch(xs, ts, t_max);
        self.forward_from_embedded(emb).pop().unwrap()
    }

    /// Convenience wrapper for a single point.
    pub fn predict_noise_point(&self, p: Point, t: usize, t_max: usize) -> Point {
        let xs = ndarray::arr2(&[[p.x, p.y]]);
        let out = self.predict_noise(xs.view(), &[t], t_max);
        Point::new(out[(0, 0)], out[(0, 1)])
    }

    /// Mean squared error against the noise target, with exact analytic
    /// gradients for every weight and bias.
    pub fn loss_and_gradients(
        &self,
        xs: ArrayView2<f64>,
        ts: &[usize],
        t_max: usize,
        target: ArrayView2<f64>,
    ) -> (f64, Gradients) {
        let b = xs.nrows();
        assert_eq!(target.dim(), (b, OUT_DIM), "target shape mismatch");
        let acts = self.forward_from_embedded(self.embed_batch(xs, ts, t_max));
        let output = &acts[self.layers.len()];
        let diff = output - &target;
        let entries = (b * OUT_DIM) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / entries;

        // d(loss)/d(output); the mean is over all B*2 entries.
        let mut upstream = diff * (2.0 / entries);
        let mut grads = vec![
            LayerGrad {
                weight: Array2::zeros((0, 0)),
                bias: Array1::zeros(0),
            };
            self.layers.len()
        ];
        for l in (0..self.layers.len()).rev() {
            grads[l].weight = acts[l].t().dot(&upstream);
            grads[l].bias = upstream.sum_axis(Axis(0));
            if l > 0 {
                upstream = upstream.dot(&self.layers[l].weight.t());
                // ReLU mask: units that were clamped pass no gradient.
                upstream.zip_mut_with(&acts[l], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
        }
        (loss, Gradients { layers: grads })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat read access to parameters, ordered layer by layer (weight
    /// row-major, then bias). The same indexing applies to [`Gradients`].
    pub fn param(&self, idx: usize) -> f64 {
        *locate(&self.layers, idx, |l| (&l.weight, &l.bias))
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        locate_mut(&mut self.layers, idx)
    }

    /// Parameter bits, for exact equality checks.
    pub fn param_bits(&self) -> Vec<u64> {
        let mut bits = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            bits.extend(l.weight.iter().map(|v| v.to_bits()));
            bits.extend(l.bias.iter().map(|v| v.to_bits()));
        }
        bits
    }
}

fn locate<'a, T>(
    layers: &'a [T],
    mut idx: usize,
    parts: impl Fn(&'a T) -> (&'a Array2<f64>, &'a Array1<f64>),
) -> &'a f64 {
    for layer in layers {
        let (w, b) = parts(layer);
        if idx < w.len() {
            return &w.as_slice().unwrap()[idx];
        }
        idx -= w.len();
        if idx < b.len() {
            return &b.as_slice().unwrap()[idx];
        }
        idx -= b.len();
    }
    panic!("parameter index out of range");
}

fn locate_mut(layers: &mut [Layer], mut idx: usize) -> &mut f64 {
    for layer in layers {
        let wlen = layer.weight.len();
        if idx < wlen {
            return &mut layer.weight.as_slice_mut().unwrap()[idx];
        }
        idx -= wlen;
        let blen = layer.bias.len();
        if idx < blen {
            return &mut layer.bias.as_slice_mut().unwrap()[idx];
        }
        idx -= blen;
    }
    panic!("parameter index out of range");
}

/// Parameter-shaped gradient tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &DenoiserModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Flat access with the same indexing as [`DenoiserModel::param`].
    pub fn at(&self, idx: usize) -> f64 {
        *locate(&self.layers, idx, |l| (&l.weight, &l.bias))
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weight.iter().map(|g| g * g).sum::<f64>()
                    + l.bias.iter().map(|g| g * g).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm does not exceed `clip_norm`.
    pub fn clip_global_norm(&mut self, clip_norm: f64) {
        let norm = self.global_norm();
        if norm > clip_norm {
            let scale = clip_norm / norm;
            for l in &mut self.layers {
                l.weight.mapv_inplace(|g| g * scale);
                l.bias.mapv_inplace(|g| g * scale);
            }
        }
    }
}

/// First/second-moment accumulators for Adam, plus the step counter and the
/// fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    pub step: u64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &DenoiserModel, learning_rate: f64, clip_norm: f64) -> Self {
        AdamState {
            m: Gradients::zeros_like(model).layers,
            v: Gradients::zeros_like(model).layers,
            step: 0,
            learning_rate,
            clip_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One optimizer step: clip the gradients to the global norm bound, then apply
/// bias-corrected Adam.
pub fn adam_step(model: &mut DenoiserModel, gradients: &Gradients, state: &mut AdamState) {
    let mut grads = gradients.clone();
    grads.clip_global_norm(state.clip_norm);
    state.step += 1;
    let hp = AdamHyper {
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
        learning_rate: state.learning_rate,
        bc1: 1.0 - state.beta1.powi(state.step as i32),
        bc2: 1.0 - state.beta2.powi(state.step as i32),
    };
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        update_tensor(
            layer.weight.as_slice_mut().unwrap(),
            g.weight.as_slice().unwrap(),
            state.m[l].weight.as_slice_mut().unwrap(),
            state.v[l].weight.as_slice_mut().unwrap(),
            hp,
        );
        update_tensor(
            layer.bias.as_slice_mut().unwrap(),
            g.bias.as_slice().unwrap(),
            state.m[l].bias.as_slice_mut().unwrap(),
            state.v[l].bias.as_slice_mut().unwrap(),
            hp,
        );
    }
}

#[derive(Clone, Copy)]
struct AdamHyper {
    beta1: f64,
    beta2: f64,
    eps: f64,
    learning_rate: f64,
    bc1: f64,
    bc2: f64,
}

fn update_tensor(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], hp: AdamHyper) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / hp.bc1;
        let v_hat = v[i] / hp.bc2;
        params[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Embed a single 2D point.
pub fn embed_input(p: Point, mode: InputMode, bases: &FourierBases) -> Vec<f64> {
    match mode {
        InputMode::Identity => vec![p.x, p.y],
        InputMode::Fourier => {
            let mut out = vec![0.0; 2 * INPUT_FEATURES];
            for k in 0..INPUT_FEATURES {
                let z = bases.input_proj[(k, 0)] * p.x + bases.input_proj[(k, 1)] * p.y;
                out[k] = z.sin();
                out[INPUT_FEATURES + k] = z.cos();
            }
            out
        }
    }
}

/// Embed a timestep. The scalar fed to the projection is `t/T - 0.5`.
pub fn embed_time(t: usize, t_max: usize, mode: TimeMode, bases: &FourierBases) -> Vec<f64> {
    let s = t as f64 / t_max as f64 - 0.5;
    match mode {
        TimeMode::Zero => Vec::new(),
        TimeMode::Linear => vec![s],
        TimeMode::Fourier => {
            let mut out = vec![0.0; 2 * TIME_FEATURES];
            for k in 0..TIME_FEATURES {
                let z = bases.time_proj[(k, 0)] * s;
                out[k] = z.sin();
                out[TIME_FEATURES + k] = z.cos();
            }
            out
        }
    }
}

const MODEL_HEADER: &str = "INJECTED-MODEL v1";

/// Write the model (plus its schedule parameters) as versioned text. Values
/// are printed with 17 significant digits, so reading the file back restores
/// every parameter bit-exactly.
pub fn save_model(model: &DenoiserModel, t_max: usize, alpha_min: f64, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MODEL_HEADER);
    out.push('\n');
    out.push_str(&format!("input_mode={}\n", model.embed.input_mode));
    out.push_str(&format!("time_mode={}\n", model.embed.time_mode));
    out.push_str(&format!("alpha_min={alpha_min}\n"));
    out.push_str(&format!("T={t_max}\n"));
    out.push_str(&format!("seed={}\n", model.bases.seed));
    let mut tensor = |name: &str, rows: usize, cols: usize, values: &mut dyn Iterator<Item = f64>| {
        out.push_str(&format!("tensor {name} {rows} {cols}\n"));
        for _ in 0..rows {
            let row: Vec<String> = (0..cols).map(|_| format!("{:.16e}", values.next().unwrap())).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    };
    tensor("input_proj", INPUT_FEATURES, 2, &mut model.bases.input_proj.iter().copied());
    tensor("time_proj", TIME_FEATURES, 1, &mut model.bases.time_proj.iter().copied());
    for (l, layer) in model.layers.iter().enumerate() {
        let (rows, cols) = layer.weight.dim();
        tensor(&format!("layer{l}.weight"), rows, cols, &mut layer.weight.iter().copied());
        tensor(&format!("layer{l}.bias"), 1, layer.bias.len(), &mut layer.bias.iter().copied());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Read a model file written by [`save_model`]. Returns the model together
/// with the stored schedule parameters `(T, alpha_min)`.
pub fn load_model(path: &Path) -> Result<(DenoiserModel, usize, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l.to_string()))
            .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {expect}")))
    };

    let (line_no, header) = next_line("header")?;
    if header != MODEL_HEADER {
        return Err(Error::parse(path, line_no, format!("bad header '{header}'")));
    }
    let mut field = |key: &str| -> Result<String> {
        let (line_no, line) = next_line(key)?;
        line.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| Error::parse(path, line_no, format!("expected '{key}=...'")))
    };
    let input_mode: InputMode = field("input_mode")?.parse()?;
    let time_mode: TimeMode = field("time_mode")?.parse()?;
    let alpha_min: f64 = field("alpha_min")?
        .parse()
        .map_err(|_| Error::parse(path, 4, "alpha_min is not a number"))?;
    let t_max: usize = field("T")?.parse().map_err(|_| Error::parse(path, 5, "T is not an integer"))?;
    let seed: u64 = field("seed")?.parse().map_err(|_| Error::parse(path, 6, "seed is not an integer"))?;

    let embed = EmbeddingConfig::new(input_mode, time_mode);
    let mut read_tensor = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let (line_no, line) = next_line("tensor header")?;
        let expected = format!("tensor {name} {rows} {cols}");
        if line != expected {
            return Err(Error::parse(path, line_no, format!("expected '{expected}', got '{line}'")));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (line_no, line) = next_line("tensor row")?;
            let row: Vec<&str> = line.split_whitespace().collect();
            if row.len() != cols {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("tensor {name}: expected {cols} values per row, got {}", row.len()),
                ));
            }
            for tok in row {
                values.push(tok.parse().map_err(|_| {
                    Error::parse(path, line_no, format!("tensor {name}: bad value '{tok}'"))
                })?);
            }
        }
        Ok(values)
    };

    let input_proj = Array2::from_shape_vec(
        (INPUT_FEATURES, 2),
        read_tensor("input_proj", INPUT_FEATURES, 2)?,
    )
    .unwrap();
    let time_proj =
        Array2::from_shape_vec((TIME_FEATURES, 1), read_tensor("time_proj", TIME_FEATURES, 1)?).unwrap();
    let mut layers = Vec::new();
    for (l, (fan_in, fan_out)) in layer_dims(embed.total_dim()).into_iter().enumerate() {
        let weight = Array2::from_shape_vec(
            (fan_in, fan_out),
            read_tensor(&format!("layer{l}.weight"), fan_in, fan_out)?,
        )
        .unwrap();
        let bias = Array1::from_vec(read_tensor(&format!("layer{l}.bias"), 1, fan_out)?);
        layers.push(Layer { weight, bias });
    }
    let model = DenoiserModel {
        layers,
        embed,
        bases: FourierBases { input_proj, time_proj, seed },
        in_dim: embed.total_dim(),
    };
    Ok((model, t_max, alpha_min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn fourier_fourier() -> EmbeddingConfig {
        EmbeddingConfig::new(InputMode::Fourier, TimeMode::Fourier)
    }

    #[test]
    fn embed_input_identity_echoes() {
        let model = DenoiserModel::new(EmbeddingConfig::new(InputMode::Identity, TimeMode::Zero), 1);
        assert_eq!(
            embed_input(Point::new(0.5, -1.2), InputMode::Identity, &model.bases),
            vec![0.5, -1.2]
        );
    }

    #[test]
    fn embed_input_fourier_at_origin() {
        let model = DenoiserModel::new(fourier_fourier(), 3);
        let emb = embed_input(Point::new(0.0, 0.0), InputMode::Fourier, &model.bases);
        assert_eq!(emb.len(), 64);
        assert!(emb[..32].iter().all(|&v| v == 0.0));
        assert!(emb[32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn embed_input_fourier_quarter_turn() {
        let mut model = DenoiserModel::new(fourier_fourier(), 3);
        model.bases.input_proj[(0, 0)] = std::f64::consts::FRAC_PI_2;
        model.bases.input_proj[(0, 1)] = 0.0;
        let emb = embed_input(Point::new(1.0, 0.0), InputMode::Fourier, &model.bases);
        assert!((emb[0] - 1.0).abs() < 1e-15);
        assert!(emb[32].abs() < 1e-15);
    }

    #[test]
    fn embed_time_modes() {
        let model = DenoiserModel::new(fourier_fourier(), 4);
        assert!(embed_time(3, 50, TimeMode::Zero, &model.bases).is_empty());
        assert_eq!(embed_time(25, 50, TimeMode::Linear, &model.bases), vec![0.0]);
        let emb = embed_time(25, 50, TimeMode::Fourier, &model.bases);
        assert_eq!(emb.len(), 32);
        assert!(emb[..16].iter().all(|&v| v == 0.0));
        assert!(emb[16..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_network_predicts_zero() {
        let model = DenoiserModel::zeroed(fourier_fourier(), 5);
        let xs = arr2(&[[0.3, -0.8], [2.0, 1.0]]);
        let out = model.predict_noise(xs.view(), &[1, 50], 50);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_active_path_matches_hand_computation() {
        let embed = EmbeddingConfig::new(InputMode::Identity, TimeMode::Zero);
        let mut model = DenoiserModel::zeroed(embed, 0);
        let ws = [0.7, 1.3, 0.9, 1.1, 2.0];
        for (l, &w) in ws.iter().enumerate() {
            model.layers[l].weight[(0, 0)] = w;
        }
        let x = 0.37;
        let expected = ws.iter().product::<f64>() * x;
        let out = model.predict_noise(arr2(&[[x, 0.0]]).view(), &[0], 50);
        assert!((out[(0, 0)] - expected).abs() < 1e-12);
        assert_eq!(out[(0, 1)], 0.0);
        // Negative input dies at the first ReLU.
        let out = model.predict_noise(arr2(&[[-x, 0.0]]).view(), &[0], 50);
        assert_eq!(out[(0, 0)], 0.0);
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let model = DenoiserModel::new(fourier_fourier(), 11);
        let xs = arr2(&[[0.4, 0.9], [0.4, 0.9]]);
        let out = model.predict_noise(xs.view(), &[7, 7], 50);
        assert_eq!(out[(0, 0)].to_bits(), out[(1, 0)].to_bits());
        assert_eq!(out[(0, 1)].to_bits(), out[(1, 1)].to_bits());
    }

    #[test]
    fn loss_zero_when_prediction_matches_target() {
        let model = DenoiserModel::new(fourier_fourier(), 2);
        let xs = arr2(&[[0.1, 0.2]]);
        let target = model.predict_noise(xs.view(), &[3], 50);
        let (loss, grads) = model.loss_and_gradients(xs.view(), &[3], 50, target.view());
        assert_eq!(loss, 0.0);
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn zero_network_unit_target_loss() {
        let model = DenoiserModel::zeroed(fourier_fourier(), 2);
        let xs = arr2(&[[0.1, 0.2]]);
        let target = arr2(&[[1.0, 1.0]]);
        let (loss, _) = model.loss_and_gradients(xs.view(), &[3], 50, target.view());
        assert_eq!(loss, 1.0);
    }

    /// Central finite difference of the loss along one parameter.
    fn fd_gradient(
        model: &mut DenoiserModel,
        idx: usize,
        xs: ArrayView2<f64>,
        ts: &[usize],
        target: ArrayView2<f64>,
        h: f64,
    ) -> f64 {
        let orig = model.param(idx);
        *model.param_mut(idx) = orig + h;
        let (up, _) = model.loss_and_gradients(xs, ts, 50, target);
        *model.param_mut(idx) = orig - h;
        let (down, _) = model.loss_and_gradients(xs, ts, 50, target);
        *model.param_mut(idx) = orig;
        (up - down) / (2.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut model = DenoiserModel::new(fourier_fourier(), 17);
        let xs = Array2::from_shape_fn((4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let target = Array2::from_shape_fn((4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let ts = vec![12usize, 3, 40, 25];
        let (_, grads) = model.loss_and_gradients(xs.view(), &ts, 50, target.view());
        let count = model.param_count();
        for k in 0..60 {
            let idx = (k * 7919) % count;
            let fd = fd_gradient(&mut model, idx, xs.view(), &ts, target.view(), 1e-5);
            let analytic = grads.at(idx);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "param {idx}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn adam_zero_gradients_leave_parameters() {
        let mut model = DenoiserModel::new(fourier_fourier(), 8);
        let before = model.param_bits();
        let mut state = AdamState::new(&model, 4e-4, 1.0);
        let grads = Gradients::zeros_like(&model);
        adam_step(&mut model, &grads, &mut state);
        assert_eq!(model.param_bits(), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_clips_to_unit_norm() {
        let model = DenoiserModel::new(fourier_fourier(), 8);
        let mut grads = Gradients::zeros_like(&model);
        grads.layers[0].weight[(0, 0)] = 3.0;
        grads.clip_global_norm(1.0);
        assert!((grads.layers[0].weight[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let lr = 4e-4;
        let mut model = DenoiserModel::new(fourier_fourier(), 8);
        let before = model.param(0);
        let mut state = AdamState::new(&model, lr, 10.0);
        let mut grads = Gradients::zeros_like(&model);
        grads.layers[0].weight[(0, 0)] = 0.25;
        adam_step(&mut model, &grads, &mut state);
        let delta = model.param(0) - before;
        // First bias-corrected step is -lr * g/|g| up to the eps correction.
        assert!((delta.abs() - lr).abs() < 1e-6);
        assert!(delta < 0.0);
    }

    #[test]
    fn seeded_construction_is_bit_identical() {
        let a = DenoiserModel::new(fourier_fourier(), 42);
        let b = DenoiserModel::new(fourier_fourier(), 42);
        assert_eq!(a.param_bits(), b.param_bits());
        assert_eq!(
            a.bases.input_proj.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.bases.input_proj.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = DenoiserModel::new(fourier_fourier(), 43);
        assert_ne!(a.param_bits(), c.param_bits());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for embed in [
            EmbeddingConfig::new(InputMode::Identity, TimeMode::Zero),
            EmbeddingConfig::new(InputMode::Fourier, TimeMode::Linear),
            fourier_fourier(),
        ] {
            let model = DenoiserModel::new(embed, 123);
            let path = dir.path().join("model.txt");
            save_model(&model, 50, 0.95, &path).unwrap();
            let (loaded, t_max, alpha_min) = load_model(&path).unwrap();
            assert_eq!(t_max, 50);
            assert_eq!(alpha_min, 0.95);
            assert_eq!(loaded.embed, model.embed);
            assert_eq!(loaded.param_bits(), model.param_bits());
            assert_eq!(
                loaded.bases.time_proj.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                model.bases.time_proj.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn load_reports_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let model = DenoiserModel::new(fourier_fourier(), 7);
        let path = dir.path().join("model.txt");
        save_model(&model, 50, 0.95, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("tensor layer1.weight 64 64", "tensor layer1.weight 64 63");
        std::fs::write(&path, text).unwrap();
        let err = load_model(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer1.weight"), "message was: {msg}");
    }

    proptest! {
        #[test]
        fn fourier_embeddings_stay_bounded(x in -50.0f64..50.0, y in -50.0f64..50.0, t in 0usize..=50) {
            let model = DenoiserModel::new(fourier_fourier(), 21);
            let emb = embed_input(Point::new(x, y), InputMode::Fourier, &model.bases);
            prop_assert!(emb.iter().all(|v| (-1.0..=1.0).contains(v)));
            let temb = embed_time(t, 50, TimeMode::Fourier, &model.bases);
            prop_assert!(temb.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn clipping_bounds_global_norm(scale in 0.01f64..100.0) {
            let model = DenoiserModel::new(fourier_fourier(), 31);
            let xs = arr2(&[[0.5, -0.5]]);
            let target = arr2(&[[2.0, -3.0]]);
            let (_, mut grads) = model.loss_and_gradients(xs.view(), &[9], 50, target.view());
            for l in &mut grads.layers {
                l.weight.mapv_inplace(|g| g * scale);
                l.bias.mapv_inplace(|g| g * scale);
            }
            grads.clip_global_norm(1.0);
            prop_assert!(grads.global_norm() <= 1.0 + 1e-12);
        }
    }
}
