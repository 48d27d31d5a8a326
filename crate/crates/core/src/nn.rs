//! Small MLPs with hand-written reverse-mode gradients, plus SGD with a cosine
//! learning-rate schedule.
//!
//! The computation graph is fixed: each hidden layer is
//! `linear -> [batch standardization] -> activation`, the last layer is
//! `linear -> [row L2 normalization]`. A forward pass that will be
//! differentiated returns a [`Tape`] holding the activations the backward pass
//! needs; `backward` consumes a tape, so it cannot run without a forward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::NamedParams;

/// Batch standardization epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in network input")]
    NonFiniteInput,
    #[error("parameter vector has {got} elements, spec requires {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("gradient shape mismatch: {0}")]
    GradientShape(String),
    #[error("learning-rate schedule exhausted (step {step} of {total})")]
    ScheduleExhausted { step: u64, total: u64 },
    #[error("invalid optimizer settings: {0}")]
    InvalidOptimizer(String),
    #[error(transparent)]
    Params(#[from] crate::params::ParamsError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width first, output width last.
    pub layer_widths: Vec<usize>,
    /// One entry per hidden layer (`layer_widths.len() - 2` entries).
    pub activations: Vec<Activation>,
    /// Standardize each hidden pre-activation over the batch.
    pub hidden_norm: bool,
    pub normalize_output: bool,
}

impl MlpSpec {
    /// `input -> hidden (relu) -> output`, no normalization.
    pub fn encoder(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            layer_widths: vec![input, hidden, output],
            activations: vec![Activation::Relu],
            hidden_norm: false,
            normalize_output: false,
        }
    }

    /// Two-layer predictor `dim -> hidden (standardize, relu) -> dim`.
    pub fn predictor(dim: usize, hidden: usize) -> Self {
        Self {
            layer_widths: vec![dim, hidden, dim],
            activations: vec![Activation::Relu],
            hidden_norm: true,
            normalize_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        if w.len() < 2 {
            return Err(NnError::InvalidSpec("need at least two widths".into()));
        }
        if w.iter().any(|&x| x == 0) {
            return Err(NnError::InvalidSpec("widths must be positive".into()));
        }
        if *w.last().unwrap() < 2 {
            return Err(NnError::InvalidSpec("output width must be at least 2".into()));
        }
        if self.activations.len() != w.len() - 2 {
            return Err(NnError::InvalidSpec(format!(
                "{} hidden layers but {} activations",
                w.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    /// `(weight_offset, bias_offset)` of each layer in the flat vector.
    /// Weights are stored row-major `[fan_in x fan_out]`, followed by the bias.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layer_widths
            .windows(2)
            .map(|p| {
                let w = off;
                let b = w + p[0] * p[1];
                off = b + p[1];
                (w, b)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: MlpSpec,
    params: Vec<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    /// Standardized pre-activation and per-feature inverse std.
    norm: Option<(Array2<f64>, Array1<f64>)>,
    /// Input of the activation (after optional standardization).
    act_input: Option<Array2<f64>>,
}

/// Activations retained by [`Network::forward_tape`].
pub struct Tape {
    layers: Vec<LayerCache>,
    /// Final linear output and its row norms, when the output is normalized.
    out_norm: Option<(Array2<f64>, Array1<f64>)>,
    pub zero_norm_rows: Vec<usize>,
    param_count: usize,
}

/// Output of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

impl Network {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        for p in spec.layer_widths.windows(2) {
            let bound = 1.0 / (p[0] as f64).sqrt();
            for _ in 0..p[0] * p[1] + p[1] {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(NnError::ParamCount {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(NnError::ParamCount {
                expected: self.params.len(),
                got: values.len(),
            });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Parameters as a single-group [`NamedParams`].
    pub fn to_named(&self, group: &str) -> NamedParams {
        NamedParams::single(group, self.params.clone())
    }

    fn weights(&self, layer: usize, off: (usize, usize)) -> ArrayView2<'_, f64> {
        let (fan_in, fan_out) = (self.spec.layer_widths[layer], self.spec.layer_widths[layer + 1]);
        ArrayView2::from_shape((fan_in, fan_out), &self.params[off.0..off.1]).unwrap()
    }

    fn bias(&self, layer: usize, off: (usize, usize)) -> ndarray::ArrayView1<'_, f64> {
        let fan_out = self.spec.layer_widths[layer + 1];
        ndarray::ArrayView1::from(&self.params[off.1..off.1 + fan_out])
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.spec.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input_dim(),
                got: batch.ncols(),
            });
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, batch: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_tape(batch).map(|(out, _)| out)
    }

    /// Forward pass retaining what `backward` needs.
    pub fn forward_tape(&self, batch: &ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(batch)?;
        let offsets = self.spec.offsets();
        let n_layers = self.spec.num_layers();
        let mut layers = Vec::with_capacity(n_layers);
        let mut x = batch.to_owned();
        for (l, &off) in offsets.iter().enumerate() {
            let mut z = x.dot(&self.weights(l, off));
            z += &self.bias(l, off);
            if l + 1 == n_layers {
                layers.push(LayerCache { input: x, norm: None, act_input: None });
                x = z;
                break;
            }
            let norm = if self.spec.hidden_norm {
                let (y, inv) = standardize(&z);
                z = y.clone();
                Some((y, inv))
            } else {
                None
            };
            let act = self.spec.activations[l];
            let next = match act {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            layers.push(LayerCache {
                input: x,
                norm,
                act_input: (act == Activation::Relu).then_some(z),
            });
            x = next;
        }

        let mut zero_norm_rows = Vec::new();
        let out_norm = if self.spec.normalize_output {
            let (y, norms, zeros) = l2_normalize_rows(&x);
            zero_norm_rows = zeros;
            let raw = std::mem::replace(&mut x, y);
            Some((raw, norms))
        } else {
            None
        };
        Ok((
            x,
            Tape {
                layers,
                out_norm,
                zero_norm_rows,
                param_count: self.params.len(),
            },
        ))
    }

    /// Reverse pass: gradient of a scalar loss with respect to the parameters
    /// and the input batch, given its gradient at the output.
    pub fn backward(&self, tape: &Tape, grad_out: &ArrayView2<f64>) -> Result<Gradients> {
        if tape.param_count != self.params.len() || tape.layers.len() != self.spec.num_layers() {
            return Err(NnError::GradientShape("tape was recorded on a different network".into()));
        }
        let rows = tape.layers[0].input.nrows();
        if grad_out.dim() != (rows, self.spec.output_dim()) {
            return Err(NnError::GradientShape(format!(
                "upstream gradient is {:?}, output is {:?}",
                grad_out.dim(),
                (rows, self.spec.output_dim())
            )));
        }
        let mut g = match &tape.out_norm {
            Some((raw, norms)) => l2_normalize_backward(raw, norms, grad_out),
            None => grad_out.to_owned(),
        };

        let offsets = self.spec.offsets();
        let mut grads = vec![0.0; self.params.len()];
        for (l, cache) in tape.layers.iter().enumerate().rev() {
            if let Some(a) = &cache.act_input {
                g.zip_mut_with(a, |gi, &ai| {
                    if ai <= 0.0 {
                        *gi = 0.0;
                    }
                });
            }
            if let Some((y, inv)) = &cache.norm {
                g = standardize_backward(y, inv, &g);
            }
            let off = offsets[l];
            let dw = cache.input.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            grads[off.0..off.1].copy_from_slice(dw.as_slice().unwrap());
            grads[off.1..off.1 + db.len()].copy_from_slice(db.as_slice().unwrap());
            g = g.dot(&self.weights(l, off).t());
        }
        Ok(Gradients { params: grads, input: g })
    }
}

/// Per-feature standardization over the batch axis.
fn standardize(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let b = z.nrows() as f64;
    let mean = z.sum_axis(Axis(0)) / b;
    let centered = z - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
    let inv = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    (centered * &inv, inv)
}

fn standardize_backward(y: &Array2<f64>, inv: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let b = y.nrows() as f64;
    let sum_dy = dy.sum_axis(Axis(0));
    let sum_dy_y = (dy * y).sum_axis(Axis(0));
    let mut dx = dy * b - &sum_dy - &(y * &sum_dy_y);
    dx *= &(inv / b);
    dx
}

/// Row L2 normalization; zero rows stay zero and are reported.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Vec<usize>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut y = x.clone();
    let mut zeros = Vec::new();
    for (i, (mut row, &n)) in y.rows_mut().into_iter().zip(norms.iter()).enumerate() {
        if n > 0.0 {
            row /= n;
        } else {
            zeros.push(i);
        }
    }
    (y, norms, zeros)
}

/// Gradient through `y = x / ||x||` per row.
pub fn l2_normalize_backward(
    x: &Array2<f64>,
    norms: &Array1<f64>,
    dy: &ArrayView2<f64>,
) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let n = norms[i];
        if n == 0.0 {
            continue;
        }
        let y = x.row(i).mapv(|v| v / n);
        let proj = y.dot(&dy.row(i));
        let mut out = dx.row_mut(i);
        for j in 0..y.len() {
            out[j] = (dy[(i, j)] - y[j] * proj) / n;
        }
    }
    dx
}

/// Cosine-annealed SGD step counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub total_steps: u64,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(base_lr: f64, total_steps: u64) -> Result<Self> {
        Self::at(base_lr, total_steps, 0)
    }

    pub fn at(base_lr: f64, total_steps: u64, step: u64) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(NnError::InvalidOptimizer(format!("learning rate {base_lr}")));
        }
        if total_steps == 0 {
            return Err(NnError::InvalidOptimizer("total_steps must be positive".into()));
        }
        if step > total_steps {
            return Err(NnError::InvalidOptimizer(format!(
                "step {step} beyond schedule length {total_steps}"
            )));
        }
        Ok(Self { base_lr, total_steps, step })
    }

    /// `base_lr * 0.5 * (1 + cos(pi * t / T))` at the current step.
    pub fn lr(&self) -> f64 {
        let frac = self.step as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Learning rate for this step; advances the counter.
    pub fn advance(&mut self) -> Result<f64> {
        if self.step >= self.total_steps {
            return Err(NnError::ScheduleExhausted {
                step: self.step,
                total: self.total_steps,
            });
        }
        let lr = self.lr();
        self.step += 1;
        Ok(lr)
    }
}

/// `params - lr_t * grad`, advancing the schedule by one step.
pub fn sgd_step(
    params: &NamedParams,
    grad: &NamedParams,
    opt: &mut OptimizerState,
) -> Result<NamedParams> {
    params.check_same_shape(grad)?;
    let lr = opt.advance()?;
    let mut out = params.clone();
    for (name, g) in grad.iter() {
        apply_sgd(out.get_mut(name).unwrap(), g, lr);
    }
    Ok(out)
}

pub(crate) fn apply_sgd(params: &mut [f64], grad: &[f64], lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}
