//! Multi-layer perceptrons for the feature generator and the domain
//! discriminator, with hand-written backpropagation and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{matmul_at, matmul_bt, Matrix, Rng};

/// Activation applied after the final affine layer. Hidden layers are ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// One affine layer, `y = x Wᵀ + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of a ReLU MLP. Also used as the gradient container for itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    output: OutputActivation,
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre_activations
    }
}

/// Xavier-uniform weights, zero biases. `dims` lists every layer width
/// including input and output, so `(2, 4, 3)` makes two layers.
pub fn init_mlp(dims: &[usize], output: OutputActivation, rng: &mut Rng) -> Result<Mlp> {
    if dims.len() < 2 {
        return Err(Error::config("an MLP needs at least an input and an output width"));
    }
    if dims.contains(&0) {
        return Err(Error::config(format!("MLP layer widths must be positive: {dims:?}")));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            Layer {
                weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized by construction"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(Mlp { layers, output })
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::config(format!(
                    "layer {i}: bias length {} but {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, output })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths including input and output, the inverse of [`init_mlp`]'s `dims`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            output: self.output,
        }
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &x)?;
            let a = if i < last {
                z.relu()
            } else {
                match self.output {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Sigmoid => z.sigmoid(),
                }
            };
            inputs.push(x);
            pre_activations.push(z);
            x = a;
        }
        let cache = ForwardCache {
            inputs,
            pre_activations,
            output: x.clone(),
        };
        Ok((x, cache))
    }

    /// Forward pass without keeping the cache.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let last = self.layers.len() - 1;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &x)?;
            x = if i < last {
                z.relu()
            } else {
                match self.output {
                    OutputActivation::Identity => z,
                    OutputActivation::Sigmoid => z.sigmoid(),
                }
            };
        }
        Ok(x)
    }

    /// Parameter and input gradients of a scalar loss whose gradient with
    /// respect to the network output is `output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(Mlp, Matrix)> {
        if output_grad.shape() != cache.output.shape() {
            return Err(Error::config(format!(
                "output gradient shape {:?} does not match forward output {:?}",
                output_grad.shape(),
                cache.output.shape()
            )));
        }
        let last = self.layers.len() - 1;
        let mut delta = match self.output {
            OutputActivation::Identity => output_grad.clone(),
            OutputActivation::Sigmoid => {
                let mut d = output_grad.clone();
                for (g, &y) in d.as_mut_slice().iter_mut().zip(cache.output.as_slice()) {
                    *g *= y * (1.0 - y);
                }
                d
            }
        };
        let mut grads = self.zeros_like();
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            // dW = deltaᵀ x, db = column sums of delta
            grads.layers[i].weight = matmul_at(&delta, &cache.inputs[i])?;
            let bias_grad = &mut grads.layers[i].bias;
            for r in 0..delta.rows() {
                for (b, &d) in bias_grad.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            let mut upstream = crate::ndcore::matmul(&delta, &layer.weight)?;
            if i > 0 {
                let z = &cache.pre_activations[i - 1];
                for (u, &zv) in upstream.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            delta = upstream;
        }
        Ok((grads, delta))
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::config(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                batch.cols()
            )));
        }
        Ok(())
    }
}

fn affine(layer: &Layer, x: &Matrix) -> Result<Matrix> {
    let mut z = matmul_bt(x, &layer.weight)?;
    for r in 0..z.rows() {
        for (v, &b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

/// Anything that exposes its trainable values as a fixed list of flat
/// tensors. Gradients share the parameter type, so shapes line up by
/// construction.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::config(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

impl ParamTensors for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl ParamTensors for Matrix {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

/// `acc += s * g`, tensor by tensor.
pub fn accumulate<P: ParamTensors>(acc: &mut P, g: &P, s: f64) -> Result<()> {
    let gt = g.tensors();
    let mut at = acc.tensors_mut();
    if at.len() != gt.len() || at.iter().zip(&gt).any(|(a, g)| a.len() != g.len()) {
        return Err(Error::config("cannot accumulate gradients of different shapes"));
    }
    for (a, g) in at.iter_mut().zip(&gt) {
        for (x, y) in a.iter_mut().zip(g.iter()) {
            *x += s * y;
        }
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &impl ParamTensors) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
pub fn adam_step<P: ParamTensors>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    let shapes_match = param_tensors.len() == state.first.len()
        && grad_tensors.len() == state.first.len()
        && param_tensors
            .iter()
            .zip(&grad_tensors)
            .zip(&state.first)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::config("adam: parameter, gradient and moment shapes disagree"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in param_tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Sigmoid outputs of the discriminator, which must stay in (0, 1).
pub fn discriminator_probabilities(disc: &Mlp, features: &Matrix) -> Result<Vec<f64>> {
    Ok(disc.infer(features)?.into_vec())
}
