//! Minimal dense neural-network kernel: fully connected layers, LeakyReLU
//! and sigmoid activations, batch normalization, binary cross-entropy and
//! exact backpropagation, plus a stochastic optimizer. Everything the
//! adversarial training loops need, implemented from scratch on f64
//! matrices with samples as rows.

mod optim;

pub use optim::{opt_step, OptState, Optimizer};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the running statistics: `r = 0.9 r + 0.1 batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Probability clamp for the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {got} rows is too small for batch normalization")]
    BatchTooSmall { got: usize },
    #[error("cache does not match the given parameters (stale cache?)")]
    StaleCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
}

/// Architecture of one fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input width first, output width last; `len() - 1` weight layers.
    pub layer_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Batch-normalize every hidden layer (between affine and activation).
    pub batchnorm_hidden: bool,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        leaky_slope: f64,
        batchnorm_hidden: bool,
        output_activation: Activation,
    ) -> Self {
        assert!(layer_widths.len() >= 2, "need at least input and output widths");
        assert!(leaky_slope > 0.0 && leaky_slope < 1.0, "slope must be in (0, 1)");
        Self { layer_widths, leaky_slope, batchnorm_hidden, output_activation }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn bn_layers(&self) -> usize {
        if self.batchnorm_hidden {
            self.n_layers() - 1
        } else {
            0
        }
    }
}

/// Weights, biases and batch-norm state of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// Per layer, `d_in x d_out`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub bn_gamma: Vec<DVector<f64>>,
    pub bn_beta: Vec<DVector<f64>>,
    pub bn_running_mean: Vec<DVector<f64>>,
    pub bn_running_var: Vec<DVector<f64>>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.n_layers() {
            let (d_in, d_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(d_in, d_out, |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::zeros(d_out));
        }
        let mut bn_gamma = Vec::new();
        let mut bn_beta = Vec::new();
        let mut bn_running_mean = Vec::new();
        let mut bn_running_var = Vec::new();
        for l in 0..spec.bn_layers() {
            let width = spec.layer_widths[l + 1];
            bn_gamma.push(DVector::from_element(width, 1.0));
            bn_beta.push(DVector::zeros(width));
            bn_running_mean.push(DVector::zeros(width));
            bn_running_var.push(DVector::from_element(width, 1.0));
        }
        Self { weights, biases, bn_gamma, bn_beta, bn_running_mean, bn_running_var }
    }

    pub fn n_scalars(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
            + self.bn_gamma.iter().map(|g| g.len()).sum::<usize>() * 2
    }

    fn matches_spec(&self, spec: &MlpSpec) -> bool {
        self.weights.len() == spec.n_layers()
            && self
                .weights
                .iter()
                .enumerate()
                .all(|(l, w)| w.nrows() == spec.layer_widths[l] && w.ncols() == spec.layer_widths[l + 1])
            && self.bn_gamma.len() == spec.bn_layers()
    }
}

/// Gradient (or moment) tensors shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub bn_gamma: Vec<DVector<f64>>,
    pub bn_beta: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            bn_gamma: params.bn_gamma.iter().map(|g| DVector::zeros(g.len())).collect(),
            bn_beta: params.bn_beta.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
        for (a, b) in self.bn_gamma.iter_mut().zip(&other.bn_gamma) {
            *a += b;
        }
        for (a, b) in self.bn_beta.iter_mut().zip(&other.bn_beta) {
            *a += b;
        }
    }
}

/// Everything backward needs from the forward pass.
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// Affine output of each layer.
    affine: Vec<DMatrix<f64>>,
    /// Batch-norm intermediates per layer (None where BN is off).
    bn_xhat: Vec<Option<DMatrix<f64>>>,
    bn_mean: Vec<Option<DVector<f64>>>,
    bn_var: Vec<Option<DVector<f64>>>,
    /// Input to the activation (batch-norm output, or the affine output).
    pre_act: Vec<DMatrix<f64>>,
    /// Final network output.
    output: DMatrix<f64>,
}

fn leaky(m: &DMatrix<f64>, slope: f64) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { slope * v })
}

fn sigmoid(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| 1.0 / (1.0 + (-v).exp()))
}

fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut z = x * w;
    for mut row in z.row_iter_mut() {
        row += b.transpose();
    }
    z
}

fn check_input(
    params: &MlpParams,
    spec: &MlpSpec,
    batch: &DMatrix<f64>,
) -> Result<(), KernelError> {
    if !params.matches_spec(spec) {
        return Err(KernelError::ShapeMismatch("params do not match spec".into()));
    }
    if batch.ncols() != spec.input_width() {
        return Err(KernelError::ShapeMismatch(format!(
            "batch width {} vs input width {}",
            batch.ncols(),
            spec.input_width()
        )));
    }
    Ok(())
}

/// Training-mode forward pass. Hidden layers apply affine, then batch
/// normalization with batch statistics (updating the running statistics),
/// then LeakyReLU; the output layer applies the configured activation.
pub fn forward_train(
    params: &mut MlpParams,
    spec: &MlpSpec,
    batch: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, ForwardCache), KernelError> {
    check_input(params, spec, batch)?;
    let rows = batch.nrows();
    if spec.batchnorm_hidden && rows < 2 {
        return Err(KernelError::BatchTooSmall { got: rows });
    }
    let n_layers = spec.n_layers();
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(n_layers),
        affine: Vec::with_capacity(n_layers),
        bn_xhat: Vec::with_capacity(n_layers),
        bn_mean: Vec::with_capacity(n_layers),
        bn_var: Vec::with_capacity(n_layers),
        pre_act: Vec::with_capacity(n_layers),
        output: DMatrix::zeros(0, 0),
    };
    let mut x = batch.clone();
    for l in 0..n_layers {
        let last = l == n_layers - 1;
        cache.inputs.push(x.clone());
        let z = affine(&x, &params.weights[l], &params.biases[l]);
        cache.affine.push(z.clone());

        let pre_act = if !last && spec.batchnorm_hidden {
            let m = z.nrows() as f64;
            let mean = DVector::from_fn(z.ncols(), |j, _| z.column(j).sum() / m);
            let var = DVector::from_fn(z.ncols(), |j, _| {
                z.column(j).iter().map(|v| (v - mean[j]) * (v - mean[j])).sum::<f64>() / m
            });
            let xhat = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
                (z[(i, j)] - mean[j]) / (var[j] + BN_EPS).sqrt()
            });
            let out = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
                params.bn_gamma[l][j] * xhat[(i, j)] + params.bn_beta[l][j]
            });
            for j in 0..z.ncols() {
                params.bn_running_mean[l][j] =
                    BN_MOMENTUM * params.bn_running_mean[l][j] + (1.0 - BN_MOMENTUM) * mean[j];
                params.bn_running_var[l][j] =
                    BN_MOMENTUM * params.bn_running_var[l][j] + (1.0 - BN_MOMENTUM) * var[j];
            }
            cache.bn_xhat.push(Some(xhat));
            cache.bn_mean.push(Some(mean));
            cache.bn_var.push(Some(var));
            out
        } else {
            cache.bn_xhat.push(None);
            cache.bn_mean.push(None);
            cache.bn_var.push(None);
            z
        };
        cache.pre_act.push(pre_act.clone());

        x = if last {
            match spec.output_activation {
                Activation::LeakyRelu => leaky(&pre_act, spec.leaky_slope),
                Activation::Sigmoid => sigmoid(&pre_act),
            }
        } else {
            leaky(&pre_act, spec.leaky_slope)
        };
    }
    cache.output = x.clone();
    Ok((x, cache))
}

/// Inference-mode forward pass: batch normalization uses the running
/// statistics and nothing is mutated.
pub fn forward_infer(
    params: &MlpParams,
    spec: &MlpSpec,
    batch: &DMatrix<f64>,
) -> Result<DMatrix<f64>, KernelError> {
    check_input(params, spec, batch)?;
    let n_layers = spec.n_layers();
    let mut x = batch.clone();
    for l in 0..n_layers {
        let last = l == n_layers - 1;
        let z = affine(&x, &params.weights[l], &params.biases[l]);
        let pre_act = if !last && spec.batchnorm_hidden {
            DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
                let xhat = (z[(i, j)] - params.bn_running_mean[l][j])
                    / (params.bn_running_var[l][j] + BN_EPS).sqrt();
                params.bn_gamma[l][j] * xhat + params.bn_beta[l][j]
            })
        } else {
            z
        };
        x = if last {
            match spec.output_activation {
                Activation::LeakyRelu => leaky(&pre_act, spec.leaky_slope),
                Activation::Sigmoid => sigmoid(&pre_act),
            }
        } else {
            leaky(&pre_act, spec.leaky_slope)
        };
    }
    Ok(x)
}

/// Binary cross-entropy of predictions in (0, 1) against 0/1 targets,
/// with the exact gradient with respect to the predictions. Predictions
/// are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` first.
pub fn bce(pred: &DVector<f64>, target: &DVector<f64>) -> (f64, DVector<f64>) {
    assert_eq!(pred.len(), target.len(), "bce length mismatch");
    let m = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(pred.len());
    for i in 0..pred.len() {
        let p = pred[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let t = target[i];
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad[i] = (-t / p + (1.0 - t) / (1.0 - p)) / m;
    }
    (loss / m, grad)
}

/// Exact gradients of a scalar loss through the cached forward pass,
/// including through the batch statistics. Also returns the gradient with
/// respect to the network input, so generator gradients can flow through
/// the discriminator.
pub fn backward(
    params: &MlpParams,
    spec: &MlpSpec,
    cache: &ForwardCache,
    output_grad: &DMatrix<f64>,
) -> Result<(Gradients, DMatrix<f64>), KernelError> {
    let n_layers = spec.n_layers();
    if cache.inputs.len() != n_layers
        || !params.matches_spec(spec)
        || cache.inputs[0].ncols() != spec.input_width()
        || output_grad.shape() != cache.output.shape()
    {
        return Err(KernelError::StaleCache);
    }
    let mut grads = Gradients::zeros_like(params);
    let mut d_out = output_grad.clone();
    for l in (0..n_layers).rev() {
        let last = l == n_layers - 1;
        // Through the activation.
        let act = if last { spec.output_activation } else { Activation::LeakyRelu };
        let mut d_pre = match act {
            Activation::LeakyRelu => {
                let pre = &cache.pre_act[l];
                DMatrix::from_fn(d_out.nrows(), d_out.ncols(), |i, j| {
                    d_out[(i, j)] * if pre[(i, j)] > 0.0 { 1.0 } else { spec.leaky_slope }
                })
            }
            Activation::Sigmoid => {
                let out = &cache.output;
                DMatrix::from_fn(d_out.nrows(), d_out.ncols(), |i, j| {
                    d_out[(i, j)] * out[(i, j)] * (1.0 - out[(i, j)])
                })
            }
        };
        // Through batch normalization.
        if let (Some(xhat), Some(mean), Some(var)) =
            (&cache.bn_xhat[l], &cache.bn_mean[l], &cache.bn_var[l])
        {
            let z = &cache.affine[l];
            let m = z.nrows() as f64;
            let cols = z.ncols();
            let mut d_z = DMatrix::zeros(z.nrows(), cols);
            for j in 0..cols {
                let inv_std = 1.0 / (var[j] + BN_EPS).sqrt();
                let gamma = params.bn_gamma[l][j];
                let mut d_gamma = 0.0;
                let mut d_beta = 0.0;
                let mut d_var = 0.0;
                let mut d_mu_direct = 0.0;
                let mut centered_sum = 0.0;
                for i in 0..z.nrows() {
                    let dy = d_pre[(i, j)];
                    d_gamma += dy * xhat[(i, j)];
                    d_beta += dy;
                    let dxhat = dy * gamma;
                    let centered = z[(i, j)] - mean[j];
                    d_var += dxhat * centered * (-0.5) * inv_std * inv_std * inv_std;
                    d_mu_direct += -dxhat * inv_std;
                    centered_sum += centered;
                }
                let d_mu = d_mu_direct + d_var * (-2.0 / m) * centered_sum;
                for i in 0..z.nrows() {
                    let dxhat = d_pre[(i, j)] * gamma;
                    let centered = z[(i, j)] - mean[j];
                    d_z[(i, j)] = dxhat * inv_std + d_var * 2.0 * centered / m + d_mu / m;
                }
                grads.bn_gamma[l][j] = d_gamma;
                grads.bn_beta[l][j] = d_beta;
            }
            d_pre = d_z;
        }
        // Through the affine map.
        grads.weights[l] = cache.inputs[l].transpose() * &d_pre;
        grads.biases[l] = DVector::from_fn(d_pre.ncols(), |j, _| d_pre.column(j).sum());
        d_out = &d_pre * params.weights[l].transpose();
    }
    Ok((grads, d_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_layer_spec(out_act: Activation) -> MlpSpec {
        MlpSpec::new(vec![2, 1], 0.01, false, out_act)
    }

    fn hand_params() -> MlpParams {
        MlpParams {
            weights: vec![DMatrix::from_column_slice(2, 1, &[1.0, -1.0])],
            biases: vec![DVector::from_element(1, 0.5)],
            bn_gamma: vec![],
            bn_beta: vec![],
            bn_running_mean: vec![],
            bn_running_var: vec![],
        }
    }

    #[test]
    fn single_layer_leaky_forward() {
        let spec = one_layer_spec(Activation::LeakyRelu);
        let mut params = hand_params();
        let batch = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (out, _) = forward_train(&mut params, &spec, &batch).unwrap();
        assert_relative_eq!(out[(0, 0)], 1.5);
        assert_relative_eq!(out[(1, 0)], -0.005);
        // Inference path matches when no batch norm is present.
        let out2 = forward_infer(&params, &spec, &batch).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let spec = one_layer_spec(Activation::Sigmoid);
        let mut params = hand_params();
        params.biases[0][0] = 0.0;
        let batch = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let (out, _) = forward_train(&mut params, &spec, &batch).unwrap();
        assert_relative_eq!(out[(0, 0)], 0.5);
    }

    #[test]
    fn batchnorm_normalizes_a_column() {
        // One hidden layer taking identity weights so the affine output is
        // the input column {1, 3}: mean 2, biased variance 1.
        let spec = MlpSpec::new(vec![1, 1, 1], 0.01, true, Activation::LeakyRelu);
        let mut params = MlpParams {
            weights: vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            biases: vec![DVector::zeros(1), DVector::zeros(1)],
            bn_gamma: vec![DVector::from_element(1, 1.0)],
            bn_beta: vec![DVector::zeros(1)],
            bn_running_mean: vec![DVector::zeros(1)],
            bn_running_var: vec![DVector::from_element(1, 1.0)],
        };
        let batch = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let (out, cache) = forward_train(&mut params, &spec, &batch).unwrap();
        let want = 1.0 / (1.0 + BN_EPS).sqrt();
        let xhat = cache.bn_xhat[0].as_ref().unwrap();
        assert_relative_eq!(xhat[(0, 0)], -want, max_relative = 1e-12);
        assert_relative_eq!(xhat[(1, 0)], want, max_relative = 1e-12);
        // Negative branch passes through the leaky slope of both the
        // hidden and the output activation.
        assert_relative_eq!(out[(0, 0)], -want * 0.01 * 0.01, max_relative = 1e-12);
        assert_relative_eq!(out[(1, 0)], want, max_relative = 1e-12);
        // Running statistics moved toward the batch statistics.
        assert_relative_eq!(params.bn_running_mean[0][0], 0.2, max_relative = 1e-12);
        assert_relative_eq!(params.bn_running_var[0][0], 0.9 + 0.1, max_relative = 1e-12);
    }

    #[test]
    fn batchnorm_requires_two_rows() {
        let spec = MlpSpec::new(vec![2, 3, 1], 0.2, true, Activation::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = MlpParams::init(&spec, &mut rng);
        let batch = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        assert!(matches!(
            forward_train(&mut params, &spec, &batch),
            Err(KernelError::BatchTooSmall { got: 1 })
        ));
    }

    #[test]
    fn bce_values_and_grads() {
        let (loss, _) = bce(&DVector::from_element(1, 0.5), &DVector::from_element(1, 1.0));
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);

        let (loss, _) =
            bce(&DVector::from_element(1, 1.0 - 1e-12), &DVector::from_element(1, 1.0));
        assert!(loss < 1e-10);

        let (loss, grad) = bce(
            &DVector::from_column_slice(&[0.5, 0.5]),
            &DVector::from_column_slice(&[1.0, 0.0]),
        );
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(grad[0], -1.0, max_relative = 1e-12);
        assert_relative_eq!(grad[1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let spec = MlpSpec::new(vec![3, 4, 2], 0.2, true, Activation::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = MlpParams::init(&spec, &mut rng);
        let batch = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0f64));
        let (out, cache) = forward_train(&mut params, &spec, &batch).unwrap();
        let zeros = DMatrix::zeros(out.nrows(), out.ncols());
        let (grads, input_grad) = backward(&params, &spec, &cache, &zeros).unwrap();
        assert!(grads.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(input_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_input_gradient_is_grad_times_w_transpose() {
        // Linear regime of LeakyReLU (positive pre-activations).
        let spec = MlpSpec::new(vec![2, 2], 0.2, false, Activation::LeakyRelu);
        let mut params = MlpParams {
            weights: vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])],
            biases: vec![DVector::from_element(2, 10.0)],
            bn_gamma: vec![],
            bn_beta: vec![],
            bn_running_mean: vec![],
            bn_running_var: vec![],
        };
        let batch = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let (_, cache) = forward_train(&mut params, &spec, &batch).unwrap();
        let d_out = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let (_, d_in) = backward(&params, &spec, &cache, &d_out).unwrap();
        let want = &d_out * params.weights[0].transpose();
        assert_relative_eq!(d_in[(0, 0)], want[(0, 0)], max_relative = 1e-12);
        assert_relative_eq!(d_in[(0, 1)], want[(0, 1)], max_relative = 1e-12);
    }

    /// Central-difference gradient check over every parameter tensor of a
    /// small random network (both activations, batch norm on and off).
    #[test]
    fn finite_difference_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (bn, act) in [
            (false, Activation::LeakyRelu),
            (false, Activation::Sigmoid),
            (true, Activation::LeakyRelu),
            (true, Activation::Sigmoid),
        ] {
            let spec = MlpSpec::new(vec![3, 5, 4, 2], 0.2, bn, act);
            let params = MlpParams::init(&spec, &mut rng);
            let batch = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0f64));
            let target = DMatrix::from_fn(6, 2, |_, _| rng.random_range(0.0..1.0f64));

            // loss = 0.5 sum (out - target)^2, so d loss/d out = out - target.
            let loss_of = |p: &MlpParams| -> f64 {
                let mut p = p.clone();
                let (out, _) = forward_train(&mut p, &spec, &batch).unwrap();
                0.5 * (out - &target).map(|v| v * v).sum()
            };
            let mut p_train = params.clone();
            let (out, cache) = forward_train(&mut p_train, &spec, &batch).unwrap();
            let d_out = &out - &target;
            let (grads, _) = backward(&params, &spec, &cache, &d_out).unwrap();

            let step = 1e-5;
            let check = |get: &dyn Fn(&MlpParams) -> f64,
                             set: &dyn Fn(&mut MlpParams, f64),
                             analytic: f64| {
                let base = get(&params);
                let mut plus = params.clone();
                set(&mut plus, base + step);
                let mut minus = params.clone();
                set(&mut minus, base - step);
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / denom < 1e-4,
                    "bn={bn} act={act:?}: fd {fd} vs analytic {analytic}"
                );
            };

            for l in 0..spec.n_layers() {
                for (i, j) in [(0usize, 0usize), (1, 1), (2, 0)] {
                    if i < params.weights[l].nrows() && j < params.weights[l].ncols() {
                        check(
                            &|p| p.weights[l][(i, j)],
                            &|p, v| p.weights[l][(i, j)] = v,
                            grads.weights[l][(i, j)],
                        );
                    }
                }
                check(&|p| p.biases[l][0], &|p, v| p.biases[l][0] = v, grads.biases[l][0]);
            }
            for l in 0..params.bn_gamma.len() {
                check(&|p| p.bn_gamma[l][0], &|p, v| p.bn_gamma[l][0] = v, grads.bn_gamma[l][0]);
                check(&|p| p.bn_beta[l][1], &|p, v| p.bn_beta[l][1] = v, grads.bn_beta[l][1]);
            }
        }
    }

    #[test]
    fn batchnorm_train_output_is_normalized() {
        let spec = MlpSpec::new(vec![4, 6, 2], 0.2, true, Activation::LeakyRelu);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = MlpParams::init(&spec, &mut rng);
        // Scale input so raw affine stats are far from (0, 1).
        let batch = DMatrix::from_fn(32, 4, |_, _| rng.random_range(-10.0..10.0f64));
        let (_, cache) = forward_train(&mut params, &spec, &batch).unwrap();
        let xhat = cache.bn_xhat[0].as_ref().unwrap();
        for j in 0..xhat.ncols() {
            let m = xhat.nrows() as f64;
            let mean = xhat.column(j).sum() / m;
            let var = xhat.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-12, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn infer_is_pure() {
        let spec = MlpSpec::new(vec![3, 4, 1], 0.2, true, Activation::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = MlpParams::init(&spec, &mut rng);
        let snapshot = params.clone();
        let batch = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0f64));
        let _ = forward_infer(&params, &spec, &batch).unwrap();
        assert_eq!(params, snapshot);
    }

    #[test]
    fn stale_cache_is_detected() {
        let spec = MlpSpec::new(vec![2, 3, 1], 0.2, false, Activation::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut params = MlpParams::init(&spec, &mut rng);
        let batch = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0f64));
        let (out, cache) = forward_train(&mut params, &spec, &batch).unwrap();
        let wrong = DMatrix::zeros(out.nrows() + 1, out.ncols());
        assert!(matches!(
            backward(&params, &spec, &cache, &wrong),
            Err(KernelError::StaleCache)
        ));
    }
}
