use rand::Rng as _;

use super::layers::{
    conv_apply, conv_backward, conv_geometry, conv_transposed_apply, conv_transposed_backward, crop3d, pad3d, LayerSpec,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// A chain of layers with shapes fixed at build time.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    specs: Vec<LayerSpec>,
    /// Activation shape entering each layer, plus the final output shape.
    shapes: Vec<Vec<usize>>,
    params: Vec<Tensor<T>>,
    /// Index of each layer's first parameter tensor in `params`.
    offsets: Vec<usize>,
}

/// Per-sample record of a forward pass, consumed by [`Sequential::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    inputs: Vec<Vec<T>>,
    /// im2col buffers of plain convolutions (empty for other layers).
    cols: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    /// Hash of every relu on/off decision; changes when a perturbation
    /// crosses a kink.
    pub fn relu_signature(&self, net: &Sequential<T>) -> u64 {
        let mut acc = 0u64;
        for (spec, x) in net.specs.iter().zip(&self.inputs) {
            if matches!(spec, LayerSpec::Relu) {
                for chunk in x.chunks(64) {
                    let word = chunk
                        .iter()
                        .enumerate()
                        .fold(0u64, |w, (i, v)| w | (u64::from(*v > T::zero()) << i));
                    acc = seed::mix64(acc ^ word);
                }
            }
        }
        acc
    }
}

/// Parameter gradients aligned with [`Sequential::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// A loss value together with its gradient with respect to the network output.
#[derive(Debug, Clone)]
pub struct Loss<T> {
    pub value: Tensor<T>,
    pub grad_output: Tensor<T>,
}

impl<T: Scalar> Loss<T> {
    /// Mean squared error between `output` and `target`.
    pub fn mse(output: &Tensor<T>, target: &[T]) -> Result<Self> {
        if output.len() != target.len() {
            return Err(Error::shape(
                0,
                format!("mse target has {} elements, output {}", target.len(), output.len()),
            ));
        }
        let n = T::of(output.len() as f64);
        let two = T::of(2.0);
        let mut value = T::zero();
        let grad: Vec<T> = output
            .data()
            .iter()
            .zip(target)
            .map(|(&o, &t)| {
                let d = o - t;
                value += d * d;
                two * d / n
            })
            .collect();
        Ok(Loss {
            value: Tensor::scalar(value / n),
            grad_output: Tensor::new(output.shape().to_vec(), grad)?,
        })
    }

    /// `sum(output)`; gradient of ones.
    pub fn sum(output: &Tensor<T>) -> Self {
        Loss {
            value: Tensor::scalar(output.data().iter().copied().sum()),
            grad_output: Tensor::full(output.shape(), T::one()),
        }
    }
}

impl<T: Scalar> Sequential<T> {
    /// Builds and shape-checks the network; parameters are Glorot-uniform,
    /// biases zero.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::with_zero_params(input_shape, specs)?;
        let mut rng = seed::rng(seed);
        for (spec, &off) in net.specs.iter().zip(&net.offsets) {
            if let Some((fan_in, fan_out)) = spec.fans() {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in net.params[off].data_mut() {
                    *w = T::of(rng.gen_range(-bound..=bound));
                }
            }
        }
        Ok(net)
    }

    pub fn with_zero_params(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        let mut shapes = vec![input_shape.to_vec()];
        let mut params = Vec::new();
        let mut offsets = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out = spec.output_shape(&shapes[i]).map_err(|e| match e {
                Error::Shape { axis, message } => Error::Shape {
                    axis,
                    message: format!("layer {i}: {message}"),
                },
                other => other,
            })?;
            shapes.push(out);
            offsets.push(params.len());
            params.extend(spec.param_shapes().iter().map(|s| Tensor::zeros(s)));
        }
        Ok(Sequential {
            specs,
            shapes,
            params,
            offsets,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self.params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            specs: self.specs.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            offsets: self.offsets.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = &self.shapes[0];
        if x.len() != want.iter().product::<usize>() {
            let axis = x.shape().iter().zip(want).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::shape(
                axis,
                format!("network expects input {want:?}, got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, None)
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.specs.len()),
            cols: Vec::with_capacity(self.specs.len()),
        };
        let y = self.run(x, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn run(&self, x: &Tensor<T>, mut trace: Option<&mut Trace<T>>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut act = x.data().to_vec();
        for (i, spec) in self.specs.iter().enumerate() {
            let (ins, outs) = (&self.shapes[i], &self.shapes[i + 1]);
            let p = &self.params[self.offsets[i]..];
            let mut cols = Vec::new();
            let next = match spec {
                LayerSpec::Conv3d { out_channels, .. } => {
                    let g = conv_geometry(spec, ins, outs);
                    cols = g.im2col(&act);
                    conv_apply(&g, *out_channels, p[0].data(), p[1].data(), &cols)
                }
                LayerSpec::Conv3dTransposed { in_channels, .. } => {
                    let g = conv_geometry(spec, ins, outs);
                    conv_transposed_apply(&g, *in_channels, p[0].data(), p[1].data(), &act)
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    let mut y = p[1].data().to_vec();
                    T::gemm(
                        false,
                        false,
                        *out_features,
                        1,
                        *in_features,
                        T::one(),
                        p[0].data(),
                        &act,
                        T::one(),
                        &mut y,
                    );
                    y
                }
                LayerSpec::Relu => act.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => act.clone(),
                LayerSpec::Pad3d { low, .. } => pad3d(&act, ins, outs, *low),
                LayerSpec::Crop3d { low, .. } => crop3d(&act, ins, outs, *low),
            };
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut act, next));
                t.cols.push(cols);
            } else {
                act = next;
            }
        }
        Tensor::new(self.output_shape().to_vec(), act)
    }

    /// Reverse pass from `grad_output`; accumulates parameter gradients into
    /// `grads` and returns the gradient with respect to the network input.
    pub fn backward(&self, trace: &Trace<T>, grad_output: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        if trace.inputs.len() != self.specs.len() {
            return Err(Error::Contract("trace does not belong to this network".into()));
        }
        if grad_output.len() != self.output_shape().iter().product::<usize>() {
            return Err(Error::shape(
                0,
                format!(
                    "output gradient {:?} does not match output {:?}",
                    grad_output.shape(),
                    self.output_shape()
                ),
            ));
        }
        let mut g = grad_output.data().to_vec();
        for i in (0..self.specs.len()).rev() {
            let spec = &self.specs[i];
            let (ins, outs) = (&self.shapes[i], &self.shapes[i + 1]);
            let x = &trace.inputs[i];
            let off = self.offsets[i];
            g = match spec {
                LayerSpec::Conv3d { out_channels, .. } => {
                    let geom = conv_geometry(spec, ins, outs);
                    let (dw, db) = split_pair(&mut grads.tensors, off);
                    conv_backward(
                        &geom,
                        *out_channels,
                        self.params[off].data(),
                        &trace.cols[i],
                        &g,
                        dw,
                        db,
                    )
                }
                LayerSpec::Conv3dTransposed { in_channels, .. } => {
                    let geom = conv_geometry(spec, ins, outs);
                    let (dw, db) = split_pair(&mut grads.tensors, off);
                    conv_transposed_backward(&geom, *in_channels, self.params[off].data(), x, &g, dw, db)
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    let (dw, db) = split_pair(&mut grads.tensors, off);
                    for (b, &gi) in db.iter_mut().zip(&g) {
                        *b += gi;
                    }
                    T::gemm(
                        false,
                        false,
                        *out_features,
                        *in_features,
                        1,
                        T::one(),
                        &g,
                        x,
                        T::one(),
                        dw,
                    );
                    let mut dx = vec![T::zero(); *in_features];
                    T::gemm(
                        true,
                        false,
                        *in_features,
                        1,
                        *out_features,
                        T::one(),
                        self.params[off].data(),
                        &g,
                        T::zero(),
                        &mut dx,
                    );
                    dx
                }
                LayerSpec::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => g,
                LayerSpec::Pad3d { low, .. } => crop3d(&g, outs, ins, *low),
                LayerSpec::Crop3d { low, .. } => pad3d(&g, outs, ins, *low),
            };
        }
        Tensor::new(self.shapes[0].clone(), g)
    }

    /// Backpropagates a scalar loss.
    pub fn backward_loss(&self, trace: &Trace<T>, loss: &Loss<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                loss.value.shape()
            )));
        }
        self.backward(trace, &loss.grad_output, grads)
    }
}

fn split_pair<T>(tensors: &mut [Tensor<T>], off: usize) -> (&mut [T], &mut [T]) {
    let (w, rest) = tensors[off..].split_at_mut(1);
    (&mut w[0].data, &mut rest[0].data)
}
