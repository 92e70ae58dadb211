//! Trainable layer building blocks and the ordered parameter registry.

use rand::Rng;

use crate::error::Result;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Weight initialization policy for a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(1/fan_in)`.
    Uniform,
    /// All zeros — used for output projections so every model starts as an
    /// exact identity through its residual path.
    Zero,
}

/// Ordered, named collection of trainable tensors. The order is the contract
/// shared by the optimizer (moments match by position) and the checkpoint
/// format (tensors serialize in registry order).
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        debug_assert!(
            tensor.requires_grad(),
            "registered parameter `{name}` does not require gradients"
        );
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Tensor handles in registry order.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A 2D convolution layer owning its weight and optional bias.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Stride-1 convolution with same-padding `k/2`; adjust the public
    /// fields afterwards for anything else.
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        init: Init,
    ) -> Self {
        let fan_in = (in_channels / groups) * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let wshape = Shape::new(out_channels, in_channels / groups, kernel, kernel);
        let weight = match init {
            Init::Uniform => Tensor::uniform(wshape, -bound, bound, rng),
            Init::Zero => Tensor::zeros(wshape),
        }
        .into_param();
        let bias = Some(Tensor::zeros(Shape::new(1, out_channels, 1, 1)).into_param());
        Conv2d {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
            groups,
        }
    }

    /// Overwrites the bias with a constant (e.g. 1 for a scale-map that
    /// should start at identity).
    pub fn fill_bias(&mut self, v: f64) {
        if let Some(b) = &self.bias {
            let data = vec![T::lit(v); b.numel()];
            b.load_data(&data).expect("bias fill");
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(
            tape,
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    pub fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.add(format!("{prefix}.weight"), self.weight.clone());
        if let Some(b) = &self.bias {
            params.add(format!("{prefix}.bias"), b.clone());
        }
    }
}

/// Per-pixel channel layer norm with learnable gain and shift.
pub struct LayerNormChannel<T: Scalar> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> LayerNormChannel<T> {
    pub fn new(channels: usize) -> Self {
        LayerNormChannel {
            gain: Tensor::full(Shape::new(1, channels, 1, 1), T::one()).into_param(),
            shift: Tensor::zeros(Shape::new(1, channels, 1, 1)).into_param(),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm_channel(tape, x, &self.gain, &self.shift)
    }

    pub fn collect(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.add(format!("{prefix}.gain"), self.gain.clone());
        params.add(format!("{prefix}.shift"), self.shift.clone());
    }
}
