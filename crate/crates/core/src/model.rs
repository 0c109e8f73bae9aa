//! The desk-scale classifier and its parameter store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{spatial_attention, DEFAULT_ATTENTION_KERNEL};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// A learnable tensor together with its SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub momentum: Tensor<T>,
}

/// Ordered, uniquely named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        let momentum = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name,
            value,
            momentum,
        });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a tape leaf, in storage order.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }
}

/// Anything the attacks can differentiate through.
pub trait Classifier<T: Scalar> {
    fn num_classes(&self) -> usize;

    fn is_inference(&self) -> bool;

    /// Mean cross-entropy and its gradient with respect to the pixel input.
    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)>;

    /// Top-1 class per sample (ties resolve to the lowest class index).
    fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmallCnnConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of the stem conv and the two conv-pool blocks.
    pub widths: [usize; 3],
    pub attention_kernel: usize,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            in_channels: 1,
            image_size: 28,
            widths: [8, 16, 32],
            attention_kernel: DEFAULT_ATTENTION_KERNEL,
        }
    }
}

impl SmallCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.image_size, 28 | 32) {
            return Err(Error::InvalidArgument(format!(
                "image_size must be 28 or 32, got {}",
                self.image_size
            )));
        }
        if self.attention_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "attention_kernel must be odd, got {}",
                self.attention_kernel
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("zero-sized layer in model config".into()));
        }
        Ok(())
    }
}

/// Variables created by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Pixel-space input in `[0, 1]`.
    pub input: Var,
    /// Attention map `[N, 1, H, H]` applied after the stem conv.
    pub attention: Var,
    pub logits: Var,
    /// Parameter leaves in [`ModelParams`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a, T> {
    pub input_grad: bool,
    pub param_grad: bool,
    /// Substitute this map for the computed attention.
    pub attention_override: Option<&'a Tensor<T>>,
}

/// `conv3x3 -> relu -> spatial attention -> [conv3x3 -> relu -> maxpool] x 2
/// -> global average pool -> linear`.
///
/// Inputs are raw pixels in `[0, 1]`; per-channel normalisation happens
/// inside the forward pass so attacks operate in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnn<T> {
    config: SmallCnnConfig,
    params: ModelParams<T>,
    norm_mean: Vec<T>,
    norm_std: Vec<T>,
    mode: Mode,
}

pub const PARAM_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "attention.weight",
    "attention.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "head.weight",
    "head.bias",
];

fn param_shapes(config: &SmallCnnConfig) -> [Vec<usize>; 10] {
    let [c1, c2, c3] = config.widths;
    let (cin, k, classes) = (config.in_channels, config.attention_kernel, config.num_classes);
    [
        vec![c1, cin, 3, 3],
        vec![c1],
        vec![1, 2, k, k],
        vec![1],
        vec![c2, c1, 3, 3],
        vec![c2],
        vec![c3, c2, 3, 3],
        vec![c3],
        vec![classes, c3],
        vec![classes],
    ]
}

impl<T: Scalar> SmallCnn<T> {
    /// Weights and biases uniform in `±1/sqrt(fan_in)` of the owning layer.
    pub fn new(config: SmallCnnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let mut params = ModelParams::new();
        let mut bound = 0.0;
        for (name, shape) in PARAM_NAMES.iter().zip(shapes) {
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                bound = 1.0 / (fan_in as f64).sqrt();
            }
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            let value = Tensor::from_vec(shape, data)?;
            params.insert(*name, value)?;
        }
        let cin = config.in_channels;
        Ok(Self {
            norm_mean: vec![T::zero(); cin],
            norm_std: vec![T::one(); cin],
            config,
            params,
            mode: Mode::Train,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(
        config: SmallCnnConfig,
        params: ModelParams<T>,
        norm_mean: Vec<T>,
        norm_std: Vec<T>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if params.len() != shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), got) in PARAM_NAMES.iter().zip(&shapes).zip(params.iter()) {
            if got.name != *name || got.value.shape() != shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {:?} {:?} does not match expected {name:?} {shape:?}",
                    got.name,
                    got.value.shape(),
                )));
            }
        }
        let mut model = Self {
            config,
            params,
            norm_mean: Vec::new(),
            norm_std: Vec::new(),
            mode: Mode::Train,
        };
        model.set_normalization(norm_mean, norm_std)?;
        Ok(model)
    }

    pub fn config(&self) -> &SmallCnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn normalization(&self) -> (&[T], &[T]) {
        (&self.norm_mean, &self.norm_std)
    }

    pub fn set_normalization(&mut self, mean: Vec<T>, std: Vec<T>) -> Result<()> {
        let c = self.config.in_channels;
        if mean.len() != c || std.len() != c {
            return Err(Error::InvalidArgument(format!(
                "normalization needs {c} channels, got {} means / {} stds",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        self.norm_mean = mean;
        self.norm_std = std;
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        opts: ForwardOptions<'_, T>,
    ) -> Result<ForwardPass> {
        let [_, c, h, w] = x.dims4("small_cnn")?;
        let size = self.config.image_size;
        if c != self.config.in_channels || h != size || w != size {
            return Err(Error::shape(
                "small_cnn",
                format!(
                    "input {:?} does not match [N, {}, {size}, {size}]",
                    x.shape(),
                    self.config.in_channels
                ),
            ));
        }
        let input = tape.leaf(x, opts.input_grad);
        let params = self.params.register(tape, opts.param_grad);
        self.forward_on(tape, input, &params, opts)
    }

    /// Forward pass over variables already on `tape`: `input` is the raw
    /// `[N, C, H, H]` batch and `params` follow [`PARAM_NAMES`] order.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        params: &[Var],
        opts: ForwardOptions<'_, T>,
    ) -> Result<ForwardPass> {
        let size = self.config.image_size;
        let &[w1, b1, wa, ba, w2, b2, w3, b3, wh, bh] = params else {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter variables, got {}",
                PARAM_NAMES.len(),
                params.len()
            )));
        };

        let scale: Vec<T> = self.norm_std.iter().map(|&s| T::one() / s).collect();
        let shift: Vec<T> = self
            .norm_mean
            .iter()
            .zip(&self.norm_std)
            .map(|(&m, &s)| -m / s)
            .collect();
        let z = tape.channel_affine(input, &scale, &shift)?;

        let z = tape.conv2d(z, w1, b1, 1, 1)?;
        let z = tape.relu(z)?;
        let attention = match opts.attention_override {
            Some(map) => {
                let [n, _, _, _] = tape.value(z).dims4("small_cnn")?;
                if map.shape() != [n, 1, size, size] {
                    return Err(Error::shape(
                        "small_cnn",
                        format!("attention override {:?} != [{n}, 1, {size}, {size}]", map.shape()),
                    ));
                }
                tape.leaf(map.clone(), false)
            }
            None => spatial_attention(tape, z, wa, ba, size)?,
        };
        let z = tape.mul(z, attention)?;

        let z = tape.conv2d(z, w2, b2, 1, 1)?;
        let z = tape.relu(z)?;
        let z = tape.max_pool2(z)?;
        let z = tape.conv2d(z, w3, b3, 1, 1)?;
        let z = tape.relu(z)?;
        let z = tape.max_pool2(z)?;
        let z = tape.global_avg_pool(z)?;
        let logits = tape.linear(z, wh, bh)?;
        Ok(ForwardPass {
            input,
            attention,
            logits,
            params: params.to_vec(),
        })
    }

    /// Attention map for a batch, without gradients.
    pub fn attention(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x.clone(), ForwardOptions::default())?;
        Ok(tape.value(pass.attention).clone())
    }
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let &[n, k] = logits.shape() else {
        return Err(Error::shape("argmax", format!("expected [N, K], got {:?}", logits.shape())));
    };
    Ok((0..n)
        .map(|r| {
            let row = &logits.data()[r * k..][..k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

impl<T: Scalar> Classifier<T> for SmallCnn<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn is_inference(&self) -> bool {
        self.mode == Mode::Inference
    }

    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        let mut tape = Tape::new();
        let pass = self.forward(
            &mut tape,
            x.clone(),
            ForwardOptions {
                input_grad: true,
                ..Default::default()
            },
        )?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = grads.take(pass.input).expect("input requires grad");
        Ok((value, g))
    }

    fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x.clone(), ForwardOptions::default())?;
        argmax_rows(tape.value(pass.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn logits_and_attention_shapes() {
        let mut rng = stream_rng(1, Stream::Init, 0);
        let model = SmallCnn::<f64>::new(SmallCnnConfig::default(), &mut rng).unwrap();
        let x = Tensor::full([2, 1, 28, 28], 0.3);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, x, ForwardOptions::default()).unwrap();
        assert_eq!(tape.value(pass.logits).shape(), &[2, 10]);
        assert_eq!(tape.value(pass.attention).shape(), &[2, 1, 28, 28]);
    }

    #[test]
    fn parameter_count_matches_layer_sum() {
        for (cfg, expected) in [
            (SmallCnnConfig::default(), {
                // conv1 + attention + conv2 + conv3 + head, weights and biases
                (8 * 9 + 8) + (2 * 49 + 1) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32) + (10 * 32 + 10)
            }),
            (
                SmallCnnConfig {
                    in_channels: 3,
                    image_size: 32,
                    widths: [4, 6, 10],
                    attention_kernel: 3,
                    num_classes: 7,
                },
                (4 * 3 * 9 + 4) + (2 * 9 + 1) + (6 * 4 * 9 + 6) + (10 * 6 * 9 + 10) + (7 * 10 + 7),
            ),
        ] {
            let model = SmallCnn::<f32>::new(cfg, &mut stream_rng(0, Stream::Init, 0)).unwrap();
            assert_eq!(model.params().element_count(), expected);
        }
    }

    #[test]
    fn rejects_bad_image_size_and_duplicate_names() {
        let cfg = SmallCnnConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(SmallCnn::<f32>::new(cfg, &mut stream_rng(0, Stream::Init, 0)).is_err());
        let mut p = ModelParams::<f32>::new();
        p.insert("a", Tensor::zeros([1])).unwrap();
        assert!(p.insert("a", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn every_param_has_matching_momentum() {
        let model = SmallCnn::<f32>::new(SmallCnnConfig::default(), &mut stream_rng(3, Stream::Init, 0)).unwrap();
        for p in model.params().iter() {
            assert_eq!(p.value.shape(), p.momentum.shape());
        }
    }

    #[test]
    fn attention_override_replaces_map() {
        let model = SmallCnn::<f64>::new(SmallCnnConfig::default(), &mut stream_rng(2, Stream::Init, 0)).unwrap();
        let x = Tensor::full([1, 1, 28, 28], 0.5);
        let ov = Tensor::full([1, 1, 28, 28], 0.25);
        let mut tape = Tape::new();
        let pass = model
            .forward(
                &mut tape,
                x,
                ForwardOptions {
                    attention_override: Some(&ov),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(tape.value(pass.attention), &ov);
    }
}
