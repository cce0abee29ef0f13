//! DCGAN-family network builders: generator, discriminator and classifier
//! at 32x32 or larger power-of-two resolutions. The classifier shares the
//! discriminator trunk and swaps the 1-unit sigmoid head for a logit head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Primitive};
use crate::kernels;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
    Classifier,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
            Role::Classifier => "classifier",
        }
    }
}

/// Architecture parameters shared by all three builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub role: Role,
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn new(role: Role, image_size: usize) -> Self {
        NetworkSpec {
            role,
            image_size,
            channels: 1,
            latent_dim: 100,
            base_width: 64,
            num_classes: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(Error::BadNetworkSpec {
                reason: format!(
                    "image_size must be a power of two >= 32, got {}",
                    self.image_size
                ),
            });
        }
        if self.channels == 0 || self.latent_dim == 0 || self.base_width == 0 {
            return Err(Error::BadNetworkSpec {
                reason: "channels, latent_dim and base_width must be positive".into(),
            });
        }
        if self.role == Role::Classifier && self.num_classes < 2 {
            return Err(Error::BadNetworkSpec {
                reason: format!("classifier needs >= 2 classes, got {}", self.num_classes),
            });
        }
        Ok(())
    }

    /// Number of stride-2 stages between 4x4 and the image resolution.
    fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Batchnorm running statistics (not optimizer-visible parameters).
#[derive(Debug, Clone)]
pub struct BnBuffers {
    pub prefix: String,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone)]
enum Layer {
    Linear { w: usize, b: usize },
    Conv2d { w: usize, b: usize, stride: usize, padding: usize },
    ConvTranspose2d { w: usize, b: usize, stride: usize, padding: usize },
    BatchNorm2d { gamma: usize, beta: usize, buf: usize },
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    /// Reshape to [B, dims...]; empty dims flattens to (B,).
    Reshape { dims: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered layer stack with named parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<NamedTensor>,
    bn: Vec<BnBuffers>,
}

struct Builder {
    layers: Vec<Layer>,
    params: Vec<NamedTensor>,
    bn: Vec<BnBuffers>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            layers: Vec::new(),
            params: Vec::new(),
            bn: Vec::new(),
        }
    }

    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.params.push(NamedTensor {
            name,
            value: Tensor::zeros(shape),
        });
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, in_f: usize, out_f: usize) {
        let w = self.param(format!("{prefix}.w"), vec![in_f, out_f]);
        let b = self.param(format!("{prefix}.b"), vec![out_f]);
        self.layers.push(Layer::Linear { w, b });
    }

    fn conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize, stride: usize, padding: usize) {
        let w = self.param(format!("{prefix}.w"), vec![co, ci, k, k]);
        let b = self.param(format!("{prefix}.b"), vec![co]);
        self.layers.push(Layer::Conv2d { w, b, stride, padding });
    }

    fn deconv(&mut self, prefix: &str, ci: usize, co: usize, k: usize, stride: usize, padding: usize) {
        let w = self.param(format!("{prefix}.w"), vec![ci, co, k, k]);
        let b = self.param(format!("{prefix}.b"), vec![co]);
        self.layers.push(Layer::ConvTranspose2d { w, b, stride, padding });
    }

    fn batchnorm(&mut self, prefix: &str, c: usize) {
        let gamma = self.param(format!("{prefix}.gamma"), vec![c]);
        let beta = self.param(format!("{prefix}.beta"), vec![c]);
        self.bn.push(BnBuffers {
            prefix: String::from(prefix),
            running_mean: Tensor::zeros(vec![c]),
            running_var: Tensor::full(vec![c], 1.0),
        });
        self.layers.push(Layer::BatchNorm2d {
            gamma,
            beta,
            buf: self.bn.len() - 1,
        });
    }
}

/// Maps (B, latent_dim) noise to (B, channels, S, S) images in [-1, 1]:
/// a linear projection to 4x4 followed by stride-2 transposed convolutions,
/// batchnorm + relu between stages, tanh at the output.
pub fn build_generator(spec: NetworkSpec) -> Result<Network> {
    if spec.role != Role::Generator {
        return Err(Error::BadNetworkSpec {
            reason: format!("expected generator role, got {}", spec.role.as_str()),
        });
    }
    spec.validate()?;
    let stages = spec.stages();
    let c0 = spec.base_width << (stages - 1);
    let mut b = Builder::new();
    b.linear("proj", spec.latent_dim, c0 * 16);
    b.layers.push(Layer::Reshape { dims: vec![c0, 4, 4] });
    b.batchnorm("bn0", c0);
    b.layers.push(Layer::Relu);
    for i in 0..stages {
        let ci = c0 >> i;
        if i + 1 < stages {
            let co = c0 >> (i + 1);
            b.deconv(&format!("up{i}"), ci, co, 4, 2, 1);
            b.batchnorm(&format!("up{i}_bn"), co);
            b.layers.push(Layer::Relu);
        } else {
            b.deconv(&format!("up{i}"), ci, spec.channels, 4, 2, 1);
            b.layers.push(Layer::Tanh);
        }
    }
    Ok(Network {
        spec,
        layers: b.layers,
        params: b.params,
        bn: b.bn,
    })
}

/// Maps (B, channels, S, S) images to (B,) realness probabilities: stride-2
/// convolutions with leaky relu (batchnorm after the first), then a 4x4
/// valid convolution and a sigmoid.
pub fn build_discriminator(spec: NetworkSpec) -> Result<Network> {
    if spec.role != Role::Discriminator {
        return Err(Error::BadNetworkSpec {
            reason: format!("expected discriminator role, got {}", spec.role.as_str()),
        });
    }
    spec.validate()?;
    let mut b = trunk(&spec);
    b.conv("head", spec.base_width << (spec.stages() - 1), 1, 4, 1, 0);
    b.layers.push(Layer::Reshape { dims: vec![] });
    b.layers.push(Layer::Sigmoid);
    Ok(Network {
        spec,
        layers: b.layers,
        params: b.params,
        bn: b.bn,
    })
}

/// Same trunk as the discriminator; the head emits (B, num_classes) logits.
pub fn build_classifier(spec: NetworkSpec) -> Result<Network> {
    if spec.role != Role::Classifier {
        return Err(Error::BadNetworkSpec {
            reason: format!("expected classifier role, got {}", spec.role.as_str()),
        });
    }
    spec.validate()?;
    let mut b = trunk(&spec);
    b.conv(
        "head",
        spec.base_width << (spec.stages() - 1),
        spec.num_classes,
        4,
        1,
        0,
    );
    b.layers.push(Layer::Reshape {
        dims: vec![spec.num_classes],
    });
    Ok(Network {
        spec,
        layers: b.layers,
        params: b.params,
        bn: b.bn,
    })
}

/// Shared downsampling stack of the discriminator and classifier.
fn trunk(spec: &NetworkSpec) -> Builder {
    let stages = spec.stages();
    let mut b = Builder::new();
    b.conv("conv0", spec.channels, spec.base_width, 4, 2, 1);
    b.layers.push(Layer::LeakyRelu);
    for i in 1..stages {
        let ci = spec.base_width << (i - 1);
        let co = spec.base_width << i;
        b.conv(&format!("conv{i}"), ci, co, 4, 2, 1);
        b.batchnorm(&format!("bn{i}"), co);
        b.layers.push(Layer::LeakyRelu);
    }
    b
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.numel()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn buffers(&self) -> &[BnBuffers] {
        &self.bn
    }

    /// Overwrite one parameter by name (checkpoint loading).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                expected: format!("{:?}", p.value.shape()),
                got: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Overwrite one running-statistics buffer, addressed as
    /// `<prefix>.running_mean` / `<prefix>.running_var`.
    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        for buf in &mut self.bn {
            let slot = if name == format!("{}.running_mean", buf.prefix) {
                Some(&mut buf.running_mean)
            } else if name == format!("{}.running_var", buf.prefix) {
                Some(&mut buf.running_var)
            } else {
                None
            };
            if let Some(slot) = slot {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "set_buffer",
                        expected: format!("{:?}", slot.shape()),
                        got: value.shape().to_vec(),
                    });
                }
                *slot = value;
                return Ok(());
            }
        }
        Err(Error::Invalid(format!("unknown buffer {name}")))
    }

    /// Apply an in-place update to every parameter buffer, paired with the
    /// optimizer state by index.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f64])> {
        self.params
            .iter_mut()
            .map(|p| (p.name.as_str(), p.value.data_mut()))
    }

    /// Push every parameter into the graph as a leaf; `trainable = false`
    /// freezes them (values flow, gradients do not accumulate).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match self.spec.role {
            Role::Generator => shape.len() == 2 && shape[1] == self.spec.latent_dim,
            _ => {
                shape.len() == 4
                    && shape[1] == self.spec.channels
                    && shape[2] == self.spec.image_size
                    && shape[3] == self.spec.image_size
            }
        };
        if ok {
            Ok(())
        } else {
            let expected = match self.spec.role {
                Role::Generator => format!("(B, {})", self.spec.latent_dim),
                _ => format!(
                    "(B, {}, {}, {})",
                    self.spec.channels, self.spec.image_size, self.spec.image_size
                ),
            };
            Err(Error::ShapeMismatch {
                op: "forward",
                expected,
                got: shape.to_vec(),
            })
        }
    }

    /// Forward through the layer stack inside an existing graph. `bound`
    /// comes from [`Network::bind`] on the same graph. Training mode uses
    /// batch statistics and folds them into the running buffers; eval mode
    /// normalizes with the stored running statistics and mutates nothing.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &[NodeId],
        input: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        self.check_input(g.value(input).shape())?;
        let mut x = input;
        let layers = self.layers.clone();
        for layer in &layers {
            x = match layer {
                Layer::Linear { w, b } => g.apply(Primitive::Linear, &[x, bound[*w], bound[*b]])?,
                Layer::Conv2d { w, b, stride, padding } => g.apply(
                    Primitive::Conv2d {
                        stride: *stride,
                        padding: *padding,
                    },
                    &[x, bound[*w], bound[*b]],
                )?,
                Layer::ConvTranspose2d { w, b, stride, padding } => g.apply(
                    Primitive::ConvTranspose2d {
                        stride: *stride,
                        padding: *padding,
                    },
                    &[x, bound[*w], bound[*b]],
                )?,
                Layer::BatchNorm2d { gamma, beta, buf } => match mode {
                    Mode::Train => {
                        let y = g.apply(
                            Primitive::BatchNorm2d { eps: BN_EPS },
                            &[x, bound[*gamma], bound[*beta]],
                        )?;
                        self.update_running_stats(*buf, g.value(x));
                        y
                    }
                    Mode::Eval => {
                        let bnb = &self.bn[*buf];
                        let m = g.constant(bnb.running_mean.clone());
                        let v = g.constant(bnb.running_var.clone());
                        g.batchnorm_fixed(x, bound[*gamma], bound[*beta], m, v, BN_EPS)?
                    }
                },
                Layer::LeakyRelu => g.apply(Primitive::LeakyRelu { slope: LEAKY_SLOPE }, &[x])?,
                Layer::Relu => g.apply(Primitive::Relu, &[x])?,
                Layer::Tanh => g.apply(Primitive::Tanh, &[x])?,
                Layer::Sigmoid => g.apply(Primitive::Sigmoid, &[x])?,
                Layer::Reshape { dims } => {
                    let batch = g.value(x).shape()[0];
                    let mut shape = vec![batch];
                    shape.extend_from_slice(dims);
                    g.apply(Primitive::Reshape { shape }, &[x])?
                }
            };
        }
        Ok(x)
    }

    fn update_running_stats(&mut self, buf: usize, x: &Tensor) {
        let (b, c, h, w) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        );
        let (mean, var) = kernels::channel_stats(x.data(), b, c, h * w);
        let bnb = &mut self.bn[buf];
        for (rm, m) in bnb.running_mean.data_mut().iter_mut().zip(&mean) {
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
        }
        for (rv, v) in bnb.running_var.data_mut().iter_mut().zip(&var) {
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
        }
    }

    /// One-off forward on a standalone graph; returns the output values.
    pub fn infer(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, &bound, x, mode)?;
        Ok(g.value(y).clone())
    }
}

/// DCGAN-style initialization: conv/linear weights from N(0, 0.02),
/// batchnorm scales from N(1, 0.02), every bias zero. Running statistics
/// reset to mean 0 / var 1. Deterministic per seed.
pub fn init_weights(net: &mut Network, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let weight = Normal::new(0.0, INIT_STD).unwrap();
    let scale = Normal::new(1.0, INIT_STD).unwrap();
    for p in &mut net.params {
        let dist = if p.name.ends_with(".gamma") {
            Some(scale)
        } else if p.name.ends_with(".w") {
            Some(weight)
        } else {
            None
        };
        match dist {
            Some(d) => {
                for v in p.value.data_mut() {
                    *v = d.sample(&mut rng);
                }
            }
            None => {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
    }
    for buf in &mut net.bn {
        for v in buf.running_mean.data_mut() {
            *v = 0.0;
        }
        for v in buf.running_var.data_mut() {
            *v = 1.0;
        }
    }
    // Keep the stream position independent of parameter iteration details.
    let _: u64 = rng.gen();
}
