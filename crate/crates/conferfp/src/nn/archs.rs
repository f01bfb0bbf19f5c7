//! Network builders for the supported architecture tags plus the
//! perturbation generator and discriminator.
//!
//! Every builder is deterministic in `(input_shape, classes, seed)`. The
//! classifier stacks are sized for small inputs (16x16 or 32x32); all of
//! them end in a single affine classification layer, which is what the
//! last-layer fine-tuning modes treat as "the last layer".

use super::{kaiming, Conv2d, Dense, Layer, Network, Tensor};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "small-resnet-20")]
    SmallResnet20,
    #[serde(rename = "small-resnet-32")]
    SmallResnet32,
    #[serde(rename = "vgg-16")]
    Vgg16,
    #[serde(rename = "vgg-19")]
    Vgg19,
    #[serde(rename = "densenet")]
    Densenet,
    #[serde(rename = "tiny-cnn")]
    TinyCnn,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::SmallResnet20,
        Arch::SmallResnet32,
        Arch::Vgg16,
        Arch::Vgg19,
        Arch::Densenet,
        Arch::TinyCnn,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Arch::SmallResnet20 => "small-resnet-20",
            Arch::SmallResnet32 => "small-resnet-32",
            Arch::Vgg16 => "vgg-16",
            Arch::Vgg19 => "vgg-19",
            Arch::Densenet => "densenet",
            Arch::TinyCnn => "tiny-cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        Arch::ALL.iter().copied().find(|a| a.tag() == s)
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn conv(&mut self, ic: usize, oc: usize, pad: usize) -> Layer {
        let w = kaiming(&[oc, ic, 3, 3], ic * 9, &mut self.rng);
        let b = Tensor::zeros(IxDyn(&[oc]));
        Layer::Conv2d(Conv2d { w, b, pad })
    }

    fn dense(&mut self, inp: usize, out: usize) -> Layer {
        let w = kaiming(&[out, inp], inp, &mut self.rng);
        let b = Tensor::zeros(IxDyn(&[out]));
        Layer::Dense(Dense { w, b })
    }
}

fn res_block(init: &mut Init, ch: usize) -> [Layer; 2] {
    [
        Layer::Residual(vec![init.conv(ch, ch, 1), Layer::Relu, init.conv(ch, ch, 1)]),
        Layer::Relu,
    ]
}

/// Build a classifier for `arch` over `(C, H, W)` inputs. `H` and `W` must
/// be divisible by 4 (two pooling stages).
pub fn build_classifier(arch: Arch, input_shape: &[usize], classes: usize, seed: u64) -> Network {
    assert_eq!(input_shape.len(), 3, "input shape is (C, H, W)");
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    assert!(h % 4 == 0 && w % 4 == 0, "spatial dims must be divisible by 4");
    let mut init = Init::new(seed);
    let spatial = (h / 4) * (w / 4);
    let mut layers: Vec<Layer> = Vec::new();
    match arch {
        Arch::TinyCnn => {
            layers.push(init.conv(c, 8, 1));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(init.conv(8, 16, 1));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(init.dense(16 * spatial, 48));
            layers.push(Layer::Relu);
            layers.push(init.dense(48, classes));
        }
        Arch::SmallResnet20 | Arch::SmallResnet32 => {
            let blocks = if arch == Arch::SmallResnet20 { 2 } else { 3 };
            layers.push(init.conv(c, 8, 1));
            layers.push(Layer::Relu);
            for _ in 0..blocks {
                layers.extend(res_block(&mut init, 8));
            }
            layers.push(Layer::MaxPool2);
            layers.push(init.conv(8, 16, 1));
            layers.push(Layer::Relu);
            for _ in 0..blocks {
                layers.extend(res_block(&mut init, 16));
            }
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(init.dense(16 * spatial, classes));
        }
        Arch::Vgg16 | Arch::Vgg19 => {
            let per_stage = if arch == Arch::Vgg16 { 2 } else { 3 };
            layers.push(init.conv(c, 8, 1));
            layers.push(Layer::Relu);
            for _ in 1..per_stage {
                layers.push(init.conv(8, 8, 1));
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool2);
            layers.push(init.conv(8, 16, 1));
            layers.push(Layer::Relu);
            for _ in 1..per_stage {
                layers.push(init.conv(16, 16, 1));
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(init.dense(16 * spatial, 48));
            layers.push(Layer::Relu);
            layers.push(init.dense(48, classes));
        }
        Arch::Densenet => {
            layers.push(init.conv(c, 8, 1));
            layers.push(Layer::Relu);
            layers.push(Layer::DenseCat(vec![init.conv(8, 8, 1), Layer::Relu]));
            layers.push(Layer::DenseCat(vec![init.conv(16, 8, 1), Layer::Relu]));
            layers.push(Layer::MaxPool2);
            layers.push(init.conv(24, 16, 1));
            layers.push(Layer::Relu);
            layers.push(Layer::DenseCat(vec![init.conv(16, 8, 1), Layer::Relu]));
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            layers.push(init.dense(24 * spatial, classes));
        }
    }
    Network::new(layers, input_shape.to_vec())
}

/// Parameter slots `(weight, bias)` of the final classification layer.
/// All classifier stacks end in a `Dense` layer, so this is the last pair.
pub fn final_dense_slots(net: &Network) -> (usize, usize) {
    let total = net.param_count();
    assert!(
        matches!(net.layers.last(), Some(Layer::Dense(_))),
        "classifier must end in a dense layer"
    );
    (total - 2, total - 1)
}

/// Perturbation generator: bottleneck encoder-decoder emitting a tanh-bounded
/// additive perturbation with the same shape as the input.
pub fn build_generator(input_shape: &[usize], seed: u64) -> Network {
    let c = input_shape[0];
    let mut init = Init::new(seed);
    let layers = vec![
        init.conv(c, 16, 1),
        Layer::Relu,
        init.conv(16, 16, 1),
        Layer::Relu,
        Layer::MaxPool2,
        init.conv(16, 32, 1),
        Layer::Relu,
        Layer::Upsample2,
        init.conv(32, 16, 1),
        Layer::Relu,
        init.conv(16, c, 1),
        Layer::Tanh,
    ];
    Network::new(layers, input_shape.to_vec())
}

/// Real/fake discriminator over input-shaped images; emits one sigmoid
/// probability per sample, shape `(B, 1)`.
pub fn build_discriminator(input_shape: &[usize], seed: u64) -> Network {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let mut init = Init::new(seed);
    let spatial = (h / 4) * (w / 4);
    let layers = vec![
        init.conv(c, 8, 1),
        Layer::LeakyRelu(0.2),
        Layer::MaxPool2,
        init.conv(8, 16, 1),
        Layer::LeakyRelu(0.2),
        Layer::MaxPool2,
        Layer::Flatten,
        init.dense(16 * spatial, 32),
        Layer::LeakyRelu(0.2),
        init.dense(32, 1),
        Layer::Sigmoid,
    ];
    Network::new(layers, input_shape.to_vec())
}

#[cfg(test)]
pub(crate) fn test_conv(ic: usize, oc: usize, pad: usize, seed: u64) -> Conv2d {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Conv2d {
        w: kaiming(&[oc, ic, 3, 3], ic * 9, &mut rng),
        b: kaiming(&[oc], oc, &mut rng),
        pad,
    }
}

#[cfg(test)]
pub(crate) fn test_dense(inp: usize, out: usize, seed: u64) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dense {
        w: kaiming(&[out, inp], inp, &mut rng),
        b: kaiming(&[out], out, &mut rng),
    }
}
