//! Minimal CPU neural-network engine.
//!
//! Small sequential networks over `ndarray` with explicit forward/backward
//! passes. The engine exposes exactly what the rest of the toolkit needs and
//! nothing more:
//!
//! - gradients with respect to **inputs** (adversarial perturbations flow
//!   through frozen networks),
//! - gradients with respect to **parameters**, accumulated into caller-owned
//!   slots so several loss terms can share one update,
//! - per-parameter update masks (last-layer-only fine-tuning),
//! - deterministic initialization from a seed.
//!
//! Shapes follow the batch-first convention: `(B, C, H, W)` for images and
//! `(B, F)` for dense features.

mod archs;
mod conv;
mod loss;

pub use archs::{
    build_classifier, build_discriminator, build_generator, final_dense_slots, Arch,
};
pub use loss::{cross_entropy, cw_margin, distillation_kl, log_softmax, softmax};

use crate::error::{Error, Result};
use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, IxDyn, Slice};
use rand::Rng;

pub type Tensor = ArrayD<f32>;

/// Affine layer, weights `(out, in)`, bias `(out,)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// 3x3-style convolution, stride 1, weights `(oc, ic, kh, kw)`, bias `(oc,)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
    /// 2x2 max pooling, stride 2. Spatial dims must be even.
    MaxPool2,
    /// 2x nearest-neighbour upsampling.
    Upsample2,
    Flatten,
    /// `y = x + body(x)`; body must preserve shape.
    Residual(Vec<Layer>),
    /// `y = concat(x, body(x))` along the channel axis.
    DenseCat(Vec<Layer>),
}

/// Per-layer record of the forward pass, consumed by `backward`.
pub enum TapeNode {
    Leaf(Tensor),
    Branch(Tensor, Vec<TapeNode>),
}

impl TapeNode {
    fn input(&self) -> &Tensor {
        match self {
            TapeNode::Leaf(x) | TapeNode::Branch(x, _) => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Per-sample input shape, e.g. `[1, 16, 16]`.
    pub input_shape: Vec<usize>,
}

fn layer_param_count(layer: &Layer) -> usize {
    match layer {
        Layer::Dense(_) | Layer::Conv2d(_) => 2,
        Layer::Residual(body) | Layer::DenseCat(body) => {
            body.iter().map(layer_param_count).sum()
        }
        _ => 0,
    }
}

fn collect_params<'a>(layers: &'a [Layer], out: &mut Vec<&'a Tensor>) {
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                out.push(&d.w);
                out.push(&d.b);
            }
            Layer::Conv2d(c) => {
                out.push(&c.w);
                out.push(&c.b);
            }
            Layer::Residual(body) | Layer::DenseCat(body) => collect_params(body, out),
            _ => {}
        }
    }
}

fn collect_params_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Tensor>) {
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                out.push(&mut d.w);
                out.push(&mut d.b);
            }
            Layer::Conv2d(c) => {
                out.push(&mut c.w);
                out.push(&mut c.b);
            }
            Layer::Residual(body) | Layer::DenseCat(body) => collect_params_mut(body, out),
            _ => {}
        }
    }
}

fn forward_layers(layers: &[Layer], mut x: Tensor, mut tape: Option<&mut Vec<TapeNode>>) -> Tensor {
    for layer in layers {
        let y = match layer {
            Layer::Dense(d) => dense_forward(d, &x),
            Layer::Conv2d(c) => conv::forward(&x, &c.w, &c.b, c.pad),
            Layer::Relu => x.mapv(|v| v.max(0.0)),
            Layer::LeakyRelu(a) => x.mapv(|v| if v > 0.0 { v } else { a * v }),
            Layer::Sigmoid => x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Layer::Tanh => x.mapv(f32::tanh),
            Layer::MaxPool2 => maxpool2_forward(&x),
            Layer::Upsample2 => upsample2_forward(&x),
            Layer::Flatten => {
                let b = x.shape()[0];
                let f: usize = x.shape()[1..].iter().product();
                x.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[b, f]))
                    .expect("flatten reshape")
            }
            Layer::Residual(body) => {
                let mut sub = tape.as_ref().map(|_| Vec::new());
                let fx = forward_layers(body, x.clone(), sub.as_mut());
                if let (Some(t), Some(s)) = (tape.as_deref_mut(), sub) {
                    t.push(TapeNode::Branch(x.clone(), s));
                }
                &x + &fx
            }
            Layer::DenseCat(body) => {
                let mut sub = tape.as_ref().map(|_| Vec::new());
                let fx = forward_layers(body, x.clone(), sub.as_mut());
                if let (Some(t), Some(s)) = (tape.as_deref_mut(), sub) {
                    t.push(TapeNode::Branch(x.clone(), s));
                }
                concatenate(Axis(1), &[x.view(), fx.view()])
                    .expect("channel concat")
                    .as_standard_layout()
                    .to_owned()
            }
        };
        if !matches!(layer, Layer::Residual(_) | Layer::DenseCat(_)) {
            if let Some(t) = tape.as_deref_mut() {
                t.push(TapeNode::Leaf(x));
            }
        }
        x = y;
    }
    x
}

/// Accumulator for parameter gradients, indexed by parameter slot.
pub type GradSink<'a> = &'a mut dyn FnMut(usize, Tensor);

fn backward_layers(
    layers: &[Layer],
    tape: &[TapeNode],
    mut grad: Tensor,
    sink: GradSink,
    slot_base: usize,
) -> Tensor {
    debug_assert_eq!(layers.len(), tape.len());
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for layer in layers {
        offsets.push(acc);
        acc += layer_param_count(layer);
    }
    for i in (0..layers.len()).rev() {
        let x = tape[i].input();
        let slot = slot_base + offsets[i];
        grad = match &layers[i] {
            Layer::Dense(d) => dense_backward(d, x, &grad, sink, slot),
            Layer::Conv2d(c) => {
                let (dx, dw, db) = conv::backward(x, &c.w, c.pad, &grad);
                sink(slot, dw);
                sink(slot + 1, db);
                dx
            }
            Layer::Relu => {
                let mut g = grad;
                g.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0
                    }
                });
                g
            }
            Layer::LeakyRelu(a) => {
                let mut g = grad;
                g.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv *= a
                    }
                });
                g
            }
            Layer::Sigmoid => {
                let mut g = grad;
                g.zip_mut_with(x, |gv, &xv| {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    *gv *= s * (1.0 - s);
                });
                g
            }
            Layer::Tanh => {
                let mut g = grad;
                g.zip_mut_with(x, |gv, &xv| {
                    let t = xv.tanh();
                    *gv *= 1.0 - t * t;
                });
                g
            }
            Layer::MaxPool2 => maxpool2_backward(x, &grad),
            Layer::Upsample2 => upsample2_backward(&grad),
            Layer::Flatten => grad
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(x.shape()))
                .expect("unflatten reshape"),
            Layer::Residual(body) => {
                let sub = match &tape[i] {
                    TapeNode::Branch(_, s) => s,
                    TapeNode::Leaf(_) => unreachable!("residual tape node"),
                };
                let through = backward_layers(body, sub, grad.clone(), sink, slot);
                grad + through
            }
            Layer::DenseCat(body) => {
                let sub = match &tape[i] {
                    TapeNode::Branch(_, s) => s,
                    TapeNode::Leaf(_) => unreachable!("densecat tape node"),
                };
                let cx = x.shape()[1];
                let gx = grad
                    .slice_axis(Axis(1), Slice::from(0..cx))
                    .to_owned()
                    .into_dyn();
                let gf = grad
                    .slice_axis(Axis(1), Slice::from(cx..))
                    .to_owned()
                    .into_dyn();
                let through = backward_layers(body, sub, gf, sink, slot);
                gx + through
            }
        };
    }
    grad
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Self {
        Network {
            layers,
            input_shape,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(layer_param_count).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        collect_params(&self.layers, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        collect_params_mut(&mut self.layers, &mut out);
        out
    }

    /// Zero tensors shaped like the parameters, for use as gradient slots.
    pub fn grad_slots(&self) -> Vec<Tensor> {
        self.params()
            .iter()
            .map(|p| Tensor::zeros(p.raw_dim()))
            .collect()
    }

    /// Forward pass without recording anything.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        forward_layers(&self.layers, x.clone(), None)
    }

    /// Forward pass recording the tape needed for `backward`.
    pub fn forward_traced(&self, x: &Tensor) -> (Tensor, Vec<TapeNode>) {
        let mut tape = Vec::with_capacity(self.layers.len());
        let y = forward_layers(&self.layers, x.clone(), Some(&mut tape));
        (y, tape)
    }

    /// Backpropagate `grad_out` through the recorded tape. Parameter
    /// gradients are accumulated into `grads` when provided; the return
    /// value is the gradient with respect to the network input.
    pub fn backward(
        &self,
        tape: &[TapeNode],
        grad_out: Tensor,
        grads: Option<&mut [Tensor]>,
    ) -> Tensor {
        match grads {
            Some(gs) => {
                let mut sink = |slot: usize, g: Tensor| {
                    gs[slot] += &g;
                };
                backward_layers(&self.layers, tape, grad_out, &mut sink, 0)
            }
            None => {
                let mut sink = |_: usize, _: Tensor| {};
                backward_layers(&self.layers, tape, grad_out, &mut sink, 0)
            }
        }
    }

    /// Class logits for an image batch `(B, C, H, W)` -> `(B, K)`.
    pub fn logits(&self, images: &Tensor) -> ndarray::Array2<f32> {
        self.forward(images)
            .into_dimensionality::<Ix2>()
            .expect("classifier output is 2-d")
    }

    /// Softmax probabilities for an image batch.
    pub fn probs(&self, images: &Tensor) -> ndarray::Array2<f32> {
        softmax(&self.logits(images))
    }

    /// Argmax labels for an image batch.
    pub fn predict(&self, images: &Tensor) -> Vec<usize> {
        argmax_rows(&self.logits(images))
    }

    /// Max absolute difference across all parameters of two networks.
    pub fn max_param_delta(&self, other: &Network) -> f32 {
        self.params()
            .iter()
            .zip(other.params())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max)
    }
}

pub fn argmax_rows(m: &ndarray::Array2<f32>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn dense_forward(d: &Dense, x: &Tensor) -> Tensor {
    let x2 = x.view().into_dimensionality::<Ix2>().expect("dense input 2-d");
    let w2 = d.w.view().into_dimensionality::<Ix2>().unwrap();
    let b1 = d.b.view().into_dimensionality::<Ix1>().unwrap();
    let mut y = x2.dot(&w2.t());
    y += &b1;
    y.into_dyn()
}

fn dense_backward(d: &Dense, x: &Tensor, grad: &Tensor, sink: GradSink, slot: usize) -> Tensor {
    let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
    let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
    let w2 = d.w.view().into_dimensionality::<Ix2>().unwrap();
    let dw = g2.t().dot(&x2);
    let db = g2.sum_axis(Axis(0));
    sink(slot, dw.into_dyn());
    sink(slot + 1, db.into_dyn());
    g2.dot(&w2).into_dyn()
}

fn maxpool2_forward(x: &Tensor) -> Tensor {
    let (b, c, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let mut y = Tensor::zeros(IxDyn(&[b, c, h / 2, w / 2]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut m = f32::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            m = m.max(x[[bi, ci, 2 * i + di, 2 * j + dj]]);
                        }
                    }
                    y[[bi, ci, i, j]] = m;
                }
            }
        }
    }
    y
}

fn maxpool2_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let (b, c, h, w) = dims4(x);
    let mut dx = Tensor::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let (mut mi, mut mj, mut m) = (0, 0, f32::NEG_INFINITY);
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = x[[bi, ci, 2 * i + di, 2 * j + dj]];
                            if v > m {
                                m = v;
                                mi = di;
                                mj = dj;
                            }
                        }
                    }
                    dx[[bi, ci, 2 * i + mi, 2 * j + mj]] += grad[[bi, ci, i, j]];
                }
            }
        }
    }
    dx
}

fn upsample2_forward(x: &Tensor) -> Tensor {
    let (b, c, h, w) = dims4(x);
    let mut y = Tensor::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    for di in 0..2 {
                        for dj in 0..2 {
                            y[[bi, ci, 2 * i + di, 2 * j + dj]] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (b, c, h2, w2) = dims4(grad);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += grad[[bi, ci, 2 * i + di, 2 * j + dj]];
                        }
                    }
                    dx[[bi, ci, i, j]] = s;
                }
            }
        }
    }
    dx
}

pub(crate) fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a (B, C, H, W) tensor");
    (s[0], s[1], s[2], s[3])
}

/// Momentum SGD over the parameter slots of one network.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(net: &Network, lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: net.grad_slots(),
        }
    }

    /// Apply one update. `mask`, when given, marks which parameter slots may
    /// change; unmasked slots are left bit-identical.
    pub fn step(&mut self, net: &mut Network, grads: &[Tensor], mask: Option<&[bool]>) {
        let mut params = net.params_mut();
        assert_eq!(params.len(), grads.len());
        for (i, p) in params.iter_mut().enumerate() {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            let v = &mut self.velocity[i];
            v.zip_mut_with(&grads[i], |vv, &gv| {
                *vv = self.momentum * *vv - self.lr * gv;
            });
            **p += &*v;
        }
    }
}

/// Gaussian sample via Box-Muller, driven by any `Rng`.
pub fn normal_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (normal_sample(rng) * std) as f32).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Binary weights container: magic, version, then per-parameter dims + f32
/// little-endian data in traversal order. See docs/FORMATS.md.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"CFPW";

pub fn save_weights(net: &Network, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    let params = net.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.ndim() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("bin.tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load weights saved by `save_weights` into a structurally identical
/// network (same layer stack, hence same parameter shapes).
pub fn load_weights(net: &mut Network, path: &std::path::Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let integrity = |field: &str, reason: String| Error::Integrity {
        path: path.display().to_string(),
        field: field.to_string(),
        reason,
    };
    if bytes.len() < 12 || &bytes[0..4] != WEIGHTS_MAGIC {
        return Err(integrity("magic", "not a weights file".into()));
    }
    let mut off = 4;
    let read_u32 = |b: &[u8], o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let read_u64 = |b: &[u8], o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    let version = read_u32(&bytes, off);
    off += 4;
    if version != 1 {
        return Err(integrity("version", format!("unsupported version {version}")));
    }
    let count = read_u32(&bytes, off) as usize;
    off += 4;
    let mut params = net.params_mut();
    if count != params.len() {
        return Err(integrity(
            "param_count",
            format!("file has {count} tensors, network expects {}", params.len()),
        ));
    }
    for (idx, p) in params.iter_mut().enumerate() {
        if off + 4 > bytes.len() {
            return Err(integrity("tensor", format!("truncated at tensor {idx}")));
        }
        let ndim = read_u32(&bytes, off) as usize;
        off += 4;
        if off + 8 * ndim > bytes.len() {
            return Err(integrity("dims", format!("truncated dims at tensor {idx}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&bytes, off) as usize);
            off += 8;
        }
        if dims != p.shape() {
            return Err(integrity(
                "shape",
                format!("tensor {idx}: file {:?} vs network {:?}", dims, p.shape()),
            ));
        }
        let n: usize = dims.iter().product();
        if off + 4 * n > bytes.len() {
            return Err(integrity("data", format!("truncated data at tensor {idx}")));
        }
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            data.push(f32::from_le_bytes(
                bytes[off + 4 * k..off + 4 * k + 4].try_into().unwrap(),
            ));
        }
        off += 4 * n;
        **p = Tensor::from_shape_vec(IxDyn(&dims), data).unwrap();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64) -> Network {
        build_classifier(Arch::TinyCnn, &[1, 8, 8], 4, seed)
    }

    fn random_batch(net: &Network, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![b];
        shape.extend_from_slice(&net.input_shape);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        Tensor::from_shape_vec(IxDyn(&shape), data).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let net = tiny_net(0);
        let x = random_batch(&net, 3, 1);
        let y = net.logits(&x);
        assert_eq!(y.shape(), &[3, 4]);
    }

    #[test]
    fn deterministic_init() {
        let a = tiny_net(7);
        let b = tiny_net(7);
        assert_eq!(a.max_param_delta(&b), 0.0);
        let c = tiny_net(8);
        assert!(a.max_param_delta(&c) > 0.0);
    }

    #[test]
    fn weights_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny_net(3);
        let path = dir.path().join("weights.bin");
        save_weights(&net, &path).unwrap();
        let mut fresh = tiny_net(99);
        load_weights(&mut fresh, &path).unwrap();
        let x = random_batch(&net, 5, 2);
        assert_eq!(net.logits(&x), fresh.logits(&x));
    }

    #[test]
    fn load_rejects_wrong_structure() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny_net(3);
        let path = dir.path().join("weights.bin");
        save_weights(&net, &path).unwrap();
        let mut other = build_classifier(Arch::Vgg16, &[1, 8, 8], 4, 0);
        let err = load_weights(&mut other, &path).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }));
    }

    /// Central-difference check of parameter and input gradients on a small
    /// network with every layer kind exercised.
    #[test]
    fn gradients_match_finite_differences() {
        let layers = vec![
            Layer::Conv2d(archs::test_conv(1, 2, 1, 11)),
            Layer::Relu,
            Layer::Residual(vec![
                Layer::Conv2d(archs::test_conv(2, 2, 1, 12)),
                Layer::Tanh,
            ]),
            Layer::MaxPool2,
            Layer::DenseCat(vec![
                Layer::Conv2d(archs::test_conv(2, 1, 1, 13)),
                Layer::LeakyRelu(0.2),
            ]),
            Layer::Flatten,
            Layer::Dense(archs::test_dense(3 * 4 * 4, 3, 14)),
            Layer::Sigmoid,
        ];
        let net = Network::new(layers, vec![1, 8, 8]);
        let x = random_batch(&net, 2, 42);

        // scalar objective: sum of outputs squared
        let value = |net: &Network, x: &Tensor| -> f64 {
            net.forward(x).iter().map(|&v| (v as f64) * (v as f64)).sum()
        };

        let (y, tape) = net.forward_traced(&x);
        let grad_out = y.mapv(|v| 2.0 * v);
        let mut grads = net.grad_slots();
        let dx = net.backward(&tape, grad_out, Some(&mut grads));

        let eps = 1e-3f32;
        // input gradient spot checks
        for &flat in &[0usize, 17, 63, 100] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[flat] += eps;
            xm.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (value(&net, &xp) - value(&net, &xm)) / (2.0 * eps as f64);
            let an = dx.as_slice().unwrap()[flat] as f64;
            assert!(
                (fd - an).abs() <= 1e-2 * fd.abs().max(1.0),
                "input grad mismatch at {flat}: fd={fd} an={an}"
            );
        }
        // parameter gradient spot checks: one entry per slot
        for slot in 0..net.param_count() {
            let probe = grads[slot].len() / 2;
            let an = grads[slot].as_slice().unwrap()[probe] as f64;
            let mut netp = net.clone();
            netp.params_mut()[slot].as_slice_mut().unwrap()[probe] += eps;
            let mut netm = net.clone();
            netm.params_mut()[slot].as_slice_mut().unwrap()[probe] -= eps;
            let fd = (value(&netp, &x) - value(&netm, &x)) / (2.0 * eps as f64);
            assert!(
                (fd - an).abs() <= 1e-2 * fd.abs().max(1.0),
                "param grad mismatch at slot {slot}: fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn sgd_mask_freezes_slots() {
        let mut net = tiny_net(5);
        let before: Vec<Tensor> = net.params().iter().map(|p| (*p).clone()).collect();
        let mut grads = net.grad_slots();
        for g in &mut grads {
            g.fill(1.0);
        }
        let mut mask = vec![false; net.param_count()];
        mask[0] = true;
        let mut opt = Sgd::new(&net, 0.1, 0.9);
        opt.step(&mut net, &grads, Some(&mask));
        let after = net.params();
        assert_ne!(before[0], *after[0]);
        for i in 1..before.len() {
            assert_eq!(before[i], *after[i], "slot {i} should be frozen");
        }
    }

    #[test]
    fn upsample_then_pool_is_identity_for_constant_blocks() {
        let x = Tensor::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample2_forward(&x);
        let down = maxpool2_forward(&up);
        assert_eq!(x, down);
    }
}
