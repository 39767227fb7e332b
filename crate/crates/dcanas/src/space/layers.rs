//! Network building blocks shared by the search supernet and the evaluation
//! target network.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RunningStats, Scalar, Tape, Tensor};
use crate::error::Result;

use std::cell::RefCell;
use std::rc::Rc;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Bias-free 2-d convolution with He-normal init.
pub struct Conv2d<E: Scalar> {
    pub weight: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Scalar> Conv2d<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Tensor::randn(&[c_out, c_in, k, k], std, rng).requires_grad_(true),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        tape.conv2d(x, &self.weight, self.stride, self.pad)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
    }
}

/// Depthwise convolution (one filter per channel), optionally dilated.
pub struct DepthwiseConv2d<E: Scalar> {
    pub weight: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl<E: Scalar> DepthwiseConv2d<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let std = (2.0 / (k * k) as f64).sqrt();
        DepthwiseConv2d {
            weight: Tensor::randn(&[channels, k, k], std, rng).requires_grad_(true),
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        tape.depthwise_conv2d(x, &self.weight, self.stride, self.pad, self.dilation)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
    }
}

pub struct BatchNorm<E: Scalar> {
    pub affine: Option<(Tensor<E>, Tensor<E>)>,
    pub running: Rc<RefCell<RunningStats<E>>>,
}

impl<E: Scalar> BatchNorm<E> {
    pub fn new(channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                Tensor::filled(&[channels], E::one()).requires_grad_(true),
                Tensor::zeros(&[channels]).requires_grad_(true),
            )
        });
        BatchNorm {
            affine,
            running: RunningStats::new(channels),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let affine = self.affine.as_ref().map(|(g, b)| (g, b));
        tape.batch_norm(x, affine, &self.running, training, BN_MOMENTUM, BN_EPS)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        if let Some((g, b)) = &self.affine {
            out.push((format!("{prefix}.gamma"), g.clone()));
            out.push((format!("{prefix}.beta"), b.clone()));
        }
    }
}

pub struct Linear<E: Scalar> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        let std = (1.0 / in_features as f64).sqrt();
        Linear {
            weight: Tensor::randn(&[out_features, in_features], std, rng).requires_grad_(true),
            bias: Tensor::zeros(&[out_features]).requires_grad_(true),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        tape.linear(x, &self.weight, &self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// relu → conv → bn, the standard preprocessing block.
pub struct ReluConvBn<E: Scalar> {
    conv: Conv2d<E>,
    bn: BatchNorm<E>,
}

impl<E: Scalar> ReluConvBn<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        affine: bool,
    ) -> Self {
        ReluConvBn {
            conv: Conv2d::new(rng, c_in, c_out, k, stride, pad),
            bn: BatchNorm::new(c_out, affine),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let h = tape.relu(x);
        let h = self.conv.forward(tape, &h)?;
        self.bn.forward(tape, &h, training)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }
}

/// Halves spatial size while keeping channel count via two offset stride-2
/// 1x1 convolutions whose outputs are concatenated.
pub struct FactorizedReduce<E: Scalar> {
    conv1: Conv2d<E>,
    conv2: Conv2d<E>,
    bn: BatchNorm<E>,
}

impl<E: Scalar> FactorizedReduce<E> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, affine: bool) -> Self {
        let half = c_out / 2;
        FactorizedReduce {
            conv1: Conv2d::new(rng, c_in, half, 1, 2, 0),
            conv2: Conv2d::new(rng, c_in, c_out - half, 1, 2, 0),
            bn: BatchNorm::new(c_out, affine),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let h = tape.relu(x);
        let a = self.conv1.forward(tape, &h)?;
        let shifted = tape.crop_tl(&h)?;
        let b = self.conv2.forward(tape, &shifted)?;
        let cat = tape.concat_channels(&[a, b])?;
        self.bn.forward(tape, &cat, training)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }
}

/// Separable convolution: two stacked (relu → depthwise → pointwise → bn)
/// blocks; the stride sits in the first depthwise.
pub struct SepConv<E: Scalar> {
    dw1: DepthwiseConv2d<E>,
    pw1: Conv2d<E>,
    bn1: BatchNorm<E>,
    dw2: DepthwiseConv2d<E>,
    pw2: Conv2d<E>,
    bn2: BatchNorm<E>,
}

impl<E: Scalar> SepConv<E> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, k: usize, stride: usize, affine: bool) -> Self {
        let pad = k / 2;
        SepConv {
            dw1: DepthwiseConv2d::new(rng, channels, k, stride, pad, 1),
            pw1: Conv2d::new(rng, channels, channels, 1, 1, 0),
            bn1: BatchNorm::new(channels, affine),
            dw2: DepthwiseConv2d::new(rng, channels, k, 1, pad, 1),
            pw2: Conv2d::new(rng, channels, channels, 1, 1, 0),
            bn2: BatchNorm::new(channels, affine),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let h = tape.relu(x);
        let h = self.dw1.forward(tape, &h)?;
        let h = self.pw1.forward(tape, &h)?;
        let h = self.bn1.forward(tape, &h, training)?;
        let h = tape.relu(&h);
        let h = self.dw2.forward(tape, &h)?;
        let h = self.pw2.forward(tape, &h)?;
        self.bn2.forward(tape, &h, training)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.dw1.collect_params(&format!("{prefix}.dw1"), out);
        self.pw1.collect_params(&format!("{prefix}.pw1"), out);
        self.bn1.collect_params(&format!("{prefix}.bn1"), out);
        self.dw2.collect_params(&format!("{prefix}.dw2"), out);
        self.pw2.collect_params(&format!("{prefix}.pw2"), out);
        self.bn2.collect_params(&format!("{prefix}.bn2"), out);
    }
}

/// Dilated separable convolution: relu → dilated depthwise → pointwise → bn.
pub struct DilConv<E: Scalar> {
    dw: DepthwiseConv2d<E>,
    pw: Conv2d<E>,
    bn: BatchNorm<E>,
}

impl<E: Scalar> DilConv<E> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, k: usize, stride: usize, affine: bool) -> Self {
        let dilation = 2;
        let pad = dilation * (k - 1) / 2;
        DilConv {
            dw: DepthwiseConv2d::new(rng, channels, k, stride, pad, dilation),
            pw: Conv2d::new(rng, channels, channels, 1, 1, 0),
            bn: BatchNorm::new(channels, affine),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        let h = tape.relu(x);
        let h = self.dw.forward(tape, &h)?;
        let h = self.pw.forward(tape, &h)?;
        self.bn.forward(tape, &h, training)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.dw.collect_params(&format!("{prefix}.dw"), out);
        self.pw.collect_params(&format!("{prefix}.pw"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }
}
