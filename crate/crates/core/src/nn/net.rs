//! Sequential layer stacks over a flat parameter vector.
//!
//! A [`Network`] only describes the architecture. Parameters live in a plain
//! slice owned by the caller, which keeps meta-learning arithmetic (adaptation
//! copies, coordinate-wise averaging, finite differences) trivial.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Fully connected on the flattened sample.
    Linear { inputs: usize, outputs: usize },
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    /// Per-channel normalization over batch and spatial positions; learnable
    /// scale and shift, running mean/variance kept as buffers.
    BatchNorm { channels: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    /// 2×2 max pooling, stride 2.
    MaxPool2,
    /// Nearest-neighbour ×2 upsampling.
    Upsample2,
    Reshape { shape: Vec<usize> },
}

impl Layer {
    fn param_count(&self) -> usize {
        match *self {
            Layer::Linear { inputs, outputs } => inputs * outputs + outputs,
            Layer::BatchNorm { channels } => 2 * channels,
            Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            _ => 0,
        }
    }

    fn buffer_count(&self) -> usize {
        match *self {
            Layer::BatchNorm { channels } => 2 * channels,
            _ => 0,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        let bad = |what: &str| Err(Error::Config(format!("{what}: input shape {input:?}")));
        match self {
            Layer::Linear { inputs, outputs } => {
                if numel != *inputs {
                    return bad(&format!("linear expects {inputs} features"));
                }
                Ok(vec![*outputs])
            }
            Layer::Relu | Layer::LeakyRelu { .. } | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::BatchNorm { channels } => {
                if input.first() != Some(channels) {
                    return bad(&format!("batch norm expects {channels} channels"));
                }
                Ok(input.to_vec())
            }
            Layer::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return bad(&format!("conv expects [{in_channels}, h, w]"));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < *kernel || w < *kernel || *stride == 0 {
                    return bad("conv kernel larger than padded input");
                }
                Ok(vec![*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            Layer::MaxPool2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return bad("max pool expects [c, h>=2, w>=2]");
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            Layer::Upsample2 => {
                if input.len() != 3 {
                    return bad("upsample expects [c, h, w]");
                }
                Ok(vec![input[0], input[1] * 2, input[2] * 2])
            }
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != numel {
                    return bad(&format!("cannot reshape to {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }
}

/// How batch-norm layers pick their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training-mode forward).
    Batch,
    /// Stored running statistics (evaluation-mode forward).
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkSpec", into = "NetworkSpec")]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    param_offsets: Vec<usize>,
    buffer_offsets: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetworkSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

impl TryFrom<NetworkSpec> for Network {
    type Error = Error;
    fn try_from(s: NetworkSpec) -> Result<Self> {
        Network::new(s.layers, s.input_shape)
    }
}

impl From<Network> for NetworkSpec {
    fn from(n: Network) -> Self {
        NetworkSpec { layers: n.layers, input_shape: n.input_shape }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    Norm { xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<f64>, var: Vec<f64>, batch_stats: bool },
    Pool { argmax: Vec<usize> },
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    acts: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace always holds the input")
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.acts[0]
    }
}

pub struct Grads<T> {
    pub params: Vec<T>,
    pub input: Option<Tensor<T>>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        let mut net = Self {
            layers,
            input_shape,
            shapes: vec![],
            param_offsets: vec![],
            buffer_offsets: vec![],
        };
        net.layout()?;
        Ok(net)
    }

    fn layout(&mut self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        let mut po = vec![0];
        let mut bo = vec![0];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
            po.push(po.last().unwrap() + layer.param_count());
            bo.push(bo.last().unwrap() + layer.buffer_count());
        }
        self.shapes = shapes;
        self.param_offsets = po;
        self.buffer_offsets = bo;
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn num_params(&self) -> usize {
        *self.param_offsets.last().unwrap()
    }

    pub fn num_buffers(&self) -> usize {
        *self.buffer_offsets.last().unwrap()
    }

    /// Uniform fan-in initialization (bound 1/√fan_in) for weights and biases;
    /// unit scale and zero shift for batch norm.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params()];
        for (l, layer) in self.layers.iter().enumerate() {
            let o = self.param_offsets[l];
            match *layer {
                Layer::Linear { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f64).sqrt();
                    for v in &mut p[o..o + inputs * outputs + outputs] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in &mut p[o..o + out_channels * fan_in + out_channels] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                Layer::BatchNorm { channels } => {
                    p[o..o + channels].fill(1.0);
                }
                _ => {}
            }
        }
        p
    }

    /// Running mean 0 and running variance 1 for every batch-norm channel.
    pub fn init_buffers(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.num_buffers()];
        for (l, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm { channels } = *layer {
                let o = self.buffer_offsets[l];
                b[o + channels..o + 2 * channels].fill(1.0);
            }
        }
        b
    }

    pub fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        if x.sample_shape().iter().product::<usize>() != self.input_len() || x.batch() == 0 {
            return Err(Error::Input(format!(
                "input of shape {:?} does not match network input {:?}",
                x.shape, self.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        params: &[T],
        buffers: &[f64],
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Trace<T>> {
        self.check_input(x)?;
        if params.len() != self.num_params() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if mode == BnMode::Running && buffers.len() != self.num_buffers() {
            return Err(Error::Input("missing running statistics".into()));
        }
        let b = x.batch();
        let mut input = x.clone();
        let mut s = vec![b];
        s.extend_from_slice(&self.input_shape);
        input.shape = s;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = &params[self.param_offsets[l]..self.param_offsets[l + 1]];
            let buf = if buffers.is_empty() {
                &[][..]
            } else {
                &buffers[self.buffer_offsets[l]..self.buffer_offsets[l + 1]]
            };
            let inp = acts.last().unwrap();
            let mut out_shape = vec![b];
            out_shape.extend_from_slice(&self.shapes[l + 1]);
            let (out, cache) = forward_layer(layer, p, buf, inp, out_shape, mode);
            acts.push(out);
            caches.push(cache);
        }
        Ok(Trace { acts, caches })
    }

    /// Convenience forward returning only the output.
    pub fn predict<T: Real>(
        &self,
        params: &[T],
        buffers: &[f64],
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let mut trace = self.forward(params, buffers, x, mode)?;
        Ok(trace.acts.pop().unwrap())
    }

    /// Reverse pass from `grad_out` (same shape as the output).
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        trace: &Trace<T>,
        grad_out: Tensor<T>,
        need_input: bool,
    ) -> Grads<T> {
        let mut gp = vec![T::zero(); self.num_params()];
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            let (lo, hi) = (self.param_offsets[l], self.param_offsets[l + 1]);
            let want_input = l > 0 || need_input;
            g = backward_layer(
                &self.layers[l],
                &params[lo..hi],
                &trace.acts[l],
                &trace.acts[l + 1],
                &trace.caches[l],
                &g,
                &mut gp[lo..hi],
                want_input,
            );
        }
        Grads { params: gp, input: if need_input { Some(g) } else { None } }
    }

    /// Exponential moving update of running statistics from a batch-mode trace.
    pub fn update_running<T: Real>(&self, buffers: &mut [f64], trace: &Trace<T>, momentum: f64) {
        for (l, cache) in trace.caches.iter().enumerate() {
            if let Cache::Norm { mean, var, batch_stats: true, .. } = cache {
                let o = self.buffer_offsets[l];
                let c = mean.len();
                let m = trace.acts[l].data.len() / c;
                let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                for k in 0..c {
                    buffers[o + k] = (1.0 - momentum) * buffers[o + k] + momentum * mean[k];
                    buffers[o + c + k] =
                        (1.0 - momentum) * buffers[o + c + k] + momentum * var[k] * unbias;
                }
            }
        }
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    // (batch, channels, spatial)
    let b = shape[0];
    let c = shape[1];
    let spatial = shape[2..].iter().product::<usize>();
    (b, c, spatial)
}

fn forward_layer<T: Real>(
    layer: &Layer,
    p: &[T],
    buf: &[f64],
    x: &Tensor<T>,
    out_shape: Vec<usize>,
    mode: BnMode,
) -> (Tensor<T>, Cache<T>) {
    match *layer {
        Layer::Linear { inputs, outputs } => {
            let b = x.batch();
            let (w, bias) = p.split_at(inputs * outputs);
            let mut y = Vec::with_capacity(b * outputs);
            for r in 0..b {
                let xr = &x.data[r * inputs..(r + 1) * inputs];
                for o in 0..outputs {
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    let mut acc = bias[o];
                    for i in 0..inputs {
                        acc += wr[i] * xr[i];
                    }
                    y.push(acc);
                }
            }
            (Tensor { shape: out_shape, data: y }, Cache::None)
        }
        Layer::Relu => (
            Tensor {
                shape: out_shape,
                data: x.data.iter().map(|&v| if v.re() > 0.0 { v } else { T::zero() }).collect(),
            },
            Cache::None,
        ),
        Layer::LeakyRelu { slope } => (
            Tensor {
                shape: out_shape,
                data: x.data.iter().map(|&v| if v.re() > 0.0 { v } else { v.scale(slope) }).collect(),
            },
            Cache::None,
        ),
        Layer::Sigmoid => (
            Tensor {
                shape: out_shape,
                data: x.data.iter().map(|&v| sigmoid(v)).collect(),
            },
            Cache::None,
        ),
        Layer::BatchNorm { channels } => {
            let (b, c, sp) = channel_layout(&x.shape);
            debug_assert_eq!(c, channels);
            let m = (b * sp) as f64;
            let (gamma, beta) = p.split_at(channels);
            let mut xhat = vec![T::zero(); x.data.len()];
            let mut y = vec![T::zero(); x.data.len()];
            let mut inv_stds = Vec::with_capacity(c);
            let mut means = Vec::with_capacity(c);
            let mut vars = Vec::with_capacity(c);
            let batch_stats = mode == BnMode::Batch;
            for k in 0..c {
                let idx = |r: usize, s: usize| (r * c + k) * sp + s;
                let (mean, inv_std) = if batch_stats {
                    let mut mean = T::zero();
                    for r in 0..b {
                        for s in 0..sp {
                            mean += x.data[idx(r, s)];
                        }
                    }
                    mean = mean.scale(1.0 / m);
                    let mut var = T::zero();
                    for r in 0..b {
                        for s in 0..sp {
                            let d = x.data[idx(r, s)] - mean;
                            var += d * d;
                        }
                    }
                    var = var.scale(1.0 / m);
                    means.push(mean.re());
                    vars.push(var.re());
                    (mean, T::one() / (var + T::from_f64(BN_EPS)).sqrt())
                } else {
                    let mean = buf[k];
                    let var = buf[channels + k];
                    means.push(mean);
                    vars.push(var);
                    (T::from_f64(mean), T::from_f64(1.0 / (var + BN_EPS).sqrt()))
                };
                inv_stds.push(inv_std);
                for r in 0..b {
                    for s in 0..sp {
                        let i = idx(r, s);
                        let h = (x.data[i] - mean) * inv_std;
                        xhat[i] = h;
                        y[i] = gamma[k] * h + beta[k];
                    }
                }
            }
            (
                Tensor { shape: out_shape, data: y },
                Cache::Norm { xhat, inv_std: inv_stds, mean: means, var: vars, batch_stats },
            )
        }
        Layer::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let (wt, bias) = p.split_at(out_channels * in_channels * kernel * kernel);
            let mut y = vec![T::zero(); b * out_channels * oh * ow];
            for r in 0..b {
                for o in 0..out_channels {
                    let ybase = (r * out_channels + o) * oh * ow;
                    for v in &mut y[ybase..ybase + oh * ow] {
                        *v = bias[o];
                    }
                    for c in 0..in_channels {
                        let xbase = (r * in_channels + c) * h * w;
                        let wbase = (o * in_channels + c) * kernel * kernel;
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                let wv = wt[wbase + ki * kernel + kj];
                                for i in 0..oh {
                                    let xi = (i * stride + ki) as isize - padding as isize;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    let xrow = xbase + xi as usize * w;
                                    let yrow = ybase + i * ow;
                                    for j in 0..ow {
                                        let xj = (j * stride + kj) as isize - padding as isize;
                                        if xj < 0 || xj >= w as isize {
                                            continue;
                                        }
                                        y[yrow + j] += wv * x.data[xrow + xj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (Tensor { shape: out_shape, data: y }, Cache::None)
        }
        Layer::MaxPool2 => {
            let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let mut y = Vec::with_capacity(b * c * oh * ow);
            let mut arg = Vec::with_capacity(b * c * oh * ow);
            for plane in 0..b * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = base + 2 * i * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let cand = base + (2 * i + di) * w + 2 * j + dj;
                            if x.data[cand].re() > x.data[best].re() {
                                best = cand;
                            }
                        }
                        y.push(x.data[best]);
                        arg.push(best);
                    }
                }
            }
            (Tensor { shape: out_shape, data: y }, Cache::Pool { argmax: arg })
        }
        Layer::Upsample2 => {
            let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let mut y = Vec::with_capacity(b * c * oh * ow);
            for plane in 0..b * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        y.push(x.data[base + (i / 2) * w + j / 2]);
                    }
                }
            }
            (Tensor { shape: out_shape, data: y }, Cache::None)
        }
        Layer::Reshape { .. } => {
            (Tensor { shape: out_shape, data: x.data.clone() }, Cache::None)
        }
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v.re() >= 0.0 {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_layer<T: Real>(
    layer: &Layer,
    p: &[T],
    x: &Tensor<T>,
    y: &Tensor<T>,
    cache: &Cache<T>,
    gy: &Tensor<T>,
    gp: &mut [T],
    want_input: bool,
) -> Tensor<T> {
    let shape = x.shape.clone();
    match *layer {
        Layer::Linear { inputs, outputs } => {
            let b = x.batch();
            let (w, _) = p.split_at(inputs * outputs);
            let (gw, gb) = gp.split_at_mut(inputs * outputs);
            let mut gx = if want_input { vec![T::zero(); b * inputs] } else { vec![] };
            for r in 0..b {
                let xr = &x.data[r * inputs..(r + 1) * inputs];
                for o in 0..outputs {
                    let g = gy.data[r * outputs + o];
                    gb[o] += g;
                    let gwr = &mut gw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        gwr[i] += g * xr[i];
                    }
                    if want_input {
                        let wr = &w[o * inputs..(o + 1) * inputs];
                        let gxr = &mut gx[r * inputs..(r + 1) * inputs];
                        for i in 0..inputs {
                            gxr[i] += g * wr[i];
                        }
                    }
                }
            }
            Tensor { shape, data: gx }
        }
        Layer::Relu => Tensor {
            shape,
            data: x
                .data
                .iter()
                .zip(&gy.data)
                .map(|(&v, &g)| if v.re() > 0.0 { g } else { T::zero() })
                .collect(),
        },
        Layer::LeakyRelu { slope } => Tensor {
            shape,
            data: x
                .data
                .iter()
                .zip(&gy.data)
                .map(|(&v, &g)| if v.re() > 0.0 { g } else { g.scale(slope) })
                .collect(),
        },
        Layer::Sigmoid => Tensor {
            shape,
            data: y.data.iter().zip(&gy.data).map(|(&s, &g)| g * s * (T::one() - s)).collect(),
        },
        Layer::BatchNorm { channels } => {
            let Cache::Norm { xhat, inv_std, batch_stats, .. } = cache else {
                unreachable!("batch norm trace without statistics")
            };
            let (b, c, sp) = channel_layout(&x.shape);
            let m = (b * sp) as f64;
            let (gamma, _) = p.split_at(channels);
            let (ggamma, gbeta) = gp.split_at_mut(channels);
            let mut gx = vec![T::zero(); x.data.len()];
            for k in 0..c {
                let idx = |r: usize, s: usize| (r * c + k) * sp + s;
                let mut sum_g = T::zero();
                let mut sum_gh = T::zero();
                for r in 0..b {
                    for s in 0..sp {
                        let i = idx(r, s);
                        sum_g += gy.data[i];
                        sum_gh += gy.data[i] * xhat[i];
                    }
                }
                ggamma[k] += sum_gh;
                gbeta[k] += sum_g;
                if !want_input {
                    continue;
                }
                let gk = gamma[k] * inv_std[k];
                if *batch_stats {
                    let mean_g = sum_g.scale(1.0 / m);
                    let mean_gh = sum_gh.scale(1.0 / m);
                    for r in 0..b {
                        for s in 0..sp {
                            let i = idx(r, s);
                            gx[i] = gk * (gy.data[i] - mean_g - xhat[i] * mean_gh);
                        }
                    }
                } else {
                    for r in 0..b {
                        for s in 0..sp {
                            let i = idx(r, s);
                            gx[i] = gk * gy.data[i];
                        }
                    }
                }
            }
            Tensor { shape, data: gx }
        }
        Layer::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
            let (oh, ow) = (gy.shape[2], gy.shape[3]);
            let nw = out_channels * in_channels * kernel * kernel;
            let (wt, _) = p.split_at(nw);
            let (gw, gb) = gp.split_at_mut(nw);
            let mut gx = if want_input { vec![T::zero(); x.data.len()] } else { vec![] };
            for r in 0..b {
                for o in 0..out_channels {
                    let ybase = (r * out_channels + o) * oh * ow;
                    for &g in &gy.data[ybase..ybase + oh * ow] {
                        gb[o] += g;
                    }
                    for c in 0..in_channels {
                        let xbase = (r * in_channels + c) * h * w;
                        let wbase = (o * in_channels + c) * kernel * kernel;
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                let wv = wt[wbase + ki * kernel + kj];
                                let mut acc = T::zero();
                                for i in 0..oh {
                                    let xi = (i * stride + ki) as isize - padding as isize;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    let xrow = xbase + xi as usize * w;
                                    let yrow = ybase + i * ow;
                                    for j in 0..ow {
                                        let xj = (j * stride + kj) as isize - padding as isize;
                                        if xj < 0 || xj >= w as isize {
                                            continue;
                                        }
                                        let g = gy.data[yrow + j];
                                        acc += g * x.data[xrow + xj as usize];
                                        if want_input {
                                            gx[xrow + xj as usize] += g * wv;
                                        }
                                    }
                                }
                                gw[wbase + ki * kernel + kj] += acc;
                            }
                        }
                    }
                }
            }
            Tensor { shape, data: gx }
        }
        Layer::MaxPool2 => {
            let Cache::Pool { argmax } = cache else { unreachable!("pool trace without indices") };
            let mut gx = vec![T::zero(); x.data.len()];
            for (&src, &g) in argmax.iter().zip(&gy.data) {
                gx[src] += g;
            }
            Tensor { shape, data: gx }
        }
        Layer::Upsample2 => {
            let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let ow = 2 * w;
            let mut gx = vec![T::zero(); x.data.len()];
            for plane in 0..b * c {
                let gbase = plane * 4 * h * w;
                let xbase = plane * h * w;
                for i in 0..2 * h {
                    for j in 0..ow {
                        gx[xbase + (i / 2) * w + j / 2] += gy.data[gbase + i * ow + j];
                    }
                }
            }
            Tensor { shape, data: gx }
        }
        Layer::Reshape { .. } => Tensor { shape, data: gy.data.clone() },
    }
}
