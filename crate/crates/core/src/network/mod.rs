//! The detector: a stack of convolution / max-pool layers ending in a
//! parameter-free region head.
//!
//! Batches are `[N, C, H, W]`. Convolutions run per sample through
//! [`Exec::map`]; batch norm couples the samples and runs on the whole
//! batch. Per-sample weight gradients are summed in sample order, so results
//! do not depend on the execution strategy or thread count.

pub mod config;
mod detect;
pub mod region;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{mix_seed, Exec};
use crate::tensor::ops::{
    batchnorm_backward_slices, batchnorm_infer, batchnorm_train, conv2d_backward_sample,
    conv2d_forward_sample, leaky, leaky_grad, maxpool_backward_sample, maxpool_forward_sample,
    BatchNormCache, BatchNormState,
};
use crate::tensor::{finite_difference_check as check, ConvGeometry, Differentiable, GradCheckReport, Parameter, Real, Tensor};

pub use config::{
    format_anchor_list, parse_anchor_list, required_filters, Activation, ConvSpec, LayerSpec, NetworkConfig,
    RegionHeadSpec,
};
pub use detect::forward_detect;

/// Batch-norm parameters of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Real = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        let st = BatchNormState::<T>::identity(channels);
        BatchNormParams {
            gamma: Parameter::new(Tensor::from_vec(&[channels], st.gamma).unwrap()),
            beta: Parameter::new(Tensor::from_vec(&[channels], st.beta).unwrap()),
            running_mean: st.running_mean,
            running_var: st.running_var,
        }
    }

    fn state(&self) -> BatchNormState<T> {
        BatchNormState {
            gamma: self.gamma.value.data().to_vec(),
            beta: self.beta.value.data().to_vec(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
        }
    }

    fn cast<U: Real>(&self) -> BatchNormParams<U> {
        let conv = |v: &Vec<T>| Tensor::from_vec(&[v.len()], v.clone()).unwrap().cast::<U>().into_data();
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Real = f32> {
    pub spec: ConvSpec,
    pub channels: usize,
    /// `[filters, channels, size, size]`
    pub weights: Parameter<T>,
    /// Present when the layer is not batch-normalized.
    pub bias: Option<Parameter<T>>,
    pub batch_norm: Option<BatchNormParams<T>>,
}

impl<T: Real> ConvLayer<T> {
    /// Fresh layer: kernel weights uniform in `±sqrt(1/(C·k·k))`, zero bias,
    /// identity batch norm.
    pub fn initialized(spec: ConvSpec, channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = channels * spec.size * spec.size;
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = spec.filters * fan_in;
        let w: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        let weights = Parameter::new(
            Tensor::from_vec(&[spec.filters, channels, spec.size, spec.size], w).unwrap(),
        );
        let (bias, batch_norm) = if spec.batch_normalize {
            (None, Some(BatchNormParams::identity(spec.filters)))
        } else {
            (Some(Parameter::new(Tensor::zeros(&[spec.filters]))), None)
        };
        ConvLayer {
            spec,
            channels,
            weights,
            bias,
            batch_norm,
        }
    }

    fn geometry(&self, height: usize, width: usize) -> ConvGeometry {
        ConvGeometry {
            channels: self.channels,
            height,
            width,
            filters: self.spec.filters,
            kernel: self.spec.size,
            stride: self.spec.stride,
            pad: self.spec.pad,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.value.len()
            + self.bias.as_ref().map_or(0, |b| b.value.len())
            + self.batch_norm.as_ref().map_or(0, |b| 2 * b.gamma.value.len())
    }

    fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            spec: self.spec,
            channels: self.channels,
            weights: self.weights.cast(),
            bias: self.bias.as_ref().map(Parameter::cast),
            batch_norm: self.batch_norm.as_ref().map(BatchNormParams::cast),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T: Real = f32> {
    Conv(ConvLayer<T>),
    MaxPool,
}

/// One row of [`Network::summary`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub kind: &'static str,
    pub output: [usize; 3],
    pub params: usize,
}

#[derive(Clone, Debug)]
enum LayerTrace<T: Real> {
    Conv {
        input: Tensor<T>,
        bn: Option<BatchNormCache<T>>,
        /// Post-activation output, kept for the leaky-ReLU derivative.
        output: Option<Tensor<T>>,
    },
    Pool {
        input_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
}

/// Everything the backward pass needs from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T: Real = f32> {
    layers: Vec<LayerTrace<T>>,
}

impl<T: Real> Trace<T> {
    /// Hash of every piecewise branch taken (activation signs, pool winners).
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for layer in &self.layers {
            match layer {
                LayerTrace::Conv {
                    output: Some(out), ..
                } => out.data().iter().for_each(|&y| eat(u64::from(y > T::zero()))),
                LayerTrace::Conv { .. } => {}
                LayerTrace::Pool { argmax, .. } => argmax.iter().for_each(|&i| eat(u64::from(i))),
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    config: NetworkConfig,
    layers: Vec<Layer<T>>,
    exec: Exec,
}

/// Validates `config` and builds a freshly initialized network. Layer `i`
/// draws its weights from a stream derived from `(seed, i)`.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network<f32>> {
    Network::new(config, seed)
}

impl<T: Real> Network<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut channels = config.channels;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, spec) in config.layers.iter().enumerate() {
            match spec {
                LayerSpec::Convolutional(c) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
                    layers.push(Layer::Conv(ConvLayer::initialized(*c, channels, &mut rng)));
                    channels = c.filters;
                }
                LayerSpec::MaxPool => layers.push(Layer::MaxPool),
            }
        }
        Ok(Network {
            config: config.clone(),
            layers,
            exec: Exec::default(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn head(&self) -> &RegionHeadSpec {
        &self.config.head
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Convolution layers in network order.
    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::MaxPool => None,
        })
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::MaxPool => None,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_layers().map(ConvLayer::param_count).sum()
    }

    /// Per-layer output shape and parameter count for the configured input.
    pub fn summary(&self) -> Vec<LayerSummary> {
        let (mut c, mut h, mut w) = (
            self.config.channels,
            self.config.input_height,
            self.config.input_width,
        );
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(conv) => {
                    let g = conv.geometry(h, w);
                    (c, h, w) = (g.filters, g.out_height(), g.out_width());
                    LayerSummary {
                        kind: "convolutional",
                        output: [c, h, w],
                        params: conv.param_count(),
                    }
                }
                Layer::MaxPool => {
                    (h, w) = (h / 2, w / 2);
                    LayerSummary {
                        kind: "maxpool",
                        output: [c, h, w],
                        params: 0,
                    }
                }
            })
            .collect()
    }

    /// All trainable parameters in a fixed order: per convolution the
    /// kernel, then either the bias or batch-norm gamma and beta.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for layer in self.conv_layers_mut() {
            out.push(&mut layer.weights);
            if let Some(b) = layer.bias.as_mut() {
                out.push(b);
            }
            if let Some(bn) = layer.batch_norm.as_mut() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        for layer in self.conv_layers() {
            out.push(&layer.weights);
            if let Some(b) = layer.bias.as_ref() {
                out.push(b);
            }
            if let Some(bn) = layer.batch_norm.as_ref() {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    pub fn reset_momentum(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::reset_momentum);
    }

    /// Checksum over all parameter values and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0;
        for layer in self.conv_layers() {
            h = h.rotate_left(7) ^ layer.weights.value.checksum();
            if let Some(b) = &layer.bias {
                h = h.rotate_left(7) ^ b.value.checksum();
            }
            if let Some(bn) = &layer.batch_norm {
                h = h.rotate_left(7) ^ bn.gamma.value.checksum();
                h = h.rotate_left(7) ^ bn.beta.value.checksum();
                for v in [&bn.running_mean, &bn.running_var] {
                    let t = Tensor::from_vec(&[v.len()], v.clone()).unwrap();
                    h = h.rotate_left(7) ^ t.checksum();
                }
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(c.cast()),
                    Layer::MaxPool => Layer::MaxPool,
                })
                .collect(),
            exec: self.exec,
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let [n, c, h, w] = input.shape() else {
            return Err(Error::config(format!(
                "network input must be [N,C,H,W], got {:?}",
                input.shape()
            )));
        };
        if *c != self.config.channels {
            return Err(Error::config(format!(
                "network expects {} channels, got {c}",
                self.config.channels
            )));
        }
        let stride = self.config.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::config(format!(
                "input {w}x{h} is not a multiple of the total stride {stride}"
            )));
        }
        Ok((*n, *h, *w))
    }

    /// Inference forward pass (running batch-norm statistics).
    pub fn forward_infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_pass(input, false)?.0)
    }

    /// Training forward pass: batch statistics, running statistics updated,
    /// and a trace for [`Network::backward`].
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let (out, trace, running) = self.forward_pass(input, true)?;
        let mut running = running.into_iter();
        for layer in self.conv_layers_mut() {
            if let Some(bn) = layer.batch_norm.as_mut() {
                let (m, v) = running.next().expect("one update per batch-norm layer");
                bn.running_mean = m;
                bn.running_var = v;
            }
        }
        Ok((out, trace.expect("training pass records a trace")))
    }

    #[allow(clippy::type_complexity)]
    fn forward_pass(
        &self,
        input: &Tensor<T>,
        train: bool,
    ) -> Result<(Tensor<T>, Option<Trace<T>>, Vec<(Vec<T>, Vec<T>)>)> {
        let (n, mut h, mut w) = self.check_input(input)?;
        let exec = self.exec;
        let mut x = input.clone();
        let mut traces = Vec::new();
        let mut running = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(conv) => {
                    let g = conv.geometry(h, w);
                    let per = g.out_len();
                    let bias = conv.bias.as_ref().map(|b| b.value.data());
                    let weights = conv.weights.value.data();
                    let xs = &x;
                    let parts = exec.map(n, |s| {
                        let mut o = vec![T::zero(); per];
                        conv2d_forward_sample(xs.outer(s), weights, bias, &g, &mut o);
                        o
                    });
                    let mut z = Vec::with_capacity(n * per);
                    parts.into_iter().for_each(|p| z.extend(p));
                    let area = g.out_area();
                    let mut bn_cache = None;
                    if let Some(bn) = &conv.batch_norm {
                        let mut out = vec![T::zero(); z.len()];
                        if train {
                            let mut rm = bn.running_mean.clone();
                            let mut rv = bn.running_var.clone();
                            bn_cache = Some(batchnorm_train(
                                &z,
                                n,
                                g.filters,
                                area,
                                bn.gamma.value.data(),
                                bn.beta.value.data(),
                                &mut rm,
                                &mut rv,
                                &mut out,
                            ));
                            running.push((rm, rv));
                        } else {
                            batchnorm_infer(&z, n, g.filters, area, &bn.state(), &mut out);
                        }
                        z = out;
                    }
                    let leaky_act = conv.spec.activation == Activation::Leaky;
                    if leaky_act {
                        z.iter_mut().for_each(|v| *v = leaky(*v));
                    }
                    let y = Tensor::from_vec(&[n, g.filters, g.out_height(), g.out_width()], z)?;
                    if train {
                        traces.push(LayerTrace::Conv {
                            input: std::mem::replace(&mut x, y.clone()),
                            bn: bn_cache,
                            output: leaky_act.then(|| y.clone()),
                        });
                    }
                    x = y;
                    (h, w) = (g.out_height(), g.out_width());
                }
                Layer::MaxPool => {
                    let c = x.shape()[1];
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::config(format!("maxpool input {w}x{h} is not even")));
                    }
                    let per = c * (h / 2) * (w / 2);
                    let xs = &x;
                    let parts = exec.map(n, |s| {
                        let mut o = vec![T::zero(); per];
                        let mut a = vec![0u32; per];
                        maxpool_forward_sample(xs.outer(s), c, h, w, &mut o, &mut a);
                        (o, a)
                    });
                    let mut y = Vec::with_capacity(n * per);
                    let mut argmax = Vec::with_capacity(n * per);
                    for (o, a) in parts {
                        y.extend(o);
                        argmax.extend(a);
                    }
                    if train {
                        traces.push(LayerTrace::Pool {
                            input_shape: x.shape().to_vec(),
                            argmax,
                        });
                    }
                    (h, w) = (h / 2, w / 2);
                    x = Tensor::from_vec(&[n, c, h, w], y)?;
                }
            }
        }
        let trace = train.then_some(Trace { layers: traces });
        Ok((x, trace, running))
    }

    /// Back-propagates `dout` (gradient w.r.t. the network output) and
    /// accumulates parameter gradients.
    pub fn backward(&mut self, trace: &Trace<T>, dout: &Tensor<T>) -> Result<()> {
        if trace.layers.len() != self.layers.len() {
            return Err(Error::config("trace does not belong to this network"));
        }
        let exec = self.exec;
        let mut grad = dout.clone();
        let count = self.layers.len();
        for (idx, (layer, lt)) in self
            .layers
            .iter_mut()
            .zip(&trace.layers)
            .enumerate()
            .rev()
        {
            match (layer, lt) {
                (Layer::Conv(conv), LayerTrace::Conv { input, bn, output }) => {
                    let n = input.shape()[0];
                    let g = conv.geometry(input.shape()[2], input.shape()[3]);
                    if grad.len() != n * g.out_len() {
                        return Err(Error::config("output gradient shape mismatch"));
                    }
                    let mut dz = grad.into_data();
                    if let Some(y) = output {
                        for (d, &v) in dz.iter_mut().zip(y.data()) {
                            *d = *d * leaky_grad(v);
                        }
                    }
                    if let (Some(bnp), Some(cache)) = (conv.batch_norm.as_mut(), bn) {
                        let mut dx = vec![T::zero(); dz.len()];
                        let gamma = bnp.gamma.value.data().to_vec();
                        let BatchNormParams { gamma: pg, beta: pb, .. } = bnp;
                        batchnorm_backward_slices(
                            &dz,
                            cache,
                            &gamma,
                            n,
                            g.filters,
                            g.out_area(),
                            pg.gradient.data_mut(),
                            pb.gradient.data_mut(),
                            &mut dx,
                        );
                        dz = dx;
                    }
                    let need_dx = idx > 0;
                    let has_bias = conv.bias.is_some();
                    let weights = conv.weights.value.data();
                    let per_out = g.out_len();
                    let dz_ref = &dz;
                    let parts = exec.map(n, |s| {
                        let mut dw = vec![T::zero(); weights.len()];
                        let mut db = if has_bias { vec![T::zero(); g.filters] } else { Vec::new() };
                        let mut dx = if need_dx { vec![T::zero(); g.in_len()] } else { Vec::new() };
                        conv2d_backward_sample(
                            input.outer(s),
                            weights,
                            &g,
                            &dz_ref[s * per_out..(s + 1) * per_out],
                            &mut dw,
                            has_bias.then_some(db.as_mut_slice()),
                            need_dx.then_some(dx.as_mut_slice()),
                        );
                        (dw, db, dx)
                    });
                    let mut dinput = Vec::with_capacity(if need_dx { n * g.in_len() } else { 0 });
                    for (dw, db, dx) in parts {
                        for (acc, v) in conv.weights.gradient.data_mut().iter_mut().zip(dw) {
                            *acc = *acc + v;
                        }
                        if let Some(b) = conv.bias.as_mut() {
                            for (acc, v) in b.gradient.data_mut().iter_mut().zip(db) {
                                *acc = *acc + v;
                            }
                        }
                        dinput.extend(dx);
                    }
                    if !need_dx {
                        break;
                    }
                    grad = Tensor::from_vec(input.shape(), dinput)?;
                }
                (Layer::MaxPool, LayerTrace::Pool { input_shape, argmax }) => {
                    let n = input_shape[0];
                    let per_in: usize = input_shape[1..].iter().product();
                    let per_out = per_in / 4;
                    let mut dx = vec![T::zero(); n * per_in];
                    for s in 0..n {
                        maxpool_backward_sample(
                            &grad.data()[s * per_out..(s + 1) * per_out],
                            &argmax[s * per_out..(s + 1) * per_out],
                            &mut dx[s * per_in..(s + 1) * per_in],
                        );
                    }
                    grad = Tensor::from_vec(input_shape, dx)?;
                }
                _ => return Err(Error::config(format!("trace/layer mismatch at layer {idx} of {count}"))),
            }
        }
        Ok(())
    }
}

/// Fixed pseudo-random weights for the scalar objective `Σ cᵢ·outᵢ`.
fn objective_coefficients(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((mix_seed(17, i as u64) >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
        .collect()
}

/// Wraps an `f64` copy of a network and an input as a [`Differentiable`]
/// objective `Σ cᵢ·outᵢ` over all trainable parameters.
pub struct NetworkProbe {
    net: Network<f64>,
    input: Tensor<f64>,
    index: Vec<(usize, usize)>,
}

impl NetworkProbe {
    pub fn new(network: &Network<f32>, input: &Tensor<f32>) -> Self {
        let mut net = network.cast::<f64>();
        net.set_exec(Exec::Sequential);
        let index = net
            .params()
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.value.len()).map(move |i| (p, i)))
            .collect();
        NetworkProbe {
            net,
            input: input.cast(),
            index,
        }
    }
}

impl Differentiable for NetworkProbe {
    fn num_params(&self) -> usize {
        self.index.len()
    }

    fn param(&self, i: usize) -> f64 {
        let (p, j) = self.index[i];
        self.net.params()[p].value.data()[j]
    }

    fn set_param(&mut self, i: usize, value: f64) {
        let (p, j) = self.index[i];
        self.net.params_mut()[p].value.data_mut()[j] = value;
    }

    fn evaluate(&mut self) -> (f64, u64) {
        let (out, trace, _) = self
            .net
            .forward_pass(&self.input, true)
            .expect("probe input matches network");
        let c = objective_coefficients(out.len());
        let value = out.data().iter().zip(&c).map(|(a, b)| a * b).sum();
        (value, trace.expect("trace").branch_signature())
    }

    fn gradient(&mut self) -> Vec<f64> {
        self.net.zero_grad();
        let (out, trace, _) = self
            .net
            .forward_pass(&self.input, true)
            .expect("probe input matches network");
        let dout = Tensor::from_vec(out.shape(), objective_coefficients(out.len())).unwrap();
        self.net.backward(&trace.expect("trace"), &dout).expect("backward");
        self.net
            .params()
            .iter()
            .flat_map(|p| p.gradient.data().to_vec())
            .collect()
    }
}

/// Max relative error between back-propagated and central-difference
/// parameter gradients of `Σ cᵢ·outᵢ` (fixed pseudo-random `c`), evaluated
/// in `f64` on a copy of the network.
pub fn finite_difference_check(network: &Network<f32>, input: &Tensor<f32>, eps: f64) -> GradCheckReport {
    check(&mut NetworkProbe::new(network, input), eps)
}
