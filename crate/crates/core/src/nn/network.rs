//! Ordered layer graph with optional skip edges.
//!
//! Shapes in a [`LayerSpec`] chain are per sample; the network always runs on batches
//! with a leading batch axis. A skip `source` is the index of an earlier layer whose
//! output is reused.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::{self, Activation};
use crate::nn::batchnorm::{self, BatchNormCache};
use crate::nn::conv::{self, conv2d_param_count};
use crate::nn::dense;
use crate::nn::dropout;
use crate::nn::init::{init_lecun, InitDistribution};
use crate::nn::pool::{self, PoolGeometry};
use crate::nn::skip;
use crate::nn::upsample;
use crate::optim::RegSpec;
use crate::tensor::{crop_offsets, Tensor, MAX_RANK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
        #[serde(default)]
        reg: RegSpec,
    },
    Conv2D {
        filters: usize,
        kernel: (usize, usize),
        #[serde(default)]
        reg: RegSpec,
    },
    LeakyRelu {
        alpha: f64,
    },
    Sigmoid,
    Softmax,
    BatchNorm {
        epsilon: f64,
        momentum: f64,
    },
    Dropout {
        rate: f64,
    },
    AvgPool {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    Upsample {
        factors: (usize, usize),
    },
    Reshape {
        shape: Vec<usize>,
    },
    CenterCrop {
        size: (usize, usize),
    },
    /// Concatenates the (center-cropped) output of `source` after the incoming channels.
    ConcatSkip {
        source: usize,
    },
    /// Adds the output of `source` to the incoming tensor.
    AddSkip {
        source: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::CenterCrop { .. } => "center_crop",
            LayerSpec::ConcatSkip { .. } => "concat",
            LayerSpec::AddSkip { .. } => "add",
        }
    }

    fn skip_source(&self) -> Option<usize> {
        match *self {
            LayerSpec::ConcatSkip { source } | LayerSpec::AddSkip { source } => Some(source),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    /// Penalty attached to this parameter; `None` for everything but weights.
    pub reg: RegSpec,
}

impl Param {
    fn new(name: String, kind: ParamKind, value: Tensor, reg: RegSpec) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            name,
            kind,
            value,
            grad,
            reg,
        }
    }
}

/// Non-trainable buffers.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Stateless,
    BatchNorm {
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        initialized: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub params: Vec<Param>,
    pub state: LayerState,
    /// Per-sample shapes.
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl Layer {
    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn non_trainable_count(&self) -> usize {
        match &self.state {
            LayerState::Stateless => 0,
            LayerState::BatchNorm { running_mean, running_var, .. } => running_mean.len() + running_var.len(),
        }
    }
}

#[derive(Clone, Debug)]
enum Cache {
    None,
    Input(Tensor),
    Dense { x: Tensor, z: Tensor },
    Output(Tensor),
    BatchNormTrain(BatchNormCache),
    BatchNormInfer(Tensor),
    Dropout(Option<Tensor>),
    Shape(Vec<usize>),
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Concat { deep_channels: usize, source_shape: Vec<usize> },
}

/// Forward caches for one batch; valid only for the next `backward` call.
#[derive(Clone, Debug)]
pub struct Trace {
    generation: u64,
    mode: Mode,
    input_shape: Vec<usize>,
    caches: Vec<Cache>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    mode: Mode,
    rng: ChaCha8Rng,
    generation: u64,
}

fn infer_shape(spec: &LayerSpec, input: &[usize], outputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match *input {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!("{what} needs [h, w, c] samples, got {input:?}"))),
        }
    };
    let out = match spec {
        LayerSpec::Dense { units, .. } => {
            if input.len() != 1 || *units == 0 {
                return Err(Error::shape(format!("dense needs flat samples, got {input:?}")));
            }
            vec![*units]
        }
        LayerSpec::Conv2D { filters, kernel, .. } => {
            let (h, w, _) = spatial("conv2d")?;
            let (kh, kw) = *kernel;
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::arg(format!("conv2d kernel {kh}x{kw} must be odd")));
            }
            if kh > h || kw > w || *filters == 0 {
                return Err(Error::shape(format!("conv2d kernel {kh}x{kw} does not fit {input:?}")));
            }
            vec![h - kh + 1, w - kw + 1, *filters]
        }
        LayerSpec::LeakyRelu { alpha } => {
            if !alpha.is_finite() {
                return Err(Error::arg("leak constant must be finite"));
            }
            input.to_vec()
        }
        LayerSpec::Sigmoid | LayerSpec::Softmax => input.to_vec(),
        LayerSpec::BatchNorm { epsilon, momentum } => {
            if !(*epsilon >= 0.0) || !(0.0..=1.0).contains(momentum) {
                return Err(Error::arg("batch norm needs epsilon >= 0 and momentum in [0, 1]"));
            }
            input.to_vec()
        }
        LayerSpec::Dropout { rate } => {
            dropout::check_rate(*rate)?;
            input.to_vec()
        }
        LayerSpec::AvgPool { pool, stride } | LayerSpec::MaxPool { pool, stride } => {
            let (h, w, c) = spatial("pooling")?;
            let (oh, ow) = PoolGeometry::new(*pool, *stride)?.output(h, w)?;
            vec![oh, ow, c]
        }
        LayerSpec::Upsample { factors } => {
            let (h, w, c) = spatial("upsample")?;
            if factors.0 == 0 || factors.1 == 0 {
                return Err(Error::arg("upsample factors must be >= 1"));
            }
            vec![h * factors.0, w * factors.1, c]
        }
        LayerSpec::Reshape { shape } => {
            if shape.is_empty()
                || shape.len() >= MAX_RANK
                || shape.contains(&0)
                || shape.iter().product::<usize>() != input.iter().product::<usize>()
            {
                return Err(Error::shape(format!("cannot reshape {input:?} to {shape:?}")));
            }
            shape.clone()
        }
        LayerSpec::CenterCrop { size } => {
            let (h, w, c) = spatial("center_crop")?;
            if size.0 == 0 || size.1 == 0 || size.0 > h || size.1 > w {
                return Err(Error::shape(format!("crop {size:?} does not fit {input:?}")));
            }
            vec![size.0, size.1, c]
        }
        LayerSpec::ConcatSkip { source } => {
            let (h, w, c) = spatial("concat")?;
            let src = &outputs[*source];
            match *src.as_slice() {
                [hs, ws, cs] if hs >= h && ws >= w => vec![h, w, c + cs],
                _ => {
                    return Err(Error::shape(format!(
                        "skip source {src:?} cannot be cropped to {input:?}"
                    )))
                }
            }
        }
        LayerSpec::AddSkip { source } => {
            if outputs[*source] != input {
                return Err(Error::shape(format!(
                    "add skip needs equal shapes, got {:?} and {input:?}",
                    outputs[*source]
                )));
            }
            input.to_vec()
        }
    };
    Ok(out)
}

/// Zero-pads a center-cropped gradient back to the source shape.
fn uncrop(grad: &Tensor, full: &[usize]) -> Result<Tensor> {
    let (n, th, tw, c) = grad.as_nhwc("uncrop")?;
    let mut out = Tensor::zeros(full.to_vec());
    let (_, h, w, fc) = out.as_nhwc("uncrop")?;
    if fc != c || th > h || tw > w {
        return Err(Error::shape("skip gradient does not fit its source"));
    }
    let (oy, ox) = crop_offsets((h, w), (th, tw));
    let g = grad.data();
    let d = out.data_mut();
    for b in 0..n {
        for y in 0..th {
            let dst = ((b * h + y + oy) * w + ox) * c;
            let src = (b * th + y) * tw * c;
            d[dst..dst + tw * c].copy_from_slice(&g[src..src + tw * c]);
        }
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

impl Network {
    /// Builds the graph for per-sample `input_shape`, initializing weights with LeCun
    /// and biases, shifts at zero, scales at one.
    pub fn new(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        init: InitDistribution,
        seed: u64,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.len() >= MAX_RANK || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid sample shape {input_shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outputs: Vec<Vec<usize>> = Vec::with_capacity(specs.len());
        let mut layers = Vec::with_capacity(specs.len());
        let mut counters: std::collections::HashMap<&'static str, usize> = Default::default();
        for (i, spec) in specs.into_iter().enumerate() {
            if let Some(s) = spec.skip_source() {
                if s >= i {
                    return Err(Error::arg(format!(
                        "layer {i} skip source {s} must be an earlier layer"
                    )));
                }
            }
            let input = outputs.last().cloned().unwrap_or_else(|| input_shape.clone());
            let output = infer_shape(&spec, &input, &outputs)?;
            let n = counters.entry(spec.kind()).or_insert(0);
            *n += 1;
            let name = format!("{}_{}", spec.kind(), n);
            let (params, state) = match &spec {
                LayerSpec::Dense { units, reg, .. } => {
                    let w = init_lecun(&[*units, input[0]], input[0], &mut rng, init)?;
                    (
                        vec![
                            Param::new(format!("{name}/weights"), ParamKind::Weight, w, *reg),
                            Param::new(format!("{name}/bias"), ParamKind::Bias, Tensor::zeros(vec![*units]), RegSpec::None),
                        ],
                        LayerState::Stateless,
                    )
                }
                LayerSpec::Conv2D { filters, kernel, reg } => {
                    let c = input[2];
                    let fan_in = kernel.0 * kernel.1 * c;
                    let w = init_lecun(&[kernel.0, kernel.1, c, *filters], fan_in, &mut rng, init)?;
                    (
                        vec![
                            Param::new(format!("{name}/weights"), ParamKind::Weight, w, *reg),
                            Param::new(format!("{name}/bias"), ParamKind::Bias, Tensor::zeros(vec![*filters]), RegSpec::None),
                        ],
                        LayerState::Stateless,
                    )
                }
                LayerSpec::BatchNorm { .. } => {
                    let c = *input.last().unwrap();
                    (
                        vec![
                            Param::new(format!("{name}/gamma"), ParamKind::Scale, Tensor::filled(vec![c], 1.0), RegSpec::None),
                            Param::new(format!("{name}/beta"), ParamKind::Shift, Tensor::zeros(vec![c]), RegSpec::None),
                        ],
                        LayerState::BatchNorm {
                            running_mean: vec![0.0; c],
                            running_var: vec![1.0; c],
                            initialized: false,
                        },
                    )
                }
                _ => (Vec::new(), LayerState::Stateless),
            };
            outputs.push(output.clone());
            layers.push(Layer {
                name,
                spec,
                params,
                state,
                input_shape: input,
                output_shape: output,
            });
        }
        Ok(Network {
            layers,
            input_shape,
            mode: Mode::Train,
            rng,
            generation: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.output_shape)
    }

    /// Reseeds the dropout stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// `(trainable, non_trainable)`
    pub fn param_counts(&self) -> (usize, usize) {
        self.layers.iter().fold((0, 0), |(t, n), l| {
            (t + l.trainable_count(), n + l.non_trainable_count())
        })
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Batch-norm running statistics as named tensors.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let LayerState::BatchNorm { running_mean, running_var, .. } = &l.state {
                let c = running_mean.len();
                out.push((format!("{}/moving_mean", l.name), Tensor::from_parts(vec![c], running_mean.clone())));
                out.push((format!("{}/moving_variance", l.name), Tensor::from_parts(vec![c], running_var.clone())));
            }
        }
        out
    }

    /// Restores running statistics; marks them initialized.
    pub fn set_buffer(&mut self, name: &str, value: &Tensor) -> Result<()> {
        for l in &mut self.layers {
            if let LayerState::BatchNorm { running_mean, running_var, initialized } = &mut l.state {
                let target = if name == format!("{}/moving_mean", l.name) {
                    running_mean
                } else if name == format!("{}/moving_variance", l.name) {
                    running_var
                } else {
                    continue;
                };
                if value.shape() != [target.len()] {
                    return Err(Error::shape(format!("buffer {name} has shape {:?}", value.shape())));
                }
                target.copy_from_slice(value.data());
                *initialized = true;
                return Ok(());
            }
        }
        Err(Error::Format(format!("unknown buffer '{name}'")))
    }

    /// Runs the batch through the network without keeping caches.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false).map(|(y, _)| y)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let (y, caches) = self.run(x, true)?;
        Ok((
            y,
            Trace {
                generation: self.generation,
                mode: self.mode,
                input_shape: x.shape().to_vec(),
                caches,
            },
        ))
    }

    fn run(&mut self, x: &Tensor, keep: bool) -> Result<(Tensor, Vec<Cache>)> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "network expects [n, {:?}] batches, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        x.ensure_finite("network input")?;
        self.generation += 1;
        let n = x.shape()[0];
        let mode = self.mode;
        let sources: Vec<bool> = {
            let mut s = vec![false; self.layers.len()];
            for l in &self.layers {
                if let Some(i) = l.spec.skip_source() {
                    s[i] = true;
                }
            }
            s
        };
        let mut saved: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut cur = x.clone();

        for i in 0..self.layers.len() {
            let layer = &mut self.layers[i];
            let (out, cache) = match &layer.spec {
                LayerSpec::Dense { activation, .. } => {
                    let (y, z) = dense::dense_forward(&cur, &layer.params[0].value, &layer.params[1].value, *activation)?;
                    (y, Cache::Dense { x: cur, z })
                }
                LayerSpec::Conv2D { .. } => {
                    let y = conv::conv2d_forward(&cur, &layer.params[0].value, &layer.params[1].value)?;
                    (y, Cache::Input(cur))
                }
                LayerSpec::LeakyRelu { alpha } => {
                    let y = activation::leaky_relu_forward(&cur, *alpha)?;
                    (y, Cache::Input(cur))
                }
                LayerSpec::Sigmoid => {
                    let y = activation::sigmoid_forward(&cur);
                    (y.clone(), Cache::Output(y))
                }
                LayerSpec::Softmax => {
                    let y = activation::softmax_forward(&cur);
                    (y.clone(), Cache::Output(y))
                }
                LayerSpec::BatchNorm { epsilon, momentum } => {
                    let (gamma, beta) = (&layer.params[0].value, &layer.params[1].value);
                    let LayerState::BatchNorm { running_mean, running_var, initialized } = &mut layer.state else {
                        unreachable!("batch norm layer without running statistics")
                    };
                    match mode {
                        Mode::Train => {
                            let (y, c) = batchnorm::batchnorm_train_forward(&cur, gamma, beta, *epsilon)?;
                            if *initialized {
                                for k in 0..c.mean.len() {
                                    running_mean[k] = momentum * running_mean[k] + (1.0 - momentum) * c.mean[k];
                                    running_var[k] = momentum * running_var[k] + (1.0 - momentum) * c.var[k];
                                }
                            } else {
                                running_mean.copy_from_slice(&c.mean);
                                running_var.copy_from_slice(&c.var);
                                *initialized = true;
                            }
                            (y, Cache::BatchNormTrain(c))
                        }
                        Mode::Infer => {
                            if !*initialized {
                                return Err(Error::State(format!(
                                    "{}: running statistics used before any training update",
                                    layer.name
                                )));
                            }
                            let y = batchnorm::batchnorm_infer_forward(&cur, gamma, beta, running_mean, running_var, *epsilon)?;
                            (y, Cache::BatchNormInfer(cur))
                        }
                    }
                }
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Train if *rate > 0.0 => {
                        let mask = dropout::dropout_mask(cur.shape(), *rate, &mut self.rng)?;
                        (dropout::dropout_apply(&cur, &mask)?, Cache::Dropout(Some(mask)))
                    }
                    _ => (cur, Cache::Dropout(None)),
                },
                LayerSpec::AvgPool { pool, stride } => {
                    let geo = PoolGeometry::new(*pool, *stride)?;
                    let y = pool::avgpool_forward(&cur, geo)?;
                    (y, Cache::Shape(cur.shape().to_vec()))
                }
                LayerSpec::MaxPool { pool, stride } => {
                    let geo = PoolGeometry::new(*pool, *stride)?;
                    let (y, argmax) = pool::maxpool_forward(&cur, geo)?;
                    (
                        y,
                        Cache::MaxPool {
                            input_shape: cur.shape().to_vec(),
                            argmax,
                        },
                    )
                }
                LayerSpec::Upsample { factors } => {
                    let y = upsample::upsample_forward(&cur, *factors)?;
                    (y, Cache::Shape(cur.shape().to_vec()))
                }
                LayerSpec::Reshape { shape } => {
                    let mut s = vec![n];
                    s.extend_from_slice(shape);
                    let y = cur.reshape(s)?;
                    (y, Cache::Shape(cur.shape().to_vec()))
                }
                LayerSpec::CenterCrop { size } => {
                    let y = cur.center_crop(*size)?;
                    (y, Cache::Shape(cur.shape().to_vec()))
                }
                LayerSpec::ConcatSkip { source } => {
                    let src = saved[*source].as_ref().expect("skip source output saved");
                    let (_, h, w, c) = cur.as_nhwc("concat")?;
                    let cropped = src.center_crop((h, w))?;
                    let y = skip::concat_skip(&cur, &cropped)?;
                    (
                        y,
                        Cache::Concat {
                            deep_channels: c,
                            source_shape: src.shape().to_vec(),
                        },
                    )
                }
                LayerSpec::AddSkip { source } => {
                    let src = saved[*source].as_ref().expect("skip source output saved");
                    (skip::add_skip(&cur, src)?, Cache::None)
                }
            };
            if out.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("forward output of layer {i} ({})", layer.name)));
            }
            if sources[i] {
                saved[i] = Some(out.clone());
            }
            if keep {
                caches.push(cache);
            }
            cur = out;
        }
        Ok((cur, caches))
    }

    /// Fills every parameter gradient from `grad_out` (∂L/∂output) and returns ∂L/∂input.
    /// Skip sources receive the sum of both paths.
    pub fn backward(&mut self, trace: Trace, grad_out: &Tensor) -> Result<Tensor> {
        if trace.generation != self.generation {
            return Err(Error::State("trace is stale: another forward ran since".into()));
        }
        if trace.mode != self.mode {
            return Err(Error::State(format!(
                "trace recorded in {:?} mode, network is in {:?} mode",
                trace.mode, self.mode
            )));
        }
        let n = trace.input_shape[0];
        let mut expected = vec![n];
        expected.extend_from_slice(self.output_shape());
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match output {expected:?}",
                grad_out.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let mut g = grad_out.clone();

        for (i, cache) in trace.caches.into_iter().enumerate().rev() {
            if let Some(extra) = pending[i].take() {
                g = g.add(&extra)?;
            }
            let layer = &mut self.layers[i];
            let gin = match (&layer.spec, cache) {
                (LayerSpec::Dense { activation, .. }, Cache::Dense { x, z }) => {
                    let r = dense::dense_backward(&g, &x, &z, &layer.params[0].value, *activation)?;
                    layer.params[0].grad = r.weights;
                    layer.params[1].grad = r.bias;
                    r.input
                }
                (LayerSpec::Conv2D { .. }, Cache::Input(x)) => {
                    let r = conv::conv2d_backward(&g, &x, &layer.params[0].value)?;
                    layer.params[0].grad = r.weights;
                    layer.params[1].grad = r.bias;
                    r.input
                }
                (LayerSpec::LeakyRelu { alpha }, Cache::Input(x)) => activation::leaky_relu_backward(&g, &x, *alpha)?,
                (LayerSpec::Sigmoid, Cache::Output(y)) => activation::sigmoid_backward(&g, &y)?,
                (LayerSpec::Softmax, Cache::Output(y)) => activation::softmax_backward(&g, &y)?,
                (LayerSpec::BatchNorm { .. }, Cache::BatchNormTrain(c)) => {
                    let r = batchnorm::batchnorm_backward(&g, &c, &layer.params[0].value)?;
                    layer.params[0].grad = r.gamma;
                    layer.params[1].grad = r.beta;
                    r.input
                }
                (LayerSpec::BatchNorm { epsilon, .. }, Cache::BatchNormInfer(x)) => {
                    let LayerState::BatchNorm { running_mean, running_var, .. } = &layer.state else {
                        unreachable!("batch norm layer without running statistics")
                    };
                    let c = running_mean.len();
                    let gamma = layer.params[0].value.data();
                    let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, xr), gxr) in g.data().chunks_exact(c).zip(x.data().chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        for k in 0..c {
                            gg[k] += gr[k] * (xr[k] - running_mean[k]) * inv[k];
                            gb[k] += gr[k];
                            gxr[k] = gr[k] * gamma[k] * inv[k];
                        }
                    }
                    layer.params[0].grad = Tensor::from_parts(vec![c], gg);
                    layer.params[1].grad = Tensor::from_parts(vec![c], gb);
                    Tensor::from_parts(x.shape().to_vec(), gx)
                }
                (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => match mask {
                    Some(m) => dropout::dropout_apply(&g, &m)?,
                    None => g,
                },
                (LayerSpec::AvgPool { pool, stride }, Cache::Shape(s)) => {
                    pool::avgpool_backward(&g, &s, PoolGeometry::new(*pool, *stride)?)?
                }
                (LayerSpec::MaxPool { .. }, Cache::MaxPool { input_shape, argmax }) => {
                    pool::maxpool_backward(&g, &input_shape, &argmax)?
                }
                (LayerSpec::Upsample { factors }, Cache::Shape(s)) => upsample::upsample_backward(&g, &s, *factors)?,
                (LayerSpec::Reshape { .. }, Cache::Shape(s)) => g.reshape(s)?,
                (LayerSpec::CenterCrop { .. }, Cache::Shape(s)) => uncrop(&g, &s)?,
                (LayerSpec::ConcatSkip { source }, Cache::Concat { deep_channels, source_shape }) => {
                    let (gd, gs) = skip::concat_skip_backward(&g, deep_channels)?;
                    accumulate(&mut pending[*source], uncrop(&gs, &source_shape)?)?;
                    gd
                }
                (LayerSpec::AddSkip { source }, Cache::None) => {
                    let (gd, gs) = skip::add_skip_backward(&g);
                    accumulate(&mut pending[*source], gs)?;
                    gd
                }
                (spec, _) => {
                    return Err(Error::State(format!("cache does not belong to a {} layer", spec.kind())));
                }
            };
            if gin.data().iter().any(|v| !v.is_finite())
                || layer.params.iter().any(|p| p.grad.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite(format!("gradient of layer {i} ({})", layer.name)));
            }
            g = gin;
        }
        Ok(g)
    }

    /// Per-layer parameter count of a conv layer, for reporting.
    pub fn conv_param_counts(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match &l.spec {
                LayerSpec::Conv2D { filters, kernel, .. } => Some((
                    l.name.clone(),
                    conv2d_param_count(kernel.0, kernel.1, l.input_shape[2], *filters),
                )),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> Network {
        Network::new(
            vec![6, 6, 2],
            vec![
                LayerSpec::Conv2D { filters: 3, kernel: (3, 3), reg: RegSpec::None },
                LayerSpec::LeakyRelu { alpha: 0.3 },
                LayerSpec::BatchNorm { epsilon: 1e-3, momentum: 0.9 },
                LayerSpec::Conv2D { filters: 3, kernel: (1, 1), reg: RegSpec::None },
                LayerSpec::ConcatSkip { source: 0 },
                LayerSpec::Sigmoid,
            ],
            InitDistribution::Uniform,
            7,
        )
        .unwrap()
    }

    #[test]
    fn shape_chain() {
        let net = small_net();
        assert_eq!(net.output_shape(), &[4, 4, 6]);
        assert_eq!(net.param_counts(), (3 * 3 * 2 * 3 + 3 + 6 + 12, 6));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_param_gradients() {
        let mut net = small_net();
        let x = Tensor::from_fn(vec![2, 6, 6, 2], |i| ((i * 37) % 11) as f64 / 11.0 - 0.4);
        let (y, trace) = net.forward(&x).unwrap();
        net.backward(trace, &Tensor::zeros(y.shape().to_vec())).unwrap();
        assert!(net.params().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_trace_and_mode_mismatch() {
        let mut net = small_net();
        let x = Tensor::filled(vec![1, 6, 6, 2], 0.5);
        let (y, t1) = net.forward(&x).unwrap();
        let (_, _t2) = net.forward(&x).unwrap();
        let g = Tensor::zeros(y.shape().to_vec());
        assert!(matches!(net.backward(t1, &g), Err(Error::State(_))));

        let (_, t3) = net.forward(&x).unwrap();
        net.set_mode(Mode::Infer);
        assert!(matches!(net.backward(t3, &g), Err(Error::State(_))));
    }

    #[test]
    fn infer_before_training_is_an_error() {
        let mut net = small_net();
        net.set_mode(Mode::Infer);
        let x = Tensor::filled(vec![1, 6, 6, 2], 0.5);
        assert!(matches!(net.predict(&x), Err(Error::State(_))));
        net.set_mode(Mode::Train);
        net.predict(&x).unwrap();
        net.set_mode(Mode::Infer);
        net.predict(&x).unwrap();
    }

    #[test]
    fn rejects_forward_skip_sources() {
        let r = Network::new(
            vec![4],
            vec![LayerSpec::AddSkip { source: 0 }],
            InitDistribution::Uniform,
            0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn uncrop_inverts_crop_positions() {
        let x = Tensor::from_fn(vec![1, 5, 5, 1], |i| i as f64 + 1.0);
        let c = x.center_crop((2, 2)).unwrap();
        let back = uncrop(&c, x.shape()).unwrap();
        assert_eq!(back.sum(), c.sum());
        assert_eq!(back.center_crop((2, 2)).unwrap(), c);
    }
}
