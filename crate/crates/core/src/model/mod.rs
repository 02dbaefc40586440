//! Two-head encoder-decoder network with explicit forward and backward passes.
//!
//! Topology for `depth = d` and `base_channels = b` (channels `c_i = b * 2^i`):
//!
//! * encoder level `i < d`: two 3x3 conv + ReLU, then 2x2 max-pool;
//! * bottleneck at level `d`: two 3x3 conv + ReLU;
//! * decoder level `i` (from `d - 1` down to 0): nearest 2x upsample, 3x3 conv
//!   `c_{i+1} -> c_i` + ReLU, concatenation `[skip_i, up]`, two 3x3 conv + ReLU;
//! * two 1x1 heads on the last decoder map: sigmoid (segmentation) and tanh
//!   (normalized signed distance).
//!
//! All arithmetic runs in `f64`; parameters are kept representable in `f32`
//! so the model file stores them without loss.

mod adam;
mod io;
mod layers;
mod predict;
mod train;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::SliceField;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use predict::{crop_slice, pad_to_multiple, predict_slices, predict_volume, Prediction};
pub use train::{
    batch_loss, dice_of_predictions, train, validation_dice, EpochRecord, TrainConfig, TrainReport, TrainSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Number of 2x downsampling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            input_width: 64,
            input_height: 64,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::Config(format!("depth must be in 1..=16, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        let m = 1usize << self.depth;
        for (name, v) in [("input_width", self.input_width), ("input_height", self.input_height)] {
            if v == 0 || v % m != 0 {
                return Err(Error::Config(format!("{name} = {v} is not a positive multiple of 2^depth = {m}")));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Layer shapes in storage order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let d = self.depth;
        let c = |i| self.channels(i);
        let mut specs = Vec::with_capacity(3 * d + 2 * d + 4);
        for i in 0..d {
            let cin = if i == 0 { 1 } else { c(i - 1) };
            specs.push(LayerSpec::new(format!("enc{i}_conv1"), cin, c(i), 3));
            specs.push(LayerSpec::new(format!("enc{i}_conv2"), c(i), c(i), 3));
        }
        specs.push(LayerSpec::new("bottleneck_conv1".into(), c(d - 1), c(d), 3));
        specs.push(LayerSpec::new("bottleneck_conv2".into(), c(d), c(d), 3));
        for i in (0..d).rev() {
            specs.push(LayerSpec::new(format!("dec{i}_up"), c(i + 1), c(i), 3));
            specs.push(LayerSpec::new(format!("dec{i}_conv1"), 2 * c(i), c(i), 3));
            specs.push(LayerSpec::new(format!("dec{i}_conv2"), c(i), c(i), 3));
        }
        specs.push(LayerSpec::new("head_seg".into(), c(0), 1, 1));
        specs.push(LayerSpec::new("head_sdf".into(), c(0), 1, 1));
        specs
    }

    fn enc(&self, level: usize, j: usize) -> usize {
        2 * level + j
    }

    fn bottleneck(&self, j: usize) -> usize {
        2 * self.depth + j
    }

    fn dec(&self, level: usize, j: usize) -> usize {
        2 * self.depth + 2 + 3 * (self.depth - 1 - level) + j
    }

    fn head_seg(&self) -> usize {
        5 * self.depth + 2
    }

    fn head_sdf(&self) -> usize {
        5 * self.depth + 3
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl LayerSpec {
    fn new(name: String, cin: usize, cout: usize, kernel: usize) -> Self {
        Self { name, cin, cout, kernel }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel, self.kernel]
    }
}

/// Weights (`[cout][cin][k][k]`) and biases of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub spec: LayerSpec,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    layers: Vec<LayerParams>,
}

fn round_to_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ModelParams {
    /// Assemble parameters from explicit layers. Shapes are checked against
    /// the topology and values are rounded to `f32` precision.
    pub fn from_layers(config: NetConfig, mut layers: Vec<LayerParams>) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        if specs.len() != layers.len() {
            return Err(Error::Shape(format!("expected {} layers, got {}", specs.len(), layers.len())));
        }
        for (spec, layer) in specs.iter().zip(layers.iter_mut()) {
            if *spec != layer.spec || layer.weight.len() != spec.weight_len() || layer.bias.len() != spec.cout {
                return Err(Error::Shape(format!("layer {} does not match the topology", spec.name)));
            }
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite parameter in {}", spec.name)));
                }
                *v = round_to_f32(*v);
            }
        }
        Ok(Self { config, layers })
    }

    /// All-zero parameters; the network then outputs 0.5 and 0 everywhere.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .into_iter()
            .map(|spec| LayerParams {
                weight: vec![0.0; spec.weight_len()],
                bias: vec![0.0; spec.cout],
                spec,
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Value of the `index`-th scalar parameter in storage order (weights then
    /// bias, layer by layer).
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weight.len() {
                return l.weight[index];
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Overwrite one scalar parameter without rounding. Intended for
    /// finite-difference checks.
    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weight.len() {
                l.weight[index] = value;
                return;
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Hash of the configuration and every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        eat(self.config.depth as u64);
        eat(self.config.base_channels as u64);
        eat(self.config.input_width as u64);
        eat(self.config.input_height as u64);
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                eat(v.to_bits());
            }
        }
        h
    }
}

/// Seeded He-normal initialization with zero biases.
///
/// ReLU convolutions draw from `N(0, 2 / fan_in)`, the linear 1x1 heads from
/// `N(0, 1 / fan_in)`.
pub fn init_params(cfg: &NetConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let layers = cfg
        .layer_specs()
        .into_iter()
        .map(|spec| {
            let fan_in = (spec.cin * spec.kernel * spec.kernel) as f64;
            let gain = if spec.kernel == 1 { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            let weight = (0..spec.weight_len())
                .map(|_| round_to_f32(normal.sample(&mut rng)))
                .collect();
            LayerParams {
                bias: vec![0.0; spec.cout],
                weight,
                spec,
            }
        })
        .collect();
    Ok(ModelParams {
        config: *cfg,
        layers,
    })
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weight.len() {
                return l.weight[index];
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("gradient index out of range");
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default)]
struct SampleCache {
    /// Input map of every conv layer, indexed by layer.
    inputs: Vec<Vec<f64>>,
    /// Activated output of every conv layer (sigmoid/tanh for the heads).
    outputs: Vec<Vec<f64>>,
    /// Max-pool winners per encoder level.
    argmax: Vec<Vec<u32>>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    width: usize,
    height: usize,
    samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.samples.len()
    }
}

/// Per-slice network outputs, row-major `width * height`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub seg: Vec<Vec<f64>>,
    pub sdf: Vec<Vec<f64>>,
    pub cache: ForwardCache,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
struct Scratch {
    col: Vec<f64>,
    dcol: Vec<f64>,
}

fn run_sample(params: &ModelParams, input: &[f64], w: usize, h: usize, scratch: &mut Scratch) -> SampleCache {
    let cfg = &params.config;
    let d = cfg.depth;
    let n_layers = params.layers.len();
    let mut cache = SampleCache {
        inputs: vec![Vec::new(); n_layers],
        outputs: vec![Vec::new(); n_layers],
        argmax: vec![Vec::new(); d],
    };
    let size = |level: usize| (h >> level, w >> level);

    let mut conv = |idx: usize, x: Vec<f64>, lh: usize, lw: usize, cache: &mut SampleCache, act: fn(&mut [f64])| {
        let l = &params.layers[idx];
        let mut out = Vec::new();
        conv_forward_layer(l, &x, lh, lw, &mut scratch.col, &mut out);
        act(&mut out);
        cache.inputs[idx] = x;
        cache.outputs[idx] = out.clone();
        out
    };

    let mut x = input.to_vec();
    for level in 0..d {
        let (lh, lw) = size(level);
        let a = conv(cfg.enc(level, 0), x, lh, lw, &mut cache, layers::relu_inplace);
        let b = conv(cfg.enc(level, 1), a, lh, lw, &mut cache, layers::relu_inplace);
        let mut pooled = Vec::new();
        layers::maxpool2(&b, cfg.channels(level), lh, lw, &mut pooled, &mut cache.argmax[level]);
        x = pooled;
    }
    let (bh, bw) = size(d);
    let a = conv(cfg.bottleneck(0), x, bh, bw, &mut cache, layers::relu_inplace);
    x = conv(cfg.bottleneck(1), a, bh, bw, &mut cache, layers::relu_inplace);
    for level in (0..d).rev() {
        let (lh, lw) = size(level);
        let (ph, pw) = size(level + 1);
        let mut up = Vec::new();
        layers::upsample2(&x, cfg.channels(level + 1), ph, pw, &mut up);
        let u = conv(cfg.dec(level, 0), up, lh, lw, &mut cache, layers::relu_inplace);
        let skip = &cache.outputs[cfg.enc(level, 1)];
        let mut cat = Vec::with_capacity(skip.len() + u.len());
        cat.extend_from_slice(skip);
        cat.extend_from_slice(&u);
        let e = conv(cfg.dec(level, 1), cat, lh, lw, &mut cache, layers::relu_inplace);
        x = conv(cfg.dec(level, 2), e, lh, lw, &mut cache, layers::relu_inplace);
    }
    conv(cfg.head_seg(), x.clone(), h, w, &mut cache, |v| v.iter_mut().for_each(|z| *z = sigmoid(*z)));
    conv(cfg.head_sdf(), x, h, w, &mut cache, |v| v.iter_mut().for_each(|z| *z = z.tanh()));
    cache
}

fn conv_forward_layer(l: &LayerParams, x: &[f64], h: usize, w: usize, col: &mut Vec<f64>, out: &mut Vec<f64>) {
    layers::conv_forward(x, l.spec.cin, h, w, &l.weight, &l.bias, l.spec.cout, l.spec.kernel, col, out);
}

fn check_inputs(params: &ModelParams, batch: impl IntoIterator<Item = (usize, usize, usize)>) -> Result<()> {
    let cfg = &params.config;
    for (i, (w, h, len)) in batch.into_iter().enumerate() {
        if w != cfg.input_width || h != cfg.input_height || len != w * h {
            return Err(Error::Shape(format!(
                "batch slice {i} is {w}x{h}, network expects {}x{}",
                cfg.input_width, cfg.input_height
            )));
        }
    }
    Ok(())
}

/// Forward pass over raw `width * height` images.
pub fn forward_raw(params: &ModelParams, batch: &[&[f64]]) -> Result<ForwardOutput> {
    let (w, h) = (params.config.input_width, params.config.input_height);
    check_inputs(params, batch.iter().map(|b| (w, h, b.len())))?;
    let mut scratch = Scratch::default();
    let cfg = &params.config;
    let samples: Vec<SampleCache> = batch.iter().map(|x| run_sample(params, x, w, h, &mut scratch)).collect();
    let seg = samples.iter().map(|s| s.outputs[cfg.head_seg()].clone()).collect();
    let sdf = samples.iter().map(|s| s.outputs[cfg.head_sdf()].clone()).collect();
    Ok(ForwardOutput {
        seg,
        sdf,
        cache: ForwardCache {
            fingerprint: params.fingerprint(),
            width: w,
            height: h,
            samples,
        },
    })
}

/// Forward pass over a batch of image slices.
pub fn forward(params: &ModelParams, batch: &[SliceField]) -> Result<ForwardOutput> {
    check_inputs(params, batch.iter().map(|s| (s.width(), s.height(), s.values().len())))?;
    let raw: Vec<&[f64]> = batch.iter().map(|s| s.values()).collect();
    forward_raw(params, &raw)
}

/// Backpropagate head gradients (with respect to the sigmoid and tanh
/// outputs) through the network.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    seg_grads: &[Vec<f64>],
    sdf_grads: &[Vec<f64>],
) -> Result<Gradients> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Usage("forward cache was produced by different parameters".into()));
    }
    let n = cache.width * cache.height;
    if seg_grads.len() != cache.samples.len()
        || sdf_grads.len() != cache.samples.len()
        || seg_grads.iter().chain(sdf_grads).any(|g| g.len() != n)
    {
        return Err(Error::Usage("head gradients do not match the cached batch".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut scratch = Scratch::default();
    for ((sample, gs), gd) in cache.samples.iter().zip(seg_grads).zip(sdf_grads) {
        backward_sample(params, sample, cache.width, cache.height, gs, gd, &mut grads, &mut scratch);
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backward_sample(
    params: &ModelParams,
    cache: &SampleCache,
    w: usize,
    h: usize,
    seg_grad: &[f64],
    sdf_grad: &[f64],
    grads: &mut Gradients,
    scratch: &mut Scratch,
) {
    let cfg = &params.config;
    let d = cfg.depth;
    let size = |level: usize| (h >> level, w >> level);

    // Conv backward for layer idx with upstream gradient `dout` (already
    // through the activation). Returns the gradient w.r.t. the layer input.
    let mut conv_back = |idx: usize, dout: &[f64], lh: usize, lw: usize, need_input: bool| -> Vec<f64> {
        let l = &params.layers[idx];
        let g = &mut grads.layers[idx];
        let mut dinput = Vec::new();
        layers::conv_backward(
            &cache.inputs[idx],
            l.spec.cin,
            lh,
            lw,
            &l.weight,
            l.spec.cout,
            l.spec.kernel,
            dout,
            &mut g.weight,
            &mut g.bias,
            if need_input { Some(&mut dinput) } else { None },
            &mut scratch.col,
            &mut scratch.dcol,
        );
        dinput
    };
    let relu_grad = |idx: usize, mut g: Vec<f64>| {
        layers::relu_backward(&cache.outputs[idx], &mut g);
        g
    };

    let seg_out = &cache.outputs[cfg.head_seg()];
    let dzs: Vec<f64> = seg_grad.iter().zip(seg_out).map(|(g, p)| g * p * (1.0 - p)).collect();
    let sdf_out = &cache.outputs[cfg.head_sdf()];
    let dzd: Vec<f64> = sdf_grad.iter().zip(sdf_out).map(|(g, t)| g * (1.0 - t * t)).collect();
    let mut gx = conv_back(cfg.head_seg(), &dzs, h, w, true);
    let gx2 = conv_back(cfg.head_sdf(), &dzd, h, w, true);
    for (a, b) in gx.iter_mut().zip(&gx2) {
        *a += b;
    }

    let mut skip_grads: Vec<Vec<f64>> = vec![Vec::new(); d];
    for level in 0..d {
        let (lh, lw) = size(level);
        let c = cfg.channels(level);
        let g = relu_grad(cfg.dec(level, 2), gx);
        let g = conv_back(cfg.dec(level, 2), &g, lh, lw, true);
        let g = relu_grad(cfg.dec(level, 1), g);
        let gcat = conv_back(cfg.dec(level, 1), &g, lh, lw, true);
        let split = c * lh * lw;
        skip_grads[level] = gcat[..split].to_vec();
        let g = relu_grad(cfg.dec(level, 0), gcat[split..].to_vec());
        let gup = conv_back(cfg.dec(level, 0), &g, lh, lw, true);
        let (ph, pw) = size(level + 1);
        let mut down = Vec::new();
        layers::upsample2_backward(&gup, cfg.channels(level + 1), ph, pw, &mut down);
        gx = down;
    }

    let (bh, bw) = size(d);
    let g = relu_grad(cfg.bottleneck(1), gx);
    let g = conv_back(cfg.bottleneck(1), &g, bh, bw, true);
    let g = relu_grad(cfg.bottleneck(0), g);
    gx = conv_back(cfg.bottleneck(0), &g, bh, bw, true);

    for level in (0..d).rev() {
        let (lh, lw) = size(level);
        let c = cfg.channels(level);
        let mut g = Vec::new();
        layers::maxpool2_backward(&gx, &cache.argmax[level], c * lh * lw, &mut g);
        for (a, b) in g.iter_mut().zip(&skip_grads[level]) {
            *a += b;
        }
        let g = relu_grad(cfg.enc(level, 1), g);
        let g = conv_back(cfg.enc(level, 1), &g, lh, lw, true);
        let g = relu_grad(cfg.enc(level, 0), g);
        gx = conv_back(cfg.enc(level, 0), &g, lh, lw, level > 0);
    }
}
