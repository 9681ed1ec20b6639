//! The residual comparing network: parameter layout, forward pass with a
//! tape of intermediate values, and reverse-mode backward pass.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{relu_backward, relu_in_place, BatchNorm, BnCache, Conv, FeatureMap};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::seed::SeedSplitter;

/// Minimum number of frames: three stride-2 stages must leave one.
pub const MIN_FRAMES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Kaiming { fan_in: usize },
    Uniform { bound: f64 },
    Constant(f64),
    Values(&'static [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// True for batch-norm running statistics, false for trainable tensors.
    pub running: bool,
    init: Init,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Unit {
    Stem {
        conv: Conv,
        bn: BatchNorm,
    },
    Block {
        conv1: Conv,
        bn1: BatchNorm,
        conv2: Conv,
        bn2: BatchNorm,
        shortcut: Option<(Conv, BatchNorm)>,
    },
    Head {
        weight: usize,
        bias: usize,
        channels: usize,
        freq: usize,
    },
}

/// Where every tensor lives in the flat parameter vectors.
#[derive(Debug)]
pub struct Layout {
    pub(crate) units: Vec<Unit>,
    tensors: Vec<TensorInfo>,
    n_weights: usize,
    n_running: usize,
}

const HEAD_BIAS: [f64; 3] = [0.0, 3.0, 3.0];

impl Layout {
    fn build(cfg: &ModelConfig) -> Self {
        let mut b = Builder::default();
        let base = cfg.base_channels;
        let conv = b.conv("stem.conv", 2, base, 3, 1, 1);
        let bn = b.bn("stem.bn", base);
        b.units.push(Unit::Stem { conv, bn });

        let mut cin = base;
        let mut block = 0;
        for (stage, &count) in cfg.block_counts.iter().enumerate() {
            let cout = base << stage;
            for j in 0..count {
                let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                let p = format!("blocks.{block}");
                let conv1 = b.conv(&format!("{p}.conv1"), cin, cout, 3, stride, 1);
                let bn1 = b.bn(&format!("{p}.bn1"), cout);
                let conv2 = b.conv(&format!("{p}.conv2"), cout, cout, 3, 1, 1);
                let bn2 = b.bn(&format!("{p}.bn2"), cout);
                let shortcut = (stride != 1 || cin != cout).then(|| {
                    (
                        b.conv(&format!("{p}.shortcut.conv"), cin, cout, 1, stride, 0),
                        b.bn(&format!("{p}.shortcut.bn"), cout),
                    )
                });
                b.units.push(Unit::Block { conv1, bn1, conv2, bn2, shortcut });
                cin = cout;
                block += 1;
            }
        }

        let freq = cfg.n_mels.div_ceil(8);
        let dim = 2 * cin * freq;
        let weight = b.weight(
            "head.weight",
            vec![3, dim],
            Init::Uniform { bound: 1.0 / (dim as f64).sqrt() },
        );
        let bias = b.weight("head.bias", vec![3], Init::Values(&HEAD_BIAS));
        b.units.push(Unit::Head { weight, bias, channels: cin, freq });

        Layout {
            units: b.units,
            tensors: b.tensors,
            n_weights: b.n_weights,
            n_running: b.n_running,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Index of the unit owning trainable parameter `index`.
    pub fn unit_of_weight(&self, index: usize) -> usize {
        // each unit allocates its first conv (or the head matrix) first
        self.units
            .iter()
            .rposition(|unit| {
                let first = match unit {
                    Unit::Stem { conv, .. } => conv.weight,
                    Unit::Block { conv1, .. } => conv1.weight,
                    Unit::Head { weight, .. } => *weight,
                };
                first <= index
            })
            .unwrap_or(0)
    }
}

#[derive(Default)]
struct Builder {
    units: Vec<Unit>,
    tensors: Vec<TensorInfo>,
    n_weights: usize,
    n_running: usize,
}

impl Builder {
    fn push(&mut self, name: &str, shape: Vec<usize>, running: bool, init: Init) -> usize {
        let len: usize = shape.iter().product();
        let counter = if running { &mut self.n_running } else { &mut self.n_weights };
        let offset = *counter;
        *counter += len;
        self.tensors.push(TensorInfo {
            name: name.to_string(),
            shape,
            offset,
            running,
            init,
        });
        offset
    }

    fn weight(&mut self, name: &str, shape: Vec<usize>, init: Init) -> usize {
        self.push(name, shape, false, init)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let weight = self.weight(
            &format!("{name}.weight"),
            vec![cout, cin, k, k],
            Init::Kaiming { fan_in: cin * k * k },
        );
        Conv { weight, cin, cout, k, stride, pad }
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.weight(&format!("{name}.weight"), vec![c], Init::Constant(1.0)),
            beta: self.weight(&format!("{name}.bias"), vec![c], Init::Constant(0.0)),
            mean: self.push(&format!("{name}.running_mean"), vec![c], true, Init::Constant(0.0)),
            var: self.push(&format!("{name}.running_var"), vec![c], true, Init::Constant(1.0)),
            c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Raw network output for one fused input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOutput {
    pub logit: f64,
    pub score_cp: f64,
    pub mos_pre: [f64; 2],
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum UnitCache {
    Stem {
        bn: BnCache,
        out: Vec<FeatureMap>,
    },
    Block {
        bn1: BnCache,
        mid: Vec<FeatureMap>,
        bn2: BnCache,
        shortcut: Option<BnCache>,
        out: Vec<FeatureMap>,
    },
    Head {
        pooled: Vec<Vec<f64>>,
    },
}

impl UnitCache {
    fn out(&self) -> &[FeatureMap] {
        match self {
            UnitCache::Stem { out, .. } | UnitCache::Block { out, .. } => out,
            UnitCache::Head { .. } => &[],
        }
    }
}

/// Intermediate values of one forward pass over a batch, enough to run the
/// backward pass or resume the forward pass from any later unit.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    start: usize,
    input: Vec<FeatureMap>,
    caches: Vec<UnitCache>,
    pub outputs: Vec<ModelOutput>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Inputs to unit `u` for every sample in the batch.
    pub fn unit_input(&self, u: usize) -> &[FeatureMap] {
        assert!(u >= self.start, "unit {u} precedes the start of this tape");
        if u == self.start {
            &self.input
        } else {
            self.caches[u - self.start - 1].out()
        }
    }

    /// Activation pattern of every ReLU, in a fixed order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for cache in &self.caches {
            let maps: Vec<&FeatureMap> = match cache {
                UnitCache::Stem { out, .. } => out.iter().collect(),
                UnitCache::Block { mid, out, .. } => mid.iter().chain(out).collect(),
                UnitCache::Head { .. } => Vec::new(),
            };
            for m in maps {
                bits.extend(m.data.iter().map(|&v| v > 0.0));
            }
        }
        bits
    }
}

/// Network parameters: trainable tensors and batch-norm running statistics,
/// each stored as one flat vector.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Arc<Layout>,
    weights: Vec<f64>,
    running: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.weights == other.weights && self.running == other.running
    }
}

impl ModelParams {
    /// Freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::build(&config));
        let mut params = Self {
            config,
            weights: vec![0.0; layout.n_weights],
            running: vec![0.0; layout.n_running],
            layout,
        };
        let mut rng = SeedSplitter::new(seed).rng("init");
        let tensors = params.layout.tensors.clone();
        for t in &tensors {
            let dst = if t.running {
                &mut params.running[t.range()]
            } else {
                &mut params.weights[t.range()]
            };
            match t.init {
                Init::Kaiming { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive standard deviation");
                    dst.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                Init::Uniform { bound } => {
                    dst.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                Init::Constant(c) => dst.fill(c),
                Init::Values(vals) => dst.copy_from_slice(vals),
            }
        }
        Ok(params)
    }

    /// Parameters built from raw vectors, e.g. when loading a checkpoint.
    pub fn from_parts(config: ModelConfig, weights: Vec<f64>, running: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::build(&config));
        if weights.len() != layout.n_weights || running.len() != layout.n_running {
            return Err(Error::Shape(format!(
                "expected {} weights and {} running values, got {} and {}",
                layout.n_weights,
                layout.n_running,
                weights.len(),
                running.len()
            )));
        }
        Ok(Self { config, layout, weights, running })
    }

    /// Empty parameter vectors shaped like `config`, for loaders.
    pub fn layout_for(config: &ModelConfig) -> Result<Arc<Layout>> {
        config.validate()?;
        Ok(Arc::new(Layout::build(config)))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn running(&self) -> &[f64] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [f64] {
        &mut self.running
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    /// Values of a named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let t = self.layout.tensors.iter().find(|t| t.name == name)?;
        Some(if t.running { &self.running[t.range()] } else { &self.weights[t.range()] })
    }

    /// Sets the final affine map to zero so every output is 0 and the score
    /// is exactly 0.5.
    pub fn zero_head(&mut self) {
        if let Some(Unit::Head { weight, bias, channels, freq }) = self.layout.units.last() {
            let dim = 2 * channels * freq;
            self.weights[*weight..*weight + 3 * dim].fill(0.0);
            self.weights[*bias..*bias + 3].fill(0.0);
        }
    }

    /// Shape `(channels, frames, bands)` of the last residual stage for an
    /// input with `t` frames and `n` bands.
    pub fn stage4_shape(&self, t: usize, n: usize) -> (usize, usize, usize) {
        let mut dims = (t, n);
        let mut c = 0;
        for unit in &self.layout.units {
            match unit {
                Unit::Stem { conv, .. } => {
                    dims = conv.out_dims(dims.0, dims.1);
                    c = conv.cout;
                }
                Unit::Block { conv1, .. } => {
                    dims = conv1.out_dims(dims.0, dims.1);
                    c = conv1.cout;
                }
                Unit::Head { .. } => {}
            }
        }
        (c, dims.0, dims.1)
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.c != 2 {
            return Err(Error::Shape(format!("fused input needs 2 channels, got {}", x.c)));
        }
        if x.w != self.config.n_mels {
            return Err(Error::Shape(format!(
                "input has {} mel bands, model expects {}",
                x.w, self.config.n_mels
            )));
        }
        if x.h < MIN_FRAMES {
            return Err(Error::TooShort(format!(
                "{} frames, the network needs at least {MIN_FRAMES}",
                x.h
            )));
        }
        if x.data.len() != x.c * x.h * x.w {
            return Err(Error::Shape("feature map data does not match its shape".into()));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[FeatureMap], mode: Mode) -> Result<Tape> {
        for x in inputs {
            self.check_input(x)?;
        }
        self.forward_from(0, inputs.to_vec(), mode)
    }

    /// Runs units `start..` on `inputs`, the batch entering unit `start`.
    pub fn forward_from(&self, start: usize, inputs: Vec<FeatureMap>, mode: Mode) -> Result<Tape> {
        if inputs.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let train = mode == Mode::Train;
        let (w, r) = (&self.weights[..], &self.running[..]);
        let mut caches = Vec::with_capacity(self.layout.units.len() - start);
        let mut outputs = Vec::new();
        for (u, unit) in self.layout.units.iter().enumerate().skip(start) {
            let x: &[FeatureMap] = if u == start { &inputs } else { caches.last().map(UnitCache::out).unwrap_or(&[]) };
            let cache = match unit {
                Unit::Stem { conv, bn } => {
                    let a: Vec<FeatureMap> = x.iter().map(|x| conv.forward(w, x)).collect();
                    let (mut out, bn) = bn.forward(w, r, &a, train);
                    out.iter_mut().for_each(relu_in_place);
                    UnitCache::Stem { bn, out }
                }
                Unit::Block { conv1, bn1, conv2, bn2, shortcut } => {
                    let a1: Vec<FeatureMap> = x.iter().map(|x| conv1.forward(w, x)).collect();
                    let (mut mid, c1) = bn1.forward(w, r, &a1, train);
                    mid.iter_mut().for_each(relu_in_place);
                    let a2: Vec<FeatureMap> = mid.iter().map(|m| conv2.forward(w, m)).collect();
                    let (mut out, c2) = bn2.forward(w, r, &a2, train);
                    let sc_cache = match shortcut {
                        Some((sconv, sbn)) => {
                            let s: Vec<FeatureMap> = x.iter().map(|x| sconv.forward(w, x)).collect();
                            let (s, sc) = sbn.forward(w, r, &s, train);
                            for (o, s) in out.iter_mut().zip(&s) {
                                o.data.iter_mut().zip(&s.data).for_each(|(o, s)| *o += s);
                            }
                            Some(sc)
                        }
                        None => {
                            for (o, s) in out.iter_mut().zip(x) {
                                o.data.iter_mut().zip(&s.data).for_each(|(o, s)| *o += s);
                            }
                            None
                        }
                    };
                    out.iter_mut().for_each(relu_in_place);
                    UnitCache::Block { bn1: c1, mid, bn2: c2, shortcut: sc_cache, out }
                }
                Unit::Head { weight, bias, channels, freq } => {
                    let dim = 2 * channels * freq;
                    let mut pooled = Vec::with_capacity(x.len());
                    for x in x {
                        let feat = pool(x);
                        let mut o = [0.0; 3];
                        for (k, o) in o.iter_mut().enumerate() {
                            let row = &w[weight + k * dim..weight + (k + 1) * dim];
                            *o = w[bias + k] + row.iter().zip(&feat).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if o.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Numeric("non-finite network output".into()));
                        }
                        outputs.push(ModelOutput {
                            logit: o[0],
                            score_cp: sigmoid(o[0]),
                            mos_pre: [o[1], o[2]],
                        });
                        pooled.push(feat);
                    }
                    UnitCache::Head { pooled }
                }
            };
            caches.push(cache);
        }
        Ok(Tape { mode, start, input: inputs, caches, outputs })
    }

    /// Gradient of `sum_s <d_out[s], (logit, mos1, mos2)_s>` with respect to
    /// every trainable parameter, units before the tape start excluded.
    pub fn backward(&self, tape: &Tape, d_out: &[[f64; 3]]) -> Result<Vec<f64>> {
        if d_out.len() != tape.outputs.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for a batch of {}",
                d_out.len(),
                tape.outputs.len()
            )));
        }
        let w = &self.weights[..];
        let mut grad = vec![0.0; w.len()];
        let mut d: Vec<FeatureMap> = Vec::new();
        for (u, unit) in self.layout.units.iter().enumerate().skip(tape.start).rev() {
            let x = tape.unit_input(u);
            let cache = &tape.caches[u - tape.start];
            d = match (unit, cache) {
                (Unit::Head { weight, bias, channels, freq }, UnitCache::Head { pooled }) => {
                    let dim = 2 * channels * freq;
                    let mut dx = Vec::with_capacity(x.len());
                    for ((x, feat), g) in x.iter().zip(pooled).zip(d_out) {
                        let mut dfeat = vec![0.0; dim];
                        for k in 0..3 {
                            grad[bias + k] += g[k];
                            let row = weight + k * dim;
                            for j in 0..dim {
                                grad[row + j] += g[k] * feat[j];
                                dfeat[j] += g[k] * w[row + j];
                            }
                        }
                        dx.push(pool_backward(x, feat, &dfeat));
                    }
                    dx
                }
                (Unit::Block { conv1, bn1, conv2, bn2, shortcut }, UnitCache::Block { bn1: c1, mid, bn2: c2, shortcut: sc, out }) => {
                    for (g, o) in d.iter_mut().zip(out) {
                        relu_backward(o, g);
                    }
                    let da2 = bn2.backward(w, c2, &d, &mut grad);
                    let mut dmid: Vec<FeatureMap> = mid
                        .iter()
                        .zip(&da2)
                        .map(|(m, g)| conv2.backward(w, m, g, &mut grad))
                        .collect();
                    for (g, m) in dmid.iter_mut().zip(mid) {
                        relu_backward(m, g);
                    }
                    let da1 = bn1.backward(w, c1, &dmid, &mut grad);
                    let mut dx: Vec<FeatureMap> = x
                        .iter()
                        .zip(&da1)
                        .map(|(x, g)| conv1.backward(w, x, g, &mut grad))
                        .collect();
                    match (shortcut, sc) {
                        (Some((sconv, sbn)), Some(sc)) => {
                            let ds = sbn.backward(w, sc, &d, &mut grad);
                            for ((dx, x), g) in dx.iter_mut().zip(x).zip(&ds) {
                                let s = sconv.backward(w, x, g, &mut grad);
                                dx.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b);
                            }
                        }
                        _ => {
                            for (dx, g) in dx.iter_mut().zip(&d) {
                                dx.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    dx
                }
                (Unit::Stem { conv, bn }, UnitCache::Stem { bn: cache, out }) => {
                    for (g, o) in d.iter_mut().zip(out) {
                        relu_backward(o, g);
                    }
                    let da = bn.backward(w, cache, &d, &mut grad);
                    // the input gradient of the first unit is never used
                    for (x, g) in x.iter().zip(&da) {
                        conv.backward(w, x, g, &mut grad);
                    }
                    Vec::new()
                }
                _ => unreachable!("cache kind always matches its unit"),
            };
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(grad)
    }

    /// Folds the batch statistics of a training-mode tape into the running
    /// statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Train {
            return;
        }
        for (unit, cache) in self.layout.units.iter().skip(tape.start).zip(&tape.caches) {
            match (unit, cache) {
                (Unit::Stem { bn, .. }, UnitCache::Stem { bn: c, .. }) => {
                    bn.update_running(&mut self.running, c)
                }
                (Unit::Block { bn1, bn2, shortcut, .. }, UnitCache::Block { bn1: c1, bn2: c2, shortcut: sc, .. }) => {
                    bn1.update_running(&mut self.running, c1);
                    bn2.update_running(&mut self.running, c2);
                    if let (Some((_, sbn)), Some(sc)) = (shortcut, sc) {
                        sbn.update_running(&mut self.running, sc);
                    }
                }
                _ => {}
            }
        }
    }

    /// Inference on a single fused input.
    pub fn predict(&self, fused: &FeatureMap) -> Result<ModelOutput> {
        let tape = self.forward(std::slice::from_ref(fused), Mode::Eval)?;
        Ok(tape.outputs[0])
    }
}

/// Mean and population variance over time for every (channel, band),
/// means first.
fn pool(x: &FeatureMap) -> Vec<f64> {
    let cf = x.c * x.w;
    let mut feat = vec![0.0; 2 * cf];
    let inv_t = 1.0 / x.h as f64;
    for c in 0..x.c {
        let plane = x.plane(c);
        for f in 0..x.w {
            // deviations from the first frame make a constant column exact
            let x0 = plane[f];
            let shift = (0..x.h).map(|t| plane[t * x.w + f] - x0).sum::<f64>() * inv_t;
            let var = (0..x.h)
                .map(|t| {
                    let d = plane[t * x.w + f] - x0 - shift;
                    d * d
                })
                .sum::<f64>()
                * inv_t;
            let mean = x0 + shift;
            feat[c * x.w + f] = mean;
            feat[cf + c * x.w + f] = var;
        }
    }
    feat
}

fn pool_backward(x: &FeatureMap, feat: &[f64], dfeat: &[f64]) -> FeatureMap {
    let cf = x.c * x.w;
    let inv_t = 1.0 / x.h as f64;
    let mut dx = FeatureMap::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        let plane = x.plane(c);
        let dplane = dx.plane_mut(c);
        for f in 0..x.w {
            let j = c * x.w + f;
            let (mean, dm, dv) = (feat[j], dfeat[j], dfeat[cf + j]);
            for t in 0..x.h {
                let i = t * x.w + f;
                dplane[i] = dm * inv_t + dv * 2.0 * (plane[i] - mean) * inv_t;
            }
        }
    }
    dx
}
