//! Backbone graphs and fully parameterized main networks.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::bn::{bn_eval_forward, bn_train_backward, bn_train_forward, BnCache, BnSet, Mode};
use crate::error::{Error, Result};
use crate::meta::GeneratedKernel;
use crate::ops::{
    conv2d, conv2d_backward, conv_output_size, global_avg_pool, global_avg_pool_backward, linear,
    linear_backward, relu_backward_inplace, relu_inplace, softmax,
};
use crate::scalar::Scalar;
use crate::tensor::{axpy, FeatureMap, Matrix};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub layer_id: usize,
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvLayerSpec {
    pub fn in_channels_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels_per_group(),
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_shape().iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::Config(format!(
                "layer {}: channels ({}, {}) not divisible by groups {}",
                self.name, self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "layer {}: kernel size and stride must be at least 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// How convolutions are wired. Layer indices double as BN site indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    ConvBn {
        layer: usize,
        relu: bool,
    },
    Basic {
        conv1: usize,
        conv2: usize,
        shortcut: Option<usize>,
    },
    Inverted {
        expand: Option<usize>,
        depthwise: usize,
        project: usize,
        residual: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub blocks: Vec<Block>,
    pub num_classes: usize,
}

/// The `backbone` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// `tiny_resnet`, `tiny_mobile` or `plain`.
    pub name: String,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub block_counts: Vec<usize>,
    /// Expansion factor of inverted residual blocks.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    pub num_classes: usize,
}

fn default_in_channels() -> usize {
    3
}

fn default_expansion() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            name: "tiny_resnet".into(),
            in_channels: 3,
            stem_width: 16,
            stage_widths: vec![16, 32, 64],
            block_counts: vec![2, 2, 2],
            expansion: 4,
            num_classes: 10,
        }
    }
}

impl BackboneConfig {
    pub fn build(&self) -> Result<BackboneSpec> {
        if self.stage_widths.len() != self.block_counts.len() && self.name != "plain" {
            return Err(Error::Config(
                "stage_widths and block_counts must have equal length".into(),
            ));
        }
        let spec = match self.name.as_str() {
            "tiny_resnet" => BackboneSpec::tiny_resnet(
                self.in_channels,
                self.stem_width,
                &self.stage_widths,
                &self.block_counts,
                self.num_classes,
            ),
            "tiny_mobile" => BackboneSpec::tiny_mobile(
                self.in_channels,
                self.stem_width,
                &self.stage_widths,
                &self.block_counts,
                self.expansion,
                self.num_classes,
            ),
            "plain" => BackboneSpec::plain(self.in_channels, &self.stage_widths, self.num_classes),
            other => return Err(Error::Config(format!("unknown backbone {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

struct LayerBuilder {
    layers: Vec<ConvLayerSpec>,
}

impl LayerBuilder {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, name: String, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> usize {
        let id = self.layers.len();
        self.layers.push(ConvLayerSpec {
            layer_id: id,
            name,
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride,
            padding: k / 2,
            groups,
        });
        id
    }
}

impl BackboneSpec {
    /// Stride-1 `conv3x3-BN-ReLU` stack; the toy network used by gradient checks.
    pub fn plain(in_channels: usize, widths: &[usize], num_classes: usize) -> Self {
        let mut b = LayerBuilder { layers: Vec::new() };
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let layer = b.push(format!("conv{i}"), cin, w, 3, 1, 1);
            blocks.push(Block::ConvBn { layer, relu: true });
            cin = w;
        }
        BackboneSpec {
            name: "plain".into(),
            in_channels,
            layers: b.layers,
            blocks,
            num_classes,
        }
    }

    /// Stem conv followed by stages of basic residual blocks; every stage after
    /// the first halves the resolution.
    pub fn tiny_resnet(
        in_channels: usize,
        stem_width: usize,
        stage_widths: &[usize],
        block_counts: &[usize],
        num_classes: usize,
    ) -> Self {
        let mut b = LayerBuilder { layers: Vec::new() };
        let stem = b.push("stem".into(), in_channels, stem_width, 3, 1, 1);
        let mut blocks = vec![Block::ConvBn { layer: stem, relu: true }];
        let mut cin = stem_width;
        for (s, (&w, &count)) in stage_widths.iter().zip(block_counts).enumerate() {
            for i in 0..count {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let conv1 = b.push(format!("stage{}.{i}.conv1", s + 1), cin, w, 3, stride, 1);
                let conv2 = b.push(format!("stage{}.{i}.conv2", s + 1), w, w, 3, 1, 1);
                let shortcut = (stride != 1 || cin != w)
                    .then(|| b.push(format!("stage{}.{i}.shortcut", s + 1), cin, w, 1, stride, 1));
                blocks.push(Block::Basic {
                    conv1,
                    conv2,
                    shortcut,
                });
                cin = w;
            }
        }
        BackboneSpec {
            name: "tiny_resnet".into(),
            in_channels,
            layers: b.layers,
            blocks,
            num_classes,
        }
    }

    /// Stem conv followed by inverted residual blocks with depthwise 3x3 convs.
    pub fn tiny_mobile(
        in_channels: usize,
        stem_width: usize,
        stage_widths: &[usize],
        block_counts: &[usize],
        expansion: usize,
        num_classes: usize,
    ) -> Self {
        let mut b = LayerBuilder { layers: Vec::new() };
        let stem = b.push("stem".into(), in_channels, stem_width, 3, 1, 1);
        let mut blocks = vec![Block::ConvBn { layer: stem, relu: true }];
        let mut cin = stem_width;
        for (s, (&w, &count)) in stage_widths.iter().zip(block_counts).enumerate() {
            for i in 0..count {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let hidden = cin * expansion.max(1);
                let prefix = format!("stage{}.{i}", s + 1);
                let expand = (expansion > 1)
                    .then(|| b.push(format!("{prefix}.expand"), cin, hidden, 1, 1, 1));
                let depthwise = b.push(format!("{prefix}.depthwise"), hidden, hidden, 3, stride, hidden);
                let project = b.push(format!("{prefix}.project"), hidden, w, 1, 1, 1);
                blocks.push(Block::Inverted {
                    expand,
                    depthwise,
                    project,
                    residual: stride == 1 && cin == w,
                });
                cin = w;
            }
        }
        BackboneSpec {
            name: "tiny_mobile".into(),
            in_channels,
            layers: b.layers,
            blocks,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer_id != i {
                return Err(Error::Config(format!("layer {} has id {}", i, l.layer_id)));
            }
            l.validate()?;
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut used = vec![0usize; self.layers.len()];
        let mut channels = self.in_channels;
        let check = |id: usize, cin: usize| -> Result<usize> {
            let l = self
                .layers
                .get(id)
                .ok_or_else(|| Error::Config(format!("block references missing layer {id}")))?;
            if l.in_channels != cin {
                return Err(Error::Config(format!(
                    "layer {} expects {} input channels, wiring provides {cin}",
                    l.name, l.in_channels
                )));
            }
            Ok(l.out_channels)
        };
        for block in &self.blocks {
            match *block {
                Block::ConvBn { layer, .. } => {
                    used[layer] += 1;
                    channels = check(layer, channels)?;
                }
                Block::Basic {
                    conv1,
                    conv2,
                    shortcut,
                } => {
                    used[conv1] += 1;
                    used[conv2] += 1;
                    let mid = check(conv1, channels)?;
                    let out = check(conv2, mid)?;
                    let skip = match shortcut {
                        Some(s) => {
                            used[s] += 1;
                            check(s, channels)?
                        }
                        None => channels,
                    };
                    if skip != out {
                        return Err(Error::Config("residual channel mismatch".into()));
                    }
                    channels = out;
                }
                Block::Inverted {
                    expand,
                    depthwise,
                    project,
                    residual,
                } => {
                    let mut c = channels;
                    if let Some(e) = expand {
                        used[e] += 1;
                        c = check(e, c)?;
                    }
                    used[depthwise] += 1;
                    c = check(depthwise, c)?;
                    used[project] += 1;
                    c = check(project, c)?;
                    if residual && c != channels {
                        return Err(Error::Config("residual channel mismatch".into()));
                    }
                    channels = c;
                }
            }
        }
        if used.iter().any(|&u| u != 1) {
            return Err(Error::Config("every layer must be wired exactly once".into()));
        }
        Ok(())
    }

    /// Channel count of every BN site (one per conv, in layer order).
    pub fn bn_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_channels).collect()
    }

    pub fn feature_dim(&self) -> usize {
        match self.blocks.last() {
            Some(Block::ConvBn { layer, .. }) => self.layers[*layer].out_channels,
            Some(Block::Basic { conv2, .. }) => self.layers[*conv2].out_channels,
            Some(Block::Inverted { project, .. }) => self.layers[*project].out_channels,
            None => self.in_channels,
        }
    }

    /// Product of the strides along the main path.
    pub fn downsample_rate(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match *b {
                Block::ConvBn { layer, .. } => self.layers[layer].stride,
                Block::Basic { conv1, .. } => self.layers[conv1].stride,
                Block::Inverted { depthwise, .. } => self.layers[depthwise].stride,
            })
            .product()
    }

    /// Spatial size of the last feature map for a square input, or `None`
    /// if some layer would receive an input smaller than its kernel.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut size = input;
        for block in &self.blocks {
            let main: Vec<usize> = match *block {
                Block::ConvBn { layer, .. } => vec![layer],
                Block::Basic { conv1, conv2, .. } => vec![conv1, conv2],
                Block::Inverted {
                    expand,
                    depthwise,
                    project,
                    ..
                } => expand.into_iter().chain([depthwise, project]).collect(),
            };
            for id in main {
                size = conv_output_size(size, &self.layers[id]).filter(|&s| s > 0)?;
            }
        }
        Some(size)
    }
}

/// Classifier shared by every main network of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    /// `num_classes x feature_dim`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Classifier {
            weight: Matrix::zeros(num_classes, feature_dim),
            bias: vec![T::zero(); num_classes],
        }
    }
}

/// Probability vector over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution {
    pub probs: Vec<f64>,
}

impl PredictionDistribution {
    /// Index of the most probable class (first on ties).
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax of one logit row.
pub fn predict_probs<T: Scalar>(logits: &[T]) -> PredictionDistribution {
    let wide: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    PredictionDistribution {
        probs: softmax(&wide),
    }
}

/// Softmax of every row of a logit matrix.
pub fn predict_batch<T: Scalar>(logits: &Matrix<T>) -> Vec<PredictionDistribution> {
    (0..logits.rows).map(|r| predict_probs(logits.row(r))).collect()
}

/// A backbone bound to one set of generated kernels, one BN set and the
/// shared classifier.
#[derive(Clone, Debug)]
pub struct MainNetwork<'a, T: Scalar> {
    pub backbone: &'a BackboneSpec,
    pub kernels: Vec<GeneratedKernel<T>>,
    pub bn: Cow<'a, BnSet<T>>,
    pub fc: &'a Classifier<T>,
}

/// Gradients of one main network's parameters.
#[derive(Clone, Debug)]
pub struct NetworkGrads<T> {
    pub kernels: Vec<Vec<T>>,
    pub gamma: Vec<Vec<T>>,
    pub beta: Vec<Vec<T>>,
    pub fc: Classifier<T>,
}

struct Unit<T> {
    input: FeatureMap<T>,
    bn: BnCache<T>,
}

enum BlockTape<T> {
    ConvBn {
        unit: Unit<T>,
        output: Option<FeatureMap<T>>,
    },
    Basic {
        unit1: Unit<T>,
        mid: FeatureMap<T>,
        unit2: Unit<T>,
        shortcut: Option<Unit<T>>,
        output: FeatureMap<T>,
    },
    Inverted {
        expand: Option<(Unit<T>, FeatureMap<T>)>,
        depthwise: Unit<T>,
        dw_out: FeatureMap<T>,
        project: Unit<T>,
    },
}

/// Saved activations of a train-mode forward pass.
pub struct Tape<T> {
    blocks: Vec<BlockTape<T>>,
    features: Matrix<T>,
    last_shape: (usize, usize, usize, usize),
}

pub struct TrainOutput<T> {
    pub logits: Matrix<T>,
    pub tape: Tape<T>,
    /// Batch `(mean, variance)` per BN site, for the running-average update.
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

/// Observer of pre-normalization activations; return `false` to stop the pass.
pub type SiteObserver<'o, T> = dyn FnMut(usize, &FeatureMap<T>) -> bool + 'o;

struct Runner<'n, 'a, 'o, T: Scalar> {
    net: &'n MainNetwork<'a, T>,
    mode: Mode,
    stats: Vec<(Vec<T>, Vec<T>)>,
    observer: Option<&'n mut SiteObserver<'o, T>>,
}

impl<T: Scalar> Runner<'_, '_, '_, T> {
    /// conv + BN (no activation). `None` when the observer stopped the pass.
    fn unit(&mut self, layer: usize, x: &FeatureMap<T>) -> Option<(FeatureMap<T>, Option<Unit<T>>)> {
        let spec = &self.net.backbone.layers[layer];
        let mut y = conv2d(x, &self.net.kernels[layer].data, spec);
        if let Some(obs) = self.observer.as_mut() {
            if !obs(layer, &y) {
                return None;
            }
        }
        let site = &self.net.bn.sites[layer];
        match self.mode {
            Mode::Train => {
                let cache = bn_train_forward(site, &mut y);
                self.stats[layer] = (cache.batch_mean.clone(), cache.batch_var.clone());
                Some((
                    y,
                    Some(Unit {
                        input: x.clone(),
                        bn: cache,
                    }),
                ))
            }
            Mode::Eval => {
                bn_eval_forward(site, &mut y);
                Some((y, None))
            }
        }
    }

    fn block(&mut self, block: &Block, x: FeatureMap<T>) -> Option<(FeatureMap<T>, Option<BlockTape<T>>)> {
        let train = self.mode == Mode::Train;
        match *block {
            Block::ConvBn { layer, relu } => {
                let (mut y, unit) = self.unit(layer, &x)?;
                if relu {
                    relu_inplace(&mut y);
                }
                let tape = unit.map(|unit| BlockTape::ConvBn {
                    unit,
                    output: relu.then(|| y.clone()),
                });
                Some((y, tape))
            }
            Block::Basic {
                conv1,
                conv2,
                shortcut,
            } => {
                let (mut mid, unit1) = self.unit(conv1, &x)?;
                relu_inplace(&mut mid);
                let (mut out, unit2) = self.unit(conv2, &mid)?;
                let (skip, short_unit) = match shortcut {
                    Some(s) => {
                        let (y, u) = self.unit(s, &x)?;
                        (Cow::Owned(y), u)
                    }
                    None => (Cow::Borrowed(&x), None),
                };
                axpy(T::one(), &skip.data, &mut out.data);
                relu_inplace(&mut out);
                let tape = train.then(|| BlockTape::Basic {
                    unit1: unit1.expect("train"),
                    mid,
                    unit2: unit2.expect("train"),
                    shortcut: short_unit,
                    output: out.clone(),
                });
                Some((out, tape))
            }
            Block::Inverted {
                expand,
                depthwise,
                project,
                residual,
            } => {
                let (hidden, expand_tape) = match expand {
                    Some(e) => {
                        let (mut h, u) = self.unit(e, &x)?;
                        relu_inplace(&mut h);
                        let t = u.map(|u| (u, h.clone()));
                        (h, t)
                    }
                    None => (x.clone(), None),
                };
                let (mut dw_out, dw_unit) = self.unit(depthwise, &hidden)?;
                relu_inplace(&mut dw_out);
                let (mut out, proj_unit) = self.unit(project, &dw_out)?;
                if residual {
                    axpy(T::one(), &x.data, &mut out.data);
                }
                let tape = train.then(|| BlockTape::Inverted {
                    expand: expand_tape,
                    depthwise: dw_unit.expect("train"),
                    dw_out,
                    project: proj_unit.expect("train"),
                });
                Some((out, tape))
            }
        }
    }
}

impl<'a, T: Scalar> MainNetwork<'a, T> {
    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels != self.backbone.in_channels {
            return Err(Error::InvalidInput(format!(
                "expected {} input channels, got {}",
                self.backbone.in_channels, x.channels
            )));
        }
        if x.height != x.width {
            return Err(Error::InvalidInput(format!(
                "expected square inputs, got {}x{}",
                x.height, x.width
            )));
        }
        if x.batch == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if self.backbone.output_size(x.height).is_none() {
            return Err(Error::InvalidInput(format!(
                "input size {} is too small for the stride stack",
                x.height
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &FeatureMap<T>,
        mode: Mode,
        observer: Option<&mut SiteObserver<'_, T>>,
    ) -> Result<Option<(Matrix<T>, Option<Tape<T>>, Vec<(Vec<T>, Vec<T>)>)>> {
        self.check_input(x)?;
        let mut runner = Runner {
            net: self,
            mode,
            stats: vec![(Vec::new(), Vec::new()); self.backbone.layers.len()],
            observer,
        };
        let mut h = x.clone();
        let mut tapes = Vec::new();
        for block in &self.backbone.blocks {
            let Some((out, tape)) = runner.block(block, h) else {
                return Ok(None);
            };
            h = out;
            tapes.extend(tape);
        }
        let features = global_avg_pool(&h);
        let logits = linear(&features, &self.fc.weight, &self.fc.bias);
        let tape = (mode == Mode::Train).then(|| Tape {
            blocks: tapes,
            features,
            last_shape: (h.channels, h.batch, h.height, h.width),
        });
        Ok(Some((logits, tape, runner.stats)))
    }

    /// Logits `(batch, num_classes)`. Train mode normalizes with batch
    /// statistics but leaves the bound BN set untouched; use
    /// [`forward_train`](Self::forward_train) to obtain the statistics update.
    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> Result<Matrix<T>> {
        Ok(self.run(x, mode, None)?.expect("no observer").0)
    }

    pub fn forward_train(&self, x: &FeatureMap<T>) -> Result<TrainOutput<T>> {
        let (logits, tape, batch_stats) = self.run(x, Mode::Train, None)?.expect("no observer");
        Ok(TrainOutput {
            logits,
            tape: tape.expect("train tape"),
            batch_stats,
        })
    }

    /// Eval-mode pass that reports every site's pre-normalization input to
    /// `observer` before normalizing it. Returns `None` if the observer
    /// stopped the pass early.
    pub fn forward_observed(
        &self,
        x: &FeatureMap<T>,
        observer: &mut SiteObserver<'_, T>,
    ) -> Result<Option<Matrix<T>>> {
        Ok(self.run(x, Mode::Eval, Some(observer))?.map(|r| r.0))
    }

    fn unit_backward(&self, layer: usize, unit: &Unit<T>, mut grad: FeatureMap<T>, grads: &mut NetworkGrads<T>) -> Option<FeatureMap<T>> {
        let site = &self.bn.sites[layer];
        let (dg, db) = bn_train_backward(site, &unit.bn, &mut grad);
        grads.gamma[layer] = dg;
        grads.beta[layer] = db;
        let need_dx = layer != 0;
        let (dk, dx) = conv2d_backward(
            &unit.input,
            &self.kernels[layer].data,
            &grad,
            &self.backbone.layers[layer],
            need_dx,
        );
        grads.kernels[layer] = dk;
        dx
    }

    /// Backpropagate `d_logits` through a recorded train-mode pass.
    pub fn backward(&self, tape: &Tape<T>, d_logits: &Matrix<T>) -> NetworkGrads<T> {
        let n_layers = self.backbone.layers.len();
        let mut grads = NetworkGrads {
            kernels: vec![Vec::new(); n_layers],
            gamma: vec![Vec::new(); n_layers],
            beta: vec![Vec::new(); n_layers],
            fc: Classifier::zeros(self.fc.weight.rows, self.fc.weight.cols),
        };
        let (d_features, d_weight, d_bias) = linear_backward(&tape.features, &self.fc.weight, d_logits);
        grads.fc = Classifier {
            weight: d_weight,
            bias: d_bias,
        };
        let (c, n, h, w) = tape.last_shape;
        let mut grad = Some(global_avg_pool_backward(&d_features, c, n, h, w));
        for (block, bt) in self.backbone.blocks.iter().zip(&tape.blocks).rev() {
            let Some(mut g) = grad.take() else { break };
            grad = match (block, bt) {
                (Block::ConvBn { layer, .. }, BlockTape::ConvBn { unit, output }) => {
                    if let Some(out) = output {
                        relu_backward_inplace(out, &mut g);
                    }
                    self.unit_backward(*layer, unit, g, &mut grads)
                }
                (
                    Block::Basic {
                        conv1,
                        conv2,
                        shortcut,
                    },
                    BlockTape::Basic {
                        unit1,
                        mid,
                        unit2,
                        shortcut: short_unit,
                        output,
                    },
                ) => {
                    relu_backward_inplace(output, &mut g);
                    let skip_grad = match (shortcut, short_unit) {
                        (Some(s), Some(u)) => self.unit_backward(*s, u, g.clone(), &mut grads),
                        _ => Some(g.clone()),
                    };
                    let mut d_mid = self
                        .unit_backward(*conv2, unit2, g, &mut grads)
                        .expect("inner layer input grad");
                    relu_backward_inplace(mid, &mut d_mid);
                    let d_in = self.unit_backward(*conv1, unit1, d_mid, &mut grads);
                    match (d_in, skip_grad) {
                        (Some(mut a), Some(b)) => {
                            axpy(T::one(), &b.data, &mut a.data);
                            Some(a)
                        }
                        (a, b) => a.or(b),
                    }
                }
                (
                    Block::Inverted {
                        expand,
                        depthwise,
                        project,
                        residual,
                    },
                    BlockTape::Inverted {
                        expand: expand_tape,
                        depthwise: dw_unit,
                        dw_out,
                        project: proj_unit,
                    },
                ) => {
                    let skip = residual.then(|| g.clone());
                    let mut d_dw = self
                        .unit_backward(*project, proj_unit, g, &mut grads)
                        .expect("inner layer input grad");
                    relu_backward_inplace(dw_out, &mut d_dw);
                    let mut d_hidden = self.unit_backward(*depthwise, dw_unit, d_dw, &mut grads);
                    if let (Some(e), Some((unit, h))) = (expand, expand_tape) {
                        let mut dh = d_hidden.expect("inner layer input grad");
                        relu_backward_inplace(h, &mut dh);
                        d_hidden = self.unit_backward(*e, unit, dh, &mut grads);
                    }
                    match (d_hidden, skip) {
                        (Some(mut a), Some(b)) => {
                            axpy(T::one(), &b.data, &mut a.data);
                            Some(a)
                        }
                        (a, b) => a.or(b),
                    }
                }
                _ => unreachable!("tape does not match backbone"),
            };
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{generate_kernel, init_meta_params, ScaleEncoding};

    fn network<'a>(
        spec: &'a BackboneSpec,
        bn: &'a BnSet<f64>,
        fc: &'a Classifier<f64>,
    ) -> MainNetwork<'a, f64> {
        let meta = init_meta_params::<f64>(spec, 0, 1);
        let kernels = meta
            .iter()
            .zip(&spec.layers)
            .map(|(m, l)| generate_kernel(m, l, ScaleEncoding(0.5)).unwrap())
            .collect();
        MainNetwork {
            backbone: spec,
            kernels,
            bn: Cow::Borrowed(bn),
            fc,
        }
    }

    fn input(batch: usize, size: usize) -> FeatureMap<f64> {
        let mut x = FeatureMap::zeros(3, batch, size, size);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 7919 % 101) as f64 / 50.0) - 1.0;
        }
        x
    }

    #[test]
    fn builders_validate_and_report_downsampling() {
        let r = BackboneConfig::default().build().unwrap();
        assert_eq!(r.downsample_rate(), 4);
        // stem + 6 blocks * 2 convs + 2 shortcuts
        assert_eq!(r.layers.len(), 15);
        let m = BackboneConfig {
            name: "tiny_mobile".into(),
            ..BackboneConfig::default()
        }
        .build()
        .unwrap();
        assert_eq!(m.downsample_rate(), 4);
        assert!(m.layers.iter().any(|l| l.groups == l.in_channels && l.groups > 1));
        assert!(BackboneConfig {
            name: "vgg".into(),
            ..BackboneConfig::default()
        }
        .build()
        .is_err());
    }

    #[test]
    fn logits_shape_at_several_sizes() {
        let spec = BackboneConfig {
            stem_width: 4,
            stage_widths: vec![4, 8],
            block_counts: vec![1, 1],
            ..BackboneConfig::default()
        }
        .build()
        .unwrap();
        let bn = BnSet::new(&spec.bn_channels());
        let fc = Classifier::zeros(10, spec.feature_dim());
        let net = network(&spec, &bn, &fc);
        assert_eq!(net.forward(&input(4, 32), Mode::Eval).unwrap().rows, 4);
        let l = net.forward(&input(2, 24), Mode::Eval).unwrap();
        assert_eq!((l.rows, l.cols), (2, 10));
        let a = net.forward(&input(2, 24), Mode::Eval).unwrap();
        assert_eq!(a, l);
    }

    #[test]
    fn rejects_inputs_too_small_or_non_square() {
        let spec = BackboneSpec::tiny_resnet(3, 4, &[4, 4, 4, 4, 4], &[1, 1, 1, 1, 1], 3);
        let bn = BnSet::new(&spec.bn_channels());
        let fc = Classifier::zeros(3, spec.feature_dim());
        let net = network(&spec, &bn, &fc);
        assert!(net.forward(&input(1, 8), Mode::Eval).is_ok());
        let mut rect = FeatureMap::zeros(3, 1, 8, 6);
        rect.data.fill(0.1);
        assert!(matches!(net.forward(&rect, Mode::Eval), Err(Error::InvalidInput(_))));
        assert!(spec.output_size(1).is_some());
        let tiny = BackboneSpec::plain(3, &[2], 2);
        let bn = BnSet::new(&tiny.bn_channels());
        let fc = Classifier::zeros(2, 2);
        let net = network(&tiny, &bn, &fc);
        let mut x = FeatureMap::zeros(2, 1, 4, 4);
        x.data.fill(1.0);
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn predict_probs_examples() {
        assert_eq!(predict_probs(&[0.0f64, 0.0]).probs, vec![0.5, 0.5]);
        let u = predict_probs(&[2.5f32, 2.5, 2.5]);
        for p in u.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = predict_probs(&[1000.0f64, 0.0]);
        assert_eq!(s.probs[0], 1.0);
        assert!(s.probs[1] < 1e-300);
        assert_eq!(s.top1(), 0);
    }

    fn check_backward(spec: &BackboneSpec) {
        let mut bn = BnSet::<f64>::new(&spec.bn_channels());
        for (i, s) in bn.sites.iter_mut().enumerate() {
            for c in 0..s.channels() {
                s.gamma[c] = 1.0 + 0.1 * ((i + c) % 3) as f64;
                s.beta[c] = 0.05 * c as f64 - 0.1;
            }
        }
        let mut fc = Classifier::<f64>::zeros(3, spec.feature_dim());
        for (i, v) in fc.weight.data.iter_mut().enumerate() {
            *v = ((i * 13 % 7) as f64 - 3.0) * 0.2;
        }
        let net = network(spec, &bn, &fc);
        let x = input(3, 8);
        let r: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).cos()).collect();
        let loss = |net: &MainNetwork<f64>| -> f64 {
            let l = net.forward(&x, Mode::Train).unwrap();
            l.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let out = net.forward_train(&x).unwrap();
        let d = Matrix::from_vec(3, 3, r.clone());
        let grads = net.backward(&out.tape, &d);
        let h = 1e-6;
        for layer in 0..spec.layers.len() {
            for i in [0, spec.layers[layer].kernel_len() / 2] {
                let mut p = net.clone();
                p.kernels[layer].data[i] += h;
                let mut m = net.clone();
                m.kernels[layer].data[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grads.kernels[layer][i];
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{} kernel[{i}]: fd {fd} an {an}",
                    spec.layers[layer].name
                );
            }
            let mut p = net.clone();
            p.bn.to_mut().sites[layer].gamma[0] += h;
            let mut m = net.clone();
            m.bn.to_mut().sites[layer].gamma[0] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads.gamma[layer][0]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn residual_backward_matches_finite_differences() {
        check_backward(&BackboneSpec::tiny_resnet(3, 4, &[4, 6], &[1, 1], 3));
    }

    #[test]
    fn inverted_backward_matches_finite_differences() {
        check_backward(&BackboneSpec::tiny_mobile(3, 4, &[4, 6], &[1, 1], 2, 3));
    }
}
