//! Mixed-scale training: summed cross-entropy over every training resolution,
//! top-down distillation between resolutions, and momentum SGD on a half
//! cosine schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{to_input, train_view, AugmentConfig, Dataset, Image};
use crate::error::{Error, Result};
use crate::meta::accumulate_meta_grad;
use crate::model::Model;
use crate::network::{Classifier, PredictionDistribution};
use crate::ops::log_softmax;
use crate::scalar::{cast, Scalar};
use crate::tensor::{axpy, FeatureMap, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Training resolutions; stored largest first after validation.
    pub resolutions: Vec<u32>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub distill: bool,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub hidden_units: usize,
    #[serde(default)]
    pub share_bn: bool,
    #[serde(default = "default_coefficient")]
    pub encoding_coefficient: f64,
    /// Encoding denominator; defaults to the backbone's downsample rate.
    #[serde(default)]
    pub downsample_rate: Option<u32>,
    #[serde(default)]
    pub augment: AugmentConfig,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_coefficient() -> f64 {
    0.1
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            resolutions: vec![32, 24, 16],
            alpha: 1.0,
            beta: 1.0,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            distill: true,
            temperature: 1.0,
            hidden_units: 0,
            share_bn: false,
            encoding_coefficient: 0.1,
            downsample_rate: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Check invariants and sort the resolutions largest first.
    pub fn validate(&mut self) -> Result<()> {
        self.resolutions = crate::bn::sorted_resolutions(&self.resolutions)?;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if !(self.lr0 >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr0, momentum and weight_decay must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            distill: self.distill,
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub distill: bool,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            distill: true,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `(resolution, mean cross-entropy)` in the order the scales were given.
    pub ce_per_scale: Vec<(u32, f64)>,
    /// `(teacher resolution, student resolution, mean KL)`.
    pub kl_per_pair: Vec<(u32, u32, f64)>,
    pub loss_ce: f64,
    pub loss_sd: f64,
    pub loss_total: f64,
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy over the batch.
pub fn ce_loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    Ok(ce_loss_grad(logits, labels)?.0)
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn ce_loss_grad<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(f64, Matrix<T>)> {
    check_labels(labels, logits.cols, logits.rows)?;
    let n = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let logp = log_softmax(&row);
        total -= logp[label];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let indicator = if c == label { 1.0 } else { 0.0 };
            *g = cast((logp[c].exp() - indicator) / n);
        }
    }
    Ok((total / n, grad))
}

/// `KL(p || q)` for probability vectors, with `0 * ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Ordered teacher/student pairs: every resolution teaches every smaller one.
pub fn distillation_pairs(resolutions: &[u32]) -> Vec<(u32, u32)> {
    let mut sorted = resolutions.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut pairs = Vec::new();
    for (i, &teacher) in sorted.iter().enumerate() {
        for &student in &sorted[i + 1..] {
            if student < teacher {
                pairs.push((teacher, student));
            }
        }
    }
    pairs
}

/// Scale-distillation loss over per-scale predictions of the same samples:
/// the sum over teacher/student pairs of the batch-mean `KL(teacher || student)`.
pub fn sd_loss(probs_by_scale: &[(u32, Vec<PredictionDistribution>)]) -> Result<f64> {
    let batch = probs_by_scale.first().map_or(0, |(_, p)| p.len());
    if probs_by_scale.iter().any(|(_, p)| p.len() != batch) {
        return Err(Error::InvalidArgument("per-scale batches differ in size".into()));
    }
    let find = |s: u32| &probs_by_scale.iter().find(|(r, _)| *r == s).expect("listed").1;
    let resolutions: Vec<u32> = probs_by_scale.iter().map(|(r, _)| *r).collect();
    let mut total = 0.0;
    for (t, s) in distillation_pairs(&resolutions) {
        let (pt, ps) = (find(t), find(s));
        let kl: f64 = pt.iter().zip(ps).map(|(a, b)| kl_divergence(&a.probs, &b.probs)).sum();
        total += kl / batch.max(1) as f64;
    }
    Ok(total)
}

/// Distillation loss on logits, with gradients flowing only into students.
///
/// Returns the loss, the per-pair terms and one logit gradient per input.
/// With temperature `tau` the terms are `tau^2 * KL(softmax(z_t/tau) || softmax(z_s/tau))`.
pub(crate) fn sd_loss_grad<T: Scalar>(
    logits_by_scale: &[(u32, &Matrix<T>)],
    temperature: f64,
) -> Result<(f64, Vec<(u32, u32, f64)>, Vec<Matrix<T>>)> {
    let rows = logits_by_scale.first().map_or(0, |(_, l)| l.rows);
    if logits_by_scale.iter().any(|(_, l)| l.rows != rows) {
        return Err(Error::InvalidArgument("per-scale batches differ in size".into()));
    }
    let n = rows.max(1) as f64;
    let tau = temperature;
    let log_probs: Vec<Vec<Vec<f64>>> = logits_by_scale
        .iter()
        .map(|(_, l)| {
            (0..l.rows)
                .map(|r| {
                    let row: Vec<f64> = l.row(r).iter().map(|v| v.as_f64() / tau).collect();
                    log_softmax(&row)
                })
                .collect()
        })
        .collect();
    let mut grads: Vec<Matrix<T>> = logits_by_scale
        .iter()
        .map(|(_, l)| Matrix::zeros(l.rows, l.cols))
        .collect();
    let index = |s: u32| logits_by_scale.iter().position(|(r, _)| *r == s).expect("listed");
    let resolutions: Vec<u32> = logits_by_scale.iter().map(|(r, _)| *r).collect();
    let mut total = 0.0;
    let mut pairs = Vec::new();
    for (t, s) in distillation_pairs(&resolutions) {
        let (ti, si) = (index(t), index(s));
        let mut kl = 0.0;
        for r in 0..rows {
            let (lt, ls) = (&log_probs[ti][r], &log_probs[si][r]);
            for c in 0..lt.len() {
                let pt = lt[c].exp();
                if pt > 0.0 {
                    kl += pt * (lt[c] - ls[c]);
                }
                // d/dz_s of tau^2 * KL = tau * (p_s - p_t); the teacher is a constant.
                let g = tau * (ls[c].exp() - pt) / n;
                grads[si].data[r * lt.len() + c] += cast(g);
            }
        }
        let term = tau * tau * kl / n;
        pairs.push((t, s, term));
        total += term;
    }
    Ok((total, pairs, grads))
}

/// One training resolution's view of an aligned batch.
#[derive(Clone, Debug)]
pub struct ScaleBatch<T> {
    pub resolution: u32,
    pub input: FeatureMap<T>,
    pub labels: Vec<usize>,
}

/// Gradients (or momentum buffers) shaped like the model's trainable state.
#[derive(Clone, Debug)]
pub struct ModelGrads<T: Scalar> {
    pub meta: Vec<crate::meta::MetaLearnerParams<T>>,
    /// Per BN set `(d_gamma, d_beta)` for each site; `None` if the set took no part.
    pub bn: Vec<Option<Vec<(Vec<T>, Vec<T>)>>>,
    pub fc: Classifier<T>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros(model: &Model<T>) -> Self {
        ModelGrads {
            meta: model.meta.iter().map(|m| m.zeros_like()).collect(),
            bn: vec![None; model.bank.sets().len()],
            fc: Classifier::zeros(model.fc.weight.rows, model.fc.weight.cols),
        }
    }

    /// Sum of squares of every meta-learner gradient.
    pub fn meta_norm_sq(&self) -> f64 {
        self.meta
            .iter()
            .flat_map(|m| m.tensors().into_iter().flat_map(|(_, v)| v.iter().map(|x| x.as_f64().powi(2))))
            .sum()
    }
}

pub struct StepOutput<T: Scalar> {
    pub loss: LossBreakdown,
    pub grads: ModelGrads<T>,
    /// Batch statistics per resolution, per BN site.
    pub batch_stats: Vec<(u32, Vec<(Vec<T>, Vec<T>)>)>,
}

/// Forward every scale in train mode, combine the losses and backpropagate.
/// The model is not modified.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batches: &[ScaleBatch<T>],
    weights: &LossWeights,
) -> Result<StepOutput<T>> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no scales in step".into()));
    }
    let rows = batches[0].labels.len();
    if batches.iter().any(|b| b.labels.len() != rows || b.input.batch != rows) {
        return Err(Error::InvalidArgument("per-scale batches differ in size".into()));
    }
    let mut nets = Vec::with_capacity(batches.len());
    let mut outputs = Vec::with_capacity(batches.len());
    for b in batches {
        let eps = model.encode(b.resolution)?;
        let net = model.parameterize(eps, b.resolution)?;
        outputs.push(net.forward_train(&b.input)?);
        nets.push((eps, net));
    }

    let mut loss = LossBreakdown::default();
    let mut d_logits = Vec::with_capacity(batches.len());
    for (b, out) in batches.iter().zip(&outputs) {
        let (ce, g) = ce_loss_grad(&out.logits, &b.labels)?;
        loss.ce_per_scale.push((b.resolution, ce));
        loss.loss_ce += ce;
        let mut g = g;
        for v in g.data.iter_mut() {
            *v *= cast(weights.alpha);
        }
        d_logits.push(g);
    }
    if weights.distill && batches.len() > 1 {
        let logits: Vec<(u32, &Matrix<T>)> = batches
            .iter()
            .zip(&outputs)
            .map(|(b, o)| (b.resolution, &o.logits))
            .collect();
        let (sd, pairs, grads) = sd_loss_grad(&logits, weights.temperature)?;
        loss.loss_sd = sd;
        loss.kl_per_pair = pairs;
        for (d, g) in d_logits.iter_mut().zip(&grads) {
            axpy(cast(weights.beta), &g.data, &mut d.data);
        }
    }
    loss.loss_total = weights.alpha * loss.loss_ce + weights.beta * loss.loss_sd;

    let mut grads = ModelGrads::zeros(model);
    let mut batch_stats = Vec::with_capacity(batches.len());
    for (((b, out), (eps, net)), d) in batches.iter().zip(outputs).zip(&nets).zip(&d_logits) {
        let g = net.backward(&out.tape, d);
        for ((meta, grad), dk) in model.meta.iter().zip(grads.meta.iter_mut()).zip(&g.kernels) {
            accumulate_meta_grad(meta, *eps, dk, grad);
        }
        let set = model.bank.set_index(b.resolution)?;
        let entry = grads.bn[set].get_or_insert_with(|| {
            g.gamma
                .iter()
                .map(|v| (vec![T::zero(); v.len()], vec![T::zero(); v.len()]))
                .collect()
        });
        for ((acc_g, acc_b), (dg, db)) in entry.iter_mut().zip(g.gamma.iter().zip(&g.beta)) {
            axpy(T::one(), dg, acc_g);
            axpy(T::one(), db, acc_b);
        }
        axpy(T::one(), &g.fc.weight.data, &mut grads.fc.weight.data);
        axpy(T::one(), &g.fc.bias, &mut grads.fc.bias);
        batch_stats.push((b.resolution, out.batch_stats));
    }
    Ok(StepOutput {
        loss,
        grads,
        batch_stats,
    })
}

/// `lr0 * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// Momentum SGD with decoupled-from-BN weight decay (meta-learners and the
/// classifier decay; BN scale and shift do not). BN sets that received no
/// gradient in a step are left untouched, momentum included.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ModelGrads<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    fn update(param: &mut [T], grad: &[T], vel: &mut [T], lr: T, mom: T, wd: T) {
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
            let d = g + wd * *p;
            *v = mom * *v + d;
            *p -= lr * *v;
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &ModelGrads<T>, lr: f64) {
        let vel = self.velocity.get_or_insert_with(|| ModelGrads::zeros(model));
        let (lr, mom, wd) = (cast::<T>(lr), cast::<T>(self.momentum), cast::<T>(self.weight_decay));
        for ((p, g), v) in model.meta.iter_mut().zip(&grads.meta).zip(vel.meta.iter_mut()) {
            let gt = g.tensors();
            for (((_, pv), (_, gv)), (_, vv)) in p.tensors_mut().into_iter().zip(gt).zip(v.tensors_mut()) {
                Self::update(pv, gv, vv, lr, mom, wd);
            }
        }
        Self::update(&mut model.fc.weight.data, &grads.fc.weight.data, &mut vel.fc.weight.data, lr, mom, wd);
        Self::update(&mut model.fc.bias, &grads.fc.bias, &mut vel.fc.bias, lr, mom, wd);
        for (set_idx, g) in grads.bn.iter().enumerate() {
            let Some(g) = g else { continue };
            let set = model.bank.set_by_index_mut(set_idx);
            let v = vel.bn[set_idx].get_or_insert_with(|| {
                g.iter()
                    .map(|(a, b)| (vec![T::zero(); a.len()], vec![T::zero(); b.len()]))
                    .collect()
            });
            for ((site, (dg, db)), (vg, vb)) in set.sites.iter_mut().zip(g).zip(v.iter_mut()) {
                Self::update(&mut site.gamma, dg, vg, lr, mom, T::zero());
                Self::update(&mut site.beta, db, vb, lr, mom, T::zero());
            }
        }
    }
}

/// Model plus optimizer state.
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, config: &TrainingConfig) -> Self {
        TrainState {
            model,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xa11ce),
        }
    }

    /// Apply a gradient step and fold the batch statistics into the running
    /// averages of the BN sets that took part.
    pub fn apply(&mut self, out: &StepOutput<T>, lr: f64) -> Result<()> {
        self.optimizer.step(&mut self.model, &out.grads, lr);
        for (res, stats) in &out.batch_stats {
            let set = self.model.bank.get_mut(*res)?;
            for (site, (mean, var)) in set.sites.iter_mut().zip(stats) {
                site.update_running(mean, var);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// One optimizer step on pre-built per-scale views.
    pub fn step_on(&mut self, batches: &[ScaleBatch<T>], weights: &LossWeights, lr: f64) -> Result<LossBreakdown> {
        let out = loss_and_grads(&self.model, batches, weights)?;
        self.apply(&out, lr)?;
        Ok(out.loss)
    }

    /// Independently crop every image to each training resolution, then
    /// take one optimizer step on the summed loss.
    pub fn train_step(
        &mut self,
        images: &[&Image],
        labels: &[usize],
        config: &TrainingConfig,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let batches = self.views(images, labels, &config.resolutions, &config.augment);
        self.step_on(&batches, &config.loss_weights(), lr)
    }

    pub fn views(
        &mut self,
        images: &[&Image],
        labels: &[usize],
        resolutions: &[u32],
        augment: &AugmentConfig,
    ) -> Vec<ScaleBatch<T>> {
        resolutions
            .iter()
            .map(|&s| ScaleBatch {
                resolution: s,
                input: to_input(&train_view(images, s as usize, &mut self.rng, augment)),
                labels: labels.to_vec(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_sd: f64,
    pub loss_total: f64,
}

pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,lr,loss_ce,loss_sd,loss_total\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.lr, r.loss_ce, r.loss_sd, r.loss_total
        )
        .unwrap();
    }
    out
}

pub struct FitResult {
    pub model: Model<f32>,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run the full epoch/batch loop. With `out_dir` set, writes
/// `train_log.csv`, `checkpoint.bin` and any periodic checkpoints there.
pub fn fit(train: &Dataset, run: &RunConfig, out_dir: Option<&Path>) -> Result<FitResult> {
    let mut run = run.clone();
    run.training.validate()?;
    let cfg = &run.training;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let model = run.build_model::<f32>()?;
    if model.backbone.num_classes != train.num_classes {
        return Err(Error::Config(format!(
            "backbone has {} classes, dataset has {}",
            model.backbone.num_classes, train.num_classes
        )));
    }
    let mut state = TrainState::new(model, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bd1_e995);
    let batch = cfg.batch_size.min(train.len());
    let steps_per_epoch = train.len() / batch;
    let total_steps = steps_per_epoch * cfg.epochs;
    let weights = cfg.loss_weights();
    let mut log = Vec::with_capacity(total_steps);
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(batch) {
            let images: Vec<&Image> = chunk.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let lr = cosine_lr(state.step, total_steps, cfg.lr0);
            let batches = state.views(&images, &labels, &cfg.resolutions, &cfg.augment);
            let loss = state.step_on(&batches, &weights, lr)?;
            log.push(LogRow {
                step: state.step,
                lr,
                loss_ce: loss.loss_ce,
                loss_sd: loss.loss_sd,
                loss_total: loss.loss_total,
            });
        }
        if let (Some(dir), Some(every)) = (out_dir, run.output.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.epochs {
                let path = dir.join(format!("checkpoint_epoch{:03}.bin", epoch + 1));
                save_checkpoint(&state.model, Some(&run), &path)?;
                checkpoints.push(path);
            }
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint.bin");
        save_checkpoint(&state.model, Some(&run), &path)?;
        checkpoints.push(path);
        let log_path = dir.join("train_log.csv");
        fs::write(&log_path, training_log_csv(&log)).map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(FitResult {
        model: state.model,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::ScaleEncoder;
    use crate::network::BackboneSpec;
    use rand::Rng;

    fn small_model(resolutions: &[u32]) -> Model<f64> {
        let spec = BackboneSpec::tiny_resnet(3, 4, &[4, 6], &[1, 1], 3);
        Model::new(spec, ScaleEncoder::new(0.1, 2).unwrap(), resolutions, 0, false, 5).unwrap()
    }

    fn random_batches(resolutions: &[u32], n: usize, seed: u64) -> Vec<ScaleBatch<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        resolutions
            .iter()
            .map(|&s| {
                let mut input = FeatureMap::zeros(3, n, s as usize, s as usize);
                input.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                ScaleBatch {
                    resolution: s,
                    input,
                    labels: labels.clone(),
                }
            })
            .collect()
    }

    #[test]
    fn ce_matches_scalar_oracle() {
        let logits = Matrix::<f64>::from_vec(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
        let labels = [1, 0];
        let mut expected = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &logits.data[r * 3..r * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected += -(row[l].exp() / z).ln();
        }
        expected /= 2.0;
        assert!((ce_loss(&logits, &labels).unwrap() - expected).abs() < 1e-8);
    }

    #[test]
    fn ce_limits() {
        let uniform = Matrix::<f64>::from_vec(1, 4, vec![0.7; 4]);
        assert!((ce_loss(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sharp = Matrix::<f64>::from_vec(1, 3, vec![0.0, 800.0, 0.0]);
        assert!(ce_loss(&sharp, &[1]).unwrap() < 1e-12);
        assert!(matches!(ce_loss(&uniform, &[4]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ce_gradient_matches_differences() {
        let logits = Matrix::<f64>::from_vec(2, 3, vec![0.3, -0.2, 1.1, 0.0, 0.4, -0.5]);
        let labels = [2, 1];
        let (_, grad) = ce_loss_grad(&logits, &labels).unwrap();
        for i in 0..6 {
            let mut p = logits.clone();
            p.data[i] += 1e-6;
            let mut m = logits.clone();
            m.data[i] -= 1e-6;
            let num = (ce_loss(&p, &labels).unwrap() - ce_loss(&m, &labels).unwrap()) / 2e-6;
            assert!((num - grad.data[i]).abs() < 1e-8);
        }
    }

    fn dist(p: &[f64]) -> PredictionDistribution {
        PredictionDistribution { probs: p.to_vec() }
    }

    #[test]
    fn sd_examples() {
        let same: Vec<(u32, Vec<PredictionDistribution>)> = [32, 24, 16]
            .iter()
            .map(|&s| (s, vec![dist(&[0.2, 0.5, 0.3]), dist(&[0.6, 0.1, 0.3])]))
            .collect();
        assert_eq!(sd_loss(&same).unwrap(), 0.0);
        assert_eq!(distillation_pairs(&[10, 20, 30, 40, 50]).len(), 10);
        let pairs = [(32u32, vec![dist(&[1.0, 0.0])]), (16, vec![dist(&[0.5, 0.5])])];
        assert!((sd_loss(&pairs).unwrap() - 2f64.ln()).abs() < 1e-12);
        let ragged = [(32u32, vec![dist(&[1.0, 0.0])]), (16, vec![])];
        assert!(sd_loss(&ragged).is_err());
    }

    #[test]
    fn sd_logit_form_agrees_with_probability_form() {
        let a = Matrix::<f64>::from_vec(2, 3, vec![0.1, 0.9, -0.4, 2.0, 0.0, 0.3]);
        let b = Matrix::<f64>::from_vec(2, 3, vec![-0.3, 0.2, 0.5, 0.0, 1.0, 1.0]);
        let c = Matrix::<f64>::from_vec(2, 3, vec![1.0, 1.0, 0.0, -2.0, 0.5, 0.1]);
        let (loss, pairs, _) = sd_loss_grad(&[(16, &c), (32, &a), (24, &b)], 1.0).unwrap();
        assert_eq!(pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(32, 24), (32, 16), (24, 16)]);
        let probs = |m: &Matrix<f64>| crate::network::predict_batch(m);
        let reference = sd_loss(&[(32, probs(&a)), (24, probs(&b)), (16, probs(&c))]).unwrap();
        assert!((loss - reference).abs() < 1e-12);
    }

    #[test]
    fn sd_gradient_flows_only_into_students() {
        let teacher = Matrix::<f64>::from_vec(2, 3, vec![0.1, 0.9, -0.4, 2.0, 0.0, 0.3]);
        let student = Matrix::<f64>::from_vec(2, 3, vec![-0.3, 0.2, 0.5, 0.0, 1.0, 1.0]);
        let (_, _, grads) = sd_loss_grad(&[(32, &teacher), (16, &student)], 1.0).unwrap();
        assert!(grads[0].data.iter().all(|&g| g == 0.0));
        for i in 0..6 {
            let f = |d: f64| {
                let mut s = student.clone();
                s.data[i] += d;
                sd_loss_grad(&[(32, &teacher), (16, &s)], 1.0).unwrap().0
            };
            let num = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((num - grads[1].data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.4), 0.4);
        assert!(cosine_lr(100, 100, 0.4).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.4) - 0.2).abs() < 1e-15);
        assert!(cosine_lr(30, 100, 0.4) > cosine_lr(31, 100, 0.4));
    }

    #[test]
    fn loss_composition() {
        let model = small_model(&[12, 8]);
        let batches = random_batches(&[12, 8], 4, 1);
        let w = LossWeights {
            alpha: 0.7,
            beta: 1.3,
            ..LossWeights::default()
        };
        let l = loss_and_grads(&model, &batches, &w).unwrap().loss;
        assert_eq!(l.loss_ce, l.ce_per_scale.iter().map(|c| c.1).sum::<f64>());
        assert_eq!(l.loss_sd, l.kl_per_pair.iter().map(|c| c.2).sum::<f64>());
        assert_eq!(l.loss_total, 0.7 * l.loss_ce + 1.3 * l.loss_sd);
        assert!(l.loss_ce >= 0.0 && l.loss_sd >= 0.0);

        let off = LossWeights {
            distill: false,
            ..LossWeights::default()
        };
        let l = loss_and_grads(&model, &batches, &off).unwrap().loss;
        assert_eq!(l.loss_total, l.loss_ce);

        let single = loss_and_grads(&model, &batches[..1], &LossWeights::default()).unwrap().loss;
        assert_eq!(single.loss_sd, 0.0);
        assert!(single.kl_per_pair.is_empty());
    }

    #[test]
    fn scale_order_does_not_matter() {
        let model = small_model(&[12, 10, 8]);
        let batches = random_batches(&[12, 10, 8], 4, 2);
        let reversed: Vec<_> = batches.iter().rev().cloned().collect();
        let a = loss_and_grads(&model, &batches, &LossWeights::default()).unwrap();
        let b = loss_and_grads(&model, &reversed, &LossWeights::default()).unwrap();
        assert!((a.loss.loss_ce - b.loss.loss_ce).abs() < 1e-12);
        assert!((a.loss.loss_sd - b.loss.loss_sd).abs() < 1e-12);
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let model = small_model(&[12, 8]);
        let mut batches = random_batches(&[12, 8], 4, 3);
        batches[1] = random_batches(&[8], 3, 3).remove(0);
        assert!(loss_and_grads(&model, &batches, &LossWeights::default()).is_err());
    }

    #[test]
    fn small_step_descends() {
        let model = small_model(&[12, 8]);
        let batches = random_batches(&[12, 8], 8, 4);
        let w = LossWeights::default();
        let before = loss_and_grads(&model, &batches, &w).unwrap();
        let mut state = TrainState::new(model, &TrainingConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainingConfig::default()
        });
        state.apply(&before, 1e-3).unwrap();
        let after = loss_and_grads(&state.model, &batches, &w).unwrap();
        assert!(after.loss.loss_total < before.loss.loss_total);
    }

    #[test]
    fn every_scale_feeds_the_shared_parameters() {
        let res = [12, 10, 8];
        let model = small_model(&res);
        let batches = random_batches(&res, 4, 5);
        for b in &batches {
            let out = loss_and_grads(&model, std::slice::from_ref(b), &LossWeights::default()).unwrap();
            assert!(out.grads.meta_norm_sq() > 0.0);
        }
        let mut state = TrainState::new(model.clone(), &TrainingConfig::default());
        state.step_on(&batches, &LossWeights::default(), 0.05).unwrap();
        for (before, after) in model.bank.sets().iter().zip(state.model.bank.sets()) {
            assert_ne!(before, after);
        }
    }

    #[test]
    fn restricted_step_isolates_other_bn_sets() {
        let res = [12, 10, 8];
        let model = small_model(&res);
        let batches = random_batches(&res, 4, 6);
        for (i, b) in batches.iter().enumerate() {
            let mut state = TrainState::new(model.clone(), &TrainingConfig::default());
            state.step_on(std::slice::from_ref(b), &LossWeights::default(), 0.1).unwrap();
            for (j, (before, after)) in model.bank.sets().iter().zip(state.model.bank.sets()).enumerate() {
                assert_eq!(i == j, before != after, "set {j} after step on scale {i}");
            }
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let run = || {
            let mut config = TrainingConfig {
                resolutions: vec![12, 8],
                ..TrainingConfig::default()
            };
            config.validate().unwrap();
            let model = small_model(&config.resolutions);
            let mut state = TrainState::new(model, &config);
            let mut img = Image::new(3, 14, 14);
            img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f32 / 7.0);
            let images = vec![&img; 4];
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(state.train_step(&images, &[0, 1, 2, 0], &config, 0.05).unwrap().loss_total);
            }
            (losses, state.model)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_csv_header() {
        let csv = training_log_csv(&[LogRow {
            step: 1,
            lr: 0.1,
            loss_ce: 2.0,
            loss_sd: 0.5,
            loss_total: 2.5,
        }]);
        assert_eq!(csv, "step,lr,loss_ce,loss_sd,loss_total\n1,0.1,2,0.5,2.5\n");
    }
}
