//! Inference at arbitrary test resolutions: ideal (kernels at the test
//! resolution, BN statistics recalibrated on data), proxy (everything from
//! the nearest training resolution) and data-free (kernels at the test
//! resolution, BN interpolated between the flanking training resolutions).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bn::{BnSet, MomentAccumulator};
use crate::checkpoint::model_hash;
use crate::data::{eval_view, to_input, Image};
use crate::error::{Error, Result};
use crate::meta::ScaleEncoding;
use crate::model::Model;
use crate::network::{predict_batch, MainNetwork, PredictionDistribution};
use crate::scalar::{cast, Scalar};
use crate::tensor::FeatureMap;

pub const DEFAULT_EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Ideal,
    Proxy,
    #[serde(rename = "datafree")]
    DataFree,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Ideal => "ideal",
            InferenceMode::Proxy => "proxy",
            InferenceMode::DataFree => "datafree",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(InferenceMode::Ideal),
            "proxy" => Ok(InferenceMode::Proxy),
            "datafree" => Ok(InferenceMode::DataFree),
            other => Err(Error::InvalidArgument(format!(
                "unknown inference mode {other:?} (expected ideal, proxy or datafree)"
            ))),
        }
    }
}

/// The training resolution closest to `t`; ties go to the smaller one.
pub fn nearest_resolution(t: u32, resolutions: &[u32]) -> Result<u32> {
    resolutions
        .iter()
        .copied()
        .min_by_key(|&s| (s.abs_diff(t), s))
        .ok_or_else(|| Error::InvalidArgument("empty resolution set".into()))
}

/// The largest training resolution below `t` and the smallest above it.
pub fn neighbors(t: u32, resolutions: &[u32]) -> Result<(u32, u32)> {
    let lo = resolutions.iter().copied().min().unwrap_or(0);
    let hi = resolutions.iter().copied().max().unwrap_or(0);
    let below = resolutions.iter().copied().filter(|&s| s < t).max();
    let above = resolutions.iter().copied().filter(|&s| s > t).min();
    match (below, above) {
        (Some(b), Some(a)) if !resolutions.contains(&t) => Ok((b, a)),
        _ => Err(Error::OutOfRange(t, lo, hi)),
    }
}

/// Calibrated BN sets keyed by model content hash and test resolution.
/// One cache should be used with one calibration source.
#[derive(Clone, Debug, Default)]
pub struct CalibrationCache<T> {
    entries: HashMap<(String, u32), BnSet<T>>,
}

impl<T: Scalar> CalibrationCache<T> {
    pub fn new() -> Self {
        CalibrationCache { entries: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, hash: &str, t: u32) -> Option<&BnSet<T>> {
        self.entries.get(&(hash.to_string(), t))
    }
}

/// Preprocess images with the evaluation protocol at resolution `t` and
/// pack them into input batches.
pub fn eval_batches<T: Scalar>(images: &[Image], t: u32, batch_size: usize) -> Vec<FeatureMap<T>> {
    images
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let views: Vec<Image> = chunk.iter().map(|img| eval_view(img, t as usize)).collect();
            to_input(&views)
        })
        .collect()
}

/// Replace every site's running statistics with exact population statistics
/// of its input over `batches`, evaluated with `kernels` at `eps`.
///
/// Sites are calibrated in order; when site `l` is measured, sites before it
/// already normalize with their calibrated statistics, so the result is the
/// statistics an eval-mode pass actually sees. The outcome does not depend
/// on how the data is split into batches.
pub fn calibrate<T: Scalar>(
    model: &Model<T>,
    eps: ScaleEncoding,
    base: &BnSet<T>,
    batches: &[FeatureMap<T>],
) -> Result<BnSet<T>> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("calibration data is empty".into()));
    }
    let mut net = model.parameterize_with(eps, base.clone())?;
    for site in 0..base.sites.len() {
        let mut acc = MomentAccumulator::new(base.sites[site].channels());
        for x in batches {
            net.forward_observed(x, &mut |s, act| {
                if s == site {
                    acc.push(act);
                    return false;
                }
                true
            })?;
        }
        let (mean, var) = acc.finish();
        let target = &mut net.bn.to_mut().sites[site];
        target.mean = mean.into_iter().map(cast).collect();
        target.var = var.into_iter().map(cast).collect();
    }
    Ok(net.bn.into_owned())
}

/// Main network for proxy inference at `t`: kernels and BN from `S(t)`.
pub fn proxy_network<T: Scalar>(model: &Model<T>, t: u32) -> Result<MainNetwork<'_, T>> {
    let s = nearest_resolution(t, model.resolutions())?;
    model.parameterize(model.encode(s)?, s)
}

/// Main network for data-free inference at `t`: kernels at `t`, BN blended
/// between the neighbouring training resolutions (clamped outside the range).
pub fn datafree_network<T: Scalar>(model: &Model<T>, t: u32) -> Result<MainNetwork<'_, T>> {
    let eps = model.encode(t)?;
    if model.resolutions().contains(&t) {
        return model.parameterize(eps, t);
    }
    model.parameterize_with(eps, model.bank.interpolate_clamped(t))
}

/// Main network for ideal inference at `t`: kernels at `t`, scale and shift
/// from `S(t)`, statistics recalibrated on `calibration` viewed at `t`.
/// Members of the training set need no calibration.
pub fn ideal_network<'m, T: Scalar>(
    model: &'m Model<T>,
    t: u32,
    calibration: Option<&[Image]>,
    cache: &mut CalibrationCache<T>,
) -> Result<MainNetwork<'m, T>> {
    let eps = model.encode(t)?;
    if model.resolutions().contains(&t) {
        return model.parameterize(eps, t);
    }
    let images = calibration.ok_or_else(|| {
        Error::Config(format!(
            "ideal inference at {t} (not a training resolution) needs calibration data"
        ))
    })?;
    let key = (model_hash(model), t);
    if let Some(set) = cache.entries.get(&key) {
        return model.parameterize_with(eps, set.clone());
    }
    let s = nearest_resolution(t, model.resolutions())?;
    let base = model.bank.get(s)?;
    let batches = eval_batches(images, t, DEFAULT_EVAL_BATCH);
    let set = calibrate(model, eps, base, &batches)?;
    cache.entries.insert(key, set.clone());
    model.parameterize_with(eps, set)
}

/// Network for any mode. `calibration` is only consulted by ideal mode.
pub fn network_for<'m, T: Scalar>(
    model: &'m Model<T>,
    t: u32,
    mode: InferenceMode,
    calibration: Option<&[Image]>,
    cache: &mut CalibrationCache<T>,
) -> Result<MainNetwork<'m, T>> {
    match mode {
        InferenceMode::Ideal => ideal_network(model, t, calibration, cache),
        InferenceMode::Proxy => proxy_network(model, t),
        InferenceMode::DataFree => datafree_network(model, t),
    }
}

fn input_resolution<T: Scalar>(input: &FeatureMap<T>) -> Result<u32> {
    if input.height != input.width {
        return Err(Error::InvalidInput(format!(
            "input must be square, got {}x{}",
            input.height, input.width
        )));
    }
    Ok(input.height as u32)
}

fn eval_distributions<T: Scalar>(net: &MainNetwork<'_, T>, input: &FeatureMap<T>) -> Result<Vec<PredictionDistribution>> {
    Ok(predict_batch(&net.forward(input, crate::bn::Mode::Eval)?))
}

/// Proxy inference on a batch already at its test resolution.
pub fn proxy_infer<T: Scalar>(model: &Model<T>, input: &FeatureMap<T>) -> Result<Vec<PredictionDistribution>> {
    let t = input_resolution(input)?;
    eval_distributions(&proxy_network(model, t)?, input)
}

/// Data-free inference on a batch already at its test resolution.
pub fn datafree_infer<T: Scalar>(model: &Model<T>, input: &FeatureMap<T>) -> Result<Vec<PredictionDistribution>> {
    let t = input_resolution(input)?;
    eval_distributions(&datafree_network(model, t)?, input)
}

/// Ideal inference on a batch already at its test resolution.
pub fn ideal_infer<T: Scalar>(
    model: &Model<T>,
    input: &FeatureMap<T>,
    calibration: Option<&[Image]>,
    cache: &mut CalibrationCache<T>,
) -> Result<Vec<PredictionDistribution>> {
    let t = input_resolution(input)?;
    eval_distributions(&ideal_network(model, t, calibration, cache)?, input)
}

/// Top-1 class for every sample in `batches`.
pub fn predict_top1<T: Scalar>(net: &MainNetwork<'_, T>, batches: &[FeatureMap<T>]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for x in batches {
        out.extend(eval_distributions(net, x)?.iter().map(|p| p.top1()));
    }
    Ok(out)
}

/// Top-1 accuracy in percent.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}
