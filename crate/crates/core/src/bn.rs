//! Privatized batch normalization: one full set of BN parameters and running
//! statistics per training resolution, plus exact recalibration and
//! cross-resolution interpolation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::FeatureMap;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnSite<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BnSite<T> {
    pub fn new(channels: usize) -> Self {
        BnSite {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Blend the running statistics towards a batch's statistics.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m: T = cast(self.momentum);
        let keep = T::one() - m;
        for c in 0..self.channels() {
            self.mean[c] = keep * self.mean[c] + m * batch_mean[c];
            self.var[c] = keep * self.var[c] + m * batch_var[c];
        }
    }
}

/// Saved tensors for the train-mode backward pass of one site.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: FeatureMap<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Per-channel mean and population variance over `N * H * W`.
pub fn channel_moments<T: Scalar>(x: &FeatureMap<T>) -> (Vec<T>, Vec<T>) {
    let m = x.channel_len() as f64;
    let mut means = Vec::with_capacity(x.channels);
    let mut vars = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let chan = x.channel(c);
        let mean = chan.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let var = chan.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
        means.push(cast(mean));
        vars.push(cast(var));
    }
    (means, vars)
}

/// Normalize in place with batch statistics; returns the cache for backward.
pub(crate) fn bn_train_forward<T: Scalar>(site: &BnSite<T>, x: &mut FeatureMap<T>) -> BnCache<T> {
    assert_eq!(x.channels, site.channels(), "bn channel count");
    let (batch_mean, batch_var) = channel_moments(x);
    let mut inv_std = Vec::with_capacity(x.channels);
    let mut xhat = x.clone();
    for c in 0..x.channels {
        let istd = T::one() / (batch_var[c] + cast(site.eps)).sqrt();
        inv_std.push(istd);
        let (g, b, mu) = (site.gamma[c], site.beta[c], batch_mean[c]);
        for (h, y) in xhat.channel_mut(c).iter_mut().zip(x.channel_mut(c)) {
            *h = (*h - mu) * istd;
            *y = g * *h + b;
        }
    }
    BnCache {
        xhat,
        inv_std,
        batch_mean,
        batch_var,
    }
}

pub(crate) fn bn_eval_forward<T: Scalar>(site: &BnSite<T>, x: &mut FeatureMap<T>) {
    assert_eq!(x.channels, site.channels(), "bn channel count");
    for c in 0..x.channels {
        let istd = T::one() / (site.var[c] + cast(site.eps)).sqrt();
        let scale = site.gamma[c] * istd;
        let shift = site.beta[c] - site.mean[c] * scale;
        for v in x.channel_mut(c) {
            *v = *v * scale + shift;
        }
    }
}

/// Train-mode backward; turns `grad` (w.r.t. the output) into the gradient
/// w.r.t. the input in place and returns `(d_gamma, d_beta)`.
pub(crate) fn bn_train_backward<T: Scalar>(
    site: &BnSite<T>,
    cache: &BnCache<T>,
    grad: &mut FeatureMap<T>,
) -> (Vec<T>, Vec<T>) {
    let m: T = cast(grad.channel_len() as f64);
    let mut d_gamma = Vec::with_capacity(grad.channels);
    let mut d_beta = Vec::with_capacity(grad.channels);
    for c in 0..grad.channels {
        let xh = cache.xhat.channel(c);
        let dy = grad.channel_mut(c);
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for (&g, &h) in dy.iter().zip(xh) {
            sum_dy += g;
            sum_dy_xh += g * h;
        }
        let k = site.gamma[c] * cache.inv_std[c] / m;
        for (g, &h) in dy.iter_mut().zip(xh) {
            *g = k * (m * *g - sum_dy - h * sum_dy_xh);
        }
        d_gamma.push(sum_dy_xh);
        d_beta.push(sum_dy);
    }
    (d_gamma, d_beta)
}

/// Apply one site. Train mode normalizes with batch statistics and folds them
/// into the running averages; eval mode uses the stored statistics.
pub fn bn_apply<T: Scalar>(site: &mut BnSite<T>, x: &FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
    let mut y = x.clone();
    match mode {
        Mode::Train => {
            let cache = bn_train_forward(site, &mut y);
            site.update_running(&cache.batch_mean, &cache.batch_var);
        }
        Mode::Eval => bn_eval_forward(site, &mut y),
    }
    y
}

/// BN parameters and statistics for every site of one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BnSet<T> {
    pub sites: Vec<BnSite<T>>,
}

impl<T: Scalar> BnSet<T> {
    pub fn new(channels: &[usize]) -> Self {
        BnSet {
            sites: channels.iter().map(|&c| BnSite::new(c)).collect(),
        }
    }

    pub fn structurally_equal(&self, other: &Self) -> bool {
        self.sites.len() == other.sites.len()
            && self
                .sites
                .iter()
                .zip(&other.sites)
                .all(|(a, b)| a.channels() == b.channels())
    }
}

/// Per-resolution BN sets. With `shared` set, every resolution maps to one set.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBank<T> {
    resolutions: Vec<u32>,
    shared: bool,
    sets: Vec<BnSet<T>>,
}

impl<T: Scalar> BnBank<T> {
    pub fn new(resolutions: &[u32], channels: &[usize], shared: bool) -> Result<Self> {
        let resolutions = sorted_resolutions(resolutions)?;
        let count = if shared { 1 } else { resolutions.len() };
        Ok(BnBank {
            resolutions,
            shared,
            sets: vec![BnSet::new(channels); count],
        })
    }

    pub fn from_sets(resolutions: &[u32], shared: bool, sets: Vec<BnSet<T>>) -> Result<Self> {
        let resolutions = sorted_resolutions(resolutions)?;
        let expected = if shared { 1 } else { resolutions.len() };
        if sets.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} BN sets, found {}",
                sets.len()
            )));
        }
        if sets.iter().any(|s| !s.structurally_equal(&sets[0])) {
            return Err(Error::Config("BN sets differ in structure".into()));
        }
        Ok(BnBank {
            resolutions,
            shared,
            sets,
        })
    }

    /// Training resolutions, largest first.
    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn sets(&self) -> &[BnSet<T>] {
        &self.sets
    }

    pub fn set_index(&self, resolution: u32) -> Result<usize> {
        let pos = self
            .resolutions
            .iter()
            .position(|&r| r == resolution)
            .ok_or(Error::UnknownKey(resolution))?;
        Ok(if self.shared { 0 } else { pos })
    }

    pub fn get(&self, resolution: u32) -> Result<&BnSet<T>> {
        Ok(&self.sets[self.set_index(resolution)?])
    }

    pub fn get_mut(&mut self, resolution: u32) -> Result<&mut BnSet<T>> {
        let i = self.set_index(resolution)?;
        Ok(&mut self.sets[i])
    }

    pub fn set_by_index_mut(&mut self, index: usize) -> &mut BnSet<T> {
        &mut self.sets[index]
    }

    /// BN set for a resolution between two training resolutions, each of
    /// `gamma`, `beta`, `mean` and `var` blended linearly and independently.
    pub fn interpolate(&self, t: u32) -> Result<BnSet<T>> {
        let lo = *self.resolutions.last().expect("nonempty");
        let hi = self.resolutions[0];
        if t < lo || t > hi {
            return Err(Error::OutOfRange(t, lo, hi));
        }
        if self.resolutions.contains(&t) {
            return Ok(self.get(t)?.clone());
        }
        let floor = *self.resolutions.iter().filter(|&&s| s < t).max().expect("t > lo");
        let ceil = *self.resolutions.iter().filter(|&&s| s > t).min().expect("t < hi");
        let w = (t - floor) as f64 / (ceil - floor) as f64;
        Ok(blend_sets(self.get(floor)?, self.get(ceil)?, w))
    }

    /// Like [`interpolate`](Self::interpolate) but clamps resolutions outside
    /// the training range to the nearest endpoint's set.
    pub fn interpolate_clamped(&self, t: u32) -> BnSet<T> {
        let lo = *self.resolutions.last().expect("nonempty");
        let hi = self.resolutions[0];
        let t = t.clamp(lo, hi);
        self.interpolate(t).expect("clamped into range")
    }
}

/// `w * upper + (1 - w) * lower`, elementwise for every tensor of every site.
pub fn blend_sets<T: Scalar>(lower: &BnSet<T>, upper: &BnSet<T>, w: f64) -> BnSet<T> {
    let wt: T = cast(w);
    let wl = T::one() - wt;
    let mix = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&l, &u)| wt * u + wl * l).collect() };
    BnSet {
        sites: lower
            .sites
            .iter()
            .zip(&upper.sites)
            .map(|(l, u)| BnSite {
                gamma: mix(&l.gamma, &u.gamma),
                beta: mix(&l.beta, &u.beta),
                mean: mix(&l.mean, &u.mean),
                var: mix(&l.var, &u.var),
                eps: l.eps,
                momentum: l.momentum,
            })
            .collect(),
    }
}

pub(crate) fn sorted_resolutions(resolutions: &[u32]) -> Result<Vec<u32>> {
    if resolutions.is_empty() {
        return Err(Error::Config("at least one training resolution is required".into()));
    }
    let mut sorted = resolutions.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    if sorted.contains(&0) {
        return Err(Error::Config("training resolutions must be positive".into()));
    }
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("training resolutions must be distinct".into()));
    }
    Ok(sorted)
}

/// Streaming per-channel sums for exact dataset-wide statistics.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    count: u64,
    shift: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(channels: usize) -> Self {
        MomentAccumulator {
            count: 0,
            shift: Vec::new(),
            sum: vec![0.0; channels],
            sum_sq: vec![0.0; channels],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push<T: Scalar>(&mut self, x: &FeatureMap<T>) {
        assert_eq!(x.channels, self.sum.len(), "accumulator channel count");
        if self.shift.is_empty() {
            // Shifting by a sample value keeps the sums well conditioned.
            self.shift = (0..x.channels)
                .map(|c| x.channel(c).first().map_or(0.0, |v| v.as_f64()))
                .collect();
        }
        for c in 0..x.channels {
            let k = self.shift[c];
            let (mut s, mut sq) = (0.0, 0.0);
            for v in x.channel(c) {
                let d = v.as_f64() - k;
                s += d;
                sq += d * d;
            }
            self.sum[c] += s;
            self.sum_sq[c] += sq;
        }
        self.count += x.channel_len() as u64;
    }

    /// `(mean, population variance)` per channel.
    pub fn finish(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count as f64;
        let mut means = Vec::with_capacity(self.sum.len());
        let mut vars = Vec::with_capacity(self.sum.len());
        for c in 0..self.sum.len() {
            let m = self.sum[c] / n;
            means.push(m + self.shift.get(c).copied().unwrap_or(0.0));
            vars.push((self.sum_sq[c] / n - m * m).max(0.0));
        }
        (means, vars)
    }
}

/// Diagnostic dump: `scale,site_index,param,channel_mean` with one row per
/// (set, site, tensor), the tensor summarized by its channel average.
pub fn bn_dump_csv<T: Scalar>(entries: &BTreeMap<u32, &BnSet<T>>) -> String {
    let mut out = String::from("scale,site_index,param,channel_mean\n");
    for (scale, set) in entries.iter().rev() {
        for (i, site) in set.sites.iter().enumerate() {
            for (name, v) in [
                ("gamma", &site.gamma),
                ("beta", &site.beta),
                ("mu", &site.mean),
                ("sigma2", &site.var),
            ] {
                let mean = v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64;
                writeln!(out, "{scale},{i},{name},{mean}").unwrap();
            }
        }
    }
    out
}
