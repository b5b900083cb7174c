//! Datasets, multi-resolution training views and the center-crop eval protocol.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::FeatureMap;

/// Ratio between the eval crop and the resized shorter side.
pub const EVAL_CROP_RATIO: f64 = 0.875;

/// Per-channel normalization applied when images enter a network.
const INPUT_MEAN: f32 = 0.5;
const INPUT_STD: f32 = 0.25;

/// A `[C][H][W]` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.at(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Integer crop.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = Image::new(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.at(c, y0 + y, x0 + x));
                }
            }
        }
        out
    }

    /// Bilinear resampling of the box `(x0, y0, w, h)` to `out_w x out_h`.
    ///
    /// When shrinking, the triangle filter widens with the scale factor so
    /// every source pixel contributes (the usual antialiased bilinear).
    /// Sampling a box at its native size is the identity.
    pub fn resample(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> Image {
        let wx = filter_weights(x0, w, out_w, self.width);
        let wy = filter_weights(y0, h, out_h, self.height);
        let mut tmp = Image::new(self.channels, self.height, out_w);
        for c in 0..self.channels {
            for y in 0..self.height {
                for (ox, (start, ws)) in wx.iter().enumerate() {
                    let mut acc = 0.0f32;
                    for (k, &wt) in ws.iter().enumerate() {
                        acc += wt * self.at(c, y, start + k);
                    }
                    tmp.set(c, y, ox, acc);
                }
            }
        }
        let mut out = Image::new(self.channels, out_h, out_w);
        for c in 0..self.channels {
            for (oy, (start, ws)) in wy.iter().enumerate() {
                for x in 0..out_w {
                    let mut acc = 0.0f32;
                    for (k, &wt) in ws.iter().enumerate() {
                        acc += wt * tmp.at(c, start + k, x);
                    }
                    out.set(c, oy, x, acc);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.resample(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }
}

/// Triangle-filter taps for each output sample along one axis.
fn filter_weights(origin: f64, span: f64, out_len: usize, in_len: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = span / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|i| {
            let center = origin + (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(in_len);
            let mut taps: Vec<f64> = (lo..hi)
                .map(|j| (1.0 - ((j as f64 + 0.5 - center) / support).abs()).max(0.0))
                .collect();
            let total: f64 = taps.iter().sum();
            if total > 0.0 {
                for t in taps.iter_mut() {
                    *t /= total;
                }
            } else {
                // Degenerate window: nearest pixel.
                let j = (center.floor().max(0.0) as usize).min(in_len - 1);
                return (j, vec![1.0]);
            }
            // Trim leading and trailing zero taps.
            let first = taps.iter().position(|&t| t > 0.0).unwrap_or(0);
            let last = taps.iter().rposition(|&t| t > 0.0).unwrap_or(0);
            (lo + first, taps[first..=last].iter().map(|&t| t as f32).collect())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
}

/// Labeled images plus where they came from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub split: Split,
    pub source: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(self) -> Result<Self> {
        if self.images.is_empty() {
            return Err(Error::InvalidArgument(format!("dataset {} is empty", self.source)));
        }
        if self.images.len() != self.labels.len() {
            return Err(Error::InvalidArgument("image/label count mismatch".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(self)
    }

    /// Write `root/<class_name>/<index>.png`.
    pub fn export_image_folder(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let path = root.join(&self.class_names[label]).join(format!("{i:06}.png"));
            let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
            for (x, y, px) in buf.enumerate_pixels_mut() {
                for c in 0..3 {
                    let src = img.at(c.min(img.channels - 1), y as usize, x as usize);
                    px[c] = (src.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            buf.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    /// Read `root/<class_name>/<file>` with PNG and JPEG files; classes are
    /// ordered by directory name.
    pub fn load_image_folder(root: &Path, split: Split) -> Result<Dataset> {
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut class_names = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                        .unwrap_or(false)
                })
                .collect();
            files.sort();
            for file in files {
                let decoded = image::open(&file).map_err(|source| Error::Image {
                    path: file.clone(),
                    source,
                })?;
                let rgb = decoded.to_rgb8();
                let mut img = Image::new(3, rgb.height() as usize, rgb.width() as usize);
                for (x, y, px) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
                    }
                }
                images.push(img);
                labels.push(label);
            }
        }
        Dataset {
            images,
            labels,
            num_classes: class_names.len(),
            class_names,
            split,
            source: format!("image_folder:{}", root.display()),
        }
        .validate()
    }
}

/// Random-resized-crop and flip parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub min_area: f64,
    pub max_area: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_area: 0.35,
            max_area: 1.0,
            min_aspect: 3.0 / 4.0,
            max_aspect: 4.0 / 3.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No cropping and no flipping.
    pub fn identity() -> Self {
        AugmentConfig {
            min_area: 1.0,
            max_area: 1.0,
            min_aspect: 1.0,
            max_aspect: 1.0,
            flip_prob: 0.0,
        }
    }
}

/// Crop box and flip decision for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub flip: bool,
}

pub fn sample_crop<R: Rng>(rng: &mut R, width: usize, height: usize, aug: &AugmentConfig) -> CropParams {
    let area = (width * height) as f64;
    let (log_lo, log_hi) = (aug.min_aspect.ln(), aug.max_aspect.ln());
    let mut chosen = None;
    for _ in 0..10 {
        let target = area * uniform(rng, aug.min_area, aug.max_area);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            chosen = Some((x0, y0, w, h));
            break;
        }
    }
    let (x0, y0, w, h) = chosen.unwrap_or_else(|| {
        let s = width.min(height);
        ((width - s) / 2, (height - s) / 2, s, s)
    });
    let flip = aug.flip_prob > 0.0 && rng.random::<f64>() < aug.flip_prob;
    CropParams {
        x0,
        y0,
        width: w,
        height: h,
        flip,
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn apply_crop(image: &Image, crop: &CropParams, size: usize) -> Image {
    let out = image.resample(
        crop.x0 as f64,
        crop.y0 as f64,
        crop.width as f64,
        crop.height as f64,
        size,
        size,
    );
    if crop.flip {
        out.flip_horizontal()
    } else {
        out
    }
}

/// Random-resized-crop to `size x size` plus horizontal flip, per sample.
pub fn train_view<R: Rng>(images: &[&Image], size: usize, rng: &mut R, aug: &AugmentConfig) -> Vec<Image> {
    images
        .iter()
        .map(|img| {
            let crop = sample_crop(rng, img.width, img.height, aug);
            apply_crop(img, &crop, size)
        })
        .collect()
}

/// Resize the shorter side to `round(size / 0.875)` and take the central
/// `size x size` crop.
pub fn eval_view(image: &Image, size: usize) -> Image {
    let short = ((size as f64) / EVAL_CROP_RATIO).round() as usize;
    let (w, h) = if image.width <= image.height {
        let h = (image.height as f64 * short as f64 / image.width as f64).round() as usize;
        (short, h.max(short))
    } else {
        let w = (image.width as f64 * short as f64 / image.height as f64).round() as usize;
        (w.max(short), short)
    };
    let resized = image.resize(w, h);
    resized.crop((w - size) / 2, (h - size) / 2, size, size)
}

/// Pack images into a normalized network input.
pub fn to_input<T: Scalar>(images: &[Image]) -> FeatureMap<T> {
    let first = &images[0];
    let converted: Vec<Vec<T>> = images
        .iter()
        .map(|img| {
            assert_eq!(
                (img.channels, img.height, img.width),
                (first.channels, first.height, first.width),
                "batch images must share one size"
            );
            img.data
                .iter()
                .map(|&v| cast(((v - INPUT_MEAN) / INPUT_STD) as f64))
                .collect()
        })
        .collect();
    let refs: Vec<&[T]> = converted.iter().map(|v| v.as_slice()).collect();
    FeatureMap::from_images(&refs, first.channels, first.height, first.width)
}

/// Oriented sinusoidal gratings: class `c` of `K` has stripes at angle
/// `pi * c / K` with a fixed number of cycles across the image, so the label
/// survives any resize that keeps the stripes above the Nyquist limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub base_resolution: usize,
    #[serde(default = "default_cycles")]
    pub cycles: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_cycles() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, base_resolution: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            samples_per_class,
            base_resolution,
            cycles: default_cycles(),
            noise: default_noise(),
            seed,
        }
    }

    fn direction(&self, class: usize) -> (f64, f64) {
        let theta = PI * class as f64 / self.num_classes as f64;
        (theta.cos(), theta.sin())
    }

    /// Recover the class of an image at any resolution: the class whose
    /// grating has the largest Fourier magnitude.
    pub fn label_rule(&self, image: &Image) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for class in 0..self.num_classes {
            let (dx, dy) = self.direction(class);
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..image.height {
                for x in 0..image.width {
                    let u = (x as f64 + 0.5) / image.width as f64 - 0.5;
                    let v = (y as f64 + 0.5) / image.height as f64 - 0.5;
                    let phase = 2.0 * PI * self.cycles * (u * dx + v * dy);
                    let g = (0..image.channels).map(|c| image.at(c, y, x) as f64).sum::<f64>();
                    re += g * phase.cos();
                    im += g * phase.sin();
                }
            }
            let mag = re * re + im * im;
            if mag > best.1 {
                best = (class, mag);
            }
        }
        best.0
    }
}

pub fn make_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 || spec.base_resolution == 0 {
        return Err(Error::InvalidArgument("synthetic spec must be nonempty".into()));
    }
    let split_salt = match split {
        Split::Train => 0,
        Split::Val => 0x9e37_79b9,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ split_salt);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let size = spec.base_resolution;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..spec.samples_per_class * spec.num_classes {
        let class = i % spec.num_classes;
        let (dx, dy) = spec.direction(class);
        let phase0 = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.25..0.45);
        let tint: [f64; 3] = [
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
        ];
        let mut img = Image::new(3, size, size);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 - 0.5;
                let v = (y as f64 + 0.5) / size as f64 - 0.5;
                let s = (2.0 * PI * spec.cycles * (u * dx + v * dy) + phase0).cos();
                for (c, t) in tint.iter().enumerate() {
                    let val = 0.5 + contrast * t * s + noise.sample(&mut rng);
                    img.set(c, y, x, val.clamp(0.0, 1.0) as f32);
                }
            }
        }
        images.push(img);
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        num_classes: spec.num_classes,
        class_names: (0..spec.num_classes).map(|c| format!("grating{c:02}")).collect(),
        split,
        source: "synthetic".into(),
    }
    .validate()
}

/// Classes of the builtin desk dataset: five shapes, each either solid or
/// filled with fine stripes.
pub const DESK_CLASSES: [&str; 10] = [
    "disk_solid",
    "disk_striped",
    "square_solid",
    "square_striped",
    "triangle_solid",
    "triangle_striped",
    "ring_solid",
    "ring_striped",
    "cross_solid",
    "cross_striped",
];

pub const DESK_RESOLUTION: usize = 32;

fn inside_shape(shape: usize, x: f64, y: f64, r: f64) -> bool {
    match shape {
        0 => x * x + y * y < r * r,
        1 => x.abs().max(y.abs()) < 0.8 * r,
        2 => {
            // Equilateral triangle with circumradius r, apex up.
            let k = 3f64.sqrt();
            y < 0.5 * r && k * x - y < r && -k * x - y < r
        }
        3 => {
            let d = (x * x + y * y).sqrt();
            d < r && d > 0.55 * r
        }
        _ => {
            let (ax, ay) = (x.abs(), y.abs());
            (ax < 0.3 * r && ay < r) || (ay < 0.3 * r && ax < r)
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

fn render_desk_sample<R: Rng>(rng: &mut R, class: usize, size: usize) -> Image {
    let shape = class / 2;
    let striped = class % 2 == 1;
    let bg_a = random_color(rng);
    let bg_b = random_color(rng);
    let bg_angle = rng.random_range(0.0..2.0 * PI);
    let mut fg = random_color(rng);
    // Keep the object visible against the mean background.
    let bg_mean: Vec<f64> = (0..3).map(|c| 0.5 * (bg_a[c] + bg_b[c])).collect();
    let dist: f64 = (0..3).map(|c| (fg[c] - bg_mean[c]).abs()).sum();
    if dist < 0.6 {
        for c in 0..3 {
            fg[c] = if bg_mean[c] > 0.5 { fg[c] * 0.4 } else { 0.6 + 0.4 * fg[c] };
        }
    }
    let stripe_dark = rng.random_range(0.2..0.5);
    let cx = rng.random_range(-0.15..0.15);
    let cy = rng.random_range(-0.15..0.15);
    let r = rng.random_range(0.22..0.38);
    let rot = rng.random_range(0.0..2.0 * PI);
    let (sin_r, cos_r) = rot.sin_cos();
    let stripe_angle = rng.random_range(0.0..PI);
    let (stripe_dx, stripe_dy) = (stripe_angle.cos(), stripe_angle.sin());
    let stripe_period = rng.random_range(0.09..0.13);
    let stripe_phase = rng.random_range(0.0..1.0);
    let noise = Normal::new(0.0, 0.05).expect("finite");
    let n_dots = rng.random_range(0..4);
    let dots: Vec<(f64, f64, f64, [f64; 3])> = (0..n_dots)
        .map(|_| {
            (
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.03..0.07),
                random_color(rng),
            )
        })
        .collect();

    let mut img = Image::new(3, size, size);
    let sub = 3;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..sub {
                for sx in 0..sub {
                    let u = (px as f64 + (sx as f64 + 0.5) / sub as f64) / size as f64 - 0.5;
                    let v = (py as f64 + (sy as f64 + 0.5) / sub as f64) / size as f64 - 0.5;
                    let t = 0.5 + (u * bg_angle.cos() + v * bg_angle.sin());
                    let mut col: [f64; 3] = std::array::from_fn(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t);
                    for &(dx, dy, dr, dc) in &dots {
                        if (u - dx).powi(2) + (v - dy).powi(2) < dr * dr {
                            col = dc;
                        }
                    }
                    let (x, y) = (u - cx, v - cy);
                    let xr = cos_r * x + sin_r * y;
                    let yr = -sin_r * x + cos_r * y;
                    if inside_shape(shape, xr, yr, r) {
                        col = fg;
                        if striped {
                            let s = ((u * stripe_dx + v * stripe_dy) / stripe_period + stripe_phase).fract();
                            if s < 0.5 {
                                col = std::array::from_fn(|c| fg[c] * stripe_dark);
                            }
                        }
                    }
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                let v = a / (sub * sub) as f64 + noise.sample(rng);
                img.set(c, py, px, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// The builtin 10-class 32x32 desk dataset, generated deterministically.
pub fn desk_dataset(split: Split, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("desk dataset needs at least one sample per class".into()));
    }
    let salt = match split {
        Split::Train => 0x5eed_0001,
        Split::Val => 0x5eed_0002,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let mut images = Vec::with_capacity(per_class * 10);
    let mut labels = Vec::with_capacity(per_class * 10);
    for i in 0..per_class * DESK_CLASSES.len() {
        let class = i % DESK_CLASSES.len();
        images.push(render_desk_sample(&mut rng, class, DESK_RESOLUTION));
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        num_classes: DESK_CLASSES.len(),
        class_names: DESK_CLASSES.iter().map(|s| s.to_string()).collect(),
        split,
        source: "builtin".into(),
    }
    .validate()
}

/// The `data` section of the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Builtin {
        train_per_class: usize,
        val_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Synthetic(SyntheticSpec),
    ImageFolder {
        train: PathBuf,
        val: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Builtin {
            train_per_class: 500,
            val_per_class: 200,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            DataConfig::Builtin {
                train_per_class,
                val_per_class,
                seed,
            } => {
                let n = match split {
                    Split::Train => *train_per_class,
                    Split::Val => *val_per_class,
                };
                desk_dataset(split, n, *seed)
            }
            DataConfig::Synthetic(spec) => make_synthetic(spec, split),
            DataConfig::ImageFolder { train, val } => {
                let root = match split {
                    Split::Train => train,
                    Split::Val => val.as_ref().unwrap_or(train),
                };
                Dataset::load_image_folder(root, split)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(size: usize) -> Image {
        let mut img = Image::new(3, size, size);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 31 % 17) as f32) / 16.0;
        }
        img
    }

    #[test]
    fn resample_at_native_size_is_identity() {
        let img = textured(12);
        let out = img.resample(0.0, 0.0, 12.0, 12.0, 12, 12);
        assert_eq!(out, img);
    }

    #[test]
    fn downsample_preserves_constant_images() {
        let mut img = Image::new(1, 10, 10);
        img.data.fill(0.3);
        let out = img.resize(7, 7);
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let up = img.resize(23, 23);
        assert!(up.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn train_view_shapes_and_determinism() {
        let imgs = [textured(32), textured(40)];
        let refs: Vec<&Image> = imgs.iter().collect();
        let aug = AugmentConfig::default();
        let a = train_view(&refs, 24, &mut ChaCha8Rng::seed_from_u64(3), &aug);
        let b = train_view(&refs, 24, &mut ChaCha8Rng::seed_from_u64(3), &aug);
        assert_eq!(a, b);
        assert!(a.iter().all(|i| i.width == 24 && i.height == 24));
    }

    #[test]
    fn identity_augmentation_at_source_size() {
        let img = textured(16);
        let out = train_view(&[&img], 16, &mut ChaCha8Rng::seed_from_u64(0), &AugmentConfig::identity());
        assert_eq!(out[0], img);
    }

    #[test]
    fn crop_sampling_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let aug = AugmentConfig::default();
        for _ in 0..500 {
            let c = sample_crop(&mut rng, 32, 32, &aug);
            assert!(c.x0 + c.width <= 32 && c.y0 + c.height <= 32);
            let frac = (c.width * c.height) as f64 / 1024.0;
            assert!(frac > 0.3 && frac <= 1.0, "area fraction {frac}");
        }
    }

    #[test]
    fn eval_view_sizes() {
        assert_eq!((224.0f64 / EVAL_CROP_RATIO).round() as usize, 256);
        let img = textured(300);
        let v = eval_view(&img, 224);
        assert_eq!((v.width, v.height), (224, 224));
        assert_eq!(((28.0f64) / EVAL_CROP_RATIO).round() as usize, 32);
        let v = eval_view(&textured(32), 28);
        assert_eq!((v.width, v.height), (28, 28));
    }

    #[test]
    fn eval_view_without_resampling_is_center_crop() {
        let img = textured(32);
        assert_eq!(eval_view(&img, 28), img.crop(2, 2, 28, 28));
    }

    #[test]
    fn eval_view_keeps_aspect_of_rectangles() {
        let mut img = Image::new(3, 20, 40);
        img.data.fill(0.5);
        let v = eval_view(&img, 14);
        assert_eq!((v.width, v.height), (14, 14));
    }

    #[test]
    fn synthetic_count_and_determinism() {
        let spec = SyntheticSpec::new(2, 32, 32, 5);
        let a = make_synthetic(&spec, Split::Train).unwrap();
        assert_eq!(a.len(), 64);
        let b = make_synthetic(&spec, Split::Train).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synthetic_label_rule_survives_resizing() {
        let spec = SyntheticSpec::new(4, 10, 32, 9);
        let ds = make_synthetic(&spec, Split::Train).unwrap();
        for size in [32, 24, 16] {
            for (img, &label) in ds.images.iter().zip(&ds.labels) {
                assert_eq!(spec.label_rule(&img.resize(size, size)), label, "size {size}");
            }
        }
    }

    #[test]
    fn desk_dataset_is_deterministic_and_balanced() {
        let a = desk_dataset(Split::Val, 3, 1).unwrap();
        let b = desk_dataset(Split::Val, 3, 1).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.len(), 30);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 3);
        }
        let t = desk_dataset(Split::Train, 3, 1).unwrap();
        assert_ne!(t.images, a.images);
    }

    #[test]
    fn image_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic(&SyntheticSpec::new(3, 2, 8, 1), Split::Train).unwrap();
        ds.export_image_folder(dir.path()).unwrap();
        let back = Dataset::load_image_folder(dir.path(), Split::Train).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.num_classes, 3);
        assert_eq!(back.class_names, ds.class_names);
        let mut orig: Vec<usize> = ds.labels.clone();
        orig.sort();
        let mut loaded = back.labels.clone();
        loaded.sort();
        assert_eq!(orig, loaded);
        for img in &back.images {
            assert_eq!((img.width, img.height), (8, 8));
        }
    }

    #[test]
    fn empty_folder_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::load_image_folder(dir.path(), Split::Val),
            Err(Error::InvalidArgument(_))
        ));
    }
}
