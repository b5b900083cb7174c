//! Resolution encoding and per-layer kernel generators.
//!
//! Every convolution in a backbone owns one meta-learner that maps the scalar
//! encoding of the input resolution to that layer's flattened kernel, either
//! affinely (`eps * W + b`) or through one ReLU hidden layer.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BackboneSpec, ConvLayerSpec};
use crate::scalar::{cast, Scalar};
use crate::tensor::axpy;

/// Scalar summary of a resolution fed to every meta-learner.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ScaleEncoding(pub f64);

impl ScaleEncoding {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Maps a resolution `S` to `coefficient * S / downsample_rate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEncoder {
    pub coefficient: f64,
    pub downsample_rate: u32,
}

impl Default for ScaleEncoder {
    fn default() -> Self {
        ScaleEncoder {
            coefficient: 0.1,
            downsample_rate: 32,
        }
    }
}

impl ScaleEncoder {
    pub fn new(coefficient: f64, downsample_rate: u32) -> Result<Self> {
        if !(coefficient > 0.0) || !coefficient.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "encoding coefficient must be positive, got {coefficient}"
            )));
        }
        if downsample_rate == 0 {
            return Err(Error::InvalidArgument("downsample rate must be positive".into()));
        }
        Ok(ScaleEncoder {
            coefficient,
            downsample_rate,
        })
    }

    pub fn encode(&self, resolution: u32) -> Result<ScaleEncoding> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        Ok(ScaleEncoding(
            self.coefficient * resolution as f64 / self.downsample_rate as f64,
        ))
    }
}

/// The learnable map from an encoding to a flattened kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaMap<T> {
    /// `kernel = eps * weight + bias`
    Linear { weight: Vec<T>, bias: Vec<T> },
    /// `kernel = relu(eps * w1 + b1) * w2 + b2`, with `w2` stored `hidden x out` row-major.
    Hidden {
        w1: Vec<T>,
        b1: Vec<T>,
        w2: Vec<T>,
        b2: Vec<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaLearnerParams<T> {
    pub layer_id: usize,
    pub map: MetaMap<T>,
}

/// A kernel shaped `(C_out, C_in_per_group, K, K)`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedKernel<T> {
    pub layer_id: usize,
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> MetaLearnerParams<T> {
    /// Number of kernel elements this learner emits.
    pub fn output_len(&self) -> usize {
        match &self.map {
            MetaMap::Linear { weight, .. } => weight.len(),
            MetaMap::Hidden { b2, .. } => b2.len(),
        }
    }

    pub fn hidden_units(&self) -> usize {
        match &self.map {
            MetaMap::Linear { .. } => 0,
            MetaMap::Hidden { b1, .. } => b1.len(),
        }
    }

    /// A zero-valued learner of the same structure (used for gradients and momentum).
    pub fn zeros_like(&self) -> Self {
        let map = match &self.map {
            MetaMap::Linear { weight, bias } => MetaMap::Linear {
                weight: vec![T::zero(); weight.len()],
                bias: vec![T::zero(); bias.len()],
            },
            MetaMap::Hidden { w1, b1, w2, b2 } => MetaMap::Hidden {
                w1: vec![T::zero(); w1.len()],
                b1: vec![T::zero(); b1.len()],
                w2: vec![T::zero(); w2.len()],
                b2: vec![T::zero(); b2.len()],
            },
        };
        MetaLearnerParams {
            layer_id: self.layer_id,
            map,
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        match &self.map {
            MetaMap::Linear { weight, bias } => vec![("weight", weight), ("bias", bias)],
            MetaMap::Hidden { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match &mut self.map {
            MetaMap::Linear { weight, bias } => vec![("weight", weight), ("bias", bias)],
            MetaMap::Hidden { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
        }
    }

    /// The pair reported by the weight/bias ratio table: `(W_l, b_l)` for the
    /// affine map, the output layer for the hidden variant.
    pub fn output_weight_and_bias(&self) -> (&[T], &[T]) {
        match &self.map {
            MetaMap::Linear { weight, bias } => (weight, bias),
            MetaMap::Hidden { w2, b2, .. } => (w2, b2),
        }
    }

    fn hidden_activation(w1: &[T], b1: &[T], eps: T) -> Vec<T> {
        w1.iter()
            .zip(b1)
            .map(|(&w, &b)| (eps * w + b).max(T::zero()))
            .collect()
    }
}

/// Evaluate the meta-learner at `eps` and reshape to the layer's kernel.
pub fn generate_kernel<T: Scalar>(
    params: &MetaLearnerParams<T>,
    layer: &ConvLayerSpec,
    eps: ScaleEncoding,
) -> Result<GeneratedKernel<T>> {
    if params.output_len() != layer.kernel_len() {
        return Err(Error::Config(format!(
            "meta-learner for layer {} emits {} values but the layer needs {}",
            layer.layer_id,
            params.output_len(),
            layer.kernel_len()
        )));
    }
    let e: T = cast(eps.0);
    let data = match &params.map {
        MetaMap::Linear { weight, bias } => weight
            .iter()
            .zip(bias)
            .map(|(&w, &b)| e * w + b)
            .collect(),
        MetaMap::Hidden { w1, b1, w2, b2 } => {
            let h = MetaLearnerParams::hidden_activation(w1, b1, e);
            let mut out = b2.clone();
            let d = b2.len();
            for (u, &hu) in h.iter().enumerate() {
                if hu > T::zero() {
                    axpy(hu, &w2[u * d..(u + 1) * d], &mut out);
                }
            }
            out
        }
    };
    Ok(GeneratedKernel {
        layer_id: layer.layer_id,
        shape: layer.kernel_shape(),
        data,
    })
}

/// Accumulate into `grad` the gradient of a loss with respect to the
/// meta-learner parameters, given the loss gradient `d_kernel` at `eps`.
pub fn accumulate_meta_grad<T: Scalar>(
    params: &MetaLearnerParams<T>,
    eps: ScaleEncoding,
    d_kernel: &[T],
    grad: &mut MetaLearnerParams<T>,
) {
    let e: T = cast(eps.0);
    match (&params.map, &mut grad.map) {
        (MetaMap::Linear { .. }, MetaMap::Linear { weight, bias }) => {
            axpy(e, d_kernel, weight);
            axpy(T::one(), d_kernel, bias);
        }
        (
            MetaMap::Hidden { w1, b1, w2, .. },
            MetaMap::Hidden {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        ) => {
            let d = d_kernel.len();
            let h = MetaLearnerParams::hidden_activation(w1, b1, e);
            axpy(T::one(), d_kernel, gb2);
            for (u, &hu) in h.iter().enumerate() {
                if hu <= T::zero() {
                    continue;
                }
                axpy(hu, d_kernel, &mut gw2[u * d..(u + 1) * d]);
                let dh: T = w2[u * d..(u + 1) * d]
                    .iter()
                    .zip(d_kernel)
                    .map(|(&w, &g)| w * g)
                    .sum();
                gw1[u] += e * dh;
                gb1[u] += dh;
            }
        }
        _ => panic!("gradient buffer structure does not match meta-learner"),
    }
}

fn fan_in_std(layer: &ConvLayerSpec) -> f64 {
    let fan_in = layer.in_channels_per_group() * layer.kernel_size * layer.kernel_size;
    (2.0 / fan_in as f64).sqrt()
}

/// One meta-learner per convolution, drawn from a fan-in-scaled normal.
pub fn init_meta_params<T: Scalar>(
    backbone: &BackboneSpec,
    hidden_units: usize,
    seed: u64,
) -> Vec<MetaLearnerParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    backbone
        .layers
        .iter()
        .map(|layer| {
            let d = layer.kernel_len();
            let std = fan_in_std(layer);
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut draw = |n: usize, dist: &Normal<f64>| -> Vec<T> {
                (0..n).map(|_| cast(dist.sample(&mut rng))).collect()
            };
            let map = if hidden_units == 0 {
                let weight = draw(d, &normal);
                let bias = draw(d, &normal);
                MetaMap::Linear { weight, bias }
            } else {
                let unit = Normal::new(0.0, 1.0).expect("finite std");
                let w1 = draw(hidden_units, &unit);
                let b1 = vec![cast(0.5); hidden_units];
                let out_normal =
                    Normal::new(0.0, std / (hidden_units as f64).sqrt()).expect("finite std");
                let w2 = draw(hidden_units * d, &out_normal);
                let b2 = draw(d, &normal);
                MetaMap::Hidden { w1, b1, w2, b2 }
            };
            MetaLearnerParams {
                layer_id: layer.layer_id,
                map,
            }
        })
        .collect()
}

/// `mean(|W_l|) / mean(|b_l|)` per layer; `None` when the bias is all zero.
pub fn weight_bias_ratio_report<T: Scalar>(params: &[MetaLearnerParams<T>]) -> Vec<(usize, Option<f64>)> {
    params
        .iter()
        .map(|p| {
            let (w, b) = p.output_weight_and_bias();
            let mean_abs = |v: &[T]| -> f64 {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().map(|x| x.as_f64().abs()).sum::<f64>() / v.len() as f64
                }
            };
            let denom = mean_abs(b);
            let ratio = (denom > 0.0).then(|| mean_abs(w) / denom);
            (p.layer_id, ratio)
        })
        .collect()
}

pub fn ratio_report_csv(rows: &[(usize, Option<f64>)]) -> String {
    let mut out = String::from("layer_id,ratio\n");
    for (id, ratio) in rows {
        match ratio {
            Some(r) => writeln!(out, "{id},{r:.4}").unwrap(),
            None => writeln!(out, "{id},inf").unwrap(),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneSpec;

    fn layer(cin: usize, cout: usize, k: usize) -> ConvLayerSpec {
        ConvLayerSpec {
            layer_id: 0,
            name: "l".into(),
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    #[test]
    fn encode_examples() {
        let enc = ScaleEncoder::default();
        assert!((enc.encode(224).unwrap().0 - 0.7).abs() < 1e-12);
        assert!((enc.encode(96).unwrap().0 - 0.3).abs() < 1e-12);
        assert!((enc.encode(32).unwrap().0 - 0.1).abs() < 1e-12);
        assert!(matches!(enc.encode(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encoder_rejects_bad_configuration() {
        assert!(ScaleEncoder::new(0.0, 32).is_err());
        assert!(ScaleEncoder::new(0.1, 0).is_err());
        assert!(ScaleEncoder::new(0.1, 4).is_ok());
    }

    #[test]
    fn linear_kernel_direct_evaluation() {
        let p = MetaLearnerParams {
            layer_id: 0,
            map: MetaMap::Linear {
                weight: vec![1.0f64, 2.0],
                bias: vec![0.5, -0.5],
            },
        };
        let l = ConvLayerSpec { out_channels: 2, ..layer(1, 2, 1) };
        let k = generate_kernel(&p, &l, ScaleEncoding(0.7)).unwrap();
        assert!((k.data[0] - 1.2).abs() < 1e-12);
        assert!((k.data[1] - 0.9).abs() < 1e-12);
        assert_eq!(k.shape, [2, 1, 1, 1]);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let p = MetaLearnerParams {
            layer_id: 0,
            map: MetaMap::Linear {
                weight: vec![0.0f32; 2],
                bias: vec![0.3, -0.1],
            },
        };
        let l = layer(1, 2, 1);
        for eps in [0.1, 0.55, 3.0] {
            let k = generate_kernel(&p, &l, ScaleEncoding(eps)).unwrap();
            assert_eq!(k.data, vec![0.3, -0.1]);
        }
    }

    #[test]
    fn shape_mismatch_is_configuration_error() {
        let p = MetaLearnerParams {
            layer_id: 0,
            map: MetaMap::Linear {
                weight: vec![0.0f32; 3],
                bias: vec![0.0; 3],
            },
        };
        assert!(matches!(
            generate_kernel(&p, &layer(1, 2, 1), ScaleEncoding(0.5)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_complete() {
        let spec = BackboneSpec::plain(3, &[4, 4], 10);
        let a = init_meta_params::<f32>(&spec, 0, 7);
        let b = init_meta_params::<f32>(&spec, 0, 7);
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        for (p, l) in a.iter().zip(&spec.layers) {
            assert_eq!(p.output_len(), l.kernel_len());
        }
        let c = init_meta_params::<f32>(&spec, 0, 8);
        assert_ne!(a, c);
        let h = init_meta_params::<f32>(&spec, 8, 7);
        assert!(h.iter().all(|p| p.hidden_units() == 8));
    }

    #[test]
    fn init_variance_is_near_fan_in_reference() {
        // Empirical per-element variance of generated kernels at eps = 0.4
        // pooled over ten seeds, against 2 / (C_in_g * K^2).
        let spec = BackboneSpec::plain(8, &[16], 10);
        let l = &spec.layers[0];
        let reference = 2.0 / (8.0 * 9.0);
        let mut values = Vec::new();
        for seed in 0..10 {
            let params = init_meta_params::<f64>(&spec, 0, seed);
            let k = generate_kernel(&params[0], l, ScaleEncoding(0.4)).unwrap();
            values.extend(k.data);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(var < 4.0 * reference && var > reference / 4.0, "var {var} ref {reference}");
    }

    #[test]
    fn ratio_report_examples() {
        let p = vec![
            MetaLearnerParams {
                layer_id: 3,
                map: MetaMap::Linear {
                    weight: vec![1.0f64, -1.0],
                    bias: vec![2.0, 2.0],
                },
            },
            MetaLearnerParams {
                layer_id: 4,
                map: MetaMap::Linear {
                    weight: vec![1.0f64, -1.0],
                    bias: vec![0.0, 0.0],
                },
            },
        ];
        let rows = weight_bias_ratio_report(&p);
        assert_eq!(rows[0], (3, Some(0.5)));
        assert_eq!(rows[1], (4, None));
        assert_eq!(ratio_report_csv(&rows), "layer_id,ratio\n3,0.5000\n4,inf\n");
    }

    #[test]
    fn hidden_variant_gradients_match_finite_differences() {
        let spec = BackboneSpec::plain(2, &[2], 2);
        let l = &spec.layers[0];
        let params = init_meta_params::<f64>(&spec, 4, 3).remove(0);
        let eps = ScaleEncoding(0.45);
        let r: Vec<f64> = (0..l.kernel_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |p: &MetaLearnerParams<f64>| -> f64 {
            generate_kernel(p, l, eps)
                .unwrap()
                .data
                .iter()
                .zip(&r)
                .map(|(a, b)| a * b * a)
                .sum()
        };
        let kernel = generate_kernel(&params, l, eps).unwrap();
        let dk: Vec<f64> = kernel.data.iter().zip(&r).map(|(a, b)| 2.0 * a * b).collect();
        let mut grad = params.zeros_like();
        accumulate_meta_grad(&params, eps, &dk, &mut grad);
        let h = 1e-6;
        let names: Vec<_> = params.tensors().iter().map(|(n, v)| (*n, v.len())).collect();
        for (ti, (name, len)) in names.into_iter().enumerate() {
            for i in 0..len.min(6) {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grad.tensors()[ti].1[i];
                assert!((fd - an).abs() < 1e-6, "{name}[{i}]: fd {fd} analytic {an}");
            }
        }
    }
}
