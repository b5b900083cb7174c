//! The trainable model: meta-learners, the BN bank and the shared classifier.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bn::{BnBank, BnSet, BnSite};
use crate::error::{Error, Result};
use crate::meta::{
    generate_kernel, init_meta_params, GeneratedKernel, MetaLearnerParams, MetaMap, ScaleEncoder, ScaleEncoding,
};
use crate::network::{BackboneSpec, Classifier, MainNetwork};
use crate::scalar::{cast, Scalar};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub backbone: BackboneSpec,
    pub encoder: ScaleEncoder,
    pub meta: Vec<MetaLearnerParams<T>>,
    pub bank: BnBank<T>,
    pub fc: Classifier<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(
        backbone: BackboneSpec,
        encoder: ScaleEncoder,
        resolutions: &[u32],
        hidden_units: usize,
        share_bn: bool,
        seed: u64,
    ) -> Result<Self> {
        backbone.validate()?;
        let meta = init_meta_params(&backbone, hidden_units, seed);
        let bank = BnBank::new(resolutions, &backbone.bn_channels(), share_bn)?;
        let mut fc = Classifier::zeros(backbone.num_classes, backbone.feature_dim());
        let bound = 1.0 / (backbone.feature_dim() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xfc));
        for w in fc.weight.data.iter_mut() {
            *w = cast(rng.random_range(-bound..bound));
        }
        Ok(Model {
            backbone,
            encoder,
            meta,
            bank,
            fc,
        })
    }

    /// Training resolutions, largest first.
    pub fn resolutions(&self) -> &[u32] {
        self.bank.resolutions()
    }

    pub fn encode(&self, resolution: u32) -> Result<ScaleEncoding> {
        self.encoder.encode(resolution)
    }

    /// Kernels for every convolution at encoding `eps`.
    pub fn kernels_at(&self, eps: ScaleEncoding) -> Result<Vec<GeneratedKernel<T>>> {
        self.meta
            .iter()
            .zip(&self.backbone.layers)
            .map(|(m, l)| generate_kernel(m, l, eps))
            .collect()
    }

    /// Main network with kernels from `eps` and the BN set stored for `bn_key`.
    pub fn parameterize(&self, eps: ScaleEncoding, bn_key: u32) -> Result<MainNetwork<'_, T>> {
        let bn = self.bank.get(bn_key)?;
        Ok(MainNetwork {
            backbone: &self.backbone,
            kernels: self.kernels_at(eps)?,
            bn: Cow::Borrowed(bn),
            fc: &self.fc,
        })
    }

    /// Main network with kernels from `eps` and a BN set not stored in the bank
    /// (calibrated or interpolated).
    pub fn parameterize_with(&self, eps: ScaleEncoding, bn: BnSet<T>) -> Result<MainNetwork<'_, T>> {
        if !bn.structurally_equal(&self.bank.sets()[0]) {
            return Err(Error::Config("BN set does not match the backbone".into()));
        }
        Ok(MainNetwork {
            backbone: &self.backbone,
            kernels: self.kernels_at(eps)?,
            bn: Cow::Owned(bn),
            fc: &self.fc,
        })
    }

    /// Hidden units of the meta-learners (0 for the affine map).
    pub fn hidden_units(&self) -> usize {
        self.meta.first().map_or(0, |m| m.hidden_units())
    }

    /// Convert every parameter to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|x| cast(x.as_f64())).collect() };
        let meta = self
            .meta
            .iter()
            .map(|m| {
                let map = match &m.map {
                    MetaMap::Linear { weight, bias } => MetaMap::Linear {
                        weight: conv(weight),
                        bias: conv(bias),
                    },
                    MetaMap::Hidden { w1, b1, w2, b2 } => MetaMap::Hidden {
                        w1: conv(w1),
                        b1: conv(b1),
                        w2: conv(w2),
                        b2: conv(b2),
                    },
                };
                MetaLearnerParams {
                    layer_id: m.layer_id,
                    map,
                }
            })
            .collect();
        let sets = self
            .bank
            .sets()
            .iter()
            .map(|s| BnSet {
                sites: s
                    .sites
                    .iter()
                    .map(|site| BnSite {
                        gamma: conv(&site.gamma),
                        beta: conv(&site.beta),
                        mean: conv(&site.mean),
                        var: conv(&site.var),
                        eps: site.eps,
                        momentum: site.momentum,
                    })
                    .collect(),
            })
            .collect();
        Model {
            backbone: self.backbone.clone(),
            encoder: self.encoder,
            meta,
            bank: BnBank::from_sets(self.resolutions(), self.bank.is_shared(), sets).expect("same structure"),
            fc: Classifier {
                weight: Matrix::from_vec(
                    self.fc.weight.rows,
                    self.fc.weight.cols,
                    conv(&self.fc.weight.data),
                ),
                bias: conv(&self.fc.bias),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneConfig;

    fn model() -> Model<f32> {
        let spec = BackboneConfig {
            stem_width: 4,
            stage_widths: vec![4, 8],
            block_counts: vec![1, 1],
            ..BackboneConfig::default()
        }
        .build()
        .unwrap();
        Model::new(spec, ScaleEncoder::new(0.1, 4).unwrap(), &[32, 24, 16], 0, false, 0).unwrap()
    }

    #[test]
    fn parameterize_generates_all_kernels() {
        let m = model();
        let net = m.parameterize(m.encode(24).unwrap(), 24).unwrap();
        assert_eq!(net.kernels.len(), m.backbone.layers.len());
        let again = m.parameterize(m.encode(24).unwrap(), 24).unwrap();
        assert_eq!(net.kernels, again.kernels);
        assert!(matches!(m.parameterize(m.encode(20).unwrap(), 20), Err(Error::UnknownKey(20))));
        // Interpolated encoding with a stored BN set.
        assert!(m.parameterize(m.encode(28).unwrap(), 24).is_ok());
    }

    #[test]
    fn classifier_is_shared_by_every_network() {
        let mut m = model();
        {
            let a = m.parameterize(m.encode(32).unwrap(), 32).unwrap();
            let b = m.parameterize(m.encode(16).unwrap(), 16).unwrap();
            assert!(std::ptr::eq(a.fc, b.fc));
        }
        m.fc.bias[0] = 3.0;
        let c = m.parameterize(m.encode(24).unwrap(), 24).unwrap();
        assert_eq!(c.fc.bias[0], 3.0);
    }
}
