//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `SCALENET`, a little-endian `u32` manifest
//! length, the manifest as UTF-8 JSON, then the tensor blob. Each tensor
//! record is `u32` name length, UTF-8 name, `u8` dtype code, `u32` rank,
//! `rank` little-endian `u64` dims and the row-major little-endian data.
//! The manifest carries the SHA-256 of the blob, checked on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bn::{BnBank, BnSet};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::meta::{MetaMap, ScaleEncoder};
use crate::model::Model;
use crate::network::{BackboneSpec, Classifier};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"SCALENET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: Option<RunConfig>,
    pub resolutions: Vec<u32>,
    pub share_bn: bool,
    pub hidden_units: usize,
    pub encoder: ScaleEncoder,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub backbone: BackboneSpec,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub manifest: Manifest,
    pub model: Model<T>,
}

/// A named tensor view used while writing.
struct Record<'a, T> {
    name: String,
    dims: Vec<usize>,
    data: &'a [T],
}

fn bn_prefix<T: Scalar>(model: &Model<T>, set: usize) -> String {
    if model.bank.is_shared() {
        "bn.shared".to_string()
    } else {
        format!("bn.{}", model.bank.resolutions()[set])
    }
}

fn records<T: Scalar>(model: &Model<T>) -> Vec<Record<'_, T>> {
    let mut out = Vec::new();
    for m in &model.meta {
        let hidden = m.hidden_units();
        for (name, data) in m.tensors() {
            let dims = if name == "w2" {
                vec![hidden, m.output_len()]
            } else {
                vec![data.len()]
            };
            out.push(Record {
                name: format!("meta.{}.{name}", m.layer_id),
                dims,
                data,
            });
        }
    }
    for (i, set) in model.bank.sets().iter().enumerate() {
        let prefix = bn_prefix(model, i);
        for (s, site) in set.sites.iter().enumerate() {
            for (name, data) in [
                ("gamma", &site.gamma),
                ("beta", &site.beta),
                ("mean", &site.mean),
                ("var", &site.var),
            ] {
                out.push(Record {
                    name: format!("{prefix}.{s}.{name}"),
                    dims: vec![data.len()],
                    data,
                });
            }
        }
    }
    out.push(Record {
        name: "fc.weight".into(),
        dims: vec![model.fc.weight.rows, model.fc.weight.cols],
        data: &model.fc.weight.data,
    });
    out.push(Record {
        name: "fc.bias".into(),
        dims: vec![model.fc.bias.len()],
        data: &model.fc.bias,
    });
    out
}

/// Serialize every tensor of the model into the record blob.
pub fn tensor_blob<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut blob = Vec::new();
    for r in records(model) {
        blob.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        blob.extend_from_slice(r.name.as_bytes());
        blob.push(T::DTYPE.code());
        blob.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for d in &r.dims {
            blob.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in r.data {
            v.write_le(&mut blob);
        }
    }
    blob
}

/// SHA-256 of the tensor blob, hex encoded. Identifies a model's parameters.
pub fn model_hash<T: Scalar>(model: &Model<T>) -> String {
    hex::encode(Sha256::digest(tensor_blob(model)))
}

pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>, config: Option<&RunConfig>) -> Vec<u8> {
    let blob = tensor_blob(model);
    let first_site = &model.bank.sets()[0].sites[0];
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.cloned(),
        resolutions: model.resolutions().to_vec(),
        share_bn: model.bank.is_shared(),
        hidden_units: model.hidden_units(),
        encoder: model.encoder,
        bn_eps: first_site.eps,
        bn_momentum: first_site.momentum,
        backbone: model.backbone.clone(),
        content_hash: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, config: Option<&RunConfig>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, checkpoint_bytes(model, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Corrupt { reason, .. } => Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: Default::default(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parse a checkpoint held in memory. Element types are converted to `T`
/// when the stored dtype differs.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| corrupt("missing header"))? != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::UnsupportedFormat {
            found: version.map_or(0, |v| v.min(u32::MAX as u64) as u32),
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let blob = &bytes[r.pos..];
    if hex::encode(Sha256::digest(blob)) != manifest.content_hash {
        return Err(corrupt("content hash mismatch"));
    }

    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<T>)> = BTreeMap::new();
    let mut r = Reader { bytes: blob, pos: 0 };
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| corrupt("unknown dtype"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count.checked_mul(dtype.size()).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => raw.chunks_exact(d.size()).map(T::read_le).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }

    let model = assemble(&manifest, &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { manifest, model })
}

fn assemble<T: Scalar>(m: &Manifest, tensors: &mut BTreeMap<String, (Vec<usize>, Vec<T>)>) -> Result<Model<T>> {
    m.backbone.validate().map_err(|e| corrupt(format!("backbone: {e}")))?;
    let mut take = |name: String, len: usize| -> Result<Vec<T>> {
        let (_, data) = tensors
            .remove(&name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if data.len() != len {
            return Err(corrupt(format!("tensor {name} has {} elements, expected {len}", data.len())));
        }
        Ok(data)
    };

    let mut meta = Vec::with_capacity(m.backbone.layers.len());
    for layer in &m.backbone.layers {
        let n = layer.kernel_len();
        let id = layer.layer_id;
        let map = if m.hidden_units == 0 {
            MetaMap::Linear {
                weight: take(format!("meta.{id}.weight"), n)?,
                bias: take(format!("meta.{id}.bias"), n)?,
            }
        } else {
            let h = m.hidden_units;
            MetaMap::Hidden {
                w1: take(format!("meta.{id}.w1"), h)?,
                b1: take(format!("meta.{id}.b1"), h)?,
                w2: take(format!("meta.{id}.w2"), h * n)?,
                b2: take(format!("meta.{id}.b2"), n)?,
            }
        };
        meta.push(crate::meta::MetaLearnerParams { layer_id: id, map });
    }

    let channels = m.backbone.bn_channels();
    let prefixes: Vec<String> = if m.share_bn {
        vec!["bn.shared".into()]
    } else {
        m.resolutions.iter().map(|r| format!("bn.{r}")).collect()
    };
    let mut sets = Vec::with_capacity(prefixes.len());
    for prefix in &prefixes {
        let mut set = BnSet::<T>::new(&channels);
        for (s, site) in set.sites.iter_mut().enumerate() {
            let c = channels[s];
            site.gamma = take(format!("{prefix}.{s}.gamma"), c)?;
            site.beta = take(format!("{prefix}.{s}.beta"), c)?;
            site.mean = take(format!("{prefix}.{s}.mean"), c)?;
            site.var = take(format!("{prefix}.{s}.var"), c)?;
            site.eps = m.bn_eps;
            site.momentum = m.bn_momentum;
        }
        sets.push(set);
    }
    let bank = BnBank::from_sets(&m.resolutions, m.share_bn, sets).map_err(|e| corrupt(e.to_string()))?;

    let (classes, dim) = (m.backbone.num_classes, m.backbone.feature_dim());
    let mut fc = Classifier::zeros(classes, dim);
    fc.weight.data = take("fc.weight".into(), classes * dim)?;
    fc.bias = take("fc.bias".into(), classes)?;

    Ok(Model {
        backbone: m.backbone.clone(),
        encoder: m.encoder,
        meta,
        bank,
        fc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneSpec;

    fn model(hidden: usize, shared: bool) -> Model<f32> {
        let spec = BackboneSpec::tiny_resnet(3, 4, &[4, 8], &[1, 1], 5);
        Model::new(spec, ScaleEncoder::new(0.1, 4).unwrap(), &[16, 12, 8], hidden, shared, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for (hidden, shared) in [(0, false), (8, false), (16, true)] {
            let m = model(hidden, shared);
            let bytes = checkpoint_bytes(&m, None);
            let back = parse_checkpoint::<f32>(&bytes).unwrap();
            assert_eq!(back.model, m);
            assert_eq!(checkpoint_bytes(&back.model, None), bytes);
        }
    }

    #[test]
    fn every_tensor_appears_once() {
        let m = model(0, false);
        let names: Vec<String> = records(&m).into_iter().map(|r| r.name).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        let layers = m.backbone.layers.len();
        assert_eq!(names.len(), 2 * layers + 3 * 4 * layers + 2);
    }

    #[test]
    fn truncation_and_tampering_are_corruption() {
        let bytes = checkpoint_bytes(&model(0, false), None);
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = parse_checkpoint::<f32>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x10;
        assert!(matches!(
            parse_checkpoint::<f32>(&flipped).unwrap_err(),
            Error::Corrupt { .. }
        ));
    }

    #[test]
    fn version_mismatch_is_unsupported() {
        let bytes = checkpoint_bytes(&model(0, false), None);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        let patched = json.replacen("\"format_version\":1", "\"format_version\":9", 1);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        assert!(matches!(
            parse_checkpoint::<f32>(&out).unwrap_err(),
            Error::UnsupportedFormat { .. }
        ));
    }

    #[test]
    fn dtype_conversion_on_load() {
        let m = model(0, false);
        let wide = parse_checkpoint::<f64>(&checkpoint_bytes(&m, None)).unwrap();
        assert_eq!(wide.model.cast::<f32>(), m);
    }

    #[test]
    fn model_hash_tracks_parameters() {
        let mut m = model(0, false);
        let h = model_hash(&m);
        assert_eq!(h, model_hash(&m.clone()));
        m.fc.bias[0] += 1.0;
        assert_ne!(h, model_hash(&m));
    }
}
