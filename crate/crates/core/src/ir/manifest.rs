//! On-disk model format.
//!
//! A model is a JSON manifest plus one little-endian raw blob per tensor,
//! referenced by a path relative to the manifest. Top-level fields:
//! `format_version`, `arch_name`, `alpha`, `input_resolution`,
//! `input_channels`, `layers`. Each layer entry carries its `block` index, a
//! `kind` tag, its hyperparameters and a map of tensor references
//! `{path, dtype, shape}`. Filters are `(M, N/G, K, K)` row-major. Tensor
//! references are optional, so a manifest can describe shapes only.
//!
//! The quantized-model manifest reuses this layout and adds a `quant` map
//! per layer (see [`crate::quant::qnet_manifest`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::graph::{Block, NetworkGraph};
use crate::ir::layer::{
    BatchNormLayer, BatchNormParams, ConvKind, ConvLayer, ConvParams, DenseLayer, Layer, LayerKind,
    SqueezeExciteLayer,
};
use crate::quant::spec::QuantSpec;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I16,
    I32,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub path: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorRef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub block: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub squeeze: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, TensorRef>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quant: BTreeMap<String, QuantSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arch_name: String,
    pub alpha: f64,
    pub input_resolution: usize,
    pub input_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requant_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_quant: Option<QuantSpec>,
    pub layers: Vec<LayerEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_json(&text)
    }
}

/// Little-endian blob codec.
pub trait BlobElem: Copy {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl BlobElem for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl BlobElem for i32 {
    const DTYPE: DType = DType::I32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl BlobElem for i16 {
    const DTYPE: DType = DType::I16;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i16::from_le_bytes([b[0], b[1]])
    }
}

pub fn encode_blob<T: BlobElem>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * T::DTYPE.size());
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

/// Reads a blob and checks it against its reference.
pub fn read_blob<T: BlobElem>(dir: &Path, r: &TensorRef) -> Result<Vec<T>> {
    if r.dtype != T::DTYPE {
        return Err(Error::Manifest(format!(
            "{}: dtype {:?}, expected {:?}",
            r.path,
            r.dtype,
            T::DTYPE
        )));
    }
    let path = dir.join(&r.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let size = T::DTYPE.size();
    if bytes.len() != r.len() * size {
        return Err(Error::ShapeMismatch(format!(
            "{}: blob holds {} bytes, shape {:?} needs {}",
            r.path,
            bytes.len(),
            r.shape,
            r.len() * size
        )));
    }
    Ok(bytes.chunks_exact(size).map(T::read_le).collect())
}

/// Collects blobs to be written next to a manifest.
#[derive(Debug, Default)]
pub struct BlobWriter {
    pub files: Vec<(String, Vec<u8>)>,
}

impl BlobWriter {
    pub fn add<T: BlobElem>(&mut self, name: String, shape: Vec<usize>, data: &[T]) -> TensorRef {
        let path = format!("{name}.bin");
        self.files.push((path.clone(), encode_blob(data)));
        TensorRef {
            path,
            dtype: T::DTYPE,
            shape,
        }
    }

    pub fn write_all(&self, dir: &Path) -> Result<()> {
        for (path, bytes) in &self.files {
            let p = dir.join(path);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn conv_kind_from(tag: &str) -> Option<ConvKind> {
    Some(match tag {
        "normal_conv" => ConvKind::Normal,
        "depthwise_conv" => ConvKind::Depthwise,
        "pointwise_conv" => ConvKind::Pointwise,
        _ => return None,
    })
}

fn need(v: Option<usize>, field: &str, layer: &str) -> Result<usize> {
    v.ok_or_else(|| Error::Manifest(format!("layer {layer}: missing field `{field}`")))
}

fn conv_entry(e: &mut LayerEntry, c: &ConvLayer, prefix: &str, blobs: &mut BlobWriter) {
    e.n = Some(c.n);
    e.m = Some(c.m);
    e.k = Some(c.k);
    e.stride = Some(c.stride);
    e.groups = Some(c.groups);
    if let Some(p) = &c.params {
        let key = |t: &str| if prefix.is_empty() { t.to_string() } else { format!("{prefix}.{t}") };
        e.tensors.insert(
            key("weights"),
            blobs.add(
                format!("{}.{}", e.name, key("weights")),
                vec![c.m, c.group_width(), c.k, c.k],
                &p.weights,
            ),
        );
        e.tensors
            .insert(key("bias"), blobs.add(format!("{}.{}", e.name, key("bias")), vec![c.m], &p.bias));
    }
}

/// Describes one layer as a manifest entry; parameter tensors are queued on
/// `blobs`.
pub fn layer_entry(layer: &Layer, block: usize, blobs: &mut BlobWriter) -> LayerEntry {
    let mut e = LayerEntry {
        name: layer.name.clone(),
        block,
        kind: layer.kind.tag().to_string(),
        ..LayerEntry::default()
    };
    match &layer.kind {
        LayerKind::Conv(c) => conv_entry(&mut e, c, "", blobs),
        LayerKind::BatchNorm(b) => {
            e.channels = Some(b.channels);
            e.eps = Some(b.eps);
            if let Some(p) = &b.params {
                for (t, v) in [("gamma", &p.gamma), ("beta", &p.beta), ("mean", &p.mean), ("var", &p.var)] {
                    e.tensors
                        .insert(t.into(), blobs.add(format!("{}.{t}", layer.name), vec![b.channels], v));
                }
            }
        }
        LayerKind::SqueezeExcite(se) => {
            e.channels = Some(se.channels());
            e.squeeze = Some(se.squeeze_width());
            if let (Some(sp), Some(ep)) = (&se.squeeze.params, &se.excite.params) {
                let c = se.channels();
                let s = se.squeeze_width();
                e.tensors.insert(
                    "squeeze.weights".into(),
                    blobs.add(format!("{}.squeeze.weights", layer.name), vec![s, c, 1, 1], &sp.weights),
                );
                e.tensors.insert(
                    "squeeze.bias".into(),
                    blobs.add(format!("{}.squeeze.bias", layer.name), vec![s], &sp.bias),
                );
                e.tensors.insert(
                    "excite.weights".into(),
                    blobs.add(format!("{}.excite.weights", layer.name), vec![c, s, 1, 1], &ep.weights),
                );
                e.tensors.insert(
                    "excite.bias".into(),
                    blobs.add(format!("{}.excite.bias", layer.name), vec![c], &ep.bias),
                );
            }
        }
        LayerKind::Dense(d) => {
            e.n = Some(d.n);
            e.m = Some(d.m);
            if let Some(p) = &d.params {
                e.tensors.insert(
                    "weights".into(),
                    blobs.add(format!("{}.weights", layer.name), vec![d.m, d.n], &p.weights),
                );
                e.tensors
                    .insert("bias".into(), blobs.add(format!("{}.bias", layer.name), vec![d.m], &p.bias));
            }
        }
        LayerKind::Relu6 | LayerKind::HardSigmoid | LayerKind::AvgPool | LayerKind::ResidualAdd => {}
    }
    e
}

pub fn to_manifest(g: &NetworkGraph, blobs: &mut BlobWriter) -> Manifest {
    let layers = g
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(bi, b)| b.layers.iter().map(move |l| (bi, l)))
        .map(|(bi, l)| layer_entry(l, bi, blobs))
        .collect();
    Manifest {
        format_version: FORMAT_VERSION,
        arch_name: g.arch_name.clone(),
        alpha: g.alpha,
        input_resolution: g.input_resolution,
        input_channels: g.input_channels,
        requant_mode: None,
        input_quant: None,
        layers,
    }
}

fn check_shape(r: &TensorRef, expected: &[usize], layer: &str, t: &str) -> Result<()> {
    if r.shape != expected {
        return Err(Error::ShapeMismatch(format!(
            "layer {layer}: tensor {t} has shape {:?}, layer needs {expected:?}",
            r.shape
        )));
    }
    Ok(())
}

fn load_params(
    dir: &Path,
    e: &LayerEntry,
    prefix: &str,
    wshape: &[usize],
    m: usize,
) -> Result<Option<ConvParams>> {
    let key = |t: &str| if prefix.is_empty() { t.to_string() } else { format!("{prefix}.{t}") };
    match (e.tensors.get(&key("weights")), e.tensors.get(&key("bias"))) {
        (None, None) => Ok(None),
        (Some(w), Some(b)) => {
            check_shape(w, wshape, &e.name, &key("weights"))?;
            check_shape(b, &[m], &e.name, &key("bias"))?;
            Ok(Some(ConvParams {
                weights: read_blob(dir, w)?,
                bias: read_blob(dir, b)?,
            }))
        }
        _ => Err(Error::Manifest(format!(
            "layer {}: weights and bias must both be present or both absent",
            e.name
        ))),
    }
}

/// Rebuilds one layer from its entry, loading blobs from `dir`.
pub fn layer_from_entry(dir: &Path, e: &LayerEntry) -> Result<Layer> {
    let name = &e.name;
    let kind = if let Some(ck) = conv_kind_from(&e.kind) {
        let n = need(e.n, "n", name)?;
        let m = need(e.m, "m", name)?;
        let k = need(e.k, "k", name)?;
        let stride = need(e.stride, "stride", name)?;
        let groups = need(e.groups, "groups", name)?;
        let mut c = ConvLayer {
            kind: ck,
            n,
            m,
            k,
            stride,
            groups,
            params: None,
        };
        c.validate(name)?;
        c.params = load_params(dir, e, "", &[m, c.group_width(), k, k], m)?;
        LayerKind::Conv(c)
    } else {
        match e.kind.as_str() {
            "batch_norm" => {
                let channels = need(e.channels, "channels", name)?;
                let eps = e.eps.ok_or_else(|| Error::Manifest(format!("layer {name}: missing field `eps`")))?;
                let params = if e.tensors.is_empty() {
                    None
                } else {
                    let get = |t: &str| -> Result<Vec<f32>> {
                        let r = e
                            .tensors
                            .get(t)
                            .ok_or_else(|| Error::Manifest(format!("layer {name}: missing tensor {t}")))?;
                        check_shape(r, &[channels], name, t)?;
                        read_blob(dir, r)
                    };
                    Some(BatchNormParams {
                        gamma: get("gamma")?,
                        beta: get("beta")?,
                        mean: get("mean")?,
                        var: get("var")?,
                    })
                };
                LayerKind::BatchNorm(BatchNormLayer { channels, eps, params })
            }
            "relu6" => LayerKind::Relu6,
            "hard_sigmoid" => LayerKind::HardSigmoid,
            "avg_pool" => LayerKind::AvgPool,
            "residual_add" => LayerKind::ResidualAdd,
            "squeeze_excite" => {
                let c = need(e.channels, "channels", name)?;
                let s = need(e.squeeze, "squeeze", name)?;
                let mut se = SqueezeExciteLayer::new(c, s);
                se.squeeze.params = load_params(dir, e, "squeeze", &[s, c, 1, 1], s)?;
                se.excite.params = load_params(dir, e, "excite", &[c, s, 1, 1], c)?;
                LayerKind::SqueezeExcite(se)
            }
            "dense" => {
                let n = need(e.n, "n", name)?;
                let m = need(e.m, "m", name)?;
                let params = load_params(dir, e, "", &[m, n], m)?;
                LayerKind::Dense(DenseLayer { n, m, params })
            }
            other => return Err(Error::Manifest(format!("layer {name}: unknown kind `{other}`"))),
        }
    };
    Ok(Layer::new(name.clone(), kind))
}

/// Groups entries into blocks; block indices must start at 0 and never
/// skip or decrease.
pub fn group_blocks<T>(items: Vec<(usize, T)>) -> Result<Vec<Vec<T>>> {
    let mut blocks: Vec<Vec<T>> = Vec::new();
    for (bi, item) in items {
        if bi == blocks.len() {
            blocks.push(vec![item]);
        } else if bi + 1 == blocks.len() {
            blocks.last_mut().expect("non-empty").push(item);
        } else {
            return Err(Error::Manifest(format!(
                "block index {bi} out of order (expected {} or {})",
                blocks.len().saturating_sub(1),
                blocks.len()
            )));
        }
    }
    Ok(blocks)
}

pub fn graph_from_manifest(m: &Manifest, dir: &Path) -> Result<NetworkGraph> {
    let layers = m
        .layers
        .iter()
        .map(|e| Ok((e.block, layer_from_entry(dir, e)?)))
        .collect::<Result<Vec<_>>>()?;
    let blocks = group_blocks(layers)?.into_iter().map(Block::new).collect();
    let g = NetworkGraph {
        arch_name: m.arch_name.clone(),
        alpha: m.alpha,
        input_resolution: m.input_resolution,
        input_channels: m.input_channels,
        blocks,
    };
    g.validate()?;
    Ok(g)
}

/// Loads and validates a model manifest and its blobs.
pub fn load_model(manifest_path: &Path) -> Result<NetworkGraph> {
    let m = Manifest::read(manifest_path)?;
    graph_from_manifest(&m, &manifest_dir(manifest_path))
}

pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Writes `g` as `manifest_path` plus blobs in the same directory.
pub fn save_model(g: &NetworkGraph, manifest_path: &Path) -> Result<()> {
    let mut blobs = BlobWriter::default();
    let m = to_manifest(g, &mut blobs);
    let dir = manifest_dir(manifest_path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    blobs.write_all(&dir)?;
    fs::write(manifest_path, m.to_json()).map_err(|e| Error::io(manifest_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::zoo;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = zoo::efficientnet_compressed(32, Some(4)).unwrap();
        let a = dir.path().join("a/model.json");
        let b = dir.path().join("b/model.json");
        save_model(&g, &a).unwrap();
        let loaded = load_model(&a).unwrap();
        assert_eq!(loaded, g);
        save_model(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        for entry in fs::read_dir(dir.path().join("a")).unwrap() {
            let p = entry.unwrap().path();
            let q = dir.path().join("b").join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{p:?}");
        }
    }

    #[test]
    fn shape_only_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let g = zoo::mobilenet_v2(0.35, 224, None).unwrap();
        let p = dir.path().join("m.json");
        save_model(&g, &p).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(load_model(&p).unwrap(), g);
    }

    #[test]
    fn truncated_blob_is_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let g = zoo::toy(16, Some(1)).unwrap();
        let p = dir.path().join("toy.json");
        save_model(&g, &p).unwrap();
        let blob = dir.path().join("b0.conv.weights.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pointwise_k3_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = zoo::toy(16, None).unwrap();
        let mut blobs = BlobWriter::default();
        let mut m = to_manifest(&g, &mut blobs);
        let pw = m.layers.iter_mut().find(|l| l.kind == "pointwise_conv").unwrap();
        pw.k = Some(3);
        let p = dir.path().join("bad.json");
        fs::write(&p, m.to_json()).unwrap();
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("pointwise requires K=1"), "{err}");
    }

    #[test]
    fn empty_manifest_has_no_layers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.json");
        let m = Manifest {
            format_version: FORMAT_VERSION,
            arch_name: "none".into(),
            alpha: 1.0,
            input_resolution: 8,
            input_channels: 3,
            requant_mode: None,
            input_quant: None,
            layers: vec![],
        };
        fs::write(&p, m.to_json()).unwrap();
        assert_eq!(load_model(&p).unwrap_err().to_string(), "invalid graph: no layers");
    }

    #[test]
    fn missing_blob_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let g = zoo::toy(16, Some(1)).unwrap();
        let p = dir.path().join("toy.json");
        save_model(&g, &p).unwrap();
        fs::remove_file(dir.path().join("b4.fc.bias.bin")).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(Manifest::from_json("{ not json"), Err(Error::Manifest(_))));
    }
}
