//! On-disk form of a quantized network.
//!
//! Same layout as the float manifest. Integer weights are `i16` blobs,
//! accumulator biases `i32` blobs, and each layer carries a `quant` map of
//! the specs it reads and writes. Requantizers are not stored; they are
//! rebuilt from the specs on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ir::layer::ConvKind;
use crate::ir::manifest::{group_blocks, manifest_dir, read_blob, BlobWriter, LayerEntry, Manifest, FORMAT_VERSION};
use crate::quant::qnet::{
    conv_requantizers, gate_spec, se_out_requant, FusedActivation, QBlock, QConv, QDense, QNet, QOp, QPool, QResidual,
    QSqueezeExcite,
};
use crate::quant::requant::RequantMode;
use crate::quant::spec::QuantSpec;

fn to_i16(v: &[i32]) -> Vec<i16> {
    v.iter().map(|&x| x as i16).collect()
}

fn conv_tensors(e: &mut LayerEntry, c: &QConv, prefix: &str, blobs: &mut BlobWriter) {
    let gw = c.group_width();
    e.tensors.insert(
        format!("{prefix}weights"),
        blobs.add(format!("{}.weights", c.name), vec![c.m, gw, c.k, c.k], &to_i16(&c.weights)),
    );
    e.tensors
        .insert(format!("{prefix}bias"), blobs.add(format!("{}.bias", c.name), vec![c.m], &c.bias));
    e.quant.insert(format!("{prefix}weights"), c.w_spec.clone());
}

fn conv_entry(c: &QConv, block: usize, blobs: &mut BlobWriter) -> LayerEntry {
    let mut e = LayerEntry {
        name: c.name.clone(),
        block,
        kind: c.kind.as_str().to_string(),
        n: Some(c.n),
        m: Some(c.m),
        k: Some(c.k),
        stride: Some(c.stride),
        groups: Some(c.groups),
        activation: Some(c.activation.as_str().to_string()),
        ..LayerEntry::default()
    };
    conv_tensors(&mut e, c, "", blobs);
    e.quant.insert("input".into(), c.in_spec.clone());
    e.quant.insert("output".into(), c.out_spec.clone());
    e
}

fn op_entry(op: &QOp, block: usize, blobs: &mut BlobWriter) -> LayerEntry {
    let base = |kind: &str| LayerEntry {
        name: op.name().to_string(),
        block,
        kind: kind.to_string(),
        ..LayerEntry::default()
    };
    match op {
        QOp::Conv(c) => conv_entry(c, block, blobs),
        QOp::AvgPool(p) => {
            let mut e = base("avg_pool");
            e.channels = Some(p.channels);
            e.quant.insert("input".into(), p.spec.clone());
            e
        }
        QOp::SqueezeExcite(se) => {
            let mut e = base("squeeze_excite");
            e.channels = Some(se.channels);
            e.squeeze = Some(se.squeeze.m);
            conv_tensors(&mut e, &se.squeeze, "squeeze.", blobs);
            conv_tensors(&mut e, &se.excite, "excite.", blobs);
            e.quant.insert("squeeze.output".into(), se.squeeze.out_spec.clone());
            e.quant.insert("input".into(), se.in_spec.clone());
            e.quant.insert("output".into(), se.out_spec.clone());
            e
        }
        QOp::ResidualAdd(r) => {
            let mut e = base("residual_add");
            e.quant.insert("a".into(), r.a_spec.clone());
            e.quant.insert("b".into(), r.b_spec.clone());
            e.quant.insert("output".into(), r.out_spec.clone());
            e
        }
        QOp::Dense(d) => {
            let mut e = base("dense");
            e.n = Some(d.n);
            e.m = Some(d.m);
            e.tensors.insert(
                "weights".into(),
                blobs.add(format!("{}.weights", d.name), vec![d.m, d.n], &to_i16(&d.weights)),
            );
            e.tensors
                .insert("bias".into(), blobs.add(format!("{}.bias", d.name), vec![d.m], &d.bias));
            e.quant.insert("weights".into(), d.w_spec.clone());
            e.quant.insert("input".into(), d.in_spec.clone());
            e
        }
    }
}

pub fn to_qmanifest(q: &QNet, blobs: &mut BlobWriter) -> Manifest {
    let layers = q
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(bi, b)| b.ops.iter().map(move |op| (bi, op)))
        .map(|(bi, op)| op_entry(op, bi, blobs))
        .collect();
    Manifest {
        format_version: FORMAT_VERSION,
        arch_name: q.arch_name.clone(),
        alpha: q.alpha,
        input_resolution: q.input_resolution,
        input_channels: q.input_channels,
        requant_mode: Some(q.requant_mode.as_str().to_string()),
        input_quant: Some(q.input_spec.clone()),
        layers,
    }
}

struct Reader<'a> {
    dir: &'a Path,
    e: &'a LayerEntry,
}

impl Reader<'_> {
    fn field(&self, v: Option<usize>, f: &str) -> Result<usize> {
        v.ok_or_else(|| Error::Manifest(format!("layer {}: missing `{f}`", self.e.name)))
    }

    fn spec(&self, key: &str) -> Result<QuantSpec> {
        let s = self
            .e
            .quant
            .get(key)
            .ok_or_else(|| Error::Manifest(format!("layer {}: missing quant spec `{key}`", self.e.name)))?;
        s.validate()?;
        Ok(s.clone())
    }

    fn ints<T: crate::ir::manifest::BlobElem + Into<i32>>(&self, key: &str, len: usize) -> Result<Vec<i32>> {
        let r = self
            .e
            .tensors
            .get(key)
            .ok_or_else(|| Error::Manifest(format!("layer {}: missing tensor `{key}`", self.e.name)))?;
        let v: Vec<T> = read_blob(self.dir, r)?;
        if v.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "layer {}: `{key}` holds {} values, expected {len}",
                self.e.name,
                v.len()
            )));
        }
        Ok(v.into_iter().map(Into::into).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        name: String,
        kind: ConvKind,
        dims: [usize; 5],
        prefix: &str,
        in_spec: QuantSpec,
        out_spec: QuantSpec,
        act: FusedActivation,
        gate: bool,
        mode: RequantMode,
    ) -> Result<QConv> {
        let [n, m, k, stride, groups] = dims;
        if groups == 0 || n % groups != 0 || m % groups != 0 || k % 2 == 0 || stride == 0 {
            return Err(Error::Manifest(format!("layer {name}: inconsistent convolution geometry")));
        }
        let w_spec = self.spec(&format!("{prefix}weights"))?;
        let weights = self.ints::<i16>(&format!("{prefix}weights"), m * (n / groups) * k * k)?;
        let (lo, hi) = w_spec.domain();
        if let Some(v) = weights.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::Manifest(format!("layer {name}: weight {v} outside [{lo}, {hi}]")));
        }
        let bias = self.ints::<i32>(&format!("{prefix}bias"), m)?;
        let requant = conv_requantizers(m, &in_spec, &w_spec, &out_spec, act, gate, mode)?;
        Ok(QConv {
            name,
            kind,
            n,
            m,
            k,
            stride,
            groups,
            weights,
            w_spec,
            bias,
            in_spec,
            out_spec,
            requant,
            activation: act,
        })
    }
}

fn op_from_entry(dir: &Path, e: &LayerEntry, mode: RequantMode) -> Result<QOp> {
    let r = Reader { dir, e };
    let name = e.name.clone();
    Ok(match e.kind.as_str() {
        "normal_conv" | "depthwise_conv" | "pointwise_conv" => {
            let kind = match e.kind.as_str() {
                "normal_conv" => ConvKind::Normal,
                "depthwise_conv" => ConvKind::Depthwise,
                _ => ConvKind::Pointwise,
            };
            let act = FusedActivation::parse(e.activation.as_deref().unwrap_or("none"))?;
            let dims = [
                r.field(e.n, "n")?,
                r.field(e.m, "m")?,
                r.field(e.k, "k")?,
                r.field(e.stride, "stride")?,
                r.field(e.groups, "groups")?,
            ];
            QOp::Conv(r.conv(name, kind, dims, "", r.spec("input")?, r.spec("output")?, act, false, mode)?)
        }
        "avg_pool" => QOp::AvgPool(QPool {
            name,
            channels: r.field(e.channels, "channels")?,
            spec: r.spec("input")?,
        }),
        "squeeze_excite" => {
            let c = r.field(e.channels, "channels")?;
            let s = r.field(e.squeeze, "squeeze")?;
            let in_spec = r.spec("input")?;
            let sq_spec = r.spec("squeeze.output")?;
            let out_spec = r.spec("output")?;
            let squeeze = r.conv(
                format!("{name}.squeeze"),
                ConvKind::Pointwise,
                [c, s, 1, 1, 1],
                "squeeze.",
                in_spec.clone(),
                sq_spec.clone(),
                FusedActivation::Relu,
                false,
                mode,
            )?;
            let excite = r.conv(
                format!("{name}.excite"),
                ConvKind::Pointwise,
                [s, c, 1, 1, 1],
                "excite.",
                sq_spec,
                gate_spec(),
                FusedActivation::HardSigmoid,
                true,
                mode,
            )?;
            let out_requant = se_out_requant(&in_spec, &out_spec, mode)?;
            QOp::SqueezeExcite(QSqueezeExcite {
                name,
                channels: c,
                squeeze,
                excite,
                in_spec,
                out_spec,
                out_requant,
            })
        }
        "residual_add" => QOp::ResidualAdd(QResidual::new(name, r.spec("a")?, r.spec("b")?, r.spec("output")?)),
        "dense" => {
            let n = r.field(e.n, "n")?;
            let m = r.field(e.m, "m")?;
            QOp::Dense(QDense {
                name,
                n,
                m,
                weights: r.ints::<i16>("weights", n * m)?,
                w_spec: r.spec("weights")?,
                bias: r.ints::<i32>("bias", m)?,
                in_spec: r.spec("input")?,
            })
        }
        other => return Err(Error::Manifest(format!("layer {name}: unknown quantized kind `{other}`"))),
    })
}

pub fn qnet_from_manifest(m: &Manifest, dir: &Path) -> Result<QNet> {
    let mode = RequantMode::parse(m.requant_mode.as_deref().unwrap_or("fixed_point"))?;
    let input_spec = m
        .input_quant
        .clone()
        .ok_or_else(|| Error::Manifest("quantized manifest lacks `input_quant`".into()))?;
    input_spec.validate()?;
    let ops = m
        .layers
        .iter()
        .map(|e| Ok((e.block, op_from_entry(dir, e, mode)?)))
        .collect::<Result<Vec<_>>>()?;
    let blocks = group_blocks(ops)?.into_iter().map(|ops| QBlock { ops }).collect();
    let q = QNet {
        arch_name: m.arch_name.clone(),
        alpha: m.alpha,
        input_resolution: m.input_resolution,
        input_channels: m.input_channels,
        input_spec,
        requant_mode: mode,
        blocks,
    };
    q.block_shapes()?;
    Ok(q)
}

pub fn save_qnet(q: &QNet, manifest_path: &Path) -> Result<()> {
    let mut blobs = BlobWriter::default();
    let m = to_qmanifest(q, &mut blobs);
    let dir = manifest_dir(manifest_path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    blobs.write_all(&dir)?;
    fs::write(manifest_path, m.to_json()).map_err(|e| Error::io(manifest_path, e))
}

pub fn load_qnet(manifest_path: &Path) -> Result<QNet> {
    let m = Manifest::read(manifest_path)?;
    if m.input_quant.is_none() {
        return Err(Error::Manifest(format!(
            "{}: not a quantized model (no `input_quant`)",
            manifest_path.display()
        )));
    }
    qnet_from_manifest(&m, &manifest_dir(manifest_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::zoo;
    use crate::quant::bn::fuse_graph;
    use crate::quant::calibrate::{calibrate, random_dataset};
    use crate::quant::qnet::{quantize_network, QuantConfig};

    fn qnet(arch: &str) -> QNet {
        let g = fuse_graph(&zoo::by_name(arch, 1.0, 32, Some(2)).unwrap()).unwrap();
        let stats = calibrate(&g, &random_dataset(g.input_shape(), 2, 9)).unwrap();
        quantize_network(&g, &stats, &QuantConfig::default()).unwrap()
    }

    #[test]
    fn round_trip_restores_the_network() {
        let dir = tempfile::tempdir().unwrap();
        for arch in ["toy", "efficientnet_compressed"] {
            let q = qnet(arch);
            let path = dir.path().join(arch).join("q.json");
            save_qnet(&q, &path).unwrap();
            assert_eq!(load_qnet(&path).unwrap(), q);
        }
    }

    #[test]
    fn float_manifest_is_not_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        crate::ir::manifest::save_model(&zoo::toy(16, Some(1)).unwrap(), &path).unwrap();
        assert!(matches!(load_qnet(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn out_of_domain_weight_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = qnet("toy");
        if let QOp::Conv(c) = &mut q.blocks[1].ops[0] {
            c.weights[0] = 99;
        }
        let path = dir.path().join("q.json");
        save_qnet(&q, &path).unwrap();
        let err = load_qnet(&path).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }
}
