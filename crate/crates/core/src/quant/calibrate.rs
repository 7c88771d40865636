//! Min/max calibration of activation ranges.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::graph::NetworkGraph;
use crate::ir::tensor::{FloatTensor, Shape, Tensor};
use crate::quant::float_forward::forward_observed;

/// Running per-channel extrema of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl ChannelRange {
    fn observe(t: &FloatTensor) -> Self {
        let s = t.shape();
        let mut r = ChannelRange {
            min: vec![f32::INFINITY; s.c],
            max: vec![f32::NEG_INFINITY; s.c],
        };
        for c in 0..s.c {
            for &v in t.channel(c) {
                r.min[c] = r.min[c].min(v);
                r.max[c] = r.max[c].max(v);
            }
        }
        r
    }

    fn merge(&mut self, other: &ChannelRange) {
        for (a, b) in self.min.iter_mut().zip(&other.min) {
            *a = a.min(*b);
        }
        for (a, b) in self.max.iter_mut().zip(&other.max) {
            *a = a.max(*b);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub samples: usize,
    pub tensors: BTreeMap<String, ChannelRange>,
}

impl CalibrationStats {
    /// Joins two statistics; associative and commutative.
    pub fn merge(mut self, other: &CalibrationStats) -> Self {
        self.samples += other.samples;
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(r) => r.merge(v),
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
        self
    }

    /// Per-tensor range across all channels.
    pub fn range(&self, name: &str) -> Option<(f64, f64)> {
        let r = self.tensors.get(name)?;
        let mn = r.min.iter().fold(f32::INFINITY, |a, &b| a.min(b));
        let mx = r.max.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        Some((mn as f64, mx as f64))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("stats serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Calibration(e.to_string()))
    }
}

fn sample_stats(g: &NetworkGraph, x: &FloatTensor) -> Result<CalibrationStats> {
    let mut stats = CalibrationStats {
        samples: 1,
        tensors: BTreeMap::new(),
    };
    let mut nan = None;
    forward_observed(g, x, &mut |name, t| {
        if nan.is_none() && t.data().iter().any(|v| v.is_nan()) {
            nan = Some(name.to_string());
        }
        stats.tensors.insert(name.to_string(), ChannelRange::observe(t));
    })?;
    if let Some(name) = nan {
        return Err(Error::Calibration(format!("NaN encountered in activation `{name}`")));
    }
    Ok(stats)
}

/// Runs float forward passes over `dataset` (in parallel) and records exact
/// per-channel extrema of every activation tensor.
pub fn calibrate(g: &NetworkGraph, dataset: &[FloatTensor]) -> Result<CalibrationStats> {
    if dataset.is_empty() {
        return Err(Error::Calibration("empty calibration dataset".into()));
    }
    let per_sample = dataset.par_iter().map(|x| sample_stats(g, x)).collect::<Result<Vec<_>>>()?;
    Ok(per_sample
        .iter()
        .fold(CalibrationStats::default(), |acc, s| acc.merge(s)))
}

/// Seeded inputs uniform in `[-1, 1)`.
pub fn random_dataset(shape: Shape, count: usize, seed: u64) -> Vec<FloatTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let data = (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Tensor::new(shape, data).expect("length matches")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::zoo;
    use crate::quant::bn::fuse_graph;
    use crate::quant::float_forward::forward_observed;

    fn net() -> NetworkGraph {
        fuse_graph(&zoo::toy(16, Some(4)).unwrap()).unwrap()
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(calibrate(&net(), &[]), Err(Error::Calibration(_))));
    }

    #[test]
    fn nan_rejected() {
        let g = net();
        let mut x = random_dataset(g.input_shape(), 1, 0).pop().unwrap();
        x.data_mut()[5] = f32::NAN;
        let err = calibrate(&g, &[x]).unwrap_err();
        assert!(err.to_string().contains("NaN"), "{err}");
    }

    #[test]
    fn zero_input_gives_zero_post_relu6_at_stem() {
        let mut g = net();
        // zero the stem bias so a zero input stays zero through ReLU6
        if let crate::ir::layer::LayerKind::Conv(c) = &mut g.blocks[0].layers[0].kind {
            c.params.as_mut().unwrap().bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = Tensor::filled(g.input_shape(), 0.0f32);
        let s = calibrate(&g, &[x]).unwrap();
        assert_eq!(s.range("b0.conv_act"), Some((0.0, 0.0)));
    }

    #[test]
    fn two_samples_are_the_lattice_join() {
        let g = net();
        let d = random_dataset(g.input_shape(), 2, 7);
        let a = calibrate(&g, &d[..1]).unwrap();
        let b = calibrate(&g, &d[1..]).unwrap();
        let ab = calibrate(&g, &d).unwrap();
        for (k, r) in &ab.tensors {
            let (ra, rb) = (&a.tensors[k], &b.tensors[k]);
            for c in 0..r.min.len() {
                assert_eq!(r.min[c], ra.min[c].min(rb.min[c]));
                assert_eq!(r.max[c], ra.max[c].max(rb.max[c]));
            }
        }
        // idempotent on ranges
        assert_eq!(ab.clone().merge(&a).tensors, ab.tensors);
    }

    #[test]
    fn matches_brute_force_over_sixteen_samples() {
        let g = net();
        let d = random_dataset(g.input_shape(), 16, 21);
        let s = calibrate(&g, &d).unwrap();
        let mut all: BTreeMap<String, Vec<FloatTensor>> = BTreeMap::new();
        for x in &d {
            forward_observed(&g, x, &mut |n, t| all.entry(n.to_string()).or_default().push(t.clone())).unwrap();
        }
        assert_eq!(s.samples, 16);
        for (name, ts) in all {
            let r = &s.tensors[&name];
            for c in 0..ts[0].shape().c {
                let vals = ts.iter().flat_map(|t| t.channel(c).iter().copied());
                let (mn, mx) = vals.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                assert_eq!((r.min[c], r.max[c]), (mn, mx), "{name}[{c}]");
            }
        }
    }
}
