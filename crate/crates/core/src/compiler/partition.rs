//! Grouping of blocks into Head, Body, Tail and Classifier compute units.
//!
//! Matching is structural. An IRB's key is which of expansion, depthwise
//! and projection it contains; the Body is the longest contiguous run of
//! IRBs sharing one key (the first such run on ties). Everything before
//! the run is the Head. After it, plain pointwise and pooling blocks form
//! the Tail and dense blocks the Classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::shape::{BlockShape, OpRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuKind {
    Head,
    Body,
    Tail,
    Classifier,
}

impl CuKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CuKind::Head => "head",
            CuKind::Body => "body",
            CuKind::Tail => "tail",
            CuKind::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(CuKind::Head),
            "body" => Ok(CuKind::Body),
            "tail" => Ok(CuKind::Tail),
            "classifier" => Ok(CuKind::Classifier),
            other => Err(Error::Config(format!("unknown compute unit `{other}`"))),
        }
    }
}

/// Structural key of an IRB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockKey {
    pub expansion: bool,
    pub depthwise: bool,
    pub projection: bool,
}

impl BlockKey {
    pub fn of(b: &BlockShape) -> Option<Self> {
        b.is_irb.then(|| BlockKey {
            expansion: b.has_role(OpRole::PwExpand),
            depthwise: b.has_role(OpRole::Depthwise),
            projection: b.has_role(OpRole::PwProject),
        })
    }
}

/// One host-level call of a compute unit over a contiguous block range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub index: usize,
    pub cu: CuKind,
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub body_key: BlockKey,
    pub invocations: Vec<Invocation>,
}

impl Partition {
    pub fn count(&self, cu: CuKind) -> usize {
        self.invocations.iter().filter(|i| i.cu == cu).count()
    }
}

fn is_tail_block(b: &BlockShape) -> bool {
    !b.is_irb && !b.ops.is_empty() && b.ops.iter().all(|o| matches!(o.role, OpRole::Pointwise | OpRole::AvgPool))
}

fn is_classifier_block(b: &BlockShape) -> bool {
    !b.ops.is_empty() && b.ops.iter().all(|o| o.role == OpRole::Dense)
}

/// Maps every block to exactly one invocation. With `map_classifier`
/// false, dense blocks are left to the host and get no invocation.
pub fn partition(blocks: &[BlockShape], map_classifier: bool) -> Result<Partition> {
    let keys: Vec<Option<BlockKey>> = blocks.iter().map(BlockKey::of).collect();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < blocks.len() {
        let Some(key) = keys[i] else {
            i += 1;
            continue;
        };
        let mut j = i + 1;
        while j < blocks.len() && keys[j] == Some(key) {
            j += 1;
        }
        if best.is_none_or(|(s, e)| j - i > e - s) {
            best = Some((i, j));
        }
        i = j;
    }
    let (start, end) = best.ok_or_else(|| Error::Compile("no inverted residual block to map onto the Body".into()))?;
    let body_key = keys[start].expect("run starts at an IRB");

    let mut invocations = Vec::new();
    let mut push = |cu: CuKind, blocks: Vec<usize>| {
        let index = invocations.len();
        invocations.push(Invocation { index, cu, blocks });
    };
    if start > 0 {
        push(CuKind::Head, (0..start).collect());
    }
    for b in start..end {
        push(CuKind::Body, vec![b]);
    }
    let mut b = end;
    let tail_start = b;
    while b < blocks.len() && is_tail_block(&blocks[b]) {
        b += 1;
    }
    if b > tail_start {
        push(CuKind::Tail, (tail_start..b).collect());
    }
    let cls_start = b;
    while b < blocks.len() && is_classifier_block(&blocks[b]) {
        b += 1;
    }
    if b < blocks.len() {
        return Err(Error::Compile(format!(
            "block {b} ({}) matches no compute-unit template",
            blocks[b].ops.first().map(|o| o.name.as_str()).unwrap_or("empty")
        )));
    }
    if b > cls_start && map_classifier {
        push(CuKind::Classifier, (cls_start..b).collect());
    }
    Ok(Partition { body_key, invocations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::shape::{block_shapes, BitWidthMap};
    use crate::ir::zoo;

    fn shapes(arch: &str, alpha: f64, res: usize) -> Vec<BlockShape> {
        let g = zoo::by_name(arch, alpha, res, None).unwrap();
        block_shapes(&g, res, &BitWidthMap::deployment(&g, 4)).unwrap()
    }

    #[test]
    fn mobilenet_body_runs_sixteen_times() {
        for alpha in [1.0, 0.75, 0.5, 0.35] {
            let p = partition(&shapes("mobilenet_v2", alpha, 224), true).unwrap();
            assert_eq!(p.count(CuKind::Head), 1);
            assert_eq!(p.count(CuKind::Body), 16);
            assert_eq!(p.count(CuKind::Tail), 1);
            assert_eq!(p.count(CuKind::Classifier), 1);
            assert_eq!(p.invocations.len(), 19);
            // the head takes the stem and the expansion-free first IRB
            assert_eq!(p.invocations[0].blocks, vec![0, 1]);
        }
    }

    #[test]
    fn efficientnet_body_runs_nine_times_without_classifier() {
        let p = partition(&shapes("efficientnet_compressed", 1.0, 128), false).unwrap();
        assert_eq!(p.count(CuKind::Body), 9);
        assert_eq!(p.invocations.len(), 11);
    }

    #[test]
    fn toy_net_has_one_of_each() {
        let p = partition(&shapes("toy", 1.0, 16), true).unwrap();
        let kinds: Vec<CuKind> = p.invocations.iter().map(|i| i.cu).collect();
        assert_eq!(kinds, vec![CuKind::Head, CuKind::Body, CuKind::Tail, CuKind::Classifier]);
    }

    #[test]
    fn every_block_mapped_once_in_order() {
        let s = shapes("mobilenet_v2", 0.5, 96);
        let p = partition(&s, true).unwrap();
        let all: Vec<usize> = p.invocations.iter().flat_map(|i| i.blocks.iter().copied()).collect();
        assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
        assert!(p.invocations.iter().enumerate().all(|(i, inv)| inv.index == i));
    }

    #[test]
    fn stray_block_after_tail_is_rejected() {
        let mut s = shapes("toy", 1.0, 16);
        let irb = s[1].clone();
        s.push(irb);
        assert!(matches!(partition(&s, true), Err(Error::Compile(_))));
    }

    #[test]
    fn network_without_irb_is_rejected() {
        let s = shapes("toy", 1.0, 16);
        let plain: Vec<BlockShape> = s.into_iter().filter(|b| !b.is_irb).collect();
        assert!(partition(&plain, true).is_err());
    }
}
