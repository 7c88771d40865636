//! Parallelism knobs: per compute unit and multiplier slot, the largest
//! kernel size and input width over every mapped instance.
//!
//! Windowed slots (normal, depthwise) issue `K_max² · N_max` multiplies per
//! cycle; pointwise, squeeze, excite and dense slots issue `N_max`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compiler::partition::CuKind;
use crate::error::{Error, Result};
use crate::ir::shape::{OpRole, OpShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    NormalConv,
    Depthwise,
    PwExpand,
    PwProject,
    Pointwise,
    SeSqueeze,
    SeExcite,
    Dense,
}

impl Slot {
    pub fn as_str(&self) -> &'static str {
        match self {
            Slot::NormalConv => "normal_conv",
            Slot::Depthwise => "depthwise",
            Slot::PwExpand => "pw_expand",
            Slot::PwProject => "pw_project",
            Slot::Pointwise => "pointwise",
            Slot::SeSqueeze => "se_squeeze",
            Slot::SeExcite => "se_excite",
            Slot::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Slot::NormalConv,
            Slot::Depthwise,
            Slot::PwExpand,
            Slot::PwProject,
            Slot::Pointwise,
            Slot::SeSqueeze,
            Slot::SeExcite,
            Slot::Dense,
        ]
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown knob slot `{s}`")))
    }

    pub fn is_windowed(&self) -> bool {
        matches!(self, Slot::NormalConv | Slot::Depthwise)
    }
}

/// `(slot, K, N, MACs)` for each multiplier datapath an operator uses.
pub fn slot_uses(op: &OpShape) -> Vec<(Slot, usize, usize, u64)> {
    let n = op.input.c;
    let slot = match op.role {
        OpRole::NormalConv => Slot::NormalConv,
        OpRole::Depthwise => Slot::Depthwise,
        OpRole::PwExpand => Slot::PwExpand,
        OpRole::PwProject => Slot::PwProject,
        OpRole::Pointwise => Slot::Pointwise,
        OpRole::Dense => Slot::Dense,
        OpRole::SqueezeExcite => {
            let cs = (n * op.squeeze) as u64;
            return vec![(Slot::SeSqueeze, 1, n, cs), (Slot::SeExcite, 1, op.squeeze, cs)];
        }
        OpRole::AvgPool | OpRole::ResidualAdd => return Vec::new(),
    };
    vec![(slot, op.k, n, op.macs())]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knob {
    pub slot: Slot,
    pub k_max: usize,
    pub n_max: usize,
    /// Input lanes actually built: `n_max` unless overridden lower.
    pub lanes: usize,
    pub parallel_ops: u64,
    pub instances: usize,
}

impl Knob {
    fn compute_parallel_ops(&mut self) {
        let lanes = self.lanes as u64;
        self.parallel_ops = if self.slot.is_windowed() {
            (self.k_max * self.k_max) as u64 * lanes
        } else {
            lanes
        };
    }
}

/// Overrides keyed `"<cu>.<slot>"`, each capping a slot's lanes.
pub type KnobOverrides = BTreeMap<String, usize>;

pub fn validate_overrides(overrides: &KnobOverrides) -> Result<()> {
    for (key, &v) in overrides {
        let (cu, slot) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("knob override `{key}` is not `<cu>.<slot>`")))?;
        CuKind::parse(cu)?;
        Slot::parse(slot)?;
        if v == 0 {
            return Err(Error::Config(format!("knob override `{key}` must be positive")));
        }
    }
    Ok(())
}

/// Knobs of one compute unit from all operator instances mapped to it.
pub fn derive_knobs<'a>(cu: CuKind, ops: impl IntoIterator<Item = &'a OpShape>, overrides: &KnobOverrides) -> Vec<Knob> {
    let mut by_slot: BTreeMap<Slot, Knob> = BTreeMap::new();
    for op in ops {
        for (slot, k, n, _) in slot_uses(op) {
            let e = by_slot.entry(slot).or_insert(Knob {
                slot,
                k_max: 0,
                n_max: 0,
                lanes: 0,
                parallel_ops: 0,
                instances: 0,
            });
            e.k_max = e.k_max.max(k);
            e.n_max = e.n_max.max(n);
            e.instances += 1;
        }
    }
    by_slot
        .into_values()
        .map(|mut k| {
            let cap = overrides.get(&format!("{}.{}", cu.as_str(), k.slot.as_str()));
            k.lanes = cap.map_or(k.n_max, |&c| c.min(k.n_max));
            k.compute_parallel_ops();
            k
        })
        .collect()
}

/// Scales every knob's lanes by `factor` (used for what-if comparisons).
pub fn scale_lanes(knobs: &mut [Knob], factor: usize) {
    for k in knobs {
        k.lanes *= factor;
        k.compute_parallel_ops();
    }
}

pub fn knob(knobs: &[Knob], slot: Slot) -> Option<&Knob> {
    knobs.iter().find(|k| k.slot == slot)
}

/// Cycles an operator needs on a unit with `knobs`: `ceil(MACs / parallel
/// ops)` per slot. Gating, pooling and residual adds move one pixel per
/// cycle.
pub fn op_cycles(op: &OpShape, knobs: &[Knob]) -> Result<u64> {
    let mut cycles = 0u64;
    for (slot, k, n, macs) in slot_uses(op) {
        let kn = knob(knobs, slot).ok_or_else(|| Error::Compile(format!("{}: no {} slot", op.name, slot.as_str())))?;
        if k > kn.k_max || n > kn.n_max {
            return Err(Error::Compile(format!("{}: exceeds the {} knob", op.name, slot.as_str())));
        }
        cycles += macs.div_ceil(kn.parallel_ops.max(1));
    }
    if matches!(op.role, OpRole::SqueezeExcite | OpRole::AvgPool | OpRole::ResidualAdd) {
        cycles += op.input.pixels() as u64;
    }
    Ok(cycles)
}
