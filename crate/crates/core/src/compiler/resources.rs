//! Device profiles and proxy resource estimates.
//!
//! One proxy DSP per multiply lane, no packing of narrow multiplies. BRAM
//! use is total buffer bits over device BRAM bits. LUTs are not modeled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub dsp_count: u64,
    pub bram_bits: u64,
    pub lut_budget: u64,
}

impl DeviceProfile {
    /// Zynq UltraScale+ XCZU9EG: 2520 DSP slices, 912 BRAM36 blocks
    /// (36 Kib each), 274,080 LUTs.
    pub fn xczu9eg() -> Self {
        DeviceProfile {
            name: "XCZU9EG".into(),
            dsp_count: 2520,
            bram_bits: 912 * 36 * 1024,
            lut_budget: 274_080,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dsp_count == 0 || self.bram_bits == 0 || self.lut_budget == 0 {
            return Err(Error::Config(format!("device {}: capacities must be positive", self.name)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: DeviceProfile = toml::from_str(text).map_err(|e| Error::Config(format!("device profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub device: String,
    pub multipliers: u64,
    pub dsp_fraction: f64,
    pub buffer_bits: u64,
    pub bram_fraction: f64,
    /// Always `"unmodeled"`.
    pub lut: String,
    pub feasible: bool,
    pub over_budget: Vec<String>,
}

pub fn estimate_resources(multipliers: u64, buffer_bits: u64, device: &DeviceProfile) -> ResourceReport {
    let dsp_fraction = multipliers as f64 / device.dsp_count as f64;
    let bram_fraction = buffer_bits as f64 / device.bram_bits as f64;
    let mut over_budget = Vec::new();
    if multipliers > device.dsp_count {
        over_budget.push(format!("DSP: {multipliers} multipliers > {} slices", device.dsp_count));
    }
    if buffer_bits > device.bram_bits {
        over_budget.push(format!("BRAM: {buffer_bits} bits > {} bits", device.bram_bits));
    }
    ResourceReport {
        device: device.name.clone(),
        multipliers,
        dsp_fraction,
        buffer_bits,
        bram_fraction,
        lut: "unmodeled".into(),
        feasible: over_budget.is_empty(),
        over_budget,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_profile_matches_builtin() {
        let text = include_str!("../../../../configs/xczu9eg.toml");
        assert_eq!(DeviceProfile::from_toml(text).unwrap(), DeviceProfile::xczu9eg());
    }

    #[test]
    fn zero_capacity_rejected() {
        let t = "name = \"x\"\ndsp_count = 0\nbram_bits = 1\nlut_budget = 1\n";
        assert!(DeviceProfile::from_toml(t).is_err());
    }

    #[test]
    fn empty_plan_uses_nothing() {
        let r = estimate_resources(0, 0, &DeviceProfile::xczu9eg());
        assert_eq!((r.dsp_fraction, r.bram_fraction, r.feasible), (0.0, 0.0, true));
    }

    #[test]
    fn over_budget_is_a_flag() {
        let r = estimate_resources(3000, 10, &DeviceProfile::xczu9eg());
        assert!(!r.feasible);
        assert_eq!(r.over_budget.len(), 1);
    }
}
