//! Pipeline configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compiler::knobs::{validate_overrides, KnobOverrides};
use crate::compiler::plan::{CompileOptions, DEFAULT_RESIDUAL_BUDGET_BITS};
use crate::compiler::resources::DeviceProfile;
use crate::error::{Error, Result};
use crate::kernel::pipeline::Driver;
use crate::quant::qnet::QuantConfig;
use crate::quant::requant::RequantMode;
use crate::quant::spec::{check_bw, Granularity, QuantMode};
use crate::runtime::exec::RunOptions;
use crate::runtime::perf::{PerfParams, DEFAULT_BYTES_PER_CYCLE, DEFAULT_FREQUENCY_HZ};

/// The only rounding mode the datapath implements.
pub const ROUNDING: &str = "half_away_from_zero";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub arch: String,
    pub alpha: f64,
    pub resolution: usize,
    pub bw: u8,
    pub first_conv_bw: u8,
    pub input_bw: u8,
    pub mode: QuantMode,
    pub granularity: Granularity,
    pub rounding: String,
    pub requant: RequantMode,
    /// Device profile file; the built-in XCZU9EG profile when absent.
    pub device: Option<PathBuf>,
    pub fifo_depth: Option<usize>,
    pub residual_budget_bits: u64,
    pub map_classifier: bool,
    pub frequency_hz: f64,
    pub bytes_per_cycle: u64,
    pub calibration_samples: usize,
    pub driver: Driver,
    /// `"<cu>.<slot>" = lanes`, capping a knob below its derived maximum.
    pub knob_overrides: KnobOverrides,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            arch: "mobilenet_v2".into(),
            alpha: 1.0,
            resolution: 224,
            bw: 4,
            first_conv_bw: 8,
            input_bw: 8,
            mode: QuantMode::Asymmetric,
            granularity: Granularity::PerChannel,
            rounding: ROUNDING.into(),
            requant: RequantMode::FixedPoint,
            device: None,
            fifo_depth: None,
            residual_budget_bits: DEFAULT_RESIDUAL_BUDGET_BITS,
            map_classifier: true,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            bytes_per_cycle: DEFAULT_BYTES_PER_CYCLE,
            calibration_samples: 8,
            driver: Driver::RoundRobin,
            knob_overrides: KnobOverrides::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if self.resolution == 0 {
            return bad("resolution must be positive".into());
        }
        for bw in [self.bw, self.first_conv_bw, self.input_bw] {
            check_bw(bw).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.rounding != ROUNDING {
            return bad(format!("rounding `{}` unsupported; only `{ROUNDING}`", self.rounding));
        }
        if self.fifo_depth == Some(0) {
            return bad("fifo_depth must be positive".into());
        }
        if !(self.frequency_hz > 0.0) || self.bytes_per_cycle == 0 {
            return bad("frequency_hz and bytes_per_cycle must be positive".into());
        }
        if self.calibration_samples == 0 {
            return bad("calibration_samples must be positive".into());
        }
        validate_overrides(&self.knob_overrides)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Relative device paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        if let (Some(dev), Some(dir)) = (&c.device, path.parent()) {
            if dev.is_relative() {
                c.device = Some(dir.join(dev));
            }
        }
        Ok(c)
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            bw: self.bw,
            first_conv_bw: self.first_conv_bw,
            input_bw: self.input_bw,
            mode: self.mode,
            granularity: self.granularity,
            requant: self.requant,
        }
    }

    pub fn device_profile(&self) -> Result<DeviceProfile> {
        match &self.device {
            Some(p) => DeviceProfile::load(p),
            None => Ok(DeviceProfile::xczu9eg()),
        }
    }

    pub fn compile_options(&self) -> Result<CompileOptions> {
        Ok(CompileOptions {
            device: self.device_profile()?,
            residual_budget_bits: self.residual_budget_bits,
            fifo_depth: self.fifo_depth,
            knob_overrides: self.knob_overrides.clone(),
            map_classifier: self.map_classifier,
        })
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            driver: self.driver,
            fifo_depth: self.fifo_depth,
            perf: PerfParams {
                frequency_hz: self.frequency_hz,
                bytes_per_cycle: self.bytes_per_cycle,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn full_config_round_trips() {
        let mut c = PipelineConfig {
            arch: "efficientnet_compressed".into(),
            alpha: 0.35,
            resolution: 128,
            mode: QuantMode::Symmetric,
            granularity: Granularity::PerLayer,
            device: Some("dev.toml".into()),
            fifo_depth: Some(64),
            driver: Driver::Threaded,
            requant: RequantMode::Real,
            ..PipelineConfig::default()
        };
        c.knob_overrides.insert("body.pw_expand".into(), 32);
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = PipelineConfig::from_toml("alpha = 0.5\nresolution = 96\n").unwrap();
        assert_eq!((c.alpha, c.resolution, c.bw, c.first_conv_bw), (0.5, 96, 4, 8));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for bad in [
            "alpha = 0.0",
            "alpha = 1.5",
            "bw = 1",
            "bw = 9",
            "rounding = \"truncate\"",
            "fifo_depth = 0",
            "frequency_hz = -1.0",
            "calibration_samples = 0",
            "colour = 3",
            "[knob_overrides]\n\"body.nope\" = 3",
            "[knob_overrides]\n\"body.depthwise\" = 0",
        ] {
            assert!(PipelineConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn relative_device_path_resolves_next_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("dev.toml"), "name = \"d\"\ndsp_count = 10\nbram_bits = 100\nlut_budget = 5\n").unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "device = \"dev.toml\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.device_profile().unwrap().dsp_count, 10);
        assert_eq!(c.compile_options().unwrap().device.name, "d");
    }
}
