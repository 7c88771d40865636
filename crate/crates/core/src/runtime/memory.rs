//! Flat DDR model shared by host and compute units.

use crate::compiler::codec::encode;
use crate::compiler::schedule::{MemoryLayout, RegionKind, Schedule};
use crate::error::{Error, Result};
use crate::quant::qnet::{QNet, QOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccessCounters {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub reads: u64,
    pub writes: u64,
}

/// Byte image laid out by a [`MemoryLayout`]. Every access names a region
/// and must stay inside it; reads of never-written bytes are errors.
/// Parameter regions become read-only once the host seals the image.
#[derive(Debug, Clone)]
pub struct SharedMemoryImage {
    layout: MemoryLayout,
    bytes: Vec<u8>,
    written: Vec<u64>,
    sealed: bool,
    counters: AccessCounters,
}

impl SharedMemoryImage {
    pub fn new(layout: MemoryLayout) -> Result<Self> {
        layout.check()?;
        let n = layout.total_bytes;
        Ok(SharedMemoryImage {
            layout,
            bytes: vec![0; n],
            written: vec![0; n.div_ceil(64)],
            sealed: false,
            counters: AccessCounters::default(),
        })
    }

    /// Host initialization: writes every operator's encoded parameters
    /// into its regions and seals them.
    pub fn initialize(schedule: &Schedule, q: &QNet) -> Result<Self> {
        let mut mem = Self::new(schedule.layout.clone())?;
        let params = schedule
            .invocations
            .iter()
            .flat_map(|i| i.params.iter())
            .chain(schedule.host_blocks.iter().flat_map(|b| b.params.iter()));
        let ops: Vec<&QOp> = q.ops().collect();
        let mut n = 0;
        for (p, op) in params.zip(ops.iter()) {
            if p.op != op.name() {
                return Err(Error::Runtime(format!("schedule names {} where the QNet has {}", p.op, op.name())));
            }
            let e = encode(op, q.requant_mode);
            mem.write_param(p.weights, &e.weights, &p.op)?;
            mem.write_param(p.bias, &e.bias, &p.op)?;
            mem.write_param(p.quant, &e.quant, &p.op)?;
            n += 1;
        }
        if n != ops.len() {
            return Err(Error::Runtime(format!("schedule covers {n} operators, QNet has {}", ops.len())));
        }
        mem.seal();
        Ok(mem)
    }

    fn write_param(&mut self, region: Option<usize>, data: &[u8], op: &str) -> Result<()> {
        match region {
            Some(r) => self.write(r, 0, data),
            None if data.is_empty() => Ok(()),
            None => Err(Error::Runtime(format!("{op}: {} parameter bytes have no region", data.len()))),
        }
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn counters(&self) -> AccessCounters {
        self.counters
    }

    fn span(&self, region: usize, offset: usize, len: usize) -> Result<(usize, usize)> {
        let r = self
            .layout
            .regions
            .get(region)
            .ok_or_else(|| Error::Memory(format!("no region {region}")))?;
        if offset + len > r.len {
            return Err(Error::Memory(format!(
                "access [{offset}, {}) overflows region {} of {} bytes",
                offset + len,
                r.name,
                r.len
            )));
        }
        Ok((r.offset + offset, r.offset + offset + len))
    }

    fn is_written(&self, i: usize) -> bool {
        self.written[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn write(&mut self, region: usize, offset: usize, data: &[u8]) -> Result<()> {
        let (a, b) = self.span(region, offset, data.len())?;
        if self.sealed && self.layout.regions[region].kind != RegionKind::Feature {
            return Err(Error::Memory(format!("region {} is read-only", self.layout.regions[region].name)));
        }
        self.bytes[a..b].copy_from_slice(data);
        for i in a..b {
            self.written[i / 64] |= 1 << (i % 64);
        }
        self.counters.writes += 1;
        self.counters.bytes_written += data.len() as u64;
        Ok(())
    }

    pub fn read(&mut self, region: usize, offset: usize, len: usize) -> Result<&[u8]> {
        let (a, b) = self.span(region, offset, len)?;
        if let Some(i) = (a..b).find(|&i| !self.is_written(i)) {
            return Err(Error::Memory(format!(
                "read of uninitialized byte {} in region {}",
                i - self.layout.regions[region].offset,
                self.layout.regions[region].name
            )));
        }
        self.counters.reads += 1;
        self.counters.bytes_read += len as u64;
        Ok(&self.bytes[a..b])
    }

    /// Reads a parameter region, or nothing for an absent one.
    pub fn read_param(&mut self, region: Option<usize>) -> Result<Vec<u8>> {
        match region {
            Some(r) => {
                let len = self.layout.regions[r].len;
                Ok(self.read(r, 0, len)?.to_vec())
            }
            None => Ok(Vec::new()),
        }
    }
}

/// Feature elements are unsigned and at most 8 bits wide: one byte each.
pub fn features_to_bytes(data: &[i32]) -> Result<Vec<u8>> {
    data.iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::Memory(format!("feature element {v} does not fit a byte"))))
        .collect()
}

pub fn bytes_to_features(bytes: &[u8]) -> Vec<i32> {
    bytes.iter().map(|&b| b as i32).collect()
}

pub fn logits_to_bytes(data: &[i32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_logits(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::schedule::Region;

    fn layout() -> MemoryLayout {
        MemoryLayout {
            regions: vec![
                Region {
                    name: "w".into(),
                    kind: RegionKind::Weights,
                    offset: 0,
                    len: 8,
                    live: [0, 1],
                },
                Region {
                    name: "f".into(),
                    kind: RegionKind::Feature,
                    offset: 64,
                    len: 16,
                    live: [0, 1],
                },
            ],
            total_bytes: 128,
        }
    }

    #[test]
    fn accesses_stay_inside_regions() {
        let mut m = SharedMemoryImage::new(layout()).unwrap();
        m.write(1, 0, &[1; 16]).unwrap();
        assert!(m.write(1, 8, &[1; 9]).is_err());
        assert!(m.read(1, 10, 7).is_err());
        assert_eq!(m.read(1, 4, 4).unwrap(), &[1; 4]);
        assert!(m.read(7, 0, 1).is_err());
    }

    #[test]
    fn unwritten_bytes_cannot_be_read() {
        let mut m = SharedMemoryImage::new(layout()).unwrap();
        m.write(1, 0, &[3; 4]).unwrap();
        assert!(m.read(1, 0, 4).is_ok());
        assert!(matches!(m.read(1, 0, 5), Err(Error::Memory(_))));
    }

    #[test]
    fn sealed_params_are_read_only() {
        let mut m = SharedMemoryImage::new(layout()).unwrap();
        m.write(0, 0, &[9; 8]).unwrap();
        m.seal();
        assert!(m.write(0, 0, &[0]).is_err());
        m.write(1, 0, &[0]).unwrap();
        assert_eq!(m.read(0, 0, 8).unwrap(), &[9; 8]);
        let c = m.counters();
        assert_eq!((c.writes, c.bytes_written, c.reads, c.bytes_read), (2, 9, 1, 8));
    }

    #[test]
    fn element_codecs() {
        assert_eq!(bytes_to_features(&features_to_bytes(&[0, 15, 255]).unwrap()), vec![0, 15, 255]);
        assert!(features_to_bytes(&[256]).is_err());
        assert!(features_to_bytes(&[-1]).is_err());
        let l = vec![-5, 0, i32::MAX];
        assert_eq!(bytes_to_logits(&logits_to_bytes(&l)), l);
    }
}
