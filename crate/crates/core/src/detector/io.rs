//! `UAPB` baseline files and JSON detector configs.
//!
//! Baseline layout: magic `UAPB`, `u16` version, layer name, aggregation
//! code (`u8`), `u32` channel count, `mu` then `sigma` as little-endian
//! `f32`, then a footer holding the `u64` sample count and the clean-set
//! fingerprint.

use std::path::Path;

use super::{ActivationBaseline, Aggregation, DetectorConfig};
use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UAPB";
pub const BASELINE_VERSION: u16 = 1;

impl ActivationBaseline {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, BASELINE_VERSION);
        w.str(self.layer.name());
        w.u8(self.kind.code());
        w.u32(self.mu.len() as u32);
        w.floats(&self.mu);
        w.floats(&self.sigma);
        w.u64(self.sample_count);
        w.str(&self.fingerprint);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, path, MAGIC, "baseline", BASELINE_VERSION)?;
        let layer = r.str()?.parse()?;
        let code = r.u8()?;
        let kind = Aggregation::from_code(code).ok_or_else(|| r.error(format!("unknown aggregation code {code}")))?;
        let d = r.u32()? as usize;
        let mu = r.floats(d)?;
        let sigma = r.floats(d)?;
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(r.error("baseline sigma must be positive and finite"));
        }
        let sample_count = r.u64()?;
        let fingerprint = r.str()?;
        r.finish()?;
        Ok(Self {
            layer,
            kind,
            mu,
            sigma,
            sample_count,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

impl DetectorConfig {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&read_file(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
