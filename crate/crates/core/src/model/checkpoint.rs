//! `UAPS` checkpoint files.
//!
//! Layout: magic `UAPS`, `u16` version, architecture string, training
//! metadata as a JSON string, `u32` parameter count, then per parameter its
//! name, shape and little-endian `f32` data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, SmallCnn};
use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::Result;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UAPS";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub train_samples: usize,
    pub train_fingerprint: String,
    /// Validation accuracy after each epoch.
    pub validation_accuracy: Vec<f64>,
    pub final_accuracy: Option<f64>,
    /// Filled in by callers that evaluate on the held-out test set.
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    model: SmallCnn,
    meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: SmallCnn, meta: TrainingMeta) -> Self {
        Self { model, meta }
    }

    pub fn model(&self) -> &SmallCnn {
        &self.model
    }

    pub fn into_model(self) -> SmallCnn {
        self.model
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut TrainingMeta {
        &mut self.meta
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC, CHECKPOINT_VERSION);
        w.str(&self.model.architecture().descriptor());
        w.str(&serde_json::to_string(&self.meta)?);
        w.u32(self.model.parameters().len() as u32);
        for (name, t) in self.model.named_parameters() {
            w.str(name);
            w.shape(t.shape());
            w.floats(t.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, path, MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let arch_offset = 6;
        let arch_str = r.str()?;
        let arch = Architecture::parse(&arch_str).map_err(|e| r.error_at(arch_offset, e.to_string()))?;
        let meta: TrainingMeta = serde_json::from_str(&r.str()?)?;
        let count = r.u32()? as usize;
        let expected = arch.parameter_shapes();
        if count != expected.len() {
            return Err(r.error(format!("expected {} parameters, found {count}", expected.len())));
        }
        let mut params = Vec::with_capacity(count);
        for (want_name, want_shape) in expected {
            let name = r.str()?;
            if name != want_name {
                return Err(r.error(format!("expected parameter `{want_name}`, found `{name}`")));
            }
            let shape = r.shape()?;
            if shape != want_shape {
                return Err(r.error(format!(
                    "parameter `{name}` has shape {shape:?}, expected {want_shape:?}"
                )));
            }
            let data = r.floats(shape.iter().product())?;
            params.push(Tensor::new(shape, data)?);
        }
        r.finish()?;
        Ok(Self {
            model: SmallCnn::from_parameters(arch, params)?,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> Checkpoint {
        let meta = TrainingMeta {
            seed: 3,
            epochs: 1,
            final_accuracy: Some(0.5),
            ..TrainingMeta::default()
        };
        Checkpoint::new(SmallCnn::init(Architecture::mnist(), 3), meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uaps");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for (a, b) in ckpt.model().parameters().iter().zip(back.model().parameters()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.meta(), ckpt.meta());
    }

    #[test]
    fn rejects_other_version_and_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, .. }), "{err}");
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
