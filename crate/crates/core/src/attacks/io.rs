//! `UAPP` perturbation files.
//!
//! Layout: magic `UAPP`, `u16` version, kind (`u8`, 0 mask / 1 patch),
//! epsilon or area fraction (`f32`), shape, little-endian `f32` data, then a
//! JSON string holding the provenance (and the transformation distribution
//! for patches).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaskPerturbation, PatchPerturbation, Perturbation, Provenance, TransformDist};
use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::Result;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UAPP";
pub const PERTURBATION_VERSION: u16 = 1;

const KIND_MASK: u8 = 0;
const KIND_PATCH: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transforms: Option<TransformDist>,
}

impl Perturbation {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC, PERTURBATION_VERSION);
        let (kind, budget, tensor, transforms) = match self {
            Perturbation::Mask(m) => (KIND_MASK, m.epsilon(), m.delta(), None),
            Perturbation::Patch(p) => (KIND_PATCH, p.area_fraction(), p.patch(), Some(p.transforms().clone())),
        };
        w.u8(kind);
        w.f32(budget);
        w.shape(tensor.shape());
        w.floats(tensor.data());
        let trailer = Trailer {
            provenance: self.provenance().clone(),
            transforms,
        };
        w.str(&serde_json::to_string(&trailer)?);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, path, MAGIC, "perturbation", PERTURBATION_VERSION)?;
        let kind_offset = 6;
        let kind = r.u8()?;
        let budget = r.f32()?;
        let shape = r.shape()?;
        let data = r.floats(shape.iter().product())?;
        let tensor = Tensor::new(shape, data)?;
        let trailer: Trailer = serde_json::from_str(&r.str()?)?;
        r.finish()?;
        match kind {
            KIND_MASK => Ok(MaskPerturbation::new(tensor, budget, trailer.provenance)?.into()),
            KIND_PATCH => Ok(PatchPerturbation::new(
                tensor,
                budget,
                trailer.transforms.unwrap_or_default(),
                trailer.provenance,
            )?
            .into()),
            other => Err(unknown_kind(path, kind_offset, other)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

fn unknown_kind(path: &Path, offset: u64, kind: u8) -> crate::error::Error {
    crate::error::Error::Format {
        path: path.to_path_buf(),
        offset,
        message: format!("unknown perturbation kind {kind}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{init_patch, AttackConfig, AttackKind};
    use crate::error::Error;
    use crate::model::Architecture;

    #[test]
    fn mask_round_trip_is_byte_identical() {
        let cfg = AttackConfig::default();
        let delta = Tensor::from_fn(&[1, 4, 4], |i| (i as f32 - 8.0) / 400.0);
        let p: Perturbation = MaskPerturbation::new(delta, 0.02, Provenance::new(AttackKind::SgdUap, &cfg))
            .unwrap()
            .into();
        let bytes = p.to_bytes().unwrap();
        let back = Perturbation::from_bytes(&bytes, Path::new("p")).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"UAPP");
    }

    #[test]
    fn patch_round_trip_keeps_transforms() {
        let cfg = AttackConfig {
            area_fraction: 0.1,
            target: Some(3),
            ..AttackConfig::default()
        };
        let dist = TransformDist::fixed([14.0, 14.0]);
        let p: Perturbation = init_patch(&Architecture::mnist(), &cfg, &dist).unwrap().into();
        let back = Perturbation::from_bytes(&p.to_bytes().unwrap(), Path::new("p")).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn unknown_kind_and_version_rejected() {
        let cfg = AttackConfig::default();
        let p: Perturbation = MaskPerturbation::zeros([1, 2, 2], Provenance::new(AttackKind::SgdUap, &cfg)).into();
        let mut bytes = p.to_bytes().unwrap();
        bytes[6] = 7;
        assert!(matches!(
            Perturbation::from_bytes(&bytes, Path::new("p")),
            Err(Error::Format { offset: 6, .. })
        ));
        bytes[5] = 1;
        assert!(matches!(
            Perturbation::from_bytes(&bytes, Path::new("p")),
            Err(Error::Version { .. })
        ));
    }
}
