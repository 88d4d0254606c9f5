//! Circular adversarial patches trained over random placements.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_data, sign, AttackConfig, AttackKind, BatchSampler, Provenance, DEFAULT_PATCH_STEP, MAX_AREA_FRACTION,
};
use crate::autodiff::{Graph, UNCOVERED};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::{Architecture, SmallCnn};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

/// Random rotation, scale and translation applied to the patch per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformDist {
    /// Rotation is uniform in `[-max, max]` degrees.
    pub max_rotation_deg: f32,
    pub min_scale: f32,
    pub max_scale: f32,
    /// Pins the patch center (pixel coordinates) instead of sampling it.
    pub fixed_center: Option<[f32; 2]>,
}

impl Default for TransformDist {
    fn default() -> Self {
        Self {
            max_rotation_deg: 22.5,
            min_scale: 0.8,
            max_scale: 1.2,
            fixed_center: None,
        }
    }
}

impl TransformDist {
    /// No rotation, unit scale, patch centered at `center`.
    pub fn fixed(center: [f32; 2]) -> Self {
        Self {
            max_rotation_deg: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            fixed_center: Some(center),
        }
    }

    fn validate(&self, side: usize, h: usize, w: usize) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(Error::invalid("rotation range must be non-negative"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "scale range [{}, {}] is invalid",
                self.min_scale, self.max_scale
            )));
        }
        let radius = self.max_scale * side as f32 / 2.0;
        if 2.0 * radius > h.min(w) as f32 {
            return Err(Error::invalid(format!(
                "a {side}px patch at scale {} does not fit a {h}x{w} image",
                self.max_scale
            )));
        }
        if let Some([cx, cy]) = self.fixed_center {
            if cx < radius || cy < radius || cx > w as f32 - radius || cy > h as f32 - radius {
                return Err(Error::invalid("fixed patch center places the patch out of bounds"));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, side: usize, h: usize, w: usize) -> Placement {
        let angle = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg)
                .to_radians()
        } else {
            0.0
        };
        let scale = if self.max_scale > self.min_scale {
            rng.random_range(self.min_scale..=self.max_scale)
        } else {
            self.min_scale
        };
        let r = scale * side as f32 / 2.0;
        let (cx, cy) = match self.fixed_center {
            Some([cx, cy]) => (cx, cy),
            None => (uniform(rng, r, w as f32 - r), uniform(rng, r, h as f32 - r)),
        };
        Placement { angle, scale, cx, cy }
    }
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// One sampled transformation: rotation (radians), scale and center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub angle: f32,
    pub scale: f32,
    pub cx: f32,
    pub cy: f32,
}

/// Patch side length whose inscribed circle covers `area` of an `h x w` image.
pub fn patch_side(area: f32, h: usize, w: usize) -> usize {
    let side = 2.0 * (area as f64 * (h * w) as f64 / std::f64::consts::PI).sqrt();
    (side.round() as usize).max(1)
}

/// Patch-grid pixels whose centers lie inside the inscribed circle.
pub fn circular_mask(side: usize) -> Vec<bool> {
    let r = side as f64 / 2.0;
    (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 + 0.5 - r, (i % side) as f64 + 0.5 - r);
            x * x + y * y <= r * r
        })
        .collect()
}

/// Maps every pixel of an `h x w` image to the patch pixel covering it under
/// `p` (nearest neighbour, inverse mapping), or [`UNCOVERED`].
pub fn placement_map(p: &Placement, side: usize, mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    let half = side as f32 / 2.0;
    let radius = p.scale * half;
    let (sin, cos) = p.angle.sin_cos();
    let mut map = vec![UNCOVERED; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 + 0.5 - p.cx, y as f32 + 0.5 - p.cy);
            if dx * dx + dy * dy > radius * radius {
                continue;
            }
            let u = (cos * dx + sin * dy) / p.scale + half;
            let v = (-sin * dx + cos * dy) / p.scale + half;
            if u < 0.0 || v < 0.0 {
                continue;
            }
            let (iu, iv) = (u as usize, v as usize);
            if iu < side && iv < side && mask[iv * side + iu] {
                map[y * w + x] = (iv * side + iu) as u32;
            }
        }
    }
    map
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPerturbation {
    patch: Tensor,
    area_fraction: f32,
    transforms: TransformDist,
    provenance: Provenance,
}

impl PatchPerturbation {
    /// `patch` is `[C, S, S]`; pixels outside the circle are zeroed.
    pub fn new(patch: Tensor, area_fraction: f32, transforms: TransformDist, provenance: Provenance) -> Result<Self> {
        let s = patch.shape();
        if s.len() != 3 || s[1] != s[2] || s[1] == 0 {
            return Err(Error::shape("patch", s, &[0, 0, 0]));
        }
        if !(area_fraction > 0.0 && area_fraction <= MAX_AREA_FRACTION) {
            return Err(Error::invalid(format!(
                "patch area fraction must lie in (0, {MAX_AREA_FRACTION}], got {area_fraction}"
            )));
        }
        if patch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("patch pixels must lie in [0, 1]"));
        }
        let side = s[1];
        let mut patch = patch;
        let mask = circular_mask(side);
        for plane in patch.data_mut().chunks_exact_mut(side * side) {
            for (v, &m) in plane.iter_mut().zip(&mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        Ok(Self {
            patch,
            area_fraction,
            transforms,
            provenance,
        })
    }

    pub fn patch(&self) -> &Tensor {
        &self.patch
    }

    pub fn side(&self) -> usize {
        self.patch.shape()[1]
    }

    pub fn area_fraction(&self) -> f32 {
        self.area_fraction
    }

    pub fn transforms(&self) -> &TransformDist {
        &self.transforms
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Draws one placement per image from `seed`.
    pub fn sample_placements(&self, n: usize, h: usize, w: usize, seed: u64) -> Vec<Placement> {
        let mut rng = seeded(seed, Stream::Placement);
        (0..n)
            .map(|_| self.transforms.sample(&mut rng, self.side(), h, w))
            .collect()
    }

    /// Pastes the patch onto each image with the given placements.
    pub fn apply_placed(&self, images: &Tensor, placements: &[Placement]) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.patch.shape()[0] || placements.len() != s[0] {
            return Err(Error::shape("apply patch", s, self.patch.shape()));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        self.transforms.validate(self.side(), h, w)?;
        let mask = circular_mask(self.side());
        let plane = self.side() * self.side();
        let mut out = images.clone();
        let od = out.data_mut();
        for (img, p) in placements.iter().enumerate() {
            let map = placement_map(p, self.side(), &mask, h, w);
            for ch in 0..c {
                let dst = &mut od[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                let src = &self.patch.data()[ch * plane..(ch + 1) * plane];
                for (px, &m) in map.iter().enumerate() {
                    if m != UNCOVERED {
                        dst[px] = src[m as usize];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, images: &Tensor, seed: u64) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::shape("apply patch", s, &[0, 0, 0, 0]));
        }
        let placements = self.sample_placements(s[0], s[2], s[3], seed);
        self.apply_placed(images, &placements)
    }
}

fn check_patch_config(arch: &Architecture, cfg: &AttackConfig, transforms: &TransformDist) -> Result<usize> {
    let a = cfg.area_fraction;
    if !(a > 0.0 && a <= MAX_AREA_FRACTION) {
        return Err(Error::invalid(format!(
            "patch area fraction must lie in (0, {MAX_AREA_FRACTION}], got {a}"
        )));
    }
    let side = patch_side(a, arch.height, arch.width);
    transforms.validate(side, arch.height, arch.width)?;
    Ok(side)
}

/// Uniform random patch, as used before any optimization.
pub fn init_patch(arch: &Architecture, cfg: &AttackConfig, transforms: &TransformDist) -> Result<PatchPerturbation> {
    let side = check_patch_config(arch, cfg, transforms)?;
    let mut rng = seeded(cfg.seed, Stream::Patch);
    let patch = Tensor::from_fn(&[arch.channels, side, side], |_| rng.random::<f32>());
    PatchPerturbation::new(
        patch,
        cfg.area_fraction,
        transforms.clone(),
        Provenance::new(AttackKind::EotPatch, cfg),
    )
}

/// Targeted patch trained with a fresh placement per image per step.
pub fn eot_patch(
    model: &SmallCnn,
    data: &ImageBatch,
    cfg: &AttackConfig,
    transforms: &TransformDist,
) -> Result<PatchPerturbation> {
    let arch = *model.architecture();
    cfg.validate(arch.num_classes)?;
    check_data(model, data)?;
    if data.is_empty() {
        return Err(Error::invalid("attack data set is empty"));
    }
    let target = cfg
        .target
        .ok_or_else(|| Error::invalid("the patch attack needs a target class"))?;
    let init = init_patch(&arch, cfg, transforms)?;
    let side = init.side();
    let mask = circular_mask(side);
    let alpha = cfg.step_size.unwrap_or(DEFAULT_PATCH_STEP);
    let mut patch = init.patch.clone();
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, seeded(cfg.seed, Stream::Attack));
    let mut placement_rng = seeded(cfg.seed, Stream::Placement);
    let (h, w) = (arch.height, arch.width);
    for it in 0..cfg.iterations {
        let batch = data.select(&sampler.next_indices());
        let mut map = Vec::with_capacity(batch.len() * h * w);
        for _ in 0..batch.len() {
            let p = transforms.sample(&mut placement_rng, side, h, w);
            map.extend(placement_map(&p, side, &mask, h, w));
        }
        let mut g = Graph::new();
        let base = g.constant(batch.images().clone());
        let pv = g.variable(patch.clone());
        let input = g.composite(base, pv, map)?;
        let fwd = model.forward_graph(&mut g, input, false)?;
        let loss = g.softmax_cross_entropy(fwd.logits, &vec![target; batch.len()])?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "attack objective" });
        }
        let grads = g.backward(loss)?;
        let grad = grads.get(pv).expect("patch is a variable");
        for (v, gr) in patch.data_mut().iter_mut().zip(grad.data()) {
            *v = (*v - alpha * sign(*gr)).clamp(0.0, 1.0);
        }
        if it % 100 == 0 {
            log::debug!("iteration {it}: target loss {value:.5}");
        }
    }
    PatchPerturbation::new(
        patch,
        cfg.area_fraction,
        transforms.clone(),
        Provenance::new(AttackKind::EotPatch, cfg),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_excludes_corners() {
        let m = circular_mask(8);
        assert!(!m[0] && !m[7] && !m[56] && !m[63]);
        assert!(m[3 * 8 + 3]);
        assert_eq!(m.iter().filter(|&&b| b).count(), 52);
    }

    #[test]
    fn side_matches_circle_area() {
        let s = patch_side(0.16, 28, 28);
        let covered = circular_mask(s).iter().filter(|&&b| b).count() as f64;
        assert!((covered / 784.0 - 0.16).abs() < 0.03, "side {s}, covered {covered}");
        assert!(patch_side(0.25, 28, 28) <= 28);
    }

    #[test]
    fn placements_stay_inside_image() {
        let side = patch_side(0.25, 28, 28);
        let dist = TransformDist::default();
        dist.validate(side, 28, 28).unwrap();
        let mask = circular_mask(side);
        let mut rng = seeded(3, Stream::Placement);
        for _ in 0..200 {
            let p = dist.sample(&mut rng, side, 28, 28);
            let r = p.scale * side as f32 / 2.0;
            assert!(p.cx >= r && p.cx <= 28.0 - r && p.cy >= r && p.cy <= 28.0 - r);
            assert!(placement_map(&p, side, &mask, 28, 28).iter().any(|&m| m != UNCOVERED));
        }
    }

    #[test]
    fn fixed_unrotated_placement_copies_patch() {
        let p = Placement {
            angle: 0.0,
            scale: 1.0,
            cx: 6.0,
            cy: 5.0,
        };
        let map = placement_map(&p, 4, &circular_mask(4), 10, 10);
        // image (3, 4) is patch (0, 0), a corner outside the circle
        assert_eq!(map[3 * 10 + 4], UNCOVERED);
        assert_eq!(map[4 * 10 + 5], 5);
    }

    #[test]
    fn applying_twice_equals_once() {
        let cfg = AttackConfig {
            area_fraction: 0.1,
            seed: 1,
            ..AttackConfig::default()
        };
        let arch = Architecture::mnist();
        let p = init_patch(&arch, &cfg, &TransformDist::default()).unwrap();
        let images = Tensor::from_fn(&[3, 1, 28, 28], |i| (i % 5) as f32 / 4.0);
        let placements = p.sample_placements(3, 28, 28, 9);
        let once = p.apply_placed(&images, &placements).unwrap();
        let twice = p.apply_placed(&once, &placements).unwrap();
        assert_eq!(once, twice);
        assert_ne!(once, images);
    }

    #[test]
    fn oversized_area_rejected() {
        let cfg = AttackConfig {
            area_fraction: 0.3,
            target: Some(1),
            ..AttackConfig::default()
        };
        let err = init_patch(&Architecture::mnist(), &cfg, &TransformDist::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
