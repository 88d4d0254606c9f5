//! Universal perturbation generators.
//!
//! Mask attacks share one loop: sample a batch, take the gradient of the
//! objective with respect to the shared perturbation, step by `alpha` in the
//! direction of its sign, and project back onto the `epsilon` ball. Perturbed
//! images are clipped to `[0, 1]` inside the graph.

mod io;
mod patch;
mod perlin;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::PERTURBATION_VERSION;
pub use patch::{
    circular_mask, eot_patch, init_patch, patch_side, placement_map, PatchPerturbation, Placement, TransformDist,
};
pub use perlin::{
    perlin_field, perlin_mask, perlin_noise, perlin_uap, random_sign_mask, Lattice, PerlinGrid, PerlinParams,
    PerlinSearch, PerlinTrial,
};

use crate::autodiff::{Graph, NodeId};
use crate::data::ImageBatch;
use crate::detector::{ActivationBaseline, Aggregation};
use crate::error::{Error, Result};
use crate::model::{GraphForward, SmallCnn, TapLayer};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

/// Largest patch area as a fraction of the image.
pub const MAX_AREA_FRACTION: f32 = 0.25;

/// Default sign-step size for patch pixels.
pub const DEFAULT_PATCH_STEP: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L-infinity bound on the `[0, 1]` pixel scale.
    pub epsilon: f32,
    /// Patch area as a fraction of the image.
    pub area_fraction: f32,
    /// Sign-step size; masks default to `epsilon / 10`.
    pub step_size: Option<f32>,
    pub iterations: usize,
    pub batch_size: usize,
    pub target: Option<usize>,
    pub layer: Option<TapLayer>,
    /// Weight of the baseline penalty in the defense-aware attack.
    pub lambda: f32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 10.0 / 255.0,
            area_fraction: 0.16,
            step_size: None,
            iterations: 500,
            batch_size: 32,
            target: None,
            layer: None,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::invalid(format!("step size must be positive, got {a}")));
            }
        }
        if let Some(t) = self.target {
            if t >= num_classes {
                return Err(Error::invalid(format!(
                    "target class {t} out of range for {num_classes} classes"
                )));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        Ok(())
    }

    fn validate_epsilon(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn mask_step(&self) -> f32 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    SgdUap,
    SgdLayer,
    Perlin,
    EotPatch,
    BaselineFeature,
    RandomSign,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::SgdUap => "sgd_uap",
            AttackKind::SgdLayer => "sgd_layer",
            AttackKind::Perlin => "perlin",
            AttackKind::EotPatch => "eot_patch",
            AttackKind::BaselineFeature => "baseline_feature",
            AttackKind::RandomSign => "random_sign",
        }
    }
}

/// Where a perturbation came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub attack: AttackKind,
    pub config: AttackConfig,
    /// Attack-specific extras such as the chosen noise parameters.
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Provenance {
    pub fn new(attack: AttackKind, config: &AttackConfig) -> Self {
        Self {
            attack,
            config: config.clone(),
            details: serde_json::Value::Null,
        }
    }
}

/// A full-image additive perturbation bounded by `epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPerturbation {
    delta: Tensor,
    epsilon: f32,
    provenance: Provenance,
}

impl MaskPerturbation {
    /// `delta` has the image shape `[C, H, W]`.
    pub fn new(delta: Tensor, epsilon: f32, provenance: Provenance) -> Result<Self> {
        if delta.rank() != 3 {
            return Err(Error::shape("mask perturbation", delta.shape(), &[0, 0, 0]));
        }
        if !delta.all_finite() || delta.max_abs() > epsilon {
            return Err(Error::invalid(format!(
                "perturbation exceeds its bound: max |delta| = {} > {epsilon}",
                delta.max_abs()
            )));
        }
        Ok(Self {
            delta,
            epsilon,
            provenance,
        })
    }

    pub fn zeros(shape: [usize; 3], provenance: Provenance) -> Self {
        Self {
            delta: Tensor::zeros(&shape),
            epsilon: 0.0,
            provenance,
        }
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// `clip(x + delta, 0, 1)` for every image.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != *self.delta.shape() {
            return Err(Error::shape("apply mask", s, self.delta.shape()));
        }
        let d = self.delta.data();
        let mut out = images.clone();
        for img in out.data_mut().chunks_exact_mut(d.len()) {
            for (v, a) in img.iter_mut().zip(d) {
                *v = (*v + a).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation {
    Mask(MaskPerturbation),
    Patch(PatchPerturbation),
}

impl Perturbation {
    /// Perturbs every image. Patches draw one placement per image from
    /// `seed`; masks ignore it.
    pub fn apply(&self, images: &Tensor, seed: u64) -> Result<Tensor> {
        match self {
            Perturbation::Mask(m) => m.apply(images),
            Perturbation::Patch(p) => p.apply(images, seed),
        }
    }

    pub fn provenance(&self) -> &Provenance {
        match self {
            Perturbation::Mask(m) => m.provenance(),
            Perturbation::Patch(p) => p.provenance(),
        }
    }

    /// Epsilon for masks, area fraction for patches.
    pub fn budget(&self) -> f32 {
        match self {
            Perturbation::Mask(m) => m.epsilon(),
            Perturbation::Patch(p) => p.area_fraction(),
        }
    }

    pub fn is_patch(&self) -> bool {
        matches!(self, Perturbation::Patch(_))
    }
}

impl From<MaskPerturbation> for Perturbation {
    fn from(m: MaskPerturbation) -> Self {
        Perturbation::Mask(m)
    }
}

impl From<PatchPerturbation> for Perturbation {
    fn from(p: PatchPerturbation) -> Self {
        Perturbation::Patch(p)
    }
}

/// Endless shuffled pass over a dataset, reshuffled every epoch.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, size: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            size: size.min(len),
            rng,
        }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clean images plus `delta`, clipped to `[0, 1]`, returned as the input node.
fn perturbed_input(g: &mut Graph, images: &Tensor, delta: NodeId) -> Result<NodeId> {
    let x = g.constant(images.clone());
    let sum = g.add_broadcast(x, delta)?;
    Ok(g.clamp(sum, 0.0, 1.0))
}

/// Projected sign-gradient loop over a shared mask.
fn mask_loop<F>(
    model: &SmallCnn,
    data: &ImageBatch,
    cfg: &AttackConfig,
    ascend: bool,
    mut objective: F,
) -> Result<Tensor>
where
    F: FnMut(&mut Graph, &GraphForward, &ImageBatch) -> Result<NodeId>,
{
    let shape = model.architecture().image_shape();
    let mut delta = Tensor::zeros(&shape);
    if cfg.epsilon == 0.0 {
        return Ok(delta);
    }
    if data.is_empty() {
        return Err(Error::invalid("attack data set is empty"));
    }
    let alpha = cfg.mask_step();
    let eps = cfg.epsilon;
    let dir = if ascend { 1.0 } else { -1.0 };
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, seeded(cfg.seed, Stream::Attack));
    for it in 0..cfg.iterations {
        let batch = data.select(&sampler.next_indices());
        let mut g = Graph::new();
        let d = g.variable(delta.clone());
        let input = perturbed_input(&mut g, batch.images(), d)?;
        let fwd = model.forward_graph(&mut g, input, false)?;
        let loss = objective(&mut g, &fwd, &batch)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "attack objective" });
        }
        let grads = g.backward(loss)?;
        let grad = grads.get(d).expect("delta is a variable");
        for (v, gr) in delta.data_mut().iter_mut().zip(grad.data()) {
            *v = (*v + dir * alpha * sign(*gr)).clamp(-eps, eps);
        }
        if it % 100 == 0 {
            log::debug!("iteration {it}: objective {value:.5}");
        }
    }
    Ok(delta)
}

fn check_data(model: &SmallCnn, data: &ImageBatch) -> Result<()> {
    let arch = model.architecture();
    if data.image_shape() != arch.image_shape() {
        return Err(Error::shape("attack data", &data.image_shape(), &arch.image_shape()));
    }
    if data.num_classes() != arch.num_classes {
        return Err(Error::invalid("attack data and model disagree on the class count"));
    }
    Ok(())
}

/// Untargeted mode ascends the cross-entropy of the true labels; with a
/// target it descends the cross-entropy toward that class.
pub fn sgd_uap(model: &SmallCnn, data: &ImageBatch, cfg: &AttackConfig) -> Result<MaskPerturbation> {
    cfg.validate(model.architecture().num_classes)?;
    cfg.validate_epsilon()?;
    check_data(model, data)?;
    let target = cfg.target;
    let delta = mask_loop(model, data, cfg, target.is_none(), |g, fwd, batch| {
        let labels = match target {
            Some(t) => vec![t; batch.len()],
            None => batch.labels().to_vec(),
        };
        g.softmax_cross_entropy(fwd.logits, &labels)
    })?;
    MaskPerturbation::new(delta, cfg.epsilon, Provenance::new(AttackKind::SgdUap, cfg))
}

/// Maximizes the summed squared activations of the configured tap layer.
pub fn sgd_layer(model: &SmallCnn, data: &ImageBatch, cfg: &AttackConfig) -> Result<MaskPerturbation> {
    cfg.validate(model.architecture().num_classes)?;
    cfg.validate_epsilon()?;
    check_data(model, data)?;
    let layer = cfg
        .layer
        .ok_or_else(|| Error::invalid("the layer attack needs a target layer"))?;
    let delta = mask_loop(model, data, cfg, true, |g, fwd, _| {
        let tap = fwd.taps[layer.index()];
        let sq = g.mul(tap, tap)?;
        g.sum(sq)
    })?;
    MaskPerturbation::new(delta, cfg.epsilon, Provenance::new(AttackKind::SgdLayer, cfg))
}

/// Ascends `CE - lambda * sum_j relu(A_j - mu_j)` (batch means) at the
/// baseline's layer and aggregation, trading universality for stealth.
pub fn baseline_feature_uap(
    model: &SmallCnn,
    data: &ImageBatch,
    baseline: Option<&ActivationBaseline>,
    cfg: &AttackConfig,
) -> Result<MaskPerturbation> {
    cfg.validate(model.architecture().num_classes)?;
    cfg.validate_epsilon()?;
    check_data(model, data)?;
    let baseline = baseline.ok_or_else(|| Error::invalid("the defense-aware attack needs a baseline"))?;
    let d = model.architecture().tap_shape(baseline.layer)[2];
    if baseline.dim() != d {
        return Err(Error::shape("baseline", &[baseline.dim()], &[d]));
    }
    let neg_mu = Tensor::new(vec![d], baseline.mu.iter().map(|m| -m).collect())?;
    let lambda = cfg.lambda;
    let delta = mask_loop(model, data, cfg, true, |g, fwd, batch| {
        let ce = g.softmax_cross_entropy(fwd.logits, batch.labels())?;
        let tap = fwd.taps[baseline.layer.index()];
        let agg = match baseline.kind {
            Aggregation::Mean => g.spatial_mean(tap)?,
            Aggregation::Std => g.spatial_std(tap)?,
        };
        let mu = g.constant(neg_mu.clone());
        let excess = g.add_broadcast(agg, mu)?;
        let excess = g.relu(excess);
        let total = g.sum(excess)?;
        let penalty = g.scale(total, lambda / batch.len() as f32)?;
        g.sub(ce, penalty)
    })?;
    let mut prov = Provenance::new(AttackKind::BaselineFeature, cfg);
    prov.details = serde_json::json!({
        "layer": baseline.layer,
        "aggregation": baseline.kind,
    });
    MaskPerturbation::new(delta, cfg.epsilon, prov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn setup() -> (SmallCnn, ImageBatch) {
        let arch = Architecture::new(1, 16, 16, 3).unwrap();
        let model = SmallCnn::init(arch, 1);
        let images = Tensor::from_fn(&[6, 1, 16, 16], |i| ((i * 7919) % 97) as f32 / 96.0);
        let batch = ImageBatch::new(images, vec![0, 1, 2, 0, 1, 2], (0..6).collect(), 3).unwrap();
        (model, batch)
    }

    #[test]
    fn zero_epsilon_gives_zero_mask() {
        let (model, data) = setup();
        let cfg = AttackConfig {
            epsilon: 0.0,
            iterations: 3,
            ..AttackConfig::default()
        };
        let m = sgd_uap(&model, &data, &cfg).unwrap();
        assert!(m.delta().data().iter().all(|&v| v == 0.0));
        let cfg = AttackConfig {
            layer: Some(TapLayer::Conv2),
            ..cfg
        };
        assert_eq!(sgd_layer(&model, &data, &cfg).unwrap().delta().max_abs(), 0.0);
    }

    #[test]
    fn negative_epsilon_rejected() {
        let (model, data) = setup();
        let cfg = AttackConfig {
            epsilon: -0.1,
            ..AttackConfig::default()
        };
        assert!(matches!(sgd_uap(&model, &data, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_full_step_is_signed_gradient() {
        let (model, data) = setup();
        let eps = 0.1;
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: Some(eps),
            iterations: 1,
            batch_size: data.len(),
            ..AttackConfig::default()
        };
        let m = sgd_uap(&model, &data, &cfg).unwrap();

        let mut g = Graph::new();
        let d = g.variable(Tensor::zeros(&[1, 16, 16]));
        let input = perturbed_input(&mut g, data.images(), d).unwrap();
        let fwd = model.forward_graph(&mut g, input, false).unwrap();
        let loss = g.softmax_cross_entropy(fwd.logits, data.labels()).unwrap();
        let grads = g.backward(loss).unwrap();
        let expected: Vec<f32> = grads.get(d).unwrap().data().iter().map(|&v| eps * sign(v)).collect();
        assert_eq!(m.delta().data(), expected.as_slice());
    }

    #[test]
    fn projection_holds_and_runs_are_reproducible() {
        let (model, data) = setup();
        let cfg = AttackConfig {
            epsilon: 0.05,
            step_size: Some(0.03),
            iterations: 8,
            batch_size: 4,
            target: Some(2),
            seed: 5,
            ..AttackConfig::default()
        };
        let a = sgd_uap(&model, &data, &cfg).unwrap();
        let b = sgd_uap(&model, &data, &cfg).unwrap();
        assert!(a.delta().max_abs() <= 0.05);
        assert_eq!(a, b);
        let applied = a.apply(data.images()).unwrap();
        assert!(applied.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_lambda_matches_plain_attack() {
        let (model, data) = setup();
        let cfg = AttackConfig {
            epsilon: 0.08,
            iterations: 6,
            batch_size: 4,
            lambda: 0.0,
            seed: 2,
            ..AttackConfig::default()
        };
        let baseline = crate::detector::fit_baseline(&model, &data, TapLayer::Conv3, Aggregation::Mean).unwrap();
        let plain = sgd_uap(&model, &data, &cfg).unwrap();
        let aware = baseline_feature_uap(&model, &data, Some(&baseline), &cfg).unwrap();
        assert_eq!(plain.delta(), aware.delta());
        assert!(baseline_feature_uap(&model, &data, None, &cfg).is_err());
    }

    #[test]
    fn sampler_cycles_through_every_index() {
        let mut s = BatchSampler::new(10, 5, seeded(0, Stream::Attack));
        let mut seen: Vec<usize> = s.next_indices();
        seen.extend(s.next_indices());
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
