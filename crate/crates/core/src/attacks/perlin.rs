//! Procedural-noise masks found by black-box grid search.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_data, AttackConfig, AttackKind, MaskPerturbation, Provenance};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::SmallCnn;
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

/// Source of the unit gradients at integer lattice points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lattice {
    /// Pseudo-random directions hashed from the lattice coordinates.
    Hashed { seed: u64 },
    /// The same vector at every lattice point.
    Constant { gx: f64, gy: f64 },
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Lattice {
    fn gradient(&self, i: i64, j: i64) -> (f64, f64) {
        match *self {
            Lattice::Hashed { seed } => {
                let h = mix(seed ^ mix((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix(j as u64)));
                let angle = (h >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
                (angle.cos(), angle.sin())
            }
            Lattice::Constant { gx, gy } => (gx, gy),
        }
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Gradient noise at `(x, y)` in lattice units.
pub fn perlin_noise(x: f64, y: f64, lattice: &Lattice) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (i, j) = (x0 as i64, y0 as i64);
    let corner = |di: i64, dj: i64| {
        let (gx, gy) = lattice.gradient(i + di, j + dj);
        gx * (fx - di as f64) + gy * (fy - dj as f64)
    };
    let (u, v) = (fade(fx), fade(fy));
    let top = corner(0, 0) + u * (corner(1, 0) - corner(0, 0));
    let bottom = corner(0, 1) + u * (corner(1, 1) - corner(0, 1));
    top + v * (bottom - top)
}

/// Wavelengths in pixels and sine frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerlinParams {
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub phi: f64,
}

/// Noise sampled at pixel centers, row-major `h * w`.
pub fn perlin_field(h: usize, w: usize, params: &PerlinParams, lattice: &Lattice) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(perlin_noise(
                (x as f64 + 0.5) / params.lambda_x,
                (y as f64 + 0.5) / params.lambda_y,
                lattice,
            ));
        }
    }
    out
}

/// `sign(sin(2 pi phi noise)) * epsilon`, identical across channels, with
/// `sign(0) = +1`.
pub fn perlin_mask(shape: [usize; 3], params: &PerlinParams, epsilon: f32, lattice: &Lattice) -> Tensor {
    let [c, h, w] = shape;
    let field = perlin_field(h, w, params, lattice);
    let plane: Vec<f32> = field
        .iter()
        .map(|&p| {
            if (p * std::f64::consts::TAU * params.phi).sin() >= 0.0 {
                epsilon
            } else {
                -epsilon
            }
        })
        .collect();
    Tensor::from_fn(&[c, h, w], |i| plane[i % (h * w)])
}

/// Independent random `+-epsilon` per pixel.
pub fn random_sign_mask(shape: [usize; 3], epsilon: f32, seed: u64) -> Tensor {
    let mut rng = seeded(seed, Stream::Probe);
    Tensor::from_fn(&shape, |_| if rng.random::<bool>() { epsilon } else { -epsilon })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerlinGrid {
    pub lambda_x: Vec<f64>,
    pub lambda_y: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Default for PerlinGrid {
    fn default() -> Self {
        Self {
            lambda_x: vec![4.0, 8.0, 16.0],
            lambda_y: vec![4.0, 8.0, 16.0],
            phi: vec![2.0, 4.0, 8.0],
        }
    }
}

impl PerlinGrid {
    pub fn points(&self) -> Vec<PerlinParams> {
        let mut out = Vec::new();
        for &lambda_x in &self.lambda_x {
            for &lambda_y in &self.lambda_y {
                for &phi in &self.phi {
                    out.push(PerlinParams {
                        lambda_x,
                        lambda_y,
                        phi,
                    });
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let all = self.lambda_x.iter().chain(&self.lambda_y).chain(&self.phi);
        if self.points().is_empty() || all.clone().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("Perlin grid must be non-empty with positive values"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerlinTrial {
    pub params: PerlinParams,
    pub uer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerlinSearch {
    pub best: MaskPerturbation,
    pub trials: Vec<PerlinTrial>,
}

/// Evaluates every grid point on `data` without gradients and keeps the one
/// with the highest evasion rate (first wins ties).
pub fn perlin_uap(model: &SmallCnn, data: &ImageBatch, grid: &PerlinGrid, cfg: &AttackConfig) -> Result<PerlinSearch> {
    grid.validate()?;
    cfg.validate_epsilon()?;
    check_data(model, data)?;
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let shape = model.architecture().image_shape();
    let lattice = Lattice::Hashed { seed: cfg.seed };
    let mut trials = Vec::new();
    let mut best: Option<(usize, f64, Tensor)> = None;
    for params in grid.points() {
        let delta = perlin_mask(shape, &params, cfg.epsilon, &lattice);
        let mask = MaskPerturbation::new(delta, cfg.epsilon, Provenance::new(AttackKind::Perlin, cfg))?;
        let uer = crate::metrics::uer(model, &mask.clone().into(), data, 0)?;
        log::debug!("perlin {params:?}: UER {uer:.4}");
        if best.as_ref().map_or(true, |b| uer > b.1) {
            best = Some((trials.len(), uer, mask.delta().clone()));
        }
        trials.push(PerlinTrial { params, uer });
    }
    let (idx, _, delta) = best.expect("non-empty grid");
    let mut prov = Provenance::new(AttackKind::Perlin, cfg);
    prov.details = serde_json::json!({ "params": trials[idx].params, "lattice": lattice });
    Ok(PerlinSearch {
        best: MaskPerturbation::new(delta, cfg.epsilon, prov)?,
        trials,
    })
}
