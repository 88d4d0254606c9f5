//! The declarative run file.
//!
//! Budgets for masks (`epsilon`, `step_size`) are written on the 0-255 pixel
//! scale and converted to `[0, 1]` here.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use uapscan::attacks::{AttackKind, PerlinGrid};
use uapscan::detector::DEFAULT_T_GRID;
use uapscan::latency::{DEFAULT_WARMUP, MIN_REPETITIONS};
use uapscan::model::TrainConfig;
use uapscan::{AttackConfig, SplitSpec, TapLayer, TransformDist};

pub const DATA_ENV: &str = "UAPSCAN_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its randomness from it.
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default, rename = "detector")]
    pub detectors: Vec<DetectorSpec>,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetKind,
    /// Directory with the dataset files; falls back to `$UAPSCAN_DATA`.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_validation")]
    pub validation_size: usize,
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default = "default_per_class")]
    pub baseline_per_class: usize,
    /// Training images handed to gradient attacks.
    #[serde(default = "default_attack_size")]
    pub attack_size: usize,
    /// Test images used by `evaluate`; all when absent.
    #[serde(default)]
    pub eval_size: Option<usize>,
}

fn default_validation() -> usize {
    5000
}

fn default_per_class() -> usize {
    100
}

fn default_attack_size() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: String,
    pub kind: AttackKind,
    /// Mask budget on the 0-255 scale.
    #[serde(default)]
    pub epsilon: Option<f32>,
    #[serde(default)]
    pub area_fraction: Option<f32>,
    /// Mask steps on the 0-255 scale, patch steps on the pixel scale.
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default)]
    pub layer: Option<TapLayer>,
    #[serde(default)]
    pub lambda: Option<f32>,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Name of the detector whose baseline the defense-aware attack evades.
    #[serde(default)]
    pub detector: Option<String>,
    #[serde(default)]
    pub transforms: Option<TransformDist>,
    #[serde(default)]
    pub grid: Option<PerlinGrid>,
}

impl AttackSpec {
    pub fn attack_config(&self, run_seed: u64) -> AttackConfig {
        let d = AttackConfig::default();
        let is_patch = self.kind == AttackKind::EotPatch;
        AttackConfig {
            epsilon: self.epsilon.map_or(d.epsilon, |e| e / 255.0),
            area_fraction: self.area_fraction.unwrap_or(d.area_fraction),
            step_size: self.step_size.map(|s| if is_patch { s } else { s / 255.0 }),
            iterations: self.iterations.unwrap_or(d.iterations),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            target: self.target,
            layer: self.layer,
            lambda: self.lambda.unwrap_or(d.lambda),
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub name: String,
    /// Candidate taps; all five when absent.
    #[serde(default = "all_layers")]
    pub layers: Vec<TapLayer>,
    #[serde(default = "default_fp_rate")]
    pub fp_rate: f64,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
    /// Attacks whose perturbations drive the layer and percentile search.
    pub calibrate_with: Vec<String>,
}

fn all_layers() -> Vec<TapLayer> {
    TapLayer::ALL.to_vec()
}

fn default_fp_rate() -> f64 {
    0.05
}

fn default_t_grid() -> Vec<f64> {
    DEFAULT_T_GRID.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch_size: 64,
            repetitions: MIN_REPETITIONS,
            warmup: DEFAULT_WARMUP,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.seed,
            train_size: self.data.train_size,
            validation_size: self.data.validation_size,
            baseline_per_class: self.data.baseline_per_class,
            balanced: true,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            momentum: self.train.momentum,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
        }
    }

    pub fn attack(&self, name: &str) -> Result<&AttackSpec> {
        match self.attacks.iter().find(|a| a.name == name) {
            Some(a) => Ok(a),
            None => bail!("no attack named `{name}` in the run config"),
        }
    }

    pub fn detector(&self, name: &str) -> Result<&DetectorSpec> {
        match self.detectors.iter().find(|d| d.name == name) {
            Some(d) => Ok(d),
            None => bail!("no detector named `{name}` in the run config"),
        }
    }

    /// Dataset directory: explicit override, then the config, then the
    /// environment. The directory must exist.
    pub fn data_root(&self, flag: Option<&Path>) -> Result<PathBuf> {
        let root = match (flag, &self.data.root) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => p.clone(),
            (None, None) => match std::env::var_os(DATA_ENV) {
                Some(p) => PathBuf::from(p),
                None => bail!("no dataset root: set data.root, pass --data or set {DATA_ENV}"),
            },
        };
        ensure!(root.is_dir(), "dataset root {} does not exist", root.display());
        Ok(root)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.data.validation_size > 0, "data.validation_size must be positive");
        ensure!(self.data.attack_size > 0, "data.attack_size must be positive");
        ensure!(self.data.eval_size != Some(0), "data.eval_size must be positive");
        ensure!(
            self.train.epochs > 0 && self.train.batch_size > 0,
            "train epochs and batch size must be positive"
        );
        ensure!(self.train.lr > 0.0, "train.lr must be positive");

        let mut names = BTreeSet::new();
        for a in &self.attacks {
            ensure!(
                !a.name.is_empty() && is_file_safe(&a.name),
                "attack name `{}` is not a plain identifier",
                a.name
            );
            ensure!(names.insert(a.name.as_str()), "duplicate attack name `{}`", a.name);
            if let Some(e) = a.epsilon {
                ensure!(
                    e >= 0.0 && e.is_finite(),
                    "attack `{}`: epsilon must be non-negative",
                    a.name
                );
            }
            match a.kind {
                AttackKind::SgdLayer => ensure!(a.layer.is_some(), "attack `{}`: sgd_layer needs a layer", a.name),
                AttackKind::EotPatch => ensure!(a.target.is_some(), "attack `{}`: eot_patch needs a target", a.name),
                AttackKind::BaselineFeature => {
                    let d = a
                        .detector
                        .as_deref()
                        .with_context(|| format!("attack `{}`: needs a detector", a.name))?;
                    self.detector(d)?;
                }
                _ => {}
            }
        }
        let mut dnames = BTreeSet::new();
        for d in &self.detectors {
            ensure!(
                !d.name.is_empty() && is_file_safe(&d.name),
                "detector name `{}` is not a plain identifier",
                d.name
            );
            ensure!(dnames.insert(d.name.as_str()), "duplicate detector name `{}`", d.name);
            ensure!(!d.layers.is_empty(), "detector `{}`: no candidate layers", d.name);
            ensure!(
                !d.calibrate_with.is_empty(),
                "detector `{}`: calibrate_with is empty",
                d.name
            );
            ensure!(
                d.fp_rate > 0.0 && d.fp_rate < 1.0,
                "detector `{}`: fp_rate must lie in (0, 1)",
                d.name
            );
            for a in &d.calibrate_with {
                self.attack(a)?;
            }
        }
        ensure!(self.bench.batch_size > 0, "bench.batch_size must be positive");
        ensure!(
            self.bench.repetitions >= MIN_REPETITIONS,
            "bench.repetitions must be at least {MIN_REPETITIONS}"
        );
        Ok(())
    }
}

fn is_file_safe(name: &str) -> bool {
    name.chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[data]
dataset = "mnist"
root = "/tmp"

[[attack]]
name = "uap10"
kind = "sgd_uap"
epsilon = 10

[[attack]]
name = "layer"
kind = "sgd_layer"
layer = "3.0"

[[detector]]
name = "mask"
calibrate_with = ["layer"]
"#;

    #[test]
    fn parses_and_scales_budgets() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        let a = cfg.attack("uap10").unwrap().attack_config(cfg.seed);
        assert_eq!(a.epsilon, 10.0 / 255.0);
        assert_eq!(a.seed, 7);
        assert_eq!(cfg.detectors[0].layers.len(), 5);
        assert_eq!(cfg.bench.batch_size, 64);
    }

    #[test]
    fn rejects_dangling_references() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.detectors[0].calibrate_with = vec!["missing".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_fields_and_missing_seed() {
        assert!(toml::from_str::<RunConfig>("[data]\ndataset = \"mnist\"").is_err());
        assert!(toml::from_str::<RunConfig>(&format!("{MINIMAL}\nbogus = 1")).is_err());
    }

    #[test]
    fn layer_attack_requires_a_layer() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.attacks[1].layer = None;
        assert!(cfg.validate().is_err());
    }
}
