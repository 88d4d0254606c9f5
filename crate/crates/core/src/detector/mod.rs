//! Activation-statistics detection of universal perturbations.
//!
//! Each input is reduced to one statistic per channel of a tap layer
//! (spatial mean or standard deviation), z-scored against a clean baseline,
//! and the average of its largest z-scores is compared with a threshold
//! calibrated for a target false-positive rate.

mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::BASELINE_VERSION;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::kernels::plane_mean_std;
use crate::model::{SmallCnn, TapLayer};
use crate::tensor::Tensor;

/// Floor applied to baseline standard deviations.
pub const SIGMA_FLOOR: f32 = 1e-6;

/// Top-percentile values searched during calibration.
pub const DEFAULT_T_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

/// Top percentile used when calibration is skipped.
pub const DEFAULT_TOP_PERCENTILE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Std,
}

impl Aggregation {
    pub const ALL: [Aggregation; 2] = [Aggregation::Mean, Aggregation::Std];

    /// Short suffix used in layer labels such as `3.0M`.
    pub fn suffix(self) -> &'static str {
        match self {
            Aggregation::Mean => "M",
            Aggregation::Std => "S",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Aggregation::Mean),
            1 => Some(Aggregation::Std),
            _ => None,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Std => "std",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "M" => Ok(Aggregation::Mean),
            "std" | "S" => Ok(Aggregation::Std),
            _ => Err(Error::invalid(format!(
                "unknown aggregation `{s}` (expected mean or std)"
            ))),
        }
    }
}

fn plane_stat(plane: &[f32], kind: Aggregation) -> f64 {
    let (mean, std) = plane_mean_std(plane);
    match kind {
        Aggregation::Mean => mean,
        Aggregation::Std => std,
    }
}

/// Aggregates one channels-last activation map `[a, a, d]`.
pub fn aggregate(tap: &Tensor, kind: Aggregation) -> Result<Vec<f64>> {
    let s = tap.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape("aggregate", s, &[1, 1, 0]));
    }
    let (positions, d) = (s[0] * s[1], s[2]);
    let mut plane = vec![0.0f32; positions];
    Ok((0..d)
        .map(|j| {
            for (p, v) in plane.iter_mut().enumerate() {
                *v = tap.data()[p * d + j];
            }
            plane_stat(&plane, kind)
        })
        .collect())
}

/// Per-input aggregates of one (layer, kind) pair, stored row-major `[n, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateTable {
    pub layer: TapLayer,
    pub kind: Aggregation,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl AggregateTable {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Aggregates computed from channels-last activations `[n, a, a, d]`.
    pub fn from_activations(layer: TapLayer, kind: Aggregation, acts: &Tensor) -> Result<Self> {
        let s = acts.shape();
        if s.len() != 4 {
            return Err(Error::shape("aggregate table", s, &[0, 0, 0, 0]));
        }
        let per = s[1] * s[2] * s[3];
        let mut values = Vec::with_capacity(s[0] * s[3]);
        for i in 0..s[0] {
            let one = Tensor::new(s[1..].to_vec(), acts.data()[i * per..(i + 1) * per].to_vec())?;
            values.extend(aggregate(&one, kind)?);
        }
        Ok(Self {
            layer,
            kind,
            dim: s[3],
            values,
        })
    }
}

/// Pushes per-channel aggregates of an NCHW tap into `out`.
fn push_nchw_aggregates(tap: &[f32], shape: [usize; 4], kind: Aggregation, out: &mut Vec<f64>) {
    let plane = shape[2] * shape[3];
    out.extend(tap.chunks_exact(plane).map(|p| plane_stat(p, kind)));
}

/// Runs the model once over `images` and aggregates every requested
/// (layer, kind) pair. Also returns the predicted labels.
pub fn collect_aggregates(
    model: &SmallCnn,
    images: &Tensor,
    pairs: &[(TapLayer, Aggregation)],
) -> Result<(Vec<usize>, Vec<AggregateTable>)> {
    const CHUNK: usize = 256;
    let n = images.shape().first().copied().unwrap_or(0);
    let arch = *model.architecture();
    let [c, h, w] = arch.image_shape();
    if images.shape() != [n, c, h, w] {
        return Err(Error::shape("collect_aggregates", images.shape(), &[n, c, h, w]));
    }
    let mut tables: Vec<AggregateTable> = pairs
        .iter()
        .map(|&(layer, kind)| AggregateTable {
            layer,
            kind,
            dim: arch.tap_shape(layer)[2],
            values: Vec::with_capacity(n * arch.tap_shape(layer)[2]),
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let per = c * h * w;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let logits = model.forward_visit(
            &images.data()[start * per..end * per],
            end - start,
            |layer, tap, shape| {
                for t in tables.iter_mut().filter(|t| t.layer == layer) {
                    push_nchw_aggregates(tap, shape, t.kind, &mut t.values);
                }
            },
        )?;
        labels.extend(logits.chunks_exact(arch.num_classes).map(crate::model::argmax));
    }
    Ok((labels, tables))
}

/// Per-channel statistics of the aggregates over a trusted clean set.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBaseline {
    pub layer: TapLayer,
    pub kind: Aggregation,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub sample_count: u64,
    /// Fingerprint of the clean set the statistics came from.
    pub fingerprint: String,
}

impl ActivationBaseline {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Mean and floored population standard deviation of each column.
    pub fn from_table(table: &AggregateTable, fingerprint: impl Into<String>) -> Result<Self> {
        let n = table.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "a baseline needs at least 2 clean samples, got {n}"
            )));
        }
        let d = table.dim;
        let mut mu = Vec::with_capacity(d);
        let mut sigma = Vec::with_capacity(d);
        for j in 0..d {
            let mut sum = 0.0f64;
            for row in table.rows() {
                sum += row[j];
            }
            let mean = sum / n as f64;
            let mut sq = 0.0f64;
            for row in table.rows() {
                let dv = row[j] - mean;
                sq += dv * dv;
            }
            let std = (sq / n as f64).sqrt() as f32;
            mu.push(mean as f32);
            sigma.push(std.max(SIGMA_FLOOR));
        }
        Ok(Self {
            layer: table.layer,
            kind: table.kind,
            mu,
            sigma,
            sample_count: n as u64,
            fingerprint: fingerprint.into(),
        })
    }

    /// Signed z-scores `(a - mu) / sigma`.
    pub fn z_scores(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(&a, (&m, &s))| (a - m as f64) / s as f64)
            .collect()
    }
}

/// Fits baselines for several (layer, kind) pairs from one pass over `clean`.
pub fn fit_baselines(
    model: &SmallCnn,
    clean: &ImageBatch,
    pairs: &[(TapLayer, Aggregation)],
) -> Result<Vec<ActivationBaseline>> {
    if clean.len() < 2 {
        return Err(Error::invalid(format!(
            "a baseline needs at least 2 clean samples, got {}",
            clean.len()
        )));
    }
    let fingerprint = clean.fingerprint();
    let (_, tables) = collect_aggregates(model, clean.images(), pairs)?;
    tables
        .iter()
        .map(|t| ActivationBaseline::from_table(t, fingerprint.clone()))
        .collect()
}

pub fn fit_baseline(
    model: &SmallCnn,
    clean: &ImageBatch,
    layer: TapLayer,
    kind: Aggregation,
) -> Result<ActivationBaseline> {
    Ok(fit_baselines(model, clean, &[(layer, kind)])?.remove(0))
}

/// Number of z-scores averaged: `ceil(t * d)`, at least one.
pub fn top_count(t: f64, d: usize) -> usize {
    // the small slack keeps products like 0.1 * 30 from rounding up to 4
    ((t * d as f64 - 1e-9).ceil() as usize).clamp(1, d.max(1))
}

/// Mean of the `ceil(t * d)` largest entries of `z`.
pub fn z_top_avg(z: &[f64], t: f64) -> f64 {
    let k = top_count(t, z.len());
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut sum = 0.0f64;
    for v in &sorted[..k] {
        sum += v;
    }
    sum / k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub layer: TapLayer,
    pub aggregation: Aggregation,
    pub top_percentile: f64,
    pub threshold: f64,
    pub fp_rate: f64,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_percentile > 0.0 && self.top_percentile <= 1.0) {
            return Err(Error::invalid(format!(
                "top percentile must lie in (0, 1], got {}",
                self.top_percentile
            )));
        }
        if !(self.fp_rate > 0.0 && self.fp_rate < 1.0) {
            return Err(Error::invalid(format!(
                "FP rate must lie in (0, 1), got {}",
                self.fp_rate
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(())
    }

    /// Label such as `3.0M`.
    pub fn label(&self) -> String {
        format!("{}{}", self.layer, self.aggregation.suffix())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub config: DetectorConfig,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
}

impl DetectionResult {
    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn flag_rate(&self) -> f64 {
        self.flagged() as f64 / self.flags.len().max(1) as f64
    }
}

/// A baseline paired with the configuration that scores against it.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub baseline: ActivationBaseline,
    pub config: DetectorConfig,
}

impl Detector {
    pub fn new(baseline: ActivationBaseline, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        if baseline.layer != config.layer || baseline.kind != config.aggregation {
            return Err(Error::invalid(format!(
                "baseline is for {}{} but the config targets {}",
                baseline.layer,
                baseline.kind.suffix(),
                config.label()
            )));
        }
        Ok(Self { baseline, config })
    }

    fn pair(&self) -> (TapLayer, Aggregation) {
        (self.config.layer, self.config.aggregation)
    }

    /// Scores precomputed aggregates.
    pub fn score_table(&self, table: &AggregateTable) -> Result<DetectionResult> {
        score_table(table, &self.baseline, &self.config)
    }

    pub fn score(&self, model: &SmallCnn, images: &Tensor) -> Result<DetectionResult> {
        score(model, images, &self.baseline, &self.config)
    }
}

fn check_baseline(table_dim: usize, baseline: &ActivationBaseline, config: &DetectorConfig) -> Result<()> {
    if baseline.mu.len() != baseline.sigma.len() || baseline.dim() != table_dim {
        return Err(Error::shape("baseline", &[baseline.dim()], &[table_dim]));
    }
    if baseline.layer != config.layer || baseline.kind != config.aggregation {
        return Err(Error::invalid("baseline does not match the detector config"));
    }
    Ok(())
}

/// Scores of every row of `table` under `baseline` with top percentile `t`.
pub fn table_scores(table: &AggregateTable, baseline: &ActivationBaseline, t: f64) -> Result<Vec<f64>> {
    if baseline.dim() != table.dim || baseline.layer != table.layer || baseline.kind != table.kind {
        return Err(Error::shape("baseline", &[baseline.dim()], &[table.dim]));
    }
    Ok(table.rows().map(|a| z_top_avg(&baseline.z_scores(a), t)).collect())
}

pub fn score_table(
    table: &AggregateTable,
    baseline: &ActivationBaseline,
    config: &DetectorConfig,
) -> Result<DetectionResult> {
    config.validate()?;
    check_baseline(table.dim, baseline, config)?;
    let scores = table_scores(table, baseline, config.top_percentile)?;
    let flags = scores.iter().map(|&s| s > config.threshold).collect();
    Ok(DetectionResult {
        config: config.clone(),
        scores,
        flags,
    })
}

/// Scores channels-last tap activations `[n, a, a, d]`.
pub fn score_activations(
    acts: &Tensor,
    baseline: &ActivationBaseline,
    config: &DetectorConfig,
) -> Result<DetectionResult> {
    let table = AggregateTable::from_activations(config.layer, config.aggregation, acts)?;
    score_table(&table, baseline, config)
}

/// Runs the model on `images` and scores the configured tap.
pub fn score(
    model: &SmallCnn,
    images: &Tensor,
    baseline: &ActivationBaseline,
    config: &DetectorConfig,
) -> Result<DetectionResult> {
    let (_, tables) = collect_aggregates(model, images, &[(config.layer, config.aggregation)])?;
    score_table(&tables[0], baseline, config)
}

/// Labels and detection results for several detectors from one forward pass.
pub fn infer_and_detect(
    model: &SmallCnn,
    images: &Tensor,
    detectors: &[Detector],
) -> Result<(Vec<usize>, Vec<DetectionResult>)> {
    let pairs: Vec<_> = detectors.iter().map(Detector::pair).collect();
    let (labels, tables) = collect_aggregates(model, images, &pairs)?;
    let results = detectors
        .iter()
        .zip(&tables)
        .map(|(d, t)| d.score_table(t))
        .collect::<Result<_>>()?;
    Ok((labels, results))
}

/// Smallest score with at most `floor(r * n)` scores strictly above it.
pub fn calibrate_threshold(clean_scores: &[f64], r: f64) -> Result<f64> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::invalid(format!("FP rate must lie in (0, 1), got {r}")));
    }
    let n = clean_scores.len();
    let needed = (1.0 / r - 1e-9).ceil() as usize;
    if n < needed {
        return Err(Error::invalid(format!(
            "calibrating FP rate {r} needs at least {needed} clean scores, got {n}"
        )));
    }
    if clean_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            op: "calibrate_threshold",
        });
    }
    let allowed = (r * n as f64 + 1e-9).floor() as usize;
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[n - 1 - allowed])
}

/// Builds a config with a threshold calibrated on `clean_scores`.
pub fn calibrated_config(
    layer: TapLayer,
    aggregation: Aggregation,
    top_percentile: f64,
    clean_scores: &[f64],
    fp_rate: f64,
) -> Result<DetectorConfig> {
    let config = DetectorConfig {
        layer,
        aggregation,
        top_percentile,
        threshold: calibrate_threshold(clean_scores, fp_rate)?,
        fp_rate,
    };
    config.validate()?;
    Ok(config)
}

/// One cell of the calibration grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub layer: TapLayer,
    pub aggregation: Aggregation,
    pub top_percentile: f64,
    /// AUC against each perturbed set, in input order.
    pub aucs: Vec<f64>,
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub layer: TapLayer,
    pub aggregation: Aggregation,
    pub top_percentile: f64,
    pub mean_auc: f64,
    /// Every (layer, aggregation) pair at the default percentile, then every
    /// percentile for the chosen pair.
    pub grid: Vec<GridEntry>,
}

/// Aggregates of one clean set and several perturbed versions of it, for
/// every candidate (layer, aggregation) pair.
#[derive(Clone, Debug)]
pub struct CalibrationData {
    pub baselines: Vec<ActivationBaseline>,
    pub clean: Vec<AggregateTable>,
    pub perturbed: Vec<Vec<AggregateTable>>,
}

impl CalibrationData {
    fn entry(&self, pair: usize, t: f64) -> Result<GridEntry> {
        let b = &self.baselines[pair];
        let clean = table_scores(&self.clean[pair], b, t)?;
        let aucs = self
            .perturbed
            .iter()
            .map(|set| {
                let pert = table_scores(&set[pair], b, t)?;
                crate::metrics::auc(&pert, &clean)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
        Ok(GridEntry {
            layer: b.layer,
            aggregation: b.kind,
            top_percentile: t,
            aucs,
            mean_auc,
        })
    }
}

/// Candidate pairs in tie-break order: earlier layer first, mean before std.
pub fn candidate_pairs(layers: &[TapLayer]) -> Vec<(TapLayer, Aggregation)> {
    let mut sorted = layers.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted
        .into_iter()
        .flat_map(|l| Aggregation::ALL.into_iter().map(move |a| (l, a)))
        .collect()
}

/// Computes baselines on `baseline_set` and aggregates of `clean` and of
/// each perturbed copy of `clean`, all for the candidate layers.
pub fn prepare_calibration(
    model: &SmallCnn,
    baseline_set: &ImageBatch,
    clean: &ImageBatch,
    perturbed: &[Tensor],
    layers: &[TapLayer],
) -> Result<CalibrationData> {
    if layers.is_empty() {
        return Err(Error::invalid("no candidate layers"));
    }
    if perturbed.is_empty() {
        return Err(Error::invalid("no perturbed sets to calibrate against"));
    }
    let pairs = candidate_pairs(layers);
    let baselines = fit_baselines(model, baseline_set, &pairs)?;
    let (_, clean_tables) = collect_aggregates(model, clean.images(), &pairs)?;
    let perturbed = perturbed
        .iter()
        .map(|images| collect_aggregates(model, images, &pairs).map(|(_, t)| t))
        .collect::<Result<_>>()?;
    Ok(CalibrationData {
        baselines,
        clean: clean_tables,
        perturbed,
    })
}

/// Picks the (layer, aggregation) pair with the highest mean AUC at the
/// default percentile, then the percentile from `t_grid` that maximizes the
/// same objective for that pair. Ties keep the earlier candidate.
pub fn calibrate_detector(data: &CalibrationData, t_grid: &[f64]) -> Result<Calibration> {
    if data.baselines.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    if t_grid.is_empty() || t_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::invalid(
            "top-percentile grid must be non-empty with values in (0, 1]",
        ));
    }
    let mut grid = Vec::new();
    let mut best_pair = 0;
    for pair in 0..data.baselines.len() {
        let e = data.entry(pair, DEFAULT_TOP_PERCENTILE)?;
        if e.mean_auc
            > grid
                .get(best_pair)
                .map_or(f64::NEG_INFINITY, |b: &GridEntry| b.mean_auc)
        {
            best_pair = pair;
        }
        grid.push(e);
    }
    let mut best: Option<GridEntry> = None;
    for &t in t_grid {
        let e = data.entry(best_pair, t)?;
        if best.as_ref().map_or(true, |b| e.mean_auc > b.mean_auc) {
            best = Some(e.clone());
        }
        grid.push(e);
    }
    let best = best.expect("non-empty grid");
    Ok(Calibration {
        layer: best.layer,
        aggregation: best.aggregation,
        top_percentile: best.top_percentile,
        mean_auc: best.mean_auc,
        grid,
    })
}

/// OR of several detectors' flags over the same inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedFlags {
    pub flags: Vec<bool>,
    /// Indices of the members that fired, per input.
    pub fired: Vec<Vec<usize>>,
}

impl CombinedFlags {
    pub fn flag_rate(&self) -> f64 {
        self.flags.iter().filter(|&&f| f).count() as f64 / self.flags.len().max(1) as f64
    }
}

pub fn combined_flag(results: &[&DetectionResult]) -> Result<CombinedFlags> {
    let n = results
        .first()
        .ok_or_else(|| Error::invalid("no detection results to combine"))?
        .flags
        .len();
    if results.iter().any(|r| r.flags.len() != n) {
        return Err(Error::invalid("detection results cover different input sets"));
    }
    let fired: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..results.len()).filter(|&m| results[m].flags[i]).collect())
        .collect();
    Ok(CombinedFlags {
        flags: fired.iter().map(|f| !f.is_empty()).collect(),
        fired,
    })
}
