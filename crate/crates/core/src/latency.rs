//! Wall-clock latency of plain and defended inference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{infer_and_detect, Detector};
use crate::error::{Error, Result};
use crate::model::SmallCnn;
use crate::tensor::Tensor;

pub const DEFAULT_WARMUP: usize = 5;
pub const MIN_REPETITIONS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub median_batch_ms: f64,
    pub mean_batch_ms: f64,
    /// Median per-batch time divided by the batch size.
    pub per_image_ms: f64,
    /// Per-image time minus the plain inference per-image time.
    pub added_per_image_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub plain: Timing,
    pub detectors: Vec<Timing>,
    pub combined: Option<Timing>,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: MIN_REPETITIONS,
            warmup: DEFAULT_WARMUP,
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn summarize(label: String, mut samples: Vec<f64>, batch: usize) -> Timing {
    samples.sort_by(f64::total_cmp);
    let median_batch_ms = median(&samples);
    Timing {
        label,
        median_batch_ms,
        mean_batch_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        per_image_ms: median_batch_ms / batch as f64,
        added_per_image_ms: 0.0,
    }
}

/// Times plain inference, inference with each detector alone and with all
/// detectors combined. Variants are interleaved within every repetition so
/// slow drift affects them equally. Detector statistics are computed in the
/// same forward pass as the predictions.
pub fn bench(model: &SmallCnn, detectors: &[Detector], images: &Tensor, cfg: &BenchConfig) -> Result<LatencyReport> {
    if cfg.repetitions == 0 {
        return Err(Error::invalid("benchmark needs at least one repetition"));
    }
    let batch = images.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(Error::invalid("benchmark batch is empty"));
    }
    let mut variants: Vec<Vec<Detector>> = vec![Vec::new()];
    variants.extend(detectors.iter().map(|d| vec![d.clone()]));
    if detectors.len() >= 2 {
        variants.push(detectors.to_vec());
    }
    let run = |v: &[Detector]| -> Result<()> {
        if v.is_empty() {
            std::hint::black_box(model.logits(images)?);
        } else {
            std::hint::black_box(infer_and_detect(model, images, v)?);
        }
        Ok(())
    };
    for _ in 0..cfg.warmup {
        for v in &variants {
            run(v)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.repetitions); variants.len()];
    for _ in 0..cfg.repetitions {
        for (v, s) in variants.iter().zip(&mut samples) {
            let start = Instant::now();
            run(v)?;
            s.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut timings = samples.into_iter().zip(&variants).map(|(s, v)| {
        let label = match v.len() {
            0 => "plain".to_string(),
            1 => v[0].config.label(),
            _ => "combined".to_string(),
        };
        summarize(label, s, batch)
    });
    let plain = timings.next().expect("plain variant");
    let mut rest: Vec<Timing> = timings
        .map(|mut t| {
            t.added_per_image_ms = t.per_image_ms - plain.per_image_ms;
            t
        })
        .collect();
    let combined = (detectors.len() >= 2).then(|| rest.pop().expect("combined variant"));
    Ok(LatencyReport {
        batch_size: batch,
        repetitions: cfg.repetitions,
        warmup: cfg.warmup,
        plain,
        detectors: rest,
        combined,
    })
}
