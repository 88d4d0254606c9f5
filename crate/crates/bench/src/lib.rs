//! Fixtures shared by the benchmarks: an initialized MNIST-shaped model and
//! detectors fitted on random images, so nothing depends on a dataset.

use uapscan::detector::{self, AggregateTable};
use uapscan::{ActivationBaseline, Aggregation, Architecture, Detector, DetectorConfig, SmallCnn, TapLayer, Tensor};

pub struct Fixture {
    pub model: SmallCnn,
    pub images: Tensor,
    /// Mean on the first tap and std on the hidden layer.
    pub detectors: Vec<Detector>,
}

/// Pixels in [0, 1) from a multiplicative hash of the index.
pub fn random_images(arch: &Architecture, n: usize, seed: u64) -> Tensor {
    let [c, h, w] = arch.image_shape();
    Tensor::from_fn(&[n, c, h, w], |i| {
        let x = (i as u64 ^ seed.wrapping_mul(0x9e37_79b9)).wrapping_mul(0x2545_f491_4f6c_dd1d);
        (x >> 40) as f32 / (1u64 << 24) as f32
    })
}

pub fn fixture(batch: usize) -> Fixture {
    let arch = Architecture::mnist();
    let model = SmallCnn::init(arch, 0);
    let clean = random_images(&arch, 256, 1);
    let pairs = [
        (TapLayer::Conv1, Aggregation::Mean),
        (TapLayer::Hidden, Aggregation::Std),
    ];
    let (_, tables) = detector::collect_aggregates(&model, &clean, &pairs).expect("aggregates");
    let detectors = tables
        .iter()
        .map(|t: &AggregateTable| {
            let baseline = ActivationBaseline::from_table(t, "random").expect("baseline");
            let config = DetectorConfig {
                layer: t.layer,
                aggregation: t.kind,
                top_percentile: 0.1,
                threshold: 2.0,
                fp_rate: 0.05,
            };
            Detector::new(baseline, config).expect("detector")
        })
        .collect();
    Fixture {
        model,
        images: random_images(&arch, batch, 2),
        detectors,
    }
}
