//! Bit-exact agreement between the detector and the straight-line oracle.

use rand::Rng;
use uapscan::detector::{self, DetectorConfig};
use uapscan::oracle;
use uapscan::rng::{seeded, Stream};
use uapscan::{ActivationBaseline, Aggregation, Architecture, SmallCnn, TapLayer, Tensor};

const CASES: usize = 1200;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn score_matches_oracle_on_synthetic_cases() {
    if let Err(e) = oracle::synthetic::check_cases(CASES, 2024) {
        panic!("{e}");
    }
}

#[test]
fn model_scoring_matches_oracle_on_real_taps() {
    let arch = Architecture::new(1, 16, 16, 10).unwrap();
    let model = SmallCnn::init(arch, 5);
    let mut rng = seeded(6, Stream::Probe);
    let clean = Tensor::from_fn(&[12, 1, 16, 16], |_| rng.random::<f32>());
    let probe = Tensor::from_fn(&[9, 1, 16, 16], |_| rng.random::<f32>());
    for layer in TapLayer::ALL {
        let [a, _, d] = arch.tap_shape(layer);
        let taps = |x: &Tensor| -> Vec<Vec<f32>> {
            let t = model.tap_activations(x, layer).unwrap();
            t.data().chunks(a * a * d).map(<[f32]>::to_vec).collect()
        };
        for kind in Aggregation::ALL {
            let (_, tables) = detector::collect_aggregates(&model, &clean, &[(layer, kind)]).unwrap();
            let baseline = ActivationBaseline::from_table(&tables[0], "clean").unwrap();
            for t in [0.05, 0.1, 1.0] {
                let config = DetectorConfig {
                    layer,
                    aggregation: kind,
                    top_percentile: t,
                    threshold: 0.5,
                    fp_rate: 0.05,
                };
                let got = detector::score(&model, &probe, &baseline, &config).unwrap();
                let want = oracle::reference_detector(
                    &taps(&clean),
                    &taps(&probe),
                    a * a,
                    d,
                    kind == Aggregation::Std,
                    t,
                    0.5,
                );
                assert_eq!(baseline.mu, want.mu, "{layer} {kind:?}");
                assert_eq!(baseline.sigma, want.sigma, "{layer} {kind:?}");
                assert_eq!(bits(&got.scores), bits(&want.scores), "{layer} {kind:?} t={t}");
                assert_eq!(got.flags, want.flags);
            }
        }
    }
}
