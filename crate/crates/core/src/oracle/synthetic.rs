//! Randomized detector cases compared bit-for-bit against [`super::reference_detector`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{self, AggregateTable, DetectorConfig};
use crate::rng::{seeded, Stream};
use crate::{ActivationBaseline, Aggregation, TapLayer, Tensor};

/// Upper bounds on case size.
pub const MAX_INPUTS: usize = 16;
pub const MAX_CHANNELS: usize = 8;
const MAX_SIDE: usize = 4;

fn random_acts(rng: &mut ChaCha8Rng, n: usize, side: usize, d: usize) -> Vec<Vec<f32>> {
    let style = rng.random_range(0..3);
    (0..n)
        .map(|_| {
            (0..side * side * d)
                .map(|_| match style {
                    // post-ReLU looking: many exact zeros
                    0 => rng.random_range(-1.0f32..2.0).max(0.0),
                    // coarse values so ties and dead channels occur
                    1 => rng.random_range(0..4) as f32 * 0.5,
                    _ => rng.random_range(-3.0f32..3.0),
                })
                .collect()
        })
        .collect()
}

fn to_tensor(acts: &[Vec<f32>], side: usize, d: usize) -> Tensor {
    let data: Vec<f32> = acts.iter().flatten().copied().collect();
    Tensor::new(vec![acts.len(), side, side, d], data).expect("consistent shape")
}

fn bits32(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn bits64(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Runs `cases` random cases; returns the first disagreement as text.
pub fn check_cases(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = seeded(seed, Stream::Probe);
    let t_choices = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 0.3, 0.7];
    for case in 0..cases {
        let d = rng.random_range(1..=MAX_CHANNELS);
        let side = rng.random_range(1..=MAX_SIDE);
        let n_clean = rng.random_range(2..=16);
        let n = rng.random_range(1..=MAX_INPUTS);
        let kind = if rng.random::<bool>() {
            Aggregation::Mean
        } else {
            Aggregation::Std
        };
        let t = if rng.random::<bool>() {
            t_choices[rng.random_range(0..t_choices.len())]
        } else {
            rng.random_range(0.001..=1.0)
        };
        let clean = random_acts(&mut rng, n_clean, side, d);
        let inputs = random_acts(&mut rng, n, side, d);
        let layer = TapLayer::ALL[case % TapLayer::ALL.len()];
        let ctx = format!("case {case}: d={d} side={side} n_clean={n_clean} n={n} {kind:?} t={t}");
        let fail = |what: &str| format!("{ctx}: {what}");

        let clean_table = AggregateTable::from_activations(layer, kind, &to_tensor(&clean, side, d))
            .map_err(|e| fail(&e.to_string()))?;
        let baseline = ActivationBaseline::from_table(&clean_table, "synthetic").map_err(|e| fail(&e.to_string()))?;
        let probe_table = AggregateTable::from_activations(layer, kind, &to_tensor(&inputs, side, d))
            .map_err(|e| fail(&e.to_string()))?;
        let probe = detector::table_scores(&probe_table, &baseline, t).map_err(|e| fail(&e.to_string()))?;
        // a threshold equal to one of the scores exercises the strict comparison
        let theta = if rng.random::<bool>() {
            probe[rng.random_range(0..n)]
        } else {
            rng.random_range(-3.0..3.0)
        };
        let config = DetectorConfig {
            layer,
            aggregation: kind,
            top_percentile: t,
            threshold: theta,
            fp_rate: 0.05,
        };
        let got = detector::score_activations(&to_tensor(&inputs, side, d), &baseline, &config)
            .map_err(|e| fail(&e.to_string()))?;
        let want = super::reference_detector(&clean, &inputs, side * side, d, kind == Aggregation::Std, t, theta);

        if bits32(&baseline.mu) != bits32(&want.mu) {
            return Err(fail("mu"));
        }
        if bits32(&baseline.sigma) != bits32(&want.sigma) {
            return Err(fail("sigma"));
        }
        if bits64(&got.scores) != bits64(&want.scores) {
            return Err(fail("scores"));
        }
        if got.flags != want.flags {
            return Err(fail("flags"));
        }
    }
    Ok(())
}
