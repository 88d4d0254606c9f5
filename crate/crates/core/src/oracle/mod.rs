//! Straight-line reference implementations used as test oracles.
//!
//! Everything here is written independently of the optimized code paths:
//! plain nested loops in `f64`, no shared helpers.

pub mod gradcheck;
pub mod synthetic;

/// Output of [`reference_detector`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceScores {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
}

/// One input's activations, channels last: `taps[(y * side + x) * d + j]`.
pub type Activations = Vec<f32>;

fn aggregate_one(tap: &[f32], positions: usize, d: usize, use_std: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let mut s = 0.0f64;
        for p in 0..positions {
            s += tap[p * d + j] as f64;
        }
        let mean = s / positions as f64;
        if !use_std {
            out.push(mean);
            continue;
        }
        let mut sq = 0.0f64;
        for p in 0..positions {
            let dv = tap[p * d + j] as f64 - mean;
            sq += dv * dv;
        }
        out.push((sq / positions as f64).sqrt());
    }
    out
}

/// Baseline fit, z-scoring, top-percentile averaging and thresholding,
/// written out step by step.
pub fn reference_detector(
    clean: &[Activations],
    inputs: &[Activations],
    positions: usize,
    d: usize,
    use_std: bool,
    t: f64,
    theta: f64,
) -> ReferenceScores {
    // baseline over the clean set
    let clean_aggs: Vec<Vec<f64>> = clean.iter().map(|x| aggregate_one(x, positions, d, use_std)).collect();
    let n = clean_aggs.len() as f64;
    let mut mu = vec![0.0f32; d];
    let mut sigma = vec![0.0f32; d];
    for j in 0..d {
        let mut s = 0.0f64;
        for a in &clean_aggs {
            s += a[j];
        }
        let m = s / n;
        let mut sq = 0.0f64;
        for a in &clean_aggs {
            sq += (a[j] - m) * (a[j] - m);
        }
        let sd = (sq / n).sqrt() as f32;
        mu[j] = m as f32;
        sigma[j] = if sd < 1e-6 { 1e-6 } else { sd };
    }

    // number of components averaged
    let mut k = 1usize;
    while (k as f64) < t * d as f64 - 1e-9 && k < d {
        k += 1;
    }

    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for x in inputs {
        let a = aggregate_one(x, positions, d, use_std);
        let mut z = Vec::with_capacity(d);
        for j in 0..d {
            z.push((a[j] - mu[j] as f64) / sigma[j] as f64);
        }
        // pick the k largest by repeated selection
        let mut taken = vec![false; d];
        let mut total = 0.0f64;
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..d {
                if taken[j] {
                    continue;
                }
                match best {
                    None => best = Some(j),
                    Some(b) if z[j] > z[b] => best = Some(j),
                    _ => {}
                }
            }
            let b = best.expect("k <= d");
            taken[b] = true;
            total += z[b];
        }
        let score = total / k as f64;
        scores.push(score);
        flags.push(score > theta);
    }
    ReferenceScores {
        mu,
        sigma,
        scores,
        flags,
    }
}

/// `P(pos > neg) + P(pos == neg) / 2` over all pairs.
pub fn pairwise_auc(positive: &[f64], negative: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &p in positive {
        for &q in negative {
            if p > q {
                twice += 2;
            } else if p == q {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * positive.len() * negative.len()) as f64
}

/// Direct convolution, NCHW input and OIHW kernel.
pub fn conv2d(
    input: &[f64],
    shape: [usize; 4],
    kernel: &[f64],
    kshape: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let [o, _, kh, kw] = kshape;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((oc * c + ic) * kh + ky) * kw + kx];
                                s += iv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + x] = s;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Non-overlapping max pooling.
pub fn maxpool2d(input: &[f64], shape: [usize; 4], window: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..window {
                        for dx in 0..window {
                            m = m.max(input[((b * c + ch) * h + y * window + dy) * w + x * window + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    (out, [n, c, oh, ow])
}

/// `x[n, f] * weight[o, f]^T + bias`.
pub fn dense(x: &[f64], n: usize, f: usize, weight: &[f64], o: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        for k in 0..o {
            let mut s = bias.map_or(0.0, |b| b[k]);
            for j in 0..f {
                s += x[i * f + j] * weight[k * f + j];
            }
            out[i * o + k] = s;
        }
    }
    out
}

/// Mean cross-entropy of softmax over rows.
pub fn softmax_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += -(row[l] - m - z.ln());
    }
    total / labels.len() as f64
}

/// Per-plane mean and population standard deviation of an NCHW buffer.
pub fn spatial_mean_std(input: &[f64], shape: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let plane = shape[2] * shape[3];
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for p in input.chunks(plane) {
        let m = p.iter().sum::<f64>() / plane as f64;
        let v = p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / plane as f64;
        means.push(m);
        stds.push(v.sqrt());
    }
    (means, stds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_auc_by_hand() {
        assert_eq!(pairwise_auc(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]), 7.0 / 9.0);
    }

    #[test]
    fn reference_detector_hand_case() {
        // two channels, 1x1 maps; clean means (1, 3) and (3, 5)
        let clean = vec![vec![1.0, 3.0], vec![3.0, 5.0]];
        let out = reference_detector(&clean, &[vec![4.0, 4.0]], 1, 2, false, 0.5, 1.0);
        assert_eq!(out.mu, vec![2.0, 4.0]);
        assert_eq!(out.sigma, vec![1.0, 1.0]);
        assert_eq!(out.scores, vec![2.0]);
        assert_eq!(out.flags, vec![true]);
    }
}
