//! Randomized finite-difference checks of every differentiable graph op.
//!
//! Each case builds `sum(w * op(x))` with random weights `w`, takes the
//! analytic gradient from the tape and compares it with a central difference
//! of the same objective evaluated by the f64 reference ops.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, UNCOVERED};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const INSTANCES: usize = 12;
pub const PROBES_PER_INSTANCE: usize = 10;

pub type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;
pub type Builder = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;
pub type Case = (Vec<Tensor>, Box<Builder>, Box<Reference>);
pub type MakeCase = fn(&mut ChaCha8Rng) -> Case;

/// Summary of one op's probes.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst probe.
    pub worst: (usize, usize, f64, f64),
}

pub const OPS: &[(&str, MakeCase)] = &[
    ("conv2d", conv2d),
    ("conv2d_nobias", conv2d_without_bias),
    ("relu", relu),
    ("maxpool2d", maxpool2d),
    ("flatten_reshape", flatten_and_reshape),
    ("dense", dense),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("add_sub_mul", elementwise_binary),
    ("mul", mul_same_operand),
    ("scale_add_scalar", scale_and_add_scalar),
    ("add_broadcast", add_broadcast),
    ("clamp", clamp),
    ("spatial_mean", spatial_mean),
    ("spatial_std", spatial_std),
    ("sum", sum),
    ("composite", composite),
    ("network", composed_network),
];

/// `|a - n| / max(|a|, |n|, 1e-2)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

fn probe_case(rng: &mut ChaCha8Rng, case: &Case, out: &mut OpCheck) {
    let (inputs, build, reference) = case;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = build(&mut g, &ids);
    let out_shape = g.value(y).shape().to_vec();
    let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0f32..1.0));
    let w_node = g.constant(weights.clone());
    let prod = g.mul(y, w_node).expect("same shape");
    let loss = g.sum(prod).expect("finite");
    let grads = g.backward(loss).expect("backward");

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let w64: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let objective = |xs: &[Vec<f64>]| -> f64 { reference(xs).iter().zip(&w64).map(|(a, b)| a * b).sum() };

    for _ in 0..PROBES_PER_INSTANCE {
        let which = rng.random_range(0..inputs.len());
        let j = rng.random_range(0..inputs[which].len());
        let analytic = grads.get(ids[which]).map_or(0.0, |t| t.data()[j] as f64);
        let mut xs = base.clone();
        xs[which][j] = base[which][j] + STEP;
        let up = objective(&xs);
        xs[which][j] = base[which][j] - STEP;
        let down = objective(&xs);
        let numeric = (up - down) / (2.0 * STEP);
        let e = rel_err(analytic, numeric);
        if e > out.max_rel_err || out.probes == 0 {
            out.max_rel_err = e;
            out.worst = (which, j, analytic, numeric);
        }
        out.probes += 1;
    }
}

/// Runs `INSTANCES` random instances of one op.
pub fn check_op(op: &'static str, make: MakeCase, seed: u64) -> OpCheck {
    let mut rng = seeded(seed, Stream::Probe);
    let mut out = OpCheck {
        op,
        probes: 0,
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    for _ in 0..INSTANCES {
        let case = make(&mut rng);
        probe_case(&mut rng, &case, &mut out);
    }
    out
}

/// Checks every op in [`OPS`].
pub fn check_all(seed: u64) -> Vec<OpCheck> {
    OPS.iter()
        .enumerate()
        .map(|(i, &(name, make))| check_op(name, make, seed.wrapping_add(i as u64)))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude at least `gap` so a step never crosses zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0f32);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Pairwise distinct values spaced well apart relative to the step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape, |i| order[i] as f32 * 0.01 - n as f32 * 0.005)
}

fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

fn conv2d(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..3);
    let c = rng.random_range(1..4);
    let o = rng.random_range(1..4);
    let k = rng.random_range(1..4);
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..2);
    let side = rng.random_range(k..k + 4);
    let x = uniform(rng, &[n, c, side, side], -1.0, 1.0);
    let w = uniform(rng, &[o, c, k, k], -1.0, 1.0);
    let b = uniform(rng, &[o], -1.0, 1.0);
    let xs = dims4(x.shape());
    let ks = dims4(w.shape());
    (
        vec![x, w, b],
        Box::new(move |g: &mut Graph, ids: &[NodeId]| g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad).unwrap()),
        Box::new(move |v: &[Vec<f64>]| super::conv2d(&v[0], xs, &v[1], ks, Some(&v[2]), stride, pad).0),
    )
}

fn conv2d_without_bias(rng: &mut ChaCha8Rng) -> Case {
    let x = uniform(rng, &[2, 2, 6, 6], -1.0, 1.0);
    let w = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let (xs, ks) = (dims4(x.shape()), dims4(w.shape()));
    (
        vec![x, w],
        Box::new(|g: &mut Graph, ids: &[NodeId]| g.conv2d(ids[0], ids[1], None, 1, 0).unwrap()),
        Box::new(move |v: &[Vec<f64>]| super::conv2d(&v[0], xs, &v[1], ks, None, 1, 0).0),
    )
}

fn relu(rng: &mut ChaCha8Rng) -> Case {
    let x = away_from_zero(rng, &[2, 3, 4], 0.05);
    (
        vec![x],
        Box::new(|g: &mut Graph, ids: &[NodeId]| g.relu(ids[0])),
        Box::new(|v: &[Vec<f64>]| v[0].iter().map(|&a| a.max(0.0)).collect()),
    )
}

fn maxpool2d(rng: &mut ChaCha8Rng) -> Case {
    let window = rng.random_range(2..4);
    let x = distinct(rng, &[2, 2, window * 2, window * 3]);
    let xs = dims4(x.shape());
    (
        vec![x],
        Box::new(move |g: &mut Graph, ids: &[NodeId]| g.maxpool2d(ids[0], window).unwrap()),
        Box::new(move |v: &[Vec<f64>]| super::maxpool2d(&v[0], xs, window).0),
    )
}

fn flatten_and_reshape(rng: &mut ChaCha8Rng) -> Case {
    let x = uniform(rng, &[2, 3, 2, 2], -1.0, 1.0);
    (
        vec![x],
        Box::new(|g: &mut Graph, ids: &[NodeId]| {
            let f = g.flatten(ids[0]).unwrap();
            let r = g.reshape(f, &[4, 6]).unwrap();
            let sq = g.mul(r, r).unwrap();
            g.reshape(sq, &[24]).unwrap()
        }),
        Box::new(|v: &[Vec<f64>]| v[0].iter().map(|a| a * a).collect()),
    )
}

fn dense(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..4);
    let f = rng.random_range(1..8);
    let o = rng.random_range(1..6);
    let x = uniform(rng, &[n, f], -1.0, 1.0);
    let w = uniform(rng, &[o, f], -1.0, 1.0);
    let b = uniform(rng, &[o], -1.0, 1.0);
    (
        vec![x, w, b],
        Box::new(|g: &mut Graph, ids: &[NodeId]| g.dense(ids[0], ids[1], Some(ids[2])).unwrap()),
        Box::new(move |v: &[Vec<f64>]| super::dense(&v[0], n, f, &v[1], o, Some(&v[2]))),
    )
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..5);
    let c = rng.random_range(2..8);
    let x = uniform(rng, &[n, c], -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let l2 = labels.clone();
    (
        vec![x],
        Box::new(move |g: &mut Graph, ids: &[NodeId]| g.softmax_cross_entropy(ids[0], &labels).unwrap()),
        Box::new(move |v: &[Vec<f64>]| vec![super::softmax_cross_entropy(&v[0], c, &l2)]),
    )
}

fn elementwise_binary(rng: &mut ChaCha8Rng) -> Case {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[3, 4], -1.0, 1.0);
    (
        vec![a, b],
        Box::new(|g: &mut Graph, ids: &[NodeId]| {
            let s = g.add(ids[0], ids[1]).unwrap();
            let d = g.sub(ids[0], ids[1]).unwrap();
            g.mul(s, d).unwrap()
        }),
        Box::new(|v: &[Vec<f64>]| v[0].iter().zip(&v[1]).map(|(a, b)| (a + b) * (a - b)).collect()),
    )
}

fn mul_same_operand(rng: &mut ChaCha8Rng) -> Case {
    let a = uniform(rng, &[5], -1.0, 1.0);
    let b = uniform(rng, &[5], -1.0, 1.0);
    (
        vec![a, b],
        Box::new(|g: &mut Graph, ids: &[NodeId]| {
            let ab = g.mul(ids[0], ids[1]).unwrap();
            g.mul(ab, ids[0]).unwrap()
        }),
        Box::new(|v: &[Vec<f64>]| v[0].iter().zip(&v[1]).map(|(a, b)| a * b * a).collect()),
    )
}

fn scale_and_add_scalar(rng: &mut ChaCha8Rng) -> Case {
    let factor = rng.random_range(-2.0f32..2.0);
    let offset = rng.random_range(-1.0f32..1.0);
    let x = uniform(rng, &[2, 5], -1.0, 1.0);
    (
        vec![x],
        Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.scale(ids[0], factor).unwrap();
            let a = g.add_scalar(s, offset).unwrap();
            g.mul(a, a).unwrap()
        }),
        Box::new(move |v: &[Vec<f64>]| {
            v[0].iter()
                .map(|x| {
                    let y = x * factor as f64 + offset as f64;
                    y * y
                })
                .collect()
        }),
    )
}

fn add_broadcast(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..4);
    let x = uniform(rng, &[n, 2, 3, 3], -1.0, 1.0);
    let d = uniform(rng, &[2, 3, 3], -1.0, 1.0);
    (
        vec![x, d],
        Box::new(|g: &mut Graph, ids: &[NodeId]| {
            let y = g.add_broadcast(ids[0], ids[1]).unwrap();
            g.mul(y, y).unwrap()
        }),
        Box::new(|v: &[Vec<f64>]| {
            v[0].iter()
                .enumerate()
                .map(|(i, x)| {
                    let y = x + v[1][i % v[1].len()];
                    y * y
                })
                .collect()
        }),
    )
}

fn clamp(rng: &mut ChaCha8Rng) -> Case {
    let x = Tensor::from_fn(&[4, 5], |_| loop {
        let v = rng.random_range(-1.0f32..1.0);
        if (v.abs() - 0.5).abs() > 0.02 {
            break v;
        }
    });
    (
        vec![x],
        Box::new(|g: &mut Graph, ids: &[NodeId]| g.clamp(ids[0], -0.5, 0.5)),
        Box::new(|v: &[Vec<f64>]| v[0].iter().map(|a| a.clamp(-0.5, 0.5)).collect()),
    )
}

fn spatial_mean(rng: &mut ChaCha8Rng) -> Case {
    let x = uniform(rng, &[2, 3, 4, 5], -1.0, 1.0);
    let xs = dims4(x.shape());
    (
        vec![x],
        Box::new(|g: &mut Graph, ids: &[NodeId]| g.spatial_mean(ids[0]).unwrap()),
        Box::new(move |v: &[Vec<f64>]| super::spatial_mean_std(&v[0], xs).0),
    )
}

fn spatial_std(rng: &mut ChaCha8Rng) -> Case {
    let side = rng.random_range(2..5);
    let x = uniform(rng, &[2, 3, side, side], -1.0, 1.0);
    let xs = dims4(x.shape());
    (
        vec![x],
        Box::new(|g: &mut Graph, ids: &[NodeId]| g.spatial_std(ids[0]).unwrap()),
        Box::new(move |v: &[Vec<f64>]| super::spatial_mean_std(&v[0], xs).1),
    )
}

fn sum(rng: &mut ChaCha8Rng) -> Case {
    let x = uniform(rng, &[3, 7], -1.0, 1.0);
    (
        vec![x],
        Box::new(|g: &mut Graph, ids: &[NodeId]| {
            let sq = g.mul(ids[0], ids[0]).unwrap();
            g.sum(sq).unwrap()
        }),
        Box::new(|v: &[Vec<f64>]| vec![v[0].iter().map(|a| a * a).sum()]),
    )
}

fn composite(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, h, w, s) = (2, 2, 5, 6, 3);
    let base = uniform(rng, &[n, c, h, w], -1.0, 1.0);
    let patch = uniform(rng, &[c, s, s], -1.0, 1.0);
    let map: Vec<u32> = (0..n * h * w)
        .map(|_| {
            if rng.random::<f32>() < 0.4 {
                rng.random_range(0..(s * s) as u32)
            } else {
                UNCOVERED
            }
        })
        .collect();
    let m2 = map.clone();
    (
        vec![base, patch],
        Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.composite(ids[0], ids[1], map.clone()).unwrap();
            g.mul(y, y).unwrap()
        }),
        Box::new(move |v: &[Vec<f64>]| {
            let mut out = v[0].clone();
            for img in 0..n {
                for ch in 0..c {
                    for px in 0..h * w {
                        let idx = m2[img * h * w + px];
                        if idx != UNCOVERED {
                            out[(img * c + ch) * h * w + px] = v[1][ch * s * s + idx as usize];
                        }
                    }
                }
            }
            out.iter().map(|a| a * a).collect()
        }),
    )
}

/// A conv -> relu -> pool -> dense -> cross-entropy chain, checked with
/// respect to the input image and all parameters.
fn composed_network(rng: &mut ChaCha8Rng) -> Case {
    let x = uniform(rng, &[2, 1, 6, 6], 0.1, 1.0);
    let k = uniform(rng, &[2, 1, 3, 3], 0.1, 1.0);
    let kb = uniform(rng, &[2], 0.1, 0.5);
    let w = uniform(rng, &[3, 8], -1.0, 1.0);
    let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
    let l2 = labels.clone();
    (
        vec![x, k, kb, w],
        Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let c = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0).unwrap();
            let r = g.relu(c);
            let p = g.maxpool2d(r, 2).unwrap();
            let f = g.flatten(p).unwrap();
            let d = g.dense(f, ids[3], None).unwrap();
            g.softmax_cross_entropy(d, &labels).unwrap()
        }),
        Box::new(move |v: &[Vec<f64>]| {
            let (c, cs) = super::conv2d(&v[0], [2, 1, 6, 6], &v[1], [2, 1, 3, 3], Some(&v[2]), 1, 0);
            let r: Vec<f64> = c.iter().map(|a| a.max(0.0)).collect();
            let (p, _) = super::maxpool2d(&r, cs, 2);
            let d = super::dense(&p, 2, 8, &v[3], 3, None);
            vec![super::softmax_cross_entropy(&d, 3, &l2)]
        }),
    )
}
