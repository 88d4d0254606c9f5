//! The small convolutional classifier and its activation taps.
//!
//! Layout: `conv(32,3x3) relu conv(32,3x3) relu maxpool(2) conv(64,3x3) relu
//! conv(64,3x3) relu maxpool(2) dense(256) relu dense(classes)`, valid
//! padding, stride 1. Each ReLU output is a named tap.

mod checkpoint;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_VERSION};
pub use train::{evaluate_accuracy, train, TrainConfig};

use crate::autodiff::{Graph, NodeId};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::kernels::{self, conv_output_size, ConvGeometry};
use crate::rng::{seeded, Stream};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const POOL: usize = 2;
const CONV_WIDTHS: [usize; 4] = [32, 32, 64, 64];
const HIDDEN: usize = 256;

/// Post-ReLU activation taps, named after the block they follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TapLayer {
    Conv1,
    Conv2,
    Conv3,
    Conv4,
    Hidden,
}

impl TapLayer {
    pub const ALL: [TapLayer; 5] = [
        TapLayer::Conv1,
        TapLayer::Conv2,
        TapLayer::Conv3,
        TapLayer::Conv4,
        TapLayer::Hidden,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapLayer::Conv1 => "1.0",
            TapLayer::Conv2 => "1.1",
            TapLayer::Conv3 => "2.0",
            TapLayer::Conv4 => "2.1",
            TapLayer::Hidden => "3.0",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TapLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TapLayer::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

impl TryFrom<String> for TapLayer {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TapLayer> for String {
    fn from(l: TapLayer) -> String {
        l.name().to_string()
    }
}

/// Input geometry and class count; everything else is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

const ARCH_PREFIX: &str = "smallcnn-v1";

impl Architecture {
    pub fn new(channels: usize, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        let arch = Self {
            channels,
            height,
            width,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn mnist() -> Self {
        Self::new(1, 28, 28, 10).expect("valid")
    }

    pub fn cifar10() -> Self {
        Self::new(3, 32, 32, 10).expect("valid")
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        if self.channels == 0 || self.height != self.width {
            return Err(Error::invalid(format!(
                "input must be square with at least one channel, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if self.spatial_sizes().is_none() {
            return Err(Error::invalid(format!(
                "input {}x{} is too small",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Side lengths after conv1, conv2, pool, conv3, conv4, pool.
    fn spatial_sizes(&self) -> Option<[usize; 6]> {
        let c1 = conv_output_size(self.height, KERNEL, 1, 0)?;
        let c2 = conv_output_size(c1, KERNEL, 1, 0)?;
        let p1 = c2 / POOL;
        let c3 = conv_output_size(p1, KERNEL, 1, 0)?;
        let c4 = conv_output_size(c3, KERNEL, 1, 0)?;
        let p2 = c4 / POOL;
        (p2 > 0).then_some([c1, c2, p1, c3, c4, p2])
    }

    fn flat_features(&self) -> usize {
        let s = self.spatial_sizes().expect("validated")[5];
        s * s * CONV_WIDTHS[3]
    }

    /// Shape `[a_k, a_k, d_k]` of one image's activations at `layer`.
    pub fn tap_shape(&self, layer: TapLayer) -> [usize; 3] {
        let s = self.spatial_sizes().expect("validated");
        match layer {
            TapLayer::Conv1 => [s[0], s[0], CONV_WIDTHS[0]],
            TapLayer::Conv2 => [s[1], s[1], CONV_WIDTHS[1]],
            TapLayer::Conv3 => [s[3], s[3], CONV_WIDTHS[2]],
            TapLayer::Conv4 => [s[4], s[4], CONV_WIDTHS[3]],
            TapLayer::Hidden => [1, 1, HIDDEN],
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [w1, w2, w3, w4] = CONV_WIDTHS;
        vec![
            ("conv1.weight", vec![w1, self.channels, KERNEL, KERNEL]),
            ("conv1.bias", vec![w1]),
            ("conv2.weight", vec![w2, w1, KERNEL, KERNEL]),
            ("conv2.bias", vec![w2]),
            ("conv3.weight", vec![w3, w2, KERNEL, KERNEL]),
            ("conv3.bias", vec![w3]),
            ("conv4.weight", vec![w4, w3, KERNEL, KERNEL]),
            ("conv4.bias", vec![w4]),
            ("fc1.weight", vec![HIDDEN, self.flat_features()]),
            ("fc1.bias", vec![HIDDEN]),
            ("fc2.weight", vec![self.num_classes, HIDDEN]),
            ("fc2.bias", vec![self.num_classes]),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Canonical string form, e.g. `smallcnn-v1:1x28x28:10`.
    pub fn descriptor(&self) -> String {
        format!(
            "{ARCH_PREFIX}:{}x{}x{}:{}",
            self.channels, self.height, self.width, self.num_classes
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unrecognized architecture string `{s}`"));
        let mut parts = s.split(':');
        if parts.next() != Some(ARCH_PREFIX) {
            return Err(bad());
        }
        let dims: Vec<usize> = parts
            .next()
            .ok_or_else(bad)?
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let classes: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if dims.len() != 3 || parts.next().is_some() {
            return Err(bad());
        }
        Self::new(dims[0], dims[1], dims[2], classes)
    }
}

/// Class probabilities and argmax labels for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[N, classes]`, each row summing to one.
    pub probabilities: Tensor,
    pub labels: Vec<usize>,
}

/// Node handles produced by [`SmallCnn::forward_graph`].
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub logits: NodeId,
    /// NCHW tap nodes, indexed by [`TapLayer::index`].
    pub taps: [NodeId; 5],
    /// Parameter leaves in canonical order.
    pub params: Vec<NodeId>,
}

/// Argmax with the lowest index winning ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Images processed per inference chunk; bounds peak memory.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SmallCnn {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl SmallCnn {
    /// He-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = seeded(seed, Stream::Init);
        let params = arch
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Self { arch, params }
    }

    pub fn from_parameters(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(name, t.shape(), shape));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.arch
            .parameter_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.arch.image_shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape("model input", shape, &[0, c, h, w]));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. Parameters enter as variables when
    /// `trainable`, otherwise as constants.
    pub fn forward_graph(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Result<GraphForward> {
        self.check_input(g.value(input).shape())?;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.variable(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let p = &params;
        let c1 = g.conv2d(input, p[0], Some(p[1]), 1, 0)?;
        let t1 = g.relu(c1);
        let c2 = g.conv2d(t1, p[2], Some(p[3]), 1, 0)?;
        let t2 = g.relu(c2);
        let m1 = g.maxpool2d(t2, POOL)?;
        let c3 = g.conv2d(m1, p[4], Some(p[5]), 1, 0)?;
        let t3 = g.relu(c3);
        let c4 = g.conv2d(t3, p[6], Some(p[7]), 1, 0)?;
        let t4 = g.relu(c4);
        let m2 = g.maxpool2d(t4, POOL)?;
        let flat = g.flatten(m2)?;
        let h = g.dense(flat, p[8], Some(p[9]))?;
        let hr = g.relu(h);
        let logits = g.dense(hr, p[10], Some(p[11]))?;
        // the hidden tap is exposed as [N, 256, 1, 1] so every tap is NCHW
        let n = g.value(hr).shape()[0];
        let t5 = g.reshape(hr, &[n, HIDDEN, 1, 1])?;
        Ok(GraphForward {
            logits,
            taps: [t1, t2, t3, t4, t5],
            params,
        })
    }

    /// Tape-free forward pass over raw NCHW data. `visit` receives each tap
    /// (NCHW) as soon as it is computed. Returns logits `[n, classes]`.
    pub fn forward_visit(
        &self,
        images: &[f32],
        n: usize,
        mut visit: impl FnMut(TapLayer, &[f32], [usize; 4]),
    ) -> Result<Vec<f32>> {
        let [c, h, w] = self.arch.image_shape();
        if images.len() != n * c * h * w {
            return Err(Error::shape("model input", &[images.len()], &[n, c, h, w]));
        }
        let p = &self.params;
        let mut x = images.to_vec();
        let mut shape = [n, c, h, w];
        let layers = [TapLayer::Conv1, TapLayer::Conv2, TapLayer::Conv3, TapLayer::Conv4];
        for (i, layer) in layers.into_iter().enumerate() {
            let kernel = &p[2 * i];
            let g = ConvGeometry::new(&shape, kernel.shape(), 1, 0)?;
            let out_shape = g.output_shape();
            let mut out = vec![0.0f32; out_shape.iter().product()];
            kernels::conv2d_forward(&x, kernel.data(), Some(p[2 * i + 1].data()), &g, &mut out);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            visit(layer, &out, out_shape);
            x = out;
            shape = out_shape;
            if i % 2 == 1 {
                let pooled = [shape[0], shape[1], shape[2] / POOL, shape[3] / POOL];
                let mut out = vec![0.0f32; pooled.iter().product()];
                kernels::maxpool2d_forward(&x, shape, POOL, &mut out, None);
                x = out;
                shape = pooled;
            }
        }
        let f = shape[1] * shape[2] * shape[3];
        let mut hidden = vec![0.0f32; n * HIDDEN];
        kernels::dense_forward(&x, p[8].data(), Some(p[9].data()), n, f, HIDDEN, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        visit(TapLayer::Hidden, &hidden, [n, HIDDEN, 1, 1]);
        let classes = self.arch.num_classes;
        let mut logits = vec![0.0f32; n * classes];
        kernels::dense_forward(
            &hidden,
            p[10].data(),
            Some(p[11].data()),
            n,
            HIDDEN,
            classes,
            &mut logits,
        );
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(logits)
    }

    /// Logits `[N, classes]` for a full batch, processed in chunks.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        let mut out = Vec::with_capacity(n * self.arch.num_classes);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let chunk = &images.data()[start * per..end * per];
            out.extend(self.forward_visit(chunk, end - start, |_, _, _| {})?);
        }
        Tensor::new(vec![n, self.arch.num_classes], out)
    }

    /// `F(x)` and `f(x) = argmax F(x)` for every image.
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let logits = self.logits(images)?;
        let classes = self.arch.num_classes;
        let probs = kernels::softmax_rows(logits.data(), classes);
        let labels = logits.data().chunks_exact(classes).map(argmax).collect();
        Ok(Prediction {
            probabilities: Tensor::new(logits.shape().to_vec(), probs)?,
            labels,
        })
    }

    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits.data().chunks_exact(self.arch.num_classes).map(argmax).collect())
    }

    pub fn predict_batch(&self, batch: &ImageBatch) -> Result<Prediction> {
        self.predict(batch.images())
    }

    /// Activations at `layer` as `[N, a_k, a_k, d_k]` (channels last).
    pub fn tap_activations(&self, images: &Tensor, layer: TapLayer) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        let [a, _, d] = self.arch.tap_shape(layer);
        let mut out = vec![0.0f32; n * a * a * d];
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let chunk = &images.data()[start * per..end * per];
            self.forward_visit(chunk, end - start, |l, tap, [cn, cc, ch, cw]| {
                if l != layer {
                    return;
                }
                for img in 0..cn {
                    for ch_i in 0..cc {
                        for y in 0..ch {
                            for x in 0..cw {
                                let src = ((img * cc + ch_i) * ch + y) * cw + x;
                                let dst = (((start + img) * ch + y) * cw + x) * cc + ch_i;
                                out[dst] = tap[src];
                            }
                        }
                    }
                }
            })?;
        }
        Tensor::new(vec![n, a, a, d], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_names_round_trip() {
        for l in TapLayer::ALL {
            assert_eq!(l.name().parse::<TapLayer>().unwrap(), l);
        }
        assert!(matches!("4.2".parse::<TapLayer>(), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn mnist_tap_shapes_follow_conv_formula() {
        let arch = Architecture::mnist();
        assert_eq!(arch.tap_shape(TapLayer::Conv1), [26, 26, 32]);
        assert_eq!(arch.tap_shape(TapLayer::Conv2), [24, 24, 32]);
        assert_eq!(arch.tap_shape(TapLayer::Conv3), [10, 10, 64]);
        assert_eq!(arch.tap_shape(TapLayer::Conv4), [8, 8, 64]);
        assert_eq!(arch.tap_shape(TapLayer::Hidden), [1, 1, 256]);
    }

    #[test]
    fn parameter_count_from_descriptor() {
        let arch = Architecture::parse(&Architecture::mnist().descriptor()).unwrap();
        let expected = (32 * 9 + 32)
            + (32 * 32 * 9 + 32)
            + (64 * 32 * 9 + 64)
            + (64 * 64 * 9 + 64)
            + (256 * 1024 + 256)
            + (10 * 256 + 10);
        assert_eq!(arch.parameter_count(), expected);
        let model = SmallCnn::init(arch, 0);
        assert_eq!(model.parameters().iter().map(Tensor::len).sum::<usize>(), expected);
    }

    #[test]
    fn rejects_single_class() {
        assert!(Architecture::new(1, 28, 28, 1).is_err());
        assert!(Architecture::parse("smallcnn-v1:1x28x28").is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
