//! Raw compute kernels over flat NCHW buffers.
//!
//! These are shared by the differentiable [`Graph`](crate::autodiff::Graph)
//! and by the tape-free inference path in [`model`](crate::model), so both
//! produce bit-identical values for the same inputs.

use crate::error::{Error, Result};

/// Output length of a convolution along one spatial axis:
/// `floor((input + 2 * padding - kernel) / stride) + 1`.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// `input` is `[N, C, H, W]`, `kernel` is `[O, C, K, K]`.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] || kernel[2] != kernel[3] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let out_height = conv_output_size(input[2], kernel[2], stride, padding)
            .ok_or_else(|| Error::shape("conv2d", input, kernel))?;
        let out_width = conv_output_size(input[3], kernel[3], stride, padding)
            .ok_or_else(|| Error::shape("conv2d", input, kernel))?;
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernel[0],
            kernel: kernel[2],
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = alpha * a * b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n`, all strided.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all three operands were bounds-checked above for the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(image: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (oh, ow) = (g.out_height, g.out_width);
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let channel = &image[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &channel[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 && g.padding == 0 {
                        drow.copy_from_slice(&src[kj..kj + ow]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeometry, image: &mut [f32]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (oh, ow) = (g.out_height, g.out_width);
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let channel = &mut image[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut channel[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Writes the convolution of `input` with `kernel` (plus `bias`) into `out`.
pub fn conv2d_forward(input: &[f32], kernel: &[f32], bias: Option<&[f32]>, g: &ConvGeometry, out: &mut [f32]) {
    let rows = g.col_rows();
    let plane = g.out_plane();
    let mut cols = vec![0.0f32; rows * plane];
    for n in 0..g.batch {
        im2col(&input[n * g.in_image()..(n + 1) * g.in_image()], g, &mut cols);
        let o = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        gemm(
            g.out_channels,
            rows,
            plane,
            1.0,
            kernel,
            (rows, 1),
            &cols,
            (plane, 1),
            0.0,
            o,
            (plane, 1),
        );
        if let Some(b) = bias {
            for (oc, row) in o.chunks_exact_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    }
}

/// Accumulates convolution gradients into whichever outputs are requested.
pub fn conv2d_backward(
    input: &[f32],
    kernel: &[f32],
    g: &ConvGeometry,
    grad_out: &[f32],
    mut grad_input: Option<&mut [f32]>,
    mut grad_kernel: Option<&mut [f32]>,
    mut grad_bias: Option<&mut [f32]>,
) {
    let rows = g.col_rows();
    let plane = g.out_plane();
    let mut cols = vec![0.0f32; rows * plane];
    for n in 0..g.batch {
        let dout = &grad_out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if let Some(dk) = grad_kernel.as_deref_mut() {
            im2col(&input[n * g.in_image()..(n + 1) * g.in_image()], g, &mut cols);
            gemm(
                g.out_channels,
                plane,
                rows,
                1.0,
                dout,
                (plane, 1),
                &cols,
                (1, plane),
                1.0,
                dk,
                (rows, 1),
            );
        }
        if let Some(db) = grad_bias.as_deref_mut() {
            for (oc, row) in dout.chunks_exact(plane).enumerate() {
                db[oc] += row.iter().sum::<f32>();
            }
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            gemm(
                rows,
                g.out_channels,
                plane,
                1.0,
                kernel,
                (1, rows),
                dout,
                (plane, 1),
                0.0,
                &mut cols,
                (plane, 1),
            );
            col2im_add(&cols, g, &mut dx[n * g.in_image()..(n + 1) * g.in_image()]);
        }
    }
}

/// Non-overlapping max pooling (window == stride, floor semantics).
/// Returns the flat input index of each selected maximum when `argmax` is given.
pub fn maxpool2d_forward(
    input: &[f32],
    shape: [usize; 4],
    window: usize,
    out: &mut [f32],
    mut argmax: Option<&mut [u32]>,
) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / window, w / window);
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = base + oy * window * w + ox * window;
                for dy in 0..window {
                    let row = base + (oy * window + dy) * w + ox * window;
                    for dx in 0..window {
                        let v = input[row + dx];
                        // strict comparison keeps the first maximum on ties
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out[o] = best;
                if let Some(a) = argmax.as_deref_mut() {
                    a[o] = best_idx as u32;
                }
                o += 1;
            }
        }
    }
}

/// `out[N, O] = x[N, F] * weight[O, F]^T + bias[O]`.
pub fn dense_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, n: usize, f: usize, o: usize, out: &mut [f32]) {
    gemm(n, f, o, 1.0, x, (f, 1), weight, (1, f), 0.0, out, (o, 1));
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    x: &[f32],
    weight: &[f32],
    n: usize,
    f: usize,
    o: usize,
    grad_out: &[f32],
    grad_x: Option<&mut [f32]>,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    if let Some(dx) = grad_x {
        gemm(n, o, f, 1.0, grad_out, (o, 1), weight, (f, 1), 1.0, dx, (f, 1));
    }
    if let Some(dw) = grad_weight {
        gemm(o, n, f, 1.0, grad_out, (1, o), x, (f, 1), 1.0, dw, (f, 1));
    }
    if let Some(db) = grad_bias {
        for row in grad_out.chunks_exact(o) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
    }
}

/// Row-wise softmax of `logits[N, C]`, computed with a max shift.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut probs = vec![0.0f32; logits.len()];
    for (row, p) in logits.chunks_exact(classes).zip(probs.chunks_exact_mut(classes)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (pi, &l) in p.iter_mut().zip(row) {
            let e = ((l - max) as f64).exp();
            *pi = e as f32;
            total += e;
        }
        for (pi, &l) in p.iter_mut().zip(row) {
            *pi = (((l - max) as f64).exp() / total) as f32;
        }
    }
    probs
}

/// Mean cross-entropy of `logits[N, C]` against integer labels, plus the softmax.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f32, Vec<f32>) {
    let probs = softmax_rows(logits, classes);
    let mut total = 0.0f64;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[label] as f64;
    }
    ((total / labels.len() as f64) as f32, probs)
}

/// Per-channel spatial mean and population standard deviation of an NCHW
/// buffer, accumulated in `f64` in row-major order and rounded to `f32`.
pub fn spatial_mean_std(input: &[f32], planes: usize, plane_len: usize, mean: &mut [f32], std: &mut [f32]) {
    for p in 0..planes {
        let (m, s) = plane_mean_std(&input[p * plane_len..(p + 1) * plane_len]);
        mean[p] = m as f32;
        std[p] = s as f32;
    }
}

/// Two-pass mean and population standard deviation of one feature map.
pub fn plane_mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_formula() {
        assert_eq!(conv_output_size(28, 3, 1, 0), Some(26));
        assert_eq!(conv_output_size(5, 3, 2, 1), Some(3));
        assert_eq!(conv_output_size(2, 3, 1, 0), None);
        assert_eq!(conv_output_size(4, 3, 0, 0), None);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let g = ConvGeometry::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 0).unwrap();
        let mut out = [0.0];
        conv2d_forward(&[1.0; 9], &[1.0; 9], None, &g, &mut out);
        assert_eq!(out, [9.0]);
    }

    #[test]
    fn strided_padded_conv_matches_direct_loop() {
        let (c, h, w, o, k, s, p) = (2, 5, 4, 3, 3, 2, 1);
        let input: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let kernel: Vec<f32> = (0..o * c * k * k).map(|i| (i as f32 * 0.11).cos()).collect();
        let g = ConvGeometry::new(&[1, c, h, w], &[o, c, k, k], s, p).unwrap();
        let mut out = vec![0.0; o * g.out_height * g.out_width];
        conv2d_forward(&input, &kernel, None, &g, &mut out);
        for oc in 0..o {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    let mut acc = 0.0f32;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += input[(ic * h + iy as usize) * w + ix as usize]
                                        * kernel[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    let got = out[(oc * g.out_height + oy) * g.out_width + ox];
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn maxpool_keeps_first_max() {
        let input = [1.0, 3.0, 3.0, 2.0];
        let mut out = [0.0];
        let mut arg = [0u32];
        maxpool2d_forward(&input, [1, 1, 2, 2], 2, &mut out, Some(&mut arg));
        assert_eq!(out, [3.0]);
        assert_eq!(arg, [1]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, probs) = softmax_cross_entropy(&[0.5; 10], &[3], 10);
        assert!((loss - (10f32).ln()).abs() < 1e-6);
        assert!(probs.iter().all(|&p| (p - 0.1).abs() < 1e-7));
    }

    #[test]
    fn mean_std_by_hand() {
        let (m, s) = plane_mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.118_033_988_749_895).abs() < 1e-12);
    }
}
