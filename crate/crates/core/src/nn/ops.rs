//! Dense float kernels used by the training path and the float reference.

use crate::model::{conv_input_coord, Conv3x3};

/// `y = W x` for a row-major `out x in` matrix.
pub fn matvec(weights: &[f64], x: &[f64], out_features: usize) -> Vec<f64> {
    let in_features = x.len();
    debug_assert_eq!(weights.len(), in_features * out_features);
    weights.chunks_exact(in_features).map(|row| dot(row, x)).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lowers one `C x H x W` sample into a `(C * 9) x P` patch matrix, `P` the
/// number of output positions. Halo cells read `pad_value`.
pub fn im2col(
    input: &[f64],
    g: &Conv3x3,
    height: usize,
    width: usize,
    pad_value: f64,
) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = g.output_dims(height, width).expect("conv geometry validated upstream");
    let positions = oh * ow;
    let mut col = vec![pad_value; g.in_ch * 9 * positions];
    for c in 0..g.in_ch {
        let plane = &input[c * height * width..(c + 1) * height * width];
        for k in 0..9 {
            let row = &mut col[(c * 9 + k) * positions..(c * 9 + k + 1) * positions];
            for y in 0..oh {
                for x in 0..ow {
                    if let Some((iy, ix)) = conv_input_coord(g, height, width, y, x, k) {
                        row[y * ow + x] = plane[iy * width + ix];
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// Scatters patch-matrix gradients back onto the input, dropping the halo.
pub fn col2im(grad_col: &[f64], g: &Conv3x3, height: usize, width: usize, grad_input: &mut [f64]) {
    let (oh, ow) = g.output_dims(height, width).expect("conv geometry validated upstream");
    let positions = oh * ow;
    for c in 0..g.in_ch {
        for k in 0..9 {
            let row = &grad_col[(c * 9 + k) * positions..(c * 9 + k + 1) * positions];
            for y in 0..oh {
                for x in 0..ow {
                    if let Some((iy, ix)) = conv_input_coord(g, height, width, y, x, k) {
                        grad_input[c * height * width + iy * width + ix] += row[y * ow + x];
                    }
                }
            }
        }
    }
}

/// `out[o, p] = sum_r W[o, r] * col[r, p]`.
pub fn conv_from_col(weights: &[f64], col: &[f64], out_ch: usize, positions: usize) -> Vec<f64> {
    let rows = weights.len() / out_ch;
    let mut out = vec![0.0; out_ch * positions];
    for o in 0..out_ch {
        let dst = &mut out[o * positions..(o + 1) * positions];
        for r in 0..rows {
            let w = weights[o * rows + r];
            if w == 0.0 {
                continue;
            }
            let src = &col[r * positions..(r + 1) * positions];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

/// Direct 3x3 convolution of one sample.
pub fn conv3x3(
    input: &[f64],
    weights: &[f64],
    g: &Conv3x3,
    height: usize,
    width: usize,
    pad_value: f64,
) -> (Vec<f64>, usize, usize) {
    let (col, oh, ow) = im2col(input, g, height, width, pad_value);
    (conv_from_col(weights, &col, g.out_ch, oh * ow), oh, ow)
}

/// 2x2 stride-2 max pool of one sample; returns outputs and argmax indices.
pub fn maxpool2(input: &[f64], channels: usize, height: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = c * height * width + 2 * y * width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * height * width + (2 * y + dy) * width + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
