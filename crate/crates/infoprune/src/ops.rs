//! Numerical kernels: convolution, pooling, dense layers, the classification
//! loss and the SGD update rule.
//!
//! Convolution follows the cross-correlation convention (no kernel flip) and
//! is implemented as im2col plus a small matrix product. Every kernel is a
//! pure function of its inputs; batch-parallel sections write disjoint output
//! ranges with a fixed per-element summation order, so results are identical
//! for any worker count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Output spatial extent of a convolution or pooling window.
#[inline]
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn check_conv_shapes(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if input.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d input must be 4-d [batch, channels, h, w], got {:?}",
            input.shape()
        )));
    }
    if weights.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d weights must be 4-d [out, in, k, k], got {:?}",
            weights.shape()
        )));
    }
    let (batch, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (c_out, w_cin, kh, kw) = (
        weights.dim(0),
        weights.dim(1),
        weights.dim(2),
        weights.dim(3),
    );
    if kh != kw {
        return Err(Error::Dimension(format!(
            "kernel axes must be square, got {kh}x{kw}"
        )));
    }
    if w_cin != c_in {
        return Err(Error::Dimension(format!(
            "channel axis mismatch: input has {c_in} channels, weights expect {w_cin}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Dimension(format!(
            "bias axis mismatch: weights produce {c_out} channels, bias has {}",
            bias.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Input("stride must be at least 1".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::Dimension(format!(
            "kernel {kh}x{kw} exceeds padded input {}x{} on the spatial axes",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let h_out = conv_out_extent(h, kh, stride, padding);
    let w_out = conv_out_extent(w, kw, stride, padding);
    Ok((batch, c_in, h, w, c_out, kh, h_out, w_out))
}

/// Unrolls one image into a `[c_in*k*k, h_out*w_out]` patch matrix.
/// Out-of-bounds (padding) positions contribute zero.
fn im2col(
    image: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let patches = h_out * w_out;
    let mut col = vec![0.0; c_in * k * k * patches];
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out_row = &mut col[row * patches..(row + 1) * patches];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &image[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out_row[oy * w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the image layout.
fn col2im_add(
    grad_col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    grad_image: &mut [f64],
) {
    let patches = h_out * w_out;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = &grad_col[row * patches..(row + 1) * patches];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst =
                        &mut grad_image[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += col_row[oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation of a batched input with a filter bank.
///
/// `input` is `[batch, c_in, h, w]`, `weights` is `[c_out, c_in, k, k]`,
/// output is `[batch, c_out, h', w']` with `h' = (h + 2p - k)/stride + 1`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, c_in, h, w, c_out, k, h_out, w_out) =
        check_conv_shapes(input, weights, bias, stride, padding)?;
    let patches = h_out * w_out;
    let ckk = c_in * k * k;
    let chw = c_in * h * w;
    let w_data = weights.data();

    let mut out = Tensor::zeros(&[batch, c_out, h_out, w_out]);
    out.data_mut()
        .par_chunks_mut(c_out * patches)
        .enumerate()
        .for_each(|(b, out_image)| {
            let image = &input.data()[b * chw..(b + 1) * chw];
            let col = im2col(image, c_in, h, w, k, stride, padding, h_out, w_out);
            for co in 0..c_out {
                let out_row = &mut out_image[co * patches..(co + 1) * patches];
                out_row.fill(bias[co]);
                let w_row = &w_data[co * ckk..(co + 1) * ckk];
                for (r, &wv) in w_row.iter().enumerate() {
                    let col_row = &col[r * patches..(r + 1) * patches];
                    for (o, &c) in out_row.iter_mut().zip(col_row) {
                        *o += wv * c;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
/// `input` and `weights` must be the tensors of the matching forward call.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c_out = weights.dim(0);
    let bias_probe = vec![0.0; c_out];
    let (batch, c_in, h, w, _, k, h_out, w_out) =
        check_conv_shapes(input, weights, &bias_probe, stride, padding)?;
    let expected = [batch, c_out, h_out, w_out];
    if grad_out.shape() != expected {
        return Err(Error::Dimension(format!(
            "grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let patches = h_out * w_out;
    let ckk = c_in * k * k;
    let chw = c_in * h * w;

    // Patch matrices are shared by the weight and input gradients.
    let cols: Vec<Vec<f64>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let image = &input.data()[b * chw..(b + 1) * chw];
            im2col(image, c_in, h, w, k, stride, padding, h_out, w_out)
        })
        .collect();

    let mut grad_bias = vec![0.0; c_out];
    for b in 0..batch {
        for co in 0..c_out {
            let g = &grad_out.data()[(b * c_out + co) * patches..(b * c_out + co + 1) * patches];
            grad_bias[co] += g.iter().sum::<f64>();
        }
    }

    // grad_W[co][r] = sum_b sum_p gout[b,co,p] * col_b[r,p]; one task per
    // output channel keeps the batch summation order fixed.
    let mut grad_weights = Tensor::zeros(weights.shape());
    grad_weights
        .data_mut()
        .par_chunks_mut(ckk)
        .enumerate()
        .for_each(|(co, gw_row)| {
            for (b, col) in cols.iter().enumerate() {
                let g =
                    &grad_out.data()[(b * c_out + co) * patches..(b * c_out + co + 1) * patches];
                for (r, gw) in gw_row.iter_mut().enumerate() {
                    let col_row = &col[r * patches..(r + 1) * patches];
                    let mut acc = 0.0;
                    for (gv, cv) in g.iter().zip(col_row) {
                        acc += gv * cv;
                    }
                    *gw += acc;
                }
            }
        });

    let w_data = weights.data();
    let mut grad_input = Tensor::zeros(input.shape());
    grad_input
        .data_mut()
        .par_chunks_mut(chw)
        .enumerate()
        .for_each(|(b, grad_image)| {
            let mut grad_col = vec![0.0; ckk * patches];
            for co in 0..c_out {
                let g =
                    &grad_out.data()[(b * c_out + co) * patches..(b * c_out + co + 1) * patches];
                let w_row = &w_data[co * ckk..(co + 1) * ckk];
                for (r, &wv) in w_row.iter().enumerate() {
                    let gc_row = &mut grad_col[r * patches..(r + 1) * patches];
                    for (gc, &gv) in gc_row.iter_mut().zip(g) {
                        *gc += wv * gv;
                    }
                }
            }
            col2im_add(
                &grad_col, c_in, h, w, k, stride, padding, h_out, w_out, grad_image,
            );
        });

    Ok((grad_input, grad_weights, grad_bias))
}

/// 2x2 max pooling with stride 2. Odd trailing rows or columns are dropped.
pub fn maxpool2_forward(input: &Tensor) -> Result<Tensor> {
    if input.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "maxpool input must be 4-d, got {:?}",
            input.shape()
        )));
    }
    let (batch, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "maxpool needs spatial extents of at least 2, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[batch, c, ho, wo]);
    for b in 0..batch {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let v = input.at4(b, ci, oy * 2 + ky, ox * 2 + kx);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.set4(b, ci, oy, ox, best);
                }
            }
        }
    }
    Ok(out)
}

/// Routes each pooled gradient to the first maximal entry of its window
/// (fixed scan order breaks ties deterministically).
pub fn maxpool2_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (batch, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    if grad_out.shape() != [batch, c, ho, wo] {
        return Err(Error::Dimension(format!(
            "maxpool grad_out shape {:?} does not match pooled output {:?}",
            grad_out.shape(),
            [batch, c, ho, wo]
        )));
    }
    let mut grad_input = Tensor::zeros(input.shape());
    for b in 0..batch {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let (mut by, mut bx) = (0, 0);
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let v = input.at4(b, ci, oy * 2 + ky, ox * 2 + kx);
                            if v > best {
                                best = v;
                                by = oy * 2 + ky;
                                bx = ox * 2 + kx;
                            }
                        }
                    }
                    let g = grad_out.at4(b, ci, oy, ox);
                    let idx = grad_input.idx4(b, ci, by, bx);
                    grad_input.data_mut()[idx] += g;
                }
            }
        }
    }
    Ok(grad_input)
}

/// Collapses each channel plane to its spatial mean: `[b,c,h,w] -> [b,c,1,1]`.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    if input.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "global average pool input must be 4-d, got {:?}",
            input.shape()
        )));
    }
    let (batch, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros(&[batch, c, 1, 1]);
    for b in 0..batch {
        for ci in 0..c {
            let mean = input.plane(b, ci).iter().sum::<f64>() / hw;
            out.set4(b, ci, 0, 0, mean);
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (batch, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if grad_out.shape() != [batch, c, 1, 1] {
        return Err(Error::Dimension(format!(
            "global average pool grad_out shape {:?} does not match {:?}",
            grad_out.shape(),
            [batch, c, 1, 1]
        )));
    }
    let hw = (h * w) as f64;
    let mut grad_input = Tensor::zeros(input.shape());
    for b in 0..batch {
        for ci in 0..c {
            let g = grad_out.at4(b, ci, 0, 0) / hw;
            let start = grad_input.idx4(b, ci, 0, 0);
            for v in &mut grad_input.data_mut()[start..start + h * w] {
                *v = g;
            }
        }
    }
    Ok(grad_input)
}

/// Fully connected layer: `[batch, in] x [out, in]^T + bias -> [batch, out]`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    if input.ndim() != 2 || weights.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "dense expects 2-d input and weights, got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    let (batch, features) = (input.dim(0), input.dim(1));
    let (out_features, w_in) = (weights.dim(0), weights.dim(1));
    if w_in != features {
        return Err(Error::Dimension(format!(
            "feature axis mismatch: input has {features}, weights expect {w_in}"
        )));
    }
    if bias.len() != out_features {
        return Err(Error::Dimension(format!(
            "bias axis mismatch: weights produce {out_features}, bias has {}",
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(&[batch, out_features]);
    for b in 0..batch {
        let x = &input.data()[b * features..(b + 1) * features];
        let o = &mut out.data_mut()[b * out_features..(b + 1) * out_features];
        for (of, ov) in o.iter_mut().enumerate() {
            let w_row = &weights.data()[of * features..(of + 1) * features];
            let mut acc = bias[of];
            for (xv, wv) in x.iter().zip(w_row) {
                acc += xv * wv;
            }
            *ov = acc;
        }
    }
    Ok(out)
}

pub fn dense_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (batch, features) = (input.dim(0), input.dim(1));
    let out_features = weights.dim(0);
    if grad_out.shape() != [batch, out_features] {
        return Err(Error::Dimension(format!(
            "dense grad_out shape {:?} does not match output {:?}",
            grad_out.shape(),
            [batch, out_features]
        )));
    }
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![0.0; out_features];
    let mut grad_input = Tensor::zeros(input.shape());
    for b in 0..batch {
        let x = &input.data()[b * features..(b + 1) * features];
        let g = &grad_out.data()[b * out_features..(b + 1) * out_features];
        for (of, &gv) in g.iter().enumerate() {
            grad_bias[of] += gv;
            let gw_row = &mut grad_weights.data_mut()[of * features..(of + 1) * features];
            for (gw, &xv) in gw_row.iter_mut().zip(x) {
                *gw += gv * xv;
            }
        }
        let gi = &mut grad_input.data_mut()[b * features..(b + 1) * features];
        for (of, &gv) in g.iter().enumerate() {
            let w_row = &weights.data()[of * features..(of + 1) * features];
            for (giv, &wv) in gi.iter_mut().zip(w_row) {
                *giv += gv * wv;
            }
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::Dimension(format!(
            "relu grad_out shape {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = grad_out
        .iter()
        .zip(input.iter())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Row-wise softmax probabilities of a `[batch, classes]` logit tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "softmax expects 2-d logits, got {:?}",
            logits.shape()
        )));
    }
    let (batch, classes) = (logits.dim(0), logits.dim(1));
    let mut probs = Tensor::zeros(&[batch, classes]);
    for b in 0..batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut probs.data_mut()[b * classes..(b + 1) * classes];
        let mut denom = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            denom += *o;
        }
        for o in out.iter_mut() {
            *o /= denom;
        }
    }
    Ok(probs)
}

/// Mean negative log-likelihood of the labels under row-wise softmax,
/// with its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = (logits.dim(0), logits.dim(1));
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "batch axis mismatch: logits have {batch} rows, got {} labels",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Input("cannot compute loss on an empty batch".into()));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Input(format!(
                "label {l} at position {i} is out of range for {classes} classes"
            )));
        }
    }
    let mut grad = softmax_rows(logits)?;
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        // Clamp away from zero: a fully saturated wrong-class softmax in f64
        // underflows to exactly 0.
        loss -= row[label].max(1e-300).ln();
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// Momentum buffers for [`sgd_step`], one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn for_params(params: &[Tensor]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One SGD update: `v <- momentum*v + grad + weight_decay*param`,
/// `param <- param - lr*v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Input(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Dimension(format!(
            "parameter group sizes differ: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.velocity)
        .enumerate()
    {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "parameter {i}: shape {:?} does not match gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{central_diff_check, naive_conv2d, SplitMix};

    #[test]
    fn conv_scalar_scaling() {
        let input = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let weights = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let out = conv2d_forward(&input, &weights, &[0.0], 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_window_trace() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let weights = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d_forward(&input, &weights, &[0.0], 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 5.0);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = SplitMix::new(7);
        let input = rng.uniform_tensor(&[2, 3, 8, 8]);
        let weights = rng.uniform_tensor(&[4, 3, 3, 3]);
        let bias: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        for &(stride, padding) in &[(1, 0), (1, 1), (2, 1)] {
            let fast = conv2d_forward(&input, &weights, &bias, stride, padding).unwrap();
            let slow = naive_conv2d(&input, &weights, &bias, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input_and_weights() {
        let mut rng = SplitMix::new(11);
        let x1 = rng.uniform_tensor(&[1, 2, 5, 5]);
        let x2 = rng.uniform_tensor(&[1, 2, 5, 5]);
        let w1 = rng.uniform_tensor(&[3, 2, 3, 3]);
        let w2 = rng.uniform_tensor(&[3, 2, 3, 3]);
        let bias = vec![0.0; 3];

        let sum_x = x1.add(&x2).unwrap();
        let lhs = conv2d_forward(&sum_x, &w1, &bias, 1, 1).unwrap();
        let rhs = conv2d_forward(&x1, &w1, &bias, 1, 1)
            .unwrap()
            .add(&conv2d_forward(&x2, &w1, &bias, 1, 1).unwrap())
            .unwrap();
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }

        let sum_w = w1.add(&w2).unwrap();
        let lhs = conv2d_forward(&x1, &sum_w, &bias, 1, 1).unwrap();
        let rhs = conv2d_forward(&x1, &w1, &bias, 1, 1)
            .unwrap()
            .add(&conv2d_forward(&x1, &w2, &bias, 1, 1).unwrap())
            .unwrap();
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let input = Tensor::zeros(&[1, 3, 4, 4]);
        let weights = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d_forward(&input, &weights, &[0.0; 2], 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel axis"));
        let weights = Tensor::zeros(&[2, 3, 7, 7]);
        let err = conv2d_forward(&input, &weights, &[0.0; 2], 1, 0).unwrap_err();
        assert!(err.to_string().contains("spatial axes"));
    }

    #[test]
    fn conv_backward_zero_grad_out() {
        let mut rng = SplitMix::new(3);
        let input = rng.uniform_tensor(&[1, 2, 4, 4]);
        let weights = rng.uniform_tensor(&[2, 2, 3, 3]);
        let gout = Tensor::zeros(&[1, 2, 4, 4]);
        let (gi, gw, gb) = conv2d_backward(&gout, &input, &weights, 1, 1).unwrap();
        assert!(gi.iter().all(|&v| v == 0.0));
        assert!(gw.iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_chain_rule() {
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let weights = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let gout = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let (gi, gw, gb) = conv2d_backward(&gout, &input, &weights, 1, 0).unwrap();
        assert_eq!(gw.data()[0], 6.0); // input * grad_out
        assert_eq!(gi.data()[0], 10.0); // weight * grad_out
        assert_eq!(gb[0], 2.0);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = SplitMix::new(19);
        let input = rng.uniform_tensor(&[2, 2, 5, 5]);
        let weights = rng.uniform_tensor(&[3, 2, 3, 3]);
        let bias: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let gout = rng.uniform_tensor(&[2, 3, 5, 5]);
        let (gi, gw, gb) = conv2d_backward(&gout, &input, &weights, 1, 1).unwrap();

        let loss = |inp: &Tensor, wts: &Tensor, bs: &[f64]| {
            let out = conv2d_forward(inp, wts, bs, 1, 1).unwrap();
            out.iter().zip(gout.iter()).map(|(o, g)| o * g).sum::<f64>()
        };
        central_diff_check(&input, &gi, 1e-5, 1e-4, |t| loss(t, &weights, &bias));
        central_diff_check(&weights, &gw, 1e-5, 1e-4, |t| loss(&input, t, &bias));
        for j in 0..bias.len() {
            let mut plus = bias.clone();
            plus[j] += 1e-5;
            let mut minus = bias.clone();
            minus[j] -= 1e-5;
            let fd = (loss(&input, &weights, &plus) - loss(&input, &weights, &minus)) / 2e-5;
            let denom = fd.abs().max(gb[j].abs()).max(1e-8);
            assert!((fd - gb[j]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn maxpool_forward_and_backward_route() {
        let input =
            Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 2.0, 5.0, 3.0, 4.0, 0.0, 1.0, 1.0]).unwrap();
        let out = maxpool2_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data(), &[4.0, 5.0]);
        let gout = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let gin = maxpool2_backward(&gout, &input).unwrap();
        assert_eq!(gin.data(), &[0.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_roundtrip() {
        let input = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = global_avg_pool_forward(&input).unwrap();
        assert_eq!(out.data(), &[2.0, 6.0]);
        let gout = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
        let gin = global_avg_pool_backward(&gout, &input).unwrap();
        assert_eq!(gin.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = SplitMix::new(23);
        let input = rng.uniform_tensor(&[3, 4]);
        let weights = rng.uniform_tensor(&[5, 4]);
        let gout = rng.uniform_tensor(&[3, 5]);
        let (gi, gw, _) = dense_backward(&gout, &input, &weights).unwrap();
        let loss = |inp: &Tensor, wts: &Tensor| {
            let out = dense_forward(inp, wts, &[0.0; 5]).unwrap();
            out.iter().zip(gout.iter()).map(|(o, g)| o * g).sum::<f64>()
        };
        central_diff_check(&input, &gi, 1e-5, 1e-4, |t| loss(t, &weights));
        central_diff_check(&weights, &gw, 1e-5, 1e-4, |t| loss(&input, t));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[4, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logit() {
        let mut logits = Tensor::zeros(&[1, 5]);
        logits.data_mut()[2] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = SplitMix::new(31);
        let logits = rng.uniform_tensor(&[3, 6]);
        let labels = [1usize, 0, 5];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        central_diff_check(&logits, &grad, 1e-5, 1e-4, |t| {
            softmax_cross_entropy(t, &labels).unwrap().0
        });
    }

    #[test]
    fn sgd_vanilla_and_identity() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()];
        let grads = vec![Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap()];
        let mut state = SgdState::for_params(&params);
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(params[0].data(), &[0.95, 2.1]);

        let zero = vec![Tensor::zeros(&[2])];
        let mut params2 = vec![Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()];
        let mut state2 = SgdState::for_params(&params2);
        sgd_step(&mut params2, &zero, &mut state2, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(params2[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn sgd_momentum_matches_scalar_recurrence() {
        let (lr, mu, wd, g) = (0.1, 0.9, 0.01, 0.5);
        let mut params = vec![Tensor::from_vec(&[1], vec![2.0]).unwrap()];
        let grads = vec![Tensor::from_vec(&[1], vec![g]).unwrap()];
        let mut state = SgdState::for_params(&params);

        // Hand-rolled recurrence for two steps.
        let mut p = 2.0;
        let mut v = 0.0;
        for _ in 0..2 {
            v = mu * v + g + wd * p;
            p -= lr * v;
        }
        sgd_step(&mut params, &grads, &mut state, lr, mu, wd).unwrap();
        sgd_step(&mut params, &grads, &mut state, lr, mu, wd).unwrap();
        assert!((params[0].data()[0] - p).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = SgdState::for_params(&params);
        assert!(matches!(
            sgd_step(&mut params, &grads, &mut state, 0.1, 0.0, 0.0),
            Err(Error::Dimension(_))
        ));
    }
}
