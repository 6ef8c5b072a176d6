//! Forward pass and exact backpropagation over a resolved [`Layout`].
//!
//! Everything here is generic over the scalar so the same code runs in `f32`
//! for training and in `f64` for gradient checking. Callers validate shapes;
//! these routines assume `params.len() == layout.param_count` and
//! `images.len()` is a positive multiple of the input volume.

use std::fmt::Debug;

use num_traits::Float;

use super::spec::{Layer, LayerLayout, Layout};

pub trait Real: Float + Debug + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Supervision for the cross-entropy loss.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a, T> {
    /// One class id per example.
    Hard(&'a [usize]),
    /// One probability row of length K per example.
    Soft(&'a [T]),
}

impl<T> Targets<'_, T> {
    pub fn len(&self, classes: usize) -> usize {
        match self {
            Targets::Hard(labels) => labels.len(),
            Targets::Soft(rows) => rows.len() / classes,
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for lane in 0..8 {
            acc[lane] = acc[lane] + x[lane] * y[lane];
        }
    }
    let mut sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        sum = sum + x * y;
    }
    sum
}

#[inline]
fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + alpha * x;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Copies the receptive field of output position (oy, ox) into `patch`,
/// ordered (ky, kx, channel) to match the conv weight layout.
#[inline]
fn gather_patch<T: Real>(
    image: &[T],
    input: (usize, usize),
    kernel: usize,
    stride: usize,
    oy: usize,
    ox: usize,
    patch: &mut [T],
) {
    let (width, channels) = input;
    let row_len = kernel * channels;
    for ky in 0..kernel {
        let start = ((oy * stride + ky) * width + ox * stride) * channels;
        patch[ky * row_len..(ky + 1) * row_len].copy_from_slice(&image[start..start + row_len]);
    }
}

#[inline]
fn scatter_patch<T: Real>(
    grad_image: &mut [T],
    input: (usize, usize),
    kernel: usize,
    stride: usize,
    oy: usize,
    ox: usize,
    patch: &[T],
) {
    let (width, channels) = input;
    let row_len = kernel * channels;
    for ky in 0..kernel {
        let start = ((oy * stride + ky) * width + ox * stride) * channels;
        axpy(
            &mut grad_image[start..start + row_len],
            T::one(),
            &patch[ky * row_len..(ky + 1) * row_len],
        );
    }
}

fn layer_forward<T: Real>(l: &LayerLayout, params: &[T], x: &[T], batch: usize) -> Vec<T> {
    let in_len = l.input.len();
    let out_len = l.output.len();
    match l.layer {
        Layer::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
        Layer::Flatten => x.to_vec(),
        Layer::Dense { width } => {
            let w = &params[l.weight_offset..l.weight_offset + l.weight_len];
            let bias = &params[l.bias_offset..l.bias_offset + l.bias_len];
            let mut out = vec![T::zero(); batch * width];
            for (xb, ob) in x.chunks_exact(in_len).zip(out.chunks_exact_mut(width)) {
                for (o, (row, &b)) in ob.iter_mut().zip(w.chunks_exact(in_len).zip(bias)) {
                    *o = b + dot(row, xb);
                }
            }
            out
        }
        Layer::Conv {
            kernel,
            channels,
            stride,
        } => {
            let w = &params[l.weight_offset..l.weight_offset + l.weight_len];
            let bias = &params[l.bias_offset..l.bias_offset + l.bias_len];
            let patch_len = kernel * kernel * l.input.channels;
            let mut patch = vec![T::zero(); patch_len];
            let mut out = vec![T::zero(); batch * out_len];
            for (xb, ob) in x.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
                for oy in 0..l.output.height {
                    for ox in 0..l.output.width {
                        gather_patch(
                            xb,
                            (l.input.width, l.input.channels),
                            kernel,
                            stride,
                            oy,
                            ox,
                            &mut patch,
                        );
                        let o = &mut ob[(oy * l.output.width + ox) * channels..][..channels];
                        for (o, (row, &b)) in o.iter_mut().zip(w.chunks_exact(patch_len).zip(bias)) {
                            *o = b + dot(row, &patch);
                        }
                    }
                }
            }
            out
        }
    }
}

/// Propagates `dy` back through one layer, accumulating parameter gradients
/// into `grad`. Returns the input gradient when `need_dx` is set.
fn layer_backward<T: Real>(
    l: &LayerLayout,
    params: &[T],
    x: &[T],
    y: &[T],
    dy: &[T],
    batch: usize,
    grad: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let in_len = l.input.len();
    let out_len = l.output.len();
    match l.layer {
        Layer::Relu => need_dx.then(|| {
            y.iter()
                .zip(dy)
                .map(|(&out, &g)| if out > T::zero() { g } else { T::zero() })
                .collect()
        }),
        Layer::Flatten => need_dx.then(|| dy.to_vec()),
        Layer::Dense { width } => {
            let w = &params[l.weight_offset..l.weight_offset + l.weight_len];
            let mut dx = if need_dx {
                vec![T::zero(); batch * in_len]
            } else {
                Vec::new()
            };
            let (gw, gb) = grad[l.weight_offset..l.bias_offset + l.bias_len].split_at_mut(l.weight_len);
            for b in 0..batch {
                let xb = &x[b * in_len..(b + 1) * in_len];
                let gyb = &dy[b * width..(b + 1) * width];
                for (o, &g) in gyb.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    gb[o] = gb[o] + g;
                    axpy(&mut gw[o * in_len..(o + 1) * in_len], g, xb);
                    if need_dx {
                        axpy(
                            &mut dx[b * in_len..(b + 1) * in_len],
                            g,
                            &w[o * in_len..(o + 1) * in_len],
                        );
                    }
                }
            }
            need_dx.then_some(dx)
        }
        Layer::Conv {
            kernel,
            channels,
            stride,
        } => {
            let w = &params[l.weight_offset..l.weight_offset + l.weight_len];
            let patch_len = kernel * kernel * l.input.channels;
            let mut patch = vec![T::zero(); patch_len];
            let mut dpatch = vec![T::zero(); patch_len];
            let mut dx = if need_dx {
                vec![T::zero(); batch * in_len]
            } else {
                Vec::new()
            };
            let (gw, gb) = grad[l.weight_offset..l.bias_offset + l.bias_len].split_at_mut(l.weight_len);
            let geometry = (l.input.width, l.input.channels);
            for b in 0..batch {
                let xb = &x[b * in_len..(b + 1) * in_len];
                let gyb = &dy[b * out_len..(b + 1) * out_len];
                for oy in 0..l.output.height {
                    for ox in 0..l.output.width {
                        let go = &gyb[(oy * l.output.width + ox) * channels..][..channels];
                        if go.iter().all(|&g| g == T::zero()) {
                            continue;
                        }
                        gather_patch(xb, geometry, kernel, stride, oy, ox, &mut patch);
                        if need_dx {
                            dpatch.iter_mut().for_each(|v| *v = T::zero());
                        }
                        for (c, &g) in go.iter().enumerate() {
                            if g == T::zero() {
                                continue;
                            }
                            gb[c] = gb[c] + g;
                            axpy(&mut gw[c * patch_len..(c + 1) * patch_len], g, &patch);
                            if need_dx {
                                axpy(&mut dpatch, g, &w[c * patch_len..(c + 1) * patch_len]);
                            }
                        }
                        if need_dx {
                            scatter_patch(
                                &mut dx[b * in_len..(b + 1) * in_len],
                                geometry,
                                kernel,
                                stride,
                                oy,
                                ox,
                                &dpatch,
                            );
                        }
                    }
                }
            }
            need_dx.then_some(dx)
        }
    }
}

/// Logits for a batch, `[batch, classes]` row-major.
pub fn forward_with<T: Real>(layout: &Layout, params: &[T], images: &[T]) -> Vec<T> {
    let batch = images.len() / layout.input_len();
    let mut current = images.to_vec();
    for l in &layout.layers {
        current = layer_forward(l, params, &current, batch);
    }
    current
}

/// Replaces logits with their softmax, computed exactly as the loss does.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom = denom + *v;
    }
    for v in row.iter_mut() {
        *v = *v / denom;
    }
}

/// Mean loss and the gradient of the mean loss w.r.t. the logits.
fn softmax_cross_entropy<T: Real>(
    logits: &[T],
    classes: usize,
    targets: Targets<'_, T>,
) -> (T, Vec<T>) {
    let batch = logits.len() / classes;
    let scale = T::one() / T::from(batch).unwrap();
    let mut total = T::zero();
    let mut dlogits = vec![T::zero(); logits.len()];
    for (b, (z, dz)) in logits
        .chunks_exact(classes)
        .zip(dlogits.chunks_exact_mut(classes))
        .enumerate()
    {
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (d, &v) in dz.iter_mut().zip(z) {
            *d = (v - max).exp();
            denom = denom + *d;
        }
        let lse = max + denom.ln();
        for d in dz.iter_mut() {
            *d = *d / denom;
        }
        match targets {
            Targets::Hard(labels) => {
                let y = labels[b];
                total = total + (lse - z[y]);
                dz[y] = dz[y] - T::one();
            }
            Targets::Soft(rows) => {
                let p = &rows[b * classes..(b + 1) * classes];
                for ((d, &pk), &zk) in dz.iter_mut().zip(p).zip(z) {
                    if pk != T::zero() {
                        total = total + pk * (lse - zk);
                    }
                    *d = *d - pk;
                }
            }
        }
        for d in dz.iter_mut() {
            *d = *d * scale;
        }
    }
    (total * scale, dlogits)
}

/// Mean softmax cross-entropy over the batch.
pub fn loss_with<T: Real>(layout: &Layout, params: &[T], images: &[T], targets: Targets<'_, T>) -> T {
    let logits = forward_with(layout, params, images);
    softmax_cross_entropy(&logits, layout.classes, targets).0
}

/// Mean softmax cross-entropy and its exact gradient w.r.t. all parameters.
pub fn loss_and_grad_with<T: Real>(
    layout: &Layout,
    params: &[T],
    images: &[T],
    targets: Targets<'_, T>,
) -> (T, Vec<T>) {
    let batch = images.len() / layout.input_len();
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(layout.layers.len() + 1);
    acts.push(images.to_vec());
    for l in &layout.layers {
        let next = layer_forward(l, params, acts.last().unwrap(), batch);
        acts.push(next);
    }
    let (loss, mut dy) = softmax_cross_entropy(acts.last().unwrap(), layout.classes, targets);
    let mut grad = vec![T::zero(); layout.param_count];
    for (i, l) in layout.layers.iter().enumerate().rev() {
        // The first parametric layer never needs an input gradient.
        let need_dx = layout.layers[..i].iter().any(|p| p.has_params());
        match layer_backward(l, params, &acts[i], &acts[i + 1], &dy, batch, &mut grad, need_dx) {
            Some(dx) => dy = dx,
            None => break,
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_sequential_sum_on_short_and_long_inputs() {
        for n in [0usize, 1, 7, 8, 9, 31] {
            let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
            let b: Vec<f64> = (0..n).map(|i| 2.0 - i as f64 * 0.25).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 5]), 0);
    }

    #[test]
    fn soft_targets_matching_prediction_give_zero_logit_gradient() {
        let logits = [0.3f64, -1.2, 2.0];
        let max = 2.0f64;
        let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|z| (z - max).exp() / denom).collect();
        let (_, d) = softmax_cross_entropy(&logits, 3, Targets::Soft(&probs));
        assert!(d.iter().all(|v| v.abs() < 1e-15));
    }
}
