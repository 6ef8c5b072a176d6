//! One seeded pass of minibatch training, shared by embedding and attacks.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::nn::{loss_and_grad_in, Layout, NnError, OptimizerState, ParamVector, Targets};
use crate::rng::stream_rng;

/// Training targets for every example of a dataset.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Labels<'a> {
    Hard(&'a [usize]),
    /// Row-major `[N, classes]` probabilities.
    Soft(&'a [f32]),
}

/// Shuffles `data` with `shuffle_seed`, then takes one optimizer step per
/// batch. A positive `l2_reg` adds `l2_reg * ||theta||^2` to every batch
/// loss. Returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epoch(
    layout: &Layout,
    params: &mut ParamVector,
    opt: &mut OptimizerState,
    data: &Dataset,
    labels: Labels<'_>,
    batch_size: usize,
    shuffle_seed: u64,
    l2_reg: f32,
) -> Result<f64, NnError> {
    let classes = layout.classes;
    let input = layout.input_len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(shuffle_seed, 0));
    let mut images = Vec::with_capacity(batch_size * input);
    let mut hard = Vec::with_capacity(batch_size);
    let mut soft = Vec::with_capacity(batch_size * classes);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        images.clear();
        hard.clear();
        soft.clear();
        for &i in chunk {
            images.extend_from_slice(data.image(i));
            match labels {
                Labels::Hard(l) => hard.push(l[i]),
                Labels::Soft(p) => soft.extend_from_slice(&p[i * classes..(i + 1) * classes]),
            }
        }
        let targets = match labels {
            Labels::Hard(_) => Targets::Hard(&hard),
            Labels::Soft(_) => Targets::Soft(&soft),
        };
        let (mut loss, grad) = loss_and_grad_in(layout, params, &images, targets)?;
        let mut grad = grad.into_inner();
        if l2_reg > 0.0 {
            loss += l2_reg * params.norm_sq() as f32;
            for (g, &w) in grad.iter_mut().zip(params.as_slice()) {
                *g += 2.0 * l2_reg * w;
            }
        }
        if !loss.is_finite() {
            return Err(NnError::NonFinite { what: "loss", index: batches });
        }
        opt.step(params, &grad)?;
        total += loss as f64;
        batches += 1;
    }
    Ok(total / batches as f64)
}
