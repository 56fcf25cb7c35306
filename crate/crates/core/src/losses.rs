//! Contrastive and sequence losses: InfoNCE, the fairness-supervised
//! contrastive term, their gradient-reversed combination, and CTC.

use crate::autograd::Tensor;
use crate::data::ContrastiveBatch;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Params};
use crate::scalar::Scalar;

/// Additive stand-in for log(0) in masked similarity and alignment
/// cells. Finite so that log-sum-exp stays NaN-free in f32 and f64;
/// exp(LOG_ZERO - max) underflows to exactly 0.
pub const LOG_ZERO: f64 = -1e30;

/// Embeddings plus the pairing/grouping structure the contrastive
/// losses read. `z` holds 2N rows; `pair_of` is a fixed-point-free
/// involution; `group_key` assigns each row its demographic label.
pub struct ContrastiveInputs<'a, S: Scalar> {
    pub z: &'a Tensor<S>,
    pub pair_of: &'a [usize],
    pub group_key: &'a [String],
    pub temperature: f64,
}

impl<S: Scalar> ContrastiveInputs<'_, S> {
    fn check(&self) {
        let n = self.z.shape()[0];
        assert_eq!(self.pair_of.len(), n, "pair_of length does not match z rows");
        assert_eq!(self.group_key.len(), n, "group_key length does not match z rows");
        assert!(self.temperature > 0.0, "temperature must be positive, got {}", self.temperature);
        for (i, &p) in self.pair_of.iter().enumerate() {
            assert!(p != i && p < n && self.pair_of[p] == i, "pair_of is not a valid involution at {i}");
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairLossConfig {
    pub lambda: f64,
    pub grl_alpha: f64,
    pub shared_embedding_space: bool,
}

impl Default for FairLossConfig {
    fn default() -> Self {
        FairLossConfig {
            lambda: 0.1,
            grl_alpha: 1.0,
            shared_embedding_space: true,
        }
    }
}

impl FairLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.grl_alpha > 0.0) {
            return Err(Error::config(format!("grl_alpha must be > 0, got {}", self.grl_alpha)));
        }
        Ok(())
    }
}

/// Scalar loss plus the per-component values for logging.
#[derive(Debug)]
pub struct LossBreakdown<S: Scalar> {
    pub total: Tensor<S>,
    pub info_nce: f64,
    pub fsc: f64,
}

/// Shared form of both contrastive losses:
/// sum_i [ LSE_{j != i}(z_i . z_j / t) - sum_p w[i,p] (z_i . z_p / t) ]
/// where every row of `weights` sums to 1 over that anchor's positives.
fn contrastive_kernel<S: Scalar>(z: &Tensor<S>, weights: Vec<S>, temperature: f64) -> Tensor<S> {
    let n = z.shape()[0];
    let sim = z.matmul(&z.transpose()).scale(S::of(1.0 / temperature));
    let mut diag = vec![S::zero(); n * n];
    for i in 0..n {
        diag[i * n + i] = S::of(LOG_ZERO);
    }
    let denominators = sim.add(&Tensor::constant(&[n, n], diag)).log_sum_exp(1).sum(0);
    let numerators = sim.mul(&Tensor::constant(&[n, n], weights)).sum_all();
    denominators.sub(&numerators)
}

/// InfoNCE over augmentation pairs: each of the 2N rows is an anchor
/// whose only positive is its pair; all other rows (the positive
/// included) form the denominator.
pub fn info_nce<S: Scalar>(inputs: &ContrastiveInputs<S>) -> Result<Tensor<S>> {
    inputs.check();
    let n = inputs.z.shape()[0];
    if n < 4 {
        return Err(Error::data(format!(
            "InfoNCE needs a doubled batch of at least 4, got {n} (no negatives)"
        )));
    }
    Ok(info_nce_unchecked(inputs))
}

/// Kernel without the batch-size guard; a doubled batch of 2 makes the
/// positive the entire denominator and the loss identically 0.
pub(crate) fn info_nce_unchecked<S: Scalar>(inputs: &ContrastiveInputs<S>) -> Tensor<S> {
    let n = inputs.z.shape()[0];
    let mut weights = vec![S::zero(); n * n];
    for (i, &p) in inputs.pair_of.iter().enumerate() {
        weights[i * n + p] = S::one();
    }
    contrastive_kernel(inputs.z, weights, inputs.temperature)
}

/// Fairness-supervised contrastive loss: positives for anchor i are all
/// other samples with its demographic label, each weighted 1/|P(i)|.
/// With every group of size exactly 2 this is InfoNCE, arithmetic step
/// for step.
pub fn fsc<S: Scalar>(inputs: &ContrastiveInputs<S>) -> Result<Tensor<S>> {
    inputs.check();
    let n = inputs.z.shape()[0];
    let mut weights = vec![S::zero(); n * n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && inputs.group_key[j] == inputs.group_key[i])
            .collect();
        if positives.is_empty() {
            return Err(Error::data(format!(
                "anchor {i} (group `{}`) has no same-group positives",
                inputs.group_key[i]
            )));
        }
        let w = S::of(1.0 / positives.len() as f64);
        for j in positives {
            weights[i * n + j] = w;
        }
    }
    Ok(contrastive_kernel(inputs.z, weights, inputs.temperature))
}

/// The combined objective on pooled features: InfoNCE on z = g(pooled)
/// plus lambda times FSC on z_rev = g(reverse(pooled)). The gradient
/// reversal sits between pooling and projection, so the FSC term pushes
/// the encoder away from demographic clustering while the head itself
/// still learns to expose it. With lambda = 0 the FSC branch is not
/// built at all, leaving the InfoNCE-only computation bit for bit.
pub fn fairasr_loss<S: Scalar>(
    pooled: &Tensor<S>,
    batch: &ContrastiveBatch,
    params: &Params<S>,
    model_cfg: &ModelConfig,
    cfg: &FairLossConfig,
    temperature: f64,
) -> Result<LossBreakdown<S>> {
    cfg.validate()?;
    if !cfg.shared_embedding_space && !params.contains_key("proj2.w1") {
        return Err(Error::config(
            "independent embedding space requires a model initialized with a second projection head",
        ));
    }
    let z = model::project(pooled, params, model_cfg, "proj");
    let nce = info_nce(&ContrastiveInputs {
        z: &z,
        pair_of: &batch.pair_of,
        group_key: &batch.group_key,
        temperature,
    })?;
    let info_nce_value = nce.item().to_f64_value();
    if cfg.lambda == 0.0 {
        return Ok(LossBreakdown {
            total: nce,
            info_nce: info_nce_value,
            fsc: 0.0,
        });
    }
    let head = if cfg.shared_embedding_space { "proj" } else { "proj2" };
    let z_rev = model::project(
        &pooled.grad_reverse(S::of(cfg.grl_alpha)),
        params,
        model_cfg,
        head,
    );
    let fsc_term = fsc(&ContrastiveInputs {
        z: &z_rev,
        pair_of: &batch.pair_of,
        group_key: &batch.group_key,
        temperature,
    })?;
    let fsc_value = fsc_term.item().to_f64_value();
    let total = nce.add(&fsc_term.scale(S::of(cfg.lambda)));
    Ok(LossBreakdown {
        total,
        info_nce: info_nce_value,
        fsc: fsc_value,
    })
}

fn count_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame vocabulary
/// log-distributions, summed over all blank-interleaved alignments by
/// the forward dynamic program in log space. Differentiable through
/// the graph; blank is index 0.
pub fn ctc_loss<S: Scalar>(log_probs: &Tensor<S>, target: &[usize]) -> Result<Tensor<S>> {
    let frames = log_probs.shape()[0];
    let vocab = log_probs.shape()[1];
    if target.is_empty() {
        return Err(Error::data("CTC target must be non-empty"));
    }
    if let Some(&bad) = target.iter().find(|&&t| t == 0 || t >= vocab) {
        return Err(Error::data(format!(
            "CTC target token {bad} outside the valid range 1..{vocab}"
        )));
    }
    let required = target.len() + count_repeats(target);
    if frames < required {
        return Err(Error::data(format!(
            "CTC needs at least {required} frames for this {}-token target, got {frames}",
            target.len()
        )));
    }

    // Blank-interleaved extension: 0 y1 0 y2 ... yL 0.
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 1 { target[s / 2] } else { 0 })
        .collect();

    // Gather per-frame log-probs of the extended symbols as one matmul
    // with a one-hot selector, keeping the DP inside the graph.
    let mut one_hot = vec![S::zero(); vocab * s_len];
    for (s, &sym) in ext.iter().enumerate() {
        one_hot[sym * s_len + s] = S::one();
    }
    let lp_ext = log_probs.matmul(&Tensor::constant(&[vocab, s_len], one_hot));

    let neg_inf = S::of(LOG_ZERO);
    // Skip transitions s-2 -> s are legal only onto a non-blank that
    // differs from the symbol two back.
    let mut skip_mask = vec![S::zero(); s_len];
    for s in 0..s_len {
        if s < 2 || ext[s] == 0 || ext[s] == ext[s - 2] {
            skip_mask[s] = neg_inf;
        }
    }
    let skip_mask = Tensor::constant(&[1, s_len], skip_mask);
    let mut init = vec![neg_inf; s_len];
    init[0] = S::zero();
    init[1] = S::zero();
    let mut alpha = Tensor::constant(&[1, s_len], init).add(&lp_ext.slice(0, 0, 1));

    let pad1 = Tensor::full(&[1, 1], neg_inf);
    let pad2 = Tensor::full(&[1, 2], neg_inf);
    for t in 1..frames {
        let stay = alpha.clone();
        let step = Tensor::concat(1, &[pad1.clone(), alpha.slice(1, 0, s_len - 1)]);
        let skip = if s_len > 2 {
            Tensor::concat(1, &[pad2.clone(), alpha.slice(1, 0, s_len - 2)]).add(&skip_mask)
        } else {
            Tensor::full(&[1, s_len], neg_inf)
        };
        let merged = Tensor::concat(0, &[stay, step, skip]).log_sum_exp(0).reshape(&[1, s_len]);
        alpha = merged.add(&lp_ext.slice(0, t, 1));
    }
    // Valid terminations: final blank or final symbol.
    Ok(alpha.slice(1, s_len - 2, 2).log_sum_exp(1).reshape(&[]).neg())
}

/// Mean CTC loss over a batch of utterances.
pub fn ctc_batch_loss<S: Scalar>(
    log_probs: &[Tensor<S>],
    targets: &[&[usize]],
) -> Result<Tensor<S>> {
    assert_eq!(log_probs.len(), targets.len(), "batch lengths differ");
    assert!(!log_probs.is_empty(), "empty CTC batch");
    let mut losses = Vec::with_capacity(targets.len());
    for (lp, target) in log_probs.iter().zip(targets) {
        losses.push(ctc_loss(lp, target)?.reshape(&[1]));
    }
    Ok(Tensor::concat(0, &losses).mean(0))
}
