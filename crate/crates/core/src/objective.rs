//! Group-relative advantages, k3 KL estimation, sign-aware KL-adaptive
//! weights, the clipped surrogate, the caption-consistency term and their
//! combination into the training objective.
//!
//! Conventions fixed here:
//! - both z-scores (advantages, sequence KLs) use the population standard
//!   deviation and collapse to all-zeros below `var_tol`;
//! - weights and advantages are plain detached numbers, never graph nodes;
//! - aggregation is per-response token mean, then group mean, for both the
//!   surrogate and the consistency term;
//! - the objective is a maximization target (the trainer ascends).
//!
//! Two assembly routes exist: [`grpo_group_objective`] (clipped surrogate
//! only) and [`cappo_group_objective`] (KL-weighted advantages plus the
//! consistency term). With alpha = beta = 0 the latter reduces to the former
//! bit-exactly, gradients included; a test pins that.

use crate::graph::{Graph, GraphError, Value};
use crate::scalar::Real;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("response has no tokens")]
    EmptyResponse,
    #[error("reward/response count mismatch: {rewards} rewards, {responses} responses")]
    CountMismatch { rewards: usize, responses: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Hyperparameters consumed by the objective assembly.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig<F> {
    pub epsilon: F,
    pub alpha: F,
    pub beta: F,
    pub w_min: F,
    pub w_max: F,
    /// variance guard for both z-scores
    pub var_tol: F,
    /// route the consistency gradient through the image branch only
    pub detach_caption_branch: bool,
}

/// Population z-score of group rewards; all zeros when the spread is below
/// tolerance (uninformative group). The result is detached by construction.
pub fn group_advantage<F: Real>(rewards: &[F], tol: F) -> Result<Vec<F>, ObjectiveError> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::GroupTooSmall(rewards.len()));
    }
    Ok(zscore(rewards, tol))
}

/// Population z-score of per-response sequence KLs; same variance guard.
pub fn group_normalize_kl<F: Real>(seq_kls: &[F], tol: F) -> Vec<F> {
    debug_assert!(seq_kls.len() >= 2);
    zscore(seq_kls, tol)
}

fn zscore<F: Real>(xs: &[F], tol: F) -> Vec<F> {
    let n = F::from_usize(xs.len()).unwrap();
    let mut sum = F::zero();
    for &x in xs {
        sum = sum + x;
    }
    let mean = sum / n;
    let mut var = F::zero();
    for &x in xs {
        let d = x - mean;
        var = var + d * d;
    }
    let std = (var / n).sqrt();
    if std < tol {
        vec![F::zero(); xs.len()]
    } else {
        xs.iter().map(|&x| (x - mean) / std).collect()
    }
}

/// Single-sample KL estimate `exp(delta) - delta - 1` with
/// `delta = logp_caption - logp_image`; non-negative, zero iff delta is 0.
pub fn token_kl_k3<F: Real>(delta: F) -> F {
    delta.exp() - delta - F::one()
}

/// Mean of token-level KL values over a response.
pub fn sequence_kl<F: Real>(token_kls: &[F]) -> Result<F, ObjectiveError> {
    if token_kls.is_empty() {
        return Err(ObjectiveError::EmptyResponse);
    }
    let mut sum = F::zero();
    for &k in token_kls {
        sum = sum + k;
    }
    Ok(sum / F::from_usize(token_kls.len()).unwrap())
}

fn sgn<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Sign-aware KL-adaptive weight
/// `clip(exp(-beta * norm_kl * sgn(advantage)), w_min, w_max)`.
///
/// sgn(0) = 0, so zero-advantage responses get weight exactly 1.
pub fn kl_weight<F: Real>(norm_kl: F, advantage: F, beta: F, w_min: F, w_max: F) -> F {
    let w = (-beta * norm_kl * sgn(advantage)).exp();
    w.max(w_min).min(w_max)
}

/// KL-weighted advantage; both factors are already detached.
pub fn weighted_advantage<F: Real>(w: F, advantage: F) -> F {
    w * advantage
}

/// Per-token clipped surrogate
/// `min(ratio * adv, clip(ratio, 1-eps, 1+eps) * adv)` as a graph value of
/// shape [T], differentiable through `logp_new`.
pub fn clipped_surrogate_graph<F: Real>(
    g: &mut Graph<F>,
    logp_new: Value,
    logp_old: &[F],
    advantage: F,
    epsilon: F,
) -> Result<Value, ObjectiveError> {
    let old = g.constant(Tensor::from_op(vec![logp_old.len()], logp_old.to_vec()));
    let log_ratio = g.sub(logp_new, old);
    let ratio = g.exp(log_ratio);
    let unclipped = g.scale(ratio, advantage);
    let clipped_ratio = g.clip(ratio, F::one() - epsilon, F::one() + epsilon)?;
    let clipped = g.scale(clipped_ratio, advantage);
    Ok(g.min_elem(unclipped, clipped))
}

/// Token-level k3 KL between the two conditioning paths as a graph value of
/// shape [T]. With `detach_caption` the caption branch contributes value but
/// no gradient.
pub fn token_kl_graph<F: Real>(
    g: &mut Graph<F>,
    logp_img: Value,
    logp_cap: Value,
    detach_caption: bool,
) -> Value {
    let cap = if detach_caption { g.detach(logp_cap) } else { logp_cap };
    let delta = g.sub(cap, logp_img);
    let e = g.exp(delta);
    let e_minus_d = g.sub(e, delta);
    g.add_const(e_minus_d, -F::one())
}

/// One response's graph handles inside a group.
#[derive(Debug, Clone)]
pub struct ResponseInput<'a, F> {
    /// teacher-forced log-probs under the current policy, image path, shape [T]
    pub logp_img: Value,
    /// same tokens under the caption path; required by the cappo route
    pub logp_cap: Option<Value>,
    /// log-probs recorded at sampling time under the snapshot
    pub old_logp: &'a [F],
}

/// Detached per-group numbers produced while assembling the objective.
#[derive(Debug, Clone)]
pub struct GroupStats<F> {
    pub advantages: Vec<F>,
    pub weights: Vec<F>,
    pub seq_kls: Vec<F>,
    pub norm_kls: Vec<F>,
    /// group mean of per-response sequence KLs (the consistency term value)
    pub caption_kl: F,
    /// group mean of per-response surrogate token-means
    pub surrogate: F,
    /// value of the returned objective node
    pub objective: F,
}

fn check_group<F: Real>(
    responses: &[ResponseInput<'_, F>],
    rewards: &[F],
) -> Result<(), ObjectiveError> {
    if responses.len() < 2 {
        return Err(ObjectiveError::GroupTooSmall(responses.len()));
    }
    if rewards.len() != responses.len() {
        return Err(ObjectiveError::CountMismatch {
            rewards: rewards.len(),
            responses: responses.len(),
        });
    }
    if responses.iter().any(|r| r.old_logp.is_empty()) {
        return Err(ObjectiveError::EmptyResponse);
    }
    Ok(())
}

/// Clipped-surrogate objective for one group:
/// `(1/G) sum_i (1/|o_i|) sum_t min(rho * A_i, clip(rho) * A_i)`.
pub fn grpo_group_objective<F: Real>(
    g: &mut Graph<F>,
    responses: &[ResponseInput<'_, F>],
    rewards: &[F],
    epsilon: F,
    var_tol: F,
) -> Result<(Value, GroupStats<F>), ObjectiveError> {
    check_group(responses, rewards)?;
    let group_size = responses.len();
    let advantages = group_advantage(rewards, var_tol)?;

    let mut terms = Vec::with_capacity(group_size);
    let mut surr_terms = Vec::with_capacity(group_size);
    for (r, &adv) in responses.iter().zip(&advantages) {
        let surr = clipped_surrogate_graph(g, r.logp_img, r.old_logp, adv, epsilon)?;
        let m = g.mean(surr);
        surr_terms.push(g.value(m).item());
        terms.push(m);
    }
    let total = g.sum_nodes(&terms);
    let inv_g = F::one() / F::from_usize(group_size).unwrap();
    let objective = g.scale(total, inv_g);

    Ok((
        objective,
        GroupStats {
            advantages,
            weights: vec![F::one(); group_size],
            seq_kls: vec![F::zero(); group_size],
            norm_kls: vec![F::zero(); group_size],
            caption_kl: F::zero(),
            surrogate: mean_plain(&surr_terms),
            objective: g.value(objective).item(),
        },
    ))
}

/// Full objective for one group:
/// `(1/G) sum_i (1/|o_i|) sum_t [min(rho*A^cap_i, clip(rho)*A^cap_i) - alpha*KL_t]`,
/// where `A^cap_i = w_i * A_i` with the sign-aware weight computed from the
/// group-normalized sequence KL. No reference-policy term.
pub fn cappo_group_objective<F: Real>(
    g: &mut Graph<F>,
    responses: &[ResponseInput<'_, F>],
    rewards: &[F],
    cfg: &ObjectiveConfig<F>,
) -> Result<(Value, GroupStats<F>), ObjectiveError> {
    cappo_objective_impl(g, responses, rewards, cfg, None)
}

/// Same assembly with the detached weights pinned to given values instead of
/// recomputed. The gradient of this function at the pin point equals the
/// training gradient (weights are detached there), which is what a
/// finite-difference check must probe: central differences of the
/// live-weight function would see the weight recomputation that detachment
/// deliberately hides.
pub fn cappo_group_objective_frozen_weights<F: Real>(
    g: &mut Graph<F>,
    responses: &[ResponseInput<'_, F>],
    rewards: &[F],
    cfg: &ObjectiveConfig<F>,
    weights: &[F],
) -> Result<(Value, GroupStats<F>), ObjectiveError> {
    cappo_objective_impl(g, responses, rewards, cfg, Some(weights))
}

fn cappo_objective_impl<F: Real>(
    g: &mut Graph<F>,
    responses: &[ResponseInput<'_, F>],
    rewards: &[F],
    cfg: &ObjectiveConfig<F>,
    frozen_weights: Option<&[F]>,
) -> Result<(Value, GroupStats<F>), ObjectiveError> {
    check_group(responses, rewards)?;
    let group_size = responses.len();
    let advantages = group_advantage(rewards, cfg.var_tol)?;

    // token-level KLs first: their sequence means feed the weights
    let mut kl_nodes = Vec::with_capacity(group_size);
    let mut seq_kls = Vec::with_capacity(group_size);
    for r in responses {
        let cap = r.logp_cap.expect("cappo objective requires caption log-probs");
        let kl_t = token_kl_graph(g, r.logp_img, cap, cfg.detach_caption_branch);
        let seq = g.mean(kl_t);
        seq_kls.push(g.value(seq).item());
        kl_nodes.push(kl_t);
    }
    let norm_kls = group_normalize_kl(&seq_kls, cfg.var_tol);
    let weights: Vec<F> = match frozen_weights {
        Some(w) => {
            if w.len() != group_size {
                return Err(ObjectiveError::CountMismatch {
                    rewards: w.len(),
                    responses: group_size,
                });
            }
            w.to_vec()
        }
        None => norm_kls
            .iter()
            .zip(&advantages)
            .map(|(&d, &a)| kl_weight(d, a, cfg.beta, cfg.w_min, cfg.w_max))
            .collect(),
    };

    let mut terms = Vec::with_capacity(group_size);
    let mut surr_terms = Vec::with_capacity(group_size);
    for ((r, kl_t), (&w, &adv)) in
        responses.iter().zip(&kl_nodes).zip(weights.iter().zip(&advantages))
    {
        let adv_cap = weighted_advantage(w, adv);
        let surr = clipped_surrogate_graph(g, r.logp_img, r.old_logp, adv_cap, cfg.epsilon)?;
        let scaled_kl = g.scale(*kl_t, cfg.alpha);
        let combined = g.sub(surr, scaled_kl);
        terms.push(g.mean(combined));
        let surr_mean = g.mean(surr);
        surr_terms.push(g.value(surr_mean).item());
    }
    let total = g.sum_nodes(&terms);
    let inv_g = F::one() / F::from_usize(group_size).unwrap();
    let objective = g.scale(total, inv_g);

    let caption_kl = mean_plain(&seq_kls);
    let surrogate = mean_plain(&surr_terms);
    Ok((
        objective,
        GroupStats {
            advantages,
            weights,
            seq_kls,
            norm_kls,
            caption_kl,
            surrogate,
            objective: g.value(objective).item(),
        },
    ))
}

fn mean_plain<F: Real>(xs: &[F]) -> F {
    let mut sum = F::zero();
    for &x in xs {
        sum = sum + x;
    }
    sum / F::from_usize(xs.len()).unwrap()
}

/// Reporting bundle for one optimizer step (or one aggregated training
/// step); plain 64-bit numbers for the metrics file.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub surrogate: f64,
    pub caption_kl: f64,
    pub total: f64,
    pub mean_reward: f64,
    pub mean_resp_len: f64,
    pub mean_entropy: f64,
    pub mean_abs_adv: f64,
    pub weight_min: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
}
