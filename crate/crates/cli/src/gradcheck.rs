//! Finite-difference verification of the three gradient surfaces: the
//! policy network, the caption-consistency loss, and the full training
//! objective. Each seeded configuration draws a small random model, random
//! rollout data and random coefficients, then checks the analytic gradient
//! against central differences.

use cappo_core::env::{build_samples, CorruptionConfig};
use cappo_core::finite_diff::{finite_diff_check_with_fault, FiniteDiffReport};
use cappo_core::graph::{Graph, Value};
use cappo_core::objective::{
    cappo_group_objective, cappo_group_objective_frozen_weights, token_kl_graph, ObjectiveConfig,
    ResponseInput,
};
use cappo_core::policy::{
    sample_response, sequence_log_probs_graph, ModelConfig, Observation, PolicyLeaves,
    PolicyParams,
};
use cappo_core::rng::Rng;
use cappo_core::tensor::Tensor;
use cappo_core::vocab::EOS;

pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn leaves(l: &[Value]) -> PolicyLeaves {
    PolicyLeaves {
        embed: l[0],
        img_w: l[1],
        img_b: l[2],
        hid_w: l[3],
        hid_b: l[4],
        out_w: l[5],
        out_b: l[6],
    }
}

struct Scenario {
    model: ModelConfig,
    named: Vec<(String, Tensor<f64>)>,
    image: Vec<f64>,
    caption: Vec<u8>,
    question: Vec<u8>,
    responses: Vec<(Vec<u8>, Vec<f64>)>,
    rewards: Vec<f64>,
    ocfg: ObjectiveConfig<f64>,
}

/// Draw one random small scenario: model, sample, and a sampled rollout
/// group with a reward spread.
fn scenario(seed: u64) -> Scenario {
    let mut rng = Rng::seed_from_u64(seed);
    let k_max = 2 + rng.next_below(2) as usize;
    let model = ModelConfig {
        feat_dim: k_max * 9,
        embed_dim: 4 + rng.next_below(5) as usize,
        hidden_dim: 5 + rng.next_below(7) as usize,
        t_max: 8,
    };
    let mut init_rng = rng.derive(1);
    let params = PolicyParams::<f64>::init(&model, &mut init_rng);
    let corruption =
        CorruptionConfig { p_attr: 0.2, noise_sigma: 0.2, caption_p_attr: 0.1 };
    let sample = build_samples(1, seed ^ 0x5eed, k_max, &corruption).unwrap().remove(0);

    let group_size = 2 + rng.next_below(2) as usize;
    let mut responses = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    for r in 0..group_size {
        let mut draw = rng.derive(100 + r as u64);
        let resp = sample_response(
            Observation::ImageFeatures(&sample.image_features),
            &sample.question.tokens,
            &params,
            1.0,
            &model,
            &mut draw,
        )
        .unwrap();
        responses.push((resp.tokens, resp.old_logp));
        // synthetic reward spread so advantages are non-trivial
        rewards.push(if r % 2 == 0 { 1.0 } else { 0.1 });
    }
    let ocfg = ObjectiveConfig {
        epsilon: 0.1 + 0.2 * rng.next_f64(),
        alpha: 0.005 + 0.02 * rng.next_f64(),
        beta: 0.05 + 0.1 * rng.next_f64(),
        w_min: 0.5,
        w_max: 1.5,
        var_tol: 1e-8,
        detach_caption_branch: false,
    };
    Scenario {
        model,
        named: params.named().iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect(),
        image: sample.image_features.clone(),
        caption: sample.caption_tokens.clone(),
        question: sample.question.tokens.clone(),
        responses,
        rewards,
        ocfg,
    }
}

/// Policy surface: sum of teacher-forced log-probs on the image path.
fn check_policy(sc: &Scenario, h: f64, tol: f64, fault: f64) -> FiniteDiffReport {
    let build = |g: &mut Graph<f64>, l: &[Value]| {
        let pl = leaves(l);
        let mut parts = Vec::new();
        for (tokens, _) in &sc.responses {
            let lp = sequence_log_probs_graph(
                g,
                &pl,
                Observation::ImageFeatures(&sc.image),
                &sc.question,
                tokens,
                &sc.model,
            )
            .unwrap();
            parts.push(g.sum(lp));
        }
        g.sum_nodes(&parts)
    };
    finite_diff_check_with_fault(&sc.named, &build, h, tol, fault)
}

/// Consistency surface: mean over responses of the token-mean k3 KL between
/// the two conditioning paths.
fn check_consistency(sc: &Scenario, h: f64, tol: f64, fault: f64) -> FiniteDiffReport {
    let build = |g: &mut Graph<f64>, l: &[Value]| {
        let pl = leaves(l);
        let mut parts = Vec::new();
        for (tokens, _) in &sc.responses {
            let lp_img = sequence_log_probs_graph(
                g,
                &pl,
                Observation::ImageFeatures(&sc.image),
                &sc.question,
                tokens,
                &sc.model,
            )
            .unwrap();
            let lp_cap = sequence_log_probs_graph(
                g,
                &pl,
                Observation::CaptionTokens(&sc.caption),
                &sc.question,
                tokens,
                &sc.model,
            )
            .unwrap();
            let kl = token_kl_graph(g, lp_img, lp_cap, false);
            parts.push(g.mean(kl));
        }
        let total = g.sum_nodes(&parts);
        g.scale(total, 1.0 / sc.responses.len() as f64)
    };
    finite_diff_check_with_fault(&sc.named, &build, h, tol, fault)
}

/// Full objective surface. The sign-aware weights are detached in training,
/// so the differentiable function under test pins them at their values from
/// the unperturbed parameters; its gradient there IS the training gradient.
fn check_objective(sc: &Scenario, h: f64, tol: f64, fault: f64) -> FiniteDiffReport {
    let assemble = |g: &mut Graph<f64>, pl: &PolicyLeaves, frozen: Option<&[f64]>| {
        let pairs: Vec<(Value, Value)> = sc
            .responses
            .iter()
            .map(|(tokens, _)| {
                let img = sequence_log_probs_graph(
                    g,
                    pl,
                    Observation::ImageFeatures(&sc.image),
                    &sc.question,
                    tokens,
                    &sc.model,
                )
                .unwrap();
                let cap = sequence_log_probs_graph(
                    g,
                    pl,
                    Observation::CaptionTokens(&sc.caption),
                    &sc.question,
                    tokens,
                    &sc.model,
                )
                .unwrap();
                (img, cap)
            })
            .collect();
        let inputs: Vec<ResponseInput<'_, f64>> = pairs
            .iter()
            .zip(&sc.responses)
            .map(|((img, cap), (_, old))| ResponseInput {
                logp_img: *img,
                logp_cap: Some(*cap),
                old_logp: old,
            })
            .collect();
        match frozen {
            None => cappo_group_objective(g, &inputs, &sc.rewards, &sc.ocfg).unwrap(),
            Some(w) => {
                cappo_group_objective_frozen_weights(g, &inputs, &sc.rewards, &sc.ocfg, w).unwrap()
            }
        }
    };

    // weights at the unperturbed point
    let weights = {
        let mut g: Graph<f64> = Graph::new();
        let l: Vec<Value> = sc.named.iter().map(|(_, t)| g.leaf(t.clone(), false)).collect();
        let pl = leaves(&l);
        let (_, stats) = assemble(&mut g, &pl, None);
        stats.weights
    };

    let build = |g: &mut Graph<f64>, l: &[Value]| {
        let pl = leaves(l);
        let (obj, _) = assemble(g, &pl, Some(&weights));
        obj
    };
    finite_diff_check_with_fault(&sc.named, &build, h, tol, fault)
}

/// Run all three checks over `configs` seeded scenarios; returns the three
/// worst-case outcomes.
pub fn run(seed: u64, configs: usize, h: f64, tol: f64, fault: bool) -> Vec<CheckOutcome> {
    let fault_bias = if fault { 0.05 } else { 0.0 };
    let mut worst = [0.0f64; 3];
    for c in 0..configs {
        let sc = scenario(seed.wrapping_add(c as u64).wrapping_mul(2654435761).wrapping_add(c as u64));
        debug_assert!(sc.responses.iter().all(|(t, _)| t.last() == Some(&EOS) || t.len() == sc.model.t_max));
        worst[0] = worst[0].max(check_policy(&sc, h, tol, fault_bias).max_rel_err);
        worst[1] = worst[1].max(check_consistency(&sc, h, tol, fault_bias).max_rel_err);
        worst[2] = worst[2].max(check_objective(&sc, h, tol, fault_bias).max_rel_err);
    }
    let names = ["policy-network", "caption-consistency-loss", "full-objective"];
    names
        .iter()
        .zip(worst)
        .map(|(&name, err)| CheckOutcome { name, max_rel_err: err, passed: err < tol })
        .collect()
}
