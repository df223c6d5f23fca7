//! Training orchestration: group rollouts under a frozen snapshot,
//! per-update recomputation of both conditioning paths, objective assembly,
//! gradient ascent, metrics, checkpoints and evaluation.
//!
//! Randomness is stream-derived, never stateful: parameters come from
//! `master.derive(STREAM_PARAMS)`, the rollout of step k / batch slot j /
//! response r from `master.derive(STREAM_ROLLOUT).derive(k).derive(j)
//! .derive(r)`. Rollouts can therefore fan out across workers and a resumed
//! run replays the exact remaining trajectory.
//!
//! Metrics: one row per training step. Reward, response length and entropy
//! come from the rollout; advantage, weight, KL and loss columns aggregate
//! the first update epoch in minibatch order. The loss columns report the
//! maximization objective.

use crate::checkpoint::{self, Checkpoint};
use crate::config::TrainingConfig;
use crate::env::{self, EnvError, Sample};
use crate::graph::Graph;
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::objective::{
    cappo_group_objective, grpo_group_objective, token_kl_k3, GroupStats, LossBreakdown,
    ObjectiveConfig, ObjectiveError, ResponseInput,
};
use crate::par::parallel_map;
use crate::policy::{
    mount_params, sample_response, sequence_log_probs, sequence_log_probs_graph, greedy_decode,
    Observation, PolicyError, PolicyParams,
};
use crate::rng::Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

const STREAM_PARAMS: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("non-finite loss or gradient at step {step}; diagnostic dump at {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Grpo,
    Cappo,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "grpo" => Some(Mode::Grpo),
            "cappo" => Some(Mode::Cappo),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::Cappo => "cappo",
        }
    }
}

/// G responses for one sample plus their verifiable rewards.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    /// position within the rollout batch
    pub slot: usize,
    /// index into the dataset
    pub sample_index: usize,
    pub responses: Vec<crate::policy::Response>,
    pub rewards: Vec<f64>,
}

/// Mutable training state; the optimizer is plain SGD so there is no
/// optimizer state beyond the parameters.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// next step to run, 0-based
    pub step: usize,
    pub params: PolicyParams<f64>,
    pub master: Rng,
}

impl TrainState {
    pub fn fresh(cfg: &TrainingConfig) -> Self {
        let master = Rng::seed_from_u64(cfg.seed);
        let mut param_rng = master.derive(STREAM_PARAMS);
        let params = PolicyParams::init(&cfg.model(), &mut param_rng);
        TrainState { step: 0, params, master }
    }
}

/// Sample G responses for each (slot, dataset index) pair under the frozen
/// snapshot. Slots fan out across workers on independent derived streams and
/// are gathered in slot order.
pub fn rollout_batch(
    dataset: &[Sample],
    picks: &[(usize, usize)],
    snapshot: &PolicyParams<f64>,
    cfg: &TrainingConfig,
    step_stream: &Rng,
) -> Result<Vec<RolloutGroup>, TrainError> {
    if picks.is_empty() {
        return Err(TrainError::Usage("rollout over an empty dataset slice".into()));
    }
    let model = cfg.model();
    let results = parallel_map(picks.to_vec(), |(slot, sample_index)| {
        let sample = &dataset[sample_index];
        let slot_stream = step_stream.derive(slot as u64);
        let mut responses = Vec::with_capacity(cfg.group_size);
        let mut rewards = Vec::with_capacity(cfg.group_size);
        for r in 0..cfg.group_size {
            let mut rng = slot_stream.derive(r as u64);
            let resp = sample_response(
                Observation::ImageFeatures(&sample.image_features),
                &sample.question.tokens,
                snapshot,
                cfg.temperature,
                &model,
                &mut rng,
            )?;
            let verdict = env::verify(&resp.tokens, sample.gold());
            rewards.push(env::reward(verdict.status));
            responses.push(resp);
        }
        Ok::<RolloutGroup, TrainError>(RolloutGroup { slot, sample_index, responses, rewards })
    });
    results.into_iter().collect()
}

/// The consistency metric is reported in both modes; this plain computation
/// shares kernels with the graph path, so the numbers are identical to what
/// the cappo route logs for the same parameters and rollout.
fn fill_caption_kl_plain(
    stats: &mut GroupStats<f64>,
    group: &RolloutGroup,
    sample: &Sample,
    params: &PolicyParams<f64>,
    model: &crate::policy::ModelConfig,
) -> Result<(), TrainError> {
    let question = &sample.question.tokens;
    let mut seq_kls = Vec::with_capacity(group.responses.len());
    for resp in &group.responses {
        let lp_img = sequence_log_probs(
            &resp.tokens,
            Observation::ImageFeatures(&sample.image_features),
            question,
            params,
            model,
        )?;
        let lp_cap = sequence_log_probs(
            &resp.tokens,
            Observation::CaptionTokens(&sample.caption_tokens),
            question,
            params,
            model,
        )?;
        let mut acc = 0.0;
        for (ci, ii) in lp_cap.iter().zip(&lp_img) {
            acc += token_kl_k3(ci - ii);
        }
        seq_kls.push(acc / resp.tokens.len() as f64);
    }
    let mut total = 0.0;
    for &k in &seq_kls {
        total += k;
    }
    stats.caption_kl = total / seq_kls.len() as f64;
    stats.seq_kls = seq_kls;
    Ok(())
}

fn objective_config(cfg: &TrainingConfig) -> ObjectiveConfig<f64> {
    ObjectiveConfig {
        epsilon: cfg.clip_epsilon,
        alpha: cfg.alpha,
        beta: cfg.beta,
        w_min: cfg.w_min,
        w_max: cfg.w_max,
        var_tol: cfg.var_tol,
        detach_caption_branch: cfg.detach_caption_branch,
    }
}

/// One gradient-ascent step over a minibatch of groups. Returns the
/// per-group stats (caption KL filled in both modes) and the minibatch
/// objective value.
pub fn optimizer_step(
    params: &mut PolicyParams<f64>,
    groups: &[RolloutGroup],
    dataset: &[Sample],
    cfg: &TrainingConfig,
    mode: Mode,
) -> Result<(Vec<GroupStats<f64>>, f64), TrainError> {
    let model = cfg.model();
    let ocfg = objective_config(cfg);
    let mut g: Graph<f64> = Graph::with_capacity(groups.len() * cfg.group_size * 40);
    let leaves = mount_params(&mut g, params, true);

    let mut group_objs = Vec::with_capacity(groups.len());
    let mut all_stats = Vec::with_capacity(groups.len());
    for group in groups {
        let sample = &dataset[group.sample_index];
        let question = &sample.question.tokens;

        // a group with zero reward spread has zero advantages, so the
        // surrogate is identically zero with zero gradient; when no
        // consistency term carries gradient either (grpo, or alpha = 0)
        // the whole subgraph reduces to the constant 0 and is skipped
        let advantages = crate::objective::group_advantage(&group.rewards, cfg.var_tol)?;
        let no_signal = advantages.iter().all(|&a| a == 0.0)
            && (mode == Mode::Grpo || cfg.alpha == 0.0);
        if no_signal {
            let mut stats = GroupStats {
                advantages,
                weights: vec![1.0; group.responses.len()],
                seq_kls: vec![0.0; group.responses.len()],
                norm_kls: vec![0.0; group.responses.len()],
                caption_kl: 0.0,
                surrogate: 0.0,
                objective: 0.0,
            };
            fill_caption_kl_plain(&mut stats, group, sample, params, &model)?;
            group_objs.push(g.constant_scalar(0.0));
            all_stats.push(stats);
            continue;
        }
        let mut inputs = Vec::with_capacity(group.responses.len());
        for resp in &group.responses {
            let logp_img = sequence_log_probs_graph(
                &mut g,
                &leaves,
                Observation::ImageFeatures(&sample.image_features),
                question,
                &resp.tokens,
                &model,
            )?;
            let logp_cap = match mode {
                Mode::Cappo => Some(sequence_log_probs_graph(
                    &mut g,
                    &leaves,
                    Observation::CaptionTokens(&sample.caption_tokens),
                    question,
                    &resp.tokens,
                    &model,
                )?),
                Mode::Grpo => None,
            };
            inputs.push((logp_img, logp_cap, resp));
        }
        let response_inputs: Vec<ResponseInput<'_, f64>> = inputs
            .iter()
            .map(|(img, cap, resp)| ResponseInput {
                logp_img: *img,
                logp_cap: *cap,
                old_logp: &resp.old_logp,
            })
            .collect();
        let (obj, mut stats) = match mode {
            Mode::Cappo => cappo_group_objective(&mut g, &response_inputs, &group.rewards, &ocfg)?,
            Mode::Grpo => grpo_group_objective(
                &mut g,
                &response_inputs,
                &group.rewards,
                cfg.clip_epsilon,
                cfg.var_tol,
            )?,
        };
        if mode == Mode::Grpo {
            fill_caption_kl_plain(&mut stats, group, sample, params, &model)?;
        }
        group_objs.push(obj);
        all_stats.push(stats);
    }

    let total = g.sum_nodes(&group_objs);
    let objective = g.scale(total, 1.0 / groups.len() as f64);
    let obj_value = g.value(objective).item();

    let grads = g.backward(objective).map_err(ObjectiveError::Graph)?;
    let leaf_list = leaves.as_array();
    let mut finite = obj_value.is_finite();
    let mut grad_tensors = Vec::with_capacity(leaf_list.len());
    for leaf in leaf_list {
        let shape = g.value(leaf).shape().to_vec();
        let gt = grads.of_leaf(leaf, &shape);
        finite &= gt.all_finite();
        grad_tensors.push(gt);
    }
    if !finite {
        return Err(TrainError::NonFinite { step: 0, dump: String::new() });
    }

    // gradient ascent on the maximization objective
    let eta = cfg.learning_rate;
    for ((_, tensor), grad) in params.named_mut().into_iter().zip(&grad_tensors) {
        for (p, &gv) in tensor.data_mut().iter_mut().zip(grad.data()) {
            *p += eta * gv;
        }
    }
    Ok((all_stats, obj_value))
}

/// One pass over all groups in deterministic minibatch order.
pub fn update_epoch(
    params: &mut PolicyParams<f64>,
    groups: &[RolloutGroup],
    dataset: &[Sample],
    cfg: &TrainingConfig,
    mode: Mode,
) -> Result<(Vec<GroupStats<f64>>, f64), TrainError> {
    let mut all_stats = Vec::with_capacity(groups.len());
    let mut obj_sum = 0.0;
    let mut chunks = 0.0;
    for chunk in groups.chunks(cfg.train_batch) {
        let (stats, obj) = optimizer_step(params, chunk, dataset, cfg, mode)?;
        all_stats.extend(stats);
        obj_sum += obj;
        chunks += 1.0;
    }
    Ok((all_stats, obj_sum / chunks))
}

fn assemble_row(
    step: usize,
    groups: &[RolloutGroup],
    stats: &[GroupStats<f64>],
    objective: f64,
) -> MetricsRow {
    let mut n_resp = 0.0;
    let (mut reward_sum, mut len_sum, mut entropy_sum) = (0.0, 0.0, 0.0);
    for group in groups {
        for (resp, &r) in group.responses.iter().zip(&group.rewards) {
            reward_sum += r;
            len_sum += resp.tokens.len() as f64;
            entropy_sum += resp.mean_entropy;
            n_resp += 1.0;
        }
    }
    let (mut adv_sum, mut w_sum, mut w_lo, mut w_hi) = (0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    let (mut kl_sum, mut surr_sum) = (0.0, 0.0);
    let mut n_w = 0.0;
    for s in stats {
        for &a in &s.advantages {
            adv_sum += a.abs();
        }
        for &w in &s.weights {
            w_sum += w;
            w_lo = w_lo.min(w);
            w_hi = w_hi.max(w);
            n_w += 1.0;
        }
        kl_sum += s.caption_kl;
        surr_sum += s.surrogate;
    }
    let n_groups = stats.len() as f64;
    MetricsRow {
        step,
        mean_reward: reward_sum / n_resp,
        mean_resp_len: len_sum / n_resp,
        caption_kl: kl_sum / n_groups,
        entropy: entropy_sum / n_resp,
        mean_abs_adv: adv_sum / n_w,
        w_min: w_lo,
        w_mean: w_sum / n_w,
        w_max: w_hi,
        surrogate: surr_sum / n_groups,
        total_loss: objective,
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_params: PolicyParams<f64>,
    pub rows: Vec<MetricsRow>,
}

fn write_dump(
    out_dir: &Path,
    step: usize,
    groups: &[RolloutGroup],
    dataset: &[Sample],
) -> PathBuf {
    let path = out_dir.join("diagnostic-dump.txt");
    let mut text = format!("non-finite loss or gradient at step {step}\n");
    for group in groups {
        let sample = &dataset[group.sample_index];
        text.push_str(&format!(
            "group slot={} sample={} gold={}\n",
            group.slot,
            group.sample_index,
            sample.gold()
        ));
        for (resp, r) in group.responses.iter().zip(&group.rewards) {
            text.push_str(&format!(
                "  reward={r} tokens={:?} old_logp={:?}\n",
                resp.tokens, resp.old_logp
            ));
        }
    }
    let _ = std::fs::write(&path, text);
    path
}

/// Run the training loop; `resume` continues from a checkpoint and emits the
/// remaining rows. The metrics file and checkpoints land in `out_dir`.
pub fn train_loop(
    cfg: &TrainingConfig,
    dataset: &[Sample],
    mode: Mode,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Usage("training dataset is empty".into()));
    }
    let model = cfg.model();
    if dataset[0].image_features.len() != model.feat_dim {
        return Err(TrainError::Usage(format!(
            "dataset feature width {} does not match k_max {} (expected {})",
            dataset[0].image_features.len(),
            cfg.k_max,
            model.feat_dim
        )));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.display().to_string(), source })?;

    let mut state = match resume {
        None => TrainState::fresh(cfg),
        Some(ckpt_path) => {
            let ckpt = checkpoint::load(ckpt_path)?;
            if ckpt.config_hash != cfg.content_hash() {
                return Err(TrainError::Usage(format!(
                    "checkpoint config hash {} does not match configured {}",
                    ckpt.config_hash,
                    cfg.content_hash()
                )));
            }
            checkpoint::validate_shapes(&ckpt.params, &model)?;
            TrainState {
                step: ckpt.step,
                params: ckpt.params,
                master: Rng::from_state(ckpt.rng_state),
            }
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut checkpoints = Vec::new();
    let mut rows = Vec::new();
    let rollout_stream = state.master.derive(STREAM_ROLLOUT);

    while state.step < cfg.total_steps {
        let k = state.step;
        let snapshot = state.params.snapshot();
        let picks: Vec<(usize, usize)> = (0..cfg.rollout_batch)
            .map(|j| (j, (k * cfg.rollout_batch + j) % dataset.len()))
            .collect();
        let step_stream = rollout_stream.derive(k as u64);
        let groups = rollout_batch(dataset, &picks, &snapshot, cfg, &step_stream)?;

        let mut first_epoch_stats: Vec<GroupStats<f64>> = Vec::new();
        let mut first_epoch_obj = 0.0;
        for epoch in 0..cfg.update_epochs {
            match update_epoch(&mut state.params, &groups, dataset, cfg, mode) {
                Ok((stats, obj)) => {
                    if epoch == 0 {
                        first_epoch_stats = stats;
                        first_epoch_obj = obj;
                    }
                }
                Err(TrainError::NonFinite { .. }) => {
                    let dump = write_dump(out_dir, k + 1, &groups, dataset);
                    return Err(TrainError::NonFinite {
                        step: k + 1,
                        dump: dump.display().to_string(),
                    });
                }
                Err(other) => return Err(other),
            }
        }

        let row = assemble_row(k + 1, &groups, &first_epoch_stats, first_epoch_obj);
        writer.write_row(&row)?;
        rows.push(row);
        state.step = k + 1;

        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.total_steps {
            let path = out_dir.join(format!("ckpt-{:06}.ckpt", state.step));
            checkpoint::save(
                &path,
                &Checkpoint {
                    step: state.step,
                    config_hash: cfg.content_hash(),
                    rng_state: state.master.state(),
                    params: state.params.clone(),
                },
            )?;
            checkpoints.push(path);
        }
    }

    Ok(TrainOutcome { metrics_path, checkpoints, final_params: state.params, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Image,
    Caption,
}

impl Conditioning {
    pub fn name(&self) -> &'static str {
        match self {
            Conditioning::Image => "image",
            Conditioning::Caption => "caption",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_reward: f64,
    pub n: usize,
}

/// Grade arbitrary response sources against the verifier; the evaluation
/// harness itself, also used for its oracle self-test.
pub fn evaluate_responses<R>(samples: &[Sample], respond: R) -> EvalReport
where
    R: Fn(&Sample) -> Vec<crate::vocab::TokenId> + Sync,
{
    let graded = parallel_map(samples.iter().collect::<Vec<_>>(), |sample| {
        let tokens = respond(sample);
        let verdict = env::verify(&tokens, sample.gold());
        (
            matches!(verdict.status, env::FormatStatus::WellFormedCorrect) as u32,
            env::reward(verdict.status),
        )
    });
    let n = samples.len();
    let correct: u32 = graded.iter().map(|(c, _)| c).sum();
    let reward_sum: f64 = graded.iter().map(|(_, r)| r).sum();
    EvalReport { accuracy: correct as f64 / n as f64, mean_reward: reward_sum / n as f64, n }
}

/// Greedy-decoding accuracy of a policy under one conditioning path.
pub fn evaluate_accuracy(
    params: &PolicyParams<f64>,
    cfg: &TrainingConfig,
    samples: &[Sample],
    conditioning: Conditioning,
) -> EvalReport {
    let model = cfg.model();
    evaluate_responses(samples, |sample| {
        let obs = match conditioning {
            Conditioning::Image => Observation::ImageFeatures(&sample.image_features),
            Conditioning::Caption => Observation::CaptionTokens(&sample.caption_tokens),
        };
        greedy_decode(obs, &sample.question.tokens, params, &model)
            .expect("dataset observations are well-formed")
    })
}

impl LossBreakdown {
    /// Assemble the reporting bundle from one step's rollout and stats.
    pub fn from_step(groups: &[RolloutGroup], stats: &[GroupStats<f64>], objective: f64) -> Self {
        let row = assemble_row(0, groups, stats, objective);
        LossBreakdown {
            surrogate: row.surrogate,
            caption_kl: row.caption_kl,
            total: row.total_loss,
            mean_reward: row.mean_reward,
            mean_resp_len: row.mean_resp_len,
            mean_entropy: row.entropy,
            mean_abs_adv: row.mean_abs_adv,
            weight_min: row.w_min,
            weight_mean: row.w_mean,
            weight_max: row.w_max,
        }
    }
}
