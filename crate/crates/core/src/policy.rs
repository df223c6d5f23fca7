//! Autoregressive categorical policy with dual observation encoders.
//!
//! The network is deliberately small and fixed: observation encoding (either
//! a linear projection of image features or the mean caption embedding, both
//! through tanh into the same d-space), mean embedding of the context
//! (question plus generated prefix), the last context token's embedding, and
//! a position scalar, through one hidden tanh layer to vocabulary logits.
//!
//! Two forward paths exist: a plain one used for sampling/evaluation and a
//! graph one used for training. Both are built from the same kernels with
//! identical accumulation order, so a teacher-forced log-probability under
//! the snapshot parameters reproduces the sampling-time value exactly.
//!
//! PAD is masked to -inf before every softmax (sampling, log-probs,
//! entropy), so it never carries probability mass. Temperature applies to
//! sampling only; recorded log-probabilities always use temperature 1.

use crate::graph::{Graph, Value};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::{log_softmax_row, matmul, softmax_entropy_row, Tensor};
use crate::vocab::{TokenId, EOS, PAD, VOCAB_SIZE};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("image feature length {got} does not match configured {want}")]
    FeatureLength { got: usize, want: usize },
    #[error("caption contains PAD")]
    PadInCaption,
}

/// Architecture dimensions. The vocabulary is fixed; the rest is
/// configurable (smaller models are used by the gradient checker).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub t_max: usize,
}

impl ModelConfig {
    pub fn feature_width(&self) -> usize {
        3 * self.embed_dim + 1
    }
}

/// Either perceptual rendering of a scene.
#[derive(Debug, Clone, Copy)]
pub enum Observation<'a> {
    ImageFeatures(&'a [f64]),
    CaptionTokens(&'a [TokenId]),
}

/// All trainable parameters. `snapshot()` is a deep copy; the trainer keeps
/// the live set and the frozen set apart.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<F> {
    /// token embeddings, V x d
    pub embed: Tensor<F>,
    /// image projection, feat_dim x d, plus bias d
    pub img_w: Tensor<F>,
    pub img_b: Tensor<F>,
    /// hidden layer, (3d+1) x H, plus bias H
    pub hid_w: Tensor<F>,
    pub hid_b: Tensor<F>,
    /// output layer, H x V, plus bias V
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

fn glorot<F: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::from_f64_c(rng.uniform(-limit, limit)))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

impl<F: Real> PolicyParams<F> {
    /// Glorot-uniform weights, zero biases, drawn in a fixed order
    /// (embed, img_w, hid_w, out_w) from the given stream.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        PolicyParams {
            embed: glorot(rng, VOCAB_SIZE, d),
            img_w: glorot(rng, cfg.feat_dim, d),
            img_b: Tensor::zeros(vec![d]),
            hid_w: glorot(rng, cfg.feature_width(), cfg.hidden_dim),
            hid_b: Tensor::zeros(vec![cfg.hidden_dim]),
            out_w: glorot(rng, cfg.hidden_dim, VOCAB_SIZE),
            out_b: Tensor::zeros(vec![VOCAB_SIZE]),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        PolicyParams {
            embed: Tensor::zeros(vec![VOCAB_SIZE, d]),
            img_w: Tensor::zeros(vec![cfg.feat_dim, d]),
            img_b: Tensor::zeros(vec![d]),
            hid_w: Tensor::zeros(vec![cfg.feature_width(), cfg.hidden_dim]),
            hid_b: Tensor::zeros(vec![cfg.hidden_dim]),
            out_w: Tensor::zeros(vec![cfg.hidden_dim, VOCAB_SIZE]),
            out_b: Tensor::zeros(vec![VOCAB_SIZE]),
        }
    }

    /// Deep, immutable copy for rollouts; later updates to the live
    /// parameters do not affect it.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    /// Named views in checkpoint order.
    pub fn named(&self) -> [(&'static str, &Tensor<F>); 7] {
        [
            ("embed", &self.embed),
            ("img_w", &self.img_w),
            ("img_b", &self.img_b),
            ("hid_w", &self.hid_w),
            ("hid_b", &self.hid_b),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 7] {
        [
            ("embed", &mut self.embed),
            ("img_w", &mut self.img_w),
            ("img_b", &mut self.img_b),
            ("hid_w", &mut self.hid_w),
            ("hid_b", &mut self.hid_b),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Vocabulary-count row for a context: weights count/len per token id, the
/// last token, and the context length. The mean embedding is then a single
/// counts-times-embedding product, which keeps the sampling path and the
/// batched training path bit-identical.
fn context_counts<F: Real>(question: &[TokenId], prefix: &[TokenId]) -> (Vec<F>, Option<TokenId>) {
    let len = question.len() + prefix.len();
    let mut counts = vec![F::zero(); VOCAB_SIZE];
    if len == 0 {
        return (counts, None);
    }
    let inv = F::one() / F::from_usize(len).unwrap();
    let mut last = None;
    for &t in question.iter().chain(prefix.iter()) {
        counts[t as usize] = counts[t as usize] + inv;
        last = Some(t);
    }
    (counts, last)
}

fn one_hot_row<F: Real>(token: Option<TokenId>) -> Vec<F> {
    let mut row = vec![F::zero(); VOCAB_SIZE];
    if let Some(t) = token {
        row[t as usize] = F::one();
    }
    row
}

/// Encode an observation into the shared d-space (plain math).
pub fn encode_observation<F: Real>(
    obs: Observation<'_>,
    params: &PolicyParams<F>,
    cfg: &ModelConfig,
) -> Result<Vec<F>, PolicyError> {
    match obs {
        Observation::ImageFeatures(x) => {
            if x.len() != cfg.feat_dim {
                return Err(PolicyError::FeatureLength { got: x.len(), want: cfg.feat_dim });
            }
            let xr = Tensor::from_op(vec![1, cfg.feat_dim], x.iter().map(|&v| F::from_f64_c(v)).collect());
            let proj = matmul(&xr, &params.img_w);
            Ok(proj
                .data()
                .iter()
                .zip(params.img_b.data())
                .map(|(&p, &b)| (p + b).tanh())
                .collect())
        }
        Observation::CaptionTokens(tokens) => {
            if tokens.contains(&PAD) {
                return Err(PolicyError::PadInCaption);
            }
            let (counts, _) = context_counts::<F>(&[], tokens);
            let row = Tensor::from_op(vec![1, VOCAB_SIZE], counts);
            let mean = matmul(&row, &params.embed);
            Ok(mean.data().iter().map(|&v| v.tanh()).collect())
        }
    }
}

/// Assemble the feature row for one position and run the two layers.
/// Returns unmasked logits; every consumer masks PAD itself.
pub fn next_token_logits<F: Real>(
    obs: Observation<'_>,
    question: &[TokenId],
    prefix: &[TokenId],
    params: &PolicyParams<F>,
    cfg: &ModelConfig,
) -> Result<Vec<F>, PolicyError> {
    assert!(prefix.len() < cfg.t_max, "prefix length {} not below t_max {}", prefix.len(), cfg.t_max);
    let enc = encode_observation(obs, params, cfg)?;
    Ok(logits_from_enc(&enc, question, prefix, params, cfg))
}

/// Same as [`next_token_logits`] but with the observation encoding reused
/// across positions (it does not depend on the prefix).
fn logits_from_enc<F: Real>(
    enc: &[F],
    question: &[TokenId],
    prefix: &[TokenId],
    params: &PolicyParams<F>,
    cfg: &ModelConfig,
) -> Vec<F> {
    let d = cfg.embed_dim;
    let (counts, last) = context_counts::<F>(question, prefix);
    let counts_row = Tensor::from_op(vec![1, VOCAB_SIZE], counts);
    let mean_emb = matmul(&counts_row, &params.embed);
    let last_row = Tensor::from_op(vec![1, VOCAB_SIZE], one_hot_row(last));
    let last_emb = matmul(&last_row, &params.embed);

    let mut x = Vec::with_capacity(cfg.feature_width());
    x.extend_from_slice(enc);
    x.extend_from_slice(mean_emb.data());
    x.extend_from_slice(last_emb.data());
    x.push(F::from_usize(prefix.len()).unwrap() / F::from_usize(cfg.t_max).unwrap());
    debug_assert_eq!(x.len(), 3 * d + 1);

    let xr = Tensor::from_op(vec![1, cfg.feature_width()], x);
    let hid = matmul(&xr, &params.hid_w);
    let hid: Vec<F> = hid
        .data()
        .iter()
        .zip(params.hid_b.data())
        .map(|(&h, &b)| (h + b).tanh())
        .collect();
    let hr = Tensor::from_op(vec![1, cfg.hidden_dim], hid);
    let out = matmul(&hr, &params.out_w);
    out.data().iter().zip(params.out_b.data()).map(|(&o, &b)| o + b).collect()
}

/// A sampled rollout: tokens end at EOS or at T_max. `old_logp` holds the
/// temperature-1 log-probabilities of each sampled token under the snapshot
/// on the image path; `mean_entropy` is the mean next-token entropy over the
/// visited positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub old_logp: Vec<f64>,
    pub mean_entropy: f64,
}

impl Response {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Autoregressive categorical sampling of `logits / temperature` until EOS
/// or T_max. PAD is masked out and never sampled.
pub fn sample_response<F: Real>(
    obs: Observation<'_>,
    question: &[TokenId],
    snapshot: &PolicyParams<F>,
    temperature: f64,
    cfg: &ModelConfig,
    rng: &mut Rng,
) -> Result<Response, PolicyError> {
    assert!(temperature > 0.0, "temperature must be positive");
    let enc = encode_observation(obs, snapshot, cfg)?;
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut old_logp = Vec::new();
    let mut entropy_sum = 0.0;
    let temp = F::from_f64_c(temperature);

    while tokens.len() < cfg.t_max {
        let logits = logits_from_enc(&enc, question, &tokens, snapshot, cfg);
        // training log-probs and entropy at temperature 1
        let mut logp1 = vec![F::zero(); VOCAB_SIZE];
        log_softmax_row(&logits, Some(PAD as usize), &mut logp1);
        entropy_sum += softmax_entropy_row(&logits, Some(PAD as usize)).to_f64().unwrap();

        // sampling distribution at the rollout temperature
        let scaled: Vec<F> = logits.iter().map(|&z| z / temp).collect();
        let mut logp_t = vec![F::zero(); VOCAB_SIZE];
        log_softmax_row(&scaled, Some(PAD as usize), &mut logp_t);

        let u = rng.next_f64();
        let mut acc = 0.0f64;
        let mut picked = None;
        for j in 0..VOCAB_SIZE {
            if j == PAD as usize {
                continue;
            }
            acc += logp_t[j].exp().to_f64().unwrap();
            if u < acc {
                picked = Some(j as TokenId);
                break;
            }
        }
        // rounding fallback: the tail token takes the remainder
        let token = picked.unwrap_or((VOCAB_SIZE - 1) as TokenId);
        tokens.push(token);
        old_logp.push(logp1[token as usize].to_f64().unwrap());
        if token == EOS {
            break;
        }
    }
    let mean_entropy = entropy_sum / tokens.len() as f64;
    Ok(Response { tokens, old_logp, mean_entropy })
}

/// Teacher-forced per-token log-probabilities of `tokens` under `params`
/// (plain math, temperature 1). Serves both conditioning paths by swapping
/// the observation.
pub fn sequence_log_probs<F: Real>(
    tokens: &[TokenId],
    obs: Observation<'_>,
    question: &[TokenId],
    params: &PolicyParams<F>,
    cfg: &ModelConfig,
) -> Result<Vec<f64>, PolicyError> {
    let enc = encode_observation(obs, params, cfg)?;
    let mut out = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let logits = logits_from_enc(&enc, question, &tokens[..t], params, cfg);
        let mut logp = vec![F::zero(); VOCAB_SIZE];
        log_softmax_row(&logits, Some(PAD as usize), &mut logp);
        out.push(logp[tokens[t] as usize].to_f64().unwrap());
    }
    Ok(out)
}

/// Shannon entropy (nats) of the next-token distribution, PAD masked.
pub fn entropy_per_token<F: Real>(
    obs: Observation<'_>,
    question: &[TokenId],
    prefix: &[TokenId],
    params: &PolicyParams<F>,
    cfg: &ModelConfig,
) -> Result<f64, PolicyError> {
    let logits = next_token_logits(obs, question, prefix, params, cfg)?;
    Ok(softmax_entropy_row(&logits, Some(PAD as usize)).to_f64().unwrap())
}

/// Greedy decoding (argmax over non-PAD logits, lowest id on ties) until EOS
/// or T_max; the evaluation path.
pub fn greedy_decode<F: Real>(
    obs: Observation<'_>,
    question: &[TokenId],
    params: &PolicyParams<F>,
    cfg: &ModelConfig,
) -> Result<Vec<TokenId>, PolicyError> {
    let enc = encode_observation(obs, params, cfg)?;
    let mut tokens = Vec::new();
    while tokens.len() < cfg.t_max {
        let logits = logits_from_enc(&enc, question, &tokens, params, cfg);
        let mut best = None::<(TokenId, F)>;
        for (j, &z) in logits.iter().enumerate() {
            if j == PAD as usize {
                continue;
            }
            match best {
                Some((_, bz)) if z <= bz => {}
                _ => best = Some((j as TokenId, z)),
            }
        }
        let token = best.unwrap().0;
        tokens.push(token);
        if token == EOS {
            break;
        }
    }
    Ok(tokens)
}

/// Graph-mounted parameter leaves, in the same order as
/// [`PolicyParams::named`].
#[derive(Debug, Clone, Copy)]
pub struct PolicyLeaves {
    pub embed: Value,
    pub img_w: Value,
    pub img_b: Value,
    pub hid_w: Value,
    pub hid_b: Value,
    pub out_w: Value,
    pub out_b: Value,
}

impl PolicyLeaves {
    pub fn as_array(&self) -> [Value; 7] {
        [self.embed, self.img_w, self.img_b, self.hid_w, self.hid_b, self.out_w, self.out_b]
    }
}

pub fn mount_params<F: Real>(
    g: &mut Graph<F>,
    params: &PolicyParams<F>,
    trainable: bool,
) -> PolicyLeaves {
    PolicyLeaves {
        embed: g.leaf(params.embed.clone(), trainable),
        img_w: g.leaf(params.img_w.clone(), trainable),
        img_b: g.leaf(params.img_b.clone(), trainable),
        hid_w: g.leaf(params.hid_w.clone(), trainable),
        hid_b: g.leaf(params.hid_b.clone(), trainable),
        out_w: g.leaf(params.out_w.clone(), trainable),
        out_b: g.leaf(params.out_b.clone(), trainable),
    }
}

/// Build one mounted observation encoding (1 x d) in the graph.
pub fn encode_observation_graph<F: Real>(
    g: &mut Graph<F>,
    leaves: &PolicyLeaves,
    obs: Observation<'_>,
    cfg: &ModelConfig,
) -> Result<Value, PolicyError> {
    match obs {
        Observation::ImageFeatures(x) => {
            if x.len() != cfg.feat_dim {
                return Err(PolicyError::FeatureLength { got: x.len(), want: cfg.feat_dim });
            }
            let data: Vec<F> = x.iter().map(|&v| F::from_f64_c(v)).collect();
            let xr = g.constant(Tensor::from_op(vec![1, cfg.feat_dim], data));
            let proj = g.matmul(xr, leaves.img_w);
            let biased = g.add_row(proj, leaves.img_b);
            Ok(g.tanh(biased))
        }
        Observation::CaptionTokens(tokens) => {
            if tokens.contains(&PAD) {
                return Err(PolicyError::PadInCaption);
            }
            let (counts, _) = context_counts::<F>(&[], tokens);
            let row = g.constant(Tensor::from_op(vec![1, VOCAB_SIZE], counts));
            let mean = g.matmul(row, leaves.embed);
            Ok(g.tanh(mean))
        }
    }
}

/// Teacher-forced next-token logits for every position of a response, as
/// one graph value of shape [T, V]. All T positions run as batched matmuls;
/// rows are bit-identical to the per-step sampling path.
pub fn logits_graph<F: Real>(
    g: &mut Graph<F>,
    leaves: &PolicyLeaves,
    obs: Observation<'_>,
    question: &[TokenId],
    tokens: &[TokenId],
    cfg: &ModelConfig,
) -> Result<Value, PolicyError> {
    assert!(!tokens.is_empty(), "responses always contain at least one token");
    let t_len = tokens.len();
    let enc = encode_observation_graph(g, leaves, obs, cfg)?;
    let enc_rows = g.repeat_row(enc, t_len);

    let mut ctx_rows = Vec::with_capacity(t_len * VOCAB_SIZE);
    let mut last_rows = Vec::with_capacity(t_len * VOCAB_SIZE);
    let mut pos_col = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (counts, last) = context_counts::<F>(question, &tokens[..t]);
        ctx_rows.extend_from_slice(&counts);
        last_rows.extend_from_slice(&one_hot_row::<F>(last));
        pos_col.push(F::from_usize(t).unwrap() / F::from_usize(cfg.t_max).unwrap());
    }
    let a_ctx = g.constant(Tensor::from_op(vec![t_len, VOCAB_SIZE], ctx_rows));
    let a_last = g.constant(Tensor::from_op(vec![t_len, VOCAB_SIZE], last_rows));
    let pos = g.constant(Tensor::from_op(vec![t_len, 1], pos_col));

    let mean_emb = g.matmul(a_ctx, leaves.embed);
    let last_emb = g.matmul(a_last, leaves.embed);
    let x = g.hconcat(&[enc_rows, mean_emb, last_emb, pos]);

    let hid_lin = g.matmul(x, leaves.hid_w);
    let hid_biased = g.add_row(hid_lin, leaves.hid_b);
    let hid = g.tanh(hid_biased);
    let out_lin = g.matmul(hid, leaves.out_w);
    Ok(g.add_row(out_lin, leaves.out_b))
}

/// Teacher-forced log-probabilities of every token of a response, as one
/// graph value of shape [T] (PAD masked).
pub fn sequence_log_probs_graph<F: Real>(
    g: &mut Graph<F>,
    leaves: &PolicyLeaves,
    obs: Observation<'_>,
    question: &[TokenId],
    tokens: &[TokenId],
    cfg: &ModelConfig,
) -> Result<Value, PolicyError> {
    let logits = logits_graph(g, leaves, obs, question, tokens, cfg)?;
    let logp = g.log_softmax_rows(logits, Some(PAD as usize));
    Ok(g.gather_per_row(logp, tokens.iter().map(|&t| t as usize).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{self, BOX_CLOSE, BOX_OPEN, THINK_CLOSE, THINK_OPEN};

    fn test_cfg() -> ModelConfig {
        ModelConfig { feat_dim: 54, embed_dim: 32, hidden_dim: 64, t_max: 24 }
    }

    fn some_question() -> Vec<TokenId> {
        vec![vocab::HOW_MANY, vocab::color_token(1), vocab::OBJECTS]
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let cfg = test_cfg();
        let params = PolicyParams::<f64>::zeros(&cfg);
        let feats = vec![0.25; cfg.feat_dim];
        let logits =
            next_token_logits(Observation::ImageFeatures(&feats), &some_question(), &[], &params, &cfg)
                .unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        // log-prob of any sampled token is -ln 31
        let seq = sequence_log_probs(
            &[THINK_OPEN, EOS],
            Observation::ImageFeatures(&feats),
            &some_question(),
            &params,
            &cfg,
        )
        .unwrap();
        for lp in seq {
            assert!((lp + 31.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_zero_features_is_zero_vector() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(1);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let feats = vec![0.0; cfg.feat_dim];
        let enc = encode_observation(Observation::ImageFeatures(&feats), &params, &cfg).unwrap();
        assert!(enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn caption_encoding_is_permutation_invariant() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(2);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let a = [vocab::SIZE_SMALL, vocab::color_token(0), vocab::shape_token(1)];
        let b = [vocab::shape_token(1), vocab::SIZE_SMALL, vocab::color_token(0)];
        let ea = encode_observation(Observation::CaptionTokens(&a), &params, &cfg).unwrap();
        let eb = encode_observation(Observation::CaptionTokens(&b), &params, &cfg).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn singleton_caption_is_tanh_of_embedding_row() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(3);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let t = vocab::color_token(2);
        let enc = encode_observation(Observation::CaptionTokens(&[t]), &params, &cfg).unwrap();
        let row = params.embed.row(t as usize);
        for (e, r) in enc.iter().zip(row) {
            assert!((e - r.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_feature_length_is_usage_error() {
        let cfg = test_cfg();
        let params = PolicyParams::<f64>::zeros(&cfg);
        let feats = vec![0.0; 10];
        let err =
            encode_observation(Observation::ImageFeatures(&feats), &params, &cfg).unwrap_err();
        assert_eq!(err, PolicyError::FeatureLength { got: 10, want: 54 });
    }

    #[test]
    fn logits_are_deterministic() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(4);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = (0..cfg.feat_dim).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = some_question();
        let prefix = [THINK_OPEN, vocab::digit_token(3)];
        let a = next_token_logits(Observation::ImageFeatures(&feats), &q, &prefix, &params, &cfg).unwrap();
        let b = next_token_logits(Observation::ImageFeatures(&feats), &q, &prefix, &params, &cfg).unwrap();
        let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }

    #[test]
    fn forced_eos_stops_immediately() {
        let cfg = test_cfg();
        let mut params = PolicyParams::<f64>::zeros(&cfg);
        params.out_b.data_mut()[EOS as usize] = 1e6;
        let feats = vec![0.0; cfg.feat_dim];
        let mut rng = Rng::seed_from_u64(5);
        let resp = sample_response(
            Observation::ImageFeatures(&feats),
            &some_question(),
            &params,
            1.0,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(resp.tokens, vec![EOS]);
    }

    #[test]
    fn same_seed_same_response() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(6);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = (0..cfg.feat_dim).map(|i| (i as f64 * 0.11).cos()).collect();
        let q = some_question();
        let mut r1 = Rng::seed_from_u64(99);
        let mut r2 = Rng::seed_from_u64(99);
        let a = sample_response(Observation::ImageFeatures(&feats), &q, &params, 1.0, &cfg, &mut r1).unwrap();
        let b = sample_response(Observation::ImageFeatures(&feats), &q, &params, 1.0, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_policy_single_token_frequencies() {
        // T_max = 1, zero params: each of the 31 non-PAD tokens has p = 1/31
        let cfg = ModelConfig { t_max: 1, ..test_cfg() };
        let params = PolicyParams::<f64>::zeros(&cfg);
        let feats = vec![0.0; cfg.feat_dim];
        let q = some_question();
        let mut rng = Rng::seed_from_u64(7);
        let n = 100_000;
        let mut counts = [0u32; VOCAB_SIZE];
        for _ in 0..n {
            let resp =
                sample_response(Observation::ImageFeatures(&feats), &q, &params, 1.0, &cfg, &mut rng)
                    .unwrap();
            assert_eq!(resp.tokens.len(), 1);
            counts[resp.tokens[0] as usize] += 1;
        }
        assert_eq!(counts[PAD as usize], 0, "PAD must never be sampled");
        let p = 1.0 / 31.0;
        let expect = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (j, &c) in counts.iter().enumerate() {
            if j == PAD as usize {
                continue;
            }
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma + 1.0,
                "token {j}: {c} vs {expect} +- {sigma}"
            );
        }
    }

    #[test]
    fn sampling_matches_softmax_of_scaled_logits() {
        // chi-squared test at 0.999 confidence on a frozen random policy
        let cfg = ModelConfig { t_max: 1, ..test_cfg() };
        let mut rng = Rng::seed_from_u64(8);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = (0..cfg.feat_dim).map(|i| ((i * 7) % 5) as f64 * 0.2).collect();
        let q = some_question();
        let temperature = 0.7;

        let logits =
            next_token_logits(Observation::ImageFeatures(&feats), &q, &[], &params, &cfg).unwrap();
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let mut logp = vec![0.0; VOCAB_SIZE];
        log_softmax_row(&scaled, Some(PAD as usize), &mut logp);

        let n = 100_000;
        let mut counts = [0u64; VOCAB_SIZE];
        let mut draw_rng = Rng::seed_from_u64(555);
        for _ in 0..n {
            let resp = sample_response(
                Observation::ImageFeatures(&feats),
                &q,
                &params,
                temperature,
                &cfg,
                &mut draw_rng,
            )
            .unwrap();
            counts[resp.tokens[0] as usize] += 1;
        }
        let mut chi2 = 0.0;
        for j in 0..VOCAB_SIZE {
            if j == PAD as usize {
                continue;
            }
            let e = n as f64 * logp[j].exp();
            chi2 += (counts[j] as f64 - e).powi(2) / e;
        }
        // chi-squared 0.999 quantile at 30 degrees of freedom
        assert!(chi2 < 59.703, "chi2 {chi2}");
    }

    #[test]
    fn teacher_forced_logps_reproduce_sampling_logps_exactly() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(9);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = (0..cfg.feat_dim).map(|i| (i as f64).sqrt() * 0.1).collect();
        let q = some_question();
        let mut draw = Rng::seed_from_u64(31);
        let resp =
            sample_response(Observation::ImageFeatures(&feats), &q, &params, 1.0, &cfg, &mut draw)
                .unwrap();
        // plain teacher forcing
        let seq = sequence_log_probs(
            &resp.tokens,
            Observation::ImageFeatures(&feats),
            &q,
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(seq, resp.old_logp);
        // graph teacher forcing matches bitwise too
        let mut g = Graph::new();
        let leaves = mount_params(&mut g, &params, true);
        let lp = sequence_log_probs_graph(
            &mut g,
            &leaves,
            Observation::ImageFeatures(&feats),
            &q,
            &resp.tokens,
            &cfg,
        )
        .unwrap();
        let graph_bits: Vec<u64> = g.value(lp).data().iter().map(|v| v.to_bits()).collect();
        let plain_bits: Vec<u64> = resp.old_logp.iter().map(|v| v.to_bits()).collect();
        assert_eq!(graph_bits, plain_bits);
    }

    #[test]
    fn log_probs_are_valid_probabilities() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(10);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = (0..cfg.feat_dim).map(|i| (i % 3) as f64 - 1.0).collect();
        let tokens = [THINK_OPEN, THINK_CLOSE, BOX_OPEN, vocab::digit_token(2), BOX_CLOSE, EOS];
        let seq = sequence_log_probs(
            &tokens,
            Observation::ImageFeatures(&feats),
            &some_question(),
            &params,
            &cfg,
        )
        .unwrap();
        for lp in seq {
            let p = lp.exp();
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn entropy_cases() {
        let cfg = test_cfg();
        let params = PolicyParams::<f64>::zeros(&cfg);
        let feats = vec![0.0; cfg.feat_dim];
        // uniform over 31 -> ln 31
        let h = entropy_per_token(Observation::ImageFeatures(&feats), &some_question(), &[], &params, &cfg)
            .unwrap();
        assert!((h - 31.0f64.ln()).abs() < 1e-12);
        assert!((h - 3.4340).abs() < 1e-4);
        // near-deterministic -> near-zero entropy
        let mut spiky = PolicyParams::<f64>::zeros(&cfg);
        spiky.out_b.data_mut()[EOS as usize] = 1e6;
        let h0 =
            entropy_per_token(Observation::ImageFeatures(&feats), &some_question(), &[], &spiky, &cfg)
                .unwrap();
        assert!(h0 < 1e-6);
        // two-point distribution -> ln 2
        let mut two = PolicyParams::<f64>::zeros(&cfg);
        for j in 0..VOCAB_SIZE {
            two.out_b.data_mut()[j] = if j == 2 || j == 3 { 0.0 } else { -1e6 };
        }
        let h2 =
            entropy_per_token(Observation::ImageFeatures(&feats), &some_question(), &[], &two, &cfg)
                .unwrap();
        assert!((h2 - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn snapshot_is_isolated_and_reproducible() {
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(11);
        let mut live = PolicyParams::<f64>::init(&cfg, &mut rng);
        let snap = live.snapshot();
        let snap2 = live.snapshot();
        // zero the live params; snapshot unchanged
        let zeros = PolicyParams::<f64>::zeros(&cfg);
        live = zeros;
        let _ = &live;
        assert_ne!(snap.embed.data()[0], 0.0);
        // two snapshots produce identical outputs on any input
        let feats: Vec<f64> = (0..cfg.feat_dim).map(|i| (i as f64 * 0.01) - 0.2).collect();
        let a = next_token_logits(Observation::ImageFeatures(&feats), &some_question(), &[], &snap, &cfg)
            .unwrap();
        let b = next_token_logits(Observation::ImageFeatures(&feats), &some_question(), &[], &snap2, &cfg)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_observations_give_zero_kl_at_every_token() {
        // swapping the caption for itself yields identical distributions
        let cfg = test_cfg();
        let mut rng = Rng::seed_from_u64(12);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let cap = [vocab::SIZE_LARGE, vocab::color_token(1), vocab::shape_token(0)];
        let q = some_question();
        let tokens = [THINK_OPEN, THINK_CLOSE, BOX_OPEN, vocab::digit_token(1), BOX_CLOSE, EOS];
        let a = sequence_log_probs(&tokens, Observation::CaptionTokens(&cap), &q, &params, &cfg).unwrap();
        let b = sequence_log_probs(&tokens, Observation::CaptionTokens(&cap), &q, &params, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_of_logit_sum_matches_finite_differences() {
        use crate::finite_diff::finite_diff_check;
        let cfg = ModelConfig { feat_dim: 18, embed_dim: 6, hidden_dim: 8, t_max: 8 };
        let mut rng = Rng::seed_from_u64(13);
        let params = PolicyParams::<f64>::init(&cfg, &mut rng);
        let feats: Vec<f64> = (0..cfg.feat_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let q = some_question();
        let tokens = vec![THINK_OPEN, vocab::digit_token(4), EOS];
        let named: Vec<(String, Tensor<f64>)> =
            params.named().iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect();
        let feats2 = feats.clone();
        let (q2, tokens2, cfg2) = (q.clone(), tokens.clone(), cfg);
        let build = move |g: &mut Graph<f64>, leaves: &[Value]| {
            let pl = PolicyLeaves {
                embed: leaves[0],
                img_w: leaves[1],
                img_b: leaves[2],
                hid_w: leaves[3],
                hid_b: leaves[4],
                out_w: leaves[5],
                out_b: leaves[6],
            };
            let z = logits_graph(g, &pl, Observation::ImageFeatures(&feats2), &q2, &tokens2, &cfg2)
                .unwrap();
            g.sum(z)
        };
        let report = finite_diff_check(&named, &build, 1e-5, 1e-5);
        assert!(report.passed(), "logit sum: max rel err {}", report.max_rel_err);

        // and through the full log-prob path
        let build_lp = move |g: &mut Graph<f64>, leaves: &[Value]| {
            let pl = PolicyLeaves {
                embed: leaves[0],
                img_w: leaves[1],
                img_b: leaves[2],
                hid_w: leaves[3],
                hid_b: leaves[4],
                out_w: leaves[5],
                out_b: leaves[6],
            };
            let lp = sequence_log_probs_graph(
                g,
                &pl,
                Observation::ImageFeatures(&feats),
                &q,
                &tokens,
                &cfg,
            )
            .unwrap();
            g.sum(lp)
        };
        let report = finite_diff_check(&named, &build_lp, 1e-5, 1e-5);
        assert!(report.passed(), "logp sum: max rel err {}", report.max_rel_err);
    }
}
