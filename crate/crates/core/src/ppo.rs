//! PPO fine-tuning of a policy language model for comment generation.
//!
//! Each episode samples a comment for one description prompt at temperature 1
//! and receives a single terminal reward. Advantages come from GAE over a
//! linear value head on the policy's (detached) final hidden states. The loss
//! is the clipped surrogate plus an exact per-token KL penalty towards a frozen
//! reference policy.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{sample_with_rng, DecodeConfig, DecodeError};
use crate::linalg::{dot, log_softmax, Matrix};
use crate::model::{CausalLM, ModelError};
use crate::reward::{semantic_reward, RewardError, RewardScorer, TokenEmbedder};
use crate::tokenizer::EOS;
use crate::trainer::{adam_step, clip_grad_norm, AdamState};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("no episodes to learn from")]
    NoEpisodes,
    #[error("no comment tasks supplied")]
    NoTasks,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    SemanticF1,
    LearnedScorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    /// Updates whose policy drifts past `kl_ceiling_factor × kl_target` are cut short.
    pub kl_target: f64,
    pub kl_ceiling_factor: f64,
    pub ppo_epochs: usize,
    pub rollouts_per_update: usize,
    pub updates: usize,
    pub gae_lambda: f64,
    pub gamma: f64,
    /// Reward deducted per comment token beyond `length_cap`.
    pub length_penalty: f64,
    /// Comment-length allowance in tokens; derived from the data when `None`.
    pub length_cap: Option<usize>,
    pub reward_source: RewardSource,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    pub grad_clip: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_coef: 0.1,
            kl_target: 0.2,
            kl_ceiling_factor: 10.0,
            ppo_epochs: 4,
            rollouts_per_update: 16,
            updates: 50,
            gae_lambda: 0.95,
            gamma: 1.0,
            length_penalty: 0.1,
            length_cap: None,
            reward_source: RewardSource::SemanticF1,
            learning_rate: 1e-4,
            value_learning_rate: 1e-2,
            grad_clip: 1.0,
            max_new_tokens: 16,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn kl_ceiling(&self) -> f64 {
        self.kl_ceiling_factor * self.kl_target
    }

    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.ppo_epochs == 0 || self.rollouts_per_update == 0 {
            return bad("ppo_epochs and rollouts_per_update must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.kl_coef < 0.0 || self.length_penalty < 0.0 || !(self.kl_ceiling() > 0.0) {
            return bad("kl_coef and length_penalty must be non-negative and the KL ceiling positive");
        }
        if !(self.learning_rate >= 0.0 && self.value_learning_rate >= 0.0 && self.grad_clip > 0.0) {
            return bad("learning rates must be non-negative and grad_clip positive");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        Ok(())
    }
}

/// One comment-generation prompt with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CommentTask {
    /// Model input: `BOS`, instruction and description, `SEP`.
    pub prompt: Vec<u32>,
    /// Description tokens alone, for the learned scorer.
    pub description: Vec<u32>,
    pub reference: Vec<u32>,
}

/// Where terminal rewards come from.
pub enum Rewarder<'a> {
    /// Semantic F1 against the reference comment.
    Semantic(&'a dyn TokenEmbedder),
    /// A preference-trained scorer of (description, comment).
    Scorer(&'a RewardScorer),
}

impl Rewarder<'_> {
    /// Reward before the length penalty; an empty comment earns 0.
    pub fn base_reward(&self, task: &CommentTask, comment: &[u32]) -> Result<f64, RewardError> {
        if comment.is_empty() {
            return Ok(0.0);
        }
        match self {
            Rewarder::Semantic(e) => Ok(semantic_reward(&task.reference, comment, *e)?.f1),
            Rewarder::Scorer(s) => s.score(&task.description, comment),
        }
    }
}

/// Base reward minus `penalty` per token beyond `cap`.
pub fn terminal_reward(base: f64, comment_len: usize, cap: usize, penalty: f64) -> f64 {
    base - penalty * comment_len.saturating_sub(cap) as f64
}

/// Nearest-rank 95th percentile of comment lengths.
pub fn length_cap_from_lengths(lengths: &[usize]) -> usize {
    if lengths.is_empty() {
        return 0;
    }
    let mut l = lengths.to_vec();
    l.sort_unstable();
    let rank = (0.95 * l.len() as f64).ceil() as usize;
    l[rank.clamp(1, l.len()) - 1]
}

/// Scalar state-value estimate from a final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ValueHead {
    pub fn new(d_model: usize) -> Self {
        Self { weights: vec![0.0; d_model], bias: 0.0 }
    }

    pub fn value(&self, hidden: &[f64]) -> f64 {
        dot(&self.weights, hidden) + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt_ids: Vec<u32>,
    /// Sampled tokens, including a final EOS when one was produced.
    pub action_ids: Vec<u32>,
    pub behavior_logprobs: Vec<f64>,
    pub reward: f64,
    /// Value estimate before each action.
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Episode {
    /// The generated comment without its EOS.
    pub fn comment(&self) -> &[u32] {
        match self.action_ids.last() {
            Some(&EOS) => &self.action_ids[..self.action_ids.len() - 1],
            _ => &self.action_ids,
        }
    }

    fn sequence(&self) -> Vec<u32> {
        let mut ids = self.prompt_ids.clone();
        ids.extend_from_slice(&self.action_ids);
        ids
    }
}

/// GAE with a reward only at the final step and zero value after it.
pub fn gae_terminal(reward: f64, values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let k = values.len();
    let mut adv = vec![0.0; k];
    let mut acc = 0.0;
    for t in (0..k).rev() {
        let next_v = if t + 1 < k { values[t + 1] } else { 0.0 };
        let r = if t + 1 == k { reward } else { 0.0 };
        let delta = r + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Samples one comment at temperature 1 and scores it.
pub fn rollout_episode<R: Rng>(
    policy: &CausalLM,
    value_head: &ValueHead,
    task: &CommentTask,
    rewarder: &Rewarder,
    length_cap: usize,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<Episode, PpoError> {
    let dc = DecodeConfig { temperature: 1.0, max_new_tokens: cfg.max_new_tokens, eos_id: Some(EOS), ..DecodeConfig::default() };
    let hyp = sample_with_rng(policy, &task.prompt, &dc, rng)?;
    let mut ep = Episode {
        prompt_ids: task.prompt.clone(),
        action_ids: hyp.ids,
        behavior_logprobs: Vec::new(),
        reward: 0.0,
        values: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    if ep.action_ids.is_empty() {
        return Ok(ep);
    }
    let cache = policy.forward(&ep.sequence())?;
    let p = ep.prompt_ids.len();
    for (t, &a) in ep.action_ids.iter().enumerate() {
        ep.behavior_logprobs.push(log_softmax(cache.logits.row(p + t - 1), 1.0)[a as usize]);
        ep.values.push(value_head.value(cache.hidden.row(p + t - 1)));
    }
    let comment = ep.comment().to_vec();
    ep.reward = terminal_reward(rewarder.base_reward(task, &comment)?, comment.len(), length_cap, cfg.length_penalty);
    let (adv, ret) = gae_terminal(ep.reward, &ep.values, cfg.gamma, cfg.gae_lambda);
    ep.advantages = adv;
    ep.returns = ret;
    Ok(ep)
}

/// Optimizer state carried across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoOptimizer {
    pub policy: AdamState,
    pub value: AdamState,
}

impl PpoOptimizer {
    pub fn new(policy: &CausalLM) -> Self {
        Self { policy: AdamState::new(policy.num_params()), value: AdamState::new(policy.config().d_model + 1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    /// Mean per-token KL(policy ‖ reference) after the update.
    pub kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

/// Per-episode reference log-probabilities over the action rows.
fn reference_rows(reference: &CausalLM, episodes: &[Episode]) -> Result<Vec<Vec<Vec<f64>>>, PpoError> {
    episodes
        .iter()
        .map(|ep| {
            if ep.action_ids.is_empty() {
                return Ok(Vec::new());
            }
            let logits = reference.forward_logits(&ep.sequence())?;
            let p = ep.prompt_ids.len();
            Ok((0..ep.action_ids.len()).map(|t| log_softmax(logits.row(p + t - 1), 1.0)).collect())
        })
        .collect()
}

fn kl_row(logp: &[f64], logr: &[f64]) -> f64 {
    logp.iter().zip(logr).map(|(lp, lr)| lp.exp() * (lp - lr)).sum()
}

/// Mean per-token KL(policy ‖ reference) over the episodes' action positions.
fn mean_kl(policy: &CausalLM, episodes: &[Episode], ref_rows: &[Vec<Vec<f64>>]) -> Result<f64, PpoError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (ep, rows) in episodes.iter().zip(ref_rows) {
        if ep.action_ids.is_empty() {
            continue;
        }
        let logits = policy.forward_logits(&ep.sequence())?;
        let p = ep.prompt_ids.len();
        for (t, r) in rows.iter().enumerate() {
            sum += kl_row(&log_softmax(logits.row(p + t - 1), 1.0), r);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Zero-mean, unit-variance advantages across all tokens of the batch;
/// a constant batch maps to zeros.
pub fn normalize_advantages(episodes: &[Episode]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = episodes.iter().flat_map(|e| e.advantages.iter().copied()).collect();
    if all.is_empty() {
        return episodes.iter().map(|_| Vec::new()).collect();
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len() as f64;
    let std = var.sqrt();
    episodes
        .iter()
        .map(|e| e.advantages.iter().map(|a| if std > 1e-8 { (a - mean) / std } else { 0.0 }).collect())
        .collect()
}

struct EpochGrads {
    policy: Vec<f64>,
    value: Vec<f64>,
    policy_loss: f64,
    value_loss: f64,
    clipped: usize,
    tokens: usize,
}

/// Gradients of the mean per-token objective
/// `−min(ρA, clip(ρ)A) + β·KL` and of `½·mean (V − return)²`.
fn epoch_gradients(
    policy: &CausalLM,
    value_head: &ValueHead,
    episodes: &[Episode],
    advantages: &[Vec<f64>],
    ref_rows: &[Vec<Vec<f64>>],
    cfg: &PpoConfig,
) -> Result<EpochGrads, PpoError> {
    let d = policy.config().d_model;
    let tokens: usize = episodes.iter().map(|e| e.action_ids.len()).sum();
    let mut g = EpochGrads {
        policy: vec![0.0; policy.num_params()],
        value: vec![0.0; d + 1],
        policy_loss: 0.0,
        value_loss: 0.0,
        clipped: 0,
        tokens,
    };
    if tokens == 0 {
        return Ok(g);
    }
    let scale = 1.0 / tokens as f64;
    let eps = cfg.clip_epsilon;
    for ((ep, adv), rows) in episodes.iter().zip(advantages).zip(ref_rows) {
        if ep.action_ids.is_empty() {
            continue;
        }
        let cache = policy.forward(&ep.sequence())?;
        let p = ep.prompt_ids.len();
        let mut dlogits = Matrix::zeros(cache.logits.rows, cache.logits.cols);
        for (t, &a) in ep.action_ids.iter().enumerate() {
            let row = p + t - 1;
            let logp = log_softmax(cache.logits.row(row), 1.0);
            let ratio = (logp[a as usize] - ep.behavior_logprobs[t]).exp();
            let at = adv[t];
            let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
            g.policy_loss -= scale * (ratio * at).min(clipped_ratio * at);
            if (ratio - 1.0).abs() > eps {
                g.clipped += 1;
            }
            // The min picks the clipped branch (zero gradient) only when the
            // ratio has already moved past the bound in the advantage's favour.
            let active = !((at > 0.0 && ratio > 1.0 + eps) || (at < 0.0 && ratio < 1.0 - eps));
            let dlogp = if active { -ratio * at } else { 0.0 };
            let kl = kl_row(&logp, &rows[t]);
            g.policy_loss += scale * cfg.kl_coef * kl;
            let out = dlogits.row_mut(row);
            for (j, o) in out.iter_mut().enumerate() {
                let pj = logp[j].exp();
                let onehot = if j == a as usize { 1.0 } else { 0.0 };
                *o += scale * (dlogp * (onehot - pj) + cfg.kl_coef * pj * ((logp[j] - rows[t][j]) - kl));
            }

            let h = cache.hidden.row(row);
            let err = value_head.value(h) - ep.returns[t];
            g.value_loss += scale * 0.5 * err * err;
            for (gw, hi) in g.value[..d].iter_mut().zip(h) {
                *gw += scale * err * hi;
            }
            g.value[d] += scale * err;
        }
        policy.backward(&cache, Some(&dlogits), None, &mut g.policy);
    }
    Ok(g)
}

/// Runs up to `ppo_epochs` full-batch passes over `episodes`. An epoch that
/// pushes KL to the reference above the ceiling is undone and ends the update.
pub fn ppo_update(
    policy: &mut CausalLM,
    value_head: &mut ValueHead,
    optimizer: &mut PpoOptimizer,
    episodes: &[Episode],
    reference: &CausalLM,
    cfg: &PpoConfig,
) -> Result<UpdateStats, PpoError> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(PpoError::NoEpisodes);
    }
    let ref_rows = reference_rows(reference, episodes)?;
    let advantages = normalize_advantages(episodes);
    let mut stats = UpdateStats {
        mean_reward: episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64,
        kl: 0.0,
        clip_fraction: 0.0,
        policy_loss: 0.0,
        value_loss: 0.0,
        epochs_run: 0,
        early_stopped: false,
    };
    let (mut clipped, mut seen) = (0usize, 0usize);
    let mut kl = mean_kl(policy, episodes, &ref_rows)?;
    for epoch in 0..cfg.ppo_epochs {
        let g = epoch_gradients(policy, value_head, episodes, &advantages, &ref_rows, cfg)?;
        if epoch == 0 {
            stats.policy_loss = g.policy_loss;
            stats.value_loss = g.value_loss;
        }
        clipped += g.clipped;
        seen += g.tokens;
        if g.tokens == 0 {
            break;
        }
        let saved = (policy.params().to_vec(), optimizer.clone(), value_head.clone());
        let mut pg = g.policy;
        clip_grad_norm(&mut pg, cfg.grad_clip);
        adam_step(policy.params_mut(), &pg, &mut optimizer.policy, cfg.learning_rate);
        policy.round_to_storage();

        let mut vp: Vec<f64> = value_head.weights.iter().copied().chain([value_head.bias]).collect();
        adam_step(&mut vp, &g.value, &mut optimizer.value, cfg.value_learning_rate);
        value_head.bias = vp.pop().expect("bias slot");
        value_head.weights = vp;

        let new_kl = mean_kl(policy, episodes, &ref_rows)?;
        if !new_kl.is_finite() || new_kl > cfg.kl_ceiling() {
            policy.params_mut().copy_from_slice(&saved.0);
            *optimizer = saved.1;
            *value_head = saved.2;
            stats.early_stopped = true;
            log::warn!("KL {new_kl:.4} exceeds ceiling {:.4}; epoch {} rolled back", cfg.kl_ceiling(), epoch + 1);
            break;
        }
        kl = new_kl;
        stats.epochs_run += 1;
    }
    stats.kl = kl;
    stats.clip_fraction = if seen == 0 { 0.0 } else { clipped as f64 / seen as f64 };
    Ok(stats)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardCurve {
    pub updates: Vec<UpdateStats>,
}

impl RewardCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "update,mean_reward,kl,clip_fraction")?;
        for (i, u) in self.updates.iter().enumerate() {
            writeln!(w, "{},{},{},{}", i + 1, u.mean_reward, u.kl, u.clip_fraction)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn mean_rewards(&self) -> Vec<f64> {
        self.updates.iter().map(|u| u.mean_reward).collect()
    }
}

/// Length cap from the config, or the 95th-percentile reference length.
pub fn resolve_length_cap(tasks: &[CommentTask], cfg: &PpoConfig) -> usize {
    cfg.length_cap.unwrap_or_else(|| {
        let lengths: Vec<usize> = tasks.iter().map(|t| t.reference.len()).collect();
        length_cap_from_lengths(&lengths)
    })
}

/// Clones `supervised` into a policy and alternates rollouts (prompts drawn
/// with replacement per update) with PPO updates against the frozen original.
pub fn rl_finetune(
    supervised: &CausalLM,
    tasks: &[CommentTask],
    rewarder: &Rewarder,
    cfg: &PpoConfig,
) -> Result<(CausalLM, RewardCurve), PpoError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(PpoError::NoTasks);
    }
    let cap = resolve_length_cap(tasks, cfg);
    let mut policy = supervised.clone();
    let mut value_head = ValueHead::new(policy.config().d_model);
    let mut optimizer = PpoOptimizer::new(&policy);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = RewardCurve::default();
    for u in 0..cfg.updates {
        let mut episodes = Vec::with_capacity(cfg.rollouts_per_update);
        for _ in 0..cfg.rollouts_per_update {
            let task = tasks.choose(&mut rng).expect("tasks is non-empty");
            episodes.push(rollout_episode(&policy, &value_head, task, rewarder, cap, cfg, &mut rng)?);
        }
        let stats = ppo_update(&mut policy, &mut value_head, &mut optimizer, &episodes, supervised, cfg)?;
        log::info!("update {}: reward {:.4} kl {:.4} clip {:.3}", u + 1, stats.mean_reward, stats.kl, stats.clip_fraction);
        curve.updates.push(stats);
    }
    Ok((policy, curve))
}

/// Mean penalized reward of `samples` temperature-1 generations per task,
/// drawn from a generator seeded by `seed`.
pub fn evaluate_policy(
    policy: &CausalLM,
    tasks: &[CommentTask],
    rewarder: &Rewarder,
    length_cap: usize,
    cfg: &PpoConfig,
    samples: usize,
    seed: u64,
) -> Result<f64, PpoError> {
    if tasks.is_empty() || samples == 0 {
        return Err(PpoError::NoTasks);
    }
    let head = ValueHead::new(policy.config().d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for task in tasks {
        for _ in 0..samples {
            total += rollout_episode(policy, &head, task, rewarder, length_cap, cfg, &mut rng)?.reward;
        }
    }
    Ok(total / (tasks.len() * samples) as f64)
}
