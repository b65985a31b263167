//! PPO optimization with generalized advantage estimation, success-episode
//! filtering, and the outer-loop cross-modal auxiliary update.
//!
//! Training alternates three phases: collect rollouts from a bank of
//! parallel environments (tracking instructions per step when enabled), run
//! clipped-surrogate PPO over the collected segments, then — if at least two
//! successful episodes are buffered — apply one separate Adam step on the
//! scaled auxiliary alignment loss. The RL loop always consumes every
//! episode; only the auxiliary step is restricted to successes.
//!
//! An optional warm-start spends the first `warmstart_frames` of the budget
//! cloning the scripted oracle instead: rollouts are driven by oracle
//! actions and the policy update becomes action cross-entropy (the value
//! head trains on returns as usual). Terminal-reward tasks whose random
//! success rate is a few percent rarely bootstrap from scratch inside a
//! desk-scale budget; a short imitation phase hands the optimizer a policy
//! worth improving while keeping every frame accounted against the budget.
//!
//! All randomness derives from the run seed through named counter streams
//! (mission generation, per-segment sampling, minibatch shuffling, parameter
//! init, evaluation), so runs are bit-exactly reproducible and checkpoints
//! can resume mid-run without serializing generator internals.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{
    aggregate_global, encode_instruction, encode_observation, policy_initial_hidden, policy_step,
    AgentNodes, AgentParams, EncoderConfig, LocalGlobalReps, Vocabulary,
};
use crate::error::{Error, Result};
use crate::gridworld::{
    generate, oracle_solve, Action, Episode, EpisodeStep, GenParams, GridWorld, Instruction, Level,
    Observation, Split, MAX_REWARD,
};
use crate::tracker::{Tracker, TrackerConfig};
use crate::xclip::{contrastive_loss, CarelConfig};
use crate::{Node, Real, Tape, Tensor};

// ---------------------------------------------------------------------------
// Deterministic seed streams
// ---------------------------------------------------------------------------

const STREAM_INIT: u64 = 0;
const STREAM_MISSION: u64 = 1;
const STREAM_SEGMENT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_EVAL_MISSION: u64 = 4;
const STREAM_EVAL_RNG: u64 = 5;

/// Derive an independent seed for (run, purpose, counter). Counters are
/// plain integers held in the trainer, so resuming from a checkpoint rejoins
/// every stream exactly where it left off.
fn stream_seed(run_seed: u64, stream: u64, counter: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update(stream.to_le_bytes());
    hasher.update(counter.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields at least 8 bytes"))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: Real,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub adam_eps: Real,
    /// Approximate transitions per minibatch (rounded up to whole env
    /// segments).
    pub batch_size: usize,
    pub clip_epsilon: Real,
    pub discount: Real,
    pub gae_lambda: Real,
    pub ppo_epochs: usize,
    pub entropy_coef: Real,
    pub value_coef: Real,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 7e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            clip_epsilon: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            ppo_epochs: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            rollout_len: 40,
            num_envs: 16,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::parameter(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::parameter(format!("{name} {beta} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::parameter("adam_eps must be positive"));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::parameter(format!(
                "clip_epsilon {} must be positive",
                self.clip_epsilon
            )));
        }
        for (name, v) in [("discount", self.discount), ("gae_lambda", self.gae_lambda)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::parameter(format!("{name} {v} must lie in (0, 1]")));
            }
        }
        for (name, v) in [("entropy_coef", self.entropy_coef), ("value_coef", self.value_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::parameter(format!("{name} {v} must be non-negative")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("ppo_epochs", self.ppo_epochs),
            ("rollout_len", self.rollout_len),
            ("num_envs", self.num_envs),
        ] {
            if v == 0 {
                return Err(Error::parameter(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Everything one training run depends on. Serialized into checkpoints so a
/// resumed or evaluated run cannot silently diverge from its origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub level: Level,
    pub seed: u64,
    pub total_frames: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Frames of oracle imitation before reinforcement learning begins
    /// (0 disables warm-start). Counted against `total_frames`.
    pub warmstart_frames: u64,
    /// Master switch for the auxiliary alignment objective.
    pub carel: bool,
    pub gen: GenParams,
    pub ppo: PpoConfig,
    pub carel_cfg: CarelConfig,
    /// `tracker_cfg.enabled` is the instruction-tracking switch.
    pub tracker_cfg: TrackerConfig,
    pub encoder: EncoderConfig,
    /// Record wall-clock timing (off for bit-reproducible metrics files).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            level: Level::GoToObj,
            seed: 0,
            total_frames: 500_000,
            eval_interval: 50_000,
            eval_episodes: 20,
            warmstart_frames: 0,
            carel: true,
            gen: GenParams::default(),
            ppo: PpoConfig::default(),
            carel_cfg: CarelConfig::default(),
            tracker_cfg: TrackerConfig {
                enabled: false,
                ..TrackerConfig::default()
            },
            encoder: EncoderConfig::default(),
            timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.ppo.validate()?;
        self.carel_cfg.validate()?;
        self.tracker_cfg.validate()?;
        self.encoder.validate()?;
        if self.total_frames == 0 {
            return Err(Error::parameter("total_frames must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::parameter("eval_interval must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::parameter("eval_episodes must be at least 1"));
        }
        if self.encoder.view_size != self.gen.view_size {
            return Err(Error::parameter(format!(
                "encoder view_size {} does not match environment view_size {}",
                self.encoder.view_size, self.gen.view_size
            )));
        }
        if self.carel_cfg.normalize_reps != self.encoder.normalize_reps {
            return Err(Error::parameter(
                "carel_cfg.normalize_reps must match encoder.normalize_reps",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam state over the agent's named parameter registry. The RL and
/// auxiliary objectives each hold their own instance, so their step-size
/// adaptation stays independent while the parameters are shared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(
        learning_rate: Real,
        beta1: Real,
        beta2: Real,
        epsilon: Real,
        params: &AgentParams,
    ) -> Adam {
        let zeros: Vec<Tensor> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads` is aligned with the parameter registry order;
    /// entries without a gradient are left untouched. When `allow` is given,
    /// only parameters named in it are updated.
    pub fn step(
        &mut self,
        params: &mut AgentParams,
        grads: &[Option<Tensor>],
        allow: Option<&HashSet<String>>,
    ) -> Result<()> {
        let named = params.named_mut();
        if named.len() != grads.len() || named.len() != self.m.len() {
            return Err(Error::dimension(format!(
                "optimizer holds {} slots but received {} parameters and {} gradients",
                self.m.len(),
                named.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for (i, (name, p)) in named.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if let Some(allow) = allow {
                if !allow.contains(&name) {
                    continue;
                }
            }
            if g.shape() != p.shape() {
                return Err(Error::dimension(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for {name} is not finite")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generalized advantage estimation
// ---------------------------------------------------------------------------

/// Standard GAE recursion over one environment's segment. `dones[t]` cuts
/// bootstrapping across episode boundaries; `bootstrap_value` estimates the
/// state after the final transition. Returns (advantages, returns) with
/// returns[t] = advantages[t] + values[t].
pub fn compute_gae(
    rewards: &[Real],
    values: &[Real],
    dones: &[bool],
    bootstrap_value: Real,
    discount: Real,
    gae_lambda: Real,
) -> Result<(Vec<Real>, Vec<Real>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::dimension(format!(
            "mismatched sequence lengths: {} rewards, {} values, {} dones",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 == n { bootstrap_value } else { values[t + 1] };
        let delta = rewards[t] + discount * next_value * live - values[t];
        carry = delta + discount * gae_lambda * live * carry;
        advantages[t] = carry;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// In-place standardization to mean 0, std 1 (with a small floor against
/// degenerate batches).
pub fn normalize_advantages(advantages: &mut [Real]) {
    if advantages.is_empty() {
        return;
    }
    let n = advantages.len() as Real;
    let mean = advantages.iter().sum::<Real>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<Real>() / n;
    let std = var.sqrt() + 1e-8;
    for a in advantages.iter_mut() {
        *a = (*a - mean) / std;
    }
}

// ---------------------------------------------------------------------------
// Rollout storage
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub prev_action: Action,
    pub action: Action,
    /// What the scripted oracle would do in this state; recorded during
    /// warm-start and used as the imitation target. `None` outside
    /// warm-start, or when too little step budget remains to plan.
    pub oracle_action: Option<Action>,
    /// Index into the segment's instruction snapshots.
    pub instr_phase: usize,
    /// True when this step begins a new episode (policy memory restarts).
    pub episode_start: bool,
    pub logp_old: Real,
    pub value_old: Real,
    pub reward: Real,
    pub done: bool,
    pub advantage: Real,
    pub ret: Real,
}

/// One environment's slice of a rollout phase, replayable against current
/// parameters: the policy memory entering the segment plus every
/// instruction snapshot the policy conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSegment {
    pub initial_hidden: Tensor,
    pub phases: Vec<Vec<usize>>,
    pub steps: Vec<Transition>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub segments: Vec<EnvSegment>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Success filtering
// ---------------------------------------------------------------------------

/// Accept exactly the episodes whose reward clears the acceptance
/// threshold `success_fraction · max_reward`.
pub fn filter_successful(
    episodes: Vec<Episode>,
    success_fraction: Real,
    max_reward: Real,
) -> Vec<Episode> {
    episodes
        .into_iter()
        .filter(|ep| ep.total_reward >= success_fraction * max_reward)
        .collect()
}

/// Bounded FIFO of threshold-clearing episodes feeding the auxiliary loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SuccessBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
    threshold: Real,
}

impl SuccessBuffer {
    pub fn new(capacity: usize, success_fraction: Real, max_reward: Real) -> Result<SuccessBuffer> {
        if capacity == 0 {
            return Err(Error::parameter("success buffer capacity must be at least 1"));
        }
        Ok(SuccessBuffer {
            episodes: VecDeque::with_capacity(capacity),
            capacity,
            threshold: success_fraction * max_reward,
        })
    }

    pub fn push(&mut self, episode: Episode) -> Result<()> {
        if episode.total_reward < self.threshold {
            return Err(Error::contract(format!(
                "episode reward {} is below the acceptance threshold {}",
                episode.total_reward, self.threshold
            )));
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Oldest-first iteration.
    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }
}

// ---------------------------------------------------------------------------
// PPO loss pieces
// ---------------------------------------------------------------------------

/// Per-transition clipped surrogate term min(r·A, clip(r, 1±ε)·A) with
/// r = exp(logp_new − logp_old). With a large ε the clip is inactive and the
/// term reduces exactly to the vanilla importance-weighted policy gradient.
pub fn clipped_surrogate(
    tape: &mut Tape,
    logp_new: Node,
    logp_old: Real,
    advantage: Real,
    clip_epsilon: Real,
) -> Result<Node> {
    let old = tape.constant(Tensor::scalar(logp_old))?;
    let diff = tape.sub(logp_new, old)?;
    let ratio = tape.exp(diff)?;
    let clipped = tape.clamp_const(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)?;
    let adv = tape.constant(Tensor::scalar(advantage))?;
    let unclipped_term = tape.mul(ratio, adv)?;
    let clipped_term = tape.mul(clipped, adv)?;
    tape.min_elem(unclipped_term, clipped_term)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: Real,
    pub value_loss: Real,
    pub entropy: Real,
    pub total_loss: Real,
    pub minibatches: usize,
}

struct MinibatchLoss {
    policy: Real,
    value: Real,
    entropy: Real,
    total: Real,
}

/// Forward + backward over whole env segments: replays the recurrent policy
/// from each segment's stored initial memory, re-encoding every instruction
/// snapshot with current parameters. With `imitate` set the policy term is
/// the log-likelihood of each step's stored oracle label instead of the
/// clipped surrogate, turning the update into imitation of the oracle on
/// the visited states; value regression and the entropy bonus are
/// unchanged.
fn ppo_minibatch(
    params: &AgentParams,
    enc: &EncoderConfig,
    vocab: &Vocabulary,
    ppo: &PpoConfig,
    segments: &[&EnvSegment],
    imitate: bool,
    frame: u64,
) -> Result<(MinibatchLoss, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let nodes = AgentNodes::insert(&mut tape, params)?;
    let mut policy_terms = Vec::new();
    let mut value_terms = Vec::new();
    let mut entropy_terms = Vec::new();

    for seg in segments {
        let mut phase_globals = Vec::with_capacity(seg.phases.len());
        for tokens in &seg.phases {
            let e = encode_instruction(&mut tape, &nodes, enc, vocab, tokens)?;
            phase_globals.push(e.v_global);
        }
        let mut hidden = tape.constant(seg.initial_hidden.clone())?;
        for tr in &seg.steps {
            if tr.episode_start {
                hidden = tape.constant(policy_initial_hidden(enc))?;
            }
            let step = policy_step(
                &mut tape,
                &nodes,
                enc,
                &tr.obs,
                tr.prev_action.index(),
                phase_globals[tr.instr_phase],
                hidden,
            )?;
            hidden = step.hidden;
            let logp_all = tape.log_softmax_temp(step.logits, 1.0)?;
            if imitate {
                if let Some(target) = tr.oracle_action {
                    policy_terms.push(tape.elem(logp_all, target.index())?);
                }
            } else {
                let logp = tape.elem(logp_all, tr.action.index())?;
                policy_terms.push(clipped_surrogate(
                    &mut tape,
                    logp,
                    tr.logp_old,
                    tr.advantage,
                    ppo.clip_epsilon,
                )?);
            }
            let target = tape.constant(Tensor::scalar(tr.ret))?;
            let diff = tape.sub(step.value, target)?;
            value_terms.push(tape.mul(diff, diff)?);
            let probs = tape.softmax_temp(step.logits, 1.0)?;
            let neg_entropy = tape.dot(probs, logp_all)?;
            entropy_terms.push(tape.scale(neg_entropy, -1.0)?);
        }
    }

    // Every unlabeled step was skipped above, so a warm-start minibatch can
    // in principle carry no policy term at all; value and entropy still
    // train.
    let policy_loss = if policy_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))?
    } else {
        let surrogate = tape.stack_scalars(&policy_terms)?;
        let surrogate_mean = tape.mean_all(surrogate)?;
        tape.scale(surrogate_mean, -1.0)?
    };
    let squared = tape.stack_scalars(&value_terms)?;
    let value_loss = tape.mean_all(squared)?;
    let entropies = tape.stack_scalars(&entropy_terms)?;
    let entropy = tape.mean_all(entropies)?;

    let weighted_value = tape.scale(value_loss, ppo.value_coef)?;
    let partial = tape.add(policy_loss, weighted_value)?;
    let weighted_entropy = tape.scale(entropy, ppo.entropy_coef)?;
    let total = tape.sub(partial, weighted_entropy)?;

    let loss = MinibatchLoss {
        policy: tape.value(policy_loss).scalar_value()?,
        value: tape.value(value_loss).scalar_value()?,
        entropy: tape.value(entropy).scalar_value()?,
        total: tape.value(total).scalar_value()?,
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "rl loss diverged at frame {frame}: policy {} value {} entropy {}",
            loss.policy, loss.value, loss.entropy
        )));
    }
    let grads = tape.backward(total)?;
    let grad_vec = nodes
        .named()
        .iter()
        .map(|(_, node)| grads.grad(*node).cloned())
        .collect();
    Ok((loss, grad_vec))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// One evaluation-window row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub frame: u64,
    pub episodes: u64,
    pub sr_train: Real,
    pub sr_holdout: Real,
    pub rl_loss: Real,
    /// Absent while the auxiliary update is skipped (too few successes or
    /// disabled).
    pub aux_loss: Option<Real>,
    pub mask_events: u64,
    pub fps: Option<Real>,
    pub wall_seconds: Option<Real>,
}

/// Stats of one collect → PPO → auxiliary cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseStats {
    pub frames: u64,
    pub episodes_finished: u64,
    pub episodes_accepted: u64,
    pub update: UpdateStats,
    pub aux_loss: Option<Real>,
    pub mask_events: u64,
}

/// One mask event with full context, for the audit log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskAudit {
    pub frame: u64,
    pub env: usize,
    pub mission_seed: u64,
    pub episode_step: usize,
    pub subtask: usize,
    pub score: Real,
    pub running_mean: Real,
    pub probability: Real,
    pub draw: Real,
}

struct WindowAccum {
    start_frame: u64,
    started: Option<Instant>,
    rl_sum: Real,
    rl_count: u64,
    aux_sum: Real,
    aux_count: u64,
    mask_events: u64,
}

impl WindowAccum {
    fn start(frame: u64, timing: bool) -> WindowAccum {
        WindowAccum {
            start_frame: frame,
            started: timing.then(Instant::now),
            rl_sum: 0.0,
            rl_count: 0,
            aux_sum: 0.0,
            aux_count: 0,
            mask_events: 0,
        }
    }

    fn absorb(&mut self, stats: &PhaseStats) {
        self.rl_sum += stats.update.total_loss;
        self.rl_count += 1;
        if let Some(aux) = stats.aux_loss {
            self.aux_sum += aux;
            self.aux_count += 1;
        }
        self.mask_events += stats.mask_events;
    }

    fn rl_mean(&self) -> Real {
        self.rl_sum / self.rl_count.max(1) as Real
    }

    fn aux_mean(&self) -> Option<Real> {
        (self.aux_count > 0).then(|| self.aux_sum / self.aux_count as Real)
    }
}

// ---------------------------------------------------------------------------
// Environment slots
// ---------------------------------------------------------------------------

/// One parallel environment plus everything episodic that has to survive
/// between rollout segments (and into checkpoints).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSlot {
    world: GridWorld,
    instruction: Instruction,
    mission_seed: u64,
    tracker: Option<Tracker>,
    /// The instruction as the policy currently sees it.
    masked_tokens: Vec<usize>,
    /// Policy memory carried across segment boundaries.
    hidden: Tensor,
    prev_action: Action,
    pending_steps: Vec<EpisodeStep>,
    episode_reward: Real,
    episode_start: bool,
    /// Remaining scripted actions while warm-start imitation drives this
    /// environment; refilled lazily and discarded on reset.
    oracle_plan: VecDeque<Action>,
}

fn generate_mission(cfg: &TrainConfig, counter: &mut u64) -> Result<(u64, GridWorld, Instruction)> {
    let seed = stream_seed(cfg.seed, STREAM_MISSION, *counter);
    *counter += 1;
    let (world, _spec, instruction) = generate(cfg.level, seed, Split::Train, &cfg.gen)?;
    Ok((seed, world, instruction))
}

fn new_slot(cfg: &TrainConfig, counter: &mut u64) -> Result<EnvSlot> {
    let (mission_seed, world, instruction) = generate_mission(cfg, counter)?;
    Ok(EnvSlot {
        world,
        masked_tokens: instruction.tokens.clone(),
        instruction,
        mission_seed,
        tracker: None,
        hidden: policy_initial_hidden(&cfg.encoder),
        prev_action: Action::DoneNoop,
        pending_steps: Vec::new(),
        episode_reward: 0.0,
        episode_start: true,
        oracle_plan: VecDeque::new(),
    })
}

fn reset_slot(slot: &mut EnvSlot, cfg: &TrainConfig, counter: &mut u64) -> Result<()> {
    *slot = new_slot(cfg, counter)?;
    Ok(())
}

/// Lazily build the per-episode tracker: it needs the original
/// instruction's token representations under the current parameters.
fn ensure_tracker(
    slot: &mut EnvSlot,
    tape: &mut Tape,
    nodes: &AgentNodes,
    enc: &EncoderConfig,
    vocab: &Vocabulary,
    tracker_cfg: &TrackerConfig,
) -> Result<()> {
    if !tracker_cfg.enabled || slot.tracker.is_some() {
        return Ok(());
    }
    let e = encode_instruction(tape, nodes, enc, vocab, &slot.instruction.tokens)?;
    let v = tape.value(e.v).clone();
    slot.tracker = Some(Tracker::new(*tracker_cfg, &slot.instruction.tokens, v)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// Action selection helpers
// ---------------------------------------------------------------------------

fn softmax_probs_logps(logits: &[Real]) -> (Vec<Real>, Vec<Real>) {
    let hi = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = logits.iter().map(|l| (l - hi).exp()).collect();
    let z: Real = exps.iter().sum();
    let log_z = z.ln();
    let probs = exps.iter().map(|e| e / z).collect();
    let logps = logits.iter().map(|l| l - hi - log_z).collect();
    (probs, logps)
}

fn sample_index(probs: &[Real], rng: &mut impl Rng) -> usize {
    let draw: Real = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax_index(values: &[Real]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSelection {
    Greedy,
    Sample,
}

/// Play one full episode with the given parameters (no updates). Tracking,
/// when configured, follows the same per-step protocol as training, with
/// the masking schedule evaluated at `frame`.
pub fn run_policy_episode(
    params: &AgentParams,
    enc: &EncoderConfig,
    vocab: &Vocabulary,
    tracking: Option<&TrackerConfig>,
    world: &mut GridWorld,
    instruction: &Instruction,
    selection: ActionSelection,
    frame: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Episode, u64)> {
    let mut tape = Tape::new();
    let nodes = AgentNodes::insert(&mut tape, params)?;
    let mut tracker = match tracking {
        Some(tc) if tc.enabled => {
            let e = encode_instruction(&mut tape, &nodes, enc, vocab, &instruction.tokens)?;
            Some(Tracker::new(*tc, &instruction.tokens, tape.value(e.v).clone())?)
        }
        _ => None,
    };
    let mut v_global = encode_instruction(&mut tape, &nodes, enc, vocab, &instruction.tokens)?.v_global;
    let mut hidden = tape.constant(policy_initial_hidden(enc))?;
    let mut prev_action = Action::DoneNoop;
    let mut steps = Vec::new();
    let mut total_reward = 0.0;
    let mut mask_events = 0;

    while !world.is_done() {
        let obs = world.observe();
        let step = policy_step(&mut tape, &nodes, enc, &obs, prev_action.index(), v_global, hidden)?;
        hidden = step.hidden;
        let logits = tape.value(step.logits).data().to_vec();
        let action_index = match selection {
            ActionSelection::Greedy => argmax_index(&logits),
            ActionSelection::Sample => {
                let (probs, _) = softmax_probs_logps(&logits);
                sample_index(&probs, rng)
            }
        };
        let action = Action::from_index(action_index)?;
        let outcome = world.step(action)?;
        total_reward += outcome.reward;
        if let Some(tr) = tracker.as_mut() {
            if !outcome.done {
                let xe = encode_observation(&mut tape, &nodes, enc, &obs, action_index)?;
                let x_t = tape.value(xe.x).data().to_vec();
                if tr.step(&x_t, frame, rng)?.is_some() {
                    mask_events += 1;
                    let masked = tr.masked_tokens().to_vec();
                    v_global = encode_instruction(&mut tape, &nodes, enc, vocab, &masked)?.v_global;
                }
            }
        }
        steps.push(EpisodeStep {
            obs,
            action,
            reward: outcome.reward,
            done: outcome.done,
        });
        prev_action = action;
    }

    Ok((
        Episode {
            steps,
            instruction: instruction.clone(),
            success: world.succeeded(),
            total_reward,
            subtask_completion_steps: world.completion_steps().to_vec(),
        },
        mask_events,
    ))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state: restoring one and continuing is bit-identical
/// to never having stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub frame: u64,
    pub episodes: u64,
    pub mission_counter: u64,
    pub segment_counter: u64,
    pub update_counter: u64,
    pub eval_counter: u64,
    pub params: AgentParams,
    pub adam_rl: Adam,
    pub adam_aux: Adam,
    pub success: Vec<Episode>,
    pub envs: Vec<EnvSlot>,
}

// ---------------------------------------------------------------------------
// The trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    cfg: TrainConfig,
    vocab: Vocabulary,
    params: AgentParams,
    adam_rl: Adam,
    adam_aux: Adam,
    success: SuccessBuffer,
    envs: Vec<EnvSlot>,
    frame: u64,
    episodes: u64,
    mission_counter: u64,
    segment_counter: u64,
    update_counter: u64,
    eval_counter: u64,
    next_eval: u64,
    audit: Vec<MaskAudit>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_INIT, 0));
        let params = AgentParams::init(&cfg.encoder, vocab.len(), &mut rng)?;
        let adam_rl = Adam::new(
            cfg.ppo.learning_rate,
            cfg.ppo.adam_beta1,
            cfg.ppo.adam_beta2,
            cfg.ppo.adam_eps,
            &params,
        );
        let adam_aux = adam_rl.clone();
        let success =
            SuccessBuffer::new(cfg.carel_cfg.aux_batch_max, cfg.carel_cfg.success_fraction, MAX_REWARD)?;
        let mut mission_counter = 0;
        let mut envs = Vec::with_capacity(cfg.ppo.num_envs);
        for _ in 0..cfg.ppo.num_envs {
            envs.push(new_slot(&cfg, &mut mission_counter)?);
        }
        let next_eval = cfg.eval_interval;
        Ok(Trainer {
            cfg,
            vocab,
            params,
            adam_rl,
            adam_aux,
            success,
            envs,
            frame: 0,
            episodes: 0,
            mission_counter,
            segment_counter: 0,
            update_counter: 0,
            eval_counter: 0,
            next_eval,
            audit: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn episodes_finished(&self) -> u64 {
        self.episodes
    }

    pub fn success_buffer(&self) -> &SuccessBuffer {
        &self.success
    }

    /// Take the mask events accumulated since the last drain.
    pub fn drain_mask_audit(&mut self) -> Vec<MaskAudit> {
        std::mem::take(&mut self.audit)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            frame: self.frame,
            episodes: self.episodes,
            mission_counter: self.mission_counter,
            segment_counter: self.segment_counter,
            update_counter: self.update_counter,
            eval_counter: self.eval_counter,
            params: self.params.clone(),
            adam_rl: self.adam_rl.clone(),
            adam_aux: self.adam_aux.clone(),
            success: self.success.episodes().cloned().collect(),
            envs: self.envs.clone(),
        }
    }

    pub fn restore(ck: Checkpoint) -> Result<Trainer> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {} does not match supported version {}",
                ck.version, CHECKPOINT_VERSION
            )));
        }
        ck.config.validate()?;
        let vocab = Vocabulary::standard();
        ck.params.validate(&ck.config.encoder, vocab.len())?;
        if ck.envs.len() != ck.config.ppo.num_envs {
            return Err(Error::Version(format!(
                "checkpoint holds {} environments but the config asks for {}",
                ck.envs.len(),
                ck.config.ppo.num_envs
            )));
        }
        let mut success = SuccessBuffer::new(
            ck.config.carel_cfg.aux_batch_max,
            ck.config.carel_cfg.success_fraction,
            MAX_REWARD,
        )?;
        for ep in ck.success {
            success.push(ep)?;
        }
        let next_eval = (ck.frame / ck.config.eval_interval + 1) * ck.config.eval_interval;
        Ok(Trainer {
            vocab,
            params: ck.params,
            adam_rl: ck.adam_rl,
            adam_aux: ck.adam_aux,
            success,
            envs: ck.envs,
            frame: ck.frame,
            episodes: ck.episodes,
            mission_counter: ck.mission_counter,
            segment_counter: ck.segment_counter,
            update_counter: ck.update_counter,
            eval_counter: ck.eval_counter,
            next_eval,
            audit: Vec::new(),
            cfg: ck.config,
        })
    }

    /// Run all parallel environments for one rollout segment, sampling from
    /// the current policy and tracking instructions when enabled. Returns
    /// the replayable buffer, the episodes that finished, and the number of
    /// mask events.
    /// Collect one rollout segment from every environment. With `imitate`
    /// set, half the environments replay scripted-oracle plans and the rest
    /// sample the policy as usual, and every transition carries the oracle's
    /// action for its state as an imitation label; everything else —
    /// tracking, episode accounting, GAE — is identical.
    pub fn collect_rollouts(&mut self, imitate: bool) -> Result<(RolloutBuffer, Vec<Episode>, u64)> {
        let segment_seed = stream_seed(self.cfg.seed, STREAM_SEGMENT, self.segment_counter);
        self.segment_counter += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(segment_seed);

        let mut tape = Tape::new();
        let nodes = AgentNodes::insert(&mut tape, &self.params)?;
        let cfg = &self.cfg;
        let vocab = &self.vocab;

        struct Seg {
            hidden: Node,
            v_global: Node,
            phases: Vec<Vec<usize>>,
            steps: Vec<Transition>,
            initial_hidden: Tensor,
        }
        let mut segs: Vec<Seg> = Vec::with_capacity(cfg.ppo.num_envs);
        for slot in self.envs.iter_mut() {
            ensure_tracker(slot, &mut tape, &nodes, &cfg.encoder, vocab, &cfg.tracker_cfg)?;
            let enc = encode_instruction(&mut tape, &nodes, &cfg.encoder, vocab, &slot.masked_tokens)?;
            segs.push(Seg {
                hidden: tape.constant(slot.hidden.clone())?,
                v_global: enc.v_global,
                phases: vec![slot.masked_tokens.clone()],
                steps: Vec::with_capacity(cfg.ppo.rollout_len),
                initial_hidden: slot.hidden.clone(),
            });
        }

        let mut episodes = Vec::new();
        let mut mask_events = 0u64;

        for _ in 0..cfg.ppo.rollout_len {
            for e in 0..cfg.ppo.num_envs {
                let slot = &mut self.envs[e];
                let seg = &mut segs[e];
                let obs = slot.world.observe();
                let step = policy_step(
                    &mut tape,
                    &nodes,
                    &cfg.encoder,
                    &obs,
                    slot.prev_action.index(),
                    seg.v_global,
                    seg.hidden,
                )?;
                seg.hidden = step.hidden;
                let logits = tape.value(step.logits).data().to_vec();
                let (probs, logps) = softmax_probs_logps(&logits);
                // Warm-start drives half the environments with replayed
                // oracle plans (guaranteeing successes) and lets the policy
                // act in the rest, so imitation also covers the states the
                // policy reaches on its own. Every step gets labeled with
                // the oracle's choice for that state.
                let oracle_driven = imitate && e < (cfg.ppo.num_envs + 1) / 2;
                let (action, label) = if oracle_driven {
                    if slot.oracle_plan.is_empty() {
                        slot.oracle_plan = oracle_solve(&slot.world)?.into();
                    }
                    let a = slot
                        .oracle_plan
                        .pop_front()
                        .ok_or_else(|| Error::contract("oracle produced an empty plan"))?;
                    (a, Some(a))
                } else {
                    let a = Action::from_index(sample_index(&probs, &mut rng))?;
                    // The label is skipped on the rare states whose leftover
                    // step budget is too small for the oracle to finish in.
                    let label = if imitate {
                        oracle_solve(&slot.world).ok().and_then(|p| p.first().copied())
                    } else {
                        None
                    };
                    (a, label)
                };
                let action_index = action.index();
                let value_old = tape.value(step.value).scalar_value()?;
                let outcome = slot.world.step(action)?;
                self.frame += 1;
                slot.episode_reward += outcome.reward;

                // Tracking pairs the pre-action observation with the action
                // just taken. Terminal steps are skipped: the episode is
                // over before a mask could influence anything.
                let x_t = if slot.tracker.is_some() && !outcome.done {
                    let xe = encode_observation(&mut tape, &nodes, &cfg.encoder, &obs, action_index)?;
                    Some(tape.value(xe.x).data().to_vec())
                } else {
                    None
                };

                seg.steps.push(Transition {
                    obs: obs.clone(),
                    prev_action: slot.prev_action,
                    action,
                    oracle_action: label,
                    instr_phase: seg.phases.len() - 1,
                    episode_start: slot.episode_start,
                    logp_old: logps[action_index],
                    value_old,
                    reward: outcome.reward,
                    done: outcome.done,
                    advantage: 0.0,
                    ret: 0.0,
                });
                slot.episode_start = false;
                slot.pending_steps.push(EpisodeStep {
                    obs,
                    action,
                    reward: outcome.reward,
                    done: outcome.done,
                });
                slot.prev_action = action;

                if let (Some(x_t), Some(tr)) = (x_t, slot.tracker.as_mut()) {
                    if let Some(event) = tr.step(&x_t, self.frame, &mut rng)? {
                        mask_events += 1;
                        self.audit.push(MaskAudit {
                            frame: self.frame,
                            env: e,
                            mission_seed: slot.mission_seed,
                            episode_step: event.step,
                            subtask: event.subtask,
                            score: event.score,
                            running_mean: event.running_mean,
                            probability: event.probability,
                            draw: event.draw,
                        });
                        slot.masked_tokens = tr.masked_tokens().to_vec();
                        seg.phases.push(slot.masked_tokens.clone());
                        let enc =
                            encode_instruction(&mut tape, &nodes, &cfg.encoder, vocab, &slot.masked_tokens)?;
                        seg.v_global = enc.v_global;
                    }
                }

                if outcome.done {
                    self.episodes += 1;
                    episodes.push(Episode {
                        steps: std::mem::take(&mut slot.pending_steps),
                        instruction: slot.instruction.clone(),
                        success: slot.world.succeeded(),
                        total_reward: slot.episode_reward,
                        subtask_completion_steps: slot.world.completion_steps().to_vec(),
                    });
                    reset_slot(slot, cfg, &mut self.mission_counter)?;
                    ensure_tracker(slot, &mut tape, &nodes, &cfg.encoder, vocab, &cfg.tracker_cfg)?;
                    seg.phases.push(slot.masked_tokens.clone());
                    let enc =
                        encode_instruction(&mut tape, &nodes, &cfg.encoder, vocab, &slot.masked_tokens)?;
                    seg.v_global = enc.v_global;
                    seg.hidden = tape.constant(policy_initial_hidden(&cfg.encoder))?;
                }
            }
        }

        // Bootstrap values, GAE, and hand the per-env memory back to the
        // slots for the next segment.
        let mut buffer = RolloutBuffer {
            segments: Vec::with_capacity(segs.len()),
        };
        for (e, seg) in segs.into_iter().enumerate() {
            let slot = &mut self.envs[e];
            slot.hidden = tape.value(seg.hidden).clone();
            let obs = slot.world.observe();
            let step = policy_step(
                &mut tape,
                &nodes,
                &cfg.encoder,
                &obs,
                slot.prev_action.index(),
                seg.v_global,
                seg.hidden,
            )?;
            let bootstrap = tape.value(step.value).scalar_value()?;
            let rewards: Vec<Real> = seg.steps.iter().map(|t| t.reward).collect();
            let values: Vec<Real> = seg.steps.iter().map(|t| t.value_old).collect();
            let dones: Vec<bool> = seg.steps.iter().map(|t| t.done).collect();
            let (advantages, returns) =
                compute_gae(&rewards, &values, &dones, bootstrap, cfg.ppo.discount, cfg.ppo.gae_lambda)?;
            let mut steps = seg.steps;
            for (i, tr) in steps.iter_mut().enumerate() {
                tr.advantage = advantages[i];
                tr.ret = returns[i];
            }
            buffer.segments.push(EnvSegment {
                initial_hidden: seg.initial_hidden,
                phases: seg.phases,
                steps,
            });
        }
        Ok((buffer, episodes, mask_events))
    }

    /// Clipped-surrogate PPO over the buffer, minibatched by whole env
    /// segments across `ppo_epochs` passes. With `imitate` set the policy
    /// objective is behavior cloning of the buffered actions instead.
    pub fn ppo_update(&mut self, buffer: &mut RolloutBuffer, imitate: bool) -> Result<UpdateStats> {
        if buffer.is_empty() {
            return Err(Error::contract("ppo update on an empty rollout buffer"));
        }
        let ppo = self.cfg.ppo;
        if ppo.normalize_advantages && !imitate {
            let mut advantages: Vec<Real> = buffer
                .segments
                .iter()
                .flat_map(|s| s.steps.iter().map(|t| t.advantage))
                .collect();
            normalize_advantages(&mut advantages);
            let mut it = advantages.into_iter();
            for seg in &mut buffer.segments {
                for tr in &mut seg.steps {
                    tr.advantage = it.next().expect("advantage count matches transitions");
                }
            }
        }

        let shuffle_seed = stream_seed(self.cfg.seed, STREAM_SHUFFLE, self.update_counter);
        self.update_counter += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let seqs_per_minibatch = (ppo.batch_size + ppo.rollout_len - 1) / ppo.rollout_len;
        let seqs_per_minibatch = seqs_per_minibatch.max(1);

        let mut stats = UpdateStats::default();
        for _ in 0..ppo.ppo_epochs {
            let mut order: Vec<usize> = (0..buffer.segments.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(seqs_per_minibatch) {
                let segments: Vec<&EnvSegment> = chunk.iter().map(|&i| &buffer.segments[i]).collect();
                let (loss, grads) = ppo_minibatch(
                    &self.params,
                    &self.cfg.encoder,
                    &self.vocab,
                    &ppo,
                    &segments,
                    imitate,
                    self.frame,
                )?;
                self.adam_rl.step(&mut self.params, &grads, None)?;
                stats.policy_loss += loss.policy;
                stats.value_loss += loss.value;
                stats.entropy += loss.entropy;
                stats.total_loss += loss.total;
                stats.minibatches += 1;
            }
        }
        let n = stats.minibatches.max(1) as Real;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.entropy /= n;
        stats.total_loss /= n;
        Ok(stats)
    }

    /// One outer-loop step on the auxiliary alignment loss over the success
    /// buffer. Skipped (returning `None`) when the objective is disabled,
    /// weighted by zero, or fewer than two episodes are buffered.
    pub fn auxiliary_update(&mut self) -> Result<Option<Real>> {
        if !self.cfg.carel || self.cfg.carel_cfg.lambda_c == 0.0 || self.success.len() < 2 {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let nodes = AgentNodes::insert(&mut tape, &self.params)?;
        let enc = &self.cfg.encoder;
        let mut pairs = Vec::with_capacity(self.success.len());
        for ep in self.success.episodes() {
            let instr = encode_instruction(&mut tape, &nodes, enc, &self.vocab, &ep.instruction.tokens)?;
            let mut rows = Vec::with_capacity(ep.steps.len());
            for step in &ep.steps {
                let oe = encode_observation(&mut tape, &nodes, enc, &step.obs, step.action.index())?;
                rows.push(oe.x);
            }
            let x = tape.stack_rows(&rows)?;
            let x_global = aggregate_global(&mut tape, &nodes, enc, x)?;
            pairs.push(LocalGlobalReps {
                x,
                v: instr.v,
                x_global,
                v_global: instr.v_global,
            });
        }
        let aux = contrastive_loss(&mut tape, &pairs, self.cfg.carel_cfg.tau)?;
        let aux_value = tape.value(aux).scalar_value()?;
        if !aux_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "auxiliary loss diverged at frame {}: {aux_value}",
                self.frame
            )));
        }
        let objective = tape.scale(aux, self.cfg.carel_cfg.lambda_c)?;
        let grads = tape.backward(objective)?;
        let grad_vec: Vec<Option<Tensor>> = nodes
            .named()
            .iter()
            .map(|(_, node)| grads.grad(*node).cloned())
            .collect();
        let allow: HashSet<String> = self.params.aux_relevant_names(enc).into_iter().collect();
        self.adam_aux.step(&mut self.params, &grad_vec, Some(&allow))?;
        Ok(Some(aux_value))
    }

    /// One full collect → update → filter → auxiliary cycle. The first
    /// `warmstart_frames` of the budget run as oracle imitation; every later
    /// phase is ordinary PPO.
    pub fn train_phase(&mut self) -> Result<PhaseStats> {
        let imitate = self.frame < self.cfg.warmstart_frames;
        let (mut buffer, episodes, mask_events) = self.collect_rollouts(imitate)?;
        let frames = buffer.len() as u64;
        let episodes_finished = episodes.len() as u64;
        let update = self.ppo_update(&mut buffer, imitate)?;
        let accepted = filter_successful(episodes, self.cfg.carel_cfg.success_fraction, MAX_REWARD);
        let episodes_accepted = accepted.len() as u64;
        for ep in accepted {
            self.success.push(ep)?;
        }
        let aux_loss = self.auxiliary_update()?;
        Ok(PhaseStats {
            frames,
            episodes_finished,
            episodes_accepted,
            update,
            aux_loss,
            mask_events,
        })
    }

    /// Greedy-policy success rate over freshly generated missions of the
    /// requested split. Never updates parameters.
    pub fn evaluate(&mut self, split: Split, episodes: usize) -> Result<Real> {
        if episodes == 0 {
            return Err(Error::parameter("evaluation needs at least 1 episode"));
        }
        let mut successes = 0usize;
        for _ in 0..episodes {
            let mission_seed = stream_seed(self.cfg.seed, STREAM_EVAL_MISSION, self.eval_counter);
            let rng_seed = stream_seed(self.cfg.seed, STREAM_EVAL_RNG, self.eval_counter);
            self.eval_counter += 1;
            let (mut world, _spec, instruction) =
                generate(self.cfg.level, mission_seed, split, &self.cfg.gen)?;
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let (episode, _) = run_policy_episode(
                &self.params,
                &self.cfg.encoder,
                &self.vocab,
                Some(&self.cfg.tracker_cfg),
                &mut world,
                &instruction,
                ActionSelection::Greedy,
                self.frame,
                &mut rng,
            )?;
            if episode.success {
                successes += 1;
            }
        }
        Ok(successes as Real / episodes as Real)
    }

    fn make_record(&mut self, window: &WindowAccum, run_start: Option<Instant>) -> Result<MetricsRecord> {
        let sr_train = self.evaluate(Split::Train, self.cfg.eval_episodes)?;
        let sr_holdout = self.evaluate(Split::Holdout, self.cfg.eval_episodes)?;
        let fps = window.started.map(|t| {
            let secs = t.elapsed().as_secs_f64().max(1e-9);
            (self.frame - window.start_frame) as Real / secs
        });
        let wall_seconds = run_start.map(|t| t.elapsed().as_secs_f64());
        Ok(MetricsRecord {
            frame: self.frame,
            episodes: self.episodes,
            sr_train,
            sr_holdout,
            rl_loss: window.rl_mean(),
            aux_loss: window.aux_mean(),
            mask_events: window.mask_events,
            fps,
            wall_seconds,
        })
    }

    /// Drive training to the frame budget, emitting one metrics record per
    /// evaluation window (and a final one for any partial window). The
    /// callback sees each record as it is produced, e.g. to append to a CSV
    /// or write a checkpoint.
    pub fn run<F>(&mut self, mut on_window: F) -> Result<Vec<MetricsRecord>>
    where
        F: FnMut(&MetricsRecord, &Trainer) -> Result<()>,
    {
        let run_start = self.cfg.timing.then(Instant::now);
        let mut records = Vec::new();
        let mut window = WindowAccum::start(self.frame, self.cfg.timing);
        let mut last_emitted = None;
        while self.frame < self.cfg.total_frames {
            let stats = self.train_phase()?;
            window.absorb(&stats);
            if self.frame >= self.next_eval {
                let record = self.make_record(&window, run_start)?;
                on_window(&record, self)?;
                last_emitted = Some(record.frame);
                records.push(record);
                self.next_eval = (self.frame / self.cfg.eval_interval + 1) * self.cfg.eval_interval;
                window = WindowAccum::start(self.frame, self.cfg.timing);
            }
        }
        if last_emitted != Some(self.frame) {
            let record = self.make_record(&window, run_start)?;
            on_window(&record, self)?;
            records.push(record);
        }
        Ok(records)
    }
}

/// Convenience driver: build a trainer and run it to the frame budget.
pub fn train<F>(cfg: &TrainConfig, on_window: F) -> Result<(Trainer, Vec<MetricsRecord>)>
where
    F: FnMut(&MetricsRecord, &Trainer) -> Result<()>,
{
    let mut trainer = Trainer::new(cfg.clone())?;
    let records = trainer.run(on_window)?;
    Ok((trainer, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{oracle_solve, MASK_ID};
    use crate::ndgrad::central_difference_grad;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 4,
            repr_dim: 6,
            gru_hidden: 5,
            obs_hidden: 8,
            policy_hidden: 7,
            view_size: 5,
            ..EncoderConfig::default()
        }
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            level: Level::GoToObj,
            seed,
            total_frames: 48,
            eval_interval: 24,
            eval_episodes: 2,
            warmstart_frames: 0,
            carel: true,
            gen: GenParams {
                room_size: 4,
                view_size: 5,
                distractors: 1,
                ..GenParams::default()
            },
            ppo: PpoConfig {
                num_envs: 2,
                rollout_len: 6,
                ppo_epochs: 2,
                ..PpoConfig::default()
            },
            carel_cfg: CarelConfig::default(),
            tracker_cfg: TrackerConfig {
                enabled: false,
                ..TrackerConfig::default()
            },
            encoder: tiny_encoder(),
            timing: false,
        }
    }

    /// A short successful episode produced by the scripted solver.
    fn oracle_episode(seed: u64) -> Episode {
        let gen = GenParams {
            room_size: 4,
            view_size: 5,
            distractors: 1,
            ..GenParams::default()
        };
        let (mut world, _spec, instruction) =
            generate(Level::GoToObj, seed, Split::Train, &gen).unwrap();
        let plan = oracle_solve(&world).unwrap();
        let mut steps = Vec::new();
        let mut total_reward = 0.0;
        for action in plan {
            let obs = world.observe();
            let outcome = world.step(action).unwrap();
            total_reward += outcome.reward;
            steps.push(EpisodeStep {
                obs,
                action,
                reward: outcome.reward,
                done: outcome.done,
            });
        }
        assert!(world.succeeded());
        Episode {
            steps,
            instruction,
            success: true,
            total_reward,
            subtask_completion_steps: world.completion_steps().to_vec(),
        }
    }

    #[test]
    fn gae_single_step_anchor() {
        let (adv, ret) = compute_gae(&[1.0], &[0.0], &[true], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn gae_zero_inputs_give_zero_outputs() {
        let (adv, ret) =
            compute_gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.0, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|a| *a == 0.0));
        assert!(ret.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn gae_lambda_zero_is_the_one_step_td_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let n = rng.gen_range(1..20);
            let rewards: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
            let bootstrap = rng.gen_range(-1.0..1.0);
            let gamma = rng.gen_range(0.1..1.0);
            let (adv, _) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, 0.0).unwrap();
            for t in 0..n {
                let live = if dones[t] { 0.0 } else { 1.0 };
                let next = if t + 1 == n { bootstrap } else { values[t + 1] };
                let td = rewards[t] + gamma * next * live - values[t];
                assert!((adv[t] - td).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn advantage_normalization_standardizes() {
        let mut advs: Vec<Real> = (0..50).map(|i| i as Real * 0.3 - 4.0).collect();
        normalize_advantages(&mut advs);
        let n = advs.len() as Real;
        let mean = advs.iter().sum::<Real>() / n;
        let var = advs.iter().map(|a| a * a).sum::<Real>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_hand_computed_scalar_steps() {
        let cfg = tiny_encoder();
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = AgentParams::init(&cfg, vocab.len(), &mut rng).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &params);

        let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        let slot = names.iter().position(|n| n == "critic.b").unwrap();
        let start = params.named()[slot].1.data()[0];

        // Two steps with gradients 1.0 then -0.5, replicated by hand.
        let mut expect = start;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 1.0), (2, -0.5)] {
            let mut grads: Vec<Option<Tensor>> = vec![None; names.len()];
            grads[slot] = Some(Tensor::scalar(g));
            adam.step(&mut params, &grads, None).unwrap();

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expect -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            let got = params.named()[slot].1.data()[0];
            assert!((got - expect).abs() < 1e-15);
        }
        assert_eq!(adam.steps_taken(), 2);
    }

    #[test]
    fn adam_allow_set_restricts_updates() {
        let cfg = tiny_encoder();
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = AgentParams::init(&cfg, vocab.len(), &mut rng).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &params);

        let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        let grads: Vec<Option<Tensor>> = params
            .named()
            .iter()
            .map(|(_, t)| Some(Tensor::full(t.shape().to_vec(), 1.0)))
            .collect();
        let allow: HashSet<String> = ["token_embed".to_string()].into_iter().collect();
        adam.step(&mut params, &grads, Some(&allow)).unwrap();

        for (i, name) in names.iter().enumerate() {
            let changed = params.named()[i].1 != before.named()[i].1;
            assert_eq!(changed, name == "token_embed", "{name}");
        }
    }

    #[test]
    fn surrogate_with_huge_clip_is_the_vanilla_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let logp_old: Real = rng.gen_range(-3.0..0.0);
            let logp_new: Real = rng.gen_range(-3.0..0.0);
            let adv: Real = rng.gen_range(-2.0..2.0);

            let mut tape = Tape::new();
            let lp = tape.param(Tensor::scalar(logp_new)).unwrap();
            let term = clipped_surrogate(&mut tape, lp, logp_old, adv, 1e9).unwrap();
            let got = tape.value(term).scalar_value().unwrap();
            let vanilla = (logp_new - logp_old).exp() * adv;
            assert!((got - vanilla).abs() <= 1e-10 * vanilla.abs().max(1.0));

            // Gradient also matches the unclipped expression d/dlogp r·A = r·A.
            let grads = tape.backward(term).unwrap();
            let g = grads.grad(lp).unwrap().scalar_value().unwrap();
            assert!((g - vanilla).abs() <= 1e-10 * vanilla.abs().max(1.0));

            // And against finite differences for good measure.
            let fd = central_difference_grad(
                &mut |t: &Tensor| {
                    let mut tape = Tape::new();
                    let lp = tape.param(t.clone())?;
                    let term = clipped_surrogate(&mut tape, lp, logp_old, adv, 1e9)?;
                    tape.value(term).scalar_value()
                },
                &Tensor::scalar(logp_new),
                1e-5,
            )
            .unwrap();
            let rel = (g - fd.data()[0]).abs() / g.abs().max(fd.data()[0].abs()).max(1e-6);
            assert!(rel < 1e-4);
        }
    }

    #[test]
    fn surrogate_clip_freezes_the_gradient_outside_the_trust_region() {
        // ratio = e^1 ≈ 2.72 with ε = 0.2 and positive advantage: the
        // clipped branch is selected and the gradient vanishes.
        let mut tape = Tape::new();
        let lp = tape.param(Tensor::scalar(1.0)).unwrap();
        let term = clipped_surrogate(&mut tape, lp, 0.0, 1.5, 0.2).unwrap();
        assert!((tape.value(term).scalar_value().unwrap() - 1.2 * 1.5).abs() < 1e-12);
        let grads = tape.backward(term).unwrap();
        let g = grads.grad(lp).map(|t| t.scalar_value().unwrap()).unwrap_or(0.0);
        assert_eq!(g, 0.0);

        // Negative advantage with a shrunken ratio clips at 1 − ε.
        let mut tape = Tape::new();
        let lp = tape.param(Tensor::scalar(-1.0)).unwrap();
        let term = clipped_surrogate(&mut tape, lp, 0.0, -2.0, 0.2).unwrap();
        assert!((tape.value(term).scalar_value().unwrap() - 0.8 * -2.0).abs() < 1e-12);
        let grads = tape.backward(term).unwrap();
        let g = grads.grad(lp).map(|t| t.scalar_value().unwrap()).unwrap_or(0.0);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn success_filter_boundaries() {
        let mut ep = oracle_episode(0);
        ep.total_reward = 0.6;
        assert_eq!(filter_successful(vec![ep.clone()], 0.5, 1.0).len(), 1);
        ep.total_reward = 0.49;
        assert!(filter_successful(vec![ep.clone()], 0.5, 1.0).is_empty());
        ep.total_reward = 0.0;
        assert!(filter_successful(vec![ep], 0.5, 1.0).is_empty());
    }

    #[test]
    fn success_buffer_is_a_bounded_fifo_of_accepted_episodes() {
        let mut buffer = SuccessBuffer::new(3, 0.5, 1.0).unwrap();
        for i in 0..5 {
            let mut ep = oracle_episode(i);
            ep.total_reward = 0.5 + 0.1 * i as Real;
            buffer.push(ep).unwrap();
        }
        assert_eq!(buffer.len(), 3);
        let rewards: Vec<Real> = buffer.episodes().map(|e| e.total_reward).collect();
        assert_eq!(rewards, vec![0.7, 0.8, 0.9]);
        assert!(buffer.episodes().all(|e| e.total_reward >= 0.5));

        let mut low = oracle_episode(9);
        low.total_reward = 0.2;
        assert!(matches!(buffer.push(low), Err(Error::Contract(_))));
    }

    #[test]
    fn rollout_collection_is_deterministic() {
        let cfg = tiny_cfg(11);
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let mut b = Trainer::new(cfg).unwrap();
        let (buf_a, eps_a, _) = a.collect_rollouts(false).unwrap();
        let (buf_b, eps_b, _) = b.collect_rollouts(false).unwrap();
        assert_eq!(buf_a, buf_b);
        assert_eq!(eps_a, eps_b);
        assert_eq!(a.frame(), b.frame());
    }

    #[test]
    fn rollout_bookkeeping_counts_transitions_and_frames() {
        let cfg = tiny_cfg(3);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        for phase in 1..=3u64 {
            let (buffer, _, _) = t.collect_rollouts(false).unwrap();
            let expected = cfg.ppo.num_envs * cfg.ppo.rollout_len;
            assert_eq!(buffer.len(), expected);
            assert_eq!(buffer.segments.len(), cfg.ppo.num_envs);
            assert_eq!(t.frame(), phase * expected as u64);
        }
    }

    #[test]
    fn random_policy_reaches_some_goals_within_the_smoke_budget() {
        let mut cfg = tiny_cfg(0);
        cfg.ppo.num_envs = 4;
        cfg.ppo.rollout_len = 16;
        let mut t = Trainer::new(cfg).unwrap();
        let mut found = false;
        while t.frame() < 50_000 {
            let (_, episodes, _) = t.collect_rollouts(false).unwrap();
            if episodes.iter().any(|e| e.success) {
                found = true;
                break;
            }
        }
        assert!(found, "no success within 50k frames of random play");
    }

    #[test]
    fn warmstart_diag() {
        let mut cfg = tiny_cfg(13);
        cfg.carel = false;
        cfg.total_frames = u64::MAX;
        cfg.warmstart_frames = 24_000;
        cfg.ppo.num_envs = 4;
        cfg.ppo.rollout_len = 32;
        cfg.ppo.ppo_epochs = 4;
        let mut t = Trainer::new(cfg).unwrap();
        let mut phase = 0;
        while t.frame() < 24_000 {
            let stats = t.train_phase().unwrap();
            phase += 1;
            if phase % 15 == 0 {
                let sr = t.evaluate(Split::Train, 10).unwrap();
                println!(
                    "phase {phase} frame {} ce {:.4} value {:.4} entropy {:.4} eval {sr}",
                    t.frame(),
                    stats.update.policy_loss,
                    stats.update.value_loss,
                    stats.update.entropy
                );
            }
        }
    }

    #[test]
    fn warmstart_collection_follows_the_oracle() {
        let cfg = tiny_cfg(21);
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let mut b = Trainer::new(cfg).unwrap();
        let (buf_a, eps_a, _) = a.collect_rollouts(true).unwrap();
        let (buf_b, _, _) = b.collect_rollouts(true).unwrap();
        // Deterministic, and every finished episode is an oracle success.
        assert_eq!(buf_a, buf_b);
        assert!(!eps_a.is_empty(), "oracle episodes finish fast");
        assert!(eps_a.iter().all(|e| e.success));
    }

    #[test]
    fn warmstart_imitation_lifts_greedy_success() {
        let mut cfg = tiny_cfg(13);
        cfg.carel = false;
        cfg.total_frames = u64::MAX;
        cfg.warmstart_frames = 4_000;
        cfg.ppo.num_envs = 4;
        cfg.ppo.rollout_len = 32;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.evaluate(Split::Train, 20).unwrap();
        while t.frame() < 4_000 {
            t.train_phase().unwrap();
        }
        let after = t.evaluate(Split::Train, 20).unwrap();
        assert!(
            after >= 0.5 && after > before,
            "greedy success rate {before} -> {after} after imitation"
        );
    }

    #[test]
    fn first_update_with_unchanged_policy_gives_ratio_one_loss() {
        let mut cfg = tiny_cfg(5);
        cfg.ppo.ppo_epochs = 1;
        cfg.ppo.normalize_advantages = false;
        cfg.ppo.entropy_coef = 0.0;
        cfg.ppo.value_coef = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let (mut buffer, _, _) = t.collect_rollouts(false).unwrap();
        let mean_adv: Real = buffer
            .segments
            .iter()
            .flat_map(|s| s.steps.iter().map(|tr| tr.advantage))
            .sum::<Real>()
            / buffer.len() as Real;
        let stats = t.ppo_update(&mut buffer, false).unwrap();
        assert_eq!(stats.minibatches, 1);
        assert!(
            (stats.policy_loss - -mean_adv).abs() < 1e-10,
            "policy loss {} vs -mean advantage {}",
            stats.policy_loss,
            -mean_adv
        );
        assert!((stats.total_loss - stats.policy_loss).abs() < 1e-12);
    }

    #[test]
    fn repeated_updates_keep_parameters_finite() {
        let mut cfg = tiny_cfg(6);
        cfg.total_frames = u64::MAX;
        let mut t = Trainer::new(cfg).unwrap();
        let mut minibatches = 0;
        for _ in 0..50 {
            let stats = t.train_phase().unwrap();
            minibatches += stats.update.minibatches;
            assert!(stats.update.total_loss.is_finite());
            assert!(stats.update.entropy >= -1e-9 && stats.update.entropy <= (7f64).ln() + 1e-9);
        }
        assert!(minibatches >= 100);
        for (name, tensor) in t.params().named() {
            assert!(tensor.all_finite(), "{name} went non-finite");
        }
    }

    #[test]
    fn auxiliary_update_skips_below_two_episodes_and_at_zero_weight() {
        let mut t = Trainer::new(tiny_cfg(7)).unwrap();
        assert_eq!(t.auxiliary_update().unwrap(), None);
        t.success.push(oracle_episode(1)).unwrap();
        assert_eq!(t.auxiliary_update().unwrap(), None);

        let mut cfg = tiny_cfg(7);
        cfg.carel_cfg.lambda_c = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        t.success.push(oracle_episode(1)).unwrap();
        t.success.push(oracle_episode(2)).unwrap();
        let before = t.params.clone();
        assert_eq!(t.auxiliary_update().unwrap(), None);
        assert_eq!(t.params, before);
    }

    #[test]
    fn duplicated_identical_pairs_give_the_uniform_contrastive_loss() {
        let mut t = Trainer::new(tiny_cfg(8)).unwrap();
        let ep = oracle_episode(3);
        t.success.push(ep.clone()).unwrap();
        t.success.push(ep).unwrap();
        let aux = t.auxiliary_update().unwrap().unwrap();
        assert!(
            (aux - 2.0 * (2.0f64).ln()).abs() < 1e-12,
            "aux {aux} vs 2 ln 2"
        );
    }

    #[test]
    fn auxiliary_step_leaves_policy_head_parameters_untouched() {
        let mut t = Trainer::new(tiny_cfg(9)).unwrap();
        t.success.push(oracle_episode(4)).unwrap();
        t.success.push(oracle_episode(5)).unwrap();
        let before = t.params.clone();
        t.auxiliary_update().unwrap().unwrap();

        let names: Vec<String> = before.named().iter().map(|(n, _)| n.clone()).collect();
        let mut any_encoder_change = false;
        for (i, name) in names.iter().enumerate() {
            let changed = t.params.named()[i].1 != before.named()[i].1;
            if name.starts_with("policy_gru") || name.starts_with("actor") || name.starts_with("critic")
            {
                assert!(!changed, "{name} must not move in the auxiliary step");
            } else if changed {
                any_encoder_change = true;
            }
        }
        assert!(any_encoder_change);
    }

    #[test]
    fn zero_weight_run_is_bitwise_identical_to_disabled_run() {
        let mut zero = tiny_cfg(10);
        zero.carel = true;
        zero.carel_cfg.lambda_c = 0.0;
        let mut off = tiny_cfg(10);
        off.carel = false;
        let mut a = Trainer::new(zero).unwrap();
        let mut b = Trainer::new(off).unwrap();
        for _ in 0..3 {
            let sa = a.train_phase().unwrap();
            let sb = b.train_phase().unwrap();
            assert_eq!(sa.aux_loss, None);
            assert_eq!(sb.aux_loss, None);
            assert_eq!(sa.update, sb.update);
        }
        assert_eq!(a.params, b.params);
        assert_eq!(a.frame(), b.frame());
        assert_eq!(a.episodes_finished(), b.episodes_finished());
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let cfg = tiny_cfg(12);
        let mut a = Trainer::new(cfg).unwrap();
        for _ in 0..2 {
            a.train_phase().unwrap();
        }
        let ck = a.checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let restored: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(restored, ck);
        let mut b = Trainer::restore(restored).unwrap();

        for _ in 0..2 {
            a.train_phase().unwrap();
            b.train_phase().unwrap();
        }
        assert_eq!(a.checkpoint(), b.checkpoint());
        let sr_a = a.evaluate(Split::Holdout, 3).unwrap();
        let sr_b = b.evaluate(Split::Holdout, 3).unwrap();
        assert_eq!(sr_a, sr_b);
    }

    #[test]
    fn restore_rejects_a_version_mismatch() {
        let t = Trainer::new(tiny_cfg(13)).unwrap();
        let mut ck = t.checkpoint();
        ck.version += 1;
        assert!(matches!(Trainer::restore(ck), Err(Error::Version(_))));
    }

    #[test]
    fn run_emits_strictly_increasing_windows_with_valid_rates() {
        let mut cfg = tiny_cfg(14);
        cfg.total_frames = 36;
        cfg.eval_interval = 12;
        let (_t, records) = train(&cfg, |_, _| Ok(())).unwrap();
        assert_eq!(records.len(), 3);
        let mut prev = 0;
        for r in &records {
            assert!(r.frame > prev);
            prev = r.frame;
            assert!((0.0..=1.0).contains(&r.sr_train));
            assert!((0.0..=1.0).contains(&r.sr_holdout));
            assert!(r.rl_loss.is_finite());
            assert_eq!(r.fps, None);
            assert_eq!(r.wall_seconds, None);
        }
    }

    #[test]
    fn tracking_during_training_masks_without_corrupting_episodes() {
        let mut cfg = tiny_cfg(15);
        cfg.level = Level::GoToSeq;
        cfg.total_frames = u64::MAX;
        cfg.tracker_cfg = TrackerConfig {
            enabled: true,
            k: 1.01,
            warmup_steps: 1,
            max_frames: 1,
            positive_mean_guard: false,
            ..TrackerConfig::default()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let mut events = 0;
        let mut episodes = Vec::new();
        for _ in 0..12 {
            let (_, eps, masks) = t.collect_rollouts(false).unwrap();
            events += masks;
            episodes.extend(eps);
        }
        assert!(events > 0, "no mask events under a hair-trigger tracker");
        assert_eq!(t.drain_mask_audit().len() as u64, events);
        // Stored episodes always carry the original instruction.
        for ep in &episodes {
            assert!(ep.instruction.tokens.iter().all(|&t| t != MASK_ID));
        }
        // The policy-facing instruction keeps its length under masking.
        for slot in &t.envs {
            assert_eq!(slot.masked_tokens.len(), slot.instruction.tokens.len());
        }
    }
}
