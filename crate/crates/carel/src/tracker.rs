//! Instruction tracking: conjunction-based subtask splitting, per-step
//! alignment scores against the partial episode, spike detection, and
//! probabilistic masking of completed subtasks.
//!
//! Subtasks form a sequential chain; at every step exactly the earliest
//! unmasked subtask is *acceptable* and is the only one scored. A subtask's
//! score at step t is the mean similarity of its tokens against the partial
//! episode — either via the episode–word scores (V·x̃ over the span) or the
//! observation–word scores (per-token max over observations, then the span
//! mean). A spike is declared when the new score reaches `k` times the
//! running mean of the subtask's score history (after a warmup, and only
//! while the running mean is positive unless the guard is disabled); the
//! spiked subtask is then masked with probability tanh(frame / max_frames),
//! replacing its tokens and the conjunction that follows it with `<mask>`.
//!
//! Masking a subtask and its *following* conjunction reproduces the worked
//! masking example: completing the first clause of "go to the red box and
//! go to a green ball, then go to the blue key" masks five clause tokens
//! plus "and" — six `<mask>` tokens.

use rand::Rng;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gridworld::{word_id, MASK_ID};
use crate::{Real, Tensor};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which similarity family drives subtask scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    EpisodeWord,
    ObservationWord,
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<ScoreSource> {
        match s.to_lowercase().replace('-', "").as_str() {
            "ew" | "episodeword" => Ok(ScoreSource::EpisodeWord),
            "ow" | "observationword" => Ok(ScoreSource::ObservationWord),
            other => Err(Error::parameter(format!(
                "unknown score source {other:?} (expected ew or ow)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub enabled: bool,
    /// Spike factor: trigger when new_score ≥ k · running_mean.
    pub k: Real,
    /// Minimum score-history length before spikes can trigger.
    pub warmup_steps: usize,
    /// Horizon of the tanh masking schedule (training frames).
    pub max_frames: u64,
    pub score_source: ScoreSource,
    /// Require a positive running mean before the spike rule applies; the
    /// literal rule misfires on negative means, but the flag allows testing
    /// it as written.
    pub positive_mean_guard: bool,
    /// Renormalize the running-mean episode global (mirrors the encoder's
    /// representation normalization).
    pub normalize_global: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            enabled: true,
            k: 2.0,
            warmup_steps: 3,
            max_frames: 1_000_000,
            score_source: ScoreSource::EpisodeWord,
            positive_mean_guard: true,
            normalize_global: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 1.0) {
            return Err(Error::parameter(format!("spike factor k {} must be > 1", self.k)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::parameter("warmup_steps must be ≥ 1"));
        }
        if self.max_frames == 0 {
            return Err(Error::parameter("max_frames must be ≥ 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Subtask state and the pure rules
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubtaskStatus {
    Pending,
    Acceptable,
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskState {
    /// Token range of the subtask's content.
    pub span: (usize, usize),
    /// The conjunction span following this subtask, masked together with it.
    pub conjunction: Option<(usize, usize)>,
    pub status: SubtaskStatus,
    pub score_history: Vec<Real>,
    /// Arithmetic mean of `score_history`, maintained incrementally.
    pub running_mean: Real,
    /// Step at which this subtask was masked.
    pub completed_at: Option<usize>,
}

impl SubtaskState {
    fn new(span: (usize, usize), conjunction: Option<(usize, usize)>) -> SubtaskState {
        SubtaskState {
            span,
            conjunction,
            status: SubtaskStatus::Pending,
            score_history: Vec::new(),
            running_mean: 0.0,
            completed_at: None,
        }
    }

    fn push_score(&mut self, score: Real) {
        self.score_history.push(score);
        let n = self.score_history.len() as Real;
        self.running_mean += (score - self.running_mean) / n;
    }
}

/// Split instruction tokens on the conjunctions "and", "then", and
/// ", then". Each subtask keeps the conjunction span that links it to its
/// successor for joint masking.
pub fn split_instruction(tokens: &[usize]) -> Result<Vec<SubtaskState>> {
    let and_id = word_id("and").unwrap();
    let then_id = word_id("then").unwrap();
    let comma_id = word_id(",").unwrap();

    let mut conjunctions: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == and_id {
            conjunctions.push((i, i + 1));
            i += 1;
        } else if tokens[i] == comma_id && tokens.get(i + 1) == Some(&then_id) {
            conjunctions.push((i, i + 2));
            i += 2;
        } else if tokens[i] == then_id {
            conjunctions.push((i, i + 1));
            i += 1;
        } else {
            i += 1;
        }
    }

    let mut spans = Vec::new();
    let mut start = 0;
    for &(cs, ce) in &conjunctions {
        if cs == start {
            return Err(Error::parameter(
                "instruction has a conjunction with no content before it",
            ));
        }
        spans.push((start, cs));
        start = ce;
    }
    if start >= tokens.len() {
        return Err(Error::parameter(
            "instruction has no content after its last conjunction",
        ));
    }
    spans.push((start, tokens.len()));

    let mut out: Vec<SubtaskState> = spans
        .iter()
        .enumerate()
        .map(|(i, &span)| SubtaskState::new(span, conjunctions.get(i).copied()))
        .collect();
    out[0].status = SubtaskStatus::Acceptable;
    Ok(out)
}

/// Mean episode–word score over a token span.
pub fn span_score_ew(s_ew: &[Real], span: (usize, usize)) -> Result<Real> {
    if span.0 >= span.1 || span.1 > s_ew.len() {
        return Err(Error::dimension(format!(
            "span {span:?} outside scores of length {}",
            s_ew.len()
        )));
    }
    let slice = &s_ew[span.0..span.1];
    Ok(slice.iter().sum::<Real>() / slice.len() as Real)
}

/// Observation–word span score: per token, the maximum similarity over all
/// observations so far; then the mean over the span.
pub fn span_score_ow(s_ow: &Tensor, span: (usize, usize)) -> Result<Real> {
    if !s_ow.is_matrix() || s_ow.rows() == 0 {
        return Err(Error::dimension(format!(
            "observation–word scores must be a non-empty t×m matrix, got {:?}",
            s_ow.shape()
        )));
    }
    let m = s_ow.cols();
    if span.0 >= span.1 || span.1 > m {
        return Err(Error::dimension(format!(
            "span {span:?} outside instruction of {m} tokens"
        )));
    }
    let mut total = 0.0;
    for j in span.0..span.1 {
        let mut best = Real::NEG_INFINITY;
        for i in 0..s_ow.rows() {
            best = best.max(s_ow.row(i)[j]);
        }
        total += best;
    }
    Ok(total / (span.1 - span.0) as Real)
}

/// The spike rule: after warmup, a positive running mean (unless the guard
/// is disabled), and new_score ≥ k · running_mean.
pub fn spike_triggered(
    history_len: usize,
    running_mean: Real,
    new_score: Real,
    k: Real,
    warmup_steps: usize,
    positive_mean_guard: bool,
) -> bool {
    history_len >= warmup_steps
        && (!positive_mean_guard || running_mean > 0.0)
        && new_score >= k * running_mean
}

/// Masking probability schedule: tanh(current_frame / max_frames).
pub fn masking_probability(current_frame: u64, max_frames: u64) -> Real {
    (current_frame as Real / max_frames as Real).tanh()
}

/// Replace the subtask's tokens and its attached conjunction with `<mask>`.
pub fn apply_mask(tokens: &mut [usize], subtask: &SubtaskState) -> Result<()> {
    let mut ranges = vec![subtask.span];
    ranges.extend(subtask.conjunction);
    for (s, e) in ranges {
        if e > tokens.len() {
            return Err(Error::dimension(format!(
                "mask span ({s}, {e}) outside instruction of {} tokens",
                tokens.len()
            )));
        }
        for t in &mut tokens[s..e] {
            if *t == MASK_ID {
                return Err(Error::contract(format!(
                    "token range ({s}, {e}) is already masked"
                )));
            }
            *t = MASK_ID;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Episode-scoped tracker
// ---------------------------------------------------------------------------

/// A mask event, reported for the audit stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEvent {
    pub step: usize,
    pub subtask: usize,
    pub score: Real,
    pub running_mean: Real,
    pub probability: Real,
    pub draw: Real,
}

/// Per-episode tracking state. Holds the original instruction's token
/// representations (fixed for the episode) and incrementally maintained
/// episode-side statistics, so each step costs O(m·d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracker {
    cfg: TrackerConfig,
    /// Local token representations of the ORIGINAL instruction, m×d.
    v: Tensor,
    masked_tokens: Vec<usize>,
    subtasks: Vec<SubtaskState>,
    /// Running sum of episode-local representations (for x̃).
    x_sum: Vec<Real>,
    /// Per-token max of x_tᵀv_j over observations so far.
    col_max: Vec<Real>,
    step: usize,
}

impl Tracker {
    /// `v` are the original instruction's token representations (one row
    /// per token, matching `tokens`).
    pub fn new(cfg: TrackerConfig, tokens: &[usize], v: Tensor) -> Result<Tracker> {
        cfg.validate()?;
        if !v.is_matrix() || v.rows() != tokens.len() {
            return Err(Error::dimension(format!(
                "token representations {:?} do not match {} instruction tokens",
                v.shape(),
                tokens.len()
            )));
        }
        let subtasks = split_instruction(tokens)?;
        let d = v.cols();
        let m = v.rows();
        Ok(Tracker {
            cfg,
            v,
            masked_tokens: tokens.to_vec(),
            subtasks,
            x_sum: vec![0.0; d],
            // Real::MIN rather than −∞ so a fresh tracker stays serializable.
            col_max: vec![Real::MIN; m],
            step: 0,
        })
    }

    /// The instruction the policy should condition on.
    pub fn masked_tokens(&self) -> &[usize] {
        &self.masked_tokens
    }

    pub fn subtasks(&self) -> &[SubtaskState] {
        &self.subtasks
    }

    /// Index of the earliest unmasked subtask, if any.
    pub fn acceptable_index(&self) -> Option<usize> {
        self.subtasks
            .iter()
            .position(|s| s.status == SubtaskStatus::Acceptable)
    }

    pub fn steps_seen(&self) -> usize {
        self.step
    }

    /// Current score of a subtask against the partial episode.
    pub fn score_for(&self, idx: usize) -> Result<Real> {
        let sub = self
            .subtasks
            .get(idx)
            .ok_or_else(|| Error::parameter(format!("subtask index {idx} out of range")))?;
        if sub.status == SubtaskStatus::Masked {
            return Err(Error::contract(format!(
                "score queried for already-masked subtask {idx}"
            )));
        }
        if self.step == 0 {
            return Err(Error::contract("score queried before any episode step"));
        }
        match self.cfg.score_source {
            ScoreSource::EpisodeWord => {
                let mut x_global: Vec<Real> =
                    self.x_sum.iter().map(|s| s / self.step as Real).collect();
                if self.cfg.normalize_global {
                    let n = x_global.iter().map(|v| v * v).sum::<Real>().sqrt();
                    if n > 0.0 {
                        for v in &mut x_global {
                            *v /= n;
                        }
                    }
                }
                let s_ew: Vec<Real> = (0..self.v.rows())
                    .map(|j| {
                        self.v
                            .row(j)
                            .iter()
                            .zip(&x_global)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                span_score_ew(&s_ew, sub.span)
            }
            ScoreSource::ObservationWord => {
                let slice = &self.col_max[sub.span.0..sub.span.1];
                Ok(slice.iter().sum::<Real>() / slice.len() as Real)
            }
        }
    }

    /// Advance one environment step with the step's episode-local
    /// representation x_t. Scores the acceptable subtask, runs the spike
    /// rule, and masks with probability tanh(frame / max_frames) on a
    /// trigger. Returns a mask event when one fires.
    pub fn step(
        &mut self,
        x_t: &[Real],
        current_frame: u64,
        rng: &mut impl Rng,
    ) -> Result<Option<MaskEvent>> {
        if !self.cfg.enabled {
            return Ok(None);
        }
        if x_t.len() != self.x_sum.len() {
            return Err(Error::dimension(format!(
                "x_t has {} entries, expected {}",
                x_t.len(),
                self.x_sum.len()
            )));
        }
        self.step += 1;
        for (s, v) in self.x_sum.iter_mut().zip(x_t) {
            *s += v;
        }
        for j in 0..self.v.rows() {
            let dot: Real = self.v.row(j).iter().zip(x_t).map(|(a, b)| a * b).sum();
            self.col_max[j] = self.col_max[j].max(dot);
        }

        let Some(idx) = self.acceptable_index() else {
            return Ok(None);
        };
        let score = self.score_for(idx)?;
        let sub = &mut self.subtasks[idx];
        let triggered = spike_triggered(
            sub.score_history.len(),
            sub.running_mean,
            score,
            self.cfg.k,
            self.cfg.warmup_steps,
            self.cfg.positive_mean_guard,
        );
        let running_mean = sub.running_mean;
        sub.push_score(score);

        if !triggered {
            return Ok(None);
        }
        let probability = masking_probability(current_frame, self.cfg.max_frames);
        let draw: Real = rng.gen();
        if draw >= probability {
            return Ok(None);
        }

        let sub = &mut self.subtasks[idx];
        sub.status = SubtaskStatus::Masked;
        sub.completed_at = Some(self.step);
        apply_mask(&mut self.masked_tokens, &self.subtasks[idx])?;
        if let Some(next) = self.subtasks.get_mut(idx + 1) {
            next.status = SubtaskStatus::Acceptable;
        }
        Ok(Some(MaskEvent {
            step: self.step,
            subtask: idx,
            score,
            running_mean,
            probability,
            draw,
        }))
    }
}
