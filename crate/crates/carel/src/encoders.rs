//! Instruction and observation encoders, projection layers into a shared
//! representation space, and the recurrent actor-critic heads.
//!
//! Token-level instruction representations are projected token embeddings
//! (with a config variant projecting per-token GRU hiddens instead); the
//! global instruction representation projects the final GRU hidden state.
//! Observations pass through a two-layer MLP over the one-hot egocentric
//! view, get projected to the shared dimension, and receive an additive
//! action embedding. All local and global representations are unit-L2
//! normalized by default, which bounds every similarity score in [−1, 1].

use rand::Rng;

use crate::error::{Error, Result};
use crate::gridworld::{self, Action, Observation};
use crate::ndgrad::{gru_cell, GruNodes, GruParams};
use crate::{Node, Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Dense token ↔ id bijection with `<pad>` and `<mask>` at fixed positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// The mission vocabulary shared with the gridworld generator.
    pub fn standard() -> Vocabulary {
        Vocabulary {
            words: gridworld::VOCAB.iter().map(|w| w.to_string()).collect(),
        }
    }

    /// Rebuild from a serialized ordered token list.
    pub fn from_words(words: Vec<String>) -> Result<Vocabulary> {
        if words.len() < 2 || words[0] != "<pad>" || words[1] != "<mask>" {
            return Err(Error::Vocabulary(
                "token list must start with <pad>, <mask>".into(),
            ));
        }
        for (i, w) in words.iter().enumerate() {
            if words[..i].contains(w) {
                return Err(Error::Vocabulary(format!("duplicate token {w:?}")));
            }
        }
        Ok(Vocabulary { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        gridworld::PAD_ID
    }

    pub fn mask_id(&self) -> usize {
        gridworld::MASK_ID
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocabulary(format!("unknown token {word:?}")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            if t >= self.len() {
                return Err(Error::Vocabulary(format!(
                    "token id {t} outside vocabulary of {}",
                    self.len()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Mean,
    Attention,
}

/// What the local token representations V are projected from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenReps {
    Embeddings,
    GruHiddens,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Token embedding width e.
    pub embed_dim: usize,
    /// Shared representation width d.
    pub repr_dim: usize,
    /// Instruction GRU hidden width.
    pub gru_hidden: usize,
    /// Observation MLP hidden width.
    pub obs_hidden: usize,
    /// Policy memory GRU hidden width.
    pub policy_hidden: usize,
    pub view_size: usize,
    pub max_instruction_len: usize,
    /// Unit-normalize local/global representations before similarities.
    pub normalize_reps: bool,
    /// Add action embeddings to observation representations.
    pub action_embeddings: bool,
    pub aggregation: Aggregation,
    pub token_reps: TokenReps,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 32,
            repr_dim: 64,
            gru_hidden: 64,
            obs_hidden: 128,
            policy_hidden: 128,
            view_size: 7,
            max_instruction_len: 32,
            normalize_reps: true,
            action_embeddings: true,
            aggregation: Aggregation::Mean,
            token_reps: TokenReps::Embeddings,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("repr_dim", self.repr_dim),
            ("gru_hidden", self.gru_hidden),
            ("obs_hidden", self.obs_hidden),
            ("policy_hidden", self.policy_hidden),
            ("max_instruction_len", self.max_instruction_len),
        ] {
            if v == 0 {
                return Err(Error::parameter(format!("{name} must be ≥ 1")));
            }
        }
        if self.view_size < 3 || self.view_size % 2 == 0 {
            return Err(Error::parameter(format!(
                "view_size {} must be odd and ≥ 3",
                self.view_size
            )));
        }
        Ok(())
    }

    /// One-hot feature count of an observation (per-cell kind/color/state).
    pub fn obs_features(&self) -> usize {
        self.view_size
            * self.view_size
            * (gridworld::obs_ids::KIND_CARDINALITY
                + gridworld::obs_ids::COLOR_CARDINALITY
                + gridworld::obs_ids::STATE_CARDINALITY)
    }

    fn token_rep_input(&self) -> usize {
        match self.token_reps {
            TokenReps::Embeddings => self.embed_dim,
            TokenReps::GruHiddens => self.gru_hidden,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Every learnable tensor of the agent. The `named`/`named_mut` registries
/// give a stable ordering used by the optimizer, checkpoints, and the
/// gradient checker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub token_embed: Tensor,
    pub instr_gru: GruParams<Real>,
    pub obs_w1: Tensor,
    pub obs_b1: Tensor,
    pub obs_w2: Tensor,
    pub obs_b2: Tensor,
    pub obs_proj_w: Tensor,
    pub obs_proj_b: Tensor,
    pub tok_proj_w: Tensor,
    pub tok_proj_b: Tensor,
    pub instr_proj_w: Tensor,
    pub instr_proj_b: Tensor,
    pub action_embed: Tensor,
    pub attn_query: Tensor,
    pub policy_gru: GruParams<Real>,
    pub actor_w: Tensor,
    pub actor_b: Tensor,
    pub critic_w: Tensor,
    pub critic_b: Tensor,
}

fn uniform(rows: usize, cols: usize, scale: Real, rng: &mut impl Rng) -> Tensor {
    let data: Vec<Real> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    if rows == 1 {
        Tensor::vector(data)
    } else {
        Tensor::matrix(rows, cols, data).unwrap()
    }
}

impl AgentParams {
    pub fn init(cfg: &EncoderConfig, vocab_len: usize, rng: &mut impl Rng) -> Result<AgentParams> {
        cfg.validate()?;
        if vocab_len == 0 {
            return Err(Error::parameter("empty vocabulary"));
        }
        let e = cfg.embed_dim;
        let d = cfg.repr_dim;
        let gh = cfg.gru_hidden;
        let oh = cfg.obs_hidden;
        let ph = cfg.policy_hidden;
        let of = cfg.obs_features();
        let ti = cfg.token_rep_input();
        let s = |fan_in: usize| 1.0 / (fan_in as Real).sqrt();
        Ok(AgentParams {
            token_embed: uniform(vocab_len, e, 1.0, rng),
            instr_gru: GruParams::init(e, gh, rng),
            // Consumed as a row-gather (one row per active one-hot feature),
            // so rows are input features and columns are hidden units.
            obs_w1: uniform(of, oh, s(of), rng),
            obs_b1: Tensor::zeros(vec![oh]),
            obs_w2: uniform(oh, oh, s(oh), rng),
            obs_b2: Tensor::zeros(vec![oh]),
            obs_proj_w: uniform(d, oh, s(oh), rng),
            obs_proj_b: Tensor::zeros(vec![d]),
            tok_proj_w: uniform(d, ti, s(ti), rng),
            tok_proj_b: Tensor::zeros(vec![d]),
            instr_proj_w: uniform(d, gh, s(gh), rng),
            instr_proj_b: Tensor::zeros(vec![d]),
            action_embed: uniform(Action::COUNT, d, 1.0, rng),
            attn_query: uniform(1, d, s(d), rng),
            policy_gru: GruParams::init(2 * d, ph, rng),
            actor_w: uniform(Action::COUNT, ph, s(ph), rng),
            actor_b: Tensor::zeros(vec![Action::COUNT]),
            critic_w: uniform(1, ph, s(ph), rng),
            critic_b: Tensor::scalar(0.0),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("token_embed".into(), &self.token_embed)];
        out.extend(self.instr_gru.named("instr_gru"));
        out.extend([
            ("obs.w1".into(), &self.obs_w1),
            ("obs.b1".into(), &self.obs_b1),
            ("obs.w2".into(), &self.obs_w2),
            ("obs.b2".into(), &self.obs_b2),
            ("obs_proj.w".into(), &self.obs_proj_w),
            ("obs_proj.b".into(), &self.obs_proj_b),
            ("tok_proj.w".into(), &self.tok_proj_w),
            ("tok_proj.b".into(), &self.tok_proj_b),
            ("instr_proj.w".into(), &self.instr_proj_w),
            ("instr_proj.b".into(), &self.instr_proj_b),
            ("action_embed".into(), &self.action_embed),
            ("attn_query".into(), &self.attn_query),
        ]);
        out.extend(self.policy_gru.named("policy_gru"));
        out.extend([
            ("actor.w".into(), &self.actor_w),
            ("actor.b".into(), &self.actor_b),
            ("critic.w".into(), &self.critic_w),
            ("critic.b".into(), &self.critic_b),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("token_embed".into(), &mut self.token_embed)];
        out.extend(self.instr_gru.named_mut("instr_gru"));
        out.extend([
            ("obs.w1".into(), &mut self.obs_w1),
            ("obs.b1".into(), &mut self.obs_b1),
            ("obs.w2".into(), &mut self.obs_w2),
            ("obs.b2".into(), &mut self.obs_b2),
            ("obs_proj.w".into(), &mut self.obs_proj_w),
            ("obs_proj.b".into(), &mut self.obs_proj_b),
            ("tok_proj.w".into(), &mut self.tok_proj_w),
            ("tok_proj.b".into(), &mut self.tok_proj_b),
            ("instr_proj.w".into(), &mut self.instr_proj_w),
            ("instr_proj.b".into(), &mut self.instr_proj_b),
            ("action_embed".into(), &mut self.action_embed),
            ("attn_query".into(), &mut self.attn_query),
        ]);
        out.extend(self.policy_gru.named_mut("policy_gru"));
        out.extend([
            ("actor.w".into(), &mut self.actor_w),
            ("actor.b".into(), &mut self.actor_b),
            ("critic.w".into(), &mut self.critic_w),
            ("critic.b".into(), &mut self.critic_b),
        ]);
        out
    }

    /// Names of the tensors that the auxiliary loss must reach (the policy
    /// head and memory are trained by the RL loss only; the attention query
    /// and action table drop out under the matching config switches).
    pub fn aux_relevant_names(&self, cfg: &EncoderConfig) -> Vec<String> {
        self.named()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| {
                !n.starts_with("policy_gru")
                    && !n.starts_with("actor")
                    && !n.starts_with("critic")
                    && (cfg.aggregation == Aggregation::Attention || n != "attn_query")
                    && (cfg.action_embeddings || n != "action_embed")
            })
            .collect()
    }

    pub fn validate(&self, cfg: &EncoderConfig, vocab_len: usize) -> Result<()> {
        cfg.validate()?;
        let d = cfg.repr_dim;
        let checks: [(&str, &Tensor, Vec<usize>); 13] = [
            ("token_embed", &self.token_embed, vec![vocab_len, cfg.embed_dim]),
            ("obs.w1", &self.obs_w1, vec![cfg.obs_features(), cfg.obs_hidden]),
            ("obs.b1", &self.obs_b1, vec![cfg.obs_hidden]),
            ("obs.w2", &self.obs_w2, vec![cfg.obs_hidden, cfg.obs_hidden]),
            ("obs.b2", &self.obs_b2, vec![cfg.obs_hidden]),
            ("obs_proj.w", &self.obs_proj_w, vec![d, cfg.obs_hidden]),
            ("obs_proj.b", &self.obs_proj_b, vec![d]),
            ("tok_proj.w", &self.tok_proj_w, vec![d, cfg.token_rep_input()]),
            ("instr_proj.w", &self.instr_proj_w, vec![d, cfg.gru_hidden]),
            ("action_embed", &self.action_embed, vec![Action::COUNT, d]),
            ("attn_query", &self.attn_query, vec![d]),
            ("actor.w", &self.actor_w, vec![Action::COUNT, cfg.policy_hidden]),
            ("critic.w", &self.critic_w, vec![cfg.policy_hidden]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want.as_slice() {
                return Err(Error::dimension(format!(
                    "{name}: shape {:?} does not match configured {want:?}",
                    t.shape()
                )));
            }
        }
        for (name, t) in self.named() {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

/// All parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AgentNodes {
    pub token_embed: Node,
    pub instr_gru: GruNodes,
    pub obs_w1: Node,
    pub obs_b1: Node,
    pub obs_w2: Node,
    pub obs_b2: Node,
    pub obs_proj_w: Node,
    pub obs_proj_b: Node,
    pub tok_proj_w: Node,
    pub tok_proj_b: Node,
    pub instr_proj_w: Node,
    pub instr_proj_b: Node,
    pub action_embed: Node,
    pub attn_query: Node,
    pub policy_gru: GruNodes,
    pub actor_w: Node,
    pub actor_b: Node,
    pub critic_w: Node,
    pub critic_b: Node,
}

impl AgentNodes {
    pub fn insert(tape: &mut Tape, p: &AgentParams) -> Result<AgentNodes> {
        Ok(AgentNodes {
            token_embed: tape.param(p.token_embed.clone())?,
            instr_gru: GruNodes::insert(tape, &p.instr_gru)?,
            obs_w1: tape.param(p.obs_w1.clone())?,
            obs_b1: tape.param(p.obs_b1.clone())?,
            obs_w2: tape.param(p.obs_w2.clone())?,
            obs_b2: tape.param(p.obs_b2.clone())?,
            obs_proj_w: tape.param(p.obs_proj_w.clone())?,
            obs_proj_b: tape.param(p.obs_proj_b.clone())?,
            tok_proj_w: tape.param(p.tok_proj_w.clone())?,
            tok_proj_b: tape.param(p.tok_proj_b.clone())?,
            instr_proj_w: tape.param(p.instr_proj_w.clone())?,
            instr_proj_b: tape.param(p.instr_proj_b.clone())?,
            action_embed: tape.param(p.action_embed.clone())?,
            attn_query: tape.param(p.attn_query.clone())?,
            policy_gru: GruNodes::insert(tape, &p.policy_gru)?,
            actor_w: tape.param(p.actor_w.clone())?,
            actor_b: tape.param(p.actor_b.clone())?,
            critic_w: tape.param(p.critic_w.clone())?,
            critic_b: tape.param(p.critic_b.clone())?,
        })
    }

    /// Node per parameter, in the same order as `AgentParams::named`.
    pub fn named(&self) -> Vec<(String, Node)> {
        let gru = |g: &GruNodes, prefix: &str| -> Vec<(String, Node)> {
            [
                ("wz", g.wz),
                ("uz", g.uz),
                ("bz", g.bz),
                ("wr", g.wr),
                ("ur", g.ur),
                ("br", g.br),
                ("wh", g.wh),
                ("uh", g.uh),
                ("bh", g.bh),
            ]
            .into_iter()
            .map(|(n, node)| (format!("{prefix}.{n}"), node))
            .collect()
        };
        let mut out = vec![("token_embed".to_string(), self.token_embed)];
        out.extend(gru(&self.instr_gru, "instr_gru"));
        out.extend([
            ("obs.w1".to_string(), self.obs_w1),
            ("obs.b1".to_string(), self.obs_b1),
            ("obs.w2".to_string(), self.obs_w2),
            ("obs.b2".to_string(), self.obs_b2),
            ("obs_proj.w".to_string(), self.obs_proj_w),
            ("obs_proj.b".to_string(), self.obs_proj_b),
            ("tok_proj.w".to_string(), self.tok_proj_w),
            ("tok_proj.b".to_string(), self.tok_proj_b),
            ("instr_proj.w".to_string(), self.instr_proj_w),
            ("instr_proj.b".to_string(), self.instr_proj_b),
            ("action_embed".to_string(), self.action_embed),
            ("attn_query".to_string(), self.attn_query),
        ]);
        out.extend(gru(&self.policy_gru, "policy_gru"));
        out.extend([
            ("actor.w".to_string(), self.actor_w),
            ("actor.b".to_string(), self.actor_b),
            ("critic.w".to_string(), self.critic_w),
            ("critic.b".to_string(), self.critic_b),
        ]);
        out
    }
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Row indices into `obs_w1` for the active one-hot features of an
/// observation: per view cell, one kind + one color + one state feature.
pub fn observation_feature_ids(obs: &Observation) -> Vec<usize> {
    use gridworld::obs_ids::{COLOR_CARDINALITY, KIND_CARDINALITY};
    let per_cell = KIND_CARDINALITY
        + COLOR_CARDINALITY
        + gridworld::obs_ids::STATE_CARDINALITY;
    let mut ids = Vec::with_capacity(obs.ids.len());
    for (cell, triple) in obs.ids.chunks(3).enumerate() {
        let base = cell * per_cell;
        ids.push(base + triple[0] as usize);
        ids.push(base + KIND_CARDINALITY + triple[1] as usize);
        ids.push(base + KIND_CARDINALITY + COLOR_CARDINALITY + triple[2] as usize);
    }
    ids
}

pub struct InstructionEncoding {
    /// Per-token local representations, each of width d.
    pub v_rows: Vec<Node>,
    /// The same rows stacked, m×d.
    pub v: Node,
    /// Global instruction representation, width d.
    pub v_global: Node,
    /// Raw per-token GRU hidden states.
    pub hiddens: Vec<Node>,
}

pub fn encode_instruction(
    tape: &mut Tape,
    nodes: &AgentNodes,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    tokens: &[usize],
) -> Result<InstructionEncoding> {
    if tokens.is_empty() || tokens.len() > cfg.max_instruction_len {
        return Err(Error::parameter(format!(
            "instruction length {} outside 1..={}",
            tokens.len(),
            cfg.max_instruction_len
        )));
    }
    vocab.check_tokens(tokens)?;

    let emb = tape.embed_rows(nodes.token_embed, tokens)?;
    let mut h = tape.constant(Tensor::zeros(vec![cfg.gru_hidden]))?;
    let mut hiddens = Vec::with_capacity(tokens.len());
    let mut embedded = Vec::with_capacity(tokens.len());
    for i in 0..tokens.len() {
        let x = tape.row_slice(emb, i)?;
        embedded.push(x);
        h = gru_cell(tape, &nodes.instr_gru, x, h)?;
        hiddens.push(h);
    }

    let mut v_rows = Vec::with_capacity(tokens.len());
    for i in 0..tokens.len() {
        let base = match cfg.token_reps {
            TokenReps::Embeddings => embedded[i],
            TokenReps::GruHiddens => hiddens[i],
        };
        let proj = tape.matvec(nodes.tok_proj_w, base)?;
        let mut v_i = tape.add(proj, nodes.tok_proj_b)?;
        if cfg.normalize_reps {
            v_i = tape.l2_normalize(v_i)?;
        }
        v_rows.push(v_i);
    }
    let v = tape.stack_rows(&v_rows)?;

    let proj = tape.matvec(nodes.instr_proj_w, h)?;
    let mut v_global = tape.add(proj, nodes.instr_proj_b)?;
    if cfg.normalize_reps {
        v_global = tape.l2_normalize(v_global)?;
    }

    Ok(InstructionEncoding {
        v_rows,
        v,
        v_global,
        hiddens,
    })
}

pub struct ObservationEncoding {
    /// Pre-normalization representation (the policy's fused-feature input).
    pub x_raw: Node,
    /// Final representation, unit-normalized when configured.
    pub x: Node,
}

pub fn encode_observation(
    tape: &mut Tape,
    nodes: &AgentNodes,
    cfg: &EncoderConfig,
    obs: &Observation,
    action: usize,
) -> Result<ObservationEncoding> {
    if obs.view_size != cfg.view_size {
        return Err(Error::dimension(format!(
            "observation view {} does not match configured view {}",
            obs.view_size, cfg.view_size
        )));
    }
    if action >= Action::COUNT {
        return Err(Error::parameter(format!(
            "action id {action} out of range 0..{}",
            Action::COUNT
        )));
    }

    // One-hot × W1 as a row gather: sum the rows of the active features.
    let ids = observation_feature_ids(obs);
    let picked = tape.embed_rows(nodes.obs_w1, &ids)?;
    let mean = tape.mean_axis(picked, 0)?;
    let summed = tape.scale(mean, ids.len() as Real)?;
    let pre1 = tape.add(summed, nodes.obs_b1)?;
    let h1 = tape.tanh(pre1)?;
    let lin2 = tape.matvec(nodes.obs_w2, h1)?;
    let pre2 = tape.add(lin2, nodes.obs_b2)?;
    let h2 = tape.tanh(pre2)?;

    let proj = tape.matvec(nodes.obs_proj_w, h2)?;
    let projected = tape.add(proj, nodes.obs_proj_b)?;
    let x_raw = if cfg.action_embeddings {
        let u = tape.row_slice(nodes.action_embed, action)?;
        tape.add(projected, u)?
    } else {
        projected
    };
    let x = if cfg.normalize_reps {
        tape.l2_normalize(x_raw)?
    } else {
        x_raw
    };
    Ok(ObservationEncoding { x_raw, x })
}

/// Pool local representations (rows of an n×d matrix) into one global
/// vector, renormalizing when representation normalization is on.
pub fn aggregate_global(
    tape: &mut Tape,
    nodes: &AgentNodes,
    cfg: &EncoderConfig,
    x: Node,
) -> Result<Node> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::dimension(format!(
            "aggregate_global: need a non-empty matrix, got {shape:?}"
        )));
    }
    let pooled = match cfg.aggregation {
        Aggregation::Mean => tape.mean_axis(x, 0)?,
        Aggregation::Attention => {
            let mut scores = Vec::with_capacity(shape[0]);
            for i in 0..shape[0] {
                let row = tape.row_slice(x, i)?;
                scores.push(tape.dot(nodes.attn_query, row)?);
            }
            let logits = tape.stack_scalars(&scores)?;
            let weights = tape.softmax_temp(logits, 1.0)?;
            let w_row = tape.reshape(weights, vec![1, shape[0]])?;
            let mixed = tape.matmul(w_row, x)?;
            tape.reshape(mixed, vec![shape[1]])?
        }
    };
    if cfg.normalize_reps {
        tape.l2_normalize(pooled)
    } else {
        Ok(pooled)
    }
}

/// Running mean over a growing prefix of rows; matches batch recomputation
/// to floating-point accumulation order.
#[derive(Clone, Debug, Default)]
pub struct RunningMean {
    sum: Vec<Real>,
    count: usize,
}

impl RunningMean {
    pub fn new() -> RunningMean {
        RunningMean::default()
    }

    pub fn push(&mut self, row: &[Real]) -> Result<()> {
        if self.count == 0 {
            self.sum = row.to_vec();
        } else {
            if row.len() != self.sum.len() {
                return Err(Error::dimension(format!(
                    "running mean: row of {} after rows of {}",
                    row.len(),
                    self.sum.len()
                )));
            }
            for (s, v) in self.sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Result<Vec<Real>> {
        if self.count == 0 {
            return Err(Error::dimension("running mean of zero rows"));
        }
        Ok(self.sum.iter().map(|s| s / self.count as Real).collect())
    }
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

/// One episode–instruction pair's representations on a tape: local
/// observation-action rows X (n×d), local token rows V (m×d), and the two
/// global vectors x̃ and ṽ.
#[derive(Clone, Copy, Debug)]
pub struct LocalGlobalReps {
    pub x: Node,
    pub v: Node,
    pub x_global: Node,
    pub v_global: Node,
}

impl LocalGlobalReps {
    /// Check the shape contract (and unit norms when normalization is on).
    pub fn validate(&self, tape: &Tape, normalized: bool) -> Result<()> {
        let xs = tape.value(self.x).shape().to_vec();
        let vs = tape.value(self.v).shape().to_vec();
        if xs.len() != 2 || vs.len() != 2 || xs[0] == 0 || vs[0] == 0 || xs[1] != vs[1] {
            return Err(Error::dimension(format!(
                "local reps must be non-empty n×d and m×d with shared d, got {xs:?} and {vs:?}"
            )));
        }
        let d = xs[1];
        for (name, g) in [("x_global", self.x_global), ("v_global", self.v_global)] {
            let shape = tape.value(g).shape();
            if shape != [d] {
                return Err(Error::dimension(format!(
                    "{name} shape {shape:?} does not match d = {d}"
                )));
            }
        }
        if normalized {
            let check = |name: &str, data: &[Real]| -> Result<()> {
                let n = data.iter().map(|v| v * v).sum::<Real>().sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::dimension(format!("{name} has L2 norm {n}, not 1")));
                }
                Ok(())
            };
            for i in 0..xs[0] {
                check("an X row", tape.value(self.x).row(i))?;
            }
            for i in 0..vs[0] {
                check("a V row", tape.value(self.v).row(i))?;
            }
            check("x_global", tape.value(self.x_global).data())?;
            check("v_global", tape.value(self.v_global).data())?;
        }
        Ok(())
    }
}

pub struct PolicyStep {
    pub logits: Node,
    pub value: Node,
    /// Policy memory to carry into the next step of the episode.
    pub hidden: Node,
}

/// Zero policy memory for an episode start.
pub fn policy_initial_hidden(cfg: &EncoderConfig) -> Tensor {
    Tensor::zeros(vec![cfg.policy_hidden])
}

/// One policy step: fuse the un-normalized observation-action
/// representation with the global instruction representation, advance the
/// policy memory, and read out action logits and the state value.
///
/// `prev_action` is the action taken on the previous step (done-noop at the
/// episode start); `v_global` comes from the *masked* instruction when
/// tracking is active.
pub fn policy_step(
    tape: &mut Tape,
    nodes: &AgentNodes,
    cfg: &EncoderConfig,
    obs: &Observation,
    prev_action: usize,
    v_global: Node,
    hidden: Node,
) -> Result<PolicyStep> {
    let enc = encode_observation(tape, nodes, cfg, obs, prev_action)?;
    let fused = tape.concat_vec(&[enc.x_raw, v_global])?;
    let h = gru_cell(tape, &nodes.policy_gru, fused, hidden)?;
    let lin = tape.matvec(nodes.actor_w, h)?;
    let logits = tape.add(lin, nodes.actor_b)?;
    let vdot = tape.dot(nodes.critic_w, h)?;
    let value = tape.add(vdot, nodes.critic_b)?;
    Ok(PolicyStep {
        logits,
        value,
        hidden: h,
    })
}
