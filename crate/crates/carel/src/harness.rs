//! Run configuration, output-directory plumbing, metrics emission, the
//! evaluation protocol, and the verification commands behind the `carel`
//! binary.
//!
//! Configuration is a flat `key=value` namespace: the same keys appear in
//! config files, as kebab-case CLI flags, and in the `config.txt` echoed
//! into every run directory, so a run is always reproducible from its own
//! artifacts. Every hyperparameter consumed anywhere in the system is
//! settable here — there are no hidden constants that affect results.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::encoders::{Aggregation, EncoderConfig, TokenReps, Vocabulary};
use crate::error::{Error, Result};
use crate::gridworld::{generate, oracle_solve, Action, GenParams, Level, Split};
use crate::ndgrad::OpKind;
use crate::tracker::{ScoreSource, TrackerConfig};
use crate::trainer::{
    run_policy_episode, ActionSelection, Checkpoint, MetricsRecord, PpoConfig, TrainConfig, Trainer,
};
use crate::xclip::{contrastive_loss, oracle, CarelConfig};
use crate::{Real, Tape, Tensor};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Full description of a training run (or several, one per seed).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Required for training; there is no sensible default task.
    pub level: Option<Level>,
    pub seeds: Vec<u64>,
    pub total_frames: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub warmstart_frames: u64,
    pub carel: bool,
    pub timing: bool,
    pub output_dir: PathBuf,
    pub gen: GenParams,
    pub ppo: PpoConfig,
    pub carel_cfg: CarelConfig,
    pub tracker_cfg: TrackerConfig,
    pub encoder: EncoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            level: None,
            seeds: vec![0],
            total_frames: t.total_frames,
            eval_interval: t.eval_interval,
            eval_episodes: t.eval_episodes,
            warmstart_frames: t.warmstart_frames,
            carel: t.carel,
            timing: t.timing,
            output_dir: PathBuf::from("runs"),
            gen: t.gen,
            ppo: t.ppo,
            carel_cfg: t.carel_cfg,
            tracker_cfg: t.tracker_cfg,
            encoder: t.encoder,
        }
    }
}

/// Every configuration key, in the canonical order used by `echo`.
pub const CONFIG_KEYS: &[&str] = &[
    // Run
    "level",
    "seeds",
    "total-frames",
    "eval-interval",
    "eval-episodes",
    "warmstart-frames",
    "timing",
    "output-dir",
    // Environment
    "room-size",
    "view-size",
    "gotoseq-subtasks",
    "door-count",
    "distractors",
    // PPO
    "learning-rate",
    "adam-beta1",
    "adam-beta2",
    "adam-eps",
    "batch-size",
    "clip-epsilon",
    "discount",
    "gae-lambda",
    "ppo-epochs",
    "entropy-coef",
    "value-coef",
    "rollout-len",
    "num-envs",
    "normalize-advantages",
    // Auxiliary objective
    "carel",
    "lambda-c",
    "tau",
    "success-fraction",
    "aux-batch-max",
    // Instruction tracking
    "tracking",
    "k",
    "warmup-steps",
    "mask-max-frames",
    "score-source",
    "positive-mean-guard",
    "normalize-global",
    // Encoder
    "embed-dim",
    "repr-dim",
    "gru-hidden",
    "obs-hidden",
    "policy-hidden",
    "max-instruction-len",
    "normalize-reps",
    "action-embeddings",
    "aggregation",
    "token-reps",
];

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::parameter(format!("key {key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        other => Err(Error::parameter(format!(
            "key {key}: expected a boolean, got {other:?}"
        ))),
    }
}

fn bool_word(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

pub fn parse_split(value: &str) -> Result<Split> {
    match value.trim().to_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "holdout" | "held-out" | "heldout" => Ok(Split::Holdout),
        other => Err(Error::parameter(format!(
            "unknown split {other:?} (expected train or holdout)"
        ))),
    }
}

impl RunConfig {
    /// Set one field from its flat key. Keys accept kebab-case or
    /// snake_case.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let canon = key.trim().to_lowercase().replace('_', "-");
        match canon.as_str() {
            "level" => self.level = Some(parse_as(&canon, value)?),
            "seeds" => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    seeds.push(parse_as::<u64>(&canon, part)?);
                }
                if seeds.is_empty() {
                    return Err(Error::parameter("key seeds: at least one seed is required"));
                }
                self.seeds = seeds;
            }
            "total-frames" => self.total_frames = parse_as(&canon, value)?,
            "eval-interval" => self.eval_interval = parse_as(&canon, value)?,
            "eval-episodes" => self.eval_episodes = parse_as(&canon, value)?,
            "warmstart-frames" => self.warmstart_frames = parse_as(&canon, value)?,
            "timing" => self.timing = parse_bool(&canon, value)?,
            "output-dir" => self.output_dir = PathBuf::from(value.trim()),
            "room-size" => self.gen.room_size = parse_as(&canon, value)?,
            "view-size" => {
                // One knob: the agent's egocentric window and the encoder
                // input must agree.
                let v = parse_as(&canon, value)?;
                self.gen.view_size = v;
                self.encoder.view_size = v;
            }
            "gotoseq-subtasks" => self.gen.gotoseq_subtasks = parse_as(&canon, value)?,
            "door-count" => self.gen.door_count = parse_as(&canon, value)?,
            "distractors" => self.gen.distractors = parse_as(&canon, value)?,
            "learning-rate" => self.ppo.learning_rate = parse_as(&canon, value)?,
            "adam-beta1" => self.ppo.adam_beta1 = parse_as(&canon, value)?,
            "adam-beta2" => self.ppo.adam_beta2 = parse_as(&canon, value)?,
            "adam-eps" => self.ppo.adam_eps = parse_as(&canon, value)?,
            "batch-size" => self.ppo.batch_size = parse_as(&canon, value)?,
            "clip-epsilon" => self.ppo.clip_epsilon = parse_as(&canon, value)?,
            "discount" => self.ppo.discount = parse_as(&canon, value)?,
            "gae-lambda" => self.ppo.gae_lambda = parse_as(&canon, value)?,
            "ppo-epochs" => self.ppo.ppo_epochs = parse_as(&canon, value)?,
            "entropy-coef" => self.ppo.entropy_coef = parse_as(&canon, value)?,
            "value-coef" => self.ppo.value_coef = parse_as(&canon, value)?,
            "rollout-len" => self.ppo.rollout_len = parse_as(&canon, value)?,
            "num-envs" => self.ppo.num_envs = parse_as(&canon, value)?,
            "normalize-advantages" => self.ppo.normalize_advantages = parse_bool(&canon, value)?,
            "carel" => self.carel = parse_bool(&canon, value)?,
            "lambda-c" => self.carel_cfg.lambda_c = parse_as(&canon, value)?,
            "tau" => self.carel_cfg.tau = parse_as(&canon, value)?,
            "success-fraction" => self.carel_cfg.success_fraction = parse_as(&canon, value)?,
            "aux-batch-max" => self.carel_cfg.aux_batch_max = parse_as(&canon, value)?,
            "tracking" => self.tracker_cfg.enabled = parse_bool(&canon, value)?,
            "k" => self.tracker_cfg.k = parse_as(&canon, value)?,
            "warmup-steps" => self.tracker_cfg.warmup_steps = parse_as(&canon, value)?,
            "mask-max-frames" => self.tracker_cfg.max_frames = parse_as(&canon, value)?,
            "score-source" => self.tracker_cfg.score_source = parse_as(&canon, value)?,
            "positive-mean-guard" => {
                self.tracker_cfg.positive_mean_guard = parse_bool(&canon, value)?
            }
            "normalize-global" => self.tracker_cfg.normalize_global = parse_bool(&canon, value)?,
            "embed-dim" => self.encoder.embed_dim = parse_as(&canon, value)?,
            "repr-dim" => self.encoder.repr_dim = parse_as(&canon, value)?,
            "gru-hidden" => self.encoder.gru_hidden = parse_as(&canon, value)?,
            "obs-hidden" => self.encoder.obs_hidden = parse_as(&canon, value)?,
            "policy-hidden" => self.encoder.policy_hidden = parse_as(&canon, value)?,
            "max-instruction-len" => self.encoder.max_instruction_len = parse_as(&canon, value)?,
            "normalize-reps" => {
                // One knob: the loss and the encoders must agree on whether
                // representations live on the unit sphere.
                let v = parse_bool(&canon, value)?;
                self.encoder.normalize_reps = v;
                self.carel_cfg.normalize_reps = v;
            }
            "action-embeddings" => self.encoder.action_embeddings = parse_bool(&canon, value)?,
            "aggregation" => {
                self.encoder.aggregation = match value.trim().to_lowercase().as_str() {
                    "mean" => Aggregation::Mean,
                    "attention" => Aggregation::Attention,
                    other => {
                        return Err(Error::parameter(format!(
                            "key aggregation: unknown mode {other:?} (expected mean or attention)"
                        )))
                    }
                }
            }
            "token-reps" => {
                self.encoder.token_reps = match value.trim().to_lowercase().as_str() {
                    "embeddings" => TokenReps::Embeddings,
                    "gru-hiddens" | "gru" => TokenReps::GruHiddens,
                    other => {
                        return Err(Error::parameter(format!(
                            "key token-reps: unknown mode {other:?} (expected embeddings or gru-hiddens)"
                        )))
                    }
                }
            }
            other => {
                return Err(Error::parameter(format!("unknown configuration key {other:?}")))
            }
        }
        Ok(())
    }

    /// Current value of one key, formatted exactly as `apply` accepts it.
    pub fn get(&self, key: &str) -> Result<String> {
        let canon = key.trim().to_lowercase().replace('_', "-");
        Ok(match canon.as_str() {
            "level" => self.level.map(|l| l.to_string()).unwrap_or_default(),
            "seeds" => self
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "total-frames" => self.total_frames.to_string(),
            "eval-interval" => self.eval_interval.to_string(),
            "eval-episodes" => self.eval_episodes.to_string(),
            "warmstart-frames" => self.warmstart_frames.to_string(),
            "timing" => bool_word(self.timing).into(),
            "output-dir" => self.output_dir.display().to_string(),
            "room-size" => self.gen.room_size.to_string(),
            "view-size" => self.gen.view_size.to_string(),
            "gotoseq-subtasks" => self.gen.gotoseq_subtasks.to_string(),
            "door-count" => self.gen.door_count.to_string(),
            "distractors" => self.gen.distractors.to_string(),
            "learning-rate" => self.ppo.learning_rate.to_string(),
            "adam-beta1" => self.ppo.adam_beta1.to_string(),
            "adam-beta2" => self.ppo.adam_beta2.to_string(),
            "adam-eps" => self.ppo.adam_eps.to_string(),
            "batch-size" => self.ppo.batch_size.to_string(),
            "clip-epsilon" => self.ppo.clip_epsilon.to_string(),
            "discount" => self.ppo.discount.to_string(),
            "gae-lambda" => self.ppo.gae_lambda.to_string(),
            "ppo-epochs" => self.ppo.ppo_epochs.to_string(),
            "entropy-coef" => self.ppo.entropy_coef.to_string(),
            "value-coef" => self.ppo.value_coef.to_string(),
            "rollout-len" => self.ppo.rollout_len.to_string(),
            "num-envs" => self.ppo.num_envs.to_string(),
            "normalize-advantages" => bool_word(self.ppo.normalize_advantages).into(),
            "carel" => bool_word(self.carel).into(),
            "lambda-c" => self.carel_cfg.lambda_c.to_string(),
            "tau" => self.carel_cfg.tau.to_string(),
            "success-fraction" => self.carel_cfg.success_fraction.to_string(),
            "aux-batch-max" => self.carel_cfg.aux_batch_max.to_string(),
            "tracking" => bool_word(self.tracker_cfg.enabled).into(),
            "k" => self.tracker_cfg.k.to_string(),
            "warmup-steps" => self.tracker_cfg.warmup_steps.to_string(),
            "mask-max-frames" => self.tracker_cfg.max_frames.to_string(),
            "score-source" => match self.tracker_cfg.score_source {
                ScoreSource::EpisodeWord => "ew".into(),
                ScoreSource::ObservationWord => "ow".into(),
            },
            "positive-mean-guard" => bool_word(self.tracker_cfg.positive_mean_guard).into(),
            "normalize-global" => bool_word(self.tracker_cfg.normalize_global).into(),
            "embed-dim" => self.encoder.embed_dim.to_string(),
            "repr-dim" => self.encoder.repr_dim.to_string(),
            "gru-hidden" => self.encoder.gru_hidden.to_string(),
            "obs-hidden" => self.encoder.obs_hidden.to_string(),
            "policy-hidden" => self.encoder.policy_hidden.to_string(),
            "max-instruction-len" => self.encoder.max_instruction_len.to_string(),
            "normalize-reps" => bool_word(self.encoder.normalize_reps).into(),
            "action-embeddings" => bool_word(self.encoder.action_embeddings).into(),
            "aggregation" => match self.encoder.aggregation {
                Aggregation::Mean => "mean".into(),
                Aggregation::Attention => "attention".into(),
            },
            "token-reps" => match self.encoder.token_reps {
                TokenReps::Embeddings => "embeddings".into(),
                TokenReps::GruHiddens => "gru-hiddens".into(),
            },
            other => return Err(Error::parameter(format!("unknown configuration key {other:?}"))),
        })
    }

    /// Flat `key=value` rendering of the whole configuration, in canonical
    /// key order. Parsing the echo back reproduces the config.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = self.get(key).expect("canonical keys always resolve");
            out.push_str(key);
            out.push('=');
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the echoed configuration, for quick run identity checks.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.echo().as_bytes());
        let bytes = hasher.finalize();
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply `key=value` lines (blank lines and `#` comments allowed).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parameter(format!(
                    "config line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            // A config file naming an output-dir is applied relative to the
            // caller's working directory, same as a flag.
            if key.trim() == "level" && value.trim().is_empty() {
                continue;
            }
            self.apply(key, value)?;
        }
        Ok(())
    }

    /// Defaults, then a config file (if any), then explicit overrides.
    pub fn load(config_file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = config_file {
            let text = fs::read_to_string(path)?;
            cfg.apply_text(&text)?;
        }
        for (key, value) in overrides {
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    /// The trainer-facing configuration for one seed.
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let Some(level) = self.level else {
            return Err(Error::parameter(
                "level is required (pass --level or set level= in the config file)",
            ));
        };
        let cfg = TrainConfig {
            level,
            seed,
            total_frames: self.total_frames,
            eval_interval: self.eval_interval,
            eval_episodes: self.eval_episodes,
            warmstart_frames: self.warmstart_frames,
            carel: self.carel,
            gen: self.gen,
            ppo: self.ppo,
            carel_cfg: self.carel_cfg,
            tracker_cfg: self.tracker_cfg,
            encoder: self.encoder,
            timing: self.timing,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::parameter("at least one seed is required"));
        }
        let probe = self.seeds[0];
        self.to_train_config(probe).map(|_| ())
    }
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str =
    "frame,episodes,sr_train,sr_holdout,rl_loss,aux_loss,mask_events,fps,wall_seconds";

fn opt_cell(v: Option<Real>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row (no trailing newline). Skipped auxiliary windows and
/// disabled timing leave their cells empty rather than writing 0.
pub fn metrics_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.frame,
        r.episodes,
        r.sr_train,
        r.sr_holdout,
        r.rl_loss,
        opt_cell(r.aux_loss),
        r.mask_events,
        opt_cell(r.fps),
        opt_cell(r.wall_seconds),
    )
}

/// Write the full metrics file for one run.
pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::contract("refusing to emit an empty metrics file"));
    }
    for w in records.windows(2) {
        if w[1].frame <= w[0].frame {
            return Err(Error::contract(format!(
                "metrics frames must be strictly increasing, got {} then {}",
                w[0].frame, w[1].frame
            )));
        }
    }
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

/// Paths and records produced by one seed's run.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub records: Vec<MetricsRecord>,
}

/// Train every configured seed sequentially, reporting each metrics record
/// to `progress` as it is produced. Each seed gets its own subdirectory
/// holding `config.txt` (the exact single-seed configuration), `metrics.csv`,
/// `checkpoint.json` (refreshed every evaluation window), and
/// `mask_audit.jsonl`.
pub fn run_train_with(
    cfg: &RunConfig,
    mut progress: impl FnMut(u64, &MetricsRecord),
) -> Result<Vec<TrainArtifacts>> {
    cfg.validate()?;
    let mut artifacts = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let train_cfg = cfg.to_train_config(seed)?;
        let run_dir = cfg.output_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&run_dir)?;

        let mut seed_cfg = cfg.clone();
        seed_cfg.seeds = vec![seed];
        seed_cfg.output_dir = run_dir.clone();
        fs::write(run_dir.join("config.txt"), seed_cfg.echo())?;

        let metrics_path = run_dir.join("metrics.csv");
        let checkpoint_path = run_dir.join("checkpoint.json");
        let audit_path = run_dir.join("mask_audit.jsonl");
        let mut metrics_file = fs::File::create(&metrics_path)?;
        writeln!(metrics_file, "{METRICS_HEADER}")?;

        let mut trainer = Trainer::new(train_cfg)?;
        let records = trainer.run(|record, t| {
            writeln!(metrics_file, "{}", metrics_row(record))?;
            metrics_file.flush()?;
            let json = serde_json::to_string(&t.checkpoint())
                .map_err(|e| Error::contract(format!("checkpoint serialization failed: {e}")))?;
            fs::write(&checkpoint_path, json)?;
            progress(seed, record);
            Ok(())
        })?;

        let json = serde_json::to_string(&trainer.checkpoint())
            .map_err(|e| Error::contract(format!("checkpoint serialization failed: {e}")))?;
        fs::write(&checkpoint_path, json)?;

        let mut audit_file = fs::File::create(&audit_path)?;
        for event in trainer.drain_mask_audit() {
            let line = serde_json::to_string(&event)
                .map_err(|e| Error::contract(format!("audit serialization failed: {e}")))?;
            writeln!(audit_file, "{line}")?;
        }

        artifacts.push(TrainArtifacts {
            seed,
            run_dir,
            metrics_path,
            checkpoint_path,
            records,
        });
    }
    Ok(artifacts)
}

pub fn run_train(cfg: &RunConfig) -> Result<Vec<TrainArtifacts>> {
    run_train_with(cfg, |_, _| {})
}

/// Run the same configuration once per value of `key`, each under its own
/// `key-value` subdirectory of the base output directory.
pub fn run_sweep(
    base: &RunConfig,
    key: &str,
    values: &[String],
) -> Result<Vec<(String, Vec<TrainArtifacts>)>> {
    if values.is_empty() {
        return Err(Error::parameter("sweep needs at least one value"));
    }
    let canon = key.trim().to_lowercase().replace('_', "-");
    let mut out = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        cfg.apply(&canon, value)?;
        cfg.output_dir = base.output_dir.join(format!("{canon}-{}", value.trim()));
        let artifacts = run_train(&cfg)?;
        out.push((value.trim().to_string(), artifacts));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPolicy {
    /// The trained policy from a checkpoint.
    Checkpoint,
    /// The scripted solver (success-rate upper bound).
    Oracle,
    /// Uniformly random actions (success-rate floor).
    Random,
}

impl FromStr for EvalPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<EvalPolicy> {
        match s.trim().to_lowercase().as_str() {
            "checkpoint" => Ok(EvalPolicy::Checkpoint),
            "oracle" => Ok(EvalPolicy::Oracle),
            "random" => Ok(EvalPolicy::Random),
            other => Err(Error::parameter(format!(
                "unknown policy {other:?} (expected checkpoint, oracle, or random)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the checkpoint's level; required for oracle/random.
    pub level: Option<Level>,
    pub split: Split,
    pub episodes: usize,
    pub seed: u64,
    pub policy: EvalPolicy,
    /// Greedy by default; sampling evaluation behind this switch.
    pub selection: ActionSelection,
    /// Mission parameters for oracle/random (checkpoints carry their own).
    pub gen: GenParams,
    /// Append one line-delimited trace record per step of every episode.
    pub trace_path: Option<PathBuf>,
}

impl Default for EvalRequest {
    fn default() -> Self {
        EvalRequest {
            checkpoint: None,
            level: None,
            split: Split::Holdout,
            episodes: 100,
            seed: 0,
            policy: EvalPolicy::Checkpoint,
            selection: ActionSelection::Greedy,
            gen: GenParams::default(),
            trace_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub level: Level,
    pub split: Split,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: Real,
    pub mask_events: u64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "level {} split {:?}: {}/{} episodes succeeded (sr {}), {} mask events",
            self.level, self.split, self.successes, self.episodes, self.success_rate, self.mask_events
        )
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Version(format!("cannot read checkpoint {}: {e}", path.display())))
}

/// Evaluate a policy on freshly generated missions of the requested split.
/// Parameters are never updated. Instruction tracking runs during
/// checkpoint evaluation exactly when the checkpoint's own configuration
/// enabled it.
pub fn run_eval(req: &EvalRequest) -> Result<EvalReport> {
    if req.episodes == 0 {
        return Err(Error::parameter("episodes must be at least 1"));
    }
    // Checkpoint evaluation borrows the trained state; scripted policies
    // need an explicit level.
    let trainer = match req.policy {
        EvalPolicy::Checkpoint => {
            let Some(path) = &req.checkpoint else {
                return Err(Error::parameter(
                    "checkpoint is required (pass --checkpoint or choose --policy oracle/random)",
                ));
            };
            Some(Trainer::restore(load_checkpoint(path)?)?)
        }
        EvalPolicy::Oracle | EvalPolicy::Random => {
            if req.level.is_none() {
                return Err(Error::parameter(
                    "level is required for oracle or random evaluation",
                ));
            }
            None
        }
    };
    let (level, gen) = match &trainer {
        Some(t) => (
            req.level.unwrap_or(t.config().level),
            t.config().gen,
        ),
        None => (req.level.expect("checked above"), req.gen),
    };
    let vocab = Vocabulary::standard();

    let mut trace_file = match &req.trace_path {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    let mut seed_rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut successes = 0usize;
    let mut mask_events = 0u64;
    for _ in 0..req.episodes {
        let mission_seed: u64 = seed_rng.gen();
        let episode_seed: u64 = seed_rng.gen();
        let (mut world, _spec, instruction) = generate(level, mission_seed, req.split, &gen)?;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let episode = match (&trainer, req.policy) {
            (Some(t), EvalPolicy::Checkpoint) => {
                let (episode, masks) = run_policy_episode(
                    t.params(),
                    &t.config().encoder,
                    &vocab,
                    Some(&t.config().tracker_cfg),
                    &mut world,
                    &instruction,
                    req.selection,
                    t.frame(),
                    &mut rng,
                )?;
                mask_events += masks;
                episode
            }
            (_, EvalPolicy::Oracle) => {
                let plan = oracle_solve(&world)?;
                let mut steps = Vec::with_capacity(plan.len());
                let mut total_reward = 0.0;
                for action in plan {
                    let obs = world.observe();
                    let outcome = world.step(action)?;
                    total_reward += outcome.reward;
                    steps.push(crate::gridworld::EpisodeStep {
                        obs,
                        action,
                        reward: outcome.reward,
                        done: outcome.done,
                    });
                }
                crate::gridworld::Episode {
                    steps,
                    instruction: instruction.clone(),
                    success: world.succeeded(),
                    total_reward,
                    subtask_completion_steps: world.completion_steps().to_vec(),
                }
            }
            (_, EvalPolicy::Random) => {
                let mut steps = Vec::new();
                let mut total_reward = 0.0;
                while !world.is_done() {
                    let obs = world.observe();
                    let action = Action::from_index(rng.gen_range(0..Action::COUNT))?;
                    let outcome = world.step(action)?;
                    total_reward += outcome.reward;
                    steps.push(crate::gridworld::EpisodeStep {
                        obs,
                        action,
                        reward: outcome.reward,
                        done: outcome.done,
                    });
                }
                crate::gridworld::Episode {
                    steps,
                    instruction: instruction.clone(),
                    success: world.succeeded(),
                    total_reward,
                    subtask_completion_steps: world.completion_steps().to_vec(),
                }
            }
            (None, EvalPolicy::Checkpoint) => unreachable!("trainer loaded above"),
        };
        if episode.success {
            successes += 1;
        }
        if let Some(f) = trace_file.as_mut() {
            episode.write_trace(f)?;
        }
    }
    Ok(EvalReport {
        level,
        split: req.split,
        episodes: req.episodes,
        successes,
        success_rate: successes as Real / req.episodes as Real,
        mask_events,
    })
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Parameter classes reported by the gradient check, keyed by registry-name
/// prefix.
fn parameter_class(name: &str) -> &'static str {
    if name == "token_embed" {
        "embeddings"
    } else if name.starts_with("instr_gru.") || name.starts_with("policy_gru.") {
        "gru"
    } else if name.starts_with("obs.") {
        "mlp"
    } else if name.starts_with("obs_proj.")
        || name.starts_with("tok_proj.")
        || name.starts_with("instr_proj.")
        || name == "attn_query"
    {
        "projections"
    } else if name == "action_embed" {
        "action table"
    } else {
        "heads"
    }
}

#[derive(Clone, Debug)]
pub struct ClassReport {
    pub class: String,
    pub max_rel_err: Real,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub instances: usize,
    pub tolerance: Real,
    pub classes: Vec<ClassReport>,
    pub passed: bool,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "auxiliary-loss gradient check over {} random instances (tolerance {:e}):",
            self.instances, self.tolerance
        )?;
        for c in &self.classes {
            writeln!(
                f,
                "  {:<12} max rel err {:.3e}  ({} coordinates)",
                c.class, c.max_rel_err, c.coords_checked
            )?;
        }
        write!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// The auxiliary loss over a batch of (episode, instruction) pairs as a
/// plain function of the parameters, with an optional deliberately broken
/// backward rule for the sensitivity fixture.
fn aux_loss_and_grads(
    params: &crate::encoders::AgentParams,
    enc: &EncoderConfig,
    vocab: &Vocabulary,
    episodes: &[crate::gridworld::Episode],
    tau: Real,
    corruption: Option<(OpKind, Real)>,
    want_grads: bool,
) -> Result<(Real, Option<Vec<(String, Option<Tensor>)>>)> {
    let mut tape = Tape::new();
    if let Some((kind, factor)) = corruption {
        tape.set_gradient_corruption(kind, factor);
    }
    let nodes = crate::encoders::AgentNodes::insert(&mut tape, params)?;
    let mut pairs = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let instr = crate::encoders::encode_instruction(&mut tape, &nodes, enc, vocab, &ep.instruction.tokens)?;
        let mut rows = Vec::with_capacity(ep.steps.len());
        for step in &ep.steps {
            let oe = crate::encoders::encode_observation(&mut tape, &nodes, enc, &step.obs, step.action.index())?;
            rows.push(oe.x);
        }
        let x = tape.stack_rows(&rows)?;
        let x_global = aggregate_global_node(&mut tape, &nodes, enc, x)?;
        pairs.push(crate::encoders::LocalGlobalReps {
            x,
            v: instr.v,
            x_global,
            v_global: instr.v_global,
        });
    }
    let loss = contrastive_loss(&mut tape, &pairs, tau)?;
    let value = tape.value(loss).scalar_value()?;
    if !want_grads {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let named = nodes
        .named()
        .iter()
        .map(|(name, node)| (name.clone(), grads.grad(*node).cloned()))
        .collect();
    Ok((value, Some(named)))
}

fn aggregate_global_node(
    tape: &mut Tape,
    nodes: &crate::encoders::AgentNodes,
    enc: &EncoderConfig,
    x: crate::Node,
) -> Result<crate::Node> {
    crate::encoders::aggregate_global(tape, nodes, enc, x)
}

/// Build a small random batch: real missions, random walks, truncated to a
/// handful of steps each.
fn gradcheck_instance(
    rng: &mut ChaCha8Rng,
    episodes: usize,
    max_steps: usize,
) -> Result<Vec<crate::gridworld::Episode>> {
    let gen = GenParams {
        room_size: 3,
        view_size: 5,
        distractors: 1,
        ..GenParams::default()
    };
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut world, _spec, instruction) =
            generate(Level::GoToObj, rng.gen(), Split::Train, &gen)?;
        let n = rng.gen_range(1..=max_steps);
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            if world.is_done() {
                break;
            }
            let obs = world.observe();
            let action = Action::from_index(rng.gen_range(0..Action::COUNT))?;
            let outcome = world.step(action)?;
            steps.push(crate::gridworld::EpisodeStep {
                obs,
                action,
                reward: outcome.reward,
                done: outcome.done,
            });
        }
        out.push(crate::gridworld::Episode {
            steps,
            instruction,
            success: true,
            total_reward: 1.0,
            subtask_completion_steps: Vec::new(),
        });
    }
    Ok(out)
}

/// Compare analytic gradients of the auxiliary loss against central finite
/// differences on random instances, reporting the worst relative error per
/// parameter class. `corruption` deliberately breaks one backward rule so
/// tests can prove the check would catch a wrong gradient.
pub fn run_gradcheck(
    seed: u64,
    instances: usize,
    corruption: Option<(OpKind, Real)>,
) -> Result<GradcheckReport> {
    const TOLERANCE: Real = 1e-4;
    const EPS: Real = 1e-5;
    const COORDS_PER_TENSOR: usize = 4;
    let enc = EncoderConfig {
        embed_dim: 6,
        repr_dim: 8,
        gru_hidden: 6,
        obs_hidden: 10,
        policy_hidden: 4,
        view_size: 5,
        max_instruction_len: 16,
        ..EncoderConfig::default()
    };
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_err: std::collections::BTreeMap<&'static str, (Real, usize)> =
        std::collections::BTreeMap::new();
    for class in ["embeddings", "gru", "mlp", "projections", "action table"] {
        class_err.insert(class, (0.0, 0));
    }

    for _ in 0..instances {
        let params = crate::encoders::AgentParams::init(&enc, vocab.len(), &mut rng)?;
        let episodes = gradcheck_instance(&mut rng, 3, 5)?;
        let tau = [0.25, 1.0, 2.0][rng.gen_range(0..3)];
        let (_, grads) =
            aux_loss_and_grads(&params, &enc, &vocab, &episodes, tau, corruption, true)?;
        let grads = grads.expect("gradients requested");
        let relevant: BTreeSet<String> = params.aux_relevant_names(&enc).into_iter().collect();

        for (name, grad) in &grads {
            if !relevant.contains(name) {
                continue;
            }
            let class = parameter_class(name);
            let slot = params
                .named()
                .iter()
                .position(|(n, _)| n == name)
                .expect("registry name");
            let numel = params.named()[slot].1.numel();
            let entry = class_err.entry(class).or_insert((0.0, 0));
            for _ in 0..COORDS_PER_TENSOR.min(numel) {
                let coord = rng.gen_range(0..numel);
                let analytic = grad
                    .as_ref()
                    .map(|g| g.data()[coord])
                    .unwrap_or(0.0);
                let probe = |delta: Real| -> Result<Real> {
                    let mut p = params.clone();
                    p.named_mut()[slot].1.data_mut()[coord] += delta;
                    // The forward value is corruption-free by construction:
                    // corruption only bends backward rules.
                    aux_loss_and_grads(&p, &enc, &vocab, &episodes, tau, None, false)
                        .map(|(v, _)| v)
                };
                let fd = (probe(EPS)? - probe(-EPS)?) / (2.0 * EPS);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                if rel > entry.0 {
                    entry.0 = rel;
                }
                entry.1 += 1;
            }
        }
    }

    let classes: Vec<ClassReport> = class_err
        .into_iter()
        .map(|(class, (max_rel_err, coords_checked))| ClassReport {
            class: class.to_string(),
            max_rel_err,
            coords_checked,
        })
        .collect();
    let passed = classes
        .iter()
        .all(|c| c.coords_checked > 0 && c.max_rel_err < TOLERANCE);
    Ok(GradcheckReport {
        instances,
        tolerance: TOLERANCE,
        classes,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Oracle comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct OracleCheckReport {
    pub instances: usize,
    pub tolerance: Real,
    pub max_abs_diff: Real,
    pub passed: bool,
}

impl fmt::Display for OracleCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pipelined vs naive contrastive loss over {} random instances: max |diff| {:.3e} (tolerance {:e}) {}",
            self.instances,
            self.max_abs_diff,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn random_unit_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Compare the graph-built contrastive loss against the independent
/// naive-loop implementation on random representation batches.
pub fn run_oracle_check(seed: u64, instances: usize) -> Result<OracleCheckReport> {
    const TOLERANCE: Real = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_diff = 0.0_f64;
    for _ in 0..instances {
        let n_pairs = rng.gen_range(2..=5);
        let d = 8;
        let tau = [0.07, 0.5, 1.0, 3.0][rng.gen_range(0..4)];
        let reps: Vec<oracle::Reps> = (0..n_pairs)
            .map(|_| oracle::Reps {
                x: random_unit_rows(rng.gen_range(1..=5), d, &mut rng),
                v: random_unit_rows(rng.gen_range(1..=7), d, &mut rng),
                x_global: random_unit_rows(1, d, &mut rng).remove(0),
                v_global: random_unit_rows(1, d, &mut rng).remove(0),
            })
            .collect();

        let expected = oracle::contrastive_loss(&reps, tau);

        let mut tape = Tape::new();
        let pairs: Vec<crate::encoders::LocalGlobalReps> = reps
            .iter()
            .map(|r| {
                let n = r.x.len();
                let m = r.v.len();
                crate::encoders::LocalGlobalReps {
                    x: tape.constant(Tensor::matrix(n, d, r.x.concat()).unwrap()).unwrap(),
                    v: tape.constant(Tensor::matrix(m, d, r.v.concat()).unwrap()).unwrap(),
                    x_global: tape.constant(Tensor::vector(r.x_global.clone())).unwrap(),
                    v_global: tape.constant(Tensor::vector(r.v_global.clone())).unwrap(),
                }
            })
            .collect();
        let loss = contrastive_loss(&mut tape, &pairs, tau)?;
        let got = tape.value(loss).scalar_value()?;
        max_abs_diff = max_abs_diff.max((got - expected).abs());
    }
    Ok(OracleCheckReport {
        instances,
        tolerance: TOLERANCE,
        max_abs_diff,
        passed: max_abs_diff <= TOLERANCE,
    })
}
