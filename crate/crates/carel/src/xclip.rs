//! Multi-grained episode–instruction alignment and the symmetric
//! contrastive auxiliary loss.
//!
//! Four similarity granularities are computed between an episode's local
//! observation-action representations X (n×d) / global x̃ and an
//! instruction's local token representations V (m×d) / global ṽ:
//!
//! ```text
//! S_E-I = x̃ᵀṽ        (scalar)     S_E-W = (V x̃)ᵀ     (1×m)
//! S_O-I = X ṽ        (n×1)        S_O-W = X Vᵀ       (n×m)
//! ```
//!
//! Vector- and matrix-valued scores are reduced with attention over the
//! similarity values themselves (AOSM): `aosm(v, τ) = softmax(v/τ)ᵀ v`. The
//! word–observation matrix is reduced bi-level — AOSM per row and per
//! column, then AOSM over each result — and the final pair score is the
//! mean of the four granularity scores. Over a batch of N successful
//! episode–instruction pairs the auxiliary loss is a symmetric InfoNCE over
//! the N×N score matrix.
//!
//! A deliberately naive loop-based reimplementation of the whole pipeline
//! lives in [`oracle`] for cross-checking.

use crate::encoders::LocalGlobalReps;
use crate::error::{Error, Result};
use crate::{Node, Real, Tape};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Knobs of the auxiliary objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarelConfig {
    /// Weight λ_C of the auxiliary loss in the total loss.
    pub lambda_c: Real,
    /// Temperature τ shared by every AOSM application and the contrastive
    /// softmax.
    pub tau: Real,
    /// Fraction of the maximum reward an episode must reach to count as
    /// successful for the auxiliary batch.
    pub success_fraction: Real,
    /// Cap on the number of pairs per auxiliary update (FIFO buffer size).
    pub aux_batch_max: usize,
    /// Mirrors the encoder normalization flag; recorded here because the
    /// similarity bounds depend on it.
    pub normalize_reps: bool,
}

impl Default for CarelConfig {
    fn default() -> Self {
        CarelConfig {
            lambda_c: 0.01,
            tau: 1.0,
            success_fraction: 0.5,
            aux_batch_max: 32,
            normalize_reps: true,
        }
    }
}

impl CarelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::parameter(format!(
                "lambda_c {} must be finite and ≥ 0",
                self.lambda_c
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::parameter(format!(
                "tau {} must be finite and > 0",
                self.tau
            )));
        }
        if !(self.success_fraction > 0.0 && self.success_fraction <= 1.0) {
            return Err(Error::parameter(format!(
                "success_fraction {} outside (0, 1]",
                self.success_fraction
            )));
        }
        if self.aux_batch_max == 0 {
            return Err(Error::parameter("aux_batch_max must be ≥ 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Similarity pipeline (on tape)
// ---------------------------------------------------------------------------

/// Raw granular similarity scores of one (episode, instruction) pair, plus
/// the aggregates once [`aggregate_scores`] has filled them.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityScores {
    /// Episode–instruction score x̃ᵀṽ (scalar).
    pub s_ei: Node,
    /// Episode–word scores (V x̃)ᵀ, shape 1×m.
    pub s_ew: Node,
    /// Observation–instruction scores X ṽ, shape n×1.
    pub s_oi: Node,
    /// Observation–word scores X Vᵀ, shape n×m.
    pub s_ow: Node,
    pub aggregated: Option<Aggregates>,
}

/// AOSM-reduced scores and the final pair score.
#[derive(Clone, Copy, Debug)]
pub struct Aggregates {
    /// s'_ew: AOSM over the episode–word row (scalar).
    pub s_ew: Node,
    /// s'_oi: AOSM over the observation–instruction column (scalar).
    pub s_oi: Node,
    /// S'_instr: per-observation AOSM over each row of S_O-W (length n).
    pub s_instr: Node,
    /// S'_ep: per-word AOSM over each column of S_O-W (length m).
    pub s_ep: Node,
    /// s'_ow: bi-level reduction (aosm(S'_ep) + aosm(S'_instr)) / 2.
    pub s_ow: Node,
    /// Mean of the four granularity scores.
    pub final_score: Node,
}

/// Attention-over-similarity reduction of a score vector:
/// `softmax(v/τ)ᵀ · v`.
pub fn aosm_aggregate(tape: &mut Tape, v: Node, tau: Real) -> Result<Node> {
    tape.aosm(v, tau)
}

/// The four raw similarity granularities between episode-side X, x̃ and
/// instruction-side V, ṽ.
pub fn granular_scores(
    tape: &mut Tape,
    ep: &LocalGlobalReps,
    instr: &LocalGlobalReps,
) -> Result<SimilarityScores> {
    let x_shape = tape.value(ep.x).shape().to_vec();
    let v_shape = tape.value(instr.v).shape().to_vec();
    if x_shape.len() != 2 || v_shape.len() != 2 || x_shape[1] != v_shape[1] {
        return Err(Error::dimension(format!(
            "granular_scores: X {x_shape:?} and V {v_shape:?} must share d"
        )));
    }
    let (n, m) = (x_shape[0], v_shape[0]);

    let s_ei = tape.dot(ep.x_global, instr.v_global)?;
    let vx = tape.matvec(instr.v, ep.x_global)?;
    let s_ew = tape.reshape(vx, vec![1, m])?;
    let xv = tape.matvec(ep.x, instr.v_global)?;
    let s_oi = tape.reshape(xv, vec![n, 1])?;
    let s_ow = tape.matmul_nt(ep.x, instr.v)?;
    Ok(SimilarityScores {
        s_ei,
        s_ew,
        s_oi,
        s_ow,
        aggregated: None,
    })
}

/// AOSM-reduce the raw scores into the final pair score.
pub fn aggregate_scores(
    tape: &mut Tape,
    scores: SimilarityScores,
    tau: Real,
) -> Result<SimilarityScores> {
    let m = tape.value(scores.s_ew).cols();
    let n = tape.value(scores.s_oi).rows();

    let ew_vec = tape.reshape(scores.s_ew, vec![m])?;
    let s_ew = tape.aosm(ew_vec, tau)?;
    let oi_vec = tape.reshape(scores.s_oi, vec![n])?;
    let s_oi = tape.aosm(oi_vec, tau)?;

    let s_instr = tape.aosm_rows(scores.s_ow, tau)?;
    let s_ep = tape.aosm_cols(scores.s_ow, tau)?;
    let ep_red = tape.aosm(s_ep, tau)?;
    let instr_red = tape.aosm(s_instr, tau)?;
    let ow_sum = tape.add(ep_red, instr_red)?;
    let s_ow = tape.scale(ow_sum, 0.5)?;

    let a = tape.add(scores.s_ei, s_ew)?;
    let b = tape.add(a, s_oi)?;
    let c = tape.add(b, s_ow)?;
    let final_score = tape.scale(c, 0.25)?;

    Ok(SimilarityScores {
        aggregated: Some(Aggregates {
            s_ew,
            s_oi,
            s_instr,
            s_ep,
            s_ow,
            final_score,
        }),
        ..scores
    })
}

/// Final similarity score of one (episode, instruction) pairing.
pub fn pair_score(
    tape: &mut Tape,
    ep: &LocalGlobalReps,
    instr: &LocalGlobalReps,
    tau: Real,
) -> Result<Node> {
    let raw = granular_scores(tape, ep, instr)?;
    let full = aggregate_scores(tape, raw, tau)?;
    Ok(full.aggregated.expect("just aggregated").final_score)
}

/// Symmetric contrastive loss over an explicit N×N score matrix
/// (`scores[i][j]` = s(episode i, instruction j)):
///
/// ```text
/// L = −(1/N) Σ_i [ log softmax_row_i(i) + log softmax_col_i(i) ]
/// ```
pub fn contrastive_from_scores(
    tape: &mut Tape,
    scores: &[Vec<Node>],
    tau: Real,
) -> Result<Node> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::contract("contrastive loss over zero pairs"));
    }
    if scores.iter().any(|row| row.len() != n) {
        return Err(Error::dimension("contrastive score matrix must be square"));
    }
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        let row = tape.stack_scalars(&scores[i])?;
        let row_ls = tape.log_softmax_temp(row, tau)?;
        terms.push(tape.elem(row_ls, i)?);

        let column: Vec<Node> = (0..n).map(|j| scores[j][i]).collect();
        let col = tape.stack_scalars(&column)?;
        let col_ls = tape.log_softmax_temp(col, tau)?;
        terms.push(tape.elem(col_ls, i)?);
    }
    let stacked = tape.stack_scalars(&terms)?;
    let total = tape.sum_all(stacked)?;
    tape.scale(total, -1.0 / n as Real)
}

/// The auxiliary loss over N successful episode–instruction pairs: all N×N
/// cross-pair scores (episode i's X, x̃ against instruction j's V, ṽ)
/// through the full granular + AOSM pipeline, then the symmetric
/// contrastive objective.
pub fn contrastive_loss(
    tape: &mut Tape,
    pairs: &[LocalGlobalReps],
    tau: Real,
) -> Result<Node> {
    if pairs.is_empty() {
        return Err(Error::contract("contrastive loss over zero pairs"));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for ep in pairs {
        let mut row = Vec::with_capacity(pairs.len());
        for instr in pairs {
            row.push(pair_score(tape, ep, instr, tau)?);
        }
        scores.push(row);
    }
    contrastive_from_scores(tape, &scores, tau)
}

/// Total objective: `rl_loss + λ_C · aux_loss`.
pub fn total_loss(tape: &mut Tape, rl_loss: Node, aux_loss: Node, lambda_c: Real) -> Result<Node> {
    let weighted = tape.scale(aux_loss, lambda_c)?;
    tape.add(rl_loss, weighted)
}

// ---------------------------------------------------------------------------
// Independent naive-loop oracle
// ---------------------------------------------------------------------------

/// Loop-based reimplementation of the similarity pipeline and loss, written
/// against the formulas directly (no shared kernels). Used to cross-check
/// the tape implementation.
pub mod oracle {
    /// One pair's raw representations.
    #[derive(Clone, Debug)]
    pub struct Reps {
        pub x: Vec<Vec<f64>>,
        pub v: Vec<Vec<f64>>,
        pub x_global: Vec<f64>,
        pub v_global: Vec<f64>,
    }

    fn softmax_weights(v: &[f64], tau: f64) -> Vec<f64> {
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|&a| ((a - hi) / tau).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }

    pub fn aosm(v: &[f64], tau: f64) -> f64 {
        let w = softmax_weights(v, tau);
        w.iter().zip(v).map(|(wi, vi)| wi * vi).sum()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Raw granular scores: (s_ei, s_ew[m], s_oi[n], s_ow[n][m]).
    #[allow(clippy::type_complexity)]
    pub fn granular(ep: &Reps, instr: &Reps) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let s_ei = dot(&ep.x_global, &instr.v_global);
        let s_ew: Vec<f64> = instr.v.iter().map(|vj| dot(vj, &ep.x_global)).collect();
        let s_oi: Vec<f64> = ep.x.iter().map(|xi| dot(xi, &instr.v_global)).collect();
        let s_ow: Vec<Vec<f64>> = ep
            .x
            .iter()
            .map(|xi| instr.v.iter().map(|vj| dot(xi, vj)).collect())
            .collect();
        (s_ei, s_ew, s_oi, s_ow)
    }

    /// Final pair score through the bi-level AOSM reduction.
    pub fn final_score(ep: &Reps, instr: &Reps, tau: f64) -> f64 {
        let (s_ei, s_ew, s_oi, s_ow) = granular(ep, instr);
        let s_ew_agg = aosm(&s_ew, tau);
        let s_oi_agg = aosm(&s_oi, tau);
        let s_instr: Vec<f64> = s_ow.iter().map(|row| aosm(row, tau)).collect();
        let m = s_ow[0].len();
        let s_ep: Vec<f64> = (0..m)
            .map(|j| {
                let col: Vec<f64> = s_ow.iter().map(|row| row[j]).collect();
                aosm(&col, tau)
            })
            .collect();
        let s_ow_agg = 0.5 * (aosm(&s_ep, tau) + aosm(&s_instr, tau));
        0.25 * (s_ei + s_ew_agg + s_oi_agg + s_ow_agg)
    }

    pub fn contrastive_loss(pairs: &[Reps], tau: f64) -> f64 {
        let n = pairs.len();
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                s[i][j] = final_score(&pairs[i], &pairs[j], tau);
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| s[i][j]).collect();
            let col: Vec<f64> = (0..n).map(|j| s[j][i]).collect();
            for v in [row, col] {
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = v.iter().map(|&a| ((a - hi) / tau).exp()).sum();
                total += (s[i][i] - hi) / tau - z.ln();
            }
        }
        -total / n as f64
    }
}
