//! Acceptance gate: one test per criterion, each printing a single
//! `criterion N ...: PASS/FAIL` line (visible with `--nocapture`).
//!
//! Criterion 7 is an hours-scale training study and therefore `#[ignore]`d;
//! run it explicitly with
//! `cargo test --release --test acceptance -- --ignored --nocapture`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use carel::encoders::LocalGlobalReps;
use carel::gridworld::{
    generate, is_holdout, oracle_solve, render_tokens, tokenize, word_id, GenParams, Level, Split,
    MASK_ID,
};
use carel::harness::{
    load_checkpoint, run_eval, run_gradcheck, run_oracle_check, run_sweep, run_train, EvalPolicy,
    EvalRequest, RunConfig,
};
use carel::tracker::{
    apply_mask, masking_probability, spike_triggered, split_instruction, ScoreSource, Tracker,
    TrackerConfig,
};
use carel::xclip::{aosm_aggregate, contrastive_loss};
use carel::{Tape, Tensor};

fn verdict(criterion: &str, passed: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let report = run_gradcheck(0, 20, None).unwrap();
    let elapsed = t0.elapsed();
    let worst = report
        .classes
        .iter()
        .map(|c| c.max_rel_err)
        .fold(0.0_f64, f64::max);
    let all_classes_checked = report.classes.len() == 5
        && report.classes.iter().all(|c| c.coords_checked > 0);
    let in_time = elapsed.as_secs_f64() < 60.0;
    verdict(
        "1 (gradient suite)",
        report.passed && all_classes_checked && in_time,
        &format!(
            "20 instances, 5 parameter classes, worst rel err {worst:.3e} (tol 1e-4), {:.1}s (limit 60s)",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_oracle_equivalence() {
    let t0 = Instant::now();
    let report = run_oracle_check(0, 100).unwrap();
    let elapsed = t0.elapsed();
    let in_time = elapsed.as_secs_f64() < 10.0;
    verdict(
        "2 (loss oracle equivalence)",
        report.passed && in_time,
        &format!(
            "100 instances, max |pipelined - naive| = {:.3e} (tol 1e-10), {:.2}s (limit 10s)",
            report.max_abs_diff,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Analytic anchors
// ---------------------------------------------------------------------------

fn random_pair(tape: &mut Tape, rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize) -> LocalGlobalReps {
    let mut mat = |rows: usize| {
        let data: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, d, data).unwrap()
    };
    let x = tape.constant(mat(n)).unwrap();
    let v = tape.constant(mat(m)).unwrap();
    let xg = tape
        .constant(Tensor::vector(
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        ))
        .unwrap();
    let vg = tape
        .constant(Tensor::vector(
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        ))
        .unwrap();
    LocalGlobalReps {
        x,
        v,
        x_global: xg,
        v_global: vg,
    }
}

#[test]
fn criterion_3_analytic_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // (a) One pair: the symmetric cross-entropy of a 1x1 softmax is exactly 0.
    let mut tape = Tape::new();
    let pair = random_pair(&mut tape, &mut rng, 4, 5, 8);
    let loss = contrastive_loss(&mut tape, &[pair], 1.0).unwrap();
    let single = tape.value(loss).scalar_value().unwrap();
    let single_ok = single == 0.0;

    // (b) Identical pairs make every score equal, so both softmaxes are
    // uniform and the loss is exactly 2 ln N.
    let mut uniform_err = 0.0_f64;
    for &n_pairs in &[2usize, 4, 8] {
        let mut tape = Tape::new();
        let pair = random_pair(&mut tape, &mut rng, 3, 4, 8);
        let pairs = vec![pair; n_pairs];
        let loss = contrastive_loss(&mut tape, &pairs, 1.0).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        uniform_err = uniform_err.max((got - 2.0 * (n_pairs as f64).ln()).abs());
    }
    let uniform_ok = uniform_err < 1e-12;

    // (c) Aggregation stays inside [min, max] and commutes with constant
    // shifts, over 10,000 random vectors.
    let mut bound_violation = 0.0_f64;
    let mut shift_err = 0.0_f64;
    for _ in 0..100 {
        let mut tape = Tape::new();
        for _ in 0..100 {
            let len = rng.gen_range(1..=9);
            let tau = 10f64.powf(rng.gen_range(-1.5..1.5));
            let vals: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let shift = rng.gen_range(-2.0..2.0);
            let node = tape.constant(Tensor::vector(vals.clone())).unwrap();
            let agg = aosm_aggregate(&mut tape, node, tau).unwrap();
            let got = tape.value(agg).scalar_value().unwrap();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            bound_violation = bound_violation.max(lo - got).max(got - hi);

            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let node_s = tape.constant(Tensor::vector(shifted)).unwrap();
            let agg_s = aosm_aggregate(&mut tape, node_s, tau).unwrap();
            let got_s = tape.value(agg_s).scalar_value().unwrap();
            shift_err = shift_err.max((got_s - (got + shift)).abs());
        }
    }
    let aosm_ok = bound_violation <= 1e-12 && shift_err <= 1e-9;

    // (d) Temperature limits: near-argmax at 1e-4, near-mean at 1e6.
    let mut limit_err = 0.0_f64;
    for _ in 0..200 {
        let len = rng.gen_range(2..=9);
        let vals: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let node = tape.constant(Tensor::vector(vals.clone())).unwrap();
        let cold = aosm_aggregate(&mut tape, node, 1e-4).unwrap();
        let hot = aosm_aggregate(&mut tape, node, 1e6).unwrap();
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.iter().sum::<f64>() / len as f64;
        limit_err = limit_err.max((tape.value(cold).scalar_value().unwrap() - hi).abs());
        limit_err = limit_err.max((tape.value(hot).scalar_value().unwrap() - mean).abs());
    }
    let limits_ok = limit_err < 1e-3;

    verdict(
        "3 (analytic anchors)",
        single_ok && uniform_ok && aosm_ok && limits_ok,
        &format!(
            "single-pair loss {single:e}; uniform 2lnN err {uniform_err:.2e} (tol 1e-12); \
             aosm bound slack {bound_violation:.2e}, shift err {shift_err:.2e} over 10,000 vectors; \
             temperature-limit err {limit_err:.2e} (tol 1e-3)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Tracker correctness on scripted episodes
// ---------------------------------------------------------------------------

fn ids(text: &str) -> Vec<usize> {
    tokenize(text)
        .iter()
        .map(|w| word_id(w).unwrap())
        .collect()
}

/// Drive the tracker's episode-mean representation to an exact target each
/// step: feeding x_t = t·target − (t−1)·prev makes the running mean equal
/// `target` exactly.
struct MeanDriver {
    prev: Vec<f64>,
    t: usize,
}

impl MeanDriver {
    fn new(d: usize) -> Self {
        MeanDriver {
            prev: vec![0.0; d],
            t: 0,
        }
    }

    fn step_toward(&mut self, target: &[f64]) -> Vec<f64> {
        self.t += 1;
        let x = target
            .iter()
            .zip(&self.prev)
            .map(|(w, p)| self.t as f64 * w - (self.t as f64 - 1.0) * p)
            .collect();
        self.prev = target.to_vec();
        x
    }
}

#[test]
fn criterion_4_tracker_correctness() {
    const K: f64 = 2.0;
    const WARMUP: usize = 3;
    let cfg = TrackerConfig {
        enabled: true,
        k: K,
        warmup_steps: WARMUP,
        max_frames: 100,
        score_source: ScoreSource::EpisodeWord,
        positive_mean_guard: true,
        normalize_global: false,
    };
    // Far beyond the schedule horizon tanh saturates to exactly 1.0, so a
    // triggered spike always masks.
    let frame = 100 * cfg.max_frames;

    let texts = [
        "go to the red ball and go to a blue key",
        "go to a green box, then open the yellow door",
        "Go to the red box and go to a green ball, then go to the blue key.",
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact_hits = 0usize;
    let mut episodes_ok = 0usize;
    const EPISODES: usize = 50;

    for ep in 0..EPISODES {
        let tokens = ids(texts[ep % texts.len()]);
        let m = tokens.len();
        let subs = split_instruction(&tokens).unwrap();
        let n_subs = subs.len();
        let mut tracker = Tracker::new(cfg.clone(), &tokens, Tensor::eye(m)).unwrap();
        let mut driver = MeanDriver::new(m);
        let baseline = 0.05 + rng.gen::<f64>() * 0.1;

        // Per-step plan: quiet baseline steps, two kinds of temptation that
        // must NOT fire, and one engineered spike per subtask.
        #[derive(Clone, Copy, PartialEq)]
        enum Plan {
            Quiet,
            /// Jump the acceptable subtask's own span before its warmup.
            EarlyJump,
            /// Jump a later (dependency-blocked) subtask's span.
            LaterJump,
            Spike,
        }
        let mut plan = Vec::new();
        for j in 0..n_subs {
            let quiet = WARMUP + rng.gen_range(1..4);
            for q in 0..quiet {
                // Both temptations only while warmup is still unmet.
                if q == 1 && rng.gen_bool(0.5) {
                    plan.push((j, Plan::EarlyJump));
                } else if q == 2 && j + 1 < n_subs && rng.gen_bool(0.5) {
                    plan.push((j, Plan::LaterJump));
                } else {
                    plan.push((j, Plan::Quiet));
                }
            }
            plan.push((j, Plan::Spike));
        }
        for _ in 0..3 {
            plan.push((n_subs, Plan::Quiet)); // trailing steps, all masked
        }

        // Mirror of each subtask's pushed score history, to place the spike
        // safely above k x running mean.
        let mut hist: Vec<Vec<f64>> = vec![Vec::new(); n_subs];
        let mut events = Vec::new();
        let mut expected_steps = Vec::new();
        let mut fired_wrong_step = false;

        for (t, &(j, what)) in plan.iter().enumerate() {
            let step = t + 1;
            let mut target = vec![baseline; m];
            let mut scored_value = baseline;
            match what {
                Plan::Quiet => {}
                Plan::EarlyJump => {
                    let (s, e) = subs[j].span;
                    for v in &mut target[s..e] {
                        *v = baseline * 8.0;
                    }
                    scored_value = baseline * 8.0;
                }
                Plan::LaterJump => {
                    let (s, e) = subs[j + 1].span;
                    for v in &mut target[s..e] {
                        *v = baseline * 8.0;
                    }
                }
                Plan::Spike => {
                    let mean = hist[j].iter().sum::<f64>() / hist[j].len() as f64;
                    let spike = K * mean * 1.3;
                    let (s, e) = subs[j].span;
                    for v in &mut target[s..e] {
                        *v = spike;
                    }
                    scored_value = spike;
                    expected_steps.push(step);
                }
            }
            if j < n_subs {
                hist[j].push(scored_value);
            }
            let x_t = driver.step_toward(&target);
            if let Some(event) = tracker.step(&x_t, frame, &mut rng).unwrap() {
                if what != Plan::Spike || event.subtask != j || event.step != step {
                    fired_wrong_step = true;
                }
                events.push(event);
            } else if what == Plan::Spike {
                fired_wrong_step = true;
            }
        }

        let all_masked = tracker.masked_tokens().iter().all(|&t| t == MASK_ID);
        let ordered = events
            .iter()
            .enumerate()
            .all(|(i, e)| e.subtask == i && e.probability == 1.0);
        let warmup_respected = (0..events.len()).all(|i| {
            let acceptable_since = if i == 0 { 0 } else { events[i - 1].step };
            events[i].step - acceptable_since > WARMUP
        });
        if !fired_wrong_step && events.len() == n_subs {
            exact_hits += 1;
        }
        if !fired_wrong_step && events.len() == n_subs && all_masked && ordered && warmup_respected
        {
            episodes_ok += 1;
        }
    }

    // The worked example: masking the first completed subtask reproduces the
    // documented six-<mask> instruction.
    let mut tokens = ids("Go to the red box and go to a green ball, then go to the blue key.");
    let subs = split_instruction(&tokens).unwrap();
    apply_mask(&mut tokens, &subs[0]).unwrap();
    let rendered = render_tokens(&tokens);
    let worked_ok = rendered
        == "<mask> <mask> <mask> <mask> <mask> <mask> go to a green ball, then go to the blue key.";

    verdict(
        "4 (tracker correctness)",
        exact_hits == EPISODES && episodes_ok == EPISODES && worked_ok,
        &format!(
            "{exact_hits}/{EPISODES} scripted episodes masked at exactly the engineered steps \
             ({episodes_ok} clean on order/warmup/coverage); worked example renders {rendered:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Schedule and threshold arithmetic
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_schedule_and_threshold() {
    let schedule_ok = masking_probability(0, 1_000_000) == 0.0
        && (masking_probability(1_000_000, 1_000_000) - 1.0_f64.tanh()).abs() < 1e-12;

    // Exhaustive truth table over a small grid, against an independently
    // stated rule: warmup met, guard satisfied, and score >= k x mean.
    let mut table_ok = true;
    let mut cases = 0usize;
    for history_len in 0..=5usize {
        for &mean in &[-1.0, -0.25, 0.0, 0.25, 1.0] {
            for &ratio in &[-2.0, 0.0, 0.5, 0.99, 1.0, 1.01, 2.0] {
                for &k in &[1.5, 2.0, 3.0] {
                    for &warmup in &[0usize, 3] {
                        for &guard in &[true, false] {
                            let score = k * mean * ratio;
                            let expected = if history_len < warmup {
                                false
                            } else if guard && mean <= 0.0 {
                                false
                            } else {
                                score >= k * mean
                            };
                            let got =
                                spike_triggered(history_len, mean, score, k, warmup, guard);
                            table_ok &= got == expected;
                            cases += 1;
                        }
                    }
                }
            }
        }
    }

    // Hand-pinned rows of the same table.
    let pinned_ok = spike_triggered(3, 1.0, 2.0, 2.0, 3, true)
        && !spike_triggered(3, 1.0, 1.99, 2.0, 3, true)
        && !spike_triggered(2, 1.0, 5.0, 2.0, 3, true)
        && !spike_triggered(5, -0.5, 3.0, 2.0, 3, true)
        && spike_triggered(5, -0.5, -0.9, 2.0, 3, false);

    verdict(
        "5 (schedule and threshold arithmetic)",
        schedule_ok && table_ok && pinned_ok,
        &format!(
            "probability endpoints exact; spike rule matches the reference on {cases} grid cases \
             plus pinned rows"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Environment suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_environment_suite() {
    let t0 = Instant::now();
    let params = GenParams::default();
    let levels = [Level::GoToObj, Level::GoToSeq, Level::OpenDoorsOrder];

    // Determinism: bit-exact regeneration and bit-exact replay.
    let mut deterministic = true;
    for &level in &levels {
        for seed in 0..25u64 {
            let (wa, ma, ia) = generate(level, seed, Split::Train, &params).unwrap();
            let (wb, mb, ib) = generate(level, seed, Split::Train, &params).unwrap();
            deterministic &= wa == wb && ma == mb && ia == ib;
            let actions = oracle_solve(&wa).unwrap();
            let (mut ra, mut rb) = (wa.clone(), wb);
            for &a in &actions {
                let oa = ra.step(a).unwrap();
                let ob = rb.step(a).unwrap();
                deterministic &= oa == ob;
            }
        }
    }

    // Scripted-solver success over 1,000 missions per level.
    let mut solved = 0usize;
    let mut total = 0usize;
    for &level in &levels {
        for seed in 0..1000u64 {
            let (world, _, _) = generate(level, seed, Split::Train, &params).unwrap();
            let actions = oracle_solve(&world).unwrap();
            let mut sim = world;
            let mut reward = 0.0;
            for &a in &actions {
                reward = sim.step(a).unwrap().reward;
            }
            total += 1;
            if sim.succeeded() && reward > 0.0 {
                solved += 1;
            }
        }
    }

    // Split exclusivity over 10,000 generated instructions.
    let mut split_ok = true;
    let mut instructions = 0usize;
    'outer: for &split in &[Split::Train, Split::Holdout] {
        for &level in &levels {
            for seed in 0..1667u64 {
                let (_, mission, _) = generate(level, seed, split, &params).unwrap();
                for sub in &mission.subtasks {
                    let held = is_holdout(sub.color, sub.kind);
                    split_ok &= held == (split == Split::Holdout);
                }
                instructions += 1;
                if instructions == 10_000 {
                    break 'outer;
                }
            }
        }
    }

    let elapsed = t0.elapsed();
    let in_time = elapsed.as_secs_f64() < 120.0;
    verdict(
        "6 (environment suite)",
        deterministic && solved == total && total == 3000 && split_ok && in_time,
        &format!(
            "replay deterministic over 75 missions; scripted solver {solved}/{total}; \
             split exclusivity over {instructions} instructions; {:.1}s (limit 120s)",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Desk-scale directional reproduction (hours-scale; opt-in)
// ---------------------------------------------------------------------------

fn study_base(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("seeds", "0,1,2"),
        ("total-frames", "1000000"),
        ("eval-interval", "25000"),
        ("eval-episodes", "20"),
        ("embed-dim", "16"),
        ("repr-dim", "32"),
        ("gru-hidden", "32"),
        ("obs-hidden", "64"),
        ("policy-hidden", "64"),
        ("timing", "true"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg.output_dir = dir.to_path_buf();
    cfg
}

/// First frame at which the training success rate reaches `target`, if ever.
fn milestone(records: &[carel::trainer::MetricsRecord], target: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.sr_train >= target)
        .map(|r| r.frame)
}

fn median<T: Copy + PartialOrd>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[test]
#[ignore = "hours-scale training study: cargo test --release --test acceptance -- --ignored --nocapture"]
fn criterion_7_desk_scale_directional_reproduction() {
    let root = Path::new("../../target/study");
    fs::create_dir_all(root).unwrap();

    // GoToSeq, 6x6 room, 2 subtasks: baseline vs. auxiliary objective.
    let mut base = study_base(&root.join("gotoseq-baseline"));
    base.apply("level", "gotoseq").unwrap();
    base.apply("carel", "false").unwrap();
    let mut aux = study_base(&root.join("gotoseq-carel"));
    aux.apply("level", "gotoseq").unwrap();
    aux.apply("carel", "true").unwrap();
    let base_runs = run_train(&base).unwrap();
    let aux_runs = run_train(&aux).unwrap();

    let mut base_final: Vec<f64> = base_runs
        .iter()
        .map(|a| a.records.last().unwrap().sr_train)
        .collect();
    let baseline_reaches_90 = median(&mut base_final) >= 0.90;

    let mut base_ms: Vec<u64> = base_runs
        .iter()
        .map(|a| milestone(&a.records, 0.80).unwrap_or(u64::MAX))
        .collect();
    let mut aux_ms: Vec<u64> = aux_runs
        .iter()
        .map(|a| milestone(&a.records, 0.80).unwrap_or(u64::MAX))
        .collect();
    let aux_median = median(&mut aux_ms);
    let base_median = median(&mut base_ms);
    let aux_faster = aux_median < base_median;

    // OpenDoorsOrder, 2 doors: baseline vs. auxiliary objective + tracking,
    // compared on held-out success at budget end.
    let mut door_base = study_base(&root.join("doors-baseline"));
    door_base.apply("level", "opendoorsorder").unwrap();
    door_base.apply("carel", "false").unwrap();
    let mut door_full = study_base(&root.join("doors-carel-tracking"));
    door_full.apply("level", "opendoorsorder").unwrap();
    door_full.apply("carel", "true").unwrap();
    door_full.apply("tracking", "true").unwrap();
    let door_base_runs = run_train(&door_base).unwrap();
    let door_full_runs = run_train(&door_full).unwrap();

    let mut door_base_sr: Vec<f64> = door_base_runs
        .iter()
        .map(|a| a.records.last().unwrap().sr_holdout)
        .collect();
    let mut door_full_sr: Vec<f64> = door_full_runs
        .iter()
        .map(|a| a.records.last().unwrap().sr_holdout)
        .collect();
    let full_median = median(&mut door_full_sr);
    let base_holdout_median = median(&mut door_base_sr);
    let tracking_at_least_matches = full_median >= base_holdout_median;

    // FPS is measured and reported on every record.
    let all_runs = [&base_runs, &aux_runs, &door_base_runs, &door_full_runs];
    let fps_logged = all_runs
        .iter()
        .flat_map(|runs| runs.iter())
        .all(|a| a.records.iter().all(|r| r.fps.is_some()));
    let mut fps_values: Vec<f64> = all_runs
        .iter()
        .flat_map(|runs| runs.iter())
        .filter_map(|a| a.records.last().and_then(|r| r.fps))
        .collect();
    let fps_median = median(&mut fps_values);

    verdict(
        "7 (desk-scale directional reproduction)",
        baseline_reaches_90 && aux_faster && tracking_at_least_matches && fps_logged,
        &format!(
            "gotoseq baseline median final train SR {:.2} (needs >= 0.90); \
             80%-SR milestone median: with-aux {aux_median} vs baseline {base_median} frames; \
             doors holdout SR median: with-aux+tracking {full_median:.2} vs baseline {base_holdout_median:.2}; \
             median fps {fps_median:.0}",
            {
                let mut v: Vec<f64> = base_runs
                    .iter()
                    .map(|a| a.records.last().unwrap().sr_train)
                    .collect();
                median(&mut v)
            }
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Ablation plumbing
// ---------------------------------------------------------------------------

fn tiny_cfg(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("level", "gotoobj"),
        ("seeds", "0"),
        ("total-frames", "24"),
        ("eval-interval", "12"),
        ("eval-episodes", "1"),
        ("timing", "false"),
        ("room-size", "4"),
        ("view-size", "5"),
        ("distractors", "1"),
        ("num-envs", "2"),
        ("rollout-len", "6"),
        ("ppo-epochs", "1"),
        ("embed-dim", "4"),
        ("repr-dim", "6"),
        ("gru-hidden", "5"),
        ("obs-hidden", "8"),
        ("policy-hidden", "7"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn criterion_8_ablation_plumbing() {
    let dir = tempfile::tempdir().unwrap();

    // Weight sweep: three runs under distinct directories.
    let sweep_cfg = tiny_cfg(&dir.path().join("lambda"));
    let sweep = run_sweep(&sweep_cfg, "lambda-c", &["0.1".into(), "0.01".into(), "0.001".into()])
        .unwrap();
    let mut sweep_dirs: Vec<_> = sweep
        .iter()
        .flat_map(|(_, arts)| arts.iter().map(|a| a.run_dir.clone()))
        .collect();
    sweep_dirs.dedup();
    let sweep_ok = sweep.len() == 3
        && sweep_dirs.len() == 3
        && sweep_dirs.iter().all(|d| d.join("metrics.csv").is_file());

    // Action-embedding and score-source switches drive complete runs from
    // plain config edits.
    let mut toggles_ok = true;
    for (key, values) in [
        ("action-embeddings", ["true", "false"].as_slice()),
        ("score-source", ["ew", "ow"].as_slice()),
    ] {
        for value in values {
            let mut cfg = tiny_cfg(&dir.path().join(format!("{key}-{value}")));
            if key == "score-source" {
                cfg.apply("tracking", "true").unwrap();
            }
            cfg.apply(key, value).unwrap();
            let arts = run_train(&cfg).unwrap();
            toggles_ok &= arts.len() == 1 && arts[0].metrics_path.is_file();
        }
    }

    // Zero-weight auxiliary loss leaves the RL trajectory bit-identical to
    // disabling it outright.
    let mut zero = tiny_cfg(&dir.path().join("zero-weight"));
    zero.apply("carel", "true").unwrap();
    zero.apply("lambda-c", "0").unwrap();
    let mut off = tiny_cfg(&dir.path().join("disabled"));
    off.apply("carel", "false").unwrap();
    let zero_arts = run_train(&zero).unwrap();
    let off_arts = run_train(&off).unwrap();
    let metrics_equal = fs::read(&zero_arts[0].metrics_path).unwrap()
        == fs::read(&off_arts[0].metrics_path).unwrap();
    let zero_ckpt = load_checkpoint(&zero_arts[0].checkpoint_path).unwrap();
    let off_ckpt = load_checkpoint(&off_arts[0].checkpoint_path).unwrap();
    let params_equal =
        zero_ckpt.params == off_ckpt.params && zero_ckpt.adam_rl == off_ckpt.adam_rl;

    verdict(
        "8 (ablation plumbing)",
        sweep_ok && toggles_ok && metrics_equal && params_equal,
        &format!(
            "lambda sweep wrote {} distinct run directories; action-embedding and score-source \
             toggles ran from config; zero-weight vs disabled: metrics bytes equal = {metrics_equal}, \
             parameters equal = {params_equal}",
            sweep_dirs.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared sanity: the evaluation protocol invoked by several criteria
// ---------------------------------------------------------------------------

#[test]
fn evaluation_baselines_bracket_the_task() {
    // The scripted solver is a success upper bound and uniform-random play a
    // floor; both run through the same evaluation path as checkpoints.
    let oracle = run_eval(&EvalRequest {
        level: Some(Level::GoToSeq),
        split: Split::Train,
        episodes: 50,
        policy: EvalPolicy::Oracle,
        ..EvalRequest::default()
    })
    .unwrap();
    assert_eq!(oracle.success_rate, 1.0, "oracle should always succeed");

    let random = run_eval(&EvalRequest {
        level: Some(Level::GoToSeq),
        split: Split::Train,
        episodes: 500,
        policy: EvalPolicy::Random,
        ..EvalRequest::default()
    })
    .unwrap();
    assert!(
        random.success_rate < 0.05,
        "random success rate {} should stay under the pinned bound",
        random.success_rate
    );
}
