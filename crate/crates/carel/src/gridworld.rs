//! Deterministic, seedable gridworld POMDP with procedurally generated
//! missions and templated language instructions.
//!
//! A mission is an ordered chain of subtasks ("go to the red ball", "open the
//! blue door"); the world tracks which subtask is currently acceptable and
//! records the ground-truth completion step of each one so that the
//! instruction tracker can be tested against reality. Observations are
//! egocentric, rotation-normalized symbolic views with wall occlusion.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write as IoWrite;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Canonical ordered token list. Ids are indices into this slice and are
/// stable across runs; `<pad>` and `<mask>` sit at fixed positions.
pub const VOCAB: [&str; 19] = [
    "<pad>", "<mask>", "go", "to", "open", "a", "the", "and", "then", ",", ".", "red", "green",
    "blue", "yellow", "box", "ball", "key", "door",
];

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;

/// Reward of an instantaneous success; the step-count penalty only ever
/// shrinks it.
pub const MAX_REWARD: f64 = 1.0;

pub fn word_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

pub fn id_word(id: usize) -> Option<&'static str> {
    VOCAB.get(id).copied()
}

/// Lowercase and split on whitespace, detaching `,` and `.` as their own
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = lower.as_str();
        let mut tail = Vec::new();
        while let Some(stripped) = word.strip_suffix(|c| c == ',' || c == '.') {
            tail.push(word[stripped.len()..].to_string());
            word = stripped;
        }
        if let Some(stripped) = word.strip_prefix(',') {
            out.push(",".to_string());
            word = stripped;
        }
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

// ---------------------------------------------------------------------------
// Core enums
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Color channel id in observations (0 is "no color").
    pub fn obs_id(self) -> u8 {
        match self {
            Color::Red => 1,
            Color::Green => 2,
            Color::Blue => 3,
            Color::Yellow => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Box,
    Ball,
    Key,
    Door,
}

impl Kind {
    /// Kinds that can appear as free-standing objects.
    pub const OBJECTS: [Kind; 3] = [Kind::Box, Kind::Ball, Kind::Key];

    pub fn word(self) -> &'static str {
        match self {
            Kind::Box => "box",
            Kind::Ball => "ball",
            Kind::Key => "key",
            Kind::Door => "door",
        }
    }
}

/// Observation kind-channel ids.
pub mod obs_ids {
    pub const UNSEEN: u8 = 0;
    pub const EMPTY: u8 = 1;
    pub const WALL: u8 = 2;
    pub const DOOR: u8 = 3;
    pub const BOX: u8 = 4;
    pub const BALL: u8 = 5;
    pub const KEY: u8 = 6;

    pub const KIND_CARDINALITY: usize = 7;
    pub const COLOR_CARDINALITY: usize = 5;
    pub const STATE_CARDINALITY: usize = 3;

    pub const STATE_NONE: u8 = 0;
    pub const STATE_CLOSED: u8 = 1;
    pub const STATE_OPEN: u8 = 2;
}

fn kind_obs_id(kind: Kind) -> u8 {
    match kind {
        Kind::Box => obs_ids::BOX,
        Kind::Ball => obs_ids::BALL,
        Kind::Key => obs_ids::KEY,
        Kind::Door => obs_ids::DOOR,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Empty,
    Wall,
    Door { color: Color, open: bool },
    Object { kind: Kind, color: Color },
}

impl Cell {
    /// Can the agent stand here?
    fn walkable(self) -> bool {
        matches!(self, Cell::Empty | Cell::Door { open: true, .. })
    }

    /// Does sight pass through?
    fn see_through(self) -> bool {
        !matches!(self, Cell::Wall | Cell::Door { open: false, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::North, Dir::East, Dir::South, Dir::West];

    pub fn right(self) -> Dir {
        match self {
            Dir::North => Dir::East,
            Dir::East => Dir::South,
            Dir::South => Dir::West,
            Dir::West => Dir::North,
        }
    }

    pub fn left(self) -> Dir {
        self.right().right().right()
    }

    /// (row, col) delta of one step in this direction.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Dir::North => (-1, 0),
            Dir::East => (0, 1),
            Dir::South => (1, 0),
            Dir::West => (0, -1),
        }
    }

    fn index(self) -> usize {
        match self {
            Dir::North => 0,
            Dir::East => 1,
            Dir::South => 2,
            Dir::West => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
    Forward,
    Open,
    Pickup,
    Drop,
    DoneNoop,
}

impl Action {
    pub const COUNT: usize = 7;
    pub const ALL: [Action; 7] = [
        Action::Left,
        Action::Right,
        Action::Forward,
        Action::Open,
        Action::Pickup,
        Action::Drop,
        Action::DoneNoop,
    ];

    pub fn index(self) -> usize {
        Action::ALL.iter().position(|a| *a == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::parameter(format!("action id {i} out of range 0..{}", Action::COUNT)))
    }
}

// ---------------------------------------------------------------------------
// Missions and instructions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    GoToObj,
    GoToSeq,
    OpenDoorsOrder,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::GoToObj, Level::GoToSeq, Level::OpenDoorsOrder];

    pub fn name(self) -> &'static str {
        match self {
            Level::GoToObj => "gotoobj",
            Level::GoToSeq => "gotoseq",
            Level::OpenDoorsOrder => "opendoorsorder",
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Level> {
        match s.to_lowercase().replace('-', "").as_str() {
            "gotoobj" => Ok(Level::GoToObj),
            "gotoseq" => Ok(Level::GoToSeq),
            "opendoorsorder" => Ok(Level::OpenDoorsOrder),
            other => Err(Error::parameter(format!(
                "unsupported level {other:?} (expected gotoobj, gotoseq, or opendoorsorder)"
            ))),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which (color, kind) pairs a generated instruction may reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Holdout,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s.to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::parameter(format!(
                "unknown split {other:?} (expected train or holdout)"
            ))),
        }
    }
}

/// (color, kind) pairs reserved for systematic-generalization evaluation:
/// two object pairs (so multi-target levels stay generable) and two door
/// colors.
pub const HOLDOUT_PAIRS: [(Color, Kind); 4] = [
    (Color::Blue, Kind::Ball),
    (Color::Yellow, Kind::Key),
    (Color::Red, Kind::Door),
    (Color::Green, Kind::Door),
];

pub fn is_holdout(color: Color, kind: Kind) -> bool {
    HOLDOUT_PAIRS.contains(&(color, kind))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verb {
    GoTo,
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub verb: Verb,
    pub color: Color,
    pub kind: Kind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissionSpec {
    pub level: Level,
    pub subtasks: Vec<Subtask>,
    pub room_size: usize,
    pub door_count: usize,
}

/// Tokenized instruction with its subtask structure.
///
/// `conjunction_spans[i]` is the conjunction between subtask `i` and `i+1`
/// and is the one masked together with subtask `i` (matching the masking
/// convention of the worked example: completing the first clause also masks
/// the "and" that follows it).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<usize>,
    pub subtask_spans: Vec<(usize, usize)>,
    pub conjunction_spans: Vec<(usize, usize)>,
}

impl Instruction {
    /// Assemble from per-subtask clauses and the joiners between them.
    pub fn from_clauses(clauses: &[Vec<usize>], joiners: &[Joiner]) -> Result<Instruction> {
        if clauses.is_empty() {
            return Err(Error::parameter("instruction needs at least one clause"));
        }
        if joiners.len() + 1 != clauses.len() {
            return Err(Error::parameter(format!(
                "{} clauses need {} joiners, got {}",
                clauses.len(),
                clauses.len() - 1,
                joiners.len()
            )));
        }
        let mut tokens = Vec::new();
        let mut subtask_spans = Vec::new();
        let mut conjunction_spans = Vec::new();
        for (i, clause) in clauses.iter().enumerate() {
            if clause.is_empty() {
                return Err(Error::parameter("empty instruction clause"));
            }
            let start = tokens.len();
            tokens.extend_from_slice(clause);
            subtask_spans.push((start, tokens.len()));
            if i < joiners.len() {
                let start = tokens.len();
                tokens.extend(joiners[i].token_ids());
                conjunction_spans.push((start, tokens.len()));
            }
        }
        Ok(Instruction {
            tokens,
            subtask_spans,
            conjunction_spans,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Detokenize; `,` and `.` attach to the preceding token.
    pub fn text(&self) -> String {
        render_tokens(&self.tokens)
    }
}

/// Render token ids as text; `,` and `.` attach to the preceding token.
pub fn render_tokens(tokens: &[usize]) -> String {
    let mut out = String::new();
    for &id in tokens {
        let w = id_word(id).unwrap_or("<?>");
        if !out.is_empty() && w != "," && w != "." {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Joiner {
    And,
    CommaThen,
}

impl Joiner {
    pub fn token_ids(self) -> Vec<usize> {
        match self {
            Joiner::And => vec![word_id("and").unwrap()],
            Joiner::CommaThen => vec![word_id(",").unwrap(), word_id("then").unwrap()],
        }
    }
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// Egocentric symbolic view: `view_size × view_size` cells of
/// (kind, color, state) ids, row-major, with the agent at the bottom-center
/// looking "up" the view. Occluded and out-of-world cells are all-zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub view_size: usize,
    /// Flat (kind, color, state) triples, `view_size²·3` entries.
    pub ids: Vec<u8>,
}

impl Observation {
    pub fn triple(&self, vr: usize, vc: usize) -> (u8, u8, u8) {
        let base = (vr * self.view_size + vc) * 3;
        (self.ids[base], self.ids[base + 1], self.ids[base + 2])
    }
}

// ---------------------------------------------------------------------------
// The world
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    pos: (usize, usize),
    facing: Dir,
    carried: Option<(Kind, Color)>,
    step_count: usize,
    max_steps: usize,
    view_size: usize,
    seed: u64,
    mission: MissionSpec,
    progress: usize,
    completion_steps: Vec<usize>,
    done: bool,
    succeeded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

impl GridWorld {
    pub fn mission(&self) -> &MissionSpec {
        &self.mission
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.succeeded
    }

    /// Index of the next unfinished subtask (= number completed so far).
    pub fn progress(&self) -> usize {
        self.progress
    }

    /// Ground-truth step index at which each completed subtask finished.
    pub fn completion_steps(&self) -> &[usize] {
        &self.completion_steps
    }

    /// Seed this world was generated from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Supremum of the terminal reward formula.
    pub fn max_reward(&self) -> f64 {
        MAX_REWARD
    }

    fn cell(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.width + c]
    }

    fn cell_mut(&mut self, r: usize, c: usize) -> &mut Cell {
        &mut self.cells[r * self.width + c]
    }

    fn offset(&self, pos: (usize, usize), dr: isize, dc: isize) -> Option<(usize, usize)> {
        let r = pos.0 as isize + dr;
        let c = pos.1 as isize + dc;
        if r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    fn front_pos(&self) -> Option<(usize, usize)> {
        let (dr, dc) = self.facing.delta();
        self.offset(self.pos, dr, dc)
    }

    fn subtask_satisfied(&self, idx: usize) -> bool {
        let sub = self.mission.subtasks[idx];
        let Some(front) = self.front_pos() else {
            return false;
        };
        match (sub.verb, self.cell(front.0, front.1)) {
            (Verb::GoTo, Cell::Object { kind, color }) => {
                kind == sub.kind && color == sub.color
            }
            (Verb::GoTo, Cell::Door { color, .. }) => sub.kind == Kind::Door && color == sub.color,
            (Verb::Open, Cell::Door { color, open }) => {
                sub.kind == Kind::Door && color == sub.color && open
            }
            _ => false,
        }
    }

    /// Advance one time step. Subtask completion is evaluated once, after
    /// the action's effect, so at most one subtask completes per step.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        self.step_count += 1;

        match action {
            Action::Left => self.facing = self.facing.left(),
            Action::Right => self.facing = self.facing.right(),
            Action::Forward => {
                if let Some(front) = self.front_pos() {
                    if self.cell(front.0, front.1).walkable() {
                        self.pos = front;
                    }
                }
            }
            Action::Open => {
                if let Some(front) = self.front_pos() {
                    if let Cell::Door { color, open } = self.cell(front.0, front.1) {
                        *self.cell_mut(front.0, front.1) = Cell::Door { color, open: !open };
                    }
                }
            }
            Action::Pickup => {
                if let Some(front) = self.front_pos() {
                    if self.carried.is_none() {
                        if let Cell::Object { kind, color } = self.cell(front.0, front.1) {
                            self.carried = Some((kind, color));
                            *self.cell_mut(front.0, front.1) = Cell::Empty;
                        }
                    }
                }
            }
            Action::Drop => {
                if let (Some(front), Some((kind, color))) = (self.front_pos(), self.carried) {
                    if self.cell(front.0, front.1) == Cell::Empty {
                        *self.cell_mut(front.0, front.1) = Cell::Object { kind, color };
                        self.carried = None;
                    }
                }
            }
            Action::DoneNoop => {}
        }

        if self.progress < self.mission.subtasks.len() && self.subtask_satisfied(self.progress) {
            self.completion_steps.push(self.step_count);
            self.progress += 1;
        }

        let all_done = self.progress == self.mission.subtasks.len();
        let (reward, done) = if all_done && self.step_count < self.max_steps {
            self.succeeded = true;
            (
                1.0 - 0.9 * (self.step_count as f64 / self.max_steps as f64),
                true,
            )
        } else if self.step_count >= self.max_steps {
            (0.0, true)
        } else {
            (0.0, false)
        };
        self.done = done;
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            done,
        })
    }

    /// Egocentric, rotation-normalized view with wall occlusion.
    pub fn observe(&self) -> Observation {
        let v = self.view_size;
        let half = v / 2;

        // Raw egocentric grid: ego[vr][vc] = world cell or None (out of
        // bounds). Agent sits at (v-1, half); smaller vr is farther ahead.
        let mut ego: Vec<Option<Cell>> = vec![None; v * v];
        let (fdr, fdc) = self.facing.delta();
        let (rdr, rdc) = self.facing.right().delta();
        for vr in 0..v {
            let f = (v - 1 - vr) as isize;
            for vc in 0..v {
                let l = vc as isize - half as isize;
                let dr = f * fdr + l * rdr;
                let dc = f * fdc + l * rdc;
                ego[vr * v + vc] = self
                    .offset(self.pos, dr, dc)
                    .map(|(r, c)| self.cell(r, c));
            }
        }

        // Visibility sweep from the agent outward; opaque cells are seen but
        // do not pass sight on.
        let mut mask = vec![false; v * v];
        mask[(v - 1) * v + half] = true;
        let see_through = |cell: Option<Cell>| cell.is_some_and(Cell::see_through);
        for vr in (0..v).rev() {
            for vc in 0..v - 1 {
                if !mask[vr * v + vc] || !see_through(ego[vr * v + vc]) {
                    continue;
                }
                mask[vr * v + vc + 1] = true;
                if vr > 0 {
                    mask[(vr - 1) * v + vc + 1] = true;
                    mask[(vr - 1) * v + vc] = true;
                }
            }
            for vc in (1..v).rev() {
                if !mask[vr * v + vc] || !see_through(ego[vr * v + vc]) {
                    continue;
                }
                mask[vr * v + vc - 1] = true;
                if vr > 0 {
                    mask[(vr - 1) * v + vc - 1] = true;
                    mask[(vr - 1) * v + vc] = true;
                }
            }
        }

        let mut ids = Vec::with_capacity(v * v * 3);
        for i in 0..v * v {
            let triple = match (mask[i], ego[i]) {
                (false, _) | (_, None) => (obs_ids::UNSEEN, 0, obs_ids::STATE_NONE),
                (true, Some(Cell::Empty)) => (obs_ids::EMPTY, 0, obs_ids::STATE_NONE),
                (true, Some(Cell::Wall)) => (obs_ids::WALL, 0, obs_ids::STATE_NONE),
                (true, Some(Cell::Door { color, open })) => (
                    obs_ids::DOOR,
                    color.obs_id(),
                    if open {
                        obs_ids::STATE_OPEN
                    } else {
                        obs_ids::STATE_CLOSED
                    },
                ),
                (true, Some(Cell::Object { kind, color })) => {
                    (kind_obs_id(kind), color.obs_id(), obs_ids::STATE_NONE)
                }
            };
            ids.extend([triple.0, triple.1, triple.2]);
        }
        Observation {
            view_size: v,
            ids,
        }
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Level-layout knobs; all are part of the run configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    /// Interior side length; the full grid adds a wall border.
    pub room_size: usize,
    pub view_size: usize,
    /// Number of go-to targets in a GoToSeq mission.
    pub gotoseq_subtasks: usize,
    /// Number of doors in an OpenDoorsOrder mission.
    pub door_count: usize,
    /// Non-target objects placed in go-to levels.
    pub distractors: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            room_size: 6,
            view_size: 7,
            gotoseq_subtasks: 2,
            door_count: 2,
            distractors: 2,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.room_size < 3 || self.room_size > 6 {
            return Err(Error::parameter(format!(
                "room_size {} outside supported 3..=6",
                self.room_size
            )));
        }
        if self.view_size < 3 || self.view_size % 2 == 0 {
            return Err(Error::parameter(format!(
                "view_size {} must be odd and ≥ 3",
                self.view_size
            )));
        }
        if !(2..=4).contains(&self.gotoseq_subtasks) {
            return Err(Error::parameter(format!(
                "gotoseq_subtasks {} outside supported 2..=4",
                self.gotoseq_subtasks
            )));
        }
        if !(1..=2).contains(&self.door_count) {
            return Err(Error::parameter(format!(
                "door_count {} outside supported 1..=2",
                self.door_count
            )));
        }
        if self.distractors > 3 {
            return Err(Error::parameter(format!(
                "distractors {} outside supported 0..=3",
                self.distractors
            )));
        }
        Ok(())
    }
}

fn object_pool(split: Split) -> Vec<(Color, Kind)> {
    let mut pool = Vec::new();
    for &c in &Color::ALL {
        for &k in &Kind::OBJECTS {
            let held_out = is_holdout(c, k);
            if (split == Split::Holdout) == held_out {
                pool.push((c, k));
            }
        }
    }
    pool
}

fn door_pool(split: Split) -> Vec<Color> {
    Color::ALL
        .iter()
        .copied()
        .filter(|&c| (split == Split::Holdout) == is_holdout(c, Kind::Door))
        .collect()
}

/// Deterministically generate a solvable mission. The same
/// (level, seed, split, params) always yields the same world bit for bit.
pub fn generate(
    level: Level,
    seed: u64,
    split: Split,
    params: &GenParams,
) -> Result<(GridWorld, MissionSpec, Instruction)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Layouts can (very rarely) box a target in behind other objects;
    // redraw from the same stream until the oracle confirms solvability.
    for _ in 0..64 {
        let (world, instruction) = build(level, seed, split, params, &mut rng)?;
        if oracle_solve(&world).is_ok() {
            let mission = world.mission.clone();
            return Ok((world, mission, instruction));
        }
    }
    Err(Error::contract(format!(
        "no solvable layout found for {level} seed {seed} after 64 attempts"
    )))
}

fn build(
    level: Level,
    seed: u64,
    split: Split,
    params: &GenParams,
    rng: &mut ChaCha8Rng,
) -> Result<(GridWorld, Instruction)> {
    let room = params.room_size;
    let (width, height) = (room + 2, room + 2);
    let mut cells = vec![Cell::Empty; width * height];
    for r in 0..height {
        for c in 0..width {
            if r == 0 || c == 0 || r == height - 1 || c == width - 1 {
                cells[r * width + c] = Cell::Wall;
            }
        }
    }

    // GoToSeq is a two-room level: a dividing wall whose only crossing is a
    // door makes sequenced navigation non-trivial, so random walks rarely
    // brush past both targets in order. The door starts closed in half the
    // missions — rare enough that open-door missions keep early reward
    // flowing, common enough that undirected play usually stalls at the
    // wall. The door is scenery — it never appears in instructions — and
    // always takes a train-split color so held-out pairs stay unseen during
    // training.
    let mut divider = None;
    if level == Level::GoToSeq {
        let vertical = rng.gen_bool(0.5);
        let line = 1 + room / 2;
        let gap = 1 + rng.gen_range(0..room);
        let pool = door_pool(Split::Train);
        let color = pool[rng.gen_range(0..pool.len())];
        let open = rng.gen_bool(0.5);
        for i in 1..=room {
            let (r, c) = if vertical { (i, line) } else { (line, i) };
            cells[r * width + c] = if i == gap {
                Cell::Door { color, open }
            } else {
                Cell::Wall
            };
        }
        divider = Some((vertical, line));
    }

    // Doors (OpenDoorsOrder only): distinct colors in non-corner border
    // cells.
    let mut subtasks = Vec::new();
    if level == Level::OpenDoorsOrder {
        let pool = door_pool(split);
        if params.door_count > pool.len() {
            return Err(Error::parameter(format!(
                "door_count {} exceeds available {} door colors for this split",
                params.door_count,
                pool.len()
            )));
        }
        let color_idx = sample(rng, pool.len(), params.door_count);
        let mut border: Vec<(usize, usize)> = Vec::new();
        for c in 1..width - 1 {
            border.push((0, c));
            border.push((height - 1, c));
        }
        for r in 1..height - 1 {
            border.push((r, 0));
            border.push((r, width - 1));
        }
        let pos_idx = sample(rng, border.len(), params.door_count);
        for (ci, pi) in color_idx.iter().zip(pos_idx.iter()) {
            let color = pool[ci];
            let (r, c) = border[pi];
            cells[r * width + c] = Cell::Door { color, open: false };
            subtasks.push(Subtask {
                verb: Verb::GoTo,
                color,
                kind: Kind::Door,
            });
            subtasks.push(Subtask {
                verb: Verb::Open,
                color,
                kind: Kind::Door,
            });
        }
    }

    // Targets and distractors for the go-to levels: every placed object has
    // a unique (color, kind), so instructions are unambiguous.
    let mut placed_objects: Vec<(Color, Kind)> = Vec::new();
    let mut n_targets = 0;
    if level != Level::OpenDoorsOrder {
        let target_count = match level {
            Level::GoToObj => 1,
            Level::GoToSeq => params.gotoseq_subtasks,
            Level::OpenDoorsOrder => unreachable!(),
        };
        n_targets = target_count;
        let pool = object_pool(split);
        if target_count > pool.len() {
            return Err(Error::parameter(format!(
                "{target_count} targets exceed available {} object pairs for this split",
                pool.len()
            )));
        }
        for i in sample(rng, pool.len(), target_count) {
            let (color, kind) = pool[i];
            placed_objects.push((color, kind));
            subtasks.push(Subtask {
                verb: Verb::GoTo,
                color,
                kind,
            });
        }
        // Distractors always come from the train pool and never duplicate a
        // target pair.
        let distractor_pool: Vec<(Color, Kind)> = object_pool(Split::Train)
            .into_iter()
            .filter(|p| !placed_objects.contains(p))
            .collect();
        let n = params.distractors.min(distractor_pool.len());
        for i in sample(rng, distractor_pool.len(), n) {
            placed_objects.push(distractor_pool[i]);
        }
    }

    // Agent and object positions: distinct unoccupied interior cells. In
    // the two-room level, consecutive targets go to opposite rooms, so
    // visiting them in order always forces at least one door crossing.
    let mut free: Vec<(usize, usize)> = (1..height - 1)
        .flat_map(|r| (1..width - 1).map(move |c| (r, c)))
        .filter(|&(r, c)| cells[r * width + c] == Cell::Empty)
        .collect();
    let mut object_cells = Vec::with_capacity(placed_objects.len());
    if let Some((vertical, line)) = divider {
        let mut rooms: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
        for &(r, c) in &free {
            let far_side = if vertical { c > line } else { r > line };
            rooms[usize::from(far_side)].push((r, c));
        }
        let mut side = usize::from(rng.gen_bool(0.5));
        for _ in 0..n_targets {
            let pool = &mut rooms[side];
            if pool.is_empty() {
                return Err(Error::contract("no free cell left for a target"));
            }
            object_cells.push(pool.swap_remove(rng.gen_range(0..pool.len())));
            side = 1 - side;
        }
        free = rooms[0].iter().chain(rooms[1].iter()).copied().collect();
    } else {
        for _ in 0..n_targets {
            object_cells.push(free.swap_remove(rng.gen_range(0..free.len())));
        }
    }
    for _ in n_targets..placed_objects.len() {
        object_cells.push(free.swap_remove(rng.gen_range(0..free.len())));
    }
    let agent_pos = free.swap_remove(rng.gen_range(0..free.len()));
    for (&(r, c), &(color, kind)) in object_cells.iter().zip(placed_objects.iter()) {
        cells[r * width + c] = Cell::Object { kind, color };
    }
    let facing = Dir::ALL[rng.gen_range(0..4)];

    // Instruction text.
    let the = word_id("the").unwrap();
    let mut clauses = Vec::new();
    let mut joiners = Vec::new();
    for (i, sub) in subtasks.iter().enumerate() {
        let color_id = word_id(sub.color.word()).unwrap();
        let kind_id = word_id(sub.kind.word()).unwrap();
        let clause = match sub.verb {
            Verb::GoTo => {
                let article = if sub.kind == Kind::Door {
                    the
                } else if rng.gen_bool(0.5) {
                    word_id("a").unwrap()
                } else {
                    the
                };
                vec![
                    word_id("go").unwrap(),
                    word_id("to").unwrap(),
                    article,
                    color_id,
                    kind_id,
                ]
            }
            Verb::Open => vec![word_id("open").unwrap(), the, color_id, kind_id],
        };
        clauses.push(clause);
        if i + 1 < subtasks.len() {
            let joiner = match level {
                Level::GoToSeq => {
                    if rng.gen_bool(0.5) {
                        Joiner::And
                    } else {
                        Joiner::CommaThen
                    }
                }
                _ => Joiner::CommaThen,
            };
            joiners.push(joiner);
        }
    }
    let instruction = Instruction::from_clauses(&clauses, &joiners)?;

    let mission = MissionSpec {
        level,
        subtasks,
        room_size: room,
        door_count: if level == Level::OpenDoorsOrder {
            params.door_count
        } else {
            0
        },
    };
    let world = GridWorld {
        width,
        height,
        cells,
        pos: agent_pos,
        facing,
        carried: None,
        step_count: 0,
        max_steps: 8 * room * room,
        view_size: params.view_size,
        seed,
        mission,
        progress: 0,
        completion_steps: Vec::new(),
        done: false,
        succeeded: false,
    };
    Ok((world, instruction))
}

// ---------------------------------------------------------------------------
// Oracle solver
// ---------------------------------------------------------------------------

/// Shortest-path scripted solver: completes the mission's subtasks in
/// dependency order using breadth-first search over (position, facing)
/// states. Returns the full action sequence, or an error if the mission is
/// unsolvable within the step budget.
pub fn oracle_solve(world: &GridWorld) -> Result<Vec<Action>> {
    let mut sim = world.clone();
    let mut plan = Vec::new();
    while !sim.done {
        let actions = plan_subtask(&sim)?;
        for a in actions {
            let out = sim.step(a)?;
            plan.push(a);
            if plan.len() > sim.max_steps {
                return Err(Error::contract("oracle exceeded the step budget"));
            }
            if out.done {
                break;
            }
        }
    }
    if sim.succeeded {
        Ok(plan)
    } else {
        Err(Error::contract("oracle finished without success"))
    }
}

fn plan_subtask(sim: &GridWorld) -> Result<Vec<Action>> {
    let sub = sim.mission.subtasks[sim.progress];
    let target = find_target(sim, sub)?;

    let mut actions = if faces(sim, sim.pos, sim.facing, target) {
        Vec::new()
    } else {
        match bfs_to_face(sim, target) {
            Ok(path) => path,
            // The way is barred by a closed door (two-room layouts): open
            // it and replan from the new state on the next pass.
            Err(_) => {
                let door = find_closed_door(sim)?;
                let mut path = if faces(sim, sim.pos, sim.facing, door) {
                    Vec::new()
                } else {
                    bfs_to_face(sim, door)?
                };
                path.push(Action::Open);
                return Ok(path);
            }
        }
    };
    match sub.verb {
        Verb::GoTo => {
            if actions.is_empty() {
                // Already facing the target: completion is only evaluated
                // after an action, so spend one no-op.
                actions.push(Action::DoneNoop);
            }
        }
        Verb::Open => {
            let open = matches!(
                sim.cell(target.0, target.1),
                Cell::Door { open: true, .. }
            );
            actions.push(if open { Action::DoneNoop } else { Action::Open });
        }
    }
    Ok(actions)
}

fn find_target(sim: &GridWorld, sub: Subtask) -> Result<(usize, usize)> {
    for r in 0..sim.height {
        for c in 0..sim.width {
            let hit = match sim.cell(r, c) {
                Cell::Object { kind, color } => kind == sub.kind && color == sub.color,
                Cell::Door { color, .. } => sub.kind == Kind::Door && color == sub.color,
                _ => false,
            };
            if hit {
                return Ok((r, c));
            }
        }
    }
    Err(Error::contract(format!(
        "target {:?} {:?} not present in the world",
        sub.color, sub.kind
    )))
}

fn find_closed_door(sim: &GridWorld) -> Result<(usize, usize)> {
    for r in 0..sim.height {
        for c in 0..sim.width {
            if matches!(sim.cell(r, c), Cell::Door { open: false, .. }) {
                return Ok((r, c));
            }
        }
    }
    Err(Error::contract(
        "no route to the target and no closed door to open",
    ))
}

fn faces(sim: &GridWorld, pos: (usize, usize), dir: Dir, target: (usize, usize)) -> bool {
    let (dr, dc) = dir.delta();
    sim.offset(pos, dr, dc) == Some(target)
}

fn bfs_to_face(sim: &GridWorld, target: (usize, usize)) -> Result<Vec<Action>> {
    let state_id =
        |pos: (usize, usize), dir: Dir| (pos.0 * sim.width + pos.1) * 4 + dir.index();
    let n_states = sim.width * sim.height * 4;
    let mut prev: Vec<Option<(usize, Action)>> = vec![None; n_states];
    let mut seen = vec![false; n_states];
    let start = state_id(sim.pos, sim.facing);
    seen[start] = true;
    let mut queue = VecDeque::from([(sim.pos, sim.facing)]);

    while let Some((pos, dir)) = queue.pop_front() {
        if faces(sim, pos, dir, target) {
            // Reconstruct the action path.
            let mut path = Vec::new();
            let mut s = state_id(pos, dir);
            while let Some((p, a)) = prev[s] {
                path.push(a);
                s = p;
            }
            path.reverse();
            return Ok(path);
        }
        let here = state_id(pos, dir);
        let mut push = |next: ((usize, usize), Dir), action: Action| {
            let id = state_id(next.0, next.1);
            if !seen[id] {
                seen[id] = true;
                prev[id] = Some((here, action));
                queue.push_back(next);
            }
        };
        push((pos, dir.left()), Action::Left);
        push((pos, dir.right()), Action::Right);
        let (dr, dc) = dir.delta();
        if let Some(front) = sim.offset(pos, dr, dc) {
            if sim.cell(front.0, front.1).walkable() {
                push((front, dir), Action::Forward);
            }
        }
    }
    Err(Error::contract("target unreachable from the agent's position"))
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    /// Observation the agent acted on (i.e. before the action).
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
}

/// A finished episode plus the ground truth needed by tests and the
/// auxiliary loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    /// Original (never masked) instruction.
    pub instruction: Instruction,
    pub success: bool,
    pub total_reward: f64,
    pub subtask_completion_steps: Vec<usize>,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    step: usize,
    obs: &'a [u8],
    action: usize,
    reward: f64,
    done: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Line-delimited JSON trace for offline inspection.
    pub fn write_trace(&self, w: &mut impl IoWrite) -> Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            let record = TraceRecord {
                step: i,
                obs: &step.obs.ids,
                action: step.action.index(),
                reward: step.reward,
                done: step.done,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::contract(format!("trace serialization failed: {e}")))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}
