//! VR classroom: an 8-state learner model (alertness, fatigue, vertigo) driven
//! by per-profile transition tables, five teaching actions and quiz rewards.
//!
//! Every bit is oriented so that 1 is the favourable level: alert, vigorous
//! (not fatigued), free of vertigo. State ids are `4·al + 2·fl + vl + 1`, so
//! S8 is the best learning state and S1 the worst.

use std::fmt;
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Environment, StepOutcome};
use crate::error::{PearlError, Result};
use crate::privacy::StateBinning;
use crate::seed::{Rng, SeedTree};

pub const STATE_COUNT: usize = 8;
pub const ACTION_COUNT: usize = 5;
pub const MODE_COUNT: usize = 2;
pub const STAGES_PER_LECTURE: usize = 5;
/// One-hot learner state, VR-mode flag, stage fraction.
pub const OBSERVATION_DIM: usize = STATE_COUNT + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LearnerState {
    pub al: u8,
    pub fl: u8,
    pub vl: u8,
}

impl LearnerState {
    pub fn new(al: u8, fl: u8, vl: u8) -> Self {
        Self {
            al: al.min(1),
            fl: fl.min(1),
            vl: vl.min(1),
        }
    }

    /// Zero-based index, `4·al + 2·fl + vl`.
    pub fn index(self) -> usize {
        4 * self.al as usize + 2 * self.fl as usize + self.vl as usize
    }

    /// One-based label as in S1..S8.
    pub fn id(self) -> usize {
        self.index() + 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < STATE_COUNT).then(|| Self::new((i >> 2) as u8 & 1, (i >> 1) as u8 & 1, i as u8 & 1))
    }
}

impl fmt::Display for LearnerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    TwoD,
    ThreeD,
}

impl Mode {
    pub fn index(self) -> usize {
        match self {
            Mode::TwoD => 0,
            Mode::ThreeD => 1,
        }
    }

    fn from_index(i: usize) -> Self {
        if i == 0 {
            Mode::TwoD
        } else {
            Mode::ThreeD
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VrAction {
    Break,
    EnableVr,
    DisableVr,
    ChangeContent,
    NoChange,
}

impl VrAction {
    pub const ALL: [VrAction; ACTION_COUNT] = [
        VrAction::Break,
        VrAction::EnableVr,
        VrAction::DisableVr,
        VrAction::ChangeContent,
        VrAction::NoChange,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Display mode after the action is applied.
    pub fn next_mode(self, mode: Mode) -> Mode {
        match self {
            VrAction::EnableVr => Mode::ThreeD,
            VrAction::DisableVr => Mode::TwoD,
            _ => mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tolerance {
    High,
    Medium,
    Low,
}

/// Per-bit dynamics a profile is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    /// P(vertigo onset) per stage of 3D exposure.
    pub vertigo_onset: f64,
    /// P(vertigo persists) per stage of 3D exposure once present.
    pub vertigo_persist_3d: f64,
    /// P(vertigo clears) per stage in 2D.
    pub vertigo_recover_2d: f64,
    /// P(alert) in 3D, in 2D, and the bonus from new content.
    pub alert_3d: f64,
    pub alert_2d: f64,
    pub content_bonus: f64,
    /// Alertness lost while fatigued or with vertigo.
    pub fatigue_penalty: f64,
    pub vertigo_penalty: f64,
    /// P(becoming fatigued) per teaching stage in 2D and 3D.
    pub fatigue_onset_2d: f64,
    pub fatigue_onset_3d: f64,
    /// P(fatigue clears) without a break.
    pub fatigue_recover: f64,
    /// After a break: P(vigorous), P(free of vertigo), P(alert).
    pub break_vigor: f64,
    pub break_clear_vertigo: f64,
    pub break_alert: f64,
}

impl ProfileParams {
    pub fn for_tolerance(t: Tolerance) -> Self {
        let base = Self {
            vertigo_onset: 0.0,
            vertigo_persist_3d: 0.0,
            vertigo_recover_2d: 0.0,
            alert_3d: 0.7,
            alert_2d: 0.45,
            content_bonus: 0.2,
            fatigue_penalty: 0.35,
            vertigo_penalty: 0.3,
            fatigue_onset_2d: 0.15,
            fatigue_onset_3d: 0.3,
            fatigue_recover: 0.15,
            break_vigor: 0.9,
            break_clear_vertigo: 0.5,
            break_alert: 0.25,
        };
        match t {
            Tolerance::High => Self {
                vertigo_onset: 0.05,
                vertigo_persist_3d: 0.4,
                vertigo_recover_2d: 0.8,
                ..base
            },
            Tolerance::Medium => Self {
                vertigo_onset: 0.25,
                vertigo_persist_3d: 0.65,
                vertigo_recover_2d: 0.65,
                ..base
            },
            Tolerance::Low => Self {
                vertigo_onset: 0.5,
                vertigo_persist_3d: 0.85,
                vertigo_recover_2d: 0.5,
                ..base
            },
        }
    }

    fn jitter(mut self, rng: &mut Rng, width: f64) -> Self {
        let mut j = |x: &mut f64| *x = (*x + rng.random_range(-width..=width)).clamp(0.01, 0.99);
        j(&mut self.alert_3d);
        j(&mut self.alert_2d);
        j(&mut self.fatigue_onset_2d);
        j(&mut self.fatigue_onset_3d);
        self
    }

    /// `(P(al=1), P(fl=1), P(vl=1))` for the next stage.
    fn bit_probs(&self, s: LearnerState, action: VrAction, mode_after: Mode) -> (f64, f64, f64) {
        if action == VrAction::Break {
            return (self.break_alert, self.break_vigor, self.break_clear_vertigo);
        }
        let three_d = mode_after == Mode::ThreeD;
        let vl = match (three_d, s.vl) {
            (true, 1) => 1.0 - self.vertigo_onset,
            (true, _) => 1.0 - self.vertigo_persist_3d,
            (false, 1) => 1.0,
            (false, _) => self.vertigo_recover_2d,
        };
        // New content re-engages a distracted learner but tires an attentive one.
        let content = action == VrAction::ChangeContent;
        let fl = if s.fl == 1 {
            let onset = if three_d { self.fatigue_onset_3d } else { self.fatigue_onset_2d };
            1.0 - onset - if content && s.al == 1 { self.content_bonus } else { 0.0 }
        } else {
            self.fatigue_recover
        };
        let mut al = if three_d { self.alert_3d } else { self.alert_2d };
        if content && s.al == 0 {
            al += self.content_bonus;
        }
        if s.fl == 0 {
            al -= self.fatigue_penalty;
        }
        if s.vl == 0 {
            al -= self.vertigo_penalty;
        }
        (al.clamp(0.02, 0.98), fl.clamp(0.0, 1.0), vl.clamp(0.0, 1.0))
    }
}

/// Transition table `P(s' | s, a, mode)` where `mode` is the display mode
/// before the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMDP {
    pub name: String,
    pub tolerance: Tolerance,
    pub params: ProfileParams,
    /// Indexed `[state][action][mode][next_state]`.
    table: Vec<[[[f64; STATE_COUNT]; MODE_COUNT]; ACTION_COUNT]>,
}

impl ProfileMDP {
    pub fn from_params(name: &str, tolerance: Tolerance, params: ProfileParams) -> Result<Self> {
        let mut table = vec![[[[0.0; STATE_COUNT]; MODE_COUNT]; ACTION_COUNT]; STATE_COUNT];
        for (s, row_s) in table.iter_mut().enumerate() {
            let state = LearnerState::from_index(s).expect("index in range");
            for (a, row_a) in row_s.iter_mut().enumerate() {
                let action = VrAction::ALL[a];
                for (m, row) in row_a.iter_mut().enumerate() {
                    let after = action.next_mode(Mode::from_index(m));
                    let (pa, pf, pv) = params.bit_probs(state, action, after);
                    for (n, p) in row.iter_mut().enumerate() {
                        let ns = LearnerState::from_index(n).expect("index in range");
                        let bern = |q: f64, bit: u8| if bit == 1 { q } else { 1.0 - q };
                        *p = bern(pa, ns.al) * bern(pf, ns.fl) * bern(pv, ns.vl);
                    }
                }
            }
        }
        let mdp = Self {
            name: name.to_string(),
            tolerance,
            params,
            table,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..STATE_COUNT {
            for a in 0..ACTION_COUNT {
                for m in 0..MODE_COUNT {
                    let row = &self.table[s][a][m];
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-12 {
                        return Err(PearlError::InvalidArgument(format!(
                            "{}: row (S{}, a{a}, m{m}) is not a probability vector",
                            self.name,
                            s + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, s: usize, action: usize, mode: usize) -> &[f64; STATE_COUNT] {
        &self.table[s][action][mode]
    }

    /// Chance of vertigo onset for a learner free of vertigo during one 3D stage.
    pub fn vertigo_onset_3d(&self) -> f64 {
        self.params.vertigo_onset
    }

    /// Markov chain over learner states when the policy is fixed to
    /// (`action`, `mode`) every stage.
    pub fn chain(&self, action: VrAction, mode: Mode) -> [[f64; STATE_COUNT]; STATE_COUNT] {
        let mut p = [[0.0; STATE_COUNT]; STATE_COUNT];
        for (s, row) in p.iter_mut().enumerate() {
            *row = self.table[s][action.index()][mode.index()];
        }
        p
    }

    /// CSV with one row per (state, action, mode) and one column per next state.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        write!(w, "state,action,mode")?;
        for n in 1..=STATE_COUNT {
            write!(w, ",p_s{n}")?;
        }
        writeln!(w)?;
        for s in 0..STATE_COUNT {
            for a in 0..ACTION_COUNT {
                for m in 0..MODE_COUNT {
                    write!(w, "{},{a},{m}", s + 1)?;
                    for p in &self.table[s][a][m] {
                        write!(w, ",{p}")?;
                    }
                    writeln!(w)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(name: &str, tolerance: Tolerance, params: ProfileParams, text: &str) -> Result<Self> {
        let mut table = vec![[[[0.0; STATE_COUNT]; MODE_COUNT]; ACTION_COUNT]; STATE_COUNT];
        let mut seen = 0usize;
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 3 + STATE_COUNT {
                return Err(PearlError::Schema(format!("line {}: expected {} columns", i + 1, 3 + STATE_COUNT)));
            }
            let num = |c: &str| c.trim().parse::<usize>().map_err(|e| PearlError::Schema(format!("line {}: {e}", i + 1)));
            let (s, a, m) = (num(cells[0])?, num(cells[1])?, num(cells[2])?);
            if !(1..=STATE_COUNT).contains(&s) || a >= ACTION_COUNT || m >= MODE_COUNT {
                return Err(PearlError::Schema(format!("line {}: index out of range", i + 1)));
            }
            for (n, c) in cells[3..].iter().enumerate() {
                table[s - 1][a][m][n] = c
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| PearlError::Schema(format!("line {}: {e}", i + 1)))?;
            }
            seen += 1;
        }
        if seen != STATE_COUNT * ACTION_COUNT * MODE_COUNT {
            return Err(PearlError::Schema(format!("expected {} rows, got {seen}", STATE_COUNT * ACTION_COUNT * MODE_COUNT)));
        }
        let mdp = Self {
            name: name.to_string(),
            tolerance,
            params,
            table,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Three tolerance profiles: P1 high, P2 medium, P3 low. The seed perturbs
/// the alertness and fatigue rates slightly; vertigo rates keep their ordering.
pub fn make_profiles(seed: u64) -> Result<[ProfileMDP; 3]> {
    let tree = SeedTree::new(seed).child("vr-profiles");
    let build = |name: &str, t: Tolerance| {
        let params = ProfileParams::for_tolerance(t).jitter(&mut tree.stream(name), 0.03);
        ProfileMDP::from_params(name, t, params)
    };
    Ok([
        build("P1", Tolerance::High)?,
        build("P2", Tolerance::Medium)?,
        build("P3", Tolerance::Low)?,
    ])
}

/// Quiz reward: expected score per state plus Gaussian noise, rounded to
/// whole questions on a ten-question quiz and clamped to [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuizReward {
    pub base: f64,
    pub alert_gain: f64,
    pub vigor_gain: f64,
    pub clear_gain: f64,
    pub noise_sd: f64,
}

impl Default for QuizReward {
    fn default() -> Self {
        Self {
            base: 10.0,
            alert_gain: 50.0,
            vigor_gain: 15.0,
            clear_gain: 25.0,
            noise_sd: 8.0,
        }
    }
}

impl QuizReward {
    pub fn expected(&self, s: LearnerState) -> f64 {
        let v = self.base
            + self.alert_gain * f64::from(s.al)
            + self.vigor_gain * f64::from(s.fl)
            + self.clear_gain * f64::from(s.vl);
        v.clamp(0.0, 100.0)
    }

    pub fn sample(&self, s: LearnerState, rng: &mut Rng) -> f64 {
        let mean = self.expected(s);
        let noisy = if self.noise_sd > 0.0 {
            mean + Normal::new(0.0, self.noise_sd).expect("positive sd").sample(rng)
        } else {
            mean
        };
        ((noisy / 10.0).round() * 10.0).clamp(0.0, 100.0)
    }
}

/// One learner attending lectures of `STAGES_PER_LECTURE` stages each.
/// Rewards are divided by `reward_scale` before reaching the learner's agent;
/// metrics carry the raw quiz score.
#[derive(Debug, Clone)]
pub struct VrEnv {
    profile: ProfileMDP,
    quiz: QuizReward,
    rng: Rng,
    state: LearnerState,
    mode: Mode,
    stage: usize,
    t: u64,
    pub reward_scale: f64,
}

impl VrEnv {
    pub fn new(profile: ProfileMDP, quiz: QuizReward, rng: Rng) -> Result<Self> {
        profile.validate()?;
        let mut env = Self {
            profile,
            quiz,
            rng,
            state: LearnerState::new(1, 1, 1),
            mode: Mode::TwoD,
            stage: 0,
            t: 0,
            reward_scale: 100.0,
        };
        env.start_lecture();
        Ok(env)
    }

    pub fn profile(&self) -> &ProfileMDP {
        &self.profile
    }

    pub fn state(&self) -> LearnerState {
        self.state
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn quiz(&self) -> &QuizReward {
        &self.quiz
    }

    fn start_lecture(&mut self) {
        let al = u8::from(self.rng.random_bool(0.5));
        let fl = u8::from(self.rng.random_bool(0.8));
        let vl = u8::from(self.rng.random_bool(0.95));
        self.state = LearnerState::new(al, fl, vl);
        self.mode = Mode::TwoD;
        self.stage = 0;
    }

    fn sample_next(&mut self, action: VrAction) -> LearnerState {
        let row = self.profile.row(self.state.index(), action.index(), self.mode.index());
        let x: f64 = self.rng.random();
        let mut acc = 0.0;
        for (n, p) in row.iter().enumerate() {
            acc += p;
            if x < acc {
                return LearnerState::from_index(n).expect("index in range");
            }
        }
        LearnerState::from_index(STATE_COUNT - 1).expect("index in range")
    }
}

impl Environment for VrEnv {
    fn observation_dim(&self) -> usize {
        OBSERVATION_DIM
    }

    fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    fn reset(&mut self) -> Vec<f64> {
        self.start_lecture();
        self.observation()
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; OBSERVATION_DIM];
        obs[self.state.index()] = 1.0;
        obs[STATE_COUNT] = self.mode.index() as f64;
        obs[STATE_COUNT + 1] = self.stage as f64 / (STAGES_PER_LECTURE - 1) as f64;
        obs
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let action = VrAction::from_index(action)
            .ok_or_else(|| PearlError::InvalidArgument(format!("VR action {action} outside 0..{ACTION_COUNT}")))?;
        let next = self.sample_next(action);
        self.mode = action.next_mode(self.mode);
        self.state = next;
        let score = self.quiz.sample(next, &mut self.rng);
        self.t += 1;
        self.stage += 1;
        let terminal = self.stage == STAGES_PER_LECTURE;
        Ok(StepOutcome {
            observation: self.observation(),
            reward: score / self.reward_scale,
            terminal,
            episode_end: terminal,
            metric: Some(score),
        })
    }

    fn state_id(&self, binning: StateBinning) -> usize {
        match binning {
            StateBinning::Coarse => self.state.index(),
            StateBinning::Fine => (self.state.index() * MODE_COUNT + self.mode.index()) * STAGES_PER_LECTURE + self.stage,
        }
    }

    fn state_cardinality(&self, binning: StateBinning) -> usize {
        match binning {
            StateBinning::Coarse => STATE_COUNT,
            StateBinning::Fine => STATE_COUNT * MODE_COUNT * STAGES_PER_LECTURE,
        }
    }

    fn ground_truth(&self) -> usize {
        self.state.index()
    }

    fn ground_truth_cardinality(&self) -> usize {
        STATE_COUNT
    }

    fn phase(&self) -> usize {
        self.stage
    }

    fn period(&self) -> usize {
        STAGES_PER_LECTURE
    }

    fn step_index(&self) -> u64 {
        self.t
    }

    /// Mean quiz score.
    fn utility_score(&self, metrics: &[f64]) -> f64 {
        if metrics.is_empty() {
            0.0
        } else {
            metrics.iter().sum::<f64>() / metrics.len() as f64
        }
    }
}
