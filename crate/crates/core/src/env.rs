use crate::error::Result;
use crate::privacy::StateBinning;

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// True terminal state: no bootstrapping past it.
    pub terminal: bool,
    /// End of a logging episode (terminal, or a truncation point of a continuing task).
    pub episode_end: bool,
    /// Utility sample recorded for this step (PMV when occupied, quiz score, ...).
    pub metric: Option<f64>,
}

/// Discrete-action environment driven by the trainers and the inference loop.
///
/// State-dependent accessors (`state_id`, `ground_truth`, `phase`) describe
/// the state the next action will be taken in.
pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn observation(&self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepOutcome>;

    fn state_id(&self, binning: StateBinning) -> usize;
    fn state_cardinality(&self, binning: StateBinning) -> usize;
    /// Private label the adversary tries to recover.
    fn ground_truth(&self) -> usize;
    fn ground_truth_cardinality(&self) -> usize;
    /// Position within the natural cycle (hour of day, lecture stage).
    fn phase(&self) -> usize;
    fn period(&self) -> usize;
    /// Number of steps taken since the last reset.
    fn step_index(&self) -> u64;

    /// Aggregate utility of a run from its per-step metric samples; higher is better.
    fn utility_score(&self, metrics: &[f64]) -> f64;
}

/// Two states, two actions: reward 1 when the action matches the state,
/// after which the state flips. Episodes are truncated every `horizon` steps.
#[derive(Debug, Clone)]
pub struct ToyMdp {
    state: usize,
    t: u64,
    horizon: u64,
}

impl ToyMdp {
    pub fn new(horizon: u64) -> Self {
        Self {
            state: 0,
            t: 0,
            horizon: horizon.max(1),
        }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn reward(state: usize, action: usize) -> f64 {
        if state == action {
            1.0
        } else {
            0.0
        }
    }

    pub fn next_state(state: usize, action: usize) -> usize {
        if state == action {
            1 - state
        } else {
            state
        }
    }
}

impl Environment for ToyMdp {
    fn observation_dim(&self) -> usize {
        2
    }

    fn action_count(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = 0;
        self.t = 0;
        self.observation()
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; 2];
        obs[self.state] = 1.0;
        obs
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if action >= 2 {
            return Err(crate::PearlError::InvalidArgument(format!(
                "toy action {action} outside 0..2"
            )));
        }
        let reward = Self::reward(self.state, action);
        self.state = Self::next_state(self.state, action);
        self.t += 1;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            terminal: false,
            episode_end: self.t % self.horizon == 0,
            metric: Some(reward),
        })
    }

    fn state_id(&self, _binning: StateBinning) -> usize {
        self.state
    }

    fn state_cardinality(&self, _binning: StateBinning) -> usize {
        2
    }

    fn ground_truth(&self) -> usize {
        self.state
    }

    fn ground_truth_cardinality(&self) -> usize {
        2
    }

    fn phase(&self) -> usize {
        (self.t % self.horizon) as usize
    }

    fn period(&self) -> usize {
        self.horizon as usize
    }

    fn step_index(&self) -> u64 {
        self.t
    }

    /// Mean reward per step.
    fn utility_score(&self, metrics: &[f64]) -> f64 {
        if metrics.is_empty() {
            0.0
        } else {
            metrics.iter().sum::<f64>() / metrics.len() as f64
        }
    }
}
