//! Budget-constrained inference over a trained early-exit network and the
//! MI-decay monitor that triggers retraining when behaviour drifts.

use serde::{Deserialize, Serialize};

use crate::confidence::{collect_phase2, train_confidence_heads, BudgetConfig, HeadTrainConfig, HeadTrainReport, HEAD_THRESHOLD};
use crate::env::Environment;
use crate::error::{PearlError, Result};
use crate::privacy::{ActionTrace, MIWindowConfig, StateBinning, TraceEntry};
use crate::qnet::{fine_tune, EEQNetwork, QTrainConfig, ReplayBuffer, Transition};
use crate::seed::{Rng, SeedTree};

/// Exit chosen for one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub branch: usize,
    pub action: usize,
    pub ucl_ok: bool,
    pub pcl_ok: bool,
}

impl ExitDecision {
    pub fn feasible(&self) -> bool {
        self.ucl_ok && self.pcl_ok
    }
}

fn head_outputs(net: &EEQNetwork, s: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !net.has_confidence_heads() {
        return Err(PearlError::InvalidArgument("network has no trained confidence heads".into()));
    }
    (0..net.num_branches()).map(|b| net.confidence(s, b)).collect()
}

/// Lowest-index branch whose utility and privacy heads both reach the
/// threshold, with that branch's greedy action.
pub fn select_exit(net: &EEQNetwork, s: &[f64]) -> Result<ExitDecision> {
    for (b, (u, p)) in head_outputs(net, s)?.into_iter().enumerate() {
        if u >= HEAD_THRESHOLD && p >= HEAD_THRESHOLD {
            return Ok(ExitDecision {
                branch: b,
                action: net.greedy_action(s, b)?,
                ucl_ok: true,
                pcl_ok: true,
            });
        }
    }
    Err(PearlError::Infeasible)
}

/// Exit used when no branch is feasible: the most privacy-confident branch
/// among those passing the utility head, else the most privacy-confident overall.
pub fn fallback_exit(net: &EEQNetwork, s: &[f64]) -> Result<ExitDecision> {
    let heads = head_outputs(net, s)?;
    let pick = |filter: &dyn Fn(f64) -> bool| {
        heads
            .iter()
            .enumerate()
            .filter(|(_, (u, _))| filter(*u))
            .fold(None::<(usize, f64)>, |best, (b, (_, p))| match best {
                Some((_, bp)) if bp >= *p => best,
                _ => Some((b, *p)),
            })
    };
    let (branch, _) = pick(&|u| u >= HEAD_THRESHOLD)
        .or_else(|| pick(&|_| true))
        .ok_or_else(|| PearlError::InvalidArgument("network has no branches".into()))?;
    let (u, p) = heads[branch];
    Ok(ExitDecision {
        branch,
        action: net.greedy_action(s, branch)?,
        ucl_ok: u >= HEAD_THRESHOLD,
        pcl_ok: p >= HEAD_THRESHOLD,
    })
}

/// `select_exit`, falling back to `fallback_exit` when infeasible.
pub fn decide(net: &EEQNetwork, s: &[f64]) -> Result<ExitDecision> {
    match select_exit(net, s) {
        Err(PearlError::Infeasible) => fallback_exit(net, s),
        other => other,
    }
}

/// Deployed-policy rollout together with the side information the
/// analysis needs (phase for the adversary's features, ground truth, utility).
#[derive(Debug, Clone, Default)]
pub struct PolicyRun {
    pub trace: ActionTrace,
    pub phases: Vec<usize>,
    pub truth: Vec<usize>,
    pub rewards: Vec<f64>,
    pub metrics: Vec<f64>,
}

impl PolicyRun {
    pub fn infeasible_steps(&self) -> usize {
        self.trace.entries().iter().filter(|e| !e.feasible).count()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.trace.entries().iter().map(|e| e.a_id).collect()
    }
}

struct Recorder {
    run: PolicyRun,
}

impl Recorder {
    fn new(steps: usize) -> Self {
        Self {
            run: PolicyRun {
                trace: ActionTrace::new(),
                phases: Vec::with_capacity(steps),
                truth: Vec::with_capacity(steps),
                rewards: Vec::with_capacity(steps),
                metrics: Vec::new(),
            },
        }
    }

    fn before<E: Environment + ?Sized>(&mut self, env: &E, d: &ExitDecision) -> Result<()> {
        let mut entry = TraceEntry::new(
            env.step_index(),
            env.state_id(StateBinning::Fine),
            env.state_id(StateBinning::Coarse),
            d.action,
            d.branch,
        );
        entry.feasible = d.feasible();
        self.run.trace.push(entry)?;
        self.run.phases.push(env.phase());
        self.run.truth.push(env.ground_truth());
        Ok(())
    }

    fn after(&mut self, reward: f64, metric: Option<f64>) {
        self.run.rewards.push(reward);
        if let Some(m) = metric {
            self.run.metrics.push(m);
        }
    }
}

/// Runs the budget-constrained policy for `steps` steps. Infeasible steps use
/// the fallback exit and are marked `feasible = false` in the trace.
pub fn run_policy<E: Environment + ?Sized>(net: &EEQNetwork, env: &mut E, steps: usize) -> Result<PolicyRun> {
    if steps == 0 {
        return Err(PearlError::InvalidArgument("steps must be at least 1".into()));
    }
    let mut rec = Recorder::new(steps);
    let mut obs = env.observation();
    for _ in 0..steps {
        let d = decide(net, &obs)?;
        rec.before(env, &d)?;
        let out = env.step(d.action)?;
        rec.after(out.reward, out.metric);
        obs = if out.terminal { env.reset() } else { out.observation };
    }
    Ok(rec.run)
}

/// Greedy rollout of a single fixed branch in the same format as `run_policy`;
/// the unmitigated baseline the attack and utility comparisons start from.
pub fn run_fixed_branch<E: Environment + ?Sized>(
    net: &EEQNetwork,
    env: &mut E,
    branch: usize,
    steps: usize,
) -> Result<PolicyRun> {
    net.branch(branch)?;
    let mut rec = Recorder::new(steps);
    let mut obs = env.observation();
    for _ in 0..steps {
        let d = ExitDecision {
            branch,
            action: net.greedy_action(&obs, branch)?,
            ucl_ok: true,
            pcl_ok: true,
        };
        rec.before(env, &d)?;
        let out = env.step(d.action)?;
        rec.after(out.reward, out.metric);
        obs = if out.terminal { env.reset() } else { out.observation };
    }
    Ok(rec.run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainState {
    Stable,
    Retraining,
}

/// Tracks windowed MI of the deployed action stream against its maximum.
#[derive(Debug, Clone)]
pub struct VariabilityMonitor {
    pub v: f64,
    pub i_max: f64,
    pub i_current: f64,
    pub replay: ReplayBuffer,
    pub retrain_state: RetrainState,
    coalesced: usize,
}

impl VariabilityMonitor {
    pub fn new(v: f64, i_max: f64, replay_capacity: usize) -> Result<Self> {
        if !(v > 0.0 && v <= 1.0) {
            return Err(PearlError::InvalidArgument(format!("v = {v} outside (0, 1]")));
        }
        Ok(Self {
            v,
            i_max: i_max.max(0.0),
            i_current: i_max.max(0.0),
            replay: ReplayBuffer::new(replay_capacity)?,
            retrain_state: RetrainState::Stable,
            coalesced: 0,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.v * self.i_max
    }

    pub fn should_trigger(&self) -> bool {
        self.i_current < self.v * self.i_max
    }

    /// Feeds one completed window's MI. Returns true when this window starts
    /// a retrain; a drop seen while a retrain is pending is coalesced into it.
    pub fn observe(&mut self, mi: f64) -> bool {
        self.i_current = mi;
        if self.should_trigger() {
            if self.retrain_state == RetrainState::Retraining {
                self.coalesced += 1;
                return false;
            }
            self.retrain_state = RetrainState::Retraining;
            return true;
        }
        if self.retrain_state == RetrainState::Stable {
            self.i_max = self.i_max.max(mi);
        }
        false
    }

    /// Ends a retrain: the next observed windows define the new maximum.
    pub fn finish_retrain(&mut self) {
        self.retrain_state = RetrainState::Stable;
        self.i_max = 0.0;
    }

    /// Triggers absorbed into an already pending retrain.
    pub fn coalesced(&self) -> usize {
        self.coalesced
    }
}

/// Settings of a monitored deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub train: QTrainConfig,
    pub heads: HeadTrainConfig,
    pub budgets: BudgetConfig,
    pub mi: MIWindowConfig,
    /// Environment steps of the Phase-1-style fine-tune.
    pub fine_tune_steps: usize,
    /// Rollout length of the Phase-2 rebuild.
    pub phase2_steps: usize,
}

impl RetrainConfig {
    pub fn new(train: QTrainConfig, heads: HeadTrainConfig, budgets: BudgetConfig, mi: MIWindowConfig) -> Self {
        Self {
            train,
            heads,
            budgets,
            mi,
            fine_tune_steps: 5_000,
            phase2_steps: 24 * 7 * 8,
        }
    }
}

/// One monitoring window of a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    /// Step index one past the window's last step.
    pub end: u64,
    pub i_current: f64,
    pub i_max: f64,
    pub trigger: bool,
}

#[derive(Debug, Clone)]
pub struct MonitoredRun {
    pub net: EEQNetwork,
    pub run: PolicyRun,
    pub windows: Vec<WindowRecord>,
    /// Step indices at which a retrain fired.
    pub triggers: Vec<u64>,
    pub head_reports: Vec<HeadTrainReport>,
}

/// Deploys `net` for `steps` steps under the variability monitor. `hook` runs
/// before every step and may alter the environment (behaviour drift).
///
/// A retrain fine-tunes a copy of the environment from the current weights
/// and replay memory, then rebuilds the Phase-2 buffers and heads, all within
/// the step at which it fires.
pub fn monitor_and_retrain<E, H>(
    mut net: EEQNetwork,
    env: &mut E,
    monitor: &mut VariabilityMonitor,
    cfg: &RetrainConfig,
    steps: usize,
    seeds: &SeedTree,
    mut hook: H,
) -> Result<MonitoredRun>
where
    E: Environment + Clone,
    H: FnMut(u64, &mut E) -> Result<()>,
{
    cfg.budgets.validate()?;
    if !(monitor.i_max > 0.0) {
        return Err(PearlError::InvalidArgument("monitor needs a positive i_max".into()));
    }
    let window_n = cfg.mi.window_n;
    let mut rec = Recorder::new(steps);
    let mut windows = Vec::new();
    let mut triggers = Vec::new();
    let mut head_reports = Vec::new();
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(window_n);
    for _ in 0..steps {
        hook(env.step_index(), env)?;
        let obs = env.observation();
        let d = decide(&net, &obs)?;
        rec.before(env, &d)?;
        pairs.push((env.state_id(cfg.mi.binning), d.action));
        let out = env.step(d.action)?;
        rec.after(out.reward, out.metric);
        monitor.replay.push(Transition {
            s: obs.clone(),
            a: d.action,
            r: out.reward,
            s_next: out.observation,
            done: out.terminal,
        });
        if out.terminal {
            env.reset();
        }

        if pairs.len() < window_n {
            continue;
        }
        let mi = cfg.mi.estimate(&pairs);
        pairs.clear();
        let fired = monitor.observe(mi);
        let end = env.step_index();
        windows.push(WindowRecord {
            end,
            i_current: mi,
            i_max: monitor.i_max,
            trigger: fired,
        });
        if let Some(last) = rec.run.trace.entries_mut().last_mut() {
            last.i_current = Some(mi);
            last.trigger = fired;
        }
        if fired {
            triggers.push(end);
            let tag = format!("retrain/{}", triggers.len());
            let mut rng: Rng = seeds.stream(&format!("{tag}/fine-tune"));
            let mut sandbox = env.clone();
            fine_tune(&mut net, &mut sandbox, &cfg.train, cfg.fine_tune_steps, monitor.replay.clone(), &mut rng)?;
            let mut rng: Rng = seeds.stream(&format!("{tag}/phase2"));
            let mut sandbox = env.clone();
            let data = collect_phase2(&net, &mut sandbox, &cfg.mi, cfg.phase2_steps, &mut rng)?;
            let buffers = data.label(&cfg.budgets);
            head_reports.push(train_confidence_heads(&mut net, &buffers, &cfg.heads, seeds.derive(&format!("{tag}/heads")))?);
            monitor.finish_retrain();
        }
    }
    Ok(MonitoredRun {
        net,
        run: rec.run,
        windows,
        triggers,
        head_reports,
    })
}
