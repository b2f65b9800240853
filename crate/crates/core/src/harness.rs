//! Experiment orchestration: config files, the train / sweep / infer /
//! attack / drift pipelines and the on-disk run layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{attack_accuracy, FeatureMode, kmeans_best, run_attack, trace_features, AttackConfig, ClusteringReport};
use crate::confidence::{
    collect_phase2, train_confidence_heads, BudgetConfig, EligibilityTable, HeadTrainConfig, HeadTrainReport, Phase2Data,
};
use crate::env::{Environment, StepOutcome};
use crate::error::{PearlError, Result};
use crate::privacy::{mi_series, MISeries, MIWindowConfig, StateBinning};
use crate::qnet::{argmax, branch_utility_scores, train_phase1, write_training_log, EEQNetwork, EpisodeLog, QTrainConfig};
use crate::runtime::{monitor_and_retrain, run_fixed_branch, run_policy, PolicyRun, RetrainConfig, VariabilityMonitor, WindowRecord};
use crate::seed::SeedTree;
use crate::thermal::{generate_profiles, ActivityEncoding, ComfortModel, HouseParams, ThermalEnv};
use crate::vr::{make_profiles, QuizReward, VrEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Thermal,
    Vr,
}

/// Either simulated application behind one `Environment` impl.
#[derive(Debug, Clone)]
pub enum AnyEnv {
    Thermal(ThermalEnv),
    Vr(VrEnv),
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Thermal($e) => $body,
            AnyEnv::Vr($e) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn observation_dim(&self) -> usize {
        dispatch!(self, e => e.observation_dim())
    }
    fn action_count(&self) -> usize {
        dispatch!(self, e => e.action_count())
    }
    fn reset(&mut self) -> Vec<f64> {
        dispatch!(self, e => e.reset())
    }
    fn observation(&self) -> Vec<f64> {
        dispatch!(self, e => e.observation())
    }
    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        dispatch!(self, e => e.step(action))
    }
    fn state_id(&self, binning: StateBinning) -> usize {
        dispatch!(self, e => e.state_id(binning))
    }
    fn state_cardinality(&self, binning: StateBinning) -> usize {
        dispatch!(self, e => e.state_cardinality(binning))
    }
    fn ground_truth(&self) -> usize {
        dispatch!(self, e => e.ground_truth())
    }
    fn ground_truth_cardinality(&self) -> usize {
        dispatch!(self, e => e.ground_truth_cardinality())
    }
    fn phase(&self) -> usize {
        dispatch!(self, e => e.phase())
    }
    fn period(&self) -> usize {
        dispatch!(self, e => e.period())
    }
    fn step_index(&self) -> u64 {
        dispatch!(self, e => e.step_index())
    }
    fn utility_score(&self, metrics: &[f64]) -> f64 {
        dispatch!(self, e => e.utility_score(metrics))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiSection {
    pub window: usize,
    pub binning: StateBinning,
}

impl Default for MiSection {
    fn default() -> Self {
        Self {
            window: 168,
            binning: StateBinning::Coarse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub k_max: usize,
    pub restarts: usize,
    /// Cluster count used when comparing mitigated and unmitigated traces;
    /// `None` lets the elbow pick it for every trace.
    pub fixed_k: Option<usize>,
    pub features: FeatureMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            k_max: 12,
            restarts: 10,
            fixed_k: None,
            features: FeatureMode::default(),
        }
    }
}

/// Physical and comfort parameters of the thermal house.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermalSection {
    pub house: HouseParams,
    pub comfort: ComfortModel,
    pub encoding: ActivityEncoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub u_values: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            u_values: vec![0.55, 0.65, 0.75, 0.85, 0.95],
            p_values: vec![0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSection {
    /// Subject before and after the switch.
    pub from: usize,
    pub to: usize,
    pub days_before: usize,
    pub days_after: usize,
    /// Days of deployment used to calibrate the initial `i_max`.
    pub calibration_days: usize,
    pub fine_tune_steps: usize,
}

impl Default for DriftSection {
    fn default() -> Self {
        Self {
            from: 2,
            to: 0,
            days_before: 25,
            days_after: 25,
            calibration_days: 14,
            fine_tune_steps: 5_000,
        }
    }
}

/// One experiment, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    /// Human (thermal, 0-based H1..H3) or profile (VR, P1..P3).
    pub subject: usize,
    pub seed: u64,
    pub n_layers: usize,
    pub budgets: BudgetConfig,
    pub train: QTrainConfig,
    pub heads: HeadTrainConfig,
    pub mi: MiSection,
    /// Steps of the Phase-2 rollout.
    pub phase2_steps: usize,
    /// Steps of each evaluation rollout (per-branch utility, inference, attack).
    pub eval_steps: usize,
    pub attack: AttackSection,
    pub sweep: SweepSection,
    pub drift: DriftSection,
    pub thermal: ThermalSection,
    pub outdir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Thermal,
            subject: 0,
            seed: 1,
            n_layers: 10,
            budgets: BudgetConfig::default(),
            train: QTrainConfig::default(),
            heads: HeadTrainConfig::default(),
            mi: MiSection::default(),
            phase2_steps: 168 * 8,
            eval_steps: 24 * 50,
            attack: AttackSection {
                fixed_k: Some(6),
                ..AttackSection::default()
            },
            sweep: SweepSection::default(),
            drift: DriftSection::default(),
            thermal: ThermalSection::default(),
            outdir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults suited to `env`: the VR lecture is short, so its MI window
    /// and rollouts are counted in stages rather than hours.
    pub fn for_env(env: EnvKind) -> Self {
        match env {
            EnvKind::Thermal => Self::default(),
            EnvKind::Vr => Self {
                env,
                mi: MiSection {
                    window: 500,
                    binning: StateBinning::Coarse,
                },
                phase2_steps: 4_000,
                eval_steps: 2_000,
                attack: AttackSection::default(),
                train: QTrainConfig {
                    steps_per_layer: 10_000,
                    ..QTrainConfig::default()
                },
                ..Self::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PearlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PearlError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PearlError::Config(m));
        if self.subject >= 3 {
            return bad(format!("subject {} does not exist (0..3)", self.subject));
        }
        if self.drift.from >= 3 || self.drift.to >= 3 {
            return bad("drift subjects must lie in 0..3".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        self.budgets.validate()?;
        self.train.validate()?;
        if self.mi.window == 0 || self.phase2_steps < self.mi.window {
            return bad("phase2_steps must cover at least one MI window".into());
        }
        if self.eval_steps == 0 {
            return bad("eval_steps must be positive".into());
        }
        for x in self.sweep.u_values.iter().chain(&self.sweep.p_values) {
            if !(*x > 0.0 && *x <= 1.0) {
                return bad(format!("sweep budget {x} outside (0, 1]"));
            }
        }
        if self.attack.fixed_k == Some(0) || self.attack.k_max == 0 {
            return bad("cluster counts must be positive".into());
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            let env = match self.env {
                EnvKind::Thermal => "thermal",
                EnvKind::Vr => "vr",
            };
            format!("{env}-{}-seed{}", self.subject_name(self.subject), self.seed)
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.outdir.join(self.run_id())
    }

    pub fn subject_name(&self, subject: usize) -> String {
        match self.env {
            EnvKind::Thermal => format!("H{}", subject + 1),
            EnvKind::Vr => format!("P{}", subject + 1),
        }
    }

    pub fn mi_config(&self) -> Result<MIWindowConfig> {
        MIWindowConfig::new(self.mi.window, self.mi.binning)
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            k_max: self.attack.k_max,
            restarts: self.attack.restarts,
            mode: self.attack.features,
        }
    }

    /// Environment for `subject`, its randomness drawn from the named stream.
    pub fn make_env(&self, subject: usize, stream: &str) -> Result<AnyEnv> {
        let seeds = self.seeds();
        let profile_seed = seeds.derive("profiles");
        let rng = seeds.stream(&format!("env/{stream}"));
        match self.env {
            EnvKind::Thermal => {
                let profiles = generate_profiles(profile_seed);
                let t = &self.thermal;
                let env = ThermalEnv::new(t.house.clone(), t.comfort.clone(), profiles[subject].clone(), rng)?;
                Ok(AnyEnv::Thermal(env.with_encoding(t.encoding)))
            }
            EnvKind::Vr => {
                let profiles = make_profiles(profile_seed)?;
                Ok(AnyEnv::Vr(VrEnv::new(profiles[subject].clone(), QuizReward::default(), rng)?))
            }
        }
    }

    /// Named substreams every pipeline draws from, recorded in the manifest.
    pub fn seed_streams(&self) -> Vec<(String, u64)> {
        let s = self.seeds();
        [
            "profiles",
            "env/train",
            "env/phase2",
            "env/eval",
            "net-init+exploration",
            "phase2",
            "heads",
            "adversary",
        ]
        .iter()
        .map(|n| (n.to_string(), s.derive(n)))
        .collect()
    }
}

/// Utility summary of a run's metric samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityMetrics {
    /// PMV-in-range percentage (thermal) or mean quiz score (VR).
    pub score: f64,
    /// Standard deviation of the per-step metric (PMV STD, quiz STD).
    pub std: f64,
    pub samples: usize,
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn utility_metrics<E: Environment + ?Sized>(env: &E, metrics: &[f64]) -> UtilityMetrics {
    UtilityMetrics {
        score: env.utility_score(metrics),
        std: std_dev(metrics),
        samples: metrics.len(),
    }
}

/// Everything `cmd_train` produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network with confidence heads trained for the configured budgets.
    pub net: EEQNetwork,
    pub log: Vec<EpisodeLog>,
    pub freeze_hashes: Vec<Vec<String>>,
    pub phase2: Phase2Data,
    pub branch_utility: Vec<f64>,
    pub best_branch: usize,
    pub head_report: HeadTrainReport,
    pub eligibility: EligibilityTable,
}

/// Phase 1, per-branch utility evaluation, Phase 2 and heads for `cfg.budgets`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let mut env = cfg.make_env(cfg.subject, "train")?;
    let mut rng = seeds.stream("net-init+exploration");
    let p1 = train_phase1(&mut env, &cfg.train, cfg.n_layers, &mut rng)?;
    let branch_utility = branch_utility_scores(&p1.net, |_| cfg.make_env(cfg.subject, "eval"), cfg.eval_steps)?;
    let best_branch = crate::qnet::best_utility_branch(&branch_utility)?;
    let mut env = cfg.make_env(cfg.subject, "phase2")?;
    let phase2 = collect_phase2(&p1.net, &mut env, &cfg.mi_config()?, cfg.phase2_steps, &mut seeds.stream("phase2"))?;
    let mut net = p1.net;
    let head_report = fit_heads(&mut net, &phase2, &cfg.budgets, &cfg.heads, &seeds, "heads")?;
    let eligibility = EligibilityTable::from_data(&phase2, &cfg.sweep.u_values, &cfg.sweep.p_values);
    Ok(TrainOutcome {
        net,
        log: p1.log,
        freeze_hashes: p1.freeze_hashes,
        phase2,
        branch_utility,
        best_branch,
        head_report,
        eligibility,
    })
}

fn fit_heads(
    net: &mut EEQNetwork,
    phase2: &Phase2Data,
    budgets: &BudgetConfig,
    heads: &HeadTrainConfig,
    seeds: &SeedTree,
    stream: &str,
) -> Result<HeadTrainReport> {
    let buffers = phase2.label(budgets);
    train_confidence_heads(net, &buffers, heads, seeds.derive(stream))
}

/// Result of attacking one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// Elbow-selected clustering over the full `k` range.
    pub elbow: ClusteringReport,
    /// Clustering at the configured fixed `k`, when one is set.
    pub fixed_k: Option<(usize, f64)>,
}

impl AttackOutcome {
    /// Accuracy used for mitigation comparisons: at the fixed `k` when set,
    /// else at the elbow's `k`.
    pub fn accuracy(&self) -> f64 {
        self.fixed_k
            .map(|(_, a)| a)
            .or(self.elbow.accuracy)
            .unwrap_or(f64::NAN)
    }
}

pub fn attack_run(cfg: &ExperimentConfig, run: &PolicyRun, period: usize, stream: &str) -> Result<AttackOutcome> {
    let acfg = cfg.attack_config();
    let points = trace_features(&run.trace, &run.phases, period, acfg.mode)?;
    let mut rng = cfg.seeds().stream(&format!("adversary/{stream}"));
    let elbow = run_attack(&points, Some(&run.truth), &acfg, &mut rng)?;
    let fixed_k = match cfg.attack.fixed_k {
        Some(k) if k == elbow.k_selected => Some((k, elbow.accuracy.unwrap_or(f64::NAN))),
        Some(k) => {
            let c = kmeans_best(&points, k, acfg.restarts, &mut rng)?;
            Some((k, attack_accuracy(&c.assignments, &run.truth)?))
        }
        None => None,
    };
    Ok(AttackOutcome { elbow, fixed_k })
}

/// Summary of one deployed (or baseline) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub utility: UtilityMetrics,
    pub attack_accuracy: f64,
    pub elbow_k: usize,
    pub mean_mi: f64,
    pub infeasible_fraction: f64,
    /// Steps served by each branch.
    pub branch_histogram: Vec<usize>,
}

fn summarize(cfg: &ExperimentConfig, env: &AnyEnv, run: &PolicyRun, n_branches: usize, stream: &str) -> Result<EvalSummary> {
    let attack = attack_run(cfg, run, env.period(), stream)?;
    let series = mi_series(&run.trace, &cfg.mi_config()?, false)?;
    let mean_mi = series.points.iter().map(|p| p.bits).sum::<f64>() / series.points.len().max(1) as f64;
    let mut hist = vec![0usize; n_branches];
    for e in run.trace.entries() {
        hist[e.branch] += 1;
    }
    Ok(EvalSummary {
        utility: utility_metrics(env, &run.metrics),
        attack_accuracy: attack.accuracy(),
        elbow_k: attack.elbow.k_selected,
        mean_mi,
        infeasible_fraction: run.infeasible_steps() as f64 / run.trace.len().max(1) as f64,
        branch_histogram: hist,
    })
}

/// Budget-constrained inference with the trained heads on the evaluation stream.
pub fn infer(cfg: &ExperimentConfig, net: &EEQNetwork) -> Result<(PolicyRun, EvalSummary)> {
    let mut env = cfg.make_env(cfg.subject, "eval")?;
    let run = run_policy(net, &mut env, cfg.eval_steps)?;
    let summary = summarize(cfg, &env, &run, net.num_branches(), "mitigated")?;
    Ok((run, summary))
}

/// Unmitigated baseline: the max-utility branch alone on the evaluation stream.
pub fn baseline(cfg: &ExperimentConfig, net: &EEQNetwork, branch: usize) -> Result<(PolicyRun, EvalSummary)> {
    let mut env = cfg.make_env(cfg.subject, "eval")?;
    let run = run_fixed_branch(net, &mut env, branch, cfg.eval_steps)?;
    let summary = summarize(cfg, &env, &run, net.num_branches(), "baseline")?;
    Ok((run, summary))
}

/// One `(u, p)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub u: f64,
    pub p: f64,
    /// Eligible branches on true labels (0-based); empty is an "×" cell.
    pub eligible: Vec<usize>,
    pub head_report: HeadTrainReport,
    pub eval: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub baseline: EvalSummary,
    pub best_branch: usize,
    pub cells: Vec<SweepCell>,
    pub eligibility: EligibilityTable,
}

fn cell_stream(u: f64, p: f64) -> String {
    format!("sweep/u{u}/p{p}")
}

/// Runs one cell: relabel, retrain heads on a copy, infer and attack. Draws
/// only from streams named after the cell, so results do not depend on the
/// order cells are run in.
pub fn sweep_cell(cfg: &ExperimentConfig, trained: &EEQNetwork, phase2: &Phase2Data, u: f64, p: f64) -> Result<SweepCell> {
    let budgets = BudgetConfig::new(u, p, cfg.budgets.v)?;
    let mut net = trained.clone();
    let stream = cell_stream(u, p);
    let head_report = fit_heads(&mut net, phase2, &budgets, &cfg.heads, &cfg.seeds(), &format!("{stream}/heads"))?;
    let mut env = cfg.make_env(cfg.subject, "eval")?;
    let run = run_policy(&net, &mut env, cfg.eval_steps)?;
    let eval = summarize(cfg, &env, &run, net.num_branches(), &stream)?;
    Ok(SweepCell {
        u,
        p,
        eligible: phase2.eligible_branches(u, p),
        head_report,
        eval,
    })
}

/// Every `(u, p)` of the grid in parallel, plus the unmitigated baseline.
pub fn sweep(cfg: &ExperimentConfig, trained: &TrainOutcome, u_values: &[f64], p_values: &[f64]) -> Result<SweepOutcome> {
    let grid: Vec<(f64, f64)> = p_values.iter().flat_map(|p| u_values.iter().map(move |u| (*u, *p))).collect();
    let cells = grid
        .par_iter()
        .map(|(u, p)| sweep_cell(cfg, &trained.net, &trained.phase2, *u, *p))
        .collect::<Result<Vec<_>>>()?;
    let (_, base) = baseline(cfg, &trained.net, trained.best_branch)?;
    Ok(SweepOutcome {
        baseline: base,
        best_branch: trained.best_branch,
        cells,
        eligibility: EligibilityTable::from_data(&trained.phase2, u_values, p_values),
    })
}

impl SweepOutcome {
    pub fn cell(&self, u: f64, p: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| (c.u - u).abs() < 1e-12 && (c.p - p).abs() < 1e-12)
    }

    /// Tradeoff points `u,p,eligible,utility,utility_std,attack_accuracy,mean_mi,infeasible_fraction`.
    pub fn write_tradeoff_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "u,p,eligible,utility,utility_std,attack_accuracy,mean_mi,infeasible_fraction")?;
        let b = &self.baseline;
        writeln!(
            w,
            "baseline,baseline,{},{},{},{},{},{}",
            self.best_branch + 1,
            b.utility.score,
            b.utility.std,
            b.attack_accuracy,
            b.mean_mi,
            b.infeasible_fraction
        )?;
        for c in &self.cells {
            let layers: Vec<String> = c.eligible.iter().map(|b| (b + 1).to_string()).collect();
            let layers = if layers.is_empty() { "×".to_string() } else { layers.join(" ") };
            writeln!(
                w,
                "{},{},{layers},{},{},{},{},{}",
                c.u, c.p, c.eval.utility.score, c.eval.utility.std, c.eval.attack_accuracy, c.eval.mean_mi, c.eval.infeasible_fraction
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Behaviour-switch scenario and its no-switch control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub initial_i_max: f64,
    pub switch_step: u64,
    pub triggers: Vec<u64>,
    pub windows: Vec<WindowRecord>,
    /// Maximum windowed MI after the last retrain.
    pub new_max: Option<f64>,
    /// End step of the first post-retrain window at or above `v·new_max`.
    pub recovered_at: Option<u64>,
    pub control_triggers: Vec<u64>,
    pub control_windows: Vec<WindowRecord>,
}

impl DriftReport {
    /// Simulated days from the first trigger to recovery.
    pub fn recovery_days(&self, steps_per_day: u64) -> Option<f64> {
        let t = *self.triggers.first()?;
        Some((self.recovered_at? - t) as f64 / steps_per_day as f64)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "scenario,window_end,i_current,i_max,trigger")?;
        for (name, rows) in [("switch", &self.windows), ("control", &self.control_windows)] {
            for r in rows {
                writeln!(w, "{name},{},{:.6},{:.6},{}", r.end, r.i_current, r.i_max, u8::from(r.trigger))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn steps_per_day(env: EnvKind) -> usize {
    match env {
        EnvKind::Thermal => 24,
        EnvKind::Vr => crate::vr::STAGES_PER_LECTURE,
    }
}

/// Deploys a network trained on `drift.from`, switches the occupant to
/// `drift.to` after `days_before` days and monitors MI with `v`; the control
/// repeats the deployment without the switch.
pub fn drift(cfg: &ExperimentConfig, trained: &EEQNetwork) -> Result<DriftReport> {
    let day = steps_per_day(cfg.env);
    let mi = cfg.mi_config()?;
    let seeds = cfg.seeds().child("drift");
    let mut calib = cfg.make_env(cfg.drift.from, "drift/calibration")?;
    let calib_run = run_policy(trained, &mut calib, (cfg.drift.calibration_days * day).max(mi.window_n))?;
    let initial_i_max = mi_series(&calib_run.trace, &mi, false)?.i_max;
    if !(initial_i_max > 0.0) {
        return Err(PearlError::InvalidArgument("calibration run leaked no information; cannot monitor".into()));
    }
    let total = (cfg.drift.days_before + cfg.drift.days_after) * day;
    let switch_step = (cfg.drift.days_before * day) as u64;
    let retrain = RetrainConfig {
        fine_tune_steps: cfg.drift.fine_tune_steps,
        phase2_steps: cfg.phase2_steps,
        ..RetrainConfig::new(cfg.train.clone(), cfg.heads.clone(), cfg.budgets.clone(), mi.clone())
    };
    let target = match cfg.make_env(cfg.drift.to, "unused")? {
        AnyEnv::Thermal(e) => Some(e.profile().clone()),
        AnyEnv::Vr(_) => None,
    };
    let new_monitor = || VariabilityMonitor::new(cfg.budgets.v, initial_i_max, cfg.train.replay_capacity);

    let mut env = cfg.make_env(cfg.drift.from, "drift/deploy")?;
    let mut monitor = new_monitor()?;
    let switched = monitor_and_retrain(trained.clone(), &mut env, &mut monitor, &retrain, total, &seeds, |t, env| {
        if t == switch_step {
            switch_subject(cfg, env, target.as_ref())?;
        }
        Ok(())
    })?;

    let mut env = cfg.make_env(cfg.drift.from, "drift/deploy")?;
    let mut monitor = new_monitor()?;
    let control = monitor_and_retrain(trained.clone(), &mut env, &mut monitor, &retrain, total, &seeds.child("control"), |_, _| Ok(()))?;

    let (new_max, recovered_at) = match switched.triggers.last() {
        Some(last) => {
            let after: Vec<&WindowRecord> = switched.windows.iter().filter(|w| w.end > *last).collect();
            let new_max = after.iter().map(|w| w.i_current).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
            let recovered = new_max.and_then(|m| after.iter().find(|w| w.i_current >= cfg.budgets.v * m).map(|w| w.end));
            (new_max, recovered)
        }
        None => (None, None),
    };
    Ok(DriftReport {
        initial_i_max,
        switch_step,
        triggers: switched.triggers,
        windows: switched.windows,
        new_max,
        recovered_at,
        control_triggers: control.triggers,
        control_windows: control.windows,
    })
}

fn switch_subject(cfg: &ExperimentConfig, env: &mut AnyEnv, thermal_target: Option<&crate::thermal::OccupantProfile>) -> Result<()> {
    match env {
        AnyEnv::Thermal(e) => e.set_profile(thermal_target.expect("thermal target profile").clone()),
        AnyEnv::Vr(e) => {
            let profiles = make_profiles(cfg.seeds().derive("profiles"))?;
            *e = VrEnv::new(profiles[cfg.drift.to].clone(), QuizReward::default(), cfg.seeds().stream("env/drift/switched"))?;
            Ok(())
        }
    }
}

/// MI series of every branch's greedy actions over the Phase-2 rollout.
pub fn branch_mi_series(phase2: &Phase2Data) -> MISeries {
    let mut series = MISeries::default();
    for (w, row) in phase2.window_mi.iter().enumerate() {
        for (b, bits) in row.iter().enumerate() {
            series.push(Some(b), (w * phase2.window_n) as u64, *bits);
        }
    }
    series
}

/// Paths and bookkeeping of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub seed_streams: Vec<(String, u64)>,
    pub checkpoint_hash: Option<String>,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let path = cfg.run_dir();
        fs::create_dir_all(&path)?;
        let manifest = match fs::read_to_string(path.join("manifest.json")) {
            Ok(text) => {
                let mut m: Manifest = serde_json::from_str(&text)?;
                m.command = command.to_string();
                m
            }
            Err(_) => Manifest {
                run_id: cfg.run_id(),
                command: command.to_string(),
                seed: cfg.seed,
                seed_streams: cfg.seed_streams(),
                checkpoint_hash: None,
                files: Vec::new(),
                config: cfg.clone(),
            },
        };
        Ok(Self { path, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn register(&mut self, name: &str) {
        if !self.manifest.files.iter().any(|f| f == name) {
            self.manifest.files.push(name.to_string());
        }
    }

    pub fn file(&mut self, name: &str) -> Result<fs::File> {
        self.register(name);
        Ok(fs::File::create(self.path.join(name))?)
    }

    pub fn write_str(&mut self, name: &str, text: &str) -> Result<()> {
        self.file(name)?.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_str(name, &text)
    }

    pub fn set_checkpoint_hash(&mut self, hash: String) {
        self.manifest.checkpoint_hash = Some(hash);
    }

    pub fn finish(&self) -> Result<()> {
        fs::write(self.path.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PHASE2_FILE: &str = "phase2.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub branch_utility: Vec<f64>,
    pub best_branch: usize,
    pub head_report: HeadTrainReport,
    pub freeze_hashes: Vec<Vec<String>>,
    pub phase2_i_max: f64,
}

/// `cmd_train`: trains and writes checkpoint, logs, eligibility table and MI series.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(RunDir, TrainOutcome)> {
    let mut dir = RunDir::create(cfg, "train")?;
    let out = train(cfg)?;
    dir.register(CHECKPOINT_FILE);
    out.net.save(&dir.path.join(CHECKPOINT_FILE))?;
    dir.set_checkpoint_hash(out.net.checkpoint_hash());
    write_training_log(dir.file("training_log.csv")?, &out.log)?;
    out.eligibility.write_csv(dir.file("eligibility.csv")?)?;
    branch_mi_series(&out.phase2).write_csv(&mut dir.file("mi_series.csv")?)?;
    dir.write_json(PHASE2_FILE, &out.phase2)?;
    dir.write_json(
        TRAIN_SUMMARY_FILE,
        &TrainSummary {
            branch_utility: out.branch_utility.clone(),
            best_branch: out.best_branch,
            head_report: out.head_report.clone(),
            freeze_hashes: out.freeze_hashes.clone(),
            phase2_i_max: out.phase2.i_max(),
        },
    )?;
    dir.finish()?;
    Ok((dir, out))
}

/// Reloads what `cmd_train` stored in the run directory.
pub fn load_trained(cfg: &ExperimentConfig) -> Result<(EEQNetwork, Phase2Data, TrainSummary)> {
    let dir = cfg.run_dir();
    let net = EEQNetwork::load(&dir.join(CHECKPOINT_FILE))?;
    let phase2: Phase2Data = serde_json::from_str(&fs::read_to_string(dir.join(PHASE2_FILE))?)?;
    let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(dir.join(TRAIN_SUMMARY_FILE))?)?;
    Ok((net, phase2, summary))
}

fn trained_from_disk(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (net, phase2, s) = load_trained(cfg)?;
    let eligibility = EligibilityTable::from_data(&phase2, &cfg.sweep.u_values, &cfg.sweep.p_values);
    Ok(TrainOutcome {
        net,
        log: Vec::new(),
        freeze_hashes: s.freeze_hashes,
        phase2,
        branch_utility: s.branch_utility,
        best_branch: s.best_branch,
        head_report: s.head_report,
        eligibility,
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let trained = trained_from_disk(cfg)?;
    let mut dir = RunDir::create(cfg, "sweep")?;
    let out = sweep(cfg, &trained, &cfg.sweep.u_values, &cfg.sweep.p_values)?;
    out.eligibility.write_csv(dir.file("sweep_eligibility.csv")?)?;
    out.write_tradeoff_csv(dir.file("tradeoff.csv")?)?;
    dir.write_json("sweep.json", &out)?;
    dir.finish()?;
    Ok(out)
}

pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let (mut net, phase2, _) = load_trained(cfg)?;
    let mut dir = RunDir::create(cfg, "infer")?;
    fit_heads(&mut net, &phase2, &cfg.budgets, &cfg.heads, &cfg.seeds(), "heads")?;
    let (run, summary) = infer(cfg, &net)?;
    run.trace.write_csv(&mut dir.file("trace.csv")?)?;
    write_ground_truth(&run, dir.file("ground_truth.csv")?)?;
    for (binning, name) in [(StateBinning::Fine, "mi_series_fine.csv"), (StateBinning::Coarse, "mi_series_coarse.csv")] {
        let mi = MIWindowConfig {
            binning,
            ..cfg.mi_config()?
        };
        mi_series(&run.trace, &mi, false)?.write_csv(&mut dir.file(name)?)?;
    }
    dir.write_json("infer.json", &summary)?;
    dir.finish()?;
    Ok(summary)
}

/// `t,phase,truth` for every trace step.
pub fn write_ground_truth<W: std::io::Write>(run: &PolicyRun, w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "t,phase,truth")?;
    for ((e, ph), g) in run.trace.entries().iter().zip(&run.phases).zip(&run.truth) {
        writeln!(w, "{},{ph},{g}", e.t)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `t,phase,truth` rows.
pub fn read_ground_truth(text: &str) -> Result<(Vec<u64>, Vec<usize>, Vec<usize>)> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "t,phase,truth" => {}
        other => return Err(PearlError::Schema(format!("unexpected ground-truth header {other:?}"))),
    }
    let (mut ts, mut phases, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(PearlError::Schema(format!("ground-truth line {}: expected 3 columns", i + 2)));
        }
        let err = |e: std::num::ParseIntError| PearlError::Schema(format!("ground-truth line {}: {e}", i + 2));
        ts.push(cells[0].trim().parse().map_err(err)?);
        phases.push(cells[1].trim().parse().map_err(err)?);
        truth.push(cells[2].trim().parse().map_err(err)?);
    }
    Ok((ts, phases, truth))
}

/// `cmd_attack`: the adversary pipeline on stored trace and ground-truth files.
pub fn cmd_attack(trace_csv: &str, truth_csv: &str, period: usize, attack: &AttackConfig, seed: u64) -> Result<ClusteringReport> {
    let trace = crate::privacy::ActionTrace::read_csv(trace_csv)?;
    let (ts, phases, truth) = read_ground_truth(truth_csv)?;
    if ts.len() != trace.len() || ts.iter().zip(trace.entries()).any(|(t, e)| *t != e.t) {
        return Err(PearlError::Schema("trace and ground truth do not cover the same steps".into()));
    }
    let points = trace_features(&trace, &phases, period, attack.mode)?;
    run_attack(&points, Some(&truth), attack, &mut SeedTree::new(seed).stream("adversary"))
}

pub fn cmd_drift(cfg: &ExperimentConfig) -> Result<DriftReport> {
    let drift_cfg = ExperimentConfig {
        subject: cfg.drift.from,
        ..cfg.clone()
    };
    let (net, _, _) = load_trained(&drift_cfg)?;
    let mut dir = RunDir::create(&drift_cfg, "drift")?;
    let report = drift(&drift_cfg, &net)?;
    report.write_csv(dir.file("drift_windows.csv")?)?;
    dir.write_json("drift.json", &report)?;
    dir.finish()?;
    Ok(report)
}

/// Markdown digest of whatever results a run directory holds.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let dir = cfg.run_dir();
    let mut out = format!("# Run {}\n\n", cfg.run_id());
    if let Ok(text) = fs::read_to_string(dir.join(TRAIN_SUMMARY_FILE)) {
        let s: TrainSummary = serde_json::from_str(&text)?;
        out.push_str("## Branch utility\n\n| layer | utility |\n|---|---|\n");
        for (b, u) in s.branch_utility.iter().enumerate() {
            let mark = if b == s.best_branch { " (best)" } else { "" };
            out.push_str(&format!("| {}{mark} | {u:.2} |\n", b + 1));
        }
        out.push_str(&format!("\nPhase-2 I_max: {:.3} bits\n\n", s.phase2_i_max));
    }
    if let Ok(text) = fs::read_to_string(dir.join("eligibility.csv")) {
        out.push_str("## Eligibility (true labels)\n\n```\n");
        out.push_str(&text);
        out.push_str("```\n\n");
    }
    if let Ok(text) = fs::read_to_string(dir.join("sweep.json")) {
        let s: SweepOutcome = serde_json::from_str(&text)?;
        out.push_str("## Sweep\n\n| u | p | utility | utility std | attack acc. | infeasible |\n|---|---|---|---|---|---|\n");
        let b = &s.baseline;
        out.push_str(&format!(
            "| baseline | L{} | {:.2} | {:.3} | {:.3} | - |\n",
            s.best_branch + 1,
            b.utility.score,
            b.utility.std,
            b.attack_accuracy
        ));
        for c in &s.cells {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.3} | {:.3} | {:.2} |\n",
                c.u, c.p, c.eval.utility.score, c.eval.utility.std, c.eval.attack_accuracy, c.eval.infeasible_fraction
            ));
        }
        out.push('\n');
    }
    if let Ok(text) = fs::read_to_string(dir.join("infer.json")) {
        let s: EvalSummary = serde_json::from_str(&text)?;
        out.push_str(&format!(
            "## Inference at u={}, p={}\n\nutility {:.2}, attack accuracy {:.3}, infeasible {:.2}\n\n",
            cfg.budgets.u, cfg.budgets.p, s.utility.score, s.attack_accuracy, s.infeasible_fraction
        ));
    }
    if let Ok(text) = fs::read_to_string(dir.join("drift.json")) {
        let d: DriftReport = serde_json::from_str(&text)?;
        out.push_str(&format!(
            "## Drift\n\ntriggers at steps {:?}; control triggers {:?}; recovery {}\n",
            d.triggers,
            d.control_triggers,
            d.recovery_days(steps_per_day(cfg.env) as u64)
                .map(|x| format!("{x:.1} days after the trigger"))
                .unwrap_or_else(|| "not observed".into())
        ));
    }
    let mut dir = RunDir::create(cfg, "report")?;
    dir.write_str("report.md", &out)?;
    dir.finish()?;
    Ok(out)
}

/// Greedy action of every branch at `s`; handy for inspecting a checkpoint.
pub fn branch_actions(net: &EEQNetwork, s: &[f64]) -> Result<Vec<usize>> {
    Ok(net.forward_all(s)?.q.iter().map(|q| argmax(q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(env: EnvKind) -> ExperimentConfig {
        ExperimentConfig {
            n_layers: 2,
            train: QTrainConfig {
                steps_per_layer: 400,
                learn_start: 50,
                ..QTrainConfig::default()
            },
            heads: HeadTrainConfig {
                epochs: 2,
                ..HeadTrainConfig::default()
            },
            mi: MiSection {
                window: 48,
                binning: StateBinning::Coarse,
            },
            phase2_steps: 96,
            eval_steps: 96,
            attack: AttackSection {
                k_max: 4,
                restarts: 2,
                fixed_k: Some(3),
                ..AttackSection::default()
            },
            sweep: SweepSection {
                u_values: vec![0.6, 0.9],
                p_values: vec![0.7],
            },
            ..ExperimentConfig::for_env(env)
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = tiny(EnvKind::Vr);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("env = \"thermal\"\nsubject = 2\n[budgets]\nu = 0.85\n").unwrap();
        assert_eq!(cfg.subject, 2);
        assert_eq!(cfg.budgets.u, 0.85);
        assert_eq!(cfg.budgets.p, 0.7);
        assert_eq!(cfg.n_layers, 10);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentConfig::from_toml("subject = 3").is_err());
        assert!(ExperimentConfig::from_toml("[budgets]\nu = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("[sweep]\nu_values = [1.5]").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn sweep_cells_do_not_depend_on_order() {
        let cfg = tiny(EnvKind::Thermal);
        let trained = train(&cfg).unwrap();
        let forward = sweep(&cfg, &trained, &[0.6, 0.9], &[0.7]).unwrap();
        let backward = sweep(&cfg, &trained, &[0.9, 0.6], &[0.7]).unwrap();
        for c in &forward.cells {
            assert_eq!(Some(c), backward.cell(c.u, c.p));
        }
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny(EnvKind::Vr);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.net.to_bytes(), b.net.to_bytes());
        assert_eq!(a.net.num_branches(), 2);
    }

    #[test]
    fn ground_truth_csv_round_trips() {
        let cfg = tiny(EnvKind::Thermal);
        let trained = train(&cfg).unwrap();
        let (run, _) = infer(&cfg, &trained.net).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&run, &mut buf).unwrap();
        let (ts, phases, truth) = read_ground_truth(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(ts.len(), run.trace.len());
        assert_eq!(phases, run.phases);
        assert_eq!(truth, run.truth);
    }
}
