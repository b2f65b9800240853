//! Phase 2: per-branch utility and privacy labels, the replay buffers that
//! carry them, and the sigmoid confidence heads trained on those buffers.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{PearlError, Result};
use crate::nn::{LossKind, Optimizer, ParameterMask};
use crate::privacy::{ActionTrace, MIWindowConfig, TraceEntry};
use crate::qnet::{argmax, ConfidenceHeads, EEQNetwork};
use crate::seed::{Rng, SeedTree};

/// Sigmoid output at or above which a head counts as "confident".
pub const HEAD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub u: f64,
    pub p: f64,
    pub v: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { u: 0.75, p: 0.7, v: 0.8 }
    }
}

impl BudgetConfig {
    pub fn new(u: f64, p: f64, v: f64) -> Result<Self> {
        let b = Self { u, p, v };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("u", self.u), ("p", self.p), ("v", self.v)] {
            if !(x > 0.0 && x <= 1.0) {
                return Err(PearlError::InvalidArgument(format!("budget {name} = {x} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// `1` for every branch whose best Q-value reaches the fraction `u` of the
/// best Q-value over all branches. For a non-positive maximum the threshold
/// becomes `Q_max - (1 - u)|Q_max|`.
pub fn utility_labels(q_max_per_branch: &[f64], u: f64) -> Vec<u8> {
    let Some(q_max) = q_max_per_branch.iter().cloned().reduce(f64::max) else {
        return Vec::new();
    };
    let threshold = if q_max > 0.0 {
        u * q_max
    } else {
        q_max - (1.0 - u) * q_max.abs()
    };
    q_max_per_branch.iter().map(|q| u8::from(*q >= threshold)).collect()
}

/// `1` for every branch whose leakage stays strictly below `p · mi_max`.
/// With no leakage observed anywhere (`mi_max == 0`) every branch is private.
pub fn privacy_labels(mi_per_branch: &[f64], p: f64, mi_max: f64) -> Vec<u8> {
    if mi_max <= 0.0 {
        return vec![1; mi_per_branch.len()];
    }
    let threshold = p * mi_max;
    mi_per_branch.iter().map(|i| u8::from(*i < threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityLabelRecord {
    pub s: Vec<f64>,
    pub a: usize,
    pub ucl: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLabelRecord {
    pub s: Vec<f64>,
    pub a: usize,
    pub pcl: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBuffers {
    pub utility: Vec<UtilityLabelRecord>,
    pub privacy: Vec<PrivacyLabelRecord>,
}

/// Everything needed to label a Phase-2 rollout under any budget: per-step
/// best Q-value of every branch and per-window MI of every branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Data {
    pub states: Vec<Vec<f64>>,
    /// Executed action, taken from a uniformly drawn branch.
    pub actions: Vec<usize>,
    pub executed_branch: Vec<usize>,
    /// `q_max[t][b]`: best Q-value of branch `b` at step `t`.
    pub q_max: Vec<Vec<f64>>,
    /// `window_mi[w][b]`: MI of branch `b`'s greedy actions in window `w`.
    pub window_mi: Vec<Vec<f64>>,
    /// Running maximum of `window_mi` over all branches up to and including
    /// each window; the reference for that window's privacy labels.
    pub running_max: Vec<f64>,
    pub window_n: usize,
    /// Actions shared during the rollout, in the trace format.
    pub trace: ActionTrace,
}

impl Phase2Data {
    pub fn num_branches(&self) -> usize {
        self.q_max.first().map(Vec::len).unwrap_or(0)
    }

    pub fn num_windows(&self) -> usize {
        self.window_mi.len()
    }

    /// Largest windowed MI seen over the rollout.
    pub fn i_max(&self) -> f64 {
        self.running_max.last().copied().unwrap_or(0.0)
    }

    pub fn utility_labels_at(&self, t: usize, u: f64) -> Vec<u8> {
        utility_labels(&self.q_max[t], u)
    }

    pub fn privacy_labels_at(&self, window: usize, p: f64) -> Vec<u8> {
        privacy_labels(&self.window_mi[window], p, self.running_max[window])
    }

    /// Utility records for every step; privacy records for every step of a
    /// complete window, carrying that window's labels.
    pub fn label(&self, budgets: &BudgetConfig) -> ConfidenceBuffers {
        let utility = (0..self.states.len())
            .map(|t| UtilityLabelRecord {
                s: self.states[t].clone(),
                a: self.actions[t],
                ucl: self.utility_labels_at(t, budgets.u),
            })
            .collect();
        let mut privacy = Vec::with_capacity(self.num_windows() * self.window_n);
        for w in 0..self.num_windows() {
            let pcl = self.privacy_labels_at(w, budgets.p);
            for t in w * self.window_n..(w + 1) * self.window_n {
                privacy.push(PrivacyLabelRecord {
                    s: self.states[t].clone(),
                    a: self.actions[t],
                    pcl: pcl.clone(),
                });
            }
        }
        ConfidenceBuffers { utility, privacy }
    }

    /// Branches (0-based) for which both true labels are 1 on a strict
    /// majority of the steps covered by complete windows.
    pub fn eligible_branches(&self, u: f64, p: f64) -> Vec<usize> {
        let b_count = self.num_branches();
        let mut joint = vec![0usize; b_count];
        let mut total = 0usize;
        for w in 0..self.num_windows() {
            let pcl = self.privacy_labels_at(w, p);
            for t in w * self.window_n..(w + 1) * self.window_n {
                let ucl = self.utility_labels_at(t, u);
                for b in 0..b_count {
                    joint[b] += usize::from(ucl[b] == 1 && pcl[b] == 1);
                }
                total += 1;
            }
        }
        (0..b_count).filter(|b| 2 * joint[*b] > total).collect()
    }

    /// Mean windowed MI of each branch.
    pub fn mean_branch_mi(&self) -> Vec<f64> {
        let b_count = self.num_branches();
        let w = self.num_windows().max(1) as f64;
        (0..b_count)
            .map(|b| self.window_mi.iter().map(|row| row[b]).sum::<f64>() / w)
            .collect()
    }
}

/// Runs the network for `steps` steps, executing each step's action from a
/// uniformly drawn branch, and records per-branch Q maxima and windowed MI of
/// each branch's greedy actions on the visited states.
pub fn collect_phase2<E: Environment + ?Sized>(
    net: &EEQNetwork,
    env: &mut E,
    mi_cfg: &MIWindowConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<Phase2Data> {
    let b_count = net.num_branches();
    if b_count == 0 {
        return Err(PearlError::InvalidArgument("network has no branches".into()));
    }
    if steps < mi_cfg.window_n {
        return Err(PearlError::InvalidArgument(format!(
            "{steps} steps cannot fill one MI window of {}",
            mi_cfg.window_n
        )));
    }
    let mut obs = env.observation();
    let mut states = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    let mut executed_branch = Vec::with_capacity(steps);
    let mut q_max = Vec::with_capacity(steps);
    let mut greedy: Vec<Vec<usize>> = Vec::with_capacity(steps);
    let mut state_ids = Vec::with_capacity(steps);
    let mut trace = ActionTrace::new();
    for _ in 0..steps {
        let out = net.forward_all(&obs)?;
        let g: Vec<usize> = out.q.iter().map(|q| argmax(q)).collect();
        q_max.push(out.q.iter().map(|q| q[argmax(q)]).collect());
        let b = rng.random_range(0..b_count);
        let a = g[b];
        let s_id = env.state_id(mi_cfg.binning);
        trace.push(TraceEntry::new(
            env.step_index(),
            env.state_id(crate::privacy::StateBinning::Fine),
            env.state_id(crate::privacy::StateBinning::Coarse),
            a,
            b,
        ))?;
        state_ids.push(s_id);
        greedy.push(g);
        states.push(std::mem::take(&mut obs));
        actions.push(a);
        executed_branch.push(b);
        let step = env.step(a)?;
        obs = if step.terminal { env.reset() } else { step.observation };
    }
    let windows = steps / mi_cfg.window_n;
    let mut window_mi = Vec::with_capacity(windows);
    let mut running_max = Vec::with_capacity(windows);
    let mut current = 0.0_f64;
    for w in 0..windows {
        let range = w * mi_cfg.window_n..(w + 1) * mi_cfg.window_n;
        let row: Vec<f64> = (0..b_count)
            .map(|b| {
                let pairs: Vec<(usize, usize)> = range.clone().map(|t| (state_ids[t], greedy[t][b])).collect();
                mi_cfg.estimate(&pairs)
            })
            .collect();
        current = row.iter().cloned().fold(current, f64::max);
        window_mi.push(row);
        running_max.push(current);
    }
    Ok(Phase2Data {
        states,
        actions,
        executed_branch,
        q_max,
        window_mi,
        running_max,
        window_n: mi_cfg.window_n,
        trace,
    })
}

/// Builds Phase-2 buffers for one budget.
pub fn build_buffers<E: Environment + ?Sized>(
    net: &EEQNetwork,
    env: &mut E,
    mi_cfg: &MIWindowConfig,
    budgets: &BudgetConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<ConfidenceBuffers> {
    budgets.validate()?;
    Ok(collect_phase2(net, env, mi_cfg, steps, rng)?.label(budgets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of records held out for the accuracy report.
    pub holdout: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            holdout: 0.2,
        }
    }
}

/// Held-out accuracy of each branch's heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainReport {
    pub utility_accuracy: Vec<f64>,
    pub privacy_accuracy: Vec<f64>,
}

struct Sample {
    features: Vec<f64>,
    label: f64,
}

fn train_head(
    stack: &mut crate::nn::DenseStack,
    samples: &[Sample],
    cfg: &HeadTrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(PearlError::InvalidArgument("empty confidence buffer".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let holdout = ((samples.len() as f64) * cfg.holdout).round() as usize;
    let holdout = holdout.min(samples.len().saturating_sub(1));
    let (test, train) = order.split_at(holdout);
    let mut train = train.to_vec();
    let mut opt = Optimizer::adam(cfg.learning_rate)?;
    let mask = ParameterMask::none();
    for _ in 0..cfg.epochs {
        train.shuffle(rng);
        for chunk in train.chunks(cfg.batch_size.max(1)) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|i| samples[*i].features.clone()).collect();
            let ys: Vec<Vec<f64>> = chunk.iter().map(|i| vec![samples[*i].label]).collect();
            stack.train_batch(&xs, &ys, LossKind::Bce, &mask, &mut opt)?;
        }
    }
    let eval: &[usize] = if test.is_empty() { &train } else { test };
    let mut correct = 0usize;
    for i in eval {
        let y = stack.forward(&samples[*i].features)?[0];
        correct += usize::from((y >= HEAD_THRESHOLD) == (samples[*i].label >= 0.5));
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Trains fresh utility and privacy heads for every branch on the buffers.
/// Trunk and branch parameters are untouched, so Q-values do not change.
/// Branches train independently and in parallel, each on its own seed stream.
pub fn train_confidence_heads(
    net: &mut EEQNetwork,
    buffers: &ConfidenceBuffers,
    cfg: &HeadTrainConfig,
    seed: u64,
) -> Result<HeadTrainReport> {
    if buffers.utility.is_empty() || buffers.privacy.is_empty() {
        return Err(PearlError::InvalidArgument("confidence buffers must be non-empty".into()));
    }
    let b_count = net.num_branches();
    let tree = SeedTree::new(seed);
    let shared: &EEQNetwork = net;
    let trained: Vec<Result<(ConfidenceHeads, f64, f64)>> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            let mut rng = tree.stream(&format!("heads/{b}"));
            let mut heads = ConfidenceHeads::new(shared.trunk_width(), shared.head_width(), &mut rng);
            let depth = b + 1;
            let util: Vec<Sample> = buffers
                .utility
                .iter()
                .map(|r| {
                    Ok(Sample {
                        features: shared.features(&r.s, depth)?,
                        label: f64::from(r.ucl[b]),
                    })
                })
                .collect::<Result<_>>()?;
            let priv_: Vec<Sample> = buffers
                .privacy
                .iter()
                .map(|r| {
                    Ok(Sample {
                        features: shared.features(&r.s, depth)?,
                        label: f64::from(r.pcl[b]),
                    })
                })
                .collect::<Result<_>>()?;
            let ua = train_head(&mut heads.utility, &util, cfg, &mut rng)?;
            let pa = train_head(&mut heads.privacy, &priv_, cfg, &mut rng)?;
            Ok((heads, ua, pa))
        })
        .collect();
    let mut report = HeadTrainReport {
        utility_accuracy: Vec::with_capacity(b_count),
        privacy_accuracy: Vec::with_capacity(b_count),
    };
    for (b, r) in trained.into_iter().enumerate() {
        let (heads, ua, pa) = r?;
        net.set_confidence_heads(b, heads)?;
        report.utility_accuracy.push(ua);
        report.privacy_accuracy.push(pa);
    }
    Ok(report)
}

/// Eligibility grid: one row per `p`, one column per `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilityTable {
    pub u_values: Vec<f64>,
    pub p_values: Vec<f64>,
    /// `cells[row][col]`: eligible branches (0-based) for `(p_values[row], u_values[col])`.
    pub cells: Vec<Vec<Vec<usize>>>,
}

impl EligibilityTable {
    pub fn from_data(data: &Phase2Data, u_values: &[f64], p_values: &[f64]) -> Self {
        let cells = p_values
            .iter()
            .map(|p| u_values.iter().map(|u| data.eligible_branches(*u, *p)).collect())
            .collect();
        Self {
            u_values: u_values.to_vec(),
            p_values: p_values.to_vec(),
            cells,
        }
    }

    pub fn cell(&self, u: f64, p: f64) -> Option<&[usize]> {
        let col = self.u_values.iter().position(|x| (x - u).abs() < 1e-12)?;
        let row = self.p_values.iter().position(|x| (x - p).abs() < 1e-12)?;
        Some(&self.cells[row][col])
    }

    /// CSV with layers numbered from 1 (`1 6`) and `×` for an empty cell.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        write!(w, "p")?;
        for u in &self.u_values {
            write!(w, ",u={u}")?;
        }
        writeln!(w)?;
        for (p, row) in self.p_values.iter().zip(&self.cells) {
            write!(w, "{p}")?;
            for cell in row {
                if cell.is_empty() {
                    write!(w, ",×")?;
                } else {
                    let layers: Vec<String> = cell.iter().map(|b| (b + 1).to_string()).collect();
                    write!(w, ",{}", layers.join(" "))?;
                }
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes buffer records as `kind,window_or_step,s0..sN,a,label0..labelB`.
pub fn write_buffers_csv<W: Write>(buffers: &ConfidenceBuffers, w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    let dim = buffers.utility.first().map(|r| r.s.len()).unwrap_or(0);
    let b_count = buffers.utility.first().map(|r| r.ucl.len()).unwrap_or(0);
    write!(w, "kind,index")?;
    for i in 0..dim {
        write!(w, ",s{i}")?;
    }
    write!(w, ",a")?;
    for b in 0..b_count {
        write!(w, ",label{b}")?;
    }
    writeln!(w)?;
    let mut row = |kind: &str, i: usize, s: &[f64], a: usize, labels: &[u8]| -> std::io::Result<()> {
        write!(w, "{kind},{i}")?;
        for x in s {
            write!(w, ",{x}")?;
        }
        write!(w, ",{a}")?;
        for l in labels {
            write!(w, ",{l}")?;
        }
        writeln!(w)
    };
    for (i, r) in buffers.utility.iter().enumerate() {
        row("utility", i, &r.s, r.a, &r.ucl)?;
    }
    for (i, r) in buffers.privacy.iter().enumerate() {
        row("privacy", i, &r.s, r.a, &r.pcl)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ToyMdp;
    use crate::privacy::StateBinning;
    use crate::qnet::{train_phase1, QTrainConfig};

    #[test]
    fn utility_label_examples() {
        assert_eq!(utility_labels(&[10.0, 7.0, 9.6], 0.95), vec![1, 0, 1]);
        assert_eq!(utility_labels(&[1.0, 3.0, 2.0], 1.0), vec![0, 1, 0]);
        // non-positive maximum: threshold Q_max - (1-u)|Q_max| = -2 - 0.5 = -2.5
        assert_eq!(utility_labels(&[-2.0, -2.4, -3.0], 0.75), vec![1, 1, 0]);
        assert!(utility_labels(&[], 0.5).is_empty());
    }

    #[test]
    fn privacy_label_examples() {
        assert_eq!(privacy_labels(&[1.2, 0.6, 0.9], 0.7, 1.2), vec![0, 1, 0]);
        assert_eq!(privacy_labels(&[1.2, 0.6, 1.1], 1.0, 1.2), vec![0, 1, 1]);
        assert_eq!(privacy_labels(&[0.0, 0.0], 0.3, 0.0), vec![1, 1]);
    }

    #[test]
    fn budgets_are_range_checked() {
        assert!(BudgetConfig::new(0.0, 0.5, 0.5).is_err());
        assert!(BudgetConfig::new(1.0, 1.0, 1.0).is_ok());
        assert!(BudgetConfig::new(0.5, 1.1, 0.5).is_err());
    }

    fn toy_net() -> EEQNetwork {
        let cfg = QTrainConfig {
            steps_per_layer: 600,
            trunk_width: 8,
            head_width: 4,
            ..QTrainConfig::default()
        };
        let mut env = ToyMdp::new(10);
        train_phase1(&mut env, &cfg, 3, &mut SeedTree::new(4).stream("train")).unwrap().net
    }

    #[test]
    fn one_window_of_steps_gives_one_privacy_batch() {
        let net = toy_net();
        let mut env = ToyMdp::new(10);
        let cfg = MIWindowConfig::new(24, StateBinning::Coarse).unwrap();
        let mut rng = SeedTree::new(1).stream("p2");
        let buffers = build_buffers(&net, &mut env, &cfg, &BudgetConfig::default(), 24, &mut rng).unwrap();
        assert_eq!(buffers.utility.len(), 24);
        assert_eq!(buffers.privacy.len(), 24);
        assert!(buffers.privacy.windows(2).all(|w| w[0].pcl == w[1].pcl));
    }

    #[test]
    fn executed_branches_are_uniform() {
        let net = toy_net();
        let mut env = ToyMdp::new(10);
        let cfg = MIWindowConfig::new(50, StateBinning::Coarse).unwrap();
        let data = collect_phase2(&net, &mut env, &cfg, 3000, &mut SeedTree::new(2).stream("p2")).unwrap();
        let mut counts = [0usize; 3];
        for b in &data.executed_branch {
            counts[*b] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 3.0 * (3000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt());
        }
        assert!(data.running_max.windows(2).all(|w| w[1] >= w[0]));
        assert!(data.window_mi.iter().zip(&data.running_max).all(|(row, m)| row.iter().all(|i| i <= m)));
        assert_eq!(data.num_windows(), 60);
    }

    #[test]
    fn head_training_leaves_q_values_bit_identical() {
        let mut net = toy_net();
        let mut env = ToyMdp::new(10);
        let mi_cfg = MIWindowConfig::new(20, StateBinning::Coarse).unwrap();
        let data = collect_phase2(&net, &mut env, &mi_cfg, 200, &mut SeedTree::new(3).stream("p2")).unwrap();
        let before: Vec<Vec<f64>> = (0..3).map(|b| net.q_values(&[1.0, 0.0], b).unwrap()).collect();
        let hashes = net.stage_hashes();
        let cfg = HeadTrainConfig {
            epochs: 3,
            ..HeadTrainConfig::default()
        };
        train_confidence_heads(&mut net, &data.label(&BudgetConfig::default()), &cfg, 9).unwrap();
        let after: Vec<Vec<f64>> = (0..3).map(|b| net.q_values(&[1.0, 0.0], b).unwrap()).collect();
        assert_eq!(before, after);
        assert_eq!(hashes, net.stage_hashes());
        assert!(net.has_confidence_heads());
        let (u, p) = net.confidence(&[0.0, 1.0], 2).unwrap();
        assert!(u > 0.0 && u < 1.0 && p > 0.0 && p < 1.0);
    }

    #[test]
    fn eligibility_csv_marks_empty_cells() {
        let table = EligibilityTable {
            u_values: vec![0.75, 0.95],
            p_values: vec![0.7],
            cells: vec![vec![vec![0, 5], vec![]]],
        };
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "p,u=0.75,u=0.95\n0.7,1 6,×\n");
        assert_eq!(table.cell(0.95, 0.7), Some(&[][..]));
    }
}
