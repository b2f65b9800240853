//! Early-exit Q-network and its stage-wise (Phase 1) training.
//!
//! The trunk grows one layer per stage. Every trunk layer `i` feeds an exit
//! branch `i` (two dense layers producing one Q-value per action) and, after
//! Phase 2, a pair of sigmoid confidence heads. Running branch `i` only
//! touches trunk layers `0..=i`.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Environment;
use crate::error::{PearlError, Result};
use crate::nn::{
    backward_path, forward_path, forward_traced, read_layers, write_layers, Activation, DenseLayer,
    DenseStack, LayerGrad, Optimizer,
};
use crate::seed::Rng;

pub const DEFAULT_TRUNK_WIDTH: usize = 64;
pub const DEFAULT_HEAD_WIDTH: usize = 32;

/// Exit branch: ReLU hidden layer followed by a linear Q layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl Branch {
    pub fn new(in_dim: usize, head_width: usize, action_count: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: DenseLayer::new(in_dim, head_width, Activation::Relu, rng),
            output: DenseLayer::new(head_width, action_count, Activation::Linear, rng),
        }
    }

    pub fn zeros(in_dim: usize, head_width: usize, action_count: usize) -> Self {
        Self {
            hidden: DenseLayer::zeros(in_dim, head_width, Activation::Relu),
            output: DenseLayer::zeros(head_width, action_count, Activation::Linear),
        }
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        forward_path(&[&self.hidden, &self.output], features)
    }

    pub fn flops(&self) -> usize {
        self.hidden.flops() + self.output.flops()
    }
}

/// Utility and privacy confidence heads of one branch; each outputs a probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceHeads {
    pub utility: DenseStack,
    pub privacy: DenseStack,
}

impl ConfidenceHeads {
    pub fn new(in_dim: usize, head_width: usize, rng: &mut Rng) -> Self {
        let dims = [in_dim, head_width, 1];
        Self {
            utility: DenseStack::new(&dims, Activation::Relu, Activation::Sigmoid, rng),
            privacy: DenseStack::new(&dims, Activation::Relu, Activation::Sigmoid, rng),
        }
    }

    /// `(utility, privacy)` confidence for trunk features.
    pub fn evaluate(&self, features: &[f64]) -> Result<(f64, f64)> {
        Ok((
            self.utility.forward(features)?[0],
            self.privacy.forward(features)?[0],
        ))
    }
}

/// Per-branch results of a single trunk pass.
#[derive(Debug, Clone)]
pub struct ExitOutputs {
    /// Output of trunk layer `i`, the input of branch `i` and its heads.
    pub features: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EEQNetwork {
    state_dim: usize,
    action_count: usize,
    trunk_width: usize,
    head_width: usize,
    trunk: Vec<DenseLayer>,
    branches: Vec<Branch>,
    heads: Vec<Option<ConfidenceHeads>>,
}

impl EEQNetwork {
    pub fn new(state_dim: usize, action_count: usize, trunk_width: usize, head_width: usize) -> Result<Self> {
        if state_dim == 0 || action_count == 0 || trunk_width == 0 || head_width == 0 {
            return Err(PearlError::InvalidArgument(
                "network dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            state_dim,
            action_count,
            trunk_width,
            head_width,
            trunk: Vec::new(),
            branches: Vec::new(),
            heads: Vec::new(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn trunk_width(&self) -> usize {
        self.trunk_width
    }

    pub fn head_width(&self) -> usize {
        self.head_width
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn trunk(&self) -> &[DenseLayer] {
        &self.trunk
    }

    pub fn branch(&self, i: usize) -> Result<&Branch> {
        self.branches.get(i).ok_or(PearlError::BranchOutOfRange {
            branch: i,
            count: self.branches.len(),
        })
    }

    pub fn heads(&self, i: usize) -> Option<&ConfidenceHeads> {
        self.heads.get(i).and_then(Option::as_ref)
    }

    pub fn has_confidence_heads(&self) -> bool {
        !self.heads.is_empty() && self.heads.iter().all(Option::is_some)
    }

    fn stage_in_dim(&self) -> usize {
        if self.trunk.is_empty() {
            self.state_dim
        } else {
            self.trunk_width
        }
    }

    /// Appends a freshly initialised trunk layer and its branch; returns the branch index.
    pub fn add_stage(&mut self, rng: &mut Rng) -> usize {
        let layer = DenseLayer::new(self.stage_in_dim(), self.trunk_width, Activation::Relu, rng);
        let branch = Branch::new(self.trunk_width, self.head_width, self.action_count, rng);
        self.push_stage(layer, branch).expect("shapes built from the network's own dimensions")
    }

    /// Appends a given trunk layer and branch after checking their shapes.
    pub fn push_stage(&mut self, layer: DenseLayer, branch: Branch) -> Result<usize> {
        let in_dim = self.stage_in_dim();
        let checks = [
            (layer.in_dim(), in_dim),
            (layer.out_dim(), self.trunk_width),
            (branch.hidden.in_dim(), self.trunk_width),
            (branch.hidden.out_dim(), branch.output.in_dim()),
            (branch.output.out_dim(), self.action_count),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(PearlError::DimensionMismatch { expected, actual });
            }
        }
        self.trunk.push(layer);
        self.branches.push(branch);
        self.heads.push(None);
        Ok(self.branches.len() - 1)
    }

    pub fn set_confidence_heads(&mut self, branch: usize, heads: ConfidenceHeads) -> Result<()> {
        self.branch(branch)?;
        if heads.utility.input_dim() != self.trunk_width || heads.privacy.input_dim() != self.trunk_width {
            return Err(PearlError::DimensionMismatch {
                expected: self.trunk_width,
                actual: heads.utility.input_dim(),
            });
        }
        self.heads[branch] = Some(heads);
        Ok(())
    }

    pub fn clear_confidence_heads(&mut self) {
        self.heads.iter_mut().for_each(|h| *h = None);
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(PearlError::DimensionMismatch {
                expected: self.state_dim,
                actual: s.len(),
            });
        }
        Ok(())
    }

    /// Output of the first `depth` trunk layers (`depth = 0` returns the state).
    pub fn features(&self, s: &[f64], depth: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        if depth > self.trunk.len() {
            return Err(PearlError::BranchOutOfRange {
                branch: depth,
                count: self.trunk.len(),
            });
        }
        if depth == 0 {
            return Ok(s.to_vec());
        }
        let refs: Vec<&DenseLayer> = self.trunk[..depth].iter().collect();
        forward_path(&refs, s)
    }

    pub fn q_values(&self, s: &[f64], branch: usize) -> Result<Vec<f64>> {
        self.branch(branch)?;
        let f = self.features(s, branch + 1)?;
        self.branches[branch].forward(&f)
    }

    pub fn greedy_action(&self, s: &[f64], branch: usize) -> Result<usize> {
        Ok(argmax(&self.q_values(s, branch)?))
    }

    /// Runs the whole trunk once and evaluates every branch.
    pub fn forward_all(&self, s: &[f64]) -> Result<ExitOutputs> {
        self.check_state(s)?;
        let mut features = Vec::with_capacity(self.trunk.len());
        let mut q = Vec::with_capacity(self.trunk.len());
        let mut cur = s.to_vec();
        for (layer, branch) in self.trunk.iter().zip(&self.branches) {
            cur = layer.forward(&cur)?;
            q.push(branch.forward(&cur)?);
            features.push(cur.clone());
        }
        Ok(ExitOutputs { features, q })
    }

    /// `(utility, privacy)` confidence of a branch at state `s`.
    pub fn confidence(&self, s: &[f64], branch: usize) -> Result<(f64, f64)> {
        let heads = self.heads(branch).ok_or_else(|| {
            PearlError::InvalidArgument(format!("branch {branch} has no confidence heads"))
        })?;
        heads.evaluate(&self.features(s, branch + 1)?)
    }

    /// Multiply-accumulate cost (2 flops each) of computing Q-values at `branch`.
    pub fn flops(&self, branch: usize) -> Result<usize> {
        let b = self.branch(branch)?;
        Ok(self.trunk[..=branch].iter().map(DenseLayer::flops).sum::<usize>() + b.flops())
    }

    /// Hash of trunk layer `i` together with its branch.
    pub fn stage_hash(&self, i: usize) -> Result<String> {
        let b = self.branch(i)?;
        let mut hasher = Sha256::new();
        for layer in [&self.trunk[i], &b.hidden, &b.output] {
            hasher.update(layer.param_hash().as_bytes());
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn stage_hashes(&self) -> Vec<String> {
        (0..self.branches.len())
            .map(|i| self.stage_hash(i).expect("index in range"))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.iter().all(DenseLayer::is_finite)
            && self.branches.iter().all(|b| b.hidden.is_finite() && b.output.is_finite())
    }

    pub(crate) fn stage_layers_mut(&mut self, i: usize) -> (&mut DenseLayer, &mut Branch) {
        (&mut self.trunk[i], &mut self.branches[i])
    }

    /// Serializes to the layer checkpoint format followed by an index table
    /// mapping each stored layer to its role.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut layers: Vec<&DenseLayer> = Vec::new();
        let mut index: Vec<(LayerRole, u32, u32)> = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            layers.push(layer);
            index.push((LayerRole::Trunk, i as u32, 0));
        }
        for (i, b) in self.branches.iter().enumerate() {
            layers.push(&b.hidden);
            index.push((LayerRole::Branch, i as u32, 0));
            layers.push(&b.output);
            index.push((LayerRole::Branch, i as u32, 1));
        }
        for (i, heads) in self.heads.iter().enumerate() {
            if let Some(h) = heads {
                for (role, stack) in [(LayerRole::UtilityHead, &h.utility), (LayerRole::PrivacyHead, &h.privacy)] {
                    for (k, layer) in stack.layers().iter().enumerate() {
                        layers.push(layer);
                        index.push((role, i as u32, k as u32));
                    }
                }
            }
        }
        let mut buf = Vec::new();
        write_layers(&mut buf, &layers).expect("writing to a Vec cannot fail");
        buf.extend_from_slice(INDEX_MAGIC);
        for v in [self.state_dim, self.action_count, self.trunk_width, self.head_width, index.len()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (role, owner, pos) in index {
            buf.push(role as u8);
            buf.extend_from_slice(&owner.to_le_bytes());
            buf.extend_from_slice(&pos.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let layers = read_layers(&mut cursor)?;
        let mut r = Reader(cursor);
        if r.take(8)? != INDEX_MAGIC {
            return Err(PearlError::Checkpoint("missing index table".into()));
        }
        let state_dim = r.u32()? as usize;
        let action_count = r.u32()? as usize;
        let trunk_width = r.u32()? as usize;
        let head_width = r.u32()? as usize;
        let count = r.u32()? as usize;
        if count != layers.len() {
            return Err(PearlError::Checkpoint(format!(
                "index table lists {count} layers, checkpoint has {}",
                layers.len()
            )));
        }
        let mut trunk = Vec::new();
        let mut branch_layers: Vec<Vec<DenseLayer>> = Vec::new();
        let mut head_layers: Vec<[Vec<DenseLayer>; 2]> = Vec::new();
        for layer in layers {
            let role = LayerRole::from_code(r.take(1)?[0])?;
            let owner = r.u32()? as usize;
            let pos = r.u32()? as usize;
            let slot = |v: &mut Vec<Vec<DenseLayer>>| {
                if v.len() <= owner {
                    v.resize_with(owner + 1, Vec::new);
                }
            };
            let misplaced = || PearlError::Checkpoint(format!("layer {role:?} {owner}/{pos} out of order"));
            match role {
                LayerRole::Trunk => {
                    if owner != trunk.len() {
                        return Err(misplaced());
                    }
                    trunk.push(layer);
                }
                LayerRole::Branch => {
                    slot(&mut branch_layers);
                    if pos != branch_layers[owner].len() {
                        return Err(misplaced());
                    }
                    branch_layers[owner].push(layer);
                }
                LayerRole::UtilityHead | LayerRole::PrivacyHead => {
                    if head_layers.len() <= owner {
                        head_layers.resize_with(owner + 1, Default::default);
                    }
                    let k = (role == LayerRole::PrivacyHead) as usize;
                    if pos != head_layers[owner][k].len() {
                        return Err(misplaced());
                    }
                    head_layers[owner][k].push(layer);
                }
            }
        }
        if !r.0.is_empty() {
            return Err(PearlError::Checkpoint("trailing bytes after index table".into()));
        }
        let mut net = Self::new(state_dim, action_count, trunk_width, head_width)?;
        if branch_layers.len() != trunk.len() {
            return Err(PearlError::Checkpoint("branch count differs from trunk depth".into()));
        }
        for (layer, mut b) in trunk.into_iter().zip(branch_layers) {
            if b.len() != 2 {
                return Err(PearlError::Checkpoint("branch must have two layers".into()));
            }
            let output = b.pop().expect("len 2");
            let hidden = b.pop().expect("len 2");
            net.push_stage(layer, Branch { hidden, output })?;
        }
        for (i, [u, p]) in head_layers.into_iter().enumerate() {
            if u.is_empty() && p.is_empty() {
                continue;
            }
            let heads = ConfidenceHeads {
                utility: DenseStack::from_layers(u)?,
                privacy: DenseStack::from_layers(p)?,
            };
            net.set_confidence_heads(i, heads)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn checkpoint_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

const INDEX_MAGIC: &[u8; 8] = b"PEARLIDX";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum LayerRole {
    Trunk = 0,
    Branch = 1,
    UtilityHead = 2,
    PrivacyHead = 3,
}

impl LayerRole {
    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Self::Trunk,
            1 => Self::Branch,
            2 => Self::UtilityHead,
            3 => Self::PrivacyHead,
            _ => return Err(PearlError::Checkpoint(format!("bad layer role {c}"))),
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(PearlError::Checkpoint("truncated index table".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Branch with the highest utility score; ties go to the lower index.
pub fn best_utility_branch(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(PearlError::InvalidArgument("no branch scores".into()));
    }
    Ok(argmax(scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(PearlError::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stores a transition, overwriting the oldest once full; returns its slot.
    pub fn push(&mut self, t: Transition) -> usize {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        slot
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.items.get(slot)
    }

    /// Slots drawn uniformly with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..batch).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    /// Transitions in insertion order, oldest first.
    pub fn iter_chronological(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QTrainConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of each stage over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub batch_size: usize,
    pub target_sync_interval: usize,
    pub steps_per_layer: usize,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    /// Transitions collected in a stage before gradient updates start.
    pub learn_start: usize,
    pub trunk_width: usize,
    pub head_width: usize,
}

impl Default for QTrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            batch_size: 16,
            target_sync_interval: 500,
            steps_per_layer: 20_000,
            learning_rate: 1e-3,
            replay_capacity: 10_000,
            learn_start: 200,
            trunk_width: DEFAULT_TRUNK_WIDTH,
            head_width: DEFAULT_HEAD_WIDTH,
        }
    }
}

impl QTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PearlError::InvalidArgument(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync_interval == 0 {
            return bad("batch size, replay capacity and sync interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon decay fraction must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    /// ε at `step` of a stage with `stage_steps` steps.
    pub fn epsilon(&self, step: usize, stage_steps: usize) -> f64 {
        let decay = self.epsilon_decay_fraction * stage_steps as f64;
        if decay <= 0.0 || step as f64 >= decay {
            return self.epsilon_end;
        }
        let frac = step as f64 / decay;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// One row of the training log, written at the end of each episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub step: u64,
    pub layer_stage: usize,
    pub epsilon: f64,
    /// Mean TD loss over the episode's updates (0 before learning starts).
    pub loss: f64,
    pub episode_return: f64,
}

pub fn write_training_log<W: std::io::Write>(w: W, rows: &[EpisodeLog]) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "step,layer_stage,epsilon,loss,episode_return")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.layer_stage, r.epsilon, r.loss, r.episode_return)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub net: EEQNetwork,
    pub log: Vec<EpisodeLog>,
    /// `stage_hashes()` snapshot taken when each stage finished.
    pub freeze_hashes: Vec<Vec<String>>,
    /// Replay memory at the end of training.
    pub replay: ReplayBuffer,
}

/// Trains stage by stage: each stage adds a fresh trunk layer and branch and
/// trains only those, with all earlier stages frozen.
pub fn train_phase1<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &QTrainConfig,
    n_layers: usize,
    rng: &mut Rng,
) -> Result<Phase1Output> {
    cfg.validate()?;
    if n_layers == 0 {
        return Err(PearlError::InvalidArgument("n_layers must be at least 1".into()));
    }
    let mut net = EEQNetwork::new(env.observation_dim(), env.action_count(), cfg.trunk_width, cfg.head_width)?;
    let mut trainer = StageTrainer::new(cfg, env.reset())?;
    let mut freeze_hashes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let stage = net.add_stage(rng);
        trainer.run_stage(&mut net, env, stage, cfg.steps_per_layer, rng)?;
        freeze_hashes.push(net.stage_hashes());
    }
    Ok(Phase1Output {
        net,
        log: trainer.log,
        freeze_hashes,
        replay: trainer.replay,
    })
}

/// Continues training every stage in order for `steps` total environment
/// steps, keeping the stage-wise freezing rule, starting from `replay`.
pub fn fine_tune<E: Environment + ?Sized>(
    net: &mut EEQNetwork,
    env: &mut E,
    cfg: &QTrainConfig,
    steps: usize,
    replay: ReplayBuffer,
    rng: &mut Rng,
) -> Result<Vec<EpisodeLog>> {
    cfg.validate()?;
    let n = net.num_branches();
    if n == 0 {
        return Err(PearlError::InvalidArgument("cannot fine-tune an empty network".into()));
    }
    let mut trainer = StageTrainer::new(cfg, env.observation())?;
    trainer.replay = replay;
    let fine_cfg = QTrainConfig {
        epsilon_start: cfg.epsilon_end,
        learn_start: 0,
        ..cfg.clone()
    };
    trainer.cfg = fine_cfg;
    for stage in 0..n {
        let share = steps / n + usize::from(stage < steps % n);
        trainer.run_stage(net, env, stage, share, rng)?;
    }
    Ok(trainer.log)
}

struct StageTrainer {
    cfg: QTrainConfig,
    replay: ReplayBuffer,
    log: Vec<EpisodeLog>,
    obs: Vec<f64>,
    global_step: u64,
    episode_return: f64,
    episode_loss: f64,
    episode_updates: usize,
}

/// Frozen-prefix features of a transition's two states.
type CachedFeatures = (Vec<f64>, Vec<f64>);

impl StageTrainer {
    fn new(cfg: &QTrainConfig, obs: Vec<f64>) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            replay: ReplayBuffer::new(cfg.replay_capacity)?,
            log: Vec::new(),
            obs,
            global_step: 0,
            episode_return: 0.0,
            episode_loss: 0.0,
            episode_updates: 0,
        })
    }

    fn run_stage<E: Environment + ?Sized>(
        &mut self,
        net: &mut EEQNetwork,
        env: &mut E,
        stage: usize,
        steps: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let cfg = self.cfg.clone();
        // The trunk below `stage` is frozen, so its output can be cached per state.
        let mut cache: Vec<CachedFeatures> = Vec::with_capacity(self.replay.len());
        for t in self.replay.iter() {
            cache.push((net.features(&t.s, stage)?, net.features(&t.s_next, stage)?));
        }
        let mut optimizer = Optimizer::adam(cfg.learning_rate)?;
        let mut target = stage_copy(net, stage);
        let mut stage_updates = 0usize;
        self.episode_return = 0.0;
        self.episode_loss = 0.0;
        self.episode_updates = 0;
        let mut feat = net.features(&self.obs, stage)?;
        for step in 0..steps {
            let epsilon = cfg.epsilon(step, steps);
            let action = if rng.random::<f64>() < epsilon {
                rng.random_range(0..net.action_count())
            } else {
                let (layer, branch) = stage_ref(net, stage);
                argmax(&forward_path(&[layer, &branch.hidden, &branch.output], &feat)?)
            };
            let out = env.step(action)?;
            if !out.reward.is_finite() {
                return Err(PearlError::InvalidArgument(format!("non-finite reward {}", out.reward)));
            }
            let feat_next = net.features(&out.observation, stage)?;
            let slot = self.replay.push(Transition {
                s: std::mem::take(&mut self.obs),
                a: action,
                r: out.reward,
                s_next: out.observation.clone(),
                done: out.terminal,
            });
            let entry = (feat, feat_next.clone());
            if slot < cache.len() {
                cache[slot] = entry;
            } else {
                cache.push(entry);
            }
            self.episode_return += out.reward;
            self.global_step += 1;

            if step + 1 >= cfg.learn_start && self.replay.len() >= cfg.batch_size {
                let loss = self.update(net, stage, &target, &cache, &mut optimizer, rng)?;
                self.episode_loss += loss;
                self.episode_updates += 1;
                stage_updates += 1;
                if stage_updates % cfg.target_sync_interval == 0 {
                    target = stage_copy(net, stage);
                }
            }

            if out.terminal {
                self.obs = env.reset();
                feat = net.features(&self.obs, stage)?;
            } else {
                self.obs = out.observation;
                feat = feat_next;
            }
            if out.episode_end || out.terminal {
                self.log.push(EpisodeLog {
                    step: self.global_step,
                    layer_stage: stage,
                    epsilon,
                    loss: if self.episode_updates > 0 {
                        self.episode_loss / self.episode_updates as f64
                    } else {
                        0.0
                    },
                    episode_return: self.episode_return,
                });
                self.episode_return = 0.0;
                self.episode_loss = 0.0;
                self.episode_updates = 0;
            }
        }
        Ok(())
    }

    fn update(
        &mut self,
        net: &mut EEQNetwork,
        stage: usize,
        target: &[DenseLayer; 3],
        cache: &[CachedFeatures],
        optimizer: &mut Optimizer,
        rng: &mut Rng,
    ) -> Result<f64> {
        let gamma = self.cfg.gamma;
        let idx = self.replay.sample_indices(self.cfg.batch_size, rng);
        let target_refs: Vec<&DenseLayer> = target.iter().collect();
        let mut grads: Vec<Option<LayerGrad>> = vec![None; 3];
        let mut total = 0.0;
        {
            let (layer, branch) = stage_ref(net, stage);
            let path = [layer, &branch.hidden, &branch.output];
            for &i in &idx {
                let t = self.replay.get(i).expect("sampled slot exists");
                let (f, f_next) = &cache[i];
                let bootstrap = if t.done {
                    0.0
                } else {
                    let q_next = forward_path(&target_refs, f_next)?;
                    q_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                };
                let y = t.r + gamma * bootstrap;
                let trace = forward_traced(&path, f)?;
                let delta = trace.output()[t.a] - y;
                total += 0.5 * delta * delta;
                let mut grad_out = vec![0.0; net.action_count()];
                grad_out[t.a] = delta;
                backward_path(&path, &trace, &grad_out, &[true; 3], &mut grads)?;
            }
        }
        let n = idx.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(PearlError::Divergence {
                loss,
                context: format!("TD update at stage {stage}, step {}", self.global_step),
            });
        }
        optimizer.begin_step();
        let (layer, branch) = net.stage_layers_mut(stage);
        let slots: [&mut DenseLayer; 3] = [layer, &mut branch.hidden, &mut branch.output];
        for (slot, (layer, grad)) in slots.into_iter().zip(grads.iter_mut()).enumerate() {
            if let Some(g) = grad {
                g.scale(1.0 / n);
                optimizer.update(slot, layer, g)?;
            }
        }
        Ok(loss)
    }
}

fn stage_ref(net: &EEQNetwork, stage: usize) -> (&DenseLayer, &Branch) {
    (&net.trunk[stage], &net.branches[stage])
}

fn stage_copy(net: &EEQNetwork, stage: usize) -> [DenseLayer; 3] {
    let (layer, branch) = stage_ref(net, stage);
    [layer.clone(), branch.hidden.clone(), branch.output.clone()]
}

/// Greedy rollout of one branch; returns per-step rewards and utility metrics.
pub fn rollout_branch<E: Environment + ?Sized>(
    net: &EEQNetwork,
    env: &mut E,
    branch: usize,
    steps: usize,
) -> Result<RolloutStats> {
    net.branch(branch)?;
    let mut obs = env.observation();
    let mut stats = RolloutStats::default();
    for _ in 0..steps {
        let a = net.greedy_action(&obs, branch)?;
        let out = env.step(a)?;
        stats.rewards.push(out.reward);
        stats.actions.push(a);
        if let Some(m) = out.metric {
            stats.metrics.push(m);
        }
        obs = if out.terminal { env.reset() } else { out.observation };
    }
    Ok(stats)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutStats {
    pub rewards: Vec<f64>,
    pub actions: Vec<usize>,
    pub metrics: Vec<f64>,
}

impl RolloutStats {
    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }
}

/// Utility score of every branch from independent greedy rollouts, each on a
/// fresh environment built by `make_env`.
pub fn branch_utility_scores<E, F>(net: &EEQNetwork, make_env: F, steps: usize) -> Result<Vec<f64>>
where
    E: Environment,
    F: Fn(usize) -> Result<E>,
{
    (0..net.num_branches())
        .map(|b| {
            let mut env = make_env(b)?;
            env.reset();
            let stats = rollout_branch(net, &mut env, b, steps)?;
            Ok(env.utility_score(&stats.metrics))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ToyMdp;
    use crate::seed::SeedTree;

    fn rng(name: &str) -> Rng {
        SeedTree::new(21).stream(name)
    }

    fn net_with(stages: usize) -> EEQNetwork {
        let mut net = EEQNetwork::new(3, 4, 8, 5).unwrap();
        let mut r = rng("net");
        for _ in 0..stages {
            net.add_stage(&mut r);
        }
        net
    }

    #[test]
    fn zero_branch_gives_zero_q() {
        let mut net = EEQNetwork::new(3, 4, 8, 5).unwrap();
        let layer = DenseLayer::new(3, 8, Activation::Relu, &mut rng("z"));
        net.push_stage(layer, Branch::zeros(8, 5, 4)).unwrap();
        assert_eq!(net.q_values(&[0.3, -1.0, 2.0], 0).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn q_values_match_manual_composition() {
        let net = net_with(2);
        let s = [0.5, -0.25, 1.5];
        let h1 = net.trunk()[0].forward(&s).unwrap();
        let h2 = net.trunk()[1].forward(&h1).unwrap();
        let b = net.branch(1).unwrap();
        let manual = b.output.forward(&b.hidden.forward(&h2).unwrap()).unwrap();
        assert_eq!(net.q_values(&s, 1).unwrap(), manual);
        let all = net.forward_all(&s).unwrap();
        assert_eq!(all.q[1], manual);
        assert_eq!(all.q[0], net.q_values(&s, 0).unwrap());
    }

    #[test]
    fn branch_out_of_range_is_an_error() {
        let net = net_with(2);
        assert!(matches!(
            net.q_values(&[0.0; 3], 2),
            Err(PearlError::BranchOutOfRange { branch: 2, count: 2 })
        ));
        assert!(net.q_values(&[0.0; 2], 0).is_err());
    }

    #[test]
    fn flops_strictly_increase_with_depth() {
        let net = net_with(5);
        let f: Vec<usize> = (0..5).map(|i| net.flops(i).unwrap()).collect();
        assert!(f.windows(2).all(|w| w[0] < w[1]), "{f:?}");
    }

    #[test]
    fn checkpoint_round_trips_with_heads() {
        let mut net = net_with(3);
        net.set_confidence_heads(1, ConfidenceHeads::new(8, 5, &mut rng("h"))).unwrap();
        let bytes = net.to_bytes();
        let back = EEQNetwork::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);
        assert!(EEQNetwork::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(best_utility_branch(&[0.5, 0.9, 0.9]).unwrap(), 1);
        assert_eq!(best_utility_branch(&[0.2]).unwrap(), 0);
        assert!(best_utility_branch(&[]).is_err());
    }

    #[test]
    fn replay_keeps_capacity_and_order() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(Transition {
                s: vec![i as f64],
                a: 0,
                r: 0.0,
                s_next: vec![],
                done: false,
            });
        }
        assert_eq!(buf.len(), 3);
        let order: Vec<f64> = buf.iter_chronological().map(|t| t.s[0]).collect();
        assert_eq!(order, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let n = 50;
        let mut buf = ReplayBuffer::new(n).unwrap();
        for i in 0..n {
            buf.push(Transition {
                s: vec![i as f64],
                a: 0,
                r: 0.0,
                s_next: vec![],
                done: false,
            });
        }
        let draws = 100_000;
        let mut hist = vec![0usize; n];
        for i in buf.sample_indices(draws, &mut rng("replay")) {
            hist[i] += 1;
        }
        let p = 1.0 / n as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in hist {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma + 1.0, "{c} vs {mean}");
        }
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = QTrainConfig::default();
        assert_eq!(cfg.epsilon(0, 1000), 1.0);
        assert!((cfg.epsilon(250, 1000) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon(500, 1000), 0.05);
        assert_eq!(cfg.epsilon(999, 1000), 0.05);
    }

    #[test]
    fn single_layer_training_solves_toy_mdp_and_freezes() {
        let cfg = QTrainConfig {
            steps_per_layer: 1500,
            trunk_width: 16,
            head_width: 8,
            ..QTrainConfig::default()
        };
        let mut env = ToyMdp::new(20);
        let out = train_phase1(&mut env, &cfg, 2, &mut rng("toy")).unwrap();
        assert_eq!(out.net.num_branches(), 2);
        assert_eq!(out.freeze_hashes[0][0], out.freeze_hashes[1][0]);
        for b in 0..2 {
            for s in 0..2 {
                let mut obs = vec![0.0; 2];
                obs[s] = 1.0;
                assert_eq!(out.net.greedy_action(&obs, b).unwrap(), s);
            }
        }
        assert!(!out.log.is_empty());
        let mut csv = Vec::new();
        write_training_log(&mut csv, &out.log).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,layer_stage,epsilon,loss,episode_return\n"));
    }
}
