use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pearl_core::adversary::FeatureMode;
use pearl_core::harness::{self, EnvKind, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pearl", version, about = "Privacy-aware early-exit DQN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1 and Phase 2 training; writes the checkpoint and eligibility table.
    Train(Common),
    /// Budget sweep over the configured (u, p) grid.
    Sweep(Common),
    /// Budget-constrained inference at (u, p).
    Infer(Common),
    /// Clustering attack on a stored trace.
    Attack(AttackArgs),
    /// Behaviour-switch scenario with MI-triggered retraining.
    Drift(Common),
    /// Markdown digest of a run directory.
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment used when no config file is given.
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    v: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// 0-based human (thermal) or profile (VR).
    #[arg(long)]
    subject: Option<usize>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Overrides the Phase-1 steps per layer.
    #[arg(long)]
    steps_per_layer: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Trace CSV; defaults to the run directory's trace.csv.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Ground-truth CSV; defaults to the run directory's ground_truth.csv.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Cluster whole periods (days or lectures) instead of per-step samples.
    #[arg(long)]
    period_vectors: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Thermal,
    Vr,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.env) {
            (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(EnvArg::Vr)) => ExperimentConfig::for_env(EnvKind::Vr),
            (None, _) => ExperimentConfig::default(),
        };
        if let Some(u) = self.u {
            cfg.budgets.u = u;
        }
        if let Some(p) = self.p {
            cfg.budgets.p = p;
        }
        if let Some(v) = self.v {
            cfg.budgets.v = v;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(subject) = self.subject {
            cfg.subject = subject;
        }
        if let Some(dir) = &self.outdir {
            cfg.outdir = dir.clone();
        }
        if let Some(id) = &self.run_id {
            cfg.run_id = Some(id.clone());
        }
        if let Some(steps) = self.steps_per_layer {
            cfg.train.steps_per_layer = steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let (dir, out) = harness::cmd_train(&cfg)?;
            println!("run directory: {}", dir.path.display());
            for (b, u) in out.branch_utility.iter().enumerate() {
                println!("layer {:>2}: utility {u:.2}", b + 1);
            }
            println!("best branch: L{}", out.best_branch + 1);
            println!("phase-2 I_max: {:.3} bits", out.phase2.i_max());
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let out = harness::cmd_sweep(&cfg)?;
            let mut buf = Vec::new();
            out.eligibility.write_csv(&mut buf)?;
            print!("{}", String::from_utf8(buf)?);
            println!(
                "baseline L{}: utility {:.2}, accuracy {:.3}",
                out.best_branch + 1,
                out.baseline.utility.score,
                out.baseline.attack_accuracy
            );
            for cell in &out.cells {
                println!(
                    "u={} p={}: utility {:.2} (std {:.3}), accuracy {:.3}, infeasible {:.2}",
                    cell.u,
                    cell.p,
                    cell.eval.utility.score,
                    cell.eval.utility.std,
                    cell.eval.attack_accuracy,
                    cell.eval.infeasible_fraction
                );
            }
        }
        Command::Infer(c) => {
            let cfg = c.load()?;
            let s = harness::cmd_infer(&cfg)?;
            println!(
                "u={} p={}: utility {:.2} (std {:.3}), accuracy {:.3}, mean MI {:.3}, infeasible {:.2}",
                cfg.budgets.u,
                cfg.budgets.p,
                s.utility.score,
                s.utility.std,
                s.attack_accuracy,
                s.mean_mi,
                s.infeasible_fraction
            );
        }
        Command::Attack(a) => {
            let cfg = a.common.load()?;
            let dir = cfg.run_dir();
            let trace = a.trace.unwrap_or_else(|| dir.join("trace.csv"));
            let truth = a.truth.unwrap_or_else(|| dir.join("ground_truth.csv"));
            let read = |p: &PathBuf| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            let mut attack = cfg.attack_config();
            if a.period_vectors {
                attack.mode = FeatureMode::PeriodVector;
            }
            let period = harness::steps_per_day(cfg.env);
            let report = harness::cmd_attack(&read(&trace)?, &read(&truth)?, period, &attack, cfg.seed)?;
            let mut out = harness::RunDir::create(&cfg, "attack")?;
            report.write_wcss_csv(out.file("wcss.csv")?)?;
            report.write_assignments_csv(out.file("clusters.csv")?, None)?;
            out.write_str("attack.json", &report.to_json()?)?;
            out.finish()?;
            println!("elbow k = {}", report.k_selected);
            match report.accuracy {
                Some(acc) => println!("accuracy = {acc:.3}"),
                None => bail!("ground truth missing from the report"),
            }
        }
        Command::Drift(c) => {
            let cfg = c.load()?;
            let d = harness::cmd_drift(&cfg)?;
            println!("initial I_max {:.3}, switch at step {}", d.initial_i_max, d.switch_step);
            println!("triggers {:?}; control triggers {:?}", d.triggers, d.control_triggers);
            match d.recovery_days(harness::steps_per_day(cfg.env) as u64) {
                Some(days) => println!("recovered {days:.1} days after the trigger"),
                None => println!("no recovery observed"),
            }
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            print!("{}", harness::cmd_report(&cfg)?);
        }
    }
    Ok(())
}
