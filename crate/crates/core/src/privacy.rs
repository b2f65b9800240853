//! Plug-in mutual information between shared actions and private states,
//! evaluated over non-overlapping windows of an action trace.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{PearlError, Result};

/// Which discrete state id of a trace entry the estimator pairs with actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateBinning {
    /// Environment's full discretisation (thermal: activity × rounded temperature).
    Fine,
    /// Private component only (thermal: activity; VR: the 8 human states).
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    PlugIn,
    /// Plug-in plus the Miller–Madow bias correction, floored at zero.
    MillerMadow,
}

/// One step of the action stream visible to the cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: u64,
    pub s_id: usize,
    pub s_coarse: usize,
    pub a_id: usize,
    pub branch: usize,
    pub feasible: bool,
    pub i_current: Option<f64>,
    pub trigger: bool,
}

impl TraceEntry {
    pub fn new(t: u64, s_id: usize, s_coarse: usize, a_id: usize, branch: usize) -> Self {
        Self {
            t,
            s_id,
            s_coarse,
            a_id,
            branch,
            feasible: true,
            i_current: None,
            trigger: false,
        }
    }

    pub fn state(&self, binning: StateBinning) -> usize {
        match binning {
            StateBinning::Fine => self.s_id,
            StateBinning::Coarse => self.s_coarse,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionTrace {
    entries: Vec<TraceEntry>,
}

impl ActionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TraceEntry>) -> Result<Self> {
        let mut trace = Self::new();
        for e in entries {
            trace.push(e)?;
        }
        Ok(trace)
    }

    /// Appends an entry; step indices must be strictly increasing.
    pub fn push(&mut self, entry: TraceEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.t <= last.t {
                return Err(PearlError::InvalidArgument(format!(
                    "trace steps must increase: {} after {}",
                    entry.t, last.t
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [TraceEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pairs(&self, binning: StateBinning) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .map(|e| (e.state(binning), e.a_id))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,s_id,s_coarse,a_id,branch,feasible,i_current,trigger")?;
        for e in &self.entries {
            let i = e.i_current.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                e.t, e.s_id, e.s_coarse, e.a_id, e.branch, e.feasible as u8, i, e.trigger as u8
            )?;
        }
        Ok(())
    }

    /// Parses the CSV written by [`ActionTrace::write_csv`]. Columns are looked
    /// up by header name; `s_coarse` falls back to `s_id` when absent.
    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| PearlError::Schema("empty trace file".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        let col = |name: &str| header.iter().position(|h| *h == name);
        let need = |name: &str| {
            col(name).ok_or_else(|| PearlError::Schema(format!("trace is missing column `{name}`")))
        };
        let (ct, cs, ca, cb) = (need("t")?, need("s_id")?, need("a_id")?, need("branch")?);
        let (cc, cf, ci, cg) = (col("s_coarse"), col("feasible"), col("i_current"), col("trigger"));
        let mut trace = Self::new();
        for (lineno, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != header.len() {
                return Err(PearlError::Schema(format!(
                    "row {} has {} cells, header has {}",
                    lineno + 2,
                    cells.len(),
                    header.len()
                )));
            }
            let num = |i: usize| -> Result<u64> {
                cells[i].parse::<u64>().map_err(|_| {
                    PearlError::Schema(format!("row {}: bad integer `{}`", lineno + 2, cells[i]))
                })
            };
            let s_id = num(cs)? as usize;
            let mut entry = TraceEntry::new(
                num(ct)?,
                s_id,
                cc.map(|c| num(c).map(|v| v as usize)).transpose()?.unwrap_or(s_id),
                num(ca)? as usize,
                num(cb)? as usize,
            );
            if let Some(c) = cf {
                entry.feasible = num(c)? != 0;
            }
            if let Some(c) = ci {
                entry.i_current = if cells[c].is_empty() {
                    None
                } else {
                    Some(cells[c].parse().map_err(|_| {
                        PearlError::Schema(format!("row {}: bad real `{}`", lineno + 2, cells[c]))
                    })?)
                };
            }
            if let Some(c) = cg {
                entry.trigger = num(c)? != 0;
            }
            trace.push(entry)?;
        }
        Ok(trace)
    }
}

/// Plug-in estimate of I(S; A) in bits from `(state, action)` samples.
pub fn mutual_information(window: &[(usize, usize)]) -> f64 {
    mutual_information_with(window, Estimator::PlugIn)
}

pub fn mutual_information_with(window: &[(usize, usize)], estimator: Estimator) -> f64 {
    assert!(!window.is_empty(), "mutual information of an empty window");
    let n = window.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut states: BTreeMap<usize, usize> = BTreeMap::new();
    let mut actions: BTreeMap<usize, usize> = BTreeMap::new();
    for &(s, a) in window {
        *joint.entry((s, a)).or_default() += 1;
        *states.entry(s).or_default() += 1;
        *actions.entry(a).or_default() += 1;
    }
    let mut bits = 0.0;
    for (&(s, a), &c) in &joint {
        let c = c as f64;
        let ps = states[&s] as f64;
        let pa = actions[&a] as f64;
        bits += c / n * (c * n / (ps * pa)).log2();
    }
    if estimator == Estimator::MillerMadow {
        let dof = states.len() as f64 + actions.len() as f64 - joint.len() as f64 - 1.0;
        bits += dof / (2.0 * n * std::f64::consts::LN_2);
    }
    bits.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIWindowConfig {
    pub window_n: usize,
    pub binning: StateBinning,
    #[serde(default)]
    pub estimator: Estimator,
}

impl MIWindowConfig {
    pub fn new(window_n: usize, binning: StateBinning) -> Result<Self> {
        if window_n == 0 {
            return Err(PearlError::InvalidArgument("window_n must be at least 1".into()));
        }
        Ok(Self {
            window_n,
            binning,
            estimator: Estimator::PlugIn,
        })
    }

    pub fn estimate(&self, window: &[(usize, usize)]) -> f64 {
        mutual_information_with(window, self.estimator)
    }
}

impl Default for MIWindowConfig {
    /// One simulated week of hourly steps, pairing actions with the private state.
    fn default() -> Self {
        Self {
            window_n: 168,
            binning: StateBinning::Coarse,
            estimator: Estimator::PlugIn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIPoint {
    /// `None` when the series is computed over the whole trace.
    pub branch: Option<usize>,
    pub window_start: u64,
    pub bits: f64,
    pub max_so_far: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MISeries {
    pub points: Vec<MIPoint>,
    pub i_max: f64,
}

impl MISeries {
    pub fn for_branch(&self, branch: Option<usize>) -> impl Iterator<Item = &MIPoint> {
        self.points.iter().filter(move |p| p.branch == branch)
    }

    pub fn push(&mut self, branch: Option<usize>, window_start: u64, bits: f64) {
        self.i_max = self.i_max.max(bits);
        self.points.push(MIPoint {
            branch,
            window_start,
            bits,
            max_so_far: self.i_max,
        });
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "branch,window_start,I_bits,I_max_so_far")?;
        for p in &self.points {
            let b = p.branch.map(|b| b.to_string()).unwrap_or_else(|| "all".into());
            writeln!(w, "{b},{},{:.6},{:.6}", p.window_start, p.bits, p.max_so_far)?;
        }
        Ok(())
    }
}

/// One MI value per complete non-overlapping window. With `per_branch`, the
/// trace is first split by the branch that produced each action; a trailing
/// partial window is dropped.
pub fn mi_series(trace: &ActionTrace, cfg: &MIWindowConfig, per_branch: bool) -> Result<MISeries> {
    if trace.len() < cfg.window_n {
        return Err(PearlError::InvalidArgument(format!(
            "trace of {} entries is shorter than one window of {}",
            trace.len(),
            cfg.window_n
        )));
    }
    let mut series = MISeries::default();
    let groups: Vec<(Option<usize>, Vec<&TraceEntry>)> = if per_branch {
        let mut by_branch: BTreeMap<usize, Vec<&TraceEntry>> = Default::default();
        for e in trace.entries() {
            by_branch.entry(e.branch).or_default().push(e);
        }
        by_branch.into_iter().map(|(b, v)| (Some(b), v)).collect()
    } else {
        vec![(None, trace.entries().iter().collect())]
    };
    // points are emitted in window order across groups so max_so_far tracks history
    let mut windows: Vec<(u64, Option<usize>, f64)> = Vec::new();
    for (branch, entries) in &groups {
        for chunk in entries.chunks_exact(cfg.window_n) {
            let pairs: Vec<(usize, usize)> =
                chunk.iter().map(|e| (e.state(cfg.binning), e.a_id)).collect();
            windows.push((chunk[0].t, *branch, cfg.estimate(&pairs)));
        }
    }
    windows.sort_by_key(|(t, b, _)| (*t, *b));
    for (t, b, bits) in windows {
        series.push(b, t, bits);
    }
    Ok(series)
}
