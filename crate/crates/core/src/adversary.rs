//! Honest-but-curious cloud: K-means over the shared action stream, elbow
//! selection of K and scoring against the hidden ground truth.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{PearlError, Result};
use crate::privacy::ActionTrace;
use crate::seed::Rng;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_K_MAX: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
    /// WCSS after each assignment pass.
    pub wcss_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 || k > points.len() {
        return Err(PearlError::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(PearlError::InvalidArgument("points differ in dimension".into()));
    }
    Ok(())
}

/// k-means++ seeding: the first centroid uniformly, then proportional to the
/// squared distance to the nearest chosen centroid.
fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// One k-means run: k-means++ seeding, then Lloyd iterations until the
/// assignment is a fixpoint or the iteration cap is hit. An empty cluster is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<KMeansResult> {
    check_points(points, k)?;
    let dim = points[0].len();
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    let mut wcss_history = Vec::new();
    loop {
        let mut changed = false;
        let mut wcss = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centroids);
            wcss += d;
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        wcss_history.push(wcss);
        if !changed || iterations >= MAX_LLOYD_ITERATIONS {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignments.iter().zip(points) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .expect("points non-empty");
                centroids[j] = points[far].clone();
                assignments[far] = j;
            }
        }
    }
    let wcss = points
        .iter()
        .zip(&assignments)
        .map(|(p, a)| sq_dist(p, &centroids[*a]))
        .sum();
    Ok(KMeansResult {
        centroids,
        assignments,
        wcss,
        iterations,
        wcss_history,
    })
}

/// Lowest-WCSS result over `restarts` independent runs.
pub fn kmeans_best(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut Rng) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let r = kmeans(points, k, rng)?;
        if best.as_ref().is_none_or(|b| r.wcss < b.wcss) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// WCSS for k = 1..=k_max (capped at the number of points), made
/// non-increasing by carrying the running minimum forward.
pub fn wcss_curve(points: &[Vec<f64>], k_max: usize, restarts: usize, rng: &mut Rng) -> Result<Vec<(usize, f64)>> {
    let k_max = k_max.min(points.len());
    let mut curve = Vec::with_capacity(k_max);
    let mut floor = f64::INFINITY;
    for k in 1..=k_max {
        let w = kmeans_best(points, k, restarts, rng)?.wcss;
        floor = floor.min(w);
        curve.push((k, floor));
    }
    Ok(curve)
}

/// K at the largest discrete second difference `w[k-1] - 2 w[k] + w[k+1]`.
/// Ties go to the smaller K; a flat curve (or one too short to have an
/// interior point) selects 1.
pub fn elbow_select(curve: &[(usize, f64)]) -> Result<usize> {
    if curve.is_empty() {
        return Err(PearlError::InvalidArgument("empty WCSS curve".into()));
    }
    for pair in curve.windows(2) {
        if pair[1].1 > pair[0].1 * (1.0 + 1e-12) + 1e-12 {
            return Err(PearlError::InvalidArgument(format!(
                "WCSS increases from k={} to k={}",
                pair[0].0, pair[1].0
            )));
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for w in curve.windows(3) {
        let d2 = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if best.is_none_or(|(_, b)| d2 > b) {
            best = Some((w[1].0, d2));
        }
    }
    match best {
        Some((k, d2)) if d2 > 0.0 => Ok(k),
        _ => Ok(curve[0].0),
    }
}

/// Fraction of samples whose cluster maps to their true class under the best
/// one-to-one cluster-to-class mapping. Clusters left without a class count
/// as wrong.
pub fn attack_accuracy(assignments: &[usize], truth: &[usize]) -> Result<f64> {
    if assignments.len() != truth.len() {
        return Err(PearlError::DimensionMismatch {
            expected: truth.len(),
            actual: assignments.len(),
        });
    }
    if truth.is_empty() {
        return Err(PearlError::InvalidArgument("no samples".into()));
    }
    let mut clusters: Vec<usize> = assignments.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut classes: Vec<usize> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() > 20 {
        return Err(PearlError::InvalidArgument(format!(
            "{} classes is too many for exact matching",
            classes.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes.len()]; clusters.len()];
    for (a, t) in assignments.iter().zip(truth) {
        let i = clusters.binary_search(a).expect("present");
        let j = classes.binary_search(t).expect("present");
        confusion[i][j] += 1;
    }
    // Exact maximum-weight matching by DP over subsets of used classes.
    let m = classes.len();
    let mut best = vec![0usize; 1 << m];
    let mut reachable = vec![false; 1 << m];
    reachable[0] = true;
    for row in &confusion {
        let mut next_best = best.clone();
        let mut next_reach = reachable.clone();
        for mask in 0..(1usize << m) {
            if !reachable[mask] {
                continue;
            }
            for (j, c) in row.iter().enumerate() {
                if mask & (1 << j) == 0 {
                    let nm = mask | (1 << j);
                    let v = best[mask] + c;
                    if !next_reach[nm] || v > next_best[nm] {
                        next_best[nm] = v;
                        next_reach[nm] = true;
                    }
                }
            }
        }
        best = next_best;
        reachable = next_reach;
    }
    let matched = best
        .iter()
        .zip(&reachable)
        .filter(|(_, r)| **r)
        .map(|(b, _)| *b)
        .max()
        .unwrap_or(0);
    Ok(matched as f64 / truth.len() as f64)
}

/// Rescales each dimension to zero mean and unit variance (constant
/// dimensions are only centred).
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if points.is_empty() {
        return Vec::new();
    }
    let dim = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let mut sd = vec![0.0; dim];
    for p in points {
        for ((s, x), m) in sd.iter_mut().zip(p).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    points
        .iter()
        .map(|p| p.iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// One sample per step: (phase within the period, action id).
    #[default]
    PhaseAction,
    /// One sample per complete period: the period's action ids.
    PeriodVector,
}

/// Clustering inputs built from an action trace. `phases` gives each entry's
/// position in the natural cycle (e.g. hour of day).
pub fn trace_features(trace: &ActionTrace, phases: &[usize], period: usize, mode: FeatureMode) -> Result<Vec<Vec<f64>>> {
    if phases.len() != trace.len() {
        return Err(PearlError::DimensionMismatch {
            expected: trace.len(),
            actual: phases.len(),
        });
    }
    let raw: Vec<Vec<f64>> = match mode {
        FeatureMode::PhaseAction => trace
            .entries()
            .iter()
            .zip(phases)
            .map(|(e, h)| vec![*h as f64, e.a_id as f64])
            .collect(),
        FeatureMode::PeriodVector => {
            if period == 0 {
                return Err(PearlError::InvalidArgument("period must be positive".into()));
            }
            trace
                .entries()
                .chunks_exact(period)
                .map(|c| c.iter().map(|e| e.a_id as f64).collect())
                .collect()
        }
    };
    Ok(standardize(&raw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub k_selected: usize,
    pub wcss_curve: Vec<(usize, f64)>,
    #[serde(skip)]
    pub assignments: Vec<usize>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub k_max: usize,
    pub restarts: usize,
    pub mode: FeatureMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K_MAX,
            restarts: DEFAULT_RESTARTS,
            mode: FeatureMode::PhaseAction,
        }
    }
}

/// Full attack: WCSS curve, elbow choice of K, final clustering at that K
/// and, when ground truth is given, the mapped accuracy.
pub fn run_attack(points: &[Vec<f64>], truth: Option<&[usize]>, cfg: &AttackConfig, rng: &mut Rng) -> Result<ClusteringReport> {
    let curve = wcss_curve(points, cfg.k_max, cfg.restarts, rng)?;
    let k = elbow_select(&curve)?;
    let clustering = kmeans_best(points, k, cfg.restarts, rng)?;
    let accuracy = truth.map(|t| attack_accuracy(&clustering.assignments, t)).transpose()?;
    Ok(ClusteringReport {
        k_selected: k,
        wcss_curve: curve,
        assignments: clustering.assignments,
        accuracy,
    })
}

impl ClusteringReport {
    /// Per-sample assignments as `index,cluster[,truth]`.
    pub fn write_assignments_csv<W: Write>(&self, w: W, truth: Option<&[usize]>) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        match truth {
            Some(t) => {
                writeln!(w, "index,cluster,truth")?;
                for (i, (a, g)) in self.assignments.iter().zip(t).enumerate() {
                    writeln!(w, "{i},{a},{g}")?;
                }
            }
            None => {
                writeln!(w, "index,cluster")?;
                for (i, a) in self.assignments.iter().enumerate() {
                    writeln!(w, "{i},{a}")?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_wcss_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "k,wcss")?;
        for (k, v) in &self.wcss_curve {
            writeln!(w, "{k},{v}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedTree;
    use rand_distr::{Distribution, Normal};

    fn rng(name: &str) -> Rng {
        SeedTree::new(17).stream(name)
    }

    fn blobs(centres: &[(f64, f64)], per: usize, sd: f64, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let noise = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, &(x, y)) in centres.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![x + noise.sample(rng), y + noise.sample(rng)]);
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 3.0]];
        let r = kmeans(&pts, 1, &mut rng("k1")).unwrap();
        assert!((r.centroids[0][0] - 2.0).abs() < 1e-12 && (r.centroids[0][1] - 1.0).abs() < 1e-12);
        let var_n: f64 = pts.iter().map(|p| sq_dist(p, &[2.0, 1.0])).sum();
        assert!((r.wcss - var_n).abs() < 1e-12);
    }

    #[test]
    fn separates_two_blobs() {
        let mut r = rng("blobs");
        let (pts, labels) = blobs(&[(0.0, 0.0), (10.0, 10.0)], 50, 0.5, &mut r);
        let two = kmeans(&pts, 2, &mut r).unwrap();
        let one = kmeans(&pts, 1, &mut r).unwrap();
        assert_eq!(attack_accuracy(&two.assignments, &labels).unwrap(), 1.0);
        assert!(two.wcss < one.wcss);
    }

    #[test]
    fn best_of_restarts_is_near_many_restart_optimum() {
        let mut r = rng("random30");
        let pts: Vec<Vec<f64>> = (0..30).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
        let ours = kmeans_best(&pts, 3, DEFAULT_RESTARTS, &mut r).unwrap().wcss;
        let oracle = kmeans_best(&pts, 3, 1000, &mut r).unwrap().wcss;
        assert!(ours <= oracle * 1.05);
    }

    #[test]
    fn elbow_finds_constructed_kink() {
        let curve: Vec<(usize, f64)> = (1..=10)
            .map(|k| (k, if k <= 4 { 100.0 - 20.0 * (k - 1) as f64 } else { 40.0 - 2.0 * (k - 4) as f64 }))
            .collect();
        assert_eq!(elbow_select(&curve).unwrap(), 4);
        let flat: Vec<(usize, f64)> = (1..=6).map(|k| (k, 5.0)).collect();
        assert_eq!(elbow_select(&flat).unwrap(), 1);
        let geometric: Vec<(usize, f64)> = (1..=8).map(|k| (k, 0.5f64.powi(k as i32))).collect();
        assert_eq!(elbow_select(&geometric).unwrap(), 2);
        assert!(elbow_select(&[(1, 1.0), (2, 2.0)]).is_err());
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let truth = vec![0, 0, 1, 1, 2, 2, 2];
        let perm = [2, 0, 1];
        let assign: Vec<usize> = truth.iter().map(|t| perm[*t] + 10).collect();
        assert_eq!(attack_accuracy(&assign, &truth).unwrap(), 1.0);
        let renamed: Vec<usize> = truth.iter().map(|t| 5 - t).collect();
        let noisy = vec![0, 1, 1, 1, 2, 2, 0];
        assert_eq!(
            attack_accuracy(&noisy, &truth).unwrap(),
            attack_accuracy(&noisy, &renamed).unwrap()
        );
        assert!(attack_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn accuracy_of_random_assignment_is_chance() {
        let mut r = rng("chance");
        let truth: Vec<usize> = (0..10_000).map(|i| i % 6).collect();
        let assign: Vec<usize> = (0..10_000).map(|_| r.random_range(0..6)).collect();
        let acc = attack_accuracy(&assign, &truth).unwrap();
        assert!((acc - 1.0 / 6.0).abs() < 0.05, "{acc}");
    }

    #[test]
    fn extra_clusters_cannot_all_score() {
        // three clusters over two classes: the best one-to-one mapping leaves one cluster wrong
        let truth = vec![0, 0, 1, 1];
        let assign = vec![0, 1, 2, 2];
        assert_eq!(attack_accuracy(&assign, &truth).unwrap(), 0.75);
    }

    #[test]
    fn lloyd_iterations_never_increase_wcss() {
        let mut r = rng("mono");
        let (pts, _) = blobs(&[(0.0, 0.0), (3.0, 1.0), (1.0, 4.0)], 40, 1.0, &mut r);
        for k in 1..8 {
            let res = kmeans(&pts, k, &mut r).unwrap();
            assert_eq!(res.assignments.len(), pts.len());
            assert!(res.assignments.iter().all(|a| *a < k));
            assert!(res.wcss_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }
        let curve = wcss_curve(&pts, 8, 5, &mut r).unwrap();
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }
}
