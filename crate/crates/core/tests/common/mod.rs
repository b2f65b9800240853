//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use pearl_core::nn::{Activation, DenseLayer, DenseStack, LossKind};
use pearl_core::seed::Rng;
use rand::Rng as _;

/// Plug-in MI in bits from dense count tables, via H(S) + H(A) - H(S, A).
pub fn brute_force_mi(window: &[(usize, usize)]) -> f64 {
    let ns = window.iter().map(|p| p.0).max().unwrap() + 1;
    let na = window.iter().map(|p| p.1).max().unwrap() + 1;
    let mut joint = vec![vec![0u64; na]; ns];
    for &(s, a) in window {
        joint[s][a] += 1;
    }
    let n = window.len() as f64;
    let entropy = |counts: &mut dyn Iterator<Item = u64>| -> f64 {
        counts
            .filter(|c| *c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    };
    let hs = entropy(&mut joint.iter().map(|row| row.iter().sum::<u64>()));
    let ha = entropy(&mut (0..na).map(|a| joint.iter().map(|row| row[a]).sum::<u64>()));
    let hsa = entropy(&mut joint.iter().flatten().copied());
    (hs + ha - hsa).max(0.0)
}

/// Exact I(S; A) in bits of a joint probability table.
pub fn analytic_mi(joint: &[Vec<f64>]) -> f64 {
    let ps: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pa: Vec<f64> = (0..joint[0].len()).map(|a| joint.iter().map(|r| r[a]).sum()).collect();
    let mut mi = 0.0;
    for (s, row) in joint.iter().enumerate() {
        for (a, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (ps[s] * pa[a])).log2();
            }
        }
    }
    mi
}

/// Random joint table over `ns × na` cells, with some cells zeroed.
pub fn random_joint(ns: usize, na: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut t: Vec<Vec<f64>> = (0..ns)
        .map(|_| {
            (0..na)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0f64).powi(3) })
                .collect()
        })
        .collect();
    t[0][0] += 0.1;
    let z: f64 = t.iter().flatten().sum();
    for v in t.iter_mut().flatten() {
        *v /= z;
    }
    t
}

pub fn sample_joint(joint: &[Vec<f64>], n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let cells: Vec<(usize, usize, f64)> = joint
        .iter()
        .enumerate()
        .flat_map(|(s, r)| r.iter().enumerate().map(move |(a, p)| (s, a, *p)))
        .collect();
    (0..n)
        .map(|_| {
            let mut x = rng.random_range(0.0..1.0);
            for &(s, a, p) in &cells {
                if x < p {
                    return (s, a);
                }
                x -= p;
            }
            let last = cells.iter().rev().find(|c| c.2 > 0.0).unwrap();
            (last.0, last.1)
        })
        .collect()
}

/// Utility label rule written out literally: `Q_i ≥ u·Q_max` when the
/// maximum is positive, else `Q_i ≥ Q_max − (1 − u)|Q_max|`.
pub fn reference_utility_labels(q: &[f64], u: f64) -> Vec<u8> {
    let mut q_max = f64::NEG_INFINITY;
    for &v in q {
        if v > q_max {
            q_max = v;
        }
    }
    let mut out = Vec::new();
    for &v in q {
        let ok = if q_max > 0.0 { v >= u * q_max } else { v >= q_max - (1.0 - u) * q_max.abs() };
        out.push(if ok { 1 } else { 0 });
    }
    out
}

pub fn reference_privacy_labels(mi: &[f64], p: f64, mi_max: f64) -> Vec<u8> {
    mi.iter()
        .map(|&i| if mi_max <= 0.0 || i < p * mi_max { 1 } else { 0 })
        .collect()
}

/// Optimal greedy action per state of the two-state toy MDP by value iteration.
pub fn toy_mdp_optimal_policy(gamma: f64) -> [usize; 2] {
    let reward = |s: usize, a: usize| if s == a { 1.0 } else { 0.0 };
    let next = |s: usize, a: usize| if s == a { 1 - s } else { s };
    let mut v = [0.0f64; 2];
    for _ in 0..2000 {
        let mut nv = [0.0; 2];
        for s in 0..2 {
            nv[s] = (0..2).map(|a| reward(s, a) + gamma * v[next(s, a)]).fold(f64::MIN, f64::max);
        }
        v = nv;
    }
    let mut pi = [0; 2];
    for s in 0..2 {
        let q: Vec<f64> = (0..2).map(|a| reward(s, a) + gamma * v[next(s, a)]).collect();
        pi[s] = if q[1] > q[0] { 1 } else { 0 };
    }
    pi
}

/// Worst relative error between analytic and central-difference gradients
/// of `net` at `(x, target)`. Relative error is `|g - fd| / max(|g|, |fd|, 1e-3)`.
pub fn max_fd_error(net: &DenseStack, x: &[f64], target: &[f64], loss: LossKind, h: f64) -> f64 {
    let (_, grads) = net.gradients(x, target, loss).unwrap();
    let value = |n: &DenseStack| {
        let y = n.forward(x).unwrap();
        loss.value_and_grad(&y, target).unwrap().0
    };
    let mut worst: f64 = 0.0;
    for (l, g) in grads.iter().enumerate() {
        for which in 0..2 {
            let count = if which == 0 { g.weights.len() } else { g.bias.len() };
            for i in 0..count {
                let mut plus = net.clone();
                let mut minus = net.clone();
                *param_mut(&mut plus, l, which, i) += h;
                *param_mut(&mut minus, l, which, i) -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let an = if which == 0 { g.weights[i] } else { g.bias[i] };
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

fn param_mut(n: &mut DenseStack, layer: usize, which: usize, i: usize) -> &mut f64 {
    let layer = &mut n.layers_mut()[layer];
    if which == 0 {
        &mut layer.weights_mut()[i]
    } else {
        &mut layer.bias_mut()[i]
    }
}

/// Smallest |pre-activation| of any hidden ReLU unit; central differences
/// are only meaningful away from the kink.
pub fn min_relu_margin(net: &DenseStack, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut margin = f64::INFINITY;
    for layer in net.layers() {
        let linear = DenseLayer::from_parts(
            layer.in_dim(),
            layer.out_dim(),
            layer.weights().to_vec(),
            layer.bias().to_vec(),
            Activation::Linear,
        )
        .unwrap();
        let z = linear.forward(&h).unwrap();
        if layer.activation() == Activation::Relu {
            margin = margin.min(z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        }
        h = layer.forward(&h).unwrap();
    }
    margin
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].partial_cmp(&v[*b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// ISO 7730 tabulated PMV: (ta, tr, vel, rh, met, clo, pmv).
pub const ISO_7730_CASES: [(f64, f64, f64, f64, f64, f64, f64); 5] = [
    (22.0, 22.0, 0.1, 60.0, 1.2, 0.5, -0.75),
    (27.0, 27.0, 0.1, 60.0, 1.2, 0.5, 0.77),
    (27.0, 27.0, 0.3, 60.0, 1.2, 0.5, 0.44),
    (19.0, 19.0, 0.1, 40.0, 1.2, 1.0, -0.60),
    (27.0, 27.0, 0.1, 60.0, 1.6, 0.5, 1.17),
];
