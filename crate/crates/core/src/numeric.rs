//! Small numeric helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Neumaier-compensated sum. Used wherever a reduction must not depend on
/// accumulated rounding order more than necessary.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / values.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Softmax over the entries where `mask` is true (all entries when `mask` is
/// `None`); masked-out entries get probability 0.
pub fn masked_softmax(scores: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| if allowed(i) { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Log-softmax of entry `index`, under the same masking rule as
/// [`masked_softmax`].
pub fn masked_log_softmax_at(scores: &[f64], mask: Option<&[bool]>, index: usize) -> f64 {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    if !allowed(index) {
        return f64::NEG_INFINITY;
    }
    let max = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, s)| (s - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    scores[index] - lse
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Derives an independent generator for a sub-task from a base seed and a
/// path of indices (user, prompt, rollout, ...).
pub fn derived_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for p in path {
        h = splitmix64(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
