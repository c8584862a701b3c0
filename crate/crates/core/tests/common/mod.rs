#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MARKERS: [&str; 6] = ["strcpy", "gets", "system", "strncpy", "fgets", "snprintf"];
pub const FILLER: [&str; 6] = ["x", "=", ";", "buf", "(", ")"];

/// A ToyLogit setup small enough for brute force.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub tokens: Vec<String>,
    pub markers: BTreeMap<String, f64>,
    pub bias: f64,
}

impl ToyInstance {
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let markers: BTreeMap<String, f64> =
            MARKERS.iter().map(|m| (m.to_string(), rng.gen_range(-2.5..2.5))).collect();
        let tokens = (0..n)
            .map(|_| {
                let pool: &[&str] = if rng.gen_bool(0.6) { &MARKERS } else { &FILLER };
                pool[rng.gen_range(0..pool.len())].to_string()
            })
            .collect();
        Self { tokens, markers, bias: rng.gen_range(-1.0..1.0) }
    }

    pub fn seeded(n: usize, seed: u64) -> Self {
        Self::random(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// σ(bias + Σ weights of the kept tokens), evaluated directly.
    pub fn value(&self, kept: &[bool]) -> f64 {
        let z = self.bias
            + self
                .tokens
                .iter()
                .zip(kept)
                .filter(|(_, &k)| k)
                .map(|(t, _)| self.markers.get(t).copied().unwrap_or(0.0))
                .sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Shapley values by recursive subset enumeration:
/// φ_i = Σ_{S ⊆ N∖{i}} [f(S ∪ {i}) − f(S)] / (n · C(n−1, |S|)).
pub fn brute_force_shapley(n: usize, f: &dyn Fn(&[bool]) -> f64) -> Vec<f64> {
    fn walk(i: usize, pos: usize, kept: &mut Vec<bool>, n: usize, f: &dyn Fn(&[bool]) -> f64, acc: &mut f64) {
        if pos == n {
            let size = kept.iter().filter(|&&k| k).count();
            kept[i] = true;
            let with = f(kept);
            kept[i] = false;
            let without = f(kept);
            *acc += (with - without) / (n as f64 * binomial(n - 1, size));
            return;
        }
        if pos == i {
            return walk(i, pos + 1, kept, n, f, acc);
        }
        kept[pos] = false;
        walk(i, pos + 1, kept, n, f, acc);
        kept[pos] = true;
        walk(i, pos + 1, kept, n, f, acc);
        kept[pos] = false;
    }
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            walk(i, 0, &mut vec![false; n], n, f, &mut acc);
            acc
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
