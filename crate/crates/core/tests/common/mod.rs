//! Fixtures and independent reference computations shared by the
//! integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use dieroll::partition::{IdealDistribution, OutcomePartition, Probability};
use dieroll::protocol::{ProtocolParams, Session};
use dieroll::randsource::SourceModel;
use dieroll::spacetime::{Ball, Layout};
use dieroll::strategies::{honest_strategy, Strategy};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// A random layout satisfying every constraint with some margin.
pub fn random_layout(rng: &mut TestRng, m: usize) -> Layout {
    let centers = loop {
        let c: Vec<[f64; 3]> = (0..m)
            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let ok = (0..m).all(|i| (0..i).all(|j| dist3(c[i], c[j]) > 3.0));
        if ok {
            break c;
        }
    };
    let radii: Vec<f64> = (0..m)
        .map(|i| {
            let nearest = (0..m).filter(|&j| j != i).map(|j| dist3(centers[i], centers[j])).fold(f64::INFINITY, f64::min);
            nearest * rng.gen_range(0.02..0.24)
        })
        .collect();
    let balls: Vec<Ball> = centers.iter().zip(&radii).map(|(&c, &r)| Ball::new(c, r)).collect();
    let deadlines = (0..m)
        .map(|i| {
            let gap = (0..m)
                .filter(|&j| j != i)
                .map(|j| dist3(centers[i], centers[j]) - radii[i] - radii[j])
                .fold(f64::INFINITY, f64::min);
            gap * rng.gen_range(0.05..0.95)
        })
        .collect();
    Layout::new(balls, deadlines)
}

/// Random composition of `n` into `outcomes` positive class sizes.
pub fn random_class_sizes(rng: &mut TestRng, outcomes: usize, n: usize) -> Vec<usize> {
    let mut sizes = vec![1; outcomes];
    for _ in outcomes..n {
        sizes[rng.gen_range(0..outcomes)] += 1;
    }
    sizes
}

/// Partition with `P_o = |Ω_o| / n`, so `α = 0`.
pub fn exact_partition(sizes: &[usize]) -> OutcomePartition {
    let n: usize = sizes.iter().sum();
    let ps: Vec<_> = sizes.iter().map(|&s| Probability::rational(s as i64, n as i64)).collect();
    let dist = IdealDistribution::from_probabilities(&ps).unwrap();
    OutcomePartition::from_sizes(&dist, sizes.to_vec()).unwrap()
}

/// Random full-support distribution on `ℤ_n` with deviations from `1/n`
/// of at most `spread / n`.
pub fn random_source(rng: &mut TestRng, n: usize, spread: f64) -> SourceModel {
    let w: Vec<f64> = (0..n).map(|_| 1.0 + rng.gen_range(-spread..spread)).collect();
    let total: f64 = w.iter().sum();
    SourceModel::exact(w.iter().map(|x| x / total).collect()).unwrap()
}

pub fn epsilon_of(probs: &[f64]) -> f64 {
    let n = probs.len() as f64;
    probs.iter().map(|p| (p - 1.0 / n).abs()).fold(0.0, f64::max)
}

/// Cyclic convolution of distributions on `ℤ_n`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut out = vec![0.0; n];
    for (x, pa) in a.iter().enumerate() {
        for (y, pb) in b.iter().enumerate() {
            out[(x + y) % n] += pa * pb;
        }
    }
    out
}

/// Outcome distribution when every party draws independently from its
/// source and the outcome is the class of the sum.
pub fn honest_oracle(sources: &[Vec<f64>], sizes: &[usize]) -> Vec<f64> {
    let n: usize = sizes.iter().sum();
    let mut sum = vec![0.0; n];
    sum[0] = 1.0;
    for s in sources {
        sum = convolve(&sum, s);
    }
    class_masses(&sum, sizes)
}

pub fn class_masses(dist: &[f64], sizes: &[usize]) -> Vec<f64> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let mass = dist[start..start + s].iter().sum();
            start += s;
            mass
        })
        .collect()
}

pub fn all_honest(params: ProtocolParams, sources: Vec<SourceModel>) -> Session {
    let strategies = sources.into_iter().map(honest_strategy).collect();
    Session::single(params, strategies).unwrap()
}

/// One honest party `k` with `source`; every other party runs `adversary`.
pub fn against(params: ProtocolParams, k: usize, source: SourceModel, adversary: &Strategy) -> Session {
    let strategies = (0..params.parties())
        .map(|p| if p == k { honest_strategy(source.clone()) } else { adversary.clone() })
        .collect();
    Session::single(params, strategies).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
