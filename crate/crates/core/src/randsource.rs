//! Honest random number generators `R_k` and XOR bias reduction.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Slack allowed when checking `|P(m) − 1/n| ≤ ε` and `Σ P(m) = 1`.
const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SourceError {
    #[error("source over ℤ_n needs n ≥ 1 outcomes")]
    Empty,
    #[error("probability {value} at m = {m} is negative or not finite")]
    BadProbability { m: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    BadSum(f64),
    #[error("declared ε = {declared} is below the actual deviation {actual} at m = {m}")]
    EpsilonTooSmall { declared: f64, actual: f64, m: usize },
    #[error("bit bias {bias} at index {index} is outside (0, 1/2)")]
    BadBias { index: usize, bias: f64 },
    #[error("round count {rounds} out of range (1..={available})")]
    RoundsOutOfRange { rounds: usize, available: usize },
    #[error("n = {0} is not a power of two ≥ 2")]
    NotPowerOfTwo(usize),
    #[error("need {needed} bits, only {available} available")]
    InsufficientBits { needed: usize, available: usize },
    #[error(transparent)]
    Entropy(#[from] EntropyExhausted),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("entropy stream exhausted")]
pub struct EntropyExhausted;

/// Deterministic seeded randomness with an optional draw budget.
#[derive(Debug, Clone)]
pub struct EntropyStream {
    rng: ChaCha12Rng,
    remaining: Option<u64>,
}

impl EntropyStream {
    pub fn from_seed(seed: u64) -> Self {
        Self { rng: ChaCha12Rng::seed_from_u64(seed), remaining: None }
    }

    /// A stream that fails after `draws` draws.
    pub fn with_budget(seed: u64, draws: u64) -> Self {
        Self { rng: ChaCha12Rng::seed_from_u64(seed), remaining: Some(draws) }
    }

    fn spend(&mut self) -> Result<(), EntropyExhausted> {
        match &mut self.remaining {
            Some(0) => Err(EntropyExhausted),
            Some(left) => {
                *left -= 1;
                Ok(())
            }
            None => Ok(()),
        }
    }

    pub fn next_f64(&mut self) -> Result<f64, EntropyExhausted> {
        self.spend()?;
        Ok(self.rng.gen())
    }

    pub fn next_u64(&mut self) -> Result<u64, EntropyExhausted> {
        self.spend()?;
        Ok(self.rng.next_u64())
    }

    /// Uniform in `0..bound`.
    pub fn below(&mut self, bound: u64) -> Result<u64, EntropyExhausted> {
        self.spend()?;
        Ok(self.rng.gen_range(0..bound.max(1)))
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha12Rng {
        &mut self.rng
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds from one seed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distribution `P_k(m)` of a party's generator over `ℤ_n`, with its
/// declared bias bound `ε_k`.
#[derive(Debug, Clone)]
pub struct SourceModel {
    probs: Vec<f64>,
    epsilon: f64,
    sampler: WeightedIndex<f64>,
}

impl PartialEq for SourceModel {
    fn eq(&self, other: &Self) -> bool {
        self.probs == other.probs && self.epsilon == other.epsilon
    }
}

impl SourceModel {
    pub fn new(probs: Vec<f64>, epsilon: f64) -> Result<Self, SourceError> {
        if probs.is_empty() {
            return Err(SourceError::Empty);
        }
        for (m, &value) in probs.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SourceError::BadProbability { m, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(SourceError::BadSum(sum));
        }
        let (m, actual) = max_deviation(&probs);
        if epsilon.is_nan() || epsilon < 0.0 || actual > epsilon + PROB_TOLERANCE {
            return Err(SourceError::EpsilonTooSmall { declared: epsilon, actual, m });
        }
        let sampler = WeightedIndex::new(&probs).map_err(|_| SourceError::BadSum(sum))?;
        Ok(Self { probs, epsilon, sampler })
    }

    /// Declares the exact maximum deviation as `ε`.
    pub fn exact(probs: Vec<f64>) -> Result<Self, SourceError> {
        let epsilon = if probs.is_empty() { 0.0 } else { max_deviation(&probs).1 };
        Self::new(probs, epsilon)
    }

    pub fn uniform(n: usize) -> Self {
        Self::new(vec![1.0 / n as f64; n], 0.0).expect("uniform source is valid")
    }

    pub fn n(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, m: usize) -> f64 {
        self.probs[m]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Draws `m ∈ ℤ_n` distributed per `probs`.
    pub fn sample(&self, stream: &mut EntropyStream) -> Result<usize, EntropyExhausted> {
        stream.spend()?;
        Ok(self.sampler.sample(stream.rng()))
    }
}

/// `(argmax, max)` of `|P(m) − 1/n|`.
fn max_deviation(probs: &[f64]) -> (usize, f64) {
    let uniform = 1.0 / probs.len() as f64;
    probs
        .iter()
        .map(|p| (p - uniform).abs())
        .enumerate()
        .fold((0, 0.0), |best, (m, d)| if d > best.1 { (m, d) } else { best })
}

/// Independent raw bits; bit `i` is 0 with probability `1/2 + e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BitSourceModel {
    biases: Vec<f64>,
}

impl BitSourceModel {
    pub fn new(biases: Vec<f64>) -> Result<Self, SourceError> {
        for (index, &bias) in biases.iter().enumerate() {
            if !(bias > 0.0 && bias < 0.5) {
                return Err(SourceError::BadBias { index, bias });
            }
        }
        Ok(Self { biases })
    }

    pub fn repeated(bias: f64, count: usize) -> Result<Self, SourceError> {
        Self::new(vec![bias; count])
    }

    pub fn len(&self) -> usize {
        self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.biases.is_empty()
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Bias of the XOR of the first `rounds` bits.
    pub fn pile_up(&self, rounds: usize) -> Result<f64, SourceError> {
        self.block_bias(0, rounds)
    }

    /// Bias of the XOR of bits `start..start + rounds`: `2^{j−1} ∏ e_i`.
    pub fn block_bias(&self, start: usize, rounds: usize) -> Result<f64, SourceError> {
        let available = self.biases.len().saturating_sub(start);
        if rounds == 0 || rounds > available {
            return Err(SourceError::RoundsOutOfRange { rounds, available });
        }
        let product: f64 = self.biases[start..start + rounds].iter().product();
        Ok(2f64.powi(rounds as i32 - 1) * product)
    }

    /// Samples the XOR of bits `start..start + rounds`.
    pub fn sample_xor(&self, start: usize, rounds: usize, stream: &mut EntropyStream) -> Result<u8, SourceError> {
        let available = self.biases.len().saturating_sub(start);
        if rounds == 0 || rounds > available {
            return Err(SourceError::RoundsOutOfRange { rounds, available });
        }
        let mut acc = 0u8;
        for &e in &self.biases[start..start + rounds] {
            let zero = stream.next_f64()? < 0.5 + e;
            acc ^= u8::from(!zero);
        }
        Ok(acc)
    }

    /// Samples `m ∈ ℤ_{2^b}` by XOR-combining disjoint blocks of `rounds`
    /// raw bits into `b` output bits, least significant first.
    pub fn sample_value(&self, n: usize, rounds: usize, stream: &mut EntropyStream) -> Result<usize, SourceError> {
        let b = log2_exact(n)?;
        check_bits(self, b, rounds)?;
        let mut m = 0usize;
        for l in 0..b {
            m |= (self.sample_xor(l * rounds, rounds, stream)? as usize) << l;
        }
        Ok(m)
    }
}

fn log2_exact(n: usize) -> Result<usize, SourceError> {
    if n < 2 || !n.is_power_of_two() {
        return Err(SourceError::NotPowerOfTwo(n));
    }
    Ok(n.trailing_zeros() as usize)
}

fn check_bits(bits: &BitSourceModel, b: usize, rounds: usize) -> Result<(), SourceError> {
    if rounds == 0 {
        return Err(SourceError::RoundsOutOfRange { rounds, available: bits.len() });
    }
    let needed = b * rounds;
    if needed > bits.len() {
        return Err(SourceError::InsufficientBits { needed, available: bits.len() });
    }
    Ok(())
}

/// Source over `ℤ_n`, `n = 2^b`, whose `b` output bits are XORs of disjoint
/// blocks of `rounds_per_bit` raw bits. The probabilities are the exact
/// product expansion and the declared `ε` is their maximum deviation, the
/// all-zeros value.
pub fn build_source_from_bits(
    bits: &BitSourceModel,
    n: usize,
    rounds_per_bit: usize,
) -> Result<SourceModel, SourceError> {
    let b = log2_exact(n)?;
    check_bits(bits, b, rounds_per_bit)?;
    let betas = (0..b)
        .map(|l| bits.block_bias(l * rounds_per_bit, rounds_per_bit))
        .collect::<Result<Vec<_>, _>>()?;
    let probs = (0..n)
        .map(|m| {
            betas
                .iter()
                .enumerate()
                .map(|(l, beta)| if (m >> l) & 1 == 0 { 0.5 + beta } else { 0.5 - beta })
                .product()
        })
        .collect();
    // ∏(1/2 + β_l) − 2^{−b}, accumulated term by term so that tiny biases
    // do not cancel against 1/n
    let (mut dev, mut half) = (0.0, 1.0);
    for beta in &betas {
        dev = dev * (0.5 + beta) + half * beta;
        half *= 0.5;
    }
    SourceModel::new(probs, dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_source_hits_every_value() {
        let s = SourceModel::uniform(5);
        let mut stream = EntropyStream::from_seed(1);
        let mut seen = [false; 5];
        for _ in 0..200 {
            seen[s.sample(&mut stream).unwrap()] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn point_mass_needs_large_epsilon() {
        let probs = vec![1.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            SourceModel::new(probs.clone(), 0.5),
            Err(SourceError::EpsilonTooSmall { .. })
        ));
        assert!(SourceModel::new(probs, 0.75).is_ok());
    }

    #[test]
    fn exhausted_stream() {
        let s = SourceModel::uniform(2);
        let mut stream = EntropyStream::with_budget(3, 2);
        assert!(s.sample(&mut stream).is_ok());
        assert!(s.sample(&mut stream).is_ok());
        assert_eq!(s.sample(&mut stream), Err(EntropyExhausted));
    }

    #[test]
    fn pile_up_examples() {
        let one = BitSourceModel::new(vec![0.1]).unwrap();
        assert!((one.pile_up(1).unwrap() - 0.1).abs() < 1e-15);
        let three = BitSourceModel::repeated(0.1, 3).unwrap();
        assert!((three.pile_up(3).unwrap() - 0.004).abs() < 1e-15);
        let mixed = BitSourceModel::new(vec![0.25, 0.1]).unwrap();
        assert!((mixed.pile_up(2).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(mixed.pile_up(3), Err(SourceError::RoundsOutOfRange { .. })));
        assert!(matches!(mixed.pile_up(0), Err(SourceError::RoundsOutOfRange { .. })));
    }

    #[test]
    fn bias_bounds() {
        assert!(BitSourceModel::new(vec![0.5]).is_err());
        assert!(BitSourceModel::new(vec![0.0]).is_err());
    }

    #[test]
    fn single_output_bit() {
        let bits = BitSourceModel::new(vec![0.2]).unwrap();
        let s = build_source_from_bits(&bits, 2, 1).unwrap();
        assert!((s.prob(0) - 0.7).abs() < 1e-15);
        assert!((s.prob(1) - 0.3).abs() < 1e-15);
        assert!((s.epsilon() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn non_power_of_two_rejected() {
        let bits = BitSourceModel::repeated(0.1, 8).unwrap();
        assert_eq!(build_source_from_bits(&bits, 6, 1).unwrap_err(), SourceError::NotPowerOfTwo(6));
        assert!(matches!(
            build_source_from_bits(&bits, 4, 5),
            Err(SourceError::InsufficientBits { needed: 10, available: 8 })
        ));
    }

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(0, 0));
    }
}
