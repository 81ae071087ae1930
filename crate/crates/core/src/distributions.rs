//! The factorized Bernoulli `q_η` over `{0,1}^d`, plus explicitly indexed
//! finite distributions used by the birth-death oracle checks.
//!
//! Everything is computed from logits: `log σ(η) = −softplus(−η)`, and
//! probability ratios of states are exponentials of logit sums, so nothing
//! underflows for large `d`.

use rand::Rng;

use crate::error::{ensure_len, invalid, Error, Result};

/// Largest `d` for which [`enumerate_support`] will materialise `2^d` states.
pub const MAX_ENUMERATION_DIM: usize = 20;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return invalid("logits must have d >= 1");
        }
        if let Some(i) = eta.iter().position(|e| !e.is_finite()) {
            return Err(Error::Numerical(format!("non-finite logit at index {i}")));
        }
        Ok(Logits(eta))
    }

    pub fn zeros(d: usize) -> Result<Self> {
        Logits::new(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `q_i(1) = σ(η_i)` for every coordinate.
    pub fn probs(&self) -> Vec<f64> {
        self.0.iter().map(|&e| sigmoid(e)).collect()
    }

    /// `log q_i(bit)`.
    #[inline]
    pub fn coord_log_prob(&self, i: usize, bit: u8) -> f64 {
        if bit == 1 {
            log_sigmoid(self.0[i])
        } else {
            log_sigmoid(-self.0[i])
        }
    }

    /// `q_i(bit)`.
    #[inline]
    pub fn coord_prob(&self, i: usize, bit: u8) -> f64 {
        if bit == 1 {
            sigmoid(self.0[i])
        } else {
            sigmoid(-self.0[i])
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Result<Vec<BinaryVector>> {
        if k < 1 {
            return invalid("sample count K must be >= 1");
        }
        let p = self.probs();
        Ok((0..k).map(|_| BinaryVector(p.iter().map(|&pi| u8::from(rng.gen::<f64>() < pi)).collect())).collect())
    }

    pub fn log_prob(&self, x: &BinaryVector) -> Result<f64> {
        ensure_len("state", x.dim(), self.dim())?;
        Ok(x.0.iter().enumerate().map(|(i, &b)| self.coord_log_prob(i, b)).sum())
    }

    /// `∇_η log q_η(x)`, entries `x_i − σ(η_i)`.
    pub fn score(&self, x: &BinaryVector) -> Result<Vec<f64>> {
        ensure_len("state", x.dim(), self.dim())?;
        Ok(self.score_unchecked(x))
    }

    pub(crate) fn score_unchecked(&self, x: &BinaryVector) -> Vec<f64> {
        x.0.iter().zip(&self.0).map(|(&b, &e)| f64::from(b) - sigmoid(e)).collect()
    }

    /// `q_i(1 − x_i) / (q_i(x_i) + ε)`: the joint probability ratio of
    /// flipping coordinate `i`, optionally stabilised by `ε`. With `ε = 0`
    /// this is exactly `exp(±η_i)`.
    pub fn flip_ratio(&self, x: &BinaryVector, i: usize, epsilon: f64) -> Result<f64> {
        ensure_len("state", x.dim(), self.dim())?;
        if i >= self.dim() {
            return invalid(format!("coordinate {i} out of range for d = {}", self.dim()));
        }
        Ok(self.flip_ratio_unchecked(x.0[i], i, epsilon))
    }

    #[inline]
    pub(crate) fn flip_ratio_unchecked(&self, bit: u8, i: usize, epsilon: f64) -> f64 {
        if epsilon == 0.0 {
            let e = self.0[i];
            if bit == 0 {
                e.exp()
            } else {
                (-e).exp()
            }
        } else {
            self.coord_prob(i, 1 - bit) / (self.coord_prob(i, bit) + epsilon)
        }
    }

    /// Ratio `q(y)/q(x)` for states differing in the listed coordinates,
    /// each coordinate ratio stabilised by `ε` as in [`Logits::flip_ratio`].
    pub(crate) fn move_ratio(&self, x: &BinaryVector, changed: &[usize], epsilon: f64) -> f64 {
        if epsilon == 0.0 {
            let log_ratio: f64 = changed.iter().map(|&i| if x.0[i] == 0 { self.0[i] } else { -self.0[i] }).sum();
            log_ratio.exp()
        } else {
            changed.iter().map(|&i| self.flip_ratio_unchecked(x.0[i], i, epsilon)).product()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryVector(Vec<u8>);

impl BinaryVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return invalid("binary vector entries must be 0 or 1");
        }
        Ok(BinaryVector(bits))
    }

    pub fn zeros(d: usize) -> Self {
        BinaryVector(vec![0; d])
    }

    /// The state with lexicographic index `index` (coordinate 0 most
    /// significant).
    pub fn from_index(index: usize, d: usize) -> Self {
        BinaryVector((0..d).map(|i| ((index >> (d - 1 - i)) & 1) as u8).collect())
    }

    pub fn index(&self) -> usize {
        self.0.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, i: usize) -> u8 {
        self.0[i]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i] ^= 1;
    }

    pub fn flipped(&self, i: usize) -> Self {
        let mut y = self.clone();
        y.flip(i);
        y
    }

    /// Next state in cyclic lexicographic order; returns it with the flipped
    /// coordinates.
    pub fn cyclic_inc(&self) -> (Self, Vec<usize>) {
        self.cyclic_step(1)
    }

    /// Previous state in cyclic lexicographic order.
    pub fn cyclic_dec(&self) -> (Self, Vec<usize>) {
        self.cyclic_step(0)
    }

    // Binary add/subtract one from the least significant end: flip every
    // trailing `carry` bit, then the first bit that differs from it.
    fn cyclic_step(&self, carry: u8) -> (Self, Vec<usize>) {
        let mut y = self.clone();
        let mut changed = Vec::new();
        for i in (0..self.dim()).rev() {
            y.0[i] ^= 1;
            changed.push(i);
            if self.0[i] != carry {
                break;
            }
        }
        (y, changed)
    }
}

/// `K` samples with their cached `f` values and `∇f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    samples: Vec<BinaryVector>,
    f_values: Vec<f64>,
    f_grads: Vec<Vec<f64>>,
}

impl SampleBatch {
    pub fn new(samples: Vec<BinaryVector>, f_values: Vec<f64>, f_grads: Vec<Vec<f64>>) -> Result<Self> {
        let k = samples.len();
        if k < 1 {
            return invalid("sample batch needs K >= 1");
        }
        ensure_len("f values", f_values.len(), k)?;
        ensure_len("f gradients", f_grads.len(), k)?;
        let d = samples[0].dim();
        for (s, g) in samples.iter().zip(&f_grads) {
            ensure_len("sample", s.dim(), d)?;
            ensure_len("f gradient", g.len(), d)?;
        }
        Ok(SampleBatch { samples, f_values, f_grads })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    pub fn samples(&self) -> &[BinaryVector] {
        &self.samples
    }

    pub fn f_values(&self) -> &[f64] {
        &self.f_values
    }

    pub fn f_grads(&self) -> &[Vec<f64>] {
        &self.f_grads
    }
}

/// All `2^d` states in lexicographic order with their probabilities.
pub fn enumerate_support(logits: &Logits) -> Result<Vec<(BinaryVector, f64)>> {
    let d = logits.dim();
    if d > MAX_ENUMERATION_DIM {
        return Err(Error::Capacity(format!("cannot enumerate 2^{d} states (limit d = {MAX_ENUMERATION_DIM})")));
    }
    Ok((0..1usize << d)
        .map(|idx| {
            let x = BinaryVector::from_index(idx, d);
            let p = (0..d).map(|i| logits.coord_prob(i, x.get(i))).product();
            (x, p)
        })
        .collect())
}

/// A distribution over `m` explicitly indexed states `z_0 … z_{m−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedDistribution {
    probs: Vec<f64>,
}

impl IndexedDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return invalid("indexed support needs m >= 2 states");
        }
        if probs.iter().any(|&p| p <= 0.0 || !p.is_finite()) {
            return invalid("indexed probabilities must be positive and finite");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("indexed probabilities sum to {total}, not 1"));
        }
        Ok(IndexedDistribution { probs })
    }

    /// Normalises arbitrary positive weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        IndexedDistribution::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn inc(&self, idx: usize) -> usize {
        (idx + 1) % self.probs.len()
    }

    pub fn dec(&self, idx: usize) -> usize {
        (idx + self.probs.len() - 1) % self.probs.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn bv(bits: &[u8]) -> BinaryVector {
        BinaryVector::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn saturated_logits_sample_ones() {
        let logits = Logits::new(vec![50.0; 6]).unwrap();
        let mut rng = stream(0, Stream::Sampling);
        for x in logits.sample(&mut rng, 100).unwrap() {
            assert!(x.bits().iter().all(|&b| b == 1));
        }
    }

    #[test]
    fn sample_rejects_zero_k() {
        let logits = Logits::zeros(2).unwrap();
        let mut rng = stream(0, Stream::Sampling);
        assert!(matches!(logits.sample(&mut rng, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sample_mean_law_of_large_numbers() {
        // sd of the mean is 0.5/1000 = 5e-4, so [0.498, 0.502] is a 4σ band.
        let logits = Logits::zeros(1).unwrap();
        let mut rng = stream(11, Stream::Sampling);
        let n = 1_000_000;
        let ones: usize = logits.sample(&mut rng, n).unwrap().iter().map(|x| x.get(0) as usize).sum();
        let mean = ones as f64 / n as f64;
        assert!((0.498..=0.502).contains(&mean), "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let logits = Logits::new(vec![0.3, -1.0, 2.0]).unwrap();
        let a = logits.sample(&mut stream(4, Stream::Sampling), 20).unwrap();
        let b = logits.sample(&mut stream(4, Stream::Sampling), 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_examples() {
        let l = Logits::zeros(2).unwrap();
        assert!((l.log_prob(&bv(&[1, 0])).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        let l = Logits::new(vec![2.0]).unwrap();
        let expected = (1.0 / (1.0 + (-2.0f64).exp())).ln();
        assert!((l.log_prob(&bv(&[1])).unwrap() - expected).abs() < 1e-15);
        assert!((expected + 0.126928).abs() < 1e-6);
        assert!(l.log_prob(&bv(&[1, 0])).is_err());
    }

    #[test]
    fn score_example_and_finite_difference() {
        let l = Logits::zeros(1).unwrap();
        assert_eq!(l.score(&bv(&[1])).unwrap(), vec![0.5]);
        let l = Logits::new(vec![0.4, -1.3, 2.2]).unwrap();
        let x = bv(&[1, 0, 0]);
        let s = l.score(&x).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = l.as_slice().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (Logits::new(up).unwrap().log_prob(&x).unwrap() - Logits::new(dn).unwrap().log_prob(&x).unwrap())
                / (2.0 * h);
            assert!(((fd - s[i]) / s[i]).abs() <= 1e-6, "coord {i}: fd {fd} vs {}", s[i]);
        }
    }

    #[test]
    fn flip_ratio_examples() {
        let l = Logits::zeros(1).unwrap();
        assert_eq!(l.flip_ratio(&bv(&[0]), 0, 0.0).unwrap(), 1.0);
        let l = Logits::new(vec![4f64.ln()]).unwrap();
        assert!((l.flip_ratio(&bv(&[0]), 0, 0.0).unwrap() - 4.0).abs() < 1e-12);
        let stab = l.flip_ratio(&bv(&[0]), 0, 1e-3).unwrap();
        assert!((stab - 0.8 / 0.201).abs() < 1e-12);
        assert!((stab - 3.9801).abs() < 1e-4);
        assert!(l.flip_ratio(&bv(&[0]), 1, 0.0).is_err());
    }

    #[test]
    fn enumerate_support_order_and_uniform() {
        let support = enumerate_support(&Logits::zeros(2).unwrap()).unwrap();
        let states: Vec<_> = support.iter().map(|(x, _)| x.bits().to_vec()).collect();
        assert_eq!(states, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        for (_, p) in enumerate_support(&Logits::zeros(3).unwrap()).unwrap() {
            assert_eq!(p, 0.125);
        }
        assert!(matches!(enumerate_support(&Logits::zeros(21).unwrap()), Err(Error::Capacity(_))));
    }

    #[test]
    fn cyclic_inc_dec_wrap() {
        let x = bv(&[0, 1, 1]);
        let (y, changed) = x.cyclic_inc();
        assert_eq!(y, bv(&[1, 0, 0]));
        assert_eq!(changed, vec![2, 1, 0]);
        assert_eq!(y.cyclic_dec().0, x);
        assert_eq!(bv(&[1, 1]).cyclic_inc().0, bv(&[0, 0]));
        assert_eq!(bv(&[0, 0]).cyclic_dec().0, bv(&[1, 1]));
        for idx in 0..8 {
            let x = BinaryVector::from_index(idx, 3);
            assert_eq!(x.index(), idx);
            assert_eq!(x.cyclic_inc().0.index(), (idx + 1) % 8);
        }
    }

    #[test]
    fn indexed_distribution_validation() {
        assert!(IndexedDistribution::new(vec![1.0]).is_err());
        assert!(IndexedDistribution::new(vec![0.5, 0.6]).is_err());
        let q = IndexedDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!((q.inc(2), q.dec(0)), (0, 2));
    }

    fn logits_strategy(max_d: usize) -> impl Strategy<Value = Logits> {
        prop::collection::vec(-4.0f64..4.0, 1..=max_d).prop_map(|v| Logits::new(v).unwrap())
    }

    proptest! {
        #[test]
        fn normalization_and_score_identity(l in logits_strategy(10)) {
            let support = enumerate_support(&l).unwrap();
            let total: f64 = support.iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let mut mean = vec![0.0; l.dim()];
            for (x, p) in &support {
                for (m, s) in mean.iter_mut().zip(l.score(x).unwrap()) {
                    *m += p * s;
                }
            }
            prop_assert!(mean.iter().all(|m| m.abs() <= 1e-12));
        }

        #[test]
        fn flip_ratio_moves_probability(l in logits_strategy(8), idx in 0usize..256, i in 0usize..8) {
            let d = l.dim();
            let x = BinaryVector::from_index(idx % (1 << d), d);
            let i = i % d;
            let r = l.flip_ratio(&x, i, 0.0).unwrap();
            let qx = l.log_prob(&x).unwrap().exp();
            let qy = l.log_prob(&x.flipped(i)).unwrap().exp();
            prop_assert!((r * qx - qy).abs() <= 1e-12);
        }

        #[test]
        fn score_entries_in_open_unit_interval(l in logits_strategy(6), idx in 0usize..64) {
            let x = BinaryVector::from_index(idx % (1 << l.dim()), l.dim());
            for s in l.score(&x).unwrap() {
                prop_assert!(s.abs() > 0.0 && s.abs() < 1.0);
            }
        }
    }
}
