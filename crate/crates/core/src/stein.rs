//! Discrete Stein operators.
//!
//! Every operator here acts linearly on a function `h` through a sparse row
//! of weights: `(Ah)(x) = Σ_y w_xy h(y) + w_xx h(x)`. The
//! [`SteinOperator`] trait produces that row ([`NeighborWeights`]) for a
//! state of either a factorized Bernoulli or an indexed finite distribution,
//! and the free functions apply it to scalar or vector-valued `h`, or expand
//! it into a dense matrix for exact checks.
//!
//! Operators are looked up by name through [`build_operator`]; the table
//! lives in [`REGISTRY`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{BinaryVector, IndexedDistribution, Logits};
use crate::error::{ensure_len, invalid, Error, Result};

/// Binary supports up to `2^12` states can be expanded densely.
pub const MAX_DENSE_BINARY_DIM: usize = 12;
pub const MAX_DENSE_INDEXED: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorTag {
    Gibbs,
    Mpf,
    BirthDeath,
    Difference,
}

impl OperatorTag {
    pub const ALL: [OperatorTag; 4] =
        [OperatorTag::Gibbs, OperatorTag::Mpf, OperatorTag::BirthDeath, OperatorTag::Difference];

    pub fn name(self) -> &'static str {
        match self {
            OperatorTag::Gibbs => "gibbs",
            OperatorTag::Mpf => "mpf",
            OperatorTag::BirthDeath => "birthdeath",
            OperatorTag::Difference => "difference",
        }
    }

    /// Neighborhood used when none is given: coordinate flips everywhere
    /// except birth-death, which needs an indexed support.
    pub fn default_neighborhood(self) -> Neighborhood {
        match self {
            OperatorTag::BirthDeath => Neighborhood::CyclicIncDec,
            _ => Neighborhood::OneCoordinateFlips,
        }
    }
}

impl fmt::Display for OperatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        REGISTRY.iter().find(|entry| entry.name == s).map(|entry| entry.tag).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown operator '{s}' (expected one of {})", operator_names().join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// States differing from `x` in exactly one coordinate.
    OneCoordinateFlips,
    /// `inc x` / `dec x` in a cyclic indexing of the support. On `{0,1}^d`
    /// the index is lexicographic with coordinate 0 most significant.
    CyclicIncDec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub tag: OperatorTag,
    /// Ratio stabilisation `q(y)/(q(x)+ε)`; read by MPF and difference only.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub neighborhood: Option<Neighborhood>,
}

impl OperatorSpec {
    pub fn new(tag: OperatorTag) -> Self {
        OperatorSpec { tag, epsilon: 0.0, neighborhood: None }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_neighborhood(mut self, neighborhood: Neighborhood) -> Self {
        self.neighborhood = Some(neighborhood);
        self
    }
}

/// A neighbor of a binary state and the coordinates in which it differs.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMove {
    pub state: BinaryVector,
    pub changed: Vec<usize>,
}

/// One row of an operator: `(Ah)(x) = Σ weights[n]·h(neighbors[n]) + self_weight·h(x)`.
///
/// For the generators (Gibbs, MPF, birth-death) `self_weight` is the negated
/// sum of the non-negative off-diagonal weights and `generator` is set; the
/// difference operator carries its own `−b_x` diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborWeights<S> {
    pub neighbors: Vec<S>,
    pub weights: Vec<f64>,
    pub self_weight: f64,
    pub generator: bool,
}

impl<S> NeighborWeights<S> {
    /// Generators are evaluated as `Σ w (h(y) − h(x))`, which is exactly zero
    /// for constant `h`.
    pub fn apply(&self, h_at_x: f64, mut h: impl FnMut(&S) -> f64) -> f64 {
        if self.generator {
            let mut acc = 0.0;
            for (y, &w) in self.neighbors.iter().zip(&self.weights) {
                acc += w * (h(y) - h_at_x);
            }
            acc
        } else {
            let mut acc = self.self_weight * h_at_x;
            for (y, &w) in self.neighbors.iter().zip(&self.weights) {
                acc += w * h(y);
            }
            acc
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

pub trait SteinOperator: fmt::Debug + Send + Sync {
    fn tag(&self) -> OperatorTag;

    fn epsilon(&self) -> f64 {
        0.0
    }

    fn neighborhood(&self) -> Neighborhood;

    /// True when rows sum to zero (the operator is a Markov generator).
    fn is_generator(&self) -> bool {
        true
    }

    fn binary_weights(&self, logits: &Logits, x: &BinaryVector) -> Result<NeighborWeights<BinaryMove>>;

    fn indexed_weights(&self, dist: &IndexedDistribution, idx: usize) -> Result<NeighborWeights<usize>>;
}

fn flip_moves(x: &BinaryVector) -> Vec<BinaryMove> {
    (0..x.dim()).map(|i| BinaryMove { state: x.flipped(i), changed: vec![i] }).collect()
}

fn cyclic_moves(x: &BinaryVector) -> (BinaryMove, BinaryMove) {
    let (inc, inc_changed) = x.cyclic_inc();
    let (dec, dec_changed) = x.cyclic_dec();
    (BinaryMove { state: inc, changed: inc_changed }, BinaryMove { state: dec, changed: dec_changed })
}

fn check_index(dist: &IndexedDistribution, idx: usize) -> Result<()> {
    if idx >= dist.len() {
        return invalid(format!("state index {idx} out of range for m = {}", dist.len()));
    }
    Ok(())
}

fn generator_row<S>(neighbors: Vec<S>, weights: Vec<f64>) -> NeighborWeights<S> {
    let self_weight = -weights.iter().sum::<f64>();
    NeighborWeights { neighbors, weights, self_weight, generator: true }
}

/// Random-scan Gibbs: `A = P − I`. On a factorized Bernoulli the conditional
/// `q(x_i | x_{−i})` is the marginal `q_i(x_i)`.
#[derive(Debug, Clone, Default)]
pub struct GibbsOperator;

impl SteinOperator for GibbsOperator {
    fn tag(&self) -> OperatorTag {
        OperatorTag::Gibbs
    }

    fn neighborhood(&self) -> Neighborhood {
        Neighborhood::OneCoordinateFlips
    }

    fn binary_weights(&self, logits: &Logits, x: &BinaryVector) -> Result<NeighborWeights<BinaryMove>> {
        ensure_len("state", x.dim(), logits.dim())?;
        let scale = 1.0 / x.dim() as f64;
        let weights = (0..x.dim()).map(|i| scale * logits.coord_prob(i, 1 - x.get(i))).collect();
        Ok(generator_row(flip_moves(x), weights))
    }

    /// A single categorical variable: the Gibbs kernel resamples from `q`.
    fn indexed_weights(&self, dist: &IndexedDistribution, idx: usize) -> Result<NeighborWeights<usize>> {
        check_index(dist, idx)?;
        let neighbors: Vec<usize> = (0..dist.len()).filter(|&y| y != idx).collect();
        let weights = neighbors.iter().map(|&y| dist.probs()[y]).collect();
        Ok(generator_row(neighbors, weights))
    }
}

/// Minimum probability flow generator, rates `(q(y)/q(x))^{1/2}`.
#[derive(Debug, Clone)]
pub struct MpfOperator {
    pub epsilon: f64,
    pub neighborhood: Neighborhood,
}

impl SteinOperator for MpfOperator {
    fn tag(&self) -> OperatorTag {
        OperatorTag::Mpf
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn neighborhood(&self) -> Neighborhood {
        self.neighborhood
    }

    fn binary_weights(&self, logits: &Logits, x: &BinaryVector) -> Result<NeighborWeights<BinaryMove>> {
        ensure_len("state", x.dim(), logits.dim())?;
        let moves = match self.neighborhood {
            Neighborhood::OneCoordinateFlips => flip_moves(x),
            Neighborhood::CyclicIncDec => {
                let (inc, dec) = cyclic_moves(x);
                if inc.state == dec.state {
                    vec![inc]
                } else {
                    vec![inc, dec]
                }
            }
        };
        let weights = moves.iter().map(|m| logits.move_ratio(x, &m.changed, self.epsilon).sqrt()).collect();
        Ok(generator_row(moves, weights))
    }

    fn indexed_weights(&self, dist: &IndexedDistribution, idx: usize) -> Result<NeighborWeights<usize>> {
        check_index(dist, idx)?;
        let q = dist.probs();
        let mut neighbors = vec![dist.inc(idx)];
        if dist.dec(idx) != neighbors[0] {
            neighbors.push(dist.dec(idx));
        }
        let weights = neighbors.iter().map(|&y| (q[y] / (q[idx] + self.epsilon)).sqrt()).collect();
        Ok(generator_row(neighbors, weights))
    }
}

/// Birth-death process on a cyclically indexed support: birth rate
/// `b_x = q(inc x)/q(x)` towards `inc x`, unit death rate towards `dec x`.
#[derive(Debug, Clone, Default)]
pub struct BirthDeathOperator;

impl SteinOperator for BirthDeathOperator {
    fn tag(&self) -> OperatorTag {
        OperatorTag::BirthDeath
    }

    fn neighborhood(&self) -> Neighborhood {
        Neighborhood::CyclicIncDec
    }

    fn binary_weights(&self, logits: &Logits, x: &BinaryVector) -> Result<NeighborWeights<BinaryMove>> {
        ensure_len("state", x.dim(), logits.dim())?;
        let (inc, dec) = cyclic_moves(x);
        let birth = logits.move_ratio(x, &inc.changed, 0.0);
        Ok(generator_row(vec![inc, dec], vec![birth, 1.0]))
    }

    fn indexed_weights(&self, dist: &IndexedDistribution, idx: usize) -> Result<NeighborWeights<usize>> {
        check_index(dist, idx)?;
        let q = dist.probs();
        let inc = dist.inc(idx);
        Ok(generator_row(vec![inc, dist.dec(idx)], vec![q[inc] / q[idx], 1.0]))
    }
}

/// Difference operator `(Ah)(x) = h(dec x) − b_x h(x)`. On `{0,1}^d` with
/// coordinate flips, each coordinate is a two-state cycle (`inc = dec =
/// flip`) and the rows are averaged with weight `1/d`.
#[derive(Debug, Clone)]
pub struct DifferenceOperator {
    pub epsilon: f64,
    pub neighborhood: Neighborhood,
}

impl SteinOperator for DifferenceOperator {
    fn tag(&self) -> OperatorTag {
        OperatorTag::Difference
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn neighborhood(&self) -> Neighborhood {
        self.neighborhood
    }

    fn is_generator(&self) -> bool {
        false
    }

    fn binary_weights(&self, logits: &Logits, x: &BinaryVector) -> Result<NeighborWeights<BinaryMove>> {
        ensure_len("state", x.dim(), logits.dim())?;
        match self.neighborhood {
            Neighborhood::OneCoordinateFlips => {
                let d = x.dim();
                let scale = 1.0 / d as f64;
                let births: f64 = (0..d).map(|i| logits.flip_ratio_unchecked(x.get(i), i, self.epsilon)).sum();
                Ok(NeighborWeights {
                    neighbors: flip_moves(x),
                    weights: vec![scale; d],
                    self_weight: -scale * births,
                    generator: false,
                })
            }
            Neighborhood::CyclicIncDec => {
                let (inc, dec) = cyclic_moves(x);
                let birth = logits.move_ratio(x, &inc.changed, self.epsilon);
                Ok(NeighborWeights { neighbors: vec![dec], weights: vec![1.0], self_weight: -birth, generator: false })
            }
        }
    }

    fn indexed_weights(&self, dist: &IndexedDistribution, idx: usize) -> Result<NeighborWeights<usize>> {
        check_index(dist, idx)?;
        let q = dist.probs();
        let birth = q[dist.inc(idx)] / (q[idx] + self.epsilon);
        Ok(NeighborWeights {
            neighbors: vec![dist.dec(idx)],
            weights: vec![1.0],
            self_weight: -birth,
            generator: false,
        })
    }
}

type Constructor = fn(&OperatorSpec) -> Result<Box<dyn SteinOperator>>;

pub struct RegistryEntry {
    pub name: &'static str,
    pub tag: OperatorTag,
    build: Constructor,
}

pub static REGISTRY: &[RegistryEntry] = &[
    RegistryEntry { name: "gibbs", tag: OperatorTag::Gibbs, build: build_gibbs },
    RegistryEntry { name: "mpf", tag: OperatorTag::Mpf, build: build_mpf },
    RegistryEntry { name: "birthdeath", tag: OperatorTag::BirthDeath, build: build_birth_death },
    RegistryEntry { name: "difference", tag: OperatorTag::Difference, build: build_difference },
];

pub fn operator_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

fn check_epsilon(spec: &OperatorSpec) -> Result<()> {
    if spec.epsilon < 0.0 || !spec.epsilon.is_finite() {
        return invalid(format!("epsilon must be finite and >= 0, got {}", spec.epsilon));
    }
    Ok(())
}

fn build_gibbs(spec: &OperatorSpec) -> Result<Box<dyn SteinOperator>> {
    if spec.neighborhood == Some(Neighborhood::CyclicIncDec) {
        return invalid("gibbs operator is defined over coordinate flips, not a cyclic index");
    }
    Ok(Box::new(GibbsOperator))
}

fn build_mpf(spec: &OperatorSpec) -> Result<Box<dyn SteinOperator>> {
    check_epsilon(spec)?;
    Ok(Box::new(MpfOperator {
        epsilon: spec.epsilon,
        neighborhood: spec.neighborhood.unwrap_or(Neighborhood::OneCoordinateFlips),
    }))
}

fn build_birth_death(spec: &OperatorSpec) -> Result<Box<dyn SteinOperator>> {
    if spec.neighborhood == Some(Neighborhood::OneCoordinateFlips) {
        return invalid("birth-death operator needs an indexed support (cyclic_inc_dec neighborhood)");
    }
    Ok(Box::new(BirthDeathOperator))
}

fn build_difference(spec: &OperatorSpec) -> Result<Box<dyn SteinOperator>> {
    check_epsilon(spec)?;
    Ok(Box::new(DifferenceOperator {
        epsilon: spec.epsilon,
        neighborhood: spec.neighborhood.unwrap_or(Neighborhood::OneCoordinateFlips),
    }))
}

pub fn build_operator(spec: &OperatorSpec) -> Result<Box<dyn SteinOperator>> {
    let entry = REGISTRY.iter().find(|e| e.tag == spec.tag).expect("every tag is registered");
    (entry.build)(spec)
}

/// `(Ah)(x)` for scalar `h` on `{0,1}^d`.
pub fn apply_scalar(
    op: &dyn SteinOperator,
    logits: &Logits,
    h: &dyn Fn(&BinaryVector) -> f64,
    x: &BinaryVector,
) -> Result<f64> {
    let row = op.binary_weights(logits, x)?;
    Ok(row.apply(h(x), |m| h(&m.state)))
}

/// Componentwise `(Ah̃)(x)` for vector-valued `h̃`.
pub fn apply_vector(
    op: &dyn SteinOperator,
    logits: &Logits,
    h: &dyn Fn(&BinaryVector) -> Vec<f64>,
    x: &BinaryVector,
) -> Result<Vec<f64>> {
    let row = op.binary_weights(logits, x)?;
    let hx = h(x);
    let values = row
        .neighbors
        .iter()
        .map(|m| {
            let hy = h(&m.state);
            if hy.len() != hx.len() {
                return invalid(format!(
                    "vector function returned length {} at a neighbor but {} at x",
                    hy.len(),
                    hx.len()
                ));
            }
            Ok(hy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..hx.len())
        .map(|c| {
            let mut it = values.iter();
            row.apply(hx[c], |_| it.next().expect("one value per neighbor")[c])
        })
        .collect())
}

/// `(Ah)(z_idx)` for `h` given as a table over an indexed support.
pub fn apply_indexed(op: &dyn SteinOperator, dist: &IndexedDistribution, h: &[f64], idx: usize) -> Result<f64> {
    ensure_len("function table", h.len(), dist.len())?;
    let row = op.indexed_weights(dist, idx)?;
    Ok(row.apply(h[idx], |&y| h[y]))
}

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    fn add(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.n + col] += v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    /// `A h`.
    pub fn mul_vec(&self, h: &[f64]) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).iter().zip(h).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Aᵀ q`.
    pub fn transpose_mul_vec(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, &qr) in q.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += qr * a;
            }
        }
        out
    }
}

/// Dense operator matrix over the lexicographically ordered `{0,1}^d`.
pub fn dense_generator_binary(op: &dyn SteinOperator, logits: &Logits) -> Result<DenseMatrix> {
    let d = logits.dim();
    if d > MAX_DENSE_BINARY_DIM {
        return Err(Error::Capacity(format!("dense operator over 2^{d} states exceeds 2^{MAX_DENSE_BINARY_DIM}")));
    }
    let n = 1usize << d;
    let mut a = DenseMatrix::zeros(n);
    for idx in 0..n {
        let x = BinaryVector::from_index(idx, d);
        let row = op.binary_weights(logits, &x)?;
        a.add(idx, idx, row.self_weight);
        for (m, &w) in row.neighbors.iter().zip(&row.weights) {
            a.add(idx, m.state.index(), w);
        }
    }
    Ok(a)
}

pub fn dense_generator_indexed(op: &dyn SteinOperator, dist: &IndexedDistribution) -> Result<DenseMatrix> {
    let m = dist.len();
    if m > MAX_DENSE_INDEXED {
        return Err(Error::Capacity(format!("dense operator over {m} states exceeds {MAX_DENSE_INDEXED}")));
    }
    let mut a = DenseMatrix::zeros(m);
    for idx in 0..m {
        let row = op.indexed_weights(dist, idx)?;
        a.add(idx, idx, row.self_weight);
        for (&y, &w) in row.neighbors.iter().zip(&row.weights) {
            a.add(idx, y, w);
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::enumerate_support;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn op(tag: OperatorTag) -> Box<dyn SteinOperator> {
        build_operator(&OperatorSpec::new(tag)).unwrap()
    }

    fn bv(bits: &[u8]) -> BinaryVector {
        BinaryVector::new(bits.to_vec()).unwrap()
    }

    fn random_logits(rng: &mut impl Rng, d: usize) -> Logits {
        Logits::new((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn registry_round_trips_names() {
        for tag in OperatorTag::ALL {
            assert_eq!(tag.name().parse::<OperatorTag>().unwrap(), tag);
            assert_eq!(op(tag).tag(), tag);
        }
        assert!("langevin".parse::<OperatorTag>().is_err());
    }

    #[test]
    fn birth_death_rejects_flip_neighborhood() {
        let spec = OperatorSpec::new(OperatorTag::BirthDeath).with_neighborhood(Neighborhood::OneCoordinateFlips);
        assert!(matches!(build_operator(&spec), Err(Error::InvalidArgument(_))));
        let spec = OperatorSpec::new(OperatorTag::Gibbs).with_neighborhood(Neighborhood::CyclicIncDec);
        assert!(build_operator(&spec).is_err());
        assert!(build_operator(&OperatorSpec::new(OperatorTag::Mpf).with_epsilon(-1.0)).is_err());
    }

    #[test]
    fn constant_function_is_annihilated_by_generators() {
        let mut rng = stream(1, Stream::Custom(0));
        let logits = random_logits(&mut rng, 5);
        let x = bv(&[1, 0, 0, 1, 1]);
        for tag in [OperatorTag::Gibbs, OperatorTag::Mpf, OperatorTag::BirthDeath] {
            assert_eq!(apply_scalar(op(tag).as_ref(), &logits, &|_| 3.25, &x).unwrap(), 0.0, "{tag}");
        }
    }

    #[test]
    fn gibbs_single_coordinate() {
        let logits = Logits::zeros(1).unwrap();
        let h = |y: &BinaryVector| f64::from(y.get(0));
        let g = op(OperatorTag::Gibbs);
        assert_eq!(apply_scalar(g.as_ref(), &logits, &h, &bv(&[0])).unwrap(), 0.5);
        assert_eq!(apply_scalar(g.as_ref(), &logits, &h, &bv(&[1])).unwrap(), -0.5);
        let a = dense_generator_binary(g.as_ref(), &logits).unwrap();
        assert_eq!(a.row(0), &[-0.5, 0.5]);
        assert_eq!(a.row(1), &[0.5, -0.5]);
    }

    #[test]
    fn mpf_single_coordinate() {
        let logits = Logits::new(vec![4f64.ln()]).unwrap();
        let h = |y: &BinaryVector| f64::from(y.get(0));
        let v = apply_scalar(op(OperatorTag::Mpf).as_ref(), &logits, &h, &bv(&[0])).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn birth_death_three_states() {
        let q = IndexedDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let v = apply_indexed(op(OperatorTag::BirthDeath).as_ref(), &q, &[1.0, 0.0, 0.0], 0).unwrap();
        assert!((v + 1.6).abs() < 1e-12, "{v}");
    }

    #[test]
    fn vector_application_is_componentwise() {
        let mut rng = stream(2, Stream::Custom(0));
        let logits = random_logits(&mut rng, 2);
        let g = op(OperatorTag::Gibbs);
        let l2 = logits.clone();
        let h = move |y: &BinaryVector| l2.score(y).unwrap();
        for idx in 0..4 {
            let x = BinaryVector::from_index(idx, 2);
            let v = apply_vector(g.as_ref(), &logits, &h, &x).unwrap();
            for (c, &vc) in v.iter().enumerate() {
                let hc = |y: &BinaryVector| h(y)[c];
                let s = apply_scalar(g.as_ref(), &logits, &hc, &x).unwrap();
                assert!((vc - s).abs() <= 1e-14);
            }
        }
        let const_h = |_: &BinaryVector| vec![1.0, -2.0];
        assert_eq!(apply_vector(g.as_ref(), &logits, &const_h, &bv(&[0, 1])).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn vector_application_rejects_ragged_outputs() {
        let logits = Logits::zeros(2).unwrap();
        let x = bv(&[0, 0]);
        let h = |y: &BinaryVector| if y == &bv(&[0, 0]) { vec![1.0, 2.0] } else { vec![1.0] };
        assert!(apply_vector(op(OperatorTag::Mpf).as_ref(), &logits, &h, &x).is_err());
    }

    #[test]
    fn vector_mean_zero_by_enumeration() {
        let mut rng = stream(3, Stream::Custom(0));
        for tag in OperatorTag::ALL {
            let logits = random_logits(&mut rng, 3);
            let table: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let h = |y: &BinaryVector| table[y.index()].clone();
            let o = op(tag);
            let mut mean = vec![0.0; 3];
            for (x, p) in enumerate_support(&logits).unwrap() {
                for (m, v) in mean.iter_mut().zip(apply_vector(o.as_ref(), &logits, &h, &x).unwrap()) {
                    *m += p * v;
                }
            }
            assert!(mean.iter().all(|m| m.abs() <= 1e-12), "{tag}: {mean:?}");
        }
    }

    #[test]
    fn dense_matrix_matches_pointwise_application() {
        let mut rng = stream(4, Stream::Custom(0));
        for tag in OperatorTag::ALL {
            let logits = random_logits(&mut rng, 4);
            let h: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let o = op(tag);
            let a = dense_generator_binary(o.as_ref(), &logits).unwrap();
            let ah = a.mul_vec(&h);
            for (idx, &expected) in ah.iter().enumerate() {
                let x = BinaryVector::from_index(idx, 4);
                let v = apply_scalar(o.as_ref(), &logits, &|y| h[y.index()], &x).unwrap();
                assert!((v - expected).abs() <= 1e-12, "{tag} at {idx}");
            }
            if o.is_generator() {
                for r in 0..16 {
                    assert!(a.row(r).iter().sum::<f64>().abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_capacity_guard() {
        let logits = Logits::zeros(13).unwrap();
        assert!(matches!(dense_generator_binary(&GibbsOperator, &logits), Err(Error::Capacity(_))));
    }

    #[test]
    fn birth_death_substitution_gives_difference_operator() {
        // h(x) = g(x) − g(inc x) turns the birth-death operator applied to g
        // into the difference operator applied to h.
        let mut rng = stream(5, Stream::Custom(0));
        for m in [2usize, 3, 7, 16] {
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
            let q = IndexedDistribution::from_weights(&w).unwrap();
            let g: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..m).map(|i| g[i] - g[q.inc(i)]).collect();
            let bd = BirthDeathOperator;
            let diff = DifferenceOperator { epsilon: 0.0, neighborhood: Neighborhood::CyclicIncDec };
            for i in 0..m {
                let lhs = apply_indexed(&bd, &q, &g, i).unwrap();
                let rhs = apply_indexed(&diff, &q, &h, i).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12, "m={m} i={i}");
            }
        }
    }

    #[test]
    fn epsilon_breaks_stationarity() {
        let logits = Logits::new(vec![1.5, -0.7, 0.2]).unwrap();
        let q: Vec<f64> = enumerate_support(&logits).unwrap().into_iter().map(|(_, p)| p).collect();
        let exact = dense_generator_binary(
            &MpfOperator { epsilon: 0.0, neighborhood: Neighborhood::OneCoordinateFlips },
            &logits,
        )
        .unwrap()
        .transpose_mul_vec(&q);
        let stab = dense_generator_binary(
            &MpfOperator { epsilon: 1e-3, neighborhood: Neighborhood::OneCoordinateFlips },
            &logits,
        )
        .unwrap()
        .transpose_mul_vec(&q);
        assert!(exact.iter().all(|v| v.abs() <= 1e-12));
        assert!(stab.iter().any(|v| v.abs() > 1e-8));
    }
}
