//! Brute-force verification by exhaustive enumeration.
//!
//! Nothing here samples. Expectations are sums over the full support, and
//! estimator means are sums over every ordered `K`-tuple of states, computed
//! by calling the production estimator on each tuple. Work beyond an
//! [`EnumerationBudget`] is refused with a capacity error.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{enumerate_support, BinaryVector, IndexedDistribution, Logits, SampleBatch};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::estimators::{
    build_estimator, cv_variance_grad, EstimatorKind, EstimatorSpec, GradEstimate, GradientEstimator,
};
use crate::nn::{Activation, DenseNet, ParamVector};
use crate::rng::{stream, Stream};
use crate::stein::{
    build_operator, dense_generator_binary, dense_generator_indexed, OperatorSpec, OperatorTag, SteinOperator,
};
use crate::surrogates::{CvNetwork, SurrogateMode};
use crate::tasks::{exact_objective, synthetic_patterns, Objective, TableTask, ToyVae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget {
    pub max_states: usize,
    pub max_tuples: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget { max_states: 4096, max_tuples: 1_000_000 }
    }
}

impl EnumerationBudget {
    fn states(&self, d: usize) -> Result<usize> {
        match 1usize.checked_shl(d as u32).filter(|&n| d < usize::BITS as usize && n <= self.max_states) {
            Some(n) => Ok(n),
            None => Err(Error::Capacity(format!("2^{d} states exceed the budget of {}", self.max_states))),
        }
    }

    fn tuples(&self, states: usize, k: usize) -> Result<usize> {
        let mut n = 1usize;
        for _ in 0..k {
            n = n.checked_mul(states).filter(|&n| n <= self.max_tuples).ok_or_else(|| {
                Error::Capacity(format!("{states}^{k} sample tuples exceed the budget of {}", self.max_tuples))
            })?;
        }
        Ok(n)
    }
}

/// `Σ_x q(x) f(x) ∇_η log q(x)`.
pub fn exact_gradient(task: &dyn Objective, logits: &Logits, budget: &EnumerationBudget) -> Result<Vec<f64>> {
    ensure_len("logits", logits.dim(), task.dim())?;
    budget.states(logits.dim())?;
    let mut grad = vec![0.0; logits.dim()];
    for (x, p) in enumerate_support(logits)? {
        let f = task.eval(&x)?.0;
        for (g, s) in grad.iter_mut().zip(logits.score(&x)?) {
            *g += p * f * s;
        }
    }
    Ok(grad)
}

/// `E[ĝ]` over all ordered `K`-tuples of i.i.d. samples, each tuple weighted
/// by the product of its sample probabilities.
pub fn enumerated_estimator_mean(
    estimator: &dyn GradientEstimator,
    task: &dyn Objective,
    logits: &Logits,
    k: usize,
    cv: Option<&CvNetwork>,
    budget: &EnumerationBudget,
) -> Result<Vec<f64>> {
    let d = logits.dim();
    ensure_len("logits", d, task.dim())?;
    let n = budget.states(d)?;
    let tuples = budget.tuples(n, k)?;
    if k < estimator.min_samples() {
        return invalid(format!("{} needs K ≥ {}", estimator.name(), estimator.min_samples()));
    }
    let support = enumerate_support(logits)?;
    let evals: Vec<(f64, Vec<f64>)> = support.iter().map(|(x, _)| task.eval(x)).collect::<Result<_>>()?;
    let mut mean = vec![0.0; d];
    let mut digits = vec![0usize; k];
    for _ in 0..tuples {
        let prob: f64 = digits.iter().map(|&i| support[i].1).product();
        let samples = digits.iter().map(|&i| support[i].0.clone()).collect();
        let f = digits.iter().map(|&i| evals[i].0).collect();
        let g = digits.iter().map(|&i| evals[i].1.clone()).collect();
        let est = estimator.estimate(&SampleBatch::new(samples, f, g)?, logits, cv)?;
        for (m, v) in mean.iter_mut().zip(&est.grad) {
            *m += prob * v;
        }
        for digit in digits.iter_mut() {
            *digit += 1;
            if *digit < n {
                break;
            }
            *digit = 0;
        }
    }
    Ok(mean)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `max |Aᵀq|` over `{0,1}^d`.
pub fn stationarity_check(op: &dyn SteinOperator, logits: &Logits, budget: &EnumerationBudget) -> Result<f64> {
    budget.states(logits.dim())?;
    let q: Vec<f64> = enumerate_support(logits)?.into_iter().map(|(_, p)| p).collect();
    Ok(max_abs(&dense_generator_binary(op, logits)?.transpose_mul_vec(&q)))
}

/// `max |Aᵀq|` over an indexed support.
pub fn stationarity_check_indexed(
    op: &dyn SteinOperator,
    dist: &IndexedDistribution,
    budget: &EnumerationBudget,
) -> Result<f64> {
    if dist.len() > budget.max_states {
        return Err(Error::Capacity(format!("{} states exceed the budget of {}", dist.len(), budget.max_states)));
    }
    Ok(max_abs(&dense_generator_indexed(op, dist)?.transpose_mul_vec(dist.probs())))
}

/// `E_q[(Ah)(x)]` computed pointwise, for `h` given as a table indexed by
/// lexicographic state.
pub fn operator_mean(op: &dyn SteinOperator, logits: &Logits, h: &[f64], budget: &EnumerationBudget) -> Result<f64> {
    let n = budget.states(logits.dim())?;
    ensure_len("function table", h.len(), n)?;
    let mut total = 0.0;
    for (x, p) in enumerate_support(logits)? {
        let row = op.binary_weights(logits, &x)?;
        total += p * row.apply(h[x.index()], |m| h[m.state.index()]);
    }
    Ok(total)
}

pub fn operator_mean_indexed(op: &dyn SteinOperator, dist: &IndexedDistribution, h: &[f64]) -> Result<f64> {
    ensure_len("function table", h.len(), dist.len())?;
    let mut total = 0.0;
    for (z, &p) in dist.probs().iter().enumerate() {
        let row = op.indexed_weights(dist, z)?;
        total += p * row.apply(h[z], |&y| h[y]);
    }
    Ok(total)
}

/// A control-variate network with every parameter drawn from
/// `uniform(−scale, scale)`, so both output channels are non-trivial.
pub fn random_cv<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> CvNetwork {
    let mut cv = CvNetwork::new(rng);
    let p = ParamVector(cv.params().iter().map(|_| rng.gen_range(-scale..scale)).collect());
    cv.set_params(p).expect("same length");
    cv
}

pub fn random_logits<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Logits {
    Logits::new((0..d).map(|_| rng.gen_range(-2.5..2.5)).collect()).expect("finite")
}

pub fn random_indexed<R: Rng + ?Sized>(rng: &mut R, m: usize) -> IndexedDistribution {
    let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    IndexedDistribution::from_weights(&w).expect("positive weights")
}

/// Measured effect of ratio stabilization for one operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationWitness {
    pub operator: OperatorTag,
    pub epsilon: f64,
    /// `max |Aᵀq|` on a random `d = 3` instance.
    pub stationarity_residual: f64,
    /// `max |E[ĝ_RODEO] − ∇E[f]|` on the same instance with `K = 2`.
    pub estimator_bias: f64,
}

pub fn stabilization_witness(
    operator: OperatorTag,
    epsilon: f64,
    seed: u64,
    budget: &EnumerationBudget,
) -> Result<StabilizationWitness> {
    let mut rng = stream(seed, Stream::Custom(40));
    let d = 3;
    let logits = random_logits(&mut rng, d);
    let task = TableTask::random(d, &mut rng)?;
    let cv = random_cv(&mut rng, 0.5);
    let op_spec = OperatorSpec::new(operator).with_epsilon(epsilon);
    let op = build_operator(&op_spec)?;
    let est = build_estimator(&EstimatorSpec::new(EstimatorKind::Rodeo).with_operator(op_spec))?;
    let exact = exact_gradient(&task, &logits, budget)?;
    let mean = enumerated_estimator_mean(est.as_ref(), &task, &logits, 2, Some(&cv), budget)?;
    let bias = mean.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(StabilizationWitness {
        operator,
        epsilon,
        stationarity_residual: stationarity_check(op.as_ref(), &logits, budget)?,
        estimator_bias: bias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Operators,
    Unbiasedness,
    Gradients,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Operators, Suite::Unbiasedness, Suite::Gradients];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Operators => "operators",
            Suite::Unbiasedness => "unbiasedness",
            Suite::Gradients => "gradients",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown check suite '{s}'")))
    }
}

/// What a row's measured value has to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Criterion {
    AtMost(f64),
    Positive,
    /// Recorded for information only.
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub measured: Option<f64>,
    pub criterion: Criterion,
    pub status: CheckStatus,
}

impl CheckRow {
    /// Evaluates a measurement; capacity errors become skipped rows and any
    /// other error fails the row.
    pub fn from_result(name: impl Into<String>, measured: Result<f64>, criterion: Criterion) -> Self {
        let name = name.into();
        match measured {
            Ok(v) => {
                let ok = match criterion {
                    Criterion::AtMost(tol) => v <= tol,
                    Criterion::Positive => v > 0.0,
                    Criterion::Reported => v.is_finite(),
                };
                let status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
                CheckRow { name, measured: Some(v), criterion, status }
            }
            Err(Error::Capacity(reason)) => {
                CheckRow { name, measured: None, criterion, status: CheckStatus::Skipped(reason) }
            }
            Err(e) => CheckRow { name: format!("{name} ({e})"), measured: None, criterion, status: CheckStatus::Fail },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: Suite,
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.status != CheckStatus::Fail)
    }

    pub fn row(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "check {}", self.suite.name())?;
        for r in &self.rows {
            let measured = r.measured.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
            let target = match r.criterion {
                Criterion::AtMost(t) => format!("<= {t:.0e}"),
                Criterion::Positive => "> 0".to_string(),
                Criterion::Reported => "reported".to_string(),
            };
            let status = match &r.status {
                CheckStatus::Pass => "PASS".to_string(),
                CheckStatus::Fail => "FAIL".to_string(),
                CheckStatus::Skipped(why) => format!("SKIP ({why})"),
            };
            writeln!(f, "  {:<52} {:>11} {:>10}  {status}", r.name, measured, target)?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, budget: &EnumerationBudget) -> CheckReport {
    let rows = match suite {
        Suite::Operators => operator_rows(budget),
        Suite::Unbiasedness => unbiasedness_rows(budget),
        Suite::Gradients => gradient_rows(),
    };
    CheckReport { suite, rows }
}

pub const OPERATOR_DRAWS: u64 = 20;
pub const OPERATOR_TOL: f64 = 1e-10;

/// Worst `|Aᵀq|` and `|E_q[Ah]|` over random binary instances with
/// `d = 1, …, 10` and random indexed instances with `m` up to 1024.
pub fn operator_mean_zero(tag: OperatorTag, budget: &EnumerationBudget) -> Result<[f64; 4]> {
    let op = build_operator(&OperatorSpec::new(tag))?;
    let mut rng = stream(tag as u64, Stream::Custom(41));
    let mut worst = [0.0f64; 4];
    for draw in 0..OPERATOR_DRAWS {
        let d = 1 + (draw % 10) as usize;
        let logits = random_logits(&mut rng, d);
        let h: Vec<f64> = (0..1usize << d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst[0] = worst[0].max(stationarity_check(op.as_ref(), &logits, budget)?);
        worst[1] = worst[1].max(operator_mean(op.as_ref(), &logits, &h, budget)?.abs());

        let m = if draw == 0 { 1024 } else { rng.gen_range(2..=256) };
        let dist = random_indexed(&mut rng, m);
        let h: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst[2] = worst[2].max(stationarity_check_indexed(op.as_ref(), &dist, budget)?);
        worst[3] = worst[3].max(operator_mean_indexed(op.as_ref(), &dist, &h)?.abs());
    }
    Ok(worst)
}

fn operator_rows(budget: &EnumerationBudget) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for tag in OperatorTag::ALL {
        let labels = ["binary max|A^T q|", "binary max|E[Ah]|", "indexed max|A^T q|", "indexed max|E[Ah]|"];
        match operator_mean_zero(tag, budget) {
            Ok(w) => {
                for (label, v) in labels.iter().zip(w) {
                    rows.push(CheckRow::from_result(
                        format!("{} {label}", tag.name()),
                        Ok(v),
                        Criterion::AtMost(OPERATOR_TOL),
                    ));
                }
            }
            Err(e) => rows.push(CheckRow::from_result(tag.name(), Err(e), Criterion::AtMost(OPERATOR_TOL))),
        }
    }
    for tag in [OperatorTag::Mpf, OperatorTag::Difference] {
        let w = stabilization_witness(tag, 1e-3, 0, budget);
        let (res, bias) = match w {
            Ok(w) => (Ok(w.stationarity_residual), Ok(w.estimator_bias)),
            Err(e) => {
                let again = match &e {
                    Error::Capacity(m) => Error::Capacity(m.clone()),
                    other => Error::Numerical(other.to_string()),
                };
                (Err(e), Err(again))
            }
        };
        rows.push(CheckRow::from_result(format!("{} eps=1e-3 max|A^T q|", tag.name()), res, Criterion::Positive));
        rows.push(CheckRow::from_result(format!("{} eps=1e-3 rodeo bias", tag.name()), bias, Criterion::Reported));
    }
    rows
}

pub const UNBIASED_TOL: f64 = 1e-10;
pub const BASELINE_TOL: f64 = 1e-12;
pub const BASELINES: [f64; 3] = [0.0, 1.0, -3.7];

/// Worst `|E[ĝ] − ∇E[f]|` over `d ∈ {2,3}`, `K ∈ {2,3}` and five random
/// `(η, γ, f)` draws.
pub fn unbiasedness_grid(spec: &EstimatorSpec, budget: &EnumerationBudget) -> Result<f64> {
    let est = build_estimator(spec)?;
    let mut worst = 0.0f64;
    for d in [2, 3] {
        for k in [2, 3] {
            for seed in 0..5u64 {
                let mut rng = stream(seed, Stream::Custom(100 + 10 * d as u64 + k as u64));
                let logits = random_logits(&mut rng, d);
                let task = TableTask::random(d, &mut rng)?;
                let cv = random_cv(&mut rng, 0.5);
                let exact = exact_gradient(&task, &logits, budget)?;
                let mean = enumerated_estimator_mean(est.as_ref(), &task, &logits, k, Some(&cv), budget)?;
                for (a, b) in mean.iter().zip(&exact) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Largest pairwise difference between enumerated REINFORCE means across
/// [`BASELINES`], on a random `d = 3`, `K = 2` instance.
pub fn baseline_invariance(budget: &EnumerationBudget) -> Result<f64> {
    let mut rng = stream(0, Stream::Custom(42));
    let logits = random_logits(&mut rng, 3);
    let task = TableTask::random(3, &mut rng)?;
    let means = BASELINES
        .iter()
        .map(|&b| {
            let est = build_estimator(&EstimatorSpec::new(EstimatorKind::Reinforce).with_baseline(b))?;
            enumerated_estimator_mean(est.as_ref(), &task, &logits, 2, None, budget)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    for a in &means {
        for b in &means {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

fn unbiasedness_rows(budget: &EnumerationBudget) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for kind in [EstimatorKind::Reinforce, EstimatorKind::Rloo] {
        let spec = EstimatorSpec::new(kind);
        rows.push(CheckRow::from_result(
            kind.name(),
            unbiasedness_grid(&spec, budget),
            Criterion::AtMost(UNBIASED_TOL),
        ));
    }
    rows.push(CheckRow::from_result(
        "reinforce baseline invariance b in {0, 1, -3.7}",
        baseline_invariance(budget),
        Criterion::AtMost(BASELINE_TOL),
    ));
    for kind in [EstimatorKind::Rodeo, EstimatorKind::ReinforceStein] {
        for mode in [SurrogateMode::LeaveOneOut, SurrogateMode::Pooled] {
            for tag in OperatorTag::ALL {
                let spec = EstimatorSpec::new(kind).with_operator(OperatorSpec::new(tag)).with_mode(mode);
                rows.push(CheckRow::from_result(
                    format!("{} {} {}", kind.name(), mode.name(), tag.name()),
                    unbiasedness_grid(&spec, budget),
                    Criterion::AtMost(UNBIASED_TOL),
                ));
            }
        }
    }
    rows
}

/// `max |a − b| / max |b|`, the relative error used by every
/// finite-difference comparison here.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    num / max_abs(b).max(f64::MIN_POSITIVE)
}

pub const FD_STEP: f64 = 1e-5;
pub const VJP_TOL: f64 = 1e-5;
pub const CV_GRAD_TOL: f64 = 1e-4;
pub const EXACT_GRAD_TOL: f64 = 1e-8;
pub const VAE_GRAD_TOL: f64 = 1e-4;
pub const FD_INSTANCES: u64 = 10;

fn central_difference(params: &[f64], i: usize, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut p = params.to_vec();
    p[i] = params[i] + FD_STEP;
    let up = f(&p)?;
    p[i] = params[i] - FD_STEP;
    let dn = f(&p)?;
    Ok((up - dn) / (2.0 * FD_STEP))
}

/// Worst relative error of [`DenseNet::vjp`] (input and parameter parts)
/// against central differences of `⟨c, net(u)⟩`.
pub fn vjp_finite_difference(instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = stream(seed, Stream::Custom(43));
        let sizes = [rng.gen_range(1..5), rng.gen_range(2..9), rng.gen_range(2..7), rng.gen_range(1..4)];
        let hidden = if seed % 2 == 0 { Activation::LeakyRelu(0.3) } else { Activation::Sigmoid };
        let net = DenseNet::glorot(&sizes, hidden, Activation::Identity, &mut rng)?;
        let u: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..sizes[3]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (gu, gp) = net.vjp(&u, &c)?;
        let pairing =
            |n: &DenseNet, x: &[f64]| -> Result<f64> { Ok(n.forward(x)?.iter().zip(&c).map(|(a, b)| a * b).sum()) };
        let fd_u = (0..u.len()).map(|i| central_difference(&u, i, |x| pairing(&net, x))).collect::<Result<Vec<_>>>()?;
        let params = net.params().0.clone();
        let fd_p = (0..params.len())
            .map(|i| {
                central_difference(&params, i, |p| {
                    let mut n = net.clone();
                    n.set_params(ParamVector(p.to_vec()))?;
                    pairing(&n, &u)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(relative_error(&gu, &fd_u)).max(relative_error(&gp, &fd_p));
    }
    Ok(worst)
}

/// Smallest `|pre-activation|` of any non-identity layer over the network
/// inputs recorded in `est`.
fn kink_margin(est: &GradEstimate, cv: &CvNetwork) -> Result<f64> {
    let net = cv.net();
    let mut margin = f64::INFINITY;
    for term in &est.affine_terms {
        for (z, shape) in net.pre_activations(&term.record.input)?.iter().zip(net.layers()) {
            if shape.activation != Activation::Identity {
                margin = margin.min(max_abs_min(z));
            }
        }
    }
    Ok(margin)
}

fn max_abs_min(v: &[f64]) -> f64 {
    v.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

/// Instances whose recorded inputs put a hidden unit within this distance
/// of the LeakyReLU kink are redrawn: `‖ĝ‖²` is only piecewise smooth in
/// `γ`, and a central difference straddling a kink measures nothing useful.
pub const KINK_MARGIN: f64 = 1e-3;

/// Worst relative error of [`cv_variance_grad`] against central differences
/// of `‖ĝ‖²` with the batch held fixed, cycling through operators and
/// surrogate modes.
pub fn cv_grad_finite_difference(instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = stream(seed, Stream::Custom(44));
        let tag = OperatorTag::ALL[seed as usize % 4];
        let mode = if seed % 3 == 2 { SurrogateMode::Pooled } else { SurrogateMode::LeaveOneOut };
        let spec = EstimatorSpec::new(EstimatorKind::Rodeo).with_operator(OperatorSpec::new(tag)).with_mode(mode);
        let est = build_estimator(&spec)?;
        let mut attempts = 0;
        let (logits, batch, cv, analytic) = loop {
            attempts += 1;
            let d = rng.gen_range(2..5);
            let k = rng.gen_range(2..4);
            let logits = random_logits(&mut rng, d);
            let task = TableTask::random(d, &mut rng)?;
            let batch = crate::tasks::sample_batch(&task, &logits, k, &mut rng)?;
            let cv = random_cv(&mut rng, 0.3);
            let g = est.estimate(&batch, &logits, Some(&cv))?;
            if kink_margin(&g, &cv)? >= KINK_MARGIN {
                let analytic = cv_variance_grad(&g, &cv)?;
                break (logits, batch, cv, analytic);
            }
            if attempts == 1000 {
                return Err(Error::Numerical("no kink-free finite-difference instance found".into()));
            }
        };
        let params = cv.params().0.clone();
        let mut probe = cv.clone();
        let fd = (0..params.len())
            .map(|i| {
                central_difference(&params, i, |p| {
                    probe.set_params(ParamVector(p.to_vec()))?;
                    Ok(est.estimate(&batch, &logits, Some(&probe))?.squared_norm())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(relative_error(&analytic, &fd));
    }
    Ok(worst)
}

/// Worst relative error of [`exact_gradient`] against central differences of
/// the enumerated `E[f]` in `η`.
pub fn exact_gradient_finite_difference(instances: u64, budget: &EnumerationBudget) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = stream(seed, Stream::Custom(45));
        let d = rng.gen_range(1..6);
        let task = TableTask::random(d, &mut rng)?;
        let logits = random_logits(&mut rng, d);
        let g = exact_gradient(&task, &logits, budget)?;
        let fd = (0..d)
            .map(|i| {
                central_difference(logits.as_slice(), i, |eta| {
                    Ok(exact_objective(&task, &Logits::new(eta.to_vec())?)?.0)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(relative_error(&g, &fd));
    }
    Ok(worst)
}

/// Worst relative error of the VAE's `∇_x f` against central differences of
/// `f` at real-valued `x`.
pub fn vae_gradient_finite_difference(instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = stream(seed, Stream::Custom(46));
        let latent = rng.gen_range(2..9);
        let vae = ToyVae::new(synthetic_patterns(seed, 4), latent, &mut rng)?;
        let y = &vae.data[rng.gen_range(0..4)];
        let eta = vae.encode(y)?;
        let x = BinaryVector::new((0..latent).map(|_| rng.gen_range(0..2)).collect())?;
        let (_, grad) = vae.elbo_term(y, &eta, &x, None)?;
        let f_real = |xr: &[f64]| -> Result<f64> {
            let logits = vae.decoder.forward(xr)?;
            let ll: f64 = logits.iter().zip(y).map(|(&l, &ym)| ym * l - crate::distributions::softplus(l)).sum();
            let lq: f64 =
                xr.iter().zip(eta.as_slice()).map(|(xi, e)| xi * e - crate::distributions::softplus(*e)).sum();
            Ok(ll - lq)
        };
        let fd = (0..latent).map(|i| central_difference(&x.as_f64(), i, f_real)).collect::<Result<Vec<_>>>()?;
        worst = worst.max(relative_error(&grad, &fd));
    }
    Ok(worst)
}

fn gradient_rows() -> Vec<CheckRow> {
    let budget = EnumerationBudget::default();
    vec![
        CheckRow::from_result(
            "dense net vjp vs finite differences",
            vjp_finite_difference(FD_INSTANCES),
            Criterion::AtMost(VJP_TOL),
        ),
        CheckRow::from_result(
            "cv_variance_grad vs finite differences of |g|^2",
            cv_grad_finite_difference(FD_INSTANCES),
            Criterion::AtMost(CV_GRAD_TOL),
        ),
        CheckRow::from_result(
            "exact gradient vs finite differences of E[f]",
            exact_gradient_finite_difference(FD_INSTANCES, &budget),
            Criterion::AtMost(EXACT_GRAD_TOL),
        ),
        CheckRow::from_result(
            "toy VAE grad_x f vs finite differences",
            vae_gradient_finite_difference(FD_INSTANCES),
            Criterion::AtMost(VAE_GRAD_TOL),
        ),
    ]
}
