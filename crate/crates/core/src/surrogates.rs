//! Learned control-variate surrogates.
//!
//! One small network `u ↦ (H(u), H′(u))` with `u = (f(x_j), ∇f(x_j)ᵀ(y − x_j))`
//! serves both surrogate families. For sample `k`:
//!
//! - leave-one-out: `h_k(y) = 1/(K−1) Σ_{j≠k} H(u_j(y))`, same for `h′_k` with `H′`;
//! - pooled: one evaluation `H(ū_k(y))` at the leave-one-out mean inputs.
//!
//! Both exclude sample `k`, so `h_k` never depends on `x_k`. Inner products
//! at neighbors of `x_k` are updated incrementally from
//! `∇f(x_j)ᵀ(x_k − x_j)` using only the coordinates the move changes.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{BinaryVector, SampleBatch};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::nn::{dot, Activation, AdamState, DenseNet, ParamVector};

pub const CV_HIDDEN_UNITS: usize = 100;
pub const CV_LEAKY_SLOPE: f64 = 0.3;

/// Two-input, two-output network; channel 0 is `H`, channel 1 is `H′`.
#[derive(Debug)]
pub struct CvNetwork {
    net: DenseNet,
    adam: AdamState,
    forwards: AtomicU64,
}

impl Clone for CvNetwork {
    fn clone(&self) -> Self {
        CvNetwork { net: self.net.clone(), adam: self.adam.clone(), forwards: AtomicU64::new(self.forward_count()) }
    }
}

impl CvNetwork {
    /// `2 → 100 (LeakyReLU 0.3) → 2` with the output layer zeroed, so both
    /// surrogates start identically zero.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::with_hidden(CV_HIDDEN_UNITS, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut net =
            DenseNet::glorot(&[2, hidden, 2], Activation::LeakyRelu(CV_LEAKY_SLOPE), Activation::Identity, rng)
                .expect("fixed architecture is valid");
        net.zero_layer(1);
        Self::from_net(net).expect("fixed architecture is valid")
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        if net.input_dim() != 2 || net.output_dim() != 2 {
            return invalid("control-variate network must map 2 inputs to 2 outputs");
        }
        let adam = AdamState::new(net.num_params());
        Ok(CvNetwork { net, adam, forwards: AtomicU64::new(0) })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn params(&self) -> &ParamVector {
        self.net.params()
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.net.set_params(params)
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Both channels from one forward pass.
    pub fn eval(&self, input: [f64; 2]) -> [f64; 2] {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let out = self.net.forward(&input).expect("input has length 2");
        [out[0], out[1]]
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    /// Adds `cotangentᵀ ∂(H, H′)/∂γ` at `input` into `grad`.
    pub fn accumulate_param_grad(&self, input: [f64; 2], cotangent: [f64; 2], grad: &mut [f64]) -> Result<()> {
        self.net.vjp_accumulate(&input, &cotangent, grad).map(|_| ())
    }

    /// Gradient-descent step on `γ` with the network's own Adam state.
    pub fn adam_step(&mut self, grad: &ParamVector, lr: f64) -> Result<()> {
        let mut params = self.net.params().clone();
        self.adam.step(&mut params, grad, lr)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("control-variate parameters became non-finite".into()));
        }
        *self.net.params_mut() = params;
        Ok(())
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    #[default]
    LeaveOneOut,
    Pooled,
}

impl SurrogateMode {
    pub fn name(self) -> &'static str {
        match self {
            SurrogateMode::LeaveOneOut => "leave_one_out",
            SurrogateMode::Pooled => "pooled",
        }
    }
}

impl std::str::FromStr for SurrogateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave_one_out" => Ok(SurrogateMode::LeaveOneOut),
            "pooled" => Ok(SurrogateMode::Pooled),
            other => invalid(format!("unknown surrogate mode '{other}' (expected leave_one_out or pooled)")),
        }
    }
}

/// One network evaluation made while building an estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    /// Network input `u`.
    pub input: [f64; 2],
    /// Cached `(H(u), H′(u))`.
    pub output: [f64; 2],
    /// Whose surrogate (`k`) was evaluated.
    pub sample: usize,
    /// 0 for `y = x_k`, `n + 1` for the `n`-th operator neighbor.
    pub slot: usize,
    /// Source sample `j`, or `None` for a pooled evaluation.
    pub source: Option<usize>,
    /// Averaging weight of this evaluation inside `h_k(y)`.
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalRecorder {
    records: Vec<EvalRecord>,
}

impl EvalRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    pub fn into_records(self) -> Vec<EvalRecord> {
        self.records
    }
}

/// `(h_k(y), h′_k(y))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateValue {
    pub h: f64,
    pub h_prime: f64,
}

#[derive(Debug, Clone)]
pub struct SurrogateContext<'a> {
    batch: &'a SampleBatch,
    mode: SurrogateMode,
    base_inner: Vec<Vec<f64>>,
}

impl<'a> SurrogateContext<'a> {
    pub fn build(batch: &'a SampleBatch, mode: SurrogateMode) -> Result<Self> {
        let k = batch.len();
        if k < 2 {
            return invalid(format!("surrogates exclude the sample itself, so K >= 2 is required (got K = {k})"));
        }
        let xs: Vec<Vec<f64>> = batch.samples().iter().map(|x| x.as_f64()).collect();
        let base_inner = (0..k)
            .map(|j| {
                let g = &batch.f_grads()[j];
                (0..k)
                    .map(|kk| {
                        if kk == j {
                            0.0
                        } else {
                            xs[kk].iter().zip(&xs[j]).zip(g).map(|((a, b), gi)| gi * (a - b)).sum()
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(SurrogateContext { batch, mode, base_inner })
    }

    pub fn batch(&self) -> &SampleBatch {
        self.batch
    }

    pub fn mode(&self) -> SurrogateMode {
        self.mode
    }

    /// `base_inner[j][k] = ∇f(x_j)ᵀ(x_k − x_j)`.
    pub fn base_inner(&self) -> &[Vec<f64>] {
        &self.base_inner
    }

    /// Number of network forwards one surrogate evaluation costs.
    pub fn forwards_per_eval(&self) -> usize {
        match self.mode {
            SurrogateMode::LeaveOneOut => self.batch.len() - 1,
            SurrogateMode::Pooled => 1,
        }
    }

    fn check_sample(&self, k: usize) -> Result<()> {
        if k >= self.batch.len() {
            return invalid(format!("sample index {k} out of range for K = {}", self.batch.len()));
        }
        Ok(())
    }

    /// `∇f(x_j)ᵀ(y − x_j)` from the cached `∇f(x_j)ᵀ(x_k − x_j)`, touching
    /// only the coordinates in which `y` differs from `x_k`.
    fn inner_incremental(&self, j: usize, k: usize, y: &BinaryVector, changed: &[usize]) -> f64 {
        let xk = &self.batch.samples()[k];
        let g = &self.batch.f_grads()[j];
        let mut v = self.base_inner[j][k];
        for &i in changed {
            v += g[i] * (f64::from(y.get(i)) - f64::from(xk.get(i)));
        }
        v
    }

    fn inner_naive(&self, j: usize, y: &BinaryVector) -> f64 {
        let xj = self.batch.samples()[j].as_f64();
        let diff: Vec<f64> = y.as_f64().iter().zip(&xj).map(|(a, b)| a - b).collect();
        dot(&self.batch.f_grads()[j], &diff)
    }

    /// Network inputs and averaging weights making up `h_k(y)`.
    fn inputs(&self, k: usize, y: &BinaryVector, flip_info: Option<&[usize]>) -> Vec<(Option<usize>, [f64; 2], f64)> {
        let kk = self.batch.len();
        let f = self.batch.f_values();
        let inner = |j: usize| match flip_info {
            Some(changed) => self.inner_incremental(j, k, y, changed),
            None => self.inner_naive(j, y),
        };
        let others = (0..kk).filter(move |&j| j != k);
        let scale = 1.0 / (kk - 1) as f64;
        match self.mode {
            SurrogateMode::LeaveOneOut => others.map(|j| (Some(j), [f[j], inner(j)], scale)).collect(),
            SurrogateMode::Pooled => {
                let (mut fs, mut us) = (0.0, 0.0);
                for j in others {
                    fs += f[j];
                    us += inner(j);
                }
                vec![(None, [fs * scale, us * scale], 1.0)]
            }
        }
    }

    /// Evaluates `h_k(y)` and `h′_k(y)` with shared forward passes.
    ///
    /// With `flip_info = Some(changed)`, `changed` lists the coordinates where
    /// `y` differs from `x_k` and inner products are updated incrementally;
    /// with `None` they are recomputed from scratch. Every forward is
    /// appended to `recorder` under `slot`.
    pub fn evaluate(
        &self,
        cv: &CvNetwork,
        k: usize,
        y: &BinaryVector,
        flip_info: Option<&[usize]>,
        slot: usize,
        recorder: Option<&mut EvalRecorder>,
    ) -> Result<SurrogateValue> {
        self.check_sample(k)?;
        ensure_len("surrogate state", y.dim(), self.batch.dim())?;
        let mut value = SurrogateValue { h: 0.0, h_prime: 0.0 };
        let mut local = Vec::new();
        for (source, input, weight) in self.inputs(k, y, flip_info) {
            let output = cv.eval(input);
            value.h += weight * output[0];
            value.h_prime += weight * output[1];
            local.push(EvalRecord { input, output, sample: k, slot, source, weight });
        }
        if let Some(rec) = recorder {
            rec.records.extend(local);
        }
        Ok(value)
    }
}

/// `h_k(y)`.
pub fn h_eval(
    ctx: &SurrogateContext<'_>,
    cv: &CvNetwork,
    k: usize,
    y: &BinaryVector,
    flip_info: Option<&[usize]>,
) -> Result<f64> {
    Ok(ctx.evaluate(cv, k, y, flip_info, 0, None)?.h)
}

/// `h′_k(y)`.
pub fn h_prime_eval(
    ctx: &SurrogateContext<'_>,
    cv: &CvNetwork,
    k: usize,
    y: &BinaryVector,
    flip_info: Option<&[usize]>,
) -> Result<f64> {
    Ok(ctx.evaluate(cv, k, y, flip_info, 0, None)?.h_prime)
}
