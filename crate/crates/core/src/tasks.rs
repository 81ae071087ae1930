//! Objectives and the training loop.
//!
//! Two desk-scale tasks drive the estimators: a separable quadratic on
//! `{0,1}^d` whose expectation under `q_η` is known in closed form, and a
//! toy binary-latent VAE trained on synthetic 16-bit patterns. Auxiliary
//! objectives ([`LinearTask`], [`TableTask`]) back the oracle checks.

use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{enumerate_support, sigmoid, softplus, BinaryVector, Logits, SampleBatch};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::estimators::{build_estimator, cv_variance_grad, GradientEstimator};
use crate::nn::{Activation, AdamState, DenseNet, ParamVector};
use crate::rng::{stream, Stream, StreamRng};
use crate::runner::{RunConfig, TraceRecord};
use crate::surrogates::CvNetwork;

/// Largest dimension for which expectations are computed by enumeration.
pub const MAX_EXACT_DIM: usize = 16;

/// A function on binary states that also provides `∇f` when its argument is
/// treated as a real vector.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &BinaryVector) -> Result<(f64, Vec<f64>)>;
}

/// `f(x) = −Σ_i w_i (x_i − c_i)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTask {
    pub center: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadraticTask {
    pub fn new(center: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        ensure_len("quadratic weights", weights.len(), center.len())?;
        if center.is_empty() {
            return invalid("quadratic task needs d >= 1");
        }
        if center.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return invalid("quadratic centers must lie in [0, 1]");
        }
        if weights.iter().any(|w| *w <= 0.0 || !w.is_finite()) {
            return invalid("quadratic weights must be positive and finite");
        }
        Ok(QuadraticTask { center, weights })
    }

    /// Centers uniform on `[0, 1]`, weights uniform on `[0.5, 1.5]`.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        let center = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let weights = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
        QuadraticTask::new(center, weights)
    }

    pub fn value_real(&self, x: &[f64]) -> f64 {
        -x.iter().zip(&self.center).zip(&self.weights).map(|((xi, c), w)| w * (xi - c) * (xi - c)).sum::<f64>()
    }

    /// `E_q[f]` and `∇_η E_q[f]` per coordinate:
    /// `E[(x_i − c_i)²] = p_i(1 − c_i)² + (1 − p_i)c_i²`, derivative
    /// `p_i(1 − p_i)(1 − 2c_i)`.
    pub fn closed_form(&self, logits: &Logits) -> Result<(f64, Vec<f64>)> {
        ensure_len("logits", logits.dim(), self.center.len())?;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(self.center.len());
        for ((&eta, &c), &w) in logits.as_slice().iter().zip(&self.center).zip(&self.weights) {
            let p = sigmoid(eta);
            value -= w * (p * (1.0 - c) * (1.0 - c) + (1.0 - p) * c * c);
            grad.push(-w * p * (1.0 - p) * (1.0 - 2.0 * c));
        }
        Ok((value, grad))
    }
}

impl Objective for QuadraticTask {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn eval(&self, x: &BinaryVector) -> Result<(f64, Vec<f64>)> {
        ensure_len("state", x.dim(), self.dim())?;
        let xf = x.as_f64();
        let grad = xf.iter().zip(&self.center).zip(&self.weights).map(|((xi, c), w)| -2.0 * w * (xi - c)).collect();
        Ok((self.value_real(&xf), grad))
    }
}

/// `f(x) = aᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTask {
    pub coef: Vec<f64>,
}

impl Objective for LinearTask {
    fn dim(&self) -> usize {
        self.coef.len()
    }

    fn eval(&self, x: &BinaryVector) -> Result<(f64, Vec<f64>)> {
        ensure_len("state", x.dim(), self.dim())?;
        Ok((x.as_f64().iter().zip(&self.coef).map(|(a, b)| a * b).sum(), self.coef.clone()))
    }
}

/// Arbitrary `f` and "gradient" tables indexed by lexicographic state.
/// The estimators never need `∇f` to be a true gradient, so random tables
/// make the hardest unbiasedness test.
#[derive(Debug, Clone, PartialEq)]
pub struct TableTask {
    d: usize,
    values: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

impl TableTask {
    pub fn new(d: usize, values: Vec<f64>, grads: Vec<Vec<f64>>) -> Result<Self> {
        if d > MAX_EXACT_DIM {
            return Err(Error::Capacity(format!("table task over 2^{d} states")));
        }
        ensure_len("table values", values.len(), 1 << d)?;
        ensure_len("table gradients", grads.len(), 1 << d)?;
        for g in &grads {
            ensure_len("table gradient", g.len(), d)?;
        }
        Ok(TableTask { d, values, grads })
    }

    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        let n = 1usize << d;
        let values = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let grads = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        TableTask::new(d, values, grads)
    }
}

impl Objective for TableTask {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, x: &BinaryVector) -> Result<(f64, Vec<f64>)> {
        ensure_len("state", x.dim(), self.d)?;
        let i = x.index();
        Ok((self.values[i], self.grads[i].clone()))
    }
}

/// Exact `E_q[f]` and `∇_η E_q[f] = E_q[f·∇_η log q]` by enumeration.
pub fn exact_objective(task: &dyn Objective, logits: &Logits) -> Result<(f64, Vec<f64>)> {
    ensure_len("logits", logits.dim(), task.dim())?;
    if task.dim() > MAX_EXACT_DIM {
        return Err(Error::Capacity(format!("exact objective needs d <= {MAX_EXACT_DIM}, got {}", task.dim())));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; task.dim()];
    for (x, p) in enumerate_support(logits)? {
        let (f, _) = task.eval(&x)?;
        value += p * f;
        for (g, s) in grad.iter_mut().zip(logits.score(&x)?) {
            *g += p * f * s;
        }
    }
    Ok((value, grad))
}

/// Draws `K` samples and evaluates `f` and `∇f` at each.
pub fn sample_batch<R: Rng + ?Sized>(
    task: &dyn Objective,
    logits: &Logits,
    k: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    let samples = logits.sample(rng, k)?;
    let mut f = Vec::with_capacity(k);
    let mut g = Vec::with_capacity(k);
    for x in &samples {
        let (v, grad) = task.eval(x)?;
        if !v.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("objective is non-finite at state {:?}", x.bits())));
        }
        f.push(v);
        g.push(grad);
    }
    SampleBatch::new(samples, f, g)
}

pub const VAE_DATA_DIM: usize = 16;
pub const VAE_DATA_POINTS: usize = 200;
pub const VAE_HIDDEN: usize = 32;
const VAE_TRUTH_LATENT: usize = 4;

/// Synthetic binary data from a seeded ground-truth model: four latent bits
/// `z ~ Bernoulli(1/2)`, observations `y_m ~ Bernoulli(σ(W z + b)_m)`.
pub fn synthetic_patterns(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Data);
    let w: Vec<Vec<f64>> =
        (0..VAE_DATA_DIM).map(|_| (0..VAE_TRUTH_LATENT).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
    let b: Vec<f64> = (0..VAE_DATA_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..VAE_TRUTH_LATENT).map(|_| f64::from(u8::from(rng.gen::<bool>()))).collect();
            (0..VAE_DATA_DIM)
                .map(|m| {
                    let logit: f64 = w[m].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + b[m];
                    f64::from(u8::from(rng.gen::<f64>() < sigmoid(logit)))
                })
                .collect()
        })
        .collect()
}

/// Binary-latent VAE: encoder `y ↦ η`, decoder `x ↦` Bernoulli logits over
/// `y`, uniform factorized prior on `x`.
#[derive(Debug, Clone)]
pub struct ToyVae {
    pub data: Vec<Vec<f64>>,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    adam_encoder: AdamState,
    adam_decoder: AdamState,
}

impl ToyVae {
    pub fn new<R: Rng + ?Sized>(data: Vec<Vec<f64>>, latent_dim: usize, rng: &mut R) -> Result<Self> {
        if data.is_empty() {
            return invalid("VAE needs at least one data point");
        }
        let obs = data[0].len();
        if data.iter().any(|y| y.len() != obs || y.iter().any(|&v| v != 0.0 && v != 1.0)) {
            return invalid("VAE data must be binary vectors of equal length");
        }
        if latent_dim == 0 {
            return invalid("latent dimension must be positive");
        }
        let leaky = Activation::LeakyRelu(0.3);
        let encoder = DenseNet::glorot(&[obs, VAE_HIDDEN, latent_dim], leaky, Activation::Identity, rng)?;
        let decoder = DenseNet::glorot(&[latent_dim, VAE_HIDDEN, obs], leaky, Activation::Identity, rng)?;
        let adam_encoder = AdamState::new(encoder.num_params());
        let adam_decoder = AdamState::new(decoder.num_params());
        Ok(ToyVae { data, encoder, decoder, adam_encoder, adam_decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, y: &[f64]) -> Result<Logits> {
        Logits::new(self.encoder.forward(y)?)
    }

    /// `f(x) = log p_θ(y|x) + log p(x) − log q_η(x|y)` and `∇_x f`, adding
    /// `∇_θ log p_θ(y|x)` into `decoder_grad` when given.
    pub fn elbo_term(
        &self,
        y: &[f64],
        eta: &Logits,
        x: &BinaryVector,
        decoder_grad: Option<&mut [f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        ensure_len("latent state", x.dim(), self.latent_dim())?;
        let xf = x.as_f64();
        let logits = self.decoder.forward(&xf)?;
        let log_lik: f64 = logits.iter().zip(y).map(|(&l, &ym)| ym * l - softplus(l)).sum();
        let log_prior = -(x.dim() as f64) * std::f64::consts::LN_2;
        let log_q = eta.log_prob(x)?;
        let f = log_lik + log_prior - log_q;
        let cot: Vec<f64> = logits.iter().zip(y).map(|(&l, &ym)| ym - sigmoid(l)).collect();
        let input_grad = match decoder_grad {
            Some(acc) => self.decoder.vjp_accumulate(&xf, &cot, acc)?.0,
            None => self.decoder.vjp(&xf, &cot)?.0,
        };
        // ∂/∂x of −log q_η(x|y) = −(xᵀη − Σ softplus(η)) is −η.
        let grad = input_grad.iter().zip(eta.as_slice()).map(|(g, e)| g - e).collect();
        Ok((f, grad))
    }

    /// Exact ELBO averaged over the data set, enumerating the latent space.
    pub fn exact_elbo(&self) -> Result<f64> {
        if self.latent_dim() > MAX_EXACT_DIM {
            return Err(Error::Capacity(format!("exact ELBO needs latent dim <= {MAX_EXACT_DIM}")));
        }
        let mut total = 0.0;
        for y in &self.data {
            let eta = self.encode(y)?;
            for (x, p) in enumerate_support(&eta)? {
                total += p * self.elbo_term(y, &eta, &x, None)?.0;
            }
        }
        Ok(total / self.data.len() as f64)
    }
}

/// The ELBO integrand for one data point, as an [`Objective`] over `x`.
pub struct VaePoint<'a> {
    pub vae: &'a ToyVae,
    pub y: &'a [f64],
    pub eta: &'a Logits,
}

impl Objective for VaePoint<'_> {
    fn dim(&self) -> usize {
        self.vae.latent_dim()
    }

    fn eval(&self, x: &BinaryVector) -> Result<(f64, Vec<f64>)> {
        self.vae.elbo_term(self.y, self.eta, x, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Quadratic,
    ToyVae,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Quadratic => "quadratic",
            TaskKind::ToyVae => "toyvae",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(TaskKind::Quadratic),
            "toyvae" => Ok(TaskKind::ToyVae),
            other => invalid(format!("unknown task '{other}' (expected quadratic or toyvae)")),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Quadratic { task: QuadraticTask, logits: Logits, adam: AdamState },
    ToyVae(Box<ToyVae>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub trace_variance: f64,
    pub stderr: f64,
    pub per_coordinate: Vec<f64>,
    pub samples: usize,
}

/// Trace of the empirical covariance of `estimates`, with the standard error
/// of that trace computed from the per-draw squared deviations.
pub fn trace_variance(estimates: &[Vec<f64>]) -> Result<VarianceReport> {
    let n = estimates.len();
    if n < 2 {
        return invalid(format!("variance needs N >= 2 estimates (got {n})"));
    }
    let d = estimates[0].len();
    let mut mean = vec![0.0; d];
    for e in estimates {
        ensure_len("estimate", e.len(), d)?;
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let scale = n as f64 / (n - 1) as f64;
    let mut per_coordinate = vec![0.0; d];
    let z: Vec<f64> = estimates
        .iter()
        .map(|e| {
            let mut s = 0.0;
            for i in 0..d {
                let dev = (e[i] - mean[i]) * (e[i] - mean[i]);
                per_coordinate[i] += dev;
                s += dev;
            }
            s * scale
        })
        .collect();
    per_coordinate.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let trace = z.iter().sum::<f64>() / n as f64;
    let var_z = z.iter().map(|v| (v - trace) * (v - trace)).sum::<f64>() / (n - 1) as f64;
    Ok(VarianceReport { trace_variance: trace, stderr: (var_z / n as f64).sqrt(), per_coordinate, samples: n })
}

/// Frozen parameters plus everything the loop mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub cv: CvNetwork,
    pub f_evals: u64,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut init = stream(config.seed, Stream::Init);
        let cv = CvNetwork::new(&mut init);
        let model = match config.task {
            TaskKind::Quadratic => {
                let task = QuadraticTask::random(config.dim, &mut init)?;
                let logits = Logits::zeros(config.dim)?;
                let adam = AdamState::new(config.dim);
                Model::Quadratic { task, logits, adam }
            }
            TaskKind::ToyVae => {
                let data = synthetic_patterns(config.seed, VAE_DATA_POINTS);
                Model::ToyVae(Box::new(ToyVae::new(data, config.dim, &mut init)?))
            }
        };
        Ok(TrainState { step: 0, model, cv, f_evals: 0 })
    }

    /// Exact `E[f]` for the quadratic task, exact training-set ELBO for the VAE.
    pub fn exact_objective(&self) -> Result<f64> {
        match &self.model {
            Model::Quadratic { task, logits, .. } => Ok(task.closed_form(logits)?.0),
            Model::ToyVae(vae) => vae.exact_elbo(),
        }
    }

    /// One gradient estimate at the current parameters using `cv`: the
    /// `η`-gradient for the quadratic task, the encoder-parameter gradient
    /// over `points` for the VAE.
    pub fn probe_estimate<R: Rng + ?Sized>(
        &self,
        estimator: &dyn GradientEstimator,
        cv: &CvNetwork,
        k: usize,
        points: &[usize],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match &self.model {
            Model::Quadratic { task, logits, .. } => {
                let batch = sample_batch(task, logits, k, rng)?;
                Ok(estimator.estimate(&batch, logits, Some(cv))?.grad)
            }
            Model::ToyVae(vae) => {
                let mut grad = vec![0.0; vae.encoder.num_params()];
                for &b in points {
                    let y = &vae.data[b];
                    let eta = vae.encode(y)?;
                    let batch = sample_batch(&VaePoint { vae, y, eta: &eta }, &eta, k, rng)?;
                    let est = estimator.estimate(&batch, &eta, Some(cv))?;
                    vae.encoder.vjp_accumulate(y, &est.grad, &mut grad)?;
                }
                let scale = 1.0 / points.len() as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                Ok(grad)
            }
        }
    }

    pub fn variance_probe<R: Rng + ?Sized>(
        &self,
        estimator: &dyn GradientEstimator,
        k: usize,
        batch_size: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<VarianceReport> {
        if n < 2 {
            return invalid(format!("variance probe needs N >= 2 (got {n})"));
        }
        let points: Vec<usize> = match &self.model {
            Model::Quadratic { .. } => Vec::new(),
            Model::ToyVae(vae) => (0..batch_size.min(vae.data.len())).collect(),
        };
        // A private copy keeps probe forwards out of the training counter.
        let cv = self.cv.clone();
        let estimates =
            (0..n).map(|_| self.probe_estimate(estimator, &cv, k, &points, rng)).collect::<Result<Vec<_>>>()?;
        trace_variance(&estimates)
    }

    pub fn logits(&self) -> Option<&Logits> {
        match &self.model {
            Model::Quadratic { logits, .. } => Some(logits),
            Model::ToyVae(_) => None,
        }
    }
}

/// Runs the training loop for one configuration.
pub struct Trainer {
    config: RunConfig,
    estimator: Box<dyn GradientEstimator>,
    state: TrainState,
    sampling: StreamRng,
    probe: StreamRng,
    trace: Vec<TraceRecord>,
    last_samples: Vec<BinaryVector>,
    started: Instant,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    pub state: TrainState,
    /// Set when a numerical failure stopped the run early.
    pub aborted: Option<Error>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let estimator = build_estimator(&config.estimator_spec())?;
        Ok(Trainer {
            state: TrainState::new(config)?,
            estimator,
            sampling: stream(config.seed, Stream::Sampling),
            probe: stream(config.seed, Stream::Probe),
            trace: Vec::new(),
            last_samples: Vec::new(),
            started: Instant::now(),
            config: config.clone(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn estimator(&self) -> &dyn GradientEstimator {
        self.estimator.as_ref()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Latent samples drawn in the most recent step (first data point for
    /// the VAE).
    pub fn last_samples(&self) -> &[BinaryVector] {
        &self.last_samples
    }

    fn adapt_cv(&self) -> bool {
        self.estimator.uses_control_variates() && self.config.lr_gamma > 0.0
    }

    pub fn step(&mut self) -> Result<&TraceRecord> {
        let k = self.config.k;
        let adapt = self.adapt_cv();
        let objective = match &mut self.state.model {
            Model::Quadratic { task, logits, adam } => {
                let batch = sample_batch(task, logits, k, &mut self.sampling)?;
                self.state.f_evals += k as u64;
                self.last_samples = batch.samples().to_vec();
                let est = self.estimator.estimate(&batch, logits, Some(&self.state.cv))?;
                let mut eta = logits.as_slice().to_vec();
                let ascent: Vec<f64> = est.grad.iter().map(|g| -g).collect();
                adam.step(&mut eta, &ascent, self.config.lr_eta())?;
                *logits = Logits::new(eta)?;
                if adapt {
                    let g = cv_variance_grad(&est, &self.state.cv)?;
                    self.state.cv.adam_step(&g, self.config.lr_gamma)?;
                }
                task.closed_form(logits)?.0
            }
            Model::ToyVae(vae) => {
                let b = self.config.batch_size;
                let points: Vec<usize> = (0..b).map(|_| self.sampling.gen_range(0..vae.data.len())).collect();
                let mut enc_grad = vec![0.0; vae.encoder.num_params()];
                let mut dec_grad = vec![0.0; vae.decoder.num_params()];
                let mut cv_grad = ParamVector::zeros(self.state.cv.num_params());
                let mut elbo = 0.0;
                for (n, &p) in points.iter().enumerate() {
                    let y = &vae.data[p];
                    let eta = vae.encode(y)?;
                    let samples = eta.sample(&mut self.sampling, k)?;
                    let mut f = Vec::with_capacity(k);
                    let mut fg = Vec::with_capacity(k);
                    for x in &samples {
                        let (v, g) = vae.elbo_term(y, &eta, x, Some(&mut dec_grad))?;
                        if !v.is_finite() || g.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Numerical(format!("ELBO term non-finite at step {}", self.state.step)));
                        }
                        elbo += v;
                        f.push(v);
                        fg.push(g);
                    }
                    self.state.f_evals += k as u64;
                    if n == 0 {
                        self.last_samples = samples.clone();
                    }
                    let batch = SampleBatch::new(samples, f, fg)?;
                    let est = self.estimator.estimate(&batch, &eta, Some(&self.state.cv))?;
                    vae.encoder.vjp_accumulate(y, &est.grad, &mut enc_grad)?;
                    if adapt {
                        let g = cv_variance_grad(&est, &self.state.cv)?;
                        for (a, v) in cv_grad.iter_mut().zip(g.iter()) {
                            *a += v;
                        }
                    }
                }
                let lr = self.config.lr_eta();
                let enc_ascent: Vec<f64> = enc_grad.iter().map(|g| -g / b as f64).collect();
                let dec_ascent: Vec<f64> = dec_grad.iter().map(|g| -g / (b * k) as f64).collect();
                let mut enc = vae.encoder.params().clone();
                vae.adam_encoder.step(&mut enc, &enc_ascent, lr)?;
                vae.encoder.set_params(enc)?;
                let mut dec = vae.decoder.params().clone();
                vae.adam_decoder.step(&mut dec, &dec_ascent, lr)?;
                vae.decoder.set_params(dec)?;
                if adapt {
                    cv_grad.iter_mut().for_each(|g| *g /= b as f64);
                    self.state.cv.adam_step(&cv_grad, self.config.lr_gamma)?;
                }
                elbo / (b * k) as f64
            }
        };
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("objective became non-finite at step {}", self.state.step)));
        }
        self.state.step += 1;

        let every = self.config.variance_probe_every;
        let (var, stderr) = if every > 0 && self.state.step.is_multiple_of(every) {
            let report = self.state.variance_probe(
                self.estimator.as_ref(),
                k,
                self.config.batch_size,
                self.config.variance_probe_samples,
                &mut self.probe,
            )?;
            (Some(report.trace_variance), Some(report.stderr))
        } else {
            (None, None)
        };
        let wall = if self.config.wall_clock { self.started.elapsed().as_secs_f64() } else { 0.0 };
        self.trace.push(TraceRecord {
            step: self.state.step,
            objective,
            grad_trace_variance: var,
            variance_stderr: stderr,
            f_eval_count: self.state.f_evals,
            net_eval_count: self.state.cv.forward_count(),
            wall_seconds: wall,
        });
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Runs the remaining steps; a numerical failure ends the run and is
    /// returned alongside the trace recorded so far.
    pub fn run(mut self) -> TrainOutcome {
        while self.state.step < self.config.steps {
            if let Err(e) = self.step() {
                return TrainOutcome { trace: self.trace, state: self.state, aborted: Some(e) };
            }
        }
        TrainOutcome { trace: self.trace, state: self.state, aborted: None }
    }
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    Ok(Trainer::new(config)?.run())
}
