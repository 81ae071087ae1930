//! Score-function gradient estimators for `∇_η E_{q_η}[f(x)]`.
//!
//! All estimators implement [`GradientEstimator`] and are built by name from
//! an [`EstimatorSpec`] through [`build_estimator`]:
//!
//! | name              | estimate                                                          |
//! |-------------------|-------------------------------------------------------------------|
//! | `reinforce`       | `1/K Σ_k (f_k − b) s_k`                                           |
//! | `rloo`            | `1/K Σ_k (f_k − 1/(K−1) Σ_{j≠k} f_j) s_k`                         |
//! | `reinforce_stein` | `1/K Σ_k [f_k s_k + (A h̃_k)(x_k)]`, `h̃_k = h_k·s`                 |
//! | `rodeo`           | `1/K Σ_k [(f_k − 1/(K−1) Σ_{j≠k} (f_j + (Ah_j)(x_j))) s_k + (A h̃′_k)(x_k)]` |
//!
//! where `s_k = ∇_η log q_η(x_k)`. The Stein estimators are affine in the
//! network outputs; [`GradEstimate`] keeps that decomposition so the
//! variance gradient with respect to the network parameters is exact
//! ([`cv_variance_grad`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{Logits, SampleBatch};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::nn::ParamVector;
use crate::stein::{build_operator, OperatorSpec, OperatorTag, SteinOperator};
use crate::surrogates::{CvNetwork, EvalRecord, EvalRecorder, SurrogateContext, SurrogateMode};

/// Coefficients of one recorded network evaluation in the estimate:
/// `grad = affine_base + Σ_e coef[0]·H(u_e) + coef[1]·H′(u_e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTerm {
    pub record: EvalRecord,
    pub coef: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub f_values: Vec<f64>,
    /// `|(A h_k)(x_k)|` per sample (scalar control variate).
    pub scalar_cv: Vec<f64>,
    /// `‖(A h̃_k)(x_k)‖` per sample (vector control variate).
    pub vector_cv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub grad: Vec<f64>,
    pub affine_base: Vec<f64>,
    pub affine_terms: Vec<AffineTerm>,
    pub diagnostics: Diagnostics,
}

impl GradEstimate {
    fn plain(grad: Vec<f64>, f_values: &[f64]) -> Self {
        GradEstimate {
            affine_base: grad.clone(),
            grad,
            affine_terms: Vec::new(),
            diagnostics: Diagnostics { f_values: f_values.to_vec(), ..Default::default() },
        }
    }

    /// `affine_base + Σ_e c_e·out_e`, using the cached outputs.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut g = self.affine_base.clone();
        for t in &self.affine_terms {
            for ch in 0..2 {
                for (gi, c) in g.iter_mut().zip(&t.coef[ch]) {
                    *gi += c * t.record.output[ch];
                }
            }
        }
        g
    }

    pub fn squared_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum()
    }
}

pub trait GradientEstimator: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Smallest batch size the estimator accepts.
    fn min_samples(&self) -> usize {
        1
    }

    /// True when the estimate depends on a control-variate network.
    fn uses_control_variates(&self) -> bool {
        false
    }

    fn estimate(&self, batch: &SampleBatch, logits: &Logits, cv: Option<&CvNetwork>) -> Result<GradEstimate>;
}

fn check_batch(batch: &SampleBatch, logits: &Logits, min: usize, name: &str) -> Result<()> {
    ensure_len("batch dimension", batch.dim(), logits.dim())?;
    if batch.len() < min {
        return invalid(format!("{name} needs K >= {min} samples (got K = {})", batch.len()));
    }
    Ok(())
}

fn scores(batch: &SampleBatch, logits: &Logits) -> Vec<Vec<f64>> {
    batch.samples().iter().map(|x| logits.score_unchecked(x)).collect()
}

/// `1/K Σ_k (f_k − b_k) s_k (+ extra_k)` with leave-one-out baselines
/// `b_k = 1/(K−1) Σ_{j≠k} (f_j + c_j)`. Shared by RLOO and RODEO so that
/// vanishing corrections reproduce RLOO exactly.
fn leave_one_out_sum(
    f: &[f64],
    corrections: Option<&[f64]>,
    scores: &[Vec<f64>],
    extra: Option<&[Vec<f64>]>,
) -> Vec<f64> {
    let k = f.len();
    let d = scores[0].len();
    let mut g = vec![0.0; d];
    for kk in 0..k {
        let mut total = 0.0;
        for j in (0..k).filter(|&j| j != kk) {
            total += match corrections {
                Some(c) => f[j] + c[j],
                None => f[j],
            };
        }
        let centered = f[kk] - total / (k - 1) as f64;
        for i in 0..d {
            let mut term = centered * scores[kk][i];
            if let Some(v) = extra {
                term += v[kk][i];
            }
            g[i] += term;
        }
    }
    g.iter_mut().for_each(|v| *v /= k as f64);
    g
}

/// REINFORCE with a constant baseline.
#[derive(Debug, Clone, Default)]
pub struct Reinforce {
    pub baseline: f64,
}

impl GradientEstimator for Reinforce {
    fn name(&self) -> &'static str {
        "reinforce"
    }

    fn estimate(&self, batch: &SampleBatch, logits: &Logits, _cv: Option<&CvNetwork>) -> Result<GradEstimate> {
        check_batch(batch, logits, 1, self.name())?;
        let s = scores(batch, logits);
        let k = batch.len() as f64;
        let mut g = vec![0.0; logits.dim()];
        for (fk, sk) in batch.f_values().iter().zip(&s) {
            for (gi, si) in g.iter_mut().zip(sk) {
                *gi += (fk - self.baseline) * si;
            }
        }
        g.iter_mut().for_each(|v| *v /= k);
        Ok(GradEstimate::plain(g, batch.f_values()))
    }
}

/// REINFORCE leave-one-out.
#[derive(Debug, Clone, Default)]
pub struct Rloo;

impl GradientEstimator for Rloo {
    fn name(&self) -> &'static str {
        "rloo"
    }

    fn min_samples(&self) -> usize {
        2
    }

    fn estimate(&self, batch: &SampleBatch, logits: &Logits, _cv: Option<&CvNetwork>) -> Result<GradEstimate> {
        check_batch(batch, logits, 2, self.name())?;
        let g = leave_one_out_sum(batch.f_values(), None, &scores(batch, logits), None);
        Ok(GradEstimate::plain(g, batch.f_values()))
    }
}

/// Per-sample Stein terms shared by the two control-variate estimators.
struct SteinPass {
    /// `(A h_k)(x_k)`.
    scalar: Vec<f64>,
    /// `(A h̃′_k)(x_k)` with `h̃′_k = h′_k·s` (or `h_k` when `vector_channel = 0`).
    vector: Vec<Vec<f64>>,
    records: Vec<EvalRecord>,
    /// Operator weight of each record's slot, and the score at the slot state.
    slot_weight: Vec<f64>,
    slot_score: Vec<Vec<f64>>,
}

fn stein_pass(
    op: &dyn SteinOperator,
    mode: SurrogateMode,
    batch: &SampleBatch,
    logits: &Logits,
    cv: &CvNetwork,
    vector_channel: usize,
) -> Result<SteinPass> {
    let ctx = SurrogateContext::build(batch, mode)?;
    let k = batch.len();
    let d = logits.dim();
    let mut recorder = EvalRecorder::new();
    let mut slot_weight = Vec::new();
    let mut slot_score = Vec::new();
    let mut scalar = Vec::with_capacity(k);
    let mut vector = Vec::with_capacity(k);
    for kk in 0..k {
        let x = &batch.samples()[kk];
        let row = op.binary_weights(logits, x)?;
        let sx = logits.score_unchecked(x);

        let before = recorder.len();
        let at_x = ctx.evaluate(cv, kk, x, Some(&[]), 0, Some(&mut recorder))?;
        let pick = |v: &crate::surrogates::SurrogateValue| if vector_channel == 0 { v.h } else { v.h_prime };
        for _ in before..recorder.len() {
            slot_weight.push(row.self_weight);
            slot_score.push(sx.clone());
        }

        let mut hs = Vec::with_capacity(row.len());
        let mut vs = Vec::with_capacity(row.len());
        let mut ss = Vec::with_capacity(row.len());
        for (n, (m, &w)) in row.neighbors.iter().zip(&row.weights).enumerate() {
            let before = recorder.len();
            let val = ctx.evaluate(cv, kk, &m.state, Some(&m.changed), n + 1, Some(&mut recorder))?;
            let sy = logits.score_unchecked(&m.state);
            for _ in before..recorder.len() {
                slot_weight.push(w);
                slot_score.push(sy.clone());
            }
            hs.push(val.h);
            vs.push(pick(&val));
            ss.push(sy);
        }

        let mut it = hs.iter();
        scalar.push(row.apply(at_x.h, |_| *it.next().expect("one value per neighbor")));
        let hx = pick(&at_x);
        let v = (0..d)
            .map(|i| {
                let mut it = vs.iter().zip(&ss);
                row.apply(hx * sx[i], |_| {
                    let (h, s) = it.next().expect("one value per neighbor");
                    h * s[i]
                })
            })
            .collect();
        vector.push(v);
    }
    Ok(SteinPass { scalar, vector, records: recorder.into_records(), slot_weight, slot_score })
}

fn require_cv<'a>(cv: Option<&'a CvNetwork>, name: &str) -> Result<&'a CvNetwork> {
    cv.ok_or_else(|| Error::InvalidArgument(format!("{name} needs a control-variate network")))
}

/// REINFORCE plus the vector control variate `(A h̃_k)(x_k)`, `h̃_k = h_k·s`.
#[derive(Debug)]
pub struct ReinforceStein {
    pub operator: Box<dyn SteinOperator>,
    pub mode: SurrogateMode,
}

impl GradientEstimator for ReinforceStein {
    fn name(&self) -> &'static str {
        "reinforce_stein"
    }

    fn min_samples(&self) -> usize {
        2
    }

    fn uses_control_variates(&self) -> bool {
        true
    }

    fn estimate(&self, batch: &SampleBatch, logits: &Logits, cv: Option<&CvNetwork>) -> Result<GradEstimate> {
        check_batch(batch, logits, 2, self.name())?;
        let cv = require_cv(cv, self.name())?;
        let pass = stein_pass(self.operator.as_ref(), self.mode, batch, logits, cv, 0)?;
        let s = scores(batch, logits);
        let k = batch.len() as f64;
        let d = logits.dim();
        let mut base = vec![0.0; d];
        let mut g = vec![0.0; d];
        for (kk, (fk, sk)) in batch.f_values().iter().zip(&s).enumerate() {
            for i in 0..d {
                base[i] += fk * sk[i];
                g[i] += fk * sk[i] + pass.vector[kk][i];
            }
        }
        base.iter_mut().for_each(|v| *v /= k);
        g.iter_mut().for_each(|v| *v /= k);

        let affine_terms = pass
            .records
            .iter()
            .enumerate()
            .map(|(e, r)| {
                let c = r.weight * pass.slot_weight[e] / k;
                AffineTerm { record: *r, coef: [pass.slot_score[e].iter().map(|s| c * s).collect(), vec![0.0; d]] }
            })
            .collect();
        Ok(GradEstimate {
            grad: g,
            affine_base: base,
            affine_terms,
            diagnostics: Diagnostics {
                f_values: batch.f_values().to_vec(),
                scalar_cv: pass.scalar.iter().map(|v| v.abs()).collect(),
                vector_cv: pass.vector.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
            },
        })
    }
}

/// RLOO with a scalar Stein control variate on the baseline and a vector
/// Stein control variate on the whole estimate.
#[derive(Debug)]
pub struct Rodeo {
    pub operator: Box<dyn SteinOperator>,
    pub mode: SurrogateMode,
}

impl GradientEstimator for Rodeo {
    fn name(&self) -> &'static str {
        "rodeo"
    }

    fn min_samples(&self) -> usize {
        2
    }

    fn uses_control_variates(&self) -> bool {
        true
    }

    fn estimate(&self, batch: &SampleBatch, logits: &Logits, cv: Option<&CvNetwork>) -> Result<GradEstimate> {
        check_batch(batch, logits, 2, self.name())?;
        let cv = require_cv(cv, self.name())?;
        let pass = stein_pass(self.operator.as_ref(), self.mode, batch, logits, cv, 1)?;
        let s = scores(batch, logits);
        let f = batch.f_values();
        let k = batch.len();
        let d = logits.dim();
        let kf = k as f64;

        let affine_base = leave_one_out_sum(f, None, &s, None);
        let grad = leave_one_out_sum(f, Some(&pass.scalar), &s, Some(&pass.vector));

        // The scalar CV of sample j enters every other sample's baseline.
        let total_score: Vec<f64> = (0..d).map(|i| s.iter().map(|sk| sk[i]).sum()).collect();
        let scalar_scale = -1.0 / (kf * (k - 1) as f64);
        let affine_terms = pass
            .records
            .iter()
            .enumerate()
            .map(|(e, r)| {
                let j = r.sample;
                let w = r.weight * pass.slot_weight[e];
                let c_h = (0..d).map(|i| scalar_scale * w * (total_score[i] - s[j][i])).collect();
                let c_hp = pass.slot_score[e].iter().map(|si| w * si / kf).collect();
                AffineTerm { record: *r, coef: [c_h, c_hp] }
            })
            .collect();
        Ok(GradEstimate {
            grad,
            affine_base,
            affine_terms,
            diagnostics: Diagnostics {
                f_values: f.to_vec(),
                scalar_cv: pass.scalar.iter().map(|v| v.abs()).collect(),
                vector_cv: pass.vector.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
            },
        })
    }
}

/// `∇_γ ‖g‖² = 2 Σ_e (gᵀc_e)·∂out_e/∂γ`, an unbiased single-batch estimate
/// of the gradient of the estimator's trace variance.
pub fn cv_variance_grad(est: &GradEstimate, cv: &CvNetwork) -> Result<ParamVector> {
    if est.affine_terms.is_empty() {
        return invalid("estimate has no recorded control-variate terms");
    }
    let mut grad = ParamVector::zeros(cv.num_params());
    for t in &est.affine_terms {
        let cot = [
            2.0 * est.grad.iter().zip(&t.coef[0]).map(|(a, b)| a * b).sum::<f64>(),
            2.0 * est.grad.iter().zip(&t.coef[1]).map(|(a, b)| a * b).sum::<f64>(),
        ];
        if cot == [0.0, 0.0] {
            continue;
        }
        cv.accumulate_param_grad(t.record.input, cot, &mut grad)?;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Reinforce,
    Rloo,
    ReinforceStein,
    Rodeo,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [EstimatorKind::Reinforce, EstimatorKind::Rloo, EstimatorKind::ReinforceStein, EstimatorKind::Rodeo];

    pub fn name(self) -> &'static str {
        REGISTRY.iter().find(|e| e.kind == self).expect("every kind is registered").name
    }

    pub fn min_samples(self) -> usize {
        match self {
            EstimatorKind::Reinforce => 1,
            _ => 2,
        }
    }

    pub fn uses_control_variates(self) -> bool {
        matches!(self, EstimatorKind::ReinforceStein | EstimatorKind::Rodeo)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        REGISTRY.iter().find(|e| e.name == s).map(|e| e.kind).ok_or_else(|| {
            let names: Vec<_> = REGISTRY.iter().map(|e| e.name).collect();
            Error::InvalidArgument(format!("unknown estimator '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub baseline: f64,
    pub operator: OperatorSpec,
    #[serde(default)]
    pub mode: SurrogateMode,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec {
            kind,
            baseline: 0.0,
            operator: OperatorSpec::new(OperatorTag::Gibbs),
            mode: SurrogateMode::LeaveOneOut,
        }
    }

    pub fn with_operator(mut self, operator: OperatorSpec) -> Self {
        self.operator = operator;
        self
    }

    pub fn with_mode(mut self, mode: SurrogateMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_baseline(mut self, baseline: f64) -> Self {
        self.baseline = baseline;
        self
    }
}

type Constructor = fn(&EstimatorSpec) -> Result<Box<dyn GradientEstimator>>;

pub struct RegistryEntry {
    pub name: &'static str,
    pub kind: EstimatorKind,
    build: Constructor,
}

pub static REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        name: "reinforce",
        kind: EstimatorKind::Reinforce,
        build: |s| Ok(Box::new(Reinforce { baseline: s.baseline })),
    },
    RegistryEntry { name: "rloo", kind: EstimatorKind::Rloo, build: |_| Ok(Box::new(Rloo)) },
    RegistryEntry {
        name: "reinforce_stein",
        kind: EstimatorKind::ReinforceStein,
        build: |s| Ok(Box::new(ReinforceStein { operator: build_operator(&s.operator)?, mode: s.mode })),
    },
    RegistryEntry {
        name: "rodeo",
        kind: EstimatorKind::Rodeo,
        build: |s| Ok(Box::new(Rodeo { operator: build_operator(&s.operator)?, mode: s.mode })),
    },
];

pub fn build_estimator(spec: &EstimatorSpec) -> Result<Box<dyn GradientEstimator>> {
    if !spec.baseline.is_finite() {
        return invalid("baseline must be finite");
    }
    let entry = REGISTRY.iter().find(|e| e.kind == spec.kind).expect("every kind is registered");
    (entry.build)(spec)
}
