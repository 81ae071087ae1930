//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every tolerance is pinned below.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use steingrad::estimators::{build_estimator, EstimatorKind, EstimatorSpec};
use steingrad::oracle::{
    baseline_invariance, cv_grad_finite_difference, operator_mean_zero, stabilization_witness, unbiasedness_grid,
    vjp_finite_difference, EnumerationBudget,
};
use steingrad::rng::{stream, Stream};
use steingrad::runner::RunConfig;
use steingrad::stein::{OperatorSpec, OperatorTag};
use steingrad::surrogates::SurrogateMode;
use steingrad::tasks::{Model, TaskKind, Trainer};
use steingrad::Result;

const OPERATOR_TOL: f64 = 1e-10;
const OPERATOR_LIMIT: Duration = Duration::from_secs(10);
const UNBIASED_TOL: f64 = 1e-10;
const UNBIASED_LIMIT: Duration = Duration::from_secs(60);
const BASELINE_TOL: f64 = 1e-12;
const IDENTITY_STEPS: u64 = 100;
const VJP_TOL: f64 = 1e-5;
const CV_GRAD_TOL: f64 = 1e-4;
const FD_INSTANCES: u64 = 10;
const VARIANCE_SEEDS: u64 = 5;
const VARIANCE_STEPS: u64 = 2000;
const VARIANCE_PROBES: usize = 10_000;
const VARIANCE_RATIO: f64 = 0.9;
const VARIANCE_SIGMAS: f64 = 3.0;
const VARIANCE_LIMIT: Duration = Duration::from_secs(600);
const VAE_SEEDS: u64 = 5;
const VAE_STEPS: u64 = 20_000;
const VAE_LATENT: usize = 8;
const STABILIZATION_EPS: f64 = 1e-3;

type Criterion = (&'static str, fn() -> Result<Verdict>);

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed <= limit, format!("{:.1} s (limit {} s)", elapsed.as_secs_f64(), limit.as_secs()))
}

fn operator_mean_zero_all() -> Result<Verdict> {
    let start = Instant::now();
    let budget = EnumerationBudget::default();
    let mut stationarity = 0.0f64;
    let mut mean = 0.0f64;
    for tag in OperatorTag::ALL {
        let [bq, bm, iq, im] = operator_mean_zero(tag, &budget)?;
        stationarity = stationarity.max(bq).max(iq);
        mean = mean.max(bm).max(im);
    }
    let (fast, time) = within(start.elapsed(), OPERATOR_LIMIT);
    verdict(
        stationarity <= OPERATOR_TOL && mean <= OPERATOR_TOL && fast,
        format!("max|A^T q| {stationarity:.2e}, max|E_q[Ah]| {mean:.2e} (tol {OPERATOR_TOL:.0e}), {time}"),
    )
}

fn proposition_one() -> Result<Verdict> {
    let start = Instant::now();
    let budget = EnumerationBudget::default();
    let mut worst = 0.0f64;
    for tag in OperatorTag::ALL {
        let spec = EstimatorSpec::new(EstimatorKind::Rodeo).with_operator(OperatorSpec::new(tag));
        worst = worst.max(unbiasedness_grid(&spec, &budget)?);
    }
    let (fast, time) = within(start.elapsed(), UNBIASED_LIMIT);
    verdict(
        worst <= UNBIASED_TOL && fast,
        format!("max|E[g_rodeo] - grad| {worst:.2e} over d in {{2,3}}, K in {{2,3}}, 4 operators, 5 draws (tol {UNBIASED_TOL:.0e}), {time}"),
    )
}

fn baseline_invariant() -> Result<Verdict> {
    let worst = baseline_invariance(&EnumerationBudget::default())?;
    verdict(
        worst <= BASELINE_TOL,
        format!("max pairwise difference {worst:.2e} across b in {{0, 1, -3.7}} (tol {BASELINE_TOL:.0e})"),
    )
}

fn frozen_rodeo_is_rloo() -> Result<Verdict> {
    let base = RunConfig { steps: IDENTITY_STEPS, k: 2, dim: 10, seed: 0, ..RunConfig::default() };
    let rloo = Trainer::new(&RunConfig { estimator: EstimatorKind::Rloo, ..base.clone() })?.run();
    let rodeo = Trainer::new(&RunConfig { estimator: EstimatorKind::Rodeo, lr_gamma: 0.0, ..base })?.run();
    let same_trace = rloo.trace.len() == rodeo.trace.len()
        && rloo.trace.iter().zip(&rodeo.trace).all(|(a, b)| a.objective.to_bits() == b.objective.to_bits());
    let bits = |o: &steingrad::tasks::TrainOutcome| -> Vec<u64> {
        o.state.logits().map(|l| l.as_slice().iter().map(|v| v.to_bits()).collect()).unwrap_or_default()
    };
    let same_eta = bits(&rloo) == bits(&rodeo);
    verdict(
        same_trace && same_eta && rloo.aborted.is_none() && rodeo.aborted.is_none(),
        format!("{IDENTITY_STEPS} steps, objective trace bitwise equal: {same_trace}, final logits bitwise equal: {same_eta}"),
    )
}

fn gradient_checks() -> Result<Verdict> {
    let vjp = vjp_finite_difference(FD_INSTANCES)?;
    let cv = cv_grad_finite_difference(FD_INSTANCES)?;
    verdict(
        vjp <= VJP_TOL && cv <= CV_GRAD_TOL,
        format!(
            "vjp rel err {vjp:.2e} (tol {VJP_TOL:.0e}), cv_variance_grad rel err {cv:.2e} (tol {CV_GRAD_TOL:.0e}), {FD_INSTANCES} instances each"
        ),
    )
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Each estimator is trained on its own trajectory and probed at its own
/// final state. The probe standard errors of the per-seed trace variances
/// give the combined standard error of the difference in means.
fn variance_reduction() -> Result<Verdict> {
    let start = Instant::now();
    let mut means = [0.0f64; 2];
    let mut se2 = [0.0f64; 2];
    let mut per_seed = [Vec::new(), Vec::new()];
    for seed in 0..VARIANCE_SEEDS {
        for (slot, kind) in [EstimatorKind::Rloo, EstimatorKind::Rodeo].into_iter().enumerate() {
            let cfg = RunConfig { estimator: kind, k: 2, dim: 10, steps: VARIANCE_STEPS, seed, ..RunConfig::default() };
            let outcome = Trainer::new(&cfg)?.run();
            if let Some(e) = outcome.aborted {
                return Err(e);
            }
            let est = build_estimator(&cfg.estimator_spec())?;
            let mut rng = stream(seed, Stream::Custom(1));
            let r = outcome.state.variance_probe(est.as_ref(), cfg.k, cfg.batch_size, VARIANCE_PROBES, &mut rng)?;
            means[slot] += r.trace_variance / VARIANCE_SEEDS as f64;
            se2[slot] += (r.stderr / VARIANCE_SEEDS as f64).powi(2);
            per_seed[slot].push(r.trace_variance);
        }
    }
    let combined = (se2[0] + se2[1]).sqrt();
    let gap = means[0] - means[1];
    let diffs: Vec<f64> = per_seed[0].iter().zip(&per_seed[1]).map(|(a, b)| a - b).collect();
    let (_, paired_se) = mean_se(&diffs);
    let (fast, time) = within(start.elapsed(), VARIANCE_LIMIT);
    verdict(
        means[1] <= VARIANCE_RATIO * means[0] && gap > VARIANCE_SIGMAS * combined && fast,
        format!(
            "rloo {:.4e}, rodeo {:.4e}, ratio {:.3} (need <= {VARIANCE_RATIO}), gap {:.1} combined SE (need > {VARIANCE_SIGMAS}); seed-paired gap {:.1} SE; {time}",
            means[0],
            means[1],
            means[1] / means[0],
            gap / combined,
            gap / paired_se
        ),
    )
}

fn evaluation_accounting() -> Result<Verdict> {
    let d = 10usize;
    let mut f_ok = true;
    for kind in [EstimatorKind::Reinforce, EstimatorKind::Rloo, EstimatorKind::Rodeo] {
        for k in [2usize, 3] {
            let out = Trainer::new(&RunConfig { estimator: kind, k, dim: d, steps: 20, ..RunConfig::default() })?.run();
            let mut prev = 0;
            for r in &out.trace {
                f_ok &= r.f_eval_count - prev == k as u64;
                prev = r.f_eval_count;
            }
        }
    }
    let mut net_ok = true;
    let mut notes = Vec::new();
    for k in [2usize, 3, 4] {
        let mut per_step = [0u64; 2];
        for (slot, mode) in [SurrogateMode::LeaveOneOut, SurrogateMode::Pooled].into_iter().enumerate() {
            let cfg = RunConfig {
                estimator: EstimatorKind::Rodeo,
                surrogate_mode: mode,
                k,
                dim: d,
                steps: 5,
                ..RunConfig::default()
            };
            let out = Trainer::new(&cfg)?.run();
            let mut prev = 0;
            for r in &out.trace {
                let delta = r.net_eval_count - prev;
                prev = r.net_eval_count;
                net_ok &= per_step[slot] == 0 || per_step[slot] == delta;
                per_step[slot] = delta;
            }
        }
        let expected_loo = (k * (k - 1) * (d + 1)) as u64;
        let expected_pooled = (k * (d + 1)) as u64;
        net_ok &= per_step == [expected_loo, expected_pooled] && per_step[0] == (k as u64 - 1) * per_step[1];
        notes.push(format!("K={k}: {}/{}", per_step[0], per_step[1]));
    }
    verdict(
        f_ok && net_ok,
        format!(
            "f evaluations per step == K for reinforce/rloo/rodeo: {f_ok}; network forwards per step leave-one-out/pooled at d={d}: {}",
            notes.join(", ")
        ),
    )
}

/// Final ELBO is the exact training-set ELBO of the final parameters,
/// enumerating all 2^8 latent states per data point.
fn toy_vae_sanity() -> Result<Verdict> {
    let mut finals = [Vec::new(), Vec::new()];
    let mut finite = true;
    for seed in 0..VAE_SEEDS {
        for (slot, kind) in [EstimatorKind::Rloo, EstimatorKind::Rodeo].into_iter().enumerate() {
            let cfg = RunConfig {
                task: TaskKind::ToyVae,
                estimator: kind,
                dim: VAE_LATENT,
                steps: VAE_STEPS,
                seed,
                ..RunConfig::default()
            };
            let out = Trainer::new(&cfg)?.run();
            finite &= out.aborted.is_none()
                && out.trace.len() as u64 == VAE_STEPS
                && out.trace.iter().all(|r| r.objective.is_finite());
            let elbo = match &out.state.model {
                Model::ToyVae(vae) => vae.exact_elbo()?,
                Model::Quadratic { .. } => unreachable!("toy VAE config"),
            };
            finals[slot].push(elbo);
        }
    }
    let (rloo, rloo_se) = mean_se(&finals[0]);
    let (rodeo, rodeo_se) = mean_se(&finals[1]);
    let combined = (rloo_se * rloo_se + rodeo_se * rodeo_se).sqrt();
    verdict(
        finite && rodeo >= rloo - combined,
        format!(
            "final exact ELBO rloo {rloo:.4} ± {rloo_se:.4}, rodeo {rodeo:.4} ± {rodeo_se:.4} (need rodeo >= rloo - {combined:.4}); all traces finite: {finite}"
        ),
    )
}

fn stabilization_bias() -> Result<Verdict> {
    let budget = EnumerationBudget::default();
    let biased = stabilization_witness(OperatorTag::Mpf, STABILIZATION_EPS, 0, &budget)?;
    let exact = stabilization_witness(OperatorTag::Mpf, 0.0, 0, &budget)?;
    verdict(
        biased.stationarity_residual > 0.0
            && exact.stationarity_residual <= OPERATOR_TOL
            && exact.estimator_bias <= UNBIASED_TOL,
        format!(
            "mpf eps={STABILIZATION_EPS:.0e}: max|A^T q| {:.3e}, rodeo bias {:.3e}; eps=0: {:.1e} and {:.1e}",
            biased.stationarity_residual, biased.estimator_bias, exact.stationarity_residual, exact.estimator_bias
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("operator mean-zero", operator_mean_zero_all),
        ("enumerated rodeo mean equals exact gradient", proposition_one),
        ("reinforce baseline invariance", baseline_invariant),
        ("rodeo with frozen zero network equals rloo", frozen_rodeo_is_rloo),
        ("gradient checks", gradient_checks),
        ("variance reduction on the quadratic task", variance_reduction),
        ("evaluation accounting", evaluation_accounting),
        ("toy VAE sanity", toy_vae_sanity),
        ("stabilization bias witness", stabilization_bias),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (passed, detail) = match check() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!("criterion {} [{}] {name}: {detail}", i + 1, if passed { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
