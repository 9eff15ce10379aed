//! Oracles for the hand-derived gradients.
//!
//! Central finite differences check every analytic backward pass. For
//! REINFORCE the expected reward of a tiny model is computed exactly by
//! enumerating all `W^T` output sequences, which gives the true policy
//! gradient that single-sample estimates must average to.

use rayon::prelude::*;

use crate::corpus::{ExamplePair, BOS};
use crate::decoding::sequence_logp;
use crate::error::{Error, Result};
use crate::metrics::RewardMetric;
use crate::model::{backward, rollout, FeedMode, GradAccumulator, ModelParams};
use crate::numkern::{derive_seed, seeded_rng, Mat, TensorSet};
use crate::training::{example_grads, reinforce_grads, xent_grads, BaselineGrad, BaselineRegressor, EpochRegime};

pub const FD_EPSILON: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
/// Largest `W^T` that [`exact_policy_gradient`] will enumerate.
pub const ENUMERATION_LIMIT: u128 = 100_000;

/// Named gradient tensors, in the order of the source [`TensorSet`].
pub type NamedGrads = Vec<(&'static str, Mat)>;

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar of
/// `params`.
pub fn finite_diff<P, F>(params: &P, eps: f64, loss: F) -> Result<NamedGrads>
where
    P: TensorSet + Clone + Sync + Send,
    F: Fn(&P) -> Result<f64> + Sync,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let shapes: Vec<(&'static str, (usize, usize))> = params.tensors().iter().map(|(n, m)| (*n, m.shape())).collect();
    let coords: Vec<(usize, usize)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, (r, c)))| (0..r * c).map(move |k| (ti, k)))
        .collect();
    let values = coords
        .par_iter()
        .map_init(
            || params.clone(),
            |p, &(ti, k)| {
                let orig = p.tensors()[ti].1.data()[k];
                let mut eval = |v: f64| {
                    p.tensors_mut()[ti].1.data_mut()[k] = v;
                    let f = loss(p)?;
                    if !f.is_finite() {
                        return Err(Error::NonFinite("loss during finite differencing".into()));
                    }
                    Ok(f)
                };
                let plus = eval(orig + eps);
                let minus = eval(orig - eps);
                p.tensors_mut()[ti].1.data_mut()[k] = orig;
                Ok((plus? - minus?) / (2.0 * eps))
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Vec::with_capacity(shapes.len());
    let mut it = values.into_iter();
    for (name, (r, c)) in shapes {
        let data: Vec<f64> = it.by_ref().take(r * c).collect();
        out.push((name, Mat::from_vec(r, c, data)?));
    }
    Ok(out)
}

/// True when `analytic` and `numeric` agree to [`REL_TOLERANCE`] relative
/// error, or to [`ABS_FLOOR`] when both are tiny.
pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= (REL_TOLERANCE * scale).max(ABS_FLOOR)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: &'static str,
    /// Largest relative error among entries whose magnitude exceeds the
    /// absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Row-major index of the first entry outside tolerance.
    pub first_failure: Option<usize>,
}

impl TensorReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

pub fn compare<A: TensorSet + ?Sized>(analytic: &A, numeric: &NamedGrads) -> Result<Vec<TensorReport>> {
    let a = analytic.tensors();
    if a.len() != numeric.len() {
        return Err(Error::shape(
            "compare",
            format!("{} vs {} tensors", a.len(), numeric.len()),
        ));
    }
    a.iter()
        .zip(numeric)
        .map(|((name, am), (_, nm))| {
            if am.shape() != nm.shape() {
                return Err(Error::shape(
                    "compare",
                    format!("{name}: {:?} vs {:?}", am.shape(), nm.shape()),
                ));
            }
            let mut rep = TensorReport {
                name,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                first_failure: None,
            };
            for (i, (&x, &y)) in am.data().iter().zip(nm.data()).enumerate() {
                let abs = (x - y).abs();
                rep.max_abs_error = rep.max_abs_error.max(abs);
                if x.abs().max(y.abs()) > ABS_FLOOR {
                    rep.max_rel_error = rep.max_rel_error.max(relative_error(x, y));
                }
                if !within_tolerance(x, y) && rep.first_failure.is_none() {
                    rep.first_failure = Some(i);
                }
            }
            Ok(rep)
        })
        .collect()
}

/// Teacher-forced cross-entropy of `ex`.
pub fn xent_loss(params: &ModelParams, ex: &ExamplePair) -> Result<f64> {
    let plan = vec![FeedMode::GroundTruth; ex.steps()];
    let trace = rollout(params, ex, &plan, false, &mut seeded_rng(0))?;
    Ok(xent_grads(&trace, &ex.target[1..])?.1)
}

/// Analytic XENT gradients of `ex` against central differences.
pub fn check_xent(params: &ModelParams, ex: &ExamplePair) -> Result<Vec<TensorReport>> {
    let analytic = example_grads(
        params,
        ex,
        EpochRegime::Xent,
        ex.steps(),
        RewardMetric::Bleu,
        &mut seeded_rng(0),
    )?;
    let numeric = finite_diff(params, FD_EPSILON, |p| xent_loss(p, ex))?;
    compare(&analytic.grads, &numeric)
}

/// E2E loss with `mixed` trailing k-max inputs; the top-k selection is held
/// by the forward pass, so the loss is smooth away from probability ties.
pub fn e2e_loss(params: &ModelParams, ex: &ExamplePair, k: usize, mixed: usize) -> Result<f64> {
    let plan = crate::training::e2e_plan(ex.steps(), k, mixed);
    let trace = rollout(params, ex, &plan, false, &mut seeded_rng(0))?;
    Ok(xent_grads(&trace, &ex.target[1..])?.1)
}

pub fn check_e2e(params: &ModelParams, ex: &ExamplePair, k: usize, mixed: usize) -> Result<Vec<TensorReport>> {
    let analytic = example_grads(
        params,
        ex,
        EpochRegime::E2e { k, mixed },
        ex.steps(),
        RewardMetric::Bleu,
        &mut seeded_rng(0),
    )?;
    let numeric = finite_diff(params, FD_EPSILON, |p| e2e_loss(p, ex, k, mixed))?;
    compare(&analytic.grads, &numeric)
}

/// Every sequence in `{0..w}^t`, lexicographic.
pub fn enumerate_sequences(w: usize, t: usize) -> Result<Vec<Vec<usize>>> {
    let size = (w as u128).checked_pow(t as u32).unwrap_or(u128::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut cur = vec![0usize; t];
    loop {
        out.push(cur.clone());
        let mut i = t;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < w {
                break;
            }
            cur[i] = 0;
        }
    }
}

/// `E[r] = Σ_seq p(seq) r(seq)` over all length-`t` sequences, decoding
/// without early stopping.
pub fn expected_reward<R>(params: &ModelParams, source: &[usize], t: usize, reward: &R) -> Result<f64>
where
    R: Fn(&[usize]) -> f64 + ?Sized,
{
    let mut total = 0.0;
    for seq in enumerate_sequences(params.vocab(), t)? {
        total += sequence_logp(params, source, &seq)?.exp() * reward(&seq);
    }
    Ok(total)
}

/// `∇_θ E[r]` by central differences of the exactly enumerated expectation.
pub fn exact_policy_gradient<R>(params: &ModelParams, source: &[usize], t: usize, reward: &R) -> Result<NamedGrads>
where
    R: Fn(&[usize]) -> f64 + Sync + ?Sized,
{
    enumerate_sequences(params.vocab(), t)?;
    finite_diff(params, FD_EPSILON, |p| expected_reward(p, source, t, reward))
}

/// Where REINFORCE takes `r̄_t` from.
#[derive(Debug, Clone, Copy)]
pub enum BaselineSource<'a> {
    Zero,
    Constant(f64),
    Regressor(&'a BaselineRegressor),
}

impl BaselineSource<'_> {
    fn at(&self, h: &[f64]) -> f64 {
        match self {
            BaselineSource::Zero => 0.0,
            BaselineSource::Constant(c) => *c,
            BaselineSource::Regressor(r) => r.predict(h),
        }
    }
}

fn sampling_example(source: &[usize]) -> ExamplePair {
    ExamplePair {
        source: source.to_vec(),
        target: vec![BOS],
    }
}

/// One single-sample REINFORCE estimate of `∇_θ(−E[r])`: sample `t` words,
/// score them, backpropagate `(r − r̄_t)(p_t − 1(w_t))`.
pub fn reinforce_estimate<R>(
    params: &ModelParams,
    source: &[usize],
    t: usize,
    reward: &R,
    baseline: BaselineSource<'_>,
    seed: u64,
) -> Result<GradAccumulator>
where
    R: Fn(&[usize]) -> f64 + ?Sized,
{
    let ex = sampling_example(source);
    let trace = rollout(params, &ex, &vec![FeedMode::Sample; t], false, &mut seeded_rng(seed))?;
    let r = reward(&trace.chosen);
    let baselines: Vec<f64> = trace.steps.iter().map(|s| baseline.at(&s.h)).collect();
    let dl = reinforce_grads(&trace, r, &baselines, 0)?;
    let mut g = GradAccumulator::zeros_like(params);
    backward(params, &trace, &dl, &mut g)?;
    Ok(g)
}

/// `Σ_seq p(seq) · estimate(seq)`: the exact expectation of the estimator,
/// by enumeration instead of sampling.
pub fn enumerated_estimator_mean<R>(
    params: &ModelParams,
    source: &[usize],
    t: usize,
    reward: &R,
    baseline: BaselineSource<'_>,
) -> Result<GradAccumulator>
where
    R: Fn(&[usize]) -> f64 + ?Sized,
{
    let ex = ExamplePair {
        source: source.to_vec(),
        target: Vec::new(),
    };
    let mut total = GradAccumulator::zeros_like(params);
    for seq in enumerate_sequences(params.vocab(), t)? {
        let mut forced = ex.clone();
        forced.target = std::iter::once(BOS).chain(seq.iter().copied()).collect();
        let trace = rollout(
            params,
            &forced,
            &vec![FeedMode::GroundTruth; t],
            false,
            &mut seeded_rng(0),
        )?;
        let prob = trace.log_prob().exp();
        let r = reward(&seq);
        let baselines: Vec<f64> = trace.steps.iter().map(|s| baseline.at(&s.h)).collect();
        let dl = reinforce_grads(&trace, r, &baselines, 0)?;
        let mut g = GradAccumulator::zeros_like(params);
        backward(params, &trace, &dl, &mut g)?;
        g.scale(prob);
        total.add_assign(&g);
    }
    Ok(total)
}

/// Per-coordinate sample mean, variance and standard error of an estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl EstimatorStats {
    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }
}

fn flatten<T: TensorSet + ?Sized>(t: &T) -> Vec<f64> {
    t.tensors().iter().flat_map(|(_, m)| m.data().to_vec()).collect()
}

/// Statistics of `n` REINFORCE estimates with seeds derived from `seed`.
pub fn reinforce_stats<R>(
    params: &ModelParams,
    source: &[usize],
    t: usize,
    reward: &R,
    baseline: BaselineSource<'_>,
    n: usize,
    seed: u64,
) -> Result<EstimatorStats>
where
    R: Fn(&[usize]) -> f64 + Sync + ?Sized,
{
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let draws = (0..n)
        .into_par_iter()
        .map(|i| {
            reinforce_estimate(params, source, t, reward, baseline, derive_seed(seed, &[i as u64])).map(|g| flatten(&g))
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = draws[0].len();
    let mut mean = vec![0.0; dim];
    for d in &draws {
        for (m, x) in mean.iter_mut().zip(d) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut variance = vec![0.0; dim];
    for d in &draws {
        for ((v, x), m) in variance.iter_mut().zip(d).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    variance.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let std_error = variance.iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok(EstimatorStats {
        samples: n,
        mean,
        variance,
        std_error,
    })
}

/// Fits a linear baseline on sampled rollouts of a fixed model by SGD on
/// `(r̄_t − r)²`. The model itself is untouched.
#[allow(clippy::too_many_arguments)]
pub fn fit_baseline<R>(
    params: &ModelParams,
    source: &[usize],
    t: usize,
    reward: &R,
    iterations: usize,
    batch: usize,
    lr_b: f64,
    seed: u64,
) -> Result<BaselineRegressor>
where
    R: Fn(&[usize]) -> f64 + ?Sized,
{
    let ex = sampling_example(source);
    let mut reg = BaselineRegressor::zeros(params.hidden());
    let plan = vec![FeedMode::Sample; t];
    for it in 0..iterations {
        let mut acc = BaselineGrad::default();
        for b in 0..batch {
            let mut rng = seeded_rng(derive_seed(seed, &[it as u64, b as u64]));
            let trace = rollout(params, &ex, &plan, false, &mut rng)?;
            let r = reward(&trace.chosen);
            for s in &trace.steps {
                reg.accumulate(&s.h, r, &mut acc);
            }
        }
        reg.apply(&acc, lr_b)?;
    }
    Ok(reg)
}

/// Flattened view of named gradients, in tensor order.
pub fn flatten_named(g: &NamedGrads) -> Vec<f64> {
    g.iter().flat_map(|(_, m)| m.data().to_vec()).collect()
}

pub fn flatten_grads<T: TensorSet + ?Sized>(g: &T) -> Vec<f64> {
    flatten(g)
}
