//! Adaptive stratified Monte Carlo over the unit hypercube.
//!
//! The domain is partitioned into hyperrectangular strata. Each iteration
//! allocates a batch by the hybrid rule (a convex mix of proportional and
//! variance-optimal allocation), evaluates the integrand at uniform points
//! inside each stratum, and greedily bisects the stratum/coordinate whose
//! split most reduces the variance proxy `sum p_S sigma_S`. Points are drawn
//! serially in stratum order and evaluated in parallel, then merged back in
//! index order, so results are reproducible for a fixed seed regardless of
//! worker count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::substream;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("stratum {0} has no samples")]
    EmptyStratum(usize),
    #[error("stratum {0} needs at least 2 samples for a variance estimate")]
    UndefinedVariance(usize),
    #[error("budget {budget} is below the batch size {batch}")]
    BudgetBelowBatch { budget: usize, batch: usize },
    #[error("measuring speedup needs at least 20 repeats, got {0}")]
    TooFewRepeats(usize),
    #[error("evaluation failed at {point:?}: {message}")]
    EvalFailed { point: Vec<f64>, message: String },
    #[error("dimension must be >= 1")]
    ZeroDimension,
}

/// One hyperrectangular stratum with its samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stratum {
    /// Per-dimension [low, high) bounds inside [0, 1].
    pub bounds: Vec<(f64, f64)>,
    /// Sample locations, kept so splits can reassign them.
    pub points: Vec<Vec<f64>>,
    /// Integrand values at `points`.
    pub values: Vec<f64>,
}

impl Stratum {
    pub fn whole_domain(n_dims: usize) -> Self {
        Stratum { bounds: vec![(0.0, 1.0); n_dims], points: Vec::new(), values: Vec::new() }
    }

    /// Probability measure = volume.
    pub fn p(&self) -> f64 {
        self.bounds.iter().map(|&(lo, hi)| hi - lo).product()
    }

    pub fn n_samples(&self) -> usize {
        self.values.len()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation (n - 1 normalization); None below 2 samples.
    pub fn std(&self) -> Option<f64> {
        let n = self.values.len();
        if n < 2 {
            return None;
        }
        let mean = self.mean();
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some(var.sqrt())
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        self.bounds
            .iter()
            .zip(point)
            .all(|(&(lo, hi), &x)| x >= lo && (x < hi || (hi == 1.0 && x <= 1.0)))
    }
}

/// A partition of the unit hypercube with sampling parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stratification {
    pub strata: Vec<Stratum>,
    /// Hybrid allocation parameter in [0, 1]: 0 proportional, 1 optimal.
    pub alpha: f64,
    /// Samples allocated per iteration.
    pub batch: usize,
}

impl Stratification {
    pub fn single(n_dims: usize, alpha: f64, batch: usize) -> Self {
        Stratification { strata: vec![Stratum::whole_domain(n_dims)], alpha, batch }
    }

    pub fn total_samples(&self) -> usize {
        self.strata.iter().map(|s| s.n_samples()).sum()
    }

    /// Sum of stratum measures; 1 within float tolerance for a partition.
    pub fn total_measure(&self) -> f64 {
        self.strata.iter().map(|s| s.p()).sum()
    }
}

/// Largest-remainder rounding of real-valued targets to integers summing to
/// `total`. Leftover units go to the largest fractional parts; ties prefer
/// the larger target, then the lower stratum index.
fn largest_remainder(targets: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let leftover = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa)
            .unwrap()
            .then(targets[b].partial_cmp(&targets[a]).unwrap())
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(leftover) {
        counts[i] += 1;
    }
    counts
}

fn proportional_targets(strata: &[Stratum], n_new: usize) -> Vec<f64> {
    strata.iter().map(|s| n_new as f64 * s.p()).collect()
}

/// Hybrid allocation of `n_new` samples.
///
/// `N_S = (1 - alpha) N_S_prop + alpha N_S_opt` with proportional shares
/// `p_S` and optimal shares `p_S sigma_S / sum p sigma`, rounded by largest
/// remainder. Strata that do not yet hold 2 samples are seeded first (the
/// whole round falls back to proportional); if the batch cannot seed them
/// all, the round is allocated proportionally and seeding is deferred.
pub fn allocate_hybrid(s: &Stratification, n_new: usize) -> Vec<usize> {
    let strata = &s.strata;
    let needy: Vec<usize> = (0..strata.len()).filter(|&i| strata[i].n_samples() < 2).collect();
    if !needy.is_empty() {
        let seeds_needed: usize = needy.iter().map(|&i| 2 - strata[i].n_samples()).sum();
        if n_new < seeds_needed {
            return largest_remainder(&proportional_targets(strata, n_new), n_new);
        }
        let mut counts = vec![0usize; strata.len()];
        for &i in &needy {
            counts[i] = 2 - strata[i].n_samples();
        }
        let rest = n_new - seeds_needed;
        let extra = largest_remainder(&proportional_targets(strata, rest), rest);
        for (c, e) in counts.iter_mut().zip(extra) {
            *c += e;
        }
        return counts;
    }

    let p_sigma: Vec<f64> = strata
        .iter()
        .map(|st| st.p() * st.std().expect("all strata hold >= 2 samples"))
        .collect();
    let total_p_sigma: f64 = p_sigma.iter().sum();
    let targets: Vec<f64> = strata
        .iter()
        .zip(&p_sigma)
        .map(|(st, &ps)| {
            let prop = n_new as f64 * st.p();
            let opt = if total_p_sigma > 0.0 { n_new as f64 * ps / total_p_sigma } else { prop };
            (1.0 - s.alpha) * prop + s.alpha * opt
        })
        .collect();
    largest_remainder(&targets, n_new)
}

/// Stratified estimator: `sum_S p_S mean_S`.
pub fn estimate(s: &Stratification) -> Result<f64, SamplingError> {
    let mut acc = 0.0;
    for (i, st) in s.strata.iter().enumerate() {
        if st.n_samples() == 0 {
            return Err(SamplingError::EmptyStratum(i));
        }
        acc += st.p() * st.mean();
    }
    Ok(acc)
}

/// Hybrid estimator variance from measures and standard deviations:
/// `(1/N) sum_S p_S sigma_S^2 / (1 + alpha (sigma_bar_S - 1))` with
/// `sigma_bar_S = sigma_S / sum_T p_T sigma_T`.
pub fn hybrid_variance(p: &[f64], sigma: &[f64], alpha: f64, n_total: usize) -> f64 {
    let total_p_sigma: f64 = p.iter().zip(sigma).map(|(&a, &b)| a * b).sum();
    if total_p_sigma == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&ps, &sg) in p.iter().zip(sigma) {
        if sg == 0.0 {
            continue;
        }
        let denom = if alpha == 0.0 {
            1.0
        } else {
            1.0 + alpha * (sg / total_p_sigma - 1.0)
        };
        acc += ps * sg * sg / denom;
    }
    acc / n_total as f64
}

/// Estimator variance from the stratification's own sample statistics.
pub fn estimator_variance(s: &Stratification, n_total: usize) -> Result<f64, SamplingError> {
    let mut p = Vec::with_capacity(s.strata.len());
    let mut sigma = Vec::with_capacity(s.strata.len());
    for (i, st) in s.strata.iter().enumerate() {
        p.push(st.p());
        sigma.push(st.std().ok_or(SamplingError::UndefinedVariance(i))?);
    }
    Ok(hybrid_variance(&p, &sigma, s.alpha, n_total))
}

fn sample_std(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(var.sqrt())
}

/// Greedy refinement: bisect the stratum/coordinate whose midpoint split
/// most decreases `sum p_S sigma_S`, judged from the existing samples.
/// Candidates need at least 4 samples with at least 2 landing in each half.
/// Returns the stratification unchanged when no split scores positive.
pub fn adapt(mut s: Stratification) -> Stratification {
    let mut best: Option<(f64, usize, usize)> = None; // (score, stratum, dim)
    for (si, st) in s.strata.iter().enumerate() {
        if st.n_samples() < 4 {
            continue;
        }
        let sigma = st.std().expect(">= 4 samples");
        let p = st.p();
        for d in 0..st.bounds.len() {
            let (lo, hi) = st.bounds[d];
            let mid = 0.5 * (lo + hi);
            let (mut low_vals, mut high_vals) = (Vec::new(), Vec::new());
            for (pt, &v) in st.points.iter().zip(&st.values) {
                if pt[d] < mid {
                    low_vals.push(v);
                } else {
                    high_vals.push(v);
                }
            }
            let (Some(s_lo), Some(s_hi)) = (sample_std(&low_vals), sample_std(&high_vals))
            else {
                continue;
            };
            let score = p * sigma - 0.5 * p * (s_lo + s_hi);
            if score > 0.0 && best.as_ref().map_or(true, |&(b, _, _)| score > b) {
                best = Some((score, si, d));
            }
        }
    }
    let Some((_, si, d)) = best else {
        return s;
    };

    let old = s.strata.remove(si);
    let (lo, hi) = old.bounds[d];
    let mid = 0.5 * (lo + hi);
    let mut lower = Stratum { bounds: old.bounds.clone(), points: Vec::new(), values: Vec::new() };
    lower.bounds[d] = (lo, mid);
    let mut upper = Stratum { bounds: old.bounds, points: Vec::new(), values: Vec::new() };
    upper.bounds[d] = (mid, hi);
    for (pt, v) in old.points.into_iter().zip(old.values) {
        if pt[d] < mid {
            lower.points.push(pt);
            lower.values.push(v);
        } else {
            upper.points.push(pt);
            upper.values.push(v);
        }
    }
    s.strata.insert(si, lower);
    s.strata.push(upper);
    s
}

/// One evaluated point of the sampling log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub stratum_id: usize,
    pub point: Vec<f64>,
    pub q_value: f64,
}

/// Snapshot of one stratum for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumSnapshot {
    pub bounds: Vec<(f64, f64)>,
    pub n_samples: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

/// Result of a sampling run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimate: f64,
    /// Variance by the hybrid formula; nominal because it assumes the
    /// prescribed allocation rates were maintained exactly.
    pub variance_nominal: f64,
    pub n_evaluations: usize,
    pub stratification: Vec<StratumSnapshot>,
    pub log: Vec<LogEntry>,
}

fn snapshot(s: &Stratification) -> Vec<StratumSnapshot> {
    s.strata
        .iter()
        .map(|st| StratumSnapshot {
            bounds: st.bounds.clone(),
            n_samples: st.n_samples(),
            mean: if st.n_samples() > 0 { st.mean() } else { f64::NAN },
            std: st.std(),
        })
        .collect()
}

fn evaluate_batch<F>(
    f: &F,
    jobs: Vec<(usize, Vec<f64>)>,
) -> Result<Vec<(usize, Vec<f64>, f64)>, SamplingError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    let results: Vec<Result<f64, String>> =
        jobs.par_iter().map(|(_, point)| f(point)).collect();
    let mut out = Vec::with_capacity(jobs.len());
    for ((si, point), res) in jobs.into_iter().zip(results) {
        match res {
            Ok(q) => out.push((si, point, q)),
            Err(message) => return Err(SamplingError::EvalFailed { point, message }),
        }
    }
    Ok(out)
}

fn run_batches<F>(
    f: &F,
    mut strat: Stratification,
    budget: usize,
    seed: u64,
    adapt_between: bool,
) -> Result<EstimatorResult, SamplingError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    if strat.batch == 0 || budget < strat.batch {
        return Err(SamplingError::BudgetBelowBatch { budget, batch: strat.batch });
    }
    let mut rng = substream(seed, 0);
    let mut log = Vec::with_capacity(budget);
    let mut remaining = budget;
    let mut iteration = 0usize;
    while remaining > 0 {
        let nb = strat.batch.min(remaining);
        let counts = allocate_hybrid(&strat, nb);
        // draws happen serially in stratum order so the point set is
        // independent of evaluation parallelism
        let mut jobs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(nb);
        for (si, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let point: Vec<f64> = strat.strata[si]
                    .bounds
                    .iter()
                    .map(|&(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
                    .collect();
                jobs.push((si, point));
            }
        }
        for (si, point, q) in evaluate_batch(f, jobs)? {
            log.push(LogEntry { iteration, stratum_id: si, point: point.clone(), q_value: q });
            strat.strata[si].points.push(point);
            strat.strata[si].values.push(q);
        }
        remaining -= nb;
        if adapt_between && remaining > 0 {
            strat = adapt(strat);
        }
        iteration += 1;
    }
    let estimate = estimate(&strat)?;
    let variance_nominal = estimator_variance(&strat, budget).unwrap_or(f64::NAN);
    Ok(EstimatorResult {
        estimate,
        variance_nominal,
        n_evaluations: budget,
        stratification: snapshot(&strat),
        log,
    })
}

/// Adaptive stratified sampling run.
pub fn run_adaptive<F>(
    f: &F,
    n_dims: usize,
    budget: usize,
    alpha: f64,
    batch: usize,
    seed: u64,
) -> Result<EstimatorResult, SamplingError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    if n_dims == 0 {
        return Err(SamplingError::ZeroDimension);
    }
    run_batches(f, Stratification::single(n_dims, alpha, batch), budget, seed, true)
}

/// Stratified sampling on a fixed stratification (no adaptation).
pub fn run_fixed<F>(
    f: &F,
    strat: Stratification,
    budget: usize,
    seed: u64,
) -> Result<EstimatorResult, SamplingError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    run_batches(f, strat, budget, seed, false)
}

/// Standard Monte Carlo: mean and variance-of-mean `s^2 / N`.
pub fn run_smc<F>(
    f: &F,
    n_dims: usize,
    budget: usize,
    seed: u64,
) -> Result<EstimatorResult, SamplingError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    if n_dims == 0 {
        return Err(SamplingError::ZeroDimension);
    }
    if budget == 0 {
        return Err(SamplingError::BudgetBelowBatch { budget, batch: 1 });
    }
    let mut strat = Stratification::single(n_dims, 0.0, budget);
    let mut rng = substream(seed, 0);
    let mut jobs = Vec::with_capacity(budget);
    for _ in 0..budget {
        let point: Vec<f64> = (0..n_dims).map(|_| rng.gen::<f64>()).collect();
        jobs.push((0usize, point));
    }
    let mut log = Vec::with_capacity(budget);
    for (si, point, q) in evaluate_batch(f, jobs)? {
        log.push(LogEntry { iteration: 0, stratum_id: si, point: point.clone(), q_value: q });
        strat.strata[0].points.push(point);
        strat.strata[0].values.push(q);
    }
    let mean = strat.strata[0].mean();
    let var = strat.strata[0].std().map(|s| s * s / budget as f64).unwrap_or(0.0);
    Ok(EstimatorResult {
        estimate: mean,
        variance_nominal: var,
        n_evaluations: budget,
        stratification: snapshot(&strat),
        log,
    })
}

/// Paired speedup study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupReport {
    /// SMC estimator variance from theory, `s^2 / N`.
    pub var_smc: f64,
    /// Empirical variance of the adaptive estimator over repeated runs.
    pub var_adaptive: f64,
    /// `var_smc / var_adaptive`.
    pub speedup: f64,
    pub smc_estimate: f64,
    pub adaptive_estimates: Vec<f64>,
}

/// Measures the variance ratio of SMC to adaptive stratified sampling.
///
/// The SMC variance comes from single-run theory; the adaptive variance is
/// the sample variance over `repeats` independent runs, which stays honest
/// when prescribed allocation rates cannot be maintained.
pub fn measure_speedup<F>(
    f: &F,
    n_dims: usize,
    budget: usize,
    repeats: usize,
    alpha: f64,
    batch: usize,
    seed: u64,
) -> Result<SpeedupReport, SamplingError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    if repeats < 20 {
        return Err(SamplingError::TooFewRepeats(repeats));
    }
    let smc = run_smc(f, n_dims, budget, crate::rng::derive_seed(seed, 0))?;
    let mut estimates = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let res = run_adaptive(f, n_dims, budget, alpha, batch, crate::rng::derive_seed(seed, 1 + r as u64))?;
        estimates.push(res.estimate);
    }
    let var_adaptive = sample_std(&estimates).map(|s| s * s).unwrap_or(0.0);
    let var_smc = smc.variance_nominal;
    let speedup = if var_adaptive > 0.0 {
        var_smc / var_adaptive
    } else if var_smc == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(SpeedupReport {
        var_smc,
        var_adaptive,
        speedup,
        smc_estimate: smc.estimate,
        adaptive_estimates: estimates,
    })
}

/// Writes the evaluation log as `iteration,stratum_id,u1..un,q_value` CSV.
pub fn write_log_csv<W: std::io::Write>(
    log: &[LogEntry],
    n_dims: usize,
    writer: W,
) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["iteration".to_string(), "stratum_id".to_string()];
    header.extend((1..=n_dims).map(|i| format!("u{i}")));
    header.push("q_value".to_string());
    wtr.write_record(&header)?;
    for e in log {
        let mut rec = vec![e.iteration.to_string(), e.stratum_id.to_string()];
        rec.extend(e.point.iter().map(|x| x.to_string()));
        rec.push(e.q_value.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
