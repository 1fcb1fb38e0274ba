//! Posterior density and the pilot adaptive Metropolis sampler.
//!
//! During the pilot phase (the first `m·M` iterations) the proposal
//! covariance is rescaled every `m` iterations by `1 ± ε` according to the
//! acceptance ratio of the last `m` iterations; afterwards it is frozen and
//! the chain is plain random-walk Metropolis.

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::EdgeAdjacency;
use crate::problem::{BoxBounds, DotProblem};
use crate::regularizers::{dot_reg, RegularizerSpec};

/// Unnormalized log target; `-∞` marks zero density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

/// Gaussian likelihood with diagonal covariance and the prior
/// `χ_A(q)·exp(−α R(q))`, over the physical free-parameter vector.
pub struct DotPosterior<'a> {
    pub problem: &'a DotProblem,
    pub data: &'a [f64],
    /// Standard deviation per flattened measurement.
    pub sigma: &'a [f64],
    pub regularizer: &'a RegularizerSpec,
    pub adjacency: &'a EdgeAdjacency,
    /// Prior strength α.
    pub alpha: f64,
    /// Admissible box in physical units; positivity is always enforced.
    pub bounds: &'a BoxBounds,
}

impl DotPosterior<'_> {
    pub fn validate(&self) -> Result<()> {
        let m = self.problem.model.measurement_count();
        for (what, len) in [("data", self.data.len()), ("noise sigma", self.sigma.len())] {
            if len != m {
                return Err(Error::Dimension {
                    what,
                    expected: m,
                    got: len,
                });
            }
        }
        if let Some(i) = self.sigma.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("noise sigma[{i}] must be positive")));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("prior strength must be positive, got {}", self.alpha)));
        }
        self.regularizer.validate()
    }

    /// Misfit term `½ Σ ((g − Θ(q))/σ)²`.
    pub fn misfit(&self, q: &[f64]) -> Result<f64> {
        let field = self.problem.field_physical(q)?;
        let theta = self.problem.model.forward_map(&field)?.flatten();
        Ok(0.5
            * theta
                .iter()
                .zip(self.data)
                .zip(self.sigma)
                .map(|((t, g), s)| ((g - t) / s).powi(2))
                .sum::<f64>())
    }

    pub fn prior_energy(&self, q: &[f64]) -> Result<f64> {
        let field = self.problem.field_physical(q)?;
        Ok(self.alpha * dot_reg(&field, self.regularizer, self.adjacency)?)
    }
}

impl LogDensity for DotPosterior<'_> {
    fn dim(&self) -> usize {
        self.problem.free.parameter_count()
    }

    fn log_density(&self, q: &[f64]) -> f64 {
        if q.iter().any(|&v| !(v > 0.0)) || !self.bounds.contains(q) {
            return f64::NEG_INFINITY;
        }
        match self.misfit(q).and_then(|m| Ok(m + self.prior_energy(q)?)) {
            Ok(e) if e.is_finite() => -e,
            Ok(_) => f64::NEG_INFINITY,
            Err(e) => {
                warn!("posterior evaluation failed, treating as zero density: {e}");
                f64::NEG_INFINITY
            }
        }
    }
}

/// `min(exp(log_y − log_x), 1)` for a symmetric proposal; 0 when the
/// proposal has zero density.
pub fn acceptance_prob(log_x: f64, log_y: f64) -> f64 {
    if log_y == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_y >= log_x {
        1.0
    } else {
        (log_y - log_x).exp()
    }
}

/// Proposal covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Dense(m) => m.nrows(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Covariance {
        match self {
            Covariance::Diagonal(v) => Covariance::Diagonal(v.iter().map(|c| c * factor).collect()),
            Covariance::Dense(m) => Covariance::Dense(m.map(|c| c * factor)),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Dense(m) => m.diagonal().iter().copied().collect(),
        }
    }

    fn sampler(&self) -> Result<CovSampler> {
        match self {
            Covariance::Diagonal(v) => {
                if let Some(i) = v.iter().position(|&c| !(c > 0.0)) {
                    return Err(Error::InvalidArgument(format!("covariance entry {i} not positive")));
                }
                Ok(CovSampler::Diagonal(v.iter().map(|c| c.sqrt()).collect()))
            }
            Covariance::Dense(m) => {
                if m != &m.transpose() {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
                let l = m
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
                Ok(CovSampler::Dense(l.l()))
            }
        }
    }
}

enum CovSampler {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl CovSampler {
    fn propose(&self, x: &[f64], rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            CovSampler::Diagonal(sd) => {
                for ((o, &xi), &s) in out.iter_mut().zip(x).zip(sd) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = xi + s * z;
                }
            }
            CovSampler::Dense(l) => {
                let z: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = x[i];
                    for (j, zj) in z.iter().enumerate().take(i + 1) {
                        acc += l[(i, j)] * zj;
                    }
                    *o = acc;
                }
            }
        }
    }
}

/// Multiplier applied by one adaption.
pub fn pam_factor(acceptance: f64, target: f64, epsilon: f64) -> f64 {
    if acceptance > target {
        1.0 + epsilon
    } else if acceptance < target {
        1.0 - epsilon
    } else {
        1.0
    }
}

/// One pilot adaption: every entry ×(1+ε) above target, ×(1−ε) below, unchanged at target.
pub fn pam_adapt(c: &Covariance, acceptance: f64, target: f64, epsilon: f64) -> Covariance {
    match pam_factor(acceptance, target, epsilon) {
        f if f == 1.0 => c.clone(),
        f => c.scaled(f),
    }
}

/// Chain lengths: adapt every `m` iterations `adaptions` times, discard the
/// first `burn_in`, run `total` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub m: usize,
    pub adaptions: usize,
    pub burn_in: usize,
    pub total: usize,
}

impl Schedule {
    pub const FULL: Schedule = Schedule {
        m: 50,
        adaptions: 600,
        burn_in: 100_000,
        total: 150_000,
    };
    pub const FAST: Schedule = Schedule {
        m: 25,
        adaptions: 100,
        burn_in: 10_000,
        total: 25_000,
    };

    pub fn pilot_length(&self) -> usize {
        self.m * self.adaptions
    }

    pub fn validate(&self) -> Result<()> {
        let mm = self.pilot_length();
        if !(self.m >= 1 && 1 < mm && mm < self.burn_in && self.burn_in < self.total) {
            return Err(Error::Config(format!(
                "schedule needs 1 < m·M < B < N, got m={} M={} B={} N={}",
                self.m, self.adaptions, self.burn_in, self.total
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub schedule: Schedule,
    /// Target acceptance ratio a_o.
    pub target_acceptance: f64,
    /// Relative change per adaption ε.
    pub epsilon: f64,
    /// Keep every `thin`-th state (the posterior mean uses all states).
    pub thin: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            schedule: Schedule::FULL,
            target_acceptance: 0.234,
            epsilon: 0.05,
            thin: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_acceptance
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Proposal scale at an adaption point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSnapshot {
    pub iteration: usize,
    /// Epoch acceptance ratio ā_j of the last `m` iterations.
    pub acceptance: f64,
    /// Product of all adaption factors so far: `C = factor · C₀`.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub schedule: Schedule,
    pub thin: usize,
    pub seed: u64,
    /// Iteration index of each stored sample (0, thin, 2·thin, …).
    pub sample_iterations: Vec<usize>,
    pub samples: Vec<Vec<f64>>,
    /// `accepted[i − 1]` is the flag c_i of iteration i.
    pub accepted: Vec<bool>,
    /// log π(x⁽ⁱ⁾) for i = 0..=N.
    pub log_density: Vec<f64>,
    /// One entry every `m` iterations over the whole run.
    pub snapshots: Vec<CovarianceSnapshot>,
    pub final_covariance: Covariance,
    /// Σ x⁽ⁱ⁾ over i = B+1..=N.
    post_burn_in_sum: Vec<f64>,
}

impl Chain {
    /// A chain from explicit post-burn-in states (burn-in and pilot empty),
    /// for post-processing externally produced samples.
    pub fn from_samples(samples: Vec<Vec<f64>>, accepted: Vec<bool>) -> Result<Chain> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two samples".into()));
        }
        if accepted.len() != n - 1 {
            return Err(Error::Dimension {
                what: "acceptance flags",
                expected: n - 1,
                got: accepted.len(),
            });
        }
        let dim = samples[0].len();
        let mut sum = vec![0.0; dim];
        for s in &samples[1..] {
            for (a, v) in sum.iter_mut().zip(s) {
                *a += v;
            }
        }
        Ok(Chain {
            schedule: Schedule {
                m: 1,
                adaptions: 0,
                burn_in: 0,
                total: n - 1,
            },
            thin: 1,
            seed: 0,
            sample_iterations: (0..n).collect(),
            samples,
            accepted,
            log_density: vec![f64::NAN; n],
            snapshots: Vec::new(),
            final_covariance: Covariance::Diagonal(vec![1.0; dim]),
            post_burn_in_sum: sum,
        })
    }

    pub fn dim(&self) -> usize {
        self.post_burn_in_sum.len()
    }

    /// Stored samples strictly after burn-in.
    pub fn post_burn_in(&self) -> impl Iterator<Item = &Vec<f64>> {
        let b = self.schedule.burn_in;
        self.sample_iterations
            .iter()
            .zip(&self.samples)
            .filter(move |(i, _)| **i > b)
            .map(|(_, s)| s)
    }

    /// Chain as CSV: `iteration,accepted,x0,x1,…` for stored samples, where
    /// `accepted` counts acceptances since the previous stored sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,accepted");
        for j in 0..self.dim() {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        let mut prev = 0;
        for (i, s) in self.sample_iterations.iter().zip(&self.samples) {
            let count = self.accepted[prev..*i].iter().filter(|&&a| a).count();
            prev = *i;
            out.push_str(&format!("{i},{count}"));
            for v in s {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Reads [`Chain::to_csv`] output. Acceptance flags are reconstructed per
    /// thinning interval (exact counts, positions within an interval
    /// arbitrary); the posterior-mean sum uses the stored samples only, and
    /// the log-density trace is not stored.
    pub fn from_csv(text: &str, schedule: Schedule) -> Result<Chain> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: "chain".into(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let dim = match lines.next() {
            Some((_, h)) if h.starts_with("iteration,accepted") => h.split(',').count() - 2,
            _ => return Err(perr(1, "expected header `iteration,accepted,…`".into())),
        };
        let mut iters = Vec::new();
        let mut samples = Vec::new();
        let mut accepted = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != dim + 2 {
                return Err(perr(i + 1, format!("expected {} fields", dim + 2)));
            }
            let it: usize = f[0].trim().parse().map_err(|e| perr(i + 1, format!("{e}")))?;
            let count: usize = f[1].trim().parse().map_err(|e| perr(i + 1, format!("{e}")))?;
            let gap = it
                .checked_sub(accepted.len())
                .filter(|g| *g >= count && (*g > 0 || iters.is_empty()))
                .ok_or_else(|| perr(i + 1, "iterations must increase".into()))?;
            accepted.extend((0..gap).map(|k| k < count));
            let x = f[2..]
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(i + 1, format!("{e}")))?;
            iters.push(it);
            samples.push(x);
        }
        if iters.len() < 2 {
            return Err(perr(0, "need at least two stored samples".into()));
        }
        let thin = iters[1] - iters[0];
        let total = accepted.len();
        let schedule = Schedule { total, ..schedule };
        let mut sum = vec![0.0; dim];
        let mut kept = 0usize;
        for (it, x) in iters.iter().zip(&samples) {
            if *it > schedule.burn_in {
                kept += 1;
                for (a, v) in sum.iter_mut().zip(x) {
                    *a += v;
                }
            }
        }
        // rescale so posterior_mean divides by N − B correctly
        let factor = total.saturating_sub(schedule.burn_in) as f64 / kept.max(1) as f64;
        sum.iter_mut().for_each(|v| *v *= factor);
        Ok(Chain {
            schedule,
            thin,
            seed: 0,
            sample_iterations: iters,
            samples,
            accepted,
            log_density: Vec::new(),
            snapshots: Vec::new(),
            final_covariance: Covariance::Diagonal(vec![1.0; dim]),
            post_burn_in_sum: sum,
        })
    }
}

/// Runs the pilot adaptive Metropolis chain from `x0` with proposal `C₀`.
pub fn run_pilot_metropolis(
    target: &dyn LogDensity,
    cfg: &SamplerConfig,
    x0: &[f64],
    c0: &Covariance,
) -> Result<Chain> {
    cfg.validate()?;
    let dim = target.dim();
    if x0.len() != dim || c0.dim() != dim {
        return Err(Error::Dimension {
            what: "initial state / covariance",
            expected: dim,
            got: if x0.len() != dim { x0.len() } else { c0.dim() },
        });
    }
    let mut lx = target.log_density(x0);
    if lx == f64::NEG_INFINITY || lx.is_nan() {
        return Err(Error::InvalidArgument("initial state has zero posterior density".into()));
    }
    let Schedule {
        m,
        burn_in,
        total,
        ..
    } = cfg.schedule;
    let pilot = cfg.schedule.pilot_length();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cov = c0.clone();
    let mut sampler = cov.sampler()?;
    let mut factor = 1.0;

    let mut x = x0.to_vec();
    let mut y = vec![0.0; dim];
    let mut chain = Chain {
        schedule: cfg.schedule,
        thin: cfg.thin,
        seed: cfg.seed,
        sample_iterations: vec![0],
        samples: vec![x.clone()],
        accepted: Vec::with_capacity(total),
        log_density: Vec::with_capacity(total + 1),
        snapshots: Vec::new(),
        final_covariance: c0.clone(),
        post_burn_in_sum: vec![0.0; dim],
    };
    chain.log_density.push(lx);
    let mut epoch_accepts = 0usize;
    let mut idle_epochs = 0usize;

    for i in 1..=total {
        sampler.propose(&x, &mut rng, &mut y);
        let u: f64 = rng.random();
        let ly = target.log_density(&y);
        let a = acceptance_prob(lx, ly);
        let take = a > 0.0 && u <= a;
        if take {
            std::mem::swap(&mut x, &mut y);
            lx = ly;
            epoch_accepts += 1;
        }
        chain.accepted.push(take);
        chain.log_density.push(lx);
        if i > burn_in {
            for (s, v) in chain.post_burn_in_sum.iter_mut().zip(&x) {
                *s += v;
            }
        }
        if i % cfg.thin == 0 {
            chain.sample_iterations.push(i);
            chain.samples.push(x.clone());
        }
        if i % m == 0 {
            let ratio = epoch_accepts as f64 / m as f64;
            if i <= pilot {
                let f = pam_factor(ratio, cfg.target_acceptance, cfg.epsilon);
                if f != 1.0 {
                    cov = cov.scaled(f);
                    sampler = cov.sampler()?;
                    factor *= f;
                }
            }
            if epoch_accepts == 0 {
                idle_epochs += 1;
                if idle_epochs == 10 {
                    warn!("no proposal accepted for 10 consecutive epochs (iteration {i}); proposal scale may be miscalibrated");
                }
            } else {
                idle_epochs = 0;
            }
            chain.snapshots.push(CovarianceSnapshot {
                iteration: i,
                acceptance: ratio,
                factor,
            });
            epoch_accepts = 0;
        }
    }
    chain.final_covariance = cov;
    Ok(chain)
}

/// Sample mean over all states after burn-in, `(1/(N−B)) Σ_{i>B} x⁽ⁱ⁾`.
pub fn posterior_mean(chain: &Chain) -> Result<Vec<f64>> {
    let count = chain.schedule.total.saturating_sub(chain.schedule.burn_in);
    if count == 0 {
        return Err(Error::InvalidArgument("chain has no post-burn-in states".into()));
    }
    Ok(chain.post_burn_in_sum.iter().map(|s| s / count as f64).collect())
}

/// Integrated autocorrelation time by Geyer's initial positive sequence.
/// Returns 1 for constant series.
pub fn integrated_autocorrelation(series: &[f64]) -> f64 {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = series.len();
    if n < 4 {
        return 1.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let acov: Vec<f64> = buf[..n].iter().map(|c| c.re / (size * n) as f64).collect();
    if !(acov[0] > 0.0) {
        return 1.0;
    }
    let mut sum = -acov[0];
    let mut k = 0;
    while k + 1 < n {
        let pair = acov[k] + acov[k + 1];
        if pair <= 0.0 {
            break;
        }
        sum += 2.0 * pair;
        k += 2;
    }
    (sum / acov[0]).max(f64::MIN_POSITIVE)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Geweke z-score comparing the first 10% and last 50% of `series`, with
/// variances inflated by each segment's autocorrelation time. `None` for a
/// constant series.
pub fn geweke_z(series: &[f64]) -> Option<f64> {
    let n = series.len();
    let a = &series[..(n / 10).max(2)];
    let b = &series[n - (n / 2).max(2)..];
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se2 = va * integrated_autocorrelation(a) / a.len() as f64
        + vb * integrated_autocorrelation(b) / b.len() as f64;
    if se2 > 0.0 {
        Some((ma - mb) / se2.sqrt())
    } else if ma == mb {
        None
    } else {
        Some(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Acceptance ratio over iterations after the pilot phase.
    pub post_pilot_acceptance: f64,
    /// Autocorrelation time per coordinate, in iterations (thinned IAT × thin).
    pub iat: Vec<f64>,
    /// Geweke z per coordinate (`NaN` for constant coordinates).
    pub geweke: Vec<f64>,
    /// Acceptance ratio over consecutive windows of `window` iterations.
    pub window: usize,
    pub windowed_acceptance: Vec<f64>,
    /// IAT of the log-density trace after burn-in (a scalar projection).
    pub log_density_iat: f64,
    /// No post-pilot move was accepted.
    pub degenerate: bool,
}

impl Diagnostics {
    pub fn geweke_pass_fraction(&self, limit: f64) -> f64 {
        let finite: Vec<f64> = self.geweke.iter().copied().filter(|z| !z.is_nan()).collect();
        if finite.is_empty() {
            return 0.0;
        }
        finite.iter().filter(|z| z.abs() < limit).count() as f64 / finite.len() as f64
    }

    pub fn summary(&self) -> String {
        let mut sorted = self.iat.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted.get(sorted.len() / 2).copied().unwrap_or(f64::NAN);
        let max = sorted.last().copied().unwrap_or(f64::NAN);
        let ld = if self.log_density_iat.is_finite() {
            format!("{:.1}", self.log_density_iat)
        } else {
            "unavailable (no log-density trace)".to_string()
        };
        format!(
            "post-pilot acceptance: {:.4}\n\
             integrated autocorrelation (iterations): median {median:.1}, max {max:.1}\n\
             log-density autocorrelation (iterations): {ld}\n\
             geweke |z| < 3: {:.1}% of coordinates\n\
             acceptance windows ({} iterations): {}\n\
             degenerate: {}\n",
            self.post_pilot_acceptance,
            100.0 * self.geweke_pass_fraction(3.0),
            self.window,
            self.windowed_acceptance.len(),
            self.degenerate
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coordinate,iat,geweke_z\n");
        for (j, (t, z)) in self.iat.iter().zip(&self.geweke).enumerate() {
            out.push_str(&format!("{j},{t:e},{z:e}\n"));
        }
        out
    }
}

pub const MIN_POST_BURN_IN: usize = 1000;

pub fn diagnostics(chain: &Chain) -> Result<Diagnostics> {
    let Schedule {
        m,
        burn_in,
        total,
        ..
    } = chain.schedule;
    if total < burn_in + MIN_POST_BURN_IN {
        return Err(Error::InvalidArgument(format!(
            "diagnostics need at least {MIN_POST_BURN_IN} post-burn-in iterations, chain has {}",
            total.saturating_sub(burn_in)
        )));
    }
    let pilot = chain.schedule.pilot_length();
    let after = &chain.accepted[pilot..];
    let post_pilot_acceptance = after.iter().filter(|&&a| a).count() as f64 / after.len().max(1) as f64;
    let window = m.max(100);
    let windowed_acceptance = chain
        .accepted
        .chunks(window)
        .map(|w| w.iter().filter(|&&a| a).count() as f64 / w.len() as f64)
        .collect();

    let post: Vec<&Vec<f64>> = chain.post_burn_in().collect();
    let dim = chain.dim();
    let (iat, geweke): (Vec<f64>, Vec<f64>) = {
        use rayon::prelude::*;
        (0..dim)
            .into_par_iter()
            .map(|j| {
                let s: Vec<f64> = post.iter().map(|x| x[j]).collect();
                (
                    integrated_autocorrelation(&s) * chain.thin as f64,
                    geweke_z(&s).unwrap_or(f64::NAN),
                )
            })
            .unzip()
    };
    let ld = chain.log_density.get(burn_in + 1..).unwrap_or(&[]);
    let log_density_iat = if !ld.is_empty() && ld.iter().all(|v| v.is_finite()) {
        integrated_autocorrelation(ld)
    } else {
        f64::NAN
    };
    let constant = post.windows(2).all(|w| w[0] == w[1]);
    Ok(Diagnostics {
        post_pilot_acceptance,
        iat,
        geweke,
        window,
        windowed_acceptance,
        log_density_iat,
        degenerate: post_pilot_acceptance == 0.0 || constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) struct TruncatedGaussian(pub usize);

    impl LogDensity for TruncatedGaussian {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x.iter().any(|&v| v <= 0.0) {
                f64::NEG_INFINITY
            } else {
                -0.5 * x.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(acceptance_prob(-3.0, -1.0), 1.0);
        assert_eq!(acceptance_prob(-3.0, -3.0), 1.0);
        assert!((acceptance_prob(0.0, -std::f64::consts::LN_2) - 0.5).abs() < 1e-15);
        assert_eq!(acceptance_prob(-3.0, f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn pam_cases_bit_exact() {
        let c = Covariance::Diagonal(vec![0.3, 1.7, 2.0e-5]);
        assert_eq!(pam_adapt(&c, 0.234, 0.234, 0.1), c);
        let up = pam_adapt(&c, 1.0, 0.234, 0.1);
        assert_eq!(up, Covariance::Diagonal(vec![0.3 * 1.1, 1.7 * 1.1, 2.0e-5 * 1.1]));
        let down = pam_adapt(&c, 0.0, 0.234, 0.1);
        assert_eq!(down, Covariance::Diagonal(vec![0.3 * 0.9, 1.7 * 0.9, 2.0e-5 * 0.9]));
        let d = Covariance::Dense(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        assert_eq!(
            pam_adapt(&d, 0.9, 0.234, 0.1),
            Covariance::Dense(DMatrix::from_row_slice(2, 2, &[2.0 * 1.1, 0.5 * 1.1, 0.5 * 1.1, 1.1]))
        );
    }

    #[test]
    fn pam_increase_is_strict_on_diagonal() {
        let c = Covariance::Diagonal(vec![1e-8, 1.0, 5.0]);
        let up = pam_adapt(&c, 0.5, 0.234, 0.05).diagonal();
        assert!(up.iter().zip(c.diagonal()).all(|(a, b)| *a > b));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::FULL.validate().is_ok());
        assert!(Schedule::FAST.validate().is_ok());
        let bad = Schedule {
            m: 10,
            adaptions: 100,
            burn_in: 500,
            total: 2000,
        };
        assert!(bad.validate().is_err());
    }

    fn small_cfg(seed: u64) -> SamplerConfig {
        SamplerConfig {
            schedule: Schedule {
                m: 10,
                adaptions: 20,
                burn_in: 500,
                total: 1500,
            },
            thin: 1,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn chain_structure_and_determinism() {
        let t = TruncatedGaussian(3);
        let cfg = small_cfg(7);
        let c0 = Covariance::Diagonal(vec![0.5; 3]);
        let a = run_pilot_metropolis(&t, &cfg, &[1.0; 3], &c0).unwrap();
        let b = run_pilot_metropolis(&t, &cfg, &[1.0; 3], &c0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 1501);
        assert_eq!(a.accepted.len(), 1500);
        // flags agree with state changes, samples stay positive
        for i in 1..a.samples.len() {
            if a.samples[i] != a.samples[i - 1] {
                assert!(a.accepted[i - 1]);
            }
            assert!(a.samples[i].iter().all(|&v| v > 0.0));
        }
        // frozen after the pilot phase
        let pilot = cfg.schedule.pilot_length();
        let frozen: Vec<f64> = a
            .snapshots
            .iter()
            .filter(|s| s.iteration >= pilot)
            .map(|s| s.factor)
            .collect();
        assert!(frozen.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(a.snapshots.len(), 150);
        assert_eq!(a.final_covariance, c0.scaled(frozen[0]));
        let c = run_pilot_metropolis(&t, &small_cfg(8), &[1.0; 3], &c0).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn snapshots_replay_pam_rule() {
        let t = TruncatedGaussian(2);
        let cfg = small_cfg(3);
        let c0 = Covariance::Diagonal(vec![4.0; 2]);
        let chain = run_pilot_metropolis(&t, &cfg, &[1.0; 2], &c0).unwrap();
        let mut factor = 1.0;
        for s in chain.snapshots.iter().filter(|s| s.iteration <= cfg.schedule.pilot_length()) {
            let lo = s.iteration - cfg.schedule.m;
            let count = chain.accepted[lo..s.iteration].iter().filter(|&&a| a).count();
            assert_eq!(s.acceptance, count as f64 / cfg.schedule.m as f64);
            let f = pam_factor(s.acceptance, cfg.target_acceptance, cfg.epsilon);
            if f != 1.0 {
                factor *= f;
            }
            assert_eq!(s.factor, factor);
        }
    }

    #[test]
    fn csv_round_trip_preserves_samples_and_counts() {
        let t = TruncatedGaussian(2);
        let mut cfg = small_cfg(4);
        cfg.thin = 5;
        let chain = run_pilot_metropolis(&t, &cfg, &[1.0; 2], &Covariance::Diagonal(vec![1.0; 2])).unwrap();
        let back = Chain::from_csv(&chain.to_csv(), cfg.schedule).unwrap();
        assert_eq!(back.samples, chain.samples);
        assert_eq!(back.thin, 5);
        assert_eq!(back.accepted.len(), chain.accepted.len());
        for w in (0..chain.accepted.len()).step_by(5) {
            let a = chain.accepted[w..w + 5].iter().filter(|&&x| x).count();
            let b = back.accepted[w..w + 5].iter().filter(|&&x| x).count();
            assert_eq!(a, b);
        }
        let exact = diagnostics(&chain).unwrap();
        let read = diagnostics(&back).unwrap();
        assert_eq!(exact.post_pilot_acceptance, read.post_pilot_acceptance);
        assert_eq!(exact.iat, read.iat);
    }

    #[test]
    fn rejects_zero_density_start() {
        let t = TruncatedGaussian(2);
        let c0 = Covariance::Diagonal(vec![1.0; 2]);
        assert!(run_pilot_metropolis(&t, &small_cfg(1), &[-1.0, 1.0], &c0).is_err());
    }

    #[test]
    fn posterior_mean_simple_chains() {
        let same = Chain::from_samples(vec![vec![2.0, 3.0]; 5], vec![false; 4]).unwrap();
        assert_eq!(posterior_mean(&same).unwrap(), vec![2.0, 3.0]);
        let alt: Vec<Vec<f64>> = (0..9).map(|i| if i % 2 == 0 { vec![1.0] } else { vec![3.0] }).collect();
        let chain = Chain::from_samples(alt, vec![true; 8]).unwrap();
        assert_eq!(posterior_mean(&chain).unwrap(), vec![2.0]);
    }

    #[test]
    fn iat_of_iid_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..20000).map(|_| rng.sample(StandardNormal)).collect();
        let t = integrated_autocorrelation(&s);
        assert!((t - 1.0).abs() < 0.2, "{t}");
        // AR(1) with φ = 0.8 has τ = (1+φ)/(1−φ) = 9
        let mut ar = vec![0.0; 50000];
        for i in 1..ar.len() {
            let z: f64 = rng.sample(StandardNormal);
            ar[i] = 0.8 * ar[i - 1] + z;
        }
        let t = integrated_autocorrelation(&ar);
        assert!((t - 9.0).abs() < 1.5, "{t}");
    }

    #[test]
    fn constant_chain_is_degenerate() {
        let chain = Chain::from_samples(vec![vec![1.0, 2.0]; 1201], vec![false; 1200]).unwrap();
        let d = diagnostics(&chain).unwrap();
        assert_eq!(d.post_pilot_acceptance, 0.0);
        assert!(d.degenerate);
        let short = Chain::from_samples(vec![vec![1.0]; 100], vec![false; 99]).unwrap();
        assert!(diagnostics(&short).is_err());
    }

    #[test]
    fn geweke_on_iid_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples: Vec<Vec<f64>> = (0..4001)
            .map(|_| (0..40).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let chain = Chain::from_samples(samples, vec![true; 4000]).unwrap();
        let d = diagnostics(&chain).unwrap();
        assert!(d.geweke_pass_fraction(3.0) >= 0.95);
        assert!(!d.degenerate);
    }

    #[test]
    fn detailed_balance_three_states() {
        // π ∝ (1, 2, 5); symmetric proposal to a uniformly chosen other state
        let log_pi = [1f64.ln(), 2f64.ln(), 5f64.ln()];
        let pi = [1.0 / 8.0, 2.0 / 8.0, 5.0 / 8.0];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let steps = 400_000;
        let mut counts = [[0usize; 3]; 3];
        let mut x = 0usize;
        for _ in 0..steps {
            let y = (x + 1 + rng.random_range(0..2usize)) % 3;
            let u: f64 = rng.random();
            let next = if u <= acceptance_prob(log_pi[x], log_pi[y]) { y } else { x };
            counts[x][next] += 1;
            x = next;
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                // flow a→b and b→a per step, each ≈ π(a)P(a,b)
                let fab = counts[a][b] as f64 / steps as f64;
                let fba = counts[b][a] as f64 / steps as f64;
                let expect = pi[a] * 0.5 * acceptance_prob(log_pi[a], log_pi[b]);
                let sd = (expect / steps as f64).sqrt();
                assert!((fab - fba).abs() <= 3.0 * 2f64.sqrt() * sd, "{a}{b}: {fab} vs {fba}");
                assert!((fab - expect).abs() <= 3.0 * sd * 3.0);
            }
        }
    }
}
