//! Numerical checks of clipped mean boosting.
//!
//! Three settings are covered:
//! - the infinite-sample recursion `mu_hat <- mu_hat + E[C_tau(Y - mu_hat)]`
//!   for `Y ~ N(mu, 1)`, with its per-round contraction bounds, round bound
//!   and one-round bias lower bound;
//! - a finite-sample Monte-Carlo of private clipped mean estimation with a
//!   per-round threshold schedule;
//! - the noiseless fixed-point iteration, whose limit is the Huber
//!   M-estimator (and the median as `tau -> 0`).

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mechanisms::{clip_scalar, NoiseDraw};
use crate::privacy::{normal_cdf, normal_pdf};

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "tau",
            format!("must be positive and finite, got {tau}"),
        ))
    }
}

fn check_finite(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite, got {v}")))
    }
}

/// Gaussian mean-estimation problem: `Y ~ N(mu_true, 1)`, clipping at `tau`,
/// target accuracy `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanProblem {
    pub mu_true: f64,
    pub tau: f64,
    pub alpha: f64,
}

impl MeanProblem {
    pub fn new(mu_true: f64, tau: f64, alpha: f64) -> Result<Self> {
        check_finite("mu", mu_true)?;
        check_tau(tau)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(
                "alpha",
                format!("must be positive, got {alpha}"),
            ));
        }
        Ok(Self {
            mu_true,
            tau,
            alpha,
        })
    }
}

/// Signed gaps `mu_hat - mu`: entry 0 is the gap before any round
/// (`-mu`), entry `t` the gap after `t` rounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasTrace {
    pub biases: Vec<f64>,
}

impl BiasTrace {
    /// Rounds needed to bring `|bias|` to at most `alpha`, if reached.
    pub fn rounds_to_accuracy(&self, alpha: f64) -> Option<usize> {
        self.biases.iter().position(|b| b.abs() <= alpha)
    }

    pub fn final_bias(&self) -> f64 {
        *self
            .biases
            .last()
            .expect("trace always holds the initial bias")
    }
}

/// `E[C_tau(Z + m)]` for `Z ~ N(0, 1)`, in closed form.
pub fn expected_clipped_mean(m: f64, tau: f64) -> Result<f64> {
    check_finite("m", m)?;
    check_tau(tau)?;
    let upper = tau - m;
    let lower = -tau - m;
    let below = normal_cdf(lower);
    // 1 - Phi(upper), computed without cancellation.
    let above = normal_cdf(-upper);
    let inside = normal_cdf(upper) - below;
    Ok(-tau * below + tau * above + m * inside - (normal_pdf(upper) - normal_pdf(lower)))
}

/// Runs the infinite-sample recursion from `mu_hat = 0` for `rounds` rounds.
pub fn mean_boosting_trace(problem: &MeanProblem, rounds: usize) -> Result<BiasTrace> {
    let mut mu_hat = 0.0;
    let mut biases = Vec::with_capacity(rounds + 1);
    biases.push(mu_hat - problem.mu_true);
    for _ in 0..rounds {
        mu_hat += expected_clipped_mean(problem.mu_true - mu_hat, problem.tau)?;
        biases.push(mu_hat - problem.mu_true);
    }
    Ok(BiasTrace { biases })
}

/// Contraction factor for `|bias| <= tau`: `3/2 - Phi(tau)`.
pub fn small_bias_factor(tau: f64) -> f64 {
    1.5 - normal_cdf(tau)
}

/// Guaranteed decrease per round for `|bias| > tau`: `(Phi(2 tau) - 1/2) tau`.
pub fn large_bias_step(tau: f64) -> f64 {
    (normal_cdf(2.0 * tau) - 0.5) * tau
}

/// Rounds sufficient for `|bias| <= alpha`:
/// `max(0, |mu| - tau) / ((Phi(2 tau) - 1/2) tau) + log_{1/(3/2 - Phi(tau))}(tau / alpha)`,
/// clamped at zero when `alpha >= tau` makes the log term negative.
pub fn rounds_bound(mu: f64, tau: f64, alpha: f64) -> Result<f64> {
    let problem = MeanProblem::new(mu, tau, alpha)?;
    let approach = (problem.mu_true.abs() - tau).max(0.0) / large_bias_step(tau);
    let geometric = (tau / alpha).ln() / (1.0 / small_bias_factor(tau)).ln();
    Ok((approach + geometric).max(0.0))
}

/// Lower bound on `|bias|` after a single round:
/// `(|mu| / 2) (Phi(tau + 2|mu|) - Phi(-tau))`.
pub fn one_round_bias_lower_bound(mu: f64, tau: f64) -> Result<f64> {
    check_finite("mu", mu)?;
    check_tau(tau)?;
    let m = mu.abs();
    Ok(0.5 * m * (normal_cdf(tau + 2.0 * m) - normal_cdf(-tau)))
}

/// Data-generating distribution for the finite-sample simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SampleDistribution {
    PointMass { mu: f64 },
    Uniform { mu: f64, sigma: f64 },
}

impl SampleDistribution {
    fn extent(&self) -> f64 {
        match *self {
            SampleDistribution::PointMass { mu } => mu.abs(),
            SampleDistribution::Uniform { mu, sigma } => mu.abs() + sigma,
        }
    }
}

/// Parameters of [`finite_sample_mean_mse`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteSampleConfig {
    pub distribution: SampleDistribution,
    /// Known support bound `B`.
    pub bound: f64,
    pub n: usize,
    /// zCDP parameter, `rho = mu^2` in GDP terms.
    pub rho: f64,
    pub tau_schedule: Vec<f64>,
    pub trials: usize,
}

/// Monte-Carlo mean squared error with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseEstimate {
    pub mse: f64,
    pub std_err: f64,
}

/// Noise standard deviations `(count, [round_1, ...])` for an even split of
/// `rho` over the count release and one clipped-sum release per round.
/// A release with sensitivity `d` at zCDP `r` gets `sigma^2 = d^2 / (2 r)`.
pub fn release_noise_scales(rho: f64, tau_schedule: &[f64]) -> (f64, Vec<f64>) {
    let releases = (tau_schedule.len() + 1) as f64;
    let per_release = rho / releases;
    let sd = |sensitivity: f64| sensitivity / (2.0 * per_release).sqrt();
    (sd(1.0), tau_schedule.iter().map(|&t| sd(t)).collect())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Estimates `E[(mu_hat_T - y_bar)^2]` for private boosted mean estimation.
///
/// Each trial draws `n` samples, releases the count once with noise `Z_1`,
/// then for round `t` releases `sum_i C_{tau_t}(Y_i - mu_hat)` plus noise and
/// updates `mu_hat += release / max(1, n + Z_1)`. Trials run in parallel on
/// per-trial noise streams and are reduced in trial order.
pub fn finite_sample_mean_mse(
    config: &FiniteSampleConfig,
    noise: &NoiseDraw,
) -> Result<MseEstimate> {
    if config.tau_schedule.is_empty() {
        return Err(Error::invalid("tau_schedule", "needs at least one round"));
    }
    for &t in &config.tau_schedule {
        check_tau(t)?;
    }
    if config.n == 0 || config.trials == 0 {
        return Err(Error::invalid(
            "n",
            "sample size and trial count must be positive",
        ));
    }
    if !(config.rho.is_finite() && config.rho > 0.0 && config.rho < config.n as f64) {
        return Err(Error::invalid(
            "rho",
            format!("need 0 < rho < n, got {}", config.rho),
        ));
    }
    if !(config.bound.is_finite() && config.distribution.extent() <= config.bound) {
        return Err(Error::invalid(
            "bound",
            format!("support exceeds [-{0}, {0}]", config.bound),
        ));
    }
    let (count_sd, round_sd) = release_noise_scales(config.rho, &config.tau_schedule);
    let n = config.n;
    let errors: Vec<f64> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<f64> {
            let stream = noise.child(format!("trial/{trial}"));
            let samples: Option<Vec<f64>> = match config.distribution {
                SampleDistribution::PointMass { .. } => None,
                SampleDistribution::Uniform { mu, sigma } => {
                    let mut rng = stream.child("data").rng();
                    Some(
                        (0..n)
                            .map(|_| mu + sigma * (2.0 * rng.random::<f64>() - 1.0))
                            .collect(),
                    )
                }
            };
            let y_bar = match (&samples, config.distribution) {
                (Some(s), _) => compensated_sum(s.iter().copied()) / n as f64,
                (None, SampleDistribution::PointMass { mu }) => mu,
                (None, _) => unreachable!("only the point mass skips sampling"),
            };
            let z = stream
                .child("noise")
                .standard_normals(config.tau_schedule.len() + 1);
            let denom = (n as f64 + count_sd * z[0]).max(1.0);
            let mut mu_hat = 0.0;
            for (round, &tau) in config.tau_schedule.iter().enumerate() {
                let clipped_sum = match (&samples, config.distribution) {
                    (Some(s), _) => {
                        let mut acc = Vec::with_capacity(n);
                        for &y in s {
                            acc.push(clip_scalar(y - mu_hat, tau)?);
                        }
                        compensated_sum(acc)
                    }
                    (None, SampleDistribution::PointMass { mu }) => {
                        n as f64 * clip_scalar(mu - mu_hat, tau)?
                    }
                    (None, _) => unreachable!(),
                };
                mu_hat += (clipped_sum + round_sd[round] * z[round + 1]) / denom;
            }
            Ok((mu_hat - y_bar).powi(2))
        })
        .collect::<Result<_>>()?;
    let trials = errors.len() as f64;
    let mse = compensated_sum(errors.iter().copied()) / trials;
    let var = compensated_sum(errors.iter().map(|e| (e - mse).powi(2))) / (trials - 1.0).max(1.0);
    Ok(MseEstimate {
        mse,
        std_err: (var / trials).sqrt(),
    })
}

/// Second-round threshold for the two-stage schedule:
/// `max(B / (n sqrt(rho)), sigma) * sqrt(c log n)`.
pub fn two_stage_tau(bound: f64, n: usize, rho: f64, sigma: f64, c: f64) -> f64 {
    (bound / (n as f64 * rho.sqrt())).max(sigma) * (c * (n as f64).ln()).sqrt()
}

/// Default `c` in [`two_stage_tau`].
pub const TWO_STAGE_LOG_MULTIPLIER: f64 = 4.0;

/// Iterates `mu_hat <- mu_hat + mean_i C_tau(Y_i - mu_hat)` from zero until the
/// update is at most `tol`.
pub fn huber_fixed_point(samples: &[f64], tau: f64, max_iter: usize, tol: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("samples", "need at least one sample"));
    }
    check_tau(tau)?;
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::invalid(
            "tol",
            format!("must be positive, got {tol}"),
        ));
    }
    let n = samples.len() as f64;
    let mut mu_hat = 0.0;
    let mut update = f64::INFINITY;
    for _ in 0..max_iter {
        let mut parts = Vec::with_capacity(samples.len());
        for &y in samples {
            parts.push(clip_scalar(y - mu_hat, tau)?);
        }
        update = compensated_sum(parts) / n;
        mu_hat += update;
        if update.abs() <= tol {
            return Ok(mu_hat);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_update: update,
    })
}

/// `sum_i H_tau(mu - Y_i)` with `H_tau(r) = r^2/2` for `|r| <= tau`, else
/// `tau |r| - tau^2 / 2`.
pub fn huber_objective(samples: &[f64], tau: f64, mu: f64) -> Result<f64> {
    check_tau(tau)?;
    check_finite("mu", mu)?;
    Ok(samples
        .iter()
        .map(|&y| {
            let r = (mu - y).abs();
            if r <= tau {
                0.5 * r * r
            } else {
                tau * r - 0.5 * tau * tau
            }
        })
        .sum())
}

/// Sample median; the midpoint of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Inliers on `[mu - sigma, mu + sigma]` plus `outlier_count` copies of an
/// outlier value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContaminatedSample {
    pub inlier_values: Vec<f64>,
    pub outlier_value: f64,
    pub outlier_count: usize,
}

impl ContaminatedSample {
    pub fn generate(
        n: usize,
        outlier_count: usize,
        mu: f64,
        sigma: f64,
        outlier_value: f64,
        noise: &NoiseDraw,
    ) -> Result<Self> {
        if outlier_count >= n {
            return Err(Error::invalid(
                "outlier_count",
                format!("{outlier_count} outliers leave no inliers among {n}"),
            ));
        }
        let mut rng = noise.rng();
        let inlier_values = (0..n - outlier_count)
            .map(|_| mu + sigma * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Ok(Self {
            inlier_values,
            outlier_value,
            outlier_count,
        })
    }

    pub fn n(&self) -> usize {
        self.inlier_values.len() + self.outlier_count
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = self.inlier_values.clone();
        v.extend(std::iter::repeat_n(self.outlier_value, self.outlier_count));
        v
    }
}

/// One row of the theory report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClaimCheck {
    pub claim: String,
    pub grid_point: String,
    pub bound: f64,
    pub observed: f64,
    pub pass: bool,
}

/// Grid of true means used by the recursion checks.
pub const MU_GRID: [f64; 12] = [
    -10.0, -5.0, -2.0, -1.0, -0.5, -0.1, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0,
];
/// Grid of clipping thresholds used by the recursion checks.
pub const TAU_GRID: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
/// Slack allowed on every inequality check.
pub const CLAIM_SLACK: f64 = 1e-9;

/// Trace length long enough to drive the recursion well below `1e-8`.
pub fn grid_trace_length(mu: f64, tau: f64) -> usize {
    let bound = rounds_bound(mu, tau, 1e-8).unwrap_or(0.0);
    (bound.ceil() as usize + 5).max(50)
}

/// Per-round contraction checks: the small-bias factor whenever
/// `|bias| <= tau`, and the large-bias step otherwise.
pub fn contraction_checks(mu: f64, tau: f64) -> Result<Vec<ClaimCheck>> {
    let trace = mean_boosting_trace(&MeanProblem::new(mu, tau, 1.0)?, grid_trace_length(mu, tau))?;
    let mut out = Vec::new();
    for (t, pair) in trace.biases.windows(2).enumerate() {
        let (now, next) = (pair[0].abs(), pair[1].abs());
        let (claim, bound) = if now <= tau {
            ("contraction_small_bias", small_bias_factor(tau) * now)
        } else {
            ("contraction_large_bias", now - large_bias_step(tau))
        };
        out.push(ClaimCheck {
            claim: claim.into(),
            grid_point: format!("mu={mu},tau={tau},t={t}"),
            bound,
            observed: next,
            pass: next <= bound + CLAIM_SLACK,
        });
    }
    Ok(out)
}

/// Round-bound check: rounds actually needed versus `ceil(rounds_bound)`.
pub fn round_bound_check(mu: f64, tau: f64, alpha: f64) -> Result<ClaimCheck> {
    let bound = rounds_bound(mu, tau, alpha)?;
    let budget = bound.ceil() as usize;
    let trace = mean_boosting_trace(&MeanProblem::new(mu, tau, alpha)?, budget)?;
    let needed = trace.rounds_to_accuracy(alpha);
    Ok(ClaimCheck {
        claim: "round_bound".into(),
        grid_point: format!("mu={mu},tau={tau},alpha={alpha}"),
        bound: budget as f64,
        observed: needed.map_or(f64::INFINITY, |r| r as f64),
        pass: needed.is_some(),
    })
}

/// One-round bias check: `|mu_hat_1 - mu|` against
/// [`one_round_bias_lower_bound`].
///
/// This does not hold everywhere: at `mu = tau = 1` the bias left after one
/// round is 0.3905 while the bound is 0.4200. See [`first_round_update_check`]
/// for the inequality the bound does satisfy.
pub fn one_round_check(mu: f64, tau: f64) -> Result<ClaimCheck> {
    let trace = mean_boosting_trace(&MeanProblem::new(mu, tau, 1.0)?, 1)?;
    let observed = trace.biases[1].abs();
    let bound = one_round_bias_lower_bound(mu, tau)?;
    Ok(ClaimCheck {
        claim: "one_round_lower_bound".into(),
        grid_point: format!("mu={mu},tau={tau}"),
        bound,
        observed,
        pass: observed >= bound - CLAIM_SLACK,
    })
}

/// The size of the first update, `|mu_hat_1|`, is at least
/// [`one_round_bias_lower_bound`] whenever `|mu| <= tau` (no mass is clipped
/// on the near side of the mean). `None` outside that regime.
pub fn first_round_update_check(mu: f64, tau: f64) -> Result<Option<ClaimCheck>> {
    if mu.abs() > tau {
        return Ok(None);
    }
    let trace = mean_boosting_trace(&MeanProblem::new(mu, tau, 1.0)?, 1)?;
    let observed = (trace.biases[1] - trace.biases[0]).abs();
    let bound = one_round_bias_lower_bound(mu, tau)?;
    Ok(Some(ClaimCheck {
        claim: "first_round_update_lower_bound".into(),
        grid_point: format!("mu={mu},tau={tau}"),
        bound,
        observed,
        pass: observed >= bound - CLAIM_SLACK,
    }))
}

/// Options for [`run_theory_suite`].
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub alphas: Vec<f64>,
    pub finite_sample_trials: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.01],
            finite_sample_trials: 10_000,
            seed: 0,
        }
    }
}

/// The MSE ratio between a two-stage schedule and a single clip at `tau = 1`,
/// for a point mass at the support bound `B = 10`, `n = 10^4`, `rho = 1`.
pub fn separation_check(trials: usize, noise: &NoiseDraw) -> Result<ClaimCheck> {
    let (bound, n, rho) = (10.0, 10_000, 1.0);
    let base = FiniteSampleConfig {
        distribution: SampleDistribution::PointMass { mu: bound },
        bound,
        n,
        rho,
        tau_schedule: vec![1.0],
        trials,
    };
    let one = finite_sample_mean_mse(&base, &noise.child("single"))?;
    let two_stage = FiniteSampleConfig {
        tau_schedule: vec![
            bound,
            two_stage_tau(bound, n, rho, 0.0, TWO_STAGE_LOG_MULTIPLIER),
        ],
        ..base
    };
    let two = finite_sample_mean_mse(&two_stage, &noise.child("two_stage"))?;
    let ratio = two.mse / one.mse;
    Ok(ClaimCheck {
        claim: "finite_sample_separation".into(),
        grid_point: format!("B={bound},n={n},rho={rho},trials={trials}"),
        bound: 0.5,
        observed: ratio,
        pass: ratio < 0.5,
    })
}

/// Huber fixed point on `{0, 0, 10}` at `tau = 1`, whose exact minimizer is 0.5.
pub fn huber_hand_check() -> Result<ClaimCheck> {
    let got = huber_fixed_point(&[0.0, 0.0, 10.0], 1.0, 10_000, 1e-12)?;
    Ok(ClaimCheck {
        claim: "huber_fixed_point".into(),
        grid_point: "samples={0,0,10},tau=1".into(),
        bound: 0.5,
        observed: got,
        pass: (got - 0.5).abs() <= 1e-6,
    })
}

/// Every check above over the standard grids.
pub fn run_theory_suite(options: &SuiteOptions) -> Result<Vec<ClaimCheck>> {
    let mut out = Vec::new();
    for &tau in &TAU_GRID {
        for &mu in &MU_GRID {
            out.extend(contraction_checks(mu, tau)?);
            for &alpha in &options.alphas {
                out.push(round_bound_check(mu, tau, alpha)?);
            }
            out.push(one_round_check(mu, tau)?);
            out.extend(first_round_update_check(mu, tau)?);
        }
    }
    if options.finite_sample_trials > 0 {
        out.push(separation_check(
            options.finite_sample_trials,
            &NoiseDraw::new(options.seed, "theory"),
        )?);
    }
    out.push(huber_hand_check()?);
    Ok(out)
}
