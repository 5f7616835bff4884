//! Gaussian differential privacy accounting.
//!
//! A mechanism is `mu`-GDP when distinguishing it on neighbouring datasets is no
//! easier than telling `N(0, 1)` from `N(mu, 1)`. GDP composes in quadrature and
//! converts exactly to a curve of `(epsilon, delta)` guarantees, which is how the
//! learners in this crate are calibrated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower end of the bracket searched by [`mu_for_epsilon_delta`].
pub const MU_SEARCH_MIN: f64 = 1e-10;
/// Upper end of the bracket searched by [`mu_for_epsilon_delta`].
pub const MU_SEARCH_MAX: f64 = 100.0;
/// Absolute tolerance on `delta` accepted from the root finder.
pub const DELTA_TOLERANCE: f64 = 1e-9;

/// Negative `delta` values smaller than this in magnitude are rounding noise
/// from the difference of two CDF terms and are clamped to zero.
const CANCELLATION_SLACK: f64 = 1e-12;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(
            "p",
            format!("quantile level must be in (0,1), got {p}"),
        ));
    }
    // Acklam's rational approximation (relative error ~1e-9), then Newton
    // steps against the erfc-based CDF.
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..3 {
        let density = normal_pdf(x);
        if density == 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / density;
    }
    Ok(x)
}

fn check_finite(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite, got {value}")))
    }
}

/// The `delta` at which a `mu`-GDP mechanism is `(epsilon, delta)`-DP:
/// `Phi(-eps/mu + mu/2) - e^eps * Phi(-eps/mu - mu/2)`.
pub fn delta_for_mu(mu: f64, epsilon: f64) -> Result<f64> {
    check_finite("mu", mu)?;
    check_finite("epsilon", epsilon)?;
    if mu <= 0.0 {
        return Err(Error::invalid("mu", format!("must be positive, got {mu}")));
    }
    if epsilon < 0.0 {
        return Err(Error::invalid(
            "epsilon",
            format!("must be nonnegative, got {epsilon}"),
        ));
    }
    let ratio = epsilon / mu;
    let upper = normal_cdf(-ratio + mu / 2.0);
    let lower = normal_cdf(-ratio - mu / 2.0);
    // e^eps can overflow for huge epsilon while the CDF term underflows; the
    // product is then zero.
    let scaled = if lower == 0.0 {
        0.0
    } else {
        epsilon.exp() * lower
    };
    let delta = upper - scaled;
    if delta < -CANCELLATION_SLACK {
        return Err(Error::Numerical(format!(
            "delta_for_mu({mu}, {epsilon}) evaluated to {delta}; normal CDF is inaccurate here"
        )));
    }
    Ok(delta.clamp(0.0, 1.0))
}

/// Smallest-noise `mu` whose GDP guarantee implies `(epsilon, delta)`-DP.
///
/// `delta_for_mu` is strictly increasing in `mu`, so bisection on
/// `[MU_SEARCH_MIN, MU_SEARCH_MAX]` is safe. The search runs until the bracket
/// stops shrinking, then checks the result against [`DELTA_TOLERANCE`].
pub fn mu_for_epsilon_delta(epsilon: f64, delta: f64) -> Result<f64> {
    check_finite("epsilon", epsilon)?;
    check_finite("delta", delta)?;
    if epsilon <= 0.0 {
        return Err(Error::invalid(
            "epsilon",
            format!("must be positive, got {epsilon}"),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(
            "delta",
            format!("must be in (0,1), got {delta}"),
        ));
    }
    let mut lo = MU_SEARCH_MIN;
    let mut hi = MU_SEARCH_MAX;
    let delta_lo = delta_for_mu(lo, epsilon)?;
    let delta_hi = delta_for_mu(hi, epsilon)?;
    if delta_lo > delta || delta_hi < delta {
        return Err(Error::Bracket {
            epsilon,
            delta,
            low: delta_lo,
            high: delta_hi,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if delta_for_mu(mid, epsilon)? < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // hi always satisfies delta_for_mu(hi) >= delta; lo never exceeds the target.
    // Pick whichever endpoint lands closer.
    let err_lo = (delta_for_mu(lo, epsilon)? - delta).abs();
    let err_hi = (delta_for_mu(hi, epsilon)? - delta).abs();
    let (mu, err) = if err_lo <= err_hi {
        (lo, err_lo)
    } else {
        (hi, err_hi)
    };
    if err > DELTA_TOLERANCE {
        return Err(Error::Numerical(format!(
            "bisection for epsilon={epsilon}, delta={delta} stalled at mu={mu} with delta error {err}"
        )));
    }
    Ok(mu)
}

/// Composition of GDP mechanisms: `sqrt(sum mu_i^2)`.
pub fn compose(mus: &[f64]) -> Result<f64> {
    for &mu in mus {
        check_finite("mu", mu)?;
        if mu < 0.0 {
            return Err(Error::invalid(
                "mu",
                format!("composed budgets must be nonnegative, got {mu}"),
            ));
        }
    }
    // Scale by the largest entry so huge budgets (used for near-noiseless runs)
    // do not overflow when squared.
    let scale = mus.iter().copied().fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = mus.iter().map(|m| (m / scale).powi(2)).sum();
    Ok(scale * sum.sqrt())
}

/// Ratio weights `a:b:c` for the three AdaSSP releases: the Gram matrix, the
/// cross term and the ridge parameter, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub gram: f64,
    pub cross: f64,
    pub lambda: f64,
}

impl SplitRatio {
    pub fn new(gram: f64, cross: f64, lambda: f64) -> Result<Self> {
        for (name, w) in [("a", gram), ("b", cross), ("c", lambda)] {
            check_finite(name, w)?;
            if w < 0.0 {
                return Err(Error::invalid(
                    name,
                    format!("split weight must be nonnegative, got {w}"),
                ));
            }
        }
        if gram + cross + lambda <= 0.0 {
            return Err(Error::invalid(
                "split",
                "at least one split weight must be positive",
            ));
        }
        Ok(Self {
            gram,
            cross,
            lambda,
        })
    }

    pub fn even() -> Self {
        Self {
            gram: 1.0,
            cross: 1.0,
            lambda: 1.0,
        }
    }
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self::even()
    }
}

/// A total GDP budget split across the three releases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSplit {
    pub ratio: SplitRatio,
    pub mu_gram: f64,
    pub mu_cross: f64,
    pub mu_lambda: f64,
}

impl BudgetSplit {
    pub fn as_array(&self) -> [f64; 3] {
        [self.mu_gram, self.mu_cross, self.mu_lambda]
    }
}

/// Splits `mu_total` so that `mu1:mu2:mu3 = a:b:c` and the three compose back
/// to `mu_total`.
pub fn split_budget(mu_total: f64, a: f64, b: f64, c: f64) -> Result<BudgetSplit> {
    check_finite("mu_total", mu_total)?;
    if mu_total <= 0.0 {
        return Err(Error::invalid(
            "mu_total",
            format!("must be positive, got {mu_total}"),
        ));
    }
    let ratio = SplitRatio::new(a, b, c)?;
    let norm = compose(&[a, b, c])?;
    Ok(BudgetSplit {
        ratio,
        mu_gram: mu_total * a / norm,
        mu_cross: mu_total * b / norm,
        mu_lambda: mu_total * c / norm,
    })
}

/// Per-round budget when `mu_cross` is spread evenly over `rounds` releases.
pub fn per_round_budget(mu_cross: f64, rounds: usize) -> Result<f64> {
    check_finite("mu2", mu_cross)?;
    if mu_cross < 0.0 {
        return Err(Error::invalid(
            "mu2",
            format!("must be nonnegative, got {mu_cross}"),
        ));
    }
    if rounds == 0 {
        return Err(Error::invalid("rounds", "must be at least 1"));
    }
    Ok(mu_cross / (rounds as f64).sqrt())
}

/// A privacy target. Always carries the total GDP parameter; carries the
/// `(epsilon, delta)` pair it was derived from when built that way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    mu_total: f64,
    target: Option<(f64, f64)>,
}

impl PrivacyBudget {
    pub fn from_epsilon_delta(epsilon: f64, delta: f64) -> Result<Self> {
        let mu_total = mu_for_epsilon_delta(epsilon, delta)?;
        Ok(Self {
            mu_total,
            target: Some((epsilon, delta)),
        })
    }

    /// A budget stated directly in GDP terms. Used for ablations, including the
    /// near-noiseless limit, where no meaningful `(epsilon, delta)` exists.
    pub fn from_mu(mu_total: f64) -> Result<Self> {
        check_finite("mu_total", mu_total)?;
        if mu_total <= 0.0 {
            return Err(Error::invalid(
                "mu_total",
                format!("must be positive, got {mu_total}"),
            ));
        }
        Ok(Self {
            mu_total,
            target: None,
        })
    }

    pub fn mu_total(&self) -> f64 {
        self.mu_total
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.target.map(|(e, _)| e)
    }

    pub fn delta(&self) -> Option<f64> {
        self.target.map(|(_, d)| d)
    }

    pub fn split(&self, ratio: SplitRatio) -> Result<BudgetSplit> {
        split_budget(self.mu_total, ratio.gram, ratio.cross, ratio.lambda)
    }
}

/// Record of every private release made by a fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrivacyLedger {
    entries: Vec<(String, f64)>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: impl Into<String>, mu: f64) {
        self.entries.push((label.into(), mu));
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn total(&self) -> Result<f64> {
        let mus: Vec<f64> = self.entries.iter().map(|(_, m)| *m).collect();
        compose(&mus)
    }
}
