//! BoostedAdaSSP: gradient boosting with AdaSSP as the weak learner.
//!
//! The Gram matrix and ridge parameter are released once and their solver is
//! reused every round. Each round releases only `X^T g_t` for the clipped
//! residuals `g_t`, at budget `mu_cross / sqrt(T)`, so the whole run composes
//! to the same total as a single AdaSSP fit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mechanisms::{clip_scalar, clip_vector_l2, gaussian_mechanism_vector, NoiseDraw};
use crate::privacy::{per_round_budget, PrivacyBudget, PrivacyLedger, SplitRatio};
use crate::regression::{
    check_ledger, compute_cross, cross_stream, EncodedDataset, LambdaRule, LinearModel, PrivateFit,
    Sensitivities, SufficientStats, DEFAULT_DELTA,
};

/// Hyperparameters of a boosted fit. The learning rate is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostConfig {
    pub rounds: usize,
    /// Residual clipping threshold.
    pub tau: f64,
    /// Feature-row norm bound.
    pub x_clip: f64,
    pub split: SplitRatio,
    pub lambda_rule: LambdaRule,
}

impl BoostConfig {
    pub fn new(rounds: usize, tau: f64) -> Result<Self> {
        let config = Self {
            rounds,
            tau,
            x_clip: 1.0,
            split: SplitRatio::even(),
            lambda_rule: LambdaRule::Adaptive,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be at least 1"));
        }
        for (name, v) in [("tau", self.tau), ("x_clip", self.x_clip)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("must be positive and finite, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Model state between rounds.
#[derive(Debug, Clone)]
pub struct BoostState {
    pub theta: DVector<f64>,
    pub round_index: usize,
}

/// What a single round released and added to the model.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub cross_hat: DVector<f64>,
    pub theta_step: DVector<f64>,
    pub theta_after: DVector<f64>,
}

/// A boosted fit with its per-round history.
#[derive(Debug, Clone)]
pub struct BoostedFit {
    pub fit: PrivateFit,
    pub rounds: Vec<RoundRecord>,
}

impl BoostedFit {
    pub fn model(&self) -> &LinearModel {
        &self.fit.model
    }
}

/// `y - X theta`.
pub fn residuals(y: &DVector<f64>, x: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(y - predict(x, theta)?)
}

/// `X theta`.
pub fn predict(x: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    if x.ncols() != theta.len() {
        return Err(Error::Dimension(format!(
            "X has {} columns but theta has length {}",
            x.ncols(),
            theta.len()
        )));
    }
    Ok(x * theta)
}

fn clip_rows(x: &DMatrix<f64>, bound: f64) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for (i, row) in x.row_iter().enumerate() {
        let clipped = clip_vector_l2(&row.iter().copied().collect::<Vec<_>>(), bound)?;
        for (j, v) in clipped.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

pub fn boosted_adassp_fit(
    data: &EncodedDataset,
    budget: &PrivacyBudget,
    config: &BoostConfig,
    noise: &NoiseDraw,
) -> Result<BoostedFit> {
    config.validate()?;
    let split = budget.split(config.split)?;
    if split.mu_cross <= 0.0 {
        return Err(Error::invalid(
            "split",
            "the cross-term releases need a positive share of the budget",
        ));
    }
    let x = clip_rows(data.x(), config.x_clip)?;
    let delta = budget.delta().unwrap_or(DEFAULT_DELTA);
    let mut ledger = PrivacyLedger::new();
    let stats = SufficientStats::release(
        &x,
        config.x_clip,
        &split,
        config.lambda_rule,
        delta,
        noise,
        &mut ledger,
    )?;

    let sensitivities = Sensitivities {
        gram: config.x_clip * config.x_clip,
        cross: config.x_clip * config.tau,
        lambda: config.x_clip * config.x_clip,
    };
    let mu_round = per_round_budget(split.mu_cross, config.rounds)?;
    let mut state = BoostState {
        theta: DVector::zeros(data.p()),
        round_index: 0,
    };
    let mut history = Vec::with_capacity(config.rounds);
    while state.round_index < config.rounds {
        let t = state.round_index;
        let raw = residuals(data.y(), &x, &state.theta)?;
        let mut clipped = raw;
        for g in clipped.iter_mut() {
            *g = clip_scalar(*g, config.tau)?;
        }
        let cross = compute_cross(&x, &clipped)?;
        let cross_hat = gaussian_mechanism_vector(
            &cross,
            sensitivities.cross,
            mu_round,
            &cross_stream(noise, t),
        )?;
        ledger.record(format!("cross/{t}"), mu_round);
        check_ledger(&ledger, budget)?;
        let step = stats.solve(&cross_hat)?;
        state.theta += &step;
        state.round_index += 1;
        history.push(RoundRecord {
            cross_hat,
            theta_step: step,
            theta_after: state.theta.clone(),
        });
    }
    let model = LinearModel::new(state.theta)?;
    Ok(BoostedFit {
        fit: PrivateFit {
            model,
            stats,
            ledger,
            sensitivities,
        },
        rounds: history,
    })
}
