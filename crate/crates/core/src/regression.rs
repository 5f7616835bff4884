//! Sufficient statistics, ridge solves and single-shot AdaSSP.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mechanisms::{
    check_symmetric, gaussian_mechanism_scalar, gaussian_mechanism_symmetric,
    gaussian_mechanism_vector, NoiseDraw,
};
use crate::privacy::{normal_quantile, BudgetSplit, PrivacyBudget, PrivacyLedger, SplitRatio};

/// Failure probability used by the adaptive ridge rule when the budget was
/// given directly in GDP terms and carries no `delta`.
pub const DEFAULT_DELTA: f64 = 1e-6;

/// Relative slack on row norms and label magnitudes when checking bounds.
const BOUND_SLACK: f64 = 1e-12;

/// Design matrix, labels and the norm bounds they are guaranteed to satisfy.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    x_bound: f64,
    y_bound: f64,
    feature_names: Vec<String>,
}

impl EncodedDataset {
    /// Validates shapes, finiteness and that every row and label lies within
    /// the stated bounds.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, x_bound: f64, y_bound: f64) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, y, x_bound, y_bound, names)
    }

    pub fn with_names(
        x: DMatrix<f64>,
        y: DVector<f64>,
        x_bound: f64,
        y_bound: f64,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "need n >= 1 and p >= 1, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if y.len() != x.nrows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                y.len(),
                x.nrows()
            )));
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "{} names for {} columns",
                feature_names.len(),
                x.ncols()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("data", "non-finite entry"));
        }
        for (name, b) in [("x_bound", x_bound), ("y_bound", y_bound)] {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("must be positive and finite, got {b}"),
                ));
            }
        }
        for (i, row) in x.row_iter().enumerate() {
            let norm = row.norm();
            if norm > x_bound * (1.0 + BOUND_SLACK) {
                return Err(Error::invalid(
                    "x",
                    format!("row {i} has norm {norm} > x_bound {x_bound}"),
                ));
            }
        }
        if let Some((i, v)) = y
            .iter()
            .enumerate()
            .find(|(_, v)| v.abs() > y_bound * (1.0 + BOUND_SLACK))
        {
            return Err(Error::invalid(
                "y",
                format!("label {i} = {v} exceeds y_bound {y_bound}"),
            ));
        }
        Ok(Self {
            x,
            y,
            x_bound,
            y_bound,
            feature_names,
        })
    }

    /// Uses the observed maxima as bounds. Those bounds are data dependent and
    /// carry no privacy meaning until [`crate::data::preprocess`] replaces them.
    pub fn from_observed(
        x: DMatrix<f64>,
        y: DVector<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let x_bound = x
            .row_iter()
            .map(|r| r.norm())
            .fold(f64::MIN_POSITIVE, f64::max);
        let y_bound = y.iter().map(|v| v.abs()).fold(f64::MIN_POSITIVE, f64::max);
        Self::with_names(x, y, x_bound, y_bound, feature_names)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x_bound(&self) -> f64 {
        self.x_bound
    }

    pub fn y_bound(&self) -> f64 {
        self.y_bound
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(indices.iter());
        let y = self.y.select_rows(indices.iter());
        Self::with_names(x, y, self.x_bound, self.y_bound, self.feature_names.clone())
    }
}

/// Coefficient vector of a homogeneous linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub theta: DVector<f64>,
}

impl LinearModel {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "model has non-finite coefficients: {theta}"
            )));
        }
        Ok(Self { theta })
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            theta: DVector::zeros(p),
        }
    }
}

/// `X^T X`, symmetrized after accumulation.
pub fn compute_gram(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Dimension("empty design matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x", "non-finite entry"));
    }
    let g = x.tr_mul(x);
    Ok((&g + g.transpose()) * 0.5)
}

/// `X^T v`.
pub fn compute_cross(x: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != v.len() {
        return Err(Error::Dimension(format!(
            "X has {} rows but vector has length {}",
            x.nrows(),
            v.len()
        )));
    }
    Ok(x.tr_mul(v))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m, 1e-12)?;
    let eig = SymmetricEigen::new(m.clone());
    Ok(eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

/// Cholesky factor of `gram + lambda * I`, checked for conditioning.
fn factor_ridge(gram: &DMatrix<f64>, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(
            "lambda",
            format!("must be nonnegative, got {lambda}"),
        ));
    }
    let p = gram.nrows();
    let system = gram + DMatrix::identity(p, p) * lambda;
    let scale = (system.trace().abs() / p as f64).max(f64::MIN_POSITIVE);
    let smallest = min_eigenvalue(&system)?;
    if smallest < 1e-10 * scale {
        return Err(Error::Singular(format!(
            "smallest eigenvalue {smallest:e} of gram + {lambda} I is below 1e-10 x {scale:e}"
        )));
    }
    Cholesky::new(system).ok_or_else(|| Error::Singular("Cholesky factorization failed".into()))
}

/// Solves `(gram + lambda I) theta = cross` by Cholesky.
pub fn ridge_solve(gram: &DMatrix<f64>, lambda: f64, cross: &DVector<f64>) -> Result<LinearModel> {
    if gram.nrows() != cross.len() {
        return Err(Error::Dimension(format!(
            "gram is {}x{}, cross has length {}",
            gram.nrows(),
            gram.ncols(),
            cross.len()
        )));
    }
    let chol = factor_ridge(gram, lambda)?;
    LinearModel::new(chol.solve(cross))
}

/// How the ridge parameter added to the released Gram matrix is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LambdaRule {
    /// `max(0, target - max(0, lambda_hat))` with
    /// `target = x_bound^2 sqrt(p) z_{1-delta/6} / mu_gram`: just enough
    /// regularization to dominate the Gram noise with high probability.
    #[default]
    Adaptive,
    /// `max(0, lambda_hat)`: the released minimum eigenvalue used as is.
    Strict,
    /// A fixed, data-independent value. Zero recovers plain least squares in
    /// the noiseless limit.
    Fixed(f64),
}

impl LambdaRule {
    fn resolve(
        self,
        lambda_hat: f64,
        x_bound: f64,
        p: usize,
        mu_gram: f64,
        delta: f64,
    ) -> Result<f64> {
        match self {
            LambdaRule::Adaptive => {
                let z = normal_quantile(1.0 - delta / 6.0)?;
                let target = x_bound * x_bound * (p as f64).sqrt() * z / mu_gram;
                Ok((target - lambda_hat.max(0.0)).max(0.0))
            }
            LambdaRule::Strict => Ok(lambda_hat.max(0.0)),
            LambdaRule::Fixed(v) if v.is_finite() && v >= 0.0 => Ok(v),
            LambdaRule::Fixed(v) => Err(Error::invalid(
                "lambda",
                format!("fixed lambda must be nonnegative, got {v}"),
            )),
        }
    }
}

/// Sensitivities fed to the three Gaussian mechanisms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivities {
    pub gram: f64,
    pub cross: f64,
    pub lambda: f64,
}

/// Privately released Gram matrix and ridge parameter, with the factorization
/// of `gram_hat + lambda_used I` cached for repeated solves.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub gram_hat: DMatrix<f64>,
    pub lambda_hat: f64,
    pub lambda_used: f64,
    pub gamma: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl SufficientStats {
    /// Releases `X^T X` at `mu_gram` and `lambda_min(X^T X)` at `mu_lambda`,
    /// both with sensitivity `x_bound^2`. A zero `mu_lambda` skips the second
    /// release and treats `lambda_hat` as zero.
    pub fn release(
        x: &DMatrix<f64>,
        x_bound: f64,
        split: &BudgetSplit,
        rule: LambdaRule,
        delta: f64,
        noise: &NoiseDraw,
        ledger: &mut PrivacyLedger,
    ) -> Result<Self> {
        if split.mu_gram <= 0.0 {
            return Err(Error::invalid(
                "split",
                "the Gram release needs a positive share of the budget",
            ));
        }
        let sensitivity = x_bound * x_bound;
        let gram = compute_gram(x)?;
        let gram_hat =
            gaussian_mechanism_symmetric(&gram, sensitivity, split.mu_gram, &noise.child("gram"))?;
        ledger.record("gram", split.mu_gram);
        let lambda_hat = if split.mu_lambda > 0.0 {
            let exact = min_eigenvalue(&gram)?;
            let released = gaussian_mechanism_scalar(
                exact,
                sensitivity,
                split.mu_lambda,
                &noise.child("lambda"),
            )?;
            ledger.record("lambda", split.mu_lambda);
            released
        } else {
            0.0
        };
        let lambda_used = rule.resolve(lambda_hat, x_bound, x.ncols(), split.mu_gram, delta)?;
        Self::from_released(gram_hat, lambda_hat, lambda_used)
    }

    /// Builds the cached solver from already-released statistics.
    pub fn from_released(
        gram_hat: DMatrix<f64>,
        lambda_hat: f64,
        lambda_used: f64,
    ) -> Result<Self> {
        let factor = factor_ridge(&gram_hat, lambda_used)?;
        let gamma = factor.inverse();
        Ok(Self {
            gram_hat,
            lambda_hat,
            lambda_used,
            gamma,
            factor,
        })
    }

    /// `(gram_hat + lambda_used I)^{-1} cross`, via the cached factor.
    pub fn solve(&self, cross: &DVector<f64>) -> Result<DVector<f64>> {
        if cross.len() != self.gram_hat.nrows() {
            return Err(Error::Dimension(format!(
                "cross has length {}, expected {}",
                cross.len(),
                self.gram_hat.nrows()
            )));
        }
        Ok(self.factor.solve(cross))
    }
}

/// Budget split and ridge rule shared by both learners.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdasspConfig {
    pub split: SplitRatio,
    pub lambda_rule: LambdaRule,
}

/// A fitted private model plus what it cost and what it released.
#[derive(Debug, Clone)]
pub struct PrivateFit {
    pub model: LinearModel,
    pub stats: SufficientStats,
    pub ledger: PrivacyLedger,
    pub sensitivities: Sensitivities,
}

/// Single-shot AdaSSP. Labels must already be within `data.y_bound()`.
pub fn adassp_fit(
    data: &EncodedDataset,
    budget: &PrivacyBudget,
    config: &AdasspConfig,
    noise: &NoiseDraw,
) -> Result<PrivateFit> {
    let split = budget.split(config.split)?;
    if split.mu_cross <= 0.0 {
        return Err(Error::invalid(
            "split",
            "the cross-term release needs a positive share of the budget",
        ));
    }
    let delta = budget.delta().unwrap_or(DEFAULT_DELTA);
    let mut ledger = PrivacyLedger::new();
    let stats = SufficientStats::release(
        data.x(),
        data.x_bound(),
        &split,
        config.lambda_rule,
        delta,
        noise,
        &mut ledger,
    )?;
    let sensitivities = Sensitivities {
        gram: data.x_bound().powi(2),
        cross: data.x_bound() * data.y_bound(),
        lambda: data.x_bound().powi(2),
    };
    let cross = compute_cross(data.x(), data.y())?;
    let cross_hat = gaussian_mechanism_vector(
        &cross,
        sensitivities.cross,
        split.mu_cross,
        &cross_stream(noise, 0),
    )?;
    ledger.record("cross/0", split.mu_cross);
    check_ledger(&ledger, budget)?;
    let model = LinearModel::new(stats.solve(&cross_hat)?)?;
    Ok(PrivateFit {
        model,
        stats,
        ledger,
        sensitivities,
    })
}

/// Noise stream for the cross-term release of round `round` (0-based).
/// Single-shot AdaSSP uses round 0, so a one-round boosted fit replays it.
pub(crate) fn cross_stream(noise: &NoiseDraw, round: usize) -> NoiseDraw {
    noise.child(format!("cross/{round}"))
}

pub(crate) fn check_ledger(ledger: &PrivacyLedger, budget: &PrivacyBudget) -> Result<()> {
    let spent = ledger.total()?;
    let budget = budget.mu_total();
    if spent > budget * (1.0 + 1e-12) {
        return Err(Error::BudgetExceeded { spent, budget });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Gauss-Jordan inverse with partial pivoting; independent of nalgebra.
    fn brute_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, pivot);
            let d = m[col][col];
            for v in m[col].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    let pivot_row = m[col].clone();
                    for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    /// Cyclic Jacobi eigenvalues; independent of nalgebra's QR route.
    fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
        let n = a.len();
        let mut m = a.to_vec();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[i][j].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[k][p];
                        let mkq = m[k][q];
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p][k];
                        let mqk = m[q][k];
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[i][i]).collect()
    }

    fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    fn random_ball_rows(rng: &mut ChaCha8Rng, n: usize, p: usize, bound: f64) -> DMatrix<f64> {
        let mut x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        for mut row in x.row_iter_mut() {
            let norm = row.norm();
            let target = bound * rng.random_range(0.0..1.0f64);
            if norm > 0.0 {
                row *= target / norm;
            }
        }
        x
    }

    #[test]
    fn gram_examples() {
        assert_eq!(
            compute_gram(&DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2)
        );
        let row = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert_eq!(
            compute_gram(&row).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])
        );
        let two = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(
            compute_gram(&two).unwrap(),
            DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 4.0, 8.0])
        );
        assert!(compute_gram(&DMatrix::zeros(0, 2)).is_err());
        assert!(compute_gram(&DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn cross_examples() {
        let eye = DMatrix::identity(2, 2);
        assert_eq!(
            compute_cross(&eye, &DVector::from_vec(vec![1.0, 2.0]))
                .unwrap()
                .as_slice(),
            &[1.0, 2.0]
        );
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            compute_cross(&x, &DVector::zeros(3)).unwrap(),
            DVector::zeros(2)
        );
        let row = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert_eq!(
            compute_cross(&row, &DVector::from_vec(vec![3.0]))
                .unwrap()
                .as_slice(),
            &[3.0, 6.0]
        );
        assert!(compute_cross(&eye, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert!((min_eigenvalue(&DMatrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((min_eigenvalue(&d).unwrap() - 2.0).abs() < 1e-14);
        let r1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(min_eigenvalue(&r1).unwrap().abs() < 1e-12);
        assert!(min_eigenvalue(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn min_eigenvalue_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in 1..=6 {
            let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-2.0..2.0));
            let s = (&a + a.transpose()) * 0.5;
            let expect = jacobi_eigenvalues(&to_rows(&s))
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            let got = min_eigenvalue(&s).unwrap();
            assert!(
                (got - expect).abs() <= 1e-8 * s.norm().max(1.0),
                "p={p}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn ridge_examples() {
        let eye = DMatrix::identity(2, 2);
        let t = ridge_solve(&eye, 0.0, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert!((t.theta - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-15);
        let t = ridge_solve(&eye, 1.0, &DVector::from_vec(vec![2.0, 4.0])).unwrap();
        assert!((t.theta - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-15);
        let r1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let t = ridge_solve(&r1, 1.0, &DVector::from_vec(vec![2.0, 0.0])).unwrap();
        assert!((t.theta - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn ridge_rejects_singular() {
        let r1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            ridge_solve(&r1, 0.0, &DVector::from_vec(vec![1.0, 2.0])),
            Err(Error::Singular(_))
        ));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            ridge_solve(&indefinite, 0.5, &DVector::from_vec(vec![1.0, 1.0])),
            Err(Error::Singular(_))
        ));
        assert!(ridge_solve(&DMatrix::identity(2, 2), -1.0, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn ridge_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in 1..=5 {
            for _ in 0..20 {
                let a = DMatrix::from_fn(p + 3, p, |_, _| rng.random_range(-1.0..1.0));
                let gram = a.tr_mul(&a);
                let lambda = rng.random_range(0.1..1.0);
                let cross = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
                let system = &gram + DMatrix::identity(p, p) * lambda;
                let inv = brute_inverse(&to_rows(&system));
                let expect: Vec<f64> = inv
                    .iter()
                    .map(|r| r.iter().zip(cross.iter()).map(|(a, b)| a * b).sum())
                    .collect();
                let got = ridge_solve(&gram, lambda, &cross).unwrap();
                for (g, e) in got.theta.iter().zip(&expect) {
                    assert!((g - e).abs() < 1e-10, "p={p}: {g} vs {e}");
                }
                let residual = (&system * &got.theta - &cross).norm();
                assert!(residual <= 1e-8 * cross.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn dataset_invariants() {
        let x = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.1, 0.1]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        assert!(EncodedDataset::new(x.clone(), y.clone(), 1.0, 1.0).is_err());
        assert!(EncodedDataset::new(x.clone(), y.clone(), 5.0, 0.5).is_err());
        assert!(EncodedDataset::new(x.clone(), y.clone(), 5.0, 1.0).is_ok());
        assert!(EncodedDataset::new(x.clone(), DVector::zeros(3), 5.0, 1.0).is_err());
        assert!(EncodedDataset::new(DMatrix::zeros(0, 2), DVector::zeros(0), 1.0, 1.0).is_err());
        let obs = EncodedDataset::from_observed(x, y, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(obs.x_bound(), 5.0);
        assert_eq!(obs.y_bound(), 1.0);
    }

    fn synthetic(n: usize, p: usize, seed: u64) -> (EncodedDataset, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_ball_rows(&mut rng, n, p, 1.0);
        let theta = DVector::from_fn(p, |i, _| {
            (i as f64 + 1.0) * if i % 2 == 0 { 0.5 } else { -0.5 }
        });
        let y = &x * &theta;
        let y_bound = y.amax().max(1e-9);
        (EncodedDataset::new(x, y, 1.0, y_bound).unwrap(), theta)
    }

    fn ols(data: &EncodedDataset) -> DVector<f64> {
        let gram = to_rows(&data.x().tr_mul(data.x()));
        let inv = brute_inverse(&gram);
        let xty = data.x().tr_mul(data.y());
        DVector::from_fn(data.p(), |i, _| {
            inv[i].iter().zip(xty.iter()).map(|(a, b)| a * b).sum()
        })
    }

    #[test]
    fn adassp_recovers_ols_with_huge_budget() {
        let (data, theta_star) = synthetic(1000, 3, 5);
        let budget = PrivacyBudget::from_mu(1e9 * 3.0_f64.sqrt()).unwrap();
        let config = AdasspConfig {
            split: SplitRatio::even(),
            lambda_rule: LambdaRule::Fixed(0.0),
        };
        let fit = adassp_fit(&data, &budget, &config, &NoiseDraw::new(1, "t")).unwrap();
        let oracle = ols(&data);
        assert!((&fit.model.theta - &oracle).norm() < 1e-6);
        assert!((&oracle - &theta_star).norm() < 1e-9);
        let again = adassp_fit(&data, &budget, &config, &NoiseDraw::new(1, "t")).unwrap();
        assert_eq!(fit.model, again.model);
    }

    #[test]
    fn adassp_single_row_closed_form() {
        let data = EncodedDataset::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            1.0,
            1.0,
        )
        .unwrap();
        let budget = PrivacyBudget::from_mu(1e10).unwrap();
        for rule in [
            LambdaRule::Adaptive,
            LambdaRule::Fixed(0.5),
            LambdaRule::Strict,
        ] {
            let fit = adassp_fit(
                &data,
                &budget,
                &AdasspConfig {
                    split: SplitRatio::even(),
                    lambda_rule: rule,
                },
                &NoiseDraw::new(4, "s"),
            )
            .unwrap();
            let expect = 1.0 / (1.0 + fit.stats.lambda_used);
            assert!((fit.model.theta[0] - expect).abs() < 1e-8, "{rule:?}");
        }
    }

    #[test]
    fn adassp_ledger_and_sensitivities() {
        let (data, _) = synthetic(50, 2, 8);
        let data = EncodedDataset::new(
            data.x().clone(),
            data.y().map(|v| v.clamp(-0.3, 0.3)),
            1.0,
            0.3,
        )
        .unwrap();
        let budget = PrivacyBudget::from_epsilon_delta(1.0, 1e-6).unwrap();
        let config = AdasspConfig {
            split: SplitRatio::new(2.0, 1.0, 0.5).unwrap(),
            lambda_rule: LambdaRule::Adaptive,
        };
        let fit = adassp_fit(&data, &budget, &config, &NoiseDraw::new(0, "l")).unwrap();
        assert_eq!(
            fit.sensitivities,
            Sensitivities {
                gram: 1.0,
                cross: 0.3,
                lambda: 1.0
            }
        );
        assert_eq!(fit.ledger.entries().len(), 3);
        assert!((fit.ledger.total().unwrap() - budget.mu_total()).abs() < 1e-12);
    }

    #[test]
    fn gamma_inverts_regularized_gram() {
        let (data, _) = synthetic(30, 4, 2);
        let budget = PrivacyBudget::from_epsilon_delta(2.0, 1e-6).unwrap();
        let split = budget.split(SplitRatio::even()).unwrap();
        let mut ledger = PrivacyLedger::new();
        let stats = SufficientStats::release(
            data.x(),
            1.0,
            &split,
            LambdaRule::Adaptive,
            1e-6,
            &NoiseDraw::new(3, "g"),
            &mut ledger,
        )
        .unwrap();
        let system = &stats.gram_hat + DMatrix::identity(4, 4) * stats.lambda_used;
        let prod = &stats.gamma * &system;
        assert!((prod - DMatrix::identity(4, 4)).amax() < 1e-8);
        assert_eq!(stats.gram_hat, stats.gram_hat.transpose());
    }

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.norm()
    }

    // Neighbouring datasets differ by adding or removing one row; the
    // calibration constants below are exact for that relation.
    proptest! {
        #[test]
        fn add_remove_neighbour_sensitivities(seed in 0u64..10_000, n in 1usize..6, p in 1usize..4, xb in 0.2f64..3.0, yb in 0.2f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_ball_rows(&mut rng, n + 1, p, xb);
            let y = DVector::from_fn(n + 1, |_, _| rng.random_range(-yb..yb));
            let keep: Vec<usize> = (0..n).collect();
            let x_small = x.select_rows(keep.iter());
            let y_small = y.select_rows(keep.iter());
            let g_big = compute_gram(&x).unwrap();
            let g_small = compute_gram(&x_small).unwrap();
            prop_assert!(frob(&(&g_big - &g_small)) <= xb * xb * (1.0 + 1e-12));
            prop_assert!((frob(&g_big) - frob(&g_small)).abs() <= xb * xb * (1.0 + 1e-12));
            let c_big = compute_cross(&x, &y).unwrap();
            let c_small = compute_cross(&x_small, &y_small).unwrap();
            prop_assert!((&c_big - &c_small).norm() <= xb * yb * (1.0 + 1e-12));
            let l_big = min_eigenvalue(&g_big).unwrap();
            let l_small = min_eigenvalue(&g_small).unwrap();
            prop_assert!((l_big - l_small).abs() <= xb * xb * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn swap_neighbours_double_the_cross_sensitivity() {
        // Replacing x by -x moves X^T y by 2 |x| |y|: the constants above are
        // not valid under replace-one.
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let x_swapped = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let change =
            (compute_cross(&x, &y).unwrap() - compute_cross(&x_swapped, &y).unwrap()).norm();
        assert_eq!(change, 2.0);
    }
}
