//! Clipping operators and the Gaussian mechanism.
//!
//! Noise comes from a [`NoiseDraw`]: a seed plus a stream label. Each released
//! statistic uses its own label, so the streams behind different releases are
//! independent and every fit replays bit-for-bit from its seed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted on matrices passed to the symmetric mechanism.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Seed and domain-separation label for one noise stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NoiseDraw {
    pub seed: u64,
    pub stream_label: String,
}

impl NoiseDraw {
    pub fn new(seed: u64, stream_label: impl Into<String>) -> Self {
        Self {
            seed,
            stream_label: stream_label.into(),
        }
    }

    /// A sub-stream, e.g. `draw.child("gram")` or `draw.child(format!("cross/{t}"))`.
    pub fn child(&self, label: impl AsRef<str>) -> Self {
        Self {
            seed: self.seed,
            stream_label: format!("{}/{}", self.stream_label, label.as_ref()),
        }
    }

    /// A ChaCha20 generator keyed by SHA-256 of `(seed, label)`.
    pub fn rng(&self) -> ChaCha20Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"dpboost.noise.v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.stream_label.len() as u64).to_le_bytes());
        hasher.update(self.stream_label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(key)
    }

    /// `count` standard normal variates from this stream.
    pub fn standard_normals(&self, count: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..count)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "tau",
            format!("clipping threshold must be positive and finite, got {tau}"),
        ))
    }
}

/// Clipping threshold newtype.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ClipSpec(f64);

impl ClipSpec {
    pub fn new(tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self(tau))
    }

    pub fn tau(self) -> f64 {
        self.0
    }
}

/// `x * min(1, tau / |x|)`.
pub fn clip_scalar(x: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if !x.is_finite() {
        return Err(Error::invalid(
            "x",
            format!("cannot clip non-finite value {x}"),
        ));
    }
    Ok(x.clamp(-tau, tau))
}

/// Rescales `x` onto the l2 ball of radius `tau` if it lies outside.
pub fn clip_vector_l2(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "x",
            format!("cannot clip vector with non-finite entry {bad}"),
        ));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= tau {
        return Ok(x.to_vec());
    }
    let scale = tau / norm;
    Ok(x.iter().map(|v| v * scale).collect())
}

fn noise_scale(sensitivity: f64, mu: f64) -> Result<f64> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::invalid(
            "mu",
            format!("must be positive and finite, got {mu}"),
        ));
    }
    if !(sensitivity.is_finite() && sensitivity >= 0.0) {
        return Err(Error::invalid(
            "sensitivity",
            format!("must be nonnegative, got {sensitivity}"),
        ));
    }
    Ok(sensitivity / mu)
}

/// Adds i.i.d. `N(0, (sensitivity/mu)^2)` noise to every coordinate.
pub fn gaussian_mechanism(
    value: &[f64],
    sensitivity: f64,
    mu: f64,
    noise: &NoiseDraw,
) -> Result<Vec<f64>> {
    let sigma = noise_scale(sensitivity, mu)?;
    if sigma == 0.0 {
        return Ok(value.to_vec());
    }
    let z = noise.standard_normals(value.len());
    Ok(value.iter().zip(z).map(|(v, z)| v + sigma * z).collect())
}

/// Scalar form of [`gaussian_mechanism`].
pub fn gaussian_mechanism_scalar(
    value: f64,
    sensitivity: f64,
    mu: f64,
    noise: &NoiseDraw,
) -> Result<f64> {
    Ok(gaussian_mechanism(&[value], sensitivity, mu, noise)?[0])
}

/// [`gaussian_mechanism`] for an `nalgebra` vector.
pub fn gaussian_mechanism_vector(
    value: &DVector<f64>,
    sensitivity: f64,
    mu: f64,
    noise: &NoiseDraw,
) -> Result<DVector<f64>> {
    let out = gaussian_mechanism(value.as_slice(), sensitivity, mu, noise)?;
    Ok(DVector::from_vec(out))
}

pub(crate) fn check_symmetric(mat: &DMatrix<f64>, tolerance: f64) -> Result<()> {
    if !mat.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    let scale = mat.amax().max(1.0);
    for i in 0..mat.nrows() {
        for j in (i + 1)..mat.ncols() {
            if (mat[(i, j)] - mat[(j, i)]).abs() > tolerance * scale {
                return Err(Error::invalid(
                    "mat",
                    format!(
                        "not symmetric at ({i},{j}): {} vs {}",
                        mat[(i, j)],
                        mat[(j, i)]
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// Adds noise to the upper triangle (diagonal included) and mirrors it, so
/// the release is exactly symmetric.
pub fn gaussian_mechanism_symmetric(
    mat: &DMatrix<f64>,
    sensitivity: f64,
    mu: f64,
    noise: &NoiseDraw,
) -> Result<DMatrix<f64>> {
    check_symmetric(mat, SYMMETRY_TOLERANCE)?;
    let sigma = noise_scale(sensitivity, mu)?;
    let p = mat.nrows();
    let mut out = mat.clone();
    // Mirror the input's upper triangle first so the output is exactly
    // symmetric even when the input was only symmetric within tolerance.
    for i in 0..p {
        for j in (i + 1)..p {
            out[(j, i)] = out[(i, j)];
        }
    }
    if sigma == 0.0 {
        return Ok(out);
    }
    let z = noise.standard_normals(p * (p + 1) / 2);
    let mut k = 0;
    for i in 0..p {
        for j in i..p {
            let v = out[(i, j)] + sigma * z[k];
            out[(i, j)] = v;
            out[(j, i)] = v;
            k += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn clip_scalar_examples() {
        assert_eq!(clip_scalar(5.0, 1.0).unwrap(), 1.0);
        assert_eq!(clip_scalar(-0.3, 1.0).unwrap(), -0.3);
        assert_eq!(clip_scalar(0.0, 0.1).unwrap(), 0.0);
        assert_eq!(clip_scalar(-7.0, 2.0).unwrap(), -2.0);
        assert!(clip_scalar(f64::NAN, 1.0).is_err());
        assert!(clip_scalar(1.0, 0.0).is_err());
        assert!(clip_scalar(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn clip_vector_examples() {
        let c = clip_vector_l2(&[3.0, 4.0], 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_vector_l2(&[0.3, 0.4], 1.0).unwrap(), vec![0.3, 0.4]);
        assert_eq!(clip_vector_l2(&[0.0, 0.0, 0.0], 0.5).unwrap(), vec![0.0; 3]);
        assert!(clip_vector_l2(&[1.0, f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn zero_sensitivity_is_exact() {
        let d = NoiseDraw::new(9, "x");
        assert_eq!(gaussian_mechanism_scalar(7.0, 0.0, 1.0, &d).unwrap(), 7.0);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_eq!(
            gaussian_mechanism_symmetric(&eye, 0.0, 1.0, &d).unwrap(),
            eye
        );
    }

    #[test]
    fn mechanism_rejects_bad_mu() {
        let d = NoiseDraw::new(1, "x");
        assert!(gaussian_mechanism(&[1.0], 1.0, 0.0, &d).is_err());
        assert!(gaussian_mechanism(&[1.0], 1.0, -1.0, &d).is_err());
        assert!(gaussian_mechanism(&[1.0], -1.0, 1.0, &d).is_err());
    }

    #[test]
    fn symmetric_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.5, 1.0]);
        assert!(gaussian_mechanism_symmetric(&m, 1.0, 1.0, &NoiseDraw::new(0, "g")).is_err());
    }

    #[test]
    fn symmetric_output_exact() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 4.0]);
        for seed in 0..20 {
            let out =
                gaussian_mechanism_symmetric(&m, 1.0, 0.7, &NoiseDraw::new(seed, "gram")).unwrap();
            let diff = &out - &m;
            assert_eq!(diff, diff.transpose());
            assert_ne!(out, m);
        }
    }

    #[test]
    fn symmetric_entry_variance() {
        // Monte-Carlo oracle: 1e5 releases of the 2x2 zero matrix at sigma = 1.
        let zero = DMatrix::<f64>::zeros(2, 2);
        let draws = 100_000;
        let mut sums = [0.0; 3];
        for k in 0..draws {
            let out =
                gaussian_mechanism_symmetric(&zero, 1.0, 1.0, &NoiseDraw::new(k, "var")).unwrap();
            sums[0] += out[(0, 0)].powi(2);
            sums[1] += out[(0, 1)].powi(2);
            sums[2] += out[(1, 1)].powi(2);
        }
        for s in sums {
            let var = s / draws as f64;
            assert!((var - 1.0).abs() < 0.02, "variance {var}");
        }
    }

    #[test]
    fn seeded_streams() {
        let a = NoiseDraw::new(42, "cross");
        let v = vec![0.0; 16];
        assert_eq!(
            gaussian_mechanism(&v, 1.0, 1.0, &a).unwrap(),
            gaussian_mechanism(&v, 1.0, 1.0, &a).unwrap()
        );
        let b = NoiseDraw::new(42, "gram");
        assert_ne!(
            gaussian_mechanism(&v, 1.0, 1.0, &a).unwrap(),
            gaussian_mechanism(&v, 1.0, 1.0, &b).unwrap()
        );
        assert_ne!(
            a.child("0").standard_normals(4),
            a.child("1").standard_normals(4)
        );
    }

    #[test]
    fn label_boundaries_are_unambiguous() {
        // Length-prefixing keeps ("ab", seed) and ("a"+"b") parts from colliding
        // across seed/label boundaries.
        let a = NoiseDraw::new(1, "ab").standard_normals(2);
        let b = NoiseDraw::new(1, "a").child("b").standard_normals(2);
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn clip_is_contraction(
            x in proptest::collection::vec(-10.0f64..10.0, 3),
            y in proptest::collection::vec(-10.0f64..10.0, 3),
            tau in 0.01f64..5.0,
        ) {
            let cx = clip_vector_l2(&x, tau).unwrap();
            let cy = clip_vector_l2(&y, tau).unwrap();
            let d_in: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let d_out: Vec<f64> = cx.iter().zip(&cy).map(|(a, b)| a - b).collect();
            prop_assert!(norm(&d_out) <= norm(&d_in) + 1e-12);
            prop_assert!(norm(&cx) <= tau * (1.0 + 1e-12));
            prop_assert!(norm(&cx) <= norm(&x) + 1e-12);
            let again = clip_vector_l2(&cx, tau).unwrap();
            for (a, b) in again.iter().zip(&cx) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            if norm(&x) > 0.0 {
                // same direction
                let cos = x.iter().zip(&cx).map(|(a, b)| a * b).sum::<f64>() / (norm(&x) * norm(&cx));
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn clip_scalar_idempotent(x in -100.0f64..100.0, tau in 0.01f64..10.0) {
            let c = clip_scalar(x, tau).unwrap();
            prop_assert!(c.abs() <= tau);
            prop_assert_eq!(clip_scalar(c, tau).unwrap(), c);
        }
    }
}
