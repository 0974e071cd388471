//! Closed-form reconstruction covariance for raster and Hadamard sensing.
//!
//! All predictors assume the default one-sensor dual-rail accounting, so a
//! Hadamard budget of 𝔑 gives `λ = 𝔑 / (2N²)`. The Hadamard forms follow from
//! Parseval: with `W = H / c` and `WWᵀ = I` for `c = √N`, white noise on `ỹ`
//! maps to white noise on `x̃` scaled by `1/c²`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::masks::{dual_rail_split, photon_distribution_factor, MaskSet, PhotonBudget, RailMode};
use crate::noise::{check_scene, NoiseModel};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TheoryBasis {
    Raster,
    Hadamard,
}

impl TheoryBasis {
    pub fn tag(self) -> &'static str {
        match self {
            TheoryBasis::Raster => "raster",
            TheoryBasis::Hadamard => "hadamard",
        }
    }
}

impl fmt::Display for TheoryBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PixelVariance {
    /// Same variance at every pixel.
    Uniform(f64),
    PerPixel(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub per_pixel_variance: PixelVariance,
    pub trace: f64,
    pub basis: TheoryBasis,
    pub noise: NoiseModel,
    pub num_pixels: usize,
    pub total_photons: f64,
    /// Rail accounting the prediction is valid for.
    pub rail_mode: RailMode,
}

impl TheoryPrediction {
    /// Mean per-pixel variance, comparable to a per-pixel MSE.
    pub fn mean_variance(&self) -> f64 {
        self.trace / self.num_pixels as f64
    }

    pub fn variance_at(&self, j: usize) -> f64 {
        match &self.per_pixel_variance {
            PixelVariance::Uniform(v) => *v,
            PixelVariance::PerPixel(v) => v[j],
        }
    }

    /// Fails when the prediction is compared against a run with a different
    /// rail accounting.
    pub fn check_rail(&self, rail: RailMode) -> Result<()> {
        if self.basis == TheoryBasis::Hadamard && rail != self.rail_mode {
            return Err(Error::Config(format!(
                "hadamard prediction assumes rail mode `{}`, run used `{}`",
                self.rail_mode.tag(),
                rail.tag()
            )));
        }
        Ok(())
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidDimension("N must be positive".into()));
    }
    Ok(())
}

fn uniform(
    v: f64,
    basis: TheoryBasis,
    noise: NoiseModel,
    n: usize,
    total: f64,
) -> TheoryPrediction {
    TheoryPrediction {
        per_pixel_variance: PixelVariance::Uniform(v),
        trace: v * n as f64,
        basis,
        noise,
        num_pixels: n,
        total_photons: total,
        rail_mode: RailMode::DualOneSensor,
    }
}

/// `σ² N⁴ / 𝔑²` per pixel.
pub fn predict_raster_gaussian(n: usize, sigma: f64, total: f64) -> Result<TheoryPrediction> {
    check_n(n)?;
    check_positive("sigma", sigma)?;
    check_positive("photon budget", total)?;
    let n4 = (n as f64).powi(4);
    Ok(uniform(
        sigma * sigma * n4 / (total * total),
        TheoryBasis::Raster,
        NoiseModel::Gaussian { sigma },
        n,
        total,
    ))
}

/// `8 σ² N³ / 𝔑²` per pixel.
pub fn predict_hadamard_gaussian(n: usize, sigma: f64, total: f64) -> Result<TheoryPrediction> {
    if !n.is_power_of_two() {
        return Err(Error::UnsupportedSize {
            size: n,
            reason: "hadamard prediction needs a power of two",
        });
    }
    check_positive("sigma", sigma)?;
    check_positive("photon budget", total)?;
    let n3 = (n as f64).powi(3);
    Ok(uniform(
        8.0 * sigma * sigma * n3 / (total * total),
        TheoryBasis::Hadamard,
        NoiseModel::Gaussian { sigma },
        n,
        total,
    ))
}

/// `(N² / 𝔑) · x_j` at pixel `j`.
pub fn predict_raster_poisson<T: Scalar>(x: &[T], total: f64) -> Result<TheoryPrediction> {
    check_n(x.len())?;
    check_scene(x, x.len())?;
    check_positive("photon budget", total)?;
    let n = x.len();
    let scale = (n * n) as f64 / total;
    let var: Vec<f64> = x.iter().map(|v| scale * v.to_f64_lossy()).collect();
    Ok(TheoryPrediction {
        trace: var.iter().sum(),
        per_pixel_variance: PixelVariance::PerPixel(var),
        basis: TheoryBasis::Raster,
        noise: NoiseModel::Poisson,
        num_pixels: n,
        total_photons: total,
        rail_mode: RailMode::DualOneSensor,
    })
}

/// `2 N Σx / 𝔑` at every pixel.
pub fn predict_hadamard_poisson<T: Scalar>(x: &[T], total: f64) -> Result<TheoryPrediction> {
    let n = x.len();
    if !n.is_power_of_two() {
        return Err(Error::UnsupportedSize {
            size: n,
            reason: "hadamard prediction needs a power of two",
        });
    }
    check_scene(x, n)?;
    check_positive("photon budget", total)?;
    let sum: f64 = x.iter().map(|v| v.to_f64_lossy()).sum();
    Ok(uniform(
        2.0 * n as f64 * sum / total,
        TheoryBasis::Hadamard,
        NoiseModel::Poisson,
        n,
        total,
    ))
}

/// Dispatches to the closed form for `(basis, noise)`. Gaussian predictions
/// ignore `x` apart from its length.
pub fn predict<T: Scalar>(
    basis: TheoryBasis,
    noise: NoiseModel,
    x: &[T],
    total: f64,
) -> Result<TheoryPrediction> {
    match (basis, noise) {
        (TheoryBasis::Raster, NoiseModel::Gaussian { sigma }) => {
            predict_raster_gaussian(x.len(), sigma, total)
        }
        (TheoryBasis::Hadamard, NoiseModel::Gaussian { sigma }) => {
            predict_hadamard_gaussian(x.len(), sigma, total)
        }
        (TheoryBasis::Raster, NoiseModel::Poisson) => predict_raster_poisson(x, total),
        (TheoryBasis::Hadamard, NoiseModel::Poisson) => predict_hadamard_poisson(x, total),
        (_, NoiseModel::Noiseless) => Ok(uniform(0.0, basis, noise, x.len(), total)),
    }
}

/// Diagonal covariance of `ỹ` for an arbitrary mask set, using the same λ
/// and branch accounting as the simulator.
pub fn measurement_variance<T: Scalar>(
    masks: &MaskSet<T>,
    x: &[T],
    budget: &PhotonBudget,
    noise: NoiseModel,
    rail: RailMode,
) -> Result<Vec<f64>> {
    check_scene(x, masks.num_pixels())?;
    noise.validate()?;
    let lambda = photon_distribution_factor(masks, budget, rail)?;
    let dual = masks.has_negative();
    let m = masks.num_masks();
    Ok(match noise {
        NoiseModel::Noiseless => vec![0.0; m],
        NoiseModel::Gaussian { sigma } => {
            let branches = if dual { 2.0 } else { 1.0 };
            vec![branches * sigma * sigma / (lambda * lambda); m]
        }
        NoiseModel::Poisson => {
            let abs = if dual {
                let pair = dual_rail_split(masks.matrix());
                let p = pair.positive.matvec(x);
                let q = pair.negative.matvec(x);
                p.iter().zip(&q).map(|(a, b)| *a + *b).collect()
            } else {
                masks.matrix().matvec(x)
            };
            abs.iter().map(|v| v.to_f64_lossy() / lambda).collect()
        }
    })
}

/// `M⁻¹ diag(d) M⁻ᵀ` for square invertible `M`.
///
/// A debugging aid for mask sets without a closed form.
pub fn propagate_covariance<T: Scalar>(m: &Matrix<T>, diag: &[f64]) -> Result<Matrix<f64>> {
    if m.rows() != m.cols() {
        return Err(Error::InvalidDimension(format!(
            "covariance propagation needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if diag.len() != m.rows() {
        return Err(Error::DimensionMismatch {
            expected: m.rows(),
            actual: diag.len(),
            context: "measurement variance length",
        });
    }
    let inv = Lu::new(&m.cast::<f64>())?.inverse();
    let n = m.rows();
    let scaled = Matrix::from_fn(n, n, |i, k| inv[(i, k)] * diag[k]);
    Ok(scaled.matmul_t(&inv))
}

/// Predicted covariance of `x̃ = M⁻¹ ỹ` for any square mask set.
pub fn reconstruction_covariance<T: Scalar>(
    masks: &MaskSet<T>,
    x: &[T],
    budget: &PhotonBudget,
    noise: NoiseModel,
    rail: RailMode,
) -> Result<Matrix<f64>> {
    let d = measurement_variance(masks, x, budget, noise, rail)?;
    propagate_covariance(masks.matrix(), &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{hadamard, raster};

    #[test]
    fn raster_gaussian_values() {
        let p = predict_raster_gaussian(64, 1.0, 1e4).unwrap();
        assert_eq!(p.variance_at(0), 0.16777216);
        let q = predict_raster_gaussian(64, 2.0, 1e4).unwrap();
        assert_eq!(q.variance_at(3), 4.0 * 0.16777216);
        let r = predict_raster_gaussian(64, 1.0, 1e5).unwrap();
        assert!((r.variance_at(0) * 100.0 / 0.16777216 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hadamard_gaussian_values() {
        let p = predict_hadamard_gaussian(64, 1.0, 1e4).unwrap();
        assert_eq!(p.variance_at(0), 0.02097152);
        let rs = predict_raster_gaussian(64, 1.0, 1e4).unwrap();
        assert!((p.mean_variance() / rs.mean_variance() - 8.0 / 64.0).abs() < 1e-15);
        let p8 = predict_hadamard_gaussian(8, 1.3, 77.0).unwrap();
        let r8 = predict_raster_gaussian(8, 1.3, 77.0).unwrap();
        assert!((p8.mean_variance() / r8.mean_variance() - 1.0).abs() < 1e-15);
        assert!(predict_hadamard_gaussian(12, 1.0, 1.0).is_err());
    }

    #[test]
    fn raster_poisson_values() {
        let z = predict_raster_poisson(&[0.0f64; 4], 10.0).unwrap();
        assert_eq!(z.trace, 0.0);
        let p = predict_raster_poisson(&[1.0f64; 4], 16.0).unwrap();
        assert!((0..4).all(|j| p.variance_at(j) == 1.0));
        let x = [0.2f64, 0.5, 0.0, 1.0];
        let p = predict_raster_poisson(&x, 3.0).unwrap();
        assert!((p.trace - 16.0 / 3.0 * 1.7).abs() < 1e-14);
    }

    #[test]
    fn hadamard_poisson_values() {
        let p = predict_hadamard_poisson(&[1.0f64, 0.0, 0.0, 0.0], 8.0).unwrap();
        assert_eq!(p.variance_at(2), 1.0);
        assert_eq!(predict_hadamard_poisson(&[0.0f64; 4], 8.0).unwrap().trace, 0.0);
        let x = [0.3f64, 0.9, 0.05, 0.6, 0.0, 1.0, 0.25, 0.5];
        let h = predict_hadamard_poisson(&x, 123.0).unwrap();
        let r = predict_raster_poisson(&x, 123.0).unwrap();
        assert!((h.trace / r.trace - 2.0).abs() < 1e-14);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(predict_raster_gaussian(4, 0.0, 1.0).is_err());
        assert!(predict_raster_gaussian(4, 1.0, -1.0).is_err());
        assert!(predict_raster_poisson(&[1.5f64], 1.0).is_err());
    }

    #[test]
    fn rail_mismatch_fails_loudly() {
        let p = predict_hadamard_gaussian(4, 1.0, 1.0).unwrap();
        assert!(p.check_rail(RailMode::DualOneSensor).is_ok());
        assert!(p.check_rail(RailMode::DualTwoSensors).is_err());
    }

    #[test]
    fn general_propagation_matches_closed_forms() {
        let x: Vec<f64> = (0..16).map(|i| (i % 5) as f64 / 4.0).collect();
        let budget = PhotonBudget::from_total(1e3).unwrap();
        let rail = RailMode::DualOneSensor;
        let cases = [
            (TheoryBasis::Raster, NoiseModel::Gaussian { sigma: 0.7 }),
            (TheoryBasis::Hadamard, NoiseModel::Gaussian { sigma: 0.7 }),
            (TheoryBasis::Raster, NoiseModel::Poisson),
            (TheoryBasis::Hadamard, NoiseModel::Poisson),
        ];
        for (basis, noise) in cases {
            let masks = match basis {
                TheoryBasis::Raster => raster::<f64>(16).unwrap(),
                TheoryBasis::Hadamard => hadamard::<f64>(16).unwrap(),
            };
            let cov = reconstruction_covariance(&masks, &x, &budget, noise, rail).unwrap();
            let pred = predict(basis, noise, &x, 1e3).unwrap();
            for j in 0..16 {
                let want = pred.variance_at(j);
                assert!(
                    (cov[(j, j)] - want).abs() <= 1e-12 * want.max(1e-300),
                    "{basis} {noise} pixel {j}: {} vs {want}",
                    cov[(j, j)]
                );
            }
        }
    }
}
