//! Photon-count samplers and the differentiable Poisson surrogate.
//!
//! Every sampler is a pure function of its inputs and a generator drawn from
//! an [`RngStream`]. Streams are ChaCha8 keyed by the 64-bit seed with the
//! stream id selecting an independent ChaCha stream, so results do not depend
//! on thread count or platform. Normals use the ziggurat method of
//! `rand_distr::StandardNormal`; Poisson counts use multiplication of
//! uniforms for means below 30 and Hörmann's transformed rejection (PTRS)
//! above.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::DualRailPair;
use crate::scalar::Scalar;

/// Generator type behind every [`RngStream`].
pub type SpcRng = ChaCha8Rng;

/// Clamp applied to count-scale rates in the surrogate derivative.
pub const RATE_FLOOR: f64 = 1e-8;

/// Below this mean Poisson draws use inversion by multiplication.
const POISSON_INVERSION_LIMIT: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> SpcRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// A different stream under the same seed, derived from `id`.
    pub fn substream(&self, id: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(id.wrapping_add(0x5EED))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    #[default]
    Noiseless,
    /// Additive white Gaussian noise with standard deviation `sigma` in counts.
    Gaussian { sigma: f64 },
    Poisson,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(NoiseModel::Gaussian { sigma })
    }

    pub fn validate(&self) -> Result<()> {
        if let NoiseModel::Gaussian { sigma } = self {
            check_sigma(*sigma)?;
        }
        Ok(())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            NoiseModel::Noiseless => "noiseless",
            NoiseModel::Gaussian { .. } => "gaussian",
            NoiseModel::Poisson => "poisson",
        }
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for NoiseModel {
    type Err = Error;

    /// `noiseless`, `poisson`, `gaussian` (σ = 1) or `gaussian:<sigma>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (kind, arg) = match s.split_once([':', '=']) {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.as_str(), None),
        };
        match (kind, arg) {
            ("noiseless" | "none", None) => Ok(NoiseModel::Noiseless),
            ("poisson", None) => Ok(NoiseModel::Poisson),
            ("gaussian" | "awgn" | "agn", None) => NoiseModel::gaussian(1.0),
            ("gaussian" | "awgn" | "agn", Some(a)) => {
                let sigma = a
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad gaussian sigma `{a}`")))?;
                NoiseModel::gaussian(sigma)
            }
            _ => Err(Error::Config(format!("unknown noise model `{s}`"))),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!(
            "gaussian sigma must be positive and finite, got {sigma}"
        )));
    }
    Ok(())
}

fn check_rate(rate: f64, k: usize) -> Result<()> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::Domain(format!(
            "rate {rate} at index {k} is not a finite nonnegative value \
             (signed masks need a dual-rail split)"
        )));
    }
    Ok(())
}

#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `ln(k!)`
fn ln_factorial(k: u64) -> f64 {
    const TABLE: [f64; 10] = [
        0.0,
        0.0,
        std::f64::consts::LN_2,
        1.791_759_469_228_055,
        3.178_053_830_347_146,
        4.787_491_742_782_046,
        6.579_251_212_010_101,
        8.525_161_361_065_415,
        10.604_602_902_745_25,
        12.801_827_480_081_469,
    ];
    if k < 10 {
        return TABLE[k as usize];
    }
    // Stirling series for ln Γ(x), x = k + 1 ≥ 11
    let x = k as f64 + 1.0;
    let x2 = x * x;
    (x - 0.5) * x.ln() - x + 0.918_938_533_204_672_8
        + (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * x2)) / x2) / x2) / x
}

/// One Poisson draw. `rate` must be finite and nonnegative.
pub fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    if rate < POISSON_INVERSION_LIMIT {
        let limit = (-rate).exp();
        let mut k = 0u64;
        let mut p = rng.gen::<f64>();
        while p > limit {
            k += 1;
            p *= rng.gen::<f64>();
        }
        return k;
    }
    // PTRS, Hörmann (1993)
    let slam = rate.sqrt();
    let loglam = rate.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.gen::<f64>() - 0.5;
        let v = rng.gen::<f64>();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let kk = k as u64;
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
            <= -rate + k * loglam - ln_factorial(kk)
        {
            return kk;
        }
    }
}

/// Independent normal counts with the given means and standard deviation σ.
pub fn sample_counts_gaussian<T: Scalar, R: Rng + ?Sized>(
    rates: &[T],
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    check_sigma(sigma)?;
    Ok(rates
        .iter()
        .map(|&r| T::lit(r.to_f64_lossy() + sigma * standard_normal(rng)))
        .collect())
}

/// Independent Poisson counts.
pub fn sample_counts_poisson<T: Scalar, R: Rng + ?Sized>(
    rates: &[T],
    rng: &mut R,
) -> Result<Vec<u64>> {
    for (k, r) in rates.iter().enumerate() {
        check_rate(r.to_f64_lossy(), k)?;
    }
    Ok(rates
        .iter()
        .map(|r| poisson(r.to_f64_lossy(), rng))
        .collect())
}

pub(crate) fn check_scene<T: Scalar>(x: &[T], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: x.len(),
            context: "scene length vs mask pixel count",
        });
    }
    if let Some(i) = x
        .iter()
        .position(|v| !(*v >= T::zero() && *v <= T::one()))
    {
        return Err(Error::Domain(format!(
            "scene value {} at pixel {i} is outside [0, 1]",
            x[i]
        )));
    }
    Ok(())
}

/// Skellam counts: `Poisson(λ (M⁺x)_k) − Poisson(λ (M⁻x)_k)`, each branch
/// sampled independently.
pub fn sample_counts_dual_rail<T: Scalar, R: Rng + ?Sized>(
    pair: &DualRailPair<T>,
    x: &[T],
    lambda: f64,
    rng: &mut R,
) -> Result<Vec<i64>> {
    check_scene(x, pair.positive.cols())?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("λ must be finite and nonnegative, got {lambda}")));
    }
    let plus = pair.positive.matvec(x);
    let minus = pair.negative.matvec(x);
    let mut out = Vec::with_capacity(plus.len());
    for (k, (p, m)) in plus.iter().zip(&minus).enumerate() {
        let rp = lambda * p.to_f64_lossy();
        let rm = lambda * m.to_f64_lossy();
        check_rate(rp, k)?;
        check_rate(rm, k)?;
        let a = poisson(rp, rng) as i64;
        let b = poisson(rm, rng) as i64;
        out.push(a - b);
    }
    Ok(out)
}

/// `ỹ = counts / λ`
pub fn normalize_counts<T: Scalar>(counts: &[T], lambda: f64) -> Result<Vec<T>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("λ must be positive, got {lambda}")));
    }
    let inv = T::lit(1.0 / lambda);
    if lambda == 1.0 {
        return Ok(counts.to_vec());
    }
    Ok(counts.iter().map(|&c| c * inv).collect())
}

/// Draw from the reparameterized Poisson surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSample<T> {
    /// Normalized measurement `ỹ`.
    pub y_tilde: Vec<T>,
    /// `∂ỹ_k / ∂(Mx)_k`; the derivative with respect to `M_kj` is `gain_k · x_j`.
    pub gain: Vec<T>,
}

impl<T: Scalar> SurrogateSample<T> {
    pub fn mask_derivative(&self, k: usize, j: usize, x: &[T]) -> T {
        self.gain[k] * x[j]
    }
}

/// Count-scale standard deviation `s(r) = √r`, continued linearly below
/// `floor` so that `s'(r) = 1 / (2 √max(r, floor))` everywhere.
#[inline]
pub fn surrogate_std(rate: f64, floor: f64) -> f64 {
    if rate >= floor {
        rate.sqrt()
    } else {
        let sf = floor.sqrt();
        sf + (rate - floor) / (2.0 * sf)
    }
}

#[inline]
pub fn surrogate_std_derivative(rate: f64, floor: f64) -> f64 {
    0.5 / rate.max(floor).sqrt()
}

/// Gaussian surrogate of a normalized Poisson measurement:
/// `ỹ = Mx + √(λ Mx) ε / λ` for one branch with noiseless means `mean = Mx`.
pub fn surrogate_poisson<T: Scalar>(
    mean: &[T],
    lambda: f64,
    eps: &[T],
    floor: f64,
) -> Result<SurrogateSample<T>> {
    if mean.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            actual: eps.len(),
            context: "surrogate noise draws",
        });
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("λ must be positive, got {lambda}")));
    }
    let mut y_tilde = Vec::with_capacity(mean.len());
    let mut gain = Vec::with_capacity(mean.len());
    for (k, (&mu, &e)) in mean.iter().zip(eps).enumerate() {
        let rate = lambda * mu.to_f64_lossy();
        check_rate(rate, k)?;
        let e = e.to_f64_lossy();
        y_tilde.push(mu + T::lit(surrogate_std(rate, floor) * e / lambda));
        gain.push(T::lit(1.0 + e * surrogate_std_derivative(rate, floor)));
    }
    Ok(SurrogateSample { y_tilde, gain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::masks::dual_rail_split;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| RngStream::new(7, 1).rng().gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = RngStream::new(7, 1).rng().gen();
        let y: u64 = RngStream::new(7, 2).rng().gen();
        let z: u64 = RngStream::new(8, 1).rng().gen();
        assert_ne!(x, y);
        assert_ne!(x, z);
        assert_ne!(RngStream::new(7, 1).substream(3), RngStream::new(7, 1).substream(4));
    }

    #[test]
    fn ln_factorial_matches_direct_sum() {
        let mut acc = 0.0f64;
        for k in 1..200u64 {
            acc += (k as f64).ln();
            assert!((ln_factorial(k) - acc).abs() < 1e-10 * acc.max(1.0), "k={k}");
        }
    }

    #[test]
    fn gaussian_moments_and_determinism() {
        let n = 100_000;
        let rates = vec![50.0f64; n];
        let draws = sample_counts_gaussian(&rates, 1.0, &mut RngStream::new(1, 0).rng()).unwrap();
        let (mean, _) = moments(&draws);
        // CLT: |mean − 50| < 4σ/√n
        assert!((mean - 50.0).abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");

        let zeros = vec![0.0f64; n];
        let draws = sample_counts_gaussian(&zeros, 1.0, &mut RngStream::new(2, 0).rng()).unwrap();
        let (_, var) = moments(&draws);
        assert!((var - 1.0).abs() < 0.05, "var {var}");

        let a = sample_counts_gaussian(&rates[..10], 2.0, &mut RngStream::new(3, 0).rng()).unwrap();
        let b = sample_counts_gaussian(&rates[..10], 2.0, &mut RngStream::new(3, 0).rng()).unwrap();
        assert_eq!(a, b);
        assert!(sample_counts_gaussian(&rates[..1], -1.0, &mut RngStream::new(3, 0).rng()).is_err());
        assert!(sample_counts_gaussian(&rates[..1], 0.0, &mut RngStream::new(3, 0).rng()).is_err());
    }

    #[test]
    fn poisson_zero_and_negative() {
        let mut rng = RngStream::new(1, 0).rng();
        assert!(sample_counts_poisson(&[0.0f64; 100], &mut rng)
            .unwrap()
            .iter()
            .all(|c| *c == 0));
        assert!(matches!(
            sample_counts_poisson(&[1.0f64, -0.5], &mut rng),
            Err(Error::Domain(_))
        ));
        assert!(sample_counts_poisson(&[f64::NAN], &mut rng).is_err());
    }

    #[test]
    fn poisson_moments_rate_7() {
        let n = 100_000;
        let draws: Vec<f64> = sample_counts_poisson(&vec![7.0f64; n], &mut RngStream::new(9, 0).rng())
            .unwrap()
            .into_iter()
            .map(|c| c as f64)
            .collect();
        let (mean, var) = moments(&draws);
        assert!((mean - 7.0).abs() < 0.034, "mean {mean}");
        assert!((var / 7.0 - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn poisson_moments_within_five_sigma() {
        let n = 100_000usize;
        for (i, &rate) in [0.5f64, 7.0, 300.0].iter().enumerate() {
            let mut rng = RngStream::new(11, i as u64).rng();
            let draws: Vec<f64> = (0..n).map(|_| poisson(rate, &mut rng) as f64).collect();
            let (mean, var) = moments(&draws);
            let se_mean = (rate / n as f64).sqrt();
            // Var(s²) = μ₄/n − σ⁴(n−3)/(n(n−1)), μ₄ = r(1 + 3r) for Poisson
            let mu4 = rate * (1.0 + 3.0 * rate);
            let se_var = ((mu4 - rate * rate) / n as f64).sqrt();
            assert!((mean - rate).abs() < 5.0 * se_mean, "rate {rate}: mean {mean}");
            assert!((var - rate).abs() < 5.0 * se_var, "rate {rate}: var {var}");
        }
    }

    #[test]
    fn poisson_large_mean_terminates() {
        let mut rng = RngStream::new(5, 0).rng();
        let draws: Vec<f64> = (0..1000).map(|_| poisson(1e6, &mut rng) as f64).collect();
        let (mean, _) = moments(&draws);
        assert!((mean - 1e6).abs() < 5.0 * (1e6f64 / 1000.0).sqrt());
        let huge = poisson(1e12, &mut rng) as f64;
        assert!((huge - 1e12).abs() < 1e8);
    }

    #[test]
    fn dual_rail_reduces_to_poisson_without_negative_branch() {
        let m = Matrix::from_rows(&[vec![1.0f64, 0.5], vec![0.0, 1.0]]).unwrap();
        let pair = dual_rail_split(&m);
        let x = [0.8, 0.4];
        let a = sample_counts_dual_rail(&pair, &x, 20.0, &mut RngStream::new(4, 0).rng()).unwrap();
        let rates = m.matvec(&x).iter().map(|v| v * 20.0).collect::<Vec<_>>();
        let b = sample_counts_poisson(&rates, &mut RngStream::new(4, 0).rng()).unwrap();
        assert_eq!(a, b.iter().map(|c| *c as i64).collect::<Vec<_>>());

        let zero = sample_counts_dual_rail(&pair, &x, 0.0, &mut RngStream::new(4, 0).rng()).unwrap();
        assert!(zero.iter().all(|c| *c == 0));
    }

    #[test]
    fn skellam_moments() {
        let m = Matrix::from_rows(&[vec![1.0f64, -1.0]]).unwrap();
        let pair = dual_rail_split(&m);
        let x = [1.0, 1.0];
        let mut rng = RngStream::new(8, 0).rng();
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_counts_dual_rail(&pair, &x, 5.0, &mut rng).unwrap()[0] as f64)
            .collect();
        let (mean, var) = moments(&draws);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var / 10.0 - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn dual_rail_rejects_out_of_range_scene() {
        let pair = dual_rail_split(&Matrix::from_rows(&[vec![1.0f64, -1.0]]).unwrap());
        let mut rng = RngStream::new(1, 0).rng();
        assert!(sample_counts_dual_rail(&pair, &[1.5, 0.0], 1.0, &mut rng).is_err());
        assert!(sample_counts_dual_rail(&pair, &[0.5], 1.0, &mut rng).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_counts(&[10.0f64, 0.0], 2.0).unwrap(), vec![5.0, 0.0]);
        assert_eq!(normalize_counts(&[3.5f64, 1.25], 1.0).unwrap(), vec![3.5, 1.25]);
        assert!(normalize_counts(&[1.0f64], 0.0).is_err());
        assert!(normalize_counts(&[1.0f64], -2.0).is_err());
    }

    #[test]
    fn normalized_poisson_mean_is_mx() {
        let m = Matrix::from_rows(&[vec![1.0f64, 0.5, 0.0], vec![0.25, 1.0, 1.0]]).unwrap();
        let x = [0.6, 0.2, 0.9];
        let mx = m.matvec(&x);
        let lambda = 3.0;
        let rates: Vec<f64> = mx.iter().map(|v| v * lambda).collect();
        let mut rng = RngStream::new(12, 0).rng();
        let mut acc = [0.0f64; 2];
        let n = 100_000;
        for _ in 0..n {
            let c: Vec<f64> = sample_counts_poisson(&rates, &mut rng)
                .unwrap()
                .into_iter()
                .map(|v| v as f64)
                .collect();
            let y = normalize_counts(&c, lambda).unwrap();
            acc[0] += y[0];
            acc[1] += y[1];
        }
        for k in 0..2 {
            assert!((acc[k] / n as f64 / mx[k] - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn surrogate_without_noise_is_exact() {
        let mean = [0.3f64, 1.7, 0.0];
        let s = surrogate_poisson(&mean, 13.0, &[0.0; 3], RATE_FLOOR).unwrap();
        assert_eq!(s.y_tilde, mean.to_vec());
        assert_eq!(s.gain, vec![1.0; 3]);
    }

    #[test]
    fn surrogate_variance_matches_poisson() {
        let mean = 2.5f64;
        let lambda = 8.0;
        let mut rng = RngStream::new(21, 0).rng();
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let e = standard_normal(&mut rng);
                surrogate_poisson(&[mean], lambda, &[e], RATE_FLOOR).unwrap().y_tilde[0]
            })
            .collect();
        let (_, var) = moments(&draws);
        assert!((var / (mean / lambda) - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn surrogate_derivative_matches_finite_differences() {
        let m = Matrix::from_rows(&[vec![0.7f64, 0.2, 0.4], vec![0.1, 0.9, 0.3]]).unwrap();
        let x = [0.5, 0.8, 0.3];
        let eps = [0.7, -1.3];
        let lambda = 4.0;
        let y = |m: &Matrix<f64>| {
            surrogate_poisson(&m.matvec(&x), lambda, &eps, RATE_FLOOR)
                .unwrap()
                .y_tilde
        };
        let base = surrogate_poisson(&m.matvec(&x), lambda, &eps, RATE_FLOOR).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            for j in 0..3 {
                let mut mp = m.clone();
                mp[(k, j)] += h;
                let mut mm = m.clone();
                mm[(k, j)] -= h;
                let fd = (y(&mp)[k] - y(&mm)[k]) / (2.0 * h);
                let an = base.mask_derivative(k, j, &x);
                assert!((fd - an).abs() / an.abs().max(1e-12) < 1e-6, "k={k} j={j}");
            }
        }
    }

    #[test]
    fn surrogate_floor_keeps_derivative_finite() {
        let s = surrogate_poisson(&[0.0f64], 1.0, &[1.0], RATE_FLOOR).unwrap();
        assert!(s.gain[0].is_finite());
        assert!((s.gain[0] - (1.0 + 0.5 / RATE_FLOOR.sqrt())).abs() < 1e-6);
        // continuity of the linear extension at the floor
        let below = surrogate_std(RATE_FLOOR * (1.0 - 1e-9), RATE_FLOOR);
        assert!((below - RATE_FLOOR.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn noise_model_parse() {
        assert_eq!("poisson".parse::<NoiseModel>().unwrap(), NoiseModel::Poisson);
        assert_eq!(
            "gaussian:2.5".parse::<NoiseModel>().unwrap(),
            NoiseModel::Gaussian { sigma: 2.5 }
        );
        assert!("gaussian:-1".parse::<NoiseModel>().is_err());
        assert!("laplace".parse::<NoiseModel>().is_err());
    }
}
