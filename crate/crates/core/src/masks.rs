//! Sensing-mask families, row normalization, the dual-rail split and the
//! photon distribution factor.
//!
//! A [`MaskSet`] stores an `m × N` matrix whose rows are displayed one after
//! another on the modulator. The photon distribution factor λ rescales any
//! mask set so that the total number of detected photons never exceeds the
//! budget 𝔑: with `v_k` the largest absolute entry of row `k`,
//!
//! ```text
//! λ = 𝔑 / (N Σ_k v_k)        single rail, or dual rail with two detectors
//! λ = 𝔑 / (N Σ_k 2 v_k)      dual rail with one detector (M⁺ and M⁻ in turn)
//! ```
//!
//! and the detected counts of mask `k` have mean `λ (M x)_k`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::noise::RngStream;
use crate::scalar::{axpy, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskFamily {
    Raster,
    Impulse,
    Hadamard,
    BinaryRandom,
    TruncatedHadamard,
    Pca,
    Learned,
}

impl MaskFamily {
    pub const ALL: [MaskFamily; 7] = [
        MaskFamily::Raster,
        MaskFamily::Impulse,
        MaskFamily::Hadamard,
        MaskFamily::BinaryRandom,
        MaskFamily::TruncatedHadamard,
        MaskFamily::Pca,
        MaskFamily::Learned,
    ];

    /// Short tag used in file names and result tables.
    pub fn tag(self) -> &'static str {
        match self {
            MaskFamily::Raster => "RS",
            MaskFamily::Impulse => "II",
            MaskFamily::Hadamard => "HB",
            MaskFamily::BinaryRandom => "BR",
            MaskFamily::TruncatedHadamard => "TH",
            MaskFamily::Pca => "PCA",
            MaskFamily::Learned => "ONN",
        }
    }
}

impl fmt::Display for MaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        let fam = match norm.as_str() {
            "rs" | "raster" => MaskFamily::Raster,
            "ii" | "impulse" => MaskFamily::Impulse,
            "hb" | "hadamard" => MaskFamily::Hadamard,
            "br" | "binaryrandom" | "random" => MaskFamily::BinaryRandom,
            "th" | "truncatedhadamard" | "lfth" => MaskFamily::TruncatedHadamard,
            "pca" => MaskFamily::Pca,
            "onn" | "learned" => MaskFamily::Learned,
            _ => return Err(Error::Config(format!("unknown mask family `{s}`"))),
        };
        Ok(fam)
    }
}

/// How signed masks are acquired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RailMode {
    /// One detector, nonnegative masks only.
    SinglePositive,
    /// M⁺ and M⁻ measured simultaneously on two detectors.
    DualTwoSensors,
    /// One detector measuring M⁺ and M⁻ in turn.
    #[default]
    DualOneSensor,
}

impl RailMode {
    pub fn tag(self) -> &'static str {
        match self {
            RailMode::SinglePositive => "single",
            RailMode::DualTwoSensors => "dual2",
            RailMode::DualOneSensor => "dual1",
        }
    }
}

impl fmt::Display for RailMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for RailMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "single" | "singlepositive" => Ok(RailMode::SinglePositive),
            "dual2" | "dualtwosensors" | "twosensors" => Ok(RailMode::DualTwoSensors),
            "dual1" | "dualonesensor" | "onesensor" | "dual" => Ok(RailMode::DualOneSensor),
            _ => Err(Error::Config(format!("unknown rail mode `{s}`"))),
        }
    }
}

/// Photon budget: flux Φ (photons/s) over total exposure T (s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotonBudget {
    flux: f64,
    exposure: f64,
}

impl PhotonBudget {
    pub fn new(flux: f64, exposure: f64) -> Result<Self> {
        if !(flux > 0.0 && flux.is_finite() && exposure > 0.0 && exposure.is_finite()) {
            return Err(Error::Parameter(format!(
                "photon budget needs positive finite flux and exposure, got {flux} and {exposure}"
            )));
        }
        Ok(Self { flux, exposure })
    }

    /// Budget of `total` photons delivered over one second.
    pub fn from_total(total: f64) -> Result<Self> {
        Self::new(total, 1.0)
    }

    pub fn flux(&self) -> f64 {
        self.flux
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    /// 𝔑 = ΦT
    pub fn total(&self) -> f64 {
        self.flux * self.exposure
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<T> {
    matrix: Matrix<T>,
    family: MaskFamily,
    row_max: Vec<T>,
    exposure_scale: T,
    seed: Option<u64>,
}

impl<T: Scalar> MaskSet<T> {
    /// Wraps a matrix as-is; `row_max` records each row's largest absolute entry.
    pub fn from_matrix(matrix: Matrix<T>, family: MaskFamily) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::InvalidDimension(format!(
                "mask set must be at least 1x1, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let row_max = row_max_abs(&matrix);
        if let Some(k) = row_max.iter().position(|v| *v == T::zero()) {
            return Err(Error::DegenerateMask(format!("row {k} is all zero")));
        }
        Ok(Self {
            matrix,
            family,
            row_max,
            exposure_scale: T::one(),
            seed: None,
        })
    }

    pub(crate) fn with_row_max(mut self, row_max: Vec<T>) -> Self {
        debug_assert_eq!(row_max.len(), self.matrix.rows());
        self.row_max = row_max;
        self
    }

    pub fn with_exposure_scale(mut self, scale: T) -> Result<Self> {
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "exposure scale must be positive, got {scale}"
            )));
        }
        self.exposure_scale = scale;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn family(&self) -> MaskFamily {
        self.family
    }

    /// `v_k` of each row before normalization.
    pub fn row_max(&self) -> &[T] {
        &self.row_max
    }

    pub fn exposure_scale(&self) -> T {
        self.exposure_scale
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Number of masks `m`.
    pub fn num_masks(&self) -> usize {
        self.matrix.rows()
    }

    /// Number of pixels `N`.
    pub fn num_pixels(&self) -> usize {
        self.matrix.cols()
    }

    pub fn has_negative(&self) -> bool {
        self.matrix.as_slice().iter().any(|v| *v < T::zero())
    }

    pub fn is_normalized(&self) -> bool {
        row_max_abs(&self.matrix).iter().all(|v| *v == T::one())
    }

    pub fn is_square(&self) -> bool {
        self.matrix.rows() == self.matrix.cols()
    }
}

pub(crate) fn row_max_abs<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    m.row_iter()
        .map(|r| r.iter().fold(T::zero(), |acc, v| acc.max(v.abs())))
        .collect()
}

fn check_pixels(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidDimension("pixel count must be at least 1".into()));
    }
    Ok(())
}

/// Raster scan: the `N × N` identity.
pub fn raster<T: Scalar>(n: usize) -> Result<MaskSet<T>> {
    check_pixels(n)?;
    MaskSet::from_matrix(Matrix::identity(n), MaskFamily::Raster)
}

/// Impulse imaging: a parallel sensor array where each pixel integrates `N`
/// times the raster dwell. Stored as the identity with `exposure_scale = N`.
pub fn impulse<T: Scalar>(n: usize) -> Result<MaskSet<T>> {
    check_pixels(n)?;
    MaskSet::from_matrix(Matrix::identity(n), MaskFamily::Impulse)?
        .with_exposure_scale(T::from_usize_lossy(n))
}

/// Number of sign changes along a row (the Walsh sequency).
pub fn sign_changes<T: Scalar>(row: &[T]) -> usize {
    row.windows(2)
        .filter(|w| (w[0] < T::zero()) != (w[1] < T::zero()))
        .count()
}

/// Sylvester `±1` Hadamard matrix of order `n` with rows in sequency order,
/// as row-major `i8`.
pub fn hadamard_signs(n: usize) -> Result<Vec<i8>> {
    check_pixels(n)?;
    if !n.is_power_of_two() {
        return Err(Error::UnsupportedSize {
            size: n,
            reason: "Sylvester Hadamard construction needs a power of two",
        });
    }
    let natural = |i: usize, j: usize| -> i8 {
        if (i & j).count_ones() % 2 == 0 {
            1
        } else {
            -1
        }
    };
    let changes = |i: usize| (1..n).filter(|&j| natural(i, j) != natural(i, j - 1)).count();
    let mut order: Vec<usize> = (0..n).collect();
    // stable, so ties (none for Sylvester rows) keep natural order
    order.sort_by_key(|&i| changes(i));
    let mut out = Vec::with_capacity(n * n);
    for &i in &order {
        out.extend((0..n).map(|j| natural(i, j)));
    }
    Ok(out)
}

/// Sequency-ordered `±1` Hadamard basis.
pub fn hadamard<T: Scalar>(n: usize) -> Result<MaskSet<T>> {
    let signs = hadamard_signs(n)?;
    let data = signs.into_iter().map(|s| T::lit(s as f64)).collect();
    MaskSet::from_matrix(Matrix::new(n, n, data)?, MaskFamily::Hadamard)
}

/// The `m` lowest-sequency rows of the Hadamard basis.
pub fn truncated_hadamard<T: Scalar>(n: usize, m: usize) -> Result<MaskSet<T>> {
    if m == 0 || m > n {
        return Err(Error::InvalidTruncation {
            requested: m,
            available: n,
        });
    }
    let full = hadamard::<T>(n)?;
    let data = full.matrix().as_slice()[..m * n].to_vec();
    MaskSet::from_matrix(Matrix::new(m, n, data)?, MaskFamily::TruncatedHadamard)
}

/// `{0,1}` Hadamard-derived masks `(H + 1) / 2`, used to initialize learned masks.
pub fn hadamard01<T: Scalar>(n: usize) -> Result<Matrix<T>> {
    let signs = hadamard_signs(n)?;
    Matrix::new(
        n,
        n,
        signs
            .into_iter()
            .map(|s| if s > 0 { T::one() } else { T::zero() })
            .collect(),
    )
}

/// I.i.d. Bernoulli(`p`) masks; all-zero rows are redrawn.
pub fn binary_random<T: Scalar>(n: usize, m: usize, seed: u64, p: f64) -> Result<MaskSet<T>> {
    check_pixels(n)?;
    if m == 0 {
        return Err(Error::InvalidDimension("mask count must be at least 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!(
            "open-pixel probability must lie in (0, 1), got {p}"
        )));
    }
    let mut rng = RngStream::new(seed, 0).rng();
    let mut mat = Matrix::zeros(m, n);
    for k in 0..m {
        loop {
            let row = mat.row_mut(k);
            let mut any = false;
            for v in row.iter_mut() {
                let open = rng.gen_bool(p);
                any |= open;
                *v = if open { T::one() } else { T::zero() };
            }
            if any {
                break;
            }
        }
    }
    Ok(MaskSet::from_matrix(mat, MaskFamily::BinaryRandom)?.with_seed(seed))
}

/// Result of [`pca_masks`].
#[derive(Clone, Debug)]
pub struct PcaMasks<T> {
    /// Max-abs normalized principal directions, eigenvalue-descending.
    pub masks: MaskSet<T>,
    /// Unit-norm principal directions before normalization.
    pub components: Matrix<T>,
    pub eigenvalues: Vec<T>,
    /// Sample mean removed before computing the covariance.
    pub mean: Vec<T>,
    pub requested: usize,
}

impl<T> PcaMasks<T> {
    /// Fewer than the requested number of components carried variance.
    pub fn is_rank_deficient(&self) -> bool {
        self.eigenvalues.len() < self.requested
    }
}

/// Mean-centered sample covariance (`n - 1` denominator) of row samples.
pub fn covariance<T: Scalar>(samples: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![T::zero(); d];
    for r in samples.row_iter() {
        axpy(T::one(), r, &mut mean);
    }
    let inv_n = T::one() / T::from_usize_lossy(n.max(1));
    mean.iter_mut().for_each(|v| *v *= inv_n);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![T::zero(); d];
    for r in samples.row_iter() {
        for (c, (&x, &mu)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = x - mu;
        }
        // upper triangle only, mirrored below
        for i in 0..d {
            let ci = centered[i];
            if ci != T::zero() {
                axpy(ci, &centered[i..], &mut cov.row_mut(i)[i..]);
            }
        }
    }
    let denom = T::one() / T::from_usize_lossy(n.saturating_sub(1).max(1));
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] * denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Top-`m` principal components of the row samples as masks.
pub fn pca_masks<T: Scalar>(samples: &Matrix<T>, m: usize) -> Result<PcaMasks<T>> {
    let (n, d) = (samples.rows(), samples.cols());
    if m == 0 || m > d {
        return Err(Error::InvalidDimension(format!(
            "PCA mask count must lie in 1..={d}, got {m}"
        )));
    }
    if n < m {
        return Err(Error::InvalidDimension(format!(
            "PCA needs at least {m} samples, got {n}"
        )));
    }
    let (mean, cov) = covariance(samples);
    let eig = symmetric_eigen(&cov)?;
    let top = eig.values[0].max(T::zero());
    let tol = top * T::from_usize_lossy(d) * T::epsilon() * T::lit(16.0);
    let rank = eig.values.iter().take_while(|v| **v > tol).count();
    let keep = m.min(rank);
    if keep == 0 {
        return Err(Error::DegenerateMask(
            "training data has zero variance; no principal components".into(),
        ));
    }
    let mut components = Matrix::zeros(keep, d);
    for k in 0..keep {
        let src = eig.vectors.row(k);
        // deterministic sign: the largest-magnitude entry is positive
        let pivot = src
            .iter()
            .copied()
            .fold(T::zero(), |a, v| if v.abs() > a.abs() { v } else { a });
        let flip = if pivot < T::zero() { -T::one() } else { T::one() };
        for (dst, &v) in components.row_mut(k).iter_mut().zip(src) {
            *dst = v * flip;
        }
    }
    let masks = normalize_masks(&MaskSet::from_matrix(components.clone(), MaskFamily::Pca)?)?;
    Ok(PcaMasks {
        masks,
        components,
        eigenvalues: eig.values[..keep].to_vec(),
        mean,
        requested: m,
    })
}

/// Divides every row by its largest absolute entry and records that value
/// in `row_max`.
pub fn normalize_masks<T: Scalar>(masks: &MaskSet<T>) -> Result<MaskSet<T>> {
    let v = row_max_abs(masks.matrix());
    let mut mat = masks.matrix().clone();
    for (k, &vk) in v.iter().enumerate() {
        if vk == T::zero() || !vk.is_finite() {
            return Err(Error::DegenerateMask(format!(
                "row {k} has max-abs {vk}; cannot normalize"
            )));
        }
        mat.row_mut(k).iter_mut().for_each(|x| *x = *x / vk);
    }
    let mut out = MaskSet::from_matrix(mat, masks.family())?
        .with_row_max(v)
        .with_exposure_scale(masks.exposure_scale())?;
    out.seed = masks.seed();
    Ok(out)
}

/// Nonnegative parts of a signed mask matrix: `M = M⁺ − M⁻`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualRailPair<T> {
    pub positive: Matrix<T>,
    pub negative: Matrix<T>,
}

impl<T: Scalar> DualRailPair<T> {
    pub fn recombine(&self) -> Matrix<T> {
        let data = self
            .positive
            .as_slice()
            .iter()
            .zip(self.negative.as_slice())
            .map(|(&p, &n)| p - n)
            .collect();
        Matrix::new(self.positive.rows(), self.positive.cols(), data)
            .expect("dual-rail branches share a shape")
    }

    pub fn negative_is_empty(&self) -> bool {
        self.negative.as_slice().iter().all(|v| *v == T::zero())
    }
}

/// `M⁺ = max(M, 0)`, `M⁻ = max(−M, 0)`.
pub fn dual_rail_split<T: Scalar>(m: &Matrix<T>) -> DualRailPair<T> {
    let zero = T::zero();
    DualRailPair {
        positive: m.map(|v| if v > zero { v } else { zero }),
        negative: m.map(|v| if v < zero { -v } else { zero }),
    }
}

/// λ for an arbitrary (not necessarily normalized) mask matrix given the
/// effective photon total (budget × exposure scale).
pub fn photon_distribution_factor_raw<T: Scalar>(
    matrix: &Matrix<T>,
    effective_total: f64,
    rail: RailMode,
) -> Result<f64> {
    let n = matrix.cols() as f64;
    let mut sum_v = 0.0;
    let mut negative = false;
    for row in matrix.row_iter() {
        let mut v = 0.0f64;
        for &x in row {
            let x = x.to_f64_lossy();
            negative |= x < 0.0;
            v = v.max(x.abs());
        }
        sum_v += v;
    }
    let branches = match (negative, rail) {
        (false, _) => 1.0,
        (true, RailMode::SinglePositive) => {
            return Err(Error::Domain(
                "mask set has negative entries; single-rail acquisition needs a dual-rail mode"
                    .into(),
            ))
        }
        (true, RailMode::DualTwoSensors) => 1.0,
        (true, RailMode::DualOneSensor) => 2.0,
    };
    if !(sum_v > 0.0) || !sum_v.is_finite() {
        return Err(Error::DegenerateMask(format!(
            "sum of row maxima is {sum_v}; photon distribution factor undefined"
        )));
    }
    Ok(effective_total / (n * branches * sum_v))
}

/// Photon distribution factor λ for a mask set under a budget.
pub fn photon_distribution_factor<T: Scalar>(
    masks: &MaskSet<T>,
    budget: &PhotonBudget,
    rail: RailMode,
) -> Result<f64> {
    let effective = budget.total() * masks.exposure_scale().to_f64_lossy();
    photon_distribution_factor_raw(masks.matrix(), effective, rail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn raster_is_identity() {
        let r = raster::<f64>(2).unwrap();
        assert_eq!(r.matrix(), &m(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(r.family(), MaskFamily::Raster);
        assert_eq!(r.exposure_scale(), 1.0);
        let r4 = raster::<f64>(4).unwrap();
        assert!(r4.matrix().row_iter().all(|row| row.iter().sum::<f64>() == 1.0));
        let split = dual_rail_split(raster::<f64>(3).unwrap().matrix());
        assert!(split.negative_is_empty());
        assert!(matches!(raster::<f64>(0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn impulse_is_scaled_identity() {
        let ii = impulse::<f64>(4).unwrap();
        assert_eq!(ii.matrix(), raster::<f64>(4).unwrap().matrix());
        assert_eq!(ii.exposure_scale(), 4.0);
        let one = impulse::<f64>(1).unwrap();
        assert_eq!(one.matrix(), raster::<f64>(1).unwrap().matrix());
        assert_eq!(one.exposure_scale(), 1.0);
        assert!(impulse::<f64>(0).is_err());
    }

    #[test]
    fn hadamard_small_cases() {
        assert_eq!(hadamard::<f64>(1).unwrap().matrix(), &m(&[vec![1.0]]));
        assert_eq!(
            hadamard::<f64>(2).unwrap().matrix(),
            &m(&[vec![1.0, 1.0], vec![1.0, -1.0]])
        );
        let h4 = hadamard::<f64>(4).unwrap();
        let changes: Vec<usize> = h4.matrix().row_iter().map(sign_changes).collect();
        assert_eq!(changes, vec![0, 1, 2, 3]);
        let g = h4.matrix().matmul_t(h4.matrix());
        assert_eq!(g, Matrix::identity(4).map(|v| v * 4.0));
        assert!(matches!(
            hadamard::<f64>(6),
            Err(Error::UnsupportedSize { size: 6, .. })
        ));
    }

    #[test]
    fn truncated_hadamard_rows() {
        assert_eq!(
            truncated_hadamard::<f64>(4, 4).unwrap().matrix(),
            hadamard::<f64>(4).unwrap().matrix()
        );
        let th = truncated_hadamard::<f64>(4, 2).unwrap();
        assert_eq!(
            th.matrix(),
            &m(&[vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 1.0, -1.0, -1.0]])
        );
        let one = truncated_hadamard::<f64>(4, 1).unwrap();
        assert_eq!(one.matrix(), &m(&[vec![1.0; 4]]));
        assert!(matches!(
            truncated_hadamard::<f64>(4, 5),
            Err(Error::InvalidTruncation { .. })
        ));
    }

    #[test]
    fn hadamard01_is_shifted_hadamard() {
        let h = hadamard::<f64>(8).unwrap();
        let h01 = hadamard01::<f64>(8).unwrap();
        for (a, b) in h.matrix().as_slice().iter().zip(h01.as_slice()) {
            assert_eq!((a + 1.0) / 2.0, *b);
        }
    }

    #[test]
    fn binary_random_contract() {
        let a = binary_random::<f64>(16, 8, 42, 0.5).unwrap();
        let b = binary_random::<f64>(16, 8, 42, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a.matrix().as_slice().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert_eq!(a.seed(), Some(42));
        let c = binary_random::<f64>(16, 8, 43, 0.5).unwrap();
        assert_ne!(a.matrix(), c.matrix());

        // p small enough that all-zero rows would appear without resampling
        let sparse = binary_random::<f64>(4, 64, 7, 0.05).unwrap();
        assert!(sparse.row_max().iter().all(|v| *v == 1.0));

        // binomial concentration: 6σ for n = 65536 is ±0.0117
        let big = binary_random::<f64>(256, 256, 1, 0.5).unwrap();
        let frac = big.matrix().as_slice().iter().sum::<f64>() / 65536.0;
        assert!((0.47..=0.53).contains(&frac), "fraction {frac}");

        assert!(binary_random::<f64>(4, 4, 1, 0.0).is_err());
        assert!(binary_random::<f64>(4, 4, 1, 1.0).is_err());
    }

    #[test]
    fn normalize_rows() {
        let set = MaskSet::from_matrix(
            m(&[vec![0.5, 0.25], vec![-2.0, 1.0], vec![1.0, -0.5]]),
            MaskFamily::Learned,
        )
        .unwrap();
        let n = normalize_masks(&set).unwrap();
        assert_eq!(
            n.matrix(),
            &m(&[vec![1.0, 0.5], vec![-1.0, 0.5], vec![1.0, -0.5]])
        );
        assert_eq!(n.row_max(), &[0.5, 2.0, 1.0]);
        assert!(n.is_normalized());
        let again = normalize_masks(&n).unwrap();
        assert_eq!(again.matrix(), n.matrix());
        assert_eq!(again.row_max(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_rows_are_degenerate() {
        let err = MaskSet::from_matrix(m(&[vec![1.0, 0.0], vec![0.0, 0.0]]), MaskFamily::Learned);
        assert!(matches!(err, Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn dual_rail_example() {
        let pair = dual_rail_split(&m(&[vec![1.0, -2.0], vec![0.0, 3.0]]));
        assert_eq!(pair.positive, m(&[vec![1.0, 0.0], vec![0.0, 3.0]]));
        assert_eq!(pair.negative, m(&[vec![0.0, 2.0], vec![0.0, 0.0]]));
        assert_eq!(pair.recombine(), m(&[vec![1.0, -2.0], vec![0.0, 3.0]]));
    }

    #[test]
    fn lambda_examples() {
        let budget = PhotonBudget::from_total(160.0).unwrap();
        let rs = raster::<f64>(4).unwrap();
        assert_eq!(
            photon_distribution_factor(&rs, &budget, RailMode::DualOneSensor).unwrap(),
            10.0
        );
        assert_eq!(
            photon_distribution_factor(&rs, &budget, RailMode::SinglePositive).unwrap(),
            10.0
        );
        let hb = hadamard::<f64>(4).unwrap();
        assert_eq!(
            photon_distribution_factor(&hb, &budget, RailMode::DualOneSensor).unwrap(),
            5.0
        );
        assert_eq!(
            photon_distribution_factor(&hb, &budget, RailMode::DualTwoSensors).unwrap(),
            10.0
        );
        assert!(matches!(
            photon_distribution_factor(&hb, &budget, RailMode::SinglePositive),
            Err(Error::Domain(_))
        ));
        let ii = impulse::<f64>(4).unwrap();
        assert_eq!(
            photon_distribution_factor(&ii, &budget, RailMode::DualOneSensor).unwrap(),
            40.0
        );
    }

    #[test]
    fn budget_validation() {
        let b = PhotonBudget::new(50.0, 2.0).unwrap();
        assert_eq!(b.total(), 100.0);
        assert!(PhotonBudget::new(0.0, 1.0).is_err());
        assert!(PhotonBudget::new(1.0, -1.0).is_err());
        assert!(PhotonBudget::from_total(f64::NAN).is_err());
    }

    #[test]
    fn family_and_rail_parse() {
        for fam in MaskFamily::ALL {
            assert_eq!(fam.tag().parse::<MaskFamily>().unwrap(), fam);
        }
        assert_eq!("hadamard".parse::<MaskFamily>().unwrap(), MaskFamily::Hadamard);
        assert!("nope".parse::<MaskFamily>().is_err());
        for rail in [
            RailMode::SinglePositive,
            RailMode::DualTwoSensors,
            RailMode::DualOneSensor,
        ] {
            assert_eq!(rail.tag().parse::<RailMode>().unwrap(), rail);
        }
    }

    #[test]
    fn pca_one_axis_and_diagonal() {
        // variance only along axis 0
        let data = m(&[
            vec![2.0, 0.0, 0.0],
            vec![-2.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
        ]);
        let pca = pca_masks(&data, 1).unwrap();
        assert_eq!(pca.masks.matrix().row(0), &[1.0, 0.0, 0.0]);
        assert!(!pca.is_rank_deficient());
        let deficient = pca_masks(&data, 2).unwrap();
        assert!(deficient.is_rank_deficient());
        assert_eq!(deficient.masks.num_masks(), 1);

        // covariance diag(4, 1): corners of a rectangle
        let data = m(&[
            vec![2.0, 1.0],
            vec![-2.0, 1.0],
            vec![2.0, -1.0],
            vec![-2.0, -1.0],
        ]);
        let pca = pca_masks(&data, 2).unwrap();
        assert!(pca.components.row(0)[0].abs() > 0.999);
        let d = crate::scalar::dot(pca.components.row(0), pca.components.row(1));
        assert!(d.abs() < 1e-8);
        assert!((pca.eigenvalues[0] / pca.eigenvalues[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn pca_needs_enough_samples() {
        let data = m(&[vec![1.0, 2.0]]);
        assert!(pca_masks(&data, 2).is_err());
        assert!(pca_masks(&data, 0).is_err());
    }
}
