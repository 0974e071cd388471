//! End-to-end forward model (masks + budget + noise) and full-rank linear
//! reconstruction.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::masks::{
    dual_rail_split, photon_distribution_factor, DualRailPair, MaskFamily, MaskSet, PhotonBudget,
    RailMode,
};
use crate::noise::{check_scene, poisson, standard_normal, NoiseModel, RngStream};
use crate::scalar::Scalar;
use crate::stats::summarize;

/// Unit image representation of the field of view, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneVector<T> {
    x: Vec<T>,
    side: Option<usize>,
}

impl<T: Scalar> SceneVector<T> {
    pub fn new(x: Vec<T>) -> Result<Self> {
        check_scene(&x, x.len())?;
        let side = (x.len() as f64).sqrt().round() as usize;
        let side = (side * side == x.len()).then_some(side);
        Ok(Self { x, side })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.x
    }

    pub fn into_vec(self) -> Vec<T> {
        self.x
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Side length when the scene is a square image.
    pub fn side(&self) -> Option<usize> {
        self.side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement<T> {
    /// Normalized photon counts.
    pub y_tilde: Vec<T>,
    pub lambda: f64,
    pub rail_mode: RailMode,
    pub noise: NoiseModel,
}

/// A mask set bound to a budget, rail mode and noise model, with λ and the
/// dual-rail split precomputed.
#[derive(Clone, Debug)]
pub struct MeasurementModel<T> {
    masks: MaskSet<T>,
    split: Option<DualRailPair<T>>,
    lambda: f64,
    noise: NoiseModel,
    rail: RailMode,
}

impl<T: Scalar> MeasurementModel<T> {
    /// Masks are used as stored; every generator in [`crate::masks`] already
    /// returns max-abs normalized rows.
    pub fn new(
        masks: &MaskSet<T>,
        budget: &PhotonBudget,
        noise: NoiseModel,
        rail: RailMode,
    ) -> Result<Self> {
        noise.validate()?;
        let lambda = photon_distribution_factor(masks, budget, rail)?;
        let split = masks.has_negative().then(|| dual_rail_split(masks.matrix()));
        Ok(Self {
            masks: masks.clone(),
            split,
            lambda,
            noise,
            rail,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn masks(&self) -> &MaskSet<T> {
        &self.masks
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn rail_mode(&self) -> RailMode {
        self.rail
    }

    /// Whether M⁺ and M⁻ are acquired as separate branches.
    pub fn is_dual_rail(&self) -> bool {
        self.split.is_some()
    }

    pub fn measure<R: Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> Result<Measurement<T>> {
        check_scene(x, self.masks.num_pixels())?;
        let y_tilde = self.sample(x, rng)?;
        Ok(Measurement {
            y_tilde,
            lambda: self.lambda,
            rail_mode: self.rail,
            noise: self.noise,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> Result<Vec<T>> {
        let lambda = self.lambda;
        if let NoiseModel::Noiseless = self.noise {
            return Ok(self.masks.matrix().matvec(x));
        }
        let (plus, minus) = match &self.split {
            Some(pair) => (pair.positive.matvec(x), Some(pair.negative.matvec(x))),
            None => (self.masks.matrix().matvec(x), None),
        };
        let mut out = Vec::with_capacity(plus.len());
        for k in 0..plus.len() {
            let rp = lambda * plus[k].to_f64_lossy();
            let rm = minus.as_ref().map(|m| lambda * m[k].to_f64_lossy());
            let counts = match self.noise {
                NoiseModel::Gaussian { sigma } => {
                    let pos = rp + sigma * standard_normal(rng);
                    match rm {
                        Some(rm) => pos - (rm + sigma * standard_normal(rng)),
                        None => pos,
                    }
                }
                NoiseModel::Poisson => {
                    if rp < 0.0 || rm.is_some_and(|r| r < 0.0) {
                        return Err(Error::Domain(format!("negative photon rate at mask {k}")));
                    }
                    let pos = poisson(rp, rng) as f64;
                    match rm {
                        Some(rm) => pos - poisson(rm, rng) as f64,
                        None => pos,
                    }
                }
                NoiseModel::Noiseless => unreachable!(),
            };
            out.push(T::lit(counts / lambda));
        }
        Ok(out)
    }
}

/// Simulates one noisy acquisition of `x`.
pub fn measure<T: Scalar, R: Rng + ?Sized>(
    x: &SceneVector<T>,
    masks: &MaskSet<T>,
    budget: &PhotonBudget,
    noise: NoiseModel,
    rail: RailMode,
    rng: &mut R,
) -> Result<Measurement<T>> {
    MeasurementModel::new(masks, budget, noise, rail)?.measure(x.as_slice(), rng)
}

/// Inverse of a square mask set: analytic `Hᵀ/N` for Hadamard, pivoted LU
/// otherwise.
#[derive(Clone, Debug)]
pub enum FullRankInverse<T> {
    Hadamard { transpose: Matrix<T>, n: usize },
    General(Lu<T>),
}

impl<T: Scalar> FullRankInverse<T> {
    pub fn new(masks: &MaskSet<T>) -> Result<Self> {
        if !masks.is_square() {
            return Err(Error::InvalidDimension(format!(
                "full-rank reconstruction needs square masks, got {}x{}",
                masks.num_masks(),
                masks.num_pixels()
            )));
        }
        if masks.family() == MaskFamily::Hadamard {
            return Ok(FullRankInverse::Hadamard {
                transpose: masks.matrix().transpose(),
                n: masks.num_pixels(),
            });
        }
        Ok(FullRankInverse::General(Lu::new(masks.matrix())?))
    }

    pub fn apply(&self, y: &[T]) -> Vec<T> {
        match self {
            FullRankInverse::Hadamard { transpose, n } => {
                let inv_n = T::one() / T::from_usize_lossy(*n);
                transpose.matvec(y).into_iter().map(|v| v * inv_n).collect()
            }
            FullRankInverse::General(lu) => lu.solve(y),
        }
    }
}

/// `x̃ = M⁻¹ ỹ`
pub fn reconstruct_fullrank<T: Scalar>(meas: &Measurement<T>, masks: &MaskSet<T>) -> Result<Vec<T>> {
    if meas.y_tilde.len() != masks.num_masks() {
        return Err(Error::DimensionMismatch {
            expected: masks.num_masks(),
            actual: meas.y_tilde.len(),
            context: "measurement length vs mask count",
        });
    }
    Ok(FullRankInverse::new(masks)?.apply(&meas.y_tilde))
}

/// Where the Monte Carlo trials draw their scenes from.
#[derive(Clone, Copy, Debug)]
pub enum SceneSource<'a, T> {
    Fixed(&'a [T]),
    /// Trial `t` uses row `t mod rows`.
    Dataset(&'a Matrix<T>),
}

impl<T: Scalar> SceneSource<'_, T> {
    fn scene(&self, trial: usize) -> &[T] {
        match self {
            SceneSource::Fixed(x) => x,
            SceneSource::Dataset(m) => m.row(trial % m.rows()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub family: String,
    pub noise: String,
    pub rail_mode: String,
    pub total_photons: f64,
    pub trial_count: usize,
    pub mse_mean: f64,
    pub mse_stderr: f64,
}

/// Stream id of trial `trial` in budget cell `cell`.
pub fn trial_stream(seed: u64, cell: usize, trial: usize) -> RngStream {
    RngStream::new(seed, ((cell as u64) << 32) | trial as u64)
}

/// Per-pixel reconstruction MSE `‖x̃ − x‖² / N` of every trial at one budget.
pub fn mse_trials<T: Scalar>(
    masks: &MaskSet<T>,
    scenes: SceneSource<'_, T>,
    budget: &PhotonBudget,
    noise: NoiseModel,
    rail: RailMode,
    trials: usize,
    seed: u64,
    cell: usize,
) -> Result<Vec<f64>> {
    let model = MeasurementModel::new(masks, budget, noise, rail)?;
    let inverse = FullRankInverse::new(masks)?;
    let n = masks.num_pixels() as f64;
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let x = scenes.scene(t);
            let mut rng = trial_stream(seed, cell, t).rng();
            let meas = model.measure(x, &mut rng)?;
            let xr = inverse.apply(&meas.y_tilde);
            let se: f64 = xr
                .iter()
                .zip(x)
                .map(|(a, b)| (*a - *b).to_f64_lossy().powi(2))
                .sum();
            Ok(se / n)
        })
        .collect()
}

/// Monte Carlo reconstruction error over a budget sweep.
pub fn empirical_mse<T: Scalar>(
    masks: &MaskSet<T>,
    scenes: SceneSource<'_, T>,
    budgets: &[f64],
    noise: NoiseModel,
    rail: RailMode,
    trials: usize,
    seed: u64,
) -> Result<Vec<MseRow>> {
    if trials < 2 {
        return Err(Error::Parameter(format!("need at least 2 trials, got {trials}")));
    }
    if let SceneSource::Dataset(m) = scenes {
        if m.rows() == 0 {
            return Err(Error::InvalidDimension("empty scene dataset".into()));
        }
    }
    budgets
        .iter()
        .enumerate()
        .map(|(cell, &total)| {
            let budget = PhotonBudget::from_total(total)?;
            let mses = mse_trials(masks, scenes, &budget, noise, rail, trials, seed, cell)?;
            let summary = summarize(&mses)?;
            Ok(MseRow {
                family: masks.family().tag().to_string(),
                noise: noise.tag().to_string(),
                rail_mode: rail.tag().to_string(),
                total_photons: total,
                trial_count: trials,
                mse_mean: summary.mean,
                mse_stderr: summary.stderr.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn write_mse_csv<W: Write>(rows: &[MseRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<mse csv>", e))?;
    Ok(())
}
