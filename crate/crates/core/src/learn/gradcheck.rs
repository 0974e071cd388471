//! Central finite-difference check of [`SensingNet::backward`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{DropoutMasks, NoiseDraws, SensingNet, Targets};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::noise::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    /// `masks`, or `layer<i>.weight` / `layer<i>.bias`.
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU; excluded from the max.
    pub skipped_kinks: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    /// Largest errors first.
    pub worst: Vec<ParamError>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    /// `Ok` when within tolerance, otherwise an error listing the worst
    /// parameters.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let list: Vec<String> = self
            .worst
            .iter()
            .map(|e| {
                format!(
                    "{}[{}]: analytic {:e}, numeric {:e}, rel {:e}",
                    e.tensor, e.index, e.analytic, e.numeric, e.relative_error
                )
            })
            .collect();
        Err(Error::Parameter(format!(
            "gradient check failed: max relative error {:e} >= {:e}; {}",
            self.max_relative_error,
            self.tolerance,
            list.join("; ")
        )))
    }
}

/// Outer finite-difference step; the estimate is Richardson-extrapolated
/// from steps `h` and `h/2`, so truncation error is `O(h⁴)`.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than `FD_ABS_FLOOR · max(1, |loss|)` are compared in
/// absolute terms; difference round-off grows with the loss value.
pub const FD_ABS_FLOOR: f64 = 1e-6;

fn tensor_names(net: &SensingNet<f64>) -> Vec<String> {
    let mut names = Vec::new();
    if net.train_masks {
        names.push("masks".to_string());
    }
    for i in 0..net.layers.len() {
        names.push(format!("layer{i}.weight"));
        names.push(format!("layer{i}.bias"));
    }
    names
}

/// Compares analytic gradients with central differences at fixed noise
/// draws, dropout masks and λ (held at its value for the unperturbed masks).
pub fn gradient_check(
    net: &SensingNet<f64>,
    x: &Matrix<f64>,
    targets: Targets<'_, f64>,
    eps: &NoiseDraws<f64>,
    keep: &DropoutMasks<f64>,
    tolerance: f64,
) -> Result<GradientReport> {
    let lambda = net.lambda()?;
    let eval = |n: &SensingNet<f64>| -> Result<(f64, Vec<bool>)> {
        let means = n.branch_means(x)?;
        let tape = n.forward_train(&means, eps, keep, lambda)?;
        let pattern = tape
            .hidden
            .iter()
            .flat_map(|h| h.as_slice().iter().map(|v| *v > 0.0))
            .collect();
        Ok((n.loss_value(&tape.output, targets)?, pattern))
    };
    let means = net.branch_means(x)?;
    let tape = net.forward_train(&means, eps, keep, lambda)?;
    let (_, grads) = net.backward(&tape, x, keep, targets)?;
    let (base_loss, base_pattern) = eval(net)?;
    let floor = FD_ABS_FLOOR * base_loss.abs().max(1.0);
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let names = tensor_names(net);
    let mut work = net.clone();
    let mut errors = Vec::new();
    let mut skipped_kinks = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work.param_slices_mut()[t][i];
            let mut central = [0.0; 2];
            let mut kink = false;
            for (slot, h) in [FD_STEP, FD_STEP / 2.0].into_iter().enumerate() {
                work.param_slices_mut()[t][i] = orig + h;
                let (up, p_up) = eval(&work)?;
                work.param_slices_mut()[t][i] = orig - h;
                let (down, p_down) = eval(&work)?;
                kink |= p_up != base_pattern || p_down != base_pattern;
                central[slot] = (up - down) / (2.0 * h);
            }
            work.param_slices_mut()[t][i] = orig;
            if kink {
                skipped_kinks += 1;
                continue;
            }
            let numeric = (4.0 * central[1] - central[0]) / 3.0;
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            errors.push(ParamError {
                tensor: names[t].clone(),
                index: i,
                analytic: a,
                numeric,
                relative_error: rel,
            });
        }
    }
    errors.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
    let max = errors.first().map_or(0.0, |e| e.relative_error);
    let checked = errors.len();
    errors.truncate(5);
    Ok(GradientReport {
        checked,
        skipped_kinks,
        max_relative_error: max,
        tolerance,
        worst: errors,
    })
}

/// Gradient check on a random batch: scenes in `U(0, 1)`, random labels for
/// classifiers, fresh ε and dropout masks, all drawn from `seed`.
pub fn gradient_check_random(
    net: &SensingNet<f64>,
    batch: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradientReport> {
    let mut rng = RngStream::new(seed, 0).rng();
    let n = net.num_pixels();
    let x = Matrix::from_fn(batch, n, |_, _| rng.gen::<f64>());
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..net.num_outputs())).collect();
    let eps = NoiseDraws::draw(batch, net.num_masks(), &mut rng);
    let keep = net.draw_dropout(batch, &mut rng);
    let targets = match net.loss {
        super::net::Loss::CrossEntropy => Targets::Labels(&labels),
        super::net::Loss::Mse => Targets::Scenes(&x),
    };
    gradient_check(net, &x, targets, &eps, &keep, tolerance)
}
