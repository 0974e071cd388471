//! Differentiable scanner followed by a fully connected head.
//!
//! The scanner holds unconstrained real masks `W` (`m × N`). At every step
//! λ is recomputed from the current `W` with the same accounting as
//! [`crate::masks::photon_distribution_factor_raw`] and then held constant
//! for backpropagation. A row with largest entry `v_k` behaves like the
//! normalized mask `W_k / v_k` displayed for a dwell time proportional to
//! `v_k`, so `ỹ = counts / λ` estimates `W x` directly.
//!
//! Training draws `ỹ` from the reparameterized surrogate (fixed ε), which
//! makes the loss differentiable in `W`; evaluation uses the true samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::masks::{dual_rail_split, photon_distribution_factor_raw, PhotonBudget, RailMode};
use crate::noise::{
    poisson, standard_normal, surrogate_std, surrogate_std_derivative, NoiseModel, RATE_FLOOR,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Softmax cross-entropy against integer labels.
    #[default]
    CrossEntropy,
    /// Mean squared error against the clean scene, averaged over pixels.
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `out × in`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![T::zero(); outputs],
        }
    }

    /// Uniform init with bound `√(6 / fan_in)` for ReLU layers, or
    /// `√(6 / (fan_in + fan_out))` otherwise; zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, relu: bool, rng: &mut R) -> Self {
        let denom = if relu { inputs } else { inputs + outputs } as f64;
        let bound = (6.0 / denom).sqrt();
        let weight = Matrix::from_fn(outputs, inputs, |_, _| T::lit(rng.gen_range(-bound..bound)));
        Self {
            weight,
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// `x Wᵀ + b` for a batch in rows.
    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = x.matmul_t(&self.weight);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += *b;
            }
        }
        out
    }
}

/// Training-set statistics applied to the scanner output before the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor<T> {
    /// Training mean `x̄_T` in image space; the head sees `ỹ − W x̄_T`.
    pub mean: Option<Vec<T>>,
    /// Constant multiplier on the centered input, fixed before training.
    pub scale: T,
}

impl<T: Scalar> Preprocessor<T> {
    pub fn identity() -> Self {
        Self {
            mean: None,
            scale: T::one(),
        }
    }

    /// Centers with the training mean and scales the noiseless centered
    /// features `W (x − x̄_T)` to unit root-mean-square.
    pub fn fit(masks: &Matrix<T>, train: &Matrix<T>) -> Self {
        let n = train.cols();
        let rows = train.rows().max(1);
        let mut mean = vec![T::zero(); n];
        for r in train.row_iter() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += *v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(rows);
        mean.iter_mut().for_each(|m| *m *= inv);
        let c = masks.matvec(&mean);
        let feats = train.matmul_t(masks);
        let mut ss = 0.0f64;
        for r in feats.row_iter() {
            for (f, ck) in r.iter().zip(&c) {
                ss += (*f - *ck).to_f64_lossy().powi(2);
            }
        }
        let rms = (ss / (rows * masks.rows()) as f64).sqrt();
        let scale = if rms > 0.0 && rms.is_finite() { T::lit(1.0 / rms) } else { T::one() };
        Self {
            mean: Some(mean),
            scale,
        }
    }
}

/// Noise model, budget and rail accounting of the scanner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerConfig {
    pub noise: NoiseModel,
    pub budget: PhotonBudget,
    pub rail: RailMode,
    pub exposure_scale: f64,
    /// Rate below which the surrogate standard deviation is continued
    /// linearly.
    pub rate_floor: f64,
}

impl ScannerConfig {
    pub fn new(noise: NoiseModel, budget: PhotonBudget) -> Self {
        Self {
            noise,
            budget,
            rail: RailMode::default(),
            exposure_scale: 1.0,
            rate_floor: RATE_FLOOR,
        }
    }
}

/// Scanner masks plus the fully connected head.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingNet<T> {
    /// Raw trainable masks `W`, `m × N`.
    pub masks: Matrix<T>,
    pub train_masks: bool,
    pub layers: Vec<Dense<T>>,
    pub loss: Loss,
    pub scanner: ScannerConfig,
    pub preprocessor: Preprocessor<T>,
    /// Drop probability of the hidden layers.
    pub dropout: f64,
}

/// Standard normal draws for both branches of every measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws<T> {
    pub plus: Matrix<T>,
    pub minus: Matrix<T>,
}

impl<T: Scalar> NoiseDraws<T> {
    pub fn draw<R: Rng + ?Sized>(batch: usize, m: usize, rng: &mut R) -> Self {
        let mut g = || Matrix::from_fn(batch, m, |_, _| T::lit(standard_normal(rng)));
        let plus = g();
        let minus = g();
        Self { plus, minus }
    }

    pub fn zeros(batch: usize, m: usize) -> Self {
        Self {
            plus: Matrix::zeros(batch, m),
            minus: Matrix::zeros(batch, m),
        }
    }
}

/// Keep masks (1 or 0) for every hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks<T> {
    pub keep: Vec<Matrix<T>>,
}

/// Noiseless branch means `W⁺x` and `W⁻x` for a batch; `minus` is `None`
/// when `W` has no negative entry.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchMeans<T> {
    pub plus: Matrix<T>,
    pub minus: Option<Matrix<T>>,
}

impl<T: Scalar> BranchMeans<T> {
    pub fn rows(&self) -> usize {
        self.plus.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            plus: gather_rows(&self.plus, idx),
            minus: self.minus.as_ref().map(|m| gather_rows(m, idx)),
        }
    }
}

pub(crate) fn gather_rows<T: Scalar>(m: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), m.cols(), data).expect("uniform rows")
}

/// Intermediate values of a training forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    pub lambda: f64,
    pub dual: bool,
    pub y_tilde: Matrix<T>,
    /// `∂ỹ/∂(W⁺x)`, per element.
    pub gain_plus: Matrix<T>,
    /// `∂ỹ/∂(−W⁻x)`, per element; only for dual rail.
    pub gain_minus: Option<Matrix<T>>,
    /// Inputs to each dense layer; `acts[0]` is the preprocessed `ỹ`.
    pub acts: Vec<Matrix<T>>,
    /// Post-dropout pre-activations of the hidden layers.
    pub hidden: Vec<Matrix<T>>,
    pub output: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub masks: Option<Matrix<T>>,
    /// `(∂W, ∂b)` per dense layer.
    pub layers: Vec<(Matrix<T>, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Flat views in the order of [`SensingNet::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        if let Some(m) = &self.masks {
            out.push(m.as_slice());
        }
        for (w, b) in &self.layers {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// What the loss is measured against.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a, T> {
    Labels(&'a [usize]),
    Scenes(&'a Matrix<T>),
}

impl<T: Scalar> SensingNet<T> {
    /// Classifier with hidden widths `hidden`, ReLU after each hidden layer.
    pub fn classifier<R: Rng + ?Sized>(
        masks: Matrix<T>,
        hidden: &[usize],
        classes: usize,
        scanner: ScannerConfig,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 || hidden.contains(&0) {
            return Err(Error::InvalidDimension(format!(
                "layer widths must be positive, got hidden {hidden:?} and {classes} classes"
            )));
        }
        let mut widths = vec![masks.rows()];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(w[0], w[1], i < last, rng))
            .collect();
        let net = Self {
            masks,
            train_masks: false,
            layers,
            loss: Loss::CrossEntropy,
            scanner,
            preprocessor: Preprocessor::identity(),
            dropout,
        };
        net.validate()?;
        Ok(net)
    }

    /// Single linear layer `m → N` trained with MSE, initialized to `init`
    /// (for instance `W⁻¹`).
    pub fn reconstructor(masks: Matrix<T>, init: Matrix<T>, scanner: ScannerConfig) -> Result<Self> {
        if init.cols() != masks.rows() || init.rows() != masks.cols() {
            return Err(Error::DimensionMismatch {
                expected: masks.rows() * masks.cols(),
                actual: init.rows() * init.cols(),
                context: "reconstructor weight shape",
            });
        }
        let n = init.rows();
        let net = Self {
            masks,
            train_masks: false,
            layers: vec![Dense {
                weight: init,
                bias: vec![T::zero(); n],
            }],
            loss: Loss::Mse,
            scanner,
            preprocessor: Preprocessor::identity(),
            dropout: 0.0,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.masks.rows() == 0 || self.masks.cols() == 0 {
            return Err(Error::InvalidDimension("scanner needs at least one mask".into()));
        }
        self.scanner.noise.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        let mut width = self.masks.rows();
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs() != width || l.bias.len() != l.outputs() {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    actual: l.inputs(),
                    context: "dense layer input width",
                });
            }
            width = l.outputs();
            if i + 1 == self.layers.len() && self.loss == Loss::Mse && width != self.masks.cols() {
                return Err(Error::DimensionMismatch {
                    expected: self.masks.cols(),
                    actual: width,
                    context: "reconstructor output width",
                });
            }
        }
        if let Some(mean) = &self.preprocessor.mean {
            if mean.len() != self.masks.cols() {
                return Err(Error::DimensionMismatch {
                    expected: self.masks.cols(),
                    actual: mean.len(),
                    context: "training mean length",
                });
            }
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidDimension("network needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn num_masks(&self) -> usize {
        self.masks.rows()
    }

    pub fn num_pixels(&self) -> usize {
        self.masks.cols()
    }

    pub fn num_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// λ for the current masks.
    pub fn lambda(&self) -> Result<f64> {
        photon_distribution_factor_raw(
            &self.masks,
            self.scanner.budget.total() * self.scanner.exposure_scale,
            self.scanner.rail,
        )
    }

    pub fn has_negative_masks(&self) -> bool {
        self.masks.as_slice().iter().any(|v| *v < T::zero())
    }

    /// Noiseless branch means for a batch of scenes.
    pub fn branch_means(&self, x: &Matrix<T>) -> Result<BranchMeans<T>> {
        if x.cols() != self.num_pixels() {
            return Err(Error::DimensionMismatch {
                expected: self.num_pixels(),
                actual: x.cols(),
                context: "scene length vs mask pixel count",
            });
        }
        if self.has_negative_masks() {
            let pair = dual_rail_split(&self.masks);
            Ok(BranchMeans {
                plus: x.matmul_t(&pair.positive),
                minus: Some(x.matmul_t(&pair.negative)),
            })
        } else {
            Ok(BranchMeans {
                plus: x.matmul_t(&self.masks),
                minus: None,
            })
        }
    }

    pub fn draw_dropout<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> DropoutMasks<T> {
        let p = self.dropout;
        let keep = self.layers[..self.num_hidden()]
            .iter()
            .map(|l| {
                Matrix::from_fn(batch, l.outputs(), |_, _| {
                    if p > 0.0 && rng.gen::<f64>() < p {
                        T::zero()
                    } else {
                        T::one()
                    }
                })
            })
            .collect();
        DropoutMasks { keep }
    }

    /// No units dropped.
    pub fn no_dropout(&self, batch: usize) -> DropoutMasks<T> {
        DropoutMasks {
            keep: self.layers[..self.num_hidden()]
                .iter()
                .map(|l| Matrix::from_fn(batch, l.outputs(), |_, _| T::one()))
                .collect(),
        }
    }

    /// Surrogate measurement from precomputed branch means.
    pub fn scan_surrogate(
        &self,
        means: &BranchMeans<T>,
        eps: &NoiseDraws<T>,
        lambda: f64,
    ) -> Result<(Matrix<T>, Matrix<T>, Option<Matrix<T>>)> {
        let (b, m) = (means.plus.rows(), means.plus.cols());
        if (eps.plus.rows(), eps.plus.cols()) != (b, m) || (eps.minus.rows(), eps.minus.cols()) != (b, m) {
            return Err(Error::DimensionMismatch {
                expected: b * m,
                actual: eps.plus.rows() * eps.plus.cols(),
                context: "noise draws vs batch measurements",
            });
        }
        let floor = self.scanner.rate_floor;
        let mut y = Matrix::zeros(b, m);
        let mut gp = Matrix::from_fn(b, m, |_, _| T::one());
        let mut gm = means.minus.as_ref().map(|_| Matrix::from_fn(b, m, |_, _| T::one()));
        let inv_l = 1.0 / lambda;
        for i in 0..b {
            for k in 0..m {
                let a = means.plus[(i, k)];
                let e = eps.plus[(i, k)].to_f64_lossy();
                let am = means.minus.as_ref().map(|mm| mm[(i, k)]);
                let em = eps.minus[(i, k)].to_f64_lossy();
                let v = match self.scanner.noise {
                    NoiseModel::Noiseless => a - am.unwrap_or(T::zero()),
                    NoiseModel::Gaussian { sigma } => {
                        let mut v = a + T::lit(sigma * e * inv_l);
                        if let Some(am) = am {
                            v -= am + T::lit(sigma * em * inv_l);
                        }
                        v
                    }
                    NoiseModel::Poisson => {
                        let r = lambda * a.to_f64_lossy();
                        let mut v = a + T::lit(surrogate_std(r, floor) * e * inv_l);
                        gp[(i, k)] = T::lit(1.0 + e * surrogate_std_derivative(r, floor));
                        if let (Some(am), Some(gm)) = (am, gm.as_mut()) {
                            let r = lambda * am.to_f64_lossy();
                            v -= am + T::lit(surrogate_std(r, floor) * em * inv_l);
                            gm[(i, k)] = T::lit(1.0 + em * surrogate_std_derivative(r, floor));
                        }
                        v
                    }
                };
                y[(i, k)] = v;
            }
        }
        Ok((y, gp, gm))
    }

    /// True-sampler measurement from branch means: Poisson or Skellam
    /// counts, or Gaussian counts per branch, divided by λ.
    pub fn scan_sample<R: Rng + ?Sized>(
        &self,
        means: &BranchMeans<T>,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Matrix<T>> {
        let (b, m) = (means.plus.rows(), means.plus.cols());
        let mut y = Matrix::zeros(b, m);
        for i in 0..b {
            for k in 0..m {
                let a = means.plus[(i, k)].to_f64_lossy();
                let am = means.minus.as_ref().map(|mm| mm[(i, k)].to_f64_lossy());
                let v = match self.scanner.noise {
                    NoiseModel::Noiseless => {
                        y[(i, k)] = means.plus[(i, k)]
                            - means.minus.as_ref().map_or(T::zero(), |mm| mm[(i, k)]);
                        continue;
                    }
                    NoiseModel::Gaussian { sigma } => {
                        let mut c = lambda * a + sigma * standard_normal(rng);
                        if let Some(am) = am {
                            c -= lambda * am + sigma * standard_normal(rng);
                        }
                        c / lambda
                    }
                    NoiseModel::Poisson => {
                        let (rp, rm) = (lambda * a, am.map(|v| lambda * v));
                        if !(rp >= 0.0) || rm.is_some_and(|r| !(r >= 0.0)) {
                            return Err(Error::Domain(format!("negative photon rate at mask {k}")));
                        }
                        let mut c = poisson(rp, rng) as f64;
                        if let Some(rm) = rm {
                            c -= poisson(rm, rng) as f64;
                        }
                        c / lambda
                    }
                };
                y[(i, k)] = T::lit(v);
            }
        }
        Ok(y)
    }

    /// `W x̄_T`, or `None` without centering.
    fn center(&self) -> Option<Vec<T>> {
        self.preprocessor.mean.as_ref().map(|m| self.masks.matvec(m))
    }

    fn preprocess(&self, y: &Matrix<T>) -> Matrix<T> {
        let s = self.preprocessor.scale;
        let mut z = y.clone();
        let c = self.center();
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            match &c {
                Some(c) => row.iter_mut().zip(c).for_each(|(v, ck)| *v = (*v - *ck) * s),
                None => row.iter_mut().for_each(|v| *v *= s),
            }
        }
        z
    }

    /// Runs the head; with `keep = None` dropout is off.
    fn head(&self, z0: Matrix<T>, keep: Option<&DropoutMasks<T>>) -> (Vec<Matrix<T>>, Vec<Matrix<T>>, Matrix<T>) {
        let inv_keep = T::lit(1.0 / (1.0 - self.dropout));
        let mut acts = vec![z0];
        let mut hidden = Vec::with_capacity(self.num_hidden());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(acts.last().unwrap());
            if i == self.num_hidden() {
                return (acts, hidden, h);
            }
            if let Some(k) = keep {
                for (v, kv) in h.as_mut_slice().iter_mut().zip(k.keep[i].as_slice()) {
                    *v = *v * *kv * inv_keep;
                }
            }
            let a = h.map(|v| v.max(T::zero()));
            hidden.push(h);
            acts.push(a);
        }
        unreachable!("network has at least one layer")
    }

    /// Training forward pass with fixed noise draws, dropout masks and λ.
    pub fn forward_train(
        &self,
        means: &BranchMeans<T>,
        eps: &NoiseDraws<T>,
        keep: &DropoutMasks<T>,
        lambda: f64,
    ) -> Result<Tape<T>> {
        let (y, gain_plus, gain_minus) = self.scan_surrogate(means, eps, lambda)?;
        let z0 = self.preprocess(&y);
        let (acts, hidden, output) = self.head(z0, Some(keep));
        Ok(Tape {
            lambda,
            dual: means.minus.is_some(),
            y_tilde: y,
            gain_plus,
            gain_minus,
            acts,
            hidden,
            output,
        })
    }

    /// Head output for given measurements, dropout off.
    pub fn predict_from_measurements(&self, y: &Matrix<T>) -> Matrix<T> {
        self.head(self.preprocess(y), None).2
    }

    /// Evaluation forward pass: true sampler, dropout off.
    pub fn forward_eval<R: Rng + ?Sized>(&self, x: &Matrix<T>, rng: &mut R) -> Result<Matrix<T>> {
        let means = self.branch_means(x)?;
        let y = self.scan_sample(&means, self.lambda()?, rng)?;
        Ok(self.predict_from_measurements(&y))
    }

    /// One forward pass: training mode draws surrogate noise and dropout
    /// from `rng`, evaluation mode uses the true sampler.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Matrix<T>, rng: &mut R, training: bool) -> Result<Matrix<T>> {
        if !training {
            return self.forward_eval(x, rng);
        }
        let means = self.branch_means(x)?;
        let eps = NoiseDraws::draw(x.rows(), self.num_masks(), rng);
        let keep = self.draw_dropout(x.rows(), rng);
        Ok(self.forward_train(&means, &eps, &keep, self.lambda()?)?.output)
    }

    /// Mean loss of a forward output.
    pub fn loss_value(&self, output: &Matrix<T>, targets: Targets<'_, T>) -> Result<f64> {
        Ok(loss_and_grad(self.loss, output, targets)?.0)
    }

    /// Gradients of the mean batch loss. `x` is the scene batch that
    /// produced the tape; it is only read when the masks are trainable.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        x: &Matrix<T>,
        keep: &DropoutMasks<T>,
        targets: Targets<'_, T>,
    ) -> Result<(f64, Gradients<T>)> {
        let (loss, mut d) = loss_and_grad(self.loss, &tape.output, targets)?;
        let inv_keep = T::lit(1.0 / (1.0 - self.dropout));
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < self.num_hidden() {
                // through ReLU and dropout
                let h = &tape.hidden[i];
                let k = &keep.keep[i];
                for ((dv, hv), kv) in d.as_mut_slice().iter_mut().zip(h.as_slice()).zip(k.as_slice()) {
                    *dv = if *hv > T::zero() { *dv * *kv * inv_keep } else { T::zero() };
                }
            }
            let a_in = &tape.acts[i];
            let dw = d.t_matmul(a_in);
            let mut db = vec![T::zero(); layer.outputs()];
            for r in d.row_iter() {
                for (b, v) in db.iter_mut().zip(r) {
                    *b += *v;
                }
            }
            layers.push((dw, db));
            if i > 0 || self.train_masks {
                d = d.matmul(&layer.weight);
            }
        }
        layers.reverse();
        let masks = if self.train_masks {
            Some(self.mask_gradient(tape, x, &d)?)
        } else {
            None
        };
        Ok((loss, Gradients { masks, layers }))
    }

    /// `∂L/∂W` from `∂L/∂z0`.
    fn mask_gradient(&self, tape: &Tape<T>, x: &Matrix<T>, dz0: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() != dz0.rows() || x.cols() != self.num_pixels() {
            return Err(Error::DimensionMismatch {
                expected: dz0.rows(),
                actual: x.rows(),
                context: "scene batch vs tape",
            });
        }
        let s = self.preprocessor.scale;
        let dy = dz0.map(|v| v * s);
        let scaled = |g: &Matrix<T>| {
            let mut out = dy.clone();
            for (o, gv) in out.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *o *= *gv;
            }
            out
        };
        let mut grad = scaled(&tape.gain_plus).t_matmul(x);
        if let Some(gm) = &tape.gain_minus {
            let neg = scaled(gm).t_matmul(x);
            for ((g, n), w) in grad
                .as_mut_slice()
                .iter_mut()
                .zip(neg.as_slice())
                .zip(self.masks.as_slice())
            {
                if *w < T::zero() {
                    *g = *n;
                }
            }
        }
        if let Some(mean) = &self.preprocessor.mean {
            let m = self.num_masks();
            let mut col = vec![T::zero(); m];
            for r in dy.row_iter() {
                for (c, v) in col.iter_mut().zip(r) {
                    *c += *v;
                }
            }
            for (k, ck) in col.iter().enumerate() {
                for (g, xm) in grad.row_mut(k).iter_mut().zip(mean) {
                    *g -= *ck * *xm;
                }
            }
        }
        Ok(grad)
    }

    /// Flat mutable views of all trainable tensors: the masks when trainable,
    /// then weight and bias of every layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        if self.train_masks {
            out.push(self.masks.as_mut_slice());
        }
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&mut self) -> usize {
        self.param_slices_mut().iter().map(|s| s.len()).sum()
    }
}

/// Mean loss and its gradient with respect to the output.
pub fn loss_and_grad<T: Scalar>(
    loss: Loss,
    output: &Matrix<T>,
    targets: Targets<'_, T>,
) -> Result<(f64, Matrix<T>)> {
    let b = output.rows();
    if b == 0 {
        return Err(Error::InvalidDimension("empty batch".into()));
    }
    match (loss, targets) {
        (Loss::CrossEntropy, Targets::Labels(labels)) => {
            if labels.len() != b {
                return Err(Error::DimensionMismatch {
                    expected: b,
                    actual: labels.len(),
                    context: "labels vs batch",
                });
            }
            let c = output.cols();
            let inv_b = T::one() / T::from_usize_lossy(b);
            let mut grad = Matrix::zeros(b, c);
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Domain(format!("label {y} outside {c} classes")));
                }
                let row = output.row(i);
                let mx = row.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
                let exps: Vec<T> = row.iter().map(|v| (*v - mx).exp()).collect();
                let z: T = exps.iter().copied().sum();
                total += (z.ln() + mx - row[y]).to_f64_lossy();
                let g = grad.row_mut(i);
                for (j, e) in exps.iter().enumerate() {
                    g[j] = (*e / z - if j == y { T::one() } else { T::zero() }) * inv_b;
                }
            }
            Ok((total / b as f64, grad))
        }
        (Loss::Mse, Targets::Scenes(x)) => {
            if (x.rows(), x.cols()) != (b, output.cols()) {
                return Err(Error::DimensionMismatch {
                    expected: b * output.cols(),
                    actual: x.rows() * x.cols(),
                    context: "reconstruction targets vs output",
                });
            }
            let count = (b * output.cols()) as f64;
            let two = T::lit(2.0 / count);
            let mut grad = output.clone();
            let mut total = 0.0;
            for (g, t) in grad.as_mut_slice().iter_mut().zip(x.as_slice()) {
                let diff = *g - *t;
                total += diff.to_f64_lossy().powi(2);
                *g = diff * two;
            }
            Ok((total / count, grad))
        }
        _ => Err(Error::Config("loss kind does not match the target type".into())),
    }
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Mean absolute off-diagonal entry of the leading square block.
pub fn mean_abs_offdiag<T: Scalar>(m: &Matrix<T>) -> f64 {
    let n = m.rows().min(m.cols());
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)].to_f64_lossy().abs();
            }
        }
    }
    s / (n * (n - 1)) as f64
}

/// `Σ|off-diagonal| / Σ|diagonal|` over the leading square block.
pub fn offdiag_ratio<T: Scalar>(m: &Matrix<T>) -> f64 {
    let n = m.rows().min(m.cols());
    let (mut off, mut diag) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)].to_f64_lossy().abs();
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    off / diag
}
