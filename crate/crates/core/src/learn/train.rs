//! Training loops: fixed-mask classifiers, jointly optimized scanners
//! (ONN) and the mask-convergence reconstruction experiment.

use serde::{Deserialize, Serialize};

use super::net::{
    argmax_rows, gather_rows, mean_abs_offdiag, offdiag_ratio, BranchMeans, NoiseDraws,
    Preprocessor, ScannerConfig, SensingNet, Targets,
};
use super::optim::{Optimizer, OptimizerKind};
use crate::data::{permutation, LabeledDataset, PatternSource};
use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::masks::{hadamard01, pca_masks, MaskFamily, MaskSet, PhotonBudget, RailMode};
use crate::noise::{NoiseModel, RngStream, SpcRng, RATE_FLOOR};
use crate::scalar::Scalar;
use crate::stats::{histogram, Binning, Histogram};

use rand::Rng;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_MASKS: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Step size of the scanner masks; defaults to `learning_rate`.
    pub mask_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Stop after this many epochs without a better validation accuracy.
    pub patience: Option<usize>,
    pub hidden: Vec<usize>,
    pub rate_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            mask_learning_rate: None,
            batch_size: 5000,
            epochs: 2000,
            dropout: 0.2,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            patience: Some(20),
            hidden: vec![40, 128],
            rate_floor: RATE_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: String| Err(Error::Config(format!("train.{field}: {v}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.mask_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("mask_learning_rate", format!("must be nonnegative, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if self.patience == Some(0) {
            return bad("patience", "must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "widths must be positive".into());
        }
        if !(self.rate_floor > 0.0) {
            return bad("rate_floor", "must be positive".into());
        }
        Ok(())
    }

    fn optimizer<T: Scalar>(&self) -> Result<Optimizer<T>> {
        Optimizer::new(
            self.optimizer,
            self.learning_rate,
            self.mask_learning_rate.unwrap_or(self.learning_rate),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: Option<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier<T> {
    /// Network at the epoch with the best validation accuracy.
    pub net: SensingNet<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
}

/// Initial scanner masks for joint optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskInit {
    /// First `m` rows of the identity.
    Identity,
    /// First `m` sequency-ordered rows of the `{0, 1}` Hadamard matrix.
    Hadamard01,
    /// I.i.d. `U(0, 1)` entries.
    Random,
    /// Max-abs normalized principal components of the training data.
    Pca,
}

impl MaskInit {
    pub fn build<T: Scalar>(&self, m: usize, n: usize, train: Option<&Matrix<T>>, seed: u64) -> Result<Matrix<T>> {
        if m == 0 || m > n {
            return Err(Error::InvalidDimension(format!("need 1 <= m <= N, got m={m}, N={n}")));
        }
        match self {
            MaskInit::Identity => Ok(Matrix::from_fn(m, n, |i, j| if i == j { T::one() } else { T::zero() })),
            MaskInit::Hadamard01 => {
                let h = hadamard01::<T>(n)?;
                Ok(Matrix::from_fn(m, n, |i, j| h[(i, j)]))
            }
            MaskInit::Random => {
                let mut rng = RngStream::new(seed, STREAM_MASKS).rng();
                Ok(Matrix::from_fn(m, n, |_, _| T::lit(rng.gen::<f64>())))
            }
            MaskInit::Pca => {
                let samples = train.ok_or_else(|| Error::Config("PCA init needs training data".into()))?;
                Ok(pca_masks(samples, m)?.masks.matrix().clone())
            }
        }
    }
}

struct Streams {
    noise: SpcRng,
    dropout: SpcRng,
}

impl Streams {
    fn epoch(seed: u64, epoch: usize) -> Self {
        Self {
            noise: RngStream::new(seed, STREAM_NOISE).substream(epoch as u64).rng(),
            dropout: RngStream::new(seed, STREAM_DROPOUT).substream(epoch as u64).rng(),
        }
    }
}

/// One optimizer step on a batch; returns the batch loss.
fn train_step<T: Scalar>(
    net: &mut SensingNet<T>,
    opt: &mut Optimizer<T>,
    x: &Matrix<T>,
    means: &BranchMeans<T>,
    targets: Targets<'_, T>,
    streams: &mut Streams,
    freeze_eps: bool,
    epoch: usize,
) -> Result<f64> {
    let lambda = net.lambda()?;
    let b = means.rows();
    let eps = if freeze_eps {
        NoiseDraws::zeros(b, net.num_masks())
    } else {
        NoiseDraws::draw(b, net.num_masks(), &mut streams.noise)
    };
    let keep = net.draw_dropout(b, &mut streams.dropout);
    let tape = net.forward_train(means, &eps, &keep, lambda)?;
    let (loss, grads) = net.backward(&tape, x, &keep, targets)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            message: format!("loss {loss}, λ = {lambda:e}, {} masks", net.num_masks()),
        });
    }
    opt.step(net, &grads)?;
    Ok(loss)
}

/// Accuracy with the true sampler and dropout off.
pub fn evaluate_accuracy<T: Scalar>(
    net: &SensingNet<T>,
    data: &LabeledDataset<T>,
    stream: RngStream,
) -> Result<f64> {
    let means = net.branch_means(data.samples())?;
    accuracy_from_means(net, &means, data.labels(), stream)
}

fn accuracy_from_means<T: Scalar>(
    net: &SensingNet<T>,
    means: &BranchMeans<T>,
    labels: &[usize],
    stream: RngStream,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidDimension("cannot evaluate on an empty dataset".into()));
    }
    let mut rng = stream.rng();
    let y = net.scan_sample(means, net.lambda()?, &mut rng)?;
    let pred = argmax_rows(&net.predict_from_measurements(&y));
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn fit_classifier<T: Scalar>(
    mut net: SensingNet<T>,
    train: &LabeledDataset<T>,
    validation: &LabeledDataset<T>,
    config: &TrainConfig,
) -> Result<TrainedClassifier<T>> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let mut opt = config.optimizer::<T>()?;
    let fixed = !net.train_masks;
    let (mut train_means, mut val_means) = (None, None);
    if fixed {
        train_means = Some(net.branch_means(train.samples())?);
        val_means = Some(net.branch_means(validation.samples())?);
    }
    let empty = Matrix::zeros(0, net.num_pixels());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, SensingNet<T>)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        let perm = permutation(
            train.len(),
            &mut RngStream::new(config.seed, STREAM_SHUFFLE).substream(epoch as u64).rng(),
        );
        let mut streams = Streams::epoch(config.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in perm.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let (x, means) = match &train_means {
                Some(m) => (empty.clone(), m.select(chunk)),
                None => {
                    let x = gather_rows(train.samples(), chunk);
                    let m = net.branch_means(&x)?;
                    (x, m)
                }
            };
            let loss = train_step(
                &mut net,
                &mut opt,
                &x,
                &means,
                Targets::Labels(&labels),
                &mut streams,
                false,
                epoch,
            )?;
            loss_sum += loss * chunk.len() as f64;
        }
        let eval_stream = RngStream::new(config.seed, STREAM_EVAL).substream(epoch as u64);
        let acc = match &val_means {
            Some(m) => accuracy_from_means(&net, m, validation.labels(), eval_stream)?,
            None => evaluate_accuracy(&net, validation, eval_stream)?,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            validation_accuracy: Some(acc),
            lambda: net.lambda()?,
        });
        if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
            best = Some((acc, epoch, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (best_validation_accuracy, best_epoch, net) = best.expect("at least one epoch");
    Ok(TrainedClassifier {
        net,
        history,
        best_epoch,
        best_validation_accuracy,
    })
}

fn classifier_net<T: Scalar>(
    masks: Matrix<T>,
    train: &LabeledDataset<T>,
    scanner: ScannerConfig,
    config: &TrainConfig,
) -> Result<SensingNet<T>> {
    config.validate()?;
    if masks.cols() != train.num_pixels() {
        return Err(Error::DimensionMismatch {
            expected: masks.cols(),
            actual: train.num_pixels(),
            context: "mask pixel count vs dataset",
        });
    }
    let mut rng = RngStream::new(config.seed, STREAM_INIT).rng();
    let mut scanner = scanner;
    scanner.rate_floor = config.rate_floor;
    let mut net = SensingNet::classifier(
        masks,
        &config.hidden,
        train.num_classes(),
        scanner,
        config.dropout,
        &mut rng,
    )?;
    net.preprocessor = Preprocessor::fit(&net.masks, train.samples());
    Ok(net)
}

/// Trains the head on a fixed mask set; noise is redrawn every epoch and the
/// best-validation network is returned.
pub fn train_classifier<T: Scalar>(
    masks: &MaskSet<T>,
    train: &LabeledDataset<T>,
    validation: &LabeledDataset<T>,
    scanner: ScannerConfig,
    config: &TrainConfig,
) -> Result<TrainedClassifier<T>> {
    let mut scanner = scanner;
    scanner.exposure_scale = masks.exposure_scale().to_f64_lossy();
    let net = classifier_net(masks.matrix().clone(), train, scanner, config)?;
    fit_classifier(net, train, validation, config)
}

/// Jointly optimizes `m` scanner masks and the head.
pub fn train_onn<T: Scalar>(
    train: &LabeledDataset<T>,
    validation: &LabeledDataset<T>,
    m: usize,
    init: &MaskInit,
    scanner: ScannerConfig,
    config: &TrainConfig,
) -> Result<TrainedClassifier<T>> {
    let masks = init.build(m, train.num_pixels(), Some(train.samples()), config.seed)?;
    train_onn_from(train, validation, masks, scanner, config)
}

/// [`train_onn`] starting from explicit masks (for instance a PCA basis
/// shared across runs).
pub fn train_onn_from<T: Scalar>(
    train: &LabeledDataset<T>,
    validation: &LabeledDataset<T>,
    masks: Matrix<T>,
    scanner: ScannerConfig,
    config: &TrainConfig,
) -> Result<TrainedClassifier<T>> {
    if masks.rows() == 0 || masks.rows() > masks.cols() {
        return Err(Error::InvalidDimension(format!(
            "need 1 <= m <= N, got {}x{} masks",
            masks.rows(),
            masks.cols()
        )));
    }
    let mut net = classifier_net(masks, train, scanner, config)?;
    net.train_masks = true;
    fit_classifier(net, train, validation, config)
}

/// Learned masks of a trained network as a mask set.
pub fn learned_masks<T: Scalar>(net: &SensingNet<T>) -> Result<MaskSet<T>> {
    Ok(MaskSet::from_matrix(net.masks.clone(), MaskFamily::Learned)?
        .with_exposure_scale(T::lit(net.scanner.exposure_scale))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    /// Patterns are `side × side`.
    pub side: usize,
    pub patterns: usize,
    /// Number of pattern sets drawn over the run.
    pub regenerations: usize,
    pub total_photons: f64,
    pub noise: NoiseModel,
    pub rail: RailMode,
    pub init: MaskInit,
    /// Draw ε = 0 throughout (noiseless limit of the surrogate).
    pub freeze_eps: bool,
    pub snapshot_every: Option<usize>,
    pub histogram_bins: usize,
    pub train: TrainConfig,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            side: 8,
            patterns: 100_000,
            regenerations: 10,
            total_photons: 1e2,
            noise: NoiseModel::Poisson,
            rail: RailMode::DualOneSensor,
            init: MaskInit::Identity,
            freeze_eps: false,
            snapshot_every: None,
            histogram_bins: 40,
            train: TrainConfig {
                mask_learning_rate: Some(1e-3),
                batch_size: 1000,
                epochs: 50,
                dropout: 0.0,
                patience: None,
                hidden: Vec::new(),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSnapshot<T> {
    pub epoch: usize,
    pub masks: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ReconstructionRun<T> {
    pub net: SensingNet<T>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub snapshots: Vec<MaskSnapshot<T>>,
    pub histogram: Histogram,
    pub offdiag_ratio: f64,
    pub mean_abs_offdiag: f64,
}

impl<T: Scalar> ReconstructionRun<T> {
    pub fn masks(&self) -> Result<MaskSet<T>> {
        learned_masks(&self.net)
    }
}

/// Histogram of all mask entries over `bins` equal bins spanning their range.
pub fn mask_entry_histogram<T: Scalar>(masks: &Matrix<T>, bins: usize) -> Result<Histogram> {
    let vals: Vec<f64> = masks.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    histogram(&vals, &Binning::Uniform { count: bins, lo, hi })
}

/// Joint scanner + linear reconstructor training on uniform random patterns.
pub fn train_reconstructor<T: Scalar>(config: &ReconstructionConfig) -> Result<ReconstructionRun<T>> {
    config.train.validate()?;
    let n = config.side * config.side;
    if n == 0 || config.regenerations == 0 {
        return Err(Error::Config("side and regenerations must be positive".into()));
    }
    let budget = PhotonBudget::from_total(config.total_photons)?;
    let mut scanner = ScannerConfig::new(config.noise, budget);
    scanner.rail = config.rail;
    scanner.rate_floor = config.train.rate_floor;
    let masks = config.init.build::<T>(n, n, None, config.train.seed)?;
    let inverse = Lu::new(&masks).map(|lu| lu.inverse()).unwrap_or_else(|_| Matrix::identity(n));
    let mut net = SensingNet::reconstructor(masks, inverse, scanner)?;
    net.train_masks = true;
    let mut opt = config.train.optimizer::<T>()?;
    let epochs = config.train.epochs;
    let period = epochs.div_ceil(config.regenerations).max(1);
    let source = PatternSource::new(config.patterns, n, config.train.seed, Some(period))?;
    let mut data = source.generation::<T>(0)?;
    let mut generation = 0;
    let mut loss_trace = Vec::with_capacity(epochs);
    let mut snapshots = Vec::new();
    for epoch in 0..epochs {
        let g = source.generation_for_epoch(epoch);
        if g != generation {
            generation = g;
            data = source.generation(g)?;
        }
        if config.snapshot_every.is_some_and(|k| k > 0 && epoch % k == 0) {
            snapshots.push(MaskSnapshot {
                epoch,
                masks: net.masks.as_slice().to_vec(),
            });
        }
        let perm = permutation(
            data.len(),
            &mut RngStream::new(config.train.seed, STREAM_SHUFFLE).substream(epoch as u64).rng(),
        );
        let mut streams = Streams::epoch(config.train.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in perm.chunks(config.train.batch_size) {
            let x = gather_rows(data.samples(), chunk);
            let means = net.branch_means(&x)?;
            let loss = train_step(
                &mut net,
                &mut opt,
                &x,
                &means,
                Targets::Scenes(&x),
                &mut streams,
                config.freeze_eps,
                epoch,
            )?;
            loss_sum += loss * chunk.len() as f64;
        }
        loss_trace.push(loss_sum / data.len() as f64);
    }
    snapshots.push(MaskSnapshot {
        epoch: epochs,
        masks: net.masks.as_slice().to_vec(),
    });
    Ok(ReconstructionRun {
        histogram: mask_entry_histogram(&net.masks, config.histogram_bins.max(1))?,
        offdiag_ratio: offdiag_ratio(&net.masks),
        mean_abs_offdiag: mean_abs_offdiag(&net.masks),
        net,
        loss_trace,
        snapshots,
    })
}
