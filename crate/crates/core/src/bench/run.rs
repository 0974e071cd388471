//! Executes validated experiments cell by cell.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, Experiment, ExperimentConfig, Task};
use super::results::{report, write_histogram_csv, CellSummary, Metric, ReportOptions, ResultRow, ResultWriter, Verdict, VERSION};
use crate::data::{
    load_mnist, load_spectral_csv, random_patterns, shuffled_indices, split, LabeledDataset, MnistPart,
    SpectralOptions, SplitSpec,
};
use crate::error::{Error, Result};
use crate::learn::{
    evaluate_accuracy, learned_masks, mask_entry_histogram, save_checkpoint, train_classifier, train_onn_from,
    train_reconstructor, MaskInit, ReconstructionConfig, ScannerConfig, TrainConfig, TrainedClassifier,
};
use crate::linalg::Matrix;
use crate::maskio::{load_mask_matrix, load_mask_set, save_mask_set, write_masks_csv};
use crate::masks::{
    binary_random, hadamard, impulse, pca_masks, raster, truncated_hadamard, MaskFamily, MaskSet, PhotonBudget,
};
use crate::measurement::{mse_trials, SceneSource};
use crate::noise::{NoiseModel, RngStream};
use crate::stats::{histogram, Binning, Histogram};
use crate::theory::{predict, TheoryBasis};

/// Stream used for test-set evaluation of trained classifiers.
const STREAM_TEST: u64 = 7;

/// `x_j = (j + 1) / N`.
pub fn ramp_scene(n: usize) -> Vec<f64> {
    (0..n).map(|j| (j + 1) as f64 / n as f64).collect()
}

/// Train, validation and test partitions of a labeled dataset spec.
pub fn load_labeled(spec: &DatasetSpec, seed: u64) -> Result<[LabeledDataset<f64>; 3]> {
    match spec {
        DatasetSpec::Mnist { dir, train, validation, test } => {
            let dir = DatasetSpec::mnist_dir(dir);
            let all = load_mnist::<f64>(&dir, MnistPart::Train)?;
            let want = train + validation;
            if all.len() < want {
                return Err(Error::Config(format!(
                    "field `dataset`: {want} training images requested, {} available",
                    all.len()
                )));
            }
            let pool = all.take(want);
            let order = shuffled_indices(want, seed);
            let tr = pool.subset(&order[..*train]);
            let va = pool.subset(&order[*train..]);
            let te = load_mnist::<f64>(&dir, MnistPart::Test)?;
            if te.len() < *test {
                return Err(Error::Config(format!(
                    "field `dataset.test`: {test} test images requested, {} available",
                    te.len()
                )));
            }
            Ok([tr, va, te.take(*test)])
        }
        DatasetSpec::Spectral { path, bands, has_header, train, validation } => {
            let ds = load_spectral_csv::<f64>(
                path,
                SpectralOptions {
                    bands: *bands,
                    has_header: *has_header,
                },
            )?;
            let s = split(&ds, &SplitSpec::new(*train, *validation, seed)?)?;
            Ok([s.train, s.validation, s.test])
        }
        _ => Err(Error::Config("field `dataset.kind`: not a labeled dataset".into())),
    }
}

fn scene_matrix(spec: &DatasetSpec, seed: u64) -> Result<Matrix<f64>> {
    match spec {
        DatasetSpec::Ramp { pixels } => Matrix::new(1, *pixels, ramp_scene(*pixels)),
        DatasetSpec::Uniform { pixels, count } => Ok(random_patterns::<f64>(*count, *pixels, seed)?.samples().clone()),
        other => Ok(load_labeled(other, seed)?[2].samples().clone()),
    }
}

/// Mask set of `family` over `n` pixels. `square` forces `m = N` for the
/// families where it is a choice.
pub fn build_family(
    family: MaskFamily,
    n: usize,
    m: Option<usize>,
    open_probability: f64,
    seed: u64,
    train: Option<&Matrix<f64>>,
    square: bool,
) -> Result<MaskSet<f64>> {
    let count = |name: &str| -> Result<usize> {
        if square {
            Ok(n)
        } else {
            m.ok_or_else(|| Error::Config(format!("field `masks`: required by {name}")))
        }
    };
    match family {
        MaskFamily::Raster => raster(n),
        MaskFamily::Impulse => impulse(n),
        MaskFamily::Hadamard => hadamard(n),
        MaskFamily::TruncatedHadamard => truncated_hadamard(n, count("TH")?),
        MaskFamily::BinaryRandom => Ok(binary_random(n, count("BR")?, seed, open_probability)?.with_seed(seed)),
        MaskFamily::Pca => {
            let data = train.ok_or_else(|| Error::Config("PCA masks need training data".into()))?;
            let p = pca_masks(data, count("PCA")?)?;
            if p.is_rank_deficient() {
                return Err(Error::DegenerateMask(format!(
                    "training data supports only {} of {} principal components",
                    p.components.rows(),
                    p.requested
                )));
            }
            Ok(p.masks)
        }
        MaskFamily::Learned => Err(Error::Config("learned masks come from files".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub task: Task,
    pub version: String,
    pub config_hash: String,
    pub status: String,
    pub error: Option<String>,
    pub rows: usize,
    pub results: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
    pub cells: Vec<CellSummary>,
    pub verdicts: Vec<Verdict>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
    pub summary: RunSummary,
}

struct CellOutput {
    rows: Vec<ResultRow>,
    artifacts: Vec<PathBuf>,
}

type CellFn<'a> = Box<dyn Fn() -> Result<CellOutput> + Send + Sync + 'a>;

struct Ctx<'a> {
    exp: &'a Experiment,
    artifact_dir: PathBuf,
}

impl Ctx<'_> {
    fn row(&self, family: &str, noise: &str, photons: f64, trial: usize, metric: Metric, value: f64) -> ResultRow {
        ResultRow {
            experiment: self.exp.id().to_string(),
            family: family.to_string(),
            noise: noise.to_string(),
            photons,
            trial,
            metric,
            value,
        }
    }

    fn scanner(&self, total: f64) -> Result<ScannerConfig> {
        let mut s = ScannerConfig::new(self.exp.noise, PhotonBudget::from_total(total)?);
        s.rail = self.exp.rail;
        Ok(s)
    }

    fn train_config(&self, trial: usize) -> TrainConfig {
        TrainConfig {
            seed: self.exp.run_seed(trial),
            ..self.exp.config.train.clone()
        }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.artifact_dir.join(name)
    }
}

fn cell_name(family: &str, photons: f64, trial: usize) -> String {
    format!("{}-p{photons:e}-t{trial}", family.to_ascii_lowercase())
}

fn file_masks(exp: &Experiment) -> Result<Vec<MaskSet<f64>>> {
    exp.config.mask_files.iter().map(|p| load_mask_set(p)).collect()
}

fn theory_cells<'a>(ctx: &'a Ctx<'a>) -> Result<Vec<CellFn<'a>>> {
    let exp = ctx.exp;
    let x = scene_matrix(exp.config.dataset.as_ref().expect("validated"), exp.config.seed)?
        .row(0)
        .to_vec();
    let sigma = match exp.noise {
        NoiseModel::Gaussian { sigma } => sigma,
        _ => 1.0,
    };
    let x = std::sync::Arc::new(x);
    let mut cells: Vec<CellFn<'a>> = Vec::new();
    for &total in &exp.budgets {
        let x = x.clone();
        cells.push(Box::new(move || {
            let mut rows = Vec::new();
            for noise in [NoiseModel::Gaussian { sigma }, NoiseModel::Poisson] {
                for (basis, fam) in [(TheoryBasis::Raster, "RS"), (TheoryBasis::Hadamard, "HB")] {
                    let p = predict(basis, noise, &x, total)?;
                    rows.push(ctx.row(fam, noise.tag(), total, 0, Metric::Mse, p.mean_variance()));
                }
            }
            Ok(CellOutput {
                rows,
                artifacts: Vec::new(),
            })
        }));
    }
    Ok(cells)
}

fn reconstruct_cells<'a>(ctx: &'a Ctx<'a>) -> Result<Vec<CellFn<'a>>> {
    let exp = ctx.exp;
    let scenes = std::sync::Arc::new(scene_matrix(exp.config.dataset.as_ref().expect("validated"), exp.config.seed)?);
    let n = scenes.cols();
    let mut sets = Vec::new();
    for &f in &exp.families {
        sets.push(build_family(f, n, exp.config.masks, exp.config.open_probability, exp.config.seed, Some(&scenes), true)?);
    }
    sets.extend(file_masks(exp)?);
    let mut cells: Vec<CellFn<'a>> = Vec::new();
    let nb = exp.budgets.len();
    for (fi, set) in sets.into_iter().enumerate() {
        let set = std::sync::Arc::new(set);
        for (bi, &total) in exp.budgets.iter().enumerate() {
            let (set, scenes) = (set.clone(), scenes.clone());
            cells.push(Box::new(move || {
                let src = if scenes.rows() == 1 {
                    SceneSource::Fixed(scenes.row(0))
                } else {
                    SceneSource::Dataset(&scenes)
                };
                let budget = PhotonBudget::from_total(total)?;
                let mses = mse_trials(&set, src, &budget, exp.noise, exp.rail, exp.config.trials, exp.config.seed, fi * nb + bi)?;
                let fam = set.family().tag();
                let rows = mses
                    .iter()
                    .enumerate()
                    .map(|(t, v)| ctx.row(fam, exp.noise.tag(), total, t, Metric::Mse, *v))
                    .collect();
                Ok(CellOutput {
                    rows,
                    artifacts: Vec::new(),
                })
            }));
        }
    }
    Ok(cells)
}

fn classifier_rows(ctx: &Ctx<'_>, fam: &str, total: f64, trial: usize, run: &TrainedClassifier<f64>, test: &LabeledDataset<f64>) -> Result<Vec<ResultRow>> {
    let noise = ctx.exp.noise.tag();
    let acc = evaluate_accuracy(&run.net, test, RngStream::new(ctx.exp.run_seed(trial), STREAM_TEST))?;
    let loss = run.history[run.best_epoch].train_loss;
    Ok(vec![
        ctx.row(fam, noise, total, trial, Metric::Accuracy, acc),
        ctx.row(fam, noise, total, trial, Metric::Loss, loss),
    ])
}

fn classify_cells<'a>(ctx: &'a Ctx<'a>, data: &'a [LabeledDataset<f64>; 3]) -> Result<Vec<CellFn<'a>>> {
    let exp = ctx.exp;
    let [train, val, test] = data;
    let n = train.num_pixels();
    let mut sets = Vec::new();
    for &f in &exp.families {
        let set = build_family(f, n, exp.config.masks, exp.config.open_probability, exp.config.seed, Some(train.samples()), false)?;
        let path = ctx.artifact(&format!("masks-{}.spcm", f.tag().to_ascii_lowercase()));
        save_mask_set(&set, &path)?;
        sets.push((set, Some(path)));
    }
    sets.extend(file_masks(exp)?.into_iter().map(|s| (s, None)));
    let mut cells: Vec<CellFn<'a>> = Vec::new();
    for (set, path) in sets {
        let set = std::sync::Arc::new(set);
        let mut first = true;
        for &total in &exp.budgets {
            for trial in 0..exp.config.trials {
                let set = set.clone();
                let saved = if first { path.clone() } else { None };
                first = false;
                cells.push(Box::new(move || {
                    let run = train_classifier(&set, train, val, ctx.scanner(total)?, &ctx.train_config(trial))?;
                    let rows = classifier_rows(ctx, set.family().tag(), total, trial, &run, test)?;
                    Ok(CellOutput {
                        rows,
                        artifacts: saved.clone().into_iter().flat_map(|p| [crate::maskio::metadata_path(&p), p]).collect(),
                    })
                }));
            }
        }
    }
    Ok(cells)
}

fn onn_classify_cells<'a>(ctx: &'a Ctx<'a>, data: &'a [LabeledDataset<f64>; 3]) -> Result<Vec<CellFn<'a>>> {
    let exp = ctx.exp;
    let [train, val, test] = data;
    let m = exp.config.masks.expect("validated");
    let init = exp.config.onn_init.clone().unwrap_or(MaskInit::Pca);
    // PCA does not depend on the run seed, so it is computed once.
    let shared = match init {
        MaskInit::Pca => Some(std::sync::Arc::new(init.build(m, train.num_pixels(), Some(train.samples()), exp.config.seed)?)),
        _ => None,
    };
    let mut cells: Vec<CellFn<'a>> = Vec::new();
    for &total in &exp.budgets {
        for trial in 0..exp.config.trials {
            let (shared, init) = (shared.clone(), init.clone());
            cells.push(Box::new(move || {
                let cfg = ctx.train_config(trial);
                let masks = match &shared {
                    Some(s) => (**s).clone(),
                    None => init.build(m, train.num_pixels(), Some(train.samples()), cfg.seed)?,
                };
                let run = train_onn_from(train, val, masks, ctx.scanner(total)?, &cfg)?;
                let rows = classifier_rows(ctx, "ONN", total, trial, &run, test)?;
                let name = cell_name("onn", total, trial);
                let mask_path = ctx.artifact(&format!("{name}.spcm"));
                save_mask_set(&learned_masks(&run.net)?, &mask_path)?;
                let ckpt = ctx.artifact(&format!("{name}.spcn"));
                save_checkpoint(&run.net, Some(&cfg), &run.history, &ckpt)?;
                let hist = ctx.artifact(&format!("{name}-hist.csv"));
                write_histogram(&mask_entry_histogram(&run.net.masks, 40)?, Some(&exp.hash), &hist)?;
                Ok(CellOutput {
                    rows,
                    artifacts: vec![crate::maskio::metadata_path(&mask_path), mask_path, crate::learn::sidecar_path(&ckpt), ckpt, hist],
                })
            }));
        }
    }
    Ok(cells)
}

fn onn_reconstruct_cells<'a>(ctx: &'a Ctx<'a>) -> Result<Vec<CellFn<'a>>> {
    let exp = ctx.exp;
    let spec = &exp.config.reconstruction;
    let mut cells: Vec<CellFn<'a>> = Vec::new();
    for &total in &exp.budgets {
        for trial in 0..exp.config.trials {
            cells.push(Box::new(move || {
                let defaults = ReconstructionConfig::default();
                let user_train = &exp.config.train;
                // the experiment's [train] table overrides the reconstruction defaults field by field
                let base = TrainConfig::default();
                let mut train = defaults.train.clone();
                macro_rules! take {
                    ($($f:ident),*) => { $( if user_train.$f != base.$f { train.$f = user_train.$f.clone(); } )* };
                }
                take!(learning_rate, mask_learning_rate, batch_size, epochs, dropout, optimizer, patience, hidden, rate_floor);
                train.seed = exp.run_seed(trial);
                let cfg = ReconstructionConfig {
                    side: spec.side,
                    patterns: spec.patterns,
                    regenerations: spec.regenerations,
                    total_photons: total,
                    noise: exp.noise,
                    rail: exp.rail,
                    init: spec.init.clone(),
                    freeze_eps: spec.freeze_eps,
                    snapshot_every: spec.snapshot_every,
                    histogram_bins: spec.histogram_bins,
                    train,
                };
                let run = train_reconstructor::<f64>(&cfg)?;
                let noise = exp.noise.tag();
                let rows = vec![
                    ctx.row("ONN", noise, total, trial, Metric::Loss, *run.loss_trace.last().unwrap_or(&f64::NAN)),
                    ctx.row("ONN", noise, total, trial, Metric::OffdiagRatio, run.offdiag_ratio),
                ];
                let name = cell_name("onn", total, trial);
                let mask_path = ctx.artifact(&format!("{name}.csv"));
                save_mask_set(&run.masks()?, &mask_path)?;
                let hist = ctx.artifact(&format!("{name}-hist.csv"));
                write_histogram(&run.histogram, Some(&exp.hash), &hist)?;
                let mut artifacts = vec![crate::maskio::metadata_path(&mask_path), mask_path, hist];
                for snap in &run.snapshots {
                    let n = cfg.side * cfg.side;
                    let p = ctx.artifact(&format!("{name}-epoch{}.csv", snap.epoch));
                    let mut buf = Vec::new();
                    write_masks_csv(&Matrix::new(n, n, snap.masks.clone())?, &mut buf)?;
                    fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
                    artifacts.push(p);
                }
                let trace = ctx.artifact(&format!("{name}-loss.csv"));
                let mut text = super::results::provenance_line(Some(&exp.hash)) + "\nepoch,loss\n";
                for (e, l) in run.loss_trace.iter().enumerate() {
                    text += &format!("{e},{l}\n");
                }
                fs::write(&trace, text).map_err(|e| Error::io(&trace, e))?;
                artifacts.push(trace);
                Ok(CellOutput { rows, artifacts })
            }));
        }
    }
    Ok(cells)
}

fn write_histogram(h: &Histogram, hash: Option<&str>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_histogram_csv(h, hash, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Histogram of every entry of a mask file.
pub fn mask_histogram(path: &Path, binning: &Binning) -> Result<Histogram> {
    let m = load_mask_matrix::<f64>(path)?;
    histogram(m.as_slice(), binning)
}

/// Runs `exp`, writing `<id>.csv`, `<id>.summary.json` and artifacts under
/// `<out_dir>/<id>/`. Cells run in parallel batches; rows are written in
/// cell order after each batch. On failure the completed rows stay on disk,
/// followed by a `# FAILED` line, and the error is returned after the
/// summary is written.
pub fn run(exp: &Experiment, out_dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let artifact_dir = out_dir.join(exp.id());
    fs::create_dir_all(&artifact_dir).map_err(|e| Error::io(&artifact_dir, e))?;
    let results_csv = out_dir.join(format!("{}.csv", exp.id()));
    let summary_json = out_dir.join(format!("{}.summary.json", exp.id()));
    let ctx = Ctx { exp, artifact_dir };
    let mut writer = ResultWriter::create(&results_csv, &exp.hash)?;
    let mut all_rows = Vec::new();
    let mut artifacts = Vec::new();

    let (data, load_error) = match exp.task() {
        Task::Classify | Task::OnnClassify => {
            match load_labeled(exp.config.dataset.as_ref().expect("validated"), exp.config.seed) {
                Ok(d) => (Some(d), None),
                Err(e) => (None, Some(e)),
            }
        }
        _ => (None, None),
    };
    let outcome: Result<()> = (|| {
        if let Some(e) = load_error {
            return Err(e);
        }
        let cells = match exp.task() {
            Task::Theory => theory_cells(&ctx)?,
            Task::Reconstruct => reconstruct_cells(&ctx)?,
            Task::Classify => classify_cells(&ctx, data.as_ref().expect("loaded"))?,
            Task::OnnClassify => onn_classify_cells(&ctx, data.as_ref().expect("loaded"))?,
            Task::OnnReconstruct => onn_reconstruct_cells(&ctx)?,
        };
        let batch = rayon::current_num_threads().max(1);
        for chunk in cells.chunks(batch) {
            let results: Vec<Result<CellOutput>> = chunk.par_iter().map(|c| c()).collect();
            for r in results {
                let out = r?;
                writer.write_all(&out.rows)?;
                all_rows.extend(out.rows);
                artifacts.extend(out.artifacts);
            }
        }
        Ok(())
    })();

    let rel = |p: &Path| p.strip_prefix(out_dir).unwrap_or(p).display().to_string();
    let rows = writer.rows();
    let (status, error) = match &outcome {
        Ok(()) => {
            writer.finish()?;
            ("ok".to_string(), None)
        }
        Err(e) => {
            writer.fail(e)?;
            ("failed".to_string(), Some(e.to_string()))
        }
    };
    let rep = if all_rows.is_empty() {
        super::results::Report { cells: Vec::new(), verdicts: Vec::new() }
    } else {
        report(&all_rows, &ReportOptions::default())?
    };
    let summary = RunSummary {
        id: exp.id().to_string(),
        task: exp.task(),
        version: VERSION.to_string(),
        config_hash: exp.hash.clone(),
        status,
        error,
        rows,
        results: rel(&results_csv),
        artifacts: artifacts.iter().map(|p| rel(p)).collect(),
        config: exp.config.clone(),
        cells: rep.cells,
        verdicts: rep.verdicts,
    };
    let json = serde_json::to_vec_pretty(&summary)?;
    fs::write(&summary_json, json).map_err(|e| Error::io(&summary_json, e))?;
    let manifest = ctx.artifact_dir.join("manifest.json");
    fs::write(
        &manifest,
        serde_json::to_vec_pretty(&serde_json::json!({
            "version": VERSION,
            "config_hash": exp.hash,
            "files": summary.artifacts,
        }))?,
    )
    .map_err(|e| Error::io(&manifest, e))?;
    outcome?;
    Ok(RunOutput {
        results_csv,
        summary_json,
        summary,
    })
}

/// Loads, validates and runs a config file, applying a seed override.
pub fn run_file(path: &Path, seed: Option<u64>, out_dir: &Path) -> Result<RunOutput> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run(&cfg.validate()?, out_dir)
}
