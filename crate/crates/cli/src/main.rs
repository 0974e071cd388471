use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use spc_core::bench::{self, ExperimentConfig, ReportOptions, Task};
use spc_core::data::{load_mnist, load_spectral_csv, MnistPart, SpectralOptions};
use spc_core::learn::mask_entry_histogram;
use spc_core::maskio::{load_mask_matrix, save_mask_set};
use spc_core::masks::MaskFamily;
use spc_core::noise::NoiseModel;
use spc_core::stats::Binning;
use spc_core::theory::{predict, TheoryBasis};

#[derive(Parser)]
#[command(name = "spc", version, about = "Single-pixel camera simulation and mask optimization")]
struct Cli {
    /// Overrides the seed of the config or generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mask generation.
    #[command(subcommand)]
    Codes(CodesCmd),
    /// Monte Carlo reconstruction and fixed-mask classification sweeps.
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Joint mask optimization.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Closed-form reconstruction variance per basis and noise model.
    Theory(TheoryArgs),
    /// Aggregates a result CSV and prints the comparison verdicts.
    Report {
        csv: PathBuf,
        /// Also write the aggregated cells to this CSV.
        #[arg(long)]
        cells: Option<PathBuf>,
    },
    /// Counts mask entries per bin.
    MaskHistogram(HistogramArgs),
}

#[derive(Subcommand)]
enum CodesCmd {
    Generate(GenerateArgs),
}

#[derive(Subcommand)]
enum SimulateCmd {
    Reconstruct { config: PathBuf },
    Classify { config: PathBuf },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Runs an `onn-classify` or `onn-reconstruct` config.
    Onn { config: PathBuf },
}

#[derive(Args)]
struct GenerateArgs {
    /// rs, ii, hb, th, br or pca.
    #[arg(long)]
    family: MaskFamily,
    #[arg(long)]
    pixels: Option<usize>,
    /// Mask count for th, br and pca.
    #[arg(long)]
    masks: Option<usize>,
    /// Open probability of br masks.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// MNIST directory with the training images (pca).
    #[arg(long, conflicts_with = "spectral")]
    mnist: Option<PathBuf>,
    /// Number of MNIST training images used for pca.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Labeled spectra CSV (pca).
    #[arg(long)]
    spectral: Option<PathBuf>,
    /// `.csv` for text, anything else for binary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Theory config; the flags below are used when absent.
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pixels: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1e4)]
    photons: f64,
    /// Scene values, whitespace or comma separated; defaults to a ramp.
    #[arg(long)]
    x_file: Option<PathBuf>,
}

#[derive(Args)]
struct HistogramArgs {
    file: PathBuf,
    /// Comma-separated bin centers.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "uniform")]
    bins: Option<Vec<f64>>,
    /// Number of equal bins over the entry range.
    #[arg(long)]
    uniform: Option<usize>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<spc_core::Error>())
                .map_or(false, |e| e.is_validation())
                || e.chain().any(|c| c.downcast_ref::<Usage>().is_some());
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

/// Invalid invocation detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.cmd {
        Cmd::Codes(CodesCmd::Generate(a)) => generate(a, cli.seed.unwrap_or(0)),
        Cmd::Simulate(SimulateCmd::Reconstruct { config }) => run(&config, &[Task::Reconstruct], cli.seed, &cli.out_dir),
        Cmd::Simulate(SimulateCmd::Classify { config }) => run(&config, &[Task::Classify], cli.seed, &cli.out_dir),
        Cmd::Train(TrainCmd::Onn { config }) => {
            run(&config, &[Task::OnnClassify, Task::OnnReconstruct], cli.seed, &cli.out_dir)
        }
        Cmd::Theory(a) => theory(a, cli.seed, &cli.out_dir),
        Cmd::Report { csv, cells } => report(&csv, cells.as_deref()),
        Cmd::MaskHistogram(a) => mask_histogram(a),
    }
}

fn run(config: &Path, tasks: &[Task], seed: Option<u64>, out_dir: &Path) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if !tasks.contains(&cfg.task) {
        let want: Vec<_> = tasks.iter().map(|t| t.tag()).collect();
        return Err(usage(format!(
            "{}: task `{}` does not belong to this subcommand (expected {})",
            config.display(),
            cfg.task.tag(),
            want.join(" or ")
        )));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let exp = cfg.validate()?;
    let out = bench::run(&exp, out_dir)?;
    println!("{} rows -> {}", out.summary.rows, out.results_csv.display());
    println!("summary -> {}", out.summary_json.display());
    for v in &out.summary.verdicts {
        println!("{v}");
    }
    Ok(())
}

fn generate(a: GenerateArgs, seed: u64) -> anyhow::Result<()> {
    let train = if let Some(dir) = &a.mnist {
        Some(load_mnist::<f64>(dir, MnistPart::Train)?.take(a.samples))
    } else if let Some(path) = &a.spectral {
        Some(load_spectral_csv::<f64>(path, SpectralOptions::default())?)
    } else {
        None
    };
    let n = match (&train, a.pixels) {
        (Some(t), Some(p)) if p != t.num_pixels() => {
            return Err(usage(format!("--pixels {p} disagrees with the dataset's {} pixels", t.num_pixels())))
        }
        (Some(t), _) => t.num_pixels(),
        (None, Some(p)) => p,
        (None, None) => return Err(usage("--pixels is required without a dataset")),
    };
    let set = bench::build_family(a.family, n, a.masks, a.p, seed, train.as_ref().map(|t| t.samples()), false)?;
    save_mask_set(&set, &a.out)?;
    println!("{} {}x{} -> {}", a.family.tag(), set.num_masks(), set.num_pixels(), a.out.display());
    Ok(())
}

fn read_scene(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| usage(format!("{}: bad value `{s}`", path.display()))))
        .collect()
}

fn theory(a: TheoryArgs, seed: Option<u64>, out_dir: &Path) -> anyhow::Result<()> {
    if let Some(config) = a.config {
        return run(&config, &[Task::Theory], seed, out_dir);
    }
    let x = match &a.x_file {
        Some(p) => read_scene(p)?,
        None => bench::ramp_scene(a.pixels),
    };
    if x.is_empty() {
        return Err(usage("scene is empty"));
    }
    let gaussian = NoiseModel::gaussian(a.sigma)?;
    let mut out = io::stdout().lock();
    writeln!(out, "N={} sigma={} photons={:e}", x.len(), a.sigma, a.photons)?;
    writeln!(out, "{:<10} {:<12} {:>14}", "basis", "noise", "variance")?;
    for basis in [TheoryBasis::Raster, TheoryBasis::Hadamard] {
        for noise in [gaussian, NoiseModel::Poisson] {
            let p = predict(basis, noise, &x, a.photons)?;
            writeln!(out, "{:<10} {:<12} {:>14.6e}", basis.tag(), noise.tag(), p.mean_variance())?;
        }
    }
    Ok(())
}

fn report(csv: &Path, cells_out: Option<&Path>) -> anyhow::Result<()> {
    let rows = bench::load_results(csv)?;
    if rows.is_empty() {
        bail!("{}: no result rows", csv.display());
    }
    let rep = bench::report(&rows, &ReportOptions::default())?;
    let mut out = io::stdout().lock();
    writeln!(out, "{:<12} {:<8} {:<12} {:>10} {:<14} {:>5} {:>14} {:>12}", "experiment", "family", "noise", "photons", "metric", "n", "mean", "stderr")?;
    for c in &rep.cells {
        let se = c.stderr.map_or("-".to_string(), |s| format!("{s:.4e}"));
        writeln!(
            out,
            "{:<12} {:<8} {:<12} {:>10.0e} {:<14} {:>5} {:>14.6e} {:>12}",
            c.experiment,
            c.family,
            c.noise,
            c.photons,
            c.metric.tag(),
            c.n,
            c.mean,
            se
        )?;
    }
    for v in &rep.verdicts {
        writeln!(out, "{v}")?;
    }
    if let Some(path) = cells_out {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        bench::write_cells_csv(&rep.cells, io::BufWriter::new(file))?;
    }
    Ok(())
}

fn mask_histogram(a: HistogramArgs) -> anyhow::Result<()> {
    let h = match (a.bins, a.uniform) {
        (Some(centers), None) => bench::mask_histogram(&a.file, &Binning::Centers(centers))?,
        (None, Some(count)) => mask_entry_histogram(&load_mask_matrix::<f64>(&a.file)?, count)?,
        _ => return Err(usage("give exactly one of --bins or --uniform")),
    };
    match a.out {
        Some(path) => {
            let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            bench::write_histogram_csv(&h, None, io::BufWriter::new(file))?;
        }
        None => bench::write_histogram_csv(&h, None, io::stdout().lock())?,
    }
    Ok(())
}
