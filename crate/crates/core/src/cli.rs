use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pepnet::checkpoint;
use pepnet::data::{self, AmbiguousSample, Mask, SynthParams};
use pepnet::metrics::{self, CalibrationTarget, MetricsReport};
use pepnet::pca::{fit_projection, PcaFit};
use pepnet::ptnsr;
use pepnet::rng::{stream_rng, Stream};
use pepnet::train::{self, KlSpace, PcaFeature, TrainConfig, Variant};
use pepnet::Tensor;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<pepnet::Error>() {
            Some(pepnet::Error::InvalidArgument(msg)) => CliError::Usage(msg.clone()),
            _ => CliError::Runtime(e),
        }
    }
}

impl From<pepnet::Error> for CliError {
    fn from(e: pepnet::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "pepnet",
    version,
    about = "PCA-bottlenecked Probabilistic U-Net for ambiguous segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-rater dataset as PGM files
    GenerateData(GenerateArgs),
    /// Train one model (warmup, PCA fit, compact-space training)
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Train and evaluate one `pep` model per retained dimension k
    SweepK(SweepArgs),
    /// Dump sampled segmentations for one image
    Sample(SampleArgs),
    /// Fit a projection from a saved feature matrix and print its spectrum
    PcaFit(PcaFitArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with generator parameters
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    raters: Option<usize>,
    #[arg(long)]
    p_absent: Option<f64>,
    #[arg(long)]
    jitter: Option<u32>,
    #[arg(long)]
    noise: Option<f64>,
}

/// How a dataset directory is divided into train and test samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub split_seed: u64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub split: SplitConfig,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

impl SplitArgs {
    fn apply(&self, s: &mut SplitConfig) {
        set(&mut s.split_seed, self.split_seed);
        set(&mut s.test_fraction, self.test_fraction);
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// JSON file with training parameters
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    adapter_depth: Option<usize>,
    /// Global gradient-norm bound; 0 disables clipping
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, value_parser = parse_pca_feature)]
    pca_feature: Option<PcaFeature>,
    #[arg(long, value_parser = parse_kl_space)]
    kl_space: Option<KlSpace>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prediction samples per image
    #[arg(long, default_value_t = metrics::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_subset, default_value = "test")]
    subset: Subset,
    #[arg(long, value_parser = parse_calibration, default_value = "per-rater")]
    calibration: CalibrationTarget,
    /// Also write per_sample.csv
    #[arg(long)]
    per_sample: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Retained dimensions to compare
    #[arg(long = "ks", value_delimiter = ',', default_values_t = [2usize, 3, 4])]
    ks: Vec<usize>,
    #[arg(long, default_value_t = metrics::DEFAULT_SAMPLES)]
    samples: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grayscale PGM matching the checkpoint's image size
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct PcaFitArgs {
    /// PTNSR1 matrix of shape N×D
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: pepnet::Error| e.to_string())
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unrecognized value {s:?}"))
}

fn parse_pca_feature(s: &str) -> Result<PcaFeature, String> {
    parse_kebab(s)
}

fn parse_kl_space(s: &str) -> Result<KlSpace, String> {
    parse_kebab(s)
}

fn parse_subset(s: &str) -> Result<Subset, String> {
    parse_kebab(s)
}

fn parse_calibration(s: &str) -> Result<CalibrationTarget, String> {
    parse_kebab(s)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn echo_config<T: Serialize>(out: &Path, config: &T) -> CliResult<()> {
    write(
        &out.join("config.json"),
        serde_json::to_string_pretty(config).context("serializing config")? + "\n",
    )
}

impl TrainFlags {
    fn resolve(&self, k: Option<usize>) -> CliResult<TrainFile> {
        let mut file: TrainFile = match &self.config {
            Some(path) => read_json(path)?,
            None => TrainFile::default(),
        };
        let t = &mut file.train;
        set(&mut t.variant, self.variant);
        set(&mut t.seed, self.seed);
        set(&mut t.epochs, self.epochs);
        set(&mut t.warmup_epochs, self.warmup_epochs);
        set(&mut t.lr, self.lr);
        set(&mut t.step_size, self.step_size);
        set(&mut t.gamma, self.gamma);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.beta, self.beta);
        set(&mut t.latent_dim, self.latent_dim);
        set(&mut t.base_channels, self.base_channels);
        set(&mut t.depth, self.depth);
        set(&mut t.adapter_depth, self.adapter_depth);
        set(&mut t.pca_feature, self.pca_feature);
        set(&mut t.kl_space, self.kl_space);
        set(&mut t.k, k);
        if let Some(c) = self.grad_clip {
            t.grad_clip = (c > 0.0).then_some(c);
        }
        self.split.apply(&mut file.split);
        file.train.validate()?;
        if !(0.0..1.0).contains(&file.split.test_fraction) {
            return Err(usage(format!(
                "test_fraction {} must lie in [0, 1)",
                file.split.test_fraction
            )));
        }
        Ok(file)
    }
}

fn load_split(
    data_dir: &Path,
    split: &SplitConfig,
    subset: Subset,
) -> CliResult<Vec<AmbiguousSample>> {
    if !data_dir.is_dir() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "dataset directory {} does not exist",
            data_dir.display()
        )));
    }
    let mut all = data::read_dataset(data_dir)
        .with_context(|| format!("reading dataset {}", data_dir.display()))?;
    if subset == Subset::All {
        return Ok(all);
    }
    let (train_idx, test_idx) =
        data::split_indices(all.len(), split.test_fraction, split.split_seed)?;
    let keep = if subset == Subset::Train {
        train_idx
    } else {
        test_idx
    };
    let mut picked = Vec::with_capacity(keep.len());
    for i in keep.into_iter().rev() {
        picked.push(all.swap_remove(i));
    }
    picked.reverse();
    if picked.is_empty() {
        return Err(usage(format!(
            "the {subset:?} split of {} is empty",
            data_dir.display()
        )));
    }
    Ok(picked)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::SweepK(a) => sweep(a),
        Command::Sample(a) => sample(a),
        Command::PcaFit(a) => pca_fit(a),
    }
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let mut p: SynthParams = match &a.config {
        Some(path) => read_json(path)?,
        None => SynthParams::default(),
    };
    set(&mut p.seed, a.seed);
    set(&mut p.image_size, a.size);
    set(&mut p.num_raters, a.raters);
    set(&mut p.p_absent, a.p_absent);
    set(&mut p.jitter, a.jitter);
    set(&mut p.noise_sigma, a.noise);
    p.validate()?;
    let samples = data::generate_dataset(&p, a.n)?;
    create_dir(&a.out)?;
    data::write_dataset(&samples, &a.out)?;
    echo_config(&a.out, &p)?;
    println!(
        "wrote {} samples (seed {}) to {}",
        samples.len(),
        p.seed,
        a.out.display()
    );
    Ok(())
}

fn write_spectrum(path: &Path, fit: &PcaFit) -> CliResult<()> {
    let total: f64 = fit.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut csv = String::from("component,eigenvalue,explained_fraction,cumulative_fraction\n");
    let mut cumulative = 0.0;
    for (i, &v) in fit.eigenvalues.iter().enumerate() {
        let frac = if total > 0.0 { v.max(0.0) / total } else { 0.0 };
        cumulative += frac;
        csv.push_str(&format!("{i},{v},{frac},{cumulative}\n"));
    }
    write(path, &csv)?;
    print!("{csv}");
    Ok(())
}

/// Trains one model into `out`: checkpoint, log, resolved config and, for
/// PCA variants, the spectrum and feature dump.
fn train_into(file: &TrainFile, data_dir: &Path, out: &Path) -> CliResult<pepnet::net::Model> {
    let samples = load_split(data_dir, &file.split, Subset::Train)?;
    create_dir(out)?;
    echo_config(out, file)?;
    let cfg = &file.train;
    let outcome = train::train(cfg, &samples, |e| {
        eprintln!(
            "[{}] epoch {} lr {:e} loss {:.5} recon {:.5} kl {:.5} stage {}",
            cfg.variant,
            e.epoch,
            e.lr,
            e.loss,
            e.recon,
            e.kl,
            e.stage_label()
        )
    })?;
    write(&out.join("train_log.csv"), train::log_to_csv(&outcome.log))?;
    checkpoint::save(&outcome.model, &out.join("checkpoint"))?;
    if let Some(pca) = &outcome.pca {
        let d = cfg.latent_dim;
        let dump = Tensor::new(
            vec![pca.features.len() / d, d],
            pca.features.iter().map(|&v| v as f32).collect(),
        )?;
        ptnsr::save(out.join("pca_features.ptnsr"), &dump)?;
        write_spectrum(&out.join("pca_spectrum.csv"), &pca.fit)?;
        println!(
            "captured variance fraction (k={}): {}",
            cfg.k,
            pca.fit.captured_variance_fraction()
        );
    }
    Ok(outcome.model)
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let file = a.flags.resolve(a.k)?;
    train_into(&file, &a.data, &a.out)?;
    println!(
        "trained {} model on {} ({} epochs) into {}",
        file.train.variant,
        a.data.display(),
        file.train.epochs,
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalConfig<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    samples: usize,
    seed: u64,
    subset: Subset,
    calibration: CalibrationTarget,
    split: SplitConfig,
}

fn check_compatible(model: &pepnet::net::Model, samples: &[AmbiguousSample]) -> CliResult<()> {
    let size = model.config().image_size;
    if let Some(s) = samples.iter().find(|s| s.size != size) {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "checkpoint expects {size}×{size} images, dataset has {}×{}",
            s.size,
            s.size
        )));
    }
    Ok(())
}

fn per_sample_csv(reports: &[MetricsReport]) -> String {
    let mut csv = String::from("index,iou,ged,nll,brier,ece\n");
    for (i, r) in reports.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            r.iou, r.ged, r.nll, r.brier, r.ece
        ));
    }
    csv
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let mut split = SplitConfig::default();
    a.split.apply(&mut split);
    let model = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let samples = load_split(&a.data, &split, a.subset)?;
    check_compatible(&model, &samples)?;
    let ev = train::evaluate(&model, &samples, a.samples, a.seed, a.calibration)?;
    create_dir(&a.out)?;
    let cfg = EvalConfig {
        checkpoint: &a.checkpoint,
        data: &a.data,
        samples: a.samples,
        seed: a.seed,
        subset: a.subset,
        calibration: a.calibration,
        split,
    };
    echo_config(&a.out, &cfg)?;
    write(&a.out.join("metrics.csv"), ev.report.to_csv())?;
    write(
        &a.out.join("metrics.json"),
        serde_json::to_string_pretty(&ev.report).context("serializing metrics")? + "\n",
    )?;
    if a.per_sample {
        write(
            &a.out.join("per_sample.csv"),
            per_sample_csv(&ev.per_sample),
        )?;
    }
    print!("{}", ev.report.to_csv());
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    if a.ks.is_empty() {
        return Err(usage("--ks needs at least one value"));
    }
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let base = a.flags.resolve(None)?;
    let d = base.train.latent_dim;
    if let Some(&k) = a.ks.iter().find(|&&k| k == 0 || k > d) {
        return Err(usage(format!("k={k} outside [1, {d}]")));
    }
    create_dir(&a.out)?;
    let test = load_split(&a.data, &base.split, Subset::Test)?;
    let mut csv = String::from("k,iou,ged\n");
    for &k in &a.ks {
        let mut file = base.clone();
        file.train.variant = Variant::Pep;
        file.train.k = k;
        file.train.validate()?;
        let model = train_into(&file, &a.data, &a.out.join(format!("k{k}")))?;
        let ev = train::evaluate(
            &model,
            &test,
            a.samples,
            file.train.seed,
            CalibrationTarget::PerRater,
        )?;
        csv.push_str(&format!("{k},{},{}\n", ev.report.iou, ev.report.ged));
    }
    write(&a.out.join("sweep_k.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn sample(a: SampleArgs) -> CliResult<()> {
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let model = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let (w, h, pixels) = data::read_image_pgm(&a.image)
        .with_context(|| format!("reading image {}", a.image.display()))?;
    let size = model.config().image_size;
    if (w, h) != (size, size) {
        bail_runtime(format!(
            "checkpoint expects {size}×{size} images, {} is {w}×{h}",
            a.image.display()
        ))?;
    }
    let image = Tensor::new(vec![1, 1, size, size], pixels)?;
    let mut rng = stream_rng(a.seed, Stream::Eval, 0);
    let maps = metrics::probability_maps(&model, &image, a.samples, &mut rng)?;
    create_dir(&a.out)?;
    for (i, map) in maps.iter().enumerate() {
        data::write_mask_pgm(
            &a.out.join(format!("sample_{i:03}.pgm")),
            &Mask::threshold(size, size, map, 0.5)?,
        )?;
    }
    data::write_image_pgm(
        &a.out.join("mean_prob.pgm"),
        size,
        &metrics::average_maps(&maps),
    )?;
    echo_config(
        &a.out,
        &serde_json::json!({ "checkpoint": a.checkpoint, "image": a.image, "samples": a.samples, "seed": a.seed }),
    )?;
    println!(
        "wrote {} samples and mean_prob.pgm to {}",
        maps.len(),
        a.out.display()
    );
    Ok(())
}

fn bail_runtime(msg: String) -> CliResult<()> {
    Err(CliError::Runtime(anyhow::anyhow!(msg)))
}

fn pca_fit(a: PcaFitArgs) -> CliResult<()> {
    let features = ptnsr::load(&a.features)
        .with_context(|| format!("reading features {}", a.features.display()))?;
    let &[_, d] = features.shape() else {
        return bail_runtime(format!(
            "feature dump must be an N×D matrix, got shape {:?}",
            features.shape()
        ));
    };
    if a.k == 0 || a.k > d {
        return Err(usage(format!("k={} outside [1, {d}]", a.k)));
    }
    let values: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
    let fit = fit_projection(&values, d, a.k)?;
    create_dir(&a.out)?;
    let p = &fit.projection;
    ptnsr::save(
        a.out.join("pca_mean.ptnsr"),
        &Tensor::new(vec![d], p.mean().iter().map(|&v| v as f32).collect())?,
    )?;
    ptnsr::save(
        a.out.join("pca_basis.ptnsr"),
        &Tensor::new(
            vec![d, a.k],
            p.basis().as_slice().iter().map(|&v| v as f32).collect(),
        )?,
    )?;
    echo_config(
        &a.out,
        &serde_json::json!({ "features": a.features, "k": a.k }),
    )?;
    write_spectrum(&a.out.join("spectrum.csv"), &fit)
}
