use std::path::{Path, PathBuf};
use std::process::ExitCode;

use badpix::baselines::{correct_linear, correct_median, correct_nearest};
use badpix::corrector::{correct_pixels, ModelBank};
use badpix::defects::{inject, sample_defect_map, DefectKind, DefectMap, DefectSpec};
use badpix::detector::{estimate_error_rate, predict_scores, ProbAccumulator, UNet};
use badpix::autodiff::Checkpoint;
use badpix::imaging::{generate_synthetic, load_image, save_pgm, BayerImage, CfaPattern, RawFormat, SceneKind, SceneSpec};
use badpix::metrics::{confusion, nmse, precision_recall, psnr};
use badpix::pipeline::experiments::{
    cluster_experiment, compare_correctors, crossover, detection_trial, neighbor_error_grid, patch_size_sweep, table1,
    AblationSetup, ClusterSetup, CorrectorSetup, CrossoverSetup, DetectionSetup, Table1Setup,
};
use badpix::pipeline::{
    obtain_ae, obtain_bank, obtain_detector, parse_with_overrides, render_report, rows_to_csv, run_pipeline,
    to_canonical_json, Corpus, ExperimentConfig, ReportFormat,
};
use badpix::reconstructor::{
    count_params_flops, default_training, reconstruct, train_ae, tune_mlp_ratio, AeDataset, ClusterSampling, VitAe,
    VitConfig, CLUSTER_REFERENCE_COST,
};
use badpix::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "badpix", version, about = "Bad pixel detection and correction for Bayer raw frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a frame with a sampled or given defect map.
    Inject(InjectArgs),
    /// Train the segmentation detector from an experiment config.
    TrainDetector(TrainArgs),
    /// Average detector scores over frames and threshold them into a map.
    Detect(DetectArgs),
    /// Train the patch corrector bank.
    TrainMlp(TrainMlpArgs),
    /// Train the transformer autoencoder.
    TrainAe(TrainAeArgs),
    /// Replace mapped pixels with a corrector.
    Correct(CorrectArgs),
    /// Run the autoencoder over a frame.
    Reconstruct(ReconstructArgs),
    /// Score a corrected frame, or run the full pipeline from a config.
    Eval(EvalArgs),
    /// Run a named experiment over seeds.
    Sweep(SweepArgs),
    /// Print parameter and multiply-accumulate counts of an autoencoder config.
    ReportCost(CostArgs),
}

#[derive(Args)]
struct RawArgs {
    /// Bits per sample of input frames.
    #[arg(long, default_value_t = 16)]
    bit_depth: u8,
    #[arg(long, default_value = "RGGB")]
    pattern: CfaPattern,
}

impl RawArgs {
    fn load(&self, path: &Path) -> Result<BayerImage> {
        load_image(path, RawFormat::Pgm, self.bit_depth, self.pattern)
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted key override, for example `defects.rate=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn text(&self) -> Result<String> {
        match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
            None => Ok(String::new()),
        }
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::with_overrides(&self.text()?, &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        parse_with_overrides(&self.text()?, &self.overrides)
    }
}

#[derive(Args)]
struct InjectArgs {
    /// Clean input frame; a synthetic scene is generated when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    raw: RawArgs,
    /// Edge of the synthetic scene.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value = "band_limited")]
    scene: SceneKind,
    /// Reuse this defect map instead of sampling one.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    rate: f64,
    #[arg(long, default_value_t = 0.7)]
    delta: f64,
    #[arg(long, default_value = "deviation")]
    kind: DefectKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the defect map (`.txt` for a coordinate list).
    #[arg(long)]
    map_out: Option<PathBuf>,
    /// Where to write the clean frame.
    #[arg(long)]
    clean_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Detector checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Frames of one sensor session.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    raw: RawArgs,
    /// Number of frames averaged; all inputs when absent.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 32)]
    tile: usize,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth map for recall and precision.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Where to write the JSON record; stdout only when absent.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct TrainMlpArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Comma separated neighbour error counts, one model each.
    #[arg(long, value_delimiter = ',')]
    neighbor_errors: Option<Vec<usize>>,
    /// Directory for the model bank.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AeMode {
    Full,
    Cluster,
}

#[derive(Args)]
struct TrainAeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "full")]
    mode: AeMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Crops per training frame in cluster mode.
    #[arg(long, default_value_t = 200)]
    per_frame: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corrector {
    Mlp,
    Nearest,
    Linear,
    Median,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    map: PathBuf,
    #[command(flatten)]
    raw: RawArgs,
    #[arg(long, value_enum, default_value = "mlp")]
    strategy: Corrector,
    /// Model bank directory for the MLP strategy.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    patch_size: usize,
    /// Window edge of the linear and median baselines.
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Only mapped pixels are replaced when given.
    #[arg(long)]
    map: Option<PathBuf>,
    #[command(flatten)]
    raw: RawArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corrected frame.
    #[arg(long, requires = "truth")]
    pred: Option<PathBuf>,
    /// Clean reference frame.
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
    /// Pixels scored by NMSE; all pixels when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    raw: RawArgs,
    /// Print the pipeline report in this format.
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    /// Recall and precision against the number of averaged frames.
    Detection,
    /// Patch MLP against the classical correctors.
    Correctors,
    /// MLP and autoencoder NMSE across defect rates.
    Crossover,
    /// Masked cluster reconstruction and model cost.
    Cluster,
    /// Train and test neighbour error grid.
    NeighborGrid,
    /// NMSE per patch size.
    PatchSize,
    /// Detection and correction per scene kind and rate.
    Table1,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    /// Setup TOML for the experiment.
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Frame counts for the detection sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,9")]
    frames: Vec<usize>,
    /// Patch sizes for the patch size sweep and grid.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    patch_sizes: Vec<usize>,
    /// Neighbour error counts for training (grid) or both sides (patch size sweep).
    #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
    train_errors: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
    test_errors: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Autoencoder settings as TOML.
    #[command(flatten)]
    config: ConfigArgs,
    /// Cluster mode adds the mask token.
    #[arg(long, value_enum, default_value = "cluster")]
    mode: AeMode,
    /// Pick the feed-forward ratio closest to the reference cost.
    #[arg(long)]
    tune: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Inject(a) => cmd_inject(a),
        Command::TrainDetector(a) => cmd_train_detector(a),
        Command::Detect(a) => cmd_detect(a),
        Command::TrainMlp(a) => cmd_train_mlp(a),
        Command::TrainAe(a) => cmd_train_ae(a),
        Command::Correct(a) => cmd_correct(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ReportCost(a) => cmd_report_cost(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn print_json<T: Serialize>(value: &T) {
    print!("{}", to_canonical_json(value));
}

fn cmd_inject(a: InjectArgs) -> Result<()> {
    let clean = match &a.input {
        Some(p) => a.raw.load(p)?,
        None => generate_synthetic(&SceneSpec {
            pattern: a.raw.pattern,
            ..SceneSpec::new(a.size, a.size, a.scene, a.seed)
        })?,
    };
    let map = match &a.map {
        Some(p) => DefectMap::load(p, Some((clean.width(), clean.height())))?,
        None => sample_defect_map(clean.width(), clean.height(), a.rate, a.seed)?,
    };
    let spec = DefectSpec { rate: a.rate, delta: a.delta, kind: a.kind, seed: a.seed };
    spec.validate()?;
    let bad = inject(&clean, &map, &spec)?;
    save_pgm(&bad, &a.out)?;
    if let Some(p) = &a.map_out {
        map.save(p)?;
    }
    if let Some(p) = &a.clean_out {
        save_pgm(&clean, p)?;
    }
    print_json(&json!({ "defects": map.count(), "width": clean.width(), "height": clean.height() }));
    Ok(())
}

fn cmd_train_detector(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.experiment()?;
    cfg.detector.checkpoint = None;
    cfg.detector.train = true;
    create_dir(&a.out)?;
    let corpus = Corpus::prepare(&cfg, a.seed)?;
    obtain_detector(&cfg.detector, &corpus.train_bad, &corpus.train_maps, a.seed, Some(&a.out))?;
    print_json(&json!({ "checkpoint": a.out.join("unet.ckpt") }));
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let n = a.frames.unwrap_or(a.inputs.len());
    if n == 0 || n > a.inputs.len() {
        return Err(Error::InvalidArgument(format!("--frames {n} with {} inputs", a.inputs.len())));
    }
    let net = UNet::<f32>::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let mut acc: Option<ProbAccumulator> = None;
    for path in &a.inputs[..n] {
        let frame = a.raw.load(path)?;
        let acc = acc.get_or_insert_with(|| ProbAccumulator::new(frame.width(), frame.height()));
        acc.calibrate(&predict_scores(&net, &frame, a.tile)?)?;
    }
    let map = acc.expect("at least one frame").finalize(a.threshold)?;
    map.save(&a.out)?;
    let (mut recall, mut precision) = (None, None);
    if let Some(p) = &a.truth {
        let truth = DefectMap::load(p, Some((map.width(), map.height())))?;
        (precision, recall) = precision_recall(&confusion(&map, &truth)?);
    }
    let record = json!({
        "recall": recall,
        "precision": precision,
        "n_frames": n,
        "threshold": a.threshold,
        "estimated_rate": estimate_error_rate(&map),
    });
    if let Some(p) = &a.record {
        write(p, &to_canonical_json(&record))?;
    }
    print_json(&record);
    Ok(())
}

fn cmd_train_mlp(a: TrainMlpArgs) -> Result<()> {
    let mut cfg = a.config.experiment()?;
    cfg.corrector.checkpoint_dir = None;
    cfg.corrector.train = true;
    if let Some(p) = a.patch_size {
        cfg.corrector.patch_size = p;
    }
    if let Some(ks) = a.neighbor_errors {
        cfg.corrector.neighbor_errors = ks;
    }
    cfg.validate()?;
    let corpus = Corpus::prepare(&cfg, a.seed)?;
    let bank = obtain_bank(&cfg.corrector, &corpus.clean_train, cfg.defects.delta, a.seed, None)?;
    let files = bank.save_dir(&a.out)?;
    print_json(&json!({ "checkpoints": files }));
    Ok(())
}

fn cmd_train_ae(a: TrainAeArgs) -> Result<()> {
    let mut cfg = a.config.experiment()?;
    cfg.reconstructor.checkpoint = None;
    cfg.reconstructor.train = true;
    let corpus = Corpus::prepare(&cfg, a.seed)?;
    let model = match a.mode {
        AeMode::Full => {
            obtain_ae(&cfg.reconstructor, &corpus.train_bad, &corpus.clean_train, &corpus.train_maps, a.seed, None)?
        }
        AeMode::Cluster => {
            let vit = VitConfig { mask_center: true, ..cfg.reconstructor.vit() };
            let sampling = ClusterSampling { per_frame: a.per_frame, delta: cfg.defects.delta, seed: a.seed };
            let data = AeDataset::clusters(&corpus.clean_train, &vit, &sampling)?;
            let mut m = VitAe::new(vit, a.seed)?;
            let mut hyper = default_training(cfg.reconstructor.epochs);
            hyper.seed = a.seed;
            train_ae(&mut m, &data, &hyper)?;
            m
        }
    };
    model.to_checkpoint().save(&a.out)?;
    let cost = model.cost();
    print_json(&json!({ "checkpoint": a.out, "params": cost.params, "kmacs": cost.macs as f64 / 1000.0 }));
    Ok(())
}

fn cmd_correct(a: CorrectArgs) -> Result<()> {
    let img = a.raw.load(&a.input)?;
    let map = DefectMap::load(&a.map, Some((img.width(), img.height())))?;
    let out = match a.strategy {
        Corrector::Mlp => {
            let dir = a.models.as_ref().ok_or_else(|| Error::Config("--models is required for --strategy mlp".into()))?;
            correct_pixels(&img, &map, &ModelBank::load_dir(dir)?, a.patch_size)?
        }
        Corrector::Nearest => correct_nearest(&img, &map)?,
        Corrector::Linear => correct_linear(&img, &map, a.window)?,
        Corrector::Median => correct_median(&img, &map, a.window)?,
    };
    save_pgm(&out, &a.out)
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let model = VitAe::<f32>::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let img = a.raw.load(&a.input)?;
    let map = a.map.as_ref().map(|p| DefectMap::load(p, Some((img.width(), img.height())))).transpose()?;
    save_pgm(&reconstruct(&model, &img, map.as_ref())?, &a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if let (Some(pred), Some(truth)) = (&a.pred, &a.truth) {
        let pred = a.raw.load(pred)?;
        let truth = a.raw.load(truth)?;
        let mask = a.mask.as_ref().map(|p| DefectMap::load(p, Some((truth.width(), truth.height())))).transpose()?;
        let record = json!({
            "nmse": nmse(&pred, &truth, mask.as_ref())?,
            "psnr": psnr(&pred, &truth)?.db(),
        });
        print_json(&record);
        return Ok(());
    }
    let report = run_pipeline(&a.config.experiment()?)?;
    print!("{}", render_report(&report, a.format));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    create_dir(&a.out)?;
    let name = a.experiment.to_possible_value().expect("named variant").get_name().to_string();
    let results: Vec<serde_json::Value> = run_seeds(&a.seeds, |seed| sweep_one(&a, seed))?;
    if let Experiment::Detection = a.experiment {
        let rows: Vec<_> = results
            .iter()
            .flat_map(|r| serde_json::from_value::<Vec<badpix::pipeline::MetricsRow>>(r["rows"].clone()).expect("rows"))
            .collect();
        write(&a.out.join(format!("{name}.csv")), &rows_to_csv(&rows))?;
    }
    let path = a.out.join(format!("{name}.json"));
    write(&path, &to_canonical_json(&results))?;
    print_json(&json!({ "experiment": name, "seeds": a.seeds, "output": path }));
    Ok(())
}

/// Runs seeds on scoped worker threads and merges results in seed order.
fn run_seeds<F>(seeds: &[u64], f: F) -> Result<Vec<serde_json::Value>>
where
    F: Fn(u64) -> Result<serde_json::Value> + Sync,
{
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let mut out: Vec<Option<Result<serde_json::Value>>> = (0..seeds.len()).map(|_| None).collect();
    for (chunk_seeds, chunk_out) in seeds.chunks(workers).zip(out.chunks_mut(workers)) {
        std::thread::scope(|s| {
            for (&seed, slot) in chunk_seeds.iter().zip(chunk_out.iter_mut()) {
                let f = &f;
                s.spawn(move || *slot = Some(f(seed)));
            }
        });
    }
    out.into_iter().map(|r| r.expect("worker finished")).collect()
}

fn sweep_one(a: &SweepArgs, seed: u64) -> Result<serde_json::Value> {
    Ok(match a.experiment {
        Experiment::Detection => {
            let mut setup: DetectionSetup = a.config.parse()?;
            setup.desk.seed = seed;
            let r = detection_trial(&setup, &a.frames)?;
            json!({ "seed": seed, "result": value(&r), "rows": value(&r.rows(&setup)) })
        }
        Experiment::Correctors => {
            let mut setup: CorrectorSetup = a.config.parse()?;
            setup.desk.seed = seed;
            json!({ "seed": seed, "result": value(&compare_correctors(&setup)?) })
        }
        Experiment::Crossover => {
            let mut setup: CrossoverSetup = a.config.parse()?;
            setup.desk.seed = seed;
            json!({ "seed": seed, "result": value(&crossover(&setup)?) })
        }
        Experiment::Cluster => {
            let mut setup: ClusterSetup = a.config.parse()?;
            setup.desk.seed = seed;
            json!({ "seed": seed, "result": value(&cluster_experiment(&setup)?) })
        }
        Experiment::NeighborGrid => {
            let mut setup: AblationSetup = a.config.parse()?;
            setup.desk.seed = seed;
            let mut cells = Vec::new();
            for &p in &a.patch_sizes {
                cells.extend(neighbor_error_grid(&setup, p, &a.train_errors, &a.test_errors)?);
            }
            json!({ "seed": seed, "result": value(&cells) })
        }
        Experiment::PatchSize => {
            let mut setup: AblationSetup = a.config.parse()?;
            setup.desk.seed = seed;
            let mut cells = Vec::new();
            for &k in &a.train_errors {
                cells.extend(patch_size_sweep(&setup, &a.patch_sizes, k)?);
            }
            json!({ "seed": seed, "result": value(&cells) })
        }
        Experiment::Table1 => {
            let mut setup: Table1Setup = a.config.parse()?;
            setup.detection.desk.seed = seed;
            setup.crossover.desk.seed = seed;
            json!({ "seed": seed, "result": value(&table1(&setup)?) })
        }
    })
}

fn value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("results serialize")
}

fn cmd_report_cost(a: CostArgs) -> Result<()> {
    let base = VitConfig { mask_center: matches!(a.mode, AeMode::Cluster), ..a.config.parse::<VitConfig>()? };
    let (config, cost) = if a.tune {
        let (ratio, cost) = tune_mlp_ratio(&base, CLUSTER_REFERENCE_COST, &[1, 2, 3, 4])?;
        (VitConfig { mlp_ratio: ratio, ..base }, cost)
    } else {
        (base, count_params_flops(&base)?)
    };
    print_json(&json!({
        "params": cost.params,
        "kmacs": cost.macs as f64 / 1000.0,
        "mlp_ratio": config.mlp_ratio,
        "reference_params": CLUSTER_REFERENCE_COST.params,
        "reference_kmacs": CLUSTER_REFERENCE_COST.macs as f64 / 1000.0,
    }));
    Ok(())
}
