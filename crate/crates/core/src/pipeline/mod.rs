//! Configuration, the detect / estimate / select / correct flow, experiment
//! sweeps and report emission.

mod config;
pub mod experiments;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    parse_with_overrides, CorrectorConfig, DataConfig, DataSource, DefectConfig, DetectorConfig, ExperimentConfig,
    ReconstructorConfig, DEFAULT_STRATEGY_THRESHOLD,
};
pub use report::{
    emit_report, render_report, rows_to_csv, to_canonical_json, MetricsRow, ReportFormat, RunReport, SeedSummary,
    CSV_COLUMNS,
};

use crate::autodiff::Checkpoint;
use crate::corrector::{correct_pixels, sample_patches, train_corrector, Mlp, ModelBank, PatchSampling};
use crate::defects::{inject, sample_defect_map, DefectMap};
use crate::detector::{detect, estimate_error_rate, train_detector, UNet};
use crate::error::{Error, Result, StageContext};
use crate::imaging::{generate_synthetic, load_image, save_pgm, BayerImage, RawFormat, SceneSpec};
use crate::metrics::{confusion, nmse_values, precision_recall, psnr_from_mse, Psnr};
use crate::reconstructor::{reconstruct, train_ae, AeDataset, VitAe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mlp,
    Ae,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Mlp => "mlp",
            Strategy::Ae => "ae",
        }
    }
}

/// Patch correction up to and including `threshold`, reconstruction above.
pub fn select_strategy(estimated_rate: f64, threshold: f64) -> Strategy {
    if estimated_rate <= threshold {
        Strategy::Mlp
    } else {
        Strategy::Ae
    }
}

/// Independent stream of seeds for one purpose within a run.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN_SCENE: u64 = 1;
const STREAM_TEST_SCENE: u64 = 2;
const STREAM_TRAIN_MAP: u64 = 3;
const STREAM_TEST_MAP: u64 = 4;
const STREAM_TRAIN_VALUES: u64 = 5;
const STREAM_TEST_VALUES: u64 = 6;
const STREAM_MODELS: u64 = 7;

/// Clean training and test frames for one seed.
pub fn load_frames(data: &DataConfig, seed: u64) -> Result<(Vec<BayerImage>, Vec<BayerImage>)> {
    match data.source {
        DataSource::Synthetic => {
            let scene = |stream: u64, i: usize| {
                generate_synthetic(&SceneSpec {
                    width: data.width,
                    height: data.height,
                    kind: data.scene,
                    seed: derive_seed(seed, stream, i as u64),
                    noise: data.noise,
                    pattern: data.pattern,
                    ..SceneSpec::default()
                })
            };
            let train = (0..data.train_frames).map(|i| scene(STREAM_TRAIN_SCENE, i)).collect::<Result<_>>()?;
            let test = (0..data.test_frames).map(|i| scene(STREAM_TEST_SCENE, i)).collect::<Result<_>>()?;
            Ok((train, test))
        }
        DataSource::Directory => {
            let dir = data.directory.as_deref().ok_or_else(|| Error::Config("data.directory is not set".into()))?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
                .collect();
            paths.sort();
            let need = data.train_frames + data.test_frames;
            if paths.len() < need {
                return Err(Error::InvalidArgument(format!(
                    "{} holds {} PGM files, {need} needed",
                    dir.display(),
                    paths.len()
                )));
            }
            let mut frames = paths[..need]
                .iter()
                .map(|p| load_image(p, RawFormat::Pgm, data.bit_depth, data.pattern))
                .collect::<Result<Vec<_>>>()?;
            let test = frames.split_off(data.train_frames);
            Ok((frames, test))
        }
    }
}

/// Corrupts every frame with the same map and per-frame defect values.
pub fn corrupt_frames(frames: &[BayerImage], map: &DefectMap, cfg: &DefectConfig, seed: u64, stream: u64) -> Result<Vec<BayerImage>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| inject(f, map, &cfg.spec(derive_seed(seed, stream, i as u64))))
        .collect()
}

/// Trains or loads the detector. `maps` is one defect map shared by all
/// training frames or one map per frame.
pub fn obtain_detector(
    cfg: &DetectorConfig,
    train: &[BayerImage],
    maps: &[DefectMap],
    seed: u64,
    out: Option<&Path>,
) -> Result<UNet<f32>> {
    if let Some(path) = cfg.checkpoint.as_deref().filter(|p| p.exists()) {
        let net = UNet::from_checkpoint(&Checkpoint::load(path)?)?;
        if net.config() != &cfg.unet() {
            return Err(Error::Config(format!("{} does not match the detector config", path.display())));
        }
        return Ok(net);
    }
    if !cfg.train {
        return Err(Error::Config("detector checkpoint missing and training disabled".into()));
    }
    let mut net = UNet::new(cfg.unet(), derive_seed(seed, STREAM_MODELS, 0))?;
    let curve = train_detector(&mut net, train, maps, &cfg.training(seed))?;
    if let Some(dir) = out {
        net.to_checkpoint().save(dir.join("unet.ckpt"))?;
        write_curve(&dir.join("unet_loss.json"), &curve)?;
    }
    Ok(net)
}

/// Trains or loads one corrector per configured neighbour-error count.
pub fn obtain_bank(cfg: &CorrectorConfig, clean_train: &[BayerImage], delta: f64, seed: u64, out: Option<&Path>) -> Result<ModelBank> {
    if let Some(dir) = cfg.checkpoint_dir.as_deref().filter(|p| p.is_dir()) {
        let bank = ModelBank::load_dir(dir)?;
        if bank.keys().any(|(p, _)| p == cfg.patch_size) {
            return Ok(bank);
        }
    }
    if !cfg.train {
        return Err(Error::Config("corrector checkpoints missing and training disabled".into()));
    }
    let mut bank = ModelBank::new();
    let mut curves = Vec::new();
    for &k in &cfg.neighbor_errors {
        let sampling = PatchSampling {
            size: cfg.patch_size,
            per_frame: cfg.patches_per_frame,
            neighbor_errors: k,
            delta,
            seed: derive_seed(seed, STREAM_MODELS, 100 + k as u64),
        };
        let set = sample_patches(clean_train, &sampling)?;
        let mut m = Mlp::new(cfg.mlp(k), derive_seed(seed, STREAM_MODELS, 200 + k as u64))?;
        curves.push((k, train_corrector(&mut m, &set, &cfg.training(seed))?));
        bank.insert(m);
    }
    if let Some(dir) = out {
        bank.save_dir(dir.join("mlp"))?;
        let text = serde_json::to_string(&curves).expect("curves serialize");
        let path = dir.join("mlp_loss.json");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(bank)
}

/// Trains or loads the full-frame autoencoder on corrupted training frames.
pub fn obtain_ae(
    cfg: &ReconstructorConfig,
    corrupted: &[BayerImage],
    clean: &[BayerImage],
    maps: &[DefectMap],
    seed: u64,
    out: Option<&Path>,
) -> Result<VitAe<f32>> {
    if let Some(path) = cfg.checkpoint.as_deref().filter(|p| p.exists()) {
        return VitAe::from_checkpoint(&Checkpoint::load(path)?);
    }
    if !cfg.train {
        return Err(Error::Config("autoencoder checkpoint missing and training disabled".into()));
    }
    let data = AeDataset::from_frames(corrupted, clean, maps, cfg.input_size)?;
    let mut m = VitAe::new(cfg.vit(), derive_seed(seed, STREAM_MODELS, 300))?;
    let curve = train_ae(&mut m, &data, &cfg.training(seed))?;
    if let Some(dir) = out {
        m.to_checkpoint().save(dir.join("vit_ae.ckpt"))?;
        write_curve(&dir.join("vit_ae_loss.json"), &curve)?;
    }
    Ok(m)
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    std::fs::write(path, to_canonical_json(&curve)).map_err(|e| Error::io(path, e))
}

/// NMSE over masked pixels pooled across frames, and PSNR over all pixels.
/// A single mask applies to every frame; otherwise there is one per frame.
pub fn pooled_scores(pred: &[BayerImage], act: &[BayerImage], masks: &[DefectMap]) -> Result<(Option<f64>, Option<Psnr>)> {
    if pred.len() != act.len() || (masks.len() != 1 && masks.len() != act.len()) {
        return Err(Error::mismatch(
            format!("{} frames and 1 or {} masks", act.len(), act.len()),
            format!("{} frames and {} masks", pred.len(), masks.len()),
        ));
    }
    let (mut p, mut a) = (Vec::new(), Vec::new());
    let (mut se, mut n) = (0.0, 0usize);
    for (f, (x, y)) in pred.iter().zip(act).enumerate() {
        let mask = &masks[f.min(masks.len() - 1)];
        x.same_dims(y)?;
        mask.check_dims(y)?;
        for (i, (&u, &v)) in x.data().iter().zip(y.data()).enumerate() {
            if mask.mask()[i] {
                p.push(u);
                a.push(v);
            }
            se += (u as f64 - v as f64).powi(2);
            n += 1;
        }
    }
    let psnr = (n > 0).then(|| psnr_from_mse(se / n as f64));
    Ok((nmse_values(&p, &a), psnr))
}

/// Runs inject, detect (with calibration), rate estimation, strategy
/// selection, correction and scoring for every seed, writing artifacts under
/// `output_dir/seed-<n>` and the report under `output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut report = RunReport { config_digest: cfg.digest(), ..Default::default() };
    for &seed in &cfg.seeds {
        let dir = root.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (row, summary, mut artifacts) = run_seed(cfg, seed, &dir)?;
        report.rows.push(row);
        report.seeds.push(summary);
        report.artifacts.append(&mut artifacts);
    }
    let json = root.join("report.json");
    let csv = root.join("report.csv");
    report.artifacts.push(json.clone());
    report.artifacts.push(csv.clone());
    emit_report(&report, ReportFormat::Csv, &csv).stage("report")?;
    emit_report(&report, ReportFormat::Json, &json).stage("report")?;
    Ok(report)
}

/// Clean and corrupted frames of one seed. Every training frame has its own
/// defect map; the test frames share a single sensor map.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clean_train: Vec<BayerImage>,
    pub clean_test: Vec<BayerImage>,
    pub train_maps: Vec<DefectMap>,
    pub test_map: DefectMap,
    pub train_bad: Vec<BayerImage>,
    pub test_bad: Vec<BayerImage>,
}

impl Corpus {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (clean_train, clean_test) = load_frames(&cfg.data, seed).stage("data")?;
        let (w, h) = (clean_test[0].width(), clean_test[0].height());
        (|| {
            let train_maps = (0..clean_train.len() as u64)
                .map(|i| sample_defect_map(w, h, cfg.defects.rate, derive_seed(seed, STREAM_TRAIN_MAP, i)))
                .collect::<Result<Vec<_>>>()?;
            let test_map = sample_defect_map(w, h, cfg.defects.rate, derive_seed(seed, STREAM_TEST_MAP, 0))?;
            let train_bad = clean_train
                .iter()
                .zip(&train_maps)
                .enumerate()
                .map(|(i, (f, m))| inject(f, m, &cfg.defects.spec(derive_seed(seed, STREAM_TRAIN_VALUES, i as u64))))
                .collect::<Result<Vec<_>>>()?;
            let test_bad = corrupt_frames(&clean_test, &test_map, &cfg.defects, seed, STREAM_TEST_VALUES)?;
            Ok(Self { clean_train, clean_test, train_maps, test_map, train_bad, test_bad })
        })()
        .stage("inject")
    }
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<(MetricsRow, SeedSummary, Vec<PathBuf>)> {
    let Corpus { clean_train, clean_test, train_maps, test_map, train_bad, test_bad } = Corpus::prepare(cfg, seed)?;

    let detector = obtain_detector(&cfg.detector, &train_bad, &train_maps, seed, Some(dir)).stage("train-detector")?;
    let detected = detect(&detector, &test_bad[..cfg.n_calibration_frames], cfg.detector.tile, cfg.detector.threshold)
        .stage("detect")?;
    let (precision, recall) = precision_recall(&confusion(&detected, &test_map).stage("detect")?);

    let estimated = estimate_error_rate(&detected);
    let strategy = select_strategy(estimated, cfg.strategy_threshold);

    let corrected: Vec<BayerImage> = match strategy {
        Strategy::Mlp => {
            let bank = obtain_bank(&cfg.corrector, &clean_train, cfg.defects.delta, seed, Some(dir)).stage("train-mlp")?;
            test_bad
                .iter()
                .map(|f| correct_pixels(f, &detected, &bank, cfg.corrector.patch_size))
                .collect::<Result<_>>()
                .stage("correct")?
        }
        Strategy::Ae => {
            let ae = obtain_ae(&cfg.reconstructor, &train_bad, &clean_train, &train_maps, seed, Some(dir)).stage("train-ae")?;
            test_bad
                .iter()
                .map(|f| reconstruct(&ae, f, Some(&detected)))
                .collect::<Result<_>>()
                .stage("reconstruct")?
        }
    };
    let (nmse, psnr) = pooled_scores(&corrected, &clean_test, std::slice::from_ref(&test_map)).stage("metrics")?;

    let mut artifacts = Vec::new();
    (|| {
        let map_path = dir.join("detected_map.pgm");
        detected.save(&map_path)?;
        artifacts.push(map_path);
        let img_path = dir.join("corrected_0.pgm");
        save_pgm(&corrected[0], &img_path)?;
        artifacts.push(img_path);
        for name in ["unet.ckpt", "unet_loss.json", "mlp", "mlp_loss.json", "vit_ae.ckpt", "vit_ae_loss.json"] {
            let p = dir.join(name);
            if p.exists() {
                artifacts.push(p);
            }
        }
        Ok(())
    })()
    .stage("artifacts")?;

    let row = MetricsRow {
        run_id: format!("{}-s{seed}", cfg.name),
        error_rate: cfg.defects.rate,
        delta: cfg.defects.delta,
        n_frames: cfg.n_calibration_frames,
        strategy: strategy.as_str().into(),
        recall,
        precision,
        nmse,
        psnr,
    };
    let summary = SeedSummary { seed, true_rate: cfg.defects.rate, estimated_rate: estimated, strategy: strategy.as_str().into() };
    Ok((row, summary, artifacts))
}
