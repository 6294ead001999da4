//! Desk-scale sweeps behind the detection, correction, crossover, cluster and
//! ablation tables. Every setup is plain data with defaults, so the command
//! line can read it from TOML with overrides.

use serde::{Deserialize, Serialize};

use super::{
    derive_seed, obtain_bank, pooled_scores, select_strategy, CorrectorConfig, MetricsRow, ReconstructorConfig,
    Strategy, DEFAULT_STRATEGY_THRESHOLD,
};
use crate::autodiff::{Cost, LrSchedule, TrainConfig};
use crate::baselines::{correct_linear, correct_median, correct_nearest};
use crate::corrector::{correct_pixels, sample_patches, train_corrector, Mlp, MlpConfig, PatchSampling};
use crate::defects::{inject, sample_defect_map, DefectMap, DefectSpec};
use crate::detector::{predict_scores, train_detector, DetectorTraining, ProbAccumulator, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::imaging::{generate_synthetic, BayerImage, CfaPattern, Patch, SceneKind, SceneSpec};
use crate::metrics::{confusion, nmse_values, precision_recall, ConfusionCounts, Psnr};
use crate::reconstructor::{
    count_params_flops, cost_deviation, reconstruct, reconstruct_masked_cluster, train_ae, AeDataset, ClusterSampling, VitAe, VitConfig,
    CLUSTER_REFERENCE_COST,
};

const STREAM_TRAIN: u64 = 11;
const STREAM_TEST: u64 = 12;
const STREAM_MAP: u64 = 13;
const STREAM_VALUES: u64 = 14;
const STREAM_MODEL: u64 = 15;
const STREAM_TRAIN_MAPS: u64 = 16;

/// Synthetic frames shared by the sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Desk {
    pub size: usize,
    pub scene: SceneKind,
    pub noise: f32,
    pub train_frames: usize,
    pub test_frames: usize,
    pub seed: u64,
}

impl Default for Desk {
    fn default() -> Self {
        Self { size: 128, scene: SceneKind::BandLimited, noise: 0.0, train_frames: 16, test_frames: 4, seed: 0 }
    }
}

impl Desk {
    fn frame(&self, size: usize, stream: u64, index: u64) -> Result<BayerImage> {
        generate_synthetic(&SceneSpec {
            noise: self.noise,
            ..SceneSpec::new(size, size, self.scene, derive_seed(self.seed, stream, index))
        })
    }

    pub fn train(&self) -> Result<Vec<BayerImage>> {
        (0..self.train_frames as u64).map(|i| self.frame(self.size, STREAM_TRAIN, i)).collect()
    }

    pub fn test(&self) -> Result<Vec<BayerImage>> {
        (0..self.test_frames as u64).map(|i| self.frame(self.size, STREAM_TEST, i)).collect()
    }
}

/// Frames corrupted with an independent map each; returns maps and frames.
fn corrupt_each(frames: &[BayerImage], rate: f64, delta: f64, seed: u64, stream: u64) -> Result<(Vec<DefectMap>, Vec<BayerImage>)> {
    let mut maps = Vec::with_capacity(frames.len());
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let s = derive_seed(seed, stream, i as u64);
        let map = sample_defect_map(f.width(), f.height(), rate, s)?;
        out.push(inject(f, &map, &DefectSpec { rate, delta, seed: s, ..Default::default() })?);
        maps.push(map);
    }
    Ok((maps, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSetup {
    pub desk: Desk,
    pub rate: f64,
    pub delta: f64,
    /// Defect rate of the training frames; the test rate when unset.
    pub train_rate: Option<f64>,
    /// Deviation of the training defects; the test deviation when unset.
    pub train_delta: Option<f64>,
    pub unet: UNetConfig,
    pub training: DetectorTraining,
    pub threshold: f64,
    /// Independent test sensors, each seen through its own frame sequence.
    pub test_sensors: usize,
    /// Edge of the square test frames; the training size when unset.
    pub test_size: Option<usize>,
}

impl Default for DetectionSetup {
    fn default() -> Self {
        Self {
            desk: Desk::default(),
            rate: 0.01,
            delta: 0.7,
            train_rate: None,
            train_delta: None,
            unet: UNetConfig::default(),
            training: DetectorTraining::default(),
            threshold: 0.5,
            test_sensors: 1,
            test_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub n_frames: usize,
    pub counts: ConfusionCounts,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub points: Vec<DetectionPoint>,
}

impl DetectionResult {
    pub fn rows(&self, setup: &DetectionSetup) -> Vec<MetricsRow> {
        self.points
            .iter()
            .map(|p| MetricsRow {
                run_id: format!("detect-s{}-n{}", self.seed, p.n_frames),
                error_rate: setup.rate,
                delta: setup.delta,
                n_frames: p.n_frames,
                strategy: "detect".into(),
                recall: p.recall,
                precision: p.precision,
                nmse: None,
                psnr: None,
            })
            .collect()
    }
}

/// Trains a detector on one sensor and scores calibrated detection on fresh
/// sensors after each frame count in `ns`. Counts are pooled over sensors.
pub fn detection_trial(setup: &DetectionSetup, ns: &[usize]) -> Result<DetectionResult> {
    let max_n = ns.iter().copied().max().ok_or_else(|| Error::InvalidArgument("no frame counts".into()))?;
    if ns.contains(&0) {
        return Err(Error::InvalidArgument("frame counts start at 1".into()));
    }
    let d = &setup.desk;
    let train_rate = setup.train_rate.unwrap_or(setup.rate);
    let train_delta = setup.train_delta.unwrap_or(setup.delta);
    let clean = d.train()?;
    let train_maps = (0..clean.len() as u64)
        .map(|i| sample_defect_map(d.size, d.size, train_rate, derive_seed(d.seed, STREAM_TRAIN_MAPS, i)))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<BayerImage> = clean
        .iter()
        .zip(&train_maps)
        .enumerate()
        .map(|(i, (f, m))| {
            let seed = derive_seed(d.seed, STREAM_VALUES, i as u64);
            inject(f, m, &DefectSpec { rate: train_rate, delta: train_delta, seed, ..Default::default() })
        })
        .collect::<Result<_>>()?;
    let mut net = UNet::new(setup.unet, derive_seed(d.seed, STREAM_MODEL, 0))?;
    let mut training = setup.training;
    training.train.seed = d.seed;
    let loss_curve = train_detector(&mut net, &frames, &train_maps, &training)?;

    let size = setup.test_size.unwrap_or(d.size);
    let mut totals = vec![ConfusionCounts::default(); ns.len()];
    for sensor in 0..setup.test_sensors as u64 {
        let map = sample_defect_map(size, size, setup.rate, derive_seed(d.seed, STREAM_MAP, 1 + sensor))?;
        let mut acc = ProbAccumulator::new(size, size);
        for i in 0..max_n as u64 {
            let index = sensor * 1000 + i;
            let clean = d.frame(size, STREAM_TEST, index)?;
            let seed = derive_seed(d.seed, STREAM_VALUES, 1_000_000 + index);
            let bad = inject(&clean, &map, &DefectSpec { rate: setup.rate, delta: setup.delta, seed, ..Default::default() })?;
            acc.calibrate(&predict_scores(&net, &bad, training.tile)?)?;
            for (k, &n) in ns.iter().enumerate() {
                if n == i as usize + 1 {
                    totals[k] = totals[k] + confusion(&acc.finalize(setup.threshold)?, &map)?;
                }
            }
        }
    }
    let points = ns
        .iter()
        .zip(totals)
        .map(|(&n, counts)| {
            let (precision, recall) = precision_recall(&counts);
            DetectionPoint { n_frames: n, counts, recall, precision }
        })
        .collect();
    Ok(DetectionResult { seed: d.seed, loss_curve, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorSetup {
    pub desk: Desk,
    pub rate: f64,
    pub delta: f64,
    pub corrector: CorrectorConfig,
    /// Window of the linear and median baselines.
    pub window: usize,
}

impl Default for CorrectorSetup {
    fn default() -> Self {
        Self { desk: Desk::default(), rate: 0.2, delta: 0.7, corrector: CorrectorConfig::default(), window: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub nmse: Option<f64>,
    pub psnr: Option<Psnr>,
}

/// Corrects held-out frames at known defect locations with the MLP bank and
/// the three baselines.
pub fn compare_correctors(setup: &CorrectorSetup) -> Result<Vec<MethodScore>> {
    let d = &setup.desk;
    let bank = obtain_bank(&setup.corrector, &d.train()?, setup.delta, d.seed, None)?;
    let clean = d.test()?;
    let (maps, bad) = corrupt_each(&clean, setup.rate, setup.delta, d.seed, STREAM_VALUES)?;
    type Method<'a> = Box<dyn Fn(&BayerImage, &DefectMap) -> Result<BayerImage> + 'a>;
    let methods: Vec<(&str, Method)> = vec![
        ("mlp", Box::new(|f, m| correct_pixels(f, m, &bank, setup.corrector.patch_size))),
        ("linear", Box::new(|f, m| correct_linear(f, m, setup.window))),
        ("median", Box::new(|f, m| correct_median(f, m, setup.window))),
        ("nearest", Box::new(correct_nearest)),
    ];
    let mut out = Vec::new();
    for (name, run) in methods {
        let fixed = bad.iter().zip(&maps).map(|(f, m)| run(f, m)).collect::<Result<Vec<_>>>()?;
        let (nmse, psnr) = pooled_scores(&fixed, &clean, &maps)?;
        out.push(MethodScore { method: name.into(), nmse, psnr });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossoverSetup {
    pub desk: Desk,
    pub rates: Vec<f64>,
    pub delta: f64,
    pub threshold: f64,
    pub corrector: CorrectorConfig,
    pub reconstructor: ReconstructorConfig,
}

impl Default for CrossoverSetup {
    fn default() -> Self {
        Self {
            desk: Desk { train_frames: 64, ..Desk::default() },
            rates: vec![0.0001, 0.01, 0.1, 0.2, 0.4, 0.5, 0.7, 0.85],
            delta: 0.7,
            threshold: DEFAULT_STRATEGY_THRESHOLD,
            corrector: CorrectorConfig { neighbor_errors: vec![0, 2, 4, 8, 12, 16], ..CorrectorConfig::default() },
            reconstructor: ReconstructorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverPoint {
    pub rate: f64,
    pub nmse_mlp: Option<f64>,
    pub nmse_ae: Option<f64>,
    /// Strategy picked for this rate by the threshold rule.
    pub selected: Strategy,
}

/// NMSE of patch correction and of reconstruction on the same frames and
/// defects at each rate. One MLP bank serves every rate; the autoencoder is
/// trained per rate on frames of that rate.
pub fn crossover(setup: &CrossoverSetup) -> Result<Vec<CrossoverPoint>> {
    let d = &setup.desk;
    let train = d.train()?;
    let test = d.test()?;
    let bank = obtain_bank(&setup.corrector, &train, setup.delta, d.seed, None)?;
    let mut out = Vec::new();
    for (ri, &rate) in setup.rates.iter().enumerate() {
        let stream = 100 + 2 * ri as u64;
        let (train_maps, train_bad) = corrupt_each(&train, rate, setup.delta, d.seed, stream)?;
        let keep: Vec<usize> = (0..train.len()).filter(|&i| !train_maps[i].is_empty()).collect();
        if keep.is_empty() {
            return Err(Error::EmptyMask);
        }
        let data = AeDataset::from_frames(
            &pick(&train_bad, &keep),
            &pick(&train, &keep),
            &pick(&train_maps, &keep),
            setup.reconstructor.input_size,
        )?;
        let mut ae = VitAe::new(setup.reconstructor.vit(), derive_seed(d.seed, STREAM_MODEL, stream))?;
        train_ae(&mut ae, &data, &setup.reconstructor.training(d.seed))?;

        let (maps, bad) = corrupt_each(&test, rate, setup.delta, d.seed, stream + 1)?;
        let by_mlp = bad
            .iter()
            .zip(&maps)
            .map(|(f, m)| correct_pixels(f, m, &bank, setup.corrector.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let by_ae = bad.iter().zip(&maps).map(|(f, m)| reconstruct(&ae, f, Some(m))).collect::<Result<Vec<_>>>()?;
        out.push(CrossoverPoint {
            rate,
            nmse_mlp: pooled_scores(&by_mlp, &test, &maps)?.0,
            nmse_ae: pooled_scores(&by_ae, &test, &maps)?.0,
            selected: select_strategy(rate, setup.threshold),
        });
    }
    Ok(out)
}

fn pick<T: Clone>(v: &[T], keep: &[usize]) -> Vec<T> {
    keep.iter().map(|&i| v[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSetup {
    pub desk: Desk,
    pub config: VitConfig,
    pub delta: f64,
    pub train_per_frame: usize,
    pub test_per_frame: usize,
    pub training: TrainConfig,
}

impl Default for ClusterSetup {
    fn default() -> Self {
        Self {
            desk: Desk::default(),
            config: VitConfig::cluster(),
            delta: 0.7,
            train_per_frame: 200,
            test_per_frame: 100,
            training: TrainConfig {
                epochs: 20,
                batch_size: 16,
                schedule: LrSchedule::WarmupCosine { base: 0.01, warmup: 5, total: 20 },
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub nmse: Option<f64>,
    pub cost: Cost,
    pub reference: Cost,
    pub deviation: f64,
    pub loss_curve: Vec<f64>,
}

/// Trains the masked-cluster model and scores the central token on
/// held-out crops.
pub fn cluster_experiment(setup: &ClusterSetup) -> Result<ClusterResult> {
    let d = &setup.desk;
    let cfg = setup.config;
    let train = AeDataset::clusters(
        &d.train()?,
        &cfg,
        &ClusterSampling { per_frame: setup.train_per_frame, delta: setup.delta, seed: derive_seed(d.seed, STREAM_TRAIN, 7) },
    )?;
    let test = AeDataset::clusters(
        &d.test()?,
        &cfg,
        &ClusterSampling { per_frame: setup.test_per_frame, delta: setup.delta, seed: derive_seed(d.seed, STREAM_TEST, 7) },
    )?;
    let mut model = VitAe::new(cfg, derive_seed(d.seed, STREAM_MODEL, 7))?;
    let mut training = setup.training;
    training.seed = d.seed;
    let loss_curve = train_ae(&mut model, &train, &training)?;

    let area = cfg.input_size * cfg.input_size;
    let (mut p, mut a) = (Vec::new(), Vec::new());
    for i in 0..test.len() {
        let half = cfg.input_size / 2;
        let patch = Patch { size: cfg.input_size, center: (half, half), data: decoded(&test, i, area), color: CfaPattern::default().color_at(half, half) };
        let out = reconstruct_masked_cluster(&model, &patch)?;
        for k in 0..area {
            if test.masks[i * area + k] > 0.0 {
                p.push(out.data[k]);
                a.push(test.targets[i * area + k]);
            }
        }
    }
    let cost = count_params_flops(&cfg)?;
    Ok(ClusterResult {
        nmse: nmse_values(&p, &a),
        cost,
        reference: CLUSTER_REFERENCE_COST,
        deviation: cost_deviation(cost, CLUSTER_REFERENCE_COST),
        loss_curve,
    })
}

fn decoded(set: &AeDataset, i: usize, area: usize) -> Vec<f32> {
    set.inputs[i * area..(i + 1) * area].iter().map(|v| (v + 1.0) / 2.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSetup {
    pub desk: Desk,
    pub delta: f64,
    pub hidden_units: usize,
    pub train_per_frame: usize,
    pub test_per_frame: usize,
    pub training: TrainConfig,
}

impl Default for AblationSetup {
    fn default() -> Self {
        Self {
            desk: Desk::default(),
            delta: 0.7,
            hidden_units: 64,
            train_per_frame: 1000,
            test_per_frame: 500,
            training: crate::corrector::default_training(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub patch_size: usize,
    pub train_errors: usize,
    pub test_errors: usize,
    pub nmse: Option<f64>,
}

fn train_mlp(setup: &AblationSetup, frames: &[BayerImage], patch_size: usize, k: usize) -> Result<Mlp<f32>> {
    let d = &setup.desk;
    let tag = (patch_size * 100 + k) as u64;
    let set = sample_patches(
        frames,
        &PatchSampling {
            size: patch_size,
            per_frame: setup.train_per_frame,
            neighbor_errors: k,
            delta: setup.delta,
            seed: derive_seed(d.seed, STREAM_TRAIN, tag),
        },
    )?;
    let cfg = MlpConfig { patch_size, hidden_units: setup.hidden_units, train_neighbor_errors: k };
    let mut m = Mlp::new(cfg, derive_seed(d.seed, STREAM_MODEL, tag))?;
    let mut training = setup.training;
    training.seed = d.seed;
    train_corrector(&mut m, &set, &training)?;
    Ok(m)
}

fn score_mlp(setup: &AblationSetup, frames: &[BayerImage], m: &Mlp<f32>, k: usize) -> Result<Option<f64>> {
    let p = m.config().patch_size;
    let set = sample_patches(
        frames,
        &PatchSampling {
            size: p,
            per_frame: setup.test_per_frame,
            neighbor_errors: k,
            delta: setup.delta,
            seed: derive_seed(setup.desk.seed, STREAM_TEST, (p * 100 + k) as u64),
        },
    )?;
    Ok(nmse_values(&m.predict(&set.features)?, &set.targets))
}

/// NMSE of every (train errors, test errors) pair on held-out patches with
/// exactly that many corrupted neighbours.
pub fn neighbor_error_grid(setup: &AblationSetup, patch_size: usize, train_ks: &[usize], test_ks: &[usize]) -> Result<Vec<AblationCell>> {
    let (train, test) = (setup.desk.train()?, setup.desk.test()?);
    let mut out = Vec::new();
    for &tk in train_ks {
        let m = train_mlp(setup, &train, patch_size, tk)?;
        for &ek in test_ks {
            out.push(AblationCell { patch_size, train_errors: tk, test_errors: ek, nmse: score_mlp(setup, &test, &m, ek)? });
        }
    }
    Ok(out)
}

/// NMSE per patch size with `k` corrupted neighbours at train and test time.
pub fn patch_size_sweep(setup: &AblationSetup, sizes: &[usize], k: usize) -> Result<Vec<AblationCell>> {
    let (train, test) = (setup.desk.train()?, setup.desk.test()?);
    sizes
        .iter()
        .map(|&p| {
            let m = train_mlp(setup, &train, p, k)?;
            Ok(AblationCell { patch_size: p, train_errors: k, test_errors: k, nmse: score_mlp(setup, &test, &m, k)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Table1Setup {
    pub datasets: Vec<SceneKind>,
    pub rates: Vec<f64>,
    pub n_frames: usize,
    pub detection: DetectionSetup,
    pub crossover: CrossoverSetup,
}

impl Default for Table1Setup {
    fn default() -> Self {
        Self {
            datasets: vec![SceneKind::BandLimited, SceneKind::Mixture],
            rates: vec![0.0001, 0.7],
            n_frames: 1,
            detection: DetectionSetup::default(),
            crossover: CrossoverSetup::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub dataset: SceneKind,
    pub error_rate: f64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub nmse_mlp: Option<f64>,
    pub nmse_ae: Option<f64>,
}

/// Detection and both correction strategies for each scene kind and rate.
pub fn table1(setup: &Table1Setup) -> Result<Vec<Table1Row>> {
    let mut rows = Vec::new();
    for &scene in &setup.datasets {
        let mut cross = setup.crossover.clone();
        cross.desk.scene = scene;
        cross.rates = setup.rates.clone();
        let points = crossover(&cross)?;
        for (&rate, point) in setup.rates.iter().zip(points) {
            let mut det = setup.detection.clone();
            det.desk.scene = scene;
            det.rate = rate;
            let r = detection_trial(&det, &[setup.n_frames])?;
            let p = &r.points[0];
            rows.push(Table1Row {
                dataset: scene,
                error_rate: rate,
                recall: p.recall,
                precision: p.precision,
                nmse_mlp: point.nmse_mlp,
                nmse_ae: point.nmse_ae,
            });
        }
    }
    Ok(rows)
}
