//! Patch MLP that predicts a pixel from its neighbours.
//!
//! The input is the `size x size` window around the pixel with the centre
//! removed, values mapped to `[-1, 1]`. Neighbours that are themselves
//! defective are fed as they are. Models trained for different numbers of
//! corrupted neighbours are kept in a [`ModelBank`] and chosen per pixel from
//! the local defect count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fit, Checkpoint, Cost, Dense, Graph, LrSchedule, ParamStore, Scalar, Tensor, TrainConfig, Var};
use crate::defects::{corrupt_value, DefectKind, DefectMap};
use crate::error::{Error, Result};
use crate::imaging::{push_window, BayerImage, Patch};

pub const CHECKPOINT_KIND: &str = "mlp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub patch_size: usize,
    pub hidden_units: usize,
    pub train_neighbor_errors: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { patch_size: 5, hidden_units: 64, train_neighbor_errors: 0 }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("patch_size {} must be odd and at least 3", self.patch_size)));
        }
        if self.hidden_units == 0 {
            return Err(Error::Config("hidden_units must be positive".into()));
        }
        if self.train_neighbor_errors >= self.input_width() {
            return Err(Error::Config(format!(
                "train_neighbor_errors {} exceeds the {} neighbours of a {}x{} patch",
                self.train_neighbor_errors,
                self.input_width(),
                self.patch_size,
                self.patch_size
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.patch_size * self.patch_size - 1
    }
}

/// `dense(hidden) -> relu -> dense(1) -> sigmoid`.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    config: MlpConfig,
    store: ParamStore<T>,
    fc1: Dense,
    fc2: Dense,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fc1 = Dense::new(&mut store, "fc1", config.input_width(), config.hidden_units, &mut rng);
        let fc2 = Dense::new(&mut store, "fc2", config.hidden_units, 1, &mut rng);
        Ok(Self { config, store, fc1, fc2 })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `[N, size^2 - 1]` features to `[N, 1]` predictions in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.forward_with(&self.store, g, x)
    }

    fn forward_with(&self, s: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, s, x)?;
        let h = g.relu(h);
        let y = self.fc2.forward(g, s, h)?;
        Ok(g.sigmoid(y))
    }

    /// Cost of one prediction.
    pub fn cost(&self) -> Cost {
        self.fc1.cost(1) + self.fc2.cost(1)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_store(CHECKPOINT_KIND, cfg, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: MlpConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Checkpoint(format!("bad MLP config: {e}")))?;
        let mut m = Self::new(config, 0)?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp { config: self.config, store: self.store.cast(), fc1: self.fc1, fc2: self.fc2 }
    }
}

const PREDICT_BATCH: usize = 4096;

impl Mlp<f32> {
    /// Predictions for `features.len() / input_width` rows of encoded features.
    pub fn predict(&self, features: &[f32]) -> Result<Vec<f32>> {
        let width = self.config.input_width();
        if !features.len().is_multiple_of(width) {
            return Err(Error::mismatch(format!("multiple of {width} features"), features.len()));
        }
        let mut out = Vec::with_capacity(features.len() / width);
        for chunk in features.chunks(PREDICT_BATCH * width) {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![chunk.len() / width, width], chunk.to_vec())?);
            let y = self.forward(&mut g, x)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }

    /// Centre estimate for a single patch; the centre value itself is ignored.
    pub fn predict_patch(&self, patch: &Patch) -> Result<f32> {
        if patch.size != self.config.patch_size {
            return Err(Error::mismatch(format!("{0}x{0} patch", self.config.patch_size), patch.size));
        }
        let feats: Vec<f32> = patch.neighbors().iter().map(|&v| encode(v)).collect();
        Ok(self.predict(&feats)?[0])
    }
}

#[inline]
fn encode(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// Appends the encoded neighbourhood of `center` to `out`.
pub fn push_features(img: &BayerImage, center: (usize, usize), size: usize, out: &mut Vec<f32>) {
    let start = out.len();
    push_window(img, center, size, true, out);
    for v in &mut out[start..] {
        *v = encode(*v);
    }
}

/// Encoded neighbourhoods with their true centre values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub features: Vec<f32>,
    pub targets: Vec<f32>,
}

impl PatchSet {
    pub fn new(size: usize) -> Self {
        Self { size, features: Vec::new(), targets: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.size * self.size - 1
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn features_of(&self, i: usize) -> &[f32] {
        &self.features[i * self.width()..(i + 1) * self.width()]
    }

    /// Patches around every pixel marked in `map`, read from the corrupted
    /// frame, with targets from the clean frame.
    pub fn at_defects(corrupted: &BayerImage, clean: &BayerImage, map: &DefectMap, size: usize) -> Result<Self> {
        corrupted.same_dims(clean)?;
        map.check_dims(clean)?;
        let mut set = Self::new(size);
        for (r, c) in map.coords() {
            push_features(corrupted, (r, c), size, &mut set.features);
            set.targets.push(clean.get(r, c));
        }
        Ok(set)
    }
}

/// Random training patches from clean frames with exactly `neighbor_errors`
/// corrupted neighbours each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSampling {
    pub size: usize,
    pub per_frame: usize,
    pub neighbor_errors: usize,
    pub delta: f64,
    pub seed: u64,
}

pub fn sample_patches(frames: &[BayerImage], spec: &PatchSampling) -> Result<PatchSet> {
    let width = spec.size * spec.size - 1;
    if spec.neighbor_errors > width {
        return Err(Error::InvalidArgument(format!(
            "{} corrupted neighbours requested in a window of {width}",
            spec.neighbor_errors
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut set = PatchSet::new(spec.size);
    let mut window = Vec::with_capacity(width);
    for frame in frames {
        for _ in 0..spec.per_frame {
            let center = (rng.random_range(0..frame.height()), rng.random_range(0..frame.width()));
            window.clear();
            push_window(frame, center, spec.size, true, &mut window);
            for idx in sample(&mut rng, width, spec.neighbor_errors) {
                window[idx] = corrupt_value(window[idx], spec.delta, DefectKind::Deviation, &mut rng);
            }
            set.features.extend(window.iter().map(|&v| encode(v)));
            set.targets.push(frame.get(center.0, center.1));
        }
    }
    Ok(set)
}

pub fn default_training() -> TrainConfig {
    TrainConfig { epochs: 50, batch_size: 16, schedule: LrSchedule::Constant { base: 0.01 }, seed: 0 }
}

/// Fits the centre value with mean squared error.
pub fn train_corrector(model: &mut Mlp<f32>, set: &PatchSet, hyper: &TrainConfig) -> Result<Vec<f64>> {
    if set.size != model.config.patch_size {
        return Err(Error::mismatch(format!("{0}x{0} patches", model.config.patch_size), set.size));
    }
    let width = set.width();
    let net = model.clone();
    fit(&mut model.store, set.len(), hyper, |g, s, idx| {
        let mut x = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            x.extend_from_slice(set.features_of(i));
        }
        let y: Vec<f32> = idx.iter().map(|&i| set.targets[i]).collect();
        let xv = g.input(Tensor::new(vec![idx.len(), width], x)?);
        let yv = g.input(Tensor::new(vec![idx.len(), 1], y)?);
        let p = net.forward_with(s, g, xv)?;
        g.mse(p, yv)
    })
}

/// Trained correctors keyed by `(patch_size, train_neighbor_errors)`.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: BTreeMap<(usize, usize), Mlp<f32>>,
}

impl ModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: Mlp<f32>) {
        let c = model.config;
        self.models.insert((c.patch_size, c.train_neighbor_errors), model);
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.models.keys().copied()
    }

    pub fn get(&self, patch_size: usize, neighbor_errors: usize) -> Option<&Mlp<f32>> {
        self.models.get(&(patch_size, neighbor_errors))
    }

    /// Model whose training error count is closest to `neighbor_errors`;
    /// the smaller count wins a tie.
    pub fn nearest(&self, patch_size: usize, neighbor_errors: usize) -> Result<&Mlp<f32>> {
        self.models
            .range((patch_size, 0)..=(patch_size, usize::MAX))
            .min_by_key(|((_, k), _)| (k.abs_diff(neighbor_errors), *k))
            .map(|(_, m)| m)
            .ok_or(Error::MissingModel { patch_size })
    }

    pub fn file_name(patch_size: usize, neighbor_errors: usize) -> String {
        format!("mlp_p{patch_size}_e{neighbor_errors}.ckpt")
    }

    /// Writes one checkpoint per model into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (&(p, k), m) in &self.models {
            let path = dir.join(Self::file_name(p, k));
            m.to_checkpoint().save(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Loads every `mlp_*.ckpt` in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("mlp_") && n.ends_with(".ckpt"))
            })
            .collect();
        names.sort();
        let mut bank = Self::new();
        for path in names {
            bank.insert(Mlp::from_checkpoint(&Checkpoint::load(&path)?)?);
        }
        Ok(bank)
    }
}

/// Replaces every pixel marked in `map` with the prediction of the bank model
/// matching its local defect count. Other pixels are copied bit for bit.
pub fn correct_pixels(img: &BayerImage, map: &DefectMap, bank: &ModelBank, patch_size: usize) -> Result<BayerImage> {
    map.check_dims(img)?;
    if map.is_empty() {
        return Ok(img.clone());
    }
    let mut groups: BTreeMap<(usize, usize), (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for (r, c) in map.coords() {
        let k = map.count_in_window((r, c), patch_size);
        let model = bank.nearest(patch_size, k)?;
        let key = (patch_size, model.config.train_neighbor_errors);
        let entry = groups.entry(key).or_default();
        entry.0.push(r * img.width() + c);
        push_features(img, (r, c), patch_size, &mut entry.1);
    }
    let mut out = img.data().to_vec();
    for ((p, k), (pixels, feats)) in groups {
        let model = bank.get(p, k).expect("key taken from bank");
        for (i, v) in pixels.into_iter().zip(model.predict(&feats)?) {
            out[i] = v.clamp(0.0, 1.0);
        }
    }
    img.with_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_synthetic, SceneKind, SceneSpec};

    #[test]
    fn shapes_and_parameter_count() {
        for h in [1, 16, 64] {
            let m = Mlp::<f32>::new(MlpConfig { hidden_units: h, ..Default::default() }, 0).unwrap();
            assert_eq!(m.config().input_width(), 24);
            assert_eq!(m.store().numel(), (24 * h + h) + (h + 1));
            assert_eq!(m.cost().params, m.store().numel());
        }
        assert!(MlpConfig { patch_size: 4, ..Default::default() }.validate().is_err());
        assert!(MlpConfig { hidden_units: 0, ..Default::default() }.validate().is_err());
        let m = Mlp::<f32>::new(MlpConfig::default(), 0).unwrap();
        let out = m.predict(&vec![0.3; 24 * 3]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn sampled_patches_have_exact_corruption_count() {
        let frame = BayerImage::filled(16, 16, 0.5).unwrap();
        let spec = PatchSampling { size: 5, per_frame: 20, neighbor_errors: 4, delta: 0.3, seed: 1 };
        let set = sample_patches(&[frame], &spec).unwrap();
        assert_eq!(set.len(), 20);
        for i in 0..set.len() {
            let changed = set.features_of(i).iter().filter(|&&v| (v - encode(0.5)).abs() > 1e-6).count();
            assert_eq!(changed, 4);
        }
    }

    #[test]
    fn bank_dispatch_and_persistence() {
        let mut bank = ModelBank::new();
        for k in [0, 4] {
            bank.insert(Mlp::new(MlpConfig { train_neighbor_errors: k, ..Default::default() }, k as u64).unwrap());
        }
        assert_eq!(bank.nearest(5, 1).unwrap().config().train_neighbor_errors, 0);
        assert_eq!(bank.nearest(5, 2).unwrap().config().train_neighbor_errors, 0);
        assert_eq!(bank.nearest(5, 3).unwrap().config().train_neighbor_errors, 4);
        assert!(matches!(bank.nearest(9, 0), Err(Error::MissingModel { patch_size: 9 })));

        let dir = tempfile::tempdir().unwrap();
        bank.save_dir(dir.path()).unwrap();
        let back = ModelBank::load_dir(dir.path()).unwrap();
        assert_eq!(back.keys().collect::<Vec<_>>(), vec![(5, 0), (5, 4)]);
        let feats = vec![0.1; 24];
        assert_eq!(back.get(5, 4).unwrap().predict(&feats).unwrap(), bank.get(5, 4).unwrap().predict(&feats).unwrap());
    }

    #[test]
    fn only_masked_pixels_change() {
        let img = generate_synthetic(&SceneSpec::new(16, 16, SceneKind::Mixture, 2)).unwrap();
        let mut bank = ModelBank::new();
        bank.insert(Mlp::new(MlpConfig::default(), 1).unwrap());
        assert_eq!(correct_pixels(&img, &DefectMap::empty(16, 16), &bank, 5).unwrap(), img);
        let mut map = DefectMap::empty(16, 16);
        map.set(3, 4, true);
        map.set(15, 0, true);
        let out = correct_pixels(&img, &map, &bank, 5).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if !map.is_defective(r, c) {
                    assert_eq!(out.get(r, c).to_bits(), img.get(r, c).to_bits());
                }
            }
        }
        assert!(correct_pixels(&img, &map, &bank, 9).is_err());
    }

    #[test]
    fn training_fits_flat_scenes() {
        let frames: Vec<BayerImage> = (0..4).map(|i| BayerImage::filled(16, 16, 0.3 + 0.1 * i as f32).unwrap()).collect();
        let set = sample_patches(&frames, &PatchSampling { size: 5, per_frame: 64, neighbor_errors: 0, delta: 0.7, seed: 0 }).unwrap();
        let mut m = Mlp::new(MlpConfig::default(), 3).unwrap();
        let mut hyper = default_training();
        hyper.epochs = 20;
        let curve = train_corrector(&mut m, &set, &hyper).unwrap();
        assert!(curve.last().unwrap() < &1e-4, "{curve:?}");
        let flat = BayerImage::filled(8, 8, 0.5).unwrap();
        let patch = crate::imaging::extract_patch(&flat, (4, 4), 5, crate::imaging::Padding::Reflect).unwrap();
        assert!((m.predict_patch(&patch).unwrap() - 0.5).abs() < 0.02);

        let wrong = PatchSet::new(9);
        assert!(train_corrector(&mut m, &wrong, &hyper).is_err());
    }
}
