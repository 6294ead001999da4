//! Bad-pixel detection as binary segmentation.
//!
//! A small U-Net maps a tile of raw values to per-pixel defect probabilities.
//! Scores from several frames of the same sensor are summed in a
//! [`ProbAccumulator`] and the mean is thresholded into a [`DefectMap`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    fit, Checkpoint, Conv2d, Cost, Graph, LrSchedule, ParamStore, Scalar, Tensor, TrainConfig, Var,
};
use crate::defects::DefectMap;
use crate::error::{Error, Result};
use crate::imaging::{copy_tile, reflect_index, tile_positions, BayerImage};

pub const CHECKPOINT_KIND: &str = "unet";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 8 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("U-Net depth and base_channels must be positive".into()));
        }
        Ok(())
    }

    /// Tile edges must halve cleanly `depth` times.
    pub fn check_tile(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::mismatch(format!("tile dims divisible by {m}"), format!("{width}x{height}")));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            b: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.a.forward(g, s, x)?;
        let h = g.relu(h);
        let h = self.b.forward(g, s, h)?;
        Ok(g.relu(h))
    }

    fn cost(&self, pixels: usize) -> Cost {
        self.a.cost(pixels) + self.b.cost(pixels)
    }
}

/// Decoder stage: nearest upsample, 3x3 conv halving channels, skip concat,
/// then two 3x3 convs.
#[derive(Debug, Clone)]
struct UpStage {
    up: Conv2d,
    convs: DoubleConv,
}

/// Encoder/decoder segmenter with skip connections and a sigmoid head.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    store: ParamStore<T>,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<UpStage>,
    head: Conv2d,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut down = Vec::with_capacity(config.depth);
        let mut cin = 1;
        for level in 0..config.depth {
            let c = config.channels(level);
            down.push(DoubleConv::new(&mut store, &format!("enc{level}"), cin, c, &mut rng));
            cin = c;
        }
        let bottleneck = DoubleConv::new(&mut store, "bottleneck", cin, config.channels(config.depth), &mut rng);
        let mut up = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let c = config.channels(level);
            let name = format!("dec{level}");
            up.push(UpStage {
                up: Conv2d::new(&mut store, &format!("{name}.up"), 2 * c, c, 3, &mut rng),
                convs: DoubleConv::new(&mut store, &name, 2 * c, c, &mut rng),
            });
        }
        let head = Conv2d::new(&mut store, "head", config.channels(0), 1, 1, &mut rng);
        Ok(Self { config, store, down, bottleneck, up, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Probabilities `[N,1,H,W]` for input tiles `[N,1,H,W]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let z = self.forward_logits(g, x)?;
        Ok(g.sigmoid(z))
    }

    /// Pre-sigmoid scores.
    pub fn forward_logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Self::logits_with(&self.store, self, g, x)
    }

    fn logits_with(s: &ParamStore<T>, net: &Self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape(g.node_name(x), format!("U-Net expects [N,1,H,W], got {shape:?}")));
        }
        net.config.check_tile(shape[2], shape[3])?;
        let mut skips = Vec::with_capacity(net.config.depth);
        let mut h = x;
        for stage in &net.down {
            let f = stage.forward(g, s, h)?;
            skips.push(f);
            h = g.avg_pool2(f)?;
        }
        h = net.bottleneck.forward(g, s, h)?;
        for stage in &net.up {
            let u = g.upsample2(h)?;
            let u = stage.up.forward(g, s, u)?;
            let u = g.relu(u);
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat_channels(skip, u)?;
            h = stage.convs.forward(g, s, cat)?;
        }
        net.head.forward(g, s, h)
    }

    /// Parameters and per-forward MACs for one `height x width` tile.
    pub fn cost(&self, height: usize, width: usize) -> Cost {
        let mut total = Cost::default();
        let mut pixels = height * width;
        for stage in &self.down {
            total += stage.cost(pixels);
            pixels /= 4;
        }
        total += self.bottleneck.cost(pixels);
        for stage in &self.up {
            pixels *= 4;
            total += stage.up.cost(pixels) + stage.convs.cost(pixels);
        }
        total + self.head.cost(pixels)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_store(CHECKPOINT_KIND, cfg, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: UNetConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Checkpoint(format!("bad U-Net config: {e}")))?;
        let mut net = Self::new(config, 0)?;
        ck.restore_into(&mut net.store)?;
        Ok(net)
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config,
            store: self.store.cast(),
            down: self.down.clone(),
            bottleneck: self.bottleneck.clone(),
            up: self.up.clone(),
            head: self.head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTraining {
    pub tile: usize,
    pub train: TrainConfig,
    pub w_bce: f64,
    pub w_dice: f64,
    /// Present every other training tile with inverted intensities
    /// (`v -> 1 - v`). Deviation defects stay defects under inversion; this
    /// balances bright and dark outliers when scenes are not mid-grey on average.
    pub flip_augment: bool,
    /// Before the first epoch, set the output bias to the log-odds of the
    /// defect fraction in the targets so early updates are not spent pushing
    /// every score towards "good".
    pub init_output_prior: bool,
}

impl Default for DetectorTraining {
    fn default() -> Self {
        Self {
            tile: 32,
            train: TrainConfig {
                epochs: 50,
                batch_size: 16,
                schedule: LrSchedule::Step { base: 0.001, factor: 0.5, period: 10 },
                seed: 0,
            },
            w_bce: 1.0,
            w_dice: 1.0,
            flip_augment: true,
            init_output_prior: true,
        }
    }
}

/// Network input for a tile: values mapped from `[0, 1]` to `[-1, 1]`.
fn input_tile(img: &BayerImage, origin: (usize, usize), tile: usize, out: &mut Vec<f32>) {
    let start = out.len();
    copy_tile(img.data(), img.width(), origin, tile, out);
    for v in &mut out[start..] {
        *v = 2.0 * *v - 1.0;
    }
}

/// Trains on corrupted frames. `maps` holds either one ground-truth map shared
/// by every frame or one map per frame. Returns the per-epoch mean loss.
pub fn train_detector(
    model: &mut UNet<f32>,
    frames: &[BayerImage],
    maps: &[DefectMap],
    hyper: &DetectorTraining,
) -> Result<Vec<f64>> {
    model.config.check_tile(hyper.tile, hyper.tile)?;
    if maps.is_empty() || (maps.len() != 1 && maps.len() != frames.len()) {
        return Err(Error::mismatch(format!("1 or {} maps", frames.len()), maps.len()));
    }
    let mut inputs: Vec<Vec<f32>> = Vec::new();
    let mut targets: Vec<Vec<f32>> = Vec::new();
    let (mut positives, mut total) = (0usize, 0usize);
    for (f, frame) in frames.iter().enumerate() {
        let map = &maps[f.min(maps.len() - 1)];
        map.check_dims(frame)?;
        positives += map.count();
        total += map.mask().len();
        let target_frame: Vec<f32> = map.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        for origin in tile_positions(frame.width(), frame.height(), hyper.tile)? {
            let mut x = Vec::with_capacity(hyper.tile * hyper.tile);
            input_tile(frame, origin, hyper.tile, &mut x);
            if hyper.flip_augment && inputs.len() % 2 == 1 {
                x.iter_mut().for_each(|v| *v = -*v);
            }
            let mut t = Vec::with_capacity(hyper.tile * hyper.tile);
            copy_tile(&target_frame, frame.width(), origin, hyper.tile, &mut t);
            inputs.push(x);
            targets.push(t);
        }
    }
    if hyper.init_output_prior && hyper.train.epochs > 0 {
        let frac = positives as f64 / total.max(1) as f64;
        if frac > 0.0 && frac < 1.0 {
            model.store.get_mut(model.head.b).data_mut()[0] = (frac / (1.0 - frac)).ln() as f32;
        }
    }
    let t = hyper.tile;
    let net = model.clone();
    fit(&mut model.store, inputs.len(), &hyper.train, |g, s, idx| {
        let x: Vec<f32> = idx.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
        let y: Vec<f32> = idx.iter().flat_map(|&i| targets[i].iter().copied()).collect();
        let xv = g.input(Tensor::new(vec![idx.len(), 1, t, t], x)?);
        let yv = g.input(Tensor::new(vec![idx.len(), 1, t, t], y)?);
        let z = UNet::logits_with(s, &net, g, xv)?;
        g.bce_dice_logits(z, yv, hyper.w_bce, hyper.w_dice)
    })
}

/// Per-pixel defect probabilities for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f32>,
}

const INFERENCE_BATCH: usize = 16;

/// Scores a frame tile by tile. Each tile is evaluated with `2^depth` pixels of
/// extra context on every side (mirrored at frame edges) and only its centre is
/// kept, so tile seams see the same neighbourhood as interior pixels. Frames
/// that are not a multiple of the tile size get an overlapping last row/column.
pub fn predict_scores(model: &UNet<f32>, frame: &BayerImage, tile: usize) -> Result<ScoreMap> {
    model.config.check_tile(tile, tile)?;
    let origins = tile_positions(frame.width(), frame.height(), tile)?;
    let margin = 1usize << model.config.depth;
    let span = tile + 2 * margin;
    let (w, h) = (frame.width(), frame.height());
    let mut scores = vec![0.0f32; w * h];
    for chunk in origins.chunks(INFERENCE_BATCH) {
        let mut x = Vec::with_capacity(chunk.len() * span * span);
        for &(r0, c0) in chunk {
            for r in 0..span {
                let rr = reflect_index(r0 as isize + r as isize - margin as isize, h);
                for c in 0..span {
                    let cc = reflect_index(c0 as isize + c as isize - margin as isize, w);
                    x.push(2.0 * frame.get(rr, cc) - 1.0);
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![chunk.len(), 1, span, span], x)?);
        let p = model.forward(&mut g, xv)?;
        let pv = g.value(p).data();
        for (k, &(r0, c0)) in chunk.iter().enumerate() {
            for r in 0..tile {
                let start = (k * span + r + margin) * span + margin;
                scores[(r0 + r) * w + c0..(r0 + r) * w + c0 + tile].copy_from_slice(&pv[start..start + tile]);
            }
        }
    }
    Ok(ScoreMap { width: w, height: h, scores })
}

/// Running per-pixel score sum over frames of one sensor. Its size does not
/// depend on how many frames were added.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbAccumulator {
    width: usize,
    height: usize,
    sum_scores: Vec<f64>,
    n_frames: usize,
}

impl ProbAccumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, sum_scores: vec![0.0; width * height], n_frames: 0 }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn sum_scores(&self) -> &[f64] {
        &self.sum_scores
    }

    pub fn calibrate(&mut self, scores: &ScoreMap) -> Result<()> {
        if (scores.width, scores.height) != (self.width, self.height) {
            return Err(Error::mismatch(
                format!("{}x{} scores", self.width, self.height),
                format!("{}x{}", scores.width, scores.height),
            ));
        }
        for (acc, &s) in self.sum_scores.iter_mut().zip(&scores.scores) {
            *acc += s as f64;
        }
        self.n_frames += 1;
        Ok(())
    }

    pub fn mean_scores(&self) -> Result<Vec<f64>> {
        if self.n_frames == 0 {
            return Err(Error::InvalidArgument("no frames accumulated".into()));
        }
        let n = self.n_frames as f64;
        Ok(self.sum_scores.iter().map(|s| s / n).collect())
    }

    /// Marks pixels whose mean score is at least `threshold`.
    pub fn finalize(&self, threshold: f64) -> Result<DefectMap> {
        let mean = self.mean_scores()?;
        DefectMap::from_mask(self.width, self.height, mean.iter().map(|&m| m >= threshold).collect())
    }
}

/// Scores every frame, accumulates, and thresholds the mean.
pub fn detect(model: &UNet<f32>, frames: &[BayerImage], tile: usize, threshold: f64) -> Result<DefectMap> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames to detect on".into()))?;
    let mut acc = ProbAccumulator::new(first.width(), first.height());
    for f in frames {
        acc.calibrate(&predict_scores(model, f, tile)?)?;
    }
    acc.finalize(threshold)
}

/// Fraction of pixels marked defective.
pub fn estimate_error_rate(map: &DefectMap) -> f64 {
    let area = map.width() * map.height();
    if area == 0 {
        return 0.0;
    }
    map.count() as f64 / area as f64
}
