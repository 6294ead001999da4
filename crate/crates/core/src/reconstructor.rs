//! ViT autoencoder that reconstructs a corrupted frame from its tokens.
//!
//! Frames are split into `token_patch x token_patch` tokens, embedded, passed
//! through pre-norm transformer blocks (encoder, then a decoder of the same
//! width) and projected back to pixels. No defect locations are needed at
//! inference. With `mask_center` the central token is replaced by a learned
//! vector before the encoder, so a known defect cluster is predicted from the
//! surrounding tokens alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    fit, Checkpoint, Cost, Dense, Graph, LayerNorm, LrSchedule, ParamId, ParamStore, Scalar, Tensor, TrainConfig, Var,
};
use crate::defects::{corrupt_value, DefectKind, DefectMap};
use crate::error::{Error, Result};
use crate::imaging::{copy_tile, tile_positions, BayerImage, Patch};

pub const CHECKPOINT_KIND: &str = "vit_ae";

/// Published size of the 15x15 cluster model the default configuration is
/// tuned against.
pub const CLUSTER_REFERENCE_COST: Cost = Cost { params: 11_360, macs: 102_300 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub input_size: usize,
    pub token_patch: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_center: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            input_size: 15,
            token_patch: 5,
            embed_dim: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            mlp_ratio: 2,
            mask_center: false,
        }
    }
}

impl VitConfig {
    /// The 15x15 masked-cluster model.
    pub fn cluster() -> Self {
        Self { mask_center: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.token_patch;
        if p == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "input_size {} is not a multiple of token_patch {p}",
                self.input_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.mask_center && self.tokens_per_side().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "mask_center needs an odd token grid, got {0}x{0}",
                self.tokens_per_side()
            )));
        }
        Ok(())
    }

    pub fn tokens_per_side(&self) -> usize {
        self.input_size / self.token_patch
    }

    pub fn tokens(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    pub fn center_token(&self) -> usize {
        let n = self.tokens_per_side();
        (n / 2) * n + n / 2
    }

    /// Pixel rows/cols `[lo, hi)` covered by the central token.
    pub fn center_span(&self) -> (usize, usize) {
        let lo = (self.tokens_per_side() / 2) * self.token_patch;
        (lo, lo + self.token_patch)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    qkv: Dense,
    proj: Dense,
    ln2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
    heads: usize,
}

impl Block {
    fn new<T: Scalar, R: Rng>(s: &mut ParamStore<T>, name: &str, c: &VitConfig, rng: &mut R) -> Self {
        let d = c.embed_dim;
        Self {
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), d),
            qkv: Dense::new(s, &format!("{name}.qkv"), d, 3 * d, rng),
            proj: Dense::new(s, &format!("{name}.proj"), d, d, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), d),
            fc1: Dense::new(s, &format!("{name}.fc1"), d, c.mlp_ratio * d, rng),
            fc2: Dense::new(s, &format!("{name}.fc2"), c.mlp_ratio * d, d, rng),
            heads: c.heads,
        }
    }

    fn forward<T: Scalar>(&self, s: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let h = self.qkv.forward(g, s, h)?;
        let h = g.attention(h, self.heads)?;
        let h = self.proj.forward(g, s, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, s, x)?;
        let h = self.fc1.forward(g, s, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, s, h)?;
        g.add(x, h)
    }

    fn cost(&self, tokens: usize) -> Cost {
        let d = self.proj.fan_out;
        let attention = Cost { params: 0, macs: 2 * tokens * tokens * d };
        self.ln1.cost()
            + self.qkv.cost(tokens)
            + attention
            + self.proj.cost(tokens)
            + self.ln2.cost()
            + self.fc1.cost(tokens)
            + self.fc2.cost(tokens)
    }
}

#[derive(Debug, Clone)]
pub struct VitAe<T> {
    config: VitConfig,
    store: ParamStore<T>,
    embed: Dense,
    pos: ParamId,
    mask_token: Option<ParamId>,
    encoder: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Dense,
    dec_pos: ParamId,
    decoder: Vec<Block>,
    dec_norm: LayerNorm,
    head: Dense,
}

impl<T: Scalar> VitAe<T> {
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, pp, t) = (config.embed_dim, config.token_patch * config.token_patch, config.tokens());
        let embed = Dense::new(&mut s, "embed", pp, d, &mut rng);
        let pos = s.normal("pos", vec![t, d], 0.02, &mut rng);
        let mask_token = config.mask_center.then(|| s.normal("mask_token", vec![d], 0.02, &mut rng));
        let encoder = (0..config.encoder_layers)
            .map(|i| Block::new(&mut s, &format!("enc{i}"), &config, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut s, "enc_norm", d);
        let dec_embed = Dense::new(&mut s, "dec_embed", d, d, &mut rng);
        let dec_pos = s.normal("dec_pos", vec![t, d], 0.02, &mut rng);
        let decoder = (0..config.decoder_layers)
            .map(|i| Block::new(&mut s, &format!("dec{i}"), &config, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut s, "dec_norm", d);
        let head = Dense::new(&mut s, "head", d, pp, &mut rng);
        Ok(Self {
            config,
            store: s,
            embed,
            pos,
            mask_token,
            encoder,
            enc_norm,
            dec_embed,
            dec_pos,
            decoder,
            dec_norm,
            head,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `[B, 1, S, S]` inputs in `[-1, 1]` to `[B, 1, S, S]` pixel estimates.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.forward_with(&self.store, g, x)
    }

    fn forward_with(&self, s: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(Error::mismatch(format!("[B, 1, {0}, {0}] input", c.input_size), format!("{shape:?}")));
        }
        let tokens = g.patchify(x, c.token_patch)?;
        let mut h = self.embed.forward(g, s, tokens)?;
        if let Some(m) = self.mask_token {
            let m = g.param(s, m);
            h = g.replace_token(h, m, c.center_token())?;
        }
        let pos = g.param(s, self.pos);
        h = g.add_broadcast(h, pos)?;
        for b in &self.encoder {
            h = b.forward(s, g, h)?;
        }
        h = self.enc_norm.forward(g, s, h)?;
        h = self.dec_embed.forward(g, s, h)?;
        let dec_pos = g.param(s, self.dec_pos);
        h = g.add_broadcast(h, dec_pos)?;
        for b in &self.decoder {
            h = b.forward(s, g, h)?;
        }
        h = self.dec_norm.forward(g, s, h)?;
        let out = self.head.forward(g, s, h)?;
        g.unpatchify(out, c.token_patch, c.input_size, c.input_size)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_store(CHECKPOINT_KIND, cfg, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: VitConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Checkpoint(format!("bad ViT config: {e}")))?;
        let mut m = Self::new(config, 0)?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> VitAe<U> {
        VitAe {
            config: self.config,
            store: self.store.cast(),
            embed: self.embed,
            pos: self.pos,
            mask_token: self.mask_token,
            encoder: self.encoder.clone(),
            enc_norm: self.enc_norm,
            dec_embed: self.dec_embed,
            dec_pos: self.dec_pos,
            decoder: self.decoder.clone(),
            dec_norm: self.dec_norm,
            head: self.head,
        }
    }

    /// Parameters and multiply-accumulates for one `input_size` tile.
    pub fn cost(&self) -> Cost {
        let c = &self.config;
        let t = c.tokens();
        let d = c.embed_dim;
        let tables = Cost { params: 2 * t * d + self.mask_token.map_or(0, |_| d), macs: 0 };
        self.embed.cost(t)
            + tables
            + self.encoder.iter().map(|b| b.cost(t)).sum()
            + self.enc_norm.cost()
            + self.dec_embed.cost(t)
            + self.decoder.iter().map(|b| b.cost(t)).sum()
            + self.dec_norm.cost()
            + self.head.cost(t)
    }
}

/// Analytic size of a configuration without building it.
pub fn count_params_flops(config: &VitConfig) -> Result<Cost> {
    config.validate()?;
    let (t, d, pp) = (config.tokens(), config.embed_dim, config.token_patch * config.token_patch);
    let r = config.mlp_ratio;
    let dense = |i: usize, o: usize| Cost { params: i * o + o, macs: t * i * o };
    let norm = Cost { params: 2 * d, macs: 0 };
    let block = norm
        + dense(d, 3 * d)
        + Cost { params: 0, macs: 2 * t * t * d }
        + dense(d, d)
        + norm
        + dense(d, r * d)
        + dense(r * d, d);
    let mut total = dense(pp, d) + Cost { params: 2 * t * d, macs: 0 } + dense(d, d) + dense(d, pp) + norm + norm;
    if config.mask_center {
        total.params += d;
    }
    for _ in 0..config.encoder_layers + config.decoder_layers {
        total += block;
    }
    Ok(total)
}

/// Largest relative deviation of `cost` from `target` over params and MACs.
pub fn cost_deviation(cost: Cost, target: Cost) -> f64 {
    let rel = |a: usize, b: usize| (a as f64 - b as f64).abs() / b as f64;
    rel(cost.params, target.params).max(rel(cost.macs, target.macs))
}

/// Picks the feed-forward ratio whose cost is closest to `target`.
pub fn tune_mlp_ratio(base: &VitConfig, target: Cost, candidates: &[usize]) -> Result<(usize, Cost)> {
    let mut best: Option<(usize, Cost, f64)> = None;
    for &r in candidates {
        let cost = count_params_flops(&VitConfig { mlp_ratio: r, ..*base })?;
        let dev = cost_deviation(cost, target);
        if best.is_none_or(|(_, _, b)| dev < b) {
            best = Some((r, cost, dev));
        }
    }
    best.map(|(r, c, _)| (r, c)).ok_or_else(|| Error::InvalidArgument("no mlp_ratio candidates".into()))
}

/// Training tiles: encoded corrupted input, clean target and loss mask, each
/// `size x size` row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AeDataset {
    pub size: usize,
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    pub masks: Vec<f32>,
}

impl AeDataset {
    pub fn new(size: usize) -> Self {
        Self { size, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.targets.len() / (self.size * self.size).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Tiles of corrupted frames with the defect map as loss mask. Tiles with
    /// no defect carry no loss and are skipped; a frame without defects is an
    /// error.
    pub fn from_frames(corrupted: &[BayerImage], clean: &[BayerImage], maps: &[DefectMap], size: usize) -> Result<Self> {
        if corrupted.len() != clean.len() || clean.len() != maps.len() {
            return Err(Error::mismatch(
                format!("{} clean frames and maps", corrupted.len()),
                format!("{} and {}", clean.len(), maps.len()),
            ));
        }
        let mut set = Self::new(size);
        for ((bad, good), map) in corrupted.iter().zip(clean).zip(maps) {
            bad.same_dims(good)?;
            map.check_dims(good)?;
            if map.is_empty() {
                return Err(Error::EmptyMask);
            }
            let mask: Vec<f32> = map.mask().iter().map(|&b| f32::from(u8::from(b))).collect();
            for origin in tile_positions(good.width(), good.height(), size)? {
                let start = set.masks.len();
                copy_tile(&mask, good.width(), origin, size, &mut set.masks);
                if set.masks[start..].iter().all(|&m| m == 0.0) {
                    set.masks.truncate(start);
                    continue;
                }
                push_encoded(bad.data(), bad.width(), origin, size, &mut set.inputs);
                copy_tile(good.data(), good.width(), origin, size, &mut set.targets);
            }
        }
        Ok(set)
    }

    /// Random crops of clean frames whose central token is corrupted; the
    /// loss covers the central token only. Crops start on even rows and
    /// columns so every sample sees the same colour layout.
    pub fn clusters(frames: &[BayerImage], config: &VitConfig, spec: &ClusterSampling) -> Result<Self> {
        config.validate()?;
        let size = config.input_size;
        let (lo, hi) = config.center_span();
        let mut mask = vec![0.0f32; size * size];
        for r in lo..hi {
            mask[r * size + lo..r * size + hi].fill(1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut set = Self::new(size);
        for frame in frames {
            if frame.width() < size + 1 || frame.height() < size + 1 {
                return Err(Error::mismatch(format!("frame larger than {size}x{size}"), format!("{}x{}", frame.width(), frame.height())));
            }
            for _ in 0..spec.per_frame {
                let r0 = 2 * rng.random_range(0..=(frame.height() - size) / 2);
                let c0 = 2 * rng.random_range(0..=(frame.width() - size) / 2);
                let start = set.targets.len();
                copy_tile(frame.data(), frame.width(), (r0, c0), size, &mut set.targets);
                let mut input = set.targets[start..].to_vec();
                for (v, &m) in input.iter_mut().zip(&mask) {
                    if m > 0.0 {
                        *v = corrupt_value(*v, spec.delta, DefectKind::Deviation, &mut rng);
                    }
                }
                set.inputs.extend(input.iter().map(|&v| 2.0 * v - 1.0));
                set.masks.extend_from_slice(&mask);
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSampling {
    pub per_frame: usize,
    pub delta: f64,
    pub seed: u64,
}

fn push_encoded(src: &[f32], width: usize, origin: (usize, usize), size: usize, out: &mut Vec<f32>) {
    let start = out.len();
    copy_tile(src, width, origin, size, out);
    for v in &mut out[start..] {
        *v = 2.0 * *v - 1.0;
    }
}

/// Warmup-cosine schedule peaking at 0.01 after 5 epochs.
pub fn default_training(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        schedule: LrSchedule::WarmupCosine { base: 0.01, warmup: 5, total: epochs.max(6) },
        seed: 0,
    }
}

/// Minimizes NMSE over the masked pixels of each batch.
pub fn train_ae(model: &mut VitAe<f32>, data: &AeDataset, hyper: &TrainConfig) -> Result<Vec<f64>> {
    let size = model.config.input_size;
    if data.size != size {
        return Err(Error::mismatch(format!("{size}x{size} tiles"), data.size));
    }
    let area = size * size;
    let net = model.clone();
    fit(&mut model.store, data.len(), hyper, |g, s, idx| {
        let gather = |src: &[f32]| -> Vec<f32> { idx.iter().flat_map(|&i| src[i * area..(i + 1) * area].iter().copied()).collect() };
        let shape = vec![idx.len(), 1, size, size];
        let x = g.input(Tensor::new(shape.clone(), gather(&data.inputs))?);
        let y = g.input(Tensor::new(shape.clone(), gather(&data.targets))?);
        let m = g.input(Tensor::new(shape, gather(&data.masks))?);
        let p = net.forward_with(s, g, x)?;
        g.masked_nmse(p, y, m)
    })
}

const INFERENCE_BATCH: usize = 64;

impl VitAe<f32> {
    /// Reconstructs `input_size` tiles given as encoded row-major blocks.
    fn predict_tiles(&self, encoded: &[f32]) -> Result<Vec<f32>> {
        let size = self.config.input_size;
        let area = size * size;
        let mut out = Vec::with_capacity(encoded.len());
        for chunk in encoded.chunks(INFERENCE_BATCH * area) {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![chunk.len() / area, 1, size, size], chunk.to_vec())?);
            let y = self.forward(&mut g, x)?;
            out.extend(g.value(y).data().iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Ok(out)
    }
}

/// Reconstructs a whole frame tile by tile; overlapping tiles at the right and
/// bottom edges are written in row-major order. With a map only the marked
/// pixels take reconstructed values.
pub fn reconstruct(model: &VitAe<f32>, frame: &BayerImage, map: Option<&DefectMap>) -> Result<BayerImage> {
    if let Some(m) = map {
        m.check_dims(frame)?;
    }
    let size = model.config.input_size;
    let origins = tile_positions(frame.width(), frame.height(), size)?;
    let mut encoded = Vec::with_capacity(origins.len() * size * size);
    for &o in &origins {
        push_encoded(frame.data(), frame.width(), o, size, &mut encoded);
    }
    let pred = model.predict_tiles(&encoded)?;
    let w = frame.width();
    let mut full = frame.data().to_vec();
    for (tile, &(r0, c0)) in pred.chunks(size * size).zip(&origins) {
        for r in 0..size {
            full[(r0 + r) * w + c0..(r0 + r) * w + c0 + size].copy_from_slice(&tile[r * size..(r + 1) * size]);
        }
    }
    if let Some(m) = map {
        let mut out = frame.data().to_vec();
        for (i, &bad) in m.mask().iter().enumerate() {
            if bad {
                out[i] = full[i];
            }
        }
        return frame.with_data(out);
    }
    frame.with_data(full)
}

/// Predicts the central token of `patch` from its neighbours and splices it
/// in; every other pixel is returned unchanged.
pub fn reconstruct_masked_cluster(model: &VitAe<f32>, patch: &Patch) -> Result<Patch> {
    let c = model.config;
    if !c.mask_center {
        return Err(Error::Config("cluster reconstruction needs a mask_center model".into()));
    }
    if patch.size != c.input_size {
        return Err(Error::mismatch(format!("{0}x{0} patch", c.input_size), patch.size));
    }
    let encoded: Vec<f32> = patch.data.iter().map(|&v| 2.0 * v - 1.0).collect();
    let pred = model.predict_tiles(&encoded)?;
    let (lo, hi) = c.center_span();
    let mut out = patch.clone();
    for r in lo..hi {
        for col in lo..hi {
            out.data[r * c.input_size + col] = pred[r * c.input_size + col];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_synthetic, SceneKind, SceneSpec};

    #[test]
    fn analytic_cost_matches_built_model() {
        for cfg in [VitConfig::default(), VitConfig::cluster(), VitConfig { input_size: 20, mlp_ratio: 3, ..Default::default() }] {
            let m = VitAe::<f32>::new(cfg, 0).unwrap();
            let cost = count_params_flops(&cfg).unwrap();
            assert_eq!(cost, m.cost());
            assert_eq!(cost.params, m.store().numel());
        }
    }

    #[test]
    fn cost_by_hand() {
        // 9 tokens, width 16, ratio 2: embed 416, two position tables 288,
        // four blocks of 2224, two norms 64, decoder embed 272, head 425.
        let c = count_params_flops(&VitConfig::default()).unwrap();
        assert_eq!(c.params, 416 + 288 + 4 * 2224 + 64 + 272 + 425);
        // Per token: embed 400, block 768 + 2*9*16 + 256 + 1024, decoder embed 256, head 400.
        assert_eq!(c.macs, 9 * (400 + 4 * (768 + 288 + 256 + 1024) + 256 + 400));
    }

    #[test]
    fn tuned_ratio_meets_budget() {
        let (r, cost) = tune_mlp_ratio(&VitConfig::cluster(), CLUSTER_REFERENCE_COST, &[1, 2, 3, 4]).unwrap();
        assert_eq!(r, VitConfig::cluster().mlp_ratio);
        assert!(cost_deviation(cost, CLUSTER_REFERENCE_COST) <= 0.15, "{cost:?}");
    }

    #[test]
    fn config_checks() {
        assert!(VitConfig { input_size: 16, ..Default::default() }.validate().is_err());
        assert!(VitConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(VitConfig { input_size: 20, mask_center: true, ..Default::default() }.validate().is_err());
        assert_eq!(VitConfig::default().center_token(), 4);
        assert_eq!(VitConfig::default().center_span(), (5, 10));
    }

    #[test]
    fn shapes_and_reconstruction() {
        let m = VitAe::<f32>::new(VitConfig::default(), 1).unwrap();
        let frame = generate_synthetic(&SceneSpec::new(32, 32, SceneKind::Mixture, 4)).unwrap();
        let full = reconstruct(&m, &frame, None).unwrap();
        assert_eq!((full.width(), full.height()), (32, 32));
        assert_eq!(full, reconstruct(&m, &frame, None).unwrap());
        let mut map = DefectMap::empty(32, 32);
        map.set(31, 31, true);
        let spliced = reconstruct(&m, &frame, Some(&map)).unwrap();
        for (i, (&a, &b)) in spliced.data().iter().zip(frame.data()).enumerate() {
            if i != 31 * 32 + 31 {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(spliced.get(31, 31), full.get(31, 31));
        let mut g = Graph::new();
        let bad = g.input(Tensor::zeros(vec![1, 1, 16, 16]));
        assert!(m.forward(&mut g, bad).is_err());
    }

    #[test]
    fn cluster_splice_keeps_outer_ring() {
        let m = VitAe::<f32>::new(VitConfig::cluster(), 2).unwrap();
        let frame = generate_synthetic(&SceneSpec::new(32, 32, SceneKind::BandLimited, 5)).unwrap();
        let patch = crate::imaging::extract_patch(&frame, (12, 12), 15, crate::imaging::Padding::Reflect).unwrap();
        let out = reconstruct_masked_cluster(&m, &patch).unwrap();
        let mut other = patch.clone();
        for r in 5..10 {
            for c in 5..10 {
                other.data[r * 15 + c] = 1.0 - other.data[r * 15 + c];
            }
        }
        let out2 = reconstruct_masked_cluster(&m, &other).unwrap();
        for r in 0..15 {
            for c in 0..15 {
                let inside = (5..10).contains(&r) && (5..10).contains(&c);
                if inside {
                    assert_eq!(out.get(r, c), out2.get(r, c));
                } else {
                    assert_eq!(out.get(r, c), patch.get(r, c));
                }
            }
        }
        let plain = VitAe::<f32>::new(VitConfig::default(), 2).unwrap();
        assert!(reconstruct_masked_cluster(&plain, &patch).is_err());
    }

    #[test]
    fn datasets_and_short_training() {
        let clean: Vec<BayerImage> = (0..2).map(|i| generate_synthetic(&SceneSpec::new(30, 30, SceneKind::BandLimited, i)).unwrap()).collect();
        let maps: Vec<DefectMap> = (0..2).map(|i| crate::defects::sample_defect_map(30, 30, 0.3, i).unwrap()).collect();
        let spec = crate::defects::DefectSpec { rate: 0.3, ..Default::default() };
        let bad: Vec<BayerImage> = clean.iter().zip(&maps).map(|(c, m)| crate::defects::inject(c, m, &spec).unwrap()).collect();
        let set = AeDataset::from_frames(&bad, &clean, &maps, 15).unwrap();
        assert_eq!(set.len(), 8);
        assert!(AeDataset::from_frames(&bad, &clean, &[DefectMap::empty(30, 30), maps[1].clone()], 15).is_err());

        let cfg = VitConfig::cluster();
        let clusters = AeDataset::clusters(&clean, &cfg, &ClusterSampling { per_frame: 5, delta: 0.7, seed: 0 }).unwrap();
        assert_eq!(clusters.len(), 10);
        assert_eq!(clusters.masks.iter().filter(|&&m| m > 0.0).count(), 10 * 25);

        let run = || {
            let mut m = VitAe::new(VitConfig::default(), 3).unwrap();
            let curve = train_ae(&mut m, &set, &default_training(6)).unwrap();
            (m.store().clone(), curve)
        };
        let (s1, c1) = run();
        let (s2, c2) = run();
        assert_eq!(c1, c2);
        assert_eq!(s1, s2);
        assert!(c1.last().unwrap() < &c1[0], "{c1:?}");

        let mut m = VitAe::new(VitConfig::default(), 3).unwrap();
        let before = m.store().clone();
        train_ae(&mut m, &set, &default_training(0)).unwrap();
        assert_eq!(m.store(), &before);
        let back = VitAe::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(reconstruct(&back, &clean[0], None).unwrap(), reconstruct(&m, &clean[0], None).unwrap());
    }
}
