//! Seeded synthetic raw scenes.
//!
//! Scenes are built from a smooth luminance field scaled by per-channel gains
//! plus a weak smooth chroma field per CFA channel, so that same-colour
//! neighbours are strongly correlated the way they are in real raw captures.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BayerImage, CfaPattern};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Flat,
    Gradient,
    #[default]
    BandLimited,
    Mixture,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(SceneKind::Flat),
            "gradient" => Ok(SceneKind::Gradient),
            "band_limited" | "band-limited" => Ok(SceneKind::BandLimited),
            "mixture" => Ok(SceneKind::Mixture),
            other => Err(Error::InvalidArgument(format!("unknown scene kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub kind: SceneKind,
    /// Level of `Flat` scenes; ignored otherwise.
    pub level: f32,
    pub seed: u64,
    /// Standard deviation of additive per-pixel Gaussian read noise.
    pub noise: f32,
    pub pattern: CfaPattern,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            kind: SceneKind::BandLimited,
            level: 0.5,
            seed: 0,
            noise: 0.0,
            pattern: CfaPattern::Rggb,
        }
    }
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, kind: SceneKind, seed: u64) -> Self {
        Self { width, height, kind, seed, ..Self::default() }
    }

    pub fn with_noise(mut self, noise: f32) -> Self {
        self.noise = noise;
        self
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// Sum of random plane waves with spatial frequency at most `max_freq`
/// cycles/pixel, scaled so its standard deviation is roughly 1/3 and clamped
/// to `[-1, 1]`.
struct WaveField {
    waves: Vec<Wave>,
    scale: f64,
}

impl WaveField {
    fn random(rng: &mut ChaCha8Rng, components: usize, max_freq: f64) -> Self {
        let waves: Vec<Wave> = (0..components)
            .map(|_| {
                let f = max_freq * rng.random_range(0.15..1.0);
                let theta = rng.random_range(0.0..TAU);
                Wave {
                    fx: f * theta.cos(),
                    fy: f * theta.sin(),
                    phase: rng.random_range(0.0..TAU),
                    amp: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let energy: f64 = waves.iter().map(|w| w.amp * w.amp / 2.0).sum();
        Self { waves, scale: 1.0 / (3.0 * energy.sqrt()) }
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        let (x, y) = (col as f64, row as f64);
        let s: f64 = self
            .waves
            .iter()
            .map(|w| w.amp * (TAU * (w.fx * x + w.fy * y) + w.phase).cos())
            .sum();
        (s * self.scale).clamp(-1.0, 1.0)
    }
}

struct Disc {
    row: f64,
    col: f64,
    radius: f64,
    offset: f64,
}

/// Deterministic scene for `(spec, spec.seed)`.
pub fn generate_synthetic(spec: &SceneSpec) -> Result<BayerImage> {
    let (w, h) = (spec.width, spec.height);
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return Err(Error::OddDimensions { width: w, height: h });
    }
    if spec.kind == SceneKind::Flat {
        let level = spec.level.clamp(0.0, 1.0);
        return BayerImage::new(w, h, spec.pattern, 16, vec![level; w * h]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // gains for the four CFA sites (row parity, col parity)
    let gains: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.65..1.0));
    let chroma: Vec<WaveField> = (0..4).map(|_| WaveField::random(&mut rng, 4, 1.0 / 32.0)).collect();

    let luminance: Box<dyn Fn(usize, usize) -> f64> = match spec.kind {
        SceneKind::Flat => unreachable!(),
        SceneKind::Gradient => {
            let theta = rng.random_range(0.0..TAU);
            let (lo, hi) = (rng.random_range(0.05..0.3), rng.random_range(0.7..0.95));
            let (dx, dy) = (theta.cos(), theta.sin());
            let corners = [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)];
            let proj: Vec<f64> = corners.iter().map(|(x, y)| x * dx + y * dy).collect();
            let pmin = proj.iter().cloned().fold(f64::INFINITY, f64::min);
            let pmax = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Box::new(move |r, c| {
                let t = (c as f64 * dx + r as f64 * dy - pmin) / (pmax - pmin);
                lo + (hi - lo) * t
            })
        }
        SceneKind::BandLimited => {
            let field = WaveField::random(&mut rng, 8, 1.0 / 16.0);
            Box::new(move |r, c| 0.5 + 0.42 * field.at(r, c))
        }
        SceneKind::Mixture => {
            let coarse = WaveField::random(&mut rng, 8, 1.0 / 16.0);
            let fine = WaveField::random(&mut rng, 6, 1.0 / 8.0);
            let theta = rng.random_range(0.0..TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let diag = ((w * w + h * h) as f64).sqrt();
            let min_dim = w.min(h) as f64;
            let discs: Vec<Disc> = (0..rng.random_range(2..5))
                .map(|_| Disc {
                    row: rng.random_range(0.0..h as f64),
                    col: rng.random_range(0.0..w as f64),
                    radius: min_dim * rng.random_range(0.1..0.3),
                    offset: rng.random_range(-0.2..0.2),
                })
                .collect();
            Box::new(move |r, c| {
                let (x, y) = (c as f64, r as f64);
                let ramp = 0.15 * ((x * dx + y * dy) / diag);
                let mut v = 0.5 + 0.3 * coarse.at(r, c) + 0.1 * fine.at(r, c) + ramp;
                for d in &discs {
                    let dist = ((y - d.row).powi(2) + (x - d.col).powi(2)).sqrt();
                    // soft edge over ~2 pixels
                    let inside = 1.0 / (1.0 + ((dist - d.radius) / 1.5).exp());
                    v += d.offset * inside;
                }
                v
            })
        }
    };

    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let site = (r % 2) * 2 + c % 2;
            let mut v = gains[site] * luminance(r, c) + 0.06 * chroma[site].at(r, c);
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    BayerImage::new(w, h, spec.pattern, 16, data)
}
