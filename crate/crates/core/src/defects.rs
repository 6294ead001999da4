//! Bad-pixel models: random defect maps, square clusters and value injection.
//!
//! A defect map belongs to a sensor, not to a frame: the same map is reused
//! for every frame captured in a run, while the corrupted values are redrawn
//! per frame from that frame's content.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{pgm, BayerImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Value moved at least `delta` away from the true value, within `[0, 1]`.
    #[default]
    Deviation,
    /// Stuck at zero.
    Dead,
    /// Stuck at full scale.
    Hot,
}

impl std::str::FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deviation" => Ok(DefectKind::Deviation),
            "dead" => Ok(DefectKind::Dead),
            "hot" => Ok(DefectKind::Hot),
            other => Err(Error::InvalidArgument(format!("unknown defect kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefectSpec {
    pub rate: f64,
    pub delta: f64,
    pub kind: DefectKind,
    pub seed: u64,
}

impl Default for DefectSpec {
    fn default() -> Self {
        Self { rate: 0.01, delta: 0.7, kind: DefectKind::Deviation, seed: 0 }
    }
}

impl DefectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!("defect rate {} outside [0, 1]", self.rate)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidArgument(format!("delta {} outside (0, 1]", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefectMap {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl DefectMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, mask: vec![false; width * height] }
    }

    pub fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::mismatch(width * height, mask.len()));
        }
        Ok(Self { width, height, mask })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn is_defective(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, bad: bool) {
        self.mask[row * self.width + col] = bad;
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    /// Defective pixel coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.mask.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i / w, i % w))
    }

    pub fn check_dims(&self, img: &BayerImage) -> Result<()> {
        if self.width != img.width() || self.height != img.height() {
            return Err(Error::mismatch(
                format!("{}x{} image", self.width, self.height),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
        Ok(())
    }

    /// Defective pixels in the `size x size` window centred on `center`,
    /// excluding the centre and ignoring positions outside the frame.
    pub fn count_in_window(&self, center: (usize, usize), size: usize) -> usize {
        let half = (size / 2) as isize;
        let mut n = 0;
        for dr in -half..=half {
            for dc in -half..=half {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (r, c) = (center.0 as isize + dr, center.1 as isize + dc);
                if r >= 0
                    && c >= 0
                    && (r as usize) < self.height
                    && (c as usize) < self.width
                    && self.is_defective(r as usize, c as usize)
                {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::mismatch(
                format!("window within {}x{}", self.width, self.height),
                format!("{width}x{height} at ({top},{left})"),
            ));
        }
        let mut mask = Vec::with_capacity(width * height);
        for r in top..top + height {
            mask.extend_from_slice(&self.mask[r * self.width + left..r * self.width + left + width]);
        }
        Ok(Self { width, height, mask })
    }

    /// 8-bit P5 encoding: 0 = good, 255 = bad.
    pub fn to_pgm(&self) -> Vec<u8> {
        pgm::encode(&pgm::PgmData {
            width: self.width,
            height: self.height,
            maxval: 255,
            samples: self.mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        })
    }

    /// Any non-zero sample marks a defect.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let pgm = pgm::decode(bytes)?;
        Ok(Self {
            width: pgm.width,
            height: pgm.height,
            mask: pgm.samples.iter().map(|&v| v != 0).collect(),
        })
    }

    /// One `row col` line per defect, preceded by a `# width height` line.
    pub fn to_coord_list(&self) -> String {
        let mut out = format!("# {} {}\n", self.width, self.height);
        for (r, c) in self.coords() {
            out.push_str(&format!("{r} {c}\n"));
        }
        out
    }

    /// Parses a coordinate list. `dims` is required when the text has no
    /// `# width height` header and overrides it otherwise.
    pub fn from_coord_list(text: &str, dims: Option<(usize, usize)>) -> Result<Self> {
        let mut header = None;
        let mut coords = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_pair = |s: &str| -> Option<(usize, usize)> {
                let mut it = s.split_whitespace().map(|t| t.parse::<usize>().ok());
                match (it.next().flatten(), it.next().flatten(), it.next()) {
                    (Some(a), Some(b), None) => Some((a, b)),
                    _ => None,
                }
            };
            if let Some(rest) = line.strip_prefix('#') {
                if header.is_none() && coords.is_empty() {
                    header = parse_pair(rest);
                }
                continue;
            }
            let pair = parse_pair(line).ok_or_else(|| {
                Error::MalformedHeader(format!("line {}: expected `row col`", lineno + 1))
            })?;
            coords.push(pair);
        }
        let (width, height) = dims.or(header).ok_or_else(|| {
            Error::MalformedHeader("coordinate list has no dimensions".into())
        })?;
        let mut map = Self::empty(width, height);
        for (r, c) in coords {
            if r >= height || c >= width {
                return Err(Error::mismatch(
                    format!("coordinates within {width}x{height}"),
                    format!("({r}, {c})"),
                ));
            }
            map.set(r, c, true);
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = if path.extension().is_some_and(|e| e == "txt") {
            self.to_coord_list().into_bytes()
        } else {
            self.to_pgm()
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, dims: Option<(usize, usize)>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"P5") {
            Self::from_pgm(&bytes)
        } else {
            Self::from_coord_list(&String::from_utf8_lossy(&bytes), dims)
        }
    }
}

/// Exactly `round(rate * width * height)` defects placed uniformly without replacement.
pub fn sample_defect_map(width: usize, height: usize, rate: f64, seed: u64) -> Result<DefectMap> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("defect rate {rate} outside [0, 1]")));
    }
    let total = width * height;
    let count = ((rate * total as f64).round() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = DefectMap::empty(width, height);
    for i in rand::seq::index::sample(&mut rng, total, count) {
        map.mask[i] = true;
    }
    Ok(map)
}

/// Square block of `cluster_size^2` defects with its top-left corner at `top_left`.
pub fn make_cluster_map(
    width: usize,
    height: usize,
    cluster_size: usize,
    top_left: (usize, usize),
) -> Result<DefectMap> {
    let (r0, c0) = top_left;
    if cluster_size == 0 || r0 + cluster_size > height || c0 + cluster_size > width {
        return Err(Error::InvalidArgument(format!(
            "{cluster_size}x{cluster_size} cluster at {top_left:?} does not fit {width}x{height}"
        )));
    }
    let mut map = DefectMap::empty(width, height);
    for r in r0..r0 + cluster_size {
        for c in c0..c0 + cluster_size {
            map.set(r, c, true);
        }
    }
    Ok(map)
}

/// Draws a corrupted value for a pixel whose true value is `orig`.
///
/// Deviation defects are uniform over `[0, orig - delta] ∪ [orig + delta, 1]`.
/// When that set is empty the value saturates to the bound farther from
/// `orig`, going up on a tie.
pub fn corrupt_value<R: Rng>(orig: f32, delta: f64, kind: DefectKind, rng: &mut R) -> f32 {
    match kind {
        DefectKind::Dead => 0.0,
        DefectKind::Hot => 1.0,
        DefectKind::Deviation => {
            let o = orig as f64;
            let lo_end = o - delta;
            let hi_start = o + delta;
            let lo_len = if lo_end >= 0.0 { Some(lo_end) } else { None };
            let hi_len = if hi_start <= 1.0 { Some(1.0 - hi_start) } else { None };
            let v = match (lo_len, hi_len) {
                (None, None) => {
                    if o > 0.5 {
                        0.0
                    } else {
                        1.0
                    }
                }
                (lo, hi) => {
                    let (a, b) = (lo.unwrap_or(0.0), hi.unwrap_or(0.0));
                    let total = a + b;
                    let u = if total > 0.0 { rng.random_range(0.0..total) } else { 0.0 };
                    if lo.is_some() && (hi.is_none() || u < a) {
                        u
                    } else {
                        hi_start + (u - a).max(0.0)
                    }
                }
            };
            let mut v32 = (v as f32).clamp(0.0, 1.0);
            // keep the guarantee after rounding to f32
            if lo_len.is_some() || hi_len.is_some() {
                while ((v32 as f64) - o).abs() < delta {
                    let next = if (v32 as f64) > o { v32.next_up() } else { v32.next_down() };
                    if !(0.0..=1.0).contains(&next) {
                        break;
                    }
                    v32 = next;
                }
            }
            v32
        }
    }
}

/// Applies `spec` to the pixels marked in `map`. Unmarked pixels are untouched.
pub fn inject(img: &BayerImage, map: &DefectMap, spec: &DefectSpec) -> Result<BayerImage> {
    map.check_dims(img)?;
    if !(spec.delta > 0.0 && spec.delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("delta {} outside (0, 1]", spec.delta)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = img.data().to_vec();
    for (i, _) in map.mask.iter().enumerate().filter(|(_, &b)| b) {
        data[i] = corrupt_value(data[i], spec.delta, spec.kind, &mut rng);
    }
    img.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f32) -> BayerImage {
        BayerImage::filled(16, 16, v).unwrap()
    }

    #[test]
    fn sample_extremes() {
        assert!(sample_defect_map(10, 10, 0.0, 3).unwrap().is_empty());
        assert_eq!(sample_defect_map(10, 10, 1.0, 3).unwrap().count(), 100);
        assert_eq!(sample_defect_map(100, 100, 0.0001, 3).unwrap().count(), 1);
        assert_eq!(sample_defect_map(100, 100, 0.007, 3).unwrap().count(), 70);
        assert!(sample_defect_map(10, 10, 1.5, 3).is_err());
    }

    #[test]
    fn sample_is_seeded() {
        let a = sample_defect_map(64, 64, 0.05, 11).unwrap();
        assert_eq!(a, sample_defect_map(64, 64, 0.05, 11).unwrap());
        assert_ne!(a, sample_defect_map(64, 64, 0.05, 12).unwrap());
    }

    #[test]
    fn centred_cluster() {
        let m = make_cluster_map(15, 15, 5, (5, 5)).unwrap();
        assert_eq!(m.count(), 25);
        assert!(m.coords().all(|(r, c)| (5..10).contains(&r) && (5..10).contains(&c)));
        assert_eq!(make_cluster_map(15, 15, 1, (0, 0)).unwrap().count(), 1);
        assert!(make_cluster_map(15, 15, 5, (11, 11)).is_err());
    }

    #[test]
    fn lower_interval_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let v = corrupt_value(0.2, 0.7, DefectKind::Deviation, &mut rng);
            assert!((0.9..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn empty_feasible_set_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_value(0.5, 0.7, DefectKind::Deviation, &mut rng), 1.0);
        assert_eq!(corrupt_value(0.6, 0.7, DefectKind::Deviation, &mut rng), 0.0);
        assert_eq!(corrupt_value(0.4, 0.7, DefectKind::Deviation, &mut rng), 1.0);
    }

    #[test]
    fn dead_and_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_value(0.37, 0.1, DefectKind::Dead, &mut rng), 0.0);
        assert_eq!(corrupt_value(0.37, 0.1, DefectKind::Hot, &mut rng), 1.0);
    }

    #[test]
    fn inject_touches_only_masked_pixels() {
        let img = flat(0.5);
        let map = sample_defect_map(16, 16, 0.2, 4).unwrap();
        let spec = DefectSpec { rate: 0.2, delta: 0.3, kind: DefectKind::Deviation, seed: 9 };
        let out = inject(&img, &map, &spec).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if map.is_defective(r, c) {
                    assert!((out.get(r, c) as f64 - 0.5).abs() >= 0.3 - 1e-9);
                } else {
                    assert_eq!(out.get(r, c).to_bits(), img.get(r, c).to_bits());
                }
            }
        }
        assert_eq!(out, inject(&img, &map, &spec).unwrap());
    }

    #[test]
    fn inject_dimension_mismatch() {
        let map = DefectMap::empty(8, 8);
        assert!(inject(&flat(0.5), &map, &DefectSpec::default()).is_err());
    }

    #[test]
    fn serialization_formats() {
        let map = sample_defect_map(12, 10, 0.1, 5).unwrap();
        assert_eq!(DefectMap::from_pgm(&map.to_pgm()).unwrap(), map);
        assert_eq!(DefectMap::from_coord_list(&map.to_coord_list(), None).unwrap(), map);
        let bare = "3 4\n0 0\n";
        let m = DefectMap::from_coord_list(bare, Some((5, 5))).unwrap();
        assert_eq!(m.count(), 2);
        assert!(m.is_defective(3, 4));
        assert!(DefectMap::from_coord_list(bare, None).is_err());
        assert!(DefectMap::from_coord_list("9 9\n", Some((5, 5))).is_err());
    }

    #[test]
    fn window_count_ignores_center() {
        let m = make_cluster_map(9, 9, 3, (3, 3)).unwrap();
        assert_eq!(m.count_in_window((4, 4), 3), 8);
        assert_eq!(m.count_in_window((4, 4), 5), 8);
        assert_eq!(m.count_in_window((0, 0), 5), 0);
    }
}
