//! Bayer frame representation, ingestion, synthesis, tiling and patch extraction.

pub mod pgm;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, SceneKind, SceneSpec};

/// Phase of the 2x2 colour filter array, named by the top-left quad read row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfaColor {
    Red,
    Green,
    Blue,
}

impl CfaPattern {
    pub fn color_at(self, row: usize, col: usize) -> CfaColor {
        use CfaColor::*;
        let quad = match self {
            CfaPattern::Rggb => [Red, Green, Green, Blue],
            CfaPattern::Bggr => [Blue, Green, Green, Red],
            CfaPattern::Grbg => [Green, Red, Blue, Green],
            CfaPattern::Gbrg => [Green, Blue, Red, Green],
        };
        quad[(row % 2) * 2 + col % 2]
    }

    /// Two pixels share a CFA colour site when their row and column parities match.
    pub fn same_site(a: (usize, usize), b: (usize, usize)) -> bool {
        a.0 % 2 == b.0 % 2 && a.1 % 2 == b.1 % 2
    }
}

impl std::str::FromStr for CfaPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            other => Err(Error::InvalidArgument(format!("unknown CFA pattern `{other}`"))),
        }
    }
}

/// Single-channel raw frame with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerImage {
    width: usize,
    height: usize,
    pattern: CfaPattern,
    bit_depth: u8,
    data: Vec<f32>,
}

impl BayerImage {
    pub fn new(
        width: usize,
        height: usize,
        pattern: CfaPattern,
        bit_depth: u8,
        data: Vec<f32>,
    ) -> Result<Self> {
        if !width.is_multiple_of(2) || !height.is_multiple_of(2) || width == 0 || height == 0 {
            return Err(Error::OddDimensions { width, height });
        }
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::InvalidArgument(format!("bit depth {bit_depth} outside 1..=16")));
        }
        if data.len() != width * height {
            return Err(Error::mismatch(width * height, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, pattern, bit_depth, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, CfaPattern::default(), 16, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pattern(&self) -> CfaPattern {
        self.pattern
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Writes a value, clamping it into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value.clamp(0.0, 1.0);
    }

    pub fn color_at(&self, row: usize, col: usize) -> CfaColor {
        self.pattern.color_at(row, col)
    }

    /// Same frame metadata with new pixel values (clamped to `[0, 1]`).
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(self.width, self.height, self.pattern, self.bit_depth, data)
    }

    pub fn same_dims(&self, other: &BayerImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::mismatch(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }

    /// Crops a window whose origin is on an even row and column, preserving the CFA phase.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if !top.is_multiple_of(2) || !left.is_multiple_of(2) {
            return Err(Error::InvalidArgument("crop origin must be even".into()));
        }
        if top + height > self.height || left + width > self.width {
            return Err(Error::mismatch(
                format!("window within {}x{}", self.width, self.height),
                format!("{width}x{height} at ({top},{left})"),
            ));
        }
        let mut data = Vec::with_capacity(width * height);
        for r in top..top + height {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Self::new(width, height, self.pattern, self.bit_depth, data)
    }

    fn max_code(&self) -> f32 {
        ((1u32 << self.bit_depth) - 1) as f32
    }

    pub fn to_codes(&self) -> Vec<u32> {
        let max = self.max_code();
        self.data.iter().map(|&v| (v * max).round() as u32).collect()
    }

    pub fn from_codes(
        width: usize,
        height: usize,
        pattern: CfaPattern,
        bit_depth: u8,
        codes: &[u32],
    ) -> Result<Self> {
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::InvalidArgument(format!("bit depth {bit_depth} outside 1..=16")));
        }
        let max = (1u32 << bit_depth) - 1;
        if let Some(&value) = codes.iter().find(|&&v| v > max) {
            return Err(Error::ValueOutOfRange { value, bit_depth });
        }
        let data = codes.iter().map(|&v| v as f32 / max as f32).collect();
        Self::new(width, height, pattern, bit_depth, data)
    }
}

/// On-disk raw frame layouts accepted by [`load_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawFormat {
    Pgm,
    /// Headerless row-major little-endian `u16` samples.
    U16Le { width: usize, height: usize },
}

pub fn load_image(
    path: impl AsRef<Path>,
    format: RawFormat,
    bit_depth: u8,
    pattern: CfaPattern,
) -> Result<BayerImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, format, bit_depth, pattern)
}

pub fn decode_image(
    bytes: &[u8],
    format: RawFormat,
    bit_depth: u8,
    pattern: CfaPattern,
) -> Result<BayerImage> {
    let (width, height, codes) = match format {
        RawFormat::Pgm => {
            let pgm = pgm::decode(bytes)?;
            (pgm.width, pgm.height, pgm.samples)
        }
        RawFormat::U16Le { width, height } => {
            if bytes.len() != width * height * 2 {
                return Err(Error::mismatch(
                    format!("{} bytes for {width}x{height}", width * height * 2),
                    format!("{} bytes", bytes.len()),
                ));
            }
            let codes = bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect();
            (width, height, codes)
        }
    };
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::OddDimensions { width, height });
    }
    BayerImage::from_codes(width, height, pattern, bit_depth, &codes)
}

/// Writes the frame as a P5 file at its own bit depth.
pub fn save_pgm(img: &BayerImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(img: &BayerImage) -> Vec<u8> {
    pgm::encode(&pgm::PgmData {
        width: img.width,
        height: img.height,
        maxval: (1u32 << img.bit_depth) - 1,
        samples: img.to_codes(),
    })
}

/// Regular decomposition of a frame into `rows x cols` equal tiles after an
/// optional centred crop. All offsets and tile dimensions are even so that every
/// tile keeps the frame's CFA phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_height: usize,
    pub tile_width: usize,
    pub crop_top: usize,
    pub crop_left: usize,
}

impl TileGrid {
    pub fn for_frame(width: usize, height: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("tile grid needs at least one row and column".into()));
        }
        let tile_height = height / rows;
        let tile_width = width / cols;
        if tile_height == 0 || tile_width == 0 || !tile_height.is_multiple_of(2) || !tile_width.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} grid on {width}x{height} gives {tile_width}x{tile_height} tiles; tile dims must be even and non-zero"
            )));
        }
        let crop_top = ((height - rows * tile_height) / 2) & !1;
        let crop_left = ((width - cols * tile_width) / 2) & !1;
        Ok(Self { rows, cols, tile_height, tile_width, crop_top, crop_left })
    }

    /// Grid of fixed-size tiles; the frame must be an exact multiple of the tile size.
    pub fn with_tile_size(width: usize, height: usize, tile: usize) -> Result<Self> {
        if tile == 0 || !width.is_multiple_of(tile) || !height.is_multiple_of(tile) {
            return Err(Error::mismatch(
                format!("frame dims divisible by {tile}"),
                format!("{width}x{height}"),
            ));
        }
        Self::for_frame(width, height, height / tile, width / tile)
    }

    pub fn covered_height(&self) -> usize {
        self.rows * self.tile_height
    }

    pub fn covered_width(&self) -> usize {
        self.cols * self.tile_width
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_fits(&self, img: &BayerImage) -> Result<()> {
        if self.crop_top + self.covered_height() > img.height
            || self.crop_left + self.covered_width() > img.width
        {
            return Err(Error::mismatch(
                format!(
                    "frame of at least {}x{}",
                    self.crop_left + self.covered_width(),
                    self.crop_top + self.covered_height()
                ),
                format!("{}x{}", img.width, img.height),
            ));
        }
        Ok(())
    }
}

/// Splits a frame into row-major tiles.
pub fn split_into_tiles(img: &BayerImage, grid: &TileGrid) -> Result<Vec<BayerImage>> {
    grid.check_fits(img)?;
    let mut tiles = Vec::with_capacity(grid.len());
    for tr in 0..grid.rows {
        for tc in 0..grid.cols {
            tiles.push(img.crop(
                grid.crop_top + tr * grid.tile_height,
                grid.crop_left + tc * grid.tile_width,
                grid.tile_height,
                grid.tile_width,
            )?);
        }
    }
    Ok(tiles)
}

/// Inverse of [`split_into_tiles`]; yields the cropped frame.
pub fn reassemble_tiles(tiles: &[BayerImage], grid: &TileGrid) -> Result<BayerImage> {
    if tiles.len() != grid.len() {
        return Err(Error::mismatch(format!("{} tiles", grid.len()), tiles.len()));
    }
    let width = grid.covered_width();
    let height = grid.covered_height();
    let mut data = vec![0.0f32; width * height];
    for (i, tile) in tiles.iter().enumerate() {
        if tile.width != grid.tile_width || tile.height != grid.tile_height {
            return Err(Error::mismatch(
                format!("{}x{} tile", grid.tile_width, grid.tile_height),
                format!("{}x{}", tile.width, tile.height),
            ));
        }
        let top = (i / grid.cols) * grid.tile_height;
        let left = (i % grid.cols) * grid.tile_width;
        for r in 0..grid.tile_height {
            let dst = (top + r) * width + left;
            data[dst..dst + grid.tile_width]
                .copy_from_slice(&tiles[i].data[r * grid.tile_width..(r + 1) * grid.tile_width]);
        }
    }
    let first = tiles.first().ok_or_else(|| Error::InvalidArgument("no tiles".into()))?;
    BayerImage::new(width, height, first.pattern, first.bit_depth, data)
}

/// Start offsets of `tile`-sized windows covering `0..len`. When `len` is not a
/// multiple of `tile` the last window is shifted back to end at `len` and
/// overlaps its predecessor. Offsets stay even for even inputs.
pub fn tile_origins(len: usize, tile: usize) -> Result<Vec<usize>> {
    if tile == 0 || tile > len {
        return Err(Error::mismatch(format!("extent of at least {tile}"), len));
    }
    let mut out: Vec<usize> = (0..len / tile).map(|i| i * tile).collect();
    if !len.is_multiple_of(tile) {
        out.push(len - tile);
    }
    Ok(out)
}

/// Top-left corners of `tile x tile` windows covering a frame, row-major.
pub fn tile_positions(width: usize, height: usize, tile: usize) -> Result<Vec<(usize, usize)>> {
    let rows = tile_origins(height, tile)?;
    let cols = tile_origins(width, tile)?;
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Appends the `tile x tile` block at `origin` of a row-major buffer.
pub(crate) fn copy_tile(src: &[f32], width: usize, origin: (usize, usize), tile: usize, out: &mut Vec<f32>) {
    for r in 0..tile {
        let start = (origin.0 + r) * width + origin.1;
        out.extend_from_slice(&src[start..start + tile]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Mirror about the edge pixel without repeating it: `-1 -> 1`, `n -> n - 2`.
    #[default]
    Reflect,
}

/// Maps a possibly out-of-range coordinate into `0..len` by mirror reflection.
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Square window around a pixel, centre at `((size-1)/2, (size-1)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub center: (usize, usize),
    pub data: Vec<f32>,
    pub color: CfaColor,
}

impl Patch {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.size + col]
    }

    pub fn center_value(&self) -> f32 {
        let h = self.size / 2;
        self.get(h, h)
    }

    /// Patch values in row-major order with the centre pixel removed.
    pub fn neighbors(&self) -> Vec<f32> {
        let mid = (self.size * self.size) / 2;
        self.data
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != mid)
            .map(|(_, &v)| v)
            .collect()
    }
}

fn check_patch_args(img: &BayerImage, center: (usize, usize), size: usize) -> Result<()> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::InvalidArgument(format!("patch size {size} must be odd")));
    }
    if center.0 >= img.height || center.1 >= img.width {
        return Err(Error::InvalidArgument(format!(
            "patch centre {center:?} outside {}x{} frame",
            img.width, img.height
        )));
    }
    Ok(())
}

pub fn extract_patch(
    img: &BayerImage,
    center: (usize, usize),
    size: usize,
    padding: Padding,
) -> Result<Patch> {
    check_patch_args(img, center, size)?;
    let Padding::Reflect = padding;
    let mut data = Vec::with_capacity(size * size);
    push_window(img, center, size, false, &mut data);
    Ok(Patch { size, center, data, color: img.color_at(center.0, center.1) })
}

/// Appends the reflect-padded window around `center` to `out`, optionally
/// dropping the centre pixel. Used to assemble model inputs without allocating
/// a [`Patch`] per pixel.
pub(crate) fn push_window(
    img: &BayerImage,
    center: (usize, usize),
    size: usize,
    skip_center: bool,
    out: &mut Vec<f32>,
) {
    let half = (size / 2) as isize;
    for dr in -half..=half {
        let r = reflect_index(center.0 as isize + dr, img.height);
        for dc in -half..=half {
            if skip_center && dr == 0 && dc == 0 {
                continue;
            }
            let c = reflect_index(center.1 as isize + dc, img.width);
            out.push(img.data[r * img.width + c]);
        }
    }
}
