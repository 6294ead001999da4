//! Classical interpolation correctors.
//!
//! All three read neighbours from the input frame and only write pixels that
//! the defect map marks bad.

use crate::defects::DefectMap;
use crate::error::{Error, Result};
use crate::imaging::BayerImage;

/// Replaces each bad pixel by the Euclidean-nearest good pixel. Ties go to the
/// candidate that comes first in row-major order.
pub fn correct_nearest(img: &BayerImage, map: &DefectMap) -> Result<BayerImage> {
    map.check_dims(img)?;
    if map.is_empty() {
        return Ok(img.clone());
    }
    if map.count() == map.mask().len() {
        return Err(Error::InvalidArgument("every pixel is defective".into()));
    }
    let mut out = img.data().to_vec();
    for (r, c) in map.coords() {
        let (nr, nc) = nearest_good(map, r, c).expect("at least one good pixel");
        out[r * img.width() + c] = img.get(nr, nc);
    }
    img.with_data(out)
}

fn nearest_good(map: &DefectMap, row: usize, col: usize) -> Option<(usize, usize)> {
    let (h, w) = (map.height() as isize, map.width() as isize);
    let (row, col) = (row as isize, col as isize);
    let mut best: Option<(isize, isize, isize)> = None; // (d2, flat index, unused)
    let max_radius = h.max(w);
    for radius in 1..=max_radius {
        if let Some((d2, _, _)) = best {
            // every pixel on this ring is at least `radius` away
            if radius * radius > d2 {
                break;
            }
        }
        for dr in -radius..=radius {
            let r = row + dr;
            if r < 0 || r >= h {
                continue;
            }
            let step = if dr.abs() == radius { 1 } else { 2 * radius };
            let mut dc = -radius;
            while dc <= radius {
                let c = col + dc;
                if c >= 0 && c < w && !map.is_defective(r as usize, c as usize) {
                    let d2 = dr * dr + dc * dc;
                    let flat = r * w + c;
                    if best.is_none_or(|(bd, bf, _)| d2 < bd || (d2 == bd && flat < bf)) {
                        best = Some((d2, flat, 0));
                    }
                }
                dc += step;
            }
        }
    }
    best.map(|(_, flat, _)| ((flat / w) as usize, (flat % w) as usize))
}

/// Good neighbours within the window: same CFA colour when any exist,
/// otherwise every good neighbour. Empty when the whole window is bad.
fn window_samples(img: &BayerImage, map: &DefectMap, row: usize, col: usize, window: usize) -> Vec<f32> {
    let half = (window / 2) as isize;
    let color = img.color_at(row, col);
    let mut same = Vec::new();
    let mut any = Vec::new();
    for dr in -half..=half {
        for dc in -half..=half {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (r, c) = (row as isize + dr, col as isize + dc);
            if r < 0 || c < 0 || r as usize >= img.height() || c as usize >= img.width() {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            if map.is_defective(r, c) {
                continue;
            }
            let v = img.get(r, c);
            if img.color_at(r, c) == color {
                same.push(v);
            }
            any.push(v);
        }
    }
    if same.is_empty() {
        any
    } else {
        same
    }
}

fn correct_with(
    img: &BayerImage,
    map: &DefectMap,
    window: usize,
    reduce: impl Fn(&mut [f32]) -> f32,
) -> Result<BayerImage> {
    map.check_dims(img)?;
    if window.is_multiple_of(2) || window < 3 {
        return Err(Error::InvalidArgument(format!("window {window} must be odd and at least 3")));
    }
    let mut out = img.data().to_vec();
    let mut fallback: Option<BayerImage> = None;
    for (r, c) in map.coords() {
        let mut samples = window_samples(img, map, r, c, window);
        out[r * img.width() + c] = if samples.is_empty() {
            if fallback.is_none() {
                fallback = Some(correct_nearest(img, map)?);
            }
            fallback.as_ref().unwrap().get(r, c)
        } else {
            reduce(&mut samples)
        };
    }
    img.with_data(out)
}

/// Mean of the good neighbours in a `window x window` neighbourhood.
pub fn correct_linear(img: &BayerImage, map: &DefectMap, window: usize) -> Result<BayerImage> {
    correct_with(img, map, window, |s| {
        (s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64) as f32
    })
}

/// Median of the good neighbours; an even count takes the lower middle value.
pub fn correct_median(img: &BayerImage, map: &DefectMap, window: usize) -> Result<BayerImage> {
    correct_with(img, map, window, |s| {
        s.sort_by(|a, b| a.total_cmp(b));
        s[(s.len() - 1) / 2]
    })
}
