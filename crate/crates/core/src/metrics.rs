//! Detection and correction quality measures.
//!
//! Degenerate cases return explicit markers (`None`, [`Psnr::Infinite`])
//! instead of conventional fallback numbers.

use serde::{Deserialize, Serialize};

use crate::defects::DefectMap;
use crate::error::{Error, Result};
use crate::imaging::BayerImage;

/// Per-pixel tallies with bad pixels as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

pub fn confusion(pred: &DefectMap, truth: &DefectMap) -> Result<ConfusionCounts> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::mismatch(
            format!("{}x{} map", truth.width(), truth.height()),
            format!("{}x{}", pred.width(), pred.height()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.mask().iter().zip(truth.mask()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(precision, recall)`; `None` where the denominator is zero.
pub fn precision_recall(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Denominators at or below this are treated as zero.
pub const NMSE_GUARD: f64 = 1e-12;

/// `||pred - act||^2 / ||act||^2` over raw slices.
pub fn nmse_values(pred: &[f32], act: &[f32]) -> Option<f64> {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&p, &a) in pred.iter().zip(act) {
        let (p, a) = (p as f64, a as f64);
        num += (p - a) * (p - a);
        den += a * a;
    }
    (den > NMSE_GUARD).then(|| num / den)
}

/// NMSE over the whole frame, or only over pixels marked in `mask`.
/// `None` when the reference energy under the mask is zero.
pub fn nmse(pred: &BayerImage, act: &BayerImage, mask: Option<&DefectMap>) -> Result<Option<f64>> {
    pred.same_dims(act)?;
    if let Some(m) = mask {
        m.check_dims(act)?;
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, (&p, &a)) in pred.data().iter().zip(act.data()).enumerate() {
        if mask.is_none_or(|m| m.mask()[i]) {
            let (p, a) = (p as f64, a as f64);
            num += (p - a) * (p - a);
            den += a * a;
        }
    }
    Ok((den > NMSE_GUARD).then(|| num / den))
}

pub fn mse(pred: &BayerImage, act: &BayerImage) -> Result<f64> {
    pred.same_dims(act)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(act.data())
        .map(|(&p, &a)| (p as f64 - a as f64).powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Db(f64),
    /// Identical images.
    Infinite,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Infinite => None,
        }
    }
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse <= 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Db(10.0 * (1.0 / mse).log10())
    }
}

/// `10 log10(1 / MSE)` for unit-range images.
pub fn psnr(pred: &BayerImage, act: &BayerImage) -> Result<Psnr> {
    Ok(psnr_from_mse(mse(pred, act)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defects::sample_defect_map;

    fn img(values: Vec<f32>) -> BayerImage {
        BayerImage::new(2, 2, Default::default(), 16, values).unwrap()
    }

    #[test]
    fn identical_maps() {
        let m = sample_defect_map(8, 8, 0.2, 1).unwrap();
        let c = confusion(&m, &m).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(precision_recall(&c), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn empty_prediction_misses_everything() {
        let truth = sample_defect_map(8, 8, 0.1, 1).unwrap();
        let c = confusion(&DefectMap::empty(8, 8), &truth).unwrap();
        assert_eq!(c.fn_, truth.count());
        assert_eq!(c.total(), 64);
        assert!(confusion(&DefectMap::empty(4, 8), &truth).is_err());
    }

    #[test]
    fn precision_recall_formula_and_markers() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 10 };
        assert_eq!(precision_recall(&c), (Some(0.75), Some(0.75)));
        assert_eq!(precision_recall(&ConfusionCounts::default()), (None, None));
    }

    #[test]
    fn nmse_cases() {
        let act = img(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(nmse(&act, &act, None).unwrap(), Some(0.0));
        let scaled = img(act.data().iter().map(|v| v * 1.1).collect());
        assert!((nmse(&scaled, &act, None).unwrap().unwrap() - 0.01).abs() < 1e-6);
        let zero = img(vec![0.0; 4]);
        assert_eq!(nmse(&act, &zero, None).unwrap(), None);
        let mask = DefectMap::empty(2, 2);
        assert_eq!(nmse(&scaled, &act, Some(&mask)).unwrap(), None);
    }

    #[test]
    fn psnr_cases() {
        assert!((psnr_from_mse(0.01).db().unwrap() - 20.0).abs() < 1e-12);
        let a = img(vec![0.5; 4]);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
    }
}
