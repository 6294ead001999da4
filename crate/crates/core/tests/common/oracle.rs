//! Scalar-loop and brute-force reference implementations.

use badpix::autodiff::{Graph, Tensor};
use badpix::baselines::{correct_linear, correct_median, correct_nearest};
use badpix::defects::DefectMap;
use badpix::imaging::{BayerImage, CfaPattern};
use badpix::metrics::{confusion, nmse, precision_recall, psnr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 100;
pub const METRIC_TOLERANCE: f64 = 1e-6;

const PATTERNS: [CfaPattern; 4] = [CfaPattern::Rggb, CfaPattern::Bggr, CfaPattern::Grbg, CfaPattern::Gbrg];

pub fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> BayerImage {
    let pattern = PATTERNS[rng.random_range(0..4)];
    let data = (0..w * h).map(|_| rng.random_range(0.0f32..=1.0)).collect();
    BayerImage::new(w, h, pattern, 16, data).unwrap()
}

pub fn random_map(w: usize, h: usize, rate: f64, rng: &mut ChaCha8Rng) -> DefectMap {
    DefectMap::from_mask(w, h, (0..w * h).map(|_| rng.random_bool(rate)).collect()).unwrap()
}

fn oracle_nmse(p: &BayerImage, a: &BayerImage, m: &DefectMap) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..a.height() {
        for c in 0..a.width() {
            if m.is_defective(r, c) {
                let d = f64::from(p.get(r, c)) - f64::from(a.get(r, c));
                num += d * d;
                den += f64::from(a.get(r, c)).powi(2);
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn oracle_psnr(p: &BayerImage, a: &BayerImage) -> f64 {
    let mut se = 0.0;
    for r in 0..a.height() {
        for c in 0..a.width() {
            se += (f64::from(p.get(r, c)) - f64::from(a.get(r, c))).powi(2);
        }
    }
    let mse = se / (a.width() * a.height()) as f64;
    -10.0 * mse.log10()
}

fn oracle_precision_recall(pred: &DefectMap, truth: &DefectMap) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut pp, mut ap) = (0usize, 0usize, 0usize);
    for r in 0..truth.height() {
        for c in 0..truth.width() {
            let (p, t) = (pred.is_defective(r, c), truth.is_defective(r, c));
            tp += usize::from(p && t);
            pp += usize::from(p);
            ap += usize::from(t);
        }
    }
    let div = |n: usize, d: usize| if d == 0 { None } else { Some(n as f64 / d as f64) };
    (div(tp, pp), div(tp, ap))
}

fn oracle_bce_dice(s: &[f64], t: &[f64]) -> f64 {
    let (mut bce, mut st, mut s_sum, mut t_sum) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..s.len() {
        let p = s[i].clamp(1e-7, 1.0 - 1e-7);
        bce += -(t[i] * p.ln() + (1.0 - t[i]) * (1.0 - p).ln());
        st += s[i] * t[i];
        s_sum += s[i];
        t_sum += t[i];
    }
    bce / s.len() as f64 + 1.0 - (2.0 * st + 1.0) / (s_sum + t_sum + 1.0)
}

fn gap(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Largest deviation between library metrics and the oracles, per metric.
pub fn metric_deviations() -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 5];
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (2 * rng.random_range(1..12), 2 * rng.random_range(1..12));
        let act = random_image(w, h, &mut rng);
        let pred = random_image(w, h, &mut rng);
        let mask = random_map(w, h, rng.random_range(0.0..0.6), &mut rng);
        let truth = random_map(w, h, rng.random_range(0.0..0.3), &mut rng);

        worst[0] = worst[0].max(gap(nmse(&pred, &act, Some(&mask)).unwrap(), oracle_nmse(&pred, &act, &mask)));
        worst[1] = worst[1].max(gap(psnr(&pred, &act).unwrap().db(), Some(oracle_psnr(&pred, &act))));
        let (p, r) = precision_recall(&confusion(&mask, &truth).unwrap());
        let (op, or) = oracle_precision_recall(&mask, &truth);
        worst[2] = worst[2].max(gap(p, op));
        worst[3] = worst[3].max(gap(r, or));

        let n = rng.random_range(1..64);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3))).collect();
        let mut g = Graph::<f64>::new();
        let sv = g.input(Tensor::new(vec![n], s.clone()).unwrap());
        let tv = g.input(Tensor::new(vec![n], t.clone()).unwrap());
        let l = g.bce_dice(sv, tv, 1.0, 1.0).unwrap();
        worst[4] = worst[4].max((g.value(l).item() - oracle_bce_dice(&s, &t)).abs());
    }
    ["nmse", "psnr", "precision", "recall", "bce_dice"].into_iter().zip(worst).collect()
}

/// Colour letter at a site, read from the pattern name.
fn color(img: &BayerImage, (r, c): (usize, usize)) -> u8 {
    let name = match img.pattern() {
        CfaPattern::Rggb => b"RGGB",
        CfaPattern::Bggr => b"BGGR",
        CfaPattern::Grbg => b"GRBG",
        CfaPattern::Gbrg => b"GBRG",
    };
    name[(r % 2) * 2 + c % 2]
}

pub fn oracle_nearest(img: &BayerImage, map: &DefectMap) -> BayerImage {
    let mut out = img.clone();
    for r in 0..img.height() {
        for c in 0..img.width() {
            if !map.is_defective(r, c) {
                continue;
            }
            let mut best = (usize::MAX, 0.0f32);
            for rr in 0..img.height() {
                for cc in 0..img.width() {
                    if map.is_defective(rr, cc) {
                        continue;
                    }
                    let d2 = rr.abs_diff(r).pow(2) + cc.abs_diff(c).pow(2);
                    // strict comparison keeps the first candidate in scan order
                    if d2 < best.0 {
                        best = (d2, img.get(rr, cc));
                    }
                }
            }
            out.set(r, c, best.1);
        }
    }
    out
}

/// Same-colour good neighbours in a 3x3 window, or every good neighbour when
/// no same-colour one exists.
fn oracle_window(img: &BayerImage, map: &DefectMap, r: usize, c: usize) -> Vec<f32> {
    let mut same = Vec::new();
    let mut any = Vec::new();
    for rr in r.saturating_sub(1)..=(r + 1).min(img.height() - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(img.width() - 1) {
            if (rr, cc) == (r, c) || map.is_defective(rr, cc) {
                continue;
            }
            any.push(img.get(rr, cc));
            if color(img, (rr, cc)) == color(img, (r, c)) {
                same.push(img.get(rr, cc));
            }
        }
    }
    if same.is_empty() {
        any
    } else {
        same
    }
}

fn oracle_windowed(img: &BayerImage, map: &DefectMap, reduce: fn(Vec<f32>) -> f32) -> BayerImage {
    let nearest = oracle_nearest(img, map);
    let mut out = img.clone();
    for r in 0..img.height() {
        for c in 0..img.width() {
            if map.is_defective(r, c) {
                let s = oracle_window(img, map, r, c);
                out.set(r, c, if s.is_empty() { nearest.get(r, c) } else { reduce(s) });
            }
        }
    }
    out
}

pub fn oracle_linear(img: &BayerImage, map: &DefectMap) -> BayerImage {
    oracle_windowed(img, map, |s| {
        let mut total = 0.0f64;
        for v in &s {
            total += f64::from(*v);
        }
        (total / s.len() as f64) as f32
    })
}

pub fn oracle_median(img: &BayerImage, map: &DefectMap) -> BayerImage {
    oracle_windowed(img, map, |mut s| {
        // insertion sort, independent of the library's comparator
        for i in 1..s.len() {
            let mut j = i;
            while j > 0 && s[j - 1] > s[j] {
                s.swap(j - 1, j);
                j -= 1;
            }
        }
        s[(s.len() - 1) / 2]
    })
}

/// Instances where a corrector differs from its oracle in any pixel bit.
pub fn baseline_mismatches() -> Vec<(&'static str, usize)> {
    let mut bad = [0usize; 3];
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let img = random_image(16, 16, &mut rng);
        let mut map = random_map(16, 16, rng.random_range(0.0..0.9), &mut rng);
        if map.count() == 256 {
            map.set(0, 0, false);
        }
        let bits = |x: &BayerImage| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        bad[0] += usize::from(bits(&correct_nearest(&img, &map).unwrap()) != bits(&oracle_nearest(&img, &map)));
        bad[1] += usize::from(bits(&correct_linear(&img, &map, 3).unwrap()) != bits(&oracle_linear(&img, &map)));
        bad[2] += usize::from(bits(&correct_median(&img, &map, 3).unwrap()) != bits(&oracle_median(&img, &map)));
    }
    ["nearest", "linear", "median"].into_iter().zip(bad).collect()
}
