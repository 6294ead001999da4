//! Central finite-difference checks in `f64`.

use badpix::autodiff::{Graph, ParamStore, Tensor, Var};
use badpix::corrector::{Mlp, MlpConfig};
use badpix::detector::{UNet, UNetConfig};
use badpix::reconstructor::{VitAe, VitConfig};
use badpix::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 10;

/// Relative error with a floor on the denominator, so gradients that are
/// zero on both sides compare by absolute difference.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

#[derive(Clone, Copy)]
pub enum Fill {
    Uniform(f64, f64),
    Binary,
}

pub struct Input {
    shape: Vec<usize>,
    fill: Fill,
    differentiable: bool,
}

pub fn input(shape: &[usize], lo: f64, hi: f64) -> Input {
    Input { shape: shape.to_vec(), fill: Fill::Uniform(lo, hi), differentiable: true }
}

pub fn constant(shape: &[usize], fill: Fill) -> Input {
    Input { shape: shape.to_vec(), fill, differentiable: false }
}

fn sample(fill: Fill, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| match fill {
            Fill::Uniform(lo, hi) => rng.random_range(lo..hi),
            Fill::Binary => f64::from(rng.random_bool(0.5)),
        })
        .collect()
}

/// Reduces any output to a scalar through a fixed random weighting so every
/// output element contributes a distinct amount.
fn weighted_loss(g: &mut Graph<f64>, y: Var, weights: &[f64]) -> Var {
    if g.value(y).len() == 1 {
        return y;
    }
    let w = g.input(Tensor::new(g.shape(y).to_vec(), weights[..g.value(y).len()].to_vec()).unwrap());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn evaluate(build: &Build, values: &[Tensor<f64>], weights: &[f64]) -> (f64, u64, Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|v| g.input(v.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let loss = weighted_loss(&mut g, y, weights);
    (g.value(loss).item(), g.kink_signature(), g, vars, loss)
}

/// Worst relative error over every element of every differentiable input,
/// across [`SEEDS`] random draws. Perturbations that flip a ReLU are skipped.
pub fn op_error(inputs: &[Input], build: &Build) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<Tensor<f64>> = inputs
            .iter()
            .map(|i| {
                let n = i.shape.iter().product();
                Tensor::new(i.shape.clone(), sample(i.fill, n, &mut rng)).unwrap()
            })
            .collect();
        let weights: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, kinks, g, vars, loss) = evaluate(build, &values, &weights);
        let grads = g.backward(loss).unwrap();
        for (k, spec) in inputs.iter().enumerate() {
            if !spec.differentiable {
                continue;
            }
            let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values[k].len()]);
            for j in 0..values[k].len() {
                let orig = values[k].data()[j];
                values[k].data_mut()[j] = orig + STEP;
                let (lp, kp, ..) = evaluate(build, &values, &weights);
                values[k].data_mut()[j] = orig - STEP;
                let (lm, km, ..) = evaluate(build, &values, &weights);
                values[k].data_mut()[j] = orig;
                if kp != kinks || km != kinks {
                    continue;
                }
                worst = worst.max(rel_err(analytic[j], (lp - lm) / (2.0 * STEP)));
            }
        }
    }
    worst
}

fn conv(stride: usize, pad: usize) -> impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {
    move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)
}

/// Every differentiable graph operation with its worst error.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let conv_in = || [input(&[2, 2, 6, 6], -1.0, 1.0), input(&[3, 2, 3, 3], -1.0, 1.0), input(&[3], -1.0, 1.0)];
    vec![
        ("matmul", op_error(&[input(&[3, 4], -1.0, 1.0), input(&[4, 5], -1.0, 1.0)], &|g, v| g.matmul(v[0], v[1]))),
        (
            "add_broadcast",
            op_error(&[input(&[2, 3, 4], -1.0, 1.0), input(&[4], -1.0, 1.0)], &|g, v| g.add_broadcast(v[0], v[1])),
        ),
        ("add", op_error(&[input(&[6], -1.0, 1.0), input(&[6], -1.0, 1.0)], &|g, v| g.add(v[0], v[1]))),
        ("sub", op_error(&[input(&[6], -1.0, 1.0), input(&[6], -1.0, 1.0)], &|g, v| g.sub(v[0], v[1]))),
        ("mul", op_error(&[input(&[6], -1.0, 1.0), input(&[6], -1.0, 1.0)], &|g, v| g.mul(v[0], v[1]))),
        ("scale", op_error(&[input(&[6], -1.0, 1.0)], &|g, v| Ok(g.scale(v[0], -2.5)))),
        ("relu", op_error(&[input(&[12], -1.0, 1.0)], &|g, v| Ok(g.relu(v[0])))),
        ("sigmoid", op_error(&[input(&[12], -4.0, 4.0)], &|g, v| Ok(g.sigmoid(v[0])))),
        ("sum", op_error(&[input(&[2, 5], -1.0, 1.0)], &|g, v| Ok(g.sum(v[0])))),
        ("mean", op_error(&[input(&[2, 5], -1.0, 1.0)], &|g, v| Ok(g.mean(v[0])))),
        ("reshape", op_error(&[input(&[2, 6], -1.0, 1.0)], &|g, v| g.reshape(v[0], vec![3, 4]))),
        ("conv2d", op_error(&conv_in(), &conv(1, 1))),
        ("conv2d stride 2", op_error(&conv_in(), &conv(2, 1))),
        ("conv2d unpadded", op_error(&conv_in(), &conv(1, 0))),
        ("upsample2", op_error(&[input(&[2, 2, 3, 3], -1.0, 1.0)], &|g, v| g.upsample2(v[0]))),
        ("avg_pool2", op_error(&[input(&[2, 2, 4, 4], -1.0, 1.0)], &|g, v| g.avg_pool2(v[0]))),
        (
            "concat_channels",
            op_error(&[input(&[2, 1, 3, 3], -1.0, 1.0), input(&[2, 2, 3, 3], -1.0, 1.0)], &|g, v| {
                g.concat_channels(v[0], v[1])
            }),
        ),
        (
            "layer_norm",
            op_error(&[input(&[2, 3, 6], -2.0, 2.0), input(&[6], 0.5, 1.5), input(&[6], -1.0, 1.0)], &|g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        ("softmax", op_error(&[input(&[3, 5], -3.0, 3.0)], &|g, v| g.softmax(v[0]))),
        ("attention", op_error(&[input(&[2, 4, 12], -1.0, 1.0)], &|g, v| g.attention(v[0], 2))),
        ("patchify", op_error(&[input(&[2, 1, 6, 6], -1.0, 1.0)], &|g, v| g.patchify(v[0], 3))),
        ("unpatchify", op_error(&[input(&[2, 4, 9], -1.0, 1.0)], &|g, v| g.unpatchify(v[0], 3, 6, 6))),
        (
            "replace_token",
            op_error(&[input(&[2, 3, 4], -1.0, 1.0), input(&[4], -1.0, 1.0)], &|g, v| g.replace_token(v[0], v[1], 1)),
        ),
        (
            "bce_dice",
            op_error(&[input(&[2, 8], 0.05, 0.95), constant(&[2, 8], Fill::Binary)], &|g, v| {
                g.bce_dice(v[0], v[1], 1.0, 1.0)
            }),
        ),
        (
            "bce_dice_logits",
            op_error(&[input(&[2, 8], -5.0, 5.0), constant(&[2, 8], Fill::Binary)], &|g, v| {
                g.bce_dice_logits(v[0], v[1], 0.7, 0.3)
            }),
        ),
        (
            "mse",
            op_error(&[input(&[10], -1.0, 1.0), constant(&[10], Fill::Uniform(-1.0, 1.0))], &|g, v| g.mse(v[0], v[1])),
        ),
        (
            "masked_nmse",
            op_error(
                &[input(&[12], 0.0, 1.0), constant(&[12], Fill::Uniform(0.1, 1.0)), constant(&[12], Fill::Binary)],
                &|g, v| {
                    // first entry forced on so the mask is never empty
                    let mut m = g.value(v[2]).clone();
                    m.data_mut()[0] = 1.0;
                    let m = g.input(m);
                    g.masked_nmse(v[0], v[1], m)
                },
            ),
        ),
    ]
}

/// Worst error over sampled coordinates of every parameter tensor.
fn param_error<M>(
    seed: u64,
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore<f64>,
    loss: &dyn Fn(&M, &mut Graph<f64>) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let l = loss(model, &mut g);
    let kinks = g.kink_signature();
    let analytic = g.backward(l).unwrap().for_params(&g, store(model));
    let eval = |m: &M| {
        let mut g = Graph::new();
        let l = loss(m, &mut g);
        (g.value(l).item(), g.kink_signature())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (mut worst, mut checked) = (0.0f64, 0);
    for p in 0..store(model).entries().len() {
        let n = store(model).entries()[p].value.len();
        let picks: Vec<usize> = if n <= 6 { (0..n).collect() } else { (0..6).map(|_| rng.random_range(0..n)).collect() };
        for j in picks {
            let orig = store(model).entries()[p].value.data()[j];
            store(model).entries_mut()[p].value.data_mut()[j] = orig + STEP;
            let (lp, kp) = eval(model);
            store(model).entries_mut()[p].value.data_mut()[j] = orig - STEP;
            let (lm, km) = eval(model);
            store(model).entries_mut()[p].value.data_mut()[j] = orig;
            if kp != kinks || km != kinks {
                continue;
            }
            worst = worst.max(rel_err(analytic[p][j], (lp - lm) / (2.0 * STEP)));
            checked += 1;
        }
    }
    assert!(checked > 0, "every sampled coordinate sat on a kink");
    worst
}

fn random(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn unet_error() -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(vec![2, 1, 8, 8], 0.0, 1.0, &mut rng);
            let t = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| f64::from(rng.random_bool(0.2))).collect()).unwrap();
            let mut net = UNet::<f64>::new(UNetConfig { depth: 3, base_channels: 2 }, seed).unwrap();
            param_error(seed, &mut net, UNet::store_mut, &|m, g| {
                let xv = g.input(x.clone());
                let tv = g.input(t.clone());
                let z = m.forward_logits(g, xv).unwrap();
                g.bce_dice_logits(z, tv, 1.0, 1.0).unwrap()
            })
        })
        .fold(0.0, f64::max)
}

pub fn mlp_error() -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let cfg = MlpConfig { patch_size: 5, hidden_units: 8, train_neighbor_errors: 0 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(vec![4, cfg.input_width()], -1.0, 1.0, &mut rng);
            let t = random(vec![4, 1], 0.0, 1.0, &mut rng);
            let mut m = Mlp::<f64>::new(cfg, seed).unwrap();
            param_error(seed, &mut m, Mlp::store_mut, &|m, g| {
                let xv = g.input(x.clone());
                let tv = g.input(t.clone());
                let y = m.forward(g, xv).unwrap();
                g.mse(y, tv).unwrap()
            })
        })
        .fold(0.0, f64::max)
}

pub fn tiny_vit(size: usize, mask_center: bool) -> VitConfig {
    VitConfig {
        input_size: size,
        token_patch: 3,
        embed_dim: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        mlp_ratio: 2,
        mask_center,
    }
}

/// Full-frame (6x6) and masked-cluster (9x9) variants.
pub fn vit_error() -> f64 {
    let mut worst = 0.0f64;
    for (mask_center, size) in [(false, 6), (true, 9)] {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = vec![2, 1, size, size];
            let x = random(shape.clone(), -1.0, 1.0, &mut rng);
            let a = random(shape.clone(), 0.1, 1.0, &mut rng);
            let mask = Tensor::filled(shape, 1.0);
            let mut m = VitAe::<f64>::new(tiny_vit(size, mask_center), seed).unwrap();
            worst = worst.max(param_error(seed, &mut m, VitAe::store_mut, &|m, g| {
                let xv = g.input(x.clone());
                let av = g.input(a.clone());
                let mv = g.input(mask.clone());
                let y = m.forward(g, xv).unwrap();
                g.masked_nmse(y, av, mv).unwrap()
            }));
        }
    }
    worst
}
