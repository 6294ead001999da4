use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Graph, LrSchedule, Optimizer, ParamStore, Scalar, Var};
use crate::error::{Error, Result};

/// Mini-batch training hyperparameters shared by the three models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 16, schedule: LrSchedule::Constant { base: 0.01 }, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Runs Adam over shuffled mini-batches of `0..n`. `loss` records the batch
/// loss on a fresh graph. Returns the sample-weighted mean loss per epoch.
pub fn fit<T: Scalar>(
    store: &mut ParamStore<T>,
    n: usize,
    cfg: &TrainConfig,
    mut loss: impl FnMut(&mut Graph<T>, &ParamStore<T>, &[usize]) -> Result<Var>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if n == 0 && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::<T>::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.schedule.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let l = loss(&mut g, store, batch)?;
            let value = g.value(l).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteGradient(format!("loss at epoch {epoch}")));
            }
            let grads = g.backward(l)?.for_params(&g, store);
            opt.step(store, &grads, lr)?;
            total += value * batch.len() as f64;
        }
        curve.push(total / n as f64);
    }
    Ok(curve)
}
