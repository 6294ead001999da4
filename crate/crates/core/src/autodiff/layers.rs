use std::ops::{Add, AddAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::error::Result;

/// Analytic size of a layer or model: scalar parameters and multiply-accumulates
/// per forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: usize,
    pub macs: usize,
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost { params: self.params + rhs.params, macs: self.macs + rhs.macs }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}

/// Affine layer `x @ w + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.kaiming_uniform(format!("{name}.weight"), vec![fan_in, fan_out], fan_in, rng);
        let b = store.zeros(format!("{name}.bias"), vec![fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }

    /// Cost of applying the layer to `rows` input vectors.
    pub fn cost(&self, rows: usize) -> Cost {
        Cost {
            params: self.fan_in * self.fan_out + self.fan_out,
            macs: rows * self.fan_in * self.fan_out,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square-kernel convolution with "same" zero padding for odd kernels.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = store.kaiming_uniform(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let b = store.zeros(format!("{name}.bias"), vec![out_channels]);
        Self { w, b, in_channels, out_channels, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Cost for an output map of `out_pixels` positions.
    pub fn cost(&self, out_pixels: usize) -> Cost {
        let taps = self.in_channels * self.kernel * self.kernel;
        Cost {
            params: taps * self.out_channels + self.out_channels,
            macs: out_pixels * taps * self.out_channels,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.ones(format!("{name}.gamma"), vec![dim]);
        let beta = store.zeros(format!("{name}.beta"), vec![dim]);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }

    pub fn cost(&self) -> Cost {
        Cost { params: 2 * self.dim, macs: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_cost_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let d = Dense::new(&mut store, "fc", 24, 64, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(d.cost(1), Cost { params: 1600, macs: 1536 });
        assert_eq!(store.numel(), 1600);
    }

    #[test]
    fn conv_cost_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let c = Conv2d::new(&mut store, "c", 8, 16, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.cost(100).params, 9 * 8 * 16 + 16);
        assert_eq!(c.cost(100).macs, 100 * 9 * 8 * 16);
        assert_eq!(store.numel(), c.cost(1).params);
    }
}
