use rand::Rng;

use super::{gemm, Param, ParamVisitor};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Affine map `y = x W^T + b` over rows of a `(batch, in)` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    input: Tensor,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let weight = Tensor::from_fn(&[out_features, in_features], |_| rng.random_range(-bound..bound));
        Linear {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let (b, d) = x.dims2()?;
        if d != self.in_features() {
            return Err(shape_err!("linear expects {} features, got {}", self.in_features(), d));
        }
        let o = self.out_features();
        let mut y = Tensor::zeros(&[b, o]);
        for row in 0..b {
            y.outer_mut(row).copy_from_slice(self.bias.value.data());
        }
        gemm(b, d, o, 1.0, x.data(), false, self.weight.value.data(), true, 1.0, y.data_mut());
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Tensor) -> Result<Tensor> {
        let (b, d) = cache.input.dims2()?;
        let o = self.out_features();
        if dy.shape() != [b, o] {
            return Err(shape_err!("linear backward got gradient of shape {:?}", dy.shape()));
        }
        gemm(o, b, d, 1.0, dy.data(), true, cache.input.data(), false, 1.0, self.weight.grad.data_mut());
        for row in 0..b {
            for (g, v) in self.bias.grad.data_mut().iter_mut().zip(dy.outer(row)) {
                *g += v;
            }
        }
        let mut dx = Tensor::zeros(&[b, d]);
        gemm(b, o, d, 1.0, dy.data(), false, self.weight.value.data(), false, 0.0, dx.data_mut());
        Ok(dx)
    }
}
