use super::{BufferVisitor, Mode, Param, ParamVisitor};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Per-channel batch normalisation over (batch, height, width).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    mode: Mode,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_>) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }

    /// In train mode the running statistics are updated as a side effect.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(shape_err!("batch norm expects {} channels, got {}", self.channels(), c));
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let xd = x.data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for bi in 0..b {
                        v += xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = v / count;
                }
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mom = self.momentum;
                for ci in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ci];
                    *rm = (1.0 - mom) * *rm + mom * mean[ci];
                    let rv = &mut self.running_var.data_mut()[ci];
                    *rv = (1.0 - mom) * *rv + mom * var[ci] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        {
            let xh = xhat.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                    for (d, s) in xh[r.clone()].iter_mut().zip(&xd[r]) {
                        *d = (s - mean[ci]) * inv_std[ci];
                    }
                }
            }
        }
        {
            let g = self.gamma.value.data();
            let be = self.beta.value.data();
            let yd = y.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                    for (d, s) in yd[r.clone()].iter_mut().zip(&xhat.data()[r]) {
                        *d = g[ci] * s + be[ci];
                    }
                }
            }
        }
        Ok((y, BatchNormCache { mode, xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Result<Tensor> {
        cache.xhat.check_same_shape(dy)?;
        let (b, c, h, w) = dy.dims4()?;
        let hw = h * w;
        let count = (b * hw) as f64;
        let dyd = dy.data();
        let xh = cache.xhat.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for (g, x) in dyd[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ci] += g;
                    sum_dy_xhat[ci] += g * x;
                }
            }
        }
        for ci in 0..c {
            self.gamma.grad.data_mut()[ci] += sum_dy_xhat[ci];
            self.beta.grad.data_mut()[ci] += sum_dy[ci];
        }
        let gamma = self.gamma.value.data();
        let mut dx = Tensor::zeros(dy.shape());
        let dxd = dx.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                let k = gamma[ci] * cache.inv_std[ci];
                match cache.mode {
                    Mode::Train => {
                        let mdy = sum_dy[ci] / count;
                        let mdyx = sum_dy_xhat[ci] / count;
                        for ((d, g), x) in dxd[r.clone()].iter_mut().zip(&dyd[r.clone()]).zip(&xh[r]) {
                            *d = k * (g - mdy - x * mdyx);
                        }
                    }
                    Mode::Eval => {
                        for (d, g) in dxd[r.clone()].iter_mut().zip(&dyd[r]) {
                            *d = k * g;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_output_is_standardised() {
        let mut bn = BatchNorm2d::new(2);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| (i as f64 * 0.7).sin() * 3.0 + 1.0);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for ci in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ci) * 16..(b * 2 + ci + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn eval_mode_leaves_running_stats_untouched() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::full(&[2, 1, 2, 2], 3.0);
        let before = bn.running_mean.clone();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean, before);
    }
}
