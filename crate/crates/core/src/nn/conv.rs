use rand::Rng;

use super::{gemm, he_normal, Param, ParamVisitor};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// 2-d convolution with square kernels, computed as im2col + GEMM over the
/// whole batch.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    cols: Vec<f64>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        Conv2d {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]))),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&format!("{prefix}.bias"), b);
        }
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let k = self.kernel;
        let ncols = b * ho * wo;
        let mut cols = vec![0.0; c * k * k * ncols];
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let src = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], shape: [usize; 4], ho: usize, wo: usize) -> Tensor {
        let [b, c, h, w] = shape;
        let k = self.kernel;
        let ncols = b * ho * wo;
        let mut dx = Tensor::zeros(&shape);
        let dxd = dx.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * ncols..(row + 1) * ncols];
                    for bi in 0..b {
                        let dst = &mut dxd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, &g) in srow.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    drow[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(shape_err!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                c
            ));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(shape_err!("input {}x{} smaller than kernel {}", h, w, self.kernel));
        }
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x, ho, wo);
        let kk = c * self.kernel * self.kernel;
        let n = b * ho * wo;
        let o = self.out_channels;
        let mut out_mat = vec![0.0; o * n];
        gemm(o, kk, n, 1.0, self.weight.value.data(), false, &cols, false, 0.0, &mut out_mat);

        let hw = ho * wo;
        let mut y = Tensor::zeros(&[b, o, ho, wo]);
        let yd = y.data_mut();
        for oc in 0..o {
            let bias = self.bias.as_ref().map_or(0.0, |p| p.value.data()[oc]);
            for bi in 0..b {
                let src = &out_mat[oc * n + bi * hw..oc * n + (bi + 1) * hw];
                let dst = &mut yd[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        let cache = ConvCache {
            input_shape: [b, c, h, w],
            out_hw: (ho, wo),
            cols,
        };
        Ok((y, cache))
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        dy: &Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let [b, c, _, _] = cache.input_shape;
        let (ho, wo) = cache.out_hw;
        let o = self.out_channels;
        if dy.shape() != [b, o, ho, wo] {
            return Err(shape_err!("conv backward got gradient of shape {:?}", dy.shape()));
        }
        let hw = ho * wo;
        let n = b * hw;
        let mut dy_mat = vec![0.0; o * n];
        let dyd = dy.data();
        for bi in 0..b {
            for oc in 0..o {
                dy_mat[oc * n + bi * hw..oc * n + (bi + 1) * hw]
                    .copy_from_slice(&dyd[(bi * o + oc) * hw..(bi * o + oc + 1) * hw]);
            }
        }
        let kk = c * self.kernel * self.kernel;
        gemm(o, n, kk, 1.0, &dy_mat, false, &cache.cols, true, 1.0, self.weight.grad.data_mut());
        if let Some(bias) = self.bias.as_mut() {
            for (oc, g) in bias.grad.data_mut().iter_mut().enumerate() {
                *g += dy_mat[oc * n..(oc + 1) * n].iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, o, n, 1.0, self.weight.value.data(), true, &dy_mat, false, 0.0, &mut dcols);
        Ok(Some(self.col2im(&dcols, cache.input_shape, ho, wo)))
    }
}
