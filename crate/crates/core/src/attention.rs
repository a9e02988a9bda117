//! Multi-head spatial attention: 1x1 conv -> batch norm -> ReLU over the
//! attention stage, plus resizing and head combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    relu, relu_backward, resize, BatchNorm2d, BatchNormCache, BufferVisitor, Conv2d, ConvCache,
    Mode, ParamVisitor,
};
use crate::tensor::Tensor;

/// `(B, M, H, W)` nonnegative attention maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    maps: Tensor,
}

impl AttentionMaps {
    /// Wraps a tensor, checking rank, `M >= 1` and nonnegativity.
    pub fn new(maps: Tensor) -> Result<Self> {
        let (_, m, _, _) = maps.dims4()?;
        if m == 0 {
            return Err(shape_err!("attention maps need at least one head"));
        }
        if maps.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(shape_err!("attention maps must be nonnegative"));
        }
        Ok(AttentionMaps { maps })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.maps
    }

    pub fn into_tensor(self) -> Tensor {
        self.maps
    }

    pub fn batch(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.maps.shape()[2], self.maps.shape()[3])
    }

    /// The `H x W` plane of head `k` for sample `b`.
    pub fn head(&self, b: usize, k: usize) -> &[f64] {
        let (h, w) = self.spatial();
        let m = self.heads();
        &self.maps.data()[(b * m + k) * h * w..(b * m + k + 1) * h * w]
    }

    pub fn select(&self, indices: &[usize]) -> AttentionMaps {
        AttentionMaps {
            maps: self.maps.select(indices),
        }
    }
}

/// How the heads are combined into the single map that pools the final stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpliceMode {
    #[default]
    Sum,
    Max,
    Mean,
}

impl std::str::FromStr for SpliceMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(SpliceMode::Sum),
            "max" => Ok(SpliceMode::Max),
            "mean" => Ok(SpliceMode::Mean),
            other => Err(config_err!("unknown splice mode `{}`", other)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    conv: ConvCache,
    bn: BatchNormCache,
    out: Tensor,
}

impl AttentionBlock {
    pub fn new(in_channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 {
            return Err(config_err!("number of attention maps M must be at least 1"));
        }
        Ok(AttentionBlock {
            conv: Conv2d::new(in_channels, heads, 1, 1, 0, false, rng),
            bn: BatchNorm2d::new(heads),
        })
    }

    pub fn heads(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_>) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }

    /// Generate `M` attention maps from attention-stage features.
    pub fn forward(&mut self, features: &Tensor, mode: Mode) -> Result<(AttentionMaps, AttentionCache)> {
        let (_, c, _, _) = features.dims4()?;
        if c != self.in_channels() {
            return Err(shape_err!(
                "attention block expects {} channels from the attention stage, got {}",
                self.in_channels(),
                c
            ));
        }
        let (z, conv) = self.conv.forward(features)?;
        let (n, bn) = self.bn.forward(&z, mode)?;
        let out = relu(&n);
        let maps = AttentionMaps { maps: out.clone() };
        Ok((maps, AttentionCache { conv, bn, out }))
    }

    pub fn backward(&mut self, cache: &AttentionCache, d_maps: &Tensor) -> Result<Tensor> {
        let dn = relu_backward(&cache.out, d_maps);
        let dz = self.bn.backward(&cache.bn, &dn)?;
        Ok(self
            .conv
            .backward(&cache.conv, &dz, true)?
            .expect("input gradient requested"))
    }
}

/// Bilinear resize of every head.
pub fn resize_attention(a: &AttentionMaps, target_h: usize, target_w: usize) -> Result<AttentionMaps> {
    if target_h == 0 || target_w == 0 {
        return Err(shape_err!("cannot resize attention to {}x{}", target_h, target_w));
    }
    Ok(AttentionMaps {
        maps: resize::resize(&a.maps, target_h, target_w)?,
    })
}

/// Element-wise sum over heads: `(B, M, H, W) -> (B, 1, H, W)`.
pub fn sum_attention(a: &AttentionMaps) -> Tensor {
    splice_attention(a, SpliceMode::Sum).0
}

/// Remembers the winning head per pixel for [`SpliceMode::Max`].
#[derive(Clone, Debug)]
pub struct SpliceCache {
    mode: SpliceMode,
    heads: usize,
    argmax: Vec<usize>,
}

pub fn splice_attention(a: &AttentionMaps, mode: SpliceMode) -> (Tensor, SpliceCache) {
    let b = a.batch();
    let m = a.heads();
    let (h, w) = a.spatial();
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, 1, h, w]);
    let mut argmax = Vec::new();
    if mode == SpliceMode::Max {
        argmax = vec![0; b * hw];
    }
    for bi in 0..b {
        let dst = out.outer_mut(bi);
        for k in 0..m {
            let plane = a.head(bi, k);
            match mode {
                SpliceMode::Sum | SpliceMode::Mean => {
                    for (d, v) in dst.iter_mut().zip(plane) {
                        *d += v;
                    }
                }
                SpliceMode::Max => {
                    for (p, (d, &v)) in dst.iter_mut().zip(plane).enumerate() {
                        if k == 0 || v > *d {
                            *d = v;
                            argmax[bi * hw + p] = k;
                        }
                    }
                }
            }
        }
        if mode == SpliceMode::Mean {
            dst.iter_mut().for_each(|d| *d /= m as f64);
        }
    }
    (
        out,
        SpliceCache {
            mode,
            heads: m,
            argmax,
        },
    )
}

pub fn splice_attention_backward(cache: &SpliceCache, d_out: &Tensor) -> Result<Tensor> {
    let (b, one, h, w) = d_out.dims4()?;
    if one != 1 {
        return Err(shape_err!("spliced gradient must have one channel"));
    }
    let m = cache.heads;
    let hw = h * w;
    let mut d = Tensor::zeros(&[b, m, h, w]);
    let dd = d.data_mut();
    for bi in 0..b {
        let g = d_out.outer(bi);
        for (p, &gv) in g.iter().enumerate() {
            match cache.mode {
                SpliceMode::Sum => {
                    for k in 0..m {
                        dd[(bi * m + k) * hw + p] = gv;
                    }
                }
                SpliceMode::Mean => {
                    for k in 0..m {
                        dd[(bi * m + k) * hw + p] = gv / m as f64;
                    }
                }
                SpliceMode::Max => {
                    let k = cache.argmax[bi * hw + p];
                    dd[(bi * m + k) * hw + p] = gv;
                }
            }
        }
    }
    Ok(d)
}
