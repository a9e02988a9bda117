//! Bilinear attention pooling with normalised average pooling, and the
//! classifier head over the pooled features.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::{gemm, Linear, LinearCache, ParamVisitor};
use crate::tensor::Tensor;

/// Zero-guard for row normalisation.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct BapCache {
    attention: Tensor,
    features: Tensor,
    /// Normalised rows, `(B, M, C)`.
    rows: Tensor,
    norms: Vec<f64>,
}

/// Pool `features` (B, C, H, W) under each attention head (B, M, H, W):
/// `u_k = sum_{h,w} A_k * X`, row `k` = `u_k / max(|u_k|_2, eps)`.
pub fn bap(attention: &Tensor, features: &Tensor) -> Result<(Tensor, BapCache)> {
    let (b, m, h, w) = attention.dims4()?;
    let (fb, c, fh, fw) = features.dims4()?;
    if (fb, fh, fw) != (b, h, w) {
        return Err(shape_err!(
            "attention {:?} and features {:?} differ in batch or spatial size",
            attention.shape(),
            features.shape()
        ));
    }
    let hw = h * w;
    let mut rows = Tensor::zeros(&[b, m, c]);
    let mut norms = vec![0.0; b * m];
    for bi in 0..b {
        let out = rows.outer_mut(bi);
        gemm(m, hw, c, 1.0, attention.outer(bi), false, features.outer(bi), true, 0.0, out);
        for k in 0..m {
            let row = &mut out[k * c..(k + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[bi * m + k] = n;
            let d = n.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= d);
        }
    }
    let cache = BapCache {
        attention: attention.clone(),
        features: features.clone(),
        rows: rows.clone(),
        norms,
    };
    Ok((rows, cache))
}

impl BapCache {
    pub fn features_shape(&self) -> &[usize] {
        self.features.shape()
    }
}

/// Returns `(d_attention, d_features)`.
pub fn bap_backward(cache: &BapCache, d_rows: &Tensor) -> Result<(Tensor, Tensor)> {
    cache.rows.check_same_shape(d_rows)?;
    let (b, m, h, w) = cache.attention.dims4()?;
    let c = cache.features.shape()[1];
    let hw = h * w;
    let mut du = Tensor::zeros(&[b, m, c]);
    for bi in 0..b {
        for k in 0..m {
            let n = cache.norms[bi * m + k];
            let y = &cache.rows.outer(bi)[k * c..(k + 1) * c];
            let g = &d_rows.outer(bi)[k * c..(k + 1) * c];
            let dst = &mut du.outer_mut(bi)[k * c..(k + 1) * c];
            if n > NORM_EPS {
                let proj: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                    *d = (gv - yv * proj) / n;
                }
            } else {
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d = gv / NORM_EPS;
                }
            }
        }
    }
    let mut d_att = Tensor::zeros(&[b, m, h, w]);
    let mut d_feat = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        gemm(m, c, hw, 1.0, du.outer(bi), false, cache.features.outer(bi), false, 0.0, d_att.outer_mut(bi));
        gemm(c, m, hw, 1.0, du.outer(bi), true, cache.attention.outer(bi), false, 0.0, d_feat.outer_mut(bi));
    }
    Ok((d_att, d_feat))
}

/// Affine head over `[flatten(P), G]`, with optional inverted dropout on
/// its input during training.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub linear: Linear,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierCache {
    linear: LinearCache,
    p_shape: Vec<usize>,
    g_dim: usize,
    keep: Option<Vec<f64>>,
}

impl Classifier {
    pub fn new(heads: usize, texture_channels: usize, global_channels: usize, rng: &mut impl Rng) -> Self {
        Classifier {
            linear: Linear::new(heads * texture_channels + global_channels, 2, rng),
            dropout: 0.0,
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.linear.visit_params(&format!("{prefix}.linear"), f);
    }

    /// `p`: (B, M, C_F), `g`: (B, C_last). Dropout applies only when a
    /// random source is supplied and `dropout > 0`.
    pub fn forward(
        &self,
        p: &Tensor,
        g: &Tensor,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Tensor, ClassifierCache)> {
        let (b, m, cf) = p.dims3()?;
        let (gb, gc) = g.dims2()?;
        if gb != b {
            return Err(shape_err!("P has batch {} but G has {}", b, gb));
        }
        let d = m * cf + gc;
        let mut x = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let row = x.outer_mut(bi);
            row[..m * cf].copy_from_slice(p.outer(bi));
            row[m * cf..].copy_from_slice(g.outer(bi));
        }
        let keep = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let q = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..b * d)
                    .map(|_| if rng.random::<f64>() < q { 1.0 / q } else { 0.0 })
                    .collect();
                for (v, k) in x.data_mut().iter_mut().zip(&mask) {
                    *v *= k;
                }
                Some(mask)
            }
            _ => None,
        };
        let (logits, linear) = self.linear.forward(&x)?;
        Ok((
            logits,
            ClassifierCache {
                linear,
                p_shape: p.shape().to_vec(),
                g_dim: gc,
                keep,
            },
        ))
    }

    /// Returns `(dP, dG)`.
    pub fn backward(&mut self, cache: &ClassifierCache, d_logits: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut dx = self.linear.backward(&cache.linear, d_logits)?;
        if let Some(mask) = &cache.keep {
            for (v, k) in dx.data_mut().iter_mut().zip(mask) {
                *v *= k;
            }
        }
        let b = cache.p_shape[0];
        let pd = cache.p_shape[1] * cache.p_shape[2];
        let mut dp = Tensor::zeros(&cache.p_shape);
        let mut dg = Tensor::zeros(&[b, cache.g_dim]);
        for bi in 0..b {
            let row = dx.outer(bi);
            dp.outer_mut(bi).copy_from_slice(&row[..pd]);
            dg.outer_mut(bi).copy_from_slice(&row[pd..]);
        }
        Ok((dp, dg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Per-pixel loop evaluation of the normalised pooling.
    fn naive_bap(a: &Tensor, x: &Tensor) -> Tensor {
        let (b, m, h, w) = a.dims4().unwrap();
        let c = x.shape()[1];
        let mut out = Tensor::zeros(&[b, m, c]);
        for bi in 0..b {
            for k in 0..m {
                let mut u = vec![0.0; c];
                for (ci, uc) in u.iter_mut().enumerate() {
                    for y in 0..h {
                        for xx in 0..w {
                            *uc += a.data()[((bi * m + k) * h + y) * w + xx]
                                * x.data()[((bi * c + ci) * h + y) * w + xx];
                        }
                    }
                }
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                for ci in 0..c {
                    out.data_mut()[(bi * m + k) * c + ci] = u[ci] / n;
                }
            }
        }
        out
    }

    #[test]
    fn uniform_attention_on_constant_features_gives_unit_direction() {
        let c = [3.0, -4.0, 12.0];
        for &(h, w) in &[(2, 2), (5, 7)] {
            let a = Tensor::full(&[1, 1, h, w], 1.0);
            let x = Tensor::from_fn(&[1, 3, h, w], |i| c[i / (h * w)]);
            let (rows, _) = bap(&a, &x).unwrap();
            for (got, want) in rows.data().iter().zip(c.iter().map(|v| v / 13.0)) {
                assert!((got - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scaling_attention_leaves_rows_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(0.0..1.0));
        let x = Tensor::from_fn(&[2, 5, 4, 4], |_| rng.random_range(-1.0..1.0));
        let (base, _) = bap(&a, &x).unwrap();
        let (scaled, _) = bap(&a.scale(5.0), &x).unwrap();
        assert!(base.max_abs_diff(&scaled).unwrap() < 1e-15);
    }

    #[test]
    fn matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.random_range(0.0..1.0));
        let x = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let (rows, _) = bap(&a, &x).unwrap();
        assert!(rows.max_abs_diff(&naive_bap(&a, &x)).unwrap() < 1e-10);
    }

    #[test]
    fn zero_head_yields_zero_row() {
        let a = Tensor::zeros(&[1, 1, 3, 3]);
        let x = Tensor::full(&[1, 2, 3, 3], 1.0);
        let (rows, _) = bap(&a, &x).unwrap();
        assert!(rows.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_mismatch_is_a_shape_error() {
        let a = Tensor::zeros(&[1, 1, 3, 3]);
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(bap(&a, &x), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zero_weight_classifier_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut clf = Classifier::new(2, 3, 4, &mut rng);
        clf.linear.weight.value.fill(0.0);
        clf.linear.bias.value = Tensor::from_vec(&[2], vec![0.25, -1.5]).unwrap();
        let p = Tensor::from_fn(&[3, 2, 3], |i| i as f64);
        let g = Tensor::from_fn(&[3, 4], |i| -(i as f64));
        let (logits, _) = clf.forward(&p, &g, None).unwrap();
        for b in 0..3 {
            assert_eq!(logits.outer(b), &[0.25, -1.5]);
        }
    }

    #[test]
    fn logit_gap_is_monotone_in_a_single_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut clf = Classifier::new(1, 2, 2, &mut rng);
        let p = Tensor::from_vec(&[1, 1, 2], vec![0.6, 0.8]).unwrap();
        let g = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for step in 0..5 {
            clf.linear.weight.value.data_mut()[0] = step as f64 * 0.5;
            let (l, _) = clf.forward(&p, &g, None).unwrap();
            let gap = l.data()[0] - l.data()[1];
            assert!(gap > prev);
            prev = gap;
        }
    }
}
