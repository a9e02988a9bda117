//! Texture enhancement: the high-frequency residual of the shallow stage
//! and its densely connected enhancement block.

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, ParamVisitor};
use crate::tensor::Tensor;

/// Local patch means of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeatureMap {
    /// `(B, C, H/p, W/p)` patch means.
    pub down: Tensor,
    /// `(B, C, H, W)` patch means replicated over their patches.
    pub up: Tensor,
    pub patch: usize,
}

/// Average-pool `features` over non-overlapping `p x p` patches.
///
/// `p` must divide both spatial dimensions.
pub fn local_average_pool(features: &Tensor, p: usize) -> Result<PooledFeatureMap> {
    if p == 0 {
        return Err(config_err!("patch_size must be positive"));
    }
    let (b, c, h, w) = features.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(config_err!(
            "patch_size {} does not divide the texture stage size {}x{}",
            p,
            h,
            w
        ));
    }
    let (hd, wd) = (h / p, w / p);
    let inv = 1.0 / (p * p) as f64;
    let mut down = Tensor::zeros(&[b, c, hd, wd]);
    let mut up = Tensor::zeros(&[b, c, h, w]);
    for (plane_idx, plane) in features.data().chunks(h * w).enumerate() {
        let dplane = &mut down.data_mut()[plane_idx * hd * wd..(plane_idx + 1) * hd * wd];
        for y in 0..h {
            for x in 0..w {
                dplane[(y / p) * wd + x / p] += plane[y * w + x];
            }
        }
        dplane.iter_mut().for_each(|v| *v *= inv);
        let uplane = &mut up.data_mut()[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                uplane[y * w + x] = dplane[(y / p) * wd + x / p];
            }
        }
    }
    Ok(PooledFeatureMap { down, up, patch: p })
}

/// `T = f - D_up`.
pub fn texture_residual(features: &Tensor, d_up: &Tensor) -> Result<Tensor> {
    features
        .sub(d_up)
        .map_err(|_| shape_err!("residual needs matching shapes, got {:?} and {:?}", features.shape(), d_up.shape()))
}

/// Gradient of the shallow stage given gradients w.r.t. the residual `T`
/// and the replicated pooled map `D_up`:
/// `df = dT + replicate(patch_mean(dD_up - dT))`.
pub fn texture_input_grad(d_residual: &Tensor, d_up: &Tensor, p: usize) -> Result<Tensor> {
    d_residual.check_same_shape(d_up)?;
    let diff = d_up.sub(d_residual)?;
    let pooled = local_average_pool(&diff, p)?;
    let mut out = d_residual.clone();
    out.add_assign(&pooled.up)?;
    Ok(out)
}

/// Three 3x3 conv layers with dense connectivity: layer `i` sees the channel
/// concatenation of the residual and all earlier layer outputs. The first two
/// layers emit `growth` channels, the last emits the texture channels `C_F`.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<Conv2d>,
    in_channels: usize,
    growth: usize,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    convs: Vec<ConvCache>,
    outputs: Vec<Tensor>,
}

impl DenseBlock {
    pub fn new(in_channels: usize, growth: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            Conv2d::new(in_channels, growth, 3, 1, 1, true, rng),
            Conv2d::new(in_channels + growth, growth, 3, 1, 1, true, rng),
            Conv2d::new(in_channels + 2 * growth, out_channels, 3, 1, 1, true, rng),
        ];
        DenseBlock {
            layers,
            in_channels,
            growth,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers[2].out_channels()
    }

    /// Input channel count of each layer.
    pub fn layer_inputs(&self) -> Vec<usize> {
        self.layers.iter().map(Conv2d::in_channels).collect()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&format!("{prefix}.conv{i}"), f);
        }
    }

    pub fn forward(&self, t: &Tensor) -> Result<(Tensor, DenseCache)> {
        let (_, c, _, _) = t.dims4()?;
        if c != self.in_channels {
            return Err(shape_err!("dense block expects {} channels, got {}", self.in_channels, c));
        }
        let mut convs = Vec::with_capacity(3);
        let mut outputs: Vec<Tensor> = Vec::with_capacity(3);
        for layer in &self.layers {
            let input = {
                let mut parts: Vec<&Tensor> = vec![t];
                parts.extend(outputs.iter());
                Tensor::concat_channels(&parts)?
            };
            let (z, cache) = layer.forward(&input)?;
            convs.push(cache);
            outputs.push(relu(&z));
        }
        let f = outputs[2].clone();
        Ok((f, DenseCache { convs, outputs }))
    }

    pub fn backward(&mut self, cache: &DenseCache, d_out: &Tensor) -> Result<Tensor> {
        let g = self.growth;
        let c = self.in_channels;
        // Pending gradients for T, out0, out1 (out2's comes from d_out).
        let mut d_t: Option<Tensor> = None;
        let mut d_outs: Vec<Option<Tensor>> = vec![None, None, Some(d_out.clone())];
        for i in (0..3).rev() {
            let Some(dy) = d_outs[i].take() else { continue };
            let dz = relu_backward(&cache.outputs[i], &dy);
            let d_in = self.layers[i]
                .backward(&cache.convs[i], &dz, true)?
                .expect("input gradient requested");
            let mut splits = vec![c];
            splits.extend(std::iter::repeat_n(g, i));
            let mut parts = d_in.split_channels(&splits)?.into_iter();
            let dt_part = parts.next().expect("residual part");
            match d_t.as_mut() {
                Some(acc) => acc.add_assign(&dt_part)?,
                None => d_t = Some(dt_part),
            }
            for (j, part) in parts.enumerate() {
                match d_outs[j].as_mut() {
                    Some(acc) => acc.add_assign(&part)?,
                    None => d_outs[j] = Some(part),
                }
            }
        }
        Ok(d_t.expect("layer 0 always contributes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_by_two() -> Tensor {
        Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap()
    }

    #[test]
    fn pools_hand_computed_patch() {
        let pooled = local_average_pool(&two_by_two(), 2).unwrap();
        assert_eq!(pooled.down.data(), &[4.0]);
        assert_eq!(pooled.up.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn residual_of_hand_computed_patch() {
        let x = two_by_two();
        let pooled = local_average_pool(&x, 2).unwrap();
        let t = texture_residual(&x, &pooled.up).unwrap();
        assert_eq!(t.data(), &[-3.0, -1.0, 1.0, 3.0]);
    }

    #[test]
    fn constant_input_has_zero_residual() {
        let x = Tensor::full(&[2, 3, 4, 6], 1.25);
        let pooled = local_average_pool(&x, 2).unwrap();
        assert!(pooled.down.data().iter().all(|&v| v == 1.25));
        assert!(pooled.up.data().iter().all(|&v| v == 1.25));
        let t = texture_residual(&x, &pooled.up).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_patch_reproduces_input() {
        let x = Tensor::from_fn(&[1, 2, 3, 5], |i| (i as f64).sqrt());
        let pooled = local_average_pool(&x, 1).unwrap();
        assert_eq!(pooled.up, x);
    }

    #[test]
    fn invalid_patch_sizes_are_config_errors() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(matches!(local_average_pool(&x, 0), Err(crate::Error::Config(_))));
        assert!(matches!(local_average_pool(&x, 4), Err(crate::Error::Config(_))));
        let y = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(texture_residual(&x, &y), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn dense_block_layer_inputs_grow_by_growth_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = DenseBlock::new(16, 32, 96, &mut rng);
        assert_eq!(block.layer_inputs(), vec![16, 48, 80]);
        assert_eq!(block.out_channels(), 96);
    }

    #[test]
    fn dense_block_maps_zero_to_zero_with_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = DenseBlock::new(4, 3, 5, &mut rng);
        let (f, _) = block.forward(&Tensor::zeros(&[2, 4, 6, 6])).unwrap();
        assert_eq!(f.shape(), &[2, 5, 6, 6]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}
