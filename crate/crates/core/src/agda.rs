//! Attention-guided data augmentation: one randomly chosen attention head
//! per sample selects the region that is blurred (soft drop) or erased
//! (hard drop). Operates on `[0, 1]` pixels before input normalisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::error::{config_err, shape_err, Result};
use crate::nn::resize::resize_plane;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgdaMode {
    #[default]
    Soft,
    Hard,
    Off,
}

impl std::str::FromStr for AgdaMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(AgdaMode::Soft),
            "hard" => Ok(AgdaMode::Hard),
            "off" | "none" => Ok(AgdaMode::Off),
            other => Err(config_err!("unknown AGDA mode `{}`", other)),
        }
    }
}

impl std::fmt::Display for AgdaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AgdaMode::Soft => "soft",
            AgdaMode::Hard => "hard",
            AgdaMode::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgdaConfig {
    pub mode: AgdaMode,
    /// Downsampling factor of the degradation, in `(0, 1]`.
    pub resize_factor: f64,
    /// Gaussian blur standard deviation in pixels of the downsampled image.
    pub sigma: f64,
    /// Hard-drop threshold.
    pub theta_d: f64,
    pub apply_probability: f64,
}

impl Default for AgdaConfig {
    fn default() -> Self {
        AgdaConfig {
            mode: AgdaMode::Soft,
            resize_factor: 0.3,
            sigma: 7.0,
            theta_d: 0.5,
            apply_probability: 1.0,
        }
    }
}

impl AgdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resize_factor > 0.0 && self.resize_factor <= 1.0) {
            return Err(config_err!("agda_resize must lie in (0, 1], got {}", self.resize_factor));
        }
        if !(self.sigma > 0.0) {
            return Err(config_err!("agda_sigma must be positive, got {}", self.sigma));
        }
        if !(self.theta_d > 0.0 && self.theta_d < 1.0) {
            return Err(config_err!("agda_theta must lie in (0, 1), got {}", self.theta_d));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(config_err!("agda_prob must lie in [0, 1], got {}", self.apply_probability));
        }
        Ok(())
    }
}

/// Min-max normalise an `h x w` map into `[0, 1]` and resize it to the image
/// resolution. Constant maps become all zeros.
pub fn normalize_augmentation_map(map: &[f64], h: usize, w: usize, image_h: usize, image_w: usize) -> Vec<f64> {
    debug_assert_eq!(map.len(), h * w);
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = if hi > lo {
        let span = hi - lo;
        map.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; map.len()]
    };
    resize_plane(&scaled, h, w, image_h, image_w)
}

/// Index into `[0, n)` with mirror reflection excluding the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Normalised Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of one plane with reflect padding.
pub fn gaussian_blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + reflect(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Degraded copy of a `(C, H, W)` image: bilinear downsample by the resize
/// factor, Gaussian blur, bilinear upsample back.
pub fn degrade_image(image: &Tensor, cfg: &AgdaConfig) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let hd = (h as f64 * cfg.resize_factor).round() as usize;
    let wd = (w as f64 * cfg.resize_factor).round() as usize;
    if hd < 1 || wd < 1 {
        return Err(config_err!(
            "agda_resize {} shrinks a {}x{} image below one pixel",
            cfg.resize_factor,
            h,
            w
        ));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for plane in image.data().chunks(h * w) {
        let small = resize_plane(plane, h, w, hd, wd);
        let blurred = gaussian_blur_plane(&small, hd, wd, cfg.sigma);
        out.extend(resize_plane(&blurred, hd, wd, h, w));
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn check_map(image: &Tensor, map: &[f64]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if map.len() != h * w {
        return Err(shape_err!(
            "augmentation map has {} entries, image plane has {}",
            map.len(),
            h * w
        ));
    }
    Ok((c, h, w))
}

/// `I' = I * (1 - A*) + I_d * A*`, broadcast over channels.
pub fn soft_drop(image: &Tensor, map: &[f64], degraded: &Tensor) -> Result<Tensor> {
    image.check_same_shape(degraded)?;
    let (_, h, w) = check_map(image, map)?;
    let mut out = image.clone();
    for (plane_i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let dplane = &degraded.data()[plane_i * h * w..(plane_i + 1) * h * w];
        for ((o, &a), &d) in plane.iter_mut().zip(map).zip(dplane) {
            *o = *o * (1.0 - a) + d * a;
        }
    }
    Ok(out)
}

/// `BM = 0` where `A* > theta`, else 1.
pub fn binary_mask(map: &[f64], theta: f64) -> Vec<f64> {
    map.iter().map(|&a| if a > theta { 0.0 } else { 1.0 }).collect()
}

pub fn hard_drop(image: &Tensor, map: &[f64], theta: f64) -> Result<Tensor> {
    let (_, h, w) = check_map(image, map)?;
    let mask = binary_mask(map, theta);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (o, m) in plane.iter_mut().zip(&mask) {
            *o *= m;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub images: Tensor,
    /// Head that guided each sample, `None` if the sample was left intact.
    pub heads: Vec<Option<usize>>,
}

/// Augment a `(B, 3, H, W)` batch guided by its own attention maps.
///
/// Every sample consumes exactly two draws from `rng` (apply decision, head
/// index) whenever the mode is not `Off`, so the stream stays aligned
/// regardless of which samples end up augmented.
pub fn augment_batch(
    images: &Tensor,
    attention: &AttentionMaps,
    cfg: &AgdaConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    let (b, c, h, w) = images.dims4()?;
    if attention.batch() != b {
        return Err(shape_err!(
            "attention batch {} does not match image batch {}",
            attention.batch(),
            b
        ));
    }
    if cfg.mode == AgdaMode::Off {
        return Ok(AugmentedBatch {
            images: images.clone(),
            heads: vec![None; b],
        });
    }
    let m = attention.heads();
    let (ah, aw) = attention.spatial();
    let mut out = images.clone();
    let mut heads = Vec::with_capacity(b);
    for bi in 0..b {
        let u: f64 = rng.random();
        let k = rng.random_range(0..m);
        if u >= cfg.apply_probability {
            heads.push(None);
            continue;
        }
        let map = normalize_augmentation_map(attention.head(bi, k), ah, aw, h, w);
        let img = Tensor::from_vec(&[c, h, w], images.outer(bi).to_vec())?;
        let aug = match cfg.mode {
            AgdaMode::Soft => {
                let degraded = degrade_image(&img, cfg)?;
                soft_drop(&img, &map, &degraded)?
            }
            AgdaMode::Hard => hard_drop(&img, &map, cfg.theta_d)?,
            AgdaMode::Off => unreachable!(),
        };
        out.outer_mut(bi).copy_from_slice(aug.data());
        heads.push(Some(k));
    }
    Ok(AugmentedBatch { images: out, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))
    }

    /// Mean squared response of the 4-neighbour Laplacian over interior pixels.
    fn laplacian_energy(img: &Tensor) -> f64 {
        let (c, h, w) = img.dims3().unwrap();
        let d = img.data();
        let mut acc = 0.0;
        let mut n = 0;
        for ci in 0..c {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let at = |yy: usize, xx: usize| d[(ci * h + yy) * w + xx];
                    let l = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
                    acc += l * l;
                    n += 1;
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn min_max_normalisation_hits_unit_max() {
        let map = [0.0, 1.0, 4.0, 2.0];
        let out = normalize_augmentation_map(&map, 2, 2, 2, 2);
        assert_eq!(out, vec![0.0, 0.25, 1.0, 0.5]);
        let out = normalize_augmentation_map(&[0.0, 2.0, 4.0, 2.0], 2, 2, 2, 2);
        assert_eq!(out, vec![0.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn constant_map_normalises_to_zero() {
        let out = normalize_augmentation_map(&[3.0; 9], 3, 3, 6, 6);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalised_map_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..10.0)).collect();
        let out = normalize_augmentation_map(&map, 5, 5, 17, 13);
        assert_eq!(out.len(), 17 * 13);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn degrading_a_constant_image_is_identity() {
        let img = Tensor::full(&[3, 20, 24], 0.375);
        let out = degrade_image(&img, &AgdaConfig::default()).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-14);
    }

    #[test]
    fn tiny_blur_without_resize_is_near_identity() {
        let img = noise_image(2, 16, 16);
        let cfg = AgdaConfig {
            resize_factor: 1.0,
            sigma: 0.1,
            ..AgdaConfig::default()
        };
        let out = degrade_image(&img, &cfg).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-2);
    }

    #[test]
    fn degradation_removes_high_frequency_energy() {
        let img = noise_image(3, 32, 32);
        let out = degrade_image(&img, &AgdaConfig::default()).unwrap();
        assert!(laplacian_energy(&out) < laplacian_energy(&img));
    }

    #[test]
    fn degradation_below_one_pixel_is_a_config_error() {
        let img = noise_image(4, 2, 2);
        let cfg = AgdaConfig {
            resize_factor: 0.1,
            ..AgdaConfig::default()
        };
        assert!(matches!(degrade_image(&img, &cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn soft_drop_endpoints_and_midpoint() {
        let img = noise_image(5, 4, 4);
        let deg = noise_image(6, 4, 4);
        assert_eq!(soft_drop(&img, &[0.0; 16], &deg).unwrap(), img);
        assert_eq!(soft_drop(&img, &[1.0; 16], &deg).unwrap(), deg);
        let a = Tensor::full(&[3, 2, 2], 0.2);
        let d = Tensor::full(&[3, 2, 2], 0.8);
        let mid = soft_drop(&a, &[0.5; 4], &d).unwrap();
        assert!(mid.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(matches!(soft_drop(&a, &[0.5; 3], &d), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn hard_drop_mask_uses_strict_threshold() {
        assert_eq!(binary_mask(&[0.4, 0.6, 0.5, 0.9], 0.5), vec![1.0, 0.0, 1.0, 0.0]);
        let img = noise_image(7, 2, 2);
        assert_eq!(hard_drop(&img, &[0.0; 4], 0.5).unwrap(), img);
        assert!(hard_drop(&img, &[1.0; 4], 0.5).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(AgdaConfig::default().validate().is_ok());
        for bad in [
            AgdaConfig { resize_factor: 0.0, ..AgdaConfig::default() },
            AgdaConfig { sigma: 0.0, ..AgdaConfig::default() },
            AgdaConfig { theta_d: 1.0, ..AgdaConfig::default() },
            AgdaConfig { apply_probability: 1.5, ..AgdaConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn disabled_mode_returns_input() {
        let images = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f64 / 7.0);
        let att = AttentionMaps::new(Tensor::from_fn(&[2, 3, 4, 4], |i| (i % 5) as f64)).unwrap();
        let cfg = AgdaConfig { mode: AgdaMode::Off, ..AgdaConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_batch(&images, &att, &cfg, &mut rng).unwrap();
        assert_eq!(out.images, images);
        assert!(out.heads.iter().all(Option::is_none));
    }

    #[test]
    fn single_head_soft_mode_is_deterministic_soft_drop() {
        let images = Tensor::from_fn(&[1, 3, 10, 10], |i| (i % 11) as f64 / 11.0);
        let att = AttentionMaps::new(Tensor::from_fn(&[1, 1, 5, 5], |i| (i % 4) as f64)).unwrap();
        let cfg = AgdaConfig { resize_factor: 0.5, sigma: 1.0, ..AgdaConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = augment_batch(&images, &att, &cfg, &mut rng).unwrap();
        let img = Tensor::from_vec(&[3, 10, 10], images.data().to_vec()).unwrap();
        let map = normalize_augmentation_map(att.head(0, 0), 5, 5, 10, 10);
        let want = soft_drop(&img, &map, &degrade_image(&img, &cfg).unwrap()).unwrap();
        assert_eq!(out.images.data(), want.data());
        assert_eq!(out.heads, vec![Some(0)]);
    }
}
