//! Regional independence loss, feature-center maintenance, cross entropy
//! and the additive-margin softmax baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Param, ParamVisitor};
use crate::pooling::NORM_EPS;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub m_in_real: f64,
    pub m_in_fake: f64,
    pub m_out: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            m_in_real: 0.05,
            m_in_fake: 0.1,
            m_out: 0.2,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("m_in_real", self.m_in_real),
            ("m_in_fake", self.m_in_fake),
            ("m_out", self.m_out),
        ] {
            if !(v >= 0.0) {
                return Err(config_err!("{} must be nonnegative, got {}", k, v));
            }
        }
        Ok(())
    }

    /// Intra-class margin for a label (0 real, 1 fake).
    pub fn intra_margin(&self, label: u8) -> f64 {
        if label == 0 {
            self.m_in_real
        } else {
            self.m_in_fake
        }
    }
}

pub fn validate_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&y| y > 1) {
        Some(y) => Err(Error::Validation(format!("label {y} is not in {{0, 1}}"))),
        None => Ok(()),
    }
}

/// Which samples enter the batch mean of the center update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterUpdate {
    #[default]
    All,
    RealOnly,
}

/// How the regional independence loss treats the feature centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterGrad {
    /// Centers are constants inside the loss.
    #[default]
    Detached,
    /// The loss is evaluated at the freshly updated centers and gradients
    /// flow through the moving-average relation back onto the batch.
    ThroughEma,
}

/// Per-head moving-average centers of the semantic vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCenters {
    pub centers: Tensor,
    pub alpha: f64,
    pub alpha_decay: f64,
}

impl FeatureCenters {
    /// Zero-initialised `(heads, dim)` centers. `alpha = 0` freezes them.
    pub fn new(heads: usize, dim: usize, alpha: f64, alpha_decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(config_err!("alpha must lie in [0, 1], got {}", alpha));
        }
        if !(alpha_decay > 0.0 && alpha_decay <= 1.0) {
            return Err(config_err!("alpha_decay must lie in (0, 1], got {}", alpha_decay));
        }
        Ok(FeatureCenters {
            centers: Tensor::zeros(&[heads, dim]),
            alpha,
            alpha_decay,
        })
    }

    pub fn heads(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn end_epoch(&mut self) {
        self.alpha *= self.alpha_decay;
    }

    fn check(&self, v: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, m, n) = v.dims3()?;
        if (m, n) != (self.heads(), self.dim()) {
            return Err(shape_err!(
                "semantic vectors are {}x{}, centers are {}x{}",
                m,
                n,
                self.heads(),
                self.dim()
            ));
        }
        Ok((b, m, n))
    }
}

/// Mean over the selected samples of `V`; `None` if no sample qualifies.
fn selected_mean(v: &Tensor, labels: &[u8], mode: CenterUpdate) -> Option<(Tensor, usize)> {
    let b = v.shape()[0];
    let mut mean = Tensor::zeros(&v.shape()[1..]);
    let mut count = 0;
    for i in 0..b {
        if mode == CenterUpdate::RealOnly && labels[i] != 0 {
            continue;
        }
        count += 1;
        for (m, x) in mean.data_mut().iter_mut().zip(v.outer(i)) {
            *m += x;
        }
    }
    if count == 0 {
        return None;
    }
    let inv = 1.0 / count as f64;
    mean.data_mut().iter_mut().for_each(|m| *m *= inv);
    Some((mean, count))
}

/// `c <- c - alpha * (c - mean_i V^i)` over all samples.
pub fn update_centers(centers: &FeatureCenters, v: &Tensor) -> Result<FeatureCenters> {
    let labels = vec![0u8; v.shape().first().copied().unwrap_or(0)];
    update_centers_with(centers, v, &labels, CenterUpdate::All)
}

pub fn update_centers_with(
    centers: &FeatureCenters,
    v: &Tensor,
    labels: &[u8],
    mode: CenterUpdate,
) -> Result<FeatureCenters> {
    let (b, _, _) = centers.check(v)?;
    if b == 0 {
        return Err(Error::Validation("center update needs a nonempty batch".into()));
    }
    if labels.len() != b {
        return Err(shape_err!("{} labels for a batch of {}", labels.len(), b));
    }
    let mut next = centers.clone();
    if let Some((mean, _)) = selected_mean(v, labels, mode) {
        let a = centers.alpha;
        for (c, m) in next.centers.data_mut().iter_mut().zip(mean.data()) {
            *c -= a * (*c - m);
        }
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RilOutput {
    pub loss: f64,
    pub intra: f64,
    pub inter: f64,
    /// Gradient w.r.t. the semantic vectors, `(B, M, N)`.
    pub d_v: Tensor,
}

/// Returns the loss pieces plus the gradient w.r.t. `centers`.
fn ril_terms(
    v: &Tensor,
    centers: &Tensor,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<(RilOutput, Tensor)> {
    let (b, m, n) = v.dims3()?;
    if centers.shape() != [m, n] {
        return Err(shape_err!(
            "centers have shape {:?}, expected [{}, {}]",
            centers.shape(),
            m,
            n
        ));
    }
    if labels.len() != b {
        return Err(shape_err!("{} labels for a batch of {}", labels.len(), b));
    }
    validate_labels(labels)?;
    let c = centers.data();
    let mut d_v = Tensor::zeros(v.shape());
    let mut d_c = Tensor::zeros(centers.shape());
    let mut intra = 0.0;
    for i in 0..b {
        let margin = cfg.intra_margin(labels[i]);
        for j in 0..m {
            let vij = &v.outer(i)[j * n..(j + 1) * n];
            let cj = &c[j * n..(j + 1) * n];
            let dist2: f64 = vij.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
            let h = dist2 - margin;
            if h > 0.0 {
                intra += h;
                let dv = &mut d_v.outer_mut(i)[j * n..(j + 1) * n];
                let dc = &mut d_c.data_mut()[j * n..(j + 1) * n];
                for k in 0..n {
                    let g = 2.0 * (vij[k] - cj[k]);
                    dv[k] += g;
                    dc[k] -= g;
                }
            }
        }
    }
    let mut inter = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let ci = &c[i * n..(i + 1) * n];
            let cj = &c[j * n..(j + 1) * n];
            let dist2: f64 = ci.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
            let h = cfg.m_out - dist2;
            if h > 0.0 {
                inter += h;
                for k in 0..n {
                    let g = 2.0 * (ci[k] - cj[k]);
                    d_c.data_mut()[i * n + k] -= g;
                    d_c.data_mut()[j * n + k] += g;
                }
            }
        }
    }
    Ok((
        RilOutput {
            loss: intra + inter,
            intra,
            inter,
            d_v,
        },
        d_c,
    ))
}

/// Regional independence loss with the centers held constant:
/// `sum_{i,j} max(|V_j^i - c_j|^2 - m_in(y_i), 0)
///  + sum_{i != j} max(m_out - |c_i - c_j|^2, 0)`,
/// the second sum running over ordered head pairs.
pub fn ril_loss(v: &Tensor, centers: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<RilOutput> {
    ril_terms(v, centers, labels, cfg).map(|(out, _)| out)
}

/// Updates the centers with this batch, evaluates the loss at the updated
/// centers and routes the center gradient back onto `V` through the
/// moving-average relation (`dc/dV^i = alpha / B`).
pub fn ril_loss_through_ema(
    v: &Tensor,
    centers: &FeatureCenters,
    labels: &[u8],
    cfg: &LossConfig,
    mode: CenterUpdate,
) -> Result<(RilOutput, FeatureCenters)> {
    let next = update_centers_with(centers, v, labels, mode)?;
    let (mut out, d_c) = ril_terms(v, &next.centers, labels, cfg)?;
    if let Some((_, count)) = selected_mean(v, labels, mode) {
        let k = centers.alpha / count as f64;
        for (i, &y) in labels.iter().enumerate() {
            if mode == CenterUpdate::RealOnly && y != 0 {
                continue;
            }
            for (d, g) in out.d_v.outer_mut(i).iter_mut().zip(d_c.data()) {
                *d += k * g;
            }
        }
    }
    Ok((out, next))
}

/// Mean negative log-likelihood of two-way logits and its gradient.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(shape_err!("{} labels for {} logit rows", labels.len(), b));
    }
    if b == 0 {
        return Err(Error::Validation("cross entropy of an empty batch".into()));
    }
    validate_labels(labels)?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[b, k]);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.outer(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        loss += lse - row[y as usize];
        for (j, g) in grad.outer_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == y as usize { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// `lambda1 * ce + lambda2 * aux`.
pub fn total_loss(ce: f64, aux: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * ce + cfg.lambda2 * aux
}

/// Additive-margin softmax over the flattened semantic vectors.
#[derive(Clone, Debug)]
pub struct AmsHead {
    pub weight: Param,
    pub margin: f64,
    pub scale: f64,
}

impl AmsHead {
    pub const DEFAULT_MARGIN: f64 = 0.2;
    pub const DEFAULT_SCALE: f64 = 30.0;

    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let w = Tensor::from_fn(&[2, dim], |_| rng.random_range(-1.0..1.0));
        AmsHead {
            weight: Param::new(w),
            margin: Self::DEFAULT_MARGIN,
            scale: Self::DEFAULT_SCALE,
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
    }

    /// Loss and gradient w.r.t. `v`; the weight gradient is accumulated.
    pub fn loss_and_backward(&mut self, v: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
        let (b, m, n) = v.dims3()?;
        let d = m * n;
        if self.weight.value.shape() != [2, d] {
            return Err(shape_err!("AMS head expects {} features, got {}", self.weight.value.shape()[1], d));
        }
        if labels.len() != b {
            return Err(shape_err!("{} labels for a batch of {}", labels.len(), b));
        }
        validate_labels(labels)?;
        let unit = |x: &[f64]| -> (Vec<f64>, f64) {
            let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dnm = nrm.max(NORM_EPS);
            (x.iter().map(|v| v / dnm).collect(), nrm)
        };
        let w_units: Vec<(Vec<f64>, f64)> = (0..2).map(|k| unit(self.weight.value.outer(k))).collect();
        let mut logits = Tensor::zeros(&[b, 2]);
        let mut x_units = Vec::with_capacity(b);
        for i in 0..b {
            let (xu, xn) = unit(v.outer(i));
            for k in 0..2 {
                let cos: f64 = xu.iter().zip(&w_units[k].0).map(|(a, b)| a * b).sum();
                let margin = if k == labels[i] as usize { self.margin } else { 0.0 };
                logits.outer_mut(i)[k] = self.scale * (cos - margin);
            }
            x_units.push((xu, xn));
        }
        let (loss, d_logits) = cross_entropy(&logits, labels)?;
        let mut d_xu = vec![vec![0.0; d]; b];
        let mut d_wu = vec![vec![0.0; d]; 2];
        for i in 0..b {
            for k in 0..2 {
                let dcos = self.scale * d_logits.outer(i)[k];
                for p in 0..d {
                    d_xu[i][p] += dcos * w_units[k].0[p];
                    d_wu[k][p] += dcos * x_units[i].0[p];
                }
            }
        }
        let unit_backward = |u: &[f64], n: f64, g: &[f64]| -> Vec<f64> {
            if n > NORM_EPS {
                let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
                u.iter().zip(g).map(|(uv, gv)| (gv - uv * proj) / n).collect()
            } else {
                g.iter().map(|gv| gv / NORM_EPS).collect()
            }
        };
        let mut d_v = Tensor::zeros(v.shape());
        for i in 0..b {
            let g = unit_backward(&x_units[i].0, x_units[i].1, &d_xu[i]);
            d_v.outer_mut(i).copy_from_slice(&g);
        }
        for k in 0..2 {
            let g = unit_backward(&w_units[k].0, w_units[k].1, &d_wu[k]);
            for (acc, gv) in self.weight.grad.outer_mut(k).iter_mut().zip(g) {
                *acc += gv;
            }
        }
        Ok((loss, d_v))
    }
}
