//! Central finite-difference checks of every hand-written backward pass.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, ril_loss, ril_loss_through_ema, CenterUpdate, FeatureCenters, LossConfig};
use crate::model::MultiAttentionModel;
use crate::nn::{Mode, Param, ParamVisitor};
use crate::pooling::{bap, bap_backward, Classifier};
use crate::tensor::Tensor;
use crate::texture::{local_average_pool, texture_input_grad, texture_residual, DenseBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attention,
    Texture,
    Bap,
    Classifier,
    Ril,
    E2e,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Attention,
        Component::Texture,
        Component::Bap,
        Component::Classifier,
        Component::Ril,
        Component::E2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Attention => "attention",
            Component::Texture => "texture",
            Component::Bap => "bap",
            Component::Classifier => "classifier",
            Component::Ril => "ril",
            Component::E2e => "e2e",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck component '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Entries sampled per checked tensor.
    pub samples_per_tensor: usize,
    /// Parameters sampled across the whole model for the end-to-end check.
    pub e2e_samples: usize,
    /// Scales the analytic gradient of one component by 1.1; a negative
    /// control for the harness itself.
    pub corrupt: Option<Component>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            step: 1e-5,
            samples_per_tensor: 6,
            e2e_samples: 10,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: Component,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Per checked tensor: name and relative error.
    pub tensors: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub results: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.results.iter().all(|r| r.max_rel_error < tol)
    }

    pub fn failing(&self, tol: f64) -> Vec<Component> {
        self.results.iter().filter(|r| !(r.max_rel_error < tol)).map(|r| r.component).collect()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)` over the sampled entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied())).max(1e-12);
    diff / scale
}

/// A differentiable function of named tensors.
trait Subject {
    fn loss(&mut self) -> Result<f64>;
    /// Fills every `Param::grad` with the analytic gradient of `loss`.
    fn analytic(&mut self) -> Result<()>;
    fn visit(&mut self, f: &mut ParamVisitor<'_>);
}

fn with_entry<S: Subject>(s: &mut S, name: &str, idx: usize, op: impl Fn(&mut f64)) {
    let mut op = Some(op);
    s.visit(&mut |n: &str, p: &mut Param| {
        if n == name {
            if let Some(op) = op.take() {
                op(&mut p.value.data_mut()[idx]);
            }
        }
    });
}

fn numeric_grad<S: Subject>(s: &mut S, name: &str, idx: usize, h: f64) -> Result<f64> {
    let mut orig = 0.0;
    s.visit(&mut |n: &str, p: &mut Param| {
        if n == name {
            orig = p.value.data()[idx];
        }
    });
    with_entry(s, name, idx, |v| *v = orig + h);
    let up = s.loss()?;
    with_entry(s, name, idx, |v| *v = orig - h);
    let down = s.loss()?;
    with_entry(s, name, idx, |v| *v = orig);
    Ok((up - down) / (2.0 * h))
}

fn analytic_grads<S: Subject>(s: &mut S, scale: f64) -> Result<Vec<(String, Tensor)>> {
    s.analytic()?;
    let mut grads = Vec::new();
    s.visit(&mut |n: &str, p: &mut Param| grads.push((n.to_string(), p.grad.scale(scale))));
    Ok(grads)
}

/// Checks a few entries of every tensor the subject exposes.
fn check_each_tensor<S: Subject>(
    s: &mut S,
    component: Component,
    opts: &GradcheckOptions,
    rng: &mut impl Rng,
) -> Result<ComponentResult> {
    let scale = if opts.corrupt == Some(component) { 1.1 } else { 1.0 };
    let grads = analytic_grads(s, scale)?;
    let mut tensors = Vec::new();
    let mut entries = 0;
    for (name, g) in &grads {
        let k = opts.samples_per_tensor.min(g.len());
        let idx = rand::seq::index::sample(rng, g.len(), k).into_vec();
        let mut a = Vec::with_capacity(k);
        let mut n = Vec::with_capacity(k);
        for &i in &idx {
            a.push(g.data()[i]);
            n.push(numeric_grad(s, name, i, opts.step)?);
        }
        entries += k;
        tensors.push((name.clone(), relative_error(&a, &n)));
    }
    Ok(finish(component, tensors, entries))
}

/// Checks `count` entries drawn across all tensors as a single group.
fn check_sampled<S: Subject>(
    s: &mut S,
    component: Component,
    opts: &GradcheckOptions,
    count: usize,
    rng: &mut impl Rng,
) -> Result<ComponentResult> {
    let scale = if opts.corrupt == Some(component) { 1.1 } else { 1.0 };
    let grads = analytic_grads(s, scale)?;
    let mut a = Vec::with_capacity(count);
    let mut n = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, g) = &grads[rng.random_range(0..grads.len())];
        let i = rng.random_range(0..g.len());
        a.push(g.data()[i]);
        n.push(numeric_grad(s, name, i, opts.step)?);
    }
    Ok(finish(component, vec![("sampled".into(), relative_error(&a, &n))], count))
}

fn finish(component: Component, tensors: Vec<(String, f64)>, entries: usize) -> ComponentResult {
    ComponentResult {
        component,
        max_rel_error: tensors.iter().map(|t| t.1).fold(0.0, f64::max),
        entries,
        tensors,
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted_sum(r: &Tensor, y: &Tensor) -> f64 {
    r.dot(y).expect("weights match the output shape")
}

struct AttentionSubject {
    block: AttentionBlock,
    x: Param,
    r: Tensor,
}

impl Subject for AttentionSubject {
    fn loss(&mut self) -> Result<f64> {
        let (a, _) = self.block.forward(&self.x.value, Mode::Train)?;
        Ok(weighted_sum(&self.r, a.tensor()))
    }
    fn analytic(&mut self) -> Result<()> {
        self.block.visit_params("", &mut |_, p: &mut Param| p.zero_grad());
        let (_, cache) = self.block.forward(&self.x.value, Mode::Train)?;
        self.x.grad = self.block.backward(&cache, &self.r)?;
        Ok(())
    }
    fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        self.block.visit_params("attention", f);
        f("input", &mut self.x);
    }
}

struct TextureSubject {
    dense: DenseBlock,
    f: Param,
    patch: usize,
    r_tex: Tensor,
    r_up: Tensor,
}

impl Subject for TextureSubject {
    fn loss(&mut self) -> Result<f64> {
        let pooled = local_average_pool(&self.f.value, self.patch)?;
        let t = texture_residual(&self.f.value, &pooled.up)?;
        let (out, _) = self.dense.forward(&t)?;
        Ok(weighted_sum(&self.r_tex, &out) + weighted_sum(&self.r_up, &pooled.up))
    }
    fn analytic(&mut self) -> Result<()> {
        self.dense.visit_params("", &mut |_, p: &mut Param| p.zero_grad());
        let pooled = local_average_pool(&self.f.value, self.patch)?;
        let t = texture_residual(&self.f.value, &pooled.up)?;
        let (_, cache) = self.dense.forward(&t)?;
        let dt = self.dense.backward(&cache, &self.r_tex)?;
        self.f.grad = texture_input_grad(&dt, &self.r_up, self.patch)?;
        Ok(())
    }
    fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        self.dense.visit_params("texture", f);
        f("input", &mut self.f);
    }
}

struct BapSubject {
    a: Param,
    x: Param,
    r: Tensor,
}

impl Subject for BapSubject {
    fn loss(&mut self) -> Result<f64> {
        Ok(weighted_sum(&self.r, &bap(&self.a.value, &self.x.value)?.0))
    }
    fn analytic(&mut self) -> Result<()> {
        let (_, cache) = bap(&self.a.value, &self.x.value)?;
        let (da, dx) = bap_backward(&cache, &self.r)?;
        self.a.grad = da;
        self.x.grad = dx;
        Ok(())
    }
    fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        f("attention", &mut self.a);
        f("features", &mut self.x);
    }
}

struct ClassifierSubject {
    cls: Classifier,
    p: Param,
    g: Param,
    labels: Vec<u8>,
}

impl Subject for ClassifierSubject {
    fn loss(&mut self) -> Result<f64> {
        let (logits, _) = self.cls.forward(&self.p.value, &self.g.value, None)?;
        Ok(cross_entropy(&logits, &self.labels)?.0)
    }
    fn analytic(&mut self) -> Result<()> {
        self.cls.visit_params("", &mut |_, p: &mut Param| p.zero_grad());
        let (logits, cache) = self.cls.forward(&self.p.value, &self.g.value, None)?;
        let (_, dl) = cross_entropy(&logits, &self.labels)?;
        let (dp, dg) = self.cls.backward(&cache, &dl)?;
        self.p.grad = dp;
        self.g.grad = dg;
        Ok(())
    }
    fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        self.cls.visit_params("classifier", f);
        f("texture_matrix", &mut self.p);
        f("global_feature", &mut self.g);
    }
}

/// Loss with fixed centers plus the loss evaluated at centers updated from
/// the same batch, so both gradient routes are exercised.
struct RilSubject {
    v: Param,
    centers: FeatureCenters,
    labels: Vec<u8>,
    cfg: LossConfig,
}

impl Subject for RilSubject {
    fn loss(&mut self) -> Result<f64> {
        let fixed = ril_loss(&self.v.value, &self.centers.centers, &self.labels, &self.cfg)?;
        let (ema, _) = ril_loss_through_ema(&self.v.value, &self.centers, &self.labels, &self.cfg, CenterUpdate::All)?;
        Ok(fixed.loss + ema.loss)
    }
    fn analytic(&mut self) -> Result<()> {
        let fixed = ril_loss(&self.v.value, &self.centers.centers, &self.labels, &self.cfg)?;
        let (ema, _) = ril_loss_through_ema(&self.v.value, &self.centers, &self.labels, &self.cfg, CenterUpdate::All)?;
        let mut g = fixed.d_v;
        g.add_assign(&ema.d_v)?;
        self.v.grad = g;
        Ok(())
    }
    fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        f("semantic_vectors", &mut self.v);
    }
}

/// Total loss `lambda1 * CE + lambda2 * RIL` of the whole model on one
/// batch, with the centers held fixed.
struct EndToEndSubject {
    model: MultiAttentionModel,
    images: Tensor,
    labels: Vec<u8>,
    centers: Tensor,
    cfg: LossConfig,
}

impl Subject for EndToEndSubject {
    fn loss(&mut self) -> Result<f64> {
        let (out, _) = self.model.forward_full(&self.images, Mode::Train, None)?;
        let (ce, _) = cross_entropy(&out.logits, &self.labels)?;
        let r = ril_loss(&out.v, &self.centers, &self.labels, &self.cfg)?;
        Ok(self.cfg.lambda1 * ce + self.cfg.lambda2 * r.loss)
    }
    fn analytic(&mut self) -> Result<()> {
        self.model.zero_grad();
        let (out, cache) = self.model.forward_full(&self.images, Mode::Train, None)?;
        let (_, dl) = cross_entropy(&out.logits, &self.labels)?;
        let r = ril_loss(&out.v, &self.centers, &self.labels, &self.cfg)?;
        self.model.backward(&cache, &dl.scale(self.cfg.lambda1), Some(&r.d_v.scale(self.cfg.lambda2)))
    }
    fn visit(&mut self, f: &mut ParamVisitor<'_>) {
        self.model.visit_params(f);
    }
}

fn run_component(c: Component, cfg: &TrainConfig, opts: &GradcheckOptions) -> Result<ComponentResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (c as u64) << 32);
    let m = cfg.num_attentions;
    match c {
        Component::Attention => {
            let mut s = AttentionSubject {
                block: AttentionBlock::new(12, m, &mut rng)?,
                x: Param::new(uniform(&[3, 12, 4, 4], -1.0, 1.0, &mut rng)),
                r: uniform(&[3, m, 4, 4], -1.0, 1.0, &mut rng),
            };
            check_each_tensor(&mut s, c, opts, &mut rng)
        }
        Component::Texture => {
            let (ch, hw) = (6, 8);
            let dense = DenseBlock::new(ch, cfg.growth_rate.min(6), cfg.texture_channels.min(8), &mut rng);
            let out = dense.out_channels();
            let mut s = TextureSubject {
                dense,
                f: Param::new(uniform(&[2, ch, hw, hw], -1.0, 1.0, &mut rng)),
                patch: cfg.patch_size,
                r_tex: uniform(&[2, out, hw, hw], -1.0, 1.0, &mut rng),
                r_up: uniform(&[2, ch, hw, hw], -1.0, 1.0, &mut rng),
            };
            check_each_tensor(&mut s, c, opts, &mut rng)
        }
        Component::Bap => {
            let mut s = BapSubject {
                a: Param::new(uniform(&[2, m, 5, 5], 0.0, 1.0, &mut rng)),
                x: Param::new(uniform(&[2, 7, 5, 5], -1.0, 1.0, &mut rng)),
                r: uniform(&[2, m, 7], -1.0, 1.0, &mut rng),
            };
            check_each_tensor(&mut s, c, opts, &mut rng)
        }
        Component::Classifier => {
            let mut s = ClassifierSubject {
                cls: Classifier::new(m, 5, 6, &mut rng),
                p: Param::new(uniform(&[4, m, 5], -1.0, 1.0, &mut rng)),
                g: Param::new(uniform(&[4, 6], -1.0, 1.0, &mut rng)),
                labels: vec![0, 1, 1, 0],
            };
            check_each_tensor(&mut s, c, opts, &mut rng)
        }
        Component::Ril => {
            let n = 6;
            let mut centers = FeatureCenters::new(m, n, 0.3, 1.0)?;
            centers.centers = uniform(&[m, n], -0.15, 0.15, &mut rng);
            let mut s = RilSubject {
                v: Param::new(uniform(&[4, m, n], -0.5, 0.5, &mut rng)),
                centers,
                labels: vec![0, 1, 0, 1],
                cfg: cfg.loss.clone(),
            };
            check_each_tensor(&mut s, c, opts, &mut rng)
        }
        Component::E2e => {
            let mut e2e_cfg = cfg.clone();
            e2e_cfg.dropout = 0.0;
            let model = MultiAttentionModel::new(&e2e_cfg)?;
            let n = model.semantic_dim();
            let r = e2e_cfg.resolution;
            let mut s = EndToEndSubject {
                model,
                images: uniform(&[4, 3, r, r], 0.0, 1.0, &mut rng),
                labels: vec![0, 1, 1, 0],
                centers: uniform(&[m, n], -0.05, 0.05, &mut rng),
                cfg: e2e_cfg.loss.clone(),
            };
            check_sampled(&mut s, c, opts, opts.e2e_samples, &mut rng)
        }
    }
}

/// Runs the requested components; the end-to-end check uses the model the
/// configuration describes.
pub fn run_gradcheck(cfg: &TrainConfig, components: &[Component], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let results = components
        .iter()
        .map(|&c| run_component(c, cfg, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = relative_error(&[1.0, 0.0], &[1.1, 0.0]);
        assert!((e - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn unit_components_pass_on_toy_config() {
        let cfg = TrainConfig::toy();
        let comps = [Component::Attention, Component::Texture, Component::Bap, Component::Classifier, Component::Ril];
        let r = run_gradcheck(&cfg, &comps, &GradcheckOptions::default()).unwrap();
        for res in &r.results {
            assert!(res.max_rel_error < 1e-4, "{} {:?}", res.component, res.tensors);
        }
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let cfg = TrainConfig::toy();
        let opts = GradcheckOptions {
            corrupt: Some(Component::Bap),
            ..Default::default()
        };
        let r = run_gradcheck(&cfg, &[Component::Bap, Component::Classifier], &opts).unwrap();
        assert_eq!(r.failing(1e-3), vec![Component::Bap]);
    }
}
