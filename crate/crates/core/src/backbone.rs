//! Backbone adapters exposing named intermediate stages.
//!
//! The framework taps three stages of a backbone: a shallow texture stage,
//! a mid-level attention stage and the final stage. Any network can be used
//! as long as it declares its stages through a [`StageSpec`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, Param, ParamVisitor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInfo {
    pub name: String,
    pub channels: usize,
    /// Spatial downsampling relative to the network input.
    pub downsample: usize,
}

/// Ordered stage declaration of a backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    stages: Vec<StageInfo>,
}

impl StageSpec {
    pub fn new(stages: Vec<StageInfo>) -> Result<Self> {
        if stages.is_empty() {
            return Err(config_err!("a backbone must declare at least one stage"));
        }
        let mut prev = 1;
        for (i, s) in stages.iter().enumerate() {
            if stages[..i].iter().any(|o| o.name == s.name) {
                return Err(config_err!("duplicate stage name `{}`", s.name));
            }
            if s.downsample == 0 || s.channels == 0 {
                return Err(config_err!(
                    "stage `{}` needs positive channels and downsampling",
                    s.name
                ));
            }
            if s.downsample < prev {
                return Err(config_err!(
                    "stage `{}` downsampling {} is smaller than the previous stage's {}",
                    s.name,
                    s.downsample,
                    prev
                ));
            }
            prev = s.downsample;
        }
        Ok(StageSpec { stages })
    }

    /// Shorthand for `[(name, channels, downsample), ...]`.
    pub fn from_triples(triples: &[(&str, usize, usize)]) -> Result<Self> {
        Self::new(
            triples
                .iter()
                .map(|&(name, channels, downsample)| StageInfo {
                    name: name.to_string(),
                    channels,
                    downsample,
                })
                .collect(),
        )
    }

    /// Four-stage desk-scale layout.
    pub fn tiny() -> Self {
        Self::from_triples(&[("s1", 8, 2), ("s2", 16, 4), ("s3", 32, 8), ("s4", 32, 16)])
            .expect("static layout is valid")
    }

    /// Stage layout of EfficientNet-B4: seven main layers L1..L7 plus the
    /// conv head, with their channel widths and output strides.
    pub fn efficientnet_b4() -> Self {
        Self::from_triples(&[
            ("L1", 24, 2),
            ("L2", 32, 4),
            ("L3", 56, 8),
            ("L4", 112, 16),
            ("L5", 160, 16),
            ("L6", 272, 32),
            ("L7", 448, 32),
            ("final", 1792, 32),
        ])
        .expect("static layout is valid")
    }

    pub fn stages(&self) -> &[StageInfo] {
        &self.stages
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|s| s.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| {
                config_err!(
                    "unknown stage `{}` (available: {})",
                    name,
                    self.names().collect::<Vec<_>>().join(", ")
                )
            })
    }

    pub fn stage(&self, name: &str) -> Result<&StageInfo> {
        Ok(&self.stages[self.index_of(name)?])
    }

    pub fn final_stage(&self) -> &StageInfo {
        self.stages.last().expect("non-empty")
    }

    /// Spatial size of a stage for an `h x w` input (ceil division, as for
    /// "same"-padded strided convolutions).
    pub fn spatial_size(&self, name: &str, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.stage(name)?.downsample;
        Ok((h.div_ceil(f), w.div_ceil(f)))
    }
}

/// Per-channel input normalisation owned by the adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply(&self, pixels: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = pixels.dims4()?;
        if c != 3 {
            return Err(shape_err!("expected 3-channel images, got {}", c));
        }
        let hw = h * w;
        let mut out = pixels.clone();
        for bi in 0..b {
            for ci in 0..3 {
                let plane = &mut out.data_mut()[(bi * 3 + ci) * hw..(bi * 3 + ci + 1) * hw];
                for v in plane {
                    *v = (*v - self.mean[ci]) / self.std[ci];
                }
            }
        }
        Ok(out)
    }
}

/// Named activations of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageFeatures {
    features: BTreeMap<String, Tensor>,
}

impl StageFeatures {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.features
            .get(name)
            .ok_or_else(|| config_err!("stage `{}` was not tapped", name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Gradients flowing back into tapped stages.
pub type StageGrads = BTreeMap<String, Tensor>;

/// Adapter interface over convolutional backbones.
///
/// `forward_stages` is read-only with respect to parameters; gradients are
/// accumulated by `backward_stages` from the returned cache.
pub trait Backbone: Send + Sync {
    type Cache;

    fn stage_spec(&self) -> &StageSpec;

    /// Expected `(height, width)` of input images.
    fn input_size(&self) -> (usize, usize);

    fn normalization(&self) -> &Normalization;

    fn forward_stages(&self, images: &Tensor, taps: &[&str]) -> Result<(StageFeatures, Self::Cache)>;

    /// Returns the gradient w.r.t. the (normalised) input if requested.
    fn backward_stages(
        &mut self,
        cache: &Self::Cache,
        grads: &StageGrads,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>>;

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>);
}

/// Plain stack of 3x3 conv + ReLU stages following an arbitrary
/// [`StageSpec`]. Each stage's stride is the ratio of consecutive
/// downsampling factors.
#[derive(Clone, Debug)]
pub struct TinyBackbone {
    spec: StageSpec,
    input_size: (usize, usize),
    normalization: Normalization,
    convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct TinyBackboneCache {
    depth: usize,
    outputs: Vec<Tensor>,
    convs: Vec<ConvCache>,
}

impl TinyBackbone {
    pub fn new(spec: StageSpec, input_size: (usize, usize), bias: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(spec.stages().len());
        let mut in_ch = 3;
        let mut prev = 1;
        for s in spec.stages() {
            if s.downsample % prev != 0 {
                return Err(config_err!(
                    "stage `{}` downsampling {} is not a multiple of {}",
                    s.name,
                    s.downsample,
                    prev
                ));
            }
            let stride = s.downsample / prev;
            convs.push(Conv2d::new(in_ch, s.channels, 3, stride, 1, bias, &mut rng));
            in_ch = s.channels;
            prev = s.downsample;
        }
        Ok(TinyBackbone {
            spec,
            input_size,
            normalization: Normalization::default(),
            convs,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }
}

/// Desk-scale backbone with the [`StageSpec::tiny`] layout.
pub fn make_tiny_backbone(seed: u64, resolution: usize) -> TinyBackbone {
    TinyBackbone::new(StageSpec::tiny(), (resolution, resolution), true, seed)
        .expect("tiny layout is valid")
}

impl Backbone for TinyBackbone {
    type Cache = TinyBackboneCache;

    fn stage_spec(&self) -> &StageSpec {
        &self.spec
    }

    fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    fn forward_stages(&self, images: &Tensor, taps: &[&str]) -> Result<(StageFeatures, Self::Cache)> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || (h, w) != self.input_size {
            return Err(shape_err!(
                "backbone expects 3x{}x{} inputs, got {}x{}x{}",
                self.input_size.0,
                self.input_size.1,
                c,
                h,
                w
            ));
        }
        let mut depth = 0;
        let mut idx = Vec::with_capacity(taps.len());
        for t in taps {
            let i = self.spec.index_of(t)?;
            depth = depth.max(i + 1);
            idx.push(i);
        }
        let mut outputs = Vec::with_capacity(depth);
        let mut caches = Vec::with_capacity(depth);
        let mut x = images.clone();
        for conv in &self.convs[..depth] {
            let (pre, cache) = conv.forward(&x)?;
            x = relu(&pre);
            outputs.push(x.clone());
            caches.push(cache);
        }
        let mut features = BTreeMap::new();
        for (t, i) in taps.iter().zip(idx) {
            features.insert(t.to_string(), outputs[i].clone());
        }
        Ok((
            StageFeatures { features },
            TinyBackboneCache {
                depth,
                outputs,
                convs: caches,
            },
        ))
    }

    fn backward_stages(
        &mut self,
        cache: &Self::Cache,
        grads: &StageGrads,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        for name in grads.keys() {
            let i = self.spec.index_of(name)?;
            if i >= cache.depth {
                return Err(Error::Validation(format!(
                    "gradient for stage `{name}` which was not computed"
                )));
            }
        }
        let mut carry: Option<Tensor> = None;
        for i in (0..cache.depth).rev() {
            let name = &self.spec.stages()[i].name;
            let mut g = match (carry.take(), grads.get(name)) {
                (Some(c), Some(t)) => {
                    let mut c = c;
                    c.add_assign(t)?;
                    c
                }
                (Some(c), None) => c,
                (None, Some(t)) => t.clone(),
                (None, None) => continue,
            };
            g = relu_backward(&cache.outputs[i], &g);
            carry = self.convs[i].backward(&cache.convs[i], &g, i > 0 || need_input_grad)?;
        }
        Ok(if need_input_grad { carry } else { None })
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        let names: Vec<String> = self.spec.names().map(str::to_string).collect();
        for (conv, name) in self.convs.iter_mut().zip(names) {
            conv.visit_params(&format!("{prefix}.{name}"), f);
        }
    }
}

/// Hook for importing externally trained weights: maps a foreign parameter
/// name (e.g. from a converted checkpoint) onto this crate's parameter names.
pub trait WeightNameMapping {
    fn map_name(&self, external: &str) -> Option<String>;
}

/// Copy `arrays` into the backbone's parameters through `mapping`.
/// Returns the number of parameters assigned.
pub fn load_named_weights<B: Backbone>(
    backbone: &mut B,
    arrays: &BTreeMap<String, Tensor>,
    mapping: &dyn WeightNameMapping,
) -> Result<usize> {
    let mut renamed = BTreeMap::new();
    for (k, v) in arrays {
        if let Some(n) = mapping.map_name(k) {
            renamed.insert(n, v);
        }
    }
    let mut assigned = 0;
    let mut failure = None;
    backbone.visit_params("backbone", &mut |name: &str, p: &mut Param| {
        if let Some(v) = renamed.get(name) {
            if v.shape() == p.value.shape() {
                p.value = (*v).clone();
                assigned += 1;
            } else if failure.is_none() {
                failure = Some(shape_err!(
                    "weight `{}` has shape {:?}, expected {:?}",
                    name,
                    v.shape(),
                    p.value.shape()
                ));
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(assigned),
    }
}
