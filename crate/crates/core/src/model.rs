//! The composed detector: backbone taps, attention heads, texture path,
//! bidirectional attention pooling and the classifier.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    resize_attention, splice_attention, splice_attention_backward, AttentionBlock, AttentionCache,
    AttentionMaps, SpliceCache, SpliceMode,
};
use crate::backbone::{Backbone, TinyBackbone};
use crate::config::{AuxLoss, TrainConfig};
use crate::error::{config_err, Result};
use crate::losses::AmsHead;
use crate::nn::{resize, BufferVisitor, Mode, Param, ParamVisitor};
use crate::pooling::{bap, bap_backward, BapCache, Classifier, ClassifierCache};
use crate::tensor::Tensor;
use crate::texture::{local_average_pool, texture_input_grad, texture_residual, DenseBlock, DenseCache};

pub struct MultiAttentionModel<B: Backbone = TinyBackbone> {
    pub backbone: B,
    pub attention: AttentionBlock,
    pub texture: DenseBlock,
    pub classifier: Classifier,
    pub ams: Option<AmsHead>,
    sl_t: String,
    sl_a: String,
    final_stage: String,
    patch: usize,
    splice: SpliceMode,
}

impl<B: Backbone + Clone> Clone for MultiAttentionModel<B> {
    fn clone(&self) -> Self {
        MultiAttentionModel {
            backbone: self.backbone.clone(),
            attention: self.attention.clone(),
            texture: self.texture.clone(),
            classifier: self.classifier.clone(),
            ams: self.ams.clone(),
            sl_t: self.sl_t.clone(),
            sl_a: self.sl_a.clone(),
            final_stage: self.final_stage.clone(),
            patch: self.patch,
            splice: self.splice,
        }
    }
}

/// Everything the losses and the augmentation need from one pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `(B, 2)`; index 1 is "fake".
    pub logits: Tensor,
    /// Semantic vectors `(B, M, N)`.
    pub v: Tensor,
    /// Texture feature matrix `(B, M, C_F)`.
    pub p: Tensor,
    /// Global deep feature `(B, C_last)`.
    pub g: Tensor,
    pub attention: AttentionMaps,
}

pub struct ModelCache<C> {
    backbone: C,
    attention: AttentionCache,
    attention_hw: (usize, usize),
    texture: DenseCache,
    texture_hw: (usize, usize),
    p: BapCache,
    v: BapCache,
    splice: SpliceCache,
    final_hw: (usize, usize),
    g: BapCache,
    classifier: ClassifierCache,
}

/// Builds the backbone named in the config.
pub fn build_backbone(cfg: &TrainConfig) -> Result<TinyBackbone> {
    let spec = cfg.stage_spec()?;
    TinyBackbone::new(spec, (cfg.resolution, cfg.resolution), true, cfg.seed)
}

impl MultiAttentionModel<TinyBackbone> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Self::with_backbone(build_backbone(cfg)?, cfg)
    }
}

impl<B: Backbone> MultiAttentionModel<B> {
    pub fn with_backbone(backbone: B, cfg: &TrainConfig) -> Result<Self> {
        let spec = backbone.stage_spec().clone();
        let t = spec.stage(&cfg.sl_t)?.clone();
        let a = spec.stage(&cfg.sl_a)?.clone();
        let last = spec.final_stage().clone();
        let (h, w) = backbone.input_size();
        let (hs, ws) = spec.spatial_size(&t.name, h, w)?;
        if hs % cfg.patch_size != 0 || ws % cfg.patch_size != 0 {
            return Err(config_err!(
                "patch_size {} does not divide the {} stage size {}x{}",
                cfg.patch_size,
                t.name,
                hs,
                ws
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_6464_6865_6164);
        let attention = AttentionBlock::new(a.channels, cfg.num_attentions, &mut rng)?;
        let texture = DenseBlock::new(t.channels, cfg.growth_rate, cfg.texture_channels, &mut rng);
        let mut classifier = Classifier::new(cfg.num_attentions, cfg.texture_channels, last.channels, &mut rng);
        classifier.dropout = cfg.dropout;
        let ams = (cfg.aux_loss == AuxLoss::Ams).then(|| AmsHead::new(cfg.num_attentions * t.channels, &mut rng));
        Ok(MultiAttentionModel {
            backbone,
            attention,
            texture,
            classifier,
            ams,
            sl_t: t.name,
            sl_a: a.name,
            final_stage: last.name,
            patch: cfg.patch_size,
            splice: cfg.splice,
        })
    }

    pub fn heads(&self) -> usize {
        self.attention.heads()
    }

    /// Channel count `N` of the semantic vectors.
    pub fn semantic_dim(&self) -> usize {
        self.backbone
            .stage_spec()
            .stage(&self.sl_t)
            .map(|s| s.channels)
            .expect("validated at construction")
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.backbone.visit_params("backbone", f);
        self.attention.visit_params("attention", f);
        self.texture.visit_params("texture", f);
        self.classifier.visit_params("classifier", f);
        if let Some(ams) = self.ams.as_mut() {
            ams.visit_params("ams", f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<'_>) {
        self.attention.visit_buffers("attention", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p: &mut Param| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p: &mut Param| n += p.value.len());
        n
    }

    /// Full forward pass on `[0, 1]` pixel images `(B, 3, H, W)`.
    ///
    /// Batch norm uses batch statistics (and updates its running averages)
    /// in train mode. `rng` feeds classifier dropout in train mode.
    pub fn forward_full(
        &mut self,
        images: &Tensor,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(ModelOutput, ModelCache<B::Cache>)> {
        let x = self.backbone.normalization().apply(images)?;
        let mut taps: Vec<&str> = vec![self.sl_t.as_str()];
        for s in [self.sl_a.as_str(), self.final_stage.as_str()] {
            if !taps.contains(&s) {
                taps.push(s);
            }
        }
        let (feats, bcache) = self.backbone.forward_stages(&x, &taps)?;
        let f_t = feats.get(&self.sl_t)?;
        let f_a = feats.get(&self.sl_a)?;
        let f_last = feats.get(&self.final_stage)?;

        let (attention, acache) = self.attention.forward(f_a, mode)?;
        let attention_hw = attention.spatial();

        let pooled = local_average_pool(f_t, self.patch)?;
        let residual = texture_residual(f_t, &pooled.up)?;
        let (tex, dcache) = self.texture.forward(&residual)?;
        let (_, _, hs, ws) = tex.dims4()?;
        let a_t = resize_attention(&attention, hs, ws)?;
        let (p, pcache) = bap(a_t.tensor(), &tex)?;
        let (v, vcache) = bap(a_t.tensor(), &pooled.up)?;

        let (spliced, scache) = splice_attention(&attention, self.splice);
        let (b, c_last, hf, wf) = f_last.dims4()?;
        let spliced = resize::resize(&spliced, hf, wf)?;
        let (g3, gcache) = bap(&spliced, f_last)?;
        let g = g3.reshape(&[b, c_last])?;

        let rng = if mode == Mode::Train { rng } else { None };
        let (logits, ccache) = self.classifier.forward(&p, &g, rng)?;
        let cache = ModelCache {
            backbone: bcache,
            attention: acache,
            attention_hw,
            texture: dcache,
            texture_hw: (hs, ws),
            p: pcache,
            v: vcache,
            splice: scache,
            final_hw: (hf, wf),
            g: gcache,
            classifier: ccache,
        };
        Ok((
            ModelOutput {
                logits,
                v,
                p,
                g,
                attention,
            },
            cache,
        ))
    }

    /// Accumulate parameter gradients given gradients w.r.t. the logits and
    /// (optionally) the semantic vectors.
    pub fn backward(&mut self, cache: &ModelCache<B::Cache>, d_logits: &Tensor, d_v: Option<&Tensor>) -> Result<()> {
        let (ha, wa) = cache.attention_hw;
        let (dp, dg) = self.classifier.backward(&cache.classifier, d_logits)?;
        let (b, c_last) = dg.dims2()?;
        let (d_spliced, d_last) = bap_backward(&cache.g, &dg.reshape(&[b, 1, c_last])?)?;
        debug_assert_eq!(d_spliced.shape()[2..], [cache.final_hw.0, cache.final_hw.1]);
        let d_spliced = resize::resize_backward(&d_spliced, ha, wa)?;
        let mut d_att = splice_attention_backward(&cache.splice, &d_spliced)?;

        let (mut d_at, d_tex) = bap_backward(&cache.p, &dp)?;
        let d_up = match d_v {
            Some(d_v) => {
                let (d_at_v, d_up) = bap_backward(&cache.v, d_v)?;
                d_at.add_assign(&d_at_v)?;
                d_up
            }
            None => Tensor::zeros(&cache.p_features_shape()),
        };
        debug_assert_eq!(d_at.shape()[2..], [cache.texture_hw.0, cache.texture_hw.1]);
        d_att.add_assign(&resize::resize_backward(&d_at, ha, wa)?)?;

        let d_residual = self.texture.backward(&cache.texture, &d_tex)?;
        let d_ft = texture_input_grad(&d_residual, &d_up, self.patch)?;
        let d_fa = self.attention.backward(&cache.attention, &d_att)?;

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, g) in [
            (&self.sl_t, d_ft),
            (&self.sl_a, d_fa),
            (&self.final_stage, d_last),
        ] {
            match grads.get_mut(name.as_str()) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    grads.insert(name.clone(), g);
                }
            }
        }
        self.backbone.backward_stages(&cache.backbone, &grads, false)?;
        Ok(())
    }
}

impl<C> ModelCache<C> {
    /// Shape of the pooled texture-stage map the semantic vectors come from.
    fn p_features_shape(&self) -> Vec<usize> {
        self.v.features_shape().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shapes_for_tiny_backbone() {
        let mut cfg = TrainConfig::toy();
        cfg.num_attentions = 3;
        let mut model = MultiAttentionModel::new(&cfg).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 31) % 17) as f64 / 17.0);
        let (out, _) = model.forward_full(&x, Mode::Train, None).unwrap();
        assert_eq!(out.logits.shape(), &[2, 2]);
        assert_eq!(out.v.shape(), &[2, 3, 16]);
        assert_eq!(out.p.shape(), &[2, 3, cfg.texture_channels]);
        assert_eq!(out.attention.tensor().shape(), &[2, 3, 4, 4]);
    }

    #[test]
    fn duplicated_sample_gives_duplicated_logits_in_eval_mode() {
        let cfg = TrainConfig::toy();
        let mut model = MultiAttentionModel::new(&cfg).unwrap();
        let one = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 7) % 13) as f64 / 13.0);
        let other = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 5) % 11) as f64 / 11.0);
        let mut data = one.data().to_vec();
        data.extend_from_slice(other.data());
        data.extend_from_slice(one.data());
        let batch = Tensor::from_vec(&[3, 3, 32, 32], data).unwrap();
        let (out, _) = model.forward_full(&batch, Mode::Eval, None).unwrap();
        assert_eq!(out.logits.outer(0), out.logits.outer(2));
    }
}
