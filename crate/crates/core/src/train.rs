//! Two-pass training loop: a clean pass, then a pass over images augmented
//! under the guidance of the clean pass's attention maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agda::{augment_batch, AgdaMode};
use crate::backbone::{Backbone, TinyBackbone};
use crate::config::{AgdaPass, AuxLoss, TrainConfig};
use crate::data::{oversample_indices, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, ril_loss, ril_loss_through_ema, total_loss, update_centers_with, CenterGrad, FeatureCenters,
};
use crate::metrics::{accuracy, evaluate, fake_probabilities, predict, EvalReport};
use crate::model::{ModelOutput, MultiAttentionModel};
use crate::nn::{optim::Adam, Mode};
use crate::tensor::Tensor;

/// RNG stream ids; each step and epoch owns an independent stream.
const STEP_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub step_in_epoch: usize,
    pub global_step: u64,
}

/// Loss components of one step. `aug_*` are zero when no second pass ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub ce: f64,
    pub aux: f64,
    pub aug_ce: f64,
    pub aug_aux: f64,
    /// Pass-1 accuracy on the batch.
    pub accuracy: f64,
    pub augmented: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_aux: f64,
    pub train_accuracy: f64,
    pub alpha: f64,
    pub val: Option<EvalReport>,
}

pub struct Trainer<B: Backbone = TinyBackbone> {
    pub model: MultiAttentionModel<B>,
    pub centers: FeatureCenters,
    pub optimizer: Adam,
    pub cfg: TrainConfig,
    pub state: TrainState,
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 32);
    rng
}

impl Trainer<TinyBackbone> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MultiAttentionModel::new(&cfg)?;
        Self::with_model(model, cfg)
    }
}

impl<B: Backbone> Trainer<B> {
    pub fn with_model(model: MultiAttentionModel<B>, cfg: TrainConfig) -> Result<Self> {
        let centers = FeatureCenters::new(model.heads(), model.semantic_dim(), cfg.alpha, cfg.alpha_decay)?;
        Ok(Trainer {
            model,
            centers,
            optimizer: Adam::new(cfg.optimizer.clone()),
            cfg,
            state: TrainState::default(),
        })
    }

    /// Shuffled sample order of an epoch, with real frames oversampled.
    pub fn epoch_order(&self, labels: &[u8], epoch: usize) -> Vec<usize> {
        let mut order = oversample_indices(labels, self.cfg.real_oversample);
        order.shuffle(&mut stream_rng(self.cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order
    }

    /// Batches of an epoch. A trailing partial batch is dropped unless it is
    /// the only one.
    pub fn epoch_batches(&self, labels: &[u8], epoch: usize) -> Vec<Vec<usize>> {
        let order = self.epoch_order(labels, epoch);
        let bs = self.cfg.batch_size;
        if order.len() <= bs {
            return vec![order];
        }
        order.chunks_exact(bs).map(<[usize]>::to_vec).collect()
    }

    /// Auxiliary loss on one pass. Returns the loss and `dL/dV` (unscaled).
    fn aux_term(
        &mut self,
        out: &ModelOutput,
        labels: &[u8],
        first_pass: bool,
        next_centers: &mut Option<FeatureCenters>,
    ) -> Result<(f64, Option<Tensor>)> {
        match self.cfg.aux_loss {
            AuxLoss::None => Ok((0.0, None)),
            AuxLoss::Ams => {
                let head = self.model.ams.as_mut().ok_or_else(|| Error::Config("AMS head missing".into()))?;
                let (l, dv) = head.loss_and_backward(&out.v, labels)?;
                Ok((l, Some(dv)))
            }
            AuxLoss::Ril => {
                if first_pass {
                    if self.cfg.center_grad == CenterGrad::ThroughEma {
                        let (r, next) =
                            ril_loss_through_ema(&out.v, &self.centers, labels, &self.cfg.loss, self.cfg.center_update)?;
                        *next_centers = Some(next);
                        return Ok((r.loss, Some(r.d_v)));
                    }
                    *next_centers = Some(update_centers_with(&self.centers, &out.v, labels, self.cfg.center_update)?);
                }
                let c = next_centers.as_ref().expect("centers updated on the clean pass");
                let r = ril_loss(&out.v, &c.centers, labels, &self.cfg.loss)?;
                Ok((r.loss, Some(r.d_v)))
            }
        }
    }

    /// One optimizer update on a batch of `[0, 1]` images.
    pub fn train_step(&mut self, images: &Tensor, labels: &[u8], ids: &[String]) -> Result<StepStats> {
        let mut rng = stream_rng(self.cfg.seed, STEP_STREAM, self.state.global_step);
        let lc = self.cfg.loss.clone();
        let agda_on = self.cfg.agda.mode != AgdaMode::Off;
        let replace = agda_on && self.cfg.agda_pass == AgdaPass::Replace;
        self.model.zero_grad();
        let mut stats = StepStats::default();
        let mut next_centers = None;

        let (out1, cache1) = self.model.forward_full(images, Mode::Train, Some(&mut rng))?;
        stats.accuracy = accuracy(&fake_probabilities(&out1.logits), labels);
        let (ce1, dl1) = cross_entropy(&out1.logits, labels)?;
        // in replace mode the clean pass only feeds the center update
        let (aux1, dv1) = if replace && self.cfg.aux_loss == AuxLoss::Ams {
            (0.0, None)
        } else {
            self.aux_term(&out1, labels, true, &mut next_centers)?
        };
        stats.ce = ce1;
        stats.aux = aux1;
        if !replace {
            stats.loss += total_loss(ce1, aux1, &lc);
            self.model.backward(&cache1, &dl1.scale(lc.lambda1), dv1.map(|d| d.scale(lc.lambda2)).as_ref())?;
        }
        drop(cache1);

        if agda_on {
            let aug = augment_batch(images, &out1.attention, &self.cfg.agda, &mut rng)?;
            stats.augmented = aug.heads.iter().filter(|h| h.is_some()).count();
            let (out2, cache2) = self.model.forward_full(&aug.images, Mode::Train, Some(&mut rng))?;
            let (ce2, dl2) = cross_entropy(&out2.logits, labels)?;
            let (aux2, dv2) = if self.cfg.ril_on_augmented || self.cfg.aux_loss != AuxLoss::Ril {
                self.aux_term(&out2, labels, false, &mut next_centers)?
            } else {
                (0.0, None)
            };
            stats.aug_ce = ce2;
            stats.aug_aux = aux2;
            stats.loss += total_loss(ce2, aux2, &lc);
            self.model.backward(&cache2, &dl2.scale(lc.lambda1), dv2.map(|d| d.scale(lc.lambda2)).as_ref())?;
        }
        if let Some(ams) = self.model.ams.as_mut() {
            ams.weight.grad = ams.weight.grad.scale(lc.lambda2);
        }

        if !stats.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (epoch {}): ce={} aux={} aug_ce={} aug_aux={} batch=[{}]",
                self.state.global_step,
                self.state.epoch,
                stats.ce,
                stats.aux,
                stats.aug_ce,
                stats.aug_aux,
                ids.join(",")
            )));
        }
        let model = &mut self.model;
        self.optimizer.step(|f| model.visit_params(f))?;
        if let Some(c) = next_centers {
            self.centers = c;
        }
        self.state.global_step += 1;
        Ok(stats)
    }

    /// Runs the remainder of the current epoch, then advances the epoch
    /// counter and decays the center update rate.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<Vec<StepStats>> {
        self.train_epoch_until(data, usize::MAX)
    }

    /// Like [`Trainer::train_epoch`] but stops after `max_steps` batches,
    /// leaving the epoch open so it can be resumed.
    pub fn train_epoch_until(&mut self, data: &Dataset, max_steps: usize) -> Result<Vec<StepStats>> {
        if data.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let batches = self.epoch_batches(&data.labels, self.state.epoch);
        let mut stats = Vec::new();
        while self.state.step_in_epoch < batches.len() {
            if stats.len() >= max_steps {
                return Ok(stats);
            }
            let idx = &batches[self.state.step_in_epoch];
            let (x, y) = data.batch(idx);
            let ids: Vec<String> = idx.iter().map(|&i| data.ids[i].clone()).collect();
            stats.push(self.train_step(&x, &y, &ids)?);
            self.state.step_in_epoch += 1;
        }
        self.state.epoch += 1;
        self.state.step_in_epoch = 0;
        self.centers.end_epoch();
        Ok(stats)
    }

    /// Trains the remaining epochs, evaluating on `val` after each one.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&mut Self, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            let epoch = self.state.epoch;
            let steps = self.train_epoch(train)?;
            let n = steps.len().max(1) as f64;
            let val_report = match val {
                Some(v) if !v.is_empty() => Some(self.evaluate(v)?.0),
                _ => None,
            };
            let rec = EpochRecord {
                epoch,
                steps: steps.len(),
                mean_loss: steps.iter().map(|s| s.loss).sum::<f64>() / n,
                mean_ce: steps.iter().map(|s| s.ce).sum::<f64>() / n,
                mean_aux: steps.iter().map(|s| s.aux).sum::<f64>() / n,
                train_accuracy: steps.iter().map(|s| s.accuracy).sum::<f64>() / n,
                alpha: self.centers.alpha,
                val: val_report,
            };
            on_epoch(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    pub fn evaluate(&mut self, data: &Dataset) -> Result<(EvalReport, Vec<crate::metrics::ScoreRow>)> {
        let hash = self.cfg.fingerprint();
        evaluate(
            &mut self.model,
            data,
            self.cfg.frames_per_video,
            self.cfg.seed,
            self.cfg.batch_size,
            &hash,
        )
    }

    /// Eval-mode accuracy over a whole dataset.
    pub fn dataset_accuracy(&mut self, data: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let p = predict(&mut self.model, data, &idx, self.cfg.batch_size)?;
        Ok(accuracy(&p, &data.labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};

    fn toy_data(n_videos: usize) -> Dataset {
        synthesize(&SynthConfig {
            size: 32,
            cue_size: 4,
            videos: n_videos,
            frames_per_video: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn plain_ce_when_agda_off_and_no_aux_weight() {
        let mut cfg = TrainConfig::toy();
        cfg.agda.mode = AgdaMode::Off;
        cfg.loss.lambda2 = 0.0;
        cfg.dropout = 0.0;
        let data = toy_data(8);
        let mut t = Trainer::new(cfg).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let (x, y) = data.batch(&idx);
        let mut probe = MultiAttentionModel::new(&t.cfg).unwrap();
        let (out, _) = probe.forward_full(&x, Mode::Train, None).unwrap();
        let (ce, _) = cross_entropy(&out.logits, &y).unwrap();
        let s = t.train_step(&x, &y, &data.ids).unwrap();
        assert_eq!(s.loss, ce);
    }

    #[test]
    fn zero_alpha_freezes_centers() {
        let mut cfg = TrainConfig::toy();
        cfg.alpha = 0.0;
        let data = toy_data(16);
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.centers.clone();
        t.train_epoch_until(&data, 2).unwrap();
        assert_eq!(t.centers.centers, before.centers);
        assert_eq!(t.state.global_step, 2);
    }

    #[test]
    fn centers_move_and_alpha_decays_per_epoch() {
        let cfg = TrainConfig::toy();
        let data = toy_data(8);
        let mut t = Trainer::new(cfg).unwrap();
        t.train_epoch(&data).unwrap();
        assert!(t.centers.centers.data().iter().any(|&c| c != 0.0));
        assert!((t.centers.alpha - 0.05 * 0.9).abs() < 1e-15);
        assert_eq!((t.state.epoch, t.state.step_in_epoch), (1, 0));
    }

    #[test]
    fn identical_seeds_replay_identically() {
        let data = toy_data(16);
        let run = || {
            let mut t = Trainer::new(TrainConfig::toy()).unwrap();
            t.train_epoch(&data).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn epoch_batches_cover_oversampled_order() {
        let mut cfg = TrainConfig::toy();
        cfg.real_oversample = 4;
        cfg.batch_size = 5;
        let t = Trainer::new(cfg).unwrap();
        let labels = [0, 1, 1, 0];
        let order = t.epoch_order(&labels, 0);
        assert_eq!(order.len(), 10);
        assert_eq!(order.iter().filter(|&&i| i == 0).count(), 4);
        assert_eq!(t.epoch_batches(&labels, 0).len(), 2);
        assert_ne!(t.epoch_order(&labels, 0), t.epoch_order(&labels, 1));
    }
}
