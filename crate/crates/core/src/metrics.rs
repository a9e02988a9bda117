//! Classification metrics, evaluation reports and attention-overlap
//! statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::backbone::Backbone;
use crate::data::{sample_frames, Dataset};
use crate::error::{Error, Result};
use crate::model::MultiAttentionModel;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Probabilities are clipped to `[LOGLOSS_CLIP, 1 - LOGLOSS_CLIP]`.
pub const LOGLOSS_CLIP: f64 = 1e-15;

/// Fraction of samples whose argmax class matches the label.
pub fn accuracy(p_fake: &[f64], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = p_fake
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > 0.5) == (y == 1))
        .count();
    hits as f64 / labels.len() as f64
}

/// ROC AUC with ties counted as one half; `None` when a class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let npos = labels.iter().filter(|&&y| y == 1).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney statistic, kept integral so it is exact
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u128, 0u128);
        for &k in &order[i..j] {
            if labels[k] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Some(twice_u as f64 / (2 * npos as u128 * nneg as u128) as f64)
}

/// Mean negative log-likelihood of the true label.
pub fn logloss(p_fake: &[f64], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = p_fake
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / labels.len() as f64
}

/// Per-video mean score and label, in first-appearance order.
pub fn video_scores(p_fake: &[f64], labels: &[u8], video_ids: &[String]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut acc: BTreeMap<&str, (f64, usize, u8)> = BTreeMap::new();
    for ((&p, &y), v) in p_fake.iter().zip(labels).zip(video_ids) {
        match acc.get_mut(v.as_str()) {
            Some(e) => {
                if e.2 != y {
                    return Err(Error::Data(format!("video {v} mixes real and fake frames")));
                }
                e.0 += p;
                e.1 += 1;
            }
            None => {
                order.push(v);
                acc.insert(v, (p, 1, y));
            }
        }
    }
    Ok(order
        .iter()
        .map(|v| {
            let (s, n, y) = acc[v];
            (s / n as f64, y)
        })
        .unzip())
}

/// Softmax probability of the "fake" class for each logit row.
pub fn fake_probabilities(logits: &Tensor) -> Vec<f64> {
    (0..logits.shape()[0])
        .map(|i| {
            let r = logits.outer(i);
            1.0 / (1.0 + (r[0] - r[1]).exp())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub real: usize,
    pub fake: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `null` when the evaluated frames hold a single class.
    pub frame_auc: Option<f64>,
    pub video_auc: Option<f64>,
    pub logloss: f64,
    pub counts: ClassCounts,
    pub frames: usize,
    pub videos: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_scores(p_fake: &[f64], labels: &[u8], video_ids: &[String], config_hash: &str) -> Result<Self> {
        let (vs, vl) = video_scores(p_fake, labels, video_ids)?;
        let fake = labels.iter().filter(|&&y| y == 1).count();
        Ok(EvalReport {
            accuracy: accuracy(p_fake, labels),
            frame_auc: auc(p_fake, labels),
            video_auc: auc(&vs, &vl),
            logloss: logloss(p_fake, labels),
            counts: ClassCounts {
                real: labels.len() - fake,
                fake,
            },
            frames: labels.len(),
            videos: vl.len(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub video_id: String,
    pub label: u8,
    pub p_fake: f64,
}

/// Eval-mode scores for the given samples.
pub fn predict<B: Backbone>(
    model: &mut MultiAttentionModel<B>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk);
        let (o, _) = model.forward_full(&x, Mode::Eval, None)?;
        out.extend(fake_probabilities(&o.logits));
    }
    Ok(out)
}

/// Evaluates up to `frames_per_video` frames per video (0 keeps all).
pub fn evaluate<B: Backbone>(
    model: &mut MultiAttentionModel<B>,
    data: &Dataset,
    frames_per_video: usize,
    seed: u64,
    batch_size: usize,
    config_hash: &str,
) -> Result<(EvalReport, Vec<ScoreRow>)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let picked = sample_frames(&data.video_ids, frames_per_video, seed);
    let p = predict(model, data, &picked, batch_size)?;
    let labels: Vec<u8> = picked.iter().map(|&i| data.labels[i]).collect();
    let vids: Vec<String> = picked.iter().map(|&i| data.video_ids[i].clone()).collect();
    let report = EvalReport::from_scores(&p, &labels, &vids, config_hash)?;
    let rows = picked
        .iter()
        .zip(&p)
        .map(|(&i, &pf)| ScoreRow {
            id: data.ids[i].clone(),
            video_id: data.video_ids[i].clone(),
            label: data.labels[i],
            p_fake: pf,
        })
        .collect();
    Ok((report, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    /// Mean pairwise cosine similarity between heads, per sample.
    pub mean_cosine: Vec<f64>,
    /// Share of the total attention mass held by each head, per sample.
    pub mass_share: Vec<Vec<f64>>,
}

/// Cosine of two flattened maps; zero if either map is all zeros.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn attention_overlap_metrics(maps: &AttentionMaps) -> Result<OverlapMetrics> {
    let m = maps.heads();
    if m < 2 {
        return Err(Error::Validation(format!("overlap needs at least two heads, got {m}")));
    }
    let mut mean_cosine = Vec::with_capacity(maps.batch());
    let mut mass_share = Vec::with_capacity(maps.batch());
    for b in 0..maps.batch() {
        let mut acc = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                acc += cosine(maps.head(b, i), maps.head(b, j));
            }
        }
        mean_cosine.push(acc / (m * (m - 1) / 2) as f64);
        let mass: Vec<f64> = (0..m).map(|k| maps.head(b, k).iter().sum()).collect();
        let total: f64 = mass.iter().sum();
        mass_share.push(
            mass.iter()
                .map(|&x| if total > 0.0 { x / total } else { 1.0 / m as f64 })
                .collect(),
        );
    }
    Ok(OverlapMetrics {
        mean_cosine,
        mass_share,
    })
}

/// Median of the per-sample mean cosine over a dataset, in eval mode.
pub fn median_overlap<B: Backbone>(
    model: &mut MultiAttentionModel<B>,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut all = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk);
        let (o, _) = model.forward_full(&x, Mode::Eval, None)?;
        all.extend(attention_overlap_metrics(&o.attention)?.mean_cosine);
    }
    Ok(median(&mut all))
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn separated_scores() {
        let s = [0.9, 0.8, 0.3, 0.1];
        let y = [1, 1, 0, 0];
        assert_eq!(auc(&s, &y), Some(1.0));
        assert_eq!(accuracy(&s, &y), 1.0);
    }

    #[test]
    fn all_ties_give_one_half() {
        assert_eq!(auc(&[0.4; 6], &[0, 1, 0, 1, 1, 0]), Some(0.5));
    }

    #[test]
    fn single_class_auc_is_undefined() {
        assert_eq!(auc(&[0.1, 0.7], &[1, 1]), None);
        let r = EvalReport::from_scores(&[0.1, 0.7], &[1, 1], &["a".into(), "b".into()], "h").unwrap();
        assert!(r.frame_auc.is_none());
        assert!(r.to_json().contains("\"frame_auc\": null"));
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn auc_matches_pairwise_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 50;
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            // coarse grid forces ties
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            if let Some(a) = auc(&s, &y) {
                assert_eq!(a, pairwise_auc(&s, &y));
            }
        }
    }

    #[test]
    fn logloss_direct_formula() {
        let p = [0.9, 0.2, 0.6];
        let y = [1, 0, 0];
        let expect = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((logloss(&p, &y) - expect).abs() < 1e-15);
        assert!(logloss(&[0.0], &[1]).is_finite());
    }

    #[test]
    fn video_scores_average_frames() {
        let v: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let (s, l) = video_scores(&[0.2, 0.9, 0.4], &[0, 1, 0], &v).unwrap();
        assert_eq!(l, vec![0, 1]);
        assert!((s[0] - 0.3).abs() < 1e-15);
        assert!(video_scores(&[0.2, 0.9], &[0, 1], &["a".into(), "a".into()]).is_err());
    }

    fn maps(data: Vec<f64>, m: usize, n: usize) -> AttentionMaps {
        AttentionMaps::new(Tensor::from_vec(&[1, m, 1, n], data).unwrap()).unwrap()
    }

    #[test]
    fn overlap_extremes() {
        let same = maps(vec![1.0, 2.0, 0.0, 1.0, 2.0, 0.0], 2, 3);
        assert!((attention_overlap_metrics(&same).unwrap().mean_cosine[0] - 1.0).abs() < 1e-15);
        let disjoint = maps(vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0], 2, 3);
        let o = attention_overlap_metrics(&disjoint).unwrap();
        assert_eq!(o.mean_cosine[0], 0.0);
        assert_eq!(o.mass_share[0], vec![0.25, 0.75]);
        assert!(matches!(
            attention_overlap_metrics(&maps(vec![1.0, 2.0], 1, 2)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn overlap_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, m, n) = (3, 4, 10);
        let t = Tensor::from_fn(&[b, m, 2, n / 2], |_| rng.random_range(0.0..1.0));
        let o = attention_overlap_metrics(&AttentionMaps::new(t.clone()).unwrap()).unwrap();
        for s in 0..b {
            let head = |k: usize| &t.outer(s)[k * n..(k + 1) * n];
            let mut sims = vec![];
            for i in 0..m {
                for j in 0..m {
                    if i < j {
                        let (a, c) = (head(i), head(j));
                        let mut dot = 0.0;
                        let mut na = 0.0;
                        let mut nc = 0.0;
                        for p in 0..n {
                            dot += a[p] * c[p];
                            na += a[p] * a[p];
                            nc += c[p] * c[p];
                        }
                        sims.push(dot / (na.sqrt() * nc.sqrt()));
                    }
                }
            }
            let expect = sims.iter().sum::<f64>() / sims.len() as f64;
            assert!((o.mean_cosine[s] - expect).abs() < 1e-10);
        }
    }
}
