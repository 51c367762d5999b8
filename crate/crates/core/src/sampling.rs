//! Per-epoch training examples.
//!
//! [`SamplerKind::PosNeg`] cuts every session once at a random point: the
//! head is the input prefix and the following items are positives, each
//! paired with a uniformly drawn negative. [`SamplerKind::SlidingWindow`]
//! emits one example per next-item position with a bounded prefix.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::{Dataset, Session};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub prefix: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TrainingExample {
    /// Checks the structural invariants.
    pub fn is_valid(&self) -> bool {
        !self.prefix.is_empty()
            && !self.positives.is_empty()
            && self.positives.len() == self.negatives.len()
            && self.negatives.iter().all(|n| !self.positives.contains(n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    PosNeg,
    SlidingWindow,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub samples_per_session: usize,
    /// Prefix length for [`SamplerKind::SlidingWindow`].
    pub window_size: usize,
    pub knn_augment: bool,
    pub knn_k: usize,
    pub seed: u64,
    /// Also keep prefix items out of the negatives.
    pub exclude_prefix_from_negatives: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::PosNeg,
            samples_per_session: 8,
            window_size: 5,
            knn_augment: false,
            knn_k: 10,
            seed: 0,
            exclude_prefix_from_negatives: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_session == 0 {
            return Err(Error::InvalidArgument("samples_per_session must be ≥ 1".into()));
        }
        if self.kind == SamplerKind::SlidingWindow && self.window_size == 0 {
            return Err(Error::InvalidArgument("window_size must be ≥ 1".into()));
        }
        if self.knn_augment && self.knn_k == 0 {
            return Err(Error::InvalidArgument("knn_k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Cuts `session` at a point drawn uniformly from `[1, t−1]`; positives are
/// the next `samples_per_session` items after the cut.
pub fn split_session<R: Rng>(
    session: &Session,
    samples_per_session: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let t = session.items.len();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "session {} has {t} events, need at least 2",
            session.session_id
        )));
    }
    let cut = rng.gen_range(1..t);
    let end = (cut + samples_per_session).min(t);
    Ok((session.items[..cut].to_vec(), session.items[cut..end].to_vec()))
}

/// `count` distinct indices drawn uniformly from `0..vocab_size` minus
/// `excluded`.
pub fn sample_negatives<R: Rng>(
    excluded: &[usize],
    vocab_size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let banned: HashSet<usize> = excluded.iter().copied().filter(|&i| i < vocab_size).collect();
    let eligible = vocab_size - banned.len();
    if eligible < count {
        return Err(Error::VocabTooSmall {
            eligible,
            requested: count,
        });
    }
    if count * 2 <= eligible {
        let mut out = Vec::with_capacity(count);
        let mut taken = HashSet::with_capacity(count);
        while out.len() < count {
            let i = rng.gen_range(0..vocab_size);
            if !banned.contains(&i) && taken.insert(i) {
                out.push(i);
            }
        }
        Ok(out)
    } else {
        let pool: Vec<usize> = (0..vocab_size).filter(|i| !banned.contains(i)).collect();
        Ok(pool.choose_multiple(rng, count).copied().collect())
    }
}

/// One `(prefix, positives)` pair per next-item position: the prefix is the
/// last `window_size` events before it (shorter at the session start).
pub fn sliding_window_pairs(
    session: &Session,
    window_size: usize,
    samples_per_session: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let items = &session.items;
    let t = items.len();
    (1..t)
        .map(|e| {
            let start = e.saturating_sub(window_size);
            let end = (e + samples_per_session).min(t);
            (items[start..e].to_vec(), items[e..end].to_vec())
        })
        .collect()
}

/// [`sliding_window_pairs`] with negatives attached.
pub fn sliding_window_examples<R: Rng>(
    session: &Session,
    window_size: usize,
    samples_per_session: usize,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    if window_size == 0 {
        return Err(Error::InvalidArgument("window_size must be ≥ 1".into()));
    }
    sliding_window_pairs(session, window_size, samples_per_session)
        .into_iter()
        .map(|(prefix, positives)| {
            let negatives = sample_negatives(&positives, vocab_size, positives.len(), rng)?;
            Ok(TrainingExample {
                prefix,
                positives,
                negatives,
            })
        })
        .collect()
}

/// Row-major unit item vectors used for nearest-neighbour augmentation.
pub struct ItemVectors<'a, F> {
    pub values: &'a [F],
    pub dim: usize,
}

impl<F: Scalar> ItemVectors<'_, F> {
    fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    fn row(&self, i: usize) -> &[F] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        let dot: F = self.row(a).iter().zip(self.row(b)).map(|(&x, &y)| x * y).sum();
        1.0 - dot.to_f64_lossy()
    }
}

/// Items closest (cosine distance) to the current positives, excluding
/// prefix items and the positives themselves. Each positive contributes its
/// `k` nearest eligible items; the union is ordered by distance to the
/// nearest positive (ties by index) and taken until `needed` positives exist.
pub fn knn_augment_positives<F: Scalar>(
    prefix: &[usize],
    positives: &[usize],
    items: &ItemVectors<'_, F>,
    k: usize,
    needed: usize,
) -> Vec<usize> {
    if positives.len() >= needed || positives.is_empty() {
        return Vec::new();
    }
    let banned: HashSet<usize> = prefix.iter().chain(positives).copied().collect();
    let mut best: Vec<Option<f64>> = vec![None; items.len()];
    for &p in positives.iter().collect::<HashSet<_>>() {
        let mut near: Vec<(f64, usize)> = (0..items.len())
            .filter(|i| !banned.contains(i))
            .map(|i| (items.distance(p, i), i))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, i) in near.iter().take(k) {
            best[i] = Some(best[i].map_or(d, |b: f64| b.min(d)));
        }
    }
    let mut cands: Vec<(f64, usize)> = best.iter().enumerate().filter_map(|(i, d)| d.map(|d| (d, i))).collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands
        .into_iter()
        .take(needed - positives.len())
        .map(|(_, i)| i)
        .collect()
}

fn pos_neg_example<F: Scalar, R: Rng>(
    session: &Session,
    cfg: &SamplerConfig,
    vocab_size: usize,
    items: Option<&ItemVectors<'_, F>>,
    rng: &mut R,
) -> Result<Option<TrainingExample>> {
    let (prefix, mut positives) = split_session(session, cfg.samples_per_session, rng)?;
    if let Some(items) = items {
        let extra = knn_augment_positives(&prefix, &positives, items, cfg.knn_k, cfg.samples_per_session);
        positives.extend(extra);
    }
    attach_negatives(prefix, positives, cfg, vocab_size, rng)
}

fn attach_negatives<R: Rng>(
    prefix: Vec<usize>,
    mut positives: Vec<usize>,
    cfg: &SamplerConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Option<TrainingExample>> {
    let mut excluded = positives.clone();
    if cfg.exclude_prefix_from_negatives {
        excluded.extend_from_slice(&prefix);
    }
    let eligible = vocab_size - excluded.iter().collect::<HashSet<_>>().len();
    if eligible == 0 {
        return Ok(None);
    }
    // tiny vocabularies: keep as many pairs as there are negatives
    positives.truncate(eligible);
    let negatives = sample_negatives(&excluded, vocab_size, positives.len(), rng)?;
    Ok(Some(TrainingExample {
        prefix,
        positives,
        negatives,
    }))
}

/// Examples for one epoch, shuffled. A pure function of the dataset,
/// `cfg` (including its seed), the model state and `epoch`.
pub fn build_epoch<F: Scalar>(
    train: &Dataset,
    cfg: &SamplerConfig,
    model: Option<&Model<F>>,
    epoch: u64,
) -> Result<Vec<TrainingExample>> {
    cfg.validate()?;
    if train.sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab_size = train.vocab.len();
    let item_values = match (cfg.knn_augment, model) {
        (false, _) => None,
        (true, Some(m)) => Some(m.all_item_vectors()?),
        (true, None) => {
            return Err(Error::InvalidArgument("KNN augmentation needs a model".into()));
        }
    };
    let dim = model.map_or(1, |m| m.embedding_dim());
    let items = item_values.as_deref().map(|values| ItemVectors { values, dim });

    let per_session: Vec<Vec<TrainingExample>> = train
        .sessions
        .par_iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(k, s)| {
            let mut r = rng::stream(cfg.seed, &[epoch, k as u64]);
            match cfg.kind {
                SamplerKind::PosNeg => Ok(pos_neg_example(s, cfg, vocab_size, items.as_ref(), &mut r)?
                    .into_iter()
                    .collect()),
                SamplerKind::SlidingWindow => {
                    let mut out = Vec::new();
                    for (prefix, positives) in sliding_window_pairs(s, cfg.window_size, cfg.samples_per_session) {
                        out.extend(attach_negatives(prefix, positives, cfg, vocab_size, &mut r)?);
                    }
                    Ok(out)
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut examples: Vec<TrainingExample> = per_session.into_iter().flatten().collect();
    examples.shuffle(&mut rng::stream(cfg.seed, &[epoch, u64::MAX]));
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::ItemVocab;

    fn session(items: Vec<usize>) -> Session {
        Session {
            session_id: "s".into(),
            timestamps: (0..items.len() as u64).collect(),
            items,
        }
    }

    fn dataset(sessions: Vec<Vec<usize>>, vocab: usize) -> Dataset {
        Dataset {
            sessions: sessions.into_iter().map(session).collect(),
            vocab: ItemVocab::from_entries((0..vocab).map(|i| (i.to_string(), 5)).collect()),
            max_session_length: 15,
        }
    }

    fn none() -> Option<&'static Model<f32>> {
        None
    }

    #[test]
    fn two_event_session_has_one_split() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (p, q) = split_session(&session(vec![4, 7]), 8, &mut r).unwrap();
            assert_eq!((p, q), (vec![4], vec![7]));
        }
        let ds = dataset(vec![vec![0, 1]], 10);
        let ex = build_epoch(&ds, &SamplerConfig::default(), none(), 0).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].positives, vec![1]);
    }

    #[test]
    fn split_truncates_continuation() {
        let s = session((0..10).collect());
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (p, q) = split_session(&s, 8, &mut r).unwrap();
            assert_eq!(q.len(), (10 - p.len()).min(8));
            assert_eq!(q[0], p.len());
        }
        assert!(split_session(&session(vec![1]), 8, &mut r).is_err());
    }

    #[test]
    fn forced_negative() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_negatives(&[0, 1, 2, 3], 5, 1, &mut r).unwrap(), vec![4]);
        assert!(matches!(
            sample_negatives(&[0, 1, 2, 3], 5, 2, &mut r),
            Err(Error::VocabTooSmall {
                eligible: 1,
                requested: 2
            })
        ));
    }

    #[test]
    fn negatives_avoid_positives() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let pos = [1, 5, 9];
            let neg = sample_negatives(&pos, 12, 3, &mut r).unwrap();
            assert!(neg.iter().all(|n| !pos.contains(n) && *n < 12));
            assert_eq!(neg.iter().collect::<HashSet<_>>().len(), 3);
        }
    }

    #[test]
    fn sliding_window_enumeration() {
        let pairs = sliding_window_pairs(&session(vec![0, 1, 2]), 2, 1);
        assert_eq!(pairs, vec![(vec![0], vec![1]), (vec![0, 1], vec![2])]);
        let pairs = sliding_window_pairs(&session((0..6).collect()), 2, 8);
        assert_eq!(pairs[4], (vec![3, 4], vec![5]));
        assert_eq!(pairs[1], (vec![0, 1], vec![2, 3, 4, 5]));
    }

    #[test]
    fn knn_no_op_when_satisfied() {
        let v = [1.0f64, 0.0, 0.0, 1.0];
        let items = ItemVectors { values: &v, dim: 2 };
        assert!(knn_augment_positives(&[0], &[1], &items, 5, 1).is_empty());
    }

    #[test]
    fn knn_picks_nearer_item() {
        // item 1 is the positive, 3 the prefix; 2 is closer to 1 than 0 is
        let v = [1.0f64, 0.0, 0.0, 1.0, 0.6, 0.8, -1.0, 0.0];
        let items = ItemVectors { values: &v, dim: 2 };
        assert_eq!(knn_augment_positives(&[3], &[1], &items, 5, 2), vec![2]);
        assert_eq!(knn_augment_positives(&[3], &[1], &items, 5, 3), vec![2, 0]);
    }

    #[test]
    fn epochs_are_reproducible() {
        let ds = dataset(
            (0..30)
                .map(|k| (0..(2 + k % 7)).map(|j| (k + j) % 20).collect())
                .collect(),
            20,
        );
        let cfg = SamplerConfig {
            seed: 11,
            ..SamplerConfig::default()
        };
        let a = build_epoch(&ds, &cfg, none(), 3).unwrap();
        let b = build_epoch(&ds, &cfg, none(), 3).unwrap();
        let c = build_epoch(&ds, &cfg, none(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(TrainingExample::is_valid));
    }

    #[test]
    fn knn_augment_requires_model() {
        let ds = dataset(vec![vec![0, 1]], 5);
        let cfg = SamplerConfig {
            knn_augment: true,
            ..SamplerConfig::default()
        };
        assert!(build_epoch(&ds, &cfg, none(), 0).is_err());
    }
}
