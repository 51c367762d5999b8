//! Comparison recommenders: POP, SPOP, MARKOV-1, SKNN and VSKNN.
//!
//! All of them rank ties by ascending item index and fill short lists with
//! the most popular items not yet listed.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::Recommender;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    Pop,
    Spop,
    Markov1,
    Sknn,
    Vsknn,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Pop => "POP",
            BaselineKind::Spop => "SPOP",
            BaselineKind::Markov1 => "MARKOV-1",
            BaselineKind::Sknn => "SKNN",
            BaselineKind::Vsknn => "VSKNN",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "POP" => Ok(BaselineKind::Pop),
            "SPOP" => Ok(BaselineKind::Spop),
            "MARKOV1" => Ok(BaselineKind::Markov1),
            "SKNN" => Ok(BaselineKind::Sknn),
            "VSKNN" => Ok(BaselineKind::Vsknn),
            other => Err(Error::InvalidArgument(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Items sorted by descending score, ties by ascending index.
fn rank_by_score(scores: impl IntoIterator<Item = (usize, f64)>) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = scores.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(i, _)| i).collect()
}

fn fill(mut list: Vec<usize>, backfill: &[usize], n: usize) -> Vec<usize> {
    list.truncate(n);
    if list.len() < n {
        let have: HashSet<usize> = list.iter().copied().collect();
        list.extend(backfill.iter().filter(|i| !have.contains(i)).take(n - list.len()));
    }
    list
}

#[derive(Clone, Debug)]
pub struct Pop {
    counts: Vec<u64>,
    ranking: Vec<usize>,
}

impl Pop {
    /// Counts events in the training sessions.
    pub fn fit(train: &Dataset) -> Self {
        let mut counts = vec![0u64; train.vocab.len()];
        for s in &train.sessions {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let ranking = rank_by_score(counts.iter().enumerate().map(|(i, &c)| (i, c as f64)));
        Self { counts, ranking }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Every item, most popular first.
    pub fn ranking(&self) -> &[usize] {
        &self.ranking
    }
}

impl Recommender for Pop {
    fn recommend(&self, _prefix: &[usize], n: usize) -> Result<Vec<usize>> {
        Ok(self.ranking.iter().take(n).copied().collect())
    }
}

/// In-session items by occurrence count (ties: more recent first), then
/// popularity.
#[derive(Clone, Debug)]
pub struct Spop {
    pop: Pop,
}

impl Spop {
    pub fn fit(train: &Dataset) -> Self {
        Self { pop: Pop::fit(train) }
    }

    pub fn from_pop(pop: Pop) -> Self {
        Self { pop }
    }
}

impl Recommender for Spop {
    fn recommend(&self, prefix: &[usize], n: usize) -> Result<Vec<usize>> {
        let mut stats: HashMap<usize, (usize, usize)> = HashMap::new();
        for (pos, &i) in prefix.iter().enumerate() {
            let e = stats.entry(i).or_insert((0, 0));
            e.0 += 1;
            e.1 = pos;
        }
        let mut v: Vec<(usize, (usize, usize))> = stats.into_iter().collect();
        v.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(b.1 .1.cmp(&a.1 .1)));
        let own = v.into_iter().map(|(i, _)| i).collect();
        Ok(fill(own, self.pop.ranking(), n))
    }
}

/// First-order transition counts from the last prefix item.
#[derive(Clone, Debug)]
pub struct Markov1 {
    next: HashMap<usize, Vec<usize>>,
    pop: Pop,
}

impl Markov1 {
    pub fn fit(train: &Dataset) -> Self {
        let mut counts: HashMap<usize, HashMap<usize, u64>> = HashMap::new();
        for s in &train.sessions {
            for w in s.items.windows(2) {
                *counts.entry(w[0]).or_default().entry(w[1]).or_default() += 1;
            }
        }
        let next = counts
            .into_iter()
            .map(|(a, m)| (a, rank_by_score(m.into_iter().map(|(b, c)| (b, c as f64)))))
            .collect();
        Self {
            next,
            pop: Pop::fit(train),
        }
    }
}

impl Recommender for Markov1 {
    fn recommend(&self, prefix: &[usize], n: usize) -> Result<Vec<usize>> {
        let own = prefix
            .last()
            .and_then(|l| self.next.get(l))
            .cloned()
            .unwrap_or_default();
        Ok(fill(own, self.pop.ranking(), n))
    }
}

/// Weight given to each prefix position in the query vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decay {
    /// Binary item set.
    Constant,
    /// `pos/|prefix|` with 1-based positions; the last event weighs 1.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub decay: Decay,
    /// Drop items already in the prefix from the output.
    pub exclude_prefix_items: bool,
}

impl KnnConfig {
    pub fn sknn() -> Self {
        Self {
            k: 100,
            decay: Decay::Constant,
            exclude_prefix_items: false,
        }
    }

    pub fn vsknn() -> Self {
        Self {
            decay: Decay::Linear,
            ..Self::sknn()
        }
    }
}

/// Session KNN over binary item sets with an inverted index.
#[derive(Clone, Debug)]
pub struct SessionKnn {
    cfg: KnnConfig,
    /// distinct items of each training session, ascending
    sessions: Vec<Vec<usize>>,
    index: HashMap<usize, Vec<usize>>,
    pop: Pop,
}

impl SessionKnn {
    pub fn fit(train: &Dataset, cfg: KnnConfig) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::InvalidArgument("K must be ≥ 1".into()));
        }
        let mut sessions = Vec::with_capacity(train.sessions.len());
        let mut index: HashMap<usize, Vec<usize>> = HashMap::new();
        for (sid, s) in train.sessions.iter().enumerate() {
            let mut items = s.items.clone();
            items.sort_unstable();
            items.dedup();
            for &i in &items {
                index.entry(i).or_default().push(sid);
            }
            sessions.push(items);
        }
        Ok(Self {
            cfg,
            sessions,
            index,
            pop: Pop::fit(train),
        })
    }

    pub fn config(&self) -> &KnnConfig {
        &self.cfg
    }

    fn query_weights(&self, prefix: &[usize]) -> HashMap<usize, f64> {
        let len = prefix.len() as f64;
        let mut w = HashMap::new();
        for (pos, &i) in prefix.iter().enumerate() {
            let v = match self.cfg.decay {
                Decay::Constant => 1.0,
                Decay::Linear => (pos + 1) as f64 / len,
            };
            // repeated items keep their most recent weight
            w.insert(i, v);
        }
        w
    }

    /// The `K` most similar training sessions as `(session, similarity)`,
    /// best first, ties by ascending session index.
    pub fn neighbors(&self, prefix: &[usize]) -> Vec<(usize, f64)> {
        let mut items: Vec<(usize, f64)> = self.query_weights(prefix).into_iter().collect();
        // fixed summation order keeps results bit-identical across runs
        items.sort_by_key(|&(i, _)| i);
        let norm: f64 = items.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Vec::new();
        }
        let mut dot: HashMap<usize, f64> = HashMap::new();
        for (i, wi) in &items {
            if let Some(list) = self.index.get(i) {
                for &sid in list {
                    *dot.entry(sid).or_default() += wi;
                }
            }
        }
        let mut sims: Vec<(usize, f64)> = dot
            .into_iter()
            .map(|(sid, d)| (sid, d / (norm * (self.sessions[sid].len() as f64).sqrt())))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(self.cfg.k);
        sims
    }

    /// Item scores: sum of neighbour similarities over neighbours holding
    /// the item.
    pub fn scores(&self, prefix: &[usize]) -> HashMap<usize, f64> {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for (sid, sim) in self.neighbors(prefix) {
            for &i in &self.sessions[sid] {
                *scores.entry(i).or_default() += sim;
            }
        }
        if self.cfg.exclude_prefix_items {
            for i in prefix {
                scores.remove(i);
            }
        }
        scores
    }
}

impl Recommender for SessionKnn {
    fn recommend(&self, prefix: &[usize], n: usize) -> Result<Vec<usize>> {
        let own = rank_by_score(self.scores(prefix));
        if self.cfg.exclude_prefix_items {
            let banned: HashSet<usize> = prefix.iter().copied().collect();
            let back: Vec<usize> = self
                .pop
                .ranking()
                .iter()
                .copied()
                .filter(|i| !banned.contains(i))
                .collect();
            Ok(fill(own, &back, n))
        } else {
            Ok(fill(own, self.pop.ranking(), n))
        }
    }
}

/// Fits the named baseline with its default settings.
pub fn fit_baseline(kind: BaselineKind, train: &Dataset) -> Result<Box<dyn Recommender + Send>> {
    Ok(match kind {
        BaselineKind::Pop => Box::new(Pop::fit(train)),
        BaselineKind::Spop => Box::new(Spop::fit(train)),
        BaselineKind::Markov1 => Box::new(Markov1::fit(train)),
        BaselineKind::Sknn => Box::new(SessionKnn::fit(train, KnnConfig::sknn())?),
        BaselineKind::Vsknn => Box::new(SessionKnn::fit(train, KnnConfig::vsknn())?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ItemVocab, Session};

    fn ds(sessions: Vec<Vec<usize>>, vocab: usize) -> Dataset {
        Dataset {
            sessions: sessions
                .into_iter()
                .enumerate()
                .map(|(k, items)| Session {
                    session_id: k.to_string(),
                    timestamps: vec![0; items.len()],
                    items,
                })
                .collect(),
            vocab: ItemVocab::from_entries((0..vocab).map(|i| (i.to_string(), 1)).collect()),
            max_session_length: 15,
        }
    }

    #[test]
    fn pop_orders_by_count() {
        let pop = Pop::from_counts(vec![3, 1]);
        assert_eq!(pop.recommend(&[], 2).unwrap(), vec![0, 1]);
        assert_eq!(pop.recommend(&[1], 5).unwrap(), pop.recommend(&[0, 0], 5).unwrap());
    }

    #[test]
    fn spop_rule() {
        // a=0, b=1, c=2 is the popularity leader
        let spop = Spop::from_pop(Pop::from_counts(vec![1, 1, 9, 0]));
        assert_eq!(spop.recommend(&[0, 1, 0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(spop.recommend(&[3, 0, 1], 3).unwrap(), vec![1, 0, 3]);
    }

    #[test]
    fn markov_counts_and_backfill() {
        let train = ds(vec![vec![0, 1], vec![0, 1], vec![0, 2], vec![3, 3, 3]], 5);
        let m = Markov1::fit(&train);
        assert_eq!(m.recommend(&[0], 3).unwrap(), vec![1, 2, 0]);
        let pop = Pop::fit(&train);
        assert_eq!(m.recommend(&[4], 5).unwrap(), pop.recommend(&[], 5).unwrap());
    }

    #[test]
    fn sknn_identical_session_first() {
        let train = ds(vec![vec![0, 1, 2], vec![5, 6, 7, 5, 6]], 8);
        let knn = SessionKnn::fit(&train, KnnConfig::sknn()).unwrap();
        let r = knn.recommend(&[0, 1, 2], 3).unwrap();
        assert_eq!(r, vec![0, 1, 2]);
    }

    #[test]
    fn sknn_disjoint_falls_back_to_pop() {
        let train = ds(vec![vec![0, 1], vec![1, 2]], 5);
        let knn = SessionKnn::fit(&train, KnnConfig::sknn()).unwrap();
        assert_eq!(
            knn.recommend(&[4], 3).unwrap(),
            Pop::fit(&train).recommend(&[], 3).unwrap()
        );
    }

    #[test]
    fn vsknn_prefers_recent_match() {
        let train = ds(vec![vec![0, 5], vec![1, 6]], 8);
        let knn = SessionKnn::fit(&train, KnnConfig::vsknn()).unwrap();
        let r = knn.recommend(&[0, 1], 4).unwrap();
        assert!(r.iter().position(|&i| i == 6) < r.iter().position(|&i| i == 5));
    }

    #[test]
    fn vsknn_single_event_matches_sknn() {
        let train = ds(vec![vec![0, 5, 2], vec![1, 6], vec![2, 0, 7]], 8);
        let a = SessionKnn::fit(&train, KnnConfig::sknn()).unwrap();
        let b = SessionKnn::fit(&train, KnnConfig::vsknn()).unwrap();
        for i in 0..8 {
            assert_eq!(a.recommend(&[i], 8).unwrap(), b.recommend(&[i], 8).unwrap());
        }
    }

    #[test]
    fn exclude_prefix_flag() {
        let train = ds(vec![vec![0, 1, 2]], 4);
        let cfg = KnnConfig {
            exclude_prefix_items: true,
            ..KnnConfig::sknn()
        };
        let knn = SessionKnn::fit(&train, cfg).unwrap();
        let r = knn.recommend(&[0], 4).unwrap();
        assert!(!r.contains(&0));
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("markov1".parse::<BaselineKind>().unwrap(), BaselineKind::Markov1);
        assert_eq!("MARKOV-1".parse::<BaselineKind>().unwrap(), BaselineKind::Markov1);
        assert!("foo".parse::<BaselineKind>().is_err());
    }
}
