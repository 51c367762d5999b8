//! No-look-ahead evaluation: every prefix of every test session is a
//! measurement point, and the recommender only sees events up to it.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Anything that ranks items for a session prefix.
pub trait Recommender: Sync {
    /// At most `n` distinct item indices, best first.
    fn recommend(&self, prefix: &[usize], n: usize) -> Result<Vec<usize>>;
}

impl<R: Recommender + ?Sized> Recommender for &R {
    fn recommend(&self, prefix: &[usize], n: usize) -> Result<Vec<usize>> {
        (**self).recommend(prefix, n)
    }
}

impl<R: Recommender + ?Sized> Recommender for Box<R> {
    fn recommend(&self, prefix: &[usize], n: usize) -> Result<Vec<usize>> {
        (**self).recommend(prefix, n)
    }
}

/// Ground truth used for precision, recall and MAP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelevantSet {
    /// Distinct items from the next position to the end of the session.
    #[default]
    Remaining,
    /// Only the next item.
    NextItem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cutoff: usize,
    pub relevant: RelevantSet,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cutoff: 20,
            relevant: RelevantSet::Remaining,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub cutoff: usize,
    pub relevant: RelevantSet,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub hit_rate: f64,
    pub mrr: f64,
    /// Distinct items appearing in any recommendation list.
    pub coverage: usize,
    pub vocab_size: usize,
    pub measurement_points: usize,
    pub sessions: usize,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let k = self.cutoff;
        let mut s = String::new();
        let _ = writeln!(s, "method       {}", self.method);
        for (name, v) in [
            ("MAP", self.map),
            ("PREC", self.precision),
            ("REC", self.recall),
            ("HR", self.hit_rate),
            ("MRR", self.mrr),
        ] {
            let _ = writeln!(s, "{:<12} {v:.4}", format!("{name}@{k}"));
        }
        let _ = writeln!(s, "coverage     {} / {}", self.coverage, self.vocab_size);
        let _ = writeln!(s, "points       {}", self.measurement_points);
        s
    }
}

/// `1/rank` if `next` is within the top `k`, else 0.
pub fn mrr_at_k(ranked: &[usize], next: usize, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&i| i == next)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

pub fn hr_at_k(ranked: &[usize], next: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == next) {
        1.0
    } else {
        0.0
    }
}

/// `(|top-k ∩ rel| / k, |top-k ∩ rel| / |rel|)`.
pub fn prec_rec_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> (f64, f64) {
    if relevant.is_empty() || k == 0 {
        return (0.0, 0.0);
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count() as f64;
    (hits / k as f64, hits / relevant.len() as f64)
}

/// Average precision at `k` with denominator `min(|rel|, k)`.
pub fn map_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, i) in ranked.iter().take(k).enumerate() {
        if relevant.contains(i) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

#[derive(Default)]
struct Partial {
    map: f64,
    prec: f64,
    rec: f64,
    hr: f64,
    mrr: f64,
    points: usize,
    seen: BTreeSet<usize>,
}

/// Runs the protocol over `test` and averages over all measurement points.
pub fn evaluate<R: Recommender + ?Sized>(
    rec: &R,
    test: &Dataset,
    cfg: &EvalConfig,
    method: &str,
) -> Result<EvalReport> {
    if cfg.cutoff == 0 {
        return Err(Error::InvalidArgument("cutoff must be ≥ 1".into()));
    }
    let k = cfg.cutoff;
    let partials: Vec<Partial> = test
        .sessions
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let mut p = Partial::default();
            for l in 1..s.len() {
                let ranked = rec.recommend(&s.items[..l], k)?;
                let next = s.items[l];
                let relevant: HashSet<usize> = match cfg.relevant {
                    RelevantSet::Remaining => s.items[l..].iter().copied().collect(),
                    RelevantSet::NextItem => HashSet::from([next]),
                };
                let (prec, recall) = prec_rec_at_k(&ranked, &relevant, k);
                p.map += map_at_k(&ranked, &relevant, k);
                p.prec += prec;
                p.rec += recall;
                p.hr += hr_at_k(&ranked, next, k);
                p.mrr += mrr_at_k(&ranked, next, k);
                p.points += 1;
                p.seen.extend(ranked.iter().take(k).copied());
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;

    // ordered reduction keeps the sums independent of scheduling
    let mut total = Partial::default();
    let mut sessions = 0;
    for p in partials {
        total.map += p.map;
        total.prec += p.prec;
        total.rec += p.rec;
        total.hr += p.hr;
        total.mrr += p.mrr;
        total.points += p.points;
        total.seen.extend(p.seen);
        sessions += 1;
    }
    if total.points == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = total.points as f64;
    Ok(EvalReport {
        method: method.to_string(),
        cutoff: k,
        relevant: cfg.relevant,
        map: total.map / n,
        precision: total.prec / n,
        recall: total.rec / n,
        hit_rate: total.hr / n,
        mrr: total.mrr / n,
        coverage: total.seen.len(),
        vocab_size: test.vocab.len(),
        measurement_points: total.points,
        sessions,
    })
}
