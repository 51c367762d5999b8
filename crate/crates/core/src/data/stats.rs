use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};

use super::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    /// session length → number of sessions
    pub length_histogram: BTreeMap<usize, usize>,
    /// `(session_id, 1 − unique/len)` in dataset order
    pub repeat_fractions: Vec<(String, f64)>,
}

pub fn stats(dataset: &Dataset) -> DatasetStats {
    let mut length_histogram = BTreeMap::new();
    let mut repeat_fractions = Vec::with_capacity(dataset.sessions.len());
    for s in &dataset.sessions {
        *length_histogram.entry(s.len()).or_insert(0) += 1;
        let unique = s.items.iter().collect::<HashSet<_>>().len();
        let frac = if s.is_empty() {
            0.0
        } else {
            1.0 - unique as f64 / s.len() as f64
        };
        repeat_fractions.push((s.session_id.clone(), frac));
    }
    DatasetStats {
        length_histogram,
        repeat_fractions,
    }
}

impl DatasetStats {
    /// `length<TAB>count` lines.
    pub fn write_lengths_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "length\tcount")?;
        for (len, count) in &self.length_histogram {
            writeln!(w, "{len}\t{count}")?;
        }
        Ok(())
    }

    /// `session_id<TAB>repeat_fraction` lines.
    pub fn write_repeats_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "session_id\trepeat_fraction")?;
        for (id, frac) in &self.repeat_fractions {
            writeln!(w, "{id}\t{frac:.6}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ItemVocab, Session};

    fn ds(sessions: Vec<Vec<usize>>) -> Dataset {
        Dataset {
            sessions: sessions
                .into_iter()
                .enumerate()
                .map(|(k, items)| Session {
                    session_id: format!("s{k}"),
                    timestamps: vec![0; items.len()],
                    items,
                })
                .collect(),
            vocab: ItemVocab::from_entries((0..5).map(|i| (i.to_string(), 5)).collect()),
            max_session_length: 15,
        }
    }

    #[test]
    fn aba_session() {
        let st = stats(&ds(vec![vec![0, 1, 0]]));
        assert_eq!(st.length_histogram, BTreeMap::from([(3, 1)]));
        assert!((st.repeat_fractions[0].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unique_session_has_no_repeats() {
        let st = stats(&ds(vec![vec![0, 1, 2, 3]]));
        assert_eq!(st.repeat_fractions[0].1, 0.0);
    }

    #[test]
    fn tsv_output() {
        let st = stats(&ds(vec![vec![0, 1], vec![2, 2], vec![1, 2, 3]]));
        let mut buf = Vec::new();
        st.write_lengths_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "length\tcount\n2\t2\n3\t1\n");
        let mut buf = Vec::new();
        st.write_repeats_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("s1\t0.500000"));
    }
}
