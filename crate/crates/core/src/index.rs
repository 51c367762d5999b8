//! Serving: exact top-n retrieval over precomputed item encodings and the
//! model file format.
//!
//! Model files (`.sml`) are laid out as
//!
//! ```text
//! b"SMLMODEL"  u32 version  u32 header_len  header (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 ndims  u32 dims[ndims]  f32 values[..]
//! ```
//!
//! with every integer and float little-endian. The header carries the model
//! configuration, the model name and the vocabulary.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Scalar, Tensor};
use crate::data::ItemVocab;
use crate::encoders::{EncoderKind, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::Recommender;
use crate::losses::LossKind;

pub const MAGIC: &[u8; 8] = b"SMLMODEL";
pub const FORMAT_VERSION: u32 = 1;

/// `SML-<encoder>-<loss>`, e.g. `SML-MaxPool-Triplet`.
pub fn model_name(encoder: EncoderKind, loss: LossKind) -> String {
    format!("SML-{}-{}", encoder.label(), loss.label())
}

/// Unit-norm item encodings, row `i` for item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemIndex<F> {
    matrix: Vec<F>,
    dim: usize,
}

pub fn build_index<F: Scalar>(model: &Model<F>) -> Result<ItemIndex<F>> {
    Ok(ItemIndex {
        matrix: model.all_item_vectors()?,
        dim: model.embedding_dim(),
    })
}

fn by_score<F: Scalar>(a: &(usize, F), b: &(usize, F)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

impl<F: Scalar> ItemIndex<F> {
    pub fn from_rows(matrix: Vec<F>, dim: usize) -> Result<Self> {
        if dim == 0 || matrix.is_empty() || !matrix.len().is_multiple_of(dim) {
            return Err(Error::shape(
                "item index",
                format!("{} values for dim {dim}", matrix.len()),
            ));
        }
        Ok(Self { matrix, dim })
    }

    pub fn len(&self) -> usize {
        self.matrix.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// `q·row` for every item.
    pub fn scores(&self, query: &[F]) -> Result<Vec<F>> {
        if query.len() != self.dim {
            return Err(Error::shape(
                "topn",
                format!("query dim {} vs {}", query.len(), self.dim),
            ));
        }
        Ok(self
            .matrix
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(query).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// Best `n` items by `1 − d(q, ω(i)) = q·ω(i)`, ties by ascending index.
    pub fn topn(&self, query: &[F], n: usize, exclude: Option<&HashSet<usize>>) -> Result<Vec<(usize, F)>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be ≥ 1".into()));
        }
        let mut scored: Vec<(usize, F)> = self
            .scores(query)?
            .into_iter()
            .enumerate()
            .filter(|(i, _)| exclude.is_none_or(|e| !e.contains(i)))
            .collect();
        if scored.len() > n {
            scored.select_nth_unstable_by(n - 1, by_score);
            scored.truncate(n);
        }
        scored.sort_by(by_score);
        Ok(scored)
    }
}

/// The trained model as a [`Recommender`]: encode the prefix, retrieve the
/// nearest items.
pub struct SmlRecommender<F> {
    model: Model<F>,
    index: ItemIndex<F>,
    exclude_prefix: bool,
}

impl<F: Scalar> SmlRecommender<F> {
    pub fn new(model: Model<F>) -> Result<Self> {
        let index = build_index(&model)?;
        Ok(Self {
            model,
            index,
            exclude_prefix: false,
        })
    }

    /// Leave items already in the prefix out of the results.
    pub fn exclude_prefix(mut self, flag: bool) -> Self {
        self.exclude_prefix = flag;
        self
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn index(&self) -> &ItemIndex<F> {
        &self.index
    }

    /// Ranked `(item, score)` pairs. Prefixes longer than the encoder limit
    /// keep their most recent events.
    pub fn recommend_scored(&self, prefix: &[usize], n: usize) -> Result<Vec<(usize, F)>> {
        let max = self.model.config().max_session_length;
        let tail = &prefix[prefix.len().saturating_sub(max)..];
        let q = self.model.session_vector(tail)?;
        let exclude: Option<HashSet<usize>> = self.exclude_prefix.then(|| prefix.iter().copied().collect());
        self.index.topn(&q, n, exclude.as_ref())
    }
}

impl<F: Scalar> Recommender for SmlRecommender<F> {
    fn recommend(&self, prefix: &[usize], n: usize) -> Result<Vec<usize>> {
        Ok(self.recommend_scored(prefix, n)?.into_iter().map(|(i, _)| i).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    config: ModelConfig,
    vocab: Vec<(String, u64)>,
}

/// Everything a model file holds.
#[derive(Clone, Debug)]
pub struct ModelArtifact {
    pub name: String,
    pub model: Model<f32>,
    pub vocab: ItemVocab,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Artifact("truncated model file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl ModelArtifact {
    pub fn new(name: impl Into<String>, model: Model<f32>, vocab: ItemVocab) -> Result<Self> {
        if vocab.len() != model.vocab_size() {
            return Err(Error::Artifact(format!(
                "vocabulary has {} items, model expects {}",
                vocab.len(),
                model.vocab_size()
            )));
        }
        Ok(Self {
            name: name.into(),
            model,
            vocab,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            name: self.name.clone(),
            config: self.model.config().clone(),
            vocab: self
                .vocab
                .ids()
                .iter()
                .cloned()
                .zip(self.vocab.counts().iter().copied())
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let params = self.model.params();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * params.num_scalars() + 64 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for id in params.ids() {
            let name = params.name(id).as_bytes();
            let t = params.get(id);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| Error::Artifact("not a model file".into()))? != MAGIC {
            return Err(Error::Artifact("bad magic: not a model file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Artifact(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Artifact("tensor name is not UTF-8".into()))?
                .to_string();
            let ndims = r.u32()? as usize;
            let shape = (0..ndims)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Artifact(format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Artifact("overflow".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.lookup(&name).is_some() {
                return Err(Error::Artifact(format!("duplicate tensor {name}")));
            }
            let t = Tensor::new(shape, values).map_err(|e| Error::Artifact(format!("tensor {name}: {e}")))?;
            params.add(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Artifact(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Model::from_params(header.config, params)?;
        Self::new(header.name, model, ItemVocab::from_entries(header.vocab))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn model(v: usize) -> Model<f32> {
        let cfg = ModelConfig {
            embedding_dim: 8,
            max_session_length: 5,
            ..ModelConfig::new(v, EncoderKind::MaxPool)
        };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn vocab(v: usize) -> ItemVocab {
        ItemVocab::from_entries((0..v).map(|i| (format!("item{i}"), i as u64)).collect())
    }

    #[test]
    fn index_rows_match_encoder() {
        let m = model(20);
        let idx = build_index(&m).unwrap();
        assert_eq!(idx.len(), 20);
        for i in 0..20 {
            assert_eq!(idx.row(i), m.item_vector(i).unwrap().as_slice());
            let n: f32 = idx.row(i).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let one = build_index(&model(1)).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn topn_basics() {
        let idx = build_index(&model(30)).unwrap();
        let q = idx.row(7).to_vec();
        let top = idx.topn(&q, 5, None).unwrap();
        assert_eq!(top[0].0, 7);
        assert!((top[0].1 - 1.0).abs() < 1e-5);
        let all: HashSet<usize> = (0..30).collect();
        assert!(idx.topn(&q, 5, Some(&all)).unwrap().is_empty());
        assert!(idx.topn(&q, 0, None).is_err());
    }

    #[test]
    fn topn_breaks_ties_by_index() {
        let idx = ItemIndex::from_rows(vec![0.0f32, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2).unwrap();
        let top = idx.topn(&[1.0, 0.0], 4, None).unwrap();
        let order: Vec<usize> = top.iter().map(|p| p.0).collect();
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn artifact_round_trip() {
        let m = model(12);
        let a = ModelArtifact::new("SML-MaxPool-Triplet", m, vocab(12)).unwrap();
        let bytes = a.to_bytes().unwrap();
        let b = ModelArtifact::from_bytes(&bytes).unwrap();
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.name, "SML-MaxPool-Triplet");
        assert_eq!(b.vocab, a.vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ra, rb) = (
            SmlRecommender::new(a.model.clone()).unwrap(),
            SmlRecommender::new(b.model).unwrap(),
        );
        for _ in 0..10 {
            let prefix: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..12)).collect();
            assert_eq!(
                ra.recommend_scored(&prefix, 5).unwrap(),
                rb.recommend_scored(&prefix, 5).unwrap()
            );
        }
    }

    #[test]
    fn artifact_errors() {
        let a = ModelArtifact::new("x", model(4), vocab(4)).unwrap();
        let bytes = a.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelArtifact::from_bytes(&bad), Err(Error::Artifact(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(ModelArtifact::from_bytes(&bad).is_err());
        assert!(ModelArtifact::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelArtifact::new("x", model(4), vocab(5)).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = ModelArtifact::new("x", model(4), vocab(4)).unwrap();
        let mut bytes = a.to_bytes().unwrap();
        // rewrite the header to claim a larger embedding
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + hlen].to_vec()).unwrap();
        let patched = header.replace("\"embedding_dim\":8", "\"embedding_dim\":9");
        assert_ne!(patched, header);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes.split_off(16 + hlen));
        assert!(matches!(ModelArtifact::from_bytes(&out), Err(Error::Artifact(_))));
    }

    #[test]
    fn names() {
        assert_eq!(model_name(EncoderKind::Gru, LossKind::Ncas), "SML-RNN-NCAS");
        assert_eq!(
            model_name(EncoderKind::MaxPool, LossKind::Triplet),
            "SML-MaxPool-Triplet"
        );
    }
}
