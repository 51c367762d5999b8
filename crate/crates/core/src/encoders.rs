//! Session and item encoders mapping into one `d`-dimensional space.
//!
//! Items go through `embedding → dense-tanh → L2 normalize`. Sessions embed
//! each event (through the shared item table when `common_embedding` is on),
//! run one of the encoder cores, then `dense-tanh` layers and normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, GruVars, ParamId, ParamSet, PoolMode, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    MaxPool,
    AvgPool,
    Gru,
    TextCnn,
}

impl EncoderKind {
    /// Name used in model labels such as `SML-MaxPool-Triplet`.
    pub fn label(self) -> &'static str {
        match self {
            EncoderKind::MaxPool => "MaxPool",
            EncoderKind::AvgPool => "AvgPool",
            EncoderKind::Gru => "RNN",
            EncoderKind::TextCnn => "TextCNN",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxpool" | "max" => Ok(EncoderKind::MaxPool),
            "avgpool" | "avg" | "mean" => Ok(EncoderKind::AvgPool),
            "gru" | "rnn" => Ok(EncoderKind::Gru),
            "textcnn" | "cnn" => Ok(EncoderKind::TextCnn),
            other => Err(Error::InvalidArgument(format!("unknown encoder `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub encoder_kind: EncoderKind,
    pub common_embedding: bool,
    pub normalize_outputs: bool,
    pub max_session_length: usize,
    pub conv_filter_sizes: Vec<usize>,
    pub vocab_size: usize,
    /// Number of dense-tanh layers after the session encoder core.
    pub session_ff_layers: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, encoder_kind: EncoderKind) -> Self {
        Self {
            embedding_dim: 400,
            encoder_kind,
            common_embedding: true,
            normalize_outputs: true,
            max_session_length: 15,
            conv_filter_sizes: vec![1, 3, 5],
            vocab_size,
            session_ff_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.max_session_length == 0 {
            return bad("max_session_length must be positive");
        }
        if self.session_ff_layers == 0 {
            return bad("session_ff_layers must be at least 1");
        }
        if self.encoder_kind == EncoderKind::TextCnn && self.conv_filter_sizes.is_empty() {
            return bad("TextCNN needs at least one filter size");
        }
        if self
            .conv_filter_sizes
            .iter()
            .any(|&k| k == 0 || k > self.max_session_length)
        {
            return bad("conv filter sizes must be in 1..=max_session_length");
        }
        Ok(())
    }

    /// Output channels per convolution filter size.
    pub fn conv_channels(&self) -> usize {
        self.embedding_dim.div_ceil(self.conv_filter_sizes.len().max(1))
    }

    fn max_filter(&self) -> usize {
        self.conv_filter_sizes.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Uniform,
    Zero,
}

/// Every trainable tensor of a configuration, in registration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embedding_dim;
    let v = cfg.vocab_size;
    let mut out = vec![
        ("item.embedding".to_string(), vec![v, d], Init::Uniform),
        ("item.ff.w".to_string(), vec![d, d], Init::Uniform),
        ("item.ff.b".to_string(), vec![d], Init::Zero),
    ];
    if !cfg.common_embedding {
        out.push(("session.embedding".to_string(), vec![v, d], Init::Uniform));
    }
    let mut ff_in = d;
    match cfg.encoder_kind {
        EncoderKind::MaxPool | EncoderKind::AvgPool => {}
        EncoderKind::Gru => {
            for g in ["z", "r", "n"] {
                out.push((format!("session.gru.w_{g}"), vec![d, d], Init::Uniform));
            }
            for g in ["z", "r", "n"] {
                out.push((format!("session.gru.u_{g}"), vec![d, d], Init::Uniform));
            }
            for g in ["z", "r", "n", "hn"] {
                out.push((format!("session.gru.b_{g}"), vec![d], Init::Zero));
            }
        }
        EncoderKind::TextCnn => {
            let c = cfg.conv_channels();
            for &k in &cfg.conv_filter_sizes {
                out.push((format!("session.conv{k}.filters"), vec![k, d, c], Init::Uniform));
                out.push((format!("session.conv{k}.bias"), vec![c], Init::Zero));
            }
            ff_in = c * cfg.conv_filter_sizes.len();
        }
    }
    for l in 0..cfg.session_ff_layers {
        let inp = if l == 0 { ff_in } else { d };
        out.push((format!("session.ff{l}.w"), vec![inp, d], Init::Uniform));
        out.push((format!("session.ff{l}.b"), vec![d], Init::Zero));
    }
    out
}

#[derive(Clone, Debug)]
enum Core {
    Pool(PoolMode),
    Gru([ParamId; 10]),
    TextCnn(Vec<(usize, ParamId, ParamId)>),
}

/// Item and session encoders sharing one metric space.
#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    params: ParamSet<F>,
    item_embedding: ParamId,
    item_ff: (ParamId, ParamId),
    session_table: ParamId,
    core: Core,
    session_ff: Vec<(ParamId, ParamId)>,
}

impl<F: Scalar> Model<F> {
    /// Fresh model: weights and embeddings uniform in `±1/√d`, biases zero.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.embedding_dim as f64).sqrt();
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::Zero => vec![F::zero(); n],
                Init::Uniform => (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect(),
            };
            params.add(name, Tensor::new(shape, values)?);
        }
        Self::from_params(config, params)
    }

    /// [`Model::new`] with a ChaCha8 generator seeded from `seed`.
    pub fn with_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut crate::rng::stream(seed, &[0x1417]))
    }

    /// Binds a parameter set laid out for `config`, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Artifact(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = params
                .lookup(name)
                .ok_or_else(|| Error::Artifact(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Artifact(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
        }
        let id = |n: &str| params.lookup(n).unwrap();
        let core = match config.encoder_kind {
            EncoderKind::MaxPool => Core::Pool(PoolMode::Max),
            EncoderKind::AvgPool => Core::Pool(PoolMode::Mean),
            EncoderKind::Gru => {
                let names = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n", "b_hn"];
                Core::Gru(names.map(|n| id(&format!("session.gru.{n}"))))
            }
            EncoderKind::TextCnn => Core::TextCnn(
                config
                    .conv_filter_sizes
                    .iter()
                    .map(|&k| {
                        (
                            k,
                            id(&format!("session.conv{k}.filters")),
                            id(&format!("session.conv{k}.bias")),
                        )
                    })
                    .collect(),
            ),
        };
        let item_embedding = id("item.embedding");
        let session_table = if config.common_embedding {
            item_embedding
        } else {
            id("session.embedding")
        };
        Ok(Self {
            item_ff: (id("item.ff.w"), id("item.ff.b")),
            session_ff: (0..config.session_ff_layers)
                .map(|l| (id(&format!("session.ff{l}.w")), id(&format!("session.ff{l}.b"))))
                .collect(),
            item_embedding,
            session_table,
            core,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<F> {
        self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            item_embedding: self.item_embedding,
            item_ff: self.item_ff,
            session_table: self.session_table,
            core: self.core.clone(),
            session_ff: self.session_ff.clone(),
        }
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        match items.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(&bad) => Err(Error::IndexOutOfRange {
                index: bad,
                len: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn finish(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        if self.config.normalize_outputs {
            tape.l2_normalize(x)
        } else {
            Ok(x)
        }
    }

    /// Item encodings `[n×d]`, one row per entry of `items`.
    pub fn encode_items(&self, tape: &mut Tape<'_, F>, items: &[usize]) -> Result<Var> {
        self.check_items(items)?;
        let table = tape.param(self.item_embedding);
        let rows = tape.embedding_lookup(table, items)?;
        let (w, b) = (tape.param(self.item_ff.0), tape.param(self.item_ff.1));
        let h = tape.dense(rows, w, b, Activation::Tanh)?;
        self.finish(tape, h)
    }

    pub fn encode_item(&self, tape: &mut Tape<'_, F>, item: usize) -> Result<Var> {
        self.encode_items(tape, &[item])
    }

    /// Session encoding `[d]` of a prefix with `1..=max_session_length` events.
    pub fn encode_session(&self, tape: &mut Tape<'_, F>, prefix: &[usize]) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty session prefix".into()));
        }
        if prefix.len() > self.config.max_session_length {
            return Err(Error::InvalidArgument(format!(
                "prefix of {} events exceeds max_session_length {}",
                prefix.len(),
                self.config.max_session_length
            )));
        }
        let total = self.config.max_session_length + self.config.max_filter() - 1;
        self.encode_session_padded(tape, prefix, total)
    }

    /// `padded_rows` only matters for TextCNN: the prefix is left-padded with
    /// zero rows to that length before convolving.
    pub(crate) fn encode_session_padded(
        &self,
        tape: &mut Tape<'_, F>,
        prefix: &[usize],
        padded_rows: usize,
    ) -> Result<Var> {
        self.check_items(prefix)?;
        let table = tape.param(self.session_table);
        let rows = tape.embedding_lookup(table, prefix)?;
        let len = prefix.len();
        let mut h = match &self.core {
            Core::Pool(mode) => tape.seq_pool(rows, *mode, len)?,
            Core::Gru(ids) => {
                let v = ids.map(|i| tape.param(i));
                let w = GruVars {
                    w_z: v[0],
                    w_r: v[1],
                    w_n: v[2],
                    u_z: v[3],
                    u_r: v[4],
                    u_n: v[5],
                    b_z: v[6],
                    b_r: v[7],
                    b_n: v[8],
                    b_hn: v[9],
                };
                let d = self.config.embedding_dim;
                let h0 = tape.constant(vec![1, d], vec![F::zero(); d])?;
                let h = tape.gru_sequence(rows, &w, h0)?;
                tape.reshape(h, vec![d])?
            }
            Core::TextCnn(convs) => {
                let kmax = self.config.max_filter();
                if padded_rows < len + kmax - 1 {
                    return Err(Error::InvalidArgument(format!(
                        "padded length {padded_rows} too short for prefix {len} and filter {kmax}"
                    )));
                }
                let pad = padded_rows - len;
                let padded = tape.pad_front(rows, pad)?;
                let mut pooled = Vec::with_capacity(convs.len());
                for &(k, f, b) in convs {
                    let (f, b) = (tape.param(f), tape.param(b));
                    let y = tape.conv1d(padded, f, b)?;
                    // keep only windows ending on a real event
                    pooled.push(tape.seq_pool_range(y, PoolMode::Max, pad + 1 - k, len)?);
                }
                tape.concat(&pooled)?
            }
        };
        for &(w, b) in &self.session_ff {
            let (w, b) = (tape.param(w), tape.param(b));
            h = tape.dense(h, w, b, Activation::Tanh)?;
        }
        self.finish(tape, h)
    }

    /// Item encoding as a plain vector.
    pub fn item_vector(&self, item: usize) -> Result<Vec<F>> {
        let mut tape = Tape::new(&self.params);
        let v = self.encode_item(&mut tape, item)?;
        Ok(tape.value(v).to_vec())
    }

    /// All item encodings, row-major `[V×d]`.
    pub fn all_item_vectors(&self) -> Result<Vec<F>> {
        let items: Vec<usize> = (0..self.config.vocab_size).collect();
        let mut out = Vec::with_capacity(items.len() * self.config.embedding_dim);
        for chunk in items.chunks(1024) {
            let mut tape = Tape::new(&self.params);
            let v = self.encode_items(&mut tape, chunk)?;
            out.extend_from_slice(tape.value(v));
        }
        Ok(out)
    }

    /// Session encoding as a plain vector.
    pub fn session_vector(&self, prefix: &[usize]) -> Result<Vec<F>> {
        let mut tape = Tape::new(&self.params);
        let v = self.encode_session(&mut tape, prefix)?;
        Ok(tape.value(v).to_vec())
    }

    /// `1 − d(φ(prefix), ω(item))`; higher is better.
    pub fn score(&self, prefix: &[usize], item: usize) -> Result<F> {
        let mut tape = Tape::new(&self.params);
        let s = self.encode_session(&mut tape, prefix)?;
        let i = self.encode_item(&mut tape, item)?;
        let d = tape.cosine_distance(s, i)?;
        Ok(F::one() - tape.scalar(d))
    }
}
