//! Shared model plumbing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, ParamStore, Tape, Var};
use crate::baselines::{AnnBaseline, BaselineConfig, LstmBaseline, SimpleRnn, SvmConfig, SvmModel};
use crate::cnn::CnnBranchConfig;
use crate::data::{normalize_score, PromptSpec};
use crate::error::{config_err, contract_err, Result};
use crate::fusion::{CdlnConfig, CdlnNet, DenseHead, LstmCell};
use crate::rvnn::{DEFAULT_HIDDEN, DEFAULT_MAX_SENTENCE_LEN};
use crate::text::{EmbeddingTable, EncodedEssay, TokenizedEssay, Vocabulary};
use crate::tfidf::TfidfModel;

/// Forward-pass mode. Training enables dropout with a per-example seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { seed: u64, dropout: f64 },
}

impl Mode {
    pub fn is_training(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Dropout rate and seed for layer `layer`, or rate 0 outside training.
    pub fn dropout_for(self, layer: u64) -> (f64, u64) {
        match self {
            Mode::Eval => (0.0, 0),
            Mode::Train { seed, dropout } => (
                dropout,
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(layer),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Cdln,
    Svm,
    Rnn,
    Ann,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Cdln,
        ModelKind::Svm,
        ModelKind::Rnn,
        ModelKind::Ann,
        ModelKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cdln => "cdln",
            ModelKind::Svm => "svm",
            ModelKind::Rnn => "rnn",
            ModelKind::Ann => "ann",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn is_neural(self) -> bool {
        self != ModelKind::Svm
    }
}

impl FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                config_err!("unknown model '{s}' (expected cdln, svm, rnn, ann or lstm)")
            })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and vocabulary settings for every model kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub embedding_dim: usize,
    pub min_count: usize,
    pub comp_hidden: Vec<usize>,
    pub max_sentence_len: usize,
    pub cnn: CnnBranchConfig,
    pub lstm_hidden: usize,
    pub dense_layers: usize,
    pub dense_width: usize,
    pub rnn_hidden: usize,
    pub ann_hidden: usize,
    pub lstm_baseline_hidden: usize,
    pub svm: SvmConfig,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            embedding_dim: EmbeddingTable::DEFAULT_DIM,
            min_count: 1,
            comp_hidden: DEFAULT_HIDDEN.to_vec(),
            max_sentence_len: DEFAULT_MAX_SENTENCE_LEN,
            cnn: CnnBranchConfig::default(),
            lstm_hidden: LstmCell::DEFAULT_HIDDEN,
            dense_layers: DenseHead::DEFAULT_LAYERS,
            dense_width: DenseHead::DEFAULT_WIDTH,
            rnn_hidden: SimpleRnn::DEFAULT_HIDDEN,
            ann_hidden: AnnBaseline::DEFAULT_HIDDEN,
            lstm_baseline_hidden: LstmBaseline::DEFAULT_HIDDEN,
            svm: SvmConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err!("invalid value '{value}' for {key}"))
}

impl ModelSettings {
    pub const KEYS: [&'static str; 22] = [
        "embedding_dim",
        "min_count",
        "comp_hidden",
        "max_sentence_len",
        "max_tokens",
        "conv_width",
        "pool_width",
        "channels",
        "rounds",
        "conv_stride",
        "pool_stride",
        "padding",
        "lstm_hidden",
        "dense_layers",
        "dense_width",
        "rnn_hidden",
        "ann_hidden",
        "lstm_baseline_hidden",
        "svm_c",
        "svm_gamma",
        "svm_tol",
        "svm_max_passes",
    ];

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "comp_hidden" => {
                self.comp_hidden = value
                    .split(',')
                    .map(|v| parse(key, v))
                    .collect::<Result<_>>()?;
            }
            "max_sentence_len" => self.max_sentence_len = parse(key, value)?,
            "max_tokens" => self.cnn.max_tokens = parse(key, value)?,
            "conv_width" => self.cnn.conv_width = parse(key, value)?,
            "pool_width" => self.cnn.pool_width = parse(key, value)?,
            "channels" => self.cnn.channels = parse(key, value)?,
            "rounds" => self.cnn.rounds = parse(key, value)?,
            "conv_stride" => self.cnn.conv_stride = parse(key, value)?,
            "pool_stride" => self.cnn.pool_stride = parse(key, value)?,
            "padding" => self.cnn.padding = value.trim().parse::<Padding>()?,
            "lstm_hidden" => self.lstm_hidden = parse(key, value)?,
            "dense_layers" => self.dense_layers = parse(key, value)?,
            "dense_width" => self.dense_width = parse(key, value)?,
            "rnn_hidden" => self.rnn_hidden = parse(key, value)?,
            "ann_hidden" => self.ann_hidden = parse(key, value)?,
            "lstm_baseline_hidden" => self.lstm_baseline_hidden = parse(key, value)?,
            "svm_c" => self.svm.c = parse(key, value)?,
            "svm_gamma" => {
                let g: f64 = parse(key, value)?;
                self.svm.gamma = (g != 0.0).then_some(g);
            }
            "svm_tol" => self.svm.tol = parse(key, value)?,
            "svm_max_passes" => self.svm.max_passes = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.cnn;
        let hidden: Vec<String> = self.comp_hidden.iter().map(usize::to_string).collect();
        vec![
            ("embedding_dim", self.embedding_dim.to_string()),
            ("min_count", self.min_count.to_string()),
            ("comp_hidden", hidden.join(",")),
            ("max_sentence_len", self.max_sentence_len.to_string()),
            ("max_tokens", c.max_tokens.to_string()),
            ("conv_width", c.conv_width.to_string()),
            ("pool_width", c.pool_width.to_string()),
            ("channels", c.channels.to_string()),
            ("rounds", c.rounds.to_string()),
            ("conv_stride", c.conv_stride.to_string()),
            ("pool_stride", c.pool_stride.to_string()),
            ("padding", c.padding.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("dense_layers", self.dense_layers.to_string()),
            ("dense_width", self.dense_width.to_string()),
            ("rnn_hidden", self.rnn_hidden.to_string()),
            ("ann_hidden", self.ann_hidden.to_string()),
            (
                "lstm_baseline_hidden",
                self.lstm_baseline_hidden.to_string(),
            ),
            ("svm_c", format!("{:?}", self.svm.c)),
            ("svm_gamma", format!("{:?}", self.svm.gamma.unwrap_or(0.0))),
            ("svm_tol", format!("{:?}", self.svm.tol)),
            ("svm_max_passes", self.svm.max_passes.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("malformed settings line '{line}'"))?;
            if !s.set(k.trim(), v)? {
                return Err(config_err!("unknown settings key '{k}'"));
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.comp_hidden.is_empty() || self.max_sentence_len == 0 {
            return Err(config_err!(
                "embedding_dim, comp_hidden and max_sentence_len must be non-empty/positive"
            ));
        }
        for (k, v) in [
            ("lstm_hidden", self.lstm_hidden),
            ("dense_width", self.dense_width),
            ("rnn_hidden", self.rnn_hidden),
            ("ann_hidden", self.ann_hidden),
            ("lstm_baseline_hidden", self.lstm_baseline_hidden),
        ] {
            if v == 0 {
                return Err(config_err!("{k} must be positive"));
            }
        }
        self.cnn.output_dim(self.embedding_dim)?;
        self.svm.validate()
    }

    pub fn baseline(&self, vocab_size: usize, hidden: usize) -> BaselineConfig {
        BaselineConfig {
            vocab_size,
            embedding_dim: self.embedding_dim,
            hidden,
            max_tokens: self.cnn.max_tokens,
        }
    }

    pub fn cdln(&self, vocab_size: usize) -> CdlnConfig {
        CdlnConfig {
            vocab_size,
            embedding_dim: self.embedding_dim,
            comp_hidden: self.comp_hidden.clone(),
            max_sentence_len: self.max_sentence_len,
            cnn: self.cnn.clone(),
            lstm_hidden: self.lstm_hidden,
            dense_layers: self.dense_layers,
            dense_width: self.dense_width,
        }
    }
}

/// A differentiable grader.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Network {
    Cdln(CdlnNet),
    Rnn(SimpleRnn),
    Ann(AnnBaseline),
    Lstm(LstmBaseline),
}

impl Network {
    pub fn build(
        kind: ModelKind,
        settings: &ModelSettings,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Cdln => Network::Cdln(CdlnNet::new(store, settings.cdln(vocab_size), rng)?),
            ModelKind::Rnn => Network::Rnn(SimpleRnn::new(
                store,
                settings.baseline(vocab_size, settings.rnn_hidden),
                rng,
            )?),
            ModelKind::Ann => Network::Ann(AnnBaseline::new(
                store,
                settings.baseline(vocab_size, settings.ann_hidden),
                rng,
            )?),
            ModelKind::Lstm => Network::Lstm(LstmBaseline::new(
                store,
                settings.baseline(vocab_size, settings.lstm_baseline_hidden),
                rng,
            )?),
            ModelKind::Svm => return Err(contract_err!("the svm is not a differentiable network")),
        })
    }

    /// Normalized grade as a `[1]` tensor.
    pub fn forward(&self, tape: &mut Tape<'_>, essay: &EncodedEssay, mode: Mode) -> Result<Var> {
        match self {
            Network::Cdln(n) => n.forward(tape, essay, mode, None),
            Network::Rnn(n) => n.forward(tape, essay),
            Network::Ann(n) => n.forward(tape, essay, mode),
            Network::Lstm(n) => n.forward(tape, essay),
        }
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        match self {
            Network::Cdln(n) => &n.embeddings,
            Network::Rnn(n) => &n.embeddings,
            Network::Ann(n) => &n.embeddings,
            Network::Lstm(n) => &n.embeddings,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Cdln(_) => ModelKind::Cdln,
            Network::Rnn(_) => ModelKind::Rnn,
            Network::Ann(_) => ModelKind::Ann,
            Network::Lstm(_) => ModelKind::Lstm,
        }
    }
}

/// TF-IDF features with the classifier fitted on them.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmGrader {
    pub tfidf: TfidfModel,
    pub svm: SvmModel,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Body {
    Neural {
        network: Network,
        params: ParamStore,
    },
    /// `None` until fitted.
    Svm(Option<SvmGrader>),
}

/// A model together with everything needed to grade raw text.
#[derive(Clone, Debug)]
pub struct GradingModel {
    pub kind: ModelKind,
    pub settings: ModelSettings,
    pub vocab: Vocabulary,
    pub body: Body,
}

impl GradingModel {
    /// Fresh model with weights drawn from `seed`, stored at single precision.
    pub fn build(
        kind: ModelKind,
        settings: ModelSettings,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        settings.validate()?;
        let body = if kind.is_neural() {
            let mut params = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let network = Network::build(kind, &settings, vocab.len(), &mut params, &mut rng)?;
            params.round_to_f32();
            Body::Neural { network, params }
        } else {
            Body::Svm(None)
        };
        Ok(Self {
            kind,
            settings,
            vocab,
            body,
        })
    }

    pub fn encode(&self, essay: &TokenizedEssay) -> EncodedEssay {
        self.vocab.encode(essay)
    }

    /// Normalized grade in [0, 1] for one essay of the given prompt.
    pub fn predict(&self, essay: &TokenizedEssay, spec: &PromptSpec) -> Result<f64> {
        match &self.body {
            Body::Neural { network, params } => {
                let encoded = self.encode(essay);
                let mut tape = Tape::new(params);
                let y = network.forward(&mut tape, &encoded, Mode::Eval)?;
                Ok(tape.scalar(y))
            }
            Body::Svm(None) => Err(contract_err!("svm model has not been trained")),
            Body::Svm(Some(g)) => {
                let label = g.svm.predict(&g.tfidf.transform(essay))?;
                normalize_score(label.clamp(spec.score_min, spec.score_max), spec)
            }
        }
    }

    /// Copies external word vectors into the embedding table; returns the
    /// number of vocabulary rows replaced. The svm has no embeddings.
    pub fn load_word_vectors(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        match &mut self.body {
            Body::Neural { network, params } => {
                let n = network
                    .embeddings()
                    .load_word_vectors(params, &self.vocab, path)?;
                params.round_to_f32();
                Ok(n)
            }
            Body::Svm(_) => Err(config_err!("the svm does not use word vectors")),
        }
    }

    pub fn params(&self) -> Option<&ParamStore> {
        match &self.body {
            Body::Neural { params, .. } => Some(params),
            Body::Svm(_) => None,
        }
    }
}
