//! Small neural comparison regressors over token embeddings.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{contract_err, Result};
use crate::fusion::{DenseHead, LstmCell};
use crate::model::Mode;
use crate::text::{EmbeddingTable, EncodedEssay};
use crate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Tokens fed to sequence models; longer essays are truncated.
    pub max_tokens: usize,
}

fn token_frames(
    tape: &mut Tape<'_>,
    table: &EmbeddingTable,
    essay: &EncodedEssay,
    max_tokens: usize,
) -> Result<Vec<Var>> {
    if essay.ids.is_empty() {
        return Err(contract_err!("essay has no tokens"));
    }
    let ids = &essay.ids[..essay.ids.len().min(max_tokens.max(1))];
    let rows = table.lookup(tape, ids)?;
    let flat = tape.reshape(rows, &[ids.len() * table.dim])?;
    (0..ids.len())
        .map(|t| tape.slice(flat, t * table.dim, table.dim))
        .collect()
}

/// Elman recurrence `a_t = tanh(W_aa a_{t-1} + W_ax x_t + b_a)` with output
/// `sigmoid(W_ya a_T + b_y)`.
#[derive(Clone, Debug)]
pub struct SimpleRnn {
    pub config: BaselineConfig,
    pub embeddings: EmbeddingTable,
    pub w_aa: ParamId,
    pub w_ax: ParamId,
    pub w_ya: ParamId,
    pub b_a: ParamId,
    pub b_y: ParamId,
}

impl SimpleRnn {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: BaselineConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, h) = (config.embedding_dim, config.hidden);
        let embeddings = EmbeddingTable::new(store, "embedding", config.vocab_size, d, rng)?;
        let b = crate::INIT_BOUND;
        Ok(Self {
            w_aa: store.add_uniform("rnn.w_aa", &[h, h], b, rng)?,
            w_ax: store.add_uniform("rnn.w_ax", &[h, d], b, rng)?,
            w_ya: store.add_uniform("rnn.w_ya", &[1, h], b, rng)?,
            b_a: store.add_uniform("rnn.b_a", &[h], b, rng)?,
            b_y: store.add_uniform("rnn.b_y", &[1], b, rng)?,
            config,
            embeddings,
        })
    }

    /// Runs the recurrence over explicit input frames.
    pub fn forward_frames(&self, tape: &mut Tape<'_>, frames: &[Var]) -> Result<Var> {
        if frames.is_empty() {
            return Err(contract_err!("rnn needs at least one frame"));
        }
        let mut a = tape.constant(Tensor::zeros(&[self.config.hidden]));
        let (w_aa, w_ax, b_a) = (
            tape.param(self.w_aa),
            tape.param(self.w_ax),
            tape.param(self.b_a),
        );
        for &x in frames {
            let rec = tape.linear(w_aa, a, None)?;
            let inp = tape.linear(w_ax, x, Some(b_a))?;
            let z = tape.add(rec, inp)?;
            a = tape.tanh(z);
        }
        let (w_ya, b_y) = (tape.param(self.w_ya), tape.param(self.b_y));
        let y = tape.linear(w_ya, a, Some(b_y))?;
        Ok(tape.sigmoid(y))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, essay: &EncodedEssay) -> Result<Var> {
        let frames = token_frames(tape, &self.embeddings, essay, self.config.max_tokens)?;
        self.forward_frames(tape, &frames)
    }
}

/// Mean of token embeddings through a small relu stack.
#[derive(Clone, Debug)]
pub struct AnnBaseline {
    pub config: BaselineConfig,
    pub embeddings: EmbeddingTable,
    pub head: DenseHead,
}

impl AnnBaseline {
    pub const DEFAULT_HIDDEN: usize = 64;
    pub const LAYERS: usize = 2;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: BaselineConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let embeddings = EmbeddingTable::new(
            store,
            "embedding",
            config.vocab_size,
            config.embedding_dim,
            rng,
        )?;
        let head = DenseHead::new(
            store,
            "ann",
            config.embedding_dim,
            Self::LAYERS,
            config.hidden,
            rng,
        )?;
        Ok(Self {
            config,
            embeddings,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, essay: &EncodedEssay, mode: Mode) -> Result<Var> {
        if essay.ids.is_empty() {
            return Err(contract_err!("essay has no tokens"));
        }
        let rows = self.embeddings.lookup(tape, &essay.ids)?;
        let mean = tape.mean_rows(rows)?;
        self.head.forward(tape, mean, mode)
    }
}

/// Token sequence through one LSTM, then a sigmoid unit.
#[derive(Clone, Debug)]
pub struct LstmBaseline {
    pub config: BaselineConfig,
    pub embeddings: EmbeddingTable,
    pub cell: LstmCell,
    pub head: DenseHead,
}

impl LstmBaseline {
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: BaselineConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let embeddings = EmbeddingTable::new(
            store,
            "embedding",
            config.vocab_size,
            config.embedding_dim,
            rng,
        )?;
        let cell = LstmCell::new(store, "lstm", config.embedding_dim, config.hidden, rng)?;
        let head = DenseHead::new(store, "out", config.hidden, 0, 1, rng)?;
        Ok(Self {
            config,
            embeddings,
            cell,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, essay: &EncodedEssay) -> Result<Var> {
        let frames = token_frames(tape, &self.embeddings, essay, self.config.max_tokens)?;
        let h = self.cell.forward(tape, &frames)?;
        self.head.forward(tape, h, Mode::Eval)
    }
}
