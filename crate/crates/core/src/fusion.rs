//! Fusion of the idea and structure branches: framed LSTM then a dense head.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cnn::{essay_signal, CnnBranch, CnnBranchConfig};
use crate::error::{contract_err, dim_err, Result};
use crate::model::Mode;
use crate::rvnn::{CompositionNet, Tree, DEFAULT_HIDDEN, DEFAULT_MAX_SENTENCE_LEN};
use crate::text::{EmbeddingTable, EncodedEssay};

/// Concatenates `[cnn_out ; rvnn_out]`, zero-pads to a multiple of `frame`
/// and slices consecutive frames.
pub fn fuse_vectors(
    tape: &mut Tape<'_>,
    cnn_out: Var,
    rvnn_out: Var,
    frame: usize,
) -> Result<Vec<Var>> {
    if frame == 0 {
        return Err(contract_err!("frame width must be positive"));
    }
    for v in [cnn_out, rvnn_out] {
        if tape.value(v).rank() != 1 || tape.value(v).is_empty() {
            return Err(dim_err!(
                "fusion inputs must be non-empty vectors, got {:?}",
                tape.value(v).shape()
            ));
        }
    }
    let joined = tape.concat(&[cnn_out, rvnn_out])?;
    let len = tape.value(joined).len();
    let frames = len.div_ceil(frame);
    let padded = tape.pad_end(joined, frames * frame)?;
    (0..frames)
        .map(|f| tape.slice(padded, f * frame, frame))
        .collect()
}

#[derive(Clone, Debug)]
struct Gate {
    weight: ParamId,
    bias: ParamId,
}

/// LSTM with input, forget, output and candidate gates over `[x ; h]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    gates: Vec<Gate>,
}

impl LstmCell {
    pub const DEFAULT_HIDDEN: usize = 256;
    const GATES: [&'static str; 4] = ["input", "forget", "output", "candidate"];

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(contract_err!("lstm widths must be positive"));
        }
        let mut gates = Vec::new();
        for g in Self::GATES {
            gates.push(Gate {
                weight: store.add_uniform(
                    &format!("{prefix}.{g}.weight"),
                    &[hidden, input + hidden],
                    crate::INIT_BOUND,
                    rng,
                )?,
                bias: store.add_uniform(
                    &format!("{prefix}.{g}.bias"),
                    &[hidden],
                    crate::INIT_BOUND,
                    rng,
                )?,
            });
        }
        Ok(Self {
            input,
            hidden,
            gates,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.gates.iter().flat_map(|g| [g.weight, g.bias]).collect()
    }

    /// Runs the recurrence from zero state and returns the final hidden state.
    pub fn forward(&self, tape: &mut Tape<'_>, frames: &[Var]) -> Result<Var> {
        if frames.is_empty() {
            return Err(contract_err!("lstm needs at least one frame"));
        }
        let mut h = tape.constant(crate::Tensor::zeros(&[self.hidden]));
        let mut c = tape.constant(crate::Tensor::zeros(&[self.hidden]));
        for &x in frames {
            if tape.value(x).shape() != [self.input] {
                return Err(dim_err!(
                    "lstm frame {:?} does not match input width {}",
                    tape.value(x).shape(),
                    self.input
                ));
            }
            let xh = tape.concat(&[x, h])?;
            let mut pre = Vec::with_capacity(4);
            for gate in &self.gates {
                let (w, b) = (tape.param(gate.weight), tape.param(gate.bias));
                pre.push(tape.linear(w, xh, Some(b))?);
            }
            let i = tape.sigmoid(pre[0]);
            let f = tape.sigmoid(pre[1]);
            let o = tape.sigmoid(pre[2]);
            let g = tape.tanh(pre[3]);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c);
            h = tape.mul(o, squashed)?;
        }
        Ok(h)
    }
}

/// Stack of relu layers with dropout, then a single sigmoid unit.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub input: usize,
    hidden: Vec<(ParamId, ParamId)>,
    output: (ParamId, ParamId),
}

impl DenseHead {
    pub const DEFAULT_LAYERS: usize = 5;
    pub const DEFAULT_WIDTH: usize = 120;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        layers: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || width == 0 {
            return Err(contract_err!("dense head widths must be positive"));
        }
        let mut hidden = Vec::with_capacity(layers);
        let mut fan_in = input;
        for l in 0..layers {
            hidden.push((
                store.add_uniform(
                    &format!("{prefix}.hidden{l}.weight"),
                    &[width, fan_in],
                    crate::INIT_BOUND,
                    rng,
                )?,
                store.add_uniform(
                    &format!("{prefix}.hidden{l}.bias"),
                    &[width],
                    crate::INIT_BOUND,
                    rng,
                )?,
            ));
            fan_in = width;
        }
        let output = (
            store.add_uniform(
                &format!("{prefix}.out.weight"),
                &[1, fan_in],
                crate::INIT_BOUND,
                rng,
            )?,
            store.add_uniform(&format!("{prefix}.out.bias"), &[1], crate::INIT_BOUND, rng)?,
        );
        Ok(Self {
            input,
            hidden,
            output,
        })
    }

    pub fn layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .chain([&self.output])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Returns a `[1]` tensor in (0, 1).
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var, mode: Mode) -> Result<Var> {
        if tape.value(h).shape() != [self.input] {
            return Err(contract_err!(
                "dense head expects width {}, got {:?}",
                self.input,
                tape.value(h).shape()
            ));
        }
        let mut x = h;
        for (l, &(w, b)) in self.hidden.iter().enumerate() {
            let (w, b) = (tape.param(w), tape.param(b));
            let z = tape.linear(w, x, Some(b))?;
            let a = tape.relu(z);
            let (rate, seed) = mode.dropout_for(l as u64);
            x = tape.dropout(a, rate, mode.is_training(), seed)?;
        }
        let (w, b) = (tape.param(self.output.0), tape.param(self.output.1));
        let z = tape.linear(w, x, Some(b))?;
        Ok(tape.sigmoid(z))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdlnConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub comp_hidden: Vec<usize>,
    pub max_sentence_len: usize,
    pub cnn: CnnBranchConfig,
    pub lstm_hidden: usize,
    pub dense_layers: usize,
    pub dense_width: usize,
}

impl CdlnConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: EmbeddingTable::DEFAULT_DIM,
            comp_hidden: DEFAULT_HIDDEN.to_vec(),
            max_sentence_len: DEFAULT_MAX_SENTENCE_LEN,
            cnn: CnnBranchConfig::default(),
            lstm_hidden: LstmCell::DEFAULT_HIDDEN,
            dense_layers: DenseHead::DEFAULT_LAYERS,
            dense_width: DenseHead::DEFAULT_WIDTH,
        }
    }
}

/// Parameter handles of the full network; values live in a `ParamStore`.
#[derive(Clone, Debug)]
pub struct CdlnNet {
    pub config: CdlnConfig,
    pub embeddings: EmbeddingTable,
    pub rvnn: CompositionNet,
    pub cnn: CnnBranch,
    pub lstm: LstmCell,
    pub head: DenseHead,
}

impl CdlnNet {
    pub fn new<R: Rng>(store: &mut ParamStore, config: CdlnConfig, rng: &mut R) -> Result<Self> {
        let d = config.embedding_dim;
        config.cnn.output_dim(d)?;
        let embeddings = EmbeddingTable::new(store, "embedding", config.vocab_size, d, rng)?;
        let rvnn = CompositionNet::new(
            store,
            "rvnn",
            d,
            &config.comp_hidden,
            config.max_sentence_len,
            rng,
        )?;
        let cnn = CnnBranch::new(store, "cnn", config.cnn.clone(), rng)?;
        let lstm = LstmCell::new(store, "lstm", d, config.lstm_hidden, rng)?;
        let head = DenseHead::new(
            store,
            "dense",
            config.lstm_hidden,
            config.dense_layers,
            config.dense_width,
            rng,
        )?;
        Ok(Self {
            config,
            embeddings,
            rvnn,
            cnn,
            lstm,
            head,
        })
    }

    /// Normalized grade as a `[1]` tensor. `trees` freezes the sentence
    /// bracketings; when `None` they are parsed from current parameters.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        essay: &EncodedEssay,
        mode: Mode,
        trees: Option<&[Tree]>,
    ) -> Result<Var> {
        let signal = essay_signal(tape, essay, &self.embeddings, self.config.cnn.max_tokens)?;
        let idea = self.cnn.forward(tape, signal)?;
        let structure = self
            .rvnn
            .essay_struct_vector(tape, &self.embeddings, essay, trees)?;
        let frames = fuse_vectors(tape, idea, structure, self.config.embedding_dim)?;
        let h = self.lstm.forward(tape, &frames)?;
        self.head.forward(tape, h, mode)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckConfig, Padding};
    use crate::Tensor;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn fuse_frames() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let cnn = tape.constant(Tensor::filled(&[384], 1.0));
        let rv = tape.constant(Tensor::zeros(&[100]));
        let frames = fuse_vectors(&mut tape, cnn, rv, 100).unwrap();
        assert_eq!(frames.len(), 5);
        assert!(tape.value(frames[4]).data()[84..].iter().all(|&v| v == 0.0));
        assert!(tape.value(frames[3]).data()[..84].iter().all(|&v| v == 1.0));

        let cnn = tape.constant(Tensor::filled(&[100], 2.0));
        let frames = fuse_vectors(&mut tape, cnn, rv, 100).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(tape.value(frames[1]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        zero_all(&mut store);
        let mut tape = Tape::new(&store);
        let frames: Vec<_> = (0..3)
            .map(|i| tape.constant(Tensor::filled(&[3], i as f64)))
            .collect();
        let h = cell.forward(&mut tape, &frames).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 4]);
        assert!(cell.forward(&mut tape, &[]).is_err());
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        let report = finite_diff_check(
            "lstm",
            &mut store,
            |tape| {
                let frames: Vec<_> = (0..3)
                    .map(|i| {
                        tape.constant(Tensor::vector(vec![0.5 - i as f64, 0.3 * i as f64, 0.9]))
                    })
                    .collect();
                let h = cell.forward(tape, &frames)?;
                let w = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]));
                tape.dot(w, h)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn dense_head_range_and_zero_network() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = DenseHead::new(&mut store, "dense", 4, 5, 6, &mut rng).unwrap();
        assert_eq!(head.layers(), 5);
        {
            let mut tape = Tape::new(&store);
            let h = tape.constant(Tensor::vector(vec![50.0, -80.0, 3.0, 1e3]));
            let a = head.forward(&mut tape, h, Mode::Eval).unwrap();
            let b = head.forward(&mut tape, h, Mode::Eval).unwrap();
            let y = tape.scalar(a);
            assert!(y > 0.0 && y < 1.0);
            assert_eq!(y, tape.scalar(b));
            let bad = tape.constant(Tensor::zeros(&[3]));
            assert!(head.forward(&mut tape, bad, Mode::Eval).is_err());
        }
        zero_all(&mut store);
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let y = head.forward(&mut tape, h, Mode::Eval).unwrap();
        assert_eq!(tape.scalar(y), 0.5);
    }

    fn toy_config() -> CdlnConfig {
        CdlnConfig {
            vocab_size: 12,
            embedding_dim: 4,
            comp_hidden: vec![6, 6, 6, 6],
            max_sentence_len: 60,
            cnn: CnnBranchConfig {
                max_tokens: 8,
                conv_width: 3,
                pool_width: 2,
                channels: 2,
                rounds: 2,
                conv_stride: 1,
                pool_stride: 2,
                padding: Padding::Same,
            },
            lstm_hidden: 8,
            dense_layers: 5,
            dense_width: 6,
        }
    }

    #[test]
    fn cdln_forward_is_deterministic_and_bounded() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = CdlnNet::new(&mut store, toy_config(), &mut rng).unwrap();
        let essay = EncodedEssay {
            ids: vec![2, 3, 4, 5, 6, 7, 8],
            sentences: vec![0..4, 4..7],
        };
        let mut tape = Tape::new(&store);
        let a = net.forward(&mut tape, &essay, Mode::Eval, None).unwrap();
        let b = net.forward(&mut tape, &essay, Mode::Eval, None).unwrap();
        assert_eq!(tape.scalar(a), tape.scalar(b));
        assert!(tape.scalar(a) > 0.0 && tape.scalar(a) < 1.0);
    }
}
