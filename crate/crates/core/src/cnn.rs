//! Idea branch: stacked 1-D convolution and average pooling over the
//! concatenated word embeddings of an essay.

use rand::Rng;

use crate::autodiff::{
    avgpool1d_output_len, conv1d_output_len, Padding, ParamId, ParamStore, Tape, Var,
};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::text::{EmbeddingTable, EncodedEssay, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct CnnBranchConfig {
    pub max_tokens: usize,
    pub conv_width: usize,
    pub pool_width: usize,
    pub channels: usize,
    pub rounds: usize,
    pub conv_stride: usize,
    pub pool_stride: usize,
    pub padding: Padding,
}

impl Default for CnnBranchConfig {
    fn default() -> Self {
        Self {
            max_tokens: 500,
            conv_width: 105,
            pool_width: 90,
            channels: 8,
            rounds: 5,
            conv_stride: 1,
            pool_stride: 4,
            padding: Padding::Same,
        }
    }
}

impl CnnBranchConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("max_tokens", self.max_tokens),
            ("conv_width", self.conv_width),
            ("pool_width", self.pool_width),
            ("channels", self.channels),
            ("rounds", self.rounds),
            ("conv_stride", self.conv_stride),
            ("pool_stride", self.pool_stride),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("cnn {name} must be positive"));
        }
        Ok(())
    }

    /// Zeros added around each pooling input, split left/right. With
    /// `window >= stride` the pooled length is `floor(L / stride)`.
    pub fn pool_padding(&self) -> (usize, usize) {
        let total = self.pool_width.saturating_sub(self.pool_stride);
        (total / 2, total - total / 2)
    }

    /// Per-round lengths after pooling, starting from a signal of `len`.
    pub fn round_lengths(&self, len: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let (pl, pr) = self.pool_padding();
        let mut lengths = Vec::with_capacity(self.rounds);
        let mut cur = len;
        for round in 1..=self.rounds {
            let conv = conv1d_output_len(cur, self.conv_width, self.conv_stride, self.padding);
            let pooled = conv
                .and_then(|l| avgpool1d_output_len(l + pl + pr, self.pool_width, self.pool_stride));
            cur = pooled.filter(|&l| l > 0).ok_or_else(|| {
                dim_err!(
                    "cnn round {round}: signal of length {cur} too short for conv {} / pool {}",
                    self.conv_width,
                    self.pool_width
                )
            })?;
            lengths.push(cur);
        }
        Ok(lengths)
    }

    /// Flattened output width for an embedding width `dim`.
    pub fn output_dim(&self, dim: usize) -> Result<usize> {
        let lengths = self.round_lengths(self.max_tokens * dim)?;
        Ok(lengths.last().copied().unwrap_or(0) * self.channels)
    }
}

#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub config: CnnBranchConfig,
    kernels: Vec<ParamId>,
}

impl CnnBranch {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: CnnBranchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut kernels = Vec::with_capacity(config.rounds);
        for round in 0..config.rounds {
            let c_in = if round == 0 { 1 } else { config.channels };
            kernels.push(store.add_uniform(
                &format!("{prefix}.round{round}.kernel"),
                &[config.channels, c_in, config.conv_width],
                crate::INIT_BOUND,
                rng,
            )?);
        }
        Ok(Self { config, kernels })
    }

    pub fn kernels(&self) -> &[ParamId] {
        &self.kernels
    }

    /// Runs every round on a `[1 × L]` signal and flattens channel-major.
    pub fn forward(&self, tape: &mut Tape<'_>, signal: Var) -> Result<Var> {
        let shape = tape.value(signal).shape().to_vec();
        if shape.len() != 2 || shape[0] != 1 {
            return Err(dim_err!("cnn signal must be [1 × L], got {shape:?}"));
        }
        let cfg = &self.config;
        self.config.round_lengths(shape[1])?;
        let (pl, pr) = cfg.pool_padding();
        let mut x = signal;
        for &k in &self.kernels {
            let kernel = tape.param(k);
            let conv = tape.conv1d(x, kernel, cfg.conv_stride, cfg.padding)?;
            let act = tape.relu(conv);
            x = tape.avgpool1d_padded(act, cfg.pool_width, cfg.pool_stride, pl, pr)?;
        }
        let n = tape.value(x).len();
        tape.reshape(x, &[n])
    }
}

/// Concatenates the first `max_tokens` embeddings into a `[1 × max_tokens·dim]`
/// signal, zero-filled past the essay's end.
pub fn essay_signal(
    tape: &mut Tape<'_>,
    essay: &EncodedEssay,
    table: &EmbeddingTable,
    max_tokens: usize,
) -> Result<Var> {
    if max_tokens == 0 {
        return Err(contract_err!("max_tokens must be at least 1"));
    }
    if essay.ids.iter().all(|&id| id == Vocabulary::PAD) {
        return Err(contract_err!("essay has no tokens"));
    }
    let used = &essay.ids[..essay.ids.len().min(max_tokens)];
    let rows = table.lookup(tape, used)?;
    let flat = tape.reshape(rows, &[used.len() * table.dim])?;
    let padded = tape.pad_end(flat, max_tokens * table.dim)?;
    tape.reshape(padded, &[1, max_tokens * table.dim])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckConfig};
    use crate::Tensor;

    fn toy() -> CnnBranchConfig {
        CnnBranchConfig {
            max_tokens: 6,
            conv_width: 3,
            pool_width: 2,
            channels: 2,
            rounds: 2,
            conv_stride: 1,
            pool_stride: 2,
            padding: Padding::Same,
        }
    }

    fn essay(ids: Vec<usize>) -> EncodedEssay {
        let n = ids.len();
        EncodedEssay {
            ids,
            sentences: std::iter::once(0..n).collect(),
        }
    }

    #[test]
    fn default_round_lengths() {
        let cfg = CnnBranchConfig::default();
        assert_eq!(
            cfg.round_lengths(50_000).unwrap(),
            vec![12_500, 3_125, 781, 195, 48]
        );
        assert_eq!(cfg.output_dim(100).unwrap(), 384);
    }

    #[test]
    fn too_short_signal_names_the_round() {
        let cfg = CnnBranchConfig::default();
        let err = cfg.round_lengths(100).unwrap_err().to_string();
        assert!(err.contains("round 4"), "{err}");
    }

    #[test]
    fn signal_padding_and_truncation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = EmbeddingTable::new(&mut store, "emb", 10, 100, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let s = essay_signal(&mut tape, &essay(vec![2, 3, 4]), &table, 500).unwrap();
        let v = tape.value(s);
        assert_eq!(v.shape(), &[1, 50_000]);
        assert_eq!(&v.data()[..100], table.row(&store, 2));
        assert!(v.data()[300..].iter().all(|&x| x == 0.0));

        let long = essay((0..600).map(|i| 2 + i % 8).collect());
        let s = essay_signal(&mut tape, &long, &table, 500).unwrap();
        assert_eq!(
            &tape.value(s).data()[49_900..],
            table.row(&store, 2 + 499 % 8)
        );

        let pads = essay(vec![Vocabulary::PAD; 4]);
        assert!(essay_signal(&mut tape, &pads, &table, 500).is_err());
        assert!(essay_signal(&mut tape, &essay(vec![]), &table, 500).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_output_and_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let branch = CnnBranch::new(&mut store, "cnn", toy(), &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let zero = tape.constant(Tensor::zeros(&[1, 24]));
        let out = branch.forward(&mut tape, zero).unwrap();
        assert_eq!(tape.value(out).shape(), &[toy().output_dim(4).unwrap()]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        let signal: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = tape.constant(Tensor::new(vec![1, 24], signal.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 24], signal).unwrap());
        let (ya, yb) = (
            branch.forward(&mut tape, a).unwrap(),
            branch.forward(&mut tape, b).unwrap(),
        );
        assert_eq!(tape.value(ya).data(), tape.value(yb).data());
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let branch = CnnBranch::new(&mut store, "cnn", toy(), &mut rng).unwrap();
        let signal: Vec<f64> = (0..24).map(|i| (i as f64 * 0.61).cos()).collect();
        let report = finite_diff_check(
            "cnn_branch",
            &mut store,
            |tape| {
                let s = tape.constant(Tensor::new(vec![1, 24], signal.clone())?);
                let y = branch.forward(tape, s)?;
                let w = tape.constant(Tensor::vector(
                    (0..tape.value(y).len()).map(|i| 1.0 + i as f64).collect(),
                ));
                tape.dot(w, y)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }
}
