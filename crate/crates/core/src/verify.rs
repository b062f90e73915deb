//! Finite-difference suite over every primitive and every neural model at
//! toy dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_diff_check, Activation, CheckReport, GradCheckConfig, Padding, ParamId, ParamStore,
    Tape, Var,
};
use crate::baselines::{AnnBaseline, BaselineConfig, LstmBaseline, SimpleRnn};
use crate::cnn::{CnnBranch, CnnBranchConfig};
use crate::fusion::{CdlnConfig, CdlnNet, DenseHead, LstmCell};
use crate::model::{Mode, ModelSettings};
use crate::rvnn::CompositionNet;
use crate::text::{EmbeddingTable, EncodedEssay};
use crate::{Result, Tensor};

/// Toy CDLN dimensions: embedding 4, conv width 3, pool 2, two rounds,
/// LSTM 8, dense 5×6.
pub fn toy_cdln_config(vocab_size: usize) -> CdlnConfig {
    CdlnConfig {
        vocab_size,
        embedding_dim: 4,
        comp_hidden: vec![6, 6, 6, 6],
        max_sentence_len: 60,
        cnn: CnnBranchConfig {
            max_tokens: 16,
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

/// The same toy dimensions as [`toy_cdln_config`], expressed as model
/// settings, with 8-unit baselines.
pub fn toy_settings() -> ModelSettings {
    let mut s = ModelSettings::default();
    for (key, value) in [
        ("embedding_dim", "4"),
        ("comp_hidden", "6,6,6,6"),
        ("max_tokens", "16"),
        ("conv_width", "3"),
        ("pool_width", "2"),
        ("pool_stride", "2"),
        ("channels", "2"),
        ("rounds", "2"),
        ("lstm_hidden", "8"),
        ("dense_width", "6"),
        ("rnn_hidden", "8"),
        ("ann_hidden", "8"),
        ("lstm_baseline_hidden", "8"),
    ] {
        s.set(key, value).expect("toy settings are valid");
    }
    s
}

fn toy_essay() -> EncodedEssay {
    EncodedEssay {
        ids: vec![2, 5, 3, 7, 4, 9, 6, 2, 8],
        sentences: vec![0..4, 4..9],
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches")
}

/// Store of named random parameters.
fn params(seed: u64, shapes: &[(&str, &[usize])]) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(name, shape)| {
            store
                .add(name, random(&mut rng, shape))
                .expect("unique names")
        })
        .collect();
    (store, ids)
}

/// Weighted sum `Σ c_i y_i` with fixed, distinct coefficients, so that every
/// output element influences the loss differently.
fn reduce(tape: &mut Tape<'_>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[n])?;
    let c = tape.constant(Tensor::vector(
        (0..n).map(|i| 0.5 + 0.37 * i as f64).collect(),
    ));
    tape.dot(c, flat)
}

type Case = (
    String,
    ParamStore,
    Box<dyn Fn(&mut Tape<'_>) -> Result<Var>>,
);

fn primitive_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let (store, id) = params(1, &[("w", &[3, 4]), ("x", &[4]), ("b", &[3])]);
    cases.push((
        "linear".into(),
        store,
        Box::new(move |t| {
            let (w, x, b) = (t.param(id[0]), t.param(id[1]), t.param(id[2]));
            let y = t.linear(w, x, Some(b))?;
            reduce(t, y)
        }),
    ));
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Relu] {
        let (store, id) = params(2, &[("x", &[7])]);
        cases.push((
            format!("activation_{}", act.name()),
            store,
            Box::new(move |t| {
                let x = t.param(id[0]);
                let y = t.activate(x, act);
                reduce(t, y)
            }),
        ));
    }
    let (store, id) = params(3, &[("a", &[5]), ("b", &[5])]);
    cases.push((
        "elementwise".into(),
        store,
        Box::new(move |t| {
            let (a, b) = (t.param(id[0]), t.param(id[1]));
            let s = t.add(a, b)?;
            let d = t.sub(s, b)?;
            let m = t.mul(d, b)?;
            let k = t.scale(m, -1.7);
            let y = t.add_scalar(k, 0.3);
            reduce(t, y)
        }),
    ));
    let (store, id) = params(4, &[("a", &[3]), ("b", &[4])]);
    cases.push((
        "concat_slice_pad".into(),
        store,
        Box::new(move |t| {
            let (a, b) = (t.param(id[0]), t.param(id[1]));
            let c = t.concat(&[a, b, a])?;
            let s = t.slice(c, 2, 6)?;
            let p = t.pad_end(s, 9)?;
            let r = t.reshape(p, &[3, 3])?;
            let sq = t.mul(r, r)?;
            reduce(t, sq)
        }),
    ));
    let (store, id) = params(5, &[("table", &[6, 3])]);
    cases.push((
        "gather_mean_rows".into(),
        store,
        Box::new(move |t| {
            let tbl = t.param(id[0]);
            let g = t.gather(tbl, &[1, 4, 1, 5])?;
            let m = t.mean_rows(g)?;
            let sq = t.mul(m, m)?;
            let s = reduce(t, g)?;
            let q = t.sum(sq);
            t.add(s, q)
        }),
    ));
    for (name, stride, padding) in [
        ("conv1d_valid", 1, Padding::Valid),
        ("conv1d_same", 1, Padding::Same),
        ("conv1d_stride2", 2, Padding::Same),
    ] {
        let (store, id) = params(6, &[("signal", &[2, 9]), ("kernels", &[3, 2, 3])]);
        cases.push((
            name.into(),
            store,
            Box::new(move |t| {
                let (s, k) = (t.param(id[0]), t.param(id[1]));
                let y = t.conv1d(s, k, stride, padding)?;
                let sq = t.mul(y, y)?;
                reduce(t, sq)
            }),
        ));
    }
    let (store, id) = params(7, &[("x", &[2, 10])]);
    cases.push((
        "avgpool1d".into(),
        store,
        Box::new(move |t| {
            let x = t.param(id[0]);
            let a = t.avgpool1d(x, 3, 2)?;
            let b = t.avgpool1d_padded(x, 4, 2, 1, 1)?;
            let sa = t.mul(a, a)?;
            let sb = t.mul(b, b)?;
            let ra = reduce(t, sa)?;
            let rb = reduce(t, sb)?;
            t.add(ra, rb)
        }),
    ));
    let (store, id) = params(8, &[("x", &[12])]);
    cases.push((
        "dropout_fixed_mask".into(),
        store,
        Box::new(move |t| {
            let x = t.param(id[0]);
            let y = t.dropout(x, 0.4, true, 99)?;
            let sq = t.mul(y, y)?;
            reduce(t, sq)
        }),
    ));
    let (store, id) = params(9, &[("a", &[4]), ("b", &[4])]);
    cases.push((
        "dot_squared_error".into(),
        store,
        Box::new(move |t| {
            let (a, b) = (t.param(id[0]), t.param(id[1]));
            let d = t.dot(a, b)?;
            let dv = t.reshape(d, &[1])?;
            t.squared_error(dv, 0.25)
        }),
    ));
    cases
}

fn module_cases() -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let table = EmbeddingTable::new(&mut store, "embedding", 10, 4, &mut rng)?;
    cases.push((
        "embedding_lookup".into(),
        store,
        Box::new(move |t| {
            let rows = table.lookup(t, &[2, 3, 2, 9])?;
            let sq = t.mul(rows, rows)?;
            reduce(t, sq)
        }),
    ));

    let mut store = ParamStore::new();
    let net = CompositionNet::new(
        &mut store,
        "rvnn",
        4,
        &[6, 6, 6, 6],
        60,
        &mut ChaCha8Rng::seed_from_u64(21),
    )?;
    cases.push((
        "compose_pair".into(),
        store,
        Box::new(move |t| {
            let l = t.constant(Tensor::vector(vec![0.3, -0.2, 0.7, 0.1]));
            let r = t.constant(Tensor::vector(vec![-0.5, 0.4, 0.05, 0.9]));
            let (p, s) = net.compose_pair(t, l, r)?;
            let rp = reduce(t, p)?;
            t.add(rp, s)
        }),
    ));

    let mut store = ParamStore::new();
    let toy = toy_cdln_config(10).cnn;
    let branch = CnnBranch::new(&mut store, "cnn", toy, &mut ChaCha8Rng::seed_from_u64(22))?;
    let signal = random(&mut ChaCha8Rng::seed_from_u64(23), &[1, 64]);
    cases.push((
        "cnn_branch".into(),
        store,
        Box::new(move |t| {
            let s = t.constant(signal.clone());
            let y = branch.forward(t, s)?;
            reduce(t, y)
        }),
    ));

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 4, 8, &mut ChaCha8Rng::seed_from_u64(24))?;
    let frames = random(&mut ChaCha8Rng::seed_from_u64(25), &[3, 4]);
    cases.push((
        "lstm_cell".into(),
        store,
        Box::new(move |t| {
            let fs: Vec<Var> = (0..3)
                .map(|i| t.constant(Tensor::vector(frames.row(i).to_vec())))
                .collect();
            let h = cell.forward(t, &fs)?;
            reduce(t, h)
        }),
    ));

    let mut store = ParamStore::new();
    let head = DenseHead::new(
        &mut store,
        "dense",
        8,
        5,
        6,
        &mut ChaCha8Rng::seed_from_u64(26),
    )?;
    let h = random(&mut ChaCha8Rng::seed_from_u64(27), &[8]);
    cases.push((
        "dense_head_train_mode".into(),
        store,
        Box::new(move |t| {
            let x = t.constant(h.clone());
            let y = head.forward(
                t,
                x,
                Mode::Train {
                    seed: 5,
                    dropout: 0.3,
                },
            )?;
            t.squared_error(y, 0.8)
        }),
    ));
    Ok(cases)
}

fn model_cases() -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();
    let essay = toy_essay();

    let mut store = ParamStore::new();
    let net = CdlnNet::new(
        &mut store,
        toy_cdln_config(10),
        &mut ChaCha8Rng::seed_from_u64(30),
    )?;
    let trees = net.rvnn.parse_essay(&store, &net.embeddings, &essay)?;
    let e = essay.clone();
    cases.push((
        "model_cdln".into(),
        store,
        Box::new(move |t| {
            let y = net.forward(
                t,
                &e,
                Mode::Train {
                    seed: 11,
                    dropout: 0.3,
                },
                Some(&trees),
            )?;
            t.squared_error(y, 0.3)
        }),
    ));

    let cfg = |hidden| BaselineConfig {
        vocab_size: 10,
        embedding_dim: 4,
        hidden,
        max_tokens: 16,
    };
    let mut store = ParamStore::new();
    let rnn = SimpleRnn::new(&mut store, cfg(5), &mut ChaCha8Rng::seed_from_u64(31))?;
    let e = essay.clone();
    cases.push((
        "model_rnn".into(),
        store,
        Box::new(move |t| {
            let y = rnn.forward(t, &e)?;
            t.squared_error(y, 0.3)
        }),
    ));

    let mut store = ParamStore::new();
    let ann = AnnBaseline::new(&mut store, cfg(5), &mut ChaCha8Rng::seed_from_u64(32))?;
    let e = essay.clone();
    cases.push((
        "model_ann".into(),
        store,
        Box::new(move |t| {
            let y = ann.forward(
                t,
                &e,
                Mode::Train {
                    seed: 3,
                    dropout: 0.3,
                },
            )?;
            t.squared_error(y, 0.3)
        }),
    ));

    let mut store = ParamStore::new();
    let lstm = LstmBaseline::new(&mut store, cfg(5), &mut ChaCha8Rng::seed_from_u64(33))?;
    cases.push((
        "model_lstm".into(),
        store,
        Box::new(move |t| {
            let y = lstm.forward(t, &essay)?;
            t.squared_error(y, 0.3)
        }),
    ));
    Ok(cases)
}

/// Runs every check, in order: primitives, modules, full models.
pub fn gradcheck_suite(cfg: GradCheckConfig) -> Result<Vec<CheckReport>> {
    let mut cases = primitive_cases();
    cases.extend(module_cases()?);
    cases.extend(model_cases()?);
    cases
        .into_iter()
        .map(|(name, mut store, f)| finite_diff_check(&name, &mut store, f, cfg))
        .collect()
}
