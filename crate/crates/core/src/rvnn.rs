//! Structural branch: recursive composition of word vectors over a span chart.
//!
//! Every span `(i, j)` of a sentence stores its best score, the composed
//! vector of its best bracketing and the split that attains it. Leaves score
//! zero and carry their embedding. An internal span maximizes
//! `A[i,k] + A[k+1,j] + s` over splits `k`, where `s` is the score of
//! composing the two children's vectors. Ties go to the smaller split.
//!
//! Gradients flow through the selected bracketing only: the argmax is taken
//! with plain arithmetic and the winning tree is then replayed on the tape.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, EncodedEssay};

pub const DEFAULT_HIDDEN: [usize; 4] = [150, 150, 150, 150];
pub const DEFAULT_MAX_SENTENCE_LEN: usize = 60;

/// Composition stack `2d → hidden… → d` with tanh after every layer, plus
/// the scoring vector.
#[derive(Clone, Debug)]
pub struct CompositionNet {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub max_sentence_len: usize,
    layers: Vec<(ParamId, ParamId)>,
    score: ParamId,
}

impl CompositionNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: &[usize],
        max_sentence_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) || max_sentence_len == 0 {
            return Err(contract_err!(
                "composition widths and sentence cap must be positive"
            ));
        }
        let mut widths = vec![2 * dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut layers = Vec::new();
        for (l, w) in widths.windows(2).enumerate() {
            let wid = store.add_uniform(
                &format!("{prefix}.layer{l}.weight"),
                &[w[1], w[0]],
                crate::INIT_BOUND,
                rng,
            )?;
            let bid = store.add_uniform(
                &format!("{prefix}.layer{l}.bias"),
                &[w[1]],
                crate::INIT_BOUND,
                rng,
            )?;
            layers.push((wid, bid));
        }
        let score =
            store.add_uniform(&format!("{prefix}.score"), &[dim], crate::INIT_BOUND, rng)?;
        Ok(Self {
            dim,
            hidden: hidden.to_vec(),
            max_sentence_len,
            layers,
            score,
        })
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn score_param(&self) -> ParamId {
        self.score
    }

    /// Composes two child vectors on the tape, returning `(p, s)`.
    pub fn compose_pair(&self, tape: &mut Tape<'_>, left: Var, right: Var) -> Result<(Var, Var)> {
        for v in [left, right] {
            if tape.value(v).shape() != [self.dim] {
                return Err(contract_err!(
                    "child vector {:?} does not match composition width {}",
                    tape.value(v).shape(),
                    self.dim
                ));
            }
        }
        let mut h = tape.concat(&[left, right])?;
        for &(w, b) in &self.layers {
            let (w, b) = (tape.param(w), tape.param(b));
            let z = tape.linear(w, h, Some(b))?;
            h = tape.tanh(z);
        }
        let score = tape.param(self.score);
        let s = tape.dot(score, h)?;
        Ok((h, s))
    }

    /// Plain-arithmetic composition, returning `(p, s)`.
    pub fn compose_values(
        &self,
        store: &ParamStore,
        left: &[f64],
        right: &[f64],
    ) -> Result<(Vec<f64>, f64)> {
        if left.len() != self.dim || right.len() != self.dim {
            return Err(contract_err!("child vectors must have width {}", self.dim));
        }
        let mut h: Vec<f64> = left.iter().chain(right).copied().collect();
        for &(w, b) in &self.layers {
            let (wt, bt) = (store.value(w), store.value(b));
            let (m, n) = (wt.shape()[0], wt.shape()[1]);
            let mut out = vec![0.0; m];
            crate::autodiff::matvec(wt.data(), m, n, &h, &mut out);
            for (o, bv) in out.iter_mut().zip(bt.data()) {
                *o = (*o + bv).tanh();
            }
            h = out;
        }
        let s = dot(store.value(self.score).data(), &h);
        Ok((h, s))
    }

    /// Fills the span chart for one sentence given its leaf vectors.
    pub fn parse_sentence(&self, store: &ParamStore, leaves: &Tensor) -> Result<SentenceParse> {
        if leaves.rank() != 2 || leaves.shape()[1] != self.dim {
            return Err(dim_err!(
                "leaf matrix {:?} must be [T × {}]",
                leaves.shape(),
                self.dim
            ));
        }
        let mut t = leaves.shape()[0];
        if t == 0 {
            return Err(contract_err!("cannot parse an empty sentence"));
        }
        if t > self.max_sentence_len {
            log::warn!(
                "sentence of {t} tokens truncated to {}",
                self.max_sentence_len
            );
            t = self.max_sentence_len;
        }
        let mut chart = SpanChart::new(t, self.dim);
        for i in 0..t {
            chart.set(i, i, 0.0, leaves.row(i).to_vec(), None);
        }
        let compositions = self.fill_chart(store, &mut chart);
        let root_score = chart.score(0, t - 1);
        let root_vector = chart.vector(0, t - 1).to_vec();
        Ok(SentenceParse {
            chart,
            root_vector,
            root_score,
            compositions,
        })
    }

    fn fill_chart(&self, store: &ParamStore, chart: &mut SpanChart) -> usize {
        let (t, d) = (chart.len, self.dim);
        let (w0, b0) = (store.value(self.layers[0].0), store.value(self.layers[0].1));
        let h1 = w0.shape()[0];
        // Per-span projections through the left and right halves of the first layer.
        let mut left_proj = vec![Vec::new(); t * t];
        let mut right_proj = vec![Vec::new(); t * t];
        let project = |c: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut l = vec![0.0; h1];
            let mut r = b0.data().to_vec();
            for row in 0..h1 {
                let w = &w0.data()[row * 2 * d..(row + 1) * 2 * d];
                l[row] = dot(&w[..d], c);
                r[row] += dot(&w[d..], c);
            }
            (l, r)
        };
        for i in 0..t {
            let (l, r) = project(chart.vector(i, i));
            left_proj[i * t + i] = l;
            right_proj[i * t + i] = r;
        }
        let score_w = store.value(self.score).data();
        let mut total = 0;
        for width in 2..=t {
            let spans = t - width + 1;
            let per_span = width - 1;
            let n = spans * per_span;
            total += n;
            let mut x = vec![0.0; n * h1];
            for i in 0..spans {
                let j = i + width - 1;
                for k in i..j {
                    let row = &mut x[(i * per_span + (k - i)) * h1..][..h1];
                    let (l, r) = (&left_proj[i * t + k], &right_proj[(k + 1) * t + j]);
                    for ((o, a), b) in row.iter_mut().zip(l).zip(r) {
                        *o = (a + b).tanh();
                    }
                }
            }
            let mut cols = h1;
            for &(w, b) in &self.layers[1..] {
                let (wt, bt) = (store.value(w), store.value(b));
                let out = wt.shape()[0];
                let mut y = vec![0.0; n * out];
                // y[n × out] = x[n × cols] · Wᵀ, W stored [out × cols] row-major.
                unsafe {
                    matrixmultiply::dgemm(
                        n,
                        cols,
                        out,
                        1.0,
                        x.as_ptr(),
                        cols as isize,
                        1,
                        wt.data().as_ptr(),
                        1,
                        cols as isize,
                        0.0,
                        y.as_mut_ptr(),
                        out as isize,
                        1,
                    );
                }
                for row in y.chunks_exact_mut(out) {
                    for (v, bv) in row.iter_mut().zip(bt.data()) {
                        *v = (*v + bv).tanh();
                    }
                }
                x = y;
                cols = out;
            }
            for i in 0..spans {
                let j = i + width - 1;
                let mut best: Option<(f64, usize)> = None;
                for k in i..j {
                    let p = &x[(i * per_span + (k - i)) * d..][..d];
                    let total = chart.score(i, k) + chart.score(k + 1, j) + dot(score_w, p);
                    if best.is_none_or(|(b, _)| total > b) {
                        best = Some((total, k));
                    }
                }
                let (score, k) = best.expect("width >= 2 has a split");
                let p = x[(i * per_span + (k - i)) * d..][..d].to_vec();
                let (l, r) = project(&p);
                left_proj[i * t + j] = l;
                right_proj[i * t + j] = r;
                chart.set(i, j, score, p, Some(k));
            }
        }
        total
    }

    /// Replays `tree` over `leaves` (one tape vector per token) and returns the
    /// root vector.
    pub fn replay(&self, tape: &mut Tape<'_>, leaves: &[Var], tree: &Tree) -> Result<Var> {
        match tree {
            Tree::Leaf(i) => leaves
                .get(*i)
                .copied()
                .ok_or_else(|| contract_err!("tree leaf {i} beyond {} tokens", leaves.len())),
            Tree::Node(l, r) => {
                let lv = self.replay(tape, leaves, l)?;
                let rv = self.replay(tape, leaves, r)?;
                Ok(self.compose_pair(tape, lv, rv)?.0)
            }
        }
    }

    fn sentence_ids<'a>(&self, essay: &'a EncodedEssay) -> Vec<&'a [usize]> {
        essay
            .sentences
            .iter()
            .map(|r| &essay.ids[r.start..r.end.min(r.start + self.max_sentence_len)])
            .collect()
    }

    /// Best bracketing of every sentence of `essay`, computed without a tape.
    pub fn parse_essay(
        &self,
        store: &ParamStore,
        table: &EmbeddingTable,
        essay: &EncodedEssay,
    ) -> Result<Vec<Tree>> {
        if essay.sentences.is_empty() {
            return Err(contract_err!("essay has no sentences"));
        }
        let emb = store.value(table.param);
        self.sentence_ids(essay)
            .into_iter()
            .map(|ids| {
                let rows: Vec<f64> = ids
                    .iter()
                    .flat_map(|&i| emb.row(i).iter().copied())
                    .collect();
                let leaves = Tensor::new(vec![ids.len(), table.dim], rows)?;
                Ok(self.parse_sentence(store, &leaves)?.chart.tree())
            })
            .collect()
    }

    /// Sum of per-sentence root vectors, recorded on the tape.
    ///
    /// `trees` freezes the bracketings; when `None` they are parsed first.
    pub fn essay_struct_vector(
        &self,
        tape: &mut Tape<'_>,
        table: &EmbeddingTable,
        essay: &EncodedEssay,
        trees: Option<&[Tree]>,
    ) -> Result<Var> {
        let parsed;
        let trees = match trees {
            Some(t) => t,
            None => {
                parsed = self.parse_essay(tape.params(), table, essay)?;
                &parsed
            }
        };
        let sentences = self.sentence_ids(essay);
        if trees.len() != sentences.len() {
            return Err(contract_err!(
                "{} trees for {} sentences",
                trees.len(),
                sentences.len()
            ));
        }
        let mut total: Option<Var> = None;
        for (ids, tree) in sentences.iter().zip(trees) {
            let rows = table.lookup(tape, ids)?;
            let flat = tape.reshape(rows, &[ids.len() * table.dim])?;
            let leaves = (0..ids.len())
                .map(|i| tape.slice(flat, i * table.dim, table.dim))
                .collect::<Result<Vec<_>>>()?;
            let root = self.replay(tape, &leaves, tree)?;
            total = Some(match total {
                None => root,
                Some(acc) => tape.add(acc, root)?,
            });
        }
        Ok(total.expect("at least one sentence"))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A binary bracketing over sentence positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tree {
    Leaf(usize),
    Node(Box<Tree>, Box<Tree>),
}

impl Tree {
    pub fn leaves(&self) -> usize {
        match self {
            Tree::Leaf(_) => 1,
            Tree::Node(l, r) => l.leaves() + r.leaves(),
        }
    }

    pub fn compositions(&self) -> usize {
        self.leaves() - 1
    }

    /// Renders the bracketing with token labels, e.g. `((the dog) (is here))`.
    pub fn render(&self, tokens: &[String]) -> String {
        let mut out = String::new();
        self.render_into(tokens, &mut out);
        out
    }

    fn render_into(&self, tokens: &[String], out: &mut String) {
        match self {
            Tree::Leaf(i) => out.push_str(tokens.get(*i).map_or("?", String::as_str)),
            Tree::Node(l, r) => {
                out.push('(');
                l.render_into(tokens, out);
                out.push(' ');
                r.render_into(tokens, out);
                out.push(')');
            }
        }
    }
}

/// Triangular table of best scores, vectors and splits for one sentence.
#[derive(Clone, Debug)]
pub struct SpanChart {
    len: usize,
    dim: usize,
    scores: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    splits: Vec<Option<usize>>,
}

impl SpanChart {
    fn new(len: usize, dim: usize) -> Self {
        Self {
            len,
            dim,
            scores: vec![f64::NAN; len * len],
            vectors: vec![Vec::new(); len * len],
            splits: vec![None; len * len],
        }
    }

    fn set(&mut self, i: usize, j: usize, score: f64, vector: Vec<f64>, split: Option<usize>) {
        let at = i * self.len + j;
        self.scores[at] = score;
        self.vectors[at] = vector;
        self.splits[at] = split;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.len + j]
    }

    pub fn vector(&self, i: usize, j: usize) -> &[f64] {
        &self.vectors[i * self.len + j]
    }

    pub fn split(&self, i: usize, j: usize) -> Option<usize> {
        self.splits[i * self.len + j]
    }

    pub fn tree(&self) -> Tree {
        self.subtree(0, self.len - 1)
    }

    fn subtree(&self, i: usize, j: usize) -> Tree {
        match self.split(i, j) {
            None => Tree::Leaf(i),
            Some(k) => Tree::Node(
                Box::new(self.subtree(i, k)),
                Box::new(self.subtree(k + 1, j)),
            ),
        }
    }

    /// Human-readable table of span scores, one span per line.
    pub fn describe(&self, tokens: &[String]) -> String {
        let mut out = String::new();
        for width in 2..=self.len {
            for i in 0..=self.len - width {
                let j = i + width - 1;
                let words = tokens.get(i..=j).map(|w| w.join(" ")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "A[{i},{j}] = {:+.6} split={} \"{words}\"",
                    self.score(i, j),
                    self.split(i, j).map_or("-".into(), |k| k.to_string()),
                );
            }
        }
        out
    }
}

/// Result of filling the chart for one sentence.
#[derive(Clone, Debug)]
pub struct SentenceParse {
    pub chart: SpanChart,
    pub root_vector: Vec<f64>,
    pub root_score: f64,
    /// Number of candidate compositions evaluated.
    pub compositions: usize,
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckConfig};

    fn net(dim: usize, hidden: &[usize], seed: u64) -> (ParamStore, CompositionNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = CompositionNet::new(&mut store, "rvnn", dim, hidden, 60, &mut rng).unwrap();
        (store, net)
    }

    fn leaves(t: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, dim], data).unwrap()
    }

    #[test]
    fn zero_network_composes_to_zero() {
        let (mut store, net) = net(3, &[4], 1);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let (p, s) = net
            .compose_values(&store, &[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.0])
            .unwrap();
        assert_eq!(p, vec![0.0; 3]);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn compose_is_deterministic_and_checks_width() {
        let (store, net) = net(3, &[4, 4], 2);
        let a = net
            .compose_values(&store, &[0.1, 0.2, 0.3], &[0.3, 0.2, 0.1])
            .unwrap();
        let b = net
            .compose_values(&store, &[0.1, 0.2, 0.3], &[0.3, 0.2, 0.1])
            .unwrap();
        assert_eq!(a, b);
        assert!(net
            .compose_values(&store, &[0.1, 0.2], &[0.3, 0.2, 0.1])
            .is_err());
    }

    #[test]
    fn compose_gradient_matches_finite_differences() {
        let (mut store, net) = net(3, &[4, 5], 3);
        let report = finite_diff_check(
            "compose_pair",
            &mut store,
            |tape| {
                let l = tape.constant(Tensor::vector(vec![0.4, -0.7, 0.2]));
                let r = tape.constant(Tensor::vector(vec![-0.1, 0.9, 0.5]));
                Ok(net.compose_pair(tape, l, r)?.1)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn two_tokens_compose_once() {
        let (store, net) = net(4, &[6], 4);
        let x = leaves(2, 4, 9);
        let parse = net.parse_sentence(&store, &x).unwrap();
        let (p, s) = net.compose_values(&store, x.row(0), x.row(1)).unwrap();
        assert_eq!(parse.compositions, 1);
        assert!((parse.root_score - s).abs() < 1e-12);
        assert!(parse
            .root_vector
            .iter()
            .zip(&p)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_token_is_its_own_root() {
        let (store, net) = net(4, &[6], 4);
        let x = leaves(1, 4, 9);
        let parse = net.parse_sentence(&store, &x).unwrap();
        assert_eq!(parse.root_score, 0.0);
        assert_eq!(parse.root_vector, x.row(0));
        assert!(net.parse_sentence(&store, &Tensor::zeros(&[0, 4])).is_err());
    }

    #[test]
    fn chart_satisfies_its_recurrence() {
        let (store, net) = net(4, &[5, 5], 5);
        let x = leaves(7, 4, 11);
        let parse = net.parse_sentence(&store, &x).unwrap();
        let chart = &parse.chart;
        for i in 0..7 {
            assert_eq!(chart.score(i, i), 0.0);
        }
        for width in 2..=7 {
            for i in 0..=7 - width {
                let j = i + width - 1;
                let best = (i..j)
                    .map(|k| {
                        let (_, s) = net
                            .compose_values(&store, chart.vector(i, k), chart.vector(k + 1, j))
                            .unwrap();
                        chart.score(i, k) + chart.score(k + 1, j) + s
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((chart.score(i, j) - best).abs() < 1e-12);
            }
        }
        let expected: usize = (2..=7).map(|w| (7 - w + 1) * (w - 1)).sum();
        assert_eq!(parse.compositions, expected);
    }

    #[test]
    fn overlong_sentences_are_truncated() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = CompositionNet::new(&mut store, "rvnn", 2, &[3], 4, &mut rng).unwrap();
        let parse = net.parse_sentence(&store, &leaves(9, 2, 3)).unwrap();
        assert_eq!(parse.chart.len(), 4);
    }

    #[test]
    fn tree_rendering() {
        let tree = Tree::Node(
            Box::new(Tree::Node(Box::new(Tree::Leaf(0)), Box::new(Tree::Leaf(1)))),
            Box::new(Tree::Leaf(2)),
        );
        let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(tree.render(&tokens), "((a b) c)");
        assert_eq!(tree.compositions(), 2);
    }
}
