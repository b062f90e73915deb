//! Tokenization, sentence segmentation, vocabularies and embedding tables.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{contract_err, data_err, Error, Result};
use crate::tensor::Tensor;

const SENTENCE_END: [&str; 3] = [".", "!", "?"];

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{00BF}'
                | '\u{00A1}'
        )
}

/// Lowercases, splits on whitespace and emits every punctuation mark as a
/// token of its own. ASAP anonymization markers such as `@CAPS1` stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let marker = c == '@'
                && word.is_empty()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if is_punctuation(c) && !marker {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Sentence ranges over `tokens`. A sentence ends after a run of `.`, `!`
/// or `?` tokens; trailing tokens form a final sentence.
pub fn split_sentences(tokens: &[String]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..tokens.len() {
        let ends = SENTENCE_END.contains(&tokens[i].as_str());
        let next_ends = tokens
            .get(i + 1)
            .is_some_and(|t| SENTENCE_END.contains(&t.as_str()));
        if ends && !next_ends {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(start..tokens.len());
    }
    out
}

/// Tokens of one essay together with its sentence boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedEssay {
    pub tokens: Vec<String>,
    pub sentences: Vec<Range<usize>>,
}

impl TokenizedEssay {
    pub fn from_text(text: &str) -> Self {
        let tokens = tokenize(text);
        let sentences = split_sentences(&tokens);
        Self { tokens, sentences }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token-to-index mapping with reserved UNK (0) and PAD (1) slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK: usize = 0;
    pub const PAD: usize = 1;
    pub const UNK_TOKEN: &'static str = "<unk>";
    pub const PAD_TOKEN: &'static str = "<pad>";

    /// Rebuilds a vocabulary from its full index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2
            || tokens[Self::UNK] != Self::UNK_TOKEN
            || tokens[Self::PAD] != Self::PAD_TOKEN
        {
            return Err(data_err!(
                "vocabulary must start with {} and {}",
                Self::UNK_TOKEN,
                Self::PAD_TOKEN
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(data_err!("duplicate vocabulary token '{t}'"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, essay: &TokenizedEssay) -> EncodedEssay {
        EncodedEssay {
            ids: essay.tokens.iter().map(|t| self.id(t)).collect(),
            sentences: essay.sentences.clone(),
        }
    }
}

/// Counts tokens across `corpus` and keeps those seen at least `min_count`
/// times, ordered by descending count then lexically.
pub fn build_vocab(corpus: &[TokenizedEssay], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(data_err!("cannot build a vocabulary from an empty corpus"));
    }
    if min_count == 0 {
        return Err(contract_err!("min_count must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for essay in corpus {
        for t in &essay.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![
        Vocabulary::UNK_TOKEN.to_string(),
        Vocabulary::PAD_TOKEN.to_string(),
    ];
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}

/// Token ids of an essay with sentence boundaries preserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedEssay {
    pub ids: Vec<usize>,
    pub sentences: Vec<Range<usize>>,
}

impl EncodedEssay {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Trainable word-embedding matrix `[V × dim]` with a frozen all-zero PAD row.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub const DEFAULT_DIM: usize = 100;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size < 2 || dim == 0 {
            return Err(contract_err!(
                "embedding table needs >= 2 rows and positive width"
            ));
        }
        let param = store.add_uniform(name, &[vocab_size, dim], crate::INIT_BOUND, rng)?;
        store.freeze_row(param, Vocabulary::PAD)?;
        Ok(Self {
            param,
            vocab_size,
            dim,
        })
    }

    /// Row gather on the tape; looked-up rows receive gradients.
    pub fn lookup(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(contract_err!(
                "token index {bad} >= vocabulary size {}",
                self.vocab_size
            ));
        }
        let table = tape.param(self.param);
        tape.gather(table, ids)
    }

    pub fn row<'a>(&self, store: &'a ParamStore, id: usize) -> &'a [f64] {
        store.value(self.param).row(id)
    }

    /// Overwrites rows of known tokens from a text file holding one token and
    /// `dim` whitespace-separated reals per line. Returns the rows replaced.
    pub fn load_word_vectors(
        &self,
        store: &mut ParamStore,
        vocab: &Vocabulary,
        path: impl AsRef<Path>,
    ) -> Result<usize> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut replaced = 0;
        for (line_no, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    data_err!(
                        "{}:{}: non-numeric vector component",
                        path.display(),
                        line_no + 1
                    )
                })?;
            if values.len() != self.dim {
                return Err(data_err!(
                    "{}:{}: expected {} components, found {}",
                    path.display(),
                    line_no + 1,
                    self.dim,
                    values.len()
                ));
            }
            if let Some(&id) = vocab.index.get(token) {
                if id != Vocabulary::PAD {
                    store
                        .value_mut(self.param)
                        .row_mut(id)
                        .copy_from_slice(&values);
                    replaced += 1;
                }
            }
        }
        Ok(replaced)
    }

    pub fn snapshot(&self, store: &ParamStore) -> Tensor {
        store.value(self.param).clone()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckConfig};

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("The dog is here."),
            toks(&["the", "dog", "is", "here", "."])
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Hey, AI!"), toks(&["hey", ",", "ai", "!"]));
        assert_eq!(
            tokenize("Dear @CAPS1, hi"),
            toks(&["dear", "@caps1", ",", "hi"])
        );
    }

    #[test]
    fn sentence_examples() {
        assert_eq!(
            split_sentences(&toks(&["a", ".", "b", "."])),
            vec![0..2, 2..4]
        );
        assert_eq!(split_sentences(&toks(&["a", "b"])), vec![0..2]);
        assert!(split_sentences(&[]).is_empty());
        assert_eq!(
            split_sentences(&toks(&["a", "?", "!", "b"])),
            vec![0..3, 3..4]
        );
    }

    #[test]
    fn vocab_threshold_and_ties() {
        let mut text = "the ".repeat(10);
        text.push_str("zeta alpha zeta alpha once");
        let corpus = vec![TokenizedEssay::from_text(&text)];
        let vocab = build_vocab(&corpus, 2).unwrap();
        assert_eq!(vocab.id("the"), 2);
        assert_eq!(vocab.id("alpha"), 3);
        assert_eq!(vocab.id("zeta"), 4);
        assert_eq!(vocab.id("once"), Vocabulary::UNK);
        assert!(build_vocab(&[], 2).is_err());
    }

    #[test]
    fn pad_row_is_zero_and_lookup_is_stable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::new(&mut store, "emb", 5, 4, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let rows = table.lookup(&mut tape, &[Vocabulary::PAD, 3, 3]).unwrap();
        let v = tape.value(rows);
        assert_eq!(v.row(0), &[0.0; 4]);
        assert_eq!(v.row(1), v.row(2));
        assert!(table.lookup(&mut tape, &[5]).is_err());
    }

    #[test]
    fn looked_up_row_gradient_is_all_ones() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = EmbeddingTable::new(&mut store, "emb", 4, 3, &mut rng).unwrap();
        {
            let mut tape = Tape::new(&store);
            let row = table.lookup(&mut tape, &[2]).unwrap();
            let s = tape.sum(row);
            let g = tape.backward(s).unwrap().get(table.param);
            assert_eq!(g.row(2), &[1.0, 1.0, 1.0]);
            assert_eq!(g.row(0), &[0.0, 0.0, 0.0]);
        }
        let report = finite_diff_check(
            "embed_lookup",
            &mut store,
            |tape| {
                let row = table.lookup(tape, &[2])?;
                Ok(tape.sum(row))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn word_vector_file_overrides_rows() {
        use std::io::Write;
        let corpus = vec![TokenizedEssay::from_text("cat cat dog dog")];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = EmbeddingTable::new(&mut store, "emb", vocab.len(), 2, &mut rng).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 0.5 -0.5\nunknown 1 1").unwrap();
        assert_eq!(
            table
                .load_word_vectors(&mut store, &vocab, f.path())
                .unwrap(),
            1
        );
        assert_eq!(table.row(&store, vocab.id("cat")), &[0.5, -0.5]);
    }
}
