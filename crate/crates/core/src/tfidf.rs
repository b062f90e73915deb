//! Smoothed TF-IDF with l2 normalization.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{data_err, Result};
use crate::text::TokenizedEssay;

/// Document frequencies over a fitted corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfModel {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    df: Vec<u32>,
    n_docs: u32,
}

/// An l2-normalized TF-IDF vector. Known terms are indexed by the model;
/// out-of-vocabulary terms keep their weight by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    pub entries: Vec<(usize, f64)>,
    pub oov: Vec<(String, f64)>,
}

impl SparseVector {
    pub fn norm_squared(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>() + self.oov_norm_squared()
    }

    pub fn oov_norm_squared(&self) -> f64 {
        self.oov.iter().map(|(_, v)| v * v).sum()
    }

    /// Dot product over indexed entries (both sorted by index).
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty() && self.oov.is_empty()
    }
}

impl TfidfModel {
    pub fn n_docs(&self) -> u32 {
        self.n_docs
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn document_frequencies(&self) -> &[u32] {
        &self.df
    }

    pub fn feature_count(&self) -> usize {
        self.terms.len()
    }

    pub fn df(&self, term: &str) -> u32 {
        self.index.get(term).map_or(0, |&i| self.df[i])
    }

    pub fn term_index(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// `ln((1 + n) / (1 + df)) + 1`.
    pub fn idf_for_df(&self, df: u32) -> f64 {
        ((1.0 + f64::from(self.n_docs)) / (1.0 + f64::from(df))).ln() + 1.0
    }

    pub fn idf(&self, term: &str) -> f64 {
        self.idf_for_df(self.df(term))
    }

    /// Rebuilds a model from stored parts (terms sorted, one df per term).
    pub fn from_parts(terms: Vec<String>, df: Vec<u32>, n_docs: u32) -> Result<Self> {
        if terms.len() != df.len() {
            return Err(data_err!(
                "{} terms but {} document frequencies",
                terms.len(),
                df.len()
            ));
        }
        if df.iter().any(|&d| d == 0 || d > n_docs) {
            return Err(data_err!("document frequency outside [1, {n_docs}]"));
        }
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            terms,
            index,
            df,
            n_docs,
        })
    }

    /// Raw-count TF times smoothed IDF, scaled to unit l2 norm.
    pub fn transform(&self, essay: &TokenizedEssay) -> SparseVector {
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &essay.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut out = SparseVector::default();
        for (term, tf) in counts {
            let w = f64::from(tf) * self.idf(term);
            match self.index.get(term) {
                Some(&i) => out.entries.push((i, w)),
                None => out.oov.push((term.to_string(), w)),
            }
        }
        out.entries.sort_by_key(|e| e.0);
        let norm = out.norm_squared().sqrt();
        if norm > 0.0 {
            out.entries.iter_mut().for_each(|e| e.1 /= norm);
            out.oov.iter_mut().for_each(|e| e.1 /= norm);
        }
        out
    }

    /// Weight of `term` in `v`, zero when absent.
    pub fn weight(&self, v: &SparseVector, term: &str) -> f64 {
        match self.index.get(term) {
            Some(&i) => v.entries.iter().find(|e| e.0 == i).map_or(0.0, |e| e.1),
            None => v.oov.iter().find(|e| e.0 == term).map_or(0.0, |e| e.1),
        }
    }
}

/// Counts, for every term, the number of essays containing it.
pub fn tfidf_fit(corpus: &[TokenizedEssay]) -> Result<TfidfModel> {
    if corpus.is_empty() {
        return Err(data_err!("cannot fit TF-IDF on an empty corpus"));
    }
    let mut df: BTreeMap<&str, u32> = BTreeMap::new();
    for essay in corpus {
        let distinct: BTreeSet<&str> = essay.tokens.iter().map(String::as_str).collect();
        for t in distinct {
            *df.entry(t).or_default() += 1;
        }
    }
    let terms: Vec<String> = df.keys().map(|t| t.to_string()).collect();
    let counts = df.into_values().collect();
    TfidfModel::from_parts(terms, counts, corpus.len() as u32)
}
