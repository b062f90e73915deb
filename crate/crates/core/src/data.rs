//! ASAP essay ingestion, score resolution and dataset splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, data_err, Error, Result};

/// Score range and bookkeeping for one essay prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    pub prompt_id: u8,
    pub score_min: i32,
    pub score_max: i32,
    pub essay_count: u32,
    pub avg_length: u32,
}

impl PromptSpec {
    pub fn new(prompt_id: u8, score_min: i32, score_max: i32) -> Result<Self> {
        if score_max <= score_min {
            return Err(data_err!(
                "prompt {prompt_id}: score_max {score_max} must exceed score_min {score_min}"
            ));
        }
        Ok(Self {
            prompt_id,
            score_min,
            score_max,
            essay_count: 0,
            avg_length: 0,
        })
    }

    pub fn span(&self) -> i32 {
        self.score_max - self.score_min
    }

    pub fn contains(&self, score: i32) -> bool {
        (self.score_min..=self.score_max).contains(&score)
    }
}

/// Score ranges, essay counts and average lengths of the eight ASAP prompts.
pub fn asap_prompt_specs() -> Vec<PromptSpec> {
    const TABLE: [(u8, u32, u32, i32, i32); 8] = [
        (1, 1783, 350, 2, 12),
        (2, 1800, 350, 1, 6),
        (3, 1726, 150, 0, 3),
        (4, 1772, 150, 0, 3),
        (5, 1805, 150, 0, 4),
        (6, 1800, 150, 0, 4),
        (7, 1569, 250, 0, 30),
        (8, 723, 650, 0, 60),
    ];
    TABLE
        .iter()
        .map(
            |&(prompt_id, essay_count, avg_length, score_min, score_max)| PromptSpec {
                prompt_id,
                score_min,
                score_max,
                essay_count,
                avg_length,
            },
        )
        .collect()
}

pub fn find_spec(specs: &[PromptSpec], prompt_id: u8) -> Result<&PromptSpec> {
    specs
        .iter()
        .find(|s| s.prompt_id == prompt_id)
        .ok_or_else(|| data_err!("no score range configured for prompt {prompt_id}"))
}

/// One scored essay.
#[derive(Clone, Debug, PartialEq)]
pub struct Essay {
    pub essay_id: u32,
    pub prompt_id: u8,
    pub text: String,
    pub rater1: i32,
    pub rater2: i32,
    pub raw_score: i32,
    pub normalized_score: f64,
}

/// An essay without gold scores, as used by the robustness harness.
#[derive(Clone, Debug, PartialEq)]
pub struct EssayText {
    pub essay_id: u32,
    pub prompt_id: u8,
    pub text: String,
}

/// Result of loading a scored TSV file.
#[derive(Clone, Debug)]
pub struct AsapLoad {
    pub essays: Vec<Essay>,
    /// Rows dropped because a rater score was missing.
    pub skipped_rows: usize,
    /// Essays whose summed rater score was clamped into the prompt range.
    pub clamped_rows: usize,
}

/// Sum of the two domain-1 rater scores, clamped to the prompt range.
///
/// Returns the resolved score and whether clamping occurred.
pub fn resolve_score_checked(rater1: i32, rater2: i32, spec: &PromptSpec) -> Result<(i32, bool)> {
    if rater1 < 0 || rater2 < 0 {
        return Err(data_err!("negative rater score ({rater1}, {rater2})"));
    }
    let sum = rater1 + rater2;
    let clamped = sum.clamp(spec.score_min, spec.score_max);
    Ok((clamped, clamped != sum))
}

/// Like [`resolve_score_checked`], logging a warning when the sum is clamped.
pub fn resolve_score(rater1: i32, rater2: i32, spec: &PromptSpec) -> Result<i32> {
    let (score, clamped) = resolve_score_checked(rater1, rater2, spec)?;
    if clamped {
        log::warn!(
            "prompt {}: rater sum {} clamped to {} (range {}-{})",
            spec.prompt_id,
            rater1 + rater2,
            score,
            spec.score_min,
            spec.score_max
        );
    }
    Ok(score)
}

pub fn normalize_score(raw: i32, spec: &PromptSpec) -> Result<f64> {
    if !spec.contains(raw) {
        return Err(data_err!(
            "score {raw} outside prompt {} range {}-{}",
            spec.prompt_id,
            spec.score_min,
            spec.score_max
        ));
    }
    Ok(f64::from(raw - spec.score_min) / f64::from(spec.span()))
}

const REQUIRED_TEXT_COLUMNS: [&str; 3] = ["essay_id", "essay_set", "essay"];
const RATER_COLUMNS: [&str; 2] = ["rater1_domain1", "rater2_domain1"];

struct RawRow {
    offset: u64,
    essay_id: u32,
    prompt_id: u8,
    text: String,
    raters: Option<(String, String)>,
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn read_rows(path: &Path, with_raters: bool) -> Result<Vec<RawRow>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let text = match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => {
            log::warn!(
                "{}: input is not valid UTF-8; invalid bytes replaced",
                path.display()
            );
            String::from_utf8_lossy(e.as_bytes()).into_owned()
        }
    };
    let text = text.replace('\r', "");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| format_err(0, format!("unreadable header: {e}")))?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| format_err(0, format!("missing required column '{name}'")))
    };
    let id_col = column(REQUIRED_TEXT_COLUMNS[0])?;
    let set_col = column(REQUIRED_TEXT_COLUMNS[1])?;
    let essay_col = column(REQUIRED_TEXT_COLUMNS[2])?;
    let rater_cols = if with_raters {
        Some((column(RATER_COLUMNS[0])?, column(RATER_COLUMNS[1])?))
    } else {
        None
    };

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            format_err(offset, e.to_string())
        })?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.iter().any(|f| f.contains('\t')) {
            return Err(format_err(offset, "field contains an embedded tab"));
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let essay_id = field(id_col)
            .parse::<u32>()
            .map_err(|_| format_err(offset, format!("bad essay_id '{}'", field(id_col))))?;
        let prompt_id = field(set_col)
            .parse::<u8>()
            .map_err(|_| format_err(offset, format!("bad essay_set '{}'", field(set_col))))?;
        let raters = rater_cols.map(|(a, b)| (field(a).to_string(), field(b).to_string()));
        rows.push(RawRow {
            offset,
            essay_id,
            prompt_id,
            text: record.get(essay_col).unwrap_or("").to_string(),
            raters,
        });
    }
    Ok(rows)
}

/// Loads scored essays from an ASAP-format TSV file.
///
/// Only `essay_id`, `essay_set`, `essay`, `rater1_domain1` and
/// `rater2_domain1` are read; other columns are ignored.
pub fn load_asap_tsv(path: impl AsRef<Path>, specs: &[PromptSpec]) -> Result<AsapLoad> {
    let path = path.as_ref();
    let rows = read_rows(path, true)?;
    let mut essays = Vec::with_capacity(rows.len());
    let mut skipped = 0;
    let mut clamped_by_prompt: BTreeMap<u8, usize> = BTreeMap::new();
    for row in rows {
        let (r1, r2) = row.raters.expect("rater columns requested");
        if r1.is_empty() || r2.is_empty() {
            skipped += 1;
            continue;
        }
        let parse = |s: &str| {
            s.parse::<i32>()
                .map_err(|_| format_err(row.offset, format!("bad rater score '{s}'")))
        };
        let (rater1, rater2) = (parse(&r1)?, parse(&r2)?);
        let spec = find_spec(specs, row.prompt_id)?;
        let (raw_score, clamped) = resolve_score_checked(rater1, rater2, spec)?;
        if clamped {
            *clamped_by_prompt.entry(row.prompt_id).or_default() += 1;
        }
        essays.push(Essay {
            essay_id: row.essay_id,
            prompt_id: row.prompt_id,
            text: row.text,
            rater1,
            rater2,
            raw_score,
            normalized_score: normalize_score(raw_score, spec)?,
        });
    }
    if skipped > 0 {
        log::warn!(
            "{}: skipped {skipped} rows with missing rater scores",
            path.display()
        );
    }
    for (prompt, n) in &clamped_by_prompt {
        log::warn!(
            "{}: prompt {prompt}: {n} rater sums clamped into the score range",
            path.display()
        );
    }
    Ok(AsapLoad {
        essays,
        skipped_rows: skipped,
        clamped_rows: clamped_by_prompt.values().sum(),
    })
}

/// Loads essay texts without requiring rater columns.
pub fn load_essay_texts(path: impl AsRef<Path>) -> Result<Vec<EssayText>> {
    Ok(read_rows(path.as_ref(), false)?
        .into_iter()
        .map(|r| EssayText {
            essay_id: r.essay_id,
            prompt_id: r.prompt_id,
            text: r.text,
        })
        .collect())
}

/// A train/test partition with optional cross-validation folds.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Essay>,
    pub test: Vec<Essay>,
    pub fold_assignments: Option<BTreeMap<u32, usize>>,
}

/// Seeded shuffle split, stratified by prompt: each prompt contributes
/// `round(ratio * n_prompt)` essays to the training side.
pub fn split_train_test(essays: &[Essay], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if essays.is_empty() {
        return Err(data_err!("cannot split an empty essay set"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract_err!(
            "split ratio must lie strictly between 0 and 1, got {ratio}"
        ));
    }
    let mut by_prompt: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, e) in essays.iter().enumerate() {
        by_prompt.entry(e.prompt_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for idx in by_prompt.values_mut() {
        idx.shuffle(&mut rng);
        let n_train = (ratio * idx.len() as f64).round() as usize;
        split
            .train
            .extend(idx[..n_train].iter().map(|&i| essays[i].clone()));
        split
            .test
            .extend(idx[n_train..].iter().map(|&i| essays[i].clone()));
    }
    Ok(split)
}

/// Seeded assignment of each essay to one of `k` folds; fold sizes differ by
/// at most one.
pub fn kfold_split(essays: &[Essay], k: usize, seed: u64) -> Result<BTreeMap<u32, usize>> {
    let folds = kfold_indices(essays.len(), k, seed)?;
    let mut map = BTreeMap::new();
    for (e, f) in essays.iter().zip(folds) {
        if map.insert(e.essay_id, f).is_some() {
            return Err(data_err!(
                "duplicate essay_id {} in fold assignment",
                e.essay_id
            ));
        }
    }
    Ok(map)
}

/// Fold index for each position `0..n`.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(contract_err!("k-fold needs k >= 2, got {k}"));
    }
    if k > n {
        return Err(data_err!("cannot make {k} folds from {n} essays"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

/// Per-prompt summary used by the `ingest` command.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptStats {
    pub prompt_id: u8,
    pub essays: usize,
    pub mean_words: f64,
    pub min_score: i32,
    pub max_score: i32,
    pub mean_score: f64,
}

pub fn prompt_stats(essays: &[Essay]) -> Vec<PromptStats> {
    let prompts: BTreeSet<u8> = essays.iter().map(|e| e.prompt_id).collect();
    prompts
        .into_iter()
        .map(|p| {
            let group: Vec<&Essay> = essays.iter().filter(|e| e.prompt_id == p).collect();
            let n = group.len() as f64;
            PromptStats {
                prompt_id: p,
                essays: group.len(),
                mean_words: group
                    .iter()
                    .map(|e| e.text.split_whitespace().count() as f64)
                    .sum::<f64>()
                    / n,
                min_score: group.iter().map(|e| e.raw_score).min().unwrap_or(0),
                max_score: group.iter().map(|e| e.raw_score).max().unwrap_or(0),
                mean_score: group.iter().map(|e| f64::from(e.raw_score)).sum::<f64>() / n,
            }
        })
        .collect()
}
