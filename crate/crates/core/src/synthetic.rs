//! Deterministic synthetic essays for smoke tests and oracles.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize_score, Essay, PromptSpec};
use crate::error::{Error, Result};

const COMMON: &[&str] = &[
    "the",
    "a",
    "computers",
    "people",
    "time",
    "friends",
    "family",
    "news",
    "world",
    "online",
    "help",
    "learn",
    "games",
    "school",
    "think",
    "believe",
    "because",
    "many",
    "some",
    "would",
    "could",
    "should",
    "often",
    "really",
    "very",
];

const RICH: &[&str] = &[
    "furthermore",
    "consequently",
    "perspective",
    "communication",
    "significant",
    "demonstrate",
    "opportunity",
    "responsibility",
    "technology",
    "evidence",
    "moreover",
    "essential",
    "convenient",
    "knowledge",
    "society",
    "influence",
    "benefit",
    "research",
    "addition",
    "ultimately",
];

/// `n` essays of `i + 1` three-token sentences (`i = 0..n`), so token count
/// and sentence count both grow linearly with the normalized score `i / (n-1)`.
pub fn length_tied_essays(n: usize, spec: &PromptSpec, seed: u64) -> Result<Vec<Essay>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sentences: Vec<String> = (0..=i)
                .map(|_| {
                    let a = COMMON[rng.random_range(0..COMMON.len())];
                    let b = COMMON[rng.random_range(0..COMMON.len())];
                    format!("{a} {b} .")
                })
                .collect();
            let frac = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            };
            let raw = spec.score_min + (frac * f64::from(spec.span())).round() as i32;
            Ok(Essay {
                essay_id: i as u32 + 1,
                prompt_id: spec.prompt_id,
                text: sentences.join(" "),
                rater1: raw,
                rater2: 0,
                raw_score: raw,
                normalized_score: frac,
            })
        })
        .collect()
}

/// Essays whose quality drives both length and vocabulary richness, with
/// rater scores split into two integer halves that sum to the grade.
pub fn quality_essays(n: usize, spec: &PromptSpec, seed: u64) -> Result<Vec<Essay>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let quality: f64 = rng.random();
        let raw = (spec.score_min
            + (quality * f64::from(spec.span()) + rng.random_range(-0.6..0.6)).round() as i32)
            .clamp(spec.score_min, spec.score_max);
        let sentences = 2 + (quality * 8.0) as usize + rng.random_range(0..2);
        let mut text = String::new();
        for _ in 0..sentences {
            let len = rng.random_range(5..12);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < 0.1 + 0.5 * quality {
                        RICH[rng.random_range(0..RICH.len())]
                    } else {
                        COMMON[rng.random_range(0..COMMON.len())]
                    }
                })
                .collect();
            let _ = write!(text, "{} . ", words.join(" "));
        }
        let r1 = raw / 2 + raw % 2;
        out.push(Essay {
            essay_id: 1000 + i as u32,
            prompt_id: spec.prompt_id,
            text: text.trim_end().to_string(),
            rater1: r1,
            rater2: raw - r1,
            raw_score: raw,
            normalized_score: normalize_score(raw, spec)?,
        });
    }
    Ok(out)
}

/// Writes essays in the ASAP tab-separated layout.
pub fn write_asap_tsv(path: impl AsRef<Path>, essays: &[Essay]) -> Result<()> {
    let path = path.as_ref();
    let mut text =
        String::from("essay_id\tessay_set\tessay\trater1_domain1\trater2_domain1\tdomain1_score\n");
    for e in essays {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.essay_id, e.prompt_id, e.text, e.rater1, e.rater2, e.raw_score
        );
    }
    std::fs::write(path, text).map_err(|err| Error::io(path.display().to_string(), err))
}
