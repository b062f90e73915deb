//! Evaluation metrics and the paraphrase-robustness score.

use std::collections::BTreeMap;
use std::fmt;

use crate::data::{find_spec, PromptSpec};
use crate::error::{contract_err, Result};

/// Maps a normalized prediction onto the prompt's integer scale, rounding
/// half up and clamping to `[min, max]`.
pub fn denormalize_and_round(pred: f64, spec: &PromptSpec) -> i32 {
    let scaled = (pred.clamp(0.0, 1.0) * f64::from(spec.span()) + 0.5).floor() as i32;
    (scaled + spec.score_min).clamp(spec.score_min, spec.score_max)
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(contract_err!("{what}: length mismatch ({a} vs {b})"));
    }
    if a == 0 {
        return Err(contract_err!("{what}: empty input"));
    }
    Ok(())
}

/// Exact-match fraction.
pub fn accuracy(pred: &[i32], gold: &[i32]) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), "accuracy")?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn mse(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), "mse")?;
    Ok(pred
        .iter()
        .zip(gold)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Sample Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(contract_err!(
            "pearson needs two equal-length inputs of at least 2 values"
        ));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Quadratic weighted kappa over the label range `[min, max]`.
///
/// With quadratic weights the observed and expected disagreement reduce to
/// moment sums, so the computation is exact in integers until the final
/// division. `None` when the expected disagreement is zero.
pub fn qwk(pred: &[i32], gold: &[i32], min: i32, max: i32) -> Result<Option<f64>> {
    check_lengths(pred.len(), gold.len(), "qwk")?;
    if min > max {
        return Err(contract_err!("qwk: empty label range [{min}, {max}]"));
    }
    if let Some(v) = pred.iter().chain(gold).find(|&&v| v < min || v > max) {
        return Err(contract_err!("qwk: label {v} outside [{min}, {max}]"));
    }
    let n = pred.len() as i128;
    let (mut sp, mut sg, mut spp, mut sgg, mut sdd) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for (&p, &g) in pred.iter().zip(gold) {
        let (p, g) = (i128::from(p - min), i128::from(g - min));
        sp += p;
        sg += g;
        spp += p * p;
        sgg += g * g;
        sdd += (p - g) * (p - g);
    }
    let observed = n * sdd;
    let expected = n * spp + n * sgg - 2 * sp * sg;
    if expected == 0 {
        return Ok(None);
    }
    // One rounding: the subtraction is exact in integers.
    Ok(Some((expected - observed) as f64 / expected as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradePair {
    pub original: f64,
    pub modified: f64,
}

/// Mean squared difference between original and modified grades.
pub fn robustness_delta(pairs: &[GradePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(contract_err!("robustness delta needs at least one pair"));
    }
    Ok(pairs
        .iter()
        .map(|p| (p.original - p.modified).powi(2))
        .sum::<f64>()
        / pairs.len() as f64)
}

/// Means of consecutive buckets; the last bucket may be shorter.
pub fn bucket_average(grades: &[f64], bucket: usize) -> Result<Vec<f64>> {
    if bucket == 0 {
        return Err(contract_err!("bucket size must be at least 1"));
    }
    if grades.is_empty() {
        return Err(contract_err!("no grades to bucket"));
    }
    Ok(grades
        .chunks(bucket)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// One scored essay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradedItem {
    pub prompt_id: u8,
    /// Normalized prediction in (0, 1).
    pub predicted: f64,
    pub gold_raw: i32,
    pub gold_normalized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub pcc: Option<f64>,
    pub qwk: Option<f64>,
    pub mse: f64,
    pub delta: Option<f64>,
}

impl MetricsReport {
    /// Accuracy (after rounding to each prompt's scale), MSE and PCC are
    /// pooled over all items on the normalized scale; QWK is computed per
    /// prompt over its full label range and averaged.
    pub fn from_items(items: &[GradedItem], specs: &[PromptSpec]) -> Result<Self> {
        if items.is_empty() {
            return Err(contract_err!("cannot report metrics for zero essays"));
        }
        let mut by_prompt: BTreeMap<u8, (Vec<i32>, Vec<i32>)> = BTreeMap::new();
        let (mut pred_int, mut gold_int) = (Vec::new(), Vec::new());
        for item in items {
            let spec = find_spec(specs, item.prompt_id)?;
            let p = denormalize_and_round(item.predicted, spec);
            pred_int.push(p);
            gold_int.push(item.gold_raw);
            let entry = by_prompt.entry(item.prompt_id).or_default();
            entry.0.push(p);
            entry.1.push(item.gold_raw);
        }
        let mut kappas = Vec::new();
        for (prompt, (p, g)) in &by_prompt {
            let spec = find_spec(specs, *prompt)?;
            if let Some(k) = qwk(p, g, spec.score_min, spec.score_max)? {
                kappas.push(k);
            }
        }
        let pred: Vec<f64> = items.iter().map(|i| i.predicted).collect();
        let gold: Vec<f64> = items.iter().map(|i| i.gold_normalized).collect();
        let pcc = if items.len() >= 2 {
            pearson(&pred, &gold)?
        } else {
            None
        };
        Ok(Self {
            n: items.len(),
            accuracy: accuracy(&pred_int, &gold_int)?,
            pcc,
            qwk: mean_defined(kappas.iter().copied().map(Some)),
            mse: mse(&pred, &gold)?,
            delta: None,
        })
    }

    /// Averages reports; undefined values are skipped, `n` is summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(contract_err!("no reports to average"));
        }
        let k = reports.len() as f64;
        Ok(Self {
            n: reports.iter().map(|r| r.n).sum(),
            accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / k,
            pcc: mean_defined(reports.iter().map(|r| r.pcc)),
            qwk: mean_defined(reports.iter().map(|r| r.qwk)),
            mse: reports.iter().map(|r| r.mse).sum::<f64>() / k,
            delta: mean_defined(reports.iter().map(|r| r.delta)),
        })
    }

    /// Single-line record with fields in the order
    /// `n accuracy pcc qwk mse [delta]`.
    pub fn record(&self) -> String {
        let mut line = format!(
            "n={} accuracy={} pcc={} qwk={} mse={}",
            self.n,
            fmt_real(Some(self.accuracy)),
            fmt_real(self.pcc),
            fmt_real(self.qwk),
            fmt_real(Some(self.mse)),
        );
        if self.delta.is_some() {
            line.push_str(&format!(" delta={}", fmt_real(self.delta)));
        }
        line
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n={}", self.n)?;
        writeln!(f, "accuracy={}", fmt_real(Some(self.accuracy)))?;
        writeln!(f, "pcc={}", fmt_real(self.pcc))?;
        writeln!(f, "qwk={}", fmt_real(self.qwk))?;
        write!(f, "mse={}", fmt_real(Some(self.mse)))?;
        if self.delta.is_some() {
            write!(f, "\ndelta={}", fmt_real(self.delta))?;
        }
        Ok(())
    }
}

/// Fixed six-decimal rendering; undefined values print as `NA`.
pub fn fmt_real(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => "NA".to_string(),
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().filter(|v| v.is_finite()).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::asap_prompt_specs;

    #[test]
    fn denormalization() {
        let specs = asap_prompt_specs();
        assert_eq!(
            denormalize_and_round(0.5, find_spec(&specs, 8).unwrap()),
            30
        );
        assert_eq!(
            denormalize_and_round(1.0, find_spec(&specs, 1).unwrap()),
            12
        );
        let ten = PromptSpec::new(9, 0, 10).unwrap();
        assert_eq!(denormalize_and_round(0.049, &ten), 0);
        assert_eq!(denormalize_and_round(0.05, &ten), 1);
        assert_eq!(denormalize_and_round(1.7, &ten), 10);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!((accuracy(&[1, 2, 3], &[1, 2, 4]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn pearson_cases() {
        assert!(
            (pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0])
                .unwrap()
                .unwrap()
                - 1.0)
                .abs()
                < 1e-12
        );
        assert!(
            (pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0])
                .unwrap()
                .unwrap()
                + 1.0)
                .abs()
                < 1e-12
        );
        assert_eq!(pearson(&[4.0, 4.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn qwk_cases() {
        let k = qwk(&[0, 1, 1], &[0, 1, 2], 0, 2).unwrap().unwrap();
        assert_eq!(k, 2.0 / 3.0);
        assert_eq!(qwk(&[0, 1, 2, 2], &[0, 1, 2, 2], 0, 2).unwrap(), Some(1.0));
        assert_eq!(qwk(&[1, 1], &[1, 1], 0, 2).unwrap(), None);
        assert!(qwk(&[3], &[1], 0, 2).is_err());
    }

    #[test]
    fn robustness_and_buckets() {
        let same = [GradePair {
            original: 3.0,
            modified: 3.0,
        }; 4];
        assert_eq!(robustness_delta(&same).unwrap(), 0.0);
        let pairs = [
            GradePair {
                original: 1.0,
                modified: 2.0,
            },
            GradePair {
                original: 2.0,
                modified: 2.0,
            },
        ];
        assert_eq!(robustness_delta(&pairs).unwrap(), 0.5);
        assert!(robustness_delta(&[]).is_err());

        assert_eq!(bucket_average(&vec![1.0; 100], 50).unwrap().len(), 2);
        assert_eq!(
            bucket_average(&[1.0, 2.0, 3.0], 1).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            bucket_average(&[1.0, 3.0, 5.0, 7.0, 9.0], 2).unwrap(),
            vec![2.0, 6.0, 9.0]
        );
        assert!(bucket_average(&[], 2).is_err());
    }

    #[test]
    fn report_pools_and_means() {
        let specs = asap_prompt_specs();
        let items = [
            GradedItem {
                prompt_id: 3,
                predicted: 0.0,
                gold_raw: 0,
                gold_normalized: 0.0,
            },
            GradedItem {
                prompt_id: 3,
                predicted: 1.0,
                gold_raw: 3,
                gold_normalized: 1.0,
            },
            GradedItem {
                prompt_id: 3,
                predicted: 0.4,
                gold_raw: 2,
                gold_normalized: 2.0 / 3.0,
            },
        ];
        let r = MetricsReport::from_items(&items, &specs).unwrap();
        assert_eq!(r.n, 3);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.qwk.unwrap() < 1.0);
        assert!(r.record().starts_with("n=3 accuracy=0.666667 pcc="));

        let single = MetricsReport::from_items(&items[..1], &specs).unwrap();
        assert_eq!(single.pcc, None);
        assert!(single.record().contains("pcc=NA"));

        let m = MetricsReport::mean(&[r.clone(), single.clone()]).unwrap();
        assert_eq!(m.pcc, r.pcc);
        assert!((m.accuracy - (r.accuracy + single.accuracy) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn qwk_invariant_under_shared_shift(
            pairs in proptest::collection::vec((0i32..=4, 0i32..=4), 2..40),
            shift in -5i32..5,
        ) {
            let (p, g): (Vec<i32>, Vec<i32>) = pairs.into_iter().unzip();
            let base = qwk(&p, &g, 0, 4).unwrap();
            let ps: Vec<i32> = p.iter().map(|v| v + shift).collect();
            let gs: Vec<i32> = g.iter().map(|v| v + shift).collect();
            let moved = qwk(&ps, &gs, shift, 4 + shift).unwrap();
            prop_assert_eq!(base, moved);
            if let Some(k) = base {
                prop_assert!(k <= 1.0);
            }
        }

        #[test]
        fn pearson_affine(x in proptest::collection::vec(-100.0f64..100.0, 3..30), a in 0.1f64..10.0, b in -50.0f64..50.0) {
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            if let Some(r) = pearson(&x, &y).unwrap() {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn delta_nonnegative(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30)) {
            let gp: Vec<GradePair> = pairs.iter().map(|&(o, m)| GradePair { original: o, modified: m }).collect();
            let d = robustness_delta(&gp).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, pairs.iter().all(|(o, m)| o == m));
        }
    }
}
