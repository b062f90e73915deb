//! Training loop, evaluation and k-fold cross-validation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Tape};
use crate::baselines::svm_train;
use crate::data::{find_spec, kfold_split, Essay, PromptSpec};
use crate::error::{config_err, contract_err, data_err, Result};
use crate::metrics::{GradedItem, MetricsReport};
use crate::model::{Body, GradingModel, Mode, ModelKind, ModelSettings, SvmGrader};
use crate::text::{build_vocab, TokenizedEssay};
use crate::tfidf::tfidf_fit;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub k_folds: usize,
    /// Optional text-format word vectors loaded before training.
    pub word_vectors: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: default_epochs(ModelKind::Cdln),
            dropout_rate: 0.3,
            seed: 0,
            k_folds: 8,
            word_vectors: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.k_folds < 2 {
            return Err(config_err!("k_folds must be at least 2"));
        }
        Ok(())
    }
}

/// Default epoch budget per model.
pub fn default_epochs(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Cdln => 15,
        ModelKind::Rnn | ModelKind::Ann | ModelKind::Lstm => 8,
        ModelKind::Svm => 6,
    }
}

pub fn mse_loss(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.is_empty() {
        return Err(contract_err!(
            "mse_loss needs equal non-zero lengths ({} vs {})",
            pred.len(),
            gold.len()
        ));
    }
    crate::metrics::mse(pred, gold)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch, in order. Empty for the svm.
    pub epoch_losses: Vec<f64>,
    pub examples: usize,
}

fn tokenize_all(essays: &[Essay]) -> Vec<(TokenizedEssay, f64, i32)> {
    essays
        .iter()
        .filter_map(|e| {
            let t = TokenizedEssay::from_text(&e.text);
            if t.is_empty() {
                log::warn!("essay {} has no tokens; skipped", e.essay_id);
                None
            } else {
                Some((t, e.normalized_score, e.raw_score))
            }
        })
        .collect()
}

/// Builds the vocabulary from `essays`, initializes a model from `cfg.seed`
/// and trains it.
pub fn fit_model(
    kind: ModelKind,
    settings: &ModelSettings,
    essays: &[Essay],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<(GradingModel, TrainReport)> {
    cfg.validate()?;
    let tokenized: Vec<TokenizedEssay> = tokenize_all(essays).into_iter().map(|t| t.0).collect();
    if tokenized.is_empty() {
        return Err(data_err!("training set is empty"));
    }
    let vocab = build_vocab(&tokenized, settings.min_count)?;
    let mut model = GradingModel::build(kind, settings.clone(), vocab, cfg.seed)?;
    if let Some(path) = &cfg.word_vectors {
        let n = model.load_word_vectors(path)?;
        log::info!("{}: {n} word vectors loaded", path.display());
    }
    let report = train_model(&mut model, essays, cfg, on_epoch)?;
    Ok((model, report))
}

fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 32) ^ index as u64;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `model` in place. Minibatches are reshuffled each epoch from
/// `cfg.seed`; parameters end at single precision.
pub fn train_model(
    model: &mut GradingModel,
    essays: &[Essay],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    let data = tokenize_all(essays);
    if data.is_empty() {
        return Err(data_err!("training set is empty"));
    }
    let vocab = &model.vocab;
    match &mut model.body {
        Body::Svm(slot) => {
            let docs: Vec<TokenizedEssay> = data.iter().map(|d| d.0.clone()).collect();
            let tfidf = tfidf_fit(&docs)?;
            let vectors: Vec<_> = docs.iter().map(|d| tfidf.transform(d)).collect();
            let labels: Vec<i32> = data.iter().map(|d| d.2).collect();
            let mut svm = svm_train(
                &vectors,
                &labels,
                tfidf.feature_count(),
                &model.settings.svm,
            )?;
            svm.round_to_f32();
            *slot = Some(SvmGrader { tfidf, svm });
            Ok(TrainReport {
                epoch_losses: Vec::new(),
                examples: data.len(),
            })
        }
        Body::Neural { network, params } => {
            let encoded: Vec<_> = data.iter().map(|d| vocab.encode(&d.0)).collect();
            let mut adam = Adam::new(cfg.learning_rate)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut losses = Vec::with_capacity(cfg.epochs);
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in order.chunks(cfg.batch_size) {
                    let scale = 1.0 / batch.len() as f64;
                    for &i in batch {
                        let mode = Mode::Train {
                            seed: example_seed(cfg.seed, epoch, i),
                            dropout: cfg.dropout_rate,
                        };
                        let grads = {
                            let mut tape = Tape::new(params);
                            let y = network.forward(&mut tape, &encoded[i], mode)?;
                            let loss = tape.squared_error(y, data[i].1)?;
                            total += tape.scalar(loss);
                            tape.backward(loss)?
                        };
                        grads.accumulate_into(params, scale);
                    }
                    adam.step(params);
                }
                let mean = total / data.len() as f64;
                if !mean.is_finite() {
                    return Err(data_err!(
                        "training loss became non-finite in epoch {}",
                        epoch + 1
                    ));
                }
                on_epoch(epoch + 1, mean);
                losses.push(mean);
            }
            params.round_to_f32();
            Ok(TrainReport {
                epoch_losses: losses,
                examples: data.len(),
            })
        }
    }
}

/// Scores every essay and reports metrics against the gold grades.
pub fn evaluate(
    model: &GradingModel,
    essays: &[Essay],
    specs: &[PromptSpec],
) -> Result<(MetricsReport, Vec<GradedItem>)> {
    let mut items = Vec::with_capacity(essays.len());
    for e in essays {
        let spec = find_spec(specs, e.prompt_id)?;
        let tokens = TokenizedEssay::from_text(&e.text);
        if tokens.is_empty() {
            return Err(data_err!("essay {} has no tokens", e.essay_id));
        }
        items.push(GradedItem {
            prompt_id: e.prompt_id,
            predicted: model.predict(&tokens, spec)?,
            gold_raw: e.raw_score,
            gold_normalized: e.normalized_score,
        });
    }
    Ok((MetricsReport::from_items(&items, specs)?, items))
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub train: TrainReport,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mean: MetricsReport,
}

/// Trains `cfg.k_folds` models, each scored on its held-out fold. Fold `f`
/// initializes its model from `cfg.seed + f`.
pub fn cross_validate(
    kind: ModelKind,
    settings: &ModelSettings,
    essays: &[Essay],
    cfg: &TrainConfig,
    specs: &[PromptSpec],
    on_epoch: &mut dyn FnMut(usize, usize, f64),
) -> Result<CrossValidation> {
    cfg.validate()?;
    let assignment = kfold_split(essays, cfg.k_folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(cfg.k_folds);
    for fold in 0..cfg.k_folds {
        let (test, train): (Vec<Essay>, Vec<Essay>) = essays
            .iter()
            .cloned()
            .partition(|e| assignment[&e.essay_id] == fold);
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(fold as u64),
            ..cfg.clone()
        };
        let (model, train_report) = fit_model(kind, settings, &train, &fold_cfg, &mut |e, l| {
            on_epoch(fold, e, l)
        })?;
        let (report, _) = evaluate(&model, &test, specs)?;
        log::info!("fold {}: {}", fold + 1, report.record());
        folds.push(FoldResult {
            fold,
            train_size: train.len(),
            test_size: test.len(),
            train: train_report,
            report,
        });
    }
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    Ok(CrossValidation {
        mean: MetricsReport::mean(&reports)?,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[1.0], &[0.5]).unwrap(), 0.25);
        assert!(mse_loss(&[1.0], &[0.5, 0.2]).is_err());
    }

    #[test]
    fn config_contract() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                dropout_rate: 1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
