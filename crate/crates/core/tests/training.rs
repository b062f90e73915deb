use std::collections::BTreeSet;

use cdln::data::{asap_prompt_specs, kfold_split, Essay, PromptSpec};
use cdln::model::{GradingModel, ModelKind};
use cdln::synthetic::{length_tied_essays, quality_essays};
use cdln::text::TokenizedEssay;
use cdln::training::{cross_validate, evaluate, fit_model, TrainConfig};
use cdln::verify::toy_settings;
use cdln::Error;

fn prompt1() -> PromptSpec {
    asap_prompt_specs()[0]
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.003,
        batch_size: 2,
        epochs: 200,
        dropout_rate: 0.0,
        seed: 2,
        k_folds: 8,
        word_vectors: None,
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.003,
        batch_size: 4,
        epochs,
        dropout_rate: 0.3,
        seed: 11,
        k_folds: 8,
        word_vectors: None,
    }
}

fn snapshot(model: &GradingModel) -> Vec<(String, Vec<u64>)> {
    model
        .params()
        .expect("neural model")
        .iter()
        .map(|(_, p)| {
            (
                p.name().to_string(),
                p.value().data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn toy_cdln_memorizes_sixteen_length_tied_essays() {
    let spec = prompt1();
    let essays = length_tied_essays(16, &spec, 1).unwrap();
    let (model, report) = fit_model(
        ModelKind::Cdln,
        &toy_settings(),
        &essays,
        &overfit_config(),
        &mut |_, _| {},
    )
    .unwrap();

    let losses = &report.epoch_losses;
    assert_eq!(losses.len(), 200);
    let first = losses[0];
    let last = *losses.last().unwrap();
    assert!(
        first / last >= 100.0,
        "loss fell only {first:e} -> {last:e}"
    );

    let (metrics, _) = evaluate(&model, &essays, &[spec]).unwrap();
    assert!(metrics.mse < 1e-3, "train mse {}", metrics.mse);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let essays = quality_essays(12, &prompt1(), 3).unwrap();
    for kind in [
        ModelKind::Cdln,
        ModelKind::Rnn,
        ModelKind::Ann,
        ModelKind::Lstm,
    ] {
        let a = fit_model(kind, &toy_settings(), &essays, &quick(2), &mut |_, _| {}).unwrap();
        let b = fit_model(kind, &toy_settings(), &essays, &quick(2), &mut |_, _| {}).unwrap();
        assert_eq!(snapshot(&a.0), snapshot(&b.0), "{kind}");
        assert_eq!(a.1, b.1);

        let c = fit_model(
            kind,
            &toy_settings(),
            &essays,
            &TrainConfig {
                seed: 12,
                ..quick(2)
            },
            &mut |_, _| {},
        )
        .unwrap();
        assert_ne!(snapshot(&a.0), snapshot(&c.0), "{kind}");
    }
}

#[test]
fn epoch_callback_sees_every_epoch() {
    let essays = quality_essays(8, &prompt1(), 4).unwrap();
    let mut seen = Vec::new();
    let (_, report) = fit_model(
        ModelKind::Ann,
        &toy_settings(),
        &essays,
        &quick(3),
        &mut |e, l| seen.push((e, l)),
    )
    .unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(
        seen.iter().map(|s| s.1).collect::<Vec<_>>(),
        report.epoch_losses
    );
    assert_eq!(report.examples, 8);
}

#[test]
fn zero_epochs_is_rejected() {
    let essays = quality_essays(4, &prompt1(), 5).unwrap();
    let err = fit_model(
        ModelKind::Cdln,
        &toy_settings(),
        &essays,
        &quick(0),
        &mut |_, _| {},
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn empty_training_set_is_a_data_error() {
    let err = fit_model(
        ModelKind::Rnn,
        &toy_settings(),
        &[],
        &quick(1),
        &mut |_, _| {},
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn svm_trains_without_a_loss_trace() {
    let spec = prompt1();
    let essays = quality_essays(20, &spec, 6).unwrap();
    let (model, report) = fit_model(
        ModelKind::Svm,
        &toy_settings(),
        &essays,
        &quick(1),
        &mut |_, _| panic!("no epochs"),
    )
    .unwrap();
    assert!(report.epoch_losses.is_empty());
    let (metrics, items) = evaluate(&model, &essays, &[spec]).unwrap();
    assert_eq!(items.len(), 20);
    assert!(metrics.accuracy > 0.5, "{}", metrics.record());
}

#[test]
fn eight_folds_over_sixteen_essays() {
    let spec = prompt1();
    let essays = quality_essays(16, &spec, 7).unwrap();
    let cv = cross_validate(
        ModelKind::Cdln,
        &toy_settings(),
        &essays,
        &quick(1),
        &[spec],
        &mut |_, _, _| {},
    )
    .unwrap();
    assert_eq!(cv.folds.len(), 8);
    for f in &cv.folds {
        assert_eq!(f.test_size, 2);
        assert_eq!(f.train_size, 14);
        assert_eq!(f.report.n, 2);
    }

    let k = cv.folds.len() as f64;
    let acc = cv.folds.iter().map(|f| f.report.accuracy).sum::<f64>() / k;
    let mse = cv.folds.iter().map(|f| f.report.mse).sum::<f64>() / k;
    assert!((cv.mean.accuracy - acc).abs() < 1e-12);
    assert!((cv.mean.mse - mse).abs() < 1e-12);
    let defined: Vec<f64> = cv.folds.iter().filter_map(|f| f.report.qwk).collect();
    if defined.is_empty() {
        assert_eq!(cv.mean.qwk, None);
    } else {
        let qwk = defined.iter().sum::<f64>() / defined.len() as f64;
        assert!((cv.mean.qwk.unwrap() - qwk).abs() < 1e-12);
    }
}

#[test]
fn two_folds_over_two_essays_leave_pcc_undefined() {
    let spec = prompt1();
    let essays = quality_essays(2, &spec, 8).unwrap();
    let cfg = TrainConfig {
        k_folds: 2,
        ..quick(1)
    };
    let cv = cross_validate(
        ModelKind::Ann,
        &toy_settings(),
        &essays,
        &cfg,
        &[spec],
        &mut |_, _, _| {},
    )
    .unwrap();
    assert_eq!(cv.folds.len(), 2);
    for f in &cv.folds {
        assert_eq!(f.report.n, 1);
        assert_eq!(f.report.pcc, None);
    }
    assert_eq!(cv.mean.pcc, None);
    assert!(cv.mean.record().contains("pcc=NA"));
}

#[test]
fn fewer_essays_than_folds_is_rejected() {
    let spec = prompt1();
    let essays = quality_essays(3, &spec, 9).unwrap();
    assert!(cross_validate(
        ModelKind::Ann,
        &toy_settings(),
        &essays,
        &quick(1),
        &[spec],
        &mut |_, _, _| {}
    )
    .is_err());
}

#[test]
fn folds_partition_the_essays() {
    let essays: Vec<Essay> = quality_essays(101, &prompt1(), 10).unwrap();
    for k in [2, 5, 8] {
        let assignment = kfold_split(&essays, k, 3).unwrap();
        assert_eq!(assignment.len(), essays.len());
        let ids: BTreeSet<u32> = essays.iter().map(|e| e.essay_id).collect();
        assert_eq!(assignment.keys().copied().collect::<BTreeSet<_>>(), ids);
        let mut sizes = vec![0usize; k];
        for &f in assignment.values() {
            sizes[f] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "{sizes:?}");
    }
}

#[test]
fn evaluation_predictions_stay_normalized() {
    let spec = prompt1();
    let essays = quality_essays(10, &spec, 11).unwrap();
    let (model, _) = fit_model(
        ModelKind::Lstm,
        &toy_settings(),
        &essays,
        &quick(1),
        &mut |_, _| {},
    )
    .unwrap();
    for e in &essays {
        let p = model
            .predict(&TokenizedEssay::from_text(&e.text), &spec)
            .unwrap();
        assert!((0.0..=1.0).contains(&p), "{p}");
    }
}
