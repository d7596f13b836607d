use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specexit_core::suite::linear_signal_corpus;
use specexit_core::train::{evaluate, fit_head, FitConfig};
use specexit_core::DraftHead;

const DIM: usize = 6;
const VOCAB: usize = 10;

#[test]
fn held_out_regression_losses_drop_tenfold() {
    let train = linear_signal_corpus(2000, DIM, VOCAB, 1);
    let test = linear_signal_corpus(500, DIM, VOCAB, 2);
    let mut head = DraftHead::random(VOCAB, DIM, 0.1, &mut ChaCha8Rng::seed_from_u64(3));
    let before = evaluate(&head, &test).unwrap();
    let cfg = FitConfig {
        epochs: 200,
        ..FitConfig::default()
    };
    let log = fit_head(&mut head, &train, &cfg).unwrap();
    let after = evaluate(&head, &test).unwrap();
    assert!(after.conf <= before.conf / 10.0, "{before:?} {after:?}");
    assert!(after.prog <= before.prog / 10.0, "{before:?} {after:?}");
    assert!(after.rem <= before.rem / 10.0, "{before:?} {after:?}");
    for row in &log {
        assert!((row.lambda_c + row.lambda_p + row.lambda_r - 1.0).abs() < 1e-9);
    }
}

#[test]
fn co_training_leaves_the_token_head_alone() {
    let train = linear_signal_corpus(1000, DIM, VOCAB, 5);
    let test = linear_signal_corpus(300, DIM, VOCAB, 6);
    let init = DraftHead::random(VOCAB, DIM, 0.1, &mut ChaCha8Rng::seed_from_u64(7));
    let cfg = FitConfig {
        epochs: 20,
        ..FitConfig::default()
    };
    let mut joint = init.clone();
    fit_head(&mut joint, &train, &cfg).unwrap();
    let mut tokens_only = init.clone();
    fit_head(&mut tokens_only, &train, &FitConfig { signals: false, ..cfg }).unwrap();
    assert_eq!(joint.w_tok, tokens_only.w_tok);
    assert_eq!(tokens_only.w_conf, init.w_conf);
    let a = evaluate(&joint, &test).unwrap().cls;
    let b = evaluate(&tokens_only, &test).unwrap().cls;
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_and_zero_rate_change_nothing() {
    let train = linear_signal_corpus(64, DIM, VOCAB, 8);
    let init = DraftHead::random(VOCAB, DIM, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
    let mut h = init.clone();
    let log = fit_head(
        &mut h,
        &train,
        &FitConfig {
            epochs: 0,
            ..FitConfig::default()
        },
    )
    .unwrap();
    assert!(log.is_empty());
    assert_eq!(h, init);
    let log = fit_head(
        &mut h,
        &train,
        &FitConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 64,
            ..FitConfig::default()
        },
    )
    .unwrap();
    assert_eq!(h, init);
    assert!(log.windows(2).all(|w| (w[0].total - w[1].total).abs() < 1e-12));
}
