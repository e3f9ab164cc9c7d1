use neqsim::chain::simulate_frame;
use neqsim::fiber::LinkConfig;
use neqsim::frame::SymbolFrame;
use neqsim::metrics::{compute_ber, volterra_mult_count, Ber};
use neqsim::rnn::{infer_ber, train, CellKind, RnnEqualizer, RnnShape, SequenceData, TrainConfig};
use neqsim::rx::normalize_features;
use neqsim::tx::TxConfig;
use neqsim::volterra::{volterra_ber, volterra_train, VolterraConfig};
use proptest::prelude::*;

fn short_link(power_dbm: f64) -> (TxConfig, LinkConfig) {
    let tx = TxConfig {
        channels: 1,
        samples_per_symbol: 4,
        symbols_per_pol: 4096,
        launch_power_total_dbm: power_dbm,
        ..TxConfig::default()
    };
    let link = LinkConfig {
        spans: 2,
        ssfm_step: 5.0,
        ..LinkConfig::default()
    };
    (tx, link)
}

fn encode(frame: &SymbolFrame) -> Vec<u8> {
    let mut buf = Vec::new();
    frame.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn frames_depend_only_on_seed_and_survive_serialization() {
    let (tx, link) = short_link(0.0);
    let a = simulate_frame(&tx, &link, 11).unwrap();
    let b = simulate_frame(&tx, &link, 11).unwrap();
    let c = simulate_frame(&tx, &link, 12).unwrap();
    assert_eq!(encode(&a), encode(&b));
    assert_ne!(a.features, c.features);
    let back = SymbolFrame::read_from(encode(&a).as_slice()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn equalizers_learn_on_a_short_nonlinear_link() {
    let (tx, link) = short_link(10.0);
    let frame = simulate_frame(&tx, &link, 4).unwrap();
    let train_len = 2400;
    let frame = normalize_features(&frame, train_len).unwrap();

    let shape = RnnShape {
        kind: CellKind::Gru,
        hidden: 4,
        features: 4,
        window: 9,
        bits: 4,
        span: 3,
    };
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 15,
        patience: 15,
        train_symbols: train_len,
        val_symbols: 600,
        test_symbols: 900,
        learning_rate: 0.01,
    };
    let data = SequenceData::from_frame(&frame);
    let split = cfg.split(data.len()).unwrap();
    let mut model = RnnEqualizer::init(shape, 1).unwrap();
    let report = train(&mut model, &data, &split, &cfg, 1).unwrap();
    let first = report.history[0].val_loss;
    assert!(report.best_val_loss < 0.5 * first, "{first} -> {}", report.best_val_loss);
    let ber = infer_ber(&model, &data, split.test.clone()).unwrap();
    assert_eq!(ber.total, (900 - ber.dropped_tail) as u64 * 4);
    assert!((ber.errors as f64) < 0.05 * ber.total as f64);

    let vcfg = VolterraConfig {
        lengths: vec![9, 3],
        epochs: 5,
        train_symbols: 3000,
        test_symbols: 900,
        ..VolterraConfig::default()
    };
    let (eq, history) = volterra_train(&frame, &vcfg).unwrap();
    assert_eq!(history.mse.len(), 5);
    assert!(history.mse[4][0] < history.mse[0][0]);
    let vb = volterra_ber(&eq, &frame, 3000..3900).unwrap();
    assert!(vb.ber() < 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ber_merges_additively(a in proptest::collection::vec(0u8..2, 1..200), flips in proptest::collection::vec(any::<bool>(), 200)) {
        let b: Vec<u8> = a.iter().zip(&flips).map(|(x, f)| x ^ (*f as u8)).collect();
        let half = a.len() / 2;
        let whole = compute_ber(&b, &a).unwrap();
        let left = compute_ber(&b[..half], &a[..half]).unwrap_or(Ber { errors: 0, total: 0 });
        let right = compute_ber(&b[half..], &a[half..]).unwrap();
        prop_assert_eq!(left.merge(&right), whole);
        prop_assert_eq!(whole.total, a.len() as u64);
    }

    #[test]
    fn volterra_cost_grows_with_memory(l1 in 0u64..40, l2 in 0u64..15, l3 in 0u64..6) {
        let base = [2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1];
        let wider = [2 * l1 + 3, 2 * l2 + 1, 2 * l3 + 1];
        let one = volterra_mult_count(&base, 1).unwrap();
        prop_assert!(volterra_mult_count(&wider, 1).unwrap() > one);
        prop_assert_eq!(volterra_mult_count(&base, 4).unwrap(), 4 * one);
    }
}
