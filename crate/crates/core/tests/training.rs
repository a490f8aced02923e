mod common;

use phead_core::base_lm::{BaseLM, Vocab};
use phead_core::cost::count_ph_params;
use phead_core::ph_head::{PHConfig, PairClassifier, PersonalizationHead};
use phead_core::task_data::{make_binary_pairs, subsample_per_class, BinaryTaskExample, Split};
use phead_core::toy::{toy_dataset, ToyConfig};
use phead_core::trainer::{
    evaluate, run_data_epoch_grid, train_head, train_linear_only, EncodedTestSet, HeadTrainer, TrainConfig,
};
use phead_core::Error;

fn toy_pairs(per_class: usize, negatives: usize, seed: u64) -> (phead_core::task_data::Dataset, Vec<BinaryTaskExample>) {
    let ds = toy_dataset(&ToyConfig {
        train_per_class: per_class,
        test_per_class: 5,
        seed,
    });
    let pairs = make_binary_pairs(&ds, negatives, seed).unwrap();
    (ds, pairs)
}

#[test]
fn head_loss_falls_on_toy_pairs() {
    let base = common::random_base(64, 4, 1);
    let (_, pairs) = toy_pairs(4, 1, 3);
    let pairs = &pairs[..50];
    let cfg = TrainConfig {
        epochs: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let head = PersonalizationHead::init(PHConfig::new(64, 64, 2).with_seed(3)).unwrap();
    let (_, report) = train_head(&base, head, pairs, &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 20);
    assert!(
        report.epoch_losses[19] < report.epoch_losses[0],
        "{:?}",
        report.epoch_losses
    );
    assert_eq!(report.base_checksum_before, report.base_checksum_after);
    assert_eq!(report.trainable_param_count, count_ph_params(64, 64, true));
}

#[test]
fn linear_loss_falls_and_counts_only_the_output_layer() {
    let base = common::random_base(64, 4, 2);
    let (_, pairs) = toy_pairs(8, 1, 4);
    let cfg = TrainConfig {
        epochs: 20,
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, report) = train_linear_only(&base, &cfg, &pairs).unwrap();
    assert_eq!(report.trainable_param_count, 130);
    assert!(report.epoch_losses[19] < report.epoch_losses[0], "{:?}", report.epoch_losses);
}

#[test]
fn separable_pairs_reach_a_tenth_of_initial_loss() {
    // eight distinct pairs, each with its own target: separable by a head
    // that sees every token
    let base = common::random_base(16, 2, 5);
    let texts = ["play jazz", "rain in oslo", "book a table", "rate dune", "find dune", "add hello", "hey", "tonight"];
    let pairs: Vec<BinaryTaskExample> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| BinaryTaskExample {
            label_text: "play music".into(),
            input_text: t.to_string(),
            target: i % 3 == 0,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 200,
        lr: 0.1,
        seed: 5,
        ..TrainConfig::default()
    };
    // full-batch steps without dropout, so plateau annealing sees a smooth loss
    let ph = PHConfig {
        dropout_p: 0.0,
        ..PHConfig::new(16, 32, 2).with_seed(5)
    };
    let head = PersonalizationHead::init(ph).unwrap();
    let (_, report) = train_head(&base, head, &pairs, &cfg).unwrap();
    let (first, last) = (report.epoch_losses[0], *report.epoch_losses.last().unwrap());
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn identical_inputs_give_identical_heads() {
    let base = common::random_base(16, 2, 6);
    let (ds, pairs) = toy_pairs(3, 1, 6);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 6,
        ..TrainConfig::default()
    };
    let run = || {
        let head = PersonalizationHead::init(PHConfig::new(16, 16, 2).with_seed(6)).unwrap();
        let (head, _) = train_head(&base, head, &pairs, &cfg).unwrap();
        let m = evaluate(&base, &head, &ds.test, &ds.classes).unwrap();
        (head, m)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(m1.micro_f1, m1.accuracy);
}

#[test]
fn preconditions_are_enforced() {
    let frozen = common::random_base(16, 2, 7);
    let (_, pairs) = toy_pairs(2, 0, 7);
    let cfg = TrainConfig::default();
    let head = || PersonalizationHead::init(PHConfig::new(16, 16, 2)).unwrap();

    let corpus = ["a b c d e f g h i j k"];
    let unfrozen = BaseLM::init(frozen.config, Vocab::build(corpus), 0).unwrap();
    assert!(matches!(train_head(&unfrozen, head(), &pairs, &cfg), Err(Error::BaseNotFrozen)));
    assert!(matches!(train_head(&frozen, head(), &[], &cfg), Err(Error::Data(_))));
    let wide = PersonalizationHead::init(PHConfig::new(32, 16, 2)).unwrap();
    assert!(matches!(train_head(&frozen, wide, &pairs, &cfg), Err(Error::Config(_))));
}

#[test]
fn checkpointed_continuation_equals_one_long_run() {
    let base = common::random_base(16, 2, 8);
    let (_, pairs) = toy_pairs(3, 1, 8);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 8,
        ..TrainConfig::default()
    };
    let init = || PersonalizationHead::init(PHConfig::new(16, 8, 2).with_seed(8)).unwrap();
    let (whole, whole_report) = train_head(&base, init(), &pairs, &cfg).unwrap();

    let mut t = HeadTrainer::new(&base, init(), &pairs, &cfg).unwrap();
    t.run_epochs(1).unwrap();
    t.run_epochs(3).unwrap();
    let (pieces, report) = t.finish();
    assert_eq!(whole, pieces);
    assert_eq!(whole_report.epoch_losses, report.epoch_losses);
}

#[test]
fn plateau_halves_the_learning_rate() {
    // contradictory targets: the loss cannot keep improving
    let base = common::random_base(16, 2, 9);
    let pair = |target| BinaryTaskExample {
        label_text: "get weather".into(),
        input_text: "rain in oslo".into(),
        target,
    };
    let pairs = vec![pair(true), pair(false)];
    let cfg = TrainConfig {
        epochs: 60,
        seed: 9,
        ..TrainConfig::default()
    };
    let (_, report) = train_linear_only(&base, &cfg, &pairs).unwrap();
    assert!(report.final_lr < cfg.lr, "{:?}", report.epoch_lrs);
    assert!(report.final_lr >= cfg.min_lr);
    assert!(report.epoch_lrs.windows(2).all(|w| w[1] <= w[0]));
    // every reduction is by exactly the annealing factor (or to the floor)
    for w in report.epoch_lrs.windows(2) {
        if w[1] < w[0] {
            assert!(w[1] == cfg.min_lr || (w[1] - w[0] * cfg.anneal_factor).abs() < 1e-15);
        }
    }
}

#[test]
fn grid_has_one_cell_per_config_count_and_checkpoint() {
    let base = common::random_base(16, 2, 10);
    let ds = toy_dataset(&ToyConfig {
        train_per_class: 6,
        test_per_class: 2,
        seed: 10,
    });
    let cfg = TrainConfig {
        seed: 10,
        negatives_per_example: 1,
        ..TrainConfig::default()
    };
    let configs = [PHConfig::new(16, 8, 2), PHConfig::new(16, 16, 4)];
    let cells = run_data_epoch_grid(&base, &cfg, &ds, &[3, 6], &[1, 2], &configs).unwrap();
    assert_eq!(cells.len(), 8);
    let order: Vec<(usize, usize, usize)> = cells.iter().map(|c| (c.ph.d_ff, c.per_class, c.epoch)).collect();
    assert_eq!(
        order,
        vec![(8, 3, 1), (8, 3, 2), (8, 6, 1), (8, 6, 2), (16, 3, 1), (16, 3, 2), (16, 6, 1), (16, 6, 2)]
    );

    // the checkpoint-2 cell is the same model as an uninterrupted 2-epoch run
    let sub = subsample_per_class(&ds, Split::Train, 3, 10).unwrap();
    let pairs = make_binary_pairs(&sub, 1, 10).unwrap();
    let head = PersonalizationHead::init(configs[0].with_seed(10)).unwrap();
    let (head, _) = train_head(&base, head, &pairs, &TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
    let test = EncodedTestSet::new(&base, &ds.test, &ds.classes).unwrap();
    assert_eq!(test.evaluate(&head).unwrap(), cells[1].metrics);

    assert!(matches!(
        run_data_epoch_grid(&base, &cfg, &ds, &[6, 3], &[1], &configs),
        Err(Error::Config(_))
    ));
}

#[test]
fn trainer_leaves_base_bytes_untouched() {
    let base = common::random_base(16, 2, 11);
    let before = base.to_bytes();
    let (_, pairs) = toy_pairs(3, 2, 11);
    let head = PersonalizationHead::init(PHConfig::new(16, 16, 2).with_seed(11)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (head, _) = train_head(&base, head, &pairs, &cfg).unwrap();
    assert_eq!(before, base.to_bytes());
    assert!(head.is_finite());
    assert_eq!(head.param_count(), count_ph_params(16, 16, true));
}
