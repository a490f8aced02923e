//! Trains a personalization head and the linear-only baseline on the toy
//! intents and prints test macro-F1 for each.

use std::time::Instant;

use phead_core::ph_head::{PHConfig, PersonalizationHead};
use phead_core::task_data::make_binary_pairs;
use phead_core::toy::{toy_base, toy_dataset, toy_pretrain_config, ToyConfig};
use phead_core::trainer::{evaluate, train_head, train_linear_only, TrainConfig};

fn main() -> phead_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric args")).collect();
    let epochs = args.first().copied().unwrap_or(50);
    let negatives = args.get(1).copied().unwrap_or(1);
    let corpus = args.get(2).copied().unwrap_or(3000);

    let t = Instant::now();
    let base = toy_base(corpus, &toy_pretrain_config(0))?;
    println!("base pretrained in {:.1}s", t.elapsed().as_secs_f64());
    for seed in 0..3u64 {
        let ds = toy_dataset(&ToyConfig { seed, ..ToyConfig::default() });
        let pairs = make_binary_pairs(&ds, negatives, seed)?;
        let cfg = TrainConfig { epochs, seed, negatives_per_example: negatives, ..TrainConfig::default() };
        let t = Instant::now();
        let head = PersonalizationHead::init(PHConfig::new(base.config.d_model, 64, 2).with_seed(seed))?;
        let (head, rep) = train_head(&base, head, &pairs, &cfg)?;
        let ph = evaluate(&base, &head, &ds.test, &ds.classes)?;
        let t_ph = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (lin, lrep) = train_linear_only(&base, &cfg, &pairs)?;
        let li = evaluate(&base, &lin, &ds.test, &ds.classes)?;
        println!(
            "seed {seed}: ph {:.2} ({:.1}s, loss {:.3}->{:.3})  linear {:.2} ({:.1}s, loss {:.3}->{:.3})",
            100.0 * ph.macro_f1,
            t_ph,
            rep.epoch_losses[0],
            rep.epoch_losses.last().unwrap(),
            100.0 * li.macro_f1,
            t.elapsed().as_secs_f64(),
            lrep.epoch_losses[0],
            lrep.epoch_losses.last().unwrap(),
        );
    }
    Ok(())
}
