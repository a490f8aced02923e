//! Runs the data-vs-epochs grid on the toy intents and prints each head's
//! macro-F1 differential matrix (rows: per-class count, columns: epochs).

use phead_core::ph_head::PHConfig;
use phead_core::toy::{toy_base, toy_dataset, toy_pretrain_config, ToyConfig};
use phead_core::trainer::{differential_matrix, run_data_epoch_grid, TrainConfig};

fn main() -> phead_core::Result<()> {
    let base = toy_base(3000, &toy_pretrain_config(0))?;
    let d = base.config.d_model;
    let configs = [PHConfig::new(d, 32, 2), PHConfig::new(d, 64, 2)];
    let (counts, ckpts) = ([50, 100], [50, 100]);
    for seed in 0..3u64 {
        let ds = toy_dataset(&ToyConfig { seed, ..ToyConfig::default() });
        let cfg = TrainConfig { seed, negatives_per_example: 1, ..TrainConfig::default() };
        let cells = run_data_epoch_grid(&base, &cfg, &ds, &counts, &ckpts, &configs)?;
        for ph in &configs {
            let mine: Vec<_> = cells.iter().filter(|c| c.ph.d_ff == ph.d_ff).cloned().collect();
            let base_f1 = 100.0 * mine[0].metrics.macro_f1;
            println!("seed {seed} d_ff {}: origin {base_f1:.2} diff {:?}", ph.d_ff, differential_matrix(&mine, &counts, &ckpts).unwrap());
        }
    }
    Ok(())
}
