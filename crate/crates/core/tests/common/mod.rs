#![allow(dead_code)]

use phead_core::base_lm::{BaseConfig, BaseLM, PretrainConfig, Vocab};
use phead_core::toy::{toy_base, toy_corpus};

/// A randomly initialized, frozen base over the toy vocabulary.
pub fn random_base(d_model: usize, n_heads: usize, seed: u64) -> BaseLM {
    let corpus = toy_corpus(200, seed);
    let vocab = Vocab::build(corpus.iter().map(String::as_str));
    let config = BaseConfig {
        d_model,
        n_layers: 2,
        n_heads,
        d_ff_base: 2 * d_model,
        max_seq_len: 32,
        dropout_p: 0.1,
    };
    BaseLM::init(config, vocab, seed).unwrap().freeze()
}

/// A small base pretrained for a few seconds; enough for heads to learn from.
pub fn quick_base(d_model: usize, seed: u64) -> BaseLM {
    let cfg = PretrainConfig {
        model: BaseConfig {
            d_model,
            n_layers: 1,
            n_heads: 2,
            d_ff_base: 2 * d_model,
            max_seq_len: 32,
            dropout_p: 0.1,
        },
        epochs: 2,
        seed,
        ..PretrainConfig::default()
    };
    toy_base(700, &cfg).unwrap()
}
