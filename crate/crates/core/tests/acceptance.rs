//! One pass/fail line per acceptance criterion. Exits nonzero if any fails.

mod common;

use std::fs;
use std::time::Instant;

use phead_core::base_lm::{BaseConfig, BaseLM, Vocab, CLS, SEP};
use phead_core::cost::{count_linear_params, count_ph_params, mib, CostModel, Mode};
use phead_core::encoder::Pass;
use phead_core::gradcheck::{grad_check, H_F64};
use phead_core::ph_head::{PHConfig, PairClassifier, PersonalizationHead, HEAD_FILE_OVERHEAD};
use phead_core::registry::predict_with;
use phead_core::task_data::{make_binary_pairs, predict_class, Dataset, LabeledExample};
use phead_core::tensor::Tensor;
use phead_core::toy::{render, toy_base, toy_dataset, toy_pretrain_config, ToyConfig, TOY_CLASSES};
use phead_core::trainer::{differential_matrix, evaluate, run_data_epoch_grid, train_head, train_linear_only, TrainConfig};
use phead_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HIDDEN_DIMS: [usize; 5] = [2048, 1024, 512, 256, 128];
const PUBLISHED_PARAMS: [f64; 5] = [5.52e6, 3.94e6, 3.15e6, 2.76e6, 2.57e6];
const PUBLISHED_MB: [f64; 5] = [21.0, 15.0, 12.0, 11.0, 9.8];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Parameter count written out from the block structure, independent of the
/// library's formula: four d x d projections with biases, two FFN layers,
/// two layer norms, a 2-way output layer.
fn oracle_params(d: usize, f: usize) -> usize {
    let proj = d * d + d;
    let ffn_in = d * f + f;
    let ffn_out = f * d + d;
    let ln = 2 * d;
    let out = 2 * d + 2;
    4 * proj + ffn_in + ffn_out + 2 * ln + out
}

fn crit1() -> Outcome {
    let mut detail = Vec::new();
    for (&f, &published) in HIDDEN_DIMS.iter().zip(&PUBLISHED_PARAMS) {
        let counted = count_ph_params(768, f, true);
        if counted != oracle_params(768, f) {
            return Err(format!("d_ff {f}: formula {counted} vs oracle {}", oracle_params(768, f)));
        }
        for heads in [2, 4, 8] {
            let head = PersonalizationHead::init(PHConfig::new(768, f, heads)).map_err(err)?;
            if head.param_count() != counted {
                return Err(format!("d_ff {f} heads {heads}: instantiated {} vs {counted}", head.param_count()));
            }
        }
        let rel = (counted as f64 - published).abs() / published;
        if rel > 0.005 {
            return Err(format!("d_ff {f}: {counted} vs {published} ({:.3}%)", 100.0 * rel));
        }
        detail.push(format!("{f}:{counted}"));
    }
    let lin = count_linear_params(768, 2);
    check(lin == 1538, format!("{} linear={lin} (tol 0.5%)", detail.join(" ")))
}

fn crit2() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut detail = Vec::new();
    for (&f, &published) in HIDDEN_DIMS.iter().zip(&PUBLISHED_MB) {
        let params = count_ph_params(768, f, true) as u64;
        let size = mib(4 * params);
        let rel = (size - published).abs() / published;
        if rel > 0.10 {
            return Err(format!("d_ff {f}: {size:.2} MiB vs {published} ({:.1}%)", 100.0 * rel));
        }
        let path = dir.path().join(format!("h{f}.piph"));
        PersonalizationHead::init(PHConfig::new(768, f, 2))
            .and_then(|h| h.save(&path))
            .map_err(err)?;
        let on_disk = fs::metadata(&path).map_err(err)?.len();
        let expected = 4 * params + HEAD_FILE_OVERHEAD as u64;
        if on_disk != expected || (on_disk as f64 / (4 * params) as f64 - 1.0) > 0.01 {
            return Err(format!("d_ff {f}: file {on_disk} bytes vs {expected}"));
        }
        detail.push(format!("{f}:{size:.2}MiB"));
    }
    Ok(format!("{} (tol 10%, files within 1%)", detail.join(" ")))
}

fn crit3() -> Outcome {
    let runs = 12u64;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = *[8usize, 16].choose(&mut rng).unwrap();
        let base = common::random_base(d, 2, seed);
        let before = base.to_bytes();
        let ds = toy_dataset(&ToyConfig {
            train_per_class: rng.gen_range(2..5),
            test_per_class: 1,
            seed,
        });
        let pairs = make_binary_pairs(&ds, rng.gen_range(0..3), seed).map_err(err)?;
        let ph = PHConfig::new(d, *[8usize, 16, 32].choose(&mut rng).unwrap(), *[1usize, 2].choose(&mut rng).unwrap());
        let cfg = TrainConfig {
            epochs: rng.gen_range(1..4),
            batch_size: rng.gen_range(1..9),
            seed,
            ..TrainConfig::default()
        };
        let head = PersonalizationHead::init(ph.with_seed(seed)).map_err(err)?;
        let (_, report) = train_head(&base, head, &pairs, &cfg).map_err(err)?;
        if base.to_bytes() != before || report.base_checksum_before != report.base_checksum_after {
            return Err(format!("run {seed}: base changed"));
        }
        if base.compute_checksum() != base.checksum() {
            return Err(format!("run {seed}: checksum drift"));
        }
    }
    Ok(format!("{runs} runs, base bytes identical"))
}

fn crit4() -> Outcome {
    let seeds = 20u64;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let vocab = Vocab::build(["a b c d e f g"]);
        let config = BaseConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff_base: 16,
            max_seq_len: 4,
            dropout_p: 0.1,
        };
        let base = BaseLM::init(config, vocab, seed).map_err(err)?;
        let head = PersonalizationHead::init(PHConfig::new(8, 16, 2).with_seed(seed)).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = [CLS, rng.gen_range(5..base.vocab.len()), SEP, rng.gen_range(5..base.vocab.len())];
        let target = rng.gen_range(0..2usize);
        let mut params: Vec<Tensor> = base.tensors().into_iter().cloned().collect();
        let n_base = params.len();
        params.extend(head.tensors().into_iter().cloned());
        let e = grad_check::<f64, _>(
            |g, ids| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut pass = Pass {
                    dropout_p: 0.0,
                    training: false,
                    rng: &mut rng,
                };
                let hidden = base.forward_graph(g, &ids[..n_base], &tokens, &mut pass)?;
                let logits = head.logits_graph(g, &ids[n_base..], hidden, 0, false, &mut rng)?;
                g.cross_entropy(logits, &[target])
            },
            &params,
            H_F64,
        )
        .map_err(err)?;
        worst = worst.max(e);
    }
    check(worst <= 1e-4, format!("{seeds} seeds, max rel err {worst:.2e} (tol 1e-4)"))
}

fn toy_setup(seed: u64) -> (Dataset, TrainConfig) {
    let ds = toy_dataset(&ToyConfig {
        train_per_class: 100,
        test_per_class: 30,
        seed,
    });
    let cfg = TrainConfig {
        epochs: 50,
        seed,
        negatives_per_example: 1,
        ..TrainConfig::default()
    };
    (ds, cfg)
}

fn crit5(base: &BaseLM) -> Outcome {
    let (mut ph_sum, mut lin_sum) = (0.0, 0.0);
    for seed in 0..3u64 {
        let (ds, cfg) = toy_setup(seed);
        let pairs = make_binary_pairs(&ds, 1, seed).map_err(err)?;
        let head = PersonalizationHead::init(PHConfig::new(base.config.d_model, 64, 2).with_seed(seed)).map_err(err)?;
        let (head, _) = train_head(base, head, &pairs, &cfg).map_err(err)?;
        ph_sum += evaluate(base, &head, &ds.test, &ds.classes).map_err(err)?.macro_f1;
        let (lin, _) = train_linear_only(base, &cfg, &pairs).map_err(err)?;
        lin_sum += evaluate(base, &lin, &ds.test, &ds.classes).map_err(err)?.macro_f1;
    }
    let (ph, lin) = (100.0 * ph_sum / 3.0, 100.0 * lin_sum / 3.0);
    check(ph >= lin + 5.0, format!("ph {ph:.2} vs linear {lin:.2} macro-F1 (margin >= 5)"))
}

fn crit6(base: &BaseLM) -> Outcome {
    let d = base.config.d_model;
    let configs = [PHConfig::new(d, 32, 2), PHConfig::new(d, 64, 2)];
    let (counts, ckpts) = ([50, 100], [50, 100]);
    let (mut data_gain, mut epoch_gain, mut n) = (0.0, 0.0, 0.0);
    for seed in 0..3u64 {
        let (ds, cfg) = toy_setup(seed);
        let cells = run_data_epoch_grid(base, &cfg, &ds, &counts, &ckpts, &configs).map_err(err)?;
        for ph in &configs {
            let mine: Vec<_> = cells.iter().filter(|c| c.ph.d_ff == ph.d_ff).cloned().collect();
            let m = differential_matrix(&mine, &counts, &ckpts).ok_or("incomplete grid")?;
            data_gain += m[1][0];
            epoch_gain += m[0][1];
            n += 1.0;
        }
    }
    let (dg, eg) = (data_gain / n, epoch_gain / n);
    check(dg > eg, format!("gain(data) {dg:+.2} vs gain(epochs) {eg:+.2} points"))
}

fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let c = rng.gen_range(2..8);
    let classes: Vec<String> = (0..c).map(|i| format!("class_{i}")).collect();
    let train = (0..c)
        .flat_map(|i| (0..rng.gen_range(1..6)).map(move |j| (i, j)))
        .map(|(i, j)| LabeledExample::new(format!("text {i} {j}"), classes[i].clone()))
        .collect();
    Dataset {
        name: "random".into(),
        classes,
        train,
        test: Vec::new(),
    }
}

fn crit7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 200;
    for t in 0..trials {
        let ds = random_dataset(&mut rng);
        let (n, c) = (ds.train.len(), ds.classes.len());
        let true_only = make_binary_pairs(&ds, 0, t).map_err(err)?;
        let all = make_binary_pairs(&ds, c - 1, t).map_err(err)?;
        if true_only.len() != n || all.len() != n * c || !true_only.iter().all(|p| p.target) {
            return Err(format!("trial {t}: {} / {} pairs for {n} examples, {c} classes", true_only.len(), all.len()));
        }
    }
    Ok(format!("{trials} random datasets, |pairs| = n and n*C"))
}

fn crit8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (trials, mut ties) = (1000, 0);
    for t in 0..trials {
        let n = rng.gen_range(1..10);
        let classes: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        // a coarse grid makes ties frequent
        let conf: Vec<f32> = (0..n).map(|_| rng.gen_range(0..6) as f32 / 5.0).collect();
        let mut best = 0;
        for i in 1..n {
            if conf[i] > conf[best] {
                best = i;
            }
        }
        if conf.iter().filter(|&&c| c == conf[best]).count() > 1 {
            ties += 1;
        }
        let p = predict_class(|c| Ok(conf[c[1..].parse::<usize>().unwrap()]), &classes).map_err(err)?;
        if p.class != classes[best] {
            return Err(format!("trial {t}: {conf:?} decoded {} expected {}", p.class, classes[best]));
        }
    }
    Ok(format!("{trials} vectors ({ties} with ties) match brute force"))
}

fn crit9() -> Outcome {
    let (base, head, n) = (109_000_000u64, 5_520_000u64, 1_000_000u64);
    let model = CostModel {
        base_params: base,
        head_params: head,
        linear_params: count_linear_params(768, 2) as u64,
        n_users: n,
    };
    let ph = model.aggregate(Mode::PhOnly);
    let full = model.aggregate(Mode::FullFinetune);
    let want_ph = 109_000_000u128 + 5_520_000_000_000;
    let want_full = 1_000_000u128 * (109_000_000 + 1538);
    if ph.stored_params_total as u128 != want_ph || full.stored_params_total as u128 != want_full {
        return Err(format!("stored {} / {}", ph.stored_params_total, full.stored_params_total));
    }
    if (full.stored_params_total as f64 - 1.09e14).abs() / 1.09e14 > 1e-4 {
        return Err(format!("full fine-tune {:.4e} is not ~1.09e14", full.stored_params_total as f64));
    }
    let ratio = full.stored_params_total as f64 / ph.stored_params_total as f64;
    if ratio != want_full as f64 / want_ph as f64 {
        return Err(format!("ratio {ratio}"));
    }
    for f in HIDDEN_DIMS {
        let m = CostModel {
            head_params: count_ph_params(768, f, true) as u64,
            ..model
        };
        if !m.head_smaller_than_base() {
            return Err(format!("d_ff {f}: head not smaller than base"));
        }
    }
    Ok(format!("ph_only {:.4e} vs full {:.4e}, ratio {ratio:.4}", ph.stored_params_total as f64, full.stored_params_total as f64))
}

fn bits(ts: Vec<&Tensor>) -> Vec<Vec<u32>> {
    ts.iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn crit10() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let base = common::quick_base(16, 10);
    let head = PersonalizationHead::init(PHConfig::new(16, 32, 2).with_seed(10)).map_err(err)?;
    let (bp, hp) = (dir.path().join("base.pibm"), dir.path().join("head.piph"));
    base.save(&bp).map_err(err)?;
    head.save(&hp).map_err(err)?;
    let base2 = BaseLM::load(&bp).map_err(err)?;
    let head2 = PersonalizationHead::load(&hp).map_err(err)?;
    if bits(base.tensors()) != bits(base2.tensors()) || bits(head.tensors()) != bits(head2.tensors()) {
        return Err("weights differ after reload".into());
    }
    let classes: Vec<String> = TOY_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..100 {
        let text = render(TOY_CLASSES.choose(&mut rng).unwrap(), &mut rng);
        let a = predict_with(&base, &head, &text, &classes).map_err(err)?;
        let b = predict_with(&base2, &head2, &text, &classes).map_err(err)?;
        if a != b {
            return Err(format!("input {i} predicted differently: {a:?} vs {b:?}"));
        }
    }
    for path in [&bp, &hp] {
        let mut bytes = fs::read(path).map_err(err)?;
        let at = bytes.len() * 2 / 3;
        bytes[at] ^= 0x01;
        let bad = dir.path().join("corrupt");
        fs::write(&bad, &bytes).map_err(err)?;
        let rejected = if path == &bp {
            matches!(BaseLM::load(&bad), Err(Error::Corrupted { .. }))
        } else {
            matches!(PersonalizationHead::load(&bad), Err(Error::Corrupted { .. }))
        };
        if !rejected {
            return Err(format!("corrupted {} was accepted", path.display()));
        }
    }
    Ok("bitwise reload, 100 identical predictions, corruption rejected".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n}: PASS  {d}  [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL  {d}  [{secs:.1}s]");
            }
        }
    };
    let quick: [(usize, fn() -> Outcome); 4] = [(1, crit1), (2, crit2), (3, crit3), (4, crit4)];
    for (n, f) in quick {
        let t = Instant::now();
        report(n, t, f());
    }

    let t = Instant::now();
    match toy_base(3000, &toy_pretrain_config(0)) {
        Ok(base) => {
            println!("toy base pretrained in {:.1}s", t.elapsed().as_secs_f64());
            let t = Instant::now();
            report(5, t, crit5(&base));
            let t = Instant::now();
            report(6, t, crit6(&base));
        }
        Err(e) => {
            report(5, t, Err(format!("pretraining failed: {e}")));
            report(6, t, Err(format!("pretraining failed: {e}")));
        }
    }

    let rest: [(usize, fn() -> Outcome); 4] = [(7, crit7), (8, crit8), (9, crit9), (10, crit10)];
    for (n, f) in rest {
        let t = Instant::now();
        report(n, t, f());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
