//! `sweep` and `grid`: one training run per (hidden dim, heads, per-class
//! count, seed), evaluated at every epoch checkpoint. A failing run is
//! recorded in the CSV and the rest carry on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use phead_core::base_lm::BaseLM;
use phead_core::ph_head::{head_file_size, PHConfig};
use phead_core::registry::BASE_FILE;
use phead_core::trainer::{run_grid_row, EncodedTestSet, GridCell, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{load_dataset, write_file};
use crate::config::{apply, RunConfig, TOOL_VERSION};
use crate::SweepArgs;

#[derive(Clone, Copy, Debug)]
struct Run {
    hidden_dim: usize,
    heads: usize,
    per_class: usize,
    seed: u64,
}

#[derive(Serialize)]
struct Row {
    hidden_dim: usize,
    heads: usize,
    per_class: usize,
    epoch: usize,
    seed: u64,
    acc: Option<f64>,
    macro_f1: Option<f64>,
    micro_f1: Option<f64>,
    params: Option<usize>,
    head_bytes: Option<usize>,
    wall_time: Option<f64>,
    status: &'static str,
    error: String,
}

fn ok_row(run: &Run, cell: &GridCell) -> Row {
    Row {
        hidden_dim: run.hidden_dim,
        heads: run.heads,
        per_class: run.per_class,
        epoch: cell.epoch,
        seed: run.seed,
        acc: Some(cell.metrics.accuracy),
        macro_f1: Some(cell.metrics.macro_f1),
        micro_f1: Some(cell.metrics.micro_f1),
        params: Some(cell.params),
        head_bytes: Some(cell.head_bytes),
        wall_time: Some(cell.wall_time_secs),
        status: "ok",
        error: String::new(),
    }
}

fn failed_row(run: &Run, epoch: usize, ph: &PHConfig, err: &str) -> Row {
    let valid = ph.validate().is_ok();
    Row {
        hidden_dim: run.hidden_dim,
        heads: run.heads,
        per_class: run.per_class,
        epoch,
        seed: run.seed,
        acc: None,
        macro_f1: None,
        micro_f1: None,
        params: valid.then(|| phead_core::cost::count_ph_params(ph.d_model, ph.d_ff, true)),
        head_bytes: valid.then(|| head_file_size(ph)),
        wall_time: None,
        status: "failed",
        error: err.to_string(),
    }
}

pub fn sweep(mut cfg: RunConfig, a: SweepArgs, grid: bool) -> Result<ExitCode> {
    let s = &mut cfg.sweep;
    apply(&mut s.hidden_dims, a.hidden_dims);
    apply(&mut s.heads, a.heads);
    apply(&mut s.per_class, a.per_class);
    apply(&mut s.epochs, a.epoch_checkpoints);
    apply(&mut s.seeds, a.seeds);
    apply(&mut s.jobs, a.jobs);
    apply(&mut cfg.train.lr, a.lr);
    apply(&mut cfg.train.batch_size, a.batch_size);
    apply(&mut cfg.train.negatives_per_example, a.negatives);
    apply(&mut cfg.head.dropout, a.dropout);
    let s = &cfg.sweep;
    for (name, empty) in [
        ("hidden dims", s.hidden_dims.is_empty()),
        ("heads", s.heads.is_empty()),
        ("per-class counts", s.per_class.is_empty()),
        ("epochs", s.epochs.is_empty()),
        ("seeds", s.seeds.is_empty()),
    ] {
        if empty {
            bail!("no {name} to sweep over");
        }
    }
    if s.epochs.windows(2).any(|w| w[0] >= w[1]) || s.epochs[0] == 0 {
        bail!("epoch checkpoints must be positive and ascending: {:?}", s.epochs);
    }
    // the final epoch count is reached through the checkpoints
    cfg.train.epochs = *s.epochs.last().unwrap_or(&1);

    let base_path = cfg.root()?.join(BASE_FILE);
    let base = BaseLM::load(&base_path).with_context(|| format!("loading {}", base_path.display()))?;
    let ds = load_dataset(&a.data)?;
    let test = EncodedTestSet::new(&base, &ds.test, &ds.classes)?;
    let d_model = base.config.d_model;

    let s = &cfg.sweep;
    let mut runs = Vec::new();
    for &hidden_dim in &s.hidden_dims {
        for &heads in &s.heads {
            for &per_class in &s.per_class {
                for &seed in &s.seeds {
                    runs.push(Run {
                        hidden_dim,
                        heads,
                        per_class,
                        seed,
                    });
                }
            }
        }
    }
    eprintln!("{} runs x {} checkpoints", runs.len(), s.epochs.len());

    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.jobs.max(1)).build()?;
    let results: Vec<(Run, PHConfig, Result<Vec<GridCell>, String>)> = pool.install(|| {
        runs.par_iter()
            .map(|run| {
                let ph = PHConfig {
                    dropout_p: cfg.head.dropout,
                    ..PHConfig::new(d_model, run.hidden_dim, run.heads).with_seed(run.seed)
                };
                let train = TrainConfig {
                    seed: run.seed,
                    ..cfg.train.clone()
                };
                let res = run_grid_row(&base, &train, &ds, &test, run.per_class, &cfg.sweep.epochs, ph)
                    .map_err(|e| e.to_string());
                match &res {
                    Ok(cells) => eprintln!(
                        "d_ff {} heads {} per_class {} seed {}: macro-F1 {}",
                        run.hidden_dim,
                        run.heads,
                        run.per_class,
                        run.seed,
                        cells
                            .iter()
                            .map(|c| format!("{:.2}@{}", 100.0 * c.metrics.macro_f1, c.epoch))
                            .collect::<Vec<_>>()
                            .join(" ")
                    ),
                    Err(e) => eprintln!(
                        "d_ff {} heads {} per_class {} seed {}: failed: {e}",
                        run.hidden_dim, run.heads, run.per_class, run.seed
                    ),
                }
                (*run, ph, res)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = 0;
    for (run, ph, res) in &results {
        match res {
            Ok(cells) => rows.extend(cells.iter().map(|c| ok_row(run, c))),
            Err(e) => {
                failures += 1;
                rows.extend(cfg.sweep.epochs.iter().map(|&ep| failed_row(run, ep, ph, e)));
            }
        }
    }

    let mut buf = Vec::new();
    writeln!(buf, "# {TOOL_VERSION} {}", if grid { "grid" } else { "sweep" })?;
    writeln!(buf, "# dataset: {}", a.data.display())?;
    writeln!(buf, "# config: {}", serde_json::to_string(&cfg)?)?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_file(&a.out, &buf)?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());

    if grid {
        let md = grid_markdown(&rows, &cfg);
        if let Some(p) = &a.markdown {
            write_file(p, md.as_bytes())?;
        }
        print!("{md}");
    }
    if failures > 0 {
        eprintln!("{failures} of {} runs failed", results.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

/// Per head shape: mean macro-F1 over seeds for every (count, epoch), with
/// the change relative to the smallest count at the first checkpoint.
fn grid_markdown(rows: &[Row], cfg: &RunConfig) -> String {
    let s = &cfg.sweep;
    let mut cells: BTreeMap<(usize, usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(f) = r.macro_f1 {
            cells.entry((r.hidden_dim, r.heads, r.per_class, r.epoch)).or_default().push(100.0 * f);
        }
    }
    let mean = |k: &(usize, usize, usize, usize)| cells.get(k).map(|v| v.iter().sum::<f64>() / v.len() as f64);
    let mut md = format!("<!-- {TOOL_VERSION}; seeds: {:?} -->\n\n", s.seeds);
    for &d in &s.hidden_dims {
        for &h in &s.heads {
            let _ = writeln!(md, "## Hidden dim {d}, {h} heads: macro-F1 (change)\n");
            let _ = write!(md, "| Examples/class |");
            for e in &s.epochs {
                let _ = write!(md, " {e} epochs |");
            }
            let _ = write!(md, "\n|---:|");
            for _ in &s.epochs {
                let _ = write!(md, "---:|");
            }
            md.push('\n');
            let origin = mean(&(d, h, s.per_class[0], s.epochs[0]));
            for &k in &s.per_class {
                let _ = write!(md, "| {k} |");
                for &e in &s.epochs {
                    match (mean(&(d, h, k, e)), origin) {
                        (Some(v), Some(o)) => {
                            let _ = write!(md, " {v:.2} ({:+.2}) |", v - o);
                        }
                        (Some(v), None) => {
                            let _ = write!(md, " {v:.2} |");
                        }
                        _ => md.push_str(" failed |"),
                    }
                }
                md.push('\n');
            }
            md.push('\n');
        }
    }
    md
}
