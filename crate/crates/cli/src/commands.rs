use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use phead_core::base_lm::pretrain_mlm;
use phead_core::cost::{count_linear_params, count_ph_params, CostModel, CostReport, PEInput, ScoreUnit};
use phead_core::ph_head::PersonalizationHead;
use phead_core::registry::{Registry, UserId, BASE_FILE, USERS_DIR};
use phead_core::task_data::{self, convert_clinc as clinc, convert_snips as snips, verbalize, Dataset, Split};
use phead_core::toy::{toy_corpus, toy_dataset, ToyConfig};
use phead_core::trainer::{evaluate, train_head};
use serde::Serialize;
use serde_json::json;

use crate::config::{apply, Artifact, RunConfig, TOOL_VERSION};
use crate::{ClincArgs, ConvertArgs, CostArgs, EvalArgs, GenToyArgs, PredictArgs, PretrainArgs, TrainArgs};

pub fn emit<T: Serialize>(command: &str, cfg: &RunConfig, body: T, extra_out: Option<&Path>) -> Result<()> {
    let artifact = Artifact {
        tool: TOOL_VERSION,
        command,
        config: cfg,
        body,
    };
    let text = serde_json::to_string_pretty(&artifact)?;
    if let Some(path) = extra_out {
        write_file(path, text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load_jsonl(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let ds = load_dataset(path)?;
        let mut out: Vec<String> = ds.classes.iter().map(|c| verbalize(c)).collect();
        out.extend(ds.train.into_iter().map(|e| e.text));
        return Ok(out);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn pretrain(mut cfg: RunConfig, a: PretrainArgs) -> Result<ExitCode> {
    let p = &mut cfg.pretrain;
    apply(&mut p.model.d_model, a.d_model);
    apply(&mut p.model.n_layers, a.layers);
    apply(&mut p.model.n_heads, a.heads);
    apply(&mut p.model.d_ff_base, a.d_ff);
    apply(&mut p.model.max_seq_len, a.max_seq_len);
    apply(&mut p.epochs, a.epochs);
    apply(&mut p.lr, a.lr);
    apply(&mut p.batch_size, a.batch_size);
    apply(&mut p.seed, a.seed);
    let into_registry = a.out.is_none();
    let out = match a.out {
        Some(p) => p,
        None => cfg.root()?.join(BASE_FILE),
    };
    let corpus = read_corpus(&a.corpus)?;
    let (base, losses) = pretrain_mlm(&corpus, &cfg.pretrain)?;
    for (i, l) in losses.iter().enumerate() {
        eprintln!("epoch {:>3}  mlm loss {l:.4}", i + 1);
    }
    let base = base.freeze();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
        if into_registry {
            fs::create_dir_all(dir.join(USERS_DIR))?;
        }
    }
    base.save(&out)?;
    let body = json!({
        "base_path": out,
        "params": base.param_count(),
        "vocab_size": base.vocab.len(),
        "checksum": format!("{:016x}", base.checksum()),
        "mlm_loss": losses,
    });
    emit("pretrain", &cfg, body, a.report.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<ExitCode> {
    apply(&mut cfg.head.hidden_dim, a.head.hidden_dim);
    apply(&mut cfg.head.heads, a.head.heads);
    apply(&mut cfg.head.dropout, a.head.dropout);
    let t = &mut cfg.train;
    apply(&mut t.epochs, a.train.epochs);
    apply(&mut t.lr, a.train.lr);
    apply(&mut t.batch_size, a.train.batch_size);
    apply(&mut t.negatives_per_example, a.train.negatives);
    apply(&mut t.seed, a.train.seed);

    let user = UserId::new(a.user.as_str())?;
    let reg = Registry::open(cfg.root()?)?;
    let mut ds = load_dataset(&a.data)?;
    if let Some(k) = a.per_class {
        ds = task_data::subsample_per_class(&ds, Split::Train, k, cfg.train.seed)?;
    }
    let pairs = task_data::make_binary_pairs(&ds, cfg.train.negatives_per_example, cfg.train.seed)?;
    let ph = cfg.head.config(reg.base().config.d_model, cfg.train.seed);
    let head = PersonalizationHead::init(ph)?;
    eprintln!(
        "training {user}: {} pairs, head {} params, {} epochs",
        pairs.len(),
        phead_core::ph_head::PairClassifier::param_count(&head),
        cfg.train.epochs
    );
    let (head, report) = train_head(reg.base(), head, &pairs, &cfg.train)?;
    if report.base_checksum_before != report.base_checksum_after {
        bail!("base weights changed during training");
    }
    let version = reg.put_head(&user, &head)?;
    let body = json!({
        "user": user,
        "version": version,
        "head_path": reg.head_path(&user, version),
        "head_config": ph,
        "per_class": a.per_class,
        "checksums_match": true,
        "report": report,
    });
    emit("train", &cfg, body, a.report.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

pub fn eval(cfg: RunConfig, a: EvalArgs) -> Result<ExitCode> {
    let user = UserId::new(a.user.as_str())?;
    let reg = Registry::open(cfg.root()?)?;
    let head = reg.get_head(&user, a.version)?;
    let ds = load_dataset(&a.data)?;
    let metrics = evaluate(reg.base(), &head, &ds.test, &ds.classes)?;
    eprintln!(
        "{user}: accuracy {:.2}  macro-F1 {:.2}  micro-F1 {:.2}  (n = {})",
        100.0 * metrics.accuracy,
        100.0 * metrics.macro_f1,
        100.0 * metrics.micro_f1,
        metrics.n
    );
    let body = json!({ "user": user, "version": a.version, "dataset": ds.name, "metrics": metrics });
    emit("eval", &cfg, body, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

pub fn predict(cfg: RunConfig, a: PredictArgs) -> Result<ExitCode> {
    let user = UserId::new(a.user.as_str())?;
    let reg = Registry::open(cfg.root()?)?;
    let classes = match &a.data {
        Some(p) => load_dataset(p)?.classes,
        None => a.classes.clone(),
    };
    let prediction = reg.serve_predict(&user, &a.text, &classes)?;
    emit("predict", &cfg, json!({ "user": user, "text": a.text, "prediction": prediction }), None)?;
    Ok(ExitCode::SUCCESS)
}

fn pe_input(v: &[f64]) -> Result<PEInput> {
    if v.len() != 3 {
        bail!("efficiency inputs take three values F,training_cost,size_bytes, got {}", v.len());
    }
    Ok(PEInput {
        f_score: v[0],
        unit: if v[0] > 1.0 { ScoreUnit::Percent } else { ScoreUnit::Fraction },
        training_cost: v[1],
        model_size: v[2],
    })
}

#[derive(Serialize)]
struct CostInputs {
    base_params: u64,
    d_model: usize,
    hidden_dims: Vec<usize>,
    head_params: u64,
    users: u64,
    registry: Option<serde_json::Value>,
}

pub fn cost_report(cfg: RunConfig, a: CostArgs) -> Result<ExitCode> {
    let mut inputs = CostInputs {
        base_params: a.base_params,
        d_model: a.d_model,
        hidden_dims: a.hidden_dims.clone(),
        head_params: 0,
        users: a.users.unwrap_or(1_000_000),
        registry: None,
    };
    let mut registry_head_params = None;
    if a.from_registry {
        let reg = Registry::open(cfg.root()?)?;
        let stats = reg.stats()?;
        inputs.base_params = reg.base().param_count() as u64;
        inputs.d_model = reg.base().config.d_model;
        inputs.users = a.users.unwrap_or(stats.n_users as u64);
        registry_head_params = reg
            .index()
            .users
            .values()
            .filter_map(|vs| vs.last()?.config)
            .map(|c| count_ph_params(c.d_model, c.d_ff, true) as u64)
            .max();
        inputs.registry = Some(serde_json::to_value(&stats)?);
    }
    let Some(&first_dim) = inputs.hidden_dims.first() else {
        bail!("--hidden-dims must list at least one size");
    };
    inputs.head_params = a
        .head_params
        .or(registry_head_params)
        .unwrap_or(count_ph_params(inputs.d_model, first_dim, true) as u64);

    let model = CostModel {
        base_params: inputs.base_params,
        head_params: inputs.head_params,
        linear_params: count_linear_params(inputs.d_model, 2) as u64,
        n_users: inputs.users,
    };
    let configs: Vec<(usize, usize)> = inputs.hidden_dims.iter().map(|&d| (inputs.d_model, d)).collect();
    let mut report = CostReport::new(model, &configs);
    match (&a.pe_candidate, &a.pe_reference) {
        (Some(c), Some(r)) => report = report.with_pe(pe_input(c)?, pe_input(r)?)?,
        (None, None) => {}
        _ => bail!("--pe-candidate and --pe-reference go together"),
    }
    match (a.daily_bytes, a.days) {
        (Some(b), Some(d)) => report = report.with_storage(b, d)?,
        (None, None) => {}
        _ => bail!("--daily-bytes and --days go together"),
    }

    if a.json {
        emit("cost-report", &cfg, json!({ "inputs": inputs, "report": report }), a.out.as_deref())?;
    } else {
        let mut md = format!(
            "# Cost report\n\n<!-- {TOOL_VERSION}; inputs: {} -->\n\n",
            serde_json::to_string(&inputs)?
        );
        md.push_str(&report.to_markdown());
        if let Some(stats) = &inputs.registry {
            md.push_str(&format!(
                "## Registry on disk\n\n- users: {}\n- head files: {}\n- total head bytes: {}\n- base bytes: {}\n",
                stats["n_users"], stats["n_head_files"], stats["total_head_bytes"], stats["base_bytes"]
            ));
        }
        if let Some(p) = &a.out {
            write_file(p, md.as_bytes())?;
        }
        std::io::stdout().write_all(md.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn report_dataset(ds: &Dataset, out: &Path) {
    eprintln!(
        "wrote {}: {} classes, {} train, {} test",
        out.display(),
        ds.classes.len(),
        ds.train.len(),
        ds.test.len()
    );
}

pub fn convert_snips(a: ConvertArgs) -> Result<ExitCode> {
    let ds = snips(&a.input).with_context(|| format!("converting {}", a.input.display()))?;
    ds.write_jsonl(&a.out)?;
    report_dataset(&ds, &a.out);
    Ok(ExitCode::SUCCESS)
}

pub fn convert_clinc(a: ClincArgs) -> Result<ExitCode> {
    let ds = clinc(&a.input, a.include_oos).with_context(|| format!("converting {}", a.input.display()))?;
    ds.write_jsonl(&a.out)?;
    report_dataset(&ds, &a.out);
    Ok(ExitCode::SUCCESS)
}

pub fn gen_toy(a: GenToyArgs) -> Result<ExitCode> {
    let ds = toy_dataset(&ToyConfig {
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        seed: a.seed,
    });
    ds.write_jsonl(&a.out)?;
    report_dataset(&ds, &a.out);
    if let Some(p) = &a.corpus_out {
        let mut text = toy_corpus(a.corpus_size, a.seed).join("\n");
        text.push('\n');
        write_file(p, text.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}
