//! Parameter counting, aggregate training/storage cost for N users, the
//! personalization-efficiency metric and the per-user storage overhead model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_PARAM: u64 = 4;

/// Trainable parameters of one head: attention projections, the two FFN
/// layers, two layer norms and (optionally) the 2-way output layer.
/// Independent of the number of attention heads.
pub fn count_ph_params(d_model: usize, d_ff: usize, include_output: bool) -> usize {
    let d = d_model;
    let attention = 4 * (d * d + d);
    let ffn = (d * d_ff + d_ff) + (d_ff * d + d);
    let norms = 4 * d;
    let output = if include_output { count_linear_params(d, 2) } else { 0 };
    attention + ffn + norms + output
}

pub fn count_linear_params(d_model: usize, n_out: usize) -> usize {
    d_model * n_out + n_out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every user fine-tunes a private copy of the base plus a linear layer.
    FullFinetune,
    /// One shared frozen base; every user trains and stores only a head.
    PhOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub base_params: u64,
    pub head_params: u64,
    /// Output layer trained alongside the base in full fine-tuning.
    pub linear_params: u64,
    pub n_users: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateCost {
    pub train_params_total: u64,
    pub stored_params_total: u64,
    pub stored_bytes_total: u64,
}

impl CostModel {
    pub fn aggregate(&self, mode: Mode) -> AggregateCost {
        let n = self.n_users;
        let (train, stored) = match mode {
            Mode::FullFinetune => {
                let per_user = self.base_params + self.linear_params;
                (n * per_user, n * per_user)
            }
            Mode::PhOnly => (n * self.head_params, self.base_params + n * self.head_params),
        };
        AggregateCost {
            train_params_total: train,
            stored_params_total: stored,
            stored_bytes_total: stored * BYTES_PER_PARAM,
        }
    }

    /// A head must be much smaller than the base it replaces fine-tuning of.
    pub fn head_smaller_than_base(&self) -> bool {
        self.head_params < self.base_params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreUnit {
    Percent,
    Fraction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PEInput {
    pub f_score: f64,
    pub unit: ScoreUnit,
    /// Trainable parameter count, the training-cost proxy.
    pub training_cost: f64,
    /// Bytes.
    pub model_size: f64,
}

impl PEInput {
    fn f_fraction(&self) -> f64 {
        match self.unit {
            ScoreUnit::Percent => self.f_score / 100.0,
            ScoreUnit::Fraction => self.f_score,
        }
    }
}

/// `F^2 / (training_cost * model_size)`, with F as a fraction.
pub fn personalization_efficiency(input: &PEInput) -> Result<f64> {
    if !(input.training_cost > 0.0) || !(input.model_size > 0.0) {
        return Err(Error::Domain(format!(
            "training cost ({}) and model size ({}) must be positive",
            input.training_cost, input.model_size
        )));
    }
    let f = input.f_fraction();
    Ok(f * f / (input.training_cost * input.model_size))
}

/// Efficiency of `x` relative to `reference`.
pub fn normalized_pe(x: &PEInput, reference: &PEInput) -> Result<f64> {
    let r = personalization_efficiency(reference)?;
    if r == 0.0 {
        return Err(Error::Domain("reference efficiency is zero".into()));
    }
    Ok(personalization_efficiency(x)? / r)
}

/// Model bytes as a fraction of the data a user accumulates over their lifetime.
pub fn storage_overhead(model_bytes: f64, daily_user_data_bytes: f64, lifetime_days: f64) -> Result<f64> {
    let denom = daily_user_data_bytes * lifetime_days;
    if !(denom > 0.0) || model_bytes < 0.0 {
        return Err(Error::Domain(format!(
            "storage overhead needs positive inputs, got {model_bytes}, {daily_user_data_bytes}, {lifetime_days}"
        )));
    }
    Ok(model_bytes / denom)
}

/// "5.52M", "1.5K" style rendering.
pub fn human_params(n: u64) -> String {
    let n = n as f64;
    if n >= 1e9 {
        format!("{:.2}B", n / 1e9)
    } else if n >= 1e6 {
        format!("{:.2}M", n / 1e6)
    } else if n >= 1e3 {
        format!("{:.1}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

/// Binary-prefixed sizes with two significant digits below 10 ("9.8MB", "21MB").
pub fn human_bytes(b: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KB", "MB", "GB", "TB"];
    let mut v = b as f64;
    let mut u = 0;
    while v >= 1024.0 && u < UNITS.len() - 1 {
        v /= 1024.0;
        u += 1;
    }
    if v < 10.0 && u > 0 {
        format!("{v:.1}{}", UNITS[u])
    } else {
        format!("{v:.0}{}", UNITS[u])
    }
}

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSizeRow {
    pub d_model: usize,
    pub d_ff: usize,
    pub params: u64,
    pub bytes: u64,
    pub params_human: String,
    pub size_human: String,
    pub head_smaller_than_base: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PESection {
    pub candidate: PEInput,
    pub reference: PEInput,
    pub candidate_pe: f64,
    pub reference_pe: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageSection {
    pub daily_user_data_bytes: f64,
    pub lifetime_days: f64,
    pub head_overhead: f64,
    pub full_model_overhead: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: CostModel,
    pub full_finetune: AggregateCost,
    pub ph_only: AggregateCost,
    /// full-finetune stored params / head-only stored params
    pub storage_ratio: f64,
    pub head_table: Vec<HeadSizeRow>,
    pub pe: Option<PESection>,
    pub storage: Option<StorageSection>,
}

impl CostReport {
    pub fn new(model: CostModel, head_configs: &[(usize, usize)]) -> Self {
        let full = model.aggregate(Mode::FullFinetune);
        let ph = model.aggregate(Mode::PhOnly);
        let storage_ratio = if ph.stored_params_total == 0 {
            f64::NAN
        } else {
            full.stored_params_total as f64 / ph.stored_params_total as f64
        };
        let head_table = head_configs
            .iter()
            .map(|&(d_model, d_ff)| {
                let params = count_ph_params(d_model, d_ff, true) as u64;
                let bytes = params * BYTES_PER_PARAM;
                HeadSizeRow {
                    d_model,
                    d_ff,
                    params,
                    bytes,
                    params_human: human_params(params),
                    size_human: human_bytes(bytes),
                    head_smaller_than_base: params < model.base_params,
                }
            })
            .collect();
        CostReport {
            model,
            full_finetune: full,
            ph_only: ph,
            storage_ratio,
            head_table,
            pe: None,
            storage: None,
        }
    }

    pub fn with_pe(mut self, candidate: PEInput, reference: PEInput) -> Result<Self> {
        self.pe = Some(PESection {
            candidate,
            reference,
            candidate_pe: personalization_efficiency(&candidate)?,
            reference_pe: personalization_efficiency(&reference)?,
            normalized: normalized_pe(&candidate, &reference)?,
        });
        Ok(self)
    }

    pub fn with_storage(mut self, daily_user_data_bytes: f64, lifetime_days: f64) -> Result<Self> {
        let head_bytes = (self.model.head_params * BYTES_PER_PARAM) as f64;
        let full_bytes = ((self.model.base_params + self.model.linear_params) * BYTES_PER_PARAM) as f64;
        self.storage = Some(StorageSection {
            daily_user_data_bytes,
            lifetime_days,
            head_overhead: storage_overhead(head_bytes, daily_user_data_bytes, lifetime_days)?,
            full_model_overhead: storage_overhead(full_bytes, daily_user_data_bytes, lifetime_days)?,
        });
        Ok(self)
    }

    pub fn to_markdown(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "## Aggregate cost for N = {} users\n", m.n_users);
        let _ = writeln!(s, "| Mode | Trained params | Stored params | Stored bytes |");
        let _ = writeln!(s, "|---|---:|---:|---:|");
        for (name, a) in [("Full fine-tuning", &self.full_finetune), ("Frozen base + heads", &self.ph_only)] {
            let _ = writeln!(
                s,
                "| {name} | {} | {} | {} |",
                a.train_params_total,
                a.stored_params_total,
                human_bytes(a.stored_bytes_total)
            );
        }
        let _ = writeln!(s, "\nStorage ratio (full / heads): {:.3}x\n", self.storage_ratio);
        let _ = writeln!(
            s,
            "Per user: base {} ({}), head {} ({})\n",
            human_params(m.base_params),
            human_bytes(m.base_params * BYTES_PER_PARAM),
            human_params(m.head_params),
            human_bytes(m.head_params * BYTES_PER_PARAM)
        );
        if !self.head_table.is_empty() {
            let _ = writeln!(s, "## Head sizes\n");
            let _ = writeln!(s, "| d_model | Hidden dim | # Params/User | Size/User | Smaller than base |");
            let _ = writeln!(s, "|---:|---:|---:|---:|:---:|");
            for r in &self.head_table {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} ({}) | {} | {} |",
                    r.d_model,
                    r.d_ff,
                    r.params_human,
                    r.params,
                    r.size_human,
                    if r.head_smaller_than_base { "yes" } else { "no" }
                );
            }
            let _ = writeln!(
                s,
                "| {} | linear only | {} | {} | |",
                self.head_table[0].d_model,
                human_params(m.linear_params),
                human_bytes(m.linear_params * BYTES_PER_PARAM)
            );
            s.push('\n');
        }
        if let Some(pe) = &self.pe {
            let _ = writeln!(s, "## Personalization efficiency\n");
            let _ = writeln!(s, "| Model | F | Training cost | Size (bytes) | PE |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|");
            for (name, x, v) in [("candidate", &pe.candidate, pe.candidate_pe), ("reference", &pe.reference, pe.reference_pe)] {
                let _ = writeln!(
                    s,
                    "| {name} | {} | {:.4e} | {:.4e} | {:.4e} |",
                    x.f_score, x.training_cost, x.model_size, v
                );
            }
            let _ = writeln!(s, "\nNormalized PE (candidate / reference): {:.1}\n", pe.normalized);
        }
        if let Some(st) = &self.storage {
            let _ = writeln!(s, "## Storage overhead\n");
            let _ = writeln!(
                s,
                "User data: {} per day over {} days\n",
                human_bytes(st.daily_user_data_bytes as u64),
                st.lifetime_days
            );
            let _ = writeln!(s, "- head: {:.2}%", 100.0 * st.head_overhead);
            let _ = writeln!(s, "- fully fine-tuned model: {:.2}%", 100.0 * st.full_model_overhead);
        }
        s
    }
}
