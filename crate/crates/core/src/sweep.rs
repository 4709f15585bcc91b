//! Ablation sweeps: one train + zero-shot eval per axis value.
//!
//! Every point shares the base seed, so points differ only in the swept
//! setting. Rows come back in input order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate, split};
use crate::error::{Error, Result};
use crate::eval::{default_templates, evaluate};
use crate::hgnn::Variant;
use crate::loss::LossKind;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    K,
    R,
    Components,
    Variant,
    EncoderToggle,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::K, Axis::R, Axis::Components, Axis::Variant, Axis::EncoderToggle];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::R => "r",
            Axis::Components => "components",
            Axis::Variant => "variant",
            Axis::EncoderToggle => "encoder_toggle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sweep axis `{s}` (expected k, r, components, variant or encoder_toggle)")))
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::K => &["1", "5", "N"],
            Axis::R => &["1", "2", "4", "8"],
            Axis::Components => &["base", "+lora", "+hgnn", "+label", "all"],
            Axis::Variant => &["ours", "gat", "gatv2", "gnn"],
            Axis::EncoderToggle => &["none", "image", "text", "both"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

fn parse_count(axis: Axis, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{value}` is not a valid {} value", axis.as_str())))
}

/// The run config for one sweep value.
pub fn configure(base: &RunConfig, axis: Axis, value: &str) -> Result<RunConfig> {
    let mut run = base.clone();
    let m = &mut run.model;
    match axis {
        Axis::K => {
            m.k = if value == "N" {
                base.data.side * base.data.side
            } else {
                parse_count(axis, value)?
            };
        }
        Axis::R => m.rank = parse_count(axis, value)?,
        Axis::Variant => m.variant = Variant::parse(value)?,
        Axis::EncoderToggle => {
            let (image, text) = match value {
                "none" => (false, false),
                "image" => (true, false),
                "text" => (false, true),
                "both" => (true, true),
                _ => return Err(Error::InvalidConfig(format!("unknown encoder toggle `{value}`"))),
            };
            m.hgnn_image = image;
            m.hgnn_text = text;
        }
        Axis::Components => {
            let (lora, hgnn, loss) = match value {
                "base" => (false, false, LossKind::Clip),
                "+lora" => (true, false, LossKind::Clip),
                "+hgnn" => (true, true, LossKind::Clip),
                "+label" => (true, false, LossKind::LabelGuided),
                "all" => (true, true, LossKind::LabelGuided),
                _ => return Err(Error::InvalidConfig(format!("unknown component row `{value}`"))),
            };
            m.lora = lora;
            m.hgnn_image = hgnn;
            m.hgnn_text = hgnn;
            run.train.loss = loss;
            if value == "base" {
                // The untouched backbone: nothing to train.
                run.train.epochs = 0;
            }
        }
    }
    run.validate()?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\tACC\tAUC\n", self.axis.as_str());
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}", r.value, r.accuracy, r.auc);
        }
        out
    }

    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

/// Trains on the train split and evaluates on the test split.
pub fn run_point(run: &RunConfig) -> Result<(f64, f64)> {
    let data = generate(&run.synth())?;
    let (train_set, _, test_set) = split(&data, run.fractions(), run.seed)?;
    let outcome = train(run, &train_set)?;
    let report = evaluate(&outcome.state.model, &test_set, &default_templates())?;
    Ok((report.accuracy, report.auc))
}

/// One row per value, each the mean over `seeds` (the base seed when empty).
pub fn sweep(base: &RunConfig, axis: Axis, values: &[String], seeds: &[u64]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut acc = 0.0;
        let mut auc = 0.0;
        for &seed in &seeds {
            let mut seeded = base.clone();
            seeded.seed = seed;
            let run = configure(&seeded, axis, value)?;
            let (a, u) = run_point(&run)?;
            log::info!("sweep {}={value} seed {seed}: acc {a:.4} auc {u:.4}", axis.as_str());
            acc += a;
            auc += u;
        }
        rows.push(SweepRow {
            value: value.clone(),
            accuracy: acc / seeds.len() as f64,
            auc: auc / seeds.len() as f64,
        });
    }
    Ok(SweepTable {
        axis,
        seeds,
        rows,
    })
}
