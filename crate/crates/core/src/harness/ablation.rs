//! Controlled sweeps over one switch of the pipeline at a time.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::config::{GlobalFusion, PipelineConfig};
use super::train::{train, Dataset, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Local,
    Fusion,
    Steps,
    Corruption,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Self::Local),
            "fusion" => Ok(Self::Fusion),
            "steps" => Ok(Self::Steps),
            "corruption" => Ok(Self::Corruption),
            _ => Err(Error::Parse(format!("unknown axis {s:?}, expected local|fusion|steps|corruption"))),
        }
    }
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Fusion => "fusion",
            Self::Steps => "steps",
            Self::Corruption => "corruption",
        }
    }

    /// The config key this axis sweeps.
    pub fn key(self) -> &'static str {
        match self {
            Self::Local => "use-local-temporal",
            Self::Fusion => "global-fusion",
            Self::Steps => "denoiser-steps",
            Self::Corruption => "corruption-t",
        }
    }

    /// `(row label, value)` pairs in table order.
    pub fn rows(self) -> Vec<(String, String)> {
        match self {
            Self::Local => vec![("without".into(), "false".into()), ("with".into(), "true".into())],
            Self::Fusion => ["none", "Cat", "TSA", "GIAM"]
                .into_iter()
                .zip(GlobalFusion::ALL)
                .map(|(l, g)| (l.to_string(), g.to_string()))
                .collect(),
            Self::Steps => (1..=9).map(|l| (format!("step{l}"), l.to_string())).collect(),
            Self::Corruption => (1..=5).map(|i| ((i * 200).to_string(), (i * 200).to_string())).collect(),
        }
    }

    /// Extra uncorrupted run reported beside the corruption sweep.
    pub fn reference(self) -> Option<(String, String)> {
        (self == Self::Corruption).then(|| ("0".to_string(), "0".to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub value: String,
    /// Base config with only the swept key changed (seed of the first run).
    pub config: PipelineConfig,
    /// One report per seed.
    pub reports: Vec<RunReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl AblationRow {
    pub fn mean_miou(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.miou))
    }

    pub fn mean_miou_all(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.miou_all))
    }

    /// Mean over runs that had a hidden-probe window.
    pub fn mean_probe_iou(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.probe_iou).filter(|v| !v.is_nan()))
    }

    pub fn mean_final_loss(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.final_loss()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    pub reference: Option<AblationRow>,
}

const CSV_HEADER: &str = "seeds,miou,miou_all,probe_iou,final_loss";

fn csv_row(out: &mut String, r: &AblationRow) {
    writeln!(
        out,
        "{},{},{},{},{},{},{}",
        r.label,
        r.value,
        r.reports.len(),
        r.mean_miou(),
        r.mean_miou_all(),
        r.mean_probe_iou(),
        r.mean_final_loss()
    )
    .expect("string write");
}

impl AblationTable {
    /// One row per swept value with metrics averaged over seeds.
    pub fn to_csv(&self) -> String {
        let mut out = format!("row,{},{CSV_HEADER}\n", self.axis.key());
        self.rows.iter().for_each(|r| csv_row(&mut out, r));
        out
    }

    pub fn reference_csv(&self) -> Option<String> {
        self.reference.as_ref().map(|r| {
            let mut out = format!("row,{},{CSV_HEADER}\n", self.axis.key());
            csv_row(&mut out, r);
            out
        })
    }
}

/// Progress callback: row label, seed and the finished report.
pub type RowHook<'a> = &'a mut dyn FnMut(&str, u64, &RunReport);

/// Trains and evaluates every row of `axis` for each seed. Rows sharing a
/// seed share the generated scenes.
pub fn run_ablation(base: &PipelineConfig, axis: Axis, seeds: &[u64], mut hook: Option<RowHook<'_>>) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let specs: Vec<(String, String)> = axis.rows().into_iter().chain(axis.reference()).collect();
    let mut rows: Vec<AblationRow> = specs
        .iter()
        .map(|(label, value)| {
            let mut config = PipelineConfig { seed: seeds[0], ..base.clone() };
            config.set(axis.key(), value)?;
            config.validate()?;
            Ok(AblationRow {
                label: label.clone(),
                value: value.clone(),
                config,
                reports: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    for &seed in seeds {
        let data = Dataset::generate(&PipelineConfig { seed, ..base.clone() })?;
        for row in rows.iter_mut() {
            let cfg = PipelineConfig { seed, ..row.config.clone() };
            let report = train(&cfg, &data, None)?.report;
            if let Some(h) = hook.as_mut() {
                h(&row.label, seed, &report);
            }
            row.reports.push(report);
        }
    }
    let reference = axis.reference().map(|_| rows.pop().expect("reference row"));
    Ok(AblationTable { axis, rows, reference })
}
