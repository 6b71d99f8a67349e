use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Mode;
use super::train::{EpochMetrics, TemplateRecord};
use crate::error::{Error, Result};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: EpochMetrics,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let records: Vec<MetricsRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} holds no metrics", path.display())));
    }
    Ok(records)
}

pub fn read_templates(path: &Path) -> Result<Vec<TemplateRecord>> {
    read_jsonl(path)
}

const COLUMNS: [&str; 14] = [
    "run_id",
    "mode",
    "seed",
    "epoch",
    "mean_train_reward",
    "hard_count",
    "val_accuracy",
    "hard_subset_accuracy",
    "pass_at_1",
    "pass_at_k",
    "pass_at_1_with_templates",
    "pass_at_k_with_templates",
    "gepa_budget_used",
    "wall_time",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Every record as one CSV row; absent values are empty cells.
pub fn epoch_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(csv_error)?;
    for r in records {
        let m = &r.metrics;
        w.write_record([
            r.run_id.clone(),
            r.mode.to_string(),
            r.seed.to_string(),
            m.epoch.to_string(),
            m.mean_train_reward.to_string(),
            m.hard_count.to_string(),
            m.val_accuracy.to_string(),
            m.hard_subset_accuracy.to_string(),
            opt(m.pass_at_1),
            opt(m.pass_at_k),
            opt(m.pass_at_1_with_templates),
            opt(m.pass_at_k_with_templates),
            m.gepa_budget_used.to_string(),
            opt(m.wall_time),
        ])
        .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// The record with the highest epoch.
pub fn final_record(run: &[MetricsRecord]) -> Option<&MetricsRecord> {
    run.iter().max_by_key(|r| r.metrics.epoch)
}

/// Median of the values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-epoch median of `field` across runs, over the runs that report it.
pub fn median_by_epoch(runs: &[Vec<EpochMetrics>], field: impl Fn(&EpochMetrics) -> Option<f64>) -> Vec<Option<f64>> {
    let epochs = runs.iter().map(Vec::len).max().unwrap_or(0);
    (0..epochs)
        .map(|t| {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.get(t)).filter_map(&field).collect();
            median(&values)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinalAccuracy {
    pub hard_subset_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossRunRow {
    pub seed: u64,
    pub by_mode: BTreeMap<Mode, FinalAccuracy>,
}

/// Final accuracies joined on seed, one column pair per mode, plus medians.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossRunTable {
    pub modes: Vec<Mode>,
    pub rows: Vec<CrossRunRow>,
    pub medians: BTreeMap<Mode, FinalAccuracy>,
}

impl CrossRunTable {
    /// `runs` holds the records of one metrics file each.
    pub fn build(runs: &[Vec<MetricsRecord>]) -> Result<Self> {
        let mut cells: BTreeMap<u64, BTreeMap<Mode, FinalAccuracy>> = BTreeMap::new();
        let mut modes = BTreeSet::new();
        for run in runs {
            let last = final_record(run).ok_or_else(|| Error::Data("empty run".into()))?;
            modes.insert(last.mode);
            let acc = FinalAccuracy {
                hard_subset_accuracy: last.metrics.hard_subset_accuracy,
                val_accuracy: last.metrics.val_accuracy,
            };
            if cells.entry(last.seed).or_default().insert(last.mode, acc).is_some() {
                return Err(Error::Data(format!(
                    "two {} runs with seed {}",
                    last.mode, last.seed
                )));
            }
        }
        let medians = modes
            .iter()
            .map(|&m| {
                let column = |f: fn(&FinalAccuracy) -> f64| -> Vec<f64> {
                    cells.values().filter_map(|row| row.get(&m)).map(f).collect()
                };
                (
                    m,
                    FinalAccuracy {
                        hard_subset_accuracy: median(&column(|a| a.hard_subset_accuracy)).unwrap_or(f64::NAN),
                        val_accuracy: median(&column(|a| a.val_accuracy)).unwrap_or(f64::NAN),
                    },
                )
            })
            .collect();
        Ok(Self {
            modes: modes.into_iter().collect(),
            rows: cells
                .into_iter()
                .map(|(seed, by_mode)| CrossRunRow { seed, by_mode })
                .collect(),
            medians,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["seed".to_string()];
        for m in &self.modes {
            header.push(format!("{m}_hard_subset_accuracy"));
            header.push(format!("{m}_val_accuracy"));
        }
        w.write_record(&header).map_err(csv_error)?;
        let cells = |label: String, get: &dyn Fn(Mode) -> Option<FinalAccuracy>| {
            let mut row = vec![label];
            for &m in &self.modes {
                let a = get(m);
                row.push(opt(a.map(|a| a.hard_subset_accuracy)));
                row.push(opt(a.map(|a| a.val_accuracy)));
            }
            row
        };
        for r in &self.rows {
            w.write_record(cells(r.seed.to_string(), &|m| r.by_mode.get(&m).copied()))
                .map_err(csv_error)?;
        }
        w.write_record(cells("median".into(), &|m| self.medians.get(&m).copied()))
            .map_err(csv_error)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
