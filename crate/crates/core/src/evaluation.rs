//! Field-interior confusion counts, precision/recall/F1/IoU, report tables
//! pivoted by year, tile or run, and per-pixel confusion rasters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::raster::{LabelMask, BOUNDARY, IGNORE, INTERIOR};

/// How reference boundary pixels enter field metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Boundary counts as not-field.
    #[default]
    Negative,
    /// Boundary pixels are skipped like ignore pixels.
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub ignore_count: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn + self.ignore_count
    }

    pub fn merge(&self, o: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            ignore_count: self.ignore_count + o.ignore_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Category {
    Tp,
    Fp,
    Fn,
    Tn,
    Ignore,
}

impl Category {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Category::Tp => [0, 255, 0],
            Category::Fp => [255, 0, 0],
            Category::Fn => [0, 0, 255],
            Category::Tn => [211, 211, 211],
            Category::Ignore => [255, 255, 255],
        }
    }
}

fn check_dims(pred: &LabelMask, reference: &LabelMask) -> Result<()> {
    if (pred.width, pred.height) != (reference.width, reference.height) {
        return dim_err(format!(
            "prediction {}x{} vs reference {}x{}",
            pred.width, pred.height, reference.width, reference.height
        ));
    }
    Ok(())
}

fn categorize(p: u8, r: u8, mode: BoundaryMode) -> Category {
    if r == IGNORE || (mode == BoundaryMode::Ignore && r == BOUNDARY) {
        return Category::Ignore;
    }
    match (p == INTERIOR, r == INTERIOR) {
        (true, true) => Category::Tp,
        (true, false) => Category::Fp,
        (false, true) => Category::Fn,
        (false, false) => Category::Tn,
    }
}

/// Per-pixel confusion category of a prediction against its reference.
pub fn spatial_confusion(pred: &LabelMask, reference: &LabelMask, mode: BoundaryMode) -> Result<Vec<Category>> {
    check_dims(pred, reference)?;
    Ok(pred.data.iter().zip(&reference.data).map(|(&p, &r)| categorize(p, r, mode)).collect())
}

pub fn confusion_counts(pred: &LabelMask, reference: &LabelMask, mode: BoundaryMode) -> Result<ConfusionCounts> {
    Ok(counts_of(&spatial_confusion(pred, reference, mode)?))
}

pub fn counts_of(cats: &[Category]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for &k in cats {
        match k {
            Category::Tp => c.tp += 1,
            Category::Fp => c.fp += 1,
            Category::Fn => c.fn_ += 1,
            Category::Tn => c.tn += 1,
            Category::Ignore => c.ignore_count += 1,
        }
    }
    c
}

/// RGB rendering of a confusion raster.
pub fn confusion_rgb(cats: &[Category]) -> Vec<u8> {
    cats.iter().flat_map(|c| c.rgb()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Some ratio was 0/0 and a convention filled it in.
    pub degenerate: bool,
}

/// Ratio with the empty-case convention: `num/den`, or 1 when nothing was
/// claimed and nothing was missed, else 0.
fn ratio(num: u64, den: u64, other_error: u64) -> (f64, bool) {
    if den > 0 {
        (num as f64 / den as f64, false)
    } else if other_error == 0 {
        (1.0, true)
    } else {
        (0.0, true)
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let (precision, dp) = ratio(c.tp, c.tp + c.fp, c.fn_);
    let (recall, dr) = ratio(c.tp, c.tp + c.fn_, c.fp);
    let (iou, di) = ratio(c.tp, c.tp + c.fp + c.fn_, 0);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        precision,
        recall,
        f1,
        iou,
        degenerate: dp || dr || di,
    }
}

/// One evaluated (run, year, tile) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub norm_scheme: String,
    pub year: String,
    pub tile_id: String,
    pub counts: ConfusionCounts,
}

impl MetricsRow {
    pub fn metrics(&self) -> Metrics {
        metrics(&self.counts)
    }
}

pub const METRICS_CSV_HEADER: [&str; 13] = [
    "run_id",
    "norm_scheme",
    "year",
    "tile_id",
    "tp",
    "fp",
    "fn",
    "tn",
    "precision",
    "recall",
    "f1",
    "iou",
    "degenerate_flag",
];

fn csv_string(records: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.write_record(&r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn fmt(v: f64) -> String {
    format!("{:.6}", v)
}

/// Flat per-cell metrics table.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut rec = vec![METRICS_CSV_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for r in rows {
        let m = r.metrics();
        rec.push(vec![
            r.run_id.clone(),
            r.norm_scheme.clone(),
            r.year.clone(),
            r.tile_id.clone(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.counts.tn.to_string(),
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
            fmt(m.iou),
            (m.degenerate as u8).to_string(),
        ]);
    }
    csv_string(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    Year,
    Tile,
    Run,
}

pub const MICRO_COLUMN: &str = "all";
pub const MACRO_COLUMN: &str = "macro";

/// A pivoted table: labelled rows, named columns, and the best value in
/// each column flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub group_by: GroupBy,
    pub columns: Vec<String>,
    /// `(run_id, metric name, values)`.
    pub rows: Vec<(String, String, Vec<f64>)>,
    pub best: Vec<Vec<bool>>,
}

impl ReportTable {
    pub fn value(&self, run: &str, metric: &str, column: &str) -> Option<f64> {
        let ci = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|r| r.0 == run && r.1 == metric).map(|r| r.2[ci])
    }

    /// Best values carry a trailing `*`.
    pub fn to_csv(&self) -> Result<String> {
        let mut head = vec!["run_id".to_string(), "metric".to_string()];
        head.extend(self.columns.iter().cloned());
        let mut rec = vec![head];
        for ((run, metric, vals), best) in self.rows.iter().zip(&self.best) {
            let mut r = vec![run.clone(), metric.clone()];
            r.extend(vals.iter().zip(best).map(|(&v, &b)| if b { format!("{}*", fmt(v)) } else { fmt(v) }));
            rec.push(r);
        }
        csv_string(rec)
    }
}

fn metric_value(m: &Metrics, name: &str) -> f64 {
    match name {
        "precision" => m.precision,
        "recall" => m.recall,
        "f1" => m.f1,
        _ => m.iou,
    }
}

/// Pivots rows into a report. By year or tile: one row per run and metric
/// (IoU, F1), one column per group, plus the pooled-count aggregate and the
/// mean of per-group metrics. By run: one row per run and metric with a
/// single pooled column, laid out as precision/recall/F1/IoU.
pub fn report(rows: &[MetricsRow], group_by: GroupBy) -> Result<ReportTable> {
    if rows.is_empty() {
        return Err(Error::Input("cannot build a report from no rows".into()));
    }
    let mut runs: Vec<String> = Vec::new();
    for r in rows {
        if !runs.contains(&r.run_id) {
            runs.push(r.run_id.clone());
        }
    }
    let key = |r: &MetricsRow| match group_by {
        GroupBy::Year => r.year.clone(),
        GroupBy::Tile => r.tile_id.clone(),
        GroupBy::Run => MICRO_COLUMN.to_string(),
    };
    let mut groups: Vec<String> = Vec::new();
    for r in rows {
        let k = key(r);
        if !groups.contains(&k) {
            groups.push(k);
        }
    }
    let metric_names: &[&str] = match group_by {
        GroupBy::Run => &["precision", "recall", "f1", "iou"],
        _ => &["iou", "f1"],
    };
    let mut columns = groups.clone();
    if group_by != GroupBy::Run {
        columns.push(MICRO_COLUMN.into());
        columns.push(MACRO_COLUMN.into());
    }
    let mut out_rows = Vec::new();
    for run in &runs {
        let mut pooled: BTreeMap<&str, ConfusionCounts> = BTreeMap::new();
        let mut all = ConfusionCounts::default();
        for r in rows.iter().filter(|r| &r.run_id == run) {
            let k = groups.iter().find(|g| **g == key(r)).unwrap();
            let e = pooled.entry(k.as_str()).or_default();
            *e = e.merge(&r.counts);
            all = all.merge(&r.counts);
        }
        for &name in metric_names {
            let mut vals: Vec<f64> = groups
                .iter()
                .map(|g| pooled.get(g.as_str()).map(|c| metric_value(&metrics(c), name)).unwrap_or(f64::NAN))
                .collect();
            if group_by != GroupBy::Run {
                let present: Vec<f64> = vals.iter().copied().filter(|v| !v.is_nan()).collect();
                vals.push(metric_value(&metrics(&all), name));
                vals.push(present.iter().sum::<f64>() / present.len() as f64);
            }
            out_rows.push((run.clone(), name.to_string(), vals));
        }
    }
    let best = out_rows
        .iter()
        .map(|(_, metric, vals)| {
            vals.iter()
                .enumerate()
                .map(|(ci, &v)| {
                    let top = out_rows
                        .iter()
                        .filter(|r| &r.1 == metric)
                        .map(|r| r.2[ci])
                        .filter(|x| !x.is_nan())
                        .fold(f64::NEG_INFINITY, f64::max);
                    !v.is_nan() && v == top
                })
                .collect()
        })
        .collect();
    Ok(ReportTable {
        group_by,
        columns,
        rows: out_rows,
        best,
    })
}
