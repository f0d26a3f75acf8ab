//! Benchmark-level aggregation, attribute breakdowns and report files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::annotation::{SequenceAnnotation, TrackResult};
use crate::eval::attributes::{Attribute, LengthClass};
use crate::eval::metrics::{
    evaluate_sequence, norm_thresholds, precision_thresholds, success_thresholds, MetricReport, Summary,
};

/// Attribute breakdown row: a flag, or one of the three length classes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeRow {
    pub name: String,
    pub sequences: usize,
    /// `None` when no evaluated sequence carries the attribute.
    pub summary: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceRow {
    pub id: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub sequences: Vec<SequenceRow>,
    pub aggregate: Option<Summary>,
    /// Mean curves over the evaluated sequences.
    pub mean_success: Vec<f64>,
    pub mean_complete_success: Vec<f64>,
    pub mean_precision: Vec<f64>,
    pub mean_norm_precision: Vec<f64>,
    pub attributes: Vec<AttributeRow>,
    /// Results without a matching annotation.
    pub unmatched_results: Vec<String>,
    /// Annotations without a result.
    pub missing_results: Vec<String>,
    /// Sequences that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
    pub definitions: Definitions,
}

/// Metric conventions, recorded in the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Definitions {
    pub success: &'static str,
    pub pre: &'static str,
    pub npre: &'static str,
    pub cauc: &'static str,
    pub macc: &'static str,
    pub absent: &'static str,
    pub aggregate: &'static str,
}

impl Default for Definitions {
    fn default() -> Self {
        Self {
            success: "fraction of frames with IoU > t (IoU = 1 always counts), t = 0..1 step 0.01; AUC = curve mean",
            pre: "fraction of frames with centre error <= 20 px",
            npre: "curve mean over t = 0..0.5 step 0.01 of centre error normalized per axis by gt width/height <= t",
            cauc: "success AUC with max(cIoU, 0) as the overlap",
            macc: "mean IoU",
            absent: "absent frames are excluded",
            aggregate: "unweighted mean over sequences",
        }
    }
}

fn mean_curves(items: &[&[f64]]) -> Vec<f64> {
    let Some(first) = items.first() else { return Vec::new() };
    let n = items.len() as f64;
    (0..first.len()).map(|i| items.iter().map(|c| c[i]).sum::<f64>() / n).collect()
}

fn breakdown(rows: &[(usize, Summary)], annotations: &[SequenceAnnotation]) -> Vec<AttributeRow> {
    let mut out = Vec::new();
    let mut push = |name: String, pick: &dyn Fn(&SequenceAnnotation) -> bool| {
        let members: Vec<Summary> = rows.iter().filter(|(a, _)| pick(&annotations[*a])).map(|(_, s)| *s).collect();
        out.push(AttributeRow {
            name,
            sequences: members.len(),
            summary: Summary::mean(&members),
        });
    };
    for attr in Attribute::ALL {
        push(attr.code().to_string(), &|a| a.attributes.get(attr));
    }
    for class in LengthClass::ALL {
        push(format!("LEN-{}", class.name()), &|a| a.attributes.len == class);
    }
    out
}

/// Scores every result against the annotation with the same id.
pub fn evaluate_benchmark(annotations: &[SequenceAnnotation], results: &[TrackResult]) -> BenchmarkReport {
    let index: HashMap<&str, usize> = annotations.iter().enumerate().map(|(i, a)| (a.id.as_str(), i)).collect();
    let by_result: HashMap<&str, &TrackResult> = results.iter().map(|r| (r.sequence_id.as_str(), r)).collect();
    let unmatched_results: Vec<String> = results
        .iter()
        .filter(|r| !index.contains_key(r.sequence_id.as_str()))
        .map(|r| r.sequence_id.clone())
        .collect();
    for id in &unmatched_results {
        warn!("result `{id}` has no matching sequence");
    }
    let missing_results: Vec<String> = annotations
        .iter()
        .filter(|a| !by_result.contains_key(a.id.as_str()))
        .map(|a| a.id.clone())
        .collect();
    for id in &missing_results {
        warn!("sequence `{id}` has no result");
    }

    let scored: Vec<(usize, Result<MetricReport>)> = annotations
        .par_iter()
        .enumerate()
        .filter_map(|(i, a)| by_result.get(a.id.as_str()).map(|r| (i, evaluate_sequence(a, r))))
        .collect();
    let mut sequences = Vec::new();
    let mut skipped = Vec::new();
    let mut summaries = Vec::new();
    for (i, r) in scored {
        match r {
            Ok(report) => {
                summaries.push((i, report.summary));
                sequences.push(SequenceRow {
                    id: annotations[i].id.clone(),
                    report,
                });
            }
            Err(e) => {
                warn!("skipping `{}`: {e}", annotations[i].id);
                skipped.push((annotations[i].id.clone(), e.to_string()));
            }
        }
    }
    let curves = |f: fn(&MetricReport) -> &[f64]| mean_curves(&sequences.iter().map(|s| f(&s.report)).collect::<Vec<_>>());
    let only: Vec<Summary> = summaries.iter().map(|(_, s)| *s).collect();
    BenchmarkReport {
        aggregate: Summary::mean(&only),
        mean_success: curves(|r| &r.success),
        mean_complete_success: curves(|r| &r.complete_success),
        mean_precision: curves(|r| &r.precision),
        mean_norm_precision: curves(|r| &r.norm_precision),
        attributes: breakdown(&summaries, annotations),
        sequences,
        unmatched_results,
        missing_results,
        skipped,
        definitions: Definitions::default(),
    }
}

fn summary_cells(s: &Option<Summary>) -> String {
    match s {
        Some(s) => format!("{},{},{},{},{}", s.pre, s.npre, s.auc, s.cauc, s.macc),
        None => "NA,NA,NA,NA,NA".into(),
    }
}

impl BenchmarkReport {
    /// Per-sequence rows followed by an `aggregate` row.
    pub fn report_csv(&self) -> String {
        let mut s = String::from("id,pre,npre,auc,cauc,macc\n");
        for row in &self.sequences {
            let _ = writeln!(s, "{},{}", row.id, summary_cells(&Some(row.report.summary)));
        }
        let _ = writeln!(s, "aggregate,{}", summary_cells(&self.aggregate));
        s
    }

    /// Attribute x metric matrix; attributes without members read `NA`.
    pub fn attributes_csv(&self) -> String {
        let mut s = String::from("attribute,sequences,pre,npre,auc,cauc,macc\n");
        for row in &self.attributes {
            let _ = writeln!(s, "{},{},{}", row.name, row.sequences, summary_cells(&row.summary));
        }
        s
    }

    /// Long-format mean curves: `curve,threshold,value`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("curve,threshold,value\n");
        let st = success_thresholds();
        for (name, t, v) in [
            ("success", &st, &self.mean_success),
            ("complete_success", &st, &self.mean_complete_success),
            ("precision", &precision_thresholds(), &self.mean_precision),
            ("norm_precision", &norm_thresholds(), &self.mean_norm_precision),
        ] {
            for (t, v) in t.iter().zip(v.iter()) {
                let _ = writeln!(s, "{name},{t},{v}");
            }
        }
        s
    }

    /// Writes `report.csv`, `attributes.csv`, `curves.csv` and
    /// `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        for (name, body) in [
            ("report.csv", self.report_csv()),
            ("attributes.csv", self.attributes_csv()),
            ("curves.csv", self.curves_csv()),
            ("report.json", json),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}
