//! Voxel- and subject-level metrics and run aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::label_components;
use crate::volume::{count_overlap, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelMetrics {
    pub sens: f64,
    pub prec: f64,
    pub dice: f64,
}

/// Sensitivity, precision and Dice. Both masks empty gives 1 for all
/// three; any other zero denominator gives 0 for that metric.
pub fn voxel_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<VoxelMetrics> {
    let o = count_overlap(pred, gt)?;
    if o.tp + o.fp + o.fn_ == 0 {
        return Ok(VoxelMetrics { sens: 1.0, prec: 1.0, dice: 1.0 });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(VoxelMetrics {
        sens: ratio(o.tp, o.tp + o.fn_),
        prec: ratio(o.tp, o.tp + o.fp),
        dice: ratio(2 * o.tp, 2 * o.tp + o.fp + o.fn_),
    })
}

/// True iff at least one voxel is predicted and labelled lesion. Two empty
/// masks give `false`.
pub fn subject_detected(pred: &BinaryMask, gt: &BinaryMask) -> Result<bool> {
    Ok(count_overlap(pred, gt)?.tp > 0)
}

/// Number of 26-connected predicted clusters sharing no voxel with `gt`.
pub fn count_fp_clusters(pred: &BinaryMask, gt: &BinaryMask) -> Result<usize> {
    if pred.shape() != gt.shape() {
        return Err(Error::mismatch(format!("pred {} vs gt {}", pred.shape(), gt.shape())));
    }
    let lm = label_components(pred);
    let mut hit = vec![false; lm.num_clusters() + 1];
    for (&l, &g) in lm.labels().iter().zip(gt.data()) {
        if g != 0 {
            hit[l as usize] = true;
        }
    }
    Ok(hit.iter().skip(1).filter(|&&h| !h).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub sens: f64,
    pub prec: f64,
    pub dice: f64,
    pub detected: bool,
    pub n_fp_clusters: usize,
}

pub fn evaluate_subject(pred: &BinaryMask, gt: &BinaryMask) -> Result<SubjectMetrics> {
    let v = voxel_metrics(pred, gt)?;
    Ok(SubjectMetrics {
        sens: v.sens,
        prec: v.prec,
        dice: v.dice,
        detected: subject_detected(pred, gt)?,
        n_fp_clusters: count_fp_clusters(pred, gt)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        if xs.is_empty() {
            return MeanStd::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Subject means of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sens: f64,
    pub prec: f64,
    pub dice: f64,
    pub s_sens: f64,
    pub nfpc: f64,
    pub subjects: usize,
}

pub fn summarize_run(subjects: &[SubjectMetrics]) -> Result<RunSummary> {
    if subjects.is_empty() {
        return Err(Error::invalid("cannot summarize a run without subjects"));
    }
    let n = subjects.len() as f64;
    let mean = |f: &dyn Fn(&SubjectMetrics) -> f64| subjects.iter().map(f).sum::<f64>() / n;
    Ok(RunSummary {
        sens: mean(&|s| s.sens),
        prec: mean(&|s| s.prec),
        dice: mean(&|s| s.dice),
        s_sens: mean(&|s| f64::from(u8::from(s.detected))),
        nfpc: mean(&|s| s.n_fp_clusters as f64),
        subjects: subjects.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub label: String,
    pub postprocessed: bool,
    pub runs: usize,
    pub subjects: usize,
    pub sens: MeanStd,
    pub prec: MeanStd,
    pub dice: MeanStd,
    pub s_sens: MeanStd,
    pub nfpc: MeanStd,
}

/// Per-run subject means, then mean and population std across runs.
pub fn aggregate(runs: &[Vec<SubjectMetrics>], label: &str, postprocessed: bool) -> Result<AggregateReport> {
    if runs.is_empty() {
        return Err(Error::invalid("cannot aggregate zero runs"));
    }
    let summaries = runs.iter().map(|r| summarize_run(r)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate_summaries(&summaries, label, postprocessed))
}

pub fn aggregate_summaries(runs: &[RunSummary], label: &str, postprocessed: bool) -> AggregateReport {
    let col = |f: fn(&RunSummary) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    AggregateReport {
        label: label.to_string(),
        postprocessed,
        runs: runs.len(),
        subjects: runs.iter().map(|r| r.subjects).sum(),
        sens: col(|r| r.sens),
        prec: col(|r| r.prec),
        dice: col(|r| r.dice),
        s_sens: col(|r| r.s_sens),
        nfpc: col(|r| r.nfpc),
    }
}

const COLUMNS: [&str; 6] = ["Loss", "Sens", "Prec", "DC", "sSens", "nFPC"];

fn cells(r: &AggregateReport) -> [MeanStd; 5] {
    [r.sens, r.prec, r.dice, r.s_sens, r.nfpc]
}

pub fn reports_to_csv(reports: &[AggregateReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["loss".to_string(), "postprocessed".into(), "runs".into(), "subjects".into()];
    for c in &COLUMNS[1..] {
        header.push(format!("{}_mean", c.to_lowercase()));
        header.push(format!("{}_std", c.to_lowercase()));
    }
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![
            r.label.clone(),
            r.postprocessed.to_string(),
            r.runs.to_string(),
            r.subjects.to_string(),
        ];
        for m in cells(r) {
            row.push(format!("{}", m.mean));
            row.push(format!("{}", m.std));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aligned text table with columns Loss | Sens | Prec | DC | sSens | nFPC.
pub fn render_table(reports: &[AggregateReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![if r.postprocessed {
                format!("{} (post)", r.label)
            } else {
                r.label.clone()
            }];
            for (i, m) in cells(r).iter().enumerate() {
                let digits = if i == 4 { 2 } else { 4 };
                row.push(format!("{:.*} ± {:.*}", digits, m.mean, digits, m.std));
            }
            row
        })
        .collect();
    let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        parts.join(" | ").trim_end().to_string()
    };
    let mut out = String::new();
    writeln!(out, "{}", line(&mut COLUMNS.iter().copied())).unwrap();
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    writeln!(out, "{}", rule.join("-|-")).unwrap();
    for row in &rows {
        writeln!(out, "{}", line(&mut row.iter().map(String::as_str))).unwrap();
    }
    out
}
