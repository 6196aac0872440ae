//! CSV and markdown renderings of result tables. CSV numbers use the
//! round-trip format; markdown rounds to four places.

use std::fmt::Write;

use mia_core::eval::{EvalResult, EvalTuple};
use mia_core::logits::Slice;
use serde::{Deserialize, Serialize};

use crate::output::num;

pub const NA: &str = "N/A";

/// Baseline results on one slice, in baseline order.
pub struct SliceResults {
    pub slice: Slice,
    pub results: Vec<EvalResult>,
}

fn cells(r: &EvalResult, fmt: fn(f64) -> String) -> [String; 3] {
    if r.failed() {
        [NA.into(), NA.into(), NA.into()]
    } else {
        [fmt(r.r.auc), fmt(r.r.acc), fmt(r.r.tpr_at_5fpr)]
    }
}

fn four(x: f64) -> String {
    format!("{x:.4}")
}

pub fn baselines_csv(groups: &[SliceResults]) -> String {
    let mut out = String::from("metric");
    for g in groups {
        let s = g.slice;
        let _ = write!(out, ",{s}_auc,{s}_accuracy,{s}_tpr_at_5_fpr");
    }
    out.push('\n');
    let Some(first) = groups.first() else {
        return out;
    };
    for (i, r) in first.results.iter().enumerate() {
        out.push_str(&r.name);
        for g in groups {
            for c in cells(&g.results[i], num) {
                out.push(',');
                out.push_str(&c);
            }
        }
        out.push('\n');
    }
    out
}

pub fn baselines_markdown(groups: &[SliceResults]) -> String {
    let mut out = String::from("| Metric |");
    let mut rule = String::from("|---|");
    for g in groups {
        let s = g.slice;
        let _ = write!(out, " {s} AUC | {s} Acc | {s} TPR@5%FPR |");
        rule.push_str("---:|---:|---:|");
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    let Some(first) = groups.first() else {
        return out;
    };
    for (i, r) in first.results.iter().enumerate() {
        let _ = write!(out, "| {} |", r.name);
        for g in groups {
            for c in cells(&g.results[i], four) {
                let _ = write!(out, " {c} |");
            }
        }
        out.push('\n');
    }
    out
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in points {
        let _ = writeln!(out, "{},{}", num(*f), num(*t));
    }
    out
}

/// One strategy evaluated on both sides of a split. `None` marks a failed
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub name: String,
    pub code: String,
    pub validation: Option<EvalTuple>,
    pub validation_q: Option<f64>,
    pub holdout: Option<EvalTuple>,
    pub holdout_q: Option<f64>,
}

pub const HOLDOUT_GROUPS: [&str; 2] = ["validation", "holdout"];

fn tuple_cells(t: Option<&EvalTuple>, q: Option<f64>, fmt: fn(f64) -> String) -> [String; 4] {
    match (t, q) {
        (Some(t), Some(q)) => [fmt(t.auc), fmt(t.acc), fmt(t.tpr_at_5fpr), fmt(q)],
        _ => [NA.into(), NA.into(), NA.into(), NA.into()],
    }
}

pub fn holdout_csv(rows: &[HoldoutRow]) -> String {
    let mut out = String::from("strategy");
    for g in HOLDOUT_GROUPS {
        let _ = write!(out, ",{g}_auc,{g}_accuracy,{g}_tpr_at_5_fpr,{g}_q");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.name);
        let v = tuple_cells(r.validation.as_ref(), r.validation_q, num);
        let h = tuple_cells(r.holdout.as_ref(), r.holdout_q, num);
        for c in v.iter().chain(&h) {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
    }
    out
}

pub fn holdout_markdown(rows: &[HoldoutRow], n_val: usize, n_hold: usize) -> String {
    let mut out = format!(
        "Validation: {n_val} samples. Holdout: {n_hold} samples.\n\n\
         | Strategy | Validation AUC | Validation Acc | Validation TPR@5%FPR | Validation Q \
         | Holdout AUC | Holdout Acc | Holdout TPR@5%FPR | Holdout Q |\n\
         |---|---:|---:|---:|---:|---:|---:|---:|---:|\n"
    );
    for r in rows {
        let _ = write!(out, "| {} |", r.name);
        let v = tuple_cells(r.validation.as_ref(), r.validation_q, four);
        let h = tuple_cells(r.holdout.as_ref(), r.holdout_q, four);
        for c in v.iter().chain(&h) {
            let _ = write!(out, " {c} |");
        }
        out.push('\n');
    }
    out
}
