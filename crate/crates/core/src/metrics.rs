//! Rank-based classification metrics. Ties between equal logits go to the
//! lower class index.

use std::fmt::Write as _;

use crate::error::{ensure, Result};
use crate::ndgrad::{Array, Scalar};

fn check<F: Scalar>(logits: &Array<F>, labels: &[usize]) -> Result<(usize, usize)> {
    ensure!(logits.ndim() == 2, "logits must be [B, C], got {:?}", logits.shape());
    let (b, c) = (logits.dim(0), logits.dim(1));
    ensure!(b > 0, "no examples to score");
    ensure!(labels.len() == b, "{} labels for {b} rows of logits", labels.len());
    ensure!(logits.is_finite(), "logits contain NaN or infinity");
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(crate::Error::invalid(format!("label {l} out of range for {c} classes")));
    }
    Ok((b, c))
}

/// 1-based rank of `label` within `row`.
pub fn rank<F: Scalar>(row: &[F], label: usize) -> usize {
    let v = row[label];
    1 + row.iter().enumerate().filter(|&(j, &x)| x > v || (x == v && j < label)).count()
}

fn ranks<F: Scalar>(logits: &Array<F>, labels: &[usize]) -> Vec<usize> {
    let c = logits.dim(1);
    logits.data().chunks_exact(c).zip(labels).map(|(row, &l)| rank(row, l)).collect()
}

/// Fraction of rows whose label is among the `k` largest logits.
pub fn top_k_accuracy<F: Scalar>(logits: &Array<F>, labels: &[usize], k: usize) -> Result<f64> {
    let (b, c) = check(logits, labels)?;
    ensure!(k >= 1 && k <= c, "k = {k} must lie in 1..={c}");
    Ok(ranks(logits, labels).iter().filter(|&&r| r <= k).count() as f64 / b as f64)
}

/// Single-label MAP@3: mean of `1/rank` for ranks up to 3, else 0.
pub fn map_at_3<F: Scalar>(logits: &Array<F>, labels: &[usize]) -> Result<f64> {
    let (b, c) = check(logits, labels)?;
    ensure!(c >= 3, "MAP@3 needs at least 3 classes, got {c}");
    let sum: f64 = ranks(logits, labels).iter().map(|&r| if r <= 3 { 1.0 / r as f64 } else { 0.0 }).sum();
    Ok(sum / b as f64)
}

pub fn mean_absolute_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(pred.len() == target.len(), "{} predictions for {} targets", pred.len(), target.len());
    ensure!(!pred.is_empty(), "no values to score");
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Scores for one task. MAP@3 needs three classes and top-5 five.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub task: String,
    pub map_at_3: Option<f64>,
    pub top1: f64,
    pub top5: Option<f64>,
    pub num_examples: usize,
}

impl EvalResult {
    pub fn compute<F: Scalar>(task: impl Into<String>, logits: &Array<F>, labels: &[usize]) -> Result<Self> {
        let (b, c) = check(logits, labels)?;
        Ok(Self {
            task: task.into(),
            map_at_3: if c >= 3 { Some(map_at_3(logits, labels)?) } else { None },
            top1: top_k_accuracy(logits, labels, 1)?,
            top5: if c >= 5 { Some(top_k_accuracy(logits, labels, 5)?) } else { None },
            num_examples: b,
        })
    }

    pub const CSV_HEADER: &'static str = "task,map_at_3,top1,top5,num_examples";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!("{},{},{:.6},{},{}", self.task, opt(self.map_at_3), self.top1, opt(self.top5), self.num_examples)
    }
}

pub fn render_csv(results: &[EvalResult]) -> String {
    let mut s = String::from(EvalResult::CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn render_table(results: &[EvalResult]) -> String {
    let width = results.iter().map(|r| r.task.len()).max().unwrap_or(0).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>8}", "task", "MAP@3", "top-1", "top-5", "examples");
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "-".into());
    for r in results {
        let map = r.map_at_3.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>8}",
            r.task,
            map,
            pct(Some(r.top1)),
            pct(r.top5),
            r.num_examples
        );
    }
    s
}
