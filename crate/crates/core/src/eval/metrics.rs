use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Label, LabelSet};
use crate::selective::{Route, RouteDecision};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall_accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub subset_accuracies: BTreeMap<String, f64>,
    pub retained_count: usize,
    pub deferred_count: usize,
    #[serde(rename = "P", default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub alpha: Option<[f64; 3]>,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "retained          {}", self.retained_count)?;
        writeln!(f, "deferred          {}", self.deferred_count)?;
        if let Some(p) = self.p {
            writeln!(f, "rejection rate    {p}")?;
        }
        if let Some(a) = self.alpha {
            writeln!(f, "weights           ({}, {}, {})", a[0], a[1], a[2])?;
        }
        writeln!(f, "accuracy          {:.4}", self.overall_accuracy)?;
        writeln!(f, "recall            {:.4}", self.recall)?;
        write!(f, "f1                {:.4}", self.f1)?;
        for (tag, acc) in &self.subset_accuracies {
            write!(f, "\naccuracy[{tag}]{}{acc:.4}", " ".repeat(8usize.saturating_sub(tag.len()).max(1)))?;
        }
        Ok(())
    }
}

/// Recall and F1 of one class from confusion counts; 0 when undefined.
pub fn recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (recall, f1)
}

/// Recall/F1 of `pairs` (prediction, truth): against the positive class of a
/// binary task, macro-averaged over every label seen otherwise.
pub fn class_scores(pairs: &[(&Label, &Label)], labels: &LabelSet) -> (f64, f64) {
    let per_class = |c: &Label| {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for &(pred, truth) in pairs {
            match (pred == c, truth == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        recall_f1(tp, fp, fn_)
    };
    if let (true, Some(pos)) = (labels.is_binary(), labels.positive.as_ref()) {
        return per_class(pos);
    }
    let seen: BTreeSet<&Label> = pairs.iter().flat_map(|&(p, t)| [p, t]).collect();
    if seen.is_empty() {
        return (0.0, 0.0);
    }
    let (r, f) = seen
        .iter()
        .map(|c| per_class(c))
        .fold((0.0, 0.0), |acc, (r, f)| (acc.0 + r, acc.1 + f));
    (r / seen.len() as f64, f / seen.len() as f64)
}

/// Metrics on the automatically handled instances only.
pub fn metrics(
    decisions: &[RouteDecision],
    truth: &BTreeMap<String, Label>,
    subset_tags: &BTreeMap<String, String>,
    labels: &LabelSet,
) -> Result<MetricReport> {
    let mut pairs = Vec::new();
    let mut subsets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut deferred = 0;
    for d in decisions {
        let Some(y) = truth.get(&d.instance_id) else {
            return Err(Error::invalid(format!("no label for instance `{}`", d.instance_id)));
        };
        match (d.route, &d.prediction) {
            (Route::Auto, Some(pred)) => {
                pairs.push((pred, y));
                if let Some(tag) = subset_tags.get(&d.instance_id) {
                    let e = subsets.entry(tag.clone()).or_default();
                    e.0 += usize::from(pred == y);
                    e.1 += 1;
                }
            }
            (Route::Auto, None) => {
                return Err(Error::invalid(format!(
                    "instance `{}` routed automatically without a prediction",
                    d.instance_id
                )))
            }
            (Route::Defer, _) => deferred += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "no retained instances: all {deferred} were deferred, so retained metrics are undefined"
        )));
    }
    let correct = pairs.iter().filter(|(p, t)| p == t).count();
    let (recall, f1) = class_scores(&pairs, labels);
    Ok(MetricReport {
        overall_accuracy: correct as f64 / pairs.len() as f64,
        recall,
        f1,
        subset_accuracies: subsets
            .into_iter()
            .map(|(k, (c, n))| (k, c as f64 / n as f64))
            .collect(),
        retained_count: pairs.len(),
        deferred_count: deferred,
        p: None,
        alpha: None,
    })
}

/// Fraction of deferred instances whose ensemble prediction would have been
/// wrong. A missing prediction counts as wrong.
pub fn rejected_misclassification_ratio(
    decisions: &[RouteDecision],
    ensemble_predictions: &BTreeMap<String, Option<Label>>,
    truth: &BTreeMap<String, Label>,
) -> Result<f64> {
    let mut deferred = 0usize;
    let mut wrong = 0usize;
    for d in decisions.iter().filter(|d| d.route == Route::Defer) {
        deferred += 1;
        let y = truth
            .get(&d.instance_id)
            .ok_or_else(|| Error::invalid(format!("no label for instance `{}`", d.instance_id)))?;
        let pred = ensemble_predictions.get(&d.instance_id).cloned().flatten();
        wrong += usize::from(pred.as_ref() != Some(y));
    }
    if deferred == 0 {
        return Err(Error::invalid("no deferred instances"));
    }
    Ok(wrong as f64 / deferred as f64)
}

/// One row of a results table: accuracy, recall and F1, then the accuracy
/// on the requested subset, all in percent.
pub fn render_table_row(name: &str, report: &MetricReport, subset: &str) -> String {
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    let sub = report
        .subset_accuracies
        .get(subset)
        .map_or_else(|| "-".to_string(), |v| pct(*v));
    format!(
        "| {name} | {} | {} | {} | {sub} |",
        pct(report.overall_accuracy),
        pct(report.recall),
        pct(report.f1)
    )
}
