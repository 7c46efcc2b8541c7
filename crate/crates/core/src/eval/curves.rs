//! Metric-versus-rejection-rate tables for each score variant and a seeded
//! random-drop baseline.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eval::metrics::class_scores;
use crate::linalg::dot;
use crate::model::{Label, LabelSet};
use crate::seed::{derive_seed, rng_for};
use crate::selective::Level;
use crate::weights::{retained_mask, ScoredInstance};
use crate::{Error, Result};

pub const DEFAULT_RANDOM_REPETITIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(rename = "P")]
    pub p: f64,
    pub variant: String,
    pub retained_accuracy: f64,
    pub recall: f64,
    pub rejected_misclassification_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub points: Vec<CurvePoint>,
    /// Number of random draws averaged into the `random` variant.
    pub random_repetitions: usize,
}

impl CurveTable {
    pub fn get(&self, variant: &str, p: f64) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|pt| pt.variant == variant && (pt.p - p).abs() < 1e-12)
    }

    /// CSV: `P,variant,retained_accuracy,recall,rejected_misclassification_ratio`.
    /// The ratio is empty where nothing was rejected.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "P",
            "variant",
            "retained_accuracy",
            "recall",
            "rejected_misclassification_ratio",
        ])?;
        for pt in &self.points {
            out.write_record([
                pt.p.to_string(),
                pt.variant.clone(),
                pt.retained_accuracy.to_string(),
                pt.recall.to_string(),
                pt.rejected_misclassification_ratio
                    .map(|r| r.to_string())
                    .unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Retained accuracy, retained recall and rejected-misclassification ratio
/// when the `⌈P·n⌉` highest scores are rejected.
pub fn selection_metrics(
    p: f64,
    scores: &[f64],
    pool: &[ScoredInstance],
    labels: &LabelSet,
) -> Result<(f64, f64, Option<f64>)> {
    let ids: Vec<&str> = pool.iter().map(|s| s.instance_id.as_str()).collect();
    let keep = retained_mask(p, scores, &ids);
    let mut kept_pairs: Vec<(&Label, &Label)> = Vec::new();
    let (mut kept, mut right, mut rejected, mut rejected_wrong) = (0usize, 0usize, 0usize, 0usize);
    for (s, &k) in pool.iter().zip(&keep) {
        if k {
            kept += 1;
            right += usize::from(s.correct());
            if let Some(pred) = &s.prediction {
                kept_pairs.push((pred, &s.label));
            }
        } else {
            rejected += 1;
            rejected_wrong += usize::from(!s.correct());
        }
    }
    if kept == 0 {
        return Err(Error::invalid(format!("rejection rate {p} leaves nothing retained")));
    }
    let (recall, _) = class_scores(&kept_pairs, labels);
    let ratio = (rejected > 0).then(|| rejected_wrong as f64 / rejected as f64);
    Ok((right as f64 / kept as f64, recall, ratio))
}

/// Curves for `S_data`, `S_task`, `S_ref`, the combined `S` (weights per
/// level) and the random-drop baseline averaged over `repetitions` draws.
pub fn sweep_curves(
    pool: &[ScoredInstance],
    levels: &[Level],
    labels: &LabelSet,
    repetitions: usize,
    seed: u64,
) -> Result<CurveTable> {
    if pool.is_empty() {
        return Err(Error::invalid("nothing to sweep"));
    }
    if repetitions == 0 {
        return Err(Error::invalid("random baseline needs at least one repetition"));
    }
    let single = |k: usize| pool.iter().map(|s| s.components[k]).collect::<Vec<_>>();
    let stage_scores = [("S_data", single(0)), ("S_task", single(1)), ("S_ref", single(2))];

    let random_draws: Vec<Vec<f64>> = (0..repetitions)
        .map(|r| {
            let mut rng = rng_for(derive_seed(seed, "random-drop"), &r.to_string());
            pool.iter().map(|_| rng.random::<f64>()).collect()
        })
        .collect();

    let mut points = Vec::new();
    for level in levels {
        let mut push = |variant: &str, (acc, recall, ratio): (f64, f64, Option<f64>)| {
            points.push(CurvePoint {
                p: level.p,
                variant: variant.to_string(),
                retained_accuracy: acc,
                recall,
                rejected_misclassification_ratio: ratio,
            });
        };
        for (name, scores) in &stage_scores {
            push(name, selection_metrics(level.p, scores, pool, labels)?);
        }
        let combined: Vec<f64> = pool.iter().map(|s| dot(&s.components, &level.alpha)).collect();
        push("S", selection_metrics(level.p, &combined, pool, labels)?);

        let (mut acc, mut rec, mut ratio, mut ratio_n) = (0.0, 0.0, 0.0, 0usize);
        for draw in &random_draws {
            let (a, r, q) = selection_metrics(level.p, draw, pool, labels)?;
            acc += a;
            rec += r;
            if let Some(q) = q {
                ratio += q;
                ratio_n += 1;
            }
        }
        let n = repetitions as f64;
        push(
            "random",
            (acc / n, rec / n, (ratio_n > 0).then(|| ratio / ratio_n as f64)),
        );
    }
    Ok(CurveTable {
        points,
        random_repetitions: repetitions,
    })
}
