//! Weight search over the 2-simplex by K-fold sample-average approximation,
//! and kernel smoothing of the resulting trajectory across rejection rates.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::model::Label;
use crate::{Error, Result};

/// Held-out instance with its normalized stage scores and the ensemble's
/// majority-vote prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance_id: String,
    pub components: [f64; 3],
    pub prediction: Option<Label>,
    pub label: Label,
}

impl ScoredInstance {
    pub fn correct(&self) -> bool {
        self.prediction.as_ref() == Some(&self.label)
    }
}

/// All triples of multiples of `step` on the simplex. Vertices come first,
/// then edge points, then interior points; within each group the order is
/// lexicographically descending.
pub fn simplex_grid(step: f64) -> Result<Vec<[f64; 3]>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("grid step {step} outside (0, 1]")));
    }
    let inv = 1.0 / step;
    let n = inv.round();
    if (inv - n).abs() > 1e-9 {
        return Err(Error::invalid(format!("1/step must be an integer, got {inv}")));
    }
    let n = n as usize;
    let mut pts: Vec<[usize; 3]> = Vec::new();
    for a in (0..=n).rev() {
        for b in (0..=n - a).rev() {
            pts.push([a, b, n - a - b]);
        }
    }
    pts.sort_by_key(|p| p.iter().filter(|&&c| c > 0).count());
    Ok(pts
        .into_iter()
        .map(|p| p.map(|c| c as f64 / n as f64))
        .collect())
}

/// `⌈P·n⌉`, tolerant of representation error in `P·n`.
pub fn rejection_count(p: f64, n: usize) -> usize {
    ((p * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices ordered from most to least uncertain; equal scores are ordered
/// by instance id, so the smaller id is rejected first.
pub fn rejection_order(scores: &[f64], ids: &[&str]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(ids[b]))
    });
    idx
}

/// Split of a fold into retained and rejected instances at rejection rate
/// `p`, ranking by the given scores.
pub fn retained_mask(p: f64, scores: &[f64], ids: &[&str]) -> Vec<bool> {
    let order = rejection_order(scores, ids);
    let mut keep = vec![true; scores.len()];
    for &i in order.iter().take(rejection_count(p, scores.len())) {
        keep[i] = false;
    }
    keep
}

/// Majority-vote accuracy on the instances left after rejecting the
/// `⌈P·n⌉` with the highest combined score.
pub fn retained_accuracy(p: f64, alpha: &[f64; 3], fold: &[ScoredInstance]) -> Result<f64> {
    let scores: Vec<f64> = fold.iter().map(|s| dot(&s.components, alpha)).collect();
    accuracy_by_scores(p, &scores, fold)
}

pub fn accuracy_by_scores(p: f64, scores: &[f64], fold: &[ScoredInstance]) -> Result<f64> {
    let ids: Vec<&str> = fold.iter().map(|s| s.instance_id.as_str()).collect();
    let keep = retained_mask(p, scores, &ids);
    let (mut kept, mut right) = (0usize, 0usize);
    for (s, k) in fold.iter().zip(&keep) {
        if *k {
            kept += 1;
            right += usize::from(s.correct());
        }
    }
    if kept == 0 {
        return Err(Error::invalid(format!(
            "rejection rate {p} leaves no retained instance out of {}",
            fold.len()
        )));
    }
    Ok(right as f64 / kept as f64)
}

/// Mean held-out accuracy over folds.
pub fn mean_cv_accuracy(p: f64, alpha: &[f64; 3], folds: &[Vec<ScoredInstance>]) -> Result<f64> {
    if folds.is_empty() {
        return Err(Error::invalid("no folds given"));
    }
    let mut sum = 0.0;
    for f in folds {
        sum += retained_accuracy(p, alpha, f)?;
    }
    Ok(sum / folds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightChoice {
    pub alpha: [f64; 3],
    pub mean_accuracy: f64,
    /// Mean CV accuracy of every grid point, in grid order.
    pub grid_accuracy: Vec<f64>,
}

/// Grid point with the highest mean held-out accuracy at rejection rate
/// `p`; the earliest grid point wins ties.
pub fn optimize_weights(
    p: f64,
    folds: &[Vec<ScoredInstance>],
    grid: &[[f64; 3]],
) -> Result<WeightChoice> {
    if grid.is_empty() {
        return Err(Error::invalid("empty weight grid"));
    }
    let grid_accuracy: Vec<f64> = grid
        .par_iter()
        .map(|a| mean_cv_accuracy(p, a, folds))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &acc) in grid_accuracy.iter().enumerate().skip(1) {
        if acc > grid_accuracy[best] + 1e-12 {
            best = i;
        }
    }
    Ok(WeightChoice {
        alpha: grid[best],
        mean_accuracy: grid_accuracy[best],
        grid_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTrajectory {
    #[serde(rename = "P_levels")]
    pub p_levels: Vec<f64>,
    pub alpha_raw: Vec<[f64; 3]>,
    pub alpha_smooth: Vec<[f64; 3]>,
    pub bandwidth: f64,
}

impl WeightTrajectory {
    /// Raw trajectory; the smoothed side starts as a copy.
    pub fn from_raw(p_levels: Vec<f64>, alpha_raw: Vec<[f64; 3]>) -> Result<Self> {
        if p_levels.len() != alpha_raw.len() {
            return Err(Error::invalid("one weight vector per level required"));
        }
        if p_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("rejection levels must be strictly increasing"));
        }
        Ok(WeightTrajectory {
            alpha_smooth: alpha_raw.clone(),
            p_levels,
            alpha_raw,
            bandwidth: 0.0,
        })
    }

    /// Mean gap between adjacent levels.
    pub fn default_bandwidth(&self) -> Option<f64> {
        let n = self.p_levels.len();
        (n >= 2).then(|| (self.p_levels[n - 1] - self.p_levels[0]) / (n - 1) as f64)
    }

    /// CSV: `P,alpha1_raw,alpha2_raw,alpha3_raw,alpha1_smooth,alpha2_smooth,alpha3_smooth`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "P",
            "alpha1_raw",
            "alpha2_raw",
            "alpha3_raw",
            "alpha1_smooth",
            "alpha2_smooth",
            "alpha3_smooth",
        ])?;
        for ((p, r), s) in self.p_levels.iter().zip(&self.alpha_raw).zip(&self.alpha_smooth) {
            let mut rec = vec![p.to_string()];
            rec.extend(r.iter().chain(s).map(|v| v.to_string()));
            out.write_record(rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

impl WeightTrajectory {
    /// Reads the CSV written by [`WeightTrajectory::write_csv`]. The file does
    /// not carry the bandwidth; it is reset to the default for the levels.
    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let (mut p_levels, mut alpha_raw, mut alpha_smooth) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.deserialize::<(f64, f64, f64, f64, f64, f64, f64)>() {
            let (p, r1, r2, r3, s1, s2, s3) = rec?;
            p_levels.push(p);
            alpha_raw.push([r1, r2, r3]);
            alpha_smooth.push([s1, s2, s3]);
        }
        let mut t = WeightTrajectory::from_raw(p_levels, alpha_raw)?;
        t.alpha_smooth = alpha_smooth;
        t.bandwidth = t.default_bandwidth().unwrap_or(0.0);
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct ScoredRow {
    fold: usize,
    instance_id: String,
    s_data: f64,
    s_task: f64,
    s_ref: f64,
    prediction: String,
    label: String,
}

/// Cross-fitted scores: `fold,instance_id,s_data,s_task,s_ref,prediction,label`,
/// folds numbered from 1. An empty prediction means no vote.
pub fn write_scored_csv(folds: &[Vec<ScoredInstance>], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (k, fold) in folds.iter().enumerate() {
        for s in fold {
            out.serialize(ScoredRow {
                fold: k + 1,
                instance_id: s.instance_id.clone(),
                s_data: s.components[0],
                s_task: s.components[1],
                s_ref: s.components[2],
                prediction: s.prediction.as_ref().map_or_else(String::new, |l| l.to_string()),
                label: s.label.to_string(),
            })?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// Inverse of [`write_scored_csv`]; folds come back in ascending order.
pub fn read_scored_csv(r: impl std::io::Read) -> Result<Vec<Vec<ScoredInstance>>> {
    let mut by_fold: std::collections::BTreeMap<usize, Vec<ScoredInstance>> = Default::default();
    for row in csv::Reader::from_reader(r).deserialize::<ScoredRow>() {
        let row = row?;
        by_fold.entry(row.fold).or_default().push(ScoredInstance {
            instance_id: row.instance_id,
            components: [row.s_data, row.s_task, row.s_ref],
            prediction: (!row.prediction.is_empty()).then(|| Label::new(row.prediction)),
            label: Label::new(row.label),
        });
    }
    if by_fold.is_empty() {
        return Err(Error::invalid("no scored instances"));
    }
    Ok(by_fold.into_values().collect())
}

/// Clamps negatives to zero and rescales onto the simplex.
pub fn project_to_simplex(a: [f64; 3]) -> [f64; 3] {
    let c = a.map(|v| v.max(0.0));
    let sum: f64 = c.iter().sum();
    if sum <= 0.0 {
        return [1.0 / 3.0; 3];
    }
    c.map(|v| v / sum)
}

/// Nadaraya–Watson smoothing of each coordinate over `P` with a Gaussian
/// kernel; `None` uses the default bandwidth.
pub fn smooth_trajectory(traj: &WeightTrajectory, bandwidth: Option<f64>) -> Result<WeightTrajectory> {
    if traj.p_levels.len() < 2 {
        return Err(Error::invalid("smoothing needs at least two levels"));
    }
    let h = bandwidth.or_else(|| traj.default_bandwidth()).unwrap();
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
    }
    let smooth = traj
        .p_levels
        .iter()
        .map(|&p0| {
            let mut acc = [0.0; 3];
            let mut total = 0.0;
            for (&p, a) in traj.p_levels.iter().zip(&traj.alpha_raw) {
                let w = (-0.5 * ((p - p0) / h).powi(2)).exp();
                total += w;
                for c in 0..3 {
                    acc[c] += w * a[c];
                }
            }
            project_to_simplex(acc.map(|v| v / total))
        })
        .collect();
    Ok(WeightTrajectory {
        p_levels: traj.p_levels.clone(),
        alpha_raw: traj.alpha_raw.clone(),
        alpha_smooth: smooth,
        bandwidth: h,
    })
}

/// Raw optimum at every level followed by smoothing.
pub fn weight_trajectory(
    p_levels: &[f64],
    folds: &[Vec<ScoredInstance>],
    grid: &[[f64; 3]],
    bandwidth: Option<f64>,
) -> Result<WeightTrajectory> {
    let raw = p_levels
        .iter()
        .map(|&p| optimize_weights(p, folds, grid).map(|c| c.alpha))
        .collect::<Result<Vec<_>>>()?;
    let traj = WeightTrajectory::from_raw(p_levels.to_vec(), raw)?;
    if p_levels.len() < 2 {
        return Ok(traj);
    }
    smooth_trajectory(&traj, bandwidth)
}
