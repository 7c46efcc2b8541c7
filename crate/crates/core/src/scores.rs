//! The three stage scores, their normalization and combination, and the
//! logistic flip classifier behind the reflection score.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::pmf::project;
use crate::similarity::SimRow;
use crate::{Error, Result};

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Description score: residual of the similarity row against the frozen
/// description basis. `None` when no pair is observed.
pub fn s_data(row: &SimRow, v_star_x: &DMatrix<f64>, lambda: f64) -> Result<Option<f64>> {
    if row.observed_count() == 0 {
        return Ok(None);
    }
    Ok(Some(project(&row.values, &row.observed, v_star_x, lambda)?.residual))
}

/// A hypothesis-conditioned reasoning row with the share of models that
/// hold the hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedRow {
    pub row: SimRow,
    pub models: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskScore {
    pub value: Option<f64>,
    /// No hypothesis was held by two or more models; the value is 0.
    pub degenerate: bool,
}

/// Task score `max(0, E_h[R_h] − R)`, all residuals taken on the same
/// reasoning basis. Groups without an observed pair carry no information and
/// are dropped; the rest are weighted by their model counts.
pub fn s_task(
    plain: &SimRow,
    conditioned: &[ConditionedRow],
    v_star_z: &DMatrix<f64>,
    lambda: f64,
) -> Result<TaskScore> {
    if plain.observed_count() == 0 {
        return Ok(TaskScore {
            value: None,
            degenerate: false,
        });
    }
    let groups: Vec<&ConditionedRow> = conditioned
        .iter()
        .filter(|g| g.models >= 2 && g.row.observed_count() > 0)
        .collect();
    if groups.is_empty() {
        return Ok(TaskScore {
            value: Some(0.0),
            degenerate: true,
        });
    }
    let r = project(&plain.values, &plain.observed, v_star_z, lambda)?.residual;
    let total: usize = groups.iter().map(|g| g.models).sum();
    let mut expected = 0.0;
    for g in &groups {
        let r_h = project(&g.row.values, &g.row.observed, v_star_z, lambda)?.residual;
        expected += g.models as f64 / total as f64 * r_h;
    }
    Ok(TaskScore {
        value: Some((expected - r).max(0.0)),
        degenerate: false,
    })
}

/// Reflection score: mean predicted flip probability over eligible models.
pub fn s_ref(probabilities: &[f64]) -> Option<f64> {
    if probabilities.is_empty() {
        return None;
    }
    Some(probabilities.iter().sum::<f64>() / probabilities.len() as f64)
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionClassifier {
    /// Feature weights followed by the intercept.
    pub theta: Vec<f64>,
    pub l2_penalty: f64,
    pub max_iter: usize,
    pub iterations: usize,
    pub converged: bool,
}

pub const DEFAULT_L2: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 1000;
const GRAD_TOLERANCE: f64 = 1e-6;
const LBFGS_MEMORY: usize = 10;

impl ReflectionClassifier {
    pub fn dim(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        let d = self.dim();
        dot(&self.theta[..d], features) + self.theta[d]
    }

    pub fn predict_proba(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }

    /// Minimizes `mean CE + (l2/2)‖θ‖²` (intercept included in the penalty)
    /// with L-BFGS from θ = 0.
    pub fn fit(features: &[Vec<f64>], labels: &[bool], l2: f64, max_iter: usize) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid("classifier needs one label per feature row"));
        }
        if l2 <= 0.0 || !l2.is_finite() {
            return Err(Error::invalid(format!("L2 penalty must be positive, got {l2}")));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid("feature rows of unequal length"));
        }

        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 || positives == labels.len() {
            log::warn!(
                "reflection training set holds a single class ({} examples); using a constant classifier",
                labels.len()
            );
            let empty = vec![Vec::new(); labels.len()];
            let mut clf = Self::fit_dense(&empty, labels, l2, max_iter);
            let intercept = clf.theta[0];
            clf.theta = vec![0.0; dim + 1];
            clf.theta[dim] = intercept;
            return Ok(clf);
        }
        Ok(Self::fit_dense(features, labels, l2, max_iter))
    }

    fn fit_dense(features: &[Vec<f64>], labels: &[bool], l2: f64, max_iter: usize) -> Self {
        let dim = features[0].len();
        let n = features.len() as f64;
        let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
            grad.iter_mut().zip(theta).for_each(|(g, t)| *g = l2 * t);
            let mut loss = 0.0;
            for (x, &y) in features.iter().zip(labels) {
                let z = dot(&theta[..dim], x) + theta[dim];
                loss += if y { softplus(-z) } else { softplus(z) };
                let r = (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n;
                for (g, xi) in grad[..dim].iter_mut().zip(x) {
                    *g += r * xi;
                }
                grad[dim] += r;
            }
            loss / n + 0.5 * l2 * dot(theta, theta)
        };

        let (theta, iterations, converged) = lbfgs(vec![0.0; dim + 1], max_iter, objective);
        if !converged {
            log::warn!("reflection classifier stopped at {max_iter} iterations without converging");
        }
        ReflectionClassifier {
            theta,
            l2_penalty: l2,
            max_iter,
            iterations,
            converged,
        }
    }
}

/// Plain L-BFGS with backtracking Armijo steps. Returns the final point, the
/// iteration count and whether the gradient tolerance was met.
fn lbfgs(
    mut x: Vec<f64>,
    max_iter: usize,
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
) -> (Vec<f64>, usize, bool) {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));

    for iter in 0..max_iter {
        if inf_norm(&g) < GRAD_TOLERANCE {
            return (x, iter, true);
        }
        // Two-loop recursion for d = −H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            s_hist.clear();
            y_hist.clear();
        }

        let mut step = 1.0;
        let mut g_new = vec![0.0; n];
        let mut x_new = vec![0.0; n];
        let mut f_new = f64::INFINITY;
        for _ in 0..60 {
            x_new.iter_mut().zip(&x).zip(&d).for_each(|((xn, xi), di)| *xn = xi + step * di);
            f_new = f(&x_new, &mut g_new);
            if f_new <= fx + 1e-4 * step * slope {
                break;
            }
            step *= 0.5;
        }
        if !(f_new < fx || (f_new <= fx && inf_norm(&g_new) < inf_norm(&g))) {
            // No progress possible at machine precision.
            return (x, iter, inf_norm(&g) < GRAD_TOLERANCE * 10.0);
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = x_new;
        g = g_new;
        fx = f_new;
    }
    let done = inf_norm(&g) < GRAD_TOLERANCE;
    (x, max_iter, done)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRange {
    pub min: f64,
    pub max: f64,
}

impl NormRange {
    /// Min-max scaling clamped to `[0, 1]`; a degenerate range maps to 0.
    pub fn normalize(&self, raw: f64) -> f64 {
        if self.max <= self.min {
            return 0.0;
        }
        ((raw - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    fn fit(values: impl Iterator<Item = f64>) -> NormRange {
        let mut range: Option<NormRange> = None;
        for v in values.filter(|v| v.is_finite()) {
            range = Some(match range {
                None => NormRange { min: v, max: v },
                Some(r) => NormRange {
                    min: r.min.min(v),
                    max: r.max.max(v),
                },
            });
        }
        range.unwrap_or(NormRange { min: 0.0, max: 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub data: NormRange,
    pub task: NormRange,
    #[serde(rename = "ref")]
    pub refl: NormRange,
}

/// Raw stage scores for one instance; `None` marks an uncomputable score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub data: Option<f64>,
    pub task: Option<f64>,
    #[serde(rename = "ref")]
    pub refl: Option<f64>,
    pub task_degenerate: bool,
}

impl NormStats {
    pub fn fit(train: &[RawScores]) -> NormStats {
        NormStats {
            data: NormRange::fit(train.iter().filter_map(|r| r.data)),
            task: NormRange::fit(train.iter().filter_map(|r| r.task)),
            refl: NormRange::fit(train.iter().filter_map(|r| r.refl)),
        }
    }

    /// Normalized components; uncomputable scores become 1.0.
    pub fn normalize(&self, raw: &RawScores) -> [f64; 3] {
        [
            raw.data.map_or(1.0, |v| self.data.normalize(v)),
            raw.task.map_or(1.0, |v| self.task.normalize(v)),
            raw.refl.map_or(1.0, |v| self.refl.normalize(v)),
        ]
    }
}

pub fn check_simplex(alpha: &[f64; 3]) -> Result<()> {
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!(
            "weights {alpha:?} are not on the simplex (sum {sum})"
        )));
    }
    Ok(())
}

pub fn combine(components: &[f64; 3], alpha: &[f64; 3]) -> Result<f64> {
    check_simplex(alpha)?;
    Ok(dot(components, alpha))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreFlags {
    pub data_uncomputable: bool,
    pub task_uncomputable: bool,
    pub task_degenerate: bool,
    pub ref_uncomputable: bool,
}

impl ScoreFlags {
    pub fn from_raw(raw: &RawScores) -> Self {
        ScoreFlags {
            data_uncomputable: raw.data.is_none(),
            task_uncomputable: raw.task.is_none(),
            task_degenerate: raw.task_degenerate,
            ref_uncomputable: raw.refl.is_none(),
        }
    }

    /// `;`-joined names of the set flags.
    pub fn render(&self) -> String {
        [
            (self.data_uncomputable, "data_uncomputable"),
            (self.task_uncomputable, "task_uncomputable"),
            (self.task_degenerate, "task_degenerate"),
            (self.ref_uncomputable, "ref_uncomputable"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect::<Vec<_>>()
        .join(";")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut flags = ScoreFlags::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            match part {
                "data_uncomputable" => flags.data_uncomputable = true,
                "task_uncomputable" => flags.task_uncomputable = true,
                "task_degenerate" => flags.task_degenerate = true,
                "ref_uncomputable" => flags.ref_uncomputable = true,
                other => return Err(Error::invalid(format!("unknown score flag `{other}`"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UQProfile {
    pub instance_id: String,
    pub raw: RawScores,
    /// Normalized `(s_data, s_task, s_ref)`.
    pub components: [f64; 3],
    #[serde(rename = "S")]
    pub s: f64,
    pub alpha_used: [f64; 3],
    pub flags: ScoreFlags,
}

impl UQProfile {
    pub fn new(instance_id: &str, raw: RawScores, stats: &NormStats, alpha: &[f64; 3]) -> Result<Self> {
        let components = stats.normalize(&raw);
        Ok(UQProfile {
            instance_id: instance_id.to_string(),
            raw,
            components,
            s: combine(&components, alpha)?,
            alpha_used: *alpha,
            flags: ScoreFlags::from_raw(&raw),
        })
    }

    /// Recombines the stored components under different weights.
    pub fn reweighted(&self, alpha: &[f64; 3]) -> Result<Self> {
        Ok(UQProfile {
            s: combine(&self.components, alpha)?,
            alpha_used: *alpha,
            ..self.clone()
        })
    }
}

/// Score dump: `instance_id,s_data,s_task,s_ref,S,flags`.
pub fn write_profiles_csv(profiles: &[UQProfile], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["instance_id", "s_data", "s_task", "s_ref", "S", "flags"])?;
    for p in profiles {
        out.write_record([
            p.instance_id.clone(),
            p.components[0].to_string(),
            p.components[1].to_string(),
            p.components[2].to_string(),
            p.s.to_string(),
            p.flags.render(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// A row of the score dump, enough to route and evaluate without the
/// original traces.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScoreRecord {
    pub instance_id: String,
    pub s_data: f64,
    pub s_task: f64,
    pub s_ref: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub flags: String,
}

impl ScoreRecord {
    pub fn components(&self) -> [f64; 3] {
        [self.s_data, self.s_task, self.s_ref]
    }
}

pub fn read_profiles_csv(r: impl std::io::Read) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        let r = NormRange { min: 0.0, max: 4.0 };
        assert_eq!(r.normalize(3.0), 0.75);
        assert_eq!(r.normalize(4.0), 1.0);
        assert_eq!(r.normalize(9.0), 1.0);
        assert_eq!(r.normalize(-1.0), 0.0);
        assert_eq!(NormRange { min: 2.0, max: 2.0 }.normalize(5.0), 0.0);
        let stats = NormStats::fit(&[
            RawScores { data: Some(0.0), task: Some(1.0), refl: None, task_degenerate: false },
            RawScores { data: Some(2.0), task: Some(1.0), refl: Some(0.5), task_degenerate: false },
            RawScores { data: Some(4.0), task: None, refl: Some(0.1), task_degenerate: false },
        ]);
        assert_eq!(stats.data, NormRange { min: 0.0, max: 4.0 });
        assert_eq!(stats.refl, NormRange { min: 0.1, max: 0.5 });
    }

    #[test]
    fn uncomputable_is_maximal() {
        let stats = NormStats {
            data: NormRange { min: 0.0, max: 1.0 },
            task: NormRange { min: 0.0, max: 1.0 },
            refl: NormRange { min: 0.0, max: 1.0 },
        };
        let raw = RawScores { data: None, task: Some(0.0), refl: Some(0.0), task_degenerate: false };
        let p = UQProfile::new("a", raw, &stats, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.s, 1.0);
        assert_eq!(p.flags.render(), "data_uncomputable");
        assert_eq!(ScoreFlags::parse(&p.flags.render()).unwrap(), p.flags);
    }

    #[test]
    fn combine_examples() {
        let third = 1.0 / 3.0;
        let s = combine(&[0.3, 0.6, 0.9], &[third, third, third]).unwrap();
        assert!((s - 0.6).abs() < 1e-12);
        assert_eq!(combine(&[0.3, 0.6, 0.9], &[1.0, 0.0, 0.0]).unwrap(), 0.3);
        assert!(combine(&[0.3, 0.6, 0.9], &[0.5, 0.5, 0.5]).is_err());
        assert!(combine(&[0.3, 0.6, 0.9], &[1.5, -0.5, 0.0]).is_err());
    }

    #[test]
    fn s_ref_is_mean() {
        assert_eq!(s_ref(&[0.2, 0.4]).map(|v| (v * 10.0).round()), Some(3.0));
        assert_eq!(s_ref(&[0.0; 5]), Some(0.0));
        assert_eq!(s_ref(&[]), None);
    }

    #[test]
    fn unanimous_hypotheses_give_zero_task_score() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 0.5, 0.2]);
        let row = SimRow { values: vec![0.9, 0.1, 0.4], observed: vec![true; 3] };
        let t = s_task(&row, &[ConditionedRow { row: row.clone(), models: 3 }], &v, 0.01).unwrap();
        assert_eq!(t.value, Some(0.0));
        assert!(!t.degenerate);
        let lone = ConditionedRow { row: SimRow::unobserved(3), models: 1 };
        let t = s_task(&row, &[lone], &v, 0.01).unwrap();
        assert!(t.degenerate && t.value == Some(0.0));
    }

    #[test]
    fn large_penalty_drives_predictions_to_half() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let y = vec![true, false, true];
        let clf = ReflectionClassifier::fit(&x, &y, 1e9, 1000).unwrap();
        assert!((clf.predict_proba(&[1.0, 0.0]) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn duplication_leaves_theta_unchanged() {
        let x = vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![0.7, 0.6], vec![0.3, 0.1]];
        let y = vec![true, false, true, false];
        let a = ReflectionClassifier::fit(&x, &y, 0.1, 1000).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<bool> = y.iter().chain(&y).copied().collect();
        let b = ReflectionClassifier::fit(&x2, &y2, 0.1, 1000).unwrap();
        for (p, q) in a.theta.iter().zip(&b.theta) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_is_constant() {
        let x = vec![vec![1.0], vec![2.0]];
        let clf = ReflectionClassifier::fit(&x, &[false, false], 1e-3, 1000).unwrap();
        assert_eq!(clf.theta[0], 0.0);
        assert_eq!(clf.predict_proba(&[1.5]), clf.predict_proba(&[-7.0]));
        assert!(clf.predict_proba(&[1.5]) < 0.5);
    }
}
