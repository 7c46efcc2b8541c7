//! Deferral thresholds, routing decisions and the cost-optimal rejection
//! rate.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::{Label, LabelSet};
use crate::scores::{check_simplex, combine, UQProfile};
use crate::weights::{retained_accuracy, ScoredInstance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferralPolicy {
    #[serde(rename = "P")]
    pub p: f64,
    pub tau: f64,
    pub alpha: [f64; 3],
    pub lambda: f64,
    /// `(P_l, P_u)`.
    pub bounds: (f64, f64),
}

impl DeferralPolicy {
    pub fn new(p: f64, tau: f64, alpha: [f64; 3], lambda: f64, bounds: (f64, f64)) -> Result<Self> {
        check_simplex(&alpha)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("rejection rate {p} outside [0, 1)")));
        }
        if !(bounds.0 <= p && p <= bounds.1) {
            return Err(Error::invalid(format!(
                "rejection rate {p} outside bounds [{}, {}]",
                bounds.0, bounds.1
            )));
        }
        if lambda < 0.0 {
            return Err(Error::invalid("human unit cost must be non-negative"));
        }
        Ok(DeferralPolicy {
            p,
            tau,
            alpha,
            lambda,
            bounds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Auto,
    Defer,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Auto => "auto",
            Route::Defer => "defer",
        }
    }

    pub fn parse(s: &str) -> Result<Route> {
        match s {
            "auto" => Ok(Route::Auto),
            "defer" => Ok(Route::Defer),
            other => Err(Error::invalid(format!("unknown route `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub instance_id: String,
    pub route: Route,
    #[serde(rename = "S")]
    pub s: f64,
    /// Majority vote when routed automatically.
    pub prediction: Option<Label>,
}

/// Smallest observed score `τ` with `#{s ≤ τ} / n ≥ 1 − P`.
pub fn threshold_from_quantile(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("threshold needs at least one score"));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("rejection rate {p} outside [0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let need = (((1.0 - p) * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[need - 1])
}

/// Plurality label. Ties go to the positive class of a binary task when it
/// is among the tied labels, otherwise to the lexicographically smallest.
pub fn majority_vote(votes: &[Label], labels: &LabelSet) -> Option<Label> {
    let mut counts: BTreeMap<&Label, usize> = BTreeMap::new();
    for v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let tied: Vec<&Label> = counts
        .iter()
        .filter(|(_, &c)| c == top)
        .map(|(l, _)| *l)
        .collect();
    if tied.len() > 1 && labels.is_binary() {
        if let Some(pos) = labels.positive.as_ref().filter(|p| tied.contains(p)) {
            return Some(pos.clone());
        }
    }
    tied.first().map(|l| (*l).clone())
}

/// Routes one instance given its combined score. An instance without any
/// ensemble vote has nothing to report automatically and is deferred.
pub fn decide_score(
    instance_id: &str,
    s: f64,
    tau: f64,
    votes: &[Label],
    labels: &LabelSet,
) -> RouteDecision {
    let prediction = if s <= tau {
        majority_vote(votes, labels)
    } else {
        None
    };
    if s <= tau && prediction.is_none() {
        log::warn!("instance `{instance_id}` has no ensemble vote; deferring");
    }
    RouteDecision {
        instance_id: instance_id.to_string(),
        route: if prediction.is_some() {
            Route::Auto
        } else {
            Route::Defer
        },
        s,
        prediction,
    }
}

/// Routes a profile under the policy's own weights.
pub fn decide(
    profile: &UQProfile,
    policy: &DeferralPolicy,
    votes: &[Label],
    labels: &LabelSet,
) -> Result<RouteDecision> {
    let s = combine(&profile.components, &policy.alpha)?;
    Ok(decide_score(&profile.instance_id, s, policy.tau, votes, labels))
}

/// Routing dump: `instance_id,S,route,prediction`.
pub fn write_routing_csv(decisions: &[RouteDecision], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["instance_id", "S", "route", "prediction"])?;
    for d in decisions {
        out.write_record([
            d.instance_id.as_str(),
            &d.s.to_string(),
            d.route.as_str(),
            d.prediction.as_ref().map_or("", Label::as_str),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_routing_csv(r: impl std::io::Read) -> Result<Vec<RouteDecision>> {
    #[derive(Deserialize)]
    struct Row {
        instance_id: String,
        #[serde(rename = "S")]
        s: f64,
        route: String,
        prediction: String,
    }
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            let route = Route::parse(&row.route)?;
            let prediction = (!row.prediction.is_empty()).then(|| Label::new(row.prediction));
            if (route == Route::Auto) != prediction.is_some() {
                return Err(Error::invalid(format!(
                    "instance `{}`: an automatic route needs a prediction and a deferral must not have one",
                    row.instance_id
                )));
            }
            Ok(RouteDecision {
                instance_id: row.instance_id,
                route,
                s: row.s,
                prediction,
            })
        })
        .collect()
}

const VERTICES: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Regret of the combined score against the best single stage score,
/// `max_i U_i − U`. Negative when the combination beats every stage.
pub fn cost_c(p: f64, alpha: &[f64; 3], fold: &[ScoredInstance]) -> Result<f64> {
    let u = retained_accuracy(p, alpha, fold)?;
    let mut best = f64::NEG_INFINITY;
    for v in &VERTICES {
        best = best.max(retained_accuracy(p, v, fold)?);
    }
    Ok(best - u)
}

/// Mean regret over folds.
pub fn mean_cost_c(p: f64, alpha: &[f64; 3], folds: &[Vec<ScoredInstance>]) -> Result<f64> {
    if folds.is_empty() {
        return Err(Error::invalid("no folds given"));
    }
    let mut sum = 0.0;
    for f in folds {
        sum += cost_c(p, alpha, f)?;
    }
    Ok(sum / folds.len() as f64)
}

/// A sampled rejection level with the weights to use there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    #[serde(rename = "P")]
    pub p: f64,
    pub alpha: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PChoice {
    #[serde(rename = "P_star")]
    pub p_star: f64,
    pub alpha: [f64; 3],
    /// `(P, mean C, λP + mean C)` per level, ascending P.
    pub objective: Vec<(f64, f64, f64)>,
}

/// Mean regret at each level, ascending `P`.
pub fn regret_curve(levels: &[Level], folds: &[Vec<ScoredInstance>]) -> Result<Vec<(f64, f64)>> {
    let mut sorted = levels.to_vec();
    sorted.sort_by(|a, b| a.p.total_cmp(&b.p));
    sorted
        .iter()
        .map(|l| mean_cost_c(l.p, &l.alpha, folds).map(|c| (l.p, c)))
        .collect()
}

/// Minimizes `λP + mean_k C_k(P, α(P))` over the sampled levels; ties go to
/// the smaller `P`.
pub fn optimize_p(lambda: f64, levels: &[Level], folds: &[Vec<ScoredInstance>]) -> Result<PChoice> {
    if levels.is_empty() {
        return Err(Error::invalid("no rejection levels to choose from"));
    }
    let curve = regret_curve(levels, folds)?;
    Ok(choose_p(lambda, &curve, levels))
}

/// Same selection on a precomputed regret curve.
pub fn choose_p(lambda: f64, curve: &[(f64, f64)], levels: &[Level]) -> PChoice {
    let objective: Vec<(f64, f64, f64)> = curve.iter().map(|&(p, c)| (p, c, lambda * p + c)).collect();
    let mut best = 0;
    for (i, o) in objective.iter().enumerate().skip(1) {
        if o.2 < objective[best].2 - 1e-12 {
            best = i;
        }
    }
    let p_star = objective[best].0;
    let alpha = levels
        .iter()
        .find(|l| l.p == p_star)
        .map(|l| l.alpha)
        .unwrap_or([1.0 / 3.0; 3]);
    PChoice {
        p_star,
        alpha,
        objective,
    }
}

/// Smallest λ above which the lowest level wins outright:
/// `max_{P > P_l} (C(P_l) − C(P)) / (P − P_l)`, floored at zero.
pub fn dominance_bound(curve: &[(f64, f64)]) -> Result<f64> {
    let Some(&(p_l, c_l)) = curve.first() else {
        return Err(Error::invalid("empty regret curve"));
    };
    Ok(curve[1..]
        .iter()
        .map(|&(p, c)| (c_l - c) / (p - p_l))
        .fold(0.0, f64::max))
}

/// Indicator loss of the mixed system on one instance.
pub fn step_loss(route: Route, auto_correct: bool, human_correct: bool) -> u8 {
    match route {
        Route::Auto => u8::from(!auto_correct),
        Route::Defer => u8::from(!human_correct),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSet {
        LabelSet::new(["normal", "abnormal"], Some(Label::new("abnormal")))
    }

    #[test]
    fn threshold_examples() {
        let s = [0.3, 0.1, 0.9, 0.5];
        assert_eq!(threshold_from_quantile(&s, 0.0).unwrap(), 0.9);
        assert_eq!(threshold_from_quantile(&s, 0.25).unwrap(), 0.5);
        assert_eq!(threshold_from_quantile(&[0.4; 7], 0.3).unwrap(), 0.4);
        let grid: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(threshold_from_quantile(&grid, 0.05).unwrap(), 95.0);
        assert!(threshold_from_quantile(&[], 0.1).is_err());
        assert!(threshold_from_quantile(&s, 1.0).is_err());
    }

    #[test]
    fn votes_and_ties() {
        let l = labels();
        let v = |xs: &[&str]| xs.iter().map(|x| Label::new(*x)).collect::<Vec<_>>();
        assert_eq!(majority_vote(&v(&["normal", "normal", "abnormal"]), &l), Some(Label::new("normal")));
        assert_eq!(majority_vote(&v(&["normal", "abnormal"]), &l), Some(Label::new("abnormal")));
        let multi = LabelSet::new(["c", "b", "a"], None);
        assert_eq!(majority_vote(&v(&["c", "b"]), &multi), Some(Label::new("b")));
        assert_eq!(majority_vote(&[], &l), None);
    }

    #[test]
    fn boundary_routes_auto() {
        let l = labels();
        let votes = vec![Label::new("normal"), Label::new("normal"), Label::new("abnormal")];
        let d = decide_score("x", 0.4, 0.4, &votes, &l);
        assert_eq!(d.route, Route::Auto);
        assert_eq!(d.prediction, Some(Label::new("normal")));
        let d = decide_score("x", 0.41, 0.4, &votes, &l);
        assert_eq!(d.route, Route::Defer);
        assert!(d.prediction.is_none());
    }

    #[test]
    fn routing_csv_round_trip() {
        let l = labels();
        let votes = vec![Label::new("abnormal")];
        let ds = vec![
            decide_score("a", 0.1, 0.5, &votes, &l),
            decide_score("b", 0.9, 0.5, &votes, &l),
        ];
        let mut buf = Vec::new();
        write_routing_csv(&ds, &mut buf).unwrap();
        assert_eq!(read_routing_csv(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn step_loss_table() {
        assert_eq!(step_loss(Route::Auto, true, false), 0);
        assert_eq!(step_loss(Route::Auto, false, true), 1);
        assert_eq!(step_loss(Route::Defer, true, false), 1);
        assert_eq!(step_loss(Route::Defer, false, true), 0);
    }

    #[test]
    fn p_ties_and_bound() {
        let levels: Vec<Level> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&p| Level { p, alpha: [1.0, 0.0, 0.0] })
            .collect();
        let flat = [(0.1, 0.0), (0.2, -0.01), (0.3, -0.02)];
        assert_eq!(choose_p(0.1, &flat, &levels).p_star, 0.1);
        assert_eq!(choose_p(0.0, &flat, &levels).p_star, 0.3);
        let b = dominance_bound(&flat).unwrap();
        assert!((b - 0.1).abs() < 1e-12);
        assert_eq!(choose_p(b + 1e-6, &flat, &levels).p_star, 0.1);
    }

    #[test]
    fn policy_checks_bounds() {
        assert!(DeferralPolicy::new(0.2, 0.5, [1.0, 0.0, 0.0], 0.1, (0.05, 0.4)).is_ok());
        assert!(DeferralPolicy::new(0.5, 0.5, [1.0, 0.0, 0.0], 0.1, (0.05, 0.4)).is_err());
        assert!(DeferralPolicy::new(0.2, 0.5, [0.5, 0.0, 0.0], 0.1, (0.05, 0.4)).is_err());
    }
}
