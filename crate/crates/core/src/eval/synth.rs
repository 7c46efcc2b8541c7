//! Seeded synthetic ensembles whose stage texts, errors and reflection flips
//! are driven by a latent per-instance difficulty.
//!
//! Each instance draws a difficulty `d ~ Beta(a, b)` and, per stage, an
//! independent nuisance difficulty. A stage's divergence level mixes the two
//! according to its coupling in `[0, 1]`, so a stage with coupling 0 produces
//! disagreement that carries no information about errors. Model errors are
//! tied to `d` with strength `rho`.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::model::{Dataset, EnsembleTrace, Label, LabelSet, ModelOutput, Stage};
use crate::seed::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCoupling {
    pub description: f64,
    pub reasoning: f64,
    pub reflection: f64,
}

impl Default for StageCoupling {
    fn default() -> Self {
        StageCoupling {
            description: 1.0,
            reasoning: 1.0,
            reflection: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub m: usize,
    /// Dimension of the stub embedder meant to read this data.
    pub embedding_dim: usize,
    pub difficulty_a: f64,
    pub difficulty_b: f64,
    /// Strength in `[-1, 1]` with which difficulty drives model errors.
    pub rho: f64,
    /// Per-model error probability at average difficulty.
    pub base_error: f64,
    /// Human reviewer error rate.
    pub delta: f64,
    pub labels: Vec<String>,
    pub positive: Option<String>,
    pub coupling: StageCoupling,
    /// Per model and stage chance that generation fails; later stages of
    /// that model fail with it.
    pub failure_rate: f64,
    pub side_info: String,
    /// Instances at or above this difficulty are tagged `ambiguous`.
    pub ambiguous_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 1000,
            m: 5,
            embedding_dim: 64,
            difficulty_a: 2.0,
            difficulty_b: 2.0,
            rho: 0.8,
            base_error: 0.25,
            delta: 0.02,
            labels: vec!["normal".into(), "abnormal".into()],
            positive: Some("abnormal".into()),
            coupling: StageCoupling::default(),
            failure_rate: 0.0,
            side_info: "Rules: falls, forced entry, smoke and unattended stoves are abnormal; \
                        routine chores, pets and visitors are normal."
                .into(),
            ambiguous_threshold: 0.85,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n == 0 {
            return Err(Error::invalid("synthetic dataset needs n ≥ 1"));
        }
        if self.m < 2 {
            return Err(Error::invalid("synthetic ensemble needs m ≥ 2"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho {} outside [-1, 1]", self.rho)));
        }
        if !unit(self.delta) || !unit(self.base_error) || !unit(self.failure_rate) {
            return Err(Error::invalid("delta, base_error and failure_rate must lie in [0, 1]"));
        }
        let c = self.coupling;
        if !unit(c.description) || !unit(c.reasoning) || !unit(c.reflection) {
            return Err(Error::invalid("stage couplings must lie in [0, 1]"));
        }
        if !(self.difficulty_a > 0.0 && self.difficulty_b > 0.0) {
            return Err(Error::invalid("difficulty shape parameters must be positive"));
        }
        let distinct: BTreeSet<&String> = self.labels.iter().collect();
        if distinct.len() < 2 || distinct.len() != self.labels.len() {
            return Err(Error::invalid("labels must hold at least two distinct names"));
        }
        if let Some(p) = &self.positive {
            if !self.labels.contains(p) {
                return Err(Error::invalid(format!("positive label `{p}` is not in the label list")));
            }
        }
        if self.side_info.trim().is_empty() {
            return Err(Error::invalid("side information text must not be empty"));
        }
        Ok(())
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::new(self.labels.iter().map(|l| Label::new(l.as_str())), self.positive.as_deref().map(Label::new))
    }

    fn mean_difficulty(&self) -> f64 {
        self.difficulty_a / (self.difficulty_a + self.difficulty_b)
    }

    /// Per-model error probability at difficulty `d`.
    pub fn error_prob(&self, d: f64) -> f64 {
        (self.base_error + self.rho * ERROR_SPREAD * (d - self.mean_difficulty())).clamp(0.01, 0.95)
    }
}

const ERROR_SPREAD: f64 = 1.2;

/// Generating quantities of one instance, kept for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    pub instance_id: String,
    pub difficulty: f64,
    /// Per-model error probability.
    pub model_error_prob: f64,
    /// Probability that the majority vote is wrong.
    pub ensemble_error_prob: f64,
    /// Realized number of models whose final decision is wrong.
    pub wrong_models: usize,
    pub human_label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth: Vec<InstanceTruth>,
}

const SCENE_WORDS: &[&str] = &[
    "kitchen", "hallway", "garage", "porch", "bedroom", "stairs", "doorway", "window", "sofa",
    "table", "chair", "lamp", "stove", "kettle", "sink", "fridge", "cabinet", "shelf", "rug",
    "curtain", "mirror", "bicycle", "ladder", "basket", "backpack", "umbrella", "package",
    "mailbox", "driveway", "fence", "gate", "garden", "hose", "bucket", "broom", "vacuum", "dog",
    "cat", "child", "adult", "elder", "visitor", "courier", "neighbor", "stranger", "phone",
    "laptop", "television", "remote", "blanket", "pillow", "towel", "bottle", "plate", "cup",
    "knife", "pan", "smoke", "light", "shadow", "night", "morning", "evening", "rain", "snow",
    "car", "truck", "scooter", "toy", "ball", "box", "bag", "coat", "shoe", "hat", "glove",
    "walking", "running", "sitting", "lying", "standing", "climbing", "falling", "carrying",
    "opening", "closing", "cooking", "cleaning", "reading", "sleeping", "waving", "knocking",
    "pushing", "pulling", "dropping", "lifting", "slowly", "quickly", "briefly", "repeatedly",
];

const EVIDENCE_WORDS: &[&str] = &[
    "motion", "posture", "gait", "timing", "duration", "context", "routine", "pattern",
    "sequence", "interaction", "trajectory", "position", "velocity", "contact", "impact", "noise",
    "occupancy", "entry", "exit", "presence", "absence", "gesture", "balance", "direction",
    "frequency", "intensity", "location", "object", "activity", "behavior", "response", "recovery",
    "stillness", "struggle", "attention", "hesitation", "urgency", "familiarity", "access",
    "intent", "supervision", "hazard", "damage", "heat", "flame", "spill", "injury", "threat",
    "comfort", "habit",
];

const HEDGE_WORDS: &[&str] = &[
    "perhaps",
    "possibly",
    "unclear",
    "might",
    "uncertain",
    "ambiguous",
];

fn mix(coupling: f64, d: f64, nuisance: f64) -> f64 {
    coupling * d + (1.0 - coupling) * nuisance
}

/// Copy of `base` where each word is swapped for a random vocabulary word
/// with probability `rate`.
fn perturb(base: &[&'static str], vocab: &[&'static str], rate: f64, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    base.iter()
        .map(|w| {
            if rng.random_bool(rate) {
                vocab.choose(rng).copied().unwrap_or(w)
            } else {
                w
            }
        })
        .collect()
}

fn divergence_rate(level: f64) -> f64 {
    (0.05 + 0.85 * level).clamp(0.0, 1.0)
}

/// Probability that a vote over `m` models, each wrong independently with
/// probability `q`, misses the truth when all wrong votes agree (exact for
/// binary tasks). An even split counts as a coin flip.
pub fn majority_error_prob(m: usize, q: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..=m {
        let pk = binomial_pmf(m, k, q);
        let wrong = match (2 * k).cmp(&m) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Equal => 0.5,
            std::cmp::Ordering::Less => 0.0,
        };
        total += pk * wrong;
    }
    total
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c *= (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

fn other_label<'a>(labels: &'a [Label], not: &Label, rng: &mut ChaCha8Rng) -> &'a Label {
    let others: Vec<&Label> = labels.iter().filter(|l| *l != not).collect();
    others.choose(rng).copied().expect("at least two labels")
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let labels: Vec<Label> = cfg.labels.iter().map(|l| Label::new(l.as_str())).collect();
    let beta = Beta::new(cfg.difficulty_a, cfg.difficulty_b).map_err(|e| Error::invalid(e.to_string()))?;
    let roster: Vec<String> = (1..=cfg.m).map(|j| format!("model-{j}")).collect();
    let width = cfg.n.to_string().len();

    let mut traces = Vec::with_capacity(cfg.n);
    let mut truth = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let id = format!("syn-{i:0width$}");
        let mut rng = rng_for(cfg.seed, &id);
        let d: f64 = beta.sample(&mut rng);
        let nuisance: [f64; 3] = [beta.sample(&mut rng), beta.sample(&mut rng), beta.sample(&mut rng)];
        let d_x = mix(cfg.coupling.description, d, nuisance[0]);
        let d_z = mix(cfg.coupling.reasoning, d, nuisance[1]);
        let d_ref = mix(cfg.coupling.reflection, d, nuisance[2]);

        let y = labels.choose(&mut rng).expect("labels").clone();
        let q = cfg.error_prob(d);
        let scene: Vec<&str> = SCENE_WORDS.choose_multiple(&mut rng, 10).copied().collect();
        let evidence: Vec<&str> = EVIDENCE_WORDS.choose_multiple(&mut rng, 8).copied().collect();
        let hedge_dist = Binomial::new(HEDGE_WORDS.len() as u64, d_ref).map_err(|e| Error::invalid(e.to_string()))?;

        let mut outputs = Vec::with_capacity(cfg.m);
        let mut wrong_models = 0;
        for model_id in &roster {
            let wrong = rng.random_bool(q);
            wrong_models += usize::from(wrong);
            let h = if wrong { other_label(&labels, &y, &mut rng).clone() } else { y.clone() };

            let hedges = hedge_dist.sample(&mut rng) as usize;
            let flip_prob = (0.02 + 0.13 * hedges as f64).min(0.9);
            let h_tilde = if rng.random_bool(flip_prob) {
                other_label(&labels, &h, &mut rng).clone()
            } else {
                h.clone()
            };

            let desc_words = perturb(&scene, SCENE_WORDS, divergence_rate(d_x), &mut rng);
            let x = format!("The footage shows {}.", desc_words.join(" "));

            let ev_words = perturb(&evidence, EVIDENCE_WORDS, divergence_rate(d_z), &mut rng);
            let mut hedge_words: Vec<&str> = HEDGE_WORDS.choose_multiple(&mut rng, hedges).copied().collect();
            hedge_words.sort_unstable();
            let z = format!(
                "Key cues: {}. {}\nFinal answer: {}",
                ev_words.join(" "),
                if hedge_words.is_empty() {
                    "The reading is clear.".to_string()
                } else {
                    format!("The reading is {}.", hedge_words.join(" "))
                },
                h_tilde
            );

            let mut out = ModelOutput {
                model_id: model_id.clone(),
                x: Some(x),
                z: Some(z),
                h_tilde: Some(h_tilde),
                h: Some(h),
                stage_failures: BTreeSet::new(),
            };
            if cfg.failure_rate > 0.0 {
                if let Some(first) = Stage::ALL.iter().position(|_| rng.random_bool(cfg.failure_rate)) {
                    for stage in &Stage::ALL[first..] {
                        out.stage_failures.insert(*stage);
                        match stage {
                            Stage::Description => out.x = None,
                            Stage::Reasoning => out.z = None,
                            Stage::InitialHypothesis => out.h_tilde = None,
                            Stage::FinalDecision => out.h = None,
                        }
                    }
                }
            }
            outputs.push(out);
        }

        let human_label = if rng.random_bool(cfg.delta) {
            other_label(&labels, &y, &mut rng).clone()
        } else {
            y.clone()
        };
        let strata = if d >= cfg.ambiguous_threshold {
            "ambiguous".to_string()
        } else {
            y.to_string()
        };
        traces.push(EnsembleTrace {
            instance_id: id.clone(),
            data_ref: format!("synthetic://{}/{id}", cfg.seed),
            side_info_c: cfg.side_info.clone(),
            true_label: Some(y),
            strata_tag: Some(strata),
            outputs,
        });
        truth.push(InstanceTruth {
            instance_id: id,
            difficulty: d,
            model_error_prob: q,
            ensemble_error_prob: majority_error_prob(cfg.m, q),
            wrong_models,
            human_label,
        });
    }

    let dataset = Dataset::from_traces(traces, Some(cfg.label_set()), Some(roster));
    Ok(SyntheticData { dataset, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let cfg = SyntheticConfig { n: 30, ..Default::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap().dataset, generate_synthetic(&other).unwrap().dataset);
    }

    #[test]
    fn perfect_human_when_delta_zero() {
        let cfg = SyntheticConfig { n: 200, delta: 0.0, ..Default::default() };
        let data = generate_synthetic(&cfg).unwrap();
        for (t, truth) in data.dataset.traces.iter().zip(&data.truth) {
            assert_eq!(t.true_label.as_ref(), Some(&truth.human_label));
        }
    }

    #[test]
    fn majority_error_small_cases() {
        assert_eq!(majority_error_prob(1, 0.3), 0.3);
        // m = 3: P(k ≥ 2) = 3q²(1−q) + q³
        let q: f64 = 0.2;
        let want = 3.0 * q * q * (1.0 - q) + q.powi(3);
        assert!((majority_error_prob(3, q) - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_synthetic(&SyntheticConfig { rho: 1.5, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { m: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn failures_cascade() {
        let cfg = SyntheticConfig { n: 50, failure_rate: 0.3, ..Default::default() };
        let data = generate_synthetic(&cfg).unwrap();
        for t in &data.dataset.traces {
            for o in &t.outputs {
                if o.x.is_none() {
                    assert!(o.z.is_none() && o.h.is_none());
                }
            }
        }
    }
}
