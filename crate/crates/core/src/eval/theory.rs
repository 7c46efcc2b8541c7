//! Monte Carlo checks of the risk decomposition of score-based deferral
//! against random deferral at the same coverage, and of the monotonicity of
//! the per-instance loss in the score.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, rng_for};
use crate::selective::{step_loss, threshold_from_quantile, Route};
use crate::{Error, Result};

/// How the simulated score relates to the true error probability `p̃(q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRegime {
    /// Score drawn independently of `p̃`.
    Independent,
    /// Score equal to `p̃`.
    Perfect,
    /// Score equal to `1 − p̃`.
    AntiCorrelated,
}

impl ScoreRegime {
    pub const ALL: [ScoreRegime; 3] = [
        ScoreRegime::Independent,
        ScoreRegime::Perfect,
        ScoreRegime::AntiCorrelated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreRegime::Independent => "independent",
            ScoreRegime::Perfect => "perfect",
            ScoreRegime::AntiCorrelated => "anti_correlated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    /// Instances per trial.
    pub instances: usize,
    pub trials: usize,
    #[serde(rename = "P")]
    pub p: f64,
    /// Human error rate.
    pub delta: f64,
    /// `p̃ ~ Beta(a, b)`.
    pub error_a: f64,
    pub error_b: f64,
    pub regime: ScoreRegime,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            instances: 10_000,
            trials: 20,
            p: 0.2,
            delta: 0.02,
            error_a: 2.0,
            error_b: 5.0,
            regime: ScoreRegime::Independent,
            seed: 0,
        }
    }
}

/// Mean over trials with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// `|mean − target| ≤ k·se`, with a rounding allowance when `se` is 0.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskIdentityReport {
    pub regime: ScoreRegime,
    pub instances: usize,
    pub trials: usize,
    #[serde(rename = "P")]
    pub p: f64,
    pub delta: f64,
    /// Risk of score-based deferral.
    pub r_g: Estimate,
    /// Risk of random deferral at the same coverage.
    pub r_r: Estimate,
    /// `Cov(p̃, 1{S ≤ τ})`.
    pub cov_term: Estimate,
    /// Per-trial `(R_g − R_r) − cov`.
    pub identity_gap: Estimate,
}

impl RiskIdentityReport {
    pub fn identity_holds(&self) -> bool {
        self.identity_gap.within(0.0, 3.0)
    }

    pub fn cov_is_zero(&self) -> bool {
        self.cov_term.within(0.0, 3.0)
    }
}

struct Trial {
    r_g: f64,
    r_r: f64,
    cov: f64,
}

fn run_trial(cfg: &TheoryConfig, beta: &Beta<f64>, trial: usize) -> Result<Trial> {
    let mut rng = rng_for(derive_seed(cfg.seed, cfg.regime.name()), &format!("trial-{trial}"));
    let n = cfg.instances;
    let mut err_prob = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut model_wrong = Vec::with_capacity(n);
    let mut human_wrong = Vec::with_capacity(n);
    let mut coin = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = beta.sample(&mut rng);
        let independent: f64 = rng.random();
        err_prob.push(p);
        scores.push(match cfg.regime {
            ScoreRegime::Independent => independent,
            ScoreRegime::Perfect => p,
            ScoreRegime::AntiCorrelated => 1.0 - p,
        });
        model_wrong.push(rng.random_bool(p));
        human_wrong.push(rng.random_bool(cfg.delta));
        coin.push(rng.random::<f64>());
    }
    let tau = threshold_from_quantile(&scores, cfg.p)?;
    let auto: Vec<bool> = scores.iter().map(|&s| s <= tau).collect();
    let coverage = auto.iter().filter(|&&a| a).count() as f64 / n as f64;

    let loss = |a: bool, i: usize| -> f64 {
        let route = if a { Route::Auto } else { Route::Defer };
        f64::from(step_loss(route, !model_wrong[i], !human_wrong[i]))
    };
    let r_g = (0..n).map(|i| loss(auto[i], i)).sum::<f64>() / n as f64;
    // Random deferral: automatic with probability equal to the coverage.
    let r_r = (0..n).map(|i| loss(coin[i] < coverage, i)).sum::<f64>() / n as f64;

    let mean_p = err_prob.iter().sum::<f64>() / n as f64;
    let cov = (0..n)
        .map(|i| (err_prob[i] - mean_p) * (f64::from(u8::from(auto[i])) - coverage))
        .sum::<f64>()
        / n as f64;
    Ok(Trial { r_g, r_r, cov })
}

/// Simulates `trials` independent trials of `instances` instances each.
/// Requires at least two trials (for a standard error) and at least 1000
/// simulated instances in total.
pub fn simulate_risk_identity(cfg: &TheoryConfig) -> Result<RiskIdentityReport> {
    if cfg.trials < 2 || cfg.instances == 0 || cfg.trials * cfg.instances < 1000 {
        return Err(Error::invalid(format!(
            "need ≥ 2 trials and ≥ 1000 simulated instances, got {} × {}",
            cfg.trials, cfg.instances
        )));
    }
    if !(0.0..1.0).contains(&cfg.p) || !(0.0..=1.0).contains(&cfg.delta) {
        return Err(Error::invalid("P must lie in [0, 1) and delta in [0, 1]"));
    }
    let beta = Beta::new(cfg.error_a, cfg.error_b).map_err(|e| Error::invalid(e.to_string()))?;
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &beta, t))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&Trial) -> f64| Estimate::from_samples(&trials.iter().map(f).collect::<Vec<_>>());
    Ok(RiskIdentityReport {
        regime: cfg.regime,
        instances: cfg.instances,
        trials: cfg.trials,
        p: cfg.p,
        delta: cfg.delta,
        r_g: col(|t| t.r_g),
        r_r: col(|t| t.r_r),
        cov_term: col(|t| t.cov),
        identity_gap: col(|t| (t.r_g - t.r_r) - t.cov),
    })
}

/// Direction of the loss as a function of the score for fixed correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    NonDecreasing,
    NonIncreasing,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityCase {
    pub auto_correct: bool,
    pub human_correct: bool,
    pub expected: Monotonicity,
    pub violations: usize,
}

/// Sweeps `S` over `points` evenly spaced values in `[0, 1]` with threshold
/// `tau` and counts steps that break the expected direction.
pub fn check_loss_monotonicity(points: usize, tau: f64) -> Vec<MonotonicityCase> {
    let grid: Vec<f64> = (0..points)
        .map(|i| i as f64 / (points.max(2) - 1) as f64)
        .collect();
    let mut out = Vec::new();
    for auto_correct in [true, false] {
        for human_correct in [true, false] {
            let expected = match (auto_correct, human_correct) {
                // Automatic handling is wrong but the reviewer is right:
                // crossing τ switches the loss from 1 to 0.
                (false, true) => Monotonicity::NonIncreasing,
                (true, false) => Monotonicity::NonDecreasing,
                _ => Monotonicity::Constant,
            };
            let losses: Vec<u8> = grid
                .iter()
                .map(|&s| {
                    let route = if s <= tau { Route::Auto } else { Route::Defer };
                    step_loss(route, auto_correct, human_correct)
                })
                .collect();
            let violations = losses
                .windows(2)
                .filter(|w| match expected {
                    Monotonicity::NonDecreasing => w[1] < w[0],
                    Monotonicity::NonIncreasing => w[1] > w[0],
                    Monotonicity::Constant => w[1] != w[0],
                })
                .count();
            out.push(MonotonicityCase {
                auto_correct,
                human_correct,
                expected,
                violations,
            });
        }
    }
    out
}
