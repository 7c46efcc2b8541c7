//! Evaluation: retained-set metrics, rejection curves, the synthetic data
//! generator and Monte Carlo checks of the deferral theory.

pub mod curves;
pub mod metrics;
pub mod synth;
pub mod theory;

pub use curves::{sweep_curves, CurvePoint, CurveTable, DEFAULT_RANDOM_REPETITIONS};
pub use metrics::{metrics, rejected_misclassification_ratio, render_table_row, MetricReport};
pub use synth::{generate_synthetic, InstanceTruth, StageCoupling, SyntheticConfig, SyntheticData};
pub use theory::{check_loss_monotonicity, simulate_risk_identity, ScoreRegime, RiskIdentityReport, TheoryConfig};
