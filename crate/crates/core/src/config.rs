//! Run configuration: a TOML file with every section optional, resolved into
//! the typed settings of each stage and written back as a JSON snapshot next
//! to the outputs it produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chain::{ChainSettings, HttpChatConfig, TranscriptMode};
use crate::embedding::{Embedder, HttpProvider, HttpProviderConfig, PrecomputedProvider};
use crate::eval::DEFAULT_RANDOM_REPETITIONS;
use crate::model::{Label, LabelSet};
use crate::pipeline::{default_p_levels, FeatureOptions, FitConfig, TrainConfig};
use crate::pmf::{PmfOptions, DEFAULT_LAMBDA};
use crate::scores::{DEFAULT_L2, DEFAULT_MAX_ITER};
use crate::seed::derive_seed;
use crate::similarity::ConditioningRule;
use crate::store::LoadOptions;
use crate::{Error, Result};

/// Snapshot name for a subcommand: `resolved_config.<command>.json`.
pub fn snapshot_file(command: &str) -> String {
    format!("resolved_config.{command}.json")
}

/// What a command ran with: enough to rerun it identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
}

/// Caps the global worker pool. Only the first call has an effect.
pub fn init_thread_pool(jobs: Option<usize>) -> Result<()> {
    let Some(n) = jobs else { return Ok(()) };
    if n == 0 {
        return Err(Error::invalid("--jobs must be at least 1"));
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("worker pool already initialized: {e}");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stochastic component derives its own from it.
    pub seed: u64,
    /// Cap on worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub embedding: EmbeddingConfig,
    pub chain: ChainConfig,
    pub fit: FitSection,
    pub weights: WeightsConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub traces: Option<PathBuf>,
    pub artifacts: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub strict: bool,
    /// Declared label set; inferred from the data when absent.
    pub labels: Option<Vec<String>>,
    pub positive: Option<String>,
}

impl IngestConfig {
    pub fn label_set(&self) -> Option<LabelSet> {
        self.labels
            .as_ref()
            .map(|l| LabelSet::new(l.iter().map(String::as_str), self.positive.as_deref().map(Label::from)))
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            strict: self.strict,
            label_set: self.label_set(),
            roster: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Stub,
    Precomputed,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    /// Stub dimension.
    pub dim: usize,
    /// Stub seed.
    pub seed: u64,
    /// Vector file for the precomputed provider.
    pub path: Option<PathBuf>,
    pub http: Option<HttpProviderConfig>,
    /// Persistent cache file.
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: ProviderKind::Stub,
            dim: 64,
            seed: 0,
            path: None,
            http: None,
            cache: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<Embedder> {
        let embedder = match self.provider {
            ProviderKind::Stub => Embedder::stub(self.dim, self.seed)?,
            ProviderKind::Precomputed => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::invalid("embedding.path is required for the precomputed provider"))?;
                Embedder::new(Box::new(PrecomputedProvider::load(path)?))
            }
            ProviderKind::Http => {
                let cfg = self
                    .http
                    .clone()
                    .ok_or_else(|| Error::invalid("[embedding.http] is required for the http provider"))?;
                Embedder::new(Box::new(HttpProvider::new(cfg)?))
            }
        };
        match &self.cache {
            Some(path) => embedder.with_cache_file(path),
            None => Ok(embedder),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub endpoint: Option<String>,
    pub auth_env: Option<String>,
    pub roster: Vec<String>,
    /// Directory with `comprehension.txt`, `analysis.txt`, `reflection.txt`;
    /// the built-in prompts when absent.
    pub templates: Option<PathBuf>,
    pub task: String,
    pub default_side_info: String,
    pub mode: TranscriptMode,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retries: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            endpoint: None,
            auth_env: None,
            roster: Vec::new(),
            templates: None,
            task: "Decide whether the item shows an anomaly.".into(),
            default_side_info: "no side information".into(),
            mode: TranscriptMode::Replay,
            max_in_flight: 4,
            timeout_secs: 60,
            retries: 2,
        }
    }
}

impl ChainConfig {
    pub fn http(&self) -> Result<HttpChatConfig> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| Error::invalid("chain.endpoint is required outside replay mode"))?;
        Ok(HttpChatConfig {
            endpoint,
            auth_env: self.auth_env.clone(),
            timeout_secs: self.timeout_secs,
            retries: self.retries,
            backoff_ms: 500,
        })
    }

    pub fn settings(&self, labels: LabelSet) -> ChainSettings {
        ChainSettings {
            task: self.task.clone(),
            default_side_info: self.default_side_info.clone(),
            roster: self.roster.clone(),
            labels,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub k_candidates: Vec<usize>,
    /// Folds of the rank-selection CV.
    pub k_folds: usize,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub pmf_max_iter: usize,
    pub pmf_tol: f64,
    pub pmf_restarts: usize,
    pub l2: f64,
    pub logistic_max_iter: usize,
    pub hypothesis_template: String,
    pub default_side_info: String,
    pub conditioning: ConditioningRule,
}

impl Default for FitSection {
    fn default() -> Self {
        let fit = FitConfig::default();
        let features = FeatureOptions::default();
        FitSection {
            k_candidates: fit.k_candidates,
            k_folds: fit.k_folds,
            lambda_u: DEFAULT_LAMBDA,
            lambda_v: DEFAULT_LAMBDA,
            pmf_max_iter: fit.pmf.max_iter,
            pmf_tol: fit.pmf.tol,
            pmf_restarts: fit.pmf.restarts,
            l2: DEFAULT_L2,
            logistic_max_iter: DEFAULT_MAX_ITER,
            hypothesis_template: features.hypothesis_template,
            default_side_info: features.default_side_info,
            conditioning: features.conditioning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    /// Folds of the weight search.
    pub folds: usize,
    pub grid_step: f64,
    #[serde(rename = "P_levels")]
    pub p_levels: Vec<f64>,
    pub bandwidth: Option<f64>,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            folds: 5,
            grid_step: 0.1,
            p_levels: default_p_levels(),
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub lambda_cost: f64,
    /// `[P_l, P_u]`; the extreme levels when absent.
    pub bounds: Option<(f64, f64)>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            lambda_cost: 0.05,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub random_repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            random_repetitions: DEFAULT_RANDOM_REPETITIONS,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn feature_options(&self) -> FeatureOptions {
        FeatureOptions {
            hypothesis_template: self.fit.hypothesis_template.clone(),
            default_side_info: self.fit.default_side_info.clone(),
            conditioning: self.fit.conditioning,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            k_candidates: self.fit.k_candidates.clone(),
            k_folds: self.fit.k_folds,
            lambda_u: self.fit.lambda_u,
            lambda_v: self.fit.lambda_v,
            pmf: PmfOptions {
                max_iter: self.fit.pmf_max_iter,
                tol: self.fit.pmf_tol,
                seed: derive_seed(self.seed, "pmf"),
                restarts: self.fit.pmf_restarts,
            },
            l2: self.fit.l2,
            max_iter: self.fit.logistic_max_iter,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            fit: self.fit_config(),
            features: self.feature_options(),
            cv_folds: self.weights.folds,
            grid_step: self.weights.grid_step,
            p_levels: self.weights.p_levels.clone(),
            bandwidth: self.weights.bandwidth,
            lambda_cost: self.policy.lambda_cost,
            bounds: self.policy.bounds,
        }
    }

    /// Writes the snapshot of `command` into `dir`, creating it if needed.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>, command: &str, args: &[String]) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(snapshot_file(command));
        let snap = Snapshot {
            command: command.to_string(),
            args: args.to_vec(),
            config: self.clone(),
        };
        let mut text = serde_json::to_string_pretty(&snap)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let train = cfg.train_config();
        assert_eq!(train.fit.k_candidates, vec![5, 10, 15]);
        assert_eq!(train.grid_step, 0.1);
        assert_eq!(train.cv_folds, 5);
        assert_eq!(train.fit.max_iter, 1000);
    }

    #[test]
    fn sections_override_and_unknown_keys_fail() {
        let cfg = RunConfig::parse(
            "seed = 9\n[weights]\nP_levels = [0.1, 0.2]\n[chain]\nroster = [\"a\", \"b\"]\nmode = \"record\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.weights.p_levels, vec![0.1, 0.2]);
        assert_eq!(cfg.chain.mode, TranscriptMode::Record);
        assert!(RunConfig::parse("[fit]\nk_candidate = [3]\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: 3,
            jobs: Some(2),
            ..Default::default()
        };
        let args = vec!["fit".to_string(), "--train".to_string(), "t.jsonl".to_string()];
        let path = cfg.write_snapshot(dir.path(), "fit", &args).unwrap();
        assert!(path.ends_with("resolved_config.fit.json"));
        let back: Snapshot = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.args, args);
    }
}
