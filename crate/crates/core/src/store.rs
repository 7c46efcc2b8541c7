//! Flat-file persistence, train/test splits and K-fold partitions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{validate_dataset, Dataset, EnsembleTrace, LabelSet};
use crate::pipeline::FeatureOptions;
use crate::scores::NormStats;
use crate::selective::DeferralPolicy;
use crate::seed::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Fail on the first malformed line instead of skipping it.
    pub strict: bool,
    pub label_set: Option<LabelSet>,
    pub roster: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// `(line number, message)` for every skipped line, 1-based.
    pub skipped: Vec<(usize, String)>,
}

pub fn load_traces(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<LoadReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(BufReader::new(file), opts).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_traces(reader: impl BufRead, opts: &LoadOptions) -> Result<LoadReport> {
    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EnsembleTrace>(&line) {
            Ok(t) => traces.push(t),
            Err(e) if opts.strict => {
                return Err(Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })
            }
            Err(e) => {
                log::warn!("skipping malformed trace on line {line_no}: {e}");
                skipped.push((line_no, e.to_string()));
            }
        }
    }
    let dataset = Dataset::from_traces(traces, opts.label_set.clone(), opts.roster.clone());
    let violations = validate_dataset(&dataset);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(LoadReport { dataset, skipped })
}

pub fn save_traces(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_traces(&mut w, &dataset.traces).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_traces(w: &mut impl Write, traces: &[EnsembleTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut *w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    w.flush().map_err(|e| Error::io("<writer>", e))
}

/// Which trace field defines strata for splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrataKey {
    #[default]
    StrataTag,
    TrueLabel,
    None,
}

impl StrataKey {
    fn of(self, t: &EnsembleTrace) -> String {
        match self {
            StrataKey::StrataTag => t.strata_tag.clone().unwrap_or_default(),
            StrataKey::TrueLabel => t
                .true_label
                .as_ref()
                .map(|l| l.as_str().to_string())
                .unwrap_or_default(),
            StrataKey::None => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub strata_key: StrataKey,
    pub seed: u64,
}

impl SplitSpec {
    pub fn four_to_one(seed: u64) -> Self {
        SplitSpec {
            train_fraction: 0.8,
            strata_key: StrataKey::StrataTag,
            seed,
        }
    }
}

/// Round-half-up with a small guard against binary representation error
/// (0.7 × 5 evaluates to 3.4999999999999996).
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn strata_groups(dataset: &Dataset, key: StrataKey) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in dataset.traces.iter().enumerate() {
        groups.entry(key.of(t)).or_default().push(i);
    }
    groups
}

/// Stratified train/test split. Within each stratum the train share is
/// `round_half_up(train_fraction × size)`; both outputs keep input order.
pub fn stratified_split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must lie strictly between 0 and 1, got {}",
            spec.train_fraction
        )));
    }
    let mut rng = rng_for(spec.seed, "stratified-split");
    let mut in_train = vec![false; dataset.len()];
    for (stratum, mut members) in strata_groups(dataset, spec.strata_key) {
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "stratum `{stratum}` has {} instance(s); at least 2 are needed to stratify",
                members.len()
            )));
        }
        let n_train = round_half_up(spec.train_fraction * members.len() as f64);
        members.shuffle(&mut rng);
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| in_train[i]).collect();
    let test: Vec<usize> = (0..dataset.len()).filter(|&i| !in_train[i]).collect();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// instance_id → fold index in `1..=k`.
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn fold_of(&self, instance_id: &str) -> Option<usize> {
        self.assignment.get(instance_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f - 1] += 1;
        }
        sizes
    }

    /// `(train indices, held-out indices)` into `dataset.traces` for fold
    /// `fold` (1-based). Traces without an assignment go to neither side.
    pub fn split_indices(&self, ids: &[&str], fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match self.fold_of(id) {
                Some(f) if f == fold => held.push(i),
                Some(_) => train.push(i),
                None => {}
            }
        }
        (train, held)
    }
}

/// Balanced K-fold assignment. Traces are shuffled within strata (by
/// `strata_tag` when any trace carries one), strata are concatenated in
/// key order, and folds are dealt round-robin, so global fold sizes differ
/// by at most one and every stratum is spread evenly.
pub fn kfold_partition(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("K must be at least 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(Error::invalid(format!(
            "K = {k} exceeds the {} available instances",
            dataset.len()
        )));
    }
    let key = if dataset.traces.iter().any(|t| t.strata_tag.is_some()) {
        StrataKey::StrataTag
    } else {
        StrataKey::None
    };
    let mut rng = rng_for(seed, "kfold");
    let mut assignment = BTreeMap::new();
    let mut next = 0usize;
    for (_, mut members) in strata_groups(dataset, key) {
        members.shuffle(&mut rng);
        for i in members {
            assignment.insert(dataset.traces[i].instance_id.clone(), next % k + 1);
            next += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        assignment,
        seed,
    })
}

pub const ARTIFACT_VERSION: &str = "chainuq-artifact/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaLevel {
    #[serde(rename = "P")]
    pub p: f64,
    pub alpha_raw: [f64; 3],
    pub alpha: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauLevel {
    #[serde(rename = "P")]
    pub p: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionMeta {
    pub l2: f64,
    pub max_iter: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub fingerprint: String,
    pub dim: usize,
}

/// Fitted-model bundle. Matrices are row-major nested arrays; `theta` holds
/// the reflection weights followed by the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub version: String,
    #[serde(rename = "V_star_x")]
    pub v_star_x: Vec<Vec<f64>>,
    #[serde(rename = "V_star_z")]
    pub v_star_z: Vec<Vec<f64>>,
    #[serde(rename = "K_x")]
    pub k_x: usize,
    #[serde(rename = "K_z")]
    pub k_z: usize,
    #[serde(rename = "lambda_U")]
    pub lambda_u: f64,
    #[serde(rename = "lambda_V")]
    pub lambda_v: f64,
    pub theta: Vec<f64>,
    pub norm_stats: NormStats,
    #[serde(rename = "alpha_by_P", default)]
    pub alpha_by_p: Vec<AlphaLevel>,
    #[serde(rename = "tau_by_P", default)]
    pub tau_by_p: Vec<TauLevel>,
    #[serde(default)]
    pub policy: Option<DeferralPolicy>,
    pub reflection: ReflectionMeta,
    pub embedding: EmbeddingMeta,
    pub features: FeatureOptions,
    pub label_set: LabelSet,
    pub model_roster: Vec<String>,
}

impl Artifact {
    /// Smoothed weights stored for the level closest to `p`.
    pub fn alpha_near(&self, p: f64) -> Option<[f64; 3]> {
        self.alpha_by_p
            .iter()
            .min_by(|a, b| (a.p - p).abs().total_cmp(&(b.p - p).abs()))
            .map(|l| l.alpha)
    }
}

pub fn save_artifact(path: impl AsRef<Path>, artifact: &Artifact) -> Result<()> {
    write_json(path, artifact)
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<Artifact> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_artifact(&text)
}

pub fn parse_artifact(text: &str) -> Result<Artifact> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if found != ARTIFACT_VERSION {
        return Err(Error::ArtifactVersion {
            found: found.to_string(),
            expected: ARTIFACT_VERSION.to_string(),
        });
    }
    Ok(serde_json::from_str(text)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
