//! From traces to scores: featurization, fitting of the frozen uncertainty
//! model, cross-fitting for weight search, and the full training procedure
//! that produces an artifact.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingVector};
use crate::model::{Dataset, EnsembleTrace, Label, LabelSet};
use crate::pmf::{fit_pmf, select_k, KSelection, PmfOptions, DEFAULT_LAMBDA};
use crate::scores::{
    s_data, s_ref, s_task, ConditionedRow, NormStats, RawScores, ReflectionClassifier, UQProfile,
    DEFAULT_L2, DEFAULT_MAX_ITER,
};
use crate::seed::{derive_seed, rng_for};
use crate::selective::{majority_vote, optimize_p, threshold_from_quantile, DeferralPolicy, Level, PChoice};
use crate::similarity::{similarity_row, ConditioningRule, MaskedMatrix, PairIndex, SimRow};
use crate::store::{
    kfold_partition, AlphaLevel, Artifact, EmbeddingMeta, FoldAssignment, ReflectionMeta, TauLevel,
    ARTIFACT_VERSION,
};
use crate::weights::{simplex_grid, weight_trajectory, ScoredInstance, WeightTrajectory};
use crate::{Error, Result};

/// How hypotheses and side information become embeddable text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// Text embedded for a hypothesis; `{label}` is replaced by its name.
    pub hypothesis_template: String,
    /// Side information for traces that carry none.
    pub default_side_info: String,
    #[serde(default)]
    pub conditioning: ConditioningRule,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            hypothesis_template: "{label}".into(),
            default_side_info: "no side information".into(),
            conditioning: ConditioningRule::SharedHypothesis,
        }
    }
}

impl FeatureOptions {
    pub fn hypothesis_text(&self, label: &Label) -> String {
        self.hypothesis_template.replace("{label}", label.as_str())
    }

    pub fn side_info<'a>(&'a self, trace: &'a EnsembleTrace) -> &'a str {
        if trace.side_info_c.trim().is_empty() {
            &self.default_side_info
        } else {
            &trace.side_info_c
        }
    }
}

/// Reflection input of one model: `concat(e(c), e(z), e(h̃))`, and whether
/// its final decision differs from its hypothesis when both are known.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionExample {
    pub features: Vec<f64>,
    pub flipped: Option<bool>,
}

/// Everything the scores need from one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFeatures {
    pub instance_id: String,
    pub description: SimRow,
    pub reasoning: SimRow,
    /// One row per hypothesis held by at least one model with reasoning.
    pub conditioned: Vec<(Label, ConditionedRow)>,
    pub reflection: Vec<ReflectionExample>,
    pub votes: Vec<Label>,
    pub true_label: Option<Label>,
    pub strata_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<TraceFeatures>,
    pub pair_index: PairIndex,
    pub label_set: LabelSet,
    pub model_roster: Vec<String>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn featurize(dataset: &Dataset, embedder: &Embedder, opts: &FeatureOptions) -> Result<FeatureSet> {
    let pairs = PairIndex::new(dataset.model_count())?;

    let mut texts: Vec<String> = Vec::new();
    for t in &dataset.traces {
        texts.push(opts.side_info(t).to_string());
        for o in &t.outputs {
            texts.extend(o.description().map(str::to_string));
            texts.extend(o.reasoning().map(str::to_string));
            texts.extend(o.initial_hypothesis().map(|h| opts.hypothesis_text(h)));
        }
    }
    texts.sort();
    texts.dedup();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = embedder.embed_batch(&refs)?;
    let table: HashMap<&str, EmbeddingVector> = refs.iter().copied().zip(vectors).collect();

    let features = dataset
        .traces
        .par_iter()
        .map(|t| trace_features(t, &pairs, &table, opts, &dataset.label_set))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet {
        features,
        pair_index: pairs,
        label_set: dataset.label_set.clone(),
        model_roster: dataset.model_roster.clone(),
    })
}

fn trace_features(
    t: &EnsembleTrace,
    pairs: &PairIndex,
    table: &HashMap<&str, EmbeddingVector>,
    opts: &FeatureOptions,
    labels: &LabelSet,
) -> Result<TraceFeatures> {
    let lookup = |s: &str| table.get(s);
    let desc: Vec<Option<&EmbeddingVector>> =
        t.outputs.iter().map(|o| o.description().and_then(lookup)).collect();
    let reason: Vec<Option<&EmbeddingVector>> =
        t.outputs.iter().map(|o| o.reasoning().and_then(lookup)).collect();
    let hyps: Vec<Option<&Label>> = t.outputs.iter().map(|o| o.initial_hypothesis()).collect();

    let description = similarity_row(&desc, pairs, |_, _| true)?;
    let reasoning = similarity_row(&reason, pairs, |_, _| true)?;

    let mut conditioned = Vec::new();
    for label in &labels.labels {
        let models = (0..hyps.len())
            .filter(|&j| hyps[j] == Some(label) && reason[j].is_some())
            .count();
        if models == 0 {
            continue;
        }
        let row = similarity_row(&reason, pairs, |j, k| opts.conditioning.admits(&hyps, label, j, k))?;
        conditioned.push((label.clone(), ConditionedRow { row, models }));
    }

    let c = lookup(opts.side_info(t)).expect("side information was embedded");
    let mut reflection = Vec::new();
    for o in &t.outputs {
        let (Some(z), Some(h0)) = (o.reasoning(), o.initial_hypothesis()) else {
            continue;
        };
        let ez = lookup(z).expect("reasoning was embedded");
        let eh = lookup(&opts.hypothesis_text(h0)).expect("hypothesis was embedded");
        let mut features = Vec::with_capacity(3 * c.dim());
        features.extend_from_slice(c.values());
        features.extend_from_slice(ez.values());
        features.extend_from_slice(eh.values());
        reflection.push(ReflectionExample {
            features,
            flipped: o.final_decision().map(|h| h != h0),
        });
    }

    Ok(TraceFeatures {
        instance_id: t.instance_id.clone(),
        description,
        reasoning,
        conditioned,
        reflection,
        votes: t.votes(),
        true_label: t.true_label.clone(),
        strata_tag: t.strata_tag.clone(),
    })
}

/// Hyperparameters of the uncertainty model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k_candidates: Vec<usize>,
    pub k_folds: usize,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub pmf: PmfOptions,
    pub l2: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_candidates: vec![5, 10, 15],
            k_folds: 5,
            lambda_u: DEFAULT_LAMBDA,
            lambda_v: DEFAULT_LAMBDA,
            pmf: PmfOptions {
                max_iter: 200,
                tol: 1e-7,
                seed: 0,
                restarts: 1,
            },
            l2: DEFAULT_L2,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0,
        }
    }
}

/// The frozen pieces needed to score any trace.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyModel {
    pub v_star_x: DMatrix<f64>,
    pub v_star_z: DMatrix<f64>,
    pub lambda_v: f64,
    pub classifier: ReflectionClassifier,
    pub norm_stats: NormStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub k_x: usize,
    pub k_z: usize,
    pub k_selection_x: Option<KSelection>,
    pub k_selection_z: Option<KSelection>,
    pub pmf_converged: (bool, bool),
    pub reflection_examples: usize,
    pub reflection_flips: usize,
}

fn matrix_of(rows: &[&SimRow]) -> Result<MaskedMatrix> {
    let owned: Vec<SimRow> = rows.iter().map(|r| (*r).clone()).collect();
    MaskedMatrix::from_rows(&owned)
}

/// Candidates that fit the matrix; falls back to the largest feasible rank.
fn feasible_candidates(cands: &[usize], s: &MaskedMatrix) -> Vec<usize> {
    let cap = s.rows.min(s.cols);
    let mut kept: Vec<usize> = cands.iter().copied().filter(|&k| k >= 1 && k <= cap).collect();
    if kept.len() < cands.len() {
        log::info!("latent rank candidates capped at min(N, L) = {cap}");
    }
    if kept.is_empty() {
        kept.push(cap);
    }
    kept
}

fn choose_rank(s: &MaskedMatrix, cfg: &FitConfig, label: &str) -> Result<(usize, Option<KSelection>)> {
    let cands = feasible_candidates(&cfg.k_candidates, s);
    if cands.len() == 1 {
        return Ok((cands[0], None));
    }
    let mut order: Vec<usize> = (0..s.rows).collect();
    order.shuffle(&mut rng_for(cfg.seed, label));
    let mut row_folds = vec![0; s.rows];
    for (pos, &i) in order.iter().enumerate() {
        row_folds[i] = pos % cfg.k_folds.max(2) + 1;
    }
    let sel = select_k(s, &row_folds, &cands, cfg.lambda_u, cfg.lambda_v, &cfg.pmf)?;
    Ok((sel.chosen, Some(sel)))
}

impl UncertaintyModel {
    /// Fits both bases, the flip classifier and the normalization ranges.
    /// `ranks` fixes `(K_x, K_z)`; otherwise they are cross-validated.
    pub fn fit(
        train: &[&TraceFeatures],
        cfg: &FitConfig,
        ranks: Option<(usize, usize)>,
    ) -> Result<(Self, FitReport)> {
        if train.is_empty() {
            return Err(Error::invalid("cannot fit on an empty training set"));
        }
        let wx = matrix_of(&train.iter().map(|f| &f.description).collect::<Vec<_>>())?;
        let wz = matrix_of(&train.iter().map(|f| &f.reasoning).collect::<Vec<_>>())?;

        let ((k_x, sel_x), (k_z, sel_z)) = match ranks {
            Some((kx, kz)) => ((kx, None), (kz, None)),
            None => (
                choose_rank(&wx, cfg, "k-select-x")?,
                choose_rank(&wz, cfg, "k-select-z")?,
            ),
        };
        let opts = PmfOptions {
            seed: derive_seed(cfg.seed, "pmf"),
            ..cfg.pmf
        };
        let (px, pz) = rayon::join(
            || fit_pmf(&wx, k_x, cfg.lambda_u, cfg.lambda_v, &opts),
            || fit_pmf(&wz, k_z, cfg.lambda_u, cfg.lambda_v, &opts),
        );
        let (px, pz) = (px?, pz?);

        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for f in train {
            for ex in &f.reflection {
                if let Some(y) = ex.flipped {
                    xs.push(ex.features.clone());
                    ys.push(y);
                }
            }
        }
        if xs.is_empty() {
            return Err(Error::invalid(
                "no model in the training set has both an initial hypothesis and a final decision",
            ));
        }
        let classifier = ReflectionClassifier::fit(&xs, &ys, cfg.l2, cfg.max_iter)?;

        let mut model = UncertaintyModel {
            v_star_x: px.v,
            v_star_z: pz.v,
            lambda_v: cfg.lambda_v,
            classifier,
            norm_stats: NormStats::fit(&[]),
        };
        let raws = train
            .par_iter()
            .map(|f| model.raw_scores(f))
            .collect::<Result<Vec<_>>>()?;
        model.norm_stats = NormStats::fit(&raws);

        let report = FitReport {
            k_x,
            k_z,
            k_selection_x: sel_x,
            k_selection_z: sel_z,
            pmf_converged: (px.converged, pz.converged),
            reflection_examples: ys.len(),
            reflection_flips: ys.iter().filter(|&&y| y).count(),
        };
        Ok((model, report))
    }

    pub fn raw_scores(&self, f: &TraceFeatures) -> Result<RawScores> {
        let data = s_data(&f.description, &self.v_star_x, self.lambda_v)?;
        let groups: Vec<ConditionedRow> = f.conditioned.iter().map(|(_, r)| r.clone()).collect();
        let task = s_task(&f.reasoning, &groups, &self.v_star_z, self.lambda_v)?;
        let probs: Vec<f64> = f
            .reflection
            .iter()
            .map(|ex| self.classifier.predict_proba(&ex.features))
            .collect();
        Ok(RawScores {
            data,
            task: task.value,
            refl: s_ref(&probs),
            task_degenerate: task.degenerate,
        })
    }

    pub fn profile(&self, f: &TraceFeatures, alpha: &[f64; 3]) -> Result<UQProfile> {
        UQProfile::new(&f.instance_id, self.raw_scores(f)?, &self.norm_stats, alpha)
    }

    pub fn profiles(&self, features: &[TraceFeatures], alpha: &[f64; 3]) -> Result<Vec<UQProfile>> {
        features.par_iter().map(|f| self.profile(f, alpha)).collect()
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let mat = |rows: &[Vec<f64>], k: usize, name: &str| -> Result<DMatrix<f64>> {
            if rows.iter().any(|r| r.len() != k) {
                return Err(Error::invalid(format!("artifact basis {name} does not have {k} columns")));
            }
            Ok(DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]))
        };
        Ok(UncertaintyModel {
            v_star_x: mat(&a.v_star_x, a.k_x, "V_star_x")?,
            v_star_z: mat(&a.v_star_z, a.k_z, "V_star_z")?,
            lambda_v: a.lambda_v,
            classifier: ReflectionClassifier {
                theta: a.theta.clone(),
                l2_penalty: a.reflection.l2,
                max_iter: a.reflection.max_iter,
                iterations: a.reflection.iterations,
                converged: a.reflection.converged,
            },
            norm_stats: a.norm_stats,
        })
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Held-out instance for weight search and evaluation.
pub fn scored_instance(
    f: &TraceFeatures,
    components: [f64; 3],
    labels: &LabelSet,
) -> Result<ScoredInstance> {
    let label = f
        .true_label
        .clone()
        .ok_or_else(|| Error::invalid(format!("instance `{}` has no true label", f.instance_id)))?;
    Ok(ScoredInstance {
        instance_id: f.instance_id.clone(),
        components,
        prediction: majority_vote(&f.votes, labels),
        label,
    })
}

/// Per fold, refits the uncertainty model on the other folds and scores the
/// held-out instances with that fold's own normalization ranges. Folds are
/// returned in ascending fold order.
pub fn cross_fit(
    set: &FeatureSet,
    row_folds: &[usize],
    cfg: &FitConfig,
    ranks: (usize, usize),
) -> Result<Vec<Vec<ScoredInstance>>> {
    if row_folds.len() != set.len() {
        return Err(Error::invalid("fold assignment does not cover every instance"));
    }
    let mut folds: Vec<usize> = row_folds.to_vec();
    folds.sort_unstable();
    folds.dedup();
    folds
        .par_iter()
        .map(|&k| {
            let train: Vec<&TraceFeatures> = set
                .features
                .iter()
                .zip(row_folds)
                .filter(|(_, &f)| f != k)
                .map(|(t, _)| t)
                .collect();
            let cfg_k = FitConfig {
                seed: derive_seed(cfg.seed, &format!("fold-{k}")),
                ..cfg.clone()
            };
            let (model, _) = UncertaintyModel::fit(&train, &cfg_k, Some(ranks))?;
            set.features
                .iter()
                .zip(row_folds)
                .filter(|(_, &f)| f == k)
                .map(|(t, _)| {
                    let raw = model.raw_scores(t)?;
                    scored_instance(t, model.norm_stats.normalize(&raw), &set.label_set)
                })
                .collect()
        })
        .collect()
}

/// Fold number (1-based) of every instance in dataset order.
pub fn row_folds(dataset: &Dataset, folds: &FoldAssignment) -> Result<Vec<usize>> {
    dataset
        .traces
        .iter()
        .map(|t| {
            folds
                .fold_of(&t.instance_id)
                .ok_or_else(|| Error::invalid(format!("instance `{}` has no fold", t.instance_id)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub fit: FitConfig,
    pub features: FeatureOptions,
    pub cv_folds: usize,
    pub grid_step: f64,
    #[serde(rename = "P_levels")]
    pub p_levels: Vec<f64>,
    pub bandwidth: Option<f64>,
    pub lambda_cost: f64,
    /// `(P_l, P_u)`; defaults to the extreme levels.
    pub bounds: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fit: FitConfig::default(),
            features: FeatureOptions::default(),
            cv_folds: 5,
            grid_step: 0.1,
            p_levels: default_p_levels(),
            bandwidth: None,
            lambda_cost: 0.05,
            bounds: None,
        }
    }
}

/// `{5, 10, …, 40}%`.
pub fn default_p_levels() -> Vec<f64> {
    (1..=8).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: Artifact,
    pub model: UncertaintyModel,
    pub report: FitReport,
    pub folds: FoldAssignment,
    pub cv_scored: Vec<Vec<ScoredInstance>>,
    pub trajectory: WeightTrajectory,
    pub p_choice: PChoice,
}

/// Full training: model fit, cross-fitted weight search per rejection
/// level, smoothing, cost-optimal rejection rate and per-level thresholds.
pub fn train(dataset: &Dataset, embedder: &Embedder, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.p_levels.is_empty() {
        return Err(Error::invalid("at least one rejection level is required"));
    }
    let set = featurize(dataset, embedder, &cfg.features)?;
    let all: Vec<&TraceFeatures> = set.features.iter().collect();
    let (model, report) = UncertaintyModel::fit(&all, &cfg.fit, None)?;

    let folds = kfold_partition(dataset, cfg.cv_folds, derive_seed(cfg.fit.seed, "cv-folds"))?;
    let rf = row_folds(dataset, &folds)?;
    let cv_scored = cross_fit(&set, &rf, &cfg.fit, (report.k_x, report.k_z))?;

    let grid = simplex_grid(cfg.grid_step)?;
    let trajectory = weight_trajectory(&cfg.p_levels, &cv_scored, &grid, cfg.bandwidth)?;
    let levels: Vec<Level> = trajectory
        .p_levels
        .iter()
        .zip(&trajectory.alpha_smooth)
        .map(|(&p, &alpha)| Level { p, alpha })
        .collect();
    let p_choice = optimize_p(cfg.lambda_cost, &levels, &cv_scored)?;

    let raws = set
        .features
        .par_iter()
        .map(|f| model.raw_scores(f))
        .collect::<Result<Vec<_>>>()?;
    let comps: Vec<[f64; 3]> = raws.iter().map(|r| model.norm_stats.normalize(r)).collect();
    let mut tau_by_p = Vec::new();
    for l in &levels {
        let s: Vec<f64> = comps.iter().map(|c| crate::linalg::dot(c, &l.alpha)).collect();
        tau_by_p.push(TauLevel {
            p: l.p,
            tau: threshold_from_quantile(&s, l.p)?,
        });
    }
    let bounds = cfg.bounds.unwrap_or((levels[0].p, levels[levels.len() - 1].p));
    let tau_star = tau_by_p
        .iter()
        .find(|t| t.p == p_choice.p_star)
        .map(|t| t.tau)
        .expect("chosen level has a threshold");
    let policy = DeferralPolicy::new(p_choice.p_star, tau_star, p_choice.alpha, cfg.lambda_cost, bounds)?;

    let artifact = Artifact {
        version: ARTIFACT_VERSION.to_string(),
        v_star_x: rows_of(&model.v_star_x),
        v_star_z: rows_of(&model.v_star_z),
        k_x: report.k_x,
        k_z: report.k_z,
        lambda_u: cfg.fit.lambda_u,
        lambda_v: cfg.fit.lambda_v,
        theta: model.classifier.theta.clone(),
        norm_stats: model.norm_stats,
        alpha_by_p: levels
            .iter()
            .zip(&trajectory.alpha_raw)
            .map(|(l, raw)| AlphaLevel {
                p: l.p,
                alpha_raw: *raw,
                alpha: l.alpha,
            })
            .collect(),
        tau_by_p,
        policy: Some(policy),
        reflection: ReflectionMeta {
            l2: model.classifier.l2_penalty,
            max_iter: model.classifier.max_iter,
            iterations: model.classifier.iterations,
            converged: model.classifier.converged,
        },
        embedding: EmbeddingMeta {
            fingerprint: embedder.fingerprint().to_string(),
            dim: embedder.dim(),
        },
        features: cfg.features.clone(),
        label_set: dataset.label_set.clone(),
        model_roster: dataset.model_roster.clone(),
    };

    Ok(TrainOutcome {
        artifact,
        model,
        report,
        folds,
        cv_scored,
        trajectory,
        p_choice,
    })
}

/// Checks that a dataset and embedder are compatible with an artifact.
pub fn check_compatible(artifact: &Artifact, dataset: &Dataset, embedder: &Embedder) -> Result<()> {
    if artifact.embedding.fingerprint != embedder.fingerprint() {
        return Err(Error::invalid(format!(
            "artifact was fitted with embedder `{}`, not `{}`",
            artifact.embedding.fingerprint,
            embedder.fingerprint()
        )));
    }
    if artifact.model_roster != dataset.model_roster {
        return Err(Error::invalid(format!(
            "model roster {:?} differs from the artifact's {:?}",
            dataset.model_roster, artifact.model_roster
        )));
    }
    Ok(())
}

/// Profiles for every trace of `dataset` under the artifact's frozen model.
/// `alpha` defaults to the policy weights.
pub fn score_dataset(
    artifact: &Artifact,
    dataset: &Dataset,
    embedder: &Embedder,
    alpha: Option<[f64; 3]>,
) -> Result<(FeatureSet, Vec<UQProfile>)> {
    check_compatible(artifact, dataset, embedder)?;
    let alpha = alpha
        .or_else(|| artifact.policy.as_ref().map(|p| p.alpha))
        .unwrap_or([1.0 / 3.0; 3]);
    let model = UncertaintyModel::from_artifact(artifact)?;
    let set = featurize(dataset, embedder, &artifact.features)?;
    let profiles = model.profiles(&set.features, &alpha)?;
    Ok((set, profiles))
}
