//! Domain types shared by the whole pipeline.
//!
//! A [`Dataset`] is a batch of [`EnsembleTrace`]s, one per instance. Each
//! trace holds one [`ModelOutput`] per roster model, in roster order. A model
//! that failed to produce a stage keeps an explicit marker for it in
//! `stage_failures` instead of being dropped, so similarity masks can be
//! rebuilt deterministically downstream.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Categorical class identifier drawn from a dataset's declared label set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(String);

impl Label {
    pub fn new(value: impl Into<String>) -> Self {
        Label(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label(s.to_string())
    }
}

/// Output fields of one model's reasoning chain. Serialized names match the
/// field names of the trace schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "x")]
    Description,
    #[serde(rename = "z")]
    Reasoning,
    #[serde(rename = "h_tilde")]
    InitialHypothesis,
    #[serde(rename = "h")]
    FinalDecision,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Description,
        Stage::Reasoning,
        Stage::InitialHypothesis,
        Stage::FinalDecision,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Stage::Description => "x",
            Stage::Reasoning => "z",
            Stage::InitialHypothesis => "h_tilde",
            Stage::FinalDecision => "h",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub model_id: String,
    #[serde(default)]
    pub x: Option<String>,
    #[serde(default)]
    pub z: Option<String>,
    #[serde(default)]
    pub h_tilde: Option<Label>,
    #[serde(default)]
    pub h: Option<Label>,
    #[serde(default)]
    pub stage_failures: BTreeSet<Stage>,
}

impl ModelOutput {
    /// A model with every stage marked failed.
    pub fn failed(model_id: impl Into<String>) -> Self {
        ModelOutput {
            model_id: model_id.into(),
            x: None,
            z: None,
            h_tilde: None,
            h: None,
            stage_failures: Stage::ALL.into_iter().collect(),
        }
    }

    fn field_present(&self, stage: Stage) -> bool {
        match stage {
            Stage::Description => self.x.is_some(),
            Stage::Reasoning => self.z.is_some(),
            Stage::InitialHypothesis => self.h_tilde.is_some(),
            Stage::FinalDecision => self.h.is_some(),
        }
    }

    pub fn has(&self, stage: Stage) -> bool {
        !self.stage_failures.contains(&stage) && self.field_present(stage)
    }

    pub fn description(&self) -> Option<&str> {
        self.has(Stage::Description).then(|| self.x.as_deref()).flatten()
    }

    pub fn reasoning(&self) -> Option<&str> {
        self.has(Stage::Reasoning).then(|| self.z.as_deref()).flatten()
    }

    pub fn initial_hypothesis(&self) -> Option<&Label> {
        self.has(Stage::InitialHypothesis)
            .then_some(self.h_tilde.as_ref())
            .flatten()
    }

    pub fn final_decision(&self) -> Option<&Label> {
        self.has(Stage::FinalDecision)
            .then_some(self.h.as_ref())
            .flatten()
    }

    /// Adds a failure marker for every absent field so the marker set fully
    /// describes which stages are missing.
    pub fn with_implicit_failures(mut self) -> Self {
        for stage in Stage::ALL {
            if !self.field_present(stage) {
                self.stage_failures.insert(stage);
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTrace {
    pub instance_id: String,
    #[serde(default)]
    pub data_ref: String,
    #[serde(default)]
    pub side_info_c: String,
    #[serde(default)]
    pub true_label: Option<Label>,
    #[serde(default)]
    pub strata_tag: Option<String>,
    pub outputs: Vec<ModelOutput>,
}

impl EnsembleTrace {
    /// Final decisions of every model that produced one.
    pub fn votes(&self) -> Vec<Label> {
        self.outputs
            .iter()
            .filter_map(|o| o.final_decision().cloned())
            .collect()
    }
}

/// Declared finite label set. `positive` names the anomalous class of a
/// binary task; it drives recall/F1 and majority-vote tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: BTreeSet<Label>,
    #[serde(default)]
    pub positive: Option<Label>,
}

const POSITIVE_NAMES: [&str; 7] = [
    "abnormal",
    "anomaly",
    "anomalous",
    "positive",
    "1",
    "yes",
    "true",
];

impl LabelSet {
    pub fn new<I, L>(labels: I, positive: Option<Label>) -> Self
    where
        I: IntoIterator<Item = L>,
        L: Into<Label>,
    {
        LabelSet {
            labels: labels.into_iter().map(Into::into).collect(),
            positive,
        }
    }

    /// Builds a set from observed labels, guessing the positive class of a
    /// binary task from conventional names.
    pub fn infer<'a>(observed: impl IntoIterator<Item = &'a Label>) -> Self {
        let labels: BTreeSet<Label> = observed.into_iter().cloned().collect();
        let positive = if labels.len() == 2 {
            POSITIVE_NAMES
                .iter()
                .map(|n| Label::new(*n))
                .find(|l| labels.contains(l))
        } else {
            None
        };
        LabelSet { labels, positive }
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.labels.contains(label)
    }

    pub fn is_binary(&self) -> bool {
        self.labels.len() == 2 && self.positive.is_some()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub traces: Vec<EnsembleTrace>,
    pub label_set: LabelSet,
    pub model_roster: Vec<String>,
}

impl Dataset {
    /// Assembles a dataset, inferring the roster (first-seen order) and the
    /// label set when they are not declared, then aligns every trace to the
    /// roster. Models absent from a trace get all-stage failure markers.
    pub fn from_traces(
        traces: Vec<EnsembleTrace>,
        label_set: Option<LabelSet>,
        roster: Option<Vec<String>>,
    ) -> Self {
        let model_roster = roster.unwrap_or_else(|| infer_roster(&traces));
        let label_set = label_set.unwrap_or_else(|| {
            let observed = traces.iter().flat_map(|t| {
                t.true_label.iter().chain(
                    t.outputs
                        .iter()
                        .flat_map(|o| o.h_tilde.iter().chain(o.h.iter())),
                )
            });
            LabelSet::infer(observed)
        });
        let traces = traces
            .into_iter()
            .map(|t| align_trace(t, &model_roster))
            .collect();
        Dataset {
            traces,
            label_set,
            model_roster,
        }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn model_count(&self) -> usize {
        self.model_roster.len()
    }

    /// Same roster and label set, restricted to the given trace indices.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
            label_set: self.label_set.clone(),
            model_roster: self.model_roster.clone(),
        }
    }

    /// Count of traces per strata tag (untagged traces count under "").
    pub fn strata_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.traces {
            *counts
                .entry(t.strata_tag.clone().unwrap_or_default())
                .or_insert(0) += 1;
        }
        counts
    }
}

fn infer_roster(traces: &[EnsembleTrace]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut roster = Vec::new();
    for t in traces {
        for o in &t.outputs {
            if seen.insert(o.model_id.clone()) {
                roster.push(o.model_id.clone());
            }
        }
    }
    roster
}

fn align_trace(mut trace: EnsembleTrace, roster: &[String]) -> EnsembleTrace {
    let mut by_id: BTreeMap<String, ModelOutput> = BTreeMap::new();
    let mut extras = Vec::new();
    for o in trace.outputs.drain(..) {
        if roster.contains(&o.model_id) && !by_id.contains_key(&o.model_id) {
            by_id.insert(o.model_id.clone(), o.with_implicit_failures());
        } else {
            extras.push(o);
        }
    }
    let mut outputs: Vec<ModelOutput> = roster
        .iter()
        .map(|id| {
            by_id
                .remove(id)
                .unwrap_or_else(|| ModelOutput::failed(id.clone()))
        })
        .collect();
    // Unknown or duplicated models stay visible to validation.
    outputs.extend(extras);
    trace.outputs = outputs;
    trace
}

/// One structural problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateInstance { instance_id: String },
    MissingModel { instance_id: String, model_id: String },
    UnknownModel { instance_id: String, model_id: String },
    DuplicateModel { instance_id: String, model_id: String },
    RosterOrder { instance_id: String },
    TooFewModels { count: usize },
    LabelOutsideSet { instance_id: String, label: Label },
    MarkerConflict {
        instance_id: String,
        model_id: String,
        stage: Stage,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateInstance { instance_id } => {
                write!(f, "duplicate instance_id `{instance_id}`")
            }
            Violation::MissingModel {
                instance_id,
                model_id,
            } => write!(f, "instance `{instance_id}` is missing model `{model_id}`"),
            Violation::UnknownModel {
                instance_id,
                model_id,
            } => write!(
                f,
                "instance `{instance_id}` has model `{model_id}` outside the roster"
            ),
            Violation::DuplicateModel {
                instance_id,
                model_id,
            } => write!(f, "instance `{instance_id}` repeats model `{model_id}`"),
            Violation::RosterOrder { instance_id } => {
                write!(f, "instance `{instance_id}` outputs are not in roster order")
            }
            Violation::TooFewModels { count } => {
                write!(f, "roster has {count} models, at least 2 are required")
            }
            Violation::LabelOutsideSet { instance_id, label } => {
                write!(f, "instance `{instance_id}` uses label `{label}` outside the label set")
            }
            Violation::MarkerConflict {
                instance_id,
                model_id,
                stage,
            } => write!(
                f,
                "instance `{instance_id}` model `{model_id}` marks stage `{stage}` failed but carries a value"
            ),
        }
    }
}

/// Checks every structural invariant of a dataset. The report is empty iff
/// the dataset is well formed.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let roster = &dataset.model_roster;
    if roster.len() < 2 {
        out.push(Violation::TooFewModels {
            count: roster.len(),
        });
    }
    let mut ids = HashSet::new();
    for trace in &dataset.traces {
        let iid = &trace.instance_id;
        if !ids.insert(iid.as_str()) {
            out.push(Violation::DuplicateInstance {
                instance_id: iid.clone(),
            });
        }

        let mut seen_models = HashSet::new();
        for o in &trace.outputs {
            if !seen_models.insert(o.model_id.as_str()) {
                out.push(Violation::DuplicateModel {
                    instance_id: iid.clone(),
                    model_id: o.model_id.clone(),
                });
            } else if !roster.contains(&o.model_id) {
                out.push(Violation::UnknownModel {
                    instance_id: iid.clone(),
                    model_id: o.model_id.clone(),
                });
            }
            for &stage in &o.stage_failures {
                if o.field_present(stage) {
                    out.push(Violation::MarkerConflict {
                        instance_id: iid.clone(),
                        model_id: o.model_id.clone(),
                        stage,
                    });
                }
            }
            for label in o.h_tilde.iter().chain(o.h.iter()) {
                if !dataset.label_set.contains(label) {
                    out.push(Violation::LabelOutsideSet {
                        instance_id: iid.clone(),
                        label: label.clone(),
                    });
                }
            }
        }
        let missing: Vec<&String> = roster
            .iter()
            .filter(|m| !seen_models.contains(m.as_str()))
            .collect();
        for m in &missing {
            out.push(Violation::MissingModel {
                instance_id: iid.clone(),
                model_id: (*m).clone(),
            });
        }
        if missing.is_empty() {
            let in_order = trace
                .outputs
                .iter()
                .zip(roster.iter())
                .all(|(o, m)| &o.model_id == m);
            if !in_order {
                out.push(Violation::RosterOrder {
                    instance_id: iid.clone(),
                });
            }
        }
        if let Some(label) = &trace.true_label {
            if !dataset.label_set.contains(label) {
                out.push(Violation::LabelOutsideSet {
                    instance_id: iid.clone(),
                    label: label.clone(),
                });
            }
        }
    }
    out
}
