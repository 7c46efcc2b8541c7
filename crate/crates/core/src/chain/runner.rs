//! Runs the chain for every roster model on one or many instances.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{ChatClient, ChatRequest};
use super::template::{ChainStage, PromptTemplate, TemplateSet};
use super::transcript::TranscriptStore;
use crate::model::{EnsembleTrace, Label, LabelSet, ModelOutput, Stage};
use crate::{Error, Result};

/// One instance to run through the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainInput {
    pub instance_id: String,
    pub data_ref: String,
    /// Empty means the runner's default side information.
    #[serde(default)]
    pub side_info_c: String,
    #[serde(default)]
    pub true_label: Option<Label>,
    #[serde(default)]
    pub strata_tag: Option<String>,
}

pub fn load_inputs(path: impl AsRef<Path>) -> Result<Vec<ChainInput>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let input: ChainInput = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(input.instance_id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate instance_id `{}`", input.instance_id),
            });
        }
        out.push(input);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    /// Task statement bound to `{task_T}`.
    pub task: String,
    pub default_side_info: String,
    pub roster: Vec<String>,
    pub labels: LabelSet,
    /// Upper bound on concurrent requests.
    pub max_in_flight: usize,
}

/// Renders `template` and sends it through the store.
pub fn run_stage(
    client: Option<&dyn ChatClient>,
    store: &TranscriptStore,
    template: &PromptTemplate,
    model_id: &str,
    bindings: &BTreeMap<&str, &str>,
) -> Result<String> {
    let prompt = template.render(bindings)?;
    let request = ChatRequest::user(model_id, prompt);
    store.exchange(client, model_id, template.stage, &request)
}

pub struct ChainRunner<'a> {
    pub client: Option<&'a dyn ChatClient>,
    pub store: &'a TranscriptStore,
    pub templates: &'a TemplateSet,
    pub settings: &'a ChainSettings,
}

/// Endpoint and extraction failures become stage markers; anything else
/// (a replay miss, a bad template binding) aborts the run.
fn soft<T>(r: Result<T>, model_id: &str, stage: ChainStage, instance: &str) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::Http(_) | Error::Extraction(_))) => {
            log::warn!("{instance}: model `{model_id}` failed {stage}: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

impl ChainRunner<'_> {
    fn run_model(&self, input: &ChainInput, model_id: &str) -> Result<ModelOutput> {
        let id = input.instance_id.as_str();
        let task = self.settings.task.as_str();
        let side = if input.side_info_c.trim().is_empty() {
            self.settings.default_side_info.as_str()
        } else {
            input.side_info_c.as_str()
        };
        let stage = |t: &PromptTemplate, b: &BTreeMap<&str, &str>| {
            soft(run_stage(self.client, self.store, t, model_id, b), model_id, t.stage, id)
        };

        let mut out = ModelOutput {
            model_id: model_id.to_string(),
            x: None,
            z: None,
            h_tilde: None,
            h: None,
            stage_failures: BTreeSet::new(),
        };
        let base = BTreeMap::from([("data_ref", input.data_ref.as_str()), ("task_T", task), ("c", side)]);

        out.x = stage(&self.templates.comprehension, &base)?;
        if let Some(x) = out.x.as_deref() {
            let mut b = base.clone();
            b.insert("x", x);
            out.z = stage(&self.templates.analysis, &b)?;
        }
        if let Some(z) = out.z.as_deref() {
            let ext = self.templates.analysis.extract(z, &self.settings.labels);
            out.h_tilde = soft(ext, model_id, ChainStage::Analysis, id)?;
        }
        if let (Some(x), Some(z), Some(h_tilde)) = (out.x.as_deref(), out.z.as_deref(), out.h_tilde.as_ref()) {
            let mut b = base.clone();
            b.insert("x", x);
            b.insert("z", z);
            b.insert("h_tilde", h_tilde.as_str());
            if let Some(resp) = stage(&self.templates.reflection, &b)? {
                let ext = self.templates.reflection.extract(&resp, &self.settings.labels);
                out.h = soft(ext, model_id, ChainStage::Reflection, id)?;
            }
        }
        Ok(out.with_implicit_failures())
    }

    /// Runs every roster model on one instance. Models are isolated: a
    /// failure in one only marks its own stages.
    pub fn run_chain(&self, input: &ChainInput) -> Result<EnsembleTrace> {
        let outputs = self
            .settings
            .roster
            .par_iter()
            .map(|m| self.run_model(input, m))
            .collect::<Result<Vec<_>>>()?;
        if outputs.iter().all(|o| o.stage_failures.len() == Stage::ALL.len()) {
            return Err(Error::ChainFailed(input.instance_id.clone()));
        }
        Ok(EnsembleTrace {
            instance_id: input.instance_id.clone(),
            data_ref: input.data_ref.clone(),
            side_info_c: input.side_info_c.clone(),
            true_label: input.true_label.clone(),
            strata_tag: input.strata_tag.clone(),
            outputs,
        })
    }

    /// Runs all instances with at most `max_in_flight` concurrent requests.
    /// Results keep input order.
    pub fn run_all(&self, inputs: &[ChainInput]) -> Result<Vec<Result<EnsembleTrace>>> {
        if self.settings.roster.len() < 2 {
            return Err(Error::invalid("the chain needs at least two models"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.settings.max_in_flight.max(1))
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(pool.install(|| inputs.par_iter().map(|i| self.run_chain(i)).collect()))
    }
}
