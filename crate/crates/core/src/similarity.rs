//! Pairwise similarity matrices `W` (instances × model pairs) with their
//! observation masks `A`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingVector};
use crate::linalg::{dot, norm};
use crate::model::{Dataset, EnsembleTrace, Label};
use crate::{Error, Result};

/// Unordered model pairs `(j, k)`, `j < k`, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndex {
    pub m: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(format!(
                "pairwise similarity needs at least 2 models, got {m}"
            )));
        }
        let pairs = (0..m)
            .flat_map(|j| (j + 1..m).map(move |k| (j, k)))
            .collect();
        Ok(PairIndex { m, pairs })
    }

    /// `L = M(M−1)/2`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    cosine_slices(u.values(), v.values())
}

pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with dims {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// One partially observed row. Unobserved entries hold 0.0 and are never
/// read by any consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl SimRow {
    pub fn unobserved(len: usize) -> Self {
        SimRow {
            values: vec![0.0; len],
            observed: vec![false; len],
        }
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Similarity row over the given per-model embeddings; a pair is observed
/// when both embeddings exist and `include(j, k)` holds.
pub fn similarity_row(
    embeddings: &[Option<&EmbeddingVector>],
    pairs: &PairIndex,
    include: impl Fn(usize, usize) -> bool,
) -> Result<SimRow> {
    let mut row = SimRow::unobserved(pairs.len());
    for (l, &(j, k)) in pairs.pairs.iter().enumerate() {
        if let (Some(a), Some(b)) = (embeddings[j], embeddings[k]) {
            if include(j, k) {
                row.values[l] = cosine(a, b)?;
                row.observed[l] = true;
            }
        }
    }
    Ok(row)
}

/// Row-major partially observed matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedMatrix {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl MaskedMatrix {
    pub fn from_rows(rows: &[SimRow]) -> Result<Self> {
        let cols = rows.first().map_or(0, SimRow::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("rows of unequal length"));
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        let mut observed = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            for (v, &o) in r.values.iter().zip(&r.observed) {
                values.push(if o { *v } else { 0.0 });
                observed.push(o);
            }
        }
        Ok(MaskedMatrix {
            rows: rows.len(),
            cols,
            values,
            observed,
        })
    }

    /// Dense matrix with every entry observed.
    pub fn full(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        MaskedMatrix {
            rows,
            cols,
            values,
            observed: vec![true; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols || observed.len() != rows * cols {
            return Err(Error::invalid("matrix buffers do not match its shape"));
        }
        let values = values
            .into_iter()
            .zip(&observed)
            .map(|(v, &o)| if o { v } else { 0.0 })
            .collect();
        Ok(MaskedMatrix {
            rows,
            cols,
            values,
            observed,
        })
    }

    pub fn get(&self, i: usize, l: usize) -> Option<f64> {
        let idx = i * self.cols + l;
        self.observed[idx].then_some(self.values[idx])
    }

    pub fn is_observed(&self, i: usize, l: usize) -> bool {
        self.observed[i * self.cols + l]
    }

    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.observed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row(&self, i: usize) -> SimRow {
        SimRow {
            values: self.row_values(i).to_vec(),
            observed: self.row_mask(i).to_vec(),
        }
    }

    /// Hides an entry from every consumer.
    pub fn mask_out(&mut self, i: usize, l: usize) {
        let idx = i * self.cols + l;
        self.observed[idx] = false;
        self.values[idx] = 0.0;
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Row subset in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> MaskedMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        let mut observed = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            values.extend_from_slice(self.row_values(i));
            observed.extend_from_slice(self.row_mask(i));
        }
        MaskedMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
            observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub matrix: MaskedMatrix,
    pub pair_index: PairIndex,
    pub instance_ids: Vec<String>,
}

impl SimilarityMatrix {
    /// CSV dump: `instance_id,pair_j,pair_k,w,observed`, one line per cell.
    /// Unobserved cells carry an empty `w`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["instance_id", "pair_j", "pair_k", "w", "observed"])?;
        for (i, id) in self.instance_ids.iter().enumerate() {
            for (l, &(j, k)) in self.pair_index.pairs.iter().enumerate() {
                let w = self.matrix.get(i, l).map(|v| v.to_string()).unwrap_or_default();
                let obs = if self.matrix.is_observed(i, l) { "1" } else { "0" };
                out.write_record([id.as_str(), &j.to_string(), &k.to_string(), &w, obs])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Which stage text a similarity matrix compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextStage {
    Description,
    Reasoning,
}

/// Rule deciding which reasoning pairs enter the matrix for hypothesis `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningRule {
    /// Pair `(j, k)` is observed for `h` iff both models emitted initial
    /// hypothesis `h`.
    #[default]
    SharedHypothesis,
}

impl ConditioningRule {
    pub fn admits(self, hypotheses: &[Option<&Label>], label: &Label, j: usize, k: usize) -> bool {
        match self {
            ConditioningRule::SharedHypothesis => {
                hypotheses[j] == Some(label) && hypotheses[k] == Some(label)
            }
        }
    }
}

fn stage_embeddings(
    trace: &EnsembleTrace,
    stage: TextStage,
    embedder: &Embedder,
) -> Result<Vec<Option<EmbeddingVector>>> {
    trace
        .outputs
        .iter()
        .map(|o| {
            let text = match stage {
                TextStage::Description => o.description(),
                TextStage::Reasoning => o.reasoning(),
            };
            text.map(|t| {
                embedder.embed(t).map_err(|e| {
                    Error::Embedding(format!(
                        "instance `{}` model `{}` stage {:?}: {e}",
                        trace.instance_id, o.model_id, stage
                    ))
                })
            })
            .transpose()
        })
        .collect()
}

pub fn build_similarity_matrix(
    dataset: &Dataset,
    stage: TextStage,
    embedder: &Embedder,
) -> Result<SimilarityMatrix> {
    let pairs = PairIndex::new(dataset.model_count())?;
    let rows = dataset
        .traces
        .iter()
        .map(|t| {
            let embs = stage_embeddings(t, stage, embedder)?;
            let refs: Vec<Option<&EmbeddingVector>> = embs.iter().map(Option::as_ref).collect();
            similarity_row(&refs, &pairs, |_, _| true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityMatrix {
        matrix: MaskedMatrix::from_rows(&rows)?,
        pair_index: pairs,
        instance_ids: dataset.traces.iter().map(|t| t.instance_id.clone()).collect(),
    })
}

/// One reasoning-similarity matrix per label of the dataset's label set.
pub fn build_hypothesis_conditioned_matrices(
    dataset: &Dataset,
    embedder: &Embedder,
    rule: ConditioningRule,
) -> Result<BTreeMap<Label, SimilarityMatrix>> {
    let pairs = PairIndex::new(dataset.model_count())?;
    let per_trace: Vec<Vec<Option<EmbeddingVector>>> = dataset
        .traces
        .iter()
        .map(|t| stage_embeddings(t, TextStage::Reasoning, embedder))
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for label in &dataset.label_set.labels {
        let rows = dataset
            .traces
            .iter()
            .zip(&per_trace)
            .map(|(t, embs)| {
                let hyps: Vec<Option<&Label>> =
                    t.outputs.iter().map(|o| o.initial_hypothesis()).collect();
                let refs: Vec<Option<&EmbeddingVector>> = embs.iter().map(Option::as_ref).collect();
                similarity_row(&refs, &pairs, |j, k| rule.admits(&hyps, label, j, k))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(
            label.clone(),
            SimilarityMatrix {
                matrix: MaskedMatrix::from_rows(&rows)?,
                pair_index: pairs.clone(),
                instance_ids: dataset.traces.iter().map(|t| t.instance_id.clone()).collect(),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn pair_index_shapes() {
        assert_eq!(PairIndex::new(2).unwrap().pairs, vec![(0, 1)]);
        assert_eq!(PairIndex::new(5).unwrap().len(), 10);
        assert_eq!(
            PairIndex::new(4).unwrap().pairs,
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        );
        assert!(PairIndex::new(1).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn missing_text_masks_its_pairs() {
        let pairs = PairIndex::new(3).unwrap();
        let a = v(&[1.0, 0.0]);
        let row = similarity_row(&[Some(&a), Some(&a), None], &pairs, |_, _| true).unwrap();
        assert_eq!(row.observed, vec![true, false, false]);
        assert_eq!(row.values[0], 1.0);
    }

    #[test]
    fn mask_out_hides_entry() {
        let mut m = MaskedMatrix::full(1, 2, vec![0.5, 0.25]);
        m.mask_out(0, 1);
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.observed_count(), 1);
    }
}
