//! Few-shot classification against a labeled support set.
//!
//! A query is embedded, its squared distance to every support embedding is
//! computed, distances are averaged per class, and the class with the
//! smallest mean wins. Distances are averaged, not embeddings.

use serde::{Deserialize, Serialize};

use crate::dataset::HitLabel;
use crate::embedding::EmbeddingNet;
use crate::error::{Error, Result};

/// Allowed deviation from unit norm for cached and query embeddings.
const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    /// Id of the pattern the embedding was computed from.
    pub source_id: u64,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportClass {
    pub label: HitLabel,
    pub entries: Vec<SupportEntry>,
}

/// Immutable once built; classes keep their registration order, which is
/// also the tie-break order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    classes: Vec<SupportClass>,
    dim: usize,
}

/// One labeled frame offered as support.
#[derive(Clone, Copy, Debug)]
pub struct LabeledFrame<'a> {
    pub label: HitLabel,
    pub source_id: u64,
    pub image: &'a [f32],
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
}

impl SupportSet {
    /// Groups precomputed embeddings by label, in order of first appearance.
    pub fn from_embeddings(items: impl IntoIterator<Item = (HitLabel, SupportEntry)>) -> Result<Self> {
        let mut classes: Vec<SupportClass> = Vec::new();
        let mut dim = None;
        for (label, entry) in items {
            let d = *dim.get_or_insert(entry.embedding.len());
            if entry.embedding.len() != d {
                return Err(Error::shape("support_set", format!("embedding of length {} among length {d}", entry.embedding.len())));
            }
            let n = norm(&entry.embedding);
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Invalid(format!("support {} has norm {n}, expected 1", entry.source_id)));
            }
            match classes.iter_mut().find(|c| c.label == label) {
                Some(c) => c.entries.push(entry),
                None => classes.push(SupportClass { label, entries: vec![entry] }),
            }
        }
        match dim {
            Some(dim) if dim > 0 => Ok(Self { classes, dim }),
            _ => Err(Error::Invalid("support set needs at least one non-empty embedding".into())),
        }
    }

    pub fn classes(&self) -> &[SupportClass] {
        &self.classes
    }

    pub fn labels(&self) -> Vec<HitLabel> {
        self.classes.iter().map(|c| c.label).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn shots(&self, label: HitLabel) -> usize {
        self.classes.iter().find(|c| c.label == label).map_or(0, |c| c.entries.len())
    }

    /// Every class has the same number of supports.
    pub fn is_balanced(&self) -> bool {
        self.classes.windows(2).all(|w| w[0].entries.len() == w[1].entries.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistance {
    pub label: HitLabel,
    /// Mean squared distance to this class's supports.
    pub mean: f64,
    /// Squared distance to each support, in support order.
    pub per_support: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub predicted: HitLabel,
    /// Position of the predicted class in the support set.
    pub predicted_index: usize,
    pub distances: Vec<ClassDistance>,
    /// Another class had exactly the same minimal mean distance.
    pub tie: bool,
}

impl ClassificationResult {
    pub fn mean_distance(&self, label: HitLabel) -> Option<f64> {
        self.distances.iter().find(|c| c.label == label).map(|c| c.mean)
    }
}

/// Embeds every frame once and groups the embeddings by label.
pub fn build_support_set(model: &EmbeddingNet<f32>, frames: &[LabeledFrame<'_>]) -> Result<SupportSet> {
    if frames.is_empty() {
        return Err(Error::Invalid("cannot build a support set from no patterns".into()));
    }
    let images: Vec<&[f32]> = frames.iter().map(|f| f.image).collect();
    let emb = model.embed_frames(&images)?;
    SupportSet::from_embeddings(frames.iter().enumerate().map(|(i, f)| {
        (f.label, SupportEntry { source_id: f.source_id, embedding: emb.row(i).to_vec() })
    }))
}

pub fn classify(query: &[f32], support: &SupportSet) -> Result<ClassificationResult> {
    if query.len() != support.dim {
        return Err(Error::shape("classify", format!("query of length {}, supports of length {}", query.len(), support.dim)));
    }
    let n = norm(query);
    if (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::Invalid(format!("query has norm {n}, expected 1")));
    }
    let distances: Vec<ClassDistance> = support
        .classes
        .iter()
        .map(|c| {
            let per_support: Vec<f64> = c
                .entries
                .iter()
                .map(|e| query.iter().zip(&e.embedding).map(|(&q, &s)| (f64::from(q) - f64::from(s)).powi(2)).sum())
                .collect();
            let mean = per_support.iter().sum::<f64>() / per_support.len() as f64;
            ClassDistance { label: c.label, mean, per_support }
        })
        .collect();
    let mut best = 0;
    for (i, c) in distances.iter().enumerate().skip(1) {
        if c.mean < distances[best].mean {
            best = i;
        }
    }
    let tie = distances.iter().enumerate().any(|(i, c)| i != best && c.mean == distances[best].mean);
    Ok(ClassificationResult { predicted: distances[best].label, predicted_index: best, distances, tie })
}

/// Embeds one raw frame and classifies it.
pub fn classify_pattern(model: &EmbeddingNet<f32>, image: &[f32], support: &SupportSet) -> Result<ClassificationResult> {
    let emb = model.embed_frames(&[image])?;
    classify(emb.row(0), support)
}
