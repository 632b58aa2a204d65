//! Ranking metrics and evaluation protocols: un-interpolated average
//! precision, classification mAP with scene-text subset filters, and
//! leave-one-out query-by-example retrieval with cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::tensor::Tensor;

/// Which test bundles an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    #[default]
    All,
    WithText,
    WithoutText,
}

impl Subset {
    pub fn admits(&self, has_text: bool) -> bool {
        match self {
            Subset::All => true,
            Subset::WithText => has_text,
            Subset::WithoutText => !has_text,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub protocol: String,
    pub subset: Subset,
    /// per-class (classification) or per-query (retrieval) AP values
    pub ap: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    /// set when the AP list came out empty and map is omitted
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub warning_empty: bool,
    pub num_items: usize,
    /// retrieval queries whose class had no other member
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_queries: Vec<String>,
}

impl EvaluationReport {
    fn from_aps(protocol: &str, subset: Subset, ap: Vec<f64>, num_items: usize, skipped: Vec<String>) -> Self {
        let map = if ap.is_empty() { None } else { Some(ap.iter().sum::<f64>() / ap.len() as f64) };
        EvaluationReport {
            protocol: protocol.to_string(),
            subset,
            warning_empty: ap.is_empty(),
            ap,
            map,
            num_items,
            skipped_queries: skipped,
        }
    }
}

/// Un-interpolated information-retrieval AP: rank by descending score
/// (ties broken by ascending original index), then average precision at
/// each relevant rank.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::Eval(format!("{} scores vs {} relevance flags", scores.len(), relevance.len())));
    }
    let total_relevant = relevance.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return Err(Error::Eval("average_precision: no relevant items".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j].partial_cmp(&scores[i]).expect("finite scores").then(i.cmp(&j))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if relevance[idx] {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / total_relevant as f64)
}

/// Classification mAP: one AP per class with scores = that class's
/// probability and relevance = (label == class). Classes with no positive
/// in the subset are excluded from the mean.
pub fn evaluate_classification(model: &Model, inputs: &[ModelInput], subset: Subset) -> Result<EvaluationReport> {
    let selected: Vec<&ModelInput> = inputs.iter().filter(|i| subset.admits(i.has_text)).collect();
    if selected.is_empty() {
        return Err(Error::Eval(format!("subset {subset:?} is empty")));
    }
    let mut score_rows = Vec::with_capacity(selected.len());
    for input in &selected {
        score_rows.push(model.descriptor(input)?);
    }
    let labels: Vec<usize> = selected.iter().map(|i| i.label).collect();
    let report = classification_map_from_scores(&score_rows, &labels, model.num_classes)?;
    Ok(EvaluationReport::from_aps("classification", subset, report, selected.len(), Vec::new()))
}

/// Per-class AP from precomputed score rows; split out so tests can drive
/// it with fixed score tables.
pub fn classification_map_from_scores(
    score_rows: &[Tensor],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let relevance: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if !relevance.iter().any(|&r| r) {
            continue;
        }
        let scores: Vec<f64> = score_rows.iter().map(|r| r.data()[class]).collect();
        aps.push(average_precision(&scores, &relevance)?);
    }
    Ok(aps)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Leave-one-out query-by-example retrieval over the test split: every
/// bundle queries the rest, ranked by cosine similarity of descriptors;
/// relevance is class membership. Queries whose class has no other member
/// are skipped and reported.
pub fn evaluate_retrieval(model: &Model, inputs: &[ModelInput]) -> Result<EvaluationReport> {
    if inputs.len() < 2 {
        return Err(Error::Eval("retrieval needs at least 2 bundles".into()));
    }
    let mut descriptors = Vec::with_capacity(inputs.len());
    for input in inputs {
        descriptors.push(model.descriptor(input)?.into_data());
    }
    let labels: Vec<usize> = inputs.iter().map(|i| i.label).collect();
    let ids: Vec<String> = inputs.iter().map(|i| i.id.clone()).collect();
    let (aps, skipped) = retrieval_aps_from_descriptors(&descriptors, &labels, &ids)?;
    Ok(EvaluationReport::from_aps("retrieval", Subset::All, aps, inputs.len(), skipped))
}

pub fn retrieval_aps_from_descriptors(
    descriptors: &[Vec<f64>],
    labels: &[usize],
    ids: &[String],
) -> Result<(Vec<f64>, Vec<String>)> {
    let n = descriptors.len();
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for q in 0..n {
        let others: Vec<usize> = (0..n).filter(|&i| i != q).collect();
        if !others.iter().any(|&i| labels[i] == labels[q]) {
            skipped.push(ids[q].clone());
            continue;
        }
        let scores: Vec<f64> = others.iter().map(|&i| cosine_similarity(&descriptors[q], &descriptors[i])).collect();
        let relevance: Vec<bool> = others.iter().map(|&i| labels[i] == labels[q]).collect();
        aps.push(average_precision(&scores, &relevance)?);
    }
    Ok((aps, skipped))
}
