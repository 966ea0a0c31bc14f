//! Zero-shot cosine classification and the measures built on it: person
//! preference, per-class recall and retrieval recall@k.
//!
//! All similarities are cosine similarities accumulated in `f64`. Ties are
//! broken toward the lower index.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{row_norm, EmbeddingError, EmbeddingMatrix};

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("zero vector in cosine similarity")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("duplicate prompt label {0:?}")]
    DuplicateLabel(String),
    #[error("{labels} labels for {rows} prompt rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("prompt set is empty")]
    NoPrompts,
    #[error("unknown truth label {0:?}")]
    UnknownLabel(String),
    #[error("{truth} truth entries for {samples} samples")]
    TruthLength { truth: usize, samples: usize },
    #[error("k = {k} invalid for gallery of {gallery}")]
    BadK { k: usize, gallery: usize },
    #[error("truth index {index} out of range for gallery of {gallery}")]
    TruthOutOfRange { index: usize, gallery: usize },
    #[error("no samples")]
    Empty,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Literal prompt template.
pub fn prompt_text(value: &str) -> String {
    format!("A photo of a {value}")
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, ZeroShotError> {
    if a.len() != b.len() {
        return Err(ZeroShotError::DimMismatch(a.len(), b.len()));
    }
    let (na, nb) = (row_norm(a), row_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ZeroShotError::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Class labels with one unit-normalized prompt embedding each.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    labels: Vec<String>,
    embeddings: EmbeddingMatrix,
}

impl PromptSet {
    pub fn new(labels: Vec<String>, embeddings: &EmbeddingMatrix) -> Result<Self, ZeroShotError> {
        if labels.len() != embeddings.n_rows() {
            return Err(ZeroShotError::LabelCount {
                labels: labels.len(),
                rows: embeddings.n_rows(),
            });
        }
        if labels.is_empty() {
            return Err(ZeroShotError::NoPrompts);
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(ZeroShotError::DuplicateLabel(l.clone()));
            }
        }
        let unit = embeddings.l2_normalize()?;
        let embeddings = EmbeddingMatrix::new(unit.dim(), unit.as_slice().to_vec(), labels.clone())?;
        Ok(Self { labels, embeddings })
    }

    /// Uses the matrix ids as labels.
    pub fn from_matrix(embeddings: &EmbeddingMatrix) -> Result<Self, ZeroShotError> {
        Self::new(embeddings.ids().to_vec(), embeddings)
    }

    /// Subset of labels, in the given order.
    pub fn select<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self, ZeroShotError> {
        let sub = self.embeddings.slice_by_ids(labels)?;
        Self::new(labels.iter().map(|l| l.as_ref().to_string()).collect(), &sub)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub index: usize,
    pub similarities: Vec<f64>,
    /// Another prompt reached the same maximal similarity.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationResult {
    pub labels: Vec<String>,
    pub predictions: Vec<Prediction>,
}

impl ClassificationResult {
    pub fn predicted_label(&self, sample: usize) -> &str {
        &self.labels[self.predictions[sample].index]
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn tie_count(&self) -> usize {
        self.predictions.iter().filter(|p| p.tie).count()
    }
}

fn argmax_first(values: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    let tie = values.iter().enumerate().any(|(i, &v)| i != best && v == values[best]);
    (best, tie)
}

/// Predicts, per image row, the prompt with highest cosine similarity.
pub fn classify_zero_shot(
    images: &EmbeddingMatrix,
    prompts: &PromptSet,
) -> Result<ClassificationResult, ZeroShotError> {
    if images.dim() != prompts.dim() {
        return Err(ZeroShotError::DimMismatch(images.dim(), prompts.dim()));
    }
    let unit = images.l2_normalize()?;
    let predictions = (0..unit.n_rows())
        .into_par_iter()
        .map(|i| {
            let img = unit.row(i);
            let similarities: Vec<f64> = prompts.embeddings.rows().map(|p| dot(img, p)).collect();
            let (index, tie) = argmax_first(&similarities);
            Prediction {
                index,
                similarities,
                tie,
            }
        })
        .collect();
    Ok(ClassificationResult {
        labels: prompts.labels.clone(),
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PersonPreference {
    /// Images strictly closer to the person prompt.
    pub preferred: usize,
    /// Images equidistant from both prompts; not counted as preference.
    pub ties: usize,
    pub total: usize,
}

impl PersonPreference {
    pub fn fraction(&self) -> f64 {
        self.preferred as f64 / self.total as f64
    }
}

/// Share of images whose cosine similarity to `person_prompt` is strictly
/// greater than to `attribute_prompt`.
pub fn person_preference(
    images: &EmbeddingMatrix,
    person_prompt: &[f32],
    attribute_prompt: &[f32],
) -> Result<PersonPreference, ZeroShotError> {
    for p in [person_prompt, attribute_prompt] {
        if p.len() != images.dim() {
            return Err(ZeroShotError::DimMismatch(images.dim(), p.len()));
        }
        if row_norm(p) == 0.0 {
            return Err(ZeroShotError::ZeroVector);
        }
    }
    if images.is_empty() {
        return Err(ZeroShotError::Empty);
    }
    let outcomes: Vec<std::cmp::Ordering> = images
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|img| {
            let sp = cosine_similarity(img, person_prompt)?;
            let sa = cosine_similarity(img, attribute_prompt)?;
            Ok(sp.total_cmp(&sa))
        })
        .collect::<Result<_, ZeroShotError>>()?;
    Ok(PersonPreference {
        preferred: outcomes.iter().filter(|o| o.is_gt()).count(),
        ties: outcomes.iter().filter(|o| o.is_eq()).count(),
        total: outcomes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassRecall {
    pub correct: usize,
    pub support: usize,
    pub recall: f64,
}

/// Recall per truth class; classes without samples are omitted.
pub fn per_class_recall<S: AsRef<str>>(
    result: &ClassificationResult,
    truth: &[S],
) -> Result<BTreeMap<String, ClassRecall>, ZeroShotError> {
    if truth.len() != result.len() {
        return Err(ZeroShotError::TruthLength {
            truth: truth.len(),
            samples: result.len(),
        });
    }
    let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (i, t) in truth.iter().enumerate() {
        let t = t.as_ref();
        if !result.labels.iter().any(|l| l == t) {
            return Err(ZeroShotError::UnknownLabel(t.to_string()));
        }
        let e = tallies.entry(t.to_string()).or_default();
        e.1 += 1;
        if result.predicted_label(i) == t {
            e.0 += 1;
        }
    }
    Ok(tallies
        .into_iter()
        .map(|(label, (correct, support))| {
            (
                label,
                ClassRecall {
                    correct,
                    support,
                    recall: correct as f64 / support as f64,
                },
            )
        })
        .collect())
}

/// Whether each query's truth gallery row ranks within the top `k` by
/// cosine similarity (ties ranked by lower gallery index).
pub fn retrieval_hits(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    truth: &[usize],
    k: usize,
) -> Result<Vec<bool>, ZeroShotError> {
    if queries.dim() != gallery.dim() {
        return Err(ZeroShotError::DimMismatch(queries.dim(), gallery.dim()));
    }
    if k == 0 || k > gallery.n_rows() {
        return Err(ZeroShotError::BadK {
            k,
            gallery: gallery.n_rows(),
        });
    }
    if truth.len() != queries.n_rows() {
        return Err(ZeroShotError::TruthLength {
            truth: truth.len(),
            samples: queries.n_rows(),
        });
    }
    if let Some(&index) = truth.iter().find(|&&t| t >= gallery.n_rows()) {
        return Err(ZeroShotError::TruthOutOfRange {
            index,
            gallery: gallery.n_rows(),
        });
    }
    let q = queries.l2_normalize()?;
    let g = gallery.l2_normalize()?;
    Ok((0..q.n_rows())
        .into_par_iter()
        .map(|i| {
            let qi = q.row(i);
            let t = truth[i];
            let target = dot(qi, g.row(t));
            let ahead = g
                .rows()
                .enumerate()
                .filter(|&(j, row)| {
                    let s = dot(qi, row);
                    s > target || (s == target && j < t)
                })
                .count();
            ahead < k
        })
        .collect())
}

pub fn recall_at_k(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    truth: &[usize],
    k: usize,
) -> Result<f64, ZeroShotError> {
    let hits = retrieval_hits(queries, gallery, truth, k)?;
    if hits.is_empty() {
        return Err(ZeroShotError::Empty);
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupRecall {
    pub hits: usize,
    pub support: usize,
    pub recall: f64,
}

impl GroupRecall {
    fn from_hits<'a>(hits: impl Iterator<Item = &'a bool>) -> Self {
        let (mut h, mut n) = (0, 0);
        for &x in hits {
            n += 1;
            h += usize::from(x);
        }
        Self {
            hits: h,
            support: n,
            recall: h as f64 / n as f64,
        }
    }
}

/// Retrieval recall overall and per attribute group. A query may belong to
/// several groups (e.g. a gender, an age band and a skin tone).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub all: GroupRecall,
    pub groups: BTreeMap<String, GroupRecall>,
}

pub fn retrieval_report(hits: &[bool], groups: &[Vec<String>], k: usize) -> Result<RetrievalReport, ZeroShotError> {
    if hits.is_empty() {
        return Err(ZeroShotError::Empty);
    }
    if groups.len() != hits.len() {
        return Err(ZeroShotError::TruthLength {
            truth: groups.len(),
            samples: hits.len(),
        });
    }
    let mut members: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (h, gs) in hits.iter().zip(groups) {
        for g in gs {
            members.entry(g.as_str()).or_default().push(*h);
        }
    }
    Ok(RetrievalReport {
        k,
        all: GroupRecall::from_hits(hits.iter()),
        groups: members
            .into_iter()
            .map(|(g, hs)| (g.to_string(), GroupRecall::from_hits(hs.iter())))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows_anonymous(rows).unwrap()
    }

    fn prompts(labels: &[&str], rows: &[Vec<f32>]) -> PromptSet {
        PromptSet::new(labels.iter().map(|s| s.to_string()).collect(), &m(rows)).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ZeroShotError::ZeroVector)
        ));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn classify_picks_matching_prompt() {
        let p = prompts(
            &["a", "b", "c"],
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        );
        let imgs = m(&[vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.3, 0.0, 0.0]]);
        let r = classify_zero_shot(&imgs, &p).unwrap();
        let labels: Vec<_> = (0..3).map(|i| r.predicted_label(i)).collect();
        assert_eq!(labels, ["b", "c", "a"]);
        assert_eq!(r.tie_count(), 0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = prompts(&["a", "b"], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = classify_zero_shot(&m(&[vec![1.0, 1.0]]), &p).unwrap();
        assert_eq!(r.predictions[0].index, 0);
        assert!(r.predictions[0].tie);
    }

    #[test]
    fn prompt_set_invariants() {
        let e = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(PromptSet::new(vec!["a".into(), "a".into()], &e).is_err());
        assert!(PromptSet::new(vec!["a".into()], &e).is_err());
        let p = PromptSet::new(vec!["x".into(), "y".into()], &m(&[vec![3.0, 4.0], vec![0.0, 2.0]])).unwrap();
        assert!((f64::from(p.embeddings().row(0)[0]) - 0.6).abs() < 1e-7);
        assert_eq!(p.select(&["y"]).unwrap().labels(), ["y"]);
        assert_eq!(prompt_text("woman"), "A photo of a woman");
    }

    #[test]
    fn person_preference_extremes() {
        let person = [1.0, 0.0];
        let woman = [0.0, 1.0];
        let all_person = m(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(person_preference(&all_person, &person, &woman).unwrap().fraction(), 1.0);
        let all_attr = m(&[vec![0.0, 1.0], vec![0.0, 5.0]]);
        assert_eq!(person_preference(&all_attr, &person, &woman).unwrap().fraction(), 0.0);
        let tie = m(&[vec![1.0, 1.0]]);
        let pp = person_preference(&tie, &person, &woman).unwrap();
        assert_eq!((pp.preferred, pp.ties), (0, 1));
        assert!(person_preference(&tie, &[0.0, 0.0], &woman).is_err());
    }

    #[test]
    fn recall_counts() {
        let p = prompts(&["a", "b"], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let imgs = m(&[
            vec![1.0, 0.1],
            vec![0.1, 1.0],
            vec![1.0, 0.2],
            vec![0.3, 1.0],
            vec![0.0, 1.0],
        ]);
        let r = classify_zero_shot(&imgs, &p).unwrap();
        // predictions: a b a b b ; truth: a a a a b
        let rec = per_class_recall(&r, &["a", "a", "a", "a", "b"]).unwrap();
        assert_eq!(rec["a"].recall, 0.5);
        assert_eq!(rec["a"].support, 4);
        assert_eq!(rec["b"].recall, 1.0);
        assert!(matches!(
            per_class_recall(&r, &["a", "a", "a", "a", "z"]),
            Err(ZeroShotError::UnknownLabel(_))
        ));
        assert!(per_class_recall(&r, &["a"]).is_err());
        let only_a = per_class_recall(&r, &["a"; 5]).unwrap();
        assert!(!only_a.contains_key("b"));
    }

    #[test]
    fn retrieval_examples() {
        let gallery = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = m(&[vec![1.0, 0.0]]);
        assert_eq!(recall_at_k(&q, &gallery, &[0], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&q, &gallery, &[1], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&q, &gallery, &[1], 2).unwrap(), 1.0);
        assert!(matches!(
            recall_at_k(&q, &gallery, &[0], 3),
            Err(ZeroShotError::BadK { .. })
        ));
        assert!(recall_at_k(&q, &gallery, &[5], 1).is_err());
        // equal similarity: lower index ranks first
        let dup = m(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(recall_at_k(&q, &dup, &[1], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&q, &dup, &[0], 1).unwrap(), 1.0);
    }

    #[test]
    fn retrieval_groups() {
        let hits = [true, false, true, true];
        let groups = vec![
            vec!["man".to_string(), "young".to_string()],
            vec!["woman".to_string()],
            vec!["woman".to_string(), "young".to_string()],
            vec![],
        ];
        let r = retrieval_report(&hits, &groups, 1).unwrap();
        assert_eq!(r.all.recall, 0.75);
        assert_eq!(r.groups["woman"].recall, 0.5);
        assert_eq!(r.groups["young"].support, 2);
        assert_eq!(r.groups["man"].hits, 1);
    }
}
