//! Group-level bias measures and the serialized audit report.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dist::RealismMetrics;
use crate::embedding::{row_norm, EmbeddingError, EmbeddingMatrix};
use crate::manifest::Gender;
use crate::summation::pairwise_sum;
use crate::zeroshot::{per_class_recall, ClassificationResult, Prediction, ZeroShotError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("self-similarity needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("metric {metric:?} has no {group:?} group")]
    MissingGroup { metric: String, group: String },
    #[error("metric {metric:?} for group {group:?} has zero support")]
    ZeroSupport { metric: String, group: String },
    #[error("occupation {occupation:?}: {samples} samples but {genders} gender labels")]
    GenderLength {
        occupation: String,
        samples: usize,
        genders: usize,
    },
    #[error("cannot digest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
}

/// Mean cosine similarity over unordered distinct pairs `i < j`. With
/// `include_diagonal` the mean runs over the full `n x n` similarity matrix
/// instead, self-pairs included.
pub fn self_similarity(group: &EmbeddingMatrix, include_diagonal: bool) -> Result<f64, ReportError> {
    let n = group.n_rows();
    if n < 2 {
        return Err(ReportError::TooFewRows(n));
    }
    let rows: Vec<&[f32]> = group.rows().collect();
    let mut norms = Vec::with_capacity(n);
    for (i, r) in rows.iter().enumerate() {
        let norm = row_norm(r);
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroNorm { row: i }.into());
        }
        norms.push(norm);
    }
    let cos = |i: usize, j: usize| {
        let dot: f64 = rows[i]
            .iter()
            .zip(rows[j])
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        dot / norms[i] / norms[j]
    };
    let upper: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vals: Vec<f64> = (i + 1..n).map(|j| cos(i, j)).collect();
            pairwise_sum(&vals)
        })
        .collect();
    let upper_sum = pairwise_sum(&upper);
    if include_diagonal {
        let diag: Vec<f64> = (0..n).map(|i| cos(i, i)).collect();
        let n = n as f64;
        Ok((2.0 * upper_sum + pairwise_sum(&diag)) / (n * n))
    } else {
        let n = n as f64;
        Ok(upper_sum / (n * (n - 1.0) / 2.0))
    }
}

pub fn disparity(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetric {
    pub group: String,
    pub metric: String,
    pub value: f64,
    pub support: usize,
}

impl GroupMetric {
    pub fn new(group: &str, metric: &str, value: f64, support: usize) -> Self {
        Self {
            group: group.to_string(),
            metric: metric.to_string(),
            value,
            support,
        }
    }
}

/// Per-occupation samples: zero-shot predictions, truth labels and the
/// gender of each sample.
#[derive(Debug, Clone)]
pub struct OccupationSamples {
    pub result: ClassificationResult,
    pub truth: Vec<String>,
    pub genders: Vec<Gender>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupationDisparity {
    pub name: String,
    pub recall_men: f64,
    pub recall_women: f64,
    pub disparity: f64,
}

impl OccupationDisparity {
    pub fn from_recalls(name: &str, recall_men: f64, recall_women: f64) -> Self {
        Self {
            name: name.to_string(),
            recall_men,
            recall_women,
            disparity: disparity(recall_men, recall_women),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpportunityTable {
    pub rows: Vec<OccupationDisparity>,
    pub total_disparity: f64,
    /// Occupations dropped because a gender had no samples.
    pub excluded: Vec<String>,
}

fn gender_recall(name: &str, samples: &OccupationSamples, gender: Gender) -> Result<Option<f64>, ReportError> {
    let idx: Vec<usize> = (0..samples.genders.len())
        .filter(|&i| samples.genders[i] == gender)
        .collect();
    let sub = ClassificationResult {
        labels: samples.result.labels.clone(),
        predictions: idx
            .iter()
            .map(|&i| samples.result.predictions[i].clone())
            .collect::<Vec<Prediction>>(),
    };
    let truth: Vec<&str> = idx.iter().map(|&i| samples.truth[i].as_str()).collect();
    let recalls = per_class_recall(&sub, &truth)?;
    Ok(recalls.get(name).map(|r| r.recall))
}

/// Per-gender recall of each occupation's own class, and the sum of the
/// per-occupation disparities.
pub fn equality_of_opportunity_table(
    per_occupation: &BTreeMap<String, OccupationSamples>,
) -> Result<OpportunityTable, ReportError> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (name, samples) in per_occupation {
        if samples.genders.len() != samples.result.len() {
            return Err(ReportError::GenderLength {
                occupation: name.clone(),
                samples: samples.result.len(),
                genders: samples.genders.len(),
            });
        }
        match (
            gender_recall(name, samples, Gender::Man)?,
            gender_recall(name, samples, Gender::Woman)?,
        ) {
            (Some(m), Some(w)) => rows.push(OccupationDisparity::from_recalls(name, m, w)),
            _ => excluded.push(name.clone()),
        }
    }
    let total_disparity = pairwise_sum(&rows.iter().map(|r| r.disparity).collect::<Vec<_>>());
    Ok(OpportunityTable {
        rows,
        total_disparity,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of_file(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| ReportError::Io {
            path: display.clone(),
            source,
        })?;
        Ok(Self {
            path: display,
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportProvenance {
    pub inputs: Vec<InputDigest>,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub dataset: String,
    pub metrics: Vec<GroupMetric>,
    pub disparities: BTreeMap<String, f64>,
    pub occupations: Vec<OccupationDisparity>,
    pub provenance: ReportProvenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realism: Option<RealismMetrics>,
}

impl BiasReport {
    /// Pretty JSON with a trailing newline. Field order is fixed by the
    /// struct and map keys are sorted.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Builds the report and derives `|a - b|` for every metric that has a
/// value for either group of `pair`.
pub fn assemble_report(
    dataset: &str,
    metrics: Vec<GroupMetric>,
    occupations: Vec<OccupationDisparity>,
    provenance: ReportProvenance,
    pair: (&str, &str),
) -> Result<BiasReport, ReportError> {
    let mut by_metric: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for m in &metrics {
        if m.support == 0 {
            return Err(ReportError::ZeroSupport {
                metric: m.metric.clone(),
                group: m.group.clone(),
            });
        }
        by_metric
            .entry(m.metric.as_str())
            .or_default()
            .insert(m.group.as_str(), m.value);
    }
    let mut disparities = BTreeMap::new();
    for (metric, groups) in &by_metric {
        if !groups.contains_key(pair.0) && !groups.contains_key(pair.1) {
            continue;
        }
        let get = |g: &str| {
            groups.get(g).copied().ok_or_else(|| ReportError::MissingGroup {
                metric: metric.to_string(),
                group: g.to_string(),
            })
        };
        disparities.insert(metric.to_string(), disparity(get(pair.0)?, get(pair.1)?));
    }
    Ok(BiasReport {
        dataset: dataset.to_string(),
        metrics,
        disparities,
        occupations,
        provenance,
        realism: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zeroshot::{classify_zero_shot, PromptSet};

    fn m(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows_anonymous(rows).unwrap()
    }

    #[test]
    fn self_similarity_examples() {
        assert!((self_similarity(&m(&vec![vec![0.3, 0.4]; 5]), false).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            self_similarity(&m(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false).unwrap(),
            0.0
        );
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let s = self_similarity(&m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]), false).unwrap();
        // (0 + 1/sqrt2 + 1/sqrt2) / 3
        assert!((s - 2.0 / 2f64.sqrt() / 3.0).abs() < 1e-6);
        assert!(matches!(
            self_similarity(&m(&[vec![1.0]]), false),
            Err(ReportError::TooFewRows(1))
        ));
    }

    #[test]
    fn diagonal_variant() {
        // orthogonal pair: full matrix [[1,0],[0,1]] has mean 0.5
        let s = self_similarity(&m(&[vec![1.0, 0.0], vec![0.0, 1.0]]), true).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disparity_examples() {
        assert_eq!(format!("{:.2}", disparity(78.39, 92.82)), "14.43");
        assert_eq!(format!("{:.3}", disparity(0.433, 0.504)), "0.071");
        assert_eq!(disparity(3.5, 3.5), 0.0);
    }

    fn occ_samples(name: &str, preds_correct: &[(Gender, bool)]) -> OccupationSamples {
        let prompts = PromptSet::new(
            vec![name.to_string(), "other".to_string()],
            &m(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        )
        .unwrap();
        let imgs: Vec<Vec<f32>> = preds_correct
            .iter()
            .map(|&(_, ok)| if ok { vec![1.0, 0.1] } else { vec![0.1, 1.0] })
            .collect();
        OccupationSamples {
            result: classify_zero_shot(&m(&imgs), &prompts).unwrap(),
            truth: vec![name.to_string(); preds_correct.len()],
            genders: preds_correct.iter().map(|p| p.0).collect(),
        }
    }

    #[test]
    fn opportunity_table() {
        use Gender::*;
        let mut input = BTreeMap::new();
        input.insert(
            "nurse".to_string(),
            occ_samples("nurse", &[(Man, true), (Man, false), (Woman, true)]),
        );
        input.insert(
            "dancer".to_string(),
            occ_samples("dancer", &[(Man, true), (Woman, true)]),
        );
        input.insert("pilot".to_string(), occ_samples("pilot", &[(Man, true)]));
        let t = equality_of_opportunity_table(&input).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0], OccupationDisparity::from_recalls("dancer", 1.0, 1.0));
        assert_eq!(t.rows[1], OccupationDisparity::from_recalls("nurse", 0.5, 1.0));
        assert_eq!(t.total_disparity, 0.5);
        assert_eq!(t.excluded, ["pilot"]);
        let d = OccupationDisparity::from_recalls("Dancer", 50.70, 58.43);
        assert_eq!(format!("{:.2}", d.disparity), "7.73");
    }

    #[test]
    fn assemble_and_serialize() {
        let metrics = vec![
            GroupMetric::new("man", "self_similarity", 0.525, 10),
            GroupMetric::new("woman", "self_similarity", 0.592, 12),
        ];
        let r = assemble_report(
            "ours",
            metrics.clone(),
            vec![],
            ReportProvenance::default(),
            ("man", "woman"),
        )
        .unwrap();
        assert_eq!(format!("{:.3}", r.disparities["self_similarity"]), "0.067");
        let again = assemble_report("ours", metrics, vec![], ReportProvenance::default(), ("man", "woman")).unwrap();
        assert_eq!(r.to_json(), again.to_json());

        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        for k in ["dataset", "metrics", "disparities", "occupations", "provenance"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn empty_and_incomplete_reports() {
        let r = assemble_report("x", vec![], vec![], ReportProvenance::default(), ("man", "woman")).unwrap();
        assert!(r.metrics.is_empty() && r.disparities.is_empty());
        let err = assemble_report(
            "x",
            vec![GroupMetric::new("man", "m", 1.0, 1)],
            vec![],
            ReportProvenance::default(),
            ("man", "woman"),
        )
        .unwrap_err();
        assert!(matches!(err, ReportError::MissingGroup { .. }));
        assert!(assemble_report(
            "x",
            vec![GroupMetric::new("man", "m", 1.0, 0)],
            vec![],
            ReportProvenance::default(),
            ("man", "woman"),
        )
        .is_err());
    }

    #[test]
    fn digest_of_known_bytes() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
