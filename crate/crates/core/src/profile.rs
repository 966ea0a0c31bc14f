//! Bias profiling over a manifest: person preference, self-similarity and
//! gender-classification recall per gender, plus the equality of
//! opportunity table for occupation-labelled records.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::embedding::{read_embeddings, EmbeddingError, EmbeddingMatrix};
use crate::manifest::{Gender, ManifestRecord};
use crate::report::{
    assemble_report, equality_of_opportunity_table, self_similarity, BiasReport, GroupMetric, OccupationSamples,
    OpportunityTable, ReportError, ReportProvenance,
};
use crate::zeroshot::{classify_zero_shot, per_class_recall, person_preference, PromptSet, ZeroShotError};

pub const PERSON_LABEL: &str = "person";
pub const GENDER_LABELS: [&str; 2] = ["man", "woman"];

pub const METRIC_PERSON_PREFERENCE: &str = "person_preference";
pub const METRIC_PERSON_PREFERENCE_TIES: &str = "person_preference_ties";
pub const METRIC_SELF_SIMILARITY: &str = "self_similarity";
pub const METRIC_GENDER_CLASSIFICATION: &str = "gender_classification";

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("record {id:?}: no embedding (no embedding_ref and not in the default embedding file)")]
    Unresolved { id: String },
    #[error("record {id:?}: embedding row {row} out of range for {path} ({rows} rows)")]
    RowOutOfRange {
        id: String,
        row: usize,
        path: PathBuf,
        rows: usize,
    },
    #[error("record {id:?}: {source}")]
    Embedding {
        id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("prompt file lacks label {0:?}")]
    MissingPrompt(String),
    #[error("record {id:?}: occupation {occupation:?} has no prompt")]
    UnknownOccupation { id: String, occupation: String },
    #[error("group {0:?} has no records")]
    EmptyGroup(&'static str),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    EmbeddingFile(#[from] EmbeddingError),
}

/// Records that take part in profiling: people with a known gender.
pub fn profiled_records(records: &[ManifestRecord]) -> Vec<&ManifestRecord> {
    records
        .iter()
        .filter(|r| r.has_person && r.gender != Gender::Unknown)
        .collect()
}

/// Collects one embedding row per record, keyed by record id.
///
/// A record's `embedding_ref` is resolved relative to `base_dir`; records
/// without one are looked up by id in `fallback`.
pub fn resolve_embeddings(
    records: &[&ManifestRecord],
    base_dir: &Path,
    fallback: Option<&EmbeddingMatrix>,
) -> Result<EmbeddingMatrix, ProfileError> {
    let mut files: HashMap<PathBuf, EmbeddingMatrix> = HashMap::new();
    let mut dim = fallback.map(EmbeddingMatrix::dim);
    let mut data = Vec::new();
    let mut ids = Vec::with_capacity(records.len());
    for r in records {
        let row: Vec<f32> = match &r.embedding_ref {
            Some(eref) => {
                let path = base_dir.join(&eref.path);
                if !files.contains_key(&path) {
                    let m = read_embeddings(&path).map_err(|source| ProfileError::Embedding {
                        id: r.id.clone(),
                        source,
                    })?;
                    files.insert(path.clone(), m);
                }
                let m = &files[&path];
                if eref.row >= m.n_rows() {
                    return Err(ProfileError::RowOutOfRange {
                        id: r.id.clone(),
                        row: eref.row,
                        path,
                        rows: m.n_rows(),
                    });
                }
                m.row(eref.row).to_vec()
            }
            None => {
                let m = fallback.ok_or_else(|| ProfileError::Unresolved { id: r.id.clone() })?;
                let i = m
                    .index_of(&r.id)
                    .ok_or_else(|| ProfileError::Unresolved { id: r.id.clone() })?;
                m.row(i).to_vec()
            }
        };
        let d = *dim.get_or_insert(row.len());
        if d != row.len() {
            return Err(ProfileError::Embedding {
                id: r.id.clone(),
                source: EmbeddingError::RowLength { got: row.len(), dim: d },
            });
        }
        data.extend(row);
        ids.push(r.id.clone());
    }
    Ok(EmbeddingMatrix::new(dim.unwrap_or(1), data, ids)?)
}

#[derive(Debug, Clone)]
pub struct ProfileConfig {
    pub dataset: String,
    pub include_diagonal: bool,
    /// Restricts the equality of opportunity table to these occupations.
    pub occupations: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone)]
pub struct ProfileOutput {
    pub metrics: Vec<GroupMetric>,
    pub opportunity: OpportunityTable,
}

fn prompt_row<'a>(prompts: &'a PromptSet, label: &str) -> Result<&'a [f32], ProfileError> {
    let i = prompts
        .index_of(label)
        .ok_or_else(|| ProfileError::MissingPrompt(label.to_string()))?;
    Ok(prompts.embeddings().row(i))
}

/// Computes every per-gender measure. `embeddings` must hold one row per
/// profiled record, with the record id as row id.
pub fn profile(
    records: &[&ManifestRecord],
    embeddings: &EmbeddingMatrix,
    prompts: &PromptSet,
    config: &ProfileConfig,
) -> Result<ProfileOutput, ProfileError> {
    let person = prompt_row(prompts, PERSON_LABEL)?;
    let mut metrics = Vec::new();

    for (gender, label) in [(Gender::Man, GENDER_LABELS[0]), (Gender::Woman, GENDER_LABELS[1])] {
        let ids: Vec<&str> = records
            .iter()
            .filter(|r| r.gender == gender)
            .map(|r| r.id.as_str())
            .collect();
        if ids.is_empty() {
            return Err(ProfileError::EmptyGroup(label));
        }
        let group = embeddings.slice_by_ids(&ids)?;
        let pref = person_preference(&group, person, prompt_row(prompts, label)?)?;
        metrics.push(GroupMetric::new(
            label,
            METRIC_PERSON_PREFERENCE,
            pref.fraction(),
            pref.total,
        ));
        metrics.push(GroupMetric::new(
            label,
            METRIC_PERSON_PREFERENCE_TIES,
            pref.ties as f64 / pref.total as f64,
            pref.total,
        ));
        let ss = self_similarity(&group, config.include_diagonal)?;
        metrics.push(GroupMetric::new(label, METRIC_SELF_SIMILARITY, ss, ids.len()));
    }

    let gender_prompts = prompts.select(&GENDER_LABELS)?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let all = embeddings.slice_by_ids(&ids)?;
    let result = classify_zero_shot(&all, &gender_prompts)?;
    let truth: Vec<&str> = records.iter().map(|r| r.gender.as_str()).collect();
    let recalls = per_class_recall(&result, &truth)?;
    for label in GENDER_LABELS {
        if let Some(r) = recalls.get(label) {
            metrics.push(GroupMetric::new(
                label,
                METRIC_GENDER_CLASSIFICATION,
                r.recall,
                r.support,
            ));
        }
    }

    let opportunity = occupation_table(records, embeddings, prompts, config)?;
    Ok(ProfileOutput { metrics, opportunity })
}

fn occupation_table(
    records: &[&ManifestRecord],
    embeddings: &EmbeddingMatrix,
    prompts: &PromptSet,
    config: &ProfileConfig,
) -> Result<OpportunityTable, ProfileError> {
    let occupation_labels: Vec<&str> = prompts
        .labels()
        .iter()
        .map(String::as_str)
        .filter(|l| *l != PERSON_LABEL && !GENDER_LABELS.contains(l))
        .collect();
    let wanted = |occ: &str| config.occupations.as_ref().is_none_or(|s| s.contains(occ));

    let mut grouped: BTreeMap<String, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in records {
        let Some(occ) = r.occupation.as_deref() else { continue };
        if !wanted(occ) {
            continue;
        }
        if !occupation_labels.contains(&occ) {
            return Err(ProfileError::UnknownOccupation {
                id: r.id.clone(),
                occupation: occ.to_string(),
            });
        }
        grouped.entry(occ.to_string()).or_default().push(r);
    }
    if grouped.is_empty() {
        return Ok(equality_of_opportunity_table(&BTreeMap::new())?);
    }

    let occ_prompts = prompts.select(&occupation_labels)?;
    let mut per_occupation = BTreeMap::new();
    for (occ, recs) in grouped {
        let ids: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
        let result = classify_zero_shot(&embeddings.slice_by_ids(&ids)?, &occ_prompts)?;
        per_occupation.insert(
            occ.clone(),
            OccupationSamples {
                result,
                truth: vec![occ; recs.len()],
                genders: recs.iter().map(|r| r.gender).collect(),
            },
        );
    }
    Ok(equality_of_opportunity_table(&per_occupation)?)
}

/// Profiles and assembles the report with man/woman disparities.
pub fn profile_report(
    records: &[&ManifestRecord],
    embeddings: &EmbeddingMatrix,
    prompts: &PromptSet,
    config: &ProfileConfig,
    provenance: ReportProvenance,
) -> Result<(BiasReport, OpportunityTable), ProfileError> {
    let out = profile(records, embeddings, prompts, config)?;
    let report = assemble_report(
        &config.dataset,
        out.metrics,
        out.opportunity.rows.clone(),
        provenance,
        (GENDER_LABELS[0], GENDER_LABELS[1]),
    )?;
    Ok((report, out.opportunity))
}
