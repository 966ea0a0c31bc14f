//! Dataset data model: JSONL manifests, fine-tuning partitions, occupation
//! selection and replacement-fraction dataset versions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{fisher_yates, seeded_rng};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing {field}")]
    MissingField { line: usize, field: &'static str },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?} violates {rule}")]
    Invariant { id: String, rule: &'static str },
    #[error("source id {0:?} has no {1} synthetic counterpart")]
    MissingCounterpart(String, &'static str),
    #[error("replacement fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("occupation table: {0}")]
    Occupations(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Man,
    Woman,
    Unknown,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Man => "man",
            Gender::Woman => "woman",
            Gender::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Gender of the real image a synthetic record was inpainted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceGender {
    Man,
    Woman,
    #[default]
    NotApplicable,
}

impl SourceGender {
    fn matches(self, gender: Gender) -> bool {
        matches!(
            (self, gender),
            (SourceGender::Man, Gender::Man) | (SourceGender::Woman, Gender::Woman)
        )
    }
}

/// Row `row` of the embedding file at `path`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub path: PathBuf,
    pub row: usize,
}

/// One image/caption sample.
///
/// `source_id` links a synthetic record to the real record it was inpainted
/// from. `occupation` is an optional task label used by the equality of
/// opportunity audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub caption: String,
    pub has_person: bool,
    pub gender: Gender,
    pub provenance: Provenance,
    pub source_gender: SourceGender,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<EmbeddingRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupation: Option<String>,
}

impl ManifestRecord {
    /// Checks the provenance/gender invariants of a single record.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let fail = |rule| {
            Err(ManifestError::Invariant {
                id: self.id.clone(),
                rule,
            })
        };
        match self.provenance {
            Provenance::Real if self.source_gender != SourceGender::NotApplicable => {
                fail("real records must have source_gender not_applicable")
            }
            Provenance::Synthetic if self.gender == Gender::Unknown => {
                fail("synthetic records must have gender man or woman")
            }
            Provenance::Synthetic if self.source_gender == SourceGender::NotApplicable => {
                fail("synthetic records must have source_gender man or woman")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    image_path: Option<PathBuf>,
    caption: Option<String>,
    has_person: Option<bool>,
    gender: Option<Gender>,
    provenance: Option<Provenance>,
    #[serde(default)]
    source_gender: SourceGender,
    mask_path: Option<PathBuf>,
    embedding_ref: Option<EmbeddingRef>,
    source_id: Option<String>,
    occupation: Option<String>,
}

impl RawRecord {
    fn into_record(self, line: usize) -> Result<ManifestRecord, ManifestError> {
        fn req<T>(v: Option<T>, line: usize, field: &'static str) -> Result<T, ManifestError> {
            v.ok_or(ManifestError::MissingField { line, field })
        }
        Ok(ManifestRecord {
            id: req(self.id, line, "id")?,
            image_path: req(self.image_path, line, "image_path")?,
            caption: req(self.caption, line, "caption")?,
            has_person: req(self.has_person, line, "has_person")?,
            gender: req(self.gender, line, "gender")?,
            provenance: req(self.provenance, line, "provenance")?,
            source_gender: self.source_gender,
            mask_path: self.mask_path,
            embedding_ref: self.embedding_ref,
            source_id: self.source_id,
            occupation: self.occupation,
        })
    }
}

/// Parses JSONL manifest content. Blank lines are skipped; line numbers in
/// errors are 1-based physical lines.
pub fn parse_manifest<R: Read>(reader: R) -> Result<Vec<ManifestRecord>, ManifestError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ManifestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| ManifestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = raw.into_record(line_no)?;
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(ManifestError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, ManifestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(file)
}

/// Writes one JSON object per line.
pub fn write_manifest<W: Write>(records: &[ManifestRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

// ---------------------------------------------------------------------------
// Partitions
// ---------------------------------------------------------------------------

/// Relation between a synthetic record's gender and its source image gender.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenderRelation {
    Changed,
    Same,
    Any,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selector {
    pub provenance: Provenance,
    pub gender: Gender,
    pub relation: GenderRelation,
}

impl Selector {
    const fn new(provenance: Provenance, gender: Gender, relation: GenderRelation) -> Self {
        Self {
            provenance,
            gender,
            relation,
        }
    }

    pub fn matches(&self, r: &ManifestRecord) -> bool {
        if r.provenance != self.provenance || r.gender != self.gender {
            return false;
        }
        match self.relation {
            GenderRelation::NotApplicable => r.source_gender == SourceGender::NotApplicable,
            GenderRelation::Any => r.source_gender != SourceGender::NotApplicable,
            GenderRelation::Same => r.source_gender.matches(r.gender),
            GenderRelation::Changed => {
                r.source_gender != SourceGender::NotApplicable && !r.source_gender.matches(r.gender)
            }
        }
    }
}

/// Fine-tuning partition codes c1..c10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartitionCode {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
    C9,
    C10,
}

const RW: Selector = Selector::new(Provenance::Real, Gender::Woman, GenderRelation::NotApplicable);
const RM: Selector = Selector::new(Provenance::Real, Gender::Man, GenderRelation::NotApplicable);
const SW_C: Selector = Selector::new(Provenance::Synthetic, Gender::Woman, GenderRelation::Changed);
const SW_S: Selector = Selector::new(Provenance::Synthetic, Gender::Woman, GenderRelation::Same);
const SW_ANY: Selector = Selector::new(Provenance::Synthetic, Gender::Woman, GenderRelation::Any);
const SM_C: Selector = Selector::new(Provenance::Synthetic, Gender::Man, GenderRelation::Changed);
const SM_S: Selector = Selector::new(Provenance::Synthetic, Gender::Man, GenderRelation::Same);
const SM_ANY: Selector = Selector::new(Provenance::Synthetic, Gender::Man, GenderRelation::Any);

impl PartitionCode {
    pub const ALL: [PartitionCode; 10] = [
        PartitionCode::C1,
        PartitionCode::C2,
        PartitionCode::C3,
        PartitionCode::C4,
        PartitionCode::C5,
        PartitionCode::C6,
        PartitionCode::C7,
        PartitionCode::C8,
        PartitionCode::C9,
        PartitionCode::C10,
    ];

    pub fn selectors(self) -> &'static [Selector] {
        match self {
            PartitionCode::C1 => &[RW],
            PartitionCode::C2 => &[RM],
            PartitionCode::C3 => &[RW, RM],
            PartitionCode::C4 => &[RW, SM_C],
            PartitionCode::C5 => &[RW, SM_S],
            PartitionCode::C6 => &[RM, SW_C],
            PartitionCode::C7 => &[RM, SW_S],
            PartitionCode::C8 => &[RW, RM, SW_ANY, SM_ANY],
            PartitionCode::C9 => &[SW_C, SM_C],
            PartitionCode::C10 => &[SW_S, SM_S],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PartitionCode::C1 => "c1",
            PartitionCode::C2 => "c2",
            PartitionCode::C3 => "c3",
            PartitionCode::C4 => "c4",
            PartitionCode::C5 => "c5",
            PartitionCode::C6 => "c6",
            PartitionCode::C7 => "c7",
            PartitionCode::C8 => "c8",
            PartitionCode::C9 => "c9",
            PartitionCode::C10 => "c10",
        }
    }

    pub fn matches(self, record: &ManifestRecord) -> bool {
        self.selectors().iter().any(|s| s.matches(record))
    }
}

impl fmt::Display for PartitionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartitionCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PartitionCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown partition code {s:?} (expected c1..c10)"))
    }
}

/// Records selected by `code`, in input order.
pub fn build_partition(records: &[ManifestRecord], code: PartitionCode) -> Vec<ManifestRecord> {
    records.iter().filter(|r| code.matches(r)).cloned().collect()
}

// ---------------------------------------------------------------------------
// Occupations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupationRecord {
    pub name: String,
    pub count_men: u64,
    pub count_women: u64,
    pub caption_appearances: u64,
    pub single_person_only: bool,
}

impl OccupationRecord {
    pub fn new(name: &str, men: u64, women: u64, appearances: u64, single_person_only: bool) -> Self {
        Self {
            name: name.to_string(),
            count_men: men,
            count_women: women,
            caption_appearances: appearances,
            single_person_only,
        }
    }
}

pub const DEFAULT_MIN_PER_GENDER: u64 = 50;

/// Keeps occupations with strictly more than `min_per_gender` examples of
/// each gender, at least one caption hit and single-person annotations.
pub fn select_occupations(occupations: &[OccupationRecord], min_per_gender: u64) -> Vec<OccupationRecord> {
    occupations
        .iter()
        .filter(|o| {
            o.count_men > min_per_gender
                && o.count_women > min_per_gender
                && o.caption_appearances > 0
                && o.single_person_only
        })
        .cloned()
        .collect()
}

pub fn read_occupations<R: Read>(reader: R) -> Result<Vec<OccupationRecord>, ManifestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let expected = [
        "name",
        "count_men",
        "count_women",
        "caption_appearances",
        "single_person_only",
    ];
    let headers = rdr
        .headers()
        .map_err(|e| ManifestError::Occupations(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(ManifestError::Occupations(format!(
            "expected header {}",
            expected.join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| ManifestError::Occupations(e.to_string())))
        .collect()
}

pub fn write_occupations<W: Write>(occupations: &[OccupationRecord], out: W) -> Result<(), ManifestError> {
    let mut w = csv::Writer::from_writer(out);
    for o in occupations {
        w.serialize(o).map_err(|e| ManifestError::Occupations(e.to_string()))?;
    }
    w.flush().map_err(|e| ManifestError::Occupations(e.to_string()))
}

/// Splits text into maximal runs of letters, lowercased.
pub(crate) fn letter_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Number of captions containing `keyword` as a whole word, case-insensitively.
/// Multi-word keywords match as consecutive tokens.
pub fn count_caption_appearances<'a>(keyword: &str, captions: impl IntoIterator<Item = &'a str>) -> u64 {
    let needle: Vec<String> = letter_tokens(keyword).collect();
    if needle.is_empty() {
        return 0;
    }
    captions
        .into_iter()
        .filter(|c| {
            let toks: Vec<String> = letter_tokens(c).collect();
            toks.windows(needle.len()).any(|w| w == needle.as_slice())
        })
        .count() as u64
}

// ---------------------------------------------------------------------------
// Dataset versions
// ---------------------------------------------------------------------------

/// Replaces `fraction` of the real person records by their synthetic
/// man/woman pair.
///
/// Real person ids are sorted lexicographically, shuffled with a seeded
/// Fisher-Yates pass, and the first `floor(fraction * count)` are replaced.
/// Output keeps input order; each replaced record expands in place to
/// `[man counterpart, woman counterpart]`. Synthetic records in the input
/// serve only as the counterpart pool and are not emitted otherwise.
pub fn dataset_version(
    records: &[ManifestRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ManifestRecord>, ManifestError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(ManifestError::BadFraction(fraction));
    }
    let selected = select_for_replacement(records, fraction, seed);

    let mut counterparts: HashMap<&str, [Option<&ManifestRecord>; 2]> = HashMap::new();
    for r in records.iter().filter(|r| r.provenance == Provenance::Synthetic) {
        if let Some(src) = r.source_id.as_deref() {
            let slot = counterparts.entry(src).or_default();
            let idx = match r.gender {
                Gender::Man => 0,
                Gender::Woman => 1,
                Gender::Unknown => continue,
            };
            slot[idx].get_or_insert(r);
        }
    }

    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.provenance == Provenance::Real) {
        if !selected.contains(r.id.as_str()) {
            out.push(r.clone());
            continue;
        }
        let pair = counterparts.get(r.id.as_str()).copied().unwrap_or_default();
        let man = pair[0].ok_or_else(|| ManifestError::MissingCounterpart(r.id.clone(), "man"))?;
        let woman = pair[1].ok_or_else(|| ManifestError::MissingCounterpart(r.id.clone(), "woman"))?;
        out.push(man.clone());
        out.push(woman.clone());
    }
    Ok(out)
}

/// Ids of the real person records chosen for replacement.
pub fn select_for_replacement(records: &[ManifestRecord], fraction: f64, seed: u64) -> HashSet<&str> {
    let mut ids: Vec<&str> = records
        .iter()
        .filter(|r| r.provenance == Provenance::Real && r.has_person)
        .map(|r| r.id.as_str())
        .collect();
    ids.sort_unstable();
    let k = (fraction * ids.len() as f64).floor() as usize;
    fisher_yates(&mut ids, &mut seeded_rng(seed));
    ids.into_iter().take(k).collect()
}

/// Per-code record counts.
pub fn partition_summary(records: &[ManifestRecord]) -> BTreeMap<PartitionCode, usize> {
    PartitionCode::ALL
        .into_iter()
        .map(|c| (c, records.iter().filter(|r| c.matches(r)).count()))
        .collect()
}
