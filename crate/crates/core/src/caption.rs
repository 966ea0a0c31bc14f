//! Rule-based gender counterfactual caption editing.
//!
//! A caption is split into maximal runs of letters; each run is compared
//! lowercased against the masculine and feminine keyword sets. Editing
//! toward a target gender rewrites only the opposite-gender keywords and
//! leaves every other byte of the caption untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.json");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad lexicon file: {0}")]
    Format(String),
    #[error("{0:?} is in both the masculine and feminine keyword sets")]
    Overlap(String),
    #[error("{word:?} has no {direction} mapping")]
    MissingMapping { word: String, direction: &'static str },
    #[error("{word:?} is mapped but not in the {set} keyword set")]
    OutOfDomain { word: String, set: &'static str },
    #[error("{word:?} maps to {image:?}, which is not in the {set} keyword set")]
    OutOfCodomain {
        word: String,
        image: String,
        set: &'static str,
    },
    #[error("{word:?} is mapped twice ({first:?} and {second:?})")]
    Conflict {
        word: String,
        first: String,
        second: String,
    },
}

/// On-disk lexicon. `pairs` define both directions; `masculine_only`
/// entries `[m, w]` define only `m -> w`; `feminine_only` entries `[w, m]`
/// define only `w -> m`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LexiconFile {
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub masculine_only: Vec<[String; 2]>,
    #[serde(default)]
    pub feminine_only: Vec<[String; 2]>,
}

/// Keyword sets and the two substitution maps between them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenderLexicon {
    pub masculine_terms: BTreeSet<String>,
    pub feminine_terms: BTreeSet<String>,
    pub to_feminine: BTreeMap<String, String>,
    pub to_masculine: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LexiconReport {
    /// `(w, f1(w))` with `f2(f1(w)) == w`.
    pub bijective_pairs: Vec<(String, String)>,
    pub asymmetric_pairs: Vec<(String, String)>,
}

fn insert_mapping(map: &mut BTreeMap<String, String>, from: &str, to: &str) -> Result<(), LexiconError> {
    let (from, to) = (from.to_lowercase(), to.to_lowercase());
    match map.get(&from) {
        Some(prev) if *prev != to => Err(LexiconError::Conflict {
            word: from,
            first: prev.clone(),
            second: to,
        }),
        _ => {
            map.insert(from, to);
            Ok(())
        }
    }
}

impl GenderLexicon {
    /// Builds and validates a lexicon from the file schema. Keyword sets are
    /// every word appearing on the respective side of any entry.
    pub fn from_file_schema(file: &LexiconFile) -> Result<Self, LexiconError> {
        let mut lex = GenderLexicon::default();
        for [m, w] in &file.pairs {
            insert_mapping(&mut lex.to_feminine, m, w)?;
            insert_mapping(&mut lex.to_masculine, w, m)?;
        }
        for [m, w] in &file.masculine_only {
            insert_mapping(&mut lex.to_feminine, m, w)?;
        }
        for [w, m] in &file.feminine_only {
            insert_mapping(&mut lex.to_masculine, w, m)?;
        }
        for (m, w) in &lex.to_feminine {
            lex.masculine_terms.insert(m.clone());
            lex.feminine_terms.insert(w.clone());
        }
        for (w, m) in &lex.to_masculine {
            lex.feminine_terms.insert(w.clone());
            lex.masculine_terms.insert(m.clone());
        }
        validate_lexicon(&lex)?;
        Ok(lex)
    }

    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        let file: LexiconFile = serde_json::from_str(text).map_err(|e| LexiconError::Format(e.to_string()))?;
        Self::from_file_schema(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                LexiconError::NotFound(path.to_path_buf())
            } else {
                LexiconError::Io {
                    path: path.to_path_buf(),
                    source,
                }
            }
        })?;
        Self::from_json(&text)
    }

    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_LEXICON).expect("builtin lexicon is valid")
    }

    pub fn builtin_json() -> &'static str {
        BUILTIN_LEXICON
    }

    fn side_of(&self, token: &str) -> Option<CaptionGender> {
        if self.masculine_terms.contains(token) {
            Some(CaptionGender::Masculine)
        } else if self.feminine_terms.contains(token) {
            Some(CaptionGender::Feminine)
        } else {
            None
        }
    }
}

/// Checks the lexicon invariants and classifies each masculine keyword as
/// round-tripping (`f2(f1(w)) == w`) or not.
pub fn validate_lexicon(lex: &GenderLexicon) -> Result<LexiconReport, LexiconError> {
    if let Some(w) = lex.masculine_terms.intersection(&lex.feminine_terms).next() {
        return Err(LexiconError::Overlap(w.clone()));
    }
    check_map(
        &lex.to_feminine,
        &lex.masculine_terms,
        &lex.feminine_terms,
        "masculine",
        "feminine",
    )?;
    check_map(
        &lex.to_masculine,
        &lex.feminine_terms,
        &lex.masculine_terms,
        "feminine",
        "masculine",
    )?;

    let mut report = LexiconReport::default();
    for (m, w) in &lex.to_feminine {
        let entry = (m.clone(), w.clone());
        if lex.to_masculine.get(w) == Some(m) {
            report.bijective_pairs.push(entry);
        } else {
            report.asymmetric_pairs.push(entry);
        }
    }
    Ok(report)
}

fn check_map(
    map: &BTreeMap<String, String>,
    domain: &BTreeSet<String>,
    codomain: &BTreeSet<String>,
    domain_name: &'static str,
    codomain_name: &'static str,
) -> Result<(), LexiconError> {
    if let Some(word) = domain.iter().find(|w| !map.contains_key(*w)) {
        return Err(LexiconError::MissingMapping {
            word: word.clone(),
            direction: if domain_name == "masculine" {
                "masculine-to-feminine"
            } else {
                "feminine-to-masculine"
            },
        });
    }
    for (word, image) in map {
        if !domain.contains(word) {
            return Err(LexiconError::OutOfDomain {
                word: word.clone(),
                set: domain_name,
            });
        }
        if !codomain.contains(image) {
            return Err(LexiconError::OutOfCodomain {
                word: word.clone(),
                image: image.clone(),
                set: codomain_name,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionGender {
    Masculine,
    Feminine,
    Neutral,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetGender {
    Masculine,
    Feminine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub original: String,
    pub masculine: String,
    pub feminine: String,
    pub detected_gender: CaptionGender,
}

/// Byte ranges of maximal letter runs.
fn letter_runs(text: &str) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphabetic(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, text.len()));
    }
    runs
}

pub fn detect_gender(caption: &str, lex: &GenderLexicon) -> CaptionGender {
    let (mut masc, mut fem) = (false, false);
    for (s, e) in letter_runs(caption) {
        match lex.side_of(&caption[s..e].to_lowercase()) {
            Some(CaptionGender::Masculine) => masc = true,
            Some(CaptionGender::Feminine) => fem = true,
            _ => {}
        }
    }
    match (masc, fem) {
        (true, true) => CaptionGender::Mixed,
        (true, false) => CaptionGender::Masculine,
        (false, true) => CaptionGender::Feminine,
        (false, false) => CaptionGender::Neutral,
    }
}

fn match_leading_case(original: &str, replacement: &str) -> String {
    let leading_upper = original.chars().next().is_some_and(char::is_uppercase);
    if !leading_upper {
        return replacement.to_string();
    }
    let mut chars = replacement.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Rewrites every opposite-gender keyword toward `target`.
pub fn edit_caption(caption: &str, target: TargetGender, lex: &GenderLexicon) -> String {
    let map = match target {
        TargetGender::Feminine => &lex.to_feminine,
        TargetGender::Masculine => &lex.to_masculine,
    };
    let mut out = String::with_capacity(caption.len() + 8);
    let mut cursor = 0;
    for (s, e) in letter_runs(caption) {
        let token = &caption[s..e];
        if let Some(rep) = map.get(&token.to_lowercase()) {
            out.push_str(&caption[cursor..s]);
            out.push_str(&match_leading_case(token, rep));
            cursor = e;
        }
    }
    out.push_str(&caption[cursor..]);
    out
}

/// Produces the masculine/feminine caption pair. A caption already of the
/// target gender is unchanged by the edit, so both sides are always the
/// edit toward their gender; for neutral captions both equal the input.
pub fn make_counterfactual_pair(caption: &str, lex: &GenderLexicon) -> CaptionPair {
    let detected_gender = detect_gender(caption, lex);
    let (masculine, feminine) = match detected_gender {
        CaptionGender::Neutral => (caption.to_string(), caption.to_string()),
        CaptionGender::Masculine => (caption.to_string(), edit_caption(caption, TargetGender::Feminine, lex)),
        CaptionGender::Feminine => (edit_caption(caption, TargetGender::Masculine, lex), caption.to_string()),
        CaptionGender::Mixed => (
            edit_caption(caption, TargetGender::Masculine, lex),
            edit_caption(caption, TargetGender::Feminine, lex),
        ),
    };
    CaptionPair {
        original: caption.to_string(),
        masculine,
        feminine,
        detected_gender,
    }
}
