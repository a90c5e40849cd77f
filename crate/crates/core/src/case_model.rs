//! Structured case files: schema, loading, validation and menu pooling.
//!
//! A case file is a JSON document with a fixed set of top-level keys. Every
//! key must be present (optional sections use `null`) and unknown keys are
//! rejected so a curator typo can never silently hide data from the tools.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Current version of the case-file schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Top-level keys of a case file, in serialization order.
pub const CASE_KEYS: [&str; 15] = [
    "schema_version",
    "case_id",
    "specialty",
    "difficulty",
    "questions",
    "history_of_presenting_illness",
    "physical_exam",
    "past_medical_history",
    "ecg",
    "labs",
    "imaging",
    "ml_models",
    "accepted_diagnoses",
    "guidelines",
    "gold",
];

/// Investigation name used for the ECG in gold annotations.
pub const ECG_INVESTIGATION: &str = "ECG";

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate case_id {0:?} in corpus")]
    DuplicateCaseId(String),
}

impl CaseError {
    fn from_serde(err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match err.classify() {
            Category::Syntax | Category::Eof | Category::Io => CaseError::Parse(err.to_string()),
            Category::Data => CaseError::Schema(err.to_string()),
        }
    }
}

/// Canonical form of an investigation name: uppercase, trimmed, internal
/// whitespace runs collapsed to one space.
pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_uppercase()
}

/// Case difficulty as graded by the curating clinician.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn from_level(level: u8) -> Option<Self> {
        match level {
            0 => Some(Difficulty::Easy),
            1 => Some(Difficulty::Medium),
            2 => Some(Difficulty::Hard),
            _ => None,
        }
    }

    pub fn level(self) -> u8 {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Medium => 1,
            Difficulty::Hard => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Medium => "Medium",
            Difficulty::Hard => "Hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabResult {
    /// Display value with units, e.g. `0.1 ng/mL`.
    pub value: String,
    /// Stored interpretation, returned verbatim even when clinically wrong.
    pub interpretation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidelineSource {
    General,
    Institutional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidelineDoc {
    pub source: GuidelineSource,
    pub title: String,
    pub initial_assessment: String,
    pub initial_treatment: String,
}

/// Curator annotations used for grading and by the oracle backend. Never
/// shown to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldAnnotation {
    pub final_answer_notes: String,
    pub relevant_investigations: Vec<String>,
    pub diagnosis_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseDocument {
    schema_version: u32,
    case_id: String,
    specialty: String,
    difficulty: i64,
    questions: Vec<String>,
    history_of_presenting_illness: String,
    physical_exam: String,
    past_medical_history: Option<String>,
    ecg: Option<String>,
    labs: BTreeMap<String, LabResult>,
    imaging: BTreeMap<String, String>,
    ml_models: BTreeMap<String, f64>,
    accepted_diagnoses: Vec<String>,
    guidelines: Vec<GuidelineDoc>,
    gold: Option<GoldAnnotation>,
}

/// One validated clinical scenario. Immutable after loading.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseFile {
    pub case_id: String,
    pub specialty: String,
    pub difficulty: Difficulty,
    pub questions: Vec<String>,
    pub history_of_presenting_illness: String,
    pub physical_exam: String,
    pub past_medical_history: Option<String>,
    pub ecg: Option<String>,
    /// Keyed by canonical investigation name.
    pub labs: BTreeMap<String, LabResult>,
    /// Keyed by canonical study name; values are report text.
    pub imaging: BTreeMap<String, String>,
    /// Keyed by model name exactly as curated.
    pub ml_models: BTreeMap<String, f64>,
    pub accepted_diagnoses: Vec<String>,
    pub guidelines: Vec<GuidelineDoc>,
    pub gold: Option<GoldAnnotation>,
}

impl CaseFile {
    /// Parses and validates a case file from JSON text.
    pub fn from_json_str(text: &str) -> Result<Self, CaseError> {
        let value: Value = serde_json::from_str(text).map_err(CaseError::from_serde)?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, CaseError> {
        let object = value
            .as_object()
            .ok_or_else(|| CaseError::Schema("case file must be a JSON object".into()))?;
        let missing: Vec<&str> = CASE_KEYS
            .iter()
            .copied()
            .filter(|key| !object.contains_key(*key))
            .collect();
        if !missing.is_empty() {
            return Err(CaseError::Schema(format!(
                "missing top-level keys: {}",
                missing.join(", ")
            )));
        }
        let unknown: Vec<&str> = object
            .keys()
            .map(String::as_str)
            .filter(|key| !CASE_KEYS.contains(key))
            .collect();
        if !unknown.is_empty() {
            return Err(CaseError::Schema(format!(
                "unknown top-level keys: {}",
                unknown.join(", ")
            )));
        }
        let doc: CaseDocument = serde_json::from_value(value).map_err(CaseError::from_serde)?;
        Self::from_document(doc)
    }

    fn from_document(doc: CaseDocument) -> Result<Self, CaseError> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(CaseError::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let difficulty = u8::try_from(doc.difficulty)
            .ok()
            .and_then(Difficulty::from_level)
            .ok_or_else(|| {
                CaseError::Invariant(format!(
                    "{}: difficulty {} is outside 0..=2",
                    doc.case_id, doc.difficulty
                ))
            })?;
        let case = CaseFile {
            labs: normalize_keys(doc.labs, "labs")?,
            imaging: normalize_keys(doc.imaging, "imaging")?,
            ml_models: trim_keys(doc.ml_models)?,
            gold: doc.gold.map(|gold| GoldAnnotation {
                relevant_investigations: gold
                    .relevant_investigations
                    .iter()
                    .map(|name| normalize_name(name))
                    .collect(),
                ..gold
            }),
            case_id: doc.case_id.trim().to_string(),
            specialty: doc.specialty.trim().to_string(),
            difficulty,
            questions: doc.questions,
            history_of_presenting_illness: doc.history_of_presenting_illness,
            physical_exam: doc.physical_exam,
            past_medical_history: doc.past_medical_history,
            ecg: doc.ecg,
            accepted_diagnoses: doc.accepted_diagnoses,
            guidelines: doc.guidelines,
        };
        case.validate()?;
        Ok(case)
    }

    fn validate(&self) -> Result<(), CaseError> {
        let fail = |msg: String| Err(CaseError::Invariant(format!("{}: {msg}", self.case_id)));
        if self.case_id.is_empty() {
            return Err(CaseError::Invariant("case_id is empty".into()));
        }
        if self.specialty.is_empty() {
            return fail("specialty is empty".into());
        }
        if self.questions.is_empty() || self.questions.iter().any(|q| q.trim().is_empty()) {
            return fail("questions must be a non-empty list of non-empty strings".into());
        }
        for (name, p) in &self.ml_models {
            if !(0.0..=1.0).contains(p) {
                return fail(format!("ml model {name:?} probability {p} outside [0, 1]"));
            }
        }
        for (name, result) in &self.labs {
            if result.value.trim().is_empty() || result.interpretation.trim().is_empty() {
                return fail(format!("lab {name:?} has an empty value or interpretation"));
            }
        }
        for doc in &self.guidelines {
            if doc.initial_assessment.trim().is_empty() && doc.initial_treatment.trim().is_empty() {
                return fail(format!("guideline {:?} has no content", doc.title));
            }
        }
        if !self.guidelines.is_empty() && self.accepted_diagnoses.is_empty() {
            return fail("guidelines present but accepted_diagnoses is empty".into());
        }
        let mut seen = BTreeSet::new();
        for diagnosis in &self.accepted_diagnoses {
            let key = crate::tools::normalize_diagnosis(diagnosis);
            if key.is_empty() {
                return fail("accepted_diagnoses contains an empty entry".into());
            }
            if !seen.insert(key) {
                return fail(format!("accepted diagnosis {diagnosis:?} duplicates another entry"));
            }
        }
        if let Some(gold) = &self.gold {
            if !self.accepted_diagnoses.is_empty()
                && !crate::tools::diagnosis_matches(&gold.diagnosis_label, &self.accepted_diagnoses)
            {
                return fail(format!(
                    "gold diagnosis_label {:?} is not an accepted diagnosis",
                    gold.diagnosis_label
                ));
            }
            for name in &gold.relevant_investigations {
                if !self.has_investigation(name) {
                    return fail(format!(
                        "gold relevant investigation {name:?} has no result in this case"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether the canonical investigation name resolves to stored data.
    pub fn has_investigation(&self, canonical: &str) -> bool {
        self.labs.contains_key(canonical)
            || self.imaging.contains_key(canonical)
            || (canonical == ECG_INVESTIGATION && self.ecg.is_some())
    }

    pub fn question_index(&self, question: &str) -> Option<usize> {
        self.questions.iter().position(|q| q == question)
    }

    /// Serializes back to the documented schema.
    pub fn to_json_value(&self) -> Value {
        let doc = CaseDocument {
            schema_version: SCHEMA_VERSION,
            case_id: self.case_id.clone(),
            specialty: self.specialty.clone(),
            difficulty: i64::from(self.difficulty.level()),
            questions: self.questions.clone(),
            history_of_presenting_illness: self.history_of_presenting_illness.clone(),
            physical_exam: self.physical_exam.clone(),
            past_medical_history: self.past_medical_history.clone(),
            ecg: self.ecg.clone(),
            labs: self.labs.clone(),
            imaging: self.imaging.clone(),
            ml_models: self.ml_models.clone(),
            accepted_diagnoses: self.accepted_diagnoses.clone(),
            guidelines: self.guidelines.clone(),
            gold: self.gold.clone(),
        };
        serde_json::to_value(doc).expect("case document serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("case document serializes")
    }
}

fn normalize_keys<V>(map: BTreeMap<String, V>, section: &str) -> Result<BTreeMap<String, V>, CaseError> {
    let mut out = BTreeMap::new();
    for (raw, value) in map {
        let key = normalize_name(&raw);
        if key.is_empty() {
            return Err(CaseError::Invariant(format!("{section} contains an empty name")));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(CaseError::Invariant(format!(
                "{section} has two entries normalizing to {key:?}"
            )));
        }
    }
    Ok(out)
}

fn trim_keys<V>(map: BTreeMap<String, V>) -> Result<BTreeMap<String, V>, CaseError> {
    let mut out = BTreeMap::new();
    for (raw, value) in map {
        let key = raw.split_whitespace().collect::<Vec<_>>().join(" ");
        if key.is_empty() {
            return Err(CaseError::Invariant("ml_models contains an empty name".into()));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(CaseError::Invariant(format!(
                "ml_models has two entries named {key:?}"
            )));
        }
    }
    Ok(out)
}

pub fn load_case(path: impl AsRef<Path>) -> Result<CaseFile, CaseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CaseFile::from_json_str(&text)
}

/// Outcome of loading one file of a corpus directory.
#[derive(Debug)]
pub struct LoadedFile {
    pub path: PathBuf,
    pub result: Result<CaseFile, CaseError>,
}

/// Loads every `*.json` file in `dir` in file-name order. Failures are
/// reported per file rather than aborting the sweep.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Vec<LoadedFile>, CaseError> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|source| CaseError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CaseError::EmptyCorpus);
    }
    Ok(paths
        .into_iter()
        .map(|path| {
            let result = load_case(&path);
            LoadedFile { path, result }
        })
        .collect())
}

/// An immutable, validated set of cases with unique ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    cases: Vec<CaseFile>,
}

impl Corpus {
    pub fn new(mut cases: Vec<CaseFile>) -> Result<Self, CaseError> {
        if cases.is_empty() {
            return Err(CaseError::EmptyCorpus);
        }
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        for pair in cases.windows(2) {
            if pair[0].case_id == pair[1].case_id {
                return Err(CaseError::DuplicateCaseId(pair[0].case_id.clone()));
            }
        }
        Ok(Corpus { cases })
    }

    /// Loads a directory, failing on the first invalid file.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, CaseError> {
        let cases = load_corpus_dir(dir)?
            .into_iter()
            .map(|loaded| {
                loaded.result.map_err(|err| match err {
                    CaseError::Io { .. } => err,
                    other => CaseError::Schema(format!("{}: {other}", loaded.path.display())),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(cases)
    }

    pub fn cases(&self) -> &[CaseFile] {
        &self.cases
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseFile> {
        self.cases
            .binary_search_by(|c| c.case_id.as_str().cmp(case_id))
            .ok()
            .map(|i| &self.cases[i])
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn menu(&self) -> InvestigationMenu {
        pool_investigations(&self.cases).expect("corpus is non-empty")
    }
}

/// Orderable names pooled over a whole corpus, each list sorted and
/// deduplicated so rendered prompts are deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InvestigationMenu {
    pub lab_names: Vec<String>,
    pub imaging_names: Vec<String>,
    pub ml_model_names: Vec<String>,
}

impl InvestigationMenu {
    pub fn has_lab(&self, canonical: &str) -> bool {
        self.lab_names.binary_search_by(|n| n.as_str().cmp(canonical)).is_ok()
    }

    pub fn has_imaging(&self, canonical: &str) -> bool {
        self.imaging_names
            .binary_search_by(|n| n.as_str().cmp(canonical))
            .is_ok()
    }
}

pub fn pool_investigations(corpus: &[CaseFile]) -> Result<InvestigationMenu, CaseError> {
    if corpus.is_empty() {
        return Err(CaseError::EmptyCorpus);
    }
    let mut labs = BTreeSet::new();
    let mut imaging = BTreeSet::new();
    let mut models = BTreeSet::new();
    for case in corpus {
        labs.extend(case.labs.keys().cloned());
        imaging.extend(case.imaging.keys().cloned());
        models.extend(case.ml_models.keys().cloned());
    }
    Ok(InvestigationMenu {
        lab_names: labs.into_iter().collect(),
        imaging_names: imaging.into_iter().collect(),
        ml_model_names: models.into_iter().collect(),
    })
}
