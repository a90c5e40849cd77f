//! Grade storage, the cascade rule, percentage grids and hallucination
//! assists.
//!
//! Grades are assigned by people. This module only checks, combines and
//! summarizes them.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_model::{normalize_name, Corpus, Difficulty, InvestigationMenu};
use crate::protocol::Transcript;
use crate::tools::{split_order, ToolKind};

/// A rubric score: 0 poor, 1 fair, 2 good.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Grade(u8);

impl Grade {
    pub const POOR: Grade = Grade(0);
    pub const FAIR: Grade = Grade(1);
    pub const GOOD: Grade = Grade(2);

    pub fn new(value: u8) -> Result<Self, EvalError> {
        match value {
            0..=2 => Ok(Grade(value)),
            other => Err(EvalError::InvalidGrade(other)),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Grade {
    type Error = EvalError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Grade::new(value)
    }
}

impl From<Grade> for u8 {
    fn from(grade: Grade) -> u8 {
        grade.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("grade {0} is outside 0..=2")]
    InvalidGrade(u8),
    #[error("score card references unknown case {0}")]
    UnknownCaseReference(String),
    #[error("{path}: {message}")]
    Annotations { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Correctness,
    ToolUse,
    GuidelineConformity,
    HallucinationResistance,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Correctness,
        Metric::ToolUse,
        Metric::GuidelineConformity,
        Metric::HallucinationResistance,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Correctness => "correctness",
            Metric::ToolUse => "tool_use",
            Metric::GuidelineConformity => "guideline_conformity",
            Metric::HallucinationResistance => "hallucination_resistance",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Correctness => "Correctness of final answer",
            Metric::ToolUse => "Judicious use of tools",
            Metric::GuidelineConformity => "Conformity to guidelines",
            Metric::HallucinationResistance => "Resistance to hallucinations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreCard {
    pub case_id: String,
    pub question_index: usize,
    pub backend: String,
    pub correctness: Grade,
    pub tool_use: Grade,
    pub guideline_conformity: Grade,
    pub hallucination_resistance: Grade,
    #[serde(default)]
    pub grader: String,
    #[serde(default)]
    pub rationale: String,
}

impl ScoreCard {
    pub fn grade(&self, metric: Metric) -> Grade {
        match metric {
            Metric::Correctness => self.correctness,
            Metric::ToolUse => self.tool_use,
            Metric::GuidelineConformity => self.guideline_conformity,
            Metric::HallucinationResistance => self.hallucination_resistance,
        }
    }

    pub fn grades(&self) -> [Grade; 4] {
        Metric::ALL.map(|m| self.grade(m))
    }

    pub fn run_key(&self) -> (&str, usize, &str) {
        (&self.case_id, self.question_index, &self.backend)
    }
}

/// A wrong final answer zeroes tool use and guideline conformity.
pub fn apply_cascade(mut card: ScoreCard) -> ScoreCard {
    if card.correctness == Grade::POOR {
        card.tool_use = Grade::POOR;
        card.guideline_conformity = Grade::POOR;
    }
    card
}

pub fn load_annotations(path: &Path) -> Result<Vec<ScoreCard>, EvalError> {
    let err = |message: String| EvalError::Annotations {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Specialty,
    Difficulty,
    Overall,
}

impl std::str::FromStr for GroupBy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "specialty" => Ok(GroupBy::Specialty),
            "difficulty" => Ok(GroupBy::Difficulty),
            "overall" => Ok(GroupBy::Overall),
            other => Err(format!("unknown grouping {other:?}; expected specialty, difficulty or overall")),
        }
    }
}

/// Sort key for a group: difficulty groups follow Easy, Medium, Hard.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKey {
    Difficulty(Difficulty),
    Name(String),
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Difficulty(d) => write!(f, "{d}"),
            GroupKey::Name(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub backend: String,
    pub group: String,
    /// Number of graded questions in the cell.
    pub n: usize,
    pub sums: [u32; 4],
    pub percentages: [f64; 4],
}

impl GridRow {
    pub fn percentage(&self, metric: Metric) -> f64 {
        self.percentages[metric as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportGrid {
    pub group_by: GroupBy,
    pub rows: Vec<GridRow>,
}

impl ReportGrid {
    pub fn row(&self, backend: &str, group: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.backend == backend && r.group == group)
    }
}

pub fn percentage(sum: u32, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    100.0 * f64::from(sum) / (2.0 * n as f64)
}

/// Pools cards into per-(backend, group) percentages. Cascade is expected to
/// have been applied already.
pub fn aggregate(cards: &[ScoreCard], group_by: GroupBy, corpus: &Corpus) -> Result<ReportGrid, EvalError> {
    let mut cells: BTreeMap<(String, GroupKey), (usize, [u32; 4])> = BTreeMap::new();
    for card in cards {
        let case = corpus
            .get(&card.case_id)
            .ok_or_else(|| EvalError::UnknownCaseReference(card.case_id.clone()))?;
        let key = match group_by {
            GroupBy::Specialty => GroupKey::Name(case.specialty.clone()),
            GroupBy::Difficulty => GroupKey::Difficulty(case.difficulty),
            GroupBy::Overall => GroupKey::Name("Overall".into()),
        };
        let cell = cells.entry((card.backend.clone(), key)).or_default();
        cell.0 += 1;
        for (sum, grade) in cell.1.iter_mut().zip(card.grades()) {
            *sum += u32::from(grade.value());
        }
    }
    let rows = cells
        .into_iter()
        .map(|((backend, key), (n, sums))| GridRow {
            backend,
            group: key.to_string(),
            n,
            percentages: sums.map(|s| percentage(s, n)),
            sums,
        })
        .collect();
    Ok(ReportGrid { group_by, rows })
}

/// Whether `pct` is some k/(2n) of the maximum for integral k.
pub fn representability_audit(pct: f64, n_questions: usize) -> bool {
    assert!(n_questions >= 1, "n_questions must be at least 1");
    let k = pct * 2.0 * n_questions as f64 / 100.0;
    (k - k.round()).abs() < 1e-6
}

/// One decimal place, trailing ".0" dropped: 80, 37.5, 79.2.
pub fn format_percentage(pct: f64) -> String {
    let text = format!("{pct:.1}");
    let text = text.strip_suffix(".0").unwrap_or(&text).to_string();
    format!("{text}%")
}

pub fn grid_to_csv(grid: &ReportGrid) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["backend".to_string(), "group".into(), "n".into()];
    header.extend(Metric::ALL.map(|m| m.key().to_string()));
    writer.write_record(&header).expect("in-memory csv write");
    for row in &grid.rows {
        let mut record = vec![row.backend.clone(), row.group.clone(), row.n.to_string()];
        record.extend(row.percentages.map(|p| format!("{p:.1}")));
        writer.write_record(&record).expect("in-memory csv write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

/// A tab-separated table with one block per backend.
pub fn grid_to_table(grid: &ReportGrid) -> String {
    let mut out = String::from("Metric\tn");
    for metric in Metric::ALL {
        let _ = write!(out, "\t{}", metric.title());
    }
    out.push('\n');
    let mut current: Option<&str> = None;
    for row in &grid.rows {
        if current != Some(row.backend.as_str()) {
            let _ = writeln!(out, "{}", row.backend);
            current = Some(&row.backend);
        }
        let _ = write!(out, "{}\t{}", row.group, row.n);
        for pct in row.percentages {
            let _ = write!(out, "\t{}", format_percentage(pct));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestartSummary {
    pub backend: String,
    pub per_specialty: BTreeMap<String, u32>,
    pub mean_per_specialty: f64,
}

/// Total restarts per specialty and their mean across specialties, per
/// backend.
pub fn restart_summary(transcripts: &[Transcript], corpus: &Corpus) -> Result<Vec<RestartSummary>, EvalError> {
    let mut by_backend: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    for t in transcripts {
        let case = corpus
            .get(&t.case_id)
            .ok_or_else(|| EvalError::UnknownCaseReference(t.case_id.clone()))?;
        *by_backend
            .entry(t.backend.clone())
            .or_default()
            .entry(case.specialty.clone())
            .or_default() += t.restart_count;
    }
    Ok(by_backend
        .into_iter()
        .map(|(backend, per_specialty)| {
            let total: u32 = per_specialty.values().sum();
            RestartSummary {
                backend,
                mean_per_specialty: f64::from(total) / per_specialty.len() as f64,
                per_specialty,
            }
        })
        .collect())
}

/// An investigation or model name that is not on the menu.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NameFlag {
    pub step_index: usize,
    pub tool: ToolKind,
    pub emitted: String,
    pub nearest: Option<String>,
    pub distance: Option<usize>,
    pub alias: Option<String>,
}

/// Closest candidate by case-insensitive edit distance, ties broken by name.
pub fn nearest_name<'a>(emitted: &str, candidates: impl IntoIterator<Item = &'a String>) -> Option<(&'a String, usize)> {
    let wanted = emitted.to_uppercase();
    candidates
        .into_iter()
        .map(|c| (c, strsim::levenshtein(&wanted, &c.to_uppercase())))
        .min_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)))
}

/// Lists every lab, imaging or model name the agent asked for that is not on
/// the menu, with the nearest menu entry and any curator alias.
pub fn flag_name_mismatches(
    transcript: &Transcript,
    menu: &InvestigationMenu,
    aliases: &BTreeMap<String, String>,
) -> Vec<NameFlag> {
    let aliases: BTreeMap<String, &String> = aliases.iter().map(|(k, v)| (normalize_name(k), v)).collect();
    let mut flags = Vec::new();
    for (step_index, step) in transcript.steps.iter().enumerate() {
        let Some(call) = &step.action else { continue };
        let Some(tool) = ToolKind::from_name(&call.tool_name) else {
            continue;
        };
        let Some(input) = call.trimmed_input() else { continue };
        let (names, candidates): (Vec<String>, _) = match tool {
            ToolKind::LabInvestigation => (split_order(input), &menu.lab_names),
            ToolKind::ImagingStudy => (split_order(input), &menu.imaging_names),
            ToolKind::MachineLearning => (
                vec![input.split_whitespace().collect::<Vec<_>>().join(" ")],
                &menu.ml_model_names,
            ),
            _ => continue,
        };
        for emitted in names {
            if candidates.contains(&emitted) {
                continue;
            }
            let nearest = nearest_name(&emitted, candidates.iter());
            flags.push(NameFlag {
                step_index,
                tool,
                alias: aliases.get(&normalize_name(&emitted)).map(|s| s.to_string()),
                nearest: nearest.map(|(n, _)| n.clone()),
                distance: nearest.map(|(_, d)| d),
                emitted,
            });
        }
    }
    flags
}
