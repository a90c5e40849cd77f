//! The clinical tool environment: eight named tools over a case file.
//!
//! Every tool is a pure function of the call, the case, the pooled menu and
//! the per-run [`ToolState`]. Usage limits stated in the tool descriptions
//! are enforced here and answered with fixed feedback texts.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::case_model::{normalize_name, CaseFile, GuidelineDoc, GuidelineSource, InvestigationMenu};

pub const NOT_AVAILABLE: &str = "Not available";
pub const NO_GUIDELINES: &str = "No updated guidelines available. Use your best clinical judgment";
pub const NO_PAST_MEDICAL_HISTORY: &str = "No past medical history available.";
pub const INSTITUTIONAL_PREFIX: &str = "According to institutional (Institutional guidelines): ";
pub const ONE_IMAGING_STUDY: &str =
    "Only one imaging study can be ordered at a time. Start with the most relevant one.";

const LAB_PLACEHOLDER: &str = "{names of lab investigations}";
const IMAGING_PLACEHOLDER: &str = "{names of imaging studies}";
const ML_PLACEHOLDER: &str = "{names of available outcome specific machine learning models}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Symptom,
    PastMedicalHistory,
    Sign,
    LabInvestigation,
    ImagingStudy,
    Ecg,
    MachineLearning,
    Guidelines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputArity {
    None,
    Single,
    List,
}

impl ToolKind {
    pub const ALL: [ToolKind; 8] = [
        ToolKind::Symptom,
        ToolKind::PastMedicalHistory,
        ToolKind::Sign,
        ToolKind::LabInvestigation,
        ToolKind::ImagingStudy,
        ToolKind::Ecg,
        ToolKind::MachineLearning,
        ToolKind::Guidelines,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToolKind::Symptom => "Symptom tool",
            ToolKind::PastMedicalHistory => "Past medical history tool",
            ToolKind::Sign => "Sign tool",
            ToolKind::LabInvestigation => "Lab investigation tool",
            ToolKind::ImagingStudy => "Imaging study tool",
            ToolKind::Ecg => "ECG tool",
            ToolKind::MachineLearning => "Machine learning tool",
            ToolKind::Guidelines => "Guidelines tool",
        }
    }

    /// Resolves an agent-emitted tool name. Matching is case-insensitive
    /// with whitespace collapsed; anything else is not a tool.
    pub fn from_name(raw: &str) -> Option<ToolKind> {
        let wanted = normalize_name(raw);
        ToolKind::ALL
            .into_iter()
            .find(|kind| normalize_name(kind.name()) == wanted)
    }

    pub fn input_arity(self) -> InputArity {
        match self {
            ToolKind::Symptom | ToolKind::PastMedicalHistory | ToolKind::Sign | ToolKind::Ecg => {
                InputArity::None
            }
            ToolKind::LabInvestigation => InputArity::List,
            ToolKind::ImagingStudy | ToolKind::MachineLearning | ToolKind::Guidelines => {
                InputArity::Single
            }
        }
    }

    pub fn once_only(self) -> bool {
        matches!(
            self,
            ToolKind::Symptom | ToolKind::PastMedicalHistory | ToolKind::Sign | ToolKind::Guidelines
        )
    }

    /// Prompt description lines, with menu placeholders still in place.
    pub fn description_lines(self) -> &'static [&'static str] {
        match self {
            ToolKind::Symptom => &[
                "Use this tool when you need to know about the patient's symptoms.",
                "The tool may be used only once.",
                "The tool does not accept any input.",
            ],
            ToolKind::PastMedicalHistory => &[
                "Use this tool when you need to know about the patient's past medical history.",
                "The tool may be used only once.",
                "The tool does not accept any input.",
            ],
            ToolKind::Sign => &[
                "Use this tool when you need to know about the patient's physical exam.",
                "The tool may be used only once.",
                "The tool does not accept any input.",
            ],
            ToolKind::LabInvestigation => &[
                "Use this tool when you need to know about lab investigations. The tool is recommended if the diagnosis is inconclusive. The tool accepts a list of names of lab investigations as a string. It is very important to only order lab investigations if they are relevant.",
                "The tool must be called again with a different lab investigation if earlier results are inconclusive, not available, or insufficient.",
                "Repeating this tool is preferred before moving on to imaging studies.",
                "Lab investigations cannot be repeated.",
                "You must specify the exact name of the lab investigation. E.g. SERUM ALBUMIN instead of just ALBUMIN.",
                "Lab investigations must only be ordered from the list of available investigations provided to you.",
                "Only the following lab investigations are available:",
                LAB_PLACEHOLDER,
            ],
            ToolKind::ImagingStudy => &[
                "Use this tool when you need to know about radiological or sonographic studies.",
                "The tool is recommended if the diagnosis is inconclusive. The tool accepts a list of names of imaging studies as a string. Only one imaging study can be ordered at a time. Start with the most relevant one.",
                "The tool must be called again with a different imaging study if earlier results are inconclusive or not available.",
                "Imaging studies must only be ordered from the list of available studies.",
                "Only the following imaging studies are available:",
                IMAGING_PLACEHOLDER,
            ],
            ToolKind::Ecg => &[
                "Use this tool when you need to know about the ECG (electrocardiogram).",
                "The tool is recommended regardless of how certain the diagnosis is.",
                "The tool does not accept any input.",
            ],
            ToolKind::MachineLearning => &[
                "Use this tool when you need to know about predictions issued by machine learning models relevant to this patient.",
                "The tool is recommended to guide further testing.",
                "The tool accepts a list of names of machine learning models as a string and returns a probability value.",
                "Only one machine learning model can be used at a time.",
                "Only the following machine learning models are available:",
                ML_PLACEHOLDER,
            ],
            ToolKind::Guidelines => &[
                "Use this tool when you need to know about established guidelines.",
                "Use this tool when you have a top differential diagnosis and need to know if there are any tests that can help you confirm or refute the diagnosis.",
                "This tool must not be used more than once.",
                "If the guidelines suggest a test you haven't ordered yet, you must order that test if it is available.",
                "If the guidelines suggest a test that is not available, you must add the recommendation to your final answer.",
                "You must not order tests which have already been ordered.",
                "After using this tool, you must proceed to consider available treatment guidelines before giving your final answer.",
                "You may not use existing knowledge to recommend a treatment unless no treatment guidelines are available.",
                "Your recommendation must be as relevant to the patient's condition as per the treatment guidelines as possible.",
                "This tool must be used to personalize your final answer for the patient in front of you.",
                "Do not quote recommendations from guidelines verbatim.",
                "The use of this tool is compulsory before issuing your final answer.",
                "The tool accepts your most likely differential diagnosis as a string.",
                "Institutional guidelines take precedence over other guidelines.",
            ],
        }
    }

    fn once_only_reminder(self) -> String {
        match self {
            ToolKind::Guidelines => format!(
                "{} has already been used. This tool must not be used more than once.",
                self.name()
            ),
            _ => format!(
                "{} has already been used. The tool may be used only once.",
                self.name()
            ),
        }
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A tool as advertised to the agent for one case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolDescriptor {
    pub kind: ToolKind,
    pub name: &'static str,
    pub description: String,
    pub input_arity: InputArity,
    pub once_only: bool,
}

/// Builds the tool list for one case. The machine learning tool is only
/// registered when the case carries model outputs, and the guidelines tool
/// only when retrieval is enabled.
pub fn register_tools(case: &CaseFile, menu: &InvestigationMenu, rag_enabled: bool) -> Vec<ToolDescriptor> {
    let ml_names: Vec<&str> = case.ml_models.keys().map(String::as_str).collect();
    ToolKind::ALL
        .into_iter()
        .filter(|kind| match kind {
            ToolKind::MachineLearning => !case.ml_models.is_empty(),
            ToolKind::Guidelines => rag_enabled,
            _ => true,
        })
        .map(|kind| {
            let description = kind
                .description_lines()
                .join(" ")
                .replace(LAB_PLACEHOLDER, &menu.lab_names.join(", "))
                .replace(IMAGING_PLACEHOLDER, &menu.imaging_names.join(", "))
                .replace(ML_PLACEHOLDER, &ml_names.join(", "));
            ToolDescriptor {
                kind,
                name: kind.name(),
                description,
                input_arity: kind.input_arity(),
                once_only: kind.once_only(),
            }
        })
        .collect()
}

/// Raw tool invocation as emitted by the agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
}

impl ToolCall {
    pub fn new(tool_name: impl Into<String>, input: Option<&str>) -> Self {
        ToolCall {
            tool_name: tool_name.into(),
            input: input.map(str::to_string),
        }
    }

    /// Input with surrounding whitespace removed; blank input counts as absent.
    pub fn trimmed_input(&self) -> Option<&str> {
        self.input.as_deref().map(str::trim).filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Data,
    NotAvailable,
    InvalidTool,
    UsageViolation,
    NoGuidelines,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub text: String,
    pub kind: ResponseKind,
}

impl ToolResponse {
    fn new(kind: ResponseKind, text: impl Into<String>) -> Self {
        ToolResponse {
            text: text.into(),
            kind,
        }
    }

    fn data(text: impl Into<String>) -> Self {
        Self::new(ResponseKind::Data, text)
    }

    fn violation(text: impl Into<String>) -> Self {
        Self::new(ResponseKind::UsageViolation, text)
    }
}

/// Usage bookkeeping for one run. Reset on restart.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolState {
    pub used_once_tools: BTreeSet<ToolKind>,
    pub ordered_labs: BTreeSet<String>,
    pub ordered_imaging: BTreeSet<String>,
    pub guidelines_used: bool,
}

/// Routes a call to its tool and returns the response with the updated state.
pub fn dispatch(
    call: &ToolCall,
    case: &CaseFile,
    menu: &InvestigationMenu,
    tools: &[ToolDescriptor],
    state: &ToolState,
) -> (ToolResponse, ToolState) {
    let mut next = state.clone();
    let registered = ToolKind::from_name(&call.tool_name)
        .filter(|kind| tools.iter().any(|t| t.kind == *kind));
    let Some(kind) = registered else {
        return (invalid_tool(&call.tool_name, tools), next);
    };
    if kind.once_only() && kind != ToolKind::Guidelines && next.used_once_tools.contains(&kind) {
        return (ToolResponse::violation(kind.once_only_reminder()), next);
    }
    let response = match kind {
        ToolKind::Symptom => symptoms(case),
        ToolKind::PastMedicalHistory => past_medical_history(case),
        ToolKind::Sign => signs(case),
        ToolKind::Ecg => ecg(case),
        ToolKind::LabInvestigation => labs(call.trimmed_input(), case, menu, &mut next),
        ToolKind::ImagingStudy => imaging(call.trimmed_input(), case, menu, &mut next),
        ToolKind::MachineLearning => ml_model(call.trimmed_input(), case),
        ToolKind::Guidelines => guidelines(call.trimmed_input(), case, &mut next),
    };
    if kind.once_only() && response.kind == ResponseKind::Data {
        next.used_once_tools.insert(kind);
    }
    (response, next)
}

/// Feedback for a name that is not among the registered tools.
pub fn invalid_tool(selection: &str, tools: &[ToolDescriptor]) -> ToolResponse {
    let names: Vec<&str> = tools.iter().map(|t| t.name).collect();
    ToolResponse::new(
        ResponseKind::InvalidTool,
        format!(
            "{} is not a valid tool. Please try with one of {}",
            selection.trim(),
            names.join(", ")
        ),
    )
}

fn missing_input(kind: ToolKind) -> ToolResponse {
    ToolResponse::violation(format!("{} requires an input. Please provide an Action Input.", kind.name()))
}

pub fn symptoms(case: &CaseFile) -> ToolResponse {
    ToolResponse::data(case.history_of_presenting_illness.clone())
}

pub fn signs(case: &CaseFile) -> ToolResponse {
    ToolResponse::data(case.physical_exam.clone())
}

pub fn past_medical_history(case: &CaseFile) -> ToolResponse {
    match &case.past_medical_history {
        Some(text) => ToolResponse::data(text.clone()),
        None => ToolResponse::data(NO_PAST_MEDICAL_HISTORY),
    }
}

pub fn ecg(case: &CaseFile) -> ToolResponse {
    match &case.ecg {
        Some(text) => ToolResponse::data(text.clone()),
        None => ToolResponse::new(ResponseKind::NotAvailable, NOT_AVAILABLE),
    }
}

/// Splits a lab order on commas and normalizes each non-empty fragment.
pub fn split_order(input: &str) -> Vec<String> {
    input
        .split(',')
        .map(normalize_name)
        .filter(|name| !name.is_empty())
        .collect()
}

pub fn labs(input: Option<&str>, case: &CaseFile, _menu: &InvestigationMenu, state: &mut ToolState) -> ToolResponse {
    let names = input.map(split_order).unwrap_or_default();
    if names.is_empty() {
        return missing_input(ToolKind::LabInvestigation);
    }
    let mut lines = Vec::with_capacity(names.len());
    let (mut any_data, mut any_repeat) = (false, false);
    for name in names {
        if state.ordered_labs.contains(&name) {
            any_repeat = true;
            lines.push(format!("{name}: already ordered"));
            continue;
        }
        match case.labs.get(&name) {
            Some(result) => {
                any_data = true;
                lines.push(format!("{name}: {} ({})", result.value, result.interpretation));
                state.ordered_labs.insert(name);
            }
            // Menu entries absent from this case read the same as unknown names.
            None => lines.push(format!("{name}: {NOT_AVAILABLE}")),
        }
    }
    let kind = if any_data {
        ResponseKind::Data
    } else if any_repeat {
        ResponseKind::UsageViolation
    } else {
        ResponseKind::NotAvailable
    };
    ToolResponse::new(kind, lines.join("\n"))
}

pub fn imaging(input: Option<&str>, case: &CaseFile, _menu: &InvestigationMenu, state: &mut ToolState) -> ToolResponse {
    let names = input.map(split_order).unwrap_or_default();
    let name = match names.as_slice() {
        [] => return missing_input(ToolKind::ImagingStudy),
        [single] => single.clone(),
        _ => return ToolResponse::violation(ONE_IMAGING_STUDY),
    };
    if state.ordered_imaging.contains(&name) {
        return ToolResponse::violation(format!("{name}: already ordered"));
    }
    match case.imaging.get(&name) {
        Some(report) => {
            let text = format!("{name}: {report}");
            state.ordered_imaging.insert(name);
            ToolResponse::data(text)
        }
        None => ToolResponse::new(ResponseKind::NotAvailable, format!("{name}: {NOT_AVAILABLE}")),
    }
}

/// Looks up a stored model output. Probabilities render with their stored
/// precision.
pub fn ml_model(input: Option<&str>, case: &CaseFile) -> ToolResponse {
    let Some(raw) = input else {
        return missing_input(ToolKind::MachineLearning);
    };
    let name = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    match case.ml_models.get_key_value(&name) {
        Some((stored, p)) => ToolResponse::data(format!("{stored}: {p}")),
        None => ToolResponse::new(ResponseKind::NotAvailable, NOT_AVAILABLE),
    }
}

/// Gated retrieval: guidelines are released only for an accepted diagnosis.
pub fn guidelines(input: Option<&str>, case: &CaseFile, state: &mut ToolState) -> ToolResponse {
    let Some(diagnosis) = input else {
        return missing_input(ToolKind::Guidelines);
    };
    if state.guidelines_used {
        return ToolResponse::violation(ToolKind::Guidelines.once_only_reminder());
    }
    state.guidelines_used = true;
    if case.guidelines.is_empty() || !diagnosis_matches(diagnosis, &case.accepted_diagnoses) {
        return ToolResponse::new(ResponseKind::NoGuidelines, NO_GUIDELINES);
    }
    ToolResponse::data(render_guidelines(&case.guidelines))
}

/// Renders guideline documents, general sources first and institutional
/// documents after them with the institutional prefix.
pub fn render_guidelines<'a>(docs: impl IntoIterator<Item = &'a GuidelineDoc>) -> String {
    let mut docs: Vec<&GuidelineDoc> = docs.into_iter().collect();
    docs.sort_by_key(|doc| doc.source);
    docs.iter()
        .map(|doc| render_doc(doc))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The guideline response with the titled documents withheld. Withholding
/// every document leaves the no-guidelines reply.
pub fn guidelines_excluding(case: &CaseFile, dropped: &[String]) -> ToolResponse {
    let kept: Vec<&GuidelineDoc> = case
        .guidelines
        .iter()
        .filter(|doc| !dropped.contains(&doc.title))
        .collect();
    if kept.is_empty() {
        return ToolResponse::new(ResponseKind::NoGuidelines, NO_GUIDELINES);
    }
    ToolResponse::data(render_guidelines(kept))
}

fn render_doc(doc: &GuidelineDoc) -> String {
    let mut out = String::new();
    if doc.source == GuidelineSource::Institutional {
        out.push_str(INSTITUTIONAL_PREFIX);
    }
    out.push_str(doc.title.trim());
    for (heading, body) in [
        ("INITIAL ASSESSMENT", &doc.initial_assessment),
        ("INITIAL TREATMENT", &doc.initial_treatment),
    ] {
        let body = body.trim();
        if !body.is_empty() {
            out.push('\n');
            out.push_str(heading);
            out.push_str(": ");
            out.push_str(body);
        }
    }
    out
}

/// Case-folds, strips punctuation and collapses whitespace.
pub fn normalize_diagnosis(raw: &str) -> String {
    let folded: String = raw
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn diagnosis_matches(input: &str, accepted: &[String]) -> bool {
    let wanted = normalize_diagnosis(input);
    !wanted.is_empty() && accepted.iter().any(|a| normalize_diagnosis(a) == wanted)
}
