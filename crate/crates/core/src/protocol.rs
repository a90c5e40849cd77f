//! Chain-of-thought protocol: prompt assembly, turn parsing and the agent
//! loop.
//!
//! The agent sees one growing text. Each turn the model continues it with a
//! `Thought:` and either an `Action:`/`Action Input:` pair or a
//! `Final Answer:`. Actions are dispatched to the tool environment and the
//! response is appended as the next `Observation:`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::backends::{Backend, CompletionRequest, TurnContext};
use crate::case_model::{normalize_name, CaseFile, InvestigationMenu};
use crate::tools::{self, register_tools, ResponseKind, ToolCall, ToolDescriptor, ToolKind, ToolResponse, ToolState};

pub const THOUGHT: &str = "Thought:";
pub const ACTION: &str = "Action:";
pub const ACTION_INPUT: &str = "Action Input:";
pub const OBSERVATION: &str = "Observation:";
pub const FINAL_ANSWER: &str = "Final Answer:";

pub const DEFAULT_IDENTITY: &str = "professor of medicine";

const IDENTITY_DIRECTIONS: &str = "You answer questions about a patient in front of you by practicing evidence-based medicine. \
Gather information about the patient with the tools provided, interpret every result yourself, and base your recommendations on the evidence and guidelines available to you.";

const TOOLING_DIRECTIONS: &str = "You have access to the tools listed below. Use them judiciously and in a logical, directed manner, \
the way a clinician would examine a patient and order investigations. The choice and order of tools is up to you. \
Treat each tool response as the starting point for your next thought. \
Stop using tools and give your final answer once you are confident of it, or when the tools can no longer provide useful information.";

const FORMAT_REMINDER: &str = "Your previous response did not follow the required format. \
Respond with a Thought followed by either an Action and Action Input, or a Final Answer.";

/// The four-part system prompt: identity, tooling directions, operation
/// format and task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub identity: String,
    pub tooling_directions: String,
    pub operation_format: String,
    pub task: String,
}

impl PromptTemplate {
    pub fn new(task: impl Into<String>) -> Self {
        PromptTemplate {
            identity: DEFAULT_IDENTITY.to_string(),
            tooling_directions: TOOLING_DIRECTIONS.to_string(),
            operation_format: String::new(),
            task: task.into(),
        }
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = identity.into();
        self
    }

    fn identity_sentence(&self) -> String {
        let role = self.identity.trim();
        let article = match role.chars().next() {
            Some(c) if "aeiouAEIOU".contains(c) => "an",
            _ => "a",
        };
        format!("You are {article} {role}.")
    }

    fn operation_text(&self, tools: &[ToolDescriptor]) -> String {
        if !self.operation_format.is_empty() {
            return self.operation_format.clone();
        }
        let names: Vec<&str> = tools.iter().map(|t| t.name).collect();
        format!(
            "Use the following format:\n\n\
             Question: the question you must answer\n\
             {THOUGHT} your reasoning about what to do next\n\
             {ACTION} the tool to use, exactly one of [{}]\n\
             {ACTION_INPUT} the input to the tool, left empty when the tool does not accept any input\n\
             {OBSERVATION} the response of the tool\n\
             ... (this Thought/Action/Action Input/Observation can repeat as many times as needed)\n\
             {THOUGHT} I now know the final answer\n\
             {FINAL_ANSWER} the final answer to the original question",
            names.join(", ")
        )
    }
}

/// A rendered prompt: the fixed preamble plus the growing scratchpad.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub preamble: String,
    pub scratchpad: String,
}

impl AssembledPrompt {
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.preamble, self.scratchpad)
    }

    pub fn token_count(&self) -> usize {
        count_tokens(&self.preamble) + count_tokens(&self.scratchpad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("prompt needs {tokens} tokens but the context limit is {limit}")]
    TokenBudgetExceeded { tokens: usize, limit: usize },
}

/// Approximate token count: one token per three quarters of a word.
pub fn count_tokens(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (4 * words).div_ceil(3)
}

/// Renders the tool list section: one `name: description` block per tool.
pub fn render_tool_list(tools: &[ToolDescriptor]) -> String {
    tools
        .iter()
        .map(|t| format!("{}: {}", t.name, t.description))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_preamble(template: &PromptTemplate, tools: &[ToolDescriptor]) -> String {
    format!(
        "{} {IDENTITY_DIRECTIONS}\n\n{}\n\n{}\n\n{}\n\nBegin!",
        template.identity_sentence(),
        template.tooling_directions,
        render_tool_list(tools),
        template.operation_text(tools),
    )
}

/// Serializes one step the way it appears in the scratchpad.
pub fn serialize_step(step: &AgentStep) -> String {
    let mut out = String::new();
    if let Some(thought) = &step.thought {
        let _ = writeln!(out, "{THOUGHT} {thought}");
    }
    if let Some(call) = &step.action {
        let _ = writeln!(out, "{ACTION} {}", call.tool_name);
        match call.input.as_deref() {
            Some(input) => {
                let _ = writeln!(out, "{ACTION_INPUT} {input}");
            }
            None => {
                let _ = writeln!(out, "{ACTION_INPUT}");
            }
        }
        if let Some(response) = &step.tool_response {
            let _ = writeln!(out, "{OBSERVATION} {}", response.text);
        }
    }
    if let Some(answer) = &step.final_answer {
        let _ = writeln!(out, "{FINAL_ANSWER} {answer}");
    }
    out
}

pub fn serialize_transcript(question: &str, steps: &[AgentStep]) -> String {
    let mut out = format!("Question: {question}\n");
    for step in steps {
        out.push_str(&serialize_step(step));
    }
    out
}

/// Builds the full prompt for the next turn.
pub fn assemble_prompt(
    template: &PromptTemplate,
    tools: &[ToolDescriptor],
    steps: &[AgentStep],
    context_token_limit: Option<usize>,
) -> Result<AssembledPrompt, PromptError> {
    let prompt = AssembledPrompt {
        preamble: render_preamble(template, tools),
        scratchpad: serialize_transcript(&template.task, steps),
    };
    check_budget(&prompt, context_token_limit)?;
    Ok(prompt)
}

fn check_budget(prompt: &AssembledPrompt, limit: Option<usize>) -> Result<(), PromptError> {
    match limit {
        Some(limit) if prompt.token_count() > limit => Err(PromptError::TokenBudgetExceeded {
            tokens: prompt.token_count(),
            limit,
        }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnBody {
    Action(ToolCall),
    FinalAnswer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    pub thought: Option<String>,
    pub body: TurnBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("model output contains neither an action nor a final answer")]
    UnparsableTurn,
}

fn strip_marker<'a>(line: &'a str, marker: &str) -> Option<&'a str> {
    line.trim_start().strip_prefix(marker)
}

/// Extracts the first action or final answer from raw model output.
///
/// Markers are recognized at the start of a line. Anything after a complete
/// action is discarded so the model cannot supply its own observations.
pub fn parse_turn(raw: &str) -> Result<ParsedTurn, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let marker_at = lines.iter().position(|line| {
        strip_marker(line, ACTION).is_some() || strip_marker(line, FINAL_ANSWER).is_some()
    });
    let Some(at) = marker_at else {
        return Err(ParseError::UnparsableTurn);
    };

    let preceding = lines[..at].join("\n");
    let preceding = preceding.trim();
    let preceding = preceding.strip_prefix(THOUGHT).unwrap_or(preceding).trim();
    let thought = (!preceding.is_empty()).then(|| preceding.to_string());

    if let Some(rest) = strip_marker(lines[at], FINAL_ANSWER) {
        let mut answer = rest.trim_start().to_string();
        for line in &lines[at + 1..] {
            answer.push('\n');
            answer.push_str(line);
        }
        let answer = answer.trim().to_string();
        if answer.is_empty() {
            return Err(ParseError::UnparsableTurn);
        }
        return Ok(ParsedTurn {
            thought,
            body: TurnBody::FinalAnswer(answer),
        });
    }

    let tool_name = strip_marker(lines[at], ACTION).unwrap_or_default().trim();
    if tool_name.is_empty() {
        return Err(ParseError::UnparsableTurn);
    }
    let input = lines[at + 1..]
        .iter()
        .find(|line| !line.trim().is_empty())
        .and_then(|line| strip_marker(line, ACTION_INPUT))
        .map(str::trim)
        .filter(|s| !s.is_empty());

    // "Action: Final Answer" is a common variant of the stop marker.
    if normalize_name(tool_name) == "FINAL ANSWER" {
        return match input {
            Some(answer) => Ok(ParsedTurn {
                thought,
                body: TurnBody::FinalAnswer(answer.to_string()),
            }),
            None => Err(ParseError::UnparsableTurn),
        };
    }
    Ok(ParsedTurn {
        thought,
        body: TurnBody::Action(ToolCall::new(tool_name, input)),
    })
}

/// Only a nonsensical first response restarts the run, up to
/// `max_restarts` times.
pub fn should_restart(
    turn_index: usize,
    parse_result: &Result<ParsedTurn, ParseError>,
    restarts_used: u32,
    max_restarts: u32,
) -> bool {
    turn_index == 0 && parse_result.is_err() && restarts_used < max_restarts
}

/// True when the last `threshold` steps repeat one tool call.
pub fn detect_loop(steps: &[AgentStep], threshold: usize) -> bool {
    if threshold < 2 || steps.len() < threshold {
        return false;
    }
    let key = |step: &AgentStep| {
        step.action.as_ref().map(|call| {
            (
                normalize_name(&call.tool_name),
                normalize_name(call.input.as_deref().unwrap_or("")),
            )
        })
    };
    let tail = &steps[steps.len() - threshold..];
    match key(&tail[0]) {
        Some(first) => tail[1..].iter().all(|s| key(s).as_ref() == Some(&first)),
        None => false,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_response: Option<ToolResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    /// Titles of guideline documents withheld to fit the context limit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_guidelines: Vec<String>,
}

impl AgentStep {
    pub fn from_turn(turn: ParsedTurn) -> Self {
        match turn.body {
            TurnBody::Action(call) => AgentStep {
                thought: turn.thought,
                action: Some(call),
                ..Default::default()
            },
            TurnBody::FinalAnswer(answer) => AgentStep {
                thought: turn.thought,
                final_answer: Some(answer),
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FinalAnswer,
    StepLimit,
    LoopDetected,
    RestartExhausted,
    BackendError,
}

impl Termination {
    pub const ALL: [Termination; 5] = [
        Termination::FinalAnswer,
        Termination::StepLimit,
        Termination::LoopDetected,
        Termination::RestartExhausted,
        Termination::BackendError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::FinalAnswer => "final_answer",
            Termination::StepLimit => "step_limit",
            Termination::LoopDetected => "loop_detected",
            Termination::RestartExhausted => "restart_exhausted",
            Termination::BackendError => "backend_error",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnUsage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

/// Noteworthy things that happened during a run, kept for graders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Restarted { attempt: u32, output: String },
    RestartsExhausted { output: String },
    FormatReminder { turn: usize, output: String },
    UnparsableAfterReminder { turn: usize, output: String },
    GuidelinesTrimmed { dropped: Vec<String>, prompt_tokens: usize, limit: usize },
    ContextOverflow { prompt_tokens: usize, limit: usize },
    BackendFailure { message: String },
    LoopDetected { tool_name: String, repeats: usize },
    StepLimit { max_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_restarts: u32,
    pub max_steps: usize,
    pub loop_threshold: usize,
    pub context_token_limit: Option<usize>,
    pub rag_enabled: bool,
    pub max_output_tokens: usize,
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_restarts: 3,
            max_steps: 20,
            loop_threshold: 3,
            context_token_limit: None,
            rag_enabled: true,
            max_output_tokens: 512,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("loop_threshold must be at least 2")]
    LoopThreshold,
    #[error("temperature must be non-negative")]
    Temperature,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_restarts == 0 {
            return Err(ConfigError::NotPositive("max_restarts"));
        }
        if self.max_steps == 0 {
            return Err(ConfigError::NotPositive("max_steps"));
        }
        if self.loop_threshold < 2 {
            return Err(ConfigError::LoopThreshold);
        }
        if self.context_token_limit == Some(0) {
            return Err(ConfigError::NotPositive("context_token_limit"));
        }
        if self.max_output_tokens == 0 {
            return Err(ConfigError::NotPositive("max_output_tokens"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ConfigError::Temperature);
        }
        Ok(())
    }
}

/// The complete record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub case_id: String,
    pub question_index: usize,
    pub question: String,
    pub backend: String,
    pub identity: String,
    pub rag_enabled: bool,
    pub steps: Vec<AgentStep>,
    pub termination: Termination,
    pub restart_count: u32,
    pub token_usage: Vec<TurnUsage>,
    pub events: Vec<RunEvent>,
}

/// A terminated run.
pub type RunRecord = Transcript;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub case_id: String,
    pub question_index: usize,
    pub question: String,
    pub backend: String,
    pub identity: String,
    pub rag_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub termination: Termination,
    pub restart_count: u32,
    pub token_usage: Vec<TurnUsage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<RunEvent>,
}

/// One line of a persisted transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TranscriptLine {
    Header(TranscriptHeader),
    Step(AgentStep),
    End(TranscriptSummary),
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("transcript must start with a header line")]
    MissingHeader,
    #[error("transcript must end with a summary line")]
    MissingSummary,
    #[error("line {0}: unexpected record")]
    Unexpected(usize),
}

impl Transcript {
    pub fn total_tokens(&self) -> TurnUsage {
        self.token_usage.iter().fold(TurnUsage::default(), |acc, u| TurnUsage {
            prompt_tokens: acc.prompt_tokens + u.prompt_tokens,
            completion_tokens: acc.completion_tokens + u.completion_tokens,
        })
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.steps.last().and_then(|s| s.final_answer.as_deref())
    }

    /// `<case_id>__<question_index>__<backend>.jsonl`, with path-hostile
    /// characters in the backend name replaced.
    pub fn file_name(&self) -> String {
        let backend: String = self
            .backend
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        format!("{}__{}__{}.jsonl", self.case_id, self.question_index, backend)
    }

    pub fn header(&self) -> TranscriptHeader {
        TranscriptHeader {
            case_id: self.case_id.clone(),
            question_index: self.question_index,
            question: self.question.clone(),
            backend: self.backend.clone(),
            identity: self.identity.clone(),
            rag_enabled: self.rag_enabled,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = Vec::with_capacity(self.steps.len() + 2);
        lines.push(TranscriptLine::Header(self.header()));
        lines.extend(self.steps.iter().cloned().map(TranscriptLine::Step));
        lines.push(TranscriptLine::End(TranscriptSummary {
            termination: self.termination,
            restart_count: self.restart_count,
            token_usage: self.token_usage.clone(),
            events: self.events.clone(),
        }));
        let mut out = String::new();
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("transcript line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: TranscriptLine = serde_json::from_str(line)
                .map_err(|source| TranscriptError::Json { line: i + 1, source })?;
            records.push((i + 1, record));
        }
        let mut iter = records.into_iter();
        let header = match iter.next() {
            Some((_, TranscriptLine::Header(h))) => h,
            _ => return Err(TranscriptError::MissingHeader),
        };
        let mut steps = Vec::new();
        let mut summary = None;
        for (line, record) in iter {
            match record {
                TranscriptLine::Step(step) if summary.is_none() => steps.push(step),
                TranscriptLine::End(end) if summary.is_none() => summary = Some(end),
                _ => return Err(TranscriptError::Unexpected(line)),
            }
        }
        let summary = summary.ok_or(TranscriptError::MissingSummary)?;
        Ok(Transcript {
            case_id: header.case_id,
            question_index: header.question_index,
            question: header.question,
            backend: header.backend,
            identity: header.identity,
            rag_enabled: header.rag_enabled,
            steps,
            termination: summary.termination,
            restart_count: summary.restart_count,
            token_usage: summary.token_usage,
            events: summary.events,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error("case {case_id} has no question {index}")]
    UnknownQuestion { case_id: String, index: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Runs agents over one case with a fixed configuration and identity.
#[derive(Debug, Clone)]
pub struct CaseRunner<'a> {
    case: &'a CaseFile,
    menu: &'a InvestigationMenu,
    config: RunConfig,
    identity: String,
    tools: Vec<ToolDescriptor>,
}

impl<'a> CaseRunner<'a> {
    pub fn new(case: &'a CaseFile, menu: &'a InvestigationMenu, config: RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        Ok(CaseRunner {
            case,
            menu,
            tools: register_tools(case, menu, config.rag_enabled),
            config,
            identity: DEFAULT_IDENTITY.to_string(),
        })
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = identity.into();
        self
    }

    pub fn tools(&self) -> &[ToolDescriptor] {
        &self.tools
    }

    pub fn template(&self, question: &str) -> PromptTemplate {
        PromptTemplate::new(question).with_identity(self.identity.clone())
    }

    pub fn run(&self, question_index: usize, backend: &dyn Backend) -> Result<Transcript, RunError> {
        let question = self
            .case
            .questions
            .get(question_index)
            .ok_or_else(|| RunError::UnknownQuestion {
                case_id: self.case.case_id.clone(),
                index: question_index,
            })?;
        let template = self.template(question);
        let mut run = RunState::default();
        let termination = self.drive(&template, backend, &mut run);
        debug!(case = %self.case.case_id, termination = termination.as_str(), "run finished");
        Ok(Transcript {
            case_id: self.case.case_id.clone(),
            question_index,
            question: question.clone(),
            backend: backend.name().to_string(),
            identity: self.identity.clone(),
            rag_enabled: self.config.rag_enabled,
            steps: run.steps,
            termination,
            restart_count: run.restarts,
            token_usage: run.usage,
            events: run.events,
        })
    }

    fn drive(&self, template: &PromptTemplate, backend: &dyn Backend, run: &mut RunState) -> Termination {
        let config = &self.config;
        'attempt: loop {
            run.steps.clear();
            let mut state = ToolState::default();
            let mut turn_index = 0usize;
            let mut reminded = false;
            loop {
                if run.steps.len() >= config.max_steps {
                    run.events.push(RunEvent::StepLimit { max_steps: config.max_steps });
                    return Termination::StepLimit;
                }
                let mut prompt = match assemble_prompt(template, &self.tools, &run.steps, config.context_token_limit) {
                    Ok(prompt) => prompt,
                    Err(PromptError::TokenBudgetExceeded { tokens, limit }) => {
                        warn!(tokens, limit, "prompt exceeds context limit");
                        run.events.push(RunEvent::ContextOverflow { prompt_tokens: tokens, limit });
                        return Termination::BackendError;
                    }
                };
                if reminded {
                    prompt.scratchpad = format!("{FORMAT_REMINDER}\n\n{}", prompt.scratchpad);
                }
                let request = CompletionRequest {
                    system: prompt.preamble.clone(),
                    prompt: prompt.scratchpad.clone(),
                    stop_sequences: vec![OBSERVATION.to_string()],
                    temperature: config.temperature,
                    max_output_tokens: config.max_output_tokens,
                };
                let ctx = TurnContext {
                    case: self.case,
                    steps: &run.steps,
                    rag_enabled: config.rag_enabled,
                };
                let completion = match backend.complete(&request, &ctx) {
                    Ok(c) => c,
                    Err(err) => {
                        warn!(error = %err, "backend failed");
                        run.events.push(RunEvent::BackendFailure { message: err.to_string() });
                        return Termination::BackendError;
                    }
                };
                run.usage.push(TurnUsage {
                    prompt_tokens: completion.prompt_tokens,
                    completion_tokens: completion.completion_tokens,
                });

                let parsed = parse_turn(&completion.text);
                let turn = match parsed {
                    Ok(turn) => turn,
                    Err(_) if turn_index == 0 => {
                        if should_restart(turn_index, &parsed, run.restarts, config.max_restarts) {
                            run.restarts += 1;
                            run.events.push(RunEvent::Restarted {
                                attempt: run.restarts,
                                output: completion.text,
                            });
                            continue 'attempt;
                        }
                        run.events.push(RunEvent::RestartsExhausted { output: completion.text });
                        return Termination::RestartExhausted;
                    }
                    Err(_) if !reminded => {
                        reminded = true;
                        run.events.push(RunEvent::FormatReminder {
                            turn: turn_index,
                            output: completion.text,
                        });
                        turn_index += 1;
                        continue;
                    }
                    Err(_) => {
                        run.events.push(RunEvent::UnparsableAfterReminder {
                            turn: turn_index,
                            output: completion.text,
                        });
                        return Termination::BackendError;
                    }
                };
                reminded = false;
                turn_index += 1;

                let mut step = AgentStep::from_turn(turn);
                let Some(call) = step.action.clone() else {
                    run.steps.push(step);
                    return Termination::FinalAnswer;
                };
                let (response, next_state) = tools::dispatch(&call, self.case, self.menu, &self.tools, &state);
                state = next_state;
                step.tool_response = Some(response);
                if ToolKind::from_name(&call.tool_name) == Some(ToolKind::Guidelines) {
                    self.fit_guidelines(template, &mut step, run);
                }
                run.steps.push(step);

                if detect_loop(&run.steps, config.loop_threshold) {
                    run.events.push(RunEvent::LoopDetected {
                        tool_name: call.tool_name,
                        repeats: config.loop_threshold,
                    });
                    return Termination::LoopDetected;
                }
            }
        }
    }

    /// Withholds guideline documents until the next prompt fits the context
    /// limit. General documents go before institutional ones.
    fn fit_guidelines(&self, template: &PromptTemplate, step: &mut AgentStep, run: &mut RunState) {
        let Some(limit) = self.config.context_token_limit else {
            return;
        };
        if step.tool_response.as_ref().map(|r| r.kind) != Some(ResponseKind::Data) {
            return;
        }
        let drop_order = guideline_drop_order(self.case);
        let tokens_with = |step: &AgentStep| {
            let mut steps = run.steps.clone();
            steps.push(step.clone());
            AssembledPrompt {
                preamble: render_preamble(template, &self.tools),
                scratchpad: serialize_transcript(&template.task, &steps),
            }
            .token_count()
        };
        let initial = tokens_with(step);
        if initial <= limit {
            return;
        }
        for dropped in 1..=drop_order.len() {
            step.dropped_guidelines = drop_order[..dropped].to_vec();
            step.tool_response = Some(tools::guidelines_excluding(self.case, &step.dropped_guidelines));
            if tokens_with(step) <= limit {
                break;
            }
        }
        warn!(dropped = ?step.dropped_guidelines, initial, limit, "guidelines trimmed to fit context");
        run.events.push(RunEvent::GuidelinesTrimmed {
            dropped: step.dropped_guidelines.clone(),
            prompt_tokens: initial,
            limit,
        });
    }
}

/// Titles in the order they are withheld under context pressure: general
/// documents from last to first, then institutional ones.
pub fn guideline_drop_order(case: &CaseFile) -> Vec<String> {
    use crate::case_model::GuidelineSource;
    let by_source = |source: GuidelineSource| {
        case.guidelines
            .iter()
            .rev()
            .filter(move |d| d.source == source)
            .map(|d| d.title.clone())
    };
    by_source(GuidelineSource::General)
        .chain(by_source(GuidelineSource::Institutional))
        .collect()
}

#[derive(Debug, Default)]
struct RunState {
    steps: Vec<AgentStep>,
    restarts: u32,
    usage: Vec<TurnUsage>,
    events: Vec<RunEvent>,
}

/// Runs one question of a case with the default identity.
pub fn run_case(
    case: &CaseFile,
    menu: &InvestigationMenu,
    question_index: usize,
    backend: &dyn Backend,
    config: RunConfig,
) -> Result<Transcript, RunError> {
    CaseRunner::new(case, menu, config)?.run(question_index, backend)
}
