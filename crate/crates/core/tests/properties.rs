use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use ebm_core::backends::{truncate_at_stop, Backend, CompletionRequest, OracleBackend, ScriptedBackend, TurnContext};
use ebm_core::case_model::{normalize_name, pool_investigations, CaseFile, Corpus, InvestigationMenu};
use ebm_core::evaluation::{aggregate, apply_cascade, representability_audit, Grade, GroupBy, Metric, ScoreCard};
use ebm_core::protocol::{
    count_tokens, detect_loop, render_tool_list, run_case, serialize_step, serialize_transcript, AgentStep, RunConfig,
    Termination,
};
use ebm_core::tools::{self, diagnosis_matches, ResponseKind, ToolCall, ToolKind, ToolState};
use proptest::prelude::*;
use proptest::sample::{select, subsequence};

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| Corpus::load_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/corpus")).unwrap())
}

fn menu() -> &'static InvestigationMenu {
    static MENU: OnceLock<InvestigationMenu> = OnceLock::new();
    MENU.get_or_init(|| corpus().menu())
}

fn case_index() -> impl Strategy<Value = usize> {
    0..corpus().len()
}

/// Calls drawn mostly from the real tool names and menu entries, with some
/// noise in names and inputs.
fn tool_call() -> impl Strategy<Value = ToolCall> {
    let menu = menu();
    let names: Vec<String> = menu
        .lab_names
        .iter()
        .chain(&menu.imaging_names)
        .chain(&menu.ml_model_names)
        .cloned()
        .chain(["Acute myocardial infarction".to_string(), "nonsense".into()])
        .collect();
    let tool = prop_oneof![
        4 => select(ToolKind::ALL.to_vec()).prop_map(|k| k.name().to_string()),
        1 => select(ToolKind::ALL.to_vec()).prop_map(|k| k.name().to_lowercase()),
        1 => "[A-Za-z ]{1,20}",
    ];
    let input = proptest::option::of(prop_oneof![
        4 => select(names.clone()),
        1 => subsequence(names, 1..3).prop_map(|v| v.join(", ")),
        1 => "[A-Za-z ,]{0,20}",
    ]);
    (tool, input).prop_map(|(t, i)| ToolCall::new(t, i.as_deref()))
}

fn text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9 ,.()%-]{0,30}".prop_map(|s| s.trim().to_string())
}

fn step() -> impl Strategy<Value = AgentStep> {
    (proptest::option::of(text()), tool_call(), text(), any::<bool>()).prop_map(|(thought, call, obs, is_final)| {
        if is_final {
            AgentStep { thought, final_answer: Some(obs), ..Default::default() }
        } else {
            AgentStep {
                thought,
                action: Some(call),
                tool_response: Some(tools::ToolResponse { text: obs, kind: ResponseKind::Data }),
                ..Default::default()
            }
        }
    })
}

fn script_line() -> impl Strategy<Value = String> {
    prop_oneof![
        3 => tool_call().prop_map(|c| format!("Thought: next\nAction: {}\nAction Input: {}", c.tool_name, c.input.unwrap_or_default())),
        1 => text().prop_map(|a| format!("Final Answer: {a}")),
        1 => "[a-z ]{0,20}",
        1 => text().prop_map(|o| format!("Action: Sign tool\nObservation: {o}")),
    ]
}

fn grade() -> impl Strategy<Value = Grade> {
    (0u8..=2).prop_map(|g| Grade::new(g).unwrap())
}

fn score_card() -> impl Strategy<Value = ScoreCard> {
    (case_index(), select(vec!["a", "b"]), grade(), grade(), grade(), grade()).prop_map(|(i, backend, c, t, g, h)| {
        ScoreCard {
            case_id: corpus().cases()[i].case_id.clone(),
            question_index: 0,
            backend: backend.into(),
            correctness: c,
            tool_use: t,
            guideline_conformity: g,
            hallucination_resistance: h,
            grader: String::new(),
            rationale: String::new(),
        }
    })
}

fn oracle_request() -> CompletionRequest {
    CompletionRequest {
        system: String::new(),
        prompt: String::new(),
        stop_sequences: vec!["Observation:".into()],
        temperature: 0.0,
        max_output_tokens: 64,
    }
}

#[test]
fn gold_investigations_resolve_in_every_bundled_case() {
    for case in corpus().cases() {
        for name in &case.gold.as_ref().unwrap().relevant_investigations {
            assert!(case.has_investigation(&normalize_name(name)), "{}: {name}", case.case_id);
        }
    }
}

#[test]
fn bundled_cases_round_trip() {
    for case in corpus().cases() {
        let again = CaseFile::from_json_str(&case.to_json_string()).unwrap();
        assert_eq!(&again, case);
        assert_eq!(again.to_json_string(), case.to_json_string());
    }
}

#[test]
fn oracle_runs_are_byte_identical() {
    let backend = OracleBackend::default();
    for case in corpus().cases() {
        let a = run_case(case, menu(), 0, &backend, RunConfig::default()).unwrap();
        let b = run_case(case, menu(), 0, &backend, RunConfig::default()).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn case_round_trip_is_a_fixed_point(
        labs in proptest::collection::btree_map("[ ]{0,2}[A-Za-z]{1,8}([ ]{1,3}[A-Za-z]{1,8})?[ ]{0,2}", "[0-9]{1,3} mg", 0..6),
        ml in proptest::collection::btree_map("[A-Za-z][A-Za-z ()<%]{0,20}", 0.0f64..=1.0, 0..3),
    ) {
        let mut value = corpus().get("cardiology-1").unwrap().to_json_value();
        let extra: serde_json::Map<String, serde_json::Value> = labs
            .into_iter()
            .map(|(k, v)| (k, serde_json::json!({"value": v, "interpretation": "Normal"})))
            .collect();
        value["labs"] = extra.into();
        value["ml_models"] = serde_json::to_value(ml).unwrap();
        value["gold"]["relevant_investigations"] = serde_json::json!([]);
        let Ok(first) = CaseFile::from_value(value) else {
            // Names that collide after normalization are rejected by design.
            return Ok(());
        };
        let second = CaseFile::from_json_str(&first.to_json_string()).unwrap();
        prop_assert_eq!(&second, &first);
        prop_assert_eq!(second.to_json_string(), first.to_json_string());
    }

    #[test]
    fn pooling_ignores_order_and_duplication(picks in proptest::collection::vec(case_index(), 1..12)) {
        let cases = corpus().cases();
        let picked: Vec<CaseFile> = picks.iter().map(|&i| cases[i].clone()).collect();
        let unique: BTreeSet<usize> = picks.iter().copied().collect();
        let canonical: Vec<CaseFile> = unique.iter().map(|&i| cases[i].clone()).collect();
        let mut reversed = picked.clone();
        reversed.reverse();
        let pooled = pool_investigations(&picked).unwrap();
        prop_assert_eq!(&pooled, &pool_investigations(&canonical).unwrap());
        prop_assert_eq!(&pooled, &pool_investigations(&reversed).unwrap());
        let doubled: Vec<CaseFile> = picked.iter().chain(&picked).cloned().collect();
        prop_assert_eq!(&pooled, &pool_investigations(&doubled).unwrap());
    }

    #[test]
    fn dispatch_is_pure_and_faithful(i in case_index(), calls in proptest::collection::vec(tool_call(), 1..16), rag in any::<bool>()) {
        let case = &corpus().cases()[i];
        let registered = tools::register_tools(case, menu(), rag);
        let mut state = ToolState::default();
        let mut data_once: BTreeMap<ToolKind, usize> = BTreeMap::new();
        let mut lab_hits: Vec<String> = Vec::new();
        for call in &calls {
            let first = tools::dispatch(call, case, menu(), &registered, &state);
            let second = tools::dispatch(call, case, menu(), &registered, &state);
            prop_assert_eq!(&first, &second);
            let (response, next) = first;
            prop_assert!(!response.text.is_empty());
            if response.kind == ResponseKind::Data {
                let kind = ToolKind::from_name(&call.tool_name).unwrap();
                if kind.once_only() {
                    *data_once.entry(kind).or_default() += 1;
                }
                match kind {
                    ToolKind::Symptom => prop_assert_eq!(&response.text, &case.history_of_presenting_illness),
                    ToolKind::Sign => prop_assert_eq!(&response.text, &case.physical_exam),
                    ToolKind::Ecg => prop_assert_eq!(Some(&response.text), case.ecg.as_ref()),
                    ToolKind::LabInvestigation => {
                        for line in response.text.lines() {
                            let (name, rest) = line.split_once(": ").unwrap();
                            if let Some(result) = case.labs.get(name) {
                                if rest != "already ordered" {
                                    prop_assert_eq!(rest, format!("{} ({})", result.value, result.interpretation));
                                    lab_hits.push(name.to_string());
                                }
                            }
                        }
                    }
                    ToolKind::ImagingStudy => {
                        let (name, report) = response.text.split_once(": ").unwrap();
                        prop_assert_eq!(Some(&report.to_string()), case.imaging.get(name));
                    }
                    ToolKind::Guidelines => {
                        prop_assert!(diagnosis_matches(call.input.as_deref().unwrap(), &case.accepted_diagnoses));
                        prop_assert_eq!(&response.text, &tools::render_guidelines(&case.guidelines));
                    }
                    _ => {}
                }
            }
            state = next;
        }
        prop_assert!(data_once.values().all(|&n| n <= 1), "{:?}", data_once);
        let unique: BTreeSet<&String> = lab_hits.iter().collect();
        prop_assert_eq!(unique.len(), lab_hits.len());
    }

    #[test]
    fn scratchpad_grows_by_one_step(steps in proptest::collection::vec(step(), 0..8)) {
        for k in 0..steps.len() {
            let before = serialize_transcript("q", &steps[..k]);
            let after = serialize_transcript("q", &steps[..k + 1]);
            let added = serialize_step(&steps[k]);
            prop_assert_eq!(after.strip_prefix(before.as_str()), Some(added.as_str()));
        }
    }

    #[test]
    fn scripted_runs_are_bounded_replayable_and_grounded(
        i in case_index(),
        script in proptest::collection::vec(script_line(), 0..30),
        max_steps in 1usize..12,
    ) {
        let case = &corpus().cases()[i];
        let config = RunConfig { max_steps, ..RunConfig::default() };
        let run = || run_case(case, menu(), 0, &ScriptedBackend::new("s", script.clone()), config).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.to_jsonl(), b.to_jsonl());
        prop_assert!(Termination::ALL.contains(&a.termination));
        prop_assert!(a.steps.len() <= max_steps);

        // Every observation must be what the environment would say.
        let registered = tools::register_tools(case, menu(), true);
        let mut state = ToolState::default();
        for step in &a.steps {
            if let Some(call) = &step.action {
                let (response, next) = tools::dispatch(call, case, menu(), &registered, &state);
                prop_assert_eq!(Some(&response), step.tool_response.as_ref());
                prop_assert!(!response.text.contains("Observation:"));
                state = next;
            }
        }
    }

    #[test]
    fn completions_never_carry_observations(raw in "\\PC{0,40}(Observation:\\PC{0,40})?") {
        let case = &corpus().cases()[0];
        let ctx = TurnContext { case, steps: &[], rag_enabled: true };
        let backend = ScriptedBackend::new("s", vec![raw.clone()]);
        let completion = backend.complete(&oracle_request(), &ctx).unwrap();
        prop_assert!(!completion.text.contains("Observation:"));
        prop_assert!(raw.starts_with(&completion.text));
        prop_assert_eq!(truncate_at_stop(&completion.text, &oracle_request().stop_sequences), completion.text.as_str());
    }

    #[test]
    fn oracle_completion_is_referentially_transparent(i in case_index(), taken in 0usize..12) {
        let case = &corpus().cases()[i];
        let steps = vec![AgentStep::default(); taken];
        let ctx = TurnContext { case, steps: &steps, rag_enabled: true };
        let backend = OracleBackend::default();
        let a = backend.complete(&oracle_request(), &ctx).unwrap();
        let b = backend.complete(&oracle_request(), &ctx).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tool_list_names_each_tool_once(i in case_index(), rag in any::<bool>()) {
        let case = &corpus().cases()[i];
        let registered = tools::register_tools(case, menu(), rag);
        let list = render_tool_list(&registered);
        for tool in &registered {
            let prefix = format!("{}: ", tool.name);
            prop_assert_eq!(list.lines().filter(|l| l.starts_with(&prefix)).count(), 1);
        }
    }

    #[test]
    fn repeated_calls_are_loops(call in tool_call(), threshold in 2usize..6, prefix in proptest::collection::vec(step(), 0..4)) {
        let repeat = AgentStep { action: Some(call), ..Default::default() };
        let mut steps = prefix;
        steps.extend(std::iter::repeat_n(repeat, threshold));
        prop_assert!(detect_loop(&steps, threshold));
    }

    #[test]
    fn token_count_matches_word_oracle(words in proptest::collection::vec("[a-z]{1,6}", 0..400), gap in "[ \n\t]{1,3}") {
        let text = words.join(&gap);
        let expected = (words.len() as f64 / 0.75).ceil() as usize;
        prop_assert_eq!(count_tokens(&text), expected);
    }

    #[test]
    fn cascade_never_increases_and_is_idempotent(card in score_card()) {
        let once = apply_cascade(card.clone());
        for metric in Metric::ALL {
            prop_assert!(once.grade(metric) <= card.grade(metric));
        }
        prop_assert_eq!(once.hallucination_resistance, card.hallucination_resistance);
        prop_assert_eq!(apply_cascade(once.clone()), once);
    }

    #[test]
    fn aggregation_is_order_free_pooled_and_representable(
        cards in proptest::collection::vec(score_card(), 1..40),
        split in 0usize..40,
        group in select(vec![GroupBy::Specialty, GroupBy::Difficulty, GroupBy::Overall]),
    ) {
        let cards: Vec<ScoreCard> = cards.into_iter().map(apply_cascade).collect();
        let grid = aggregate(&cards, group, corpus()).unwrap();
        let mut reversed = cards.clone();
        reversed.reverse();
        prop_assert_eq!(&grid, &aggregate(&reversed, group, corpus()).unwrap());

        let split = split.min(cards.len());
        let left = aggregate(&cards[..split], group, corpus()).unwrap();
        let right = aggregate(&cards[split..], group, corpus()).unwrap();
        for row in &grid.rows {
            let parts: Vec<_> = [&left, &right].into_iter().filter_map(|g| g.row(&row.backend, &row.group)).collect();
            let n: usize = parts.iter().map(|r| r.n).sum();
            prop_assert_eq!(n, row.n);
            for m in 0..4 {
                let sum: u32 = parts.iter().map(|r| r.sums[m]).sum();
                prop_assert_eq!(sum, row.sums[m]);
                prop_assert!((row.percentages[m] - 100.0 * f64::from(sum) / (2.0 * n as f64)).abs() < 1e-9);
            }
            for pct in row.percentages {
                prop_assert!((0.0..=100.0).contains(&pct));
                prop_assert!(representability_audit(pct, row.n));
            }
        }
    }
}
