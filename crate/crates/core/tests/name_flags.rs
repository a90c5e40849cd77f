use std::collections::BTreeMap;

use ebm_core::case_model::{Corpus, InvestigationMenu};
use ebm_core::evaluation::{flag_name_mismatches, nearest_name};
use ebm_core::protocol::{AgentStep, Termination, Transcript};
use ebm_core::tools::{ToolCall, ToolKind};
use proptest::prelude::*;

/// Textbook recursive edit distance, memoized.
fn brute_levenshtein(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let d = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), d);
        d
    }
    go(a, b, 0, 0, &mut BTreeMap::new())
}

fn distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.to_uppercase().chars().collect();
    let b: Vec<char> = b.to_uppercase().chars().collect();
    brute_levenshtein(&a, &b)
}

fn menu() -> InvestigationMenu {
    Corpus::load_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/corpus")).unwrap().menu()
}

fn transcript(calls: Vec<ToolCall>) -> Transcript {
    Transcript {
        case_id: "internal-medicine-4".into(),
        question_index: 0,
        question: "q".into(),
        backend: "b".into(),
        identity: "professor of medicine".into(),
        rag_enabled: true,
        steps: calls
            .into_iter()
            .map(|c| AgentStep { action: Some(c), ..Default::default() })
            .collect(),
        termination: Termination::StepLimit,
        restart_count: 0,
        token_usage: vec![],
        events: vec![],
    }
}

#[test]
fn near_miss_on_troponins() {
    let menu = menu();
    let t = transcript(vec![ToolCall::new("Lab investigation tool", Some("SERUM TROPONIN"))]);
    let flags = flag_name_mismatches(&t, &menu, &BTreeMap::new());
    assert_eq!(flags.len(), 1);
    assert_eq!(flags[0].nearest.as_deref(), Some("SERUM TROPONINS"));
    assert_eq!(flags[0].distance, Some(distance("SERUM TROPONIN", "SERUM TROPONINS")));
    assert_eq!(flags[0].distance, Some(1));
}

#[test]
fn alias_pairs_long_form_with_menu_abbreviation() {
    let menu = menu();
    assert!(menu.lab_names.contains(&"ABG".to_string()));
    let aliases = BTreeMap::from([("ARTERIAL BLOOD GAS".to_string(), "ABG".to_string())]);
    let t = transcript(vec![ToolCall::new("Lab investigation tool", Some("Arterial blood gas"))]);
    let flags = flag_name_mismatches(&t, &menu, &aliases);
    assert_eq!(flags.len(), 1);
    assert_eq!(flags[0].emitted, "ARTERIAL BLOOD GAS");
    assert_eq!(flags[0].alias.as_deref(), Some("ABG"));
    assert_eq!(flags[0].tool, ToolKind::LabInvestigation);
}

#[test]
fn exact_names_are_not_flagged() {
    let menu = menu();
    let t = transcript(vec![
        ToolCall::new("Lab investigation tool", Some("SERUM TROPONINS, abg")),
        ToolCall::new("Imaging study tool", Some(&menu.imaging_names[0])),
        ToolCall::new("Machine learning tool", Some("Low ejection fraction (<40%)")),
        ToolCall::new("Symptom tool", Some("anything")),
    ]);
    assert!(flag_name_mismatches(&t, &menu, &BTreeMap::new()).is_empty());
}

proptest! {
    #[test]
    fn nearest_matches_brute_force(emitted in "[A-Za-z ]{0,12}", names in proptest::collection::btree_set("[A-Z ]{1,10}", 1..8)) {
        let names: Vec<String> = names.into_iter().collect();
        let (best, d) = nearest_name(&emitted, names.iter()).unwrap();
        let oracle = names
            .iter()
            .map(|n| (distance(&emitted, n), n))
            .min()
            .unwrap();
        prop_assert_eq!((d, best), oracle);
    }
}
