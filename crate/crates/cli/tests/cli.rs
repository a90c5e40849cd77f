use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ebm_cli::{
    cmd_grade, cmd_replay, cmd_report, cmd_run, cmd_validate, read_transcript, BatchManifest, CliError, GradeArgs,
    ReportArgs,
};
use ebm_core::case_model::{CaseError, Corpus};
use ebm_core::evaluation::GroupBy;
use ebm_core::protocol::{RunConfig, Termination};
use ebm_core::tools::{ResponseKind, ToolKind};
use serde_json::json;
use tempfile::TempDir;

fn core_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core")
}

fn corpus_dir() -> PathBuf {
    core_dir().join("corpus")
}

fn fixture(name: &str) -> PathBuf {
    core_dir().join("tests/fixtures").join(name)
}

fn copy_corpus(to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(corpus_dir()).unwrap() {
        let path = entry.unwrap().path();
        fs::copy(&path, to.join(path.file_name().unwrap())).unwrap();
    }
}

fn manifest(backend: PathBuf, out_dir: PathBuf) -> BatchManifest {
    BatchManifest {
        corpus: corpus_dir(),
        backend,
        config: RunConfig::default(),
        identity: None,
        parallel: 4,
        out_dir,
    }
}

fn output(f: impl FnOnce(&mut Vec<u8>)) -> String {
    let mut buf = Vec::new();
    f(&mut buf);
    String::from_utf8(buf).unwrap()
}

#[test]
fn validate_reports_distribution() {
    let mut ok = false;
    let text = output(|out| ok = cmd_validate(&corpus_dir(), out).unwrap());
    assert!(ok);
    assert!(text.contains("25 cases: 12 easy, 7 medium, 6 hard"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 25);
}

#[test]
fn validate_lists_bad_files_and_keeps_going() {
    let dir = TempDir::new().unwrap();
    copy_corpus(dir.path());
    fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let mut ok = true;
    let text = output(|out| ok = cmd_validate(dir.path(), out).unwrap());
    assert!(!ok);
    assert!(text.contains("FAIL broken.json: malformed JSON"), "{text}");
    assert!(text.contains("25 cases"));

    let status = Command::new(env!("CARGO_BIN_EXE_ebm")).arg("validate").arg(dir.path()).output().unwrap();
    assert!(!status.status.success());
    let status = Command::new(env!("CARGO_BIN_EXE_ebm")).arg("validate").arg(corpus_dir()).output().unwrap();
    assert!(status.status.success());
}

#[test]
fn validate_rejects_empty_directory() {
    let dir = TempDir::new().unwrap();
    let err = cmd_validate(dir.path(), &mut Vec::new()).unwrap_err();
    assert!(matches!(err, CliError::Case(CaseError::EmptyCorpus)), "{err}");
}

#[test]
fn oracle_batch_replays_without_divergence_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    let summary = cmd_run(&manifest(fixture("oracle_backend.json"), first.clone()), &mut Vec::new()).unwrap();
    assert_eq!(summary.runs, 25);
    assert_eq!(summary.terminations.get(&Termination::FinalAnswer), Some(&25));
    assert_eq!(summary.restarts, 0);

    let mut serial = manifest(fixture("oracle_backend.json"), second.clone());
    serial.parallel = 1;
    cmd_run(&serial, &mut Vec::new()).unwrap();
    for path in &summary.files {
        let name = path.file_name().unwrap();
        assert_eq!(fs::read(path).unwrap(), fs::read(second.join(name)).unwrap());
        let text = output(|out| assert!(cmd_replay(path, &corpus_dir(), out).unwrap()));
        assert_eq!(text, "identical\n");
    }
}

#[test]
fn golden_fixture_replays_identically_and_detects_drift() {
    let text = output(|out| assert!(cmd_replay(&fixture("sample_run_golden.jsonl"), &corpus_dir(), out).unwrap()));
    assert_eq!(text, "identical\n");

    let dir = TempDir::new().unwrap();
    copy_corpus(dir.path());
    let case_path = dir.path().join("internal-medicine-4.json");
    let edited = fs::read_to_string(&case_path).unwrap().replace("0.1 ng/mL", "0.4 ng/mL");
    fs::write(&case_path, edited).unwrap();
    let mut same = true;
    let text = output(|out| same = cmd_replay(&fixture("sample_run_golden.jsonl"), dir.path(), out).unwrap());
    assert!(!same);
    assert!(text.starts_with("divergence at step 5 (Lab investigation tool)"), "{text}");
    assert!(text.contains("1 divergent step(s)"));
}

#[test]
fn replay_requires_a_known_case() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.jsonl");
    let golden = fs::read_to_string(fixture("sample_run_golden.jsonl")).unwrap();
    fs::write(&path, golden.replace("internal-medicine-4", "no-such-case")).unwrap();
    let err = cmd_replay(&path, &corpus_dir(), &mut Vec::new()).unwrap_err();
    assert!(matches!(err, CliError::MissingCase(ref id) if id == "no-such-case"), "{err}");
}

#[test]
fn garbage_first_backend_restarts_are_counted() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("script.json"), json!(["hmm", "Final Answer: refer"]).to_string()).unwrap();
    let config = dir.path().join("backend.json");
    fs::write(&config, json!({"kind": "scripted", "script": "script.json"}).to_string()).unwrap();
    let text = output(|out| {
        let summary = cmd_run(&manifest(config.clone(), dir.path().join("runs")), out).unwrap();
        assert_eq!(summary.restarts, 25);
    });
    assert!(text.contains("restarts: 25"), "{text}");
    assert!(text.contains("final_answer: 25"));
}

#[test]
fn disabling_rag_withholds_guidelines_and_identity_is_recorded() {
    let dir = TempDir::new().unwrap();
    let mut m = manifest(fixture("oracle_backend.json"), dir.path().to_path_buf());
    m.config.rag_enabled = false;
    m.identity = Some("Clinical Geneticist".into());
    let summary = cmd_run(&m, &mut Vec::new()).unwrap();
    for path in &summary.files {
        let t = read_transcript(path).unwrap();
        assert!(!t.rag_enabled);
        assert_eq!(t.identity, "Clinical Geneticist");
        for step in &t.steps {
            let guideline_data = step.action.as_ref().is_some_and(|c| ToolKind::from_name(&c.tool_name) == Some(ToolKind::Guidelines))
                && step.tool_response.as_ref().is_some_and(|r| r.kind == ResponseKind::Data);
            assert!(!guideline_data, "{}", path.display());
        }
    }
}

fn card(case_id: &str, backend: &str, g: [u8; 4]) -> serde_json::Value {
    json!({
        "case_id": case_id, "question_index": 0, "backend": backend,
        "correctness": g[0], "tool_use": g[1], "guideline_conformity": g[2], "hallucination_resistance": g[3],
        "grader": "fixture", "rationale": ""
    })
}

#[test]
fn report_percentages_and_denominators() {
    let corpus = Corpus::load_dir(corpus_dir()).unwrap();
    let cardiology: Vec<&str> = corpus
        .cases()
        .iter()
        .filter(|c| c.specialty == "Cardiology")
        .map(|c| c.case_id.as_str())
        .collect();
    // Correctness averages 1.6 over five cardiology questions; the
    // "zeros" backend is all 0.
    let mut cards: Vec<serde_json::Value> = cardiology
        .iter()
        .zip([2, 2, 2, 1, 1])
        .map(|(id, c)| card(id, "model", [c, 2, 2, 2]))
        .collect();
    cards.extend(corpus.cases().iter().map(|c| card(&c.case_id, "zeros", [0, 0, 0, 0])));
    let dir = TempDir::new().unwrap();
    let annotations = dir.path().join("grades.json");
    fs::write(&annotations, serde_json::to_string(&cards).unwrap()).unwrap();

    let out_dir = dir.path().join("report");
    let args = ReportArgs {
        annotations: &annotations,
        corpus: &corpus_dir(),
        group_by: GroupBy::Specialty,
        transcripts: None,
        aliases: None,
        out_dir: &out_dir,
    };
    let text = output(|out| cmd_report(&args, out).unwrap());
    assert!(text.contains("Cardiology\t5\t80%\t100%\t100%\t100%"), "{text}");
    let csv = fs::read_to_string(out_dir.join("report_specialty.csv")).unwrap();
    assert!(csv.contains("model,Cardiology,5,80.0,100.0,100.0,100.0"), "{csv}");
    assert!(csv.contains("zeros,Genetics,5,0.0,0.0,0.0,0.0"), "{csv}");

    let args = ReportArgs { group_by: GroupBy::Difficulty, ..args };
    cmd_report(&args, &mut Vec::new()).unwrap();
    let csv = fs::read_to_string(out_dir.join("report_difficulty.csv")).unwrap();
    let zeros: Vec<&str> = csv.lines().filter(|l| l.starts_with("zeros,")).collect();
    assert_eq!(zeros, ["zeros,Easy,12,0.0,0.0,0.0,0.0", "zeros,Medium,7,0.0,0.0,0.0,0.0", "zeros,Hard,6,0.0,0.0,0.0,0.0"]);

    // Identical inputs give identical files.
    let before = fs::read(out_dir.join("report_difficulty.csv")).unwrap();
    cmd_report(&args, &mut Vec::new()).unwrap();
    assert_eq!(before, fs::read(out_dir.join("report_difficulty.csv")).unwrap());
}

#[test]
fn grade_cascades_flags_names_and_rejects_dangling_cards() {
    let dir = TempDir::new().unwrap();
    let runs = dir.path().join("runs");
    fs::create_dir_all(&runs).unwrap();
    // A run that orders an investigation by its long name.
    let golden = fs::read_to_string(fixture("sample_run_golden.jsonl")).unwrap();
    fs::write(runs.join("golden.jsonl"), golden.replace("\"input\":\"SERUM TROPONINS\"", "\"input\":\"ARTERIAL BLOOD GAS\"")).unwrap();
    let aliases = dir.path().join("aliases.json");
    fs::write(&aliases, json!({"Arterial blood gas": "ABG"}).to_string()).unwrap();
    let annotations = dir.path().join("grades.json");
    fs::write(&annotations, json!([card("internal-medicine-4", "sample_run", [0, 2, 2, 1])]).to_string()).unwrap();

    let out_dir = dir.path().join("out");
    let args = GradeArgs {
        transcripts: &runs,
        annotations: &annotations,
        corpus: &corpus_dir(),
        aliases: Some(&aliases),
        out_dir: &out_dir,
    };
    let graded = cmd_grade(&args, &mut Vec::new()).unwrap();
    assert_eq!(graded[0].tool_use.value(), 0);
    assert_eq!(graded[0].guideline_conformity.value(), 0);
    assert_eq!(graded[0].hallucination_resistance.value(), 1);
    let flags = fs::read_to_string(out_dir.join("name_flags.txt")).unwrap();
    assert!(flags.contains("ARTERIAL BLOOD GAS\t"), "{flags}");
    assert!(flags.trim_end().ends_with("\tABG"), "{flags}");
    assert!(out_dir.join("report_specialty.csv").exists());
    assert!(out_dir.join("report_difficulty.csv").exists());

    fs::write(&annotations, json!([card("internal-medicine-4", "other", [2, 2, 2, 2])]).to_string()).unwrap();
    let err = cmd_grade(&args, &mut Vec::new()).unwrap_err();
    assert!(matches!(err, CliError::DanglingAnnotations(ref runs) if runs == &["internal-medicine-4#0@other"]), "{err}");
}
