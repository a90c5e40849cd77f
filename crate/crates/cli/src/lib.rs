//! Commands behind the `ebm` binary. Each takes its inputs explicitly and
//! writes human-readable output to the given writer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use ebm_core::backends::{BackendConfig, BackendError};
use ebm_core::case_model::{load_corpus_dir, CaseError, Corpus, Difficulty};
use ebm_core::evaluation::{
    aggregate, apply_cascade, flag_name_mismatches, grid_to_csv, grid_to_table, load_annotations, restart_summary,
    EvalError, GroupBy, NameFlag, ScoreCard,
};
use ebm_core::protocol::{CaseRunner, ConfigError, RunConfig, RunError, Termination, Transcript, TranscriptError};
use ebm_core::tools::{self, register_tools, ToolKind, ToolResponse, ToolState};
use thiserror::Error;
use tracing::{info, warn};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Transcript { path: PathBuf, source: TranscriptError },
    #[error("{0}: no such file or directory")]
    MissingPath(PathBuf),
    #[error("transcript references unknown case {0}")]
    MissingCase(String),
    #[error("annotations reference runs with no transcript: {}", .0.join(", "))]
    DanglingAnnotations(Vec<String>),
    #[error("{path}: {message}")]
    Aliases { path: PathBuf, message: String },
    #[error("identity must be a single line of plain text")]
    Identity,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingPath(path.to_path_buf()))
    }
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(io_err(Path::new("<stdout>")))
}

// ---------------------------------------------------------------- validate

/// Checks every case file. Returns false if any file failed.
pub fn cmd_validate(dir: &Path, out: &mut dyn Write) -> Result<bool, CliError> {
    require(dir)?;
    let loaded = load_corpus_dir(dir)?;
    let mut good = Vec::new();
    let mut failures = 0;
    for file in loaded {
        let name = file.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match file.result {
            Ok(case) => {
                emit(out, format!("PASS {name}"))?;
                good.push(case);
            }
            Err(err) => {
                failures += 1;
                emit(out, format!("FAIL {name}: {err}"))?;
            }
        }
    }
    if good.is_empty() {
        emit(out, format!("0 cases loaded, {failures} failed"))?;
        return Ok(false);
    }
    let corpus = match Corpus::new(good) {
        Ok(corpus) => corpus,
        Err(err) => {
            emit(out, format!("FAIL corpus: {err}"))?;
            return Ok(false);
        }
    };
    let count = |d: Difficulty| corpus.cases().iter().filter(|c| c.difficulty == d).count();
    emit(
        out,
        format!(
            "{} cases: {} easy, {} medium, {} hard",
            corpus.len(),
            count(Difficulty::Easy),
            count(Difficulty::Medium),
            count(Difficulty::Hard)
        ),
    )?;
    let mut specialties: BTreeMap<&str, usize> = BTreeMap::new();
    for case in corpus.cases() {
        *specialties.entry(&case.specialty).or_default() += 1;
    }
    let listed: Vec<String> = specialties.iter().map(|(s, n)| format!("{s} {n}")).collect();
    emit(out, format!("specialties: {}", listed.join(", ")))?;
    let menu = corpus.menu();
    emit(
        out,
        format!(
            "menu: {} labs, {} imaging studies, {} models",
            menu.lab_names.len(),
            menu.imaging_names.len(),
            menu.ml_model_names.len()
        ),
    )?;
    if failures > 0 {
        emit(out, format!("{failures} file(s) failed validation"))?;
    }
    Ok(failures == 0)
}

// --------------------------------------------------------------------- run

#[derive(Debug, Clone)]
pub struct BatchManifest {
    pub corpus: PathBuf,
    pub backend: PathBuf,
    pub config: RunConfig,
    pub identity: Option<String>,
    pub parallel: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub runs: usize,
    pub terminations: BTreeMap<Termination, usize>,
    pub restarts: u32,
    pub files: Vec<PathBuf>,
}

/// Runs every question of every case and writes one transcript per run.
pub fn cmd_run(manifest: &BatchManifest, out: &mut dyn Write) -> Result<RunSummary, CliError> {
    require(&manifest.corpus)?;
    require(&manifest.backend)?;
    if manifest.identity.as_deref().is_some_and(|i| i.trim().is_empty() || i.contains('\n')) {
        return Err(CliError::Identity);
    }
    manifest.config.validate()?;
    let corpus = Corpus::load_dir(&manifest.corpus)?;
    let menu = corpus.menu();
    let backend_config = BackendConfig::load(&manifest.backend)?;
    // Fail fast on a broken config rather than once per run.
    backend_config.build()?;
    fs::create_dir_all(&manifest.out_dir).map_err(io_err(&manifest.out_dir))?;

    let jobs: Vec<(usize, usize)> = corpus
        .cases()
        .iter()
        .enumerate()
        .flat_map(|(i, case)| (0..case.questions.len()).map(move |q| (i, q)))
        .collect();
    let next = AtomicUsize::new(0);
    type Outcome = Result<(Transcript, PathBuf), CliError>;
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = manifest.parallel.clamp(1, jobs.len().max(1));

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let slot = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, q)) = jobs.get(slot) else { break };
                let case = &corpus.cases()[i];
                let result = run_one(case, &menu, q, &backend_config, manifest);
                results.lock().unwrap_or_else(|e| e.into_inner())[slot] = Some(result);
            });
        }
    });

    let mut summary = RunSummary::default();
    for result in results.into_inner().unwrap_or_else(|e| e.into_inner()) {
        let (transcript, path) = result.expect("every job ran")?;
        summary.runs += 1;
        *summary.terminations.entry(transcript.termination).or_default() += 1;
        summary.restarts += transcript.restart_count;
        summary.files.push(path);
    }
    emit(out, format!("runs: {}", summary.runs))?;
    for termination in Termination::ALL {
        emit(
            out,
            format!("{}: {}", termination.as_str(), summary.terminations.get(&termination).copied().unwrap_or(0)),
        )?;
    }
    emit(out, format!("restarts: {}", summary.restarts))?;
    Ok(summary)
}

fn run_one(
    case: &ebm_core::CaseFile,
    menu: &ebm_core::InvestigationMenu,
    question: usize,
    backend_config: &BackendConfig,
    manifest: &BatchManifest,
) -> Result<(Transcript, PathBuf), CliError> {
    let backend = backend_config.build()?;
    let mut runner = CaseRunner::new(case, menu, manifest.config)?;
    if let Some(identity) = &manifest.identity {
        runner = runner.with_identity(identity.trim());
    }
    let transcript = runner.run(question, backend.as_ref())?;
    if transcript.termination != Termination::FinalAnswer {
        warn!(case = %case.case_id, question, termination = transcript.termination.as_str(), "run did not finish");
    }
    let path = manifest.out_dir.join(transcript.file_name());
    fs::write(&path, transcript.to_jsonl()).map_err(io_err(&path))?;
    info!(path = %path.display(), "wrote transcript");
    Ok((transcript, path))
}

// ------------------------------------------------------------------ replay

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub step: usize,
    pub tool_name: String,
    pub recorded: Option<ToolResponse>,
    pub replayed: ToolResponse,
}

pub fn read_transcript(path: &Path) -> Result<Transcript, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Transcript::from_jsonl(&text).map_err(|source| CliError::Transcript { path: path.to_path_buf(), source })
}

/// Re-dispatches every recorded action against the current corpus.
pub fn replay_transcript(transcript: &Transcript, corpus: &Corpus) -> Result<Vec<Divergence>, CliError> {
    let case = corpus
        .get(&transcript.case_id)
        .ok_or_else(|| CliError::MissingCase(transcript.case_id.clone()))?;
    let menu = corpus.menu();
    let registered = register_tools(case, &menu, transcript.rag_enabled);
    let mut state = ToolState::default();
    let mut divergences = Vec::new();
    for (index, step) in transcript.steps.iter().enumerate() {
        let Some(call) = &step.action else { continue };
        let (mut response, next) = tools::dispatch(call, case, &menu, &registered, &state);
        state = next;
        if !step.dropped_guidelines.is_empty() && ToolKind::from_name(&call.tool_name) == Some(ToolKind::Guidelines) {
            response = tools::guidelines_excluding(case, &step.dropped_guidelines);
        }
        if step.tool_response.as_ref() != Some(&response) {
            divergences.push(Divergence {
                step: index + 1,
                tool_name: call.tool_name.clone(),
                recorded: step.tool_response.clone(),
                replayed: response,
            });
        }
    }
    Ok(divergences)
}

/// Prints "identical" or one line per divergent step. Returns true when
/// the replay matched.
pub fn cmd_replay(file: &Path, corpus_dir: &Path, out: &mut dyn Write) -> Result<bool, CliError> {
    require(file)?;
    require(corpus_dir)?;
    let transcript = read_transcript(file)?;
    let corpus = Corpus::load_dir(corpus_dir)?;
    let divergences = replay_transcript(&transcript, &corpus)?;
    if divergences.is_empty() {
        emit(out, "identical")?;
        return Ok(true);
    }
    for d in &divergences {
        let recorded = d.recorded.as_ref().map(|r| r.text.as_str()).unwrap_or("<none>");
        emit(
            out,
            format!(
                "divergence at step {} ({}): recorded {:?}, replayed {:?}",
                d.step, d.tool_name, recorded, d.replayed.text
            ),
        )?;
    }
    emit(out, format!("{} divergent step(s)", divergences.len()))?;
    Ok(false)
}

// ------------------------------------------------------------ grade/report

pub fn load_transcripts(dir: &Path) -> Result<Vec<Transcript>, CliError> {
    require(dir)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_transcript(p)).collect()
}

pub fn load_aliases(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Aliases { path: path.to_path_buf(), message: e.to_string() })
}

fn run_label(key: (&str, usize, &str)) -> String {
    format!("{}#{}@{}", key.0, key.1, key.2)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn group_name(group_by: GroupBy) -> &'static str {
    match group_by {
        GroupBy::Specialty => "specialty",
        GroupBy::Difficulty => "difficulty",
        GroupBy::Overall => "overall",
    }
}

fn flags_appendix(transcripts: &[Transcript], corpus: &Corpus, aliases: &BTreeMap<String, String>) -> String {
    let menu = corpus.menu();
    let mut out = String::from("run\tstep\ttool\temitted\tnearest\tdistance\talias\n");
    for t in transcripts {
        let flags: Vec<NameFlag> = flag_name_mismatches(t, &menu, aliases);
        for f in flags {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                run_label((&t.case_id, t.question_index, &t.backend)),
                f.step_index + 1,
                f.tool.name(),
                f.emitted,
                f.nearest.unwrap_or_default(),
                f.distance.map(|d| d.to_string()).unwrap_or_default(),
                f.alias.unwrap_or_default(),
            ));
        }
    }
    out
}

fn restarts_text(transcripts: &[Transcript], corpus: &Corpus) -> Result<String, CliError> {
    let mut out = String::from("backend\tspecialty\trestarts\n");
    for summary in restart_summary(transcripts, corpus)? {
        for (specialty, n) in &summary.per_specialty {
            out.push_str(&format!("{}\t{specialty}\t{n}\n", summary.backend));
        }
        out.push_str(&format!("{}\taverage per specialty\t{:.1}\n", summary.backend, summary.mean_per_specialty));
    }
    Ok(out)
}

fn write_grid(
    cards: &[ScoreCard],
    group_by: GroupBy,
    corpus: &Corpus,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let grid = aggregate(cards, group_by, corpus)?;
    let name = group_name(group_by);
    write_file(&out_dir.join(format!("report_{name}.csv")), &grid_to_csv(&grid))?;
    let table = grid_to_table(&grid);
    write_file(&out_dir.join(format!("report_{name}.txt")), &table)?;
    emit(out, format!("by {name}:"))?;
    out.write_all(table.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

pub struct GradeArgs<'a> {
    pub transcripts: &'a Path,
    pub annotations: &'a Path,
    pub corpus: &'a Path,
    pub aliases: Option<&'a Path>,
    pub out_dir: &'a Path,
}

/// Applies the cascade to recorded grades, then writes graded cards,
/// specialty and difficulty grids, restart totals and name flags.
pub fn cmd_grade(args: &GradeArgs<'_>, out: &mut dyn Write) -> Result<Vec<ScoreCard>, CliError> {
    require(args.annotations)?;
    let corpus = Corpus::load_dir(args.corpus)?;
    let transcripts = load_transcripts(args.transcripts)?;
    let aliases = match args.aliases {
        Some(path) => load_aliases(path)?,
        None => BTreeMap::new(),
    };
    let cards = load_annotations(args.annotations)?;
    let runs: BTreeSet<(&str, usize, &str)> = transcripts
        .iter()
        .map(|t| (t.case_id.as_str(), t.question_index, t.backend.as_str()))
        .collect();
    let dangling: Vec<String> = cards
        .iter()
        .filter(|c| !runs.contains(&c.run_key()))
        .map(|c| run_label(c.run_key()))
        .collect();
    if !dangling.is_empty() {
        return Err(CliError::DanglingAnnotations(dangling));
    }
    let mut graded: Vec<ScoreCard> = cards.into_iter().map(apply_cascade).collect();
    graded.sort();

    fs::create_dir_all(args.out_dir).map_err(io_err(args.out_dir))?;
    let json = serde_json::to_string_pretty(&graded).expect("score cards serialize");
    write_file(&args.out_dir.join("graded.json"), &(json + "\n"))?;
    for group_by in [GroupBy::Specialty, GroupBy::Difficulty] {
        write_grid(&graded, group_by, &corpus, args.out_dir, out)?;
    }
    write_file(&args.out_dir.join("restarts.txt"), &restarts_text(&transcripts, &corpus)?)?;
    let flags = flags_appendix(&transcripts, &corpus, &aliases);
    write_file(&args.out_dir.join("name_flags.txt"), &flags)?;
    emit(out, format!("graded {} run(s); {} name flag(s)", graded.len(), flags.lines().count() - 1))?;
    Ok(graded)
}

pub struct ReportArgs<'a> {
    pub annotations: &'a Path,
    pub corpus: &'a Path,
    pub group_by: GroupBy,
    pub transcripts: Option<&'a Path>,
    pub aliases: Option<&'a Path>,
    pub out_dir: &'a Path,
}

/// Writes one grid for the requested grouping, plus restart totals and name
/// flags when transcripts are given.
pub fn cmd_report(args: &ReportArgs<'_>, out: &mut dyn Write) -> Result<(), CliError> {
    require(args.annotations)?;
    let corpus = Corpus::load_dir(args.corpus)?;
    let mut cards: Vec<ScoreCard> = load_annotations(args.annotations)?.into_iter().map(apply_cascade).collect();
    cards.sort();
    fs::create_dir_all(args.out_dir).map_err(io_err(args.out_dir))?;
    write_grid(&cards, args.group_by, &corpus, args.out_dir, out)?;
    if let Some(dir) = args.transcripts {
        let transcripts = load_transcripts(dir)?;
        let aliases = match args.aliases {
            Some(path) => load_aliases(path)?,
            None => BTreeMap::new(),
        };
        let restarts = restarts_text(&transcripts, &corpus)?;
        write_file(&args.out_dir.join("restarts.txt"), &restarts)?;
        write_file(&args.out_dir.join("name_flags.txt"), &flags_appendix(&transcripts, &corpus, &aliases))?;
        out.write_all(restarts.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
    }
    Ok(())
}
