//! Command-line front end. Settings resolve as flags, then environment,
//! then the `--config` TOML file, then built-in defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::annotators::{
    default_demonstrations, AnnotatorConfig, Demonstration, FailureInjection, FixtureStore, HttpLinguisticAnnotator,
    HttpVisualAnnotator, LinguisticAnnotator, MockLinguisticAnnotator, MockVisualAnnotator, VisualAnnotator,
    DEFAULT_GUIDELINE, ENV_GROUND_URL, ENV_HTTP_RETRIES, ENV_LLM_URL, ENV_OCR_URL,
};
use crate::attn::{attend, Matrix, MemoryState, TurnKV};
use crate::dataset::{self, DatasetError, PromptConfig};
use crate::metric::{MetricConfig, Smoothing};
use crate::pipeline::{self, EvalRecord, GenerateOptions};
use crate::tree::{MatchConfig, MatchMode, TreeConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Schema(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Schema(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Schema { .. } => CliError::Schema(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "comforge", version, about = "Synthesize, convert and score chain-of-manipulations VQA data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate chains for a VQA corpus and keep the answer-reaching paths
    Generate(Box<GenerateArgs>),
    /// Convert com.jsonl into multi-turn samples
    Convert(ConvertArgs),
    /// Score predicted chains against gold chains
    Eval(EvalArgs),
    /// Print corpus statistics for a com.jsonl file
    Stats(StatsArgs),
    /// Run the memory attention on random turns and print the weights
    AttnDemo(AttnDemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchModeArg {
    Normalized,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingArg {
    Off,
    AddOne,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML file with default settings
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// VQA corpus, one {image, question, answer} object per line
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Directory image paths are relative to [default: the input file's directory]
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Linguistic annotator endpoint [env: COMFORGE_LLM_URL]
    #[arg(long, value_name = "URL")]
    pub llm_url: Option<String>,
    /// Grounding endpoint [env: COMFORGE_GROUND_URL]
    #[arg(long, value_name = "URL")]
    pub ground_url: Option<String>,
    /// OCR endpoint [env: COMFORGE_OCR_URL]
    #[arg(long, value_name = "URL")]
    pub ocr_url: Option<String>,
    /// Fixture file answering completion requests
    #[arg(long, value_name = "FILE")]
    pub mock_llm: Option<PathBuf>,
    /// Fixture file answering grounding and OCR requests (repeatable)
    #[arg(long, value_name = "FILE")]
    pub mock_visual: Vec<PathBuf>,
    /// Fraction of mock grounding calls that fail
    #[arg(long, value_name = "RATE")]
    pub mock_fail_rate: Option<f64>,
    /// Seed deciding which mock grounding calls fail
    #[arg(long, value_name = "SEED")]
    pub mock_fail_seed: Option<u64>,
    /// Attempts per annotator call [env: COMFORGE_HTTP_RETRIES] [default: 3]
    #[arg(long, value_name = "N")]
    pub retries: Option<u32>,
    /// First retry delay in milliseconds, doubled per attempt [default: 200]
    #[arg(long, value_name = "MS")]
    pub backoff_ms: Option<u64>,
    /// Per-request timeout in seconds [default: 60]
    #[arg(long, value_name = "SECS")]
    pub timeout_secs: Option<u64>,
    /// Maximum concurrent requests per annotator
    #[arg(long, value_name = "N")]
    pub max_in_flight: Option<usize>,
    /// Grounding boxes scoring below this are dropped [default: 0.25]
    #[arg(long, value_name = "SCORE")]
    pub min_confidence: Option<f64>,
    /// Boxes kept per grounding call [default: 4]
    #[arg(long, value_name = "N")]
    pub max_boxes: Option<usize>,
    /// Maximum tree nodes per question [default: 256]
    #[arg(long, value_name = "N")]
    pub node_budget: Option<usize>,
    /// How terminal answers are compared with the golden answer [default: normalized]
    #[arg(long, value_enum, value_name = "MODE")]
    pub match_mode: Option<MatchModeArg>,
    /// Keep only the first positive path per question
    #[arg(long)]
    pub first_only: bool,
    /// Questions processed in parallel [default: 1]
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Text file replacing the built-in annotator guideline
    #[arg(long, value_name = "FILE")]
    pub guideline: Option<PathBuf>,
    /// JSONL of {question, solution} demonstrations replacing the built-in five
    #[arg(long, value_name = "FILE")]
    pub demos: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// TOML file with default settings
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// com.jsonl produced by generate
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Destination multiturn.jsonl
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Probability of prepending a launching prompt [default: 0.5]
    #[arg(long, value_name = "P")]
    pub launch_probability: Option<f64>,
    /// Seed for launching-prompt sampling; required when the probability is positive
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Prompt used for every turn after the first
    #[arg(long, value_name = "TEXT")]
    pub continuation_prompt: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// TOML file with default settings
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Predicted chains, one {id, steps|segments, answer} object per line
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Gold chains in the same format
    #[arg(long, value_name = "FILE")]
    pub gold: PathBuf,
    /// Divide the weighted score by this (1 or 2) [default: 2]
    #[arg(long, value_name = "N")]
    pub divisor: Option<u8>,
    /// BLEU smoothing [default: off]
    #[arg(long, value_enum, value_name = "MODE")]
    pub smoothing: Option<SmoothingArg>,
    /// Write the report here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// com.jsonl to summarize
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttnDemoArgs {
    /// Memory length threshold in rows
    #[arg(long, value_name = "N")]
    pub max_len: usize,
    /// Key and value width
    #[arg(long, value_name = "D", default_value_t = 4)]
    pub head_dim: usize,
    /// Rows per turn, comma separated
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_values_t = [3, 2])]
    pub turn_rows: Vec<usize>,
    /// Query rows
    #[arg(long, value_name = "N", default_value_t = 2)]
    pub query_rows: usize,
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    pub seed: u64,
}

/// Keys accepted in the `--config` file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub llm_url: Option<String>,
    pub ground_url: Option<String>,
    pub ocr_url: Option<String>,
    pub mock_llm: Option<PathBuf>,
    pub mock_visual: Option<Vec<PathBuf>>,
    pub mock_fail_rate: Option<f64>,
    pub mock_fail_seed: Option<u64>,
    pub retries: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub timeout_secs: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub min_confidence: Option<f64>,
    pub max_boxes: Option<usize>,
    pub node_budget: Option<usize>,
    pub match_mode: Option<MatchModeArg>,
    pub first_only: Option<bool>,
    pub jobs: Option<usize>,
    pub guideline: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    pub launch_probability: Option<f64>,
    pub seed: Option<u64>,
    pub continuation_prompt: Option<String>,
    pub divisor: Option<u8>,
    pub smoothing: Option<SmoothingArg>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut cfg.input);
        fix(&mut cfg.images);
        fix(&mut cfg.out);
        fix(&mut cfg.mock_llm);
        fix(&mut cfg.guideline);
        fix(&mut cfg.demos);
        if let Some(v) = cfg.mock_visual.as_mut() {
            for p in v.iter_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn load_opt(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(FileConfig::default()), FileConfig::load)
    }
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn env_retries() -> Result<Option<u32>, CliError> {
    env_var(ENV_HTTP_RETRIES)
        .map(|v| v.parse().map_err(|_| CliError::Usage(format!("{ENV_HTTP_RETRIES} must be a positive integer, got {v:?}"))))
        .transpose()
}

#[derive(Debug, PartialEq)]
enum Source<M> {
    Mock(M),
    Live,
}

/// Picks mock or live for one annotator: the highest-precedence level that
/// configures either wins, and configuring both at one level is an error.
/// Levels are 0 = flags, 1 = environment, 2 = config file.
fn pick_source<M>(what: &str, mock: Option<(usize, M)>, live_levels: &[Option<usize>]) -> Result<Source<M>, CliError> {
    let live = live_levels.iter().flatten().min().copied();
    match (mock, live) {
        (Some((m, _)), Some(l)) if m == l => Err(CliError::Usage(format!(
            "{what}: mock fixtures and a live endpoint are both configured; choose one"
        ))),
        (Some((m, fx)), Some(l)) if m < l => Ok(Source::Mock(fx)),
        (Some(_), Some(_)) => Ok(Source::Live),
        (Some((_, fx)), None) => Ok(Source::Mock(fx)),
        (None, Some(_)) => Ok(Source::Live),
        (None, None) => Err(CliError::Usage(format!("{what}: no annotator configured"))),
    }
}

/// `(level, value)` of the first source that provides a value.
fn first_level<T>(levels: [Option<T>; 3]) -> Option<(usize, T)> {
    levels.into_iter().enumerate().find_map(|(i, v)| v.map(|v| (i, v)))
}

fn load_fixtures(paths: &[PathBuf]) -> Result<FixtureStore, CliError> {
    let mut store = FixtureStore::default();
    for p in paths {
        if !p.exists() {
            return Err(CliError::Io(format!("fixture file not found: {}", p.display())));
        }
        store.extend_from(p).map_err(|e| CliError::Schema(e.to_string()))?;
    }
    Ok(store)
}

fn run_generate(a: GenerateArgs) -> Result<(), CliError> {
    let file = FileConfig::load_opt(a.config.as_deref())?;
    let input = a.input.or(file.input).ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let out = a.out.or(file.out).ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let image_root = a
        .images
        .or(file.images)
        .unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());

    let defaults = AnnotatorConfig::default();
    let annotator = AnnotatorConfig {
        min_confidence: a.min_confidence.or(file.min_confidence).unwrap_or(defaults.min_confidence),
        max_boxes: a.max_boxes.or(file.max_boxes).unwrap_or(defaults.max_boxes),
        retries: a.retries.or(env_retries()?).or(file.retries).unwrap_or(defaults.retries).max(1),
        backoff: a.backoff_ms.or(file.backoff_ms).map_or(defaults.backoff, Duration::from_millis),
        timeout: a.timeout_secs.or(file.timeout_secs).map_or(defaults.timeout, Duration::from_secs),
        max_in_flight: a.max_in_flight.or(file.max_in_flight),
    };
    let fail_rate = a.mock_fail_rate.or(file.mock_fail_rate).unwrap_or(0.0);
    if !(0.0..=1.0).contains(&fail_rate) {
        return Err(CliError::Usage("--mock-fail-rate must be within [0, 1]".into()));
    }
    let fail_seed = a.mock_fail_seed.or(file.mock_fail_seed);
    if fail_rate > 0.0 && fail_seed.is_none() {
        return Err(CliError::Usage("--mock-fail-rate needs --mock-fail-seed".into()));
    }

    let llm_levels = [a.llm_url.clone(), env_var(ENV_LLM_URL), file.llm_url.clone()];
    let llm_source = pick_source(
        "linguistic annotator",
        first_level([a.mock_llm.clone(), None, file.mock_llm.clone()]),
        &[first_level(llm_levels.clone()).map(|(l, _)| l)],
    )?;
    let linguistic: Box<dyn LinguisticAnnotator> = match llm_source {
        Source::Mock(path) => Box::new(MockLinguisticAnnotator::new(load_fixtures(&[path])?)),
        Source::Live => {
            let (_, url) = first_level(llm_levels).expect("live source has a url");
            Box::new(HttpLinguisticAnnotator::new(url, annotator.clone()))
        }
    };

    let ground_levels = [a.ground_url.clone(), env_var(ENV_GROUND_URL), file.ground_url.clone()];
    let ocr_levels = [a.ocr_url.clone(), env_var(ENV_OCR_URL), file.ocr_url.clone()];
    let flag_visual = (!a.mock_visual.is_empty()).then(|| a.mock_visual.clone());
    let visual_source = pick_source(
        "visual annotator",
        first_level([flag_visual, None, file.mock_visual.clone()]),
        &[
            first_level(ground_levels.clone()).map(|(l, _)| l),
            first_level(ocr_levels.clone()).map(|(l, _)| l),
        ],
    )?;
    let visual: Box<dyn VisualAnnotator> = match visual_source {
        Source::Mock(paths) => {
            let mut mock = MockVisualAnnotator::new(load_fixtures(&paths)?);
            if let (true, Some(seed)) = (fail_rate > 0.0, fail_seed) {
                mock = mock.with_grounding_failures(FailureInjection { rate: fail_rate, seed }, annotator.retries);
            }
            Box::new(mock)
        }
        Source::Live => {
            let g = first_level(ground_levels).map(|(_, u)| u);
            let o = first_level(ocr_levels).map(|(_, u)| u);
            match (g, o) {
                (Some(g), Some(o)) => Box::new(HttpVisualAnnotator::new(g, o, annotator.clone())),
                _ => return Err(CliError::Usage("live visual annotation needs both --ground-url and --ocr-url".into())),
            }
        }
    };

    let guideline = match a.guideline.or(file.guideline) {
        Some(p) => std::fs::read_to_string(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        None => DEFAULT_GUIDELINE.to_string(),
    };
    let demonstrations: Vec<Demonstration> = match a.demos.or(file.demos) {
        Some(p) => dataset::read_jsonl(&p)?,
        None => default_demonstrations(),
    };
    if demonstrations.is_empty() {
        return Err(CliError::Usage("the demonstration file is empty".into()));
    }

    let mode = match a.match_mode.or(file.match_mode).unwrap_or(MatchModeArg::Normalized) {
        MatchModeArg::Normalized => MatchMode::Normalized,
        MatchModeArg::Numeric => MatchMode::Numeric,
    };
    let opts = GenerateOptions {
        image_root,
        tree: TreeConfig {
            annotator,
            node_budget: a.node_budget.or(file.node_budget).unwrap_or(TreeConfig::default().node_budget),
            ..TreeConfig::default()
        },
        matcher: MatchConfig { mode },
        first_only: a.first_only || file.first_only.unwrap_or(false),
        jobs: a.jobs.or(file.jobs).unwrap_or(1),
        guideline,
        demonstrations,
    };

    let loaded = dataset::load_vqa_jsonl(&input)?;
    for e in &loaded.errors {
        eprintln!("warning: {}:{}: {}", input.display(), e.line, e.message);
    }
    let output = pipeline::generate(&loaded.records, loaded.errors.clone(), linguistic.as_ref(), visual.as_ref(), &opts);
    pipeline::write_generate_output(&output, &out)?;
    let report = output.report.expect("generate always reports");
    for q in report.questions.iter().filter(|q| q.error.is_some()) {
        eprintln!("warning: question {}: {}", q.id, q.error.as_deref().unwrap_or_default());
    }
    println!("{}", serde_json::to_string(&report.search).expect("report serializes"));
    Ok(())
}

fn run_convert(a: ConvertArgs) -> Result<(), CliError> {
    let file = FileConfig::load_opt(a.config.as_deref())?;
    let input = a.input.or(file.input).ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let out = a.out.or(file.out).ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let p = a.launch_probability.or(file.launch_probability).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&p) {
        return Err(CliError::Usage("--launch-probability must be within [0, 1]".into()));
    }
    let seed = match a.seed.or(file.seed) {
        Some(s) => s,
        None if p > 0.0 => return Err(CliError::Usage("--seed is required when --launch-probability > 0".into())),
        None => 0,
    };
    let mut prompts = PromptConfig { launch_probability: p, ..PromptConfig::default() };
    if let Some(c) = a.continuation_prompt.or(file.continuation_prompt) {
        prompts.continuation_prompt = c;
    }
    let samples = dataset::read_com_jsonl(&input)?;
    let converted = pipeline::convert(&samples, &prompts, seed);
    dataset::write_multiturn_jsonl(&converted, &out)?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), CliError> {
    let file = FileConfig::load_opt(a.config.as_deref())?;
    let divisor = a.divisor.or(file.divisor).unwrap_or(2);
    if divisor != 1 && divisor != 2 {
        return Err(CliError::Usage("--divisor must be 1 or 2".into()));
    }
    let smoothing = match a.smoothing.or(file.smoothing).unwrap_or(SmoothingArg::Off) {
        SmoothingArg::Off => Smoothing::Off,
        SmoothingArg::AddOne => Smoothing::AddOne,
    };
    let pred: Vec<EvalRecord> = dataset::read_jsonl(&a.pred)?;
    let gold: Vec<EvalRecord> = dataset::read_jsonl(&a.gold)?;
    let summary = pipeline::evaluate(&pred, &gold, &MetricConfig { divisor, smoothing });
    for id in summary.unmatched_pred.iter().chain(&summary.unmatched_gold) {
        eprintln!("warning: id {id} has no counterpart");
    }
    for id in &summary.unparsed {
        eprintln!("warning: id {id} has unparseable steps");
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    match a.out {
        Some(p) => std::fs::write(&p, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_stats(a: StatsArgs) -> Result<(), CliError> {
    let samples = dataset::read_com_jsonl(&a.input)?;
    let stats = dataset::compute_stats(&samples);
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

fn run_attn_demo(a: AttnDemoArgs) -> Result<(), CliError> {
    if a.head_dim == 0 || a.max_len == 0 {
        return Err(CliError::Usage("--max-len and --head-dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut state = MemoryState::new(a.max_len, a.head_dim);
    for (t, &rows) in a.turn_rows.iter().enumerate() {
        let keys = random_matrix(&mut rng, rows, a.head_dim);
        let values = random_matrix(&mut rng, rows, a.head_dim);
        let turn = TurnKV::new(keys, values, t).map_err(|e| CliError::Usage(e.to_string()))?;
        state = state.append_turn(&turn).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let query = random_matrix(&mut rng, a.query_rows, a.head_dim);
    let out = attend(&query, &state).map_err(|e| CliError::Usage(e.to_string()))?;
    let json = serde_json::json!({
        "max_len": a.max_len,
        "head_dim": a.head_dim,
        "turn_rows": a.turn_rows,
        "memory_len": state.len(),
        "weights": out.weights.to_rows(),
        "output": out.output.to_rows(),
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("demo serializes"));
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => run_generate(*a),
        Command::Convert(a) => run_convert(a),
        Command::Eval(a) => run_eval(a),
        Command::Stats(a) => run_stats(a),
        Command::AttnDemo(a) => run_attn_demo(a),
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
