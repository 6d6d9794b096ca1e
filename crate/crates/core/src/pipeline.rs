//! End-to-end drivers behind the command-line subcommands: chain generation
//! over a VQA corpus, multi-turn conversion and chain evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotators::{
    build_linguistic_prompt, request_solving_steps, Demonstration, LinguisticAnnotator, VisualAnnotator,
};
use crate::dataset::{
    self, convert_to_multiturn, CoMSample, DatasetError, ImageRef, LineError, MultiTurnSample, PromptConfig,
    VqaTriple,
};
use crate::dsl::{self, Chain};
use crate::exec::ImageStore;
use crate::metric::{com_score, MetricConfig, MetricReport};
use crate::tree::{
    build_tree, dead_branches, dfs_positive_paths, path_to_com_sample, DeadBranch, Executors, MatchConfig,
    SearchReport, TreeConfig,
};
use crate::value::ImageHandle;

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// Directory that input image paths are relative to.
    pub image_root: PathBuf,
    pub tree: TreeConfig,
    pub matcher: MatchConfig,
    /// Keep only the first positive path per question.
    pub first_only: bool,
    pub jobs: usize,
    pub guideline: String,
    pub demonstrations: Vec<Demonstration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Ok,
    NoPath,
    CompletionFailed,
    InvalidChain,
    ImageError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEntry {
    pub id: String,
    pub status: QuestionStatus,
    pub positive_paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    #[serde(flatten)]
    pub search: SearchReport,
    pub questions: Vec<QuestionEntry>,
    pub load_errors: Vec<LineError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeadBranchRecord {
    pub question_id: String,
    #[serde(flatten)]
    pub branch: DeadBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawCompletionRecord {
    pub question_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOutput {
    pub report: Option<GenerateReport>,
    pub samples: Vec<CoMSample>,
    pub dead_branches: Vec<DeadBranchRecord>,
    pub raw_completions: Vec<RawCompletionRecord>,
    /// Encoded derived images keyed by their path under the output dir.
    pub images: BTreeMap<String, Vec<u8>>,
}

struct QuestionResult {
    entry: QuestionEntry,
    tree_built: bool,
    samples: Vec<CoMSample>,
    dead: Vec<DeadBranchRecord>,
    raw: RawCompletionRecord,
    images: Vec<(String, Vec<u8>)>,
}

impl QuestionResult {
    fn failed(id: &str, status: QuestionStatus, error: String, raw: RawCompletionRecord) -> Self {
        Self {
            entry: QuestionEntry { id: id.to_string(), status, positive_paths: 0, error: Some(error) },
            tree_built: false,
            samples: Vec::new(),
            dead: Vec::new(),
            raw,
            images: Vec::new(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn process_question(
    q: &VqaTriple,
    linguistic: &dyn LinguisticAnnotator,
    visual: &dyn VisualAnnotator,
    opts: &GenerateOptions,
) -> QuestionResult {
    let prompt = build_linguistic_prompt(&opts.guideline, &opts.demonstrations, &q.question, opts.demonstrations.len())
        .expect("demonstration count is taken from the list itself");
    let steps = match request_solving_steps(&prompt, linguistic) {
        Ok(s) => s,
        Err(e) => {
            let raw = RawCompletionRecord { question_id: q.id.clone(), text: None, error: Some(e.to_string()) };
            return QuestionResult::failed(&q.id, QuestionStatus::CompletionFailed, e.to_string(), raw);
        }
    };
    let raw = RawCompletionRecord { question_id: q.id.clone(), text: Some(steps.raw.clone()), error: None };
    let violations = dsl::validate_chain(&steps.chain);
    if !violations.is_empty() {
        let msg = violations.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join("; ");
        return QuestionResult::failed(&q.id, QuestionStatus::InvalidChain, msg, raw);
    }

    // One store per question keeps derived images private to its tree.
    let images = ImageStore::new(&opts.image_root);
    let handle = ImageHandle::new(q.image.clone());
    if let Err(e) = images.get(&handle) {
        return QuestionResult::failed(&q.id, QuestionStatus::ImageError, e.to_string(), raw);
    }
    let exec = Executors { visual, images: &images, config: &opts.tree };
    let tree = build_tree(&steps.chain, &handle, &exec);
    let mut paths = dfs_positive_paths(&tree, &q.answer, &opts.matcher);
    if opts.first_only {
        paths.truncate(1);
    }
    let dead = dead_branches(&tree, &q.answer, &opts.matcher)
        .into_iter()
        .map(|branch| DeadBranchRecord { question_id: q.id.clone(), branch })
        .collect();

    let source_ref = match fs::read(opts.image_root.join(&q.image)) {
        Ok(bytes) => ImageRef::with_hash(q.image.clone(), &bytes),
        Err(_) => ImageRef::new(q.image.clone()),
    };
    let mut written = Vec::new();
    let mut samples = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let mut sample = path_to_com_sample(path, q, i);
        sample.images[0] = source_ref.clone();
        for (img_ref, handle) in sample.images.iter_mut().skip(1).zip(path.produced_images()) {
            let buf = images.get(&handle).expect("derived images stay in the store");
            let bytes = buf.encode_png();
            let name = format!("images/{}.png", sha256_hex(&bytes));
            *img_ref = ImageRef::with_hash(name.clone(), &bytes);
            written.push((name, bytes));
        }
        samples.push(sample);
    }

    let status = if paths.is_empty() { QuestionStatus::NoPath } else { QuestionStatus::Ok };
    QuestionResult {
        entry: QuestionEntry { id: q.id.clone(), status, positive_paths: paths.len(), error: None },
        tree_built: true,
        samples,
        dead,
        raw,
        images: written,
    }
}

/// Runs every question through completion, tree search and sample
/// extraction. Questions run in parallel; results are collected in input
/// order so output does not depend on scheduling.
pub fn generate(
    questions: &[VqaTriple],
    load_errors: Vec<LineError>,
    linguistic: &dyn LinguisticAnnotator,
    visual: &dyn VisualAnnotator,
    opts: &GenerateOptions,
) -> GenerateOutput {
    let run = || -> Vec<QuestionResult> {
        questions.par_iter().map(|q| process_question(q, linguistic, visual, opts)).collect()
    };
    let results = match rayon::ThreadPoolBuilder::new().num_threads(opts.jobs.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };

    let mut out = GenerateOutput::default();
    let mut search = SearchReport::default();
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        if r.tree_built {
            search.record_tree(r.entry.positive_paths);
        }
        entries.push(r.entry);
        out.samples.extend(r.samples);
        out.dead_branches.extend(r.dead);
        out.raw_completions.push(r.raw);
        out.images.extend(r.images);
    }
    out.report = Some(GenerateReport { search, questions: entries, load_errors });
    out
}

fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

fn create_dir(path: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

/// Writes `com.jsonl`, `report.json`, `images/` and `audit/` under `out_dir`.
pub fn write_generate_output(out: &GenerateOutput, out_dir: &Path) -> Result<(), DatasetError> {
    create_dir(&out_dir.join("audit"))?;
    create_dir(&out_dir.join("images"))?;
    dataset::write_com_jsonl(&out.samples, &out_dir.join("com.jsonl"))?;
    dataset::write_jsonl(&out.dead_branches, &out_dir.join("audit/dead_branches.jsonl"))?;
    dataset::write_jsonl(&out.raw_completions, &out_dir.join("audit/raw_completions.jsonl"))?;
    for (name, bytes) in &out.images {
        let p = out_dir.join(name);
        fs::write(&p, bytes).map_err(|source| DatasetError::Io { path: p.clone(), source })?;
    }
    let report = out.report.clone().unwrap_or(GenerateReport {
        search: SearchReport::default(),
        questions: Vec::new(),
        load_errors: Vec::new(),
    });
    write_json_file(&report, &out_dir.join("report.json"))
}

pub fn convert(samples: &[CoMSample], config: &PromptConfig, seed: u64) -> Vec<MultiTurnSample> {
    samples.par_iter().map(|s| convert_to_multiturn(s, config, seed)).collect()
}

// ---------------------------------------------------------------------------
// Evaluation

/// One chain-answer pair: `{id, steps: [..], answer}` or `{id, segments: [..], answer}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<String>>,
    pub answer: String,
}

impl EvalRecord {
    pub fn chain(&self) -> Result<Chain, dsl::DslError> {
        let lines: Vec<&str> = match (&self.steps, &self.segments) {
            (Some(steps), _) => steps.iter().map(String::as_str).collect(),
            (None, Some(segs)) => segs.iter().flat_map(|s| s.lines()).collect(),
            (None, None) => Vec::new(),
        };
        let steps = lines
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .map(dsl::parse_step)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Chain { steps, final_answer: Some(self.answer.clone()) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_acc: Option<f64>,
    pub mean_s_k: Option<f64>,
    pub mean_s_c: Option<f64>,
    pub divisor: u8,
    pub samples: Vec<EvalEntry>,
    /// Ids present in only one of the two files.
    pub unmatched_pred: Vec<String>,
    pub unmatched_gold: Vec<String>,
    /// Records whose steps could not be parsed.
    pub unparsed: Vec<String>,
}

/// Scores predictions against gold records with the same id, in gold order.
pub fn evaluate(pred: &[EvalRecord], gold: &[EvalRecord], config: &MetricConfig) -> EvalSummary {
    let by_id: HashMap<&str, &EvalRecord> = pred.iter().map(|p| (p.id.as_str(), p)).collect();
    let gold_ids: HashMap<&str, ()> = gold.iter().map(|g| (g.id.as_str(), ())).collect();
    let mut samples = Vec::new();
    let mut unmatched_gold = Vec::new();
    let mut unparsed = Vec::new();
    for g in gold {
        let Some(p) = by_id.get(g.id.as_str()) else {
            unmatched_gold.push(g.id.clone());
            continue;
        };
        match (p.chain(), g.chain()) {
            (Ok(pc), Ok(gc)) => samples.push(EvalEntry {
                id: g.id.clone(),
                report: com_score((&pc, &p.answer), (&gc, &g.answer), config),
            }),
            _ => unparsed.push(g.id.clone()),
        }
    }
    let unmatched_pred = pred.iter().filter(|p| !gold_ids.contains_key(p.id.as_str())).map(|p| p.id.clone()).collect();
    let n = samples.len();
    let mean = |f: fn(&MetricReport) -> f64| (n > 0).then(|| samples.iter().map(|s| f(&s.report)).sum::<f64>() / n as f64);
    EvalSummary {
        count: n,
        mean_acc: mean(|r| r.acc),
        mean_s_k: mean(|r| r.s_k),
        mean_s_c: mean(|r| r.s_c),
        divisor: config.divisor,
        unmatched_pred,
        unmatched_gold,
        unparsed,
        samples,
    }
}
