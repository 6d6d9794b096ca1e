//! Corpus ingestion, CoM / multi-turn JSONL persistence, conversion to
//! multi-turn samples and corpus statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaTriple {
    pub id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
    /// Dataset tag carried into provenance, e.g. `textvqa`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawVqa {
    id: Option<serde_json::Value>,
    image: Option<String>,
    question: Option<String>,
    answer: Option<serde_json::Value>,
    source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Valid records in input order plus the lines that were rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
}

fn nonempty(field: &str, v: Option<String>) -> Result<String, String> {
    match v {
        Some(s) if !s.trim().is_empty() => Ok(s),
        Some(_) => Err(format!("field `{field}` is empty")),
        None => Err(format!("missing field `{field}`")),
    }
}

fn parse_vqa_line(line: &str, lineno: usize) -> Result<VqaTriple, String> {
    let raw: RawVqa = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let answer = match raw.answer {
        Some(serde_json::Value::String(s)) => Some(s),
        Some(serde_json::Value::Number(n)) => Some(n.to_string()),
        Some(_) => return Err("field `answer` must be a string or number".into()),
        None => None,
    };
    let id = match raw.id {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(_) => return Err("field `id` must be a string or number".into()),
        None => format!("line-{lineno}"),
    };
    Ok(VqaTriple {
        id,
        image: nonempty("image", raw.image)?,
        question: nonempty("question", raw.question)?,
        answer: nonempty("answer", answer)?,
        source: raw.source,
    })
}

/// Reads `{image, question, answer}` lines. Malformed lines are reported and
/// skipped; blank lines are ignored.
pub fn load_vqa_jsonl(path: &Path) -> Result<LoadReport<VqaTriple>, DatasetError> {
    let file = File::open(path).map_err(|_| DatasetError::FileNotFound(path.to_path_buf()))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_vqa_line(&line, i + 1) {
            Ok(t) => records.push(t),
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    Ok(LoadReport { records, errors })
}

/// Relative image path with an optional content hash.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "ImageRefRepr")]
pub struct ImageRef {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ImageRefRepr {
    Bare(String),
    Full { path: String, sha256: Option<String> },
}

impl From<ImageRefRepr> for ImageRef {
    fn from(r: ImageRefRepr) -> Self {
        match r {
            ImageRefRepr::Bare(path) => ImageRef { path, sha256: None },
            ImageRefRepr::Full { path, sha256 } => ImageRef { path, sha256 },
        }
    }
}

impl ImageRef {
    pub fn new(path: impl Into<String>) -> Self {
        Self { path: path.into(), sha256: None }
    }

    pub fn with_hash(path: impl Into<String>, bytes: &[u8]) -> Self {
        Self { path: path.into(), sha256: Some(hex::encode(Sha256::digest(bytes))) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub question_id: String,
    pub path_index: usize,
}

/// `(I_0, Q, C_0, I_1, C_1, ..., I_n, C_n, A)`: one segment per image, each
/// segment holding the resolved steps up to the next image-producing call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoMSample {
    pub id: String,
    pub images: Vec<ImageRef>,
    pub question: String,
    pub segments: Vec<String>,
    pub answer: String,
    pub provenance: Provenance,
}

impl CoMSample {
    pub fn check(&self) -> Result<(), String> {
        if self.answer.trim().is_empty() {
            return Err("answer is empty".into());
        }
        if self.images.is_empty() {
            return Err("sample has no images".into());
        }
        if self.images.len() != self.segments.len() && self.images.len() != self.segments.len() + 1 {
            return Err(format!("{} images but {} segments", self.images.len(), self.segments.len()));
        }
        Ok(())
    }

    /// Reasoning steps, one per non-blank segment line.
    pub fn step_lines(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().flat_map(|s| s.lines()).filter(|l| !l.trim().is_empty())
    }

    /// Reconstructs the chain from the segment text.
    pub fn chain(&self) -> dsl::Chain {
        let steps = self
            .step_lines()
            .map(|l| dsl::parse_step(l).unwrap_or_else(|_| dsl::parse_step("").expect("empty step parses")))
            .collect();
        dsl::Chain { steps, final_answer: Some(self.answer.clone()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub image: ImageRef,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiTurnSample {
    pub id: String,
    pub turns: Vec<Turn>,
    pub launching_prompt_id: Option<usize>,
}

pub const DEFAULT_CONTINUATION_PROMPT: &str =
    "Please answer the question based on the above reasoning and the new image.";

pub const LAUNCHING_PROMPTS: [&str; 3] = [
    "Please solve the problem gradually via a chain of manipulations, where in each step you can selectively adopt one of the following manipulations GROUNDING(a phrase)->boxes, OCR(an image or a region)->texts, CROP_AND_ZOOMIN(a region on given image)->new_image, CALCULATE(a computable target)->numbers, or invent a new manipulation, if that seems helpful. {QUESTION}",
    "Please tackle a given question in a step-by-step manner. For each step one of the following manipulations (depicted as Name(Input)->Retrun) can be optionally used: GROUNDING(a phrase)->boxes, OCR(an image or a region)->texts, CROP_AND_ZOOMIN(a region on given image)->new_image, CALCULATE(a computable target)->numbers, or develop a new manipulation yourself (if it is indeed required). {QUESTION}",
    "Please go through the question incrementally with chain of manipulations (optionally use manipulation when needed) such as GROUNDING(a phrase)->boxes, OCR(an image or a region)->texts, CROP_AND_ZOOMIN(a region on given image)->new_image, CALCULATE(a computable target)->numbers, and create a new manipulation if necessary. {QUESTION}",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    /// Probability of prepending a launching prompt to the first turn.
    pub launch_probability: f64,
    pub launching_prompts: Vec<String>,
    pub continuation_prompt: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            launch_probability: 0.5,
            launching_prompts: LAUNCHING_PROMPTS.iter().map(|s| s.to_string()).collect(),
            continuation_prompt: DEFAULT_CONTINUATION_PROMPT.to_string(),
        }
    }
}

fn sample_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}:{id}").as_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Splits a CoM sample into one turn per image. The generator is derived from
/// `(seed, sample id)`, so output does not depend on processing order.
pub fn convert_to_multiturn(sample: &CoMSample, config: &PromptConfig, seed: u64) -> MultiTurnSample {
    let mut rng = sample_rng(seed, &sample.id);
    let draw: f64 = rng.gen();
    let launching = if draw < config.launch_probability && !config.launching_prompts.is_empty() {
        Some(rng.gen_range(0..config.launching_prompts.len()))
    } else {
        None
    };
    let first_prompt = match launching {
        Some(i) => {
            let template = &config.launching_prompts[i];
            if template.contains("{QUESTION}") {
                template.replace("{QUESTION}", &sample.question)
            } else {
                format!("{template} {}", sample.question)
            }
        }
        None => sample.question.clone(),
    };

    let n = sample.images.len();
    let mut turns = Vec::with_capacity(n);
    for (i, image) in sample.images.iter().enumerate() {
        let prompt = if i == 0 { first_prompt.clone() } else { config.continuation_prompt.clone() };
        let segment = sample.segments.get(i).cloned().unwrap_or_default();
        let response = if i + 1 == n {
            if segment.is_empty() {
                format!("Answer: {}", sample.answer)
            } else {
                format!("{segment}\nAnswer: {}", sample.answer)
            }
        } else {
            segment
        };
        turns.push(Turn { image: image.clone(), prompt, response });
    }
    MultiTurnSample { id: sample.id.clone(), turns, launching_prompt_id: launching }
}

/// Ratio rendered with two decimals, rounding half up.
fn two_decimals(num: u64, den: u64) -> String {
    let hundredths = (num * 200 + den) / (2 * den);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub qa_count: usize,
    pub chain_count: usize,
    pub avg_steps_per_chain: Option<String>,
    pub avg_manipulation_types_per_chain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub qa_count: usize,
    pub chain_count: usize,
    pub avg_steps_per_chain: Option<String>,
    pub avg_manipulation_types_per_chain: Option<String>,
    pub per_source: BTreeMap<String, SourceStats>,
}

#[derive(Default)]
struct Tally {
    questions: BTreeSet<String>,
    chains: u64,
    steps: u64,
    types: u64,
}

impl Tally {
    fn add(&mut self, sample: &CoMSample) {
        self.questions.insert(sample.provenance.question_id.clone());
        let chain = sample.chain();
        self.chains += 1;
        self.steps += chain.steps.len() as u64;
        let names: BTreeSet<_> = chain.calls().map(|(_, c)| c.name.clone()).collect();
        self.types += names.len() as u64;
    }

    fn finish(&self) -> SourceStats {
        let avg = |total: u64| (self.chains > 0).then(|| two_decimals(total, self.chains));
        SourceStats {
            qa_count: self.questions.len(),
            chain_count: self.chains as usize,
            avg_steps_per_chain: avg(self.steps),
            avg_manipulation_types_per_chain: avg(self.types),
        }
    }
}

/// Counts QAs and chains and averages steps and distinct manipulation names
/// over chains. Averages are `None` for an empty corpus.
pub fn compute_stats(samples: &[CoMSample]) -> DatasetStats {
    let mut all = Tally::default();
    let mut per: BTreeMap<String, Tally> = BTreeMap::new();
    for s in samples {
        let mut keyed = s.clone();
        keyed.provenance.question_id = format!("{}\u{1f}{}", s.provenance.source, s.provenance.question_id);
        all.add(&keyed);
        per.entry(s.provenance.source.clone()).or_default().add(s);
    }
    let total = all.finish();
    DatasetStats {
        qa_count: total.qa_count,
        chain_count: total.chain_count,
        avg_steps_per_chain: total.avg_steps_per_chain,
        avg_manipulation_types_per_chain: total.avg_manipulation_types_per_chain,
        per_source: per.into_iter().map(|(k, t)| (k, t.finish())).collect(),
    }
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e.into() })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(|_| DatasetError::FileNotFound(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_com_jsonl(samples: &[CoMSample], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(samples, path)
}

pub fn write_multiturn_jsonl(samples: &[MultiTurnSample], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(samples, path)
}

/// Reads com.jsonl and checks every sample's structural invariants.
pub fn read_com_jsonl(path: &Path) -> Result<Vec<CoMSample>, DatasetError> {
    let samples: Vec<CoMSample> = read_jsonl(path)?;
    for (i, s) in samples.iter().enumerate() {
        s.check().map_err(|message| DatasetError::Schema { path: path.to_path_buf(), line: i + 1, message })?;
    }
    Ok(samples)
}

pub fn read_multiturn_jsonl(path: &Path) -> Result<Vec<MultiTurnSample>, DatasetError> {
    read_jsonl(path)
}
