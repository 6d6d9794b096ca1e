//! Linguistic (LLM) and visual (grounding / OCR) annotator clients.
//!
//! Live annotators are reached over a small HTTP JSON protocol; mocks answer
//! from JSONL fixtures keyed by a hash of the canonicalized request.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{self, Chain, DslError};
use crate::exec::{ExecError, ImageStore};
use crate::value::{ImageHandle, NormBox, ValueError};

pub const ENV_GROUND_URL: &str = "COMFORGE_GROUND_URL";
pub const ENV_OCR_URL: &str = "COMFORGE_OCR_URL";
pub const ENV_LLM_URL: &str = "COMFORGE_LLM_URL";
pub const ENV_HTTP_RETRIES: &str = "COMFORGE_HTTP_RETRIES";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotatorError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("completion could not be parsed: {error}")]
    Parse { raw: String, error: DslError },
    #[error("cannot decode image {handle}: {message}")]
    ImageDecode { handle: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid annotator response: {0}")]
    InvalidResponse(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

impl From<ExecError> for AnnotatorError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::ImageDecode { handle, message } => AnnotatorError::ImageDecode { handle, message },
            ExecError::ImageNotFound(handle) => {
                AnnotatorError::ImageDecode { handle, message: "image not found".into() }
            }
            other => AnnotatorError::InvalidRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorConfig {
    /// Grounding boxes scoring below this are dropped.
    pub min_confidence: f64,
    /// Boxes kept per grounding call when branching.
    pub max_boxes: usize,
    /// Total attempts per client call.
    pub retries: u32,
    /// First backoff delay; doubles after every failed attempt.
    pub backoff: Duration,
    pub timeout: Duration,
    /// Optional cap on concurrent in-flight requests per client.
    pub max_in_flight: Option<usize>,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.25,
            max_boxes: 4,
            retries: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
            max_in_flight: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Linguistic prompt

pub const DEFAULT_DEMO_COUNT: usize = 5;

pub const DEFAULT_GUIDELINE: &str = "\
You are solving a visual question step by step. You cannot see the image; \
instead, write the solving steps a person would follow while looking at it, \
and call manipulations wherever visual evidence is needed.

Manipulations (write each call as NAME(arguments)->variable):
- GROUNDING(a phrase)->bbx_N: locate every region matching the phrase; returns boxes.
- OCR(a region or an image)->txt_N: read the text inside a box such as bbx_1, or inside an image.
- COUNTING(a phrase or boxes)->num_N: count the objects matching the phrase or the given boxes.
- CALCULATE(an expression)->num_N: evaluate arithmetic over numbers and earlier num_ variables.
- CROP_AND_ZOOMIN(a box, an optional ratio)->img_N: crop a box and magnify it for a closer look.
- LINE(points)->img_N: draw straight lines through the given points.
You may invent a new manipulation in the same NAME(arguments)->variable form if it is truly needed.

Requirements:
- Number variables consecutively by type (bbx_1, bbx_2, txt_1, ...) and never reuse a variable name.
- A variable can only be used after the step that produced it.
- Put exactly one step on each line, starting with \"Step k:\".
- The result of the last manipulation must be the answer; finish with a line \"Answer: variable\".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub solution: String,
}

pub fn default_demonstrations() -> Vec<Demonstration> {
    let d = |q: &str, s: &str| Demonstration { question: q.into(), solution: s.into() };
    vec![
        d(
            "What is written on the pillar in front of the man in black top?",
            "Step 1: Find the man in black top with GROUNDING(the man in black top)->bbx_1.\n\
             Step 2: Find the pillar in front of him with GROUNDING(the pillar in front of the man at bbx_1)->bbx_2.\n\
             Step 3: Read the words on the pillar with OCR(bbx_2)->txt_1.\n\
             Answer: txt_1",
        ),
        d(
            "How many cars are parked on the street?",
            "Step 1: Locate the street with GROUNDING(the street)->bbx_1.\n\
             Step 2: Count the parked cars on it with COUNTING(parked cars on the street at bbx_1)->num_1.\n\
             Answer: num_1",
        ),
        d(
            "What is the brand name on the small bottle?",
            "Step 1: Find the small bottle using GROUNDING(the small bottle)->bbx_1.\n\
             Step 2: The label is tiny, so magnify it with CROP_AND_ZOOMIN(bbx_1, 4)->img_1.\n\
             Step 3: Read the label in the new image with OCR(img_1)->txt_1.\n\
             Answer: txt_1",
        ),
        d(
            "What is the total price of the two items on the receipt?",
            "Step 1: Find the first item price with GROUNDING(the price of the first item)->bbx_1.\n\
             Step 2: Read it using OCR(bbx_1)->txt_1.\n\
             Step 3: Find the second item price with GROUNDING(the price of the second item)->bbx_2 and read it with OCR(bbx_2)->txt_2.\n\
             Step 4: Add them with CALCULATE(txt_1+txt_2)->num_1.\n\
             Answer: num_1",
        ),
        d(
            "Is there a dog in the picture?",
            "Step 1: Look for a dog with GROUNDING(a dog)->bbx_1.\n\
             Step 2: Count the found dogs with COUNTING(bbx_1)->num_1; if it is zero there is no dog.\n\
             Answer: num_1",
        ),
    ]
}

/// Guideline, worked demonstrations and the question, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinguisticPrompt {
    pub guideline: String,
    pub demonstrations: Vec<Demonstration>,
    pub question: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("expected {expected} demonstrations, got {got}")]
pub struct WrongDemoCount {
    pub expected: usize,
    pub got: usize,
}

pub fn build_linguistic_prompt(
    guideline: &str,
    demos: &[Demonstration],
    question: &str,
    expected_demos: usize,
) -> Result<LinguisticPrompt, WrongDemoCount> {
    if demos.len() != expected_demos {
        return Err(WrongDemoCount { expected: expected_demos, got: demos.len() });
    }
    Ok(LinguisticPrompt {
        guideline: guideline.to_string(),
        demonstrations: demos.to_vec(),
        question: question.to_string(),
    })
}

impl LinguisticPrompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(self.guideline.trim_end());
        out.push_str("\n\nExamples:\n");
        for (i, d) in self.demonstrations.iter().enumerate() {
            out.push_str(&format!("\n[Example {}]\nQuestion: {}\nSolution:\n{}\n", i + 1, d.question, d.solution.trim_end()));
        }
        out.push_str(&format!("\nNow solve the following question.\nQuestion: {}\nSolution:\n", self.question));
        out
    }
}

// ---------------------------------------------------------------------------
// Visual requests and results

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisualKind {
    Grounding { phrase: String },
    Ocr { region: Option<NormBox> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualRequest {
    pub kind: VisualKind,
    pub image: ImageHandle,
}

fn normalize_phrase(p: &str) -> String {
    p.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl VisualRequest {
    pub fn grounding(phrase: impl Into<String>, image: ImageHandle) -> Self {
        Self { kind: VisualKind::Grounding { phrase: phrase.into() }, image }
    }

    pub fn ocr(region: Option<NormBox>, image: ImageHandle) -> Self {
        Self { kind: VisualKind::Ocr { region }, image }
    }

    pub fn validate(&self) -> Result<(), AnnotatorError> {
        match &self.kind {
            VisualKind::Grounding { phrase } if phrase.trim().is_empty() => {
                Err(AnnotatorError::InvalidRequest("empty grounding phrase".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn canonical(&self) -> serde_json::Value {
        match &self.kind {
            VisualKind::Grounding { phrase } => serde_json::json!({
                "image": self.image.as_str(),
                "kind": "ground",
                "phrase": normalize_phrase(phrase),
            }),
            VisualKind::Ocr { region } => serde_json::json!({
                "image": self.image.as_str(),
                "kind": "ocr",
                "region": region.map(|r| r.coords()),
            }),
        }
    }

    pub fn request_key(&self) -> String {
        request_key(&self.canonical())
    }
}

pub fn completion_canonical(question: &str) -> serde_json::Value {
    serde_json::json!({ "kind": "complete", "question": question.trim() })
}

/// Hex SHA-256 of the compact, key-sorted JSON encoding of `canonical`.
pub fn request_key(canonical: &serde_json::Value) -> String {
    let text = serde_json::to_string(canonical).expect("json value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: NormBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrItem {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: NormBox,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualResult {
    pub boxes: Vec<ScoredBox>,
    pub texts: Vec<OcrItem>,
}

impl VisualResult {
    /// Highest-scoring boxes first, at most `max`.
    pub fn top_boxes(&self, max: usize) -> Vec<NormBox> {
        self.boxes.iter().take(max).map(|b| b.bbox).collect()
    }

    /// All recognized text in reading order, space-joined.
    pub fn joined_text(&self) -> String {
        self.texts.iter().map(|t| t.text.trim()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ")
    }
}

// Wire formats.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundResponse {
    pub boxes: Vec<WireBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireOcrItem {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: [i64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcrResponse {
    pub items: Vec<WireOcrItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

fn invalid(e: ValueError) -> AnnotatorError {
    AnnotatorError::InvalidResponse(e.to_string())
}

impl GroundResponse {
    pub fn into_result(self) -> Result<VisualResult, AnnotatorError> {
        let boxes = self
            .boxes
            .into_iter()
            .map(|b| {
                if !(0.0..=1.0).contains(&b.score) {
                    return Err(AnnotatorError::InvalidResponse(format!("score {} outside [0,1]", b.score)));
                }
                Ok(ScoredBox { bbox: NormBox::new(b.x0, b.y0, b.x1, b.y1).map_err(invalid)?, score: b.score })
            })
            .collect::<Result<_, _>>()?;
        Ok(VisualResult { boxes, texts: Vec::new() })
    }
}

impl OcrResponse {
    pub fn into_result(self) -> Result<VisualResult, AnnotatorError> {
        let texts = self
            .items
            .into_iter()
            .map(|i| {
                let [x0, y0, x1, y1] = i.bbox;
                Ok::<_, AnnotatorError>(OcrItem { text: i.text, bbox: NormBox::new(x0, y0, x1, y1).map_err(invalid)? })
            })
            .collect::<Result<_, _>>()?;
        Ok(VisualResult { boxes: Vec::new(), texts })
    }
}

// ---------------------------------------------------------------------------
// Client traits

pub trait LinguisticAnnotator: Send + Sync {
    fn complete(&self, prompt: &LinguisticPrompt) -> Result<String, AnnotatorError>;
}

pub trait VisualAnnotator: Send + Sync {
    /// Returns the raw annotator result; callers go through [`resolve_visual`].
    fn annotate(&self, request: &VisualRequest, images: &ImageStore) -> Result<VisualResult, AnnotatorError>;
}

/// A completion and the chain parsed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvingSteps {
    pub raw: String,
    pub chain: Chain,
}

/// Asks the linguistic annotator for solving steps and parses them. Any
/// values attached to calls by the annotator are dropped so every result is
/// a placeholder.
pub fn request_solving_steps(
    prompt: &LinguisticPrompt,
    client: &dyn LinguisticAnnotator,
) -> Result<SolvingSteps, AnnotatorError> {
    let raw = client.complete(prompt)?;
    let mut chain = dsl::parse_chain(&raw).map_err(|error| AnnotatorError::Parse { raw: raw.clone(), error })?;
    for step in &mut chain.steps {
        if step.calls().iter().any(|c| c.bound.is_some()) {
            let stripped = strip_bound_values(step);
            *step = stripped;
        }
    }
    Ok(SolvingSteps { raw, chain })
}

fn strip_bound_values(step: &dsl::Step) -> dsl::Step {
    let raw = step.raw_text();
    let mut out = String::new();
    let mut cursor = 0;
    for (call, span) in step.calls().iter().zip(step.spans()) {
        out.push_str(&raw[cursor..span.start]);
        let surface = &call.surface;
        let cut = match call.bound {
            Some(_) => surface.rfind('=').unwrap_or(surface.len()),
            None => surface.len(),
        };
        out.push_str(&surface[..cut]);
        cursor = span.end;
    }
    out.push_str(&raw[cursor..]);
    dsl::parse_step(&out).expect("removing bound values keeps a step well formed")
}

/// Runs a visual request and normalizes the result: boxes below the
/// confidence threshold are dropped and the rest are sorted by score,
/// highest first (ties keep annotator order).
pub fn resolve_visual(
    request: &VisualRequest,
    client: &dyn VisualAnnotator,
    images: &ImageStore,
    config: &AnnotatorConfig,
) -> Result<VisualResult, AnnotatorError> {
    request.validate()?;
    let mut result = client.annotate(request, images)?;
    result.boxes.retain(|b| b.score >= config.min_confidence);
    result.boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(result)
}

// ---------------------------------------------------------------------------
// Retry and concurrency limits

/// Calls `f` up to `attempts` times, sleeping `backoff * 2^k` between
/// failures. Only errors for which `retryable` is true are retried.
pub fn with_retry<T>(
    attempts: u32,
    backoff: Duration,
    retryable: impl Fn(&AnnotatorError) -> bool,
    mut f: impl FnMut() -> Result<T, AnnotatorError>,
) -> Result<T, AnnotatorError> {
    let attempts = attempts.max(1);
    let mut delay = backoff;
    let mut last = None;
    for attempt in 1..=attempts {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) if retryable(&e) => {
                last = Some(e);
                if attempt < attempts && !delay.is_zero() {
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
            Err(e) => return Err(e),
        }
    }
    let message = match last {
        Some(AnnotatorError::Transport { message, .. }) => message,
        Some(other) => other.to_string(),
        None => "no attempt made".into(),
    };
    Err(AnnotatorError::Transport { attempts, message })
}

/// Counting semaphore bounding requests in flight.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightGuard<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), current: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().expect("in-flight lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        InFlightGuard(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("in-flight lock")
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("in-flight lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

// ---------------------------------------------------------------------------
// HTTP clients

struct HttpTransport {
    agent: ureq::Agent,
    config: AnnotatorConfig,
    limit: Option<InFlightLimit>,
}

impl HttpTransport {
    fn new(config: AnnotatorConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let limit = config.max_in_flight.map(InFlightLimit::new);
        Self { agent, config, limit }
    }

    fn post<T: serde::de::DeserializeOwned>(&self, url: &str, body: &serde_json::Value) -> Result<T, AnnotatorError> {
        let _guard = self.limit.as_ref().map(InFlightLimit::acquire);
        let retryable = |e: &AnnotatorError| matches!(e, AnnotatorError::Transport { .. });
        with_retry(self.config.retries, self.config.backoff, retryable, || {
            let transport = |message: String| AnnotatorError::Transport { attempts: 1, message };
            let mut resp = self.agent.post(url).send_json(body).map_err(|e| transport(format!("{url}: {e}")))?;
            let status = resp.status().as_u16();
            if status >= 500 {
                return Err(transport(format!("{url}: HTTP {status}")));
            }
            if status >= 400 {
                return Err(AnnotatorError::InvalidRequest(format!("{url}: HTTP {status}")));
            }
            resp.body_mut()
                .read_json::<T>()
                .map_err(|e| AnnotatorError::InvalidResponse(format!("{url}: {e}")))
        })
    }
}

pub struct HttpLinguisticAnnotator {
    url: String,
    transport: HttpTransport,
    /// Sampling parameters forwarded verbatim alongside the prompt.
    pub sampling: serde_json::Map<String, serde_json::Value>,
}

impl HttpLinguisticAnnotator {
    pub fn new(url: impl Into<String>, config: AnnotatorConfig) -> Self {
        Self { url: url.into(), transport: HttpTransport::new(config), sampling: Default::default() }
    }
}

impl LinguisticAnnotator for HttpLinguisticAnnotator {
    fn complete(&self, prompt: &LinguisticPrompt) -> Result<String, AnnotatorError> {
        let mut body = serde_json::Map::new();
        body.insert("prompt".into(), prompt.render().into());
        for (k, v) in &self.sampling {
            body.entry(k.clone()).or_insert(v.clone());
        }
        let resp: CompleteResponse = self.transport.post(&self.url, &serde_json::Value::Object(body))?;
        Ok(resp.text)
    }
}

pub struct HttpVisualAnnotator {
    ground_url: String,
    ocr_url: String,
    transport: HttpTransport,
}

impl HttpVisualAnnotator {
    pub fn new(ground_url: impl Into<String>, ocr_url: impl Into<String>, config: AnnotatorConfig) -> Self {
        Self { ground_url: ground_url.into(), ocr_url: ocr_url.into(), transport: HttpTransport::new(config) }
    }
}

impl VisualAnnotator for HttpVisualAnnotator {
    fn annotate(&self, request: &VisualRequest, images: &ImageStore) -> Result<VisualResult, AnnotatorError> {
        let image = images.get(&request.image)?;
        let image_b64 = base64::engine::general_purpose::STANDARD.encode(image.encode_png());
        match &request.kind {
            VisualKind::Grounding { phrase } => {
                let body = serde_json::json!({ "image_b64": image_b64, "phrase": phrase });
                self.transport.post::<GroundResponse>(&self.ground_url, &body)?.into_result()
            }
            VisualKind::Ocr { region } => {
                let mut body = serde_json::json!({ "image_b64": image_b64 });
                if let Some(r) = region {
                    body["region"] = serde_json::json!(r.coords());
                }
                self.transport.post::<OcrResponse>(&self.ocr_url, &body)?.into_result()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fixture-backed mocks

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_key: Option<String>,
    /// Readable canonical request; used to derive the key when it is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<serde_json::Value>,
    pub response: serde_json::Value,
}

/// Immutable map from request key to recorded response.
#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    responses: HashMap<String, serde_json::Value>,
}

impl FixtureStore {
    pub fn load(path: &Path) -> Result<Self, AnnotatorError> {
        let mut store = FixtureStore::default();
        store.extend_from(path)?;
        Ok(store)
    }

    pub fn extend_from(&mut self, path: &Path) -> Result<(), AnnotatorError> {
        let file = std::fs::File::open(path)
            .map_err(|e| AnnotatorError::Fixture(format!("{}: {e}", path.display())))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| AnnotatorError::Fixture(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line)
                .map_err(|e| AnnotatorError::Fixture(format!("{}:{}: {e}", path.display(), i + 1)))?;
            self.insert(rec)?;
        }
        Ok(())
    }

    pub fn insert(&mut self, rec: FixtureRecord) -> Result<(), AnnotatorError> {
        let key = match (rec.request_key, rec.request) {
            (Some(k), _) => k,
            (None, Some(req)) => request_key(&req),
            (None, None) => return Err(AnnotatorError::Fixture("record needs request_key or request".into())),
        };
        self.responses.insert(key, rec.response);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&serde_json::Value> {
        self.responses.get(key)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

/// Deterministic failure injection: a request fails when the hash of
/// `(seed, request_key)` falls below `rate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureInjection {
    pub rate: f64,
    pub seed: u64,
}

impl FailureInjection {
    pub fn fails(&self, key: &str) -> bool {
        if self.rate <= 0.0 {
            return false;
        }
        let digest = Sha256::digest(format!("{}:{key}", self.seed).as_bytes());
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        let u = u64::from_be_bytes(first) as f64 / u64::MAX as f64;
        u < self.rate
    }
}

pub struct MockLinguisticAnnotator {
    fixtures: FixtureStore,
}

impl MockLinguisticAnnotator {
    pub fn new(fixtures: FixtureStore) -> Self {
        Self { fixtures }
    }
}

impl LinguisticAnnotator for MockLinguisticAnnotator {
    fn complete(&self, prompt: &LinguisticPrompt) -> Result<String, AnnotatorError> {
        let key = request_key(&completion_canonical(&prompt.question));
        let resp = self.fixtures.get(&key).ok_or_else(|| AnnotatorError::Transport {
            attempts: 1,
            message: format!("no fixture completion for question {:?}", prompt.question),
        })?;
        let resp: CompleteResponse =
            serde_json::from_value(resp.clone()).map_err(|e| AnnotatorError::Fixture(e.to_string()))?;
        Ok(resp.text)
    }
}

/// Answers grounding and OCR requests from fixtures. Requests without a
/// fixture entry return an empty result (the target is absent).
pub struct MockVisualAnnotator {
    fixtures: FixtureStore,
    grounding_failures: Option<FailureInjection>,
    retries: u32,
}

impl MockVisualAnnotator {
    pub fn new(fixtures: FixtureStore) -> Self {
        Self { fixtures, grounding_failures: None, retries: 1 }
    }

    pub fn with_grounding_failures(mut self, failures: FailureInjection, retries: u32) -> Self {
        self.grounding_failures = Some(failures);
        self.retries = retries;
        self
    }
}

impl VisualAnnotator for MockVisualAnnotator {
    fn annotate(&self, request: &VisualRequest, images: &ImageStore) -> Result<VisualResult, AnnotatorError> {
        images.get(&request.image)?;
        let key = request.request_key();
        if let (VisualKind::Grounding { .. }, Some(f)) = (&request.kind, &self.grounding_failures) {
            if f.fails(&key) {
                // A failing request fails identically on every attempt.
                return with_retry(self.retries, Duration::ZERO, |_| true, || {
                    Err::<VisualResult, _>(AnnotatorError::Transport {
                        attempts: 1,
                        message: "injected grounding failure".into(),
                    })
                });
            }
        }
        let Some(resp) = self.fixtures.get(&key) else {
            return Ok(VisualResult::default());
        };
        let parse_err = |e: serde_json::Error| AnnotatorError::Fixture(e.to_string());
        match request.kind {
            VisualKind::Grounding { .. } => {
                serde_json::from_value::<GroundResponse>(resp.clone()).map_err(parse_err)?.into_result()
            }
            VisualKind::Ocr { .. } => serde_json::from_value::<OcrResponse>(resp.clone()).map_err(parse_err)?.into_result(),
        }
    }
}
