//! Manipulation DSL: grammar, parser, printer and chain validator.
//!
//! A call is written `NAME(arg, arg, ...) -> var`, with `→` accepted in place
//! of `->`. Once a call has been executed its result may be attached inline as
//! `NAME(args)->var=VALUE`, where `VALUE` uses the [`Value`] printer. Any text
//! around calls is kept byte-for-byte so a parsed step renders back to its
//! source.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{Value, ValueKind};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum ManipulationName {
    Ocr,
    Grounding,
    Counting,
    Calculate,
    CropAndZoomIn,
    Line,
    Custom(String),
}

impl ManipulationName {
    pub const BUILTIN: [ManipulationName; 6] = [
        ManipulationName::Ocr,
        ManipulationName::Grounding,
        ManipulationName::Counting,
        ManipulationName::Calculate,
        ManipulationName::CropAndZoomIn,
        ManipulationName::Line,
    ];

    /// Normalizes an identifier: case-folded to uppercase, with the alternate
    /// spellings (`CropZoomIn`) mapped onto the canonical built-ins.
    pub fn from_ident(ident: &str) -> ManipulationName {
        let upper = ident.to_ascii_uppercase();
        match upper.as_str() {
            "OCR" => ManipulationName::Ocr,
            "GROUNDING" => ManipulationName::Grounding,
            "COUNTING" => ManipulationName::Counting,
            "CALCULATE" => ManipulationName::Calculate,
            "CROP_AND_ZOOMIN" | "CROP_AND_ZOOM_IN" | "CROPZOOMIN" | "CROP_ZOOMIN" | "CROPANDZOOMIN" => {
                ManipulationName::CropAndZoomIn
            }
            "LINE" => ManipulationName::Line,
            _ => ManipulationName::Custom(upper),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            ManipulationName::Ocr => "OCR",
            ManipulationName::Grounding => "GROUNDING",
            ManipulationName::Counting => "COUNTING",
            ManipulationName::Calculate => "CALCULATE",
            ManipulationName::CropAndZoomIn => "CROP_AND_ZOOMIN",
            ManipulationName::Line => "LINE",
            ManipulationName::Custom(s) => s,
        }
    }

    pub fn is_custom(&self) -> bool {
        matches!(self, ManipulationName::Custom(_))
    }

    /// Result kinds a call of this manipulation may produce; `None` for
    /// custom manipulations, which carry no signature.
    pub fn result_kinds(&self) -> Option<&'static [ValueKind]> {
        Some(match self {
            ManipulationName::Ocr => &[ValueKind::Text],
            ManipulationName::Grounding => &[ValueKind::Box, ValueKind::BoxList],
            ManipulationName::Counting | ManipulationName::Calculate => &[ValueKind::Num],
            ManipulationName::CropAndZoomIn | ManipulationName::Line => &[ValueKind::Image],
            ManipulationName::Custom(_) => return None,
        })
    }

    /// Whether executing this manipulation yields a new image.
    pub fn produces_image(&self) -> bool {
        matches!(self, ManipulationName::CropAndZoomIn | ManipulationName::Line)
    }
}

impl fmt::Display for ManipulationName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<ManipulationName> for String {
    fn from(n: ManipulationName) -> String {
        n.as_str().to_string()
    }
}

impl From<String> for ManipulationName {
    fn from(s: String) -> Self {
        ManipulationName::from_ident(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Arg {
    Literal(String),
    VarRef(String),
}

impl Arg {
    pub fn as_str(&self) -> &str {
        match self {
            Arg::Literal(s) | Arg::VarRef(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManipulationCall {
    pub name: ManipulationName,
    pub args: Vec<Arg>,
    pub result_var: String,
    pub declared_result_kind: Option<ValueKind>,
    /// Result attached inline with `=VALUE`, if the call has been resolved.
    pub bound: Option<Value>,
    /// Exact source text of the call.
    pub surface: String,
}

impl ManipulationCall {
    /// Every variable the call reads: explicit references plus references
    /// embedded inside literal expressions such as `num_1+1`.
    pub fn referenced_vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        for arg in &self.args {
            match arg {
                Arg::VarRef(v) => out.push(v.clone()),
                Arg::Literal(l) => out.extend(embedded_var_refs(l).into_iter().map(|r| l[r].to_string())),
            }
        }
        out
    }

    /// Canonical text of the call with the given result attached.
    pub fn render_bound(&self, value: &Value) -> String {
        let args: Vec<&str> = self.args.iter().map(Arg::as_str).collect();
        format!("{}({})->{}={}", self.name, args.join(", "), self.result_var, value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    raw_text: String,
    calls: Vec<ManipulationCall>,
    spans: Vec<Range<usize>>,
}

impl Step {
    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn calls(&self) -> &[ManipulationCall] {
        &self.calls
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    /// Prose following the last call (or the whole step when it has none).
    pub fn trailing_text(&self) -> &str {
        match self.spans.last() {
            Some(s) => &self.raw_text[s.end..],
            None => &self.raw_text,
        }
    }

    /// Rewrites every unresolved call whose result variable is in `bindings`
    /// to carry its value inline. Prose between calls is untouched.
    pub fn with_bindings(&self, bindings: &HashMap<String, Value>) -> Step {
        let mut out = String::with_capacity(self.raw_text.len());
        let mut cursor = 0;
        for (call, span) in self.calls.iter().zip(&self.spans) {
            out.push_str(&self.raw_text[cursor..span.start]);
            match (&call.bound, bindings.get(&call.result_var)) {
                (None, Some(v)) => out.push_str(&format!("{}={}", call.surface, v)),
                _ => out.push_str(&call.surface),
            }
            cursor = span.end;
        }
        out.push_str(&self.raw_text[cursor..]);
        parse_step(&out).expect("binding a parsed step keeps it well formed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub steps: Vec<Step>,
    pub final_answer: Option<String>,
}

impl Chain {
    pub fn calls(&self) -> impl Iterator<Item = (usize, &ManipulationCall)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.calls.iter().map(move |c| (i, c)))
    }

    /// The declared final answer, or the last step's trailing prose when unset.
    pub fn answer_candidate(&self) -> Option<String> {
        if let Some(a) = &self.final_answer {
            return Some(a.clone());
        }
        let t = self.steps.last()?.trailing_text().trim();
        (!t.is_empty()).then(|| t.to_string())
    }

    /// Space-joined text of all steps.
    pub fn paragraph(&self) -> String {
        self.steps
            .iter()
            .map(|s| s.raw_text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One step per line followed by an `Answer:` line when an answer is set.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self.steps.iter().map(render_step).collect();
        if let Some(a) = &self.final_answer {
            lines.push(format!("Answer: {a}"));
        }
        lines.join("\n")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DslError {
    #[error("malformed call at byte {offset}: {reason}")]
    MalformedCall { offset: usize, reason: String },
    #[error("empty argument in call at byte {offset}")]
    EmptyArgument { offset: usize },
    #[error("more than one final answer line (line {line})")]
    DuplicateAnswer { line: usize },
}

const ASCII_ARROW: &str = "->";
const UNICODE_ARROW: &str = "→";

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic()
}

fn is_ident_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn ident_end(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    while i < bytes.len() && is_ident_char(bytes[i]) {
        i += 1;
    }
    i
}

/// Uppercase identifiers are treated as deliberate manipulation names, so an
/// unclosed parenthesis after one is an error rather than prose.
fn looks_like_manipulation(ident: &str) -> bool {
    ident.len() >= 2
        && ident.as_bytes()[0].is_ascii_uppercase()
        && ident.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
}

/// Whether `s` is exactly a variable reference: `(bbx|txt|num|img|pts)_[0-9]+`.
pub fn is_var_ref(s: &str) -> bool {
    let Some((prefix, digits)) = s.split_once('_') else {
        return false;
    };
    matches!(prefix, "bbx" | "txt" | "num" | "img" | "pts")
        && !digits.is_empty()
        && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Byte ranges of variable references appearing as whole words inside `s`.
pub fn embedded_var_refs(s: &str) -> Vec<Range<usize>> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if is_ident_char(bytes[i]) && (i == 0 || !is_ident_char(bytes[i - 1])) {
            let end = ident_end(bytes, i);
            if is_var_ref(&s[i..end]) {
                out.push(i..end);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    out
}

fn find_matching_paren(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_quote = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        match b {
            b'"' => in_quote = !in_quote,
            b'(' if !in_quote => depth += 1,
            b')' if !in_quote => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn skip_inline_ws(s: &str, mut i: usize) -> usize {
    let bytes = s.as_bytes();
    while i < bytes.len() && (bytes[i] == b' ' || bytes[i] == b'\t') {
        i += 1;
    }
    i
}

fn split_args(inner: &str, offset: usize) -> Result<Vec<Arg>, DslError> {
    if inner.trim().is_empty() {
        return Err(DslError::EmptyArgument { offset });
    }
    let mut pieces = Vec::new();
    let mut depth = 0i32;
    let mut in_quote = false;
    let mut start = 0;
    for (i, b) in inner.bytes().enumerate() {
        match b {
            b'"' => in_quote = !in_quote,
            b'(' | b'[' if !in_quote => depth += 1,
            b')' | b']' if !in_quote => depth -= 1,
            b',' if !in_quote && depth == 0 => {
                pieces.push(&inner[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    pieces.push(&inner[start..]);
    pieces
        .into_iter()
        .map(|p| {
            let p = p.trim();
            if p.is_empty() {
                Err(DslError::EmptyArgument { offset })
            } else if is_var_ref(p) {
                Ok(Arg::VarRef(p.to_string()))
            } else {
                Ok(Arg::Literal(p.to_string()))
            }
        })
        .collect()
}

/// Parses one reasoning step, extracting every `NAME(args) -> var` call.
pub fn parse_step(text: &str) -> Result<Step, DslError> {
    let bytes = text.as_bytes();
    let mut calls = Vec::new();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let at_word_start = i == 0 || !is_ident_char(bytes[i - 1]);
        if !(is_ident_start(b) && at_word_start) {
            i += 1;
            continue;
        }
        let name_end = ident_end(bytes, i);
        let ident = &text[i..name_end];
        if bytes.get(name_end) != Some(&b'(') {
            i = name_end;
            continue;
        }
        let Some(close) = find_matching_paren(bytes, name_end) else {
            if looks_like_manipulation(ident) {
                return Err(DslError::MalformedCall {
                    offset: i,
                    reason: format!("unbalanced parentheses after {ident}"),
                });
            }
            i = name_end + 1;
            continue;
        };
        let after = skip_inline_ws(text, close + 1);
        let arrow_len = if text[after..].starts_with(ASCII_ARROW) {
            ASCII_ARROW.len()
        } else if text[after..].starts_with(UNICODE_ARROW) {
            UNICODE_ARROW.len()
        } else {
            // Parenthesised prose, e.g. "OCR(an image)" used as a noun.
            i = name_end + 1;
            continue;
        };
        let var_start = skip_inline_ws(text, after + arrow_len);
        if var_start >= bytes.len() || !(bytes[var_start].is_ascii_alphabetic() || bytes[var_start] == b'_') {
            return Err(DslError::MalformedCall {
                offset: i,
                reason: format!("missing result variable after arrow in {ident}"),
            });
        }
        let var_end = ident_end(bytes, var_start);
        let result_var = text[var_start..var_end].to_string();
        let mut end = var_end;
        let mut bound = None;
        if bytes.get(end) == Some(&b'=') {
            match Value::parse_prefix(&text[end + 1..]) {
                Ok((v, used)) => {
                    bound = Some(v);
                    end = end + 1 + used;
                }
                Err(e) => {
                    return Err(DslError::MalformedCall {
                        offset: i,
                        reason: format!("bad bound value for {result_var}: {e}"),
                    })
                }
            }
        }
        let args = split_args(&text[name_end + 1..close], i)?;
        calls.push(ManipulationCall {
            name: ManipulationName::from_ident(ident),
            args,
            declared_result_kind: ValueKind::from_var_prefix(&result_var),
            result_var,
            bound,
            surface: text[i..end].to_string(),
        });
        spans.push(i..end);
        i = end;
    }
    Ok(Step { raw_text: text.to_string(), calls, spans })
}

/// Renders a step back to text. For parsed steps this is the original input.
pub fn render_step(step: &Step) -> String {
    let mut out = String::with_capacity(step.raw_text.len());
    let mut cursor = 0;
    for (call, span) in step.calls.iter().zip(&step.spans) {
        out.push_str(&step.raw_text[cursor..span.start]);
        out.push_str(&call.surface);
        cursor = span.end;
    }
    out.push_str(&step.raw_text[cursor..]);
    out
}

fn strip_step_label(line: &str) -> &str {
    let t = line.trim_start();
    let lower = t.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("step") {
        let rest_t = rest.trim_start();
        let digits = rest_t.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 && rest_t[digits..].starts_with(':') {
            let consumed = t.len() - rest_t.len() + digits + 1;
            return t[consumed..].trim_start();
        }
    }
    line.trim()
}

fn answer_line(line: &str) -> Option<&str> {
    let t = line.trim();
    for prefix in ["final answer:", "answer:"] {
        if t.len() >= prefix.len() && t[..prefix.len()].eq_ignore_ascii_case(prefix) {
            return Some(t[prefix.len()..].trim());
        }
    }
    None
}

/// Parses a multi-line completion: one step per non-blank line, an optional
/// `Step N:` label stripped, and a single `Answer:` line taken as the final
/// answer.
pub fn parse_chain(text: &str) -> Result<Chain, DslError> {
    let mut steps = Vec::new();
    let mut final_answer = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(a) = answer_line(line) {
            if final_answer.is_some() {
                return Err(DslError::DuplicateAnswer { line: lineno + 1 });
            }
            final_answer = Some(a.to_string());
            continue;
        }
        steps.push(parse_step(strip_step_label(line))?);
    }
    Ok(Chain { steps, final_answer })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    UndefinedVariable { var: String, step: usize },
    UseBeforeDefinition { var: String, step: usize, defined_at: usize },
    DuplicateDefinition { var: String, step: usize },
    KindMismatch { var: String, name: String, declared: ValueKind },
    BoundKindMismatch { var: String, declared: ValueKind, actual: ValueKind },
}

/// Checks def-before-use, unique result variables, and result kinds against
/// the manipulation signatures. An empty list means the chain is well formed.
pub fn validate_chain(chain: &Chain) -> Vec<Violation> {
    let mut defined_at: HashMap<&str, usize> = HashMap::new();
    for (step_idx, step) in chain.steps.iter().enumerate() {
        for call in &step.calls {
            if defined_at.contains_key(call.result_var.as_str()) {
                continue;
            }
            defined_at.insert(&call.result_var, step_idx);
        }
    }

    let mut out = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (step_idx, step) in chain.steps.iter().enumerate() {
        for call in &step.calls {
            for var in call.referenced_vars() {
                match defined_at.get(var.as_str()) {
                    None => out.push(Violation::UndefinedVariable { var, step: step_idx }),
                    Some(&d) if d >= step_idx => {
                        out.push(Violation::UseBeforeDefinition { var, step: step_idx, defined_at: d })
                    }
                    Some(_) => {}
                }
            }
        }
        for call in &step.calls {
            if seen.insert(&call.result_var, step_idx).is_some() {
                out.push(Violation::DuplicateDefinition { var: call.result_var.clone(), step: step_idx });
            }
            if let (Some(declared), Some(allowed)) = (call.declared_result_kind, call.name.result_kinds()) {
                if !allowed.contains(&declared) {
                    out.push(Violation::KindMismatch {
                        var: call.result_var.clone(),
                        name: call.name.to_string(),
                        declared,
                    });
                }
            }
            if let (Some(declared), Some(v)) = (call.declared_result_kind, &call.bound) {
                let actual = v.kind();
                let compatible = actual == declared
                    || (declared == ValueKind::Box && actual == ValueKind::BoxList);
                if !compatible {
                    out.push(Violation::BoundKindMismatch { var: call.result_var.clone(), declared, actual });
                }
            }
        }
    }
    out
}
