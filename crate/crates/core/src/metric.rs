//! Keypoints-aware chain metric: an edit-distance score over manipulation
//! keypoints combined with BLEU over the chain text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dsl::{Arg, Chain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeypointKind {
    ManipName,
    Param,
    Result,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Keypoint {
    pub kind: KeypointKind,
    pub surface: String,
}

impl Keypoint {
    fn new(kind: KeypointKind, surface: impl Into<String>) -> Self {
        Self { kind, surface: surface.into() }
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Name, then each argument, then the result, for every call in step order.
/// Unbound results contribute their variable name.
pub fn extract_keypoints(chain: &Chain) -> Vec<Keypoint> {
    let mut out = Vec::new();
    for (_, call) in chain.calls() {
        out.push(Keypoint::new(KeypointKind::ManipName, call.name.as_str().to_uppercase()));
        for arg in &call.args {
            let surface = match arg {
                Arg::VarRef(v) => v.clone(),
                Arg::Literal(l) => collapse_ws(l),
            };
            out.push(Keypoint::new(KeypointKind::Param, surface));
        }
        let result = match &call.bound {
            Some(v) => v.to_string(),
            None => call.result_var.clone(),
        };
        out.push(Keypoint::new(KeypointKind::Result, result));
    }
    out
}

/// Maps both lists onto indices into their shared bag of elements, numbered
/// by first occurrence over `gold` and then `pred`.
pub fn discretize(pred: &[Keypoint], gold: &[Keypoint]) -> (Vec<usize>, Vec<usize>) {
    let mut bag: HashMap<&Keypoint, usize> = HashMap::new();
    for k in gold.iter().chain(pred) {
        let next = bag.len();
        bag.entry(k).or_insert(next);
    }
    let idx = |l: &[Keypoint]| l.iter().map(|k| bag[k]).collect();
    (idx(pred), idx(gold))
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dist / max(|pred|, |gold|)`; two empty lists agree fully.
pub fn manipulation_score(pred: &[usize], gold: &[usize]) -> f64 {
    let n = pred.len().max(gold.len());
    if n == 0 {
        return 1.0;
    }
    (n - levenshtein(pred, gold)) as f64 / n as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    Off,
    /// Add one to numerator and denominator of the n > 1 precisions.
    AddOne,
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform weights over 1..=4-grams and the brevity
/// penalty; tokens are whitespace-separated.
pub fn bleu(candidate: &str, reference: &str, smoothing: Smoothing) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refr: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let c = ngram_counts(&cand, n);
        let r = ngram_counts(&refr, n);
        let matched: usize = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
        let total = cand.len().saturating_sub(n - 1);
        let (num, den) = match smoothing {
            Smoothing::AddOne if n > 1 => (matched + 1, total + 1),
            _ => (matched, total),
        };
        if num == 0 {
            return 0.0;
        }
        log_sum += (num as f64 / den as f64).ln() / 4.0;
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// 2 follows the formula as printed; 1 gives a score in [0, 1].
    pub divisor: u8,
    pub smoothing: Smoothing,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { divisor: 2, smoothing: Smoothing::Off }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub s_k: f64,
    pub s_c: f64,
    pub acc: f64,
    pub divisor: u8,
    pub pred_keypoints: Vec<Keypoint>,
    pub gold_keypoints: Vec<Keypoint>,
}

/// Scores a predicted chain against the gold chain. Answers enter through
/// the paragraph text only.
pub fn com_score(pred: (&Chain, &str), gold: (&Chain, &str), config: &MetricConfig) -> MetricReport {
    let pk = extract_keypoints(pred.0);
    let gk = extract_keypoints(gold.0);
    let (pi, gi) = discretize(&pk, &gk);
    let s_k = manipulation_score(&pi, &gi);
    let text = |c: &Chain, a: &str| format!("{} {}", c.paragraph(), a).trim().to_string();
    let s_c = bleu(&text(pred.0, pred.1), &text(gold.0, gold.1), config.smoothing);
    let acc = (0.6 * s_k + 0.4 * s_c) / f64::from(config.divisor);
    MetricReport { s_k, s_c, acc, divisor: config.divisor, pred_keypoints: pk, gold_keypoints: gk }
}
