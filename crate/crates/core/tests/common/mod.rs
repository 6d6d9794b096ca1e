//! Generators and independent reference implementations shared by the
//! integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comforge::attn::{attend, Matrix, MemoryState, TurnKV};
use comforge::dsl::{self, Chain, ManipulationCall};
use comforge::exec::{bicubic_resample, exec_calculate, ExecError, ImageBuffer};
use comforge::metric::{bleu, com_score, levenshtein, MetricConfig, Smoothing};
use comforge::tree::{dfs_positive_paths, ManipulationTree, MatchConfig, TreeNode};
use comforge::value::{ImageHandle, Value};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

// ---------------------------------------------------------------------------
// DSL step generator

#[derive(Debug, Clone)]
pub struct ExpectedCall {
    pub span: std::ops::Range<usize>,
    pub name: String,
    pub args: Vec<(bool, String)>,
    pub result_var: String,
    pub bound: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GeneratedStep {
    pub text: String,
    pub calls: Vec<ExpectedCall>,
}

const WORDS: &[&str] = &[
    "look", "at", "the", "sign", "then", "we", "read", "it", "carefully", "and", "count", "Next,", "finally",
    "on", "left", "of", "image.", "so:", "OCR", "box", "42",
];
const NAMES: &[&str] = &["GROUNDING", "OCR", "COUNTING", "CALCULATE", "CROP_AND_ZOOMIN", "LINE", "MEASURE", "TRACE_PATH"];
const PREFIXES: &[&str] = &["bbx", "txt", "num", "img", "pts"];

fn prose(r: &mut ChaCha8Rng, min: usize) -> String {
    let n = r.gen_range(min..min + 5);
    (0..n).map(|_| *WORDS.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
}

fn var(r: &mut ChaCha8Rng) -> String {
    format!("{}_{}", PREFIXES.choose(r).unwrap(), r.gen_range(1..20))
}

fn literal(r: &mut ChaCha8Rng) -> String {
    match r.gen_range(0..5) {
        0 => "the red car".into(),
        1 => format!("({},{},{},{})", r.gen_range(0..400), r.gen_range(0..400), r.gen_range(400..1000), r.gen_range(400..1000)),
        2 => format!("{}.{}", r.gen_range(0..100), r.gen_range(0..10)),
        3 => format!("num_{}+{}", r.gen_range(1..9), r.gen_range(0..50)),
        _ => "a person's hat".into(),
    }
}

fn bound_value(r: &mut ChaCha8Rng) -> String {
    match r.gen_range(0..5) {
        0 => format!("({},{},{},{})", r.gen_range(0..400), r.gen_range(0..400), r.gen_range(400..1000), r.gen_range(400..1000)),
        1 => format!("\"{}\"", ["STOP", "kings gate", "exit 4"].choose(r).unwrap()),
        2 => format!("{}", r.gen_range(-50..500)),
        3 => "3/4".into(),
        _ => format!("[({},{}),({},{})]", r.gen_range(0..999), r.gen_range(0..999), r.gen_range(0..999), r.gen_range(0..999)),
    }
}

/// A step of prose interleaved with 0..=3 calls, with the byte span and
/// parts of each call recorded as it is assembled.
pub fn gen_step(r: &mut ChaCha8Rng) -> GeneratedStep {
    let mut text = String::new();
    let mut calls = Vec::new();
    if r.gen_bool(0.7) {
        text.push_str(&prose(r, 1));
    }
    for _ in 0..r.gen_range(0..=3) {
        if !text.is_empty() {
            text.push(' ');
        }
        let name = NAMES.choose(r).unwrap().to_string();
        let nargs = r.gen_range(1..=3);
        let args: Vec<(bool, String)> =
            (0..nargs).map(|_| if r.gen_bool(0.4) { (true, var(r)) } else { (false, literal(r)) }).collect();
        let sep = if r.gen_bool(0.5) { ", " } else { "," };
        let arrow = *["->", " -> ", "→", " → "].choose(r).unwrap();
        let result_var = var(r);
        let bound = r.gen_bool(0.3).then(|| bound_value(r));
        let start = text.len();
        text.push_str(&name);
        text.push('(');
        text.push_str(&args.iter().map(|a| a.1.as_str()).collect::<Vec<_>>().join(sep));
        text.push(')');
        text.push_str(arrow);
        text.push_str(&result_var);
        if let Some(b) = &bound {
            text.push('=');
            text.push_str(b);
        }
        calls.push(ExpectedCall { span: start..text.len(), name, args, result_var, bound });
        if r.gen_bool(0.6) {
            text.push(' ');
            text.push_str(&prose(r, 1));
        }
    }
    GeneratedStep { text, calls }
}

/// Checks parse and render of one generated step against its recorded parts.
pub fn check_step(g: &GeneratedStep) -> Result<(), String> {
    let step = dsl::parse_step(&g.text).map_err(|e| format!("{:?}: {e}", g.text))?;
    let rendered = dsl::render_step(&step);
    if rendered != g.text {
        return Err(format!("render mismatch: {:?} vs {:?}", rendered, g.text));
    }
    if step.calls().len() != g.calls.len() {
        return Err(format!("{:?}: {} calls, expected {}", g.text, step.calls().len(), g.calls.len()));
    }
    for ((call, span), exp) in step.calls().iter().zip(step.spans()).zip(&g.calls) {
        let args: Vec<(bool, String)> = call
            .args
            .iter()
            .map(|a| (matches!(a, dsl::Arg::VarRef(_)), a.as_str().to_string()))
            .collect();
        let ok = *span == exp.span
            && call.name.as_str() == exp.name
            && args == exp.args
            && call.result_var == exp.result_var
            && call.bound.as_ref().map(|v| v.to_string()) == exp.bound;
        if !ok {
            return Err(format!("{:?}: parsed {call:?} at {span:?}, expected {exp:?}", g.text));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Random trees and a brute-force path oracle

pub const GOLDEN: &str = "kingsgate";
const LABELS: &[&str] = &["kingsgate", "KINGSGATE", "Kingsgate.", "kings gate", "exit", "stop"];

fn oracle_matches(label: &str) -> bool {
    label.trim_end_matches('.').to_lowercase() == GOLDEN
}

fn ocr_call(step: usize, label: Option<&str>) -> ManipulationCall {
    let text = match label {
        Some(l) => format!("OCR(bbx_0)->txt_{}={}", step + 1, serde_json::to_string(l).unwrap()),
        None => format!("OCR(bbx_0)->txt_{}", step + 1),
    };
    dsl::parse_step(&text).unwrap().calls()[0].clone()
}

fn chain_of(depth: usize) -> Chain {
    let text: Vec<String> = (0..depth).map(|i| format!("read OCR(bbx_0)->txt_{}", i + 1)).collect();
    dsl::parse_chain(&text.join("\n")).unwrap()
}

/// A random tree over a chain of `chain_len` OCR steps. Nodes carry a unique
/// image handle so paths can be compared by identity; some branches stop
/// early, some nodes carry an error, some steps are prose-only.
pub fn random_tree(r: &mut ChaCha8Rng) -> ManipulationTree {
    let chain_len = r.gen_range(1..=4);
    let mut next_id = 0;
    fn grow(r: &mut ChaCha8Rng, level: usize, chain_len: usize, id: &mut usize) -> Vec<TreeNode> {
        if level == chain_len || (level > 0 && r.gen_bool(0.1)) {
            return Vec::new();
        }
        let width = r.gen_range(1..=3);
        (0..width)
            .map(|_| {
                *id += 1;
                let errored = r.gen_bool(0.1);
                let label = LABELS.choose(r).unwrap();
                let has_call = !r.gen_bool(0.15);
                let calls = if errored || !has_call { Vec::new() } else { vec![ocr_call(level, Some(label))] };
                let mut binding = BTreeMap::new();
                if let Some(c) = calls.first() {
                    binding.insert(c.result_var.clone(), c.bound.clone().unwrap());
                }
                let error = errored.then(|| comforge::tree::NodeError::Unsupported("X".into()));
                let children = if errored { Vec::new() } else { grow(r, level + 1, chain_len, id) };
                TreeNode {
                    step_index: Some(level),
                    calls,
                    binding,
                    image: ImageHandle::new(format!("n{id}")),
                    error,
                    pruned: None,
                    children,
                }
            })
            .collect()
    }
    let mut root = TreeNode::root(ImageHandle::new("root"));
    root.children = grow(r, 0, chain_len, &mut next_id);
    ManipulationTree { chain: chain_of(chain_len), root }
}

/// Every root-to-leaf path as a list of node handles, found by exhaustive
/// recursion, then filtered: full depth, no error, and the last manipulation
/// result on the path reads the golden answer.
pub fn brute_force_paths(tree: &ManipulationTree) -> Vec<Vec<String>> {
    fn all<'a>(n: &'a TreeNode, prefix: Vec<&'a TreeNode>, out: &mut Vec<Vec<&'a TreeNode>>) {
        let mut p = prefix;
        p.push(n);
        if n.children.is_empty() {
            out.push(p);
        } else {
            for c in &n.children {
                all(c, p.clone(), out);
            }
        }
    }
    let mut paths = Vec::new();
    all(&tree.root, Vec::new(), &mut paths);
    let depth = tree.chain.steps.len();
    paths
        .into_iter()
        .filter(|p| p.len() == depth + 1)
        .filter(|p| p.iter().all(|n| n.error.is_none()))
        .filter(|p| {
            let last = p.iter().rev().find_map(|n| n.calls.last()).and_then(|c| c.bound.clone());
            matches!(last, Some(Value::Text(t)) if oracle_matches(&t))
        })
        .map(|p| p.iter().map(|n| n.image.as_str().to_string()).collect())
        .collect()
}

pub fn dfs_paths(tree: &ManipulationTree) -> Vec<Vec<String>> {
    dfs_positive_paths(tree, GOLDEN, &MatchConfig::default())
        .into_iter()
        .map(|p| p.nodes.iter().map(|n| n.image.as_str().to_string()).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Edit distance

/// Plain recursive definition, exponential time.
pub fn levenshtein_oracle(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if a[0] == b[0] {
        return levenshtein_oracle(&a[1..], &b[1..]);
    }
    1 + levenshtein_oracle(&a[1..], b)
        .min(levenshtein_oracle(a, &b[1..]))
        .min(levenshtein_oracle(&a[1..], &b[1..]))
}

/// All lists of length 0..=max_len over `0..alphabet`.
pub fn all_lists(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for l in &frontier {
            for s in 0..alphabet {
                let mut m: Vec<u8> = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Relabels symbols by first occurrence across `a` then `b`; edit distance
/// is invariant under such renaming, so the oracle runs once per class.
fn canonical_pair(a: &[u8], b: &[u8]) -> u64 {
    let mut map = [u8::MAX; 256];
    let mut next = 0u8;
    let mut key = (a.len() as u64) << 4 | b.len() as u64;
    for &s in a.iter().chain(b) {
        if map[s as usize] == u8::MAX {
            map[s as usize] = next;
            next += 1;
        }
        key = key << 2 | map[s as usize] as u64;
    }
    key
}

/// Compares the library edit distance with the oracle on every pair of
/// lists up to `max_len` over `alphabet` symbols. Returns the pair count.
pub fn exhaustive_levenshtein(max_len: usize, alphabet: u8) -> Result<usize, String> {
    let lists = all_lists(max_len, alphabet);
    let mut cache: HashMap<u64, usize> = HashMap::new();
    let mut pairs = 0;
    for a in &lists {
        for b in &lists {
            let expected = *cache.entry(canonical_pair(a, b)).or_insert_with(|| levenshtein_oracle(a, b));
            let got = levenshtein(a, b);
            if got != expected {
                return Err(format!("levenshtein({a:?}, {b:?}) = {got}, oracle {expected}"));
            }
            pairs += 1;
        }
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// BLEU and the metric

pub fn bleu_fixture() -> (String, String, f64) {
    let text = std::fs::read_to_string(fixture_dir().join("bleu/pair.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    (
        v["candidate"].as_str().unwrap().to_string(),
        v["reference"].as_str().unwrap().to_string(),
        v["expected"].as_f64().unwrap(),
    )
}

pub fn check_bleu_worksheet() -> Result<f64, String> {
    let (cand, refr, expected) = bleu_fixture();
    // closed form from the worksheet: (7/10 * 5/9 * 3/8 * 2/7)^(1/4)
    let closed = (1.0f64 / 24.0).powf(0.25);
    if (closed - expected).abs() > 1e-12 {
        return Err(format!("worksheet value {expected} disagrees with closed form {closed}"));
    }
    let got = bleu(&cand, &refr, Smoothing::Off);
    if (got - expected).abs() > 1e-9 {
        return Err(format!("bleu = {got}, worksheet {expected}"));
    }
    Ok(got)
}

/// Random resolved chains with at least four prose tokens.
pub fn random_chain(r: &mut ChaCha8Rng) -> (Chain, String) {
    let n = r.gen_range(1..=4);
    let mut lines = Vec::new();
    for i in 0..n {
        let mut s = gen_step(r).text;
        if i == 0 {
            s = format!("first we look closely {s}");
        }
        lines.push(s);
    }
    let chain = Chain { steps: lines.iter().map(|l| dsl::parse_step(l).unwrap()).collect(), final_answer: None };
    (chain, ["STOP", "3", "kings gate"].choose(r).unwrap().to_string())
}

pub fn check_metric_identity(samples: usize) -> Result<(), String> {
    let mut r = rng(11);
    let d2 = MetricConfig::default();
    let d1 = MetricConfig { divisor: 1, ..Default::default() };
    for _ in 0..samples {
        let (c, a) = random_chain(&mut r);
        let two = com_score((&c, &a), (&c, &a), &d2);
        let one = com_score((&c, &a), (&c, &a), &d1);
        if two.s_k != 1.0 || (two.s_c - 1.0).abs() > 1e-9 {
            return Err(format!("s_k {} s_c {} for {:?}", two.s_k, two.s_c, c.paragraph()));
        }
        if (two.acc - 0.5).abs() > 1e-9 || (one.acc - 1.0).abs() > 1e-9 {
            return Err(format!("acc {} / {} for {:?}", two.acc, one.acc, c.paragraph()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bicubic

/// Keys cubic convolution kernel with a = -0.5.
fn keys(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Direct 2-D evaluation: each output pixel is the sum over a 4x4
/// neighbourhood of the source, weighted by products of normalized Keys
/// weights at the pixel-center-aligned source position, edges clamped.
pub fn bicubic_oracle(img: &ImageBuffer, out_w: u32, out_h: u32) -> ImageBuffer {
    let weights = |o: u32, n_in: u32, n_out: u32| -> Vec<(i64, f64)> {
        let x = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let x0 = x.floor() as i64;
        let raw: Vec<(i64, f64)> = (x0 - 1..=x0 + 2).map(|i| (i, keys(x - i as f64))).collect();
        let total: f64 = raw.iter().map(|t| t.1).sum();
        raw.into_iter().map(|(i, w)| (i.clamp(0, n_in as i64 - 1), w / total)).collect()
    };
    ImageBuffer::from_fn(out_w, out_h, |ox, oy| {
        let wx = weights(ox, img.width(), out_w);
        let wy = weights(oy, img.height(), out_h);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(iy, fy) in &wy {
                for &(ix, fx) in &wx {
                    acc += fx * fy * img.get(ix as u32, iy as u32)[c] as f64;
                }
            }
            *out = acc.round().clamp(0.0, 255.0) as u8;
        }
        px
    })
}

pub fn max_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> u8 {
    a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
}

pub fn ramp8() -> ImageBuffer {
    ImageBuffer::from_fn(8, 8, |x, y| [(x * 32) as u8, (y * 32) as u8, ((x + y) * 16) as u8])
}

pub fn check_bicubic() -> Result<String, String> {
    for (w, h, ow, oh, c) in [(8, 8, 16, 16, [7, 100, 255]), (5, 3, 13, 7, [0, 0, 0]), (9, 9, 4, 4, [255, 1, 128]), (1, 1, 3, 5, [42, 42, 42])] {
        let img = ImageBuffer::new(w, h, c);
        let out = bicubic_resample(&img, ow, oh);
        if out.as_raw().chunks(3).any(|p| p != c) {
            return Err(format!("constant {c:?} {w}x{h} -> {ow}x{oh} deviates"));
        }
    }
    let ramp = ramp8();
    let got = bicubic_resample(&ramp, 16, 16);
    let want = bicubic_oracle(&ramp, 16, 16);
    let d = max_abs_diff(&got, &want);
    if d > 1 {
        return Err(format!("ramp x2 differs from oracle by {d}"));
    }
    Ok(format!("ramp max diff {d}"))
}

// ---------------------------------------------------------------------------
// Attention

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn vstack(parts: &[&Matrix]) -> Vec<Vec<f64>> {
    parts.iter().flat_map(|m| m.to_rows()).collect()
}

/// Dense attention where rows with `keep[j] == false` get weight zero.
pub fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], keep: &[bool]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q[0].len() as f64;
    let mut outs = Vec::new();
    let mut ws = Vec::new();
    for qi in q {
        let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let exps: Vec<f64> = logits.iter().zip(keep).map(|(l, &kp)| if kp { l.exp() } else { 0.0 }).collect();
        let z: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += wj * vc;
            }
        }
        outs.push(o);
        ws.push(w);
    }
    (outs, ws)
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Incremental two-turn attention against one-shot dense attention, row sums,
/// and the truncation suffix property on `configs` random configurations.
pub fn check_attention(configs: usize) -> Result<String, String> {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let d = r.gen_range(1..=6);
        let turns: Vec<usize> = (0..r.gen_range(1..=4)).map(|_| r.gen_range(0..=6)).collect();
        let total: usize = turns.iter().sum();
        if total == 0 {
            continue;
        }
        let max_len = r.gen_range(1..=total + 3);
        let mut state = MemoryState::new(max_len, d);
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (t, &n) in turns.iter().enumerate() {
            let k = random_matrix(&mut r, n, d);
            let v = random_matrix(&mut r, n, d);
            state = state.append_turn(&TurnKV::new(k.clone(), v.clone(), t).unwrap()).map_err(|e| e.to_string())?;
            ks.push(k);
            vs.push(v);
            if state.len() > max_len {
                return Err(format!("memory {} exceeds {max_len}", state.len()));
            }
        }
        let qn = r.gen_range(1..=4);
        let q = random_matrix(&mut r, qn, d);
        let out = attend(&q, &state).map_err(|e| e.to_string())?;

        let k_all = vstack(&ks.iter().collect::<Vec<_>>());
        let v_all = vstack(&vs.iter().collect::<Vec<_>>());
        let dropped = total.saturating_sub(max_len);
        if state.keys().to_rows() != k_all[dropped..] {
            return Err("memory is not the most recent suffix".into());
        }
        // Dropped rows are zeroed and masked out; they must not matter.
        let mut k_z = k_all.clone();
        let mut v_z = v_all.clone();
        for row in k_z.iter_mut().take(dropped).chain(v_z.iter_mut().take(dropped)) {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
        let keep: Vec<bool> = (0..total).map(|j| j >= dropped).collect();
        let (o_ref, w_ref) = dense_attention(&q.to_rows(), &k_z, &v_z, &keep);
        let w_ref: Vec<Vec<f64>> = w_ref.into_iter().map(|w| w[dropped..].to_vec()).collect();
        let diff = max_diff(&out.output.to_rows(), &o_ref).max(max_diff(&out.weights.to_rows(), &w_ref));
        worst = worst.max(diff);
        if diff > 1e-6 {
            return Err(format!("incremental vs dense differ by {diff}"));
        }
        for row in out.weights.to_rows() {
            if row.iter().any(|w| *w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(format!("weight row {row:?} is not a distribution"));
            }
        }
    }

    // Two turns within the threshold against one-shot attention.
    let d = 8;
    let (k1, v1, k2, v2) = (random_matrix(&mut r, 5, d), random_matrix(&mut r, 5, d), random_matrix(&mut r, 7, d), random_matrix(&mut r, 7, d));
    let s = MemoryState::new(64, d)
        .append_turn(&TurnKV::new(k1.clone(), v1.clone(), 0).unwrap())
        .and_then(|s| s.append_turn(&TurnKV::new(k2.clone(), v2.clone(), 1).unwrap()))
        .map_err(|e| e.to_string())?;
    let q = random_matrix(&mut r, 3, d);
    let inc = attend(&q, &s).map_err(|e| e.to_string())?;
    let (dense, _) = dense_attention(&q.to_rows(), &vstack(&[&k1, &k2]), &vstack(&[&v1, &v2]), &[true; 12]);
    let diff = max_diff(&inc.output.to_rows(), &dense);
    if diff > 1e-6 {
        return Err(format!("two-turn incremental vs dense differ by {diff}"));
    }
    Ok(format!("max deviation {:.1e}", worst.max(diff)))
}

// ---------------------------------------------------------------------------
// Arithmetic expressions

#[derive(Debug, Clone)]
pub enum Expr {
    Lit(i64),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
}

pub fn gen_expr(r: &mut ChaCha8Rng, depth: u32) -> Expr {
    if depth == 0 || r.gen_bool(0.3) {
        return Expr::Lit(r.gen_range(0..30));
    }
    if r.gen_bool(0.1) {
        return Expr::Neg(Box::new(gen_expr(r, depth - 1)));
    }
    let op = *['+', '-', '*', '/', '×', '÷'].choose(r).unwrap();
    Expr::Bin(op, Box::new(gen_expr(r, depth - 1)), Box::new(gen_expr(r, depth - 1)))
}

/// Fully parenthesised rendering, so precedence never decides the value.
pub fn render_expr(e: &Expr) -> String {
    match e {
        Expr::Lit(v) => v.to_string(),
        Expr::Neg(x) => format!("-({})", render_expr(x)),
        Expr::Bin(op, a, b) => format!("({} {op} {})", render_expr(a), render_expr(b)),
    }
}

/// Evaluates the tree directly; `None` on division by zero.
pub fn eval_expr(e: &Expr) -> Option<BigRational> {
    Some(match e {
        Expr::Lit(v) => BigRational::from_integer(BigInt::from(*v)),
        Expr::Neg(x) => -eval_expr(x)?,
        Expr::Bin(op, a, b) => {
            let (x, y) = (eval_expr(a)?, eval_expr(b)?);
            match op {
                '+' => x + y,
                '-' => x - y,
                '*' | '×' => x * y,
                _ => {
                    if y.is_zero() {
                        return None;
                    }
                    x / y
                }
            }
        }
    })
}

pub fn check_calculate(n: usize) -> Result<(), String> {
    let mut r = rng(3);
    for _ in 0..n {
        let e = gen_expr(&mut r, 4);
        let text = render_expr(&e);
        match (exec_calculate(&text), eval_expr(&e)) {
            (Ok(got), Some(want)) if got.0 == want => {}
            (Err(ExecError::DivisionByZero), None) => {}
            (got, want) => return Err(format!("{text}: got {got:?}, oracle {want:?}")),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// End-to-end fixture run through the binary

pub fn mock10() -> PathBuf {
    fixture_dir().join("mock10")
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_comforge"))
}

fn run_ok(cmd: &mut std::process::Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{:?} exited {:?}: {}", cmd, out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn generate_into(dir: &Path) -> Result<String, String> {
    run_ok(bin().arg("generate").arg("--config").arg(mock10().join("comforge.toml")).arg("--out").arg(dir))
}

/// Generate twice, compare outputs byte for byte, then check the report,
/// the multi-turn conversion and the statistics against committed values.
pub fn check_end_to_end() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = generate_into(&a)?;
    generate_into(&b)?;
    let com_a = std::fs::read(a.join("com.jsonl")).map_err(|e| e.to_string())?;
    let com_b = std::fs::read(b.join("com.jsonl")).map_err(|e| e.to_string())?;
    if com_a != com_b {
        return Err("com.jsonl differs between identical runs".into());
    }

    let expected = read_json(&mock10().join("expected_report.json"))?;
    let report = read_json(&a.join("report.json"))?;
    if report != expected {
        return Err(format!("report.json differs from the hand trace:\n{report:#}"));
    }
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).map_err(|e| e.to_string())?;
    if summary["success_rate"] != expected["success_rate"] {
        return Err(format!("stdout success_rate {} vs {}", summary["success_rate"], expected["success_rate"]));
    }

    let samples = comforge::dataset::read_com_jsonl(&a.join("com.jsonl")).map_err(|e| e.to_string())?;
    for s in &samples {
        for img in s.images.iter().skip(1) {
            if !a.join(&img.path).is_file() {
                return Err(format!("{}: missing derived image {}", s.id, img.path));
            }
        }
    }
    let mt_path = a.join("multiturn.jsonl");
    run_ok(bin().args(["convert", "--seed", "7"]).arg("--input").arg(a.join("com.jsonl")).arg("--out").arg(&mt_path))?;
    let converted = comforge::dataset::read_multiturn_jsonl(&mt_path).map_err(|e| e.to_string())?;
    if converted.len() != samples.len() {
        return Err(format!("{} conversations for {} samples", converted.len(), samples.len()));
    }
    for (s, m) in samples.iter().zip(&converted) {
        if m.id != s.id || m.turns.len() != s.images.len() {
            return Err(format!("{}: {} turns for {} images", s.id, m.turns.len(), s.images.len()));
        }
        for (k, (t, img)) in m.turns.iter().zip(&s.images).enumerate() {
            if t.image != *img {
                return Err(format!("{}: turn {k} shows the wrong image", s.id));
            }
            if k > 0 && t.prompt != comforge::dataset::PromptConfig::default().continuation_prompt {
                return Err(format!("{}: turn {k} prompt {:?}", s.id, t.prompt));
            }
        }
        let last = &m.turns.last().unwrap().response;
        if !last.ends_with(&format!("Answer: {}", s.answer)) {
            return Err(format!("{}: last turn does not end with the answer", s.id));
        }
    }

    let stats_text = run_ok(bin().arg("stats").arg("--input").arg(a.join("com.jsonl")))?;
    let stats: serde_json::Value = serde_json::from_str(&stats_text).map_err(|e| e.to_string())?;
    let want = read_json(&mock10().join("expected_stats.json"))?;
    if stats != want {
        return Err(format!("stats differ from the hand count:\n{stats:#}"));
    }
    Ok(format!("{} samples, success_rate {}", samples.len(), report["success_rate"]))
}

// ---------------------------------------------------------------------------
// Resilience under injected grounding failures

pub const RESILIENCE_SEED: u64 = 1;

pub fn mock10_generate(fail: Option<comforge::annotators::FailureInjection>) -> comforge::pipeline::GenerateOutput {
    use comforge::annotators::*;
    let dir = mock10();
    let questions = comforge::dataset::load_vqa_jsonl(&dir.join("vqa.jsonl")).unwrap();
    let ling = MockLinguisticAnnotator::new(FixtureStore::load(&dir.join("llm.jsonl")).unwrap());
    let mut vis = MockVisualAnnotator::new(FixtureStore::load(&dir.join("visual.jsonl")).unwrap());
    if let Some(f) = fail {
        vis = vis.with_grounding_failures(f, 3);
    }
    let opts = comforge::pipeline::GenerateOptions {
        image_root: dir.join("images"),
        tree: Default::default(),
        matcher: MatchConfig::default(),
        first_only: false,
        jobs: 2,
        guideline: DEFAULT_GUIDELINE.to_string(),
        demonstrations: default_demonstrations(),
    };
    comforge::pipeline::generate(&questions.records, questions.errors, &ling, &vis, &opts)
}

/// Every emitted chain must have every call resolved and pass validation.
pub fn check_samples_error_free(samples: &[comforge::dataset::CoMSample]) -> Result<(), String> {
    for s in samples {
        let chain = s.chain();
        if let Some((_, c)) = chain.calls().find(|(_, c)| c.bound.is_none()) {
            return Err(format!("{}: call {} left unresolved", s.id, c.surface));
        }
        let v = dsl::validate_chain(&chain);
        if !v.is_empty() {
            return Err(format!("{}: {v:?}", s.id));
        }
        s.check()?;
    }
    Ok(())
}

pub fn check_resilience() -> Result<String, String> {
    use comforge::annotators::FailureInjection;
    let clean = mock10_generate(None);
    let fail = FailureInjection { rate: 0.2, seed: RESILIENCE_SEED };
    let out = std::panic::catch_unwind(|| mock10_generate(Some(fail))).map_err(|_| "generation panicked".to_string())?;
    let report = out.report.as_ref().ok_or("no report")?;
    let transport = out.dead_branches.iter().filter(|d| d.branch.error_kind.as_deref() == Some("transport")).count();
    if transport == 0 {
        return Err("no injected failure reached the audit log".into());
    }
    check_samples_error_free(&out.samples)?;
    // Failures can only remove paths, never create new ones.
    let clean_ids: std::collections::BTreeSet<_> = clean.samples.iter().map(|s| s.id.clone()).collect();
    if let Some(s) = out.samples.iter().find(|s| !clean_ids.contains(&s.id)) {
        return Err(format!("{} appears only under failures", s.id));
    }
    Ok(format!(
        "{} transport dead branches, {} of {} paths kept",
        transport,
        report.search.positive_paths,
        clean.report.as_ref().unwrap().search.positive_paths
    ))
}
