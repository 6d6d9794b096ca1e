//! Expansion of a placeholder chain into a tree over annotator results, and
//! depth-first search for the paths that end in the golden answer.
//!
//! Each tree level below the root corresponds to one chain step. A step's
//! calls are executed against the bindings inherited from the parent; calls
//! that yield several candidates (grounding boxes) fan out into one child per
//! candidate combination.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotators::{resolve_visual, AnnotatorConfig, AnnotatorError, VisualAnnotator, VisualRequest};
use crate::dataset::{CoMSample, ImageRef, Provenance, VqaTriple};
use crate::dsl::{self, Arg, Chain, ManipulationCall, ManipulationName};
use crate::exec::{self, ExecError, ImageStore, LineStyle, ZoomSpec};
use crate::value::{ImageHandle, NormBox, NormPoint, Num, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct TreeConfig {
    pub annotator: AnnotatorConfig,
    /// Upper bound on nodes per tree, root included.
    pub node_budget: usize,
    pub dedup_iou: f64,
    pub line_style: LineStyle,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            annotator: AnnotatorConfig::default(),
            node_budget: 256,
            dedup_iou: exec::DEFAULT_DEDUP_IOU,
            line_style: LineStyle::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error("no executor for manipulation {0}")]
    Unsupported(String),
    #[error("variable {0} is not bound on this path")]
    Unbound(String),
}

impl NodeError {
    pub fn kind(&self) -> &'static str {
        match self {
            NodeError::Exec(_) => "executor",
            NodeError::Annotator(AnnotatorError::Transport { .. }) => "transport",
            NodeError::Annotator(_) => "annotator",
            NodeError::Unsupported(_) => "unsupported",
            NodeError::Unbound(_) => "unbound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNode {
    /// Chain step this node resolves; `None` for the root.
    pub step_index: Option<usize>,
    /// The step's calls with their results attached.
    pub calls: Vec<ManipulationCall>,
    /// Results produced at this node, by variable.
    pub binding: BTreeMap<String, Value>,
    /// Image in view after this node.
    pub image: ImageHandle,
    #[serde(serialize_with = "ser_error")]
    pub error: Option<NodeError>,
    /// Why expansion stopped below this node, when it did not reach the end.
    pub pruned: Option<String>,
    pub children: Vec<TreeNode>,
}

fn ser_error<S: serde::Serializer>(e: &Option<NodeError>, s: S) -> Result<S::Ok, S::Error> {
    match e {
        Some(e) => serde_json::json!({ "kind": e.kind(), "message": e.to_string() }).serialize(s),
        None => s.serialize_none(),
    }
}

impl TreeNode {
    pub fn root(image: ImageHandle) -> Self {
        Self {
            step_index: None,
            calls: Vec::new(),
            binding: BTreeMap::new(),
            image,
            error: None,
            pruned: None,
            children: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TreeNode::node_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(TreeNode::depth).max().unwrap_or(0)
    }

    /// Every root-to-leaf path, in pre-order.
    pub fn leaf_paths(&self) -> Vec<Vec<&TreeNode>> {
        let mut out = Vec::new();
        let mut stack = Vec::new();
        fn walk<'a>(n: &'a TreeNode, stack: &mut Vec<&'a TreeNode>, out: &mut Vec<Vec<&'a TreeNode>>) {
            stack.push(n);
            if n.children.is_empty() {
                out.push(stack.clone());
            }
            for c in &n.children {
                walk(c, stack, out);
            }
            stack.pop();
        }
        walk(self, &mut stack, &mut out);
        out
    }
}

/// A chain together with the tree built from it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManipulationTree {
    pub chain: Chain,
    pub root: TreeNode,
}

/// Bindings and view state along one path.
#[derive(Debug, Clone)]
struct PathEnv {
    bindings: HashMap<String, Value>,
    box_origin: HashMap<String, ImageHandle>,
    image: ImageHandle,
}

struct Candidate {
    value: Value,
    /// Image a produced box refers to.
    origin: Option<ImageHandle>,
    /// New image in view, for image-producing calls.
    new_view: Option<ImageHandle>,
}

pub struct Executors<'a> {
    pub visual: &'a dyn VisualAnnotator,
    pub images: &'a ImageStore,
    pub config: &'a TreeConfig,
}

impl Executors<'_> {
    fn value_of<'e>(&self, env: &'e PathEnv, var: &str) -> Result<&'e Value, NodeError> {
        env.bindings.get(var).ok_or_else(|| NodeError::Unbound(var.to_string()))
    }

    fn box_arg(&self, env: &PathEnv, arg: &Arg) -> Result<(NormBox, ImageHandle), NodeError> {
        match arg {
            Arg::VarRef(v) => match self.value_of(env, v)? {
                Value::Box(b) => Ok((*b, env.box_origin.get(v).cloned().unwrap_or_else(|| env.image.clone()))),
                Value::BoxList(bs) if bs.len() == 1 => Ok((bs[0], env.box_origin.get(v).cloned().unwrap_or_else(|| env.image.clone()))),
                other => Err(ExecError::BadArgument(format!("{v} holds {:?}, expected a box", other.kind())).into()),
            },
            Arg::Literal(l) => match Value::parse_prefix(l.trim()) {
                Ok((Value::Box(b), used)) if used == l.trim().len() => Ok((b, env.image.clone())),
                _ => Err(ExecError::BadArgument(format!("{l:?} is not a box")).into()),
            },
        }
    }

    fn grounding(&self, phrase: &str, image: &ImageHandle) -> Result<Vec<NormBox>, NodeError> {
        let req = VisualRequest::grounding(phrase, image.clone());
        let res = resolve_visual(&req, self.visual, self.images, &self.config.annotator)?;
        Ok(res.boxes.iter().map(|b| b.bbox).collect())
    }

    fn run(&self, call: &ManipulationCall, env: &PathEnv) -> Result<Vec<Candidate>, NodeError> {
        let first = call.args.first().ok_or_else(|| ExecError::BadArgument("missing argument".into()))?;
        match &call.name {
            ManipulationName::Grounding => {
                let phrase = call.args.iter().map(Arg::as_str).collect::<Vec<_>>().join(", ");
                let boxes = self.grounding(&phrase, &env.image)?;
                Ok(boxes
                    .into_iter()
                    .take(self.config.annotator.max_boxes)
                    .map(|b| Candidate { value: Value::Box(b), origin: Some(env.image.clone()), new_view: None })
                    .collect())
            }
            ManipulationName::Ocr => {
                let (region, image) = match first {
                    Arg::VarRef(v) => match self.value_of(env, v)? {
                        Value::Image(h) => (None, h.clone()),
                        _ => {
                            let (b, origin) = self.box_arg(env, first)?;
                            (Some(b), origin)
                        }
                    },
                    Arg::Literal(_) => match self.box_arg(env, first) {
                        Ok((b, origin)) => (Some(b), origin),
                        Err(_) => (None, env.image.clone()),
                    },
                };
                let req = VisualRequest::ocr(region, image);
                let text = resolve_visual(&req, self.visual, self.images, &self.config.annotator)?.joined_text();
                if text.is_empty() {
                    return Ok(Vec::new());
                }
                Ok(vec![Candidate { value: Value::Text(text), origin: None, new_view: None }])
            }
            ManipulationName::Counting => {
                let boxes = match first {
                    Arg::VarRef(v) => match self.value_of(env, v)? {
                        Value::Box(b) => vec![*b],
                        Value::BoxList(bs) => bs.clone(),
                        other => {
                            return Err(ExecError::BadArgument(format!("cannot count {:?}", other.kind())).into())
                        }
                    },
                    Arg::Literal(_) => {
                        let phrase = call.args.iter().map(Arg::as_str).collect::<Vec<_>>().join(", ");
                        self.grounding(&phrase, &env.image)?
                    }
                };
                let n = exec::exec_counting(&boxes, self.config.dedup_iou);
                Ok(vec![Candidate { value: Value::Num(n), origin: None, new_view: None }])
            }
            ManipulationName::Calculate => {
                let expr = call.args.iter().map(Arg::as_str).collect::<Vec<_>>().join(",");
                let expr = substitute_numbers(&expr, env)?;
                let n = exec::exec_calculate(&expr)?;
                Ok(vec![Candidate { value: Value::Num(n), origin: None, new_view: None }])
            }
            ManipulationName::CropAndZoomIn => {
                let (region, origin) = self.box_arg(env, first)?;
                let ratio = match call.args.get(1) {
                    None => None,
                    Some(Arg::VarRef(v)) => match self.value_of(env, v)? {
                        Value::Num(n) => Some(n.clone()),
                        _ => return Err(ExecError::BadArgument(format!("{v} is not a number")).into()),
                    },
                    Some(Arg::Literal(l)) => Some(
                        Num::parse(l.trim_end_matches(['x', 'X']))
                            .ok_or_else(|| ExecError::InvalidRatio(l.clone()))?,
                    ),
                };
                let src = self.images.get(&origin)?;
                let label = ratio.as_ref().map_or("auto".to_string(), |r| r.to_string());
                let out = exec::exec_crop_zoomin(&src, &ZoomSpec { region, ratio })?;
                let handle = ImageHandle::new(format!(
                    "{origin}#crop({},{},{},{})x{label}",
                    region.x0(),
                    region.y0(),
                    region.x1(),
                    region.y1()
                ));
                self.images.insert(handle.clone(), out);
                Ok(vec![Candidate { value: Value::Image(handle.clone()), origin: None, new_view: Some(handle) }])
            }
            ManipulationName::Line => {
                let mut pts: Vec<NormPoint> = Vec::new();
                for arg in &call.args {
                    match arg {
                        Arg::VarRef(v) => match self.value_of(env, v)? {
                            Value::Points(p) => pts.extend(p),
                            _ => return Err(ExecError::BadArgument(format!("{v} holds no points")).into()),
                        },
                        Arg::Literal(l) => pts.extend(parse_points(l)?),
                    }
                }
                let src = self.images.get(&env.image)?;
                let out = exec::exec_line(&src, &pts, &self.config.line_style)?;
                let coords: Vec<String> = pts.iter().map(|p| format!("{},{}", p.x, p.y)).collect();
                let handle = ImageHandle::new(format!("{}#line({})", env.image, coords.join(";")));
                self.images.insert(handle.clone(), out);
                Ok(vec![Candidate { value: Value::Image(handle.clone()), origin: None, new_view: Some(handle) }])
            }
            ManipulationName::Custom(name) => Err(NodeError::Unsupported(name.clone())),
        }
    }
}

fn parse_points(lit: &str) -> Result<Vec<NormPoint>, NodeError> {
    let t = lit.trim();
    let bad = || NodeError::from(ExecError::BadArgument(format!("{lit:?} is not a point list")));
    let wrapped = if t.starts_with('[') { t.to_string() } else { format!("[{t}]") };
    match Value::parse_prefix(&wrapped) {
        Ok((Value::Points(p), used)) if used == wrapped.len() => Ok(p),
        _ => Err(bad()),
    }
}

/// Replaces variable references in an arithmetic expression with their
/// numeric values. Text results are accepted when they read as a number.
fn substitute_numbers(expr: &str, env: &PathEnv) -> Result<String, NodeError> {
    let mut out = String::new();
    let mut cursor = 0;
    for r in dsl::embedded_var_refs(expr) {
        out.push_str(&expr[cursor..r.start]);
        let var = &expr[r.clone()];
        let n = match env.bindings.get(var) {
            Some(Value::Num(n)) => n.clone(),
            Some(Value::Text(t)) => {
                let cleaned: String = t.chars().filter(|c| !matches!(c, ',' | '$' | ' ')).collect();
                Num::parse(&cleaned)
                    .ok_or_else(|| ExecError::BadArgument(format!("{var} = {t:?} is not a number")))?
            }
            Some(other) => return Err(ExecError::BadArgument(format!("{var} holds {:?}", other.kind())).into()),
            None => return Err(NodeError::Unbound(var.to_string())),
        };
        out.push_str(&format!("({n})"));
        cursor = r.end;
    }
    out.push_str(&expr[cursor..]);
    Ok(out)
}

struct Builder<'a, 'b> {
    chain: &'a Chain,
    exec: &'a Executors<'b>,
    nodes: usize,
}

/// One way of resolving every call in a step.
struct Outcome {
    env: PathEnv,
    calls: Vec<ManipulationCall>,
    binding: BTreeMap<String, Value>,
    error: Option<NodeError>,
}

impl Builder<'_, '_> {
    fn expand(&mut self, node: &mut TreeNode, env: &PathEnv, step_idx: usize) {
        let Some(step) = self.chain.steps.get(step_idx) else {
            return;
        };
        let mut partial = vec![Outcome { env: env.clone(), calls: Vec::new(), binding: BTreeMap::new(), error: None }];
        for call in step.calls() {
            let mut next = Vec::new();
            for o in partial {
                if o.error.is_some() {
                    next.push(o);
                    continue;
                }
                match self.exec.run(call, &o.env) {
                    Err(e) => next.push(Outcome { error: Some(e), ..o }),
                    Ok(cands) => {
                        for c in cands {
                            let mut o2 = Outcome {
                                env: o.env.clone(),
                                calls: o.calls.clone(),
                                binding: o.binding.clone(),
                                error: None,
                            };
                            let mut resolved = call.clone();
                            resolved.bound = Some(c.value.clone());
                            o2.calls.push(resolved);
                            o2.binding.insert(call.result_var.clone(), c.value.clone());
                            o2.env.bindings.insert(call.result_var.clone(), c.value);
                            if let Some(origin) = c.origin {
                                o2.env.box_origin.insert(call.result_var.clone(), origin);
                            }
                            if let Some(view) = c.new_view {
                                o2.env.image = view;
                            }
                            next.push(o2);
                        }
                    }
                }
            }
            partial = next;
        }

        if partial.is_empty() {
            node.pruned = Some(format!("step {} produced no result", step_idx + 1));
            return;
        }
        for o in partial {
            if self.nodes >= self.exec.config.node_budget {
                node.pruned = Some("node budget exhausted".into());
                return;
            }
            self.nodes += 1;
            let mut child = TreeNode {
                step_index: Some(step_idx),
                calls: o.calls,
                binding: o.binding,
                image: o.env.image.clone(),
                error: o.error,
                pruned: None,
                children: Vec::new(),
            };
            if child.error.is_none() {
                self.expand(&mut child, &o.env, step_idx + 1);
            }
            node.children.push(child);
        }
    }
}

/// Executes the chain against `image`, branching over multi-result calls.
/// Failed calls become error leaves; calls with no result end their branch.
pub fn build_tree(chain: &Chain, image: &ImageHandle, exec: &Executors<'_>) -> ManipulationTree {
    let mut root = TreeNode::root(image.clone());
    let env = PathEnv { bindings: HashMap::new(), box_origin: HashMap::new(), image: image.clone() };
    let mut b = Builder { chain, exec, nodes: 1 };
    b.expand(&mut root, &env, 0);
    ManipulationTree { chain: chain.clone(), root }
}

// ---------------------------------------------------------------------------
// Answer matching

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Normalized,
    Numeric,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchConfig {
    pub mode: MatchMode,
}

pub trait AnswerMatcher: Sync {
    fn matches(&self, candidate: &str, golden: &str) -> bool;
}

impl AnswerMatcher for MatchConfig {
    fn matches(&self, candidate: &str, golden: &str) -> bool {
        answer_match(candidate, golden, self)
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let trimmed = lower.trim().trim_matches(|c: char| !c.is_alphanumeric());
    trimmed
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn answer_match(candidate: &str, golden: &str, config: &MatchConfig) -> bool {
    let (c, g) = (normalize_answer(candidate), normalize_answer(golden));
    if config.mode == MatchMode::Numeric {
        let num = |s: &str| Num::parse(&s.replace(',', ""));
        if let (Some(a), Some(b)) = (num(&c), num(&g)) {
            return a == b;
        }
    }
    c == g
}

// ---------------------------------------------------------------------------
// Positive paths

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathNode {
    pub step_index: Option<usize>,
    pub calls: Vec<ManipulationCall>,
    pub binding: BTreeMap<String, Value>,
    pub image: ImageHandle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivePath {
    pub nodes: Vec<PathNode>,
    pub resolved_chain: Chain,
    pub answer: String,
}

impl PositivePath {
    /// Outputs of image-producing calls, in path order.
    pub fn produced_images(&self) -> Vec<ImageHandle> {
        self.resolved_chain
            .calls()
            .filter(|(_, c)| c.name.produces_image())
            .filter_map(|(_, c)| match &c.bound {
                Some(Value::Image(h)) => Some(h.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Result of the last manipulation on a path, as answer text.
pub fn terminal_answer(path: &[&TreeNode]) -> Option<String> {
    path.iter()
        .rev()
        .find_map(|n| n.calls.last())
        .and_then(|c| c.bound.as_ref())
        .map(Value::answer_text)
}

/// A path counts when it resolves every chain step, carries no error and
/// its terminal answer matches.
fn is_positive(path: &[&TreeNode], chain_len: usize, golden: &str, matcher: &dyn AnswerMatcher) -> bool {
    let Some(leaf) = path.last() else { return false };
    if chain_len == 0 || leaf.step_index != Some(chain_len - 1) {
        return false;
    }
    if path.iter().any(|n| n.error.is_some()) {
        return false;
    }
    terminal_answer(path).is_some_and(|a| matcher.matches(&a, golden))
}

fn to_positive(tree: &ManipulationTree, path: &[&TreeNode], answer: String) -> PositivePath {
    let mut steps = Vec::with_capacity(tree.chain.steps.len());
    for n in path.iter().skip(1) {
        let idx = n.step_index.expect("non-root nodes have a step");
        let bindings: HashMap<String, Value> = n.binding.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        steps.push(tree.chain.steps[idx].with_bindings(&bindings));
    }
    PositivePath {
        nodes: path
            .iter()
            .map(|n| PathNode {
                step_index: n.step_index,
                calls: n.calls.clone(),
                binding: n.binding.clone(),
                image: n.image.clone(),
            })
            .collect(),
        resolved_chain: Chain { steps, final_answer: Some(answer.clone()) },
        answer,
    }
}

/// Depth-first, pre-order search for error-free root-to-leaf paths whose
/// terminal answer matches `golden`.
pub fn dfs_positive_paths(tree: &ManipulationTree, golden: &str, matcher: &dyn AnswerMatcher) -> Vec<PositivePath> {
    let chain_len = tree.chain.steps.len();
    let mut out = Vec::new();
    let mut stack: Vec<&TreeNode> = Vec::new();

    fn visit<'a>(
        node: &'a TreeNode,
        stack: &mut Vec<&'a TreeNode>,
        ctx: &mut (usize, &str, &dyn AnswerMatcher, &ManipulationTree, &mut Vec<PositivePath>),
    ) {
        if node.error.is_some() {
            return;
        }
        stack.push(node);
        if node.children.is_empty() {
            let (chain_len, golden, matcher, tree, out) = ctx;
            if is_positive(stack, *chain_len, golden, *matcher) {
                let answer = terminal_answer(stack).expect("positive paths have an answer");
                out.push(to_positive(tree, stack, answer));
            }
        }
        for c in &node.children {
            visit(c, stack, ctx);
        }
        stack.pop();
    }

    let mut ctx = (chain_len, golden, matcher, tree, &mut out);
    visit(&tree.root, &mut stack, &mut ctx);
    out
}

/// Root-to-leaf paths that did not become positive paths, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeadBranch {
    pub steps_resolved: usize,
    pub reason: String,
    pub error_kind: Option<String>,
    pub terminal_answer: Option<String>,
}

pub fn dead_branches(tree: &ManipulationTree, golden: &str, matcher: &dyn AnswerMatcher) -> Vec<DeadBranch> {
    let chain_len = tree.chain.steps.len();
    tree.root
        .leaf_paths()
        .into_iter()
        .filter(|p| !is_positive(p, chain_len, golden, matcher))
        .map(|p| {
            let leaf = p.last().expect("paths are nonempty");
            let answer = terminal_answer(&p);
            let (reason, kind) = if let Some(e) = p.iter().find_map(|n| n.error.as_ref()) {
                (e.to_string(), Some(e.kind().to_string()))
            } else if let Some(why) = &leaf.pruned {
                (why.clone(), None)
            } else if chain_len == 0 {
                ("chain has no steps".into(), None)
            } else if answer.is_none() {
                ("chain has no manipulation result".into(), None)
            } else {
                ("terminal answer does not match".into(), None)
            };
            let steps_resolved = p.iter().skip(1).filter(|n| n.error.is_none()).count();
            DeadBranch { steps_resolved, reason, error_kind: kind, terminal_answer: answer }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Samples and reports

/// Groups the resolved steps into one segment per image: each
/// image-producing call closes the current segment and opens the next.
pub fn path_to_com_sample(path: &PositivePath, source: &VqaTriple, path_index: usize) -> CoMSample {
    let mut images = vec![ImageRef::new(source.image.clone())];
    let mut segments = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for step in &path.resolved_chain.steps {
        current.push(step.raw_text());
        for call in step.calls().iter().filter(|c| c.name.produces_image()) {
            segments.push(current.join("\n"));
            current.clear();
            if let Some(Value::Image(h)) = &call.bound {
                images.push(ImageRef::new(h.as_str()));
            }
        }
    }
    segments.push(current.join("\n"));
    CoMSample {
        id: format!("{}-p{path_index}", source.id),
        images,
        question: source.question.clone(),
        segments,
        answer: source.answer.clone(),
        provenance: Provenance {
            source: source.source.clone().unwrap_or_else(|| "unknown".into()),
            question_id: source.id.clone(),
            path_index,
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trees_built: usize,
    pub positive_paths: usize,
    pub questions_with_path: usize,
    /// `questions_with_path / trees_built`; `None` when no tree was built.
    pub success_rate: Option<f64>,
}

impl SearchReport {
    pub fn record_tree(&mut self, positive_paths: usize) {
        self.trees_built += 1;
        self.positive_paths += positive_paths;
        if positive_paths > 0 {
            self.questions_with_path += 1;
        }
        self.success_rate = Some(self.questions_with_path as f64 / self.trees_built as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotators::{FixtureRecord, FixtureStore, MockVisualAnnotator};
    use crate::exec::ImageBuffer;

    fn fixtures(records: Vec<(VisualRequest, serde_json::Value)>) -> FixtureStore {
        let mut f = FixtureStore::default();
        for (req, response) in records {
            f.insert(FixtureRecord { request_key: Some(req.request_key()), request: None, response }).unwrap();
        }
        f
    }

    fn ground(phrase: &str, img: &str, boxes: &[[i64; 4]]) -> (VisualRequest, serde_json::Value) {
        let bs: Vec<_> = boxes
            .iter()
            .map(|b| serde_json::json!({"x0":b[0],"y0":b[1],"x1":b[2],"y1":b[3],"score":0.9}))
            .collect();
        (VisualRequest::grounding(phrase, ImageHandle::new(img)), serde_json::json!({ "boxes": bs }))
    }

    fn ocr(region: [i64; 4], img: &str, text: &str) -> (VisualRequest, serde_json::Value) {
        let b = NormBox::new(region[0], region[1], region[2], region[3]).unwrap();
        (
            VisualRequest::ocr(Some(b), ImageHandle::new(img)),
            serde_json::json!({"items":[{"text":text,"box":region}]}),
        )
    }

    fn setup() -> ImageStore {
        let store = ImageStore::new("/nonexistent");
        store.insert(ImageHandle::new("img.png"), ImageBuffer::new(64, 64, [10, 20, 30]));
        store
    }

    fn build(chain_text: &str, fx: FixtureStore, cfg: &TreeConfig) -> ManipulationTree {
        let images = setup();
        let mock = MockVisualAnnotator::new(fx);
        let exec = Executors { visual: &mock, images: &images, config: cfg };
        build_tree(&dsl::parse_chain(chain_text).unwrap(), &ImageHandle::new("img.png"), &exec)
    }

    const TWO_STEP: &str = "GROUNDING(the sign)->bbx_1\nOCR(bbx_1)->txt_1";

    fn sign_fixtures() -> FixtureStore {
        fixtures(vec![
            ground("the sign", "img.png", &[[0, 0, 100, 100], [200, 200, 400, 400]]),
            ocr([0, 0, 100, 100], "img.png", "KINGS GATE"),
            ocr([200, 200, 400, 400], "img.png", "KINGSGATE"),
        ])
    }

    #[test]
    fn branching_tree_shape() {
        let t = build(TWO_STEP, sign_fixtures(), &TreeConfig::default());
        assert_eq!(t.root.children.len(), 2);
        for c in &t.root.children {
            assert_eq!(c.children.len(), 1);
            assert_eq!(c.children[0].step_index, Some(1));
        }
        assert_eq!(t.root.node_count(), 5);
        assert_eq!(t.root.depth(), 3);
    }

    #[test]
    fn dfs_finds_single_matching_leaf() {
        let t = build(TWO_STEP, sign_fixtures(), &TreeConfig::default());
        let paths = dfs_positive_paths(&t, "KINGSGATE", &MatchConfig::default());
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].answer, "KINGSGATE");
        assert!(dsl::validate_chain(&paths[0].resolved_chain).is_empty());
        assert_eq!(
            paths[0].resolved_chain.steps[1].raw_text(),
            "OCR(bbx_1)->txt_1=\"KINGSGATE\""
        );
        assert!(dfs_positive_paths(&t, "EXIT", &MatchConfig::default()).is_empty());
        let dead = dead_branches(&t, "KINGSGATE", &MatchConfig::default());
        assert_eq!(dead.len(), 1);
        assert_eq!(dead[0].reason, "terminal answer does not match");
    }

    #[test]
    fn prose_chain_is_unary() {
        let t = build("look left\nlook right\nit is red", FixtureStore::default(), &TreeConfig::default());
        assert_eq!(t.root.depth(), 4);
        assert_eq!(t.root.node_count(), 4);
    }

    #[test]
    fn empty_grounding_prunes_branch() {
        let t = build(TWO_STEP, FixtureStore::default(), &TreeConfig::default());
        assert!(t.root.children.is_empty());
        assert!(t.root.pruned.is_some());
    }

    #[test]
    fn branch_cap_and_budget() {
        let many: Vec<[i64; 4]> = (0..6).map(|i| [i * 100, 0, i * 100 + 50, 50]).collect();
        let fx = fixtures(vec![ground("x", "img.png", &many), ground("y", "img.png", &many)]);
        let chain = "GROUNDING(x)->bbx_1\nGROUNDING(y)->bbx_2";
        let t = build(chain, fx.clone(), &TreeConfig::default());
        // caps of 4 per level: 1 + 4 + 16
        assert_eq!(t.root.node_count(), 21);
        let tight = TreeConfig { node_budget: 7, ..Default::default() };
        let t = build(chain, fx, &tight);
        assert_eq!(t.root.node_count(), 7);
    }

    #[test]
    fn failed_calls_are_leaves() {
        let t = build("MEASURE(x)->num_1\nCALCULATE(num_1+1)->num_2", FixtureStore::default(), &TreeConfig::default());
        assert_eq!(t.root.children.len(), 1);
        let leaf = &t.root.children[0];
        assert!(matches!(leaf.error, Some(NodeError::Unsupported(_))));
        assert!(leaf.children.is_empty());
        let dead = dead_branches(&t, "1", &MatchConfig::default());
        assert_eq!(dead[0].error_kind.as_deref(), Some("unsupported"));
    }

    #[test]
    fn counting_and_calculate() {
        let fx = fixtures(vec![ground("cars", "img.png", &[[0, 0, 100, 100], [5, 0, 105, 100], [500, 500, 600, 600]])]);
        let t = build("COUNTING(cars)->num_1\nCALCULATE(num_1*2+1)->num_2", fx, &TreeConfig::default());
        let paths = dfs_positive_paths(&t, "5", &MatchConfig::default());
        // IoU of the first two is 0.9048 >= 0.9, so two distinct cars
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].nodes[1].binding["num_1"], Value::Num(Num::from_int(2)));
    }

    #[test]
    fn zoom_creates_new_view_and_sample_segments() {
        let fx = fixtures(vec![ground("the label", "img.png", &[[0, 0, 499, 499]])]);
        let zoom_handle = "img.png#crop(0,0,499,499)x2";
        let mut fx = fx;
        fx.insert(FixtureRecord {
            request_key: Some(VisualRequest::ocr(None, ImageHandle::new(zoom_handle)).request_key()),
            request: None,
            response: serde_json::json!({"items":[{"text":"ACME","box":[0,0,999,999]}]}),
        })
        .unwrap();
        let chain = "GROUNDING(the label)->bbx_1\nCROP_AND_ZOOMIN(bbx_1, 2)->img_1\nOCR(img_1)->txt_1";
        let t = build(chain, fx, &TreeConfig::default());
        let paths = dfs_positive_paths(&t, "acme", &MatchConfig::default());
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].produced_images(), vec![ImageHandle::new(zoom_handle)]);
        let src = VqaTriple {
            id: "q1".into(),
            image: "img.png".into(),
            question: "brand?".into(),
            answer: "ACME".into(),
            source: Some("textvqa".into()),
        };
        let s = path_to_com_sample(&paths[0], &src, 0);
        assert_eq!(s.images.len(), 2);
        assert_eq!(s.segments.len(), 2);
        assert_eq!(s.segments[1], "OCR(img_1)->txt_1=\"ACME\"");
        assert_eq!(s.id, "q1-p0");
    }

    #[test]
    fn matcher_examples() {
        let d = MatchConfig::default();
        let n = MatchConfig { mode: MatchMode::Numeric };
        assert!(answer_match("No Smoking", "no smoking", &d));
        assert!(answer_match("4", "4.0", &n));
        assert!(!answer_match("4", "4.0", &d));
        assert!(!answer_match("KINGSGATE", "KINGS GATE", &d));
        assert!(answer_match("The stop sign.", "stop  sign", &d));
        assert!(answer_match("7/2", "3.5", &n));
        assert!(answer_match("1,000", "1000", &n));
    }

    #[test]
    fn report_rate() {
        let mut r = SearchReport::default();
        assert_eq!(r.success_rate, None);
        r.record_tree(2);
        r.record_tree(0);
        r.record_tree(1);
        assert_eq!((r.trees_built, r.positive_paths, r.questions_with_path), (3, 3, 2));
        assert_eq!(r.success_rate, Some(2.0 / 3.0));
    }
}
