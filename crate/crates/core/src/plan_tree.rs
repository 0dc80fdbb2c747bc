//! Tree-structured plans and their bit-exact indented text format.
//!
//! A plan is a single-rooted tree whose node contents are one-line summaries.
//! The canonical text form puts the root bare at column 0 and every node of
//! depth `d >= 1` on its own line with exactly `2 + 4*(d-1)` leading spaces
//! followed by `"- "`:
//!
//! ```text
//! TOPIC
//!   - Main Topic
//!       - Sub Topic
//!           - Sub-Sub Topic
//! ```
//!
//! [`parse_plan`] is strict about that grid; [`parse_plan_lenient`] first
//! repairs drifting indentation (the usual failure mode of model-emitted
//! plans) and then runs the strict parser on the repaired text.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth limit applied by the default parse options.
pub const DEFAULT_MAX_DEPTH: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("empty input")]
    EmptyInput,
    #[error("line {line}: empty node content")]
    EmptyNodeContent { line: usize },
    #[error("line {line}: {message}")]
    Indentation { line: usize, message: String },
    #[error("line {line}: depth {depth} exceeds maximum {max}")]
    MaxDepthExceeded {
        line: usize,
        depth: usize,
        max: usize,
    },
    #[error("invalid node content: {reason}")]
    InvalidContent { reason: String },
    #[error("no node at path {path}")]
    PathNotFound { path: NodePath },
}

/// One node of a plan: a single-line summary plus ordered children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanNode {
    content: String,
    children: Vec<PlanNode>,
}

impl PlanNode {
    /// Builds a leaf node. Content is trimmed; it must be nonempty and
    /// single-line.
    pub fn new(content: impl Into<String>) -> Result<Self, PlanError> {
        let content = validate_content(content.into())?;
        Ok(PlanNode {
            content,
            children: Vec::new(),
        })
    }

    pub fn with_children(
        content: impl Into<String>,
        children: Vec<PlanNode>,
    ) -> Result<Self, PlanError> {
        let mut node = PlanNode::new(content)?;
        node.children = children;
        Ok(node)
    }

    pub fn content(&self) -> &str {
        &self.content
    }

    pub fn children(&self) -> &[PlanNode] {
        &self.children
    }

    pub(crate) fn set_content(&mut self, content: String) -> Result<(), PlanError> {
        self.content = validate_content(content)?;
        Ok(())
    }

    pub(crate) fn children_mut(&mut self) -> &mut Vec<PlanNode> {
        &mut self.children
    }

    /// Number of nodes in this subtree, including itself.
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(PlanNode::count).sum::<usize>()
    }

    /// Depth of the deepest descendant, counting this node as 0.
    pub fn depth(&self) -> usize {
        self.children
            .iter()
            .map(|c| 1 + c.depth())
            .max()
            .unwrap_or(0)
    }
}

fn validate_content(raw: String) -> Result<String, PlanError> {
    if raw.contains('\n') || raw.contains('\r') {
        return Err(PlanError::InvalidContent {
            reason: "content must be a single line".into(),
        });
    }
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(PlanError::InvalidContent {
            reason: "content is empty".into(),
        });
    }
    Ok(trimmed.to_string())
}

/// A whole plan. Equality is structural (root subtree only); `created_at`
/// and `source_id` are bookkeeping and never part of the text format.
#[derive(Debug, Clone)]
pub struct PlanTree {
    root: PlanNode,
    created_at: DateTime<Utc>,
    source_id: Option<String>,
}

impl PlanTree {
    pub fn new(root: PlanNode) -> Self {
        PlanTree {
            root,
            created_at: Utc::now(),
            source_id: None,
        }
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn root(&self) -> &PlanNode {
        &self.root
    }

    pub(crate) fn root_mut(&mut self) -> &mut PlanNode {
        &mut self.root
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn source_id(&self) -> Option<&str> {
        self.source_id.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.root.count()
    }

    /// Children of the root node.
    pub fn secondary_count(&self) -> usize {
        self.root.children.len()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Paths of all leaves in depth-first preorder. A root-only tree has a
    /// single leaf: the root itself.
    pub fn leaf_paths(&self) -> Vec<NodePath> {
        let mut out = Vec::new();
        collect_leaves(&self.root, &mut Vec::new(), &mut out);
        out
    }
}

fn collect_leaves(node: &PlanNode, prefix: &mut Vec<usize>, out: &mut Vec<NodePath>) {
    if node.children.is_empty() {
        out.push(NodePath::new(prefix.clone()));
        return;
    }
    for (i, child) in node.children.iter().enumerate() {
        prefix.push(i);
        collect_leaves(child, prefix, out);
        prefix.pop();
    }
}

impl PartialEq for PlanTree {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Eq for PlanTree {}

/// Zero-based child indices from the root; empty addresses the root itself.
/// Text form is `[0.2.1]`, with `[]` for the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct NodePath(Vec<usize>);

impl NodePath {
    pub fn new(indices: Vec<usize>) -> Self {
        NodePath(indices)
    }

    pub fn root() -> Self {
        NodePath(Vec::new())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// Path of the addressed node's parent; `None` for the root.
    pub fn parent(&self) -> Option<NodePath> {
        if self.0.is_empty() {
            None
        } else {
            Some(NodePath(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn last_index(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn child(&self, index: usize) -> NodePath {
        let mut v = self.0.clone();
        v.push(index);
        NodePath(v)
    }

    /// True when `other` is this path or lies underneath it.
    pub fn contains(&self, other: &NodePath) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, idx) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{idx}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid node path `{0}`")]
pub struct PathParseError(String);

impl FromStr for NodePath {
    type Err = PathParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let inner = s
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| PathParseError(s.to_string()))?;
        let inner = inner.trim();
        if inner.is_empty() {
            return Ok(NodePath::root());
        }
        let indices = inner
            .split('.')
            .map(|part| part.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| PathParseError(s.to_string()))?;
        Ok(NodePath(indices))
    }
}

impl Serialize for NodePath {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NodePath {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Before/after node counts for a tree edit or a whole refinement pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDelta {
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub secondary_before: usize,
    pub secondary_after: usize,
}

impl NodeDelta {
    pub fn nodes_change(&self) -> i64 {
        self.nodes_after as i64 - self.nodes_before as i64
    }

    pub fn secondary_change(&self) -> i64 {
        self.secondary_after as i64 - self.secondary_before as i64
    }

    pub fn is_zero(&self) -> bool {
        self.nodes_change() == 0 && self.secondary_change() == 0
    }
}

/// Node-count difference between two trees.
pub fn delta(before: &PlanTree, after: &PlanTree) -> NodeDelta {
    NodeDelta {
        nodes_before: before.node_count(),
        nodes_after: after.node_count(),
        secondary_before: before.secondary_count(),
        secondary_after: after.secondary_count(),
    }
}

/// Node addressed by `path`, or `PathNotFound`.
pub fn resolve<'a>(tree: &'a PlanTree, path: &NodePath) -> Result<&'a PlanNode, PlanError> {
    let mut node = tree.root();
    for &idx in path.indices() {
        node = node.children().get(idx).ok_or_else(|| PlanError::PathNotFound {
            path: path.clone(),
        })?;
    }
    Ok(node)
}

pub(crate) fn resolve_mut<'a>(
    tree: &'a mut PlanTree,
    path: &NodePath,
) -> Result<&'a mut PlanNode, PlanError> {
    let mut node = tree.root_mut();
    for &idx in path.indices() {
        node = node
            .children_mut()
            .get_mut(idx)
            .ok_or_else(|| PlanError::PathNotFound { path: path.clone() })?;
    }
    Ok(node)
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub max_depth: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

fn indent_width(depth: usize) -> usize {
    debug_assert!(depth >= 1);
    2 + 4 * (depth - 1)
}

/// Depth for an exact grid indent, if the width is on the grid.
fn depth_for_indent(width: usize) -> Option<usize> {
    if width >= 2 && (width - 2).is_multiple_of(4) {
        Some((width - 2) / 4 + 1)
    } else {
        None
    }
}

/// Strict parse of canonical plan text with default options.
pub fn parse_plan(text: &str) -> Result<PlanTree, PlanError> {
    parse_plan_with(text, &ParseOptions::default())
}

pub fn parse_plan_with(text: &str, opts: &ParseOptions) -> Result<PlanTree, PlanError> {
    let text = text.replace("\r\n", "\n");
    // (line number, depth, content) for every non-blank line
    let mut items: Vec<(usize, usize, &str)> = Vec::new();
    let mut saw_root = false;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let stripped = line.trim_start_matches(' ');
        let indent = line.len() - stripped.len();
        if stripped.starts_with('\t') {
            return Err(PlanError::Indentation {
                line: lineno,
                message: "tab in indentation (spaces required)".into(),
            });
        }
        if !saw_root {
            if indent != 0 {
                return Err(PlanError::Indentation {
                    line: lineno,
                    message: "root line must start at column 0".into(),
                });
            }
            items.push((lineno, 0, stripped));
            saw_root = true;
            continue;
        }
        if indent == 0 {
            return Err(PlanError::Indentation {
                line: lineno,
                message: "second line at column 0 (plans have exactly one root)".into(),
            });
        }
        let depth = depth_for_indent(indent).ok_or_else(|| PlanError::Indentation {
            line: lineno,
            message: format!("indent of {indent} is not on the 2+4(d-1) grid"),
        })?;
        if depth > opts.max_depth {
            return Err(PlanError::MaxDepthExceeded {
                line: lineno,
                depth,
                max: opts.max_depth,
            });
        }
        if stripped == "-" {
            // a bullet whose content was only whitespace
            return Err(PlanError::EmptyNodeContent { line: lineno });
        }
        let content = stripped
            .strip_prefix("- ")
            .ok_or_else(|| PlanError::Indentation {
                line: lineno,
                message: "expected `- ` bullet after indentation".into(),
            })?;
        let content = content.trim();
        if content.is_empty() {
            return Err(PlanError::EmptyNodeContent { line: lineno });
        }
        items.push((lineno, depth, content));
    }

    if items.is_empty() {
        return Err(PlanError::EmptyInput);
    }
    build_tree(&items)
}

/// Assembles a tree from (line, depth, content) triples whose first entry is
/// the depth-0 root. Depth may increase by at most one per line.
fn build_tree(items: &[(usize, usize, &str)]) -> Result<PlanTree, PlanError> {
    let (_, _, root_content) = items[0];
    let root = PlanNode::new(root_content)?;
    // stack of (depth, node); nodes are attached to their parent when popped
    let mut stack: Vec<(usize, PlanNode)> = vec![(0, root)];

    for &(lineno, depth, content) in &items[1..] {
        let top_depth = stack.last().expect("stack nonempty").0;
        if depth > top_depth + 1 {
            return Err(PlanError::Indentation {
                line: lineno,
                message: format!(
                    "depth jumps from {top_depth} to {depth} (levels cannot be skipped)"
                ),
            });
        }
        while stack.last().expect("stack nonempty").0 >= depth {
            let (_, done) = stack.pop().expect("stack nonempty");
            stack
                .last_mut()
                .expect("root never popped here")
                .1
                .children_mut()
                .push(done);
        }
        stack.push((depth, PlanNode::new(content)?));
    }

    while stack.len() > 1 {
        let (_, done) = stack.pop().expect("stack nonempty");
        stack
            .last_mut()
            .expect("stack nonempty")
            .1
            .children_mut()
            .push(done);
    }
    Ok(PlanTree::new(stack.pop().expect("root").1))
}

/// Canonical text form: grid indentation, `- ` bullets, one trailing newline.
pub fn serialize_plan(tree: &PlanTree) -> String {
    let mut out = String::new();
    out.push_str(tree.root().content());
    out.push('\n');
    for child in tree.root().children() {
        serialize_node(child, 1, &mut out);
    }
    out
}

fn serialize_node(node: &PlanNode, depth: usize, out: &mut String) {
    for _ in 0..indent_width(depth) {
        out.push(' ');
    }
    out.push_str("- ");
    out.push_str(node.content());
    out.push('\n');
    for child in node.children() {
        serialize_node(child, depth + 1, out);
    }
}

/// Parses model-emitted plan text, falling back to an indentation repair pass
/// when the strict grammar is violated. Returns the tree and whether repair
/// was needed. The repair maps each observed indent width to the nearest
/// depth without ever skipping a level, strips stray bullet markers, and
/// clamps depth at `opts.max_depth`.
pub fn parse_plan_lenient(text: &str, opts: &ParseOptions) -> Result<(PlanTree, bool), PlanError> {
    match parse_plan_with(text, opts) {
        Ok(tree) => Ok((tree, false)),
        Err(strict_err) => {
            let repaired = repair_plan_text(text, opts)?;
            let tree = parse_plan_with(&repaired, opts)?;
            log::warn!(
                "plan text repaired after strict parse failed ({strict_err}); {} nodes recovered",
                tree.node_count()
            );
            Ok((tree, true))
        }
    }
}

fn strip_bullet(s: &str) -> &str {
    for prefix in ["- ", "* ", "• "] {
        if let Some(rest) = s.strip_prefix(prefix) {
            return rest;
        }
    }
    // bare marker with no trailing space, e.g. "-Thing"
    for prefix in ["-", "*"] {
        if let Some(rest) = s.strip_prefix(prefix) {
            if !rest.starts_with(['-', '*']) {
                return rest;
            }
        }
    }
    s
}

fn repair_plan_text(text: &str, opts: &ParseOptions) -> Result<String, PlanError> {
    let text = text.replace("\r\n", "\n").replace('\t', "    ");
    let mut lines = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty());

    let root_line = lines.next().ok_or(PlanError::EmptyInput)?;
    let root_content = strip_bullet(root_line.trim_start()).trim();
    if root_content.is_empty() {
        return Err(PlanError::EmptyInput);
    }

    let mut out = String::new();
    out.push_str(root_content);
    out.push('\n');

    // (observed width, assigned depth); widths strictly increase up the stack
    let mut stack: Vec<(i64, usize)> = vec![(-1, 0)];
    for line in lines {
        let stripped = line.trim_start_matches(' ');
        let width = (line.len() - stripped.len()) as i64;
        let content = strip_bullet(stripped).trim();
        if content.is_empty() {
            log::warn!("plan repair: dropped line with no content");
            continue;
        }
        while stack.len() > 1 && stack.last().expect("nonempty").0 > width {
            stack.pop();
        }
        let (top_width, top_depth) = *stack.last().expect("nonempty");
        let depth = if stack.len() > 1 && top_width == width {
            top_depth
        } else {
            let d = (top_depth + 1).min(opts.max_depth);
            if d > top_depth {
                stack.push((width, d));
            }
            d
        };
        for _ in 0..indent_width(depth) {
            out.push(' ');
        }
        out.push_str("- ");
        out.push_str(content);
        out.push('\n');
    }
    Ok(out)
}
