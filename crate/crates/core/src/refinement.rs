//! Structured plan edits: add, modify, adjust.
//!
//! Instructions address nodes by [`NodePath`] and come either from code or
//! from model output in a one-instruction-per-line grammar (see
//! [`INSTRUCTION_GRAMMAR`]). Batches apply sequentially against the evolving
//! tree; invalid entries are recorded and skipped, never aborting the batch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan_tree::{self, NodeDelta, NodePath, PlanNode, PlanTree};

/// The line grammar parsed by [`parse_instructions`]. Embedded verbatim in
/// the refinement prompt so the model emits exactly this shape.
pub const INSTRUCTION_GRAMMAR: &str = "\
ADD <path> <position|END>: <content>
MODIFY <path>: <content>
ADJUST <path> -> <path> <position|END>

<path> is a bracketed, dot-separated list of zero-based child indices, e.g.
[0.2.1]; [] addresses the root. ADD inserts a new node under the first path
at the given child position (END appends). MODIFY replaces the content of
the node at the path. ADJUST moves the node at the first path, with its
whole subtree, under the second path. One instruction per line.";

/// Insertion point within a parent's child list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    At(usize),
    End,
}

impl Position {
    fn clamp(&self, len: usize) -> usize {
        match self {
            Position::At(i) => (*i).min(len),
            Position::End => len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefinementInstruction {
    /// Insert a missing node under `parent`.
    Add {
        parent: NodePath,
        position: Position,
        content: String,
    },
    /// Replace the content of the node at `target`.
    Modify { target: NodePath, new_content: String },
    /// Relocate the subtree at `target` under `new_parent`.
    Adjust {
        target: NodePath,
        new_parent: NodePath,
        position: Position,
    },
}

impl RefinementInstruction {
    pub fn kind(&self) -> InstructionKind {
        match self {
            RefinementInstruction::Add { .. } => InstructionKind::Add,
            RefinementInstruction::Modify { .. } => InstructionKind::Modify,
            RefinementInstruction::Adjust { .. } => InstructionKind::Adjust,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionKind {
    Add,
    Modify,
    Adjust,
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Position::At(i) => write!(f, "{i}"),
            Position::End => write!(f, "END"),
        }
    }
}

/// Canonical grammar line for the instruction; `parse_instructions` accepts
/// exactly this shape back.
impl std::fmt::Display for RefinementInstruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RefinementInstruction::Add {
                parent,
                position,
                content,
            } => write!(f, "ADD {parent} {position}: {content}"),
            RefinementInstruction::Modify {
                target,
                new_content,
            } => write!(f, "MODIFY {target}: {new_content}"),
            RefinementInstruction::Adjust {
                target,
                new_parent,
                position,
            } => write!(f, "ADJUST {target} -> {new_parent} {position}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RefineError {
    #[error("no node at path {path}")]
    PathNotFound { path: NodePath },
    #[error("moving {target} under {new_parent} would create a cycle")]
    WouldCreateCycle { target: NodePath, new_parent: NodePath },
    #[error("instruction content is empty")]
    EmptyContent,
    #[error("the root node cannot be moved")]
    RootImmovable,
}

/// Checks an instruction against a tree without applying it.
pub fn validate(tree: &PlanTree, instruction: &RefinementInstruction) -> Result<(), RefineError> {
    match instruction {
        RefinementInstruction::Add {
            parent, content, ..
        } => {
            resolve(tree, parent)?;
            if content.trim().is_empty() {
                return Err(RefineError::EmptyContent);
            }
        }
        RefinementInstruction::Modify {
            target,
            new_content,
        } => {
            resolve(tree, target)?;
            if new_content.trim().is_empty() {
                return Err(RefineError::EmptyContent);
            }
        }
        RefinementInstruction::Adjust {
            target,
            new_parent,
            ..
        } => {
            if target.is_root() {
                return Err(RefineError::RootImmovable);
            }
            resolve(tree, target)?;
            resolve(tree, new_parent)?;
            if target.contains(new_parent) {
                return Err(RefineError::WouldCreateCycle {
                    target: target.clone(),
                    new_parent: new_parent.clone(),
                });
            }
        }
    }
    Ok(())
}

fn resolve<'a>(tree: &'a PlanTree, path: &NodePath) -> Result<&'a PlanNode, RefineError> {
    plan_tree::resolve(tree, path).map_err(|_| RefineError::PathNotFound { path: path.clone() })
}

/// Applies one instruction, returning a new tree. The input is untouched.
///
/// Add grows the node count by exactly one; Modify changes exactly one
/// content; Adjust preserves the content multiset. Out-of-range insertion
/// indices clamp to the end of the child list.
pub fn apply(tree: &PlanTree, instruction: &RefinementInstruction) -> Result<PlanTree, RefineError> {
    validate(tree, instruction)?;
    let mut out = tree.clone();
    match instruction {
        RefinementInstruction::Add {
            parent,
            position,
            content,
        } => {
            let node = PlanNode::new(content.clone()).map_err(|_| RefineError::EmptyContent)?;
            let parent_node = resolve_mut(&mut out, parent)?;
            let at = position.clamp(parent_node.children().len());
            parent_node.children_mut().insert(at, node);
        }
        RefinementInstruction::Modify {
            target,
            new_content,
        } => {
            let node = resolve_mut(&mut out, target)?;
            node.set_content(new_content.clone())
                .map_err(|_| RefineError::EmptyContent)?;
        }
        RefinementInstruction::Adjust {
            target,
            new_parent,
            position,
        } => {
            let parent_path = target.parent().ok_or(RefineError::RootImmovable)?;
            let removal_index = target.last_index().expect("non-root path");
            let old_parent = resolve_mut(&mut out, &parent_path)?;
            let moved = old_parent.children_mut().remove(removal_index);

            // Removing `target` shifts the indices of its later siblings, so
            // the destination path needs the same shift before resolving.
            let dest = shift_after_removal(new_parent, &parent_path, removal_index);
            let dest_node = resolve_mut(&mut out, &dest)?;
            let at = position.clamp(dest_node.children().len());
            dest_node.children_mut().insert(at, moved);
        }
    }
    Ok(out)
}

fn resolve_mut<'a>(tree: &'a mut PlanTree, path: &NodePath) -> Result<&'a mut PlanNode, RefineError> {
    plan_tree::resolve_mut(tree, path)
        .map_err(|_| RefineError::PathNotFound { path: path.clone() })
}

fn shift_after_removal(path: &NodePath, removed_parent: &NodePath, removed_index: usize) -> NodePath {
    let prefix_len = removed_parent.depth();
    let indices = path.indices();
    if indices.len() > prefix_len
        && indices[..prefix_len] == removed_parent.indices()[..]
        && indices[prefix_len] > removed_index
    {
        let mut shifted = indices.to_vec();
        shifted[prefix_len] -= 1;
        NodePath::new(shifted)
    } else {
        path.clone()
    }
}

/// One line of model output: either a parsed instruction or the reason it
/// failed to parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedLine {
    Instruction(RefinementInstruction),
    Malformed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub item: ParsedLine,
    pub raw: String,
    pub origin_question_id: Option<String>,
}

/// Ordered instruction sequence; order is the application order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionBatch {
    pub entries: Vec<BatchEntry>,
}

impl InstructionBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_instructions(instructions: Vec<RefinementInstruction>) -> Self {
        InstructionBatch {
            entries: instructions
                .into_iter()
                .map(|instruction| BatchEntry {
                    raw: String::new(),
                    item: ParsedLine::Instruction(instruction),
                    origin_question_id: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tags every entry with the QA pair that produced it.
    pub fn with_origin(mut self, question_id: &str) -> Self {
        for entry in &mut self.entries {
            entry.origin_question_id = Some(question_id.to_string());
        }
        self
    }

    pub fn extend(&mut self, other: InstructionBatch) {
        self.entries.extend(other.entries);
    }

    pub fn instructions(&self) -> impl Iterator<Item = &RefinementInstruction> {
        self.entries.iter().filter_map(|e| match &e.item {
            ParsedLine::Instruction(i) => Some(i),
            ParsedLine::Malformed { .. } => None,
        })
    }

    pub fn malformed_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.item, ParsedLine::Malformed { .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedEntry {
    pub index: usize,
    pub error: String,
}

/// Outcome of applying a batch: per-kind counts, rejects, and the node-count
/// movement. `applied + rejected` always equals the batch length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub applied_add: usize,
    pub applied_modify: usize,
    pub applied_adjust: usize,
    pub rejected: Vec<RejectedEntry>,
    pub delta: NodeDelta,
}

impl ApplyReport {
    pub fn applied_total(&self) -> usize {
        self.applied_add + self.applied_modify + self.applied_adjust
    }
}

/// Applies a batch sequentially against the evolving tree. Invalid or
/// malformed entries are recorded in `rejected` and skipped; paths in later
/// instructions are interpreted against the tree as edited so far.
pub fn apply_batch(tree: &PlanTree, batch: &InstructionBatch) -> (PlanTree, ApplyReport) {
    let mut current = tree.clone();
    let mut report = ApplyReport {
        applied_add: 0,
        applied_modify: 0,
        applied_adjust: 0,
        rejected: Vec::new(),
        delta: plan_tree::delta(tree, tree),
    };

    for (index, entry) in batch.entries.iter().enumerate() {
        let instruction = match &entry.item {
            ParsedLine::Instruction(i) => i,
            ParsedLine::Malformed { reason } => {
                report.rejected.push(RejectedEntry {
                    index,
                    error: format!("ParseError: {reason}"),
                });
                continue;
            }
        };
        match apply(&current, instruction) {
            Ok(next) => {
                current = next;
                match instruction.kind() {
                    InstructionKind::Add => report.applied_add += 1,
                    InstructionKind::Modify => report.applied_modify += 1,
                    InstructionKind::Adjust => report.applied_adjust += 1,
                }
            }
            Err(err) => report.rejected.push(RejectedEntry {
                index,
                error: err.to_string(),
            }),
        }
    }

    report.delta = plan_tree::delta(tree, &current);
    (current, report)
}

/// Parses model output in the [`INSTRUCTION_GRAMMAR`] line format. Blank
/// lines and code fences are skipped; anything else that fails the grammar
/// becomes a `Malformed` entry.
pub fn parse_instructions(text: &str) -> InstructionBatch {
    let mut batch = InstructionBatch::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let item = match parse_instruction_line(line) {
            Ok(instruction) => ParsedLine::Instruction(instruction),
            Err(reason) => ParsedLine::Malformed { reason },
        };
        batch.entries.push(BatchEntry {
            item,
            raw: line.to_string(),
            origin_question_id: None,
        });
    }
    batch
}

fn parse_instruction_line(line: &str) -> Result<RefinementInstruction, String> {
    let (keyword, rest) = line
        .split_once(|c: char| c.is_whitespace())
        .unwrap_or((line, ""));
    let rest = rest.trim_start();
    if keyword.eq_ignore_ascii_case("ADD") {
        let (path, after) = take_path(rest)?;
        let (pos_str, content) = after
            .split_once(':')
            .ok_or_else(|| "missing `:` before content".to_string())?;
        let position = parse_position(pos_str.trim())?;
        let content = content.trim();
        if content.is_empty() {
            return Err("missing content after `:`".into());
        }
        Ok(RefinementInstruction::Add {
            parent: path,
            position,
            content: content.to_string(),
        })
    } else if keyword.eq_ignore_ascii_case("MODIFY") {
        let (path, after) = take_path(rest)?;
        let content = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| "missing `:` before content".to_string())?
            .trim();
        if content.is_empty() {
            return Err("missing content after `:`".into());
        }
        Ok(RefinementInstruction::Modify {
            target: path,
            new_content: content.to_string(),
        })
    } else if keyword.eq_ignore_ascii_case("ADJUST") {
        let (target, after) = take_path(rest)?;
        let after = after
            .trim_start()
            .strip_prefix("->")
            .ok_or_else(|| "missing `->` between paths".to_string())?;
        let (new_parent, after) = take_path(after.trim_start())?;
        let pos_str = after.trim();
        let position = if pos_str.is_empty() {
            Position::End
        } else {
            parse_position(pos_str)?
        };
        Ok(RefinementInstruction::Adjust {
            target,
            new_parent,
            position,
        })
    } else {
        Err(format!("unknown instruction `{keyword}`"))
    }
}

fn take_path(s: &str) -> Result<(NodePath, &str), String> {
    let s = s.trim_start();
    if !s.starts_with('[') {
        return Err("expected `[` to open a path".into());
    }
    let end = s.find(']').ok_or_else(|| "unterminated path".to_string())?;
    let path: NodePath = s[..=end]
        .parse()
        .map_err(|e: crate::plan_tree::PathParseError| e.to_string())?;
    Ok((path, &s[end + 1..]))
}

fn parse_position(s: &str) -> Result<Position, String> {
    if s.eq_ignore_ascii_case("END") {
        Ok(Position::End)
    } else {
        s.parse::<usize>()
            .map(Position::At)
            .map_err(|_| format!("bad position `{s}`"))
    }
}
