//! Plan-guided long-form narrative toolkit.
//!
//! The pipeline has three stages wired together by the `eipe` CLI:
//!
//! 1. **Extraction** — pull a tree-structured plan out of each narrative in a
//!    corpus, grading the plan with multiple-choice QA and iteratively editing
//!    it (add / modify / adjust) until it answers every question.
//! 2. **Learning** — embed the plan corpus, cluster it, and pick
//!    representative demonstrations for an in-context planner (or export a
//!    fine-tuning dataset for an external trainer).
//! 3. **Inference** — generate a plan for a fresh topic, then write the
//!    narrative paragraph by paragraph with the plan as persistent memory.
//!
//! All LLM traffic goes through [`llm::LlmClient`], which supports a live
//! HTTP provider and a deterministic scripted (record/replay) backend so the
//! whole pipeline can run offline in tests.

pub mod corpus;
pub mod extraction;
pub mod generation;
pub mod judge;
pub mod llm;
pub mod plan_tree;
pub mod planner;
pub mod qa;
pub mod refinement;
pub mod testing;
mod util;

pub use plan_tree::{PlanNode, PlanTree};
