//! Seeded generators and fixture helpers shared by the test suites.
//!
//! Everything here is deterministic given the seed, so failures reproduce.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::NarrativeRecord;
use crate::extraction::{self, ExtractionConfig};
use crate::llm::{ScriptedSession, TemplateRegistry};
use crate::plan_tree::{parse_plan, serialize_plan, NodePath, PlanNode, PlanTree};
use crate::qa::{self, AnswerSet, Options, QaPair, QuestionType};
use crate::refinement::{self, Position, RefinementInstruction};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WORDS: &[&str] = &[
    "harbor", "signal", "voyage", "ember", "meridian", "quarry", "lantern", "orchard", "tide",
    "summit", "archive", "cipher", "garden", "vestige", "horizon", "relay", "basin", "chorus",
    "threshold", "anchor",
];

#[derive(Debug, Clone)]
pub struct TreeGenConfig {
    pub max_depth: usize,
    pub max_children: usize,
    pub max_nodes: usize,
}

impl Default for TreeGenConfig {
    fn default() -> Self {
        TreeGenConfig {
            max_depth: 6,
            max_children: 4,
            max_nodes: 200,
        }
    }
}

fn random_content(rng: &mut impl Rng, counter: &mut usize) -> String {
    *counter += 1;
    let a = WORDS.choose(rng).expect("vocabulary nonempty");
    let b = WORDS.choose(rng).expect("vocabulary nonempty");
    // occasional duplicate contents are fine: paths disambiguate
    if rng.random_ratio(1, 10) {
        format!("{a} {b}")
    } else {
        format!("{a} {b} {counter}")
    }
}

/// A random valid tree within the configured bounds.
pub fn random_tree(rng: &mut impl Rng, config: &TreeGenConfig) -> PlanTree {
    let mut counter = 0;
    let mut budget = rng.random_range(1..=config.max_nodes);
    let root_content = random_content(rng, &mut counter);
    budget = budget.saturating_sub(1);
    let mut root = PlanNode::new(root_content).expect("generated content valid");
    grow(rng, config, &mut root, 0, &mut budget, &mut counter);
    PlanTree::new(root)
}

fn grow(
    rng: &mut impl Rng,
    config: &TreeGenConfig,
    node: &mut PlanNode,
    depth: usize,
    budget: &mut usize,
    counter: &mut usize,
) {
    if depth >= config.max_depth || *budget == 0 {
        return;
    }
    let want = rng.random_range(0..=config.max_children.min(*budget));
    for _ in 0..want {
        if *budget == 0 {
            break;
        }
        *budget -= 1;
        let mut child = PlanNode::new(random_content(rng, counter)).expect("valid content");
        grow(rng, config, &mut child, depth + 1, budget, counter);
        node.children_mut().push(child);
    }
}

/// Every path in the tree, root first, in depth-first preorder.
pub fn all_paths(tree: &PlanTree) -> Vec<NodePath> {
    let mut out = Vec::new();
    walk(tree.root(), &mut Vec::new(), &mut out);
    out
}

fn walk(node: &PlanNode, prefix: &mut Vec<usize>, out: &mut Vec<NodePath>) {
    out.push(NodePath::new(prefix.clone()));
    for (i, child) in node.children().iter().enumerate() {
        prefix.push(i);
        walk(child, prefix, out);
        prefix.pop();
    }
}

pub fn random_path(rng: &mut impl Rng, tree: &PlanTree) -> NodePath {
    let paths = all_paths(tree);
    paths.choose(rng).expect("trees have at least the root").clone()
}

/// A random instruction that is valid for the given tree.
pub fn random_valid_instruction(rng: &mut impl Rng, tree: &PlanTree) -> RefinementInstruction {
    let mut counter = rng.random_range(1000..9999);
    let kind = rng.random_range(0..3u8);
    match kind {
        0 => RefinementInstruction::Add {
            parent: random_path(rng, tree),
            position: random_position(rng),
            content: random_content(rng, &mut counter),
        },
        1 => RefinementInstruction::Modify {
            target: random_path(rng, tree),
            new_content: random_content(rng, &mut counter),
        },
        _ => {
            let paths = all_paths(tree);
            let non_root: Vec<&NodePath> = paths.iter().filter(|p| !p.is_root()).collect();
            let Some(&target) = non_root.choose(rng) else {
                // root-only tree: nothing can move, fall back to an add
                return RefinementInstruction::Add {
                    parent: NodePath::root(),
                    position: Position::End,
                    content: random_content(rng, &mut counter),
                };
            };
            let candidates: Vec<&NodePath> =
                paths.iter().filter(|p| !target.contains(p)).collect();
            let new_parent = candidates.choose(rng).expect("root is always a candidate");
            RefinementInstruction::Adjust {
                target: target.clone(),
                new_parent: (*new_parent).clone(),
                position: random_position(rng),
            }
        }
    }
}

fn random_position(rng: &mut impl Rng) -> Position {
    if rng.random_bool(0.3) {
        Position::End
    } else {
        Position::At(rng.random_range(0..6))
    }
}

fn qa_pair(id: &str, question: &str, options: [&str; 4], gold: &str, qtype: QuestionType, idea: &str) -> QaPair {
    QaPair {
        id: id.into(),
        question: question.into(),
        options: Options {
            a: options[0].into(),
            b: options[1].into(),
            c: options[2].into(),
            d: options[3].into(),
        },
        gold: gold.parse::<AnswerSet>().expect("valid gold"),
        qtype,
        related_idea: idea.into(),
    }
}

/// The generation-output block for one pair, matching the shape the QA
/// generation prompt requests.
fn qa_block(pair: &QaPair) -> String {
    format!(
        "Q: {}\nTYPE: {}\nA: {}\nB: {}\nC: {}\nD: {}\nANSWER: {}\nIDEA: {}",
        pair.question,
        pair.qtype.as_str(),
        pair.options.a,
        pair.options.b,
        pair.options.c,
        pair.options.d,
        pair.gold,
        pair.related_idea,
    )
}

/// A fully scripted extraction run with every response pre-recorded.
pub struct ExtractionScenario {
    pub narrative: NarrativeRecord,
    pub session: ScriptedSession,
    pub sketch: PlanTree,
    pub expected_final: PlanTree,
    pub config: ExtractionConfig,
}

/// Scenario: the sketch misses two facts, the first evaluation scores 0.6,
/// and the derived instructions (two adds) repair both, so the second
/// evaluation passes. Converges in exactly 2 iterations with a +2 node
/// delta.
pub fn converging_extraction_scenario() -> ExtractionScenario {
    let reg = TemplateRegistry::builtin();
    let config = ExtractionConfig::default();

    let text = "Elena kept the lighthouse on Aldane Rock for thirty years. \
The lamp dimmed whenever storm damage and sabotage struck together, and she \
learned to repair both. A fog bell below the gallery warned ships away from \
the rock on blind nights. In 1921 the great storm broke the tower's north \
face. When a fishing crew foundered on the shoals, Elena rigged a rope line \
from the gallery and hauled every one of them up alive.";
    let narrative = NarrativeRecord::new(
        "keeper-01",
        "The lighthouse keeper of Aldane Rock",
        text,
        Some("novel".to_string()),
    );

    let pairs = vec![
        qa_pair(
            "q1",
            "What is the keeper's name?",
            ["Marta", "Elena", "Sofia", "Irene"],
            "B",
            QuestionType::What,
            "the keeper's identity",
        ),
        qa_pair(
            "q2",
            "Why does the lamp dim?",
            ["storm damage", "neglect", "sabotage", "old wiring"],
            "A;C",
            QuestionType::Why,
            "causes of the failing lamp",
        ),
        qa_pair(
            "q3",
            "How are ships warned on blind nights?",
            ["a siren", "a fog bell", "a flare", "a horn"],
            "B",
            QuestionType::How,
            "the fog bell",
        ),
        qa_pair(
            "q4",
            "What broke the tower's north face?",
            ["an earthquake", "a collision", "the great storm of 1921", "erosion"],
            "C",
            QuestionType::What,
            "the 1921 storm",
        ),
        qa_pair(
            "q5",
            "How was the fishing crew saved?",
            ["by rowboat", "by swimming", "by another ship", "by a rope line"],
            "D",
            QuestionType::How,
            "the rescue of the fishing crew",
        ),
    ];
    let blocks: Vec<String> = pairs.iter().map(qa_block).collect();

    let mut session = ScriptedSession::new();
    session
        .stub(&reg, &qa::generation_request(text, 5), blocks.join("\n\n"))
        .expect("stub generation");
    // the checker answers every question correctly from the narrative
    for pair in &pairs {
        session
            .stub(&reg, &qa::answer_request(pair, text), pair.gold.to_string())
            .expect("stub filter answer");
    }

    // sketch covers q1-q3 but misses the storm and the rescue
    let sketch_text = "\
The Lighthouse Keeper of Aldane Rock
  - The Keeper
      - Elena tends the lamp for thirty years
  - The Failing Lamp
      - Storm damage and sabotage dim the light
  - The Fog Bell
      - A bell below the gallery warns ships away
";
    session
        .stub(&reg, &extraction::sketch_request(text), sketch_text)
        .expect("stub sketch");
    let sketch = parse_plan(sketch_text).expect("sketch parses");

    // first evaluation: q4 and q5 cannot be answered from the sketch
    for (pair, reply) in pairs.iter().zip(["B", "A;C", "B", "A", "A"]) {
        session
            .stub(&reg, &qa::answer_request(pair, sketch_text), reply)
            .expect("stub first evaluation");
    }

    let derive_q4 = "ADD [] END: The great storm of 1921 breaks the north face";
    let derive_q5 = "ADD [1] END: Elena hauls the fishing crew up a rope line";
    session
        .stub(&reg, &qa::derive_request(&pairs[3], sketch_text, text), derive_q4)
        .expect("stub derive q4");
    session
        .stub(&reg, &qa::derive_request(&pairs[4], sketch_text, text), derive_q5)
        .expect("stub derive q5");

    let mut batch = refinement::parse_instructions(derive_q4).with_origin("q4");
    batch.extend(refinement::parse_instructions(derive_q5).with_origin("q5"));
    let (expected_final, report) = refinement::apply_batch(&sketch, &batch);
    assert!(report.rejected.is_empty(), "fixture instructions all apply");
    let final_text = serialize_plan(&expected_final);

    // second evaluation: the repaired plan answers everything
    for pair in &pairs {
        session
            .stub(&reg, &qa::answer_request(pair, &final_text), pair.gold.to_string())
            .expect("stub second evaluation");
    }

    ExtractionScenario {
        narrative,
        session,
        sketch,
        expected_final,
        config,
    }
}

/// Scenario: evaluation is stuck at accuracy 0.5 and every refinement pass
/// rewrites the root to its existing content (plus one noise line that is
/// rejected), so the plan never changes and the loop runs to the iteration
/// cap.
pub fn non_improving_extraction_scenario() -> ExtractionScenario {
    let reg = TemplateRegistry::builtin();
    let config = ExtractionConfig::default();

    let text = "A short account of a door that never opens. The door is \
painted blue and watched every day at noon by the same three neighbors.";
    let narrative = NarrativeRecord::new(
        "loop-01",
        "The door that never opens",
        text,
        None,
    );

    let pairs = vec![
        qa_pair(
            "q1",
            "What color is the door?",
            ["blue", "red", "green", "white"],
            "A",
            QuestionType::What,
            "the door's color",
        ),
        qa_pair(
            "q2",
            "What happens at noon?",
            ["it rains", "the neighbors watch", "the door opens", "bells ring"],
            "B",
            QuestionType::What,
            "the noon ritual",
        ),
    ];
    let blocks: Vec<String> = pairs.iter().map(qa_block).collect();

    let mut session = ScriptedSession::new();
    // the model only ever produces these two questions, so the retry round
    // makes no progress and generation settles for two
    session
        .stub(&reg, &qa::generation_request(text, 5), blocks.join("\n\n"))
        .expect("stub generation round 1");
    session
        .stub(&reg, &qa::generation_request(text, 3), blocks.join("\n\n"))
        .expect("stub generation round 2");
    for pair in &pairs {
        session
            .stub(&reg, &qa::answer_request(pair, text), pair.gold.to_string())
            .expect("stub filter answer");
    }

    let sketch_text = "The Door That Never Opens\n  - The door is painted blue\n";
    session
        .stub(&reg, &extraction::sketch_request(text), sketch_text)
        .expect("stub sketch");
    let sketch = parse_plan(sketch_text).expect("sketch parses");

    // evaluation is frozen: q1 right, q2 wrong, every iteration
    session
        .stub(&reg, &qa::answer_request(&pairs[0], sketch_text), "A")
        .expect("stub evaluation q1");
    session
        .stub(&reg, &qa::answer_request(&pairs[1], sketch_text), "C")
        .expect("stub evaluation q2");

    // the derived edit rewrites the root to its existing content, so the
    // plan (and thus all later fingerprints) never changes
    session
        .stub(
            &reg,
            &qa::derive_request(&pairs[1], sketch_text, text),
            "MODIFY []: The Door That Never Opens\nthe plan already seems fine to me",
        )
        .expect("stub derive");

    ExtractionScenario {
        narrative,
        expected_final: sketch.clone(),
        sketch,
        session,
        config,
    }
}
