//! Named prompt templates with `{placeholder}` substitution.
//!
//! Rendering is a single pass: placeholders are replaced from the variable
//! map and substituted values are never re-scanned, so narrative text
//! containing braces cannot inject further substitutions. A `{token}` whose
//! inner text is not a plain identifier is left as literal text.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown template `{id}`")]
    UnknownTemplate { id: String },
    #[error("template `{id}` has no binding for `{{{name}}}`")]
    Unbound { id: String, name: String },
}

/// Template identifiers for every prompt the pipeline sends.
pub mod ids {
    pub const PLAN_SKETCH: &str = "plan_sketch";
    pub const QA_GENERATION: &str = "qa_generation";
    pub const QA_ANSWER: &str = "qa_answer";
    pub const DERIVE_INSTRUCTIONS: &str = "derive_instructions";
    pub const REFINE_REWRITE: &str = "refine_rewrite";
    pub const CHARACTERISTICS: &str = "characteristics";
    pub const PLAN_GENERATION: &str = "plan_generation";
    pub const WRITER_STEP: &str = "writer_step";
    pub const JUDGE_NOVEL: &str = "judge_novel";
    pub const JUDGE_STORYTELLING: &str = "judge_storytelling";
    /// Pseudo-template used to fingerprint embedding requests in scripted
    /// sessions; it is never rendered.
    pub const EMBEDDING: &str = "__embed__";
}

const PLAN_SKETCH_TEXT: &str = "\
Distill the salient information and thematic flow from the original article into a tree-like text representation of a mind map in the following format:

TOPIC
  - Main Topic
      - Sub Topic
          - Sub-Sub Topic
          - Sub-Sub Topic
  ...
  - Main Topic
      - Sub Topic
      - Sub Topic

Reply with the mind map only, starting with the topic line.

Article:
{narrative}
";

const QA_GENERATION_TEXT: &str = "\
Based on the content of the article, generate several multiple-choice questions and corresponding answers:

1. Not too detailed
2. Focus on the logic of the article
3. Deep understanding of the article after answering these questions
4. Each question must have 4 options: A, B, C, D.
5. For each question, there might be more than one correct answer, identify all correct answers separated by \";\"
6. Questions should reflect the structure of the article.
7. Questions should include three types: what, why, how.
8. Provide related main ideas in the article for each question.
9. Avoid options like \"All of the above\" or \"None of the above\"; use \"A;B;C\" format.

These questions are generated based on the article's content and the author's opinion, not my opinion.

Generate {count} questions. Write every question as a block in exactly this shape, separated by blank lines:

Q: <question>
TYPE: <what|why|how>
A: <option A>
B: <option B>
C: <option C>
D: <option D>
ANSWER: <correct letters separated by \";\">
IDEA: <related main ideas in the article>

Article:
{narrative}
";

const QA_ANSWER_TEXT: &str = "\
Answer the multiple-choice question using only the context below. There may be more than one correct answer. Reply with the correct letters only, separated by \";\" (for example: A;C).

Context:
{context}

Question: {question}
A: {option_a}
B: {option_b}
C: {option_c}
D: {option_d}

Answer:
";

const DERIVE_INSTRUCTIONS_TEXT: &str = "\
A plan extracted from a narrative failed to answer a question correctly. Produce edit instructions that change the plan so that the question can be answered correctly from the plan alone. Keep the edits minimal and specific.

Emit one instruction per line, using exactly this grammar and nothing else:

{grammar}

Current plan:
{plan}

Failed question: {question}
A: {option_a}
B: {option_b}
C: {option_c}
D: {option_d}
Correct answer: {gold}

Relevant narrative excerpt:
{excerpt}

Instructions:
";

const REFINE_REWRITE_TEXT: &str = "\
Apply all of the following edit instructions simultaneously to the plan, then output the complete revised plan in the same indented mind-map format. Output the plan only.

Plan:
{plan}

Instructions:
{instructions}
";

const CHARACTERISTICS_TEXT: &str = "\
Without loss of generality, list distinctive characteristics of this exemplar that establish it as an effective paradigm for designing {genre}. no explanation is needed.

Exemplar plan:
{plan}
";

const PLAN_GENERATION_TEXT: &str = "\
You design tree-structured plans for long-form narratives. Given a topic, produce a plan as a tree-like text representation of a mind map in the following format:

TOPIC
  - Main Topic
      - Sub Topic
          - Sub-Sub Topic

Reply with the plan only, starting with the topic line.

{demonstrations}Topic: {topic}
Plan:
";

const WRITER_STEP_TEXT: &str = "\
You are writing a long-form narrative step by step, guided by a plan.

Full plan:
{plan}

Plan item to cover in this step:
{leaf}

Directive carried over from the previous step:
{instruction}

Short-term memory of recent steps:
{short_term}

Related earlier summaries:
{memories}

Previous paragraph:
{last_paragraph}
{retry_notice}
Write the next paragraph (about {step_words} words) covering the plan item, then a one-line directive for the following paragraph, then a concise updated summary of the story so far. Use exactly this output format:

===PARAGRAPH===
<the new paragraph>
===NEXT_INSTRUCTION===
<one-line directive>
===SUMMARY===
<updated summary>
";

const JUDGE_NOVEL_TEXT: &str = "\
In this task, you will be presented with two novels side-by-side and asked to evaluate them based on three metrics: Coherence, Interestingness, Relevance. Your task is to determine which novel is better for each metric or indicate if both novels are indistinguishable.

- Coherent: A coherent novel follows a logical and consistent plot-line without significant gaps or inconsistencies.

- Interesting: An interesting novel captivates the reader's attention, engages them emotionally, and holds their interest throughout.

- Relevant: Faithful to the initial premise. The novel effectively aligns its plot, message, and writing with its initial premise, ensuring consistency and faithfulness to the core theme.

Premise:
{premise}

{name_one}:
{text_one}

{name_two}:
{text_two}
{retry_notice}
Based on these three aspects, make a decision on which novel is achieving the desired impact, in the manner like this:

[Scratch Pad]

Name:

`distinctive characteristics` and `elaborate` on them

Name:

`distinctive characteristics` and `elaborate` on them

[Reflection]

After evaluating both novels based on the criteria of `coherence`, `interestingness`, `relevance`, I have come to the following `thorough` conclusions:

  - Coherence:

  - Interestingness:

  - Relevance:

[Final Choice]:

Coherence: Name;

Interestingness: Name;

Relevance: Name;
";

const JUDGE_STORYTELLING_TEXT: &str = "\
The coach's preference for evaluating the TED Talks can be summarized in the following spec:

  - Coherence: The coach will assess how well the TED Talk is structured and organized. This includes a clear introduction, logical flow of ideas, smooth transitions between points, and a strong conclusion. The talk should be easy to follow and understand, with a consistent theme throughout.

  - Interestingness: The coach will evaluate how engaging and captivating the TED Talk is for the audience. This includes the use of storytelling, anecdotes, and examples to illustrate points, as well as the speaker's ability to maintain the audience's attention and curiosity throughout the talk.

  - Relevance: The coach will consider the importance and significance of the topic being discussed in the TED Talk. The subject matter should be timely, relevant to current events or societal issues, and have a broad appeal to a diverse audience. The talk should also provide new insights or perspectives on the topic, rather than simply rehashing existing information.

  - Inspiration: The coach will assess the TED Talk's ability to inspire, motivate, and provoke thought in the audience. This includes the speaker's ability to convey passion and enthusiasm for the topic, as well as the presentation of innovative ideas, solutions, or calls to action that encourage the audience to think differently or take action in their own lives.

Premise:
{premise}

{name_one}:
{text_one}

{name_two}:
{text_two}
{retry_notice}
Based on these four aspects, the coach will make a decision on which TED Talk is stronger and more effective in achieving the desired impact on the audience, in the manner like this:

[Scratch Pad]

Name:

`distinctive characteristics` and `elaborate` on them

Name:

`distinctive characteristics` and `elaborate` on them

[Reflection]

After evaluating both TED Talks based on the criteria of `coherence`, `interestingness`, `relevance`, and `inspiration`, I have come to the following `thorough` conclusions:

  - Coherence:

  - Interestingness:

  - Relevance:

  - Inspiration:

[Final Choice]: Name
";

/// Registry of prompt templates keyed by id.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, String>,
}

impl TemplateRegistry {
    pub fn empty() -> Self {
        TemplateRegistry {
            templates: BTreeMap::new(),
        }
    }

    /// All templates the pipeline ships with.
    pub fn builtin() -> Self {
        let mut reg = TemplateRegistry::empty();
        reg.insert(ids::PLAN_SKETCH, PLAN_SKETCH_TEXT);
        reg.insert(ids::QA_GENERATION, QA_GENERATION_TEXT);
        reg.insert(ids::QA_ANSWER, QA_ANSWER_TEXT);
        reg.insert(ids::DERIVE_INSTRUCTIONS, DERIVE_INSTRUCTIONS_TEXT);
        reg.insert(ids::REFINE_REWRITE, REFINE_REWRITE_TEXT);
        reg.insert(ids::CHARACTERISTICS, CHARACTERISTICS_TEXT);
        reg.insert(ids::PLAN_GENERATION, PLAN_GENERATION_TEXT);
        reg.insert(ids::WRITER_STEP, WRITER_STEP_TEXT);
        reg.insert(ids::JUDGE_NOVEL, JUDGE_NOVEL_TEXT);
        reg.insert(ids::JUDGE_STORYTELLING, JUDGE_STORYTELLING_TEXT);
        reg
    }

    pub fn insert(&mut self, id: &str, text: &str) {
        self.templates.insert(id.to_string(), text.to_string());
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    /// Renders `id` with the given variables. Every placeholder must be
    /// bound; extra variables are ignored.
    pub fn render(
        &self,
        id: &str,
        variables: &BTreeMap<String, String>,
    ) -> Result<String, TemplateError> {
        let template = self
            .templates
            .get(id)
            .ok_or_else(|| TemplateError::UnknownTemplate { id: id.to_string() })?;
        render_str(id, template, variables)
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn render_str(
    id: &str,
    template: &str,
    variables: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_identifier(&after[..close]) => {
                let name = &after[..close];
                let value = variables
                    .get(name)
                    .ok_or_else(|| TemplateError::Unbound {
                        id: id.to_string(),
                        name: name.to_string(),
                    })?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
