//! Structured prompts: instruction phrases, in-context exemplar slots and
//! per-slot verbalizers, plus rendering to flat text for a scorer.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edit::EditAction;

/// Default placeholder written into the query's answer slot.
pub const DEFAULT_MASK_TOKEN: &str = "<mask>";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("instruction is empty or whitespace-only")]
    InvalidInstruction,
    #[error("invalid verbalizer pattern {pattern:?}: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
    #[error("invalid prompt state: {0}")]
    InvalidState(String),
    #[error("query block needs {needed} tokens but the budget is {budget}")]
    RenderOverflow { needed: usize, budget: usize },
}

/// One piece of a parsed verbalizer pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    /// Replaced by the input text (`{{text}}`, `{{sentence}}`, ...).
    Input,
    /// Replaced by the label word, or by the mask token for the query.
    Answer,
}

/// Splits a double-brace template into segments.
///
/// Inside `{{ }}`: `answer_choices[label]` is the answer slot, a quoted
/// string is emitted literally, and any bare identifier is an input slot.
pub fn parse_pattern(pattern: &str) -> Result<Vec<Segment>, PromptError> {
    let bad = |reason: &str| PromptError::InvalidPattern {
        pattern: pattern.to_string(),
        reason: reason.to_string(),
    };
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = pattern;
    while let Some(open) = rest.find("{{") {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| bad("unclosed '{{'"))?;
        let inner = after[..close].trim();
        let quoted = inner.len() >= 2
            && ((inner.starts_with('"') && inner.ends_with('"'))
                || (inner.starts_with('\'') && inner.ends_with('\'')));
        if quoted {
            literal.push_str(&inner[1..inner.len() - 1]);
        } else {
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            let compact: String = inner.chars().filter(|c| !c.is_whitespace()).collect();
            if compact == "answer_choices[label]" {
                segments.push(Segment::Answer);
            } else if is_identifier(inner) {
                segments.push(Segment::Input);
            } else {
                return Err(bad(&format!("unsupported placeholder '{{{{{inner}}}}}'")));
            }
        }
        rest = &after[close + 2..];
    }
    if rest.contains("}}") {
        return Err(bad("stray '}}'"));
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    let answers = segments.iter().filter(|s| **s == Segment::Answer).count();
    if answers != 1 {
        return Err(bad(&format!("expected exactly one answer slot, found {answers}")));
    }
    if !segments.iter().any(|s| *s == Segment::Input) {
        return Err(bad("no input placeholder"));
    }
    Ok(segments)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A template that formats an input with an answer slot, and the surface
/// word used for every label.
#[derive(Debug, Clone, PartialEq)]
pub struct VerbalizerTemplate {
    pub id: usize,
    pub pattern: String,
    pub label_words: BTreeMap<String, String>,
    segments: Vec<Segment>,
}

impl VerbalizerTemplate {
    pub fn new(
        id: usize,
        pattern: impl Into<String>,
        label_words: BTreeMap<String, String>,
    ) -> Result<Self, PromptError> {
        let pattern = pattern.into();
        let segments = parse_pattern(&pattern)?;
        Ok(Self {
            id,
            pattern,
            label_words,
            segments,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Fills the template; `answer` is the label word or the mask token.
    pub fn format(&self, input: &str, answer: &str) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Input => out.push_str(input),
                Segment::Answer => out.push_str(answer),
            }
        }
        out
    }

    pub fn word_for(&self, label: &str) -> Option<&str> {
        self.label_words.get(label).map(String::as_str)
    }
}

/// A classification task: labels, the verbalizer and instruction pools, and
/// the render budget.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_name: String,
    pub label_space: Vec<String>,
    pub verbalizer_pool: Vec<VerbalizerTemplate>,
    pub instruction_pool: Vec<String>,
    pub max_render_length: usize,
    pub mask_token: String,
}

impl TaskSpec {
    pub fn new(
        task_name: impl Into<String>,
        label_space: Vec<String>,
        verbalizer_pool: Vec<VerbalizerTemplate>,
        instruction_pool: Vec<String>,
        max_render_length: usize,
    ) -> Result<Self, PromptError> {
        let task = Self {
            task_name: task_name.into(),
            label_space,
            verbalizer_pool,
            instruction_pool,
            max_render_length,
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |msg: String| Err(PromptError::InvalidTask(msg));
        if self.label_space.is_empty() {
            return invalid("label space is empty".into());
        }
        let distinct: HashSet<&String> = self.label_space.iter().collect();
        if distinct.len() != self.label_space.len() {
            return invalid("label identifiers are not distinct".into());
        }
        if self.verbalizer_pool.is_empty() {
            return invalid("verbalizer pool is empty".into());
        }
        for (idx, v) in self.verbalizer_pool.iter().enumerate() {
            if v.id != idx {
                return invalid(format!("verbalizer at position {idx} has id {}", v.id));
            }
            for label in &self.label_space {
                if v.word_for(label).is_none() {
                    return invalid(format!("verbalizer {idx} has no word for label {label:?}"));
                }
            }
            if v.label_words.len() != self.label_space.len() {
                return invalid(format!("verbalizer {idx} maps labels outside the label space"));
            }
        }
        if self.mask_token.split_whitespace().count() != 1 {
            return invalid("mask token must be a single whitespace-free token".into());
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.label_space.len()
    }

    pub fn num_verbalizers(&self) -> usize {
        self.verbalizer_pool.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_space.iter().position(|l| l == label)
    }

    /// Label words of verbalizer `id`, in label-space order.
    pub fn label_words(&self, id: usize) -> Vec<&str> {
        let v = &self.verbalizer_pool[id];
        self.label_space
            .iter()
            .map(|l| v.word_for(l).expect("validated task"))
            .collect()
    }
}

/// A labelled example from the exemplar pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: usize,
    pub text: String,
    /// Index into the task's label space.
    pub label: usize,
}

/// Lowercased alphanumeric word set used for lexical overlap.
pub fn lexical_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The exemplar pool with cached lexical token sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExemplarPool {
    exemplars: Vec<Exemplar>,
    tokens: Vec<BTreeSet<String>>,
}

impl ExemplarPool {
    /// Ids are reassigned to pool positions.
    pub fn new(exemplars: Vec<Exemplar>) -> Self {
        let exemplars: Vec<Exemplar> = exemplars
            .into_iter()
            .enumerate()
            .map(|(id, e)| Exemplar { id, ..e })
            .collect();
        let tokens = exemplars.iter().map(|e| lexical_tokens(&e.text)).collect();
        Self { exemplars, tokens }
    }

    pub fn tokens(&self, id: usize) -> &BTreeSet<String> {
        &self.tokens[id]
    }
}

impl Deref for ExemplarPool {
    type Target = [Exemplar];

    fn deref(&self) -> &[Exemplar] {
        &self.exemplars
    }
}

/// The symbolic half of the editing MDP state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptState {
    pub instruction: Vec<String>,
    pub exemplar_slots: Vec<usize>,
    /// One entry per exemplar slot followed by the query's verbalizer.
    pub slot_verbalizers: Vec<usize>,
    pub query: String,
    pub history: Vec<EditAction>,
}

impl PromptState {
    /// Initial state with every slot using `verbalizer`.
    pub fn new(
        instruction: Vec<String>,
        exemplar_slots: Vec<usize>,
        verbalizer: usize,
        query: impl Into<String>,
    ) -> Self {
        let slots = exemplar_slots.len();
        Self {
            instruction,
            exemplar_slots,
            slot_verbalizers: vec![verbalizer; slots + 1],
            query: query.into(),
            history: Vec::new(),
        }
    }

    pub fn num_phrases(&self) -> usize {
        self.instruction.len()
    }

    pub fn num_slots(&self) -> usize {
        self.exemplar_slots.len()
    }

    pub fn query_verbalizer(&self) -> usize {
        *self.slot_verbalizers.last().expect("query slot present")
    }

    pub fn validate(
        &self,
        task: &TaskSpec,
        pool: &[Exemplar],
        horizon: Option<usize>,
    ) -> Result<(), PromptError> {
        let invalid = |msg: String| Err(PromptError::InvalidState(msg));
        let mut seen = HashSet::new();
        for &id in &self.exemplar_slots {
            if id >= pool.len() {
                return invalid(format!("exemplar id {id} outside pool of {}", pool.len()));
            }
            if !seen.insert(id) {
                return invalid(format!("exemplar id {id} appears in two slots"));
            }
        }
        if self.slot_verbalizers.len() != self.exemplar_slots.len() + 1 {
            return invalid(format!(
                "{} verbalizer entries for {} slots",
                self.slot_verbalizers.len(),
                self.exemplar_slots.len()
            ));
        }
        if let Some(&v) = self
            .slot_verbalizers
            .iter()
            .find(|&&v| v >= task.num_verbalizers())
        {
            return invalid(format!("verbalizer id {v} outside pool"));
        }
        if let Some(t) = horizon {
            if self.history.len() > t {
                return invalid(format!("history length {} exceeds horizon {t}", self.history.len()));
            }
        }
        Ok(())
    }
}

fn is_boundary(word: &str) -> bool {
    let trimmed = word.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}']);
    matches!(trimmed.chars().last(), Some(',' | ';' | '.' | '!' | '?'))
}

/// Segments an instruction into phrases at commas, semicolons and sentence
/// ends. Rejoining with single spaces reproduces the whitespace-collapsed
/// input.
pub fn tokenize_instruction(raw: &str) -> Result<Vec<String>, PromptError> {
    let mut phrases = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in raw.split_whitespace() {
        current.push(word);
        if is_boundary(word) {
            phrases.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        phrases.push(current.join(" "));
    }
    if phrases.is_empty() {
        return Err(PromptError::InvalidInstruction);
    }
    Ok(phrases)
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Renders instruction, exemplars and query into one string.
///
/// When over `max_render_length` whitespace tokens, whole exemplars are
/// dropped starting from slot 0; if instruction plus query still do not fit,
/// the instruction is cut from its end. The query block is never cut.
pub fn render(
    state: &PromptState,
    task: &TaskSpec,
    pool: &[Exemplar],
) -> Result<String, PromptError> {
    let budget = task.max_render_length;
    let query_block = task.verbalizer_pool[state.query_verbalizer()]
        .format(&state.query, &task.mask_token);
    let query_len = token_count(&query_block);
    if query_len > budget {
        return Err(PromptError::RenderOverflow {
            needed: query_len,
            budget,
        });
    }

    let exemplar_blocks: Vec<String> = state
        .exemplar_slots
        .iter()
        .zip(&state.slot_verbalizers)
        .map(|(&id, &v)| {
            let ex = &pool[id];
            let verbalizer = &task.verbalizer_pool[v];
            let word = verbalizer
                .word_for(&task.label_space[ex.label])
                .expect("validated task");
            verbalizer.format(&ex.text, word)
        })
        .collect();

    let mut instruction: Vec<&str> = state
        .instruction
        .iter()
        .flat_map(|p| p.split_whitespace())
        .collect();
    let exemplar_lens: Vec<usize> = exemplar_blocks.iter().map(|b| token_count(b)).collect();
    let mut total = instruction.len() + exemplar_lens.iter().sum::<usize>() + query_len;
    let mut first_kept = 0;
    while total > budget && first_kept < exemplar_blocks.len() {
        total -= exemplar_lens[first_kept];
        first_kept += 1;
    }
    if total > budget {
        instruction.truncate(instruction.len() - (total - budget));
    }

    let mut parts: Vec<&str> = Vec::new();
    let joined = instruction.join(" ");
    if !joined.is_empty() {
        parts.push(&joined);
    }
    parts.extend(exemplar_blocks[first_kept..].iter().map(String::as_str));
    parts.push(&query_block);
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn words(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn sst2_task() -> TaskSpec {
        let review = VerbalizerTemplate::new(
            0,
            "Review: {{text}} Sentiment: {{answer_choices[label]}}.",
            words(&[("negative", "negative"), ("positive", "positive")]),
        )
        .unwrap();
        TaskSpec::new(
            "sst2",
            vec!["negative".into(), "positive".into()],
            vec![review],
            vec!["In this task, you are given sentences from movie reviews.".into()],
            512,
        )
        .unwrap()
    }

    fn pool() -> Vec<Exemplar> {
        vec![
            Exemplar { id: 0, text: "of saucy.".into(), label: 1 },
            Exemplar { id: 1, text: "cold movie.".into(), label: 0 },
            Exemplar { id: 2, text: "a gem.".into(), label: 1 },
        ]
    }

    #[test]
    fn phrase_split_matches_table_example() {
        let phrases = tokenize_instruction("Given text, classify whether it is good or bad.").unwrap();
        assert_eq!(phrases, vec!["Given text,", "classify whether it is good or bad."]);
        assert_eq!(tokenize_instruction("Classify.").unwrap(), vec!["Classify."]);
    }

    #[test]
    fn empty_instruction_rejected() {
        assert_eq!(tokenize_instruction(""), Err(PromptError::InvalidInstruction));
        assert_eq!(tokenize_instruction(" \t\n"), Err(PromptError::InvalidInstruction));
    }

    #[test]
    fn quoted_sentence_end_is_a_boundary() {
        let raw = "as \"great\" if positive or as \"terrible\" if negative.\" Next part";
        let phrases = tokenize_instruction(raw).unwrap();
        assert_eq!(phrases.len(), 2);
        assert_eq!(phrases[1], "Next part");
    }

    #[test]
    fn pattern_grammar() {
        let segs = parse_pattern(
            "Someone just said to me \"{{sentence}}\". Do you think they are {{\"sad\"}} or {{\"happy\"}}? {{ answer_choices[label]}}",
        )
        .unwrap();
        assert_eq!(
            segs,
            vec![
                Segment::Literal("Someone just said to me \"".into()),
                Segment::Input,
                Segment::Literal("\". Do you think they are sad or happy? ".into()),
                Segment::Answer,
            ]
        );
        assert!(parse_pattern("{{text}} no answer").is_err());
        assert!(parse_pattern("{{answer_choices[label]}} only answer").is_err());
        assert!(parse_pattern("{{text}} {{answer_choices[label]}} {{answer_choices[label]}}").is_err());
        assert!(parse_pattern("{{text {{answer_choices[label]}}").is_err());
        assert!(parse_pattern("{{ a + b }} {{answer_choices[label]}}").is_err());
    }

    #[test]
    fn renders_table_layout() {
        let task = sst2_task();
        let state = PromptState::new(
            tokenize_instruction(&task.instruction_pool[0]).unwrap(),
            vec![0, 1],
            0,
            "heroes.",
        );
        let text = render(&state, &task, &pool()).unwrap();
        assert_eq!(
            text,
            "In this task, you are given sentences from movie reviews. \
             Review: of saucy. Sentiment: positive. Review: cold movie. Sentiment: negative. \
             Review: heroes. Sentiment: <mask>."
        );
        assert_eq!(render(&state, &task, &pool()).unwrap(), text);
    }

    #[test]
    fn degenerate_prompt_is_query_only() {
        let task = sst2_task();
        let state = PromptState::new(vec![], vec![], 0, "heroes.");
        assert_eq!(
            render(&state, &task, &pool()).unwrap(),
            "Review: heroes. Sentiment: <mask>."
        );
    }

    #[test]
    fn truncation_drops_oldest_exemplar_first() {
        let mut task = sst2_task();
        let state = PromptState::new(vec!["Classify.".into()], vec![0, 1, 2], 0, "heroes.");
        // instruction 1 + exemplars 5+5+5 + query 4
        task.max_render_length = 15;
        let text = render(&state, &task, &pool()).unwrap();
        assert_eq!(
            text,
            "Classify. Review: cold movie. Sentiment: negative. Review: a gem. Sentiment: positive. \
             Review: heroes. Sentiment: <mask>."
        );
        task.max_render_length = 4;
        assert_eq!(render(&state, &task, &pool()).unwrap(), "Review: heroes. Sentiment: <mask>.");
        task.max_render_length = 3;
        assert_eq!(
            render(&state, &task, &pool()),
            Err(PromptError::RenderOverflow { needed: 4, budget: 3 })
        );
    }

    #[test]
    fn task_validation() {
        let v = VerbalizerTemplate::new(0, "{{text}} {{answer_choices[label]}}", words(&[("a", "A")])).unwrap();
        assert!(TaskSpec::new("t", vec![], vec![v.clone()], vec![], 10).is_err());
        assert!(TaskSpec::new("t", vec!["a".into(), "a".into()], vec![v.clone()], vec![], 10).is_err());
        assert!(TaskSpec::new("t", vec!["a".into(), "b".into()], vec![v.clone()], vec![], 10).is_err());
        assert!(TaskSpec::new("t", vec!["a".into()], vec![v], vec![], 10).is_ok());
    }

    #[test]
    fn state_validation() {
        let task = sst2_task();
        let mut state = PromptState::new(vec![], vec![0, 0], 0, "q");
        assert!(state.validate(&task, &pool(), None).is_err());
        state.exemplar_slots = vec![0, 1];
        assert!(state.validate(&task, &pool(), None).is_ok());
        state.slot_verbalizers[2] = 5;
        assert!(state.validate(&task, &pool(), None).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rejoin_round_trips(raw in "[a-zA-Z,;.!? \"]{1,80}") {
                prop_assume!(!raw.trim().is_empty());
                let phrases = tokenize_instruction(&raw).unwrap();
                prop_assert!(phrases.iter().all(|p| !p.is_empty()));
                let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
                prop_assert_eq!(phrases.join(" "), collapsed);
                prop_assert_eq!(tokenize_instruction(&phrases.join(" ")).unwrap(), phrases);
            }
        }
    }
}
