//! Loading instruction and verbalizer pools from a TOML seed file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::prompt::{PromptError, TaskSpec, VerbalizerTemplate};

/// Seed file compiled into the library.
pub const BUILTIN_SEEDS: &str = include_str!("../data/seeds.toml");

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("reading seed file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing seed file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("task {task:?}: {source}")]
    Task {
        task: String,
        #[source]
        source: PromptError,
    },
    #[error("no task named {0:?} in seed file")]
    UnknownTask(String),
}

#[derive(Debug, Deserialize)]
struct SeedFile {
    #[serde(default)]
    task: Vec<TaskRecord>,
}

#[derive(Debug, Deserialize)]
struct TaskRecord {
    name: String,
    labels: Vec<String>,
    #[serde(default = "default_budget")]
    max_render_length: usize,
    #[serde(default)]
    mask_token: Option<String>,
    #[serde(default)]
    instructions: Vec<String>,
    #[serde(default)]
    verbalizer: Vec<VerbalizerRecord>,
}

#[derive(Debug, Deserialize)]
struct VerbalizerRecord {
    pattern: String,
    label_words: BTreeMap<String, String>,
}

fn default_budget() -> usize {
    512
}

impl TaskRecord {
    fn into_task(self) -> Result<TaskSpec, SeedError> {
        let name = self.name.clone();
        let wrap = |source| SeedError::Task {
            task: name.clone(),
            source,
        };
        let verbalizers = self
            .verbalizer
            .into_iter()
            .enumerate()
            .map(|(id, v)| VerbalizerTemplate::new(id, v.pattern, v.label_words))
            .collect::<Result<Vec<_>, _>>()
            .map_err(wrap)?;
        let mut task = TaskSpec::new(
            self.name,
            self.labels,
            verbalizers,
            self.instructions,
            self.max_render_length,
        )
        .map_err(wrap)?;
        if let Some(mask) = self.mask_token {
            task.mask_token = mask;
            task.validate().map_err(wrap)?;
        }
        Ok(task)
    }
}

/// Parses every task record in a seed document.
pub fn parse_seeds(text: &str) -> Result<Vec<TaskSpec>, SeedError> {
    let file: SeedFile = toml::from_str(text)?;
    file.task.into_iter().map(TaskRecord::into_task).collect()
}

pub fn load_seeds(path: &Path) -> Result<Vec<TaskSpec>, SeedError> {
    parse_seeds(&std::fs::read_to_string(path)?)
}

pub fn builtin_tasks() -> Vec<TaskSpec> {
    parse_seeds(BUILTIN_SEEDS).expect("built-in seed file is valid")
}

pub fn find_task(tasks: Vec<TaskSpec>, name: &str) -> Result<TaskSpec, SeedError> {
    tasks
        .into_iter()
        .find(|t| t.task_name == name)
        .ok_or_else(|| SeedError::UnknownTask(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::tokenize_instruction;

    #[test]
    fn builtin_seeds_parse() {
        let tasks = builtin_tasks();
        assert!(tasks.len() >= 8);
        let sst2 = find_task(tasks, "sst2").unwrap();
        assert_eq!(sst2.label_space, vec!["negative", "positive"]);
        assert_eq!(sst2.label_words(0), vec!["negative", "positive"]);
        assert_eq!(sst2.label_words(1), vec!["terrible", "great"]);
        assert_eq!(sst2.label_words(2), vec!["sad", "happy"]);
    }

    #[test]
    fn seed_instructions_round_trip_through_phrases() {
        for task in builtin_tasks() {
            for raw in &task.instruction_pool {
                let phrases = tokenize_instruction(raw).unwrap();
                let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
                assert_eq!(phrases.join(" "), collapsed);
            }
        }
    }

    #[test]
    fn rejects_incomplete_label_words() {
        let text = r#"
            [[task]]
            name = "bad"
            labels = ["a", "b"]
            [[task.verbalizer]]
            pattern = "{{text}} {{answer_choices[label]}}"
            label_words = { a = "A" }
        "#;
        assert!(matches!(parse_seeds(text), Err(SeedError::Task { .. })));
    }

    #[test]
    fn unknown_task() {
        assert!(matches!(
            find_task(builtin_tasks(), "nope"),
            Err(SeedError::UnknownTask(_))
        ));
    }
}
