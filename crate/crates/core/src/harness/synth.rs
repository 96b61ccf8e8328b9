//! Generated classification tasks whose texts are drawn from per-class
//! vocabularies, paired with the lexical-overlap scorer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::prompt::{TaskSpec, VerbalizerTemplate};
use crate::scoring::{SyntheticParams, SyntheticScorer};

const INSTRUCTION: &str = "Read the text, pick the matching class, answer with one word.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    pub num_labels: usize,
    pub num_verbalizers: usize,
    /// Distinct words owned by each class.
    pub class_vocab: usize,
    /// Words any class may use.
    pub shared_vocab: usize,
    /// Class words per text.
    pub class_words: usize,
    /// Shared words per text.
    pub shared_words: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            num_labels: 2,
            num_verbalizers: 3,
            class_vocab: 6,
            shared_vocab: 6,
            class_words: 3,
            shared_words: 1,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: SyntheticTaskConfig,
    pub task: TaskSpec,
    pub params: SyntheticParams,
}

impl SyntheticTask {
    /// Label `c` prefers verbalizer `1 + c mod (V - 1)`; verbalizer 0 is
    /// preferred by none. With a single verbalizer there is no preference.
    pub fn new(config: SyntheticTaskConfig) -> Self {
        let labels: Vec<String> = (0..config.num_labels).map(|c| format!("class{c}")).collect();
        let verbalizers = (0..config.num_verbalizers)
            .map(|v| {
                let words: BTreeMap<String, String> =
                    labels.iter().enumerate().map(|(c, l)| (l.clone(), format!("v{v}l{c}"))).collect();
                VerbalizerTemplate::new(v, "Text: {{text}} Class: {{answer_choices[label]}}", words)
                    .expect("generated template is valid")
            })
            .collect();
        let task = TaskSpec::new("synthetic", labels, verbalizers, vec![INSTRUCTION.into()], 512)
            .expect("generated task is valid");
        let preferred_verbalizer = if config.num_verbalizers > 1 {
            (0..config.num_labels).map(|c| 1 + c % (config.num_verbalizers - 1)).collect()
        } else {
            Vec::new()
        };
        let params = SyntheticParams {
            alpha: config.alpha,
            beta: config.beta,
            gamma: config.gamma,
            preferred_verbalizer,
            ..SyntheticParams::default()
        };
        Self { config, task, params }
    }

    pub fn scorer(&self) -> SyntheticScorer {
        SyntheticScorer::new(self.params.clone(), &self.task).expect("feature dimension fits")
    }

    fn text(&self, label: usize, rng: &mut ChaCha8Rng) -> String {
        let c = &self.config;
        let own: Vec<String> = (0..c.class_vocab).map(|j| format!("k{label}w{j}")).collect();
        let shared: Vec<String> = (0..c.shared_vocab).map(|j| format!("s{j}")).collect();
        let mut words: Vec<&String> = own.choose_multiple(rng, c.class_words).collect();
        words.extend(shared.choose_multiple(rng, c.shared_words));
        words.shuffle(rng);
        words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ")
    }

    /// `per_class` examples of each label, interleaved by label.
    pub fn generate(&self, per_class: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(per_class * self.config.num_labels);
        for _ in 0..per_class {
            for label in 0..self.config.num_labels {
                out.push(Example {
                    text: self.text(label, &mut rng),
                    label,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{lexical_tokens, tokenize_instruction};

    #[test]
    fn generated_task_shape() {
        let s = SyntheticTask::new(SyntheticTaskConfig::default());
        assert_eq!(s.task.num_labels(), 2);
        assert_eq!(s.task.num_verbalizers(), 3);
        assert_eq!(tokenize_instruction(&s.task.instruction_pool[0]).unwrap().len(), 3);
        assert_eq!(s.params.preferred_verbalizer, vec![1, 2]);
        let data = s.generate(5, 1);
        assert_eq!(data.len(), 10);
        assert_eq!(data, s.generate(5, 1));
        for e in &data {
            let toks = lexical_tokens(&e.text);
            assert_eq!(toks.len(), 4);
            assert_eq!(toks.iter().filter(|t| t.starts_with(&format!("k{}", e.label))).count(), 3);
        }
    }
}
