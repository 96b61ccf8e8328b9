//! Fixed-width feature rows describing each candidate action by the objects
//! it touches.

use std::collections::BTreeSet;

use crate::edit::{is_identity, EditAction};
use crate::prompt::{ExemplarPool, PromptState, TaskSpec};

const POSITION_SCALE: f64 = 16.0;
const LENGTH_SCALE: f64 = 10.0;

/// Column layout for `num_labels` labels and `num_verbalizers` templates:
///
/// | cols | meaning |
/// |---|---|
/// | 0, 1 | first / second index (phrase, slot or pool position), scaled |
/// | 2 | identity edit |
/// | 3 | targets the query slot |
/// | 4, 5 | query overlap fraction of outgoing / incoming exemplar |
/// | 6 | incoming exemplar already sits in another slot |
/// | C | outgoing exemplar label one-hot |
/// | C | incoming exemplar label one-hot |
/// | V | new verbalizer one-hot |
/// | V | current verbalizer one-hot |
/// | 2 | word counts of the touched phrases, scaled |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateLayout {
    pub num_labels: usize,
    pub num_verbalizers: usize,
}

impl CandidateLayout {
    pub fn for_task(task: &TaskSpec) -> Self {
        Self {
            num_labels: task.num_labels(),
            num_verbalizers: task.num_verbalizers(),
        }
    }

    pub fn dim(&self) -> usize {
        7 + 2 * self.num_labels + 2 * self.num_verbalizers + 2
    }

    fn out_label(&self) -> usize {
        7
    }

    fn in_label(&self) -> usize {
        7 + self.num_labels
    }

    fn new_verbalizer(&self) -> usize {
        7 + 2 * self.num_labels
    }

    fn cur_verbalizer(&self) -> usize {
        self.new_verbalizer() + self.num_verbalizers
    }

    fn lengths(&self) -> usize {
        self.cur_verbalizer() + self.num_verbalizers
    }

    /// Features of `action` taken from `state`.
    pub fn describe(
        &self,
        state: &PromptState,
        action: &EditAction,
        pool: &ExemplarPool,
        query_tokens: &BTreeSet<String>,
    ) -> Vec<f64> {
        let mut f = vec![0.0; self.dim()];
        let overlap = |id: usize| {
            if query_tokens.is_empty() {
                0.0
            } else {
                pool.tokens(id).intersection(query_tokens).count() as f64 / query_tokens.len() as f64
            }
        };
        let phrase_len = |i: usize| state.instruction[i].split_whitespace().count() as f64 / LENGTH_SCALE;
        f[2] = if is_identity(state, action) { 1.0 } else { 0.0 };
        match *action {
            EditAction::InstrSwap { i, j } => {
                f[0] = i as f64 / POSITION_SCALE;
                f[1] = j as f64 / POSITION_SCALE;
                f[self.lengths()] = phrase_len(i);
                f[self.lengths() + 1] = phrase_len(j);
            }
            EditAction::InstrAdd { i } | EditAction::InstrDelete { i } => {
                f[0] = i as f64 / POSITION_SCALE;
                f[self.lengths()] = phrase_len(i);
            }
            EditAction::ExemplarSwap { slot, pool_id } => {
                let outgoing = state.exemplar_slots[slot];
                f[0] = slot as f64 / POSITION_SCALE;
                f[1] = pool_id as f64 / POSITION_SCALE;
                f[4] = overlap(outgoing);
                f[5] = overlap(pool_id);
                if pool_id != outgoing && state.exemplar_slots.contains(&pool_id) {
                    f[6] = 1.0;
                }
                f[self.out_label() + pool[outgoing].label] = 1.0;
                f[self.in_label() + pool[pool_id].label] = 1.0;
            }
            EditAction::VerbalizerChange { slot, verbalizer } => {
                f[0] = slot as f64 / POSITION_SCALE;
                f[self.new_verbalizer() + verbalizer] = 1.0;
                f[self.cur_verbalizer() + state.slot_verbalizers[slot]] = 1.0;
                if slot == state.num_slots() {
                    f[3] = 1.0;
                } else {
                    let id = state.exemplar_slots[slot];
                    f[4] = overlap(id);
                    f[self.out_label() + pool[id].label] = 1.0;
                }
            }
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::prompt::{lexical_tokens, Exemplar, VerbalizerTemplate};

    fn setup() -> (TaskSpec, ExemplarPool, PromptState) {
        let words: BTreeMap<String, String> =
            [("a", "A"), ("b", "B")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let v = |id| VerbalizerTemplate::new(id, "{{text}} {{answer_choices[label]}}", words.clone()).unwrap();
        let task = TaskSpec::new("t", vec!["a".into(), "b".into()], vec![v(0), v(1)], vec![], 64).unwrap();
        let pool = ExemplarPool::new(vec![
            Exemplar { id: 0, text: "red sky".into(), label: 0 },
            Exemplar { id: 0, text: "blue sea".into(), label: 1 },
            Exemplar { id: 0, text: "red sea".into(), label: 1 },
        ]);
        let state = PromptState::new(vec!["Pick one,".into(), "now.".into()], vec![0, 1], 1, "red sea today");
        (task, pool, state)
    }

    #[test]
    fn exemplar_swap_features() {
        let (task, pool, state) = setup();
        let layout = CandidateLayout::for_task(&task);
        assert_eq!(layout.dim(), 7 + 4 + 4 + 2);
        let q = lexical_tokens(&state.query);
        let f = layout.describe(&state, &EditAction::ExemplarSwap { slot: 0, pool_id: 2 }, &pool, &q);
        assert_eq!(f[4], 1.0 / 3.0);
        assert_eq!(f[5], 2.0 / 3.0);
        assert_eq!(f[6], 0.0);
        assert_eq!(&f[7..11], &[1.0, 0.0, 0.0, 1.0]);
        let f = layout.describe(&state, &EditAction::ExemplarSwap { slot: 0, pool_id: 1 }, &pool, &q);
        assert_eq!(f[6], 1.0);
        let f = layout.describe(&state, &EditAction::ExemplarSwap { slot: 1, pool_id: 1 }, &pool, &q);
        assert_eq!(f[2], 1.0);
    }

    #[test]
    fn verbalizer_features() {
        let (task, pool, state) = setup();
        let layout = CandidateLayout::for_task(&task);
        let q = lexical_tokens(&state.query);
        let f = layout.describe(&state, &EditAction::VerbalizerChange { slot: 2, verbalizer: 0 }, &pool, &q);
        assert_eq!(f[3], 1.0);
        assert_eq!(&f[11..15], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(f[2], 0.0);
        let f = layout.describe(&state, &EditAction::InstrSwap { i: 0, j: 1 }, &pool, &q);
        assert_eq!(&f[15..17], &[0.2, 0.1]);
    }
}
