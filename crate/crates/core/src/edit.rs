//! Discrete edit actions over a [`PromptState`] and their enumeration.
//!
//! Catalog order is fixed: instruction swaps `(i, j)` in lexicographic order,
//! then adds, then deletes; exemplar swaps slot-major over pool ids; then
//! verbalizer changes slot-major over verbalizer ids.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{PromptState, TaskSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EditError {
    #[error("action {0:?} is not in the catalog for this state")]
    InvalidAction(EditAction),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot decode action code {0:#x}")]
    BadEncoding(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditAction {
    /// Exchange phrases `i < j`.
    InstrSwap { i: usize, j: usize },
    /// Duplicate phrase `i` directly after itself.
    InstrAdd { i: usize },
    InstrDelete { i: usize },
    /// Put pool exemplar `pool_id` into `slot`. If it already sits in another
    /// slot the two slots exchange contents.
    ExemplarSwap { slot: usize, pool_id: usize },
    /// Slot index `n` is the query.
    VerbalizerChange { slot: usize, verbalizer: usize },
}

/// Action kinds, in the order used for family embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    InstrSwap = 0,
    InstrAdd = 1,
    InstrDelete = 2,
    ExemplarSwap = 3,
    VerbalizerChange = 4,
}

pub const NUM_ACTION_KINDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditFamily {
    Instruction,
    Exemplar,
    Verbalizer,
}

impl EditAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            EditAction::InstrSwap { .. } => ActionKind::InstrSwap,
            EditAction::InstrAdd { .. } => ActionKind::InstrAdd,
            EditAction::InstrDelete { .. } => ActionKind::InstrDelete,
            EditAction::ExemplarSwap { .. } => ActionKind::ExemplarSwap,
            EditAction::VerbalizerChange { .. } => ActionKind::VerbalizerChange,
        }
    }

    pub fn family(&self) -> EditFamily {
        match self.kind() {
            ActionKind::InstrSwap | ActionKind::InstrAdd | ActionKind::InstrDelete => {
                EditFamily::Instruction
            }
            ActionKind::ExemplarSwap => EditFamily::Exemplar,
            ActionKind::VerbalizerChange => EditFamily::Verbalizer,
        }
    }

    /// Packs the action as `tag << 48 | first << 24 | second`.
    pub fn encode(&self) -> u64 {
        let (a, b) = match *self {
            EditAction::InstrSwap { i, j } => (i, j),
            EditAction::InstrAdd { i } | EditAction::InstrDelete { i } => (i, 0),
            EditAction::ExemplarSwap { slot, pool_id } => (slot, pool_id),
            EditAction::VerbalizerChange { slot, verbalizer } => (slot, verbalizer),
        };
        debug_assert!(a < 1 << 24 && b < 1 << 24);
        ((self.kind() as u64) << 48) | ((a as u64) << 24) | b as u64
    }

    pub fn decode(code: u64) -> Result<Self, EditError> {
        let tag = code >> 48;
        let a = ((code >> 24) & 0xff_ffff) as usize;
        let b = (code & 0xff_ffff) as usize;
        Ok(match tag {
            0 => EditAction::InstrSwap { i: a, j: b },
            1 if b == 0 => EditAction::InstrAdd { i: a },
            2 if b == 0 => EditAction::InstrDelete { i: a },
            3 => EditAction::ExemplarSwap { slot: a, pool_id: b },
            4 => EditAction::VerbalizerChange { slot: a, verbalizer: b },
            _ => return Err(EditError::BadEncoding(code)),
        })
    }
}

/// Which edit families are offered to the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyToggles {
    pub instruction: bool,
    pub exemplar: bool,
    pub verbalizer: bool,
}

impl Default for FamilyToggles {
    fn default() -> Self {
        Self {
            instruction: true,
            exemplar: true,
            verbalizer: true,
        }
    }
}

impl FamilyToggles {
    pub fn any(&self) -> bool {
        self.instruction || self.exemplar || self.verbalizer
    }

    pub fn allows(&self, family: EditFamily) -> bool {
        match family {
            EditFamily::Instruction => self.instruction,
            EditFamily::Exemplar => self.exemplar,
            EditFamily::Verbalizer => self.verbalizer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FamilySizes {
    pub instruction: usize,
    pub exemplar: usize,
    pub verbalizer: usize,
}

impl FamilySizes {
    pub fn total(&self) -> usize {
        self.instruction + self.exemplar + self.verbalizer
    }
}

/// Closed-form family sizes for `l` phrases, `n` slots, a pool of `pool_size`
/// and `verbalizers` templates.
pub fn count_actions(
    l: usize,
    n: usize,
    pool_size: usize,
    verbalizers: usize,
) -> Result<FamilySizes, EditError> {
    if n > pool_size {
        return Err(EditError::InvalidConfig(format!(
            "{n} exemplar slots exceed pool of {pool_size}"
        )));
    }
    Ok(FamilySizes {
        instruction: l * l.saturating_sub(1) / 2 + 2 * l,
        exemplar: n * pool_size - n * n.saturating_sub(1) / 2,
        verbalizer: (n + 1) * verbalizers,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionCatalog {
    actions: Vec<EditAction>,
    instruction: Range<usize>,
    exemplar: Range<usize>,
    verbalizer: Range<usize>,
}

impl ActionCatalog {
    pub fn actions(&self) -> &[EditAction] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<EditAction> {
        self.actions.get(index).copied()
    }

    pub fn position(&self, action: &EditAction) -> Option<usize> {
        let range = self.family_range(action.family());
        self.actions[range.clone()]
            .iter()
            .position(|a| a == action)
            .map(|p| p + range.start)
    }

    pub fn family_range(&self, family: EditFamily) -> Range<usize> {
        match family {
            EditFamily::Instruction => self.instruction.clone(),
            EditFamily::Exemplar => self.exemplar.clone(),
            EditFamily::Verbalizer => self.verbalizer.clone(),
        }
    }

    pub fn sizes(&self) -> FamilySizes {
        FamilySizes {
            instruction: self.instruction.len(),
            exemplar: self.exemplar.len(),
            verbalizer: self.verbalizer.len(),
        }
    }

    /// Flat integer encodings for logs and replay files.
    pub fn encode(&self) -> Vec<u64> {
        self.actions.iter().map(EditAction::encode).collect()
    }
}

/// The action space for one run: pool size, verbalizer count and enabled
/// families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditSpace {
    pub pool_size: usize,
    pub verbalizers: usize,
    pub toggles: FamilyToggles,
}

impl EditSpace {
    pub fn new(pool_size: usize, verbalizers: usize, toggles: FamilyToggles) -> Self {
        Self {
            pool_size,
            verbalizers,
            toggles,
        }
    }

    pub fn for_task(task: &TaskSpec, pool_size: usize) -> Self {
        Self::new(pool_size, task.num_verbalizers(), FamilyToggles::default())
    }

    pub fn catalog(&self, state: &PromptState) -> ActionCatalog {
        let mut actions = Vec::new();
        let l = state.num_phrases();
        let n = state.num_slots();

        let start = actions.len();
        if self.toggles.instruction {
            for i in 0..l {
                for j in i + 1..l {
                    actions.push(EditAction::InstrSwap { i, j });
                }
            }
            actions.extend((0..l).map(|i| EditAction::InstrAdd { i }));
            actions.extend((0..l).map(|i| EditAction::InstrDelete { i }));
        }
        let instruction = start..actions.len();

        let start = actions.len();
        if self.toggles.exemplar {
            for slot in 0..n {
                let earlier = &state.exemplar_slots[..slot];
                for pool_id in 0..self.pool_size {
                    // a swap with an earlier slot is already listed from that slot
                    if !earlier.contains(&pool_id) {
                        actions.push(EditAction::ExemplarSwap { slot, pool_id });
                    }
                }
            }
        }
        let exemplar = start..actions.len();

        let start = actions.len();
        if self.toggles.verbalizer {
            for slot in 0..=n {
                for verbalizer in 0..self.verbalizers {
                    actions.push(EditAction::VerbalizerChange { slot, verbalizer });
                }
            }
        }
        let verbalizer = start..actions.len();

        ActionCatalog {
            actions,
            instruction,
            exemplar,
            verbalizer,
        }
    }

    /// Whether `action` appears in `catalog(state)`.
    pub fn contains(&self, state: &PromptState, action: &EditAction) -> bool {
        if !self.toggles.allows(action.family()) {
            return false;
        }
        let l = state.num_phrases();
        let n = state.num_slots();
        match *action {
            EditAction::InstrSwap { i, j } => i < j && j < l,
            EditAction::InstrAdd { i } | EditAction::InstrDelete { i } => i < l,
            EditAction::ExemplarSwap { slot, pool_id } => {
                slot < n
                    && pool_id < self.pool_size
                    && !state.exemplar_slots[..slot].contains(&pool_id)
            }
            EditAction::VerbalizerChange { slot, verbalizer } => {
                slot <= n && verbalizer < self.verbalizers
            }
        }
    }

    /// Returns the edited state; the input is left untouched.
    pub fn apply(&self, state: &PromptState, action: EditAction) -> Result<PromptState, EditError> {
        if !self.contains(state, &action) {
            return Err(EditError::InvalidAction(action));
        }
        let mut next = state.clone();
        match action {
            EditAction::InstrSwap { i, j } => next.instruction.swap(i, j),
            EditAction::InstrAdd { i } => {
                let phrase = next.instruction[i].clone();
                next.instruction.insert(i + 1, phrase);
            }
            EditAction::InstrDelete { i } => {
                next.instruction.remove(i);
            }
            EditAction::ExemplarSwap { slot, pool_id } => {
                if let Some(other) = next.exemplar_slots.iter().position(|&id| id == pool_id) {
                    next.exemplar_slots.swap(slot, other);
                } else {
                    next.exemplar_slots[slot] = pool_id;
                }
            }
            EditAction::VerbalizerChange { slot, verbalizer } => {
                next.slot_verbalizers[slot] = verbalizer;
            }
        }
        next.history.push(action);
        Ok(next)
    }
}

/// Catalog of all families for `state`.
pub fn enumerate_actions(state: &PromptState, pool_size: usize, task: &TaskSpec) -> ActionCatalog {
    EditSpace::for_task(task, pool_size).catalog(state)
}

/// Whether the action leaves the symbolic prompt unchanged.
pub fn is_identity(state: &PromptState, action: &EditAction) -> bool {
    match *action {
        EditAction::ExemplarSwap { slot, pool_id } => state.exemplar_slots.get(slot) == Some(&pool_id),
        EditAction::VerbalizerChange { slot, verbalizer } => {
            state.slot_verbalizers.get(slot) == Some(&verbalizer)
        }
        EditAction::InstrSwap { i, j } => state.instruction.get(i) == state.instruction.get(j),
        _ => false,
    }
}
