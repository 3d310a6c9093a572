//! Gold action labels derived by diffing consecutive gallery states.
//!
//! Additions and deletions share one label. For a clipart that was added or
//! deleted, the edit labels (move, flip, resize) are suppressed so the model
//! does not learn the attribute changes that merely accompany placement.
//! `acted_upon` is the meta label that is positive whenever any action
//! touches a clipart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game_state::Gallery;
use crate::GALLERY_SIZE;

/// One action type, in the canonical column order of label and logit files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    AddDelete,
    Move,
    Flip,
    Resize,
    ActedUpon,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::AddDelete,
        ActionKind::Move,
        ActionKind::Flip,
        ActionKind::Resize,
        ActionKind::ActedUpon,
    ];

    /// The four concrete actions, excluding the derived meta label.
    pub const CONCRETE: [ActionKind; 4] = [
        ActionKind::AddDelete,
        ActionKind::Move,
        ActionKind::Flip,
        ActionKind::Resize,
    ];

    pub fn column(self) -> usize {
        match self {
            ActionKind::AddDelete => 0,
            ActionKind::Move => 1,
            ActionKind::Flip => 2,
            ActionKind::Resize => 3,
            ActionKind::ActedUpon => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ActionKind::AddDelete => "add/del",
            ActionKind::Move => "move",
            ActionKind::Flip => "flip",
            ActionKind::Resize => "resize",
            ActionKind::ActedUpon => "any",
        }
    }
}

/// Binary action labels for one clipart at one turn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRow {
    pub add_delete: bool,
    pub moved: bool,
    pub flipped: bool,
    pub resized: bool,
    pub acted_upon: bool,
}

impl ActionRow {
    pub fn get(&self, kind: ActionKind) -> bool {
        match kind {
            ActionKind::AddDelete => self.add_delete,
            ActionKind::Move => self.moved,
            ActionKind::Flip => self.flipped,
            ActionKind::Resize => self.resized,
            ActionKind::ActedUpon => self.acted_upon,
        }
    }

    fn close_over_any(mut self) -> Self {
        self.acted_upon = self.add_delete || self.moved || self.flipped || self.resized;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.acted_upon != (self.add_delete || self.moved || self.flipped || self.resized) {
            return Err(Error::data("acted_upon must be the OR of the four actions"));
        }
        if self.add_delete && (self.moved || self.flipped || self.resized) {
            return Err(Error::data(
                "edit labels must be suppressed on added/deleted cliparts",
            ));
        }
        Ok(())
    }
}

/// Per-clipart action labels for one turn, aligned with the canonical
/// gallery ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionLabels {
    rows: Vec<ActionRow>,
}

impl ActionLabels {
    pub fn new(rows: Vec<ActionRow>) -> Result<Self> {
        if rows.len() != GALLERY_SIZE {
            return Err(Error::data(format!(
                "action labels have {} rows, expected {GALLERY_SIZE}",
                rows.len()
            )));
        }
        for r in &rows {
            r.validate()?;
        }
        Ok(ActionLabels { rows })
    }

    pub fn all_negative() -> Self {
        ActionLabels {
            rows: vec![ActionRow::default(); GALLERY_SIZE],
        }
    }

    pub fn rows(&self) -> &[ActionRow] {
        &self.rows
    }

    pub fn count(&self, kind: ActionKind) -> usize {
        self.rows.iter().filter(|r| r.get(kind)).count()
    }

    /// Number of concrete action labels set in this turn.
    pub fn concrete_count(&self) -> usize {
        ActionKind::CONCRETE
            .iter()
            .map(|&k| self.count(k))
            .sum()
    }
}

/// Diff two consecutive gallery states into gold action labels.
pub fn derive_actions(prev: &Gallery, curr: &Gallery) -> Result<ActionLabels> {
    if !prev.same_ids(curr) {
        return Err(Error::data(
            "cannot diff galleries with different clipart sets",
        ));
    }
    let rows = prev
        .cliparts()
        .iter()
        .zip(curr.cliparts())
        .map(|(p, c)| {
            let mut row = ActionRow::default();
            if p.present != c.present {
                row.add_delete = true;
            } else if p.present && c.present {
                row.moved = p.x != c.x || p.y != c.y;
                row.flipped = p.orientation != c.orientation;
                row.resized = p.size != c.size;
            }
            row.close_over_any()
        })
        .collect();
    ActionLabels::new(rows)
}

/// Positive-label percentages over a collection of per-turn labels, plus the
/// mean and standard deviation of concrete actions per turn.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionRates {
    pub add_delete: f64,
    pub moved: f64,
    pub flipped: f64,
    pub resized: f64,
    pub any: f64,
    pub mean_actions_per_turn: f64,
    pub std_actions_per_turn: f64,
}

pub fn action_statistics<'a, I>(labels: I) -> ActionRates
where
    I: IntoIterator<Item = &'a ActionLabels>,
{
    let mut turns = 0usize;
    let mut counts = [0usize; 5];
    let mut per_turn = Vec::new();
    for l in labels {
        turns += 1;
        for kind in ActionKind::ALL {
            counts[kind.column()] += l.count(kind);
        }
        per_turn.push(l.concrete_count() as f64);
    }
    let denom = (turns * GALLERY_SIZE) as f64;
    let pct = |c: usize| {
        if turns == 0 {
            0.0
        } else {
            100.0 * c as f64 / denom
        }
    };
    let mean = if turns == 0 {
        0.0
    } else {
        per_turn.iter().sum::<f64>() / turns as f64
    };
    let var = if turns == 0 {
        0.0
    } else {
        per_turn.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / turns as f64
    };
    ActionRates {
        add_delete: pct(counts[0]),
        moved: pct(counts[1]),
        flipped: pct(counts[2]),
        resized: pct(counts[3]),
        any: pct(counts[4]),
        mean_actions_per_turn: mean,
        std_actions_per_turn: var.sqrt(),
    }
}
