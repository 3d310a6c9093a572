//! CoDraw corpus loading, annotation alignment and per-turn records.
//!
//! # Dataset adapter
//!
//! The dialogue loader reads the public CoDraw JSON release. All format
//! knowledge is isolated here: the root object (optionally wrapped in a
//! `"data"` key) maps game ids like `train_00123` to game objects whose
//! `"dialog"` array holds one object per turn with `"msg_t"` (instruction
//! giver), `"msg_d"` (instruction follower) and `"abs_d"` (canvas scene
//! string after the follower's actions). An absent, null or empty `"abs_d"`
//! is treated as a missing scene string: the turn is flagged and the gallery
//! state is carried over from the adjacent turn. A game-level `"gallery"`
//! key (array of clipart indices or a comma-separated string) pins the
//! 28-clipart gallery; when the key is absent the gallery is derived from
//! the scene strings plus annotation references and padded deterministically.
//!
//! # Annotation adapter
//!
//! The iCR annotation is a UTF-8 tab-separated file with a header row and
//! the columns `game_id`, `turn`, `is_icr`, `cliparts` (comma-separated
//! clipart indices) and `ambiguity_classes` (comma-separated group tags or
//! `general`). Extra columns are ignored; missing required columns are a
//! hard error. Rows that mark an iCR but provide neither cliparts nor a
//! concrete ambiguity class carry an unresolved reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action_labeler::{derive_actions, ActionKind, ActionLabels, ActionRow};
use crate::error::{Error, Result};
use crate::game_state::{
    inventory::inventory, parse_scene_string, serialize_scene_string, ClipartId, Gallery,
};
use crate::{GALLERY_SIZE, INVENTORY_SIZE};

/// Schema version written into every canonical record file.
pub const RECORD_SCHEMA: &str = "icr-records-v1";

/// Ambiguity class tag for unclear references; contributes no object labels.
pub const GENERAL_AMBIGUITY: &str = "general";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Derive the split from the official game-id prefix.
    pub fn of_game_id(game_id: &str) -> Result<Split> {
        let prefix = game_id.split('_').next().unwrap_or("");
        match prefix {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::data(format!(
                "game id `{game_id}` lacks a train/val/test prefix"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::data(format!("unknown split `{s}`"))),
        }
    }
}

/// Which prediction task a record set is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Turn-level decision: should an iCR be asked at this turn.
    When,
    /// Clipart-level decision at iCR turns: which objects to ask about.
    What,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", match self {
            Task::When => "when",
            Task::What => "what",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "when" => Ok(Task::When),
            "what" => Ok(Task::What),
            _ => Err(Error::config(format!("unknown task `{s}`"))),
        }
    }
}

/// One game turn as found in the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub teller: String,
    pub drawer: String,
    /// Scene string after the follower's actions; `None` when missing from
    /// the dataset (flagged, not dropped).
    pub scene_after: Option<String>,
}

/// One CoDraw game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameRecord {
    pub game_id: String,
    pub split: Split,
    /// The 28 gallery clipart ids, sorted.
    pub gallery: Vec<ClipartId>,
    /// True when the dataset lacked an explicit gallery and it was derived
    /// from scene strings.
    pub gallery_derived: bool,
    pub turns: Vec<RawTurn>,
}

/// One row of the iCR annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct IcrAnnotation {
    pub game_id: String,
    pub turn_index: usize,
    pub is_icr: bool,
    pub mentioned_cliparts: BTreeSet<ClipartId>,
    pub ambiguity_classes: BTreeSet<String>,
    /// iCR without reference cliparts and without a concrete ambiguity
    /// class; excluded from the what-task.
    pub has_unresolved_reference: bool,
}

fn json_str(v: &serde_json::Value) -> Option<&str> {
    v.as_str()
}

fn gallery_from_value(v: &serde_json::Value) -> Result<Vec<ClipartId>> {
    let mut ids = BTreeSet::new();
    match v {
        serde_json::Value::Array(items) => {
            for item in items {
                let idx = item
                    .as_u64()
                    .ok_or_else(|| Error::data("gallery entries must be integers"))?;
                ids.insert(ClipartId::new(idx as u8)?);
            }
        }
        serde_json::Value::String(s) => {
            for tok in s.split(',').filter(|t| !t.trim().is_empty()) {
                let idx: u8 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::data(format!("bad gallery id `{tok}`")))?;
                ids.insert(ClipartId::new(idx)?);
            }
        }
        _ => return Err(Error::data("gallery must be an array or string")),
    }
    if ids.len() != GALLERY_SIZE {
        return Err(Error::data(format!(
            "gallery has {} distinct cliparts, expected {GALLERY_SIZE}",
            ids.len()
        )));
    }
    Ok(ids.into_iter().collect())
}

/// Scan a scene string for the clipart indices it mentions without building
/// full states; used for gallery derivation.
fn scene_string_ids(raw: &str) -> Vec<u8> {
    let tokens: Vec<&str> = raw.split(',').collect();
    let n: usize = match tokens.first().and_then(|t| t.trim().parse().ok()) {
        Some(n) => n,
        None => return Vec::new(),
    };
    let mut out = Vec::new();
    for i in 0..n {
        if let Some(tok) = tokens.get(1 + 8 * i + 2) {
            if let Ok(idx) = tok.trim().parse::<u8>() {
                out.push(idx);
            }
        }
    }
    out
}

/// Pad a derived gallery id set up to 28 with the smallest unused indices.
fn pad_gallery(mut ids: BTreeSet<ClipartId>) -> Result<Vec<ClipartId>> {
    if ids.len() > GALLERY_SIZE {
        return Err(Error::data(format!(
            "derived gallery has {} cliparts, more than {GALLERY_SIZE}",
            ids.len()
        )));
    }
    for idx in 0..INVENTORY_SIZE as u8 {
        if ids.len() == GALLERY_SIZE {
            break;
        }
        ids.insert(ClipartId::new(idx)?);
    }
    Ok(ids.into_iter().collect())
}

/// Load the CoDraw dataset file into one `GameRecord` per game.
pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<GameRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("cannot parse {}: {e}", path.display())))?;
    let games_obj = match &root {
        serde_json::Value::Object(map) => match map.get("data") {
            Some(serde_json::Value::Object(inner)) => inner,
            Some(_) => return Err(Error::data("`data` key is not an object")),
            None => map,
        },
        _ => return Err(Error::data("dataset root is not a JSON object")),
    };
    let mut games = Vec::with_capacity(games_obj.len());
    let sorted: BTreeMap<_, _> = games_obj.iter().collect();
    for (game_id, value) in sorted {
        let game = value.as_object().ok_or_else(|| {
            Error::data(format!("game `{game_id}`: entry is not an object"))
        })?;
        let split = Split::of_game_id(game_id)?;
        let dialog = game
            .get("dialog")
            .and_then(|d| d.as_array())
            .ok_or_else(|| Error::data(format!("game `{game_id}`: missing dialog array")))?;
        let mut turns = Vec::with_capacity(dialog.len());
        for (t, turn) in dialog.iter().enumerate() {
            let obj = turn.as_object().ok_or_else(|| {
                Error::data(format!("game `{game_id}` turn {t}: not an object"))
            })?;
            let teller = obj.get("msg_t").and_then(json_str).unwrap_or("").to_string();
            let drawer = obj.get("msg_d").and_then(json_str).unwrap_or("").to_string();
            let scene_after = match obj.get("abs_d") {
                Some(serde_json::Value::String(s)) if !s.trim().is_empty() => {
                    Some(s.clone())
                }
                _ => None,
            };
            turns.push(RawTurn {
                teller,
                drawer,
                scene_after,
            });
        }
        let (gallery, gallery_derived) = match game.get("gallery") {
            Some(v) => (
                gallery_from_value(v)
                    .map_err(|e| Error::data(format!("game `{game_id}`: {e}")))?,
                false,
            ),
            None => {
                let mut ids = BTreeSet::new();
                for turn in dialog {
                    for key in ["abs_d", "abs_t"] {
                        if let Some(s) = turn.get(key).and_then(json_str) {
                            for idx in scene_string_ids(s) {
                                ids.insert(ClipartId::new(idx)?);
                            }
                        }
                    }
                }
                if let Some(s) = game.get("abs_t").and_then(json_str) {
                    for idx in scene_string_ids(s) {
                        ids.insert(ClipartId::new(idx)?);
                    }
                }
                (
                    pad_gallery(ids)
                        .map_err(|e| Error::data(format!("game `{game_id}`: {e}")))?,
                    true,
                )
            }
        };
        games.push(GameRecord {
            game_id: game_id.clone(),
            split,
            gallery,
            gallery_derived,
            turns,
        });
    }
    Ok(games)
}

/// Load the iCR annotation TSV.
pub fn load_icr_annotation(path: impl AsRef<Path>) -> Result<Vec<IcrAnnotation>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("annotation header: {e}")))?
        .clone();
    let required = ["game_id", "turn", "is_icr", "cliparts", "ambiguity_classes"];
    let mut cols = BTreeMap::new();
    for name in required {
        match headers.iter().position(|h| h == name) {
            Some(i) => {
                cols.insert(name, i);
            }
            None => {
                return Err(Error::data(format!(
                    "annotation header mismatch: missing column `{name}` (found: {})",
                    headers.iter().collect::<Vec<_>>().join(", ")
                )))
            }
        }
    }
    let known_groups: BTreeSet<String> =
        inventory().group_names().map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("annotation row {line}: {e}")))?;
        let get = |name: &str| record.get(cols[name]).unwrap_or("").trim().to_string();
        let game_id = get("game_id");
        let turn_index: usize = get("turn")
            .parse()
            .map_err(|_| Error::data(format!("annotation row {line}: bad turn index")))?;
        if !seen.insert((game_id.clone(), turn_index)) {
            return Err(Error::data(format!(
                "duplicate annotation for ({game_id}, {turn_index})"
            )));
        }
        let is_icr = match get("is_icr").as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::data(format!(
                    "annotation row {line}: bad is_icr value `{other}`"
                )))
            }
        };
        let mut mentioned = BTreeSet::new();
        for tok in get("cliparts")
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
        {
            let idx: u8 = tok
                .parse()
                .map_err(|_| Error::data(format!("annotation row {line}: bad clipart `{tok}`")))?;
            mentioned.insert(ClipartId::new(idx)?);
        }
        let mut ambiguity = BTreeSet::new();
        for tag in get("ambiguity_classes")
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
        {
            if tag != GENERAL_AMBIGUITY && !known_groups.contains(tag) {
                return Err(Error::data(format!(
                    "annotation row {line}: unknown ambiguity class `{tag}`"
                )));
            }
            ambiguity.insert(tag.to_string());
        }
        let concrete = ambiguity.iter().any(|t| t != GENERAL_AMBIGUITY);
        let has_unresolved_reference = is_icr && mentioned.is_empty() && !concrete;
        rows.push(IcrAnnotation {
            game_id,
            turn_index,
            is_icr,
            mentioned_cliparts: mentioned,
            ambiguity_classes: ambiguity,
            has_unresolved_reference,
        });
    }
    rows.sort_by(|a, b| (&a.game_id, a.turn_index).cmp(&(&b.game_id, b.turn_index)));
    Ok(rows)
}

/// Expand an annotation's ambiguity classes over a gallery and union the
/// result with the explicitly mentioned cliparts.
///
/// Concrete classes map to every gallery member of that class; the general
/// class contributes nothing.
pub fn expand_ambiguity_labels(
    annotation: &IcrAnnotation,
    gallery: &[ClipartId],
) -> Result<BTreeSet<ClipartId>> {
    let gallery_set: BTreeSet<ClipartId> = gallery.iter().copied().collect();
    for id in &annotation.mentioned_cliparts {
        if !gallery_set.contains(id) {
            return Err(Error::data(format!(
                "annotation ({}, {}) mentions clipart {id} outside the gallery",
                annotation.game_id, annotation.turn_index
            )));
        }
    }
    let mut out = annotation.mentioned_cliparts.clone();
    for tag in &annotation.ambiguity_classes {
        if tag == GENERAL_AMBIGUITY {
            continue;
        }
        let members = inventory()
            .group_members(tag)
            .ok_or_else(|| Error::data(format!("unknown ambiguity class `{tag}`")))?;
        out.extend(members.into_iter().filter(|id| gallery_set.contains(id)));
    }
    Ok(out)
}

/// One utterance pair of a turn: instruction giver then follower.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtterancePair {
    pub teller: String,
    pub drawer: String,
}

/// One decision point with everything the models and the evaluation need.
#[derive(Debug, Clone, PartialEq)]
pub struct GameStateInput {
    pub game_id: String,
    pub split: Split,
    pub turn_index: usize,
    /// Utterances of turns `0..=turn_index`.
    pub history: Vec<UtterancePair>,
    pub gallery_before: Gallery,
    pub gallery_after: Gallery,
    pub scene_before_missing: bool,
    pub scene_after_missing: bool,
    pub actions: ActionLabels,
    pub turn_is_icr: bool,
    /// Per-clipart iCR targets in gallery order. `None` for turns without
    /// resolvable object references (non-iCR turns, or iCRs whose annotation
    /// provides no cliparts).
    pub clipart_icr: Option<Vec<bool>>,
}

impl GameStateInput {
    pub fn validate(&self) -> Result<()> {
        if !self.gallery_before.same_ids(&self.gallery_after) {
            return Err(Error::data("gallery id set changed within a turn"));
        }
        let rederived = derive_actions(&self.gallery_before, &self.gallery_after)?;
        if rederived != self.actions {
            return Err(Error::data(
                "stored action labels disagree with the gallery diff",
            ));
        }
        if let Some(flags) = &self.clipart_icr {
            if flags.len() != GALLERY_SIZE {
                return Err(Error::data("clipart_icr must have 28 entries"));
            }
        }
        Ok(())
    }
}

/// Build one record per decision point.
///
/// For [`Task::When`] every turn of every game yields a record. For
/// [`Task::What`] only iCR turns with resolved object references are kept.
pub fn build_turn_records(
    games: &[GameRecord],
    annotations: &[IcrAnnotation],
    task: Task,
) -> Result<Vec<GameStateInput>> {
    let mut by_game: BTreeMap<&str, Vec<&IcrAnnotation>> = BTreeMap::new();
    for ann in annotations {
        by_game.entry(ann.game_id.as_str()).or_default().push(ann);
    }
    let game_ids: BTreeSet<&str> = games.iter().map(|g| g.game_id.as_str()).collect();
    for ann in annotations {
        if !game_ids.contains(ann.game_id.as_str()) {
            return Err(Error::data(format!(
                "annotation references unknown game `{}`",
                ann.game_id
            )));
        }
    }

    let mut records = Vec::new();
    for game in games {
        let anns: BTreeMap<usize, &IcrAnnotation> = by_game
            .get(game.game_id.as_str())
            .map(|v| v.iter().map(|a| (a.turn_index, *a)).collect())
            .unwrap_or_default();
        for (&turn, ann) in &anns {
            if turn >= game.turns.len() {
                return Err(Error::data(format!(
                    "annotation ({}, {turn}) references a turn beyond the game's {} turns",
                    ann.game_id,
                    game.turns.len()
                )));
            }
        }

        // Gallery state after each turn; missing scene strings carry the
        // adjacent state forward so no spurious deletions are derived.
        let empty = Gallery::empty(&game.gallery)?;
        let mut states: Vec<(Gallery, bool)> = Vec::with_capacity(game.turns.len());
        for (t, raw) in game.turns.iter().enumerate() {
            let prev = if t == 0 { &empty } else { &states[t - 1].0 };
            match &raw.scene_after {
                Some(s) => {
                    let gallery = parse_scene_string(s, &game.gallery).map_err(|e| {
                        Error::data(format!("game `{}` turn {t}: {e}", game.game_id))
                    })?;
                    states.push((gallery, false));
                }
                None => states.push((prev.clone(), true)),
            }
        }

        let mut history: Vec<UtterancePair> = Vec::new();
        for (t, raw) in game.turns.iter().enumerate() {
            history.push(UtterancePair {
                teller: raw.teller.clone(),
                drawer: raw.drawer.clone(),
            });
            let before = if t == 0 {
                (empty.clone(), false)
            } else {
                states[t - 1].clone()
            };
            let after = states[t].clone();
            let actions = derive_actions(&before.0, &after.0)?;
            let ann = anns.get(&t);
            let turn_is_icr = ann.map(|a| a.is_icr).unwrap_or(false);
            let clipart_icr = match ann {
                Some(a) if a.is_icr && !a.has_unresolved_reference => {
                    let positives = expand_ambiguity_labels(a, &game.gallery)?;
                    let flags = before
                        .0
                        .cliparts()
                        .iter()
                        .map(|c| positives.contains(&c.id))
                        .collect::<Vec<bool>>();
                    Some(flags)
                }
                _ => None,
            };
            if task == Task::What && !(turn_is_icr && clipart_icr.is_some()) {
                continue;
            }
            records.push(GameStateInput {
                game_id: game.game_id.clone(),
                split: game.split,
                turn_index: t,
                history: history.clone(),
                gallery_before: before.0,
                gallery_after: after.0,
                scene_before_missing: before.1,
                scene_after_missing: after.1,
                actions,
                turn_is_icr,
                clipart_icr,
            });
        }
    }
    Ok(records)
}

/// Positive-label percentages per split, shaped like the dataset statistics
/// table: turn-level iCR rate, clipart-level iCR rate, and the five action
/// rates, all rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatRow {
    pub when: f64,
    pub what: f64,
    pub any: f64,
    pub add_delete: f64,
    pub moved: f64,
    pub flipped: f64,
    pub resized: f64,
    pub mean_actions_per_turn: f64,
    pub std_actions_per_turn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStatistics {
    pub rows: BTreeMap<Split, StatRow>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Compute the per-split statistics table from both record sets.
///
/// Pure function of its inputs: two runs over the same records agree
/// bit-exactly.
pub fn dataset_statistics(
    when_records: &[GameStateInput],
    what_records: &[GameStateInput],
) -> DatasetStatistics {
    let mut rows = BTreeMap::new();
    for split in Split::ALL {
        let when: Vec<&GameStateInput> =
            when_records.iter().filter(|r| r.split == split).collect();
        let what: Vec<&GameStateInput> =
            what_records.iter().filter(|r| r.split == split).collect();
        let turns = when.len();
        let icr_turns = when.iter().filter(|r| r.turn_is_icr).count();
        let when_rate = if turns == 0 {
            0.0
        } else {
            100.0 * icr_turns as f64 / turns as f64
        };
        let what_pos: usize = what
            .iter()
            .filter_map(|r| r.clipart_icr.as_ref())
            .map(|f| f.iter().filter(|&&b| b).count())
            .sum();
        let what_rate = if what.is_empty() {
            0.0
        } else {
            100.0 * what_pos as f64 / (what.len() * GALLERY_SIZE) as f64
        };
        let labels: Vec<&ActionLabels> = when.iter().map(|r| &r.actions).collect();
        let rates = crate::action_labeler::action_statistics(labels.into_iter());
        rows.insert(
            split,
            StatRow {
                when: round2(when_rate),
                what: round2(what_rate),
                any: round2(rates.any),
                add_delete: round2(rates.add_delete),
                moved: round2(rates.moved),
                flipped: round2(rates.flipped),
                resized: round2(rates.resized),
                mean_actions_per_turn: rates.mean_actions_per_turn,
                std_actions_per_turn: rates.std_actions_per_turn,
            },
        );
    }
    DatasetStatistics { rows }
}

impl DatasetStatistics {
    /// Fixed-layout CSV, identical across runs on identical records.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,when,what,any,add/del,move,flip,resize\n");
        for (split, r) in &self.rows {
            out.push_str(&format!(
                "{split},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
                r.when, r.what, r.any, r.add_delete, r.moved, r.flipped, r.resized
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Canonical record files
// ---------------------------------------------------------------------------

fn bits_to_string(bits: impl Iterator<Item = bool>) -> String {
    bits.map(|b| if b { '1' } else { '0' }).collect()
}

fn string_to_bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::data(format!("bad bit char `{c}`"))),
        })
        .collect()
}

/// Write records to the canonical CSV layout (one row per decision point).
pub fn write_records(path: impl AsRef<Path>, records: &[GameStateInput]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    w.write_record([
        "schema",
        "game_id",
        "split",
        "turn_index",
        "gallery_ids",
        "scene_before",
        "scene_after",
        "scene_before_missing",
        "scene_after_missing",
        "is_icr",
        "clipart_icr",
        "act_add_del",
        "act_move",
        "act_flip",
        "act_resize",
        "act_any",
        "dialogue_json",
    ])
    .map_err(|e| Error::data(e.to_string()))?;
    for r in records {
        let gallery_ids = r
            .gallery_before
            .ids()
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join("|");
        let rows = r.actions.rows();
        w.write_record([
            RECORD_SCHEMA,
            &r.game_id,
            &r.split.to_string(),
            &r.turn_index.to_string(),
            &gallery_ids,
            &serialize_scene_string(&r.gallery_before),
            &serialize_scene_string(&r.gallery_after),
            &(r.scene_before_missing as u8).to_string(),
            &(r.scene_after_missing as u8).to_string(),
            &(r.turn_is_icr as u8).to_string(),
            &r.clipart_icr
                .as_ref()
                .map(|f| bits_to_string(f.iter().copied()))
                .unwrap_or_default(),
            &bits_to_string(rows.iter().map(|a| a.add_delete)),
            &bits_to_string(rows.iter().map(|a| a.moved)),
            &bits_to_string(rows.iter().map(|a| a.flipped)),
            &bits_to_string(rows.iter().map(|a| a.resized)),
            &bits_to_string(rows.iter().map(|a| a.acted_upon)),
            &serde_json::to_string(&r.history)?,
        ])
        .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read records back from the canonical CSV layout.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GameStateInput>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("record row {line}: {e}")))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        if field(0) != RECORD_SCHEMA {
            return Err(Error::data(format!(
                "record row {line}: schema `{}` does not match `{RECORD_SCHEMA}`",
                field(0)
            )));
        }
        let gallery_ids: Vec<ClipartId> = field(4)
            .split('|')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<u8>()
                    .map_err(|_| Error::data(format!("bad gallery id `{t}`")))
                    .and_then(ClipartId::new)
            })
            .collect::<Result<_>>()?;
        let gallery_before = parse_scene_string(field(5), &gallery_ids)?;
        let gallery_after = parse_scene_string(field(6), &gallery_ids)?;
        let bits = |i: usize| string_to_bits(field(i));
        let add_delete = bits(11)?;
        let moved = bits(12)?;
        let flipped = bits(13)?;
        let resized = bits(14)?;
        let acted = bits(15)?;
        let rows = (0..GALLERY_SIZE)
            .map(|i| ActionRow {
                add_delete: add_delete[i],
                moved: moved[i],
                flipped: flipped[i],
                resized: resized[i],
                acted_upon: acted[i],
            })
            .collect::<Vec<_>>();
        let clipart_icr = if field(10).is_empty() {
            None
        } else {
            Some(string_to_bits(field(10))?)
        };
        out.push(GameStateInput {
            game_id: field(1).to_string(),
            split: field(2).parse()?,
            turn_index: field(3)
                .parse()
                .map_err(|_| Error::data("bad turn index"))?,
            history: serde_json::from_str(field(16))?,
            gallery_before,
            gallery_after,
            scene_before_missing: field(7) == "1",
            scene_after_missing: field(8) == "1",
            actions: ActionLabels::new(rows)?,
            turn_is_icr: field(9) == "1",
            clipart_icr,
        });
    }
    Ok(out)
}

/// Per-action rates for one split, used by reports.
pub fn split_action_rate(records: &[GameStateInput], kind: ActionKind) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let pos: usize = records.iter().map(|r| r.actions.count(kind)).sum();
    100.0 * pos as f64 / (records.len() * GALLERY_SIZE) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn fixture_corpus_loads_with_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, annotation) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        assert_eq!(games.len(), 7);
        let g = games.iter().find(|g| g.game_id == "train_0001").unwrap();
        assert_eq!(g.turns.len(), 3);
        assert_eq!(g.split, Split::Train);
        assert!(!g.gallery_derived);
        assert_eq!(g.gallery.len(), GALLERY_SIZE);

        let anns = load_icr_annotation(&annotation).unwrap();
        assert!(anns.iter().any(|a| !a.ambiguity_classes.is_empty()));
    }

    #[test]
    fn empty_dataset_yields_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        fs::write(&path, "{}").unwrap();
        assert!(load_dialogues(&path).unwrap().is_empty());
        fs::write(&path, "{\"data\": {}}").unwrap();
        assert!(load_dialogues(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_game_reports_game_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"train_0009\": {\"no_dialog\": []}}").unwrap();
        let err = load_dialogues(&path).unwrap_err();
        assert!(err.to_string().contains("train_0009"));
    }

    #[test]
    fn annotation_header_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tsv");
        fs::write(&path, "game_id\tturn\ticr\n").unwrap();
        let err = load_icr_annotation(&path).unwrap_err();
        assert!(err.to_string().contains("header mismatch"));
    }

    #[test]
    fn duplicate_annotation_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tsv");
        fs::write(
            &path,
            "game_id\tturn\tis_icr\tcliparts\tambiguity_classes\n\
             train_0001\t1\t1\t0\t\n\
             train_0001\t1\t1\t2\t\n",
        )
        .unwrap();
        assert!(load_icr_annotation(&path).is_err());
    }

    #[test]
    fn all_negative_annotation_has_no_icr() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tsv");
        fs::write(
            &path,
            "game_id\tturn\tis_icr\tcliparts\tambiguity_classes\n\
             train_0001\t0\t0\t\t\n\
             train_0001\t1\t0\t\t\n",
        )
        .unwrap();
        let anns = load_icr_annotation(&path).unwrap();
        assert!(anns.iter().all(|a| !a.is_icr));
    }

    #[test]
    fn unknown_ambiguity_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tsv");
        fs::write(
            &path,
            "game_id\tturn\tis_icr\tcliparts\tambiguity_classes\n\
             train_0001\t0\t1\t\tmystery_group\n",
        )
        .unwrap();
        assert!(load_icr_annotation(&path).is_err());
    }

    #[test]
    fn ambiguity_expansion_follows_the_group_table() {
        let gallery: Vec<ClipartId> = [48u8, 49, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13,
            14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25]
            .iter()
            .map(|&i| ClipartId::new(i).unwrap())
            .collect();
        let mut ann = IcrAnnotation {
            game_id: "train_0001".into(),
            turn_index: 0,
            is_icr: true,
            mentioned_cliparts: BTreeSet::new(),
            ambiguity_classes: ["hat_group".to_string()].into_iter().collect(),
            has_unresolved_reference: false,
        };
        // two hats (48, 49) in the gallery -> both positive
        let expanded = expand_ambiguity_labels(&ann, &gallery).unwrap();
        assert_eq!(
            expanded.iter().map(|id| id.raw()).collect::<Vec<_>>(),
            vec![48, 49]
        );
        // the general class alone contributes nothing
        ann.ambiguity_classes = [GENERAL_AMBIGUITY.to_string()].into_iter().collect();
        assert!(expand_ambiguity_labels(&ann, &gallery).unwrap().is_empty());
        // plain mention passes through
        ann.ambiguity_classes.clear();
        ann.mentioned_cliparts = [ClipartId::new(7).unwrap()].into_iter().collect();
        let expanded = expand_ambiguity_labels(&ann, &gallery).unwrap();
        assert_eq!(expanded.len(), 1);
        assert!(expanded.contains(&ClipartId::new(7).unwrap()));
    }

    #[test]
    fn what_records_keep_only_resolved_icr_turns() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, annotation) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        let anns = load_icr_annotation(&annotation).unwrap();
        let when = build_turn_records(&games, &anns, Task::When).unwrap();
        let what = build_turn_records(&games, &anns, Task::What).unwrap();
        assert!(what.len() < when.len());
        assert!(what.iter().all(|r| r.turn_is_icr && r.clipart_icr.is_some()));
        // general-only iCR stays positive for when but is excluded from what
        let general_turn = when
            .iter()
            .find(|r| r.game_id == "train_0003" && r.turn_index == 2)
            .unwrap();
        assert!(general_turn.turn_is_icr);
        assert!(general_turn.clipart_icr.is_none());
        assert!(!what
            .iter()
            .any(|r| r.game_id == "train_0003" && r.turn_index == 2));
        for r in when.iter().chain(&what) {
            r.validate().unwrap();
        }
    }

    #[test]
    fn when_records_enumerate_every_turn_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, annotation) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        let anns = load_icr_annotation(&annotation).unwrap();
        let when = build_turn_records(&games, &anns, Task::When).unwrap();
        let total_turns: usize = games.iter().map(|g| g.turns.len()).sum();
        assert_eq!(when.len(), total_turns);
        let train1: Vec<usize> = when
            .iter()
            .filter(|r| r.game_id == "train_0001")
            .map(|r| r.turn_index)
            .collect();
        assert_eq!(train1, vec![0, 1, 2]);
    }

    #[test]
    fn annotation_for_missing_turn_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, annotation) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        let mut anns = load_icr_annotation(&annotation).unwrap();
        anns.push(IcrAnnotation {
            game_id: "train_0001".into(),
            turn_index: 99,
            is_icr: true,
            mentioned_cliparts: BTreeSet::new(),
            ambiguity_classes: BTreeSet::new(),
            has_unresolved_reference: true,
        });
        assert!(build_turn_records(&games, &anns, Task::When).is_err());
    }

    #[test]
    fn missing_scene_string_carries_state_forward() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, annotation) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        let anns = load_icr_annotation(&annotation).unwrap();
        let when = build_turn_records(&games, &anns, Task::When).unwrap();
        // train_0002 has a missing scene at turn 1: no actions derived there
        let r = when
            .iter()
            .find(|r| r.game_id == "train_0002" && r.turn_index == 1)
            .unwrap();
        assert!(r.scene_after_missing);
        assert_eq!(r.actions, ActionLabels::all_negative());
        assert_eq!(r.gallery_before, r.gallery_after);
        // and the following turn diffs against the carried state
        let r2 = when
            .iter()
            .find(|r| r.game_id == "train_0002" && r.turn_index == 2)
            .unwrap();
        assert!(r2.actions.rows().iter().any(|a| a.acted_upon));
    }

    #[test]
    fn statistics_are_deterministic_and_zero_on_all_negative() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, annotation) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        let anns = load_icr_annotation(&annotation).unwrap();
        let when = build_turn_records(&games, &anns, Task::When).unwrap();
        let what = build_turn_records(&games, &anns, Task::What).unwrap();
        let a = dataset_statistics(&when, &what);
        let b = dataset_statistics(&when, &what);
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());

        let none = dataset_statistics(&[], &[]);
        for row in none.rows.values() {
            assert_eq!(row.when, 0.0);
            assert_eq!(row.any, 0.0);
        }
    }

    #[test]
    fn record_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, annotation) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        let anns = load_icr_annotation(&annotation).unwrap();
        let when = build_turn_records(&games, &anns, Task::When).unwrap();
        let path = dir.path().join("records.csv");
        write_records(&path, &when).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(when, back);
        // byte-identical on rewrite
        let first = fs::read(&path).unwrap();
        write_records(&path, &back).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn split_disjointness_holds_on_the_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, _) = fixtures::write_fixture_corpus(dir.path()).unwrap();
        let games = load_dialogues(&dataset).unwrap();
        let mut seen = BTreeMap::new();
        for g in &games {
            if let Some(prev) = seen.insert(g.game_id.clone(), g.split) {
                assert_eq!(prev, g.split);
            }
        }
    }
}
