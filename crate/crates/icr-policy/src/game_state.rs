//! Symbolic representation of cliparts, galleries and scenes.
//!
//! A scene string is the canvas serialization used by the CoDraw release:
//! a comma-separated list starting with the number of placed cliparts,
//! followed by eight tokens per clipart:
//!
//! ```text
//! N, [png_name, local_idx, obj_idx, type_idx, x, y, z, flip] * N
//! ```
//!
//! `obj_idx` indexes the 58-clipart inventory, `z` in {0,1,2} is the depth
//! (and thereby size) category with scale factor 0.7^z, and `flip` in {0,1}
//! is the horizontal orientation. Person cliparts carry their pose and
//! facial expression in the png name (`hb{face}_{pose}s.png`). The canvas is
//! 500x400 units with y growing downward.
//!
//! Every clipart state exposes exactly six categorical feature slots
//! (identity, orientation, presence, size, face, pose) and five positional
//! numbers (x, y, area, width, height). Cliparts absent from the scene have
//! all features except pose and face at the special category 0 and a zero
//! positional vector.

pub mod inventory;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{CANVAS_HEIGHT, CANVAS_WIDTH, GALLERY_SIZE, INVENTORY_SIZE};
use inventory::{inventory, NUM_FACES, NUM_POSES};

/// Size-category scale factor per depth step.
pub const SIZE_SCALE_STEP: f32 = 0.7;

/// Pose index used for non-person cliparts and absent persons.
pub const POSE_NA: u8 = NUM_POSES;

/// Face index used for non-person cliparts and absent persons.
pub const FACE_NA: u8 = NUM_FACES;

/// Identifier of one of the 58 inventory classes.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClipartId(u8);

impl ClipartId {
    pub fn new(idx: u8) -> Result<Self> {
        if (idx as usize) < INVENTORY_SIZE {
            Ok(ClipartId(idx))
        } else {
            Err(Error::data(format!(
                "clipart index {idx} outside the {INVENTORY_SIZE}-clipart inventory"
            )))
        }
    }

    pub(crate) fn new_unchecked(idx: u8) -> Self {
        debug_assert!((idx as usize) < INVENTORY_SIZE);
        ClipartId(idx)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn raw(self) -> u8 {
        self.0
    }

    pub fn is_person(self) -> bool {
        inventory().get(self).is_person()
    }
}

impl std::fmt::Display for ClipartId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Symbolic attributes of one gallery object at one turn.
///
/// `size` is 0 (absent special category) or 1..=3 (scales 1.0, 0.7, 0.49);
/// `orientation` is 0 (absent) or 1..=2 (unflipped / flipped); `pose` and
/// `face` stay at their live class while the clipart is placed and fall back
/// to the not-applicable class otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipartState {
    pub id: ClipartId,
    pub present: bool,
    pub size: u8,
    pub orientation: u8,
    pub pose: u8,
    pub face: u8,
    pub x: f32,
    pub y: f32,
}

/// Bounding box of a placed clipart, in canvas units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_center: f32,
    pub y_center: f32,
    pub width: f32,
    pub height: f32,
    pub area: f32,
}

impl ClipartState {
    /// Canonical state of a clipart that is not placed in the scene.
    pub fn absent(id: ClipartId) -> Self {
        ClipartState {
            id,
            present: false,
            size: 0,
            orientation: 0,
            pose: POSE_NA,
            face: FACE_NA,
            x: 0.0,
            y: 0.0,
        }
    }

    pub fn placed(id: ClipartId, size: u8, orientation: u8, x: f32, y: f32) -> Result<Self> {
        let state = ClipartState {
            id,
            present: true,
            size,
            orientation,
            pose: POSE_NA,
            face: FACE_NA,
            x,
            y,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn placed_person(
        id: ClipartId,
        size: u8,
        orientation: u8,
        pose: u8,
        face: u8,
        x: f32,
        y: f32,
    ) -> Result<Self> {
        let state = ClipartState {
            id,
            present: true,
            size,
            orientation,
            pose,
            face,
            x,
            y,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::data(format!("clipart {}: {msg}", self.id)));
        if self.present {
            if !(1..=3).contains(&self.size) {
                return fail(format!("placed clipart has size category {}", self.size));
            }
            if !(1..=2).contains(&self.orientation) {
                return fail(format!("placed clipart has orientation {}", self.orientation));
            }
        } else {
            if self.size != 0 || self.orientation != 0 || self.x != 0.0 || self.y != 0.0 {
                return fail("absent clipart must keep special category 0 features".into());
            }
        }
        if self.id.is_person() {
            if self.present && (self.pose >= NUM_POSES || self.face >= NUM_FACES) {
                return fail(format!(
                    "placed person needs live pose/face, got ({}, {})",
                    self.pose, self.face
                ));
            }
            if !self.present && (self.pose != POSE_NA || self.face != FACE_NA) {
                return fail("absent person must carry the not-applicable pose/face".into());
            }
        } else if self.pose != POSE_NA || self.face != FACE_NA {
            return fail("non-person clipart must carry the not-applicable pose/face".into());
        }
        Ok(())
    }

    /// The five positional numbers (x, y, area, width, height), normalised to
    /// the unit canvas. Zero vector for absent cliparts.
    pub fn position_features(&self) -> [f32; 5] {
        if !self.present {
            return [0.0; 5];
        }
        let b = compute_bounding_box(self).expect("present clipart has a box");
        [
            b.x_center / CANVAS_WIDTH,
            b.y_center / CANVAS_HEIGHT,
            b.area / (CANVAS_WIDTH * CANVAS_HEIGHT),
            b.width / CANVAS_WIDTH,
            b.height / CANVAS_HEIGHT,
        ]
    }
}

/// Width/height scale factor for a live size category (1..=3).
pub fn size_scale(size: u8) -> f32 {
    SIZE_SCALE_STEP.powi(size as i32 - 1)
}

/// Bounding box of a placed clipart. Errors on absent cliparts.
pub fn compute_bounding_box(clipart: &ClipartState) -> Result<BoundingBox> {
    if !clipart.present {
        return Err(Error::data(format!(
            "clipart {} is absent and has no bounding box",
            clipart.id
        )));
    }
    let class = inventory().get(clipart.id);
    let scale = size_scale(clipart.size);
    let width = class.base_width * scale;
    let height = class.base_height * scale;
    Ok(BoundingBox {
        x_center: clipart.x,
        y_center: clipart.y,
        width,
        height,
        area: width * height,
    })
}

/// Collapse a raw (inventory index, subtype) pair into the collapsed class
/// plus pose/face features. Non-person cliparts must carry subtype 0 and map
/// to the not-applicable classes.
pub fn collapse_person_classes(raw_idx: u8, subtype: u8) -> Result<(ClipartId, u8, u8)> {
    let id = ClipartId::new(raw_idx)?;
    if id.is_person() {
        if subtype >= NUM_POSES * NUM_FACES {
            return Err(Error::data(format!(
                "person subtype {subtype} outside the {} variants",
                NUM_POSES * NUM_FACES
            )));
        }
        Ok((id, subtype % NUM_POSES, subtype / NUM_POSES))
    } else {
        if subtype != 0 {
            return Err(Error::data(format!(
                "non-person clipart {raw_idx} cannot carry subtype {subtype}"
            )));
        }
        Ok((id, POSE_NA, FACE_NA))
    }
}

/// The instruction follower's set of 28 cliparts with their current state.
///
/// Cliparts are kept sorted by id, which fixes the row order used by the
/// models and the label files across all turns of a game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    cliparts: Vec<ClipartState>,
}

impl Gallery {
    pub fn new(mut cliparts: Vec<ClipartState>) -> Result<Self> {
        if cliparts.len() != GALLERY_SIZE {
            return Err(Error::data(format!(
                "gallery has {} cliparts, expected {GALLERY_SIZE}",
                cliparts.len()
            )));
        }
        cliparts.sort_by_key(|c| c.id);
        for pair in cliparts.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::data(format!(
                    "duplicate clipart {} in gallery",
                    pair[0].id
                )));
            }
        }
        for c in &cliparts {
            c.validate()?;
        }
        Ok(Gallery { cliparts })
    }

    /// Gallery with every clipart absent.
    pub fn empty(ids: &[ClipartId]) -> Result<Self> {
        Gallery::new(ids.iter().map(|&id| ClipartState::absent(id)).collect())
    }

    pub fn cliparts(&self) -> &[ClipartState] {
        &self.cliparts
    }

    pub fn ids(&self) -> Vec<ClipartId> {
        self.cliparts.iter().map(|c| c.id).collect()
    }

    pub fn get(&self, id: ClipartId) -> Option<&ClipartState> {
        self.cliparts
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.cliparts[i])
    }

    /// Row index of a clipart in the canonical ordering.
    pub fn row_of(&self, id: ClipartId) -> Option<usize> {
        self.cliparts.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn same_ids(&self, other: &Gallery) -> bool {
        self.cliparts.len() == other.cliparts.len()
            && self
                .cliparts
                .iter()
                .zip(&other.cliparts)
                .all(|(a, b)| a.id == b.id)
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, offset: usize, what: &str) -> Result<T> {
    tok.trim().parse().map_err(|_| Error::SceneParse {
        offset,
        message: format!("cannot parse {what} from `{tok}`"),
    })
}

/// Extract the person subtype from a png name like `hb2_4s.png`.
fn person_subtype_from_png(png: &str, offset: usize) -> Result<u8> {
    let stem = png
        .strip_suffix("s.png")
        .ok_or_else(|| Error::SceneParse {
            offset,
            message: format!("png name `{png}` lacks the `s.png` suffix"),
        })?;
    let rest = &stem[2..]; // after hb / hg
    let (face, pose) = rest.split_once('_').ok_or_else(|| Error::SceneParse {
        offset,
        message: format!("person png `{png}` lacks the face_pose infix"),
    })?;
    let face: u8 = parse_num(face, offset, "face")?;
    let pose: u8 = parse_num(pose, offset, "pose")?;
    if pose >= NUM_POSES || face >= NUM_FACES {
        return Err(Error::SceneParse {
            offset,
            message: format!("person png `{png}` outside pose/face ranges"),
        });
    }
    Ok(face * NUM_POSES + pose)
}

/// Parse a scene string into a full gallery state over `gallery_ids`.
///
/// An empty or whitespace-only string is the empty scene: every clipart
/// absent with its features at the special category 0.
pub fn parse_scene_string(raw: &str, gallery_ids: &[ClipartId]) -> Result<Gallery> {
    if raw.trim().is_empty() {
        return Gallery::empty(gallery_ids);
    }
    let tokens: Vec<&str> = raw.split(',').collect();
    let n: usize = parse_num(tokens[0], 0, "clipart count")?;
    if tokens.len() < 1 + 8 * n {
        return Err(Error::SceneParse {
            offset: tokens.len(),
            message: format!("scene string declares {n} cliparts but has {} tokens", tokens.len()),
        });
    }
    let mut states: Vec<ClipartState> =
        gallery_ids.iter().map(|&id| ClipartState::absent(id)).collect();
    states.sort_by_key(|c| c.id);
    for i in 0..n {
        let base = 1 + 8 * i;
        let png = tokens[base].trim();
        let raw_idx: u8 = parse_num(tokens[base + 2], base + 2, "object index")?;
        let x: f32 = parse_num(tokens[base + 4], base + 4, "x coordinate")?;
        let y: f32 = parse_num(tokens[base + 5], base + 5, "y coordinate")?;
        let z: u8 = parse_num(tokens[base + 6], base + 6, "depth")?;
        let flip: u8 = parse_num(tokens[base + 7], base + 7, "flip")?;
        if z > 2 {
            return Err(Error::SceneParse {
                offset: base + 6,
                message: format!("depth {z} outside 0..=2"),
            });
        }
        if flip > 1 {
            return Err(Error::SceneParse {
                offset: base + 7,
                message: format!("flip {flip} outside 0..=1"),
            });
        }
        let id = ClipartId::new(raw_idx).map_err(|e| Error::SceneParse {
            offset: base + 2,
            message: e.to_string(),
        })?;
        let subtype = if id.is_person() {
            person_subtype_from_png(png, base)?
        } else {
            0
        };
        let (id, pose, face) = collapse_person_classes(raw_idx, subtype)?;
        let row = states
            .binary_search_by_key(&id, |c| c.id)
            .map_err(|_| Error::SceneParse {
                offset: base + 2,
                message: format!("clipart {id} is not part of this game's gallery"),
            })?;
        if states[row].present {
            return Err(Error::SceneParse {
                offset: base + 2,
                message: format!("clipart {id} appears twice in the scene string"),
            });
        }
        states[row] = ClipartState {
            id,
            present: true,
            size: z + 1,
            orientation: flip + 1,
            pose,
            face,
            x,
            y,
        };
    }
    Gallery::new(states)
}

/// Serialize a gallery's placed cliparts back into the scene-string grammar.
pub fn serialize_scene_string(gallery: &Gallery) -> String {
    let inv = inventory();
    let placed: Vec<&ClipartState> = gallery.cliparts().iter().filter(|c| c.present).collect();
    let mut out = format!("{}", placed.len());
    for (local, c) in placed.iter().enumerate() {
        let class = inv.get(c.id);
        let png = class.png_name(c.pose, c.face);
        out.push_str(&format!(
            ",{png},{local},{},{},{},{},{},{}",
            c.id.raw(),
            class.category.index(),
            c.x,
            c.y,
            c.size - 1,
            c.orientation - 1,
        ));
    }
    out
}
