//! Deterministic fixture and synthetic corpora.
//!
//! The fixture corpus is a hand-built set of seven mini games covering the
//! edge cases the loaders and labelers must handle: missing scene strings,
//! empty follower utterances, ambiguity-class iCRs, general-only iCRs and
//! every action type. The synthetic generator produces larger seeded
//! corpora with learnable action/iCR structure for training smoke tests.
//! Everything here runs without downloads.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::corpus::{GameRecord, IcrAnnotation, RawTurn, Split};
use crate::error::{Error, Result};
use crate::game_state::{
    inventory::inventory, serialize_scene_string, ClipartId, ClipartState, Gallery,
};
use crate::{GALLERY_SIZE, INVENTORY_SIZE};

/// A clipart placement used to compose fixture scenes.
#[derive(Clone, Copy)]
struct Placed {
    idx: u8,
    size: u8,
    orientation: u8,
    pose: u8,
    face: u8,
    x: f32,
    y: f32,
}

impl Placed {
    fn new(idx: u8, size: u8, orientation: u8, x: f32, y: f32) -> Self {
        Placed {
            idx,
            size,
            orientation,
            pose: 0,
            face: 0,
            x,
            y,
        }
    }

    fn person(idx: u8, size: u8, orientation: u8, pose: u8, face: u8, x: f32, y: f32) -> Self {
        Placed {
            idx,
            size,
            orientation,
            pose,
            face,
            x,
            y,
        }
    }
}

fn gallery_states(ids: &[u8], placed: &[Placed]) -> Gallery {
    let mut states: Vec<ClipartState> = ids
        .iter()
        .map(|&i| ClipartState::absent(ClipartId::new(i).expect("fixture id")))
        .collect();
    for p in placed {
        let id = ClipartId::new(p.idx).expect("fixture id");
        let state = if id.is_person() {
            ClipartState::placed_person(id, p.size, p.orientation, p.pose, p.face, p.x, p.y)
        } else {
            ClipartState::placed(id, p.size, p.orientation, p.x, p.y)
        }
        .expect("fixture clipart state");
        let row = states.iter().position(|s| s.id == id).expect("in gallery");
        states[row] = state;
    }
    Gallery::new(states).expect("fixture gallery")
}

fn scene(ids: &[u8], placed: &[Placed]) -> String {
    serialize_scene_string(&gallery_states(ids, placed))
}

const GALLERY_BASIC: [u8; GALLERY_SIZE] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25,
    26, 27,
];

const GALLERY_HATS: [u8; GALLERY_SIZE] = [
    0, 1, 2, 3, 8, 9, 10, 14, 15, 16, 17, 18, 19, 20, 22, 28, 29, 34, 35, 41, 42, 45, 46, 47, 48,
    49, 55, 56,
];

/// Hand-verified statistics table of the fixture corpus, in the layout of
/// [`crate::corpus::DatasetStatistics::to_csv`].
pub const FIXTURE_GOLDEN_STATS: &str = "split,when,what,any,add/del,move,flip,resize\n\
train,30.00,5.36,3.93,2.86,0.36,0.00,0.71\n\
val,20.00,3.57,2.86,2.14,0.00,0.71,0.00\n\
test,33.33,5.36,2.98,1.79,0.60,0.60,0.60\n";

fn fixture_dataset_json() -> serde_json::Value {
    let ga = &GALLERY_BASIC[..];
    let gh = &GALLERY_HATS[..];
    let sun = |x: f32| Placed::new(0, 1, 1, x, 60.0);
    let boy = Placed::person(18, 2, 1, 2, 1, 400.0, 250.0);
    json!({
        "data": {
            "train_0001": {
                "gallery": ga,
                "dialog": [
                    {"msg_t": "place a large sun in the top left corner", "msg_d": "",
                     "abs_d": scene(ga, &[sun(60.0)])},
                    {"msg_t": "now the boy on the right side facing left",
                     "msg_d": "which boy pose do you want?",
                     "abs_d": scene(ga, &[sun(60.0), boy])},
                    {"msg_t": "move the sun a bit to the right", "msg_d": "done",
                     "abs_d": scene(ga, &[sun(120.0), boy])},
                ]
            },
            "train_0002": {
                "gallery": ga,
                "dialog": [
                    {"msg_t": "put a cloud in the sky", "msg_d": "",
                     "abs_d": scene(ga, &[Placed::new(2, 1, 1, 250.0, 50.0)])},
                    // scene string missing for this turn
                    {"msg_t": "add a dog next to it", "msg_d": "ok"},
                    {"msg_t": "shrink the cloud", "msg_d": "done",
                     "abs_d": scene(ga, &[Placed::new(2, 3, 1, 250.0, 50.0),
                                          Placed::new(10, 2, 1, 300.0, 300.0)])},
                ]
            },
            "train_0003": {
                "gallery": gh,
                "dialog": [
                    {"msg_t": "there are two trees on the left", "msg_d": "ok",
                     "abs_d": scene(gh, &[Placed::new(14, 1, 1, 80.0, 200.0),
                                          Placed::new(16, 1, 1, 160.0, 210.0)])},
                    {"msg_t": "put a hat on the boy", "msg_d": "which hat do you mean?",
                     "abs_d": scene(gh, &[Placed::new(14, 1, 1, 80.0, 200.0),
                                          Placed::new(16, 1, 1, 160.0, 210.0),
                                          Placed::new(48, 2, 1, 300.0, 150.0)])},
                    {"msg_t": "hmm actually make it bigger", "msg_d": "sorry, what do you mean?",
                     "abs_d": scene(gh, &[Placed::new(14, 1, 1, 80.0, 200.0),
                                          Placed::new(16, 1, 1, 160.0, 210.0),
                                          Placed::new(48, 1, 1, 300.0, 150.0)])},
                    {"msg_t": "remove the pine tree", "msg_d": "done",
                     "abs_d": scene(gh, &[Placed::new(14, 1, 1, 80.0, 200.0),
                                          Placed::new(48, 1, 1, 300.0, 150.0)])},
                ]
            },
            "val_0001": {
                "gallery": ga,
                "dialog": [
                    {"msg_t": "a girl is standing in the middle", "msg_d": "ok",
                     "abs_d": scene(ga, &[Placed::person(19, 1, 1, 0, 0, 250.0, 220.0)])},
                    {"msg_t": "she is facing the other way", "msg_d": "should she hold the ball?",
                     "abs_d": scene(ga, &[Placed::person(19, 1, 2, 0, 0, 250.0, 220.0)])},
                    {"msg_t": "yes and add a duck", "msg_d": "done",
                     "abs_d": scene(ga, &[Placed::person(19, 1, 2, 0, 0, 250.0, 220.0),
                                          Placed::new(11, 2, 1, 100.0, 320.0)])},
                ]
            },
            "val_0002": {
                "gallery": ga,
                "dialog": [
                    {"msg_t": "draw a tent on the right", "msg_d": "ok",
                     "abs_d": scene(ga, &[Placed::new(24, 1, 1, 400.0, 250.0)])},
                    {"msg_t": "perfect, we are done", "msg_d": "great",
                     "abs_d": scene(ga, &[Placed::new(24, 1, 1, 400.0, 250.0)])},
                ]
            },
            "test_0001": {
                "gallery": ga,
                "dialog": [
                    {"msg_t": "put the girl on the left side", "msg_d": "",
                     "abs_d": scene(ga, &[Placed::person(19, 2, 1, 3, 2, 90.0, 230.0)])},
                    {"msg_t": "flip her and move her up",
                     "msg_d": "do you mean the girl or the boy?",
                     "abs_d": scene(ga, &[Placed::person(19, 2, 2, 3, 2, 90.0, 200.0)])},
                    {"msg_t": "good, now a snake in the grass", "msg_d": "ok",
                     "abs_d": scene(ga, &[Placed::person(19, 2, 2, 3, 2, 90.0, 200.0),
                                          Placed::new(13, 1, 1, 350.0, 330.0)])},
                ]
            },
            "test_0002": {
                "gallery": ga,
                "dialog": [
                    {"msg_t": "a rocket flying in the sky", "msg_d": "ok",
                     "abs_d": scene(ga, &[Placed::new(6, 2, 1, 380.0, 70.0)])},
                    {"msg_t": "make it small", "msg_d": "how small?",
                     "abs_d": scene(ga, &[Placed::new(6, 3, 1, 380.0, 70.0)])},
                    {"msg_t": "that's it", "msg_d": "thanks",
                     "abs_d": scene(ga, &[Placed::new(6, 3, 1, 380.0, 70.0)])},
                ]
            }
        }
    })
}

const FIXTURE_ANNOTATION_TSV: &str = "\
game_id\tturn\tis_icr\tcliparts\tambiguity_classes
train_0001\t0\t0\t\t
train_0001\t1\t1\t18\t
train_0001\t2\t0\t\t
train_0002\t0\t0\t\t
train_0002\t1\t0\t\t
train_0002\t2\t0\t\t
train_0003\t0\t0\t\t
train_0003\t1\t1\t\that_group
train_0003\t2\t1\t\tgeneral
train_0003\t3\t0\t\t
val_0001\t1\t1\t19\t
val_0002\t0\t0\t\t
test_0001\t1\t1\t18,19\t
test_0002\t1\t1\t6\t
";

/// Write the fixture corpus into `dir` and return the dataset and
/// annotation paths.
pub fn write_fixture_corpus(dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dataset = dir.join("codraw_fixture.json");
    let annotation = dir.join("icr_fixture.tsv");
    let json = serde_json::to_string_pretty(&fixture_dataset_json())?;
    fs::write(&dataset, json).map_err(|e| Error::io(&dataset, e))?;
    fs::write(&annotation, FIXTURE_ANNOTATION_TSV).map_err(|e| Error::io(&annotation, e))?;
    Ok((dataset, annotation))
}

/// A generated corpus with games and annotations.
pub struct Synthetic {
    pub games: Vec<GameRecord>,
    pub annotations: Vec<IcrAnnotation>,
}

/// Generate a seeded corpus with learnable structure: cliparts whose index
/// is divisible by 7 are acted upon often, iCR turns mention the acted
/// cliparts, and teller utterances name the touched cliparts.
pub fn synthetic_corpus(games_per_split: [usize; 3], turns_per_game: usize, seed: u64) -> Synthetic {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut games = Vec::new();
    let mut annotations = Vec::new();
    for (split, &count) in Split::ALL.iter().zip(&games_per_split) {
        for g in 0..count {
            let game_id = format!("{split}_{g:05}");
            let mut pool: Vec<u8> = (0..INVENTORY_SIZE as u8).collect();
            // Fisher-Yates over the inventory for the gallery sample.
            for i in (1..pool.len()).rev() {
                let j = rng.random_range(0..=i);
                pool.swap(i, j);
            }
            let mut ids: Vec<u8> = pool[..GALLERY_SIZE].to_vec();
            ids.sort_unstable();
            let gallery: Vec<ClipartId> =
                ids.iter().map(|&i| ClipartId::new_unchecked(i)).collect();

            let mut state: Vec<Option<Placed>> = vec![None; GALLERY_SIZE];
            let mut turns = Vec::new();
            for t in 0..turns_per_game {
                let mut acted: Vec<u8> = Vec::new();
                for (slot, &idx) in ids.iter().enumerate() {
                    let busy = idx % 7 == 0;
                    match &mut state[slot] {
                        None => {
                            let p_add = if busy { 0.45 } else { 0.04 };
                            if rng.random_bool(p_add) {
                                let id = ClipartId::new_unchecked(idx);
                                let (pose, face) = if id.is_person() {
                                    (rng.random_range(0..7u8), rng.random_range(0..5u8))
                                } else {
                                    (0, 0)
                                };
                                state[slot] = Some(Placed {
                                    idx,
                                    size: rng.random_range(1..=3),
                                    orientation: rng.random_range(1..=2),
                                    pose,
                                    face,
                                    x: rng.random_range(30..470) as f32,
                                    y: rng.random_range(30..370) as f32,
                                });
                                acted.push(idx);
                            }
                        }
                        Some(p) => {
                            let mut touched = false;
                            if rng.random_bool(if busy { 0.25 } else { 0.03 }) {
                                p.x = rng.random_range(30..470) as f32;
                                touched = true;
                            }
                            if rng.random_bool(0.04) {
                                p.orientation = 3 - p.orientation;
                                touched = true;
                            }
                            if rng.random_bool(0.05) {
                                p.size = 1 + (p.size % 3);
                                touched = true;
                            }
                            if !touched && busy && rng.random_bool(0.05) {
                                state[slot] = None; // deletion
                                touched = true;
                            }
                            if touched {
                                acted.push(idx);
                            }
                        }
                    }
                }
                let placed: Vec<Placed> = state.iter().flatten().copied().collect();
                let scene_after = if rng.random_bool(0.05) && t > 0 {
                    None
                } else {
                    Some(scene(&ids, &placed))
                };
                let inv = inventory();
                let names: Vec<String> = acted
                    .iter()
                    .map(|&i| inv.get(ClipartId::new_unchecked(i)).name.clone())
                    .collect();
                let teller = if names.is_empty() {
                    "nothing to change this turn".to_string()
                } else {
                    format!("please adjust the {}", names.join(" and the "))
                };
                let is_icr = !acted.is_empty() && rng.random_bool(0.3);
                let drawer = if is_icr {
                    format!("do you mean the {}?", names.first().unwrap())
                } else {
                    "ok".to_string()
                };
                if is_icr {
                    annotations.push(IcrAnnotation {
                        game_id: game_id.clone(),
                        turn_index: t,
                        is_icr: true,
                        mentioned_cliparts: acted
                            .iter()
                            .map(|&i| ClipartId::new_unchecked(i))
                            .collect(),
                        ambiguity_classes: Default::default(),
                        has_unresolved_reference: false,
                    });
                }
                turns.push(RawTurn {
                    teller,
                    drawer,
                    scene_after,
                });
            }
            games.push(GameRecord {
                game_id,
                split: *split,
                gallery,
                gallery_derived: false,
                turns,
            });
        }
    }
    Synthetic { games, annotations }
}
