//! The static 58-clipart inventory.
//!
//! The table is checked in at `data/cliparts_v1.tsv` and embedded into the
//! binary. It pins, for every clipart class: a stable index (0..=57), the
//! asset code used in scene strings, a category, base bounding-box
//! dimensions in canvas units and the ambiguity groups it belongs to.
//! Person classes are collapsed: index 18 is the boy and 19 the girl,
//! regardless of pose or facial expression.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::game_state::ClipartId;
use crate::INVENTORY_SIZE;

/// Raw table contents, embedded verbatim.
pub const INVENTORY_TSV: &str = include_str!("../../data/cliparts_v1.tsv");

/// Schema version of the inventory table.
pub const INVENTORY_VERSION: &str = "cliparts-v1";

/// Clipart index of the boy person class.
pub const BOY_IDX: u8 = 18;

/// Clipart index of the girl person class.
pub const GIRL_IDX: u8 = 19;

/// Number of live pose categories for person cliparts.
pub const NUM_POSES: u8 = 7;

/// Number of live facial-expression categories for person cliparts.
pub const NUM_FACES: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Sky,
    Animal,
    Plant,
    Person,
    Structure,
    Toy,
    Food,
    Wearable,
}

impl Category {
    pub fn index(self) -> u8 {
        match self {
            Category::Sky => 0,
            Category::Animal => 1,
            Category::Plant => 2,
            Category::Person => 3,
            Category::Structure => 4,
            Category::Toy => 5,
            Category::Food => 6,
            Category::Wearable => 7,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sky" => Category::Sky,
            "animal" => Category::Animal,
            "plant" => Category::Plant,
            "person" => Category::Person,
            "structure" => Category::Structure,
            "toy" => Category::Toy,
            "food" => Category::Food,
            "wearable" => Category::Wearable,
            other => return Err(Error::data(format!("unknown clipart category `{other}`"))),
        })
    }
}

/// One inventory entry.
#[derive(Debug, Clone)]
pub struct ClipartClass {
    pub idx: u8,
    /// Asset code; scene-string png names are `{code}_{k}s.png` for
    /// non-person classes and `{code}{face}_{pose}s.png` for persons.
    pub code: String,
    pub name: String,
    pub category: Category,
    pub base_width: f32,
    pub base_height: f32,
    pub groups: Vec<String>,
}

impl ClipartClass {
    pub fn is_person(&self) -> bool {
        self.category == Category::Person
    }

    /// Png file name for this class; persons need their pose and face.
    pub fn png_name(&self, pose: u8, face: u8) -> String {
        if self.is_person() {
            format!("{}{}_{}s.png", self.code, face, pose)
        } else {
            format!("{}s.png", self.code)
        }
    }
}

pub struct Inventory {
    classes: Vec<ClipartClass>,
    by_code: BTreeMap<String, u8>,
    groups: BTreeMap<String, Vec<u8>>,
}

impl Inventory {
    fn parse(tsv: &str) -> Result<Self> {
        let mut classes = Vec::with_capacity(INVENTORY_SIZE);
        for line in tsv.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(Error::data(format!(
                    "inventory row has {} columns, expected 7: `{line}`",
                    cols.len()
                )));
            }
            let idx: u8 = cols[0]
                .parse()
                .map_err(|_| Error::data(format!("bad inventory idx `{}`", cols[0])))?;
            let groups = if cols[6] == "-" {
                Vec::new()
            } else {
                cols[6].split(',').map(str::to_string).collect()
            };
            classes.push(ClipartClass {
                idx,
                code: cols[1].to_string(),
                name: cols[2].to_string(),
                category: Category::parse(cols[3])?,
                base_width: cols[4]
                    .parse()
                    .map_err(|_| Error::data("bad base width"))?,
                base_height: cols[5]
                    .parse()
                    .map_err(|_| Error::data("bad base height"))?,
                groups,
            });
        }
        if classes.len() != INVENTORY_SIZE {
            return Err(Error::data(format!(
                "inventory has {} entries, expected {INVENTORY_SIZE}",
                classes.len()
            )));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.idx as usize != i {
                return Err(Error::data(format!(
                    "inventory idx {} out of order at row {i}",
                    c.idx
                )));
            }
        }
        let by_code = classes
            .iter()
            .map(|c| (c.code.clone(), c.idx))
            .collect::<BTreeMap<_, _>>();
        let mut groups: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for c in &classes {
            for g in &c.groups {
                groups.entry(g.clone()).or_default().push(c.idx);
            }
        }
        Ok(Inventory {
            classes,
            by_code,
            groups,
        })
    }

    pub fn get(&self, id: ClipartId) -> &ClipartClass {
        &self.classes[id.index()]
    }

    pub fn classes(&self) -> &[ClipartClass] {
        &self.classes
    }

    pub fn by_code(&self, code: &str) -> Option<ClipartId> {
        self.by_code.get(code).map(|&i| ClipartId::new_unchecked(i))
    }

    /// Names of all ambiguity groups defined over the inventory.
    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    /// Members of an ambiguity group, or `None` for an unknown group name.
    pub fn group_members(&self, group: &str) -> Option<Vec<ClipartId>> {
        self.groups
            .get(group)
            .map(|v| v.iter().map(|&i| ClipartId::new_unchecked(i)).collect())
    }

    /// SHA-256 checksum of the embedded table, hex-encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(INVENTORY_TSV.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

static INVENTORY: LazyLock<Inventory> = LazyLock::new(|| {
    Inventory::parse(INVENTORY_TSV).expect("embedded inventory table must parse")
});

/// The process-wide inventory instance.
pub fn inventory() -> &'static Inventory {
    &INVENTORY
}
