//! Category taxonomy, group partition and the index arithmetic shared by
//! every other module.
//!
//! Categories are numbered `0..N` in declaration order. Inside group `i`
//! they carry a within-group index `1..=g_i`; index `0` is the void slot
//! ("no category of this group is present"). Foreground groups always have
//! a void slot; the background group `G_0` has one only when
//! `void_in_background` is set.
//!
//! The grouped output head lays its activations out as the group block `p`
//! (`M+1` entries) followed by one block `q^i` per group in schema order.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest category count representable in the 16-bit label maps.
pub const MAX_CATEGORIES: usize = 65534;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema has no groups")]
    NoGroups,
    #[error("group '{0}' has no categories")]
    EmptyGroup(String),
    #[error("duplicate category name '{0}'")]
    DuplicateCategory(String),
    #[error("duplicate group name '{0}'")]
    DuplicateGroup(String),
    #[error("too many categories: {0} (max {MAX_CATEGORIES})")]
    TooManyCategories(usize),
    #[error("category id {id} out of range (N = {n})")]
    CategoryOutOfRange { id: usize, n: usize },
    #[error("group id {id} out of range (M+1 = {groups})")]
    GroupOutOfRange { id: usize, groups: usize },
    #[error("within-group index 0 of group {group} is void and has no category")]
    Void { group: usize },
    #[error("within-group index {index} out of range for group {group} (g = {size})")]
    IndexOutOfRange { group: usize, index: usize, size: usize },
    #[error("unknown category name '{0}'")]
    UnknownCategory(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read schema config {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub categories: Vec<String>,
}

/// A category resolved to its group coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CategoryRef {
    pub category_id: usize,
    pub group_id: usize,
    pub within_index: usize,
}

/// The category/group structure. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSchema {
    groups: Vec<Group>,
    void_in_background: bool,
    names: Vec<String>,
    refs: Vec<CategoryRef>,
    first_category: Vec<usize>,
}

impl GroupSchema {
    /// Builds a schema from `(group name, category names)` pairs. Category
    /// ids follow declaration order; the first group is the background.
    pub fn build<G, C, S>(spec: G, void_in_background: bool) -> Result<Self, SchemaError>
    where
        G: IntoIterator<Item = (S, C)>,
        C: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let groups: Vec<Group> = spec
            .into_iter()
            .map(|(name, cats)| Group {
                name: name.into(),
                categories: cats.into_iter().map(Into::into).collect(),
            })
            .collect();
        Self::from_groups(groups, void_in_background)
    }

    pub fn from_groups(groups: Vec<Group>, void_in_background: bool) -> Result<Self, SchemaError> {
        if groups.is_empty() {
            return Err(SchemaError::NoGroups);
        }
        let mut seen_groups = HashSet::new();
        let mut seen = HashSet::new();
        let mut names = Vec::new();
        let mut refs = Vec::new();
        let mut first_category = Vec::with_capacity(groups.len());
        for (gid, group) in groups.iter().enumerate() {
            if !seen_groups.insert(group.name.as_str()) {
                return Err(SchemaError::DuplicateGroup(group.name.clone()));
            }
            if group.categories.is_empty() {
                return Err(SchemaError::EmptyGroup(group.name.clone()));
            }
            first_category.push(names.len());
            for (k, cat) in group.categories.iter().enumerate() {
                if !seen.insert(cat.as_str()) {
                    return Err(SchemaError::DuplicateCategory(cat.clone()));
                }
                refs.push(CategoryRef {
                    category_id: names.len(),
                    group_id: gid,
                    within_index: k + 1,
                });
                names.push(cat.clone());
            }
        }
        if names.len() > MAX_CATEGORIES {
            return Err(SchemaError::TooManyCategories(names.len()));
        }
        Ok(Self {
            groups,
            void_in_background,
            names,
            refs,
            first_category,
        })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Number of groups, `M + 1`.
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Number of categories, `N`.
    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    /// `g_i`, the number of real categories in group `i`.
    pub fn group_size(&self, group: usize) -> usize {
        self.groups[group].categories.len()
    }

    pub fn void_in_background(&self) -> bool {
        self.void_in_background
    }

    pub fn has_void(&self, group: usize) -> bool {
        group != 0 || self.void_in_background
    }

    pub fn category_name(&self, category_id: usize) -> &str {
        &self.names[category_id]
    }

    pub fn category_names(&self) -> &[String] {
        &self.names
    }

    pub fn category_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn category_ref(&self, category_id: usize) -> Result<CategoryRef, SchemaError> {
        self.refs
            .get(category_id)
            .copied()
            .ok_or(SchemaError::CategoryOutOfRange {
                id: category_id,
                n: self.names.len(),
            })
    }

    /// `(group_id, within_index)` housing `category_id`.
    pub fn group_of(&self, category_id: usize) -> Result<(usize, usize), SchemaError> {
        let r = self.category_ref(category_id)?;
        Ok((r.group_id, r.within_index))
    }

    /// Inverse of [`group_of`](Self::group_of); index 0 is void.
    pub fn category_of(&self, group_id: usize, within_index: usize) -> Result<usize, SchemaError> {
        if group_id >= self.groups.len() {
            return Err(SchemaError::GroupOutOfRange {
                id: group_id,
                groups: self.groups.len(),
            });
        }
        if within_index == 0 {
            return Err(SchemaError::Void { group: group_id });
        }
        let size = self.group_size(group_id);
        if within_index > size {
            return Err(SchemaError::IndexOutOfRange {
                group: group_id,
                index: within_index,
                size,
            });
        }
        Ok(self.first_category[group_id] + within_index - 1)
    }

    /// Category ids belonging to `group`, in within-index order.
    pub fn categories_in(&self, group: usize) -> Range<usize> {
        let start = self.first_category[group];
        start..start + self.group_size(group)
    }

    /// Size of the `q^i` block: `g_i + 1` with a void slot, else `g_i`.
    pub fn q_dim(&self, group: usize) -> usize {
        self.group_size(group) + usize::from(self.has_void(group))
    }

    /// Position of within-group index `j` inside the `q^i` block. Returns
    /// `None` for `j = 0` on a group without a void slot.
    pub fn q_slot(&self, group: usize, within_index: usize) -> Option<usize> {
        if self.has_void(group) {
            Some(within_index)
        } else {
            within_index.checked_sub(1)
        }
    }

    /// Within-group index stored at position `slot` of the `q^i` block.
    pub fn slot_index(&self, group: usize, slot: usize) -> usize {
        if self.has_void(group) {
            slot
        } else {
            slot + 1
        }
    }

    /// Activation ranges: first the group block `p`, then `q^0 .. q^M`.
    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.groups.len() + 1);
        let mut at = self.num_groups();
        out.push(0..at);
        for g in 0..self.groups.len() {
            let d = self.q_dim(g);
            out.push(at..at + d);
            at += d;
        }
        out
    }

    /// Range of the `q^group` block within the activation vector.
    pub fn q_range(&self, group: usize) -> Range<usize> {
        let mut at = self.num_groups();
        for g in 0..group {
            at += self.q_dim(g);
        }
        at..at + self.q_dim(group)
    }

    /// Channels of the grouped head: `(M+1) + sum_i dim(q^i)`.
    pub fn activation_count(&self) -> usize {
        self.num_groups() + (0..self.num_groups()).map(|g| self.q_dim(g)).sum::<usize>()
    }

    /// Parses the line-oriented schema config.
    pub fn parse_config(text: &str) -> Result<Self, SchemaError> {
        let mut groups: Vec<Group> = Vec::new();
        let mut void_in_background = false;
        let mut void_line: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let indented = content.starts_with(' ') || content.starts_with('\t');
            let mut words = content.split_whitespace();
            let key = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            let parse_err = |message: String| SchemaError::Parse { line, message };
            if indented {
                let Some(group) = groups.last_mut() else {
                    return Err(parse_err("category listed before any 'group'".into()));
                };
                if !rest.is_empty() {
                    return Err(parse_err(format!(
                        "expected a single category name, got '{}'",
                        content.trim()
                    )));
                }
                group.categories.push(key.to_string());
                continue;
            }
            match key {
                "group" => match rest.as_slice() {
                    [name] => groups.push(Group {
                        name: name.to_string(),
                        categories: Vec::new(),
                    }),
                    _ => return Err(parse_err("expected 'group <name>'".into())),
                },
                "void_in_background" => {
                    if void_line.replace(line).is_some() {
                        return Err(parse_err("'void_in_background' given twice".into()));
                    }
                    void_in_background = match rest.as_slice() {
                        ["true"] => true,
                        ["false"] => false,
                        _ => return Err(parse_err("expected 'void_in_background true|false'".into())),
                    };
                }
                other => return Err(parse_err(format!("unknown key '{other}'"))),
            }
        }
        Self::from_groups(groups, void_in_background)
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|e| SchemaError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse_config(&text)
    }

    /// Canonical config text; `parse_config` of it yields an equal schema.
    pub fn to_config_string(&self) -> String {
        let mut s = format!("void_in_background {}\n", self.void_in_background);
        for g in &self.groups {
            s.push_str(&format!("group {}\n", g.name));
            for c in &g.categories {
                s.push_str(&format!("  {c}\n"));
            }
        }
        s
    }

    /// Stable 64-bit fingerprint of the canonical config text.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl fmt::Display for GroupSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_config_string())
    }
}

/// Ready-made schemas.
pub mod presets {
    use super::GroupSchema;

    /// The 5-group, 36-category indoor partition.
    pub fn indoor(void_in_background: bool) -> GroupSchema {
        GroupSchema::build(
            [
                ("background", vec!["ceiling", "floor", "wall", "window", "door"]),
                ("chair_like", vec!["chair", "table_and_chair", "trash_can", "toilet"]),
                ("table_like", vec!["table", "side_table", "bookshelf", "desk"]),
                (
                    "big_objects",
                    vec![
                        "bed",
                        "kitchen_cabinet",
                        "bathtub",
                        "mirror",
                        "closets_cabinets",
                        "dont_care",
                        "sofa",
                    ],
                ),
                (
                    "small_objects",
                    vec![
                        "lamp",
                        "computer",
                        "music",
                        "gym",
                        "pillow",
                        "household_appliance",
                        "kitchen_appliance",
                        "pets",
                        "car",
                        "plants",
                        "pool",
                        "recreation",
                        "night_stand",
                        "shower",
                        "tvs",
                        "sink",
                    ],
                ),
            ],
            void_in_background,
        )
        .expect("indoor preset is valid")
    }

    /// Three groups over eight categories, used by the synthetic scenes.
    pub fn toy() -> GroupSchema {
        GroupSchema::build(
            [
                ("background", vec!["wall", "floor"]),
                ("near", vec!["crate", "drum", "tent"]),
                ("far", vec!["block", "disc", "wedge"]),
            ],
            false,
        )
        .expect("toy preset is valid")
    }
}
