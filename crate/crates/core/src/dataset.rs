//! Samples, region-set algebra and the on-disk formats.
//!
//! All grids are row-major from the top-left pixel.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::GroupSchema;

pub const SAMPLE_MAGIC: &[u8; 4] = b"GSS1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic: expected GSS1, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated sample file: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after sample payload")]
    TrailingBytes(usize),
    #[error("dimension {0} does not fit in 16 bits")]
    DimensionOverflow(usize),
    #[error("empty grid ({height}x{width})")]
    EmptyGrid { height: usize, width: usize },
    #[error("grid shape mismatch: {0}")]
    Shape(String),
    #[error("sample has {found} group maps, schema has {expected} groups")]
    GroupCount { found: usize, expected: usize },
    #[error("sample declares N = {found}, schema has {expected}")]
    CategoryCount { found: usize, expected: usize },
    #[error("pixel ({row}, {col}): category id {id} out of range")]
    BadCategory { row: usize, col: usize, id: u16 },
    #[error("pixel ({row}, {col}): group {group} index {index} out of range")]
    BadIndex {
        row: usize,
        col: usize,
        group: usize,
        index: u16,
    },
    #[error("pixel ({row}, {col}): group {group} is visible but its map is void")]
    Implausible { row: usize, col: usize, group: usize },
    #[error("pixel ({row}, {col}): visible index {visible} disagrees with group {group} map value {stored}")]
    Inconsistent {
        row: usize,
        col: usize,
        group: usize,
        visible: usize,
        stored: u16,
    },
    #[error("label {0} has no palette entry")]
    PaletteGap(u16),
    #[error("palette line {line}: {message}")]
    PaletteParse { line: usize, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self, DatasetError> {
        if data.len() != height * width {
            return Err(DatasetError::Shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

pub type LabelMap = Grid<u16>;
pub type DepthMap = Grid<f32>;

/// One training example.
///
/// `visible` holds category ids. `group_maps[i]` holds within-group
/// indices of group `i`: `0` is void, `j >= 1` means category `C(i, j)` is
/// present at the pixel, visible or occluded.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub depth: DepthMap,
    pub visible: LabelMap,
    pub group_maps: Vec<LabelMap>,
    pub num_categories: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.visible.height()
    }

    pub fn width(&self) -> usize {
        self.visible.width()
    }

    pub fn num_pixels(&self) -> usize {
        self.visible.len()
    }

    fn check_shapes(&self) -> Result<(), DatasetError> {
        if self.visible.is_empty() {
            return Err(DatasetError::EmptyGrid {
                height: self.height(),
                width: self.width(),
            });
        }
        if !self.depth.same_shape(&self.visible) {
            return Err(DatasetError::Shape("depth and visible differ".into()));
        }
        if let Some(i) = self.group_maps.iter().position(|m| !m.same_shape(&self.visible)) {
            return Err(DatasetError::Shape(format!("group map {i} differs from visible")));
        }
        Ok(())
    }

    /// Checks every sample invariant against `schema`.
    pub fn validate(&self, schema: &GroupSchema) -> Result<(), DatasetError> {
        self.check_shapes()?;
        if self.group_maps.len() != schema.num_groups() {
            return Err(DatasetError::GroupCount {
                found: self.group_maps.len(),
                expected: schema.num_groups(),
            });
        }
        if self.num_categories != schema.num_categories() {
            return Err(DatasetError::CategoryCount {
                found: self.num_categories,
                expected: schema.num_categories(),
            });
        }
        let w = self.width();
        for (g, map) in self.group_maps.iter().enumerate() {
            let size = schema.group_size(g);
            if let Some(k) = map.as_slice().iter().position(|&v| v as usize > size) {
                return Err(DatasetError::BadIndex {
                    row: k / w,
                    col: k % w,
                    group: g,
                    index: map.as_slice()[k],
                });
            }
        }
        for (k, &c) in self.visible.as_slice().iter().enumerate() {
            let (row, col) = (k / w, k % w);
            let Ok((g, j)) = schema.group_of(c as usize) else {
                return Err(DatasetError::BadCategory { row, col, id: c });
            };
            let stored = self.group_maps[g].as_slice()[k];
            if stored == 0 {
                return Err(DatasetError::Implausible { row, col, group: g });
            }
            if stored as usize != j {
                return Err(DatasetError::Inconsistent {
                    row,
                    col,
                    group: g,
                    visible: j,
                    stored,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        self.check_shapes()?;
        let h = u16_dim(self.height())?;
        let w = u16_dim(self.width())?;
        let groups = u16_dim(self.group_maps.len())?;
        let n = u16_dim(self.num_categories)?;
        let px = self.num_pixels();
        let mut out = Vec::with_capacity(12 + px * (6 + 2 * self.group_maps.len()));
        out.extend_from_slice(SAMPLE_MAGIC);
        for v in [h, w, groups, n] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for d in self.depth.as_slice() {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for map in std::iter::once(&self.visible).chain(&self.group_maps) {
            for v in map.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader { bytes, at: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != SAMPLE_MAGIC {
            return Err(DatasetError::BadMagic(magic));
        }
        let h = r.u16()? as usize;
        let w = r.u16()? as usize;
        let groups = r.u16()? as usize;
        let n = r.u16()? as usize;
        if h == 0 || w == 0 {
            return Err(DatasetError::EmptyGrid { height: h, width: w });
        }
        let px = h * w;
        let needed = 12 + px * 4 + px * 2 * (groups + 1);
        if bytes.len() < needed {
            return Err(DatasetError::Truncated {
                needed,
                have: bytes.len(),
            });
        }
        let depth: Vec<f32> = r
            .take(px * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let read_map = |r: &mut Reader| -> Result<LabelMap, DatasetError> {
            let data = r
                .take(px * 2)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            Grid::from_vec(h, w, data)
        };
        let visible = read_map(&mut r)?;
        let group_maps = (0..groups)
            .map(|_| read_map(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        if r.at != bytes.len() {
            return Err(DatasetError::TrailingBytes(bytes.len() - r.at));
        }
        Ok(Self {
            depth: Grid::from_vec(h, w, depth)?,
            visible,
            group_maps,
            num_categories: n,
        })
    }
}

fn u16_dim(v: usize) -> Result<u16, DatasetError> {
    u16::try_from(v).map_err(|_| DatasetError::DimensionOverflow(v))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(DatasetError::Truncated {
                needed: end,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

pub fn write_sample(sample: &Sample, path: &Path) -> Result<(), DatasetError> {
    let bytes = sample.to_bytes()?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_sample(path: &Path) -> Result<Sample, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Sample::from_bytes(&bytes)
}

/// A pixel set over a fixed image domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn empty(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn full(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> bool) -> Self {
        Self((0..len).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.0[pixel]
    }

    pub fn insert(&mut self, pixel: usize) {
        self.0[pixel] = true;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| **a || **b).count()
    }

    pub fn minus(&self, other: &Mask) -> Mask {
        Mask(self.0.iter().zip(&other.0).map(|(a, b)| *a && !*b).collect())
    }

    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Per-category visible/present/occluded sets and per-group void sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSets {
    pub height: usize,
    pub width: usize,
    pub visible: Vec<Mask>,
    pub present: Vec<Mask>,
    pub occluded: Vec<Mask>,
    pub void: Vec<Mask>,
}

impl RegionSets {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Re-materializes the group maps (within-group indices, 0 = void).
    pub fn to_group_maps(&self, schema: &GroupSchema) -> Vec<LabelMap> {
        (0..schema.num_groups())
            .map(|g| {
                let mut map = Grid::filled(self.height, self.width, 0u16);
                for c in schema.categories_in(g) {
                    let j = schema.group_of(c).expect("category in range").1 as u16;
                    for k in self.present[c].pixels() {
                        map.as_mut_slice()[k] = j;
                    }
                }
                map
            })
            .collect()
    }
}

/// Derives the region sets of a sample. Fails on an implausible sample,
/// naming the first offending pixel and group.
pub fn regions_from_sample(sample: &Sample, schema: &GroupSchema) -> Result<RegionSets, DatasetError> {
    sample.validate(schema)?;
    let px = sample.num_pixels();
    let n = schema.num_categories();
    let mut visible = vec![Mask::empty(px); n];
    let mut present = vec![Mask::empty(px); n];
    for (k, &c) in sample.visible.as_slice().iter().enumerate() {
        visible[c as usize].insert(k);
    }
    let mut void = Vec::with_capacity(schema.num_groups());
    for (g, map) in sample.group_maps.iter().enumerate() {
        let mut empty = Mask::empty(px);
        for (k, &j) in map.as_slice().iter().enumerate() {
            if j == 0 {
                empty.insert(k);
            } else {
                present[schema.category_of(g, j as usize)?].insert(k);
            }
        }
        void.push(empty);
    }
    let occluded = present.iter().zip(&visible).map(|(p, v)| p.minus(v)).collect();
    Ok(RegionSets {
        height: sample.height(),
        width: sample.width(),
        visible,
        present,
        occluded,
        void,
    })
}

/// Label-to-colour table for image export.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Palette {
    entries: BTreeMap<u16, [u8; 3]>,
}

pub const VOID_COLOR: [u8; 3] = [0, 0, 0];

const BASE_COLORS: [[u8; 3]; 12] = [
    [128, 64, 128],
    [70, 130, 180],
    [220, 20, 60],
    [250, 170, 30],
    [107, 142, 35],
    [0, 160, 160],
    [190, 153, 153],
    [255, 255, 90],
    [119, 11, 32],
    [152, 251, 152],
    [100, 60, 220],
    [240, 120, 200],
];

/// Distinct non-black colour for `category_id`.
pub fn category_color(category_id: usize) -> [u8; 3] {
    let base = BASE_COLORS[category_id % BASE_COLORS.len()];
    let round = (category_id / BASE_COLORS.len()) as u8;
    // later rounds darken, but never reach black
    base.map(|v| v.saturating_sub(round.wrapping_mul(37) % 96).max(8))
}

impl Palette {
    pub fn insert(&mut self, label: u16, color: [u8; 3]) {
        self.entries.insert(label, color);
    }

    pub fn get(&self, label: u16) -> Option<[u8; 3]> {
        self.entries.get(&label).copied()
    }

    /// Colours indexed by category id, for visible maps.
    pub fn for_categories(category_colors: &[[u8; 3]]) -> Self {
        let mut p = Self::default();
        for (c, &rgb) in category_colors.iter().enumerate() {
            p.insert(c as u16, rgb);
        }
        p
    }

    /// Colours indexed by within-group index for group `group`; void black.
    pub fn for_group(schema: &GroupSchema, category_colors: &[[u8; 3]], group: usize) -> Self {
        let mut p = Self::default();
        p.insert(0, VOID_COLOR);
        for c in schema.categories_in(group) {
            let j = schema.group_of(c).expect("category in range").1;
            p.insert(j as u16, category_colors[c]);
        }
        p
    }

    /// Default colours for every category of `schema`.
    pub fn default_colors(schema: &GroupSchema) -> Vec<[u8; 3]> {
        (0..schema.num_categories()).map(category_color).collect()
    }

    /// Parses `<category> <r> <g> <b>` lines into per-category colours.
    /// Every category must be listed.
    pub fn parse_colors(text: &str, schema: &GroupSchema) -> Result<Vec<[u8; 3]>, DatasetError> {
        let mut colors: Vec<Option<[u8; 3]>> = vec![None; schema.num_categories()];
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| DatasetError::PaletteParse { line, message };
            let words: Vec<&str> = content.split_whitespace().collect();
            let [name, r, g, b] = words.as_slice() else {
                return Err(err("expected '<category> <r> <g> <b>'".into()));
            };
            let c = schema
                .category_id(name)
                .ok_or_else(|| err(format!("unknown category '{name}'")))?;
            let mut rgb = [0u8; 3];
            for (slot, v) in rgb.iter_mut().zip([r, g, b]) {
                *slot = v.parse().map_err(|_| err(format!("bad channel value '{v}'")))?;
            }
            colors[c] = Some(rgb);
        }
        colors
            .into_iter()
            .enumerate()
            .map(|(c, rgb)| rgb.ok_or(DatasetError::PaletteGap(c as u16)))
            .collect()
    }
}

/// Binary PPM (P6) bytes for a label map.
pub fn labelmap_ppm(labels: &LabelMap, palette: &Palette) -> Result<Vec<u8>, DatasetError> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.reserve(labels.len() * 3);
    for &v in labels.as_slice() {
        out.extend_from_slice(&palette.get(v).ok_or(DatasetError::PaletteGap(v))?);
    }
    Ok(out)
}

/// Writes a label map as a PPM image; void (within-group 0) is rendered
/// with whatever the palette says, black for the group palettes.
pub fn export_labelmap_image(labels: &LabelMap, palette: &Palette, path: &Path) -> Result<(), DatasetError> {
    let bytes = labelmap_ppm(labels, palette)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Binary PGM (P5) bytes for a depth map, min-max normalized, near = bright.
pub fn depth_pgm(depth: &DepthMap) -> Vec<u8> {
    let (lo, hi) = depth
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", depth.width(), depth.height()).into_bytes();
    out.extend(
        depth
            .as_slice()
            .iter()
            .map(|&d| (255.0 * (1.0 - (d - lo) / span)).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn export_depth_image(depth: &DepthMap, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, depth_pgm(depth)).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GenerationStats {
    pub attempted: u64,
    pub accepted: u64,
    pub rejected: BTreeMap<String, u64>,
}

/// Index of a generated dataset directory (`manifest.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub schema_config: String,
    pub schema_fingerprint: String,
    pub scene_config: Option<String>,
    pub samples: Vec<ManifestEntry>,
    pub stats: GenerationStats,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_json().as_bytes())
    }

    pub fn files(&self, split: Split) -> impl Iterator<Item = &str> {
        self.samples
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.file.as_str())
    }
}

/// An on-disk dataset: its manifest, schema and root directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub schema: GroupSchema,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let manifest = DatasetManifest::load(root)?;
        let schema = GroupSchema::load(&root.join(&manifest.schema_config))?;
        if format!("{:016x}", schema.fingerprint()) != manifest.schema_fingerprint {
            return Err(DatasetError::Manifest(
                "schema config does not match the recorded fingerprint".into(),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            schema,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>, DatasetError> {
        self.manifest
            .files(split)
            .map(|f| {
                let sample = read_sample(&self.root.join(f))?;
                sample.validate(&self.schema)?;
                Ok(sample)
            })
            .collect()
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::schema::presets;

    /// 4x4 toy sample: wall on top two rows, floor below; a crate (near
    /// group) covers the 2x2 block at rows 2..4, cols 1..3.
    pub fn occluded_floor_sample() -> Sample {
        let schema = presets::toy();
        let wall = 0u16;
        let floor = 1u16;
        let crate_id = schema.category_id("crate").unwrap() as u16;
        let mut visible = Grid::filled(4, 4, wall);
        let mut background = Grid::filled(4, 4, 1u16);
        let mut near = Grid::filled(4, 4, 0u16);
        for r in 2..4 {
            for c in 0..4 {
                visible.set(r, c, floor);
                background.set(r, c, 2);
            }
            for c in 1..3 {
                visible.set(r, c, crate_id);
                near.set(r, c, 1);
            }
        }
        Sample {
            depth: Grid::filled(4, 4, 5.0),
            visible,
            group_maps: vec![background, near, Grid::filled(4, 4, 0)],
            num_categories: 8,
        }
    }
}
