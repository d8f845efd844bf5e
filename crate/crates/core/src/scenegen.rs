//! Layered 2-D scenes with per-group amodal ground truth.
//!
//! A scene is a background split into horizontal bands (the first band
//! above a random horizon, the rest below it on a receding ground ramp)
//! with parametric shapes stacked on top. Every group is rasterized on its
//! own, so a group map keeps an object's full footprint even where a nearer
//! object from another group hides it. Objects of one group never overlap.
//!
//! Randomness comes from ChaCha8 streams. Scene `k` of a dataset with seed
//! `s` uses the stream seeded by [`scene_seed`]`(s, k)`, so generation order
//! and worker count do not affect the output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    io_err, write_atomic, write_sample, DatasetError, DatasetManifest, GenerationStats, Grid,
    ManifestEntry, Sample, Split,
};
use crate::schema::GroupSchema;

pub type SceneRng = ChaCha8Rng;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scene config: {0}")]
    Config(String),
    #[error("could not place a disjoint object in group '{group}' after {attempts} attempts")]
    Placement { group: String, attempts: u32 },
    #[error("group {0} has no visible object to clone")]
    NoClonableObject(usize),
    #[error("no permitted placement for the cloned object after {0} attempts")]
    NoPlacement(u32),
    #[error(
        "acceptance rate {accepted}/{window} over the last window fell below 1% \
         (attempted {attempted}, accepted {total_accepted}); rejections: {reasons:?}"
    )]
    LowAcceptance {
        accepted: u64,
        window: u64,
        attempted: u64,
        total_accepted: u64,
        reasons: BTreeMap<String, u64>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Mixes a dataset seed with a scene index (splitmix64 finalizer).
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn scene_rng(seed: u64, index: u64) -> SceneRng {
    SceneRng::seed_from_u64(scene_seed(seed, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

impl Shape {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "rectangle" => Some(Self::Rectangle),
            "ellipse" => Some(Self::Ellipse),
            "triangle" => Some(Self::Triangle),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Rectangle => "rectangle",
            Self::Ellipse => "ellipse",
            Self::Triangle => "triangle",
        }
    }

    /// Whether cell `(r, c)` of an `h` x `w` bounding box is covered.
    fn covers(self, r: usize, c: usize, h: usize, w: usize) -> bool {
        let y = (r as f64 + 0.5) / h as f64;
        let x = (c as f64 + 0.5) / w as f64;
        match self {
            Self::Rectangle => true,
            Self::Ellipse => (x - 0.5).powi(2) + (y - 0.5).powi(2) <= 0.25,
            // apex at the top centre, base along the bottom edge
            Self::Triangle => (x - 0.5).abs() <= 0.5 * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectKind {
    pub category: String,
    pub shape: Shape,
    /// Side length range as a fraction of the canvas side.
    pub size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLayer {
    pub group: String,
    pub count: (u32, u32),
    pub depth: (f64, f64),
    pub objects: Vec<ObjectKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteSpec {
    pub group: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Horizon row range as fractions of the height.
    pub horizon: (f64, f64),
    /// Background categories from top to bottom.
    pub bands: Vec<String>,
    /// Depth of the upper band and of the ground at the horizon, then of
    /// the ground at the bottom row.
    pub background_depth: (f64, f64),
    pub depth_noise: f64,
    pub placement_attempts: u32,
    pub layers: Vec<GroupLayer>,
    pub paste: Option<PasteSpec>,
    pub seed: u64,
}

impl SceneSpec {
    /// Scene layout matching [`crate::schema::presets::toy`].
    pub fn toy() -> Self {
        let obj = |category: &str, shape, size| ObjectKind {
            category: category.into(),
            shape,
            size,
        };
        Self {
            height: 64,
            width: 64,
            horizon: (0.3, 0.6),
            bands: vec!["wall".into(), "floor".into()],
            background_depth: (10.0, 8.0),
            depth_noise: 0.02,
            placement_attempts: 100,
            layers: vec![
                GroupLayer {
                    group: "near".into(),
                    count: (0, 2),
                    depth: (1.5, 4.0),
                    objects: vec![
                        obj("crate", Shape::Rectangle, (0.2, 0.4)),
                        obj("drum", Shape::Ellipse, (0.2, 0.4)),
                        obj("tent", Shape::Triangle, (0.25, 0.45)),
                    ],
                },
                GroupLayer {
                    group: "far".into(),
                    count: (0, 3),
                    depth: (4.5, 7.0),
                    objects: vec![
                        obj("block", Shape::Rectangle, (0.15, 0.35)),
                        obj("disc", Shape::Ellipse, (0.15, 0.35)),
                        obj("wedge", Shape::Triangle, (0.2, 0.4)),
                    ],
                },
            ],
            paste: None,
            seed: 0,
        }
    }

    pub fn parse_config(text: &str) -> Result<Self, SceneError> {
        let mut spec = Self {
            height: 0,
            width: 0,
            horizon: (0.5, 0.5),
            bands: Vec::new(),
            background_depth: (10.0, 10.0),
            depth_noise: 0.0,
            placement_attempts: 100,
            layers: Vec::new(),
            paste: None,
            seed: 0,
        };
        let mut have_canvas = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let indented = content.starts_with(' ') || content.starts_with('\t');
            let words: Vec<&str> = content.split_whitespace().collect();
            let err = |message: String| SceneError::Parse { line, message };
            let num = |s: &str| -> Result<f64, SceneError> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad number '{s}'")))
            };
            let int = |s: &str| -> Result<u64, SceneError> {
                s.parse::<u64>().map_err(|_| err(format!("bad integer '{s}'")))
            };
            if indented {
                let Some(layer) = spec.layers.last_mut() else {
                    return Err(err("indented line before any 'group'".into()));
                };
                match words.as_slice() {
                    ["count", lo, hi] => layer.count = (int(lo)? as u32, int(hi)? as u32),
                    ["depth", lo, hi] => layer.depth = (num(lo)?, num(hi)?),
                    ["object", category, shape, lo, hi] => layer.objects.push(ObjectKind {
                        category: category.to_string(),
                        shape: Shape::parse(shape).ok_or_else(|| err(format!("unknown shape '{shape}'")))?,
                        size: (num(lo)?, num(hi)?),
                    }),
                    [key, ..] => return Err(err(format!("unknown group key '{key}'"))),
                    [] => unreachable!(),
                }
                continue;
            }
            match words.as_slice() {
                ["canvas", h, w] => {
                    spec.height = int(h)? as usize;
                    spec.width = int(w)? as usize;
                    have_canvas = true;
                }
                ["horizon", lo, hi] => spec.horizon = (num(lo)?, num(hi)?),
                ["band", name] => spec.bands.push(name.to_string()),
                ["background_depth", far, near] => spec.background_depth = (num(far)?, num(near)?),
                ["depth_noise", s] => spec.depth_noise = num(s)?,
                ["placement_attempts", n] => spec.placement_attempts = int(n)? as u32,
                ["seed", s] => spec.seed = int(s)?,
                ["paste", group, p] => {
                    spec.paste = Some(PasteSpec {
                        group: group.to_string(),
                        probability: num(p)?,
                    })
                }
                ["group", name] => spec.layers.push(GroupLayer {
                    group: name.to_string(),
                    count: (0, 0),
                    depth: (1.0, 1.0),
                    objects: Vec::new(),
                }),
                [key, ..] => return Err(err(format!("unknown or malformed key '{key}'"))),
                [] => unreachable!(),
            }
        }
        if !have_canvas {
            return Err(SceneError::Config("missing 'canvas <height> <width>'".into()));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_config(&text)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = format!("canvas {} {}\n", self.height, self.width);
        s += &format!("horizon {} {}\n", self.horizon.0, self.horizon.1);
        for b in &self.bands {
            s += &format!("band {b}\n");
        }
        s += &format!(
            "background_depth {} {}\n",
            self.background_depth.0, self.background_depth.1
        );
        s += &format!("depth_noise {}\n", self.depth_noise);
        s += &format!("placement_attempts {}\n", self.placement_attempts);
        s += &format!("seed {}\n", self.seed);
        if let Some(p) = &self.paste {
            s += &format!("paste {} {}\n", p.group, p.probability);
        }
        for layer in &self.layers {
            s += &format!("group {}\n", layer.group);
            s += &format!("  count {} {}\n", layer.count.0, layer.count.1);
            s += &format!("  depth {} {}\n", layer.depth.0, layer.depth.1);
            for o in &layer.objects {
                s += &format!(
                    "  object {} {} {} {}\n",
                    o.category,
                    o.shape.name(),
                    o.size.0,
                    o.size.1
                );
            }
        }
        s
    }

    /// Resolves names against `schema` and checks ranges.
    pub fn compile(&self, schema: &GroupSchema) -> Result<CompiledScene, SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        if schema.num_groups() < 2 {
            return bad("schema needs a background group and at least one foreground group".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("canvas {}x{} is smaller than 8x8", self.height, self.width));
        }
        let unit = |(lo, hi): (f64, f64)| (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi;
        if !unit(self.horizon) {
            return bad("horizon range must lie in [0, 1]".into());
        }
        if self.bands.is_empty() {
            return bad("at least one 'band' is required".into());
        }
        let mut bands = Vec::new();
        for b in &self.bands {
            let c = schema
                .category_id(b)
                .ok_or_else(|| SceneError::Config(format!("unknown band category '{b}'")))?;
            let (g, j) = schema.group_of(c).expect("valid id");
            if g != 0 {
                return bad(format!("band '{b}' is not a background category"));
            }
            bands.push(j as u16);
        }
        let (far, near) = self.background_depth;
        if !(far > 0.0 && near > 0.0) || self.depth_noise < 0.0 {
            return bad("depths must be positive and depth_noise nonnegative".into());
        }
        let mut layers = Vec::new();
        for layer in &self.layers {
            let Some(group) = schema.groups().iter().position(|g| g.name == layer.group) else {
                return bad(format!("unknown group '{}'", layer.group));
            };
            if group == 0 {
                return bad("the background group cannot hold objects".into());
            }
            if layer.count.0 > layer.count.1 {
                return bad(format!("group '{}': count range is reversed", layer.group));
            }
            if !(layer.depth.0 > 0.0 && layer.depth.0 <= layer.depth.1) {
                return bad(format!("group '{}': bad depth range", layer.group));
            }
            if layer.count.1 > 0 && layer.objects.is_empty() {
                return bad(format!("group '{}' has no object kinds", layer.group));
            }
            let mut kinds = Vec::new();
            for o in &layer.objects {
                let c = schema
                    .category_id(&o.category)
                    .ok_or_else(|| SceneError::Config(format!("unknown category '{}'", o.category)))?;
                let (g, j) = schema.group_of(c).expect("valid id");
                if g != group {
                    return bad(format!("'{}' is not in group '{}'", o.category, layer.group));
                }
                let (lo, hi) = o.size;
                if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                    return bad(format!("'{}': size fractions must lie in (0, 1]", o.category));
                }
                kinds.push((o.clone(), j as u16, c as u16));
            }
            layers.push(CompiledLayer {
                name: layer.group.clone(),
                group,
                count: layer.count,
                depth: layer.depth,
                kinds,
            });
        }
        let paste = match &self.paste {
            None => None,
            Some(p) => {
                let Some(g) = schema.groups().iter().position(|g| g.name == p.group) else {
                    return bad(format!("unknown paste group '{}'", p.group));
                };
                if g == 0 || !(0.0..=1.0).contains(&p.probability) {
                    return bad("paste needs a foreground group and a probability in [0, 1]".into());
                }
                Some((g, p.probability))
            }
        };
        Ok(CompiledScene {
            spec: self.clone(),
            bands,
            layers,
            paste,
            num_groups: schema.num_groups(),
            num_categories: schema.num_categories(),
            first_background: schema.categories_in(0).start as u16,
        })
    }
}

#[derive(Debug, Clone)]
struct CompiledLayer {
    name: String,
    group: usize,
    count: (u32, u32),
    depth: (f64, f64),
    kinds: Vec<(ObjectKind, u16, u16)>,
}

/// A scene spec resolved against a schema.
#[derive(Debug, Clone)]
pub struct CompiledScene {
    spec: SceneSpec,
    bands: Vec<u16>,
    layers: Vec<CompiledLayer>,
    paste: Option<(usize, f64)>,
    num_groups: usize,
    num_categories: usize,
    first_background: u16,
}

impl CompiledScene {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }
}

/// Generates one scene. A placement failure consumes randomness, so the
/// caller moves on to the next scene.
pub fn generate_scene(scene: &CompiledScene, rng: &mut SceneRng) -> Result<Sample, SceneError> {
    let spec = &scene.spec;
    let (h, w) = (spec.height, spec.width);
    let horizon = ((rng.gen_range(spec.horizon.0..=spec.horizon.1) * h as f64).round() as usize).min(h);

    let mut background = Grid::filled(h, w, scene.bands[0]);
    let mut depth = Grid::filled(h, w, spec.background_depth.0);
    let lower = &scene.bands[1.min(scene.bands.len() - 1)..];
    let below = h - horizon;
    for r in horizon..h {
        let band = if scene.bands.len() == 1 {
            scene.bands[0]
        } else {
            lower[((r - horizon) * lower.len() / below.max(1)).min(lower.len() - 1)]
        };
        let t = if below > 1 { (r - horizon) as f64 / (below - 1) as f64 } else { 1.0 };
        let d = spec.background_depth.0 + t * (spec.background_depth.1 - spec.background_depth.0);
        for c in 0..w {
            background.set(r, c, band);
            depth.set(r, c, d);
        }
    }
    let mut visible = Grid::from_vec(
        h,
        w,
        background
            .as_slice()
            .iter()
            .map(|&j| scene.first_background + j - 1)
            .collect(),
    )
    .expect("same size");
    let mut group_maps = vec![Grid::filled(h, w, 0u16); scene.num_groups];
    group_maps[0] = background;

    for layer in &scene.layers {
        let count = rng.gen_range(layer.count.0..=layer.count.1);
        for _ in 0..count {
            let kind_index = rng.gen_range(0..layer.kinds.len());
            let (kind, j, category) = &layer.kinds[kind_index];
            let object_depth = rng.gen_range(layer.depth.0..=layer.depth.1);
            let mut placed = None;
            for _ in 0..spec.placement_attempts {
                let oh = side(rng, kind.size, h);
                let ow = side(rng, kind.size, w);
                let top = rng.gen_range(0..=h - oh);
                let left = rng.gen_range(0..=w - ow);
                let cells: Vec<usize> = (0..oh)
                    .flat_map(|r| (0..ow).map(move |c| (r, c)))
                    .filter(|&(r, c)| kind.shape.covers(r, c, oh, ow))
                    .map(|(r, c)| (top + r) * w + left + c)
                    .collect();
                let map = group_maps[layer.group].as_slice();
                if cells.iter().all(|&k| map[k] == 0) {
                    placed = Some(cells);
                    break;
                }
            }
            let Some(cells) = placed else {
                return Err(SceneError::Placement {
                    group: layer.name.clone(),
                    attempts: spec.placement_attempts,
                });
            };
            for k in cells {
                group_maps[layer.group].as_mut_slice()[k] = *j;
                if object_depth < depth.as_slice()[k] {
                    depth.as_mut_slice()[k] = object_depth;
                    visible.as_mut_slice()[k] = *category;
                }
            }
        }
    }

    add_noise(&mut depth, spec.depth_noise, rng);
    Ok(Sample {
        depth: Grid::from_vec(h, w, depth.as_slice().iter().map(|&d| d as f32).collect()).expect("same size"),
        visible,
        group_maps,
        num_categories: scene.num_categories,
    })
}

fn side(rng: &mut SceneRng, (lo, hi): (f64, f64), extent: usize) -> usize {
    let frac = rng.gen_range(lo..=hi);
    ((frac * extent as f64).round() as usize).clamp(1, extent)
}

fn add_noise(depth: &mut Grid<f64>, std: f64, rng: &mut SceneRng) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for d in depth.as_mut_slice() {
            *d = (*d + normal.sample(rng)).max(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionThresholds {
    pub min_foreground_objects: usize,
    pub max_object_coverage: f64,
    pub max_dont_care_coverage: f64,
}

impl Default for RejectionThresholds {
    fn default() -> Self {
        Self {
            min_foreground_objects: 1,
            max_object_coverage: 0.40,
            max_dont_care_coverage: 0.40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    NoForeground,
    ObjectCoverage,
    DontCareCoverage,
    Placement,
    Paste,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoForeground => "no foreground",
            Self::ObjectCoverage => "object coverage",
            Self::DontCareCoverage => "dont_care coverage",
            Self::Placement => "placement failure",
            Self::Paste => "paste failure",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Name of the optional category whose coverage is capped.
pub const DONT_CARE: &str = "dont_care";

/// 4-connected components of equal foreground labels in the visible map.
/// Returns `(category, pixel count)` per component.
fn visible_foreground_components(sample: &Sample, schema: &GroupSchema) -> Vec<(u16, usize)> {
    let (h, w) = (sample.height(), sample.width());
    let labels = sample.visible.as_slice();
    let background = schema.categories_in(0);
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        let label = labels[start];
        if seen[start] || background.contains(&(label as usize)) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(k) = stack.pop() {
            size += 1;
            let (r, c) = (k / w, k % w);
            let mut visit = |n: usize| {
                if !seen[n] && labels[n] == label {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(k - w);
            }
            if r + 1 < h {
                visit(k + w);
            }
            if c > 0 {
                visit(k - 1);
            }
            if c + 1 < w {
                visit(k + 1);
            }
        }
        out.push((label, size));
    }
    out
}

/// Decides whether a generated view is informative enough to keep.
pub fn accept_scene(
    sample: &Sample,
    thresholds: &RejectionThresholds,
    schema: &GroupSchema,
) -> Result<(), RejectReason> {
    let total = sample.num_pixels() as f64;
    let components = visible_foreground_components(sample, schema);
    if components.is_empty() || components.len() < thresholds.min_foreground_objects {
        return Err(RejectReason::NoForeground);
    }
    if components
        .iter()
        .any(|&(_, size)| size as f64 / total > thresholds.max_object_coverage)
    {
        return Err(RejectReason::ObjectCoverage);
    }
    if let Some(dc) = schema.category_id(DONT_CARE) {
        let n = sample.visible.as_slice().iter().filter(|&&c| c as usize == dc).count();
        if n as f64 / total > thresholds.max_dont_care_coverage {
            return Err(RejectReason::DontCareCoverage);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasteOptions {
    /// Background categories the clone may be placed over; empty allows any.
    pub permitted_background: Vec<usize>,
    pub attempts: u32,
    pub depth_noise: f64,
}

impl Default for PasteOptions {
    fn default() -> Self {
        Self {
            permitted_background: Vec::new(),
            attempts: 100,
            depth_noise: 0.0,
        }
    }
}

/// Duplicates a visible object of `paste_group` at a new location. The
/// clone must stay disjoint from its own group, lie in front of whatever
/// it covers, and sit on permitted background. Covered categories become
/// occluded; their group maps are untouched.
pub fn augment_paste(
    sample: &Sample,
    schema: &GroupSchema,
    paste_group: usize,
    options: &PasteOptions,
    rng: &mut SceneRng,
) -> Result<Sample, SceneError> {
    let (h, w) = (sample.height(), sample.width());
    let map = sample.group_maps[paste_group].as_slice();
    let visible = sample.visible.as_slice();

    // candidate objects: components of the group map that show at least one visible pixel
    let mut seen = vec![false; map.len()];
    let mut objects: Vec<(u16, Vec<usize>)> = Vec::new();
    for start in 0..map.len() {
        let j = map[start];
        if j == 0 || seen[start] {
            continue;
        }
        let mut cells = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            cells.push(k);
            let (r, c) = (k / w, k % w);
            let neighbours = [
                (r > 0).then(|| k - w),
                (r + 1 < h).then(|| k + w),
                (c > 0).then(|| k - 1),
                (c + 1 < w).then(|| k + 1),
            ];
            for n in neighbours.into_iter().flatten() {
                if !seen[n] && map[n] == j {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        let category = schema.category_of(paste_group, j as usize).map_err(DatasetError::from)?;
        if cells.iter().any(|&k| visible[k] as usize == category) {
            cells.sort_unstable();
            objects.push((j, cells));
        }
    }
    if objects.is_empty() {
        return Err(SceneError::NoClonableObject(paste_group));
    }
    let (j, cells) = &objects[rng.gen_range(0..objects.len())];
    let category = schema.category_of(paste_group, *j as usize).map_err(DatasetError::from)? as u16;
    let depth = sample.depth.as_slice();
    let shown: Vec<f64> = cells
        .iter()
        .filter(|&&k| visible[k] == category)
        .map(|&k| depth[k] as f64)
        .collect();
    let clone_depth = shown.iter().sum::<f64>() / shown.len() as f64;

    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for &k in cells {
        r0 = r0.min(k / w);
        r1 = r1.max(k / w);
        c0 = c0.min(k % w);
        c1 = c1.max(k % w);
    }
    let background = sample.group_maps[0].as_slice();
    for _ in 0..options.attempts {
        let top = rng.gen_range(0..=h - (r1 - r0 + 1)) as isize;
        let left = rng.gen_range(0..=w - (c1 - c0 + 1)) as isize;
        let (dr, dc) = (top - r0 as isize, left - c0 as isize);
        let target: Vec<usize> = cells
            .iter()
            .map(|&k| ((k / w) as isize + dr) as usize * w + ((k % w) as isize + dc) as usize)
            .collect();
        let ok = target.iter().all(|&k| {
            map[k] == 0
                && (depth[k] as f64) > clone_depth
                && (options.permitted_background.is_empty()
                    || (background[k] != 0
                        && options.permitted_background.contains(
                            &schema
                                .category_of(0, background[k] as usize)
                                .expect("valid background index"),
                        )))
        });
        if !ok {
            continue;
        }
        let mut out = sample.clone();
        let normal = Normal::new(0.0, options.depth_noise.max(0.0)).expect("finite std");
        for &k in &target {
            out.group_maps[paste_group].as_mut_slice()[k] = *j;
            out.visible.as_mut_slice()[k] = category;
            let noise = if options.depth_noise > 0.0 { normal.sample(rng) } else { 0.0 };
            out.depth.as_mut_slice()[k] = (clone_depth + noise).max(0.0) as f32;
        }
        return Ok(out);
    }
    Err(SceneError::NoPlacement(options.attempts))
}

/// Outcome of one scene attempt.
fn attempt(
    scene: &CompiledScene,
    schema: &GroupSchema,
    thresholds: &RejectionThresholds,
    seed: u64,
    index: u64,
) -> Result<Sample, RejectReason> {
    let mut rng = scene_rng(seed, index);
    let mut sample = generate_scene(scene, &mut rng).map_err(|_| RejectReason::Placement)?;
    if let Some((group, probability)) = scene.paste {
        if rng.gen_bool(probability) {
            let options = PasteOptions {
                depth_noise: scene.spec.depth_noise,
                ..PasteOptions::default()
            };
            sample = augment_paste(&sample, schema, group, &options, &mut rng).map_err(|_| RejectReason::Paste)?;
        }
    }
    accept_scene(&sample, thresholds, schema)?;
    Ok(sample)
}

/// Attempts per acceptance-rate check.
pub const TRIAL_WINDOW: u64 = 200;

/// Generates `n_train + n_test` accepted scenes into `out`, writing the
/// samples, a copy of both configs, a rejection log and `manifest.json`.
pub fn generate_dataset(
    spec: &SceneSpec,
    schema: &GroupSchema,
    thresholds: &RejectionThresholds,
    n_train: usize,
    n_test: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest, SceneError> {
    if n_train == 0 || n_test == 0 {
        return Err(SceneError::Config("n_train and n_test must both be at least 1".into()));
    }
    let scene = spec.compile(schema)?;
    let samples_dir = out.join("samples");
    fs::create_dir_all(&samples_dir).map_err(io_err(&samples_dir))?;

    let wanted = n_train + n_test;
    let mut stats = GenerationStats::default();
    let mut entries = Vec::with_capacity(wanted);
    let mut log = String::new();
    let mut window_accepted = 0u64;
    let chunk = rayon::current_num_threads().max(1) as u64 * 8;
    let mut next = 0u64;
    'outer: while entries.len() < wanted {
        let results: Vec<_> = (next..next + chunk)
            .into_par_iter()
            .map(|k| attempt(&scene, schema, thresholds, seed, k))
            .collect();
        for (offset, result) in results.into_iter().enumerate() {
            let index = next + offset as u64;
            stats.attempted += 1;
            match result {
                Ok(sample) => {
                    let n = entries.len();
                    let (split, local) = if n < n_train {
                        (Split::Train, n)
                    } else {
                        (Split::Test, n - n_train)
                    };
                    let name = format!(
                        "samples/{}_{local:05}.gss",
                        if split == Split::Train { "train" } else { "test" }
                    );
                    write_sample(&sample, &out.join(&name))?;
                    entries.push(ManifestEntry { file: name, split });
                    stats.accepted += 1;
                    window_accepted += 1;
                }
                Err(reason) => {
                    *stats.rejected.entry(reason.to_string()).or_default() += 1;
                    log += &format!("scene {index}: {reason}\n");
                }
            }
            if stats.attempted % TRIAL_WINDOW == 0 {
                if window_accepted * 100 < TRIAL_WINDOW {
                    return Err(SceneError::LowAcceptance {
                        accepted: window_accepted,
                        window: TRIAL_WINDOW,
                        attempted: stats.attempted,
                        total_accepted: stats.accepted,
                        reasons: stats.rejected.clone(),
                    });
                }
                window_accepted = 0;
            }
            if entries.len() == wanted {
                break 'outer;
            }
        }
        next += chunk;
    }

    let schema_path = out.join("schema.cfg");
    write_atomic(&schema_path, schema.to_config_string().as_bytes())?;
    let mut stored_spec = spec.clone();
    stored_spec.seed = seed;
    write_atomic(&out.join("scene.cfg"), stored_spec.to_config_string().as_bytes())?;
    write_atomic(&out.join("rejections.log"), log.as_bytes())?;
    let manifest = DatasetManifest {
        format_version: 1,
        seed,
        schema_config: "schema.cfg".into(),
        schema_fingerprint: format!("{:016x}", schema.fingerprint()),
        scene_config: Some("scene.cfg".into()),
        samples: entries,
        stats,
    };
    manifest.save(out)?;
    Ok(manifest)
}
