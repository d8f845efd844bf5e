//! Output heads and their losses.
//!
//! The flat head is an `N`-way softmax trained with cross-entropy on the
//! visible labels. The grouped head splits its activations into the group
//! block `p` and one block `q^i` per group, applies a softmax to each block
//! independently, and is trained with a weighted sum of per-block
//! cross-entropies: the visible group in `p`, the visible category of each
//! group at full weight, occluded categories and void at weight `lambda`.
//!
//! Losses are mean negative log-likelihoods per pixel. Gradients are the
//! fused softmax/cross-entropy form `w * (softmax - onehot) / |pixels|`.

use thiserror::Error;

use crate::dataset::{LabelMap, RegionSets};
use crate::schema::GroupSchema;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default weight of occluded and void terms.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("non-finite activation at pixel {pixel}, channel {channel}")]
    NonFinite { pixel: usize, channel: usize },
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pixel {pixel}: invalid category id {id}")]
    InvalidCategory { pixel: usize, id: usize },
    #[error("regions do not match schema: {0}")]
    RegionMismatch(String),
}

/// An `H x W x C` grid stored pixel-major (channels innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub type LogitsMap = ChannelMap;

impl ChannelMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, HeadError> {
        if data.len() != height * width * channels {
            return Err(HeadError::Shape(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, k: usize) -> &[f64] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.channels..(k + 1) * self.channels]
    }

    fn check_finite(&self) -> Result<(), HeadError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(HeadError::NonFinite {
                pixel: i / self.channels,
                channel: i % self.channels,
            }),
        }
    }
}

/// Numerically stable softmax of `row` written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-pixel `N`-way softmax.
pub fn flat_softmax(logits: &LogitsMap) -> Result<ChannelMap, HeadError> {
    logits.check_finite()?;
    let mut out = ChannelMap::zeros(logits.height, logits.width, logits.channels);
    for k in 0..logits.num_pixels() {
        softmax_into(logits.pixel(k), out.pixel_mut(k));
    }
    Ok(out)
}

/// Per-pixel element of the product of simplices: the group block `p`
/// followed by `q^0 .. q^M`, in the activation layout of the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPrediction {
    pub probs: ChannelMap,
    blocks: Vec<std::ops::Range<usize>>,
}

impl GroupedPrediction {
    pub fn num_groups(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn num_pixels(&self) -> usize {
        self.probs.num_pixels()
    }

    pub fn height(&self) -> usize {
        self.probs.height
    }

    pub fn width(&self) -> usize {
        self.probs.width
    }

    /// Group-visibility distribution at pixel `k`.
    pub fn p(&self, k: usize) -> &[f64] {
        &self.probs.pixel(k)[self.blocks[0].clone()]
    }

    /// Within-group distribution of `group` at pixel `k`.
    pub fn q(&self, k: usize, group: usize) -> &[f64] {
        &self.probs.pixel(k)[self.blocks[group + 1].clone()]
    }

    pub fn blocks(&self) -> &[std::ops::Range<usize>] {
        &self.blocks
    }

    /// Wraps already-normalized block probabilities.
    pub fn from_probs(probs: ChannelMap, schema: &GroupSchema) -> Result<Self, HeadError> {
        let expected = schema.activation_count();
        if probs.channels != expected {
            return Err(HeadError::ChannelMismatch {
                expected,
                found: probs.channels,
            });
        }
        Ok(Self {
            probs,
            blocks: schema.block_ranges(),
        })
    }
}

/// Applies an independent softmax to every block.
pub fn grouped_softmax(logits: &LogitsMap, schema: &GroupSchema) -> Result<GroupedPrediction, HeadError> {
    let expected = schema.activation_count();
    if logits.channels != expected {
        return Err(HeadError::ChannelMismatch {
            expected,
            found: logits.channels,
        });
    }
    logits.check_finite()?;
    let blocks = schema.block_ranges();
    let mut probs = ChannelMap::zeros(logits.height, logits.width, logits.channels);
    for k in 0..logits.num_pixels() {
        let row = logits.pixel(k);
        let out = probs.pixel_mut(k);
        for b in &blocks {
            softmax_into(&row[b.clone()], &mut out[b.clone()]);
        }
    }
    Ok(GroupedPrediction { probs, blocks })
}

/// `max(0, p_i - (1 - q^i_0))` for every pixel and group, plus summary
/// statistics over the groups that carry a void slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub height: usize,
    pub width: usize,
    pub groups: usize,
    /// Pixel-major, one entry per group.
    pub values: Vec<f64>,
    pub summary: ViolationSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ViolationSummary {
    pub max: f64,
    pub mean: f64,
    pub fraction_positive: f64,
    /// Number of (pixel, group) entries the mean and fraction run over.
    pub entries: u64,
}

impl ViolationSummary {
    /// Pools two summaries as if computed over the union of entries.
    pub fn merge(&self, other: &ViolationSummary) -> ViolationSummary {
        let entries = self.entries + other.entries;
        if entries == 0 {
            return ViolationSummary::default();
        }
        let (a, b) = (self.entries as f64, other.entries as f64);
        let n = entries as f64;
        ViolationSummary {
            max: self.max.max(other.max),
            mean: (self.mean * a + other.mean * b) / n,
            fraction_positive: (self.fraction_positive * a + other.fraction_positive * b) / n,
            entries,
        }
    }
}

pub fn plausibility_violation(pred: &GroupedPrediction, schema: &GroupSchema) -> Violation {
    let groups = pred.num_groups();
    let px = pred.num_pixels();
    let mut values = vec![0.0; px * groups];
    let (mut max, mut sum, mut positive, mut entries) = (0.0f64, Vec::new(), 0u64, 0u64);
    for k in 0..px {
        let p = pred.p(k);
        for g in 0..groups {
            if !schema.has_void(g) {
                continue;
            }
            let v = (p[g] - (1.0 - pred.q(k, g)[0])).max(0.0);
            values[k * groups + g] = v;
            max = max.max(v);
            sum.push(v);
            positive += u64::from(v > 0.0);
            entries += 1;
        }
    }
    let mean = if entries > 0 { pairwise_sum(&sum) / entries as f64 } else { 0.0 };
    Violation {
        height: pred.height(),
        width: pred.width(),
        groups,
        values,
        summary: ViolationSummary {
            max,
            mean,
            fraction_positive: if entries > 0 { positive as f64 / entries as f64 } else { 0.0 },
            entries,
        },
    }
}

/// Sum with a fixed pairwise reduction tree.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: LogitsMap,
}

/// Mean cross-entropy of the flat head against the visible labels.
pub fn loss_ce(logits: &LogitsMap, visible: &LabelMap, schema: &GroupSchema) -> Result<LossValue, HeadError> {
    let n = schema.num_categories();
    if logits.channels != n {
        return Err(HeadError::ChannelMismatch {
            expected: n,
            found: logits.channels,
        });
    }
    if logits.height != visible.height() || logits.width != visible.width() {
        return Err(HeadError::Shape("logits and labels differ in size".into()));
    }
    logits.check_finite()?;
    let px = logits.num_pixels();
    let scale = 1.0 / px as f64;
    let mut grad = ChannelMap::zeros(logits.height, logits.width, n);
    let mut losses = Vec::with_capacity(px);
    let mut probs = vec![0.0; n];
    for (k, &c) in visible.as_slice().iter().enumerate() {
        let c = c as usize;
        if c >= n {
            return Err(HeadError::InvalidCategory { pixel: k, id: c });
        }
        softmax_into(logits.pixel(k), &mut probs);
        losses.push(-probs[c].max(PROB_FLOOR).ln());
        let g = grad.pixel_mut(k);
        for (gv, &pv) in g.iter_mut().zip(&probs) {
            *gv = pv * scale;
        }
        g[c] -= scale;
    }
    Ok(LossValue {
        loss: pairwise_sum(&losses) * scale,
        grad,
    })
}

/// Supervision of one softmax block at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockTarget {
    /// Position inside the block.
    pub slot: usize,
    pub weight: f64,
}

/// Per-pixel targets of every grouped-head block.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedTargets {
    pub num_pixels: usize,
    pub num_groups: usize,
    /// Visible group per pixel.
    pub visible_group: Vec<usize>,
    /// Pixel-major, one optional target per group.
    pub group_targets: Vec<Option<BlockTarget>>,
}

impl GroupedTargets {
    /// Derives block targets from region sets. A pixel in `Omega_i^void`
    /// of a group without a void slot gets no target for that group.
    pub fn from_regions(regions: &RegionSets, schema: &GroupSchema, lambda: f64) -> Result<Self, HeadError> {
        let n = schema.num_categories();
        let groups = schema.num_groups();
        let mismatch = |m: String| Err(HeadError::RegionMismatch(m));
        if regions.visible.len() != n || regions.present.len() != n || regions.occluded.len() != n {
            return mismatch(format!("expected {n} category sets"));
        }
        if regions.void.len() != groups {
            return mismatch(format!("expected {groups} void sets"));
        }
        let px = regions.num_pixels();
        let mut visible_group = vec![usize::MAX; px];
        for c in 0..n {
            let g = schema.group_of(c).expect("category in range").0;
            for k in regions.visible[c].pixels() {
                if visible_group[k] != usize::MAX {
                    return mismatch(format!("pixel {k} is visible in two categories"));
                }
                visible_group[k] = g;
            }
        }
        if let Some(k) = visible_group.iter().position(|&g| g == usize::MAX) {
            return mismatch(format!("pixel {k} has no visible category"));
        }
        let mut group_targets = vec![None; px * groups];
        for g in 0..groups {
            for c in schema.categories_in(g) {
                let j = schema.group_of(c).expect("category in range").1;
                let slot = schema.q_slot(g, j).expect("real category has a slot");
                for k in regions.present[c].pixels() {
                    let weight = if regions.visible[c].contains(k) { 1.0 } else { lambda };
                    if group_targets[k * groups + g].replace(BlockTarget { slot, weight }).is_some() {
                        return mismatch(format!("pixel {k}: two categories of group {g} present"));
                    }
                }
            }
            for k in regions.void[g].pixels() {
                if group_targets[k * groups + g].is_some() {
                    return mismatch(format!("pixel {k}: group {g} both void and present"));
                }
                if let Some(slot) = schema.q_slot(g, 0) {
                    group_targets[k * groups + g] = Some(BlockTarget { slot, weight: lambda });
                }
            }
            if schema.has_void(g) {
                if let Some(k) = (0..px).find(|&k| group_targets[k * groups + g].is_none()) {
                    return mismatch(format!("pixel {k}: group {g} neither void nor present"));
                }
            }
        }
        Ok(Self {
            num_pixels: px,
            num_groups: groups,
            visible_group,
            group_targets,
        })
    }
}

/// Grouped-head loss for precomputed targets.
pub fn loss_grouped_targets(
    logits: &LogitsMap,
    targets: &GroupedTargets,
    schema: &GroupSchema,
) -> Result<LossValue, HeadError> {
    let a = schema.activation_count();
    if logits.channels != a {
        return Err(HeadError::ChannelMismatch {
            expected: a,
            found: logits.channels,
        });
    }
    if logits.num_pixels() != targets.num_pixels || targets.num_groups != schema.num_groups() {
        return Err(HeadError::Shape("logits and targets differ in size".into()));
    }
    logits.check_finite()?;
    let px = logits.num_pixels();
    let groups = schema.num_groups();
    let blocks = schema.block_ranges();
    let scale = 1.0 / px as f64;
    let mut grad = ChannelMap::zeros(logits.height, logits.width, a);
    let mut losses = Vec::with_capacity(px);
    let mut probs = vec![0.0; a];
    for k in 0..px {
        let row = logits.pixel(k);
        for b in &blocks {
            softmax_into(&row[b.clone()], &mut probs[b.clone()]);
        }
        let g = grad.pixel_mut(k);
        let mut pixel_loss = 0.0;
        let mut apply = |block: &std::ops::Range<usize>, slot: usize, weight: f64| {
            let pb = &probs[block.clone()];
            pixel_loss -= weight * pb[slot].max(PROB_FLOOR).ln();
            let gb = &mut g[block.clone()];
            for (gv, &pv) in gb.iter_mut().zip(pb) {
                *gv += weight * scale * pv;
            }
            gb[slot] -= weight * scale;
        };
        apply(&blocks[0], targets.visible_group[k], 1.0);
        for (gi, t) in targets.group_targets[k * groups..(k + 1) * groups].iter().enumerate() {
            if let Some(t) = t {
                if t.weight != 0.0 {
                    apply(&blocks[gi + 1], t.slot, t.weight);
                }
            }
        }
        losses.push(pixel_loss);
    }
    Ok(LossValue {
        loss: pairwise_sum(&losses) * scale,
        grad,
    })
}

/// Grouped-head loss: visible group term plus per-group terms, occluded
/// and void supervision weighted by `lambda`.
pub fn loss_grouped(
    logits: &LogitsMap,
    regions: &RegionSets,
    schema: &GroupSchema,
    lambda: f64,
) -> Result<LossValue, HeadError> {
    if logits.height != regions.height || logits.width != regions.width {
        return Err(HeadError::Shape("logits and regions differ in size".into()));
    }
    let targets = GroupedTargets::from_regions(regions, schema, lambda)?;
    loss_grouped_targets(logits, &targets, schema)
}
