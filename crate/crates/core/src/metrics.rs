//! Occlusion-aware segmentation metrics.
//!
//! Visible metrics compare visible sets; present metrics compare present
//! (visible or occluded) sets. Both heads are mapped to the same pair of
//! predicted sets per category: the flat head predicts visible labels
//! directly and present sets through a restricted argmax, the grouped head
//! predicts present sets directly and visible labels through the group
//! block. All argmax ties go to the lowest index.
//!
//! Aggregation across samples is micro-averaged: set sizes are summed
//! first, ratios taken last.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Grid, LabelMap, Mask, RegionSets};
use crate::head::{plausibility_violation, ChannelMap, GroupedPrediction, ViolationSummary};
use crate::schema::GroupSchema;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image domains differ: {0}")]
    DomainMismatch(String),
    #[error("no class has a nonempty union")]
    NoClasses,
    #[error("nothing to evaluate")]
    Empty,
    #[error("prediction has {found} channels, expected {expected}")]
    Channels { expected: usize, found: usize },
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted visible and present sets per category.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMasks {
    pub height: usize,
    pub width: usize,
    pub visible: Vec<Mask>,
    pub present: Vec<Mask>,
}

/// One mask per category from a label map.
pub fn masks_from_labels(labels: &LabelMap, num_categories: usize) -> Vec<Mask> {
    let mut out = vec![Mask::empty(labels.len()); num_categories];
    for (k, &c) in labels.as_slice().iter().enumerate() {
        out[c as usize].insert(k);
    }
    out
}

/// Visible labels of the grouped head: the most likely group, then its
/// most likely non-void category.
pub fn derive_vis_from_gss(pred: &GroupedPrediction, schema: &GroupSchema) -> LabelMap {
    let data = (0..pred.num_pixels())
        .map(|k| {
            let group = argmax(pred.p(k));
            let q = pred.q(k, group);
            let first_real = usize::from(schema.has_void(group));
            let slot = first_real + argmax(&q[first_real..]);
            schema
                .category_of(group, schema.slot_index(group, slot))
                .expect("slot maps to a category") as u16
        })
        .collect();
    Grid::from_vec(pred.height(), pred.width(), data).expect("pixel count matches")
}

/// Present sets of the grouped head: category `C(i, j)` is present where
/// `j` is the argmax of `q^i`, void included.
pub fn derive_pres_from_gss(pred: &GroupedPrediction, schema: &GroupSchema) -> Vec<Mask> {
    let px = pred.num_pixels();
    let mut out = vec![Mask::empty(px); schema.num_categories()];
    for k in 0..px {
        for g in 0..schema.num_groups() {
            let j = schema.slot_index(g, argmax(pred.q(k, g)));
            if j > 0 {
                out[schema.category_of(g, j).expect("valid slot")].insert(k);
            }
        }
    }
    out
}

/// How background probabilities collapse into a void pseudo-entry when
/// present sets are read off a flat posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoidPooling {
    #[default]
    Max,
    Sum,
}

/// Present sets of the flat head. For a foreground group the posterior is
/// restricted to that group plus the pooled background entry (placed
/// first, so it wins ties); background categories use an argmax over the
/// background group alone.
pub fn derive_pres_from_dss(posterior: &ChannelMap, schema: &GroupSchema, pooling: VoidPooling) -> Vec<Mask> {
    let px = posterior.num_pixels();
    let mut out = vec![Mask::empty(px); schema.num_categories()];
    let background = schema.categories_in(0);
    let mut restricted = Vec::new();
    for k in 0..px {
        let row = posterior.pixel(k);
        let bg = &row[background.clone()];
        out[background.start + argmax(bg)].insert(k);
        let pooled = match pooling {
            VoidPooling::Max => bg.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            VoidPooling::Sum => bg.iter().sum(),
        };
        for g in 1..schema.num_groups() {
            let cats = schema.categories_in(g);
            restricted.clear();
            restricted.push(pooled);
            restricted.extend_from_slice(&row[cats.clone()]);
            let best = argmax(&restricted);
            if best > 0 {
                out[cats.start + best - 1].insert(k);
            }
        }
    }
    out
}

/// Argmax labels of a flat posterior.
pub fn flat_labels(posterior: &ChannelMap) -> LabelMap {
    let data = (0..posterior.num_pixels())
        .map(|k| argmax(posterior.pixel(k)) as u16)
        .collect();
    Grid::from_vec(posterior.height, posterior.width, data).expect("pixel count matches")
}

impl PredictionMasks {
    pub fn from_grouped(pred: &GroupedPrediction, schema: &GroupSchema) -> Self {
        Self {
            height: pred.height(),
            width: pred.width(),
            visible: masks_from_labels(&derive_vis_from_gss(pred, schema), schema.num_categories()),
            present: derive_pres_from_gss(pred, schema),
        }
    }

    pub fn from_flat(posterior: &ChannelMap, schema: &GroupSchema, pooling: VoidPooling) -> Self {
        Self {
            height: posterior.height,
            width: posterior.width,
            visible: masks_from_labels(&flat_labels(posterior), schema.num_categories()),
            present: derive_pres_from_dss(posterior, schema, pooling),
        }
    }

    /// The ground truth itself as a prediction.
    pub fn from_regions(regions: &RegionSets) -> Self {
        Self {
            height: regions.height,
            width: regions.width,
            visible: regions.visible.clone(),
            present: regions.present.clone(),
        }
    }
}

/// Intersection/union bookkeeping of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
    pub truth: u64,
    pub predicted: u64,
}

impl ClassCounts {
    fn of(truth: &Mask, pred: &Mask) -> Self {
        Self {
            intersection: truth.intersection_count(pred) as u64,
            union: truth.union_count(pred) as u64,
            truth: truth.count() as u64,
            predicted: pred.count() as u64,
        }
    }

    fn add(&mut self, other: &Self) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.truth += other.truth;
        self.predicted += other.predicted;
    }

    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// An exact ratio of pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

/// Summable per-class counts from which every metric is computed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetricCounts {
    pub pixels: u64,
    pub visible: Vec<ClassCounts>,
    pub present: Vec<ClassCounts>,
    /// Per group; `None` for a group without a void slot.
    pub void: Vec<Option<ClassCounts>>,
}

impl MetricCounts {
    pub fn compute(gt: &RegionSets, pred: &PredictionMasks, schema: &GroupSchema) -> Result<Self, MetricsError> {
        if gt.height != pred.height || gt.width != pred.width {
            return Err(MetricsError::DomainMismatch(format!(
                "{}x{} vs {}x{}",
                gt.height, gt.width, pred.height, pred.width
            )));
        }
        let n = schema.num_categories();
        if gt.visible.len() != n || pred.visible.len() != n || pred.present.len() != n {
            return Err(MetricsError::DomainMismatch(format!("expected {n} categories")));
        }
        let px = gt.num_pixels();
        if pred.visible.iter().chain(&pred.present).any(|m| m.len() != px) {
            return Err(MetricsError::DomainMismatch("mask length differs from image".into()));
        }
        let visible = (0..n).map(|c| ClassCounts::of(&gt.visible[c], &pred.visible[c])).collect();
        let present = (0..n).map(|c| ClassCounts::of(&gt.present[c], &pred.present[c])).collect();
        let void = (0..schema.num_groups())
            .map(|g| {
                schema.has_void(g).then(|| {
                    let cats: Vec<&Mask> = schema.categories_in(g).map(|c| &pred.present[c]).collect();
                    let predicted_void = Mask::from_fn(px, |k| !cats.iter().any(|m| m.contains(k)));
                    ClassCounts::of(&gt.void[g], &predicted_void)
                })
            })
            .collect();
        Ok(Self {
            pixels: px as u64,
            visible,
            present,
            void,
        })
    }

    pub fn add(&mut self, other: &Self) {
        if self.visible.is_empty() {
            *self = other.clone();
            return;
        }
        self.pixels += other.pixels;
        for (a, b) in self.visible.iter_mut().zip(&other.visible) {
            a.add(b);
        }
        for (a, b) in self.present.iter_mut().zip(&other.present) {
            a.add(b);
        }
        for (a, b) in self.void.iter_mut().zip(&other.void) {
            if let (Some(a), Some(b)) = (a, b) {
                a.add(b);
            }
        }
    }

    fn void_counts(&self) -> impl Iterator<Item = &ClassCounts> {
        self.void.iter().flatten()
    }

    pub fn pa_vis_ratio(&self) -> Ratio {
        Ratio {
            num: self.visible.iter().map(|c| c.intersection).sum(),
            den: self.pixels,
        }
    }

    /// Present accuracy: summed intersections over `|Omega|`.
    /// Exceeds 1 when several categories are present per pixel.
    pub fn pa_pres_ratio(&self, with_void: bool) -> Ratio {
        let mut num: u64 = self.present.iter().map(|c| c.intersection).sum();
        if with_void {
            num += self.void_counts().map(|c| c.intersection).sum::<u64>();
        }
        Ratio { num, den: self.pixels }
    }

    /// Present accuracy normalized by the total ground-truth present area.
    pub fn pa_pres_normalized_ratio(&self, with_void: bool) -> Ratio {
        let mut num: u64 = self.present.iter().map(|c| c.intersection).sum();
        let mut den: u64 = self.present.iter().map(|c| c.truth).sum();
        if with_void {
            num += self.void_counts().map(|c| c.intersection).sum::<u64>();
            den += self.void_counts().map(|c| c.truth).sum::<u64>();
        }
        Ratio { num, den }
    }

    pub fn pa_vis(&self) -> f64 {
        self.pa_vis_ratio().value()
    }

    pub fn pa_pres(&self, with_void: bool) -> f64 {
        self.pa_pres_ratio(with_void).value()
    }

    pub fn pa_pres_normalized(&self, with_void: bool) -> f64 {
        self.pa_pres_normalized_ratio(with_void).value()
    }

    pub fn miou_vis(&self) -> Result<f64, MetricsError> {
        mean_iou(self.visible.iter())
    }

    pub fn miou_pres(&self, with_void: bool) -> Result<f64, MetricsError> {
        if with_void {
            mean_iou(self.present.iter().chain(self.void_counts()))
        } else {
            mean_iou(self.present.iter())
        }
    }
}

/// Mean IoU over classes with a nonempty union.
fn mean_iou<'a>(classes: impl Iterator<Item = &'a ClassCounts>) -> Result<f64, MetricsError> {
    let ious: Vec<f64> = classes.filter_map(ClassCounts::iou).collect();
    if ious.is_empty() {
        return Err(MetricsError::NoClasses);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn pa_vis(gt: &RegionSets, pred: &PredictionMasks, schema: &GroupSchema) -> Result<f64, MetricsError> {
    Ok(MetricCounts::compute(gt, pred, schema)?.pa_vis())
}

pub fn miou_vis(gt: &RegionSets, pred: &PredictionMasks, schema: &GroupSchema) -> Result<f64, MetricsError> {
    MetricCounts::compute(gt, pred, schema)?.miou_vis()
}

pub fn pa_pres(gt: &RegionSets, pred: &PredictionMasks, schema: &GroupSchema, with_void: bool) -> Result<f64, MetricsError> {
    Ok(MetricCounts::compute(gt, pred, schema)?.pa_pres(with_void))
}

pub fn miou_pres(gt: &RegionSets, pred: &PredictionMasks, schema: &GroupSchema, with_void: bool) -> Result<f64, MetricsError> {
    MetricCounts::compute(gt, pred, schema)?.miou_pres(with_void)
}

/// A model output in either head's form, or ready-made masks.
#[derive(Debug, Clone)]
pub enum Prediction {
    Flat(ChannelMap),
    Grouped(GroupedPrediction),
    Masks(PredictionMasks),
}

/// Per-sample evaluation result, aggregated by [`build_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub counts: MetricCounts,
    pub violation: Option<ViolationSummary>,
    /// Pixels whose predicted visible category is also predicted present,
    /// out of all pixels.
    pub containment: Ratio,
}

pub fn evaluate_sample(
    gt: &RegionSets,
    prediction: &Prediction,
    schema: &GroupSchema,
    pooling: VoidPooling,
) -> Result<SampleEval, MetricsError> {
    let (masks, violation) = match prediction {
        Prediction::Flat(post) => {
            if post.channels != schema.num_categories() {
                return Err(MetricsError::Channels {
                    expected: schema.num_categories(),
                    found: post.channels,
                });
            }
            (PredictionMasks::from_flat(post, schema, pooling), None)
        }
        Prediction::Grouped(pred) => (
            PredictionMasks::from_grouped(pred, schema),
            Some(plausibility_violation(pred, schema).summary),
        ),
        Prediction::Masks(m) => (m.clone(), None),
    };
    let counts = MetricCounts::compute(gt, &masks, schema)?;
    let contained = (0..gt.num_pixels())
        .filter(|&k| {
            masks
                .visible
                .iter()
                .zip(&masks.present)
                .any(|(v, p)| v.contains(k) && p.contains(k))
        })
        .count();
    Ok(SampleEval {
        counts,
        violation,
        containment: Ratio {
            num: contained as u64,
            den: gt.num_pixels() as u64,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentMetrics {
    /// Summed intersections over the pixel count; may exceed 1.
    pub pa_pres: f64,
    pub pa_pres_normalized: f64,
    pub miou_pres: Option<f64>,
    pub pa_pres_exceeds_one: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub pa_vis: f64,
    pub miou_vis: Option<f64>,
    pub present_with_void: PresentMetrics,
    pub present_without_void: PresentMetrics,
}

impl MetricSet {
    pub fn from_counts(c: &MetricCounts) -> Self {
        let present = |with_void| PresentMetrics {
            pa_pres: c.pa_pres(with_void),
            pa_pres_normalized: c.pa_pres_normalized(with_void),
            miou_pres: c.miou_pres(with_void).ok(),
            pa_pres_exceeds_one: c.pa_pres(with_void) > 1.0,
        };
        Self {
            pa_vis: c.pa_vis(),
            miou_vis: c.miou_vis().ok(),
            present_with_void: present(true),
            present_without_void: present(false),
        }
    }

    fn mean(sets: &[MetricSet]) -> Self {
        let n = sets.len() as f64;
        let avg = |f: &dyn Fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&MetricSet) -> Option<f64>| {
            let v: Vec<f64> = sets.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let present = |pick: &dyn Fn(&MetricSet) -> &PresentMetrics| {
            let pa = avg(&|s| pick(s).pa_pres);
            PresentMetrics {
                pa_pres: pa,
                pa_pres_normalized: avg(&|s| pick(s).pa_pres_normalized),
                miou_pres: avg_opt(&|s| pick(s).miou_pres),
                pa_pres_exceeds_one: pa > 1.0,
            }
        };
        Self {
            pa_vis: avg(&|s| s.pa_vis),
            miou_vis: avg_opt(&|s| s.miou_vis),
            present_with_void: present(&|s| &s.present_with_void),
            present_without_void: present(&|s| &s.present_without_void),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub iou_vis: Option<f64>,
    pub iou_pres: Option<f64>,
    pub visible: ClassCounts,
    pub present: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub mode: String,
    pub sample_count: u64,
    pub pixel_count: u64,
    /// Micro-averaged over all pixels of all samples.
    pub metrics: MetricSet,
    /// Mean of per-sample metrics, for diagnostics.
    pub macro_metrics: MetricSet,
    pub per_class: BTreeMap<String, ClassRow>,
    pub per_group_void: BTreeMap<String, Option<ClassRow>>,
    pub plausibility: Option<ViolationSummary>,
    pub visible_in_present_fraction: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Aggregates per-sample results in the given order.
pub fn build_report(mode: &str, evals: &[SampleEval], schema: &GroupSchema) -> Result<EvalReport, MetricsError> {
    if evals.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = MetricCounts::default();
    let mut violation: Option<ViolationSummary> = None;
    let (mut contained, mut pixels) = (0u64, 0u64);
    for e in evals {
        total.add(&e.counts);
        if let Some(v) = &e.violation {
            violation = Some(violation.map_or(*v, |acc| acc.merge(v)));
        }
        contained += e.containment.num;
        pixels += e.containment.den;
    }
    let per_sample: Vec<MetricSet> = evals.iter().map(|e| MetricSet::from_counts(&e.counts)).collect();
    let per_class = (0..schema.num_categories())
        .map(|c| {
            (
                schema.category_name(c).to_string(),
                ClassRow {
                    iou_vis: total.visible[c].iou(),
                    iou_pres: total.present[c].iou(),
                    visible: total.visible[c],
                    present: total.present[c],
                },
            )
        })
        .collect();
    let per_group_void = schema
        .groups()
        .iter()
        .zip(&total.void)
        .map(|(g, v)| {
            (
                g.name.clone(),
                v.map(|v| ClassRow {
                    iou_vis: None,
                    iou_pres: v.iou(),
                    visible: ClassCounts::default(),
                    present: v,
                }),
            )
        })
        .collect();
    Ok(EvalReport {
        report_version: REPORT_VERSION,
        mode: mode.to_string(),
        sample_count: evals.len() as u64,
        pixel_count: total.pixels,
        metrics: MetricSet::from_counts(&total),
        macro_metrics: MetricSet::mean(&per_sample),
        per_class,
        per_group_void,
        plausibility: violation,
        visible_in_present_fraction: Ratio { num: contained, den: pixels }.value(),
    })
}
