//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every tolerance is pinned below.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use gss_core::dataset::{regions_from_sample, Dataset, Grid, Mask, Sample, Split};
use gss_core::head::{self, ChannelMap, GroupedPrediction};
use gss_core::metrics::{self, MetricCounts, PredictionMasks, VoidPooling};
use gss_core::net::optim::TrainConfig;
use gss_core::net::train::{self, TrainOptions, CHECKPOINT_FILE, HISTORY_FILE};
use gss_core::net::Tensor;
use gss_core::scenegen::{generate_dataset, RejectionThresholds, SceneSpec};
use gss_core::schema::presets;
use gss_core::{GroupSchema, Mode, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1_MIN_INSTANCES: usize = 50;
const C1_MAX_REL_ERR: f64 = 1e-4;
const C1_REL_FLOOR: f64 = 1e-4;
const C1_MAX_TIME: Duration = Duration::from_secs(10);
const C2_MAX_REL_ERR: f64 = 1e-3;
const C2_REL_FLOOR: f64 = 1e-6;
const C2_MAX_TIME: Duration = Duration::from_secs(60);
const C3_PIXELS: usize = 10_000;
const C3_SUM_TOL: f64 = 1e-6;
const C3_SHIFT_TOL: f64 = 1e-9;
const C4_SCHEMAS: usize = 100;
const C4_INDOOR: usize = 46;
const C5_MAX_TIME: Duration = Duration::from_secs(30);
const C5_RANDOM_PER_SIZE: usize = 1_000;
const C5_VALUE_TOL: f64 = 1e-12;
const C6_PREDICTIONS: usize = 1_000;
const C7_TOL: f64 = 1e-9;
const C7_LAMBDA: f64 = 0.1;
const C8_TRAIN: usize = 500;
const C8_TEST: usize = 100;
const C8_SEED: u64 = 2024;
const C8_LEARNING_RATE: f64 = 1e-2;
const C8_VIS_GAP: f64 = 0.05;
const C8_MAX_TIME: Duration = Duration::from_secs(45 * 60);
const C9_MAX_MEAN_VIOLATION: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- helpers

fn random_schema(rng: &mut ChaCha8Rng, void_bg: bool) -> GroupSchema {
    let groups = rng.gen_range(1..=5);
    let mut next = 0;
    let spec: Vec<(String, Vec<String>)> = (0..groups)
        .map(|g| {
            let size = rng.gen_range(1..=4);
            let cats = (0..size)
                .map(|_| {
                    next += 1;
                    format!("c{next}")
                })
                .collect();
            (format!("g{g}"), cats)
        })
        .collect();
    GroupSchema::build(spec, void_bg).unwrap()
}

/// A random label-consistent sample: every pixel picks a visible group
/// and category; other groups are void or hold a random category. The
/// background group is never void unless it has a void slot.
fn random_sample(rng: &mut ChaCha8Rng, schema: &GroupSchema, h: usize, w: usize) -> Sample {
    let groups = schema.num_groups();
    let mut visible = Grid::filled(h, w, 0u16);
    let mut maps = vec![Grid::filled(h, w, 0u16); groups];
    for k in 0..h * w {
        let vg = rng.gen_range(0..groups);
        for (g, map) in maps.iter_mut().enumerate() {
            let size = schema.group_size(g);
            let j = if g == vg {
                rng.gen_range(1..=size)
            } else if g == 0 && !schema.has_void(0) {
                rng.gen_range(1..=size)
            } else {
                rng.gen_range(0..=size)
            };
            map.as_mut_slice()[k] = j as u16;
        }
        let j = maps[vg].as_slice()[k] as usize;
        visible.as_mut_slice()[k] = schema.category_of(vg, j).unwrap() as u16;
    }
    Sample {
        depth: Grid::filled(h, w, 1.0),
        visible,
        group_maps: maps,
        num_categories: schema.num_categories(),
    }
}

/// Relative error with an absolute floor on the denominator.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for i in 0..C1_MIN_INSTANCES {
        let schema = random_schema(&mut rng, i % 2 == 0);
        let (hh, ww) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let sample = random_sample(&mut rng, &schema, hh, ww);
        let regions = regions_from_sample(&sample, &schema).unwrap();
        for grouped in [false, true] {
            let channels = if grouped {
                schema.activation_count()
            } else {
                schema.num_categories()
            };
            let data: Vec<f64> = (0..hh * ww * channels).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let logits = ChannelMap::from_vec(hh, ww, channels, data).unwrap();
            let eval = |l: &ChannelMap| {
                if grouped {
                    head::loss_grouped(l, &regions, &schema, C7_LAMBDA).unwrap()
                } else {
                    head::loss_ce(l, &sample.visible, &schema).unwrap()
                }
            };
            let analytic = eval(&logits).grad;
            for k in 0..logits.data.len() {
                let mut plus = logits.clone();
                plus.data[k] += h;
                let mut minus = logits.clone();
                minus.data[k] -= h;
                let fd = (eval(&plus).loss - eval(&minus).loss) / (2.0 * h);
                worst = worst.max(rel_err(analytic.data[k], fd, C1_REL_FLOOR));
            }
            instances += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        worst < C1_MAX_REL_ERR && t < C1_MAX_TIME,
        format!("{instances} instances, max rel err {worst:.2e} (< {C1_MAX_REL_ERR:e}), {t:.2?}"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let schema = presets::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = random_sample(&mut rng, &schema, 8, 8);
    let regions = regions_from_sample(&sample, &schema).unwrap();
    let cfg = ModelConfig {
        base_width: 4,
        levels: 2,
        ..ModelConfig::for_schema(Mode::Gss, &schema)
    };
    let mut model = Model::<f64>::new(cfg, 5).unwrap();
    // a random head lets gradients reach every trunk block
    for b in model.blocks.iter_mut().filter(|b| b.name.starts_with("head.")) {
        for v in &mut b.data {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    model.bump_version();
    let x = Tensor {
        channels: 1,
        height: 8,
        width: 8,
        data: (0..64).map(|_| rng.gen_range(1.0..10.0)).collect(),
    };
    let loss_of = |m: &Model<f64>| {
        let (y, _) = m.forward(&x).unwrap();
        head::loss_grouped(&gss_core::net::tensor_to_map(&y), &regions, &schema, C7_LAMBDA)
            .unwrap()
            .loss
    };
    let (y, cache) = model.forward(&x).unwrap();
    let lv = head::loss_grouped(&gss_core::net::tensor_to_map(&y), &regions, &schema, C7_LAMBDA).unwrap();
    let grads = model.backward(cache, &gss_core::net::map_to_tensor(&lv.grad)).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for bi in 0..model.blocks.len() {
        let n = model.blocks[bi].data.len();
        for _ in 0..16.min(n) {
            let k = rng.gen_range(0..n);
            let mut plus = model.clone();
            plus.blocks[bi].data[k] += h;
            let mut minus = model.clone();
            minus.blocks[bi].data[k] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(grads[bi][k], fd, C2_REL_FLOOR));
            checked += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        worst < C2_MAX_REL_ERR && t < C2_MAX_TIME,
        format!("{checked} sampled parameters, max rel err {worst:.2e} (< {C2_MAX_REL_ERR:e}), {t:.2?}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let schema = presets::indoor(true);
    let a = schema.activation_count();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..C3_PIXELS * a).map(|_| rng.gen_range(-20.0..20.0)).collect();
    let logits = ChannelMap::from_vec(100, C3_PIXELS / 100, a, data).unwrap();
    let pred = head::grouped_softmax(&logits, &schema).unwrap();
    let blocks = schema.block_ranges();
    let mut worst_sum: f64 = 0.0;
    let mut shifted = logits.clone();
    for k in 0..C3_PIXELS {
        let row = pred.probs.pixel(k);
        for b in &blocks {
            let s: f64 = row[b.clone()].iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        let px = shifted.pixel_mut(k);
        for b in &blocks {
            let c = rng.gen_range(-100.0..100.0);
            for v in &mut px[b.clone()] {
                *v += c;
            }
        }
    }
    let pred2 = head::grouped_softmax(&shifted, &schema).unwrap();
    let worst_shift = pred
        .probs
        .data
        .iter()
        .zip(&pred2.probs.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    outcome(
        worst_sum <= C3_SUM_TOL && worst_shift <= C3_SHIFT_TOL,
        format!("{C3_PIXELS} pixels: max |sum - 1| {worst_sum:.1e}, max shift change {worst_shift:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for _ in 0..C4_SCHEMAS {
        let s = random_schema(&mut rng, true);
        let m_plus_1 = s.num_groups();
        if s.activation_count() != 2 * m_plus_1 + s.num_categories() {
            bad += 1;
        }
    }
    let indoor = presets::indoor(true).activation_count();
    outcome(
        bad == 0 && indoor == C4_INDOOR,
        format!("{C4_SCHEMAS} random schemas, {bad} mismatches; indoor preset count {indoor}"),
    )
}

// ---------------------------------------------------------------- 5

/// Pixel-set oracle: builds every region as a set of coordinates straight
/// from the label maps and counts with set operations.
struct Oracle {
    pixels: u64,
    /// Per class (intersection, union) for visible, present, void.
    vis: Vec<(u64, u64)>,
    pres: Vec<(u64, u64)>,
    void: Vec<(u64, u64)>,
    pres_truth: u64,
    void_truth: u64,
}

type PixelSet = BTreeSet<(usize, usize)>;

fn oracle(schema: &GroupSchema, gt: &Sample, pred_vis: &[u16], pred_pres: &[Vec<bool>]) -> Oracle {
    let (h, w) = (gt.height(), gt.width());
    let coords = || (0..h).flat_map(move |r| (0..w).map(move |c| (r, c)));
    let n = schema.num_categories();
    let at = |r: usize, c: usize| r * w + c;
    let pair = |a: &PixelSet, b: &PixelSet| (a.intersection(b).count() as u64, a.union(b).count() as u64);
    let mut vis = Vec::new();
    let mut pres = Vec::new();
    let mut pres_truth = 0;
    for cat in 0..n {
        let (g, j) = schema.group_of(cat).unwrap();
        let t_vis: PixelSet = coords().filter(|&(r, c)| gt.visible.get(r, c) as usize == cat).collect();
        let p_vis: PixelSet = coords().filter(|&(r, c)| pred_vis[at(r, c)] as usize == cat).collect();
        let t_pres: PixelSet = coords().filter(|&(r, c)| gt.group_maps[g].get(r, c) as usize == j).collect();
        let p_pres: PixelSet = coords().filter(|&(r, c)| pred_pres[cat][at(r, c)]).collect();
        vis.push(pair(&t_vis, &p_vis));
        pres.push(pair(&t_pres, &p_pres));
        pres_truth += t_pres.len() as u64;
    }
    let mut void = Vec::new();
    let mut void_truth = 0;
    for g in 0..schema.num_groups() {
        if !schema.has_void(g) {
            continue;
        }
        let t: PixelSet = coords().filter(|&(r, c)| gt.group_maps[g].get(r, c) == 0).collect();
        let p: PixelSet = coords()
            .filter(|&(r, c)| !schema.categories_in(g).any(|cat| pred_pres[cat][at(r, c)]))
            .collect();
        void.push(pair(&t, &p));
        void_truth += t.len() as u64;
    }
    Oracle {
        pixels: (h * w) as u64,
        vis,
        pres,
        void,
        pres_truth,
        void_truth,
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact mean of `i/u` over classes with `u > 0`, as a reduced fraction.
fn exact_mean_iou(classes: &[(u64, u64)]) -> Option<(u128, u128)> {
    let used: Vec<_> = classes.iter().filter(|c| c.1 > 0).collect();
    if used.is_empty() {
        return None;
    }
    let (mut num, mut den) = (0u128, 1u128);
    for &&(i, u) in &used {
        num = num * u as u128 + i as u128 * den;
        den *= u as u128;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den *= used.len() as u128;
    let g = gcd(num, den);
    Some((num / g, den / g))
}

fn same_ratio(a: (u64, u64), b: (u64, u64)) -> bool {
    a.0 as u128 * b.1 as u128 == b.0 as u128 * a.1 as u128 && (a.1 == 0) == (b.1 == 0)
}

fn check_case(schema: &GroupSchema, gt: &Sample, pred_vis: &[u16], pred_pres: &[Vec<bool>]) -> Result<(), String> {
    let regions = regions_from_sample(gt, schema).unwrap();
    let px = gt.num_pixels();
    let n = schema.num_categories();
    let masks = PredictionMasks {
        height: gt.height(),
        width: gt.width(),
        visible: (0..n).map(|c| Mask::from_fn(px, |k| pred_vis[k] as usize == c)).collect(),
        present: pred_pres.iter().map(|v| Mask::from_fn(px, |k| v[k])).collect(),
    };
    let lib = MetricCounts::compute(&regions, &masks, schema).map_err(|e| e.to_string())?;
    let o = oracle(schema, gt, pred_vis, pred_pres);
    let ratio = |r: metrics::Ratio| (r.num, r.den);
    let sum = |v: &[(u64, u64)]| v.iter().map(|c| c.0).sum::<u64>();
    let checks = [
        ("PA_vis", ratio(lib.pa_vis_ratio()), (sum(&o.vis), o.pixels)),
        ("PA_pres", ratio(lib.pa_pres_ratio(false)), (sum(&o.pres), o.pixels)),
        ("PA_pres+void", ratio(lib.pa_pres_ratio(true)), (sum(&o.pres) + sum(&o.void), o.pixels)),
        ("PA_pres norm", ratio(lib.pa_pres_normalized_ratio(false)), (sum(&o.pres), o.pres_truth)),
        (
            "PA_pres norm+void",
            ratio(lib.pa_pres_normalized_ratio(true)),
            (sum(&o.pres) + sum(&o.void), o.pres_truth + o.void_truth),
        ),
    ];
    for (name, got, want) in checks {
        if !same_ratio(got, want) {
            return Err(format!("{name}: library {got:?}, oracle {want:?}"));
        }
    }
    let pres_void: Vec<(u64, u64)> = o.pres.iter().chain(&o.void).copied().collect();
    let mious = [
        ("MIoU_vis", lib.miou_vis().ok(), &o.vis),
        ("MIoU_pres", lib.miou_pres(false).ok(), &o.pres),
        ("MIoU_pres+void", lib.miou_pres(true).ok(), &pres_void),
    ];
    for (name, got, classes) in mious {
        let want = exact_mean_iou(classes);
        match (got, want) {
            (None, None) => {}
            (Some(v), Some((p, q))) => {
                // the per-class ratios entering the mean are checked exactly
                let lib_classes: Vec<(u64, u64)> = match name {
                    "MIoU_vis" => lib.visible.iter().map(|c| (c.intersection, c.union)).collect(),
                    "MIoU_pres" => lib.present.iter().map(|c| (c.intersection, c.union)).collect(),
                    _ => lib
                        .present
                        .iter()
                        .chain(lib.void.iter().flatten())
                        .map(|c| (c.intersection, c.union))
                        .collect(),
                };
                if lib_classes != *classes {
                    return Err(format!("{name}: class counts {lib_classes:?} vs {classes:?}"));
                }
                if (v - p as f64 / q as f64).abs() > C5_VALUE_TOL {
                    return Err(format!("{name}: library {v}, oracle {p}/{q}"));
                }
            }
            _ => return Err(format!("{name}: library {got:?}, oracle {want:?}")),
        }
    }
    Ok(())
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let schemas = [
        GroupSchema::build([("bg", vec!["a", "b"]), ("g1", vec!["c", "d"]), ("g2", vec!["e", "f"])], false).unwrap(),
        GroupSchema::build([("bg", vec!["a", "b"]), ("g1", vec!["c", "d"]), ("g2", vec!["e", "f"])], true).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0usize;
    // exhaustive on 1x1: every labelling of the ground truth and every
    // prediction (visible label x subset of present categories)
    for schema in &schemas {
        let n = schema.num_categories();
        let mut truths = Vec::new();
        for vg in 0..3 {
            let ranges: Vec<Vec<usize>> = (0..3)
                .map(|g| {
                    let lo = if g == vg || (g == 0 && !schema.has_void(0)) { 1 } else { 0 };
                    (lo..=2).collect()
                })
                .collect();
            for &a in &ranges[0] {
                for &b in &ranges[1] {
                    for &c in &ranges[2] {
                        let js = [a, b, c];
                        let vis = schema.category_of(vg, js[vg]).unwrap() as u16;
                        truths.push(Sample {
                            depth: Grid::filled(1, 1, 1.0),
                            visible: Grid::filled(1, 1, vis),
                            group_maps: js.iter().map(|&j| Grid::filled(1, 1, j as u16)).collect(),
                            num_categories: n,
                        });
                    }
                }
            }
        }
        for gt in &truths {
            for v in 0..n as u16 {
                for subset in 0u32..(1 << n) {
                    let pres: Vec<Vec<bool>> = (0..n).map(|c| vec![subset >> c & 1 == 1]).collect();
                    if let Err(e) = check_case(schema, gt, &[v], &pres) {
                        return outcome(false, format!("1x1 case: {e}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    for h in 1..=4 {
        for w in 1..=4 {
            for i in 0..C5_RANDOM_PER_SIZE {
                let schema = &schemas[i % 2];
                let n = schema.num_categories();
                let gt = random_sample(&mut rng, schema, h, w);
                let pred_vis: Vec<u16> = (0..h * w).map(|_| rng.gen_range(0..n as u16)).collect();
                let density = rng.gen_range(0.0..1.0);
                let pred_pres: Vec<Vec<bool>> =
                    (0..n).map(|_| (0..h * w).map(|_| rng.gen_bool(density)).collect()).collect();
                if let Err(e) = check_case(schema, &gt, &pred_vis, &pred_pres) {
                    return outcome(false, format!("{h}x{w} case: {e}"));
                }
                cases += 1;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        t < C5_MAX_TIME,
        format!("{cases} cases (1x1 exhaustive, up to 4x4 random) match the oracle, {t:.2?}"),
    )
}

// ---------------------------------------------------------------- 6

fn lowest_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One-hot grouped prediction encoding a ground-truth sample.
fn one_hot(sample: &Sample, schema: &GroupSchema) -> GroupedPrediction {
    let a = schema.activation_count();
    let (h, w) = (sample.height(), sample.width());
    let mut probs = ChannelMap::zeros(h, w, a);
    let blocks = schema.block_ranges();
    for k in 0..h * w {
        let (vg, _) = schema.group_of(sample.visible.as_slice()[k] as usize).unwrap();
        let px = probs.pixel_mut(k);
        px[blocks[0].start + vg] = 1.0;
        for g in 0..schema.num_groups() {
            let j = sample.group_maps[g].as_slice()[k] as usize;
            let slot = schema.q_slot(g, j).expect("plausible sample");
            px[blocks[g + 1].start + slot] = 1.0;
        }
    }
    GroupedPrediction::from_probs(probs, schema).unwrap()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let schemas = [presets::toy(), presets::indoor(false), presets::indoor(true)];
    let mut mismatches = 0;
    let mut pixels = 0;
    for i in 0..C6_PREDICTIONS {
        let schema = &schemas[i % schemas.len()];
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = schema.activation_count();
        // coarse logits produce plenty of ties
        let data: Vec<f64> = (0..h * w * a).map(|_| rng.gen_range(0..4) as f64).collect();
        let pred = head::grouped_softmax(&ChannelMap::from_vec(h, w, a, data).unwrap(), schema).unwrap();
        let derived = metrics::derive_vis_from_gss(&pred, schema);
        // visible-group regions and void-excluded present regions
        let group_vis: Vec<Vec<usize>> = (0..schema.num_groups())
            .map(|g| (0..h * w).filter(|&k| lowest_argmax(pred.p(k)) == g).collect())
            .collect();
        let pres_excl_void = |c: usize, k: usize| {
            let (g, j) = schema.group_of(c).unwrap();
            let q = pred.q(k, g);
            let first = if schema.has_void(g) { 1 } else { 0 };
            let best = first + lowest_argmax(&q[first..]);
            schema.slot_index(g, best) == j
        };
        let mut label = vec![Vec::new(); h * w];
        for (g, ks) in group_vis.iter().enumerate() {
            for &k in ks {
                for c in schema.categories_in(g) {
                    if pres_excl_void(c, k) {
                        label[k].push(c);
                    }
                }
            }
        }
        for k in 0..h * w {
            pixels += 1;
            if label[k] != vec![derived.as_slice()[k] as usize] {
                mismatches += 1;
            }
        }
    }
    // round trip on generated scenes and random label-consistent samples
    let toy = presets::toy();
    let scene = SceneSpec::toy().compile(&toy).unwrap();
    let mut round_trip_bad = 0;
    let mut round_trips = 0;
    for i in 0..50u64 {
        let s = gss_core::scenegen::generate_scene(&scene, &mut gss_core::scenegen::scene_rng(6, i)).unwrap();
        let pred = one_hot(&s, &toy);
        let regions = regions_from_sample(&s, &toy).unwrap();
        let pres = metrics::derive_pres_from_gss(&pred, &toy);
        if metrics::derive_vis_from_gss(&pred, &toy) != s.visible || pres != regions.present {
            round_trip_bad += 1;
        }
        round_trips += 1;
    }
    for schema in &schemas {
        for _ in 0..50 {
            let s = random_sample(&mut rng, schema, 5, 5);
            if metrics::derive_vis_from_gss(&one_hot(&s, schema), schema) != s.visible {
                round_trip_bad += 1;
            }
            round_trips += 1;
        }
    }
    outcome(
        mismatches == 0 && round_trip_bad == 0,
        format!(
            "{C6_PREDICTIONS} predictions / {pixels} pixels: {mismatches} decomposition mismatches; \
             {round_trips} round trips: {round_trip_bad} failures"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut worst_ce: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [2usize, 3, 8, 36] {
        let names: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        let schema = GroupSchema::build([("bg", names.iter().map(String::as_str).collect::<Vec<_>>())], false).unwrap();
        let labels = Grid::from_vec(3, 3, (0..9).map(|_| rng.gen_range(0..n as u16)).collect()).unwrap();
        let l = head::loss_ce(&ChannelMap::zeros(3, 3, n), &labels, &schema).unwrap();
        worst_ce = worst_ce.max((l.loss - (n as f64).ln()).abs());
    }
    // one pixel; G_0 = {a, b} without void, G_1 = {c} with void; c is
    // visible and occludes a
    let schema = GroupSchema::build([("bg", vec!["a", "b"]), ("fg", vec!["c"])], false).unwrap();
    let sample = Sample {
        depth: Grid::filled(1, 1, 1.0),
        visible: Grid::filled(1, 1, 2),
        group_maps: vec![Grid::filled(1, 1, 1), Grid::filled(1, 1, 1)],
        num_categories: 3,
    };
    let regions = regions_from_sample(&sample, &schema).unwrap();
    let l = head::loss_grouped(&ChannelMap::zeros(1, 1, 6), &regions, &schema, C7_LAMBDA).unwrap();
    let expected = (2.0 + C7_LAMBDA) * 2f64.ln();
    let err = (l.loss - expected).abs();
    outcome(
        worst_ce <= C7_TOL && err <= C7_TOL,
        format!(
            "uniform CE max |loss - ln N| {worst_ce:.1e}; grouped example {:.10} vs (2+λ)ln2 = {expected:.10}",
            l.loss
        ),
    )
}

// ---------------------------------------------------------------- 8 & 9

struct Experiment {
    dss: gss_core::metrics::EvalReport,
    gss: gss_core::metrics::EvalReport,
    train_violation_max: f64,
    elapsed: Duration,
}

fn run_experiment(dir: &Path) -> Experiment {
    let start = Instant::now();
    let schema = presets::toy();
    let data = dir.join("data");
    generate_dataset(
        &SceneSpec::toy(),
        &schema,
        &RejectionThresholds::default(),
        C8_TRAIN,
        C8_TEST,
        C8_SEED,
        &data,
    )
    .unwrap();
    let ds = Dataset::open(&data).unwrap();
    let train_set = ds.load_split(Split::Train).unwrap();
    let test_set = ds.load_split(Split::Test).unwrap();
    let train_violation_max = train_set
        .iter()
        .map(|s| head::plausibility_violation(&one_hot(s, &schema), &schema).summary.max)
        .fold(0.0, f64::max);
    let cfg = TrainConfig {
        learning_rate: C8_LEARNING_RATE,
        seed: C8_SEED,
        ..TrainConfig::default()
    };
    let mut reports = Vec::new();
    for mode in [Mode::Dss, Mode::Gss] {
        let mc = ModelConfig::for_schema(mode, &schema).with_input_stats(&train_set);
        let out = train::train(&train_set, &[], &schema, &mc, &cfg, TrainOptions::default()).unwrap();
        reports.push(train::evaluate_model(&out.model, &test_set, &schema, VoidPooling::Max).unwrap());
    }
    let gss = reports.pop().unwrap();
    let dss = reports.pop().unwrap();
    Experiment {
        dss,
        gss,
        train_violation_max,
        elapsed: start.elapsed(),
    }
}

fn criterion_8(e: &Experiment) -> Outcome {
    let (d, g) = (&e.dss.metrics, &e.gss.metrics);
    let pa = (d.present_with_void.pa_pres, g.present_with_void.pa_pres);
    let miou = (
        d.present_with_void.miou_pres.unwrap_or(0.0),
        g.present_with_void.miou_pres.unwrap_or(0.0),
    );
    let gap = (g.pa_vis - d.pa_vis).abs();
    outcome(
        pa.1 > pa.0 && miou.1 > miou.0 && gap <= C8_VIS_GAP && e.elapsed < C8_MAX_TIME,
        format!(
            "PA_pres(void) GSS {:.4} vs DSS {:.4}; MIoU_pres(void) GSS {:.4} vs DSS {:.4}; \
             PA_vis GSS {:.4} DSS {:.4} (gap {gap:.4} <= {C8_VIS_GAP}); \
             without void: PA_pres GSS {:.4} DSS {:.4}, MIoU_pres GSS {:.4} DSS {:.4}; {:.1?} on {} thread(s)",
            pa.1,
            pa.0,
            miou.1,
            miou.0,
            g.pa_vis,
            d.pa_vis,
            g.present_without_void.pa_pres,
            d.present_without_void.pa_pres,
            g.present_without_void.miou_pres.unwrap_or(0.0),
            d.present_without_void.miou_pres.unwrap_or(0.0),
            e.elapsed,
            rayon::current_num_threads()
        ),
    )
}

fn criterion_9(e: &Experiment) -> Outcome {
    let Some(v) = e.gss.plausibility else {
        return outcome(false, "no plausibility summary in the GSS report");
    };
    outcome(
        v.mean < C9_MAX_MEAN_VIOLATION && e.train_violation_max == 0.0,
        format!(
            "test mean violation {:.5} (< {C9_MAX_MEAN_VIOLATION}), max {:.4}, positive fraction {:.4}; \
             training data max violation {}",
            v.mean, v.max, v.fraction_positive, e.train_violation_max
        ),
    )
}

// ---------------------------------------------------------------- 10

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducible_run(dir: &Path) -> (Vec<(String, Vec<u8>)>, Vec<u8>, Vec<u8>, Vec<u8>) {
    let schema = presets::toy();
    let mut spec = SceneSpec::toy();
    spec.height = 16;
    spec.width = 16;
    let data = dir.join("data");
    generate_dataset(&spec, &schema, &RejectionThresholds::default(), 24, 8, 10, &data).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let train_set = ds.load_split(Split::Train).unwrap();
    let test_set = ds.load_split(Split::Test).unwrap();
    let mc = ModelConfig {
        base_width: 4,
        levels: 2,
        ..ModelConfig::for_schema(Mode::Gss, &schema)
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 10,
        ..TrainConfig::default()
    };
    let run = dir.join("run");
    let out = train::train(
        &train_set,
        &test_set,
        &schema,
        &mc,
        &cfg,
        TrainOptions {
            out_dir: Some(&run),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let report = train::evaluate_model(&out.model, &test_set, &schema, VoidPooling::Max).unwrap();
    (
        tree_bytes(&data),
        fs::read(run.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(run.join(HISTORY_FILE)).unwrap(),
        report.to_json().into_bytes(),
    )
}

fn criterion_10() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = reproducible_run(a.path());
    let rb = reproducible_run(b.path());
    let data = ra.0 == rb.0;
    let ck = ra.1 == rb.1;
    let hist = ra.2 == rb.2;
    let rep = ra.3 == rb.3;
    outcome(
        data && ck && hist && rep,
        format!(
            "dataset ({} files) identical: {data}; checkpoint identical: {ck}; history identical: {hist}; \
             report identical: {rep}",
            ra.0.len()
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let quick: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "loss gradients vs finite differences", criterion_1),
        (2, "network gradient vs finite differences", criterion_2),
        (3, "grouped softmax simplex and shift invariance", criterion_3),
        (4, "activation count formula", criterion_4),
        (5, "metric oracle equivalence", criterion_5),
        (6, "derivation identities", criterion_6),
        (7, "loss closed forms", criterion_7),
        (10, "reproducibility", criterion_10),
    ];
    for (n, name, f) in quick {
        if wanted(n) {
            let o = f();
            report(n, name, &o);
            results.push((n, name, o));
        }
    }
    if wanted(8) || wanted(9) {
        let dir = tempfile::tempdir().unwrap();
        let e = run_experiment(dir.path());
        for (n, name, o) in [
            (8, "GSS vs DSS ordering on the toy dataset", criterion_8(&e)),
            (9, "plausibility statistics", criterion_9(&e)),
        ] {
            if wanted(n) {
                report(n, name, &o);
                results.push((n, name, o));
            }
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn report(n: usize, name: &str, o: &Outcome) {
    println!(
        "[{}] criterion {n:>2}: {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}
