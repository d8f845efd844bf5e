use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use gss_core::dataset::{
    export_depth_image, export_labelmap_image, read_sample, regions_from_sample, Dataset, Grid, LabelMap, Palette,
    Split,
};
use gss_core::metrics::{self, Prediction, PredictionMasks, SampleEval, VoidPooling};
use gss_core::net::checkpoint::Checkpoint;
use gss_core::net::optim::TrainConfig;
use gss_core::net::train::{self as trainer, TrainError, TrainOptions, CHECKPOINT_FILE, HISTORY_FILE};
use gss_core::scenegen::{generate_dataset, RejectionThresholds, SceneError, SceneSpec};
use gss_core::{GroupSchema, Mode, ModelConfig};

use crate::run::{RunManifest, RUN_FILE};
use crate::{config_err, runtime_err, CliError, EvalArgs, GenArgs, ModeArg, PoolingArg, RenderArgs, SplitArg, TrainArgs};

fn read_config(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn pooling(p: PoolingArg) -> VoidPooling {
    match p {
        PoolingArg::Max => VoidPooling::Max,
        PoolingArg::Sum => VoidPooling::Sum,
    }
}

fn open_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::open(dir).map_err(|e| CliError::Config(format!("dataset {}: {e}", dir.display())))
}

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    let mut run = RunManifest::start("gen");
    let schema_bytes = read_config(&a.schema)?;
    run.config(&a.schema, &schema_bytes);
    let schema = GroupSchema::load(&a.schema).map_err(config_err)?;
    let spec = match &a.scene {
        Some(p) => {
            run.config(p, &read_config(p)?);
            SceneSpec::load(p).map_err(config_err)?
        }
        None => SceneSpec::toy(),
    };
    spec.compile(&schema).map_err(config_err)?;
    let (n_train, n_test) = match (a.scenes, a.train, a.test) {
        (Some(total), _, _) => {
            let test = total / 6;
            (total - test, test)
        }
        (None, Some(tr), Some(te)) => (tr, te),
        _ => return Err(CliError::Config("give --scenes or both --train and --test".into())),
    };
    let thresholds = RejectionThresholds {
        min_foreground_objects: a.min_objects,
        max_object_coverage: a.max_object_coverage,
        max_dont_care_coverage: a.max_dont_care_coverage,
    };
    run.seed("dataset", a.seed);
    create_dir(&a.out)?;
    let manifest = generate_dataset(&spec, &schema, &thresholds, n_train, n_test, a.seed, &a.out).map_err(|e| match e {
        SceneError::Parse { .. } | SceneError::Config(_) => config_err(e),
        other => runtime_err(other),
    })?;
    eprintln!(
        "generated {} train + {} test scenes ({} attempts) in {}",
        n_train,
        n_test,
        manifest.stats.attempted,
        a.out.display()
    );
    run.output(&a.out.join(gss_core::dataset::MANIFEST_FILE));
    run.finish(&a.out.join(RUN_FILE))
}

/// Architecture overrides accepted by `train --model-config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelOverrides {
    base_width: Option<usize>,
    levels: Option<usize>,
    norm_eps: Option<f64>,
    output_sigmoid: Option<bool>,
    normalize_stem: Option<bool>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T, CliError> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::EmptyDataset | TrainError::Net(_) => config_err(e),
        other => runtime_err(other),
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut run = RunManifest::start("train");
    let ds = open_dataset(&a.data)?;
    let mode = match a.mode {
        ModeArg::Gss => Mode::Gss,
        ModeArg::Dss => Mode::Dss,
    };
    let mut model_config = ModelConfig::for_schema(mode, &ds.schema);
    if let Some(p) = &a.model_config {
        let bytes = read_config(p)?;
        run.config(p, &bytes);
        let o: ModelOverrides = parse_json(p, &bytes)?;
        model_config.base_width = o.base_width.unwrap_or(model_config.base_width);
        model_config.levels = o.levels.unwrap_or(model_config.levels);
        model_config.norm_eps = o.norm_eps.unwrap_or(model_config.norm_eps);
        model_config.output_sigmoid = o.output_sigmoid.unwrap_or(model_config.output_sigmoid);
        model_config.normalize_stem = o.normalize_stem.unwrap_or(model_config.normalize_stem);
    }
    model_config.validate().map_err(config_err)?;
    let mut cfg = match &a.train_config {
        Some(p) => {
            let bytes = read_config(p)?;
            run.config(p, &bytes);
            parse_json(p, &bytes)?
        }
        None => TrainConfig::default(),
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
    cfg.validate().map_err(CliError::Config)?;
    run.seed("train", cfg.seed);
    run.seed("dataset", ds.manifest.seed);

    let resume = if a.resume {
        let p = a.out.join(CHECKPOINT_FILE);
        Some(Checkpoint::load(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)
    } else {
        None
    };
    let train_set = ds.load_split(Split::Train).map_err(runtime_err)?;
    let test_set = ds.load_split(Split::Test).map_err(runtime_err)?;
    let model_config = model_config.with_input_stats(&train_set);
    create_dir(&a.out)?;
    let write = |name: &str, text: String| -> Result<(), CliError> {
        gss_core::dataset::write_atomic(&a.out.join(name), (text + "\n").as_bytes()).map_err(runtime_err)
    };
    write("model_config.json", serde_json::to_string_pretty(&model_config).map_err(runtime_err)?)?;
    write("train_config.json", serde_json::to_string_pretty(&cfg).map_err(runtime_err)?)?;

    let mut report = |r: &trainer::EpochRecord| {
        let val = r
            .validation
            .as_ref()
            .map(|m| format!(" val PA_vis {:.4} PA_pres {:.4}", m.pa_vis, m.present_with_void.pa_pres))
            .unwrap_or_default();
        eprintln!("epoch {:>3} lr {:.1e} loss {:.5}{val}", r.epoch, r.learning_rate, r.train_loss);
    };
    let opts = TrainOptions {
        out_dir: Some(&a.out),
        resume,
        pooling: VoidPooling::Max,
        on_epoch: Some(&mut report),
    };
    trainer::train(&train_set, &test_set, &ds.schema, &model_config, &cfg, opts).map_err(train_error)?;
    for f in [CHECKPOINT_FILE, HISTORY_FILE, "model_config.json", "train_config.json"] {
        run.output(&a.out.join(f));
    }
    run.finish(&a.out.join(RUN_FILE))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut run = RunManifest::start("eval");
    let ds = open_dataset(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples = ds.load_split(split).map_err(runtime_err)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("split {split:?} of {} is empty", a.data.display())));
    }
    let report = if a.oracle {
        let evals = samples
            .iter()
            .map(|s| {
                let gt = regions_from_sample(s, &ds.schema).map_err(runtime_err)?;
                let pred = Prediction::Masks(PredictionMasks::from_regions(&gt));
                metrics::evaluate_sample(&gt, &pred, &ds.schema, pooling(a.pooling)).map_err(runtime_err)
            })
            .collect::<Result<Vec<SampleEval>, CliError>>()?;
        metrics::build_report("oracle", &evals, &ds.schema).map_err(runtime_err)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires --checkpoint");
        let ck = Checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if ck.schema_fingerprint != ds.schema.fingerprint() {
            return Err(CliError::Config(format!(
                "schema fingerprint mismatch: checkpoint {:016x}, dataset {:016x}",
                ck.schema_fingerprint,
                ds.schema.fingerprint()
            )));
        }
        run.seed("train", ck.train_config.seed);
        trainer::evaluate_model(&ck.model, &samples, &ds.schema, pooling(a.pooling)).map_err(train_error)?
    };
    run.seed("dataset", ds.manifest.seed);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    gss_core::dataset::write_atomic(&a.out, report.to_json().as_bytes()).map_err(runtime_err)?;
    let m = &report.metrics;
    eprintln!(
        "PA_vis {:.4}  MIoU_vis {}  PA_pres {:.4}  MIoU_pres {}",
        m.pa_vis,
        m.miou_vis.map_or("-".into(), |v| format!("{v:.4}")),
        m.present_with_void.pa_pres,
        m.present_with_void.miou_pres.map_or("-".into(), |v| format!("{v:.4}")),
    );
    run.output(&a.out);
    let mut manifest_path = a.out.clone().into_os_string();
    manifest_path.push(".run.json");
    run.finish(&PathBuf::from(manifest_path))
}

/// Visible labels and group maps from prediction masks.
fn maps_from_masks(masks: &PredictionMasks, schema: &GroupSchema) -> (LabelMap, Vec<LabelMap>) {
    let (h, w) = (masks.height, masks.width);
    let mut visible = Grid::filled(h, w, 0u16);
    for (c, m) in masks.visible.iter().enumerate() {
        for k in m.pixels() {
            visible.as_mut_slice()[k] = c as u16;
        }
    }
    let groups = (0..schema.num_groups())
        .map(|g| {
            let mut map = Grid::filled(h, w, 0u16);
            for c in schema.categories_in(g) {
                let j = schema.group_of(c).expect("category in range").1 as u16;
                for k in masks.present[c].pixels() {
                    map.as_mut_slice()[k] = j;
                }
            }
            map
        })
        .collect();
    (visible, groups)
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let mut run = RunManifest::start("render");
    let sample = read_sample(&a.sample).map_err(config_err)?;
    let schema = match &a.schema {
        Some(p) => {
            run.config(p, &read_config(p)?);
            GroupSchema::load(p).map_err(config_err)?
        }
        None => {
            let root = a
                .sample
                .parent()
                .and_then(Path::parent)
                .ok_or_else(|| CliError::Config("cannot locate the dataset of the sample; pass --schema".into()))?;
            open_dataset(root)?.schema
        }
    };
    sample.validate(&schema).map_err(config_err)?;
    let colors = match &a.palette {
        Some(p) => {
            let bytes = read_config(p)?;
            run.config(p, &bytes);
            let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{}: not UTF-8", p.display())))?;
            Palette::parse_colors(&text, &schema).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Palette::default_colors(&schema),
    };
    let (visible, group_maps) = match &a.checkpoint {
        None => (sample.visible.clone(), sample.group_maps.clone()),
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            if ck.schema_fingerprint != schema.fingerprint() {
                return Err(CliError::Config("schema fingerprint mismatch between checkpoint and schema".into()));
            }
            let masks = match trainer::infer(&ck.model, &sample, &schema).map_err(train_error)? {
                Prediction::Flat(post) => PredictionMasks::from_flat(&post, &schema, pooling(a.pooling)),
                Prediction::Grouped(g) => PredictionMasks::from_grouped(&g, &schema),
                Prediction::Masks(m) => m,
            };
            maps_from_masks(&masks, &schema)
        }
    };
    create_dir(&a.out)?;
    let depth_path = a.out.join("depth.pgm");
    export_depth_image(&sample.depth, &depth_path).map_err(runtime_err)?;
    run.output(&depth_path);
    let vis_path = a.out.join("visible.ppm");
    export_labelmap_image(&visible, &Palette::for_categories(&colors), &vis_path).map_err(runtime_err)?;
    run.output(&vis_path);
    for (g, map) in group_maps.iter().enumerate() {
        let path = a.out.join(format!("group{g}_{}.ppm", schema.groups()[g].name));
        export_labelmap_image(map, &Palette::for_group(&schema, &colors, g), &path).map_err(runtime_err)?;
        run.output(&path);
    }
    run.finish(&a.out.join(RUN_FILE))
}
