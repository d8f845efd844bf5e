//! Training loop, inference and model evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::optim::{Adam, OptimError, TrainConfig};
use super::{map_to_tensor, tensor_to_map, Grads, Mode, Model, NetError};
use crate::dataset::{io_err, regions_from_sample, write_atomic, DatasetError, LabelMap, RegionSets, Sample};
use crate::head::{self, GroupedTargets, HeadError, ViolationSummary};
use crate::metrics::{self, EvalReport, MetricSet, MetricsError, Prediction, SampleEval, VoidPooling};
use crate::scenegen::scene_seed;
use crate::schema::GroupSchema;

pub const CHECKPOINT_FILE: &str = "checkpoint.gssm";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Stream tag separating shuffle seeds from the init seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite in epoch {epoch}, batch {batch}; last checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    Divergence {
        epoch: usize,
        batch: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Optim {
        epoch: usize,
        batch: usize,
        last_checkpoint: Option<PathBuf>,
        #[source]
        source: OptimError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

enum Target {
    Flat(LabelMap),
    Grouped(GroupedTargets),
}

/// A sample with its region sets and loss targets.
pub struct Prepared<'a> {
    pub sample: &'a Sample,
    pub regions: RegionSets,
    target: Target,
}

pub fn prepare<'a>(
    samples: &'a [Sample],
    schema: &GroupSchema,
    mode: Mode,
    lambda: f64,
) -> Result<Vec<Prepared<'a>>, TrainError> {
    samples
        .iter()
        .map(|sample| {
            let regions = regions_from_sample(sample, schema)?;
            let target = match mode {
                Mode::Dss => Target::Flat(sample.visible.clone()),
                Mode::Gss => Target::Grouped(GroupedTargets::from_regions(&regions, schema, lambda)?),
            };
            Ok(Prepared {
                sample,
                regions,
                target,
            })
        })
        .collect()
}

/// Loss and parameter gradients for one sample.
pub fn sample_loss(
    model: &Model<f32>,
    item: &Prepared<'_>,
    schema: &GroupSchema,
) -> Result<(f64, Grads<f32>), TrainError> {
    let x = model.input_from_depth(&item.sample.depth)?;
    let (y, cache) = model.forward(&x)?;
    let logits = tensor_to_map(&y);
    let lv = match &item.target {
        Target::Flat(labels) => head::loss_ce(&logits, labels, schema)?,
        Target::Grouped(t) => head::loss_grouped_targets(&logits, t, schema)?,
    };
    let grads = model.backward(cache, &map_to_tensor(&lv.grad))?;
    Ok((lv.loss, grads))
}

/// Softmax posterior (flat head) or grouped prediction (grouped head).
pub fn infer<T: super::Scalar>(model: &Model<T>, sample: &Sample, schema: &GroupSchema) -> Result<Prediction, TrainError> {
    model.config().check_schema(schema)?;
    let logits = model.logits(&sample.depth)?;
    Ok(match model.config().mode {
        Mode::Dss => Prediction::Flat(head::flat_softmax(&logits)?),
        Mode::Gss => Prediction::Grouped(head::grouped_softmax(&logits, schema)?),
    })
}

fn evaluate_prepared(
    model: &Model<f32>,
    items: &[Prepared<'_>],
    schema: &GroupSchema,
    pooling: VoidPooling,
) -> Result<EvalReport, TrainError> {
    let evals: Vec<SampleEval> = items
        .par_iter()
        .map(|it| {
            let pred = infer(model, it.sample, schema)?;
            Ok(metrics::evaluate_sample(&it.regions, &pred, schema, pooling)?)
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(metrics::build_report(model.config().mode.as_str(), &evals, schema)?)
}

/// Evaluates a model on samples; results are aggregated in sample order.
pub fn evaluate_model(
    model: &Model<f32>,
    samples: &[Sample],
    schema: &GroupSchema,
    pooling: VoidPooling,
) -> Result<EvalReport, TrainError> {
    let items = prepare(samples, schema, model.config().mode, 0.0)?;
    evaluate_prepared(model, &items, schema, pooling)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-sample loss over the epoch.
    pub train_loss: f64,
    pub validation: Option<MetricSet>,
    pub validation_plausibility: Option<ViolationSummary>,
    /// Metrics of the final model on the training split (last epoch only).
    pub train_metrics: Option<MetricSet>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoint and history are written here after every epoch.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    pub pooling: VoidPooling,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

fn history_text(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| TrainError::Config(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Trains a fresh (or resumed) model. Mini-batch gradients are averaged
/// over samples in batch order regardless of how many workers ran them.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &[Sample],
    validation: &[Sample],
    schema: &GroupSchema,
    model_config: &super::ModelConfig,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    model_config.check_schema(schema)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size > train_set.len() {
        return Err(TrainError::Config(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let mode = model_config.mode;
    let items = prepare(train_set, schema, mode, cfg.lambda)?;
    let val_items = prepare(validation, schema, mode, cfg.lambda)?;
    let schema_fp = schema.fingerprint();

    let (mut model, mut adam, start, mut history) = match opts.resume.take() {
        Some(ck) => {
            if ck.model.config() != model_config {
                return Err(TrainError::Config("checkpoint model config differs".into()));
            }
            if ck.schema_fingerprint != schema_fp {
                return Err(TrainError::Config("checkpoint was trained on a different schema".into()));
            }
            let same = TrainConfig {
                epochs: cfg.epochs,
                ..ck.train_config.clone()
            };
            if &same != cfg {
                return Err(TrainError::Config("checkpoint train config differs beyond `epochs`".into()));
            }
            let start = ck.epochs_completed as usize;
            let mut history = match opts.out_dir {
                Some(dir) if dir.join(HISTORY_FILE).exists() => read_history(&dir.join(HISTORY_FILE))?,
                _ => Vec::new(),
            };
            history.retain(|r| r.epoch < start);
            // train metrics belong to the final epoch only
            for r in &mut history {
                r.train_metrics = None;
            }
            let adam = ck.adam.clone().unwrap_or_else(|| Adam::new(&ck.model));
            (ck.model, adam, start, history)
        }
        None => {
            let model = Model::<f32>::new(model_config.clone(), cfg.seed)?;
            let adam = Adam::new(&model);
            (model, adam, 0, Vec::new())
        }
    };

    let ck_path = opts.out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let save = |model: &Model<f32>, adam: &Adam, epochs: usize| -> Result<(), TrainError> {
        if let Some(p) = &ck_path {
            Checkpoint {
                schema_fingerprint: schema_fp,
                train_config: cfg.clone(),
                epochs_completed: epochs as u32,
                model: model.clone(),
                adam: Some(adam.clone()),
            }
            .save(p)?;
        }
        Ok(())
    };
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if start == 0 {
            save(&model, &adam, 0)?;
        }
    }
    let last_ck = || ck_path.clone();

    let n = items.len();
    for epoch in start..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64)));
        let mut losses = Vec::with_capacity(n);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Grads<f32>)> = idx
                .par_iter()
                .map(|&i| sample_loss(&model, &items[i], schema))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / idx.len() as f32;
            let mut total = model.zero_grads();
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch,
                        batch,
                        last_checkpoint: last_ck(),
                    });
                }
                losses.push(*loss);
                for (t, gb) in total.iter_mut().zip(g) {
                    for (a, &b) in t.iter_mut().zip(gb) {
                        *a += b;
                    }
                }
            }
            for t in &mut total {
                for v in t.iter_mut() {
                    *v *= scale;
                }
            }
            adam.update(&mut model, &total, lr, cfg).map_err(|source| TrainError::Optim {
                epoch,
                batch,
                last_checkpoint: last_ck(),
                source,
            })?;
            if !model.all_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch,
                    last_checkpoint: last_ck(),
                });
            }
        }
        let train_loss = head::pairwise_sum(&losses) / n as f64;
        let (validation, validation_plausibility) = if val_items.is_empty() {
            (None, None)
        } else {
            let r = evaluate_prepared(&model, &val_items, schema, opts.pooling)?;
            (Some(r.metrics), r.plausibility)
        };
        let train_metrics = if epoch + 1 == cfg.epochs {
            Some(evaluate_prepared(&model, &items, schema, opts.pooling)?.metrics)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            validation,
            validation_plausibility,
            train_metrics,
        };
        history.push(record);
        save(&model, &adam, epoch + 1)?;
        if let Some(dir) = opts.out_dir {
            write_atomic(&dir.join(HISTORY_FILE), history_text(&history).as_bytes())?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(history.last().expect("just pushed"));
        }
    }
    Ok(TrainOutcome { model, adam, history })
}
