//! Training loop: gradient accumulation, per-epoch validation,
//! checkpointing and top-N checkpoint averaging.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use sctc_core::graph::CtcStatus;
use sctc_core::model::{batch_loss, Model};
use sctc_core::optim::{lr_schedule, Adam, AdamConfig};
use sctc_core::synth::{make_batches, Batch, Dataset};
use sctc_core::{Gradients, Graph};

use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::config::TrainSettings;
use crate::eval::score_dataset;
use crate::{Error, Result};

/// Worker threads allowed by `SCTC_THREADS`; 1 when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var("SCTC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("SCTC_THREADS must be a positive integer, got {v:?}"))),
    }
}

/// Runs `f` on a pool of [`thread_count`] workers.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerLoss {
    pub layer: usize,
    pub loss: f64,
}

/// One optimizer step. Losses are means over the step's micro-batches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    #[serde(rename = "final")]
    pub final_ctc: f64,
    pub intermediate: Vec<LayerLoss>,
    /// Utterances whose labels could not be aligned to their frames.
    pub infeasible: usize,
    /// Micro-batches dropped because none of their utterances was feasible.
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_total: f64,
    pub dev_ter: f64,
    pub skipped_batches: usize,
}

/// A line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Average { checkpoints: Vec<usize>, dev_ter: f64 },
}

struct MicroBatch {
    grads: Option<Gradients>,
    total: f64,
    final_ctc: f64,
    intermediate: Vec<(usize, f64)>,
    infeasible: usize,
}

/// Loss and gradients of one micro-batch; `grads` is `None` when no
/// utterance was feasible.
fn micro_batch(model: &Model, batch: &Batch) -> Result<MicroBatch> {
    let mut g = Graph::new(&model.params);
    let x = g.input(batch.features.clone());
    let trace = model.forward(&mut g, x, &batch.mask)?;
    let loss = batch_loss(&mut g, &trace, &batch.labels, model.config.lambda)?;
    let Some(root) = loss.root else {
        return Ok(MicroBatch {
            grads: None,
            total: f64::NAN,
            final_ctc: f64::NAN,
            intermediate: Vec::new(),
            infeasible: loss.infeasible,
        });
    };
    let feasible: Vec<_> = loss
        .per_utterance
        .iter()
        .filter(|u| u.status == CtcStatus::Feasible)
        .collect();
    let n = feasible.len() as f64;
    let final_ctc = feasible.iter().map(|u| g.value(u.final_ctc).item()).sum::<f64>() / n;
    let intermediate = trace
        .intermediate
        .iter()
        .enumerate()
        .map(|(i, &(l, _))| {
            let sum: f64 = feasible.iter().map(|u| g.value(u.intermediate[i].1).item()).sum();
            (l, sum / n)
        })
        .collect();
    Ok(MicroBatch {
        total: g.value(root).item(),
        grads: Some(g.backward(root)?),
        final_ctc,
        intermediate,
        infeasible: loss.infeasible,
    })
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub settings: TrainSettings,
}

impl Trainer {
    pub fn new(model: Model, settings: TrainSettings) -> Self {
        let adam = Adam::new(&model.params, AdamConfig::default());
        Trainer {
            model,
            adam,
            settings,
        }
    }

    pub fn steps(&self) -> u64 {
        self.adam.step
    }

    fn step_limit_reached(&self) -> bool {
        self.settings.max_steps > 0 && self.adam.step >= self.settings.max_steps
    }

    /// One optimizer step from `group`: gradients of the micro-batches are
    /// summed with weight `1/accum_n`. Returns `None` if every micro-batch
    /// was skipped.
    pub fn step(&mut self, group: &[Batch], epoch: usize) -> Result<Option<StepRecord>> {
        let model = &self.model;
        let results = group
            .par_iter()
            .map(|b| micro_batch(model, b))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / self.settings.accum_n as f64;
        self.model.params.zero_grad();
        let mut used = 0usize;
        let (mut total, mut final_ctc) = (0.0, 0.0);
        let mut inter: Vec<(usize, f64)> = Vec::new();
        let mut infeasible = 0;
        for r in &results {
            infeasible += r.infeasible;
            let Some(grads) = &r.grads else { continue };
            self.model.params.accumulate(grads, scale);
            used += 1;
            total += r.total;
            final_ctc += r.final_ctc;
            if inter.is_empty() {
                inter = r.intermediate.iter().map(|&(l, _)| (l, 0.0)).collect();
            }
            for (slot, &(_, v)) in inter.iter_mut().zip(&r.intermediate) {
                slot.1 += v;
            }
        }
        let skipped = results.len() - used;
        if skipped > 0 {
            eprintln!(
                "warning: epoch {epoch}: skipped {skipped} micro-batch(es) with no feasible utterance"
            );
        }
        if used == 0 {
            return Ok(None);
        }
        let step = self.adam.step + 1;
        let lr = lr_schedule(step, self.settings.warmup, self.model.config.dim, self.settings.lr_base);
        self.adam.step(&mut self.model.params, lr)?;
        let k = used as f64;
        Ok(Some(StepRecord {
            epoch,
            step,
            lr,
            total: total / k,
            final_ctc: final_ctc / k,
            intermediate: inter
                .into_iter()
                .map(|(layer, sum)| LayerLoss { layer, loss: sum / k })
                .collect(),
            infeasible,
            skipped_batches: skipped,
        }))
    }

    /// Steps through `batches` in groups of `accum_n`. Stops early once
    /// `max_steps` is reached.
    pub fn train_epoch(
        &mut self,
        batches: &[Batch],
        epoch: usize,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        for group in batches.chunks(self.settings.accum_n) {
            if self.step_limit_reached() {
                break;
            }
            if let Some(r) = self.step(group, epoch)? {
                log(&LogRecord::Step(r.clone()))?;
                records.push(r);
            }
        }
        Ok(records)
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Average of the best checkpoints.
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    /// Dev token error rate of the averaged model, as a fraction.
    pub dev_ter: f64,
    pub averaged: Vec<usize>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Where a run writes its files.
pub struct RunFiles {
    pub dir: PathBuf,
    log: BufWriter<fs::File>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.sctc";
pub const CHECKPOINT_DIR: &str = "checkpoints";

impl RunFiles {
    pub fn create(dir: &Path) -> Result<Self> {
        let cps = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&cps).map_err(Error::io(&cps))?;
        let path = dir.join(METRICS_FILE);
        let log = BufWriter::new(fs::File::create(&path).map_err(Error::io(&path))?);
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            log,
        })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let line = serde_json::to_string(record).expect("plain record");
        writeln!(self.log, "{line}").map_err(Error::io(&path))
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:03}.sctc"))
    }
}

/// Trains `model` on `data.train` for the configured epochs, ranks the
/// per-epoch checkpoints by dev token error rate and returns the average
/// of the best `average_top_n` of them.
pub fn fit(
    model: Model,
    settings: &TrainSettings,
    data: &Dataset,
    mut files: Option<&mut RunFiles>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, settings.clone());
    let mut checkpoints = Vec::with_capacity(settings.epochs);
    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        if trainer.step_limit_reached() {
            break;
        }
        let batches = make_batches(&data.train, settings.batch_size, epoch_seed(settings.seed, epoch))?;
        let records = {
            let mut log = |r: &LogRecord| match files.as_deref_mut() {
                Some(f) => f.write(r),
                None => Ok(()),
            };
            trainer.train_epoch(&batches, epoch, &mut log)?
        };
        let dev_ter = score_dataset(&trainer.model, &data.dev)?.counts.rate();
        let record = EpochRecord {
            epoch,
            steps: trainer.steps(),
            mean_total: records.iter().map(|r| r.total).sum::<f64>() / records.len().max(1) as f64,
            dev_ter,
            skipped_batches: records.iter().map(|r| r.skipped_batches).sum(),
        };
        let cp = Checkpoint::from_model(&trainer.model, dev_ter, epoch);
        if let Some(f) = files.as_deref_mut() {
            f.write(&LogRecord::Epoch(record.clone()))?;
            cp.save(&f.checkpoint_path(epoch))?;
        }
        epochs.push(record);
        checkpoints.push(cp);
    }
    if checkpoints.is_empty() {
        checkpoints.push(Checkpoint::from_model(&trainer.model, f64::INFINITY, 0));
    }
    let n = settings.average_top_n.min(checkpoints.len());
    let metrics: Vec<f64> = checkpoints.iter().map(|c| c.metric).collect();
    let averaged: Vec<usize> = sctc_core::optim::top_n_indices(&metrics, n)?
        .into_iter()
        .map(|i| checkpoints[i].epoch)
        .collect();
    let params = average_checkpoints(&checkpoints, n)?;
    let model = Model::from_params(trainer.model.config.clone(), params)?;
    let dev_ter = score_dataset(&model, &data.dev)?.counts.rate();
    if let Some(f) = files {
        f.write(&LogRecord::Average {
            checkpoints: averaged.clone(),
            dev_ter,
        })?;
        let last = epochs.last().map_or(0, |e| e.epoch);
        Checkpoint::from_model(&model, dev_ter, last).save(&f.dir.join(MODEL_FILE))?;
        let path = f.dir.join(METRICS_FILE);
        f.log.flush().map_err(Error::io(&path))?;
    }
    Ok(TrainOutcome {
        model,
        epochs,
        dev_ter,
        averaged,
    })
}
