use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainingConfig;
use super::dataset::SceneData;
use crate::autodiff::{Adam, Graph, ParamId};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::{LossTerms, Model, ModelKind};
use crate::scene::derive_seed;

/// Learning rate that halves after `patience` epochs without a new best
/// validation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub best: f64,
    pub stale: usize,
    pub patience: usize,
}

impl LrSchedule {
    /// `initial` is the validation loss before any update.
    pub fn new(lr: f64, patience: usize, initial: f64) -> Self {
        LrSchedule {
            lr,
            best: initial,
            stale: 0,
            patience,
        }
    }

    /// Records one epoch's validation loss; true when it is a new best.
    pub fn observe(&mut self, valid: f64) -> bool {
        if valid < self.best {
            self.best = valid;
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= 0.5;
            self.stale = 0;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

/// One training example: a mixture and its early-reflection targets.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub scene_id: &'a str,
    pub mixture: &'a [f64],
    pub early: &'a [Vec<f64>],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    /// Mean loss over the examples that contributed.
    pub loss: f64,
    pub terms: Vec<LossTerms>,
    pub used: usize,
    pub skipped: usize,
    /// Scene and terms of a non-finite loss; no update was applied.
    pub non_finite: Option<(String, LossTerms)>,
}

/// Where a non-finite loss came from.
#[derive(Debug, Clone, Serialize)]
pub struct NanDump {
    pub scene_id: String,
    pub epoch: usize,
    pub step: usize,
    pub terms: LossTerms,
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::EmptySpeaker { .. } | Error::Unsupported(_))
}

/// Accumulates batch-mean gradients and applies one Adam update. Examples
/// whose speakers own no bins (or whose speaker count the model cannot
/// produce) are skipped. A non-finite loss stops the step before any update
/// and is reported in [`StepOutcome::non_finite`].
pub fn train_step(model: &mut Model, batch: &[Example<'_>], opt: &Adam) -> Result<StepOutcome> {
    model.store.zero_grads();
    let mut out = StepOutcome::default();
    for ex in batch {
        let mut g = Graph::new();
        let nodes = match model.loss(&mut g, ex.mixture, ex.early) {
            Ok(n) => n,
            Err(e) if skippable(&e) => {
                out.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let terms = Model::terms(&g, &nodes);
        if !terms.total.is_finite() {
            model.store.zero_grads();
            out.non_finite = Some((ex.scene_id.to_string(), terms));
            return Ok(out);
        }
        g.backward(nodes.total)?;
        g.accumulate_param_grads(&mut model.store);
        out.loss += terms.total;
        out.terms.push(terms);
        out.used += 1;
    }
    if out.used == 0 {
        model.store.zero_grads();
        return Ok(out);
    }
    out.loss /= out.used as f64;
    model.store.scale_grads(1.0 / out.used as f64);
    for i in 0..model.store.len() {
        let p = model.store.get_mut(ParamId(i));
        if p.grad.is_none() {
            p.grad = Some(vec![0.0; p.values.len()]);
        }
    }
    opt.step(&mut model.store)?;
    Ok(out)
}

/// Mean loss over whole utterances, without updating anything.
pub fn validation_loss(model: &Model, scenes: &[SceneData]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for s in scenes {
        let mut g = Graph::new();
        match model.loss(&mut g, &s.mixture, &s.early) {
            Ok(nodes) => {
                total += g.item(nodes.total);
                n += 1;
            }
            Err(e) if skippable(&e) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::InvalidState("no usable validation scene".into()));
    }
    Ok(total / n as f64)
}

/// Batches for one epoch: scenes grouped by speaker count, shuffled within
/// groups, cut into batches, then the batch order shuffled. Each entry is
/// `(scene index, segment start)`.
pub fn epoch_plan(scenes: &[SceneData], segment_len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    let mut counts: Vec<usize> = scenes.iter().map(|s| s.num_speakers).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut batches = Vec::new();
    for k in counts {
        let mut idx: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].num_speakers == k).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            batches.push(
                chunk
                    .iter()
                    .map(|&i| {
                        let len = scenes[i].len();
                        let start = if len > segment_len { rng.random_range(0..=len - segment_len) } else { 0 };
                        (i, start)
                    })
                    .collect(),
            );
        }
    }
    batches.shuffle(&mut rng);
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_valid: f64,
    pub steps: usize,
}

/// Output locations of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
}

fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidState(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidState(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Full training run. The best-validation parameters are written to the
/// checkpoint (when given) and left in `model` on return.
pub fn train(
    model: &mut Model,
    train_set: &[SceneData],
    valid_set: &[SceneData],
    cfg: &TrainingConfig,
    outputs: &TrainOutputs,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidState("empty training split".into()));
    }
    let sr = model.config.sample_rate as f64;
    let segment_len = ((cfg.segment_s * sr).round() as usize).max(1);
    // Without a validation split the schedule follows the training scenes.
    let valid = if valid_set.is_empty() { train_set } else { valid_set };
    let usable: Vec<&SceneData> = train_set
        .iter()
        .filter(|s| model.config.model_kind != ModelKind::Tasnet || s.num_speakers == model.config.num_speakers)
        .collect();
    if usable.is_empty() {
        return Err(Error::Unsupported("no training scene matches the model's speaker count".into()));
    }

    let mut schedule = LrSchedule::new(cfg.lr, cfg.patience_epochs, validation_loss(model, valid)?);
    let mut best = model.store.clone();
    if let Some(p) = &outputs.checkpoint {
        model.save(p)?;
    }
    let mut logs = Vec::new();
    let mut steps = 0;
    for epoch in 1..=cfg.max_epochs {
        let opt = Adam::new(schedule.lr);
        let plan = epoch_plan(train_set, segment_len, cfg.batch_size, cfg.seed, epoch);
        let (mut sum, mut n) = (0.0, 0usize);
        for (b, batch) in plan.iter().enumerate() {
            if cfg.max_steps_per_epoch.is_some_and(|m| b >= m) {
                break;
            }
            let segs: Vec<(String, Vec<f64>, Vec<Vec<f64>>)> = batch
                .iter()
                .map(|&(i, start)| {
                    let s = &train_set[i];
                    let end = (start + segment_len).min(s.len());
                    (
                        s.scene_id.clone(),
                        s.mixture[start..end].to_vec(),
                        s.early.iter().map(|e| e[start..end].to_vec()).collect(),
                    )
                })
                .collect();
            let examples: Vec<Example<'_>> = segs
                .iter()
                .map(|(id, m, e)| Example {
                    scene_id: id,
                    mixture: m,
                    early: e,
                })
                .collect();
            let out = train_step(model, &examples, &opt)?;
            if let Some((scene_id, terms)) = out.non_finite {
                let dump = serde_json::to_string(&NanDump {
                    scene_id: scene_id.clone(),
                    epoch,
                    step: b,
                    terms,
                })?;
                if let Some(p) = &outputs.checkpoint {
                    write_atomic(&p.with_extension("nan.json"), dump.as_bytes())?;
                }
                return Err(Error::NumericalFailure(format!("non-finite loss on scene {scene_id}: {dump}")));
            }
            if out.used > 0 {
                sum += out.loss * out.used as f64;
                n += out.used;
                steps += 1;
            }
        }
        let valid_loss = validation_loss(model, valid)?;
        let log = EpochLog {
            epoch,
            train_loss: if n > 0 { sum / n as f64 } else { f64::NAN },
            valid_loss,
            lr: schedule.lr,
        };
        if schedule.observe(valid_loss) {
            best = model.store.clone();
            if let Some(p) = &outputs.checkpoint {
                model.save(p)?;
            }
        }
        logs.push(log);
        if let Some(p) = &outputs.log_csv {
            write_log(p, &logs)?;
        }
        progress(&log);
    }
    model.store = best;
    Ok(TrainReport {
        epochs: logs,
        best_valid: schedule.best,
        steps,
    })
}
