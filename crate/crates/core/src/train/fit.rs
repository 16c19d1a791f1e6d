use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::checkpoint::save_checkpoint;
use super::data::{argmax_labels, draw_flips, flip_sample, Dataset, Sample};
use super::loss::seg_loss;
use super::{lr_at, BestRecord, TrainConfig, TrainState};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::fusion::{Ctn, CtnConfig};
use crate::metrics::{dice, BinaryMask};
use crate::params::{init_rng, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::volio::{AORTA, CORONARY};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean foreground DICE over the validation samples.
    pub val_dice: Option<f64>,
}

fn stack(batch: &[Sample]) -> Result<(Tensor, Vec<u8>)> {
    let shape = batch[0].image.shape().to_vec();
    let mut image = Vec::with_capacity(batch.len() * batch[0].image.len());
    let mut target = Vec::with_capacity(batch.len() * batch[0].label.data().len());
    for s in batch {
        if s.image.shape() != &shape[..] {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", shape, s.image.shape())));
        }
        image.extend_from_slice(s.image.data());
        target.extend_from_slice(s.label.data());
    }
    let mut bshape = shape;
    bshape[0] = batch.len();
    Ok((Tensor::from_vec(&bshape, image)?, target))
}

/// One forward, backward and AdamW update on `batch` at the learning rate of
/// the state's current epoch. Returns the loss before the update.
pub fn train_step(model: &Ctn, state: &mut TrainState, batch: &[Sample], cfg: &TrainConfig) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let lr = lr_at(state.epoch, cfg)?;
    let (x, target) = stack(batch)?;
    let (loss, grads) = {
        let tape = Tape::new();
        let p = Bound::new(&tape, &state.params);
        let xv = tape.constant(x);
        let logits = model.forward(&p, xv)?;
        let l = seg_loss(&tape, logits, Rc::new(target), cfg.loss_weights)?;
        let loss = tape.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", state.step)));
        }
        let mut g = tape.backward(l);
        (loss, p.gradients(&mut g))
    };
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
    }
    state.optimizer.step(&mut state.params, &grads, lr)?;
    let rec = StepRecord {
        epoch: state.epoch,
        step: state.step,
        lr,
        loss,
    };
    state.step += 1;
    Ok(rec)
}

/// Mean foreground DICE of the network's argmax over `samples`.
pub(crate) fn mean_dice(model: &Ctn, state: &TrainState, samples: &[Sample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in samples {
        let logits = model.predict_logits(&state.params, &s.image)?;
        let pred = argmax_labels(&logits, s.label.spacing)?;
        let fg = [AORTA, CORONARY];
        total += dice(&BinaryMask::from_labels(&pred, &fg), &BinaryMask::from_labels(&s.label, &fg))?.value;
    }
    Ok(Some(total / samples.len() as f64))
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

pub struct FitOutput {
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Runs the remaining epochs of `state` (a fresh state when `None`).
///
/// With `out_dir` set, a JSONL log goes to `train_log.jsonl` (appended to when
/// resuming), the state after every epoch to `last/`, and the best state by
/// validation DICE to `best/`.
/// Without validation samples the latest epoch counts as the best.
pub fn fit(
    model_cfg: &CtnConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutput> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("the train split is empty".into()));
    }
    model_cfg.validate()?;
    let mut store = ParamStore::new();
    let model = Ctn::new(model_cfg, &mut store, cfg.seed)?;
    let resumed = resume.is_some();
    let mut state = match resume {
        Some(s) if !s.params.same_layout(&store) => {
            return Err(Error::Config("checkpoint parameters do not match the model configuration".into()))
        }
        Some(s) => s,
        None => TrainState::new(store, cfg),
    };
    let model = &model;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(resumed)
                .truncate(!resumed)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let mut write_line = |line: LogLine<'_>| -> Result<()> {
        if let Some((path, w)) = log.as_mut() {
            let text = serde_json::to_string(&line).expect("log record serializes");
            writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    };
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut init_rng(state.seed, &format!("train.order.{epoch}")));
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut rng = init_rng(state.seed, &format!("train.augment.{}", state.step));
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| flip_sample(&data.train[i], draw_flips(&mut rng, cfg.flip_prob)))
                .collect();
            let rec = train_step(model, &mut state, &batch, cfg)?;
            write_line(LogLine::Step(&rec))?;
            losses.push(rec.loss);
            steps.push(rec);
        }
        let val_dice = mean_dice(model, &state, &data.val)?;
        let rec = EpochRecord {
            epoch,
            step: state.step,
            lr: lr_at(epoch, cfg)?,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_dice,
        };
        state.epoch += 1;
        let improved = match (state.best, val_dice) {
            (None, _) | (_, None) => true,
            (Some(b), Some(v)) => b.val_dice.is_none_or(|bv| v > bv),
        };
        if improved {
            state.best = Some(BestRecord { epoch, val_dice });
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join("last"), model_cfg, cfg, &state)?;
            if improved {
                save_checkpoint(&dir.join("best"), model_cfg, cfg, &state)?;
            }
        }
        write_line(LogLine::Epoch(&rec))?;
        on_epoch(&rec);
        epochs.push(rec);
    }
    Ok(FitOutput { state, epochs, steps })
}
