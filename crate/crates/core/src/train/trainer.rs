use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, OptimState, TrainConfig};
use crate::autodiff::{si_sdr_db_clamped, Tape, Tensor};
use crate::cruse::{prepare_input, save_checkpoint, separate, separation_graph, CruseConfig, CruseParams, ParamVars, PreparedInput};
use crate::dsp::{channel_average, MultichannelBuffer};
use crate::error::{Error, Result};
use crate::scenegen::{read_manifest, MANIFEST_FILE};
use crate::wav::read_wav;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// A training example: the stereo mixture and the channel-averaged target.
pub struct TrainingClip {
    pub id: String,
    pub y: MultichannelBuffer,
    pub target: Vec<f32>,
    input: PreparedInput<f32>,
}

impl TrainingClip {
    pub fn new(id: impl Into<String>, y: MultichannelBuffer, t: &MultichannelBuffer) -> Result<Self> {
        if t.num_channels() != 2 || t.len() != y.len() {
            return Err(Error::LengthMismatch(format!(
                "target stem is {}x{}, mixture {}x{}",
                t.num_channels(),
                t.len(),
                y.num_channels(),
                y.len()
            )));
        }
        let input = prepare_input(&y)?;
        Ok(Self {
            id: id.into(),
            target: channel_average(t).into_samples(),
            y,
            input,
        })
    }
}

/// Loads every clip of a generated dataset directory (mixture and target
/// stems only).
pub fn load_clips(dataset_dir: &Path) -> Result<Vec<TrainingClip>> {
    let records = read_manifest(&dataset_dir.join(MANIFEST_FILE))?;
    records
        .iter()
        .map(|r| {
            let y = read_wav(dataset_dir.join(&r.y_path))?;
            let t = read_wav(dataset_dir.join(&r.t_path))?;
            TrainingClip::new(r.clip_id.clone(), y, &t)
        })
        .collect()
}

/// Loss `-SI-SDR(t_hat, t_phi)` and its gradient for every parameter tensor,
/// in [`CruseParams::tensors`] order.
pub fn loss_and_gradients(params: &CruseParams, clip: &TrainingClip, clamp_db: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, true);
    let (_, out) = separation_graph(&mut tape, params, &pv, &clip.input)?;
    let sdr = tape.si_sdr_clamped(out, &clip.target, clamp_db)?;
    let loss = tape.scale(sdr, -1.0);
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    Ok((value, pv.vars().into_iter().map(|v| grads.get(v).clone()).collect()))
}

/// SI-SDR of the separated output minus that of the unprocessed channel
/// average, both against the target.
pub fn clip_delta_si_sdr(params: &CruseParams, clip: &TrainingClip, clamp_db: f64) -> Result<f64> {
    let out = separate(params, &clip.y)?;
    let mix = channel_average(&clip.y);
    Ok(si_sdr_db_clamped(out.samples(), &clip.target, clamp_db)? - si_sdr_db_clamped(mix.samples(), &clip.target, clamp_db)?)
}

pub fn mean_delta_si_sdr(params: &CruseParams, clips: &[TrainingClip], clamp_db: f64) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let deltas = clips
        .par_iter()
        .map(|c| clip_delta_si_sdr(params, c, clamp_db))
        .collect::<Result<Vec<_>>>()?;
    Ok(deltas.iter().sum::<f64>() / deltas.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss_db: f64,
    pub val_delta_sisdr_db: Option<f64>,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub last: CruseParams,
    /// Parameters of the epoch with the best validation ΔSI-SDR (the last
    /// epoch when there is no validation set).
    pub best: CruseParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn mean_loss(params: &CruseParams, clips: &[TrainingClip], clamp_db: f64, epoch: usize) -> Result<f64> {
    let losses = clips
        .par_iter()
        .map(|c| loss_and_gradients(params, c, clamp_db).map(|(l, _)| (l, c)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (l, c) in losses {
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, clip: c.id.clone() });
        }
        total += l;
    }
    Ok(total / clips.len() as f64)
}

/// Trains `params` in place of a copy. Epoch 0 records the loss and
/// validation score of the initial weights; epochs `1..=config.epochs`
/// each make one shuffled pass with an AdamW step per batch and log the
/// mean batch loss seen during the pass. When `out_dir` is given the log
/// is streamed to [`LOG_FILE`] and checkpoints are written there.
pub fn train(
    params: CruseParams,
    train_set: &[TrainingClip],
    val_set: &[TrainingClip],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let start = Instant::now();
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut record = |entry: EpochLog, log: &mut Vec<EpochLog>| -> Result<()> {
        info!(
            "epoch {}: loss {:.3} dB, val ΔSI-SDR {}",
            entry.epoch,
            entry.mean_loss_db,
            entry.val_delta_sisdr_db.map_or("n/a".into(), |v| format!("{v:.3} dB"))
        );
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        log.push(entry);
        Ok(())
    };
    let validate = |p: &CruseParams| -> Result<Option<f64>> {
        if val_set.is_empty() {
            Ok(None)
        } else {
            mean_delta_si_sdr(p, val_set, config.clamp_db).map(Some)
        }
    };

    let mut params = params;
    let mut log = Vec::with_capacity(config.epochs + 1);
    let initial = validate(&params)?;
    record(
        EpochLog {
            epoch: 0,
            mean_loss_db: mean_loss(&params, train_set, config.clamp_db, 0)?,
            val_delta_sisdr_db: initial,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        &mut log,
    )?;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_score = initial.unwrap_or(f64::NEG_INFINITY);

    let mut state = OptimState::new(&params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| loss_and_gradients(&params, &train_set[i], config.clamp_db))
                .collect::<Result<Vec<_>>>()?;
            let mut sum: Option<Vec<Tensor>> = None;
            for (&i, (loss, grads)) in batch.iter().zip(results) {
                if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        clip: train_set[i].id.clone(),
                    });
                }
                total += loss;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.accumulate(g)),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            adamw_step(&mut params.tensors_mut(), &grads, &mut state, config)?;
        }
        let val = validate(&params)?;
        record(
            EpochLog {
                epoch,
                mean_loss_db: total / train_set.len() as f64,
                val_delta_sisdr_db: val,
                wall_time_s: start.elapsed().as_secs_f64(),
            },
            &mut log,
        )?;
        let score = val.unwrap_or(f64::INFINITY);
        if score > best_score || val.is_none() {
            best_score = score;
            best = params.clone();
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                save_checkpoint(dir.join(BEST_CHECKPOINT), &best)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        if best_epoch == 0 {
            warn!("no epoch improved on the initial validation score");
            save_checkpoint(dir.join(BEST_CHECKPOINT), &best)?;
        }
        save_checkpoint(dir.join(LAST_CHECKPOINT), &params)?;
    }
    Ok(TrainOutcome {
        last: params,
        best,
        best_epoch,
        log,
    })
}

/// Trains a freshly initialised model (seeded from `config.seed`) on a
/// generated dataset directory, validating on `val_dir` when given.
pub fn train_loop(
    train_dir: &Path,
    val_dir: Option<&Path>,
    model: &CruseConfig,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    let train_set = load_clips(train_dir)?;
    let val_set = match val_dir {
        Some(d) => load_clips(d)?,
        None => Vec::new(),
    };
    info!("training on {} clips, validating on {}", train_set.len(), val_set.len());
    let params = CruseParams::init(model, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    train(params, &train_set, &val_set, config, Some(out_dir))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
