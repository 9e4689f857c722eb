//! Training loop, loss schedule, checkpoints and evaluation.

mod checkpoint;
mod eval;

pub use checkpoint::{checkpoint_bytes, checkpoint_dtype, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{evaluate, EvalReport, FrameMetrics, CHAMFER_SCALE, NORMAL_SCALE};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, PosedBody};
use crate::codec::{Heads, ModelConfig, PatchSamples, ScaleModel};
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::loss::{record_frame_losses, LossWeights, NnIndex, Target};
use crate::scalar::Real;
use crate::seed::{derive_rng, derive_seed, stream};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

pub const HISTORY_FILE: &str = "history.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.alec";

/// Loss weights over training: the Chamfer and residual weights are fixed,
/// the normal and color weights switch on at `head_enable_epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub chamfer: f64,
    pub residual: f64,
    pub normal: f64,
    pub color: f64,
    pub head_enable_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            chamfer: 2.0e4,
            residual: 2.0e3,
            normal: 0.1,
            color: 0.1,
            head_enable_epoch: 200,
        }
    }
}

/// Weights in effect during (0-based) `epoch`.
pub fn loss_schedule(epoch: usize, config: &ScheduleConfig) -> LossWeights {
    let on = epoch >= config.head_enable_epoch;
    LossWeights {
        chamfer: config.chamfer,
        normal: if on { config.normal } else { 0.0 },
        residual: config.residual,
        color: if on { config.color } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Dataset manifest (used by the command-line front end).
    pub manifest: Option<PathBuf>,
    pub model: ModelConfig,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Epoch window of the plateau monitor (0 disables it).
    pub plateau_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3.0e-4,
            batch_size: 16,
            epochs: 800,
            schedule: ScheduleConfig::default(),
            seed: 0,
            manifest: None,
            model: ModelConfig::default(),
            checkpoint_every: 0,
            grad_clip: None,
            plateau_window: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("grad_clip must be positive, got {c}")));
            }
        }
        loss_schedule(self.schedule.head_enable_epoch, &self.schedule).validate()?;
        self.model.validate()
    }
}

/// One optimization step: batch-mean weighted loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    /// `(chamfer, normal, residual, color)`, each times its weight.
    pub weighted: [f64; 4],
    pub total: f64,
}

impl HistoryRow {
    pub const HEADER: &'static str = "epoch\tstep\tchamfer\tnormal\tresidual\tcolor\ttotal";

    pub fn to_line(&self) -> String {
        let [c, n, r, k] = self.weighted;
        format!("{}\t{}\t{c:e}\t{n:e}\t{r:e}\t{k:e}\t{:e}", self.epoch, self.step, self.total)
    }
}

pub struct TrainOutcome<T> {
    pub model: ScaleModel<T>,
    pub optimizer: Adam<T>,
    pub history: Vec<HistoryRow>,
    /// Epochs at which the plateau monitor fired.
    pub plateaus: Vec<usize>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

impl<T: Real> TrainOutcome<T> {
    /// Mean total loss of each epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        epoch_means(&self.history)
    }
}

fn epoch_means(history: &[HistoryRow]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for row in history {
        if out.len() <= row.epoch {
            out.resize(row.epoch + 1, (0.0, 0));
        }
        out[row.epoch].0 += row.total;
        out[row.epoch].1 += 1;
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// Whether the 5-epoch smoothed loss at the end of `epoch` failed to drop by
/// 1% over the preceding `window` epochs.
fn plateau_at(means: &[f64], epoch: usize, window: usize, head_enable: usize) -> bool {
    if window == 0 || (epoch + 1) % window != 0 || epoch < window + 4 {
        return false;
    }
    let start = epoch - window;
    // the schedule change makes losses on either side incomparable
    if start < head_enable && head_enable <= epoch {
        return false;
    }
    let smooth = |e: usize| means[e - 4..=e].iter().sum::<f64>() / 5.0;
    smooth(epoch) > 0.99 * smooth(start)
}

/// Per-frame training inputs prepared once.
struct Prepared<T> {
    body: PosedBody<T>,
    index: NnIndex<T>,
}

/// Trains a fresh model on `frames`. With `out_dir`, the per-step history,
/// periodic checkpoints and the final checkpoint are written there.
pub fn train<T: Real>(
    config: &TrainConfig,
    template: &BodyTemplate<f64>,
    frames: &[Frame<T>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let tpl = template.cast::<T>();
    let mut model = ScaleModel::for_template(config.model.clone(), &tpl, derive_seed(config.seed, stream::INIT, 0))?;
    if frames.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let prepared: Vec<Prepared<T>> = frames
        .iter()
        .map(|f| {
            f.scan.validate()?;
            Ok(Prepared { body: PosedBody::new(&tpl, &f.pose.cast())?, index: NnIndex::build(&f.scan.points)? })
        })
        .collect::<Result<_>>()?;
    let grid = PatchSamples::grid(model.chart_len(), config.model.patch_samples)?;
    let adam_cfg = AdamConfig { lr: config.learning_rate, ..AdamConfig::default() };
    let mut optimizer = Adam::new(adam_cfg, model.params());

    let mut history_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(HISTORY_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", HistoryRow::HEADER).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut plateaus = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let weights = loss_schedule(epoch, &config.schedule);
        let heads = Heads { normals: weights.normal > 0.0, colors: weights.color > 0.0 };
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, stream::SHUFFLE, epoch as u64));

        for (batch, ids) in order.chunks(config.batch_size).enumerate() {
            let bodies: Vec<&PosedBody<T>> = ids.iter().map(|&i| &prepared[i].body).collect();
            let samples = vec![&grid; ids.len()];
            let mut tape = Tape::new();
            let rec = model.record_train(&mut tape, &bodies, &samples, heads)?;

            let inv_b = T::one() / T::from_usize(ids.len()).unwrap();
            let mut terms = Vec::new();
            let mut weighted = [0.0f64; 4];
            for (pred, &i) in rec.frames.iter().zip(ids) {
                let scan = &frames[i].scan;
                let target = Target {
                    points: &scan.points,
                    normals: Some(&scan.normals),
                    colors: scan.colors.as_deref(),
                    index: &prepared[i].index,
                };
                let lv = record_frame_losses(&mut tape, pred, &target)?;
                let parts = lv.values(&tape).weighted(&weights);
                for (acc, v) in weighted.iter_mut().zip(parts) {
                    *acc += v.to_f64_lossless() / ids.len() as f64;
                }
                terms.push((lv.chamfer, T::lit(weights.chamfer) * inv_b));
                terms.push((lv.residual, T::lit(weights.residual) * inv_b));
                if let (Some(v), true) = (lv.normal, weights.normal > 0.0) {
                    terms.push((v, T::lit(weights.normal) * inv_b));
                }
                if let (Some(v), true) = (lv.color, weights.color > 0.0) {
                    terms.push((v, T::lit(weights.color) * inv_b));
                }
            }
            let loss = tape.weighted_sum(&terms)?;
            let total = tape.value(loss).data()[0].to_f64_lossless();
            if !total.is_finite() {
                let names: Vec<&str> = ids.iter().map(|&i| frames[i].scan.frame.as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    detail: format!("total {total}, weighted parts {weighted:?}, frames [{}]", names.join(", ")),
                });
            }
            let mut grads = tape.backward(loss)?;
            let mut grads = rec.param_grads(&mut grads, model.params());
            if let Some(clip) = config.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            optimizer.step(model.params_mut(), &grads)?;

            let row = HistoryRow { epoch, step, weighted, total };
            if let Some((w, path)) = history_file.as_mut() {
                writeln!(w, "{}", row.to_line()).and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
            }
            history.push(row);
            step += 1;
        }

        let means = epoch_means(&history);
        log::info!("epoch {epoch}: mean loss {:.6e}", means[epoch]);
        if plateau_at(&means, epoch, config.plateau_window, config.schedule.head_enable_epoch) {
            log::warn!("training loss plateaued over epochs {}..={epoch}", epoch + 1 - config.plateau_window);
            plateaus.push(epoch);
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs {
                model.set_trained(true);
                save_checkpoint(&model, Some(&optimizer), epoch + 1, &dir.join(format!("checkpoint_e{:04}.alec", epoch + 1)))?;
            }
        }
    }

    model.set_trained(true);
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(CHECKPOINT_FILE);
            save_checkpoint(&model, Some(&optimizer), config.epochs, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { model, optimizer, history, plateaus, checkpoint })
}

fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64_lossless().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Parses a history file written by [`train`].
pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HistoryRow::HEADER) {
        return Err(Error::format(path, "missing history header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(path, format!("line {}: malformed history row", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(HistoryRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                weighted: [num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?],
                total: num(f[6])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
