use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use pbp_core::datasets::{batch_iterator, load_shapenet_part, Batch, DatasetSplit, Split};
use pbp_core::netcore::{adam_update, AdamConfig, AdamState, Graph, Tensor};
use pbp_core::pbpnet::{save_checkpoint, segmentation_loss, PbpNet};
use pbp_core::pcgeom::PointCloud;

use crate::config::{DatasetKind, RunConfig};
use crate::{CliError, CliResult};

/// Offset between the batching stream and the model initialization seed.
const BATCH_SEED_SALT: u64 = 0x5EED_BA7C;

/// `lr0 * factor^floor(step / decay_step)`.
pub fn learning_rate(cfg: &RunConfig, step: u64) -> f64 {
    cfg.lr * cfg.lr_decay.powi((step / cfg.lr_decay_step) as i32)
}

/// References for one split of the configured dataset.
pub fn dataset_split(cfg: &RunConfig, split: Split) -> CliResult<DatasetSplit> {
    let path = |p: &Option<PathBuf>| p.clone().ok_or_else(|| CliError::Config("key 'data_path': missing".into()));
    match &cfg.dataset {
        DatasetKind::Synthetic(kind) => {
            let (count, seed) = match split {
                Split::Train => (cfg.train_clouds, cfg.data_seed.wrapping_mul(2)),
                _ => (cfg.test_clouds, cfg.data_seed.wrapping_mul(2) + 1),
            };
            Ok(DatasetSplit::synthetic(*kind, count, cfg.cloud_points, seed))
        }
        DatasetKind::Text => {
            let dir = match split {
                Split::Train => path(&cfg.data_path)?,
                _ => cfg.test_path.clone().map_or_else(|| path(&cfg.data_path), Ok)?,
            };
            DatasetSplit::text_dir(&dir, cfg.resolved_num_classes()?).map_err(CliError::data)
        }
        DatasetKind::ShapeNet => {
            load_shapenet_part(&path(&cfg.data_path)?, &cfg.category, split).map_err(CliError::data)
        }
    }
}

pub fn load_clouds(cfg: &RunConfig, split: Split) -> CliResult<(DatasetSplit, Vec<PointCloud>)> {
    let refs = dataset_split(cfg, split)?;
    if refs.is_empty() {
        return Err(CliError::Data(format!("the {split:?} split of dataset {} is empty", cfg.dataset)));
    }
    let clouds = refs.load_all().map_err(CliError::data)?;
    Ok((refs, clouds))
}

pub fn build_model(cfg: &RunConfig) -> CliResult<PbpNet<f32>> {
    PbpNet::new(cfg.model_config()?, cfg.seed).map_err(|e| CliError::Config(format!("model: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} steps={} lr={} loss={:.6} accuracy={:.6}",
            self.epoch, self.steps, self.lr, self.loss, self.accuracy
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PbpNet<f32>,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

struct StepResult {
    loss: f32,
    correct: usize,
    grads: Vec<Tensor<f32>>,
}

fn train_step(model: &PbpNet<f32>, batch: &Batch) -> CliResult<StepResult> {
    let x = batch.coords_tensor::<f32>();
    let mut g = Graph::new();
    let trace = model.forward(&mut g, &x, false)?;
    let loss = segmentation_loss(&mut g, trace.logits, &batch.labels)?;
    let k = model.config().num_classes;
    let correct = g
        .value(trace.logits)
        .data()
        .chunks_exact(k)
        .zip(&batch.labels)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    let loss_value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let grads = trace
        .params
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
        .collect();
    Ok(StepResult {
        loss: loss_value,
        correct,
        grads,
    })
}

/// Trains a fresh model on `clouds`. `sink` receives one log line per epoch;
/// `checkpoints` enables writing the final and best-loss checkpoints.
pub fn fit(
    cfg: &RunConfig,
    clouds: &[PointCloud],
    mut sink: Option<&mut dyn Write>,
    checkpoints: bool,
) -> CliResult<TrainOutcome> {
    let mut model = build_model(cfg)?;
    let mut adam = AdamState::new(model.params());
    let adam_cfg = AdamConfig::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let best_path = cfg.best_checkpoint_path();
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut batches, mut correct, mut seen) = (0.0f64, 0usize, 0usize, 0usize);
        let mut lr = learning_rate(cfg, adam.step);
        for batch in batch_iterator(clouds, cfg.batch_size, cfg.points_per_cloud, cfg.seed ^ BATCH_SEED_SALT, epoch as u64)
            .map_err(CliError::data)?
        {
            let batch = batch.map_err(CliError::data)?;
            let step = train_step(&model, &batch)?;
            if !step.loss.is_finite() || step.grads.iter().any(|g| !g.all_finite()) {
                return Err(CliError::Numeric(format!(
                    "non-finite loss or gradient at epoch {} step {}",
                    epoch + 1,
                    adam.step + 1
                )));
            }
            lr = learning_rate(cfg, adam.step);
            adam_update(model.params_mut(), &step.grads, &mut adam, lr, &adam_cfg)?;
            loss_sum += f64::from(step.loss);
            batches += 1;
            correct += step.correct;
            seen += batch.labels.len();
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: adam.step,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
        };
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{}", record.to_line()).map_err(|e| CliError::Data(format!("writing log: {e}")))?;
        }
        if checkpoints && record.loss < best {
            best = record.loss;
            save_checkpoint(model.params(), &best_path).map_err(CliError::data)?;
        }
        history.push(record);
    }
    let checkpoint = if checkpoints {
        save_checkpoint(model.params(), &cfg.checkpoint).map_err(CliError::data)?;
        Some(cfg.checkpoint.clone())
    } else {
        None
    };
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
        best_checkpoint: checkpoints.then_some(best_path),
    })
}

/// Loads the training split, trains, appends to the run log and writes the
/// final and best-loss checkpoints.
pub fn run_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let (_, clouds) = load_clouds(cfg, Split::Train)?;
    let log_path = cfg.log_path();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    fit(cfg, &clouds, Some(&mut log), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_halves_after_decay_step() {
        let cfg = RunConfig {
            lr: 0.001,
            lr_decay: 0.5,
            lr_decay_step: 100,
            ..RunConfig::default()
        };
        assert_eq!(learning_rate(&cfg, 0), 0.001);
        assert_eq!(learning_rate(&cfg, 99), 0.001);
        assert_eq!(learning_rate(&cfg, 100), 0.0005);
        assert_eq!(learning_rate(&cfg, 250), 0.00025);
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
