use std::fs;
use std::path::Path;

use pbp_core::datasets::{sequential_batches, DatasetSplit, Split};
use pbp_core::metrics::{ConfusionMatrix, EvalReport, ShapeIouAccumulator};
use pbp_core::pbpnet::{load_checkpoint, PbpNet};
use pbp_core::pcgeom::PointCloud;

use crate::config::RunConfig;
use crate::train::{build_model, load_clouds};
use crate::{CliError, CliResult};

/// Index of the largest logit among `allowed` classes (all when `None`).
fn restricted_argmax(row: &[f32], allowed: Option<&[usize]>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    let mut consider = |c: usize| {
        if row[c] > best.1 {
            best = (c, row[c]);
        }
    };
    match allowed {
        Some(parts) => parts.iter().copied().for_each(&mut consider),
        None => (0..row.len()).for_each(&mut consider),
    }
    best.0
}

/// Scores `model` on `clouds`. When the split carries object categories,
/// predictions are restricted to each shape's own parts and the
/// category-mean IoU is reported as well.
pub fn evaluate(model: &PbpNet<f32>, cfg: &RunConfig, refs: &DatasetSplit, clouds: &[PointCloud]) -> CliResult<EvalReport> {
    let k = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let mut shapes = ShapeIouAccumulator::new();
    let with_categories = !refs.categories.is_empty();
    for batch in sequential_batches(clouds, cfg.batch_size, cfg.points_per_cloud, cfg.seed).map_err(CliError::data)? {
        let batch = batch.map_err(CliError::data)?;
        let logits = model.predict(&batch.coords_tensor::<f32>())?;
        let n = batch.points;
        for (b, &sample) in batch.sample_indices.iter().enumerate() {
            let category = refs.samples[sample].category.map(|c| &refs.categories[c]);
            let parts = category.map(|c| c.part_ids());
            let truth = &batch.labels[b * n..(b + 1) * n];
            let pred: Vec<usize> = logits.data()[b * n * k..(b + 1) * n * k]
                .chunks_exact(k)
                .map(|row| restricted_argmax(row, parts.as_deref()))
                .collect();
            cm.update(&pred, truth)?;
            if let (Some(cat), Some(parts)) = (category, &parts) {
                shapes.add_shape(cat.name, parts, &pred, truth)?;
            }
        }
    }
    let mciou = if with_categories {
        Some(shapes.category_mean_iou()?)
    } else {
        None
    };
    Ok(EvalReport::from_confusion(&cm, mciou)?)
}

fn parse_split(name: &str) -> CliResult<Split> {
    name.parse().map_err(|e| CliError::Config(format!("key 'eval_split': {e}")))
}

/// Loads `checkpoint` into the configured architecture and evaluates it on
/// the configured split. Writes the key-value report when `report` is set.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<EvalReport> {
    let mut model = build_model(cfg)?;
    let stored = load_checkpoint::<f32>(checkpoint).map_err(CliError::data)?;
    model.params_mut().load_from(&stored).map_err(CliError::data)?;
    let (refs, clouds) = load_clouds(cfg, parse_split(&cfg.eval_split)?)?;
    let report = evaluate(&model, cfg, &refs, &clouds)?;
    if let Some(path) = &cfg.report {
        fs::write(path, report.to_key_value()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_respects_allowed_parts() {
        let row = [0.9, 0.1, 0.5, 0.3];
        assert_eq!(restricted_argmax(&row, None), 0);
        assert_eq!(restricted_argmax(&row, Some(&[1, 2, 3])), 2);
    }
}
