use std::fmt::Write as _;

use pbp_core::datasets::{DatasetSplit, Split};
use pbp_core::pcgeom::PointCloud;
use pbp_core::planeops::PlaneId;

use crate::config::RunConfig;
use crate::eval::evaluate;
use crate::train::{fit, load_clouds};
use crate::CliResult;

/// One architecture variant of the sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub planes: Vec<PlaneId>,
    pub tnet: bool,
    pub multiscale: bool,
    pub additional: bool,
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            planes: self.planes.clone(),
            use_tnet: self.tnet,
            use_multiscale: self.multiscale,
            use_additional: self.additional,
            ..base.clone()
        }
    }

    pub fn planes_label(&self) -> String {
        self.planes.iter().map(|p| p.name()).collect::<Vec<_>>().join("+")
    }
}

/// Plane counts 1..=3 (XY first) crossed with every on/off combination of
/// T-Net, multi-scale taps and the additional branch: 24 variants.
pub fn variant_grid() -> Vec<Variant> {
    let mut out = Vec::with_capacity(24);
    for count in 1..=3 {
        for tnet in [false, true] {
            for multiscale in [false, true] {
                for additional in [false, true] {
                    out.push(Variant {
                        planes: PlaneId::ALL[..count].to_vec(),
                        tnet,
                        multiscale,
                        additional,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub miou: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("planes    tnet  multiscale  additional  mIoU\n");
        for r in &self.rows {
            let v = &r.variant;
            let _ = writeln!(
                s,
                "{:<8}  {:<4}  {:<10}  {:<10}  {:.4}",
                v.planes_label(),
                mark(v.tnet),
                mark(v.multiscale),
                mark(v.additional),
                r.miou
            );
        }
        s
    }
}

/// Trains `variant` from scratch on `train` and scores it on `test`.
pub fn run_variant(
    base: &RunConfig,
    variant: &Variant,
    train: &[PointCloud],
    test_refs: &DatasetSplit,
    test: &[PointCloud],
) -> CliResult<AblationRow> {
    let cfg = variant.apply(base);
    cfg.validate()?;
    let outcome = fit(&cfg, train, None, false)?;
    let report = evaluate(&outcome.model, &cfg, test_refs, test)?;
    Ok(AblationRow {
        variant: variant.clone(),
        miou: report.mean_iou,
        final_loss: outcome.history.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Trains and evaluates every variant of [`variant_grid`] under the same
/// seed and data.
pub fn run_ablate(cfg: &RunConfig) -> CliResult<AblationReport> {
    let (_, train) = load_clouds(cfg, Split::Train)?;
    let (test_refs, test) = load_clouds(cfg, Split::Test)?;
    let rows = variant_grid()
        .iter()
        .map(|v| run_variant(cfg, v, &train, &test_refs, &test))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_24_distinct_variants() {
        let grid = variant_grid();
        assert_eq!(grid.len(), 24);
        for (i, a) in grid.iter().enumerate() {
            assert!(grid[i + 1..].iter().all(|b| a != b));
        }
        assert_eq!(grid[0].planes, vec![PlaneId::XY]);
    }
}
