use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pbp_core::datasets::SHAPENET_NUM_PARTS;
use pbp_core::pbpnet::PbpConfig;
use pbp_core::pcgeom::{SyntheticKind, DEFAULT_MARGIN};
use pbp_core::planeops::{Accumulation, PlaneId};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    Synthetic(SyntheticKind),
    /// Directories of plain-text point files.
    Text,
    ShapeNet,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Synthetic(k) => write!(f, "{k}"),
            DatasetKind::Text => f.write_str("text"),
            DatasetKind::ShapeNet => f.write_str("shapenet"),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(DatasetKind::Text),
            "shapenet" => Ok(DatasetKind::ShapeNet),
            other => other
                .parse()
                .map(DatasetKind::Synthetic)
                .map_err(|_| format!("expected text, shapenet or a synthetic task name, got '{other}'")),
        }
    }
}

/// Everything a run needs: model architecture, data source, optimization and
/// output locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub resolution: usize,
    pub margin: f64,
    /// Derived from the dataset when unset.
    pub num_classes: Option<usize>,
    pub planes: Vec<PlaneId>,
    pub use_tnet: bool,
    pub use_multiscale: bool,
    pub use_additional: bool,
    pub shallow_feat_dim: usize,
    pub additional_feat_dim: usize,
    pub shared_backbone: bool,
    pub coord_grad: bool,
    /// Used only when `deterministic` is off.
    pub accumulation: Accumulation,

    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    /// Evaluation data for text datasets; defaults to `data_path`.
    pub test_path: Option<PathBuf>,
    pub category: String,
    pub train_clouds: usize,
    pub test_clouds: usize,
    /// Points generated per synthetic cloud.
    pub cloud_points: usize,
    pub data_seed: u64,
    pub eval_split: String,

    pub epochs: usize,
    pub batch_size: usize,
    pub points_per_cloud: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_step: u64,
    pub seed: u64,
    pub deterministic: bool,

    pub checkpoint: PathBuf,
    /// Defaults to the checkpoint path with `.log` appended.
    pub log: Option<PathBuf>,
    /// Key-value evaluation report destination.
    pub report: Option<PathBuf>,

    pub gradcheck_tolerance: f64,
    pub gradcheck_points: usize,
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            margin: DEFAULT_MARGIN,
            num_classes: None,
            planes: PlaneId::ALL.to_vec(),
            use_tnet: true,
            use_multiscale: true,
            use_additional: true,
            shallow_feat_dim: 16,
            additional_feat_dim: 32,
            shared_backbone: true,
            coord_grad: true,
            accumulation: Accumulation::Parallel,
            dataset: DatasetKind::Synthetic(SyntheticKind::ZHalves),
            data_path: None,
            test_path: None,
            category: "all".into(),
            train_clouds: 32,
            test_clouds: 16,
            cloud_points: 2048,
            data_seed: 1,
            eval_split: "test".into(),
            epochs: 200,
            batch_size: 8,
            points_per_cloud: 2048,
            lr: 0.001,
            lr_decay: 0.5,
            lr_decay_step: 200_000,
            seed: 0,
            deterministic: true,
            checkpoint: PathBuf::from("pbp.ckpt"),
            log: None,
            report: None,
            gradcheck_tolerance: 1e-2,
            gradcheck_points: 12,
            gradcheck_samples: 4,
        }
    }
}

fn bad(key: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("key '{key}': {msg}"))
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| bad(key, format!("cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got '{value}'"))),
    }
}

fn parse_planes(key: &str, value: &str) -> CliResult<Vec<PlaneId>> {
    let mut planes = value
        .split(',')
        .map(|p| p.trim().parse::<PlaneId>().map_err(|e| bad(key, e)))
        .collect::<CliResult<Vec<_>>>()?;
    planes.sort();
    planes.dedup();
    Ok(planes)
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        match key {
            "resolution" => self.resolution = parse_value(key, v)?,
            "margin" => self.margin = parse_value(key, v)?,
            "num_classes" => self.num_classes = Some(parse_value(key, v)?),
            "planes" => self.planes = parse_planes(key, v)?,
            "tnet" => self.use_tnet = parse_bool(key, v)?,
            "multiscale" => self.use_multiscale = parse_bool(key, v)?,
            "additional" => self.use_additional = parse_bool(key, v)?,
            "shallow_feat_dim" => self.shallow_feat_dim = parse_value(key, v)?,
            "additional_feat_dim" => self.additional_feat_dim = parse_value(key, v)?,
            "shared_backbone" => self.shared_backbone = parse_bool(key, v)?,
            "coord_grad" => self.coord_grad = parse_bool(key, v)?,
            "accumulation" => self.accumulation = parse_value(key, v)?,
            "dataset" => self.dataset = parse_value(key, v)?,
            "data_path" => self.data_path = Some(PathBuf::from(v)),
            "test_path" => self.test_path = Some(PathBuf::from(v)),
            "category" => self.category = v.to_string(),
            "train_clouds" => self.train_clouds = parse_value(key, v)?,
            "test_clouds" => self.test_clouds = parse_value(key, v)?,
            "cloud_points" => self.cloud_points = parse_value(key, v)?,
            "data_seed" => self.data_seed = parse_value(key, v)?,
            "eval_split" => self.eval_split = v.to_string(),
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "points_per_cloud" => self.points_per_cloud = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "lr_decay" => self.lr_decay = parse_value(key, v)?,
            "lr_decay_step" => self.lr_decay_step = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "log" => self.log = Some(PathBuf::from(v)),
            "report" => self.report = Some(PathBuf::from(v)),
            "gradcheck_tolerance" => self.gradcheck_tolerance = parse_value(key, v)?,
            "gradcheck_points" => self.gradcheck_points = parse_value(key, v)?,
            "gradcheck_samples" => self.gradcheck_samples = parse_value(key, v)?,
            _ => return Err(CliError::Config(format!("key '{key}': unknown key"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(bad("lr_decay", "must lie in (0, 1]"));
        }
        if self.lr_decay_step == 0 {
            return Err(bad("lr_decay_step", "must be at least 1"));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("points_per_cloud", self.points_per_cloud),
            ("gradcheck_samples", self.gradcheck_samples),
        ] {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        if !(1..=16).contains(&self.gradcheck_points) {
            return Err(bad("gradcheck_points", "must lie in 1..=16"));
        }
        if !(self.gradcheck_tolerance > 0.0) {
            return Err(bad("gradcheck_tolerance", "must be positive"));
        }
        if self.planes.is_empty() {
            return Err(bad("planes", "at least one plane is required"));
        }
        if !["train", "test", "val", "all"].contains(&self.eval_split.as_str()) {
            return Err(bad("eval_split", "expected train, val, test or all"));
        }
        match self.dataset {
            DatasetKind::Synthetic(_) => {
                if self.train_clouds == 0 {
                    return Err(bad("train_clouds", "must be at least 1"));
                }
                if self.cloud_points < 8 {
                    return Err(bad("cloud_points", "must be at least 8"));
                }
            }
            DatasetKind::Text | DatasetKind::ShapeNet => {
                if self.data_path.is_none() {
                    return Err(bad("data_path", format!("required for dataset {}", self.dataset)));
                }
            }
        }
        self.model_config()?
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn resolved_num_classes(&self) -> CliResult<usize> {
        match (self.num_classes, &self.dataset) {
            (Some(0), _) => Err(bad("num_classes", "must be at least 1")),
            (Some(k), _) => Ok(k),
            (None, DatasetKind::Synthetic(kind)) => Ok(kind.num_classes()),
            (None, DatasetKind::ShapeNet) => Ok(SHAPENET_NUM_PARTS),
            (None, DatasetKind::Text) => Err(bad("num_classes", "required for text datasets")),
        }
    }

    pub fn model_config(&self) -> CliResult<PbpConfig> {
        let mut m = PbpConfig::new(self.resolved_num_classes()?).with_planes(&self.planes);
        m.resolution = self.resolution;
        m.margin = self.margin;
        m.use_tnet = self.use_tnet;
        m.use_multiscale = self.use_multiscale;
        m.use_additional = self.use_additional;
        m.shallow_feat_dim = self.shallow_feat_dim;
        m.additional_feat_dim = self.additional_feat_dim;
        m.shared_backbone = self.shared_backbone;
        m.coord_grad = self.coord_grad;
        m.accumulation = if self.deterministic {
            Accumulation::Sorted
        } else {
            self.accumulation
        };
        Ok(m)
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| suffixed(&self.checkpoint, ".log"))
    }

    /// Where the lowest-loss checkpoint is kept during training.
    pub fn best_checkpoint_path(&self) -> PathBuf {
        suffixed(&self.checkpoint, ".best")
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Reads the optional config file, then applies `key=value` overrides in
/// order, then validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text, &p.display().to_string())?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override '{o}': expected key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
