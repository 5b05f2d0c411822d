//! Point-cloud segmentation data: plain-text point files, the ShapeNet-Part
//! directory layout, synthetic splits and deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netcore::Tensor;
use crate::pcgeom::{make_synthetic_task, sample_fixed_count, Point3, PointCloud, SyntheticKind};
use crate::real::Real;

/// Parses ASCII `x y z [label]` lines; blank lines and `#` comments are
/// skipped. Either every point carries a label or none does.
pub fn load_points_text(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(path, &text)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_points(path: &Path, text: &str) -> Result<PointCloud> {
    let mut coords: Vec<Point3> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut labelled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(parse_err(path, line_no, format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (v, f) in p.iter_mut().zip(&fields[..3]) {
            *v = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line_no, format!("'{f}' is not a finite number")))?;
        }
        let has_label = fields.len() == 4;
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(parse_err(path, line_no, "labels present on some lines but not others"));
        }
        if has_label {
            labels.push(
                fields[3]
                    .parse()
                    .map_err(|_| parse_err(path, line_no, format!("'{}' is not a class id", fields[3])))?,
            );
        }
        coords.push(p);
    }
    if coords.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no points", path.display())));
    }
    let cloud = PointCloud::new(coords)?;
    if labels.is_empty() {
        Ok(cloud)
    } else {
        let k = labels.iter().max().unwrap() + 1;
        cloud.with_labels(labels, k)
    }
}

/// One ShapeNet-Part object category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeCategory {
    pub name: &'static str,
    pub synset: &'static str,
    pub num_parts: usize,
    /// First global part id of this category.
    pub offset: usize,
}

impl ShapeCategory {
    pub fn part_ids(&self) -> Vec<usize> {
        (self.offset..self.offset + self.num_parts).collect()
    }
}

macro_rules! categories {
    ($(($name:literal, $synset:literal, $parts:literal, $offset:literal)),* $(,)?) => {
        [$(ShapeCategory { name: $name, synset: $synset, num_parts: $parts, offset: $offset }),*]
    };
}

/// The 16 categories and their slices of the global 50-part label space.
pub const SHAPENET_CATEGORIES: [ShapeCategory; 16] = categories![
    ("Airplane", "02691156", 4, 0),
    ("Bag", "02773838", 2, 4),
    ("Cap", "02954340", 2, 6),
    ("Car", "02958343", 4, 8),
    ("Chair", "03001627", 4, 12),
    ("Earphone", "03261776", 3, 16),
    ("Guitar", "03467517", 3, 19),
    ("Knife", "03624134", 2, 22),
    ("Lamp", "03636649", 4, 24),
    ("Laptop", "03642806", 2, 28),
    ("Motorbike", "03790512", 6, 30),
    ("Mug", "03797390", 2, 36),
    ("Pistol", "03948459", 3, 38),
    ("Rocket", "04099429", 3, 41),
    ("Skateboard", "04225987", 3, 44),
    ("Table", "04379243", 3, 47),
];

pub const SHAPENET_NUM_PARTS: usize = 50;

pub fn shapenet_category(key: &str) -> Result<&'static ShapeCategory> {
    SHAPENET_CATEGORIES
        .iter()
        .find(|c| c.name.eq_ignore_ascii_case(key) || c.synset == key)
        .ok_or_else(|| Error::Dataset(format!("unknown ShapeNet-Part category '{key}'")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::InvalidInput(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    /// ShapeNet-Part points plus 1-based local part labels.
    ShapeNet { points: PathBuf, labels: PathBuf },
    /// A plain-text point file.
    Text(PathBuf),
    Synthetic { kind: SyntheticKind, points: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub source: SampleSource,
    /// Index into [`DatasetSplit::categories`], when the dataset has them.
    pub category: Option<usize>,
}

/// A list of sample references plus the label space they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub categories: Vec<ShapeCategory>,
}

fn derive_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17)
}

impl DatasetSplit {
    /// `clouds` synthetic clouds whose seeds derive from `seed`.
    pub fn synthetic(kind: SyntheticKind, clouds: usize, points: usize, seed: u64) -> Self {
        Self {
            samples: (0..clouds as u64)
                .map(|i| Sample {
                    source: SampleSource::Synthetic {
                        kind,
                        points,
                        seed: derive_seed(seed, i),
                    },
                    category: None,
                })
                .collect(),
            num_classes: kind.num_classes(),
            categories: Vec::new(),
        }
    }

    /// Every `*.txt`/`*.pts` file of `dir`, sorted by name.
    pub fn text_dir(dir: &Path, num_classes: usize) -> Result<Self> {
        let mut files = list_files(dir, &["txt", "pts"])?;
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("no point files in {}", dir.display())));
        }
        Ok(Self {
            samples: files
                .into_iter()
                .map(|p| Sample {
                    source: SampleSource::Text(p),
                    category: None,
                })
                .collect(),
            num_classes,
            categories: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads sample `i` with labels in the split's label space.
    pub fn load(&self, i: usize) -> Result<PointCloud> {
        let sample = &self.samples[i];
        let cloud = match &sample.source {
            SampleSource::Synthetic { kind, points, seed } => make_synthetic_task(*kind, *points, *seed)?,
            SampleSource::Text(path) => load_points_text(path)?,
            SampleSource::ShapeNet { points, labels } => {
                let cat = sample
                    .category
                    .map(|c| self.categories[c])
                    .ok_or_else(|| Error::Dataset(format!("{} has no category", points.display())))?;
                load_shapenet_sample(points, labels, &cat)?
            }
        };
        match cloud.labels() {
            Some(l) => {
                let labels = l.to_vec();
                cloud.with_labels(labels, self.num_classes).map_err(|e| match e {
                    Error::LabelOutOfRange { label, num_classes } => Error::Dataset(format!(
                        "sample {i}: label {label} outside the {num_classes}-class label space"
                    )),
                    other => other,
                })
            }
            None => Ok(cloud),
        }
    }

    pub fn load_all(&self) -> Result<Vec<PointCloud>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)) {
            out.push(path);
        }
    }
    Ok(out)
}

fn load_shapenet_sample(points: &Path, labels: &Path, cat: &ShapeCategory) -> Result<PointCloud> {
    let cloud = load_points_text(points)?;
    let text = fs::read_to_string(labels).map_err(|e| Error::io(labels, e))?;
    let mut global = Vec::with_capacity(cloud.len());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let local: usize = line
            .parse()
            .map_err(|_| parse_err(labels, i + 1, format!("'{line}' is not a part id")))?;
        if local == 0 || local > cat.num_parts {
            return Err(Error::Dataset(format!(
                "{}: part {local} outside 1..={} for {}",
                labels.display(),
                cat.num_parts,
                cat.name
            )));
        }
        global.push(cat.offset + local - 1);
    }
    if global.len() != cloud.len() {
        return Err(Error::Dataset(format!(
            "{} has {} labels for {} points",
            labels.display(),
            global.len(),
            cloud.len()
        )));
    }
    PointCloud::new(cloud.coords().to_vec())?.with_labels(global, SHAPENET_NUM_PARTS)
}

/// Shape ids listed for `synset` in `train_test_split/shuffled_<split>_file_list.json`.
fn split_list(root: &Path, split: Split, synset: &str) -> Result<Option<Vec<String>>> {
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::All => return Ok(None),
    };
    let path = root.join("train_test_split").join(format!("shuffled_{name}_file_list.json"));
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    // a JSON array of "shape_data/<synset>/<id>" strings
    Ok(Some(
        text.split('"')
            .skip(1)
            .step_by(2)
            .filter_map(|entry| {
                let mut parts = entry.rsplit('/');
                let id = parts.next()?;
                (parts.next()? == synset).then(|| id.to_string())
            })
            .collect(),
    ))
}

/// Lists one category (or every category present, for `"all"`) of a
/// ShapeNet-Part tree laid out as `<root>/<category>/points/*.pts` and
/// `<root>/<category>/points_label/*.seg`. Category directories may be named
/// by synset id or category name.
///
/// Splits come from the official `train_test_split` lists when present;
/// otherwise every fifth shape (by sorted id) is test and the rest train.
pub fn load_shapenet_part(root: &Path, category: &str, split: Split) -> Result<DatasetSplit> {
    let selected: Vec<&ShapeCategory> = if category.eq_ignore_ascii_case("all") {
        SHAPENET_CATEGORIES
            .iter()
            .filter(|c| category_dir(root, c).is_some())
            .collect()
    } else {
        vec![shapenet_category(category)?]
    };
    if selected.is_empty() {
        return Err(Error::Dataset(format!("no ShapeNet-Part categories under {}", root.display())));
    }
    let mut samples = Vec::new();
    for (ci, cat) in selected.iter().enumerate() {
        let dir = category_dir(root, cat).ok_or_else(|| {
            Error::Dataset(format!("category {} not found under {}", cat.name, root.display()))
        })?;
        let mut files = list_files(&dir.join("points"), &["pts"])?;
        files.sort();
        let listed = split_list(root, split, cat.synset)?;
        for (i, pts) in files.into_iter().enumerate() {
            let stem = pts.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let keep = match (&listed, split) {
                (Some(ids), _) => ids.contains(&stem),
                (None, Split::All) => true,
                (None, Split::Test) => i % 5 == 4,
                (None, Split::Train) => i % 5 != 4,
                (None, Split::Val) => {
                    return Err(Error::Dataset(format!(
                        "validation split requested but {} has no split lists",
                        root.display()
                    )))
                }
            };
            if !keep {
                continue;
            }
            let seg = dir.join("points_label").join(format!("{stem}.seg"));
            if !seg.exists() {
                return Err(Error::Dataset(format!(
                    "sample {}/{stem} has no label file {}",
                    cat.name,
                    seg.display()
                )));
            }
            samples.push(Sample {
                source: SampleSource::ShapeNet { points: pts, labels: seg },
                category: Some(ci),
            });
        }
    }
    Ok(DatasetSplit {
        samples,
        num_classes: SHAPENET_NUM_PARTS,
        categories: selected.into_iter().copied().collect(),
    })
}

fn category_dir(root: &Path, cat: &ShapeCategory) -> Option<PathBuf> {
    [cat.synset, cat.name]
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.join("points").is_dir())
}

/// `B x N` points and labels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub points: usize,
    pub coords: Vec<f64>,
    pub labels: Vec<usize>,
    /// Index of each cloud in the source slice.
    pub sample_indices: Vec<usize>,
}

impl Batch {
    pub fn coords_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.batch_size, self.points, 3],
            self.coords.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("batch buffer matches its shape")
    }
}

/// One epoch over `clouds`: order shuffled from `(seed, epoch)`, every cloud
/// resampled to `points_per_cloud`, final partial batch kept.
pub struct BatchIterator<'a> {
    clouds: &'a [PointCloud],
    order: Vec<usize>,
    batch_size: usize,
    points: usize,
    seed: u64,
    cursor: usize,
}

pub fn batch_iterator(
    clouds: &[PointCloud],
    batch_size: usize,
    points_per_cloud: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIterator<'_>> {
    if batch_size == 0 || points_per_cloud == 0 {
        return Err(Error::InvalidInput("batch size and points per cloud must be positive".into()));
    }
    let epoch_seed = derive_seed(seed, epoch);
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(BatchIterator {
        clouds,
        order,
        batch_size,
        points: points_per_cloud,
        seed: epoch_seed,
        cursor: 0,
    })
}

/// Clouds in index order without shuffling, for evaluation.
pub fn sequential_batches(
    clouds: &[PointCloud],
    batch_size: usize,
    points_per_cloud: usize,
    seed: u64,
) -> Result<BatchIterator<'_>> {
    let mut it = batch_iterator(clouds, batch_size, points_per_cloud, seed, 0)?;
    it.order = (0..clouds.len()).collect();
    Ok(it)
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let mut batch = Batch {
            batch_size: indices.len(),
            points: self.points,
            coords: Vec::with_capacity(indices.len() * self.points * 3),
            labels: Vec::with_capacity(indices.len() * self.points),
            sample_indices: indices.clone(),
        };
        for &i in &indices {
            let sampled = match sample_fixed_count(&self.clouds[i], self.points, derive_seed(self.seed, i as u64)) {
                Ok(c) => c,
                Err(e) => return Some(Err(e)),
            };
            let Some(labels) = sampled.labels() else {
                return Some(Err(Error::Dataset(format!("cloud {i} has no labels"))));
            };
            batch.labels.extend_from_slice(labels);
            batch.coords.extend(sampled.coords().iter().flatten());
        }
        Some(Ok(batch))
    }
}
