//! Image datasets: CIFAR binary batches, the `IMGS1` container, a synthetic
//! task generator, and seeded splits.
//!
//! Every loader yields `[N, 3, 32, 32]` images scaled by `1/255` into `[0, 1]`;
//! no further normalization is applied.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SenaError};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const IMGS_MAGIC: &[u8; 5] = b"IMGS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(SenaError::InvalidArgument("dataset needs at least one class".into()));
        }
        let n = match images.shape() {
            [n, _, _, _] => *n,
            other => {
                return Err(SenaError::Shape(format!(
                    "dataset images must be [N,C,H,W], got {other:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(SenaError::Shape(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(SenaError::InvalidLabel { label, n_classes });
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            n_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(SenaError::InvalidArgument(format!(
                    "index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Dataset::new(name, images, labels, self.n_classes)
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SenaError::io(path, e))
}

/// Appends RGB bytes as `[0,1]` floats.
fn push_pixels(bytes: &[u8], out: &mut Vec<f32>) {
    out.extend(bytes.iter().map(|&b| b as f32 / 255.0));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn n_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Label bytes preceding the pixels of each record.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    fn split_files(self, split: FileSplit) -> &'static [&'static str] {
        match (self, split) {
            (CifarVariant::Cifar10, FileSplit::Train) => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, FileSplit::Test) => &["test_batch.bin"],
            (CifarVariant::Cifar100, FileSplit::Train) => &["train.bin"],
            (CifarVariant::Cifar100, FileSplit::Test) => &["test.bin"],
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = SenaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(CifarVariant::Cifar10),
            "cifar100" | "cifar-100" => Ok(CifarVariant::Cifar100),
            other => Err(SenaError::InvalidArgument(format!("unknown CIFAR variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileSplit {
    Train,
    Test,
}

/// Parses one CIFAR binary file. CIFAR-100 records carry a coarse and a fine
/// label byte; the fine (100-class) label is used.
pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant, name: &str) -> Result<Dataset> {
    let record = variant.record_bytes();
    if bytes.is_empty() || bytes.len() % record != 0 {
        let offset = (bytes.len() / record * record) as u64;
        return Err(SenaError::format(
            offset,
            format!(
                "{} bytes is not a whole number of {record}-byte {:?} records",
                bytes.len(),
                variant
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    let n_classes = variant.n_classes();
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= n_classes {
            return Err(SenaError::format(
                (i * record) as u64,
                format!("label {label} out of range for {n_classes} classes"),
            ));
        }
        labels.push(label);
        push_pixels(&rec[variant.label_bytes()..], &mut data);
    }
    let images = Tensor::from_vec(&[n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
    Dataset::new(name, images, labels, n_classes)
}

/// Loads a single CIFAR binary file.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_cifar_bytes(&bytes, variant, &name)
}

/// Loads a whole split from an extracted CIFAR binary directory
/// (`cifar-10-batches-bin/` or `cifar-100-binary/`).
pub fn load_cifar_split(dir: &Path, variant: CifarVariant, split: FileSplit) -> Result<Dataset> {
    let mut parts = Vec::new();
    for file in variant.split_files(split) {
        let path = dir.join(file);
        if !path.exists() {
            return Err(SenaError::NotFound(format!("{}", path.display())));
        }
        parts.push(load_cifar_binary(&path, variant)?);
    }
    let name = format!("{variant:?}-{split:?}").to_lowercase();
    concat(&parts, &name)
}

fn concat(parts: &[Dataset], name: &str) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| SenaError::InvalidArgument("nothing to concatenate".into()))?;
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * first.image_len());
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(first.image_shape());
    Dataset::new(name, Tensor::from_vec(&shape, data)?, labels, first.n_classes)
}

/// Parses an `IMGS1` container:
///
/// ```text
/// magic   5 bytes  "IMGS1"
/// count   u32 LE   number of records N
/// classes u32 LE   number of classes (> 0)
/// N x { label u16 LE, 3072 pixel bytes: R plane, G plane, B plane, each 32x32 row-major }
/// ```
pub fn parse_raw_images(bytes: &[u8], name: &str) -> Result<Dataset> {
    const HEADER: usize = 13;
    const RECORD: usize = 2 + IMAGE_BYTES;
    if bytes.len() < HEADER {
        return Err(SenaError::format(bytes.len() as u64, "truncated IMGS1 header"));
    }
    if &bytes[..5] != IMGS_MAGIC {
        return Err(SenaError::format(0, "bad magic, expected \"IMGS1\""));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let n_classes = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if n_classes == 0 {
        return Err(SenaError::format(9, "class count must be positive"));
    }
    if n == 0 {
        return Err(SenaError::format(5, "record count must be positive"));
    }
    let expected = HEADER + n * RECORD;
    if bytes.len() != expected {
        return Err(SenaError::format(
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {n} records, found {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes[HEADER..].chunks_exact(RECORD).enumerate() {
        let label = u16::from_le_bytes([rec[0], rec[1]]) as usize;
        if label >= n_classes {
            return Err(SenaError::format(
                (HEADER + i * RECORD) as u64,
                format!("label {label} out of range for {n_classes} classes"),
            ));
        }
        labels.push(label);
        push_pixels(&rec[2..], &mut data);
    }
    let images = Tensor::from_vec(&[n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
    Dataset::new(name, images, labels, n_classes)
}

pub fn load_raw_images(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_raw_images(&bytes, &name)
}

/// Serializes a dataset as `IMGS1`, quantizing pixels to `round(255 x)`.
pub fn encode_raw_images(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE] {
        return Err(SenaError::Shape(format!(
            "IMGS1 stores 3x32x32 images, got {:?}",
            ds.image_shape()
        )));
    }
    if ds.n_classes > u16::MAX as usize + 1 {
        return Err(SenaError::InvalidArgument("too many classes for u16 labels".into()));
    }
    let mut out = Vec::with_capacity(13 + ds.len() * (2 + IMAGE_BYTES));
    out.extend_from_slice(IMGS_MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes as u32).to_le_bytes());
    for (img, &label) in ds.images.data().chunks_exact(IMAGE_BYTES).zip(&ds.labels) {
        out.extend_from_slice(&(label as u16).to_le_bytes());
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_raw_images(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode_raw_images(ds)?;
    let mut f = fs::File::create(path).map_err(|e| SenaError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| SenaError::io(path, e))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub validation_fraction: f64,
    /// Fraction held out for testing; `0` when the source ships its own test set.
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed: 0,
            validation_fraction: 0.1,
            test_fraction: 0.0,
        }
    }
}

impl SplitSpec {
    /// 80/10/10 train/validation/test, as used for synthetic tasks.
    pub fn synthetic(seed: u64) -> Self {
        SplitSpec {
            seed,
            validation_fraction: 0.1,
            test_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.validation_fraction;
        let t = self.test_fraction;
        if !(v > 0.0 && v < 1.0) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(SenaError::InvalidArgument(format!(
                "split fractions validation={v} test={t} must lie in (0,1) with a positive train remainder"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation of `0..n` cut into test, validation and train parts
/// (sizes rounded to nearest, each non-empty part keeps at least one sample).
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n_test = if spec.test_fraction > 0.0 {
        ((n as f64 * spec.test_fraction).round() as usize).max(1)
    } else {
        0
    };
    let n_val = ((n as f64 * spec.validation_fraction).round() as usize).max(1);
    if n_test + n_val >= n {
        return Err(SenaError::InvalidArgument(format!(
            "{n} samples cannot be split into {n_val} validation and {n_test} test with training left"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    Rng::with_stream(spec.seed, streams::SPLIT).shuffle(&mut perm);
    let test = perm[..n_test].to_vec();
    let validation = perm[n_test..n_test + n_val].to_vec();
    let train = perm[n_test + n_val..].to_vec();
    Ok(SplitIndices {
        train,
        validation,
        test,
    })
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let idx = split_indices(ds.len(), spec)?;
    Ok(Splits {
        train: ds.subset(&idx.train, format!("{}-train", ds.name))?,
        validation: ds.subset(&idx.validation, format!("{}-val", ds.name))?,
        test: if idx.test.is_empty() {
            None
        } else {
            Some(ds.subset(&idx.test, format!("{}-test", ds.name))?)
        },
    })
}

/// Rng stream ids so that independent consumers of one seed never overlap.
pub(crate) mod streams {
    pub const SPLIT: u64 = 1;
    pub const SYNTH: u64 = 2;
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

/// Shape families shared by every task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    HorizontalStripes,
    VerticalStripes,
}

const PATTERNS: [Pattern; 2] = [Pattern::HorizontalStripes, Pattern::VerticalStripes];

/// Half-width of the jitter inside a band, as a fraction of the band width.
const BAND_JITTER: f32 = 0.15;

/// Unshifted frequency bands tile this range, in cycles per image.
const FREQ_RANGE: (f32, f32) = (2.0, 7.0);

/// Image attribute that carries the second half of the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LabelAxis {
    /// Color band; frequency is drawn from the full range.
    Hue,
    /// Frequency band; hue is drawn uniformly.
    Frequency,
}

/// Parameter regime of one synthetic task.
#[derive(Clone, Copy, Debug)]
struct TaskRegime {
    axis: LabelAxis,
    /// Band shift as a fraction of the band width.
    shift: f32,
}

// Even tasks label by hue, odd tasks by frequency, so consecutive tasks see
// the same kind of images but need different features. Tasks on the same
// axis shift their bands by a third of a band, which keeps the first three
// of each kind apart since the jitter stays below a sixth.
fn regime(task: usize) -> TaskRegime {
    TaskRegime {
        axis: if task % 2 == 0 { LabelAxis::Hue } else { LabelAxis::Frequency },
        shift: ((task / 2) % 3) as f32 / 3.0,
    }
}

fn band_value(band: usize, shift: f32, n_bands: usize, lo: f32, hi: f32, rng: &mut Rng) -> f32 {
    let t = band as f32 + 0.5 + shift + rng.uniform_scalar(-BAND_JITTER, BAND_JITTER);
    lo + (hi - lo) * t / n_bands as f32
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Noise amplitude added to every pixel before clamping to `[0,1]`.
pub const SYNTH_NOISE: f32 = 0.15;

fn render(regime: TaskRegime, class: usize, n_bands: usize, rng: &mut Rng, out: &mut Vec<f32>) {
    use std::f32::consts::TAU;
    let pattern = PATTERNS[class % PATTERNS.len()];
    let band = class / PATTERNS.len();
    let (hue, freq) = match regime.axis {
        LabelAxis::Hue => (
            band_value(band, regime.shift, n_bands, 0.0, 1.0, rng),
            rng.uniform_scalar(FREQ_RANGE.0, FREQ_RANGE.1),
        ),
        LabelAxis::Frequency => (
            rng.uniform_scalar(0.0, 1.0),
            band_value(band, regime.shift, n_bands, FREQ_RANGE.0, FREQ_RANGE.1, rng),
        ),
    };
    let fg = hsv_to_rgb(hue, rng.uniform_scalar(0.6, 1.0), rng.uniform_scalar(0.7, 1.0));
    let bg = rng.uniform_scalar(0.0, 0.25);
    let phase = rng.uniform_scalar(0.0, TAU);
    let w = TAU * freq / IMAGE_SIDE as f32;
    let start = out.len();
    out.resize(start + IMAGE_BYTES, 0.0);
    let img = &mut out[start..];
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let (xf, yf) = (x as f32, y as f32);
            let s = match pattern {
                Pattern::HorizontalStripes => (w * yf + phase).sin(),
                Pattern::VerticalStripes => (w * xf + phase).sin(),
            };
            let intensity = 0.5 + 0.5 * s;
            for ch in 0..IMAGE_CHANNELS {
                let noise = rng.uniform_scalar(-SYNTH_NOISE, SYNTH_NOISE);
                let v = bg + intensity * fg[ch] * (1.0 - bg) + noise;
                img[ch * plane + y * IMAGE_SIDE + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn check_synthetic_args(n_classes: usize, per_class: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(SenaError::InvalidArgument(format!(
            "synthetic tasks need at least 2 classes, got {n_classes}"
        )));
    }
    if per_class < 2 {
        return Err(SenaError::InvalidArgument(format!(
            "synthetic tasks need at least 2 samples per class, got {per_class}"
        )));
    }
    Ok(())
}

/// Renders synthetic task number `task` for `seed`.
///
/// Class `c` combines a stripe orientation (`c % 2`) with a band index
/// (`c / 2`) under random phase, saturation, brightness and pixel noise. Even
/// tasks band the hue and odd tasks band the stripe frequency, leaving the
/// other attribute random, so all tasks draw from overlapping image
/// distributions. Tasks on the same attribute shift their bands by a third of
/// a band width, so the first three of each kind occupy disjoint ranges.
/// Samples are class-balanced and ordered by class.
pub fn make_synthetic_task(seed: u64, task: usize, n_classes: usize, per_class: usize) -> Result<Dataset> {
    check_synthetic_args(n_classes, per_class)?;
    let n_bands = n_classes.div_ceil(PATTERNS.len());
    let regime = regime(task);
    let mut rng = Rng::with_stream(
        seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        streams::SYNTH,
    );
    let n = n_classes * per_class;
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for class in 0..n_classes {
        for _ in 0..per_class {
            render(regime, class, n_bands, &mut rng, &mut data);
            labels.push(class);
        }
    }
    let images = Tensor::from_vec(&[n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
    Dataset::new(format!("synth{task}"), images, labels, n_classes)
}

/// Tasks `0..n_tasks` of [`make_synthetic_task`].
pub fn make_synthetic_tasks(seed: u64, n_tasks: usize, n_classes: usize, per_class: usize) -> Result<Vec<Dataset>> {
    check_synthetic_args(n_classes, per_class)?;
    if n_tasks == 0 {
        return Err(SenaError::InvalidArgument("n_tasks must be positive".into()));
    }
    (0..n_tasks)
        .map(|task| make_synthetic_task(seed, task, n_classes, per_class))
        .collect()
}

/// Train/validation/test triple for one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn n_classes(&self) -> usize {
        self.train.n_classes()
    }

    /// Splits a single pool 80/10/10 (or per `spec`); requires a test fraction.
    pub fn from_pool(pool: &Dataset, spec: &SplitSpec) -> Result<Self> {
        let s = split(pool, spec)?;
        let test = s.test.ok_or_else(|| {
            SenaError::InvalidArgument("pool split needs a positive test fraction".into())
        })?;
        Ok(TaskData {
            name: pool.name().to_string(),
            train: s.train,
            validation: s.validation,
            test,
        })
    }

    /// Carves validation out of a shipped train set and keeps the shipped test set.
    pub fn from_train_test(name: &str, train: &Dataset, test: Dataset, spec: &SplitSpec) -> Result<Self> {
        let spec = SplitSpec {
            test_fraction: 0.0,
            ..*spec
        };
        let s = split(train, &spec)?;
        if test.n_classes() != train.n_classes() {
            return Err(SenaError::InvalidArgument(format!(
                "train has {} classes, test has {}",
                train.n_classes(),
                test.n_classes()
            )));
        }
        Ok(TaskData {
            name: name.to_string(),
            train: s.train,
            validation: s.validation,
            test,
        })
    }
}
