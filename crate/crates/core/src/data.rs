//! MNIST ingestion and the three sequential views of it.
//!
//! * `r-mnist`: 28 steps, one image row (28 pixels) per step.
//! * `p-mnist`: 784 steps, one pixel per step in row-major order.
//! * `pp-mnist`: as `p-mnist` with a fixed permutation of pixel positions.
//!
//! Pixels are scaled to `[0, 1]` by dividing by 255. Sequences are built per
//! batch from the byte store, never materialised for the whole set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;
pub const CLASSES: usize = 10;

/// Decoded images and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet {
    rows: usize,
    cols: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl MnistSet {
    pub fn from_parts(rows: usize, cols: usize, images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if rows * cols == 0 || images.len() != labels.len() * rows * cols {
            return Err(Error::Data(format!(
                "{} pixel bytes do not hold {} images of {rows}x{cols}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= CLASSES) {
            return Err(Error::Data(format!("label {bad} outside 0..{CLASSES}")));
        }
        Ok(Self { rows, cols, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_rows(&self) -> usize {
        self.rows
    }

    pub fn image_cols(&self) -> usize {
        self.cols
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Copy of images `range` in file order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> MnistSet {
        let n = self.pixels_per_image();
        MnistSet {
            rows: self.rows,
            cols: self.cols,
            images: self.images[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// The first `count` images (or all of them).
    pub fn take(&self, count: usize) -> MnistSet {
        self.slice(0..count.min(self.len()))
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

/// Parses an IDX3 image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!("images: bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Data(format!(
            "images: payload is {} bytes, header promises {count}x{rows}x{cols} = {need}",
            payload.len()
        )));
    }
    Ok((count, rows, cols, payload.to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!("labels: bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Data(format!("labels: payload is {} bytes, header promises {count}", payload.len())));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<MnistSet> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    let (count, rows, cols, pixels) = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if labels.len() != count {
        return Err(Error::Data(format!("{count} images but {} labels", labels.len())));
    }
    MnistSet::from_parts(rows, cols, pixels, labels)
}

/// Conventional file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path, train: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetVariant {
    #[serde(rename = "r-mnist")]
    RowMnist,
    #[serde(rename = "p-mnist")]
    PixelMnist,
    #[serde(rename = "pp-mnist")]
    PermutedPixelMnist,
}

impl DatasetVariant {
    pub fn name(self) -> &'static str {
        match self {
            DatasetVariant::RowMnist => "r-mnist",
            DatasetVariant::PixelMnist => "p-mnist",
            DatasetVariant::PermutedPixelMnist => "pp-mnist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "r-mnist" => Some(DatasetVariant::RowMnist),
            "p-mnist" => Some(DatasetVariant::PixelMnist),
            "pp-mnist" => Some(DatasetVariant::PermutedPixelMnist),
            _ => None,
        }
    }

    /// `(steps, features)` for `rows x cols` images.
    pub fn layout(self, rows: usize, cols: usize) -> (usize, usize) {
        match self {
            DatasetVariant::RowMnist => (rows, cols),
            _ => (rows * cols, 1),
        }
    }
}

/// Fixed pixel order for `pp-mnist`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSpec {
    seed: u64,
    order: Vec<usize>,
}

impl PermutationSpec {
    /// Seeded Fisher–Yates shuffle of `0..len`.
    pub fn from_seed(seed: u64, len: usize) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        Rng::new(seed).shuffle(&mut order);
        Self { seed, order }
    }

    pub fn identity(len: usize) -> Self {
        Self { seed: 0, order: (0..len).collect() }
    }

    pub fn from_order(seed: u64, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Parameter("permutation order is not a bijection".into()));
            }
        }
        Ok(Self { seed, order })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

/// A mini-batch of sequences, time-major: `inputs[(t·batch + b)·features + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub steps: usize,
    pub batch: usize,
    pub features: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl SequenceBatch {
    pub fn from_parts(steps: usize, batch: usize, features: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != steps * batch * features || labels.len() != batch {
            return Err(Error::Shape(format!(
                "{} inputs / {} labels for {steps} steps x {batch} batch x {features} features",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { steps, batch, features, inputs, labels })
    }

    /// `batch x features` block of step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        let n = self.batch * self.features;
        &self.inputs[t * n..(t + 1) * n]
    }
}

/// Lazily materialised sequences over an [`MnistSet`].
#[derive(Debug, Clone, Copy)]
pub struct SequenceView<'a> {
    set: &'a MnistSet,
    variant: DatasetVariant,
    perm: Option<&'a PermutationSpec>,
}

pub fn make_sequences<'a>(
    set: &'a MnistSet,
    variant: DatasetVariant,
    perm: Option<&'a PermutationSpec>,
) -> Result<SequenceView<'a>> {
    let perm = match variant {
        DatasetVariant::PermutedPixelMnist => {
            let p = perm.ok_or_else(|| Error::Parameter("pp-mnist needs a pixel permutation".into()))?;
            if p.order().len() != set.pixels_per_image() {
                return Err(Error::Parameter(format!(
                    "permutation of {} positions for {}-pixel images",
                    p.order().len(),
                    set.pixels_per_image()
                )));
            }
            Some(p)
        }
        _ => None,
    };
    Ok(SequenceView { set, variant, perm })
}

impl<'a> SequenceView<'a> {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn variant(&self) -> DatasetVariant {
        self.variant
    }

    pub fn steps(&self) -> usize {
        self.variant.layout(self.set.rows, self.set.cols).0
    }

    pub fn features(&self) -> usize {
        self.variant.layout(self.set.rows, self.set.cols).1
    }

    /// Sequence `i` flattened as `steps x features`.
    pub fn sequence(&self, i: usize) -> Vec<f64> {
        let img = self.set.image(i);
        match self.perm {
            // Row-major flattening is the image layout itself, so rows and
            // pixels differ only in how the steps are cut.
            None => img.iter().map(|p| *p as f64 / 255.0).collect(),
            Some(p) => p.order().iter().map(|&k| img[k] as f64 / 255.0).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> SequenceBatch {
        let (steps, features) = (self.steps(), self.features());
        let b = indices.len();
        let mut inputs = vec![0.0; steps * b * features];
        for (slot, &i) in indices.iter().enumerate() {
            let seq = self.sequence(i);
            for t in 0..steps {
                let dst = (t * b + slot) * features;
                inputs[dst..dst + features].copy_from_slice(&seq[t * features..(t + 1) * features]);
            }
        }
        let labels = indices.iter().map(|&i| self.set.label(i) as usize).collect();
        SequenceBatch { steps, batch: b, features, inputs, labels }
    }
}

/// Validation is the last `val_count` images in file order; no shuffling.
pub fn split_train_val(set: &MnistSet, val_count: usize) -> Result<(MnistSet, MnistSet)> {
    if val_count >= set.len() {
        return Err(Error::Parameter(format!(
            "validation size {val_count} leaves no training data out of {}",
            set.len()
        )));
    }
    let cut = set.len() - val_count;
    Ok((set.slice(0..cut), set.slice(cut..set.len())))
}

/// Index batches over a training set, reshuffled every epoch.
///
/// Epoch `k` uses stream `k` of the generator, so any epoch can be replayed
/// on its own. A final partial batch is kept when it has at least two
/// elements (the batch-norm minimum) and dropped otherwise.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    rng: Rng,
    epoch: usize,
    batches: Vec<Vec<usize>>,
    cursor: usize,
}

pub fn batch_iterator(len: usize, batch_size: usize, rng: &Rng) -> Result<BatchIterator> {
    if batch_size < 2 {
        return Err(Error::Parameter(format!("batch size must be at least 2, got {batch_size}")));
    }
    if len < 2 {
        return Err(Error::Parameter(format!("need at least 2 training sequences, got {len}")));
    }
    let mut it = BatchIterator { len, batch_size, rng: rng.clone(), epoch: 0, batches: Vec::new(), cursor: 0 };
    it.batches = it.plan(0);
    Ok(it)
}

impl BatchIterator {
    /// Batches of epoch `epoch`, in order.
    pub fn plan(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        self.rng.split(epoch as u64).shuffle(&mut order);
        order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Epoch of the batch most recently returned by `next`.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.len()
    }

    /// Repositions the iterator at the start of `epoch`.
    pub fn restart(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.batches = self.plan(epoch);
        self.cursor = 0;
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor == self.batches.len() {
            let next = self.epoch + 1;
            self.restart(next);
        }
        self.cursor += 1;
        Some(self.batches[self.cursor - 1].clone())
    }
}
