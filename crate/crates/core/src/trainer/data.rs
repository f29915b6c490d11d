//! Labelled image sets, the synthetic easy/hard mixture and the on-disk
//! dataset layout.
//!
//! A dataset directory holds `images.bin` and `labels.csv`. The binary file
//! is the magic `MSDD`, a little-endian `u32` version (1), four `u64`
//! dimensions `N C H W`, then `N·C·H·W` little-endian `f64` values in
//! row-major order. `labels.csv` has the columns `index,label,split,hard`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.csv";
const MAGIC: &[u8; 4] = b"MSDD";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Whether each sample was generated as a hard example (false for
    /// loaded real data).
    pub hard: Vec<bool>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, splits: Vec<Split>, hard: Vec<bool>, num_classes: usize) -> Result<Self> {
        let n = images.dims4()?[0];
        if labels.len() != n || splits.len() != n || hard.len() != n {
            return Err(input_err(format!("{n} images but {} labels / {} split tags", labels.len(), splits.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(input_err(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { images, labels, splits, hard, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// The samples of one split, in their original order. Errors when the
    /// split is empty.
    pub fn subset(&self, split: Split) -> Result<Dataset> {
        self.select(&self.indices(split))
    }

    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(input_err("cannot select an empty set of samples"));
        }
        Ok(Dataset {
            images: self.images.select_batch(rows)?,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            splits: rows.iter().map(|&i| self.splits[i]).collect(),
            hard: rows.iter().map(|&i| self.hard[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Tags the first `train` samples as training, the next `val` as
    /// validation and the rest as test.
    pub fn assign_splits(&mut self, train: usize, val: usize) -> Result<()> {
        if train + val > self.len() {
            return Err(input_err(format!("{train} + {val} split samples exceed {}", self.len())));
        }
        for (i, s) in self.splits.iter_mut().enumerate() {
            *s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(File::create(dir.join(IMAGES_FILE))?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for d in self.images.dims4()? {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.images.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;

        let mut w = csv::Writer::from_path(dir.join(LABELS_FILE))?;
        w.write_record(["index", "label", "split", "hard"])?;
        for i in 0..self.len() {
            let split = match self.splits[i] {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            w.write_record([i.to_string(), self.labels[i].to_string(), split.into(), u8::from(self.hard[i]).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let path = dir.join(IMAGES_FILE);
        let bad = |reason: &str| Error::Format { path: path.clone(), reason: reason.into() };
        let mut input = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a dataset file"));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let mut dims = [0usize; 4];
        let mut b8 = [0u8; 8];
        for d in &mut dims {
            input.read_exact(&mut b8)?;
            *d = u64::from_le_bytes(b8) as usize;
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut b8).map_err(|_| bad("truncated image data"))?;
            data.push(f64::from_le_bytes(b8));
        }
        if input.read(&mut b8)? != 0 {
            return Err(bad("trailing bytes after image data"));
        }
        let images = Tensor::new(dims.to_vec(), data)?;

        #[derive(Deserialize)]
        struct Row {
            index: usize,
            label: usize,
            split: Split,
            hard: u8,
        }
        let (mut labels, mut splits, mut hard) = (Vec::new(), Vec::new(), Vec::new());
        for row in csv::Reader::from_path(dir.join(LABELS_FILE))?.deserialize() {
            let row: Row = row?;
            if row.index != labels.len() {
                return Err(Error::Format { path: dir.join(LABELS_FILE), reason: format!("row {} out of order", row.index) });
            }
            labels.push(row.label);
            splits.push(row.split);
            hard.push(row.hard != 0);
        }
        Dataset::new(images, labels, splits, hard, num_classes)
    }
}

/// Parameters of the synthetic two-class mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { train: 2000, val: 500, test: 500, size: 16, hard_fraction: 0.4, seed: 0 }
    }
}

impl MixtureConfig {
    pub fn generate(&self) -> Result<Dataset> {
        let mut d = generate_mixture_dataset(self.train + self.val + self.test, self.size, self.hard_fraction, self.seed)?;
        d.assign_splits(self.train, self.val)?;
        Ok(d)
    }
}

const NOISE: f64 = 0.5;
const EASY_AMPLITUDE: f64 = 1.0;
const DISTRACTOR_AMPLITUDE: f64 = 0.8;
const STRIPE_AMPLITUDE: f64 = 0.9;
const PATCH: usize = 4;

/// Single-channel two-class images.
///
/// Easy samples carry a bright Gaussian blob in the left (class 0) or right
/// (class 1) half, visible at any resolution. Hard samples carry a weaker
/// blob and a small striped patch at a random position. The label of a hard
/// sample is the XOR of the blob side and the stripe orientation (0 for
/// horizontal, 1 for vertical), so neither cue alone predicts it. Labels are
/// balanced; hard samples are spread evenly through the index order. All
/// samples are tagged as training data.
pub fn generate_mixture_dataset(n: usize, size: usize, hard_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&hard_fraction) {
        return Err(input_err(format!("hard_fraction must lie in [0, 1], got {hard_fraction}")));
    }
    if size < 8 {
        return Err(input_err(format!("mixture images need size >= 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE).expect("valid normal");
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let hard: Vec<bool> = (0..n)
        .map(|i| ((i + 1) as f64 * hard_fraction).floor() > (i as f64 * hard_fraction).floor())
        .collect();

    let s = size;
    let sigma = s as f64 / 6.0;
    let mut data = Vec::with_capacity(n * s * s);
    for i in 0..n {
        let mut img: Vec<f64> = (0..s * s).map(|_| noise.sample(&mut rng)).collect();
        let orient: usize = rng.random_range(0..2);
        let side = if hard[i] { labels[i] ^ orient } else { labels[i] };
        let amp = if hard[i] { DISTRACTOR_AMPLITUDE } else { EASY_AMPLITUDE };
        let cx = if side == 0 { s as f64 / 4.0 } else { 3.0 * s as f64 / 4.0 } + rng.random_range(-1.0..1.0);
        let cy = rng.random_range(s as f64 / 4.0..3.0 * s as f64 / 4.0);
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                img[y * s + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        if hard[i] {
            let top = rng.random_range(0..=s - PATCH);
            let left = rng.random_range(0..=s - PATCH);
            for y in 0..PATCH {
                for x in 0..PATCH {
                    let phase = if orient == 0 { y } else { x };
                    let v = if phase % 2 == 0 { STRIPE_AMPLITUDE } else { -STRIPE_AMPLITUDE };
                    img[(top + y) * s + left + x] += v;
                }
            }
        }
        data.extend(img);
    }
    let images = Tensor::new(vec![n, 1, s, s], data)?;
    Dataset::new(images, labels, vec![Split::Train; n], hard, 2)
}
