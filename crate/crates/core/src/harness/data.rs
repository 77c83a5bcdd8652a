//! Datasets: seeded Gaussian blobs, IDX files and procedurally drawn digit
//! glyphs (an offline stand-in for MNIST-class data).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored row-major, one sample of `sample_shape` per label.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        data: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per * labels.len() != data.len() {
            return Err(Error::Length(format!(
                "{} values for {} samples of shape {sample_shape:?}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        Ok(Dataset {
            sample_shape,
            data,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers the given samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Reshapes flat samples, e.g. `[784]` to `[1, 28, 28]`.
    pub fn with_sample_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::Dimension {
                op: "dataset sample shape",
                lhs: self.sample_shape,
                rhs: shape,
            });
        }
        self.sample_shape = shape;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

fn default_radius() -> f64 {
    3.0
}

fn default_train_images() -> String {
    "train-images-idx3-ubyte".into()
}
fn default_train_labels() -> String {
    "train-labels-idx1-ubyte".into()
}
fn default_test_images() -> String {
    "t10k-images-idx3-ubyte".into()
}
fn default_test_labels() -> String {
    "t10k-labels-idx1-ubyte".into()
}

fn default_glyph_noise() -> f32 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Gaussian blobs, split 80/20 by index.
    Synthetic {
        classes: usize,
        dims: usize,
        per_class: usize,
        #[serde(default = "default_radius")]
        radius: f64,
    },
    /// A directory of IDX files (MNIST naming by default).
    Idx {
        dir: PathBuf,
        #[serde(default = "default_train_images")]
        train_images: String,
        #[serde(default = "default_train_labels")]
        train_labels: String,
        #[serde(default = "default_test_images")]
        test_images: String,
        #[serde(default = "default_test_labels")]
        test_labels: String,
    },
    /// Ten seven-segment digit classes drawn with jitter and pixel noise.
    Glyphs {
        size: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_glyph_noise")]
        noise: f32,
    },
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::Synthetic {
                classes,
                dims,
                per_class,
                radius,
            } => {
                if *classes < 2 {
                    return Err(Error::config("data.classes", "need at least 2 classes"));
                }
                if *dims == 0 {
                    return Err(Error::config("data.dims", "must be positive"));
                }
                if *per_class < 5 {
                    return Err(Error::config(
                        "data.per_class",
                        "need at least 5 samples per class",
                    ));
                }
                if !(radius.is_finite() && *radius >= 0.0) {
                    return Err(Error::config(
                        "data.radius",
                        "must be finite and non-negative",
                    ));
                }
            }
            DataSpec::Idx { .. } => {}
            DataSpec::Glyphs {
                size,
                train_per_class,
                test_per_class,
                noise,
            } => {
                if *size < 7 {
                    return Err(Error::config("data.size", "glyphs need at least 7 pixels"));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config(
                        "data.train_per_class",
                        "split sizes must be positive",
                    ));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(Error::config(
                        "data.noise",
                        "must be finite and non-negative",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates the split; synthetic kinds draw from the
    /// synthetic-data stream of `seed`.
    pub fn load(&self, seed: u64) -> Result<DataSplit> {
        self.validate()?;
        match self {
            DataSpec::Synthetic {
                classes,
                dims,
                per_class,
                radius,
            } => Ok(synth_dataset(*classes, *dims, *per_class, *radius, seed)),
            DataSpec::Idx {
                dir,
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok(DataSplit {
                train: load_idx(&dir.join(train_images), &dir.join(train_labels))?,
                test: load_idx(&dir.join(test_images), &dir.join(test_labels))?,
            }),
            DataSpec::Glyphs {
                size,
                train_per_class,
                test_per_class,
                noise,
            } => {
                let mut rng = stream_rng(seed, Stream::SyntheticData);
                let train = glyph_digits(*size, *train_per_class, *noise, &mut rng);
                let test = glyph_digits(*size, *test_per_class, *noise, &mut rng);
                Ok(DataSplit { train, test })
            }
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("{what}: truncated header")))
}

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let what = path.display().to_string();
    let found = read_u32(&bytes, 0, &what)?;
    if found != magic {
        return Err(Error::Idx(format!(
            "{what}: bad magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(&bytes, 4 + 4 * i, &what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(Error::Idx(format!(
            "{what}: truncated payload, {} of {len} bytes",
            payload.len()
        )));
    }
    Ok((dims, payload[..len].to_vec()))
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the class
/// count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images, IDX_IMAGES_MAGIC)?;
    let (ldims, raw_labels) = read_idx(labels, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(vec![1, idims[1], idims[2]], data, labels, classes)
}

fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend(magic.to_be_bytes());
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(payload);
    fs::write(path, out)?;
    Ok(())
}

/// Writes `count` images of `rows x cols` bytes.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::Length(format!(
            "{} pixels do not tile {rows}x{cols} images",
            pixels.len()
        )));
    }
    write_idx(
        path,
        IDX_IMAGES_MAGIC,
        &[pixels.len() / per, rows, cols],
        pixels,
    )
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_idx(path, IDX_LABELS_MAGIC, &[labels.len()], labels)
}

/// Writes a dataset of single-channel square images as an IDX pair.
/// Pixels are rounded to bytes.
pub fn write_idx_dataset(d: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (rows, cols) = match d.sample_shape.as_slice() {
        [1, r, c] | [r, c] => (*r, *c),
        other => {
            return Err(Error::Shape(format!(
                "IDX export needs 2-D single-channel samples, got {other:?}"
            )))
        }
    };
    let pixels: Vec<u8> = d
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels_u8 = d
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Idx(format!("label {l} exceeds a byte"))))
        .collect::<Result<Vec<_>>>()?;
    write_idx_images(images, rows, cols, &pixels)?;
    write_idx_labels(labels, &labels_u8)
}

fn random_unit<R: Rng>(dims: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `classes` unit-variance Gaussian blobs whose means lie on a sphere of
/// `radius`. Means are picked greedily, each the farthest of a pool of
/// random directions from those already chosen. Samples are interleaved by
/// class; every fifth index goes to the test split.
pub fn synth_dataset(
    classes: usize,
    dims: usize,
    per_class: usize,
    radius: f64,
    seed: u64,
) -> DataSplit {
    let mut rng = stream_rng(seed, Stream::SyntheticData);
    let pool: Vec<Vec<f64>> = (0..classes * 16)
        .map(|_| random_unit(dims, &mut rng))
        .collect();
    let mut means: Vec<Vec<f64>> = vec![pool[0].clone()];
    while means.len() < classes {
        let best = pool
            .iter()
            .max_by(|a, b| {
                let d = |p: &Vec<f64>| {
                    means
                        .iter()
                        .map(|m| m.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                };
                d(a).total_cmp(&d(b))
            })
            .expect("non-empty pool");
        means.push(best.clone());
    }
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for i in 0..classes * per_class {
        let class = i % classes;
        let dest = if i % 5 == 4 { &mut test } else { &mut train };
        for m in &means[class] {
            let z: f64 = StandardNormal.sample(&mut rng);
            dest.0.push((radius * m + z) as f32);
        }
        dest.1.push(class);
    }
    DataSplit {
        train: Dataset::new(vec![dims], train.0, train.1, classes).expect("consistent"),
        test: Dataset::new(vec![dims], test.0, test.1, classes).expect("consistent"),
    }
}

// Segments: top, upper-left, upper-right, middle, lower-left, lower-right, bottom.
const DIGIT_SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, false, true, true, true],
    [false, false, true, false, false, true, false],
    [true, false, true, true, true, false, true],
    [true, false, true, true, false, true, true],
    [false, true, true, true, false, true, false],
    [true, true, false, true, false, true, true],
    [true, true, false, true, true, true, true],
    [true, false, true, false, false, true, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn draw_segment(
    img: &mut [f32],
    size: usize,
    (r0, c0): (f64, f64),
    (r1, c1): (f64, f64),
    width: f64,
) {
    for r in 0..size {
        for c in 0..size {
            let (pr, pc) = (r as f64, c as f64);
            let (dr, dc) = (r1 - r0, c1 - c0);
            let len2 = dr * dr + dc * dc;
            let t = (((pr - r0) * dr + (pc - c0) * dc) / len2).clamp(0.0, 1.0);
            let (qr, qc) = (r0 + t * dr, c0 + t * dc);
            let d = ((pr - qr).powi(2) + (pc - qc).powi(2)).sqrt();
            let v = (1.0 - (d - width / 2.0).max(0.0)).clamp(0.0, 1.0) as f32;
            let px = &mut img[r * size + c];
            *px = px.max(v);
        }
    }
}

/// `per_class` jittered, noisy seven-segment renderings of each digit as
/// `[1, size, size]` samples with byte-valued pixels, shuffled.
pub fn glyph_digits<R: Rng>(size: usize, per_class: usize, noise: f32, rng: &mut R) -> Dataset {
    let s = size as f64;
    let mut samples: Vec<(Vec<f32>, usize)> = Vec::with_capacity(10 * per_class);
    for digit in 0..10 {
        for _ in 0..per_class {
            let mut img = vec![0.0f32; size * size];
            let jitter = |rng: &mut R| rng.gen_range(-0.06..0.06) * s;
            let (top, bottom) = (0.15 * s + jitter(rng), 0.85 * s + jitter(rng));
            let (left, right) = (0.25 * s + jitter(rng), 0.75 * s + jitter(rng));
            let mid = 0.5 * (top + bottom) + jitter(rng) * 0.5;
            let slant = rng.gen_range(-0.1..0.1);
            let at = |row: f64, col: f64| (row, col + slant * (0.5 * s - row));
            let segs = [
                (at(top, left), at(top, right)),
                (at(top, left), at(mid, left)),
                (at(top, right), at(mid, right)),
                (at(mid, left), at(mid, right)),
                (at(mid, left), at(bottom, left)),
                (at(mid, right), at(bottom, right)),
                (at(bottom, left), at(bottom, right)),
            ];
            let width = rng.gen_range(0.08..0.14) * s;
            for (on, (a, b)) in DIGIT_SEGMENTS[digit].iter().zip(segs) {
                if *on {
                    draw_segment(&mut img, size, a, b, width);
                }
            }
            for px in img.iter_mut() {
                let z: f32 = StandardNormal.sample(rng);
                let v = (*px + noise * z).clamp(0.0, 1.0);
                *px = (v * 255.0).round() / 255.0;
            }
            samples.push((img, digit));
        }
    }
    samples.shuffle(rng);
    let mut data = Vec::with_capacity(samples.len() * size * size);
    let mut labels = Vec::with_capacity(samples.len());
    for (img, l) in samples {
        data.extend(img);
        labels.push(l);
    }
    Dataset::new(vec![1, size, size], data, labels, 10).expect("consistent")
}
