//! Labeled image datasets: IDX files and a procedural generator.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DataConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let all: Vec<usize> = (0..self.len()).collect();
        (self.subset(&all[..n]), self.subset(&all[n..]))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Raw contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    /// Element type code from the magic number (0x08 = unsigned byte).
    pub type_code: u8,
}

fn elem_size(code: u8) -> Option<usize> {
    match code {
        0x08 | 0x09 => Some(1),
        0x0B => Some(2),
        0x0C | 0x0D => Some(4),
        0x0E => Some(8),
        _ => None,
    }
}

/// Parses an IDX buffer: two zero bytes, a type code, the dimension count,
/// big-endian `u32` extents, then big-endian elements.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Idx("file shorter than the 4-byte magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Idx(format!(
            "bad magic number {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let code = bytes[2];
    let size = elem_size(code).ok_or_else(|| Error::Idx(format!("unknown element type 0x{code:02x}")))?;
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Idx("truncated dimension header".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Idx("dimension product overflows".into()))?;
    let body = &bytes[header..];
    if body.len() < count * size {
        return Err(Error::Idx(format!(
            "truncated data: header declares {count} elements ({} bytes), file holds {} bytes",
            count * size,
            body.len()
        )));
    }
    if body.len() > count * size {
        return Err(Error::Idx(format!(
            "{} trailing bytes after the declared data",
            body.len() - count * size
        )));
    }
    let data = body
        .chunks_exact(size)
        .map(|c| match code {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes(c.try_into().expect("4 bytes")) as f64,
            0x0D => f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64,
            _ => f64::from_be_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(IdxArray {
        dims,
        data,
        type_code: code,
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Serializes unsigned bytes as an IDX buffer.
pub fn encode_idx_u8(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != data.len() || dims.len() > 255 {
        return Err(Error::Idx("dims do not match data".into()));
    }
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Idx("dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let bytes = encode_idx_u8(dims, data)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Loads an image file (`[N, H, W]` or `[N, C, H, W]` unsigned bytes, scaled
/// to `[0, 1]`) and its label file (`[N]`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    dataset_from_idx(img, lab)
}

pub fn dataset_from_idx(img: IdxArray, lab: IdxArray) -> Result<Dataset> {
    let shape = match img.dims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => return Err(Error::Idx(format!("image file must be 3-D or 4-D, got {:?}", img.dims))),
    };
    if lab.dims.len() != 1 {
        return Err(Error::Idx(format!("label file must be 1-D, got {:?}", lab.dims)));
    }
    if lab.dims[0] != shape[0] {
        return Err(Error::Idx(format!("{} images but {} labels", shape[0], lab.dims[0])));
    }
    let divisor = if img.type_code == 0x08 { 255.0 } else { 1.0 };
    let images = Tensor::new(shape, img.data.iter().map(|v| v / divisor).collect())?;
    if lab.data.iter().any(|&l| l < 0.0 || l.fract() != 0.0) {
        return Err(Error::Idx("labels must be non-negative integers".into()));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, classes)
}

/// Writes a dataset with values in `[0, 1]` as a pair of IDX files.
pub fn save_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [c, h, w] = data.image_shape();
    let dims = if c == 1 { vec![data.len(), h, w] } else { vec![data.len(), c, h, w] };
    let bytes: Vec<u8> = data
        .images
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_idx_u8(images, &dims, &bytes)?;
    let labs: Vec<u8> = data
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Idx("label exceeds 255".into())))
        .collect::<Result<_>>()?;
    write_idx_u8(labels, &[data.len()], &labs)
}

/// Line segment used to draw class prototypes.
#[derive(Debug, Clone, Copy)]
struct Stroke {
    cx: f64,
    cy: f64,
    angle: f64,
    half_len: f64,
    sign: f64,
}

impl Stroke {
    fn random(rng: &mut ChaCha8Rng, side: f64) -> Self {
        Self {
            cx: rng.random_range(0.25 * side..0.75 * side),
            cy: rng.random_range(0.25 * side..0.75 * side),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            half_len: rng.random_range(0.12 * side..0.28 * side),
            sign: if rng.random_bool(0.75) { 1.0 } else { -1.0 },
        }
    }

    /// Intensity at pixel centre `(x, y)`: a Gaussian ridge of width ~1px.
    fn at(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = (dx * c + dy * s).clamp(-self.half_len, self.half_len);
        let (px, py) = (self.cx + along * c, self.cy + along * s);
        let d2 = (x - px).powi(2) + (y - py).powi(2);
        self.sign * (-d2 / 1.5).exp()
    }
}

const STROKES_PER_CLASS: usize = 3;

/// Deterministic procedural classification data.
///
/// Each class owns a prototype made of three random strokes. A sample is its
/// class prototype shifted by up to `max_shift` pixels, scaled by a random
/// contrast in `[0.7, 1.3]`, overlaid with one class-independent distractor
/// stroke at half contrast, plus i.i.d. Gaussian pixel noise of standard
/// deviation `noise`. With `noise = 0` and no distractor the classes are
/// separable by template matching; the noise level sets the Bayes error.
/// Labels are assigned round-robin, so class counts differ by at most one.
pub fn synth_dataset(seed: u64, num_classes: usize, n: usize, cfg: &SynthConfig) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::InvalidArgument(format!(
            "need at least one sample per class ({n} samples, {num_classes} classes)"
        )));
    }
    let side = cfg.side;
    let sidef = side as f64;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_EED0_FC1A_55E5);
    let prototypes: Vec<Vec<Stroke>> = (0..num_classes)
        .map(|_| (0..STROKES_PER_CLASS).map(|_| Stroke::random(&mut proto_rng, sidef)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    let shift = cfg.max_shift as i64;
    for i in 0..n {
        let label = i % num_classes;
        let dx = rng.random_range(-shift..=shift) as f64;
        let dy = rng.random_range(-shift..=shift) as f64;
        let contrast = rng.random_range(0.7..1.3);
        let distractor = Stroke::random(&mut rng, sidef);
        for y in 0..side {
            for x in 0..side {
                let (xf, yf) = (x as f64 + 0.5 - dx, y as f64 + 0.5 - dy);
                let signal: f64 = prototypes[label].iter().map(|s| s.at(xf, yf)).sum();
                let clutter = 0.5 * distractor.at(x as f64 + 0.5, y as f64 + 0.5);
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(contrast * signal + clutter + cfg.noise * z);
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 1, side, side], data)?, labels, num_classes)
}

/// Train and test splits for a data config. Synthetic data uses the
/// config's seed, falling back to `run_seed`.
pub fn load_data(cfg: &DataConfig, run_seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg {
        DataConfig::Synth(s) => {
            let all = synth_dataset(s.seed.unwrap_or(run_seed), s.num_classes, s.n_train + s.n_test, s)?;
            Ok(all.split_at(s.n_train))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            let classes = train.num_classes.max(test.num_classes);
            test.num_classes = classes;
            Ok((Dataset { num_classes: classes, ..train }, test))
        }
    }
}
