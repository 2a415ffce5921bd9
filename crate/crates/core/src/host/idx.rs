//! IDX image/label files (the MNIST layout), optionally gzip-compressed.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;

use crate::error::{ensure, KtError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// MNIST pixel statistics used to standardize inputs.
pub const PIXEL_MEAN: f32 = 0.1307;
pub const PIXEL_STD: f32 = 0.3081;

/// A labelled image set with pixels standardized to zero-mean/unit-std floats.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn from_raw(rows: usize, cols: usize, raw: &[u8], labels: Vec<u8>) -> Result<Self> {
        ensure!(
            raw.len() == rows * cols * labels.len(),
            KtError::shape("ImageSet::from_raw", &[labels.len(), rows, cols], &[raw.len()])
        );
        let pixels = raw
            .iter()
            .map(|&p| (p as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD)
            .collect();
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    /// Copies the selected images into a contiguous batch buffer.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<u8>) {
        let d = self.image_len();
        let mut px = Vec::with_capacity(indices.len() * d);
        let mut lb = Vec::with_capacity(indices.len());
        for &i in indices {
            px.extend_from_slice(&self.pixels[i * d..(i + 1) * d]);
            lb.push(self.labels[i]);
        }
        (px, lb)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (pixels, labels) = self.gather(indices);
        Self {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels,
        }
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let f = File::open(path).map_err(|e| KtError::io(path, e))?;
    let r = BufReader::new(f);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(r)))
    } else {
        Ok(Box::new(r))
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> KtError {
    KtError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an IDX3 image file: `(count, rows, cols, raw u8 pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = open(path)?;
    let io = |e| KtError::io(path, e);
    let magic = r.read_u32::<BigEndian>().map_err(io)?;
    ensure!(magic == IMAGE_MAGIC, corrupt(path, format!("bad image magic {magic:#010x}")));
    let n = r.read_u32::<BigEndian>().map_err(io)? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(io)? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(io)? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    r.read_exact(&mut raw)
        .map_err(|_| corrupt(path, "truncated pixel data"))?;
    Ok((n, rows, cols, raw))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = open(path)?;
    let io = |e| KtError::io(path, e);
    let magic = r.read_u32::<BigEndian>().map_err(io)?;
    ensure!(magic == LABEL_MAGIC, corrupt(path, format!("bad label magic {magic:#010x}")));
    let n = r.read_u32::<BigEndian>().map_err(io)? as usize;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)
        .map_err(|_| corrupt(path, "truncated label data"))?;
    ensure!(
        labels.iter().all(|&l| l < 10),
        corrupt(path, "label outside 0..10")
    );
    Ok(labels)
}

/// Writes raw IDX files (uncompressed). Used for fixtures and converted datasets.
pub fn write_idx(images_path: &Path, labels_path: &Path, rows: usize, cols: usize, raw: &[u8], labels: &[u8]) -> Result<()> {
    use byteorder::WriteBytesExt;
    let mut img = Vec::with_capacity(16 + raw.len());
    img.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
    img.write_u32::<BigEndian>(labels.len() as u32).unwrap();
    img.write_u32::<BigEndian>(rows as u32).unwrap();
    img.write_u32::<BigEndian>(cols as u32).unwrap();
    img.extend_from_slice(raw);
    std::fs::write(images_path, img).map_err(|e| KtError::io(images_path, e))?;
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
    lab.write_u32::<BigEndian>(labels.len() as u32).unwrap();
    lab.extend_from_slice(labels);
    std::fs::write(labels_path, lab).map_err(|e| KtError::io(labels_path, e))
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for cand in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(cand);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(KtError::Missing(dir.join(stem)))
}

pub fn load_split(dir: &Path, prefix: &str) -> Result<ImageSet> {
    let (n, rows, cols, raw) = read_idx_images(&find(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_idx_labels(&find(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    ensure!(
        labels.len() == n,
        KtError::Corrupt {
            path: dir.to_path_buf(),
            reason: format!("{n} images but {} labels", labels.len()),
        }
    );
    ensure!(
        rows == 28 && cols == 28,
        KtError::Invalid(format!("expected 28x28 images, found {rows}x{cols}"))
    );
    ImageSet::from_raw(rows, cols, &raw, labels)
}

/// Train and test splits of an MNIST-layout directory
/// (`train-*-ubyte[.gz]`, `t10k-*-ubyte[.gz]`).
#[derive(Clone, Debug)]
pub struct DigitData {
    pub train: ImageSet,
    pub test: ImageSet,
}

impl DigitData {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: load_split(dir, "train")?,
            test: load_split(dir, "t10k")?,
        })
    }
}

/// Root directory for image datasets: `$KT_DATA_DIR`, else `data/` under the workspace.
pub fn data_root() -> PathBuf {
    std::env::var_os("KT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}
