//! MNIST IDX files: a big-endian `u32` magic, one big-endian `u32` per dimension,
//! then raw unsigned bytes.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{data_err, dim_err, fmt_err, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            fmt_err!(
                "{} is truncated: needed {n} bytes at offset {}, file has {}",
                self.what,
                self.pos,
                self.bytes.len()
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn expect_magic(r: &mut Reader, expected: u32) -> Result<()> {
    let magic = r.u32()?;
    if magic != expected {
        return Err(fmt_err!(
            "{}: bad magic 0x{magic:08x}, expected 0x{expected:08x}",
            r.what
        ));
    }
    Ok(())
}

/// Loads an IDX image/label file pair. Pixels are scaled to `[0, 1]` by `1/255`
/// and images come back as `[N, rows, cols, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let mut r = Reader {
        bytes: &image_bytes,
        pos: 0,
        what: images_path.display().to_string(),
    };
    expect_magic(&mut r, IMAGES_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(fmt_err!("{}: empty dimension ({n}x{rows}x{cols})", r.what));
    }
    let pixels: Vec<f64> = r.take(n * rows * cols)?.iter().map(|&b| f64::from(b) / 255.0).collect();

    let mut r = Reader {
        bytes: &label_bytes,
        pos: 0,
        what: labels_path.display().to_string(),
    };
    expect_magic(&mut r, LABELS_MAGIC)?;
    let n_labels = r.u32()? as usize;
    let labels: Vec<usize> = r.take(n_labels)?.iter().map(|&b| usize::from(b)).collect();
    if n_labels != n {
        return Err(data_err!("{n} images but {n_labels} labels"));
    }
    let samples = Tensor::new(vec![n, rows, cols, 1], pixels)?;
    Dataset::new(samples, labels, MNIST_CLASSES)
}

/// Writes a single-channel dataset in IDX layout. Values are quantized with
/// `round(v · 255)`; flat `[N, d]` samples are written as `1 × d` images.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = match *ds.sample_shape() {
        [d] => (1, d),
        [h, w] | [h, w, 1] => (h, w),
        ref s => return Err(dim_err!("cannot write samples of shape {s:?} as IDX images")),
    };
    if ds.num_classes() > 256 {
        return Err(data_err!("IDX labels are bytes; {} classes do not fit", ds.num_classes()));
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.samples().len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows as u32, cols as u32] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend(ds.samples().data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(ds.labels().iter().map(|&l| l as u8));

    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}
