//! Big-endian IDX files as distributed for MNIST and Fashion-MNIST.

use std::fs;
use std::path::Path;

use super::{LabeledImageSet, Split, Targets};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Header {
    dims: Vec<usize>,
    data_offset: usize,
}

fn read_header(path: &Path, bytes: &[u8], magic: u32, rank: usize) -> Result<Header> {
    let header_len = 4 + 4 * rank;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = header_len + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(Header {
        dims,
        data_offset: header_len,
    })
}

/// Loads an image file and its label file. Pixels are scaled to [0, 1]; the class count is
/// one more than the largest label, but at least 10.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<LabeledImageSet> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ibytes = fs::read(ipath)?;
    let lbytes = fs::read(lpath)?;
    let ih = read_header(ipath, &ibytes, IMAGE_MAGIC, 3)?;
    let lh = read_header(lpath, &lbytes, LABEL_MAGIC, 1)?;
    let (count, rows, cols) = (ih.dims[0], ih.dims[1], ih.dims[2]);
    if count != lh.dims[0] {
        return Err(Error::CountMismatch {
            images: count,
            labels: lh.dims[0],
        });
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::EmptyDataset);
    }
    let pixels = &ibytes[ih.data_offset..ih.data_offset + count * rows * cols];
    let values = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::new(vec![count, rows, cols, 1], values)?;
    let labels: Vec<usize> = lbytes[lh.data_offset..lh.data_offset + count].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    LabeledImageSet::new(images, Targets::Classes { labels, classes }, split)
}

/// Writes `[count, rows, cols]` grayscale bytes as an IDX image file.
pub fn write_idx_images(path: impl AsRef<Path>, count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), count * rows * cols, "pixel buffer length");
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_fashion_mnist(dir: impl AsRef<Path>) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}
