//! Conversion of IDX image/label files (the MNIST distribution format) into
//! labelled zips for ingestion.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use gradloom_core::datastore::{encode_mlb1, encode_png, pack_zip};
use gradloom_core::nn::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ItemKind {
    Png,
    Mlb1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    let b = bytes.get(at..at + 4).context("truncated IDX header")?;
    Ok(u32::from_be_bytes(b.try_into().unwrap()) as usize)
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == 0x803, "not an IDX image file (magic {magic:#x}, expected 0x803)");
    let (n, rows, cols) = (be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?);
    let size = rows * cols;
    let body = &bytes[16..];
    ensure!(
        body.len() == n * size,
        "IDX image file declares {n} images of {rows}x{cols} but holds {} bytes",
        body.len()
    );
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.chunks_exact(size.max(1)).take(n).map(<[u8]>::to_vec).collect(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == 0x801, "not an IDX label file (magic {magic:#x}, expected 0x801)");
    let n = be_u32(bytes, 4)?;
    let body = &bytes[8..];
    ensure!(body.len() == n, "IDX label file declares {n} labels but holds {}", body.len());
    Ok(body.to_vec())
}

/// Packs images as `{label}/{index:05}.{png|mlb1}` entries.
pub fn to_zip(images: &IdxImages, labels: &[u8], kind: ItemKind, limit: Option<usize>) -> Result<Vec<u8>> {
    if images.pixels.len() != labels.len() {
        bail!("{} images but {} labels", images.pixels.len(), labels.len());
    }
    let n = limit.unwrap_or(usize::MAX).min(labels.len());
    let shape = Shape::new(images.cols, images.rows, 1);
    let mut entries = Vec::with_capacity(n);
    for (i, (px, label)) in images.pixels.iter().zip(labels).take(n).enumerate() {
        let (ext, bytes) = match kind {
            ItemKind::Png => ("png", encode_png(images.cols as u32, images.rows as u32, 1, px)),
            ItemKind::Mlb1 => {
                let t = Tensor::from_vec(shape, px.iter().map(|&p| f64::from(p) / 255.0).collect())?;
                ("mlb1", encode_mlb1(&t))
            }
        };
        entries.push((format!("{label}/{i:05}.{ext}"), bytes));
    }
    Ok(pack_zip(entries.iter().map(|(name, b)| (name.clone(), b.as_slice())))?)
}

pub fn convert(images: &Path, labels: &Path, kind: ItemKind, limit: Option<usize>) -> Result<Vec<u8>> {
    let images = parse_images(&std::fs::read(images).with_context(|| format!("reading {}", images.display()))?)?;
    let labels = parse_labels(&std::fs::read(labels).with_context(|| format!("reading {}", labels.display()))?)?;
    to_zip(&images, &labels, kind, limit)
}
