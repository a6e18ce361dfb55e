//! Item decoding shared by the data server and workers.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::datastore::DatastoreError;
use crate::nn::{Shape, Tensor};

pub const MLB1_MAGIC: &[u8; 4] = b"MLB1";

/// On-disk encoding of one data item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemFormat {
    Png,
    /// `"MLB1"`, then little-endian `u32` width, height, depth, then
    /// `width·height·depth` little-endian `f32` values in `(y, x, d)` order.
    Mlb1,
}

impl ItemFormat {
    pub fn from_path(path: &str) -> Option<Self> {
        let ext = path.rsplit_once('.')?.1.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(ItemFormat::Png),
            "mlb1" => Some(ItemFormat::Mlb1),
            _ => None,
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ItemFormat::Png => "png",
            ItemFormat::Mlb1 => "mlb1",
        }
    }
}

/// Decodes an item into a tensor with values in `[0, 1]`.
///
/// PNGs of any bit depth are reduced to 8 bits and divided by 255; grey
/// images have depth 1 and colour images depth 3 (alpha is dropped).
pub fn decode_item(bytes: &[u8], format: ItemFormat) -> Result<Tensor<f64>, DatastoreError> {
    match format {
        ItemFormat::Png => decode_png(bytes),
        ItemFormat::Mlb1 => decode_mlb1(bytes),
    }
}

fn corrupt(reason: impl Into<String>) -> DatastoreError {
    DatastoreError::Decode {
        id: None,
        reason: reason.into(),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f64>, DatastoreError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| corrupt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| corrupt(e.to_string()))?;
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(corrupt("palette was not expanded")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * keep);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..w * channels].chunks_exact(channels) {
            data.extend(px[..keep].iter().map(|&v| f64::from(v) / 255.0));
        }
    }
    Tensor::from_vec(Shape::new(w, h, keep), data).map_err(|e| corrupt(e.to_string()))
}

fn decode_mlb1(bytes: &[u8]) -> Result<Tensor<f64>, DatastoreError> {
    if bytes.len() < 16 || &bytes[..4] != MLB1_MAGIC {
        return Err(corrupt("missing MLB1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2));
    let n = shape
        .width
        .checked_mul(shape.height)
        .and_then(|v| v.checked_mul(shape.depth))
        .ok_or_else(|| corrupt("dimensions overflow"))?;
    if n == 0 {
        return Err(corrupt("empty tensor"));
    }
    let body = &bytes[16..];
    if body.len() != n * 4 {
        return Err(corrupt(format!(
            "expected {} payload bytes for {shape}, found {}",
            n * 4,
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(corrupt(format!("value {v} outside [0, 1]")));
        }
        data.push(f64::from(v));
    }
    Tensor::from_vec(shape, data).map_err(|e| corrupt(e.to_string()))
}

/// Serialises a tensor as MLB1; values are narrowed to `f32`.
pub fn encode_mlb1(tensor: &Tensor<f64>) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(16 + shape.len() * 4);
    out.extend_from_slice(MLB1_MAGIC);
    for d in [shape.width, shape.height, shape.depth] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Encodes 8-bit grey (`depth == 1`) or RGB (`depth == 3`) pixels as PNG.
pub fn encode_png(width: u32, height: u32, depth: u8, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(if depth == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory PNG header");
        writer
            .write_image_data(pixels)
            .expect("pixel buffer matches dimensions");
    }
    out
}
