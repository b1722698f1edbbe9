//! On-disk formats: binary tensors, PGM heatmaps, COCO-subset annotation
//! JSON, detection lists and parameter bundles.
//!
//! Tensor file layout, little-endian throughout:
//!
//! | bytes      | content                      |
//! |------------|------------------------------|
//! | 4          | magic `DRMT`                 |
//! | 1          | version, `1`                 |
//! | 1          | dtype, `0` for `f64`         |
//! | 1          | `ndim`                       |
//! | 4 * ndim   | extents as `u32`             |
//! | 8 * numel  | row-major `f64` payload      |

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::BBoxAnnotation;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::params::ParamBundle;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DRMT";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 0;
const HEADER_LEN: usize = 7;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| format_err(6, "more than 255 dimensions"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.ndim() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&[TENSOR_VERSION, DTYPE_F64, ndim]);
    for (i, &d) in t.shape().iter().enumerate() {
        let d = u32::try_from(d).map_err(|_| format_err(HEADER_LEN + 4 * i, format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(format_err(4, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(format_err(5, format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(format_err(6, "zero dimensions"));
    }
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(format_err(bytes.len(), "truncated extents"));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let at = HEADER_LEN + 4 * i;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(format_err(at, "zero extent"));
        }
        numel = numel
            .checked_mul(d)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| format_err(at, "element count overflows"))?;
        shape.push(d);
    }
    let expected = dims_end + 8 * numel;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    let data = bytes[dims_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// 8-bit grey levels of a `[1, H, W]` map after min-max normalization;
/// constant maps become 128.
pub fn heatmap_levels(map: &Tensor) -> Result<Vec<u8>> {
    let (c, _, _) = map.chw()?;
    if c != 1 {
        return Err(crate::error::invalid(format!(
            "heatmap needs one channel, got {:?}",
            map.shape()
        )));
    }
    if !map.all_finite() {
        return Err(Error::Numeric("heatmap input is not finite".into()));
    }
    let (lo, hi) = (map.min(), map.max());
    Ok(map
        .data()
        .iter()
        .map(|&v| {
            if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect())
}

pub fn encode_heatmap(map: &Tensor) -> Result<Vec<u8>> {
    let levels = heatmap_levels(map)?;
    let (_, h, w) = map.chw()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&levels);
    Ok(out)
}

/// Binary PGM (P5).
pub fn write_heatmap(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    fs::write(path, encode_heatmap(map)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`, top-left origin.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<Category>,
}

impl AnnotationFile {
    /// Referential integrity and positive extents.
    pub fn validate(&self) -> Result<()> {
        let images: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        let categories: BTreeSet<u64> = self.categories.iter().map(|c| c.id).collect();
        if images.len() != self.images.len() {
            return Err(Error::Annotation("duplicate image id".into()));
        }
        for a in &self.annotations {
            if !images.contains(&a.image_id) {
                return Err(Error::Annotation(format!(
                    "annotation {} refers to missing image id {}",
                    a.id, a.image_id
                )));
            }
            if !categories.contains(&a.category_id) {
                return Err(Error::Annotation(format!(
                    "annotation {} refers to missing category id {}",
                    a.id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
                return Err(Error::Annotation(format!(
                    "annotation {} has invalid bbox {:?}",
                    a.id, a.bbox
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Boxes clamped to their image; boxes left without area are dropped.
    /// Returns the boxes and the number dropped.
    pub fn boxes(&self) -> Result<(Vec<BBoxAnnotation>, usize)> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.annotations.len());
        let mut dropped = 0;
        for a in &self.annotations {
            let img = self.image(a.image_id).expect("validated");
            let mut b = BBoxAnnotation::from_xywh(a.image_id, a.category_id, a.bbox);
            b.score = a.score;
            match b.clamped(img.width as f64, img.height as f64) {
                Some(b) => out.push(b),
                None => dropped += 1,
            }
        }
        Ok((out, dropped))
    }

    /// Boxes of one image.
    pub fn boxes_for(&self, image_id: u64) -> Result<Vec<BBoxAnnotation>> {
        Ok(self.boxes()?.0.into_iter().filter(|b| b.image_id == image_id).collect())
    }

    pub fn push_boxes(&mut self, boxes: &[BBoxAnnotation]) {
        let first = self.annotations.iter().map(|a| a.id).max().map_or(1, |m| m + 1);
        for (id, b) in (first..).zip(boxes) {
            self.annotations.push(AnnotationRecord {
                id,
                image_id: b.image_id,
                category_id: b.category_id,
                bbox: b.to_xywh(),
                score: b.score,
            });
        }
    }
}

fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationFile> {
    let file: AnnotationFile = serde_json::from_slice(&fs::read(path)?)?;
    file.validate()?;
    Ok(file)
}

pub fn write_annotations(path: impl AsRef<Path>, file: &AnnotationFile) -> Result<()> {
    file.validate()?;
    write_json(path, file)
}

/// A JSON array of detections in the COCO results layout.
pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = serde_json::from_slice(&fs::read(path)?)?;
    for d in &dets {
        d.validate().map_err(|e| Error::Annotation(e.to_string()))?;
    }
    Ok(dets)
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    write_json(path, dets)
}

pub fn read_params(path: impl AsRef<Path>) -> Result<ParamBundle> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_params(path: impl AsRef<Path>, params: &ParamBundle) -> Result<()> {
    write_json(path, params)
}

pub fn write_json_value<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_json(path, value)
}
