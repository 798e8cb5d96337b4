//! `.mdi` container: one image, label map, or probability map per file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "MDI1"
//! kind    u8       0 = image (f32), 1 = labels (u8), 2 = probability map (f32)
//! width   u32
//! height  u32
//! planes  u32      channels (kind 0), classes (kinds 1 and 2)
//! payload          row-major within a plane, planes concatenated
//! ```
//!
//! Errors carry the byte offset where decoding failed.

use std::fs;
use std::path::Path;

use crate::blobio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, MultiChannelImage, ProbabilityMap};

const MAGIC: &[u8; 4] = b"MDI1";

const KIND_IMAGE: u8 = 0;
const KIND_LABELS: u8 = 1;
const KIND_PROBMAP: u8 = 2;

/// Any of the three raster payloads an `.mdi` file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum MdiObject {
    Image(MultiChannelImage),
    Labels(LabelMap),
    ProbMap(ProbabilityMap),
}

impl MdiObject {
    pub fn kind_name(&self) -> &'static str {
        match self {
            MdiObject::Image(_) => "image",
            MdiObject::Labels(_) => "labels",
            MdiObject::ProbMap(_) => "probability map",
        }
    }
}

fn encode(obj: &MdiObject) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_bytes(MAGIC);
    match obj {
        MdiObject::Image(img) => {
            w.put_u8(KIND_IMAGE);
            w.put_u32(img.width() as u32);
            w.put_u32(img.height() as u32);
            w.put_u32(img.channels() as u32);
            w.put_f32s(img.data());
        }
        MdiObject::Labels(lab) => {
            w.put_u8(KIND_LABELS);
            w.put_u32(lab.width() as u32);
            w.put_u32(lab.height() as u32);
            w.put_u32(lab.classes() as u32);
            w.put_bytes(lab.labels());
        }
        MdiObject::ProbMap(p) => {
            w.put_u8(KIND_PROBMAP);
            w.put_u32(p.width() as u32);
            w.put_u32(p.height() as u32);
            w.put_u32(p.classes() as u32);
            w.put_f32s(p.values());
        }
    }
    w.bytes()
}

fn decode(bytes: &[u8]) -> Result<MdiObject> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC, "mdi magic")?;
    let kind_off = r.offset();
    let kind = r.get_u8("mdi kind")?;
    let dims_off = r.offset();
    let width = r.get_u32("mdi width")? as usize;
    let height = r.get_u32("mdi height")? as usize;
    let planes = r.get_u32("mdi plane count")? as usize;
    if width == 0 || height == 0 || planes == 0 {
        return Err(Error::format(
            dims_off,
            format!("dimensions {width}x{height}x{planes} contain a zero"),
        ));
    }
    let pixels = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(planes))
        .ok_or_else(|| {
            Error::format(
                dims_off,
                format!("dimensions {width}x{height}x{planes} overflow"),
            )
        })?;
    let obj = match kind {
        KIND_IMAGE => {
            let data = r.get_f32s(pixels, "mdi image payload")?;
            MdiObject::Image(MultiChannelImage::new(width, height, planes, data)?)
        }
        KIND_LABELS => {
            // Labels are a single u8 plane; the plane-count field carries the
            // class count.
            if planes > 256 {
                return Err(Error::format(
                    dims_off,
                    format!("label class count {planes} exceeds 256"),
                ));
            }
            let labels = r.get_bytes(width * height, "mdi label payload")?.to_vec();
            MdiObject::Labels(LabelMap::new(width, height, planes, labels)?)
        }
        KIND_PROBMAP => {
            let data = r.get_f32s(pixels, "mdi probability payload")?;
            MdiObject::ProbMap(ProbabilityMap::new(width, height, planes, data)?)
        }
        other => {
            return Err(Error::format(
                kind_off,
                format!("unknown mdi kind {other}"),
            ))
        }
    };
    r.expect_end()?;
    Ok(obj)
}

/// Write any raster object to `path`.
pub fn write_mdi(path: &Path, obj: &MdiObject) -> Result<()> {
    fs::write(path, encode(obj)).map_err(Error::from)
}

/// Read a raster object from `path`, validating dimensions and payload.
pub fn read_mdi(path: &Path) -> Result<MdiObject> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
