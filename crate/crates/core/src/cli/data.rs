//! Dataset interchange files: JSON-lines box records and raw image blobs
//! with a JSON sidecar for shapes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BoundingBox;
use crate::nets::Tensor4;

use super::archive::write_atomic;

/// One JSON-lines record: boxes are `[x_min, y_min, x_max, y_max]` with an
/// optional fifth score element.
#[derive(Debug, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: String,
    pub boxes: Vec<Vec<f64>>,
}

pub fn boxes_to_record(image_id: &str, boxes: &[BoundingBox]) -> BoxRecord {
    BoxRecord {
        image_id: image_id.to_string(),
        boxes: boxes
            .iter()
            .map(|b| {
                let mut row = vec![b.x_min, b.y_min, b.x_max, b.y_max];
                if let Some(s) = b.score {
                    row.push(s);
                }
                row
            })
            .collect(),
    }
}

fn record_to_boxes(record: &BoxRecord) -> Result<Vec<BoundingBox>> {
    record
        .boxes
        .iter()
        .map(|row| match row.len() {
            4 => BoundingBox::new(row[0], row[1], row[2], row[3]),
            5 => BoundingBox::scored(row[0], row[1], row[2], row[3], row[4]),
            n => Err(Error::dataset(format!(
                "box row for {} has {n} elements, expected 4 or 5",
                record.image_id
            ))),
        })
        .collect()
}

/// Read a JSON-lines boxes file into an id-sorted map.
pub fn read_boxes_jsonl(path: &Path) -> Result<BTreeMap<String, Vec<BoundingBox>>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::dataset(format!("cannot open {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BoxRecord = serde_json::from_str(&line)
            .map_err(|e| Error::dataset(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let boxes = record_to_boxes(&record)?;
        out.insert(record.image_id, boxes);
    }
    Ok(out)
}

pub fn write_boxes_jsonl(path: &Path, images: &BTreeMap<String, Vec<BoundingBox>>) -> Result<()> {
    let mut text = String::new();
    for (id, boxes) in images {
        text.push_str(&serde_json::to_string(&boxes_to_record(id, boxes))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageSidecar {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Write images as a raw little-endian f32 blob plus shape sidecar.
pub fn write_images(blob: &Path, images: &Tensor4) -> Result<()> {
    let (n, c, h, w) = images.shape();
    let mut bytes = Vec::with_capacity(images.data().len() * 4);
    for v in images.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(blob, &bytes)?;
    let sidecar = ImageSidecar {
        count: n,
        channels: c,
        height: h,
        width: w,
    };
    write_atomic(
        &sidecar_path(blob),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )
}

pub fn read_images(blob: &Path) -> Result<Tensor4> {
    let sidecar: ImageSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(blob)).map_err(|e| {
            Error::dataset(format!("missing sidecar for {}: {e}", blob.display()))
        })?)?;
    let bytes = std::fs::read(blob)?;
    let expected = sidecar.count * sidecar.channels * sidecar.height * sidecar.width * 4;
    if bytes.len() != expected {
        return Err(Error::dataset(format!(
            "image blob {}: expected {expected} bytes, got {}",
            blob.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor4::new(sidecar.count, sidecar.channels, sidecar.height, sidecar.width, data)
}

/// Deterministic ids for synthetic images.
pub fn synthetic_image_id(index: usize) -> String {
    format!("synthetic-{index:05}")
}
