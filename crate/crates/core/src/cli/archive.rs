//! Model archives: a directory holding a JSON manifest, raw little-endian
//! f32 weight blobs, optional per-layer mask bitmaps, and metadata. All
//! writes go through temp-file + rename.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::count_params;
use crate::nets::{tiny_classifier, tiny_detect, LayerManifest, NetKind, Network};
use crate::sparsity::{MaskSet, SparsityMask};

use super::config::NetKindConfig;

pub const ARCHIVE_VERSION: u32 = 1;

const META_FILE: &str = "meta.json";
const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";
const AUX_FILE: &str = "aux.bin";
const MASKS_FILE: &str = "masks.bin";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchiveMeta {
    pub version: u32,
    pub seed: u64,
    pub net_kind: NetKindConfig,
    pub input_size: usize,
    pub num_classes: usize,
    /// Parameters the archive was created with (resolved config or similar).
    pub creation: serde_json::Value,
    /// Conv ordinals that carry masks, ascending.
    pub masked_layers: Vec<usize>,
    /// True iff every mask satisfies a structured-sparsity invariant.
    pub compaction_eligible: bool,
    pub aux_values: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub meta: ArchiveMeta,
    pub manifest: LayerManifest,
    pub weights: Vec<f32>,
    pub aux: Vec<f32>,
    pub masks: Option<MaskSet>,
}

/// Write `bytes` atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("file")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn floats_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_bytes_to_floats(bytes: &[u8], context: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::archive(format!(
            "{context}: byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl ModelArchive {
    /// Snapshot a network (plus optional masks) into an archive.
    pub fn from_network(
        net: &Network,
        input_size: usize,
        num_classes: usize,
        seed: u64,
        creation: serde_json::Value,
        masks: Option<&MaskSet>,
    ) -> Result<Self> {
        let manifest = net.to_manifest(input_size, input_size);
        let weights = net.flat_conv_weights();
        let aux = net.flat_aux_params();
        let masks = masks.cloned();
        let meta = ArchiveMeta {
            version: ARCHIVE_VERSION,
            seed,
            net_kind: match net.kind {
                NetKind::Classifier => NetKindConfig::Classifier,
                NetKind::Detector => NetKindConfig::Detector,
            },
            input_size,
            num_classes,
            creation,
            masked_layers: masks.as_ref().map(|m| m.layers()).unwrap_or_default(),
            compaction_eligible: masks
                .as_ref()
                .map(|m| !m.is_empty() && m.compaction_eligible())
                .unwrap_or(false),
            aux_values: aux.len() as u64,
        };
        Ok(Self {
            meta,
            manifest,
            weights,
            aux,
            masks,
        })
    }

    /// Rebuild the network this archive describes.
    pub fn to_network(&self) -> Result<Network> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = match self.meta.net_kind {
            NetKindConfig::Classifier => tiny_classifier(self.meta.num_classes, &mut rng),
            NetKindConfig::Detector => tiny_detect(&mut rng),
        };
        let expected = net.to_manifest(self.meta.input_size, self.meta.input_size);
        if expected != self.manifest {
            return Err(Error::archive(
                "manifest does not match the architecture it names".to_string(),
            ));
        }
        net.load_conv_weights(&self.weights)?;
        net.load_aux_params(&self.aux)?;
        Ok(net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(
            &dir.join(META_FILE),
            serde_json::to_string_pretty(&self.meta)?.as_bytes(),
        )?;
        write_atomic(&dir.join(MANIFEST_FILE), self.manifest.to_json().as_bytes())?;
        write_atomic(&dir.join(WEIGHTS_FILE), &floats_to_le_bytes(&self.weights))?;
        write_atomic(&dir.join(AUX_FILE), &floats_to_le_bytes(&self.aux))?;
        if let Some(masks) = &self.masks {
            let mut bits = Vec::new();
            for (_, mask) in masks.iter() {
                bits.extend_from_slice(&mask.to_bits());
            }
            write_atomic(&dir.join(MASKS_FILE), &bits)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(dir.join(META_FILE)).map_err(|e| {
            Error::archive(format!("missing {META_FILE} in {}: {e}", dir.display()))
        })?;
        let meta: ArchiveMeta = serde_json::from_str(&meta_text)?;
        if meta.version != ARCHIVE_VERSION {
            return Err(Error::archive(format!(
                "version mismatch: archive is v{}, this build reads v{ARCHIVE_VERSION}",
                meta.version
            )));
        }
        let manifest = LayerManifest::from_json(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;

        let weight_bytes = fs::read(dir.join(WEIGHTS_FILE))?;
        let expected_bytes = count_params(&manifest, None)? * 4;
        if weight_bytes.len() as u64 != expected_bytes {
            return Err(Error::archive(format!(
                "weights blob truncated or padded: expected {expected_bytes} bytes \
                 (4 x {} params), got {}",
                expected_bytes / 4,
                weight_bytes.len()
            )));
        }
        let weights = le_bytes_to_floats(&weight_bytes, "weights.bin")?;

        let aux_bytes = fs::read(dir.join(AUX_FILE))?;
        if aux_bytes.len() as u64 != meta.aux_values * 4 {
            return Err(Error::archive(format!(
                "aux blob length disagrees with metadata: expected {} bytes, got {}",
                meta.aux_values * 4,
                aux_bytes.len()
            )));
        }
        let aux = le_bytes_to_floats(&aux_bytes, "aux.bin")?;

        let masks = if meta.masked_layers.is_empty() {
            None
        } else {
            let bits = fs::read(dir.join(MASKS_FILE)).map_err(|e| {
                Error::archive(format!("masked_layers set but {MASKS_FILE} unreadable: {e}"))
            })?;
            let conv: Vec<_> = manifest.conv_layers().collect();
            let mut offset = 0usize;
            let mut set = MaskSet::new();
            for &ordinal in &meta.masked_layers {
                let (_, spec) = conv.get(ordinal).ok_or_else(|| {
                    Error::archive(format!("mask ordinal {ordinal} beyond conv layers"))
                })?;
                let (rows, cols) = spec.gemm_dims();
                let nbytes = (rows * cols).div_ceil(8);
                if offset + nbytes > bits.len() {
                    return Err(Error::archive(format!(
                        "masks blob truncated: expected at least {} bytes, got {}",
                        offset + nbytes,
                        bits.len()
                    )));
                }
                set.insert(
                    ordinal,
                    SparsityMask::from_bits(rows, cols, &bits[offset..offset + nbytes])?,
                );
                offset += nbytes;
            }
            if offset != bits.len() {
                return Err(Error::archive(format!(
                    "masks blob has {} trailing bytes",
                    bits.len() - offset
                )));
            }
            Some(set)
        };

        // The eligibility flag is derived; a disagreement means the archive
        // was tampered with or written by broken code.
        let derived = masks
            .as_ref()
            .map(|m| !m.is_empty() && m.compaction_eligible())
            .unwrap_or(false);
        if derived != meta.compaction_eligible {
            return Err(Error::archive(format!(
                "compaction_eligible flag is {} but masks say {derived}",
                meta.compaction_eligible
            )));
        }

        Ok(Self {
            meta,
            manifest,
            weights,
            aux,
            masks,
        })
    }
}
