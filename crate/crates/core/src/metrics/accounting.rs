//! Parameter, FLOPs, and storage accounting over architecture manifests,
//! dense or under sparsity masks.

use crate::error::{Error, Result};
use crate::nets::manifest::LayerManifest;
use crate::sparsity::MaskSet;

pub const BYTES_PER_PARAM: u64 = 4;

fn mask_congruence(
    manifest: &LayerManifest,
    masks: &MaskSet,
) -> Result<()> {
    let conv: Vec<_> = manifest.conv_layers().collect();
    for (ordinal, mask) in masks.iter() {
        let (_, spec) = conv.get(ordinal).ok_or_else(|| Error::ShapeMismatch {
            context: "accounting masks",
            expected: format!("conv ordinal < {}", conv.len()),
            actual: format!("ordinal {ordinal}"),
        })?;
        let (rows, cols) = spec.gemm_dims();
        if mask.rows() != rows || mask.cols() != cols {
            return Err(Error::ShapeMismatch {
                context: "accounting masks",
                expected: format!("{rows}x{cols} mask for conv ordinal {ordinal}"),
                actual: format!("{}x{}", mask.rows(), mask.cols()),
            });
        }
    }
    Ok(())
}

/// Total conv weight parameters; with masks, the retained count per masked
/// layer is the mask popcount.
pub fn count_params(manifest: &LayerManifest, masks: Option<&MaskSet>) -> Result<u64> {
    if let Some(masks) = masks {
        mask_congruence(manifest, masks)?;
    }
    let mut total = 0u64;
    for (ordinal, (_, spec)) in manifest.conv_layers().enumerate() {
        total += match masks.and_then(|m| m.get(ordinal)) {
            Some(mask) => mask.popcount() as u64,
            None => spec.weight_params(),
        };
    }
    Ok(total)
}

/// Total conv FLOPs with the multiply-and-add-counted-separately convention:
/// `2 * F * C * KH * KW * H_out * W_out` per layer. Under a mask the
/// weight-product term reduces to the retained count.
pub fn count_flops(manifest: &LayerManifest, masks: Option<&MaskSet>) -> Result<u64> {
    if let Some(masks) = masks {
        mask_congruence(manifest, masks)?;
    }
    let mut total = 0u64;
    for (ordinal, (_, spec)) in manifest.conv_layers().enumerate() {
        let weights = match masks.and_then(|m| m.get(ordinal)) {
            Some(mask) => mask.popcount() as u64,
            None => spec.weight_params(),
        };
        total += 2 * weights * (spec.h_out as u64) * (spec.w_out as u64);
    }
    Ok(total)
}

/// 32-bit weights: 4 bytes per parameter.
pub fn storage_bytes(params: u64) -> u64 {
    params * BYTES_PER_PARAM
}
