//! Architecture manifests: the layer-shape descriptions that drive
//! parameter and FLOPs accounting, for both the desk-scale nets this crate
//! trains and full-scale reference networks it only accounts for.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Upsample,
    Shortcut,
    Detect,
    Dense,
}

/// One layer descriptor. For conv layers all shape fields are meaningful;
/// pass-through kinds (upsample, shortcut, detect) carry `filters ==
/// channels` and contribute no parameters. `from` names the layer feeding
/// this one when it is not the immediate predecessor; a shortcut reads both
/// its predecessor and `from`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub filters: usize,
    pub channels: usize,
    #[serde(default = "one")]
    pub kernel_h: usize,
    #[serde(default = "one")]
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
    #[serde(default)]
    pub prunable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<usize>,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(filters: usize, channels: usize, k: usize, stride: usize, h_out: usize, w_out: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            name: None,
            filters,
            channels,
            kernel_h: k,
            kernel_w: k,
            stride,
            h_out,
            w_out,
            prunable: false,
            from: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn prunable(mut self, yes: bool) -> Self {
        self.prunable = yes;
        self
    }

    /// Weight parameter count. Only conv layers contribute; pass-through
    /// kinds are parameter-free and dense heads are tracked separately.
    pub fn weight_params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv => {
                (self.filters * self.channels * self.kernel_h * self.kernel_w) as u64
            }
            _ => 0,
        }
    }

    /// GEMM view dimensions (conv only).
    pub fn gemm_dims(&self) -> (usize, usize) {
        (self.filters, self.channels * self.kernel_h * self.kernel_w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LayerManifest {
    pub layers: Vec<LayerSpec>,
}

impl LayerManifest {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let m = Self { layers };
        m.validate()?;
        Ok(m)
    }

    /// Parse and validate a manifest file (JSON array of layer descriptors).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let layers: Vec<LayerSpec> = serde_json::from_str(text)?;
        Self::new(layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.layers).expect("manifest serializes")
    }

    /// Chaining and shape consistency: channels must match the producing
    /// layer along the input path, spatial dims must follow the stride
    /// (same-padding convention for convs), and shortcut sources must agree
    /// with the merge point on channels and spatial dims.
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |message: String| Error::Manifest {
                layer: Some(i),
                message,
            };
            if layer.filters == 0 || layer.channels == 0 {
                return Err(err("filters and channels must be >= 1".into()));
            }
            if layer.kernel_h == 0 || layer.kernel_w == 0 || layer.stride == 0 {
                return Err(err("kernel dims and stride must be >= 1".into()));
            }
            if layer.h_out == 0 || layer.w_out == 0 {
                return Err(err("missing spatial dims (h_out/w_out must be >= 1)".into()));
            }
            if let Some(src) = layer.from {
                if src >= i {
                    return Err(err(format!("source {src} must precede layer {i}")));
                }
            }

            // The layer feeding this one: `from` if given (except shortcut,
            // whose primary input is still the predecessor), else the
            // predecessor.
            let input = match layer.kind {
                LayerKind::Shortcut => i.checked_sub(1).map(|p| &self.layers[p]),
                _ => layer
                    .from
                    .map(|src| &self.layers[src])
                    .or_else(|| i.checked_sub(1).map(|p| &self.layers[p])),
            };

            if let Some(input) = input {
                if layer.channels != input.filters {
                    return Err(err(format!(
                        "channel chaining broken: channels {} but input path emits {}",
                        layer.channels, input.filters
                    )));
                }
                match layer.kind {
                    LayerKind::Conv => {
                        // Same-padding: out = (in - 1) / stride + 1.
                        let expect_h = (input.h_out - 1) / layer.stride + 1;
                        let expect_w = (input.w_out - 1) / layer.stride + 1;
                        if layer.h_out != expect_h || layer.w_out != expect_w {
                            return Err(err(format!(
                                "spatial dims {}x{} inconsistent with stride {} from {}x{}",
                                layer.h_out, layer.w_out, layer.stride, input.h_out, input.w_out
                            )));
                        }
                    }
                    LayerKind::Upsample => {
                        if layer.h_out != input.h_out * layer.stride
                            || layer.w_out != input.w_out * layer.stride
                        {
                            return Err(err(format!(
                                "upsample dims {}x{} not {}x larger than input",
                                layer.h_out, layer.w_out, layer.stride
                            )));
                        }
                    }
                    LayerKind::Shortcut | LayerKind::Detect => {
                        if layer.h_out != input.h_out || layer.w_out != input.w_out {
                            return Err(err("pass-through spatial dims disagree".into()));
                        }
                    }
                    LayerKind::Dense => {}
                }
            }

            match layer.kind {
                LayerKind::Upsample | LayerKind::Detect => {
                    if layer.filters != layer.channels {
                        return Err(err("pass-through layer must preserve channels".into()));
                    }
                }
                LayerKind::Shortcut => {
                    if layer.filters != layer.channels {
                        return Err(err("shortcut must preserve channels".into()));
                    }
                    let src = layer
                        .from
                        .ok_or_else(|| err("shortcut requires a `from` source index".into()))?;
                    let source = &self.layers[src];
                    if source.filters != layer.channels {
                        return Err(err(format!(
                            "shortcut source emits {} channels, expected {}",
                            source.filters, layer.channels
                        )));
                    }
                    if source.h_out != layer.h_out || source.w_out != layer.w_out {
                        return Err(err("shortcut source spatial dims disagree".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Conv layers in order, with their manifest indices.
    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Conv)
    }

    /// Conv ordinals (position within the conv-layer sequence) of prunable
    /// layers.
    pub fn prunable_conv_ordinals(&self) -> Vec<usize> {
        self.conv_layers()
            .enumerate()
            .filter(|(_, (_, l))| l.prunable)
            .map(|(ordinal, _)| ordinal)
            .collect()
    }
}

/// A YOLOv3-style manifest at the given square input size: Darknet-53-like
/// backbone (stride-2 conv downsampling, residual shortcuts), three
/// detection heads for one class (18 output channels each), upsampling
/// between scales. Concatenation points are linearized to plain chaining,
/// so the totals approximate the full-scale reference; they are used for
/// accounting only.
pub fn yolo_like_manifest(input: usize) -> LayerManifest {
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut hw = input;
    let mut channels = 3usize;

    fn conv(
        layers: &mut Vec<LayerSpec>,
        filters: usize,
        k: usize,
        stride: usize,
        hw: &mut usize,
        channels: &mut usize,
    ) {
        if stride == 2 {
            *hw = (*hw - 1) / 2 + 1;
        }
        layers.push(LayerSpec::conv(filters, *channels, k, stride, *hw, *hw).prunable(true));
        *channels = filters;
    }

    // Backbone: initial conv, then five downsampling stages of residual blocks.
    conv(&mut layers, 32, 3, 1, &mut hw, &mut channels);
    let stages: [(usize, usize); 5] = [(64, 1), (128, 2), (256, 8), (512, 8), (1024, 4)];
    for &(filters, blocks) in &stages {
        conv(&mut layers, filters, 3, 2, &mut hw, &mut channels);
        for _ in 0..blocks {
            let entry = layers.len() - 1;
            conv(&mut layers, filters / 2, 1, 1, &mut hw, &mut channels);
            conv(&mut layers, filters, 3, 1, &mut hw, &mut channels);
            let mut sc = LayerSpec::conv(filters, filters, 1, 1, hw, hw);
            sc.kind = LayerKind::Shortcut;
            sc.from = Some(entry);
            layers.push(sc);
        }
    }

    // One detection head: three 1x1/3x3 pairs then the 18-channel output
    // conv (18 = 3 anchors * (4 + 1 + 1)) and a detect marker. Returns the
    // index of the last 1x1 reduce conv, which feeds the route to the next
    // scale.
    fn head(
        layers: &mut Vec<LayerSpec>,
        wide: usize,
        hw: usize,
        channels: &mut usize,
    ) -> usize {
        let mut route_src = 0;
        for _ in 0..3 {
            layers.push(LayerSpec::conv(wide / 2, *channels, 1, 1, hw, hw).prunable(true));
            *channels = wide / 2;
            route_src = layers.len() - 1;
            layers.push(LayerSpec::conv(wide, *channels, 3, 1, hw, hw).prunable(true));
            *channels = wide;
        }
        layers.push(LayerSpec::conv(18, *channels, 1, 1, hw, hw));
        let mut det = LayerSpec::conv(18, 18, 1, 1, hw, hw);
        det.kind = LayerKind::Detect;
        layers.push(det);
        *channels = 18;
        route_src
    }

    let route = head(&mut layers, 1024, hw, &mut channels);

    // Route to the second scale: 1x1 reduce from the head's tap point, then
    // 2x upsample.
    let mut reduce = LayerSpec::conv(256, 512, 1, 1, hw, hw).prunable(true);
    reduce.from = Some(route);
    layers.push(reduce);
    channels = 256;
    let mut up = LayerSpec::conv(256, 256, 1, 2, hw * 2, hw * 2);
    up.kind = LayerKind::Upsample;
    layers.push(up);
    hw *= 2;
    let route = head(&mut layers, 512, hw, &mut channels);

    // Route to the third scale.
    let mut reduce = LayerSpec::conv(128, 256, 1, 1, hw, hw).prunable(true);
    reduce.from = Some(route);
    layers.push(reduce);
    channels = 128;
    let mut up = LayerSpec::conv(128, 128, 1, 2, hw * 2, hw * 2);
    up.kind = LayerKind::Upsample;
    layers.push(up);
    hw *= 2;
    head(&mut layers, 256, hw, &mut channels);

    LayerManifest::new(layers).expect("generated manifest is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_layer_manifest_is_valid() {
        let m = LayerManifest::new(vec![LayerSpec::conv(16, 3, 3, 1, 32, 32)]).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.layers[0].weight_params(), 16 * 3 * 3 * 3);
    }

    #[test]
    fn channel_mismatch_names_offending_layer() {
        let layers = vec![
            LayerSpec::conv(16, 3, 3, 1, 32, 32),
            LayerSpec::conv(8, 99, 3, 1, 32, 32),
        ];
        let err = LayerManifest::new(layers).unwrap_err();
        match err {
            Error::Manifest { layer, message } => {
                assert_eq!(layer, Some(1));
                assert!(message.contains("chaining"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let layers = vec![
            LayerSpec::conv(16, 3, 3, 1, 32, 32),
            LayerSpec::conv(8, 16, 3, 2, 32, 32), // stride 2 but dims unchanged
        ];
        assert!(LayerManifest::new(layers).is_err());
    }

    #[test]
    fn shortcut_validation() {
        let mut sc = LayerSpec::conv(16, 16, 1, 1, 32, 32);
        sc.kind = LayerKind::Shortcut;
        let layers = vec![LayerSpec::conv(16, 3, 3, 1, 32, 32), sc.clone()];
        // Missing `from`.
        assert!(LayerManifest::new(layers).is_err());

        sc.from = Some(0);
        let layers = vec![LayerSpec::conv(16, 3, 3, 1, 32, 32), sc];
        assert!(LayerManifest::new(layers).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let m = yolo_like_manifest(320);
        let text = m.to_json();
        let back = LayerManifest::from_json(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn bundled_fixture_matches_builder() {
        let text = include_str!("../../fixtures/yolov3_320.json");
        let bundled = LayerManifest::from_json(text).unwrap();
        assert_eq!(bundled, yolo_like_manifest(320));
    }

    #[test]
    fn yolo_like_fixture_shape() {
        let m = yolo_like_manifest(320);
        // 75 convolutional layers in the reference architecture.
        assert_eq!(m.conv_layers().count(), 75);
        // Head grids at strides 32, 16, 8.
        let detect_dims: Vec<usize> = m
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Detect)
            .map(|l| l.h_out)
            .collect();
        assert_eq!(detect_dims, vec![10, 20, 40]);
    }
}
