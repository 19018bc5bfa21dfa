//! Desk-scale trainable convolutional models with reverse-mode
//! differentiation, synthetic datasets, detection decoding, and
//! architecture-manifest ingestion.

pub mod data;
pub mod decode;
pub mod layers;
pub mod manifest;
pub mod train;

pub use data::{
    synth_classifier_dataset, synth_detect_dataset, ClassifierDataset, DetectDataset,
    CLASSIFIER_CLASSES,
};
pub use decode::{
    decode_batch, decode_image, desk_anchors, detect_loss, nms, DecodeConfig, WeightedBoxes,
};
pub use layers::{
    conv_forward_compacted, tiny_classifier, tiny_detect, Conv2d, Dense, GlobalAvgPool, Layer,
    LeakyRelu, NetKind, Network, Tensor4,
};
pub use manifest::{yolo_like_manifest, LayerKind, LayerManifest, LayerSpec};
pub use train::{
    accuracy, softmax_cross_entropy, train_classifier_baseline, ClassifierTrainer, DetectTrainer,
    GradHook, PipelineTask,
};
