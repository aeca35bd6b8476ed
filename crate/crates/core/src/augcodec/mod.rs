//! Sampling, application and numeric encoding of image augmentations.

mod apply;
mod encoding;
mod policy;
mod trace;

pub use apply::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, apply_trace, crop_resize, gaussian_blur,
    image_size, prepare_original, solarize, to_float, to_grayscale, Image,
};
pub use encoding::{
    decode_trace, encode_trace, fit_normalizer, fit_profile_normalizer, LayoutDescriptor, Normalizer,
    DEFAULT_NORMALIZER_SAMPLES, STD_FLOOR,
};
pub use policy::{
    AugmentationPolicy, Baseline, BlurParams, CodecProfile, CropParams, Dataset, JitterParams, PolicyPair, View,
};
pub use trace::{
    sample_blur, sample_crop, sample_jitter, sample_trace, AugmentationTrace, ColorJitter, CropRect, GaussianBlur,
    ImageSize, JitterOp, DEFAULT_JITTER_ORDER,
};
