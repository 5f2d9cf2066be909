use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::IngestError;
use crate::scalar::Scalar;
use crate::taxonomy::{LabelMask, TerrainSample};
use crate::tensor::Tensor;

/// Per-channel affine normalization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::imagenet()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub target_height: usize,
    pub target_width: usize,
    pub to_grayscale: bool,
    /// Output channel count, 1 or 3.
    pub replicate_channels: usize,
    pub normalization: Normalization,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_height: 512,
            target_width: 512,
            to_grayscale: true,
            replicate_channels: 3,
            normalization: Normalization::imagenet(),
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(IngestError::InvalidSpec("target size must be positive".into()));
        }
        if !matches!(self.replicate_channels, 1 | 3) {
            return Err(IngestError::InvalidSpec(format!(
                "replicate_channels must be 1 or 3, got {}",
                self.replicate_channels
            )));
        }
        if self.normalization.std.iter().any(|s| *s <= 0.0) {
            return Err(IngestError::InvalidSpec("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Network-ready image (`[C, H, W]`) with its aligned mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample<T> {
    pub image: Tensor<T>,
    pub mask: LabelMask,
}

/// Nearest-neighbour resize; output values are always drawn from the input.
pub fn resize_mask_nearest(mask: &LabelMask, height: usize, width: usize) -> LabelMask {
    let (sh, sw) = mask.dims();
    if (sh, sw) == (height, width) {
        return mask.clone();
    }
    let src_index = |dst: usize, src_len: usize, dst_len: usize| ((2 * dst + 1) * src_len / (2 * dst_len)).min(src_len - 1);
    let cols: Vec<usize> = (0..width).map(|x| src_index(x, sw, width)).collect();
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = src_index(y, sh, height);
        values.extend(cols.iter().map(|&sx| mask.get(sy, sx)));
    }
    LabelMask::new(height, width, values).expect("resized mask has matching length")
}

/// Resizes (bilinear for pixels, nearest for labels), applies the colour
/// policy and normalizes.
pub fn preprocess_images<T: Scalar>(
    image: &DynamicImage,
    mask: &LabelMask,
    spec: &PreprocessSpec,
) -> Result<PreparedSample<T>, IngestError> {
    spec.validate()?;
    let (iw, ih) = (image.width() as usize, image.height() as usize);
    if (ih, iw) != mask.dims() {
        return Err(IngestError::CorruptFile {
            path: Default::default(),
            reason: format!("image is {ih}x{iw} but mask is {}x{}", mask.height(), mask.width()),
        });
    }
    let (h, w) = (spec.target_height, spec.target_width);
    let plane = h * w;
    let channels = spec.replicate_channels;
    let norm = &spec.normalization;
    let mut data = vec![T::zero(); channels * plane];

    let gray_only = spec.to_grayscale || channels == 1;
    if gray_only {
        let luma = image.to_luma8();
        let resized = image::imageops::resize(&luma, w as u32, h as u32, FilterType::Triangle);
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let (mean, std) = (norm.mean[c], norm.std[c]);
            for (dst, px) in chunk.iter_mut().zip(resized.as_raw()) {
                *dst = T::lit((*px as f64 / 255.0 - mean) / std);
            }
        }
    } else {
        let rgb = image.to_rgb8();
        let resized = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        let raw = resized.as_raw();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let (mean, std) = (norm.mean[c], norm.std[c]);
            for (i, dst) in chunk.iter_mut().enumerate() {
                *dst = T::lit((raw[i * 3 + c] as f64 / 255.0 - mean) / std);
            }
        }
    }

    Ok(PreparedSample {
        image: Tensor::from_vec(&[channels, h, w], data),
        mask: resize_mask_nearest(mask, h, w),
    })
}

/// Loads and preprocesses one manifest entry. Relative refs are resolved
/// against `base_dir`.
pub fn preprocess_sample<T: Scalar>(
    sample: &TerrainSample,
    spec: &PreprocessSpec,
    base_dir: Option<&Path>,
) -> Result<PreparedSample<T>, IngestError> {
    let resolve = |r: &str| {
        let p = Path::new(r);
        match base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    };
    let image_path = resolve(&sample.image_ref);
    let image = image::open(&image_path).map_err(|e| IngestError::CorruptFile {
        path: image_path.clone(),
        reason: e.to_string(),
    })?;
    let mask = LabelMask::load(&resolve(&sample.mask_ref))?;
    preprocess_images(&image, &mask, spec).map_err(|e| match e {
        IngestError::CorruptFile { reason, .. } => IngestError::CorruptFile {
            path: image_path,
            reason,
        },
        other => other,
    })
}
