//! Scale-invariant feature transform: difference-of-Gaussians keypoints with
//! 128-byte gradient-histogram descriptors.
//!
//! The pipeline follows Lowe's construction without the initial 2× upsampling:
//!
//! 1. [`build_scale_space`]: Gaussian octaves and their differences.
//! 2. [`detect_keypoints`]: 3-D extrema, sub-pixel refinement, contrast and
//!    edge rejection, response-ordered cap.
//! 3. [`assign_orientations`]: 36-bin gradient histogram peaks.
//! 4. [`compute_descriptors`]: 4×4×8 rotated histograms, clipped and quantized.
//!
//! Angles are measured in image coordinates (x right, y down).

mod archive;
mod descriptor;
mod keypoints;
mod pyramid;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::GrayImage;

pub use archive::{read_archive, read_feature_set, write_archive, write_feature_set};
pub use descriptor::compute_descriptors;
pub use keypoints::{assign_orientations, detect_keypoints};
pub use pyramid::{build_scale_space, Octave, ScaleSpace};


pub const DESCRIPTOR_LEN: usize = 128;

#[derive(Debug, Error)]
pub enum SiftError {
    #[error("degenerate image {width}x{height} (min edge must be >= 16)")]
    DegenerateImage { width: usize, height: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("bad feature-set magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated or malformed feature set: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiftParams {
    pub scales_per_octave: usize,
    pub base_sigma: f32,
    /// Applied to |DoG| on `[0, 1]` intensities after division by `scales_per_octave`.
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
    pub max_keypoints: usize,
    pub descriptor_clip: f32,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            scales_per_octave: 3,
            base_sigma: 1.6,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            max_keypoints: 600,
            descriptor_clip: 0.2,
        }
    }
}

impl SiftParams {
    pub fn validate(&self) -> Result<(), SiftError> {
        let bad = |m: &str| Err(SiftError::InvalidParams(m.to_string()));
        if self.scales_per_octave < 2 {
            return bad("scales_per_octave must be >= 2");
        }
        if !(self.base_sigma > 0.0
            && self.contrast_threshold > 0.0
            && self.edge_ratio > 0.0
            && self.descriptor_clip > 0.0)
        {
            return bad("sigma and thresholds must be > 0");
        }
        if self.max_keypoints == 0 {
            return bad("max_keypoints must be >= 1");
        }
        Ok(())
    }
}

/// A located, scaled and oriented keypoint. Coordinates are in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Gaussian σ of the detection scale, in input pixels.
    pub scale: f32,
    /// Radians in `[0, 2π)`.
    pub orientation: f32,
    /// |DoG| at the refined extremum.
    pub response: f32,
    pub(crate) octave: usize,
    /// Integer Gaussian level the point was detected on.
    pub(crate) level: usize,
    /// Fractional level (level + sub-level offset).
    pub(crate) layer: f32,
}

impl Keypoint {
    pub fn new(x: f32, y: f32, scale: f32, orientation: f32, response: f32) -> Self {
        Self {
            x,
            y,
            scale,
            orientation,
            response,
            octave: 0,
            level: 0,
            layer: 0.0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SiftDescriptor(pub [u8; DESCRIPTOR_LEN]);

impl SiftDescriptor {
    pub fn as_bytes(&self) -> &[u8; DESCRIPTOR_LEN] {
        &self.0
    }
}

impl AsRef<[u8]> for SiftDescriptor {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Debug for SiftDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SiftDescriptor({:?}..)", &self.0[..8])
    }
}

/// Local features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub image_id: String,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<SiftDescriptor>,
}

impl FeatureSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            keypoints: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Order used when capping: strongest response first, then (y, x, scale).
pub(crate) fn response_order(a: &Keypoint, b: &Keypoint) -> std::cmp::Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(a.scale.total_cmp(&b.scale))
        .then(a.orientation.total_cmp(&b.orientation))
}

/// Full extraction: scale space, detection, orientation, description.
pub fn extract(img: &GrayImage, params: &SiftParams) -> Result<FeatureSet, SiftError> {
    extract_with_id(img, params, "")
}

pub fn extract_with_id(
    img: &GrayImage,
    params: &SiftParams,
    image_id: &str,
) -> Result<FeatureSet, SiftError> {
    let space = build_scale_space(img, params)?;
    let detected = detect_keypoints(&space, params);
    let mut oriented = assign_orientations(&detected, &space);
    oriented.sort_by(response_order);
    oriented.truncate(params.max_keypoints);
    let descriptors = compute_descriptors(&oriented, &space, params);
    Ok(FeatureSet {
        image_id: image_id.to_string(),
        keypoints: oriented,
        descriptors,
    })
}
