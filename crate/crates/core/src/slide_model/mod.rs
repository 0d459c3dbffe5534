//! Slide and region rasters, viewport geometry and rendering.
//!
//! A [`SlidePyramid`] is loaded from a `slide.json` manifest whose levels are
//! PNG or TIFF files. Regions are plain RGB rasters with provenance. A
//! [`Viewport`] is a `(center, magnification)` request relative to a region;
//! its window has side `1 / magnification` and is slid inward rather than
//! padded when it would leave the region.

mod grid;
mod pyramid;
pub mod resample;
mod viewport;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{annotate_grid, draw_labeled_box, draw_text, grid_positions, line_width, text_size, OVERLAY_COLOR};
pub use pyramid::{
    load_pyramid, make_thumbnail, ManifestLevel, PyramidLevel, RasterSource, SlideManifest, SlidePyramid,
};
pub use viewport::{
    crop_viewport, crop_viewport_with, multiscale_grid, multiscale_viewports, viewport_window, ClampFlags, CropOptions,
    NormRect, RegionImage, RegionSidecar, ViewImage, ViewRecord, Viewport, DEFAULT_OUT_RES,
};

/// Default thumbnail downscale factor.
pub const THUMBNAIL_FACTOR: u32 = 32;

/// Default coordinate-grid spacing in relative units.
pub const GRID_INTERVAL: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SlideError {
    #[error("missing level: {0}")]
    MissingLevel(String),
    #[error("level with downsample {downsample} is {actual:?}, expected {expected:?} (±1 px)")]
    DimensionMismatch {
        downsample: f64,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("cannot decode raster {path}: {reason}")]
    UnreadableRaster { path: PathBuf, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("magnification must be a finite number >= 1, got {0}")]
    InvalidMagnification(f64),
    #[error("viewport center must be finite, got {0:?}")]
    InvalidCenter((f64, f64)),
    #[error("region is empty")]
    EmptyRegion,
    #[error("rectangle {rect:?} exceeds slide bounds {bounds:?}")]
    OutOfBounds { rect: PixelRect, bounds: (u32, u32) },
}

/// Integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, other: &PixelRect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x as u64 + other.w as u64 <= self.x as u64 + self.w as u64
            && other.y as u64 + other.h as u64 <= self.y as u64 + self.h as u64
    }
}
