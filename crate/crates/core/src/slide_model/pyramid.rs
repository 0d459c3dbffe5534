use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{resample, PixelRect, SlideError};

/// Where a level's pixels live.
#[derive(Debug, Clone)]
pub enum RasterSource {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub downsample: f64,
    pub width: u32,
    pub height: u32,
    pub source: RasterSource,
}

/// A leveled raster of one slide. Level 0 is the base resolution.
#[derive(Debug, Clone)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub mpp: Option<f64>,
    levels: Vec<PyramidLevel>,
}

/// On-disk `slide.json` manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub width_px: u32,
    pub height_px: u32,
    #[serde(default)]
    pub mpp: Option<f64>,
    pub levels: Vec<ManifestLevel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestLevel {
    pub downsample: f64,
    pub path: String,
}

fn expected_dim(base: u32, downsample: f64) -> f64 {
    (base as f64 / downsample).ceil()
}

impl SlidePyramid {
    /// Single-level pyramid over an in-memory raster.
    pub fn from_image(slide_id: impl Into<String>, image: RgbImage) -> Self {
        let (w, h) = image.dimensions();
        Self {
            slide_id: slide_id.into(),
            width_px: w,
            height_px: h,
            mpp: None,
            levels: vec![PyramidLevel {
                downsample: 1.0,
                width: w,
                height: h,
                source: RasterSource::Memory(Arc::new(image)),
            }],
        }
    }

    /// Builds a pyramid from explicit levels, sorting them and checking the
    /// level-size invariant.
    pub fn from_levels(
        slide_id: impl Into<String>,
        width_px: u32,
        height_px: u32,
        mpp: Option<f64>,
        mut levels: Vec<PyramidLevel>,
    ) -> Result<Self, SlideError> {
        if width_px == 0 || height_px == 0 {
            return Err(SlideError::InvalidManifest("slide dimensions must be positive".into()));
        }
        if levels.iter().any(|l| !l.downsample.is_finite() || l.downsample < 1.0) {
            return Err(SlideError::InvalidManifest("level downsample must be >= 1".into()));
        }
        levels.sort_by(|a, b| a.downsample.total_cmp(&b.downsample));
        if levels.windows(2).any(|w| w[0].downsample == w[1].downsample) {
            return Err(SlideError::InvalidManifest("duplicate level downsample".into()));
        }
        match levels.first() {
            Some(l) if l.downsample == 1.0 => {}
            _ => return Err(SlideError::MissingLevel("no base level with downsample 1".into())),
        }
        for (idx, l) in levels.iter().enumerate() {
            let ew = expected_dim(width_px, l.downsample);
            let eh = expected_dim(height_px, l.downsample);
            let exact = idx == 0;
            let bad = |actual: u32, expected: f64| {
                let d = (actual as f64 - expected).abs();
                if exact {
                    d > 0.0
                } else {
                    d > 1.0
                }
            };
            if bad(l.width, ew) || bad(l.height, eh) {
                return Err(SlideError::DimensionMismatch {
                    downsample: l.downsample,
                    expected: (ew as u32, eh as u32),
                    actual: (l.width, l.height),
                });
            }
        }
        Ok(Self {
            slide_id: slide_id.into(),
            width_px,
            height_px,
            mpp,
            levels,
        })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    /// Index of the coarsest level whose downsample does not exceed `factor`.
    pub fn best_level_for(&self, factor: f64) -> usize {
        self.levels.iter().rposition(|l| l.downsample <= factor).unwrap_or(0)
    }

    /// Decodes (or shares) the full raster of one level.
    pub fn load_level(&self, idx: usize) -> Result<Arc<RgbImage>, SlideError> {
        let level = self
            .levels
            .get(idx)
            .ok_or_else(|| SlideError::MissingLevel(format!("level index {idx}")))?;
        let img = match &level.source {
            RasterSource::Memory(img) => img.clone(),
            RasterSource::File(path) => Arc::new(read_rgb(path)?),
        };
        if img.dimensions() != (level.width, level.height) {
            return Err(SlideError::DimensionMismatch {
                downsample: level.downsample,
                expected: (level.width, level.height),
                actual: img.dimensions(),
            });
        }
        Ok(img)
    }

    pub fn bounds(&self) -> PixelRect {
        PixelRect::new(0, 0, self.width_px, self.height_px)
    }

    /// Copies a rectangle of base-level pixels.
    pub fn read_base_rect(&self, rect: PixelRect) -> Result<RgbImage, SlideError> {
        if !self.bounds().contains(&rect) || rect.w == 0 || rect.h == 0 {
            return Err(SlideError::OutOfBounds {
                rect,
                bounds: (self.width_px, self.height_px),
            });
        }
        let base = self.load_level(0)?;
        Ok(image::imageops::crop_imm(base.as_ref(), rect.x, rect.y, rect.w, rect.h).to_image())
    }
}

pub(crate) fn read_rgb(path: &Path) -> Result<RgbImage, SlideError> {
    if !path.exists() {
        return Err(SlideError::MissingLevel(path.display().to_string()));
    }
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| SlideError::UnreadableRaster {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Loads a `slide.json` manifest. Level rasters are validated by header only;
/// pixels are decoded on demand.
pub fn load_pyramid(manifest_path: impl AsRef<Path>) -> Result<SlidePyramid, SlideError> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| SlideError::Io {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let manifest: SlideManifest =
        serde_json::from_str(&text).map_err(|e| SlideError::InvalidManifest(e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut levels = Vec::with_capacity(manifest.levels.len());
    for ml in &manifest.levels {
        let path = dir.join(&ml.path);
        if !path.exists() {
            return Err(SlideError::MissingLevel(path.display().to_string()));
        }
        let (width, height) = image::image_dimensions(&path).map_err(|e| SlideError::UnreadableRaster {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        levels.push(PyramidLevel {
            downsample: ml.downsample,
            width,
            height,
            source: RasterSource::File(path),
        });
    }
    SlidePyramid::from_levels(
        manifest.slide_id,
        manifest.width_px,
        manifest.height_px,
        manifest.mpp,
        levels,
    )
}

/// Downscales the slide by `factor`, reading the closest level that is not
/// coarser than requested.
pub fn make_thumbnail(pyramid: &SlidePyramid, factor: u32) -> Result<RgbImage, SlideError> {
    if factor == 0 {
        return Err(SlideError::InvalidManifest("thumbnail factor must be >= 1".into()));
    }
    let w = pyramid.width_px.div_ceil(factor);
    let h = pyramid.height_px.div_ceil(factor);
    let idx = pyramid.best_level_for(factor as f64);
    let level = pyramid.load_level(idx)?;
    Ok(resample::resize(&level, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn level(ds: f64, w: u32, h: u32) -> PyramidLevel {
        PyramidLevel {
            downsample: ds,
            width: w,
            height: h,
            source: RasterSource::Memory(Arc::new(RgbImage::new(w, h))),
        }
    }

    #[test]
    fn levels_are_sorted_and_checked() {
        let p = SlidePyramid::from_levels(
            "s",
            1000,
            600,
            None,
            vec![level(32.0, 32, 19), level(1.0, 1000, 600), level(4.0, 250, 150)],
        )
        .unwrap();
        let ds: Vec<f64> = p.levels().iter().map(|l| l.downsample).collect();
        assert_eq!(ds, vec![1.0, 4.0, 32.0]);
        assert_eq!(p.best_level_for(32.0), 2);
        assert_eq!(p.best_level_for(16.0), 1);
        assert_eq!(p.best_level_for(1.0), 0);
    }

    #[test]
    fn half_width_level_is_mismatch() {
        let err = SlidePyramid::from_levels(
            "s",
            1000,
            1000,
            None,
            vec![level(1.0, 1000, 1000), level(4.0, 125, 250)],
        )
        .unwrap_err();
        assert!(matches!(err, SlideError::DimensionMismatch { .. }));
    }

    #[test]
    fn missing_base_level() {
        let err = SlidePyramid::from_levels("s", 100, 100, None, vec![level(2.0, 50, 50)]).unwrap_err();
        assert!(matches!(err, SlideError::MissingLevel(_)));
    }

    #[test]
    fn thumbnail_dims_are_ceil() {
        // Dimensions only: a 31200x20000 raster would be large, so use a
        // matching coarse level and let the thumbnail read it.
        let p = SlidePyramid::from_levels(
            "s",
            31200,
            20000,
            None,
            vec![
                PyramidLevel {
                    downsample: 1.0,
                    width: 31200,
                    height: 20000,
                    source: RasterSource::File("/nonexistent".into()),
                },
                level(32.0, 975, 625),
            ],
        )
        .unwrap();
        let t = make_thumbnail(&p, 32).unwrap();
        assert_eq!(t.dimensions(), (975, 625));
    }

    #[test]
    fn constant_thumbnail_keeps_color() {
        let img = RgbImage::from_pixel(1000, 700, Rgb([233, 180, 201]));
        let p = SlidePyramid::from_image("s", img);
        let t = make_thumbnail(&p, 32).unwrap();
        assert_eq!(t.dimensions(), (32, 22));
        assert!(t.pixels().all(|px| *px == Rgb([233, 180, 201])));
        let up = resample::resize(&t, 1000, 700);
        assert!(up.pixels().all(|px| *px == Rgb([233, 180, 201])));
    }

    #[test]
    fn read_base_rect_bounds() {
        let p = SlidePyramid::from_image("s", RgbImage::new(10, 10));
        assert!(p.read_base_rect(PixelRect::new(5, 5, 5, 5)).is_ok());
        assert!(matches!(
            p.read_base_rect(PixelRect::new(6, 5, 5, 5)),
            Err(SlideError::OutOfBounds { .. })
        ));
    }
}
