//! Overlapping huge-region tiling, tissue filtering and region extraction.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slide_model::{resample, PixelRect, RegionImage, SlideError, SlidePyramid};

pub const DEFAULT_REGION_SIZE: u32 = 16000;
pub const DEFAULT_OVERLAP: f64 = 0.05;
pub const DEFAULT_MIN_TISSUE: f64 = 0.10;
/// Longest side of the preview used for tissue evaluation.
pub const PREVIEW_MAX_SIDE: u32 = 512;

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("overlap must be in [0, 1), got {0}")]
    InvalidOverlap(f64),
    #[error("slide and region dimensions must be positive")]
    InvalidDimensions,
    #[error("region {region_id} at {rect:?} exceeds slide bounds {bounds:?}")]
    OutOfBounds {
        region_id: u32,
        rect: PixelRect,
        bounds: (u32, u32),
    },
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("region manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub region_id: u32,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub tissue_fraction: Option<f64>,
}

impl RegionSpec {
    pub fn rect(&self) -> PixelRect {
        PixelRect::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub slide_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub region_size: u32,
    pub overlap: f64,
    pub stride: u32,
    pub specs: Vec<RegionSpec>,
}

impl TilingPlan {
    pub fn spec(&self, region_id: u32) -> Option<&RegionSpec> {
        self.specs.iter().find(|s| s.region_id == region_id)
    }

    pub fn region_ids(&self) -> Vec<u32> {
        self.specs.iter().map(|s| s.region_id).collect()
    }
}

/// `round(region_size * (1 - overlap))`, at least 1.
pub fn stride_for(region_size: u32, overlap: f64) -> u32 {
    ((region_size as f64 * (1.0 - overlap)).round() as u32).max(1)
}

/// Window starts along one axis: multiples of the stride, with the last one
/// clamped to `dim - region_size`.
pub fn axis_positions(dim: u32, region_size: u32, stride: u32) -> Vec<(u32, u32)> {
    if dim <= region_size {
        return vec![(0, dim)];
    }
    let span = dim - region_size;
    let n = span.div_ceil(stride) + 1;
    let mut out: Vec<(u32, u32)> = (0..n - 1).map(|i| (i * stride, region_size)).collect();
    out.push((span, region_size));
    out
}

pub fn plan_regions(
    slide_id: impl Into<String>,
    width_px: u32,
    height_px: u32,
    region_size: u32,
    overlap: f64,
) -> Result<TilingPlan, TilerError> {
    if !(0.0..1.0).contains(&overlap) || overlap.is_nan() {
        return Err(TilerError::InvalidOverlap(overlap));
    }
    if width_px == 0 || height_px == 0 || region_size == 0 {
        return Err(TilerError::InvalidDimensions);
    }
    let stride = stride_for(region_size, overlap);
    let xs = axis_positions(width_px, region_size, stride);
    let ys = axis_positions(height_px, region_size, stride);
    let mut specs = Vec::with_capacity(xs.len() * ys.len());
    for &(y, h) in &ys {
        for &(x, w) in &xs {
            specs.push(RegionSpec {
                region_id: specs.len() as u32,
                x,
                y,
                w,
                h,
                tissue_fraction: None,
            });
        }
    }
    Ok(TilingPlan {
        slide_id: slide_id.into(),
        width_px,
        height_px,
        region_size,
        overlap,
        stride,
        specs,
    })
}

/// Thresholds of the saturation/value tissue rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueRule {
    pub min_saturation: f64,
    pub max_value: f64,
}

impl Default for TissueRule {
    fn default() -> Self {
        Self {
            min_saturation: 0.08,
            max_value: 0.94,
        }
    }
}

impl TissueRule {
    pub fn is_tissue(&self, rgb: [u8; 3]) -> bool {
        let max = rgb.iter().copied().max().unwrap_or(0) as f64;
        let min = rgb.iter().copied().min().unwrap_or(0) as f64;
        let value = max / 255.0;
        let saturation = if max == 0.0 { 0.0 } else { (max - min) / max };
        saturation > self.min_saturation && value < self.max_value
    }

    pub fn fraction(&self, image: &RgbImage) -> f64 {
        let total = image.width() as u64 * image.height() as u64;
        if total == 0 {
            return 0.0;
        }
        let tissue = image.pixels().filter(|p| self.is_tissue(p.0)).count() as u64;
        tissue as f64 / total as f64
    }
}

/// Fraction of pixels classified as tissue under the default rule.
pub fn tissue_fraction(image: &RgbImage) -> f64 {
    TissueRule::default().fraction(image)
}

/// Renders a preview of `rect` (base coordinates) whose longer side is at most
/// `max_side`, reading from the coarsest adequate pyramid level.
fn preview(
    pyramid: &SlidePyramid,
    level_cache: &BTreeMap<usize, std::sync::Arc<RgbImage>>,
    rect: PixelRect,
    max_side: u32,
) -> RgbImage {
    let factor = (rect.w.max(rect.h) as f64 / max_side as f64).max(1.0);
    let idx = pyramid.best_level_for(factor);
    let level = &level_cache[&idx];
    let ds = pyramid.levels()[idx].downsample;
    let lx = ((rect.x as f64 / ds).floor() as u32).min(level.width() - 1);
    let ly = ((rect.y as f64 / ds).floor() as u32).min(level.height() - 1);
    let lx1 = (((rect.x + rect.w) as f64 / ds).ceil() as u32).clamp(lx + 1, level.width());
    let ly1 = (((rect.y + rect.h) as f64 / ds).ceil() as u32).clamp(ly + 1, level.height());
    let out_w = ((rect.w as f64 / factor).ceil() as u32).clamp(1, max_side);
    let out_h = ((rect.h as f64 / factor).ceil() as u32).clamp(1, max_side);
    resample::resize_rect(level, PixelRect::new(lx, ly, lx1 - lx, ly1 - ly), out_w, out_h)
}

/// Scores every spec on a downsampled preview and keeps those whose tissue
/// fraction is strictly above `min_tissue`; a non-positive threshold keeps
/// everything. Region ids are kept as planned.
pub fn filter_regions(
    plan: &TilingPlan,
    pyramid: &SlidePyramid,
    min_tissue: f64,
    rule: TissueRule,
) -> Result<TilingPlan, TilerError> {
    let mut cache = BTreeMap::new();
    for spec in &plan.specs {
        let factor = (spec.w.max(spec.h) as f64 / PREVIEW_MAX_SIDE as f64).max(1.0);
        let idx = pyramid.best_level_for(factor);
        if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(idx) {
            e.insert(pyramid.load_level(idx)?);
        }
    }
    for spec in &plan.specs {
        if !pyramid.bounds().contains(&spec.rect()) {
            return Err(TilerError::OutOfBounds {
                region_id: spec.region_id,
                rect: spec.rect(),
                bounds: (pyramid.width_px, pyramid.height_px),
            });
        }
    }
    let scored: Vec<RegionSpec> = plan
        .specs
        .par_iter()
        .map(|spec| {
            let img = preview(pyramid, &cache, spec.rect(), PREVIEW_MAX_SIDE);
            RegionSpec {
                tissue_fraction: Some(rule.fraction(&img)),
                ..spec.clone()
            }
        })
        .collect();
    Ok(TilingPlan {
        specs: scored
            .into_iter()
            .filter(|s| min_tissue <= 0.0 || s.tissue_fraction.unwrap_or(0.0) > min_tissue)
            .collect(),
        ..plan.clone()
    })
}

pub fn extract_region(pyramid: &SlidePyramid, spec: &RegionSpec) -> Result<RegionImage, TilerError> {
    let rect = spec.rect();
    if rect.w == 0 || rect.h == 0 || !pyramid.bounds().contains(&rect) {
        return Err(TilerError::OutOfBounds {
            region_id: spec.region_id,
            rect,
            bounds: (pyramid.width_px, pyramid.height_px),
        });
    }
    let pixels = pyramid.read_base_rect(rect)?;
    Ok(RegionImage::new(
        spec.region_id,
        pyramid.slide_id.clone(),
        (rect.x, rect.y),
        pixels,
    ))
}

/// One line of the region manifest JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionManifestLine {
    pub region_id: u32,
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub tissue_fraction: Option<f64>,
}

pub fn write_region_manifest(plan: &TilingPlan, mut out: impl Write) -> Result<(), TilerError> {
    for s in &plan.specs {
        let line = RegionManifestLine {
            region_id: s.region_id,
            slide_id: plan.slide_id.clone(),
            x: s.x,
            y: s.y,
            w: s.w,
            h: s.h,
            tissue_fraction: s.tissue_fraction,
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_region_manifest(path: impl AsRef<Path>) -> Result<Vec<RegionManifestLine>, TilerError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TilerError::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn exact_fit_is_one_region() {
        let p = plan_regions("s", 16000, 16000, 16000, 0.05).unwrap();
        assert_eq!(p.stride, 15200);
        assert_eq!(p.specs.len(), 1);
        assert_eq!(p.specs[0].rect(), PixelRect::new(0, 0, 16000, 16000));
    }

    #[test]
    fn two_by_two_at_31200() {
        let p = plan_regions("s", 31200, 31200, 16000, 0.05).unwrap();
        assert_eq!(p.specs.len(), 4);
        let xs: Vec<u32> = p.specs.iter().map(|s| s.x).collect();
        assert_eq!(xs, vec![0, 15200, 0, 15200]);
        let ids: Vec<u32> = p.specs.iter().map(|s| s.region_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn last_position_is_clamped() {
        let pos: Vec<u32> = axis_positions(47600, 16000, 15200).into_iter().map(|p| p.0).collect();
        assert_eq!(pos, vec![0, 15200, 30400, 31600]);
    }

    #[test]
    fn small_slide_single_clamped_region() {
        let p = plan_regions("s", 900, 20000, 16000, 0.05).unwrap();
        assert_eq!(p.specs.len(), 2);
        assert_eq!(p.specs[0].rect(), PixelRect::new(0, 0, 900, 16000));
        assert_eq!(p.specs[1].rect(), PixelRect::new(0, 4000, 900, 16000));
    }

    #[test]
    fn bad_overlap() {
        for o in [-0.1, 1.0, f64::NAN] {
            assert!(matches!(
                plan_regions("s", 10, 10, 5, o),
                Err(TilerError::InvalidOverlap(_))
            ));
        }
    }

    #[test]
    fn tissue_rule_examples() {
        let white = RgbImage::from_pixel(10, 10, Rgb([255, 255, 255]));
        assert_eq!(tissue_fraction(&white), 0.0);
        let magenta = RgbImage::from_pixel(10, 10, Rgb([180, 60, 170]));
        assert_eq!(tissue_fraction(&magenta), 1.0);
        let half = RgbImage::from_fn(10, 10, |x, _| {
            if x < 5 {
                Rgb([255, 255, 255])
            } else {
                Rgb([180, 60, 170])
            }
        });
        assert_eq!(tissue_fraction(&half), 0.5);
    }

    #[test]
    fn bright_pure_magenta_is_not_tissue() {
        // Value 1.0 fails the value bound.
        let img = RgbImage::from_pixel(4, 4, Rgb([255, 0, 255]));
        assert_eq!(tissue_fraction(&img), 0.0);
    }

    fn stained_block_slide() -> SlidePyramid {
        // 2x2 plan with region_size 100, overlap 0.05 → stride 95, W=H=195.
        let img = RgbImage::from_fn(195, 195, |x, y| {
            if x < 60 && y < 60 {
                Rgb([170, 70, 160])
            } else {
                Rgb([245, 245, 245])
            }
        });
        SlidePyramid::from_image("blk", img)
    }

    #[test]
    fn filter_keeps_only_stained_region() {
        let pyr = stained_block_slide();
        let plan = plan_regions("blk", 195, 195, 100, 0.05).unwrap();
        assert_eq!(plan.specs.len(), 4);
        let kept = filter_regions(&plan, &pyr, 0.10, TissueRule::default()).unwrap();
        assert_eq!(kept.region_ids(), vec![0]);
        assert!((kept.specs[0].tissue_fraction.unwrap() - 0.36).abs() < 1e-9);
        let again = filter_regions(&kept, &pyr, 0.10, TissueRule::default()).unwrap();
        assert_eq!(again, kept);
        let all = filter_regions(&plan, &pyr, 0.0, TissueRule::default()).unwrap();
        assert_eq!(all.specs.len(), 4);
        assert_eq!(all.specs[3].tissue_fraction, Some(0.0));
    }

    #[test]
    fn background_slide_filters_everything() {
        let pyr = SlidePyramid::from_image("bg", RgbImage::from_pixel(195, 195, Rgb([250, 250, 250])));
        let plan = plan_regions("bg", 195, 195, 100, 0.05).unwrap();
        assert!(filter_regions(&plan, &pyr, 0.10, TissueRule::default())
            .unwrap()
            .specs
            .is_empty());
    }

    #[test]
    fn overlap_band_is_identical() {
        let img = RgbImage::from_fn(195, 100, |x, y| Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, 3]));
        let pyr = SlidePyramid::from_image("o", img);
        let plan = plan_regions("o", 195, 100, 100, 0.05).unwrap();
        let a = extract_region(&pyr, &plan.specs[0]).unwrap();
        let b = extract_region(&pyr, &plan.specs[1]).unwrap();
        assert_eq!(b.origin, (95, 0));
        for y in 0..100 {
            for dx in 0..5 {
                assert_eq!(a.pixels.get_pixel(95 + dx, y), b.pixels.get_pixel(dx, y));
            }
        }
    }

    #[test]
    fn extract_out_of_bounds() {
        let pyr = SlidePyramid::from_image("o", RgbImage::new(50, 50));
        let spec = RegionSpec {
            region_id: 3,
            x: 10,
            y: 0,
            w: 50,
            h: 50,
            tissue_fraction: None,
        };
        assert!(matches!(
            extract_region(&pyr, &spec),
            Err(TilerError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let plan = plan_regions("s", 31200, 16000, 16000, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regions.jsonl");
        write_region_manifest(&plan, std::fs::File::create(&path).unwrap()).unwrap();
        let lines = read_region_manifest(&path).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].x, 15200);
        assert_eq!(lines[1].slide_id, "s");
    }
}
