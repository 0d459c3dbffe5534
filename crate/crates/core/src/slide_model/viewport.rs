use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{pyramid::read_rgb, resample, PixelRect, SlideError};

/// Default side of every view handed to the model.
pub const DEFAULT_OUT_RES: u32 = 1008;

/// Lowest magnification cap ever applied, so the fixed 1×/2×/4× grid is
/// reachable on any region.
const MIN_MAGNIFICATION_CAP: f64 = 4.0;

/// A normalized window request: center in region-relative units and a zoom
/// factor. The visible side is `1 / magnification`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub center: (f64, f64),
    pub magnification: f64,
}

impl Viewport {
    pub fn new(cx: f64, cy: f64, magnification: f64) -> Self {
        Self {
            center: (cx, cy),
            magnification,
        }
    }

    pub fn overview() -> Self {
        Self::new(0.5, 0.5, 1.0)
    }
}

/// Axis-aligned rectangle in `[0,1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormRect {
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

fn clamp_axis(center: f64, side: f64) -> (f64, f64) {
    if side >= 1.0 {
        return (0.0, 1.0);
    }
    let mut lo = center - side / 2.0;
    if lo < 0.0 {
        lo = 0.0;
    }
    if lo + side > 1.0 {
        lo = 1.0 - side;
    }
    (lo, lo + side)
}

/// Resolves a viewport to its window, sliding it inward when it would leave
/// the region. The side is never shrunk.
pub fn viewport_window(v: Viewport) -> Result<NormRect, SlideError> {
    if !v.magnification.is_finite() || v.magnification < 1.0 {
        return Err(SlideError::InvalidMagnification(v.magnification));
    }
    if !v.center.0.is_finite() || !v.center.1.is_finite() {
        return Err(SlideError::InvalidCenter(v.center));
    }
    let side = 1.0 / v.magnification;
    let (x0, x1) = clamp_axis(v.center.0, side);
    let (y0, y1) = clamp_axis(v.center.1, side);
    Ok(NormRect { x0, y0, x1, y1 })
}

/// One huge region cut from a slide, with its provenance in base coordinates.
#[derive(Debug, Clone)]
pub struct RegionImage {
    pub region_id: u32,
    pub slide_id: String,
    pub origin: (u32, u32),
    pub pixels: RgbImage,
}

/// Optional JSON sidecar for a bare region raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSidecar {
    pub region_id: u32,
    pub slide_id: String,
    pub origin: (u32, u32),
    pub size: (u32, u32),
}

impl RegionImage {
    pub fn new(region_id: u32, slide_id: impl Into<String>, origin: (u32, u32), pixels: RgbImage) -> Self {
        Self {
            region_id,
            slide_id: slide_id.into(),
            origin,
            pixels,
        }
    }

    pub fn size(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }

    /// Reads a PNG/TIFF region. A `<file>.json` sidecar, when present,
    /// supplies provenance; otherwise the region is id 0 at the origin and the
    /// slide id is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SlideError> {
        let path = path.as_ref();
        let pixels = read_rgb(path)?;
        let sidecar_path = path.with_extension("json");
        if sidecar_path.exists() {
            let text = std::fs::read_to_string(&sidecar_path).map_err(|e| SlideError::Io {
                path: sidecar_path.clone(),
                reason: e.to_string(),
            })?;
            let sc: RegionSidecar = serde_json::from_str(&text)
                .map_err(|e| SlideError::InvalidManifest(format!("{}: {e}", sidecar_path.display())))?;
            if sc.size != pixels.dimensions() {
                return Err(SlideError::DimensionMismatch {
                    downsample: 1.0,
                    expected: sc.size,
                    actual: pixels.dimensions(),
                });
            }
            return Ok(Self::new(sc.region_id, sc.slide_id, sc.origin, pixels));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::new(0, stem, (0, 0), pixels))
    }

    pub fn sidecar(&self) -> RegionSidecar {
        RegionSidecar {
            region_id: self.region_id,
            slide_id: self.slide_id.clone(),
            origin: self.origin,
            size: self.size(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampFlags {
    /// Requested magnification exceeded the cap and was lowered.
    pub magnification_capped: bool,
    /// Window was slid inward to stay inside the region.
    pub center_shifted: bool,
}

impl ClampFlags {
    pub fn any(&self) -> bool {
        self.magnification_capped || self.center_shifted
    }
}

/// A square view rendered from a region.
#[derive(Debug, Clone)]
pub struct ViewImage {
    /// Plan step this view was rendered for, if any.
    pub step_index: Option<usize>,
    pub requested: Viewport,
    /// Viewport actually rendered after capping and clamping.
    pub viewport: Viewport,
    pub pixels: RgbImage,
    pub provenance: PixelRect,
    pub clamp: ClampFlags,
}

/// Serializable description of a rendered view (no pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub step_index: Option<usize>,
    pub requested: Viewport,
    pub viewport: Viewport,
    pub provenance: PixelRect,
    pub clamp: ClampFlags,
}

impl ViewImage {
    pub fn record(&self) -> ViewRecord {
        ViewRecord {
            step_index: self.step_index,
            requested: self.requested,
            viewport: self.viewport,
            provenance: self.provenance,
            clamp: self.clamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropOptions {
    pub out_res: u32,
    /// Highest magnification rendered; `None` means
    /// `max(longer_side / out_res, 4)`.
    pub max_magnification: Option<f64>,
}

impl Default for CropOptions {
    fn default() -> Self {
        Self {
            out_res: DEFAULT_OUT_RES,
            max_magnification: None,
        }
    }
}

impl CropOptions {
    pub fn with_out_res(out_res: u32) -> Self {
        Self {
            out_res,
            ..Self::default()
        }
    }

    pub fn magnification_cap(&self, region_size: (u32, u32)) -> f64 {
        self.max_magnification.unwrap_or_else(|| {
            let longer = region_size.0.max(region_size.1) as f64;
            (longer / self.out_res as f64).max(MIN_MAGNIFICATION_CAP)
        })
    }
}

/// Converts a normalized window to whole pixels of a `w`×`h` region.
fn window_pixels(win: &NormRect, side: f64, w: u32, h: u32) -> PixelRect {
    let axis = |lo: f64, dim: u32| {
        let len = ((side * dim as f64).round() as u32).clamp(1, dim);
        let start = ((lo * dim as f64).round() as u32).min(dim - len);
        (start, len)
    };
    let (x, pw) = axis(win.x0, w);
    let (y, ph) = axis(win.y0, h);
    PixelRect::new(x, y, pw, ph)
}

/// Renders viewport `v` of `region` at `out_res`² with the default cap.
pub fn crop_viewport(region: &RegionImage, v: Viewport, out_res: u32) -> Result<ViewImage, SlideError> {
    crop_viewport_with(region, v, &CropOptions::with_out_res(out_res))
}

pub fn crop_viewport_with(region: &RegionImage, v: Viewport, opts: &CropOptions) -> Result<ViewImage, SlideError> {
    let (w, h) = region.size();
    if w == 0 || h == 0 {
        return Err(SlideError::EmptyRegion);
    }
    if opts.out_res == 0 {
        return Err(SlideError::InvalidManifest("out_res must be >= 1".into()));
    }
    // Validate the request before capping so m < 1 is still rejected.
    viewport_window(v)?;
    let cap = opts.magnification_cap((w, h)).max(1.0);
    let mut clamp = ClampFlags::default();
    let mut eff = v;
    if v.magnification > cap {
        eff.magnification = cap;
        clamp.magnification_capped = true;
        log::warn!(
            "region {}: magnification {} capped to {cap}",
            region.region_id,
            v.magnification
        );
    }
    let win = viewport_window(eff)?;
    let c = win.center();
    if (c.0 - v.center.0).abs() > 1e-12 || (c.1 - v.center.1).abs() > 1e-12 {
        clamp.center_shifted = eff.magnification > 1.0;
    }
    eff.center = c;
    let rect = window_pixels(&win, 1.0 / eff.magnification, w, h);
    let pixels = resample::resize_rect(&region.pixels, rect, opts.out_res, opts.out_res);
    Ok(ViewImage {
        step_index: None,
        requested: v,
        viewport: eff,
        pixels,
        provenance: rect,
        clamp,
    })
}

/// Viewports of the fixed 21-view decomposition: 1 at 1×, 4 at 2×, 16 at 4×,
/// each scale in row-major order.
pub fn multiscale_viewports() -> Vec<Viewport> {
    let mut out = vec![Viewport::overview()];
    for (m, n) in [(2.0, 2u32), (4.0, 4)] {
        let step = 1.0 / n as f64;
        for j in 0..n {
            for i in 0..n {
                out.push(Viewport::new(
                    step / 2.0 + step * i as f64,
                    step / 2.0 + step * j as f64,
                    m,
                ));
            }
        }
    }
    out
}

pub fn multiscale_grid(region: &RegionImage, out_res: u32) -> Result<Vec<ViewImage>, SlideError> {
    let opts = CropOptions::with_out_res(out_res);
    multiscale_viewports()
        .into_iter()
        .map(|v| crop_viewport_with(region, v, &opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn full_window_at_1x() {
        let r = viewport_window(Viewport::new(0.7, 0.2, 1.0)).unwrap();
        assert_eq!(
            r,
            NormRect {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0
            }
        );
    }

    #[test]
    fn quadrant_at_2x() {
        let r = viewport_window(Viewport::new(0.25, 0.25, 2.0)).unwrap();
        assert_eq!(
            r,
            NormRect {
                x0: 0.0,
                y0: 0.0,
                x1: 0.5,
                y1: 0.5
            }
        );
    }

    #[test]
    fn slide_inward_at_4x() {
        let r = viewport_window(Viewport::new(0.05, 0.5, 4.0)).unwrap();
        assert!(close(r.x0, 0.0) && close(r.x1, 0.25));
        assert!(close(r.y0, 0.375) && close(r.y1, 0.625));
        let c = r.center();
        assert!(close(c.0, 0.125) && close(c.1, 0.5));
    }

    #[test]
    fn magnification_below_one_rejected() {
        assert!(matches!(
            viewport_window(Viewport::new(0.5, 0.5, 0.5)),
            Err(SlideError::InvalidMagnification(_))
        ));
        assert!(matches!(
            viewport_window(Viewport::new(0.5, 0.5, f64::NAN)),
            Err(SlideError::InvalidMagnification(_))
        ));
    }

    pub(crate) fn quadrant_region(size: u32) -> RegionImage {
        let half = size / 2;
        let img = RgbImage::from_fn(size, size, |x, y| match (x < half, y < half) {
            (true, true) => Rgb([200, 30, 30]),
            (false, true) => Rgb([30, 200, 30]),
            (true, false) => Rgb([30, 30, 200]),
            (false, false) => Rgb([200, 200, 30]),
        });
        RegionImage::new(0, "q", (0, 0), img)
    }

    #[test]
    fn top_right_quadrant_is_solid() {
        let region = quadrant_region(512);
        let v = crop_viewport(&region, Viewport::new(0.75, 0.25, 2.0), 64).unwrap();
        assert_eq!(v.provenance, PixelRect::new(256, 0, 256, 256));
        assert!(v.pixels.pixels().all(|p| *p == Rgb([30, 200, 30])));
        assert!(!v.clamp.any());
    }

    #[test]
    fn native_resolution_crop_is_identity() {
        let size = 4032;
        let img = RgbImage::from_fn(size, size, |x, y| {
            Rgb([(x % 251) as u8, (y % 241) as u8, ((x + y) % 239) as u8])
        });
        let region = RegionImage::new(1, "n", (0, 0), img);
        let m = size as f64 / 1008.0;
        let v = crop_viewport(&region, Viewport::new(0.5, 0.5, m), 1008).unwrap();
        assert_eq!((v.provenance.w, v.provenance.h), (1008, 1008));
        let direct = image::imageops::crop_imm(&region.pixels, v.provenance.x, v.provenance.y, 1008, 1008).to_image();
        assert_eq!(v.pixels, direct);
    }

    #[test]
    fn out_of_range_center_is_clamped_and_flagged() {
        let region = quadrant_region(256);
        let v = crop_viewport(&region, Viewport::new(1.2, 0.5, 4.0), 32).unwrap();
        assert!(v.clamp.center_shifted);
        assert!(close(v.viewport.center.0, 0.875));
        assert_eq!(v.provenance, PixelRect::new(192, 96, 64, 64));
    }

    #[test]
    fn magnification_above_cap_is_lowered() {
        let region = quadrant_region(256);
        let opts = CropOptions {
            out_res: 32,
            max_magnification: Some(5.0),
        };
        let v = crop_viewport_with(&region, Viewport::new(0.5, 0.5, 12.0), &opts).unwrap();
        assert!(v.clamp.magnification_capped);
        assert_eq!(v.viewport.magnification, 5.0);
    }

    #[test]
    fn grid_has_21_views_in_order() {
        let vps = multiscale_viewports();
        let mags: Vec<f64> = vps.iter().map(|v| v.magnification).collect();
        let mut expected = vec![1.0];
        expected.extend([2.0; 4]);
        expected.extend([4.0; 16]);
        assert_eq!(mags, expected);
        assert_eq!(vps[2].center, (0.75, 0.25));
        assert_eq!(vps[3].center, (0.25, 0.75));
        assert_eq!(vps[5 + 4 + 1].center, (0.375, 0.375));
    }

    #[test]
    fn grid_quadrants_are_solid_colors() {
        let region = quadrant_region(256);
        let views = multiscale_grid(&region, 16).unwrap();
        let colors: Vec<Rgb<u8>> = views[1..5].iter().map(|v| *v.pixels.get_pixel(8, 8)).collect();
        assert_eq!(
            colors,
            vec![
                Rgb([200, 30, 30]),
                Rgb([30, 200, 30]),
                Rgb([30, 30, 200]),
                Rgb([200, 200, 30])
            ]
        );
        for v in &views[1..5] {
            let c = *v.pixels.get_pixel(0, 0);
            assert!(v.pixels.pixels().all(|p| *p == c));
        }
    }
}
