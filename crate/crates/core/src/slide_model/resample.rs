//! Deterministic separable resampling.
//!
//! Each axis is handled independently: an axis that shrinks uses exact
//! area averaging (box filter with fractional pixel coverage), an axis that
//! grows uses bilinear interpolation with pixel-center alignment, and an axis
//! that keeps its size is copied verbatim. Results are rounded half-up to u8.

use std::collections::VecDeque;

use image::RgbImage;

use super::PixelRect;

/// One destination sample along an axis: `(source index, weight)` pairs.
type Taps = Vec<(u32, f32)>;

fn axis_taps(src: u32, dst: u32) -> Vec<Taps> {
    debug_assert!(src > 0 && dst > 0);
    if src == dst {
        return (0..dst).map(|j| vec![(j, 1.0)]).collect();
    }
    if dst < src {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|j| {
                let lo = j as f64 * scale;
                let hi = ((j + 1) as f64 * scale).min(src as f64);
                let first = lo.floor() as u32;
                let last = (hi.ceil() as u32).min(src);
                let mut taps = Vec::with_capacity((last - first) as usize);
                for i in first..last {
                    let cover = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    if cover > 0.0 {
                        taps.push((i, (cover / scale) as f32));
                    }
                }
                taps
            })
            .collect()
    } else {
        let scale = src as f64 / dst as f64;
        let max = (src - 1) as f64;
        (0..dst)
            .map(|j| {
                let x = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let i0 = x.floor();
                let frac = (x - i0) as f32;
                let i0 = i0 as u32;
                let i1 = (i0 + 1).min(src - 1);
                if frac == 0.0 || i1 == i0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            })
            .collect()
    }
}

fn horizontal_row(src: &RgbImage, rect: PixelRect, row: u32, taps: &[Taps]) -> Vec<f32> {
    let stride = src.width() as usize * 3;
    let base = (rect.y + row) as usize * stride + rect.x as usize * 3;
    let raw = src.as_raw();
    let mut out = Vec::with_capacity(taps.len() * 3);
    for t in taps {
        let mut acc = [0f32; 3];
        for &(i, w) in t {
            let p = base + i as usize * 3;
            acc[0] += raw[p] as f32 * w;
            acc[1] += raw[p + 1] as f32 * w;
            acc[2] += raw[p + 2] as f32 * w;
        }
        out.extend_from_slice(&acc);
    }
    out
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Resamples the sub-rectangle `rect` of `src` to `dst_w`×`dst_h`.
///
/// Only pixels inside `rect` are read.
pub fn resize_rect(src: &RgbImage, rect: PixelRect, dst_w: u32, dst_h: u32) -> RgbImage {
    assert!(rect.w > 0 && rect.h > 0 && dst_w > 0 && dst_h > 0, "empty resample");
    assert!(
        rect.x + rect.w <= src.width() && rect.y + rect.h <= src.height(),
        "resample rect outside source"
    );
    let htaps = axis_taps(rect.w, dst_w);
    let vtaps = axis_taps(rect.h, dst_h);
    let mut out = RgbImage::new(dst_w, dst_h);
    let mut cache: VecDeque<(u32, Vec<f32>)> = VecDeque::new();
    let row_len = dst_w as usize * 3;
    let mut acc = vec![0f32; row_len];
    let out_raw: &mut [u8] = &mut out;
    for (dy, taps) in vtaps.iter().enumerate() {
        let first = taps[0].0;
        while cache.front().is_some_and(|(r, _)| *r < first) {
            cache.pop_front();
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(r, w) in taps {
            if !cache.iter().any(|(cr, _)| *cr == r) {
                cache.push_back((r, horizontal_row(src, rect, r, &htaps)));
            }
            let (_, row) = cache.iter().find(|(cr, _)| *cr == r).expect("cached row");
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v * w;
            }
        }
        let dst = &mut out_raw[dy * row_len..(dy + 1) * row_len];
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = to_u8(*a);
        }
    }
    out
}

/// Resamples a whole image.
pub fn resize(src: &RgbImage, dst_w: u32, dst_h: u32) -> RgbImage {
    resize_rect(src, PixelRect::new(0, 0, src.width(), src.height()), dst_w, dst_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn identity_is_exact() {
        let img = RgbImage::from_fn(13, 7, |x, y| Rgb([(x * 17) as u8, (y * 31) as u8, (x ^ y) as u8]));
        assert_eq!(resize(&img, 13, 7), img);
    }

    #[test]
    fn integer_shrink_is_block_mean() {
        let img = RgbImage::from_fn(4, 2, |x, _| {
            if x % 2 == 0 {
                Rgb([10, 20, 30])
            } else {
                Rgb([20, 40, 60])
            }
        });
        let out = resize(&img, 2, 1);
        assert_eq!(out.get_pixel(0, 0), &Rgb([15, 30, 45]));
        assert_eq!(out.get_pixel(1, 0), &Rgb([15, 30, 45]));
    }

    #[test]
    fn fractional_shrink_weights_sum_to_one() {
        for (s, d) in [(16000u32, 1008u32), (1250, 1008), (7, 3), (1025, 1008)] {
            for t in axis_taps(s, d) {
                let sum: f32 = t.iter().map(|(_, w)| w).sum();
                assert!((sum - 1.0).abs() < 1e-5, "{s}->{d}: {sum}");
            }
        }
    }

    #[test]
    fn enlarge_constant_stays_constant() {
        let img = RgbImage::from_pixel(3, 5, Rgb([201, 7, 99]));
        let out = resize(&img, 40, 17);
        assert!(out.pixels().all(|p| *p == Rgb([201, 7, 99])));
    }

    #[test]
    fn rect_reads_only_inside() {
        let mut img = RgbImage::from_pixel(20, 20, Rgb([0, 0, 0]));
        for y in 5..15 {
            for x in 5..15 {
                img.put_pixel(x, y, Rgb([50, 60, 70]));
            }
        }
        let out = resize_rect(&img, PixelRect::new(5, 5, 10, 10), 3, 3);
        assert!(out.pixels().all(|p| *p == Rgb([50, 60, 70])));
    }
}
