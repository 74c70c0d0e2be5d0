//! Heatmap colorization and overlay rendering for qualitative inspection:
//! attention maps become a blue-to-red ramp blended over the input image,
//! with detected boxes drawn as red borders.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::localize::BoundingBox;
use crate::rollout::AttentionMap;

/// Ramp anchors at t = 0, 0.25, 0.5, 0.75, 1 (dark blue through red),
/// linearly interpolated in between. Values are 8-bit RGB.
const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 128.0],
    [0.0, 128.0, 255.0],
    [0.0, 255.0, 128.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Interpolate the color ramp at `t` in `[0, 1]`; returns unit-interval RGB.
pub fn ramp_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let scaled = t * 4.0;
    let idx = (scaled.floor() as usize).min(3);
    let frac = scaled - idx as f64;
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        *out = (RAMP[idx][ch] + frac * (RAMP[idx + 1][ch] - RAMP[idx][ch])) / 255.0;
    }
    rgb
}

/// Render an attention map as a false-color image. The map is min-max
/// normalized first; a constant map (including all-zero) renders as the
/// ramp origin, uniform dark blue.
pub fn colorize(map: &AttentionMap) -> Image {
    let (h, w) = (map.height(), map.width());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let t = if span > 0.0 { (map.values[[y, x]] - lo) / span } else { 0.0 };
            let rgb = ramp_color(t);
            for ch in 0..3 {
                out.data_mut()[[y, x, ch]] = rgb[ch];
            }
        }
    }
    out
}

const BORDER: usize = 2;

fn draw_box(image: &mut Image, bbox: &BoundingBox) {
    let (h, w) = (image.height(), image.width());
    let paint = |img: &mut Image, y: usize, x: usize| {
        img.data_mut()[[y, x, 0]] = 1.0;
        img.data_mut()[[y, x, 1]] = 0.0;
        img.data_mut()[[y, x, 2]] = 0.0;
    };
    let y0 = bbox.y0.min(h);
    let y1 = bbox.y1.min(h);
    let x0 = bbox.x0.min(w);
    let x1 = bbox.x1.min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let near_h = y < y0 + BORDER || y + BORDER > y1;
            let near_v = x < x0 + BORDER || x + BORDER > x1;
            if near_h || near_v {
                paint(image, y, x);
            }
        }
    }
}

/// Blend a heatmap over an image at 50% opacity and draw boxes on top.
/// The map must match the image dimensions (upsample it first if needed);
/// grayscale images are replicated to RGB before blending.
pub fn render_overlay(image: &Image, map: &AttentionMap, boxes: &[BoundingBox]) -> Result<Image> {
    if map.height() != image.height() || map.width() != image.width() {
        return Err(Error::Shape(format!(
            "overlay: map is {}x{} but image is {}x{}",
            map.height(),
            map.width(),
            image.height(),
            image.width()
        )));
    }
    let heat = colorize(map);
    let (h, w) = (image.height(), image.width());
    let mut out = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let src = if image.channels() == 3 { ch } else { 0 };
                let base = image.data()[[y, x, src]];
                out.data_mut()[[y, x, ch]] = 0.5 * base + 0.5 * heat.data()[[y, x, ch]];
            }
        }
    }
    for bbox in boxes {
        draw_box(&mut out, bbox);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{MapProvenance, MapSpace};
    use crate::synth::random_map;
    use ndarray::Array2;

    fn map_from(values: Array2<f64>) -> AttentionMap {
        AttentionMap::new(values, MapSpace::Pixel, MapProvenance::FullImage).unwrap()
    }

    #[test]
    fn ramp_hits_all_anchor_colors() {
        assert_eq!(ramp_color(0.0), [0.0, 0.0, 128.0 / 255.0]);
        assert_eq!(ramp_color(0.25), [0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(ramp_color(0.5), [0.0, 1.0, 128.0 / 255.0]);
        assert_eq!(ramp_color(0.75), [1.0, 1.0, 0.0]);
        assert_eq!(ramp_color(1.0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ramp_interpolates_between_anchors() {
        let mid = ramp_color(0.125);
        assert_eq!(mid, [0.0, 64.0 / 255.0, 191.5 / 255.0]);
    }

    #[test]
    fn zero_map_renders_uniform_dark_blue() {
        let heat = colorize(&map_from(Array2::zeros((4, 4))));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(heat.data()[[y, x, 0]], 0.0);
                assert_eq!(heat.data()[[y, x, 1]], 0.0);
                assert_eq!(heat.data()[[y, x, 2]], 128.0 / 255.0);
            }
        }
    }

    #[test]
    fn argmax_pixel_gets_terminal_ramp_color() {
        let map = random_map(6, 6, 17);
        let (ay, ax) = map.argmax();
        let heat = colorize(&map);
        assert_eq!(heat.data()[[ay, ax, 0]], 1.0);
        assert_eq!(heat.data()[[ay, ax, 1]], 0.0);
        assert_eq!(heat.data()[[ay, ax, 2]], 0.0);
    }

    #[test]
    fn overlay_blends_and_draws_border() {
        let image = Image::zeros(10, 10, 3);
        let map = map_from(Array2::zeros((10, 10)));
        let bbox = BoundingBox::new(2, 2, 8, 8).unwrap();
        let out = render_overlay(&image, &map, &[bbox]).unwrap();
        // Border pixel is pure red despite the blend.
        assert_eq!(out.data()[[2, 2, 0]], 1.0);
        assert_eq!(out.data()[[2, 2, 2]], 0.0);
        // The box interior keeps the blended background.
        assert_eq!(out.data()[[5, 5, 2]], 0.5 * 128.0 / 255.0);
        // Outside the box: blend of black image and dark blue heat.
        assert_eq!(out.data()[[0, 0, 2]], 0.5 * 128.0 / 255.0);
        assert_eq!(out.data()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn grayscale_input_is_replicated_before_blending() {
        let mut image = Image::zeros(4, 4, 1);
        image.data_mut()[[1, 1, 0]] = 1.0;
        let map = map_from(Array2::zeros((4, 4)));
        let out = render_overlay(&image, &map, &[]).unwrap();
        assert_eq!(out.channels(), 3);
        assert_eq!(out.data()[[1, 1, 0]], 0.5);
        assert_eq!(out.data()[[1, 1, 1]], 0.5);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let image = Image::zeros(4, 4, 3);
        let map = map_from(Array2::zeros((3, 4)));
        assert!(render_overlay(&image, &map, &[]).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let image = crate::synth::noise_image(8, 8, 3, 2);
        let map = random_map(8, 8, 3);
        let bbox = BoundingBox::new(1, 1, 5, 6).unwrap();
        let a = render_overlay(&image, &map, &[bbox]).unwrap();
        let b = render_overlay(&image, &map, &[bbox]).unwrap();
        assert_eq!(a, b);
    }
}
