//! Float images in `[0, 1]` with the resampling used throughout the pipeline.
//!
//! Pixels are stored as `(height, width, channels)` in row-major order.
//! Resizing is plain bilinear interpolation with corner alignment off
//! (an output pixel center maps to `(i + 0.5) * in/out - 0.5` in input
//! coordinates), so a same-size resize is an exact copy and interpolated
//! values never leave the input's range.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Interpolation used when resampling images and attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeFilter {
    Bilinear,
    Nearest,
}

/// A floating-point image, `(H, W, C)`, values expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("empty image {h}x{w}x{c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("image contains non-finite pixels".into()));
        }
        Ok(Image { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            data: Array3::zeros((height, width, channels)),
        }
    }

    /// Wrap a single-channel plane as a grayscale image.
    pub fn from_plane(plane: Array2<f64>) -> Result<Self> {
        let (h, w) = plane.dim();
        let data = plane
            .into_shape_with_order((h, w, 1))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Image::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Mean value of each channel over the whole frame.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.height() * self.width()) as f64;
        (0..self.channels())
            .map(|c| self.data.index_axis(Axis(2), c).sum() / n)
            .collect()
    }

    /// Average the channels into one plane.
    pub fn to_gray(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        let mut out = Array2::zeros((h, w));
        for ch in 0..c {
            out += &self.data.index_axis(Axis(2), ch);
        }
        out / c as f64
    }

    /// Extract the half-open pixel rectangle `[y0, y1) x [x0, x1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width() || y1 > self.height() {
            return Err(Error::Shape(format!(
                "crop ({x0},{y0})..({x1},{y1}) outside {}x{} frame",
                self.width(),
                self.height()
            )));
        }
        let view = self.data.slice(ndarray::s![y0..y1, x0..x1, ..]);
        Ok(Image {
            data: view.to_owned(),
        })
    }

    /// Resample to `height x width` with the given filter.
    pub fn resize(&self, height: usize, width: usize, filter: ResizeFilter) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::Config("resize target has a zero dimension".into()));
        }
        let (h, w, c) = self.data.dim();
        let mut out = Array3::zeros((height, width, c));
        for ch in 0..c {
            let plane = resize_plane(self.data.index_axis(Axis(2), ch), height, width, filter);
            out.index_axis_mut(Axis(2), ch).assign(&plane);
        }
        let _ = (h, w);
        Ok(Image { data: out })
    }
}

/// Resample one scalar plane. Shared by images and attention maps.
pub fn resize_plane(
    src: ArrayView2<'_, f64>,
    out_h: usize,
    out_w: usize,
    filter: ResizeFilter,
) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            out[(oy, ox)] = match filter {
                ResizeFilter::Bilinear => sample_bilinear(src, fy, fx),
                ResizeFilter::Nearest => {
                    let y = (fy + 0.5).floor().clamp(0.0, (in_h - 1) as f64) as usize;
                    let x = (fx + 0.5).floor().clamp(0.0, (in_w - 1) as f64) as usize;
                    src[(y, x)]
                }
            };
        }
    }
    out
}

fn sample_bilinear(src: ArrayView2<'_, f64>, fy: f64, fx: f64) -> f64 {
    let (in_h, in_w) = src.dim();
    let fy = fy.clamp(0.0, (in_h - 1) as f64);
    let fx = fx.clamp(0.0, (in_w - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(in_h - 1);
    let x1 = (x0 + 1).min(in_w - 1);
    let ty = fy - y0 as f64;
    let tx = fx - x0 as f64;
    let top = src[(y0, x0)] * (1.0 - tx) + src[(y0, x1)] * tx;
    let bottom = src[(y1, x0)] * (1.0 - tx) + src[(y1, x1)] * tx;
    top * (1.0 - ty) + bottom * ty
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn same_size_resize_is_identity() {
        let img = Image::from_plane(array![[0.1, 0.5], [0.9, 0.3]]).unwrap();
        let out = img.resize(2, 2, ResizeFilter::Bilinear).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn constant_plane_stays_constant() {
        let src = Array2::from_elem((3, 3), 0.42);
        let out = resize_plane(src.view(), 7, 5, ResizeFilter::Bilinear);
        assert!(out.iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_ramp_upsamples_to_known_values() {
        // Hand evaluation of the sampling formula at each output center:
        // scale 0.5, centers map to -0.25, 0.25, 0.75, 1.25 (clamped at ends).
        let src = array![[0.0, 1.0], [0.0, 1.0]];
        let out = resize_plane(src.view(), 2, 4, ResizeFilter::Bilinear);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for row in 0..2 {
            for col in 0..4 {
                assert!(
                    (out[(row, col)] - expect[col]).abs() < 1e-12,
                    "row {row} col {col}: {}",
                    out[(row, col)]
                );
            }
        }
    }

    #[test]
    fn resize_stays_within_input_range() {
        let src = array![[0.0, 0.3, 1.0], [0.2, 0.8, 0.4], [0.9, 0.1, 0.6]];
        let out = resize_plane(src.view(), 10, 13, ResizeFilter::Bilinear);
        for &v in out.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn crop_rejects_out_of_frame() {
        let img = Image::zeros(4, 4, 1);
        assert!(img.crop(0, 0, 5, 2).is_err());
        assert!(img.crop(2, 2, 2, 3).is_err());
    }

    #[test]
    fn channel_means_match_direct_sum() {
        let mut img = Image::zeros(2, 2, 2);
        img.data_mut()[(0, 0, 0)] = 1.0;
        img.data_mut()[(1, 1, 1)] = 0.5;
        let means = img.channel_means();
        assert!((means[0] - 0.25).abs() < 1e-12);
        assert!((means[1] - 0.125).abs() < 1e-12);
    }
}
