//! Reading and writing images as PNG or binary PPM. In-memory images hold
//! float pixels in `[0, 1]`; files hold 8-bit samples, quantized with
//! round-to-nearest on save and divided by 255 on load.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Map a unit-interval float to an 8-bit sample.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Map an 8-bit sample back to a unit-interval float.
pub fn dequantize(b: u8) -> f64 {
    f64::from(b) / 255.0
}

fn rgb_bytes(image: &Image) -> Result<Vec<u8>> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if c != 1 && c != 3 {
        return Err(Error::Validation(format!(
            "can only save 1- or 3-channel images, got {c} channels"
        )));
    }
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let src = if c == 1 { 0 } else { ch };
                bytes.push(quantize(image.data()[[y, x, src]]));
            }
        }
    }
    Ok(bytes)
}

fn save_ppm(path: &Path, image: &Image) -> Result<()> {
    let bytes = rgb_bytes(image)?;
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", image.width(), image.height())?;
    file.write_all(&bytes)?;
    Ok(())
}

fn load_ppm(path: &Path) -> Result<Image> {
    let raw = fs::read(path)?;
    // Header: "P6", whitespace-separated width, height, maxval, then one
    // whitespace byte before the sample data.
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    if fields.len() < 4 || fields[0] != "P6" {
        return Err(Error::Validation(format!("{}: not a binary PPM", path.display())));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Validation(format!("{}: bad PPM header", path.display())))
    };
    let w = parse(&fields[1])?;
    let h = parse(&fields[2])?;
    let maxval = parse(&fields[3])?;
    if maxval != 255 {
        return Err(Error::Validation(format!(
            "{}: only maxval 255 is supported, got {maxval}",
            path.display()
        )));
    }
    pos += 1; // single whitespace byte after maxval
    let need = h * w * 3;
    if raw.len() < pos + need {
        return Err(Error::Truncated { expected: pos + need, found: raw.len() });
    }
    let mut image = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                image.data_mut()[[y, x, ch]] = dequantize(raw[pos + (y * w + x) * 3 + ch]);
            }
        }
    }
    Ok(image)
}

fn save_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let as_io = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Validation(format!("{}: {other}", path.display())),
    };
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (x, y, px) in buf.enumerate_pixels_mut() {
                px.0 = [quantize(image.data()[[y as usize, x as usize, 0]])];
            }
            buf.save_with_format(path, image::ImageFormat::Png).map_err(as_io)
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, px) in buf.enumerate_pixels_mut() {
                for ch in 0..3 {
                    px.0[ch] = quantize(image.data()[[y as usize, x as usize, ch]]);
                }
            }
            buf.save_with_format(path, image::ImageFormat::Png).map_err(as_io)
        }
        other => Err(Error::Validation(format!(
            "can only save 1- or 3-channel images, got {other} channels"
        ))),
    }
}

fn load_png(path: &Path) -> Result<Image> {
    let reader = image::ImageReader::open(path)?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Validation(format!("{}: {other}", path.display())),
    })?;
    match decoded {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            let mut out = Image::zeros(h as usize, w as usize, 1);
            for (x, y, px) in gray.enumerate_pixels() {
                out.data_mut()[[y as usize, x as usize, 0]] = dequantize(px.0[0]);
            }
            Ok(out)
        }
        other => {
            let rgb = other.into_rgb8();
            let (w, h) = rgb.dimensions();
            let mut out = Image::zeros(h as usize, w as usize, 3);
            for (x, y, px) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    out.data_mut()[[y as usize, x as usize, ch]] = dequantize(px.0[ch]);
                }
            }
            Ok(out)
        }
    }
}

/// Save an image, choosing the format from the file extension
/// (`.png` or `.ppm`).
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => save_png(path, image),
        Some("ppm") => save_ppm(path, image),
        _ => Err(Error::Validation(format!(
            "{}: unsupported image extension (use .png or .ppm)",
            path.display()
        ))),
    }
}

/// Load an image, choosing the format from the file extension.
pub fn load_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_png(path),
        Some("ppm") => load_ppm(path),
        _ => Err(Error::Validation(format!(
            "{}: unsupported image extension (use .png or .ppm)",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::noise_image;

    #[test]
    fn quantize_endpoints_and_rounding() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 rounds away from zero
        assert!((dequantize(quantize(0.4)) - 0.4).abs() < 0.5 / 255.0);
    }

    #[test]
    fn ppm_roundtrip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let image = noise_image(9, 7, 3, 11);
        save_ppm(&path, &image).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back.height(), 9);
        assert_eq!(back.width(), 7);
        for (a, b) in image.data().iter().zip(back.data().iter()) {
            assert_eq!(quantize(*a), quantize(*b));
        }
        // A second save/load cycle is bitwise stable.
        let path2 = dir.path().join("img2.ppm");
        save_ppm(&path2, &back).unwrap();
        assert_eq!(load_ppm(&path2).unwrap(), back);
    }

    #[test]
    fn png_roundtrip_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let image = noise_image(8, 12, 3, 5);
        save_image(&path, &image).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in image.data().iter().zip(back.data().iter()) {
            assert_eq!(quantize(*a), quantize(*b));
        }
    }

    #[test]
    fn png_roundtrip_grayscale_stays_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let image = noise_image(6, 6, 1, 3);
        save_image(&path, &image).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.channels(), 1);
        for (a, b) in image.data().iter().zip(back.data().iter()) {
            assert_eq!(quantize(*a), quantize(*b));
        }
    }

    #[test]
    fn grayscale_ppm_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.ppm");
        let image = noise_image(4, 4, 1, 9);
        save_image(&path, &image).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for y in 0..4 {
            for x in 0..4 {
                let v = back.data()[[y, x, 0]];
                assert_eq!(back.data()[[y, x, 1]], v);
                assert_eq!(back.data()[[y, x, 2]], v);
            }
        }
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let image = noise_image(2, 2, 3, 0);
        assert!(save_image(Path::new("/tmp/x.bmp"), &image).is_err());
        assert!(load_image(Path::new("/tmp/x.jpeg")).is_err());
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\nabc").unwrap();
        assert!(matches!(load_ppm(&path).unwrap_err(), Error::Truncated { .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image(Path::new("/nonexistent/missing.png")).unwrap_err();
        assert!(err.is_io());
    }
}
