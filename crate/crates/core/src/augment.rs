//! Attention-guided training augmentations: probabilistic erasing of
//! high-attention pixels and attention-driven cropping.
//!
//! Both operators threshold on attention normalized by the map maximum, so
//! the same threshold works across images regardless of rollout depth.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, ResizeFilter};
use crate::localize::BoundingBox;
use crate::rollout::AttentionMap;

/// Replacement value for erased pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillMode {
    Zero,
    /// Mean of each channel of the *input* image (less distribution shift).
    #[default]
    PerChannelMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Probability that erasing happens at all (one draw per image).
    pub erase_probability: f64,
    /// Pixels with `value / max > erase_threshold` are erased.
    pub erase_threshold: f64,
    /// Pixels with `value / max > crop_threshold` seed the crop box.
    pub crop_threshold: f64,
    /// Box padding per side, as a fraction of the box side on that axis.
    pub crop_padding: f64,
    pub fill: FillMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            erase_probability: 0.3,
            erase_threshold: 0.5,
            crop_threshold: 0.35,
            crop_padding: 0.1,
            fill: FillMode::PerChannelMean,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.erase_probability) {
            return Err(Error::Config(format!(
                "erase_probability must be in [0, 1], got {}",
                self.erase_probability
            )));
        }
        for (name, t) in [
            ("erase_threshold", self.erase_threshold),
            ("crop_threshold", self.crop_threshold),
        ] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.crop_padding) {
            return Err(Error::Config(format!(
                "crop_padding must be in [0, 1], got {}",
                self.crop_padding
            )));
        }
        Ok(())
    }
}

/// What `attention_erase` did, for reproducibility audits.
#[derive(Debug, Clone, PartialEq)]
pub struct EraseOutcome {
    pub image: Image,
    /// Whether the per-image Bernoulli draw fired.
    pub fired: bool,
    /// Pixels actually replaced (0 when the draw missed, no pixel exceeded
    /// the threshold, or the map was all-zero).
    pub pixels_erased: usize,
}

fn check_dims(image: &Image, map: &AttentionMap) -> Result<()> {
    if (image.height(), image.width()) != (map.height(), map.width()) {
        return Err(Error::Shape(format!(
            "map {}x{} does not match image {}x{}",
            map.height(),
            map.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// With probability P, replace every pixel whose normalized attention
/// exceeds the threshold with the fill value; otherwise return the image
/// untouched. The Bernoulli draw is consumed from `rng` on every call so
/// batch streams stay aligned regardless of outcomes.
pub fn attention_erase<R: Rng>(
    image: &Image,
    map: &AttentionMap,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<EraseOutcome> {
    config.validate()?;
    check_dims(image, map)?;
    let fired = rng.random::<f64>() < config.erase_probability;
    let max = map.max();
    if !fired || max == 0.0 {
        return Ok(EraseOutcome {
            image: image.clone(),
            fired,
            pixels_erased: 0,
        });
    }
    let fill: Vec<f64> = match config.fill {
        FillMode::Zero => vec![0.0; image.channels()],
        FillMode::PerChannelMean => image.channel_means(),
    };
    let mut out = image.clone();
    let mut erased = 0;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if map.values[(y, x)] / max > config.erase_threshold {
                erased += 1;
                for (c, &v) in fill.iter().enumerate() {
                    out.data_mut()[(y, x, c)] = v;
                }
            }
        }
    }
    Ok(EraseOutcome {
        image: out,
        fired: true,
        pixels_erased: erased,
    })
}

/// Tight box of pixels with normalized attention above `crop_threshold`,
/// padded by `crop_padding` of the box side per side and clamped to the
/// frame. `None` when no pixel qualifies (uniform or all-zero maps).
pub fn attention_crop_box(map: &AttentionMap, config: &AugmentConfig) -> Result<Option<BoundingBox>> {
    config.validate()?;
    let max = map.max();
    if max == 0.0 {
        return Ok(None);
    }
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for ((y, x), &v) in map.values.indexed_iter() {
        if v / max > config.crop_threshold {
            any = true;
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y + 1);
            x1 = x1.max(x + 1);
        }
    }
    if !any {
        return Ok(None);
    }
    let pad_y = (config.crop_padding * (y1 - y0) as f64).round() as usize;
    let pad_x = (config.crop_padding * (x1 - x0) as f64).round() as usize;
    let bbox = BoundingBox::new(
        x0.saturating_sub(pad_x),
        y0.saturating_sub(pad_y),
        (x1 + pad_x).min(map.width()),
        (y1 + pad_y).min(map.height()),
    )?;
    Ok(Some(bbox))
}

/// Crop the high-attention region and resize it back to the input's own
/// dimensions. Falls back to the full frame (an unchanged image) when no
/// pixel clears the threshold.
pub fn attention_crop(image: &Image, map: &AttentionMap, config: &AugmentConfig) -> Result<Image> {
    check_dims(image, map)?;
    match attention_crop_box(map, config)? {
        None => Ok(image.clone()),
        Some(bbox) => {
            let crop = image.crop(bbox.x0, bbox.y0, bbox.x1, bbox.y1)?;
            crop.resize(image.height(), image.width(), ResizeFilter::Bilinear)
        }
    }
}
