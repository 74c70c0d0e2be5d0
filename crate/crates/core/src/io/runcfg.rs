//! Flat `key=value` run configuration covering the encoder, rollout,
//! localization, scoring, augmentation, and pipeline options. Lines starting
//! with `#` and blank lines are ignored; unknown and duplicate keys are
//! rejected.

use std::fs;
use std::path::Path;

use crate::augment::FillMode;
use crate::error::{Error, Result};
use crate::localize::{ComponentSelect, Connectivity};
use crate::pipeline::{PartMapSource, PipelineConfig};
use crate::regions::{PoolMode, RatioMode};
use crate::rollout::HeadFusion;

/// Default GeM exponent used when `scoring.pooling=gem` is selected.
pub const DEFAULT_GEM_P: f64 = 3.0;

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
}

/// Parse configuration text into a `PipelineConfig`, starting from defaults.
pub fn parse_run_config(text: &str) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    let mut gem_p = DEFAULT_GEM_P;
    let mut pooling = String::from("avg");
    let mut seen: Vec<String> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(Error::Config(format!("duplicate key {key}")));
        }
        seen.push(key.to_string());

        match key {
            "encoder.image_side" => config.encoder.image_side = parse_usize(key, value)?,
            "encoder.patch_side" => config.encoder.patch_side = parse_usize(key, value)?,
            "encoder.channels" => config.encoder.channels = parse_usize(key, value)?,
            "encoder.n_layers" => config.encoder.n_layers = parse_usize(key, value)?,
            "encoder.n_heads" => config.encoder.n_heads = parse_usize(key, value)?,
            "encoder.embed_dim" => config.encoder.embed_dim = parse_usize(key, value)?,
            "encoder.mlp_hidden" => config.encoder.mlp_hidden = parse_usize(key, value)?,
            "encoder.n_classes" => config.encoder.n_classes = parse_usize(key, value)?,
            "rollout.fusion" => {
                config.rollout.fusion = match value {
                    "mean" => HeadFusion::Mean,
                    "max" => HeadFusion::Max,
                    "min" => HeadFusion::Min,
                    _ => return Err(Error::Config(format!("{key}: unknown fusion {value:?}"))),
                }
            }
            "localize.close_radius" => config.localize.close_radius = parse_usize(key, value)?,
            "localize.connectivity" => {
                config.localize.connectivity = match value {
                    "4" => Connectivity::Four,
                    "8" => Connectivity::Eight,
                    _ => return Err(Error::Config(format!("{key}: expected 4 or 8, got {value:?}"))),
                }
            }
            "localize.select" => {
                config.localize.select = match value {
                    "max-pixel" => ComponentSelect::MaxPixel,
                    "max-mean" => ComponentSelect::MaxMean,
                    _ => return Err(Error::Config(format!("{key}: unknown selector {value:?}"))),
                }
            }
            "scoring.kernel_ratio" => config.scoring.kernel_ratio = parse_f64(key, value)?,
            "scoring.ratio_mode" => {
                config.scoring.ratio_mode = match value {
                    "linear" => RatioMode::Linear,
                    "area" => RatioMode::Area,
                    _ => return Err(Error::Config(format!("{key}: unknown mode {value:?}"))),
                }
            }
            "scoring.kernel_snap" => {
                config.scoring.kernel_snap = match value {
                    "none" => None,
                    _ => Some(parse_usize(key, value)?),
                }
            }
            "scoring.stride" => config.scoring.stride = parse_usize(key, value)?,
            "scoring.pooling" => {
                if !matches!(value, "avg" | "gem" | "max") {
                    return Err(Error::Config(format!("{key}: unknown pooling {value:?}")));
                }
                pooling = value.to_string();
            }
            "scoring.gem_p" => gem_p = parse_f64(key, value)?,
            "scoring.top_k" => config.scoring.top_k = parse_usize(key, value)?,
            "scoring.iou_threshold" => config.scoring.iou_threshold = parse_f64(key, value)?,
            "augment.erase_probability" => {
                config.augment.erase_probability = parse_f64(key, value)?
            }
            "augment.erase_threshold" => config.augment.erase_threshold = parse_f64(key, value)?,
            "augment.crop_threshold" => config.augment.crop_threshold = parse_f64(key, value)?,
            "augment.crop_padding" => config.augment.crop_padding = parse_f64(key, value)?,
            "augment.fill" => {
                config.augment.fill = match value {
                    "zero" => FillMode::Zero,
                    "mean" => FillMode::PerChannelMean,
                    _ => return Err(Error::Config(format!("{key}: unknown fill {value:?}"))),
                }
            }
            "pipeline.part_source" => {
                config.part_source = match value {
                    "stage-a-crop" => PartMapSource::StageACrop,
                    "stage-b" => PartMapSource::StageB,
                    _ => return Err(Error::Config(format!("{key}: unknown source {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
    }

    config.scoring.pooling = match pooling.as_str() {
        "avg" => PoolMode::Average,
        "gem" => PoolMode::Gem { p: gem_p },
        "max" => PoolMode::Max,
        _ => unreachable!("validated above"),
    };
    config.encoder.validate()?;
    config.scoring.validate()?;
    config.augment.validate()?;
    Ok(config)
}

/// Write a config back out in the same flat format, all keys present.
pub fn render_run_config(config: &PipelineConfig) -> String {
    let (pooling, gem_p) = match config.scoring.pooling {
        PoolMode::Average => ("avg", DEFAULT_GEM_P),
        PoolMode::Gem { p } => ("gem", p),
        PoolMode::Max => ("max", DEFAULT_GEM_P),
    };
    let fusion = match config.rollout.fusion {
        HeadFusion::Mean => "mean",
        HeadFusion::Max => "max",
        HeadFusion::Min => "min",
    };
    let connectivity = match config.localize.connectivity {
        Connectivity::Four => "4",
        Connectivity::Eight => "8",
    };
    let select = match config.localize.select {
        ComponentSelect::MaxPixel => "max-pixel",
        ComponentSelect::MaxMean => "max-mean",
    };
    let ratio_mode = match config.scoring.ratio_mode {
        RatioMode::Linear => "linear",
        RatioMode::Area => "area",
    };
    let snap = match config.scoring.kernel_snap {
        None => "none".to_string(),
        Some(m) => m.to_string(),
    };
    let fill = match config.augment.fill {
        FillMode::Zero => "zero",
        FillMode::PerChannelMean => "mean",
    };
    let part_source = match config.part_source {
        PartMapSource::StageACrop => "stage-a-crop",
        PartMapSource::StageB => "stage-b",
    };
    format!(
        "encoder.image_side={}\n\
         encoder.patch_side={}\n\
         encoder.channels={}\n\
         encoder.n_layers={}\n\
         encoder.n_heads={}\n\
         encoder.embed_dim={}\n\
         encoder.mlp_hidden={}\n\
         encoder.n_classes={}\n\
         rollout.fusion={fusion}\n\
         localize.close_radius={}\n\
         localize.connectivity={connectivity}\n\
         localize.select={select}\n\
         scoring.kernel_ratio={}\n\
         scoring.ratio_mode={ratio_mode}\n\
         scoring.kernel_snap={snap}\n\
         scoring.stride={}\n\
         scoring.pooling={pooling}\n\
         scoring.gem_p={gem_p}\n\
         scoring.top_k={}\n\
         scoring.iou_threshold={}\n\
         augment.erase_probability={}\n\
         augment.erase_threshold={}\n\
         augment.crop_threshold={}\n\
         augment.crop_padding={}\n\
         augment.fill={fill}\n\
         pipeline.part_source={part_source}\n",
        config.encoder.image_side,
        config.encoder.patch_side,
        config.encoder.channels,
        config.encoder.n_layers,
        config.encoder.n_heads,
        config.encoder.embed_dim,
        config.encoder.mlp_hidden,
        config.encoder.n_classes,
        config.localize.close_radius,
        config.scoring.kernel_ratio,
        config.scoring.stride,
        config.scoring.top_k,
        config.scoring.iou_threshold,
        config.augment.erase_probability,
        config.augment.erase_threshold,
        config.augment.crop_threshold,
        config.augment.crop_padding,
    )
}

pub fn load_run_config(path: &Path) -> Result<PipelineConfig> {
    parse_run_config(&fs::read_to_string(path)?)
}
