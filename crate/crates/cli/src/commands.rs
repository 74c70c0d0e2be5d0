//! Subcommand implementations. Every command follows the same shape:
//! load and validate all inputs, compute every output in memory, and only
//! then write files — so an error never leaves partial outputs behind.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use attnscope_core::io::imgfile::{load_image, save_image};
use attnscope_core::io::overlay::render_overlay;
use attnscope_core::io::runcfg::load_run_config;
use attnscope_core::io::tensor::{load_attention_external, read_tensor, stack_from_tensor, write_tensor};
use attnscope_core::io::weights::{load_weights, save_weights};
use attnscope_core::{
    attention_crop, attention_crop_box, attention_erase, forward_image, kernel_from_object,
    localize_object, nms_topk, rollout_map, run_stages, score_windows_with_kernel,
    synthetic_quadrant_dataset, train_toy, upsample_map, AttentionMap, BoundingBox, Error,
    FillMode, HeadFusion, Image, MapProvenance, MapSpace, PipelineConfig, PoolMode, RatioMode,
    ResizeFilter, Result, RunMode, StageOutputs, WeightSet,
};

use crate::{Command, FillArg, FusionArg, OutArgs, PoolingArg, RatioModeArg, ScoringArgs, SeedArg};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Rollout { attn, image, fusion, config, out } => {
            cmd_rollout(&attn, image.as_deref(), fusion, config.as_deref(), &out)
        }
        Command::Localize { attn, image, weights, config, out } => {
            cmd_localize(attn.as_deref(), image.as_deref(), weights.as_deref(), config.as_deref(), &out)
        }
        Command::Parts { attn, image, weights, config, scoring, out } => cmd_parts(
            attn.as_deref(),
            image.as_deref(),
            weights.as_deref(),
            config.as_deref(),
            &scoring,
            &out,
        ),
        Command::Augment {
            image,
            attn,
            weights,
            config,
            erase_p,
            erase_t,
            fill,
            parallel,
            seed,
            out,
        } => cmd_augment(
            &image,
            attn.as_deref(),
            weights.as_deref(),
            config.as_deref(),
            erase_p,
            erase_t,
            fill,
            parallel,
            &seed,
            &out,
        ),
        Command::Pipeline { image, weights, config, scoring, parallel, seed, out } => {
            cmd_pipeline(&image, weights.as_deref(), config.as_deref(), &scoring, parallel, &seed, &out)
        }
        Command::TrainToy { n, epochs, lr, config, seed, out } => {
            cmd_train_toy(n, epochs, lr, config.as_deref(), &seed, &out)
        }
        Command::Overlay { image, attn, boxes, config, out } => {
            cmd_overlay(&image, &attn, boxes.as_deref(), config.as_deref(), &out)
        }
        Command::Selftest => cmd_selftest(),
    }
}

// ---------------------------------------------------------------- helpers

fn resolve_seed(arg: &SeedArg) -> Result<u64> {
    if let Some(seed) = arg.seed {
        return Ok(seed);
    }
    match std::env::var("ATTNSCOPE_SEED") {
        Ok(text) => text
            .parse()
            .map_err(|_| Error::Config(format!("ATTNSCOPE_SEED must be an unsigned integer, got {text:?}"))),
        Err(_) => Ok(0),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => load_run_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn apply_scoring(config: &mut PipelineConfig, args: &ScoringArgs) -> Result<()> {
    if let Some(r) = args.kernel_ratio {
        config.scoring.kernel_ratio = r;
    }
    if let Some(mode) = args.ratio_mode {
        config.scoring.ratio_mode = match mode {
            RatioModeArg::Linear => RatioMode::Linear,
            RatioModeArg::Area => RatioMode::Area,
        };
    }
    if let Some(snap) = args.kernel_snap {
        config.scoring.kernel_snap = Some(snap);
    }
    if let Some(stride) = args.stride {
        config.scoring.stride = stride;
    }
    if let Some(k) = args.topk {
        config.scoring.top_k = k;
    }
    if let Some(iou) = args.iou {
        config.scoring.iou_threshold = iou;
    }
    match (args.pooling, args.gem_p) {
        (Some(PoolingArg::Avg), _) => config.scoring.pooling = PoolMode::Average,
        (Some(PoolingArg::Max), _) => config.scoring.pooling = PoolMode::Max,
        (Some(PoolingArg::Gem), p) => {
            config.scoring.pooling = PoolMode::Gem { p: p.unwrap_or(3.0) }
        }
        (None, Some(p)) => {
            if let PoolMode::Gem { p: ref mut old } = config.scoring.pooling {
                *old = p;
            }
        }
        (None, None) => {}
    }
    config.scoring.validate()
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string())
}

/// Match the image's channel count to what the encoder expects.
fn adapt_channels(image: &Image, want: usize) -> Result<Image> {
    let have = image.channels();
    if have == want {
        return Ok(image.clone());
    }
    match (have, want) {
        (3, 1) => Image::from_plane(image.to_gray()),
        (1, 3) => {
            let (h, w) = (image.height(), image.width());
            let data = Array3::from_shape_fn((h, w, 3), |(y, x, _)| image.data()[[y, x, 0]]);
            Image::new(data)
        }
        _ => Err(Error::Shape(format!(
            "cannot adapt a {have}-channel image to {want} channels"
        ))),
    }
}

/// Encode an image with the configured encoder and roll the attention out
/// into a patch-grid map.
fn map_from_weights(
    image: &Image,
    config: &PipelineConfig,
    weights: &WeightSet,
) -> Result<AttentionMap> {
    let side = config.encoder.image_side;
    let adapted = adapt_channels(image, config.encoder.channels)?;
    let working = adapted.resize(side, side, ResizeFilter::Bilinear)?;
    let (_, stack) = forward_image(&working, &config.encoder, weights)?;
    rollout_map(&stack, &config.rollout)
}

/// Patch-grid map from `--attn`, or from `--image` + `--weights`.
fn obtain_map(
    attn: Option<&Path>,
    image: Option<&Image>,
    weights_path: Option<&Path>,
    config: &PipelineConfig,
) -> Result<AttentionMap> {
    match (attn, image, weights_path) {
        (Some(path), _, _) => {
            let (stack, warnings) = load_attention_external(path, None)?;
            if warnings > 0 {
                eprintln!("warning: renormalized {warnings} attention rows from {}", path.display());
            }
            rollout_map(&stack, &config.rollout)
        }
        (None, Some(img), Some(wpath)) => {
            let weights = load_weights(wpath, &config.encoder)?;
            map_from_weights(img, config, &weights)
        }
        _ => Err(Error::Config(
            "need --attn, or --image together with --weights".into(),
        )),
    }
}

/// Upsample a patch map to image resolution when an image is present.
fn map_at_image_scale(map: AttentionMap, image: Option<&Image>) -> Result<AttentionMap> {
    match image {
        Some(img) => {
            if map.height() == img.height() && map.width() == img.width() {
                Ok(map)
            } else {
                upsample_map(&map, img.height(), img.width(), ResizeFilter::Bilinear)
            }
        }
        None => Ok(map),
    }
}

fn mean_in_box(map: &AttentionMap, bbox: &BoundingBox) -> f64 {
    let mut sum = 0.0;
    for y in bbox.y0..bbox.y1.min(map.height()) {
        for x in bbox.x0..bbox.x1.min(map.width()) {
            sum += map.values[[y, x]];
        }
    }
    sum / bbox.area() as f64
}

fn parse_box_lines(text: &str) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::Validation(format!(
                "box line {}: expected `x0 y0 x1 y1 [score]`, got {line:?}",
                i + 1
            )));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| {
                Error::Validation(format!("box line {}: bad coordinate {s:?}", i + 1))
            })
        };
        boxes.push(BoundingBox::new(
            parse(fields[0])?,
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
        )?);
    }
    Ok(boxes)
}

/// Run a per-image job sequentially or on a bounded rayon pool.
fn run_batch<T, F>(count: usize, parallel: Option<usize>, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    match parallel {
        None => (0..count).map(job).collect(),
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| (0..count).into_par_iter().map(|i| job(i)).collect())
        }
    }
}

// ------------------------------------------------------------- subcommands

fn cmd_rollout(
    attn: &Path,
    image: Option<&Path>,
    fusion: Option<FusionArg>,
    config: Option<&Path>,
    out: &OutArgs,
) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(f) = fusion {
        config.rollout.fusion = match f {
            FusionArg::Mean => HeadFusion::Mean,
            FusionArg::Max => HeadFusion::Max,
            FusionArg::Min => HeadFusion::Min,
        };
    }
    let (stack, warnings) = load_attention_external(attn, None)?;
    if warnings > 0 {
        eprintln!("warning: renormalized {warnings} attention rows from {}", attn.display());
    }
    let map = rollout_map(&stack, &config.rollout)?;

    let overlay = match image {
        Some(path) => {
            let img = load_image(path)?;
            let up = map_at_image_scale(map.clone(), Some(&img))?;
            Some((stem(path), render_overlay(&img, &up, &[])?))
        }
        None => None,
    };

    fs::create_dir_all(&out.out_dir)?;
    let map_path = out.out_dir.join(format!("{}_rollout.att", stem(attn)));
    write_tensor(&map_path, &map.values.clone().into_dyn())?;
    if let Some((image_stem, rendered)) = overlay {
        save_image(&out.out_dir.join(format!("{image_stem}_overlay.png")), &rendered)?;
    }
    let (my, mx) = map.argmax();
    println!(
        "rollout: {} layers x {} heads over {} tokens -> {}x{} map, max {:.6} at ({my}, {mx})",
        stack.n_layers(),
        stack.n_heads(),
        stack.n_tokens(),
        map.height(),
        map.width(),
        map.max(),
    );
    Ok(())
}

fn cmd_localize(
    attn: Option<&Path>,
    image: Option<&Path>,
    weights: Option<&Path>,
    config: Option<&Path>,
    out: &OutArgs,
) -> Result<()> {
    let config = load_config(config)?;
    let img = image.map(load_image).transpose()?;
    let map = obtain_map(attn, img.as_ref(), weights, &config)?;
    let map = map_at_image_scale(map, img.as_ref())?;
    let (bbox, _mask) = localize_object(&map, &config.localize)?;
    let line = bbox.to_line(mean_in_box(&map, &bbox));

    let name = image.or(attn).map(stem).unwrap_or_else(|| "out".into());
    let overlay = img
        .as_ref()
        .map(|i| render_overlay(i, &map, std::slice::from_ref(&bbox)))
        .transpose()?;

    fs::create_dir_all(&out.out_dir)?;
    fs::write(out.out_dir.join(format!("{name}_box.txt")), format!("{line}\n"))?;
    if let Some(rendered) = overlay {
        save_image(&out.out_dir.join(format!("{name}_overlay.png")), &rendered)?;
    }
    println!("{line}");
    Ok(())
}

fn cmd_parts(
    attn: Option<&Path>,
    image: Option<&Path>,
    weights: Option<&Path>,
    config: Option<&Path>,
    scoring: &ScoringArgs,
    out: &OutArgs,
) -> Result<()> {
    let mut config = load_config(config)?;
    apply_scoring(&mut config, scoring)?;
    let img = image.map(load_image).transpose()?;
    let map = obtain_map(attn, img.as_ref(), weights, &config)?;
    let map = map_at_image_scale(map, img.as_ref())?;

    let kernel = kernel_from_object(map.height(), map.width(), &config.scoring)?;
    let candidates = score_windows_with_kernel(&map, kernel, &config.scoring)?;
    let kept = nms_topk(&candidates, config.scoring.iou_threshold, config.scoring.top_k);
    let lines: Vec<String> = kept.iter().map(|c| c.bbox.to_line(c.score)).collect();

    let name = image.or(attn).map(stem).unwrap_or_else(|| "out".into());
    let boxes: Vec<BoundingBox> = kept.iter().map(|c| c.bbox).collect();
    let overlay = img.as_ref().map(|i| render_overlay(i, &map, &boxes)).transpose()?;

    fs::create_dir_all(&out.out_dir)?;
    fs::write(
        out.out_dir.join(format!("{name}_parts.txt")),
        lines.join("\n") + "\n",
    )?;
    if let Some(rendered) = overlay {
        save_image(&out.out_dir.join(format!("{name}_parts.png")), &rendered)?;
    }
    for line in &lines {
        println!("{line}");
    }
    Ok(())
}

struct AugmentResult {
    name: String,
    extension: String,
    erased: Image,
    erase_fired: bool,
    pixels_erased: usize,
    cropped: Image,
    crop_applied: bool,
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    images: &[PathBuf],
    attn: Option<&Path>,
    weights_path: Option<&Path>,
    config: Option<&Path>,
    erase_p: Option<f64>,
    erase_t: Option<f64>,
    fill: Option<FillArg>,
    parallel: Option<usize>,
    seed: &SeedArg,
    out: &OutArgs,
) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(p) = erase_p {
        config.augment.erase_probability = p;
    }
    if let Some(t) = erase_t {
        config.augment.erase_threshold = t;
    }
    if let Some(f) = fill {
        config.augment.fill = match f {
            FillArg::Zero => FillMode::Zero,
            FillArg::Mean => FillMode::PerChannelMean,
        };
    }
    config.augment.validate()?;
    let seed = resolve_seed(seed)?;

    // Load every input (and the map source) before any computation so a bad
    // path fails the whole batch up front.
    let loaded: Vec<Image> = images.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    let shared_stack = match attn {
        Some(path) => {
            let (stack, warnings) = load_attention_external(path, None)?;
            if warnings > 0 {
                eprintln!("warning: renormalized {warnings} attention rows from {}", path.display());
            }
            Some(stack)
        }
        None => None,
    };
    let weights = match weights_path {
        Some(path) => Some(load_weights(path, &config.encoder)?),
        None => None,
    };
    if shared_stack.is_none() && weights.is_none() {
        return Err(Error::Config("need --attn or --weights to guide augmentation".into()));
    }

    let results = run_batch(images.len(), parallel, |i| {
        let img = &loaded[i];
        let map = match &shared_stack {
            Some(stack) => rollout_map(stack, &config.rollout)?,
            None => map_from_weights(img, &config, weights.as_ref().expect("checked above"))?,
        };
        let map = map_at_image_scale(map, Some(img))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let outcome = attention_erase(img, &map, &config.augment, &mut rng)?;
        let crop_applied = attention_crop_box(&map, &config.augment)?.is_some();
        let cropped = attention_crop(img, &map, &config.augment)?;
        let extension = images[i]
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "png".to_string());
        Ok(AugmentResult {
            name: stem(&images[i]),
            extension,
            erased: outcome.image,
            erase_fired: outcome.fired,
            pixels_erased: outcome.pixels_erased,
            cropped,
            crop_applied,
        })
    })?;

    fs::create_dir_all(&out.out_dir)?;
    let mut log = String::new();
    let mut fired = 0usize;
    for r in &results {
        save_image(
            &out.out_dir.join(format!("{}_erased.{}", r.name, r.extension)),
            &r.erased,
        )?;
        save_image(
            &out.out_dir.join(format!("{}_cropped.{}", r.name, r.extension)),
            &r.cropped,
        )?;
        log.push_str(&format!(
            "{} erase_fired={} pixels_erased={} crop_applied={}\n",
            r.name, r.erase_fired, r.pixels_erased, r.crop_applied
        ));
        fired += usize::from(r.erase_fired);
    }
    fs::write(out.out_dir.join("augment_log.txt"), log)?;
    println!("augment: {} images, {fired} erase draws fired", results.len());
    Ok(())
}

fn cmd_pipeline(
    images: &[PathBuf],
    weights_path: Option<&Path>,
    config: Option<&Path>,
    scoring: &ScoringArgs,
    parallel: Option<usize>,
    seed: &SeedArg,
    out: &OutArgs,
) -> Result<()> {
    let mut config = load_config(config)?;
    apply_scoring(&mut config, scoring)?;
    let seed = resolve_seed(seed)?;
    let weights = match weights_path {
        Some(path) => load_weights(path, &config.encoder)?,
        None => WeightSet::seeded(&config.encoder, seed)?,
    };

    let loaded: Vec<Image> = images
        .iter()
        .map(|p| adapt_channels(&load_image(p)?, config.encoder.channels))
        .collect::<Result<_>>()?;

    let results: Vec<StageOutputs> = run_batch(images.len(), parallel, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        run_stages(&loaded[i], &config, &weights, RunMode::Eval, &mut rng)
    })?;

    fs::create_dir_all(&out.out_dir)?;
    for (path, outputs) in images.iter().zip(&results) {
        let name = stem(path);
        write_tensor(
            &out.out_dir.join(format!("{name}_map.att")),
            &outputs.map_full.values.clone().into_dyn(),
        )?;
        let mut boxes_text =
            outputs.box_object.to_line(mean_in_box(&outputs.map_full, &outputs.box_object)) + "\n";
        let mut draw = vec![outputs.box_object];
        for (bbox, score) in outputs.part_boxes_image.iter().zip(&outputs.part_scores) {
            boxes_text.push_str(&bbox.to_line(*score));
            boxes_text.push('\n');
            draw.push(*bbox);
        }
        fs::write(out.out_dir.join(format!("{name}_boxes.txt")), boxes_text)?;
        let rendered = render_overlay(&outputs.image_working, &outputs.map_full, &draw)?;
        save_image(&out.out_dir.join(format!("{name}_overlay.png")), &rendered)?;

        let (pred, _) = outputs.predict();
        let b = &outputs.box_object;
        println!(
            "{name}: class {pred}, object {} {} {} {}, parts {}",
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            outputs.part_boxes.len()
        );
    }
    Ok(())
}

fn cmd_train_toy(
    n: usize,
    epochs: usize,
    lr: f64,
    config: Option<&Path>,
    seed: &SeedArg,
    out: &OutArgs,
) -> Result<()> {
    let config = load_config(config)?;
    let seed = resolve_seed(seed)?;
    let highres = config.encoder.image_side * 2;
    let dataset = synthetic_quadrant_dataset(n, highres, seed)?;
    let mut weights = WeightSet::seeded(&config.encoder, seed)?;
    let report = train_toy(&dataset, &config, &mut weights, epochs, lr, seed)?;

    let mut metrics = String::from("epoch,mean_joint_loss,accuracy\n");
    for row in &report.epochs {
        metrics.push_str(&row.to_line());
        metrics.push('\n');
    }

    fs::create_dir_all(&out.out_dir)?;
    fs::write(out.out_dir.join("metrics.csv"), metrics)?;
    save_weights(&out.out_dir.join("trained.atw"), &weights)?;
    let first = &report.epochs[0];
    let last = report.epochs.last().expect("epochs >= 1");
    println!(
        "train-toy: {n} images, {epochs} epochs, loss {:.6} -> {:.6}, accuracy {:.4}",
        first.mean_joint_loss, last.mean_joint_loss, report.final_accuracy
    );
    Ok(())
}

fn cmd_overlay(
    image: &Path,
    attn: &Path,
    boxes: Option<&Path>,
    config: Option<&Path>,
    out: &OutArgs,
) -> Result<()> {
    let config = load_config(config)?;
    let img = load_image(image)?;
    let tensor = read_tensor(attn)?;
    let map = match tensor.ndim() {
        2 => {
            let values = tensor
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::Shape(e.to_string()))?;
            AttentionMap::new(values, MapSpace::Pixel, MapProvenance::FullImage)?
        }
        4 => {
            let (stack, warnings) = stack_from_tensor(tensor, None)?;
            if warnings > 0 {
                eprintln!("warning: renormalized {warnings} attention rows from {}", attn.display());
            }
            rollout_map(&stack, &config.rollout)?
        }
        d => {
            return Err(Error::Shape(format!(
                "{}: expected a 2-D map or 4-D stack, got {d}-D",
                attn.display()
            )))
        }
    };
    let map = map_at_image_scale(map, Some(&img))?;
    let drawn = match boxes {
        Some(path) => parse_box_lines(&fs::read_to_string(path)?)?,
        None => Vec::new(),
    };
    let rendered = render_overlay(&img, &map, &drawn)?;

    fs::create_dir_all(&out.out_dir)?;
    let name = format!("{}_overlay.png", stem(image));
    save_image(&out.out_dir.join(&name), &rendered)?;
    println!("overlay: wrote {name} ({} boxes)", drawn.len());
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let results = attnscope_core::run_selftest();
    let mut failed = 0usize;
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Error::Validation(format!(
            "selftest: {failed}/{} suites failed",
            results.len()
        )));
    }
    println!("selftest: all {} suites passed", results.len());
    Ok(())
}
