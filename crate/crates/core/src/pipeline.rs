//! Three-stage pipeline: (a) full image, (b) object crop, (c) part crops —
//! all through the same frozen encoder and shared classification head — plus
//! the joint loss, combined prediction, and a desk-scale training loop for
//! the head.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{attention_erase, AugmentConfig};
use crate::encoder::{
    apply_head_gradient, classify_head, cross_entropy, forward_image, head_gradient,
    AttentionStack, EncoderConfig, WeightSet,
};
use crate::error::{Error, Result};
use crate::image::{resize_plane, Image, ResizeFilter};
use crate::localize::{crop_object, localize_object, BoundingBox, LocalizeConfig};
use crate::regions::{kernel_from_object, nms_topk, score_windows_with_kernel, ScoringConfig};
use crate::rollout::{
    rollout_map, upsample_map, AttentionMap, MapProvenance, MapSpace, RolloutConfig,
};

/// Whether augmentations run before each stage's encoder pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

/// Where stage c takes its attention map from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartMapSource {
    /// The stage-a rollout map cropped to the object box (default).
    #[default]
    StageACrop,
    /// A fresh rollout of the stage-b forward pass on the object crop.
    StageB,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub rollout: RolloutConfig,
    pub localize: LocalizeConfig,
    pub scoring: ScoringConfig,
    pub augment: AugmentConfig,
    pub part_source: PartMapSource,
}

/// Everything one pipeline run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    pub logits_a: Array1<f64>,
    pub logits_b: Array1<f64>,
    pub logits_c: Vec<Array1<f64>>,
    /// Stage-a rollout map upsampled to the working resolution.
    pub map_full: AttentionMap,
    /// Object box in working-resolution full-frame coordinates.
    pub box_object: BoundingBox,
    /// Part boxes in the object crop's working-resolution frame.
    pub part_boxes: Vec<BoundingBox>,
    /// Part boxes mapped back into the full working-resolution frame.
    pub part_boxes_image: Vec<BoundingBox>,
    /// Pooled attention score per part, aligned with `part_boxes`.
    pub part_scores: Vec<f64>,
    /// Stage-a input image (downscaled, pre-augmentation).
    pub image_working: Image,
    pub object_image: Image,
    pub part_images: Vec<Image>,
    /// CLS embeddings per stage, for head training on frozen features.
    pub cls_a: Array1<f64>,
    pub cls_b: Array1<f64>,
    pub cls_c: Vec<Array1<f64>>,
    /// Which erase draws fired, in stage order a, b, c_1, c_2, …
    pub erase_fired: Vec<bool>,
}

impl StageOutputs {
    /// `(feature, label)` pairs covering every term of the joint loss.
    pub fn joint_batch(&self, label: usize) -> Vec<(Array1<f64>, usize)> {
        let mut batch = Vec::with_capacity(2 + self.cls_c.len());
        batch.push((self.cls_a.clone(), label));
        batch.push((self.cls_b.clone(), label));
        for cls in &self.cls_c {
            batch.push((cls.clone(), label));
        }
        batch
    }

    pub fn predict(&self) -> (usize, Array1<f64>) {
        predict_combined(&self.logits_a, Some(&self.logits_b), &self.logits_c)
    }
}

/// Per-stage cross-entropies and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub l_a: f64,
    pub l_b: f64,
    pub l_c: Vec<f64>,
    pub total: f64,
}

fn encode_cls(
    image: &Image,
    config: &EncoderConfig,
    weights: &WeightSet,
) -> Result<(Array1<f64>, AttentionStack)> {
    let (tokens, stack) = forward_image(image, config, weights)?;
    Ok((tokens.cls().to_owned(), stack))
}

/// Map a part box from the object crop's working frame into high-res frame
/// coordinates (covering rescale: floor the min edge, ceil the max edge).
fn part_box_to_highres(
    part: &BoundingBox,
    object_hr: &BoundingBox,
    working: usize,
) -> BoundingBox {
    let sy = object_hr.height() as f64 / working as f64;
    let sx = object_hr.width() as f64 / working as f64;
    let y0 = object_hr.y0 + (part.y0 as f64 * sy).floor() as usize;
    let y1 = (object_hr.y0 + (part.y1 as f64 * sy).ceil() as usize).min(object_hr.y1);
    let x0 = object_hr.x0 + (part.x0 as f64 * sx).floor() as usize;
    let x1 = (object_hr.x0 + (part.x1 as f64 * sx).ceil() as usize).min(object_hr.x1);
    BoundingBox { x0, y0, x1: x1.max(x0 + 1), y1: y1.max(y0 + 1) }
        .expand_to_min(2, 2, object_hr.y1, object_hr.x1)
}

/// Divide high-res coordinates back to the working frame (covering rescale).
fn highres_box_to_working(b: &BoundingBox, factor: usize, working: usize) -> BoundingBox {
    let x0 = b.x0 / factor;
    let y0 = b.y0 / factor;
    let x1 = b.x1.div_ceil(factor).min(working);
    let y1 = b.y1.div_ceil(factor).min(working);
    BoundingBox { x0, y0, x1: x1.max(x0 + 1), y1: y1.max(y0 + 1) }
}

/// Run all three stages on one high-resolution image.
///
/// The image must be square with a side that is an integer multiple of the
/// working resolution (`config.encoder.image_side`); factor 1 is allowed. In
/// train mode each stage input gets an independent attention-erase draw from
/// `rng` (in the fixed order a, b, c_1, c_2, …); eval mode never touches the
/// rng. Localization and part scoring always use the un-augmented maps.
pub fn run_stages<R: Rng>(
    image_highres: &Image,
    config: &PipelineConfig,
    weights: &WeightSet,
    mode: RunMode,
    rng: &mut R,
) -> Result<StageOutputs> {
    let enc = &config.encoder;
    enc.validate()?;
    config.scoring.validate()?;
    config.augment.validate()?;
    let working = enc.image_side;
    let (ih, iw) = (image_highres.height(), image_highres.width());
    if ih < working || iw < working {
        return Err(Error::Validation(format!(
            "input {ih}x{iw} is smaller than the working resolution {working}"
        )));
    }
    if ih != iw || ih % working != 0 {
        return Err(Error::Validation(format!(
            "input must be square with a side that is a multiple of {working}, got {ih}x{iw}"
        )));
    }
    if image_highres.channels() != enc.channels {
        return Err(Error::Shape(format!(
            "expected {} channels, got {}",
            enc.channels,
            image_highres.channels()
        )));
    }
    let factor = ih / working;
    let mut erase_fired = Vec::new();

    // --- stage a: full image ---
    let image_working = image_highres.resize(working, working, ResizeFilter::Bilinear)?;
    let (cls_a_clean, stack_a) = encode_cls(&image_working, enc, weights)?;
    let map_patch = rollout_map(&stack_a, &config.rollout)?;
    let map_full = upsample_map(&map_patch, working, working, ResizeFilter::Bilinear)?;
    let cls_a = match mode {
        RunMode::Eval => cls_a_clean,
        RunMode::Train => {
            let out = attention_erase(&image_working, &map_full, &config.augment, rng)?;
            erase_fired.push(out.fired);
            if out.pixels_erased > 0 {
                encode_cls(&out.image, enc, weights)?.0
            } else {
                cls_a_clean
            }
        }
    };

    // --- stage b: object crop ---
    let (box_object, _mask) = localize_object(&map_full, &config.localize)?;
    let (object_image, object_map) = crop_object(image_highres, &map_full, &box_object, working)?;
    let (cls_b_clean, stack_b) = encode_cls(&object_image, enc, weights)?;
    let cls_b = match mode {
        RunMode::Eval => cls_b_clean,
        RunMode::Train => {
            let out = attention_erase(&object_image, &object_map, &config.augment, rng)?;
            erase_fired.push(out.fired);
            if out.pixels_erased > 0 {
                encode_cls(&out.image, enc, weights)?.0
            } else {
                cls_b_clean
            }
        }
    };

    // --- stage c: part crops ---
    let part_map = match config.part_source {
        PartMapSource::StageACrop => object_map.clone(),
        PartMapSource::StageB => {
            let patch = rollout_map(&stack_b, &config.rollout)?;
            let up = upsample_map(&patch, working, working, ResizeFilter::Bilinear)?;
            AttentionMap::new(up.values, MapSpace::Pixel, MapProvenance::ObjectCrop)?
        }
    };
    let kernel = kernel_from_object(part_map.height(), part_map.width(), &config.scoring)?;
    let candidates = score_windows_with_kernel(&part_map, kernel, &config.scoring)?;
    let parts = nms_topk(&candidates, config.scoring.iou_threshold, config.scoring.top_k);

    let object_hr = box_object.scaled(factor);
    let mut part_boxes = Vec::with_capacity(parts.len());
    let mut part_boxes_image = Vec::with_capacity(parts.len());
    let mut part_scores = Vec::with_capacity(parts.len());
    let mut part_images = Vec::with_capacity(parts.len());
    let mut cls_c = Vec::with_capacity(parts.len());
    for part in &parts {
        let hr = part_box_to_highres(&part.bbox, &object_hr, working);
        let crop = image_highres.crop(hr.x0, hr.y0, hr.x1, hr.y1)?;
        let part_image = crop.resize(working, working, ResizeFilter::Bilinear)?;
        let map_crop = part_map.values.slice(ndarray::s![
            part.bbox.y0..part.bbox.y1,
            part.bbox.x0..part.bbox.x1
        ]);
        let part_map_values = resize_plane(map_crop, working, working, ResizeFilter::Bilinear);
        let part_map_full =
            AttentionMap::new(part_map_values, MapSpace::Pixel, MapProvenance::ObjectCrop)?;
        let cls = match mode {
            RunMode::Eval => encode_cls(&part_image, enc, weights)?.0,
            RunMode::Train => {
                let out = attention_erase(&part_image, &part_map_full, &config.augment, rng)?;
                erase_fired.push(out.fired);
                encode_cls(&out.image, enc, weights)?.0
            }
        };
        part_boxes.push(part.bbox);
        part_boxes_image.push(highres_box_to_working(&hr, factor, working));
        part_scores.push(part.score);
        part_images.push(part_image);
        cls_c.push(cls);
    }

    let logits_a = classify_head(cls_a.view(), &weights.head)?;
    let logits_b = classify_head(cls_b.view(), &weights.head)?;
    let logits_c = cls_c
        .iter()
        .map(|c| classify_head(c.view(), &weights.head))
        .collect::<Result<Vec<_>>>()?;

    Ok(StageOutputs {
        logits_a,
        logits_b,
        logits_c,
        map_full,
        box_object,
        part_boxes,
        part_boxes_image,
        part_scores,
        image_working,
        object_image,
        part_images,
        cls_a,
        cls_b,
        cls_c,
        erase_fired,
    })
}

/// Cross-entropy per stage; `total` accumulates in the fixed order
/// `l_a + l_b + l_c_1 + … + l_c_N`.
pub fn joint_loss(outputs: &StageOutputs, label: usize) -> Result<JointLoss> {
    let l_a = cross_entropy(outputs.logits_a.view(), label)?;
    let l_b = cross_entropy(outputs.logits_b.view(), label)?;
    let mut l_c = Vec::with_capacity(outputs.logits_c.len());
    let mut total = l_a + l_b;
    for logits in &outputs.logits_c {
        let l = cross_entropy(logits.view(), label)?;
        total += l;
        l_c.push(l);
    }
    Ok(JointLoss { l_a, l_b, l_c, total })
}

/// Mean of the available stage logits (parts averaged first so their count
/// doesn't dominate); argmax with lowest-index tie-break.
pub fn predict_combined(
    logits_a: &Array1<f64>,
    logits_b: Option<&Array1<f64>>,
    logits_c: &[Array1<f64>],
) -> (usize, Array1<f64>) {
    let mut combined = logits_a.clone();
    let mut terms = 1.0;
    if let Some(b) = logits_b {
        combined += b;
        terms += 1.0;
    }
    if !logits_c.is_empty() {
        let mut c_mean = logits_c[0].clone();
        for c in &logits_c[1..] {
            c_mean += c;
        }
        c_mean /= logits_c.len() as f64;
        combined += &c_mean;
        terms += 1.0;
    }
    combined /= terms;
    let mut best = 0;
    for (i, &v) in combined.iter().enumerate() {
        if v > combined[best] {
            best = i;
        }
    }
    (best, combined)
}

/// One row of the training log; serializes as `epoch,mean_joint_loss,accuracy`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_joint_loss: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        format!("{},{},{}", self.epoch, self.mean_joint_loss, self.accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct ToyTrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub final_accuracy: f64,
}

/// Balanced two-class synthetic set at `highres_side` (a multiple of the toy
/// working resolution): class 0 is a solid bright square jittered inside the
/// top-left quadrant, class 1 a bright ring jittered inside the bottom-right
/// quadrant, over low-amplitude noise. Localizable by construction.
pub fn synthetic_quadrant_dataset(
    n: usize,
    highres_side: usize,
    seed: u64,
) -> Result<Vec<(Image, usize)>> {
    if n == 0 {
        return Err(Error::EmptyInput("dataset"));
    }
    if highres_side < 16 {
        return Err(Error::Config("highres_side must be >= 16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = highres_side;
    let patch = side / 3;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut data = ndarray::Array3::zeros((side, side, 1));
        for v in data.iter_mut() {
            *v = rng.random_range(0.0..0.05);
        }
        let span = side / 2 - patch;
        let jy = rng.random_range(0..=span);
        let jx = rng.random_range(0..=span);
        let (oy, ox) = if label == 0 {
            (jy, jx)
        } else {
            (side / 2 + jy, side / 2 + jx)
        };
        let ring = patch / 3;
        for y in 0..patch {
            for x in 0..patch {
                let on = if label == 0 {
                    true // solid square
                } else {
                    // hollow ring
                    y < ring || y >= patch - ring || x < ring || x >= patch - ring
                };
                if on {
                    data[(oy + y, ox + x, 0)] = rng.random_range(0.95..1.0);
                }
            }
        }
        out.push((Image::new(data)?, label));
    }
    Ok(out)
}

/// Cached per-image features for the head-only training loop.
struct CachedFeatures {
    train: Vec<(Array1<f64>, usize)>, // flattened joint batch
    eval_outputs: StageOutputs,
    label: usize,
}

/// Head-only training on the joint loss. The encoder is frozen, so stage
/// features are precomputed once per image: train-mode features with a fixed
/// per-image rng stream (stream id = image index under the root seed), and
/// eval-mode features for accuracy. Each step applies the gradient of one
/// image's full joint loss. Accuracy is measured on eval-mode combined
/// predictions at the end of every epoch.
pub fn train_toy(
    dataset: &[(Image, usize)],
    config: &PipelineConfig,
    weights: &mut WeightSet,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<ToyTrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    if epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be finite and >= 0, got {learning_rate}"
        )));
    }
    for (_, label) in dataset {
        if *label >= config.encoder.n_classes {
            return Err(Error::LabelOutOfRange {
                label: *label,
                n_classes: config.encoder.n_classes,
            });
        }
    }

    let mut cache = Vec::with_capacity(dataset.len());
    for (i, (image, label)) in dataset.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let train_out = run_stages(image, config, weights, RunMode::Train, &mut rng)?;
        let eval_out = run_stages(image, config, weights, RunMode::Eval, &mut rng)?;
        cache.push(CachedFeatures {
            train: train_out.joint_batch(*label),
            eval_outputs: eval_out,
            label: *label,
        });
    }

    let mut metrics = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        for item in &cache {
            let (grad, joint) = head_gradient(&weights.head, &item.train)?;
            apply_head_gradient(&mut weights.head, &grad, learning_rate);
            loss_sum += joint;
        }
        let mut correct = 0usize;
        for item in &cache {
            let logits_a = classify_head(item.eval_outputs.cls_a.view(), &weights.head)?;
            let logits_b = classify_head(item.eval_outputs.cls_b.view(), &weights.head)?;
            let logits_c = item
                .eval_outputs
                .cls_c
                .iter()
                .map(|c| classify_head(c.view(), &weights.head))
                .collect::<Result<Vec<_>>>()?;
            let (pred, _) = predict_combined(&logits_a, Some(&logits_b), &logits_c);
            if pred == item.label {
                correct += 1;
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            mean_joint_loss: loss_sum / cache.len() as f64,
            accuracy: correct as f64 / cache.len() as f64,
        });
    }
    let final_accuracy = metrics.last().expect("epochs >= 1").accuracy;
    Ok(ToyTrainReport {
        epochs: metrics,
        final_accuracy,
    })
}
