//! Seeded generators for synthetic test data. These live in the library (not
//! behind `cfg(test)`) because the `selftest` CLI subcommand and the benches
//! run the same randomized suites at runtime.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{AttentionStack, HeadWeights};
use crate::image::Image;
use crate::localize::{BinaryMask, BoundingBox};
use crate::pipeline::StageOutputs;
use crate::regions::RegionCandidate;
use crate::rollout::{AttentionMap, MapProvenance, MapSpace};

/// Uniform-noise image with values in [0, 1).
pub fn noise_image(height: usize, width: usize, channels: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_simple_fn((height, width, channels), || rng.random::<f64>());
    Image::new(data).expect("non-empty noise image")
}

/// Uniform-noise pixel-space attention map with values in [0, 1).
pub fn random_map(height: usize, width: usize, seed: u64) -> AttentionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_simple_fn((height, width), || rng.random::<f64>());
    AttentionMap::new(values, MapSpace::Pixel, MapProvenance::FullImage).expect("valid map")
}

/// Bernoulli mask with the given foreground density.
pub fn random_mask(height: usize, width: usize, density: f64, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BinaryMask::new(Array2::from_shape_simple_fn((height, width), || {
        rng.random::<f64>() < density
    }))
}

/// Valid attention stack: positive noise, softly peaked, row-normalized.
pub fn random_stack(layers: usize, heads: usize, tokens: usize, seed: u64) -> AttentionStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Array4::zeros((layers, heads, tokens, tokens));
    for l in 0..layers {
        for h in 0..heads {
            for r in 0..tokens {
                let mut row: Vec<f64> = (0..tokens).map(|_| rng.random::<f64>() + 0.01).collect();
                // sharpen one entry so rollout maps have structure
                let hot = rng.random_range(0..tokens);
                row[hot] += 2.0;
                let sum: f64 = row.iter().sum();
                for (c, v) in row.iter().enumerate() {
                    weights[(l, h, r, c)] = v / sum;
                }
            }
        }
    }
    AttentionStack::new(weights).expect("rows normalized by construction")
}

/// Head weights with uniform entries in [-0.5, 0.5).
pub fn random_head(
    in_dim: usize,
    hidden: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> HeadWeights {
    fn val(rng: &mut ChaCha8Rng) -> f64 {
        rng.random::<f64>() - 0.5
    }
    HeadWeights {
        fc1_w: Array2::from_shape_fn((in_dim, hidden), |_| val(rng)),
        fc1_b: Array1::from_shape_fn(hidden, |_| val(rng)),
        fc2_w: Array2::from_shape_fn((hidden, n_classes), |_| val(rng)),
        fc2_b: Array1::from_shape_fn(n_classes, |_| val(rng)),
    }
}

/// Random scored boxes inside a frame, with mixed sizes; for NMS tests.
pub fn random_candidates(
    n: usize,
    frame_h: usize,
    frame_w: usize,
    seed: u64,
) -> Vec<RegionCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = rng.random_range(1..=frame_w.min(6));
            let h = rng.random_range(1..=frame_h.min(6));
            let x0 = rng.random_range(0..=frame_w - w);
            let y0 = rng.random_range(0..=frame_h - h);
            RegionCandidate {
                bbox: BoundingBox::new(x0, y0, x0 + w, y0 + h).expect("valid by construction"),
                score: rng.random::<f64>(),
            }
        })
        .collect()
}

/// StageOutputs with random logits and CLS features and placeholder
/// geometry; enough for loss/prediction tests.
pub fn random_stage_outputs_with_cls(
    n_classes: usize,
    n_parts: usize,
    embed: usize,
    seed: u64,
) -> StageOutputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = |rng: &mut ChaCha8Rng| {
        Array1::from_shape_fn(n_classes, |_| rng.random_range(-2.0..2.0))
    };
    let cls = |rng: &mut ChaCha8Rng| {
        Array1::from_shape_fn(embed, |_| rng.random_range(-1.0..1.0))
    };
    let logits_a = logits(&mut rng);
    let logits_b = logits(&mut rng);
    let logits_c: Vec<_> = (0..n_parts).map(|_| logits(&mut rng)).collect();
    let cls_a = cls(&mut rng);
    let cls_b = cls(&mut rng);
    let cls_c: Vec<_> = (0..n_parts).map(|_| cls(&mut rng)).collect();
    let bbox = BoundingBox::new(0, 0, 2, 2).expect("valid");
    StageOutputs {
        logits_a,
        logits_b,
        logits_c,
        map_full: random_map(4, 4, seed),
        box_object: bbox,
        part_boxes: vec![bbox; n_parts],
        part_boxes_image: vec![bbox; n_parts],
        part_scores: vec![0.5; n_parts],
        image_working: Image::zeros(4, 4, 1),
        object_image: Image::zeros(4, 4, 1),
        part_images: vec![Image::zeros(4, 4, 1); n_parts],
        cls_a,
        cls_b,
        cls_c,
        erase_fired: Vec::new(),
    }
}

/// StageOutputs with random logits only (CLS dimension 4).
pub fn random_stage_outputs(n_classes: usize, n_parts: usize, seed: u64) -> StageOutputs {
    random_stage_outputs_with_cls(n_classes, n_parts, 4, seed)
}
